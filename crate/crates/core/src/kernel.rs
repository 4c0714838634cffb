//! Speculative sampling: accept/reject, residual resampling, bonus tokens,
//! and a single-process reference decoder used as the protocol oracle.
//!
//! The acceptance ratio is `min(1, p/q)` where `q` is the draft probability
//! of the drafted token and `p` the target probability. With the residual
//! `norm(max(0, P - Q))` this makes every emitted token distributed exactly
//! as the target model ([`first_token_law`] evaluates that law in closed
//! form).
//!
//! Any probability that crosses the wire in either protocol goes through
//! [`Precision::quantize`] before it is used here, so an endpoint that
//! received a value and an endpoint that computed it locally make the same
//! decision. Quantizing is idempotent, so callers may pass either form.

use std::sync::Arc;

use crate::dist::{normalize, sample, Dist, Precision, SamplingConfig, TokenId};
use crate::error::{Error, Result};
use crate::models::{Filtered, LanguageModel};
use crate::rng::RoundRng;

pub fn accept_prob(q_val: f64, p_val: f64) -> Result<f64> {
    if !(q_val > 0.0) {
        return Err(Error::InvalidDraftProb(q_val));
    }
    if p_val <= 0.0 {
        return Ok(0.0);
    }
    Ok((p_val / q_val).min(1.0))
}

pub fn accept_test(q_val: f64, p_val: f64, r: f64) -> Result<bool> {
    Ok(r < accept_prob(q_val, p_val)?)
}

/// `norm(max(0, P - Q))`.
pub fn residual(p: &[f64], q: &[f64]) -> Result<Dist> {
    if p.len() != q.len() {
        return Err(Error::InvalidDist(format!(
            "residual of lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    let raw: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a - b).max(0.0)).collect();
    normalize(&raw)
}

/// Draws the replacement token for a rejected position from wire-precision
/// copies of `P_j` and `Q_j`.
pub fn resample(p: &[f64], q: &[f64], precision: Precision, r: f64) -> Result<TokenId> {
    if precision == Precision::Exact {
        return Ok(sample(&residual(p, q)?, r));
    }
    if p.len() != q.len() {
        return Err(Error::InvalidDist(format!("resample over lengths {} and {}", p.len(), q.len())));
    }
    // entries with p = 0 stay 0 after quantizing, so only the support of P
    // is visited; the draw matches sampling the normalized residual
    let support: Vec<(usize, f64)> = p
        .iter()
        .enumerate()
        .filter(|(_, &a)| a > 0.0)
        .map(|(i, &a)| (i, (precision.quantize(a) - precision.quantize(q[i])).max(0.0)))
        .collect();
    let total: f64 = support.iter().map(|(_, w)| w).sum();
    if !(total > 0.0) {
        return Err(Error::ZeroMass);
    }
    let mut cumulative = 0.0;
    let mut last = None;
    for &(i, w) in &support {
        if w <= 0.0 {
            continue;
        }
        cumulative += w / total;
        last = Some(i);
        if cumulative > r {
            return Ok(TokenId(i as u32));
        }
    }
    Ok(TokenId(last.expect("positive total has a positive entry") as u32))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyOutcome {
    pub gamma: usize,
    /// 1-based position of the first rejection, or `gamma + 1`.
    pub reject_position: usize,
    /// Resampled or bonus token. `None` when a rejection's resample is left
    /// to the device.
    pub result_token: Option<TokenId>,
}

impl VerifyOutcome {
    pub fn rejected(&self) -> bool {
        self.reject_position <= self.gamma
    }

    pub fn accepted_count(&self) -> usize {
        self.reject_position - 1
    }

    /// Draft tokens that reached the accept test this round.
    pub fn presented(&self) -> usize {
        self.reject_position.min(self.gamma)
    }
}

/// Scans draft positions in order and stops at the first rejection.
///
/// `q_vals[i]` is the draft probability of `tokens[i]`; `target` holds the
/// `gamma + 1` target distributions. With `draft_dists` the rejected
/// position is resampled here (baseline placement); without it the
/// resample is deferred and `result_token` is `None`.
pub fn verify_round(
    tokens: &[TokenId],
    q_vals: &[f64],
    target: &[Arc<Dist>],
    rng: &RoundRng,
    precision: Precision,
    draft_dists: Option<&[&[f64]]>,
) -> Result<VerifyOutcome> {
    let gamma = tokens.len();
    if q_vals.len() != gamma || target.len() != gamma + 1 {
        return Err(Error::InvalidDist(format!(
            "verify_round: {gamma} tokens, {} q-values, {} target dists",
            q_vals.len(),
            target.len()
        )));
    }
    for (j, (&token, &q)) in tokens.iter().zip(q_vals).enumerate() {
        let q = precision.quantize(q);
        let p = target[j].prob(token);
        if accept_test(q, p, rng.accept.uniform(j as u64))? {
            continue;
        }
        let result_token = match draft_dists {
            Some(dists) => Some(resample(
                target[j].probs(),
                dists[j],
                precision,
                rng.resample.uniform(0),
            )?),
            None => None,
        };
        return Ok(VerifyOutcome {
            gamma,
            reject_position: j + 1,
            result_token,
        });
    }
    Ok(VerifyOutcome {
        gamma,
        reject_position: gamma + 1,
        result_token: Some(sample(&target[gamma], rng.bonus.uniform(0))),
    })
}

/// Samples `gamma` tokens autoregressively; returns them with the
/// distributions they were drawn from. `prefix` is restored on return.
pub fn draft(
    model: &Filtered<'_>,
    prefix: &mut Vec<TokenId>,
    gamma: usize,
    rng: &RoundRng,
) -> Result<(Vec<TokenId>, Vec<Arc<Dist>>)> {
    let base = prefix.len();
    let mut tokens = Vec::with_capacity(gamma);
    let mut dists = Vec::with_capacity(gamma);
    for i in 0..gamma {
        let d = match model.dist(prefix) {
            Ok(d) => d,
            Err(e) => {
                prefix.truncate(base);
                return Err(e);
            }
        };
        let t = sample(&d, rng.draft.uniform(i as u64));
        prefix.push(t);
        tokens.push(t);
        dists.push(d);
    }
    prefix.truncate(base);
    Ok((tokens, dists))
}

/// `P_1 .. P_{gamma+1}` for `prefix`, `prefix + x_1`, ..., `prefix + x_1..x_gamma`.
pub fn target_dists(
    model: &Filtered<'_>,
    prefix: &mut Vec<TokenId>,
    tokens: &[TokenId],
) -> Result<Vec<Arc<Dist>>> {
    let base = prefix.len();
    let mut out = Vec::with_capacity(tokens.len() + 1);
    let result = (|| {
        out.push(model.dist(prefix)?);
        for &t in tokens {
            prefix.push(t);
            out.push(model.dist(prefix)?);
        }
        Ok(())
    })();
    prefix.truncate(base);
    result.map(|_| out)
}

/// Exact law of the first emitted token under one draft-then-verify step.
pub fn first_token_law(p: &Dist, q: &Dist) -> Dist {
    let accepted: Vec<f64> = p
        .probs()
        .iter()
        .zip(q.probs())
        .map(|(&pp, &qq)| if qq > 0.0 { qq * (pp / qq).min(1.0) } else { 0.0 })
        .collect();
    let reject_mass = 1.0 - accepted.iter().sum::<f64>();
    let out = match residual(p.probs(), q.probs()) {
        Ok(res) if reject_mass > 0.0 => accepted
            .iter()
            .zip(res.probs())
            .map(|(a, r)| a + reject_mass * r)
            .collect(),
        _ => accepted,
    };
    Dist::new(out).expect("first-token law is a distribution")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub gamma: usize,
    pub seed: u64,
    pub sampling: SamplingConfig,
    /// Wire precision whose rounding the verifier must reproduce.
    pub precision: Precision,
}

impl DecodeConfig {
    pub fn new(gamma: usize, seed: u64) -> Self {
        DecodeConfig {
            gamma,
            seed,
            sampling: SamplingConfig::default(),
            precision: Precision::Exact,
        }
    }

    pub fn with_sampling(mut self, sampling: SamplingConfig) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }
}

/// Draft-then-verify without any transport in between.
pub struct ReferenceDecoder<'m> {
    draft: Filtered<'m>,
    target: Filtered<'m>,
    prefix: Vec<TokenId>,
    emitted: Vec<TokenId>,
    round: u32,
    cfg: DecodeConfig,
}

impl<'m> ReferenceDecoder<'m> {
    pub fn new(
        draft: &'m dyn LanguageModel,
        target: &'m dyn LanguageModel,
        prefix: &[TokenId],
        cfg: &DecodeConfig,
    ) -> Self {
        ReferenceDecoder {
            draft: Filtered::new(draft, cfg.sampling),
            target: Filtered::new(target, cfg.sampling),
            prefix: prefix.to_vec(),
            emitted: Vec::new(),
            round: 0,
            cfg: *cfg,
        }
    }

    pub fn step(&mut self) -> Result<VerifyOutcome> {
        let rng = RoundRng::new(self.cfg.seed, self.round);
        let (tokens, qs) = draft(&self.draft, &mut self.prefix, self.cfg.gamma, &rng)?;
        let ps = target_dists(&self.target, &mut self.prefix, &tokens)?;
        let q_vals: Vec<f64> = tokens.iter().zip(&qs).map(|(&t, d)| d.prob(t)).collect();
        let q_slices: Vec<&[f64]> = qs.iter().map(|d| d.probs()).collect();
        let outcome = verify_round(
            &tokens,
            &q_vals,
            &ps,
            &rng,
            self.cfg.precision,
            Some(&q_slices),
        )?;
        let accepted = &tokens[..outcome.accepted_count()];
        let last = outcome.result_token.expect("verifier resamples");
        self.prefix.extend_from_slice(accepted);
        self.prefix.push(last);
        self.emitted.extend_from_slice(accepted);
        self.emitted.push(last);
        self.round += 1;
        Ok(outcome)
    }

    pub fn emitted(&self) -> &[TokenId] {
        &self.emitted
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<TokenId>,
    pub outcomes: Vec<VerifyOutcome>,
}

/// Runs whole rounds until at least `n_tokens` tokens have been emitted.
pub fn reference_decode(
    draft: &dyn LanguageModel,
    target: &dyn LanguageModel,
    prefix: &[TokenId],
    n_tokens: usize,
    cfg: &DecodeConfig,
) -> Result<Decoded> {
    if n_tokens == 0 {
        return Err(Error::config("n_tokens", "must be at least 1"));
    }
    if cfg.gamma == 0 {
        return Err(Error::config("gamma", "must be at least 1"));
    }
    let mut decoder = ReferenceDecoder::new(draft, target, prefix, cfg);
    let mut outcomes = Vec::new();
    while decoder.emitted().len() < n_tokens {
        outcomes.push(decoder.step()?);
    }
    Ok(Decoded {
        tokens: decoder.emitted,
        outcomes,
    })
}
