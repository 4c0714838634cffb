//! Output-law checks for the accept/reject/resample rule: an analytic
//! comparison of the first-token law with `P`, and a chi-squared test of
//! sampled first tokens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::dist::{normalize, sample, Dist, Precision, TokenId};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::kernel::{accept_prob, residual, resample};
use crate::rng::{Role, RngStream};

pub const ANALYTIC_TOL: f64 = 1e-12;
pub const MIN_P_VALUE: f64 = 1e-3;
const MC_CHUNK: usize = 4096;

/// Which ratio gates acceptance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AcceptRule {
    /// `min(1, p/q)`.
    #[default]
    Standard,
    /// `min(1, q/p)`. Diagnostic only; it does not preserve the target law.
    Inverted,
}

impl AcceptRule {
    fn prob(self, q: f64, p: f64) -> Result<f64> {
        match self {
            AcceptRule::Standard => accept_prob(q, p),
            AcceptRule::Inverted if p <= 0.0 => Ok(1.0),
            AcceptRule::Inverted => Ok((q / p).min(1.0)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactnessConfig {
    pub vocab_size: usize,
    pub trials: usize,
    pub samples: usize,
    /// Random pairs given the Monte Carlo test.
    pub mc_pairs: usize,
    pub seed: u64,
    pub rule: AcceptRule,
    pub exec: Execution,
}

impl ExactnessConfig {
    pub fn new(vocab_size: usize, trials: usize, samples: usize, seed: u64) -> Self {
        ExactnessConfig {
            vocab_size,
            trials,
            samples,
            mc_pairs: 1,
            seed,
            rule: AcceptRule::Standard,
            exec: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoodnessOfFit {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactnessReport {
    pub vocab_size: usize,
    pub trials: usize,
    /// Worst `‖law - P‖∞` over the analytic trials.
    pub max_abs_dev: f64,
    pub chi_squared: Vec<GoodnessOfFit>,
}

impl ExactnessReport {
    pub fn min_p_value(&self) -> Option<f64> {
        self.chi_squared.iter().map(|g| g.p_value).min_by(f64::total_cmp)
    }

    pub fn passed(&self) -> bool {
        self.max_abs_dev < ANALYTIC_TOL && self.min_p_value().is_none_or(|p| p > MIN_P_VALUE)
    }
}

/// A random pair with some zero entries, so that supports differ.
pub fn random_pair(vocab_size: usize, seed: u64, index: u64) -> (Dist, Dist) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut draw = || {
        let w: Vec<f64> = (0..vocab_size)
            .map(|_| if rng.random_bool(0.25) { 0.0 } else { rng.sample(Exp1) })
            .collect();
        normalize(&w).unwrap_or_else(|_| Dist::uniform(vocab_size))
    };
    let p = draw();
    (p, draw())
}

/// Exact law of the first emitted token under `rule`.
pub fn first_token_law_with(p: &Dist, q: &Dist, rule: AcceptRule) -> Result<Dist> {
    let accepted: Vec<f64> = p
        .probs()
        .iter()
        .zip(q.probs())
        .map(|(&pp, &qq)| if qq > 0.0 { rule.prob(qq, pp).map(|a| qq * a) } else { Ok(0.0) })
        .collect::<Result<_>>()?;
    let reject = 1.0 - accepted.iter().sum::<f64>();
    if reject <= 0.0 {
        return Dist::new(accepted).or_else(|_| normalize(p.probs()));
    }
    let res = residual(p.probs(), q.probs())?;
    Ok(Dist::new(accepted.iter().zip(res.probs()).map(|(a, r)| a + reject * r).collect())
        .unwrap_or_else(|_| normalize(&accepted).expect("accepted mass is positive")))
}

/// One draft-then-verify step; the first emitted token.
fn first_token(p: &Dist, q: &Dist, rule: AcceptRule, seed: u64, i: usize) -> Result<TokenId> {
    let round = i as u32;
    let x = sample(q, RngStream::new(seed, round, Role::DraftSample).uniform(0));
    let a = rule.prob(q.prob(x), p.prob(x))?;
    if RngStream::new(seed, round, Role::AcceptDraw).uniform(0) < a {
        return Ok(x);
    }
    resample(p.probs(), q.probs(), Precision::Exact, RngStream::new(seed, round, Role::ResampleDraw).uniform(0))
}

/// Pearson's test; bins expected below 5 are pooled into one.
pub fn chi_squared(counts: &[u64], probs: &[f64]) -> GoodnessOfFit {
    let n: u64 = counts.iter().sum();
    let (mut stat, mut bins) = (0.0, 0usize);
    let (mut pooled_obs, mut pooled_exp) = (0.0, 0.0);
    for (&c, &p) in counts.iter().zip(probs) {
        let e = p * n as f64;
        if p == 0.0 && c > 0 {
            // impossible outcome observed
            return GoodnessOfFit {
                statistic: f64::INFINITY,
                dof: 0,
                p_value: 0.0,
            };
        }
        if e < 5.0 {
            pooled_obs += c as f64;
            pooled_exp += e;
        } else {
            stat += (c as f64 - e).powi(2) / e;
            bins += 1;
        }
    }
    if pooled_exp > 0.0 {
        stat += (pooled_obs - pooled_exp).powi(2) / pooled_exp;
        bins += 1;
    }
    let dof = bins.saturating_sub(1);
    let p_value = if dof == 0 {
        1.0
    } else {
        ChiSquared::new(dof as f64).expect("positive dof").sf(stat)
    };
    GoodnessOfFit {
        statistic: stat,
        dof,
        p_value,
    }
}

pub fn cmd_verify_exactness(cfg: &ExactnessConfig) -> Result<ExactnessReport> {
    if cfg.vocab_size < 2 {
        return Err(Error::config("vocab_size", "must be at least 2"));
    }
    if cfg.trials == 0 {
        return Err(Error::config("trials", "must be at least 1"));
    }
    let n = cfg.vocab_size;
    let devs = cfg.exec.map_range(cfg.trials, |t| -> Result<f64> {
        let (p, q) = random_pair(n, cfg.seed, t as u64);
        let law = first_token_law_with(&p, &q, cfg.rule)?;
        Ok(law.probs().iter().zip(p.probs()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    });
    let max_abs_dev = devs.into_iter().collect::<Result<Vec<_>>>()?.into_iter().fold(0.0, f64::max);

    let mut chi = Vec::new();
    if cfg.samples > 0 {
        for k in 0..cfg.mc_pairs {
            // pairs beyond the analytic trials, on their own streams
            let (p, q) = random_pair(n, cfg.seed, (cfg.trials + k) as u64);
            let mc_seed = cfg.seed.wrapping_add(k as u64 + 1);
            let chunks = cfg.samples.div_ceil(MC_CHUNK);
            let partial = cfg.exec.map_range(chunks, |c| -> Result<Vec<u64>> {
                let mut counts = vec![0u64; n];
                for i in c * MC_CHUNK..((c + 1) * MC_CHUNK).min(cfg.samples) {
                    counts[first_token(&p, &q, cfg.rule, mc_seed, i)?.index()] += 1;
                }
                Ok(counts)
            });
            let mut counts = vec![0u64; n];
            for part in partial {
                for (total, c) in counts.iter_mut().zip(part?) {
                    *total += c;
                }
            }
            chi.push(chi_squared(&counts, p.probs()));
        }
    }
    Ok(ExactnessReport {
        vocab_size: n,
        trials: cfg.trials,
        max_abs_dev,
        chi_squared: chi,
    })
}
