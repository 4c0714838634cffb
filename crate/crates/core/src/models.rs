//! Draft and target model roles, plus synthetic models with a controlled
//! acceptance rate.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::{Arc, RwLock};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use crate::dist::{Dist, SamplingConfig, TokenId, VocabConfig};
use crate::error::{Error, Result};
use crate::kernel::{DecodeConfig, ReferenceDecoder};

/// A next-token distribution source with a declared per-call compute time.
pub trait LanguageModel: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Must be deterministic in `prefix`.
    fn next_dist(&self, prefix: &[TokenId]) -> Arc<Dist>;

    /// Nominal time of one invocation (`T_SLM` or `T_LLM`).
    fn latency_ms(&self) -> f64;

    /// Identifier of the class of prefixes this model cannot tell apart.
    /// Models that return `Some` get their filtered output memoized.
    fn context_id(&self, _prefix: &[TokenId]) -> Option<u64> {
        None
    }
}

/// Deterministic lookup model keyed by the last `order` tokens.
#[derive(Debug, Clone)]
pub struct TableModel {
    vocab_size: usize,
    order: usize,
    latency_ms: f64,
    entries: Vec<(Vec<TokenId>, Arc<Dist>)>,
    lookup: HashMap<Vec<TokenId>, usize>,
    fallback: Arc<Dist>,
}

pub fn table_model(
    table: impl IntoIterator<Item = (Vec<TokenId>, Dist)>,
    fallback: Dist,
    order: usize,
) -> Result<TableModel> {
    let vocab_size = fallback.len();
    let mut entries = Vec::new();
    let mut lookup = HashMap::new();
    for (ctx, d) in table {
        if d.len() != vocab_size {
            return Err(Error::InvalidDist(format!(
                "table entry has {} entries, fallback has {vocab_size}",
                d.len()
            )));
        }
        if ctx.len() > order || ctx.iter().any(|t| t.index() >= vocab_size) {
            return Err(Error::InvalidDist(format!("bad context {ctx:?} for order {order}")));
        }
        match lookup.get(&ctx) {
            Some(&i) => entries[i] = (ctx, Arc::new(d)),
            None => {
                lookup.insert(ctx.clone(), entries.len());
                entries.push((ctx, Arc::new(d)));
            }
        }
    }
    Ok(TableModel {
        vocab_size,
        order,
        latency_ms: 0.0,
        entries,
        lookup,
        fallback: Arc::new(fallback),
    })
}

impl TableModel {
    pub fn with_latency(mut self, latency_ms: f64) -> Self {
        self.latency_ms = latency_ms;
        self
    }

    fn entry(&self, prefix: &[TokenId]) -> Option<usize> {
        let start = prefix.len().saturating_sub(self.order);
        self.lookup.get(&prefix[start..]).copied()
    }

    /// Serializes to the fixture text format:
    ///
    /// ```text
    /// vocab 4
    /// order 1
    /// latency_ms 2
    /// fallback 0.25 0.25 0.25 0.25
    /// ctx 0 -> 0 1 0 0
    /// ```
    pub fn to_fixture(&self) -> String {
        let mut out = String::new();
        let probs = |d: &Dist| {
            d.probs()
                .iter()
                .map(|p| p.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(out, "vocab {}", self.vocab_size);
        let _ = writeln!(out, "order {}", self.order);
        let _ = writeln!(out, "latency_ms {}", self.latency_ms);
        let _ = writeln!(out, "fallback {}", probs(&self.fallback));
        for (ctx, d) in &self.entries {
            let key = ctx.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
            let _ = writeln!(out, "ctx {key} -> {}", probs(d));
        }
        out
    }

    pub fn from_fixture(text: &str) -> Result<TableModel> {
        let mut vocab = None;
        let mut order = None;
        let mut latency = 0.0;
        let mut fallback = None;
        let mut table = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let err = |msg: String| Error::Fixture { line: line_no, msg };
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            let floats = |s: &str| -> Result<Vec<f64>> {
                s.split_whitespace()
                    .map(|x| x.parse::<f64>().map_err(|e| err(format!("{x}: {e}"))))
                    .collect()
            };
            match key {
                "vocab" => vocab = Some(rest.trim().parse::<usize>().map_err(|e| err(e.to_string()))?),
                "order" => order = Some(rest.trim().parse::<usize>().map_err(|e| err(e.to_string()))?),
                "latency_ms" => latency = rest.trim().parse::<f64>().map_err(|e| err(e.to_string()))?,
                "fallback" => fallback = Some(Dist::new(floats(rest)?).map_err(|e| err(e.to_string()))?),
                "ctx" => {
                    let (ctx, probs) = rest
                        .split_once("->")
                        .ok_or_else(|| err("expected `ctx <tokens> -> <probs>`".into()))?;
                    let ctx = ctx
                        .split_whitespace()
                        .map(|t| t.parse::<u32>().map(TokenId).map_err(|e| err(e.to_string())))
                        .collect::<Result<Vec<_>>>()?;
                    let d = Dist::new(floats(probs)?).map_err(|e| err(e.to_string()))?;
                    table.push((ctx, d));
                }
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        let missing = |what: &str| Error::Fixture {
            line: 0,
            msg: format!("missing `{what}`"),
        };
        let fallback = fallback.ok_or_else(|| missing("fallback"))?;
        let vocab = vocab.ok_or_else(|| missing("vocab"))?;
        if fallback.len() != vocab {
            return Err(Error::Fixture {
                line: 0,
                msg: format!("fallback has {} entries, vocab is {vocab}", fallback.len()),
            });
        }
        Ok(table_model(table, fallback, order.ok_or_else(|| missing("order"))?)?.with_latency(latency))
    }
}

impl LanguageModel for TableModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_dist(&self, prefix: &[TokenId]) -> Arc<Dist> {
        match self.entry(prefix) {
            Some(i) => self.entries[i].1.clone(),
            None => self.fallback.clone(),
        }
    }

    fn latency_ms(&self) -> f64 {
        self.latency_ms
    }

    fn context_id(&self, prefix: &[TokenId]) -> Option<u64> {
        Some(self.entry(prefix).map_or(u64::MAX, |i| i as u64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibratedPairConfig {
    /// Per-position acceptance probability `Σ_x min(P(x), Q(x))`.
    pub alpha_target: f64,
    pub vocab: VocabConfig,
    pub context_order: usize,
    pub seed: u64,
    /// Number of distinct contexts; prefixes hash onto these.
    pub n_contexts: usize,
    /// Tokens with non-zero probability per context. Kept at or below the
    /// sampling `top_k` so filtering leaves the calibrated pair untouched.
    pub support: usize,
    pub draft_latency_ms: f64,
    pub target_latency_ms: f64,
}

impl CalibratedPairConfig {
    pub fn new(alpha_target: f64, vocab: VocabConfig, seed: u64) -> Self {
        CalibratedPairConfig {
            alpha_target,
            vocab,
            context_order: 1,
            seed,
            n_contexts: 64,
            support: 10,
            draft_latency_ms: 2.0,
            target_latency_ms: 20.0,
        }
    }

    pub fn with_latencies(mut self, draft_ms: f64, target_ms: f64) -> Self {
        self.draft_latency_ms = draft_ms;
        self.target_latency_ms = target_ms;
        self
    }
}

/// Markov model over hashed contexts produced by [`calibrated_pair`].
#[derive(Debug, Clone)]
pub struct CalibratedModel {
    vocab_size: usize,
    order: usize,
    latency_ms: f64,
    dists: Vec<Arc<Dist>>,
}

impl CalibratedModel {
    fn context(&self, prefix: &[TokenId]) -> usize {
        let start = prefix.len().saturating_sub(self.order);
        let h = prefix[start..].iter().fold(0u64, |h, t| {
            h.wrapping_mul(self.vocab_size as u64).wrapping_add(t.0 as u64)
        });
        (h % self.dists.len() as u64) as usize
    }

    pub fn contexts(&self) -> &[Arc<Dist>] {
        &self.dists
    }
}

impl LanguageModel for CalibratedModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_dist(&self, prefix: &[TokenId]) -> Arc<Dist> {
        self.dists[self.context(prefix)].clone()
    }

    fn latency_ms(&self) -> f64 {
        self.latency_ms
    }

    fn context_id(&self, prefix: &[TokenId]) -> Option<u64> {
        Some(self.context(prefix) as u64)
    }
}

/// Builds `Q` from `P` by moving exactly `1 - alpha` of total-variation
/// mass: the largest entries are drained first (clamping at zero) and the
/// removed mass is spread evenly over the entries that were not drained.
pub fn shift_mass(p: &[f64], alpha: f64) -> Result<Vec<f64>> {
    let moved = 1.0 - alpha;
    if moved <= 0.0 {
        return Ok(p.to_vec());
    }
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));

    let mut q = p.to_vec();
    let mut remaining = moved;
    let mut receivers_from = None;
    // the smallest entry never donates
    for (rank, &i) in order.iter().enumerate().take(p.len().saturating_sub(1)) {
        let take = q[i].min(remaining);
        q[i] -= take;
        remaining -= take;
        if remaining <= 0.0 {
            receivers_from = Some(rank + 1);
            break;
        }
    }
    let Some(first) = receivers_from else {
        let smallest = order.last().map_or(0.0, |&i| p[i]);
        return Err(Error::CalibrationInfeasible {
            target: alpha,
            achieved: smallest,
        });
    };
    let receivers = &order[first..];
    let share = moved / receivers.len() as f64;
    for &i in receivers {
        q[i] += share;
    }
    Ok(q)
}

/// A draft/target pair whose per-context acceptance rate is `alpha_target`.
pub fn calibrated_pair(cfg: &CalibratedPairConfig) -> Result<(CalibratedModel, CalibratedModel)> {
    if !(cfg.alpha_target > 0.0 && cfg.alpha_target <= 1.0) {
        return Err(Error::config("alpha_target", format!("{} not in (0, 1]", cfg.alpha_target)));
    }
    if cfg.n_contexts == 0 || cfg.support < 2 {
        return Err(Error::config("n_contexts/support", "need at least 1 context and support 2"));
    }
    let v = cfg.vocab.size;
    let m = cfg.support.min(v);
    let mut targets = Vec::with_capacity(cfg.n_contexts);
    let mut drafts = Vec::with_capacity(cfg.n_contexts);
    for c in 0..cfg.n_contexts {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(c as u64);
        let mut support = index::sample(&mut rng, v, m).into_vec();
        support.sort_unstable();
        let weights: Vec<f64> = (0..m).map(|_| Exp1.sample(&mut rng)).collect();
        let total: f64 = weights.iter().sum();
        let p_local: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let q_local = shift_mass(&p_local, cfg.alpha_target)?;

        let mut p = vec![0.0; v];
        let mut q = vec![0.0; v];
        for ((&i, &pp), &qq) in support.iter().zip(&p_local).zip(&q_local) {
            p[i] = pp;
            q[i] = qq;
        }
        targets.push(Arc::new(Dist::new(p)?));
        drafts.push(Arc::new(Dist::new(q)?));
    }
    let draft = CalibratedModel {
        vocab_size: v,
        order: cfg.context_order,
        latency_ms: cfg.draft_latency_ms,
        dists: drafts,
    };
    let target = CalibratedModel {
        vocab_size: v,
        order: cfg.context_order,
        latency_ms: cfg.target_latency_ms,
        dists: targets,
    };
    Ok((draft, target))
}

/// A model seen through the sampling filter, memoized per context.
pub struct Filtered<'m> {
    model: &'m dyn LanguageModel,
    sampling: SamplingConfig,
    cache: RwLock<HashMap<u64, Arc<Dist>>>,
}

impl<'m> Filtered<'m> {
    pub fn new(model: &'m dyn LanguageModel, sampling: SamplingConfig) -> Self {
        Filtered {
            model,
            sampling,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn model(&self) -> &'m dyn LanguageModel {
        self.model
    }

    pub fn dist(&self, prefix: &[TokenId]) -> Result<Arc<Dist>> {
        let Some(id) = self.model.context_id(prefix) else {
            return Ok(Arc::new(self.sampling.apply(&self.model.next_dist(prefix))?));
        };
        if let Some(d) = self.cache.read().expect("cache poisoned").get(&id) {
            return Ok(d.clone());
        }
        let d = Arc::new(self.sampling.apply(&self.model.next_dist(prefix))?);
        self.cache
            .write()
            .expect("cache poisoned")
            .insert(id, d.clone());
        Ok(d)
    }
}

/// Empirical acceptance rate with the default sampling filter.
pub fn measure_alpha(
    draft: &dyn LanguageModel,
    target: &dyn LanguageModel,
    prefix: &[TokenId],
    gamma: usize,
    rounds: usize,
    seed: u64,
) -> Result<f64> {
    measure_alpha_with(draft, target, prefix, &DecodeConfig::new(gamma, seed), rounds)
}

/// Accepted draft tokens over drafted tokens presented for verification,
/// where presentation stops at the first rejection of each round.
pub fn measure_alpha_with(
    draft: &dyn LanguageModel,
    target: &dyn LanguageModel,
    prefix: &[TokenId],
    cfg: &DecodeConfig,
    rounds: usize,
) -> Result<f64> {
    if rounds == 0 {
        return Err(Error::config("rounds", "must be at least 1"));
    }
    let mut decoder = ReferenceDecoder::new(draft, target, prefix, cfg);
    let (mut accepted, mut presented) = (0usize, 0usize);
    for _ in 0..rounds {
        let outcome = decoder.step()?;
        accepted += outcome.accepted_count();
        presented += outcome.presented();
    }
    Ok(accepted as f64 / presented as f64)
}
