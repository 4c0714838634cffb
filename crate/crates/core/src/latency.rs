//! Closed-form timing model: per-round communication and inference time
//! for both protocols, expected progress per round and predicted speedup.
//!
//! All times are milliseconds. Rates are Mbit/s, so `bits / (mbps·10³)`
//! is milliseconds.

use crate::dist::VocabConfig;
use crate::transport::{Direction, LinkConfig, SessionMode};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingParams {
    pub t_slm_ms: f64,
    pub t_llm_ms: f64,
    pub gamma: usize,
    pub alpha: f64,
    pub vocab: VocabConfig,
    pub link: LinkConfig,
}

impl TimingParams {
    /// `c = T_SLM / T_LLM`.
    pub fn cost_ratio(&self) -> f64 {
        self.t_slm_ms / self.t_llm_ms
    }

    /// Time to move one full distribution in `direction`.
    pub fn dist_ms(&self, direction: Direction) -> f64 {
        self.link.transmission_ms(self.vocab.dist_bits(), direction)
    }
}

/// Baseline: `γ` full distributions uplinked every round, plus NTT.
pub fn t_comm_dsd(p: &TimingParams) -> f64 {
    p.gamma as f64 * p.dist_ms(Direction::Up) + p.link.ntt_ms
}

/// Split: one distribution downlinked with probability `1 - α^γ`, plus NTT.
pub fn t_comm_dssd_expected(p: &TimingParams) -> f64 {
    reject_probability(p.alpha, p.gamma) * p.dist_ms(Direction::Down) + p.link.ntt_ms
}

/// `(T_NTT, T_down,max + T_NTT)` for the split protocol.
pub fn t_comm_bounds(p: &TimingParams) -> (f64, f64) {
    (p.link.ntt_ms, p.dist_ms(Direction::Down) + p.link.ntt_ms)
}

/// Probability that a round has at least one rejection.
pub fn reject_probability(alpha: f64, gamma: usize) -> f64 {
    1.0 - alpha.powi(gamma as i32)
}

pub fn t_inf_dsd(p: &TimingParams) -> f64 {
    p.gamma as f64 * p.t_slm_ms + p.t_llm_ms + t_comm_dsd(p)
}

pub fn t_inf_dssd(p: &TimingParams) -> f64 {
    p.gamma as f64 * p.t_slm_ms + p.t_llm_ms + t_comm_dssd_expected(p)
}

/// Mean tokens emitted per round with i.i.d. per-position acceptance `alpha`.
pub fn expected_tokens_per_round(alpha: f64, gamma: usize) -> f64 {
    if alpha >= 1.0 {
        return gamma as f64 + 1.0;
    }
    (1.0 - alpha.powi(gamma as i32 + 1)) / (1.0 - alpha)
}

/// Throughput of `mode` relative to edge-only decoding at `1 / T_LLM`.
pub fn predicted_speedup(mode: SessionMode, p: &TimingParams) -> f64 {
    let t_inf = match mode {
        SessionMode::Dsd => t_inf_dsd(p),
        SessionMode::Dssd => t_inf_dssd(p),
        SessionMode::LlmOnly => return 1.0,
    };
    expected_tokens_per_round(p.alpha, p.gamma) / t_inf * p.t_llm_ms
}

/// Predicted per-round communication time of `mode`.
pub fn predicted_t_comm(mode: SessionMode, p: &TimingParams) -> f64 {
    match mode {
        SessionMode::Dsd => t_comm_dsd(p),
        SessionMode::Dssd => t_comm_dssd_expected(p),
        SessionMode::LlmOnly => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Table1Cell {
    pub gamma: usize,
    pub alpha: f64,
    pub reject_prob: f64,
    pub t_comm_ms: f64,
}

impl Table1Cell {
    /// `1 - α^γ` as printed (two decimals).
    pub fn reject_prob_rounded(&self) -> f64 {
        (self.reject_prob * 100.0).round() / 100.0
    }

    /// Expected communication time as printed (0.01 ms).
    pub fn t_comm_rounded(&self) -> f64 {
        (self.t_comm_ms * 100.0).round() / 100.0
    }
}

pub const TABLE1_ALPHAS: [f64; 6] = [0.5, 0.6, 0.7, 0.8, 0.9, 0.99];
pub const TABLE1_GAMMAS: [usize; 4] = [2, 4, 6, 8];

/// Expected split-protocol communication time over an `(γ, α)` grid, with
/// the downlink of one distribution taking `payload_ms`. Row-major in γ.
pub fn table1(alphas: &[f64], gammas: &[usize], payload_ms: f64, ntt_ms: f64) -> Vec<Table1Cell> {
    gammas
        .iter()
        .flat_map(|&gamma| {
            alphas.iter().map(move |&alpha| {
                let reject_prob = reject_probability(alpha, gamma);
                Table1Cell {
                    gamma,
                    alpha,
                    reject_prob,
                    t_comm_ms: reject_prob * payload_ms + ntt_ms,
                }
            })
        })
        .collect()
}

/// Solves `t = r·payload + ntt` through two `(r, t)` observations.
/// Returns `(ntt_ms, payload_ms)`.
pub fn fit_ntt_and_payload(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let payload = (a.1 - b.1) / (a.0 - b.0);
    (a.1 - a.0 * payload, payload)
}
