use std::thread;
use std::time::{Duration, Instant};

use crate::dist::{sample, TokenId};
use crate::error::{Error, Result};
use crate::models::{Filtered, LanguageModel};
use crate::protocol::{decode, encode, payload_bits, Device, Edge, Mode, SessionParams};
use crate::rng::{Role, RngStream};

use super::socket::{self, SocketOptions};
use super::{sim_transmit, Direction, LinkConfig, VirtualClock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SessionMode {
    Dsd,
    Dssd,
    /// Edge-only autoregressive decoding, the speedup baseline.
    LlmOnly,
}

impl SessionMode {
    pub fn protocol(self) -> Option<Mode> {
        match self {
            SessionMode::Dsd => Some(Mode::Dsd),
            SessionMode::Dssd => Some(Mode::Dssd),
            SessionMode::LlmOnly => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SessionMode::Dsd => "dsd",
            SessionMode::Dssd => "dssd",
            SessionMode::LlmOnly => "llm",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub enum TransportKind {
    #[default]
    Sim,
    Socket(SocketOptions),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeBase {
    Virtual,
    Wall,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundStats {
    pub gamma: usize,
    pub accepted: usize,
    pub reject_position: usize,
    pub uplink_bits: u64,
    pub downlink_bits: u64,
    pub t_draft_ms: f64,
    pub t_verify_ms: f64,
    pub t_comm_ms: f64,
    pub t_round_ms: f64,
}

impl RoundStats {
    pub fn rejected(&self) -> bool {
        self.reject_position <= self.gamma
    }

    pub fn emitted(&self) -> usize {
        self.accepted + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionTranscript {
    pub mode: SessionMode,
    pub tokens: Vec<TokenId>,
    pub rounds: Vec<RoundStats>,
    /// Session time; in simulation this is the virtual clock at the end.
    pub total_ms: f64,
    pub time_base: TimeBase,
}

impl SessionTranscript {
    pub fn throughput_tps(&self) -> f64 {
        self.tokens.len() as f64 / self.total_ms * 1e3
    }

    pub fn tokens_per_round(&self) -> f64 {
        self.tokens.len() as f64 / self.rounds.len() as f64
    }

    pub fn mean_t_comm_ms(&self) -> f64 {
        self.rounds.iter().map(|r| r.t_comm_ms).sum::<f64>() / self.rounds.len() as f64
    }

    pub fn mean_uplink_bytes(&self) -> f64 {
        self.rounds.iter().map(|r| r.uplink_bits as f64 / 8.0).sum::<f64>() / self.rounds.len() as f64
    }

    pub fn mean_downlink_bytes(&self) -> f64 {
        self.rounds.iter().map(|r| r.downlink_bits as f64 / 8.0).sum::<f64>() / self.rounds.len() as f64
    }

    /// Accepted over presented draft tokens; `None` without draft rounds.
    pub fn alpha_measured(&self) -> Option<f64> {
        let presented: usize = self.rounds.iter().map(|r| r.reject_position.min(r.gamma)).sum();
        if presented == 0 {
            return None;
        }
        let accepted: usize = self.rounds.iter().map(|r| r.accepted).sum();
        Some(accepted as f64 / presented as f64)
    }
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub mode: SessionMode,
    pub gamma: usize,
    pub link: LinkConfig,
    pub params: SessionParams,
    pub prompt: Vec<TokenId>,
    /// Stop once at least this many tokens are emitted.
    pub n_tokens: usize,
    /// Optional cap on rounds; whichever limit hits first ends the session.
    pub max_rounds: Option<usize>,
}

impl SessionConfig {
    pub(crate) fn done(&self, emitted: usize, rounds: usize) -> bool {
        emitted >= self.n_tokens || self.max_rounds.is_some_and(|m| rounds >= m)
    }

    fn validate(&self) -> Result<()> {
        if self.n_tokens == 0 {
            return Err(Error::config("n_tokens", "must be at least 1"));
        }
        if self.max_rounds == Some(0) {
            return Err(Error::config("rounds", "must be at least 1"));
        }
        if self.prompt.iter().any(|t| !self.params.vocab.contains(*t)) {
            return Err(Error::config("prompt", "token outside the vocabulary"));
        }
        Ok(())
    }
}

/// Runs a full decode session over the chosen carrier.
pub fn run_session(
    cfg: &SessionConfig,
    draft: &dyn LanguageModel,
    target: &dyn LanguageModel,
    transport: &TransportKind,
) -> Result<SessionTranscript> {
    cfg.validate()?;
    for m in [draft, target] {
        if m.vocab_size() != cfg.params.vocab.size {
            return Err(Error::config(
                "vocab_size",
                format!("model has {} tokens, session {}", m.vocab_size(), cfg.params.vocab.size),
            ));
        }
    }
    match (cfg.mode.protocol(), transport) {
        (None, TransportKind::Sim) => run_llm_only(cfg, target, None),
        (None, TransportKind::Socket(opts)) => run_llm_only(cfg, target, Some(opts)),
        (Some(mode), TransportKind::Sim) => run_sim(cfg, mode, draft, target),
        (Some(mode), TransportKind::Socket(opts)) => socket::run_socket(cfg, mode, draft, target, opts),
    }
}

/// Edge-only decoding. Under a socket carrier there is no link to use, but
/// time is still measured on the wall clock so it compares like for like.
fn run_llm_only(
    cfg: &SessionConfig,
    target: &dyn LanguageModel,
    wall: Option<&SocketOptions>,
) -> Result<SessionTranscript> {
    let model = Filtered::new(target, cfg.params.sampling);
    let mut prefix = cfg.prompt.clone();
    let mut tokens = Vec::new();
    let mut rounds = Vec::new();
    let mut clock = VirtualClock::new();
    let t_llm = target.latency_ms();
    let start = Instant::now();
    while !cfg.done(tokens.len(), rounds.len()) {
        if wall.is_some_and(|o| o.emulate_compute) {
            thread::sleep(Duration::from_secs_f64(t_llm / 1e3));
        }
        let d = model.dist(&prefix)?;
        let r = RngStream::new(cfg.params.seed, rounds.len() as u32, Role::BonusDraw).uniform(0);
        let t = sample(&d, r);
        prefix.push(t);
        tokens.push(t);
        clock.advance(t_llm);
        rounds.push(RoundStats {
            gamma: 0,
            accepted: 0,
            reject_position: 1,
            uplink_bits: 0,
            downlink_bits: 0,
            t_draft_ms: 0.0,
            t_verify_ms: t_llm,
            t_comm_ms: 0.0,
            t_round_ms: t_llm,
        });
    }
    let (total_ms, time_base) = match wall {
        Some(_) => (start.elapsed().as_secs_f64() * 1e3, TimeBase::Wall),
        None => (clock.now_ms(), TimeBase::Virtual),
    };
    Ok(SessionTranscript {
        mode: cfg.mode,
        tokens,
        rounds,
        total_ms,
        time_base,
    })
}

fn run_sim(
    cfg: &SessionConfig,
    mode: Mode,
    draft: &dyn LanguageModel,
    target: &dyn LanguageModel,
) -> Result<SessionTranscript> {
    let vocab = cfg.params.vocab;
    let mut device = Device::new(mode, draft, cfg.params, &cfg.prompt, cfg.gamma)?;
    let mut edge = Edge::new(mode, target, cfg.params, &cfg.prompt);
    let mut session_clock = VirtualClock::new();
    let mut rounds = Vec::new();

    while !cfg.done(device.emitted().len(), rounds.len()) {
        // per-round clock so Σ t_round equals the session clock exactly
        let mut clock = VirtualClock::new();
        let t_draft = cfg.gamma as f64 * device.draft_latency_ms();
        clock.advance(t_draft);

        let up = device.draft()?;
        let up_bytes = encode(&up, &vocab)?;
        let uplink_bits = payload_bits(&up, &vocab);
        let t_up = sim_transmit(uplink_bits, Direction::Up, &cfg.link, &mut clock);

        let t_verify = edge.verify_latency_ms();
        let down = edge.handle(decode(&up_bytes, &vocab)?)?;
        clock.advance(t_verify);

        let down_bytes = encode(&down, &vocab)?;
        let downlink_bits = payload_bits(&down, &vocab);
        let t_down = sim_transmit(downlink_bits, Direction::Down, &cfg.link, &mut clock);
        let outcome = device.apply(decode(&down_bytes, &vocab)?)?;

        let t_round = clock.now_ms();
        session_clock.advance(t_round);
        rounds.push(RoundStats {
            gamma: cfg.gamma,
            accepted: outcome.accepted_count(),
            reject_position: outcome.reject_position,
            uplink_bits,
            downlink_bits,
            t_draft_ms: t_draft,
            t_verify_ms: t_verify,
            t_comm_ms: t_up + t_down,
            t_round_ms: t_round,
        });
    }
    check_synchronized(&device.state().prefix, device.pending_carry(), &edge.state().prefix)?;
    Ok(SessionTranscript {
        mode: cfg.mode,
        tokens: device.emitted().to_vec(),
        rounds,
        total_ms: session_clock.now_ms(),
        time_base: TimeBase::Virtual,
    })
}

/// Device and edge prefixes agree once the pending carry is accounted for.
pub(crate) fn check_synchronized(
    device_prefix: &[TokenId],
    pending_carry: Option<TokenId>,
    edge_prefix: &[TokenId],
) -> Result<()> {
    let expected = match pending_carry {
        Some(c) => match device_prefix.split_last() {
            Some((last, rest)) if *last == c => rest,
            _ => return Err(Error::Desync("pending carry is not the last device token".into())),
        },
        None => device_prefix,
    };
    if expected != edge_prefix {
        return Err(Error::Desync(format!(
            "device prefix ({} tokens) and edge prefix ({} tokens) diverged",
            expected.len(),
            edge_prefix.len()
        )));
    }
    Ok(())
}
