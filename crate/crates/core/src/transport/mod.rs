//! Message carriers and the session driver.
//!
//! The simulated link charges every cost to a [`VirtualClock`]: `γ·T_SLM`
//! per draft, `T_LLM` per verification, `bits / rate` per message body and
//! half of the round-trip non-transmission time (NTT) per direction. The
//! socket carrier moves the same frames over TCP and measures wall time.

mod session;
mod socket;

use crate::error::{Error, Result};

pub use session::{
    run_session, RoundStats, SessionConfig, SessionMode, SessionTranscript, TimeBase, TransportKind,
};
pub use socket::{serve_edge, EdgeSummary, SocketOptions};

/// Link rates in Mbit/s and the round-trip non-transmission time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkConfig {
    pub up_mbps: f64,
    pub down_mbps: f64,
    pub ntt_ms: f64,
}

impl LinkConfig {
    pub fn new(up_mbps: f64, down_mbps: f64, ntt_ms: f64) -> Result<Self> {
        if !(up_mbps > 0.0) || !(down_mbps > 0.0) {
            return Err(Error::config("link", "rates must be positive"));
        }
        if !(ntt_ms >= 0.0) || !ntt_ms.is_finite() {
            return Err(Error::config("ntt_ms", format!("{ntt_ms} must be finite and ≥ 0")));
        }
        Ok(LinkConfig {
            up_mbps,
            down_mbps,
            ntt_ms,
        })
    }

    /// Symmetric link.
    pub fn symmetric(mbps: f64, ntt_ms: f64) -> Result<Self> {
        LinkConfig::new(mbps, mbps, ntt_ms)
    }

    pub fn rate_mbps(&self, direction: Direction) -> f64 {
        match direction {
            Direction::Up => self.up_mbps,
            Direction::Down => self.down_mbps,
        }
    }

    /// Pure transmission time of `bits` in milliseconds.
    pub fn transmission_ms(&self, bits: u64, direction: Direction) -> f64 {
        bits as f64 / (self.rate_mbps(direction) * 1e3)
    }

    /// NTT share charged to each direction.
    pub fn ntt_share_ms(&self) -> f64 {
        self.ntt_ms / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
}

/// Monotone simulated time.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VirtualClock {
    now_ms: f64,
}

impl VirtualClock {
    pub fn new() -> Self {
        VirtualClock::default()
    }

    pub fn now_ms(&self) -> f64 {
        self.now_ms
    }

    pub fn advance(&mut self, ms: f64) {
        assert!(ms >= 0.0, "clock cannot go backwards ({ms} ms)");
        self.now_ms += ms;
    }
}

/// Charges one message to the clock and returns the elapsed time.
pub fn sim_transmit(bits: u64, direction: Direction, link: &LinkConfig, clock: &mut VirtualClock) -> f64 {
    let elapsed = link.transmission_ms(bits, direction) + link.ntt_share_ms();
    clock.advance(elapsed);
    elapsed
}
