//! Distributed speculative decoding between a device-side draft model and
//! an edge-side target model.
//!
//! The crate is organized bottom-up:
//!
//! - [`dist`], [`rng`]: categorical distributions, wire precision and
//!   counter-based random streams.
//! - [`kernel`]: the accept/reject/resample rule and a single-process
//!   reference decoder.
//! - [`models`]: language-model interface, table models and calibrated
//!   draft/target pairs with a chosen acceptance rate.
//! - [`protocol`]: device and edge state machines for the baseline (DSD)
//!   and split (DSSD) protocols, plus the binary frame codec.
//! - [`transport`]: simulated link and TCP carrier, session driver.
//! - [`latency`]: closed-form timing model.
//! - [`harness`]: experiment runners behind the `dssd` CLI.

pub mod dist;
pub mod error;
pub mod exec;
pub mod harness;
pub mod kernel;
pub mod latency;
pub mod models;
pub mod protocol;
pub mod rng;
pub mod transport;

pub use dist::{Dist, Precision, SamplingConfig, TokenId, VocabConfig};
pub use error::{Error, Result};
pub use exec::Execution;
pub use kernel::{reference_decode, DecodeConfig, VerifyOutcome};
pub use models::{calibrated_pair, CalibratedPairConfig, LanguageModel, TableModel};
pub use protocol::{Mode, SessionParams};
pub use transport::{run_session, LinkConfig, SessionConfig, SessionMode, TransportKind};
