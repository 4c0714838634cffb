use std::io;
use std::net::{Shutdown, TcpListener, TcpStream};
use std::thread;
use std::time::{Duration, Instant};

use crate::dist::TokenId;
use crate::error::{Error, Result};
use crate::models::LanguageModel;
use crate::protocol::wire::{read_frame, write_frame};
use crate::protocol::{decode, encode, payload_bits, Device, Edge, Mode, SessionParams};

use super::session::{check_synchronized, RoundStats, SessionConfig, SessionTranscript, TimeBase};
use super::{Direction, LinkConfig};

#[derive(Debug, Clone)]
pub struct SocketOptions {
    /// `host:port` of a running edge. `None` starts one on loopback.
    pub connect: Option<String>,
    /// Sleep for the declared model latencies.
    pub emulate_compute: bool,
    /// Sleep `bits / rate + NTT/2` before each send.
    pub pace: bool,
}

impl Default for SocketOptions {
    fn default() -> Self {
        SocketOptions {
            connect: None,
            emulate_compute: true,
            pace: true,
        }
    }
}

impl SocketOptions {
    /// No sleeps at all; only ordering and content are exercised.
    pub fn unpaced() -> Self {
        SocketOptions {
            connect: None,
            emulate_compute: false,
            pace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSummary {
    pub prefix: Vec<TokenId>,
    pub rounds: u32,
    pub awaiting_carry: bool,
}

fn sleep_ms(ms: f64) {
    if ms > 0.0 {
        thread::sleep(Duration::from_secs_f64(ms / 1e3));
    }
}

fn pace(bits: u64, direction: Direction, link: &LinkConfig, opts: &SocketOptions) {
    if opts.pace {
        sleep_ms(link.transmission_ms(bits, direction) + link.ntt_share_ms());
    }
}

fn transport(round: u32) -> impl FnOnce(io::Error) -> Error {
    move |source| Error::Transport { round, source }
}

/// Serves one device connection until it closes its side.
#[allow(clippy::too_many_arguments)]
pub fn serve_edge(
    mut stream: TcpStream,
    mode: Mode,
    target: &dyn LanguageModel,
    params: SessionParams,
    prompt: &[TokenId],
    link: &LinkConfig,
    opts: &SocketOptions,
) -> Result<EdgeSummary> {
    stream.set_nodelay(true)?;
    let vocab = params.vocab;
    let mut edge = Edge::new(mode, target, params, prompt);
    loop {
        let round = edge.state().round;
        let Some(frame) = read_frame(&mut stream).map_err(transport(round))? else {
            break;
        };
        let down = edge.handle(decode(&frame, &vocab)?)?;
        if opts.emulate_compute {
            sleep_ms(edge.verify_latency_ms());
        }
        let bytes = encode(&down, &vocab)?;
        pace(payload_bits(&down, &vocab), Direction::Down, link, opts);
        write_frame(&mut stream, &bytes).map_err(transport(round))?;
    }
    Ok(EdgeSummary {
        prefix: edge.state().prefix.clone(),
        rounds: edge.state().round,
        awaiting_carry: edge.awaiting_carry(),
    })
}

struct DeviceRun {
    tokens: Vec<TokenId>,
    rounds: Vec<RoundStats>,
    total_ms: f64,
    prefix: Vec<TokenId>,
    carry: Option<TokenId>,
}

fn drive_device(
    mut stream: TcpStream,
    cfg: &SessionConfig,
    mode: Mode,
    draft: &dyn LanguageModel,
    declared_verify_ms: f64,
    opts: &SocketOptions,
) -> Result<DeviceRun> {
    stream.set_nodelay(true)?;
    let vocab = cfg.params.vocab;
    let mut device = Device::new(mode, draft, cfg.params, &cfg.prompt, cfg.gamma)?;
    let mut rounds = Vec::new();
    let start = Instant::now();
    while !cfg.done(device.emitted().len(), rounds.len()) {
        let round = device.state().round;
        let t0 = Instant::now();
        let up = device.draft()?;
        if opts.emulate_compute {
            sleep_ms(cfg.gamma as f64 * device.draft_latency_ms());
        }
        let t_draft = t0.elapsed().as_secs_f64() * 1e3;

        let bytes = encode(&up, &vocab)?;
        let uplink_bits = payload_bits(&up, &vocab);
        pace(uplink_bits, Direction::Up, &cfg.link, opts);
        write_frame(&mut stream, &bytes).map_err(transport(round))?;

        let frame = read_frame(&mut stream)
            .map_err(transport(round))?
            .ok_or_else(|| transport(round)(io::ErrorKind::UnexpectedEof.into()))?;
        let down = decode(&frame, &vocab)?;
        let downlink_bits = payload_bits(&down, &vocab);
        let outcome = device.apply(down)?;

        let t_round = t0.elapsed().as_secs_f64() * 1e3;
        // The edge's compute time is not observable from here; the declared
        // latency stands in for it and the rest of the round is communication.
        let t_verify = if opts.emulate_compute { declared_verify_ms } else { 0.0 };
        rounds.push(RoundStats {
            gamma: cfg.gamma,
            accepted: outcome.accepted_count(),
            reject_position: outcome.reject_position,
            uplink_bits,
            downlink_bits,
            t_draft_ms: t_draft,
            t_verify_ms: t_verify,
            t_comm_ms: (t_round - t_draft - t_verify).max(0.0),
            t_round_ms: t_round,
        });
    }
    let total_ms = start.elapsed().as_secs_f64() * 1e3;
    let _ = stream.shutdown(Shutdown::Write);
    Ok(DeviceRun {
        tokens: device.emitted().to_vec(),
        rounds,
        total_ms,
        prefix: device.state().prefix.clone(),
        carry: device.pending_carry(),
    })
}

pub(crate) fn run_socket(
    cfg: &SessionConfig,
    mode: Mode,
    draft: &dyn LanguageModel,
    target: &dyn LanguageModel,
    opts: &SocketOptions,
) -> Result<SessionTranscript> {
    let finish = |run: DeviceRun| SessionTranscript {
        mode: cfg.mode,
        tokens: run.tokens,
        rounds: run.rounds,
        total_ms: run.total_ms,
        time_base: TimeBase::Wall,
    };

    if let Some(addr) = &opts.connect {
        let stream = TcpStream::connect(addr).map_err(transport(0))?;
        return drive_device(stream, cfg, mode, draft, target.latency_ms(), opts).map(finish);
    }

    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    thread::scope(|s| {
        let edge = s.spawn(|| {
            let (stream, _) = listener.accept()?;
            serve_edge(stream, mode, target, cfg.params, &cfg.prompt, &cfg.link, opts)
        });
        let device = TcpStream::connect(addr)
            .map_err(transport(0))
            .and_then(|stream| drive_device(stream, cfg, mode, draft, target.latency_ms(), opts));
        let edge = edge.join().expect("edge thread panicked");
        // an edge failure explains a device-side EOF, so report it first
        let summary = edge?;
        let run = device?;
        check_synchronized(&run.prefix, run.carry, &summary.prefix)?;
        Ok(finish(run))
    })
}
