//! Byte-exact message encoding.
//!
//! Frame: `type: u8 | body_len: u32 LE | body`. Integers are little-endian,
//! token ids are `u32`, positions `u16`, probabilities IEEE binary16 or
//! binary32 (LE) depending on `b_prob`.
//!
//! | type | message        | body                                          |
//! |------|----------------|-----------------------------------------------|
//! | 0x01 | UplinkDsd      | round, γ tokens, γ·\|V\| probs                |
//! | 0x02 | UplinkDssd     | round, γ tokens, γ probs, [carry token]       |
//! | 0x03 | DownlinkToken  | round, j, token                               |
//! | 0x04 | DownlinkDist   | round, j, \|V\| probs                         |
//!
//! Counts are not on the wire; decoding derives them from `body_len` and
//! the session's [`VocabConfig`].

use std::io::{Read, Write};

use half::f16;

use crate::dist::{Precision, TokenId, VocabConfig};
use crate::error::{Error, Result};

pub const HEADER_LEN: usize = 5;

pub const TYPE_UPLINK_DSD: u8 = 0x01;
pub const TYPE_UPLINK_DSSD: u8 = 0x02;
pub const TYPE_DOWNLINK_TOKEN: u8 = 0x03;
pub const TYPE_DOWNLINK_DIST: u8 = 0x04;

const ROUND_BYTES: usize = 4;
const TOKEN_BYTES: usize = 4;
const POSITION_BYTES: usize = 2;

/// Draft tokens with their full draft distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct UplinkDsd {
    pub round: u32,
    pub tokens: Vec<TokenId>,
    pub dists: Vec<Vec<f64>>,
}

/// Draft tokens with only their own draft probabilities, plus the token
/// the device resampled at the end of the previous round, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct UplinkDssd {
    pub round: u32,
    pub tokens: Vec<TokenId>,
    pub q_vals: Vec<f64>,
    pub carry_token: Option<TokenId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DownlinkToken {
    pub round: u32,
    pub j: u16,
    pub token: TokenId,
}

/// Target distribution at the rejected position `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct DownlinkDist {
    pub round: u32,
    pub j: u16,
    pub p_dist: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    UplinkDsd(UplinkDsd),
    UplinkDssd(UplinkDssd),
    DownlinkToken(DownlinkToken),
    DownlinkDist(DownlinkDist),
}

impl Message {
    pub fn type_byte(&self) -> u8 {
        match self {
            Message::UplinkDsd(_) => TYPE_UPLINK_DSD,
            Message::UplinkDssd(_) => TYPE_UPLINK_DSSD,
            Message::DownlinkToken(_) => TYPE_DOWNLINK_TOKEN,
            Message::DownlinkDist(_) => TYPE_DOWNLINK_DIST,
        }
    }

    pub fn round(&self) -> u32 {
        match self {
            Message::UplinkDsd(m) => m.round,
            Message::UplinkDssd(m) => m.round,
            Message::DownlinkToken(m) => m.round,
            Message::DownlinkDist(m) => m.round,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::UplinkDsd(_) => "UplinkDsd",
            Message::UplinkDssd(_) => "UplinkDssd",
            Message::DownlinkToken(_) => "DownlinkToken",
            Message::DownlinkDist(_) => "DownlinkDist",
        }
    }

    /// Body length in bytes, header excluded.
    pub fn body_len(&self, vocab: &VocabConfig) -> usize {
        let pb = vocab.prob_bytes();
        match self {
            Message::UplinkDsd(m) => {
                ROUND_BYTES + m.tokens.len() * TOKEN_BYTES + m.dists.len() * vocab.size * pb
            }
            Message::UplinkDssd(m) => {
                ROUND_BYTES
                    + m.tokens.len() * TOKEN_BYTES
                    + m.q_vals.len() * pb
                    + m.carry_token.map_or(0, |_| TOKEN_BYTES)
            }
            Message::DownlinkToken(_) => ROUND_BYTES + POSITION_BYTES + TOKEN_BYTES,
            Message::DownlinkDist(m) => ROUND_BYTES + POSITION_BYTES + m.p_dist.len() * pb,
        }
    }

    /// Bits of the distribution-valued part only (`γ·|V|·b_prob` uplink,
    /// `|V|·b_prob` downlink, zero otherwise).
    pub fn dist_bits(&self, vocab: &VocabConfig) -> u64 {
        let b = vocab.b_prob as u64;
        match self {
            Message::UplinkDsd(m) => m.dists.iter().map(|d| d.len() as u64 * b).sum(),
            Message::DownlinkDist(m) => m.p_dist.len() as u64 * b,
            _ => 0,
        }
    }
}

/// Exact bit count of the encoded body, header excluded.
pub fn payload_bits(msg: &Message, vocab: &VocabConfig) -> u64 {
    msg.body_len(vocab) as u64 * 8
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedFrame(msg.into())
}

/// Appends `probs` at wire precision. Zeros are left as the zeroed bytes
/// the buffer was grown with.
fn put_probs(out: &mut Vec<u8>, probs: &[f64], precision: Precision) -> Result<()> {
    let width = if precision == Precision::Half { 2 } else { 4 };
    let start = out.len();
    out.resize(start + probs.len() * width, 0);
    for (slot, &p) in out[start..].chunks_exact_mut(width).zip(probs) {
        if p == 0.0 {
            continue;
        }
        if !(p.is_finite() && (0.0..=1.0).contains(&p)) {
            return Err(malformed(format!("probability {p} out of range")));
        }
        let q = precision.quantize(p);
        match precision {
            Precision::Half => slot.copy_from_slice(&f16::from_f64(q).to_le_bytes()),
            _ => slot.copy_from_slice(&(q as f32).to_le_bytes()),
        }
    }
    Ok(())
}

fn put_tokens(out: &mut Vec<u8>, tokens: &[TokenId]) {
    for t in tokens {
        out.extend_from_slice(&t.0.to_le_bytes());
    }
}

pub fn encode(msg: &Message, vocab: &VocabConfig) -> Result<Vec<u8>> {
    let precision = vocab.precision();
    let body_len = msg.body_len(vocab);
    let body_len_u32 =
        u32::try_from(body_len).map_err(|_| malformed(format!("body of {body_len} bytes")))?;
    let mut out = Vec::with_capacity(HEADER_LEN + body_len);
    out.push(msg.type_byte());
    out.extend_from_slice(&body_len_u32.to_le_bytes());
    out.extend_from_slice(&msg.round().to_le_bytes());
    match msg {
        Message::UplinkDsd(m) => {
            if m.tokens.is_empty() || m.tokens.len() != m.dists.len() {
                return Err(malformed(format!(
                    "UplinkDsd with {} tokens and {} dists",
                    m.tokens.len(),
                    m.dists.len()
                )));
            }
            put_tokens(&mut out, &m.tokens);
            for d in &m.dists {
                if d.len() != vocab.size {
                    return Err(malformed(format!("dist of {} entries, |V| = {}", d.len(), vocab.size)));
                }
                put_probs(&mut out, d, precision)?;
            }
        }
        Message::UplinkDssd(m) => {
            if m.tokens.is_empty() || m.tokens.len() != m.q_vals.len() {
                return Err(malformed(format!(
                    "UplinkDssd with {} tokens and {} q-values",
                    m.tokens.len(),
                    m.q_vals.len()
                )));
            }
            put_tokens(&mut out, &m.tokens);
            put_probs(&mut out, &m.q_vals, precision)?;
            if let Some(c) = m.carry_token {
                put_tokens(&mut out, &[c]);
            }
        }
        Message::DownlinkToken(m) => {
            out.extend_from_slice(&m.j.to_le_bytes());
            put_tokens(&mut out, &[m.token]);
        }
        Message::DownlinkDist(m) => {
            if m.p_dist.len() != vocab.size {
                return Err(malformed(format!(
                    "dist of {} entries, |V| = {}",
                    m.p_dist.len(),
                    vocab.size
                )));
            }
            out.extend_from_slice(&m.j.to_le_bytes());
            put_probs(&mut out, &m.p_dist, precision)?;
        }
    }
    debug_assert_eq!(out.len(), HEADER_LEN + body_len);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(malformed("body truncated"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tokens(&mut self, n: usize) -> Result<Vec<TokenId>> {
        (0..n).map(|_| self.u32().map(TokenId)).collect()
    }

    fn probs(&mut self, n: usize, precision: Precision) -> Result<Vec<f64>> {
        let width = if precision == Precision::Half { 2 } else { 4 };
        let raw = self.take(n * width)?;
        Ok(match precision {
            Precision::Half => raw
                .chunks_exact(2)
                .map(|c| match [c[0], c[1]] {
                    [0, 0] => 0.0,
                    b => f16::from_le_bytes(b).to_f64(),
                })
                .collect(),
            _ => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        })
    }
}

/// Splits a frame into type byte and body, checking the declared length.
pub fn split_frame(bytes: &[u8]) -> Result<(u8, &[u8])> {
    if bytes.len() < HEADER_LEN {
        return Err(malformed(format!("{} bytes is shorter than a header", bytes.len())));
    }
    let declared = u32::from_le_bytes(bytes[1..5].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() != declared {
        return Err(malformed(format!("header declares {declared} body bytes, got {}", body.len())));
    }
    Ok((bytes[0], body))
}

pub fn decode(bytes: &[u8], vocab: &VocabConfig) -> Result<Message> {
    let (kind, body) = split_frame(bytes)?;
    let precision = vocab.precision();
    let pb = vocab.prob_bytes();
    let mut cur = Cursor { buf: body };
    let round = cur.u32()?;
    let rest = body.len() - ROUND_BYTES;
    let msg = match kind {
        TYPE_UPLINK_DSD => {
            let unit = TOKEN_BYTES + vocab.size * pb;
            if rest == 0 || rest % unit != 0 {
                return Err(malformed(format!("UplinkDsd body of {} bytes", body.len())));
            }
            let gamma = rest / unit;
            let tokens = cur.tokens(gamma)?;
            let dists = (0..gamma)
                .map(|_| cur.probs(vocab.size, precision))
                .collect::<Result<Vec<_>>>()?;
            Message::UplinkDsd(UplinkDsd { round, tokens, dists })
        }
        TYPE_UPLINK_DSSD => {
            let unit = TOKEN_BYTES + pb;
            let (gamma, has_carry) = if rest > 0 && rest % unit == 0 {
                (rest / unit, false)
            } else if rest > TOKEN_BYTES && (rest - TOKEN_BYTES) % unit == 0 {
                ((rest - TOKEN_BYTES) / unit, true)
            } else {
                return Err(malformed(format!("UplinkDssd body of {} bytes", body.len())));
            };
            let tokens = cur.tokens(gamma)?;
            let q_vals = cur.probs(gamma, precision)?;
            let carry_token = if has_carry { Some(TokenId(cur.u32()?)) } else { None };
            Message::UplinkDssd(UplinkDssd {
                round,
                tokens,
                q_vals,
                carry_token,
            })
        }
        TYPE_DOWNLINK_TOKEN => {
            if rest != POSITION_BYTES + TOKEN_BYTES {
                return Err(malformed(format!("DownlinkToken body of {} bytes", body.len())));
            }
            let j = cur.u16()?;
            let token = TokenId(cur.u32()?);
            Message::DownlinkToken(DownlinkToken { round, j, token })
        }
        TYPE_DOWNLINK_DIST => {
            if rest != POSITION_BYTES + vocab.size * pb {
                return Err(malformed(format!("DownlinkDist body of {} bytes", body.len())));
            }
            let j = cur.u16()?;
            let p_dist = cur.probs(vocab.size, precision)?;
            Message::DownlinkDist(DownlinkDist { round, j, p_dist })
        }
        other => return Err(malformed(format!("unknown message type {other:#04x}"))),
    };
    Ok(msg)
}

/// Writes one already-encoded frame.
pub fn write_frame(w: &mut impl Write, frame: &[u8]) -> std::io::Result<()> {
    w.write_all(frame)?;
    w.flush()
}

/// Reads one frame (header plus body). `Ok(None)` on a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> std::io::Result<Option<Vec<u8>>> {
    let mut header = [0u8; HEADER_LEN];
    match r.read_exact(&mut header) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_le_bytes(header[1..5].try_into().unwrap()) as usize;
    let mut frame = Vec::with_capacity(HEADER_LEN + len);
    frame.extend_from_slice(&header);
    frame.resize(HEADER_LEN + len, 0);
    r.read_exact(&mut frame[HEADER_LEN..])?;
    Ok(Some(frame))
}
