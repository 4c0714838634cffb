//! Device and edge state machines for the baseline protocol (DSD, full
//! draft distributions uplinked, accept/reject and resample at the edge)
//! and the split protocol (DSSD, only draft probabilities of the drafted
//! tokens uplinked, resample on the device).
//!
//! In DSSD the device's resampled token reaches the edge as the next
//! round's `carry_token`; until then the edge prefix is one token short.

pub mod wire;

use std::sync::Arc;

use crate::dist::{Dist, SamplingConfig, TokenId, VocabConfig};
use crate::error::{Error, Result};
use crate::kernel::{self, VerifyOutcome};
use crate::models::{Filtered, LanguageModel};
use crate::rng::RoundRng;

pub use wire::{
    decode, encode, payload_bits, DownlinkDist, DownlinkToken, Message, UplinkDsd, UplinkDssd,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Dsd,
    Dssd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndpointRole {
    Device,
    Edge,
}

#[derive(Debug, Clone)]
pub struct EndpointState {
    pub role: EndpointRole,
    pub mode: Mode,
    pub prefix: Vec<TokenId>,
    pub round: u32,
    /// Draft distributions of the round in flight (device, DSSD only).
    pub pending_q: Vec<Arc<Dist>>,
    /// Whether the last completed round accepted every draft token.
    pub flag: bool,
}

impl EndpointState {
    fn new(role: EndpointRole, mode: Mode, prompt: &[TokenId]) -> Self {
        EndpointState {
            role,
            mode,
            prefix: prompt.to_vec(),
            round: 0,
            pending_q: Vec::new(),
            flag: true,
        }
    }
}

/// Settings both endpoints must agree on out of band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionParams {
    pub vocab: VocabConfig,
    pub sampling: SamplingConfig,
    pub seed: u64,
}

fn desync(msg: impl Into<String>) -> Error {
    Error::Desync(msg.into())
}

fn check_tokens(vocab: &VocabConfig, tokens: &[TokenId]) -> Result<()> {
    match tokens.iter().find(|t| !vocab.contains(**t)) {
        Some(t) => Err(desync(format!("token {t} outside vocabulary of {}", vocab.size))),
        None => Ok(()),
    }
}

pub struct Device<'m> {
    state: EndpointState,
    model: Filtered<'m>,
    params: SessionParams,
    gamma: usize,
    drafted: Vec<TokenId>,
    carry: Option<TokenId>,
    emitted: Vec<TokenId>,
}

impl<'m> Device<'m> {
    pub fn new(
        mode: Mode,
        draft_model: &'m dyn LanguageModel,
        params: SessionParams,
        prompt: &[TokenId],
        gamma: usize,
    ) -> Result<Self> {
        if gamma == 0 || gamma >= u16::MAX as usize {
            return Err(Error::config("gamma", format!("{gamma} outside 1..{}", u16::MAX)));
        }
        Ok(Device {
            state: EndpointState::new(EndpointRole::Device, mode, prompt),
            model: Filtered::new(draft_model, params.sampling),
            params,
            gamma,
            drafted: Vec::new(),
            carry: None,
            emitted: Vec::new(),
        })
    }

    pub fn state(&self) -> &EndpointState {
        &self.state
    }

    pub fn emitted(&self) -> &[TokenId] {
        &self.emitted
    }

    pub fn gamma(&self) -> usize {
        self.gamma
    }

    /// Resampled token not yet delivered to the edge.
    pub fn pending_carry(&self) -> Option<TokenId> {
        self.carry
    }

    pub fn draft_latency_ms(&self) -> f64 {
        self.model.model().latency_ms()
    }

    /// Drafts the next round and builds the uplink for the session's mode.
    pub fn draft(&mut self) -> Result<Message> {
        match self.state.mode {
            Mode::Dsd => self.draft_dsd().map(Message::UplinkDsd),
            Mode::Dssd => self.draft_dssd().map(Message::UplinkDssd),
        }
    }

    fn draft_tokens(&mut self) -> Result<(Vec<TokenId>, Vec<Arc<Dist>>)> {
        if !self.drafted.is_empty() {
            return Err(desync(format!("round {} drafted twice", self.state.round)));
        }
        let rng = RoundRng::new(self.params.seed, self.state.round);
        let (tokens, dists) = kernel::draft(&self.model, &mut self.state.prefix, self.gamma, &rng)?;
        self.drafted = tokens.clone();
        Ok((tokens, dists))
    }

    pub fn draft_dsd(&mut self) -> Result<UplinkDsd> {
        let (tokens, dists) = self.draft_tokens()?;
        Ok(UplinkDsd {
            round: self.state.round,
            tokens,
            dists: dists.iter().map(|d| d.probs().to_vec()).collect(),
        })
    }

    pub fn draft_dssd(&mut self) -> Result<UplinkDssd> {
        let (tokens, dists) = self.draft_tokens()?;
        let q_vals = tokens.iter().zip(&dists).map(|(&t, d)| d.prob(t)).collect();
        self.state.pending_q = dists;
        Ok(UplinkDssd {
            round: self.state.round,
            tokens,
            q_vals,
            carry_token: self.carry.take(),
        })
    }

    /// Consumes the downlink and closes the round.
    pub fn apply(&mut self, downlink: Message) -> Result<VerifyOutcome> {
        match (self.state.mode, downlink) {
            (Mode::Dsd, Message::DownlinkToken(m)) => self.apply_dsd(&m),
            (Mode::Dssd, Message::DownlinkToken(m)) => self.apply_dssd_token(&m),
            (Mode::Dssd, Message::DownlinkDist(m)) => self.apply_dssd_dist(&m),
            (mode, other) => Err(desync(format!("{mode:?} device got {}", other.name()))),
        }
    }

    fn check_round(&self, round: u32, j: u16) -> Result<usize> {
        if self.drafted.is_empty() {
            return Err(desync(format!("downlink for round {round} with nothing drafted")));
        }
        if round != self.state.round {
            return Err(desync(format!(
                "downlink for round {round}, device is in round {}",
                self.state.round
            )));
        }
        let j = j as usize;
        if j == 0 || j > self.gamma + 1 {
            return Err(desync(format!("position {j} outside 1..={}", self.gamma + 1)));
        }
        Ok(j)
    }

    fn close_round(&mut self, j: usize, token: TokenId) -> VerifyOutcome {
        let accepted = &self.drafted[..j - 1];
        self.state.prefix.extend_from_slice(accepted);
        self.state.prefix.push(token);
        self.emitted.extend_from_slice(accepted);
        self.emitted.push(token);
        self.drafted.clear();
        self.state.pending_q.clear();
        self.state.flag = j == self.gamma + 1;
        self.state.round += 1;
        VerifyOutcome {
            gamma: self.gamma,
            reject_position: j,
            result_token: Some(token),
        }
    }

    pub fn apply_dsd(&mut self, m: &DownlinkToken) -> Result<VerifyOutcome> {
        let j = self.check_round(m.round, m.j)?;
        check_tokens(&self.params.vocab, &[m.token])?;
        Ok(self.close_round(j, m.token))
    }

    fn apply_dssd_token(&mut self, m: &DownlinkToken) -> Result<VerifyOutcome> {
        let j = self.check_round(m.round, m.j)?;
        if j != self.gamma + 1 {
            return Err(desync(format!("token downlink at position {j} before γ+1")));
        }
        check_tokens(&self.params.vocab, &[m.token])?;
        Ok(self.close_round(j, m.token))
    }

    fn apply_dssd_dist(&mut self, m: &DownlinkDist) -> Result<VerifyOutcome> {
        let j = self.check_round(m.round, m.j)?;
        if j > self.gamma {
            return Err(desync("distribution downlink without a rejection"));
        }
        if m.p_dist.len() != self.params.vocab.size {
            return Err(desync(format!("downlinked dist has {} entries", m.p_dist.len())));
        }
        let rng = RoundRng::new(self.params.seed, self.state.round);
        let token = kernel::resample(
            &m.p_dist,
            self.state.pending_q[j - 1].probs(),
            self.params.vocab.precision(),
            rng.resample.uniform(0),
        )?;
        self.carry = Some(token);
        Ok(self.close_round(j, token))
    }
}

pub struct Edge<'m> {
    state: EndpointState,
    model: Filtered<'m>,
    params: SessionParams,
    awaiting_carry: bool,
}

impl<'m> Edge<'m> {
    pub fn new(
        mode: Mode,
        target_model: &'m dyn LanguageModel,
        params: SessionParams,
        prompt: &[TokenId],
    ) -> Self {
        Edge {
            state: EndpointState::new(EndpointRole::Edge, mode, prompt),
            model: Filtered::new(target_model, params.sampling),
            params,
            awaiting_carry: false,
        }
    }

    pub fn state(&self) -> &EndpointState {
        &self.state
    }

    /// Whether the prefix is missing the device's last resampled token.
    pub fn awaiting_carry(&self) -> bool {
        self.awaiting_carry
    }

    pub fn verify_latency_ms(&self) -> f64 {
        self.model.model().latency_ms()
    }

    pub fn handle(&mut self, uplink: Message) -> Result<Message> {
        match (self.state.mode, uplink) {
            (Mode::Dsd, Message::UplinkDsd(m)) => self.verify_dsd(&m).map(Message::DownlinkToken),
            (Mode::Dssd, Message::UplinkDssd(m)) => self.verify_dssd(&m),
            (mode, other) => Err(desync(format!("{mode:?} edge got {}", other.name()))),
        }
    }

    fn check_round(&self, round: u32) -> Result<()> {
        if round != self.state.round {
            return Err(desync(format!(
                "uplink for round {round}, edge is in round {}",
                self.state.round
            )));
        }
        Ok(())
    }

    fn extend(&mut self, tokens: &[TokenId], outcome: &VerifyOutcome) {
        self.state.prefix.extend_from_slice(&tokens[..outcome.accepted_count()]);
        if let Some(t) = outcome.result_token {
            self.state.prefix.push(t);
        }
        self.state.flag = !outcome.rejected();
        self.state.round += 1;
    }

    pub fn verify_dsd(&mut self, up: &UplinkDsd) -> Result<DownlinkToken> {
        self.check_round(up.round)?;
        check_tokens(&self.params.vocab, &up.tokens)?;
        if up.tokens.is_empty() || up.dists.len() != up.tokens.len() {
            return Err(desync("uplink tokens and dists disagree"));
        }
        if up.dists.iter().any(|d| d.len() != self.params.vocab.size) {
            return Err(desync("uplinked dist has the wrong vocabulary size"));
        }
        let rng = RoundRng::new(self.params.seed, self.state.round);
        let ps = kernel::target_dists(&self.model, &mut self.state.prefix, &up.tokens)?;
        let q_vals: Vec<f64> = up
            .tokens
            .iter()
            .zip(&up.dists)
            .map(|(t, d)| d[t.index()])
            .collect();
        let q_slices: Vec<&[f64]> = up.dists.iter().map(Vec::as_slice).collect();
        let outcome = kernel::verify_round(
            &up.tokens,
            &q_vals,
            &ps,
            &rng,
            self.params.vocab.precision(),
            Some(&q_slices),
        )?;
        let down = DownlinkToken {
            round: up.round,
            j: outcome.reject_position as u16,
            token: outcome.result_token.expect("resampled at the edge"),
        };
        self.extend(&up.tokens, &outcome);
        Ok(down)
    }

    pub fn verify_dssd(&mut self, up: &UplinkDssd) -> Result<Message> {
        self.check_round(up.round)?;
        check_tokens(&self.params.vocab, &up.tokens)?;
        if up.tokens.is_empty() || up.q_vals.len() != up.tokens.len() {
            return Err(desync("uplink tokens and q-values disagree"));
        }
        match (self.awaiting_carry, up.carry_token) {
            (true, Some(c)) => {
                check_tokens(&self.params.vocab, &[c])?;
                self.state.prefix.push(c);
                self.awaiting_carry = false;
            }
            (false, None) => {}
            (true, None) => return Err(desync("expected the previous round's carry token")),
            (false, Some(_)) => return Err(desync("unexpected carry token")),
        }
        let rng = RoundRng::new(self.params.seed, self.state.round);
        let ps = kernel::target_dists(&self.model, &mut self.state.prefix, &up.tokens)?;
        let outcome = kernel::verify_round(
            &up.tokens,
            &up.q_vals,
            &ps,
            &rng,
            self.params.vocab.precision(),
            None,
        )?;
        let j = outcome.reject_position;
        let down = match outcome.result_token {
            Some(bonus) => Message::DownlinkToken(DownlinkToken {
                round: up.round,
                j: j as u16,
                token: bonus,
            }),
            None => {
                self.awaiting_carry = true;
                Message::DownlinkDist(DownlinkDist {
                    round: up.round,
                    j: j as u16,
                    p_dist: ps[j - 1].probs().to_vec(),
                })
            }
        };
        self.extend(&up.tokens, &outcome);
        Ok(down)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{normalize, Precision};
    use crate::kernel::{reference_decode, DecodeConfig};
    use crate::models::{calibrated_pair, table_model, CalibratedPairConfig};

    fn params(vocab: VocabConfig, seed: u64) -> SessionParams {
        SessionParams {
            vocab,
            sampling: SamplingConfig::default(),
            seed,
        }
    }

    /// Runs one round through the byte codec.
    fn round_trip<'m>(device: &mut Device<'m>, edge: &mut Edge<'m>, vocab: &VocabConfig) -> VerifyOutcome {
        let up = decode(&encode(&device.draft().unwrap(), vocab).unwrap(), vocab).unwrap();
        let down = decode(&encode(&edge.handle(up).unwrap(), vocab).unwrap(), vocab).unwrap();
        device.apply(down).unwrap()
    }

    #[test]
    fn dsd_all_accept_chain() {
        let vocab = VocabConfig::new(4, 16).unwrap();
        let chain = table_model(
            (0..4).map(|i| (vec![TokenId(i)], Dist::point_mass(4, TokenId((i + 1) % 4)))),
            Dist::uniform(4),
            1,
        )
        .unwrap();
        let p = params(vocab, 1);
        let prompt = [TokenId(0)];
        let mut dev = Device::new(Mode::Dsd, &chain, p, &prompt, 2).unwrap();
        let mut edge = Edge::new(Mode::Dsd, &chain, p, &prompt);
        let out = round_trip(&mut dev, &mut edge, &vocab);
        assert_eq!(out.reject_position, 3);
        assert_eq!(dev.emitted(), &[TokenId(1), TokenId(2), TokenId(3)]);
        assert_eq!(dev.state().prefix, edge.state().prefix);
    }

    #[test]
    fn dsd_immediate_rejection() {
        let vocab = VocabConfig::new(4, 16).unwrap();
        let q = table_model(vec![], Dist::point_mass(4, TokenId(0)), 1).unwrap();
        let pm = table_model(vec![], normalize(&[0.0, 1.0, 1.0, 0.0]).unwrap(), 1).unwrap();
        let p = params(vocab, 2);
        let mut dev = Device::new(Mode::Dsd, &q, p, &[TokenId(3)], 3).unwrap();
        let mut edge = Edge::new(Mode::Dsd, &pm, p, &[TokenId(3)]);
        let out = round_trip(&mut dev, &mut edge, &vocab);
        assert_eq!(out.reject_position, 1);
        assert_eq!(dev.emitted().len(), 1);
        assert_ne!(dev.emitted()[0], TokenId(0));
        assert_eq!(dev.state().prefix, edge.state().prefix);
    }

    #[test]
    fn dssd_rejection_sends_distribution_and_carries() {
        let vocab = VocabConfig::new(4, 16).unwrap();
        let q = table_model(vec![], Dist::point_mass(4, TokenId(0)), 1).unwrap();
        let pm = table_model(vec![], normalize(&[0.0, 1.0, 1.0, 0.0]).unwrap(), 1).unwrap();
        let p = params(vocab, 2);
        let mut dev = Device::new(Mode::Dssd, &q, p, &[TokenId(3)], 3).unwrap();
        let mut edge = Edge::new(Mode::Dssd, &pm, p, &[TokenId(3)]);

        let up = dev.draft().unwrap();
        let down = edge.handle(up).unwrap();
        assert!(matches!(&down, Message::DownlinkDist(d) if d.j == 1));
        dev.apply(down).unwrap();
        assert!(edge.awaiting_carry());
        assert_eq!(&dev.state().prefix[..dev.state().prefix.len() - 1], edge.state().prefix.as_slice());

        match dev.draft().unwrap() {
            Message::UplinkDssd(u) => {
                assert_eq!(u.carry_token, Some(dev.emitted()[0]));
                let carry = u.carry_token.unwrap();
                edge.handle(Message::UplinkDssd(u)).unwrap();
                // the carry lands right after the old prompt
                assert_eq!(edge.state().prefix[1], carry);
            }
            other => panic!("{other:?}"),
        }
        // P never supports token 0, so the second round rejects again
        assert!(edge.awaiting_carry());
    }

    #[test]
    fn dssd_all_accept_returns_token() {
        let vocab = VocabConfig::new(8, 16).unwrap();
        let m = table_model(vec![], normalize(&[1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 1.0]).unwrap(), 1).unwrap();
        let p = params(vocab, 3);
        let mut dev = Device::new(Mode::Dssd, &m, p, &[TokenId(0)], 4).unwrap();
        let mut edge = Edge::new(Mode::Dssd, &m, p, &[TokenId(0)]);
        let down = edge.handle(dev.draft().unwrap()).unwrap();
        assert!(matches!(&down, Message::DownlinkToken(t) if t.j == 5));
        dev.apply(down).unwrap();
        assert_eq!(dev.pending_carry(), None);
        assert_eq!(dev.state().prefix, edge.state().prefix);
    }

    #[test]
    fn desync_is_detected() {
        let vocab = VocabConfig::new(4, 16).unwrap();
        let m = table_model(vec![], Dist::uniform(4), 1).unwrap();
        let p = params(vocab, 3);
        let mut edge = Edge::new(Mode::Dsd, &m, p, &[TokenId(0)]);
        let wrong_round = UplinkDsd {
            round: 5,
            tokens: vec![TokenId(1)],
            dists: vec![vec![0.25; 4]],
        };
        assert!(matches!(edge.verify_dsd(&wrong_round), Err(Error::Desync(_))));
        let out_of_vocab = UplinkDsd {
            round: 0,
            tokens: vec![TokenId(9)],
            dists: vec![vec![0.25; 4]],
        };
        assert!(matches!(edge.verify_dsd(&out_of_vocab), Err(Error::Desync(_))));

        let mut dev = Device::new(Mode::Dsd, &m, p, &[TokenId(0)], 2).unwrap();
        let stray = Message::DownlinkToken(DownlinkToken { round: 0, j: 1, token: TokenId(0) });
        assert!(matches!(dev.apply(stray.clone()), Err(Error::Desync(_))));
        dev.draft().unwrap();
        let late = Message::DownlinkToken(DownlinkToken { round: 1, j: 1, token: TokenId(0) });
        assert!(matches!(dev.apply(late), Err(Error::Desync(_))));
        let mut dssd_edge = Edge::new(Mode::Dssd, &m, p, &[TokenId(0)]);
        let carry = UplinkDssd {
            round: 0,
            tokens: vec![TokenId(1)],
            q_vals: vec![0.25],
            carry_token: Some(TokenId(2)),
        };
        assert!(matches!(dssd_edge.verify_dssd(&carry), Err(Error::Desync(_))));
    }

    #[test]
    fn protocols_match_reference_on_calibrated_pair() {
        let vocab = VocabConfig::new(64, 16).unwrap();
        let (mq, mp) = calibrated_pair(&CalibratedPairConfig::new(0.5, vocab, 7)).unwrap();
        let prompt = [TokenId(3), TokenId(9)];
        let cfg = DecodeConfig::new(4, 7).with_precision(Precision::Half);
        let reference = reference_decode(&mq, &mp, &prompt, 300, &cfg).unwrap();
        let p = params(vocab, 7);
        for mode in [Mode::Dsd, Mode::Dssd] {
            let mut dev = Device::new(mode, &mq, p, &prompt, 4).unwrap();
            let mut edge = Edge::new(mode, &mp, p, &prompt);
            for expected in &reference.outcomes {
                let out = round_trip(&mut dev, &mut edge, &vocab);
                assert_eq!(out.reject_position, expected.reject_position);
            }
            assert_eq!(dev.emitted(), reference.tokens.as_slice(), "{mode:?}");
        }
    }
}
