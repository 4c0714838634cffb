use proptest::prelude::*;

use dssd::dist::{Precision, TokenId, VocabConfig};
use dssd::harness::prompt_fixture;
use dssd::models::{calibrated_pair, CalibratedPairConfig};
use dssd::protocol::{decode, encode, payload_bits, DownlinkDist, DownlinkToken, Message, SessionParams, UplinkDsd, UplinkDssd};
use dssd::transport::{run_session, LinkConfig, SessionConfig, SessionMode, TransportKind};
use dssd::SamplingConfig;

fn arb_prob(precision: Precision) -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.0), 1e-9f64..1.0].prop_map(move |x| precision.quantize(x))
}

fn arb_message(vocab: VocabConfig) -> impl Strategy<Value = Message> {
    let p = vocab.precision();
    let n = vocab.size;
    let token = (0..n as u32).prop_map(TokenId);
    prop_oneof![
        (any::<u32>(), 1usize..6).prop_flat_map(move |(round, gamma)| {
            (
                prop::collection::vec((0..n as u32).prop_map(TokenId), gamma),
                prop::collection::vec(prop::collection::vec(arb_prob(p), n), gamma),
            )
                .prop_map(move |(tokens, dists)| Message::UplinkDsd(UplinkDsd { round, tokens, dists }))
        }),
        (any::<u32>(), 1usize..12, prop::option::of(token.clone())).prop_flat_map(move |(round, gamma, carry)| {
            (
                prop::collection::vec((0..n as u32).prop_map(TokenId), gamma),
                prop::collection::vec(arb_prob(p).prop_filter("positive", |q| *q > 0.0), gamma),
            )
                .prop_map(move |(tokens, q_vals)| {
                    Message::UplinkDssd(UplinkDssd { round, tokens, q_vals, carry_token: carry })
                })
        }),
        (any::<u32>(), any::<u16>(), token).prop_map(|(round, j, token)| {
            Message::DownlinkToken(DownlinkToken { round, j, token })
        }),
        (any::<u32>(), any::<u16>(), prop::collection::vec(arb_prob(p), n)).prop_map(|(round, j, p_dist)| {
            Message::DownlinkDist(DownlinkDist { round, j, p_dist })
        }),
    ]
}

proptest! {
    #[test]
    fn wire_round_trip_half(msg in arb_message(VocabConfig::new(17, 16).unwrap())) {
        let vocab = VocabConfig::new(17, 16).unwrap();
        let frame = encode(&msg, &vocab).unwrap();
        prop_assert_eq!((frame.len() - 5) as u64 * 8, payload_bits(&msg, &vocab));
        prop_assert_eq!(decode(&frame, &vocab).unwrap(), msg);
    }

    #[test]
    fn wire_round_trip_single(msg in arb_message(VocabConfig::new(9, 32).unwrap())) {
        let vocab = VocabConfig::new(9, 32).unwrap();
        let frame = encode(&msg, &vocab).unwrap();
        prop_assert_eq!(decode(&frame, &vocab).unwrap(), msg);
    }

    #[test]
    fn truncated_frames_are_rejected(msg in arb_message(VocabConfig::new(5, 16).unwrap()), cut in 1usize..8) {
        let vocab = VocabConfig::new(5, 16).unwrap();
        let frame = encode(&msg, &vocab).unwrap();
        let cut = cut.min(frame.len());
        prop_assert!(decode(&frame[..frame.len() - cut], &vocab).is_err());
    }
}

fn config(mode: SessionMode, gamma: usize, seed: u64, vocab: VocabConfig) -> SessionConfig {
    SessionConfig {
        mode,
        gamma,
        link: LinkConfig::new(50.0, 10.0, 20.0).unwrap(),
        params: SessionParams { vocab, sampling: SamplingConfig::default(), seed },
        prompt: prompt_fixture(seed, 8, vocab.size),
        n_tokens: 200,
        max_rounds: None,
    }
}

#[test]
fn round_accounting_invariants() {
    let vocab = VocabConfig::new(500, 16).unwrap();
    for seed in 0..5 {
        let (draft, target) = calibrated_pair(&CalibratedPairConfig::new(0.7, vocab, seed)).unwrap();
        for mode in [SessionMode::Dsd, SessionMode::Dssd] {
            for gamma in [1, 3, 7] {
                let cfg = config(mode, gamma, seed, vocab);
                let t = run_session(&cfg, &draft, &target, &TransportKind::Sim).unwrap();
                let emitted: usize = t.rounds.iter().map(|r| r.emitted()).sum();
                assert_eq!(emitted, t.tokens.len());
                assert!(t.tokens.len() >= 200);
                for r in &t.rounds {
                    assert!(r.accepted <= gamma && r.emitted() <= gamma + 1);
                    assert_eq!(r.rejected(), r.accepted < gamma);
                    let sum = r.t_draft_ms + r.t_verify_ms + r.t_comm_ms;
                    assert!((r.t_round_ms - sum).abs() < 1e-9);
                    // 20 ms NTT plus transmission of both messages
                    let wire = r.uplink_bits as f64 / 50e3 + r.downlink_bits as f64 / 10e3;
                    assert!((r.t_comm_ms - 20.0 - wire).abs() < 1e-9);
                    if mode == SessionMode::Dsd {
                        assert!(r.uplink_bits >= gamma as u64 * vocab.dist_bits());
                        assert!(r.downlink_bits < vocab.dist_bits());
                    } else {
                        assert!(r.uplink_bits < vocab.dist_bits());
                    }
                }
                let total: f64 = t.rounds.iter().map(|r| r.t_round_ms).sum();
                assert!((t.total_ms - total).abs() < 1e-6 * total);
            }
        }
    }
}

#[test]
fn sessions_are_reproducible_per_seed() {
    let vocab = VocabConfig::new(200, 32).unwrap();
    let (draft, target) = calibrated_pair(&CalibratedPairConfig::new(0.5, vocab, 4)).unwrap();
    let cfg = config(SessionMode::Dssd, 5, 4, vocab);
    let a = run_session(&cfg, &draft, &target, &TransportKind::Sim).unwrap();
    let b = run_session(&cfg, &draft, &target, &TransportKind::Sim).unwrap();
    assert_eq!(a, b);
    let other = config(SessionMode::Dssd, 5, 5, vocab);
    let c = run_session(&other, &draft, &target, &TransportKind::Sim).unwrap();
    assert_ne!(a.tokens, c.tokens);
}
