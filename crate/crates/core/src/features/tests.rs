use std::net::Ipv4Addr;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tensor;
use crate::pcap::{ParsedPacket, TcpFlags};
use crate::session::{group_sessions, Endpoint};
use crate::synth::{generate, GeneratorConfig, PacketBuilder};

fn ep(last: u8, port: u16) -> Endpoint {
    Endpoint { ip: Ipv4Addr::new(10, 0, 0, last), port }
}

fn corpus(sessions: usize, seed: u64) -> Vec<Session> {
    let cfg = GeneratorConfig { sessions, seed, ..GeneratorConfig::default() };
    group_sessions(&generate(&cfg).unwrap())
}

fn random_table(schema: &FeatureSchema, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, d) = (schema.port_vocabulary.len(), schema.embed_dim().unwrap());
    Tensor::from_vec(v, d, (0..v * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn one_session(packets: Vec<ParsedPacket>) -> Session {
    let mut s = group_sessions(&packets);
    assert_eq!(s.len(), 1);
    s.remove(0)
}

#[test]
fn empty_training_set_is_an_error() {
    assert!(matches!(FeatureSchema::fit(&[], Mode::Kal), Err(FeatureError::EmptyTrainingSet)));
}

#[test]
fn kal_kind_assignment_follows_the_fixed_blocks() {
    let schema = FeatureSchema::fit(&corpus(60, 3), Mode::Kal).unwrap();
    let kind = |id| &schema.feature(id).unwrap().kind;
    for id in [FeatureId::IpTtl, FeatureId::IpTos, FeatureId::TcpDataofs] {
        assert!(matches!(kind(id), FeatureKind::OneHot { .. }), "{id}");
    }
    for id in [FeatureId::SrcPort, FeatureId::DstPort] {
        assert!(matches!(kind(id), FeatureKind::Embedded { embed_dim: 32, .. }), "{id}");
    }
    for id in [FeatureId::TcpAck, FeatureId::TcpSeq, FeatureId::TimeSince, FeatureId::PayloadSize] {
        assert!(matches!(kind(id), FeatureKind::Numeric { .. }), "{id}");
    }
    assert!(matches!(kind(FeatureId::TcpFlagSyn), FeatureKind::Binary { zero_value: 0, one_value: 1 }));
}

#[test]
fn mse_only_mode_has_no_typed_kinds() {
    let schema = FeatureSchema::fit(&corpus(40, 4), Mode::MseOnly).unwrap();
    assert!(schema
        .features
        .iter()
        .all(|f| matches!(f.kind, FeatureKind::Numeric { .. } | FeatureKind::Binary { .. })));
    assert!(schema.port_vocabulary.is_empty());
    assert_eq!(schema.encoded_width, 28);
    assert_eq!(schema.output_width, 28);
}

#[test]
fn constant_feature_becomes_degenerate_binary() {
    let schema = FeatureSchema::fit(&corpus(20, 5), Mode::Kal).unwrap();
    let f = schema.feature(FeatureId::IpVersion).unwrap();
    assert_eq!(f.kind, FeatureKind::Binary { zero_value: 4, one_value: 4 });
    let enc = schema.encode_session(&corpus(20, 5)[0], 32);
    assert_eq!(enc.values.get(0, f.offset), 0.0);
}

#[test]
fn port_vocabulary_is_sorted_and_shared() {
    let (c, s1, s2) = (ep(1, 443), ep(2, 22), ep(3, 80));
    let packets = vec![
        PacketBuilder::new(c, s1).at(1, 0).build(),
        PacketBuilder::new(c, s2).at(1, 5).build(),
    ];
    let sessions = group_sessions(&packets);
    let schema = FeatureSchema::fit(&sessions, Mode::Kal).unwrap();
    assert_eq!(schema.port_vocabulary, vec![22, 80, 443]);
    let enc = schema.encode_session(&sessions[1], 4);
    let src = schema.feature(FeatureId::SrcPort).unwrap().offset;
    let dst = schema.feature(FeatureId::DstPort).unwrap().offset;
    assert_eq!((enc.values.get(0, src), enc.values.get(0, dst)), (2.0, 1.0));
}

#[test]
fn ttl_categories_follow_the_generator() {
    let cfg = GeneratorConfig { sessions: 80, ttls: vec![63, 64, 128], ..GeneratorConfig::default() };
    let sessions = group_sessions(&generate(&cfg).unwrap());
    let schema = FeatureSchema::fit(&sessions, Mode::Kal).unwrap();
    let f = schema.feature(FeatureId::IpTtl).unwrap();
    assert_eq!(f.kind, FeatureKind::OneHot { categories: vec![63, 64, 128] });
}

fn window_session() -> Session {
    let (a, b) = (ep(1, 5000), ep(2, 80));
    one_session(vec![
        PacketBuilder::new(a, b).at(1, 0).window(0).ttl(63).flags(TcpFlags::SYN).build(),
        PacketBuilder::new(b, a).at(1, 10).window(65_535).ttl(128).flags(TcpFlags::ACK).build(),
        PacketBuilder::new(a, b).at(1, 20).window(4096).ttl(64).flags(TcpFlags::ACK).build(),
    ])
}

#[test]
fn encode_examples() {
    let s = window_session();
    let schema = FeatureSchema::fit(std::slice::from_ref(&s), Mode::Kal).unwrap();
    let enc = schema.encode_session(&s, 4);
    let win = schema.feature(FeatureId::TcpWindow).unwrap();
    let x = enc.values.get(2, win.offset);
    assert!((x - 4096.0 / 65535.0).abs() < 1e-9);
    assert!((x - 0.0625).abs() < 5e-6);
    let syn = schema.feature(FeatureId::TcpFlagSyn).unwrap().offset;
    assert_eq!((enc.values.get(0, syn), enc.values.get(1, syn)), (1.0, 0.0));
    let ttl = schema.feature(FeatureId::IpTtl).unwrap();
    assert_eq!(&enc.values.row(2)[ttl.offset..ttl.offset + 3], &[0.0, 1.0, 0.0]);
    assert_eq!(enc.mask, vec![true, true, true, false]);
    assert!(enc.values.row(3).iter().all(|&v| v == 0.0));
}

#[test]
fn decode_examples() {
    let s = window_session();
    let schema = FeatureSchema::fit(std::slice::from_ref(&s), Mode::Kal).unwrap();
    let table = random_table(&schema, 1);
    let enc = schema.encode_session(&s, 3);
    let mut out = schema.identity_outputs(&enc, Some(&table)).unwrap();
    let win = schema.feature(FeatureId::TcpWindow).unwrap().output_offset;
    let ack = schema.feature(FeatureId::TcpFlagAck).unwrap().output_offset;
    let ttl = schema.feature(FeatureId::IpTtl).unwrap().output_offset;
    out.values.set(0, win, 0.0625);
    out.values.set(0, ack, 0.5);
    out.values.row_mut(0)[ttl..ttl + 3].copy_from_slice(&[0.1, 0.7, 0.2]);
    let dec = schema.decode_outputs(&out, 3, &s, Some(&table)).unwrap();
    assert_eq!(dec[0].packet.tcp_window, 4096);
    assert!(dec[0].packet.tcp_flags.contains(TcpFlags::ACK));
    assert_eq!(dec[0].packet.ip_ttl, 64);

    out.activation = OutputActivation::Logits;
    out.values.set(0, ack, -0.01);
    let dec = schema.decode_outputs(&out, 1, &s, Some(&table)).unwrap();
    assert!(!dec[0].packet.tcp_flags.contains(TcpFlags::ACK));
}

#[test]
fn decode_checks_widths_and_table() {
    let s = window_session();
    let schema = FeatureSchema::fit(std::slice::from_ref(&s), Mode::Kal).unwrap();
    let bad = ModelOutputs { values: Tensor::zeros(3, 5), activation: OutputActivation::Logits };
    assert!(matches!(schema.decode_outputs(&bad, 3, &s, None), Err(FeatureError::WidthMismatch { .. })));
    let ok_shape = ModelOutputs { values: Tensor::zeros(3, schema.output_width), activation: OutputActivation::Logits };
    assert!(matches!(schema.decode_outputs(&ok_shape, 3, &s, None), Err(FeatureError::SchemaMismatch(_))));
}

#[test]
fn identity_round_trip_both_modes() {
    let sessions = corpus(120, 8);
    for mode in [Mode::Kal, Mode::MseOnly] {
        let schema = FeatureSchema::fit(&sessions, mode).unwrap();
        let table = (mode == Mode::Kal).then(|| random_table(&schema, 2));
        for s in &sessions {
            let enc = schema.encode_session(s, 32);
            assert!(enc.events.is_empty());
            let out = schema.identity_outputs(&enc, table.as_ref()).unwrap();
            let dec = schema.decode_outputs(&out, enc.len(), s, table.as_ref()).unwrap();
            assert_eq!(dec, s.packets, "session {} in {mode:?}", s.id);
        }
    }
}

#[test]
fn unseen_values_and_truncation_are_recorded() {
    let s = window_session();
    let schema = FeatureSchema::fit(std::slice::from_ref(&s), Mode::Kal).unwrap();
    let (a, b) = (ep(1, 6000), ep(2, 80));
    let other = one_session(vec![PacketBuilder::new(a, b).at(1, 0).ttl(255).build()]);
    let enc = schema.encode_session(&other, 2);
    let ttl = schema.feature(FeatureId::IpTtl).unwrap();
    assert!(enc.values.row(0)[ttl.offset..ttl.offset + 3].iter().all(|&v| v == 0.0));
    assert!(enc.events.contains(&EncodeEvent::UnseenCategory { feature: FeatureId::IpTtl, packet: 0, value: 255 }));
    let src = schema.feature(FeatureId::SrcPort).unwrap().offset;
    assert_eq!(enc.values.get(0, src), schema.oov_id() as f64);

    let trunc = schema.encode_session(&s, 2);
    assert_eq!(trunc.len(), 2);
    assert_eq!(trunc.events, vec![EncodeEvent::Truncated { original_len: 3, max_len: 2 }]);
}

#[test]
fn layout_partitions_the_columns() {
    let schema = FeatureSchema::fit(&corpus(30, 9), Mode::Kal).unwrap();
    let mut owner = vec![None; schema.encoded_width];
    for (k, f) in schema.features.iter().enumerate() {
        for c in f.offset..f.offset + f.width() {
            assert!(owner[c].is_none());
            owner[c] = Some(k);
        }
    }
    assert!(owner.iter().all(Option::is_some));
    assert_eq!(schema.features.len(), 28);
}

#[test]
fn schema_json_round_trip_and_validation() {
    let schema = FeatureSchema::fit(&corpus(30, 10), Mode::Kal).unwrap();
    let back = FeatureSchema::from_json(&schema.to_json().unwrap()).unwrap();
    assert_eq!(back, schema);
    let mut broken = schema.clone();
    broken.features.pop();
    assert!(FeatureSchema::from_json(&serde_json::to_string(&broken).unwrap()).is_err());
    let mut old = schema;
    old.version = 0;
    assert!(matches!(old.validate(), Err(FeatureError::UnsupportedVersion(0))));
}

#[test]
fn fit_is_deterministic() {
    let sessions = corpus(30, 11);
    assert_eq!(FeatureSchema::fit(&sessions, Mode::Kal).unwrap(), FeatureSchema::fit(&sessions, Mode::Kal).unwrap());
}

#[test]
fn names_round_trip() {
    for id in FeatureId::ALL {
        assert_eq!(FeatureId::from_name(id.name()), Some(id));
    }
    assert_eq!("MSE-only".parse::<Mode>().unwrap(), Mode::MseOnly);
}

proptest! {
    #[test]
    fn encoded_values_stay_in_unit_interval(seed in 0u64..1000, window in any::<u16>(), ttl in any::<u8>()) {
        let train = corpus(10, seed % 7);
        let schema = FeatureSchema::fit(&train, Mode::Kal).unwrap();
        let (a, b) = (ep(1, 7000), ep(2, 80));
        let s = one_session(vec![PacketBuilder::new(a, b).at(1, 0).window(window).ttl(ttl).seq(seed as u32).build()]);
        let enc = schema.encode_session(&s, 4);
        for f in &schema.features {
            if matches!(f.kind, FeatureKind::Embedded { .. }) {
                continue;
            }
            for r in 0..4 {
                for c in f.offset..f.offset + f.width() {
                    let v = enc.values.get(r, c);
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }
}
