use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::features::{FeatureSchema, Mode};
use crate::loss::{loss_on_graph, Targets};
use crate::session::{group_sessions, Session};
use crate::synth::{generate, GeneratorConfig};

struct Fixture {
    schema: FeatureSchema,
    encoded: Vec<EncodedSession>,
    table: Option<Tensor>,
}

fn fixture(mode: Mode, sessions: usize) -> Fixture {
    let cfg = GeneratorConfig { sessions, seed: 21, min_packets: 1, max_packets: 6, ..GeneratorConfig::default() };
    let sessions: Vec<Session> = group_sessions(&generate(&cfg).unwrap());
    let schema = FeatureSchema::fit(&sessions, mode).unwrap();
    let table = (mode == Mode::Kal).then(|| {
        pretrain_port_embedder(schema.port_vocabulary.len(), &PretrainConfig { max_epochs: 5, ..Default::default() })
            .unwrap()
            .table
    });
    let encoded = schema.encode_sessions(&sessions, 8);
    Fixture { schema, encoded, table }
}

fn small(arch: Arch) -> ModelConfig {
    ModelConfig { arch, hidden_dim: 4, latent_dim: 3, num_layers: 2, num_heads: 2, seed: 5, ..ModelConfig::default() }
}

#[test]
fn config_validation() {
    let fx = fixture(Mode::Kal, 4);
    let bad = ModelConfig { hidden_dim: 10, num_heads: 4, ..ModelConfig::default() };
    assert!(matches!(SessionAutoencoder::new(bad, &fx.schema), Err(ModelError::ConfigInvariantViolation(_))));
    let ok_rnn = ModelConfig { arch: Arch::Gru, hidden_dim: 10, num_heads: 4, ..ModelConfig::default() };
    assert!(SessionAutoencoder::new(ok_rnn, &fx.schema).is_ok());
    let bad_rate = ModelConfig { dropout_rate: 1.5, ..ModelConfig::default() };
    assert!(SessionAutoencoder::new(bad_rate, &fx.schema).is_err());
    assert_eq!("BiLSTM".parse::<Arch>().unwrap(), Arch::BiLstm);
}

#[test]
fn every_arch_produces_finite_outputs_of_the_right_shape() {
    let fx = fixture(Mode::Kal, 6);
    let refs: Vec<&EncodedSession> = fx.encoded.iter().collect();
    for arch in Arch::ALL {
        let model = SessionAutoencoder::new(ModelConfig { arch, ..ModelConfig::default() }, &fx.schema).unwrap();
        let batch = model.build_batch(&refs, fx.table.as_ref(), None, false).unwrap();
        let outs = model.predict(&batch).unwrap();
        assert_eq!(outs.len(), refs.len());
        for o in &outs {
            assert_eq!(o.values.shape(), [batch.len, fx.schema.output_width], "{arch}");
            assert!(o.values.all_finite(), "{arch}");
        }
        assert!(model.parameter_count() > 0);
    }
}

#[test]
fn zero_input_gives_finite_loss_and_gradients() {
    let fx = fixture(Mode::Kal, 4);
    let refs: Vec<&EncodedSession> = fx.encoded.iter().collect();
    for arch in Arch::ALL {
        let model = SessionAutoencoder::new(small(arch), &fx.schema).unwrap();
        let mut batch = model.build_batch(&refs, fx.table.as_ref(), None, false).unwrap();
        batch.input.data_mut().fill(0.0);
        let targets = Targets::new(&fx.schema, &refs, batch.len, fx.table.as_ref()).unwrap();
        let mut g = Graph::new();
        let y = model.forward(&mut g, &batch).unwrap();
        let lg = loss_on_graph(&mut g, &fx.schema, y, model.activation(), &targets).unwrap();
        assert!(g.value(lg.total).item().is_finite());
        let grads = g.backward(lg.total).unwrap();
        for id in model.store.ids() {
            assert!(grads.get(id).unwrap().all_finite(), "{arch} {}", model.store.name(id));
        }
    }
}

#[test]
fn eval_mode_is_deterministic_and_mask_independent() {
    let fx = fixture(Mode::Kal, 6);
    let refs: Vec<&EncodedSession> = fx.encoded.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for arch in Arch::ALL {
        let model = SessionAutoencoder::new(small(arch), &fx.schema).unwrap();
        let batch = model.build_batch(&refs, fx.table.as_ref(), None, false).unwrap();
        let a = model.predict(&batch).unwrap();
        assert_eq!(a, model.predict(&batch).unwrap(), "{arch}");
        let mut noisy = batch.clone();
        for (r, &m) in batch.mask.iter().enumerate() {
            if !m {
                noisy.input.row_mut(r).iter_mut().for_each(|x| *x = rng.gen_range(-5.0..5.0));
            }
        }
        let b = model.predict(&noisy).unwrap();
        for (s, (oa, ob)) in a.iter().zip(&b).enumerate() {
            for t in 0..refs[s].len() {
                for (x, y) in oa.values.row(t).iter().zip(ob.values.row(t)) {
                    assert!((x - y).abs() < 1e-12, "{arch}: session {s} row {t}");
                }
            }
        }
    }
}

#[test]
fn single_packet_session_runs_everywhere() {
    let fx = fixture(Mode::Kal, 30);
    let one = fx.encoded.iter().find(|e| e.len() == 1).expect("generator makes 1-packet sessions");
    for arch in Arch::ALL {
        let model = SessionAutoencoder::new(small(arch), &fx.schema).unwrap();
        let batch = model.build_batch(&[one], fx.table.as_ref(), None, false).unwrap();
        assert_eq!(batch.len, 1);
        assert!(model.predict(&batch).unwrap()[0].values.all_finite());
    }
}

#[test]
fn feedforward_is_row_wise() {
    let fx = fixture(Mode::Kal, 6);
    let model = SessionAutoencoder::new(small(Arch::Feedforward), &fx.schema).unwrap();
    let refs: Vec<&EncodedSession> = fx.encoded.iter().collect();
    let batch = model.build_batch(&refs, fx.table.as_ref(), None, false).unwrap();
    let full = model.predict(&batch).unwrap();
    let solo = model.build_batch(&refs[..1], fx.table.as_ref(), None, false).unwrap();
    let out = model.predict(&solo).unwrap();
    for t in 0..refs[0].len() {
        for (x, y) in out[0].values.row(t).iter().zip(full[0].values.row(t)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn missing_data_dropout_zeroes_categorical_fields_only() {
    let fx = fixture(Mode::Kal, 6);
    let refs: Vec<&EncodedSession> = fx.encoded.iter().collect();
    let cfg = ModelConfig { dropout_rate: 1.0, missing_data: true, ..small(Arch::Transformer) };
    let model = SessionAutoencoder::new(cfg, &fx.schema).unwrap();
    let clean = model.build_batch(&refs, fx.table.as_ref(), None, false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dropped = model.build_batch(&refs, fx.table.as_ref(), Some(&mut rng), false).unwrap();
    for slot in &model.slots {
        for r in 0..clean.input.rows() {
            let a = &clean.input.row(r)[slot.input_offset..slot.input_offset + slot.width];
            let b = &dropped.input.row(r)[slot.input_offset..slot.input_offset + slot.width];
            if slot.categorical {
                assert!(b.iter().all(|&x| x == 0.0));
            } else {
                assert_eq!(a, b);
            }
        }
    }
    let half = SessionAutoencoder::new(ModelConfig { dropout_rate: 0.5, ..model.config.clone() }, &fx.schema).unwrap();
    let some = half.build_batch(&refs, fx.table.as_ref(), Some(&mut rng), false).unwrap();
    assert!(some.input.data().iter().zip(clean.input.data()).all(|(&x, &y)| x == 0.0 || x == y));
}

/// Central differences against backprop for a sample of parameters.
fn gradient_check(arch: Arch, mode: Mode) {
    let fx = fixture(mode, 5);
    let refs: Vec<&EncodedSession> = fx.encoded.iter().take(3).collect();
    let mut model = SessionAutoencoder::new(small(arch), &fx.schema).unwrap();
    // Zero biases put dead ReLU rows exactly on the kink; move off it.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ids: Vec<_> = model.store.ids().collect();
    for &id in &ids {
        model.store.value_mut(id).data_mut().iter_mut().for_each(|x| *x += rng.gen_range(-0.1..0.1));
    }
    let batch = model.build_batch(&refs, fx.table.as_ref(), None, false).unwrap();
    let targets = Targets::new(&fx.schema, &refs, batch.len, fx.table.as_ref()).unwrap();
    let loss_of = |m: &SessionAutoencoder| {
        let mut g = Graph::new();
        let y = m.forward(&mut g, &batch).unwrap();
        let lg = loss_on_graph(&mut g, &fx.schema, y, m.activation(), &targets).unwrap();
        g.value(lg.total).item()
    };
    let mut g = Graph::new();
    let y = model.forward(&mut g, &batch).unwrap();
    let lg = loss_on_graph(&mut g, &fx.schema, y, model.activation(), &targets).unwrap();
    let base = g.value(lg.total).item();
    let grads = g.backward(lg.total).unwrap();
    let eps = 1e-5;
    // Below this the central difference is dominated by rounding in the loss.
    let floor = 1e-6 * base.abs().max(1.0);
    let mut checked = 0;
    for id in ids {
        let n = model.store.value(id).len();
        let stride = (n / 6).max(1);
        for i in (0..n).step_by(stride) {
            let orig = model.store.value(id).data()[i];
            model.store.value_mut(id).data_mut()[i] = orig + eps;
            let up = loss_of(&model);
            model.store.value_mut(id).data_mut()[i] = orig - eps;
            let down = loss_of(&model);
            model.store.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.get(id).unwrap().data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            assert!(rel < 1e-4, "{arch} {} [{i}]: analytic {analytic} numeric {numeric}", model.store.name(id));
            checked += 1;
        }
    }
    assert!(checked > 20);
}

#[test]
fn gradients_match_finite_differences_under_kal() {
    for arch in Arch::ALL {
        gradient_check(arch, Mode::Kal);
    }
}

#[test]
fn gradients_match_finite_differences_under_mse() {
    gradient_check(Arch::Gru, Mode::MseOnly);
}

#[test]
fn embedder_examples() {
    assert!(matches!(pretrain_port_embedder(0, &PretrainConfig::default()), Err(ModelError::EmptyVocabulary)));
    let one = pretrain_port_embedder(1, &PretrainConfig::default()).unwrap();
    assert_eq!(one.head_accuracy(), 1.0);
    assert_eq!(one.epochs_trained, 0);
    let e = pretrain_port_embedder(64, &PretrainConfig::default()).unwrap();
    assert!(e.head_accuracy() >= 0.99);
    assert_eq!(e.nearest_neighbor_accuracy(), 1.0);
    assert!(e.min_pairwise_distance() > 0.0);
    assert_eq!(e.table.shape(), [64, 32]);
}

#[test]
fn weights_reload_by_name() {
    let fx = fixture(Mode::Kal, 4);
    let a = SessionAutoencoder::new(small(Arch::Lstm), &fx.schema).unwrap();
    let mut b = SessionAutoencoder::new(ModelConfig { seed: 77, ..small(Arch::Lstm) }, &fx.schema).unwrap();
    b.store.load_values_from(&a.store).unwrap();
    let refs: Vec<&EncodedSession> = fx.encoded.iter().collect();
    let batch = a.build_batch(&refs, fx.table.as_ref(), None, false).unwrap();
    assert_eq!(a.predict(&batch).unwrap(), b.predict(&batch).unwrap());
}
