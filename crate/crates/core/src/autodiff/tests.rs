use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Central-difference check of `f` with respect to every input.
fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let eps = 1e-5;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward_all(loss).unwrap();
    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.variable(t.clone())).collect();
        let l = f(&mut g, &vars);
        g.value(l).item()
    };
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads[vars[k].index()].clone().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()));
        for i in 0..t.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "input {k} element {i}: analytic {a} numeric {numeric}");
        }
    }
}

/// Reduces any tensor to a scalar with non-uniform weights so every
/// element's gradient differs.
fn weighted_sum(g: &mut Graph, x: Var) -> Var {
    let [r, c] = g.shape(x);
    let w = Tensor::from_vec(r, c, (0..r * c).map(|i| 0.3 + 0.17 * i as f64).collect());
    let w = g.constant(w);
    let y = g.mul(x, w).unwrap();
    g.sum(y)
}

#[test]
fn sigmoid_at_zero() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::scalar(0.0));
    let y = g.sigmoid(x);
    assert_eq!(g.value(y).item(), 0.5);
    let grads = g.backward_all(y).unwrap();
    assert_eq!(grads[x.index()].as_ref().unwrap().item(), 0.25);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(1, 3));
    let y = g.softmax(x);
    for &p in g.value(y).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn dropout_rate_one_zeroes_everything() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.variable(random(4, 5, &mut rng));
    let y = g.dropout(x, 1.0, &mut rng, true).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn dropout_rescales_survivors() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new();
    let x = g.constant(Tensor::filled(50, 40, 1.0));
    let y = g.dropout(x, 0.25, &mut rng, true).unwrap();
    let vals = g.value(y).data();
    assert!(vals.iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-12));
    let kept = vals.iter().filter(|&&v| v != 0.0).count() as f64 / vals.len() as f64;
    assert!((kept - 0.75).abs() < 0.05);
    let z = g.dropout(x, 0.5, &mut rng, false).unwrap();
    assert!(g.value(z).data().iter().all(|&v| v == 0.0 || v == 1.0));
}

#[test]
fn sum_gradient_is_ones() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::row_vector(vec![1.0, -2.0, 3.5]));
    let s = g.sum(x);
    let grads = g.backward_all(s).unwrap();
    assert_eq!(grads[x.index()].as_ref().unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_errors() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::zeros(2, 2));
    assert!(matches!(g.backward_all(x), Err(AutodiffError::NonScalarLoss([2, 2]))));
    let s = g.sum(x);
    g.backward_all(s).unwrap();
    assert!(matches!(g.backward_all(s), Err(AutodiffError::DoubleBackward)));
}

#[test]
fn shape_mismatch_is_reported() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(2, 3));
    let b = g.constant(Tensor::zeros(2, 3));
    assert!(matches!(g.matmul(a, b), Err(AutodiffError::ShapeMismatch { op: "matmul", .. })));
    let c = g.constant(Tensor::zeros(3, 2));
    assert!(g.add(a, c).is_err());
}

#[test]
fn constant_loss_gives_zero_gradients() {
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = store.add_weight("w", 3, 2, &mut rng).unwrap();
    let mut g = Graph::new();
    let _bound = g.param(&store, w);
    let c = g.constant(Tensor::scalar(2.5));
    let grads = g.backward(c).unwrap();
    assert!(grads.get(w).unwrap().data().iter().all(|&x| x == 0.0));
}

#[test]
fn two_layer_mse_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(5, 4, &mut rng);
    let target = random(5, 2, &mut rng);
    check(
        vec![random(4, 6, &mut rng), random(1, 6, &mut rng), random(6, 2, &mut rng), random(1, 2, &mut rng)],
        |g, p| {
            let xv = g.constant(x.clone());
            let h = g.matmul(xv, p[0]).unwrap();
            let h = g.add_row(h, p[1]).unwrap();
            let h = g.tanh(h);
            let o = g.matmul(h, p[2]).unwrap();
            let o = g.add_row(o, p[3]).unwrap();
            let t = g.constant(target.clone());
            let d = g.sub(o, t).unwrap();
            let sq = g.mul(d, d).unwrap();
            let s = g.sum(sq);
            g.scale(s, 0.1)
        },
    );
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = random(3, 4, &mut rng);
    let b = random(3, 4, &mut rng);
    check(vec![a.clone(), b.clone()], |g, p| {
        let s = g.add(p[0], p[1]).unwrap();
        let d = g.sub(s, p[1]).unwrap();
        let m = g.mul(d, p[1]).unwrap();
        weighted_sum(g, m)
    });
    check(vec![a.clone()], |g, p| {
        let y = g.sigmoid(p[0]);
        weighted_sum(g, y)
    });
    check(vec![a.clone()], |g, p| {
        let y = g.tanh(p[0]);
        weighted_sum(g, y)
    });
    check(vec![a.clone()], |g, p| {
        let y = g.relu(p[0]);
        weighted_sum(g, y)
    });
    let pos = a.map(|x| x.abs() + 0.5);
    check(vec![pos], |g, p| {
        let y = g.ln(p[0]);
        weighted_sum(g, y)
    });
    check(vec![a.clone()], |g, p| {
        let y = g.clamp(p[0], -0.5, 0.5);
        weighted_sum(g, y)
    });
    check(vec![a.clone()], |g, p| {
        let y = g.scale(p[0], -1.7);
        weighted_sum(g, y)
    });
}

#[test]
fn structural_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = random(3, 4, &mut rng);
    let b = random(3, 2, &mut rng);
    let c = random(2, 4, &mut rng);
    check(vec![a.clone(), b.clone()], |g, p| {
        let y = g.concat_cols(&[p[0], p[1]]).unwrap();
        let y = g.slice_cols(y, 1, 4).unwrap();
        weighted_sum(g, y)
    });
    check(vec![a.clone(), c.clone()], |g, p| {
        let y = g.concat_rows(&[p[0], p[1]]).unwrap();
        let y = g.gather_rows(y, &[4, 0, 0, 2]).unwrap();
        weighted_sum(g, y)
    });
    check(vec![a.clone()], |g, p| {
        let y = g.transpose(p[0]);
        weighted_sum(g, y)
    });
    check(vec![a.clone(), c.clone()], |g, p| {
        let y = g.matmul_t(p[0], p[1]).unwrap();
        weighted_sum(g, y)
    });
    let row = random(1, 4, &mut rng);
    check(vec![a.clone(), row], |g, p| {
        let y = g.mul_row(p[0], p[1]).unwrap();
        let y = g.add_row(y, p[1]).unwrap();
        weighted_sum(g, y)
    });
    let col = random(3, 1, &mut rng);
    check(vec![a.clone(), col], |g, p| {
        let y = g.mul_col(p[0], p[1]).unwrap();
        weighted_sum(g, y)
    });
    check(vec![a.clone()], |g, p| {
        let y = g.masked_mean(p[0], &[true, false, true]).unwrap();
        weighted_sum(g, y)
    });
    let mask = Tensor::from_vec(3, 4, (0..12).map(|i| (i % 3) as f64 * 0.5).collect());
    check(vec![a], |g, p| {
        let y = g.dropout_with_mask(p[0], mask.clone()).unwrap();
        weighted_sum(g, y)
    });
}

#[test]
fn normalizing_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let a = random(3, 5, &mut rng);
    check(vec![a.clone()], |g, p| {
        let y = g.softmax(p[0]);
        weighted_sum(g, y)
    });
    check(vec![a.clone()], |g, p| {
        let y = g.layer_norm(p[0]);
        weighted_sum(g, y)
    });
    let targets = Tensor::from_vec(3, 5, (0..15).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect());
    check(vec![a.clone()], |g, p| {
        let y = g.bce_with_logits(p[0], targets.clone()).unwrap();
        weighted_sum(g, y)
    });
    let onehot = Tensor::from_vec(3, 5, vec![0., 1., 0., 0., 0., 0., 0., 0., 0., 1., 0., 0., 0., 0., 0.]);
    check(vec![a], |g, p| {
        let y = g.softmax_cross_entropy(p[0], onehot.clone()).unwrap();
        weighted_sum(g, y)
    });
}

#[test]
fn attention_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (block, d) = (3, 4);
    let mask = [true, true, false, true, false, false];
    check(
        vec![random(2 * block, d, &mut rng), random(2 * block, d, &mut rng), random(2 * block, d, &mut rng)],
        |g, p| {
            let y = g.attention(p[0], p[1], p[2], 2, block, &mask).unwrap();
            weighted_sum(g, y)
        },
    );
}

#[test]
fn attention_ignores_masked_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let q = random(4, 4, &mut rng);
    let k = random(4, 4, &mut rng);
    let mut v = random(4, 4, &mut rng);
    let mask = [true, true, false, false];
    let run = |v: &Tensor| {
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let y = g.attention(qv, kv, vv, 2, 4, &mask).unwrap();
        g.value(y).clone()
    };
    let before = run(&v);
    v.row_mut(3).iter_mut().for_each(|x| *x += 10.0);
    assert_eq!(before, run(&v));
}

#[test]
fn bce_and_cross_entropy_values() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::scalar(0.0));
    let l = g.bce_with_logits(z, Tensor::scalar(1.0)).unwrap();
    assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    let z = g.constant(Tensor::zeros(1, 3));
    let l = g.softmax_cross_entropy(z, Tensor::row_vector(vec![0.0, 1.0, 0.0])).unwrap();
    assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-15);
}

#[test]
fn adam_first_step() {
    let mut store = ParameterStore::new();
    let id = store.add("theta", Tensor::scalar(0.0), true).unwrap();
    let mut grads = Gradients::default();
    grads.insert(id, Tensor::scalar(1.0));
    store.adam_step(&grads, 0.001, 0.0).unwrap();
    let expect = -0.001 * (1.0 / (1.0 + 1e-8));
    assert!((store.value(id).item() - expect).abs() < 1e-18);
    assert_eq!(store.step_count(), 1);
}

#[test]
fn adam_decay_only() {
    let mut store = ParameterStore::new();
    let w = store.add("w", Tensor::scalar(1.0), true).unwrap();
    let b = store.add("b", Tensor::scalar(1.0), false).unwrap();
    let mut grads = Gradients::default();
    grads.insert(w, Tensor::scalar(0.0));
    grads.insert(b, Tensor::scalar(0.0));
    store.adam_step(&grads, 0.001, 1e-5).unwrap();
    assert!((store.value(w).item() - (1.0 - 1e-8)).abs() < 1e-16);
    assert_eq!(store.value(b).item(), 1.0);
}

#[test]
fn adam_zero_gradient_no_decay_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParameterStore::new();
    let w = store.add_weight("w", 3, 3, &mut rng).unwrap();
    let before = store.value(w).clone();
    let mut grads = Gradients::default();
    grads.insert(w, Tensor::zeros(3, 3));
    store.adam_step(&grads, 0.001, 0.0).unwrap();
    assert_eq!(&before, store.value(w));
}

#[test]
fn adam_requires_every_gradient() {
    let mut store = ParameterStore::new();
    store.add("a", Tensor::scalar(0.0), true).unwrap();
    let err = store.adam_step(&Gradients::default(), 0.001, 0.0).unwrap_err();
    assert!(matches!(err, AutodiffError::MissingGradient(name) if name == "a"));
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParameterStore::new();
    let w = store.add_weight("layer.w", 4, 3, &mut rng).unwrap();
    store.add_bias("layer.b", 3).unwrap();
    let mut grads = Gradients::default();
    for id in store.ids().collect::<Vec<_>>() {
        let [r, c] = store.value(id).shape();
        grads.insert(id, random(r, c, &mut rng));
    }
    store.adam_step(&grads, 0.01, 1e-5).unwrap();
    let back = ParameterStore::from_json(&store.to_json().unwrap()).unwrap();
    assert_eq!(back.value(w), store.value(w));
    assert_eq!(back.step_count(), 1);
    assert!(ParameterStore::from_json(r#"{"version":99,"params":[],"step":0}"#).is_err());
}
