use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{max_relative_error, numeric_gradient};
use super::*;
use crate::error::Error;

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
    let values = (0..shape.numel())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::new(shape, values).unwrap()
}

/// Builds a scalar from `inputs` via `build`, then compares the tape
/// gradient of every input against central differences of the forward
/// value. The scalar is a random weighted sum of the built output so that
/// every output coordinate matters.
fn grad_check<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let weights = |n: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        (0..n)
            .map(|_| rng.random_range(0.5..1.5))
            .collect::<Vec<f64>>()
    };
    let eval = |vals: &[Tensor]| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let shape = tape.shape(out);
        let w = tape.constant(Tensor::new(shape, weights(shape.numel())).unwrap());
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = vars
            .iter()
            .zip(vals)
            .map(|(&v, t)| grads.wrt(v).map_or(vec![0.0; t.len()], <[f64]>::to_vec))
            .collect();
        (tape.scalar(loss), g)
    };
    let (_, analytic) = eval(inputs);
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let numeric = numeric_gradient(
            |x| {
                let mut probe = inputs.to_vec();
                probe[k] = Tensor::new(t.shape(), x.to_vec()).unwrap();
                eval(&probe).0
            },
            t.values(),
            1e-5,
        );
        worst = worst.max(max_relative_error(&analytic[k], &numeric));
    }
    worst
}

#[test]
fn matmul_identity_and_pick() {
    let mut tape = Tape::new();
    let eye = tape.leaf(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
    let m = tape.leaf(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
    let p = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.value(p), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(tape.shape(p), Shape::Matrix(2, 2));

    let a = tape.leaf(Tensor::from_rows(&[&[1.0, 0.0]]).unwrap());
    let b = tape.leaf(Tensor::from_rows(&[&[0.0], &[5.0]]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c), &[0.0]);
    assert_eq!(tape.shape(c), Shape::Matrix(1, 1));
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(Shape::Matrix(2, 3)));
    let b = tape.leaf(Tensor::zeros(Shape::Matrix(2, 3)));
    match tape.matmul(a, b) {
        Err(Error::Dimension { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_tensor(&mut rng, Shape::Matrix(3, 4));
    let b = random_tensor(&mut rng, Shape::Matrix(4, 2));
    let err = grad_check(&[a, b], |t, v| t.matmul(v[0], v[1]).unwrap());
    assert!(err < 1e-6, "max rel err {err}");

    let x = random_tensor(&mut rng, Shape::Vector(4));
    let w = random_tensor(&mut rng, Shape::Matrix(4, 3));
    let err = grad_check(&[x, w], |t, v| t.matmul(v[0], v[1]).unwrap());
    assert!(err < 1e-6, "vector-matrix max rel err {err}");
}

#[test]
fn elementwise_values_and_gradients() {
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::scalar(0.0));
    let s = tape.sigmoid(z).unwrap();
    let t = tape.tanh(z).unwrap();
    assert_eq!(tape.scalar(s), 0.5);
    assert_eq!(tape.scalar(t), 0.0);

    let err = grad_check(&[Tensor::scalar(0.3)], |t, v| t.sigmoid(v[0]).unwrap());
    assert!(err < 1e-6, "sigmoid err {err}");

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_tensor(&mut rng, Shape::Vector(5));
    let b = random_tensor(&mut rng, Shape::Vector(5));
    for op in [tape::Binary::Add, tape::Binary::Sub, tape::Binary::Mul] {
        let err = grad_check(&[a.clone(), b.clone()], |t, v| {
            t.binary(op, v[0], v[1]).unwrap()
        });
        assert!(err < 1e-6, "{op:?} err {err}");
    }
    let err = grad_check(std::slice::from_ref(&a), |t, v| t.tanh(v[0]).unwrap());
    assert!(err < 1e-6, "tanh err {err}");

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(Shape::Vector(2)));
    let y = tape.leaf(Tensor::zeros(Shape::Vector(3)));
    assert!(matches!(tape.add(x, y), Err(Error::Dimension { .. })));
}

#[test]
fn sigmoid_is_finite_at_extremes() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![-1e4, -50.0, 50.0, 1e4]));
    let s = tape.sigmoid(x).unwrap();
    assert!(tape.value(s).iter().all(|v| v.is_finite()));
    assert_eq!(tape.value(s)[2], 1.0);
}

#[test]
fn concat_values_and_gradient_split() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    let b = tape.leaf(Tensor::vector(vec![3.0]));
    let c = tape.concat(&[a, b], 0).unwrap();
    assert_eq!(tape.value(c), &[1.0, 2.0, 3.0]);
    let single = tape.concat(&[a], 0).unwrap();
    assert_eq!(tape.value(single), tape.value(a));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let parts = vec![
        random_tensor(&mut rng, Shape::Vector(3)),
        random_tensor(&mut rng, Shape::Vector(1)),
        random_tensor(&mut rng, Shape::Vector(4)),
    ];
    let err = grad_check(&parts, |t, v| t.concat(v, 0).unwrap());
    assert!(err < 1e-6, "vector concat err {err}");

    let mats = vec![
        random_tensor(&mut rng, Shape::Matrix(2, 3)),
        random_tensor(&mut rng, Shape::Matrix(2, 1)),
    ];
    let err = grad_check(&mats, |t, v| t.concat(v, 1).unwrap());
    assert!(err < 1e-6, "column concat err {err}");

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(Shape::Matrix(2, 3)));
    let y = tape.leaf(Tensor::zeros(Shape::Matrix(3, 3)));
    assert!(matches!(
        tape.concat(&[x, y], 1),
        Err(Error::Dimension { .. })
    ));
    assert!(tape.concat(&[x, y], 0).is_ok());
}

#[test]
fn softmax_cross_entropy_cases() {
    let mut tape = Tape::new();
    let l = tape.leaf(Tensor::vector(vec![0.7; 4]));
    let (loss, p) = tape.softmax_cross_entropy(l, 2).unwrap();
    assert!((tape.scalar(loss) - 4f64.ln()).abs() < 1e-12);
    for x in &p {
        assert!((x - 0.25).abs() < 1e-15);
    }

    let l = tape.leaf(Tensor::vector(vec![1000.0, 0.0]));
    let (loss, p) = tape.softmax_cross_entropy(l, 0).unwrap();
    assert!(tape.scalar(loss).is_finite());
    assert!(tape.scalar(loss).abs() < 1e-12);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    assert!(matches!(
        tape.softmax_cross_entropy(l, 2),
        Err(Error::Index {
            index: 2,
            len: 2,
            ..
        })
    ));
}

#[test]
fn softmax_cross_entropy_gradient_is_p_minus_onehot() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = random_tensor(&mut rng, Shape::Vector(6));
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let (loss, p) = tape.softmax_cross_entropy(l, 3).unwrap();
    let g = tape.backward(loss).unwrap();
    let analytic = g.wrt(l).unwrap().to_vec();
    for (j, (a, pj)) in analytic.iter().zip(&p).enumerate() {
        let expect = pj - if j == 3 { 1.0 } else { 0.0 };
        assert!((a - expect).abs() < 1e-15);
    }
    let numeric = numeric_gradient(
        |x| {
            let mut t = Tape::new();
            let l = t.leaf(Tensor::vector(x.to_vec()));
            let (loss, _) = t.softmax_cross_entropy(l, 3).unwrap();
            t.scalar(loss)
        },
        logits.values(),
        1e-5,
    );
    assert!(max_relative_error(&analytic, &numeric) < 1e-6);
}

#[test]
fn lstm_cell_matches_composed_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let h = 3;
    let x = random_tensor(&mut rng, Shape::Vector(2));
    let state = random_tensor(&mut rng, Shape::Vector(2 * h));
    let wx = random_tensor(&mut rng, Shape::Matrix(2, 4 * h));
    let wh = random_tensor(&mut rng, Shape::Matrix(h, 4 * h));
    let b = random_tensor(&mut rng, Shape::Vector(4 * h));
    let mut tape = Tape::new();
    let v: Vec<Var> = [x, state.clone(), wx, wh, b]
        .into_iter()
        .map(|t| tape.leaf(t))
        .collect();
    let fused = tape.lstm_cell(v[0], v[1], v[2], v[3], v[4]).unwrap();
    let hp = tape.slice(v[1], 0, h).unwrap();
    let zx = tape.matmul(v[0], v[2]).unwrap();
    let zh = tape.matmul(hp, v[3]).unwrap();
    let z = tape.add(zx, zh).unwrap();
    let z = tape.add(z, v[4]).unwrap();
    let z = tape.value(z).to_vec();
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    for j in 0..h {
        let c = sig(z[h + j]) * state.values()[h + j] + sig(z[j]) * z[3 * h + j].tanh();
        let hn = sig(z[2 * h + j]) * c.tanh();
        assert!((tape.value(fused)[j] - hn).abs() < 1e-12);
        assert!((tape.value(fused)[h + j] - c).abs() < 1e-12);
    }
    assert!(tape.lstm_cell(v[0], v[0], v[2], v[3], v[4]).is_err());
}

#[test]
fn lstm_cell_and_blend_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&mut rng, Shape::Vector(2));
    let state = random_tensor(&mut rng, Shape::Vector(6));
    let wx = random_tensor(&mut rng, Shape::Matrix(2, 12));
    let wh = random_tensor(&mut rng, Shape::Matrix(3, 12));
    let b = random_tensor(&mut rng, Shape::Vector(12));
    let err = grad_check(&[x, state, wx, wh, b], |t, v| {
        let s1 = t.lstm_cell(v[0], v[1], v[2], v[3], v[4]).unwrap();
        // A second step routes gradient through the produced state too.
        t.lstm_cell(v[0], s1, v[2], v[3], v[4]).unwrap()
    });
    assert!(err < 1e-6, "lstm cell err {err}");

    let g = random_tensor(&mut rng, Shape::Vector(4));
    let a = random_tensor(&mut rng, Shape::Vector(4));
    let b = random_tensor(&mut rng, Shape::Vector(4));
    let err = grad_check(&[g, a.clone(), b.clone()], |t, v| {
        let s = t.sigmoid(v[0]).unwrap();
        t.blend(s, v[1], v[2]).unwrap()
    });
    assert!(err < 1e-6, "vector blend err {err}");

    let gs = Tensor::scalar(0.2);
    let err = grad_check(&[gs, a, b], |t, v| {
        let s = t.sigmoid(v[0]).unwrap();
        t.blend(s, v[1], v[2]).unwrap()
    });
    assert!(err < 1e-6, "scalar blend err {err}");
}

#[test]
fn gather_row_mean_and_stack_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let table = random_tensor(&mut rng, Shape::Matrix(5, 3));
    let err = grad_check(std::slice::from_ref(&table), |t, v| {
        let r1 = t.gather(v[0], 1).unwrap();
        let r3 = t.gather(v[0], 3).unwrap();
        let r1b = t.gather(v[0], 1).unwrap();
        let m = t.mean(&[r1, r3, r1b]).unwrap();
        let s = t.stack_rows(&[m, r3]).unwrap();
        let row = t.row(s, 0).unwrap();
        let sl = t.slice(row, 1, 2).unwrap();
        let sc = t.scale(sl, -2.5).unwrap();
        t.concat(&[sc, r3], 0).unwrap()
    });
    assert!(err < 1e-6, "gather chain err {err}");

    let mut tape = Tape::new();
    let tv = tape.leaf(table);
    assert!(matches!(tape.gather(tv, 5), Err(Error::Index { .. })));
}

#[test]
fn l2_distance_values_and_gradient() {
    let mut store = ParamStore::new();
    let a = store
        .register(
            "soft.target.w",
            Partition::Target,
            Tensor::vector(vec![1.0, 2.0]),
        )
        .unwrap();
    let b = store
        .register(
            "soft.source.w",
            Partition::Source,
            Tensor::vector(vec![0.0, 0.0]),
        )
        .unwrap();
    let pairs = store.pair_subsets("soft.target.", "soft.source.").unwrap();
    assert_eq!(pairs, vec![(a, b)]);
    assert_eq!(store.l2_distance_sq(&pairs).unwrap(), 5.0);
    assert_eq!(store.l2_distance_sq(&[(a, a)]).unwrap(), 0.0);

    let mut tape = Tape::with_store(&store);
    let (va, vb) = (tape.param(a), tape.param(b));
    let d = tape.sq_dist(va, vb).unwrap();
    assert_eq!(tape.scalar(d), 5.0);
    let g = tape.backward(d).unwrap();
    assert_eq!(g.wrt(va).unwrap(), &[2.0, 4.0]);
    assert_eq!(g.wrt(vb).unwrap(), &[-2.0, -4.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_tensor(&mut rng, Shape::Matrix(2, 3));
    let y = random_tensor(&mut rng, Shape::Matrix(2, 3));
    let err = grad_check(&[x, y], |t, v| t.sq_dist(v[0], v[1]).unwrap());
    assert!(err < 1e-6, "sq dist err {err}");
}

#[test]
fn pairing_errors_name_the_offender() {
    let mut store = ParamStore::new();
    store
        .register("t.w", Partition::Target, Tensor::vector(vec![1.0, 2.0]))
        .unwrap();
    store
        .register("s.v", Partition::Source, Tensor::vector(vec![1.0, 2.0]))
        .unwrap();
    match store.pair_subsets("t.", "s.") {
        Err(Error::Pairing(msg)) => assert!(msg.contains("t.w"), "{msg}"),
        other => panic!("expected pairing error, got {other:?}"),
    }
    let mut store = ParamStore::new();
    store
        .register("t.w", Partition::Target, Tensor::vector(vec![1.0, 2.0]))
        .unwrap();
    store
        .register("s.w", Partition::Source, Tensor::vector(vec![1.0]))
        .unwrap();
    assert!(matches!(
        store.pair_subsets("t.", "s."),
        Err(Error::Pairing(_))
    ));
}

#[test]
fn backward_rejects_foreign_and_non_scalar_loss() {
    let mut t1 = Tape::new();
    let mut t2 = Tape::new();
    let x = t1.leaf(Tensor::scalar(1.0));
    let _ = t2.leaf(Tensor::scalar(1.0));
    assert!(matches!(t2.backward(x), Err(Error::Tape(_))));
    let v = t1.leaf(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(t1.backward(v), Err(Error::Tape(_))));
}

#[test]
fn repeated_backward_matches_fresh_recompute_and_store_accumulates() {
    let mut store = ParamStore::new();
    let w = store
        .register(
            "w",
            Partition::Shared,
            Tensor::from_rows(&[&[0.1, -0.2], &[0.3, 0.4]]).unwrap(),
        )
        .unwrap();
    let grads_once = |store: &ParamStore| {
        let mut tape = Tape::with_store(store);
        let x = tape.leaf(Tensor::vector(vec![1.0, -1.0]));
        let wv = tape.param(w);
        let y = tape.matmul(x, wv).unwrap();
        let y = tape.tanh(y).unwrap();
        let loss = tape.sum(y).unwrap();
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert_eq!(g1.wrt(wv), g2.wrt(wv));
        g1
    };
    let g = grads_once(&store);
    store.accumulate(&g);
    let first = store.tensor(w).grad().unwrap().to_vec();
    let fresh = grads_once(&store);
    store.accumulate(&fresh);
    let doubled = store.tensor(w).grad().unwrap().to_vec();
    for (a, b) in first.iter().zip(&doubled) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn embedding_gradient_is_sparse() {
    let mut store = ParamStore::new();
    let table = store
        .register("emb", Partition::Shared, Tensor::zeros(Shape::Matrix(4, 2)))
        .unwrap();
    let mut tape = Tape::with_store(&store);
    let tv = tape.param(table);
    let r = tape.gather(tv, 2).unwrap();
    let r2 = tape.gather(tv, 2).unwrap();
    let s = tape.add(r, r2).unwrap();
    let loss = tape.sum(s).unwrap();
    let g = tape.backward(loss).unwrap();
    store.accumulate(&g);
    assert_eq!(
        store.tensor(table).grad().unwrap(),
        &[0.0, 0.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0]
    );
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let mut store = ParamStore::new();
    store
        .register("p", Partition::Target, Tensor::vector(vec![0.5, -0.5]))
        .unwrap();
    let mut state = AdamState::new(&store, AdamConfig::default());
    state.step(&mut store, PartitionSet::all()).unwrap();
    assert_eq!(store.tensor(ParamId(0)).values(), &[0.5, -0.5]);
}

#[test]
fn adam_first_step_hand_executed() {
    // m = 0.1, v = 0.001; bias corrected m̂ = 1, v̂ = 1; step = lr / (1 + eps).
    let mut store = ParamStore::new();
    let id = store
        .register("p", Partition::Target, Tensor::scalar(2.0))
        .unwrap();
    store.tensor_mut(id).track()[0] = 1.0;
    let config = AdamConfig {
        lr: 0.1,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&store, config);
    state.step(&mut store, PartitionSet::all()).unwrap();
    let expected = 2.0 - 0.1 / (1.0 + 1e-8);
    assert!((store.tensor(id).values()[0] - expected).abs() < 1e-15);
    assert_eq!(store.tensor(id).grad().unwrap(), &[0.0]);
    assert_eq!(state.step_count(), 1);
}

#[test]
fn adam_detects_mismatched_state() {
    let mut store = ParamStore::new();
    store
        .register("p", Partition::Target, Tensor::scalar(2.0))
        .unwrap();
    let mut state = AdamState::new(&store, AdamConfig::default());
    store
        .register("q", Partition::Target, Tensor::scalar(2.0))
        .unwrap();
    assert!(matches!(
        state.step(&mut store, PartitionSet::all()),
        Err(Error::State(_))
    ));
}

#[test]
fn clip_grad_norm_rescales() {
    let mut store = ParamStore::new();
    let id = store
        .register("p", Partition::Target, Tensor::vector(vec![0.0, 0.0]))
        .unwrap();
    store.tensor_mut(id).track().copy_from_slice(&[3.0, 4.0]);
    let before = clip_grad_norm(&mut store, PartitionSet::all(), 1.0);
    assert_eq!(before, 5.0);
    let g = store.tensor(id).grad().unwrap();
    assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
}

#[test]
fn finite_diff_check_linear_and_constant() {
    let mut store = ParamStore::new();
    let id = store
        .register("w", Partition::Shared, Tensor::vector(vec![0.3, -1.2, 2.0]))
        .unwrap();
    let coeffs = [1.5, -2.0, 0.25];
    store.tensor_mut(id).track().copy_from_slice(&coeffs);
    let report = finite_diff_check(
        &mut store,
        |s| {
            Ok(s.tensor(id)
                .values()
                .iter()
                .zip(&coeffs)
                .map(|(x, c)| x * c)
                .sum())
        },
        Coords::All,
        gradcheck::DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-9, "{report:?}");
    assert_eq!(report.checked, 3);

    store.zero_grads();
    let report = finite_diff_check(&mut store, |_| Ok(4.0), Coords::All, 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-12);
}

proptest! {
    #[test]
    fn softmax_sums_to_one(logits in prop::collection::vec(-1e3f64..1e3, 1..12)) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|x| x.is_finite() && *x >= 0.0));
    }

    #[test]
    fn masked_adam_never_moves_outside_mask(
        grads in prop::collection::vec(-10.0f64..10.0, 6),
        mask_bits in 0u8..8,
    ) {
        let parts = [Partition::Target, Partition::Source, Partition::Shared];
        let mut store = ParamStore::new();
        for (i, p) in parts.iter().enumerate() {
            let id = store.register(format!("p{i}"), *p, Tensor::vector(vec![0.1, 0.2])).unwrap();
            store.tensor_mut(id).track().copy_from_slice(&grads[2 * i..2 * i + 2]);
        }
        let mask = PartitionSet::of(
            &parts.iter().enumerate().filter(|(i, _)| mask_bits & (1 << i) != 0).map(|(_, p)| *p).collect::<Vec<_>>(),
        );
        let before = store.clone();
        let mut state = AdamState::new(&store, AdamConfig::default());
        state.step(&mut store, mask).unwrap();
        for ((_, a), (_, b)) in store.iter().zip(before.iter()) {
            if !mask.contains(a.partition) {
                prop_assert_eq!(a.tensor.values(), b.tensor.values());
            }
        }
    }
}
