use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_input, check_params};
use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    t
}

#[test]
fn square_gradient() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::scalar(3.0)).unwrap();
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.variable(x).unwrap().data(), &[6.0]);
}

#[test]
fn product_gradient() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::scalar(2.0)).unwrap();
    let y = g.variable(Tensor::scalar(5.0)).unwrap();
    let z = g.mul(x, y).unwrap();
    let grads = g.backward(z).unwrap();
    assert_eq!(grads.variable(x).unwrap().data(), &[5.0]);
    assert_eq!(grads.variable(y).unwrap().data(), &[2.0]);
}

#[test]
fn cross_entropy_on_uniform_logits() {
    let mut g = Graph::new();
    let logits = g.variable(Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap()).unwrap();
    let loss = g.softmax_cross_entropy(logits, &[0]).unwrap();
    assert!((g.value(loss).item().unwrap() - 4f64.ln()).abs() < 1e-15);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.variable(logits).unwrap().data(), &[0.25 - 1.0, 0.25, 0.25, 0.25]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::vector(vec![1.0, 2.0])).unwrap();
    assert!(matches!(g.backward(x), Err(crate::Error::Contract(_))));
}

#[test]
fn non_finite_values_name_the_node() {
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(f64::MAX)).unwrap();
    let err = g.scale(x, 10.0).unwrap_err();
    match err {
        crate::Error::Numeric(msg) => assert!(msg.contains("node 1") && msg.contains("scale")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn backward_leaves_values_untouched() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::vector(vec![0.3, -0.2])).unwrap();
    let t = g.tanh(x).unwrap();
    let s = g.sum(t).unwrap();
    let before = g.value(t).clone();
    g.backward(s).unwrap();
    assert_eq!(g.value(t), &before);
}

#[test]
fn cosine_examples() {
    assert_eq!(cosine_similarity(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
    assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    assert_eq!(cosine_similarity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
    assert!(matches!(
        cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
        Err(crate::Error::Numeric(_))
    ));
}

fn zero_lstm(input_dim: usize, hidden: usize) -> (ParamStore, LstmParams) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = LstmParams::init(&mut store, "cell", input_dim, hidden, hidden, &mut rng).unwrap();
    store.zero_all();
    (store, p)
}

#[test]
fn zero_lstm_from_zero_state_stays_zero() {
    let (store, p) = zero_lstm(3, 2);
    let mut g = Graph::new();
    let cell = p.bind(&mut g, &store).unwrap();
    let h = g.input(Tensor::zeros(vec![2])).unwrap();
    let c = g.input(Tensor::zeros(vec![2])).unwrap();
    let x = g.input(Tensor::vector(vec![0.7, -3.0, 2.0])).unwrap();
    let (h2, c2) = lstm_step(&mut g, &cell, h, c, x).unwrap();
    assert_eq!(g.value(h2).data(), &[0.0, 0.0]);
    assert_eq!(g.value(c2).data(), &[0.0, 0.0]);
}

#[test]
fn zero_lstm_halves_cell_state() {
    let (store, p) = zero_lstm(1, 1);
    let mut g = Graph::new();
    let cell = p.bind(&mut g, &store).unwrap();
    let h = g.input(Tensor::zeros(vec![1])).unwrap();
    let c = g.input(Tensor::vector(vec![1.0])).unwrap();
    let x = g.input(Tensor::vector(vec![0.4])).unwrap();
    let (h2, c2) = lstm_step(&mut g, &cell, h, c, x).unwrap();
    // gates are σ(0) = 0.5 and the candidate is tanh(0) = 0
    assert_eq!(g.value(c2).data(), &[0.5]);
    let want_h = 0.5 * 0.5f64.tanh();
    assert!((g.value(h2).data()[0] - want_h).abs() < 1e-15);
    assert!((want_h - 0.23106).abs() < 1e-5);
}

#[test]
fn lstm_dimension_mismatch_is_contract_error() {
    let (store, p) = zero_lstm(3, 2);
    let mut g = Graph::new();
    let cell = p.bind(&mut g, &store).unwrap();
    let h = g.input(Tensor::zeros(vec![2])).unwrap();
    let c = g.input(Tensor::zeros(vec![2])).unwrap();
    let x = g.input(Tensor::zeros(vec![4])).unwrap();
    assert!(matches!(lstm_step(&mut g, &cell, h, c, x), Err(crate::Error::Contract(_))));
}

#[test]
fn lstm_input_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let p = LstmParams::init(&mut store, "cell", 4, 3, 3, &mut rng).unwrap();
    let h0 = rand_tensor(&mut rng, vec![3]);
    let c0 = rand_tensor(&mut rng, vec![3]);
    let x = rand_tensor(&mut rng, vec![4]);
    let report = check_input(&x, 1e-5, |g, x| {
        let cell = p.bind(g, &store)?;
        let h = g.input(h0.clone())?;
        let c = g.input(c0.clone())?;
        let (h2, _) = lstm_step(g, &cell, h, c, x)?;
        g.sum(h2)
    })
    .unwrap();
    assert!(report.max_rel_err <= 1e-4, "{report:?}");
}

#[test]
fn lstm_param_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let p = LstmParams::init(&mut store, "cell", 3, 2, 2, &mut rng).unwrap();
    for v in store.get_mut(p.bias).data_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }
    let h0 = rand_tensor(&mut rng, vec![2]);
    let c0 = rand_tensor(&mut rng, vec![2]);
    let x0 = rand_tensor(&mut rng, vec![3]);
    let report = check_params(&mut store, 1e-5, |g, s| {
        let cell = p.bind(g, s)?;
        let h = g.input(h0.clone())?;
        let c = g.input(c0.clone())?;
        let x = g.input(x0.clone())?;
        let (h2, c2) = lstm_step(g, &cell, h, c, x)?;
        let both = g.concat(&[h2, c2])?;
        let sq = g.mul(both, both)?;
        g.sum(sq)
    })
    .unwrap();
    assert!(report.max_rel_err <= 1e-4, "{report:?}");
}

#[test]
fn sgd_examples() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::scalar(1.0)).unwrap();
    let mut g = Graph::new();
    let node = g.param(&store, w).unwrap();
    let loss = g.scale(node, 2.0).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut opt = Optimizer::sgd(0.1).unwrap();
    opt.step(&mut store, &grads).unwrap();
    assert!((store.get(w).data()[0] - 0.8).abs() < 1e-15);

    let mut g = Graph::new();
    let node = g.param(&store, w).unwrap();
    let loss = g.scale(node, 0.0).unwrap();
    let grads = g.backward(loss).unwrap();
    let before = store.get(w).clone();
    opt.step(&mut store, &grads).unwrap();
    assert_eq!(store.get(w), &before);
}

#[test]
fn rmsprop_first_step() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::scalar(0.0)).unwrap();
    let mut g = Graph::new();
    let node = g.param(&store, w).unwrap();
    let loss = g.scale(node, 1.0).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut opt = Optimizer::rmsprop(0.001, 0.9, 1e-8).unwrap();
    opt.step(&mut store, &grads).unwrap();
    let acc = opt.accumulator(0).unwrap()[0];
    assert!((acc - 0.1).abs() < 1e-15);
    let want = -0.001 / (0.1f64 + 1e-8).sqrt();
    assert!((store.get(w).data()[0] - want).abs() < 1e-15);
    assert!((want - -0.0031623).abs() < 1e-7);
}

#[test]
fn optimizer_rejects_bad_hyperparameters() {
    assert!(Optimizer::sgd(0.0).is_err());
    assert!(Optimizer::rmsprop(1e-3, 1.0, 1e-8).is_err());
}

#[test]
fn frozen_params_receive_no_update() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::scalar(1.0)).unwrap();
    store.set_requires_grad(w, false);
    let mut g = Graph::new();
    let node = g.param(&store, w).unwrap();
    let v = g.variable(Tensor::scalar(2.0)).unwrap();
    let loss = g.mul(node, v).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(w).is_none());
    let mut opt = Optimizer::sgd(0.1).unwrap();
    opt.step(&mut store, &grads).unwrap();
    assert_eq!(store.get(w).data(), &[1.0]);
}

#[test]
fn conv_matches_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, vec![2, 2, 4, 5]);
    let w = rand_tensor(&mut rng, vec![3, 2, 3, 3]);
    let b = rand_tensor(&mut rng, vec![3]);
    let mut g = Graph::new();
    let (xn, wn, bn) = (g.input(x.clone()).unwrap(), g.input(w.clone()).unwrap(), g.input(b.clone()).unwrap());
    let y = g.conv2d(xn, wn, bn).unwrap();
    let got = g.value(y);
    assert_eq!(got.shape(), &[2, 3, 4, 5]);
    let at = |t: &Tensor, i: [usize; 4]| {
        let s = t.shape();
        t.data()[((i[0] * s[1] + i[1]) * s[2] + i[2]) * s[3] + i[3]]
    };
    for n in 0..2 {
        for o in 0..3 {
            for yy in 0..4 {
                for xx in 0..5 {
                    let mut acc = b.data()[o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = yy as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy < 0 || sy >= 4 || sx < 0 || sx >= 5 {
                                    continue;
                                }
                                acc += at(&w, [o, c, ky, kx]) * at(&x, [n, c, sy as usize, sx as usize]);
                            }
                        }
                    }
                    assert!((at(got, [n, o, yy, xx]) - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn max_pool_picks_block_maxima() {
    let x = Tensor::new(vec![1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, -1.0]).unwrap();
    let mut g = Graph::new();
    let xn = g.variable(x).unwrap();
    let y = g.max_pool2(xn).unwrap();
    assert_eq!(g.value(y).data(), &[5.0, 7.0]);
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.variable(xn).unwrap().data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn repeated_forward_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, vec![1, 3, 6, 6]);
    let w = rand_tensor(&mut rng, vec![4, 3, 3, 3]);
    let b = rand_tensor(&mut rng, vec![4]);
    let run = || {
        let mut g = Graph::new();
        let (xn, wn, bn) = (g.input(x.clone()).unwrap(), g.input(w.clone()).unwrap(), g.input(b.clone()).unwrap());
        let y = g.conv2d(xn, wn, bn).unwrap();
        let y = g.relu(y).unwrap();
        let y = g.max_pool2(y).unwrap();
        let y = g.reshape(y, vec![1, 36]).unwrap();
        let y = g.softmax(y).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-500.0f64..500.0, 1..12)) {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(logits)).unwrap();
        let p = g.softmax(x).unwrap();
        let vals = g.value(p).data();
        prop_assert!(vals.iter().all(|&v| v >= 0.0));
        prop_assert!((vals.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn cosine_is_scale_invariant(
        u in prop::collection::vec(-10.0f64..10.0, 2..8),
        alpha in 1e-3f64..1e3,
    ) {
        prop_assume!(u.iter().any(|v| v.abs() > 1e-6));
        let v: Vec<f64> = u.iter().map(|x| alpha * x).collect();
        let s = cosine_similarity(&u, &v).unwrap();
        prop_assert!((s - 1.0).abs() <= 1e-12);
    }
}
