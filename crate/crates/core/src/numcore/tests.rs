use std::rc::Rc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Central-difference check of `f` with respect to every input.
fn check_gradients<F>(inputs: &[Tensor], f: F)
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&g, &vars);
    let grads = g.backward(loss).unwrap();
    let h = 1e-5;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).map(Tensor::into_data).unwrap_or(vec![0.0; t.len()]);
        let mut numeric = vec![0.0; t.len()];
        for j in 0..t.len() {
            let eval = |delta: f64| {
                let g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, x)| {
                        let mut x = x.clone();
                        if k == i {
                            x.data_mut()[j] += delta;
                        }
                        g.input(x)
                    })
                    .collect();
                let v = f(&g, &vars).value().item();
                v
            };
            numeric[j] = (eval(h) - eval(-h)) / (2.0 * h);
        }
        let e = rel_err(&analytic, &numeric);
        assert!(e < 1e-6, "input {i}: relative error {e:e}\n{analytic:?}\n{numeric:?}");
    }
}

/// Fixed random projection turning any tensor into a scalar with a
/// non-trivial gradient.
fn probe<'g>(g: &'g Graph, x: Var<'g>, seed: u64) -> Var<'g> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, &x.shape());
    x.mul(g.constant(w)).unwrap().sum()
}

#[test]
fn grad_sum_is_all_ones() {
    let g = Graph::new();
    let x = g.input(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap());
    let grads = g.backward(x.sum()).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[1.0; 6]);
}

#[test]
fn grad_product_rule() {
    let g = Graph::new();
    let x = g.input(Tensor::scalar(3.0));
    let y = g.input(Tensor::scalar(-4.0));
    let grads = g.backward(x.mul(y).unwrap()).unwrap();
    assert_eq!(grads.wrt(x).unwrap().item(), -4.0);
    assert_eq!(grads.wrt(y).unwrap().item(), 3.0);
}

#[test]
fn backward_twice_returns_fresh_gradients() {
    let g = Graph::new();
    let x = g.input(Tensor::scalar(2.0));
    let loss = x.mul(x).unwrap();
    let a = g.backward(loss).unwrap().wrt(x).unwrap();
    let b = g.backward(loss).unwrap().wrt(x).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.item(), 4.0);
}

#[test]
fn backward_rejects_non_scalar() {
    let g = Graph::new();
    let x = g.input(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(x), Err(Error::Dimension(_))));
}

#[test]
fn fd_elementwise_and_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_tensor(&mut rng, &[3, 4]);
    let b = random_tensor(&mut rng, &[4, 2]);
    let c = random_tensor(&mut rng, &[5, 4]);
    let r = random_tensor(&mut rng, &[2]);
    check_gradients(&[a.clone(), b, r], |g, v| {
        let y = v[0].matmul(v[1]).unwrap().add_row(v[2]).unwrap().relu();
        probe(g, y, 7)
    });
    check_gradients(&[a.clone(), c], |g, v| {
        let y = v[0].matmul_bt(v[1]).unwrap().scale(0.7);
        probe(g, y, 8)
    });
    check_gradients(&[a.clone(), a.clone()], |g, v| {
        let y = v[0].add(v[1]).unwrap().mul(v[0]).unwrap();
        probe(g, y, 9)
    });
}

#[test]
fn fd_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor(&mut rng, &[4, 5]);
    let gain = random_tensor(&mut rng, &[5]);
    let bias = random_tensor(&mut rng, &[5]);
    check_gradients(&[x, gain, bias], |g, v| {
        let y = v[0].layer_norm(v[1], v[2], 1e-5).unwrap();
        probe(g, y, 3)
    });
}

#[test]
fn fd_attention_with_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = random_tensor(&mut rng, &[7, 4]);
    let k = random_tensor(&mut rng, &[6, 4]);
    let v = random_tensor(&mut rng, &[6, 6]);
    let layout = Rc::new(AttnLayout {
        segments: vec![
            Segment { q_start: 0, q_len: 3, k_start: 0, k_len: 3, mask: SegmentMask::Inclusive },
            Segment { q_start: 3, q_len: 4, k_start: 2, k_len: 4, mask: SegmentMask::Strict },
        ],
        key_valid: Some(vec![true, true, true, false, true, true]),
        allow_empty_rows: true,
    });
    check_gradients(&[q, k, v], move |g, vs| {
        let y = vs[0].attention(vs[1], vs[2], 2, layout.clone()).unwrap();
        probe(g, y, 4)
    });
}

#[test]
fn fd_embedding_select_and_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let table = random_tensor(&mut rng, &[6, 3]);
    let w = random_tensor(&mut rng, &[3, 5]);
    check_gradients(&[table, w], |_, v| {
        let e = v[0].embedding(&[0, 3, 3, 5]).unwrap();
        let h = e.select_rows(&[3, 1, 0]).unwrap();
        let logits = h.matmul(v[1]).unwrap();
        logits.cross_entropy(&[Some(1), None, Some(4)], 0.1).unwrap()
    });
}

#[test]
fn dropout_is_identity_in_eval_and_masks_in_training() {
    let g = Graph::new();
    let x = g.input(Tensor::full(&[4, 4], 1.0));
    let y = x.dropout(0.5);
    assert_eq!(y.value().data(), x.value().data());

    let g = Graph::training(ChaCha8Rng::seed_from_u64(0));
    let x = g.input(Tensor::full(&[8, 8], 1.0));
    let y = x.dropout(0.5);
    let vals = y.value().data().to_vec();
    assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
    assert!(vals.contains(&0.0) && vals.contains(&2.0));
}

#[test]
fn layer_norm_examples() {
    let ones = |n| Tensor::full(&[n], 1.0);
    let zeros = |n| Tensor::zeros(&[n]);

    let x = Tensor::new(vec![1, 3], vec![4.0, 4.0, 4.0]).unwrap();
    let y = layer_norm(&x, &ones(3), &zeros(3), 1e-5).unwrap();
    assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

    let x = Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
    let y = layer_norm(&x, &ones(2), &zeros(2), 1e-12).unwrap();
    assert!((y.data()[0] - 1.0).abs() < 1e-9 && (y.data()[1] + 1.0).abs() < 1e-9);

    let x = Tensor::new(vec![1, 2], vec![0.0, 2.0]).unwrap();
    let g = Tensor::full(&[2], 2.0);
    let b = Tensor::full(&[2], 1.0);
    let y = layer_norm(&x, &g, &b, 0.0).unwrap();
    assert_eq!(y.data(), &[-1.0, 3.0]);
}

#[test]
fn layer_norm_rejects_zero_width() {
    let x = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
    let g = Tensor::full(&[3], 1.0);
    assert!(matches!(layer_norm(&x, &g, &g, 1e-5), Err(Error::Dimension(_))));
}

#[test]
fn layer_norm_rows_have_zero_mean_unit_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&mut rng, &[6, 8]);
    let y = layer_norm(&x, &Tensor::full(&[8], 1.0), &Tensor::zeros(&[8]), 1e-10).unwrap();
    for r in 0..6 {
        let row = y.row(r);
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

fn inv_sqrt() -> AdamConfig {
    AdamConfig { peak_lr: 7e-4, warmup_steps: 4000, ..Default::default() }
}

#[test]
fn lr_schedule_examples() {
    let c = inv_sqrt();
    assert!((lr_schedule(4000, &c).unwrap() - 7e-4).abs() < 1e-15);
    assert!((lr_schedule(2000, &c).unwrap() - 3.5e-4).abs() < 1e-15);
    assert!((lr_schedule(16000, &c).unwrap() - 3.5e-4).abs() < 1e-15);
    assert!(matches!(lr_schedule(0, &c), Err(Error::Domain(_))));
    let f = AdamConfig::fixed(8e-5);
    assert_eq!(lr_schedule(1, &f).unwrap(), 8e-5);
    assert_eq!(lr_schedule(123_456, &f).unwrap(), 8e-5);
}

#[test]
fn lr_schedule_peaks_at_warmup() {
    let c = inv_sqrt();
    let peak = lr_schedule(4000, &c).unwrap();
    for s in (1..20000).step_by(97) {
        assert!(lr_schedule(s, &c).unwrap() <= peak + 1e-18);
    }
    let left = lr_schedule(3999, &c).unwrap();
    let right = lr_schedule(4001, &c).unwrap();
    assert!((left - peak).abs() < 1e-3 * peak && (right - peak).abs() < 1e-3 * peak);
}

fn scalar_store(v: f64) -> (ParamStore, ParamId) {
    let mut s = ParamStore::new();
    let id = s.add("w", Tensor::scalar(v));
    (s, id)
}

fn grads_for(store: &ParamStore, id: ParamId, coeff: f64) -> Gradients {
    // loss = coeff · w  ⇒  dL/dw = coeff
    let g = Graph::new();
    let w = g.param(store, id);
    let loss = w.scale(coeff);
    g.backward(loss).unwrap()
}

#[test]
fn adam_zero_gradient_is_identity() {
    let (mut store, id) = scalar_store(1.5);
    let mut st = OptimizerState::new(AdamConfig::fixed(0.1), &store).unwrap();
    let grads = grads_for(&store, id, 0.0);
    adam_step(&mut store, &grads, &mut st).unwrap();
    assert_eq!(store.get(id).item(), 1.5);
    assert_eq!(st.first_moment(0), &[0.0]);
    assert_eq!(st.second_moment(0), &[0.0]);
    assert_eq!(st.step(), 1);
}

#[test]
fn adam_two_steps_match_closed_form() {
    let (b1, b2, eps, lr, g) = (0.9f64, 0.98f64, 1e-9, 0.01, 0.3);
    let (mut store, id) = scalar_store(1.0);
    let mut st = OptimizerState::new(AdamConfig::fixed(lr), &store).unwrap();
    let mut p = 1.0;
    let (mut m, mut v) = (0.0, 0.0);
    for t in 1..=2 {
        let grads = grads_for(&store, id, g);
        adam_step(&mut store, &grads, &mut st).unwrap();
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t));
        let vhat = v / (1.0 - b2.powi(t));
        let update = lr * mhat / (vhat.sqrt() + eps);
        p -= update;
        assert!((store.get(id).item() - p).abs() < 1e-15);
        // with a constant gradient the bias-corrected step is lr·sign(g)
        assert!((update - lr).abs() < 1e-7);
    }
}

#[test]
fn adam_rejects_non_finite_gradient() {
    let (mut store, id) = scalar_store(1.0);
    let mut st = OptimizerState::new(AdamConfig::fixed(0.1), &store).unwrap();
    let g = Graph::new();
    let w = g.param(&store, id);
    let loss = w.scale(f64::INFINITY);
    assert!(matches!(g.backward(loss), Err(Error::Numeric(_))));
    let grads = grads_for(&store, id, 1.0);
    adam_step(&mut store, &grads, &mut st).unwrap();
    assert_eq!(st.step(), 1);
}

#[test]
fn tied_parameter_gradients_accumulate() {
    let mut store = ParamStore::new();
    let e = store.add("e", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let g = Graph::new();
    let a = g.param(&store, e);
    let b = g.param(&store, e);
    let loss = a.add(b).unwrap().sum();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.param(e).unwrap().data(), &[2.0; 4]);
}

proptest! {
    #[test]
    fn attention_rows_are_convex(seed in 0u64..1000, m in 1usize..6, n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_tensor(&mut rng, &[m, 3]);
        let k = random_tensor(&mut rng, &[n, 3]);
        let mut eye = vec![0.0; n * n];
        for i in 0..n { eye[i * n + i] = 1.0; }
        let v = Tensor::new(vec![n, n], eye).unwrap();
        let w = scaled_dot_attention(&q, &k, &v, None).unwrap();
        for r in 0..m {
            let s: f64 = w.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(w.row(r).iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn attention_is_permutation_equivariant(seed in 0u64..1000, n in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_tensor(&mut rng, &[3, 4]);
        let k = random_tensor(&mut rng, &[n, 4]);
        let v = random_tensor(&mut rng, &[n, 2]);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.rotate_left(1);
        perm.swap(0, n - 1);
        let pk: Vec<Vec<f64>> = perm.iter().map(|&i| k.row(i).to_vec()).collect();
        let pv: Vec<Vec<f64>> = perm.iter().map(|&i| v.row(i).to_vec()).collect();
        let a = scaled_dot_attention(&q, &k, &v, None).unwrap();
        let b = scaled_dot_attention(&q, &Tensor::from_rows(&pk).unwrap(), &Tensor::from_rows(&pv).unwrap(), None).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
