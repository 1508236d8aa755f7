use super::ops::{cross_entropy_soft, layernorm, mse_loss};
use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central finite differences on leaf tensors, step 1e-5.
/// `f` rebuilds the loss graph from the current leaf data.
pub fn finite_diff_grads(params: &[Tensor], f: &dyn Fn() -> Tensor) -> Vec<Vec<f64>> {
    let h = 1e-5;
    params
        .iter()
        .map(|p| {
            let n = p.numel();
            let mut grad = vec![0.0; n];
            for i in 0..n {
                let orig = p.data()[i];
                p.data_mut()[i] = orig + h;
                let plus = f().item();
                p.data_mut()[i] = orig - h;
                let minus = f().item();
                p.data_mut()[i] = orig;
                grad[i] = (plus - minus) / (2.0 * h);
            }
            grad
        })
        .collect()
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
}

#[test]
fn matmul_identity() {
    let i2 = Tensor::constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    let m = Tensor::constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let out = matmul(&i2, &m).unwrap();
    assert_eq!(*out.data(), vec![1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_hand_product() {
    let a = Tensor::constant(vec![1, 2], vec![1.0, 2.0]);
    let b = Tensor::constant(vec![2, 1], vec![3.0, 4.0]);
    let out = matmul(&a, &b).unwrap();
    assert_eq!(out.shape(), &[1, 1]);
    assert_eq!(out.data()[0], 11.0);
}

#[test]
fn matmul_shape_error_reports_both_shapes() {
    let a = Tensor::constant(vec![2, 3], vec![0.0; 6]);
    let b = Tensor::constant(vec![2, 2], vec![0.0; 4]);
    let err = matmul(&a, &b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = Tensor::new(vec![3, 4], randn(&mut rng, 12), true);
    let b = Tensor::new(vec![4, 2], randn(&mut rng, 8), true);
    let loss = |a: &Tensor, b: &Tensor| {
        let c = matmul(a, b).unwrap();
        // weight the entries so the gradient is not uniform
        let w = Tensor::constant(vec![3, 2], (1..=6).map(|v| v as f64).collect());
        c.mul(&w).unwrap().sum_all()
    };
    let l = loss(&a, &b);
    backward(&l, false).unwrap();
    let fd = finite_diff_grads(&[a.clone(), b.clone()], &|| loss(&a, &b));
    assert!(max_rel_err(&a.grad().unwrap(), &fd[0]) < 1e-6);
    assert!(max_rel_err(&b.grad().unwrap(), &fd[1]) < 1e-6);
}

#[test]
fn batched_matmul_matches_per_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = Tensor::new(vec![2, 3, 4], randn(&mut rng, 24), true);
    let b = Tensor::new(vec![2, 4, 2], randn(&mut rng, 16), true);
    let c = matmul(&a, &b).unwrap();
    for bi in 0..2 {
        let am = Tensor::constant(vec![3, 4], a.data()[bi * 12..(bi + 1) * 12].to_vec());
        let bm = Tensor::constant(vec![4, 2], b.data()[bi * 8..(bi + 1) * 8].to_vec());
        let cm = matmul(&am, &bm).unwrap();
        for (x, y) in c.data()[bi * 6..(bi + 1) * 6].iter().zip(cm.data().iter()) {
            assert!((x - y).abs() < 1e-15);
        }
    }
    let l = c.sum_all();
    backward(&l, false).unwrap();
    let fd = finite_diff_grads(&[a.clone(), b.clone()], &|| {
        matmul(&a, &b).unwrap().sum_all()
    });
    assert!(max_rel_err(&a.grad().unwrap(), &fd[0]) < 1e-6);
    assert!(max_rel_err(&b.grad().unwrap(), &fd[1]) < 1e-6);
}

#[test]
fn softmax_symmetry() {
    let x = Tensor::constant(vec![3], vec![0.0, 0.0, 0.0]);
    let y = x.softmax(0).unwrap();
    for v in y.data().iter() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_no_overflow_on_large_inputs() {
    let x = Tensor::constant(vec![2], vec![700.0, 800.0]);
    let y = x.softmax(0).unwrap();
    assert!(y.data()[0] < 1e-40);
    assert!((y.data()[1] - 1.0).abs() < 1e-12);
}

#[test]
fn softmax_matches_direct_evaluation() {
    let x = Tensor::constant(vec![3], vec![1.0, 2.0, 3.0]);
    let y = x.softmax(0).unwrap();
    // independent route: plain exp/sum without max subtraction
    let exps: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
    let z: f64 = exps.iter().sum();
    for (a, e) in y.data().iter().zip(&exps) {
        assert!((a - e / z).abs() < 1e-12);
    }
}

#[test]
fn softmax_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::new(vec![2, 4], randn(&mut rng, 8), true);
    let w = Tensor::constant(vec![2, 4], randn(&mut rng, 8));
    let loss = |x: &Tensor| x.softmax(1).unwrap().mul(&w).unwrap().sum_all();
    let l = loss(&x);
    backward(&l, false).unwrap();
    let fd = finite_diff_grads(&[x.clone()], &|| loss(&x));
    assert!(max_rel_err(&x.grad().unwrap(), &fd[0]) < 1e-6);
}

#[test]
fn softmax_mid_axis() {
    let x = Tensor::constant(vec![2, 3, 2], (0..12).map(|v| v as f64 * 0.3).collect());
    let y = x.softmax(1).unwrap();
    let d = y.data();
    for b in 0..2 {
        for c in 0..2 {
            let s: f64 = (0..3).map(|n| d[b * 6 + n * 2 + c]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn layernorm_constant_token_collapses_to_beta() {
    let x = Tensor::constant(vec![1, 4], vec![5.0; 4]);
    let g = Tensor::constant(vec![4], vec![1.0; 4]);
    let b = Tensor::constant(vec![4], vec![0.0; 4]);
    let y = layernorm(&x, &g, &b, 1e-6).unwrap();
    for v in y.data().iter() {
        assert!(v.abs() < 1e-9);
    }
}

#[test]
fn layernorm_centers_output() {
    let x = Tensor::constant(vec![1, 3], vec![1.0, 2.0, 3.0]);
    let g = Tensor::constant(vec![3], vec![1.0; 3]);
    let b = Tensor::constant(vec![3], vec![0.0; 3]);
    let y = layernorm(&x, &g, &b, 1e-6).unwrap();
    let mean: f64 = y.data().iter().sum::<f64>() / 3.0;
    assert!(mean.abs() < 1e-12);
}

#[test]
fn layernorm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = Tensor::new(vec![2, 4], randn(&mut rng, 8), true);
    let g = Tensor::new(vec![4], randn(&mut rng, 4), true);
    let b = Tensor::new(vec![4], randn(&mut rng, 4), true);
    let w = Tensor::constant(vec![2, 4], randn(&mut rng, 8));
    let loss =
        |x: &Tensor, g: &Tensor, b: &Tensor| layernorm(x, g, b, 1e-6).unwrap().mul(&w).unwrap().sum_all();
    let l = loss(&x, &g, &b);
    backward(&l, false).unwrap();
    let fd = finite_diff_grads(&[x.clone(), g.clone(), b.clone()], &|| loss(&x, &g, &b));
    assert!(max_rel_err(&x.grad().unwrap(), &fd[0]) < 1e-6);
    assert!(max_rel_err(&g.grad().unwrap(), &fd[1]) < 1e-6);
    assert!(max_rel_err(&b.grad().unwrap(), &fd[2]) < 1e-6);
}

#[test]
fn cross_entropy_minimum_at_matching_distribution() {
    // softmax(logits) == target exactly when logits = ln(target) + const
    let t = vec![0.1, 0.2, 0.3, 0.4];
    let logits: Vec<f64> = t.iter().map(|v: &f64| v.ln() + 2.0).collect();
    let lt = Tensor::new(vec![1, 4], logits, true);
    let tt = Tensor::constant(vec![1, 4], t.clone());
    let loss = cross_entropy_soft(&lt, &tt).unwrap();
    let entropy: f64 = -t.iter().map(|v| v * v.ln()).sum::<f64>();
    assert!((loss.item() - entropy).abs() < 1e-12);
    backward(&loss, false).unwrap();
    for g in lt.grad().unwrap() {
        assert!(g.abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_uniform_logits_onehot_target() {
    let k = 10;
    let logits = Tensor::new(vec![1, k], vec![0.5; k], true);
    let mut t = vec![0.0; k];
    t[3] = 1.0;
    let target = Tensor::constant(vec![1, k], t);
    let loss = cross_entropy_soft(&logits, &target).unwrap();
    assert!((loss.item() - (k as f64).ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_rejects_non_distribution_target() {
    let logits = Tensor::constant(vec![1, 3], vec![0.0; 3]);
    let target = Tensor::constant(vec![1, 3], vec![0.5, 0.5, 0.5]);
    assert!(cross_entropy_soft(&logits, &target).is_err());
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits_v = randn(&mut rng, 10);
    let mut target_v = vec![0.0; 10];
    for bi in 0..2 {
        let raw: Vec<f64> = (0..5).map(|_| rng.random::<f64>() + 0.1).collect();
        let s: f64 = raw.iter().sum();
        for j in 0..5 {
            target_v[bi * 5 + j] = raw[j] / s;
        }
    }
    let logits = Tensor::new(vec![2, 5], logits_v.clone(), true);
    let target = Tensor::constant(vec![2, 5], target_v.clone());
    let loss = cross_entropy_soft(&logits, &target).unwrap();
    // direct route
    let mut expected = 0.0;
    for bi in 0..2 {
        let row = &logits_v[bi * 5..(bi + 1) * 5];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for j in 0..5 {
            expected -= target_v[bi * 5 + j] * (row[j].exp() / z).ln();
        }
    }
    expected /= 2.0;
    assert!((loss.item() - expected).abs() < 1e-10);
    // analytic gradient (p - t) / B
    backward(&loss, false).unwrap();
    let g = logits.grad().unwrap();
    for bi in 0..2 {
        let row = &logits_v[bi * 5..(bi + 1) * 5];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for j in 0..5 {
            let p = row[j].exp() / z;
            assert!((g[bi * 5 + j] - (p - target_v[bi * 5 + j]) / 2.0).abs() < 1e-10);
        }
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let w = Tensor::new(vec![3], vec![0.3, -1.2, 4.0], true);
    let l = w.sum_all();
    backward(&l, false).unwrap();
    assert_eq!(w.grad().unwrap(), vec![1.0; 3]);
}

#[test]
fn backward_of_sum_of_squares_is_two_w() {
    let w = Tensor::new(vec![3], vec![0.3, -1.2, 4.0], true);
    let l = w.mul(&w).unwrap().sum_all();
    backward(&l, false).unwrap();
    for (g, v) in w.grad().unwrap().iter().zip(w.data().iter()) {
        assert!((g - 2.0 * v).abs() < 1e-15);
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let w = Tensor::new(vec![2], vec![1.0, 2.0], true);
    let y = w.scale(2.0);
    assert!(backward(&y, false).is_err());
}

#[test]
fn backward_accumulate_flag() {
    let w = Tensor::new(vec![2], vec![1.0, 2.0], true);
    let l1 = w.sum_all();
    backward(&l1, false).unwrap();
    let l2 = w.sum_all();
    backward(&l2, true).unwrap();
    assert_eq!(w.grad().unwrap(), vec![2.0; 2]);
    let l3 = w.sum_all();
    backward(&l3, false).unwrap();
    assert_eq!(w.grad().unwrap(), vec![1.0; 2]);
}

#[test]
fn diamond_graph_accumulates_both_paths() {
    let w = Tensor::new(vec![2], vec![1.0, 3.0], true);
    let a = w.scale(2.0);
    let b = w.scale(3.0);
    let l = a.add(&b).unwrap().sum_all();
    backward(&l, false).unwrap();
    assert_eq!(w.grad().unwrap(), vec![5.0; 2]);
}

#[test]
fn gelu_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Tensor::new(vec![6], randn(&mut rng, 6), true);
    let l = x.gelu().sum_all();
    backward(&l, false).unwrap();
    let fd = finite_diff_grads(&[x.clone()], &|| x.gelu().sum_all());
    assert!(max_rel_err(&x.grad().unwrap(), &fd[0]) < 1e-6);
}

#[test]
fn permute_roundtrip_and_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = Tensor::new(vec![2, 3, 4], randn(&mut rng, 24), true);
    let y = x.permute(&[2, 0, 1]).unwrap();
    assert_eq!(y.shape(), &[4, 2, 3]);
    let back = y.permute(&[1, 2, 0]).unwrap();
    assert_eq!(*back.data(), *x.data());
    let w = Tensor::constant(vec![4, 2, 3], randn(&mut rng, 24));
    let loss = |x: &Tensor| x.permute(&[2, 0, 1]).unwrap().mul(&w).unwrap().sum_all();
    let l = loss(&x);
    backward(&l, false).unwrap();
    let fd = finite_diff_grads(&[x.clone()], &|| loss(&x));
    assert!(max_rel_err(&x.grad().unwrap(), &fd[0]) < 1e-6);
}

#[test]
fn mse_loss_grads() {
    let a = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0], true);
    let b = Tensor::constant(vec![4], vec![1.5, 2.0, 2.0, 4.0]);
    let l = mse_loss(&a, &b).unwrap();
    assert!((l.item() - (0.25 + 0.0 + 1.0 + 0.0) / 4.0).abs() < 1e-15);
    backward(&l, false).unwrap();
    let fd = finite_diff_grads(&[a.clone()], &|| mse_loss(&a, &b).unwrap());
    assert!(max_rel_err(&a.grad().unwrap(), &fd[0]) < 1e-6);
}

#[test]
fn constant_graph_builds_no_tape() {
    let a = Tensor::constant(vec![2, 2], vec![1.0; 4]);
    let b = Tensor::constant(vec![2, 2], vec![2.0; 4]);
    let c = matmul(&a, &b).unwrap();
    assert!(!c.requires_grad());
    assert!(c.node.parents.is_empty());
}

#[test]
fn determinism_same_seed_same_bits() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = Tensor::new(vec![4, 4], randn(&mut rng, 16), true);
        let b = Tensor::new(vec![4, 4], randn(&mut rng, 16), true);
        let l = matmul(&a, &b).unwrap().softmax(1).unwrap().sum_all();
        backward(&l, false).unwrap();
        (l.item(), a.grad().unwrap())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert!(l1.to_bits() == l2.to_bits());
    assert!(g1.iter().zip(&g2).all(|(x, y)| x.to_bits() == y.to_bits()));
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 2..24)) {
            let n = vals.len();
            let x = Tensor::constant(vec![1, n], vals);
            let y = x.softmax(1).unwrap();
            let s: f64 = y.data().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn softmax_shift_invariant(vals in proptest::collection::vec(-50.0f64..50.0, 2..16), c in -100.0f64..100.0) {
            let n = vals.len();
            let shifted: Vec<f64> = vals.iter().map(|v| v + c).collect();
            let a = Tensor::constant(vec![n], vals).softmax(0).unwrap();
            let b = Tensor::constant(vec![n], shifted).softmax(0).unwrap();
            for (x, y) in a.data().iter().zip(b.data().iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
