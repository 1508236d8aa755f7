//! Linear Centered Kernel Alignment between two feature matrices.

use crate::error::{AtxfError, Result};

fn center_columns(x: &[f64], b: usize, d: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for j in 0..d {
        let mean: f64 = (0..b).map(|i| x[i * d + j]).sum::<f64>() / b as f64;
        for i in 0..b {
            out[i * d + j] -= mean;
        }
    }
    out
}

/// Frobenius norm squared of `Y^T X` for column-centered inputs.
fn cross_norm_sq(x: &[f64], y: &[f64], b: usize, dx: usize, dy: usize) -> f64 {
    // (Y^T X)[p, q] = sum_i Y[i, p] X[i, q]
    let mut total = 0.0;
    for p in 0..dy {
        for q in 0..dx {
            let mut acc = 0.0;
            for i in 0..b {
                acc += y[i * dy + p] * x[i * dx + q];
            }
            total += acc * acc;
        }
    }
    total
}

/// Linear CKA: `||Yc^T Xc||_F^2 / (||Xc^T Xc||_F * ||Yc^T Yc||_F)`.
/// Zero-variance input (all rows identical) is an error, not 0.
pub fn linear_cka(x: &[f64], y: &[f64], b: usize, dx: usize, dy: usize) -> Result<f64> {
    if b < 2 || x.len() != b * dx || y.len() != b * dy {
        return Err(AtxfError::Contract(format!(
            "linear_cka needs B >= 2 matching matrices, got B={} |x|={} |y|={}",
            b,
            x.len(),
            y.len()
        )));
    }
    let xc = center_columns(x, b, dx);
    let yc = center_columns(y, b, dy);
    let xx = cross_norm_sq(&xc, &xc, b, dx, dx).sqrt();
    let yy = cross_norm_sq(&yc, &yc, b, dy, dy).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Err(AtxfError::Contract(
            "linear_cka undefined for zero-variance features".into(),
        ));
    }
    Ok(cross_norm_sq(&xc, &yc, b, dx, dy) / (xx * yy))
}

/// Debiased linear CKA via the unbiased HSIC estimator on Gram matrices.
pub fn linear_cka_debiased(x: &[f64], y: &[f64], b: usize, dx: usize, dy: usize) -> Result<f64> {
    if b < 4 || x.len() != b * dx || y.len() != b * dy {
        return Err(AtxfError::Contract(format!(
            "debiased CKA needs B >= 4 matching matrices, got B={}",
            b
        )));
    }
    let gram = |f: &[f64], d: usize| -> Vec<f64> {
        let mut g = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += f[i * d + c] * f[j * d + c];
                }
                g[i * b + j] = acc;
            }
        }
        g
    };
    let hsic_u = |k: &[f64], l: &[f64]| -> f64 {
        // unbiased HSIC with zeroed diagonals
        let mut kk = k.to_vec();
        let mut ll = l.to_vec();
        for i in 0..b {
            kk[i * b + i] = 0.0;
            ll[i * b + i] = 0.0;
        }
        let n = b as f64;
        let tr: f64 = (0..b * b).map(|i| kk[i] * ll[i]).sum();
        let sk: f64 = kk.iter().sum();
        let sl: f64 = ll.iter().sum();
        let mut cross = 0.0;
        for i in 0..b {
            let krow: f64 = kk[i * b..(i + 1) * b].iter().sum();
            let lrow: f64 = ll[i * b..(i + 1) * b].iter().sum();
            cross += krow * lrow;
        }
        (tr + sk * sl / ((n - 1.0) * (n - 2.0)) - 2.0 * cross / (n - 2.0))
            / (n * (n - 3.0))
    };
    let k = gram(x, dx);
    let l = gram(y, dy);
    let xy = hsic_u(&k, &l);
    let xx = hsic_u(&k, &k);
    let yy = hsic_u(&l, &l);
    if xx <= 0.0 || yy <= 0.0 {
        return Err(AtxfError::Contract(
            "debiased CKA undefined for degenerate features".into(),
        ));
    }
    Ok(xy / (xx * yy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let u1: f64 = rng.random::<f64>().max(1e-12);
                let u2: f64 = rng.random::<f64>();
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect()
    }

    #[test]
    fn self_similarity_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let x = randn(&mut rng, 32 * 8);
        let c = linear_cka(&x, &x, 32, 8, 8).unwrap();
        assert!((c - 1.0).abs() < 1e-9);
    }

    #[test]
    fn invariant_to_orthogonal_transform_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let (b, d) = (16, 4);
        let x = randn(&mut rng, b * d);
        // random rotation via Gram-Schmidt on a random matrix
        let raw = randn(&mut rng, d * d);
        let mut q = vec![0.0; d * d];
        for col in 0..d {
            let mut v: Vec<f64> = (0..d).map(|r| raw[r * d + col]).collect();
            for prev in 0..col {
                let dot: f64 = (0..d).map(|r| v[r] * q[r * d + prev]).sum();
                for r in 0..d {
                    v[r] -= dot * q[r * d + prev];
                }
            }
            let norm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            for r in 0..d {
                q[r * d + col] = v[r] / norm;
            }
        }
        let c_scale = 2.7;
        let mut xr = vec![0.0; b * d];
        for i in 0..b {
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += x[i * d + k] * q[k * d + j];
                }
                xr[i * d + j] = c_scale * acc;
            }
        }
        let c = linear_cka(&x, &xr, b, d, d).unwrap();
        assert!((c - 1.0).abs() < 1e-9);
        // symmetry
        let y = randn(&mut rng, b * d);
        let ab = linear_cka(&x, &y, b, d, d).unwrap();
        let ba = linear_cka(&y, &x, b, d, d).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn independent_gaussians_score_low() {
        // Monte-Carlo over 10 seeds, generous bound
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (b, d) = (256, 32);
            let x = randn(&mut rng, b * d);
            let y = randn(&mut rng, b * d);
            let c = linear_cka(&x, &y, b, d, d).unwrap();
            assert!(c < 0.2, "seed {seed}: CKA = {c}");
        }
    }

    #[test]
    fn zero_variance_is_an_error() {
        let x = vec![1.0; 8 * 2];
        let y = vec![0.5; 8 * 2];
        assert!(linear_cka(&x, &y, 8, 2, 2).is_err());
    }

    #[test]
    fn debiased_close_to_plain_for_large_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let (b, d) = (128, 8);
        let x = randn(&mut rng, b * d);
        // y correlated with x
        let y: Vec<f64> = x
            .iter()
            .zip(randn(&mut rng, b * d))
            .map(|(&xv, nv)| xv + 0.3 * nv)
            .collect();
        let plain = linear_cka(&x, &y, b, d, d).unwrap();
        let debiased = linear_cka_debiased(&x, &y, b, d, d).unwrap();
        assert!((plain - debiased).abs() < 0.05);
    }
}
