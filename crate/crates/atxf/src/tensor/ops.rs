//! Forward and backward rules for every op the ViT needs.
//!
//! Broadcasting is deliberately limited: bias/positional adds broadcast a
//! suffix shape over leading dims, matmul broadcasts a 2-D right operand
//! over batch dims. Everything else requires exact shapes.

use super::{numel_of, row_major_strides, Tensor};
use crate::error::{AtxfError, Result};

/// `1 / sqrt(head_dim)` scaling applied to QK^T scores.
pub fn attention_scale(head_dim: usize) -> f64 {
    1.0 / (head_dim as f64).sqrt()
}

/// C[m x n] += A[m x k] * B[k x n]
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// C[k x n] += A[m x k]^T * B[m x n]
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// Matrix product with optional batching. Accepts `[.. x m x k] * [.. x k x n]`
/// with identical batch dims, or a 2-D right operand broadcast over the
/// left operand's batch dims (the projection case).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ash = a.shape().to_vec();
    let bsh = b.shape().to_vec();
    if ash.len() < 2 || bsh.len() < 2 {
        return Err(AtxfError::Shape {
            op: "matmul",
            left: ash,
            right: bsh,
        });
    }
    let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
    let a_batch = &ash[..ash.len() - 2];
    let b_batch = &bsh[..bsh.len() - 2];
    let broadcast_b = b_batch.is_empty() && !a_batch.is_empty();
    if k != k2 || (!broadcast_b && a_batch != b_batch) {
        return Err(AtxfError::Shape {
            op: "matmul",
            left: ash,
            right: bsh,
        });
    }
    let batches = numel_of(a_batch);
    let mut out_shape = a_batch.to_vec();
    out_shape.push(m);
    out_shape.push(n);
    let mut out = vec![0.0; batches * m * n];
    {
        let ad = a.data();
        let bd = b.data();
        for bi in 0..batches {
            let am = &ad[bi * m * k..(bi + 1) * m * k];
            let bm = if broadcast_b {
                &bd[..]
            } else {
                &bd[bi * k * n..(bi + 1) * k * n]
            };
            gemm_nn(am, bm, &mut out[bi * m * n..(bi + 1) * m * n], m, k, n);
        }
    }
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        out_shape,
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |out_t| {
            let g = out_t.grad_mut();
            let ad = ac.data();
            let bd = bc.data();
            if ac.requires_grad() {
                // dA = dC * B^T, per batch
                let mut da = ac.grad_mut();
                for bi in 0..batches {
                    let gm = &g[bi * m * n..(bi + 1) * m * n];
                    let bm = if broadcast_b {
                        &bd[..]
                    } else {
                        &bd[bi * k * n..(bi + 1) * k * n]
                    };
                    // note: gemm with B interpreted as [n x k] transposed is
                    // dA[i,p] += sum_j g[i,j] * B[p,j]
                    let da_m = &mut da[bi * m * k..(bi + 1) * m * k];
                    for i in 0..m {
                        let grow = &gm[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bm[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            da_m[i * k + p] += acc;
                        }
                    }
                }
            }
            if bc.requires_grad() {
                // dB = A^T * dC, accumulated over batches when broadcast
                let mut db = bc.grad_mut();
                for bi in 0..batches {
                    let am = &ad[bi * m * k..(bi + 1) * m * k];
                    let gm = &g[bi * m * n..(bi + 1) * m * n];
                    let db_m = if broadcast_b {
                        &mut db[..]
                    } else {
                        &mut db[bi * k * n..(bi + 1) * k * n]
                    };
                    gemm_tn(am, gm, db_m, m, k, n);
                }
            }
        }),
    ))
}

/// Concatenate along the token axis of two `[B x N x C]` tensors.
pub fn concat_tokens(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
    if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[2] {
        return Err(AtxfError::Shape {
            op: "concat_tokens",
            left: ash,
            right: bsh,
        });
    }
    let (bsz, na, nb, c) = (ash[0], ash[1], bsh[1], ash[2]);
    let n = na + nb;
    let mut out = vec![0.0; bsz * n * c];
    {
        let ad = a.data();
        let bd = b.data();
        for bi in 0..bsz {
            out[bi * n * c..bi * n * c + na * c].copy_from_slice(&ad[bi * na * c..(bi + 1) * na * c]);
            out[bi * n * c + na * c..(bi + 1) * n * c]
                .copy_from_slice(&bd[bi * nb * c..(bi + 1) * nb * c]);
        }
    }
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        vec![bsz, n, c],
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |out_t| {
            let g = out_t.grad_mut();
            if ac.requires_grad() {
                let mut da = ac.grad_mut();
                for bi in 0..bsz {
                    for (d, s) in da[bi * na * c..(bi + 1) * na * c]
                        .iter_mut()
                        .zip(&g[bi * n * c..bi * n * c + na * c])
                    {
                        *d += s;
                    }
                }
            }
            if bc.requires_grad() {
                let mut db = bc.grad_mut();
                for bi in 0..bsz {
                    for (d, s) in db[bi * nb * c..(bi + 1) * nb * c]
                        .iter_mut()
                        .zip(&g[bi * n * c + na * c..(bi + 1) * n * c])
                    {
                        *d += s;
                    }
                }
            }
        }),
    ))
}

impl Tensor {
    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(AtxfError::Shape {
                op: "add",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let out: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(x, y)| x + y)
            .collect();
        let (ac, bc) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |out_t| {
                let g = out_t.grad_mut();
                ac.accum_grad(&g);
                bc.accum_grad(&g);
            }),
        ))
    }

    /// Add with the right operand's shape a suffix of the left's
    /// (bias add, positional-embedding add).
    pub fn add_broadcast(&self, other: &Tensor) -> Result<Tensor> {
        let suffix = other.shape();
        let full = self.shape();
        if suffix.len() > full.len() || &full[full.len() - suffix.len()..] != suffix {
            return Err(AtxfError::Shape {
                op: "add_broadcast",
                left: full.to_vec(),
                right: suffix.to_vec(),
            });
        }
        let bn = other.numel();
        let out: Vec<f64> = {
            let od = other.data();
            self.data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + od[i % bn])
                .collect()
        };
        let (ac, bc) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            full.to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |out_t| {
                let g = out_t.grad_mut();
                ac.accum_grad(&g);
                if bc.requires_grad() {
                    let mut db = bc.grad_mut();
                    for (i, gi) in g.iter().enumerate() {
                        db[i % bn] += gi;
                    }
                }
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.add(&other.scale(-1.0))
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(AtxfError::Shape {
                op: "mul",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let out: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(x, y)| x * y)
            .collect();
        let (ac, bc) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |out_t| {
                let g = out_t.grad_mut();
                if ac.requires_grad() {
                    let bd = bc.data();
                    let mut da = ac.grad_mut();
                    for i in 0..g.len() {
                        da[i] += g[i] * bd[i];
                    }
                }
                if bc.requires_grad() {
                    let ad = ac.data();
                    let mut db = bc.grad_mut();
                    for i in 0..g.len() {
                        db[i] += g[i] * ad[i];
                    }
                }
            }),
        ))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|x| x * s).collect();
        let ac = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |out_t| {
                let g = out_t.grad_mut();
                if ac.requires_grad() {
                    let mut da = ac.grad_mut();
                    for i in 0..g.len() {
                        da[i] += g[i] * s;
                    }
                }
            }),
        )
    }

    pub fn reshape(&self, new_shape: Vec<usize>) -> Result<Tensor> {
        if numel_of(&new_shape) != self.numel() {
            return Err(AtxfError::Shape {
                op: "reshape",
                left: self.shape().to_vec(),
                right: new_shape,
            });
        }
        let ac = self.clone();
        Ok(Tensor::from_op(
            new_shape,
            self.to_vec(),
            vec![self.clone()],
            Box::new(move |out_t| {
                let g = out_t.grad_mut();
                ac.accum_grad(&g);
            }),
        ))
    }

    /// Reorder axes; `axes` is a permutation of `0..ndim`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        let nd = shape.len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true))
        {
            return Err(AtxfError::Contract(format!(
                "permute axes {:?} invalid for rank {}",
                axes, nd
            )));
        }
        let new_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let out = permute_copy(&self.data(), &shape, axes);
        let inverse: Vec<usize> = {
            let mut inv = vec![0; nd];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            inv
        };
        let ac = self.clone();
        let out_shape = new_shape.clone();
        Ok(Tensor::from_op(
            new_shape,
            out,
            vec![self.clone()],
            Box::new(move |out_t| {
                let g = out_t.grad_mut();
                if ac.requires_grad() {
                    let back = permute_copy(&g, &out_shape, &inverse);
                    ac.accum_grad(&back);
                }
            }),
        ))
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let nd = self.shape().len();
        if nd < 2 {
            return Err(AtxfError::Contract("transpose_last2 needs rank >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(&axes)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(AtxfError::Contract(format!(
                "softmax axis {} out of range for shape {:?}",
                axis, shape
            )));
        }
        let mut out = self.to_vec();
        for_each_lane(&shape, axis, |lane| {
            softmax_lane(&mut out, lane);
        });
        let ac = self.clone();
        let out_copy = out.clone();
        let shape_c = shape.clone();
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |out_t| {
                let g = out_t.grad_mut();
                if ac.requires_grad() {
                    let mut da = ac.grad_mut();
                    // dx = y * (g - sum(g * y)) per lane
                    for_each_lane(&shape_c, axis, |lane| {
                        let mut dot = 0.0;
                        for &i in lane.iter() {
                            dot += g[i] * out_copy[i];
                        }
                        for &i in lane.iter() {
                            da[i] += out_copy[i] * (g[i] - dot);
                        }
                    });
                }
            }),
        ))
    }

    /// GELU activation (tanh approximation).
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        let out: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| {
                let inner = C * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + inner.tanh())
            })
            .collect();
        let ac = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |out_t| {
                let g = out_t.grad_mut();
                if ac.requires_grad() {
                    let ad = ac.data();
                    let mut da = ac.grad_mut();
                    for i in 0..g.len() {
                        let x = ad[i];
                        let inner = C * (x + 0.044715 * x * x * x);
                        let t = inner.tanh();
                        let sech2 = 1.0 - t * t;
                        let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
                        da[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner);
                    }
                }
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let ac = self.clone();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |out_t| {
                let g = out_t.grad_mut()[0];
                if ac.requires_grad() {
                    let mut da = ac.grad_mut();
                    for d in da.iter_mut() {
                        *d += g;
                    }
                }
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Select one token: `[B x N x C] -> [B x C]`.
    pub fn select_token(&self, idx: usize) -> Result<Tensor> {
        let sh = self.shape().to_vec();
        if sh.len() != 3 || idx >= sh[1] {
            return Err(AtxfError::Contract(format!(
                "select_token({}) invalid for shape {:?}",
                idx, sh
            )));
        }
        let (b, n, c) = (sh[0], sh[1], sh[2]);
        let mut out = vec![0.0; b * c];
        {
            let d = self.data();
            for bi in 0..b {
                out[bi * c..(bi + 1) * c]
                    .copy_from_slice(&d[bi * n * c + idx * c..bi * n * c + (idx + 1) * c]);
            }
        }
        let ac = self.clone();
        Ok(Tensor::from_op(
            vec![b, c],
            out,
            vec![self.clone()],
            Box::new(move |out_t| {
                let g = out_t.grad_mut();
                if ac.requires_grad() {
                    let mut da = ac.grad_mut();
                    for bi in 0..b {
                        for (dst, src) in da[bi * n * c + idx * c..bi * n * c + (idx + 1) * c]
                            .iter_mut()
                            .zip(&g[bi * c..(bi + 1) * c])
                        {
                            *dst += src;
                        }
                    }
                }
            }),
        ))
    }

    /// Tile a tensor `n` times along a new leading axis.
    pub fn expand_leading(&self, n: usize) -> Tensor {
        let inner = self.numel();
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape());
        let mut out = Vec::with_capacity(n * inner);
        {
            let d = self.data();
            for _ in 0..n {
                out.extend_from_slice(&d);
            }
        }
        let ac = self.clone();
        Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |out_t| {
                let g = out_t.grad_mut();
                if ac.requires_grad() {
                    let mut da = ac.grad_mut();
                    for chunk in g.chunks(inner) {
                        for (d, s) in da.iter_mut().zip(chunk) {
                            *d += s;
                        }
                    }
                }
            }),
        )
    }
}

fn softmax_lane(data: &mut [f64], lane: &[usize]) {
    let mut mx = f64::NEG_INFINITY;
    for &i in lane {
        mx = mx.max(data[i]);
    }
    let mut sum = 0.0;
    for &i in lane {
        let e = (data[i] - mx).exp();
        data[i] = e;
        sum += e;
    }
    for &i in lane {
        data[i] /= sum;
    }
}

/// Visit every 1-D lane along `axis`, passing the flat indices of the lane.
fn for_each_lane<F: FnMut(&[usize])>(shape: &[usize], axis: usize, mut f: F) {
    let strides = row_major_strides(shape);
    let axis_len = shape[axis];
    let axis_stride = strides[axis];
    let total = numel_of(shape);
    let lanes = total / axis_len;
    let mut lane = vec![0usize; axis_len];
    // enumerate lane bases by iterating all indices with axis fixed at 0
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..lanes {
        let base: usize = idx
            .iter()
            .zip(&strides)
            .enumerate()
            .map(|(d, (&i, &s))| if d == axis { 0 } else { i * s })
            .sum();
        for (j, slot) in lane.iter_mut().enumerate() {
            *slot = base + j * axis_stride;
        }
        f(&lane);
        // odometer increment skipping `axis`
        for d in (0..shape.len()).rev() {
            if d == axis {
                continue;
            }
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn permute_copy(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let new_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let old_strides = row_major_strides(shape);
    let new_strides: Vec<usize> = axes.iter().map(|&a| old_strides[a]).collect();
    let total = numel_of(shape);
    let mut out = vec![0.0; total];
    let mut idx = vec![0usize; nd];
    for slot in out.iter_mut() {
        let src: usize = idx.iter().zip(&new_strides).map(|(&i, &s)| i * s).sum();
        *slot = data[src];
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < new_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Per-token layer normalization over the channel dim, with affine.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let sh = x.shape().to_vec();
    let c = *sh.last().ok_or_else(|| AtxfError::Contract("layernorm on rank-0".into()))?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(AtxfError::Shape {
            op: "layernorm",
            left: sh,
            right: gamma.shape().to_vec(),
        });
    }
    let tokens = x.numel() / c;
    let mut out = vec![0.0; x.numel()];
    let mut xhat = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; tokens];
    {
        let xd = x.data();
        let gd = gamma.data();
        let bd = beta.data();
        for t in 0..tokens {
            let row = &xd[t * c..(t + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[t] = istd;
            for j in 0..c {
                let h = (row[j] - mean) * istd;
                xhat[t * c + j] = h;
                out[t * c + j] = gd[j] * h + bd[j];
            }
        }
    }
    let (xc, gc, bc) = (x.clone(), gamma.clone(), beta.clone());
    Ok(Tensor::from_op(
        sh,
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |out_t| {
            let g = out_t.grad_mut();
            let gd = gc.data();
            if gc.requires_grad() {
                let mut dg = gc.grad_mut();
                for t in 0..tokens {
                    for j in 0..c {
                        dg[j] += g[t * c + j] * xhat[t * c + j];
                    }
                }
            }
            if bc.requires_grad() {
                let mut db = bc.grad_mut();
                for t in 0..tokens {
                    for j in 0..c {
                        db[j] += g[t * c + j];
                    }
                }
            }
            if xc.requires_grad() {
                let mut dx = xc.grad_mut();
                for t in 0..tokens {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..c {
                        let dh = g[t * c + j] * gd[j];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[t * c + j];
                    }
                    let inv_c = 1.0 / c as f64;
                    for j in 0..c {
                        let dh = g[t * c + j] * gd[j];
                        dx[t * c + j] += inv_std[t]
                            * (dh - inv_c * sum_dh - xhat[t * c + j] * inv_c * sum_dh_h);
                    }
                }
            }
        }),
    ))
}

/// Mean over the batch of the cross entropy between soft targets and
/// `softmax(logits)`. Gradient w.r.t. logits is `(softmax - target) / B`.
pub fn cross_entropy_soft(logits: &Tensor, target_probs: &Tensor) -> Result<Tensor> {
    let sh = logits.shape().to_vec();
    if sh.len() != 2 || target_probs.shape() != sh.as_slice() {
        return Err(AtxfError::Shape {
            op: "cross_entropy_soft",
            left: sh,
            right: target_probs.shape().to_vec(),
        });
    }
    let (b, k) = (sh[0], sh[1]);
    {
        let td = target_probs.data();
        for bi in 0..b {
            let row = &td[bi * k..(bi + 1) * k];
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
                return Err(AtxfError::Contract(format!(
                    "target row {} is not a probability distribution (sum = {})",
                    bi, s
                )));
            }
        }
    }
    let mut probs = vec![0.0; b * k];
    let mut loss = 0.0;
    {
        let ld = logits.data();
        let td = target_probs.data();
        for bi in 0..b {
            let row = &ld[bi * k..(bi + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..k {
                let e = (row[j] - mx).exp();
                probs[bi * k + j] = e;
                z += e;
            }
            let logz = z.ln();
            for j in 0..k {
                probs[bi * k + j] /= z;
                // log softmax = x - mx - logz
                loss -= td[bi * k + j] * (row[j] - mx - logz);
            }
        }
    }
    loss /= b as f64;
    let (lc, tc) = (logits.clone(), target_probs.clone());
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        vec![logits.clone(), target_probs.clone()],
        Box::new(move |out_t| {
            let g = out_t.grad_mut()[0];
            if lc.requires_grad() {
                let td = tc.data();
                let mut dl = lc.grad_mut();
                let inv_b = 1.0 / b as f64;
                for i in 0..b * k {
                    dl[i] += g * (probs[i] - td[i]) * inv_b;
                }
            }
        }),
    ))
}

/// Numerically stable row-wise softmax on plain data (inference paths that
/// never need gradients).
pub fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    out
}

/// Mean squared error over all elements.
pub fn mse_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(AtxfError::Shape {
            op: "mse_loss",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let n = a.numel() as f64;
    let mut loss = 0.0;
    {
        let ad = a.data();
        let bd = b.data();
        for i in 0..a.numel() {
            let d = ad[i] - bd[i];
            loss += d * d;
        }
    }
    loss /= n;
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        vec![a.clone(), b.clone()],
        Box::new(move |out_t| {
            let g = out_t.grad_mut()[0];
            let ad = ac.data();
            let bd = bc.data();
            let scale = 2.0 * g / n;
            if ac.requires_grad() {
                let mut da = ac.grad_mut();
                for i in 0..ad.len() {
                    da[i] += scale * (ad[i] - bd[i]);
                }
            }
            if bc.requires_grad() {
                let mut db = bc.grad_mut();
                for i in 0..ad.len() {
                    db[i] -= scale * (ad[i] - bd[i]);
                }
            }
        }),
    ))
}

/// Cross entropy from soft target rows onto `softmax` of score rows, for the
/// selected heads of a `[B x H x N x N]` score tensor. The result sums over
/// the selected heads and averages over batch and query rows; the target is
/// a constant. Gradient per selected row is `(softmax(s) - t) / (B * N)`.
pub fn attention_ce(scores: &Tensor, target: &[f64], heads: &[usize]) -> Result<Tensor> {
    let sh = scores.shape().to_vec();
    if sh.len() != 4 || sh[2] != sh[3] {
        return Err(AtxfError::Contract(format!(
            "attention_ce expects [B x H x N x N] scores, got {:?}",
            sh
        )));
    }
    if target.len() != scores.numel() {
        return Err(AtxfError::Shape {
            op: "attention_ce",
            left: sh,
            right: vec![target.len()],
        });
    }
    let (b, h, n) = (sh[0], sh[1], sh[2]);
    if heads.iter().any(|&hd| hd >= h) {
        return Err(AtxfError::Config(format!(
            "attention_ce head index out of range (H = {})",
            h
        )));
    }
    let mut probs = vec![0.0; scores.numel()];
    let mut loss = 0.0;
    {
        let sd = scores.data();
        for bi in 0..b {
            for &hd in heads {
                for qi in 0..n {
                    let base = ((bi * h + hd) * n + qi) * n;
                    let row = &sd[base..base + n];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for j in 0..n {
                        let e = (row[j] - mx).exp();
                        probs[base + j] = e;
                        z += e;
                    }
                    let logz = z.ln();
                    for j in 0..n {
                        probs[base + j] /= z;
                        loss -= target[base + j] * (row[j] - mx - logz);
                    }
                }
            }
        }
    }
    let norm = (b * n) as f64;
    loss /= norm;
    let sc = scores.clone();
    let heads_c = heads.to_vec();
    let target_c = target.to_vec();
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        vec![scores.clone()],
        Box::new(move |out_t| {
            let g = out_t.grad_mut()[0];
            if sc.requires_grad() {
                let mut ds = sc.grad_mut();
                let scale = g / norm;
                for bi in 0..b {
                    for &hd in &heads_c {
                        let base = (bi * h + hd) * n * n;
                        for i in 0..n * n {
                            ds[base + i] += scale * (probs[base + i] - target_c[base + i]);
                        }
                    }
                }
            }
        }),
    ))
}

/// Replace whole head slices of a `[B x H x ...]` tensor with constant data.
/// `replacements[h]`, when present, holds `[B x rest]` values laid out so the
/// slice for batch `b` starts at `b * rest`. Replaced heads receive no
/// gradient; untouched heads pass gradients through unchanged.
pub fn replace_heads(x: &Tensor, replacements: &[Option<Vec<f64>>]) -> Result<Tensor> {
    let sh = x.shape().to_vec();
    if sh.len() < 3 {
        return Err(AtxfError::Contract(format!(
            "replace_heads expects [B x H x ...], got {:?}",
            sh
        )));
    }
    let (b, h) = (sh[0], sh[1]);
    if replacements.len() != h {
        return Err(AtxfError::Config(format!(
            "replace_heads got {} slots for H = {}",
            replacements.len(),
            h
        )));
    }
    let rest: usize = sh[2..].iter().product();
    for (hd, r) in replacements.iter().enumerate() {
        if let Some(r) = r {
            if r.len() != b * rest {
                return Err(AtxfError::Geometry(format!(
                    "override for head {} has {} values, expected {}",
                    hd,
                    r.len(),
                    b * rest
                )));
            }
        }
    }
    let mut out = x.to_vec();
    for bi in 0..b {
        for (hd, r) in replacements.iter().enumerate() {
            if let Some(r) = r {
                let dst = (bi * h + hd) * rest;
                out[dst..dst + rest].copy_from_slice(&r[bi * rest..(bi + 1) * rest]);
            }
        }
    }
    let xc = x.clone();
    let replaced: Vec<bool> = replacements.iter().map(|r| r.is_some()).collect();
    Ok(Tensor::from_op(
        sh,
        out,
        vec![x.clone()],
        Box::new(move |out_t| {
            let g = out_t.grad_mut();
            if xc.requires_grad() {
                let mut dx = xc.grad_mut();
                for bi in 0..b {
                    for (hd, &is_replaced) in replaced.iter().enumerate() {
                        if is_replaced {
                            continue;
                        }
                        let base = (bi * h + hd) * rest;
                        for i in 0..rest {
                            dx[base + i] += g[base + i];
                        }
                    }
                }
            }
        }),
    ))
}
