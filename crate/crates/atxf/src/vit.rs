//! Pre-norm Vision Transformer whose attention maps and Q/K/V activations
//! can be captured, and whose per-layer, per-head attention slots can be
//! overridden with externally supplied maps or activations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{AtxfError, Result};
use crate::tensor::{concat_tokens, matmul, Tensor};
use crate::tensor_ops::{attention_scale, layernorm, replace_heads};

pub const LAYERNORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub use_cls_token: bool,
}

impl Default for ViTConfig {
    /// Desk-scale default: a ViT-Tiny-like model for 32x32 inputs.
    fn default() -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 8,
            in_channels: 3,
            depth: 4,
            heads: 4,
            dim: 48,
            mlp_ratio: 2.0,
            num_classes: 10,
            use_cls_token: true,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size % self.patch_size != 0 {
            return Err(AtxfError::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(AtxfError::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.depth == 0 && false {
            // depth 0 is a legal degenerate model
        }
        if self.num_classes == 0 || self.dim == 0 || self.heads == 0 {
            return Err(AtxfError::Config("zero-sized model dimension".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + usize::from(self.use_cls_token)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.dim as f64).round() as usize
    }
}

#[derive(Clone)]
pub struct LayerParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wproj: Tensor,
    pub bproj: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

#[derive(Clone)]
pub struct ViTParams {
    pub cfg: ViTConfig,
    pub patch_proj: Tensor,
    pub patch_bias: Tensor,
    pub pos_embed: Tensor,
    pub cls_token: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_ln_gamma: Tensor,
    pub final_ln_beta: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

fn trunc_normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            // Box-Muller, resampled outside two sigma
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random::<f64>();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect()
}

impl ViTParams {
    /// Truncated-normal (sigma 0.02) projections and embeddings, zero biases,
    /// identity layernorm affines.
    pub fn init(cfg: &ViTConfig, seed: u64) -> Result<ViTParams> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let c = cfg.dim;
        let n = cfg.num_tokens();
        let leaf = |shape: Vec<usize>, data: Vec<f64>| Tensor::new(shape, data, true);
        let weight = |rng: &mut ChaCha8Rng, shape: Vec<usize>| {
            let count = shape.iter().product();
            Tensor::new(shape, trunc_normal(rng, count, std), true)
        };
        let zeros = |shape: Vec<usize>| {
            let count: usize = shape.iter().product();
            Tensor::new(shape, vec![0.0; count], true)
        };
        let ones = |shape: Vec<usize>| {
            let count: usize = shape.iter().product();
            Tensor::new(shape, vec![1.0; count], true)
        };
        let hidden = cfg.mlp_hidden();
        let layers = (0..cfg.depth)
            .map(|_| LayerParams {
                ln1_gamma: ones(vec![c]),
                ln1_beta: zeros(vec![c]),
                wq: weight(&mut rng, vec![c, c]),
                bq: zeros(vec![c]),
                wk: weight(&mut rng, vec![c, c]),
                bk: zeros(vec![c]),
                wv: weight(&mut rng, vec![c, c]),
                bv: zeros(vec![c]),
                wproj: weight(&mut rng, vec![c, c]),
                bproj: zeros(vec![c]),
                ln2_gamma: ones(vec![c]),
                ln2_beta: zeros(vec![c]),
                mlp_w1: weight(&mut rng, vec![c, hidden]),
                mlp_b1: zeros(vec![hidden]),
                mlp_w2: weight(&mut rng, vec![hidden, c]),
                mlp_b2: zeros(vec![c]),
            })
            .collect();
        Ok(ViTParams {
            cfg: cfg.clone(),
            patch_proj: weight(&mut rng, vec![cfg.patch_dim(), c]),
            patch_bias: zeros(vec![c]),
            pos_embed: weight(&mut rng, vec![n, c]),
            cls_token: leaf(vec![c], trunc_normal(&mut rng, c, std)),
            layers,
            final_ln_gamma: ones(vec![c]),
            final_ln_beta: zeros(vec![c]),
            head_w: weight(&mut rng, vec![c, cfg.num_classes]),
            head_b: zeros(vec![cfg.num_classes]),
        })
    }

    /// Stable (name, tensor) listing for optimizers and checkpoints.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("patch_proj".to_string(), self.patch_proj.clone()),
            ("patch_bias".to_string(), self.patch_bias.clone()),
            ("pos_embed".to_string(), self.pos_embed.clone()),
            ("cls_token".to_string(), self.cls_token.clone()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let fields: [(&str, &Tensor); 16] = [
                ("ln1_gamma", &l.ln1_gamma),
                ("ln1_beta", &l.ln1_beta),
                ("wq", &l.wq),
                ("bq", &l.bq),
                ("wk", &l.wk),
                ("bk", &l.bk),
                ("wv", &l.wv),
                ("bv", &l.bv),
                ("wproj", &l.wproj),
                ("bproj", &l.bproj),
                ("ln2_gamma", &l.ln2_gamma),
                ("ln2_beta", &l.ln2_beta),
                ("mlp_w1", &l.mlp_w1),
                ("mlp_b1", &l.mlp_b1),
                ("mlp_w2", &l.mlp_w2),
                ("mlp_b2", &l.mlp_b2),
            ];
            for (name, t) in fields {
                out.push((format!("layers.{i}.{name}"), t.clone()));
            }
        }
        out.push(("final_ln_gamma".to_string(), self.final_ln_gamma.clone()));
        out.push(("final_ln_beta".to_string(), self.final_ln_beta.clone()));
        out.push(("head_w".to_string(), self.head_w.clone()));
        out.push(("head_b".to_string(), self.head_b.clone()));
        out
    }

    /// Rebuild parameters from a named tensor table (checkpoint load).
    pub fn from_named(cfg: &ViTConfig, table: &[(String, Vec<usize>, Vec<f64>)]) -> Result<ViTParams> {
        let mut params = ViTParams::init(cfg, 0)?;
        let mut by_name: std::collections::HashMap<&str, (&Vec<usize>, &Vec<f64>)> =
            std::collections::HashMap::new();
        for (name, shape, data) in table {
            by_name.insert(name.as_str(), (shape, data));
        }
        for (name, t) in params.named() {
            let (shape, data) = by_name.remove(name.as_str()).ok_or_else(|| {
                AtxfError::Geometry(format!("checkpoint is missing tensor `{name}`"))
            })?;
            if shape.as_slice() != t.shape() {
                return Err(AtxfError::Geometry(format!(
                    "tensor `{name}` has shape {:?} in checkpoint but the config requires {:?}",
                    shape,
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(data);
        }
        if let Some(name) = by_name.keys().next() {
            return Err(AtxfError::Geometry(format!(
                "checkpoint contains unexpected tensor `{name}` for this config"
            )));
        }
        params.cfg = cfg.clone();
        Ok(params)
    }

    /// Frozen copy whose leaves take no gradients (teacher / eval use).
    pub fn frozen(&self) -> ViTParams {
        let table: Vec<(String, Vec<usize>, Vec<f64>)> = self
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec(), t.to_vec()))
            .collect();
        let mut p = ViTParams::from_named(&self.cfg, &table).expect("self-consistent params");
        // rebuild every leaf as a constant
        let freeze = |t: &Tensor| Tensor::constant(t.shape().to_vec(), t.to_vec());
        p.patch_proj = freeze(&p.patch_proj);
        p.patch_bias = freeze(&p.patch_bias);
        p.pos_embed = freeze(&p.pos_embed);
        p.cls_token = freeze(&p.cls_token);
        for l in p.layers.iter_mut() {
            l.ln1_gamma = freeze(&l.ln1_gamma);
            l.ln1_beta = freeze(&l.ln1_beta);
            l.wq = freeze(&l.wq);
            l.bq = freeze(&l.bq);
            l.wk = freeze(&l.wk);
            l.bk = freeze(&l.bk);
            l.wv = freeze(&l.wv);
            l.bv = freeze(&l.bv);
            l.wproj = freeze(&l.wproj);
            l.bproj = freeze(&l.bproj);
            l.ln2_gamma = freeze(&l.ln2_gamma);
            l.ln2_beta = freeze(&l.ln2_beta);
            l.mlp_w1 = freeze(&l.mlp_w1);
            l.mlp_b1 = freeze(&l.mlp_b1);
            l.mlp_w2 = freeze(&l.mlp_w2);
            l.mlp_b2 = freeze(&l.mlp_b2);
        }
        p.final_ln_gamma = freeze(&p.final_ln_gamma);
        p.final_ln_beta = freeze(&p.final_ln_beta);
        p.head_w = freeze(&p.head_w);
        p.head_b = freeze(&p.head_b);
        p
    }
}

/// Per-(layer, head) override slot. Map and Q/K override are mutually
/// exclusive on the same slot; Q/K/V compose freely.
#[derive(Clone, Default)]
pub struct SlotOverride {
    /// Injected attention map, `[B x N x N]` flat, used verbatim (no grad).
    pub map: Option<Vec<f64>>,
    /// Injected queries, `[B x N x head_dim]` flat.
    pub q: Option<Vec<f64>>,
    /// Injected keys.
    pub k: Option<Vec<f64>>,
    /// Injected values.
    pub v: Option<Vec<f64>>,
}

impl SlotOverride {
    pub fn is_none(&self) -> bool {
        self.map.is_none() && self.q.is_none() && self.k.is_none() && self.v.is_none()
    }

    fn validate(&self, b: usize, n: usize, head_dim: usize) -> Result<()> {
        if self.map.is_some() && (self.q.is_some() || self.k.is_some()) {
            return Err(AtxfError::Contract(
                "Map override excludes Q/K overrides on the same slot".into(),
            ));
        }
        if let Some(m) = &self.map {
            if m.len() != b * n * n {
                return Err(AtxfError::Geometry(format!(
                    "injected map has {} values, expected {}",
                    m.len(),
                    b * n * n
                )));
            }
            for (r, row) in m.chunks(n).enumerate() {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-9 || row.iter().any(|&v| v < 0.0) {
                    return Err(AtxfError::Contract(format!(
                        "injected map row {} is not a probability distribution (sum = {})",
                        r, s
                    )));
                }
            }
        }
        for (name, act) in [("Q", &self.q), ("K", &self.k), ("V", &self.v)] {
            if let Some(a) = act {
                if a.len() != b * n * head_dim {
                    return Err(AtxfError::Geometry(format!(
                        "injected {} has {} values, expected {}",
                        name,
                        a.len(),
                        b * n * head_dim
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Overrides for every attention slot of one model, `[L][H]`.
pub type AttentionOverrides = Vec<Vec<SlotOverride>>;

pub fn no_overrides(cfg: &ViTConfig) -> AttentionOverrides {
    vec![vec![SlotOverride::default(); cfg.heads]; cfg.depth]
}

/// Captured attention state for one batch: the maps actually used per
/// layer/head, plus optional Q/K/V activations.
#[derive(Clone)]
pub struct AttentionRecord {
    pub batch: usize,
    pub heads: usize,
    pub tokens: usize,
    pub head_dim: usize,
    /// Per layer, `[B x H x N x N]` flat.
    pub maps: Vec<Vec<f64>>,
    /// Per layer, `[B x H x N x head_dim]` flat.
    pub queries: Vec<Vec<f64>>,
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

impl AttentionRecord {
    pub fn layers(&self) -> usize {
        self.maps.len()
    }

    /// Flat slice of one head's maps as `[B x N x N]`.
    pub fn head_maps(&self, layer: usize, head: usize) -> Vec<f64> {
        let (b, h, n) = (self.batch, self.heads, self.tokens);
        let src = &self.maps[layer];
        let mut out = Vec::with_capacity(b * n * n);
        for bi in 0..b {
            let base = (bi * h + head) * n * n;
            out.extend_from_slice(&src[base..base + n * n]);
        }
        out
    }

    fn head_act(src: &[f64], b: usize, h: usize, n: usize, d: usize, head: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(b * n * d);
        for bi in 0..b {
            let base = (bi * h + head) * n * d;
            out.extend_from_slice(&src[base..base + n * d]);
        }
        out
    }

    pub fn head_queries(&self, layer: usize, head: usize) -> Vec<f64> {
        Self::head_act(
            &self.queries[layer],
            self.batch,
            self.heads,
            self.tokens,
            self.head_dim,
            head,
        )
    }

    pub fn head_keys(&self, layer: usize, head: usize) -> Vec<f64> {
        Self::head_act(
            &self.keys[layer],
            self.batch,
            self.heads,
            self.tokens,
            self.head_dim,
            head,
        )
    }

    pub fn head_values(&self, layer: usize, head: usize) -> Vec<f64> {
        Self::head_act(
            &self.values[layer],
            self.batch,
            self.heads,
            self.tokens,
            self.head_dim,
            head,
        )
    }
}

/// What `vit_forward` should keep besides the logits.
#[derive(Clone, Copy, Default)]
pub struct CaptureOptions {
    /// Capture the used attention maps and Q/K/V activations.
    pub attention: bool,
    /// Keep the live pre-softmax score tensors (for the distillation loss).
    pub scores: bool,
    /// Keep live per-layer residual-stream outputs (for feature distillation)
    /// and their detached copies (for CKA).
    pub features: bool,
}

pub struct ForwardArtifacts {
    pub logits: Tensor,
    pub record: Option<AttentionRecord>,
    /// Live `[B x H x N x N]` pre-softmax scores per layer (already scaled).
    pub scores: Vec<Tensor>,
    /// Live `[B x N x C]` residual-stream outputs per layer.
    pub features: Vec<Tensor>,
}

/// Patchify + embed: flatten non-overlapping patches, project to `dim`,
/// prepend the CLS token, add positional embeddings.
pub fn patchify(image: &Tensor, params: &ViTParams) -> Result<Tensor> {
    let cfg = &params.cfg;
    let sh = image.shape().to_vec();
    if sh.len() != 4 || sh[1] != cfg.in_channels || sh[2] != cfg.image_size || sh[3] != cfg.image_size
    {
        return Err(AtxfError::Shape {
            op: "patchify",
            left: sh,
            right: vec![0, cfg.in_channels, cfg.image_size, cfg.image_size],
        });
    }
    if sh[2] % cfg.patch_size != 0 || sh[3] % cfg.patch_size != 0 {
        return Err(AtxfError::Shape {
            op: "patchify",
            left: sh,
            right: vec![cfg.patch_size],
        });
    }
    let b = sh[0];
    let (ps, grid, ch) = (cfg.patch_size, cfg.grid(), cfg.in_channels);
    let np = cfg.num_patches();
    let pd = cfg.patch_dim();
    // pure rearrangement; the image carries no gradient
    let mut patches = vec![0.0; b * np * pd];
    {
        let img = image.data();
        let (hh, ww) = (sh[2], sh[3]);
        for bi in 0..b {
            for gy in 0..grid {
                for gx in 0..grid {
                    let p = gy * grid + gx;
                    let dst_base = (bi * np + p) * pd;
                    let mut off = 0;
                    for c in 0..ch {
                        for py in 0..ps {
                            for px in 0..ps {
                                let y = gy * ps + py;
                                let x = gx * ps + px;
                                patches[dst_base + off] = img[((bi * ch + c) * hh + y) * ww + x];
                                off += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    let patches = Tensor::constant(vec![b, np, pd], patches);
    let tokens = matmul(&patches, &params.patch_proj)?.add_broadcast(&params.patch_bias)?;
    let tokens = if cfg.use_cls_token {
        let cls = params
            .cls_token
            .expand_leading(b)
            .reshape(vec![b, 1, cfg.dim])?;
        concat_tokens(&cls, &tokens)?
    } else {
        tokens
    };
    tokens.add_broadcast(&params.pos_embed)
}

pub struct MsaOutput {
    pub output: Tensor,
    /// Maps actually used, detached, `[B x H x N x N]`.
    pub maps_used: Option<Vec<f64>>,
    pub queries: Option<Vec<f64>>,
    pub keys: Option<Vec<f64>>,
    pub values: Option<Vec<f64>>,
    /// Live scaled pre-softmax scores.
    pub scores: Option<Tensor>,
}

/// One multi-head self-attention block on post-layernorm input `x`
/// (`[B x N x C]`). Overridden Q/K/V are substituted before the map is
/// computed; an injected map is used verbatim and receives no gradient.
pub fn msa_forward(
    x: &Tensor,
    layer: &LayerParams,
    cfg: &ViTConfig,
    overrides: &[SlotOverride],
    capture: CaptureOptions,
) -> Result<MsaOutput> {
    let sh = x.shape().to_vec();
    if sh.len() != 3 || sh[2] != cfg.dim {
        return Err(AtxfError::Shape {
            op: "msa_forward",
            left: sh,
            right: vec![cfg.dim],
        });
    }
    let (b, n, c) = (sh[0], sh[1], sh[2]);
    let (h, d) = (cfg.heads, cfg.head_dim());
    if overrides.len() != h {
        return Err(AtxfError::Config(format!(
            "expected {} head override slots, got {}",
            h,
            overrides.len()
        )));
    }
    for s in overrides {
        s.validate(b, n, d)?;
    }
    let to_heads = |t: &Tensor| -> Result<Tensor> {
        t.reshape(vec![b, n, h, d])?.permute(&[0, 2, 1, 3])
    };
    let q = to_heads(&matmul(x, &layer.wq)?.add_broadcast(&layer.bq)?)?;
    let k = to_heads(&matmul(x, &layer.wk)?.add_broadcast(&layer.bk)?)?;
    let v = to_heads(&matmul(x, &layer.wv)?.add_broadcast(&layer.bv)?)?;
    let gather = |slot: fn(&SlotOverride) -> &Option<Vec<f64>>| -> Vec<Option<Vec<f64>>> {
        overrides.iter().map(|s| slot(s).clone()).collect()
    };
    let q = replace_heads(&q, &gather(|s| &s.q))?;
    let k = replace_heads(&k, &gather(|s| &s.k))?;
    let v = replace_heads(&v, &gather(|s| &s.v))?;
    let scores = matmul(&q, &k.transpose_last2()?)?.scale(attention_scale(d));
    let attn = scores.softmax(3)?;
    let attn_used = replace_heads(&attn, &gather(|s| &s.map))?;
    let ctx = matmul(&attn_used, &v)?
        .permute(&[0, 2, 1, 3])?
        .reshape(vec![b, n, c])?;
    let output = matmul(&ctx, &layer.wproj)?.add_broadcast(&layer.bproj)?;
    Ok(MsaOutput {
        output,
        maps_used: capture.attention.then(|| attn_used.to_vec()),
        queries: capture.attention.then(|| q.to_vec()),
        keys: capture.attention.then(|| k.to_vec()),
        values: capture.attention.then(|| v.to_vec()),
        scores: capture.scores.then_some(scores),
    })
}

/// Full pre-norm ViT forward pass.
pub fn vit_forward(
    image: &Tensor,
    params: &ViTParams,
    overrides: &AttentionOverrides,
    capture: CaptureOptions,
) -> Result<ForwardArtifacts> {
    let cfg = &params.cfg;
    if overrides.len() != cfg.depth {
        return Err(AtxfError::Config(format!(
            "expected overrides for {} layers, got {}",
            cfg.depth,
            overrides.len()
        )));
    }
    let b = image.shape()[0];
    let n = cfg.num_tokens();
    let mut x = patchify(image, params)?;
    let mut record = capture.attention.then(|| AttentionRecord {
        batch: b,
        heads: cfg.heads,
        tokens: n,
        head_dim: cfg.head_dim(),
        maps: Vec::with_capacity(cfg.depth),
        queries: Vec::with_capacity(cfg.depth),
        keys: Vec::with_capacity(cfg.depth),
        values: Vec::with_capacity(cfg.depth),
    });
    let mut scores = Vec::new();
    let mut features = Vec::new();
    for (li, layer) in params.layers.iter().enumerate() {
        let normed = layernorm(&x, &layer.ln1_gamma, &layer.ln1_beta, LAYERNORM_EPS)?;
        let msa = msa_forward(&normed, layer, cfg, &overrides[li], capture)?;
        x = x.add(&msa.output)?;
        let normed2 = layernorm(&x, &layer.ln2_gamma, &layer.ln2_beta, LAYERNORM_EPS)?;
        let hidden = matmul(&normed2, &layer.mlp_w1)?
            .add_broadcast(&layer.mlp_b1)?
            .gelu();
        let mlp_out = matmul(&hidden, &layer.mlp_w2)?.add_broadcast(&layer.mlp_b2)?;
        x = x.add(&mlp_out)?;
        if let Some(rec) = record.as_mut() {
            rec.maps.push(msa.maps_used.unwrap());
            rec.queries.push(msa.queries.unwrap());
            rec.keys.push(msa.keys.unwrap());
            rec.values.push(msa.values.unwrap());
        }
        if capture.scores {
            scores.push(msa.scores.unwrap());
        }
        if capture.features {
            features.push(x.clone());
        }
    }
    let x = layernorm(&x, &params.final_ln_gamma, &params.final_ln_beta, LAYERNORM_EPS)?;
    let pooled = if cfg.use_cls_token {
        x.select_token(0)?
    } else {
        // mean pool over tokens
        let mut sum = x.select_token(0)?;
        for t in 1..n {
            sum = sum.add(&x.select_token(t)?)?;
        }
        sum.scale(1.0 / n as f64)
    };
    let logits = matmul(&pooled, &params.head_w)?.add_broadcast(&params.head_b)?;
    Ok(ForwardArtifacts {
        logits,
        record,
        scores,
        features,
    })
}
