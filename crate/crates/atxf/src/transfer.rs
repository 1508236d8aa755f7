//! Transfer mechanisms: attention copy, attention distillation, Q/K/V
//! activation transfer, partial transfer over layers and heads, aggregated
//! transfer, and the feature-distillation baseline.

use crate::error::{AtxfError, Result};
use crate::tensor::Tensor;
use crate::tensor_ops::{attention_ce, mse_loss};
use crate::vit::{
    no_overrides, vit_forward, AttentionOverrides, AttentionRecord, CaptureOptions,
    ForwardArtifacts, ViTConfig, ViTParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferMode {
    None,
    Copy,
    Distill,
    FeatureDistill,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferTarget {
    AttnMap,
    Query,
    Key,
    Value,
    /// Q and K jointly; equivalent to transferring the map itself.
    QueryKey,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSelector {
    All,
    FirstK(usize),
    LastK(usize),
    Explicit(Vec<usize>),
}

impl LayerSelector {
    pub fn resolve(&self, depth: usize) -> Result<Vec<usize>> {
        let sel = match self {
            LayerSelector::All => (0..depth).collect(),
            LayerSelector::FirstK(k) => (0..*k.min(&depth)).collect(),
            LayerSelector::LastK(k) => (depth.saturating_sub(*k)..depth).collect(),
            LayerSelector::Explicit(list) => {
                if let Some(&bad) = list.iter().find(|&&l| l >= depth) {
                    return Err(AtxfError::Config(format!(
                        "layer {} out of range for depth {}",
                        bad, depth
                    )));
                }
                let mut v = list.clone();
                v.sort_unstable();
                v.dedup();
                v
            }
        };
        Ok(sel)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregateAxis {
    None,
    Examples,
    Layers,
    Heads,
    QueryTokens,
}

/// Complete description of one transfer experiment.
#[derive(Debug, Clone)]
pub struct TransferSpec {
    pub mode: TransferMode,
    pub target: TransferTarget,
    pub layers: LayerSelector,
    /// Transfer the first k heads of each selected layer.
    pub heads_per_layer: Option<usize>,
    pub aggregate_axis: AggregateAxis,
    /// Distillation loss weight lambda.
    pub distill_weight: f64,
    pub teacher_checkpoint: Option<std::path::PathBuf>,
}

impl Default for TransferSpec {
    fn default() -> Self {
        TransferSpec {
            mode: TransferMode::None,
            target: TransferTarget::AttnMap,
            layers: LayerSelector::All,
            heads_per_layer: None,
            aggregate_axis: AggregateAxis::None,
            distill_weight: 1.0,
            teacher_checkpoint: None,
        }
    }
}

impl TransferSpec {
    /// Default distilled layer subset: first `floor(0.75 * L)` layers.
    pub fn default_distill_layers(depth: usize) -> LayerSelector {
        LayerSelector::FirstK((0.75 * depth as f64).floor() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.distill_weight < 0.0 {
            return Err(AtxfError::Config("distill weight must be >= 0".into()));
        }
        if self.mode == TransferMode::Distill
            && !matches!(self.target, TransferTarget::AttnMap | TransferTarget::Query)
        {
            return Err(AtxfError::Config(
                "distillation targets must be attn_map or Q".into(),
            ));
        }
        if self.aggregate_axis != AggregateAxis::None
            && !(self.mode == TransferMode::Copy && self.target == TransferTarget::AttnMap)
        {
            return Err(AtxfError::Config(
                "aggregation requires mode=copy with target=attn_map".into(),
            ));
        }
        Ok(())
    }

    pub fn selected_heads(&self, total: usize) -> Vec<usize> {
        match self.heads_per_layer {
            Some(k) => (0..k.min(total)).collect(),
            None => (0..total).collect(),
        }
    }
}

/// Frozen teacher: parameters never receive gradients, forwarded in
/// inference mode.
pub struct TeacherContext {
    pub params: ViTParams,
}

impl TeacherContext {
    pub fn new(params: &ViTParams) -> TeacherContext {
        TeacherContext {
            params: params.frozen(),
        }
    }

    pub fn cfg(&self) -> &ViTConfig {
        &self.params.cfg
    }

    /// Forward a batch and capture the attention record.
    pub fn record(&self, images: &Tensor) -> Result<AttentionRecord> {
        let out = vit_forward(
            images,
            &self.params,
            &no_overrides(&self.params.cfg),
            CaptureOptions {
                attention: true,
                ..Default::default()
            },
        )?;
        Ok(out.record.unwrap())
    }
}

fn check_geometry(student: &ViTConfig, rec: &AttentionRecord) -> Result<()> {
    if rec.layers() != student.depth
        || rec.heads != student.heads
        || rec.tokens != student.num_tokens()
        || rec.head_dim != student.head_dim()
    {
        return Err(AtxfError::Config(format!(
            "teacher/student geometry mismatch: teacher L={} H={} N={} d={}, student L={} H={} N={} d={}",
            rec.layers(),
            rec.heads,
            rec.tokens,
            rec.head_dim,
            student.depth,
            student.heads,
            student.num_tokens(),
            student.head_dim()
        )));
    }
    Ok(())
}

/// Turn a teacher record into per-slot overrides according to the spec.
pub fn build_overrides(
    spec: &TransferSpec,
    teacher_rec: &AttentionRecord,
    student_cfg: &ViTConfig,
) -> Result<AttentionOverrides> {
    spec.validate()?;
    check_geometry(student_cfg, teacher_rec)?;
    let mut overrides = no_overrides(student_cfg);
    let layers = spec.layers.resolve(student_cfg.depth)?;
    let heads = spec.selected_heads(student_cfg.heads);
    for &l in &layers {
        for &h in &heads {
            let slot = &mut overrides[l][h];
            match spec.target {
                TransferTarget::AttnMap => slot.map = Some(teacher_rec.head_maps(l, h)),
                TransferTarget::Query => slot.q = Some(teacher_rec.head_queries(l, h)),
                TransferTarget::Key => slot.k = Some(teacher_rec.head_keys(l, h)),
                TransferTarget::Value => slot.v = Some(teacher_rec.head_values(l, h)),
                TransferTarget::QueryKey => {
                    slot.q = Some(teacher_rec.head_queries(l, h));
                    slot.k = Some(teacher_rec.head_keys(l, h));
                }
            }
        }
    }
    Ok(overrides)
}

/// Attention distillation loss: summed over selected slots, averaged over
/// batch and query rows, of the cross entropy from the teacher map (soft
/// target, no gradient) onto the student's softmaxed scores.
pub fn attention_distill_loss(
    student_scores: &[Tensor],
    teacher_rec: &AttentionRecord,
    spec: &TransferSpec,
    student_cfg: &ViTConfig,
) -> Result<Tensor> {
    if student_scores.len() != student_cfg.depth {
        return Err(AtxfError::Config(format!(
            "expected scores for {} layers, got {}",
            student_cfg.depth,
            student_scores.len()
        )));
    }
    check_geometry(student_cfg, teacher_rec)?;
    let layers = spec.layers.resolve(student_cfg.depth)?;
    let heads = spec.selected_heads(student_cfg.heads);
    let mut total: Option<Tensor> = None;
    for &l in &layers {
        let term = attention_ce(&student_scores[l], &teacher_rec.maps[l], &heads)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    total.ok_or_else(|| AtxfError::Config("no layers selected for distillation".into()))
}

/// Overall loss `task + lambda * dist`.
pub fn combined_loss(task_loss: &Tensor, dist_loss: &Tensor, lambda: f64) -> Result<Tensor> {
    if lambda < 0.0 {
        return Err(AtxfError::Config("lambda must be >= 0".into()));
    }
    task_loss.add(&dist_loss.scale(lambda))
}

/// Auxiliary MSE on per-layer residual-stream outputs, summed over the
/// selected layers.
pub fn feature_distill_loss(
    student_feats: &[Tensor],
    teacher_feats: &[Tensor],
    spec: &TransferSpec,
) -> Result<Tensor> {
    if student_feats.len() != teacher_feats.len() {
        return Err(AtxfError::Geometry(format!(
            "feature stacks differ in depth: {} vs {}",
            student_feats.len(),
            teacher_feats.len()
        )));
    }
    let layers = spec.layers.resolve(student_feats.len())?;
    let mut total: Option<Tensor> = None;
    for &l in &layers {
        let term = mse_loss(&student_feats[l], &teacher_feats[l])?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    total.ok_or_else(|| AtxfError::Config("no layers selected for feature distillation".into()))
}

/// Mean of the attention maps over one axis, broadcast back to full shape.
/// The examples-axis mean is over the record's batch; callers wanting an
/// input-independent transfer compute the record once on a fixed reference
/// set and reuse the result.
pub fn aggregate_maps(rec: &AttentionRecord, axis: AggregateAxis) -> Result<AttentionRecord> {
    let (b, h, n) = (rec.batch, rec.heads, rec.tokens);
    let l = rec.layers();
    let mut out = rec.clone();
    match axis {
        AggregateAxis::None => {}
        AggregateAxis::Examples => {
            for maps in out.maps.iter_mut() {
                let mut mean = vec![0.0; h * n * n];
                for bi in 0..b {
                    for i in 0..h * n * n {
                        mean[i] += maps[bi * h * n * n + i];
                    }
                }
                for v in mean.iter_mut() {
                    *v /= b as f64;
                }
                for bi in 0..b {
                    maps[bi * h * n * n..(bi + 1) * h * n * n].copy_from_slice(&mean);
                }
            }
        }
        AggregateAxis::Layers => {
            let per = b * h * n * n;
            let mut mean = vec![0.0; per];
            for maps in &rec.maps {
                for i in 0..per {
                    mean[i] += maps[i];
                }
            }
            for v in mean.iter_mut() {
                *v /= l as f64;
            }
            for maps in out.maps.iter_mut() {
                maps.copy_from_slice(&mean);
            }
        }
        AggregateAxis::Heads => {
            for maps in out.maps.iter_mut() {
                for bi in 0..b {
                    let mut mean = vec![0.0; n * n];
                    for hd in 0..h {
                        let base = (bi * h + hd) * n * n;
                        for i in 0..n * n {
                            mean[i] += maps[base + i];
                        }
                    }
                    for v in mean.iter_mut() {
                        *v /= h as f64;
                    }
                    for hd in 0..h {
                        let base = (bi * h + hd) * n * n;
                        maps[base..base + n * n].copy_from_slice(&mean);
                    }
                }
            }
        }
        AggregateAxis::QueryTokens => {
            for maps in out.maps.iter_mut() {
                for slot in 0..b * h {
                    let base = slot * n * n;
                    let mut mean_row = vec![0.0; n];
                    for qi in 0..n {
                        for ki in 0..n {
                            mean_row[ki] += maps[base + qi * n + ki];
                        }
                    }
                    for v in mean_row.iter_mut() {
                        *v /= n as f64;
                    }
                    for qi in 0..n {
                        maps[base + qi * n..base + (qi + 1) * n].copy_from_slice(&mean_row);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Attention-copy forward: teacher forward (no grad), overrides built from
/// its record, student forward with the overrides in place.
pub fn copy_forward(
    student: &ViTParams,
    teacher: &TeacherContext,
    images: &Tensor,
    spec: &TransferSpec,
    precomputed_rec: Option<&AttentionRecord>,
    capture: CaptureOptions,
) -> Result<(ForwardArtifacts, AttentionRecord)> {
    if spec.mode != TransferMode::Copy {
        return Err(AtxfError::Config("copy_forward requires mode=copy".into()));
    }
    let teacher_rec = match precomputed_rec {
        Some(rec) => rec.clone(),
        None => {
            let rec = teacher.record(images)?;
            if spec.aggregate_axis != AggregateAxis::None {
                aggregate_maps(&rec, spec.aggregate_axis)?
            } else {
                rec
            }
        }
    };
    let overrides = build_overrides(spec, &teacher_rec, &student.cfg)?;
    let out = vit_forward(images, student, &overrides, capture)?;
    Ok((out, teacher_rec))
}
