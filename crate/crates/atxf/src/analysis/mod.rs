//! Measurement toolkit: CKA representation similarity, JSD attention-head
//! matching, prediction ensembling, transferred-activation accounting, and
//! attention-overlay export.

mod cka;
mod hungarian;
mod jsd;
mod overlay;

pub use cka::{linear_cka, linear_cka_debiased};
pub use hungarian::min_cost_assignment;
pub use jsd::{jsd, match_heads, HeadMatchReport, LayerMatch, MatchStrategy};
pub use overlay::export_cls_attention;

use crate::error::{AtxfError, Result};
use crate::vit::ViTConfig;

/// Per-layer feature matrices `[B_eval x D]` from one model on one eval set.
pub struct FeatureStack {
    pub eval_id: String,
    pub layers: Vec<Vec<f64>>,
    pub batch: usize,
    pub dim: usize,
}

impl FeatureStack {
    /// Build from captured residual-stream outputs (`[B x N x C]` flat per
    /// layer). `cls_only` keeps the CLS-token feature; otherwise patch
    /// tokens are mean-pooled.
    pub fn from_features(
        per_layer: &[Vec<f64>],
        batch: usize,
        tokens: usize,
        dim: usize,
        cls_only: bool,
        eval_id: &str,
    ) -> FeatureStack {
        let layers = per_layer
            .iter()
            .map(|feats| {
                let mut out = vec![0.0; batch * dim];
                for b in 0..batch {
                    if cls_only {
                        out[b * dim..(b + 1) * dim]
                            .copy_from_slice(&feats[b * tokens * dim..b * tokens * dim + dim]);
                    } else {
                        for t in 1..tokens {
                            for c in 0..dim {
                                out[b * dim + c] += feats[(b * tokens + t) * dim + c];
                            }
                        }
                        let denom = (tokens - 1) as f64;
                        for c in 0..dim {
                            out[b * dim + c] /= denom;
                        }
                    }
                }
                out
            })
            .collect();
        FeatureStack {
            eval_id: eval_id.to_string(),
            layers,
            batch,
            dim,
        }
    }
}

/// Accuracy of the averaged softmax predictions. Ties break toward the
/// lowest class index.
pub fn ensemble_eval(pa: &[f64], pb: &[f64], classes: usize, labels: &[usize]) -> Result<f64> {
    if pa.len() != pb.len() || pa.len() != labels.len() * classes {
        return Err(AtxfError::Shape {
            op: "ensemble_eval",
            left: vec![pa.len()],
            right: vec![labels.len() * classes],
        });
    }
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row_a = &pa[i * classes..(i + 1) * classes];
        let row_b = &pb[i * classes..(i + 1) * classes];
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for j in 0..classes {
            let v = 0.5 * (row_a[j] + row_b[j]);
            if v > best_v {
                best_v = v;
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Plain accuracy of one softmax prediction matrix.
pub fn accuracy(probs: &[f64], classes: usize, labels: &[usize]) -> Result<f64> {
    ensemble_eval(probs, probs, classes, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccountingMethod {
    /// Count sizes of Q and K: `L * H * N * head_dim * 2`.
    QkSizes,
    /// Count size of the attention map: `L * H * N * N`.
    MapSize,
}

/// Number of activations transferred per example from raw geometry numbers,
/// exact integer arithmetic.
pub fn count_activations_raw(
    depth: usize,
    heads: usize,
    tokens: usize,
    head_dim: usize,
    method: AccountingMethod,
) -> u64 {
    let (l, h, n, d) = (depth as u64, heads as u64, tokens as u64, head_dim as u64);
    match method {
        AccountingMethod::QkSizes => l * h * n * d * 2,
        AccountingMethod::MapSize => l * h * n * n,
    }
}

/// Number of activations transferred per example for a model config.
pub fn count_transferred_activations(cfg: &ViTConfig, method: AccountingMethod) -> u64 {
    count_activations_raw(cfg.depth, cfg.heads, cfg.num_tokens(), cfg.head_dim(), method)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vit_l() -> ViTConfig {
        ViTConfig {
            image_size: 224,
            patch_size: 16,
            depth: 24,
            heads: 16,
            dim: 1024,
            num_classes: 1000,
            ..ViTConfig::default()
        }
    }

    #[test]
    fn accounting_vit_l() {
        let cfg = vit_l();
        assert_eq!(
            count_transferred_activations(&cfg, AccountingMethod::QkSizes),
            9_682_944
        );
        assert_eq!(
            count_transferred_activations(&cfg, AccountingMethod::MapSize),
            14_902_656
        );
        assert_eq!(24 * 16 * 197 * 197, 14_902_656u64);
    }

    #[test]
    fn accounting_hand_count() {
        let cfg = ViTConfig {
            image_size: 2,
            patch_size: 2,
            in_channels: 1,
            depth: 1,
            heads: 1,
            dim: 1,
            mlp_ratio: 1.0,
            num_classes: 2,
            use_cls_token: true,
        };
        assert_eq!(cfg.num_tokens(), 2);
        assert_eq!(
            count_transferred_activations(&cfg, AccountingMethod::QkSizes),
            4
        );
        assert_eq!(
            count_transferred_activations(&cfg, AccountingMethod::MapSize),
            4
        );
    }

    #[test]
    fn self_ensemble_equals_base_accuracy() {
        let probs = vec![0.7, 0.2, 0.1, 0.1, 0.6, 0.3, 0.3, 0.3, 0.4];
        let labels = vec![0, 1, 0];
        let base = accuracy(&probs, 3, &labels).unwrap();
        let ens = ensemble_eval(&probs, &probs, 3, &labels).unwrap();
        assert_eq!(base, ens);
        assert!((base - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ensemble_of_complementary_models_beats_both() {
        // two models each 50% accurate, wrong on disjoint examples, with a
        // confident correct peer; verified by enumeration
        let pa = vec![0.9, 0.1, 0.8, 0.2]; // right on 0, wrong on 1
        let pb = vec![0.4, 0.6, 0.1, 0.9]; // wrong on 0, right on 1
        let labels = vec![0, 1];
        let acc_a = accuracy(&pa, 2, &labels).unwrap();
        let ens = ensemble_eval(&pa, &pb, 2, &labels).unwrap();
        assert_eq!(acc_a, 0.5);
        assert_eq!(ens, 1.0);
    }

    #[test]
    fn ensemble_tie_breaks_to_lowest_class() {
        let pa = vec![0.5, 0.5];
        let pb = vec![0.5, 0.5];
        assert_eq!(ensemble_eval(&pa, &pb, 2, &[0]).unwrap(), 1.0);
        assert_eq!(ensemble_eval(&pa, &pb, 2, &[1]).unwrap(), 0.0);
    }
}
