//! Jensen-Shannon divergence and attention-head matching between two
//! models' attention records.

use super::hungarian::min_cost_assignment;
use crate::error::{AtxfError, Result};
use crate::vit::AttentionRecord;

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 || p.iter().any(|&v| v < 0.0) {
        return Err(AtxfError::Contract(format!(
            "{name} is not a probability distribution (sum = {s})"
        )));
    }
    Ok(())
}

/// Jensen-Shannon divergence, natural log: symmetric, in `[0, ln 2]`.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(AtxfError::Shape {
            op: "jsd",
            left: vec![p.len()],
            right: vec![q.len()],
        });
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let m = 0.5 * (pi + qi);
        if pi > 0.0 {
            total += 0.5 * pi * (pi / m).ln();
        }
        if qi > 0.0 {
            total += 0.5 * qi * (qi / m).ln();
        }
    }
    // clamp tiny negative round-off
    Ok(total.max(0.0))
}

/// Head-matching strategy between two models' attention maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchStrategy {
    /// Pair head i with head i.
    Direct,
    /// One-to-one pairing minimizing cumulative JSD (exact assignment).
    Bipartite,
    /// Each A-head paired with its minimum-JSD B-head (many-to-one).
    Minimum,
    /// Single JSD between the head-averaged maps.
    Averaged,
}

impl MatchStrategy {
    pub fn parse(s: &str) -> Result<MatchStrategy> {
        match s {
            "direct" => Ok(MatchStrategy::Direct),
            "bipartite" => Ok(MatchStrategy::Bipartite),
            "minimum" => Ok(MatchStrategy::Minimum),
            "averaged" => Ok(MatchStrategy::Averaged),
            other => Err(AtxfError::Config(format!(
                "unknown match strategy `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerMatch {
    pub layer: usize,
    /// `(head_a, head_b, jsd)` per pair; a single entry for Averaged.
    pub pairs: Vec<(usize, usize, f64)>,
    pub total_jsd: f64,
    pub mean_jsd: f64,
}

#[derive(Debug, Clone)]
pub struct HeadMatchReport {
    pub strategy: MatchStrategy,
    pub layers: Vec<LayerMatch>,
}

/// Mean over batch and query rows of the row-wise JSD between two heads'
/// maps (`[B x N x N]` flat).
fn head_jsd(a: &[f64], b: &[f64], n: usize) -> Result<f64> {
    let rows = a.len() / n;
    let mut total = 0.0;
    for r in 0..rows {
        total += jsd(&a[r * n..(r + 1) * n], &b[r * n..(r + 1) * n])?;
    }
    Ok(total / rows as f64)
}

/// Match the heads of one layer between two records.
pub fn match_heads(
    rec_a: &AttentionRecord,
    rec_b: &AttentionRecord,
    layer: usize,
    strategy: MatchStrategy,
) -> Result<LayerMatch> {
    if rec_a.heads != rec_b.heads || rec_a.tokens != rec_b.tokens || rec_a.batch != rec_b.batch {
        return Err(AtxfError::Geometry(format!(
            "records differ: A(H={} N={} B={}) vs B(H={} N={} B={})",
            rec_a.heads, rec_a.tokens, rec_a.batch, rec_b.heads, rec_b.tokens, rec_b.batch
        )));
    }
    let h = rec_a.heads;
    let n = rec_a.tokens;
    let maps_a: Vec<Vec<f64>> = (0..h).map(|hd| rec_a.head_maps(layer, hd)).collect();
    let maps_b: Vec<Vec<f64>> = (0..h).map(|hd| rec_b.head_maps(layer, hd)).collect();
    let pairs = match strategy {
        MatchStrategy::Direct => (0..h)
            .map(|hd| Ok((hd, hd, head_jsd(&maps_a[hd], &maps_b[hd], n)?)))
            .collect::<Result<Vec<_>>>()?,
        MatchStrategy::Bipartite | MatchStrategy::Minimum => {
            let mut cost = vec![0.0; h * h];
            for i in 0..h {
                for j in 0..h {
                    cost[i * h + j] = head_jsd(&maps_a[i], &maps_b[j], n)?;
                }
            }
            if strategy == MatchStrategy::Bipartite {
                let (assign, _) = min_cost_assignment(&cost, h);
                (0..h).map(|i| (i, assign[i], cost[i * h + assign[i]])).collect()
            } else {
                (0..h)
                    .map(|i| {
                        let (j, &c) = cost[i * h..(i + 1) * h]
                            .iter()
                            .enumerate()
                            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                            .unwrap();
                        (i, j, c)
                    })
                    .collect()
            }
        }
        MatchStrategy::Averaged => {
            let avg = |maps: &[Vec<f64>]| -> Vec<f64> {
                let len = maps[0].len();
                let mut out = vec![0.0; len];
                for m in maps {
                    for i in 0..len {
                        out[i] += m[i];
                    }
                }
                for v in out.iter_mut() {
                    *v /= maps.len() as f64;
                }
                out
            };
            vec![(0, 0, head_jsd(&avg(&maps_a), &avg(&maps_b), n)?)]
        }
    };
    let total: f64 = pairs.iter().map(|p| p.2).sum();
    let mean = total / pairs.len() as f64;
    Ok(LayerMatch {
        layer,
        pairs,
        total_jsd: total,
        mean_jsd: mean,
    })
}
