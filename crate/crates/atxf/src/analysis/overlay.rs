//! Attention overlay export: head-averaged CLS-to-patch attention rows as
//! PGM heatmaps plus PPM blends over the input image.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{AtxfError, Result};
use crate::vit::AttentionRecord;

/// Head-averaged CLS->patch row for one (batch item, layer), min-max
/// normalized to `[0, 1]`. Flat attention rows of a constant map normalize
/// to all-zero.
pub fn cls_attention_grid(rec: &AttentionRecord, item: usize, layer: usize) -> Vec<f64> {
    let (h, n) = (rec.heads, rec.tokens);
    let patches = n - 1;
    let maps = &rec.maps[layer];
    let mut row = vec![0.0; patches];
    for head in 0..h {
        let base = (item * h + head) * n * n; // CLS is query row 0
        for p in 0..patches {
            row[p] += maps[base + 1 + p];
        }
    }
    for v in row.iter_mut() {
        *v /= h as f64;
    }
    let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        for v in row.iter_mut() {
            *v = (*v - lo) / (hi - lo);
        }
    } else {
        row.iter_mut().for_each(|v| *v = 0.0);
    }
    row
}

/// Nearest-neighbour upsample of a `g x g` grid to `s x s`.
fn upsample(grid: &[f64], g: usize, s: usize) -> Vec<f64> {
    let mut out = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            out[y * s + x] = grid[(y * g / s) * g + (x * g / s)];
        }
    }
    out
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_pgm(path: &Path, pixels: &[u8], w: usize, h: usize) -> Result<()> {
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    fs::write(path, buf)?;
    Ok(())
}

fn write_ppm(path: &Path, pixels: &[u8], w: usize, h: usize) -> Result<()> {
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    fs::write(path, buf)?;
    Ok(())
}

/// Export per-layer attention heatmaps for the first batch item.
///
/// For each requested layer this writes `attn_layer{L}.pgm` (the upsampled
/// heatmap) and `attn_layer{L}_overlay.ppm` (50/50 blend with the image,
/// heatmap in the red channel). `image` is `[C x S x S]` flat in `[0, 1]`.
/// Returns the written paths.
pub fn export_cls_attention(
    rec: &AttentionRecord,
    image: &[f64],
    image_size: usize,
    layers: &[usize],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let patches = rec.tokens - 1;
    let grid = (patches as f64).sqrt().round() as usize;
    if grid * grid != patches {
        return Err(AtxfError::Geometry(format!(
            "{patches} patch tokens do not form a square grid"
        )));
    }
    let s = image_size;
    let channels = image.len() / (s * s);
    if channels * s * s != image.len() || !(1..=3).contains(&channels) {
        return Err(AtxfError::Geometry(format!(
            "image length {} does not match {s}x{s} with 1..3 channels",
            image.len()
        )));
    }
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for &layer in layers {
        if layer >= rec.maps.len() {
            return Err(AtxfError::Geometry(format!(
                "layer {layer} out of range (depth {})",
                rec.maps.len()
            )));
        }
        let heat = upsample(&cls_attention_grid(rec, 0, layer), grid, s);
        let gray: Vec<u8> = heat.iter().map(|&v| quantize(v)).collect();
        let pgm = out_dir.join(format!("attn_layer{layer}.pgm"));
        write_pgm(&pgm, &gray, s, s)?;
        written.push(pgm);

        let mut rgb = vec![0u8; s * s * 3];
        for i in 0..s * s {
            for c in 0..3 {
                let src = if c < channels { image[c * s * s + i] } else { image[(channels - 1) * s * s + i] };
                let blended = if c == 0 {
                    0.5 * src + 0.5 * heat[i]
                } else {
                    0.5 * src
                };
                rgb[i * 3 + c] = quantize(blended);
            }
        }
        let ppm = out_dir.join(format!("attn_layer{layer}_overlay.ppm"));
        write_ppm(&ppm, &rgb, s, s)?;
        written.push(ppm);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transfer::TeacherContext;
    use crate::vit::{ViTConfig, ViTParams};
    use crate::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn upsample_nearest_blocks() {
        let grid = vec![0.0, 1.0, 2.0, 3.0];
        let up = upsample(&grid, 2, 4);
        assert_eq!(up[0], 0.0);
        assert_eq!(up[1], 0.0);
        assert_eq!(up[2], 1.0);
        assert_eq!(up[4 * 3 + 3], 3.0);
    }

    #[test]
    fn grid_normalized_and_flat_rows_go_to_zero() {
        let n = 5; // CLS + 2x2
        let rec = AttentionRecord {
            batch: 1,
            heads: 1,
            tokens: n,
            head_dim: 1,
            maps: vec![vec![1.0 / n as f64; n * n]],
            queries: vec![vec![]],
            keys: vec![vec![]],
            values: vec![vec![]],
        };
        let g = cls_attention_grid(&rec, 0, 0);
        assert_eq!(g, vec![0.0; 4]);
    }

    #[test]
    fn exported_files_match_recomputation() {
        let cfg = ViTConfig {
            image_size: 8,
            patch_size: 4,
            in_channels: 3,
            depth: 2,
            heads: 2,
            dim: 8,
            mlp_ratio: 1.0,
            num_classes: 2,
            use_cls_token: true,
        };
        let teacher = TeacherContext::new(&ViTParams::init(&cfg, 500).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(501);
        let image: Vec<f64> = (0..3 * 64).map(|_| rng.random::<f64>()).collect();
        let img_t = Tensor::constant(vec![1, 3, 8, 8], image.clone());
        let rec = teacher.record(&img_t).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let written = export_cls_attention(&rec, &image, 8, &[0, 1], dir.path()).unwrap();
        assert_eq!(written.len(), 4);

        for &layer in &[0usize, 1] {
            let bytes = fs::read(dir.path().join(format!("attn_layer{layer}.pgm"))).unwrap();
            let header = b"P5\n8 8\n255\n";
            assert_eq!(&bytes[..header.len()], header);
            let body = &bytes[header.len()..];
            // independent recomputation, tolerate 8-bit quantization only
            let heat = upsample(&cls_attention_grid(&rec, 0, layer), 2, 8);
            assert_eq!(body.len(), 64);
            for (i, &px) in body.iter().enumerate() {
                let expect = (heat[i] * 255.0).round() as u8;
                assert!(px.abs_diff(expect) <= 1, "pixel {i}: {px} vs {expect}");
            }

            let ppm = fs::read(dir.path().join(format!("attn_layer{layer}_overlay.ppm"))).unwrap();
            let ph = b"P6\n8 8\n255\n";
            assert_eq!(&ppm[..ph.len()], ph);
            assert_eq!(ppm.len() - ph.len(), 8 * 8 * 3);
            // green channel is pure half-intensity image, independent of the map
            for i in 0..64 {
                let g = ppm[ph.len() + i * 3 + 1];
                let expect = (0.5 * image[64 + i] * 255.0).round() as u8;
                assert!(g.abs_diff(expect) <= 1);
            }
        }
    }

    #[test]
    fn non_square_patch_count_rejected() {
        let rec = AttentionRecord {
            batch: 1,
            heads: 1,
            tokens: 4, // 3 patches, not square
            head_dim: 1,
            maps: vec![vec![0.25; 16]],
            queries: vec![vec![]],
            keys: vec![vec![]],
            values: vec![vec![]],
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(export_cls_attention(&rec, &[0.0; 64], 8, &[0], dir.path()).is_err());
    }
}
