//! Dataset ingestion: IDX (MNIST-style), CIFAR-10 binary, raw-dir corpora,
//! and a deterministic synthetic generator for desk-scale experiments.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{AtxfError, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    /// Big-endian IDX pair: `images.idx` + `labels.idx` under `path`.
    Idx,
    /// CIFAR-10 binary batches: every `*.bin` under `path`, records of
    /// 1 label byte + 3072 pixel bytes.
    CifarBinary,
    /// One subdirectory per class, fixed-size raw RGB files, sidecar
    /// `manifest` with `image_size=` and `channels=`.
    RawDir,
    /// Generated in memory; `path` is ignored.
    Synthetic,
}

impl DatasetFormat {
    pub fn parse(s: &str) -> Result<DatasetFormat> {
        match s {
            "idx" => Ok(DatasetFormat::Idx),
            "cifar_binary" => Ok(DatasetFormat::CifarBinary),
            "raw_dir" => Ok(DatasetFormat::RawDir),
            "synthetic" => Ok(DatasetFormat::Synthetic),
            other => Err(AtxfError::Config(format!("unknown dataset format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub format: DatasetFormat,
    pub path: PathBuf,
    /// Fraction of samples in the train split; the rest is validation.
    pub train_fraction: f64,
    /// Per-channel normalization, applied after scaling pixels to [0, 1].
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub num_classes: usize,
    /// Sample count for the synthetic format.
    pub synthetic_size: usize,
}

impl Default for DatasetSpec {
    fn default() -> DatasetSpec {
        DatasetSpec {
            format: DatasetFormat::Synthetic,
            path: PathBuf::new(),
            train_fraction: 0.8,
            mean: vec![0.5, 0.5, 0.5],
            std: vec![0.5, 0.5, 0.5],
            num_classes: 10,
            synthetic_size: 12_000,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.train_fraction) && self.train_fraction != 1.0 {
            return Err(AtxfError::Config(format!(
                "train_fraction {} outside (0, 1]",
                self.train_fraction
            )));
        }
        if self.num_classes < 2 {
            return Err(AtxfError::Config("num_classes must be >= 2".into()));
        }
        if self.mean.len() != self.std.len() || self.std.iter().any(|&s| s <= 0.0) {
            return Err(AtxfError::Config(
                "normalization mean/std must match in length with std > 0".into(),
            ));
        }
        Ok(())
    }
}

/// A fully materialized dataset: normalized images `[C x S x S]` flat plus
/// labels. Desk-scale corpora fit in memory comfortably.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Stack the given samples into a `[B x C x S x S]` constant tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let per = self.channels * self.image_size * self.image_size;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images[i]);
        }
        Tensor::constant(
            vec![indices.len(), self.channels, self.image_size, self.image_size],
            data,
        )
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// One-hot targets with optional label smoothing, `[B x K]` flat.
    pub fn targets(&self, indices: &[usize], smoothing: f64) -> Vec<f64> {
        let k = self.num_classes;
        let off = smoothing / k as f64;
        let on = 1.0 - smoothing + off;
        let mut out = vec![off; indices.len() * k];
        for (row, &i) in indices.iter().enumerate() {
            out[row * k + self.labels[i]] = on;
        }
        out
    }
}

/// Deterministic disjoint train/val index split: seeded shuffle, first
/// `fraction` of samples train, rest val. Stable across reloads.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let cut = (n as f64 * fraction).round() as usize;
    let val = idx.split_off(cut.min(n));
    (idx, val)
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if end > bytes.len() {
        return Err(AtxfError::Parse {
            offset,
            msg: format!("need 4 bytes, file has {}", bytes.len()),
        });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Parse an IDX image file (magic 0x00000803): returns (images as raw u8
/// planes, rows, cols).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Vec<Vec<u8>>, usize, usize)> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(AtxfError::Parse {
            offset: 0,
            msg: format!("bad IDX image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = read_be_u32(bytes, 4)? as usize;
    let rows = read_be_u32(bytes, 8)? as usize;
    let cols = read_be_u32(bytes, 12)? as usize;
    let per = rows * cols;
    let expected = 16 + count * per;
    if bytes.len() != expected {
        return Err(AtxfError::Parse {
            offset: bytes.len().min(expected),
            msg: format!("IDX image payload: expected {expected} bytes, got {}", bytes.len()),
        });
    }
    let images = (0..count)
        .map(|i| bytes[16 + i * per..16 + (i + 1) * per].to_vec())
        .collect();
    Ok((images, rows, cols))
}

/// Parse an IDX label file (magic 0x00000801).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(AtxfError::Parse {
            offset: 0,
            msg: format!("bad IDX label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let count = read_be_u32(bytes, 4)? as usize;
    let expected = 8 + count;
    if bytes.len() != expected {
        return Err(AtxfError::Parse {
            offset: bytes.len().min(expected),
            msg: format!("IDX label payload: expected {expected} bytes, got {}", bytes.len()),
        });
    }
    Ok(bytes[8..].to_vec())
}

fn normalize(raw: &[u8], channels: usize, mean: &[f64], std: &[f64]) -> Result<Vec<f64>> {
    let per = raw.len() / channels;
    let chan_stat = |t: &[f64], c: usize| -> f64 {
        if t.len() == channels {
            t[c]
        } else {
            t[0]
        }
    };
    let mut out = Vec::with_capacity(raw.len());
    for c in 0..channels {
        let m = chan_stat(mean, c);
        let s = chan_stat(std, c);
        for &px in &raw[c * per..(c + 1) * per] {
            out.push((px as f64 / 255.0 - m) / s);
        }
    }
    Ok(out)
}

fn check_label(label: usize, num_classes: usize, context: &str) -> Result<()> {
    if label >= num_classes {
        return Err(AtxfError::Contract(format!(
            "{context}: label {label} out of range [0, {num_classes})"
        )));
    }
    Ok(())
}

fn load_idx(spec: &DatasetSpec) -> Result<Dataset> {
    let img_bytes = fs::read(spec.path.join("images.idx"))?;
    let lbl_bytes = fs::read(spec.path.join("labels.idx"))?;
    let (raw_images, rows, cols) = parse_idx_images(&img_bytes)?;
    let labels_u8 = parse_idx_labels(&lbl_bytes)?;
    if rows != cols {
        return Err(AtxfError::Geometry(format!(
            "IDX images must be square, got {rows}x{cols}"
        )));
    }
    if raw_images.len() != labels_u8.len() {
        return Err(AtxfError::Contract(format!(
            "IDX image/label count mismatch: {} vs {}",
            raw_images.len(),
            labels_u8.len()
        )));
    }
    let mut images = Vec::with_capacity(raw_images.len());
    let mut labels = Vec::with_capacity(labels_u8.len());
    for (raw, &lbl) in raw_images.iter().zip(&labels_u8) {
        check_label(lbl as usize, spec.num_classes, "IDX")?;
        images.push(normalize(raw, 1, &spec.mean, &spec.std)?);
        labels.push(lbl as usize);
    }
    Ok(Dataset {
        images,
        labels,
        image_size: rows,
        channels: 1,
        num_classes: spec.num_classes,
    })
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

fn load_cifar_binary(spec: &DatasetSpec) -> Result<Dataset> {
    let mut files: Vec<PathBuf> = fs::read_dir(&spec.path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(AtxfError::Config(format!(
            "no .bin files under {}",
            spec.path.display()
        )));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        let bytes = fs::read(f)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(AtxfError::Parse {
                offset: bytes.len() - bytes.len() % CIFAR_RECORD,
                msg: format!(
                    "{}: length {} is not a multiple of the {CIFAR_RECORD}-byte record",
                    f.display(),
                    bytes.len()
                ),
            });
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            check_label(rec[0] as usize, spec.num_classes, "CIFAR")?;
            labels.push(rec[0] as usize);
            images.push(normalize(&rec[1..], 3, &spec.mean, &spec.std)?);
        }
    }
    Ok(Dataset {
        images,
        labels,
        image_size: 32,
        channels: 3,
        num_classes: spec.num_classes,
    })
}

fn parse_manifest(path: &Path) -> Result<(usize, usize)> {
    let text = fs::read_to_string(path)?;
    let (mut size, mut channels) = (None, None);
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| AtxfError::Config(format!(
            "manifest line without `=`: `{line}`"
        )))?;
        let parsed: usize = value.trim().parse().map_err(|_| {
            AtxfError::Config(format!("manifest: `{key}` is not an integer"))
        })?;
        match key.trim() {
            "image_size" => size = Some(parsed),
            "channels" => channels = Some(parsed),
            other => {
                return Err(AtxfError::Config(format!("manifest: unknown key `{other}`")))
            }
        }
    }
    match (size, channels) {
        (Some(s), Some(c)) => Ok((s, c)),
        _ => Err(AtxfError::Config(
            "manifest must set image_size and channels".into(),
        )),
    }
}

fn load_raw_dir(spec: &DatasetSpec) -> Result<Dataset> {
    let (size, channels) = parse_manifest(&spec.path.join("manifest"))?;
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(&spec.path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.len() != spec.num_classes {
        return Err(AtxfError::Config(format!(
            "raw_dir has {} class directories, spec says {}",
            class_dirs.len(),
            spec.num_classes
        )));
    }
    let per = channels * size * size;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (class, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in &files {
            let bytes = fs::read(f)?;
            if bytes.len() != per {
                return Err(AtxfError::Parse {
                    offset: bytes.len().min(per),
                    msg: format!(
                        "{}: expected {per} raw bytes ({channels}x{size}x{size}), got {}",
                        f.display(),
                        bytes.len()
                    ),
                });
            }
            images.push(normalize(&bytes, channels, &spec.mean, &spec.std)?);
            labels.push(class);
        }
    }
    Ok(Dataset {
        images,
        labels,
        image_size: size,
        channels,
        num_classes: spec.num_classes,
    })
}

pub const SYNTHETIC_IMAGE_SIZE: usize = 32;
pub const SYNTHETIC_CHANNELS: usize = 3;
const TEMPLATE_SIZE: usize = 10;

/// Deterministic synthetic corpus: each class has a fixed 10x10 RGB template
/// (class-seeded), stamped at a random position over a noisy background.
/// Classifying requires locating the template, so attention has real work
/// to do.
pub fn generate_synthetic(spec: &DatasetSpec, seed: u64) -> Dataset {
    let s = SYNTHETIC_IMAGE_SIZE;
    let c = SYNTHETIC_CHANNELS;
    let t = TEMPLATE_SIZE;
    let k = spec.num_classes;
    // class templates in [0, 1], high contrast
    let templates: Vec<Vec<f64>> = (0..k)
        .map(|class| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0xa5a5_0000 + class as u64));
            (0..c * t * t)
                .map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.synthetic_size;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let chan_stat = |v: &[f64], ch: usize| if v.len() == c { v[ch] } else { v[0] };
    for i in 0..n {
        let class = i % k;
        let y0 = rng.random_range(0..=s - t);
        let x0 = rng.random_range(0..=s - t);
        let mut img = vec![0.0; c * s * s];
        for v in img.iter_mut() {
            *v = 0.25 + 0.5 * rng.random::<f64>();
        }
        let tpl = &templates[class];
        for ch in 0..c {
            for ty in 0..t {
                for tx in 0..t {
                    img[ch * s * s + (y0 + ty) * s + (x0 + tx)] =
                        0.7 * tpl[ch * t * t + ty * t + tx] + 0.3 * rng.random::<f64>();
                }
            }
        }
        for ch in 0..c {
            let m = chan_stat(&spec.mean, ch);
            let sd = chan_stat(&spec.std, ch);
            for v in img[ch * s * s..(ch + 1) * s * s].iter_mut() {
                *v = (*v - m) / sd;
            }
        }
        images.push(img);
        labels.push(class);
    }
    Dataset {
        images,
        labels,
        image_size: s,
        channels: c,
        num_classes: k,
    }
}

/// Load and normalize the whole corpus for `spec`. `seed` only matters for
/// the synthetic format; file-backed formats are fully order-deterministic.
pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    match spec.format {
        DatasetFormat::Idx => load_idx(spec),
        DatasetFormat::CifarBinary => load_cifar_binary(spec),
        DatasetFormat::RawDir => load_raw_dir(spec),
        DatasetFormat::Synthetic => Ok(generate_synthetic(spec, seed)),
    }
}
