//! ATXF checkpoint format: a self-describing little-endian binary with a
//! trailing SHA-256 digest.
//!
//! Layout:
//!   magic "ATXF" | version u32 | config block | metadata block |
//!   params table | flags u8 | [optimizer state] | [EMA table] |
//!   sha256 of everything before it (32 bytes)
//!
//! A tensor table is `count u32`, then per tensor: name (u32 len + UTF-8),
//! ndim u32, dims u64 each, payload f64s. All integers and floats little
//! endian. Loading is strict: geometry is validated against the stored
//! config and never silently reshaped.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{AtxfError, Result};
use crate::vit::{ViTConfig, ViTParams};

pub const MAGIC: &[u8; 4] = b"ATXF";
pub const FORMAT_VERSION: u32 = 1;

pub type TensorTable = Vec<(String, Vec<usize>, Vec<f64>)>;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointMeta {
    pub regime: String,
    pub epoch: u64,
    pub seed: u64,
    /// Digest of the checkpoint this one was initialized from, if any.
    pub parent_digest: Option<[u8; 32]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub first_moment: TensorTable,
    pub second_moment: TensorTable,
}

pub struct Checkpoint {
    pub cfg: ViTConfig,
    pub meta: CheckpointMeta,
    pub params: TensorTable,
    pub optimizer: Option<OptimizerSnapshot>,
    pub ema: Option<TensorTable>,
}

impl Checkpoint {
    pub fn from_params(params: &ViTParams, meta: CheckpointMeta) -> Checkpoint {
        Checkpoint {
            cfg: params.cfg.clone(),
            meta,
            params: table_of(params),
            optimizer: None,
            ema: None,
        }
    }

    /// Rebuild trainable parameters; fails with a geometry error naming the
    /// offending tensor if the stored table disagrees with `cfg`.
    pub fn to_params(&self) -> Result<ViTParams> {
        ViTParams::from_named(&self.cfg, &self.params)
    }

    /// EMA weights as parameters, if stored.
    pub fn ema_params(&self) -> Result<Option<ViTParams>> {
        match &self.ema {
            Some(table) => Ok(Some(ViTParams::from_named(&self.cfg, table)?)),
            None => Ok(None),
        }
    }
}

pub fn table_of(params: &ViTParams) -> TensorTable {
    params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec(), t.to_vec()))
        .collect()
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn table(&mut self, table: &TensorTable) {
        self.u32(table.len() as u32);
        for (name, shape, data) in table {
            self.str(name);
            self.u32(shape.len() as u32);
            for &d in shape {
                self.u64(d as u64);
            }
            for &v in data {
                self.f64(v);
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(AtxfError::Truncated(format!(
                "{what} at byte {}: need {n}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn str(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let pos = self.pos;
        String::from_utf8(self.take(len, what)?.to_vec()).map_err(|_| AtxfError::Parse {
            offset: pos,
            msg: format!("{what}: invalid UTF-8"),
        })
    }
    fn table(&mut self, what: &str) -> Result<TensorTable> {
        let count = self.u32(what)? as usize;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let name = self.str(what)?;
            let ndim = self.u32(&name)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(self.u64(&name)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(self.f64(&name)?);
            }
            out.push((name, shape, data));
        }
        Ok(out)
    }
}

fn write_config(w: &mut Writer, cfg: &ViTConfig) {
    w.u64(cfg.image_size as u64);
    w.u64(cfg.patch_size as u64);
    w.u64(cfg.in_channels as u64);
    w.u64(cfg.depth as u64);
    w.u64(cfg.heads as u64);
    w.u64(cfg.dim as u64);
    w.f64(cfg.mlp_ratio);
    w.u64(cfg.num_classes as u64);
    w.buf.push(cfg.use_cls_token as u8);
}

fn read_config(r: &mut Reader) -> Result<ViTConfig> {
    Ok(ViTConfig {
        image_size: r.u64("config.image_size")? as usize,
        patch_size: r.u64("config.patch_size")? as usize,
        in_channels: r.u64("config.in_channels")? as usize,
        depth: r.u64("config.depth")? as usize,
        heads: r.u64("config.heads")? as usize,
        dim: r.u64("config.dim")? as usize,
        mlp_ratio: r.f64("config.mlp_ratio")?,
        num_classes: r.u64("config.num_classes")? as usize,
        use_cls_token: r.u8("config.use_cls_token")? != 0,
    })
}

fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    write_config(&mut w, &ckpt.cfg);
    w.str(&ckpt.meta.regime);
    w.u64(ckpt.meta.epoch);
    w.u64(ckpt.meta.seed);
    match &ckpt.meta.parent_digest {
        Some(d) => {
            w.buf.push(1);
            w.buf.extend_from_slice(d);
        }
        None => w.buf.push(0),
    }
    w.table(&ckpt.params);
    let flags = (ckpt.optimizer.is_some() as u8) | ((ckpt.ema.is_some() as u8) << 1);
    w.buf.push(flags);
    if let Some(opt) = &ckpt.optimizer {
        w.u64(opt.step);
        w.table(&opt.first_moment);
        w.table(&opt.second_moment);
    }
    if let Some(ema) = &ckpt.ema {
        w.table(ema);
    }
    let digest = Sha256::digest(&w.buf);
    w.buf.extend_from_slice(&digest);
    w.buf
}

/// Atomic save: write to a sibling temp file, then rename into place.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ckpt);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 + 4 + 32 {
        return Err(AtxfError::Truncated(format!(
            "file is {} bytes, smaller than any valid checkpoint",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(AtxfError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(AtxfError::BadVersion(version));
    }
    let (body, stored_digest) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(AtxfError::DigestMismatch);
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let cfg = read_config(&mut r)?;
    let regime = r.str("meta.regime")?;
    let epoch = r.u64("meta.epoch")?;
    let seed = r.u64("meta.seed")?;
    let parent_digest = if r.u8("meta.parent_flag")? != 0 {
        Some(r.take(32, "meta.parent_digest")?.try_into().unwrap())
    } else {
        None
    };
    let params = r.table("params")?;
    let flags = r.u8("flags")?;
    let optimizer = if flags & 1 != 0 {
        Some(OptimizerSnapshot {
            step: r.u64("optimizer.step")?,
            first_moment: r.table("optimizer.m")?,
            second_moment: r.table("optimizer.v")?,
        })
    } else {
        None
    };
    let ema = if flags & 2 != 0 {
        Some(r.table("ema")?)
    } else {
        None
    };
    if r.pos != body.len() {
        return Err(AtxfError::Parse {
            offset: r.pos,
            msg: format!("{} trailing bytes before digest", body.len() - r.pos),
        });
    }
    Ok(Checkpoint {
        cfg,
        meta: CheckpointMeta {
            regime,
            epoch,
            seed,
            parent_digest,
        },
        params,
        optimizer,
        ema,
    })
}

/// SHA-256 of an encoded checkpoint file on disk (its trailing digest).
pub fn file_digest(path: &Path) -> Result<[u8; 32]> {
    let bytes = fs::read(path)?;
    if bytes.len() < 32 {
        return Err(AtxfError::Truncated("no digest".into()));
    }
    Ok(bytes[bytes.len() - 32..].try_into().unwrap())
}
