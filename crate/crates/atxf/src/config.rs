//! Sectioned key=value experiment configuration. Four sections — [model],
//! [train], [transfer], [data] — all optional; an empty file resolves to the
//! desk-scale scratch defaults. Unknown sections and keys are hard errors.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{DatasetFormat, DatasetSpec};
use crate::error::{AtxfError, Result};
use crate::train::{Regime, TrainConfig};
use crate::transfer::{AggregateAxis, LayerSelector, TransferMode, TransferSpec, TransferTarget};
use crate::vit::ViTConfig;

/// Desk-scale default model (trains in minutes on a laptop core).
pub fn desk_model() -> ViTConfig {
    ViTConfig {
        image_size: 32,
        patch_size: 4,
        in_channels: 3,
        depth: 6,
        heads: 4,
        dim: 128,
        mlp_ratio: 4.0,
        num_classes: 10,
        use_cls_token: true,
    }
}

#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub model: ViTConfig,
    pub train: TrainConfig,
    pub data: DatasetSpec,
    /// Checkpoint to initialize the student from (finetune regime).
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for ResolvedConfig {
    fn default() -> ResolvedConfig {
        ResolvedConfig {
            model: desk_model(),
            train: TrainConfig::default(),
            data: DatasetSpec::default(),
            init_checkpoint: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| {
        AtxfError::Config(format!(
            "[{section}] {key}: cannot parse `{value}`"
        ))
    })
}

fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(AtxfError::Config(format!(
            "[{section}] {key}: expected a boolean, got `{other}`"
        ))),
    }
}

fn parse_list(section: &str, key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|v| parse_num(section, key, v))
        .collect()
}

fn parse_layers(value: &str) -> Result<LayerSelector> {
    let v = value.trim();
    if v == "all" {
        return Ok(LayerSelector::All);
    }
    if let Some(k) = v.strip_prefix("first:") {
        return Ok(LayerSelector::FirstK(parse_num("transfer", "layers", k)?));
    }
    if let Some(k) = v.strip_prefix("last:") {
        return Ok(LayerSelector::LastK(parse_num("transfer", "layers", k)?));
    }
    let list: Result<Vec<usize>> = v
        .split(',')
        .map(|x| parse_num("transfer", "layers", x))
        .collect();
    Ok(LayerSelector::Explicit(list?))
}

fn layers_text(sel: &LayerSelector) -> String {
    match sel {
        LayerSelector::All => "all".into(),
        LayerSelector::FirstK(k) => format!("first:{k}"),
        LayerSelector::LastK(k) => format!("last:{k}"),
        LayerSelector::Explicit(list) => list
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(","),
    }
}

fn parse_target(value: &str) -> Result<TransferTarget> {
    match value.trim() {
        "attn_map" => Ok(TransferTarget::AttnMap),
        "q" => Ok(TransferTarget::Query),
        "k" => Ok(TransferTarget::Key),
        "v" => Ok(TransferTarget::Value),
        "qk" => Ok(TransferTarget::QueryKey),
        other => Err(AtxfError::Config(format!(
            "[transfer] target: unknown value `{other}` (attn_map|q|k|v|qk)"
        ))),
    }
}

fn target_text(t: TransferTarget) -> &'static str {
    match t {
        TransferTarget::AttnMap => "attn_map",
        TransferTarget::Query => "q",
        TransferTarget::Key => "k",
        TransferTarget::Value => "v",
        TransferTarget::QueryKey => "qk",
    }
}

fn parse_aggregate(value: &str) -> Result<AggregateAxis> {
    match value.trim() {
        "none" => Ok(AggregateAxis::None),
        "examples" => Ok(AggregateAxis::Examples),
        "layers" => Ok(AggregateAxis::Layers),
        "heads" => Ok(AggregateAxis::Heads),
        "query_tokens" => Ok(AggregateAxis::QueryTokens),
        other => Err(AtxfError::Config(format!(
            "[transfer] aggregate: unknown value `{other}`"
        ))),
    }
}

fn aggregate_text(a: AggregateAxis) -> &'static str {
    match a {
        AggregateAxis::None => "none",
        AggregateAxis::Examples => "examples",
        AggregateAxis::Layers => "layers",
        AggregateAxis::Heads => "heads",
        AggregateAxis::QueryTokens => "query_tokens",
    }
}

fn format_text(f: DatasetFormat) -> &'static str {
    match f {
        DatasetFormat::Idx => "idx",
        DatasetFormat::CifarBinary => "cifar_binary",
        DatasetFormat::RawDir => "raw_dir",
        DatasetFormat::Synthetic => "synthetic",
    }
}

/// Parse a config file into a fully resolved configuration.
pub fn parse_config(path: &Path) -> Result<ResolvedConfig> {
    let text = fs::read_to_string(path)?;
    parse_config_text(&text)
}

pub fn parse_config_text(text: &str) -> Result<ResolvedConfig> {
    let mut cfg = ResolvedConfig::default();
    let mut layers_set = false;
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| {
                AtxfError::Config(format!("line {}: malformed section `{line}`", lineno + 1))
            })?;
            if !matches!(name, "model" | "train" | "transfer" | "data") {
                return Err(AtxfError::Config(format!(
                    "line {}: unknown section [{name}]",
                    lineno + 1
                )));
            }
            section = name.to_string();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            AtxfError::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1))
        })?;
        let (key, value) = (key.trim(), value.trim());
        match (section.as_str(), key) {
            ("model", "image_size") => cfg.model.image_size = parse_num(&section, key, value)?,
            ("model", "patch_size") => cfg.model.patch_size = parse_num(&section, key, value)?,
            ("model", "in_channels") => cfg.model.in_channels = parse_num(&section, key, value)?,
            ("model", "depth") => cfg.model.depth = parse_num(&section, key, value)?,
            ("model", "heads") => cfg.model.heads = parse_num(&section, key, value)?,
            ("model", "dim") => cfg.model.dim = parse_num(&section, key, value)?,
            ("model", "mlp_ratio") => cfg.model.mlp_ratio = parse_num(&section, key, value)?,
            ("model", "num_classes") => cfg.model.num_classes = parse_num(&section, key, value)?,
            ("model", "use_cls_token") => cfg.model.use_cls_token = parse_bool(&section, key, value)?,

            ("train", "regime") => cfg.train.regime = Regime::parse(value)?,
            ("train", "epochs") => cfg.train.epochs = parse_num(&section, key, value)?,
            ("train", "batch_size") => cfg.train.batch_size = parse_num(&section, key, value)?,
            ("train", "base_lr") => cfg.train.base_lr = parse_num(&section, key, value)?,
            ("train", "lr_floor") => cfg.train.lr_floor = parse_num(&section, key, value)?,
            ("train", "warmup_epochs") => cfg.train.warmup_epochs = parse_num(&section, key, value)?,
            ("train", "weight_decay") => cfg.train.weight_decay = parse_num(&section, key, value)?,
            ("train", "beta1") => cfg.train.beta1 = parse_num(&section, key, value)?,
            ("train", "beta2") => cfg.train.beta2 = parse_num(&section, key, value)?,
            ("train", "layerwise_lr_decay") => {
                cfg.train.layerwise_lr_decay = parse_num(&section, key, value)?
            }
            ("train", "label_smoothing") => {
                cfg.train.label_smoothing = parse_num(&section, key, value)?
            }
            ("train", "mixup_alpha") => cfg.train.mixup_alpha = parse_num(&section, key, value)?,
            ("train", "ema_decay") => cfg.train.ema_decay = parse_num(&section, key, value)?,
            ("train", "seed") => cfg.train.seed = parse_num(&section, key, value)?,
            ("train", "init") => cfg.init_checkpoint = Some(PathBuf::from(value)),

            ("transfer", "target") => cfg.train.transfer.target = parse_target(value)?,
            ("transfer", "layers") => {
                cfg.train.transfer.layers = parse_layers(value)?;
                layers_set = true;
            }
            ("transfer", "heads_per_layer") => {
                cfg.train.transfer.heads_per_layer = Some(parse_num(&section, key, value)?)
            }
            ("transfer", "aggregate") => cfg.train.transfer.aggregate_axis = parse_aggregate(value)?,
            ("transfer", "lambda") => {
                cfg.train.transfer.distill_weight = parse_num(&section, key, value)?
            }
            ("transfer", "teacher") => {
                cfg.train.transfer.teacher_checkpoint = Some(PathBuf::from(value))
            }

            ("data", "format") => cfg.data.format = DatasetFormat::parse(value)?,
            ("data", "path") => cfg.data.path = PathBuf::from(value),
            ("data", "train_fraction") => cfg.data.train_fraction = parse_num(&section, key, value)?,
            ("data", "mean") => cfg.data.mean = parse_list(&section, key, value)?,
            ("data", "std") => cfg.data.std = parse_list(&section, key, value)?,
            ("data", "num_classes") => cfg.data.num_classes = parse_num(&section, key, value)?,
            ("data", "synthetic_size") => {
                cfg.data.synthetic_size = parse_num(&section, key, value)?
            }

            ("", _) => {
                return Err(AtxfError::Config(format!(
                    "line {}: key `{key}` outside any section",
                    lineno + 1
                )))
            }
            (_, _) => {
                return Err(AtxfError::Config(format!(
                    "line {}: unknown key `{key}` in section [{section}]",
                    lineno + 1
                )))
            }
        }
    }

    cfg.train.transfer.mode = match cfg.train.regime {
        Regime::Copy => TransferMode::Copy,
        Regime::Distill => TransferMode::Distill,
        _ => TransferMode::None,
    };
    if cfg.train.regime == Regime::Distill && !layers_set {
        cfg.train.transfer.layers = TransferSpec::default_distill_layers(cfg.model.depth);
    }
    cfg.model.validate()?;
    cfg.data.validate()?;
    cfg.train.validate()?;
    if cfg.train.regime == Regime::Finetune && cfg.init_checkpoint.is_none() {
        return Err(AtxfError::Config(
            "regime=finetune requires `init=` (a checkpoint to start from)".into(),
        ));
    }
    if cfg.data.num_classes != cfg.model.num_classes {
        return Err(AtxfError::Config(format!(
            "num_classes mismatch: model {} vs data {}",
            cfg.model.num_classes, cfg.data.num_classes
        )));
    }
    Ok(cfg)
}

impl ResolvedConfig {
    /// Canonical text form; echoed into the run directory for reproducibility and
    /// parseable back into an identical configuration.
    pub fn echo(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let x = &t.transfer;
        let d = &self.data;
        let mut out = String::new();
        out.push_str("[model]\n");
        out.push_str(&format!("image_size = {}\n", m.image_size));
        out.push_str(&format!("patch_size = {}\n", m.patch_size));
        out.push_str(&format!("in_channels = {}\n", m.in_channels));
        out.push_str(&format!("depth = {}\n", m.depth));
        out.push_str(&format!("heads = {}\n", m.heads));
        out.push_str(&format!("dim = {}\n", m.dim));
        out.push_str(&format!("mlp_ratio = {}\n", m.mlp_ratio));
        out.push_str(&format!("num_classes = {}\n", m.num_classes));
        out.push_str(&format!("use_cls_token = {}\n", m.use_cls_token));
        out.push_str("\n[train]\n");
        out.push_str(&format!("regime = {}\n", t.regime.name()));
        out.push_str(&format!("epochs = {}\n", t.epochs));
        out.push_str(&format!("batch_size = {}\n", t.batch_size));
        out.push_str(&format!("base_lr = {}\n", t.base_lr));
        out.push_str(&format!("lr_floor = {}\n", t.lr_floor));
        out.push_str(&format!("warmup_epochs = {}\n", t.warmup_epochs));
        out.push_str(&format!("weight_decay = {}\n", t.weight_decay));
        out.push_str(&format!("beta1 = {}\n", t.beta1));
        out.push_str(&format!("beta2 = {}\n", t.beta2));
        out.push_str(&format!("layerwise_lr_decay = {}\n", t.layerwise_lr_decay));
        out.push_str(&format!("label_smoothing = {}\n", t.label_smoothing));
        out.push_str(&format!("mixup_alpha = {}\n", t.mixup_alpha));
        out.push_str(&format!("ema_decay = {}\n", t.ema_decay));
        out.push_str(&format!("seed = {}\n", t.seed));
        if let Some(init) = &self.init_checkpoint {
            out.push_str(&format!("init = {}\n", init.display()));
        }
        out.push_str("\n[transfer]\n");
        out.push_str(&format!("target = {}\n", target_text(x.target)));
        out.push_str(&format!("layers = {}\n", layers_text(&x.layers)));
        if let Some(h) = x.heads_per_layer {
            out.push_str(&format!("heads_per_layer = {h}\n"));
        }
        out.push_str(&format!("aggregate = {}\n", aggregate_text(x.aggregate_axis)));
        out.push_str(&format!("lambda = {}\n", x.distill_weight));
        if let Some(teacher) = &x.teacher_checkpoint {
            out.push_str(&format!("teacher = {}\n", teacher.display()));
        }
        out.push_str("\n[data]\n");
        out.push_str(&format!("format = {}\n", format_text(d.format)));
        if d.path.as_os_str().len() > 0 {
            out.push_str(&format!("path = {}\n", d.path.display()));
        }
        out.push_str(&format!("train_fraction = {}\n", d.train_fraction));
        let join = |v: &[f64]| {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        out.push_str(&format!("mean = {}\n", join(&d.mean)));
        out.push_str(&format!("std = {}\n", join(&d.std)));
        out.push_str(&format!("num_classes = {}\n", d.num_classes));
        out.push_str(&format!("synthetic_size = {}\n", d.synthetic_size));
        out
    }
}
