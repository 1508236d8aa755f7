//! Command-line surface for training, evaluation, and analysis.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use atxf::analysis::{
    accuracy, count_activations_raw, ensemble_eval, export_cls_attention, linear_cka,
    linear_cka_debiased, match_heads, AccountingMethod, FeatureStack, MatchStrategy,
};
use atxf::checkpoint::{
    file_digest, load_checkpoint, save_checkpoint, table_of, Checkpoint, CheckpointMeta,
};
use atxf::config::{parse_config, ResolvedConfig};
use atxf::data::{load_dataset, split_indices, Dataset};
use atxf::error::Result;
use atxf::train::{evaluate, run_training, Regime};
use atxf::transfer::TeacherContext;
use atxf::vit::{no_overrides, vit_forward, CaptureOptions, ViTParams};
use atxf::AtxfError;

#[derive(Parser)]
#[command(name = "atxf", about = "attention-transfer training and analysis for ViTs")]
struct Cli {
    /// Experiment config file (key=value sections); defaults apply if omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output/run directory (default: $ATXF_RUN_DIR, then ./runs)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model under the configured regime
    Train,
    /// Evaluate a checkpoint on the validation split
    Eval {
        checkpoint: PathBuf,
        /// Evaluate the EMA weights instead of the raw weights
        #[arg(long)]
        ema: bool,
    },
    /// Layer-wise linear CKA between two checkpoints
    AnalyzeCka {
        checkpoint_a: PathBuf,
        checkpoint_b: PathBuf,
        /// Use only the CLS token feature (default: mean-pool patch tokens)
        #[arg(long)]
        cls_only: bool,
        /// Debiased CKA estimator
        #[arg(long)]
        debiased: bool,
        /// Evaluation batch size
        #[arg(long, default_value_t = 256)]
        batch: usize,
    },
    /// Attention-head JSD matching between two checkpoints
    AnalyzeJsd {
        checkpoint_a: PathBuf,
        checkpoint_b: PathBuf,
        /// Matching strategy: direct | bipartite | minimum | averaged
        #[arg(long, default_value = "bipartite")]
        strategy: String,
        #[arg(long, default_value_t = 64)]
        batch: usize,
    },
    /// Averaged-softmax ensemble of two checkpoints on the validation split
    Ensemble {
        checkpoint_a: PathBuf,
        checkpoint_b: PathBuf,
    },
    /// Export CLS-attention heatmaps (PGM) and overlays (PPM)
    ExportAttn {
        checkpoint: PathBuf,
        /// Comma-separated layer list (default: all)
        #[arg(long)]
        layers: Option<String>,
        /// Validation-sample index to visualize
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Count attention activations transferred per example
    CountActivations {
        #[arg(long)]
        depth: usize,
        #[arg(long)]
        heads: usize,
        #[arg(long)]
        tokens: usize,
        #[arg(long)]
        head_dim: usize,
    },
    /// Describe a checkpoint
    Info { checkpoint: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run_dir(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os("ATXF_RUN_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn load_config(cli: &Cli) -> Result<ResolvedConfig> {
    let mut cfg = match &cli.config {
        Some(path) => parse_config(path)?,
        None => ResolvedConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn atomic_write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn load_split(cfg: &ResolvedConfig, seed: u64) -> Result<(Dataset, Vec<usize>, Vec<usize>)> {
    let data = load_dataset(&cfg.data, seed)?;
    let (train_idx, val_idx) = split_indices(data.len(), cfg.data.train_fraction, seed);
    Ok((data, train_idx, val_idx))
}

/// A checkpoint plus the geometry sanity check against the config's model.
fn load_model(path: &Path) -> Result<(Checkpoint, ViTParams)> {
    let ckpt = load_checkpoint(path)?;
    let params = ckpt.to_params()?;
    Ok((ckpt, params))
}

fn teacher_for(cfg: &ResolvedConfig) -> Result<Option<TeacherContext>> {
    match &cfg.train.transfer.teacher_checkpoint {
        Some(path) => {
            let (_, params) = load_model(path)?;
            Ok(Some(TeacherContext::new(&params)))
        }
        None => Ok(None),
    }
}

fn cmd_train(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    cfg.train.validate()?;
    let dir = run_dir(cli);
    std::fs::create_dir_all(&dir)?;
    atomic_write(&dir.join("config.resolved"), &cfg.echo())?;

    let seed = cfg.train.seed;
    let (data, train_idx, val_idx) = load_split(&cfg, seed)?;
    let mut parent_digest = None;
    let init = match cfg.train.regime {
        Regime::Finetune => {
            let path = cfg.init_checkpoint.as_ref().expect("validated");
            parent_digest = Some(file_digest(path)?);
            let (ckpt, params) = load_model(path)?;
            if ckpt.cfg != cfg.model {
                return Err(AtxfError::Geometry(format!(
                    "init checkpoint model {:?} differs from configured model",
                    ckpt.cfg
                )));
            }
            params
        }
        _ => ViTParams::init(&cfg.model, seed)?,
    };
    let teacher = teacher_for(&cfg)?;
    if teacher.is_some() {
        if let Some(path) = &cfg.train.transfer.teacher_checkpoint {
            parent_digest = Some(file_digest(path)?);
        }
    }

    let outcome = run_training(
        &cfg.train,
        init,
        teacher.as_ref(),
        &data,
        &train_idx,
        &val_idx,
        Some(&dir),
    )?;

    let ckpt = Checkpoint {
        cfg: cfg.model.clone(),
        meta: CheckpointMeta {
            regime: cfg.train.regime.name().to_string(),
            epoch: cfg.train.epochs as u64,
            seed,
            parent_digest,
        },
        params: table_of(&outcome.params),
        optimizer: Some(outcome.optimizer),
        ema: outcome.ema,
    };
    let ckpt_path = dir.join("model.atxf");
    save_checkpoint(&ckpt, &ckpt_path)?;
    let last = outcome.history.last().unwrap();
    println!("saved {}", ckpt_path.display());
    println!("final val: loss {:.6}, acc {:.4}", last.loss, last.acc);
    Ok(())
}

fn cmd_eval(cli: &Cli, path: &Path, use_ema: bool) -> Result<()> {
    let cfg = load_config(cli)?;
    let (ckpt, params) = load_model(path)?;
    let params = if use_ema {
        ckpt.ema_params()?.ok_or_else(|| {
            AtxfError::Config("checkpoint carries no EMA weights".into())
        })?
    } else {
        params
    };
    // reuse the training seed so the validation split is identical
    let seed = cli.seed.unwrap_or(ckpt.meta.seed);
    let (data, _, val_idx) = load_split(&cfg, seed)?;
    let teacher = if ckpt.meta.regime == "copy" {
        teacher_for(&cfg)?
    } else {
        None
    };
    if ckpt.meta.regime == "copy" && teacher.is_none() {
        return Err(AtxfError::Config(
            "copy checkpoints need the teacher at eval time; set [transfer] teacher=".into(),
        ));
    }
    let spec = &cfg.train.transfer;
    let result = evaluate(
        &params,
        teacher.as_ref().map(|t| (t, spec)),
        &data,
        &val_idx,
        cfg.train.batch_size,
    )?;
    println!("val: loss {:.6}, acc {:.4} ({} samples)", result.loss, result.acc, val_idx.len());
    Ok(())
}

fn capture_features(
    params: &ViTParams,
    data: &Dataset,
    indices: &[usize],
    cls_only: bool,
) -> Result<FeatureStack> {
    let frozen = params.frozen();
    let cfg = &frozen.cfg;
    let mut per_layer: Vec<Vec<f64>> = vec![Vec::new(); cfg.depth];
    for chunk in indices.chunks(64) {
        let images = data.batch(chunk);
        let out = vit_forward(
            &images,
            &frozen,
            &no_overrides(cfg),
            CaptureOptions {
                features: true,
                ..CaptureOptions::default()
            },
        )?;
        for (l, f) in out.features.iter().enumerate() {
            per_layer[l].extend_from_slice(&f.to_vec());
        }
    }
    Ok(FeatureStack::from_features(
        &per_layer,
        indices.len(),
        cfg.num_tokens(),
        cfg.dim,
        cls_only,
        "val",
    ))
}

fn cmd_analyze_cka(
    cli: &Cli,
    a: &Path,
    b: &Path,
    cls_only: bool,
    debiased: bool,
    batch: usize,
) -> Result<()> {
    let cfg = load_config(cli)?;
    let (ckpt_a, params_a) = load_model(a)?;
    let (_, params_b) = load_model(b)?;
    let seed = cli.seed.unwrap_or(ckpt_a.meta.seed);
    let (data, _, val_idx) = load_split(&cfg, seed)?;
    let probe: Vec<usize> = val_idx.iter().take(batch).cloned().collect();
    let fa = capture_features(&params_a, &data, &probe, cls_only)?;
    let fb = capture_features(&params_b, &data, &probe, cls_only)?;
    if fa.layers.len() != fb.layers.len() {
        return Err(AtxfError::Geometry(format!(
            "depth mismatch: {} vs {}",
            fa.layers.len(),
            fb.layers.len()
        )));
    }
    let mut csv = String::from("layer, cka\n");
    for (l, (xa, xb)) in fa.layers.iter().zip(&fb.layers).enumerate() {
        let v = if debiased {
            linear_cka_debiased(xa, xb, probe.len(), fa.dim, fb.dim)?
        } else {
            linear_cka(xa, xb, probe.len(), fa.dim, fb.dim)?
        };
        println!("layer {l}: cka {v:.6}");
        csv += &format!("{l}, {v:.6}\n");
    }
    atomic_write(&run_dir(cli).join("cka.csv"), &csv)?;
    Ok(())
}

fn cmd_analyze_jsd(cli: &Cli, a: &Path, b: &Path, strategy: &str, batch: usize) -> Result<()> {
    let cfg = load_config(cli)?;
    let strategy = MatchStrategy::parse(strategy)?;
    let (ckpt_a, params_a) = load_model(a)?;
    let (_, params_b) = load_model(b)?;
    let seed = cli.seed.unwrap_or(ckpt_a.meta.seed);
    let (data, _, val_idx) = load_split(&cfg, seed)?;
    let probe: Vec<usize> = val_idx.iter().take(batch).cloned().collect();
    let images = data.batch(&probe);
    let rec_a = TeacherContext::new(&params_a).record(&images)?;
    let rec_b = TeacherContext::new(&params_b).record(&images)?;
    let mut csv = String::from("layer, head_a, head_b, jsd\n");
    for layer in 0..params_a.cfg.depth {
        let m = match_heads(&rec_a, &rec_b, layer, strategy)?;
        for &(ha, hb, v) in &m.pairs {
            csv += &format!("{layer}, {ha}, {hb}, {v:.6}\n");
        }
        println!("layer {layer}: mean jsd {:.6}", m.mean_jsd);
    }
    atomic_write(&run_dir(cli).join("jsd.csv"), &csv)?;
    Ok(())
}

fn cmd_ensemble(cli: &Cli, a: &Path, b: &Path) -> Result<()> {
    let cfg = load_config(cli)?;
    let (ckpt_a, params_a) = load_model(a)?;
    let (_, params_b) = load_model(b)?;
    let seed = cli.seed.unwrap_or(ckpt_a.meta.seed);
    let (data, _, val_idx) = load_split(&cfg, seed)?;
    let ra = evaluate(&params_a, None, &data, &val_idx, cfg.train.batch_size)?;
    let rb = evaluate(&params_b, None, &data, &val_idx, cfg.train.batch_size)?;
    let labels = data.batch_labels(&val_idx);
    let ens = ensemble_eval(&ra.probs, &rb.probs, data.num_classes, &labels)?;
    // the evaluate() accuracies must agree with the analysis-side accounting
    debug_assert_eq!(accuracy(&ra.probs, data.num_classes, &labels)?, ra.acc);
    println!("model A acc {:.4}", ra.acc);
    println!("model B acc {:.4}", rb.acc);
    println!("ensemble acc {:.4}", ens);
    Ok(())
}

fn cmd_export_attn(cli: &Cli, path: &Path, layers: &Option<String>, index: usize) -> Result<()> {
    let cfg = load_config(cli)?;
    let (ckpt, params) = load_model(path)?;
    let seed = cli.seed.unwrap_or(ckpt.meta.seed);
    let (data, _, val_idx) = load_split(&cfg, seed)?;
    let sample = *val_idx.get(index).ok_or_else(|| {
        AtxfError::Config(format!("--index {index} out of range ({})", val_idx.len()))
    })?;
    let images = data.batch(&[sample]);
    let rec = TeacherContext::new(&params).record(&images)?;
    let layer_list: Vec<usize> = match layers {
        Some(text) => text
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| AtxfError::Config(format!("bad layer `{s}`")))
            })
            .collect::<Result<_>>()?,
        None => (0..params.cfg.depth).collect(),
    };
    // de-normalize back to [0, 1] for the overlay
    let s = data.image_size;
    let mut image = data.images[sample].clone();
    let chan = |t: &[f64], c: usize| if t.len() == data.channels { t[c] } else { t[0] };
    for c in 0..data.channels {
        let (m, sd) = (chan(&cfg.data.mean, c), chan(&cfg.data.std, c));
        for v in image[c * s * s..(c + 1) * s * s].iter_mut() {
            *v = (*v * sd + m).clamp(0.0, 1.0);
        }
    }
    let dir = run_dir(cli).join("attn");
    let written = export_cls_attention(&rec, &image, s, &layer_list, &dir)?;
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_count_activations(depth: usize, heads: usize, tokens: usize, head_dim: usize) {
    let qk = count_activations_raw(depth, heads, tokens, head_dim, AccountingMethod::QkSizes);
    let map = count_activations_raw(depth, heads, tokens, head_dim, AccountingMethod::MapSize);
    println!("q,k sizes: {qk}");
    println!("map size:  {map}");
}

fn cmd_info(path: &Path) -> Result<()> {
    let ckpt = load_checkpoint(path)?;
    let c = &ckpt.cfg;
    println!(
        "model: {}x{} px, patch {}, depth {}, heads {}, dim {}, classes {}",
        c.image_size, c.image_size, c.patch_size, c.depth, c.heads, c.dim, c.num_classes
    );
    println!(
        "meta: regime {}, epoch {}, seed {}",
        ckpt.meta.regime, ckpt.meta.epoch, ckpt.meta.seed
    );
    if let Some(d) = &ckpt.meta.parent_digest {
        let hex: String = d.iter().map(|b| format!("{b:02x}")).collect();
        println!("parent: {hex}");
    }
    let total: usize = ckpt.params.iter().map(|(_, _, d)| d.len()).sum();
    println!("tensors: {} ({} parameters)", ckpt.params.len(), total);
    println!(
        "optimizer: {}, ema: {}",
        if ckpt.optimizer.is_some() { "yes" } else { "no" },
        if ckpt.ema.is_some() { "yes" } else { "no" }
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train => cmd_train(cli),
        Command::Eval { checkpoint, ema } => cmd_eval(cli, checkpoint, *ema),
        Command::AnalyzeCka {
            checkpoint_a,
            checkpoint_b,
            cls_only,
            debiased,
            batch,
        } => cmd_analyze_cka(cli, checkpoint_a, checkpoint_b, *cls_only, *debiased, *batch),
        Command::AnalyzeJsd {
            checkpoint_a,
            checkpoint_b,
            strategy,
            batch,
        } => cmd_analyze_jsd(cli, checkpoint_a, checkpoint_b, strategy, *batch),
        Command::Ensemble {
            checkpoint_a,
            checkpoint_b,
        } => cmd_ensemble(cli, checkpoint_a, checkpoint_b),
        Command::ExportAttn {
            checkpoint,
            layers,
            index,
        } => cmd_export_attn(cli, checkpoint, layers, *index),
        Command::CountActivations {
            depth,
            heads,
            tokens,
            head_dim,
        } => {
            cmd_count_activations(*depth, *heads, *tokens, *head_dim);
            Ok(())
        }
        Command::Info { checkpoint } => cmd_info(checkpoint),
    }
}
