//! `yieldmap`: generate synthetic chips, train, evaluate, predict and explain.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use yieldmap_core::chipstore::{
    generate_dataset, prepare_sample, read_chip, DatasetManifest, GenParams, Sample, Split,
};
use yieldmap_core::config::{LossMode, RunConfig};
use yieldmap_core::interpret::{default_layers, explain, export_maps};
use yieldmap_core::trainer::{evaluate_report, predict_samples, train, Checkpoint, Dataset};
use yieldmap_core::{Error, Result};

/// Environment variable naming the default dataset directory.
const DATA_ENV: &str = "YIELDMAP_DATA";
const PATCH: usize = 16;

#[derive(Parser)]
#[command(name = "yieldmap", version, about = "Pixel-wise crop-yield regression from multi-temporal chips")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset: chips, manifest and normalization stats.
    Gen(GenArgs),
    /// Train a model and write checkpoints plus a JSON-lines log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Predict one chip and export prediction/truth/residual maps.
    Predict(PredictArgs),
    /// Attention and spectral analysis of a checkpoint.
    Explain(ExplainArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Chips per year.
    #[arg(long, default_value_t = 64)]
    chips: usize,
    /// Chip height and width in pixels (multiple of 16).
    #[arg(long, default_value_t = 96)]
    size: usize,
    #[arg(long, value_delimiter = ',', default_value = "2019,2020,2021,2022,2023")]
    years: Vec<u32>,
    /// Held-out years (default: the last listed year).
    #[arg(long, value_delimiter = ',')]
    val_years: Option<Vec<u32>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = DATA_ENV)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint (normally `<out>/last.json`).
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// MSE, HUBER or MSE_AUX.
    #[arg(long)]
    loss: Option<LossMode>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, env = DATA_ENV)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: Split,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    chip: PathBuf,
    /// Output prefix; writes `<prefix>_{prediction,truth,residual}.pgm` and `<prefix>.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, env = DATA_ENV)]
    data: PathBuf,
    /// 1-based encoder blocks to analyse (default: middle and last tap).
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long, default_value = "val")]
    split: Split,
    /// Report path; example maps are written next to it.
    #[arg(long)]
    out: PathBuf,
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Validation(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    if a.size == 0 || a.size % PATCH != 0 {
        return Err(Error::Validation(format!("--size {} must be a positive multiple of {PATCH}", a.size)));
    }
    let val_years = a.val_years.unwrap_or_else(|| a.years.last().copied().into_iter().collect());
    let params = GenParams {
        h: a.size,
        w: a.size,
        ..GenParams::default()
    };
    let m = generate_dataset(&a.out, a.chips, &a.years, &val_years, a.seed, &params)?;
    info!("wrote {} chips to {}", m.chips.len(), a.out.display());
    Ok(())
}

fn load_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr_max {
        t.lr_max = v;
    }
    if let Some(v) = a.lr_min {
        t.lr_min = v;
    }
    if let Some(v) = a.weight_decay {
        t.weight_decay = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.loss {
        cfg.loss.mode = v;
    }
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a)?;
    let manifest = DatasetManifest::load(&a.data)?;
    // Chip geometry comes from the data.
    let first = manifest
        .chips
        .first()
        .ok_or_else(|| Error::Validation("dataset has no chips".into()))?;
    let header = read_chip(&manifest.chip_path(first))?.header;
    cfg.model.time_steps = header.t;
    cfg.model.bands = header.c;
    cfg.model.height = header.h;
    cfg.model.width = header.w;
    cfg.validate()?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let data = Dataset::load(&manifest, &cfg)?;
    info!(
        "training on {} chips, validating on {}, {} epochs",
        data.train.len(),
        data.val.len(),
        cfg.train.epochs
    );
    let outcome = train(&cfg, &data, &a.out, resume, &mut |r| {
        info!(
            "epoch {} lr {:.3e} loss {:.4} val rmse {:.4} r2 {:.4}",
            r.epoch, r.lr, r.train_loss, r.val_rmse, r.val_r2
        );
    })?;
    if let Some(b) = outcome.last.best {
        info!("best val R² {:.4} at epoch {}", b.r2, b.epoch);
    }
    Ok(())
}

/// Loads a split normalized with the checkpoint's statistics and checks it
/// fits the checkpoint's model.
fn load_split(ck: &Checkpoint, data: &Path, split: Split) -> Result<Vec<Sample>> {
    let manifest = DatasetManifest::load(data)?;
    let chips = manifest.read_split(split)?;
    if chips.is_empty() {
        return Err(Error::Checkpoint(format!("split '{split}' of {} is empty", data.display())));
    }
    let mode = ck.config.model.encoder.tokenization;
    let m = &ck.model.config;
    for c in &chips {
        let h = &c.header;
        if (h.t, h.c, h.h, h.w) != (m.time_steps, m.bands, m.height, m.width) {
            return Err(Error::Checkpoint(format!(
                "chip {} is {}x{}x{}x{} but the checkpoint expects {}x{}x{}x{}",
                h.chip_id, h.t, h.c, h.h, h.w, m.time_steps, m.bands, m.height, m.width
            )));
        }
    }
    chips.iter().map(|c| prepare_sample(c, &ck.stats, mode)).collect()
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let samples = load_split(&ck, &a.data, a.split)?;
    let report = evaluate_report(&ck.model, &samples, &ck.stats, ck.config.train.eval_batch_size, &a.split.to_string())?;
    match &a.out {
        Some(p) => write_json(p, &report),
        None => {
            println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Error::Validation(e.to_string()))?);
            Ok(())
        }
    }
}

fn kg_ha(ck: &Checkpoint, standardized: &[f64]) -> Vec<f64> {
    let ys = ck.stats.yield_stats();
    standardized.iter().map(|&v| ys.destandardize(v)).collect()
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let chip = read_chip(&a.chip)?;
    let m = &ck.model.config;
    let h = &chip.header;
    if (h.t, h.c, h.h, h.w) != (m.time_steps, m.bands, m.height, m.width) {
        return Err(Error::Format(format!(
            "chip is {}x{}x{}x{}, model expects {}x{}x{}x{}",
            h.t, h.c, h.h, h.w, m.time_steps, m.bands, m.height, m.width
        )));
    }
    let sample = prepare_sample(&chip, &ck.stats, m.encoder.tokenization)?;
    let pred = predict_samples(&ck.model, std::slice::from_ref(&sample), 1)?;
    let truth: Vec<f64> = chip.yield_map.iter().map(|&v| v as f64).collect();
    let side = export_maps(&a.out, &h.chip_id, h.w, h.h, &kg_ha(&ck, &pred[0]), &truth)?;
    info!("wrote {}", side.files.join(", "));
    Ok(())
}

fn cmd_explain(a: ExplainArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let layers = a.layers.clone().unwrap_or_else(|| default_layers(&ck.model.config));
    let manifest = DatasetManifest::load(&a.data)?;
    let samples = load_split(&ck, &a.data, a.split)?;
    let bands = ck.stats.band_names.clone();
    let report = explain(&ck.model, &samples, &layers, &bands, ck.config.train.eval_batch_size)?;

    let entry = manifest.split(a.split)?.into_iter().next().expect("split checked non-empty");
    let chip = read_chip(&manifest.chip_path(&entry))?;
    let pred = predict_samples(&ck.model, &samples[..1], 1)?;
    let truth: Vec<f64> = chip.yield_map.iter().map(|&v| v as f64).collect();
    let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "explain".into());
    let prefix = a.out.with_file_name(format!("{stem}_example"));
    let maps = export_maps(&prefix, &chip.header.chip_id, chip.header.w, chip.header.h, &kg_ha(&ck, &pred[0]), &truth)?;

    let mut value = serde_json::to_value(&report).map_err(|e| Error::Validation(e.to_string()))?;
    value["example_maps"] = serde_json::to_value(&maps).map_err(|e| Error::Validation(e.to_string()))?;
    write_json(&a.out, &value)?;
    for l in &report.layers {
        info!("layer {} receiving score {:?}", l.layer, l.receiving_score);
    }
    info!("spectral importance {:?}", report.spectral_importance.scores);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Explain(a) => cmd_explain(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
