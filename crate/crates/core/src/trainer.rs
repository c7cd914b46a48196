//! Optimization loop: AdamW with decoupled weight decay, per-epoch cosine
//! learning rate, seeded shuffling and augmentation, validation after every
//! epoch, checkpointing and gradient checking.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chipstore::{augment, prepare_sample, DatasetManifest, Sample, Split, StatsFile};
use crate::config::{LossConfig, LossMode, RunConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::head::{update_running_stats, HeadMode};
use crate::metrics::{destandardized_report, EvalReport, MetricAccumulator};
use crate::model::{Batch, Model};
use crate::objectives::loss_node;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const BEST_CHECKPOINT: &str = "best.json";
pub const LAST_CHECKPOINT: &str = "last.json";

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·t/total))` for `0 ≤ t ≤ total`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 || t > total {
        return Err(Error::Validation(format!("schedule step {t} outside 0..={total}")));
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

/// First and second moments per parameter, aligned with the store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        let zeros = || params.entries().iter().map(|e| Tensor::zeros(e.tensor.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update. Parameters whose gradient is `None` are left alone;
/// weight decay applies only to entries flagged for it.
pub fn adamw_step<F: Real>(
    params: &mut ParamStore<F>,
    grads: &[Option<Tensor<F>>],
    state: &mut AdamState<F>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} moments",
            n,
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    for (i, entry) in params.entries_mut().iter_mut().enumerate() {
        let Some(g) = &grads[i] else { continue };
        if g.shape() != entry.tensor.shape() || state.m[i].shape() != entry.tensor.shape() {
            return Err(Error::Shape(format!(
                "{}: parameter {:?}, gradient {:?}",
                entry.name,
                entry.tensor.shape(),
                g.shape()
            )));
        }
        let wd = if entry.decay { cfg.weight_decay } else { 0.0 };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((p, &gi), mi), vi) in entry.tensor.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gf = gi.f64();
            let mn = b1 * mi.f64() + (1.0 - b1) * gf;
            let vn = b2 * vi.f64() + (1.0 - b2) * gf * gf;
            *mi = F::of(mn);
            *vi = F::of(vn);
            let mhat = mn / bc1;
            let vhat = vn / bc2;
            let th = p.f64();
            *p = F::of(th - lr * (mhat / (vhat.sqrt() + cfg.epsilon) + wd * th));
        }
    }
    Ok(())
}

/// Loss values of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub main: f64,
    pub aux: Option<f64>,
}

/// Training-mode forward and backward pass. Gradients are aligned with the
/// parameter store; the returned graph still holds batch-norm statistics.
pub fn forward_backward<F: Real>(
    model: &Model<F>,
    batch: &Batch<F>,
    loss: &LossConfig,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<(StepLoss, Vec<Option<Tensor<F>>>, Graph<F>, Vec<crate::graph::Var>)> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g);
    let with_aux = loss.mode == LossMode::MseAux;
    let out = model.forward(&mut g, &bound, batch, &mut HeadMode::Train(dropout_rng), with_aux, false)?;
    let terms = loss_node(&mut g, loss, out.prediction, out.aux, &batch.target)?;
    let value = StepLoss {
        total: g.value(terms.total).item().f64(),
        main: g.value(terms.main).item().f64(),
        aux: terms.aux.map(|a| g.value(a).item().f64()),
    };
    let mut grads = g.backward(terms.total);
    let per_param = bound.ordered().iter().map(|&v| grads.take(v)).collect();
    Ok((value, per_param, g, out.bn_nodes))
}

/// Name of the module a parameter belongs to, for diagnostics.
pub fn param_group(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

fn check_gradients<F: Real>(params: &ParamStore<F>, grads: &[Option<Tensor<F>>]) -> Result<()> {
    for (e, g) in params.entries().iter().zip(grads) {
        if let Some(g) = g {
            if !g.all_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in parameter group '{}' ({})",
                    param_group(&e.name),
                    e.name
                )));
            }
        }
    }
    Ok(())
}

/// Forward, backward, running-statistics update and one AdamW step.
pub fn train_step<F: Real>(
    model: &mut Model<F>,
    adam: &mut AdamState<F>,
    batch: &Batch<F>,
    loss: &LossConfig,
    cfg: &TrainConfig,
    lr: f64,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<StepLoss> {
    let (value, grads, g, bn_nodes) = forward_backward(model, batch, loss, dropout_rng)?;
    if !value.total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {}", value.total)));
    }
    check_gradients(&model.params, &grads)?;
    update_running_stats(&g, &bn_nodes, &mut model.buffers);
    drop(g);
    adamw_step(&mut model.params, &grads, adam, lr, cfg)?;
    Ok(value)
}

// ------------------------------------------------------------ gradient check

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Relative difference with a floor on the denominator so that entries whose
/// true gradient is ~0 are judged on absolute error.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares analytic gradients with central differences on `per_param`
/// entries of every parameter tensor (always including the entry with the
/// largest analytic gradient). Dropout masks are replayed from `seed`.
pub fn gradient_check(
    model: &Model<f64>,
    batch: &Batch<f64>,
    loss: &LossConfig,
    per_param: usize,
    eps: f64,
    seed: u64,
) -> Result<Vec<GradCheck>> {
    let loss_at = |m: &Model<f64>| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(forward_backward(m, batch, loss, &mut rng)?.0.total)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, grads, _, _) = forward_backward(model, batch, loss, &mut rng)?;
    let mut pick = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut work = model.clone();
    let mut out = Vec::new();
    for (pi, entry) in model.params.entries().iter().enumerate() {
        let len = entry.tensor.len();
        let zero = Tensor::zeros(entry.tensor.shape());
        let g = grads[pi].as_ref().unwrap_or(&zero);
        let argmax = (0..len)
            .max_by(|&a, &b| g.data()[a].abs().total_cmp(&g.data()[b].abs()))
            .unwrap_or(0);
        let mut idx = vec![argmax];
        while idx.len() < per_param.min(len) {
            let i = pick.gen_range(0..len);
            if !idx.contains(&i) {
                idx.push(i);
            }
        }
        for i in idx {
            let orig = entry.tensor.data()[i];
            work.params.entries_mut()[pi].tensor.data_mut()[i] = orig + eps;
            let up = loss_at(&work)?;
            work.params.entries_mut()[pi].tensor.data_mut()[i] = orig - eps;
            let down = loss_at(&work)?;
            work.params.entries_mut()[pi].tensor.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = g.data()[i];
            out.push(GradCheck {
                name: entry.name.clone(),
                index: i,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric, 1e-6),
            });
        }
    }
    Ok(out)
}

// ----------------------------------------------------------------- data

/// Prepared train and validation samples held in memory.
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub stats: StatsFile,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest, cfg: &RunConfig) -> Result<Self> {
        let stats = manifest.load_stats()?;
        let mode = cfg.model.encoder.tokenization;
        let load = |split| -> Result<Vec<Sample>> {
            manifest
                .read_split(split)?
                .iter()
                .map(|c| prepare_sample(c, &stats, mode))
                .collect()
        };
        let ds = Self {
            train: load(Split::Train)?,
            val: load(Split::Val)?,
            stats,
        };
        if ds.train.is_empty() || ds.val.is_empty() {
            return Err(Error::Validation(format!(
                "need non-empty splits, got {} train / {} val chips",
                ds.train.len(),
                ds.val.len()
            )));
        }
        Ok(ds)
    }
}

fn check_samples(model: &crate::config::ModelConfig, samples: &[Sample]) -> Result<()> {
    let (f, c) = model.frames_and_channels();
    let want = [f, c, model.height, model.width];
    if let Some(s) = samples.iter().find(|s| s.shape != want) {
        return Err(Error::Shape(format!("sample shape {:?}, model expects {want:?}", s.shape)));
    }
    Ok(())
}

/// Eval-mode predictions for `samples`, `[H*W]` standardized each.
pub fn predict_samples<F: Real>(model: &Model<F>, samples: &[Sample], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    check_samples(&model.config, samples)?;
    let hw = model.config.height * model.config.width;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = Batch::<F>::from_samples(chunk)?;
        let (pred, _) = model.predict(&batch, false)?;
        out.extend(pred.data().chunks(hw).map(|c| c.iter().map(|v| v.f64()).collect()));
    }
    Ok(out)
}

/// Pools metrics over every pixel of every sample, in standardized units.
pub fn evaluate<F: Real>(model: &Model<F>, samples: &[Sample], batch_size: usize) -> Result<MetricAccumulator> {
    let preds = predict_samples(model, samples, batch_size)?;
    let mut acc = MetricAccumulator::new();
    for (s, p) in samples.iter().zip(&preds) {
        let mut part = MetricAccumulator::new();
        for (&y, &q) in s.target.iter().zip(p) {
            part.push(y as f64, q);
        }
        acc.merge(&part);
    }
    Ok(acc)
}

pub fn evaluate_report<F: Real>(model: &Model<F>, samples: &[Sample], stats: &StatsFile, batch_size: usize, split: &str) -> Result<EvalReport> {
    let m = evaluate(model, samples, batch_size)?.finish()?;
    Ok(destandardized_report(&m, &stats.yield_stats(), split))
}

// ----------------------------------------------------------- checkpoints

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestMetric {
    pub epoch: usize,
    pub r2: f64,
}

/// Everything needed to resume training: the RNG stream is a pure function
/// of `(seed, epoch)`, so it is stored as those two numbers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub stats: StatsFile,
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub best: Option<BestMetric>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TensorKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    kind: TensorKind,
    shape: Vec<usize>,
    /// Offset in 32-bit words.
    offset: usize,
    decay: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format_version: u32,
    config: RunConfig,
    stats: StatsFile,
    epoch: usize,
    step: u64,
    rng: RngState,
    best: Option<BestMetric>,
    payload: String,
    tensors: Vec<TensorRecord>,
}

pub fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

impl Checkpoint {
    pub fn rng_state(&self) -> RngState {
        RngState {
            seed: self.config.train.seed,
            next_epoch: self.epoch,
        }
    }

    /// Writes `path` (JSON manifest) and its `.bin` payload.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut add = |name: &str, kind, t: &Tensor<f32>, decay| {
            tensors.push(TensorRecord {
                name: name.to_string(),
                kind,
                shape: t.shape().to_vec(),
                offset: payload.len() / 4,
                decay,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        };
        for e in self.model.params.entries() {
            add(&e.name, TensorKind::Param, &e.tensor, e.decay);
        }
        for e in self.model.buffers.entries() {
            add(&e.name, TensorKind::Buffer, &e.tensor, e.decay);
        }
        for (e, (m, v)) in self.model.params.entries().iter().zip(self.adam.m.iter().zip(&self.adam.v)) {
            add(&e.name, TensorKind::AdamM, m, false);
            add(&e.name, TensorKind::AdamV, v, false);
        }
        let bin = payload_path(path);
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            stats: self.stats.clone(),
            epoch: self.epoch,
            step: self.adam.step,
            rng: self.rng_state(),
            best: self.best,
            payload: bin
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string(),
            tensors,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&bin, &payload).map_err(|e| Error::io(&bin, e))?;
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("checkpoint manifest", e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let man: CheckpointManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: bad manifest: {e}", path.display())))?;
        if man.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                man.format_version
            )));
        }
        man.config.validate()?;
        let bin = path.with_file_name(&man.payload);
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Checkpoint(format!("payload {} is not a whole number of words", bin.display())));
        }
        let words: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for rec in &man.tensors {
            let len: usize = rec.shape.iter().product();
            let data = words
                .get(rec.offset..rec.offset + len)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the payload", rec.name)))?;
            let t = Tensor::from_vec(&rec.shape, data.to_vec());
            match rec.kind {
                TensorKind::Param => params.insert(rec.name.clone(), t, rec.decay),
                TensorKind::Buffer => buffers.insert(rec.name.clone(), t, rec.decay),
                TensorKind::AdamM => m.push(t),
                TensorKind::AdamV => v.push(t),
            }
        }
        // The parameter set must be exactly what the config builds.
        let reference = Model::<f32>::new(man.config.model.clone(), 0)?;
        for (store, want) in [(&params, &reference.params), (&buffers, &reference.buffers)] {
            let same = store.len() == want.len()
                && want
                    .entries()
                    .iter()
                    .all(|e| store.get(&e.name).is_some_and(|t| t.shape() == e.tensor.shape()));
            if !same {
                return Err(Error::Checkpoint(format!(
                    "{}: tensors do not match the stored model config",
                    path.display()
                )));
            }
        }
        // Restore the construction order so optimizer state lines up.
        let reorder = |store: &ParamStore<f32>, want: &ParamStore<f32>| {
            let mut out = ParamStore::new();
            for e in want.entries() {
                let i = store.names().position(|n| n == e.name).expect("checked above");
                let src = &store.entries()[i];
                out.insert(src.name.clone(), src.tensor.clone(), src.decay);
            }
            out
        };
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        let names: Vec<String> = params.names().map(str::to_string).collect();
        let params_sorted = reorder(&params, &reference.params);
        let moment_order: Vec<usize> = params_sorted
            .names()
            .map(|n| names.iter().position(|x| x == n).expect("checked above"))
            .collect();
        let adam = AdamState {
            step: man.step,
            m: moment_order.iter().map(|&i| m[i].clone()).collect(),
            v: moment_order.iter().map(|&i| v[i].clone()).collect(),
        };
        Ok(Self {
            model: Model {
                config: man.config.model.clone(),
                params: params_sorted,
                buffers: reorder(&buffers, &reference.buffers),
            },
            adam,
            config: man.config,
            stats: man.stats,
            epoch: man.epoch,
            best: man.best,
        })
    }
}

// ----------------------------------------------------------------- training

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_main_loss: f64,
    pub train_aux_loss: Option<f64>,
    pub val_rmse: f64,
    pub val_mae: f64,
    pub val_r2: f64,
    pub val_pearson: Option<f64>,
    pub val_rmse_kg_ha: f64,
}

pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub last: Checkpoint,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    for _ in 0..2 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

fn stream(seed: u64, epoch: usize, kind: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64, (kind << 40) | index as u64))
}

/// Runs one epoch; returns sample-weighted mean losses.
pub fn run_epoch(
    model: &mut Model<f32>,
    adam: &mut AdamState<f32>,
    train: &[Sample],
    cfg: &RunConfig,
    epoch: usize,
    lr: f64,
) -> Result<StepLoss> {
    let tc = &cfg.train;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut stream(tc.seed, epoch, STREAM_SHUFFLE, 0));
    let (mut total, mut main, mut aux, mut seen) = (0.0, 0.0, 0.0, 0usize);
    for (bi, idx) in order.chunks(tc.batch_size).enumerate() {
        let samples: Vec<Sample> = idx
            .iter()
            .map(|&i| {
                let mut s = train[i].clone();
                augment(&mut s, tc.augment_p, &mut stream(tc.seed, epoch, STREAM_AUGMENT, i));
                s
            })
            .collect();
        let batch = Batch::<f32>::from_samples(&samples)?;
        let mut rng = stream(tc.seed, epoch, STREAM_DROPOUT, bi);
        let step = train_step(model, adam, &batch, &cfg.loss, tc, lr, &mut rng).map_err(|e| match e {
            Error::Numerical(m) => Error::Numerical(format!("{m} (epoch {}, batch {bi})", epoch + 1)),
            other => other,
        })?;
        let n = idx.len() as f64;
        total += step.total * n;
        main += step.main * n;
        aux += step.aux.unwrap_or(0.0) * n;
        seen += idx.len();
    }
    let n = seen as f64;
    Ok(StepLoss {
        total: total / n,
        main: main / n,
        aux: (cfg.loss.mode == LossMode::MseAux).then_some(aux / n),
    })
}

/// Full training run writing the log and checkpoints into `out`.
/// `resume` continues from a saved state; epoch numbering carries on.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    out: &Path,
    resume: Option<Checkpoint>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_samples(&cfg.model, &data.train)?;
    check_samples(&cfg.model, &data.val)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config_text = serde_json::to_string_pretty(cfg).map_err(|e| Error::json("run config", e))?;
    fs::write(out.join(CONFIG_FILE), config_text + "\n").map_err(|e| Error::io(out.join(CONFIG_FILE), e))?;

    let (mut model, mut adam, start, mut best) = match resume {
        Some(ck) => {
            if ck.config.model != cfg.model {
                return Err(Error::Config("resume checkpoint was built for a different model config".into()));
            }
            if ck.stats != data.stats {
                return Err(Error::Config("resume checkpoint used different normalization stats".into()));
            }
            (ck.model, ck.adam, ck.epoch, ck.best)
        }
        None => {
            let model = Model::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
            let adam = AdamState::new(&model.params);
            (model, adam, 0, None)
        }
    };
    if start > cfg.train.epochs {
        return Err(Error::Config(format!(
            "checkpoint already has {start} epochs, config asks for {}",
            cfg.train.epochs
        )));
    }

    let log_path = out.join(LOG_FILE);
    let mut records: Vec<EpochRecord> = Vec::new();
    if start > 0 {
        if let Ok(text) = fs::read_to_string(&log_path) {
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let r: EpochRecord = serde_json::from_str(line).map_err(|e| Error::json("training log", e))?;
                if r.epoch <= start {
                    records.push(r);
                }
            }
        }
    }
    let write_log = |records: &[EpochRecord]| -> Result<()> {
        let mut f = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        for r in records {
            let line = serde_json::to_string(r).map_err(|e| Error::json("training log", e))?;
            writeln!(f, "{line}").map_err(|e| Error::io(&log_path, e))?;
        }
        Ok(())
    };
    write_log(&records)?;

    let snapshot = |model: &Model<f32>, adam: &AdamState<f32>, epoch, best| Checkpoint {
        config: cfg.clone(),
        stats: data.stats.clone(),
        model: model.clone(),
        adam: adam.clone(),
        epoch,
        best,
    };
    let mut last = snapshot(&model, &adam, start, best);
    for epoch in start..cfg.train.epochs {
        let tc = &cfg.train;
        let lr = cosine_lr(epoch, tc.epochs, tc.lr_max, tc.lr_min)?;
        let loss = run_epoch(&mut model, &mut adam, &data.train, cfg, epoch, lr)?;
        let report = evaluate_report(&model, &data.val, &data.stats, tc.eval_batch_size, "val")?;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss.total,
            train_main_loss: loss.main,
            train_aux_loss: loss.aux,
            val_rmse: report.rmse.standardized,
            val_mae: report.mae.standardized,
            val_r2: report.r2,
            val_pearson: report.pearson,
            val_rmse_kg_ha: report.rmse.kg_ha,
        };
        let improved = best.map_or(true, |b| report.r2 > b.r2);
        if improved {
            best = Some(BestMetric {
                epoch: epoch + 1,
                r2: report.r2,
            });
        }
        last = snapshot(&model, &adam, epoch + 1, best);
        if improved {
            last.save(&out.join(BEST_CHECKPOINT))?;
        }
        last.save(&out.join(LAST_CHECKPOINT))?;
        records.push(record.clone());
        write_log(&records)?;
        on_epoch(&record);
    }
    Ok(TrainOutcome { records, last })
}
