//! Interpretability: month-by-month attention matrices, temporal receiving
//! scores, spectral band importance from patch-embedding weights, and
//! grayscale map export.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::chipstore::{Sample, TokenizationMode, MONTHS};
use crate::config::ModelConfig;
use crate::encoder::{AttentionRecord, TokenLayout};
use crate::error::{Error, Result};
use crate::model::{Batch, Model};
use crate::params::ParamStore;
use crate::tensor::Real;

/// Row-stochastic month×month matrix; rows are source (query) months,
/// columns are target (key) months.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalAttentionMatrix {
    pub layer: usize,
    pub months: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralImportance {
    pub bands: Vec<String>,
    pub scores: Vec<f64>,
}

pub fn month_labels(frames: usize) -> Vec<String> {
    (0..frames)
        .map(|t| MONTHS.get(t).map_or_else(|| format!("t{t}"), |m| m.to_string()))
        .collect()
}

fn require_time_tokens(mode: TokenizationMode) -> Result<()> {
    match mode {
        TokenizationMode::PerTimestep => Ok(()),
        TokenizationMode::FlattenedChannels => Err(Error::UnsupportedMode(
            "temporal attention needs per-time-step tokens; this model flattens all time steps into \
             channels, so its tokens carry no month identity"
                .into(),
        )),
    }
}

/// Running sums of month-block attention mass, so batches can be pooled
/// before the final group mean.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalAccumulator {
    frames: usize,
    sums: Vec<f64>,
    counts: Vec<f64>,
}

impl TemporalAccumulator {
    pub fn new(frames: usize) -> Self {
        Self {
            frames,
            sums: vec![0.0; frames * frames],
            counts: vec![0.0; frames * frames],
        }
    }

    pub fn add(&mut self, rec: &AttentionRecord, layout: TokenLayout) -> Result<()> {
        if layout.frames != self.frames || layout.len() != rec.tokens {
            return Err(Error::Shape(format!(
                "attention over {} tokens does not match a {}x{}x{} layout",
                rec.tokens, layout.frames, layout.grid_h, layout.grid_w
            )));
        }
        let g = layout.per_frame();
        let t = self.frames;
        for b in 0..rec.batch {
            for h in 0..rec.heads {
                for i in 0..rec.tokens {
                    let s = i / g;
                    let row = rec.row(b, h, i);
                    for (tt, block) in row.chunks(g).enumerate() {
                        self.sums[s * t + tt] += block.iter().sum::<f64>();
                        self.counts[s * t + tt] += block.len() as f64;
                    }
                }
            }
        }
        Ok(())
    }

    /// Group means, then each row rescaled to sum 1.
    pub fn finish(&self, layer: usize) -> Result<TemporalAttentionMatrix> {
        let t = self.frames;
        let mut matrix = Vec::with_capacity(t);
        for s in 0..t {
            let row: Vec<f64> = (0..t)
                .map(|c| {
                    let n = self.counts[s * t + c];
                    if n > 0.0 { self.sums[s * t + c] / n } else { 0.0 }
                })
                .collect();
            let total: f64 = row.iter().sum();
            if !(total > 0.0) {
                return Err(Error::Validation(format!("no attention mass recorded for month {s}")));
            }
            matrix.push(row.into_iter().map(|v| v / total).collect());
        }
        Ok(TemporalAttentionMatrix {
            layer,
            months: month_labels(t),
            matrix,
        })
    }
}

/// Month-level attention of one record.
pub fn temporal_attention(rec: &AttentionRecord, layout: TokenLayout, mode: TokenizationMode) -> Result<TemporalAttentionMatrix> {
    require_time_tokens(mode)?;
    let mut acc = TemporalAccumulator::new(layout.frames);
    acc.add(rec, layout)?;
    acc.finish(rec.layer)
}

/// Incoming attention per month: column sums.
pub fn receiving_score(m: &TemporalAttentionMatrix) -> Vec<f64> {
    let t = m.matrix.len();
    (0..t).map(|c| m.matrix.iter().map(|row| row[c]).sum()).collect()
}

/// L2 norm of the patch-embedding rows fed by each band, normalized to sum
/// 1. In flattened mode the input channel is `t * bands + band`, so every
/// time step of a band is pooled together.
pub fn spectral_importance<F: Real>(params: &ParamStore<F>, cfg: &ModelConfig, band_names: &[String]) -> Result<SpectralImportance> {
    let w = params
        .get("encoder.patch_embed.weight")
        .ok_or_else(|| Error::Checkpoint("missing patch embedding weights".into()))?;
    if band_names.len() != cfg.bands {
        return Err(Error::Validation(format!(
            "{} band names for {} bands",
            band_names.len(),
            cfg.bands
        )));
    }
    let (_, channels) = cfg.frames_and_channels();
    let pp = cfg.encoder.patch_size * cfg.encoder.patch_size;
    let d = w.shape()[1];
    if w.shape()[0] != channels * pp {
        return Err(Error::Shape(format!("patch weights {:?} for {channels} channels", w.shape())));
    }
    let mut sq = vec![0.0f64; cfg.bands];
    for (r, row) in w.data().chunks(d).enumerate() {
        let band = (r / pp) % cfg.bands;
        sq[band] += row.iter().map(|v| v.f64() * v.f64()).sum::<f64>();
    }
    let norms: Vec<f64> = sq.iter().map(|s| s.sqrt()).collect();
    let total: f64 = norms.iter().sum();
    let scores = if total > 0.0 {
        norms.iter().map(|n| n / total).collect()
    } else {
        vec![1.0 / cfg.bands as f64; cfg.bands]
    };
    Ok(SpectralImportance {
        bands: band_names.to_vec(),
        scores,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAttention {
    pub layer: usize,
    pub temporal_attention: TemporalAttentionMatrix,
    pub receiving_score: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainReport {
    pub chips: usize,
    pub layers: Vec<LayerAttention>,
    pub spectral_importance: SpectralImportance,
}

/// The deepest tap and the middle tap: the analogues of the published
/// 8-of-16 and 16-of-16 layers.
pub fn default_layers(cfg: &ModelConfig) -> Vec<usize> {
    let taps = &cfg.encoder.tap_layers;
    let mid = taps[(taps.len() / 2).saturating_sub(1)];
    let last = *taps.last().expect("validated config has taps");
    if mid == last { vec![last] } else { vec![mid, last] }
}

/// Attention analysis pooled over `samples`, plus spectral importance.
pub fn explain<F: Real>(
    model: &Model<F>,
    samples: &[Sample],
    layers: &[usize],
    band_names: &[String],
    batch_size: usize,
) -> Result<ExplainReport> {
    let cfg = &model.config;
    require_time_tokens(cfg.encoder.tokenization)?;
    if layers.is_empty() {
        return Err(Error::Config("no layers requested".into()));
    }
    if let Some(l) = layers.iter().find(|&&l| l == 0 || l > cfg.encoder.depth) {
        return Err(Error::Config(format!("layer {l} outside 1..={}", cfg.encoder.depth)));
    }
    if samples.is_empty() {
        return Err(Error::Validation("explain needs at least one chip".into()));
    }
    let (gh, gw) = cfg.grid();
    let layout = TokenLayout {
        frames: cfg.time_steps,
        grid_h: gh,
        grid_w: gw,
    };
    let mut accs: Vec<TemporalAccumulator> = layers.iter().map(|_| TemporalAccumulator::new(layout.frames)).collect();
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = Batch::<F>::from_samples(chunk)?;
        model.check_input(&batch.input)?;
        let (_, records) = model.predict(&batch, true)?;
        for (acc, &l) in accs.iter_mut().zip(layers) {
            let rec = records
                .iter()
                .find(|r| r.layer == l)
                .ok_or_else(|| Error::Validation(format!("no attention captured for layer {l}")))?;
            acc.add(rec, layout)?;
        }
    }
    let layers = accs
        .iter()
        .zip(layers)
        .map(|(acc, &l)| {
            let m = acc.finish(l)?;
            Ok(LayerAttention {
                layer: l,
                receiving_score: receiving_score(&m),
                temporal_attention: m,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExplainReport {
        chips: samples.len(),
        layers,
        spectral_importance: spectral_importance(&model.params, cfg, band_names)?,
    })
}

// --------------------------------------------------------------- map export

/// Value range, in kg/ha, mapped linearly onto 0..=65535.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapRange {
    pub min_kg_ha: f64,
    pub max_kg_ha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSidecar {
    pub chip_id: String,
    pub width: usize,
    pub height: usize,
    pub prediction: MapRange,
    pub truth: MapRange,
    pub residual: MapRange,
    /// Residual sign convention.
    pub residual_definition: String,
    pub files: Vec<String>,
}

/// Writes a binary 16-bit PGM, scaling `[lo, hi]` onto the full range.
pub fn write_pgm16(path: &Path, width: usize, height: usize, values: &[f64], range: MapRange) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::Length {
            expected: width * height,
            found: values.len(),
        });
    }
    let span = range.max_kg_ha - range.min_kg_ha;
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &v in values {
        let q = if span > 0.0 {
            ((v - range.min_kg_ha) / span * 65535.0).round().clamp(0.0, 65535.0)
        } else {
            0.0
        };
        out.extend_from_slice(&(q as u16).to_be_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a 16-bit PGM written by [`write_pgm16`]; returns `(width, height, levels)`.
pub fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!("{}: truncated PGM header", path.display())));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let bad = || Error::Format(format!("{}: not a 16-bit binary PGM", path.display()));
    if fields[0] != "P5" || fields[3] != "65535" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let body = bytes.get(pos..).ok_or_else(bad)?;
    if body.len() != 2 * w * h {
        return Err(Error::Length {
            expected: 2 * w * h,
            found: body.len(),
        });
    }
    Ok((w, h, body.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()))
}

fn range_of(values: &[f64]) -> MapRange {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    MapRange {
        min_kg_ha: lo,
        max_kg_ha: hi,
    }
}

/// Exports prediction, truth and residual (prediction − truth) maps as
/// `{prefix}_prediction.pgm` etc. plus `{prefix}.json`. Predictions are
/// clamped at 0 kg/ha first; prediction and truth share one range.
pub fn export_maps(
    prefix: &Path,
    chip_id: &str,
    width: usize,
    height: usize,
    prediction_kg_ha: &[f64],
    truth_kg_ha: &[f64],
) -> Result<MapSidecar> {
    if prediction_kg_ha.len() != truth_kg_ha.len() {
        return Err(Error::Length {
            expected: truth_kg_ha.len(),
            found: prediction_kg_ha.len(),
        });
    }
    let pred: Vec<f64> = prediction_kg_ha.iter().map(|v| v.max(0.0)).collect();
    let residual: Vec<f64> = pred.iter().zip(truth_kg_ha).map(|(p, t)| p - t).collect();
    let (rp, rt) = (range_of(&pred), range_of(truth_kg_ha));
    let shared = MapRange {
        min_kg_ha: rp.min_kg_ha.min(rt.min_kg_ha),
        max_kg_ha: rp.max_kg_ha.max(rt.max_kg_ha),
    };
    let rr = range_of(&residual);
    let with_suffix = |s: &str| -> PathBuf {
        let mut name = prefix.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(s);
        prefix.with_file_name(name)
    };
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut files = Vec::new();
    for (suffix, values, range) in [
        ("_prediction.pgm", &pred, shared),
        ("_truth.pgm", &truth_kg_ha.to_vec(), shared),
        ("_residual.pgm", &residual, rr),
    ] {
        let path = with_suffix(suffix);
        write_pgm16(&path, width, height, values, range)?;
        files.push(path.file_name().unwrap_or_default().to_string_lossy().into_owned());
    }
    let sidecar = MapSidecar {
        chip_id: chip_id.to_string(),
        width,
        height,
        prediction: shared,
        truth: shared,
        residual: rr,
        residual_definition: "prediction - truth".into(),
        files,
    };
    let json_path = with_suffix(".json");
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json("map sidecar", e))?;
    fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;
    Ok(sidecar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn record(frames: usize, per_frame: usize, f: impl Fn(usize, usize) -> f64) -> (AttentionRecord, TokenLayout) {
        let n = frames * per_frame;
        let mut probs = Vec::with_capacity(n * n);
        for i in 0..n {
            let row: Vec<f64> = (0..n).map(|j| f(i, j)).collect();
            let s: f64 = row.iter().sum();
            probs.extend(row.into_iter().map(|v| v / s));
        }
        (
            AttentionRecord {
                layer: 1,
                batch: 1,
                heads: 1,
                tokens: n,
                probs,
            },
            TokenLayout {
                frames,
                grid_h: 1,
                grid_w: per_frame,
            },
        )
    }

    #[test]
    fn uniform_and_block_diagonal() {
        let (rec, layout) = record(5, 4, |_, _| 1.0);
        let m = temporal_attention(&rec, layout, TokenizationMode::PerTimestep).unwrap();
        for row in &m.matrix {
            for &v in row {
                assert!((v - 0.2).abs() < 1e-12);
            }
        }
        assert!(receiving_score(&m).iter().all(|s| (s - 1.0).abs() < 1e-12));

        let (rec, layout) = record(5, 4, |i, j| if i / 4 == j / 4 { 1.0 } else { 0.0 });
        let m = temporal_attention(&rec, layout, TokenizationMode::PerTimestep).unwrap();
        for (s, row) in m.matrix.iter().enumerate() {
            for (t, &v) in row.iter().enumerate() {
                assert_eq!(v, if s == t { 1.0 } else { 0.0 });
            }
        }
        assert!(receiving_score(&m).iter().all(|s| (s - 1.0).abs() < 1e-12));
        assert_eq!(m.months[2], "July");
    }

    #[test]
    fn favoured_column_receives_most() {
        // 3 months, column 1 gets double weight before normalization
        let (rec, layout) = record(3, 2, |_, j| if j / 2 == 1 { 2.0 } else { 1.0 });
        let m = temporal_attention(&rec, layout, TokenizationMode::PerTimestep).unwrap();
        let r = receiving_score(&m);
        assert!(r[1] > r[0] && r[1] > r[2]);
        assert!((r.iter().sum::<f64>() - 3.0).abs() < 1e-12);
        assert!((m.matrix[0][1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn flattened_mode_is_rejected() {
        let (rec, layout) = record(2, 2, |_, _| 1.0);
        let err = temporal_attention(&rec, layout, TokenizationMode::FlattenedChannels).unwrap_err();
        assert_eq!(err.exit_code(), 5);
    }

    fn patch_store(cfg: &ModelConfig, f: impl Fn(usize) -> f64) -> ParamStore<f64> {
        let (_, ch) = cfg.frames_and_channels();
        let pp = cfg.encoder.patch_size * cfg.encoder.patch_size;
        let d = 3;
        let mut s = ParamStore::new();
        s.insert(
            "encoder.patch_embed.weight",
            Tensor::from_vec(&[ch * pp, d], (0..ch * pp * d).map(|i| f(i / d / pp)).collect()),
            true,
        );
        s
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("b{i}")).collect()
    }

    #[test]
    fn spectral_scores() {
        let mut cfg = ModelConfig::default();
        cfg.encoder.patch_size = 2;
        let s = spectral_importance(&patch_store(&cfg, |_| 0.3), &cfg, &names(6)).unwrap();
        assert!(s.scores.iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-12));
        let s = spectral_importance(&patch_store(&cfg, |c| if c == 2 { 0.0 } else { 1.0 }), &cfg, &names(6)).unwrap();
        assert_eq!(s.scores[2], 0.0);
        assert!((s.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        // flattened layout: permuting time steps leaves scores unchanged
        cfg.encoder.tokenization = TokenizationMode::FlattenedChannels;
        let w = |ch: usize| ((ch % 6) as f64 + 1.0) * (1.0 + (ch / 6) as f64 * 0.1);
        let base = spectral_importance(&patch_store(&cfg, w), &cfg, &names(6)).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let permuted = spectral_importance(&patch_store(&cfg, |ch| w(perm[ch / 6] * 6 + ch % 6)), &cfg, &names(6)).unwrap();
        for (a, b) in base.scores.iter().zip(&permuted.scores) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(base.scores[5] > base.scores[0]);
    }

    #[test]
    fn default_layers_are_middle_and_last_taps() {
        let cfg = ModelConfig::default();
        assert_eq!(default_layers(&cfg), vec![4, 8]);
    }

    #[test]
    fn pgm_round_trip_and_perfect_residual() {
        let dir = tempfile::tempdir().unwrap();
        let truth: Vec<f64> = (0..12).map(|v| 1000.0 + 100.0 * v as f64).collect();
        let side = export_maps(&dir.path().join("chip"), "c0", 4, 3, &truth, &truth).unwrap();
        assert_eq!(side.residual.min_kg_ha, 0.0);
        assert_eq!(side.residual.max_kg_ha, 0.0);
        let (w, h, res) = read_pgm16(&dir.path().join("chip_residual.pgm")).unwrap();
        assert_eq!((w, h), (4, 3));
        assert!(res.iter().all(|&v| v == 0));
        let (_, _, pred) = read_pgm16(&dir.path().join("chip_prediction.pgm")).unwrap();
        assert_eq!(pred[0], 0);
        assert_eq!(pred[11], 65535);
        let mut negative = truth.clone();
        negative[0] = -50.0;
        let side = export_maps(&dir.path().join("neg"), "c1", 4, 3, &negative, &truth).unwrap();
        assert!(side.prediction.min_kg_ha >= 0.0);
        let text = fs::read_to_string(dir.path().join("neg.json")).unwrap();
        let back: MapSidecar = serde_json::from_str(&text).unwrap();
        assert_eq!(back, side);
    }
}
