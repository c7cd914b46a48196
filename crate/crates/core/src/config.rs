//! Model, training, loss and data configuration with documented defaults.

use serde::{Deserialize, Serialize};

use crate::chipstore::TokenizationMode;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// 1-based block indices whose outputs feed the decoder, finest level
    /// first. A block may be tapped more than once.
    pub tap_layers: Vec<usize>,
    pub tokenization: TokenizationMode,
    pub location_embedding: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 128,
            depth: 8,
            heads: 4,
            mlp_ratio: 4,
            tap_layers: vec![2, 4, 6, 8],
            tokenization: TokenizationMode::PerTimestep,
            location_embedding: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub fpn_channels: usize,
    pub psp_pool_sizes: Vec<usize>,
    /// Resampling factor applied to each tap, finest first.
    pub scale_factors: Vec<f64>,
    /// 0-based pyramid level exported to the auxiliary head.
    pub aux_level: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            fpn_channels: 64,
            psp_pool_sizes: vec![1, 2, 3, 6],
            scale_factors: vec![4.0, 2.0, 1.0, 0.5],
            aux_level: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub dropout: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { dropout: 0.1 }
    }
}

/// Complete network description, including the chip extent it consumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub head: HeadConfig,
    pub time_steps: usize,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            head: HeadConfig::default(),
            time_steps: 5,
            bands: 6,
            height: 96,
            width: 96,
        }
    }
}

impl ModelConfig {
    /// Frames and channels per frame seen by the patch embedding.
    pub fn frames_and_channels(&self) -> (usize, usize) {
        match self.encoder.tokenization {
            TokenizationMode::PerTimestep => (self.time_steps, self.bands),
            TokenizationMode::FlattenedChannels => (1, self.time_steps * self.bands),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        let p = self.encoder.patch_size;
        (self.height / p, self.width / p)
    }

    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        self.frames_and_channels().0 * gh * gw
    }

    /// Spatial extent of each pyramid level.
    pub fn level_extents(&self) -> Vec<(usize, usize)> {
        let (gh, gw) = self.grid();
        self.decoder
            .scale_factors
            .iter()
            .map(|&s| {
                if s >= 1.0 {
                    (gh * s as usize, gw * s as usize)
                } else {
                    (gh / 2, gw / 2)
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let d = &self.decoder;
        let bad = |m: String| Err(Error::Config(m));
        if e.patch_size == 0 || e.embed_dim == 0 || e.depth == 0 || e.heads == 0 || e.mlp_ratio == 0 {
            return bad("encoder sizes must be positive".into());
        }
        if e.embed_dim % e.heads != 0 {
            return bad(format!("embed_dim {} not divisible by {} heads", e.embed_dim, e.heads));
        }
        if self.height % e.patch_size != 0 || self.width % e.patch_size != 0 {
            return bad(format!(
                "chip extent {}x{} not divisible by patch size {}",
                self.height, self.width, e.patch_size
            ));
        }
        if self.time_steps == 0 || self.bands == 0 {
            return bad("time_steps and bands must be positive".into());
        }
        if e.tap_layers.is_empty()
            || e.tap_layers.windows(2).any(|w| w[0] > w[1])
            || e.tap_layers[0] == 0
            || *e.tap_layers.last().unwrap() > e.depth
        {
            return bad(format!(
                "tap layers {:?} must be non-decreasing within 1..={}",
                e.tap_layers, e.depth
            ));
        }
        if d.scale_factors.len() != e.tap_layers.len() {
            return bad(format!(
                "{} scale factors for {} taps",
                d.scale_factors.len(),
                e.tap_layers.len()
            ));
        }
        if let Some(s) = d.scale_factors.iter().find(|s| ![4.0, 2.0, 1.0, 0.5].contains(*s)) {
            return bad(format!("unsupported pyramid scale {s}"));
        }
        if d.scale_factors.windows(2).any(|w| w[0] <= w[1]) {
            return bad("scale factors must run fine to coarse".into());
        }
        if d.fpn_channels < 4 {
            return bad("fpn_channels must be >= 4".into());
        }
        if d.psp_pool_sizes.is_empty() || d.psp_pool_sizes.windows(2).any(|w| w[0] >= w[1]) || d.psp_pool_sizes[0] == 0 {
            return bad(format!("psp pool sizes {:?} must be ascending", d.psp_pool_sizes));
        }
        if d.aux_level >= d.scale_factors.len() {
            return bad(format!("aux level {} out of range", d.aux_level));
        }
        let extents = self.level_extents();
        if extents.iter().any(|&(h, w)| h == 0 || w == 0) {
            return bad("patch grid too small for the 0.5x pyramid level".into());
        }
        let max_pool = *d.psp_pool_sizes.last().unwrap();
        let (fh, fw) = extents[0];
        let (ah, aw) = extents[d.aux_level];
        if fh.min(fw) < max_pool || ah.min(aw) < max_pool {
            return bad(format!(
                "feature extent too small for pool size {max_pool} (finest {fh}x{fw}, aux {ah}x{aw})"
            ));
        }
        if !(0.0..1.0).contains(&self.head.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.head.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LossMode {
    Mse,
    Huber,
    MseAux,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace(['-', '+'], "_").as_str() {
            "MSE" => Ok(LossMode::Mse),
            "HUBER" => Ok(LossMode::Huber),
            "MSE_AUX" => Ok(LossMode::MseAux),
            _ => Err(Error::Config(format!("unknown loss mode '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub mode: LossMode,
    /// Huber threshold in standardized-yield units.
    pub huber_delta: f64,
    pub aux_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::MseAux,
            huber_delta: 1.0,
            aux_weight: 0.2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.huber_delta > 0.0) {
            return Err(Error::Config(format!("huber delta {} must be > 0", self.huber_delta)));
        }
        if !(self.aux_weight >= 0.0) {
            return Err(Error::Config("aux weight must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub epsilon: f64,
    pub seed: u64,
    /// Flip probability of the on-the-fly augmentation.
    pub augment_p: f64,
    /// Batch size used for validation passes.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr_max: 3e-4,
            lr_min: 1e-8,
            weight_decay: 0.1,
            betas: (0.9, 0.999),
            epsilon: 1e-8,
            seed: 0,
            augment_p: 0.2,
            eval_batch_size: 8,
        }
    }
}

impl TrainConfig {
    /// The published fine-tuning schedule (120 epochs, 5e-6 → 1e-8).
    pub fn reference_schedule() -> Self {
        Self {
            epochs: 120,
            lr_max: 5e-6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.lr_max > self.lr_min && self.lr_min > 0.0) {
            return Err(Error::Config(format!(
                "need lr_max > lr_min > 0, got {} and {}",
                self.lr_max, self.lr_min
            )));
        }
        if !(0.0..=1.0).contains(&self.augment_p) {
            return Err(Error::Config("augment_p outside [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Everything a run needs, loadable from one JSON file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("run config", e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        let m = ModelConfig::default();
        assert_eq!(m.grid(), (6, 6));
        assert_eq!(m.tokens(), 180);
        assert_eq!(m.level_extents(), vec![(24, 24), (12, 12), (6, 6), (3, 3)]);
        let big = ModelConfig {
            height: 224,
            width: 224,
            ..ModelConfig::default()
        };
        assert_eq!(big.tokens(), 980);
        assert_eq!(big.level_extents(), vec![(56, 56), (28, 28), (14, 14), (7, 7)]);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::from_json(r#"{"train": {"epochs": 3, "bogus": 1}}"#).is_err());
        let c = RunConfig::from_json(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, 8);
        let mut m = ModelConfig::default();
        m.height = 100;
        assert!(m.validate().is_err());
        let mut m = ModelConfig::default();
        m.encoder.heads = 5;
        assert!(m.validate().is_err());
        let mut m = ModelConfig::default();
        m.encoder.tap_layers = vec![2, 6, 4, 8];
        assert!(m.validate().is_err());
        let t = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(t.validate().is_err());
    }

    #[test]
    fn loss_mode_parsing() {
        assert_eq!("mse_aux".parse::<LossMode>().unwrap(), LossMode::MseAux);
        assert_eq!("MSE+AUX".parse::<LossMode>().unwrap(), LossMode::MseAux);
        assert_eq!("huber".parse::<LossMode>().unwrap(), LossMode::Huber);
        assert!("mae".parse::<LossMode>().is_err());
    }
}
