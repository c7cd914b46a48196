//! The assembled network: encoder, decoder, main and auxiliary heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::chipstore::Sample;
use crate::config::ModelConfig;
use crate::decoder::{decode, init_decoder};
use crate::encoder::{encode, init_encoder, AttentionRecord};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::head::{aux_forward, head_forward, init_aux_head, init_head, HeadMode};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Real, Tensor};

/// A stacked mini-batch ready for the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<F> {
    /// `[B, frames, channels, H, W]`.
    pub input: Tensor<F>,
    /// `[B, 2]`: latitude / 90 and longitude / 180.
    pub latlon: Tensor<F>,
    /// `[B, 1, H, W]` flattened.
    pub target: Vec<F>,
}

impl<F: Real> Batch<F> {
    pub fn len(&self) -> usize {
        self.input.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<Self> {
        let mut shape: Option<[usize; 4]> = None;
        let (mut input, mut latlon, mut target) = (Vec::new(), Vec::new(), Vec::new());
        let mut b = 0;
        for s in samples {
            match shape {
                None => shape = Some(s.shape),
                Some(sh) if sh != s.shape => {
                    return Err(Error::Shape(format!("batch mixes {:?} and {:?}", sh, s.shape)));
                }
                _ => {}
            }
            input.extend(s.input.iter().map(|&v| F::of(v as f64)));
            target.extend(s.target.iter().map(|&v| F::of(v as f64)));
            latlon.push(F::of(s.latlon[0] as f64 / 90.0));
            latlon.push(F::of(s.latlon[1] as f64 / 180.0));
            b += 1;
        }
        let [f, c, h, w] = shape.ok_or_else(|| Error::Shape("empty batch".into()))?;
        Ok(Self {
            input: Tensor::from_vec(&[b, f, c, h, w], input),
            latlon: Tensor::from_vec(&[b, 2], latlon),
            target,
        })
    }
}

pub struct ForwardOutput {
    /// `[B, 1, H, W]` standardized yield.
    pub prediction: Var,
    pub aux: Option<Var>,
    pub bn_nodes: Vec<Var>,
    pub attention: Vec<AttentionRecord>,
}

/// Parameters, batch-norm buffers and the configuration they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<F: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    pub buffers: ParamStore<F>,
}

impl<F: Real> Model<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        init_encoder(&config, &mut params, &mut rng);
        init_decoder(&config, &mut params, &mut rng);
        init_head(&config, &mut params, &mut buffers, &mut rng);
        init_aux_head(&config, &mut params, &mut rng);
        Ok(Self { config, params, buffers })
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            buffers: self.buffers.cast(),
        }
    }

    pub fn check_input(&self, input: &Tensor<F>) -> Result<()> {
        let (f, c) = self.config.frames_and_channels();
        let want = [f, c, self.config.height, self.config.width];
        if input.shape().len() != 5 || input.shape()[1..] != want {
            return Err(Error::Shape(format!(
                "model expects [B, {f}, {c}, {}, {}], got {:?}",
                self.config.height,
                self.config.width,
                input.shape()
            )));
        }
        Ok(())
    }

    /// Builds the forward graph. `with_aux` adds the auxiliary head; `capture`
    /// copies attention probabilities out (the graph must retain them).
    pub fn forward<R: rand::Rng>(
        &self,
        g: &mut Graph<F>,
        bound: &Bound,
        batch: &Batch<F>,
        mode: &mut HeadMode<'_, R>,
        with_aux: bool,
        capture: bool,
    ) -> Result<ForwardOutput> {
        self.check_input(&batch.input)?;
        let x = g.constant(batch.input.clone());
        let ll = self
            .config
            .encoder
            .location_embedding
            .then(|| g.constant(batch.latlon.clone()));
        let enc = encode(g, bound, &self.config, x, ll, capture)?;
        let dec = decode(g, bound, &self.config, &enc.taps)?;
        let head = head_forward(g, bound, &self.buffers, &self.config, dec.main, mode);
        let aux = with_aux.then(|| aux_forward(g, bound, &self.config, dec.aux));
        Ok(ForwardOutput {
            prediction: head.prediction,
            aux,
            bn_nodes: head.bn_nodes,
            attention: enc.attention,
        })
    }

    /// Evaluation-mode prediction, `[B, 1, H, W]` standardized.
    pub fn predict(&self, batch: &Batch<F>, capture: bool) -> Result<(Tensor<F>, Vec<AttentionRecord>)> {
        let mut g = Graph::inference().with_attention_capture(capture);
        let bound = self.params.bind(&mut g);
        let out = self.forward::<ChaCha8Rng>(&mut g, &bound, batch, &mut HeadMode::Eval, false, capture)?;
        Ok((g.value(out.prediction).clone(), out.attention))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chipstore::TokenizationMode;
    use crate::config::{DecoderConfig, EncoderConfig, HeadConfig};
    use rand::Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                patch_size: 4,
                embed_dim: 8,
                depth: 2,
                heads: 2,
                mlp_ratio: 2,
                tap_layers: vec![1, 2],
                tokenization: TokenizationMode::PerTimestep,
                location_embedding: false,
            },
            decoder: DecoderConfig {
                fpn_channels: 8,
                psp_pool_sizes: vec![1, 2],
                scale_factors: vec![2.0, 1.0],
                aux_level: 1,
            },
            head: HeadConfig { dropout: 0.0 },
            time_steps: 2,
            bands: 2,
            height: 16,
            width: 16,
        }
    }

    fn batch(cfg: &ModelConfig, b: usize, seed: u64) -> Batch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, c) = cfg.frames_and_channels();
        let n = b * f * c * cfg.height * cfg.width;
        let hw = cfg.height * cfg.width;
        Batch {
            input: Tensor::from_vec(&[b, f, c, cfg.height, cfg.width], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            latlon: Tensor::from_vec(&[b, 2], (0..2 * b).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            target: (0..b * hw).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn end_to_end_shapes() {
        let cfg = tiny_config();
        let m = Model::<f64>::new(cfg.clone(), 0).unwrap();
        let (pred, att) = m.predict(&batch(&cfg, 3, 1), true).unwrap();
        assert_eq!(pred.shape(), &[3, 1, 16, 16]);
        assert_eq!(att.len(), 2);
        assert_eq!(att[0].tokens, 2 * 16);
        let bad = Batch {
            input: Tensor::zeros(&[1, 2, 2, 12, 16]),
            ..batch(&cfg, 1, 2)
        };
        assert!(m.predict(&bad, false).is_err());
    }

    #[test]
    fn default_model_shapes() {
        let m = Model::<f32>::new(ModelConfig::default(), 0).unwrap();
        let b = Batch {
            input: Tensor::zeros(&[1, 5, 6, 96, 96]),
            latlon: Tensor::zeros(&[1, 2]),
            target: vec![0.0; 96 * 96],
        };
        let (p, _) = m.predict(&b, false).unwrap();
        assert_eq!(p.shape(), &[1, 1, 96, 96]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = tiny_config();
        assert_eq!(Model::<f32>::new(cfg.clone(), 7).unwrap(), Model::<f32>::new(cfg.clone(), 7).unwrap());
        assert_ne!(Model::<f32>::new(cfg.clone(), 7).unwrap(), Model::<f32>::new(cfg, 8).unwrap());
    }
}
