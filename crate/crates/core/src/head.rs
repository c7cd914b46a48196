//! Regression heads turning decoder features into full-resolution yield maps.
//!
//! Main head: two conv-BN-ReLU-dropout stages narrowing the channel count,
//! a 3×3 conv to one channel and bilinear upsampling to the chip extent.
//! Auxiliary head: pyramid pooling at half width, one conv-ReLU stage and a
//! 1×1 conv to one channel.

use rand::Rng;

use crate::config::ModelConfig;
use crate::decoder::{init_psp, psp};
use crate::graph::{Graph, ResizeMode, Var};
use crate::params::{fan_in_normal, Bound, ParamStore};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_LAYERS: [&str; 2] = ["head.bn1", "head.bn2"];

/// Training mode samples dropout masks and normalizes with batch
/// statistics; evaluation uses running statistics and no dropout.
pub enum HeadMode<'a, R: Rng> {
    Train(&'a mut R),
    Eval,
}

pub struct HeadOutput {
    /// `[B, 1, H, W]`.
    pub prediction: Var,
    /// Batch-norm nodes in [`BN_LAYERS`] order.
    pub bn_nodes: Vec<Var>,
}

fn widths(fpn: usize) -> (usize, usize) {
    ((fpn / 2).max(1), (fpn / 4).max(1))
}

fn conv<F: Real>(store: &mut ParamStore<F>, name: &str, cin: usize, cout: usize, k: usize, bias: bool, rng: &mut impl Rng) {
    store.insert(format!("{name}.weight"), fan_in_normal(&[cout, cin, k, k], cin * k * k, rng), true);
    if bias {
        store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]), false);
    }
}

/// Registers head parameters in `params` and batch-norm running statistics
/// in `buffers`.
pub fn init_head<F: Real>(cfg: &ModelConfig, params: &mut ParamStore<F>, buffers: &mut ParamStore<F>, rng: &mut impl Rng) {
    let fpn = cfg.decoder.fpn_channels;
    let (c1, c2) = widths(fpn);
    conv(params, "head.conv1", fpn, c1, 3, false, rng);
    conv(params, "head.conv2", c1, c2, 3, false, rng);
    conv(params, "head.conv3", c2, 1, 3, true, rng);
    for (name, c) in BN_LAYERS.iter().zip([c1, c2]) {
        params.insert(format!("{name}.weight"), Tensor::full(&[c], F::one()), false);
        params.insert(format!("{name}.bias"), Tensor::zeros(&[c]), false);
        buffers.insert(format!("{name}.running_mean"), Tensor::zeros(&[c]), false);
        buffers.insert(format!("{name}.running_var"), Tensor::full(&[c], F::one()), false);
    }
}

pub fn init_aux_head<F: Real>(cfg: &ModelConfig, params: &mut ParamStore<F>, rng: &mut impl Rng) {
    let fpn = cfg.decoder.fpn_channels;
    let half = widths(fpn).0;
    init_psp(params, "aux.psp", &cfg.decoder.psp_pool_sizes, fpn, half, rng);
    conv(params, "aux.conv1", half, half, 3, true, rng);
    conv(params, "aux.conv2", half, 1, 1, true, rng);
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`,
/// otherwise `1/(1-rate)`.
pub fn dropout_mask<F: Real>(len: usize, rate: f64, rng: &mut impl Rng) -> Vec<F> {
    let keep = F::of(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { F::zero() } else { keep })
        .collect()
}

/// Main head over the decoder output.
pub fn head_forward<F: Real, R: Rng>(
    g: &mut Graph<F>,
    p: &Bound,
    buffers: &ParamStore<F>,
    cfg: &ModelConfig,
    features: Var,
    mode: &mut HeadMode<'_, R>,
) -> HeadOutput {
    let rate = cfg.head.dropout;
    let mut x = features;
    let mut bn_nodes = Vec::with_capacity(2);
    for (i, bn) in BN_LAYERS.iter().enumerate() {
        x = g.conv2d(x, p.get(&format!("head.conv{}.weight", i + 1)), None, 1, 1);
        let running = match mode {
            HeadMode::Train(_) => None,
            HeadMode::Eval => Some((
                buffers.tensor(&format!("{bn}.running_mean")).data(),
                buffers.tensor(&format!("{bn}.running_var")).data(),
            )),
        };
        x = g.batch_norm(
            x,
            p.get(&format!("{bn}.weight")),
            p.get(&format!("{bn}.bias")),
            running,
            BN_EPS,
        );
        bn_nodes.push(x);
        x = g.relu(x);
        if let HeadMode::Train(rng) = mode {
            if rate > 0.0 {
                let mask = dropout_mask(g.value(x).len(), rate, &mut **rng);
                x = g.dropout(x, mask);
            }
        }
    }
    x = g.conv2d(x, p.get("head.conv3.weight"), Some(p.get("head.conv3.bias")), 1, 1);
    let prediction = g.resize(x, cfg.height, cfg.width, ResizeMode::Bilinear);
    HeadOutput { prediction, bn_nodes }
}

/// Auxiliary head over an intermediate decoder level; `[B, 1, H, W]`.
pub fn aux_forward<F: Real>(g: &mut Graph<F>, p: &Bound, cfg: &ModelConfig, features: Var) -> Var {
    let x = psp(g, p, "aux.psp", &cfg.decoder.psp_pool_sizes, features);
    let x = g.conv2d(x, p.get("aux.conv1.weight"), Some(p.get("aux.conv1.bias")), 1, 1);
    let x = g.relu(x);
    let x = g.conv2d(x, p.get("aux.conv2.weight"), Some(p.get("aux.conv2.bias")), 1, 0);
    g.resize(x, cfg.height, cfg.width, ResizeMode::Bilinear)
}

/// Exponential moving update of running statistics from a training-mode
/// batch-norm node.
pub fn update_running_stats<F: Real>(g: &Graph<F>, bn_nodes: &[Var], buffers: &mut ParamStore<F>) {
    let m = F::of(BN_MOMENTUM);
    for (name, &node) in BN_LAYERS.iter().zip(bn_nodes) {
        let Some((mean, var)) = g.batchnorm_stats(node) else { continue };
        let (mean, var) = (mean.to_vec(), var.to_vec());
        for (key, stat) in [("running_mean", mean), ("running_var", var)] {
            let buf = buffers
                .get_mut(&format!("{name}.{key}"))
                .expect("batch-norm buffer registered");
            for (r, s) in buf.data_mut().iter_mut().zip(stat) {
                *r = (F::one() - m) * *r + m * s;
            }
        }
    }
}
