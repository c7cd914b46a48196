//! UperNet-style decoder: token maps are resampled into a four-level
//! pyramid, merged top-down (FPN), pooled at several scales (PSP) and fused
//! into one dense feature map at the finest level.

use rand::Rng;

use crate::config::ModelConfig;
use crate::encoder::TokenSequence;
use crate::error::{Error, Result};
use crate::graph::{Graph, ResizeMode, Var};
use crate::params::{fan_in_normal, Bound, ParamStore};
use crate::tensor::{Real, Tensor};

pub struct DecoderOutput {
    /// `[B, fpn, h0, w0]` at the finest pyramid level.
    pub main: Var,
    /// Refined FPN output of the auxiliary level.
    pub aux: Var,
    /// Pyramid maps before the FPN, finest first.
    pub pyramid: Vec<Var>,
    /// Per-level FPN outputs, finest first.
    pub fpn: Vec<Var>,
}

fn conv<F: Real>(store: &mut ParamStore<F>, name: &str, cin: usize, cout: usize, k: usize, bias: bool, rng: &mut impl Rng) {
    store.insert(format!("{name}.weight"), fan_in_normal(&[cout, cin, k, k], cin * k * k, rng), true);
    if bias {
        store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]), false);
    }
}

fn conv_t<F: Real>(store: &mut ParamStore<F>, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) {
    store.insert(format!("{name}.weight"), fan_in_normal(&[cin, cout, 2, 2], cin, rng), true);
    store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]), false);
}

/// Registers parameters of a pyramid pooling module reading `cin` channels
/// and producing `cout`.
pub(crate) fn init_psp<F: Real>(
    store: &mut ParamStore<F>,
    prefix: &str,
    pools: &[usize],
    cin: usize,
    cout: usize,
    rng: &mut impl Rng,
) {
    for i in 0..pools.len() {
        conv(store, &format!("{prefix}.branch.{i}"), cin, cout, 1, true, rng);
    }
    conv(store, &format!("{prefix}.fuse"), cin + pools.len() * cout, cout, 3, true, rng);
}

fn pyramid_widths(d: usize, scale: f64) -> Vec<usize> {
    if scale == 4.0 {
        vec![d, (d / 2).max(1), (d / 4).max(1)]
    } else if scale == 2.0 {
        vec![d, (d / 2).max(1)]
    } else {
        vec![d]
    }
}

pub fn init_decoder<F: Real>(cfg: &ModelConfig, store: &mut ParamStore<F>, rng: &mut impl Rng) {
    let d = cfg.encoder.embed_dim;
    let dc = &cfg.decoder;
    let fpn = dc.fpn_channels;
    for (k, &s) in dc.scale_factors.iter().enumerate() {
        let widths = pyramid_widths(d, s);
        for (i, w) in widths.windows(2).enumerate() {
            conv_t(store, &format!("decoder.pyramid.{k}.up{}", i + 1), w[0], w[1], rng);
        }
        conv(store, &format!("decoder.pyramid.{k}.proj"), *widths.last().unwrap(), fpn, 1, true, rng);
    }
    let levels = dc.scale_factors.len();
    for k in 0..levels {
        conv(store, &format!("decoder.fpn.lateral.{k}"), fpn, fpn, 1, true, rng);
    }
    for k in 0..levels - 1 {
        conv(store, &format!("decoder.fpn.refine.{k}"), fpn, fpn, 3, true, rng);
    }
    init_psp(store, "decoder.psp", &dc.psp_pool_sizes, levels * fpn, fpn, rng);
    conv(store, "decoder.bottleneck", fpn, fpn, 3, true, rng);
}

fn apply_conv<F: Real>(g: &mut Graph<F>, p: &Bound, name: &str, x: Var, pad: usize) -> Var {
    let w = p.get(&format!("{name}.weight"));
    let b = p.try_get(&format!("{name}.bias"));
    g.conv2d(x, w, b, 1, pad)
}

/// Resamples one token map by `scale` (4, 2, 1 or 0.5) and projects it to
/// the FPN width.
pub fn pyramid_level<F: Real>(g: &mut Graph<F>, p: &Bound, level: usize, scale: f64, map: Var) -> Result<Var> {
    let pre = format!("decoder.pyramid.{level}");
    let mut x = map;
    let ups = if scale == 4.0 {
        2
    } else if scale == 2.0 {
        1
    } else if scale == 1.0 {
        0
    } else if scale == 0.5 {
        x = g.max_pool2(x);
        0
    } else {
        return Err(Error::Config(format!("unsupported pyramid scale {scale}")));
    };
    for i in 1..=ups {
        x = g.conv_transpose2(
            x,
            p.get(&format!("{pre}.up{i}.weight")),
            Some(p.get(&format!("{pre}.up{i}.bias"))),
        );
    }
    Ok(apply_conv(g, p, &format!("{pre}.proj"), x, 0))
}

/// Builds the multi-scale pyramid from encoder taps (finest first).
pub fn build_pyramid<F: Real>(g: &mut Graph<F>, p: &Bound, cfg: &ModelConfig, taps: &[TokenSequence]) -> Result<Vec<Var>> {
    let scales = &cfg.decoder.scale_factors;
    if taps.len() != scales.len() {
        return Err(Error::Shape(format!("{} taps for {} pyramid levels", taps.len(), scales.len())));
    }
    taps.iter()
        .zip(scales)
        .enumerate()
        .map(|(k, (tap, &s))| {
            let l = tap.layout;
            let map = g.tokens_to_map(tap.var, l.frames, l.grid_h, l.grid_w);
            pyramid_level(g, p, k, s, map)
        })
        .collect()
}

/// Top-down merge: lateral 1×1 on every level, coarser results upsampled
/// (nearest) and added, then 3×3 refinement on all but the coarsest.
pub fn fpn_fuse<F: Real>(g: &mut Graph<F>, p: &Bound, levels: &[Var]) -> Vec<Var> {
    let n = levels.len();
    let lateral: Vec<Var> = levels
        .iter()
        .enumerate()
        .map(|(k, &x)| apply_conv(g, p, &format!("decoder.fpn.lateral.{k}"), x, 0))
        .collect();
    let mut inner = vec![lateral[n - 1]; n];
    for k in (0..n - 1).rev() {
        let s = g.shape(lateral[k]).to_vec();
        let up = g.resize(inner[k + 1], s[2], s[3], ResizeMode::Nearest);
        inner[k] = g.add(lateral[k], up);
    }
    (0..n)
        .map(|k| {
            if k + 1 < n {
                apply_conv(g, p, &format!("decoder.fpn.refine.{k}"), inner[k], 1)
            } else {
                inner[k]
            }
        })
        .collect()
}

/// Pyramid pooling: adaptive average pools, 1×1 projections, bilinear
/// upsampling, concatenation with the input and a 3×3 fusion conv.
pub fn psp<F: Real>(g: &mut Graph<F>, p: &Bound, prefix: &str, pools: &[usize], x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let mut parts = vec![x];
    for (i, &size) in pools.iter().enumerate() {
        let pooled = g.adaptive_avg_pool(x, size);
        let proj = apply_conv(g, p, &format!("{prefix}.branch.{i}"), pooled, 0);
        parts.push(g.resize(proj, s[2], s[3], ResizeMode::Bilinear));
    }
    let cat = g.concat_channels(&parts);
    apply_conv(g, p, &format!("{prefix}.fuse"), cat, 1)
}

pub fn decode<F: Real>(g: &mut Graph<F>, p: &Bound, cfg: &ModelConfig, taps: &[TokenSequence]) -> Result<DecoderOutput> {
    let pyramid = build_pyramid(g, p, cfg, taps)?;
    let fpn = fpn_fuse(g, p, &pyramid);
    let s = g.shape(fpn[0]).to_vec();
    let resized: Vec<Var> = fpn
        .iter()
        .map(|&f| {
            if g.shape(f)[2..] == s[2..] {
                f
            } else {
                g.resize(f, s[2], s[3], ResizeMode::Bilinear)
            }
        })
        .collect();
    let cat = g.concat_channels(&resized);
    let pooled = psp(g, p, "decoder.psp", &cfg.decoder.psp_pool_sizes, cat);
    let main = apply_conv(g, p, "decoder.bottleneck", pooled, 1);
    Ok(DecoderOutput {
        main,
        aux: fpn[cfg.decoder.aux_level],
        pyramid,
        fpn,
    })
}
