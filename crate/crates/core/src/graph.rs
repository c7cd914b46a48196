//! Tape-based reverse-mode differentiation over batched tensors.
//!
//! Every node stores its forward value. Ops that need intermediate state for
//! the backward pass (attention probabilities, normalization statistics,
//! pooling arg-maxes) keep it inside the op record. Work is split per batch
//! sample, so results do not depend on the rayon thread count; weight
//! gradients are reduced over samples in a fixed order.

use rayon::prelude::*;

use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeMode {
    Bilinear,
    Nearest,
}

enum Op<F> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    AddBroadcast { x: Var, e: Var },
    AddPerSample { x: Var, v: Var },
    SpatioTemporal { pos: Var, temporal: Option<Var>, frames: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<F>, rstd: Vec<F> },
    Gelu(Var),
    Relu(Var),
    Attention { qkv: Var, heads: usize, probs: Option<Vec<F>> },
    Patchify { x: Var, frames: usize, channels: usize, h: usize, w: usize, patch: usize },
    TokensToMap { x: Var, frames: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvTranspose2 { x: Var, w: Var, b: Option<Var> },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    AdaptiveAvgPool { x: Var },
    Resize { x: Var, mode: ResizeMode },
    Concat { xs: Vec<Var> },
    BatchNorm { x: Var, gamma: Var, beta: Var, invstd: Vec<F>, mean: Vec<F>, var: Vec<F>, training: bool },
    Dropout { x: Var, mask: Vec<F> },
    Scale { x: Var, s: F },
    Mse { pred: Var, target: Vec<F> },
    Huber { pred: Var, target: Vec<F>, delta: F },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// A recorded computation.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    record: bool,
    capture_attention: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn batch_split(shape: &[usize]) -> (usize, usize) {
    let b = shape[0];
    let per = shape[1..].iter().product();
    (b, per)
}

fn map_extent(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected [B, C, H, W], got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

impl<F: Real> Graph<F> {
    /// A graph that records what backward needs.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            capture_attention: false,
        }
    }

    /// Forward-only graph: no backward state is kept.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
            capture_attention: false,
        }
    }

    /// Keep attention probabilities even on a forward-only graph.
    pub fn with_attention_capture(mut self, on: bool) -> Self {
        self.capture_attention = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = self.record && inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        let needs_grad = self.record;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Attention probabilities `[B, heads, N, N]` kept by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<(&[F], usize)> {
        match &self.nodes[v.0].op {
            Op::Attention { probs: Some(p), heads, .. } => Some((p.as_slice(), *heads)),
            _ => None,
        }
    }

    /// Batch mean and unbiased batch variance of a training-mode batch-norm node.
    pub fn batchnorm_stats(&self, v: Var) -> Option<(&[F], &[F])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mean, var, training: true, .. } => Some((mean, var)),
            _ => None,
        }
    }

    // ---------------------------------------------------------------- ops

    /// `x[..., Din] @ w[Din, Dout] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let din = *xs.last().unwrap();
        assert_eq!(ws[0], din, "linear: input dim {din} vs weight {ws:?}");
        let dout = ws[1];
        let rows = self.value(x).len() / din;
        let batch = xs[0].max(1);
        let rows_per = rows / batch;
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = dout;
        let mut out = vec![F::zero(); rows * dout];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            out.par_chunks_mut(rows_per * dout)
                .zip(xv.par_chunks(rows_per * din))
                .for_each(|(o, xi)| {
                    if let Some(bv) = bv {
                        for row in o.chunks_mut(dout) {
                            row.copy_from_slice(bv);
                        }
                    }
                    matmul_into(rows_per, din, dout, xi, wv, o, bv.is_some());
                });
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::from_vec(&out_shape, out), Op::Linear { x, w, b }, &inputs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_vec(&shape, out), Op::Add(a, b), &[a, b])
    }

    /// `x[B, M, D] + e[M, D]`.
    pub fn add_broadcast(&mut self, x: Var, e: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let per = self.value(e).len();
        assert_eq!(per, self.value(x).len() / shape[0], "add_broadcast: table size mismatch");
        let ev = self.value(e).data();
        let out: Vec<F> = self
            .value(x)
            .data()
            .chunks(per)
            .flat_map(|c| c.iter().zip(ev).map(|(&a, &b)| a + b))
            .collect();
        self.push(Tensor::from_vec(&shape, out), Op::AddBroadcast { x, e }, &[x, e])
    }

    /// `x[B, M, D] + v[B, D]`, same vector for every row of a sample.
    pub fn add_per_sample(&mut self, x: Var, v: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let (b, per) = batch_split(&shape);
        assert_eq!(self.shape(v), &[b, d], "add_per_sample: vector shape");
        let vv = self.value(v).data();
        let mut out = self.value(x).data().to_vec();
        for (bi, chunk) in out.chunks_mut(per).enumerate() {
            let row_v = &vv[bi * d..(bi + 1) * d];
            for row in chunk.chunks_mut(d) {
                for (o, &a) in row.iter_mut().zip(row_v) {
                    *o = *o + a;
                }
            }
        }
        self.push(Tensor::from_vec(&shape, out), Op::AddPerSample { x, v }, &[x, v])
    }

    /// Builds the `[frames * G, D]` table `pos[g] + temporal[f]`.
    pub fn spatio_temporal(&mut self, pos: Var, temporal: Option<Var>, frames: usize) -> Var {
        let ps = self.shape(pos).to_vec();
        let (g, d) = (ps[0], ps[1]);
        if let Some(t) = temporal {
            assert_eq!(self.shape(t), &[frames, d], "temporal table shape");
        }
        let pv = self.value(pos).data();
        let tv = temporal.map(|t| self.value(t).data());
        let mut out = Vec::with_capacity(frames * g * d);
        for f in 0..frames {
            for gi in 0..g {
                for di in 0..d {
                    let mut v = pv[gi * d + di];
                    if let Some(tv) = tv {
                        v = v + tv[f * d + di];
                    }
                    out.push(v);
                }
            }
        }
        let mut inputs = vec![pos];
        inputs.extend(temporal);
        self.push(
            Tensor::from_vec(&[frames * g, d], out),
            Op::SpatioTemporal { pos, temporal, frames },
            &inputs,
        )
    }

    /// Normalizes the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let rows = xv.len() / d;
        let mut out = vec![F::zero(); xv.len()];
        let mut mean = vec![F::zero(); rows];
        let mut rstd = vec![F::zero(); rows];
        let inv_d = 1.0 / d as f64;
        out.chunks_mut(d)
            .zip(xv.chunks(d))
            .zip(mean.iter_mut().zip(rstd.iter_mut()))
            .for_each(|((o, xr), (m, r))| {
                let mu = xr.iter().map(|v| v.f64()).sum::<f64>() * inv_d;
                let var = xr.iter().map(|v| (v.f64() - mu).powi(2)).sum::<f64>() * inv_d;
                let rs = 1.0 / (var + eps).sqrt();
                *m = F::of(mu);
                *r = F::of(rs);
                let (muf, rsf) = (*m, *r);
                for ((oi, &xi), (&g, &b)) in o.iter_mut().zip(xr).zip(gv.iter().zip(bv)) {
                    *oi = (xi - muf) * rsf * g + b;
                }
            });
        self.push(
            Tensor::from_vec(&shape, out),
            Op::LayerNorm { x, gamma, beta, mean, rstd },
            &[x, gamma, beta],
        )
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let out: Vec<F> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| {
                let z = v.f64();
                F::of(z * normal_cdf(z))
            })
            .collect();
        self.push(Tensor::from_vec(&shape, out), Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let out: Vec<F> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        self.push(Tensor::from_vec(&shape, out), Op::Relu(x), &[x])
    }

    /// Scaled dot-product self-attention core. `qkv` is `[B, N, 3D]` laid out
    /// as `[q | k | v]`; output is `[B, N, D]` with heads concatenated.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Var {
        let s = self.shape(qkv).to_vec();
        let (b, n, d3) = (s[0], s[1], s[2]);
        let d = d3 / 3;
        assert_eq!(d % heads, 0, "attention: dim {d} not divisible by {heads} heads");
        let dk = d / heads;
        let scale = F::of(1.0 / (dk as f64).sqrt());
        let keep = self.record || self.capture_attention;
        let mut out = vec![F::zero(); b * n * d];
        let mut probs = vec![F::zero(); if keep { b * heads * n * n } else { 0 }];
        let qv = self.value(qkv).data();
        let mut scratch_probs: Vec<Vec<F>> = Vec::new();
        if !keep {
            scratch_probs = (0..b).map(|_| vec![F::zero(); heads * n * n]).collect();
        }
        let prob_chunks: Vec<&mut [F]> = if keep {
            probs.chunks_mut(heads * n * n).collect()
        } else {
            scratch_probs.iter_mut().map(|v| v.as_mut_slice()).collect()
        };
        out.par_chunks_mut(n * d)
            .zip(qv.par_chunks(n * d3))
            .zip(prob_chunks.into_par_iter())
            .for_each(|((o, x), p)| {
                for h in 0..heads {
                    let ph = &mut p[h * n * n..(h + 1) * n * n];
                    F::gemm(
                        n,
                        dk,
                        n,
                        scale,
                        &x[h * dk..],
                        (d3 as isize, 1),
                        &x[d + h * dk..],
                        (1, d3 as isize),
                        F::zero(),
                        ph,
                        (n as isize, 1),
                    );
                    for row in ph.chunks_mut(n) {
                        softmax_in_place(row);
                    }
                    F::gemm(
                        n,
                        n,
                        dk,
                        F::one(),
                        ph,
                        (n as isize, 1),
                        &x[2 * d + h * dk..],
                        (d3 as isize, 1),
                        F::zero(),
                        &mut o[h * dk..],
                        (d as isize, 1),
                    );
                }
            });
        let probs = if keep { Some(probs) } else { None };
        self.push(
            Tensor::from_vec(&[b, n, d], out),
            Op::Attention { qkv, heads, probs },
            &[qkv],
        )
    }

    /// `[B, F, C, H, W]` → `[B, F*(H/p)*(W/p), C*p*p]`; token index is
    /// frame-major then row-major over the patch grid, feature index is
    /// `c*p*p + py*p + px`.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 5, "patchify expects [B, F, C, H, W]");
        let (b, frames, channels, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        assert!(h % patch == 0 && w % patch == 0, "patchify: extent not divisible by patch");
        let (gh, gw) = (h / patch, w / patch);
        let feat = channels * patch * patch;
        let tokens = frames * gh * gw;
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); b * tokens * feat];
        out.par_chunks_mut(tokens * feat)
            .zip(xv.par_chunks(frames * channels * h * w))
            .for_each(|(o, xi)| {
                for_each_patch_element(frames, channels, h, w, patch, |src, dst| o[dst] = xi[src]);
            });
        self.push(
            Tensor::from_vec(&[b, tokens, feat], out),
            Op::Patchify { x, frames, channels, h, w, patch },
            &[x],
        )
    }

    /// `[B, F*gh*gw, D]` → `[B, D, gh, gw]`, averaging the `F` frames.
    pub fn tokens_to_map(&mut self, x: Var, frames: usize, gh: usize, gw: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (b, n, d) = (s[0], s[1], s[2]);
        let g = gh * gw;
        assert_eq!(n, frames * g, "tokens_to_map: {n} tokens vs {frames}x{gh}x{gw}");
        let xv = self.value(x).data();
        let inv = F::of(1.0 / frames as f64);
        let mut out = vec![F::zero(); b * d * g];
        for bi in 0..b {
            for f in 0..frames {
                for gi in 0..g {
                    let src = &xv[(bi * n + f * g + gi) * d..][..d];
                    for (di, &v) in src.iter().enumerate() {
                        let o = &mut out[(bi * d + di) * g + gi];
                        *o = *o + v * inv;
                    }
                }
            }
        }
        self.push(Tensor::from_vec(&[b, d, gh, gw], out), Op::TokensToMap { x, frames }, &[x])
    }

    /// 2-D convolution, weight `[Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (bsz, cin, h, wd) = map_extent(self.shape(x));
        let ws = self.shape(w).to_vec();
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], cin, "conv2d: {cin} input channels vs weight {ws:?}");
        let geo = ConvGeometry::new(cin, h, wd, k, stride, pad);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let hw_out = geo.ho * geo.wo;
        let mut out = vec![F::zero(); bsz * cout * hw_out];
        out.par_chunks_mut(cout * hw_out)
            .zip(xv.par_chunks(cin * h * wd))
            .for_each(|(o, xi)| {
                if let Some(bv) = bv {
                    for (row, &bias) in o.chunks_mut(hw_out).zip(bv) {
                        row.fill(bias);
                    }
                }
                if geo.is_pointwise() {
                    matmul_into(cout, cin, hw_out, wv, xi, o, bv.is_some());
                } else {
                    let cols = geo.im2col(xi);
                    matmul_into(cout, geo.patch_len(), hw_out, wv, &cols, o, bv.is_some());
                }
            });
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            Tensor::from_vec(&[bsz, cout, geo.ho, geo.wo], out),
            Op::Conv2d { x, w, b, stride, pad },
            &inputs,
        )
    }

    /// Transposed convolution with kernel 2, stride 2; weight `[Cin, Cout, 2, 2]`.
    pub fn conv_transpose2(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (bsz, cin, h, wd) = map_extent(self.shape(x));
        let ws = self.shape(w).to_vec();
        assert_eq!(ws[0], cin, "conv_transpose2: weight {ws:?} vs {cin} channels");
        assert_eq!(&ws[2..], &[2, 2]);
        let cout = ws[1];
        let hw = h * wd;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let mut out = vec![F::zero(); bsz * cout * 4 * hw];
        out.par_chunks_mut(cout * 4 * hw)
            .zip(xv.par_chunks(cin * hw))
            .for_each(|(o, xi)| {
                let mut y = vec![F::zero(); cout * 4 * hw];
                matmul_tn_into(cout * 4, cin, hw, wv, xi, &mut y, false);
                for co in 0..cout {
                    let bias = bv.map_or(F::zero(), |bv| bv[co]);
                    for a in 0..2 {
                        for bb in 0..2 {
                            let src = &y[(co * 4 + a * 2 + bb) * hw..][..hw];
                            for i in 0..h {
                                for j in 0..wd {
                                    o[(co * 2 * h + 2 * i + a) * 2 * wd + 2 * j + bb] = src[i * wd + j] + bias;
                                }
                            }
                        }
                    }
                }
            });
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            Tensor::from_vec(&[bsz, cout, 2 * h, 2 * wd], out),
            Op::ConvTranspose2 { x, w, b },
            &inputs,
        )
    }

    /// 2×2 max pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (bsz, c, h, w) = map_extent(self.shape(x));
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(bsz * c * ho * wo);
        let mut argmax = Vec::with_capacity(bsz * c * ho * wo);
        for plane in xv.chunks(h * w) {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * i + di) * w + 2 * j + dj;
                        if plane[idx] > plane[best] {
                            best = idx;
                        }
                    }
                    out.push(plane[best]);
                    argmax.push(best as u32);
                }
            }
        }
        self.push(
            Tensor::from_vec(&[bsz, c, ho, wo], out),
            Op::MaxPool2 { x, argmax },
            &[x],
        )
    }

    /// Adaptive average pooling to `size × size`.
    pub fn adaptive_avg_pool(&mut self, x: Var, size: usize) -> Var {
        let (bsz, c, h, w) = map_extent(self.shape(x));
        let rows = adaptive_bins(h, size);
        let cols = adaptive_bins(w, size);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(bsz * c * size * size);
        for plane in xv.chunks(h * w) {
            for &(r0, r1) in &rows {
                for &(c0, c1) in &cols {
                    let mut acc = 0.0;
                    for r in r0..r1 {
                        for cc in c0..c1 {
                            acc += plane[r * w + cc].f64();
                        }
                    }
                    out.push(F::of(acc / ((r1 - r0) * (c1 - c0)) as f64));
                }
            }
        }
        self.push(
            Tensor::from_vec(&[bsz, c, size, size], out),
            Op::AdaptiveAvgPool { x },
            &[x],
        )
    }

    /// Resizes spatial extent. Bilinear uses half-pixel centres without
    /// corner alignment; nearest picks `floor(dst * in / out)`.
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize, mode: ResizeMode) -> Var {
        let (bsz, c, h, w) = map_extent(self.shape(x));
        let ry = resize_taps(h, oh, mode);
        let rx = resize_taps(w, ow, mode);
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); bsz * c * oh * ow];
        out.par_chunks_mut(oh * ow)
            .zip(xv.par_chunks(h * w))
            .for_each(|(o, plane)| {
                for (i, &(y0, y1, ly)) in ry.iter().enumerate() {
                    for (j, &(x0, x1, lx)) in rx.iter().enumerate() {
                        let top = plane[y0 * w + x0] * (F::one() - lx) + plane[y0 * w + x1] * lx;
                        let bot = plane[y1 * w + x0] * (F::one() - lx) + plane[y1 * w + x1] * lx;
                        o[i * ow + j] = top * (F::one() - ly) + bot * ly;
                    }
                }
            });
        self.push(
            Tensor::from_vec(&[bsz, c, oh, ow], out),
            Op::Resize { x, mode },
            &[x],
        )
    }

    /// Channel concatenation of `[B, Ci, H, W]` maps.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        let (bsz, _, h, w) = map_extent(self.shape(xs[0]));
        let mut total = 0;
        for &v in xs {
            let (b2, c, h2, w2) = map_extent(self.shape(v));
            assert_eq!((b2, h2, w2), (bsz, h, w), "concat: extent mismatch");
            total += c;
        }
        let mut out = Vec::with_capacity(bsz * total * h * w);
        for bi in 0..bsz {
            for &v in xs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.value(v).data()[bi * c * h * w..(bi + 1) * c * h * w]);
            }
        }
        self.push(
            Tensor::from_vec(&[bsz, total, h, w], out),
            Op::Concat { xs: xs.to_vec() },
            xs,
        )
    }

    /// Batch normalization over `[B, C, H, W]`. In training mode batch
    /// statistics are used; otherwise `running` supplies mean and variance.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[F], &[F])>,
        eps: f64,
    ) -> Var {
        let (bsz, c, h, w) = map_extent(self.shape(x));
        let hw = h * w;
        let n = (bsz * hw) as f64;
        let xv = self.value(x).data();
        let training = running.is_none();
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        let mut invstd = vec![F::zero(); c];
        for ch in 0..c {
            let (mu, v_pop, v_unbiased) = if let Some((rm, rv)) = running {
                (rm[ch].f64(), rv[ch].f64(), rv[ch].f64())
            } else {
                let mut s = 0.0;
                for bi in 0..bsz {
                    s += xv[(bi * c + ch) * hw..][..hw].iter().map(|v| v.f64()).sum::<f64>();
                }
                let mu = s / n;
                let mut ss = 0.0;
                for bi in 0..bsz {
                    ss += xv[(bi * c + ch) * hw..][..hw]
                        .iter()
                        .map(|v| (v.f64() - mu).powi(2))
                        .sum::<f64>();
                }
                let unbiased = if n > 1.0 { ss / (n - 1.0) } else { 0.0 };
                (mu, ss / n, unbiased)
            };
            mean[ch] = F::of(mu);
            var[ch] = F::of(v_unbiased);
            invstd[ch] = F::of(1.0 / (v_pop + eps).sqrt());
        }
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![F::zero(); xv.len()];
        for bi in 0..bsz {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                let (m, is, g, bb) = (mean[ch], invstd[ch], gv[ch], bv[ch]);
                for (o, &xi) in out[off..off + hw].iter_mut().zip(&xv[off..off + hw]) {
                    *o = (xi - m) * is * g + bb;
                }
            }
        }
        self.push(
            Tensor::from_vec(&[bsz, c, h, w], out),
            Op::BatchNorm { x, gamma, beta, invstd, mean, var, training },
            &[x, gamma, beta],
        )
    }

    /// Multiplies by a precomputed mask (entries 0 or `1/(1-rate)`).
    pub fn dropout(&mut self, x: Var, mask: Vec<F>) -> Var {
        assert_eq!(mask.len(), self.value(x).len());
        let shape = self.shape(x).to_vec();
        let out: Vec<F> = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&a, &m)| a * m)
            .collect();
        self.push(Tensor::from_vec(&shape, out), Op::Dropout { x, mask }, &[x])
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let shape = self.shape(x).to_vec();
        let out: Vec<F> = self.value(x).data().iter().map(|&a| a * s).collect();
        self.push(Tensor::from_vec(&shape, out), Op::Scale { x, s }, &[x])
    }

    /// Mean squared error against a constant target; returns a `[1]` scalar.
    pub fn mse(&mut self, pred: Var, target: &[F]) -> Var {
        let pv = self.value(pred).data();
        assert_eq!(pv.len(), target.len(), "mse: extent mismatch");
        let s: f64 = pv
            .iter()
            .zip(target)
            .map(|(&p, &t)| (p.f64() - t.f64()).powi(2))
            .sum();
        let v = F::of(s / pv.len() as f64);
        self.push(
            Tensor::scalar(v),
            Op::Mse { pred, target: target.to_vec() },
            &[pred],
        )
    }

    /// Mean Huber loss against a constant target; returns a `[1]` scalar.
    pub fn huber(&mut self, pred: Var, target: &[F], delta: f64) -> Var {
        let pv = self.value(pred).data();
        assert_eq!(pv.len(), target.len(), "huber: extent mismatch");
        let s: f64 = pv
            .iter()
            .zip(target)
            .map(|(&p, &t)| huber_value(t.f64() - p.f64(), delta))
            .sum();
        let v = F::of(s / pv.len() as f64);
        self.push(
            Tensor::scalar(v),
            Op::Huber { pred, target: target.to_vec(), delta: F::of(delta) },
            &[pred],
        )
    }

    // ----------------------------------------------------------- backward

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert!(self.record, "backward on a forward-only graph");
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), F::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (target, contribution) in self.node_backward(idx, &g) {
                if !self.nodes[target.0].needs_grad {
                    continue;
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn node_backward(&self, idx: usize, g: &Tensor<F>) -> Vec<(Var, Tensor<F>)> {
        let node = &self.nodes[idx];
        let gd = g.data();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let ws = self.shape(*w);
                let (din, dout) = (ws[0], ws[1]);
                let rows = xv.len() / din;
                if self.wants(*x) {
                    let batch = xs[0].max(1);
                    let rows_per = rows / batch;
                    let mut dx = vec![F::zero(); xv.len()];
                    dx.par_chunks_mut(rows_per * din)
                        .zip(gd.par_chunks(rows_per * dout))
                        .for_each(|(dxi, gi)| matmul_nt_into(rows_per, dout, din, gi, wv, dxi, false));
                    res.push((*x, Tensor::from_vec(xs, dx)));
                }
                if self.wants(*w) {
                    let mut dw = vec![F::zero(); din * dout];
                    matmul_tn_into(din, rows, dout, xv, gd, &mut dw, false);
                    res.push((*w, Tensor::from_vec(ws, dw)));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        res.push((*b, Tensor::from_vec(&[dout], column_sums(gd, dout))));
                    }
                }
            }
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::AddBroadcast { x, e } => {
                res.push((*x, g.clone()));
                if self.wants(*e) {
                    let per = self.value(*e).len();
                    let mut de = vec![F::zero(); per];
                    for chunk in gd.chunks(per) {
                        for (a, &v) in de.iter_mut().zip(chunk) {
                            *a = *a + v;
                        }
                    }
                    res.push((*e, Tensor::from_vec(self.shape(*e), de)));
                }
            }
            Op::AddPerSample { x, v } => {
                res.push((*x, g.clone()));
                if self.wants(*v) {
                    let vs = self.shape(*v);
                    let d = vs[1];
                    let per = gd.len() / vs[0];
                    let dv: Vec<F> = gd.chunks(per).flat_map(|c| column_sums(c, d)).collect();
                    res.push((*v, Tensor::from_vec(vs, dv)));
                }
            }
            Op::SpatioTemporal { pos, temporal, frames } => {
                let ps = self.shape(*pos);
                let (gcount, d) = (ps[0], ps[1]);
                let mut dpos = vec![F::zero(); gcount * d];
                for f in 0..*frames {
                    for (a, &v) in dpos.iter_mut().zip(&gd[f * gcount * d..(f + 1) * gcount * d]) {
                        *a = *a + v;
                    }
                }
                res.push((*pos, Tensor::from_vec(ps, dpos)));
                if let Some(t) = temporal {
                    let dt: Vec<F> = gd.chunks(gcount * d).flat_map(|c| column_sums(c, d)).collect();
                    res.push((*t, Tensor::from_vec(&[*frames, d], dt)));
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let d = gv.len();
                let mut dx = vec![F::zero(); xv.len()];
                let mut dgamma = vec![0.0f64; d];
                let mut dbeta = vec![0.0f64; d];
                let inv_d = 1.0 / d as f64;
                for (r, ((dxr, xr), gr)) in dx.chunks_mut(d).zip(xv.chunks(d)).zip(gd.chunks(d)).enumerate() {
                    let (mu, rs) = (mean[r].f64(), rstd[r].f64());
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for i in 0..d {
                        let xhat = (xr[i].f64() - mu) * rs;
                        let dxhat = gr[i].f64() * gv[i].f64();
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgamma[i] += gr[i].f64() * xhat;
                        dbeta[i] += gr[i].f64();
                    }
                    for i in 0..d {
                        let xhat = (xr[i].f64() - mu) * rs;
                        let dxhat = gr[i].f64() * gv[i].f64();
                        dxr[i] = F::of(rs * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat));
                    }
                }
                res.push((*x, Tensor::from_vec(self.shape(*x), dx)));
                res.push((*gamma, Tensor::from_vec(&[d], dgamma.into_iter().map(F::of).collect())));
                res.push((*beta, Tensor::from_vec(&[d], dbeta.into_iter().map(F::of).collect())));
            }
            Op::Gelu(x) => {
                let dx: Vec<F> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gi)| {
                        let z = v.f64();
                        let deriv = normal_cdf(z) + z * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
                        F::of(gi.f64() * deriv)
                    })
                    .collect();
                res.push((*x, Tensor::from_vec(self.shape(*x), dx)));
            }
            Op::Relu(x) => {
                let dx: Vec<F> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gi)| if v > F::zero() { gi } else { F::zero() })
                    .collect();
                res.push((*x, Tensor::from_vec(self.shape(*x), dx)));
            }
            Op::Attention { qkv, heads, probs } => {
                let probs = probs.as_ref().expect("attention probabilities recorded");
                let s = self.shape(*qkv);
                let (n, d3) = (s[1], s[2]);
                let d = d3 / 3;
                let heads = *heads;
                let dk = d / heads;
                let scale = F::of(1.0 / (dk as f64).sqrt());
                let xv = self.value(*qkv).data();
                let mut dqkv = vec![F::zero(); xv.len()];
                dqkv.par_chunks_mut(n * d3)
                    .zip(xv.par_chunks(n * d3))
                    .zip(gd.par_chunks(n * d).zip(probs.par_chunks(heads * n * n)))
                    .for_each(|((dx, x), (go, p))| {
                        let mut dp = vec![F::zero(); n * n];
                        for h in 0..heads {
                            let ph = &p[h * n * n..(h + 1) * n * n];
                            // dP = dO V^T
                            F::gemm(n, dk, n, F::one(), &go[h * dk..], (d as isize, 1), &x[2 * d + h * dk..], (1, d3 as isize), F::zero(), &mut dp, (n as isize, 1));
                            // dV = P^T dO
                            F::gemm(n, n, dk, F::one(), ph, (1, n as isize), &go[h * dk..], (d as isize, 1), F::zero(), &mut dx[2 * d + h * dk..], (d3 as isize, 1));
                            // dS = P * (dP - rowdot(dP, P))
                            for (dpr, pr) in dp.chunks_mut(n).zip(ph.chunks(n)) {
                                let dot: f64 = dpr.iter().zip(pr).map(|(&a, &b)| a.f64() * b.f64()).sum();
                                let dot = F::of(dot);
                                for (a, &b) in dpr.iter_mut().zip(pr) {
                                    *a = b * (*a - dot);
                                }
                            }
                            // dQ = scale * dS K ; dK = scale * dS^T Q
                            F::gemm(n, n, dk, scale, &dp, (n as isize, 1), &x[d + h * dk..], (d3 as isize, 1), F::zero(), &mut dx[h * dk..], (d3 as isize, 1));
                            F::gemm(n, n, dk, scale, &dp, (1, n as isize), &x[h * dk..], (d3 as isize, 1), F::zero(), &mut dx[d + h * dk..], (d3 as isize, 1));
                        }
                    });
                res.push((*qkv, Tensor::from_vec(s, dqkv)));
            }
            Op::Patchify { x, frames, channels, h, w, patch } => {
                let xs = self.shape(*x);
                let per_in = frames * channels * h * w;
                let mut dx = vec![F::zero(); self.value(*x).len()];
                dx.par_chunks_mut(per_in)
                    .zip(gd.par_chunks(per_in))
                    .for_each(|(dxi, gi)| {
                        for_each_patch_element(*frames, *channels, *h, *w, *patch, |src, dst| dxi[src] = gi[dst]);
                    });
                res.push((*x, Tensor::from_vec(xs, dx)));
            }
            Op::TokensToMap { x, frames } => {
                let xs = self.shape(*x);
                let (b, n, d) = (xs[0], xs[1], xs[2]);
                let gcount = n / frames;
                let inv = F::of(1.0 / *frames as f64);
                let mut dx = vec![F::zero(); b * n * d];
                for bi in 0..b {
                    for f in 0..*frames {
                        for gi in 0..gcount {
                            let dst = &mut dx[(bi * n + f * gcount + gi) * d..][..d];
                            for (di, o) in dst.iter_mut().enumerate() {
                                *o = gd[(bi * d + di) * gcount + gi] * inv;
                            }
                        }
                    }
                }
                res.push((*x, Tensor::from_vec(xs, dx)));
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (bsz, cin, h, wd) = map_extent(self.shape(*x));
                let ws = self.shape(*w);
                let (cout, k) = (ws[0], ws[2]);
                let geo = ConvGeometry::new(cin, h, wd, k, *stride, *pad);
                let hw_out = geo.ho * geo.wo;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                let plen = geo.patch_len();
                let parts: Vec<(Vec<F>, Vec<F>)> = xv
                    .par_chunks(cin * h * wd)
                    .zip(gd.par_chunks(cout * hw_out))
                    .map(|(xi, gi)| {
                        let cols = if geo.is_pointwise() { None } else { Some(geo.im2col(xi)) };
                        let colsv: &[F] = cols.as_deref().unwrap_or(xi);
                        let mut dw = Vec::new();
                        if want_w {
                            dw = vec![F::zero(); cout * plen];
                            matmul_nt_into(cout, hw_out, plen, gi, colsv, &mut dw, false);
                        }
                        let mut dx = Vec::new();
                        if want_x {
                            let mut dcols = vec![F::zero(); plen * hw_out];
                            matmul_tn_into(plen, cout, hw_out, wv, gi, &mut dcols, false);
                            dx = if geo.is_pointwise() { dcols } else { geo.col2im(&dcols) };
                        }
                        (dx, dw)
                    })
                    .collect();
                if want_x {
                    let dx: Vec<F> = parts.iter().flat_map(|p| p.0.iter().copied()).collect();
                    res.push((*x, Tensor::from_vec(self.shape(*x), dx)));
                }
                if want_w {
                    let mut dw = vec![F::zero(); cout * plen];
                    for p in &parts {
                        for (a, &v) in dw.iter_mut().zip(&p.1) {
                            *a = *a + v;
                        }
                    }
                    res.push((*w, Tensor::from_vec(ws, dw)));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        res.push((*b, Tensor::from_vec(&[cout], channel_sums(gd, bsz, cout, hw_out))));
                    }
                }
            }
            Op::ConvTranspose2 { x, w, b } => {
                let (bsz, cin, h, wd) = map_extent(self.shape(*x));
                let ws = self.shape(*w);
                let cout = ws[1];
                let hw = h * wd;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                let parts: Vec<(Vec<F>, Vec<F>)> = xv
                    .par_chunks(cin * hw)
                    .zip(gd.par_chunks(cout * 4 * hw))
                    .map(|(xi, gi)| {
                        let mut dy = vec![F::zero(); cout * 4 * hw];
                        for co in 0..cout {
                            for a in 0..2 {
                                for bb in 0..2 {
                                    let dst = &mut dy[(co * 4 + a * 2 + bb) * hw..][..hw];
                                    for i in 0..h {
                                        for j in 0..wd {
                                            dst[i * wd + j] = gi[(co * 2 * h + 2 * i + a) * 2 * wd + 2 * j + bb];
                                        }
                                    }
                                }
                            }
                        }
                        let mut dx = Vec::new();
                        if want_x {
                            dx = vec![F::zero(); cin * hw];
                            matmul_into(cin, cout * 4, hw, wv, &dy, &mut dx, false);
                        }
                        let mut dw = Vec::new();
                        if want_w {
                            dw = vec![F::zero(); cin * cout * 4];
                            matmul_nt_into(cin, hw, cout * 4, xi, &dy, &mut dw, false);
                        }
                        (dx, dw)
                    })
                    .collect();
                if want_x {
                    let dx: Vec<F> = parts.iter().flat_map(|p| p.0.iter().copied()).collect();
                    res.push((*x, Tensor::from_vec(self.shape(*x), dx)));
                }
                if want_w {
                    let mut dw = vec![F::zero(); cin * cout * 4];
                    for p in &parts {
                        for (a, &v) in dw.iter_mut().zip(&p.1) {
                            *a = *a + v;
                        }
                    }
                    res.push((*w, Tensor::from_vec(ws, dw)));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        res.push((*b, Tensor::from_vec(&[cout], channel_sums(gd, bsz, cout, 4 * hw))));
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let (_, _, h, w) = map_extent(self.shape(*x));
                let out_per = node.value.shape()[2] * node.value.shape()[3];
                let mut dx = vec![F::zero(); self.value(*x).len()];
                for (p, (gchunk, achunk)) in gd.chunks(out_per).zip(argmax.chunks(out_per)).enumerate() {
                    let plane = &mut dx[p * h * w..(p + 1) * h * w];
                    for (&gv, &a) in gchunk.iter().zip(achunk) {
                        plane[a as usize] = plane[a as usize] + gv;
                    }
                }
                res.push((*x, Tensor::from_vec(self.shape(*x), dx)));
            }
            Op::AdaptiveAvgPool { x } => {
                let (_, _, h, w) = map_extent(self.shape(*x));
                let size = node.value.shape()[2];
                let rows = adaptive_bins(h, size);
                let cols = adaptive_bins(w, size);
                let mut dx = vec![F::zero(); self.value(*x).len()];
                for (plane, gchunk) in dx.chunks_mut(h * w).zip(gd.chunks(size * size)) {
                    for (i, &(r0, r1)) in rows.iter().enumerate() {
                        for (j, &(c0, c1)) in cols.iter().enumerate() {
                            let share = gchunk[i * size + j] * F::of(1.0 / ((r1 - r0) * (c1 - c0)) as f64);
                            for r in r0..r1 {
                                for c in c0..c1 {
                                    plane[r * w + c] = plane[r * w + c] + share;
                                }
                            }
                        }
                    }
                }
                res.push((*x, Tensor::from_vec(self.shape(*x), dx)));
            }
            Op::Resize { x, mode } => {
                let (_, _, h, w) = map_extent(self.shape(*x));
                let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                let ry = resize_taps(h, oh, *mode);
                let rx = resize_taps(w, ow, *mode);
                let mut dx = vec![F::zero(); self.value(*x).len()];
                dx.par_chunks_mut(h * w)
                    .zip(gd.par_chunks(oh * ow))
                    .for_each(|(plane, gchunk)| {
                        for (i, &(y0, y1, ly)) in ry.iter().enumerate() {
                            for (j, &(x0, x1, lx)) in rx.iter().enumerate() {
                                let gv = gchunk[i * ow + j];
                                let top = gv * (F::one() - ly);
                                let bot = gv * ly;
                                plane[y0 * w + x0] = plane[y0 * w + x0] + top * (F::one() - lx);
                                plane[y0 * w + x1] = plane[y0 * w + x1] + top * lx;
                                plane[y1 * w + x0] = plane[y1 * w + x0] + bot * (F::one() - lx);
                                plane[y1 * w + x1] = plane[y1 * w + x1] + bot * lx;
                            }
                        }
                    });
                res.push((*x, Tensor::from_vec(self.shape(*x), dx)));
            }
            Op::Concat { xs } => {
                let (bsz, total, h, w) = map_extent(node.value.shape());
                let hw = h * w;
                let mut offset = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    if self.wants(v) {
                        let mut dv = Vec::with_capacity(bsz * c * hw);
                        for bi in 0..bsz {
                            dv.extend_from_slice(&gd[(bi * total + offset) * hw..(bi * total + offset + c) * hw]);
                        }
                        res.push((v, Tensor::from_vec(self.shape(v), dv)));
                    }
                    offset += c;
                }
            }
            Op::BatchNorm { x, gamma, beta, invstd, mean, training, .. } => {
                let (bsz, c, h, w) = map_extent(self.shape(*x));
                let hw = h * w;
                let n = (bsz * hw) as f64;
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let mut dx = vec![F::zero(); xv.len()];
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for ch in 0..c {
                    let (mu, is, gm) = (mean[ch].f64(), invstd[ch].f64(), gv[ch].f64());
                    let mut sum_g = 0.0;
                    let mut sum_g_xhat = 0.0;
                    for bi in 0..bsz {
                        let off = (bi * c + ch) * hw;
                        for (&xi, &gi) in xv[off..off + hw].iter().zip(&gd[off..off + hw]) {
                            let xhat = (xi.f64() - mu) * is;
                            sum_g += gi.f64();
                            sum_g_xhat += gi.f64() * xhat;
                        }
                    }
                    dgamma[ch] = F::of(sum_g_xhat);
                    dbeta[ch] = F::of(sum_g);
                    for bi in 0..bsz {
                        let off = (bi * c + ch) * hw;
                        for i in off..off + hw {
                            let gi = gd[i].f64();
                            let v = if *training {
                                let xhat = (xv[i].f64() - mu) * is;
                                gm * is * (gi - sum_g / n - xhat * sum_g_xhat / n)
                            } else {
                                gm * is * gi
                            };
                            dx[i] = F::of(v);
                        }
                    }
                }
                res.push((*x, Tensor::from_vec(self.shape(*x), dx)));
                res.push((*gamma, Tensor::from_vec(&[c], dgamma)));
                res.push((*beta, Tensor::from_vec(&[c], dbeta)));
            }
            Op::Dropout { x, mask } => {
                let dx: Vec<F> = gd.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                res.push((*x, Tensor::from_vec(self.shape(*x), dx)));
            }
            Op::Scale { x, s } => {
                let dx: Vec<F> = gd.iter().map(|&a| a * *s).collect();
                res.push((*x, Tensor::from_vec(self.shape(*x), dx)));
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred).data();
                let k = gd[0].f64() * 2.0 / pv.len() as f64;
                let dx: Vec<F> = pv
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| F::of(k * (p.f64() - t.f64())))
                    .collect();
                res.push((*pred, Tensor::from_vec(self.shape(*pred), dx)));
            }
            Op::Huber { pred, target, delta } => {
                let pv = self.value(*pred).data();
                let k = gd[0].f64() / pv.len() as f64;
                let delta = delta.f64();
                let dx: Vec<F> = pv
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| F::of(k * huber_grad(p.f64() - t.f64(), delta)))
                    .collect();
                res.push((*pred, Tensor::from_vec(self.shape(*pred), dx)));
            }
        }
        res
    }
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-pixel Huber value of an error `e`.
pub fn huber_value(e: f64, delta: f64) -> f64 {
    let a = e.abs();
    if a <= delta {
        0.5 * e * e
    } else {
        delta * a - 0.5 * delta * delta
    }
}

/// Derivative of the Huber value with respect to `e`.
pub fn huber_grad(e: f64, delta: f64) -> f64 {
    if e.abs() <= delta {
        e
    } else {
        delta * e.signum()
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += v.f64();
    }
    let inv = F::of(1.0 / sum);
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

fn column_sums<F: Real>(data: &[F], cols: usize) -> Vec<F> {
    let mut acc = vec![F::zero(); cols];
    for row in data.chunks(cols) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a = *a + v;
        }
    }
    acc
}

fn channel_sums<F: Real>(g: &[F], bsz: usize, c: usize, hw: usize) -> Vec<F> {
    let mut acc = vec![0.0f64; c];
    for bi in 0..bsz {
        for (ch, a) in acc.iter_mut().enumerate() {
            *a += g[(bi * c + ch) * hw..][..hw].iter().map(|v| v.f64()).sum::<f64>();
        }
    }
    acc.into_iter().map(F::of).collect()
}

fn for_each_patch_element(
    frames: usize,
    channels: usize,
    h: usize,
    w: usize,
    p: usize,
    mut f: impl FnMut(usize, usize),
) {
    let (gh, gw) = (h / p, w / p);
    let feat = channels * p * p;
    for fr in 0..frames {
        for gr in 0..gh {
            for gc in 0..gw {
                let token = fr * gh * gw + gr * gw + gc;
                for ch in 0..channels {
                    for py in 0..p {
                        let src_row = ((fr * channels + ch) * h + gr * p + py) * w + gc * p;
                        let dst_row = token * feat + ch * p * p + py * p;
                        for px in 0..p {
                            f(src_row + px, dst_row + px);
                        }
                    }
                }
            }
        }
    }
}

/// `[start, end)` ranges of adaptive pooling bins.
pub fn adaptive_bins(len: usize, size: usize) -> Vec<(usize, usize)> {
    (0..size)
        .map(|i| {
            let start = i * len / size;
            let end = ((i + 1) * len).div_ceil(size);
            (start, end)
        })
        .collect()
}

fn resize_taps<F: Real>(input: usize, output: usize, mode: ResizeMode) -> Vec<(usize, usize, F)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|dst| match mode {
            ResizeMode::Nearest => {
                let s = ((dst as f64 * ratio).floor() as usize).min(input - 1);
                (s, s, F::zero())
            }
            ResizeMode::Bilinear => {
                let src = ((dst as f64 + 0.5) * ratio - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(input - 1);
                let i1 = (i0 + 1).min(input - 1);
                let lambda = if i0 == i1 { 0.0 } else { src - i0 as f64 };
                (i0, i1, F::of(lambda))
            }
        })
        .collect()
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "conv2d: kernel larger than padded input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self { cin, h, w, k, stride, pad, ho, wo }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Visits `(col_index, input_index)` for every in-bounds tap.
    fn visit(&self, mut f: impl FnMut(usize, usize)) {
        let hw_out = self.ho * self.wo;
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(row * hw_out + oy * self.wo + ox, (c * self.h + iy as usize) * self.w + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col<F: Real>(&self, x: &[F]) -> Vec<F> {
        let mut cols = vec![F::zero(); self.patch_len() * self.ho * self.wo];
        self.visit(|col, src| cols[col] = x[src]);
        cols
    }

    fn col2im<F: Real>(&self, cols: &[F]) -> Vec<F> {
        let mut x = vec![F::zero(); self.cin * self.h * self.w];
        self.visit(|col, dst| x[dst] = x[dst] + cols[col]);
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Builds `loss = sum(out * probe)` through `mse` against zero target so
    /// every op is checked through a nontrivial upstream gradient.
    fn check_op(
        shapes: &[&[usize]],
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(s, &mut rng)).collect();
        let eval = |inputs: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
            let out = build(&mut g, &vars);
            let n = g.value(out).len();
            let target: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
            let loss = g.mse(out, &target);
            let grads = g.backward(loss);
            let gs = vars
                .iter()
                .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
                .collect();
            (g.value(loss).item(), gs)
        };
        let (_, analytic) = eval(&inputs);
        let eps = 1e-6;
        for (ti, t) in inputs.iter().enumerate() {
            for idx in 0..t.len() {
                let mut plus = inputs.clone();
                plus[ti].data_mut()[idx] += eps;
                let mut minus = inputs.clone();
                minus[ti].data_mut()[idx] -= eps;
                let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * eps);
                let a = analytic[ti].data()[idx];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / denom < 1e-5,
                    "input {ti} elem {idx}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn linear_gradients() {
        check_op(&[&[2, 3, 4], &[4, 5], &[5]], |g, v| g.linear(v[0], v[1], Some(v[2])));
    }

    #[test]
    fn layer_norm_and_gelu_gradients() {
        check_op(&[&[2, 3, 6], &[6], &[6]], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-6);
            g.gelu(y)
        });
    }

    #[test]
    fn attention_gradients() {
        check_op(&[&[2, 5, 12]], |g, v| g.attention(v[0], 2));
    }

    #[test]
    fn embedding_gradients() {
        check_op(&[&[2, 6, 3], &[3, 3], &[2, 3], &[2, 3]], |g, v| {
            let table = g.spatio_temporal(v[1], Some(v[2]), 2);
            let y = g.add_broadcast(v[0], table);
            g.add_per_sample(y, v[3])
        });
    }

    #[test]
    fn patchify_and_tokens_to_map_gradients() {
        check_op(&[&[2, 2, 3, 4, 4], &[12, 5]], |g, v| {
            let t = g.patchify(v[0], 2);
            let t = g.linear(t, v[1], None);
            g.tokens_to_map(t, 2, 2, 2)
        });
    }

    #[test]
    fn conv_gradients() {
        check_op(&[&[2, 3, 5, 4], &[4, 3, 3, 3], &[4]], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1));
        check_op(&[&[2, 3, 3, 3], &[2, 3, 1, 1], &[2]], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 0));
        check_op(&[&[1, 2, 5, 5], &[2, 2, 3, 3]], |g, v| g.conv2d(v[0], v[1], None, 2, 1));
    }

    #[test]
    fn transposed_conv_gradients() {
        check_op(&[&[2, 3, 2, 3], &[3, 2, 2, 2], &[2]], |g, v| g.conv_transpose2(v[0], v[1], Some(v[2])));
    }

    #[test]
    fn pooling_resize_concat_gradients() {
        check_op(&[&[2, 2, 5, 4]], |g, v| g.max_pool2(v[0]));
        check_op(&[&[2, 2, 7, 5]], |g, v| g.adaptive_avg_pool(v[0], 3));
        check_op(&[&[2, 2, 3, 4]], |g, v| g.resize(v[0], 7, 9, ResizeMode::Bilinear));
        check_op(&[&[1, 2, 3, 3]], |g, v| g.resize(v[0], 6, 6, ResizeMode::Nearest));
        check_op(&[&[2, 1, 3, 3], &[2, 2, 3, 3]], |g, v| g.concat_channels(&[v[0], v[1]]));
    }

    #[test]
    fn batch_norm_gradients() {
        check_op(&[&[3, 2, 3, 3], &[2], &[2]], |g, v| g.batch_norm(v[0], v[1], v[2], None, 1e-5));
        check_op(&[&[3, 2, 2, 2], &[2], &[2]], |g, v| {
            let (m, var) = (vec![0.1, -0.2], vec![0.5, 2.0]);
            g.batch_norm(v[0], v[1], v[2], Some((&m, &var)), 1e-5)
        });
    }

    #[test]
    fn huber_and_scale_gradients() {
        check_op(&[&[2, 1, 3, 3]], |g, v| {
            let t: Vec<f64> = (0..18).map(|i| i as f64 * 0.3 - 2.0).collect();
            let h = g.huber(v[0], &t, 0.5);
            g.scale(h, 3.0)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f32>::inference().with_attention_capture(true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..2 * 9 * 24).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x = g.constant(Tensor::from_vec(&[2, 9, 24], data));
        let a = g.attention(x, 4);
        let (p, heads) = g.attention_probs(a).unwrap();
        assert_eq!(heads, 4);
        for row in p.chunks(9) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn bilinear_preserves_constant_maps() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::full(&[1, 1, 3, 5], 2.5));
        let y = g.resize(x, 12, 17, ResizeMode::Bilinear);
        assert!(g.value(y).data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn adaptive_bins_cover_extent() {
        assert_eq!(adaptive_bins(6, 6), (0..6).map(|i| (i, i + 1)).collect::<Vec<_>>());
        assert_eq!(adaptive_bins(7, 3), vec![(0, 3), (2, 5), (4, 7)]);
        assert_eq!(adaptive_bins(5, 1), vec![(0, 5)]);
    }
}
