//! Chip container format, dataset manifests, normalization statistics,
//! augmentation and the synthetic chip generator.
//!
//! A `.cyp` file is laid out as:
//!
//! ```text
//! "CYPC" | version: u16 = 1
//! chip_id: u32 len + utf-8 | year: u32 | lat: f32 | lon: f32
//! T: u32 | C: u32 | H: u32 | W: u32 | C × (u32 len + utf-8 band name)
//! bands: f32[T][C][H][W] | yield_map: f32[H][W]
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CYPC";
pub const FORMAT_VERSION: u16 = 1;
pub const CHIP_EXTENSION: &str = "cyp";

/// Default band order.
pub const BAND_NAMES: [&str; 6] = ["BLUE", "GREEN", "RED", "NIR_NARROW", "SWIR1", "SWIR2"];
/// Default acquisition months, one per time step.
pub const MONTHS: [&str; 5] = ["May", "June", "July", "August", "September"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChipHeader {
    pub chip_id: String,
    pub year: u32,
    pub lat: f32,
    pub lon: f32,
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub band_names: Vec<String>,
}

impl ChipHeader {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::Validation(format!(
                "chip {}: extents must be positive (T={}, C={}, H={}, W={})",
                self.chip_id, self.t, self.c, self.h, self.w
            )));
        }
        if self.band_names.len() != self.c {
            return Err(Error::Validation(format!(
                "chip {}: {} band names for {} bands",
                self.chip_id,
                self.band_names.len(),
                self.c
            )));
        }
        if !self.lat.is_finite() || !self.lon.is_finite() {
            return Err(Error::Validation(format!("chip {}: non-finite location", self.chip_id)));
        }
        Ok(())
    }

    pub fn band_len(&self) -> usize {
        self.t * self.c * self.h * self.w
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }
}

/// One geographic sample: `bands[t][c][row][col]` in surface-reflectance
/// units and a `yield_map[row][col]` in kg/ha.
#[derive(Clone, Debug, PartialEq)]
pub struct Chip {
    pub header: ChipHeader,
    pub bands: Vec<f32>,
    pub yield_map: Vec<f32>,
}

impl Chip {
    pub fn validate(&self) -> Result<()> {
        self.header.validate()?;
        if self.bands.len() != self.header.band_len() || self.yield_map.len() != self.header.pixels() {
            return Err(Error::Validation(format!(
                "chip {}: array extents do not match header",
                self.header.chip_id
            )));
        }
        if let Some(v) = self.bands.iter().chain(&self.yield_map).find(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "chip {}: non-finite value {v}",
                self.header.chip_id
            )));
        }
        if let Some(v) = self.yield_map.iter().find(|&&v| v < 0.0) {
            return Err(Error::Validation(format!(
                "chip {}: negative yield {v}",
                self.header.chip_id
            )));
        }
        Ok(())
    }

    /// Band plane `(t, c)` as a `H*W` slice.
    pub fn plane(&self, t: usize, c: usize) -> &[f32] {
        let hw = self.header.pixels();
        let off = (t * self.header.c + c) * hw;
        &self.bands[off..off + hw]
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a chip into the `.cyp` byte layout.
pub fn encode_chip(chip: &Chip) -> Result<Vec<u8>> {
    chip.validate()?;
    let h = &chip.header;
    let mut buf = Vec::with_capacity(64 + 4 * (chip.bands.len() + chip.yield_map.len()));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_str(&mut buf, &h.chip_id);
    put_u32(&mut buf, h.year);
    buf.extend_from_slice(&h.lat.to_le_bytes());
    buf.extend_from_slice(&h.lon.to_le_bytes());
    for v in [h.t, h.c, h.h, h.w] {
        put_u32(&mut buf, v as u32);
    }
    for name in &h.band_names {
        put_str(&mut buf, name);
    }
    put_f32s(&mut buf, &chip.bands);
    put_f32s(&mut buf, &chip.yield_map);
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Length {
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|e| Error::Format(format!("invalid utf-8 in header: {e}")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let nbytes = n.checked_mul(4).ok_or_else(|| Error::Format("array size overflows".into()))?;
        let raw = self.take(nbytes)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parses the `.cyp` byte layout.
pub fn decode_chip(bytes: &[u8]) -> Result<Chip> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, not a CYPC chip".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported chip format version {version}")));
    }
    let chip_id = r.string()?;
    let year = r.u32()?;
    let lat = r.f32()?;
    let lon = r.f32()?;
    let t = r.u32()? as usize;
    let c = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    if c > 4096 {
        return Err(Error::Format(format!("implausible band count {c}")));
    }
    let band_names = (0..c).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let header = ChipHeader {
        chip_id,
        year,
        lat,
        lon,
        t,
        c,
        h,
        w,
        band_names,
    };
    header.validate()?;
    let bands = r.f32s(header.band_len())?;
    let yield_map = r.f32s(header.pixels())?;
    if r.pos != bytes.len() {
        return Err(Error::Length {
            expected: r.pos,
            found: bytes.len(),
        });
    }
    let chip = Chip {
        header,
        bands,
        yield_map,
    };
    chip.validate()?;
    Ok(chip)
}

pub fn write_chip(chip: &Chip, path: &Path) -> Result<()> {
    let bytes = encode_chip(chip)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_chip(path: &Path) -> Result<Chip> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_chip(&bytes)
}

// ------------------------------------------------------------------ stats

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub band_names: Vec<String>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl BandStats {
    pub fn validate(&self) -> Result<()> {
        if self.means.len() != self.band_names.len() || self.stds.len() != self.band_names.len() {
            return Err(Error::Validation("band stats lengths disagree".into()));
        }
        if let Some((i, s)) = self.stds.iter().enumerate().find(|(_, s)| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::Validation(format!(
                "degenerate band {}: std {s} must be > 0",
                self.band_names[i]
            )));
        }
        Ok(())
    }

    /// Reference statistics of the six-band schema.
    pub fn reference() -> Self {
        Self {
            band_names: BAND_NAMES.iter().map(|s| s.to_string()).collect(),
            means: vec![493.94, 832.45, 901.06, 2927.87, 2427.47, 1658.56],
            stds: vec![250.38, 265.75, 481.92, 1038.83, 855.02, 855.37],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct YieldStats {
    pub mean: f64,
    pub std: f64,
}

impl YieldStats {
    pub fn validate(&self) -> Result<()> {
        if !(self.std > 0.0) || !self.std.is_finite() || !self.mean.is_finite() {
            return Err(Error::Validation(format!("yield std {} must be > 0", self.std)));
        }
        Ok(())
    }

    pub fn standardize(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn destandardize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

pub fn standardize_yield(y: f64, ys: &YieldStats) -> f64 {
    ys.standardize(y)
}

pub fn destandardize_yield(z: f64, ys: &YieldStats) -> f64 {
    ys.destandardize(z)
}

/// On-disk statistics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsFile {
    pub band_names: Vec<String>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub yield_mean: f64,
    pub yield_std: f64,
}

impl StatsFile {
    pub fn new(bands: &BandStats, yields: &YieldStats) -> Self {
        Self {
            band_names: bands.band_names.clone(),
            means: bands.means.clone(),
            stds: bands.stds.clone(),
            yield_mean: yields.mean,
            yield_std: yields.std,
        }
    }

    pub fn band_stats(&self) -> BandStats {
        BandStats {
            band_names: self.band_names.clone(),
            means: self.means.clone(),
            stds: self.stds.clone(),
        }
    }

    pub fn yield_stats(&self) -> YieldStats {
        YieldStats {
            mean: self.yield_mean,
            std: self.yield_std,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.band_stats().validate()?;
        self.yield_stats().validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: Self = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("stats", e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Pooled count/mean/sum-of-squared-deviations, mergeable in any grouping.
#[derive(Clone, Copy, Debug, Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn of(values: &[f32]) -> Self {
        let n = values.len() as f64;
        if n == 0.0 {
            return Self::default();
        }
        let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let m2 = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum();
        Self { n, mean, m2 }
    }

    fn merge(self, o: Self) -> Self {
        if self.n == 0.0 {
            return o;
        }
        if o.n == 0.0 {
            return self;
        }
        let n = self.n + o.n;
        let delta = o.mean - self.mean;
        Self {
            n,
            mean: self.mean + delta * o.n / n,
            m2: self.m2 + o.m2 + delta * delta * self.n * o.n / n,
        }
    }

    fn std(&self) -> f64 {
        (self.m2 / self.n).sqrt()
    }
}

/// Per-band mean and population std pooled over every pixel and time step.
pub fn compute_band_stats<'a>(chips: impl IntoIterator<Item = &'a Chip>) -> Result<BandStats> {
    let mut acc: Option<(Vec<String>, Vec<Moments>)> = None;
    for chip in chips {
        let h = &chip.header;
        let (names, moments) = acc.get_or_insert_with(|| (h.band_names.clone(), vec![Moments::default(); h.c]));
        if *names != h.band_names {
            return Err(Error::Validation(format!(
                "chip {} band order differs from the rest of the split",
                h.chip_id
            )));
        }
        for t in 0..h.t {
            for (c, m) in moments.iter_mut().enumerate() {
                *m = m.merge(Moments::of(chip.plane(t, c)));
            }
        }
    }
    let (band_names, moments) = acc.ok_or_else(|| Error::Config("no training chips for band statistics".into()))?;
    let stats = BandStats {
        band_names,
        means: moments.iter().map(|m| m.mean).collect(),
        stds: moments.iter().map(Moments::std).collect(),
    };
    stats.validate()?;
    Ok(stats)
}

/// Global yield mean and population std over every training pixel.
pub fn compute_yield_stats<'a>(chips: impl IntoIterator<Item = &'a Chip>) -> Result<YieldStats> {
    let m = chips
        .into_iter()
        .fold(Moments::default(), |acc, c| acc.merge(Moments::of(&c.yield_map)));
    if m.n == 0.0 {
        return Err(Error::Config("no training chips for yield statistics".into()));
    }
    let ys = YieldStats {
        mean: m.mean,
        std: m.std(),
    };
    ys.validate()?;
    Ok(ys)
}

/// `(x - mean_c) / std_c` for every time step; returns `[T][C][H][W]`.
pub fn normalize(chip: &Chip, stats: &BandStats) -> Result<Vec<f32>> {
    let h = &chip.header;
    if stats.means.len() != h.c || stats.stds.len() != h.c {
        return Err(Error::Validation(format!(
            "stats cover {} bands, chip {} has {}",
            stats.means.len(),
            h.chip_id,
            h.c
        )));
    }
    let hw = h.pixels();
    let mut out = Vec::with_capacity(chip.bands.len());
    for (plane_idx, plane) in chip.bands.chunks(hw).enumerate() {
        let c = plane_idx % h.c;
        let (m, s) = (stats.means[c], stats.stds[c]);
        out.extend(plane.iter().map(|&v| ((v as f64 - m) / s) as f32));
    }
    Ok(out)
}

/// How the `T × C` band stack is presented to the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TokenizationMode {
    /// One `C·T`-channel image, channel `k = t·C + c`.
    FlattenedChannels,
    /// `T` frames of `C` channels, tokenized per frame.
    PerTimestep,
}

/// A model-ready sample: input planes plus the standardized target.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[frames, channels, H, W]`.
    pub shape: [usize; 4],
    pub input: Vec<f32>,
    /// `[1, H, W]` standardized yield.
    pub target: Vec<f32>,
    /// Chip centre `(lat, lon)` in degrees.
    pub latlon: [f32; 2],
}

impl Sample {
    pub fn planes(&self) -> usize {
        self.shape[0] * self.shape[1]
    }
}

/// Arranges a normalized `[T][C][H][W]` stack for the encoder. The t-major
/// channel rule makes both layouts share one memory order; only the
/// frame/channel split differs.
pub fn flatten_to_input(normalized: Vec<f32>, header: &ChipHeader, mode: TokenizationMode) -> ([usize; 4], Vec<f32>) {
    assert_eq!(normalized.len(), header.band_len());
    let shape = match mode {
        TokenizationMode::FlattenedChannels => [1, header.t * header.c, header.h, header.w],
        TokenizationMode::PerTimestep => [header.t, header.c, header.h, header.w],
    };
    (shape, normalized)
}

/// Flattened channel index of `(t, c)`.
pub fn flat_channel(t: usize, c: usize, bands: usize) -> usize {
    t * bands + c
}

/// Builds a model sample from a raw chip.
pub fn prepare_sample(chip: &Chip, stats: &StatsFile, mode: TokenizationMode) -> Result<Sample> {
    let normalized = normalize(chip, &stats.band_stats())?;
    let (shape, input) = flatten_to_input(normalized, &chip.header, mode);
    let ys = stats.yield_stats();
    let target = chip
        .yield_map
        .iter()
        .map(|&y| ys.standardize(y as f64) as f32)
        .collect();
    Ok(Sample {
        shape,
        input,
        target,
        latlon: [chip.header.lat, chip.header.lon],
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Flips {
    pub horizontal: bool,
    pub vertical: bool,
}

/// Random horizontal and vertical flips, each with probability `p`, applied
/// identically to input and target.
pub fn augment(sample: &mut Sample, p: f64, rng: &mut impl Rng) -> Flips {
    let p = p.clamp(0.0, 1.0);
    let flips = Flips {
        horizontal: rng.gen_bool(p),
        vertical: rng.gen_bool(p),
    };
    apply_flips(sample, flips);
    flips
}

pub fn apply_flips(sample: &mut Sample, flips: Flips) {
    let [_, _, h, w] = sample.shape;
    for plane in sample.input.chunks_mut(h * w).chain(std::iter::once(sample.target.as_mut_slice())) {
        if flips.horizontal {
            for row in plane.chunks_mut(w) {
                row.reverse();
            }
        }
        if flips.vertical {
            for r in 0..h / 2 {
                let (top, bottom) = plane.split_at_mut((h - 1 - r) * w);
                top[r * w..(r + 1) * w].swap_with_slice(&mut bottom[..w]);
            }
        }
    }
}

// -------------------------------------------------------------- synthesis

/// Parameters of the synthetic chip generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenParams {
    pub h: usize,
    pub w: usize,
    pub year: u32,
    /// Box-blur radius (pixels) of the three smoothing passes.
    pub smoothing_radius: usize,
    pub y_min: f64,
    pub y_max: f64,
    /// Per-time-step response weight.
    pub phenology: Vec<f64>,
    pub base: Vec<f64>,
    pub gain: Vec<f64>,
    /// Std of the additive per-pixel band noise, reflectance units.
    pub noise: f64,
    pub band_names: Vec<String>,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            h: 96,
            w: 96,
            year: 2020,
            smoothing_radius: 6,
            y_min: 800.0,
            y_max: 4200.0,
            phenology: vec![0.25, 0.60, 1.00, 0.80, 0.30],
            base: vec![450.0, 780.0, 1300.0, 1500.0, 1500.0, 1100.0],
            gain: vec![60.0, 120.0, -900.0, 3000.0, 1400.0, 900.0],
            noise: 120.0,
            band_names: BAND_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        let c = self.band_names.len();
        if self.h == 0 || self.w == 0 || self.phenology.is_empty() || c == 0 {
            return Err(Error::Config("generator extents must be positive".into()));
        }
        if self.base.len() != c || self.gain.len() != c {
            return Err(Error::Config(format!("generator needs {c} base and gain values")));
        }
        if !(self.y_min >= 0.0 && self.y_max > self.y_min) {
            return Err(Error::Config(format!(
                "invalid yield range [{}, {}]",
                self.y_min, self.y_max
            )));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise level must be >= 0".into()));
        }
        Ok(())
    }
}

fn box_blur(field: &mut [f64], h: usize, w: usize, r: usize) {
    if r == 0 {
        return;
    }
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let norm = 1.0 / (2 * r + 1) as f64;
    let mut tmp = vec![0.0; field.len()];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-(r as isize)..=r as isize)
                .map(|d| field[y * w + clamp(x as isize + d, w)])
                .sum();
            tmp[y * w + x] = s * norm;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-(r as isize)..=r as isize)
                .map(|d| tmp[clamp(y as isize + d, h) * w + x])
                .sum();
            field[y * w + x] = s * norm;
        }
    }
}

/// Deterministic synthetic chip: a smoothed noise field rescaled into
/// `[y_min, y_max]` drives every band through `base + gain * w_t * y / y_max`.
pub fn synthesize_chip(seed: u64, params: &GenParams) -> Result<Chip> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (params.h, params.w);
    let mut field: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
    for _ in 0..3 {
        box_blur(&mut field, h, w, params.smoothing_radius);
    }
    let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let yield_map: Vec<f32> = field
        .iter()
        .map(|&v| (params.y_min + (v - lo) / span * (params.y_max - params.y_min)) as f32)
        .collect();
    let t = params.phenology.len();
    let c = params.band_names.len();
    let mut bands = Vec::with_capacity(t * c * h * w);
    for &wt in &params.phenology {
        for ci in 0..c {
            for &y in &yield_map {
                let noise: f64 = rng.sample::<f64, _>(StandardNormal) * params.noise;
                let v = params.base[ci] + params.gain[ci] * wt * (y as f64 / params.y_max) + noise;
                bands.push(v.clamp(0.0, 10_000.0) as f32);
            }
        }
    }
    let lat = rng.gen_range(49.0..54.0f32);
    let lon = rng.gen_range(-115.0..-100.0f32);
    let chip = Chip {
        header: ChipHeader {
            chip_id: format!("syn-{}-{seed:016x}", params.year),
            year: params.year,
            lat,
            lon,
            t,
            c,
            h,
            w,
            band_names: params.band_names.clone(),
        },
        bands,
        yield_map,
    };
    chip.validate()?;
    Ok(chip)
}

// --------------------------------------------------------------- manifest

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub chip_id: String,
    pub year: u32,
    /// Relative to the manifest directory.
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub chips: Vec<ManifestEntry>,
    pub val_years: Vec<u32>,
    /// Statistics file, relative to the manifest directory.
    #[serde(default)]
    pub stats: Option<String>,
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const STATS_FILE: &str = "stats.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            other => Err(Error::Config(format!("unknown split '{other}' (expected train or val)"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl DatasetManifest {
    /// Loads `dir/manifest.json`, or the file itself if `path` is a file.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut m: Self = serde_json::from_str(&text).map_err(|e| Error::json(file.display().to_string(), e))?;
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self) -> Result<()> {
        let file = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("manifest", e))?;
        fs::write(&file, text).map_err(|e| Error::io(&file, e))
    }

    pub fn chip_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn stats_path(&self) -> PathBuf {
        self.root.join(self.stats.as_deref().unwrap_or(STATS_FILE))
    }

    pub fn load_stats(&self) -> Result<StatsFile> {
        StatsFile::load(&self.stats_path())
    }

    /// Partitions by year and returns the requested side.
    pub fn split(&self, which: Split) -> Result<Vec<ManifestEntry>> {
        let (train, val) = split_by_year(&self.chips, &self.val_years)?;
        Ok(match which {
            Split::Train => train,
            Split::Val => val,
        })
    }

    pub fn read_split(&self, which: Split) -> Result<Vec<Chip>> {
        self.split(which)?
            .iter()
            .map(|e| read_chip(&self.chip_path(e)))
            .collect()
    }
}

/// Temporal hold-out: chips whose year is in `val_years` form the validation set.
pub fn split_by_year(
    chips: &[ManifestEntry],
    val_years: &[u32],
) -> Result<(Vec<ManifestEntry>, Vec<ManifestEntry>)> {
    if val_years.is_empty() {
        return Err(Error::Config("no validation years given".into()));
    }
    let years: BTreeSet<u32> = val_years.iter().copied().collect();
    let (val, train): (Vec<_>, Vec<_>) = chips.iter().cloned().partition(|e| years.contains(&e.year));
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(format!(
            "year split {val_years:?} leaves {} training and {} validation chips",
            train.len(),
            val.len()
        )));
    }
    Ok((train, val))
}

/// Seed of chip `index` within `year` for a dataset seed.
pub fn chip_seed(dataset_seed: u64, year: u32, index: usize) -> u64 {
    let mut z = dataset_seed ^ ((year as u64) << 32) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Writes `chips_per_year` synthetic chips for every year, the manifest and
/// the training-split statistics file.
pub fn generate_dataset(
    out: &Path,
    chips_per_year: usize,
    years: &[u32],
    val_years: &[u32],
    seed: u64,
    params: &GenParams,
) -> Result<DatasetManifest> {
    if chips_per_year == 0 || years.is_empty() {
        return Err(Error::Config("need at least one chip and one year".into()));
    }
    params.validate()?;
    let mut chips = Vec::new();
    for &year in years {
        let dir = out.join("chips").join(year.to_string());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..chips_per_year {
            let p = GenParams { year, ..params.clone() };
            let chip = synthesize_chip(chip_seed(seed, year, i), &p)?;
            let rel = format!("chips/{year}/{:04}.{CHIP_EXTENSION}", i);
            write_chip(&chip, &out.join(&rel))?;
            chips.push(ManifestEntry {
                chip_id: chip.header.chip_id.clone(),
                year,
                path: rel,
            });
        }
    }
    let manifest = DatasetManifest {
        chips,
        val_years: val_years.to_vec(),
        stats: Some(STATS_FILE.to_string()),
        root: out.to_path_buf(),
    };
    let train = manifest.read_split(Split::Train)?;
    let stats = StatsFile::new(&compute_band_stats(&train)?, &compute_yield_stats(&train)?);
    stats.save(&out.join(STATS_FILE))?;
    manifest.save()?;
    Ok(manifest)
}
