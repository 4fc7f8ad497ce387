//! Clean-signal generators, noise models and dataset readers.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::recon::blur_batch;
use crate::rng::Rng;
use crate::tensor::Array;

pub const SINE_LEN: usize = 128;
pub const SINE_MAX_FREQ: f64 = 5.0;

pub const STL10_SIDE: usize = 96;
pub const STL10_RECORD: usize = STL10_SIDE * STL10_SIDE * 3;

/// `sin(2π ν t_j)` at `t_j = j / (len - 1)`.
pub fn sine_signal(nu: f64, len: usize) -> Vec<f64> {
    let step = if len > 1 { 1.0 / (len - 1) as f64 } else { 0.0 };
    (0..len)
        .map(|j| (2.0 * std::f64::consts::PI * nu * j as f64 * step).sin())
        .collect()
}

/// `k` sines of length 128 with ν ~ U[0, 5], shape `[k, 1, 128]`.
pub fn sample_sine_batch(rng: &mut Rng, k: usize) -> Result<Array> {
    let mut data = Vec::with_capacity(k * SINE_LEN);
    for _ in 0..k {
        let nu = rng.uniform_range(0.0, SINE_MAX_FREQ);
        data.extend(sine_signal(nu, SINE_LEN));
    }
    Array::new(vec![k, 1, SINE_LEN], data)
}

/// Piecewise-constant images in `[0, 1]`: a random background with
/// `rects` axis-aligned rectangles of random level painted on top.
pub fn sample_piecewise_constant(
    rng: &mut Rng,
    k: usize,
    channels: usize,
    side: usize,
    rects: usize,
) -> Result<Array> {
    let plane = side * side;
    let mut data = vec![0.0; k * channels * plane];
    for img in data.chunks_mut(channels * plane) {
        for ch in img.chunks_mut(plane) {
            let bg = rng.uniform_range(0.1, 0.9);
            ch.fill(bg);
        }
        for _ in 0..rects {
            let (r0, c0) = (rng.below(side), rng.below(side));
            let h = 2 + rng.below(side / 2);
            let w = 2 + rng.below(side / 2);
            for ch in img.chunks_mut(plane) {
                let level = rng.uniform();
                for r in r0..(r0 + h).min(side) {
                    ch[r * side + c0..r * side + (c0 + w).min(side)].fill(level);
                }
            }
        }
    }
    Array::new(vec![k, channels, side, side], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Localized {
    pub n_points: usize,
    pub pos_std: f64,
    pub amp_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseModel {
    /// i.i.d. N(mean, σ²); `mean` is 0 for additive noise and typically 1
    /// for multiplicative noise.
    Gaussian {
        sigma: f64,
        #[serde(default)]
        mean: f64,
    },
    Localized(Localized),
    /// Gaussian with σ ~ U[0, σ_max] per sample, plus a localized field.
    Mixed {
        sigma_max: f64,
        localized: Localized,
    },
    /// Uniform resampling from stored noise realisations (a raw file with
    /// sidecar whose shape is `[N, sample shape..]`).
    Empirical { path: PathBuf },
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("noise model: {what} must be finite and >= 0")));
        let loc = |l: &Localized| {
            if !(l.pos_std >= 0.0 && l.pos_std.is_finite()) {
                return bad("pos_std");
            }
            if !(l.amp_std >= 0.0 && l.amp_std.is_finite()) {
                return bad("amp_std");
            }
            Ok(())
        };
        match self {
            NoiseModel::Gaussian { sigma, mean } => {
                if !(*sigma >= 0.0 && sigma.is_finite()) {
                    return bad("sigma");
                }
                if !mean.is_finite() {
                    return bad("mean");
                }
                Ok(())
            }
            NoiseModel::Localized(l) => loc(l),
            NoiseModel::Mixed { sigma_max, localized } => {
                if !(*sigma_max >= 0.0 && sigma_max.is_finite()) {
                    return bad("sigma_max");
                }
                loc(localized)
            }
            NoiseModel::Empirical { .. } => Ok(()),
        }
    }
}

fn localized_field(rng: &mut Rng, l: &Localized, sample_shape: &[usize], out: &mut [f64]) -> Result<()> {
    if sample_shape.len() != 3 {
        return Err(shape_err(
            "localized_noise",
            format!("needs [channels, h, w] samples, got {sample_shape:?}"),
        ));
    }
    let (h, w) = (sample_shape[1], sample_shape[2]);
    for ch in out.chunks_mut(h * w) {
        let cr = rng.below(h) as f64;
        let cc = rng.below(w) as f64;
        for _ in 0..l.n_points {
            let r = (cr + l.pos_std * rng.normal()).round().clamp(0.0, (h - 1) as f64) as usize;
            let c = (cc + l.pos_std * rng.normal()).round().clamp(0.0, (w - 1) as f64) as usize;
            ch[r * w + c] += l.amp_std * rng.normal();
        }
    }
    Ok(())
}

/// Draws one noise tensor of `shape = [batch, sample shape..]` from an
/// analytic model. Empirical models go through [`NoiseSource`].
pub fn sample_noise(model: &NoiseModel, shape: &[usize], rng: &mut Rng) -> Result<Array> {
    let n: usize = shape.iter().product();
    if shape.is_empty() || n == 0 {
        return Err(shape_err("sample_noise", format!("bad shape {shape:?}")));
    }
    let per = n / shape[0];
    let mut data = vec![0.0; n];
    match model {
        NoiseModel::Gaussian { sigma, mean } => {
            for v in &mut data {
                *v = mean + sigma * rng.normal();
            }
        }
        NoiseModel::Localized(l) => {
            for s in data.chunks_mut(per) {
                localized_field(rng, l, &shape[1..], s)?;
            }
        }
        NoiseModel::Mixed { sigma_max, localized } => {
            for s in data.chunks_mut(per) {
                let sigma = rng.uniform_range(0.0, *sigma_max);
                for v in s.iter_mut() {
                    *v = sigma * rng.normal();
                }
                localized_field(rng, localized, &shape[1..], s)?;
            }
        }
        NoiseModel::Empirical { path } => {
            return Err(Error::Invalid(format!(
                "empirical noise from {} needs a loaded NoiseSource",
                path.display()
            )))
        }
    }
    Array::new(shape.to_vec(), data)
}

/// A noise model with any stored samples it needs already loaded.
#[derive(Clone, Debug)]
pub struct NoiseSource {
    model: NoiseModel,
    bank: Option<Arc<Array>>,
}

impl NoiseSource {
    pub fn new(model: NoiseModel) -> Result<Self> {
        model.validate()?;
        let bank = match &model {
            NoiseModel::Empirical { path } => Some(Arc::new(crate::rawio::read_raw(path)?.0)),
            _ => None,
        };
        Ok(Self { model, bank })
    }

    /// Empirical source backed by in-memory samples `[N, sample shape..]`.
    pub fn from_samples(samples: Array) -> Self {
        Self {
            model: NoiseModel::Empirical { path: PathBuf::new() },
            bank: Some(Arc::new(samples)),
        }
    }

    pub fn model(&self) -> &NoiseModel {
        &self.model
    }

    pub fn sample(&self, shape: &[usize], rng: &mut Rng) -> Result<Array> {
        let Some(bank) = &self.bank else {
            return sample_noise(&self.model, shape, rng);
        };
        let bs = bank.shape();
        if shape.is_empty() || bs[1..] != shape[1..] {
            return Err(shape_err(
                "empirical_noise",
                format!("stored samples {bs:?} do not match requested {shape:?}"),
            ));
        }
        let per: usize = bs[1..].iter().product();
        let mut data = Vec::with_capacity(shape[0] * per);
        for _ in 0..shape[0] {
            let i = rng.below(bs[0]);
            data.extend_from_slice(&bank.data()[i * per..(i + 1) * per]);
        }
        Array::new(shape.to_vec(), data)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    #[default]
    Additive,
    Multiplicative,
}

/// `y + η` or `y ∘ η`.
pub fn make_noisy(y: &Array, eta: &Array, mode: ResidualMode) -> Result<Array> {
    if y.shape() != eta.shape() {
        return Err(shape_err("make_noisy", format!("{:?} vs {:?}", y.shape(), eta.shape())));
    }
    let data = y
        .data()
        .iter()
        .zip(eta.data())
        .map(|(a, b)| match mode {
            ResidualMode::Additive => a + b,
            ResidualMode::Multiplicative => a * b,
        })
        .collect();
    Array::new(y.shape().to_vec(), data)
}

/// Converts one STL-10 record (channel-major, column-major within a
/// channel) to a row-major `[3, 96, 96]` image in `[0, 1]`, optionally
/// center-cropped to `crop × crop`.
pub fn decode_stl10_record(record: &[u8], crop: Option<usize>) -> Result<Array> {
    if record.len() != STL10_RECORD {
        return Err(Error::Format {
            offset: record.len() as u64,
            detail: format!("record must be {STL10_RECORD} bytes"),
        });
    }
    let side = crop.unwrap_or(STL10_SIDE);
    if side == 0 || side > STL10_SIDE {
        return Err(Error::Invalid(format!("crop {side} outside 1..={STL10_SIDE}")));
    }
    let off = (STL10_SIDE - side) / 2;
    let plane = STL10_SIDE * STL10_SIDE;
    let mut data = Vec::with_capacity(3 * side * side);
    for ch in 0..3 {
        for r in off..off + side {
            for c in off..off + side {
                data.push(record[ch * plane + c * STL10_SIDE + r] as f64 / 255.0);
            }
        }
    }
    Array::new(vec![3, side, side], data)
}

/// Decodes a whole STL-10 binary blob.
pub fn parse_stl10(bytes: &[u8], crop: Option<usize>) -> Result<Vec<Array>> {
    let whole = bytes.len() / STL10_RECORD * STL10_RECORD;
    if whole != bytes.len() {
        return Err(Error::Format {
            offset: whole as u64,
            detail: format!(
                "truncated record: {} trailing bytes, records are {STL10_RECORD} bytes",
                bytes.len() - whole
            ),
        });
    }
    bytes
        .chunks_exact(STL10_RECORD)
        .map(|r| decode_stl10_record(r, crop))
        .collect()
}

/// Streams images from an STL-10 binary file.
pub struct Stl10Reader<R> {
    inner: R,
    crop: Option<usize>,
    offset: u64,
    done: bool,
}

impl<R: Read> Stl10Reader<R> {
    pub fn new(inner: R, crop: Option<usize>) -> Self {
        Self {
            inner,
            crop,
            offset: 0,
            done: false,
        }
    }
}

impl<R: Read> Iterator for Stl10Reader<R> {
    type Item = Result<Array>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let mut buf = vec![0u8; STL10_RECORD];
        let mut filled = 0;
        while filled < STL10_RECORD {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => break,
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => {
                    self.done = true;
                    return Some(Err(e.into()));
                }
            }
        }
        if filled == 0 {
            self.done = true;
            return None;
        }
        if filled < STL10_RECORD {
            self.done = true;
            return Some(Err(Error::Format {
                offset: self.offset,
                detail: format!("truncated record: {filled} of {STL10_RECORD} bytes"),
            }));
        }
        self.offset += STL10_RECORD as u64;
        Some(decode_stl10_record(&buf, self.crop))
    }
}

pub fn load_stl10(path: &Path, crop: Option<usize>) -> Result<Vec<Array>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    Stl10Reader::new(f, crop).collect()
}

/// Where clean samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CleanSource {
    /// Sines of length 128, shape `[1, 128]`.
    Sine,
    /// i.i.d. N(mean, std²) vectors of length `features`.
    Gaussian {
        features: usize,
        #[serde(default)]
        mean: f64,
        #[serde(default = "one")]
        std: f64,
    },
    PiecewiseConstant {
        #[serde(default = "sixteen")]
        side: usize,
        #[serde(default = "one_usize")]
        channels: usize,
        #[serde(default = "three")]
        rects: usize,
        /// Deliver `A x` under the uniform 3×3 blur instead of `x`.
        #[serde(default)]
        blur: bool,
    },
    Stl10 {
        path: PathBuf,
        #[serde(default)]
        crop: Option<usize>,
    },
    /// Raw file with sidecar, shape `[N, sample shape..]`; sampled uniformly.
    Raw { path: PathBuf },
}

fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}
fn three() -> usize {
    3
}
fn sixteen() -> usize {
    16
}

/// A clean source with its stored images, if any, loaded.
#[derive(Clone, Debug)]
pub struct CleanSampler {
    source: CleanSource,
    bank: Option<Arc<Array>>,
}

impl CleanSampler {
    pub fn new(source: CleanSource) -> Result<Self> {
        let bank = match &source {
            CleanSource::Stl10 { path, crop } => {
                let images = load_stl10(path, *crop)?;
                if images.is_empty() {
                    return Err(Error::Invalid(format!("{} holds no images", path.display())));
                }
                let mut shape = vec![images.len()];
                shape.extend_from_slice(images[0].shape());
                let data = images.into_iter().flat_map(Array::into_vec).collect();
                Some(Arc::new(Array::new(shape, data)?))
            }
            CleanSource::Raw { path } => Some(Arc::new(crate::rawio::read_raw(path)?.0)),
            _ => None,
        };
        Ok(Self { source, bank })
    }

    pub fn source(&self) -> &CleanSource {
        &self.source
    }

    /// Per-sample shape.
    pub fn sample_shape(&self) -> Vec<usize> {
        if let Some(b) = &self.bank {
            return b.shape()[1..].to_vec();
        }
        match &self.source {
            CleanSource::Sine => vec![1, SINE_LEN],
            CleanSource::Gaussian { features, .. } => vec![*features],
            CleanSource::PiecewiseConstant { side, channels, .. } => vec![*channels, *side, *side],
            CleanSource::Stl10 { .. } | CleanSource::Raw { .. } => unreachable!("bank loaded"),
        }
    }

    /// Batch of `k` clean samples.
    pub fn sample(&self, k: usize, rng: &mut Rng) -> Result<Array> {
        if k == 0 {
            return Err(Error::Invalid("batch size must be >= 1".into()));
        }
        if let Some(bank) = &self.bank {
            let per: usize = bank.shape()[1..].iter().product();
            let mut data = Vec::with_capacity(k * per);
            for _ in 0..k {
                let i = rng.below(bank.shape()[0]);
                data.extend_from_slice(&bank.data()[i * per..(i + 1) * per]);
            }
            let mut shape = vec![k];
            shape.extend_from_slice(&bank.shape()[1..]);
            return Array::new(shape, data);
        }
        match &self.source {
            CleanSource::Sine => sample_sine_batch(rng, k),
            CleanSource::Gaussian { features, mean, std } => {
                let data = (0..k * features).map(|_| mean + std * rng.normal()).collect();
                Array::new(vec![k, *features], data)
            }
            CleanSource::PiecewiseConstant {
                side,
                channels,
                rects,
                blur,
            } => {
                let x = sample_piecewise_constant(rng, k, *channels, *side, *rects)?;
                if *blur {
                    blur_batch(&x)
                } else {
                    Ok(x)
                }
            }
            CleanSource::Stl10 { .. } | CleanSource::Raw { .. } => unreachable!("bank loaded"),
        }
    }
}
