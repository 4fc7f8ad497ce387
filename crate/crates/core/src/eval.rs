//! PSNR and held-out evaluation of denoisers.

use serde::{Deserialize, Serialize};

use crate::data::{make_noisy, CleanSampler, NoiseSource, ResidualMode};
use crate::error::{shape_err, Error, Result};
use crate::nn::{NetworkSpec, ParamStore};
use crate::rng::Rng;
use crate::tensor::{no_grad, Array, Tensor};

pub const PSNR_CAP: f64 = 100.0;
pub const SINE_PEAK: f64 = 2.0;
pub const IMAGE_PEAK: f64 = 1.0;

pub fn mse(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() || reference.is_empty() {
        return Err(shape_err(
            "mse",
            format!("{} vs {} elements", reference.len(), estimate.len()),
        ));
    }
    Ok(reference
        .iter()
        .zip(estimate)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / reference.len() as f64)
}

/// `10 log10(peak² / MSE)`, capped at 100 dB.
pub fn psnr(reference: &[f64], estimate: &[f64], peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::Invalid(format!("peak must be > 0, got {peak}")));
    }
    let m = mse(reference, estimate)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

pub fn psnr_arrays(reference: &Array, estimate: &Array, peak: f64) -> Result<f64> {
    if reference.shape() != estimate.shape() {
        return Err(shape_err(
            "psnr",
            format!("{:?} vs {:?}", reference.shape(), estimate.shape()),
        ));
    }
    psnr(reference.data(), estimate.data(), peak)
}

/// Mean PSNR over the leading (batch) axis.
pub fn batch_psnr(reference: &Array, estimate: &Array, peak: f64) -> Result<Vec<f64>> {
    if reference.shape() != estimate.shape() || reference.shape().is_empty() {
        return Err(shape_err(
            "psnr",
            format!("{:?} vs {:?}", reference.shape(), estimate.shape()),
        ));
    }
    let per = reference.numel() / reference.shape()[0];
    reference
        .data()
        .chunks(per)
        .zip(estimate.data().chunks(per))
        .map(|(r, e)| psnr(r, e, peak))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsnrStats {
    pub per_sample: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl PsnrStats {
    pub fn from_samples(per_sample: Vec<f64>) -> Self {
        let n = per_sample.len().max(1) as f64;
        let mean = per_sample.iter().sum::<f64>() / n;
        let std = (per_sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self {
            per_sample,
            mean,
            std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub peak: f64,
    pub denoised: PsnrStats,
    pub noisy: PsnrStats,
}

/// Held-out batches: clean `y`, measurements `yδ` and denoised `G(yδ)`.
pub struct EvalTriples {
    pub clean: Array,
    pub noisy: Array,
    pub denoised: Array,
}

/// Draws `n` clean samples and noise from substreams of `seed`, composes
/// measurements and denoises them in chunks, on up to `threads` threads.
#[allow(clippy::too_many_arguments)]
pub fn denoise_heldout(
    spec: &NetworkSpec,
    params: &ParamStore,
    clean: &CleanSampler,
    noise: &NoiseSource,
    n: usize,
    mode: ResidualMode,
    seed: u64,
    threads: usize,
) -> Result<EvalTriples> {
    if n == 0 {
        return Err(Error::Invalid("evaluation needs n >= 1".into()));
    }
    let mut rng = Rng::substream(seed, 0xe7a1);
    let y = clean.sample(n, &mut rng)?;
    let eta = noise.sample(y.shape(), &mut rng)?;
    let yd = make_noisy(&y, &eta, mode)?;
    let denoised = apply(spec, params, &yd, threads)?;
    Ok(EvalTriples {
        clean: y,
        noisy: yd,
        denoised,
    })
}

pub fn evaluate(
    spec: &NetworkSpec,
    params: &ParamStore,
    clean: &CleanSampler,
    noise: &NoiseSource,
    n: usize,
    mode: ResidualMode,
    peak: f64,
    seed: u64,
) -> Result<EvalReport> {
    let t = denoise_heldout(spec, params, clean, noise, n, mode, seed, 1)?;
    report(&t, peak)
}

pub fn report(t: &EvalTriples, peak: f64) -> Result<EvalReport> {
    Ok(EvalReport {
        count: t.clean.shape()[0],
        peak,
        denoised: PsnrStats::from_samples(batch_psnr(&t.clean, &t.denoised, peak)?),
        noisy: PsnrStats::from_samples(batch_psnr(&t.clean, &t.noisy, peak)?),
    })
}

const CHUNK: usize = 64;

/// Runs the network on a batch without recording, in chunks spread over
/// `threads` scoped threads.
pub fn apply(spec: &NetworkSpec, params: &ParamStore, batch: &Array, threads: usize) -> Result<Array> {
    let b = batch.shape()[0];
    let per = batch.numel() / b;
    let chunks: Vec<(usize, usize)> = (0..b).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(b))).collect();
    let run = |&(s, e): &(usize, usize)| -> Result<Vec<f64>> {
        let _g = no_grad();
        let mut shape = batch.shape().to_vec();
        shape[0] = e - s;
        let x = Tensor::new(shape, batch.data()[s * per..e * per].to_vec())?;
        Ok(spec.forward(&params.constants(), &x)?.into_array().into_vec())
    };
    let threads = threads.clamp(1, chunks.len());
    let parts: Vec<Result<Vec<f64>>> = if threads == 1 {
        chunks.iter().map(run).collect()
    } else {
        let per_thread = chunks.len().div_ceil(threads);
        std::thread::scope(|sc| {
            let handles: Vec<_> = chunks
                .chunks(per_thread)
                .map(|cs| sc.spawn(move || cs.iter().map(run).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation thread panicked"))
                .collect()
        })
    };
    let mut data = Vec::with_capacity(b * per);
    for p in parts {
        data.extend(p?);
    }
    let mut shape = vec![b];
    shape.extend(spec.output_shape()?);
    Array::new(shape, data)
}
