//! Blur operator, smoothed-TV reconstruction and the λ line search.
//!
//! Images are `[C, H, W]` (or `[H, W]`) arrays processed channel by channel
//! with circular boundaries.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::eval::psnr_arrays;
use crate::tensor::Array;

pub const TV_EPS: f64 = 1e-3;
const DIVERGENCE_RUN: usize = 10;

fn planes(x: &Array) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(shape_err("recon", format!("expected [C, H, W] or [H, W], got {s:?}"))),
    }
}

/// Circular convolution with the uniform 3×3 kernel.
pub fn blur_apply(x: &Array) -> Result<Array> {
    let (c, h, w) = planes(x)?;
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for ch in 0..c {
        let p = &d[ch * h * w..(ch + 1) * h * w];
        let o = &mut out[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let mut s = 0.0;
                for di in [h - 1, 0, 1] {
                    for dj in [w - 1, 0, 1] {
                        s += p[((i + di) % h) * w + (j + dj) % w];
                    }
                }
                o[i * w + j] = s / 9.0;
            }
        }
    }
    Array::new(x.shape().to_vec(), out)
}

/// [`blur_apply`] on every image of a `[N, C, H, W]` batch.
pub fn blur_batch(x: &Array) -> Result<Array> {
    if x.shape().len() != 4 {
        return Err(shape_err("blur_batch", format!("expected [N, C, H, W], got {:?}", x.shape())));
    }
    let per = x.numel() / x.shape()[0];
    let mut data = Vec::with_capacity(x.numel());
    for img in x.data().chunks(per) {
        data.extend(blur_apply(&Array::new(x.shape()[1..].to_vec(), img.to_vec())?)?.into_vec());
    }
    Array::new(x.shape().to_vec(), data)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    #[default]
    Blur,
    Identity,
}

impl Operator {
    /// Both operators are self-adjoint, so this is also the adjoint.
    pub fn apply(&self, x: &Array) -> Result<Array> {
        match self {
            Operator::Blur => blur_apply(x),
            Operator::Identity => {
                planes(x)?;
                Ok(x.clone())
            }
        }
    }
}

fn huber(d: f64) -> f64 {
    if d.abs() <= TV_EPS {
        d * d / (2.0 * TV_EPS)
    } else {
        d.abs() - TV_EPS / 2.0
    }
}

fn huber_grad(d: f64) -> f64 {
    (d / TV_EPS).clamp(-1.0, 1.0)
}

/// Huber-smoothed anisotropic total variation with circular differences.
pub fn tv_smooth(x: &Array) -> Result<f64> {
    let (c, h, w) = planes(x)?;
    let d = x.data();
    let mut s = 0.0;
    for ch in 0..c {
        let p = &d[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let v = p[i * w + j];
                s += huber(p[((i + 1) % h) * w + j] - v) + huber(p[i * w + (j + 1) % w] - v);
            }
        }
    }
    Ok(s)
}

fn tv_grad(x: &Array) -> Result<Vec<f64>> {
    let (c, h, w) = planes(x)?;
    let d = x.data();
    let mut g = vec![0.0; d.len()];
    for ch in 0..c {
        let off = ch * h * w;
        for i in 0..h {
            for j in 0..w {
                let k = off + i * w + j;
                let down = off + ((i + 1) % h) * w + j;
                let right = off + i * w + (j + 1) % w;
                let gd = huber_grad(d[down] - d[k]);
                let gr = huber_grad(d[right] - d[k]);
                g[down] += gd;
                g[k] -= gd;
                g[right] += gr;
                g[k] -= gr;
            }
        }
    }
    Ok(g)
}

/// `½‖Ax − b‖² + λ TV_smooth(x)`.
pub fn objective(op: Operator, x: &Array, b: &Array, lambda: f64) -> Result<f64> {
    let ax = op.apply(x)?;
    let fid: f64 = ax.data().iter().zip(b.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 2.0;
    Ok(fid + lambda * tv_smooth(x)?)
}

#[derive(Clone, Debug)]
pub struct ReconResult {
    pub image: Array,
    pub iterations: usize,
    /// Objective at the start and after every iteration.
    pub objective: Vec<f64>,
}

/// Minimizes `½‖Ax − b‖² + λ TV_smooth(x)` from `x = b` by gradient descent
/// with step `1 / (1 + 8λ/ε)`.
pub fn tv_reconstruct(b: &Array, op: Operator, lambda: f64, iters: usize, tol: f64) -> Result<ReconResult> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Invalid(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    planes(b)?;
    let step = 1.0 / (1.0 + 8.0 * lambda / TV_EPS);
    let mut x = b.clone();
    let mut f = objective(op, &x, b, lambda)?;
    let mut history = vec![f];
    let mut rising = 0;
    let mut done = 0;
    for _ in 0..iters {
        let r: Vec<f64> = op.apply(&x)?.data().iter().zip(b.data()).map(|(a, b)| a - b).collect();
        let fid_grad = op.apply(&Array::new(b.shape().to_vec(), r)?)?;
        let tg = tv_grad(&x)?;
        for ((xi, fg), t) in x.data_mut().iter_mut().zip(fid_grad.data()).zip(&tg) {
            *xi -= step * (fg + lambda * t);
        }
        let f_new = objective(op, &x, b, lambda)?;
        done += 1;
        history.push(f_new);
        if !f_new.is_finite() {
            return Err(Error::Diverged(format!("objective became {f_new} at iteration {done}")));
        }
        if f_new > f {
            rising += 1;
            if rising >= DIVERGENCE_RUN {
                return Err(Error::Diverged(format!(
                    "objective increased {DIVERGENCE_RUN} iterations in a row (now {f_new})"
                )));
            }
        } else {
            rising = 0;
        }
        let rel = (f - f_new) / f.abs().max(f64::MIN_POSITIVE);
        f = f_new;
        if rel >= 0.0 && rel < tol {
            break;
        }
    }
    Ok(ReconResult {
        image: x,
        iterations: done,
        objective: history,
    })
}

/// `λ0 · factor^j` for `j = −steps, …, steps`.
pub fn lambda_grid(lambda0: f64, factor: f64, steps: usize) -> Result<Vec<f64>> {
    if !(lambda0 > 0.0 && factor > 1.0 && steps >= 3) {
        return Err(Error::Invalid(format!(
            "line search needs lambda0 > 0, factor > 1, steps >= 3 (got {lambda0}, {factor}, {steps})"
        )));
    }
    let s = steps as i32;
    Ok((-s..=s).map(|j| lambda0 * factor.powi(j)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineSearch {
    pub lambda: f64,
    pub psnr: f64,
    /// `(λ, PSNR)` for every grid point.
    pub grid: Vec<(f64, f64)>,
}

/// Evaluates `pipeline(λ)` on the exponential grid and returns the λ with
/// the highest PSNR against `reference` (ties go to the smaller λ).
pub fn lambda_line_search(
    mut pipeline: impl FnMut(f64) -> Result<Array>,
    lambda0: f64,
    factor: f64,
    steps: usize,
    reference: &Array,
    peak: f64,
) -> Result<LineSearch> {
    let mut grid = Vec::new();
    for lambda in lambda_grid(lambda0, factor, steps)? {
        let x = pipeline(lambda)?;
        grid.push((lambda, psnr_arrays(reference, &x, peak)?));
    }
    let (lambda, psnr) = grid
        .iter()
        .cloned()
        .fold((f64::NAN, f64::NEG_INFINITY), |best, g| if g.1 > best.1 { g } else { best });
    Ok(LineSearch { lambda, psnr, grid })
}
