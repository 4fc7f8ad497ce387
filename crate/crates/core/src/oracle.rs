//! Exact one-dimensional Wasserstein-1 distances, the closed-form scalar
//! linear denoisers for Gaussian data and noise, and a histogram check of
//! the additive convolution identity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sorted one-dimensional samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Empirical1D {
    values: Vec<f64>,
}

impl Empirical1D {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Invalid("NaN in empirical samples".into()));
        }
        values.sort_by(f64::total_cmp);
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// W1 between two empirical measures with the same number of atoms.
pub fn w1_empirical(a: &Empirical1D, b: &Empirical1D) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!(
            "w1_empirical needs equal sample counts, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Invalid("w1_empirical on empty samples".into()));
    }
    let total: f64 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).sum();
    Ok(total / a.len() as f64)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

fn adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + adaptive(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance `tol`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = simpson(a, b, fa, fm, fb);
    adaptive(f, a, b, fa, fm, fb, whole, tol, 50)
}

const Z_RANGE: f64 = 12.0;

/// W1 between N(m1, s1²) and N(m2, s2²) as the L1 distance of their
/// quantile functions, integrated numerically to 1e-8.
///
/// With `t = Φ(z)` both quantiles are affine in `z`, so the integrand is
/// `|Δm + Δs z| φ(z)`, which is smooth except at one kink where the
/// interval is split.
pub fn w1_gaussian(m1: f64, s1: f64, m2: f64, s2: f64) -> Result<f64> {
    if !(s1 >= 0.0 && s2 >= 0.0) {
        return Err(Error::Invalid(format!("negative standard deviation ({s1}, {s2})")));
    }
    let (dm, ds) = (m1 - m2, s1 - s2);
    let f = move |z: f64| (dm + ds * z).abs() * std_normal_pdf(z);
    // fixed panels keep the adaptive rule from accepting a coarse estimate
    let mut cuts: Vec<f64> = (0..=48).map(|i| -Z_RANGE + i as f64 * 0.5).collect();
    if ds != 0.0 {
        let kink = -dm / ds;
        if kink.abs() < Z_RANGE {
            cuts.push(kink);
            cuts.sort_by(f64::total_cmp);
        }
    }
    Ok(cuts
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| integrate(&f, w[0], w[1], 1e-12))
        .sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFactors {
    /// Matches renoised outputs to measurements.
    pub g1: f64,
    /// Matches the removed residual to the noise.
    pub g2: f64,
    /// Maximum a posteriori shrinkage.
    pub map: f64,
}

/// Closed-form scalar factors for `y ~ N(0, 1)`, `η ~ N(0, σ²)`.
pub fn linear_factors(sigma: f64) -> Result<LinearFactors> {
    if !(sigma >= 0.0) {
        return Err(Error::Invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    let r = (1.0 + sigma * sigma).sqrt();
    Ok(LinearFactors {
        g1: 1.0 / r,
        g2: 1.0 - sigma / r,
        map: 1.0 / (1.0 + sigma * sigma),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearObjective {
    /// W1(N(0, a²(1+σ²)+σ²), N(0, 1+σ²)): renoised output vs measurement.
    Obs1,
    /// W1(N(0, (1−a)²(1+σ²)), N(0, σ²)): residual vs noise.
    Obs2,
}

pub fn linear_objective(obj: LinearObjective, sigma: f64, a: f64) -> Result<f64> {
    let v = 1.0 + sigma * sigma;
    match obj {
        LinearObjective::Obs1 => w1_gaussian(0.0, (a * a * v + sigma * sigma).sqrt(), 0.0, v.sqrt()),
        LinearObjective::Obs2 => w1_gaussian(0.0, (1.0 - a).abs() * v.sqrt(), 0.0, sigma),
    }
}

/// Brute-force minimizer of [`linear_objective`] over `a = step, 2 step, …, hi`.
///
/// The residual objective is symmetric about `a = 1`, so for small σ it has
/// a second exact minimizer above 1. Grid minima whose value is within one
/// step of the best (measured with the objective's Lipschitz constant in
/// `a`) count as ties, and the smallest such factor is returned.
pub fn linear_argmin(obj: LinearObjective, sigma: f64, hi: f64, step: f64) -> Result<f64> {
    if !(step > 0.0 && hi >= step) {
        return Err(Error::Invalid(format!("bad grid: hi={hi}, step={step}")));
    }
    let n = (hi / step + 1e-9).floor() as usize;
    let values = (1..=n)
        .map(|i| linear_objective(obj, sigma, i as f64 * step))
        .collect::<Result<Vec<f64>>>()?;
    let best = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let lipschitz = (1.0 + sigma * sigma).sqrt() * (2.0 / std::f64::consts::PI).sqrt();
    let slack = lipschitz * step;
    let is_local_min = |i: usize| {
        (i == 0 || values[i] <= values[i - 1]) && (i + 1 == values.len() || values[i] <= values[i + 1])
    };
    let i = (0..values.len())
        .find(|&i| values[i] <= best + slack && is_local_min(i))
        .expect("global minimum is a local minimum");
    Ok((i + 1) as f64 * step)
}

pub const ARGMIN_HI: f64 = 1.5;
pub const ARGMIN_STEP: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub sigma: f64,
    pub g1: f64,
    pub g2: f64,
    pub map: f64,
    pub argmin_obs1: f64,
    pub argmin_obs2: f64,
}

pub fn oracle_row(sigma: f64) -> Result<OracleRow> {
    let f = linear_factors(sigma)?;
    Ok(OracleRow {
        sigma,
        g1: f.g1,
        g2: f.g2,
        map: f.map,
        argmin_obs1: linear_argmin(LinearObjective::Obs1, sigma, ARGMIN_HI, ARGMIN_STEP)?,
        argmin_obs2: linear_argmin(LinearObjective::Obs2, sigma, ARGMIN_HI, ARGMIN_STEP)?,
    })
}

/// Half-L1 distance between hist(y) ⊛ hist(η) and hist(yδ) on a shared grid
/// of `bins` uniform bins spanning all pooled samples.
pub fn convolution_identity_check(y: &[f64], eta: &[f64], y_delta: &[f64], bins: usize) -> Result<f64> {
    if y.is_empty() || eta.is_empty() || y_delta.is_empty() {
        return Err(Error::Invalid("convolution check needs non-empty samples".into()));
    }
    if bins == 0 {
        return Err(Error::Invalid("bins must be >= 1".into()));
    }
    let all = || y.iter().chain(eta).chain(y_delta);
    if all().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite sample".into()));
    }
    let lo0 = all().cloned().fold(f64::INFINITY, f64::min);
    let hi0 = all().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pad = 1e-9 * (hi0 - lo0).abs().max(1.0);
    let (lo, hi) = (lo0 - pad, hi0 + pad);
    let width = (hi - lo) / bins as f64;
    let index = |v: f64| (((v - lo) / width).floor() as isize).clamp(0, bins as isize - 1) as usize;
    let hist = |s: &[f64]| {
        let mut h = vec![0.0; bins];
        for &v in s {
            h[index(v)] += 1.0;
        }
        let n = s.len() as f64;
        h.iter_mut().for_each(|c| *c /= n);
        h
    };
    let (hy, he, hd) = (hist(y), hist(eta), hist(y_delta));
    let center = |i: usize| lo + (i as f64 + 0.5) * width;
    let mut conv = vec![0.0; bins];
    for (i, &a) in hy.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for (j, &b) in he.iter().enumerate() {
            if b != 0.0 {
                conv[index(center(i) + center(j))] += a * b;
            }
        }
    }
    Ok(0.5 * conv.iter().zip(&hd).map(|(a, b)| (a - b).abs()).sum::<f64>())
}
