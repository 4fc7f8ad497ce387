//! Adversarial training of a denoiser against two Wasserstein critics.
//!
//! One training step performs `n_critic` critic updates followed by one
//! generator update:
//!
//! * `C_yδ` compares renoised outputs `G(yδ) + η` with measurements `yδ`;
//! * `C_η` compares the removed residual `yδ − G(yδ)` with noise draws `η`;
//! * both critics carry the one-sided penalty `relu(‖∇C(x̄)‖ − 1)²` at
//!   random interpolates `x̄`;
//! * the generator minimizes `−C_yδ(G(yδ) + η₁) − C_η(yδ − G(yδ))`.
//!
//! Two auxiliary modes share the loop: a plain WGAN that pushes latent noise
//! onto the clean distribution, and a supervised ℓ2 baseline.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Record};
use crate::config::ConfigFile;
use crate::data::{make_noisy, CleanSampler, NoiseSource, ResidualMode};
use crate::error::{shape_err, Error, Result};
use crate::eval::{apply, batch_psnr};
use crate::nn::{Bound, NetworkSpec, ParamStore};
use crate::optim::{adam_step, AdamHyper, AdamState};
use crate::rng::{Rng, RngState};
use crate::tensor::{backward, Array, Tape, Tensor};

pub const GP_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    DualCritic,
    PlainWgan,
    SupervisedL2,
}

/// Which critic objectives take part in dual-critic training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticTerms {
    #[default]
    Both,
    RenoiseOnly,
    ResidualOnly,
}

impl CriticTerms {
    fn renoise(self) -> bool {
        self != CriticTerms::ResidualOnly
    }

    fn residual(self) -> bool {
        self != CriticTerms::RenoiseOnly
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lambda: f64,
    pub adam_g: AdamHyper,
    pub adam_c_yd: AdamHyper,
    pub adam_c_eta: AdamHyper,
    /// Generator updates.
    pub total_batches: u64,
    pub n_critic: usize,
    pub mode: TrainMode,
    pub terms: CriticTerms,
    pub residual_mode: ResidualMode,
    pub seed: u64,
    pub eval_every: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub clamp_min: f64,
    /// Held-out samples for the PSNR column; 0 leaves it blank.
    pub heldout: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lambda: 10.0,
            adam_g: AdamHyper::default(),
            adam_c_yd: AdamHyper::default(),
            adam_c_eta: AdamHyper::default(),
            total_batches: 1000,
            n_critic: 1,
            mode: TrainMode::DualCritic,
            terms: CriticTerms::Both,
            residual_mode: ResidualMode::Additive,
            seed: 0,
            eval_every: 100,
            checkpoint_every: 0,
            clamp_min: 1e-3,
            heldout: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size < 1 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.n_critic < 1 {
            return fail("n_critic must be >= 1".into());
        }
        if !(self.clamp_min > 0.0) {
            return fail(format!("clamp_min must be > 0, got {}", self.clamp_min));
        }
        if self.eval_every < 1 {
            return fail("eval_every must be >= 1".into());
        }
        for h in [self.adam_g, self.adam_c_yd, self.adam_c_eta] {
            h.validate()?;
        }
        Ok(())
    }
}

/// `yδ − ŷ`, or `yδ / ŷ` with `|ŷ|` pushed up to at least `clamp_min`.
pub fn residual(y_delta: &Tensor, y_hat: &Tensor, mode: ResidualMode, clamp_min: f64) -> Result<Tensor> {
    match mode {
        ResidualMode::Additive => y_delta.sub(y_hat),
        ResidualMode::Multiplicative => y_delta.div(&y_hat.clamp_abs_min(clamp_min)?),
    }
}

/// `ŷ + η` or `ŷ ∘ η`.
pub fn renoise(y_hat: &Tensor, eta: &Tensor, mode: ResidualMode) -> Result<Tensor> {
    match mode {
        ResidualMode::Additive => y_hat.add(eta),
        ResidualMode::Multiplicative => y_hat.mul(eta),
    }
}

/// Row-wise interpolation `ε_i real_i + (1 − ε_i) fake_i`.
pub fn interpolate(real: &Array, fake: &Array, eps: &[f64]) -> Result<Array> {
    if real.shape() != fake.shape() || real.shape().first() != Some(&eps.len()) {
        return Err(shape_err(
            "interpolate",
            format!("real {:?}, fake {:?}, {} weights", real.shape(), fake.shape(), eps.len()),
        ));
    }
    let per = real.numel() / eps.len();
    let data = real
        .data()
        .iter()
        .zip(fake.data())
        .enumerate()
        .map(|(i, (r, f))| {
            let e = eps[i / per];
            e * r + (1.0 - e) * f
        })
        .collect();
    Array::new(real.shape().to_vec(), data)
}

/// Batch mean of `relu(‖∇ₓ C(x̄)‖ − 1)²`, differentiable with respect to the
/// critic parameters in `params` (which must live on `tape`, if tracked).
pub fn gradient_penalty(
    spec: &NetworkSpec,
    params: &Bound,
    tape: &Tape,
    real: &Array,
    fake: &Array,
    eps: &[f64],
) -> Result<Tensor> {
    let xbar = tape.leaf(interpolate(real, fake, eps)?);
    let c = spec.forward(params, &xbar)?.sum()?;
    let g = backward(&c, &[&xbar], true)?.remove(0);
    g.l2norm(GP_NORM_EPS)?.add_scalar(-1.0)?.relu()?.square()?.mean()
}

/// Draws one ε ~ U[0, 1] per sample and evaluates [`gradient_penalty`].
pub fn gradient_penalty_sampled(
    spec: &NetworkSpec,
    params: &Bound,
    tape: &Tape,
    real: &Array,
    fake: &Array,
    rng: &mut Rng,
) -> Result<Tensor> {
    let eps: Vec<f64> = (0..real.shape()[0]).map(|_| rng.uniform()).collect();
    gradient_penalty(spec, params, tape, real, fake, &eps)
}

fn concat_batch(a: &Array, b: &Array) -> Result<Array> {
    if a.shape()[1..] != b.shape()[1..] {
        return Err(shape_err("concat_batch", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Array::new(shape, data)
}

/// One critic's Wasserstein loss `mean C(fake) − mean C(real) + λ·GP`.
pub struct CriticLoss {
    pub loss: Tensor,
    pub gp: f64,
    /// `mean C(real) − mean C(fake)`.
    pub w1: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn critic_loss(
    spec: &NetworkSpec,
    params: &Bound,
    tape: &Tape,
    real: &Array,
    fake: &Array,
    eps: &[f64],
    lambda: f64,
) -> Result<CriticLoss> {
    let b = real.shape()[0];
    if fake.shape() != real.shape() {
        return Err(shape_err("critic_loss", format!("real {:?} vs fake {:?}", real.shape(), fake.shape())));
    }
    // one forward over [fake; real] with ±1/b weights
    let both = Tensor::constant(concat_batch(fake, real)?);
    let weights: Vec<f64> = (0..2 * b).map(|i| if i < b { 1.0 } else { -1.0 } / b as f64).collect();
    let weights = Tensor::new(vec![2 * b, 1], weights)?;
    let wdist = spec.forward(params, &both)?.mul(&weights)?.sum()?;
    let gp = gradient_penalty(spec, params, tape, real, fake, eps)?;
    let w1 = -wdist.item();
    let gp_val = gp.item();
    let loss = if lambda == 0.0 { wdist } else { wdist.add(&gp.scale(lambda)?)? };
    Ok(CriticLoss { loss, gp: gp_val, w1 })
}

/// Inputs of one critic update.
#[derive(Clone, Debug)]
pub struct CriticBatch {
    /// Generator input: measurements (dual) or latent draws (plain WGAN).
    pub input: Array,
    /// Real samples for `C_yδ`: the same measurements (dual) or clean
    /// samples (plain WGAN).
    pub real: Array,
    /// Noise draw η₀ (dual mode).
    pub eta: Option<Array>,
    pub eps: Vec<f64>,
}

/// Inputs of one generator update.
#[derive(Clone, Debug)]
pub struct GeneratorBatch {
    pub input: Array,
    /// Fresh noise η₁ (dual mode).
    pub eta: Option<Array>,
    /// Clean targets (supervised mode).
    pub clean: Option<Array>,
}

#[derive(Clone, Debug, Default)]
pub struct CriticOutcome {
    pub loss_yd: Option<Tensor>,
    pub loss_eta: Option<Tensor>,
    pub gp_yd: Option<f64>,
    pub gp_eta: Option<f64>,
    pub w1_yd: Option<f64>,
    pub w1_eta: Option<f64>,
}

/// Scalars logged for one training step (blank when a term is inactive).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub loss_c_yd: Option<f64>,
    pub loss_c_eta: Option<f64>,
    pub loss_g: Option<f64>,
    pub gp_yd: Option<f64>,
    pub gp_eta: Option<f64>,
    pub w1_yd: Option<f64>,
    pub w1_eta: Option<f64>,
}

impl StepLosses {
    fn fields(&self) -> [(&'static str, Option<f64>); 7] {
        [
            ("loss_c_yd", self.loss_c_yd),
            ("loss_c_eta", self.loss_c_eta),
            ("loss_g", self.loss_g),
            ("gp_yd", self.gp_yd),
            ("gp_eta", self.gp_eta),
            ("w1_yd", self.w1_yd),
            ("w1_eta", self.w1_eta),
        ]
    }

    fn check_finite(&self, step: u64) -> Result<()> {
        if self.fields().iter().all(|(_, v)| v.is_none_or(f64::is_finite)) {
            return Ok(());
        }
        let detail = self
            .fields()
            .iter()
            .filter_map(|(k, v)| v.map(|v| format!("{k}={v}")))
            .collect::<Vec<_>>()
            .join(" ");
        Err(Error::NonFinite { step, detail })
    }
}

/// Per-column running sums between metric rows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Window {
    sums: [f64; 7],
    counts: [u64; 7],
}

impl Window {
    fn add(&mut self, l: &StepLosses) {
        for (i, (_, v)) in l.fields().iter().enumerate() {
            if let Some(v) = v {
                self.sums[i] += v;
                self.counts[i] += 1;
            }
        }
    }

    fn mean(&self, i: usize) -> Option<f64> {
        (self.counts[i] > 0).then(|| self.sums[i] / self.counts[i] as f64)
    }
}

/// One CSV row; loss columns are means over the steps since the last row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss_c_yd: Option<f64>,
    pub loss_c_eta: Option<f64>,
    pub loss_g: Option<f64>,
    pub gp_yd: Option<f64>,
    pub gp_eta: Option<f64>,
    pub w1_yd: Option<f64>,
    pub w1_eta: Option<f64>,
    pub psnr: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,loss_c_yd,loss_c_eta,loss_g,gp_yd,gp_eta,w1_yd,w1_eta,psnr";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            f(self.loss_c_yd),
            f(self.loss_c_eta),
            f(self.loss_g),
            f(self.gp_yd),
            f(self.gp_eta),
            f(self.w1_yd),
            f(self.w1_eta),
            f(self.psnr)
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let cols: Vec<&str> = line.trim_end().split(',').collect();
        if cols.len() != 9 {
            return Err(Error::Invalid(format!("metrics row needs 9 columns: {line}")));
        }
        let f = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| Error::Invalid(format!("bad number {s}")))
            }
        };
        Ok(Self {
            step: cols[0].parse().map_err(|_| Error::Invalid(format!("bad step {}", cols[0])))?,
            loss_c_yd: f(cols[1])?,
            loss_c_eta: f(cols[2])?,
            loss_g: f(cols[3])?,
            gp_yd: f(cols[4])?,
            gp_eta: f(cols[5])?,
            w1_yd: f(cols[6])?,
            w1_eta: f(cols[7])?,
            psnr: f(cols[8])?,
        })
    }
}

/// Reads a metrics CSV produced by [`MetricsWriter`].
pub fn read_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Invalid("metrics file lacks the expected header".into()));
    }
    lines.filter(|l| !l.is_empty()).map(MetricsRecord::parse_csv_row).collect()
}

pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(Self { out })
    }

    /// Continues an existing stream without a header.
    pub fn append(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, r: &MetricsRecord) -> Result<()> {
        writeln!(self.out, "{}", r.csv_row())?;
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

fn derive_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed.wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_TRAIN: u64 = 1;
const STREAM_HELDOUT: u64 = 2;

struct Heldout {
    clean: Array,
    noisy: Array,
}

/// Owns the three networks, their optimizers and the sampling stream.
pub struct Trainer {
    pub config: ConfigFile,
    pub gen_spec: NetworkSpec,
    pub critic_spec: NetworkSpec,
    pub g: ParamStore,
    pub c_yd: ParamStore,
    pub c_eta: ParamStore,
    pub opt_g: AdamState,
    pub opt_c_yd: AdamState,
    pub opt_c_eta: AdamState,
    rng: Rng,
    step: u64,
    clean: CleanSampler,
    noise: NoiseSource,
    heldout: Option<Heldout>,
    window: Window,
}

impl Trainer {
    pub fn new(config: ConfigFile) -> Result<Self> {
        config.validate()?;
        let clean = CleanSampler::new(config.data.clean.clone())?;
        let noise = NoiseSource::new(config.data.noise.clone())?;
        Self::with_sources(config, clean, noise)
    }

    /// Like [`Trainer::new`] with already loaded data sources.
    pub fn with_sources(config: ConfigFile, clean: CleanSampler, noise: NoiseSource) -> Result<Self> {
        config.validate()?;
        let shape = clean.sample_shape();
        let gen_spec = config.generator.build(&shape)?;
        let critic_spec = config.critic.build(&shape)?;
        let t = &config.train;
        let seed = t.seed;
        let g = ParamStore::init(&gen_spec, derive_seed(seed, 1))?;
        let c_yd = ParamStore::init(&critic_spec, derive_seed(seed, 2))?;
        let c_eta = ParamStore::init(&critic_spec, derive_seed(seed, 3))?;
        let opt_g = AdamState::new(&g, t.adam_g);
        let opt_c_yd = AdamState::new(&c_yd, t.adam_c_yd);
        let opt_c_eta = AdamState::new(&c_eta, t.adam_c_eta);
        let heldout = if t.heldout > 0 && t.mode != TrainMode::PlainWgan {
            let mut r = Rng::substream(seed, STREAM_HELDOUT);
            let y = clean.sample(t.heldout, &mut r)?;
            let e = noise.sample(y.shape(), &mut r)?;
            let yd = make_noisy(&y, &e, t.residual_mode)?;
            Some(Heldout { clean: y, noisy: yd })
        } else {
            None
        };
        Ok(Self {
            rng: Rng::substream(seed, STREAM_TRAIN),
            gen_spec,
            critic_spec,
            g,
            c_yd,
            c_eta,
            opt_g,
            opt_c_yd,
            opt_c_eta,
            step: 0,
            clean,
            noise,
            heldout,
            window: Window::default(),
            config,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn rng_state(&self) -> RngState {
        self.rng.state()
    }

    fn tc(&self) -> &TrainConfig {
        &self.config.train
    }

    /// `k` measurements `yδ = y ⊕ η'` together with their clean sources.
    fn measurements(&mut self, k: usize) -> Result<(Array, Array)> {
        let y = self.clean.sample(k, &mut self.rng)?;
        let e = self.noise.sample(y.shape(), &mut self.rng)?;
        let yd = make_noisy(&y, &e, self.config.train.residual_mode)?;
        Ok((y, yd))
    }

    fn noise_like(&mut self, like: &Array) -> Result<Array> {
        self.noise.sample(like.shape(), &mut self.rng)
    }

    pub fn draw_critic_batch(&mut self) -> Result<CriticBatch> {
        let k = self.tc().batch_size;
        let batch = match self.tc().mode {
            TrainMode::PlainWgan => {
                let real = self.clean.sample(k, &mut self.rng)?;
                let input = self.noise_like(&real)?;
                CriticBatch {
                    input,
                    real,
                    eta: None,
                    eps: Vec::new(),
                }
            }
            _ => {
                let (_, yd) = self.measurements(k)?;
                let eta = self.noise_like(&yd)?;
                CriticBatch {
                    input: yd.clone(),
                    real: yd,
                    eta: Some(eta),
                    eps: Vec::new(),
                }
            }
        };
        // one ε per sample, shared by both critics
        let eps = (0..k).map(|_| self.rng.uniform()).collect();
        Ok(CriticBatch { eps, ..batch })
    }

    pub fn draw_generator_batch(&mut self) -> Result<GeneratorBatch> {
        let k = self.tc().batch_size;
        match self.tc().mode {
            TrainMode::PlainWgan => {
                let shape: Vec<usize> = std::iter::once(k).chain(self.clean.sample_shape()).collect();
                let input = self.noise.sample(&shape, &mut self.rng)?;
                Ok(GeneratorBatch {
                    input,
                    eta: None,
                    clean: None,
                })
            }
            TrainMode::DualCritic => {
                let (_, yd) = self.measurements(k)?;
                let eta = self.noise_like(&yd)?;
                Ok(GeneratorBatch {
                    input: yd,
                    eta: Some(eta),
                    clean: None,
                })
            }
            TrainMode::SupervisedL2 => {
                let (y, yd) = self.measurements(k)?;
                Ok(GeneratorBatch {
                    input: yd,
                    eta: None,
                    clean: Some(y),
                })
            }
        }
    }

    /// Critic losses with the generator output held constant. `g` may be
    /// bound on `tape`; no gradient reaches it.
    pub fn critic_objective(
        &self,
        g: &Bound,
        c_yd: &Bound,
        c_eta: &Bound,
        tape: &Tape,
        batch: &CriticBatch,
    ) -> Result<CriticOutcome> {
        let t = self.tc();
        let y_hat = self.gen_spec.forward(g, &Tensor::constant(batch.input.clone()))?.detach();
        let mut out = CriticOutcome::default();
        match t.mode {
            TrainMode::SupervisedL2 => {}
            TrainMode::PlainWgan => {
                let l = critic_loss(&self.critic_spec, c_yd, tape, &batch.real, y_hat.value(), &batch.eps, t.lambda)?;
                out.loss_yd = Some(l.loss);
                out.gp_yd = Some(l.gp);
                out.w1_yd = Some(l.w1);
            }
            TrainMode::DualCritic => {
                let eta = batch
                    .eta
                    .as_ref()
                    .ok_or_else(|| Error::Invalid("dual-critic batch without noise".into()))?;
                let eta_t = Tensor::constant(eta.clone());
                if t.terms.renoise() {
                    let fake = renoise(&y_hat, &eta_t, t.residual_mode)?;
                    let l = critic_loss(&self.critic_spec, c_yd, tape, &batch.real, fake.value(), &batch.eps, t.lambda)?;
                    out.loss_yd = Some(l.loss);
                    out.gp_yd = Some(l.gp);
                    out.w1_yd = Some(l.w1);
                }
                if t.terms.residual() {
                    let yd = Tensor::constant(batch.input.clone());
                    let fake = residual(&yd, &y_hat, t.residual_mode, t.clamp_min)?;
                    let l = critic_loss(&self.critic_spec, c_eta, tape, eta, fake.value(), &batch.eps, t.lambda)?;
                    out.loss_eta = Some(l.loss);
                    out.gp_eta = Some(l.gp);
                    out.w1_eta = Some(l.w1);
                }
            }
        }
        Ok(out)
    }

    /// Generator loss for the active mode.
    pub fn generator_objective(&self, g: &Bound, c_yd: &Bound, c_eta: &Bound, batch: &GeneratorBatch) -> Result<Tensor> {
        let t = self.tc();
        let input = Tensor::constant(batch.input.clone());
        let y_hat = self.gen_spec.forward(g, &input)?;
        match t.mode {
            TrainMode::PlainWgan => self.critic_spec.forward(c_yd, &y_hat)?.mean()?.neg(),
            TrainMode::SupervisedL2 => {
                let y = batch
                    .clean
                    .as_ref()
                    .ok_or_else(|| Error::Invalid("supervised mode needs clean targets".into()))?;
                let k = y.shape()[0] as f64;
                y_hat.sub(&Tensor::constant(y.clone()))?.square()?.sum()?.scale(1.0 / k)
            }
            TrainMode::DualCritic => {
                let eta = batch
                    .eta
                    .as_ref()
                    .ok_or_else(|| Error::Invalid("dual-critic batch without noise".into()))?;
                let mut terms = Vec::new();
                if t.terms.renoise() {
                    let fake = renoise(&y_hat, &Tensor::constant(eta.clone()), t.residual_mode)?;
                    terms.push(self.critic_spec.forward(c_yd, &fake)?.mean()?);
                }
                if t.terms.residual() {
                    let res = residual(&input, &y_hat, t.residual_mode, t.clamp_min)?;
                    terms.push(self.critic_spec.forward(c_eta, &res)?.mean()?);
                }
                let mut total = terms[0].clone();
                for x in &terms[1..] {
                    total = total.add(x)?;
                }
                total.neg()
            }
        }
    }

    /// One update of each active critic.
    pub fn critic_step(&mut self, batch: &CriticBatch) -> Result<StepLosses> {
        let tape = Tape::new();
        let g = self.g.constants();
        let b_yd = self.c_yd.bind(&tape);
        let b_eta = self.c_eta.bind(&tape);
        let out = self.critic_objective(&g, &b_yd, &b_eta, &tape, batch)?;
        let losses = StepLosses {
            loss_c_yd: out.loss_yd.as_ref().map(Tensor::item),
            loss_c_eta: out.loss_eta.as_ref().map(Tensor::item),
            loss_g: None,
            gp_yd: out.gp_yd,
            gp_eta: out.gp_eta,
            w1_yd: out.w1_yd,
            w1_eta: out.w1_eta,
        };
        losses.check_finite(self.step + 1)?;
        if let Some(l) = &out.loss_yd {
            let grads = b_yd.grads(l)?;
            adam_step(&mut self.c_yd, &grads, &mut self.opt_c_yd)?;
        }
        if let Some(l) = &out.loss_eta {
            let grads = b_eta.grads(l)?;
            adam_step(&mut self.c_eta, &grads, &mut self.opt_c_eta)?;
        }
        Ok(losses)
    }

    /// One generator update with the critics held constant.
    pub fn generator_step(&mut self, batch: &GeneratorBatch) -> Result<f64> {
        let tape = Tape::new();
        let g = self.g.bind(&tape);
        let loss = self.generator_objective(&g, &self.c_yd.constants(), &self.c_eta.constants(), batch)?;
        let v = loss.item();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                step: self.step + 1,
                detail: format!("loss_g={v}"),
            });
        }
        let grads = g.grads(&loss)?;
        adam_step(&mut self.g, &grads, &mut self.opt_g)?;
        Ok(v)
    }

    /// `n_critic` critic updates then one generator update.
    pub fn train_step(&mut self) -> Result<StepLosses> {
        let mut last = StepLosses::default();
        if self.tc().mode != TrainMode::SupervisedL2 {
            for _ in 0..self.tc().n_critic {
                let b = self.draw_critic_batch()?;
                let l = self.critic_step(&b)?;
                self.window.add(&l);
                last = l;
            }
        }
        let b = self.draw_generator_batch()?;
        let lg = self.generator_step(&b)?;
        let gl = StepLosses {
            loss_g: Some(lg),
            ..StepLosses::default()
        };
        self.window.add(&gl);
        last.loss_g = Some(lg);
        self.step += 1;
        Ok(last)
    }

    /// Mean per-sample PSNR of the generator on the held-out set.
    pub fn heldout_psnr(&self) -> Result<Option<f64>> {
        let Some(h) = &self.heldout else { return Ok(None) };
        let out = apply(&self.gen_spec, &self.g, &h.noisy, 1)?;
        let p = batch_psnr(&h.clean, &out, self.config.peak())?;
        Ok(Some(p.iter().sum::<f64>() / p.len() as f64))
    }

    /// Metrics row for the current step; resets the averaging window.
    pub fn take_record(&mut self) -> Result<MetricsRecord> {
        let w = std::mem::take(&mut self.window);
        Ok(MetricsRecord {
            step: self.step,
            loss_c_yd: w.mean(0),
            loss_c_eta: w.mean(1),
            loss_g: w.mean(2),
            gp_yd: w.mean(3),
            gp_eta: w.mean(4),
            w1_yd: w.mean(5),
            w1_eta: w.mean(6),
            psnr: self.heldout_psnr()?,
        })
    }

    /// Trains until `total_batches`, writing a metrics row every
    /// `eval_every` steps and checkpoints into `checkpoint_dir`.
    pub fn run<W: Write>(&mut self, metrics: &mut MetricsWriter<W>, checkpoint_dir: Option<&Path>) -> Result<()> {
        self.run_until(self.tc().total_batches, metrics, checkpoint_dir)
    }

    pub fn run_until<W: Write>(
        &mut self,
        until: u64,
        metrics: &mut MetricsWriter<W>,
        checkpoint_dir: Option<&Path>,
    ) -> Result<()> {
        while self.step < until {
            self.train_step()?;
            if self.step.is_multiple_of(self.tc().eval_every) {
                let r = self.take_record()?;
                metrics.write(&r)?;
            }
            let every = self.tc().checkpoint_every;
            if let Some(dir) = checkpoint_dir {
                if every > 0 && self.step.is_multiple_of(every) {
                    self.to_checkpoint()?.save(&checkpoint_path(dir, self.step))?;
                }
            }
        }
        if let Some(dir) = checkpoint_dir {
            self.to_checkpoint()?.save(&dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut records = Vec::new();
        let mut push = |prefix: &str, entries: &mut dyn Iterator<Item = (&String, &Array)>| {
            for (name, a) in entries {
                records.push(Record {
                    name: format!("{prefix}{name}"),
                    shape: a.shape().to_vec(),
                    data: a.data().to_vec(),
                });
            }
        };
        push("g.", &mut self.g.iter());
        push("c_yd.", &mut self.c_yd.iter());
        push("c_eta.", &mut self.c_eta.iter());
        for (net, opt) in [("g", &self.opt_g), ("c_yd", &self.opt_c_yd), ("c_eta", &self.opt_c_eta)] {
            push(&format!("opt.{net}.m."), &mut opt.m.iter());
            push(&format!("opt.{net}.v."), &mut opt.v.iter());
        }
        let meta = CheckpointMeta {
            config: self.config.clone(),
            sample_shape: self.clean.sample_shape(),
            step: self.step,
            rng: self.rng.state(),
            adam_steps: [self.opt_g.step, self.opt_c_yd.step, self.opt_c_eta.step],
            window: self.window.clone(),
        };
        Ok(Checkpoint {
            records,
            meta: serde_json::to_value(&meta)?,
        })
    }

    /// Restores a run. Data sources are reloaded from the stored config.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::Config(format!("checkpoint metadata: {e}")))?;
        let mut t = Self::new(meta.config.clone())?;
        t.restore(ckpt, meta)?;
        Ok(t)
    }

    /// Restores a run onto already loaded data sources.
    pub fn from_checkpoint_with_sources(ckpt: &Checkpoint, clean: CleanSampler, noise: NoiseSource) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::Config(format!("checkpoint metadata: {e}")))?;
        let mut t = Self::with_sources(meta.config.clone(), clean, noise)?;
        t.restore(ckpt, meta)?;
        Ok(t)
    }

    fn restore(&mut self, ckpt: &Checkpoint, meta: CheckpointMeta) -> Result<()> {
        let load = |prefix: &str, store: &mut dyn FnMut(&str, Array) -> Result<()>, names: Vec<String>| -> Result<()> {
            for n in names {
                let r = ckpt.record(&format!("{prefix}{n}"))?;
                store(&n, Array::new(r.shape.clone(), r.data.clone())?)?;
            }
            Ok(())
        };
        for (prefix, store) in [("g.", &mut self.g), ("c_yd.", &mut self.c_yd), ("c_eta.", &mut self.c_eta)] {
            let names: Vec<String> = store.names().cloned().collect();
            load(prefix, &mut |n, a| store.set(n, a), names)?;
        }
        let [sg, syd, seta] = meta.adam_steps;
        for (net, opt, step) in [
            ("g", &mut self.opt_g, sg),
            ("c_yd", &mut self.opt_c_yd, syd),
            ("c_eta", &mut self.opt_c_eta, seta),
        ] {
            opt.step = step;
            for (kind, map) in [("m", &mut opt.m), ("v", &mut opt.v)] {
                let names: Vec<String> = map.keys().cloned().collect();
                let mut set = |n: &str, a: Array| -> Result<()> {
                    let slot = map.get_mut(n).expect("name from map");
                    if slot.shape() != a.shape() {
                        return Err(shape_err("restore", format!("{n}: {:?} vs {:?}", slot.shape(), a.shape())));
                    }
                    *slot = a;
                    Ok(())
                };
                load(&format!("opt.{net}.{kind}."), &mut set, names)?;
            }
        }
        self.rng = Rng::from_state(&meta.rng)?;
        self.step = meta.step;
        self.window = meta.window;
        Ok(())
    }
}

pub const FINAL_CHECKPOINT: &str = "final.gtfd";

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint-{step:08}.gtfd"))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    config: ConfigFile,
    sample_shape: Vec<usize>,
    step: u64,
    rng: RngState,
    adam_steps: [u64; 3],
    window: Window,
}

/// Generator parameters and spec from a checkpoint, for inference.
pub fn load_generator(ckpt: &Checkpoint) -> Result<(ConfigFile, NetworkSpec, ParamStore)> {
    let meta: CheckpointMeta = serde_json::from_value(ckpt.meta.clone())
        .map_err(|e| Error::Config(format!("checkpoint metadata: {e}")))?;
    let spec = meta.config.generator.build(&meta.sample_shape)?;
    let mut entries = BTreeMap::new();
    for p in spec.params()? {
        let r = ckpt.record(&format!("g.{}", p.name))?;
        if r.shape != p.shape {
            return Err(shape_err("load_generator", format!("{}: {:?} vs {:?}", p.name, r.shape, p.shape)));
        }
        entries.insert(p.name.clone(), Array::new(r.shape.clone(), r.data.clone())?);
    }
    Ok((meta.config, spec, ParamStore::from_entries(entries, 0)))
}
