use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use otdenoise::checkpoint::Checkpoint;
use otdenoise::config::ConfigFile;
use otdenoise::data::{make_noisy, CleanSampler, CleanSource, NoiseModel, NoiseSource, ResidualMode};
use otdenoise::eval::{apply, denoise_heldout, psnr_arrays, report};
use otdenoise::oracle::oracle_row;
use otdenoise::rawio::{read_raw, write_pnm, write_raw};
use otdenoise::recon::{lambda_line_search, tv_reconstruct, Operator};
use otdenoise::rng::Rng;
use otdenoise::train::{load_generator, MetricsWriter, Trainer};
use otdenoise::Array;

#[derive(Parser)]
#[command(name = "otdenoise", version, about = "Denoisers trained from unpaired noisy data and noise samples")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a denoiser from a JSON config.
    Train(TrainArgs),
    /// Apply a trained denoiser to a raw file.
    Denoise(DenoiseArgs),
    /// PSNR of a trained denoiser on fresh held-out data.
    Eval(EvalArgs),
    /// Closed-form factors of the scalar linear-Gaussian case, as CSV.
    Oracle(OracleArgs),
    /// Dump clean, noise and noisy batches as raw files.
    Datagen(DatagenArgs),
    /// TV-regularized deblurring, optionally after denoising.
    Recon(ReconArgs),
}

#[derive(Args)]
struct SeedArg {
    /// RNG seed; a random one is chosen and printed when omitted.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for metrics.csv, config.json and checkpoints.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Continue from a checkpoint; appends to the existing metrics file.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override total_batches.
    #[arg(long)]
    steps: Option<u64>,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct DenoiseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 512)]
    n: usize,
    /// Write the report here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Directory for clean.raw, noisy.raw and denoised.raw.
    #[arg(long)]
    dump: Option<PathBuf>,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct OracleArgs {
    /// Noise levels; may repeat or be comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5, 1.0, 2.0])]
    sigma: Vec<f64>,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct DatagenArgs {
    /// Clean source as JSON, e.g. '{"kind":"sine"}'.
    #[arg(long)]
    clean: Option<String>,
    /// Noise model as JSON, e.g. '{"kind":"gaussian","sigma":1.0}'.
    #[arg(long)]
    noise: Option<String>,
    /// Take the data block from a training config instead.
    #[arg(long, conflicts_with_all = ["clean", "noise"])]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, value_enum, default_value = "additive")]
    residual_mode: ModeArg,
    /// Output prefix; writes <prefix>.clean.raw, .noise.raw and .noisy.raw.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Additive,
    Multiplicative,
}

impl From<ModeArg> for ResidualMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Additive => ResidualMode::Additive,
            ModeArg::Multiplicative => ResidualMode::Multiplicative,
        }
    }
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum OperatorArg {
    Blur,
    Identity,
}

#[derive(Args)]
struct ReconArgs {
    /// Measurements b: [H, W], [C, H, W] or a batch [N, C, H, W].
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Denoise with this checkpoint's generator before reconstructing.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "blur")]
    operator: OperatorArg,
    #[arg(long, default_value_t = 0.01)]
    lambda: f64,
    /// Pick λ on the grid lambda·2^j, |j| <= 6, by PSNR against --reference.
    #[arg(long, requires = "reference")]
    line_search: bool,
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    peak: f64,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    /// Also write an 8-bit PGM/PPM of the first image, scaled from [0, 1].
    #[arg(long)]
    pnm: Option<PathBuf>,
    #[command(flatten)]
    seed: SeedArg,
}

fn resolve_seed(s: &SeedArg) -> u64 {
    s.seed.unwrap_or_else(|| {
        use std::hash::{BuildHasher, Hasher};
        let mut h = std::collections::hash_map::RandomState::new().build_hasher();
        h.write_u128(
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_nanos())
                .unwrap_or(0),
        );
        let seed = h.finish();
        eprintln!("seed: {seed}");
        seed
    })
}

fn threads() -> anyhow::Result<usize> {
    match std::env::var("GTFD_THREADS") {
        Ok(v) => {
            let n: usize = v.parse().with_context(|| format!("GTFD_THREADS={v} is not a count"))?;
            Ok(n.max(1))
        }
        Err(_) => Ok(1),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::Train(a) => train(a),
        Cmd::Denoise(a) => denoise(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Oracle(a) => oracle(a),
        Cmd::Datagen(a) => datagen(a),
        Cmd::Recon(a) => recon(a),
    }
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let metrics_path = a.out.join("metrics.csv");
    let (mut trainer, mut metrics) = match &a.resume {
        Some(ckpt) => {
            if a.seed.seed.is_some() || a.config.is_some() {
                bail!("--resume takes config and seed from the checkpoint");
            }
            let mut t = Trainer::from_checkpoint(&Checkpoint::load(ckpt)?)?;
            if let Some(s) = a.steps {
                t.config.train.total_batches = s;
            }
            let f = OpenOptions::new().append(true).create(true).open(&metrics_path)?;
            (t, MetricsWriter::append(f))
        }
        None => {
            let path = a.config.as_ref().context("--config is required unless resuming")?;
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut cfg = ConfigFile::from_json(&text).with_context(|| format!("config {}", path.display()))?;
            let raw: serde_json::Value = serde_json::from_str(&text)?;
            let has_seed = raw.pointer("/train/seed").is_some();
            cfg.train.seed = match (a.seed.seed, has_seed) {
                (Some(s), _) => s,
                (None, true) => cfg.train.seed,
                (None, false) => resolve_seed(&a.seed),
            };
            if let Some(s) = a.steps {
                cfg.train.total_batches = s;
            }
            cfg.validate()?;
            std::fs::write(a.out.join("config.json"), cfg.to_json())?;
            let t = Trainer::new(cfg)?;
            (t, MetricsWriter::new(std::fs::File::create(&metrics_path)?)?)
        }
    };
    trainer.run(&mut metrics, Some(&a.out))?;
    eprintln!(
        "trained {} steps; metrics in {}, checkpoint in {}",
        trainer.step(),
        metrics_path.display(),
        a.out.join(otdenoise::train::FINAL_CHECKPOINT).display()
    );
    Ok(())
}

/// Adds a batch axis when `x` is a single sample.
fn as_batch(x: Array, sample: &[usize]) -> anyhow::Result<(Array, bool)> {
    if x.shape() == sample {
        let mut s = vec![1];
        s.extend_from_slice(sample);
        return Ok((x.reshaped(s)?, true));
    }
    if x.shape().len() == sample.len() + 1 && x.shape()[1..] == *sample {
        return Ok((x, false));
    }
    bail!("input shape {:?} does not match samples {:?}", x.shape(), sample)
}

fn denoise(a: DenoiseArgs) -> anyhow::Result<()> {
    let seed = resolve_seed(&a.seed);
    let (_, spec, params) = load_generator(&Checkpoint::load(&a.checkpoint)?)?;
    let (x, _) = read_raw(&a.input)?;
    let (batch, single) = as_batch(x, &spec.input_shape)?;
    let mut out = apply(&spec, &params, &batch, threads()?)?;
    if single {
        out = out.reshaped(spec.input_shape.clone())?;
    }
    let model = serde_json::json!({"denoised": a.input.display().to_string(), "checkpoint": a.checkpoint.display().to_string()});
    write_raw(&a.output, &out, Some(seed), model)?;
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let seed = resolve_seed(&a.seed);
    let (cfg, spec, params) = load_generator(&Checkpoint::load(&a.checkpoint)?)?;
    let clean = CleanSampler::new(cfg.data.clean.clone())?;
    let noise = NoiseSource::new(cfg.data.noise.clone())?;
    let t = denoise_heldout(&spec, &params, &clean, &noise, a.n, cfg.train.residual_mode, seed, threads()?)?;
    let r = report(&t, cfg.peak())?;
    let json = serde_json::to_string_pretty(&r)?;
    match &a.output {
        Some(p) => std::fs::write(p, json + "\n")?,
        None => println!("{json}"),
    }
    if let Some(dir) = &a.dump {
        std::fs::create_dir_all(dir)?;
        let model = serde_json::json!({"checkpoint": a.checkpoint.display().to_string(), "data": cfg.data});
        for (name, arr) in [("clean", &t.clean), ("noisy", &t.noisy), ("denoised", &t.denoised)] {
            write_raw(&dir.join(format!("{name}.raw")), arr, Some(seed), model.clone())?;
        }
    }
    Ok(())
}

fn oracle(a: OracleArgs) -> anyhow::Result<()> {
    // deterministic; the seed is accepted for a uniform interface
    let _ = a.seed.seed;
    let mut out = std::io::stdout().lock();
    writeln!(out, "sigma,g1,g2,map,argmin_obs1,argmin_obs2")?;
    for s in a.sigma {
        let r = oracle_row(s)?;
        writeln!(
            out,
            "{},{:.5},{:.5},{:.5},{:.3},{:.3}",
            r.sigma, r.g1, r.g2, r.map, r.argmin_obs1, r.argmin_obs2
        )?;
    }
    Ok(())
}

fn datagen(a: DatagenArgs) -> anyhow::Result<()> {
    let seed = resolve_seed(&a.seed);
    let (clean, noise): (CleanSource, Option<NoiseModel>) = match &a.config {
        Some(p) => {
            let cfg = ConfigFile::load(p)?;
            (cfg.data.clean, Some(cfg.data.noise))
        }
        None => {
            let c = a.clean.as_deref().context("--clean or --config is required")?;
            let clean = serde_json::from_str(c).context("parsing --clean")?;
            let noise = a.noise.as_deref().map(serde_json::from_str).transpose().context("parsing --noise")?;
            (clean, noise)
        }
    };
    let sampler = CleanSampler::new(clean.clone())?;
    let mut rng = Rng::new(seed);
    let y = sampler.sample(a.n, &mut rng)?;
    let path = |suffix: &str| -> PathBuf {
        let mut s = a.out.clone().into_os_string();
        s.push(format!(".{suffix}.raw"));
        PathBuf::from(s)
    };
    let cj = serde_json::to_value(&clean)?;
    write_raw(&path("clean"), &y, Some(seed), serde_json::json!({"clean": cj}))?;
    if let Some(nm) = noise {
        let src = NoiseSource::new(nm.clone())?;
        let eta = src.sample(y.shape(), &mut rng)?;
        let mode: ResidualMode = a.residual_mode.into();
        let yd = make_noisy(&y, &eta, mode)?;
        let model = serde_json::json!({"clean": cj, "noise": nm, "residual_mode": mode});
        write_raw(&path("noise"), &eta, Some(seed), model.clone())?;
        write_raw(&path("noisy"), &yd, Some(seed), model)?;
    }
    Ok(())
}

/// Splits `[N, C, H, W]` into images; `[H, W]` and `[C, H, W]` pass through.
fn images(x: &Array) -> anyhow::Result<Vec<Array>> {
    match x.shape().len() {
        2 | 3 => Ok(vec![x.clone()]),
        4 => {
            let per = x.numel() / x.shape()[0];
            x.data()
                .chunks(per)
                .map(|c| Ok(Array::new(x.shape()[1..].to_vec(), c.to_vec())?))
                .collect()
        }
        _ => bail!("recon needs [H, W], [C, H, W] or [N, C, H, W], got {:?}", x.shape()),
    }
}

fn recon(a: ReconArgs) -> anyhow::Result<()> {
    let seed = resolve_seed(&a.seed);
    let op = match a.operator {
        OperatorArg::Blur => Operator::Blur,
        OperatorArg::Identity => Operator::Identity,
    };
    let (b, _) = read_raw(&a.input)?;
    let shape = b.shape().to_vec();
    let mut input = b;
    if let Some(ck) = &a.checkpoint {
        let (_, spec, params) = load_generator(&Checkpoint::load(ck)?)?;
        let (batch, single) = as_batch(input, &spec.input_shape)?;
        let out = apply(&spec, &params, &batch, threads()?)?;
        input = if single { out.reshaped(shape.clone())? } else { out };
    }
    let parts = images(&input)?;
    let solve = |lambda: f64| -> otdenoise::Result<Array> {
        let mut out = Vec::with_capacity(parts.len());
        for p in &parts {
            out.push(tv_reconstruct(p, op, lambda, a.iters, a.tol)?.image);
        }
        let data = out.iter().flat_map(|p| p.data().iter().copied()).collect();
        Array::new(shape.clone(), data)
    };
    let (x, lambda, search) = if a.line_search {
        let reference = read_raw(a.reference.as_ref().expect("clap enforces --reference"))?.0;
        let ls = lambda_line_search(solve, a.lambda, 2.0, 6, &reference, a.peak)?;
        (solve(ls.lambda)?, ls.lambda, Some(ls))
    } else {
        (solve(a.lambda)?, a.lambda, None)
    };
    if let Some(r) = &a.reference {
        if !a.line_search {
            let reference = read_raw(r)?.0;
            eprintln!("psnr: {:.4}", psnr_arrays(&reference, &x, a.peak)?);
        }
    }
    let model = serde_json::json!({
        "recon": a.input.display().to_string(),
        "lambda": lambda,
        "denoised_with": a.checkpoint.as_ref().map(|p| p.display().to_string()),
        "line_search": search,
    });
    if let Some(ls) = &search {
        println!("{}", serde_json::to_string_pretty(ls)?);
    }
    write_raw(&a.output, &x, Some(seed), model)?;
    if let Some(p) = &a.pnm {
        let first = images(&x)?.remove(0);
        let first = if first.shape().len() == 2 {
            let mut s = vec![1];
            s.extend_from_slice(first.shape());
            first.reshaped(s)?
        } else {
            first
        };
        write_pnm(p, &first, 0.0, 1.0)?;
    }
    Ok(())
}
