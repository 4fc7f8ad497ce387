use std::collections::BTreeMap;

use otdenoise::checkpoint::Checkpoint;
use otdenoise::config::{sine_example, ConfigFile, CriticArch, DataConfig, GeneratorArch};
use otdenoise::data::{CleanSource, Localized, NoiseModel, ResidualMode};
use otdenoise::nn::{AutoencoderWidths, Layer, NetworkSpec, ParamStore};
use otdenoise::train::*;
use otdenoise::{Array, Error, Tape, Tensor};

fn small_sine(seed: u64) -> ConfigFile {
    let mut cfg = sine_example(100, seed);
    cfg.generator = GeneratorArch::Autoencoder1d {
        widths: AutoencoderWidths {
            channels: [4, 4, 8],
            bottleneck: 8,
        },
    };
    cfg.critic = CriticArch::Resnet {
        base_channels: 4,
        blocks: 2,
    };
    cfg.train.eval_every = 10;
    cfg.train.heldout = 16;
    cfg
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn residual_examples() {
    let yd = t(&[1, 3], &[1.0, 2.0, -1.0]);
    let yh = t(&[1, 3], &[0.5, 0.5, 0.0]);
    let r = residual(&yd, &yh, ResidualMode::Additive, 1e-3).unwrap();
    assert_eq!(r.data(), &[0.5, 1.5, -1.0]);
    let r = residual(&yd, &yh, ResidualMode::Multiplicative, 1e-3).unwrap();
    assert_eq!(r.data()[..2], [2.0, 4.0]);
    assert!((r.data()[2].abs() - 1000.0).abs() < 1e-9);
    let zero = Tensor::zeros(&[1, 3]);
    assert_eq!(renoise(&yh, &zero, ResidualMode::Additive).unwrap().data(), yh.data());
    let ones = Tensor::ones(&[1, 3]);
    assert_eq!(renoise(&yh, &ones, ResidualMode::Multiplicative).unwrap().data(), yh.data());
}

fn scalar_critic(w: f64) -> (NetworkSpec, ParamStore) {
    let spec = NetworkSpec::new(vec![1], vec![Layer::Dense { out: 1, bias: false }]).unwrap();
    let mut e = BTreeMap::new();
    e.insert("00.dense.weight".to_string(), Array::new(vec![1, 1], vec![w]).unwrap());
    (spec, ParamStore::from_entries(e, 0))
}

#[test]
fn penalty_examples() {
    let real = Array::new(vec![4, 1], vec![1.0, -2.0, 0.3, 5.0]).unwrap();
    let fake = Array::new(vec![4, 1], vec![0.0, 1.0, 2.0, -1.0]).unwrap();
    let eps = [0.1, 0.5, 0.9, 0.0];
    for (w, want) in [(1.0, 0.0), (2.0, 1.0), (0.5, 0.0), (-3.0, 4.0)] {
        let (spec, p) = scalar_critic(w);
        let tape = Tape::new();
        let gp = gradient_penalty(&spec, &p.bind(&tape), &tape, &real, &fake, &eps).unwrap();
        assert!((gp.item() - want).abs() < 1e-9, "w={w}: {}", gp.item());
    }
}

#[test]
fn interpolation_is_per_sample() {
    let real = Array::new(vec![2, 2], vec![1.0, 1.0, 4.0, 4.0]).unwrap();
    let fake = Array::new(vec![2, 2], vec![0.0, 0.0, 0.0, 2.0]).unwrap();
    let x = interpolate(&real, &fake, &[0.25, 0.5]).unwrap();
    assert_eq!(x.data(), &[0.25, 0.25, 2.0, 3.0]);
    assert!(interpolate(&real, &fake, &[0.5]).is_err());
}

fn penalty_critic() -> (NetworkSpec, ParamStore) {
    let spec = NetworkSpec::new(
        vec![1, 8],
        vec![
            Layer::Conv {
                out_channels: 3,
                kernel: 3,
                bias: true,
            },
            Layer::LeakyRelu,
            Layer::Flatten,
            Layer::Dense { out: 1, bias: true },
        ],
    )
    .unwrap();
    let mut p = ParamStore::init(&spec, 11).unwrap();
    let names: Vec<String> = p.names().cloned().collect();
    for n in names {
        for v in p.get_mut(&n).unwrap().data_mut() {
            *v *= 3.0;
        }
    }
    (spec, p)
}

#[test]
fn penalty_parameter_gradient_matches_finite_differences() {
    let (spec, p) = penalty_critic();
    let mut rng = otdenoise::rng::Rng::new(5);
    let real = Array::new(vec![3, 1, 8], rng.normals(24, 1.0)).unwrap();
    let fake = Array::new(vec![3, 1, 8], rng.normals(24, 1.0)).unwrap();
    let eps = [0.2, 0.6, 0.9];
    let gp_at = |p: &ParamStore| {
        let tape = Tape::new();
        gradient_penalty(&spec, &p.constants(), &tape, &real, &fake, &eps).unwrap().item()
    };
    let tape = Tape::new();
    let bound = p.bind(&tape);
    let gp = gradient_penalty(&spec, &bound, &tape, &real, &fake, &eps).unwrap();
    assert!(gp.item() > 0.0, "penalty inactive");
    let grads = bound.grads(&gp).unwrap();
    let h = 1e-6;
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for (name, g) in &grads {
        for j in 0..g.numel() {
            let mut q = p.clone();
            q.get_mut(name).unwrap().data_mut()[j] += h;
            let up = gp_at(&q);
            q.get_mut(name).unwrap().data_mut()[j] -= 2.0 * h;
            let down = gp_at(&q);
            let fd = (up - down) / (2.0 * h);
            diff += (fd - g.data()[j]).powi(2);
            norm += g.data()[j].powi(2);
        }
    }
    let rel = diff.sqrt() / norm.sqrt().max(1e-12);
    assert!(rel < 1e-3, "relative error {rel}");
}

fn zero_store(p: &mut ParamStore) {
    let names: Vec<String> = p.names().cloned().collect();
    for n in names {
        p.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

#[test]
fn zero_critics_give_zero_losses() {
    let mut tr = Trainer::new(small_sine(1)).unwrap();
    zero_store(&mut tr.c_yd);
    zero_store(&mut tr.c_eta);
    let b = tr.draw_critic_batch().unwrap();
    let tape = Tape::new();
    let out = tr
        .critic_objective(&tr.g.constants(), &tr.c_yd.bind(&tape), &tr.c_eta.bind(&tape), &tape, &b)
        .unwrap();
    for v in [out.loss_yd.unwrap().item(), out.loss_eta.unwrap().item(), out.w1_yd.unwrap(), out.w1_eta.unwrap()] {
        assert_eq!(v, 0.0);
    }
    let gb = tr.draw_generator_batch().unwrap();
    let lg = tr
        .generator_objective(&tr.g.constants(), &tr.c_yd.constants(), &tr.c_eta.constants(), &gb)
        .unwrap();
    assert_eq!(lg.item(), 0.0);
}

#[test]
fn critic_losses_do_not_reach_the_generator() {
    let mut tr = Trainer::new(small_sine(2)).unwrap();
    let b = tr.draw_critic_batch().unwrap();
    let tape = Tape::new();
    let g = tr.g.bind(&tape);
    let out = tr
        .critic_objective(&g, &tr.c_yd.bind(&tape), &tr.c_eta.bind(&tape), &tape, &b)
        .unwrap();
    let total = out.loss_yd.unwrap().add(&out.loss_eta.unwrap()).unwrap();
    for (name, grad) in g.grads(&total).unwrap() {
        assert!(grad.data().iter().all(|&v| v == 0.0), "{name}");
    }
}

#[test]
fn each_step_updates_only_its_networks() {
    let mut tr = Trainer::new(small_sine(3)).unwrap();
    let (g0, cy0, ce0) = (tr.g.clone(), tr.c_yd.clone(), tr.c_eta.clone());
    let b = tr.draw_critic_batch().unwrap();
    tr.critic_step(&b).unwrap();
    assert_eq!(tr.g, g0);
    assert_ne!(tr.c_yd, cy0);
    assert_ne!(tr.c_eta, ce0);
    let (cy1, ce1) = (tr.c_yd.clone(), tr.c_eta.clone());
    let gb = tr.draw_generator_batch().unwrap();
    tr.generator_step(&gb).unwrap();
    assert_ne!(tr.g, g0);
    assert_eq!(tr.c_yd, cy1);
    assert_eq!(tr.c_eta, ce1);
    assert_eq!((tr.opt_g.step, tr.opt_c_yd.step, tr.opt_c_eta.step), (1, 1, 1));
}

#[test]
fn single_term_variants_touch_one_critic() {
    for (terms, yd_moves) in [(CriticTerms::RenoiseOnly, true), (CriticTerms::ResidualOnly, false)] {
        let mut cfg = small_sine(4);
        cfg.train.terms = terms;
        let mut tr = Trainer::new(cfg).unwrap();
        let (cy0, ce0) = (tr.c_yd.clone(), tr.c_eta.clone());
        let l = tr.train_step().unwrap();
        assert_eq!(tr.c_yd != cy0, yd_moves);
        assert_eq!(tr.c_eta != ce0, !yd_moves);
        assert_eq!(l.loss_c_yd.is_some(), yd_moves);
        assert_eq!(l.loss_c_eta.is_some(), !yd_moves);
    }
}

fn run_csv(cfg: ConfigFile) -> (String, Trainer) {
    let mut tr = Trainer::new(cfg).unwrap();
    let mut w = MetricsWriter::new(Vec::new()).unwrap();
    tr.run(&mut w, None).unwrap();
    (String::from_utf8(w.into_inner()).unwrap(), tr)
}

#[test]
fn fixed_seed_runs_are_identical() {
    let (a, ta) = run_csv(small_sine(7));
    let (b, tb) = run_csv(small_sine(7));
    assert_eq!(a, b);
    assert_eq!(ta.g, tb.g);
    assert_eq!(ta.c_eta, tb.c_eta);
    let rows = read_metrics(&a).unwrap();
    assert_eq!(rows.len(), 10);
    assert_eq!(rows.last().unwrap().step, 100);
    assert!(rows.iter().all(|r| r.psnr.is_some() && r.w1_yd.is_some()));
    let (c, _) = run_csv(small_sine(8));
    assert_ne!(a, c);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (full, straight) = run_csv(small_sine(9));
    let mut tr = Trainer::new(small_sine(9)).unwrap();
    let mut w = MetricsWriter::new(Vec::new()).unwrap();
    // stop mid-window so the accumulators must survive too
    tr.run_until(45, &mut w, None).unwrap();
    let bytes = tr.to_checkpoint().unwrap().encode().unwrap();
    drop(tr);
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
    assert_eq!(resumed.step(), 45);
    resumed.run(&mut w, None).unwrap();
    let text = String::from_utf8(w.into_inner()).unwrap();
    assert_eq!(text, full);
    assert_eq!(resumed.g, straight.g);
    assert_eq!(resumed.c_yd, straight.c_yd);
    assert_eq!(resumed.opt_c_eta, straight.opt_c_eta);
    assert_eq!(resumed.rng_state(), straight.rng_state());
}

#[test]
fn checkpoints_land_on_disk_and_load_for_inference() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_sine(10);
    cfg.train.total_batches = 20;
    cfg.train.checkpoint_every = 10;
    let mut tr = Trainer::new(cfg).unwrap();
    let mut w = MetricsWriter::new(Vec::new()).unwrap();
    tr.run(&mut w, Some(dir.path())).unwrap();
    assert!(checkpoint_path(dir.path(), 10).exists());
    assert!(checkpoint_path(dir.path(), 20).exists());
    let c = Checkpoint::load(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
    let (cfg, spec, params) = load_generator(&c).unwrap();
    assert_eq!(cfg, tr.config);
    assert_eq!(spec, tr.gen_spec);
    assert_eq!(params.iter().collect::<Vec<_>>(), tr.g.iter().collect::<Vec<_>>());
}

#[test]
fn non_finite_losses_abort_with_the_step() {
    let mut tr = Trainer::new(small_sine(11)).unwrap();
    tr.train_step().unwrap();
    let name = tr.g.names().next().unwrap().clone();
    tr.g.get_mut(&name).unwrap().data_mut()[0] = f64::NAN;
    match tr.train_step() {
        Err(Error::NonFinite { step, detail }) => {
            assert_eq!(step, 2);
            assert!(detail.contains("NaN"), "{detail}");
        }
        other => panic!("expected NonFinite, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn supervised_unet_improves_on_identity_init() {
    let cfg = ConfigFile {
        train: TrainConfig {
            mode: TrainMode::SupervisedL2,
            total_batches: 200,
            eval_every: 200,
            heldout: 32,
            adam_g: otdenoise::optim::AdamHyper::with_alpha(1e-3),
            seed: 3,
            ..TrainConfig::default()
        },
        data: DataConfig {
            clean: CleanSource::PiecewiseConstant {
                side: 16,
                channels: 1,
                rects: 3,
                blur: false,
            },
            noise: NoiseModel::Gaussian { sigma: 0.2, mean: 0.0 },
        },
        generator: GeneratorArch::Unet { widths: [4, 8, 8] },
        critic: CriticArch::Resnet {
            base_channels: 4,
            blocks: 2,
        },
        peak: None,
    };
    let mut tr = Trainer::new(cfg).unwrap();
    let before = tr.heldout_psnr().unwrap().unwrap();
    let mut w = MetricsWriter::new(Vec::new()).unwrap();
    tr.run(&mut w, None).unwrap();
    let rows = read_metrics(&String::from_utf8(w.into_inner()).unwrap()).unwrap();
    let after = rows[0].psnr.unwrap();
    assert!(after > before, "{before} -> {after}");
    assert!(rows[0].loss_c_yd.is_none() && rows[0].loss_g.is_some());
}

#[test]
fn multiplicative_and_localized_runs_stay_finite() {
    let mut cfg = small_sine(12);
    cfg.train.total_batches = 20;
    cfg.train.residual_mode = ResidualMode::Multiplicative;
    cfg.data.noise = NoiseModel::Gaussian { sigma: 0.1, mean: 1.0 };
    let (csv, _) = run_csv(cfg);
    assert_eq!(read_metrics(&csv).unwrap().len(), 2);
    let mut cfg = small_sine(13);
    cfg.train.total_batches = 20;
    cfg.data.clean = CleanSource::PiecewiseConstant {
        side: 16,
        channels: 1,
        rects: 3,
        blur: false,
    };
    cfg.generator = GeneratorArch::Unet { widths: [4, 8, 8] };
    cfg.data.noise = NoiseModel::Localized(Localized {
        n_points: 5,
        pos_std: 4.0,
        amp_std: 1.0,
    });
    let (csv, _) = run_csv(cfg);
    assert_eq!(read_metrics(&csv).unwrap().len(), 2);
}
