//! JSON configuration for training runs.
//!
//! ```json
//! {
//!   "train": { "total_batches": 20000, "seed": 7 },
//!   "data": { "clean": { "kind": "sine" }, "noise": { "kind": "gaussian", "sigma": 1.0 } },
//!   "generator": { "kind": "autoencoder_1d" },
//!   "critic": { "kind": "resnet" }
//! }
//! ```
//!
//! Every block and field is optional except `data`. Unknown keys are errors.
//! Defaults: batch 8, λ = 10, Adam (2e-4, 0.5, 0.9, ε = 1e-8) for all three
//! networks, one critic update per generator update, dual-critic mode with
//! both terms, additive residual, clamp_min 1e-3, metrics every 100 steps,
//! no periodic checkpoints, 64 held-out samples for PSNR.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{CleanSource, NoiseModel};
use crate::error::{Error, Result};
use crate::eval::{IMAGE_PEAK, SINE_PEAK};
use crate::nn::{self, AutoencoderWidths, NetworkSpec};
use crate::train::{TrainConfig, TrainMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub clean: CleanSource,
    pub noise: NoiseModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorArch {
    #[serde(rename = "autoencoder_1d")]
    Autoencoder1d {
        #[serde(default)]
        widths: AutoencoderWidths,
    },
    Unet {
        #[serde(default = "unet_widths")]
        widths: [usize; 3],
    },
    /// `G(y) = W y` on flat samples.
    Linear,
    Mlp {
        #[serde(default = "mlp_hidden")]
        hidden: usize,
    },
    Custom {
        spec: NetworkSpec,
    },
}

impl Default for GeneratorArch {
    fn default() -> Self {
        GeneratorArch::Autoencoder1d {
            widths: AutoencoderWidths::default(),
        }
    }
}

fn unet_widths() -> [usize; 3] {
    [16, 32, 64]
}
fn mlp_hidden() -> usize {
    64
}
fn mlp_depth() -> usize {
    2
}
fn base_channels() -> usize {
    16
}
fn blocks() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CriticArch {
    Resnet {
        #[serde(default = "base_channels")]
        base_channels: usize,
        #[serde(default = "blocks")]
        blocks: usize,
    },
    Mlp {
        #[serde(default = "mlp_hidden")]
        hidden: usize,
        #[serde(default = "mlp_depth")]
        depth: usize,
    },
    Custom {
        spec: NetworkSpec,
    },
}

impl Default for CriticArch {
    fn default() -> Self {
        CriticArch::Resnet {
            base_channels: base_channels(),
            blocks: blocks(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub generator: GeneratorArch,
    #[serde(default)]
    pub critic: CriticArch,
    /// PSNR peak; 2 for sines, 1 otherwise when omitted.
    #[serde(default)]
    pub peak: Option<f64>,
}

fn flat_features(shape: &[usize], what: &str) -> Result<usize> {
    match shape {
        [f] => Ok(*f),
        _ => Err(Error::Config(format!("{what} needs flat samples, got {shape:?}"))),
    }
}

impl GeneratorArch {
    pub fn build(&self, sample_shape: &[usize]) -> Result<NetworkSpec> {
        let spec = match self {
            GeneratorArch::Autoencoder1d { widths } => match sample_shape {
                [1, len] => nn::build_generator_1d_with(*len, widths)?,
                s => return Err(Error::Config(format!("autoencoder_1d needs [1, len] samples, got {s:?}"))),
            },
            GeneratorArch::Unet { widths } => {
                nn::build_generator_unet_with(sample_shape[0], &sample_shape[1..], *widths)?
            }
            GeneratorArch::Linear => nn::build_linear(flat_features(sample_shape, "linear generator")?)?,
            GeneratorArch::Mlp { hidden } => nn::build_mlp(flat_features(sample_shape, "mlp generator")?, *hidden)?,
            GeneratorArch::Custom { spec } => spec.clone(),
        };
        if spec.input_shape != sample_shape || spec.output_shape()? != sample_shape {
            return Err(Error::Config(format!(
                "generator maps {:?} -> {:?}, samples are {sample_shape:?}",
                spec.input_shape,
                spec.output_shape()?
            )));
        }
        Ok(spec)
    }
}

impl CriticArch {
    pub fn build(&self, sample_shape: &[usize]) -> Result<NetworkSpec> {
        let spec = match self {
            CriticArch::Resnet { base_channels, blocks } => {
                if sample_shape.len() < 2 {
                    return Err(Error::Config(format!("resnet critic needs [C, spatial..] samples, got {sample_shape:?}")));
                }
                nn::build_critic_with(
                    sample_shape.len() - 1,
                    sample_shape[0],
                    &sample_shape[1..],
                    nn::CriticWidths {
                        base_channels: *base_channels,
                        blocks: *blocks,
                    },
                )?
            }
            CriticArch::Mlp { hidden, depth } => {
                nn::build_critic_mlp(flat_features(sample_shape, "mlp critic")?, *hidden, *depth)?
            }
            CriticArch::Custom { spec } => spec.clone(),
        };
        if spec.input_shape != sample_shape || spec.output_shape()? != [1] {
            return Err(Error::Config(format!(
                "critic maps {:?} -> {:?}, expected {sample_shape:?} -> [1]",
                spec.input_shape,
                spec.output_shape()?
            )));
        }
        Ok(spec)
    }
}

impl ConfigFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ConfigFile = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.noise.validate()?;
        if let Some(p) = self.peak {
            if !(p > 0.0) {
                return Err(Error::Config(format!("peak must be > 0, got {p}")));
            }
        }
        if self.train.mode == TrainMode::PlainWgan && self.train.residual_mode != Default::default() {
            return Err(Error::Config("plain_wgan mode has no residual; leave residual_mode additive".into()));
        }
        Ok(())
    }

    pub fn peak(&self) -> f64 {
        self.peak.unwrap_or(match self.data.clean {
            CleanSource::Sine => SINE_PEAK,
            _ => IMAGE_PEAK,
        })
    }
}

/// Default config for the periodic-signal task.
pub fn sine_example(total_batches: u64, seed: u64) -> ConfigFile {
    ConfigFile {
        train: TrainConfig {
            total_batches,
            seed,
            ..TrainConfig::default()
        },
        data: DataConfig {
            clean: CleanSource::Sine,
            noise: NoiseModel::Gaussian { sigma: 1.0, mean: 0.0 },
        },
        generator: GeneratorArch::default(),
        critic: CriticArch::default(),
        peak: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_algorithm_defaults() {
        let cfg = ConfigFile::from_json(
            r#"{"data": {"clean": {"kind": "sine"}, "noise": {"kind": "gaussian", "sigma": 1.0}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.lambda, 10.0);
        for h in [cfg.train.adam_g, cfg.train.adam_c_yd, cfg.train.adam_c_eta] {
            assert_eq!((h.alpha, h.beta1, h.beta2), (2e-4, 0.5, 0.9));
        }
        assert_eq!(cfg.train.n_critic, 1);
        assert_eq!(cfg.peak(), 2.0);
        assert_eq!(cfg, ConfigFile::from_json(&cfg.to_json()).unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            r#"{"data": {"clean": {"kind": "sine"}, "noise": {"kind": "gaussian", "sigma": 1.0}}, "extra": 1}"#,
            r#"{"train": {"batchsize": 4}, "data": {"clean": {"kind": "sine"}, "noise": {"kind": "gaussian", "sigma": 1.0}}}"#,
            r#"{"data": {"clean": {"kind": "sine"}, "noise": {"kind": "gaussian", "sigma": 1.0, "mu": 0}}}"#,
        ] {
            let err = ConfigFile::from_json(text).unwrap_err();
            assert!(err.to_string().contains("unknown field"), "{err}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        let base = |train: &str| {
            format!(r#"{{"train": {train}, "data": {{"clean": {{"kind": "sine"}}, "noise": {{"kind": "gaussian", "sigma": 1.0}}}}}}"#)
        };
        for t in [r#"{"batch_size": 0}"#, r#"{"lambda": -1}"#, r#"{"n_critic": 0}"#, r#"{"clamp_min": 0}"#] {
            assert!(ConfigFile::from_json(&base(t)).is_err(), "{t}");
        }
    }

    #[test]
    fn architectures_match_samples() {
        let g = GeneratorArch::default().build(&[1, 128]).unwrap();
        assert_eq!(g.output_shape().unwrap(), vec![1, 128]);
        assert!(GeneratorArch::Linear.build(&[1, 128]).is_err());
        let c = CriticArch::Resnet {
            base_channels: 4,
            blocks: 3,
        }
        .build(&[1, 16, 16])
        .unwrap();
        assert_eq!(c.output_shape().unwrap(), vec![1]);
    }
}
