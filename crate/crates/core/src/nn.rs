//! Sequential network descriptions, parameter stores and forward evaluation.
//!
//! A [`NetworkSpec`] is a flat list of [`Layer`]s. Skip connections (UNet)
//! use an explicit stack: [`Layer::SkipPush`] saves the current activation and
//! [`Layer::SkipConcat`] concatenates the most recent saved one onto the
//! channel axis. Shapes are per sample; the batch axis is implicit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Array, Tape, Tensor};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;
pub const DEFAULT_LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layer {
    Conv {
        out_channels: usize,
        kernel: usize,
        bias: bool,
    },
    LayerNorm,
    Relu,
    LeakyRelu,
    /// conv → layernorm → leakyrelu → conv → layernorm, plus the block input,
    /// then 2x average pooling and channel self-concatenation.
    ResBlock {
        kernel: usize,
    },
    Subsample2,
    Upsample2,
    Flatten,
    Unflatten {
        shape: Vec<usize>,
    },
    Dense {
        out: usize,
        bias: bool,
    },
    SkipPush,
    SkipConcat,
}

impl Layer {
    fn tag(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::LayerNorm => "layernorm",
            Layer::Relu => "relu",
            Layer::LeakyRelu => "leakyrelu",
            Layer::ResBlock { .. } => "resblock",
            Layer::Subsample2 => "subsample2",
            Layer::Upsample2 => "upsample2",
            Layer::Flatten => "flatten",
            Layer::Unflatten { .. } => "unflatten",
            Layer::Dense { .. } => "dense",
            Layer::SkipPush => "skip_push",
            Layer::SkipConcat => "skip_concat",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// U(-b, b) with b = sqrt(6 / fan_in).
    HeUniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Per-sample input shape: `[features]`, `[channels, len]` or `[channels, h, w]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
}

fn default_slope() -> f64 {
    DEFAULT_LEAKY_SLOPE
}

fn default_eps() -> f64 {
    DEFAULT_LN_EPS
}

/// Widths for [`build_critic_with`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticWidths {
    pub base_channels: usize,
    pub blocks: usize,
}

impl Default for CriticWidths {
    fn default() -> Self {
        Self {
            base_channels: 16,
            blocks: 5,
        }
    }
}

/// Convolutional ResNet critic: linear conv to 16 channels, five ResBlocks
/// (16 → 32 → … → 512 channels, spatial extent halved each time), and a
/// dense layer to one scalar.
pub fn build_critic(dim: usize, in_channels: usize, spatial: &[usize]) -> Result<NetworkSpec> {
    build_critic_with(dim, in_channels, spatial, CriticWidths::default())
}

pub fn build_critic_with(
    dim: usize,
    in_channels: usize,
    spatial: &[usize],
    widths: CriticWidths,
) -> Result<NetworkSpec> {
    if !(1..=2).contains(&dim) || spatial.len() != dim {
        return Err(Error::Spec(format!(
            "critic dimension {dim} does not match spatial extents {spatial:?}"
        )));
    }
    let div = 1usize << widths.blocks;
    if let Some(s) = spatial.iter().find(|&&s| s % div != 0 || s == 0) {
        return Err(Error::Spec(format!(
            "spatial extent {s} is not divisible by 2^{} = {div}",
            widths.blocks
        )));
    }
    let mut layers = vec![Layer::Conv {
        out_channels: widths.base_channels,
        kernel: 3,
        bias: true,
    }];
    layers.extend((0..widths.blocks).map(|_| Layer::ResBlock { kernel: 3 }));
    layers.push(Layer::Flatten);
    layers.push(Layer::Dense { out: 1, bias: true });
    let mut input_shape = vec![in_channels];
    input_shape.extend_from_slice(spatial);
    NetworkSpec::new(input_shape, layers)
}

/// Fully connected critic on flat inputs: `depth` dense + leakyrelu layers
/// of width `hidden`, then a dense layer to one scalar.
pub fn build_critic_mlp(features: usize, hidden: usize, depth: usize) -> Result<NetworkSpec> {
    let mut layers = Vec::new();
    for _ in 0..depth {
        layers.push(Layer::Dense { out: hidden, bias: true });
        layers.push(Layer::LeakyRelu);
    }
    layers.push(Layer::Dense { out: 1, bias: true });
    NetworkSpec::new(vec![features], layers)
}

/// Widths for [`build_generator_1d_with`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderWidths {
    pub channels: [usize; 3],
    pub bottleneck: usize,
}

impl Default for AutoencoderWidths {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64],
            bottleneck: 64,
        }
    }
}

/// One-dimensional autoencoder generator.
pub fn build_generator_1d(signal_len: usize) -> Result<NetworkSpec> {
    build_generator_1d_with(signal_len, &AutoencoderWidths::default())
}

pub fn build_generator_1d_with(signal_len: usize, w: &AutoencoderWidths) -> Result<NetworkSpec> {
    if signal_len < 8 || !signal_len.is_multiple_of(8) {
        return Err(Error::Spec(format!(
            "signal length {signal_len} must be a positive multiple of 8"
        )));
    }
    let block = |out: usize, kernel: usize| {
        [
            Layer::Conv {
                out_channels: out,
                kernel,
                bias: true,
            },
            Layer::LayerNorm,
            Layer::Relu,
        ]
    };
    let [c1, c2, c3] = w.channels;
    let mut layers = Vec::new();
    for c in [c1, c2, c3] {
        layers.extend(block(c, 3));
        layers.push(Layer::Subsample2);
    }
    let inner = signal_len / 8;
    layers.push(Layer::Flatten);
    layers.push(Layer::Dense {
        out: w.bottleneck,
        bias: true,
    });
    layers.push(Layer::Relu);
    layers.push(Layer::Dense {
        out: c3 * inner,
        bias: true,
    });
    layers.push(Layer::Relu);
    layers.push(Layer::Unflatten {
        shape: vec![c3, inner],
    });
    for c in [c2, c1, c1] {
        layers.push(Layer::Upsample2);
        layers.extend(block(c, 3));
    }
    layers.push(Layer::Conv {
        out_channels: 1,
        kernel: 1,
        bias: true,
    });
    NetworkSpec::new(vec![1, signal_len], layers)
}

/// Three-level UNet with skip concatenations; widths 16/32/64 by default.
pub fn build_generator_unet(channels: usize, spatial: &[usize]) -> Result<NetworkSpec> {
    build_generator_unet_with(channels, spatial, [16, 32, 64])
}

pub fn build_generator_unet_with(
    channels: usize,
    spatial: &[usize],
    widths: [usize; 3],
) -> Result<NetworkSpec> {
    if spatial.is_empty() || spatial.len() > 2 {
        return Err(Error::Spec(format!("unet needs 1 or 2 spatial axes, got {spatial:?}")));
    }
    if let Some(s) = spatial.iter().find(|&&s| s % 8 != 0 || s == 0) {
        return Err(Error::Spec(format!("spatial extent {s} is not divisible by 8")));
    }
    let double = |out: usize| {
        let mut v = Vec::new();
        for _ in 0..2 {
            v.push(Layer::Conv {
                out_channels: out,
                kernel: 3,
                bias: true,
            });
            v.push(Layer::LayerNorm);
            v.push(Layer::Relu);
        }
        v
    };
    let mut layers = Vec::new();
    for &c in &widths {
        layers.extend(double(c));
        layers.push(Layer::SkipPush);
        layers.push(Layer::Subsample2);
    }
    layers.extend(double(widths[2]));
    for out in [widths[1], widths[0], widths[0]] {
        layers.push(Layer::Upsample2);
        layers.push(Layer::SkipConcat);
        layers.extend(double(out));
    }
    layers.push(Layer::Conv {
        out_channels: channels,
        kernel: 1,
        bias: true,
    });
    let mut input_shape = vec![channels];
    input_shape.extend_from_slice(spatial);
    NetworkSpec::new(input_shape, layers)
}

/// `G(y) = W y` on flat inputs, no bias.
pub fn build_linear(features: usize) -> Result<NetworkSpec> {
    NetworkSpec::new(
        vec![features],
        vec![Layer::Dense {
            out: features,
            bias: false,
        }],
    )
}

/// Dense → relu → dense on flat inputs.
pub fn build_mlp(features: usize, hidden: usize) -> Result<NetworkSpec> {
    NetworkSpec::new(
        vec![features],
        vec![
            Layer::Dense { out: hidden, bias: true },
            Layer::Relu,
            Layer::Dense {
                out: features,
                bias: true,
            },
        ],
    )
}

/// Per-layer shape trace.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub input: Vec<usize>,
    pub output: Vec<usize>,
    pub params: Vec<ParamInfo>,
}

impl NetworkSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let spec = Self {
            input_shape,
            layers,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            ln_eps: DEFAULT_LN_EPS,
        };
        spec.trace()?;
        Ok(spec)
    }

    /// Propagates shapes through every layer, checking that they chain.
    pub fn trace(&self) -> Result<Vec<LayerTrace>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Spec(format!("bad input shape {:?}", self.input_shape)));
        }
        let mut shape = self.input_shape.clone();
        let mut stack: Vec<Vec<usize>> = Vec::new();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |msg: String| Error::Spec(format!("layer {i} ({}): {msg}", layer.tag()));
            let prefix = format!("{i:02}.{}", layer.tag());
            let p = |suffix: &str, shape: Vec<usize>, init: Init| ParamInfo {
                name: format!("{prefix}.{suffix}"),
                shape,
                init,
            };
            let input = shape.clone();
            let mut params = Vec::new();
            let spatial = |s: &Vec<usize>| -> Result<()> {
                if s.len() < 2 || s.len() > 3 {
                    return Err(err(format!("needs [channels, spatial..], got {s:?}")));
                }
                Ok(())
            };
            match layer {
                Layer::Conv {
                    out_channels,
                    kernel,
                    bias,
                } => {
                    spatial(&shape)?;
                    if kernel % 2 == 0 {
                        return Err(err(format!("kernel {kernel} must be odd")));
                    }
                    let taps = kernel.pow(shape.len() as u32 - 1);
                    let mut ws = vec![*out_channels, shape[0]];
                    ws.extend(std::iter::repeat_n(*kernel, shape.len() - 1));
                    params.push(p("weight", ws, Init::HeUniform { fan_in: shape[0] * taps }));
                    if *bias {
                        params.push(p("bias", vec![*out_channels], Init::Zeros));
                    }
                    shape[0] = *out_channels;
                }
                Layer::LayerNorm => {
                    params.push(p("gamma", shape.clone(), Init::Ones));
                    params.push(p("beta", shape.clone(), Init::Zeros));
                }
                Layer::Relu | Layer::LeakyRelu => {}
                Layer::ResBlock { kernel } => {
                    spatial(&shape)?;
                    if kernel % 2 == 0 {
                        return Err(err(format!("kernel {kernel} must be odd")));
                    }
                    if shape[1..].iter().any(|s| s % 2 != 0) {
                        return Err(err(format!("odd spatial extent in {shape:?}")));
                    }
                    let c = shape[0];
                    let taps = kernel.pow(shape.len() as u32 - 1);
                    let mut ws = vec![c, c];
                    ws.extend(std::iter::repeat_n(*kernel, shape.len() - 1));
                    for k in 1..=2 {
                        params.push(p(&format!("conv{k}.weight"), ws.clone(), Init::HeUniform { fan_in: c * taps }));
                        params.push(p(&format!("ln{k}.gamma"), shape.clone(), Init::Ones));
                        params.push(p(&format!("ln{k}.beta"), shape.clone(), Init::Zeros));
                    }
                    shape[0] = 2 * c;
                    for s in &mut shape[1..] {
                        *s /= 2;
                    }
                }
                Layer::Subsample2 => {
                    spatial(&shape)?;
                    if shape[1..].iter().any(|s| s % 2 != 0) {
                        return Err(err(format!("odd spatial extent in {shape:?}")));
                    }
                    for s in &mut shape[1..] {
                        *s /= 2;
                    }
                }
                Layer::Upsample2 => {
                    spatial(&shape)?;
                    for s in &mut shape[1..] {
                        *s *= 2;
                    }
                }
                Layer::Flatten => shape = vec![shape.iter().product()],
                Layer::Unflatten { shape: to } => {
                    if to.iter().product::<usize>() != shape.iter().product::<usize>() {
                        return Err(err(format!("cannot unflatten {shape:?} into {to:?}")));
                    }
                    shape = to.clone();
                }
                Layer::Dense { out, bias } => {
                    if shape.len() != 1 {
                        return Err(err(format!("needs flat input, got {shape:?}")));
                    }
                    params.push(p("weight", vec![*out, shape[0]], Init::HeUniform { fan_in: shape[0] }));
                    if *bias {
                        params.push(p("bias", vec![*out], Init::Zeros));
                    }
                    shape = vec![*out];
                }
                Layer::SkipPush => stack.push(shape.clone()),
                Layer::SkipConcat => {
                    let saved = stack.pop().ok_or_else(|| err("no saved activation".into()))?;
                    if saved.len() != shape.len() || saved[1..] != shape[1..] {
                        return Err(err(format!("skip {saved:?} does not match {shape:?}")));
                    }
                    shape[0] += saved[0];
                }
            }
            if shape.contains(&0) {
                return Err(err(format!("shape collapsed to {shape:?}")));
            }
            out.push(LayerTrace {
                input,
                output: shape.clone(),
                params,
            });
        }
        if !stack.is_empty() {
            return Err(Error::Spec(format!("{} skip activations never consumed", stack.len())));
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self
            .trace()?
            .last()
            .map(|t| t.output.clone())
            .unwrap_or_else(|| self.input_shape.clone()))
    }

    pub fn params(&self) -> Result<Vec<ParamInfo>> {
        Ok(self.trace()?.into_iter().flat_map(|t| t.params).collect())
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.params()?.iter().map(|p| p.shape.iter().product::<usize>()).sum())
    }

    /// Runs the network on a batch `[B, input_shape..]`, recording on the tape
    /// of whichever inputs or parameters are tracked.
    pub fn forward(&self, params: &Bound, x: &Tensor) -> Result<Tensor> {
        self.forward_traced(params, x, |_, _| {})
    }

    /// Like [`NetworkSpec::forward`], calling `observe(layer_index, output)`
    /// after every layer.
    pub fn forward_traced(
        &self,
        params: &Bound,
        x: &Tensor,
        mut observe: impl FnMut(usize, &Tensor),
    ) -> Result<Tensor> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(crate::error::shape_err(
                "forward",
                format!("batch {:?} does not match input shape {:?}", x.shape(), self.input_shape),
            ));
        }
        let batch = x.shape()[0];
        let mut h = x.clone();
        let mut stack = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let name = |suffix: &str| format!("{i:02}.{}.{suffix}", layer.tag());
            let get = |suffix: &str| params.get(&name(suffix));
            h = match layer {
                Layer::Conv { bias, .. } => {
                    let y = h.conv(get("weight")?)?;
                    if *bias {
                        y.add_channel_bias(get("bias")?)?
                    } else {
                        y
                    }
                }
                Layer::LayerNorm => h.layer_norm(get("gamma")?, get("beta")?, self.ln_eps)?,
                Layer::Relu => h.relu()?,
                Layer::LeakyRelu => h.leaky_relu(self.leaky_slope)?,
                Layer::ResBlock { .. } => {
                    let r = h
                        .conv(get("conv1.weight")?)?
                        .layer_norm(get("ln1.gamma")?, get("ln1.beta")?, self.ln_eps)?
                        .leaky_relu(self.leaky_slope)?
                        .conv(get("conv2.weight")?)?
                        .layer_norm(get("ln2.gamma")?, get("ln2.beta")?, self.ln_eps)?;
                    let y = h.add(&r)?.subsample2()?;
                    Tensor::channel_concat(&[&y, &y])?
                }
                Layer::Subsample2 => h.subsample2()?,
                Layer::Upsample2 => h.upsample2()?,
                Layer::Flatten => {
                    let n = h.numel() / batch;
                    h.reshape(&[batch, n])?
                }
                Layer::Unflatten { shape } => {
                    let mut s = vec![batch];
                    s.extend_from_slice(shape);
                    h.reshape(&s)?
                }
                Layer::Dense { bias, .. } => {
                    let b = if *bias { Some(get("bias")?) } else { None };
                    h.dense(get("weight")?, b)?
                }
                Layer::SkipPush => {
                    stack.push(h.clone());
                    h
                }
                Layer::SkipConcat => {
                    let saved = stack
                        .pop()
                        .ok_or_else(|| Error::Spec(format!("layer {i}: empty skip stack")))?;
                    Tensor::channel_concat(&[&h, &saved])?
                }
            };
            observe(i, &h);
        }
        Ok(h)
    }
}

/// Named parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Array>,
    seed: u64,
}

impl ParamStore {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
            seed: 0,
        }
    }

    /// Fresh parameters for `spec`, a pure function of `(spec, seed)`.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = Rng::substream(seed, 0x9a7a);
        let mut entries = BTreeMap::new();
        for p in spec.params()? {
            let n: usize = p.shape.iter().product();
            let data = match p.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::HeUniform { fan_in } => {
                    let b = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.uniform_range(-b, b)).collect()
                }
            };
            if entries.insert(p.name.clone(), Array::new(p.shape, data)?).is_some() {
                return Err(Error::Spec(format!("duplicate parameter name {}", p.name)));
            }
        }
        Ok(Self { entries, seed })
    }

    pub fn from_entries(entries: BTreeMap<String, Array>, seed: u64) -> Self {
        Self { entries, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingKey(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingKey(name.to_string()))
    }

    pub fn set(&mut self, name: &str, value: Array) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(crate::error::shape_err(
                "param_set",
                format!("{name}: {:?} vs {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Array::numel).sum()
    }

    /// Parameters as differentiable leaves on `tape`.
    pub fn bind(&self, tape: &Tape) -> Bound {
        Bound {
            tensors: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
                .collect(),
        }
    }

    /// Parameters as untracked constants.
    pub fn constants(&self) -> Bound {
        Bound {
            tensors: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::constant(v.clone())))
                .collect(),
        }
    }
}

/// Parameters materialised as tensors for one forward pass.
pub struct Bound {
    tensors: BTreeMap<String, Tensor>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingKey(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    /// Gradients of `loss` w.r.t. every bound parameter, keyed by name.
    pub fn grads(&self, loss: &Tensor) -> Result<BTreeMap<String, Array>> {
        let (names, leaves): (Vec<&String>, Vec<&Tensor>) = self.tensors.iter().unzip();
        let grads = crate::tensor::backward(loss, &leaves, false)?;
        Ok(names
            .into_iter()
            .cloned()
            .zip(grads.into_iter().map(Tensor::into_array))
            .collect())
    }
}
