//! Configurable encoder/decoder stacks: a single linear map, a
//! one-hidden-layer MLP, or a strided conv stack with batchnorm and an
//! activation after every encoder layer. Decoders mirror their encoder
//! (deconv instead of conv, no batchnorm, no activation on the output
//! layer).

use crate::data::SampleShape;
use crate::error::{Error, Result};
use crate::tensor::{Activation, ParameterSet, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;

/// Architecture family. `Linear`/`Mlp` consume flat `[n,d]` batches;
/// `Conv` consumes `[n,c,h,w]` batches and flattens the last feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "arch")]
pub enum Arch {
    Linear {
        latent: usize,
    },
    Mlp {
        hidden: usize,
        latent: usize,
        activation: Activation,
    },
    Conv {
        channels: Vec<usize>,
        kernel: usize,
        stride: usize,
        activation: Activation,
        batchnorm: bool,
    },
}

/// Forward mode: train uses batch statistics in batchnorm and updates the
/// running buffers; eval uses the running buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Whether layer parameters join the tape as trainable leaves or as
/// constants (frozen phases).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    Trainable,
    Frozen,
}

#[derive(Debug, Clone)]
enum Layer {
    Dense {
        w: String,
        b: String,
        activation: Option<Activation>,
    },
    Conv {
        w: String,
        b: String,
        stride: usize,
        bn: Option<String>,
        activation: Option<Activation>,
    },
    Deconv {
        w: String,
        b: String,
        stride: usize,
        activation: Option<Activation>,
    },
}

/// Encoder + decoder stacks over a shared parameter set. Batchnorm running
/// statistics live in the model as buffers.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub input_shape: SampleShape,
    pub arch: Arch,
    latent: usize,
    encoder: Vec<Layer>,
    decoder: Vec<Layer>,
    /// [c, h, w] entering the decoder's deconv stack (Conv arch only).
    decoder_entry: Option<(usize, usize, usize)>,
    buffers: BTreeMap<String, Tensor>,
}

impl Autoencoder {
    /// Builds the layer stacks and inserts freshly initialized parameters
    /// into `params` (Glorot-scaled Gaussians, zero biases, unit gammas).
    pub fn init(
        input_shape: SampleShape,
        arch: Arch,
        seed: u64,
        params: &mut ParameterSet,
    ) -> Result<Self> {
        let mut rng = crate::rng::rng_for(seed, "model-init", 0, 0);
        let mut buffers = BTreeMap::new();
        let mut encoder = Vec::new();
        let mut decoder = Vec::new();
        let mut decoder_entry = None;

        let latent = match &arch {
            Arch::Linear { latent } => {
                let d = flat_dim(&input_shape);
                dense_layer(params, &mut rng, "enc.0", d, *latent, None, &mut encoder)?;
                dense_layer(params, &mut rng, "dec.0", *latent, d, None, &mut decoder)?;
                *latent
            }
            Arch::Mlp {
                hidden,
                latent,
                activation,
            } => {
                let d = flat_dim(&input_shape);
                dense_layer(params, &mut rng, "enc.0", d, *hidden, Some(*activation), &mut encoder)?;
                dense_layer(params, &mut rng, "enc.1", *hidden, *latent, None, &mut encoder)?;
                dense_layer(params, &mut rng, "dec.0", *latent, *hidden, Some(*activation), &mut decoder)?;
                dense_layer(params, &mut rng, "dec.1", *hidden, d, None, &mut decoder)?;
                *latent
            }
            Arch::Conv {
                channels,
                kernel,
                stride,
                activation,
                batchnorm,
            } => {
                let (c, h, w) = match input_shape {
                    SampleShape::Image(c, h, w) => (c, h, w),
                    SampleShape::Flat(_) => {
                        return Err(Error::Config(
                            "conv architecture requires image-shaped samples".into(),
                        ))
                    }
                };
                if channels.is_empty() {
                    return Err(Error::Config("conv arch needs at least one layer".into()));
                }
                if *kernel == 0 || *stride == 0 {
                    return Err(Error::Config("kernel and stride must be positive".into()));
                }
                let depth = channels.len() as u32;
                let down = stride.pow(depth);
                if h % down != 0 || w % down != 0 {
                    return Err(Error::Config(format!(
                        "input {h}x{w} not divisible by stride^depth = {down}"
                    )));
                }
                // encoder: conv -> (bn) -> act, every layer
                let mut c_in = c;
                for (i, &c_out) in channels.iter().enumerate() {
                    let name = format!("enc.{i}");
                    conv_layer(
                        params,
                        &mut rng,
                        &name,
                        c_in,
                        c_out,
                        *kernel,
                        *stride,
                        *batchnorm,
                        Some(*activation),
                        &mut buffers,
                        &mut encoder,
                    )?;
                    c_in = c_out;
                }
                let (hh, ww) = (h / down, w / down);
                decoder_entry = Some((c_in, hh, ww));
                // decoder: deconv -> act, no batchnorm, linear output layer
                let mut rev: Vec<usize> = channels.iter().rev().skip(1).copied().collect();
                rev.push(c);
                let mut d_in = c_in;
                for (i, &c_out) in rev.iter().enumerate() {
                    let name = format!("dec.{i}");
                    let act = if i + 1 == rev.len() {
                        None
                    } else {
                        Some(*activation)
                    };
                    deconv_layer(
                        params, &mut rng, &name, d_in, c_out, *kernel, *stride, act, &mut decoder,
                    )?;
                    d_in = c_out;
                }
                c_in * hh * ww
            }
        };

        Ok(Autoencoder {
            input_shape,
            arch,
            latent,
            encoder,
            decoder,
            decoder_entry,
            buffers,
        })
    }

    /// Width `h` of the flattened latent code.
    pub fn latent_width(&self) -> usize {
        self.latent
    }

    /// True if the encoder consumes `[n,c,h,w]` batches.
    pub fn wants_images(&self) -> bool {
        matches!(self.arch, Arch::Conv { .. })
    }

    /// Runs the encoder; returns the flattened `[n, latent]` code.
    pub fn encode(
        &mut self,
        tape: &mut Tape,
        params: &ParameterSet,
        x: Var,
        mode: Mode,
        pm: ParamMode,
    ) -> Result<Var> {
        let layers = self.encoder.clone();
        let out = self.run_stack(&layers, tape, params, x, mode, pm)?;
        tape.flatten(out)
    }

    /// Runs the decoder on a `[n, latent]` code; returns a batch shaped
    /// like the encoder input.
    pub fn decode(
        &mut self,
        tape: &mut Tape,
        params: &ParameterSet,
        z: Var,
        mode: Mode,
        pm: ParamMode,
    ) -> Result<Var> {
        let z = match self.decoder_entry {
            Some((c, h, w)) => {
                let n = tape.value(z).shape()[0];
                tape.reshape(z, vec![n, c, h, w])?
            }
            None => z,
        };
        let layers = self.decoder.clone();
        self.run_stack(&layers, tape, params, z, mode, pm)
    }

    fn run_stack(
        &mut self,
        layers: &[Layer],
        tape: &mut Tape,
        params: &ParameterSet,
        mut x: Var,
        mode: Mode,
        pm: ParamMode,
    ) -> Result<Var> {
        let reg = |tape: &mut Tape, params: &ParameterSet, name: &str| -> Result<Var> {
            match pm {
                ParamMode::Trainable => tape.param(params, name),
                ParamMode::Frozen => Ok(tape.constant(params.get(name)?)),
            }
        };
        for layer in layers {
            match layer {
                Layer::Dense { w, b, activation } => {
                    let wv = reg(tape, params, w)?;
                    let bv = reg(tape, params, b)?;
                    x = tape.matmul(x, wv)?;
                    x = tape.add_bias(x, bv)?;
                    if let Some(a) = activation {
                        x = tape.activation(x, *a);
                    }
                }
                Layer::Conv {
                    w,
                    b,
                    stride,
                    bn,
                    activation,
                } => {
                    let wv = reg(tape, params, w)?;
                    x = tape.conv2d(x, wv, *stride)?;
                    let bv = reg(tape, params, b)?;
                    x = tape.add_bias(x, bv)?;
                    if let Some(bn_name) = bn {
                        x = self.apply_bn(tape, params, bn_name, x, mode, pm)?;
                    }
                    if let Some(a) = activation {
                        x = tape.activation(x, *a);
                    }
                }
                Layer::Deconv {
                    w,
                    b,
                    stride,
                    activation,
                } => {
                    let wv = reg(tape, params, w)?;
                    x = tape.deconv2d(x, wv, *stride)?;
                    let bv = reg(tape, params, b)?;
                    x = tape.add_bias(x, bv)?;
                    if let Some(a) = activation {
                        x = tape.activation(x, *a);
                    }
                }
            }
        }
        Ok(x)
    }

    fn apply_bn(
        &mut self,
        tape: &mut Tape,
        params: &ParameterSet,
        bn_name: &str,
        x: Var,
        mode: Mode,
        pm: ParamMode,
    ) -> Result<Var> {
        let gamma_name = format!("{bn_name}.gamma");
        let beta_name = format!("{bn_name}.beta");
        match mode {
            Mode::Train => {
                let gamma = match pm {
                    ParamMode::Trainable => tape.param(params, &gamma_name)?,
                    ParamMode::Frozen => tape.constant(params.get(&gamma_name)?),
                };
                let beta = match pm {
                    ParamMode::Trainable => tape.param(params, &beta_name)?,
                    ParamMode::Frozen => tape.constant(params.get(&beta_name)?),
                };
                let mean_key = format!("{bn_name}.mean");
                let var_key = format!("{bn_name}.var");
                let mut rm = self.buffers.remove(&mean_key).expect("buffer exists");
                let mut rv = self.buffers.remove(&var_key).expect("buffer exists");
                let out = tape.batchnorm_train(x, gamma, beta, BN_EPS, &mut rm, &mut rv, BN_MOMENTUM);
                self.buffers.insert(mean_key, rm);
                self.buffers.insert(var_key, rv);
                out
            }
            Mode::Eval => tape.batchnorm_eval(
                x,
                params.get(&gamma_name)?,
                params.get(&beta_name)?,
                &self.buffers[&format!("{bn_name}.mean")],
                &self.buffers[&format!("{bn_name}.var")],
                BN_EPS,
            ),
        }
    }

    /// Batchnorm running statistics (checkpointed alongside parameters).
    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.buffers.get_mut(name) {
            Some(slot) => {
                if slot.shape() != value.shape() {
                    return Err(Error::Dimension(format!("buffer {name:?} shape mismatch")));
                }
                *slot = value;
                Ok(())
            }
            None => Err(Error::State(format!("unknown buffer {name:?}"))),
        }
    }

    /// Parameter ids in this model's encoder, in layer order.
    pub fn encoder_param_names(&self) -> Vec<String> {
        self.encoder.iter().flat_map(layer_param_names).collect()
    }

    pub fn decoder_param_names(&self) -> Vec<String> {
        self.decoder.iter().flat_map(layer_param_names).collect()
    }
}

fn layer_param_names(layer: &Layer) -> Vec<String> {
    match layer {
        Layer::Dense { w, b, .. } | Layer::Deconv { w, b, .. } => vec![w.clone(), b.clone()],
        Layer::Conv { w, b, bn, .. } => {
            let mut names = vec![w.clone(), b.clone()];
            if let Some(bn) = bn {
                names.push(format!("{bn}.gamma"));
                names.push(format!("{bn}.beta"));
            }
            names
        }
    }
}

fn flat_dim(shape: &SampleShape) -> usize {
    shape.numel()
}

fn glorot<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let sigma = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape, data).expect("valid shape")
}

fn dense_layer<R: Rng>(
    params: &mut ParameterSet,
    rng: &mut R,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    activation: Option<Activation>,
    stack: &mut Vec<Layer>,
) -> Result<()> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::Config(format!("dense layer {name}: zero width")));
    }
    let w = format!("{name}.w");
    let b = format!("{name}.b");
    params.insert(&w, glorot(rng, vec![fan_in, fan_out], fan_in, fan_out))?;
    params.insert(&b, Tensor::zeros(vec![fan_out]))?;
    stack.push(Layer::Dense { w, b, activation });
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn conv_layer<R: Rng>(
    params: &mut ParameterSet,
    rng: &mut R,
    name: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    batchnorm: bool,
    activation: Option<Activation>,
    buffers: &mut BTreeMap<String, Tensor>,
    stack: &mut Vec<Layer>,
) -> Result<()> {
    let w = format!("{name}.w");
    let b = format!("{name}.b");
    let fan_in = c_in * kernel * kernel;
    let fan_out = c_out * kernel * kernel;
    params.insert(&w, glorot(rng, vec![c_out, c_in, kernel, kernel], fan_in, fan_out))?;
    params.insert(&b, Tensor::zeros(vec![c_out]))?;
    let bn = if batchnorm {
        let bn_name = format!("{name}.bn");
        params.insert(&format!("{bn_name}.gamma"), Tensor::full(vec![c_out], 1.0))?;
        params.insert(&format!("{bn_name}.beta"), Tensor::zeros(vec![c_out]))?;
        buffers.insert(format!("{bn_name}.mean"), Tensor::zeros(vec![c_out]));
        buffers.insert(format!("{bn_name}.var"), Tensor::full(vec![c_out], 1.0));
        Some(bn_name)
    } else {
        None
    };
    stack.push(Layer::Conv {
        w,
        b,
        stride,
        bn,
        activation,
    });
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn deconv_layer<R: Rng>(
    params: &mut ParameterSet,
    rng: &mut R,
    name: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    activation: Option<Activation>,
    stack: &mut Vec<Layer>,
) -> Result<()> {
    let w = format!("{name}.w");
    let b = format!("{name}.b");
    // deconv kernel layout matches conv: [c_in(out-of-conv), c_out, kh, kw]
    let fan_in = c_in * kernel * kernel;
    let fan_out = c_out * kernel * kernel;
    params.insert(&w, glorot(rng, vec![c_in, c_out, kernel, kernel], fan_in, fan_out))?;
    params.insert(&b, Tensor::zeros(vec![c_out]))?;
    stack.push(Layer::Deconv {
        w,
        b,
        stride,
        activation,
    });
    Ok(())
}
