//! Noise-augmented 1-D convolutional autoencoder over flattened parameters.
//!
//! The encoder zero-pads the input to a multiple of the cumulative stride,
//! runs five conv stages (ReLU after each) and a linear head to the latent
//! code. The decoder mirrors it with transposed convolutions, crops the
//! padding, and adds a learned per-position output bias.

use crate::autograd::{ConvSpec, Tape, Var};
use crate::container::{self, AUTOENCODER_TAG};
use crate::error::{Error, Result};
use crate::nn::{he_uniform, ParamSet};
use crate::optim::{cosine_lr, OptimizerConfig, OptimizerKind, OptimizerState};
use crate::rng::{rng_from_seed, NoiseSource, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

const KERNEL: usize = 3;

/// Length bookkeeping for a stack of stride-1/2 conv stages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct StagePlan {
    pub input_len: usize,
    pub padded_len: usize,
    /// Input length seen by each stage; `lengths[i + 1]` is its output.
    pub lengths: Vec<usize>,
    pub strides: Vec<usize>,
}

impl StagePlan {
    /// Stride 2 while the running length is at least 8, stride 1 after that.
    pub fn new(input_len: usize, stages: usize) -> Self {
        let mut strides = Vec::with_capacity(stages);
        let mut len = input_len;
        for _ in 0..stages {
            if len >= 8 {
                strides.push(2);
                len = len.div_ceil(2);
            } else {
                strides.push(1);
            }
        }
        let total: usize = strides.iter().product();
        let padded_len = input_len.div_ceil(total) * total;
        let mut lengths = vec![padded_len];
        for s in &strides {
            lengths.push(lengths.last().unwrap() / s);
        }
        Self {
            input_len,
            padded_len,
            lengths,
            strides,
        }
    }

    pub fn bottleneck_len(&self) -> usize {
        *self.lengths.last().unwrap()
    }
}

pub(crate) fn down_spec(stride: usize) -> ConvSpec {
    ConvSpec { stride, pad: 1 }
}

/// `(spec, output padding)` of the transposed stage that undoes a stride.
pub(crate) fn up_spec(stride: usize) -> (ConvSpec, usize) {
    (ConvSpec { stride, pad: 1 }, stride - 1)
}

/// `ceil(d / 4)`, at least 4, at most 128.
pub fn default_latent_dim(d: usize) -> usize {
    d.div_ceil(4).clamp(4, 128)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    #[serde(default = "default_sigma_v")]
    pub sigma_v: f64,
    #[serde(default = "default_sigma_z")]
    pub sigma_z: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_channels() -> Vec<usize> {
    vec![8, 16, 32, 32, 16]
}
fn default_sigma_v() -> f64 {
    1e-3
}
fn default_sigma_z() -> f64 {
    1e-1
}
fn default_lr() -> f64 {
    1e-3
}
fn default_iterations() -> usize {
    1500
}
fn default_batch() -> usize {
    50
}

impl AutoencoderConfig {
    pub fn for_dim(input_dim: usize) -> Self {
        Self {
            input_dim,
            latent_dim: default_latent_dim(input_dim),
            channels: default_channels(),
            sigma_v: default_sigma_v(),
            sigma_z: default_sigma_z(),
            lr: default_lr(),
            weight_decay: 0.0,
            iterations: default_iterations(),
            batch_size: default_batch(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("autoencoder config: {m}")));
        if self.input_dim == 0 || self.latent_dim == 0 {
            return bad(format!("dims {} -> {}", self.input_dim, self.latent_dim));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad(format!("channels {:?}", self.channels));
        }
        if !(self.sigma_v >= 0.0 && self.sigma_z >= 0.0) {
            return bad(format!("noise scales {} / {}", self.sigma_v, self.sigma_z));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || self.batch_size == 0 {
            return bad(format!("lr {} wd {} batch {}", self.lr, self.weight_decay, self.batch_size));
        }
        Ok(())
    }

    pub(crate) fn plan(&self) -> StagePlan {
        StagePlan::new(self.input_dim, self.channels.len())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Noise {
    On,
    Off,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder<T> {
    pub config: AutoencoderConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Autoencoder<T> {
    pub fn new(config: AutoencoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let plan = config.plan();
        let ch = &config.channels;
        let mut params = ParamSet::new();
        let mut prev = 1;
        for (i, &c) in ch.iter().enumerate() {
            let name = format!("enc{}", i + 1);
            params.push(&name, "weight", he_uniform(&[c, prev, KERNEL], prev * KERNEL, &mut rng));
            params.push(&name, "bias", Tensor::zeros([c]));
            prev = c;
        }
        let flat = prev * plan.bottleneck_len();
        let m = config.latent_dim;
        params.push("enc_fc", "weight", he_uniform(&[m, flat], flat, &mut rng));
        params.push("enc_fc", "bias", Tensor::zeros([m]));
        params.push("dec_fc", "weight", he_uniform(&[flat, m], m, &mut rng));
        params.push("dec_fc", "bias", Tensor::zeros([flat]));
        // transposed stages walk the channel list backwards down to one channel
        let mut outs: Vec<usize> = ch.iter().rev().skip(1).copied().collect();
        outs.push(1);
        let mut cin = prev;
        for (i, &c) in outs.iter().enumerate() {
            let name = format!("dec{}", i + 1);
            params.push(&name, "weight", he_uniform(&[cin, c, KERNEL], cin * KERNEL, &mut rng));
            params.push(&name, "bias", Tensor::zeros([c]));
            cin = c;
        }
        params.push("out", "bias", Tensor::zeros([config.input_dim]));
        Ok(Self { config, params })
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Sets the output bias, e.g. to the corpus mean so that training starts
    /// from the centre of the data.
    pub fn set_output_bias(&mut self, bias: &[f64]) -> Result<()> {
        let t = self.params.get_mut("out", "bias")?;
        if t.len() != bias.len() {
            return Err(Error::Shape {
                op: "set_output_bias",
                detail: format!("{} values for output dim {}", bias.len(), t.len()),
            });
        }
        t.data_mut().iter_mut().zip(bias).for_each(|(d, &b)| *d = T::of(b));
        Ok(())
    }

    fn p(vars: &[Var], params: &ParamSet<T>, layer: &str, name: &str) -> Var {
        vars[params.index_of(layer, name).expect("parameter exists by construction")]
    }

    /// `x: [B, d]` to `[B, latent]`.
    pub(crate) fn encoder_graph(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        let plan = self.config.plan();
        let b = tape.value(x).shape()[0];
        let mut h = tape.pad_last(x, plan.padded_len)?;
        h = tape.reshape(h, &[b, 1, plan.padded_len])?;
        for (i, &s) in plan.strides.iter().enumerate() {
            let l = format!("enc{}", i + 1);
            let (w, bias) = (Self::p(vars, &self.params, &l, "weight"), Self::p(vars, &self.params, &l, "bias"));
            h = tape.conv1d(h, w, Some(bias), down_spec(s))?;
            h = tape.relu(h);
        }
        let flat = tape.value(h).len() / b;
        h = tape.reshape(h, &[b, flat])?;
        let (w, bias) = (
            Self::p(vars, &self.params, "enc_fc", "weight"),
            Self::p(vars, &self.params, "enc_fc", "bias"),
        );
        tape.dense(h, w, Some(bias))
    }

    /// `z: [B, latent]` to `[B, d]`.
    pub(crate) fn decoder_graph(&self, tape: &mut Tape<T>, vars: &[Var], z: Var) -> Result<Var> {
        let plan = self.config.plan();
        let b = tape.value(z).shape()[0];
        let (w, bias) = (
            Self::p(vars, &self.params, "dec_fc", "weight"),
            Self::p(vars, &self.params, "dec_fc", "bias"),
        );
        let mut h = tape.dense(z, w, Some(bias))?;
        let top = *self.config.channels.last().unwrap();
        h = tape.reshape(h, &[b, top, plan.bottleneck_len()])?;
        let n = plan.strides.len();
        for (i, &s) in plan.strides.iter().rev().enumerate() {
            h = tape.relu(h);
            let l = format!("dec{}", i + 1);
            let (w, bias) = (Self::p(vars, &self.params, &l, "weight"), Self::p(vars, &self.params, &l, "bias"));
            let (spec, out_pad) = up_spec(s);
            h = tape.conv_transpose1d(h, w, Some(bias), spec, out_pad)?;
            debug_assert_eq!(tape.value(h).shape()[2], plan.lengths[n - 1 - i]);
        }
        h = tape.reshape(h, &[b, plan.padded_len])?;
        h = tape.crop_last(h, plan.input_len)?;
        let ob = Self::p(vars, &self.params, "out", "bias");
        tape.add_bias(h, ob)
    }

    fn check_rows(&self, rows: &[&[f64]], width: usize, what: &str) -> Result<()> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument(format!("no {what} vectors")));
        }
        for r in rows {
            if r.len() != width {
                return Err(Error::Shape {
                    op: "autoencoder",
                    detail: format!("{what} of length {}, expected {width}", r.len()),
                });
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("non-finite {what} entry")));
            }
        }
        Ok(())
    }

    fn batch_tensor(rows: &[&[f64]], noise: Option<(f64, &mut Rng)>) -> Tensor<T> {
        let width = rows[0].len();
        let mut data: Vec<T> = rows.iter().flat_map(|r| r.iter().map(|&v| T::of(v))).collect();
        if let Some((sigma, rng)) = noise {
            if sigma > 0.0 {
                data.iter_mut().for_each(|v| *v += T::of(sigma * rng.standard_normal()));
            }
        }
        Tensor::new([rows.len(), width], data).expect("rows share one width")
    }

    fn rows_of(t: &Tensor<T>) -> Vec<Vec<f64>> {
        let w = t.shape()[1];
        t.data().chunks(w).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect()
    }

    /// Latent codes of a batch. With `Noise::On`, `sigma_v` noise is added
    /// to the inputs first.
    pub fn encode_batch(&self, rows: &[&[f64]], noise: Noise, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        self.check_rows(rows, self.input_dim(), "parameter")?;
        let x = Self::batch_tensor(rows, (noise == Noise::On).then_some((self.config.sigma_v, rng)));
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, |_| false);
        let xv = tape.constant(x);
        let z = self.encoder_graph(&mut tape, &vars, xv)?;
        Ok(Self::rows_of(tape.value(z)))
    }

    /// Parameter vectors from latent codes. With `Noise::On`, `sigma_z`
    /// noise is added to the codes first.
    pub fn decode_batch(&self, rows: &[&[f64]], noise: Noise, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        self.check_rows(rows, self.latent_dim(), "latent")?;
        let z = Self::batch_tensor(rows, (noise == Noise::On).then_some((self.config.sigma_z, rng)));
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, |_| false);
        let zv = tape.constant(z);
        let y = self.decoder_graph(&mut tape, &vars, zv)?;
        Ok(Self::rows_of(tape.value(y)))
    }

    pub fn encode(&self, v: &[f64], noise: Noise, rng: &mut Rng) -> Result<Vec<f64>> {
        Ok(self.encode_batch(&[v], noise, rng)?.remove(0))
    }

    pub fn decode(&self, z: &[f64], noise: Noise, rng: &mut Rng) -> Result<Vec<f64>> {
        Ok(self.decode_batch(&[z], noise, rng)?.remove(0))
    }

    /// Noise-free encode then decode.
    pub fn reconstruct(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut unused = rng_from_seed(0);
        let z = self.encode(v, Noise::Off, &mut unused)?;
        self.decode(&z, Noise::Off, &mut unused)
    }

    /// Mean squared reconstruction error over rows, noise off.
    pub fn reconstruction_mse(&self, rows: &[Vec<f64>]) -> Result<f64> {
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let mut unused = rng_from_seed(0);
        let z = self.encode_batch(&refs, Noise::Off, &mut unused)?;
        let zr: Vec<&[f64]> = z.iter().map(Vec::as_slice).collect();
        let out = self.decode_batch(&zr, Noise::Off, &mut unused)?;
        let (mut s, mut n) = (0.0, 0usize);
        for (a, b) in out.iter().zip(rows) {
            s += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            n += a.len();
        }
        Ok(s / n as f64)
    }
}

/// Trains with both noise injections on; returns the loss of every iteration.
/// Each iteration draws a batch without replacement from `rows`.
pub fn train_autoencoder<T: Scalar>(ae: &mut Autoencoder<T>, rows: &[Vec<f64>], seed: u64) -> Result<Vec<f64>> {
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    ae.check_rows(&refs, ae.input_dim(), "corpus")?;
    let cfg = ae.config.clone();
    let mut rng = rng_from_seed(seed);
    let tensors: Vec<_> = ae.params.iter().map(|p| &p.value).collect();
    let mut opt = OptimizerState::new(OptimizerConfig::new(OptimizerKind::AdamW, cfg.lr, cfg.weight_decay), &tensors)?;
    let all: Vec<usize> = (0..ae.params.len()).collect();
    let bs = cfg.batch_size.min(rows.len());
    let mut history = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let idx = rand::seq::index::sample(&mut rng, rows.len(), bs);
        let batch: Vec<&[f64]> = idx.iter().map(|i| refs[i]).collect();
        let clean = Autoencoder::<T>::batch_tensor(&batch, None);
        let noisy = Autoencoder::<T>::batch_tensor(&batch, Some((cfg.sigma_v, &mut rng)));
        let mut tape = Tape::new();
        let vars = ae.params.bind(&mut tape, |_| true);
        let xv = tape.constant(noisy);
        let target = tape.constant(clean);
        let mut z = ae.encoder_graph(&mut tape, &vars, xv)?;
        if cfg.sigma_z > 0.0 {
            let shape = tape.value(z).shape().to_vec();
            let n: usize = shape.iter().product();
            let xi: Vec<T> = (0..n).map(|_| T::of(cfg.sigma_z * rng.standard_normal())).collect();
            let xi = tape.constant(Tensor::new(shape, xi)?);
            z = tape.add(z, xi)?;
        }
        let out = ae.decoder_graph(&mut tape, &vars, z)?;
        let loss = tape.mse(out, target)?;
        let lval = tape.value(loss).data()[0].as_f64();
        if !lval.is_finite() {
            return Err(Error::Divergence {
                stage: "autoencoder",
                iteration: it,
            });
        }
        let grads = tape.backward(loss)?;
        let lr = cosine_lr(it, cfg.iterations, cfg.lr)?;
        ae.params.step_subset(&all, &vars, &grads, &mut opt, lr)?;
        history.push(lval);
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct NetworkManifest<C> {
    pub config: C,
    pub params: Vec<(String, Vec<usize>)>,
}

pub(crate) fn save_params<T: Scalar, C: Serialize + Clone>(
    path: &Path,
    tag: container::SectionTag,
    config: &C,
    params: &ParamSet<T>,
) -> Result<()> {
    let manifest = NetworkManifest {
        config: config.clone(),
        params: params.iter().map(|p| (p.key(), p.value.shape().to_vec())).collect(),
    };
    let data: Vec<f32> = params.flat_values().iter().map(|v| v.as_f64() as f32).collect();
    container::write_file(path, tag, &manifest, 1, data.len(), &data)
}

/// Reads a parameter container and loads it into `params`, which must have
/// the layout listed in the manifest.
pub(crate) fn load_params<T: Scalar, C: serde::de::DeserializeOwned>(
    path: &Path,
    tag: container::SectionTag,
    build: impl FnOnce(&C) -> Result<ParamSet<T>>,
) -> Result<(C, ParamSet<T>)> {
    let c = container::read_file::<NetworkManifest<C>>(path, tag)?;
    let mut params = build(&c.manifest.config)?;
    let layout: Vec<(String, Vec<usize>)> = params.iter().map(|p| (p.key(), p.value.shape().to_vec())).collect();
    if layout != c.manifest.params || c.rows != 1 {
        return Err(Error::Format("parameter layout does not match the stored config".into()));
    }
    let values: Vec<T> = c.data.iter().map(|&v| T::of(v as f64)).collect();
    params.load_flat(&values)?;
    Ok((c.manifest.config, params))
}

impl<T: Scalar> Autoencoder<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_params(path, AUTOENCODER_TAG, &self.config, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, params) = load_params(path, AUTOENCODER_TAG, |c: &AutoencoderConfig| {
            Ok(Autoencoder::<T>::new(c.clone(), 0)?.params)
        })?;
        Ok(Self { config, params })
    }
}
