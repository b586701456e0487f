//! 1-D conv encoder-decoder that predicts the injected noise from a noisy
//! latent and its timestep.

use crate::autoencoder::{down_spec, load_params, save_params, up_spec, StagePlan};
use crate::autograd::{Tape, Var};
use crate::container::DENOISER_TAG;
use crate::error::{Error, Result};
use crate::nn::{he_uniform, ParamSet};
use crate::rng::rng_from_seed;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_dim: usize,
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    #[serde(default = "default_time_dim")]
    pub time_dim: usize,
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
    vec![16, 32, 64, 64, 32]
}
fn default_time_dim() -> usize {
    64
}
fn default_lr() -> f64 {
    1e-3
}
fn default_iterations() -> usize {
    2000
}
fn default_batch() -> usize {
    50
}

impl DenoiserConfig {
    pub fn for_latent(latent_dim: usize) -> Self {
        Self {
            latent_dim,
            channels: default_channels(),
            time_dim: default_time_dim(),
            lr: default_lr(),
            weight_decay: 0.0,
            iterations: default_iterations(),
            batch_size: default_batch(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("denoiser config: {m}")));
        if self.latent_dim == 0 || self.channels.is_empty() || self.channels.contains(&0) {
            return bad(format!("latent {} channels {:?}", self.latent_dim, self.channels));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return bad(format!("time embedding width {} must be even", self.time_dim));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || self.batch_size == 0 {
            return bad(format!("lr {} wd {} batch {}", self.lr, self.weight_decay, self.batch_size));
        }
        Ok(())
    }
}

/// `[sin(t w_0), .., sin(t w_{h-1}), cos(t w_0), ..]` with
/// `w_i = 10000^(-i/h)` and `h = dim / 2`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let h = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..h {
        let w = (-(10_000f64).ln() * i as f64 / h as f64).exp();
        out[i] = (t as f64 * w).sin();
        out[h + i] = (t as f64 * w).cos();
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<T> {
    pub config: DenoiserConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let plan = StagePlan::new(config.latent_dim, config.channels.len());
        let ch = &config.channels;
        let mut params = ParamSet::new();
        params.push("time", "weight", he_uniform(&[ch[0], config.time_dim], config.time_dim, &mut rng));
        params.push("time", "bias", Tensor::zeros([ch[0]]));
        let mut prev = 1;
        for (i, &c) in ch.iter().enumerate() {
            let name = format!("down{}", i + 1);
            params.push(&name, "weight", he_uniform(&[c, prev, KERNEL], prev * KERNEL, &mut rng));
            params.push(&name, "bias", Tensor::zeros([c]));
            prev = c;
        }
        let flat = prev * plan.bottleneck_len();
        params.push("mid", "weight", he_uniform(&[flat, flat], flat, &mut rng));
        params.push("mid", "bias", Tensor::zeros([flat]));
        let mut outs: Vec<usize> = ch.iter().rev().skip(1).copied().collect();
        outs.push(1);
        let mut cin = prev;
        for (i, &c) in outs.iter().enumerate() {
            let name = format!("up{}", i + 1);
            params.push(&name, "weight", he_uniform(&[cin, c, KERNEL], cin * KERNEL, &mut rng));
            params.push(&name, "bias", Tensor::zeros([c]));
            cin = c;
        }
        Ok(Self { config, params })
    }

    fn p(&self, vars: &[Var], layer: &str, name: &str) -> Var {
        vars[self.params.index_of(layer, name).expect("parameter exists by construction")]
    }

    /// `x: [B, latent]`, one timestep per row; returns predicted noise `[B, latent]`.
    pub(crate) fn graph(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, ts: &[usize]) -> Result<Var> {
        let plan = StagePlan::new(self.config.latent_dim, self.config.channels.len());
        let b = tape.value(x).shape()[0];
        if ts.len() != b {
            return Err(Error::Shape {
                op: "denoiser",
                detail: format!("{} timesteps for a batch of {b}", ts.len()),
            });
        }
        let td = self.config.time_dim;
        let emb: Vec<T> = ts.iter().flat_map(|&t| timestep_embedding(t, td)).map(T::of).collect();
        let emb = tape.constant(Tensor::new([b, td], emb)?);
        let temb = tape.dense(emb, self.p(vars, "time", "weight"), Some(self.p(vars, "time", "bias")))?;

        let mut h = tape.pad_last(x, plan.padded_len)?;
        h = tape.reshape(h, &[b, 1, plan.padded_len])?;
        let mut skips = Vec::with_capacity(plan.strides.len());
        for (i, &s) in plan.strides.iter().enumerate() {
            let l = format!("down{}", i + 1);
            h = tape.conv1d(h, self.p(vars, &l, "weight"), Some(self.p(vars, &l, "bias")), down_spec(s))?;
            if i == 0 {
                h = tape.add_channel(h, temb)?;
            }
            h = tape.relu(h);
            skips.push(h);
        }
        let shape = tape.value(h).shape().to_vec();
        let flat = shape[1] * shape[2];
        h = tape.reshape(h, &[b, flat])?;
        h = tape.dense(h, self.p(vars, "mid", "weight"), Some(self.p(vars, "mid", "bias")))?;
        h = tape.reshape(h, &shape)?;
        for (i, &s) in plan.strides.iter().rev().enumerate() {
            h = tape.add(h, skips[skips.len() - 1 - i])?;
            h = tape.relu(h);
            let l = format!("up{}", i + 1);
            let (spec, out_pad) = up_spec(s);
            h = tape.conv_transpose1d(h, self.p(vars, &l, "weight"), Some(self.p(vars, &l, "bias")), spec, out_pad)?;
        }
        h = tape.reshape(h, &[b, plan.padded_len])?;
        tape.crop_last(h, plan.input_len)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_params(path, DENOISER_TAG, &self.config, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, params) = load_params(path, DENOISER_TAG, |c: &DenoiserConfig| {
            Ok(Denoiser::<T>::new(c.clone(), 0)?.params)
        })?;
        Ok(Self { config, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_layout() {
        let e = timestep_embedding(0, 8);
        assert_eq!(e, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let e = timestep_embedding(3, 4);
        assert!((e[0] - 3f64.sin()).abs() < 1e-15);
        assert!((e[3] - (3.0 * 0.01f64).cos()).abs() < 1e-15);
    }

    #[test]
    fn output_matches_latent_shape() {
        for m in [4, 25, 128] {
            let d = Denoiser::<f64>::new(DenoiserConfig::for_latent(m), 0).unwrap();
            let mut tape = Tape::new();
            let vars = d.params.bind(&mut tape, |_| false);
            let x = tape.constant(Tensor::full([3, m], 0.5));
            let y = d.graph(&mut tape, &vars, x, &[1, 500, 1000]).unwrap();
            assert_eq!(tape.value(y).shape(), &[3, m]);
            assert!(tape.value(y).all_finite());
        }
    }

    #[test]
    fn rows_are_independent_of_batch() {
        let d = Denoiser::<f64>::new(DenoiserConfig::for_latent(12), 4).unwrap();
        let run = |rows: Vec<f64>, ts: &[usize]| {
            let mut tape = Tape::new();
            let vars = d.params.bind(&mut tape, |_| false);
            let x = tape.constant(Tensor::new([ts.len(), 12], rows).unwrap());
            let y = d.graph(&mut tape, &vars, x, ts).unwrap();
            tape.value(y).data().to_vec()
        };
        let a: Vec<f64> = (0..12).map(|i| i as f64 / 7.0).collect();
        let b: Vec<f64> = (0..12).map(|i| -(i as f64) / 3.0).collect();
        let both = run([a.clone(), b].concat(), &[10, 700]);
        assert_eq!(run(a, &[10]), both[..12].to_vec());
    }
}
