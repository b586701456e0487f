//! DDPM over latent codes: forward noising, epsilon-prediction training, and
//! ancestral sampling with optional trajectory snapshots.

mod denoiser;
mod schedule;

pub use denoiser::{timestep_embedding, Denoiser, DenoiserConfig};
pub use schedule::{NoiseSchedule, DEFAULT_BETA_1, DEFAULT_BETA_T, DEFAULT_STEPS};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::optim::{cosine_lr, OptimizerConfig, OptimizerKind, OptimizerState};
use crate::rng::{derive_seed, rng_from_seed, NoiseSource, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

/// One Markov step of the forward chain:
/// `x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps`.
pub fn forward_step(schedule: &NoiseSchedule, x_prev: &[f64], t: usize, rng: &mut impl NoiseSource) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    let (a, b) = ((1.0 - schedule.beta(t)).sqrt(), schedule.beta(t).sqrt());
    Ok(x_prev.iter().map(|&x| a * x + b * rng.standard_normal()).collect())
}

/// Closed-form jump from `x_0` to step `t`:
/// `x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps`.
pub fn forward_sample(schedule: &NoiseSchedule, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    if eps.len() != x0.len() {
        return Err(Error::Shape {
            op: "forward_sample",
            detail: format!("x0 has {} entries, eps {}", x0.len(), eps.len()),
        });
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
}

/// Anything that predicts the noise in a batch of noisy latents.
pub trait EpsilonModel {
    fn latent_dim(&self) -> usize;
    fn predict(&self, xs: &[Vec<f64>], ts: &[usize]) -> Result<Vec<Vec<f64>>>;
}

impl<T: Scalar> EpsilonModel for Denoiser<T> {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn predict(&self, xs: &[Vec<f64>], ts: &[usize]) -> Result<Vec<Vec<f64>>> {
        let m = self.config.latent_dim;
        if xs.iter().any(|x| x.len() != m) {
            return Err(Error::Shape {
                op: "denoiser",
                detail: format!("latent rows must have length {m}"),
            });
        }
        let data: Vec<T> = xs.iter().flatten().map(|&v| T::of(v)).collect();
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, |_| false);
        let x = tape.constant(Tensor::new([xs.len(), m], data)?);
        let y = self.graph(&mut tape, &vars, x, ts)?;
        Ok(tape
            .value(y)
            .data()
            .chunks(m)
            .map(|r| r.iter().map(|v| v.as_f64()).collect())
            .collect())
    }
}

/// Posterior mean `mu = (x_t - beta_t / sqrt(1 - abar_t) eps) / sqrt(alpha_t)`.
pub fn reverse_mean(schedule: &NoiseSchedule, x_t: &[f64], t: usize, eps: &[f64]) -> Vec<f64> {
    let c = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let s = 1.0 / schedule.alpha(t).sqrt();
    x_t.iter().zip(eps).map(|(&x, &e)| s * (x - c * e)).collect()
}

/// One ancestral step: `x_{t-1} = mu + sqrt(beta_t) zeta`, with no noise at `t = 1`.
pub fn reverse_step<M: EpsilonModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    rng: &mut impl NoiseSource,
) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    let eps = model.predict(&[x_t.to_vec()], &[t])?.remove(0);
    Ok(finish_step(schedule, x_t, t, &eps, None, rng))
}

fn finish_step(
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    eps: &[f64],
    clip: Option<f64>,
    rng: &mut impl NoiseSource,
) -> Vec<f64> {
    let mut mu = reverse_mean(schedule, x_t, t, eps);
    if let Some(bound) = clip {
        clip_toward_bound(schedule, x_t, t, eps, bound, &mut mu);
    }
    if t > 1 {
        let sd = schedule.beta(t).sqrt();
        mu.iter_mut().for_each(|v| *v += sd * rng.standard_normal());
    }
    mu
}

/// Where the implied `x_0 = (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`
/// leaves `[-bound, bound]`, replaces the mean by the posterior mean of
/// `q(x_{t-1} | x_t, x_0)` at the clamped `x_0`. Other coordinates keep the
/// plain reverse mean, which is the same posterior mean unclamped.
fn clip_toward_bound(schedule: &NoiseSchedule, x_t: &[f64], t: usize, eps: &[f64], bound: f64, mu: &mut [f64]) {
    let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t - 1));
    let c0 = ab_prev.sqrt() * schedule.beta(t) / (1.0 - ab);
    let ct = schedule.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    for ((m, &x), &e) in mu.iter_mut().zip(x_t).zip(eps) {
        let x0 = (x - (1.0 - ab).sqrt() * e) / ab.sqrt();
        if x0.abs() > bound {
            *m = c0 * x0.clamp(-bound, bound) + ct * x;
        }
    }
}

/// Final latent plus optional `(t, x_t)` snapshots in decreasing `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSample {
    pub latent: Vec<f64>,
    pub trajectory: Vec<(usize, Vec<f64>)>,
}

/// `n` timesteps spread evenly from `T` down to 0 (fewer if `T` is small).
pub fn snapshot_times(steps: usize, n: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![0];
    }
    let mut ts: Vec<usize> = (0..n)
        .rev()
        .map(|k| ((steps * k) as f64 / (n - 1) as f64).round() as usize)
        .collect();
    ts.dedup();
    ts
}

/// How reverse chains are run and recorded.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleOptions {
    /// Number of `(t, x_t)` snapshots kept per chain.
    pub snapshots: usize,
    /// Bound on the implied clean latent at every step; `None` runs the
    /// plain ancestral step.
    pub clip: Option<f64>,
}

/// Runs `rngs.len()` reverse chains in one batch; chain `i` draws its start
/// point and step noise only from `rngs[i]`, so the result equals running the
/// chains one at a time.
pub fn sample_chains<M: EpsilonModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    rngs: &mut [Rng],
    opts: SampleOptions,
) -> Result<Vec<DiffusionSample>> {
    let m = model.latent_dim();
    let record = snapshot_times(schedule.steps, opts.snapshots);
    let mut xs: Vec<Vec<f64>> = rngs.iter_mut().map(|r| r.normal_vec(m)).collect();
    let mut traj: Vec<Vec<(usize, Vec<f64>)>> = vec![Vec::new(); rngs.len()];
    let snap = |t: usize, xs: &[Vec<f64>], traj: &mut Vec<Vec<(usize, Vec<f64>)>>| {
        if record.contains(&t) {
            traj.iter_mut().zip(xs).for_each(|(tr, x)| tr.push((t, x.clone())));
        }
    };
    snap(schedule.steps, &xs, &mut traj);
    for t in (1..=schedule.steps).rev() {
        let ts = vec![t; xs.len()];
        let eps = model.predict(&xs, &ts)?;
        for ((x, e), r) in xs.iter_mut().zip(&eps).zip(rngs.iter_mut()) {
            *x = finish_step(schedule, x, t, e, opts.clip, r);
        }
        snap(t - 1, &xs, &mut traj);
    }
    Ok(xs
        .into_iter()
        .zip(traj)
        .map(|(latent, trajectory)| DiffusionSample { latent, trajectory })
        .collect())
}

/// A single chain driven by `rng`.
pub fn sample<M: EpsilonModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
    opts: SampleOptions,
) -> Result<DiffusionSample> {
    let mut one = [rng.clone()];
    let out = sample_chains(model, schedule, &mut one, opts)?.remove(0);
    *rng = one[0].clone();
    Ok(out)
}

/// Rng of chain `i` for a sampling run seeded with `seed`.
pub fn chain_rng(seed: u64, i: usize) -> Rng {
    rng_from_seed(derive_seed(seed, &format!("chain-{i}")))
}

/// `n` chains with per-chain seeds, evaluated in batches of `batch`.
pub fn sample_many<M: EpsilonModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    n: usize,
    seed: u64,
    opts: SampleOptions,
    batch: usize,
) -> Result<Vec<DiffusionSample>> {
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + batch.max(1)).min(n);
        let mut rngs: Vec<Rng> = (start..end).map(|i| chain_rng(seed, i)).collect();
        out.extend(sample_chains(model, schedule, &mut rngs, opts)?);
        start = end;
    }
    Ok(out)
}

/// Per-coordinate affine map that puts latent codes at zero mean and unit
/// variance before diffusion; `invert` takes samples back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Largest magnitude of any scaled training latent.
    pub bound: f64,
}

impl LatentScaler {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
            bound: 0.0,
        }
    }

    /// Sets `bound` from the scaled `latents`.
    pub fn bounded_by(mut self, latents: &[Vec<f64>]) -> Self {
        self.bound = latents
            .iter()
            .flat_map(|z| self.apply(z))
            .fold(0.0, |m: f64, v| m.max(v.abs()));
        self
    }

    /// Coordinates with no spread keep unit scale.
    pub fn fit(latents: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = latents.first() else {
            return Err(Error::InvalidArgument("no latents to fit a scaler on".into()));
        };
        let (n, d) = (latents.len() as f64, first.len());
        let mut mean = vec![0.0; d];
        for z in latents {
            mean.iter_mut().zip(z).for_each(|(m, v)| *m += v / n);
        }
        let mut std = vec![0.0; d];
        for z in latents {
            std.iter_mut().zip(z.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n);
        }
        std.iter_mut().for_each(|s| *s = if *s > 1e-12 { s.sqrt() } else { 1.0 });
        Ok(Self { mean, std, bound: 0.0 }.bounded_by(latents))
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s).collect()
    }

    pub fn invert(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| v * s + m).collect()
    }
}

/// Mean squared error between true and predicted noise.
pub fn epsilon_loss(eps: &[Vec<f64>], pred: &[Vec<f64>]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (a, b) in eps.iter().zip(pred) {
        s += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        n += a.len();
    }
    s / n.max(1) as f64
}

/// Epsilon-prediction training with uniform timesteps; returns the loss of
/// every iteration.
pub fn train_denoiser<T: Scalar>(
    denoiser: &mut Denoiser<T>,
    schedule: &NoiseSchedule,
    latents: &[Vec<f64>],
    seed: u64,
) -> Result<Vec<f64>> {
    let m = denoiser.config.latent_dim;
    if latents.is_empty() {
        return Err(Error::InvalidArgument("no latents to train on".into()));
    }
    if latents.iter().any(|z| z.len() != m || z.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidArgument(format!("latents must be finite with length {m}")));
    }
    let cfg = denoiser.config.clone();
    let mut rng = rng_from_seed(seed);
    let tensors: Vec<_> = denoiser.params.iter().map(|p| &p.value).collect();
    let mut opt = OptimizerState::new(OptimizerConfig::new(OptimizerKind::AdamW, cfg.lr, cfg.weight_decay), &tensors)?;
    let all: Vec<usize> = (0..denoiser.params.len()).collect();
    let bs = cfg.batch_size.min(latents.len());
    let mut history = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let idx = rand::seq::index::sample(&mut rng, latents.len(), bs);
        let mut ts = Vec::with_capacity(bs);
        let mut xt = Vec::with_capacity(bs * m);
        let mut eps = Vec::with_capacity(bs * m);
        for i in idx.iter() {
            let t = rng.random_range(1..=schedule.steps);
            let e: Vec<f64> = rng.normal_vec(m);
            xt.extend(forward_sample(schedule, &latents[i], t, &e)?);
            eps.extend(e);
            ts.push(t);
        }
        let mut tape = Tape::new();
        let vars = denoiser.params.bind(&mut tape, |_| true);
        let x = tape.constant(Tensor::new([bs, m], xt.into_iter().map(T::of).collect())?);
        let target = tape.constant(Tensor::new([bs, m], eps.into_iter().map(T::of).collect())?);
        let pred = denoiser.graph(&mut tape, &vars, x, &ts)?;
        let loss = tape.mse(pred, target)?;
        let lval = tape.value(loss).data()[0].as_f64();
        if !lval.is_finite() {
            return Err(Error::Divergence {
                stage: "diffusion",
                iteration: it,
            });
        }
        let grads = tape.backward(loss)?;
        let lr = cosine_lr(it, cfg.iterations, cfg.lr)?;
        denoiser.params.step_subset(&all, &vars, &grads, &mut opt, lr)?;
        history.push(lval);
    }
    Ok(history)
}
