//! Oracles shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use pdiff::diffusion::{forward_sample, forward_step, NoiseSchedule};
use pdiff::rng::{rng_from_seed, NoiseSource};

/// Error-free product via fused multiply-add: `a * b = p + e` exactly.
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Double-double value `hi + lo`.
#[derive(Clone, Copy)]
struct Dd(f64, f64);

impl Dd {
    fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.0, o.0);
        let e = e + self.0 * o.1 + self.1 * o.0;
        let (s, t) = two_sum(p, e);
        Dd(s, t)
    }

    fn sub(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.0, -o.0);
        let e = e + self.1 - o.1;
        let (s, t) = two_sum(s, e);
        Dd(s, t)
    }

    fn div_int(self, n: u64) -> Dd {
        let q = self.0 / n as f64;
        let (p, e) = two_prod(q, n as f64);
        let r = ((self.0 - p) - e + self.1) / n as f64;
        let (s, t) = two_sum(q, r);
        Dd(s, t)
    }
}

/// `prod_{i<T} (1 - beta_i)` for the linear schedule, carried in
/// double-double with the betas formed from exact decimal pieces.
pub fn alpha_bar_oracle(steps: u64, b1_num: u64, bt_num: u64, denom: u64) -> f64 {
    let one = Dd(1.0, 0.0);
    let mut acc = one;
    for i in 0..steps {
        // beta_i = (b1 + (bT - b1) * i / (T - 1)) / denom, all integers exact in f64
        let num = Dd((b1_num * (steps - 1) + (bt_num - b1_num) * i) as f64, 0.0);
        let beta = num.div_int(denom * (steps - 1));
        acc = acc.mul(one.sub(beta));
    }
    acc.0 + acc.1
}

pub fn sig_digits_agree(a: f64, b: f64, digits: i32) -> bool {
    ((a - b) / b).abs() < 0.5 * 10f64.powi(1 - digits)
}

/// Sample moments of `x_T` reached by iterating single forward steps and by
/// the closed form, per coordinate, with their standard errors.
#[derive(Debug)]
pub struct Moments {
    pub iter_mean: f64,
    pub direct_mean: f64,
    pub iter_var: f64,
    pub direct_var: f64,
    pub se_mean: f64,
    pub se_var: f64,
}

impl Moments {
    /// Both gaps within `k` standard errors.
    pub fn agree(&self, k: f64) -> bool {
        (self.iter_mean - self.direct_mean).abs() < k * self.se_mean
            && (self.iter_var - self.direct_var).abs() < k * self.se_var
    }
}

pub fn forward_moments(s: &NoiseSchedule, x0: &[f64], trials: usize, seed: u64) -> Vec<Moments> {
    let t_max = s.steps;
    let mut rng = rng_from_seed(seed);
    let mut it = vec![Vec::with_capacity(trials); x0.len()];
    let mut direct = vec![Vec::with_capacity(trials); x0.len()];
    for _ in 0..trials {
        let mut x = x0.to_vec();
        for t in 1..=t_max {
            x = forward_step(s, &x, t, &mut rng).unwrap();
        }
        let eps: Vec<f64> = rng.normal_vec(x0.len());
        let y = forward_sample(s, x0, t_max, &eps).unwrap();
        for j in 0..x0.len() {
            it[j].push(x[j]);
            direct[j].push(y[j]);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64]| {
        let m = mean(v);
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
    };
    let n = trials as f64;
    it.iter()
        .zip(&direct)
        .map(|(a, b)| {
            let (v1, v2) = (var(a), var(b));
            Moments {
                iter_mean: mean(a),
                direct_mean: mean(b),
                iter_var: v1,
                direct_var: v2,
                se_mean: ((v1 + v2) / n).sqrt(),
                // a Gaussian sample variance has variance 2 sigma^4 / (n - 1)
                se_var: (2.0 * (v1 * v1 + v2 * v2) / (n - 1.0)).sqrt(),
            }
        })
        .collect()
}
