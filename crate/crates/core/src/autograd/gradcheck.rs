//! Central finite-difference oracle for the reverse-mode primitives.
//!
//! Each check builds a randomly shaped instance of one primitive, reduces its
//! output to a scalar through a fixed random weighting, and compares every
//! coordinate of every input gradient against `(f(x+h) - f(x-h)) / 2h`.

use super::{ConvSpec, Tape, Var};
use crate::error::Result;
use crate::rng::{NoiseSource, Rng};
use crate::tensor::Tensor;
use rand::Rng as _;

pub const FD_STEP: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Dense,
    Conv1d,
    ConvTranspose1d,
    Conv2d,
    BatchNormTrain,
    BatchNormEval,
    Relu,
    SoftmaxCrossEntropy,
    Mse,
    Add,
    Sub,
    Mul,
    Scale,
    AddChannel,
    AddBias,
    PadCrop,
    Reshape,
}

impl Primitive {
    pub const ALL: [Primitive; 17] = [
        Primitive::Dense,
        Primitive::Conv1d,
        Primitive::ConvTranspose1d,
        Primitive::Conv2d,
        Primitive::BatchNormTrain,
        Primitive::BatchNormEval,
        Primitive::Relu,
        Primitive::SoftmaxCrossEntropy,
        Primitive::Mse,
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::AddChannel,
        Primitive::AddBias,
        Primitive::PadCrop,
        Primitive::Reshape,
    ];
}

type Builder = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    build: Builder,
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normal_vec(n)).expect("shape is consistent")
}

fn make_case(p: Primitive, rng: &mut Rng) -> Case {
    let mut r = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (a, b, c, d, e) = (r(1, 4), r(1, 5), r(1, 4), r(1, 7), r(1, 3));
    let stride = r(1, 3);
    let pad = r(0, 2);
    let _ = e;
    match p {
        Primitive::Dense => {
            let shapes = [vec![a, b], vec![c, b], vec![c]];
            Case {
                inputs: shapes.iter().map(|s| randn(rng, s)).collect(),
                build: Box::new(|t, v| t.dense(v[0], v[1], Some(v[2]))),
            }
        }
        Primitive::Conv1d => {
            let k = r(1, 3);
            let len = (k + r(0, 6)).max(k.saturating_sub(2 * pad)).max(1);
            let shapes = [vec![a, b, len], vec![c, b, k], vec![c]];
            Case {
                inputs: shapes.iter().map(|s| randn(rng, s)).collect(),
                build: Box::new(move |t, v| t.conv1d(v[0], v[1], Some(v[2]), ConvSpec { stride, pad })),
            }
        }
        Primitive::ConvTranspose1d => {
            let k = r(1, 3);
            let len = r(1, 6);
            let out_pad = r(0, stride - 1);
            // keep the output non-empty: (len-1)*s + k + op > 2*pad
            let pad = if (len - 1) * stride + k + out_pad > 2 * pad {
                pad
            } else {
                0
            };
            let shapes = [vec![a, b, len], vec![b, c, k], vec![c]];
            Case {
                inputs: shapes.iter().map(|s| randn(rng, s)).collect(),
                build: Box::new(move |t, v| {
                    t.conv_transpose1d(v[0], v[1], Some(v[2]), ConvSpec { stride, pad }, out_pad)
                }),
            }
        }
        Primitive::Conv2d => {
            let (kh, kw) = (r(1, 3), r(1, 3));
            let (h, w) = (kh + r(0, 3), kw + r(0, 3));
            let shapes = [vec![a, b.min(3), h, w], vec![c, b.min(3), kh, kw], vec![c]];
            Case {
                inputs: shapes.iter().map(|s| randn(rng, s)).collect(),
                build: Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), ConvSpec { stride, pad })),
            }
        }
        Primitive::BatchNormTrain | Primitive::BatchNormEval => {
            let batch = a + 1;
            let shape = if d % 2 == 0 { vec![batch, c] } else { vec![batch, c, d] };
            let mean: Vec<f64> = rng.normal_vec(c);
            let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
            let inputs = vec![randn(rng, &shape), randn(rng, &[c]), randn(rng, &[c])];
            let train = p == Primitive::BatchNormTrain;
            Case {
                inputs,
                build: Box::new(move |t, v| {
                    if train {
                        Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.y)
                    } else {
                        t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)
                    }
                }),
            }
        }
        Primitive::Relu => {
            // keep every input away from the kink
            let x = randn(rng, &[a, b, c]).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v });
            Case {
                inputs: vec![x],
                build: Box::new(|t, v| Ok(t.relu(v[0]))),
            }
        }
        Primitive::SoftmaxCrossEntropy => {
            let nc = b + 1;
            let labels: Vec<usize> = (0..a).map(|_| rng.random_range(0..nc)).collect();
            Case {
                inputs: vec![randn(rng, &[a, nc])],
                build: Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels)),
            }
        }
        Primitive::Mse => Case {
            inputs: vec![randn(rng, &[a, d]), randn(rng, &[a, d])],
            build: Box::new(|t, v| t.mse(v[0], v[1])),
        },
        Primitive::Add | Primitive::Sub | Primitive::Mul => Case {
            inputs: vec![randn(rng, &[a, b, c]), randn(rng, &[a, b, c])],
            build: Box::new(move |t, v| match p {
                Primitive::Add => t.add(v[0], v[1]),
                Primitive::Sub => t.sub(v[0], v[1]),
                _ => t.mul(v[0], v[1]),
            }),
        },
        Primitive::Scale => {
            let s: f64 = rng.standard_normal();
            Case {
                inputs: vec![randn(rng, &[a, b])],
                build: Box::new(move |t, v| Ok(t.scale(v[0], s))),
            }
        }
        Primitive::AddBias => Case {
            inputs: vec![randn(rng, &[a, b, d]), randn(rng, &[b * d])],
            build: Box::new(|t, v| t.add_bias(v[0], v[1])),
        },
        Primitive::AddChannel => Case {
            inputs: vec![randn(rng, &[a, b, d]), randn(rng, &[a, b])],
            build: Box::new(|t, v| t.add_channel(v[0], v[1])),
        },
        Primitive::PadCrop => {
            let extra = r(0, 3);
            let keep = r(1, d);
            Case {
                inputs: vec![randn(rng, &[a, b, d])],
                build: Box::new(move |t, v| {
                    let padded = t.pad_last(v[0], d + extra)?;
                    let scaled = t.scale(padded, 1.5);
                    t.crop_last(scaled, keep)
                }),
            }
        }
        Primitive::Reshape => Case {
            inputs: vec![randn(rng, &[a, b, d])],
            build: Box::new(move |t, v| t.reshape(v[0], &[a * b, d])),
        },
    }
}

/// Scalar objective `sum(out * weights)`; a scalar output is used as-is.
fn objective(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    if tape.value(out).len() == 1 {
        return Ok(out);
    }
    let w = tape.constant(weights.clone().reshape(tape.value(out).shape().to_vec())?);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn evaluate(case: &Case, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let loss = objective(&mut tape, out, weights)?;
    Ok(tape.value(loss).data()[0])
}

/// Runs one randomized check and returns the worst relative error over all
/// input coordinates.
pub fn check_once(p: Primitive, rng: &mut Rng) -> Result<f64> {
    let case = make_case(p, rng);
    // probe output size to draw the reduction weights
    let out_len = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = case.inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = (case.build)(&mut tape, &vars)?;
        tape.value(out).len()
    };
    let weights = Tensor::vector(rng.normal_vec(out_len));

    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let loss = objective(&mut tape, out, &weights)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0_f64;
    for (i, input) in case.inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        for j in 0..input.len() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (evaluate(&case, &plus, &weights)? - evaluate(&case, &minus, &weights)?) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
