//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied to its variables. Nodes are
//! appended in execution order, so the tape is always topologically sorted
//! and [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use pdiff::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```

pub mod gradcheck;
pub mod kernels;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use kernels::{Conv1dGeom, Conv2dGeom};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self { stride: 1, pad: 0 }
    }
}

enum Op<T> {
    Leaf,
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv1dGeom,
    },
    ConvT1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv1dGeom,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv2dGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        /// Whether the normalisation statistics came from this batch.
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    AddChannel {
        x: Var,
        e: Var,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Reshape {
        x: Var,
    },
    PadLast {
        x: Var,
        from: usize,
    },
    CropLast {
        x: Var,
        from: usize,
    },
    Sum {
        x: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation graph.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Result of a training-mode batch norm: output plus the batch statistics
/// (mean and biased variance per channel) for running-average updates.
pub struct BatchNormOut<T> {
    pub y: Var,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Option<Var>]) -> bool {
        vars.iter().flatten().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Affine map `x W^T + b` with `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err("dense", format!("input {xs:?}, weight {ws:?}")));
        }
        let (batch, n_in, n_out) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [n_out] {
                return Err(shape_err(
                    "dense",
                    format!("bias {:?}, expected [{n_out}]", self.shape(b)),
                ));
            }
        }
        let mut y = vec![T::zero(); batch * n_out];
        kernels::dense_forward(
            batch,
            n_in,
            n_out,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut y,
        );
        let rg = self.rg(&[Some(x), Some(w), b]);
        Ok(self.push(Tensor::new([batch, n_out], y)?, Op::Dense { x, w, b }, rg))
    }

    /// 1-D convolution, `x: [B, C, L]`, `w: [O, C, K]`, `b: [O]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] || spec.stride == 0 {
            return Err(shape_err(
                "conv1d",
                format!("input {xs:?}, weight {ws:?}, stride {}", spec.stride),
            ));
        }
        if xs[2] + 2 * spec.pad < ws[2] {
            return Err(shape_err(
                "conv1d",
                format!("padded length {} shorter than kernel {}", xs[2] + 2 * spec.pad, ws[2]),
            ));
        }
        self.check_bias("conv1d", b, ws[0])?;
        let geom = Conv1dGeom {
            batch: xs[0],
            in_ch: xs[1],
            out_ch: ws[0],
            in_len: xs[2],
            out_len: (xs[2] + 2 * spec.pad - ws[2]) / spec.stride + 1,
            kernel: ws[2],
            stride: spec.stride,
            pad: spec.pad,
        };
        let mut y = vec![T::zero(); geom.batch * geom.out_ch * geom.out_len];
        kernels::conv1d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut y,
        );
        let rg = self.rg(&[Some(x), Some(w), b]);
        let out = Tensor::new([geom.batch, geom.out_ch, geom.out_len], y)?;
        Ok(self.push(out, Op::Conv1d { x, w, b, geom }, rg))
    }

    /// Transposed 1-D convolution, `x: [B, C, L]`, `w: [C, O, K]`, `b: [O]`.
    /// Output length is `(L - 1) * stride - 2 * pad + K + out_pad`.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
        out_pad: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[0] || spec.stride == 0 {
            return Err(shape_err(
                "conv_transpose1d",
                format!("input {xs:?}, weight {ws:?}, stride {}", spec.stride),
            ));
        }
        let full = (xs[2] - 1) * spec.stride + ws[2] + out_pad;
        if full <= 2 * spec.pad || out_pad >= spec.stride {
            return Err(shape_err(
                "conv_transpose1d",
                format!("invalid padding {} / output padding {out_pad}", spec.pad),
            ));
        }
        self.check_bias("conv_transpose1d", b, ws[1])?;
        let geom = Conv1dGeom {
            batch: xs[0],
            in_ch: xs[1],
            out_ch: ws[1],
            in_len: xs[2],
            out_len: full - 2 * spec.pad,
            kernel: ws[2],
            stride: spec.stride,
            pad: spec.pad,
        };
        let mut y = vec![T::zero(); geom.batch * geom.out_ch * geom.out_len];
        kernels::conv_t1d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut y,
        );
        let rg = self.rg(&[Some(x), Some(w), b]);
        let out = Tensor::new([geom.batch, geom.out_ch, geom.out_len], y)?;
        Ok(self.push(out, Op::ConvT1d { x, w, b, geom }, rg))
    }

    /// 2-D convolution, `x: [B, C, H, W]`, `w: [O, C, KH, KW]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || spec.stride == 0 {
            return Err(shape_err(
                "conv2d",
                format!("input {xs:?}, weight {ws:?}, stride {}", spec.stride),
            ));
        }
        if xs[2] + 2 * spec.pad < ws[2] || xs[3] + 2 * spec.pad < ws[3] {
            return Err(shape_err(
                "conv2d",
                format!("padded input {xs:?} smaller than kernel {ws:?}"),
            ));
        }
        self.check_bias("conv2d", b, ws[0])?;
        let geom = Conv2dGeom {
            batch: xs[0],
            in_ch: xs[1],
            out_ch: ws[0],
            in_h: xs[2],
            in_w: xs[3],
            out_h: (xs[2] + 2 * spec.pad - ws[2]) / spec.stride + 1,
            out_w: (xs[3] + 2 * spec.pad - ws[3]) / spec.stride + 1,
            kh: ws[2],
            kw: ws[3],
            stride: spec.stride,
            pad: spec.pad,
        };
        let mut y = vec![T::zero(); geom.batch * geom.out_ch * geom.out_h * geom.out_w];
        kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut y,
        );
        let rg = self.rg(&[Some(x), Some(w), b]);
        let out = Tensor::new([geom.batch, geom.out_ch, geom.out_h, geom.out_w], y)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, rg))
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, n: usize) -> Result<()> {
        match b {
            Some(b) if self.shape(b) != [n] => Err(shape_err(
                op,
                format!("bias {:?}, expected [{n}]", self.shape(b)),
            )),
            _ => Ok(()),
        }
    }

    /// Batch norm over axis 1 of `x: [B, C, ...]` using this batch's statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<BatchNormOut<T>> {
        let (batch, ch, inner) = self.bn_dims(x, gamma, beta)?;
        let n = T::of((batch * inner) as f64);
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); ch];
        let mut var = vec![T::zero(); ch];
        for c in 0..ch {
            let mut s = T::zero();
            for b in 0..batch {
                s += xv[(b * ch + c) * inner..(b * ch + c + 1) * inner].iter().copied().sum::<T>();
            }
            mean[c] = s / n;
            let mut q = T::zero();
            for b in 0..batch {
                for &v in &xv[(b * ch + c) * inner..(b * ch + c + 1) * inner] {
                    q += (v - mean[c]) * (v - mean[c]);
                }
            }
            var[c] = q / n;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let y = self.bn_apply(x, gamma, beta, &mean, &inv_std, true, (batch, ch, inner))?;
        Ok(BatchNormOut { y, mean, var })
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let dims = self.bn_dims(x, gamma, beta)?;
        if mean.len() != dims.1 || var.len() != dims.1 {
            return Err(shape_err(
                "batch_norm",
                format!("running stats of length {}/{} for {} channels", mean.len(), var.len(), dims.1),
            ));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, mean, &inv_std, false, dims)
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        if xs.len() < 2 {
            return Err(shape_err("batch_norm", format!("input {xs:?} has no channel axis")));
        }
        let ch = xs[1];
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(shape_err(
                "batch_norm",
                format!(
                    "input {xs:?}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok((xs[0], ch, xs[2..].iter().product()))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        batch_stats: bool,
        (batch, ch, inner): (usize, usize, usize),
    ) -> Result<Var> {
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut y = vec![T::zero(); xv.len()];
        for b in 0..batch {
            for c in 0..ch {
                for i in (b * ch + c) * inner..(b * ch + c + 1) * inner {
                    xhat[i] = (xv[i] - mean[c]) * inv_std[c];
                    y[i] = g[c] * xhat[i] + bt[c];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[Some(x), Some(gamma), Some(beta)]);
        Ok(self.push(
            Tensor::new(shape, y)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std: inv_std.to_vec(),
                batch_stats,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[Some(x)]);
        self.push(y, Op::Relu { x }, rg)
    }

    /// Mean softmax cross-entropy of `logits: [B, C]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("logits {ls:?}, {} labels", labels.len()),
            ));
        }
        let (batch, nc) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= nc) {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {nc} classes"),
            ));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); lv.len()];
        let mut loss = T::zero();
        for b in 0..batch {
            let row = &lv[b * nc..(b + 1) * nc];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &v) in probs[b * nc..(b + 1) * nc].iter_mut().zip(row) {
                *p = (v - m).exp();
                z += *p;
            }
            for p in &mut probs[b * nc..(b + 1) * nc] {
                *p /= z;
            }
            loss += z.ln() + m - row[labels[b]];
        }
        loss /= T::of(batch as f64);
        let rg = self.rg(&[Some(logits)]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).ensure_same_shape(self.value(b), "mse")?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let s: T = av.iter().zip(bv).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let loss = s / T::of(av.len() as f64);
        let rg = self.rg(&[Some(a), Some(b)]);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { a, b }, rg))
    }

    fn elementwise(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.value(a).ensure_same_shape(self.value(b), op)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.elementwise(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[Some(a), Some(b)]);
        Ok(self.push(y, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.elementwise(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[Some(a), Some(b)]);
        Ok(self.push(y, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.elementwise(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[Some(a), Some(b)]);
        Ok(self.push(y, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let y = self.value(x).map(|v| v * s);
        let rg = self.rg(&[Some(x)]);
        self.push(y, Op::Scale { x, s }, rg)
    }

    /// Adds `e: [B, C]` to every position of `x: [B, C, ...]`.
    pub fn add_channel(&mut self, x: Var, e: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let es = self.shape(e);
        if xs.len() < 2 || es != [xs[0], xs[1]] {
            return Err(shape_err("add_channel", format!("input {xs:?}, embedding {es:?}")));
        }
        let inner: usize = xs[2..].iter().product();
        let ev = self.value(e).data().to_vec();
        let mut y = self.value(x).data().to_vec();
        for (i, chunk) in y.chunks_mut(inner).enumerate() {
            chunk.iter_mut().for_each(|v| *v += ev[i]);
        }
        let rg = self.rg(&[Some(x), Some(e)]);
        Ok(self.push(Tensor::new(xs, y)?, Op::AddChannel { x, e }, rg))
    }

    /// Adds `b` to every sample of `x: [B, ...]`; `b` holds one value per
    /// element of a sample.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let n = self.value(b).len();
        if xs.len() < 2 || xs[1..].iter().product::<usize>() != n {
            return Err(shape_err("add_bias", format!("input {xs:?}, bias {:?}", self.shape(b))));
        }
        let bv = self.value(b).data().to_vec();
        let mut y = self.value(x).data().to_vec();
        for row in y.chunks_mut(n) {
            row.iter_mut().zip(&bv).for_each(|(v, c)| *v += *c);
        }
        let rg = self.rg(&[Some(x), Some(b)]);
        Ok(self.push(Tensor::new(xs, y)?, Op::AddBias { x, b }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[Some(x)]);
        Ok(self.push(y, Op::Reshape { x }, rg))
    }

    /// Zero-pads the last axis to `len`.
    pub fn pad_last(&mut self, x: Var, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let from = *xs.last().expect("tensors have rank >= 1");
        if len < from {
            return Err(shape_err("pad_last", format!("cannot pad {xs:?} down to {len}")));
        }
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = len;
        let src = self.value(x).data();
        let mut y = vec![T::zero(); src.len() / from * len];
        for (dst, row) in y.chunks_mut(len).zip(src.chunks(from)) {
            dst[..from].copy_from_slice(row);
        }
        let rg = self.rg(&[Some(x)]);
        Ok(self.push(Tensor::new(shape, y)?, Op::PadLast { x, from }, rg))
    }

    /// Keeps the first `len` entries of the last axis.
    pub fn crop_last(&mut self, x: Var, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let from = *xs.last().expect("tensors have rank >= 1");
        if len > from || len == 0 {
            return Err(shape_err("crop_last", format!("cannot crop {xs:?} to {len}")));
        }
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = len;
        let y: Vec<T> = self
            .value(x)
            .data()
            .chunks(from)
            .flat_map(|row| row[..len].iter().copied())
            .collect();
        let rg = self.rg(&[Some(x)]);
        Ok(self.push(Tensor::new(shape, y)?, Op::CropLast { x, from }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[Some(x)]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Reverse sweep from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let n = self.nodes.len();
        if loss.0 >= n {
            return Err(Error::Backward("loss is not on this tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Backward(
                "loss is detached from every trainable parameter".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape().to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gy);
                continue;
            }
            let nodes = &self.nodes;
            let needs = |v: Var| nodes[v.0].requires_grad;
            let mut acc = Accum {
                grads: &mut grads,
                nodes,
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Dense { x, w, b } => {
                    let xs = nodes[x.0].value.shape();
                    let (batch, n_in, n_out) = (xs[0], xs[1], nodes[w.0].value.shape()[0]);
                    let mut gx = needs(*x).then(|| vec![T::zero(); batch * n_in]);
                    let mut gw = needs(*w).then(|| vec![T::zero(); n_out * n_in]);
                    let mut gb = b.filter(|b| needs(*b)).map(|_| vec![T::zero(); n_out]);
                    kernels::dense_backward(
                        batch,
                        n_in,
                        n_out,
                        nodes[x.0].value.data(),
                        nodes[w.0].value.data(),
                        gy.data(),
                        gx.as_deref_mut(),
                        gw.as_deref_mut(),
                        gb.as_deref_mut(),
                    );
                    acc.add_vec(*x, gx);
                    acc.add_vec(*w, gw);
                    if let Some(b) = b {
                        acc.add_vec(*b, gb);
                    }
                }
                Op::Conv1d { x, w, b, geom } | Op::ConvT1d { x, w, b, geom } => {
                    let transposed = matches!(node.op, Op::ConvT1d { .. });
                    let mut gx = needs(*x).then(|| vec![T::zero(); nodes[x.0].value.len()]);
                    let mut gw = needs(*w).then(|| vec![T::zero(); nodes[w.0].value.len()]);
                    let mut gb = b.filter(|b| needs(*b)).map(|_| vec![T::zero(); geom.out_ch]);
                    let f = if transposed {
                        kernels::conv_t1d_backward::<T>
                    } else {
                        kernels::conv1d_backward::<T>
                    };
                    f(
                        geom,
                        nodes[x.0].value.data(),
                        nodes[w.0].value.data(),
                        gy.data(),
                        gx.as_deref_mut(),
                        gw.as_deref_mut(),
                        gb.as_deref_mut(),
                    );
                    acc.add_vec(*x, gx);
                    acc.add_vec(*w, gw);
                    if let Some(b) = b {
                        acc.add_vec(*b, gb);
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let mut gx = needs(*x).then(|| vec![T::zero(); nodes[x.0].value.len()]);
                    let mut gw = needs(*w).then(|| vec![T::zero(); nodes[w.0].value.len()]);
                    let mut gb = b.filter(|b| needs(*b)).map(|_| vec![T::zero(); geom.out_ch]);
                    kernels::conv2d_backward(
                        geom,
                        nodes[x.0].value.data(),
                        nodes[w.0].value.data(),
                        gy.data(),
                        gx.as_deref_mut(),
                        gw.as_deref_mut(),
                        gb.as_deref_mut(),
                    );
                    acc.add_vec(*x, gx);
                    acc.add_vec(*w, gw);
                    if let Some(b) = b {
                        acc.add_vec(*b, gb);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let xs = nodes[x.0].value.shape();
                    let (batch, ch) = (xs[0], xs[1]);
                    let inner: usize = xs[2..].iter().product();
                    let g = nodes[gamma.0].value.data();
                    let gyv = gy.data();
                    let mut dgamma = vec![T::zero(); ch];
                    let mut dbeta = vec![T::zero(); ch];
                    for b in 0..batch {
                        for c in 0..ch {
                            for i in (b * ch + c) * inner..(b * ch + c + 1) * inner {
                                dgamma[c] += gyv[i] * xhat[i];
                                dbeta[c] += gyv[i];
                            }
                        }
                    }
                    if needs(*x) {
                        let mut gx = vec![T::zero(); gyv.len()];
                        let m = T::of((batch * inner) as f64);
                        for b in 0..batch {
                            for c in 0..ch {
                                let k = g[c] * inv_std[c];
                                for i in (b * ch + c) * inner..(b * ch + c + 1) * inner {
                                    gx[i] = if *batch_stats {
                                        k * (gyv[i] - dbeta[c] / m - xhat[i] * dgamma[c] / m)
                                    } else {
                                        k * gyv[i]
                                    };
                                }
                            }
                        }
                        acc.add_vec(*x, Some(gx));
                    }
                    acc.add_vec(*gamma, needs(*gamma).then_some(dgamma));
                    acc.add_vec(*beta, needs(*beta).then_some(dbeta));
                }
                Op::Relu { x } => {
                    let gx = gy
                        .data()
                        .iter()
                        .zip(nodes[x.0].value.data())
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    acc.add_vec(*x, Some(gx));
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let nc = nodes[logits.0].value.shape()[1];
                    let scale = gy.data()[0] / T::of(labels.len() as f64);
                    let mut gx = probs.clone();
                    for (b, &l) in labels.iter().enumerate() {
                        gx[b * nc + l] -= T::one();
                    }
                    gx.iter_mut().for_each(|v| *v *= scale);
                    acc.add_vec(*logits, Some(gx));
                }
                Op::Mse { a, b } => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    let k = T::of(2.0) * gy.data()[0] / T::of(av.len() as f64);
                    let d: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| k * (x - y)).collect();
                    if needs(*b) {
                        acc.add_vec(*b, Some(d.iter().map(|&v| -v).collect()));
                    }
                    acc.add_vec(*a, Some(d));
                }
                Op::Add { a, b } => {
                    acc.add_vec(*a, Some(gy.data().to_vec()));
                    acc.add_vec(*b, Some(gy.data().to_vec()));
                }
                Op::Sub { a, b } => {
                    acc.add_vec(*a, Some(gy.data().to_vec()));
                    acc.add_vec(*b, Some(gy.data().iter().map(|&v| -v).collect()));
                }
                Op::Mul { a, b } => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    let ga = gy.data().iter().zip(bv).map(|(&g, &y)| g * y).collect();
                    let gb = gy.data().iter().zip(av).map(|(&g, &x)| g * x).collect();
                    acc.add_vec(*a, Some(ga));
                    acc.add_vec(*b, Some(gb));
                }
                Op::Scale { x, s } => {
                    acc.add_vec(*x, Some(gy.data().iter().map(|&g| g * *s).collect()));
                }
                Op::AddChannel { x, e } => {
                    let xs = nodes[x.0].value.shape();
                    let inner: usize = xs[2..].iter().product();
                    let ge = gy.data().chunks(inner).map(|c| c.iter().copied().sum()).collect();
                    acc.add_vec(*x, Some(gy.data().to_vec()));
                    acc.add_vec(*e, Some(ge));
                }
                Op::AddBias { x, b } => {
                    let n = nodes[b.0].value.len();
                    let mut gb = vec![T::zero(); n];
                    for row in gy.data().chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(g, v)| *g += *v);
                    }
                    acc.add_vec(*x, Some(gy.data().to_vec()));
                    acc.add_vec(*b, Some(gb));
                }
                Op::Reshape { x } => {
                    acc.add_vec(*x, Some(gy.data().to_vec()));
                }
                Op::PadLast { x, from } => {
                    let len = *gy.shape().last().unwrap();
                    let gx = gy
                        .data()
                        .chunks(len)
                        .flat_map(|row| row[..*from].iter().copied())
                        .collect();
                    acc.add_vec(*x, Some(gx));
                }
                Op::CropLast { x, from } => {
                    let len = *gy.shape().last().unwrap();
                    let mut gx = vec![T::zero(); gy.len() / len * from];
                    for (dst, row) in gx.chunks_mut(*from).zip(gy.data().chunks(len)) {
                        dst[..len].copy_from_slice(row);
                    }
                    acc.add_vec(*x, Some(gx));
                }
                Op::Sum { x } => {
                    let g = gy.data()[0];
                    acc.add_vec(*x, Some(vec![g; nodes[x.0].value.len()]));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

struct Accum<'a, T> {
    grads: &'a mut Vec<Option<Tensor<T>>>,
    nodes: &'a [Node<T>],
}

impl<T: Scalar> Accum<'_, T> {
    fn add_vec(&mut self, v: Var, g: Option<Vec<T>>) {
        let Some(g) = g else { return };
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g) {
                    *e += x;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, g).expect("gradient matches value shape"));
            }
        }
    }
}
