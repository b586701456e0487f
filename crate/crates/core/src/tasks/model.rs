use super::dataset::{Split, SyntheticDataset};
use crate::autograd::{ConvSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{he_uniform, ParamSet};
use crate::rng::rng_from_seed;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    MlpMiniS,
    ConvnetMiniS,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum LayerSpec {
    Dense {
        name: String,
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        name: String,
        channels: usize,
    },
    Relu,
    Flatten,
}

impl LayerSpec {
    pub fn name(&self) -> Option<&str> {
        match self {
            Self::Dense { name, .. } | Self::Conv2d { name, .. } | Self::BatchNorm { name, .. } => Some(name),
            Self::Relu | Self::Flatten => None,
        }
    }

    /// `(parameter name, shape)` pairs in storage order (weights before biases).
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            Self::Dense {
                in_features,
                out_features,
                ..
            } => vec![("weight", vec![out_features, in_features]), ("bias", vec![out_features])],
            Self::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                ("weight", vec![out_channels, in_channels, kernel, kernel]),
                ("bias", vec![out_channels]),
            ],
            Self::BatchNorm { channels, .. } => vec![("weight", vec![channels]), ("bias", vec![channels])],
            Self::Relu | Self::Flatten => vec![],
        }
    }
}

/// Architecture description: layer list plus the named-parameter table it implies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
}

fn default_bn_eps() -> f64 {
    1e-5
}

fn default_bn_momentum() -> f64 {
    0.1
}

impl ModelSpec {
    /// MLP with ReLU between consecutive dense layers; `dims` includes the
    /// input width and the class count, e.g. `[16, 32, 16, 4]`.
    pub fn mlp_mini_s(dims: &[usize]) -> Self {
        let mut layers = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            if i > 0 {
                layers.push(LayerSpec::Relu);
            }
            layers.push(LayerSpec::Dense {
                name: format!("linear{}", i + 1),
                in_features: w[0],
                out_features: w[1],
            });
        }
        Self {
            architecture: Architecture::MlpMiniS,
            input_shape: vec![dims[0]],
            layers,
            bn_eps: default_bn_eps(),
            bn_momentum: default_bn_momentum(),
        }
    }

    /// conv(5x5) -> relu -> conv(3x3, stride 2) -> BN(8) -> relu -> conv(3x3)
    /// -> relu -> flatten -> linear -> relu -> linear, for `[C, H, W]` inputs
    /// with `H` and `W` even.
    pub fn convnet_mini_s(input: [usize; 3], n_classes: usize) -> Self {
        let [c, h, w] = input;
        let flat = 4 * h.div_ceil(2) * w.div_ceil(2);
        let conv = |name: &str, i, o, k, stride, pad| LayerSpec::Conv2d {
            name: name.into(),
            in_channels: i,
            out_channels: o,
            kernel: k,
            stride,
            pad,
        };
        Self {
            architecture: Architecture::ConvnetMiniS,
            input_shape: vec![c, h, w],
            layers: vec![
                conv("conv1", c, 8, 5, 1, 2),
                LayerSpec::Relu,
                conv("conv2", 8, 8, 3, 2, 1),
                LayerSpec::BatchNorm {
                    name: "bn1".into(),
                    channels: 8,
                },
                LayerSpec::Relu,
                conv("conv3", 8, 4, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    name: "linear1".into(),
                    in_features: flat,
                    out_features: 32,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    name: "linear2".into(),
                    in_features: 32,
                    out_features: n_classes,
                },
            ],
            bn_eps: default_bn_eps(),
            bn_momentum: default_bn_momentum(),
        }
    }

    /// Checks that consecutive layers compose and names are unique; returns
    /// the output width.
    pub fn validate(&self) -> Result<usize> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("model spec: {m}")));
        let mut names = HashSet::new();
        let mut shape = self.input_shape.clone();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return bad(format!("input shape {shape:?}"));
        }
        for layer in &self.layers {
            if let Some(n) = layer.name() {
                if !names.insert(n.to_string()) {
                    return bad(format!("duplicate layer name `{n}`"));
                }
            }
            match layer {
                LayerSpec::Dense {
                    name,
                    in_features,
                    out_features,
                } => {
                    if shape != [*in_features] || *out_features == 0 {
                        return bad(format!("{name} expects [{in_features}], gets {shape:?}"));
                    }
                    shape = vec![*out_features];
                }
                LayerSpec::Conv2d {
                    name,
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    if shape.len() != 3 || shape[0] != *in_channels || *stride == 0 || *kernel == 0 {
                        return bad(format!("{name} expects [{in_channels}, H, W], gets {shape:?}"));
                    }
                    if shape[1] + 2 * pad < *kernel || shape[2] + 2 * pad < *kernel {
                        return bad(format!("{name}: kernel {kernel} larger than padded input {shape:?}"));
                    }
                    shape = vec![
                        *out_channels,
                        (shape[1] + 2 * pad - kernel) / stride + 1,
                        (shape[2] + 2 * pad - kernel) / stride + 1,
                    ];
                }
                LayerSpec::BatchNorm { name, channels } => {
                    if shape[0] != *channels {
                        return bad(format!("{name} has {channels} channels, input {shape:?}"));
                    }
                }
                LayerSpec::Relu => {}
                LayerSpec::Flatten => shape = vec![shape.iter().product()],
            }
        }
        if shape.len() != 1 {
            return bad(format!("output shape {shape:?} is not a logit vector"));
        }
        Ok(shape[0])
    }

    /// Analytic parameter count.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.param_shapes())
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// `(layer, parameter, shape)` for every trainable tensor in storage order.
    pub fn param_table(&self) -> Vec<(String, String, Vec<usize>)> {
        self.layers
            .iter()
            .flat_map(|l| {
                let name = l.name().unwrap_or_default().to_string();
                l.param_shapes()
                    .into_iter()
                    .map(move |(p, s)| (name.clone(), p.to_string(), s))
            })
            .collect()
    }

    /// Names of the batch-norm layers in order.
    pub fn batch_norm_layers(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::BatchNorm { name, .. } => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalise with batch statistics and return them.
    Train,
    /// Normalise with the stored running statistics.
    Eval,
}

/// Classifier: spec, trainable parameters, and batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub params: ParamSet<T>,
    /// Per batch-norm layer, in layer order: (running mean, running variance).
    pub running: Vec<(Vec<T>, Vec<T>)>,
}

pub struct ForwardOut<T> {
    pub logits: Var,
    pub params: Vec<Var>,
    /// Batch statistics of each batch-norm layer (train mode only).
    pub batch_stats: Vec<(Vec<T>, Vec<T>)>,
    /// Elements per channel behind each entry of `batch_stats`.
    pub batch_counts: Vec<usize>,
}

impl<T: Scalar> Model<T> {
    /// He-uniform weights, zero biases, unit/zero batch-norm affine.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut params = ParamSet::new();
        let mut running = Vec::new();
        for layer in &spec.layers {
            match layer {
                LayerSpec::Dense {
                    name,
                    in_features,
                    out_features,
                } => {
                    params.push(name, "weight", he_uniform(&[*out_features, *in_features], *in_features, &mut rng));
                    params.push(name, "bias", Tensor::zeros([*out_features]));
                }
                LayerSpec::Conv2d {
                    name,
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let shape = [*out_channels, *in_channels, *kernel, *kernel];
                    params.push(name, "weight", he_uniform(&shape, in_channels * kernel * kernel, &mut rng));
                    params.push(name, "bias", Tensor::zeros([*out_channels]));
                }
                LayerSpec::BatchNorm { name, channels } => {
                    params.push(name, "weight", Tensor::full([*channels], T::one()));
                    params.push(name, "bias", Tensor::zeros([*channels]));
                    running.push((vec![T::zero(); *channels], vec![T::one(); *channels]));
                }
                LayerSpec::Relu | LayerSpec::Flatten => {}
            }
        }
        debug_assert_eq!(params.count(), spec.param_count());
        Ok(Self {
            spec: spec.clone(),
            params,
            running,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        mode: BnMode,
        trainable: impl Fn(usize) -> bool,
    ) -> Result<ForwardOut<T>> {
        let vars = self.params.bind(tape, trainable);
        let mut h = x;
        let mut pi = 0;
        let mut bn_i = 0;
        let mut batch_stats = Vec::new();
        let mut batch_counts = Vec::new();
        let eps = T::of(self.spec.bn_eps);
        for layer in &self.spec.layers {
            h = match layer {
                LayerSpec::Dense { .. } => {
                    pi += 2;
                    tape.dense(h, vars[pi - 2], Some(vars[pi - 1]))?
                }
                LayerSpec::Conv2d { stride, pad, .. } => {
                    pi += 2;
                    let spec = ConvSpec {
                        stride: *stride,
                        pad: *pad,
                    };
                    tape.conv2d(h, vars[pi - 2], Some(vars[pi - 1]), spec)?
                }
                LayerSpec::BatchNorm { .. } => {
                    pi += 2;
                    let (g, b) = (vars[pi - 2], vars[pi - 1]);
                    let out = match mode {
                        BnMode::Train => {
                            let v = tape.value(h);
                            batch_counts.push(v.len() / v.shape()[1]);
                            let o = tape.batch_norm_train(h, g, b, eps)?;
                            batch_stats.push((o.mean, o.var));
                            o.y
                        }
                        BnMode::Eval => {
                            let (m, v) = &self.running[bn_i];
                            tape.batch_norm_eval(h, g, b, m, v, eps)?
                        }
                    };
                    bn_i += 1;
                    out
                }
                LayerSpec::Relu => tape.relu(h),
                LayerSpec::Flatten => {
                    let s = tape.value(h).shape();
                    let rest: usize = s[1..].iter().product();
                    let b = s[0];
                    tape.reshape(h, &[b, rest])?
                }
            };
        }
        Ok(ForwardOut {
            logits: h,
            params: vars,
            batch_stats,
            batch_counts,
        })
    }

    /// Exponential running-average update of the batch-norm statistics.
    pub fn update_running(&mut self, batch_stats: &[(Vec<T>, Vec<T>)], batch_elems: &[usize]) {
        let mom = T::of(self.spec.bn_momentum);
        for (((rm, rv), (bm, bv)), &n) in self.running.iter_mut().zip(batch_stats).zip(batch_elems) {
            // running variance tracks the unbiased estimate
            let unbias = if n > 1 { T::of(n as f64 / (n as f64 - 1.0)) } else { T::one() };
            for c in 0..rm.len() {
                rm[c] = (T::one() - mom) * rm[c] + mom * bm[c];
                rv[c] = (T::one() - mom) * rv[c] + mom * bv[c] * unbias;
            }
        }
    }

    /// Logits for a batch of inputs in eval mode.
    pub fn predict_logits(&self, x: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = self.forward(&mut tape, xv, BnMode::Eval, |_| false)?;
        Ok(tape.value(out.logits).clone())
    }
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    spec: ModelSpec,
    params: Vec<(String, Vec<usize>)>,
    running: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Model<f64> {
    /// Stores spec, batch-norm statistics and parameters (as f32).
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let manifest = ModelManifest {
            spec: self.spec.clone(),
            params: self.params.iter().map(|p| (p.key(), p.value.shape().to_vec())).collect(),
            running: self.running.clone(),
        };
        let data: Vec<f32> = self.params.flat_values().iter().map(|&v| v as f32).collect();
        crate::container::write_file(path, crate::container::MODEL_TAG, &manifest, 1, data.len(), &data)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let c = crate::container::read_file::<ModelManifest>(path, crate::container::MODEL_TAG)?;
        let mut model = Self::build(&c.manifest.spec, 0)?;
        let layout: Vec<(String, Vec<usize>)> =
            model.params.iter().map(|p| (p.key(), p.value.shape().to_vec())).collect();
        if layout != c.manifest.params || c.manifest.running.len() != model.running.len() {
            return Err(Error::Format("model layout does not match its spec".into()));
        }
        model.params.load_flat(&c.data.iter().map(|&v| v as f64).collect::<Vec<_>>())?;
        model.running = c.manifest.running;
        Ok(model)
    }

    /// Copy with every parameter rounded to f32, as it would be after a
    /// save/load roundtrip.
    pub fn quantized(&self) -> Self {
        let mut m = self.clone();
        let v: Vec<f64> = m.params.flat_values().iter().map(|&x| x as f32 as f64).collect();
        m.params.load_flat(&v).expect("same layout");
        m
    }
}

/// Accuracy and per-sample predictions on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    /// Sorted indices of misclassified samples.
    pub wrong: Vec<usize>,
}

/// Evaluates in eval mode. Ties in the logits go to the lowest class index.
pub fn evaluate(model: &Model<f64>, data: &SyntheticDataset, split: Split) -> Result<Evaluation> {
    let (x, labels) = data.full(split);
    let logits = model.predict_logits(x)?;
    let nc = *logits.shape().last().unwrap();
    let predictions = argmax_rows(logits.data(), nc);
    Ok(score(predictions, &labels))
}

pub(crate) fn argmax_rows(logits: &[f64], nc: usize) -> Vec<usize> {
    logits
        .chunks(nc)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                // strict comparison keeps the earliest maximum; NaN never wins
                if v > row[best] || row[best].is_nan() && !v.is_nan() {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub(crate) fn score(predictions: Vec<usize>, labels: &[usize]) -> Evaluation {
    let wrong: Vec<usize> = predictions
        .iter()
        .zip(labels)
        .enumerate()
        .filter(|(_, (p, y))| p != y)
        .map(|(i, _)| i)
        .collect();
    let accuracy = 1.0 - wrong.len() as f64 / labels.len() as f64;
    Evaluation {
        accuracy,
        predictions,
        wrong,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{make_dataset, DatasetSpec};

    #[test]
    fn mlp_param_count() {
        let spec = ModelSpec::mlp_mini_s(&[16, 32, 16, 4]);
        assert_eq!(spec.param_count(), 16 * 32 + 32 + 32 * 16 + 16 + 16 * 4 + 4);
        assert_eq!(spec.param_count(), 1140);
        let m = Model::<f64>::build(&spec, 0).unwrap();
        assert_eq!(m.params.count(), 1140);
    }

    #[test]
    fn convnet_spec_is_desk_scale() {
        let spec = ModelSpec::convnet_mini_s([3, 8, 8], 4);
        assert_eq!(spec.validate().unwrap(), 4);
        let n = spec.param_count();
        assert!((3000..=10_000).contains(&n), "{n}");
        let bn: usize = spec
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::BatchNorm { .. }))
            .flat_map(|l| l.param_shapes())
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        assert_eq!(bn, 16);
    }

    #[test]
    fn same_seed_same_init() {
        let spec = ModelSpec::convnet_mini_s([3, 8, 8], 4);
        assert_eq!(Model::<f64>::build(&spec, 9).unwrap(), Model::<f64>::build(&spec, 9).unwrap());
        assert_ne!(Model::<f64>::build(&spec, 9).unwrap(), Model::<f64>::build(&spec, 10).unwrap());
        let m = Model::<f64>::build(&spec, 9).unwrap();
        assert!(m.params.get("bn1", "weight").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(m.params.get("conv1", "bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = ModelSpec::mlp_mini_s(&[16, 32, 4]);
        if let LayerSpec::Dense { in_features, .. } = &mut spec.layers[2] {
            *in_features = 31;
        }
        assert!(spec.validate().is_err());
        let mut spec = ModelSpec::mlp_mini_s(&[16, 32, 4]);
        if let LayerSpec::Dense { name, .. } = &mut spec.layers[2] {
            *name = "linear1".into();
        }
        assert!(spec.validate().is_err());
    }

    #[test]
    fn tie_breaks_to_lowest_index() {
        assert_eq!(argmax_rows(&[0.0, 2.0, 1.0, 2.0], 4), vec![1]);
        assert_eq!(argmax_rows(&[f64::NAN, 1.0], 2), vec![1]);
    }

    #[test]
    fn scoring() {
        assert_eq!(score(vec![0, 1, 2], &[0, 1, 2]).accuracy, 1.0);
        let e = score(vec![0; 8], &[0, 1, 2, 3, 0, 1, 2, 3]);
        assert_eq!(e.accuracy, 0.25);
        assert_eq!(e.wrong, vec![1, 2, 3, 5, 6, 7]);
    }

    #[test]
    fn constant_classifier_on_balanced_set() {
        let data = make_dataset(&DatasetSpec::blobs(16, 4, 4, 2.0, 3)).unwrap();
        let mut m = Model::<f64>::build(&ModelSpec::mlp_mini_s(&[4, 4]), 0).unwrap();
        m.params.load_flat(&[0.0; 20]).unwrap();
        let e = evaluate(&m, &data, Split::Val).unwrap();
        assert_eq!(e.accuracy, 0.25);
        assert!(e.predictions.iter().all(|&p| p == 0));
    }
}
