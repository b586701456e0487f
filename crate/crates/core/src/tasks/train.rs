use super::dataset::{Split, SyntheticDataset};
use super::model::{evaluate, BnMode, Model};
use crate::autograd::Tape;
use crate::corpus::{flatten, CheckpointCorpus, CorpusManifest, ParamSelector, Provenance};
use crate::error::{Error, Result};
use crate::optim::{cosine_lr, OptimizerConfig, OptimizerKind, OptimizerState};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// SGD momentum; ignored by the Adam variants.
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_finetune_lr")]
    pub finetune_lr: f64,
    #[serde(default = "default_finetune_steps")]
    pub finetune_steps: usize,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Sgd
}
fn default_lr() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_epochs() -> usize {
    20
}
fn default_batch_size() -> usize {
    32
}
fn default_finetune_lr() -> f64 {
    0.03
}
fn default_finetune_steps() -> usize {
    300
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: default_optimizer(),
            lr: default_lr(),
            weight_decay: 0.0,
            momentum: default_momentum(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: 0,
            finetune_lr: default_finetune_lr(),
            finetune_steps: default_finetune_steps(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_train: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("train config: {m}")));
        if self.batch_size == 0 || self.batch_size > n_train {
            return bad(format!("batch size {} with {n_train} training samples", self.batch_size));
        }
        if self.finetune_steps == 0 {
            return bad("fine-tune steps must be at least 1".into());
        }
        for (name, v) in [("lr", self.lr), ("finetune_lr", self.finetune_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v}"));
            }
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("weight_decay {} / momentum {}", self.weight_decay, self.momentum));
        }
        Ok(())
    }

    fn optimizer(&self, lr: f64) -> OptimizerConfig {
        let c = OptimizerConfig::new(self.optimizer, lr, self.weight_decay);
        match self.optimizer {
            OptimizerKind::Sgd => c.with_momentum(self.momentum),
            _ => c,
        }
    }
}

/// Cycles through shuffled epochs of the training split.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    size: usize,
    rng: Rng,
}

impl Batcher {
    fn new(n: usize, size: usize, seed: u64) -> Self {
        let mut b = Self {
            order: (0..n).collect(),
            pos: n,
            size,
            rng: rng_from_seed(seed),
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn batches_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.size)
    }

    /// Next batch; the last batch of an epoch may be short.
    fn next(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.reshuffle();
        }
        let end = (self.pos + self.size).min(self.order.len());
        let b = self.order[self.pos..end].to_vec();
        self.pos = end;
        b
    }
}

/// One forward/backward pass in train mode. Updates the parameters at
/// `indices` and, if `track_bn`, the batch-norm running statistics.
#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut Model<f64>,
    x: Tensor<f64>,
    labels: &[usize],
    indices: &[usize],
    opt: &mut OptimizerState<f64>,
    lr: f64,
    track_bn: bool,
    stage: &'static str,
    iteration: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let trainable = |i: usize| indices.binary_search(&i).is_ok();
    let out = model.forward(&mut tape, xv, BnMode::Train, trainable)?;
    let loss = tape.softmax_cross_entropy(out.logits, labels)?;
    let lval = tape.value(loss).data()[0];
    if !lval.is_finite() {
        return Err(Error::Divergence { stage, iteration });
    }
    let grads = tape.backward(loss)?;
    model.params.step_subset(indices, &out.params, &grads, opt, lr)?;
    if track_bn {
        model.update_running(&out.batch_stats, &out.batch_counts);
    }
    if model.params.iter().any(|p| !p.value.all_finite()) {
        return Err(Error::Divergence { stage, iteration });
    }
    Ok(lval)
}

/// Trains every parameter for `config.epochs` epochs with a cosine schedule
/// over all steps; returns validation accuracy after each epoch.
pub fn train_to_convergence(model: &mut Model<f64>, data: &SyntheticDataset, config: &TrainConfig) -> Result<Vec<f64>> {
    let n = data.len(Split::Train);
    config.validate(n)?;
    if config.epochs == 0 {
        return Ok(Vec::new());
    }
    let indices: Vec<usize> = (0..model.params.len()).collect();
    let tensors: Vec<_> = model.params.iter().map(|p| &p.value).collect();
    let mut opt = OptimizerState::new(config.optimizer(config.lr), &tensors)?;
    let mut batcher = Batcher::new(n, config.batch_size, derive_seed(config.seed, "train-batches"));
    let per_epoch = batcher.batches_per_epoch();
    let total = per_epoch * config.epochs;
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for _ in 0..config.epochs {
        for _ in 0..per_epoch {
            let (x, y) = data.batch(Split::Train, &batcher.next());
            let lr = cosine_lr(step, total, config.lr)?;
            train_step(model, x, &y, &indices, &mut opt, lr, true, "train", step)?;
            step += 1;
        }
        history.push(evaluate(model, data, Split::Val)?.accuracy);
    }
    Ok(history)
}

/// Output of [`finetune_and_harvest`]: one flattened checkpoint per
/// optimizer step plus the validation accuracy measured at that step.
#[derive(Clone, Debug, PartialEq)]
pub struct Harvest {
    pub selector: ParamSelector,
    pub rows: Vec<Vec<f64>>,
    pub step_accuracy: Vec<f64>,
}

impl Harvest {
    pub fn into_corpus(self, model: &Model<f64>, data: &SyntheticDataset, provenance: Provenance) -> Result<CheckpointCorpus> {
        let dim = self.rows.first().map_or(0, Vec::len);
        let manifest = CorpusManifest {
            task: data.spec.clone(),
            model: model.spec.clone(),
            selector: self.selector,
            provenance,
            rows: self.rows.len(),
            dim,
            storage_precision: "f32".into(),
            compute_precision: "f64".into(),
            created: None,
        };
        CheckpointCorpus::new(manifest, self.rows)
    }
}

/// Continues training for `config.finetune_steps` steps, updating only the
/// selected parameters, and records the selected subset after every step.
///
/// Batch-norm running statistics stay frozen so that injecting row `k` back
/// into the model reproduces `step_accuracy[k]` exactly.
pub fn finetune_and_harvest(
    model: &mut Model<f64>,
    data: &SyntheticDataset,
    config: &TrainConfig,
    selector: &ParamSelector,
) -> Result<Harvest> {
    config.validate(data.len(Split::Train))?;
    let mut indices = selector.indices(&model.params)?;
    indices.sort_unstable();
    let tensors: Vec<_> = indices.iter().map(|&i| model.params.tensor(i)).collect();
    let mut opt = OptimizerState::new(config.optimizer(config.finetune_lr), &tensors)?;
    let mut batcher = Batcher::new(
        data.len(Split::Train),
        config.batch_size,
        derive_seed(config.seed, "finetune-batches"),
    );
    let steps = config.finetune_steps;
    let mut rows = Vec::with_capacity(steps);
    let mut step_accuracy = Vec::with_capacity(steps);
    for step in 0..steps {
        let (x, y) = data.batch(Split::Train, &batcher.next());
        let lr = cosine_lr(step, steps, config.finetune_lr)?;
        train_step(model, x, &y, &indices, &mut opt, lr, false, "finetune", step)?;
        rows.push(flatten(&model.params, selector)?.0);
        step_accuracy.push(evaluate(model, data, Split::Val)?.accuracy);
    }
    Ok(Harvest {
        selector: selector.clone(),
        rows,
        step_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::unflatten;
    use crate::tasks::{make_dataset, DatasetSpec, ModelSpec};

    fn small_images() -> (SyntheticDataset, Model<f64>) {
        let data = make_dataset(&DatasetSpec::tiny_images(64, 4, [3, 8, 8], 1.0, 1)).unwrap();
        let model = Model::build(&ModelSpec::convnet_mini_s([3, 8, 8], 4), 2).unwrap();
        (data, model)
    }

    #[test]
    fn zero_epochs_is_identity() {
        let data = make_dataset(&DatasetSpec::blobs(40, 4, 16, 3.0, 0)).unwrap();
        let mut m = Model::build(&ModelSpec::mlp_mini_s(&[16, 32, 16, 4]), 0).unwrap();
        let before = m.clone();
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 8,
            ..Default::default()
        };
        assert!(train_to_convergence(&mut m, &data, &cfg).unwrap().is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn config_checks() {
        let cfg = TrainConfig {
            batch_size: 500,
            ..Default::default()
        };
        assert!(cfg.validate(400).is_err());
        let cfg = TrainConfig {
            finetune_steps: 0,
            ..Default::default()
        };
        assert!(cfg.validate(400).is_err());
        assert!(TrainConfig::default().validate(400).is_ok());
    }

    #[test]
    fn divergence_is_reported() {
        let data = make_dataset(&DatasetSpec::blobs(40, 4, 16, 3.0, 0)).unwrap();
        let mut m = Model::build(&ModelSpec::mlp_mini_s(&[16, 32, 16, 4]), 0).unwrap();
        let cfg = TrainConfig {
            lr: 1e30,
            momentum: 0.0,
            batch_size: 8,
            epochs: 3,
            ..Default::default()
        };
        let err = train_to_convergence(&mut m, &data, &cfg).unwrap_err();
        assert!(matches!(err, Error::Divergence { stage: "train", .. }), "{err}");
    }

    #[test]
    fn harvest_freezes_unselected_and_replays() {
        let (data, mut m) = small_images();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 16,
            finetune_steps: 5,
            finetune_lr: 0.05,
            ..Default::default()
        };
        train_to_convergence(&mut m, &data, &cfg).unwrap();
        let before = m.clone();
        let sel = ParamSelector::layers(&m.params, &["bn1"]).unwrap();
        let h = finetune_and_harvest(&mut m, &data, &cfg, &sel).unwrap();
        assert_eq!(h.rows.len(), 5);
        assert!(h.rows.iter().all(|r| r.len() == 16));
        for (p, q) in m.params.iter().zip(before.params.iter()) {
            if p.layer != "bn1" {
                assert_eq!(p.value, q.value, "{}", p.key());
            }
        }
        assert_eq!(m.running, before.running);
        assert_ne!(h.rows[0], h.rows[4]);
        // last row is the final state
        assert_eq!(flatten(&m.params, &sel).unwrap().0, h.rows[4]);
        for (k, row) in h.rows.iter().enumerate() {
            let mut replay = before.clone();
            unflatten(row, &mut replay.params, &sel).unwrap();
            assert_eq!(evaluate(&replay, &data, Split::Val).unwrap().accuracy, h.step_accuracy[k]);
        }
    }

    #[test]
    fn harvest_is_reproducible_and_full_mode_updates_all() {
        let (data, m0) = small_images();
        let cfg = TrainConfig {
            batch_size: 16,
            finetune_steps: 3,
            ..Default::default()
        };
        let sel = ParamSelector::full(&m0.params);
        let (mut a, mut b) = (m0.clone(), m0.clone());
        let ha = finetune_and_harvest(&mut a, &data, &cfg, &sel).unwrap();
        let hb = finetune_and_harvest(&mut b, &data, &cfg, &sel).unwrap();
        assert_eq!(ha, hb);
        for (p, q) in a.params.iter().zip(m0.params.iter()) {
            // biases start at zero and receive nonzero gradients too
            assert_ne!(p.value, q.value, "{}", p.key());
        }
    }

    #[test]
    fn selector_errors_surface() {
        let (data, mut m) = small_images();
        let cfg = TrainConfig {
            batch_size: 16,
            finetune_steps: 1,
            ..Default::default()
        };
        let empty = ParamSelector {
            mode: crate::corpus::SelectorMode::Subset,
            entries: vec![],
        };
        assert!(finetune_and_harvest(&mut m, &data, &cfg, &empty).is_err());
        let ghost = ParamSelector {
            mode: crate::corpus::SelectorMode::Subset,
            entries: vec![crate::corpus::ParamRef {
                layer: "bn9".into(),
                param: "weight".into(),
            }],
        };
        assert!(matches!(
            finetune_and_harvest(&mut m, &data, &cfg, &ghost),
            Err(Error::UnknownParameter(_))
        ));
    }
}
