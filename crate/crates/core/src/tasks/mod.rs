//! Synthetic classification tasks, the mini architectures trained on them,
//! and the fine-tuning loop that harvests parameter checkpoints.

mod dataset;
mod model;
mod train;

pub use dataset::{make_dataset, DatasetKind, DatasetSpec, Split, SyntheticDataset};
pub use model::{evaluate, Architecture, BnMode, Evaluation, ForwardOut, LayerSpec, Model, ModelSpec};
pub use train::{finetune_and_harvest, train_to_convergence, Harvest, TrainConfig};
