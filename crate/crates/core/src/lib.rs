//! Neural-network parameter diffusion at desk scale.
//!
//! Train small classifiers, harvest checkpoints of a parameter subset, learn
//! a latent representation with a noise-augmented 1-D conv autoencoder, fit a
//! DDPM over the latents, and sample new parameters from noise. The
//! [`novelty`] module then measures how behaviourally distinct the generated
//! models are from the originals.
//!
//! The tensor engine and networks are generic over [`Scalar`]; the pipeline
//! runs in `f64` via the aliases below.

pub mod autoencoder;
pub mod autograd;
pub mod container;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod nn;
pub mod novelty;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod tasks;
pub mod tensor;

pub use autograd::{ConvSpec, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use optim::{cosine_lr, OptimizerConfig, OptimizerKind, OptimizerState};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Working precision of the pipeline.
pub type Real = f64;
pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
