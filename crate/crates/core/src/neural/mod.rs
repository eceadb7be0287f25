//! Minimal deterministic neural-network engine.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod net;
pub mod optim;
pub mod params;
pub mod real;
pub mod schedule;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use layers::{LayerSpec, Mode};
pub use loss::{cosine_similarity, mse_loss, neg_cos_loss, simsiam_loss, SiameseLoss};
pub use net::{Sequential, Tape};
pub use optim::{AdamConfig, Optimizer, OptimizerKind, SgdConfig};
pub use params::{ParamId, ParamKind, ParamStore};
pub use real::Real;
pub use schedule::LrSchedule;
pub use tensor::Tensor;
