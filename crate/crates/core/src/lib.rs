//! Multimodal time-series retrieval: a channel-aware transformer encoder,
//! masked-reconstruction pretraining, dual-level contrastive alignment with
//! text, cross-modal retrieval evaluation, and retrieval-augmented forecasting.

pub mod align;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod probe;
pub mod rag;
pub mod retrieval;
pub mod rng;
pub mod tensor;

pub use autodiff::{Grads, Tape, Var};
pub use error::{Result, TraceError};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
