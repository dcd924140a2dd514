//! Access-key locking for small feed-forward networks.
//!
//! A trained model is locked by zeroing a compact set of high-impact
//! parameters (the key). Holding the key restores the model exactly; the key
//! can be fine-tuned on new data while every other parameter stays frozen, so
//! the locked artifact never has to be redistributed.

pub mod adaptation;
pub mod autograd;
pub mod bounds;
pub mod data;
pub mod error;
pub mod hash;
pub mod keying;
pub mod locking;
pub mod model_io;
pub mod network;
pub mod pipeline;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use hash::Fingerprint;
pub use network::{NetworkSpec, ParameterStore};
pub use tensor::Tensor;
