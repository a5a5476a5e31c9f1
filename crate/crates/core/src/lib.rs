//! Skewness-guided structured pruning of a multimodal windowed-attention
//! classifier, with a deterministic simulated federated-learning harness.
//!
//! The model is a two-or-more-stage shifted-window transformer whose pooled
//! image feature is fused with embeddings of sex, age bucket and lesion
//! site. Pruning scores each attention head and MLP channel group by the
//! skewness of its activation norms over window positions and physically
//! removes the units scoring `≤ 0`.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fl;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod skew;
pub mod surgery;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{BlockId, Model, ModelConfig, TabularInput};
