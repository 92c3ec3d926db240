//! Cross-lingual commonsense knowledge transfer at desk scale.
//!
//! A small transformer encoder feeds an attention-gated head that splits each
//! input into a commonsense embedding and a complementary non-commonsense
//! embedding. Training runs in three stages: task-adaptive pretraining on
//! mixed-language data, commonsense differentiation on parallel pairs, and
//! knowledge-transfer fine-tuning on question/answer pairs.

pub mod tensor;
pub mod data;
pub mod encoder;
pub mod head;
pub mod model;
pub mod optim;
pub mod checkpoint;
pub mod trainer;
pub mod eval;
pub mod pipeline;
pub mod error;

pub use error::{Error, Result};
