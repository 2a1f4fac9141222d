//! The network: encoder, per-level decoders, level aggregation, losses and
//! the training loop.

mod config;
mod decoder;
mod field;
mod loss;
mod model;
mod train;

pub use config::{Ablations, Aggregation, ModelConfig};
pub use decoder::{Decoder, DecoderCache, DecoderGrads, Dense};
pub use field::{aggregate, aggregate_backward, Field, FieldGrads, LevelValues, POINT_CHUNK};
pub use model::{Encoder, EncoderCache, Model, ModelParams};
pub use loss::{l1_terms, mean_abs_error, multilevel_loss, positions};
pub use train::{batch_gradients, train, train_for, train_step, StepReport, TrainState, TrainingShape};
