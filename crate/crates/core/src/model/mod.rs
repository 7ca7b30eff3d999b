//! From-scratch encoder–decoder with exact reverse-mode gradients.

pub mod checkpoint;
pub mod graph;
pub mod optim;
pub mod params;
pub mod projection;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, FLAG_SCL_PRETRAINED};
pub use graph::{AttentionLayout, Graph, NodeId};
pub use optim::{Adam, AdamConfig};
pub use params::{Grads, Param, ParamRef, ParamStore, Scope};
pub use projection::{ProjectionConfig, ProjectionHead, HEAD_SLOT};
pub use tensor::Tensor;
pub use train::{seq_loss, seq_loss_and_grads, train, TrainConfig, TrainReport, TrainingExample};
pub use transformer::{mean_pool, DecoderState, EncodedQuery, ModelConfig, Seq2SeqModel, MODEL_SLOT};
