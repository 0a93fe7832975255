//! The trainable reranker scorer and its building blocks, all with exact
//! analytic gradients at 64-bit precision.

pub mod lstm;
pub mod optim;
pub mod reranker;
pub mod tensor;

pub use lstm::{lstm_step, LstmParams};
pub use optim::{sgd_momentum_update, ParamSet, Sgd};
pub use reranker::{
    backward, contrastive_loss, score, score_u, sentence_representation, Dropout, ModelCard,
    RerankerDims, RerankerParams, SentenceScore, TENSOR_NAMES,
};
pub use tensor::Tensor;
