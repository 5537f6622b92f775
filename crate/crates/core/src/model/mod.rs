//! Autoregressive SID recommender: encoder, losses, training and decoding.

pub mod decode;
pub mod loss;
pub mod params;
pub mod train;
pub mod undesired;

pub use decode::{beam_decode, popularity_baseline, recommend_all, Scored};
pub use loss::{
    accumulate_example_grad, auo_loss, batch_grad, closed_form_output_grads, context_base, encode_context,
    example_loss, grad_analytic, grad_with_trace, history_tokens, nll_loss, pooled_history, softmax, token_probs,
    total_loss, AllowedSets, LossConfig, LossParts, StepKind, StepRecord, TokenExample, GRAD_CHUNK,
};
pub use params::{Checkpoint, ModelParams, BLOCK_NAMES};
pub use train::{
    init_checkpoint, train, valid_hit_rate, BatchView, EpochLog, TrainCheckpoint, TrainConfig, TrainData,
    TrainOutcome, ValidSet,
};
pub use undesired::{build_undesired, UndesiredCollection, UndesiredConfig};
