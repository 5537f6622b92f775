//! Item representations and the residual K-means quantizer behind every
//! tokenizer in this crate.

mod kmeans;
mod pca;
mod reps;

pub use kmeans::{
    encode_residual, reconstruct, residual_norms_by_level, train_codebooks, Codebook,
    CodebookFile, CodebookHeader, KMeansConfig, ResidualCode,
};
pub use pca::{reduce_dim, Pca};
pub use reps::{
    load_reps, most_similar_tail, synthesize_reps, write_reps, ItemRep, LoadedReps, RepTable,
};
