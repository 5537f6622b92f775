//! Semantic-ID assignment: skeleton-founded tokenization, undifferentiated
//! RQ-KMeans baselines, disambiguation, vocabulary layout and the decoding
//! trie.

mod assign;
mod layout;
mod table;
mod trie;

pub use assign::{
    assign_head_sids, assign_tail_sids, baseline_rqk, baseline_rqk_split, nearest_head,
    skt_tokenize, tail_start_residual, Tokenization, TokenizerConfig,
};
pub use layout::{LevelRange, VocabLayout, DEDUP_LEVEL};
pub use table::{dedup_sids, lcp, ItemKind, SemanticId, SidTable};
pub use trie::{
    competition_steps, divergence_histogram, head_divergence_steps, trie_stats, Trie, TrieNode,
    TrieStats, ROOT,
};
