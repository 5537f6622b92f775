#![allow(dead_code)]

use std::collections::BTreeMap;

use sidbias::corpus::ItemId;
use sidbias::model::{AllowedSets, ModelParams, TokenExample};
use sidbias::skt::{ItemKind, SemanticId, SidTable, Trie, VocabLayout};

/// Three heads with 2-token SIDs and two tails that extend heads 0 and 1
/// by one tail token.
pub fn small_table() -> SidTable {
    let layout = VocabLayout::skt(2, 3, 1, 3, 0);
    let t = |l: usize, c: usize| layout.token(l, c).unwrap();
    let mut e = BTreeMap::new();
    let mut put = |id: u32, toks: Vec<u32>, kind| {
        e.insert(ItemId(id), SemanticId { tokens: toks, kind });
    };
    put(0, vec![t(0, 0), t(1, 0)], ItemKind::Head);
    put(1, vec![t(0, 1), t(1, 2)], ItemKind::Head);
    put(2, vec![t(0, 2), t(1, 1)], ItemKind::Head);
    put(3, vec![t(0, 0), t(1, 0), t(2, 0)], ItemKind::Tail);
    put(4, vec![t(0, 1), t(1, 2), t(2, 1)], ItemKind::Tail);
    SidTable::new(layout.clone(), e, 0).unwrap()
}

pub struct Fixture {
    pub table: SidTable,
    pub allowed: AllowedSets,
    pub trie: Trie,
    pub params: ModelParams<f64>,
}

pub fn fixture(dim: usize, gain: f64, seed: u64) -> Fixture {
    let table = small_table();
    let mut params = ModelParams::init(table.layout.vocab_size as usize, dim, table.max_len(), gain, seed);
    // larger embeddings than the training init so probabilities are far from uniform
    for x in params.input_emb.iter_mut().chain(params.output_emb.iter_mut()) {
        *x *= 20.0;
    }
    Fixture {
        allowed: AllowedSets::from_table(&table),
        trie: Trie::build(&table),
        table,
        params,
    }
}

pub fn example(table: &SidTable, history: &[u32], target: u32, undesired: &[u32]) -> TokenExample {
    let eos = table.layout.eos;
    let hist = history
        .iter()
        .flat_map(|&i| table.sid(ItemId(i)).unwrap().tokens.clone())
        .collect();
    TokenExample {
        history: hist,
        target: table.sid(ItemId(target)).unwrap().with_eos(eos),
        undesired: undesired
            .iter()
            .map(|&u| table.sid(ItemId(u)).unwrap().with_eos(eos))
            .collect(),
        target_item: ItemId(target),
    }
}
