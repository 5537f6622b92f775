mod common;

use common::{example, fixture, small_table};
use proptest::prelude::*;
use sidbias::corpus::ItemId;
use sidbias::model::{
    auo_loss, beam_decode, closed_form_output_grads, encode_context, example_loss, grad_analytic, grad_with_trace,
    init_checkpoint, nll_loss, popularity_baseline, token_probs, total_loss, train, AllowedSets, LossConfig,
    ModelParams, StepKind, TokenExample, TrainConfig, TrainData, ValidSet,
};
use sidbias::skt::{Trie, ROOT};

/// Straight-line forward pass used as an oracle for the chain losses.
fn oracle_context(p: &ModelParams<f64>, history: &[u32], prefix: &[u32]) -> Vec<f64> {
    let d = p.dim;
    let mut hbar = vec![0.0; d];
    for &t in history {
        for k in 0..d {
            hbar[k] += p.input_emb[t as usize * d + k] / history.len() as f64;
        }
    }
    let mut pre = p.bias.clone();
    for r in 0..d {
        for c in 0..d {
            pre[r] += p.w_hist[r * d + c] * hbar[c];
        }
    }
    for (j, &t) in prefix.iter().enumerate() {
        for r in 0..d {
            for c in 0..d {
                pre[r] += p.w_pos[j * d * d + r * d + c] * p.input_emb[t as usize * d + c];
            }
        }
    }
    pre.iter().map(|v| v.tanh()).collect()
}

fn oracle_log_prob(p: &ModelParams<f64>, x: &[f64], allowed: &[u32], tok: u32) -> f64 {
    let d = p.dim;
    let logit = |c: u32| (0..d).map(|k| p.output_emb[c as usize * d + k] * x[k]).sum::<f64>();
    let z: f64 = allowed.iter().map(|&c| logit(c).exp()).sum();
    logit(tok) - z.ln()
}

fn oracle_nll(p: &ModelParams<f64>, ex: &TokenExample, allowed: &AllowedSets) -> f64 {
    let mut loss = 0.0;
    for i in 0..ex.target.len() {
        let a = allowed.at(i);
        if a.len() <= 1 {
            continue;
        }
        let x = oracle_context(p, &ex.history, &ex.target[..i]);
        loss -= oracle_log_prob(p, &x, a, ex.target[i]);
    }
    loss
}

#[test]
fn zero_weights_give_zero_context() {
    let p = ModelParams::<f64>::zeros(10, 4, 3);
    assert_eq!(encode_context(&p, &[1, 2], &[3]), vec![0.0; 4]);
}

#[test]
fn empty_prefix_context_depends_only_on_history() {
    let f = fixture(6, 0.7, 1);
    let a = encode_context(&f.params, &[0, 1], &[]);
    let b = oracle_context(&f.params, &[0, 1], &[]);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-14);
    }
    let c = encode_context(&f.params, &[0, 1], &[2]);
    assert_ne!(a, c);
}

#[test]
fn perturbing_history_moves_context_like_oracle() {
    let f = fixture(6, 0.7, 2);
    let mut p = f.params.clone();
    let before = encode_context(&p, &[0, 4], &[1]);
    p.input_emb[4 * 6 + 2] += 0.3;
    let after = encode_context(&p, &[0, 4], &[1]);
    assert_ne!(before, after);
    let oracle = oracle_context(&p, &[0, 4], &[1]);
    for (x, y) in after.iter().zip(&oracle) {
        assert!((x - y).abs() < 1e-14);
    }
}

#[test]
fn softmax_fixtures() {
    let mut p = ModelParams::<f64>::zeros(3, 1, 1);
    let eq = token_probs(&p, &[1.0], &[0, 1]);
    assert_eq!(eq, vec![0.5, 0.5]);
    p.output_emb[0] = 3f64.ln();
    let q = token_probs(&p, &[1.0], &[0, 1]);
    assert!((q[0] - 0.75).abs() < 1e-15 && (q[1] - 0.25).abs() < 1e-15);
    assert_eq!(token_probs(&p, &[1.0], &[2]), vec![1.0]);
}

#[test]
fn uniform_model_nll_is_steps_times_log_width() {
    let table = small_table();
    let allowed = AllowedSets::from_table(&table);
    let p = ModelParams::<f64>::zeros(table.layout.vocab_size as usize, 4, table.max_len());
    let ex = example(&table, &[1], 3, &[]);
    let expected: f64 = (0..ex.target.len())
        .map(|i| allowed.at(i).len())
        .filter(|&m| m > 1)
        .map(|m| (m as f64).ln())
        .sum();
    assert!((nll_loss(&p, &ex, &allowed, 1e-6) - expected).abs() < 1e-12);
}

#[test]
fn confident_model_nll_approaches_zero() {
    // output embedding of every target token aligned with a saturated context
    let table = small_table();
    let allowed = AllowedSets::from_table(&table);
    let v = table.layout.vocab_size as usize;
    let mut p = ModelParams::<f64>::zeros(v, 1, table.max_len());
    p.bias[0] = 20.0;
    let ex = example(&table, &[], 0, &[]);
    for &t in &ex.target {
        p.output_emb[t as usize] = 40.0;
    }
    let loss = nll_loss(&p, &ex, &allowed, 1e-6);
    assert!((0.0..1e-12).contains(&loss), "loss {loss}");
}

#[test]
fn nll_matches_step_by_step_oracle() {
    for seed in 0..5 {
        let f = fixture(5, 0.8, seed);
        for (h, t) in [(vec![0u32, 2], 3u32), (vec![4], 1), (vec![], 2)] {
            let ex = example(&f.table, &h, t, &[]);
            let got = nll_loss(&f.params, &ex, &f.allowed, 1e-6);
            let want = oracle_nll(&f.params, &ex, &f.allowed);
            assert!((got - want).abs() < 1e-10 * want.max(1.0), "{got} vs {want}");
        }
    }
}

#[test]
fn auo_single_even_step_is_ln2() {
    // vocabulary {0, 1, EOS=2}: one undesired token with P = 0.5, then a forced EOS
    let p = ModelParams::<f64>::zeros(3, 2, 1);
    let allowed = AllowedSets(vec![vec![0, 1], vec![2]]);
    let loss = auo_loss(&p, &[], &[vec![0, 2]], &allowed, 1e-6);
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn auo_is_additive_and_empty_is_zero() {
    let f = fixture(4, 0.6, 3);
    let ex = example(&f.table, &[0], 3, &[1]);
    let one = auo_loss(&f.params, &ex.history, &ex.undesired, &f.allowed, 1e-6);
    let two = auo_loss(&f.params, &ex.history, &[ex.undesired[0].clone(), ex.undesired[0].clone()], &f.allowed, 1e-6);
    assert!(one > 0.0);
    assert!((two - 2.0 * one).abs() < 1e-14);
    assert_eq!(auo_loss(&f.params, &ex.history, &[], &f.allowed, 1e-6), 0.0);
}

#[test]
fn auo_vanishes_when_undesired_tokens_are_improbable() {
    let table = small_table();
    let allowed = AllowedSets::from_table(&table);
    let v = table.layout.vocab_size as usize;
    let mut p = ModelParams::<f64>::zeros(v, 1, table.max_len());
    p.bias[0] = 20.0;
    let u = table.sid(ItemId(2)).unwrap().with_eos(table.layout.eos);
    for &t in &u {
        p.output_emb[t as usize] = -40.0;
    }
    // EOS is forced at the end of some paths but not at position 2
    let l = auo_loss(&p, &[], &[u], &allowed, 1e-6);
    assert!(l < 1e-10, "{l}");
}

#[test]
fn total_loss_is_linear_in_alpha() {
    let f = fixture(4, 0.6, 4);
    let batch = vec![example(&f.table, &[0], 3, &[1, 2]), example(&f.table, &[2], 0, &[])];
    let at = |alpha| total_loss(&f.params, &batch, &f.allowed, &LossConfig { alpha, eps: 1e-6 });
    let zero = at(0.0);
    let mean_nll: f64 = batch.iter().map(|e| nll_loss(&f.params, e, &f.allowed, 1e-6)).sum::<f64>() / 2.0;
    assert!((zero.total - mean_nll).abs() < 1e-14);
    let g1 = at(0.1).total - zero.total;
    let g2 = at(0.2).total - zero.total;
    assert!(g1 > 0.0);
    assert!((g2 - 2.0 * g1).abs() < 1e-12);
}

#[test]
fn two_token_gradient_fixture() {
    // vocabulary {0, 1, EOS}; equal logits at the first step, target token 0
    let mut p = ModelParams::<f64>::zeros(3, 2, 1);
    p.bias = vec![0.3, -0.2];
    let allowed = AllowedSets(vec![vec![0, 1], vec![2]]);
    let ex = TokenExample {
        history: vec![],
        target: vec![0, 2],
        undesired: vec![],
        target_item: ItemId(0),
    };
    let (_, g) = grad_analytic(&p, &ex, &allowed, &LossConfig { alpha: 0.0, eps: 1e-6 });
    let x: Vec<f64> = p.bias.iter().map(|b| b.tanh()).collect();
    for k in 0..2 {
        assert!((g.output_emb[k] + 0.5 * x[k]).abs() < 1e-15);
        assert!((g.output_emb[2 + k] - 0.5 * x[k]).abs() < 1e-15);
    }
}

#[test]
fn backprop_matches_closed_forms() {
    for seed in 0..10 {
        let f = fixture(5, 0.9, seed);
        for alpha in [0.0, 0.1, 0.7] {
            let cfg = LossConfig { alpha, eps: 1e-6 };
            let ex = example(&f.table, &[(seed % 3) as u32], 3 + (seed % 2) as u32, &[1, 2, 0]);
            let (_, g, trace) = grad_with_trace(&f.params, &ex, &f.allowed, &cfg);
            let closed = closed_form_output_grads(&trace, alpha);
            let d = f.params.dim;
            for tok in 0..f.params.vocab {
                let back = &g.output_emb[tok * d..(tok + 1) * d];
                let zero = vec![0.0; d];
                let cf = closed.get(&(tok as u32)).unwrap_or(&zero);
                for (a, b) in back.iter().zip(cf) {
                    assert!((a - b).abs() < 1e-10, "token {tok}: {a} vs {b}");
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn probabilities_sum_to_one(seed in 0u64..1000, h in 0u32..5, prefix_len in 0usize..3) {
        let f = fixture(4, 1.0, seed);
        let path = f.table.sid(ItemId(3)).unwrap().tokens.clone();
        let prefix = &path[..prefix_len.min(path.len())];
        let x = encode_context(&f.params, &f.table.sid(ItemId(h)).unwrap().tokens, prefix);
        let probs = token_probs(&f.params, &x, f.allowed.at(prefix.len()));
        let s: f64 = probs.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
    }

    /// A token that is not the target at a step is always pushed away from
    /// that step's context by the likelihood gradient.
    #[test]
    fn non_targets_never_gain_under_likelihood(seed in 0u64..1000, h in 0u32..5, t in 0u32..5) {
        let f = fixture(4, 1.0, seed);
        let ex = example(&f.table, &[h], t, &[]);
        let (_, _, trace) = grad_with_trace(&f.params, &ex, &f.allowed, &LossConfig { alpha: 0.0, eps: 1e-6 });
        for s in trace.iter().filter(|s| !s.clamped) {
            let x2: f64 = s.context.iter().map(|v| v * v).sum();
            for (&c, &p) in s.allowed.iter().zip(&s.probs) {
                let coef = p - if c == s.token { 1.0 } else { 0.0 };
                let projection = -coef * x2;
                if c != s.token {
                    prop_assert!(projection <= 0.0);
                } else {
                    prop_assert!(coef >= -1.0 && coef < 0.0 || p == 1.0);
                }
            }
        }
    }

    /// Adding the unlikelihood term raises the projection of every
    /// non-undesired token at each shared context.
    #[test]
    fn unlikelihood_rescues_non_undesired_tokens(seed in 0u64..1000, alpha in 0.01f64..1.0) {
        let f = fixture(4, 1.0, seed);
        let ex = example(&f.table, &[2], 3, &[1, 2]);
        let cfg = LossConfig { alpha, eps: 1e-6 };
        let (_, _, trace) = grad_with_trace(&f.params, &ex, &f.allowed, &cfg);
        let nll_only: Vec<_> = trace.iter().filter(|s| s.kind == StepKind::Nll).cloned().collect();
        let with = closed_form_output_grads(&trace, alpha);
        let without = closed_form_output_grads(&nll_only, 0.0);
        let root: Vec<_> = trace.iter().filter(|s| s.prefix.is_empty()).collect();
        let x = &root[0].context;
        let undesired: Vec<u32> = root.iter().filter(|s| s.kind == StepKind::Auo).map(|s| s.token).collect();
        let dot = |g: &Vec<f64>| -> f64 { g.iter().zip(x).map(|(a, b)| a * b).sum() };
        if root.iter().all(|s| !s.clamped) {
            for &c in &root[0].allowed {
                if undesired.contains(&c) {
                    continue;
                }
                prop_assert!(-dot(&with[&c]) > -dot(&without[&c]));
            }
        }
    }
}

fn train_fixture() -> (common::Fixture, Vec<TokenExample>, ValidSet) {
    let f = fixture(4, 0.5, 0);
    let mut examples = Vec::new();
    for (h, t) in [(0u32, 3u32), (1, 4), (2, 0), (3, 1), (4, 2), (0, 1), (1, 0)] {
        examples.push(example(&f.table, &[h], t, &[2]));
    }
    let valid = ValidSet {
        histories: vec![f.table.sid(ItemId(0)).unwrap().tokens.clone()],
        targets: vec![ItemId(3)],
    };
    (f, examples, valid)
}

fn small_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 3,
        dim: 4,
        learning_rate: 0.2,
        beam_width: 10,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_return_the_initialization() {
    let (f, examples, valid) = train_fixture();
    let data = TrainData {
        examples: &examples,
        allowed: &f.allowed,
        trie: &f.trie,
        valid: &valid,
        vocab: f.table.layout.vocab_size as usize,
        positions: f.table.max_len(),
    };
    let cfg = small_train_config(0);
    let out = train::<f64>(&data, &cfg, None, &mut |_| {}).unwrap();
    assert_eq!(out.params, init_checkpoint::<f64>(&data, &cfg).params);
    assert!(out.log.is_empty());
}

#[test]
fn training_is_deterministic_and_resumable() {
    let (f, examples, valid) = train_fixture();
    let data = TrainData {
        examples: &examples,
        allowed: &f.allowed,
        trie: &f.trie,
        valid: &valid,
        vocab: f.table.layout.vocab_size as usize,
        positions: f.table.max_len(),
    };
    let full = train::<f64>(&data, &small_train_config(6), None, &mut |_| {}).unwrap();
    let again = train::<f64>(&data, &small_train_config(6), None, &mut |_| {}).unwrap();
    assert_eq!(full.checkpoint.params, again.checkpoint.params);
    assert_eq!(full.log, again.log);

    let first = train::<f64>(&data, &small_train_config(3), None, &mut |_| {}).unwrap();
    let resumed = train::<f64>(&data, &small_train_config(6), Some(first.checkpoint), &mut |_| {}).unwrap();
    assert_eq!(resumed.checkpoint.params, full.checkpoint.params);
    assert_eq!([first.log, resumed.log].concat(), full.log);
    assert_eq!(resumed.params, full.params);

    // the loss goes down on this tiny set
    let l0 = full.log[0].total;
    let l5 = full.log[5].total;
    assert!(l5 < l0, "{l0} -> {l5}");
}

#[test]
fn diverging_run_is_reported() {
    let (f, examples, valid) = train_fixture();
    let data = TrainData {
        examples: &examples,
        allowed: &f.allowed,
        trie: &f.trie,
        valid: &valid,
        vocab: f.table.layout.vocab_size as usize,
        positions: f.table.max_len(),
    };
    let mut ck = init_checkpoint::<f64>(&data, &small_train_config(2));
    ck.params.bias[0] = f64::NAN;
    let err = train::<f64>(&data, &small_train_config(2), Some(ck), &mut |_| {}).unwrap_err();
    assert!(matches!(err, sidbias::Error::Divergence { .. }), "{err}");
}

/// Every complete path through the trie with its summed log-probability.
fn enumerate_paths(p: &ModelParams<f64>, history: &[u32], trie: &Trie) -> Vec<(ItemId, f64)> {
    let mut out = Vec::new();
    let mut stack = vec![(ROOT, Vec::<u32>::new(), 0.0)];
    while let Some((node, prefix, score)) = stack.pop() {
        let x = oracle_context(p, history, &prefix);
        let children: Vec<(u32, usize)> = trie.nodes[node].children.iter().map(|(&t, &n)| (t, n)).collect();
        let toks: Vec<u32> = children.iter().map(|c| c.0).collect();
        for (t, n) in children {
            let s = score + oracle_log_prob(p, &x, &toks, t);
            if t == trie.eos {
                out.push((trie.nodes[n].item.unwrap(), s));
            } else {
                let mut next = prefix.clone();
                next.push(t);
                stack.push((n, next, s));
            }
        }
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

#[test]
fn wide_beam_equals_exhaustive_enumeration() {
    for seed in 0..8 {
        let f = fixture(5, 1.0, seed);
        let hist = f.table.sid(ItemId((seed % 5) as u32)).unwrap().tokens.clone();
        let exact = enumerate_paths(&f.params, &hist, &f.trie);
        let beam = beam_decode(&f.params, &hist, &f.trie, f.params.vocab, 5);
        assert_eq!(beam.len(), 5);
        for (b, e) in beam.iter().zip(&exact) {
            assert_eq!(b.item, e.0);
            assert!((b.log_prob - e.1).abs() < 1e-10);
        }
        let top3 = beam_decode(&f.params, &hist, &f.trie, 5, 3);
        assert_eq!(top3.iter().map(|s| s.item).collect::<Vec<_>>(), exact[..3].iter().map(|e| e.0).collect::<Vec<_>>());
    }
}

#[test]
fn single_item_catalog_decodes_that_item() {
    use std::collections::BTreeMap;
    use sidbias::skt::{ItemKind, SemanticId, SidTable, VocabLayout};
    let layout = VocabLayout::rqk(2, 4, 0);
    let mut e = BTreeMap::new();
    e.insert(
        ItemId(7),
        SemanticId {
            tokens: vec![layout.token(0, 1).unwrap(), layout.token(1, 3).unwrap()],
            kind: ItemKind::Head,
        },
    );
    let table = SidTable::new(layout, e, 0).unwrap();
    let trie = Trie::build(&table);
    let p = ModelParams::<f64>::init(table.layout.vocab_size as usize, 3, 2, 1.0, 0);
    let got = beam_decode(&p, &[], &trie, 4, 3);
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].item, ItemId(7));
    assert!(got[0].log_prob.abs() < 1e-15);
}

#[test]
fn decoded_items_are_distinct_table_entries() {
    let f = fixture(4, 1.0, 11);
    let got = beam_decode(&f.params, &[0, 1], &f.trie, 3, 5);
    let mut items: Vec<ItemId> = got.iter().map(|s| s.item).collect();
    assert!(items.iter().all(|i| f.table.get(*i).is_some()));
    items.sort();
    items.dedup();
    assert_eq!(items.len(), got.len());
}

#[test]
fn popularity_baseline_orders_by_count_then_id() {
    let pop = [(ItemId(1), 5), (ItemId(2), 9), (ItemId(3), 5), (ItemId(4), 1)].into_iter().collect();
    assert_eq!(popularity_baseline(&pop, 3), vec![ItemId(2), ItemId(1), ItemId(3)]);
}

#[test]
fn example_loss_parts_are_consistent() {
    let f = fixture(4, 0.6, 5);
    let ex = example(&f.table, &[0], 4, &[2]);
    let cfg = LossConfig { alpha: 0.1, eps: 1e-6 };
    let parts = example_loss(&f.params, &ex, &f.allowed, &cfg);
    let (gparts, _) = grad_analytic(&f.params, &ex, &f.allowed, &cfg);
    assert!((parts.total - gparts.total).abs() < 1e-12);
    assert!((parts.total - (parts.nll + 0.1 * parts.auo)).abs() < 1e-14);
}
