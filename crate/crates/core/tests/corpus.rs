use std::collections::BTreeMap;
use std::io::Write;

use proptest::prelude::*;
use sidbias::corpus::{
    balancing_probability, generate_synthetic, generate_synthetic_with, head_tail_counts, leave_one_out,
    load_interactions, popularity_ranking, split_head_tail, transform_sequences, Dataset, HeadTailSplit, ItemId,
    SyntheticConfig, TransformMode, UserId, MIN_INTERACTIONS,
};

fn top_fifth_share(ds: &Dataset) -> f64 {
    let ranked = popularity_ranking(&ds.popularity);
    let k = ranked.len() / 5;
    let top: u64 = ranked[..k].iter().map(|i| ds.popularity[i]).sum();
    top as f64 / ds.num_interactions() as f64
}

#[test]
fn default_generator_is_skewed_into_the_target_band() {
    let ds = generate_synthetic(2000, 500, 8, 1.5, 7).unwrap();
    let share = top_fifth_share(&ds);
    assert!((0.6..=0.9).contains(&share), "top-20% share {share}");
    assert_eq!(ds.users.len(), 2000);
    assert!(ds.sequences.iter().all(|s| s.len() >= MIN_INTERACTIONS));
    let mean_len = ds.num_interactions() as f64 / 2000.0;
    assert!((mean_len - 8.0).abs() < 0.5, "mean length {mean_len}");
}

#[test]
fn real_data_calibration_length_is_reachable() {
    // the average sequence length of the smallest benchmark corpus
    let cfg = SyntheticConfig {
        avg_len: 8.32,
        num_users: 1000,
        num_items: 200,
        ..SyntheticConfig::default()
    };
    let ds = generate_synthetic_with(&cfg).unwrap();
    let mean_len = ds.num_interactions() as f64 / 1000.0;
    assert!((mean_len - 8.32).abs() < 0.4, "mean length {mean_len}");
}

#[test]
fn generation_is_seeded() {
    let a = generate_synthetic(200, 60, 6, 1.2, 3).unwrap();
    let b = generate_synthetic(200, 60, 6, 1.2, 3).unwrap();
    let c = generate_synthetic(200, 60, 6, 1.2, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.sequences, c.sequences);
}

#[test]
fn duplicate_rows_are_kept_as_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rows.csv");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "user,item,timestamp").unwrap();
    // five users each see items 1..=5 once, user 0 sees item 3 twice at the same time
    for u in 0..5 {
        for i in 1..=5 {
            writeln!(f, "{u},{i},{}", 10 * i).unwrap();
        }
    }
    writeln!(f, "0,3,30").unwrap();
    drop(f);
    let ds = load_interactions(&path).unwrap();
    let oracle_rows = 26;
    assert_eq!(ds.num_interactions(), oracle_rows);
    assert_eq!(ds.popularity[&ItemId(3)], 6);
    assert_eq!(ds.sequences[0], [1, 2, 3, 3, 4, 5].map(ItemId).to_vec());
}

#[test]
fn sparse_users_and_items_are_filtered_iteratively() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rows.jsonl");
    let mut f = std::fs::File::create(&path).unwrap();
    for u in 0..5 {
        for i in 1..=5 {
            writeln!(f, r#"{{"user": {u}, "item": {i}, "timestamp": {i}}}"#).unwrap();
        }
    }
    // user 9 has a rare item; dropping it leaves them below the threshold
    for i in [1, 2, 3, 4, 77] {
        writeln!(f, r#"{{"user": 9, "item": {i}, "timestamp": {i}}}"#).unwrap();
    }
    drop(f);
    let ds = load_interactions(&path).unwrap();
    assert_eq!(ds.users, (0..5).map(UserId).collect::<Vec<_>>());
    assert!(!ds.popularity.contains_key(&ItemId(77)));
}

#[test]
fn head_is_the_top_fifth_of_items() {
    let ds = generate_synthetic(300, 100, 6, 1.3, 2).unwrap();
    let split = split_head_tail(&ds);
    assert_eq!(split.head.len(), 20);
    assert_eq!(split.head.len() + split.tail.len(), ds.items.len());
    let min_head = split.head.iter().map(|i| ds.popularity[i]).min().unwrap();
    let max_tail = split.tail.iter().map(|i| ds.popularity[i]).max().unwrap();
    assert!(min_head >= max_tail);
}

#[test]
fn leave_one_out_holds_out_last_two() {
    let ds = Dataset::from_sequences(
        vec![UserId(0), UserId(1)],
        vec![[1, 2, 3, 4, 5].map(ItemId).to_vec(), [6, 7].map(ItemId).to_vec()],
    );
    let s = leave_one_out(&ds);
    assert_eq!(s.skipped, 1);
    assert_eq!(s.test[0].target, ItemId(5));
    assert_eq!(s.valid[0].target, ItemId(4));
    assert_eq!(s.train.len(), 2);
    // training popularity ignores held-out items
    assert_eq!(s.train_popularity[&ItemId(5)], 0);
    assert_eq!(s.train_popularity[&ItemId(1)], 1);
}

#[test]
fn balancing_probability_for_eighty_twenty() {
    // 0.8 - 0.8p = 0.2 + 0.8p
    assert!((balancing_probability(0.8) - 0.375).abs() < 1e-15);
}

/// 80 head occurrences and 20 tail occurrences per 100, every head item
/// mapped to one tail item.
fn eighty_twenty(users: usize) -> (Dataset, HeadTailSplit, BTreeMap<ItemId, ItemId>) {
    let head: Vec<ItemId> = (0..4).map(ItemId).collect();
    let tail: Vec<ItemId> = (4..20).map(ItemId).collect();
    let mut seqs = Vec::new();
    for u in 0..users {
        let mut s = Vec::new();
        for j in 0..10 {
            s.push(if j < 8 { head[(u + j) % 4] } else { tail[(u + j) % 16] });
        }
        seqs.push(s);
    }
    let ds = Dataset::from_sequences((0..users as u32).map(UserId).collect(), seqs);
    let split = HeadTailSplit {
        head: head.iter().copied().collect(),
        tail: tail.iter().copied().collect(),
    };
    let sims = head.iter().map(|&h| (h, ItemId(4 + h.0))).collect();
    (ds, split, sims)
}

#[test]
fn augmentation_at_balancing_probability_gives_thirteen_to_seven() {
    let (ds, split, sims) = eighty_twenty(2000);
    let out = transform_sequences(&ds, &split, &sims, 0.375, TransformMode::Augment, 1).unwrap();
    let (h, t) = head_tail_counts(&out, &split);
    let ratio = h as f64 / t as f64;
    let want = 13.0 / 7.0;
    assert!((ratio / want - 1.0).abs() < 0.05, "ratio {ratio}");
    assert_eq!(out.users.len(), 4000);
}

#[test]
fn full_augmentation_gives_two_to_three() {
    let (ds, split, sims) = eighty_twenty(500);
    let out = transform_sequences(&ds, &split, &sims, 1.0, TransformMode::Augment, 1).unwrap();
    let (h, t) = head_tail_counts(&out, &split);
    assert_eq!(h * 3, t * 2);
}

#[test]
fn substitution_at_zero_is_identity() {
    let (ds, split, sims) = eighty_twenty(50);
    let out = transform_sequences(&ds, &split, &sims, 0.0, TransformMode::Substitute, 1).unwrap();
    assert_eq!(out.sequences, ds.sequences);
    assert!(transform_sequences(&ds, &split, &sims, 1.5, TransformMode::Substitute, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn transforms_preserve_lengths(p in 0.0f64..=1.0, seed in 0u64..100) {
        let (ds, split, sims) = eighty_twenty(40);
        let sub = transform_sequences(&ds, &split, &sims, p, TransformMode::Substitute, seed).unwrap();
        prop_assert_eq!(sub.num_interactions(), ds.num_interactions());
        let (h0, _) = head_tail_counts(&ds, &split);
        let (h1, _) = head_tail_counts(&sub, &split);
        prop_assert!(h1 <= h0);
        let aug = transform_sequences(&ds, &split, &sims, p, TransformMode::Augment, seed).unwrap();
        prop_assert_eq!(aug.num_interactions(), 2 * ds.num_interactions());
        prop_assert_eq!(&aug.sequences[..40], &ds.sequences[..]);
    }

    #[test]
    fn leave_one_out_accounts_for_every_interaction(seed in 0u64..50) {
        let ds = generate_synthetic(60, 30, 6, 1.0, seed).unwrap();
        let s = leave_one_out(&ds);
        let n_train: usize = s.train_sequences.iter().map(|(_, q)| q.len()).sum();
        prop_assert_eq!(n_train + s.valid.len() + s.test.len(), ds.num_interactions());
        prop_assert_eq!(s.train.len(), n_train - s.train_sequences.len());
    }
}
