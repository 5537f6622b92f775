//! Interaction corpora: synthetic long-tail generation, file ingestion,
//! head/tail partitioning, leave-one-out splitting and the
//! augmentation/substitution rebalancing transforms.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum interactions per user and per item kept by the activity filter.
pub const MIN_INTERACTIONS: usize = 5;

/// Fraction of the catalog treated as head items.
pub const HEAD_FRACTION_NUM: usize = 1;
pub const HEAD_FRACTION_DEN: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u32);

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub type Popularity = BTreeMap<ItemId, u64>;

/// Planted structure of a synthetic corpus. Absent for loaded data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentClusters {
    pub num_clusters: usize,
    pub item_cluster: BTreeMap<ItemId, usize>,
    /// Preferred clusters per user, aligned with `Dataset::users`.
    pub user_clusters: Vec<Vec<usize>>,
}

impl LatentClusters {
    /// The user's primary cluster, used as the coarse context bucket.
    pub fn primary_cluster(&self, user_index: usize) -> usize {
        self.user_clusters[user_index][0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub users: Vec<UserId>,
    /// Sorted ascending.
    pub items: Vec<ItemId>,
    /// Chronologically ordered, aligned with `users`.
    pub sequences: Vec<Vec<ItemId>>,
    pub popularity: Popularity,
    pub latent: Option<LatentClusters>,
}

impl Dataset {
    /// Builds a dataset from sequences; the catalog and popularity table are
    /// derived from the sequences themselves.
    pub fn from_sequences(users: Vec<UserId>, sequences: Vec<Vec<ItemId>>) -> Self {
        let popularity = count_popularity(&sequences);
        let items = popularity.keys().copied().collect();
        Self {
            users,
            items,
            sequences,
            popularity,
            latent: None,
        }
    }

    /// Like [`Dataset::from_sequences`] but keeps a fixed catalog, so items
    /// with no occurrences still exist with popularity 0.
    pub fn with_catalog(
        users: Vec<UserId>,
        sequences: Vec<Vec<ItemId>>,
        catalog: &[ItemId],
    ) -> Self {
        let mut popularity: Popularity = catalog.iter().map(|&i| (i, 0)).collect();
        for (item, count) in count_popularity(&sequences) {
            *popularity.entry(item).or_insert(0) += count;
        }
        let items = popularity.keys().copied().collect();
        Self {
            users,
            items,
            sequences,
            popularity,
            latent: None,
        }
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn popularity_of(&self, item: ItemId) -> u64 {
        self.popularity.get(&item).copied().unwrap_or(0)
    }

    /// One JSON object per user: `{"user": id, "seq": [item ids]}`.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (user, seq) in self.users.iter().zip(&self.sequences) {
            serde_json::to_writer(
                &mut w,
                &UserSequence {
                    user: *user,
                    seq: seq.clone(),
                },
            )?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut users = Vec::new();
        let mut sequences = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: UserSequence = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: e.to_string(),
            })?;
            users.push(row.user);
            sequences.push(row.seq);
        }
        Ok(Self::from_sequences(users, sequences))
    }
}

#[derive(Serialize, Deserialize)]
struct UserSequence {
    user: UserId,
    seq: Vec<ItemId>,
}

pub fn count_popularity<'a, I>(sequences: I) -> Popularity
where
    I: IntoIterator<Item = &'a Vec<ItemId>>,
{
    let mut pop = Popularity::new();
    for seq in sequences {
        for &item in seq {
            *pop.entry(item).or_insert(0) += 1;
        }
    }
    pop
}

/// Gini coefficient of the popularity values (0 = uniform).
pub fn gini(popularity: &Popularity) -> f64 {
    let mut v: Vec<f64> = popularity.values().map(|&c| c as f64).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len() as f64;
    let total: f64 = v.iter().sum();
    if v.is_empty() || total == 0.0 {
        return 0.0;
    }
    let weighted: f64 = v
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * (i as f64 + 1.0) - n - 1.0) * x)
        .sum();
    weighted / (n * total)
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub avg_len: f64,
    pub exponent: f64,
    /// Planted item clusters; 0 picks `max(2, num_items / 20)`.
    pub num_clusters: usize,
    /// Probability that an interaction is drawn from the user's preferred clusters.
    pub preferred_share: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_users: 2000,
            num_items: 500,
            avg_len: 8.0,
            exponent: 1.5,
            num_clusters: 0,
            preferred_share: 0.8,
            seed: 7,
        }
    }
}

/// Power-law corpus with the default cluster structure.
pub fn generate_synthetic(
    num_users: usize,
    num_items: usize,
    avg_len: usize,
    exponent: f64,
    seed: u64,
) -> Result<Dataset> {
    generate_synthetic_with(&SyntheticConfig {
        num_users,
        num_items,
        avg_len: avg_len as f64,
        exponent,
        seed,
        ..SyntheticConfig::default()
    })
}

/// Item `r`-th in popularity rank gets base weight `(r + offset)^-exponent`,
/// with `offset = max(1, num_items / 25)` flattening the very top so that the
/// head share lands in the 60-90% band typical of real catalogs.
pub fn generate_synthetic_with(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.num_users < 10 || cfg.num_items < 10 {
        return Err(Error::Argument(format!(
            "need at least 10 users and 10 items, got {} users and {} items",
            cfg.num_users, cfg.num_items
        )));
    }
    if !(cfg.avg_len >= MIN_INTERACTIONS as f64) || !cfg.avg_len.is_finite() {
        return Err(Error::Argument(format!(
            "average length must be >= {MIN_INTERACTIONS}, got {}",
            cfg.avg_len
        )));
    }
    if !(cfg.exponent > 0.0) || !cfg.exponent.is_finite() {
        return Err(Error::Argument(format!(
            "exponent must be positive, got {}",
            cfg.exponent
        )));
    }
    if !(0.0..=1.0).contains(&cfg.preferred_share) {
        return Err(Error::Argument(format!(
            "preferred share must lie in [0, 1], got {}",
            cfg.preferred_share
        )));
    }
    let num_clusters = if cfg.num_clusters == 0 {
        (cfg.num_items / 20).max(2)
    } else {
        cfg.num_clusters
    };
    if num_clusters > cfg.num_items {
        return Err(Error::Argument(format!(
            "{num_clusters} clusters for {} items",
            cfg.num_items
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let items: Vec<ItemId> = (0..cfg.num_items as u32).map(ItemId).collect();

    // Popularity rank and cluster membership are independent permutations.
    let mut rank_order: Vec<usize> = (0..cfg.num_items).collect();
    rank_order.shuffle(&mut rng);
    let offset = (cfg.num_items / 25).max(1) as f64;
    let mut weight = vec![0.0; cfg.num_items];
    for (rank, &item) in rank_order.iter().enumerate() {
        weight[item] = (rank as f64 + offset).powf(-cfg.exponent);
    }
    let mut cluster_order: Vec<usize> = (0..cfg.num_items).collect();
    cluster_order.shuffle(&mut rng);
    let mut item_cluster = vec![0usize; cfg.num_items];
    for (pos, &item) in cluster_order.iter().enumerate() {
        item_cluster[item] = pos % num_clusters;
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_clusters];
    for (item, &c) in item_cluster.iter().enumerate() {
        members[c].push(item);
    }
    let global = WeightedIndex::new(&weight).expect("positive weights");
    let per_cluster: Vec<WeightedIndex<f64>> = members
        .iter()
        .map(|m| WeightedIndex::new(m.iter().map(|&i| weight[i])).expect("non-empty cluster"))
        .collect();

    let extra_mean = cfg.avg_len - MIN_INTERACTIONS as f64;
    let extra = if extra_mean > 0.0 {
        Some(Poisson::new(extra_mean).expect("positive mean"))
    } else {
        None
    };

    let mut users = Vec::with_capacity(cfg.num_users);
    let mut sequences = Vec::with_capacity(cfg.num_users);
    let mut user_clusters = Vec::with_capacity(cfg.num_users);
    for u in 0..cfg.num_users {
        let wanted = if num_clusters >= 3 { rng.random_range(2..=3) } else { num_clusters };
        let mut pool: Vec<usize> = (0..num_clusters).collect();
        pool.shuffle(&mut rng);
        pool.truncate(wanted);
        let len = MIN_INTERACTIONS
            + extra
                .as_ref()
                .map(|d| d.sample(&mut rng) as usize)
                .unwrap_or(0);
        let mut seq = Vec::with_capacity(len);
        for _ in 0..len {
            let item = if rng.random::<f64>() < cfg.preferred_share {
                let c = pool[rng.random_range(0..pool.len())];
                members[c][per_cluster[c].sample(&mut rng)]
            } else {
                global.sample(&mut rng)
            };
            seq.push(items[item]);
        }
        users.push(UserId(u as u32));
        sequences.push(seq);
        user_clusters.push(pool);
    }

    let mut ds = Dataset::with_catalog(users, sequences, &items);
    ds.latent = Some(LatentClusters {
        num_clusters,
        item_cluster: items.iter().map(|&i| (i, item_cluster[i.0 as usize])).collect(),
        user_clusters,
    });
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
struct InteractionRow {
    user: u32,
    item: u32,
    timestamp: i64,
}

/// Reads `(user, item, timestamp)` rows from CSV (with header) or JSONL
/// (`.jsonl` / `.json` extension), orders each user's interactions by
/// timestamp and applies the iterative activity filter.
///
/// Repeated `(user, item, timestamp)` rows are kept as repeated interactions.
pub fn load_interactions(path: &Path) -> Result<Dataset> {
    let rows = read_rows(path)?;
    Ok(build_filtered(rows))
}

fn read_rows(path: &Path) -> Result<Vec<InteractionRow>> {
    let is_json = matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl") | Some("json")
    );
    let mut rows = Vec::new();
    if is_json {
        let reader = BufReader::new(File::open(path)?);
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: InteractionRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: e.to_string(),
            })?;
            rows.push(row);
        }
    } else {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)?;
        for (idx, rec) in reader.deserialize::<InteractionRow>().enumerate() {
            let row = rec.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                // header is line 1
                line: e.position().map(|p| p.line() as usize).unwrap_or(idx + 2),
                msg: e.to_string(),
            })?;
            rows.push(row);
        }
    }
    Ok(rows)
}

fn build_filtered(rows: Vec<InteractionRow>) -> Dataset {
    let mut by_user: BTreeMap<u32, Vec<(i64, usize, u32)>> = BTreeMap::new();
    for (pos, r) in rows.iter().enumerate() {
        by_user.entry(r.user).or_default().push((r.timestamp, pos, r.item));
    }
    for seq in by_user.values_mut() {
        // file position breaks timestamp ties
        seq.sort();
    }
    loop {
        let mut item_counts: BTreeMap<u32, usize> = BTreeMap::new();
        for seq in by_user.values() {
            for &(_, _, item) in seq {
                *item_counts.entry(item).or_insert(0) += 1;
            }
        }
        let mut changed = false;
        for seq in by_user.values_mut() {
            let before = seq.len();
            seq.retain(|&(_, _, item)| item_counts[&item] >= MIN_INTERACTIONS);
            changed |= seq.len() != before;
        }
        let before = by_user.len();
        by_user.retain(|_, seq| seq.len() >= MIN_INTERACTIONS);
        changed |= by_user.len() != before;
        if !changed {
            break;
        }
    }
    let users = by_user.keys().map(|&u| UserId(u)).collect();
    let sequences = by_user
        .into_values()
        .map(|seq| seq.into_iter().map(|(_, _, i)| ItemId(i)).collect())
        .collect();
    Dataset::from_sequences(users, sequences)
}

// ---------------------------------------------------------------------------
// Head / tail partition
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadTailSplit {
    pub head: BTreeSet<ItemId>,
    pub tail: BTreeSet<ItemId>,
}

impl HeadTailSplit {
    pub fn is_head(&self, item: ItemId) -> bool {
        self.head.contains(&item)
    }

    pub fn is_tail(&self, item: ItemId) -> bool {
        self.tail.contains(&item)
    }
}

/// Items ranked by popularity descending, ties by ascending ID.
pub fn popularity_ranking(popularity: &Popularity) -> Vec<ItemId> {
    let mut ranked: Vec<(ItemId, u64)> = popularity.iter().map(|(&i, &c)| (i, c)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().map(|(i, _)| i).collect()
}

/// Top `ceil(K/5)` items by popularity form the head; everything else is tail.
pub fn split_head_tail(ds: &Dataset) -> HeadTailSplit {
    let mut pop: Popularity = ds.items.iter().map(|&i| (i, ds.popularity_of(i))).collect();
    // catalog items that only appear in `popularity` still count
    for (&i, &c) in &ds.popularity {
        pop.entry(i).or_insert(c);
    }
    split_by_popularity(&pop)
}

pub fn split_by_popularity(popularity: &Popularity) -> HeadTailSplit {
    let ranked = popularity_ranking(popularity);
    let k = ranked.len();
    let head_len = (k * HEAD_FRACTION_NUM).div_ceil(HEAD_FRACTION_DEN);
    HeadTailSplit {
        head: ranked[..head_len].iter().copied().collect(),
        tail: ranked[head_len..].iter().copied().collect(),
    }
}

/// Occurrences of head and tail items over all sequences.
pub fn head_tail_counts(ds: &Dataset, split: &HeadTailSplit) -> (u64, u64) {
    let mut head = 0;
    let mut tail = 0;
    for seq in &ds.sequences {
        for item in seq {
            if split.is_head(*item) {
                head += 1;
            } else if split.is_tail(*item) {
                tail += 1;
            }
        }
    }
    (head, tail)
}

// ---------------------------------------------------------------------------
// Leave-one-out
// ---------------------------------------------------------------------------

/// One next-item prediction instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: UserId,
    /// Index of the user in the source dataset.
    pub user_index: usize,
    pub history: Vec<ItemId>,
    pub target: ItemId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<Interaction>,
    pub valid: Vec<Interaction>,
    pub test: Vec<Interaction>,
    /// Users dropped for having fewer than three interactions.
    pub skipped: usize,
    /// Per-user training portion (all but the last two items).
    pub train_sequences: Vec<(UserId, Vec<ItemId>)>,
    /// Counted over the training portion only.
    pub train_popularity: Popularity,
    pub catalog: Vec<ItemId>,
}

impl SplitDataset {
    /// The training portion as a dataset, catalog preserved.
    pub fn train_view(&self) -> Dataset {
        let (users, seqs): (Vec<_>, Vec<_>) = self.train_sequences.iter().cloned().unzip();
        Dataset::with_catalog(users, seqs, &self.catalog)
    }
}

/// Last item is the test target, second-to-last the validation target, and
/// next-item pairs inside the remaining prefix are training instances.
pub fn leave_one_out(ds: &Dataset) -> SplitDataset {
    let mut out = SplitDataset {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        skipped: 0,
        train_sequences: Vec::new(),
        train_popularity: Popularity::new(),
        catalog: ds.items.clone(),
    };
    for (idx, (user, seq)) in ds.users.iter().zip(&ds.sequences).enumerate() {
        let n = seq.len();
        if n < 3 {
            out.skipped += 1;
            continue;
        }
        let train_part = &seq[..n - 2];
        for t in 1..train_part.len() {
            out.train.push(Interaction {
                user: *user,
                user_index: idx,
                history: train_part[..t].to_vec(),
                target: train_part[t],
            });
        }
        out.valid.push(Interaction {
            user: *user,
            user_index: idx,
            history: seq[..n - 2].to_vec(),
            target: seq[n - 2],
        });
        out.test.push(Interaction {
            user: *user,
            user_index: idx,
            history: seq[..n - 1].to_vec(),
            target: seq[n - 1],
        });
        out.train_sequences.push((*user, train_part.to_vec()));
    }
    if out.skipped > 0 {
        log::warn!("leave-one-out skipped {} users with < 3 interactions", out.skipped);
    }
    let mut pop: Popularity = ds.items.iter().map(|&i| (i, 0)).collect();
    for (item, c) in count_popularity(out.train_sequences.iter().map(|(_, s)| s)) {
        *pop.entry(item).or_insert(0) += c;
    }
    out.train_popularity = pop;
    out
}

// ---------------------------------------------------------------------------
// Rebalancing transforms
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformMode {
    /// Original sequences plus their modified copies.
    Augment,
    /// Modified sequences only.
    Substitute,
}

/// Source of replacement items for head occurrences.
pub trait SimilarityProvider {
    /// The tail item most similar to `head`.
    fn most_similar_tail(&self, head: ItemId) -> Option<ItemId>;
}

impl SimilarityProvider for BTreeMap<ItemId, ItemId> {
    fn most_similar_tail(&self, head: ItemId) -> Option<ItemId> {
        self.get(&head).copied()
    }
}

/// Replacement probability that equalizes head and tail shares in the
/// modified sequences, i.e. the root of `h - h·p = (1 - h) + h·p`.
pub fn balancing_probability(head_share: f64) -> f64 {
    (2.0 * head_share - 1.0) / (2.0 * head_share)
}

/// Replaces each head occurrence, independently with probability `p`, by its
/// most similar tail item. Augmented copies get fresh user IDs numbered after
/// the largest existing one.
pub fn transform_sequences(
    ds: &Dataset,
    split: &HeadTailSplit,
    sims: &dyn SimilarityProvider,
    p: f64,
    mode: TransformMode,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Argument(format!("probability must lie in [0, 1], got {p}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut modified = Vec::with_capacity(ds.sequences.len());
    for seq in &ds.sequences {
        let mut out = Vec::with_capacity(seq.len());
        for &item in seq {
            if split.is_head(item) {
                let replacement = sims.most_similar_tail(item).ok_or_else(|| {
                    Error::Config(format!("no similar tail item for head item {item}"))
                })?;
                if rng.random::<f64>() < p {
                    out.push(replacement);
                    continue;
                }
            }
            out.push(item);
        }
        modified.push(out);
    }
    let (users, sequences) = match mode {
        TransformMode::Substitute => (ds.users.clone(), modified),
        TransformMode::Augment => {
            let next = ds.users.iter().map(|u| u.0).max().map_or(0, |m| m + 1);
            let mut users = ds.users.clone();
            users.extend((0..modified.len() as u32).map(|i| UserId(next + i)));
            let mut seqs = ds.sequences.clone();
            seqs.extend(modified);
            (users, seqs)
        }
    };
    let mut out = Dataset::with_catalog(users, sequences, &ds.items);
    if let (Some(latent), TransformMode::Augment) = (&ds.latent, mode) {
        let mut latent = latent.clone();
        let copy = latent.user_clusters.clone();
        latent.user_clusters.extend(copy);
        out.latent = Some(latent);
    } else {
        out.latent = ds.latent.clone();
    }
    Ok(out)
}
