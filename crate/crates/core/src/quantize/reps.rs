use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, HeadTailSplit, ItemId};
use crate::error::{Error, Result};
use crate::linalg::cosine;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemRep<T> {
    pub item: ItemId,
    #[serde(rename = "vec")]
    pub vector: Vec<T>,
}

/// Representations keyed by item, for lookups during tokenization.
pub type RepTable<T> = BTreeMap<ItemId, Vec<T>>;

fn gaussian<T: Scalar>(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<T> {
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * scale)
        })
        .collect()
}

/// Synthetic stand-in for text-encoder embeddings.
///
/// Cluster centers are unit Gaussian directions. A head item sits at its
/// cluster center plus Gaussian noise; a tail item sits at a head item of the
/// same cluster (any head item if the cluster has none) plus noise. `noise`
/// is the expected norm of each perturbation, so per-coordinate deviation is
/// `noise / sqrt(d)`. Planted clusters from the generator are used when the
/// dataset carries them.
pub fn synthesize_reps<T: Scalar>(
    ds: &Dataset,
    split: &HeadTailSplit,
    d: usize,
    num_clusters: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<ItemRep<T>>> {
    if d < 2 {
        return Err(Error::Argument(format!("dimension must be >= 2, got {d}")));
    }
    if num_clusters < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 clusters, got {num_clusters}"
        )));
    }
    if split.head.is_empty() {
        return Err(Error::Argument("head set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..num_clusters)
        .map(|_| {
            let v: Vec<f64> = gaussian(&mut rng, d, 1.0);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let per_coord = noise / (d as f64).sqrt();

    let cluster_of = |item: ItemId, rng: &mut ChaCha8Rng| -> usize {
        match ds.latent.as_ref().and_then(|l| l.item_cluster.get(&item)) {
            Some(&c) => c % num_clusters,
            None => rng.random_range(0..num_clusters),
        }
    };

    let mut vectors: BTreeMap<ItemId, Vec<f64>> = BTreeMap::new();
    let mut heads_by_cluster: Vec<Vec<ItemId>> = vec![Vec::new(); num_clusters];
    for &h in &split.head {
        let c = cluster_of(h, &mut rng);
        let eps: Vec<f64> = gaussian(&mut rng, d, per_coord);
        let v = centers[c].iter().zip(&eps).map(|(a, b)| a + b).collect();
        vectors.insert(h, v);
        heads_by_cluster[c].push(h);
    }
    let all_heads: Vec<ItemId> = split.head.iter().copied().collect();
    for &t in &split.tail {
        let c = cluster_of(t, &mut rng);
        let pool = if heads_by_cluster[c].is_empty() {
            &all_heads
        } else {
            &heads_by_cluster[c]
        };
        let anchor = *pool.choose(&mut rng).expect("non-empty head pool");
        let eps: Vec<f64> = gaussian(&mut rng, d, per_coord);
        let v = vectors[&anchor].iter().zip(&eps).map(|(a, b)| a + b).collect();
        vectors.insert(t, v);
    }
    Ok(vectors
        .into_iter()
        .map(|(item, v)| ItemRep {
            item,
            vector: v.into_iter().map(T::lit).collect(),
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct LoadedReps<T> {
    pub reps: Vec<ItemRep<T>>,
    /// Rows for items outside the dataset, which are dropped.
    pub ignored: usize,
}

/// Reads JSONL rows `{"item": id, "vec": [...]}`. Every dataset item must be
/// covered; extra items are ignored and counted.
pub fn load_reps<T: Scalar>(path: &Path, d: usize, ds: &Dataset) -> Result<LoadedReps<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut found: BTreeMap<ItemId, Vec<T>> = BTreeMap::new();
    let mut ignored = 0;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ItemRep<f64> = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        if row.vector.len() != d {
            return Err(Error::Dimension {
                item: row.item,
                expected: d,
                found: row.vector.len(),
            });
        }
        if row.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: format!("non-finite entry in vector of item {}", row.item),
            });
        }
        if ds.items.binary_search(&row.item).is_err() {
            ignored += 1;
            continue;
        }
        found.insert(row.item, row.vector.into_iter().map(T::lit).collect());
    }
    if let Some(missing) = ds.items.iter().find(|i| !found.contains_key(i)) {
        return Err(Error::MissingItem(*missing));
    }
    if ignored > 0 {
        log::info!("ignored {ignored} representation rows for unknown items");
    }
    Ok(LoadedReps {
        reps: found
            .into_iter()
            .map(|(item, vector)| ItemRep { item, vector })
            .collect(),
        ignored,
    })
}

pub fn write_reps<T: Scalar>(reps: &[ItemRep<T>], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in reps {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// For each head item, the tail item with the highest cosine similarity
/// (ties by ascending item ID).
pub fn most_similar_tail<T: Scalar>(
    reps: &RepTable<T>,
    split: &HeadTailSplit,
) -> Result<BTreeMap<ItemId, ItemId>> {
    let mut out = BTreeMap::new();
    for &h in &split.head {
        let hv = reps.get(&h).ok_or(Error::MissingItem(h))?;
        let mut best: Option<(T, ItemId)> = None;
        for &t in &split.tail {
            let tv = reps.get(&t).ok_or(Error::MissingItem(t))?;
            let Some(c) = cosine(hv, tv) else { continue };
            if best.is_none_or(|(b, _)| c > b) {
                best = Some((c, t));
            }
        }
        if let Some((_, t)) = best {
            out.insert(h, t);
        }
    }
    Ok(out)
}
