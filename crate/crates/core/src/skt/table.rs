use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{ItemId, Popularity};
use crate::error::{Error, Result};
use crate::skt::layout::{VocabLayout, DEDUP_LEVEL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemKind {
    Head,
    Tail,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticId {
    pub tokens: Vec<u32>,
    pub kind: ItemKind,
}

impl SemanticId {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens followed by EOS.
    pub fn with_eos(&self, eos: u32) -> Vec<u32> {
        let mut t = self.tokens.clone();
        t.push(eos);
        t
    }
}

/// Length of the longest common prefix.
pub fn lcp(a: &[u32], b: &[u32]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

/// Bijective item ↔ SID mapping over a vocabulary layout.
#[derive(Clone, Debug, PartialEq)]
pub struct SidTable {
    pub layout: VocabLayout,
    entries: BTreeMap<ItemId, SemanticId>,
    inverse: BTreeMap<Vec<u32>, ItemId>,
    /// Items that needed a disambiguation token.
    pub collisions: usize,
}

#[derive(Serialize, Deserialize)]
struct SidRow {
    item: ItemId,
    sid: Vec<u32>,
    kind: ItemKind,
}

impl SidTable {
    /// Fails if two items share a full SID.
    pub fn new(
        layout: VocabLayout,
        entries: BTreeMap<ItemId, SemanticId>,
        collisions: usize,
    ) -> Result<Self> {
        let mut inverse = BTreeMap::new();
        for (&item, sid) in &entries {
            if let Some(prev) = inverse.insert(sid.tokens.clone(), item) {
                return Err(Error::Config(format!(
                    "items {prev} and {item} share SID {:?}",
                    sid.tokens
                )));
            }
        }
        Ok(Self {
            layout,
            entries,
            inverse,
            collisions,
        })
    }

    pub fn get(&self, item: ItemId) -> Option<&SemanticId> {
        self.entries.get(&item)
    }

    pub fn sid(&self, item: ItemId) -> Result<&SemanticId> {
        self.entries.get(&item).ok_or(Error::MissingItem(item))
    }

    pub fn item_of(&self, tokens: &[u32]) -> Option<ItemId> {
        self.inverse.get(tokens).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ItemId, &SemanticId)> {
        self.entries.iter().map(|(&i, s)| (i, s))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.entries.values().map(SemanticId::len).max().unwrap_or(0)
    }

    pub fn items_of_kind(&self, kind: ItemKind) -> impl Iterator<Item = (ItemId, &SemanticId)> {
        self.iter().filter(move |(_, s)| s.kind == kind)
    }

    /// Tokens competing at each decoding position during training: the full
    /// range of every level that occurs at that position in some SID, plus
    /// EOS wherever some SID ends. Indexed `0..=max_len`.
    pub fn training_allowed(&self) -> Vec<Vec<u32>> {
        let max_len = self.max_len();
        let mut levels: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); max_len + 1];
        let mut eos_at = vec![false; max_len + 1];
        for sid in self.entries.values() {
            for (pos, &t) in sid.tokens.iter().enumerate() {
                if let Some(l) = self.layout.level_of(t) {
                    levels[pos].insert(l);
                }
            }
            eos_at[sid.len()] = true;
        }
        levels
            .iter()
            .zip(&eos_at)
            .map(|(ls, &eos)| {
                let mut toks: Vec<u32> = ls
                    .iter()
                    .flat_map(|&l| self.layout.levels[l].tokens())
                    .collect();
                if eos {
                    toks.push(self.layout.eos);
                }
                toks
            })
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (&item, sid) in &self.entries {
            serde_json::to_writer(
                &mut w,
                &SidRow {
                    item,
                    sid: sid.tokens.clone(),
                    kind: sid.kind,
                },
            )?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path, layout: VocabLayout) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut entries = BTreeMap::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: SidRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: e.to_string(),
            })?;
            entries.insert(
                row.item,
                SemanticId {
                    tokens: row.sid,
                    kind: row.kind,
                },
            );
        }
        let dedup = layout
            .level_index(DEDUP_LEVEL)
            .ok()
            .map(|l| layout.levels[l].clone());
        let collisions = entries
            .values()
            .filter(|s| {
                s.tokens
                    .last()
                    .zip(dedup.as_ref())
                    .is_some_and(|(&t, d)| d.contains(t))
            })
            .count();
        Self::new(layout, entries, collisions)
    }
}

/// Items sharing a full SID get one extra token from the dedup level,
/// numbered 0, 1, 2, … by popularity descending, then item ID.
/// Returns the new entries and how many items were disambiguated.
pub fn dedup_sids(
    entries: BTreeMap<ItemId, SemanticId>,
    popularity: &Popularity,
    layout: &VocabLayout,
) -> Result<(BTreeMap<ItemId, SemanticId>, usize)> {
    let mut groups: BTreeMap<Vec<u32>, Vec<ItemId>> = BTreeMap::new();
    for (&item, sid) in &entries {
        groups.entry(sid.tokens.clone()).or_default().push(item);
    }
    let mut out = entries;
    let mut collided = 0;
    let mut dedup_level = None;
    for (sid, mut items) in groups {
        if items.len() < 2 {
            continue;
        }
        let level = match dedup_level {
            Some(l) => l,
            None => {
                let l = layout.level_index(DEDUP_LEVEL)?;
                dedup_level = Some(l);
                l
            }
        };
        let capacity = layout.levels[level].size as usize;
        if items.len() > capacity {
            return Err(Error::DedupOverflow {
                sid,
                count: items.len(),
                capacity,
            });
        }
        items.sort_by(|a, b| {
            let pa = popularity.get(a).copied().unwrap_or(0);
            let pb = popularity.get(b).copied().unwrap_or(0);
            pb.cmp(&pa).then(a.cmp(b))
        });
        for (k, item) in items.iter().enumerate() {
            let token = layout.token(level, k)?;
            out.get_mut(item).expect("grouped item").tokens.push(token);
        }
        collided += items.len();
    }
    Ok((out, collided))
}
