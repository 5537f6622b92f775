//! Ranking accuracy, popularity-bias and exposure metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{popularity_ranking, HeadTailSplit, ItemId, Popularity, UserId};
use crate::error::{Error, Result};

/// Ordered recommendations per user.
pub type RecList = BTreeMap<UserId, Vec<ItemId>>;
/// Held-out item per user.
pub type Truth = BTreeMap<UserId, ItemId>;

fn over_users<F>(recs: &RecList, truth: &Truth, restrict: Option<&BTreeSet<ItemId>>, per_user: F) -> Result<f64>
where
    F: Fn(Option<usize>) -> f64,
{
    let mut n = 0usize;
    let mut sum = 0.0;
    for (user, &item) in truth {
        if restrict.is_some_and(|r| !r.contains(&item)) {
            continue;
        }
        let list = recs.get(user).map(Vec::as_slice).unwrap_or(&[]);
        sum += per_user(list.iter().position(|&i| i == item).map(|p| p + 1));
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyEvaluation("no users with a held-out item in range".into()));
    }
    Ok(sum / n as f64)
}

/// Share of users whose held-out item is among their top `k`. With
/// `restrict`, only users whose held-out item is in the set count.
pub fn hit_rate(recs: &RecList, truth: &Truth, k: usize, restrict: Option<&BTreeSet<ItemId>>) -> Result<f64> {
    over_users(recs, truth, restrict, |r| match r {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    })
}

/// Mean of `1 / log2(rank + 1)` for hits within the top `k`, 0 otherwise.
pub fn ndcg(recs: &RecList, truth: &Truth, k: usize, restrict: Option<&BTreeSet<ItemId>>) -> Result<f64> {
    over_users(recs, truth, restrict, |r| match r {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    })
}

/// Mean absolute gap between each group's share of recommended slots and
/// its share of training interactions.
pub fn mgu(recs: &RecList, train_popularity: &Popularity, split: &HeadTailSplit, k: usize) -> Result<f64> {
    let (head, tail) = exposure_counts(recs, split, k);
    let slots = head + tail;
    if slots == 0 {
        return Err(Error::EmptyEvaluation("no recommended slots".into()));
    }
    let mut hist_head = 0u64;
    let mut hist_all = 0u64;
    for (&item, &c) in train_popularity {
        hist_all += c;
        if split.is_head(item) {
            hist_head += c;
        }
    }
    if hist_all == 0 {
        return Err(Error::EmptyEvaluation("no training interactions".into()));
    }
    let gr_head = head as f64 / slots as f64;
    let gr_tail = tail as f64 / slots as f64;
    let gh_head = hist_head as f64 / hist_all as f64;
    let gh_tail = (hist_all - hist_head) as f64 / hist_all as f64;
    Ok(((gr_head - gh_head).abs() + (gr_tail - gh_tail).abs()) / 2.0)
}

/// Mean over users of the mean training popularity of their top `k`.
pub fn arp(recs: &RecList, popularity: &Popularity, k: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for list in recs.values() {
        let top = &list[..list.len().min(k)];
        if top.is_empty() {
            continue;
        }
        let mut s = 0.0;
        for item in top {
            s += *popularity.get(item).ok_or(Error::MissingItem(*item))? as f64;
        }
        sum += s / top.len() as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyEvaluation("no non-empty recommendation lists".into()));
    }
    Ok(sum / n as f64)
}

/// Recommended slots in the top `k` held by head and by tail items.
pub fn exposure_counts(recs: &RecList, split: &HeadTailSplit, k: usize) -> (u64, u64) {
    let mut head = 0;
    let mut tail = 0;
    for list in recs.values() {
        for &item in list.iter().take(k) {
            if split.is_head(item) {
                head += 1;
            } else {
                tail += 1;
            }
        }
    }
    (head, tail)
}

/// Items split into five popularity groups of equal size (sizes differ by
/// at most one), most popular first.
pub fn popularity_quintiles(popularity: &Popularity) -> Result<Vec<BTreeSet<ItemId>>> {
    let ranked = popularity_ranking(popularity);
    let n = ranked.len();
    if n < 5 {
        return Err(Error::Argument(format!("quintiles need at least 5 items, got {n}")));
    }
    let mut groups = vec![BTreeSet::new(); 5];
    for (rank, item) in ranked.into_iter().enumerate() {
        groups[rank * 5 / n].insert(item);
    }
    Ok(groups)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuintileRow {
    /// 0 is the most popular fifth.
    pub group: usize,
    pub k: usize,
    pub items: usize,
    pub users: usize,
    /// Absent when no user's held-out item falls in the group.
    pub hr: Option<f64>,
    pub ndcg: Option<f64>,
}

pub fn quintile_report(recs: &RecList, truth: &Truth, popularity: &Popularity, k: usize) -> Result<Vec<QuintileRow>> {
    popularity_quintiles(popularity)?
        .into_iter()
        .enumerate()
        .map(|(group, items)| {
            let users = truth.values().filter(|i| items.contains(i)).count();
            let opt = |r: Result<f64>| match r {
                Ok(v) => Ok(Some(v)),
                Err(Error::EmptyEvaluation(_)) => Ok(None),
                Err(e) => Err(e),
            };
            Ok(QuintileRow {
                group,
                k,
                items: items.len(),
                users,
                hr: opt(hit_rate(recs, truth, k, Some(&items)))?,
                ndcg: opt(ndcg(recs, truth, k, Some(&items)))?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffMetrics {
    pub k: usize,
    pub hr_all: f64,
    pub hr_tail: Option<f64>,
    pub ndcg_all: f64,
    pub ndcg_tail: Option<f64>,
    pub mgu: f64,
    pub arp: f64,
    pub exposure_head: u64,
    pub exposure_tail: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub users: usize,
    pub cutoffs: Vec<CutoffMetrics>,
    pub quintiles: Vec<QuintileRow>,
}

pub const DEFAULT_CUTOFFS: [usize; 2] = [5, 10];

impl MetricsReport {
    pub fn at(&self, k: usize) -> Option<&CutoffMetrics> {
        self.cutoffs.iter().find(|c| c.k == k)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?)
    }

    /// Long-format rows `(metric, cutoff, group, value)`; absent values are skipped.
    pub fn plot_rows(&self) -> Vec<(String, usize, String, f64)> {
        let mut rows = Vec::new();
        for c in &self.cutoffs {
            rows.push(("hr".into(), c.k, "all".into(), c.hr_all));
            if let Some(v) = c.hr_tail {
                rows.push(("hr".into(), c.k, "tail".into(), v));
            }
            rows.push(("ndcg".into(), c.k, "all".into(), c.ndcg_all));
            if let Some(v) = c.ndcg_tail {
                rows.push(("ndcg".into(), c.k, "tail".into(), v));
            }
            rows.push(("mgu".into(), c.k, "all".into(), c.mgu));
            rows.push(("arp".into(), c.k, "all".into(), c.arp));
            rows.push(("exposure".into(), c.k, "head".into(), c.exposure_head as f64));
            rows.push(("exposure".into(), c.k, "tail".into(), c.exposure_tail as f64));
        }
        for q in &self.quintiles {
            let g = format!("q{}", q.group);
            if let Some(v) = q.hr {
                rows.push(("hr".into(), q.k, g.clone(), v));
            }
            if let Some(v) = q.ndcg {
                rows.push(("ndcg".into(), q.k, g, v));
            }
        }
        rows
    }

    pub fn write_plot_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["metric", "cutoff", "group", "value"])?;
        for (m, k, g, v) in self.plot_rows() {
            w.write_record([m, k.to_string(), g, v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Full report at each cutoff; quintiles use the largest cutoff.
pub fn evaluate(
    recs: &RecList,
    truth: &Truth,
    train_popularity: &Popularity,
    split: &HeadTailSplit,
    cutoffs: &[usize],
) -> Result<MetricsReport> {
    let tail_or_none = |r: Result<f64>| match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::EmptyEvaluation(_)) => Ok(None),
        Err(e) => Err(e),
    };
    let mut out = Vec::new();
    for &k in cutoffs {
        let (exposure_head, exposure_tail) = exposure_counts(recs, split, k);
        out.push(CutoffMetrics {
            k,
            hr_all: hit_rate(recs, truth, k, None)?,
            hr_tail: tail_or_none(hit_rate(recs, truth, k, Some(&split.tail)))?,
            ndcg_all: ndcg(recs, truth, k, None)?,
            ndcg_tail: tail_or_none(ndcg(recs, truth, k, Some(&split.tail)))?,
            mgu: mgu(recs, train_popularity, split, k)?,
            arp: arp(recs, train_popularity, k)?,
            exposure_head,
            exposure_tail,
        });
    }
    let kmax = cutoffs.iter().copied().max().unwrap_or(10);
    Ok(MetricsReport {
        users: truth.len(),
        cutoffs: out,
        quintiles: quintile_report(recs, truth, train_popularity, kmax)?,
    })
}

pub const CNS_COMPONENTS: [&str; 6] = ["hr_all", "hr_tail", "ndcg_all", "ndcg_tail", "mgu", "arp"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnsRow {
    pub model: String,
    /// Normalized components in [`CNS_COMPONENTS`] order.
    pub components: [f64; 6],
    pub cns: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnsTable {
    pub k: usize,
    pub rows: Vec<CnsRow>,
}

impl CnsTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["model".to_string()];
        header.extend(CNS_COMPONENTS.iter().map(|s| s.to_string()));
        header.push("cns".into());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.model.clone()];
            rec.extend(r.components.iter().map(|v| v.to_string()));
            rec.push(r.cns.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Raw component values at cutoff `k`: the four accuracy metrics, MGU, ARP.
pub fn cns_components(report: &MetricsReport, k: usize) -> Result<[f64; 6]> {
    let c = report
        .at(k)
        .ok_or_else(|| Error::Argument(format!("report has no cutoff {k}")))?;
    let need = |v: Option<f64>, name: &str| v.ok_or_else(|| Error::Argument(format!("report has no {name}@{k}")));
    Ok([
        c.hr_all,
        need(c.hr_tail, "tail HR")?,
        c.ndcg_all,
        need(c.ndcg_tail, "tail NDCG")?,
        c.mgu,
        c.arp,
    ])
}

/// Min-max normalizes each component across `models` and averages. MGU and
/// ARP are lower-is-better and are inverted; a component with no spread
/// scores 1 for every model.
pub fn cns(models: &[(String, [f64; 6])]) -> Result<Vec<CnsRow>> {
    if models.len() < 2 {
        return Err(Error::Argument("CNS needs at least two models".into()));
    }
    let mut rows: Vec<CnsRow> = models
        .iter()
        .map(|(m, _)| CnsRow {
            model: m.clone(),
            components: [0.0; 6],
            cns: 0.0,
        })
        .collect();
    for c in 0..6 {
        let lo = models.iter().map(|(_, v)| v[c]).fold(f64::INFINITY, f64::min);
        let hi = models.iter().map(|(_, v)| v[c]).fold(f64::NEG_INFINITY, f64::max);
        let lower_better = c >= 4;
        for (row, (_, v)) in rows.iter_mut().zip(models) {
            row.components[c] = if hi == lo {
                1.0
            } else if lower_better {
                (hi - v[c]) / (hi - lo)
            } else {
                (v[c] - lo) / (hi - lo)
            };
        }
    }
    for r in &mut rows {
        r.cns = r.components.iter().sum::<f64>() / 6.0;
    }
    Ok(rows)
}

pub fn cns_table(reports: &[(String, MetricsReport)], k: usize) -> Result<CnsTable> {
    let models = reports
        .iter()
        .map(|(m, r)| Ok((m.clone(), cns_components(r, k)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(CnsTable { k, rows: cns(&models)? })
}
