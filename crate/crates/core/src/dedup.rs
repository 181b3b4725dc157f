//! Near-duplicate removal in embedding space.
//!
//! The 1-NN distance distribution picks a cut; every pair closer than the
//! cut is joined in a neighborhood graph, and each connected component keeps
//! a single representative (its lexicographically smallest id).

use std::collections::{BTreeMap, HashSet};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::exec;

/// `N x D` embedding matrix with one id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    matrix: Vec<f64>,
    dim: usize,
    ids: Vec<String>,
    pub source: String,
}

impl FeatureSet {
    pub fn new(
        matrix: Vec<f64>,
        dim: usize,
        ids: Vec<String>,
        source: impl Into<String>,
    ) -> Result<Self> {
        ensure!(
            !ids.is_empty(),
            Param,
            "feature set must hold at least one row"
        );
        ensure!(
            matrix.len() == ids.len() * dim,
            Shape,
            "feature matrix has {} values, expected {} x {}",
            matrix.len(),
            ids.len(),
            dim
        );
        if let Some(pos) = matrix.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite feature value in row `{}`",
                ids[pos / dim.max(1)]
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            ensure!(
                seen.insert(id.as_str()),
                Data,
                "duplicate feature id `{id}`"
            );
        }
        Ok(Self {
            matrix,
            dim,
            ids,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }
}

/// Squared Euclidean distance, summed in coordinate order.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

const ROW_BLOCK: usize = 64;

/// Exact distance from every point to its nearest other point.
pub fn first_neighbor_distances(fs: &FeatureSet) -> Result<Vec<f64>> {
    let n = fs.len();
    ensure!(
        n >= 2,
        Param,
        "need at least 2 points for 1-NN distances, got {n}"
    );
    let blocks = n.div_ceil(ROW_BLOCK);
    let parts = exec::map_indexed(blocks, |b| {
        (b * ROW_BLOCK..((b + 1) * ROW_BLOCK).min(n))
            .map(|i| {
                let ri = fs.row(i);
                (0..n)
                    .filter(|&j| j != i)
                    .map(|j| sq_dist(ri, fs.row(j)))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect::<Vec<_>>()
    });
    Ok(parts.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum ThresholdPolicy {
    Percentile { p: f64 },
    Fixed { value: f64 },
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::Percentile { p: 5.0 }
    }
}

impl FromStr for ThresholdPolicy {
    type Err = Error;

    /// `percentile:<p>` or `fixed:<value>`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, val) = s.split_once(':').ok_or_else(|| {
            Error::Param(format!("policy `{s}` is not `percentile:P` or `fixed:V`"))
        })?;
        let v: f64 = val
            .parse()
            .map_err(|_| Error::Param(format!("policy value `{val}` is not a number")))?;
        match kind {
            "percentile" => Ok(ThresholdPolicy::Percentile { p: v }),
            "fixed" => Ok(ThresholdPolicy::Fixed { value: v }),
            _ => Err(Error::Param(format!("unknown threshold policy `{kind}`"))),
        }
    }
}

/// Linearly interpolated percentile (position `p / 100 * (n - 1)` in the
/// sorted values).
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    ensure!(!values.is_empty(), Param, "percentile of an empty list");
    ensure!(
        (0.0..=100.0).contains(&p),
        Param,
        "percentile must be in [0, 100], got {p}"
    );
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

pub fn select_threshold(distances: &[f64], policy: ThresholdPolicy) -> Result<f64> {
    ensure!(!distances.is_empty(), Param, "no distances to threshold");
    match policy {
        ThresholdPolicy::Fixed { value } => {
            ensure!(
                value >= 0.0,
                Param,
                "threshold must be non-negative, got {value}"
            );
            Ok(value)
        }
        ThresholdPolicy::Percentile { p } => percentile(distances, p),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupReport {
    pub threshold: f64,
    /// Id groups, each sorted, ordered by representative.
    pub components: Vec<Vec<String>>,
    /// One representative per component, sorted.
    pub kept: Vec<String>,
    pub removed_count: usize,
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Joins every pair at distance strictly below `threshold` and keeps one id
/// per connected component.
pub fn deduplicate(fs: &FeatureSet, threshold: f64) -> Result<DedupReport> {
    ensure!(
        threshold >= 0.0,
        Param,
        "threshold must be non-negative, got {threshold}"
    );
    let n = fs.len();
    let blocks = n.div_ceil(ROW_BLOCK);
    let edges = exec::map_indexed(blocks, |b| {
        let mut e = Vec::new();
        for i in b * ROW_BLOCK..((b + 1) * ROW_BLOCK).min(n) {
            for j in i + 1..n {
                if sq_dist(fs.row(i), fs.row(j)).sqrt() < threshold {
                    e.push((i, j));
                }
            }
        }
        e
    });
    let mut uf = UnionFind::new(n);
    for (i, j) in edges.into_iter().flatten() {
        uf.union(i, j);
    }
    let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for i in 0..n {
        let r = uf.find(i);
        groups.entry(r).or_default().push(fs.ids()[i].clone());
    }
    let mut components: Vec<Vec<String>> = groups
        .into_values()
        .map(|mut g| {
            g.sort();
            g
        })
        .collect();
    components.sort();
    let kept: Vec<String> = components.iter().map(|g| g[0].clone()).collect();
    Ok(DedupReport {
        threshold,
        removed_count: n - kept.len(),
        components,
        kept,
    })
}
