//! Neighbor markers: the markers whose distance to a given marker varies
//! least over a motion.

use std::cmp::Ordering;

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{MocapError, Result};
use crate::sequence::{MarkerSequence, PartLabel};

/// Symmetric per-pair distance statistics over co-visible frames.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceStats {
    pub mean: DMatrix<f64>,
    /// Population variance in cm²; `+∞` when a pair is co-visible in fewer
    /// than two frames.
    pub variance: DMatrix<f64>,
}

impl DistanceStats {
    pub fn n_markers(&self) -> usize {
        self.mean.nrows()
    }
}

pub fn pairwise_distance_stats(seq: &MarkerSequence) -> DistanceStats {
    let m = seq.n_markers();
    let mut mean = DMatrix::zeros(m, m);
    let mut variance = DMatrix::zeros(m, m);
    let mut dists = Vec::with_capacity(seq.n_frames());
    for a in 0..m {
        for b in a + 1..m {
            dists.clear();
            for t in 0..seq.n_frames() {
                if seq.is_visible(t, a) && seq.is_visible(t, b) {
                    dists.push((seq.position(t, a) - seq.position(t, b)).norm());
                }
            }
            let (mu, var) = if dists.is_empty() {
                (f64::INFINITY, f64::INFINITY)
            } else {
                let n = dists.len() as f64;
                let mu = dists.iter().sum::<f64>() / n;
                let var = if dists.len() < 2 {
                    f64::INFINITY
                } else {
                    dists.iter().map(|d| (d - mu) * (d - mu)).sum::<f64>() / n
                };
                (mu, var)
            };
            mean[(a, b)] = mu;
            mean[(b, a)] = mu;
            variance[(a, b)] = var;
            variance[(b, a)] = var;
        }
    }
    DistanceStats { mean, variance }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeighborTable {
    /// Markers whose part had fewer than `k` candidates.
    pub flagged: Vec<usize>,
    pub k: usize,
    pub neighbors: Vec<Vec<usize>>,
    /// Distance variance of each listed neighbor; `None` stands for `+∞`.
    pub variances: Vec<Vec<Option<f64>>>,
}

impl NeighborTable {
    pub fn n_markers(&self) -> usize {
        self.neighbors.len()
    }

    /// Neighbor relations in both directions as `(receiver, sender)` pairs,
    /// sorted and without self-edges.
    pub fn symmetric_edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize)> = self
            .neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, n)| n.iter().flat_map(move |&j| [(i, j), (j, i)]))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let table: NeighborTable = serde_json::from_str(text)?;
        let m = table.neighbors.len();
        if table.variances.len() != m
            || table
                .neighbors
                .iter()
                .enumerate()
                .any(|(i, n)| n.iter().any(|&j| j == i || j >= m))
        {
            return Err(MocapError::Shape("neighbor table is inconsistent".into()));
        }
        Ok(table)
    }
}

/// Picks the `k` lowest-variance markers of the same body part for every
/// marker. Ties go to the lower mean distance, then the lower index.
pub fn select_neighbors(stats: &DistanceStats, k: usize, labels: &[PartLabel]) -> Result<NeighborTable> {
    let m = stats.n_markers();
    if k == 0 {
        return Err(MocapError::Shape("neighbor count k must be at least 1".into()));
    }
    if labels.len() != m {
        return Err(MocapError::Shape(format!("{} part labels for {m} markers", labels.len())));
    }
    let mut neighbors = Vec::with_capacity(m);
    let mut variances = Vec::with_capacity(m);
    let mut flagged = Vec::new();
    for i in 0..m {
        let mut cands: Vec<usize> = (0..m).filter(|&j| j != i && labels[i].shares_group(labels[j])).collect();
        cands.sort_by(|&a, &b| compare_candidates(stats, i, a, b));
        if cands.len() < k {
            flagged.push(i);
        }
        cands.truncate(k);
        variances.push(
            cands
                .iter()
                .map(|&j| Some(stats.variance[(i, j)]).filter(|v| v.is_finite()))
                .collect(),
        );
        neighbors.push(cands);
    }
    Ok(NeighborTable {
        flagged,
        k,
        neighbors,
        variances,
    })
}

/// Squared pairwise distances among `points`.
pub fn squared_distance_matrix(points: &[Vector3<f64>]) -> DMatrix<f64> {
    let n = points.len();
    DMatrix::from_fn(n, n, |a, b| if a == b { 0.0 } else { (points[a] - points[b]).norm_squared() })
}

/// Squared-distance matrix of `marker` followed by its neighbors at frame `t`.
pub fn distance_matrix_at_frame(
    seq: &MarkerSequence,
    marker: usize,
    table: &NeighborTable,
    t: usize,
) -> Result<DMatrix<f64>> {
    let mut points = Vec::with_capacity(table.neighbors[marker].len() + 1);
    for &j in std::iter::once(&marker).chain(&table.neighbors[marker]) {
        if !seq.is_visible(t, j) {
            return Err(MocapError::Invisible {
                marker: seq.marker_names[j].clone(),
                frame: t,
            });
        }
        points.push(seq.position(t, j));
    }
    Ok(squared_distance_matrix(&points))
}

/// Neighbor ranking for marker `i`: variance, then mean distance, then index.
pub fn compare_candidates(stats: &DistanceStats, i: usize, a: usize, b: usize) -> Ordering {
    stats.variance[(i, a)]
        .total_cmp(&stats.variance[(i, b)])
        .then(stats.mean[(i, a)].total_cmp(&stats.mean[(i, b)]))
        .then(a.cmp(&b))
}
