//! Heterogeneous marker/joint graph with a global translation node.

use serde::{Deserialize, Serialize};

use crate::error::{MocapError, Result};
use crate::locality::NeighborTable;
use crate::skeleton::{MarkerLayout, Skeleton};

/// Directed edges are `(receiver, sender)`. Joint-graph index `n_joints` is
/// the global node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeteroGraph {
    /// `(marker, joint)` pairs.
    pub cross_edges: Vec<(usize, usize)>,
    /// Bones in both directions, global node to and from every joint, and
    /// self-edges, over `n_joints + 1` nodes.
    pub joint_edges: Vec<(usize, usize)>,
    pub joint_names: Vec<String>,
    /// Neighbor pairs in both directions plus self-edges.
    pub marker_edges: Vec<(usize, usize)>,
    pub n_markers: usize,
    pub parents: Vec<Option<usize>>,
}

impl HeteroGraph {
    pub fn n_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn global_node(&self) -> usize {
        self.n_joints()
    }

    /// Edges of the combined graph used by the inter-graph layers: markers
    /// `0..M`, joints `M..M+J`, global node `M+J`. Cross edges run both ways
    /// and the global node is wired to every other node.
    pub fn union_edges(&self) -> Vec<(usize, usize)> {
        let m = self.n_markers;
        let g = m + self.n_joints();
        let mut edges = Vec::with_capacity(2 * self.cross_edges.len() + 2 * g);
        for &(k, j) in &self.cross_edges {
            edges.push((m + j, k));
            edges.push((k, m + j));
        }
        for v in 0..g {
            edges.push((g, v));
            edges.push((v, g));
        }
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    /// Joints in an order where every parent precedes its children.
    pub fn topological_order(&self) -> Vec<usize> {
        let n = self.n_joints();
        let mut order: Vec<usize> = self.parents.iter().position(Option::is_none).into_iter().collect();
        let mut i = 0;
        while i < order.len() {
            let p = order[i];
            order.extend((0..n).filter(|&c| self.parents[c] == Some(p)));
            i += 1;
        }
        order
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(MocapError::Shape(format!("solver graph: {msg}")));
        let (m, j) = (self.n_markers, self.n_joints());
        if m == 0 || j == 0 {
            return bad("marker and joint sets must be non-empty");
        }
        if self.joint_names.len() != j || self.topological_order().len() != j {
            return bad("joint parents do not form a single tree");
        }
        if self.marker_edges.iter().any(|&(a, b)| a >= m || b >= m) {
            return bad("marker edge out of range");
        }
        if self.joint_edges.iter().any(|&(a, b)| a > j || b > j) {
            return bad("joint edge out of range");
        }
        if self.cross_edges.iter().any(|&(k, q)| k >= m || q >= j) {
            return bad("cross edge out of range");
        }
        if (0..m).any(|k| !self.cross_edges.iter().any(|&(a, _)| a == k)) {
            return bad("a marker has no cross edge");
        }
        Ok(())
    }
}

/// Builds the graph from rest-pose distances. A marker is linked to every
/// joint closer than `threshold` cm, and to its nearest joint when no joint
/// is that close.
pub fn build_hetero_graph(layout: &MarkerLayout, skeleton: &Skeleton, table: &NeighborTable, threshold: f64) -> Result<HeteroGraph> {
    let (m, j) = (layout.n_markers(), skeleton.n_joints());
    if m == 0 || j == 0 {
        return Err(MocapError::Shape("solver graph needs markers and joints".into()));
    }
    if layout.n_joints() != j || table.n_markers() != m {
        return Err(MocapError::Shape(format!(
            "layout has {} markers and {} joints, table {} markers, skeleton {} joints",
            m,
            layout.n_joints(),
            table.n_markers(),
            j
        )));
    }
    if threshold.is_nan() {
        return Err(MocapError::Shape("cross-edge threshold is NaN".into()));
    }
    let mut marker_edges = table.symmetric_edges();
    marker_edges.extend((0..m).map(|k| (k, k)));
    marker_edges.sort_unstable();
    marker_edges.dedup();

    let g = j;
    let mut joint_edges: Vec<(usize, usize)> = Vec::new();
    for (p, c) in skeleton.bones() {
        joint_edges.push((c, p));
        joint_edges.push((p, c));
    }
    for q in 0..j {
        joint_edges.push((g, q));
        joint_edges.push((q, g));
    }
    joint_edges.extend((0..=g).map(|q| (q, q)));
    joint_edges.sort_unstable();
    joint_edges.dedup();

    let mut cross_edges = Vec::new();
    for k in 0..m {
        let dist: Vec<f64> = (0..j).map(|q| (layout.marker(k) - layout.joint(q)).norm()).collect();
        let before = cross_edges.len();
        cross_edges.extend((0..j).filter(|&q| dist[q] < threshold).map(|q| (k, q)));
        if cross_edges.len() == before {
            let nearest = (0..j).min_by(|&a, &b| dist[a].total_cmp(&dist[b])).unwrap_or(0);
            cross_edges.push((k, nearest));
        }
    }
    let graph = HeteroGraph {
        cross_edges,
        joint_edges,
        joint_names: skeleton.joint_names.clone(),
        marker_edges,
        n_markers: m,
        parents: skeleton.parents.clone(),
    };
    graph.validate()?;
    Ok(graph)
}
