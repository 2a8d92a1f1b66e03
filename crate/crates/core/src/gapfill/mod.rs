//! Occlusion gap filling: neighbor distance matrices are interpolated across
//! the gap, embedded with classical MDS and registered onto the visible
//! neighbors. A recurrent refiner can then correct the estimates.

mod refiner;

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{MocapError, Result};
use crate::locality::{squared_distance_matrix, NeighborTable};
use crate::sequence::MarkerSequence;
use crate::spline::CubicSpline;

pub use refiner::{refine, train_refiner, RefinerConfig, RefinerModel, RefinerSample, TrainConfig};

/// Maximal run of occluded frames of one marker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gap {
    pub marker: usize,
    /// Last visible frame before the run, absent when the run starts the sequence.
    pub start: Option<usize>,
    /// First visible frame after the run, absent when the run ends the sequence.
    pub end: Option<usize>,
    pub first_missing: usize,
    pub last_missing: usize,
}

impl Gap {
    pub fn n_missing(&self) -> usize {
        self.last_missing - self.first_missing + 1
    }

    pub fn is_boundary(&self) -> bool {
        self.start.is_none() || self.end.is_none()
    }

    pub fn frames(&self) -> std::ops::RangeInclusive<usize> {
        self.first_missing..=self.last_missing
    }
}

/// Gaps ordered by marker, then by frame.
pub fn find_gaps(seq: &MarkerSequence) -> Vec<Gap> {
    let t_len = seq.n_frames();
    let mut gaps = Vec::new();
    for marker in 0..seq.n_markers() {
        let mut t = 0;
        while t < t_len {
            if seq.is_visible(t, marker) {
                t += 1;
                continue;
            }
            let first = t;
            while t < t_len && !seq.is_visible(t, marker) {
                t += 1;
            }
            gaps.push(Gap {
                marker,
                start: first.checked_sub(1),
                end: (t < t_len).then_some(t),
                first_missing: first,
                last_missing: t - 1,
            });
        }
    }
    gaps
}

/// `((e − t)·D_s + (t − s)·D_e) / (e − s)`.
pub fn interpolate_distance_matrix(d_s: &DMatrix<f64>, d_e: &DMatrix<f64>, s: usize, e: usize, t: usize) -> DMatrix<f64> {
    let span = (e - s) as f64;
    let (ws, we) = ((e - t) as f64 / span, (t - s) as f64 / span);
    d_s.zip_map(d_e, |a, b| ws * a + we * b)
}

/// Classical multidimensional scaling into three dimensions. Returns an
/// `n × 3` point matrix; negative eigenvalues are treated as zero.
pub fn mds_embed(d: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = d.nrows();
    if d.ncols() != n {
        return Err(MocapError::Shape(format!("distance matrix is {}×{}", n, d.ncols())));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 3));
    }
    let j = DMatrix::<f64>::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
    let mut b = -0.5 * &j * d * &j;
    b = 0.5 * (&b + b.transpose());
    let eig = SymmetricEigen::try_new(b, 1e-15, 10_000).ok_or(MocapError::Eigen)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[c].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&c)));
    let mut points = DMatrix::zeros(n, 3);
    for (col, &k) in order.iter().take(3).enumerate() {
        let lambda = eig.eigenvalues[k].max(0.0);
        if lambda == 0.0 {
            continue;
        }
        let v = eig.eigenvectors.column(k);
        // Fix the sign so the embedding does not depend on solver internals.
        let pivot = (0..n).max_by(|&a, &c| v[a].abs().total_cmp(&v[c].abs()).then(c.cmp(&a))).unwrap_or(0);
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        let scale = sign * lambda.sqrt();
        for r in 0..n {
            points[(r, col)] = v[r] * scale;
        }
    }
    Ok(points)
}

fn rows_of(points: &DMatrix<f64>) -> Vec<Vector3<f64>> {
    (0..points.nrows())
        .map(|r| Vector3::new(points[(r, 0)], points[(r, 1)], points[(r, 2)]))
        .collect()
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

/// Least-squares rigid transform `(R, t)` with `R·source + t ≈ target` and
/// `det R = +1`.
pub fn procrustes_align(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    if source.len() != target.len() {
        return Err(MocapError::Shape(format!("{} source vs {} target points", source.len(), target.len())));
    }
    if source.len() < 3 {
        return Err(MocapError::Degenerate(format!("{} points, need at least 3", source.len())));
    }
    let (cs, ct) = (centroid(source), centroid(target));
    let mut spread = Matrix3::zeros();
    let mut h = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        let (a, b) = (s - cs, t - ct);
        spread += a * a.transpose();
        h += a * b.transpose();
    }
    let mut sv = spread.symmetric_eigenvalues().iter().copied().collect::<Vec<f64>>();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] <= 1e-18 * sv[0] {
        return Err(MocapError::Degenerate("source points are collinear or coincident".into()));
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.ok_or(MocapError::Eigen)?, svd.v_t.ok_or(MocapError::Eigen)?);
    let v = v_t.transpose();
    let mut fix = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        let smallest = (0..3)
            .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
            .unwrap_or(2);
        fix[(smallest, smallest)] = -1.0;
    }
    let r = v * fix * u.transpose();
    Ok((r, ct - r * cs))
}

/// Root-mean-square distance between `R·source + t` and `target`.
fn alignment_rms(r: &Matrix3<f64>, t: &Vector3<f64>, source: &[Vector3<f64>], target: &[Vector3<f64>]) -> f64 {
    let sum: f64 = source.iter().zip(target).map(|(s, q)| (r * s + t - q).norm_squared()).sum();
    (sum / source.len() as f64).sqrt()
}

/// Estimate for one occluded frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameFill {
    pub frame: usize,
    pub position: [f64; 3],
    /// `Σ_j | ‖x − p_j‖² − D[0, j] |` over the neighbors used; absent on fallback.
    pub residual: Option<f64>,
    pub neighbors_used: usize,
    /// Set when too few neighbors were usable and the marker's own
    /// trajectory was interpolated instead.
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapFill {
    pub gap: Gap,
    pub frames: Vec<FrameFill>,
}

/// Fills every frame of `gap` from the neighbors in `table`.
pub fn edm_fill_gap(seq: &MarkerSequence, gap: &Gap, table: &NeighborTable) -> Result<GapFill> {
    let marker = gap.marker;
    if gap.start.is_none() && gap.end.is_none() {
        return Err(MocapError::Degenerate(format!(
            "marker `{}` is never visible",
            seq.marker_names[marker]
        )));
    }
    let anchors: Vec<usize> = gap.start.into_iter().chain(gap.end).collect();
    let mut frames = Vec::with_capacity(gap.n_missing());
    for t in gap.frames() {
        let usable: Vec<usize> = table.neighbors[marker]
            .iter()
            .copied()
            .filter(|&j| seq.is_visible(t, j) && anchors.iter().all(|&a| seq.is_visible(a, j)))
            .collect();
        let estimate = if usable.len() >= 3 { edm_frame(seq, marker, &usable, gap, t) } else { None };
        frames.push(match estimate {
            Some((p, residual)) => FrameFill {
                frame: t,
                position: p.into(),
                residual: Some(residual),
                neighbors_used: usable.len(),
                fallback: false,
            },
            None => FrameFill {
                frame: t,
                position: trajectory_fallback(seq, gap, t)?.into(),
                residual: None,
                neighbors_used: usable.len(),
                fallback: true,
            },
        });
    }
    Ok(GapFill { gap: *gap, frames })
}

fn points_at(seq: &MarkerSequence, t: usize, ids: &[usize]) -> Vec<Vector3<f64>> {
    ids.iter().map(|&j| seq.position(t, j)).collect()
}

/// Rigidly carries the marker from each anchor to frame `t` using the
/// neighbors, then blends the anchors linearly in time. Used only to choose
/// between mirror-image embeddings.
fn transfer_prior(seq: &MarkerSequence, marker: usize, usable: &[usize], gap: &Gap, t: usize) -> Vector3<f64> {
    let now = points_at(seq, t, usable);
    let carry = |a: usize| match procrustes_align(&points_at(seq, a, usable), &now) {
        Ok((r, tr)) => r * seq.position(a, marker) + tr,
        Err(_) => seq.position(a, marker),
    };
    match (gap.start, gap.end) {
        (Some(s), Some(e)) => {
            let w = (t - s) as f64 / (e - s) as f64;
            carry(s) * (1.0 - w) + carry(e) * w
        }
        (Some(a), None) | (None, Some(a)) => carry(a),
        (None, None) => Vector3::zeros(),
    }
}

fn edm_frame(seq: &MarkerSequence, marker: usize, usable: &[usize], gap: &Gap, t: usize) -> Option<(Vector3<f64>, f64)> {
    let ids: Vec<usize> = std::iter::once(marker).chain(usable.iter().copied()).collect();
    let d_t = match (gap.start, gap.end) {
        (Some(s), Some(e)) => interpolate_distance_matrix(
            &squared_distance_matrix(&points_at(seq, s, &ids)),
            &squared_distance_matrix(&points_at(seq, e, &ids)),
            s,
            e,
            t,
        ),
        (Some(a), None) | (None, Some(a)) => squared_distance_matrix(&points_at(seq, a, &ids)),
        (None, None) => return None,
    };
    let embedded = rows_of(&mds_embed(&d_t).ok()?);
    let observed = points_at(seq, t, usable);
    let spread = (observed.iter().map(|p| (p - centroid(&observed)).norm_squared()).sum::<f64>()
        / observed.len() as f64)
        .sqrt();

    // MDS fixes the configuration only up to a reflection, so both
    // handednesses are registered and compared.
    let mut candidates = Vec::with_capacity(2);
    for flip in [1.0, -1.0] {
        let pts: Vec<Vector3<f64>> = embedded.iter().map(|p| Vector3::new(p.x, p.y, flip * p.z)).collect();
        if let Ok((r, tr)) = procrustes_align(&pts[1..], &observed) {
            candidates.push((r * pts[0] + tr, alignment_rms(&r, &tr, &pts[1..], &observed)));
        }
    }
    let chosen = match candidates.as_slice() {
        [] => return None,
        [only] => only.0,
        [a, b] => {
            let (lo, hi) = if a.1 <= b.1 { (a, b) } else { (b, a) };
            if hi.1 - lo.1 > (1e-6 * spread).max(0.5 * hi.1) {
                lo.0
            } else {
                let prior = transfer_prior(seq, marker, usable, gap, t);
                if (a.0 - prior).norm() <= (b.0 - prior).norm() {
                    a.0
                } else {
                    b.0
                }
            }
        }
        _ => unreachable!(),
    };
    let residual = observed
        .iter()
        .enumerate()
        .map(|(k, p)| ((chosen - p).norm_squared() - d_t[(0, k + 1)]).abs())
        .sum();
    chosen.iter().all(|v| v.is_finite()).then_some((chosen, residual))
}

/// Cubic spline through up to four visible frames on each side of the gap;
/// a one-sided gap holds its single anchor.
fn trajectory_fallback(seq: &MarkerSequence, gap: &Gap, t: usize) -> Result<Vector3<f64>> {
    let marker = gap.marker;
    let mut knots: Vec<usize> = Vec::new();
    if let Some(s) = gap.start {
        knots.extend((0..=s).rev().filter(|&f| seq.is_visible(f, marker)).take(4));
    }
    if let Some(e) = gap.end {
        knots.extend((e..seq.n_frames()).filter(|&f| seq.is_visible(f, marker)).take(4));
    }
    knots.sort_unstable();
    if gap.is_boundary() {
        let anchor = gap.start.or(gap.end).expect("gap has an anchor");
        return Ok(seq.position(anchor, marker));
    }
    let xs: Vec<f64> = knots.iter().map(|&f| f as f64).collect();
    let ys: Vec<Vector3<f64>> = knots.iter().map(|&f| seq.position(f, marker)).collect();
    Ok(CubicSpline::new(&xs, &ys)?.eval(t as f64))
}

/// Result of filling every gap of a sequence.
#[derive(Clone, Debug)]
pub struct FillOutcome {
    /// Input with estimates written in and their entries marked visible.
    pub sequence: MarkerSequence,
    pub fills: Vec<GapFill>,
    /// Gaps of markers that are never visible; left occluded.
    pub unfilled: Vec<Gap>,
}

impl FillOutcome {
    pub fn fallback_frames(&self) -> usize {
        self.fills.iter().flat_map(|f| &f.frames).filter(|f| f.fallback).count()
    }
}

/// Fills all gaps. Estimates always come from the original observations, so
/// the order in which gaps are visited does not matter.
pub fn fill_all_gaps(seq: &MarkerSequence, table: &NeighborTable) -> Result<FillOutcome> {
    if table.n_markers() != seq.n_markers() {
        return Err(MocapError::Shape(format!(
            "neighbor table covers {} markers, sequence has {}",
            table.n_markers(),
            seq.n_markers()
        )));
    }
    let mut out = seq.clone();
    let mut fills = Vec::new();
    let mut unfilled = Vec::new();
    for gap in find_gaps(seq) {
        if gap.start.is_none() && gap.end.is_none() {
            unfilled.push(gap);
            continue;
        }
        let fill = edm_fill_gap(seq, &gap, table)?;
        for f in &fill.frames {
            out.set_position(f.frame, gap.marker, Vector3::from(f.position));
            out.set_visible(f.frame, gap.marker, true);
        }
        fills.push(fill);
    }
    Ok(FillOutcome {
        sequence: out,
        fills,
        unfilled,
    })
}
