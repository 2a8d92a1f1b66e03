//! Occluded marker position error (cm), joint orientation error (degrees)
//! and joint position error (cm).

use crate::error::{MocapError, Result};
use crate::rotation::geodesic_angle;
use crate::sequence::{MarkerMask, MarkerSequence};
use crate::skeleton::{forward_kinematics, Motion, Skeleton};

/// Mean distance between estimated and true positions over masked entries;
/// zero when the mask is empty.
pub fn metric_ompe(est: &MarkerSequence, truth: &MarkerSequence, mask: &MarkerMask) -> Result<f64> {
    let per_frame = ompe_per_frame(est, truth, mask)?;
    let (sum, count) = per_frame.iter().fold((0.0, 0usize), |(s, c), &(fs, fc)| (s + fs, c + fc));
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Per-frame `(sum of distances, masked entry count)`.
pub fn ompe_per_frame(est: &MarkerSequence, truth: &MarkerSequence, mask: &MarkerMask) -> Result<Vec<(f64, usize)>> {
    let (t_len, m) = (truth.n_frames(), truth.n_markers());
    if est.n_frames() != t_len || est.n_markers() != m || mask.n_frames() != t_len || mask.n_markers() != m {
        return Err(MocapError::Shape(format!(
            "OMPE inputs differ: est {}×{}, truth {t_len}×{m}, mask {}×{}",
            est.n_frames(),
            est.n_markers(),
            mask.n_frames(),
            mask.n_markers()
        )));
    }
    Ok((0..t_len)
        .map(|t| {
            (0..m).filter(|&k| mask.get(t, k)).fold((0.0, 0), |(s, c), k| {
                (s + (est.position(t, k) - truth.position(t, k)).norm(), c + 1)
            })
        })
        .collect())
}

fn check_topology(m1: &Motion, m2: &Motion) -> Result<()> {
    if m1.n_frames() != m2.n_frames() || m1.n_joints() != m2.n_joints() {
        return Err(MocapError::Shape(format!(
            "motions differ: {}×{} vs {}×{}",
            m1.n_frames(),
            m1.n_joints(),
            m2.n_frames(),
            m2.n_joints()
        )));
    }
    Ok(())
}

/// Mean geodesic angle per frame.
pub fn joe_per_frame(m1: &Motion, m2: &Motion) -> Result<Vec<f64>> {
    check_topology(m1, m2)?;
    let j = m1.n_joints();
    Ok((0..m1.n_frames())
        .map(|t| (0..j).map(|k| geodesic_angle(m1.rotation(t, k), m2.rotation(t, k))).sum::<f64>() / j.max(1) as f64)
        .collect())
}

pub fn metric_joe(m1: &Motion, m2: &Motion) -> Result<f64> {
    let f = joe_per_frame(m1, m2)?;
    Ok(mean(&f))
}

/// Mean joint distance per frame, each motion posed with its own skeleton.
pub fn jpe_per_frame(m1: &Motion, s1: &Skeleton, m2: &Motion, s2: &Skeleton) -> Result<Vec<f64>> {
    check_topology(m1, m2)?;
    if s1.parents != s2.parents || s1.n_joints() != m1.n_joints() {
        return Err(MocapError::Shape("skeleton topologies differ".into()));
    }
    let (p1, p2) = (forward_kinematics(m1, s1), forward_kinematics(m2, s2));
    Ok(p1
        .iter()
        .zip(&p2)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).norm()).sum::<f64>() / a.len().max(1) as f64)
        .collect())
}

pub fn metric_jpe(m1: &Motion, s1: &Skeleton, m2: &Motion, s2: &Skeleton) -> Result<f64> {
    Ok(mean(&jpe_per_frame(m1, s1, m2, s2)?))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}
