//! Outliers are frames where a marker's acceleration peaks above a
//! threshold. Frames around each peak are re-interpolated from the
//! surrounding trajectory.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{MocapError, Result};
use crate::sequence::MarkerSequence;
use crate::spline::CubicSpline;

/// Lowest robust threshold, in cm/frame². Keeps numerically smooth tracks
/// (where the spread of accelerations is ~0) from flagging rounding noise.
pub const ROBUST_FLOOR: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThresholdPolicy {
    Absolute { value: f64 },
    /// `median + c·MAD` of each marker's profile, at least [`ROBUST_FLOOR`].
    Robust { c: f64 },
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::Robust { c: 8.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierEvent {
    pub acceleration: f64,
    pub frame: usize,
    pub marker: usize,
}

/// Inclusive frame range of one marker that gets repaired.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairWindow {
    pub first: usize,
    pub last: usize,
    pub marker: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    /// Sorted by marker, then frame.
    pub events: Vec<OutlierEvent>,
    pub half_window: usize,
    /// Threshold used for each marker; `None` when the profile is empty or
    /// the threshold is infinite.
    pub thresholds: Vec<Option<f64>>,
    /// Overlapping windows of one marker are merged.
    pub windows: Vec<RepairWindow>,
}

impl OutlierReport {
    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// `‖p(t+1) − 2p(t) + p(t−1)‖` wherever the marker is visible at all three
/// frames.
pub fn acceleration_profile(seq: &MarkerSequence, marker: usize) -> Vec<Option<f64>> {
    let t_len = seq.n_frames();
    (0..t_len)
        .map(|t| {
            if t == 0 || t + 1 >= t_len || !(t - 1..=t + 1).all(|f| seq.is_visible(f, marker)) {
                return None;
            }
            Some((seq.position(t + 1, marker) - 2.0 * seq.position(t, marker) + seq.position(t - 1, marker)).norm())
        })
        .collect()
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn threshold(profile: &[Option<f64>], policy: ThresholdPolicy) -> f64 {
    match policy {
        ThresholdPolicy::Absolute { value } => value,
        ThresholdPolicy::Robust { c } => {
            let mut vals: Vec<f64> = profile.iter().flatten().copied().collect();
            if vals.is_empty() {
                return f64::INFINITY;
            }
            vals.sort_by(f64::total_cmp);
            let med = median(&vals);
            let mut dev: Vec<f64> = vals.iter().map(|v| (v - med).abs()).collect();
            dev.sort_by(f64::total_cmp);
            (med + c * median(&dev)).max(ROBUST_FLOOR)
        }
    }
}

/// Frames whose acceleration exceeds the threshold and is a local peak:
/// strictly above the previous frame and not below the next.
pub fn detect_outliers(seq: &MarkerSequence, policy: ThresholdPolicy, half_window: usize) -> OutlierReport {
    let t_len = seq.n_frames();
    let mut events = Vec::new();
    let mut thresholds = Vec::with_capacity(seq.n_markers());
    let mut windows = Vec::new();
    for marker in 0..seq.n_markers() {
        let profile = acceleration_profile(seq, marker);
        let thr = threshold(&profile, policy);
        thresholds.push(Some(thr).filter(|v| v.is_finite()));
        let at = |t: usize| profile.get(t).copied().flatten();
        let mut current: Option<RepairWindow> = None;
        for t in 0..t_len {
            let Some(a) = at(t) else { continue };
            let before = t.checked_sub(1).and_then(at);
            let after = at(t + 1);
            if a > thr && before.map_or(true, |b| a > b) && after.map_or(true, |n| a >= n) {
                events.push(OutlierEvent {
                    acceleration: a,
                    frame: t,
                    marker,
                });
                let (first, last) = (t.saturating_sub(half_window), (t + half_window).min(t_len - 1));
                current = match current {
                    Some(w) if first <= w.last + 1 => Some(RepairWindow { last, ..w }),
                    Some(w) => {
                        windows.push(w);
                        Some(RepairWindow { first, last, marker })
                    }
                    None => Some(RepairWindow { first, last, marker }),
                };
            }
        }
        windows.extend(current);
    }
    OutlierReport {
        events,
        half_window,
        thresholds,
        windows,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairAction {
    Interpolated,
    /// Too few anchors; the frame is marked occluded for later gap filling.
    Occluded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairedFrame {
    pub action: RepairAction,
    pub frame: usize,
    pub marker: usize,
}

/// Replaces every visible frame inside the report's windows with a cubic
/// spline through up to four visible frames on each side. Windows with
/// fewer than two anchors on a side are marked occluded instead.
pub fn repair_outliers(seq: &MarkerSequence, report: &OutlierReport) -> Result<(MarkerSequence, Vec<RepairedFrame>)> {
    let mut out = seq.clone();
    let mut log = Vec::new();
    for w in &report.windows {
        if w.marker >= seq.n_markers() || w.last >= seq.n_frames() || w.first > w.last {
            return Err(MocapError::Shape(format!("repair window {w:?} is outside the sequence")));
        }
        let in_any_window = |f: usize| {
            report
                .windows
                .iter()
                .any(|o| o.marker == w.marker && (o.first..=o.last).contains(&f))
        };
        let usable = |f: &usize| seq.is_visible(*f, w.marker) && !in_any_window(*f);
        let left: Vec<usize> = (0..w.first).rev().filter(usable).take(4).collect();
        let right: Vec<usize> = (w.last + 1..seq.n_frames()).filter(usable).take(4).collect();
        let targets = (w.first..=w.last).filter(|&f| seq.is_visible(f, w.marker));
        if left.len() < 2 || right.len() < 2 {
            for f in targets {
                out.set_visible(f, w.marker, false);
                log.push(RepairedFrame {
                    action: RepairAction::Occluded,
                    frame: f,
                    marker: w.marker,
                });
            }
            continue;
        }
        let mut knots: Vec<usize> = left.into_iter().chain(right).collect();
        knots.sort_unstable();
        let xs: Vec<f64> = knots.iter().map(|&f| f as f64).collect();
        let ys: Vec<Vector3<f64>> = knots.iter().map(|&f| seq.position(f, w.marker)).collect();
        let spline = CubicSpline::new(&xs, &ys)?;
        for f in targets {
            out.set_position(f, w.marker, spline.eval(f as f64));
            log.push(RepairedFrame {
                action: RepairAction::Interpolated,
                frame: f,
                marker: w.marker,
            });
        }
    }
    Ok((out, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::from_euler_zxy;
    use crate::sequence::PartLabel;
    use proptest::prelude::*;

    fn track(n_frames: usize, f: impl Fn(f64) -> Vector3<f64>) -> MarkerSequence {
        let mut s = MarkerSequence::new(60.0, vec!["m".into()], vec![PartLabel::Body], n_frames);
        for t in 0..n_frames {
            s.set_position(t, 0, f(t as f64));
        }
        s
    }

    fn smooth(t: f64) -> Vector3<f64> {
        Vector3::new(20.0 * (t * 0.05).sin(), 10.0 * (t * 0.03).cos(), 0.1 * t)
    }

    #[test]
    fn profile_examples() {
        let line = track(10, |t| Vector3::new(2.0 * t, -t, 5.0));
        let p = acceleration_profile(&line, 0);
        assert_eq!((p[0], p[9]), (None, None));
        assert!(p[1..9].iter().all(|a| a.unwrap() < 1e-12));

        let parab = track(10, |t| Vector3::new(t * t, 0.0, 0.0));
        assert!(acceleration_profile(&parab, 0)[1..9].iter().all(|a| (a.unwrap() - 2.0).abs() < 1e-12));

        let mut spike = track(10, |_| Vector3::zeros());
        spike.set_position(5, 0, Vector3::new(10.0, 0.0, 0.0));
        let p = acceleration_profile(&spike, 0);
        assert_eq!((p[4], p[5], p[6]), (Some(10.0), Some(20.0), Some(10.0)));

        spike.set_visible(3, 0, false);
        let p = acceleration_profile(&spike, 0);
        assert_eq!((p[2], p[3], p[4]), (None, None, None));
    }

    #[test]
    fn clean_motion_has_no_events() {
        assert!(detect_outliers(&track(200, smooth), ThresholdPolicy::default(), 2).is_empty());
    }

    #[test]
    fn single_shift_gives_exactly_one_event() {
        let mut s = track(200, smooth);
        s.set_position(80, 0, smooth(80.0) + Vector3::new(3.0, 4.0, 0.0));
        let r = detect_outliers(&s, ThresholdPolicy::default(), 2);
        assert_eq!(r.events.len(), 1);
        assert_eq!(r.events[0].frame, 80);
        assert_eq!(r.windows, vec![RepairWindow { first: 78, last: 82, marker: 0 }]);
        assert!(detect_outliers(&s, ThresholdPolicy::Absolute { value: f64::INFINITY }, 2).is_empty());
    }

    #[test]
    fn empty_report_changes_nothing() {
        let s = track(30, smooth);
        let r = detect_outliers(&s, ThresholdPolicy::default(), 2);
        let (out, log) = repair_outliers(&s, &r).unwrap();
        assert_eq!(out, s);
        assert!(log.is_empty());
    }

    #[test]
    fn spike_on_line_is_repaired_exactly() {
        let line = |t: f64| Vector3::new(1.5 * t, 3.0 - t, 0.25 * t);
        let mut s = track(40, line);
        s.set_position(20, 0, line(20.0) + Vector3::new(0.0, 0.0, 6.0));
        let r = detect_outliers(&s, ThresholdPolicy::default(), 2);
        let (out, log) = repair_outliers(&s, &r).unwrap();
        assert_eq!(log.len(), 5);
        for t in 0..40 {
            assert!((out.position(t, 0) - line(t as f64)).norm() < 1e-9);
            if !(18..=22).contains(&t) {
                assert_eq!(out.position(t, 0), s.position(t, 0));
            }
        }
    }

    #[test]
    fn spike_on_cubic_is_repaired() {
        let cubic = |t: f64| Vector3::new(0.001 * t * t * t - 0.05 * t * t + t, 0.002 * t * t, -0.0005 * t * t * t);
        let mut s = track(50, cubic);
        s.set_position(25, 0, cubic(25.0) + Vector3::new(5.0, 0.0, 0.0));
        let r = detect_outliers(&s, ThresholdPolicy::Robust { c: 8.0 }, 2);
        assert_eq!(r.events.len(), 1);
        let (out, _) = repair_outliers(&s, &r).unwrap();
        for t in 23..=27 {
            assert!((out.position(t, 0) - cubic(t as f64)).norm() < 1e-6);
        }
    }

    #[test]
    fn window_near_boundary_is_occluded() {
        let mut s = track(30, smooth);
        s.set_position(2, 0, smooth(2.0) + Vector3::new(8.0, 0.0, 0.0));
        let r = detect_outliers(&s, ThresholdPolicy::default(), 2);
        assert_eq!(r.windows[0].first, 0);
        let (out, log) = repair_outliers(&s, &r).unwrap();
        assert!(log.iter().all(|l| l.action == RepairAction::Occluded));
        assert!((0..=4).all(|t| !out.is_visible(t, 0)));
        assert!(out.is_visible(5, 0));
    }

    fn multi(n_frames: usize, spikes: &[(usize, usize)]) -> MarkerSequence {
        let mut s = MarkerSequence::new(60.0, (0..3).map(|i| format!("m{i}")).collect(), vec![PartLabel::Body; 3], n_frames);
        for t in 0..n_frames {
            for k in 0..3 {
                s.set_position(t, k, smooth(t as f64 + 17.0 * k as f64));
            }
        }
        for &(k, t) in spikes {
            s.set_position(t, k, s.position(t, k) + Vector3::new(0.0, 6.0, 2.0));
        }
        s
    }

    proptest! {
        #[test]
        fn repair_touches_only_windows_and_clears_events(
            spikes in proptest::collection::btree_set((0usize..3, 1usize..12), 0..6)
        ) {
            let spikes: Vec<(usize, usize)> = spikes.into_iter().map(|(k, b)| (k, 10 + b * 12)).collect();
            let s = multi(170, &spikes);
            let report = detect_outliers(&s, ThresholdPolicy::default(), 2);
            prop_assert_eq!(report.events.len(), spikes.len());
            let (out, _) = repair_outliers(&s, &report).unwrap();
            for t in 0..170 {
                for k in 0..3 {
                    let inside = report.windows.iter().any(|w| w.marker == k && (w.first..=w.last).contains(&t));
                    if !inside {
                        prop_assert_eq!(out.position(t, k), s.position(t, k));
                    }
                }
            }
            prop_assert!(detect_outliers(&out, ThresholdPolicy::default(), 2).is_empty());
        }

        #[test]
        fn robust_threshold_ignores_rigid_motion(
            angles in proptest::array::uniform3(-180.0f64..180.0),
            shift in proptest::array::uniform3(-500.0f64..500.0),
        ) {
            let s = multi(120, &[(1, 50)]);
            let (r, v) = (from_euler_zxy(angles), Vector3::from(shift));
            let mut moved = s.clone();
            for t in 0..120 {
                for k in 0..3 {
                    moved.set_position(t, k, r * s.position(t, k) + v);
                }
            }
            let (a, b) = (detect_outliers(&s, ThresholdPolicy::default(), 2), detect_outliers(&moved, ThresholdPolicy::default(), 2));
            for (x, y) in a.thresholds.iter().zip(&b.thresholds) {
                prop_assert!((x.unwrap() - y.unwrap()).abs() < 1e-6);
            }
            prop_assert_eq!(a.windows, b.windows);
        }
    }
}
