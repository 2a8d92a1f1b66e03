//! Local coordinate frames built from reference markers, used to strip the
//! global motion from body and hand markers.

use nalgebra::{Matrix3, Vector3};
use crate::error::{MocapError, Result};
use crate::rotation::slerp;
use crate::sequence::{MarkerSequence, PartGroup};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceFrame {
    /// Columns are the frame's x, y and z axes in world coordinates.
    pub axes: Matrix3<f64>,
    pub origin: Vector3<f64>,
}

impl ReferenceFrame {
    pub fn identity() -> Self {
        Self {
            axes: Matrix3::identity(),
            origin: Vector3::zeros(),
        }
    }

    pub fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.axes.transpose() * (p - self.origin)
    }

    pub fn to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.axes * p + self.origin
    }
}

/// Origin at the centroid of all points; x along `p₂ − p₁`, z along
/// `x × (p₃ − p₁)`, y completing the right-handed frame.
pub fn compute_reference_frame(points: &[Vector3<f64>]) -> Result<ReferenceFrame> {
    if points.len() < 3 {
        return Err(MocapError::Degenerate(format!("{} reference markers, need 3", points.len())));
    }
    let a = points[1] - points[0];
    let b = points[2] - points[0];
    let c = a.cross(&b);
    if !(c.norm() > 1e-9 * a.norm() * b.norm()) {
        return Err(MocapError::Degenerate("reference markers are collinear".into()));
    }
    let x = a.normalize();
    let z = c.normalize();
    let y = z.cross(&x);
    Ok(ReferenceFrame {
        axes: Matrix3::from_columns(&[x, y, z]),
        origin: points.iter().sum::<Vector3<f64>>() / points.len() as f64,
    })
}

/// One frame per time step from the markers `refs`. Steps where a reference
/// is occluded or the markers are collinear are interpolated between the
/// nearest valid steps (held constant past either end).
pub fn reference_frames(seq: &MarkerSequence, refs: &[usize]) -> Result<Vec<ReferenceFrame>> {
    let t_len = seq.n_frames();
    let valid: Vec<Option<ReferenceFrame>> = (0..t_len)
        .map(|t| {
            if refs.iter().all(|&r| seq.is_visible(t, r)) {
                let pts: Vec<Vector3<f64>> = refs.iter().map(|&r| seq.position(t, r)).collect();
                compute_reference_frame(&pts).ok()
            } else {
                None
            }
        })
        .collect();
    let known: Vec<usize> = (0..t_len).filter(|&t| valid[t].is_some()).collect();
    if known.is_empty() {
        return Err(MocapError::Degenerate("no frame has all reference markers usable".into()));
    }
    let mut out = Vec::with_capacity(t_len);
    let mut next = 0;
    for t in 0..t_len {
        while next < known.len() && known[next] < t {
            next += 1;
        }
        if let Some(f) = valid[t] {
            out.push(f);
            continue;
        }
        let frame = match (next.checked_sub(1).map(|i| known[i]), known.get(next)) {
            (Some(a), Some(&b)) => {
                let (fa, fb) = (valid[a].unwrap(), valid[b].unwrap());
                let u = (t - a) as f64 / (b - a) as f64;
                ReferenceFrame {
                    axes: slerp(&fa.axes, &fb.axes, u),
                    origin: fa.origin * (1.0 - u) + fb.origin * u,
                }
            }
            (Some(a), None) => valid[a].unwrap(),
            (None, Some(&b)) => valid[b].unwrap(),
            (None, None) => unreachable!("known is non-empty"),
        };
        out.push(frame);
    }
    Ok(out)
}

fn selected(seq: &MarkerSequence, part: Option<PartGroup>) -> Vec<usize> {
    (0..seq.n_markers())
        .filter(|&k| part.map_or(true, |g| seq.part_labels[k].groups().contains(&g)))
        .collect()
}

fn check_frames(seq: &MarkerSequence, frames: &[ReferenceFrame]) -> Result<()> {
    if frames.len() != seq.n_frames() {
        return Err(MocapError::Shape(format!("{} frames for a {}-frame sequence", frames.len(), seq.n_frames())));
    }
    Ok(())
}

/// `Aᵀ(p − o)` for every marker in `part` (all markers when `None`).
/// Visibility is untouched.
pub fn to_local(seq: &MarkerSequence, frames: &[ReferenceFrame], part: Option<PartGroup>) -> Result<MarkerSequence> {
    check_frames(seq, frames)?;
    let mut out = seq.clone();
    for k in selected(seq, part) {
        for (t, f) in frames.iter().enumerate() {
            out.set_position(t, k, f.to_local(&seq.position(t, k)));
        }
    }
    Ok(out)
}

/// Inverse of [`to_local`].
pub fn from_local(seq: &MarkerSequence, frames: &[ReferenceFrame], part: Option<PartGroup>) -> Result<MarkerSequence> {
    check_frames(seq, frames)?;
    let mut out = seq.clone();
    for k in selected(seq, part) {
        for (t, f) in frames.iter().enumerate() {
            out.set_position(t, k, f.to_world(&seq.position(t, k)));
        }
    }
    Ok(out)
}

/// A subset of markers together with their indices in the source sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub indices: Vec<usize>,
    pub sequence: MarkerSequence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitStreams {
    pub body: Stream,
    pub left_hand: Stream,
    pub right_hand: Stream,
}

/// Body and both hands. Wrist references appear in the body stream and in
/// their hand's stream.
pub fn split_body_hand(seq: &MarkerSequence) -> Result<SplitStreams> {
    if seq.part_labels.len() != seq.n_markers() {
        return Err(MocapError::Shape(format!(
            "{} part labels for {} markers",
            seq.part_labels.len(),
            seq.n_markers()
        )));
    }
    let stream = |g| {
        let indices = selected(seq, Some(g));
        Stream {
            sequence: seq.select_markers(&indices),
            indices,
        }
    };
    Ok(SplitStreams {
        body: stream(PartGroup::Body),
        left_hand: stream(PartGroup::LeftHand),
        right_hand: stream(PartGroup::RightHand),
    })
}

/// Reassembles streams into `template`'s marker layout. Markers present in
/// several streams take the body stream's values.
pub fn recombine(template: &MarkerSequence, streams: &SplitStreams) -> Result<MarkerSequence> {
    let mut out = template.clone();
    let mut seen = vec![false; template.n_markers()];
    for s in [&streams.body, &streams.left_hand, &streams.right_hand] {
        if !s.indices.is_empty() && s.sequence.n_frames() != template.n_frames() {
            return Err(MocapError::Shape("stream length differs from template".into()));
        }
        for (local, &k) in s.indices.iter().enumerate() {
            if k >= seen.len() {
                return Err(MocapError::Shape(format!("stream marker index {k} out of range")));
            }
            if seen[k] {
                continue;
            }
            seen[k] = true;
            for t in 0..template.n_frames() {
                out.set_position(t, k, s.sequence.position(t, local));
                out.set_visible(t, k, s.sequence.is_visible(t, local));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::{from_euler_zxy, is_rotation};
    use crate::sequence::PartLabel;
    use proptest::prelude::*;

    #[test]
    fn canonical_triangle() {
        let f = compute_reference_frame(&[Vector3::zeros(), Vector3::x(), Vector3::y()]).unwrap();
        assert!((f.origin - Vector3::new(1.0 / 3.0, 1.0 / 3.0, 0.0)).norm() < 1e-15);
        assert_eq!(f.axes, Matrix3::identity());
        assert!(compute_reference_frame(&[Vector3::zeros(), Vector3::x(), Vector3::x() * 2.0]).is_err());
    }

    fn body_sequence(n_frames: usize) -> MarkerSequence {
        let local = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(12.0, 0.0, 1.0),
            Vector3::new(3.0, 9.0, -2.0),
            Vector3::new(5.0, 40.0, 7.0),
            Vector3::new(-8.0, 60.0, 2.0),
            Vector3::new(30.0, 45.0, 0.0),
            Vector3::new(33.0, 47.0, 3.0),
        ];
        let labels = vec![
            PartLabel::WaistRef,
            PartLabel::WaistRef,
            PartLabel::WaistRef,
            PartLabel::Body,
            PartLabel::Body,
            PartLabel::WristRefLeft,
            PartLabel::LeftHand,
        ];
        let mut s = MarkerSequence::new(60.0, (0..7).map(|i| format!("m{i}")).collect(), labels, n_frames);
        for t in 0..n_frames {
            let f = t as f64;
            let r = from_euler_zxy([f * 4.0, 10.0 * (f * 0.2).sin(), f * 2.5]);
            let o = Vector3::new(f * 1.5, 90.0, -f);
            for (k, p) in local.iter().enumerate() {
                s.set_position(t, k, r * p + o);
            }
        }
        s
    }

    #[test]
    fn rigid_motion_gives_constant_local_coordinates() {
        let s = body_sequence(20);
        let frames = reference_frames(&s, &[0, 1, 2]).unwrap();
        let local = to_local(&s, &frames, Some(PartGroup::Body)).unwrap();
        for t in 1..20 {
            for k in 0..6 {
                assert!((local.position(t, k) - local.position(0, k)).norm() < 1e-9);
            }
        }
        // Markers outside the part are untouched.
        assert_eq!(local.position(6, 6), s.position(6, 6));
    }

    #[test]
    fn identity_frame_is_a_no_op() {
        let s = body_sequence(5);
        let frames = vec![ReferenceFrame::identity(); 5];
        assert_eq!(to_local(&s, &frames, None).unwrap(), s);
        assert_eq!(from_local(&s, &frames, None).unwrap(), s);
    }

    #[test]
    fn occluded_reference_frames_are_interpolated() {
        let mut s = body_sequence(11);
        let exact = reference_frames(&s, &[0, 1, 2]).unwrap();
        for t in 3..8 {
            s.set_visible(t, 1, false);
        }
        let frames = reference_frames(&s, &[0, 1, 2]).unwrap();
        for t in 3..8 {
            let u = (t - 2) as f64 / 6.0;
            assert!((frames[t].origin - (exact[2].origin * (1.0 - u) + exact[8].origin * u)).norm() < 1e-9);
            assert!(is_rotation(&frames[t].axes, 1e-12));
        }
        s.set_visible(0, 0, false);
        assert_eq!(reference_frames(&s, &[0, 1, 2]).unwrap()[0], exact[1]);
        let mut hidden = s.clone();
        for t in 0..11 {
            hidden.set_visible(t, 2, false);
        }
        assert!(reference_frames(&hidden, &[0, 1, 2]).is_err());
    }

    #[test]
    fn split_and_recombine() {
        let s = body_sequence(4);
        let split = split_body_hand(&s).unwrap();
        assert_eq!(split.body.indices, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(split.left_hand.indices, vec![5, 6]);
        assert!(split.right_hand.indices.is_empty());
        let total = split.body.indices.len() + split.left_hand.indices.len() + split.right_hand.indices.len();
        assert_eq!(total, s.n_markers() + 1);
        assert_eq!(recombine(&s, &split).unwrap(), s);

        let mut all_body = s.clone();
        all_body.part_labels = vec![PartLabel::Body; 7];
        let split = split_body_hand(&all_body).unwrap();
        assert_eq!(split.left_hand.sequence.n_markers(), 0);
        assert_eq!(split.right_hand.sequence.n_markers(), 0);

        let mut broken = s.clone();
        broken.part_labels.pop();
        assert!(split_body_hand(&broken).is_err());
    }

    proptest! {
        #[test]
        fn frames_are_equivariant_and_local_coordinates_cancel(
            angles in proptest::array::uniform3(-180.0f64..180.0),
            shift in proptest::array::uniform3(-200.0f64..200.0),
        ) {
            let s = body_sequence(6);
            let (r, v) = (from_euler_zxy(angles), Vector3::from(shift));
            let mut moved = s.clone();
            for t in 0..6 {
                for k in 0..7 {
                    moved.set_position(t, k, r * s.position(t, k) + v);
                }
            }
            let (fa, fb) = (reference_frames(&s, &[0, 1, 2]).unwrap(), reference_frames(&moved, &[0, 1, 2]).unwrap());
            for (a, b) in fa.iter().zip(&fb) {
                prop_assert!((r * a.origin + v - b.origin).norm() < 1e-9);
                prop_assert!((r * a.axes - b.axes).abs().max() < 1e-12);
            }
            let (la, lb) = (to_local(&s, &fa, None).unwrap(), to_local(&moved, &fb, None).unwrap());
            for t in 0..6 {
                for k in 0..7 {
                    prop_assert!((la.position(t, k) - lb.position(t, k)).norm() < 1e-9);
                }
            }
            let back = from_local(&lb, &fb, None).unwrap();
            for t in 0..6 {
                for k in 0..7 {
                    prop_assert!((back.position(t, k) - moved.position(t, k)).norm() < 1e-9);
                }
            }
        }
    }
}
