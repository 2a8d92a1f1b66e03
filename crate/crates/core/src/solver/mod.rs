//! Skeletal solving: marker/joint graph, solving network, training and
//! per-sequence assembly of motion and skeleton.

mod graph;
mod net;

pub use graph::{build_hetero_graph, HeteroGraph};
pub use net::{
    continue_solver_training, solving_loss, train_solver, FrameSolution, LossWeights, SolverBatch, SolverConfig,
    SolverNet, SolverSample, SolverTrainConfig, NODE_OUTPUTS,
};

use nalgebra::{Matrix3, Vector3};

use crate::align::{reference_frames, to_local, ReferenceFrame};
use crate::error::{MocapError, Result};
use crate::rotation::{from_row_major, gram_schmidt_rotation};
use crate::sequence::MarkerSequence;
use crate::skeleton::{Motion, Skeleton};

/// Root rotation and translation re-expressed in per-frame local frames.
pub fn localize_motion(motion: &Motion, skeleton: &Skeleton, frames: &[ReferenceFrame]) -> Result<Motion> {
    check_frames(motion, frames)?;
    let root = skeleton.root();
    let mut out = motion.clone();
    for (t, f) in frames.iter().enumerate() {
        out.set_rotation(t, root, f.axes.transpose() * motion.rotation(t, root));
        out.root_translation[t] = f.to_local(&motion.root_translation[t]);
    }
    Ok(out)
}

/// Inverse of [`localize_motion`].
pub fn globalize_motion(motion: &Motion, skeleton: &Skeleton, frames: &[ReferenceFrame]) -> Result<Motion> {
    check_frames(motion, frames)?;
    let root = skeleton.root();
    let mut out = motion.clone();
    for (t, f) in frames.iter().enumerate() {
        out.set_rotation(t, root, f.axes * motion.rotation(t, root));
        out.root_translation[t] = f.to_world(&motion.root_translation[t]);
    }
    Ok(out)
}

fn check_frames(motion: &Motion, frames: &[ReferenceFrame]) -> Result<()> {
    if frames.len() != motion.n_frames() {
        return Err(MocapError::Shape(format!("{} reference frames for {} motion frames", frames.len(), motion.n_frames())));
    }
    Ok(())
}

/// Expresses a global sequence and its motion in the frames spanned by the
/// reference markers `refs`.
pub fn prepare_solver_sample(
    seq: &MarkerSequence,
    motion: &Motion,
    skeleton: &Skeleton,
    refs: &[usize],
) -> Result<(SolverSample, Vec<ReferenceFrame>)> {
    let frames = reference_frames(seq, refs)?;
    let sample = SolverSample {
        markers: to_local(seq, &frames, None)?,
        motion: localize_motion(motion, skeleton, &frames)?,
        skeleton: skeleton.clone(),
    };
    Ok((sample, frames))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolvedMotion {
    pub motion: Motion,
    pub skeleton: Skeleton,
    /// Rotations whose raw output could not be orthonormalized and were
    /// replaced by the identity.
    pub degenerate_rotations: usize,
}

/// Orthonormalizes every rotation, averages the per-frame offsets into one
/// skeleton, and moves the root back to world coordinates.
pub fn assemble_motion(solutions: &[FrameSolution], graph: &HeteroGraph, frames: &[ReferenceFrame]) -> Result<SolvedMotion> {
    let j = graph.n_joints();
    if solutions.len() != frames.len() {
        return Err(MocapError::Shape(format!("{} solutions for {} reference frames", solutions.len(), frames.len())));
    }
    if solutions.iter().any(|s| s.rotations.len() != j || s.offsets.len() != j) {
        return Err(MocapError::Shape("solution joint count differs from graph".into()));
    }
    let mut local = Motion::identity(solutions.len(), j);
    let mut degenerate = 0;
    let mut sum = vec![Vector3::zeros(); j];
    for (t, s) in solutions.iter().enumerate() {
        for q in 0..j {
            let r = gram_schmidt_rotation(&from_row_major(&s.rotations[q])).unwrap_or_else(|_| {
                degenerate += 1;
                Matrix3::identity()
            });
            local.set_rotation(t, q, r);
            sum[q] += s.offsets[q];
        }
        local.root_translation[t] = s.translation;
    }
    let n = solutions.len().max(1) as f64;
    let skeleton = Skeleton::new(graph.joint_names.clone(), graph.parents.clone(), sum.iter().map(|v| v / n).collect())?;
    Ok(SolvedMotion {
        motion: globalize_motion(&local, &skeleton, frames)?,
        skeleton,
        degenerate_rotations: degenerate,
    })
}

/// Solves every frame of a local sequence and assembles the result.
pub fn solve_sequence(net: &SolverNet, seq_local: &MarkerSequence, frames: &[ReferenceFrame]) -> Result<SolvedMotion> {
    let solutions = net.solve_frames(seq_local)?;
    assemble_motion(&solutions, net.graph(), frames)
}
