//! Joint hierarchy, per-frame motion, T-pose layout and forward kinematics.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invariant, read_file, write_file, MocapError, Result};
use crate::rotation::{euler_zxy, from_row_major, is_rotation, to_row_major};
use crate::sequence::round6;

/// Joint tree with per-joint offsets (cm) from the parent joint.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    pub joint_names: Vec<String>,
    pub parents: Vec<Option<usize>>,
    pub offsets: Vec<Vector3<f64>>,
}

impl Skeleton {
    pub fn new(joint_names: Vec<String>, parents: Vec<Option<usize>>, offsets: Vec<Vector3<f64>>) -> Result<Self> {
        let s = Self {
            joint_names,
            parents,
            offsets,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn n_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn root(&self) -> usize {
        self.parents.iter().position(Option::is_none).expect("validated skeleton has a root")
    }

    pub fn children(&self, joint: usize) -> Vec<usize> {
        (0..self.n_joints()).filter(|&j| self.parents[j] == Some(joint)).collect()
    }

    /// Joints ordered so that every parent precedes its children.
    pub fn topological_order(&self) -> Vec<usize> {
        let mut order = vec![self.root()];
        let mut head = 0;
        while head < order.len() {
            let j = order[head];
            order.extend(self.children(j));
            head += 1;
        }
        order
    }

    /// Undirected bones as `(parent, child)` pairs.
    pub fn bones(&self) -> Vec<(usize, usize)> {
        (0..self.n_joints()).filter_map(|j| self.parents[j].map(|p| (p, j))).collect()
    }

    pub fn mean_bone_length(&self) -> f64 {
        let bones = self.bones();
        if bones.is_empty() {
            return 0.0;
        }
        bones.iter().map(|&(_, c)| self.offsets[c].norm()).sum::<f64>() / bones.len() as f64
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.joint_names.len();
        if n == 0 {
            return Err(invariant("skeleton", "no joints"));
        }
        if self.parents.len() != n || self.offsets.len() != n {
            return Err(invariant("skeleton", "parents/offsets length differs from joint count"));
        }
        let roots = self.parents.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(invariant("skeleton", format!("expected exactly one root, found {roots}")));
        }
        for (j, p) in self.parents.iter().enumerate() {
            if let Some(p) = *p {
                if p >= n || p == j {
                    return Err(invariant("skeleton", format!("joint {j} has invalid parent {p}")));
                }
                if self.offsets[j].norm() == 0.0 || !self.offsets[j].iter().all(|v| v.is_finite()) {
                    return Err(invariant(
                        "skeleton",
                        format!("non-root joint `{}` has a zero or non-finite offset", self.joint_names[j]),
                    ));
                }
            }
        }
        // Every joint reachable from the root means no cycles.
        if self.topological_order().len() != n {
            return Err(invariant("skeleton", "parent indices contain a cycle"));
        }
        Ok(())
    }
}

/// Per-frame local joint rotations and the global root translation (cm).
#[derive(Clone, Debug, PartialEq)]
pub struct Motion {
    n_joints: usize,
    pub rotations: Vec<Matrix3<f64>>,
    pub root_translation: Vec<Vector3<f64>>,
}

impl Motion {
    pub fn identity(n_frames: usize, n_joints: usize) -> Self {
        Self {
            n_joints,
            rotations: vec![Matrix3::identity(); n_frames * n_joints],
            root_translation: vec![Vector3::zeros(); n_frames],
        }
    }

    pub fn n_frames(&self) -> usize {
        self.root_translation.len()
    }

    pub fn n_joints(&self) -> usize {
        self.n_joints
    }

    pub fn rotation(&self, frame: usize, joint: usize) -> &Matrix3<f64> {
        &self.rotations[frame * self.n_joints + joint]
    }

    pub fn set_rotation(&mut self, frame: usize, joint: usize, r: Matrix3<f64>) {
        self.rotations[frame * self.n_joints + joint] = r;
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        if self.rotations.len() != self.n_frames() * self.n_joints {
            return Err(invariant("motion", "rotation count differs from frames × joints"));
        }
        for (k, r) in self.rotations.iter().enumerate() {
            if !is_rotation(r, tol) {
                return Err(invariant(
                    "motion",
                    format!("rotation of joint {} at frame {} is not orthonormal", k % self.n_joints, k / self.n_joints),
                ));
            }
        }
        Ok(())
    }
}

/// Global joint positions, `result[t][j]`.
///
/// Root position is the root translation; each child sits at its parent's
/// position plus the parent's global rotation applied to the child offset.
pub fn forward_kinematics(motion: &Motion, skeleton: &Skeleton) -> Vec<Vec<Vector3<f64>>> {
    let order = skeleton.topological_order();
    let n = skeleton.n_joints();
    (0..motion.n_frames())
        .map(|t| {
            let mut global_rot = vec![Matrix3::identity(); n];
            let mut pos = vec![Vector3::zeros(); n];
            for &j in &order {
                match skeleton.parents[j] {
                    None => global_rot[j] = *motion.rotation(t, j),
                    Some(p) => {
                        pos[j] = pos[p] + global_rot[p] * skeleton.offsets[j];
                        global_rot[j] = global_rot[p] * motion.rotation(t, j);
                    }
                }
            }
            // Translation last, so it never mixes into the chain sums.
            pos.iter().map(|p| p + motion.root_translation[t]).collect()
        })
        .collect()
}

/// Global joint rotations, `result[t][j]`.
pub fn global_rotations(motion: &Motion, skeleton: &Skeleton) -> Vec<Vec<Matrix3<f64>>> {
    let order = skeleton.topological_order();
    (0..motion.n_frames())
        .map(|t| {
            let mut g = vec![Matrix3::identity(); skeleton.n_joints()];
            for &j in &order {
                g[j] = match skeleton.parents[j] {
                    None => *motion.rotation(t, j),
                    Some(p) => g[p] * motion.rotation(t, j),
                };
            }
            g
        })
        .collect()
}

/// Marker and joint positions at the rest pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkerLayout {
    pub tpose_joint_positions: Vec<[f64; 3]>,
    pub tpose_marker_positions: Vec<[f64; 3]>,
}

impl MarkerLayout {
    pub fn marker(&self, m: usize) -> Vector3<f64> {
        Vector3::from(self.tpose_marker_positions[m])
    }

    pub fn joint(&self, j: usize) -> Vector3<f64> {
        Vector3::from(self.tpose_joint_positions[j])
    }

    pub fn n_markers(&self) -> usize {
        self.tpose_marker_positions.len()
    }

    pub fn n_joints(&self) -> usize {
        self.tpose_joint_positions.len()
    }

    /// Layout restricted to a subset of markers.
    pub fn select_markers(&self, markers: &[usize]) -> MarkerLayout {
        MarkerLayout {
            tpose_joint_positions: self.tpose_joint_positions.clone(),
            tpose_marker_positions: markers.iter().map(|&m| self.tpose_marker_positions[m]).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_file(path)?;
        serde_json::from_str(&text).map_err(|source| MocapError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }
}

// Keys in alphabetical order for canonical output.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MotionDoc {
    frame_rate: f64,
    frames: Vec<FrameDoc>,
    joints: Vec<JointDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameDoc {
    root_t: [f64; 3],
    rotations: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointDoc {
    name: String,
    offset: [f64; 3],
    parent: Option<usize>,
}

pub fn motion_to_json(skeleton: &Skeleton, motion: &Motion, frame_rate: f64) -> Result<String> {
    skeleton.validate()?;
    if motion.n_joints() != skeleton.n_joints() {
        return Err(MocapError::Shape("motion and skeleton joint counts differ".into()));
    }
    let doc = MotionDoc {
        frame_rate: round6(frame_rate),
        frames: (0..motion.n_frames())
            .map(|t| FrameDoc {
                root_t: motion.root_translation[t].map(round6).into(),
                rotations: (0..motion.n_joints())
                    .flat_map(|j| to_row_major(motion.rotation(t, j)))
                    .map(round6)
                    .collect(),
            })
            .collect(),
        joints: (0..skeleton.n_joints())
            .map(|j| JointDoc {
                name: skeleton.joint_names[j].clone(),
                offset: skeleton.offsets[j].map(round6).into(),
                parent: skeleton.parents[j],
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

/// Parses a skeleton/motion document, returning `(skeleton, motion, frame_rate)`.
pub fn motion_from_json(text: &str) -> Result<(Skeleton, Motion, f64)> {
    let doc: MotionDoc = serde_json::from_str(text)?;
    let skeleton = Skeleton::new(
        doc.joints.iter().map(|j| j.name.clone()).collect(),
        doc.joints.iter().map(|j| j.parent).collect(),
        doc.joints.iter().map(|j| Vector3::from(j.offset)).collect(),
    )?;
    let n = skeleton.n_joints();
    let mut motion = Motion::identity(doc.frames.len(), n);
    for (t, f) in doc.frames.iter().enumerate() {
        if f.rotations.len() != 9 * n {
            return Err(invariant("motion", format!("frame {t} has {} rotation values, expected {}", f.rotations.len(), 9 * n)));
        }
        motion.root_translation[t] = Vector3::from(f.root_t);
        for j in 0..n {
            motion.set_rotation(t, j, from_row_major(&f.rotations[j * 9..]));
        }
    }
    Ok((skeleton, motion, doc.frame_rate))
}

pub fn save_motion(path: &Path, skeleton: &Skeleton, motion: &Motion, frame_rate: f64) -> Result<()> {
    write_file(path, &motion_to_json(skeleton, motion, frame_rate)?)
}

pub fn load_motion(path: &Path) -> Result<(Skeleton, Motion, f64)> {
    let text = read_file(path)?;
    motion_from_json(&text).map_err(|e| match e {
        MocapError::Json(source) => MocapError::Parse {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

/// BVH text with `Zrotation Xrotation Yrotation` channels on every joint and
/// position channels on the root.
pub fn to_bvh(skeleton: &Skeleton, motion: &Motion, frame_rate: f64) -> String {
    let mut out = String::from("HIERARCHY\n");
    let mut channel_order = Vec::new();
    write_joint(&mut out, skeleton, skeleton.root(), 0, &mut channel_order);
    let _ = writeln!(out, "MOTION");
    let _ = writeln!(out, "Frames: {}", motion.n_frames());
    let _ = writeln!(out, "Frame Time: {:.6}", 1.0 / frame_rate);
    for t in 0..motion.n_frames() {
        let mut values: Vec<String> = Vec::new();
        for &j in &channel_order {
            if skeleton.parents[j].is_none() {
                values.extend(motion.root_translation[t].iter().map(|v| format!("{v:.6}")));
            }
            values.extend(euler_zxy(motion.rotation(t, j)).iter().map(|v| format!("{v:.6}")));
        }
        let _ = writeln!(out, "{}", values.join(" "));
    }
    out
}

fn write_joint(out: &mut String, skeleton: &Skeleton, j: usize, depth: usize, order: &mut Vec<usize>) {
    let pad = "  ".repeat(depth);
    let is_root = skeleton.parents[j].is_none();
    let _ = writeln!(out, "{pad}{} {}", if is_root { "ROOT" } else { "JOINT" }, skeleton.joint_names[j]);
    let _ = writeln!(out, "{pad}{{");
    let offset = if is_root { Vector3::zeros() } else { skeleton.offsets[j] };
    let _ = writeln!(out, "{pad}  OFFSET {:.6} {:.6} {:.6}", offset.x, offset.y, offset.z);
    if is_root {
        let _ = writeln!(out, "{pad}  CHANNELS 6 Xposition Yposition Zposition Zrotation Xrotation Yrotation");
    } else {
        let _ = writeln!(out, "{pad}  CHANNELS 3 Zrotation Xrotation Yrotation");
    }
    order.push(j);
    let children = skeleton.children(j);
    if children.is_empty() {
        let _ = writeln!(out, "{pad}  End Site");
        let _ = writeln!(out, "{pad}  {{");
        let _ = writeln!(out, "{pad}    OFFSET 0.000000 0.000000 0.000000");
        let _ = writeln!(out, "{pad}  }}");
    }
    for c in children {
        write_joint(out, skeleton, c, depth + 1, order);
    }
    let _ = writeln!(out, "{pad}}}");
}
