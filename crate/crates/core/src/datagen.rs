//! Synthetic skeletons driven by sinusoidal joint programs, with markers
//! attached to joints, and paired clean/corrupted datasets built from them.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_shifts, gap_counts, place_gaps, CorruptionConfig, OcclusionStats};
use crate::error::{read_file, write_file, MocapError, Result};
use crate::rotation::from_euler_zxy;
use crate::sequence::{save_sequence, MarkerMask, MarkerSequence, PartLabel};
use crate::skeleton::{forward_kinematics, global_rotations, save_motion, MarkerLayout, Motion, Skeleton};

/// `angle(t) = amplitude · sin(2π · frequency · t / frame_rate + phase)`,
/// amplitude in degrees, frequency in Hz, phase in radians.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Wave {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

impl Wave {
    pub fn new(amplitude: f64, frequency: f64) -> Self {
        Self { amplitude, frequency, phase: 0.0 }
    }

    fn at(&self, t: f64, frame_rate: f64, extra_phase: f64) -> f64 {
        self.amplitude * (2.0 * PI * self.frequency * t / frame_rate + self.phase + extra_phase).sin()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    pub name: String,
    /// Offset from the parent joint, cm.
    pub offset: [f64; 3],
    pub parent: Option<usize>,
    /// Rotation programs about z, x, y, composed as `Rz·Rx·Ry`.
    pub waves: [Wave; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkerSpec {
    pub joint: usize,
    /// Additive noise amplitude per coordinate, cm.
    pub jitter: f64,
    pub label: PartLabel,
    pub name: String,
    /// Local offset from the joint, cm.
    pub offset: [f64; 3],
    /// Per-frame relative scaling noise on the offset length.
    pub stretch: f64,
}

/// Root translation `base + velocity·t + amplitude ⊙ sin(2π f t / fr)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RootPath {
    pub amplitude: [f64; 3],
    pub base: [f64; 3],
    pub frequency: f64,
    pub velocity: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub frame_rate: f64,
    pub joints: Vec<JointSpec>,
    pub markers: Vec<MarkerSpec>,
    pub n_frames: usize,
    /// Adds a seeded uniform phase to every joint wave.
    pub random_phase: bool,
    pub root_path: RootPath,
    pub seed: u64,
}

impl SynthSpec {
    pub fn skeleton(&self) -> Result<Skeleton> {
        Skeleton::new(
            self.joints.iter().map(|j| j.name.clone()).collect(),
            self.joints.iter().map(|j| j.parent).collect(),
            self.joints.iter().map(|j| Vector3::from(j.offset)).collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MocapError::Shape(format!("synthetic spec: {msg}")));
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return bad("frame_rate must be positive".into());
        }
        self.skeleton()?.validate()?;
        for j in &self.joints {
            let finite = j
                .waves
                .iter()
                .all(|w| w.amplitude.is_finite() && w.frequency.is_finite() && w.phase.is_finite());
            if !finite {
                return bad(format!("joint {} has a non-finite wave", j.name));
            }
        }
        for m in &self.markers {
            if m.joint >= self.joints.len() {
                return bad(format!("marker {} is attached to missing joint {}", m.name, m.joint));
            }
            if Vector3::from(m.offset).norm() == 0.0 || m.offset.iter().any(|v| !v.is_finite()) {
                return bad(format!("marker {} needs a finite nonzero offset", m.name));
            }
            if !(m.jitter >= 0.0 && m.jitter.is_finite()) || !(0.0..1.0).contains(&m.stretch) {
                return bad(format!("marker {} has invalid noise amplitudes", m.name));
            }
        }
        let path = &self.root_path;
        if path.amplitude.iter().chain(&path.base).chain(&path.velocity).any(|v| !v.is_finite()) || !path.frequency.is_finite() {
            return bad("root path must be finite".into());
        }
        Ok(())
    }

    /// Same spec with every marker's noise replaced.
    pub fn with_noise(mut self, jitter: f64, stretch: f64) -> Self {
        for m in &mut self.markers {
            m.jitter = jitter;
            m.stretch = stretch;
        }
        self
    }
}

fn motion_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn marker_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

pub fn synth_motion(spec: &SynthSpec) -> Result<(Skeleton, Motion)> {
    spec.validate()?;
    let skeleton = spec.skeleton()?;
    let mut rng = motion_rng(spec.seed);
    let phases: Vec<[f64; 3]> = spec
        .joints
        .iter()
        .map(|_| {
            let mut p = [0.0; 3];
            if spec.random_phase {
                for v in &mut p {
                    *v = rng.gen_range(0.0..2.0 * PI);
                }
            }
            p
        })
        .collect();
    let mut motion = Motion::identity(spec.n_frames, spec.joints.len());
    let fr = spec.frame_rate;
    for t in 0..spec.n_frames {
        let tf = t as f64;
        for (j, joint) in spec.joints.iter().enumerate() {
            let angles = [0, 1, 2].map(|a| joint.waves[a].at(tf, fr, phases[j][a]));
            motion.set_rotation(t, j, from_euler_zxy(angles));
        }
        let path = &spec.root_path;
        let s = (2.0 * PI * path.frequency * tf / fr).sin();
        motion.root_translation[t] =
            Vector3::from(path.base) + Vector3::from(path.velocity) * tf + Vector3::from(path.amplitude) * s;
    }
    Ok((skeleton, motion))
}

/// Marker trajectories `p = x_j + G_j · (offset · (1 + stretch·u)) + jitter·v`
/// with `u`, `v` uniform in `[−1, 1]`, and the rest-pose layout.
pub fn attach_markers(skeleton: &Skeleton, motion: &Motion, spec: &SynthSpec) -> Result<(MarkerSequence, MarkerLayout)> {
    if let Some(m) = spec.markers.iter().find(|m| m.joint >= skeleton.n_joints()) {
        return Err(MocapError::Shape(format!("marker {} is attached to missing joint {}", m.name, m.joint)));
    }
    let mut seq = MarkerSequence::new(
        spec.frame_rate,
        spec.markers.iter().map(|m| m.name.clone()).collect(),
        spec.markers.iter().map(|m| m.label).collect(),
        motion.n_frames(),
    );
    let pos = forward_kinematics(motion, skeleton);
    let rot = global_rotations(motion, skeleton);
    let mut rng = marker_rng(spec.seed);
    for t in 0..motion.n_frames() {
        for (k, m) in spec.markers.iter().enumerate() {
            let mut offset = Vector3::from(m.offset);
            if m.stretch > 0.0 {
                offset *= 1.0 + m.stretch * rng.gen_range(-1.0..=1.0);
            }
            let mut p = pos[t][m.joint] + rot[t][m.joint] * offset;
            if m.jitter > 0.0 {
                for c in 0..3 {
                    p[c] += m.jitter * rng.gen_range(-1.0..=1.0);
                }
            }
            seq.set_position(t, k, p);
        }
    }
    let rest = forward_kinematics(&Motion::identity(1, skeleton.n_joints()), skeleton);
    let layout = MarkerLayout {
        tpose_joint_positions: rest[0].iter().map(|p| [p.x, p.y, p.z]).collect(),
        tpose_marker_positions: spec
            .markers
            .iter()
            .map(|m| {
                let p = rest[0][m.joint] + Vector3::from(m.offset);
                [p.x, p.y, p.z]
            })
            .collect(),
    };
    Ok((seq, layout))
}

/// Motion, marker sequence and layout for a spec.
pub fn synth_sequence(spec: &SynthSpec) -> Result<(Skeleton, Motion, MarkerSequence, MarkerLayout)> {
    let (skeleton, motion) = synth_motion(spec)?;
    let (seq, layout) = attach_markers(&skeleton, &motion, spec)?;
    Ok((skeleton, motion, seq, layout))
}

const PATTERN: [[f64; 3]; 7] = [
    [1.0, 0.0, 0.3],
    [-0.8, 0.3, 0.2],
    [0.1, 1.0, -0.4],
    [0.3, -0.9, 0.5],
    [-0.2, 0.2, 1.0],
    [0.5, 0.1, -1.0],
    [0.7, 0.7, 0.7],
];

struct JointRow {
    name: &'static str,
    parent: Option<usize>,
    offset: [f64; 3],
    amplitudes: [f64; 3],
    frequency: f64,
    /// Center of the joint's marker cluster, cm from the joint.
    center: [f64; 3],
    radius: f64,
    labels: &'static [PartLabel],
}

fn build_spec(rows: &[JointRow], root_path: RootPath, n_frames: usize, seed: u64) -> SynthSpec {
    let joints = rows
        .iter()
        .map(|r| JointSpec {
            name: r.name.to_string(),
            offset: r.offset,
            parent: r.parent,
            waves: [0, 1, 2].map(|a| Wave::new(r.amplitudes[a], r.frequency)),
        })
        .collect();
    let mut markers = Vec::new();
    for (j, r) in rows.iter().enumerate() {
        for (i, &label) in r.labels.iter().enumerate() {
            let offset = [0, 1, 2].map(|c| r.center[c] + r.radius * PATTERN[i][c]);
            markers.push(MarkerSpec {
                joint: j,
                jitter: 0.0,
                label,
                name: format!("{}_{i}", r.name),
                offset,
                stretch: 0.0,
            });
        }
    }
    SynthSpec {
        frame_rate: 60.0,
        joints,
        markers,
        n_frames,
        random_phase: true,
        root_path,
        seed,
    }
}

/// 15 joints and 40 markers; the first three pelvis markers are the waist
/// references and the pelvis carries seven markers in total.
pub fn default_body_spec(n_frames: usize, seed: u64) -> SynthSpec {
    use PartLabel::{Body as B, WaistRef as W};
    let row = |name, parent, offset, amplitudes, frequency, center, radius, labels| JointRow {
        name,
        parent,
        offset,
        amplitudes,
        frequency,
        center,
        radius,
        labels,
    };
    let rows = [
        row("hips", None, [0.0, 0.0, 0.0], [5.0, 5.0, 30.0], 0.25, [0.0, 0.0, 0.0], 8.0, &[W, W, W, B, B, B, B][..]),
        row("spine", Some(0), [0.0, 10.0, 0.0], [8.0, 8.0, 10.0], 0.4, [0.0, 6.0, -8.0], 3.0, &[B][..]),
        row("spine1", Some(1), [0.0, 12.0, 0.0], [5.0, 5.0, 8.0], 0.4, [0.0, 6.0, -8.0], 3.0, &[B][..]),
        row("spine2", Some(2), [0.0, 12.0, 0.0], [5.0, 5.0, 8.0], 0.4, [0.0, 8.0, 0.0], 9.0, &[B; 6][..]),
        row("head", Some(3), [0.0, 22.0, 0.0], [10.0, 15.0, 20.0], 0.5, [0.0, 10.0, 0.0], 7.0, &[B; 3][..]),
        row("l_shoulder", Some(3), [18.0, 6.0, 0.0], [30.0, 20.0, 20.0], 0.6, [14.0, 0.0, 0.0], 4.0, &[B; 2][..]),
        row("l_elbow", Some(5), [28.0, 0.0, 0.0], [10.0, 10.0, 50.0], 0.7, [12.0, 0.0, 0.0], 4.0, &[B; 2][..]),
        row("l_wrist", Some(6), [25.0, 0.0, 0.0], [20.0, 20.0, 20.0], 0.9, [6.0, 0.0, 0.0], 3.0, &[B; 3][..]),
        row("r_shoulder", Some(3), [-18.0, 6.0, 0.0], [30.0, 20.0, 20.0], 0.55, [-14.0, 0.0, 0.0], 4.0, &[B; 2][..]),
        row("r_elbow", Some(8), [-28.0, 0.0, 0.0], [10.0, 10.0, 50.0], 0.65, [-12.0, 0.0, 0.0], 4.0, &[B; 2][..]),
        row("r_wrist", Some(9), [-25.0, 0.0, 0.0], [20.0, 20.0, 20.0], 0.85, [-6.0, 0.0, 0.0], 3.0, &[B; 3][..]),
        row("l_upleg", Some(0), [9.0, -8.0, 0.0], [10.0, 35.0, 5.0], 0.5, [0.0, -21.0, 0.0], 5.0, &[B; 2][..]),
        row("l_knee", Some(11), [0.0, -42.0, 0.0], [0.0, 40.0, 0.0], 0.5, [0.0, -20.0, 0.0], 5.0, &[B; 2][..]),
        row("r_upleg", Some(0), [-9.0, -8.0, 0.0], [10.0, 35.0, 5.0], 0.45, [0.0, -21.0, 0.0], 5.0, &[B; 2][..]),
        row("r_knee", Some(13), [0.0, -42.0, 0.0], [0.0, 40.0, 0.0], 0.45, [0.0, -20.0, 0.0], 5.0, &[B; 2][..]),
    ];
    let root_path = RootPath {
        amplitude: [5.0, 2.0, 5.0],
        base: [0.0, 95.0, 0.0],
        frequency: 0.3,
        velocity: [0.0, 0.0, 0.5],
    };
    build_spec(&rows, root_path, n_frames, seed)
}

/// Left hand: 16 joints (wrist plus three per finger) and 19 markers, three
/// of them wrist references.
pub fn default_hand_spec(n_frames: usize, seed: u64) -> SynthSpec {
    use PartLabel::{LeftHand as H, WristRefLeft as R};
    let mut rows = vec![JointRow {
        name: "wrist",
        parent: None,
        offset: [0.0, 0.0, 0.0],
        amplitudes: [20.0, 20.0, 20.0],
        frequency: 0.3,
        center: [3.0, 0.0, 0.0],
        radius: 2.5,
        labels: &[R, R, R, H],
    }];
    let fingers: [(&str, [f64; 3], f64); 5] = [
        ("thumb", [3.0, -1.0, 3.0], 3.0),
        ("index", [9.0, 0.0, 2.0], 3.5),
        ("middle", [9.5, 0.0, 0.0], 3.8),
        ("ring", [9.0, 0.0, -2.0], 3.4),
        ("pinky", [8.0, 0.0, -4.0], 2.8),
    ];
    const NAMES: [[&str; 3]; 5] = [
        ["thumb1", "thumb2", "thumb3"],
        ["index1", "index2", "index3"],
        ["middle1", "middle2", "middle3"],
        ["ring1", "ring2", "ring3"],
        ["pinky1", "pinky2", "pinky3"],
    ];
    for (f, (_, base, len)) in fingers.iter().enumerate() {
        for s in 0..3 {
            let parent = if s == 0 { 0 } else { rows.len() - 1 };
            let offset = if s == 0 { *base } else { [if s == 1 { *len } else { len * 0.7 }, 0.0, 0.0] };
            let bone = len * 0.5;
            rows.push(JointRow {
                name: NAMES[f][s],
                parent: Some(parent),
                offset,
                amplitudes: [30.0 - 5.0 * s as f64, 5.0, 5.0],
                frequency: 0.6 + 0.1 * f as f64,
                center: [bone, 0.8, 0.0],
                radius: 0.3,
                labels: &[H],
            });
        }
    }
    let root_path = RootPath {
        amplitude: [10.0, 5.0, 10.0],
        base: [45.0, 110.0, 0.0],
        frequency: 0.2,
        velocity: [0.0, 0.0, 0.0],
    };
    build_spec(&rows, root_path, n_frames, seed)
}

/// Which entries of a corrupted sequence were hidden or shifted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionMask {
    pub occluded: Vec<Vec<u8>>,
    pub shifted: Vec<Vec<u8>>,
}

impl CorruptionMask {
    pub fn occluded(&self) -> Result<MarkerMask> {
        MarkerMask::from_rows(&self.occluded)
    }

    pub fn shifted(&self) -> Result<MarkerMask> {
        MarkerMask::from_rows(&self.shifted)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &serde_json::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&read_file(path)?).map_err(|source| MocapError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Hides gaps drawn from `stats` and shifts visible entries.
pub fn corrupt(clean: &MarkerSequence, stats: &OcclusionStats, config: &CorruptionConfig, seed: u64) -> Result<(MarkerSequence, CorruptionMask)> {
    config.validate()?;
    let mut seq = clean.clone();
    if config.p_occ > 0.0 {
        let counts = gap_counts(stats, config.p_occ, clean.n_frames() * clean.n_markers())?;
        seq = place_gaps(&seq, &counts, seed)?.0;
    }
    let (seq, shifted) = apply_shifts(&seq, config, seed.wrapping_add(1))?;
    let mut occluded = MarkerMask::new(clean.n_frames(), clean.n_markers());
    for t in 0..clean.n_frames() {
        for k in 0..clean.n_markers() {
            occluded.set(t, k, clean.is_visible(t, k) && !seq.is_visible(t, k));
        }
    }
    Ok((seq, CorruptionMask { occluded: occluded.to_rows(), shifted: shifted.to_rows() }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub clean: String,
    pub corrupted: String,
    pub corruption_seed: u64,
    pub layout: String,
    pub mask: String,
    pub motion: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub corruption: CorruptionConfig,
    pub sequences: Vec<ManifestEntry>,
    pub spec: SynthSpec,
    pub stats: OcclusionStats,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&read_file(path)?).map_err(|source| MocapError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Writes `n_sequences` paired clean/corrupted sequences plus motion,
/// layout and mask files, and `manifest.json`. Sequence `i` uses motion seed
/// `spec.seed + i` and corruption seed `corruption.seed + 2i`.
pub fn generate_dataset(
    spec: &SynthSpec,
    n_sequences: usize,
    corruption: &CorruptionConfig,
    stats: &OcclusionStats,
    out_dir: &Path,
) -> Result<Manifest> {
    spec.validate()?;
    corruption.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| MocapError::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    let mut entries = Vec::with_capacity(n_sequences);
    for i in 0..n_sequences {
        let seed = spec.seed.wrapping_add(i as u64);
        let corruption_seed = corruption.seed.wrapping_add(2 * i as u64);
        let local = SynthSpec { seed, ..spec.clone() };
        let (skeleton, motion, clean, layout) = synth_sequence(&local)?;
        let (corrupted, mask) = corrupt(&clean, stats, corruption, corruption_seed)?;
        let entry = ManifestEntry {
            clean: format!("seq_{i:03}_clean.json"),
            corrupted: format!("seq_{i:03}_corrupted.json"),
            corruption_seed,
            layout: format!("seq_{i:03}_layout.json"),
            mask: format!("seq_{i:03}_mask.json"),
            motion: format!("seq_{i:03}_motion.json"),
            seed,
        };
        save_sequence(&clean, &out_dir.join(&entry.clean))?;
        save_sequence(&corrupted, &out_dir.join(&entry.corrupted))?;
        layout.save(&out_dir.join(&entry.layout))?;
        mask.save(&out_dir.join(&entry.mask))?;
        save_motion(&out_dir.join(&entry.motion), &skeleton, &motion, spec.frame_rate)?;
        entries.push(entry);
    }
    let manifest = Manifest {
        corruption: corruption.clone(),
        sequences: entries,
        spec: spec.clone(),
        stats: stats.clone(),
    };
    write_file(&out_dir.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::locality::{pairwise_distance_stats, select_neighbors};
    use crate::outlier::{detect_outliers, ThresholdPolicy};
    use crate::rotation::{geodesic_angle, rot_z};
    use nalgebra::Matrix3;

    fn one_joint(waves: [Wave; 3]) -> SynthSpec {
        SynthSpec {
            frame_rate: 60.0,
            joints: vec![JointSpec {
                name: "root".into(),
                offset: [0.0; 3],
                parent: None,
                waves,
            }],
            markers: vec![MarkerSpec {
                joint: 0,
                jitter: 0.0,
                label: PartLabel::Body,
                name: "m".into(),
                offset: [1.0, 0.0, 0.0],
                stretch: 0.0,
            }],
            n_frames: 31,
            random_phase: false,
            root_path: RootPath::default(),
            seed: 3,
        }
    }

    #[test]
    fn default_specs_have_stated_sizes() {
        let body = default_body_spec(10, 0);
        assert_eq!((body.joints.len(), body.markers.len()), (15, 40));
        body.validate().unwrap();
        let hand = default_hand_spec(10, 0);
        assert_eq!((hand.joints.len(), hand.markers.len()), (16, 19));
        hand.validate().unwrap();
    }

    #[test]
    fn zero_amplitude_gives_identity() {
        let (_, motion) = synth_motion(&one_joint([Wave::default(); 3])).unwrap();
        assert!(motion.rotations.iter().all(|r| *r == Matrix3::identity()));
    }

    #[test]
    fn quarter_period_reaches_amplitude() {
        // 1.5 Hz at 60 fps: a quarter period is frame 10.
        let (_, motion) = synth_motion(&one_joint([Wave::new(30.0, 1.5), Wave::default(), Wave::default()])).unwrap();
        let angle = geodesic_angle(&Matrix3::identity(), motion.rotation(10, 0));
        assert!((angle - 30.0).abs() < 1e-9);
        assert!((motion.rotation(10, 0) - rot_z(30.0)).abs().max() < 1e-12);
    }

    #[test]
    fn same_seed_same_motion() {
        let spec = default_body_spec(20, 11);
        assert_eq!(synth_sequence(&spec).unwrap(), synth_sequence(&spec).unwrap());
        let other = SynthSpec { seed: 12, ..spec.clone() };
        assert_ne!(synth_motion(&spec).unwrap().1, synth_motion(&other).unwrap().1);
    }

    #[test]
    fn identity_motion_keeps_rest_pose() {
        let spec = SynthSpec { random_phase: false, ..default_body_spec(5, 0) };
        let skeleton = spec.skeleton().unwrap();
        let (seq, layout) = attach_markers(&skeleton, &Motion::identity(5, 15), &spec).unwrap();
        for t in 0..5 {
            for k in 0..40 {
                assert_eq!(seq.position(t, k), layout.marker(k));
                assert!(seq.is_visible(t, k));
            }
        }
    }

    #[test]
    fn rotated_joint_moves_marker() {
        let spec = one_joint([Wave::default(); 3]);
        let skeleton = spec.skeleton().unwrap();
        let mut motion = Motion::identity(1, 1);
        motion.set_rotation(0, 0, rot_z(90.0));
        motion.root_translation[0] = Vector3::new(2.0, 3.0, 4.0);
        let (seq, _) = attach_markers(&skeleton, &motion, &spec).unwrap();
        assert!((seq.position(0, 0) - Vector3::new(2.0, 4.0, 4.0)).norm() < 1e-12);
    }

    #[test]
    fn markers_match_a_recursive_fk_oracle() {
        let spec = default_body_spec(12, 5);
        let (skeleton, motion, seq, _) = synth_sequence(&spec).unwrap();
        // Independent oracle: walk each joint's ancestor chain from the root.
        fn chain(skeleton: &Skeleton, j: usize) -> Vec<usize> {
            let mut c = vec![j];
            while let Some(p) = skeleton.parents[*c.last().unwrap()] {
                c.push(p);
            }
            c.reverse();
            c
        }
        for t in 0..12 {
            for (k, m) in spec.markers.iter().enumerate() {
                let mut r = Matrix3::identity();
                let mut x = motion.root_translation[t];
                for (n, &j) in chain(&skeleton, m.joint).iter().enumerate() {
                    if n > 0 {
                        x += r * skeleton.offsets[j];
                    }
                    r *= motion.rotation(t, j);
                }
                let want = x + r * Vector3::from(m.offset);
                assert!((seq.position(t, k) - want).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn rigid_markers_pick_their_cluster() {
        let (_, _, seq, _) = synth_sequence(&default_body_spec(120, 2)).unwrap();
        let table = select_neighbors(&pairwise_distance_stats(&seq), 6, &seq.part_labels).unwrap();
        // The seven pelvis markers are mutually rigid.
        for i in 0..7 {
            let mut got = table.neighbors[i].clone();
            got.sort();
            assert_eq!(got, (0..7).filter(|&j| j != i).collect::<Vec<_>>());
            assert!(table.variances[i].iter().all(|v| v.unwrap() < 1e-9));
        }
    }

    #[test]
    fn clean_data_has_no_outliers() {
        for spec in [default_body_spec(600, 4), default_hand_spec(600, 4)] {
            let (_, _, seq, _) = synth_sequence(&spec).unwrap();
            assert!(detect_outliers(&seq, ThresholdPolicy::default(), 2).is_empty());
        }
    }

    #[test]
    fn stretch_keeps_offsets_within_bounds() {
        let spec = default_body_spec(50, 1).with_noise(0.0, 0.01);
        let (skeleton, motion, seq, _) = synth_sequence(&spec).unwrap();
        let pos = forward_kinematics(&motion, &skeleton);
        for t in 0..50 {
            for (k, m) in spec.markers.iter().enumerate() {
                let ratio = (seq.position(t, k) - pos[t][m.joint]).norm() / Vector3::from(m.offset).norm();
                assert!((ratio - 1.0).abs() <= 0.01 + 1e-12);
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = one_joint([Wave::new(f64::NAN, 1.0), Wave::default(), Wave::default()]);
        assert!(spec.validate().is_err());
        spec = one_joint([Wave::default(); 3]);
        spec.markers[0].jitter = -1.0;
        assert!(spec.validate().is_err());
        spec.markers[0].jitter = 0.0;
        spec.markers[0].joint = 4;
        assert!(synth_motion(&spec).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = default_body_spec(200, 7);
        let stats = OcclusionStats::heavy_tailed(40, 30);
        let cfg = CorruptionConfig { seed: 3, ..CorruptionConfig::default() };

        let empty = generate_dataset(&spec, 0, &cfg, &stats, &dir.path().join("none")).unwrap();
        assert!(empty.sequences.is_empty());

        let a = generate_dataset(&spec, 2, &cfg, &stats, &dir.path().join("a")).unwrap();
        let b = generate_dataset(&spec, 2, &cfg, &stats, &dir.path().join("b")).unwrap();
        assert_eq!(a, b);
        for e in &a.sequences {
            for f in [&e.clean, &e.corrupted, &e.mask, &e.motion, &e.layout] {
                let x = std::fs::read(dir.path().join("a").join(f)).unwrap();
                let y = std::fs::read(dir.path().join("b").join(f)).unwrap();
                assert_eq!(x, y);
            }
        }
        let loaded = Manifest::load(&dir.path().join("a/manifest.json")).unwrap();
        assert_eq!(loaded, a);

        let mask = CorruptionMask::load(&dir.path().join("a").join(&a.sequences[0].mask)).unwrap();
        let occluded = mask.occluded().unwrap().count() as f64 / (200.0 * 40.0);
        let deficit = (1..=30).map(|l| l as f64).sum::<f64>() * 40.0 / (200.0 * 40.0);
        assert!(occluded <= 0.05 + 1e-12 && occluded >= 0.05 - deficit);
    }
}
