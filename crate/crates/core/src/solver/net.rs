//! Two-branch solving network and its three-term loss.
//!
//! Per frame, marker features pass through a marker-graph convolution stack.
//! A global branch (dense plus residual blocks) summarizes them into one
//! vector; a local branch runs convolutions over the combined marker, joint
//! and global-node graph. Each joint node receives its local feature
//! concatenated with the global vector, and a joint-graph stack emits 12
//! values per node: a row-major rotation and an offset. The global node's
//! first three values are the root translation.

use std::path::Path;

use nalgebra::Vector3;
use nnkit::{adam_step, leaky_relu, AdamConfig, AdamState, GraphConv, Grads, Linear, ParamFile, ParamStore, ResidualBlock, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::graph::HeteroGraph;
use crate::error::{read_file, write_file, MocapError, Result};
use crate::rotation::to_row_major;
use crate::sequence::MarkerSequence;
use crate::skeleton::{forward_kinematics, Motion, Skeleton};

const MODEL_FORMAT: &str = "mocap-solver";
const MODEL_VERSION: u32 = 1;

/// Values emitted per joint-graph node.
pub const NODE_OUTPUTS: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub fk: f64,
    pub offset: f64,
    pub rotation: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            fk: 0.1,
            offset: 1.0,
            rotation: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub global_blocks: usize,
    pub global_width: usize,
    pub joint_layers: usize,
    pub joint_width: usize,
    pub local_layers: usize,
    pub local_width: usize,
    /// When false the marker stack is replaced by per-marker residual
    /// blocks with no exchange between markers.
    pub marker_conv: bool,
    pub marker_layers: usize,
    pub marker_width: usize,
    /// Centimeters per network unit for positions, offsets and translation.
    pub position_scale: f64,
    pub weights: LossWeights,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            global_blocks: 2,
            global_width: 256,
            joint_layers: 3,
            joint_width: 64,
            local_layers: 2,
            local_width: 64,
            marker_conv: true,
            marker_layers: 3,
            marker_width: 64,
            position_scale: 50.0,
            weights: LossWeights::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [self.global_width, self.joint_width, self.local_width, self.marker_width];
        let layers = [self.joint_layers, self.local_layers, self.marker_layers];
        let w = &self.weights;
        if widths.contains(&0) || layers.contains(&0) {
            return Err(MocapError::Shape("solver widths and layer counts must be positive".into()));
        }
        if !(self.position_scale > 0.0 && self.position_scale.is_finite()) {
            return Err(MocapError::Shape("position_scale must be positive".into()));
        }
        if [w.fk, w.offset, w.rotation].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(MocapError::Shape("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverTrainConfig {
    pub batch_size: usize,
    /// Starting rate, annealed along a cosine to `min_learning_rate`.
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub seed: u64,
    pub steps: usize,
}

impl Default for SolverTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-3,
            min_learning_rate: 1e-5,
            seed: 0,
            steps: 1000,
        }
    }
}

/// Markers, motion and skeleton expressed in the same local frame.
#[derive(Clone, Debug)]
pub struct SolverSample {
    pub markers: MarkerSequence,
    pub motion: Motion,
    pub skeleton: Skeleton,
}

/// Raw network output for one frame, lengths in centimeters.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSolution {
    pub offsets: Vec<Vector3<f64>>,
    /// Row-major, not yet orthonormal.
    pub rotations: Vec<[f64; 9]>,
    pub translation: Vector3<f64>,
}

#[derive(Clone, Debug)]
enum MarkerStage {
    Conv(Vec<GraphConv>),
    Residual { input: GraphConv, blocks: Vec<(GraphConv, GraphConv)> },
}

#[derive(Clone, Debug)]
pub struct SolverNet {
    pub config: SolverConfig,
    graph: HeteroGraph,
    store: ParamStore,
    marker_stage: MarkerStage,
    global_in: Linear,
    global_blocks: Vec<ResidualBlock>,
    local: Vec<GraphConv>,
    joint: Vec<GraphConv>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    config: SolverConfig,
    format: String,
    graph: HeteroGraph,
    params: ParamFile,
    version: u32,
}

/// Network-unit inputs and targets for a batch of frames.
#[derive(Clone, Debug)]
pub struct SolverBatch {
    /// `[B, 4·|M|]`.
    pub features: Tensor,
    /// `[B, 9·|J| + 3]`: rotations then translation.
    pub pose: Tensor,
    /// `[B, 3·|J|]`.
    pub offsets: Tensor,
    /// `[B, 3·|J|]` global joint positions.
    pub positions: Tensor,
}

impl SolverNet {
    /// The final joint layer starts at zero, so a fresh network outputs zeros.
    pub fn new(graph: HeteroGraph, config: SolverConfig, seed: u64) -> Result<Self> {
        graph.validate()?;
        config.validate()?;
        let mut rng = nnkit::seeded_rng(seed);
        let mut store = ParamStore::new();
        let (m, j) = (graph.n_markers, graph.n_joints());
        let c = config.marker_width;
        let marker_stage = if config.marker_conv {
            let mut layers = Vec::with_capacity(config.marker_layers);
            for i in 0..config.marker_layers {
                let inw = if i == 0 { 4 } else { c };
                layers.push(GraphConv::new(&mut store, &format!("solver.marker.{i}"), m, &graph.marker_edges, inw, c, &mut rng)?);
            }
            MarkerStage::Conv(layers)
        } else {
            let input = GraphConv::new(&mut store, "solver.marker.in", m, &[], 4, c, &mut rng)?;
            let mut blocks = Vec::new();
            for i in 1..config.marker_layers {
                let a = GraphConv::new(&mut store, &format!("solver.marker.{i}.fc1"), m, &[], c, c, &mut rng)?;
                let b = GraphConv::new(&mut store, &format!("solver.marker.{i}.fc2"), m, &[], c, c, &mut rng)?;
                blocks.push((a, b));
            }
            MarkerStage::Residual { input, blocks }
        };
        let global_in = Linear::new(&mut store, "solver.global.in", m * c, config.global_width, true, &mut rng);
        let global_blocks = (0..config.global_blocks)
            .map(|i| ResidualBlock::new(&mut store, &format!("solver.global.{i}"), config.global_width, &mut rng))
            .collect();
        let union = graph.union_edges();
        let mut local = Vec::with_capacity(config.local_layers);
        for i in 0..config.local_layers {
            let inw = if i == 0 { c } else { config.local_width };
            local.push(GraphConv::new(&mut store, &format!("solver.local.{i}"), m + j + 1, &union, inw, config.local_width, &mut rng)?);
        }
        let mut joint = Vec::with_capacity(config.joint_layers);
        for i in 0..config.joint_layers {
            let inw = if i == 0 { config.local_width + config.global_width } else { config.joint_width };
            let outw = if i + 1 == config.joint_layers { NODE_OUTPUTS } else { config.joint_width };
            joint.push(GraphConv::new(&mut store, &format!("solver.joint.{i}"), j + 1, &graph.joint_edges, inw, outw, &mut rng)?);
        }
        if let Some(last) = joint.last() {
            store.get_mut(last.weight).fill(0.0);
        }
        Ok(Self {
            config,
            graph,
            store,
            marker_stage,
            global_in,
            global_blocks,
            local,
            joint,
        })
    }

    pub fn graph(&self) -> &HeteroGraph {
        &self.graph
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Raw outputs `[B, 12·(|J| + 1)]`.
    fn forward(&self, tape: &mut Tape<'_>, features: &Tensor) -> Result<Var> {
        let rows = features.rows();
        let (m, j) = (self.graph.n_markers, self.graph.n_joints());
        let x = tape.input(features.clone());
        let h = match &self.marker_stage {
            MarkerStage::Conv(layers) => {
                let mut h = x;
                for layer in layers {
                    let y = layer.forward(tape, h)?;
                    h = leaky_relu(tape, y);
                }
                h
            }
            MarkerStage::Residual { input, blocks } => {
                let y = input.forward(tape, x)?;
                let mut h = leaky_relu(tape, y);
                for (a, b) in blocks {
                    let r = a.forward(tape, h)?;
                    let r = leaky_relu(tape, r);
                    let r = b.forward(tape, r)?;
                    h = tape.add(h, r)?;
                }
                h
            }
        };

        let g = self.global_in.forward(tape, h)?;
        let mut g = leaky_relu(tape, g);
        for block in &self.global_blocks {
            g = block.forward(tape, g)?;
        }

        let zeros = tape.input(Tensor::zeros(&[rows, (j + 1) * self.config.marker_width]));
        let mut u = tape.concat_cols(&[h, zeros])?;
        for layer in &self.local {
            let y = layer.forward(tape, u)?;
            u = leaky_relu(tape, y);
        }
        let lw = self.config.local_width;
        let mut parts = Vec::with_capacity(2 * (j + 1));
        for q in 0..=j {
            parts.push(tape.slice_cols(u, (m + q) * lw, lw)?);
            parts.push(g);
        }
        let mut v = tape.concat_cols(&parts)?;
        for (i, layer) in self.joint.iter().enumerate() {
            v = layer.forward(tape, v)?;
            if i + 1 < self.joint.len() {
                v = leaky_relu(tape, v);
            }
        }
        Ok(v)
    }

    /// `[B, 4·|M|]`: scaled local position and visible flag per marker.
    /// Hidden markers contribute zeros.
    pub fn features(&self, seq: &MarkerSequence, frames: &[usize]) -> Result<Tensor> {
        let m = self.graph.n_markers;
        if seq.n_markers() != m {
            return Err(MocapError::Shape(format!("solver expects {m} markers, sequence has {}", seq.n_markers())));
        }
        let inv = 1.0 / self.config.position_scale;
        let mut data = Vec::with_capacity(frames.len() * m * 4);
        for &t in frames {
            for k in 0..m {
                let p = seq.position(t, k);
                if seq.is_visible(t, k) && p.iter().all(|v| v.is_finite()) {
                    data.extend_from_slice(&[p.x * inv, p.y * inv, p.z * inv, 1.0]);
                } else {
                    data.extend_from_slice(&[0.0; 4]);
                }
            }
        }
        Ok(Tensor::from_vec(&[frames.len(), m * 4], data)?)
    }

    fn decode(&self, out: &Tensor) -> Vec<FrameSolution> {
        let j = self.graph.n_joints();
        let s = self.config.position_scale;
        (0..out.rows())
            .map(|r| {
                let row = out.row(r);
                let node = |q: usize| &row[q * NODE_OUTPUTS..(q + 1) * NODE_OUTPUTS];
                FrameSolution {
                    offsets: (0..j).map(|q| Vector3::new(node(q)[9], node(q)[10], node(q)[11]) * s).collect(),
                    rotations: (0..j).map(|q| node(q)[..9].try_into().expect("nine values")).collect(),
                    translation: Vector3::new(node(j)[0], node(j)[1], node(j)[2]) * s,
                }
            })
            .collect()
    }

    /// Raw outputs for one frame of local marker positions.
    pub fn solve_frame(&self, positions: &[Vector3<f64>], visible: &[bool]) -> Result<FrameSolution> {
        let m = self.graph.n_markers;
        if positions.len() != m || visible.len() != m {
            return Err(MocapError::Shape(format!("solver expects {m} markers, got {} positions and {} flags", positions.len(), visible.len())));
        }
        let mut seq = MarkerSequence::new(1.0, (0..m).map(|k| k.to_string()).collect(), vec![crate::PartLabel::Body; m], 1);
        for k in 0..m {
            seq.set_position(0, k, positions[k]);
            seq.set_visible(0, k, visible[k]);
        }
        Ok(self.solve_frames(&seq)?.remove(0))
    }

    /// Raw outputs for every frame of a local sequence.
    pub fn solve_frames(&self, seq: &MarkerSequence) -> Result<Vec<FrameSolution>> {
        const CHUNK: usize = 256;
        let mut out = Vec::with_capacity(seq.n_frames());
        let frames: Vec<usize> = (0..seq.n_frames()).collect();
        for chunk in frames.chunks(CHUNK) {
            let features = self.features(seq, chunk)?;
            let mut tape = Tape::new(&self.store);
            let y = self.forward(&mut tape, &features)?;
            out.extend(self.decode(tape.value(y)));
        }
        Ok(out)
    }

    fn check_sample(&self, sample: &SolverSample) -> Result<()> {
        let (m, j) = (self.graph.n_markers, self.graph.n_joints());
        if sample.markers.n_markers() != m
            || sample.motion.n_joints() != j
            || sample.skeleton.parents != self.graph.parents
            || sample.motion.n_frames() != sample.markers.n_frames()
        {
            return Err(MocapError::Shape("solver sample does not match the network graph".into()));
        }
        Ok(())
    }

    /// Gathers `(sample, frame)` pairs into network units.
    pub fn batch(&self, samples: &[SolverSample], picks: &[(usize, usize)]) -> Result<SolverBatch> {
        for s in samples {
            self.check_sample(s)?;
        }
        let j = self.graph.n_joints();
        let inv = 1.0 / self.config.position_scale;
        let rows = picks.len();
        let mut features = Vec::with_capacity(rows * 4 * self.graph.n_markers);
        let mut pose = Vec::with_capacity(rows * (9 * j + 3));
        let mut offsets = Vec::with_capacity(rows * 3 * j);
        let mut positions = Vec::with_capacity(rows * 3 * j);
        let fk: Vec<Vec<Vec<Vector3<f64>>>> = samples.iter().map(|s| forward_kinematics(&s.motion, &s.skeleton)).collect();
        for &(s, t) in picks {
            let sample = &samples[s];
            features.extend_from_slice(self.features(&sample.markers, &[t])?.data());
            for q in 0..j {
                pose.extend_from_slice(&to_row_major(sample.motion.rotation(t, q)));
                offsets.extend((sample.skeleton.offsets[q] * inv).iter());
                positions.extend((fk[s][t][q] * inv).iter());
            }
            pose.extend((sample.motion.root_translation[t] * inv).iter());
        }
        Ok(SolverBatch {
            features: Tensor::from_vec(&[rows, 4 * self.graph.n_markers], features)?,
            pose: Tensor::from_vec(&[rows, 9 * j + 3], pose)?,
            offsets: Tensor::from_vec(&[rows, 3 * j], offsets)?,
            positions: Tensor::from_vec(&[rows, 3 * j], positions)?,
        })
    }

    /// Three-term loss on the tape: rotations with translation, offsets,
    /// and forward-kinematics positions, each a mean absolute error in
    /// network units.
    fn loss(&self, tape: &mut Tape<'_>, batch: &SolverBatch) -> Result<Var> {
        let j = self.graph.n_joints();
        let out = self.forward(tape, &batch.features)?;
        let mut rot = Vec::with_capacity(j);
        let mut off = Vec::with_capacity(j);
        for q in 0..j {
            rot.push(tape.slice_cols(out, q * NODE_OUTPUTS, 9)?);
            off.push(tape.slice_cols(out, q * NODE_OUTPUTS + 9, 3)?);
        }
        let trans = tape.slice_cols(out, j * NODE_OUTPUTS, 3)?;

        let mut pose_parts = rot.clone();
        pose_parts.push(trans);
        let pose = tape.concat_cols(&pose_parts)?;
        let pose_t = tape.input(batch.pose.clone());
        let pose_loss = tape.l1_mean(pose, pose_t)?;

        let offsets = tape.concat_cols(&off)?;
        let off_t = tape.input(batch.offsets.clone());
        let off_loss = tape.l1_mean(offsets, off_t)?;

        let mut global: Vec<Option<Var>> = vec![None; j];
        let mut pos: Vec<Option<Var>> = vec![None; j];
        for q in self.graph.topological_order() {
            match self.graph.parents[q] {
                None => {
                    global[q] = Some(rot[q]);
                    pos[q] = Some(trans);
                }
                Some(p) => {
                    let (gp, xp) = (global[p].expect("parent first"), pos[p].expect("parent first"));
                    let step = tape.rot_apply(gp, off[q])?;
                    pos[q] = Some(tape.add(xp, step)?);
                    global[q] = Some(tape.rot_mul(gp, rot[q])?);
                }
            }
        }
        let pos: Vec<Var> = pos.into_iter().map(|v| v.expect("tree covers all joints")).collect();
        let positions = tape.concat_cols(&pos)?;
        let pos_t = tape.input(batch.positions.clone());
        let fk_loss = tape.l1_mean(positions, pos_t)?;

        let w = &self.config.weights;
        let a = tape.scale(pose_loss, w.rotation);
        let b = tape.scale(off_loss, w.offset);
        let c = tape.scale(fk_loss, w.fk);
        let ab = tape.add(a, b)?;
        Ok(tape.add(ab, c)?)
    }

    pub fn batch_loss(&self, batch: &SolverBatch) -> Result<f64> {
        let mut tape = Tape::new(&self.store);
        let loss = self.loss(&mut tape, batch)?;
        Ok(tape.value(loss).item())
    }

    pub fn loss_and_grads(&self, batch: &SolverBatch) -> Result<(f64, Grads)> {
        let mut tape = Tape::new(&self.store);
        let loss = self.loss(&mut tape, batch)?;
        Ok((tape.value(loss).item(), tape.backward(loss)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile {
            config: self.config.clone(),
            format: MODEL_FORMAT.into(),
            graph: self.graph.clone(),
            params: self.store.to_file(),
            version: MODEL_VERSION,
        };
        write_file(path, &serde_json::to_string(&file)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_file(path)?;
        let file: ModelFile = serde_json::from_str(&text).map_err(|source| MocapError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(MocapError::Shape(format!("{} is not a version {MODEL_VERSION} solver model", path.display())));
        }
        let mut net = Self::new(file.graph, file.config, 0)?;
        net.store.load_file(&file.params)?;
        Ok(net)
    }
}

/// The three-term loss evaluated directly from motions:
/// `λ_M·|Y − Ŷ| + λ_S·|S − Ŝ| + λ_FK·|FK(Y, S) − FK(Ŷ, Ŝ)|`, each a mean
/// absolute error with lengths divided by `position_scale`. `pred_offsets`
/// holds per-frame offset estimates.
pub fn solving_loss(
    pred: &Motion,
    pred_offsets: &[Vec<Vector3<f64>>],
    truth: &Motion,
    truth_skeleton: &Skeleton,
    weights: &LossWeights,
    position_scale: f64,
) -> Result<f64> {
    let (t_len, j) = (truth.n_frames(), truth.n_joints());
    if pred.n_frames() != t_len || pred.n_joints() != j || pred_offsets.len() != t_len || pred_offsets.iter().any(|o| o.len() != j) {
        return Err(MocapError::Shape("predicted and true motions differ in shape".into()));
    }
    let inv = 1.0 / position_scale;
    let truth_pos = forward_kinematics(truth, truth_skeleton);
    let (mut pose, mut off, mut fk) = (0.0, 0.0, 0.0);
    for t in 0..t_len {
        for q in 0..j {
            pose += (pred.rotation(t, q) - truth.rotation(t, q)).abs().sum();
            off += ((pred_offsets[t][q] - truth_skeleton.offsets[q]) * inv).abs().sum();
        }
        pose += ((pred.root_translation[t] - truth.root_translation[t]) * inv).abs().sum();
        let frame_skeleton = Skeleton {
            offsets: pred_offsets[t].clone(),
            ..truth_skeleton.clone()
        };
        let mut single = Motion::identity(1, j);
        single.rotations = (0..j).map(|q| *pred.rotation(t, q)).collect();
        single.root_translation[0] = pred.root_translation[t];
        let p = &forward_kinematics(&single, &frame_skeleton)[0];
        for q in 0..j {
            fk += ((p[q] - truth_pos[t][q]) * inv).abs().sum();
        }
    }
    let n = t_len.max(1) as f64;
    Ok(weights.rotation * pose / (n * (9 * j + 3) as f64)
        + weights.offset * off / (n * (3 * j) as f64)
        + weights.fk * fk / (n * (3 * j) as f64))
}

/// Trains a fresh network with Adam on frame batches drawn from a pool of
/// every `(sample, frame)` pair, reshuffled each epoch from `train.seed`.
/// Returns the per-step loss.
pub fn train_solver(
    samples: &[SolverSample],
    graph: &HeteroGraph,
    config: SolverConfig,
    train: &SolverTrainConfig,
) -> Result<(SolverNet, Vec<f64>)> {
    let mut net = SolverNet::new(graph.clone(), config, train.seed)?;
    let history = continue_solver_training(&mut net, samples, train)?;
    Ok((net, history))
}

pub fn continue_solver_training(net: &mut SolverNet, samples: &[SolverSample], train: &SolverTrainConfig) -> Result<Vec<f64>> {
    if train.batch_size == 0 {
        return Err(MocapError::Shape("batch_size must be positive".into()));
    }
    let mut pool: Vec<(usize, usize)> = Vec::new();
    for (s, sample) in samples.iter().enumerate() {
        net.check_sample(sample)?;
        pool.extend((0..sample.markers.n_frames()).map(|t| (s, t)));
    }
    if pool.is_empty() {
        return Err(MocapError::Shape("solver training needs at least one frame".into()));
    }
    let full = net.batch(samples, &pool)?;
    let gather = |rows: &[usize]| -> Result<SolverBatch> {
        let pick = |t: &Tensor| -> Result<Tensor> {
            let c = t.cols();
            let mut d = Vec::with_capacity(rows.len() * c);
            for &r in rows {
                d.extend_from_slice(t.row(r));
            }
            Ok(Tensor::from_vec(&[rows.len(), c], d)?)
        };
        Ok(SolverBatch {
            features: pick(&full.features)?,
            pose: pick(&full.pose)?,
            offsets: pick(&full.offsets)?,
            positions: pick(&full.positions)?,
        })
    };
    let mut rng = nnkit::seeded_rng(train.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut hyper = AdamConfig::default();
    let mut state = AdamState::new(&net.store);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut cursor = pool.len();
    let mut history = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        if cursor >= pool.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + train.batch_size).min(pool.len());
        let batch = gather(&order[cursor..end])?;
        cursor = end;
        let (loss, grads) = net.loss_and_grads(&batch)?;
        if !loss.is_finite() {
            return Err(MocapError::NonFiniteLoss { step });
        }
        let progress = step as f64 / train.steps.max(1) as f64;
        hyper.learning_rate = train.min_learning_rate
            + 0.5 * (train.learning_rate - train.min_learning_rate) * (1.0 + (std::f64::consts::PI * progress).cos());
        adam_step(&mut net.store, &grads, &mut state, &hyper);
        history.push(loss);
    }
    Ok(history)
}
