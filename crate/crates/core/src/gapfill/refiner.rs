//! Recurrent refinement of gap-filled markers: a marker-graph convolution
//! followed by a bidirectional GRU predicts per-marker offsets, which are
//! added to occluded entries only.

use std::path::Path;

use nalgebra::Vector3;
use nnkit::{adam_step, leaky_relu, AdamConfig, AdamState, BiGru, GraphConv, Grads, Linear, ParamFile, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{read_file, write_file, MocapError, Result};
use crate::sequence::{MarkerMask, MarkerSequence};

const MODEL_FORMAT: &str = "mocap-refiner";
const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinerConfig {
    pub conv_width: usize,
    pub hidden_width: usize,
    /// Centimeters per network unit on both input positions and output offsets.
    pub position_scale: f64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            conv_width: 64,
            hidden_width: 128,
            position_scale: 50.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// One training example, all in the same local frame.
#[derive(Clone, Debug)]
pub struct RefinerSample {
    /// Gap-filled sequence.
    pub input: MarkerSequence,
    pub truth: MarkerSequence,
    /// Entries that were occluded before filling.
    pub mask: MarkerMask,
}

#[derive(Clone, Debug)]
pub struct RefinerModel {
    pub config: RefinerConfig,
    n_markers: usize,
    edges: Vec<(usize, usize)>,
    store: ParamStore,
    conv: GraphConv,
    gru: BiGru,
    head: Linear,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    config: RefinerConfig,
    edges: Vec<(usize, usize)>,
    format: String,
    n_markers: usize,
    params: ParamFile,
    version: u32,
}

impl RefinerModel {
    /// `edges` are marker-graph `(receiver, sender)` pairs. The output head
    /// starts at zero, so a fresh model leaves its input unchanged.
    pub fn new(n_markers: usize, edges: &[(usize, usize)], config: RefinerConfig, seed: u64) -> Result<Self> {
        if n_markers == 0 || config.conv_width == 0 || config.hidden_width == 0 || !(config.position_scale > 0.0) {
            return Err(MocapError::Shape(format!("invalid refiner configuration {config:?} for {n_markers} markers")));
        }
        let mut rng = nnkit::seeded_rng(seed);
        let mut store = ParamStore::new();
        let conv = GraphConv::new(&mut store, "refiner.conv", n_markers, edges, 4, config.conv_width, &mut rng)?;
        let gru = BiGru::new(&mut store, "refiner.gru", n_markers * config.conv_width, config.hidden_width, &mut rng);
        let head = Linear::new(&mut store, "refiner.head", gru.out_width(), n_markers * 3, true, &mut rng);
        store.get_mut(head.weight).fill(0.0);
        Ok(Self {
            config,
            n_markers,
            edges: edges.to_vec(),
            store,
            conv,
            gru,
            head,
        })
    }

    pub fn n_markers(&self) -> usize {
        self.n_markers
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check(&self, seq: &MarkerSequence) -> Result<()> {
        if seq.n_markers() != self.n_markers {
            return Err(MocapError::Shape(format!(
                "refiner expects {} markers, sequence has {}",
                self.n_markers,
                seq.n_markers()
            )));
        }
        Ok(())
    }

    /// `[T, 4·|M|]`: scaled position and a visible flag per marker. Masked
    /// entries get flag 0.
    fn features(&self, seq: &MarkerSequence, mask: &MarkerMask) -> Result<Tensor> {
        let (t_len, m) = (seq.n_frames(), self.n_markers);
        let inv = 1.0 / self.config.position_scale;
        let mut data = Vec::with_capacity(t_len * m * 4);
        for t in 0..t_len {
            for k in 0..m {
                let p = seq.position(t, k);
                let usable = p.iter().all(|v| v.is_finite()) && (seq.is_visible(t, k) || mask.get(t, k));
                let p = if usable { p * inv } else { Vector3::zeros() };
                data.extend_from_slice(&[p.x, p.y, p.z, if mask.get(t, k) || !usable { 0.0 } else { 1.0 }]);
            }
        }
        Ok(Tensor::from_vec(&[t_len, m * 4], data)?)
    }

    /// Offsets in network units, `[T, 3·|M|]`.
    fn forward(&self, tape: &mut Tape<'_>, features: Tensor) -> Result<Var> {
        let x = tape.input(features);
        let h = self.conv.forward(tape, x)?;
        let h = leaky_relu(tape, h);
        let h = self.gru.forward(tape, h)?;
        Ok(self.head.forward(tape, h)?)
    }

    /// Predicted offsets in centimeters, frame-major.
    pub fn predict_offsets(&self, seq: &MarkerSequence, mask: &MarkerMask) -> Result<Vec<Vector3<f64>>> {
        self.check(seq)?;
        let mut tape = Tape::new(&self.store);
        let out = self.forward(&mut tape, self.features(seq, mask)?)?;
        let s = self.config.position_scale;
        Ok(tape.value(out).data().chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2]) * s).collect())
    }

    /// Mean absolute error per masked coordinate, and its gradients.
    pub fn loss_and_grads(&self, sample: &RefinerSample) -> Result<(f64, Grads)> {
        self.check(&sample.input)?;
        let (t_len, m) = (sample.input.n_frames(), self.n_markers);
        if sample.truth.n_frames() != t_len || sample.truth.n_markers() != m || sample.mask.n_frames() != t_len || sample.mask.n_markers() != m {
            return Err(MocapError::Shape("refiner sample parts differ in shape".into()));
        }
        let count = sample.mask.count();
        if count == 0 {
            return Ok((0.0, Grads::zeros_like(&self.store)));
        }
        let mut target = Vec::with_capacity(t_len * m * 3);
        let mut weight = Vec::with_capacity(t_len * m * 3);
        for t in 0..t_len {
            for k in 0..m {
                let on = sample.mask.get(t, k);
                let d = if on { sample.truth.position(t, k) - sample.input.position(t, k) } else { Vector3::zeros() };
                target.extend_from_slice(d.as_slice());
                weight.extend_from_slice(&[if on { 1.0 } else { 0.0 }; 3]);
            }
        }
        let mut tape = Tape::new(&self.store);
        let out = self.forward(&mut tape, self.features(&sample.input, &sample.mask)?)?;
        let off = tape.scale(out, self.config.position_scale);
        let w = tape.input(Tensor::from_vec(&[t_len, m * 3], weight)?);
        let off = tape.mul(off, w)?;
        let target = tape.input(Tensor::from_vec(&[t_len, m * 3], target)?);
        let diff = tape.sub(target, off)?;
        let abs = tape.abs(diff);
        let total = tape.sum(abs);
        let loss = tape.scale(total, 1.0 / (3 * count) as f64);
        let value = tape.value(loss).item();
        Ok((value, tape.backward(loss)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile {
            config: self.config.clone(),
            edges: self.edges.clone(),
            format: MODEL_FORMAT.into(),
            n_markers: self.n_markers,
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
            return Err(MocapError::Shape(format!(
                "{} is not a version {MODEL_VERSION} refiner model",
                path.display()
            )));
        }
        let mut model = Self::new(file.n_markers, &file.edges, file.config, 0)?;
        model.store.load_file(&file.params)?;
        Ok(model)
    }
}

/// Adds predicted offsets to the masked entries; every other entry is copied
/// unchanged.
pub fn refine(seq: &MarkerSequence, mask: &MarkerMask, model: &RefinerModel) -> Result<MarkerSequence> {
    if mask.n_frames() != seq.n_frames() || mask.n_markers() != seq.n_markers() {
        return Err(MocapError::Shape("mask does not match sequence".into()));
    }
    let offsets = model.predict_offsets(seq, mask)?;
    let mut out = seq.clone();
    let m = seq.n_markers();
    for t in 0..seq.n_frames() {
        for k in 0..m {
            if mask.get(t, k) {
                out.set_position(t, k, seq.position(t, k) + offsets[t * m + k]);
            }
        }
    }
    Ok(out)
}

/// Trains a fresh model with Adam and returns it with the per-step loss.
/// Samples are visited in an order reshuffled every epoch from `train.seed`.
pub fn train_refiner(
    samples: &[RefinerSample],
    edges: &[(usize, usize)],
    config: RefinerConfig,
    train: &TrainConfig,
) -> Result<(RefinerModel, Vec<f64>)> {
    let n_markers = samples
        .first()
        .ok_or_else(|| MocapError::Shape("refiner training needs at least one sample".into()))?
        .input
        .n_markers();
    let mut model = RefinerModel::new(n_markers, edges, config, train.seed)?;
    let history = continue_training(&mut model, samples, train)?;
    Ok((model, history))
}

pub(crate) fn continue_training(model: &mut RefinerModel, samples: &[RefinerSample], train: &TrainConfig) -> Result<Vec<f64>> {
    let mut rng = nnkit::seeded_rng(train.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let hyper = AdamConfig {
        learning_rate: train.learning_rate,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&model.store);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        if step % samples.len() == 0 {
            order.shuffle(&mut rng);
        }
        let (loss, grads) = model.loss_and_grads(&samples[order[step % samples.len()]])?;
        if !loss.is_finite() {
            return Err(MocapError::NonFiniteLoss { step });
        }
        adam_step(&mut model.store, &grads, &mut state, &hyper);
        history.push(loss);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::metric_ompe;
    use crate::sequence::PartLabel;

    fn small_model() -> RefinerModel {
        let cfg = RefinerConfig {
            conv_width: 8,
            hidden_width: 12,
            position_scale: 10.0,
        };
        RefinerModel::new(4, &[(0, 1), (1, 0), (2, 3), (3, 2), (1, 2), (2, 1)], cfg, 3).unwrap()
    }

    fn sample(n_frames: usize) -> RefinerSample {
        let mut truth = MarkerSequence::new(60.0, (0..4).map(|i| format!("m{i}")).collect(), vec![PartLabel::Body; 4], n_frames);
        for t in 0..n_frames {
            for k in 0..4 {
                let f = t as f64 * 0.15 + k as f64;
                truth.set_position(t, k, Vector3::new(f.sin() * 8.0, f.cos() * 5.0 + k as f64 * 3.0, (f * 0.5).sin()));
            }
        }
        let mut mask = MarkerMask::new(n_frames, 4);
        let mut input = truth.clone();
        for t in n_frames / 4..n_frames / 2 {
            mask.set(t, 1, true);
            input.set_position(t, 1, truth.position(t, 1) + Vector3::new(1.5, -1.0, 0.5 * (t as f64).sin()));
        }
        for t in n_frames / 2..3 * n_frames / 4 {
            mask.set(t, 3, true);
            input.set_position(t, 3, truth.position(t, 3) + Vector3::new(-0.8, 0.3, 1.2));
        }
        RefinerSample { input, truth, mask }
    }

    #[test]
    fn fresh_model_passes_input_through() {
        let s = sample(20);
        assert_eq!(refine(&s.input, &s.mask, &small_model()).unwrap(), s.input);
    }

    #[test]
    fn visible_entries_are_bit_identical() {
        let mut model = small_model();
        for id in model.store.ids().collect::<Vec<_>>() {
            let t = model.store_mut().get_mut(id);
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += 0.01 * ((i % 7) as f64 - 3.0);
            }
        }
        let s = sample(20);
        let out = refine(&s.input, &s.mask, &model).unwrap();
        let mut changed = 0;
        for t in 0..20 {
            for k in 0..4 {
                if s.mask.get(t, k) {
                    changed += usize::from(out.position(t, k) != s.input.position(t, k));
                } else {
                    assert_eq!(out.position(t, k), s.input.position(t, k));
                }
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn marker_count_mismatch_is_rejected() {
        let s = sample(8);
        let model = RefinerModel::new(3, &[], RefinerConfig::default(), 0).unwrap();
        assert!(refine(&s.input, &s.mask, &model).is_err());
    }

    #[test]
    fn no_occlusion_means_zero_loss_and_no_update() {
        let mut s = sample(12);
        s.mask = MarkerMask::new(12, 4);
        let (model, history) = train_refiner(std::slice::from_ref(&s), &[(0, 1)], small_model().config, &TrainConfig { steps: 5, learning_rate: 1e-2, seed: 3 }).unwrap();
        assert!(history.iter().all(|&l| l == 0.0));
        let fresh = RefinerModel::new(4, &[(0, 1)], small_model().config, 3).unwrap();
        assert_eq!(model.store().to_file(), fresh.store().to_file());
    }

    #[test]
    fn overfits_a_single_fixture() {
        let s = sample(50);
        let train = TrainConfig {
            steps: 500,
            learning_rate: 3e-3,
            seed: 11,
        };
        let (model, history) = train_refiner(std::slice::from_ref(&s), &[(0, 1), (1, 0), (2, 3), (3, 2)], small_model().config, &train).unwrap();
        assert!(history[history.len() - 1] <= 0.1 * history[0], "{} -> {}", history[0], history[history.len() - 1]);
        let out = refine(&s.input, &s.mask, &model).unwrap();
        assert!(metric_ompe(&out, &s.truth, &s.mask).unwrap() < 0.1);
    }

    #[test]
    fn training_is_deterministic() {
        let s = sample(16);
        let train = TrainConfig { steps: 20, learning_rate: 1e-3, seed: 5 };
        let edges = [(0, 1), (1, 0)];
        let (a, ha) = train_refiner(std::slice::from_ref(&s), &edges, small_model().config, &train).unwrap();
        let (b, hb) = train_refiner(std::slice::from_ref(&s), &edges, small_model().config, &train).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a.store().to_file(), b.store().to_file());
    }

    #[test]
    fn model_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("refiner.json");
        let s = sample(16);
        let (model, _) = train_refiner(std::slice::from_ref(&s), &[(0, 1)], small_model().config, &TrainConfig { steps: 3, learning_rate: 1e-2, seed: 1 }).unwrap();
        model.save(&path).unwrap();
        let back = RefinerModel::load(&path).unwrap();
        assert_eq!(back.store().to_file(), model.store().to_file());
        assert_eq!(refine(&s.input, &s.mask, &back).unwrap(), refine(&s.input, &s.mask, &model).unwrap());
    }
}
