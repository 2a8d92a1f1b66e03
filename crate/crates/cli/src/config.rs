use std::path::Path;

use mocap::augment::CorruptionConfig;
use mocap::gapfill::{RefinerConfig, TrainConfig};
use mocap::outlier::ThresholdPolicy;
use mocap::solver::{SolverConfig, SolverTrainConfig};
use mocap::{MarkerSequence, MocapError, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutlierConfig {
    pub half_window: usize,
    pub policy: ThresholdPolicy,
}

impl Default for OutlierConfig {
    fn default() -> Self {
        Self {
            half_window: 2,
            policy: ThresholdPolicy::default(),
        }
    }
}

/// Marker names spanning the local frame of each stream. The first set whose
/// names all occur in a sequence is used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct References {
    pub left_wrist: Vec<String>,
    pub right_wrist: Vec<String>,
    pub waist: Vec<String>,
}

impl Default for References {
    fn default() -> Self {
        let names = |stem: &str| (0..3).map(|i| format!("{stem}_{i}")).collect();
        Self {
            left_wrist: names("wrist"),
            right_wrist: Vec::new(),
            waist: names("hips"),
        }
    }
}

impl References {
    pub fn resolve(&self, seq: &MarkerSequence) -> Result<Vec<usize>> {
        for set in [&self.waist, &self.left_wrist, &self.right_wrist] {
            if set.is_empty() {
                continue;
            }
            let found: Option<Vec<usize>> = set.iter().map(|n| seq.marker_index(n)).collect();
            if let Some(idx) = found {
                return Ok(idx);
            }
        }
        Err(MocapError::Invariant {
            what: "config",
            check: "no configured reference marker set is fully present in the sequence".into(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Body,
    Hand,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub jitter: f64,
    pub kind: SynthKind,
    /// Longest gap of the default heavy-tailed occlusion profile.
    pub max_gap: usize,
    pub n_frames: usize,
    pub n_sequences: usize,
    pub stretch: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            jitter: 0.0,
            kind: SynthKind::Body,
            max_gap: 60,
            n_frames: 300,
            n_sequences: 4,
            stretch: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub neighbors: Option<String>,
    pub refiner: Option<String>,
    pub solver: Option<String>,
    pub stats: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub corruption: CorruptionConfig,
    pub fill_k: usize,
    /// Marker-joint cross-edge distance in cm; `None` means 1.5 times the
    /// mean bone length.
    pub graph_threshold: Option<f64>,
    pub outlier: OutlierConfig,
    pub paths: Paths,
    pub references: References,
    pub refiner: RefinerConfig,
    pub refiner_train: TrainConfig,
    /// Seeds every stochastic step; the nested `seed` fields are overwritten.
    pub seed: Option<u64>,
    pub solve_k: usize,
    pub solver: SolverConfig,
    pub solver_train: SolverTrainConfig,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corruption: CorruptionConfig::default(),
            fill_k: 6,
            graph_threshold: None,
            outlier: OutlierConfig::default(),
            paths: Paths::default(),
            references: References::default(),
            refiner: RefinerConfig::default(),
            refiner_train: TrainConfig::default(),
            seed: None,
            solve_k: 3,
            solver: SolverConfig::default(),
            solver_train: SolverTrainConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

fn bad(check: impl Into<String>) -> MocapError {
    MocapError::Invariant {
        what: "config",
        check: check.into(),
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| MocapError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: Self = serde_json::from_str(&text).map_err(|source| MocapError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.corruption.validate()?;
        self.solver.validate()?;
        if self.fill_k == 0 || self.solve_k == 0 {
            return Err(bad("fill_k and solve_k must be at least 1"));
        }
        if let Some(t) = self.graph_threshold {
            if !(t > 0.0) {
                return Err(bad("graph_threshold must be positive"));
            }
        }
        match self.outlier.policy {
            ThresholdPolicy::Absolute { value } if !(value > 0.0) => return Err(bad("absolute outlier threshold must be positive")),
            ThresholdPolicy::Robust { c } if !(c > 0.0 && c.is_finite()) => return Err(bad("robust outlier factor must be positive")),
            _ => {}
        }
        let r = &self.refiner;
        if r.conv_width == 0 || r.hidden_width == 0 || !(r.position_scale > 0.0) {
            return Err(bad("refiner widths and position_scale must be positive"));
        }
        if !(self.refiner_train.learning_rate > 0.0) || !(self.solver_train.learning_rate > 0.0) {
            return Err(bad("learning rates must be positive"));
        }
        if self.solver_train.batch_size == 0 {
            return Err(bad("solver batch_size must be at least 1"));
        }
        if self.synth.n_frames < 2 || self.synth.max_gap == 0 {
            return Err(bad("synth.n_frames must be at least 2 and synth.max_gap at least 1"));
        }
        if !(self.synth.jitter >= 0.0 && self.synth.stretch >= 0.0) {
            return Err(bad("synth jitter and stretch must be non-negative"));
        }
        Ok(())
    }

    /// `--seed` wins over the config; stochastic commands need one of them.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64> {
        flag.or(self.seed)
            .ok_or_else(|| bad("this command is stochastic and needs a seed: pass --seed or set `seed` in the config"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let config = PipelineConfig::default();
        config.validate().unwrap();
        assert_eq!((config.fill_k, config.solve_k), (6, 3));
        let text = serde_json::to_string(&config).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&text).unwrap(), config);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"fill_kk": 6}"#).is_err());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"outlier": {"window": 2}}"#).is_err());
        let partial: PipelineConfig = serde_json::from_str(r#"{"solve_k": 4}"#).unwrap();
        assert_eq!((partial.fill_k, partial.solve_k), (6, 4));
    }

    #[test]
    fn invalid_values_fail_validation() {
        let zero_k = PipelineConfig { fill_k: 0, ..PipelineConfig::default() };
        assert!(zero_k.validate().is_err());
        let threshold = PipelineConfig {
            graph_threshold: Some(-1.0),
            ..PipelineConfig::default()
        };
        assert!(threshold.validate().is_err());
        let mut policy = PipelineConfig::default();
        policy.outlier.policy = ThresholdPolicy::Robust { c: f64::NAN };
        assert!(policy.validate().is_err());
    }

    #[test]
    fn flag_seed_overrides_config() {
        let config = PipelineConfig {
            seed: Some(3),
            ..PipelineConfig::default()
        };
        assert_eq!(config.resolve_seed(Some(9)).unwrap(), 9);
        assert_eq!(config.resolve_seed(None).unwrap(), 3);
        assert!(PipelineConfig::default().resolve_seed(None).is_err());
    }
}
