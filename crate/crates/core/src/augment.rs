//! Synthetic corruption matching measured occlusion statistics: gap counts
//! per length and marker, longest-first gap placement, and uniform shift
//! outliers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MocapError, Result};
use crate::gapfill::find_gaps;
use crate::sequence::{MarkerMask, MarkerSequence};

/// Placement attempts per gap before falling back to the first free slot.
pub const PLACEMENT_RETRIES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionStats {
    /// Probability of a gap having length `index + 1`. Empty when the
    /// corpus had no occlusions.
    pub gap_length_probs: Vec<f64>,
    /// Per-marker fraction of occluded frames.
    pub p_hat: Vec<f64>,
}

impl OcclusionStats {
    pub fn has_histogram(&self) -> bool {
        !self.gap_length_probs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.p_hat.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(MocapError::Shape("occlusion probabilities must lie in [0, 1]".into()));
        }
        if self.gap_length_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(MocapError::Shape("gap length probabilities must lie in [0, 1]".into()));
        }
        if self.has_histogram() && (self.gap_length_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(MocapError::Shape("gap length histogram does not sum to 1".into()));
        }
        Ok(())
    }

    /// A heavy-tailed profile (`g(l) ∝ l^-1.5` up to `max_len`) with every
    /// marker equally likely to be occluded.
    pub fn heavy_tailed(n_markers: usize, max_len: usize) -> Self {
        let raw: Vec<f64> = (1..=max_len).map(|l| (l as f64).powf(-1.5)).collect();
        let total: f64 = raw.iter().sum();
        Self {
            gap_length_probs: raw.iter().map(|v| v / total).collect(),
            p_hat: vec![0.05; n_markers],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionConfig {
    pub p_occ: f64,
    pub p_shift: f64,
    pub seed: u64,
    /// Centimeters.
    pub sigma_shift: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            p_occ: 0.05,
            p_shift: 0.01,
            seed: 0,
            sigma_shift: 3.0,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_occ) || !(0.0..=1.0).contains(&self.p_shift) {
            return Err(MocapError::Shape("corruption probabilities must lie in [0, 1]".into()));
        }
        if !(self.sigma_shift >= 0.0) || !self.sigma_shift.is_finite() {
            return Err(MocapError::Shape("sigma_shift must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Occluded-frame fraction per marker and the pooled histogram of maximal
/// occlusion run lengths.
pub fn estimate_stats(seqs: &[MarkerSequence]) -> Result<OcclusionStats> {
    let m = seqs
        .first()
        .ok_or_else(|| MocapError::Shape("no sequences to estimate statistics from".into()))?
        .n_markers();
    let mut occluded = vec![0usize; m];
    let mut frames = 0usize;
    let mut hist: Vec<usize> = Vec::new();
    for s in seqs {
        if s.n_markers() != m {
            return Err(MocapError::Shape(format!("sequences have {m} and {} markers", s.n_markers())));
        }
        frames += s.n_frames();
        for gap in find_gaps(s) {
            occluded[gap.marker] += gap.n_missing();
            if hist.len() < gap.n_missing() {
                hist.resize(gap.n_missing(), 0);
            }
            hist[gap.n_missing() - 1] += 1;
        }
    }
    let n_gaps: usize = hist.iter().sum();
    Ok(OcclusionStats {
        gap_length_probs: hist.iter().map(|&c| c as f64 / n_gaps as f64).collect(),
        p_hat: occluded.iter().map(|&c| if frames == 0 { 0.0 } else { c as f64 / frames as f64 }).collect(),
    })
}

/// `counts[i][l − 1]` gaps of length `l` for marker `i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapCounts {
    pub counts: Vec<Vec<usize>>,
}

impl GapCounts {
    pub fn occluded_frames(&self, marker: usize) -> usize {
        self.counts[marker].iter().enumerate().map(|(i, &n)| (i + 1) * n).sum()
    }

    pub fn total(&self) -> usize {
        (0..self.counts.len()).map(|i| self.occluded_frames(i)).sum()
    }
}

/// `N_{l,i} = ⌊(L/l) · (l·g_l / Σ_k k·g_k) · p_occ · (p̂_i / Σ_j p̂_j)⌋`.
///
/// `budget_frames` is `L`; pass `T·|M|` so that the occluded fraction of the
/// whole sequence approaches `p_occ`.
pub fn gap_counts(stats: &OcclusionStats, p_occ: f64, budget_frames: usize) -> Result<GapCounts> {
    let p_sum: f64 = stats.p_hat.iter().sum();
    if !(p_sum > 0.0) {
        return Err(MocapError::NoOcclusionProfile);
    }
    let weighted: f64 = stats
        .gap_length_probs
        .iter()
        .enumerate()
        .map(|(i, g)| (i + 1) as f64 * g)
        .sum();
    if !(weighted > 0.0) {
        return Err(MocapError::NoOcclusionProfile);
    }
    let budget = budget_frames as f64;
    let counts = stats
        .p_hat
        .iter()
        .map(|p| {
            stats
                .gap_length_probs
                .iter()
                .enumerate()
                .map(|(i, g)| {
                    let l = (i + 1) as f64;
                    let n = (budget / l) * (l * g / weighted) * p_occ * (p / p_sum);
                    // The tolerance keeps exact products such as 8.0 from
                    // flooring to 7 through rounding.
                    (n + 1e-9).floor().max(0.0) as usize
                })
                .collect()
        })
        .collect();
    Ok(GapCounts { counts })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementReport {
    /// `(marker, length)` of every gap that could not be placed.
    pub dropped: Vec<(usize, usize)>,
}

/// Places each marker's gaps longest first at uniformly drawn free slots.
/// Gaps are kept at least one visible frame apart (and away from existing
/// occlusions) so that each one stays a separate run.
pub fn place_gaps(seq: &MarkerSequence, counts: &GapCounts, seed: u64) -> Result<(MarkerSequence, PlacementReport)> {
    if counts.counts.len() != seq.n_markers() {
        return Err(MocapError::Shape(format!(
            "gap counts for {} markers, sequence has {}",
            counts.counts.len(),
            seq.n_markers()
        )));
    }
    let t_len = seq.n_frames();
    let mut out = seq.clone();
    let mut report = PlacementReport::default();
    for (marker, per_len) in counts.counts.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(marker as u64);
        let mut lengths: Vec<usize> = Vec::new();
        for (i, &n) in per_len.iter().enumerate().rev() {
            lengths.extend(std::iter::repeat(i + 1).take(n));
        }
        // Over budget: drop the longest gaps first.
        let mut total: usize = lengths.iter().sum();
        while total > t_len {
            let l = lengths.remove(0);
            total -= l;
            report.dropped.push((marker, l));
        }
        let mut busy: Vec<bool> = (0..t_len).map(|t| !seq.is_visible(t, marker)).collect();
        for l in lengths {
            let fits = |s: usize, busy: &[bool]| {
                (s..s + l).all(|t| !busy[t]) && (s == 0 || !busy[s - 1]) && (s + l == t_len || !busy[s + l])
            };
            let last_start = t_len - l;
            let mut chosen = None;
            for _ in 0..PLACEMENT_RETRIES {
                let s = rng.gen_range(0..=last_start);
                if fits(s, &busy) {
                    chosen = Some(s);
                    break;
                }
            }
            if chosen.is_none() {
                chosen = (0..=last_start).find(|&s| fits(s, &busy));
            }
            match chosen {
                Some(s) => {
                    for t in s..s + l {
                        busy[t] = true;
                        out.set_visible(t, marker, false);
                    }
                }
                None => report.dropped.push((marker, l)),
            }
        }
    }
    Ok((out, report))
}

/// Moves each visible entry, with probability `p_shift`, by an offset drawn
/// independently per coordinate from `U(−σ, σ)`. Returns the shifted
/// entries as a mask.
pub fn apply_shifts(seq: &MarkerSequence, config: &CorruptionConfig, seed: u64) -> Result<(MarkerSequence, MarkerMask)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = seq.clone();
    let mut mask = MarkerMask::new(seq.n_frames(), seq.n_markers());
    let sigma = config.sigma_shift;
    for t in 0..seq.n_frames() {
        for k in 0..seq.n_markers() {
            if !seq.is_visible(t, k) || !rng.gen_bool(config.p_shift) || sigma == 0.0 {
                continue;
            }
            let mut p = seq.position(t, k);
            for c in 0..3 {
                p[c] += rng.gen_range(-sigma..sigma);
            }
            out.set_position(t, k, p);
            mask.set(t, k, true);
        }
    }
    Ok((out, mask))
}

/// Independent per-entry occlusion with probability `p_occ`.
pub fn per_frame_baseline(seq: &MarkerSequence, p_occ: f64, seed: u64) -> Result<MarkerSequence> {
    if !(0.0..=1.0).contains(&p_occ) {
        return Err(MocapError::Shape("p_occ must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = seq.clone();
    for t in 0..seq.n_frames() {
        for k in 0..seq.n_markers() {
            if rng.gen_bool(p_occ) {
                out.set_visible(t, k, false);
            }
        }
    }
    Ok(out)
}

/// Total-variation distance between two length histograms.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().max(b.len());
    0.5 * (0..n)
        .map(|i| (a.get(i).copied().unwrap_or(0.0) - b.get(i).copied().unwrap_or(0.0)).abs())
        .sum::<f64>()
}
