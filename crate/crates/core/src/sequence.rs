//! Marker sequences, per-entry masks and their canonical JSON form.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{invariant, read_file, write_file, MocapError, Result};

/// Body region a marker belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartLabel {
    Body,
    LeftHand,
    RightHand,
    WaistRef,
    WristRefLeft,
    WristRefRight,
}

/// Marker groups between which locality is never shared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PartGroup {
    Body,
    LeftHand,
    RightHand,
}

impl PartLabel {
    /// Groups this marker may share neighbors with. Wrist references sit on
    /// the boundary and belong to both the body and their hand.
    pub fn groups(self) -> &'static [PartGroup] {
        match self {
            PartLabel::Body | PartLabel::WaistRef => &[PartGroup::Body],
            PartLabel::LeftHand => &[PartGroup::LeftHand],
            PartLabel::RightHand => &[PartGroup::RightHand],
            PartLabel::WristRefLeft => &[PartGroup::Body, PartGroup::LeftHand],
            PartLabel::WristRefRight => &[PartGroup::Body, PartGroup::RightHand],
        }
    }

    pub fn shares_group(self, other: PartLabel) -> bool {
        self.groups().iter().any(|g| other.groups().contains(g))
    }
}

/// Boolean flag per (frame, marker), stored frame-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MarkerMask {
    n_frames: usize,
    n_markers: usize,
    data: Vec<bool>,
}

impl MarkerMask {
    pub fn new(n_frames: usize, n_markers: usize) -> Self {
        Self {
            n_frames,
            n_markers,
            data: vec![false; n_frames * n_markers],
        }
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_markers(&self) -> usize {
        self.n_markers
    }

    pub fn get(&self, frame: usize, marker: usize) -> bool {
        self.data[frame * self.n_markers + marker]
    }

    pub fn set(&mut self, frame: usize, marker: usize, value: bool) {
        self.data[frame * self.n_markers + marker] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Rows of 0/1 values, one row per frame.
    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        self.data.chunks(self.n_markers.max(1)).map(|r| r.iter().map(|&b| u8::from(b)).collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let n_markers = rows.first().map_or(0, Vec::len);
        let mut mask = Self::new(rows.len(), n_markers);
        for (t, row) in rows.iter().enumerate() {
            if row.len() != n_markers {
                return Err(invariant("mask", format!("row {t} has {} entries, expected {n_markers}", row.len())));
            }
            for (m, &v) in row.iter().enumerate() {
                match v {
                    0 => {}
                    1 => mask.set(t, m, true),
                    other => return Err(invariant("mask", format!("entry ({t}, {m}) is {other}, expected 0 or 1"))),
                }
            }
        }
        Ok(mask)
    }
}

/// T×|M| marker positions (cm) with a visibility flag per entry.
///
/// Positions of invisible entries are carried along but are not trusted;
/// they may be NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkerSequence {
    pub frame_rate: f64,
    pub marker_names: Vec<String>,
    pub part_labels: Vec<PartLabel>,
    positions: Vec<Vector3<f64>>,
    visibility: Vec<bool>,
}

impl MarkerSequence {
    /// Fully visible sequence with all positions at the origin.
    pub fn new(frame_rate: f64, marker_names: Vec<String>, part_labels: Vec<PartLabel>, n_frames: usize) -> Self {
        let n = n_frames * marker_names.len();
        Self {
            frame_rate,
            marker_names,
            part_labels,
            positions: vec![Vector3::zeros(); n],
            visibility: vec![true; n],
        }
    }

    pub fn n_markers(&self) -> usize {
        self.marker_names.len()
    }

    pub fn n_frames(&self) -> usize {
        if self.marker_names.is_empty() {
            0
        } else {
            self.positions.len() / self.marker_names.len()
        }
    }

    fn idx(&self, frame: usize, marker: usize) -> usize {
        debug_assert!(marker < self.n_markers());
        frame * self.n_markers() + marker
    }

    pub fn position(&self, frame: usize, marker: usize) -> Vector3<f64> {
        self.positions[self.idx(frame, marker)]
    }

    pub fn set_position(&mut self, frame: usize, marker: usize, p: Vector3<f64>) {
        let i = self.idx(frame, marker);
        self.positions[i] = p;
    }

    pub fn is_visible(&self, frame: usize, marker: usize) -> bool {
        self.visibility[self.idx(frame, marker)]
    }

    pub fn set_visible(&mut self, frame: usize, marker: usize, visible: bool) {
        let i = self.idx(frame, marker);
        self.visibility[i] = visible;
    }

    /// Positions of one frame, in marker order.
    pub fn frame(&self, frame: usize) -> &[Vector3<f64>] {
        let m = self.n_markers();
        &self.positions[frame * m..(frame + 1) * m]
    }

    pub fn marker_index(&self, name: &str) -> Option<usize> {
        self.marker_names.iter().position(|n| n == name)
    }

    /// Mask of entries that are not visible.
    pub fn occlusion_mask(&self) -> MarkerMask {
        let mut mask = MarkerMask::new(self.n_frames(), self.n_markers());
        for t in 0..self.n_frames() {
            for m in 0..self.n_markers() {
                mask.set(t, m, !self.is_visible(t, m));
            }
        }
        mask
    }

    pub fn occluded_count(&self) -> usize {
        self.visibility.iter().filter(|v| !**v).count()
    }

    /// Sub-sequence holding the given markers, in the given order.
    pub fn select_markers(&self, markers: &[usize]) -> MarkerSequence {
        let t_len = self.n_frames();
        let mut out = MarkerSequence::new(
            self.frame_rate,
            markers.iter().map(|&m| self.marker_names[m].clone()).collect(),
            markers.iter().map(|&m| self.part_labels[m]).collect(),
            t_len,
        );
        for t in 0..t_len {
            for (k, &m) in markers.iter().enumerate() {
                out.set_position(t, k, self.position(t, m));
                out.set_visible(t, k, self.is_visible(t, m));
            }
        }
        out
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let m = self.n_markers();
        if m == 0 {
            return Err(invariant("sequence", "marker list is empty"));
        }
        if self.positions.len() % m != 0 || self.positions.len() != self.visibility.len() {
            return Err(invariant("sequence", "position/visibility storage is ragged"));
        }
        if self.n_frames() == 0 {
            return Err(invariant("sequence", "sequence has no frames"));
        }
        if self.part_labels.len() != m {
            return Err(invariant(
                "sequence",
                format!("{} part labels for {m} markers", self.part_labels.len()),
            ));
        }
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) {
            return Err(invariant("sequence", format!("frame_rate {} is not positive", self.frame_rate)));
        }
        let mut names = self.marker_names.clone();
        names.sort();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(invariant("sequence", format!("duplicate marker name `{}`", w[0])));
        }
        for t in 0..self.n_frames() {
            for k in 0..m {
                if self.is_visible(t, k) && !self.position(t, k).iter().all(|v| v.is_finite()) {
                    return Err(invariant(
                        "sequence",
                        format!("visible marker `{}` has a non-finite position at frame {t}", self.marker_names[k]),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        let doc = SequenceDoc {
            frame_rate: round6(self.frame_rate),
            frames: (0..self.n_frames())
                .map(|t| {
                    (0..self.n_markers())
                        .map(|m| {
                            let p = self.position(t, m);
                            MarkerSample {
                                p: [finite6(p.x), finite6(p.y), finite6(p.z)],
                                v: u8::from(self.is_visible(t, m)),
                            }
                        })
                        .collect()
                })
                .collect(),
            marker_names: self.marker_names.clone(),
            part_labels: self.part_labels.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SequenceDoc = serde_json::from_str(text)?;
        Self::from_doc(doc)
    }

    fn from_doc(doc: SequenceDoc) -> Result<Self> {
        let m = doc.marker_names.len();
        let mut seq = MarkerSequence::new(doc.frame_rate, doc.marker_names, doc.part_labels, doc.frames.len());
        for (t, row) in doc.frames.iter().enumerate() {
            if row.len() != m {
                return Err(invariant("sequence", format!("frame {t} has {} markers, expected {m}", row.len())));
            }
            for (k, s) in row.iter().enumerate() {
                let visible = match s.v {
                    0 => false,
                    1 => true,
                    other => {
                        return Err(invariant(
                            "sequence",
                            format!("visibility at frame {t}, marker {k} is {other}, expected 0 or 1"),
                        ))
                    }
                };
                let p = Vector3::new(
                    s.p[0].unwrap_or(f64::NAN),
                    s.p[1].unwrap_or(f64::NAN),
                    s.p[2].unwrap_or(f64::NAN),
                );
                seq.set_position(t, k, p);
                seq.set_visible(t, k, visible);
            }
        }
        seq.validate()?;
        Ok(seq)
    }
}

pub fn load_sequence(path: &Path) -> Result<MarkerSequence> {
    let text = read_file(path)?;
    let doc: SequenceDoc = serde_json::from_str(&text).map_err(|source| MocapError::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    MarkerSequence::from_doc(doc)
}

pub fn save_sequence(seq: &MarkerSequence, path: &Path) -> Result<()> {
    let text = seq.to_json()?;
    write_file(path, &text)
}

/// Rounds to the 1e-6 grid used by every canonical JSON file.
pub fn round6(x: f64) -> f64 {
    let r = (x * 1e6).round() / 1e6;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn finite6(x: f64) -> Option<f64> {
    x.is_finite().then(|| round6(x))
}

// Field order is alphabetical so serialized keys come out sorted.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceDoc {
    frame_rate: f64,
    frames: Vec<Vec<MarkerSample>>,
    marker_names: Vec<String>,
    part_labels: Vec<PartLabel>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MarkerSample {
    p: [Option<f64>; 3],
    v: u8,
}
