//! Motion-capture marker cleaning and skeletal solving.
//!
//! The pipeline fills occluded marker gaps from neighbor distance matrices,
//! repairs acceleration outliers, aligns body and hand markers to local
//! reference frames, and solves joint rotations with a heterogeneous
//! marker/joint graph network. Synthetic corruption and data generation
//! utilities make every stage testable without captured data.

pub mod align;
pub mod augment;
pub mod datagen;
pub mod error;
pub mod gapfill;
pub mod locality;
pub mod metrics;
pub mod outlier;
pub mod rotation;
pub mod sequence;
pub mod spline;
pub mod skeleton;
pub mod solver;

pub use error::{MocapError, Result};
pub use sequence::{load_sequence, save_sequence, MarkerMask, MarkerSequence, PartGroup, PartLabel};
pub use skeleton::{forward_kinematics, MarkerLayout, Motion, Skeleton};
