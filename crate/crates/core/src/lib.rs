//! Scribble-supervised volumetric segmentation toolkit.
//!
//! Turns sparse scribbles on anisotropic 3D volumes into dense supervision
//! (supervoxel pseudo masks, confidence masks, static edge boundaries),
//! provides the three training losses with analytic gradients, evaluates
//! segmentations, and ships a deterministic forward-only reference network.

pub mod error;
pub mod metrics;
pub mod morphology;
pub mod nifti;
pub mod phantom;
pub mod pipeline;
pub mod propagation;
pub mod refnet;
pub mod scribble;
pub mod supervoxel;
pub mod volume;
pub mod losses;

pub use error::{Error, Result};
pub use volume::{BinaryVolume, ChannelVolume, Geometry, Grid, LabelVolume, Origin, ProbVolume, Volume};
