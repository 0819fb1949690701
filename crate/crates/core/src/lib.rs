//! Action tubelet detection without the backbone.
//!
//! The crate covers the whole non-CNN pipeline of a tubelet detector:
//!
//! - [`geometry`]: boxes, tubelets, tubes and the overlap measures between them.
//! - [`anchors`]: dense multi-scale anchor cuboids and the anchor recall study.
//! - [`matchloss`]: ground-truth assignment, regression targets and the
//!   training loss with hard negative mining and analytic gradients.
//! - [`head`]: a per-cell linear detection head over K stacked frame features,
//!   its trainer and two-stream fusion.
//! - [`linker`]: tubelet NMS, online linking and temporal smoothing into tubes.
//! - [`metrics`]: frame/video mAP, MABO, classification accuracy, speed strata
//!   and the false-positive error breakdown.
//! - [`synthlab`]: synthetic moving-actor scenes, file formats and the
//!   end-to-end pipeline driven by the `act` CLI.

pub mod anchors;
pub mod error;
pub mod geometry;
pub mod head;
pub mod linker;
pub mod matchloss;
pub mod metrics;
pub mod synthlab;

pub use anchors::{AnchorConfig, AnchorCuboid};
pub use error::{Error, Result};
pub use geometry::{ActionTube, BBox, Tubelet};
pub use head::{HeadParams, ScoredTubelet};
pub use matchloss::Predictions;
pub use linker::LinkerConfig;
pub use metrics::EvalReport;
