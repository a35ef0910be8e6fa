//! Two-stage weakly supervised semantic segmentation.
//!
//! An initial mask generator is trained on retrieved images whose masks come from
//! co-segmentation; its label-constrained predictions on the target set then train a final
//! dual-branch model (segmentation plus multi-label classification) that is evaluated with
//! multi-scale inference, dense CRF refinement and mean IoU.

pub mod cosegment;
pub mod data;
pub mod error;
pub mod eval;
pub mod infer;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod train;

pub use error::{Result, WssError};
