pub mod constrain;
pub mod crf;
pub mod lattice;
pub mod multiscale;
pub mod predict;

pub use constrain::constrained_argmax;
pub use crf::{crf_refine, CrfSettings};
pub use multiscale::{multiscale_probs, upsample_cells};
pub use predict::{generate_target_masks, predict_manifest, predict_mask};
