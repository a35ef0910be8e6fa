pub mod config;
pub mod image;
pub mod manifest;
pub mod mask;
pub mod score;
pub mod taxonomy;

pub use config::{MaskSourceKind, PipelineConfig};
pub use image::{capped_size, random_crop_pair, resize_max_dim, CropOffset, ImageRecord, ImageSource};
pub use manifest::{load_manifest, write_manifest, DatasetManifest, ManifestEntry, Split};
pub use mask::{label_vector_from_mask, LabelVector, Mask, IGNORE};
pub use score::{ScoreMap, ScoreSpace};
pub use taxonomy::{ClassTaxonomy, BACKGROUND};
