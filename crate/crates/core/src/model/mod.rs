pub mod checkpoint;
pub mod layers;
pub mod network;
pub mod params;

pub use network::{
    build_backbone, forward_multilabel, forward_segmentation, output_size, Architecture, BackboneKind,
    MultiLabelScores, Network, MIN_INPUT, OUTPUT_STRIDE,
};
pub use params::{NetworkParams, Tensor};
