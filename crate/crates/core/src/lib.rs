//! Model-agnostic, segmentation-based attribution for document image
//! classifiers.
//!
//! A page is binarized and segmented into layout-aware groups (one mask per
//! structuring element), each group is ablated to a baseline value, and the
//! resulting score drops are normalized by group area and summed into a
//! per-pixel attribution map.

pub mod api;
pub mod attribution;
pub mod config;
pub mod corpus;
pub mod formats;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod render;
pub mod segmentation;
pub mod synth;

pub use attribution::{AblationMode, AttributionMap, MapKind};
pub use imaging::{BinaryImage, RasterImage, StructuringElement};
pub use model::{ClassifierHandle, ModelSpec};
pub use segmentation::{PipelineConfig, SegmentationMask};
