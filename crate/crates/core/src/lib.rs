//! Range-view LiDAR semantic segmentation toolkit.
//!
//! The crate covers the inference side of a range-image segmentation
//! system: reading SemanticKITTI scans, spherical projection with normal
//! channels, a from-scratch CNN inference engine for a lightweight
//! ResNet-34 style network, int8 fake quantization, label recovery via
//! nearest label assignment, scoring, and a throughput benchmark.

pub mod error;
pub mod evaluation;
pub mod frame_io;
pub mod grid;
pub mod kitti_io;
pub mod network;
pub mod normals;
pub mod ops;
pub mod pipeline;
pub mod postprocess;
pub mod projection;
pub mod quantization;
pub mod receptive_field;
pub mod registry;
pub mod synthetic;
pub mod tensor;
pub mod weights;

pub use error::{Error, ErrorKind, Result};
pub use grid::{Grid, LabelImage};
pub use kitti_io::{ClassRemap, LabelScan, Point, PointCloudScan};
pub use network::{Model, NetworkConfig};
pub use pipeline::{Pipeline, PipelineConfig};
pub use projection::{PointPixelMap, ProjectionConfig, RangeImage};
pub use tensor::Tensor;
