//! Query-supervised semantic occupancy fields.

pub mod bev;
pub mod config;
pub mod error;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod pointcloud;
pub mod scalar;
pub mod scene;
pub mod supervision;

pub use error::{Error, Result};
pub use scalar::Real;

pub use eval::{ClassSet, MetricsReport};
pub use field::{FieldArch, FieldModel, TrainConfig};
pub use geometry::{ContractionParams, DepthBinning, Query4};
pub use pointcloud::{PointCloud, PointRecord};
pub use scene::{GridSpec, ScanSpec, SceneSpec, VoxelVolume};
pub use supervision::{QueryBatch, SamplingConfig};
