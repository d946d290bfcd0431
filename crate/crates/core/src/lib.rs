//! Tiled small-object detection on large images: tile planning, dataset
//! slicing, topology-aware merging of per-tile detections, evaluation and a
//! reproducible strategy-comparison pipeline.

pub mod evaluation;
pub mod formats;
pub mod geometry;
pub mod merging;
pub mod pipeline;
pub mod scalar;
pub mod slicing;
pub mod synth;
pub mod tiling;

pub use geometry::{BBox, GeometryError};
pub use merging::{Detection, MergeParams};
pub use scalar::Scalar;
pub use tiling::{plan_grid, TileGrid, TileSpec};

pub type Box64 = geometry::BBox<f64>;
pub type Box32 = geometry::BBox<f32>;
pub type Detection64 = merging::Detection<f64>;
pub type Detection32 = merging::Detection<f32>;
pub type MergeParams64 = merging::MergeParams<f64>;
pub type GroundTruth64 = evaluation::GroundTruthSet<f64>;
