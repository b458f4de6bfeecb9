//! Evaluation: an approximate point sampler for generated models, Chamfer
//! distance, the six generative metrics and SVG export of sketches.
//!
//! Point clouds come from sampling curves and replicating them along the
//! extrusion axis, not from reconstructed solids, so the numbers are only
//! comparable between runs of this crate.

mod geometry;
mod metrics;
mod svg;

pub use geometry::{
    plane_rotation, sample_points, sample_points_counted, sketches, Curve, Extrusion, Point2,
    Point3, PointCloud, Sketch, EXTRUDE_OFFSETS,
};
pub use metrics::{chamfer, jsd, metrics, MetricsConfig, MetricsReport};
pub use svg::export_svg;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("sequence is not a valid model: {0}")]
    InvalidSequence(String),
    #[error("no sketch with index {index}; the model has {count}")]
    NoSuchSketch { index: usize, count: usize },
    #[error("{0} list is empty")]
    EmptyList(&'static str),
    #[error("no generated model yields points")]
    NoGeometry,
}
