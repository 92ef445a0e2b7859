//! Shape ingestion, surface sampling, nearest-neighbor search and mesh
//! export.

mod export;
mod io;
mod kdtree;
mod keypoints;
mod mesh;
pub mod primitives;
mod sampling;

pub use export::{closest_point_on_triangle, export_reconstruction, reconstruction_mesh, ExportError, UvTransform};
pub use io::{load_shape, parse_obj, parse_ply, parse_xyz, save_obj, write_obj, write_xyz, LoadedShape, ShapeFormat};
pub use kdtree::KdTree;
pub use keypoints::{parse_keypoints, read_keypoints, write_keypoints, Keypoint, KeypointSet};
pub use mesh::{Normalization, Point3, PointCloudWithNormals, Shape, TriangleMesh};
pub use sampling::{sample_cloud, sample_surface, SampleSet, ShapeSample, ShapeSource, SurfaceSampler};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("point-cloud input lacks normals")]
    MissingNormals,
    #[error("line {line}: expected six columns (x y z nx ny nz); normals are required")]
    MissingNormalsAt { line: usize },
    #[error("unsupported shape format '{0}'")]
    UnsupportedFormat(String),
    #[error("mesh has zero total area")]
    ZeroArea,
    #[error("invalid geometry: {0}")]
    Invalid(String),
    #[error("i/o error on {0}: {1}")]
    Io(String, #[source] std::io::Error),
}
