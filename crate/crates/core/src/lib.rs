//! Pose-invariant 3D face alignment.
//!
//! A 3D deformable landmark model and a weak-perspective camera describe every
//! face. A cascade of coupled regressors alternately refines the projection
//! matrix and the shape coefficients from image features, and per-landmark
//! visibility follows from the model's surface normals under the current pose.

pub mod camera;
pub mod cascade;
pub mod error;
pub mod eval;
pub mod features;
pub mod gt_fit;
pub mod io;
pub mod regressors;
pub mod shape_model;
pub mod similarity;
pub mod synth;

pub use camera::{
    BoundingBox, Landmarks2D, PoseParams, ProjectionMatrix, VisibilityMode, VisibilityVector,
};
pub use error::{Error, Result};
pub use shape_model::{DeformableModel, LandmarkScan, Shape3D, ShapeParams};
