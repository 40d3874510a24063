//! Dense deformation tracking of non-rigid surfaces from an event stream and
//! low-rate frames, using piecewise-affine (simplicial) motion models.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod evaluation;
pub mod events;
pub mod frames;
pub mod geometry;
pub mod optimizer;
pub mod render;
pub mod simulator;
pub mod strain;
pub mod tracker;
pub mod trajectory;

pub use error::{Error, Result};
pub use geometry::{AffineMap, BarycentricCoords, Point2, Roi, SimplicialMesh, Triangle};
pub use trajectory::{TimeGrid, TrajectoryField};
