//! Zero-shot 3D part segmentation.
//!
//! A mesh is rendered from a ring of cameras into color images plus face-ID
//! buffers, every view is sent to a 2D reasoning-segmentation backend with a
//! text query, and the returned masks are lifted back onto the mesh faces with
//! geodesic Gaussian reweighting, visibility smoothing and a global threshold.
//!
//! The modules follow the data flow:
//!
//! * [`mesh`]: OBJ/PLY ingestion, normalization, face adjacency, q-rings.
//! * [`render`]: deterministic software rasterizer producing [`render::ViewRender`].
//! * [`geodesic`]: heat-method and Dijkstra face distances, Gaussian helpers.
//! * [`backend`]: the segmentation backend contract (http, fixture, oracle).
//! * [`fusion`]: mask-to-face lifting and scoring.
//! * [`eval`]: per-category mIoU reports.
//! * [`pipeline`]: end-to-end orchestration, jobs and artifact layout.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backend;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geodesic;
pub mod mesh;
pub mod pipeline;
pub mod render;
pub mod sparse;

pub use error::{Error, Result};
