//! Attentional point-cloud detection: a PointNet++-style backbone with
//! pluggable attention modules, a Hough-voting detection head, and the
//! AP/recall evaluation protocol for axis-aligned 3D boxes.

pub mod alloc;
pub mod attention;
pub mod backbone;
pub mod bench;
pub mod config;
pub mod eval;
pub mod geometry;
pub mod head;
pub mod model;
mod error;
pub mod gradcheck;
mod graph;
pub mod nn;
mod ops;
pub mod optim;
pub mod point_ops;
pub mod scene;
mod params;
mod scalar;
mod tensor;
pub mod train;
pub mod votes;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Mode, Var};
pub use ops::{softmax_tensor, PoolKind};
pub use params::{ParamId, ParamStore, Parameter};
pub use scalar::Real;
pub use tensor::Tensor;
