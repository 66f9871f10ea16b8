//! MeshGraphNet-Transformer: graph networks with physics-attention over
//! Lagrangian meshes, plus the training, rollout and synthetic-data tooling
//! around them.

pub mod autodiff;
pub mod config;
pub mod container;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod mesh;
pub mod metrics;
pub mod model;
pub mod normalize;
pub mod rollout;
pub mod synthetic;
pub mod tensor;
pub mod training;
pub mod trajectory;
pub mod verify;

pub use error::{Error, Result};
