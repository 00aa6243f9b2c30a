//! Graph query networks over bird's-eye-view grids.
//!
//! Learnable queries sample grid cells by attention, link them into kNN
//! graphs in feature space, refine nodes with edge attention, exchange
//! context across queries and project the result back to the grid. An
//! analytic cost model compares the query graphs with one full-scene graph.

pub mod bev_scene;
pub mod cli;
pub mod cost_model;
pub mod deep_context;
pub mod edge_focus;
pub mod error;
pub mod numerics;
pub mod pipeline;
pub mod query_init;

pub use error::{GqnError, Result};

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Tape64 = numerics::Tape<f64>;
pub type Tape32 = numerics::Tape<f32>;
pub type ParamStore64 = numerics::ParamStore<f64>;
pub type ParamStore32 = numerics::ParamStore<f32>;
pub type BevGrid64 = bev_scene::BevGrid<f64>;
pub type GqnOutput64 = pipeline::GqnOutput<f64>;
