//! Continuous particle-based 3D occupancy map for environments with both
//! static and dynamic obstacles, plus a synthetic scenario simulator and an
//! evaluation harness.
//!
//! The map tracks point objects with an SMC-PHD filter over a dual subspace
//! division: cubic voxels store and resample particles, sensor-frame pyramid
//! cells gate the measurement update by visibility. Occupancy at any point
//! or resolution is read straight off the particle weights.

pub mod config;
pub mod eval;
pub mod filter;
pub mod geometry;
pub mod io;
pub mod occupancy;
pub mod pipeline;
pub mod rng;
pub mod sim;
pub mod state;
pub mod store;
pub mod velocity;

pub use nalgebra;

pub use config::{EstimatorParams, FilterParams, MapConfig, MapMode, NoiseModel, RunConfig};
pub use geometry::Pose;
pub use occupancy::{BinaryGrid, OccupancyGrid};
pub use pipeline::{Frame, FrameReport, Pipeline};
pub use state::MapState;
