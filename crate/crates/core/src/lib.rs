//! Traversability completion from LIDAR: BEV grids, dataset generation,
//! pillar encoding, multi-frame fusion, the completion network, training and
//! evaluation.

pub mod cloud;
pub mod completion;
pub mod dataset;
pub mod eval;
pub mod fusion;
pub mod grid;
pub mod model;
pub mod nn;
pub mod pillar;
pub mod rng;
pub mod synth;
pub mod tmap;
pub mod train;
