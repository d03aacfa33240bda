//! Demo scenarios: 1D surface fitting, random 2D pose graphs and
//! incremental 2D SLAM.

pub mod pose_graph;
pub mod slam;
pub mod surface;
