//! Parent-child neural density fields for LiDAR depth reconstruction.
//!
//! A driving log is cut into parent blocks along the trajectory; each block
//! is segmented into child boxes (ground plus object clusters). A density
//! network is trained per block with depth and free-space losses tied to the
//! child boxes, and depths are inferred either over the whole block or in two
//! steps: first pick the child box along the ray, then read the depth inside
//! it.

pub mod cloud;
pub mod config;
pub mod error;
pub mod field;
pub mod eval;
pub mod geom;
pub mod infer;
pub mod partition;
pub mod pipeline;
pub mod simlidar;
pub mod train;

pub use error::{Error, Result};
