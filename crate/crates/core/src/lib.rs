//! Matching-free image-to-point-cloud registration.
//!
//! Candidate camera poses are sampled on a grid around the current estimate,
//! each candidate is turned into a cost-volume unit by projecting 3D features
//! into the image grid, every unit is scored, and the best candidate seeds a
//! smaller grid for the next iteration.

pub mod costvolume;
pub mod engine;
pub mod error;
pub mod features;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod sampling;
pub mod scoring;
pub mod tensor_io;
pub mod util;

pub use engine::{register, EngineConfig, PreparedScene, RegistrationResult};
pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, PointCloud, Pose};
