//! Structure from motion over virtual correspondences.
//!
//! Two pixels are virtual correspondences when their camera rays meet in 3D,
//! whether or not they depict the same visible surface point. Given a posed
//! shape prior and a dense pixel-to-surface map per image, this crate
//! extracts such pairs, initializes relative poses with a five-point RANSAC,
//! and refines poses and point tuples with a bundle adjustment whose second
//! point is tied to the first by two non-negative thickness parameters.

pub mod ba;
pub mod geometry;
pub mod io;
pub mod lbfgs;
pub mod mesh;
pub mod pipeline;
pub mod relative_pose;
pub mod synth;
pub mod vc;

pub use geometry::{CameraIntrinsics, GeometryError, Pixel, Ray, Se3Pose};
pub use mesh::{MeshError, SurfaceCoordinate, SurfaceHit, TriangleMesh};
pub use vc::{DenseSurfaceMap, ImageRecord, SubjectPrior, VirtualCorrespondence};
pub use ba::{BaConfig, BaError, BaMode, BaProblem, BaReport, VcTrack};
pub use pipeline::{SfmError, SfmInput, SfmParams, SfmResult};
pub use relative_pose::{PoseError, RansacParams, RelativePoseEstimate};
pub use synth::{NoiseConfig, PoseErrorReport, SceneConfig, SyntheticScene};
