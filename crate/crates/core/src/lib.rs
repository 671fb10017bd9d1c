//! Feature-augmented GICP LiDAR odometry.
//!
//! GICP registration whose data association runs in a position⊕feature
//! space and whose per-point covariances take their eigenvalues from a tiny
//! learned encoder, together with the sequence pipeline, KITTI-style
//! relative trajectory error, and the closed-loop TPE training that tunes
//! the encoders against trajectory error.

pub mod cloud;
pub mod features;
pub mod geom;
pub mod knn;
pub mod eval;
pub mod mlp;
pub mod odometry;
pub mod registration;
pub mod training;

pub use cloud::PointCloud;
pub use features::{FeatureSet, PcaModel, RawFeatures};
pub use geom::{EigenDecomp3, Pose, SymMat3, Twist};
pub use knn::{KdTree, KdTree3, KdTree6, Neighbor};
pub use mlp::{MlpPair, MlpRole, MlpWeights};
pub use registration::{
    AssociationMode, CovarianceMode, GaussianCloud, RegistrationConfig, RegistrationResult,
};
pub use eval::{RteConfig, RteReport};
pub use odometry::{OdometryConfig, Trajectory};
pub use training::{Study, StudyState, TpeConfig, TrainConfig, Trial};
