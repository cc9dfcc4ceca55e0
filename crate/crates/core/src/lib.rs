//! Diffusion pose prior with guided solvers for 3D pose estimation,
//! denoising, completion and generation on 17-joint skeletons.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod operators;
pub mod skeleton;
pub mod solvers;

pub use error::{Error, Result};

pub use data::{NormalizationInfo, PoseRecord, SyntheticGenConfig};
pub use denoiser::{Checkpoint, ModelConfig, PoseModel, TrainConfig};
pub use diffusion::{NoiseSchedule, ScheduleParams, StepPlan};
pub use operators::{JointMask, Measurement, MeasurementOperator, NoiseKind};
pub use skeleton::{CameraIntrinsics, Pose2D, Pose3D, SkeletonTopology, Trajectory};
pub use solvers::{Init, ProblemSpec, SamplerKind, SolverConfig, SolverKind};
