//! Kinematic lip-sync deepfake detection from perioral landmark trajectories.
//!
//! The pipeline runs from landmark JSONL files through normalization and
//! run-based filtering ([`trajectory`]), windowed kinematic features
//! ([`kinematics`]), a three-branch classifier ([`network`]) trained with
//! weighted cross-entropy and AdamW ([`training`]), to video-level scoring
//! and statistical analysis ([`evaluation`]). [`synthetic`] produces
//! ground-truth smooth and jittery trajectories and [`perturbation`]
//! degrades existing ones.

// Negated float comparisons double as NaN rejection in input validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod kinematics;
pub mod linalg;
pub mod network;
pub mod perturbation;
pub mod synthetic;
pub mod training;
pub mod trajectory;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
