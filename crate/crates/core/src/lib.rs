pub mod autograd;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod guidance;
pub mod io;
pub mod matrix;
pub mod metrics;
pub mod motion_data;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use scalar::Scalar;

pub type Denoiser = denoiser::DenoiserModel<f32>;
pub type Denoiser64 = denoiser::DenoiserModel<f64>;
pub type Schedule = diffusion::DiffusionSchedule<f32>;
pub type Schedule64 = diffusion::DiffusionSchedule<f64>;
pub type Motion = motion_data::MotionSequence<f64>;
pub type Frames = Matrix<f32>;
pub type Trainer32 = training::Trainer<f32>;
