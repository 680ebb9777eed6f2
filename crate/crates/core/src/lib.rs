//! Contextual 3D dense captioning on synthetic point-cloud scenes: a
//! superpoint detector stand-in, target/neighbor context selection, a
//! transformer decoder with global and local context modules, XE and
//! self-critical training, and IoU-gated caption metrics.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32`/`f64`); the
//! model and training code run in `f64` through the aliases below.

pub mod autodiff;
pub mod captioner;
pub mod config;
pub mod context;
pub mod detector;
pub mod geometry;
pub mod metrics;
pub mod pipeline;
pub mod scalar;
pub mod scene;
pub mod training;
pub mod verify;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
pub type Gradients64 = autodiff::Gradients<f64>;
pub type Tape64<'p> = autodiff::Tape<'p, f64>;
pub type Adam64 = autodiff::Adam<f64>;
