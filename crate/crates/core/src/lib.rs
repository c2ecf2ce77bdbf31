//! Attention-conditioned radiance fields.
//!
//! A field queried at a 3D point aggregates pixel-aligned features from an
//! arbitrary number of source views with attention, refines density and
//! color with windowed attention along the camera ray, and is rendered with
//! differentiable alpha compositing.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` aliases below are the configuration used for training and tests.

pub mod error;
pub mod geometry;
pub mod harness;
pub mod model;
pub mod nnblocks;
pub mod renderer;
pub mod scenes;
pub mod scalar;
pub mod tensorgrad;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensorgrad::Tensor<f64>;
pub type Tape64 = tensorgrad::Tape<f64>;
pub type ParamStore64 = tensorgrad::ParamStore<f64>;
pub type Camera64 = geometry::Camera<f64>;
pub type Ray64 = geometry::Ray<f64>;
pub type FieldModel64 = model::FieldModel<f64>;
pub type SourceView64 = model::SourceView<f64>;
pub type Scene64 = scenes::Scene<f64>;
pub type RenderedImage64 = renderer::RenderedImage<f64>;
