//! Transformer neural operators over sequences of subdomain-restricted
//! functions.
//!
//! A field on a rectangle is cut into congruent subdomains; each subdomain
//! block is a token, attention scores are L2 inner products of query and
//! key functions, and every "linear layer" is replaced by an integral
//! operator acting inside a subdomain. Everything numeric is generic over
//! [`Scalar`] (f32 for training, f64 for verification).

// `!(x > 0.0)` style checks are meant to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop, clippy::type_complexity)]

pub mod attention;
pub mod error;
pub mod geometry;
pub mod kv;
pub mod model;
pub mod par;
pub mod pde;
pub mod rng;
pub mod scalar;
pub mod subdomain_ops;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type ParamStore32 = tensor::ParamStore<f32>;
pub type ParamStore64 = tensor::ParamStore<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
