//! Windowed multi-scan state-space backbone for optical-flow micro-expression
//! recognition, with a dual-granularity classifier, training and evaluation
//! utilities.

pub mod checkpoint;
pub mod config;
pub mod dgcm;
pub mod error;
pub mod gradsuite;
pub mod lgfi;
pub mod mixer;
pub mod model;
pub mod nn;
pub mod params;
pub mod scan;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Graph, Tensor, Var};
