//! Multimodal classification with attention-guided sparse convolution.

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod sparse;
pub mod tensor;

pub use autodiff::{Gradients, Graph, SparseVar, Var};
pub use error::{Error, Result};
pub use params::{Param, ParamStore};
pub use sparse::{BinaryMap, ConvSpec, FlopsLedger, FlopsReport, MacCount, SiteSet, SparseFeatureMap};
pub use tensor::Tensor;
