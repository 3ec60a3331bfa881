//! Sub-sampled Newton-CG with regularization by denoising, applied to
//! spectral CT basis-material decomposition.

pub mod error;
pub mod experiment;
pub mod linalg;
pub mod operators;
pub mod red;
pub mod phantom;
pub mod sketch;
pub mod solver;
pub mod spectral;

pub use error::{Error, Result};
pub use operators::{
    BlockOperator, CountingOperator, DenseBlocks, FourierRadon, GramFft, KroneckerMap, LinearMap,
    RadonGeometry, RayRadon, ViewOperator, WorkCounter,
};
pub use spectral::{MaterialBasis, SpectralMeasurement, SpectrumTable, SqrtHessian};
