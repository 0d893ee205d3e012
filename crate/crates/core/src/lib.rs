//! Learned incomplete LU preconditioners.
//!
//! Sparse kernels, right-preconditioned GMRES, classical preconditioners,
//! a message-passing network that predicts triangular factors on the
//! pattern of the input matrix, the losses used to train it, and the
//! spectral evaluation of the resulting preconditioned operators.

pub mod config;
pub mod dataset;
pub mod dense;
pub mod error;
pub mod graph;
pub mod krylov;
pub mod mtx;
pub mod neural;
pub mod precond;
pub mod sparse;
pub mod spectral;
pub mod training;

pub use dense::DenseMatrix;
pub use error::{Error, Result};
pub use graph::CoatesGraph;
pub use krylov::{gmres, GmresOptions, SolveResult};
pub use neural::{Architecture, ModelParams, Mode};
pub use precond::{ilu0, FactorPair, Identity, Jacobi, Preconditioner};
pub use sparse::CsrMatrix;
