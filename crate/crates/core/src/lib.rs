//! Model selection for Gaussian processes through stabilized Laplace
//! approximations of the model evidence.
//!
//! The crate covers the whole pipeline for one-dimensional regression:
//! compositional kernels ([`kernels`]), the marginal likelihood and
//! hyperparameter priors ([`model`]), multi-restart fitting ([`fit`]),
//! Laplace-based and classical criteria ([`laplace`]), reference evidence
//! estimates by quadrature and nested sampling ([`oracle`]), greedy kernel
//! search ([`search`]) and benchmark data ([`data`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod fit;
pub mod kernels;
pub mod laplace;
pub mod model;
pub mod oracle;
pub mod search;

pub use data::{linear_benchmark_dataset, Generator, GeneratorSpec};
pub use error::{Error, Result};
pub use fit::{optimize, FitOptions, FitResult, Objective};
pub use kernels::{mauna_kernel, parse_kernel, BaseKernel, HyperParams, KernelExpr, ParamLayout};
pub use laplace::{criteria_suite, Criterion, EvaluationResult, HessianSpectrum, LaplaceVariant};
pub use model::{build_prior, Dataset, GPModel, PriorSpec};
pub use oracle::EvidenceEstimate;
pub use search::{cks_search, recognition_check, SearchTrace};
