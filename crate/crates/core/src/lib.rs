//! Gaussian location and covariance estimation for data matrices whose
//! individual cells carry nonnegative weights.
//!
//! The main entry points are [`unpack::unpack_dataset`], the explicit
//! estimators in [`estimators`], the EM-based [`cwmle::fit_cwmle`] and the
//! Monte Carlo harness in [`simulate`].

pub mod cli;
pub mod cwmle;
pub mod data;
pub mod error;
pub mod estimators;
pub mod simulate;
pub mod unpack;

pub use cwmle::{fit_cwmle, fit_unweighted, EmConfig, EmInit};
pub use data::{
    load_weighted_csv, read_incomplete_csv, write_incomplete_csv, EstimateReport, GaussianParams,
    IncompleteRow, Method, UnpackedDataset, WeightedDataset,
};
pub use error::{Error, Result};
pub use estimators::{cw_cov, cw_mean, is_psd, regularize_psd, PairWeightRule};
pub use unpack::{decompose_row, unpack_dataset, unpack_row, LevelDecomposition};
