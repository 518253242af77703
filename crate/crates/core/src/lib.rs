//! Double/debiased machine learning with regression calibration for the
//! effect of one mismeasured exposure among correlated mismeasured
//! confounders.
//!
//! The crate is organised bottom-up:
//!
//! * [`calibration`]: measurement-error model fitted on a validation study.
//! * [`learners`]: least squares and cross-validated LASSO nuisance fits.
//! * [`dml`]: cross-fit orthogonalized estimator and its two-component variance.
//! * [`simulation`]: scenario generator and Monte-Carlo replicate harness.
//! * [`pipeline`]: CSV ingestion, preprocessing and the multi-pollutant loop.

pub mod calibration;
pub mod dml;
pub mod error;
pub mod learners;
pub mod linalg;
pub mod pipeline;
pub mod rng;
pub mod simulation;
pub mod split;

pub use calibration::{CalibrationModel, MeatRows, ValidationStudy};
pub use dml::{DmlEstimate, MainStudy, Mode};
pub use error::{Error, Result};
pub use learners::{DesignSpec, LearnerConfig, LinearFit};
