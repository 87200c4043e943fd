//! Marginal maximum-likelihood estimation of item response theory models
//! and model comparison via Vuong's distinguishability, non-nested, and
//! nested likelihood-ratio tests, alongside AIC/BIC and the traditional
//! likelihood ratio test. Includes a Monte Carlo harness for calibration
//! studies of the tests.

pub mod data;
pub mod error;
pub mod estimation;
pub mod model;
pub mod quadform;
pub mod quadrature;

pub use data::{load_csv, CsvLoad, CsvOptions, ResponseMatrix};
pub use error::{Error, Result};
pub use estimation::{fit_em, marginal_loglik, FitConfig, FittedModel};
pub use model::{nests, ModelFamily, ModelSpec, Nesting, ParameterVector};
pub use quadform::WeightedChiSq;
