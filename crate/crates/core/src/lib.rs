//! Covariance forecasting and minimum-variance backtesting.

pub mod cab;
pub mod classical;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod garch;
pub mod linalg;
pub mod models;
pub mod optim;
pub mod portfolio;
pub mod rolling;
pub mod scalar;
pub mod sim;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Matrix = linalg::Matrix<f64>;
pub type CovMatrix = rolling::CovMatrix<f64>;
pub type ReturnPanel = data::ReturnPanel<f64>;
pub type CabModel = cab::CabModel<f64>;
pub type ForecastRun = models::ForecastRun<f64>;
