//! Low-frequency pattern learning for quantitative trading research.
//!
//! The pipeline runs from closing prices to an overfitting verdict:
//!
//! 1. [`market_data`] turns prices into backward/forward horizon sums of log
//!    fluctuations and scales them with training-portion extrema.
//! 2. [`autoencoder`] compresses the inputs with stacked autoencoders trained
//!    on the training portion only.
//! 3. [`predictor`] batch-trains a feedforward network on the encoded
//!    training rows, then walks the prediction portion with online gradient
//!    descent, emitting a price prediction before each update.
//! 4. [`mms`] trades the predictions with an arithmetic long rule under
//!    capital and transaction costs, next to a perfect-foresight benchmark.
//! 5. [`validation`] measures backtest overfitting (CSCV/PBO), clusters the
//!    trials (ONC) and deflates the best Sharpe ratio (PSR/DSR).
//! 6. [`experiment`] wires it together as a two-stage grid search with a
//!    resumable on-disk store.
//!
//! Runnable walkthroughs for each stage live in `examples/`.

pub mod autoencoder;
pub mod error;
pub mod experiment;
pub mod market_data;
pub mod mms;
pub mod neural;
pub mod predictor;
pub mod stats;
pub mod synth;
pub mod validation;

pub use error::{Error, Result};
