//! Calibration of biased outside-option (no-purchase) predictors for
//! multinomial-logit choice models, learned from purchase-only data.
//!
//! The pipeline: learn inside-item utilities from the conditional likelihood
//! of recorded purchases ([`utility`]), turn them into inclusive values, then
//! recover the outside-utility coefficients from a black-box predictor's
//! logits by least squares ([`linear`]), by maximum rank correlation
//! ([`mrc`]) or by aggregating several predictors ([`multi`]). The calibrated
//! model drives assortment decisions ([`assortment`]) and is scored with the
//! metrics in [`metrics`].

pub mod assortment;
pub mod choice;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod io;
pub mod linear;
pub mod metrics;
pub mod mrc;
pub mod multi;
pub mod rng;
pub mod utility;

#[cfg(feature = "cli")]
pub mod cli;

pub use error::{CalibError, Result};
