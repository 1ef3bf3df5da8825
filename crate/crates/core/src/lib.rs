//! Closed-loop insulin dosing: a Thompson Sampling policy proposes boluses, a
//! latent-ODE forecaster predicts the glucose response, and a conformal safety
//! gate scales or rejects doses before they reach the virtual patient.

pub mod baselines;
pub mod bench;
pub mod diffkit;
pub mod error;
pub mod forecaster;
pub mod looprt;
pub mod safegate;
pub mod tspolicy;
pub mod vpatient;

pub use error::{Error, Result};
