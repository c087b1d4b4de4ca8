//! Identification of a three-module serial cascade observed through two
//! noisy sensors.
//!
//! The pipeline is: simulate data ([`netsim`]), fit a high-order FIR model
//! to the 2x2 transfer matrix ([`firstep`]), then reduce it to the
//! structured module parameters by weighted null-space fitting ([`wnsf`]).
//! A prediction-error baseline ([`pem`]) and a Monte Carlo harness
//! ([`montecarlo`]) are included for comparison.

pub mod error;
pub mod firstep;
pub mod lti;
pub mod montecarlo;
pub mod netsim;
pub mod pem;
pub mod theta;
pub mod wnsf;

pub use nalgebra;

pub use error::{Error, ErrorKind, Result};
pub use firstep::{estimate_fir, FirEstimate};
pub use lti::{OrderSpec, Polynomial, TransferFunction};
pub use montecarlo::{run_monte_carlo, summarize, ExperimentConfig, Method, ResultRow, SummaryRow};
pub use netsim::{simulate_dataset, CascadeModel, DataRecord, InputSpec, SisoRecord};
pub use pem::{pem_cost, pem_minimize, PemConfig, PemResult};
pub use theta::ThetaVector;
pub use wnsf::{wnsf_identify, wnsf_siso, EstimateReport, Variant, WnsfConfig};
