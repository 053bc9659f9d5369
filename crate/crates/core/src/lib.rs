//! Expectile neural networks (single hidden layer) with parameter-transfer
//! learning, for regression of phenotypes on SNP genotypes and covariates.
//!
//! ```
//! use enn::{forward, EnnConfig, ModelParams};
//! use ndarray::array;
//!
//! let params = ModelParams::new(array![[2.0]], array![-1.0], array![3.0], 0.0).unwrap();
//! let y = forward(&params, &EnnConfig::default(), array![1.0].view()).unwrap();
//! assert_eq!(y, 3.0);
//! ```

pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod synth;
pub mod transfer;

pub use data::{load_csv, split, standardize_covariates, Dataset, Schema, SplitIndices, SplitSpec};
pub use error::{EnnError, Result};
pub use experiment::{mse, run_experiment, ExperimentConfig, ExperimentReport};
pub use loss::{loss_tau, loss_tau_dfdf, risk, risk_gradient, Gradient, Loss, RiskValue};
pub use model::{forward, forward_batch, Activation, EnnConfig, ModelFile, ModelParams};
pub use optim::{init_params, minimize, minimize_masked, OptimReport, Termination};
pub use oracle::{linear_expectile_fit, scalar_expectile};
pub use synth::{generate_synthetic, SyntheticSpec};
pub use transfer::{fit_source, transfer_fit, FreezeSpec, TransferPlan};
