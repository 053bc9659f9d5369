//! Parameter transfer between two phenotypes measured on the same covariates.
//!
//! A source model is fitted on the source phenotype, copied as the starting
//! point for the target phenotype, and refitted with selected blocks frozen.
//! The default recipe freezes the input→hidden layer and retrains the output
//! layer.

use std::fmt;
use std::str::FromStr;

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{EnnError, Result};
use crate::experiment::{run_with_plan, ExperimentConfig, ExperimentReport};
use crate::model::{EnnConfig, ModelParams};
use crate::optim::{init_params, minimize, minimize_masked, InitScale, OptimReport};

/// Which parameter blocks stay fixed during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FreezeSpec {
    pub freeze_w1: bool,
    pub freeze_b1: bool,
    pub freeze_w2: bool,
    pub freeze_b2: bool,
}

impl FreezeSpec {
    pub const NONE: FreezeSpec = FreezeSpec {
        freeze_w1: false,
        freeze_b1: false,
        freeze_w2: false,
        freeze_b2: false,
    };
    pub const ALL: FreezeSpec = FreezeSpec {
        freeze_w1: true,
        freeze_b1: true,
        freeze_w2: true,
        freeze_b2: true,
    };
    /// Keep input→hidden weights and biases; retrain the output layer.
    pub const HIDDEN_LAYER: FreezeSpec = FreezeSpec {
        freeze_w1: true,
        freeze_b1: true,
        freeze_w2: false,
        freeze_b2: false,
    };

    pub fn is_all(&self) -> bool {
        *self == Self::ALL
    }

    /// Per-entry trainable flags in [`ModelParams::to_flat`] order.
    pub fn trainable_mask(&self, p: usize, q: usize) -> Vec<bool> {
        let mut mask = Vec::with_capacity(p * q + 2 * q + 1);
        mask.extend(std::iter::repeat_n(!self.freeze_w1, p * q));
        mask.extend(std::iter::repeat_n(!self.freeze_b1, q));
        mask.extend(std::iter::repeat_n(!self.freeze_w2, q));
        mask.push(!self.freeze_b2);
        mask
    }
}

impl Default for FreezeSpec {
    fn default() -> Self {
        Self::HIDDEN_LAYER
    }
}

impl FromStr for FreezeSpec {
    type Err = EnnError;

    /// `none`, `all`, or a concatenation of block names such as `w1b1`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "none" => return Ok(Self::NONE),
            "all" => return Ok(Self::ALL),
            _ => {}
        }
        let mut spec = Self::NONE;
        let mut rest = s.as_str();
        while !rest.is_empty() {
            let (block, tail) = rest.split_at(rest.len().min(2));
            match block {
                "w1" => spec.freeze_w1 = true,
                "b1" => spec.freeze_b1 = true,
                "w2" => spec.freeze_w2 = true,
                "b2" => spec.freeze_b2 = true,
                _ => {
                    return Err(EnnError::Config(format!(
                        "bad freeze spec {s:?}; use none, all, or blocks like w1b1"
                    )))
                }
            }
            rest = tail;
        }
        Ok(spec)
    }
}

impl fmt::Display for FreezeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == Self::NONE {
            return f.write_str("none");
        }
        if *self == Self::ALL {
            return f.write_str("all");
        }
        for (on, name) in [
            (self.freeze_w1, "w1"),
            (self.freeze_b1, "b1"),
            (self.freeze_w2, "w2"),
            (self.freeze_b2, "b2"),
        ] {
            if on {
                f.write_str(name)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferPlan {
    pub source_phenotype: String,
    pub target_phenotype: String,
    #[serde(default)]
    pub freeze: FreezeSpec,
    #[serde(default = "default_true")]
    pub reuse_as_warm_start: bool,
}

fn default_true() -> bool {
    true
}

impl TransferPlan {
    /// Warm start with the hidden layer frozen.
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            source_phenotype: source.into(),
            target_phenotype: target.into(),
            freeze: FreezeSpec::HIDDEN_LAYER,
            reuse_as_warm_start: true,
        }
    }

    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        if self.source_phenotype == self.target_phenotype {
            return Err(EnnError::Config(format!(
                "source and target phenotype are both {:?}",
                self.source_phenotype
            )));
        }
        ds.phenotype(&self.source_phenotype)?;
        ds.phenotype(&self.target_phenotype)?;
        Ok(())
    }
}

/// Fit the source-task model from a seeded random start.
pub fn fit_source(
    cfg: &EnnConfig,
    x: ArrayView2<'_, f64>,
    y_source: ArrayView1<'_, f64>,
) -> Result<(ModelParams, OptimReport)> {
    cfg.validate()?;
    if x.ncols() == 0 {
        return Err(EnnError::Config("dataset has no covariate columns".into()));
    }
    let params0 = init_params(
        x.ncols(),
        cfg.hidden_units,
        cfg.seed,
        InitScale::GlorotUniform,
    );
    minimize(&params0, cfg, x, y_source)
}

/// Fit the target task starting from `source_params` (or a fresh start when
/// the plan disables warm starting), holding `plan.freeze` blocks fixed.
pub fn transfer_fit(
    source_params: &ModelParams,
    plan: &TransferPlan,
    cfg: &EnnConfig,
    x: ArrayView2<'_, f64>,
    y_target: ArrayView1<'_, f64>,
) -> Result<(ModelParams, OptimReport)> {
    if source_params.p() != x.ncols() {
        return Err(EnnError::DimensionMismatch {
            what: "source model covariates vs target dataset",
            expected: source_params.p(),
            actual: x.ncols(),
        });
    }
    let params0 = if plan.reuse_as_warm_start {
        source_params.clone()
    } else {
        init_params(
            x.ncols(),
            cfg.hidden_units,
            cfg.seed,
            InitScale::GlorotUniform,
        )
    };
    let cfg = EnnConfig {
        hidden_units: params0.q(),
        ..cfg.clone()
    };
    minimize_masked(&params0, &cfg, x, y_target, &plan.freeze)
}

/// Paired ENN.TF vs ENN comparison over replicated 3:1:1 splits.
///
/// Both arms see identical splits and initialization seeds. The source model
/// is selected and fitted on the training rows using the source phenotype.
pub fn compare_transfer(
    cfg: &ExperimentConfig,
    plan: &TransferPlan,
    ds: &Dataset,
) -> Result<ExperimentReport> {
    plan.validate(ds)?;
    run_with_plan(cfg, ds, &plan.target_phenotype, Some(plan))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::risk;
    use crate::model::forward_batch;
    use ndarray::{Array1, Array2};
    use rand::{Rng, SeedableRng};

    fn data(seed: u64) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_simple_fn((60, 4), || rng.random_range(0..3) as f64);
        let ys: Array1<f64> = x
            .rows()
            .into_iter()
            .map(|r| (r[0] - r[1]).max(0.0) + 0.5 * r[2] + rng.random_range(-0.1..0.1))
            .collect();
        let yt: Array1<f64> = x
            .rows()
            .into_iter()
            .zip(&ys)
            .map(|(r, s)| 0.8 * s + 0.2 * r[3] + rng.random_range(-0.1..0.1))
            .collect();
        (x, ys, yt)
    }

    fn cfg() -> EnnConfig {
        EnnConfig {
            tau: 0.4,
            lambda: 0.01,
            hidden_units: 3,
            seed: 5,
            ..EnnConfig::default()
        }
    }

    #[test]
    fn freeze_spec_parsing() {
        assert_eq!(
            "w1b1".parse::<FreezeSpec>().unwrap(),
            FreezeSpec::HIDDEN_LAYER
        );
        assert_eq!("none".parse::<FreezeSpec>().unwrap(), FreezeSpec::NONE);
        assert_eq!("ALL".parse::<FreezeSpec>().unwrap(), FreezeSpec::ALL);
        assert!("w3".parse::<FreezeSpec>().is_err());
        for s in [FreezeSpec::HIDDEN_LAYER, FreezeSpec::NONE, FreezeSpec::ALL] {
            assert_eq!(s.to_string().parse::<FreezeSpec>().unwrap(), s);
        }
        assert_eq!(
            FreezeSpec::HIDDEN_LAYER.trainable_mask(2, 1),
            vec![false, false, false, true, true]
        );
    }

    #[test]
    fn constant_source_is_reproduced() {
        let (x, _, _) = data(1);
        let y = Array1::from_elem(x.nrows(), 2.5);
        let cfg = EnnConfig {
            lambda: 0.0,
            grad_tolerance: 1e-9,
            ..cfg()
        };
        let (params, _) = fit_source(&cfg, x.view(), y.view()).unwrap();
        let pred = forward_batch(&params, &cfg, x.view()).unwrap();
        assert!(pred.iter().all(|v| (v - 2.5).abs() < 1e-4));
    }

    #[test]
    fn source_fit_is_deterministic_and_beats_constant() {
        let (x, ys, _) = data(2);
        let (a, ra) = fit_source(&cfg(), x.view(), ys.view()).unwrap();
        let (b, _) = fit_source(&cfg(), x.view(), ys.view()).unwrap();
        assert_eq!(a, b);
        let mu = crate::oracle::scalar_expectile(ys.view(), 0.4).unwrap();
        let constant = ModelParams::zeros(4, 3).with_b2(mu);
        let base = risk(
            &constant,
            &EnnConfig {
                lambda: 0.0,
                ..cfg()
            },
            x.view(),
            ys.view(),
        )
        .unwrap();
        assert!(ra.final_risk.empirical < base.empirical);
    }

    #[test]
    fn hidden_layer_is_kept_bitwise() {
        let (x, ys, yt) = data(3);
        let (source, _) = fit_source(&cfg(), x.view(), ys.view()).unwrap();
        let plan = TransferPlan::new("s", "t");
        let (target, report) = transfer_fit(&source, &plan, &cfg(), x.view(), yt.view()).unwrap();
        assert_eq!(target.w1(), source.w1());
        assert_eq!(target.b1(), source.b1());
        assert_ne!(target.w2(), source.w2());
        // warm start: first trace entry is the source model's risk on the target
        let at_source = risk(&source, &cfg(), x.view(), yt.view()).unwrap();
        assert_eq!(report.risk_trace[0], at_source.total);
    }

    #[test]
    fn freeze_all_returns_source() {
        let (x, ys, yt) = data(4);
        let (source, _) = fit_source(&cfg(), x.view(), ys.view()).unwrap();
        let plan = TransferPlan {
            freeze: FreezeSpec::ALL,
            ..TransferPlan::new("s", "t")
        };
        let (target, _) = transfer_fit(&source, &plan, &cfg(), x.view(), yt.view()).unwrap();
        assert_eq!(target, source);
    }

    #[test]
    fn same_phenotype_warm_start_is_already_converged() {
        let (x, ys, _) = data(5);
        let cfg = EnnConfig {
            hidden_activation: crate::model::Activation::Tanh,
            grad_tolerance: 1e-8,
            max_epochs: 5000,
            ..cfg()
        };
        let (source, sr) = fit_source(&cfg, x.view(), ys.view()).unwrap();
        assert!(
            sr.converged,
            "{:?} {} {}",
            sr.termination, sr.iterations, sr.final_grad_norm
        );
        let plan = TransferPlan {
            freeze: FreezeSpec::NONE,
            ..TransferPlan::new("s", "t")
        };
        let (_, report) = transfer_fit(&source, &plan, &cfg, x.view(), ys.view()).unwrap();
        assert_eq!(report.risk_trace[0], sr.final_risk.total);
        assert!(report.iterations <= 2, "{}", report.iterations);
    }

    #[test]
    fn cold_start_without_freezing_is_scratch_training() {
        let (x, ys, yt) = data(6);
        let (source, _) = fit_source(&cfg(), x.view(), ys.view()).unwrap();
        let plan = TransferPlan {
            freeze: FreezeSpec::NONE,
            reuse_as_warm_start: false,
            ..TransferPlan::new("s", "t")
        };
        let (a, ra) = transfer_fit(&source, &plan, &cfg(), x.view(), yt.view()).unwrap();
        let (b, rb) = fit_source(&cfg(), x.view(), yt.view()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (x, _, yt) = data(7);
        let source = ModelParams::zeros(3, 2);
        let err = transfer_fit(
            &source,
            &TransferPlan::new("s", "t"),
            &cfg(),
            x.view(),
            yt.view(),
        )
        .unwrap_err();
        assert!(matches!(err, EnnError::DimensionMismatch { .. }));
    }
}
