//! Full-batch limited-memory BFGS with Armijo backtracking.
//!
//! The search direction comes from the usual two-loop recursion over the last
//! `memory` curvature pairs. When the pair history is empty, or the recursion
//! does not yield a descent direction, the step falls back to normalized
//! steepest descent. Frozen coordinates have their gradient zeroed and are
//! never written, so they come back bit-identical.

use std::collections::VecDeque;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{EnnError, Result};
use crate::loss::{Loss, Objective, RiskValue};
use crate::model::{EnnConfig, ModelParams};
use crate::transfer::FreezeSpec;

pub const LBFGS_MEMORY: usize = 10;
pub const ARMIJO_C: f64 = 1e-4;
pub const BACKTRACK_SHRINK: f64 = 0.5;
pub const MAX_HALVINGS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScale {
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)) per layer.
    GlorotUniform,
}

/// Random weights, zero biases; deterministic in `seed`.
pub fn init_params(p: usize, q: usize, seed: u64, scale: InitScale) -> ModelParams {
    assert!(p > 0 && q > 0, "p and q must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s1, s2) = match scale {
        InitScale::GlorotUniform => ((6.0 / (p + q) as f64).sqrt(), (6.0 / (q + 1) as f64).sqrt()),
    };
    let w1 = Array2::from_shape_simple_fn((p, q), || rng.random_range(-s1..=s1));
    let w2 = Array1::from_shape_simple_fn(q, || rng.random_range(-s2..=s2));
    ModelParams::new(w1, Array1::zeros(q), w2, 0.0).expect("finite by construction")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradTol,
    MaxEpochs,
    LineSearchFailure,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::GradTol => "grad_tol",
            Termination::MaxEpochs => "max_epochs",
            Termination::LineSearchFailure => "line_search_failure",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimReport {
    pub iterations: usize,
    pub final_risk: RiskValue,
    /// Infinity norm of the (masked) gradient at the returned parameters.
    pub final_grad_norm: f64,
    pub converged: bool,
    pub termination: Termination,
    /// Total risk at the start and after every accepted step.
    pub risk_trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimSettings {
    pub max_epochs: usize,
    pub grad_tolerance: f64,
    /// Number of stored curvature pairs; 0 gives plain gradient descent.
    pub memory: usize,
}

impl OptimSettings {
    pub fn from_config(cfg: &EnnConfig) -> Self {
        Self {
            max_epochs: cfg.max_epochs,
            grad_tolerance: cfg.grad_tolerance,
            memory: LBFGS_MEMORY,
        }
    }
}

pub fn minimize(
    params0: &ModelParams,
    cfg: &EnnConfig,
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
) -> Result<(ModelParams, OptimReport)> {
    minimize_masked(params0, cfg, x, y, &FreezeSpec::NONE)
}

/// [`minimize`] with the blocks selected by `freeze` held fixed.
pub fn minimize_masked(
    params0: &ModelParams,
    cfg: &EnnConfig,
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    freeze: &FreezeSpec,
) -> Result<(ModelParams, OptimReport)> {
    cfg.validate()?;
    let objective = Objective::expectile(cfg, x, y)?;
    minimize_objective(
        params0,
        &objective,
        &OptimSettings::from_config(cfg),
        freeze,
    )
}

/// Train against an arbitrary per-sample loss (e.g. [`Loss::Squared`]).
pub fn minimize_with_loss(
    params0: &ModelParams,
    cfg: &EnnConfig,
    loss: Loss,
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    freeze: &FreezeSpec,
) -> Result<(ModelParams, OptimReport)> {
    cfg.validate()?;
    let objective = Objective::with_loss(cfg, loss, x, y)?;
    minimize_objective(
        params0,
        &objective,
        &OptimSettings::from_config(cfg),
        freeze,
    )
}

struct Evaluated {
    risk: RiskValue,
    grad: Vec<f64>,
}

struct Problem<'o, 'a> {
    objective: &'o Objective<'a>,
    p: usize,
    q: usize,
    trainable: Vec<bool>,
}

impl Problem<'_, '_> {
    fn eval(&self, flat: &[f64]) -> Result<Evaluated> {
        let params = ModelParams::from_flat(self.p, self.q, flat)?;
        let (risk, grad) = self.objective.value_and_gradient(&params)?;
        let mut grad = grad.to_flat();
        for (g, &t) in grad.iter_mut().zip(&self.trainable) {
            if !t {
                *g = 0.0;
            }
        }
        Ok(Evaluated { risk, grad })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

struct CurvaturePair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

fn steepest_descent(g: &[f64]) -> Vec<f64> {
    let n = norm2(g);
    g.iter().map(|v| -v / n).collect()
}

fn two_loop(g: &[f64], history: &VecDeque<CurvaturePair>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alpha = vec![0.0; history.len()];
    for (i, pair) in history.iter().enumerate().rev() {
        alpha[i] = pair.rho * dot(&pair.s, &q);
        for (qk, yk) in q.iter_mut().zip(&pair.y) {
            *qk -= alpha[i] * yk;
        }
    }
    let last = history.back().expect("non-empty history");
    let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
    for v in q.iter_mut() {
        *v *= gamma;
    }
    for (i, pair) in history.iter().enumerate() {
        let beta = pair.rho * dot(&pair.y, &q);
        for (qk, sk) in q.iter_mut().zip(&pair.s) {
            *qk += (alpha[i] - beta) * sk;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Core loop shared by every public entry point.
pub fn minimize_objective(
    params0: &ModelParams,
    objective: &Objective<'_>,
    settings: &OptimSettings,
    freeze: &FreezeSpec,
) -> Result<(ModelParams, OptimReport)> {
    let (p, q) = (params0.p(), params0.q());
    let problem = Problem {
        objective,
        p,
        q,
        trainable: freeze.trainable_mask(p, q),
    };
    let mut x = params0.to_flat();
    let mut cur = problem.eval(&x)?;
    if !cur.risk.total.is_finite() {
        return Err(EnnError::NonFinite {
            iteration: 0,
            detail: format!("risk {} at the initial parameters", cur.risk.total),
        });
    }
    let mut trace = vec![cur.risk.total];
    let mut history: VecDeque<CurvaturePair> = VecDeque::with_capacity(settings.memory);
    let mut iterations = 0;

    let termination = loop {
        if norm_inf(&cur.grad) <= settings.grad_tolerance {
            break Termination::GradTol;
        }
        if iterations >= settings.max_epochs {
            break Termination::MaxEpochs;
        }

        let mut direction = if history.is_empty() {
            steepest_descent(&cur.grad)
        } else {
            two_loop(&cur.grad, &history)
        };
        let mut slope = dot(&cur.grad, &direction);
        if !(slope < 0.0) {
            history.clear();
            direction = steepest_descent(&cur.grad);
            slope = dot(&cur.grad, &direction);
        }

        let mut accepted = line_search(&problem, &x, &cur, &direction, slope)?;
        if accepted.is_none() && !history.is_empty() {
            // retry once along the gradient before giving up
            history.clear();
            direction = steepest_descent(&cur.grad);
            slope = dot(&cur.grad, &direction);
            accepted = line_search(&problem, &x, &cur, &direction, slope)?;
        }
        let Some((x_new, next)) = accepted else {
            break Termination::LineSearchFailure;
        };
        if next.grad.iter().any(|v| !v.is_finite()) {
            return Err(EnnError::NonFinite {
                iteration: iterations + 1,
                detail: "non-finite gradient".into(),
            });
        }

        if settings.memory > 0 {
            let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
            let yv: Vec<f64> = next
                .grad
                .iter()
                .zip(&cur.grad)
                .map(|(a, b)| a - b)
                .collect();
            let sy = dot(&s, &yv);
            if sy > 1e-10 * norm2(&s) * norm2(&yv) {
                if history.len() == settings.memory {
                    history.pop_front();
                }
                history.push_back(CurvaturePair {
                    rho: 1.0 / sy,
                    s,
                    y: yv,
                });
            }
        }

        x = x_new;
        cur = next;
        iterations += 1;
        trace.push(cur.risk.total);
    };

    let final_grad_norm = norm_inf(&cur.grad);
    let params = ModelParams::from_flat(p, q, &x)?;
    Ok((
        params,
        OptimReport {
            iterations,
            final_risk: cur.risk,
            final_grad_norm,
            converged: termination == Termination::GradTol,
            termination,
            risk_trace: trace,
        },
    ))
}

/// Backtracking from a unit step until the Armijo condition holds.
fn line_search(
    problem: &Problem<'_, '_>,
    x: &[f64],
    cur: &Evaluated,
    direction: &[f64],
    slope: f64,
) -> Result<Option<(Vec<f64>, Evaluated)>> {
    let mut step = 1.0;
    let mut trial = x.to_vec();
    for _ in 0..=MAX_HALVINGS {
        for (i, t) in trial.iter_mut().enumerate() {
            if problem.trainable[i] {
                *t = x[i] + step * direction[i];
            }
        }
        if trial.iter().all(|v| v.is_finite()) {
            let eval = problem.eval(&trial)?;
            let f = eval.risk.total;
            if f.is_finite() && f <= cur.risk.total + ARMIJO_C * step * slope {
                return Ok(Some((trial, eval)));
            }
        }
        step *= BACKTRACK_SHRINK;
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::risk;
    use crate::model::Activation;
    use ndarray::array;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(100, 5, 42, InitScale::GlorotUniform);
        let b = init_params(100, 5, 42, InitScale::GlorotUniform);
        let c = init_params(100, 5, 43, InitScale::GlorotUniform);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = (6.0f64 / 105.0).sqrt();
        assert!(a.w1().iter().all(|w| w.abs() <= bound));
        assert!(a.w2().iter().all(|w| w.abs() <= (6.0f64 / 6.0).sqrt()));
        assert!(a.b1().iter().all(|&b| b == 0.0));
        assert_eq!(a.b2(), 0.0);
    }

    #[test]
    fn stationary_start_converges_immediately() {
        let params = ModelParams::new(array![[2.0]], array![-1.0], array![3.0], 0.5).unwrap();
        let cfg = EnnConfig {
            tau: 0.3,
            ..EnnConfig::default()
        };
        let x = array![[1.0], [2.0], [0.0]];
        let y = crate::model::forward_batch(&params, &cfg, x.view()).unwrap();
        let (fitted, report) = minimize(&params, &cfg, x.view(), y.view()).unwrap();
        assert!(report.converged);
        assert!(report.iterations <= 1);
        assert_eq!(fitted, params);
    }

    #[test]
    fn decreases_risk_monotonically() {
        let cfg = EnnConfig {
            tau: 0.8,
            lambda: 0.01,
            hidden_units: 3,
            ..EnnConfig::default()
        };
        let x = array![[0.0, 1.0], [1.0, 2.0], [2.0, 0.0], [1.0, 1.0], [2.0, 2.0]];
        let y = array![0.3, 1.5, -0.2, 0.9, 2.2];
        let params0 = init_params(2, 3, 7, InitScale::GlorotUniform);
        let r0 = risk(&params0, &cfg, x.view(), y.view()).unwrap().total;
        let (fitted, report) = minimize(&params0, &cfg, x.view(), y.view()).unwrap();
        assert!(report.final_risk.total <= r0);
        assert_eq!(report.risk_trace[0], r0);
        assert!(report.risk_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert_eq!(report.risk_trace.len(), report.iterations + 1);
        assert_eq!(
            risk(&fitted, &cfg, x.view(), y.view()).unwrap(),
            report.final_risk
        );
    }

    #[test]
    fn freeze_all_returns_start() {
        let cfg = EnnConfig::default();
        let x = array![[0.0, 1.0], [1.0, 2.0]];
        let y = array![1.0, 2.0];
        let params0 = init_params(2, 2, 1, InitScale::GlorotUniform);
        let (fitted, report) =
            minimize_masked(&params0, &cfg, x.view(), y.view(), &FreezeSpec::ALL).unwrap();
        assert_eq!(fitted, params0);
        assert_eq!(report.iterations, 0);
    }

    #[test]
    fn frozen_negative_zero_survives() {
        let cfg = EnnConfig::default();
        let params0 = ModelParams::new(array![[-0.0]], array![-0.0], array![1.0], 0.0).unwrap();
        let x = array![[1.0], [2.0]];
        let y = array![1.0, 3.0];
        let freeze = FreezeSpec {
            freeze_w1: true,
            freeze_b1: true,
            ..FreezeSpec::NONE
        };
        let (fitted, _) = minimize_masked(&params0, &cfg, x.view(), y.view(), &freeze).unwrap();
        assert_eq!(fitted.w1()[[0, 0]].to_bits(), (-0.0f64).to_bits());
        assert_eq!(fitted.b1()[0].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn gradient_descent_mode_also_descends() {
        let cfg = EnnConfig {
            hidden_activation: Activation::Tanh,
            ..EnnConfig::default()
        };
        let x = array![[0.0, 1.0], [1.0, 2.0], [2.0, 0.0]];
        let y = array![0.3, 1.5, -0.2];
        let obj = Objective::expectile(&cfg, x.view(), y.view()).unwrap();
        let settings = OptimSettings {
            max_epochs: 50,
            grad_tolerance: 1e-8,
            memory: 0,
        };
        let params0 = init_params(2, 2, 3, InitScale::GlorotUniform);
        let (_, report) = minimize_objective(&params0, &obj, &settings, &FreezeSpec::NONE).unwrap();
        assert!(report.risk_trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(report.final_risk.total < report.risk_trace[0]);
    }

    #[test]
    fn non_finite_start_is_reported() {
        let cfg = EnnConfig::default();
        let params0 = init_params(1, 1, 0, InitScale::GlorotUniform).with_b2(1e200);
        let x = array![[0.0]];
        let y = array![-1e200];
        let err = minimize(&params0, &cfg, x.view(), y.view()).unwrap_err();
        assert!(
            matches!(err, EnnError::NonFinite { iteration: 0, .. }),
            "{err}"
        );
    }
}
