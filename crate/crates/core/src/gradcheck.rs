//! Central finite-difference verification of the analytic risk gradient.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::derive_seed;

use crate::error::Result;
use crate::loss::{risk, risk_gradient, Gradient};
use crate::model::{param_count_for, Activation, EnnConfig, ModelParams};

/// Denominator floor for the relative error `|a - n| / max(|a|, |n|, floor)`,
/// so entries whose true derivative is ~0 are judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub block: &'static str,
    pub max_rel_error: f64,
    /// Row-major indices within the block whose error exceeds the tolerance.
    pub flagged: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.flagged.is_empty())
    }

    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().fold(0.0, |m, b| m.max(b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Central differences of the total risk, one parameter at a time.
pub fn numeric_gradient(
    params: &ModelParams,
    cfg: &EnnConfig,
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    step: f64,
) -> Result<Gradient> {
    let (p, q) = (params.p(), params.q());
    let mut flat = params.to_flat();
    let mut out = Vec::with_capacity(flat.len());
    for i in 0..flat.len() {
        let orig = flat[i];
        flat[i] = orig + step;
        let plus = risk(&ModelParams::from_flat(p, q, &flat)?, cfg, x, y)?.total;
        flat[i] = orig - step;
        let minus = risk(&ModelParams::from_flat(p, q, &flat)?, cfg, x, y)?.total;
        flat[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    let as_params = ModelParams::from_flat(p, q, &out)?;
    Ok(Gradient {
        d_w1: as_params.w1().to_owned(),
        d_b1: as_params.b1().to_owned(),
        d_w2: as_params.w2().to_owned(),
        d_b2: as_params.b2(),
    })
}

pub fn compare_gradients(analytic: &Gradient, numeric: &Gradient, tol: f64) -> GradCheckReport {
    fn block<'a>(
        name: &'static str,
        a: impl Iterator<Item = &'a f64>,
        n: impl Iterator<Item = &'a f64>,
        tol: f64,
    ) -> BlockReport {
        let mut max_rel_error: f64 = 0.0;
        let mut flagged = Vec::new();
        for (i, (a, n)) in a.zip(n).enumerate() {
            let e = relative_error(*a, *n);
            max_rel_error = max_rel_error.max(e);
            // NaN compares false, so test the negation
            if !(e <= tol) {
                flagged.push(i);
            }
        }
        BlockReport {
            block: name,
            max_rel_error,
            flagged,
        }
    }
    GradCheckReport {
        tolerance: tol,
        blocks: vec![
            block("w1", analytic.d_w1.iter(), numeric.d_w1.iter(), tol),
            block("b1", analytic.d_b1.iter(), numeric.d_b1.iter(), tol),
            block("w2", analytic.d_w2.iter(), numeric.d_w2.iter(), tol),
            block(
                "b2",
                std::iter::once(&analytic.d_b2),
                std::iter::once(&numeric.d_b2),
                tol,
            ),
        ],
    }
}

/// Compare [`risk_gradient`] against central differences with step `step`.
pub fn check_gradient(
    params: &ModelParams,
    cfg: &EnnConfig,
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let analytic = risk_gradient(params, cfg, x, y)?;
    let numeric = numeric_gradient(params, cfg, x, y, step)?;
    Ok(compare_gradients(&analytic, &numeric, tol))
}

/// Rows where the residual or any hidden pre-activation lies within `margin`
/// of a kink, where finite differences straddle a non-smooth point.
pub fn near_kink_rows(
    params: &ModelParams,
    cfg: &EnnConfig,
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    margin: f64,
) -> Vec<usize> {
    let mut z = vec![0.0; params.q()];
    let mut out = Vec::new();
    for (i, (row, &yi)) in x.rows().into_iter().zip(y.iter()).enumerate() {
        params.hidden_pre(row, &mut z);
        let near_z = z.iter().any(|v| v.abs() < margin);
        let h: Vec<f64> = z.iter().map(|&v| cfg.hidden_activation.apply(v)).collect();
        let o = params.output_pre(&h);
        let f = cfg.output_activation.apply(o);
        let near_o = cfg.output_activation == Activation::Relu && o.abs() < margin;
        if near_z || near_o || (yi - f).abs() < margin {
            out.push(i);
        }
    }
    out
}

/// Finite-difference step used by [`self_test`].
pub const SELF_TEST_STEP: f64 = 1e-6;
/// Rows this close to a kink are dropped before comparing.
pub const SELF_TEST_KINK_MARGIN: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SelfTestSummary {
    pub instances: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    pub rows_excluded: usize,
}

impl SelfTestSummary {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Random small instance: p, q <= 5, n <= 10, cycling through every
/// activation pair and lambda in {0, 1}.
pub fn random_instance(
    seed: u64,
    index: usize,
) -> (ModelParams, EnnConfig, Array2<f64>, Array1<f64>) {
    const HIDDEN: [Activation; 4] = [
        Activation::Relu,
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::Identity,
    ];
    const OUTPUT: [Activation; 3] = [Activation::Identity, Activation::Relu, Activation::Sigmoid];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, index as u64));
    let p = rng.random_range(1..=5);
    let q = rng.random_range(1..=5);
    let n = rng.random_range(1..=10);
    let cfg = EnnConfig {
        tau: rng.random_range(0.05..0.95),
        lambda: ((index / 12) % 2) as f64,
        hidden_units: q,
        hidden_activation: HIDDEN[index % 4],
        output_activation: OUTPUT[(index / 4) % 3],
        ..EnnConfig::default()
    };
    let mut normal = || rng.sample::<f64, _>(StandardNormal);
    let x = Array2::from_shape_simple_fn((n, p), &mut normal);
    let y = Array1::from_shape_simple_fn(n, &mut normal);
    let flat: Vec<f64> = (0..param_count_for(p, q)).map(|_| normal()).collect();
    let params = ModelParams::from_flat(p, q, &flat).expect("sized by param_count_for");
    (params, cfg, x, y)
}

/// Gradient check over `instances` random problems, kink-adjacent rows removed.
pub fn self_test(instances: usize, seed: u64, tol: f64) -> Result<SelfTestSummary> {
    let mut summary = SelfTestSummary {
        instances,
        failures: 0,
        max_rel_error: 0.0,
        rows_excluded: 0,
    };
    for i in 0..instances {
        let (params, cfg, x, y) = random_instance(seed, i);
        let kinks = near_kink_rows(&params, &cfg, x.view(), y.view(), SELF_TEST_KINK_MARGIN);
        summary.rows_excluded += kinks.len();
        let keep: Vec<usize> = (0..x.nrows()).filter(|r| !kinks.contains(r)).collect();
        if keep.is_empty() {
            continue;
        }
        let xs = x.select(Axis(0), &keep);
        let ys = y.select(Axis(0), &keep);
        let report = check_gradient(&params, &cfg, xs.view(), ys.view(), SELF_TEST_STEP, tol)?;
        summary.max_rel_error = summary.max_rel_error.max(report.max_rel_error());
        if !report.passed() {
            summary.failures += 1;
        }
    }
    Ok(summary)
}
