//! Asymmetric squared loss, the ridge-penalized empirical risk, and its
//! backpropagated gradient.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{EnnError, Result};
use crate::model::{check_tau, Activation, EnnConfig, ModelParams};

/// Asymmetric squared loss at level `tau`:
/// `(1 - tau)(y - f)^2` if `y < f`, else `tau (y - f)^2`.
pub fn loss_tau(tau: f64, y: f64, f: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(asym_loss(tau, y, f))
}

/// Derivative of [`loss_tau`] with respect to the prediction `f`.
pub fn loss_tau_dfdf(tau: f64, y: f64, f: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(asym_dloss(tau, y, f))
}

#[inline]
fn asym_loss(tau: f64, y: f64, f: f64) -> f64 {
    let r = y - f;
    if y < f {
        (1.0 - tau) * r * r
    } else {
        tau * r * r
    }
}

#[inline]
fn asym_dloss(tau: f64, y: f64, f: f64) -> f64 {
    let d = f - y;
    if y < f {
        2.0 * (1.0 - tau) * d
    } else {
        2.0 * tau * d
    }
}

/// Per-sample loss used by the empirical risk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Loss {
    /// Asymmetric squared loss at level `tau`.
    Expectile { tau: f64 },
    /// Plain squared error `(y - f)^2` (classical network).
    Squared,
}

impl Loss {
    #[inline]
    pub fn value(self, y: f64, f: f64) -> f64 {
        match self {
            Loss::Expectile { tau } => asym_loss(tau, y, f),
            Loss::Squared => {
                let r = y - f;
                r * r
            }
        }
    }

    #[inline]
    pub fn derivative(self, y: f64, f: f64) -> f64 {
        match self {
            Loss::Expectile { tau } => asym_dloss(tau, y, f),
            Loss::Squared => 2.0 * (f - y),
        }
    }

    fn validate(self) -> Result<()> {
        match self {
            Loss::Expectile { tau } => check_tau(tau),
            Loss::Squared => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskValue {
    pub empirical: f64,
    pub penalty: f64,
    pub total: f64,
}

/// Gradient of the total risk, shaped like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub d_w1: Array2<f64>,
    pub d_b1: Array1<f64>,
    pub d_w2: Array1<f64>,
    pub d_b2: f64,
}

impl Gradient {
    pub fn zeros(p: usize, q: usize) -> Self {
        Self {
            d_w1: Array2::zeros((p, q)),
            d_b1: Array1::zeros(q),
            d_w2: Array1::zeros(q),
            d_b2: 0.0,
        }
    }

    /// Same layout as [`ModelParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.d_w1.len() + 2 * self.d_b1.len() + 1);
        out.extend(self.d_w1.iter().copied());
        out.extend(self.d_b1.iter().copied());
        out.extend(self.d_w2.iter().copied());
        out.push(self.d_b2);
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.to_flat().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Objective bundle: data, loss, penalty strength and activations.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub x: ArrayView2<'a, f64>,
    pub y: ArrayView1<'a, f64>,
    pub loss: Loss,
    pub lambda: f64,
    pub hidden: Activation,
    pub output: Activation,
}

impl<'a> Objective<'a> {
    /// ENN objective at the configuration's τ.
    pub fn expectile(
        cfg: &EnnConfig,
        x: ArrayView2<'a, f64>,
        y: ArrayView1<'a, f64>,
    ) -> Result<Self> {
        Self::with_loss(cfg, Loss::Expectile { tau: cfg.tau }, x, y)
    }

    pub fn with_loss(
        cfg: &EnnConfig,
        loss: Loss,
        x: ArrayView2<'a, f64>,
        y: ArrayView1<'a, f64>,
    ) -> Result<Self> {
        loss.validate()?;
        if !(cfg.lambda.is_finite() && cfg.lambda >= 0.0) {
            return Err(EnnError::Config(format!(
                "lambda must be finite and >= 0, got {}",
                cfg.lambda
            )));
        }
        if x.nrows() == 0 {
            return Err(EnnError::EmptyDataset("risk needs at least one sample"));
        }
        if y.len() != x.nrows() {
            return Err(EnnError::DimensionMismatch {
                what: "response length",
                expected: x.nrows(),
                actual: y.len(),
            });
        }
        Ok(Self {
            x,
            y,
            loss,
            lambda: cfg.lambda,
            hidden: cfg.hidden_activation,
            output: cfg.output_activation,
        })
    }

    fn check_params(&self, params: &ModelParams) -> Result<()> {
        if self.x.ncols() != params.p() {
            return Err(EnnError::DimensionMismatch {
                what: "covariate matrix columns",
                expected: params.p(),
                actual: self.x.ncols(),
            });
        }
        Ok(())
    }

    fn penalty(&self, params: &ModelParams) -> f64 {
        if self.lambda == 0.0 {
            return 0.0;
        }
        let sq: f64 = params.w1().iter().map(|w| w * w).sum::<f64>()
            + params.w2().iter().map(|w| w * w).sum::<f64>();
        self.lambda * sq
    }

    pub fn value(&self, params: &ModelParams) -> Result<RiskValue> {
        self.check_params(params)?;
        let q = params.q();
        let mut buf = vec![0.0; q];
        let mut sum = 0.0;
        for (row, &yi) in self.x.rows().into_iter().zip(self.y.iter()) {
            params.hidden_pre(row, &mut buf);
            for v in buf.iter_mut() {
                *v = self.hidden.apply(*v);
            }
            let f = self.output.apply(params.output_pre(&buf));
            sum += self.loss.value(yi, f);
        }
        let empirical = sum / self.x.nrows() as f64;
        let penalty = self.penalty(params);
        Ok(RiskValue {
            empirical,
            penalty,
            total: empirical + penalty,
        })
    }

    pub fn value_and_gradient(&self, params: &ModelParams) -> Result<(RiskValue, Gradient)> {
        self.check_params(params)?;
        let (p, q) = (params.p(), params.q());
        let n = self.x.nrows();
        let inv_n = 1.0 / n as f64;
        let w2 = params.w2();

        let mut grad = Gradient::zeros(p, q);
        let d_w1 = grad.d_w1.as_slice_mut().expect("standard layout");
        let mut d_b1 = vec![0.0; q];
        let mut d_w2 = vec![0.0; q];
        let mut d_b2 = 0.0;

        let mut z = vec![0.0; q];
        let mut h = vec![0.0; q];
        let mut delta = vec![0.0; q];
        let mut sum = 0.0;

        for (row, &yi) in self.x.rows().into_iter().zip(self.y.iter()) {
            params.hidden_pre(row, &mut z);
            for (hq, &zq) in h.iter_mut().zip(&z) {
                *hq = self.hidden.apply(zq);
            }
            let o = params.output_pre(&h);
            let f = self.output.apply(o);
            sum += self.loss.value(yi, f);

            let delta_o = self.loss.derivative(yi, f) * self.output.derivative(o, f) * inv_n;
            if delta_o == 0.0 {
                continue;
            }
            d_b2 += delta_o;
            for k in 0..q {
                d_w2[k] += delta_o * h[k];
                delta[k] = delta_o * w2[k] * self.hidden.derivative(z[k], h[k]);
                d_b1[k] += delta[k];
            }
            for (j, &xj) in row.iter().enumerate() {
                if xj == 0.0 {
                    continue;
                }
                let g = &mut d_w1[j * q..(j + 1) * q];
                for (gk, &dk) in g.iter_mut().zip(&delta) {
                    *gk += xj * dk;
                }
            }
        }

        if self.lambda != 0.0 {
            let two_lambda = 2.0 * self.lambda;
            for (g, &w) in d_w1.iter_mut().zip(params.w1().iter()) {
                *g += two_lambda * w;
            }
            for (g, &w) in d_w2.iter_mut().zip(w2.iter()) {
                *g += two_lambda * w;
            }
        }
        grad.d_b1 = Array1::from(d_b1);
        grad.d_w2 = Array1::from(d_w2);
        grad.d_b2 = d_b2;

        let empirical = sum / n as f64;
        let penalty = self.penalty(params);
        let risk = RiskValue {
            empirical,
            penalty,
            total: empirical + penalty,
        };
        Ok((risk, grad))
    }
}

/// Penalized empirical risk `(1/n) sum L_tau(y_i, f(x_i)) + lambda (|w1|^2 + |w2|^2)`.
/// Biases are not penalized.
pub fn risk(
    params: &ModelParams,
    cfg: &EnnConfig,
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
) -> Result<RiskValue> {
    Objective::expectile(cfg, x, y)?.value(params)
}

/// Analytic gradient of [`risk`]'s total with respect to every parameter.
pub fn risk_gradient(
    params: &ModelParams,
    cfg: &EnnConfig,
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
) -> Result<Gradient> {
    Ok(Objective::expectile(cfg, x, y)?
        .value_and_gradient(params)?
        .1)
}
