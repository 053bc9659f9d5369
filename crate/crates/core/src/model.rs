//! Single-hidden-layer expectile network: parameters, configuration and the
//! forward pass.
//!
//! The prediction for a covariate row `x` (length `p`) is
//!
//! ```text
//! h_q  = f1( sum_j x_j * w1[j, q] + b1[q] ),   q = 0..Q
//! yhat = f2( sum_q h_q * w2[q] + b2 )
//! ```
//!
//! There is no implicit leading 1 in `x`; the biases carry the intercepts.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Scaler;
use crate::error::{EnnError, Result};
use crate::transfer::FreezeSpec;

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative given the pre-activation `z` and the activation value `a = f(z)`.
    /// The ReLU derivative at exactly zero is taken as 0.
    #[inline]
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Tanh => 1.0 - a * a,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = EnnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "linear" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            other => Err(EnnError::Config(format!("unknown activation {other:?}"))),
        }
    }
}

/// Hyperparameters and optimizer settings for one ENN fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnnConfig {
    pub tau: f64,
    pub lambda: f64,
    pub hidden_units: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pub max_epochs: usize,
    pub grad_tolerance: f64,
    pub seed: u64,
}

impl Default for EnnConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            lambda: 0.0,
            hidden_units: 5,
            hidden_activation: Activation::Relu,
            output_activation: Activation::Identity,
            max_epochs: 1000,
            grad_tolerance: 1e-6,
            seed: 0,
        }
    }
}

impl EnnConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(EnnError::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if self.hidden_units == 0 {
            return Err(EnnError::Config("hidden_units must be >= 1".into()));
        }
        if self.output_activation == Activation::Tanh {
            return Err(EnnError::Config(
                "output activation must be identity, relu or sigmoid".into(),
            ));
        }
        if self.max_epochs == 0 {
            return Err(EnnError::Config("max_epochs must be >= 1".into()));
        }
        if !(self.grad_tolerance.is_finite() && self.grad_tolerance > 0.0) {
            return Err(EnnError::Config(format!(
                "grad_tolerance must be > 0, got {}",
                self.grad_tolerance
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(EnnError::Config(format!(
            "tau must lie in (0, 1), got {tau}"
        )))
    }
}

/// Weights and biases of a single-hidden-layer ENN.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array1<f64>,
    b2: f64,
}

impl ModelParams {
    pub fn new(w1: Array2<f64>, b1: Array1<f64>, w2: Array1<f64>, b2: f64) -> Result<Self> {
        let (p, q) = w1.dim();
        if p == 0 || q == 0 {
            return Err(EnnError::Config(format!(
                "w1 must be non-empty, got {p}x{q}"
            )));
        }
        if b1.len() != q {
            return Err(EnnError::DimensionMismatch {
                what: "b1 length",
                expected: q,
                actual: b1.len(),
            });
        }
        if w2.len() != q {
            return Err(EnnError::DimensionMismatch {
                what: "w2 length",
                expected: q,
                actual: w2.len(),
            });
        }
        let params = Self {
            w1: w1.as_standard_layout().into_owned(),
            b1,
            w2,
            b2,
        };
        if !params.is_finite() {
            return Err(EnnError::Config("model parameters must be finite".into()));
        }
        Ok(params)
    }

    pub fn zeros(p: usize, q: usize) -> Self {
        assert!(p > 0 && q > 0, "p and q must be positive");
        Self {
            w1: Array2::zeros((p, q)),
            b1: Array1::zeros(q),
            w2: Array1::zeros(q),
            b2: 0.0,
        }
    }

    pub fn p(&self) -> usize {
        self.w1.nrows()
    }

    pub fn q(&self) -> usize {
        self.w1.ncols()
    }

    pub fn w1(&self) -> ArrayView2<'_, f64> {
        self.w1.view()
    }

    pub fn b1(&self) -> ArrayView1<'_, f64> {
        self.b1.view()
    }

    pub fn w2(&self) -> ArrayView1<'_, f64> {
        self.w2.view()
    }

    pub fn b2(&self) -> f64 {
        self.b2
    }

    pub fn with_b2(mut self, b2: f64) -> Self {
        self.b2 = b2;
        self
    }

    /// p·q + q + q + 1
    pub fn param_count(&self) -> usize {
        param_count_for(self.p(), self.q())
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().all(|v| v.is_finite())
            && self.b1.iter().all(|v| v.is_finite())
            && self.w2.iter().all(|v| v.is_finite())
            && self.b2.is_finite()
    }

    /// Flat layout: w1 row-major, then b1, w2, b2.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend(self.w1.iter().copied());
        out.extend(self.b1.iter().copied());
        out.extend(self.w2.iter().copied());
        out.push(self.b2);
        out
    }

    pub fn from_flat(p: usize, q: usize, flat: &[f64]) -> Result<Self> {
        let expected = param_count_for(p, q);
        if flat.len() != expected {
            return Err(EnnError::DimensionMismatch {
                what: "flat parameter vector",
                expected,
                actual: flat.len(),
            });
        }
        let (w1, rest) = flat.split_at(p * q);
        let (b1, rest) = rest.split_at(q);
        let (w2, rest) = rest.split_at(q);
        Ok(Self {
            w1: Array2::from_shape_vec((p, q), w1.to_vec()).expect("shape checked"),
            b1: Array1::from(b1.to_vec()),
            w2: Array1::from(w2.to_vec()),
            b2: rest[0],
        })
    }

    pub(crate) fn w1_slice(&self) -> &[f64] {
        self.w1.as_slice().expect("w1 is kept in standard layout")
    }

    /// Hidden pre-activations for one row, written into `z` (length q).
    #[inline]
    pub(crate) fn hidden_pre(&self, x: ArrayView1<'_, f64>, z: &mut [f64]) {
        let q = self.q();
        let w1 = self.w1_slice();
        z.copy_from_slice(self.b1.as_slice().expect("contiguous b1"));
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            let row = &w1[j * q..(j + 1) * q];
            for (zq, &w) in z.iter_mut().zip(row) {
                *zq += xj * w;
            }
        }
    }

    /// Output pre-activation from hidden activations.
    #[inline]
    pub(crate) fn output_pre(&self, h: &[f64]) -> f64 {
        let mut s = self.b2;
        for (hq, w) in h.iter().zip(self.w2.iter()) {
            s += hq * w;
        }
        s
    }

    fn predict_row(
        &self,
        hidden: Activation,
        output: Activation,
        x: ArrayView1<'_, f64>,
        buf: &mut [f64],
    ) -> f64 {
        self.hidden_pre(x, buf);
        for v in buf.iter_mut() {
            *v = hidden.apply(*v);
        }
        output.apply(self.output_pre(buf))
    }
}

pub fn param_count_for(p: usize, q: usize) -> usize {
    p * q + q + q + 1
}

pub fn param_count(params: &ModelParams) -> usize {
    params.param_count()
}

/// Predicted τ-expectile for a single covariate row.
pub fn forward(params: &ModelParams, cfg: &EnnConfig, x: ArrayView1<'_, f64>) -> Result<f64> {
    if x.len() != params.p() {
        return Err(EnnError::DimensionMismatch {
            what: "covariate vector",
            expected: params.p(),
            actual: x.len(),
        });
    }
    let mut buf = vec![0.0; params.q()];
    Ok(params.predict_row(cfg.hidden_activation, cfg.output_activation, x, &mut buf))
}

/// Row-wise [`forward`]; each entry is bit-identical to the single-row call.
pub fn forward_batch(
    params: &ModelParams,
    cfg: &EnnConfig,
    x: ArrayView2<'_, f64>,
) -> Result<Array1<f64>> {
    if x.ncols() != params.p() {
        return Err(EnnError::DimensionMismatch {
            what: "covariate matrix columns",
            expected: params.p(),
            actual: x.ncols(),
        });
    }
    let mut buf = vec![0.0; params.q()];
    Ok(x.rows()
        .into_iter()
        .map(|row| params.predict_row(cfg.hidden_activation, cfg.output_activation, row, &mut buf))
        .collect())
}

/// Free-form provenance stored alongside a serialized model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingMeta {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phenotype: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub columns: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scaler: Option<Scaler>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_risk: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub termination: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_phenotype: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub freeze: Option<FreezeSpec>,
}

/// On-disk JSON form of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub p: usize,
    pub q: usize,
    pub tau: f64,
    pub lambda: f64,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    #[serde(default)]
    pub training_meta: TrainingMeta,
}

impl ModelFile {
    pub fn new(params: &ModelParams, cfg: &EnnConfig, training_meta: TrainingMeta) -> Self {
        Self {
            schema_version: MODEL_SCHEMA_VERSION,
            p: params.p(),
            q: params.q(),
            tau: cfg.tau,
            lambda: cfg.lambda,
            hidden_activation: cfg.hidden_activation,
            output_activation: cfg.output_activation,
            w1: params.w1.rows().into_iter().map(|r| r.to_vec()).collect(),
            b1: params.b1.to_vec(),
            w2: params.w2.to_vec(),
            b2: params.b2,
            training_meta,
        }
    }

    pub fn params(&self) -> Result<ModelParams> {
        if self.w1.len() != self.p {
            return Err(EnnError::DimensionMismatch {
                what: "w1 rows",
                expected: self.p,
                actual: self.w1.len(),
            });
        }
        let mut flat = Vec::with_capacity(self.p * self.q);
        for row in &self.w1 {
            if row.len() != self.q {
                return Err(EnnError::DimensionMismatch {
                    what: "w1 columns",
                    expected: self.q,
                    actual: row.len(),
                });
            }
            flat.extend_from_slice(row);
        }
        let w1 = Array2::from_shape_vec((self.p, self.q), flat).expect("shape checked");
        ModelParams::new(
            w1,
            Array1::from(self.b1.clone()),
            Array1::from(self.w2.clone()),
            self.b2,
        )
    }

    /// Configuration fields recoverable from the file (optimizer settings take defaults).
    pub fn config(&self) -> EnnConfig {
        EnnConfig {
            tau: self.tau,
            lambda: self.lambda,
            hidden_units: self.q,
            hidden_activation: self.hidden_activation,
            output_activation: self.output_activation,
            seed: self.training_meta.seed.unwrap_or(0),
            ..EnnConfig::default()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)?;
        if file.schema_version != MODEL_SCHEMA_VERSION {
            return Err(EnnError::Config(format!(
                "unsupported model schema_version {}",
                file.schema_version
            )));
        }
        check_tau(file.tau)?;
        file.params()?;
        Ok(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| EnnError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| EnnError::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.context(format!("loading {}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn relu_cfg() -> EnnConfig {
        EnnConfig {
            hidden_activation: Activation::Relu,
            output_activation: Activation::Identity,
            ..EnnConfig::default()
        }
    }

    fn hand_model() -> ModelParams {
        ModelParams::new(array![[2.0]], array![-1.0], array![3.0], 0.0).unwrap()
    }

    #[test]
    fn zero_weights_pass_only_output_bias() {
        let params = ModelParams::zeros(4, 3).with_b2(3.5);
        let x = array![1.0, -2.0, 0.5, 7.0];
        assert_eq!(forward(&params, &relu_cfg(), x.view()).unwrap(), 3.5);
    }

    #[test]
    fn hand_evaluated_relu_model() {
        let params = hand_model();
        assert_eq!(
            forward(&params, &relu_cfg(), array![1.0].view()).unwrap(),
            3.0
        );
        assert_eq!(
            forward(&params, &relu_cfg(), array![0.0].view()).unwrap(),
            0.0
        );
    }

    #[test]
    fn dimension_mismatch_names_lengths() {
        let err = forward(&hand_model(), &relu_cfg(), array![1.0, 2.0].view()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 1") && msg.contains("got 2"), "{msg}");
        let x = Array2::<f64>::zeros((3, 2));
        assert!(forward_batch(&hand_model(), &relu_cfg(), x.view()).is_err());
    }

    #[test]
    fn empty_batch_is_empty() {
        let x = Array2::<f64>::zeros((0, 1));
        assert!(forward_batch(&hand_model(), &relu_cfg(), x.view())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn zero_model_batch_is_constant() {
        let params = ModelParams::zeros(3, 2).with_b2(-1.25);
        let x = array![[1.0, 2.0, 0.0], [0.0, 1.0, 2.0], [2.0, 2.0, 2.0]];
        let out = forward_batch(&params, &relu_cfg(), x.view()).unwrap();
        assert!(out.iter().all(|&v| v == -1.25));
    }

    #[test]
    fn param_counts() {
        assert_eq!(param_count_for(1, 1), 4);
        assert_eq!(param_count_for(149, 5), 756);
        assert_eq!(param_count_for(165, 3), 502);
        assert_eq!(ModelParams::zeros(149, 5).param_count(), 756);
    }

    #[test]
    fn rejects_inconsistent_shapes_and_non_finite() {
        assert!(ModelParams::new(
            Array2::zeros((2, 3)),
            Array1::zeros(2),
            Array1::zeros(3),
            0.0
        )
        .is_err());
        assert!(ModelParams::new(
            Array2::zeros((2, 3)),
            Array1::zeros(3),
            Array1::zeros(2),
            0.0
        )
        .is_err());
        assert!(ModelParams::new(array![[f64::NAN]], array![0.0], array![0.0], 0.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(EnnConfig::default().validate().is_ok());
        for tau in [0.0, 1.0, -0.1, f64::NAN] {
            let cfg = EnnConfig {
                tau,
                ..EnnConfig::default()
            };
            assert!(cfg.validate().is_err(), "tau {tau}");
        }
        let cfg = EnnConfig {
            lambda: -1.0,
            ..EnnConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = EnnConfig {
            output_activation: Activation::Tanh,
            ..EnnConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = EnnConfig {
            hidden_units: 0,
            ..EnnConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn flat_layout_round_trip() {
        let params = ModelParams::new(
            array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]],
            array![7.0, 8.0],
            array![9.0, 10.0],
            11.0,
        )
        .unwrap();
        let flat = params.to_flat();
        assert_eq!(flat, (1..=11).map(f64::from).collect::<Vec<_>>());
        assert_eq!(ModelParams::from_flat(3, 2, &flat).unwrap(), params);
        assert!(ModelParams::from_flat(3, 2, &flat[..10]).is_err());
    }

    #[test]
    fn model_file_json_is_lossless() {
        let params = ModelParams::new(
            array![[0.1 + 0.2, -1.0 / 3.0], [std::f64::consts::PI, 1e-300]],
            array![f64::MIN_POSITIVE, -0.0],
            array![2.0f64.sqrt(), 123456789.12345679],
            -7.0 / 11.0,
        )
        .unwrap();
        let cfg = EnnConfig {
            tau: 0.1,
            lambda: 0.1,
            ..EnnConfig::default()
        };
        let file = ModelFile::new(&params, &cfg, TrainingMeta::default());
        let back = ModelFile::from_json(&file.to_json().unwrap()).unwrap();
        let restored = back.params().unwrap();
        for (a, b) in params.to_flat().iter().zip(restored.to_flat()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.tau, 0.1);
        assert_eq!(back.hidden_activation, Activation::Relu);
    }

    #[test]
    fn model_file_field_names() {
        let file = ModelFile::new(&hand_model(), &relu_cfg(), TrainingMeta::default());
        let value: serde_json::Value = serde_json::from_str(&file.to_json().unwrap()).unwrap();
        for key in [
            "schema_version",
            "p",
            "q",
            "tau",
            "lambda",
            "hidden_activation",
            "output_activation",
            "w1",
            "b1",
            "w2",
            "b2",
            "training_meta",
        ] {
            assert!(value.get(key).is_some(), "missing {key}");
        }
        assert_eq!(value["hidden_activation"], "relu");
        assert_eq!(value["w1"], serde_json::json!([[2.0]]));
    }
}
