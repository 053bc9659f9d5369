//! Replicated train/validation/test experiments: hyperparameter grid search,
//! paired ENN.TF vs ENN comparisons, tab-separated reports and sorted
//! expectile curves.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, split, standardize_covariates, Dataset, SplitIndices, SplitSpec};
use crate::error::{EnnError, Result};
use crate::loss::Loss;
use crate::model::{check_tau, forward_batch, Activation, EnnConfig, ModelParams};
use crate::optim::{init_params, minimize, InitScale};
use crate::synth::SyntheticSpec;
use crate::transfer::{transfer_fit, TransferPlan};

pub const DEFAULT_TAUS: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];
pub const DEFAULT_LAMBDAS: [f64; 5] = [0.0, 0.1, 1.0, 10.0, 100.0];
pub const DEFAULT_HIDDEN: [usize; 3] = [3, 5, 10];
pub const DEFAULT_REPLICATES: usize = 50;
/// Transfer test MSE above scratch test MSE by more than this fraction is
/// flagged as negative transfer.
pub const NEGATIVE_TRANSFER_MARGIN: f64 = 0.05;
/// Validation MSEs within this relative distance of the best are ties.
pub const TIE_RTOL: f64 = 1e-6;

const INIT_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSource {
    pub csv: PathBuf,
    pub schema: PathBuf,
}

/// Validation criterion for the hyperparameter grid search.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMetric {
    /// Mean squared error, the metric reported on the test rows.
    #[default]
    Mse,
    /// Mean asymmetric squared loss at the model's own τ.
    ExpectileLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub tau_levels: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub hidden_grid: Vec<usize>,
    pub replicates: usize,
    pub master_seed: u64,
    /// Response for scratch-only runs; ignored when `transfer_plan` is set.
    pub phenotype: Option<String>,
    pub transfer_plan: Option<TransferPlan>,
    pub output_dir: Option<PathBuf>,
    pub max_epochs: usize,
    pub grad_tolerance: f64,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pub negative_transfer_margin: f64,
    pub selection_metric: SelectionMetric,
    /// Replicate whose test-set predictions become the expectile curves.
    pub curve_replicate: Option<usize>,
    pub data: Option<DataSource>,
    pub synthetic: Option<SyntheticSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let enn = EnnConfig::default();
        Self {
            tau_levels: DEFAULT_TAUS.to_vec(),
            lambda_grid: DEFAULT_LAMBDAS.to_vec(),
            hidden_grid: DEFAULT_HIDDEN.to_vec(),
            replicates: DEFAULT_REPLICATES,
            master_seed: 0,
            phenotype: None,
            transfer_plan: None,
            output_dir: None,
            max_epochs: enn.max_epochs,
            grad_tolerance: enn.grad_tolerance,
            hidden_activation: enn.hidden_activation,
            output_activation: enn.output_activation,
            negative_transfer_margin: NEGATIVE_TRANSFER_MARGIN,
            selection_metric: SelectionMetric::Mse,
            curve_replicate: Some(0),
            data: None,
            synthetic: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau_levels.is_empty() || self.lambda_grid.is_empty() || self.hidden_grid.is_empty()
        {
            return Err(EnnError::Config(
                "tau, lambda and hidden grids must be non-empty".into(),
            ));
        }
        for &tau in &self.tau_levels {
            check_tau(tau)?;
        }
        if self
            .lambda_grid
            .iter()
            .any(|l| !(l.is_finite() && *l >= 0.0))
        {
            return Err(EnnError::Config("lambda grid values must be >= 0".into()));
        }
        if self.hidden_grid.contains(&0) {
            return Err(EnnError::Config("hidden grid values must be >= 1".into()));
        }
        if self.replicates == 0 {
            return Err(EnnError::Config("replicates must be >= 1".into()));
        }
        self.enn_config(0.5, 0.0, 1, 0).validate()
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            replicate_count: self.replicates,
            master_seed: self.master_seed,
        }
    }

    pub fn enn_config(&self, tau: f64, lambda: f64, hidden: usize, seed: u64) -> EnnConfig {
        EnnConfig {
            tau,
            lambda,
            hidden_units: hidden,
            hidden_activation: self.hidden_activation,
            output_activation: self.output_activation,
            max_epochs: self.max_epochs,
            grad_tolerance: self.grad_tolerance,
            seed,
        }
    }

    /// Initialization seed shared by both arms for a replicate and width.
    pub fn init_seed(&self, replicate: usize, hidden: usize) -> u64 {
        derive_seed(
            self.master_seed,
            INIT_STREAM,
            ((replicate as u64) << 32) | hidden as u64,
        )
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| EnnError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Mean squared error `(1/n) sum (y - yhat)^2`.
pub fn mse(y_true: ArrayView1<'_, f64>, y_pred: ArrayView1<'_, f64>) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(EnnError::DimensionMismatch {
            what: "prediction length",
            expected: y_true.len(),
            actual: y_pred.len(),
        });
    }
    if y_true.is_empty() {
        return Err(EnnError::EmptyDataset("mse of an empty vector"));
    }
    let sum: f64 = y_true
        .iter()
        .zip(y_pred)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / y_true.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub lambda: f64,
    pub hidden: usize,
    pub valid_mse: f64,
    /// Validation score under the configured [`SelectionMetric`].
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub lambda: f64,
    pub hidden: usize,
    pub valid_mse: f64,
    pub params: ModelParams,
    pub iterations: usize,
    pub grid: Vec<GridPoint>,
}

/// Index of the preferred grid point: lowest validation score, with near-ties
/// (within [`TIE_RTOL`]) going to the larger lambda, then the smaller width.
pub fn choose_grid_point(points: &[GridPoint]) -> usize {
    let best = points
        .iter()
        .map(|g| {
            if g.score.is_nan() {
                f64::INFINITY
            } else {
                g.score
            }
        })
        .fold(f64::INFINITY, f64::min);
    let cutoff = best + TIE_RTOL * best.abs();
    let mut pick: Option<usize> = None;
    for (i, g) in points.iter().enumerate() {
        if !(g.score <= cutoff) {
            continue;
        }
        pick = match pick {
            None => Some(i),
            Some(j) => {
                let cur = &points[j];
                let better =
                    g.lambda > cur.lambda || (g.lambda == cur.lambda && g.hidden < cur.hidden);
                Some(if better { i } else { j })
            }
        };
    }
    pick.unwrap_or(0)
}

/// Matrices for one replicate after train-set standardization.
pub struct PreparedSplit {
    pub x_train: Array2<f64>,
    pub x_valid: Array2<f64>,
    pub x_test: Array2<f64>,
    pub split: SplitIndices,
    std_ds: Dataset,
}

impl PreparedSplit {
    pub fn new(ds: &Dataset, split: SplitIndices) -> Result<Self> {
        let (std_ds, _) = standardize_covariates(ds, &split.train)?;
        Ok(Self {
            x_train: std_ds.rows(&split.train),
            x_valid: std_ds.rows(&split.valid),
            x_test: std_ds.rows(&split.test),
            split,
            std_ds,
        })
    }

    pub fn responses(&self, phenotype: &str) -> Result<(Array1<f64>, Array1<f64>, Array1<f64>)> {
        Ok((
            self.std_ds.phenotype_rows(phenotype, &self.split.train)?,
            self.std_ds.phenotype_rows(phenotype, &self.split.valid)?,
            self.std_ds.phenotype_rows(phenotype, &self.split.test)?,
        ))
    }
}

fn predict_mse(
    params: &ModelParams,
    cfg: &EnnConfig,
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
) -> Result<f64> {
    mse(y, forward_batch(params, cfg, x)?.view())
}

/// Validation MSE and the selection score for one fitted grid point.
fn validate_fit(
    cfg: &ExperimentConfig,
    params: &ModelParams,
    enn: &EnnConfig,
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
) -> Result<(f64, f64)> {
    let pred = forward_batch(params, enn, x)?;
    let valid_mse = mse(y, pred.view())?;
    let score = match cfg.selection_metric {
        SelectionMetric::Mse => valid_mse,
        SelectionMetric::ExpectileLoss => {
            let loss = Loss::Expectile { tau: enn.tau };
            y.iter()
                .zip(&pred)
                .map(|(&a, &f)| loss.value(a, f))
                .sum::<f64>()
                / y.len() as f64
        }
    };
    Ok((valid_mse, score))
}

/// Fit every (lambda, width) pair on the training rows and keep the one with
/// the best validation MSE.
pub fn select_on_split(
    cfg: &ExperimentConfig,
    tau: f64,
    replicate: usize,
    train: (ArrayView2<'_, f64>, ArrayView1<'_, f64>),
    valid: (ArrayView2<'_, f64>, ArrayView1<'_, f64>),
) -> Result<Selection> {
    let p = train.0.ncols();
    let mut grid = Vec::new();
    let mut fits = Vec::new();
    for &hidden in &cfg.hidden_grid {
        let seed = cfg.init_seed(replicate, hidden);
        let params0 = init_params(p, hidden, seed, InitScale::GlorotUniform);
        for &lambda in &cfg.lambda_grid {
            let enn = cfg.enn_config(tau, lambda, hidden, seed);
            let (params, report) = minimize(&params0, &enn, train.0, train.1)?;
            let (valid_mse, score) = validate_fit(cfg, &params, &enn, valid.0, valid.1)?;
            grid.push(GridPoint {
                lambda,
                hidden,
                valid_mse,
                score,
            });
            fits.push((params, report.iterations));
        }
    }
    let i = choose_grid_point(&grid);
    let (params, iterations) = fits.swap_remove(i);
    Ok(Selection {
        lambda: grid[i].lambda,
        hidden: grid[i].hidden,
        valid_mse: grid[i].valid_mse,
        params,
        iterations,
        grid,
    })
}

/// Grid search for one phenotype on one replicate split.
pub fn select_hyperparams(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    split: &SplitIndices,
    tau: f64,
    phenotype: &str,
    replicate: usize,
) -> Result<Selection> {
    let prep = PreparedSplit::new(ds, split.clone())?;
    let (y_tr, y_va, _) = prep.responses(phenotype)?;
    select_on_split(
        cfg,
        tau,
        replicate,
        (prep.x_train.view(), y_tr.view()),
        (prep.x_valid.view(), y_va.view()),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arm {
    #[serde(rename = "ENN.TF")]
    Transfer,
    #[serde(rename = "ENN")]
    Scratch,
}

impl Arm {
    pub fn label(self) -> &'static str {
        match self {
            Arm::Transfer => "ENN.TF",
            Arm::Scratch => "ENN",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub train_mse: f64,
    pub valid_mse: f64,
    pub test_mse: f64,
    pub lambda: f64,
    pub hidden: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub tau: f64,
    pub scratch: ArmResult,
    pub transfer: Option<ArmResult>,
}

impl ReplicateRecord {
    pub fn negative_transfer(&self, margin: f64) -> Option<bool> {
        self.transfer
            .as_ref()
            .map(|tf| tf.test_mse > (1.0 + margin) * self.scratch.test_mse)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub rank: usize,
    pub tau: f64,
    pub value: f64,
}

/// A fitted model at one expectile level, used for curve export.
#[derive(Debug, Clone)]
pub struct CurveModel {
    pub tau: f64,
    pub params: ModelParams,
    pub cfg: EnnConfig,
}

/// Predictions on `x` for each model, sorted ascending, as (rank, τ, value)
/// triples with 1-based ranks.
pub fn export_expectile_curves(
    models: &[CurveModel],
    x: ArrayView2<'_, f64>,
) -> Result<Vec<CurvePoint>> {
    let mut out = Vec::with_capacity(models.len() * x.nrows());
    for m in models {
        let mut values = forward_batch(&m.params, &m.cfg, x)?.to_vec();
        values.sort_by(f64::total_cmp);
        out.extend(values.into_iter().enumerate().map(|(i, value)| CurvePoint {
            rank: i + 1,
            tau: m.tau,
            value,
        }));
    }
    Ok(out)
}

pub fn curves_tsv(points: &[CurvePoint]) -> String {
    let mut out = String::from("rank\ttau\tvalue\n");
    for c in points {
        let _ = writeln!(
            out,
            "{}\t{}\t{}",
            c.rank,
            format_sig(c.tau),
            format_sig(c.value)
        );
    }
    out
}

/// Fraction of ranks at which the curves are non-decreasing in τ.
pub fn curve_ordering_fraction(points: &[CurvePoint]) -> f64 {
    let mut taus: Vec<f64> = points.iter().map(|c| c.tau).collect();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    let max_rank = points.iter().map(|c| c.rank).max().unwrap_or(0);
    if max_rank == 0 {
        return 1.0;
    }
    let mut table = vec![vec![f64::NAN; taus.len()]; max_rank];
    for c in points {
        let t = taus.iter().position(|&t| t == c.tau).expect("tau present");
        table[c.rank - 1][t] = c.value;
    }
    let ordered = table
        .iter()
        .filter(|row| row.windows(2).all(|w| w[0] <= w[1]))
        .count();
    ordered as f64 / max_rank as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub tau: f64,
    pub transfer_train: Option<f64>,
    pub transfer_test: Option<f64>,
    pub scratch_train: f64,
    pub scratch_test: f64,
    pub replicates_flagged: usize,
    pub negative_transfer: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub tau_levels: Vec<f64>,
    pub replicates: usize,
    pub negative_transfer_margin: f64,
    pub selection_metric: SelectionMetric,
    /// Replicate-major, then τ in configuration order.
    pub records: Vec<ReplicateRecord>,
    pub curves: Vec<CurvePoint>,
}

impl ExperimentReport {
    pub fn has_transfer(&self) -> bool {
        self.records.iter().any(|r| r.transfer.is_some())
    }

    pub fn records_for(&self, tau: f64) -> impl Iterator<Item = &ReplicateRecord> {
        self.records.iter().filter(move |r| r.tau == tau)
    }

    /// Means over replicates per τ.
    pub fn summary(&self) -> Vec<SummaryRow> {
        self.tau_levels
            .iter()
            .map(|&tau| {
                let recs: Vec<&ReplicateRecord> = self.records_for(tau).collect();
                let n = recs.len() as f64;
                let mean = |f: &dyn Fn(&ReplicateRecord) -> f64| {
                    recs.iter().map(|r| f(r)).sum::<f64>() / n
                };
                let scratch_train = mean(&|r| r.scratch.train_mse);
                let scratch_test = mean(&|r| r.scratch.test_mse);
                let has_tf = recs.iter().all(|r| r.transfer.is_some()) && !recs.is_empty();
                let (transfer_train, transfer_test) = if has_tf {
                    (
                        Some(mean(&|r| r.transfer.as_ref().expect("checked").train_mse)),
                        Some(mean(&|r| r.transfer.as_ref().expect("checked").test_mse)),
                    )
                } else {
                    (None, None)
                };
                let replicates_flagged = recs
                    .iter()
                    .filter(|r| r.negative_transfer(self.negative_transfer_margin) == Some(true))
                    .count();
                let negative_transfer = transfer_test
                    .map(|tf| tf > (1.0 + self.negative_transfer_margin) * scratch_test);
                SummaryRow {
                    tau,
                    transfer_train,
                    transfer_test,
                    scratch_train,
                    scratch_test,
                    replicates_flagged,
                    negative_transfer,
                }
            })
            .collect()
    }

    /// One row per τ; columns ENN.TF train/test then ENN train/test.
    pub fn summary_tsv(&self) -> String {
        let tf = self.has_transfer();
        let mut out = String::new();
        if tf {
            out.push_str("tau\tENN.TF_train\tENN.TF_test\tENN_train\tENN_test\n");
        } else {
            out.push_str("tau\tENN_train\tENN_test\n");
        }
        for row in self.summary() {
            out.push_str(&format_sig(row.tau));
            if tf {
                for v in [row.transfer_train, row.transfer_test] {
                    out.push('\t');
                    out.push_str(&v.map_or_else(|| "NA".to_string(), format_sig));
                }
            }
            let _ = writeln!(
                out,
                "\t{}\t{}",
                format_sig(row.scratch_train),
                format_sig(row.scratch_test)
            );
        }
        out
    }

    pub fn replicates_tsv(&self) -> String {
        let mut out =
            String::from("replicate\ttau\tarm\ttrain_mse\tvalid_mse\ttest_mse\tlambda\thidden\tnegative_transfer\n");
        for r in &self.records {
            let flag = match r.negative_transfer(self.negative_transfer_margin) {
                Some(true) => "1",
                Some(false) => "0",
                None => "NA",
            };
            let arms = r
                .transfer
                .iter()
                .map(|a| (Arm::Transfer, a))
                .chain(std::iter::once((Arm::Scratch, &r.scratch)));
            for (arm, a) in arms {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    r.replicate,
                    format_sig(r.tau),
                    arm.label(),
                    format_sig(a.train_mse),
                    format_sig(a.valid_mse),
                    format_sig(a.test_mse),
                    format_sig(a.lambda),
                    a.hidden,
                    flag
                );
            }
        }
        out
    }

    pub fn negative_transfer_tsv(&self) -> String {
        let mut out = String::from("tau\treplicates_flagged\treplicates\tmean_flagged\n");
        for row in self.summary() {
            let mean = match row.negative_transfer {
                Some(true) => "1",
                Some(false) => "0",
                None => "NA",
            };
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                format_sig(row.tau),
                row.replicates_flagged,
                self.replicates,
                mean
            );
        }
        out
    }

    /// Writes `report.tsv`, `replicates.tsv`, `curves.tsv` and, for paired
    /// runs, `negative_transfer.tsv`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| EnnError::io(dir, e))?;
        let mut files = vec![
            ("report.tsv", self.summary_tsv()),
            ("replicates.tsv", self.replicates_tsv()),
            ("curves.tsv", curves_tsv(&self.curves)),
        ];
        if self.has_transfer() {
            files.push(("negative_transfer.tsv", self.negative_transfer_tsv()));
        }
        for (name, body) in files {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| EnnError::io(&path, e))?;
        }
        Ok(())
    }
}

/// `%g`-style formatting with 6 significant digits.
pub fn format_sig(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return if v.is_nan() {
            "nan".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!(
            "{}e{sign}{:02}",
            trim_zeros(mantissa.to_string()),
            exp.abs()
        )
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn arm_result(
    params: &ModelParams,
    cfg: &EnnConfig,
    prep: &PreparedSplit,
    ys: (&Array1<f64>, &Array1<f64>, &Array1<f64>),
    valid_mse: f64,
    iterations: usize,
) -> Result<ArmResult> {
    Ok(ArmResult {
        train_mse: predict_mse(params, cfg, prep.x_train.view(), ys.0.view())?,
        valid_mse,
        test_mse: predict_mse(params, cfg, prep.x_test.view(), ys.2.view())?,
        lambda: cfg.lambda,
        hidden: params.q(),
        iterations,
    })
}

fn run_replicate(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    target: &str,
    plan: Option<&TransferPlan>,
    replicate: usize,
) -> Result<(Vec<ReplicateRecord>, Vec<CurveModel>)> {
    let prep = PreparedSplit::new(ds, split(ds, &cfg.split_spec(), replicate)?)?;
    let yt = prep.responses(target)?;
    let ys = plan
        .map(|plan| prep.responses(&plan.source_phenotype))
        .transpose()?;
    let mut records = Vec::with_capacity(cfg.tau_levels.len());
    let mut curve_models = Vec::new();

    for &tau in &cfg.tau_levels {
        let ctx = |arm: &str| format!("replicate {replicate}, tau {tau}, arm {arm}");

        let sel = select_on_split(
            cfg,
            tau,
            replicate,
            (prep.x_train.view(), yt.0.view()),
            (prep.x_valid.view(), yt.1.view()),
        )
        .map_err(|e| e.context(ctx("ENN")))?;
        let scratch_cfg = cfg.enn_config(
            tau,
            sel.lambda,
            sel.hidden,
            cfg.init_seed(replicate, sel.hidden),
        );
        let scratch = arm_result(
            &sel.params,
            &scratch_cfg,
            &prep,
            (&yt.0, &yt.1, &yt.2),
            sel.valid_mse,
            sel.iterations,
        )?;
        if cfg.curve_replicate == Some(replicate) {
            curve_models.push(CurveModel {
                tau,
                params: sel.params.clone(),
                cfg: scratch_cfg,
            });
        }

        let transfer = match (plan, &ys) {
            (Some(plan), Some(ys)) => Some(
                transfer_arm(cfg, plan, tau, replicate, &prep, ys, &yt)
                    .map_err(|e| e.context(ctx("ENN.TF")))?,
            ),
            _ => None,
        };
        records.push(ReplicateRecord {
            replicate,
            tau,
            scratch,
            transfer,
        });
    }
    Ok((records, curve_models))
}

type Responses = (Array1<f64>, Array1<f64>, Array1<f64>);

fn transfer_arm(
    cfg: &ExperimentConfig,
    plan: &TransferPlan,
    tau: f64,
    replicate: usize,
    prep: &PreparedSplit,
    ys: &Responses,
    yt: &Responses,
) -> Result<ArmResult> {
    let source = select_on_split(
        cfg,
        tau,
        replicate,
        (prep.x_train.view(), ys.0.view()),
        (prep.x_valid.view(), ys.1.view()),
    )?;
    let hidden = source.hidden;
    let seed = cfg.init_seed(replicate, hidden);
    let mut grid = Vec::new();
    let mut fits = Vec::new();
    for &lambda in &cfg.lambda_grid {
        let enn = cfg.enn_config(tau, lambda, hidden, seed);
        let (params, report) =
            transfer_fit(&source.params, plan, &enn, prep.x_train.view(), yt.0.view())?;
        let (valid_mse, score) =
            validate_fit(cfg, &params, &enn, prep.x_valid.view(), yt.1.view())?;
        grid.push(GridPoint {
            lambda,
            hidden,
            valid_mse,
            score,
        });
        fits.push((params, enn, report.iterations));
    }
    let i = choose_grid_point(&grid);
    let (params, enn, iterations) = fits.swap_remove(i);
    arm_result(
        &params,
        &enn,
        prep,
        (&yt.0, &yt.1, &yt.2),
        grid[i].valid_mse,
        iterations,
    )
}

pub(crate) fn run_with_plan(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    target: &str,
    plan: Option<&TransferPlan>,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    ds.phenotype(target)?;
    let per_replicate: Vec<(Vec<ReplicateRecord>, Vec<CurveModel>)> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| run_replicate(cfg, ds, target, plan, r))
        .collect::<Result<_>>()?;

    let mut records = Vec::with_capacity(cfg.replicates * cfg.tau_levels.len());
    let mut curves = Vec::new();
    for (replicate, (recs, models)) in per_replicate.into_iter().enumerate() {
        records.extend(recs);
        if !models.is_empty() {
            let prep = PreparedSplit::new(ds, split(ds, &cfg.split_spec(), replicate)?)?;
            curves = export_expectile_curves(&models, prep.x_test.view())?;
        }
    }
    Ok(ExperimentReport {
        tau_levels: cfg.tau_levels.clone(),
        replicates: cfg.replicates,
        negative_transfer_margin: cfg.negative_transfer_margin,
        selection_metric: cfg.selection_metric,
        records,
        curves,
    })
}

/// Full protocol: per replicate a 3:1:1 split, grid search per τ on the
/// validation rows, and test MSE; paired with the transfer arm when the
/// configuration carries a transfer plan.
pub fn run_experiment(cfg: &ExperimentConfig, ds: &Dataset) -> Result<ExperimentReport> {
    match &cfg.transfer_plan {
        Some(plan) => crate::transfer::compare_transfer(cfg, plan, ds),
        None => {
            let target = cfg.phenotype.as_deref().ok_or_else(|| {
                EnnError::Config("experiment needs `phenotype` or `transfer_plan`".into())
            })?;
            run_with_plan(cfg, ds, target, None)
        }
    }
}
