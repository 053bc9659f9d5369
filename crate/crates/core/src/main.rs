use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use enn::data::{load_csv, standardize_covariates, write_csv, Dataset, Schema, SnpSelection};
use enn::error::{EnnError, Result};
use enn::experiment::{
    curves_tsv, export_expectile_curves, run_experiment, CurveModel, ExperimentConfig,
};
use enn::gradcheck::self_test;
use enn::model::{Activation, EnnConfig, ModelFile, TrainingMeta};
use enn::optim::{init_params, minimize, InitScale, OptimReport};
use enn::synth::{generate_synthetic, SyntheticSpec};
use enn::transfer::{transfer_fit, FreezeSpec, TransferPlan};

#[derive(Parser)]
#[command(
    name = "enn",
    version,
    about = "Expectile neural networks with transfer learning"
)]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "ENN_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one ENN on a CSV dataset.
    Fit(FitArgs),
    /// Fit a target phenotype starting from a source model.
    Transfer(TransferArgs),
    /// Run a replicated experiment from a JSON config.
    Experiment(ExperimentArgs),
    /// Generate a synthetic paired-phenotype dataset.
    Synth(SynthArgs),
    /// Export sorted expectile curves for a directory of models.
    Curves(CurvesArgs),
    /// Finite-difference self-test of the analytic gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long, default_value_t = 5)]
    hidden: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "relu")]
    hidden_activation: Activation,
    #[arg(long, default_value = "identity")]
    output_activation: Activation,
    #[arg(long, default_value_t = 1000)]
    max_epochs: usize,
    #[arg(long, default_value_t = 1e-6)]
    grad_tolerance: f64,
}

impl TrainArgs {
    fn config(&self) -> EnnConfig {
        EnnConfig {
            tau: self.tau,
            lambda: self.lambda,
            hidden_units: self.hidden,
            hidden_activation: self.hidden_activation,
            output_activation: self.output_activation,
            max_epochs: self.max_epochs,
            grad_tolerance: self.grad_tolerance,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    phenotype: String,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    out_model: PathBuf,
}

#[derive(Args)]
struct TransferArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Previously fitted source model (JSON).
    #[arg(
        long,
        conflicts_with = "source_phenotype",
        required_unless_present = "source_phenotype"
    )]
    source_model: Option<PathBuf>,
    /// Fit the source model on this phenotype first.
    #[arg(long)]
    source_phenotype: Option<String>,
    #[arg(long)]
    target_phenotype: String,
    /// Frozen blocks: w1b1, none, all, or any concatenation of w1, b1, w2, b2.
    #[arg(long, default_value = "w1b1")]
    freeze: FreezeSpec,
    /// Start the target fit from a fresh initialization instead of the source.
    #[arg(long)]
    cold_start: bool,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    out_model: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Truth sidecar (default: <out>.truth.json).
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Also write a schema file for loading the CSV.
    #[arg(long)]
    schema_out: Option<PathBuf>,
}

#[derive(Args)]
struct CurvesArgs {
    /// Directory of model JSON files, one per expectile level.
    #[arg(long)]
    models: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Output TSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 200)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error[config]: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Fit(a) => fit(a),
        Command::Transfer(a) => transfer(a),
        Command::Experiment(a) => experiment(a),
        Command::Synth(a) => synth(a),
        Command::Curves(a) => curves(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!(
                "error[{}]: {}",
                e.category(),
                e.to_string().replace('\n', " ")
            );
            ExitCode::FAILURE
        }
    }
}

fn load(data: &DataArgs) -> Result<Dataset> {
    let schema = Schema::load(&data.schema)?;
    let ds = load_csv(&data.data, &schema)?;
    if ds.dropped_rows > 0 {
        log::warn!("dropped {} rows with missing phenotype", ds.dropped_rows);
    }
    for c in &ds.dropped_columns {
        log::warn!("dropped constant column {c}");
    }
    Ok(ds)
}

fn all_rows(ds: &Dataset) -> Vec<usize> {
    (0..ds.n()).collect()
}

fn print_fit(report: &OptimReport) {
    println!(
        "iterations={} risk={} grad_norm={} termination={}",
        report.iterations,
        report.final_risk.total,
        report.final_grad_norm,
        report.termination.as_str()
    );
}

fn meta(
    phenotype: &str,
    ds: &Dataset,
    scaler: enn::data::Scaler,
    cfg: &EnnConfig,
    report: &OptimReport,
) -> TrainingMeta {
    TrainingMeta {
        phenotype: Some(phenotype.to_string()),
        columns: ds.column_names(),
        scaler: Some(scaler),
        seed: Some(cfg.seed),
        iterations: Some(report.iterations),
        final_risk: Some(report.final_risk.total),
        termination: Some(report.termination.as_str().to_string()),
        ..TrainingMeta::default()
    }
}

fn fit(a: FitArgs) -> Result<ExitCode> {
    let cfg = a.train.config();
    cfg.validate()?;
    let ds = load(&a.data)?;
    let (std_ds, scaler) = standardize_covariates(&ds, &all_rows(&ds))?;
    let y = std_ds.phenotype(&a.phenotype)?;
    let params0 = init_params(ds.p(), cfg.hidden_units, cfg.seed, InitScale::GlorotUniform);
    let (params, report) = minimize(&params0, &cfg, std_ds.x().view(), y)?;
    let file = ModelFile::new(
        &params,
        &cfg,
        meta(&a.phenotype, &ds, scaler, &cfg, &report),
    );
    file.save(&a.out_model)?;
    print_fit(&report);
    Ok(ExitCode::SUCCESS)
}

fn transfer(a: TransferArgs) -> Result<ExitCode> {
    let cfg = a.train.config();
    cfg.validate()?;
    let ds = load(&a.data)?;
    let (source, std_ds, scaler, source_name) = match (&a.source_model, &a.source_phenotype) {
        (Some(path), _) => {
            let file = ModelFile::load(path)?;
            let m = &file.training_meta;
            if !m.columns.is_empty() && m.columns != ds.column_names() {
                return Err(EnnError::Config(
                    "source model columns differ from the dataset columns".into(),
                ));
            }
            let scaler = m.scaler.clone().unwrap_or_default();
            let std_ds = scaler.apply(&ds)?;
            (file.params()?, std_ds, scaler, m.phenotype.clone())
        }
        (None, Some(name)) => {
            let (std_ds, scaler) = standardize_covariates(&ds, &all_rows(&ds))?;
            let params0 = init_params(ds.p(), cfg.hidden_units, cfg.seed, InitScale::GlorotUniform);
            let (params, report) =
                minimize(&params0, &cfg, std_ds.x().view(), std_ds.phenotype(name)?)?;
            info!("source fit: {} iterations", report.iterations);
            (params, std_ds, scaler, Some(name.clone()))
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    let plan = TransferPlan {
        source_phenotype: source_name.clone().unwrap_or_default(),
        target_phenotype: a.target_phenotype.clone(),
        freeze: a.freeze,
        reuse_as_warm_start: !a.cold_start,
    };
    if plan.source_phenotype == plan.target_phenotype {
        return Err(EnnError::Config(
            "source and target phenotype must differ".into(),
        ));
    }
    let y = std_ds.phenotype(&a.target_phenotype)?;
    let (params, report) = transfer_fit(&source, &plan, &cfg, std_ds.x().view(), y)?;
    let cfg = EnnConfig {
        hidden_units: params.q(),
        ..cfg
    };
    let mut m = meta(&a.target_phenotype, &ds, scaler, &cfg, &report);
    m.source_phenotype = source_name;
    m.freeze = Some(a.freeze);
    ModelFile::new(&params, &cfg, m).save(&a.out_model)?;
    print_fit(&report);
    Ok(ExitCode::SUCCESS)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn experiment(a: ExperimentArgs) -> Result<ExitCode> {
    let cfg = ExperimentConfig::from_json_file(&a.config)?;
    let base = a.config.parent().unwrap_or(Path::new("."));
    let ds = match (&cfg.data, &cfg.synthetic) {
        (Some(src), _) => {
            let schema = Schema::load(resolve(base, &src.schema))?;
            load_csv(resolve(base, &src.csv), &schema)?
        }
        (None, Some(spec)) => generate_synthetic(spec)?.0,
        (None, None) => {
            return Err(EnnError::Config(
                "config needs `data` or `synthetic`".into(),
            ));
        }
    };
    let report = run_experiment(&cfg, &ds)?;
    let out_dir = a
        .out_dir
        .or_else(|| cfg.output_dir.as_ref().map(|d| resolve(base, d)));
    if let Some(dir) = out_dir {
        report.write_to_dir(&dir)?;
        info!("wrote reports to {}", dir.display());
    }
    print!("{}", report.summary_tsv());
    Ok(ExitCode::SUCCESS)
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| EnnError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let text = std::fs::read_to_string(&a.spec).map_err(|e| EnnError::Io {
        path: a.spec.clone(),
        source: e,
    })?;
    let spec: SyntheticSpec = serde_json::from_str(&text)?;
    let (ds, truth) = generate_synthetic(&spec)?;
    let file = std::fs::File::create(&a.out).map_err(|e| EnnError::Io {
        path: a.out.clone(),
        source: e,
    })?;
    write_csv(&ds, std::io::BufWriter::new(file))?;
    let truth_path = a.truth.unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".truth.json");
        PathBuf::from(s)
    });
    write_file(&truth_path, &serde_json::to_string_pretty(&truth)?)?;
    if let Some(path) = a.schema_out {
        let schema = Schema {
            phenotypes: vec![spec.source_name.clone(), spec.target_name.clone()],
            covariates: Vec::new(),
            snps: SnpSelection::default(),
        };
        write_file(&path, &serde_json::to_string_pretty(&schema)?)?;
    }
    println!("n={} p={}", ds.n(), ds.p());
    Ok(ExitCode::SUCCESS)
}

fn curves(a: CurvesArgs) -> Result<ExitCode> {
    let ds = load(&a.data)?;
    let entries = std::fs::read_dir(&a.models).map_err(|e| EnnError::Io {
        path: a.models.clone(),
        source: e,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(EnnError::Config(format!(
            "no model files in {}",
            a.models.display()
        )));
    }
    let mut all = Vec::new();
    for path in &paths {
        let file = ModelFile::load(path)?;
        let std_ds = match &file.training_meta.scaler {
            Some(s) => s.apply(&ds)?,
            None => ds.clone(),
        };
        let model = CurveModel {
            tau: file.tau,
            params: file.params()?,
            cfg: file.config(),
        };
        all.extend(export_expectile_curves(&[model], std_ds.x().view())?);
    }
    all.sort_by(|x, y| x.tau.total_cmp(&y.tau).then(x.rank.cmp(&y.rank)));
    let tsv = curves_tsv(&all);
    match a.out {
        Some(path) => write_file(&path, &tsv)?,
        None => print!("{tsv}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let summary = self_test(a.instances, a.seed, a.tolerance)?;
    println!(
        "instances={} failures={} max_rel_error={:e} rows_excluded={}",
        summary.instances, summary.failures, summary.max_rel_error, summary.rows_excluded
    );
    Ok(if summary.passed() {
        ExitCode::SUCCESS
    } else {
        eprintln!(
            "error[numerical]: gradient check failed on {} instances",
            summary.failures
        );
        ExitCode::FAILURE
    })
}
