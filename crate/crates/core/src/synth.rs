//! Synthetic genotype data with two related phenotypes.
//!
//! Genotypes are Binomial(2, maf) per SNP. Each phenotype's signal is a small
//! random ReLU network over a sparse set of causal SNPs, standardized to mean
//! 0 and variance 1 over the sample. The target signal mixes the source signal
//! with an independent private signal built on disjoint causal SNPs:
//!
//! ```text
//! source = signal_sd * S(x)                                 + noise
//! target = signal_sd * (sqrt(f) S(x) + sqrt(1 - f) P(x))    + noise
//! ```
//!
//! where `f` is `shared_signal_fraction`.

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, ColumnKind, ColumnMeta, Dataset};
use crate::error::{EnnError, Result};

const NOISE_STREAM: u64 = 11;
const SHARED_STREAM: u64 = 12;
const PRIVATE_STREAM: u64 = 13;
/// Noise sd floor for heteroscedastic noise, which scales as floor + softplus(signal).
const HETERO_FLOOR: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkFunction {
    SparseNonlinearShared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    HomoscedasticNormal,
    /// Normal noise with sd `0.5 + softplus(signal)`, growing with the phenotype's own signal.
    Heteroscedastic,
    /// Centered unit exponential (right skewed).
    Skewed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n: usize,
    pub p_snps: usize,
    pub maf_range: [f64; 2],
    pub link: LinkFunction,
    pub shared_signal_fraction: f64,
    pub noise: NoiseKind,
    pub noise_sd: f64,
    /// Noise scale for the source phenotype; `noise_sd` when unset.
    pub source_noise_sd: Option<f64>,
    pub signal_sd: f64,
    pub causal_snps: usize,
    pub latent_features: usize,
    pub seed: u64,
    pub source_noise_seed: Option<u64>,
    pub target_noise_seed: Option<u64>,
    pub source_name: String,
    pub target_name: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 500,
            p_snps: 20,
            maf_range: [0.05, 0.5],
            link: LinkFunction::SparseNonlinearShared,
            shared_signal_fraction: 0.8,
            noise: NoiseKind::HomoscedasticNormal,
            noise_sd: 1.0,
            source_noise_sd: None,
            signal_sd: 1.0,
            causal_snps: 6,
            latent_features: 3,
            seed: 0,
            source_noise_seed: None,
            target_noise_seed: None,
            source_name: "source".into(),
            target_name: "target".into(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EnnError::Config(m));
        if self.n == 0 || self.p_snps == 0 {
            return bad("n and p_snps must be positive".into());
        }
        let [lo, hi] = self.maf_range;
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return bad(format!(
                "maf_range must satisfy 0 < lo <= hi <= 0.5, got {lo}..{hi}"
            ));
        }
        if !(0.0..=1.0).contains(&self.shared_signal_fraction) {
            return bad("shared_signal_fraction must lie in [0, 1]".into());
        }
        if self.causal_snps == 0 || self.causal_snps > self.p_snps {
            return bad(format!(
                "causal_snps must be in 1..={}, got {}",
                self.p_snps, self.causal_snps
            ));
        }
        if self.latent_features == 0 {
            return bad("latent_features must be >= 1".into());
        }
        if !(self.noise_sd >= 0.0
            && self.signal_sd >= 0.0
            && self.source_noise_sd.is_none_or(|v| v >= 0.0))
        {
            return bad("noise_sd and signal_sd must be >= 0".into());
        }
        if self.source_name == self.target_name {
            return bad("source and target names must differ".into());
        }
        Ok(())
    }

    fn noise_seed(&self, which: u64, explicit: Option<u64>) -> u64 {
        explicit.unwrap_or_else(|| derive_seed(self.seed, NOISE_STREAM, which))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentFeature {
    pub snps: Vec<usize>,
    pub weights: Vec<f64>,
    pub offset: f64,
}

/// A random ReLU network over a set of causal SNPs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalNetwork {
    pub causal_snps: Vec<usize>,
    pub features: Vec<LatentFeature>,
    pub output_weights: Vec<f64>,
    /// Sample mean and sd used to standardize the raw signal.
    pub center: f64,
    pub scale: f64,
}

/// Sidecar describing how the synthetic phenotypes were generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub spec: SyntheticSpec,
    pub maf: Vec<f64>,
    pub shared: SignalNetwork,
    pub private: SignalNetwork,
    pub source_signal: Vec<f64>,
    pub target_signal: Vec<f64>,
}

fn build_network(
    rng: &mut ChaCha8Rng,
    causal: Vec<usize>,
    latent: usize,
    genotypes: &Array2<f64>,
    maf: &[f64],
) -> (SignalNetwork, Array1<f64>) {
    let per_feature = causal.len().clamp(1, 3);
    let features: Vec<LatentFeature> = (0..latent)
        .map(|_| {
            let snps: Vec<usize> = sample(rng, causal.len(), per_feature)
                .into_iter()
                .map(|i| causal[i])
                .collect();
            let weights = snps
                .iter()
                .map(|_| {
                    let w: f64 = StandardNormal.sample(rng);
                    w + w.signum()
                })
                .collect();
            LatentFeature {
                snps,
                weights,
                offset: rng.random_range(-0.5..0.5),
            }
        })
        .collect();
    let output_weights: Vec<f64> = (0..latent)
        .map(|_| {
            let w: f64 = StandardNormal.sample(rng);
            w + w.signum()
        })
        .collect();

    let raw: Array1<f64> = genotypes
        .rows()
        .into_iter()
        .map(|g| {
            features
                .iter()
                .zip(&output_weights)
                .map(|(f, &a)| {
                    let z: f64 = f
                        .snps
                        .iter()
                        .zip(&f.weights)
                        .map(|(&j, &w)| w * (g[j] - 2.0 * maf[j]))
                        .sum::<f64>()
                        + f.offset;
                    a * z.max(0.0)
                })
                .sum()
        })
        .collect();
    let n = raw.len() as f64;
    let center = raw.sum() / n;
    let var = raw.iter().map(|v| (v - center).powi(2)).sum::<f64>() / n;
    let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
    let signal = raw.mapv(|v| (v - center) / scale);
    (
        SignalNetwork {
            causal_snps: causal,
            features,
            output_weights,
            center,
            scale,
        },
        signal,
    )
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

fn add_noise(signal: &Array1<f64>, spec: &SyntheticSpec, noise_sd: f64, seed: u64) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    signal.mapv(|s| {
        let e = match spec.noise {
            NoiseKind::HomoscedasticNormal => StandardNormal.sample(&mut rng),
            NoiseKind::Heteroscedastic => {
                let z: f64 = StandardNormal.sample(&mut rng);
                (HETERO_FLOOR + softplus(s)) * z
            }
            NoiseKind::Skewed => {
                let e: f64 = Exp1.sample(&mut rng);
                e - 1.0
            }
        };
        spec.signal_sd * s + noise_sd * e
    })
}

/// Generate genotypes plus source and target phenotypes; deterministic in the seeds.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, SyntheticTruth)> {
    spec.validate()?;
    let LinkFunction::SparseNonlinearShared = spec.link;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [lo, hi] = spec.maf_range;
    let maf: Vec<f64> = (0..spec.p_snps)
        .map(|_| {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..=hi)
            }
        })
        .collect();
    let binomials: Vec<Binomial> = maf
        .iter()
        .map(|&m| Binomial::new(2, m).expect("maf validated"))
        .collect();
    let mut genotypes = Array2::zeros((spec.n, spec.p_snps));
    for mut row in genotypes.rows_mut() {
        for (g, dist) in row.iter_mut().zip(&binomials) {
            *g = dist.sample(&mut rng) as f64;
        }
    }

    // Shared and private causal sets are disjoint whenever enough SNPs exist.
    let mut order: Vec<usize> = sample(&mut rng, spec.p_snps, spec.p_snps).into_vec();
    let shared_causal: Vec<usize> = order.drain(..spec.causal_snps).collect();
    let private_causal: Vec<usize> = if order.len() >= spec.causal_snps {
        order.drain(..spec.causal_snps).collect()
    } else {
        let mut v = order.clone();
        v.extend(&shared_causal[..spec.causal_snps - order.len()]);
        v
    };
    let mut shared_sorted = shared_causal;
    shared_sorted.sort_unstable();
    let mut private_sorted = private_causal;
    private_sorted.sort_unstable();

    let mut shared_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, SHARED_STREAM, 0));
    let (shared, s_signal) = build_network(
        &mut shared_rng,
        shared_sorted,
        spec.latent_features,
        &genotypes,
        &maf,
    );
    let mut private_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, PRIVATE_STREAM, 0));
    let (private, p_signal) = build_network(
        &mut private_rng,
        private_sorted,
        spec.latent_features,
        &genotypes,
        &maf,
    );

    let f = spec.shared_signal_fraction;
    let (a, b) = (f.sqrt(), (1.0 - f).sqrt());
    let t_signal: Array1<f64> = s_signal
        .iter()
        .zip(&p_signal)
        .map(|(s, p)| a * s + b * p)
        .collect();

    let y_source = add_noise(
        &s_signal,
        spec,
        spec.source_noise_sd.unwrap_or(spec.noise_sd),
        spec.noise_seed(0, spec.source_noise_seed),
    );
    let y_target = add_noise(
        &t_signal,
        spec,
        spec.noise_sd,
        spec.noise_seed(1, spec.target_noise_seed),
    );

    let columns = (0..spec.p_snps)
        .map(|j| ColumnMeta {
            name: format!("snp{}", j + 1),
            kind: ColumnKind::Snp,
            observed_values: vec![0.0, 1.0, 2.0],
        })
        .collect();
    let ds = Dataset::new(
        genotypes,
        columns,
        vec![
            (spec.source_name.clone(), y_source),
            (spec.target_name.clone(), y_target),
        ],
    )?;
    let truth = SyntheticTruth {
        spec: spec.clone(),
        maf,
        shared,
        private,
        source_signal: s_signal.to_vec(),
        target_signal: t_signal.to_vec(),
    };
    Ok((ds, truth))
}
