//! Genotype/covariate/phenotype tables: CSV loading, validation, 3:1:1 splits
//! and train-set standardization of numeric covariates.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EnnError, Result};

pub const MISSING: &str = "NA";
/// Divisor floor for standardizing a (near) constant covariate.
pub const MIN_SCALE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Snp,
    Covariate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    pub kind: ColumnKind,
    /// Distinct values seen before imputation (SNP columns only).
    pub observed_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Array2<f64>,
    columns: Vec<ColumnMeta>,
    phenotypes: Vec<(String, Array1<f64>)>,
    /// Rows removed at load time because a phenotype was missing.
    pub dropped_rows: usize,
    /// Columns removed at load time because they were constant.
    pub dropped_columns: Vec<String>,
}

impl Dataset {
    pub fn new(
        x: Array2<f64>,
        columns: Vec<ColumnMeta>,
        phenotypes: Vec<(String, Array1<f64>)>,
    ) -> Result<Self> {
        if columns.len() != x.ncols() {
            return Err(EnnError::DimensionMismatch {
                what: "column metadata",
                expected: x.ncols(),
                actual: columns.len(),
            });
        }
        let mut seen = HashSet::new();
        for name in columns
            .iter()
            .map(|c| &c.name)
            .chain(phenotypes.iter().map(|p| &p.0))
        {
            if !seen.insert(name.as_str()) {
                return Err(EnnError::DuplicateColumn(name.clone()));
            }
        }
        for (_, y) in &phenotypes {
            if y.len() != x.nrows() {
                return Err(EnnError::DimensionMismatch {
                    what: "phenotype length",
                    expected: x.nrows(),
                    actual: y.len(),
                });
            }
        }
        Ok(Self {
            x,
            columns,
            phenotypes,
            dropped_rows: 0,
            dropped_columns: Vec::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn columns(&self) -> &[ColumnMeta] {
        &self.columns
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn phenotype_names(&self) -> impl Iterator<Item = &str> {
        self.phenotypes.iter().map(|(n, _)| n.as_str())
    }

    pub fn phenotype(&self, name: &str) -> Result<ArrayView1<'_, f64>> {
        self.phenotypes
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, y)| y.view())
            .ok_or_else(|| EnnError::MissingColumn(name.to_string()))
    }

    /// Covariate rows selected by `idx`.
    pub fn rows(&self, idx: &[usize]) -> Array2<f64> {
        self.x.select(Axis(0), idx)
    }

    pub fn phenotype_rows(&self, name: &str, idx: &[usize]) -> Result<Array1<f64>> {
        Ok(self.phenotype(name)?.select(Axis(0), idx))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SnpSelection {
    /// Must be the literal `"auto-remaining"`.
    Auto(String),
    Named(Vec<String>),
}

impl Default for SnpSelection {
    fn default() -> Self {
        SnpSelection::Auto("auto-remaining".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub phenotypes: Vec<String>,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub snps: SnpSelection,
}

impl Schema {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| EnnError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

enum Role {
    Phenotype,
    Covariate,
    Snp,
    Ignored,
}

fn parse_number(raw: &str, row: usize, column: &str) -> Result<Option<f64>> {
    let s = raw.trim();
    if s == MISSING {
        return Ok(None);
    }
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .map(Some)
        .ok_or_else(|| EnnError::MalformedNumber {
            row,
            column: column.to_string(),
            value: raw.to_string(),
        })
}

/// Most frequent value; ties go to the smallest value.
fn mode(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(v as i64).or_default() += 1;
    }
    let mut best: Option<(i64, usize)> = None;
    for (v, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((v, c));
        }
    }
    best.map(|(v, _)| v as f64)
}

/// Load a header-first, comma-delimited CSV according to `schema`.
///
/// SNP cells must be 0, 1, 2 or `NA`; missing genotypes are imputed with the
/// column mode. Rows with any missing phenotype are dropped. Constant columns
/// are dropped with a warning.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| EnnError::io(path, e))?;
    load_csv_reader(file, schema)
}

pub fn load_csv_reader(reader: impl std::io::Read, schema: &Schema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::Headers)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();

    let mut seen = HashSet::new();
    for h in &headers {
        if !seen.insert(h.as_str()) {
            return Err(EnnError::DuplicateColumn(h.clone()));
        }
    }
    for name in schema.phenotypes.iter().chain(&schema.covariates) {
        if !seen.contains(name.as_str()) {
            return Err(EnnError::MissingColumn(name.clone()));
        }
    }
    if schema.phenotypes.is_empty() {
        return Err(EnnError::Config("schema lists no phenotypes".into()));
    }
    let named_snps: Option<HashSet<&str>> = match &schema.snps {
        SnpSelection::Auto(s) if s == "auto-remaining" => None,
        SnpSelection::Auto(s) => {
            return Err(EnnError::Config(format!(
                "snps must be \"auto-remaining\" or a list of names, got {s:?}"
            )))
        }
        SnpSelection::Named(names) => {
            for name in names {
                if !seen.contains(name.as_str()) {
                    return Err(EnnError::MissingColumn(name.clone()));
                }
            }
            Some(names.iter().map(String::as_str).collect())
        }
    };

    let roles: Vec<Role> = headers
        .iter()
        .map(|h| {
            if schema.phenotypes.contains(h) {
                Role::Phenotype
            } else if schema.covariates.contains(h) {
                Role::Covariate
            } else if named_snps
                .as_ref()
                .is_none_or(|set| set.contains(h.as_str()))
            {
                Role::Snp
            } else {
                Role::Ignored
            }
        })
        .collect();

    // Features keep file order; phenotypes keep schema order.
    let feature_cols: Vec<usize> = roles
        .iter()
        .enumerate()
        .filter(|(_, r)| matches!(r, Role::Snp | Role::Covariate))
        .map(|(i, _)| i)
        .collect();
    let pheno_cols: Vec<usize> = schema
        .phenotypes
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == name)
                .expect("checked above")
        })
        .collect();

    let mut features: Vec<Vec<Option<f64>>> = vec![Vec::new(); feature_cols.len()];
    let mut phenos: Vec<Vec<f64>> = vec![Vec::new(); pheno_cols.len()];
    let mut dropped_rows = 0;

    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let mut pheno_vals = Vec::with_capacity(pheno_cols.len());
        for &c in &pheno_cols {
            pheno_vals.push(parse_number(&record[c], row, &headers[c])?);
        }
        let mut feat_vals = Vec::with_capacity(feature_cols.len());
        for &c in &feature_cols {
            let raw = &record[c];
            let v = parse_number(raw, row, &headers[c])?;
            match roles[c] {
                Role::Snp => {
                    if let Some(v) = v {
                        if !(v == 0.0 || v == 1.0 || v == 2.0) {
                            return Err(EnnError::InvalidSnp {
                                row,
                                column: headers[c].clone(),
                                value: raw.trim().to_string(),
                            });
                        }
                    }
                }
                _ => {
                    if v.is_none() {
                        return Err(EnnError::MissingCovariate {
                            row,
                            column: headers[c].clone(),
                        });
                    }
                }
            }
            feat_vals.push(v);
        }
        if pheno_vals.iter().any(Option::is_none) {
            dropped_rows += 1;
            continue;
        }
        for (dst, v) in phenos.iter_mut().zip(pheno_vals) {
            dst.push(v.expect("checked"));
        }
        for (dst, v) in features.iter_mut().zip(feat_vals) {
            dst.push(v);
        }
    }
    if dropped_rows > 0 {
        log::warn!("dropped {dropped_rows} rows with a missing phenotype");
    }

    let n = phenos.first().map_or(0, Vec::len);
    let mut kept: Vec<(ColumnMeta, Vec<f64>)> = Vec::new();
    let mut dropped_columns = Vec::new();
    for (&c, values) in feature_cols.iter().zip(features) {
        let name = headers[c].clone();
        let (kind, observed_values, filled) = match roles[c] {
            Role::Snp => {
                let mut observed: Vec<f64> = values.iter().flatten().copied().collect();
                observed.sort_by(f64::total_cmp);
                observed.dedup();
                let fill = mode(values.iter().flatten().copied()).unwrap_or(0.0);
                let filled: Vec<f64> = values.iter().map(|v| v.unwrap_or(fill)).collect();
                (ColumnKind::Snp, observed, filled)
            }
            _ => (
                ColumnKind::Covariate,
                Vec::new(),
                values.into_iter().map(|v| v.expect("checked")).collect(),
            ),
        };
        let constant = filled.windows(2).all(|w| w[0] == w[1]);
        if constant {
            log::warn!("dropping constant column {name:?}");
            dropped_columns.push(name);
            continue;
        }
        kept.push((
            ColumnMeta {
                name,
                kind,
                observed_values,
            },
            filled,
        ));
    }

    let mut x = Array2::zeros((n, kept.len()));
    for (j, (_, col)) in kept.iter().enumerate() {
        x.column_mut(j).assign(&ArrayView1::from(col.as_slice()));
    }
    let columns = kept.into_iter().map(|(m, _)| m).collect();
    let phenotypes = schema
        .phenotypes
        .iter()
        .cloned()
        .zip(phenos.into_iter().map(Array1::from))
        .collect();
    let mut ds = Dataset::new(x, columns, phenotypes)?;
    ds.dropped_rows = dropped_rows;
    ds.dropped_columns = dropped_columns;
    Ok(ds)
}

/// Write covariates and phenotypes as a CSV that [`load_csv`] reads back.
pub fn write_csv(ds: &Dataset, writer: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ds.phenotype_names().map(str::to_string).collect();
    header.extend(ds.column_names());
    w.write_record(&header)?;
    let phenos: Vec<ArrayView1<'_, f64>> = ds.phenotypes.iter().map(|(_, y)| y.view()).collect();
    for i in 0..ds.n() {
        let mut record: Vec<String> = phenos.iter().map(|y| y[i].to_string()).collect();
        record.extend(ds.x.row(i).iter().map(|v| v.to_string()));
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| EnnError::io("<csv writer>", e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub replicate_count: usize,
    pub master_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// SplitMix64 finalizer over (master, stream, index); used for every derived seed.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) const SPLIT_STREAM: u64 = 1;

/// Sizes (train, valid, test): validation and test get round(n/5) each and
/// train takes the rest, so every part is within 1 of the exact 3:1:1 share.
pub fn split_sizes(n: usize) -> Result<(usize, usize, usize)> {
    if n < 5 {
        return Err(EnnError::TooFewSamples(n));
    }
    // n/5 never has fractional part .5, so rounding is unambiguous
    let fifth = (2 * n + 5) / 10;
    Ok((n - 2 * fifth, fifth, fifth))
}

pub fn split_indices(n: usize, spec: &SplitSpec, replicate_index: usize) -> Result<SplitIndices> {
    if replicate_index >= spec.replicate_count {
        return Err(EnnError::Config(format!(
            "replicate index {replicate_index} out of range (count {})",
            spec.replicate_count
        )));
    }
    let (n_train, n_valid, _) = split_sizes(n)?;
    let mut order: Vec<usize> = (0..n).collect();
    let seed = derive_seed(spec.master_seed, SPLIT_STREAM, replicate_index as u64);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = order.split_off(n_train + n_valid);
    let valid = order.split_off(n_train);
    Ok(SplitIndices {
        train: order,
        valid,
        test,
    })
}

/// Random 3:1:1 partition of the dataset rows for one replicate.
pub fn split(ds: &Dataset, spec: &SplitSpec, replicate_index: usize) -> Result<SplitIndices> {
    split_indices(ds.n(), spec, replicate_index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledColumn {
    pub name: String,
    pub mean: f64,
    /// max(population sd, MIN_SCALE)
    pub scale: f64,
}

/// Train-set centering/scaling for covariate columns.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub columns: Vec<ScaledColumn>,
}

impl Scaler {
    /// Apply to every row of `ds`, matching columns by name.
    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        let mut out = ds.clone();
        for sc in &self.columns {
            let j = ds
                .columns
                .iter()
                .position(|c| c.name == sc.name)
                .ok_or_else(|| EnnError::MissingColumn(sc.name.clone()))?;
            out.x
                .column_mut(j)
                .mapv_inplace(|v| (v - sc.mean) / sc.scale);
        }
        Ok(out)
    }
}

/// Standardize covariate columns by train-set statistics; SNPs stay 0/1/2.
pub fn standardize_covariates(ds: &Dataset, train_idx: &[usize]) -> Result<(Dataset, Scaler)> {
    if train_idx.is_empty() {
        return Err(EnnError::EmptyDataset(
            "standardization needs training rows",
        ));
    }
    let mut scaler = Scaler::default();
    for (j, meta) in ds.columns.iter().enumerate() {
        if meta.kind != ColumnKind::Covariate {
            continue;
        }
        let col = ds.x.column(j);
        let m = train_idx.len() as f64;
        let mean = train_idx.iter().map(|&i| col[i]).sum::<f64>() / m;
        let var = train_idx
            .iter()
            .map(|&i| (col[i] - mean).powi(2))
            .sum::<f64>()
            / m;
        scaler.columns.push(ScaledColumn {
            name: meta.name.clone(),
            mean,
            scale: var.sqrt().max(MIN_SCALE),
        });
    }
    Ok((scaler.apply(ds)?, scaler))
}
