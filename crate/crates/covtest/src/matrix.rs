//! Dense matrix container and the preprocessing primitives the statistics
//! are built from: centering, scaling, Gram matrices, subset covariance and
//! residualization, plus TSV ingestion.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Dense p x n data matrix, rows are features, columns are samples.
///
/// Stored row-major so per-feature passes are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Vec<f64>,
    p: usize,
    n: usize,
    feature_ids: Option<Vec<String>>,
    sample_ids: Option<Vec<String>>,
}

impl FeatureMatrix {
    /// Builds a matrix from row-major values. Every entry must be finite.
    pub fn new(values: Vec<f64>, p: usize, n: usize) -> Result<Self> {
        if p == 0 || n == 0 || values.len() != p * n {
            return Err(Error::DimensionMismatch(format!(
                "expected {p} x {n} = {} values, got {}",
                p * n,
                values.len()
            )));
        }
        for (idx, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    row: idx / n,
                    col: idx % n,
                });
            }
        }
        Ok(FeatureMatrix {
            values,
            p,
            n,
            feature_ids: None,
            sample_ids: None,
        })
    }

    /// Builds a matrix from feature rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let p = rows.len();
        let n = rows.first().map(Vec::len).unwrap_or(0);
        let mut values = Vec::with_capacity(p * n);
        for row in rows {
            if row.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "ragged rows: expected {n} columns, got {}",
                    row.len()
                )));
            }
            values.extend_from_slice(row);
        }
        FeatureMatrix::new(values, p, n)
    }

    pub fn with_ids(
        mut self,
        feature_ids: Option<Vec<String>>,
        sample_ids: Option<Vec<String>>,
    ) -> Result<Self> {
        if let Some(ids) = &feature_ids {
            if ids.len() != self.p {
                return Err(Error::DimensionMismatch(format!(
                    "{} feature ids for {} rows",
                    ids.len(),
                    self.p
                )));
            }
        }
        if let Some(ids) = &sample_ids {
            if ids.len() != self.n {
                return Err(Error::DimensionMismatch(format!(
                    "{} sample ids for {} columns",
                    ids.len(),
                    self.n
                )));
            }
        }
        self.feature_ids = feature_ids;
        self.sample_ids = sample_ids;
        Ok(self)
    }

    pub fn n_features(&self) -> usize {
        self.p
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn feature_ids(&self) -> Option<&[String]> {
        self.feature_ids.as_deref()
    }

    pub fn sample_ids(&self) -> Option<&[String]> {
        self.sample_ids.as_deref()
    }

    /// Feature id for row `i`, falling back to a positional name.
    pub fn feature_id(&self, i: usize) -> String {
        match &self.feature_ids {
            Some(ids) => ids[i].clone(),
            None => format!("f{}", i + 1),
        }
    }

    /// Sample id for column `k`, falling back to a positional name.
    pub fn sample_id(&self, k: usize) -> String {
        match &self.sample_ids {
            Some(ids) => ids[k].clone(),
            None => format!("s{}", k + 1),
        }
    }

    /// Checks the minimum size for test computations (p >= 2, n >= 3).
    pub fn check_testable(&self) -> Result<()> {
        if self.p < 2 || self.n < 3 {
            return Err(Error::TooSmallForTest {
                p: self.p,
                n: self.n,
            });
        }
        Ok(())
    }

    /// Subtracts each row's sample mean; feature means become exactly
    /// representable zeros up to rounding.
    pub fn center_rows(&self) -> FeatureMatrix {
        let mut out = self.clone();
        for i in 0..self.p {
            let row = &mut out.values[i * self.n..(i + 1) * self.n];
            let mean = row.iter().sum::<f64>() / self.n as f64;
            for v in row.iter_mut() {
                *v -= mean;
            }
        }
        out
    }

    /// Subtracts each column's mean across features. Exploration aid; the
    /// test statistics assume row centering.
    pub fn center_columns(&self) -> FeatureMatrix {
        let mut out = self.clone();
        for k in 0..self.n {
            let mut sum = 0.0;
            for i in 0..self.p {
                sum += self.values[i * self.n + k];
            }
            let mean = sum / self.p as f64;
            for i in 0..self.p {
                out.values[i * self.n + k] -= mean;
            }
        }
        out
    }

    /// Centers each row and rescales it to unit sample variance
    /// (divisor n - 1).
    pub fn scale_rows(&self) -> Result<FeatureMatrix> {
        if self.n < 2 {
            return Err(Error::DimensionMismatch(
                "row scaling needs at least 2 samples".into(),
            ));
        }
        let mut out = self.center_rows();
        for i in 0..self.p {
            let row = &mut out.values[i * self.n..(i + 1) * self.n];
            let ss: f64 = row.iter().map(|v| v * v).sum();
            let var = ss / (self.n - 1) as f64;
            if var <= 0.0 {
                return Err(Error::ZeroVarianceRow(i));
            }
            let sd = var.sqrt();
            for v in row.iter_mut() {
                *v /= sd;
            }
        }
        Ok(out)
    }

    /// Extracts the rows in `indices` (in the given order), keeping ids.
    pub fn select_rows(&self, indices: &[usize]) -> Result<FeatureMatrix> {
        let mut values = Vec::with_capacity(indices.len() * self.n);
        for &i in indices {
            if i >= self.p {
                return Err(Error::IndexOutOfBounds {
                    index: i,
                    n: self.p,
                });
            }
            values.extend_from_slice(self.row(i));
        }
        let feature_ids = self
            .feature_ids
            .as_ref()
            .map(|ids| indices.iter().map(|&i| ids[i].clone()).collect());
        Ok(FeatureMatrix {
            values,
            p: indices.len(),
            n: self.n,
            feature_ids,
            sample_ids: self.sample_ids.clone(),
        })
    }
}

/// Outcome vector over the n samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    values: Vec<f64>,
    centered: bool,
    encoding: OutcomeEncoding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeEncoding {
    Raw,
    /// Two-group encoding 1/n1 vs -1/n2; carries the group sizes.
    TwoGroup {
        n1: usize,
        n2: usize,
    },
}

impl Outcome {
    /// Wraps raw outcome values. Rejects non-finite and constant vectors.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DimensionMismatch("empty outcome".into()));
        }
        if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: 0, col: idx });
        }
        if values.iter().all(|v| *v == values[0]) {
            return Err(Error::ConstantOutcome);
        }
        Ok(Outcome {
            values,
            centered: false,
            encoding: OutcomeEncoding::Raw,
        })
    }

    pub(crate) fn new_unchecked(values: Vec<f64>, centered: bool, encoding: OutcomeEncoding) -> Self {
        Outcome {
            values,
            centered,
            encoding,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn encoding(&self) -> OutcomeEncoding {
        self.encoding
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    /// Returns a mean-zero copy (no-op when already flagged centered).
    pub fn centered(&self) -> Outcome {
        if self.centered {
            return self.clone();
        }
        let n = self.values.len() as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        Outcome {
            values: self.values.iter().map(|v| v - mean).collect(),
            centered: true,
            encoding: self.encoding,
        }
    }

    pub fn sample_variance(&self) -> f64 {
        let n = self.values.len() as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        self.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    }
}

/// p x p symmetric sample covariance with its divisor.
#[derive(Debug, Clone)]
pub struct CovarianceMatrix {
    pub values: DMatrix<f64>,
    pub divisor: usize,
}

impl CovarianceMatrix {
    /// Entrywise difference with another covariance estimate.
    pub fn difference(&self, other: &CovarianceMatrix) -> DMatrix<f64> {
        &self.values - &other.values
    }
}

/// Gram matrix G = X'X, entry (k, l) = sum_i x_ik x_il.
pub fn gram(x: &FeatureMatrix) -> DMatrix<f64> {
    let (p, n) = (x.n_features(), x.n_samples());
    let mut g = DMatrix::zeros(n, n);
    // Accumulate row by row; the result is symmetric so fill both halves.
    for i in 0..p {
        let row = x.row(i);
        for k in 0..n {
            let xk = row[k];
            if xk == 0.0 {
                continue;
            }
            for l in k..n {
                g[(k, l)] += xk * row[l];
            }
        }
    }
    for k in 0..n {
        for l in (k + 1)..n {
            g[(l, k)] = g[(k, l)];
        }
    }
    g
}

/// Raises every entry to the integer power k (k >= 1).
pub fn elementwise_power(m: &DMatrix<f64>, k: u32) -> DMatrix<f64> {
    assert!(k >= 1, "elementwise power needs k >= 1");
    m.map(|v| v.powi(k as i32))
}

/// Sum of all matrix entries.
pub fn xi(m: &DMatrix<f64>) -> f64 {
    m.iter().sum()
}

/// Sample covariance over the sample subset, divisor |subset|, no mean
/// subtraction: entry (i, j) = sum_{k in subset} x_ik x_jk / |subset|.
/// Rows are assumed centered by the caller.
pub fn sample_covariance(x: &FeatureMatrix, subset: &[usize]) -> Result<CovarianceMatrix> {
    let n_w = subset.len();
    if n_w < 2 {
        return Err(Error::SubsetTooSmall(n_w));
    }
    for &k in subset {
        if k >= x.n_samples() {
            return Err(Error::IndexOutOfBounds {
                index: k,
                n: x.n_samples(),
            });
        }
    }
    let p = x.n_features();
    let mut values = DMatrix::zeros(p, p);
    for i in 0..p {
        let ri = x.row(i);
        for j in i..p {
            let rj = x.row(j);
            let mut sum = 0.0;
            for &k in subset {
                sum += ri[k] * rj[k];
            }
            let v = sum / n_w as f64;
            values[(i, j)] = v;
            values[(j, i)] = v;
        }
    }
    Ok(CovarianceMatrix {
        values,
        divisor: n_w,
    })
}

/// Covariate columns for residualization, sample-major (n rows, c columns).
#[derive(Debug, Clone, Default)]
pub struct Covariates {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
}

impl Covariates {
    pub fn empty() -> Self {
        Covariates::default()
    }

    pub fn new(names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} covariate names for {} columns",
                names.len(),
                columns.len()
            )));
        }
        let n = columns.first().map(Vec::len).unwrap_or(0);
        for col in &columns {
            if col.len() != n {
                return Err(Error::DimensionMismatch(
                    "covariate columns have unequal lengths".into(),
                ));
            }
            if let Some(idx) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row: idx, col: 0 });
            }
        }
        Ok(Covariates { names, columns })
    }

    pub fn n_covariates(&self) -> usize {
        self.columns.len()
    }

    pub fn n_samples(&self) -> Option<usize> {
        self.columns.first().map(Vec::len)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }
}

/// Orthonormal basis of the column span of [intercept | covariates],
/// as an n x d matrix. Fails if the design is rank deficient or has as
/// many columns as samples.
pub(crate) fn design_basis(cov: &Covariates, n: usize) -> Result<DMatrix<f64>> {
    if let Some(cn) = cov.n_samples() {
        if cn != n {
            return Err(Error::DimensionMismatch(format!(
                "covariates have {cn} samples, matrix has {n}"
            )));
        }
    }
    let c = cov.n_covariates();
    if c + 1 >= n {
        return Err(Error::RankDeficientDesign);
    }
    let mut design = DMatrix::zeros(n, c + 1);
    for k in 0..n {
        design[(k, 0)] = 1.0;
    }
    for (j, col) in cov.columns().iter().enumerate() {
        for k in 0..n {
            design[(k, j + 1)] = col[k];
        }
    }
    let qr = design.clone().qr();
    let r = qr.r();
    let max_diag = (0..c + 1).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    let tol = max_diag * 1e-10;
    for j in 0..c + 1 {
        if r[(j, j)].abs() <= tol {
            return Err(Error::RankDeficientDesign);
        }
    }
    Ok(qr.q())
}

/// Residual of each row of X after projecting out the basis columns.
pub(crate) fn residualize_against_basis(x: &FeatureMatrix, basis: &DMatrix<f64>) -> FeatureMatrix {
    let (p, n) = (x.n_features(), x.n_samples());
    let d = basis.ncols();
    let mut out = x.clone();
    let mut coef = vec![0.0; d];
    for i in 0..p {
        let row = &mut out.values[i * n..(i + 1) * n];
        for (j, c) in coef.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in 0..n {
                s += basis[(k, j)] * row[k];
            }
            *c = s;
        }
        for k in 0..n {
            let mut proj = 0.0;
            for (j, c) in coef.iter().enumerate() {
                proj += basis[(k, j)] * c;
            }
            row[k] -= proj;
        }
    }
    out
}

/// Replaces each row with its least-squares residual against
/// [intercept | covariates]. With no covariates this is row centering.
pub fn residualize(x: &FeatureMatrix, covariates: &Covariates) -> Result<FeatureMatrix> {
    let basis = design_basis(covariates, x.n_samples())?;
    Ok(residualize_against_basis(x, &basis))
}

fn parse_field(field: &str, path: &str, line: usize) -> Result<f64> {
    match field.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::MalformedLine {
            path: path.to_string(),
            line,
            reason: format!("expected a finite number, got {field:?}"),
        }),
    }
}

/// Reads a matrix from tab-separated text: first row sample IDs, first
/// column feature IDs, real-valued body. Missing or non-numeric entries
/// are rejected.
pub fn read_matrix_tsv(path: &Path) -> Result<FeatureMatrix> {
    let text = fs::read_to_string(path)?;
    let shown = path.display().to_string();
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::MalformedLine {
        path: shown.clone(),
        line: 1,
        reason: "empty file".into(),
    })?;
    let header_fields: Vec<&str> = header.split('\t').collect();
    if header_fields.len() < 2 {
        return Err(Error::MalformedLine {
            path: shown,
            line: 1,
            reason: "header must list at least one sample id".into(),
        });
    }
    let sample_ids: Vec<String> = header_fields[1..].iter().map(|s| s.trim().to_string()).collect();
    let n = sample_ids.len();
    let mut feature_ids = Vec::new();
    let mut values = Vec::new();
    for (lineno, line) in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != n + 1 {
            return Err(Error::MalformedLine {
                path: shown,
                line: lineno + 1,
                reason: format!("expected {} fields, got {}", n + 1, fields.len()),
            });
        }
        feature_ids.push(fields[0].trim().to_string());
        for field in &fields[1..] {
            values.push(parse_field(field, &shown, lineno + 1)?);
        }
    }
    let p = feature_ids.len();
    FeatureMatrix::new(values, p, n)?.with_ids(Some(feature_ids), Some(sample_ids))
}

/// Writes the matrix in the same TSV layout `read_matrix_tsv` accepts.
pub fn write_matrix_tsv(x: &FeatureMatrix, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("feature_id");
    for k in 0..x.n_samples() {
        let _ = write!(out, "\t{}", x.sample_id(k));
    }
    out.push('\n');
    for i in 0..x.n_features() {
        out.push_str(&x.feature_id(i));
        for v in x.row(i) {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads covariates from TSV: first row covariate names, first column
/// sample IDs, one sample per row.
pub fn read_covariates_tsv(path: &Path) -> Result<Covariates> {
    let text = fs::read_to_string(path)?;
    let shown = path.display().to_string();
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::MalformedLine {
        path: shown.clone(),
        line: 1,
        reason: "empty file".into(),
    })?;
    let names: Vec<String> = header
        .split('\t')
        .skip(1)
        .map(|s| s.trim().to_string())
        .collect();
    if names.is_empty() {
        return Err(Error::MalformedLine {
            path: shown,
            line: 1,
            reason: "header must list at least one covariate".into(),
        });
    }
    let mut columns = vec![Vec::new(); names.len()];
    for (lineno, line) in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != names.len() + 1 {
            return Err(Error::MalformedLine {
                path: shown,
                line: lineno + 1,
                reason: format!("expected {} fields, got {}", names.len() + 1, fields.len()),
            });
        }
        for (j, field) in fields[1..].iter().enumerate() {
            columns[j].push(parse_field(field, &shown, lineno + 1)?);
        }
    }
    Covariates::new(names, columns)
}

/// Writes a square matrix (slopes, covariance differences) as TSV with
/// feature ids on both axes, for heatmap rendering downstream.
pub fn write_square_tsv(m: &DMatrix<f64>, ids: &[String], path: &Path) -> Result<()> {
    if ids.len() != m.nrows() || m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{} ids for a {} x {} matrix",
            ids.len(),
            m.nrows(),
            m.ncols()
        )));
    }
    let mut out = String::new();
    out.push_str("feature_id");
    for id in ids {
        let _ = write!(out, "\t{id}");
    }
    out.push('\n');
    for i in 0..m.nrows() {
        out.push_str(&ids[i]);
        for j in 0..m.ncols() {
            let _ = write!(out, "\t{}", m[(i, j)]);
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(p: usize, n: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..p * n).map(|_| rng.random_range(-2.0..2.0)).collect();
        FeatureMatrix::new(values, p, n).unwrap()
    }

    #[test]
    fn center_rows_examples() {
        let x = FeatureMatrix::from_rows(&[vec![1.0, 3.0]]).unwrap();
        assert_eq!(x.center_rows().row(0), &[-1.0, 1.0]);

        let z = FeatureMatrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(z.center_rows().values(), z.values());

        let x = FeatureMatrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(x.center_rows().row(0), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn center_rows_idempotent() {
        let x = random_matrix(6, 11, 7);
        let once = x.center_rows();
        let twice = once.center_rows();
        for (a, b) in once.values().iter().zip(twice.values()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn scale_rows_unit_variance() {
        let x = FeatureMatrix::from_rows(&[vec![-1.0, 1.0]]).unwrap();
        let s = x.scale_rows().unwrap();
        let inv_sqrt2 = 1.0 / 2.0_f64.sqrt();
        assert_relative_eq!(s.row(0)[0], -inv_sqrt2, epsilon = 1e-12);
        assert_relative_eq!(s.row(0)[1], inv_sqrt2, epsilon = 1e-12);

        let x = random_matrix(4, 9, 3);
        let s = x.scale_rows().unwrap();
        for i in 0..4 {
            let row = s.row(i);
            let mean = row.iter().sum::<f64>() / 9.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert_relative_eq!(mean, 0.0, epsilon = 1e-12);
            assert_relative_eq!(var, 1.0, epsilon = 1e-12);
        }
        // already standardized rows stay put
        let again = s.scale_rows().unwrap();
        for (a, b) in s.values().iter().zip(again.values()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn scale_rows_rejects_constant_row() {
        let x = FeatureMatrix::from_rows(&[vec![2.0, 2.0, 2.0], vec![1.0, 2.0, 3.0]]).unwrap();
        match x.scale_rows() {
            Err(Error::ZeroVarianceRow(0)) => {}
            other => panic!("expected ZeroVarianceRow(0), got {other:?}"),
        }
    }

    #[test]
    fn gram_examples() {
        let eye = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let g = gram(&eye);
        assert_eq!(g, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]));

        let x = FeatureMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let g = gram(&x);
        assert_eq!(g, DMatrix::from_row_slice(2, 2, &[10.0, 14.0, 14.0, 20.0]));

        let x = FeatureMatrix::from_rows(&[vec![1.0, 0.0, 2.0], vec![-1.0, 0.0, 1.0]]).unwrap();
        let g = gram(&x);
        for k in 0..3 {
            assert_eq!(g[(1, k)], 0.0);
            assert_eq!(g[(k, 1)], 0.0);
        }
    }

    #[test]
    fn gram_matches_direct_double_sum() {
        let x = random_matrix(5, 7, 11);
        let g = gram(&x);
        for k in 0..7 {
            for l in 0..7 {
                let direct: f64 = (0..5).map(|i| x.row(i)[k] * x.row(i)[l]).sum();
                assert_relative_eq!(g[(k, l)], direct, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn gram_is_positive_semidefinite() {
        for seed in 0..5 {
            let x = random_matrix(4, 6, seed);
            let g = gram(&x);
            let trace = g.trace();
            let eig = nalgebra::SymmetricEigen::new(g);
            for ev in eig.eigenvalues.iter() {
                assert!(*ev >= -1e-8 * trace, "eigenvalue {ev} below tolerance");
            }
        }
    }

    #[test]
    fn elementwise_power_examples() {
        let m = DMatrix::from_row_slice(2, 2, &[10.0, 14.0, 14.0, 20.0]);
        let sq = elementwise_power(&m, 2);
        assert_eq!(sq, DMatrix::from_row_slice(2, 2, &[100.0, 196.0, 196.0, 400.0]));
        assert_eq!(elementwise_power(&m, 1), m);
        let eye = DMatrix::<f64>::identity(3, 3);
        assert_eq!(elementwise_power(&eye, 2), eye);
    }

    #[test]
    fn xi_examples() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(xi(&m), 10.0);
        assert_eq!(xi(&DMatrix::<f64>::zeros(3, 3)), 0.0);
        assert_eq!(xi(&DMatrix::<f64>::identity(5, 5)), 5.0);
    }

    #[test]
    fn xi_of_squared_matrix_is_frobenius_norm_squared() {
        let x = random_matrix(4, 4, 21);
        let d = DMatrix::from_row_slice(4, 4, x.values());
        let frob2: f64 = d.iter().map(|v| v * v).sum();
        assert_relative_eq!(xi(&elementwise_power(&d, 2)), frob2, epsilon = 1e-12);
    }

    #[test]
    fn sample_covariance_examples() {
        let x = FeatureMatrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let cov = sample_covariance(&x, &[0, 1]).unwrap();
        assert_eq!(cov.values[(0, 0)], 1.0);
        assert_eq!(cov.divisor, 2);

        let z = FeatureMatrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let cov = sample_covariance(&z, &[0, 1]).unwrap();
        assert_eq!(xi(&cov.values), 0.0);

        let x = FeatureMatrix::from_rows(&[vec![1.0, -1.0], vec![1.0, -1.0]]).unwrap();
        let cov = sample_covariance(&x, &[0, 1]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(cov.values[(i, j)], 1.0);
            }
        }
    }

    #[test]
    fn sample_covariance_full_sample_matches_outer_product() {
        let x = random_matrix(3, 8, 5);
        let cov = sample_covariance(&x, &(0..8).collect::<Vec<_>>()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let direct: f64 =
                    (0..8).map(|k| x.row(i)[k] * x.row(j)[k]).sum::<f64>() / 8.0;
                assert_relative_eq!(cov.values[(i, j)], direct, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn sample_covariance_rejects_small_subsets() {
        let x = random_matrix(2, 5, 1);
        assert!(matches!(
            sample_covariance(&x, &[3]),
            Err(Error::SubsetTooSmall(1))
        ));
        assert!(matches!(
            sample_covariance(&x, &[0, 9]),
            Err(Error::IndexOutOfBounds { index: 9, n: 5 })
        ));
    }

    #[test]
    fn residualize_with_no_covariates_centers_rows() {
        let x = random_matrix(3, 6, 13);
        let res = residualize(&x, &Covariates::empty()).unwrap();
        let centered = x.center_rows();
        for (a, b) in res.values().iter().zip(centered.values()) {
            assert_relative_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn residualize_exact_fit_gives_zero_row() {
        let t = vec![0.5, 1.0, 1.5, 2.5];
        let row: Vec<f64> = t.iter().map(|v| 3.0 * v - 1.0).collect();
        let x = FeatureMatrix::from_rows(&[row]).unwrap();
        let cov = Covariates::new(vec!["t".into()], vec![t]).unwrap();
        let res = residualize(&x, &cov).unwrap();
        for v in res.row(0) {
            assert_relative_eq!(*v, 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn residualize_simple_regression_example() {
        let x = FeatureMatrix::from_rows(&[vec![1.0, 2.0, 4.0]]).unwrap();
        let cov = Covariates::new(vec!["t".into()], vec![vec![1.0, 2.0, 3.0]]).unwrap();
        let res = residualize(&x, &cov).unwrap();
        let expect = [1.0 / 6.0, -1.0 / 3.0, 1.0 / 6.0];
        for (a, b) in res.row(0).iter().zip(expect.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn residualize_output_is_orthogonal_to_design_and_idempotent() {
        let x = random_matrix(4, 10, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let c1: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c2: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cov = Covariates::new(vec!["a".into(), "b".into()], vec![c1.clone(), c2.clone()]).unwrap();
        let res = residualize(&x, &cov).unwrap();
        let scale: f64 = x.values().iter().map(|v| v.abs()).fold(0.0, f64::max);
        for i in 0..4 {
            let row = res.row(i);
            let dot1: f64 = row.iter().sum();
            let dot2: f64 = row.iter().zip(&c1).map(|(a, b)| a * b).sum();
            let dot3: f64 = row.iter().zip(&c2).map(|(a, b)| a * b).sum();
            assert!(dot1.abs() <= 1e-8 * scale * 10.0);
            assert!(dot2.abs() <= 1e-8 * scale * 10.0);
            assert!(dot3.abs() <= 1e-8 * scale * 10.0);
        }
        let res2 = residualize(&res, &cov).unwrap();
        for (a, b) in res.values().iter().zip(res2.values()) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn residualize_rejects_rank_deficient_designs() {
        let x = random_matrix(2, 6, 23);
        let col = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let dup = Covariates::new(
            vec!["a".into(), "b".into()],
            vec![col.clone(), col.iter().map(|v| 2.0 * v).collect()],
        )
        .unwrap();
        assert!(matches!(
            residualize(&x, &dup),
            Err(Error::RankDeficientDesign)
        ));

        // constant covariate collides with the intercept
        let constant = Covariates::new(vec!["c".into()], vec![vec![3.0; 6]]).unwrap();
        assert!(matches!(
            residualize(&x, &constant),
            Err(Error::RankDeficientDesign)
        ));

        // too many columns for the sample count
        let x_small = random_matrix(2, 3, 29);
        let wide = Covariates::new(
            vec!["a".into(), "b".into()],
            vec![vec![1.0, 2.0, 3.0], vec![1.0, 4.0, 9.0]],
        )
        .unwrap();
        assert!(matches!(
            residualize(&x_small, &wide),
            Err(Error::RankDeficientDesign)
        ));
    }

    #[test]
    fn outcome_validation() {
        assert!(matches!(
            Outcome::from_values(vec![2.0, 2.0, 2.0]),
            Err(Error::ConstantOutcome)
        ));
        assert!(Outcome::from_values(vec![1.0, f64::NAN]).is_err());
        let y = Outcome::from_values(vec![1.0, 2.0, 6.0]).unwrap();
        let c = y.centered();
        assert!(c.is_centered());
        assert_relative_eq!(c.values().iter().sum::<f64>(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(y.sample_variance(), 7.0, epsilon = 1e-12);
    }

    #[test]
    fn matrix_rejects_non_finite_and_ragged_input() {
        assert!(matches!(
            FeatureMatrix::new(vec![1.0, f64::INFINITY], 1, 2),
            Err(Error::NonFinite { .. })
        ));
        assert!(FeatureMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
        assert!(FeatureMatrix::new(vec![1.0; 5], 2, 3).is_err());
    }

    #[test]
    fn tsv_round_trip() {
        let dir = std::env::temp_dir().join("covtest_matrix_io_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.tsv");
        let x = random_matrix(3, 4, 31)
            .with_ids(
                Some(vec!["g1".into(), "g2".into(), "g3".into()]),
                Some(vec!["s1".into(), "s2".into(), "s3".into(), "s4".into()]),
            )
            .unwrap();
        write_matrix_tsv(&x, &path).unwrap();
        let back = read_matrix_tsv(&path).unwrap();
        assert_eq!(back.feature_ids().unwrap(), x.feature_ids().unwrap());
        assert_eq!(back.sample_ids().unwrap(), x.sample_ids().unwrap());
        for (a, b) in back.values().iter().zip(x.values()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn tsv_rejects_malformed_bodies() {
        let dir = std::env::temp_dir().join("covtest_matrix_io_test");
        fs::create_dir_all(&dir).unwrap();

        let bad_number = dir.join("bad_number.tsv");
        fs::write(&bad_number, "feature_id\ts1\ts2\ng1\t1.0\tNA\n").unwrap();
        assert!(matches!(
            read_matrix_tsv(&bad_number),
            Err(Error::MalformedLine { line: 2, .. })
        ));

        let ragged = dir.join("ragged.tsv");
        fs::write(&ragged, "feature_id\ts1\ts2\ng1\t1.0\n").unwrap();
        assert!(matches!(
            read_matrix_tsv(&ragged),
            Err(Error::MalformedLine { line: 2, .. })
        ));
    }

    #[test]
    fn covariates_tsv_reads_columns() {
        let dir = std::env::temp_dir().join("covtest_matrix_io_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cov.tsv");
        fs::write(&path, "sample_id\tage\tdose\ns1\t30\t0.1\ns2\t40\t0.2\ns3\t50\t0.4\n").unwrap();
        let cov = read_covariates_tsv(&path).unwrap();
        assert_eq!(cov.names(), &["age".to_string(), "dose".to_string()]);
        assert_eq!(cov.columns()[0], vec![30.0, 40.0, 50.0]);
        assert_eq!(cov.columns()[1], vec![0.1, 0.2, 0.4]);
    }

    #[test]
    fn select_rows_keeps_order_and_ids() {
        let x = random_matrix(4, 3, 41)
            .with_ids(
                Some(vec!["a".into(), "b".into(), "c".into(), "d".into()]),
                None,
            )
            .unwrap();
        let sub = x.select_rows(&[2, 0]).unwrap();
        assert_eq!(sub.n_features(), 2);
        assert_eq!(sub.feature_ids().unwrap(), &["c".to_string(), "a".to_string()]);
        assert_eq!(sub.row(0), x.row(2));
        assert_eq!(sub.row(1), x.row(0));
        assert!(sub.select_rows(&[5]).is_err());
    }
}
