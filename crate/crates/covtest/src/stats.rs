//! The four covariance-association statistics and their per-sample risk
//! scores.
//!
//! All four look for outcome-associated changes in covariance structure:
//!
//! * `S = y'w` with `w_k = (sum_i x_ik)^2` detects directional global shifts;
//! * `Q = y'Ay` with `A = (X'X)` squared entrywise detects any entrywise
//!   change (squared-slope aggregate);
//! * `C = y'b` with `b` the row sums of `A` tracks overall covariance
//!   magnitude;
//! * `M` is the largest `(n-1) r^2` over feature pairs, `r` the Pearson
//!   correlation between the pair's product vector and the outcome.
//!
//! The statistics are evaluated on the matrix as given; centering and
//! scaling are explicit preprocessing steps (see [`crate::matrix`]).
//! Fixed positive scale factors such as `1/(n s_y^2)` are dropped from the
//! statistics (every p-value procedure used downstream is invariant to
//! them) and retained only in [`SlopeMatrix::scale`] for display.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::matrix::{gram, FeatureMatrix, Outcome, OutcomeEncoding};

/// Statistic selector used across the permutation engine, the simulation
/// harness and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Statistic {
    S,
    Q,
    C,
    M,
}

impl Statistic {
    pub fn all() -> [Statistic; 4] {
        [Statistic::S, Statistic::Q, Statistic::C, Statistic::M]
    }

    /// Right tail for the nonnegative statistics, both tails for the
    /// directional ones.
    pub fn two_sided(self) -> bool {
        matches!(self, Statistic::S | Statistic::C)
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Statistic::S => "S",
            Statistic::Q => "Q",
            Statistic::C => "C",
            Statistic::M => "M",
        };
        f.write_str(s)
    }
}

impl FromStr for Statistic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "S" | "s" => Ok(Statistic::S),
            "Q" | "q" => Ok(Statistic::Q),
            "C" | "c" => Ok(Statistic::C),
            "M" | "m" => Ok(Statistic::M),
            other => Err(Error::InvalidParams(format!(
                "unknown statistic {other:?}, expected one of S, Q, C, M"
            ))),
        }
    }
}

/// Per-sample risk scores: the n-vector whose association with the outcome
/// drives a statistic.
#[derive(Debug, Clone)]
pub struct RiskScores {
    pub kind: RiskScoreKind,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RiskScoreKind {
    /// Squared column sums, drives S.
    ColumnSumSquare,
    /// Row sums of the connectivity matrix, drives C.
    Connectivity,
    /// Product vector of the winning feature pair, drives M.
    PairProduct { i: usize, j: usize },
}

/// w_k = (sum over features of x_ik)^2.
pub fn risk_scores_w(x: &FeatureMatrix) -> RiskScores {
    let (p, n) = (x.n_features(), x.n_samples());
    let mut col_sums = vec![0.0; n];
    for i in 0..p {
        for (k, v) in x.row(i).iter().enumerate() {
            col_sums[k] += v;
        }
    }
    for v in col_sums.iter_mut() {
        *v = *v * *v;
    }
    RiskScores {
        kind: RiskScoreKind::ColumnSumSquare,
        values: col_sums,
    }
}

/// Connectivity matrix A: the entrywise square of the Gram matrix X'X.
pub fn connectivity_matrix(x: &FeatureMatrix) -> DMatrix<f64> {
    let mut a = gram(x);
    for v in a.iter_mut() {
        *v = *v * *v;
    }
    a
}

/// b_k = sum over l of A_kl. The diagonal self-term l = k is included by
/// default; `include_diagonal = false` drops it.
pub fn risk_scores_b(x: &FeatureMatrix, include_diagonal: bool) -> RiskScores {
    risk_scores_b_from(&connectivity_matrix(x), include_diagonal)
}

pub fn risk_scores_b_from(a: &DMatrix<f64>, include_diagonal: bool) -> RiskScores {
    let n = a.nrows();
    let mut b = vec![0.0; n];
    for k in 0..n {
        let mut sum = 0.0;
        for l in 0..n {
            if !include_diagonal && l == k {
                continue;
            }
            sum += a[(k, l)];
        }
        b[k] = sum;
    }
    RiskScores {
        kind: RiskScoreKind::Connectivity,
        values: b,
    }
}

/// S = y'w.
pub fn stat_s(x: &FeatureMatrix, y: &Outcome) -> f64 {
    dot(&risk_scores_w(x).values, y.values())
}

/// Q = y'Ay, always nonnegative since A is a Hadamard square of a Gram
/// matrix (itself positive semidefinite by the Schur product theorem).
pub fn stat_q(x: &FeatureMatrix, y: &Outcome) -> f64 {
    quadratic_form(&connectivity_matrix(x), y.values())
}

/// C = y'b.
pub fn stat_c(x: &FeatureMatrix, y: &Outcome) -> f64 {
    dot(&risk_scores_b(x, true).values, y.values())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn quadratic_form(a: &DMatrix<f64>, y: &[f64]) -> f64 {
    let n = y.len();
    let mut total = 0.0;
    for k in 0..n {
        let yk = y[k];
        if yk == 0.0 {
            continue;
        }
        let mut row_dot = 0.0;
        for l in 0..n {
            row_dot += a[(k, l)] * y[l];
        }
        total += yk * row_dot;
    }
    total
}

#[derive(Debug, Clone, Copy)]
pub struct MaxStatOptions {
    /// Scan diagonal pairs (i, i) as well (variance-change pairs). Off-
    /// diagonal-only scans suit row-scaled, correlation-focused analyses.
    pub include_diagonal: bool,
    /// Retain the full per-pair statistic list (heatmap export).
    pub keep_per_pair: bool,
}

impl Default for MaxStatOptions {
    fn default() -> Self {
        MaxStatOptions {
            include_diagonal: true,
            keep_per_pair: false,
        }
    }
}

/// Result of the max-pair scan.
#[derive(Debug, Clone)]
pub struct MaxStatResult {
    /// M = (n-1) r^2 at the winning pair.
    pub value: f64,
    /// Winning pair (i, j), i <= j; ties resolved to the lexicographically
    /// smallest pair.
    pub pair: (usize, usize),
    /// Pairs skipped because their product vector was constant.
    pub skipped_pairs: usize,
    /// Per-pair values when requested: (i, j, (n-1) r^2).
    pub per_pair: Option<Vec<(usize, usize, f64)>>,
}

/// M = max over feature pairs i <= j of (n-1) r^2, with r the Pearson
/// correlation between z_ij (the entrywise product of rows i and j) and y.
/// Pairs whose product vector is constant have no defined correlation and
/// are skipped.
pub fn stat_m(x: &FeatureMatrix, y: &Outcome, opts: MaxStatOptions) -> Result<MaxStatResult> {
    let n = x.n_samples();
    if n < 3 {
        return Err(Error::TooSmallForTest {
            p: x.n_features(),
            n,
        });
    }
    let yv = y.values();
    if yv.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "outcome has {} samples, matrix has {n}",
            yv.len()
        )));
    }
    let y_mean = yv.iter().sum::<f64>() / n as f64;
    let y_centered: Vec<f64> = yv.iter().map(|v| v - y_mean).collect();
    let y_ss = dot(&y_centered, &y_centered);
    if y_ss == 0.0 {
        return Err(Error::ConstantOutcome);
    }

    let p = x.n_features();
    let mut best: Option<(f64, (usize, usize))> = None;
    let mut skipped = 0usize;
    let mut per_pair = opts.keep_per_pair.then(Vec::new);
    let mut z = vec![0.0; n];
    for i in 0..p {
        let ri = x.row(i);
        let j0 = if opts.include_diagonal { i } else { i + 1 };
        for j in j0..p {
            let rj = x.row(j);
            for k in 0..n {
                z[k] = ri[k] * rj[k];
            }
            match pair_statistic(&z, &y_centered, y_ss) {
                Some(m_ij) => {
                    if let Some(list) = per_pair.as_mut() {
                        list.push((i, j, m_ij));
                    }
                    // strict improvement keeps the earliest (smallest) pair on ties
                    if best.map(|(b, _)| m_ij > b).unwrap_or(true) {
                        best = Some((m_ij, (i, j)));
                    }
                }
                None => skipped += 1,
            }
        }
    }
    match best {
        Some((value, pair)) => Ok(MaxStatResult {
            value,
            pair,
            skipped_pairs: skipped,
            per_pair,
        }),
        None => Err(Error::AllPairsDegenerate),
    }
}

/// (n-1) r^2 for one product vector against the centered outcome, or None
/// when the product vector is (numerically) constant.
fn pair_statistic(z: &[f64], y_centered: &[f64], y_ss: f64) -> Option<f64> {
    let n = z.len();
    let z_mean = z.iter().sum::<f64>() / n as f64;
    let mut z_ss = 0.0;
    let mut cov = 0.0;
    let mut z_absmax = 0.0f64;
    for k in 0..n {
        let d = z[k] - z_mean;
        z_ss += d * d;
        cov += d * y_centered[k];
        z_absmax = z_absmax.max(z[k].abs());
    }
    // Constant product vectors leave only rounding noise in z_ss; treating
    // that noise as signal would make r blow up to +-1.
    let tol = 16.0 * (n as f64) * (f64::EPSILON * z_absmax).powi(2);
    if z_ss <= tol {
        return None;
    }
    let r2 = (cov * cov) / (z_ss * y_ss);
    Some((n as f64 - 1.0) * r2)
}

/// The product vector z_ij for one feature pair.
pub fn pair_product_row(x: &FeatureMatrix, i: usize, j: usize) -> Result<Vec<f64>> {
    let p = x.n_features();
    if i >= p || j >= p {
        return Err(Error::IndexOutOfBounds {
            index: i.max(j),
            n: p,
        });
    }
    Ok(x.row(i)
        .iter()
        .zip(x.row(j))
        .map(|(a, b)| a * b)
        .collect())
}

/// Encodes two-group labels (1 or 2) as the outcome y_k = 1/n1 for group 1
/// and -1/n2 for group 2, which sums to zero.
pub fn encode_two_group(labels: &[u8]) -> Result<Outcome> {
    let n1 = labels.iter().filter(|&&l| l == 1).count();
    let n2 = labels.iter().filter(|&&l| l == 2).count();
    if n1 + n2 != labels.len() {
        return Err(Error::InvalidParams(
            "group labels must be 1 or 2".into(),
        ));
    }
    if n1 == 0 || n2 == 0 {
        return Err(Error::EmptyGroup);
    }
    let pos = 1.0 / n1 as f64;
    let neg = -1.0 / n2 as f64;
    let values = labels
        .iter()
        .map(|&l| if l == 1 { pos } else { neg })
        .collect();
    Ok(Outcome::new_unchecked(
        values,
        true,
        OutcomeEncoding::TwoGroup { n1, n2 },
    ))
}

/// Unscaled slope matrix: entry (i, j) = sum_k x_ik x_jk y_k. Multiplying
/// by `scale` gives the least-squares slope of z_ij on y for centered y.
#[derive(Debug, Clone)]
pub struct SlopeMatrix {
    pub values: DMatrix<f64>,
    /// 1 / (n s_y^2) with the divisor-n outcome variance.
    pub scale: f64,
}

pub fn slope_matrix(x: &FeatureMatrix, y: &Outcome) -> Result<SlopeMatrix> {
    let (p, n) = (x.n_features(), x.n_samples());
    let yv = y.values();
    if yv.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "outcome has {} samples, matrix has {n}",
            yv.len()
        )));
    }
    let mean = yv.iter().sum::<f64>() / n as f64;
    let ss: f64 = yv.iter().map(|v| (v - mean) * (v - mean)).sum();
    if ss == 0.0 {
        return Err(Error::ConstantOutcome);
    }
    let mut values = DMatrix::zeros(p, p);
    for i in 0..p {
        let ri = x.row(i);
        for j in i..p {
            let rj = x.row(j);
            let mut sum = 0.0;
            for k in 0..n {
                sum += ri[k] * rj[k] * yv[k];
            }
            values[(i, j)] = sum;
            values[(j, i)] = sum;
        }
    }
    Ok(SlopeMatrix {
        values,
        scale: 1.0 / ss,
    })
}
