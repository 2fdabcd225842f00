//! Seeded, reproducible permutation engine producing empirical p-values
//! for all four statistics, with optional in-loop residualization.
//!
//! Each permutation index h draws its shuffle from an independent stream
//! seeded by a mix of (plan seed, h), so results are identical no matter
//! how the loop is scheduled across workers. The outcome is canonicalized
//! (centered, scaled by the largest absolute deviation) before anything
//! else happens, which makes exceed counts invariant under affine maps of
//! the outcome, permutation by permutation.
//!
//! The expensive pieces are hoisted out of the loop: the column weights w,
//! the connectivity matrix A and its row sums b are built once for the
//! linear and quadratic statistics, and the max-pair statistic runs over a
//! precomputed bank of unit-normalized feature-pair products.

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::{design_basis, gram, Covariates, FeatureMatrix, Outcome, OutcomeEncoding};
use crate::pvalue::canonical_unit;
use crate::stats::{
    dot, quadratic_form, risk_scores_b, risk_scores_w, MaxStatOptions, Statistic,
};

/// How many shuffled outcomes to score and under which conventions.
///
/// Sidedness is not a knob: the sum and connectivity statistics are always
/// scored two-sided (absolute exceedance) and the quadratic and max-pair
/// statistics right-tailed, matching their null behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PermutationPlan {
    /// Number of permutations H.
    pub permutations: usize,
    /// Seed for the whole run; permutation h uses a stream derived from
    /// (seed, h).
    pub seed: u64,
    /// Report (1 + exceed)/(1 + H) instead of exceed/H. The add-one form
    /// can never return 0, which keeps downstream FDR well behaved; the
    /// raw form is the textbook empirical p-value.
    pub add_one: bool,
    /// For the quadratic statistic only: re-residualize the feature rows
    /// against each permuted outcome (plus covariates) inside the loop.
    pub residualize_in_loop: bool,
    /// Keep the vector of permuted statistics in the result.
    pub store_null: bool,
}

impl PermutationPlan {
    pub fn new(permutations: usize, seed: u64) -> Self {
        PermutationPlan {
            permutations,
            seed,
            ..Default::default()
        }
    }
}

impl Default for PermutationPlan {
    fn default() -> Self {
        PermutationPlan {
            permutations: 10_000,
            seed: 0,
            add_one: true,
            residualize_in_loop: false,
            store_null: false,
        }
    }
}

/// Outcome of a permutation run.
///
/// `observed` and the entries of `null_sample` are on the canonical
/// outcome scale (centered, max-abs one), which is the scale all exceed
/// comparisons happen on; raw-scale statistic values are reported by the
/// higher-level test runner.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutationResult {
    pub observed: f64,
    pub p_value: f64,
    pub exceed_count: u64,
    pub h_used: u64,
    pub null_sample: Option<Vec<f64>>,
}

impl PermutationResult {
    /// Writes the stored null sample as a single-column text file, one
    /// permuted statistic per line, for QQ-style diagnostics.
    pub fn write_null_sample(&self, path: &std::path::Path) -> Result<()> {
        let sample = self.null_sample.as_ref().ok_or_else(|| {
            Error::InvalidParams("no null sample was stored for this run".into())
        })?;
        let mut out = String::with_capacity(sample.len() * 24);
        for v in sample {
            out.push_str(&format!("{v:.17e}\n"));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Mixes a run seed with a permutation index into an independent stream
/// seed (splitmix64 finalizer; bijective in h for fixed seed).
pub(crate) fn derive_seed(seed: u64, h: u64) -> u64 {
    let mut z = seed ^ h.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The shuffle used for permutation h of a run: Fisher-Yates driven by a
/// ChaCha stream seeded from (seed, h).
pub(crate) fn shuffled_indices(n: usize, seed: u64, h: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, h));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Bank of unit-normalized centered feature-pair products, built once so
/// the max-pair statistic inside the loop reduces to dot products.
pub(crate) struct PairScan {
    n: usize,
    /// Concatenated rows, one per kept pair, each centered and scaled to
    /// unit sum of squares.
    rows: Vec<f64>,
}

impl PairScan {
    pub(crate) fn new(x: &FeatureMatrix, include_diagonal: bool) -> Result<PairScan> {
        let p = x.n_features();
        let n = x.n_samples();
        let mut rows = Vec::new();
        let mut kept = 0usize;
        let mut z = vec![0.0f64; n];
        for i in 0..p {
            let ri = x.row(i);
            let j0 = if include_diagonal { i } else { i + 1 };
            for j in j0..p {
                let rj = x.row(j);
                let mut absmax = 0.0f64;
                for k in 0..n {
                    z[k] = ri[k] * rj[k];
                    absmax = absmax.max(z[k].abs());
                }
                let mean = z.iter().sum::<f64>() / n as f64;
                let mut ss = 0.0;
                for v in z.iter_mut() {
                    *v -= mean;
                    ss += *v * *v;
                }
                // same degeneracy rule as the direct max-pair scan:
                // constant products carry only rounding noise
                let tol = 16.0 * (n as f64) * (f64::EPSILON * absmax).powi(2);
                if ss <= tol {
                    continue;
                }
                let inv = 1.0 / ss.sqrt();
                rows.extend(z.iter().map(|v| v * inv));
                kept += 1;
            }
        }
        if kept == 0 {
            return Err(Error::AllPairsDegenerate);
        }
        Ok(PairScan { n, rows })
    }

    /// (n-1) max over kept pairs of the squared correlation with a
    /// centered, unit-norm outcome vector.
    pub(crate) fn max_stat(&self, y_unit: &[f64]) -> f64 {
        let mut best = 0.0f64;
        for row in self.rows.chunks_exact(self.n) {
            let r = dot(row, y_unit);
            let r2 = r * r;
            if r2 > best {
                best = r2;
            }
        }
        (self.n as f64 - 1.0) * best
    }
}

/// Precomputed per-statistic machinery for evaluating permuted outcomes.
///
/// Because the outcome entering the loop is centered, the linear weights
/// can be centered and the quadratic kernel doubly centered without
/// changing any statistic in exact arithmetic. Doing so strips the large
/// mean component whose order-dependent rounding would otherwise swamp
/// exactly-null configurations (e.g. constant features must tie on every
/// permutation, not drift by machine noise).
enum Evaluator {
    /// S and C: a fixed weight vector dotted with the permuted outcome.
    Linear(Vec<f64>),
    /// Q: the connectivity matrix as a quadratic form.
    Quadratic(DMatrix<f64>),
    /// M: scan of unit-normalized pair products against the unit outcome.
    MaxPair(PairScan),
}

fn centered(mut v: Vec<f64>) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    for x in v.iter_mut() {
        *x -= m;
    }
    v
}

fn double_centered(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let row_means: Vec<f64> = (0..n)
        .map(|i| a.row(i).iter().sum::<f64>() / n as f64)
        .collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    DMatrix::from_fn(n, n, |i, j| a[(i, j)] - row_means[i] - row_means[j] + grand)
}

impl Evaluator {
    fn build(statistic: Statistic, x: &FeatureMatrix) -> Result<Evaluator> {
        Ok(match statistic {
            Statistic::S => Evaluator::Linear(centered(risk_scores_w(x).values)),
            Statistic::C => Evaluator::Linear(centered(risk_scores_b(x, true).values)),
            Statistic::Q => {
                Evaluator::Quadratic(double_centered(&crate::stats::connectivity_matrix(x)))
            }
            Statistic::M => Evaluator::MaxPair(PairScan::new(
                x,
                MaxStatOptions::default().include_diagonal,
            )?),
        })
    }

    fn eval(&self, y: &[f64]) -> f64 {
        match self {
            Evaluator::Linear(w) => dot(w, y),
            Evaluator::Quadratic(a) => quadratic_form(a, y),
            Evaluator::MaxPair(scan) => scan.max_stat(y),
        }
    }
}

fn finish(
    observed: f64,
    exceed: u64,
    h: u64,
    add_one: bool,
    null_sample: Option<Vec<f64>>,
) -> PermutationResult {
    let p_value = if add_one {
        (1.0 + exceed as f64) / (1.0 + h as f64)
    } else {
        exceed as f64 / h as f64
    };
    PermutationResult {
        observed,
        p_value,
        exceed_count: exceed,
        h_used: h,
        null_sample,
    }
}

fn exceeds(statistic: Statistic, permuted: f64, observed: f64) -> bool {
    if statistic.two_sided() {
        permuted.abs() >= observed.abs()
    } else {
        permuted >= observed
    }
}

/// Runs the generic counting loop over permutations of `y_unitless`,
/// evaluating `f` on each permuted vector.
fn count_loop<F: Fn(&[f64]) -> f64 + Sync>(
    yhat: &[f64],
    observed: f64,
    statistic: Statistic,
    plan: &PermutationPlan,
    f: F,
) -> PermutationResult {
    let h = plan.permutations as u64;
    let n = yhat.len();
    if plan.store_null {
        let sample: Vec<f64> = (0..h)
            .into_par_iter()
            .map(|idx| {
                let perm = shuffled_indices(n, plan.seed, idx);
                let yp: Vec<f64> = perm.iter().map(|&k| yhat[k]).collect();
                f(&yp)
            })
            .collect();
        let exceed = sample
            .iter()
            .filter(|&&t| exceeds(statistic, t, observed))
            .count() as u64;
        finish(observed, exceed, h, plan.add_one, Some(sample))
    } else {
        let exceed: u64 = (0..h)
            .into_par_iter()
            .map(|idx| {
                let perm = shuffled_indices(n, plan.seed, idx);
                let yp: Vec<f64> = perm.iter().map(|&k| yhat[k]).collect();
                u64::from(exceeds(statistic, f(&yp), observed))
            })
            .sum();
        finish(observed, exceed, h, plan.add_one, None)
    }
}

/// Empirical permutation p-value for one statistic.
///
/// The observed statistic is computed on the canonicalized outcome, the
/// outcome entries are shuffled H times with independent per-index
/// streams, and the exceedance count uses |.| for the two-sided statistics
/// (S, C) and the raw value for the right-tailed ones (Q, M). The result
/// is deterministic for a given (seed, H) no matter how many workers
/// participate.
pub fn permute_p(
    statistic: Statistic,
    x: &FeatureMatrix,
    y: &Outcome,
    plan: &PermutationPlan,
) -> Result<PermutationResult> {
    if plan.permutations < 1 {
        return Err(Error::InvalidPlan);
    }
    if plan.residualize_in_loop {
        if statistic != Statistic::Q {
            return Err(Error::Unsupported(
                "in-loop residualization is only defined for the quadratic statistic".into(),
            ));
        }
        return residualized_q_p(x, y, &Covariates::empty(), plan);
    }
    x.check_testable()?;
    let n = x.n_samples();
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "outcome has {} samples, matrix has {n}",
            y.len()
        )));
    }
    let yhat = canonical_unit(y.values())?;
    let evaluator = Evaluator::build(statistic, x)?;
    let y_for_loop = loop_vector(statistic, &yhat);
    let observed = evaluator.eval(&y_for_loop);
    Ok(count_loop(&y_for_loop, observed, statistic, plan, |yp| {
        evaluator.eval(yp)
    }))
}

/// The vector actually permuted inside the loop. For the max-pair
/// statistic the canonical outcome is renormalized to unit length once,
/// so each permuted evaluation is a plain dot-product scan; for the
/// others the canonical outcome is used as is.
fn loop_vector(statistic: Statistic, yhat: &[f64]) -> Vec<f64> {
    match statistic {
        Statistic::M => {
            let ss = dot(yhat, yhat).sqrt();
            yhat.iter().map(|v| v / ss).collect()
        }
        _ => yhat.to_vec(),
    }
}

/// Exact permutation p-value over all n! permutations, or over all
/// distinct group relabelings when the outcome is a two-group encoding
/// (each relabeling stands for the same statistic value repeated
/// n1! n2! times, so the exceedance fraction is identical).
///
/// This is a small-n oracle: p is reported as exceed/total (no add-one)
/// and no null sample is stored. Validation is minimal so that tiny
/// constructed instances (down to n = 2 for the linear statistics) can be
/// checked against hand enumeration.
pub fn enumerate_p(statistic: Statistic, x: &FeatureMatrix, y: &Outcome) -> Result<PermutationResult> {
    const MAX_N: usize = 9;
    let n = x.n_samples();
    if n > MAX_N {
        return Err(Error::TooLarge { n, max: MAX_N });
    }
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "outcome has {} samples, matrix has {n}",
            y.len()
        )));
    }
    let yhat = canonical_unit(y.values())?;
    let evaluator = Evaluator::build(statistic, x)?;
    let y_loop = loop_vector(statistic, &yhat);
    let observed = evaluator.eval(&y_loop);

    let mut exceed = 0u64;
    let mut total = 0u64;
    if let OutcomeEncoding::TwoGroup { n1, .. } = y.encoding() {
        // canonical values per group: every sample in group one carries the
        // same value, so enumerate subsets instead of full permutations
        let hi = y_loop
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let lo = y_loop.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut yp = vec![0.0f64; n];
        for mask in 0u32..(1u32 << n) {
            if mask.count_ones() as usize != n1 {
                continue;
            }
            for (k, v) in yp.iter_mut().enumerate() {
                *v = if mask & (1 << k) != 0 { hi } else { lo };
            }
            if exceeds(statistic, evaluator.eval(&yp), observed) {
                exceed += 1;
            }
            total += 1;
        }
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut yp = vec![0.0f64; n];
        heap_permutations(&mut idx, n, &mut |perm| {
            for (k, &src) in perm.iter().enumerate() {
                yp[k] = y_loop[src];
            }
            if exceeds(statistic, evaluator.eval(&yp), observed) {
                exceed += 1;
            }
            total += 1;
        });
    }
    Ok(finish(observed, exceed, total, false, None))
}

fn heap_permutations<F: FnMut(&[usize])>(idx: &mut Vec<usize>, k: usize, f: &mut F) {
    if k == 1 {
        f(idx);
        return;
    }
    for i in 0..k {
        heap_permutations(idx, k - 1, f);
        if k % 2 == 0 {
            idx.swap(i, k - 1);
        } else {
            idx.swap(0, k - 1);
        }
    }
}

/// Shared machinery for the residualized quadratic statistic: a Gram
/// matrix of the raw features plus an orthonormal basis of the
/// intercept-and-covariates design, combined per outcome vector into the
/// quadratic statistic of the residualized features.
struct ResidualQ {
    g: DMatrix<f64>,
    basis: DMatrix<f64>,
    n: usize,
}

impl ResidualQ {
    fn new(x: &FeatureMatrix, covariates: &Covariates) -> Result<ResidualQ> {
        x.check_testable()?;
        let n = x.n_samples();
        if let Some(cn) = covariates.n_samples() {
            if cn != n {
                return Err(Error::DimensionMismatch(format!(
                    "covariates have {cn} samples, matrix has {n}"
                )));
            }
        }
        Ok(ResidualQ {
            g: gram(x),
            basis: design_basis(covariates, n)?,
            n,
        })
    }

    /// Q of the features residualized against span{intercept, covariates,
    /// yp}, evaluated at yp itself.
    ///
    /// Residualizing the rows of X is right-multiplication by I - P with P
    /// the projector onto that span, so the residualized Gram matrix is
    /// (I - P) G (I - P) and never requires touching X again. The span is
    /// extended beyond the fixed design by the component of yp orthogonal
    /// to it; when yp already lies in the design span that direction is
    /// skipped.
    fn eval(&self, yp: &[f64]) -> f64 {
        let n = self.n;
        let y = nalgebra::DVector::from_column_slice(yp);
        let coeffs = self.basis.transpose() * &y;
        let mut v = y.clone();
        v.gemv(-1.0, &self.basis, &coeffs, 1.0);
        let nv = v.norm();
        let w = if nv > 1e-12 * y.norm() {
            let mut w = DMatrix::zeros(n, self.basis.ncols() + 1);
            w.columns_mut(0, self.basis.ncols()).copy_from(&self.basis);
            w.column_mut(self.basis.ncols()).copy_from(&(v / nv));
            w
        } else {
            self.basis.clone()
        };
        let wt_g = w.transpose() * &self.g; // k x n
        let w_wt_g = &w * &wt_g; // n x n, = P G
        let middle = &wt_g * &w; // k x k, = W' G W
        let gr = &self.g - &w_wt_g - w_wt_g.transpose() + &w * middle * w.transpose();
        let a = gr.map(|v| v * v);
        quadratic_form(&a, yp)
    }
}

/// Permutation p-value for the quadratic statistic with residualization
/// performed inside the loop: for every permuted outcome the feature rows
/// are residualized against the intercept, the covariates and that
/// permuted outcome before the statistic is computed. The observed value
/// residualizes against the unpermuted outcome.
pub fn residualized_q_p(
    x: &FeatureMatrix,
    y: &Outcome,
    covariates: &Covariates,
    plan: &PermutationPlan,
) -> Result<PermutationResult> {
    if plan.permutations < 1 {
        return Err(Error::InvalidPlan);
    }
    let machine = ResidualQ::new(x, covariates)?;
    if y.len() != machine.n {
        return Err(Error::DimensionMismatch(format!(
            "outcome has {} samples, matrix has {}",
            y.len(),
            machine.n
        )));
    }
    let yhat = canonical_unit(y.values())?;
    let observed = machine.eval(&yhat);
    Ok(count_loop(&yhat, observed, Statistic::Q, plan, |yp| {
        machine.eval(yp)
    }))
}

/// Exact small-n oracle for the residualized quadratic statistic: the
/// in-loop residualization evaluated over all n! permutations.
pub fn enumerate_residualized_q_p(
    x: &FeatureMatrix,
    y: &Outcome,
    covariates: &Covariates,
) -> Result<PermutationResult> {
    const MAX_N: usize = 9;
    let n = x.n_samples();
    if n > MAX_N {
        return Err(Error::TooLarge { n, max: MAX_N });
    }
    let machine = ResidualQ::new(x, covariates)?;
    let yhat = canonical_unit(y.values())?;
    let observed = machine.eval(&yhat);
    let mut exceed = 0u64;
    let mut total = 0u64;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut yp = vec![0.0f64; n];
    heap_permutations(&mut idx, n, &mut |perm| {
        for (k, &src) in perm.iter().enumerate() {
            yp[k] = yhat[src];
        }
        if exceeds(Statistic::Q, machine.eval(&yp), observed) {
            exceed += 1;
        }
        total += 1;
    });
    Ok(finish(observed, exceed, total, false, None))
}
