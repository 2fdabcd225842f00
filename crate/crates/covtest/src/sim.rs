//! Data generators for five covariance-change scenarios and a Monte Carlo
//! harness estimating type I error and power for all four statistics.
//!
//! Models 1-3 are two-group designs built from moving-average processes
//! over iid innovations (normal or centered gamma), so every population
//! covariance is positive definite by construction. Models 4 and 5 attach
//! a per-sample covariance to a continuous outcome through a convex
//! combination of two endpoint matrices.

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::{FeatureMatrix, Outcome};
use crate::perm::{derive_seed, permute_p, PermutationPlan};
use crate::pvalue::{extreme_value_p, mcc_p};
use crate::stats::{
    encode_two_group, risk_scores_b, risk_scores_w, stat_m, MaxStatOptions, Statistic,
};

/// Innovation distribution for the moving-average models: standard normal,
/// or gamma(shape 4, scale 0.5) shifted by -2 so that the innovations have
/// mean zero, variance one and skewness one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnovationKind {
    Normal,
    CenteredGamma,
}

/// Functional form tying the per-sample covariance to the rescaled
/// outcome in the fourth model.
///
/// `Convex` interpolates (1 - y*) gamma1 + y* gamma2, which is constant
/// (the identity) whenever gamma2 = I, so a zero effect size is an
/// exchangeable null. `EndpointSum` is the literal sum
/// (1 - y*) gamma1 + gamma2, under which the total variance trends with
/// the outcome even at zero effect size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Model4Form {
    #[default]
    Convex,
    EndpointSum,
}

/// Shape of the correlated endpoint matrix gamma2 in the fourth model:
/// compound symmetric (all off-diagonals rho, positive definite for any
/// rho < 1) or tridiagonal (off-diagonals rho on the first band only,
/// positive definite only for rho below about 0.5 and therefore
/// restricted to rho <= 0.45).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Gamma2Form {
    #[default]
    CompoundSymmetric,
    Tridiagonal,
}

/// How the max-pair statistic obtains its p-value inside the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaxPairMethod {
    #[default]
    Permutation,
    ExtremeValue,
}

/// Sample-size layout: two labeled groups (models 1-3) or a single group
/// with a continuous outcome (models 4-5).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleDesign {
    TwoGroup { n1: usize, n2: usize },
    Continuous { n: usize },
}

impl SampleDesign {
    pub fn total(&self) -> usize {
        match *self {
            SampleDesign::TwoGroup { n1, n2 } => n1 + n2,
            SampleDesign::Continuous { n } => n,
        }
    }
}

/// Full description of one Monte Carlo setting.
///
/// The permutation plan's `seed` and `store_null` fields are overridden
/// inside the harness (each replicate derives its own independent stream
/// from `seed` here); every other plan field is honored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationSpec {
    pub model: u8,
    pub design: SampleDesign,
    pub p: usize,
    pub theta1: f64,
    pub theta2: f64,
    pub rho: f64,
    pub innovations: InnovationKind,
    pub model4_form: Model4Form,
    pub gamma2_form: Gamma2Form,
    pub m_method: MaxPairMethod,
    pub replicates: usize,
    pub alpha: f64,
    pub plan: PermutationPlan,
    pub seed: u64,
}

impl SimulationSpec {
    fn base(model: u8, design: SampleDesign, p: usize) -> SimulationSpec {
        SimulationSpec {
            model,
            design,
            p,
            theta1: 0.0,
            theta2: 0.0,
            rho: 0.0,
            innovations: InnovationKind::Normal,
            model4_form: Model4Form::default(),
            gamma2_form: Gamma2Form::default(),
            m_method: MaxPairMethod::default(),
            replicates: 1000,
            alpha: 0.05,
            plan: PermutationPlan::new(999, 0),
            seed: 0,
        }
    }

    /// Two-group null: both groups are MA(1) with theta1 = 2 over normal
    /// innovations.
    pub fn model1(n1: usize, n2: usize, p: usize) -> SimulationSpec {
        SimulationSpec {
            theta1: 2.0,
            ..Self::base(1, SampleDesign::TwoGroup { n1, n2 }, p)
        }
    }

    /// Two-group null with skewed data: as model 1 but centered-gamma
    /// innovations.
    pub fn model2(n1: usize, n2: usize, p: usize) -> SimulationSpec {
        SimulationSpec {
            theta1: 2.0,
            innovations: InnovationKind::CenteredGamma,
            ..Self::base(2, SampleDesign::TwoGroup { n1, n2 }, p)
        }
    }

    /// Two-group power setting: group two gains an MA(2) term with
    /// theta2 = 1.
    pub fn model3(n1: usize, n2: usize, p: usize) -> SimulationSpec {
        SimulationSpec {
            theta1: 2.0,
            theta2: 1.0,
            ..Self::base(3, SampleDesign::TwoGroup { n1, n2 }, p)
        }
    }

    /// Continuous outcome, covariance sliding from the identity toward a
    /// compound-symmetric matrix as the outcome grows.
    pub fn model4(n: usize, p: usize, rho: f64) -> SimulationSpec {
        SimulationSpec {
            rho,
            ..Self::base(4, SampleDesign::Continuous { n }, p)
        }
    }

    /// Continuous outcome, covariance sliding between a random block
    /// structure and its row/column reversal.
    pub fn model5(n: usize, p: usize, rho: f64) -> SimulationSpec {
        SimulationSpec {
            rho,
            ..Self::base(5, SampleDesign::Continuous { n }, p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates < 1 {
            return Err(Error::InvalidParams("replicates must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParams(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if !self.theta1.is_finite() || !self.theta2.is_finite() {
            return Err(Error::InvalidParams("MA coefficients must be finite".into()));
        }
        match (self.model, self.design) {
            (1..=3, SampleDesign::TwoGroup { n1, n2 }) => {
                if n1 < 2 || n2 < 2 {
                    return Err(Error::InvalidParams(
                        "two-group models need at least 2 samples per group".into(),
                    ));
                }
            }
            (4..=5, SampleDesign::Continuous { n }) => {
                if n < 4 {
                    return Err(Error::InvalidParams(
                        "continuous models need at least 4 samples".into(),
                    ));
                }
                if !(0.0..1.0).contains(&self.rho) {
                    return Err(Error::InvalidParams(format!(
                        "effect size must lie in [0, 1), got {}",
                        self.rho
                    )));
                }
                if self.model == 5 && (self.p < 4 || self.p % 2 != 0) {
                    return Err(Error::InvalidParams(
                        "model 5 needs an even feature count of at least 4".into(),
                    ));
                }
                if self.gamma2_form == Gamma2Form::Tridiagonal && self.rho > 0.45 {
                    return Err(Error::InvalidParams(
                        "the tridiagonal form is positive definite only for rho <= 0.45".into(),
                    ));
                }
            }
            (m, _) if !(1..=5).contains(&m) => {
                return Err(Error::InvalidParams(format!("unknown model {m}")));
            }
            _ => {
                return Err(Error::InvalidParams(
                    "models 1-3 need a two-group design; models 4-5 a continuous one".into(),
                ));
            }
        }
        if self.p < 2 {
            return Err(Error::InvalidParams(
                "at least 2 features are required".into(),
            ));
        }
        Ok(())
    }
}

/// Per-statistic rejection rates from one Monte Carlo run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RejectionRates {
    pub s: f64,
    pub q: f64,
    pub c: f64,
    pub m: f64,
}

impl RejectionRates {
    pub fn get(&self, statistic: Statistic) -> f64 {
        match statistic {
            Statistic::S => self.s,
            Statistic::Q => self.q,
            Statistic::C => self.c,
            Statistic::M => self.m,
        }
    }
}

/// Result of a Monte Carlo run: rejection rates at the requested level,
/// with enough metadata to reproduce and tabulate it.
#[derive(Debug, Clone)]
pub struct PowerReport {
    pub model: u8,
    pub design: SampleDesign,
    pub p: usize,
    pub alpha: f64,
    pub replicates: usize,
    pub seed: u64,
    pub rates: RejectionRates,
    pub runtime: Duration,
}

impl PowerReport {
    /// Binomial Monte Carlo standard error of one rejection rate.
    pub fn standard_error(&self, statistic: Statistic) -> f64 {
        let r = self.rates.get(statistic);
        (r * (1.0 - r) / self.replicates as f64).sqrt()
    }
}

fn draw_innovation<R: Rng>(kind: InnovationKind, gamma: &Gamma<f64>, rng: &mut R) -> f64 {
    match kind {
        InnovationKind::Normal => rng.sample(StandardNormal),
        InnovationKind::CenteredGamma => gamma.sample(rng) - 2.0,
    }
}

/// One group of a two-group moving-average design.
///
/// Every sample (column) gets its own innovation vector z. Group 1 is
/// MA(1): feature i is z_i + theta1 z_{i+1}, using p + 1 innovations per
/// sample. Group 2 is MA(2): z_i + theta1 z_{i+1} + theta2 z_{i+2} over
/// p + 2 innovations. Population covariances are banded: group 1 has
/// variance 1 + theta1^2 and lag-1 covariance theta1; group 2 has
/// variance 1 + theta1^2 + theta2^2, lag-1 theta1 (1 + theta2) and lag-2
/// theta2.
pub fn gen_model12(
    group: u8,
    n: usize,
    p: usize,
    theta1: f64,
    theta2: f64,
    innovations: InnovationKind,
    seed: u64,
) -> Result<FeatureMatrix> {
    if !(group == 1 || group == 2) {
        return Err(Error::InvalidParams(format!(
            "group must be 1 or 2, got {group}"
        )));
    }
    if n < 1 || p < 1 {
        return Err(Error::InvalidParams(
            "need at least one sample and one feature".into(),
        ));
    }
    if !theta1.is_finite() || !theta2.is_finite() {
        return Err(Error::InvalidParams("MA coefficients must be finite".into()));
    }
    let gamma = Gamma::new(4.0, 0.5).expect("fixed valid gamma parameters");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = if group == 1 { 1 } else { 2 };
    let mut values = vec![0.0f64; p * n];
    let mut z = vec![0.0f64; p + order];
    for k in 0..n {
        for v in z.iter_mut() {
            *v = draw_innovation(innovations, &gamma, &mut rng);
        }
        for i in 0..p {
            let mut x = z[i] + theta1 * z[i + 1];
            if order == 2 {
                x += theta2 * z[i + 2];
            }
            values[i * n + k] = x;
        }
    }
    FeatureMatrix::new(values, p, n)
}

/// Columns of both groups side by side (group 1 first).
fn concat_columns(a: &FeatureMatrix, b: &FeatureMatrix) -> FeatureMatrix {
    let p = a.n_features();
    let (na, nb) = (a.n_samples(), b.n_samples());
    let mut values = Vec::with_capacity(p * (na + nb));
    for i in 0..p {
        values.extend_from_slice(a.row(i));
        values.extend_from_slice(b.row(i));
    }
    FeatureMatrix::new(values, p, na + nb).expect("concatenation preserves validity")
}

/// Symmetric positive-semidefinite square root of a covariance matrix.
fn symmetric_root(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = sigma.clone().symmetric_eigen();
    let mut vals = eig.eigenvalues;
    for v in vals.iter_mut() {
        *v = v.max(0.0).sqrt();
    }
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn standard_normal_vec<R: Rng>(p: usize, rng: &mut R) -> nalgebra::DVector<f64> {
    nalgebra::DVector::from_fn(p, |_, _| rng.sample(StandardNormal))
}

/// Standard normals rescaled onto [0, 1] by their range.
fn rescaled_outcome<R: Rng>(n: usize, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
    let y: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let min = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max <= min {
        return Err(Error::DegenerateInput("constant outcome draw".into()));
    }
    let ystar: Vec<f64> = y.iter().map(|v| (v - min) / (max - min)).collect();
    Ok((y, ystar))
}

/// The correlated endpoint matrix gamma2.
fn gamma2(p: usize, rho: f64, form: Gamma2Form) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |i, j| {
        if i == j {
            1.0
        } else {
            match form {
                Gamma2Form::CompoundSymmetric => rho,
                Gamma2Form::Tridiagonal => {
                    if i.abs_diff(j) == 1 {
                        rho
                    } else {
                        0.0
                    }
                }
            }
        }
    })
}

/// Per-sample covariance of the fourth model at a given rescaled outcome.
pub(crate) fn model4_sigma(
    p: usize,
    rho: f64,
    ystar: f64,
    form: Model4Form,
    gamma2_form: Gamma2Form,
) -> DMatrix<f64> {
    // Sigma = w1 * I + w2 * gamma2 (gamma1 is the identity)
    let (w1, w2) = match form {
        Model4Form::Convex => (1.0 - ystar, ystar),
        Model4Form::EndpointSum => (1.0 - ystar, 1.0),
    };
    let mut sigma = gamma2(p, rho, gamma2_form) * w2;
    for i in 0..p {
        sigma[(i, i)] += w1;
    }
    sigma
}

/// Continuous-outcome design with covariance tied to the outcome through
/// gamma2: outcome values are iid standard normal, rescaled to [0, 1] by
/// their range, and each sample's feature column is multivariate normal
/// with the covariance produced by [`model4_sigma`] at its rescaled
/// value. The returned outcome holds the raw normal draws.
pub fn gen_model4(n: usize, p: usize, rho: f64, seed: u64) -> Result<(FeatureMatrix, Outcome)> {
    gen_model4_with(
        n,
        p,
        rho,
        seed,
        Model4Form::default(),
        Gamma2Form::default(),
    )
}

pub fn gen_model4_with(
    n: usize,
    p: usize,
    rho: f64,
    seed: u64,
    form: Model4Form,
    gamma2_form: Gamma2Form,
) -> Result<(FeatureMatrix, Outcome)> {
    if n < 2 || p < 1 {
        return Err(Error::InvalidParams(
            "need at least two samples and one feature".into(),
        ));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidParams(format!(
            "effect size must lie in [0, 1), got {rho}"
        )));
    }
    if gamma2_form == Gamma2Form::Tridiagonal && rho > 0.45 {
        return Err(Error::InvalidParams(
            "the tridiagonal form is positive definite only for rho <= 0.45".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (y, ystar) = rescaled_outcome(n, &mut rng)?;
    let mut values = vec![0.0f64; p * n];
    for (k, &t) in ystar.iter().enumerate() {
        let sigma = model4_sigma(p, rho, t, form, gamma2_form);
        let root = symmetric_root(&sigma);
        let col = &root * standard_normal_vec(p, &mut rng);
        for i in 0..p {
            values[i * n + k] = col[i];
        }
    }
    Ok((FeatureMatrix::new(values, p, n)?, Outcome::from_values(y)?))
}

/// The two endpoint covariance matrices of the fifth model for one draw
/// of the random block structure.
///
/// Sigma* starts as the identity with the upper-triangle entries of the
/// leading p/2 x p/2 block drawn iid U[-rho, rho]; symmetrizing doubles
/// the diagonal; the result is shifted by (|lambda_min| + 0.05) I so the
/// first endpoint is positive definite with minimum eigenvalue at least
/// 0.05; the second endpoint reverses its rows and columns. Both share
/// the same multiset of entries, so the entry sums of the matrices and of
/// their elementwise squares coincide exactly.
pub(crate) fn model5_endpoints<R: Rng>(p: usize, rho: f64, rng: &mut R) -> (DMatrix<f64>, DMatrix<f64>) {
    let half = p / 2;
    let mut star = DMatrix::<f64>::identity(p, p);
    for i in 0..half {
        for j in (i + 1)..half {
            star[(i, j)] += rng.random_range(-rho..=rho);
        }
    }
    let sym = &star + star.transpose();
    let eig = sym.clone().symmetric_eigen();
    let lambda_min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let shift = lambda_min.abs() + 0.05;
    let mut sigma1 = sym;
    for i in 0..p {
        sigma1[(i, i)] += shift;
    }
    let sigma2 = DMatrix::from_fn(p, p, |i, j| sigma1[(p - 1 - i, p - 1 - j)]);
    (sigma1, sigma2)
}

/// Continuous-outcome design sliding between a random block covariance
/// and its reversal: sample k is multivariate normal with covariance
/// (1 - y*_k) Sigma1 + y*_k Sigma2. The returned outcome holds the raw
/// normal draws.
pub fn gen_model5(n: usize, p: usize, rho: f64, seed: u64) -> Result<(FeatureMatrix, Outcome)> {
    if n < 2 || p < 4 || p % 2 != 0 {
        return Err(Error::InvalidParams(
            "need at least two samples and an even feature count of at least 4".into(),
        ));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidParams(format!(
            "effect size must lie in [0, 1), got {rho}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sigma1, sigma2) = model5_endpoints(p, rho, &mut rng);
    let (y, ystar) = rescaled_outcome(n, &mut rng)?;
    let mut values = vec![0.0f64; p * n];
    for (k, &t) in ystar.iter().enumerate() {
        let sigma = &sigma1 * (1.0 - t) + &sigma2 * t;
        let root = symmetric_root(&sigma);
        let col = &root * standard_normal_vec(p, &mut rng);
        for i in 0..p {
            values[i * n + k] = col[i];
        }
    }
    Ok((FeatureMatrix::new(values, p, n)?, Outcome::from_values(y)?))
}

fn generate(spec: &SimulationSpec, seed: u64) -> Result<(FeatureMatrix, Outcome)> {
    match (spec.model, spec.design) {
        (1..=3, SampleDesign::TwoGroup { n1, n2 }) => {
            let x1 = gen_model12(
                1,
                n1,
                spec.p,
                spec.theta1,
                spec.theta2,
                spec.innovations,
                derive_seed(seed, 1),
            )?;
            let x2 = gen_model12(
                2,
                n2,
                spec.p,
                spec.theta1,
                spec.theta2,
                spec.innovations,
                derive_seed(seed, 2),
            )?;
            let x = concat_columns(&x1, &x2);
            let mut labels = vec![1u8; n1];
            labels.extend(std::iter::repeat_n(2u8, n2));
            Ok((x, encode_two_group(&labels)?))
        }
        (4, SampleDesign::Continuous { n }) => gen_model4_with(
            n,
            spec.p,
            spec.rho,
            derive_seed(seed, 1),
            spec.model4_form,
            spec.gamma2_form,
        ),
        (5, SampleDesign::Continuous { n }) => {
            gen_model5(n, spec.p, spec.rho, derive_seed(seed, 1))
        }
        _ => Err(Error::InvalidParams(
            "model and sample design do not match".into(),
        )),
    }
}

/// Runs the full Monte Carlo: per replicate, generate data, compute all
/// four statistics and their p-values (moment-corrected analytic for S
/// and C; permutation for Q; permutation or extreme-value for M per the
/// spec), and count rejections at the requested level.
///
/// Replicates execute concurrently; each derives its own generator and
/// permutation streams from the spec seed, and the aggregate is an
/// order-independent count, so reports are reproducible for a given spec
/// no matter the worker count.
pub fn run_trials(spec: &SimulationSpec) -> Result<PowerReport> {
    spec.validate()?;
    let started = Instant::now();
    let hits = (0..spec.replicates as u64)
        .into_par_iter()
        .map(|rep| -> Result<[u64; 4]> {
            let rep_seed = derive_seed(spec.seed, rep);
            let (x, y) = generate(spec, derive_seed(rep_seed, 10))?;
            let mut plan = spec.plan;
            plan.seed = derive_seed(rep_seed, 20);
            plan.store_null = false;

            let p_s = mcc_p(&risk_scores_w(&x), &y)?.p;
            let p_c = mcc_p(&risk_scores_b(&x, true), &y)?.p;
            let p_q = permute_p(Statistic::Q, &x, &y, &plan)?.p_value;
            let p_m = match spec.m_method {
                MaxPairMethod::Permutation => {
                    permute_p(Statistic::M, &x, &y, &plan)?.p_value
                }
                MaxPairMethod::ExtremeValue => {
                    let m = stat_m(&x, &y, MaxStatOptions::default())?.value;
                    extreme_value_p(m, x.n_features())?
                }
            };
            let a = spec.alpha;
            Ok([
                u64::from(p_s <= a),
                u64::from(p_q <= a),
                u64::from(p_c <= a),
                u64::from(p_m <= a),
            ])
        })
        .try_reduce(
            || [0u64; 4],
            |x, y| Ok([x[0] + y[0], x[1] + y[1], x[2] + y[2], x[3] + y[3]]),
        )?;
    let reps = spec.replicates as f64;
    Ok(PowerReport {
        model: spec.model,
        design: spec.design,
        p: spec.p,
        alpha: spec.alpha,
        replicates: spec.replicates,
        seed: spec.seed,
        rates: RejectionRates {
            s: hits[0] as f64 / reps,
            q: hits[1] as f64 / reps,
            c: hits[2] as f64 / reps,
            m: hits[3] as f64 / reps,
        },
        runtime: started.elapsed(),
    })
}

/// Renders reports as a TSV table, one row per (report, statistic):
/// model, n1, n2_or_n, p, statistic, rate, se, replicates, seed.
pub fn power_table_tsv(reports: &[PowerReport]) -> String {
    let mut out = String::from("model\tn1\tn2_or_n\tp\tstatistic\trate\tse\treplicates\tseed\n");
    for r in reports {
        let (n1, n2) = match r.design {
            SampleDesign::TwoGroup { n1, n2 } => (n1.to_string(), n2.to_string()),
            SampleDesign::Continuous { n } => (String::new(), n.to_string()),
        };
        for statistic in Statistic::all() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{}\t{}\n",
                r.model,
                n1,
                n2,
                r.p,
                statistic,
                r.rates.get(statistic),
                r.standard_error(statistic),
                r.replicates,
                r.seed
            ));
        }
    }
    out
}

/// Writes [`power_table_tsv`] to a file.
pub fn write_power_tsv(reports: &[PowerReport], path: &std::path::Path) -> Result<()> {
    std::fs::write(path, power_table_tsv(reports))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use crate::matrix::xi;

    /// Sample covariance (divisor n) of the rows of a feature matrix.
    fn feature_covariance(x: &FeatureMatrix) -> DMatrix<f64> {
        let p = x.n_features();
        let n = x.n_samples();
        DMatrix::from_fn(p, p, |i, j| {
            let ri = x.row(i);
            let rj = x.row(j);
            let mi = ri.iter().sum::<f64>() / n as f64;
            let mj = rj.iter().sum::<f64>() / n as f64;
            ri.iter()
                .zip(rj)
                .map(|(a, b)| (a - mi) * (b - mj))
                .sum::<f64>()
                / n as f64
        })
    }

    #[test]
    fn degenerate_ma_gives_identity_covariance() {
        let x = gen_model12(1, 5000, 8, 0.0, 0.0, InnovationKind::Normal, 7).unwrap();
        let cov = feature_covariance(&x);
        for i in 0..8 {
            for j in 0..8 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (cov[(i, j)] - target).abs() < 0.1,
                    "entry ({i},{j}) = {}",
                    cov[(i, j)]
                );
            }
        }
    }

    #[test]
    fn ma_one_matches_banded_covariance() {
        let x = gen_model12(1, 100_000, 8, 2.0, 0.0, InnovationKind::Normal, 11).unwrap();
        let cov = feature_covariance(&x);
        for i in 0usize..8 {
            for j in 0..8 {
                let target = match i.abs_diff(j) {
                    0 => 5.0,
                    1 => 2.0,
                    _ => 0.0,
                };
                assert!(
                    (cov[(i, j)] - target).abs() < 0.05,
                    "entry ({i},{j}) = {} vs {target}",
                    cov[(i, j)]
                );
            }
        }
    }

    #[test]
    fn ma_two_matches_banded_covariance() {
        let x = gen_model12(2, 100_000, 8, 2.0, 1.0, InnovationKind::Normal, 13).unwrap();
        let cov = feature_covariance(&x);
        for i in 0usize..8 {
            for j in 0..8 {
                let target = match i.abs_diff(j) {
                    0 => 6.0,
                    1 => 4.0,
                    2 => 1.0,
                    _ => 0.0,
                };
                assert!(
                    (cov[(i, j)] - target).abs() < 0.08,
                    "entry ({i},{j}) = {} vs {target}",
                    cov[(i, j)]
                );
            }
        }
    }

    #[test]
    fn centered_gamma_innovations_have_unit_variance_and_skew_one() {
        let gamma = Gamma::new(4.0, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| draw_innovation(InnovationKind::CenteredGamma, &gamma, &mut rng))
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let m3 = draws.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n as f64;
        let skew = m3 / var.powf(1.5);
        assert_abs_diff_eq!(mean, 0.0, epsilon = 0.01);
        assert_abs_diff_eq!(var, 1.0, epsilon = 0.02);
        assert_abs_diff_eq!(skew, 1.0, epsilon = 0.05);
    }

    #[test]
    fn model4_sigma_endpoints_and_null() {
        let p = 6;
        // convex form: the null is exactly the identity at every outcome
        // (dyadic points make the weight sum exact in floating point)
        for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let sigma = model4_sigma(p, 0.0, t, Model4Form::Convex, Gamma2Form::CompoundSymmetric);
            assert_eq!(sigma, DMatrix::identity(p, p));
        }
        // both forms agree at the top endpoint: sigma = gamma2
        for form in [Model4Form::Convex, Model4Form::EndpointSum] {
            let sigma = model4_sigma(p, 0.8, 1.0, form, Gamma2Form::CompoundSymmetric);
            for i in 0..p {
                for j in 0..p {
                    let want = if i == j { 1.0 } else { 0.8 };
                    assert_relative_eq!(sigma[(i, j)], want, epsilon = 1e-12);
                }
            }
            let min_eig = sigma
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            assert_relative_eq!(min_eig, 0.2, epsilon = 1e-9);
        }
        // endpoint-sum form at the bottom: identity plus gamma2
        let sigma = model4_sigma(p, 0.5, 0.0, Model4Form::EndpointSum, Gamma2Form::CompoundSymmetric);
        for i in 0..p {
            for j in 0..p {
                let want = if i == j { 2.0 } else { 0.5 };
                assert_relative_eq!(sigma[(i, j)], want, epsilon = 1e-12);
            }
        }
        // endpoint-sum null: variance trends with the outcome
        let sigma = model4_sigma(p, 0.0, 0.25, Model4Form::EndpointSum, Gamma2Form::CompoundSymmetric);
        assert_relative_eq!(sigma[(0, 0)], 1.75, epsilon = 1e-12);
        assert_eq!(sigma[(0, 1)], 0.0);
        // convex form at an interior point: unit diagonal, off-diagonal
        // t * rho
        let sigma = model4_sigma(p, 0.4, 0.5, Model4Form::Convex, Gamma2Form::CompoundSymmetric);
        assert_relative_eq!(sigma[(0, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(sigma[(0, 1)], 0.2, epsilon = 1e-12);
        // tridiagonal variant: band structure
        let sigma = model4_sigma(p, 0.4, 1.0, Model4Form::Convex, Gamma2Form::Tridiagonal);
        assert_relative_eq!(sigma[(0, 1)], 0.4, epsilon = 1e-12);
        assert_eq!(sigma[(0, 2)], 0.0);
    }

    #[test]
    fn mvn_sampler_reproduces_target_covariance() {
        let p = 4;
        let sigma = gamma2(p, 0.6, Gamma2Form::CompoundSymmetric);
        let root = symmetric_root(&sigma);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 20_000;
        let mut acc = DMatrix::<f64>::zeros(p, p);
        for _ in 0..n {
            let x = &root * standard_normal_vec(p, &mut rng);
            acc += &x * x.transpose();
        }
        acc /= n as f64;
        for i in 0..p {
            for j in 0..p {
                assert!(
                    (acc[(i, j)] - sigma[(i, j)]).abs() < 0.1,
                    "entry ({i},{j}) = {} vs {}",
                    acc[(i, j)],
                    sigma[(i, j)]
                );
            }
        }
    }

    #[test]
    fn model5_endpoints_structure() {
        let p = 8;
        // zero effect size: no randomness survives, both endpoints are
        // (2 + 2.05) I
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (s1, s2) = model5_endpoints(p, 0.0, &mut rng);
        for i in 0..p {
            for j in 0..p {
                let want = if i == j { 4.05 } else { 0.0 };
                assert_relative_eq!(s1[(i, j)], want, epsilon = 1e-9);
            }
        }
        assert_eq!(s1, s2);

        // random draws: positive definite with minimum eigenvalue >= 0.05,
        // reversal identity, and exactly matching entry sums
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..100 {
            let (s1, s2) = model5_endpoints(p, 0.6, &mut rng);
            let min_eig = s1
                .clone()
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            assert!(min_eig >= 0.05 - 1e-9, "min eigenvalue {min_eig}");
            for i in 0..p {
                for j in 0..p {
                    assert_eq!(s2[(i, j)], s1[(p - 1 - i, p - 1 - j)]);
                }
            }
            let sq1 = s1.map(|v| v * v);
            let sq2 = s2.map(|v| v * v);
            assert_relative_eq!(xi(&sq1), xi(&sq2), max_relative = 1e-12);
            assert_relative_eq!(xi(&s1), xi(&s2), max_relative = 1e-12);
        }
    }

    #[test]
    fn generators_are_reproducible() {
        let a = gen_model12(2, 10, 6, 2.0, 1.0, InnovationKind::Normal, 41).unwrap();
        let b = gen_model12(2, 10, 6, 2.0, 1.0, InnovationKind::Normal, 41).unwrap();
        assert_eq!(a.values(), b.values());
        let c = gen_model12(2, 10, 6, 2.0, 1.0, InnovationKind::Normal, 42).unwrap();
        assert_ne!(a.values(), c.values());

        let (x1, y1) = gen_model4(12, 5, 0.5, 43).unwrap();
        let (x2, y2) = gen_model4(12, 5, 0.5, 43).unwrap();
        assert_eq!(x1.values(), x2.values());
        assert_eq!(y1.values(), y2.values());

        let (x1, y1) = gen_model5(12, 6, 0.5, 44).unwrap();
        let (x2, y2) = gen_model5(12, 6, 0.5, 44).unwrap();
        assert_eq!(x1.values(), x2.values());
        assert_eq!(y1.values(), y2.values());
    }

    #[test]
    fn rescaled_outcome_spans_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let (y, ystar) = rescaled_outcome(50, &mut rng).unwrap();
        assert_eq!(y.len(), 50);
        let min = ystar.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = ystar.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(min, 0.0);
        assert_eq!(max, 1.0);
        assert!(ystar.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn spec_validation_rejects_bad_parameters() {
        let mut spec = SimulationSpec::model1(20, 20, 32);
        spec.replicates = 0;
        assert!(spec.validate().is_err());

        let mut spec = SimulationSpec::model4(50, 32, 1.0);
        assert!(spec.validate().is_err());
        spec.rho = 0.5;
        assert!(spec.validate().is_ok());

        let mut spec = SimulationSpec::model5(50, 31, 0.5);
        assert!(spec.validate().is_err());
        spec.p = 32;
        assert!(spec.validate().is_ok());

        let mut spec = SimulationSpec::model4(50, 16, 0.6);
        spec.gamma2_form = Gamma2Form::Tridiagonal;
        assert!(spec.validate().is_err());
        spec.rho = 0.4;
        assert!(spec.validate().is_ok());

        let mut spec = SimulationSpec::model1(20, 20, 32);
        spec.design = SampleDesign::Continuous { n: 40 };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn single_replicate_rates_are_binary() {
        let mut spec = SimulationSpec::model1(8, 8, 6);
        spec.replicates = 1;
        spec.plan = PermutationPlan::new(99, 0);
        let report = run_trials(&spec).unwrap();
        for statistic in Statistic::all() {
            let r = report.rates.get(statistic);
            assert!(r == 0.0 || r == 1.0);
        }
        assert_eq!(report.replicates, 1);
    }

    #[test]
    fn run_trials_is_reproducible() {
        let mut spec = SimulationSpec::model3(10, 10, 8);
        spec.replicates = 20;
        spec.plan = PermutationPlan::new(99, 0);
        spec.seed = 99;
        let a = run_trials(&spec).unwrap();
        let b = run_trials(&spec).unwrap();
        assert_eq!(a.rates, b.rates);
        assert_eq!(a.seed, 99);
    }

    #[test]
    fn model3_connectivity_has_power_at_small_scale() {
        let mut spec = SimulationSpec::model3(20, 20, 32);
        spec.replicates = 100;
        spec.plan = PermutationPlan::new(199, 0);
        spec.seed = 7;
        let report = run_trials(&spec).unwrap();
        // the full-scale rate is about 0.63; a 100-replicate run should
        // land within +-3 binomial standard errors of it
        assert!(
            (0.45..=0.80).contains(&report.rates.c),
            "connectivity rate {}",
            report.rates.c
        );
        let se = report.standard_error(Statistic::C);
        assert!(se > 0.0 && se < 0.06);
    }

    #[test]
    fn power_table_round_trip() {
        let mut spec = SimulationSpec::model1(8, 8, 6);
        spec.replicates = 5;
        spec.plan = PermutationPlan::new(49, 0);
        let r1 = run_trials(&spec).unwrap();
        let mut spec2 = SimulationSpec::model4(12, 6, 0.4);
        spec2.replicates = 5;
        spec2.plan = PermutationPlan::new(49, 0);
        let r2 = run_trials(&spec2).unwrap();

        let dir = std::env::temp_dir().join("covtest-power-tsv-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("power.tsv");
        write_power_tsv(&[r1, r2], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 8);
        assert_eq!(
            lines[0],
            "model\tn1\tn2_or_n\tp\tstatistic\trate\tse\treplicates\tseed"
        );
        let first: Vec<&str> = lines[1].split('\t').collect();
        assert_eq!(first[0], "1");
        assert_eq!(first[1], "8");
        assert_eq!(first[2], "8");
        assert_eq!(first[4], "S");
        let fifth: Vec<&str> = lines[5].split('\t').collect();
        assert_eq!(fifth[0], "4");
        assert_eq!(fifth[1], "");
        assert_eq!(fifth[2], "12");
        std::fs::remove_dir_all(&dir).ok();
    }

    /// One-off evidence probe for the choice of the default model-4 form;
    /// run with --ignored to print null rejection rates for both forms.
    #[test]
    #[ignore]
    fn model4_null_calibration_probe() {
        for form in [Model4Form::Convex, Model4Form::EndpointSum] {
            let mut spec = SimulationSpec::model4(50, 16, 0.0);
            spec.model4_form = form;
            spec.replicates = 400;
            spec.plan = PermutationPlan::new(199, 0);
            spec.seed = 2026;
            let report = run_trials(&spec).unwrap();
            println!(
                "form {:?}: S {:.3} Q {:.3} C {:.3} M {:.3}",
                form, report.rates.s, report.rates.q, report.rates.c, report.rates.m
            );
        }
    }
}
