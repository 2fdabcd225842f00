//! Analytic p-values for the linear statistics (normal limit and a
//! four-moment refinement of the permutation distribution) and the
//! extreme-value approximation for the max-pair statistic.
//!
//! For a linear statistic T = scores'y the permutation distribution of T
//! under uniform relabeling has closed-form moments expressible through the
//! centered power sums of the two vectors; [`perm_moments_linear`] computes
//! the first four exactly. [`mcc_p`] fits a shifted and scaled beta density
//! to those moments, which captures the skewness and kurtosis the plain
//! normal limit ignores, and falls back to the normal form whenever the
//! moments leave the beta-representable region.
//!
//! All p-value routines canonicalize their inputs (center, then divide by
//! the largest absolute deviation) so that outcomes related by an affine
//! map produce bit-identical p-values whenever the transformed values round
//! to the same canonical floats.

use statrs::function::beta::beta_reg;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::matrix::Outcome;
use crate::stats::{dot, RiskScores};

/// First four moments of T = sum_k a_k b_{pi(k)} over uniform random
/// permutations pi: mean plus the second to fourth central moments.
#[derive(Debug, Clone, Copy)]
pub struct PermMoments {
    pub mean: f64,
    pub var: f64,
    pub m3: f64,
    pub m4: f64,
}

impl PermMoments {
    pub fn skewness(&self) -> f64 {
        self.m3 / self.var.powf(1.5)
    }

    pub fn excess_kurtosis(&self) -> f64 {
        self.m4 / (self.var * self.var) - 3.0
    }
}

/// Diagnostic summary for a linear statistic.
#[derive(Debug, Clone)]
pub struct LinearStatSummary {
    pub r: f64,
    pub z: f64,
    pub n: usize,
    pub perm_moments: PermMoments,
}

/// Centers a vector and rescales it by the largest absolute deviation.
///
/// The scale choice keeps the map exact in floating point for affinely
/// related inputs (dividing two values that share a common factor cancels
/// it exactly), which is what makes downstream p-values bit-stable under
/// y -> a*y + c.
pub(crate) fn canonical_unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.len();
    if n == 0 {
        return Err(Error::DegenerateInput("empty vector".into()));
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let mut out: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let scale = out.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    if scale == 0.0 {
        return Err(Error::DegenerateInput("constant vector".into()));
    }
    for x in out.iter_mut() {
        *x /= scale;
    }
    Ok(out)
}

pub(crate) fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len();
    if n != b.len() || n < 3 {
        return Err(Error::DegenerateInput(format!(
            "correlation needs two equal-length vectors with n >= 3, got {n} and {}",
            b.len()
        )));
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    let mut sab = 0.0;
    for k in 0..n {
        let da = a[k] - ma;
        let db = b[k] - mb;
        saa += da * da;
        sbb += db * db;
        sab += da * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::DegenerateInput("constant vector".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Two-sided tail mass of the standard normal at |z|, computed through
/// erfc so that it stays accurate far into the tail.
pub(crate) fn two_sided_normal_p(z: f64) -> f64 {
    let p = erfc(z.abs() / std::f64::consts::SQRT_2);
    p.clamp(f64::MIN_POSITIVE, 1.0)
}

/// Normal-limit p-value for a linear statistic: p = 2(1 - Phi(sqrt(n) |r|))
/// with r the Pearson correlation between the risk scores and the outcome.
pub fn normal_p(scores: &RiskScores, y: &Outcome) -> Result<f64> {
    normal_p_values(&scores.values, y.values())
}

pub(crate) fn normal_p_values(scores: &[f64], y: &[f64]) -> Result<f64> {
    let a = canonical_unit(scores)?;
    let b = canonical_unit(y)?;
    let r = pearson(&a, &b)?;
    let z = (a.len() as f64).sqrt() * r;
    Ok(two_sided_normal_p(z))
}

/// Exact first four permutation moments of T = sum_k a_k b_{pi(k)}.
///
/// With centered power sums A_r = sum (a - abar)^r and B_r likewise:
///
/// ```text
/// E[T]   = n abar bbar
/// mu2    = A2 B2 / (n-1)
/// mu3    = n A3 B3 / ((n-1)(n-2))
/// mu4    = A4 B4 / n + 4 A4 B4 / (n(n-1))
///        + 3 (A2^2 - A4)(B2^2 - B4) / (n(n-1))
///        + 6 (2 A4 - A2^2)(2 B4 - B2^2) / (n(n-1)(n-2))
///        + (3 A2^2 - 6 A4)(3 B2^2 - 6 B4) / (n(n-1)(n-2)(n-3))
/// ```
///
/// The fourth moment needs n >= 4. Verified against exhaustive enumeration
/// in the tests.
pub fn perm_moments_linear(a: &[f64], b: &[f64]) -> Result<PermMoments> {
    let n = a.len();
    if n != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "{n} scores vs {} outcome values",
            b.len()
        )));
    }
    if n < 4 {
        return Err(Error::InvalidParams(
            "permutation moments need n >= 4".into(),
        ));
    }
    let nf = n as f64;
    let abar = a.iter().sum::<f64>() / nf;
    let bbar = b.iter().sum::<f64>() / nf;
    let (mut a2, mut a3, mut a4) = (0.0, 0.0, 0.0);
    for v in a {
        let d = v - abar;
        let d2 = d * d;
        a2 += d2;
        a3 += d2 * d;
        a4 += d2 * d2;
    }
    let (mut b2, mut b3, mut b4) = (0.0, 0.0, 0.0);
    for v in b {
        let d = v - bbar;
        let d2 = d * d;
        b2 += d2;
        b3 += d2 * d;
        b4 += d2 * d2;
    }
    let mean = nf * abar * bbar;
    let var = a2 * b2 / (nf - 1.0);
    let m3 = nf * a3 * b3 / ((nf - 1.0) * (nf - 2.0));
    let m4 = a4 * b4 / nf
        + 4.0 * a4 * b4 / (nf * (nf - 1.0))
        + 3.0 * (a2 * a2 - a4) * (b2 * b2 - b4) / (nf * (nf - 1.0))
        + 6.0 * (2.0 * a4 - a2 * a2) * (2.0 * b4 - b2 * b2) / (nf * (nf - 1.0) * (nf - 2.0))
        + (3.0 * a2 * a2 - 6.0 * a4) * (3.0 * b2 * b2 - 6.0 * b4)
            / (nf * (nf - 1.0) * (nf - 2.0) * (nf - 3.0));
    Ok(PermMoments { mean, var, m3, m4 })
}

/// Pearson correlation, z-score and exact permutation moments for a linear
/// statistic, computed on the raw (uncanonicalized) inputs.
pub fn linear_summary(scores: &RiskScores, y: &Outcome) -> Result<LinearStatSummary> {
    let a = &scores.values;
    let b = y.values();
    let r = pearson(a, b)?;
    let n = a.len();
    Ok(LinearStatSummary {
        r,
        z: (n as f64).sqrt() * r,
        n,
        perm_moments: perm_moments_linear(a, b)?,
    })
}

/// Analytic p-value with a fallback marker.
#[derive(Debug, Clone, Copy)]
pub struct AnalyticP {
    pub p: f64,
    /// Set when the moment fit was not representable and the normal form
    /// was used instead.
    pub fallback: bool,
}

/// Moment-corrected p-value for a linear statistic: a shifted and scaled
/// beta density is fitted to the exact four permutation moments of
/// T = scores'y and the observed value is scored against both tails
/// (equal-tail doubling, capped at 1).
pub fn mcc_p(scores: &RiskScores, y: &Outcome) -> Result<AnalyticP> {
    mcc_p_values(&scores.values, y.values())
}

pub(crate) fn mcc_p_values(scores: &[f64], y: &[f64]) -> Result<AnalyticP> {
    let a = canonical_unit(scores)?;
    let b = canonical_unit(y)?;
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores vs {} outcome values",
            a.len(),
            b.len()
        )));
    }
    let t = dot(&a, &b);
    let moments = perm_moments_linear(&a, &b)?;
    mcc_from_moments(t, &moments)
}

/// Beta-family fit behind [`mcc_p`]. Exposed within the crate so the
/// degenerate-moment paths can be exercised directly.
pub(crate) fn mcc_from_moments(t: f64, moments: &PermMoments) -> Result<AnalyticP> {
    let var = moments.var;
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::DegenerateInput(
            "permutation variance is zero".into(),
        ));
    }
    let sd = var.sqrt();
    let z = (t - moments.mean) / sd;
    let g1 = moments.m3 / (var * sd);
    let beta2 = moments.m4 / (var * var);
    let b1 = g1 * g1;

    // A pearson-type beta density exists only when 1 + b1 < beta2 < 3 + 1.5 b1.
    let numer = beta2 - b1 - 1.0;
    let denom = 6.0 + 3.0 * b1 - 2.0 * beta2;
    let eps = 1e-9;
    let fallback = |z: f64| AnalyticP {
        p: two_sided_normal_p(z),
        fallback: true,
    };
    if !(numer > eps && denom > eps) || !numer.is_finite() || !denom.is_finite() {
        return Ok(fallback(z));
    }
    let r = 6.0 * numer / denom;
    let s = if b1 > 0.0 {
        let t2 = b1 * (r + 2.0) * (r + 2.0);
        (t2 / (t2 + 16.0 * (r + 1.0))).sqrt()
    } else {
        0.0
    };
    // the smaller shape parameter sits on the side the long tail points from
    let (alpha, beta) = if g1 >= 0.0 {
        (0.5 * r * (1.0 - s), 0.5 * r * (1.0 + s))
    } else {
        (0.5 * r * (1.0 + s), 0.5 * r * (1.0 - s))
    };
    if !(alpha > 1e-8 && beta > 1e-8) || !alpha.is_finite() || !beta.is_finite() {
        return Ok(fallback(z));
    }
    let ab = alpha + beta;
    let m0 = alpha / ab;
    let v0 = alpha * beta / (ab * ab * (ab + 1.0));
    let scale = (var / v0).sqrt();
    let lower = moments.mean - scale * m0;
    let x = ((t - lower) / scale).clamp(0.0, 1.0);
    let left = beta_reg(alpha, beta, x);
    let right = 1.0 - left;
    let p = (2.0 * left.min(right)).clamp(f64::MIN_POSITIVE, 1.0);
    Ok(AnalyticP { p, fallback: false })
}

/// Tail probability for the max-pair statistic from its extreme-value
/// limit: with t = M - 4 log(p) + log(log(p)),
/// p = 1 - exp(-exp(-t/2) / sqrt(8 pi)).
pub fn extreme_value_p(m: f64, p_features: usize) -> Result<f64> {
    if p_features < 2 {
        return Err(Error::InvalidParams(format!(
            "extreme-value approximation needs at least 2 features, got {p_features}"
        )));
    }
    if !(m >= 0.0) {
        return Err(Error::InvalidParams(format!(
            "max statistic must be nonnegative, got {m}"
        )));
    }
    let pf = p_features as f64;
    let t = m - 4.0 * pf.ln() + pf.ln().ln();
    let lambda = 1.0 / (8.0 * std::f64::consts::PI).sqrt();
    // 1 - exp(-lambda e^{-t/2}), kept in log space once the inner
    // exponential goes subnormal
    let ln_inner = lambda.ln() - 0.5 * t;
    let p = if ln_inner < -700.0 {
        ln_inner.exp()
    } else {
        -(-lambda * (-0.5 * t).exp()).exp_m1()
    };
    Ok(p.clamp(f64::MIN_POSITIVE, 1.0))
}
