//! Single-test driver: computes one statistic on one matrix/outcome pair
//! and obtains its p-value by a selected or automatically chosen method.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::matrix::{Covariates, FeatureMatrix, Outcome};
use crate::perm::{permute_p, residualized_q_p, PermutationPlan, PermutationResult};
use crate::pvalue::{extreme_value_p, mcc_p, normal_p};
use crate::stats::{
    risk_scores_b, risk_scores_w, stat_c, stat_m, stat_q, stat_s, MaxStatOptions, RiskScoreKind,
    RiskScores, Statistic,
};

/// P-value method requested by the caller. `Auto` resolves per statistic:
/// moment-corrected analytic for the two linear statistics S and C,
/// permutation for Q, and for M the extreme-value approximation once the
/// design is large enough for it to be trustworthy (n >= 50 and p >= 32),
/// permutation otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MethodChoice {
    #[default]
    Auto,
    Mcc,
    Normal,
    Permutation,
    ExtremeValue,
}

impl FromStr for MethodChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<MethodChoice> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Ok(MethodChoice::Auto),
            "mcc" => Ok(MethodChoice::Mcc),
            "normal" => Ok(MethodChoice::Normal),
            "permutation" | "perm" => Ok(MethodChoice::Permutation),
            "extreme-value" | "extreme_value" | "ev" => Ok(MethodChoice::ExtremeValue),
            other => Err(Error::InvalidParams(format!(
                "unknown p-value method '{other}' (expected auto, mcc, normal, permutation or extreme-value)"
            ))),
        }
    }
}

/// Method that actually produced the p-value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodUsed {
    Mcc,
    Normal,
    Permutation,
    ExtremeValue,
}

impl fmt::Display for MethodUsed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MethodUsed::Mcc => "mcc",
            MethodUsed::Normal => "normal",
            MethodUsed::Permutation => "permutation",
            MethodUsed::ExtremeValue => "extreme-value",
        };
        f.write_str(s)
    }
}

/// Outcome of one statistic's test: the observed value on its natural
/// scale, the p-value with its provenance, the per-sample risk scores
/// that drive the statistic (absent for Q, which has no per-sample
/// decomposition), and for M the winning feature pair. When a
/// permutation method ran, the full permutation result (exceedance
/// count, permutations used, optional stored null sample) rides along.
#[derive(Debug, Clone)]
pub struct CovTestResult {
    pub statistic: Statistic,
    pub value: f64,
    pub p_value: f64,
    pub method: MethodUsed,
    /// Set when an analytic moment fit was not representable and the
    /// normal form stood in for it.
    pub analytic_fallback: bool,
    pub risk_scores: Option<RiskScores>,
    /// Winning feature pair (M only).
    pub max_pair: Option<(usize, usize)>,
    pub permutation: Option<PermutationResult>,
}

/// Threshold at which `Auto` trusts the extreme-value approximation
/// for the max-pair statistic.
const EXTREME_VALUE_MIN_N: usize = 50;
const EXTREME_VALUE_MIN_P: usize = 32;

fn resolve_method(statistic: Statistic, choice: MethodChoice, n: usize, p: usize) -> MethodUsed {
    match choice {
        MethodChoice::Mcc => MethodUsed::Mcc,
        MethodChoice::Normal => MethodUsed::Normal,
        MethodChoice::Permutation => MethodUsed::Permutation,
        MethodChoice::ExtremeValue => MethodUsed::ExtremeValue,
        MethodChoice::Auto => match statistic {
            Statistic::S | Statistic::C => MethodUsed::Mcc,
            Statistic::Q => MethodUsed::Permutation,
            Statistic::M => {
                if n >= EXTREME_VALUE_MIN_N && p >= EXTREME_VALUE_MIN_P {
                    MethodUsed::ExtremeValue
                } else {
                    MethodUsed::Permutation
                }
            }
        },
    }
}

/// Runs one statistic with one p-value method.
///
/// The observed value is always computed by the plain statistic
/// functions on the data as given; the method only decides the p-value.
/// Analytic methods (mcc, normal) apply to the linear statistics S and C;
/// the extreme-value method applies to M; permutation applies to all
/// four. Covariates are consulted only by the in-loop residualized
/// permutation path for Q (enabled through the plan); pre-test
/// residualization is a preprocessing step, not something this function
/// does implicitly.
pub fn run_test(
    x: &FeatureMatrix,
    y: &Outcome,
    statistic: Statistic,
    method: MethodChoice,
    plan: &PermutationPlan,
    covariates: &Covariates,
) -> Result<CovTestResult> {
    x.check_testable()?;
    if y.len() != x.n_samples() {
        return Err(Error::DimensionMismatch(format!(
            "outcome has {} entries but the matrix has {} samples",
            y.len(),
            x.n_samples()
        )));
    }
    let method = resolve_method(statistic, method, x.n_samples(), x.n_features());

    // Observed value, risk scores and (for M) the winning pair.
    let mut max_pair = None;
    let (value, risk_scores) = match statistic {
        Statistic::S => {
            let scores = risk_scores_w(x);
            (stat_s(x, y), Some(scores))
        }
        Statistic::C => {
            let scores = risk_scores_b(x, true);
            (stat_c(x, y), Some(scores))
        }
        Statistic::Q => (stat_q(x, y), None),
        Statistic::M => {
            let m = stat_m(x, y, MaxStatOptions::default())?;
            let (i, j) = m.pair;
            max_pair = Some(m.pair);
            let scores = RiskScores {
                kind: RiskScoreKind::PairProduct { i, j },
                values: crate::stats::pair_product_row(x, i, j)?,
            };
            (m.value, Some(scores))
        }
    };

    let mut analytic_fallback = false;
    let mut permutation = None;
    let p_value = match method {
        MethodUsed::Mcc => {
            let scores = risk_scores.as_ref().ok_or_else(|| {
                Error::Unsupported(
                    "the moment-corrected analytic method applies only to the linear statistics S and C"
                        .into(),
                )
            })?;
            if statistic == Statistic::M {
                return Err(Error::Unsupported(
                    "the moment-corrected analytic method applies only to the linear statistics S and C"
                        .into(),
                ));
            }
            let a = mcc_p(scores, y)?;
            analytic_fallback = a.fallback;
            a.p
        }
        MethodUsed::Normal => {
            if !statistic.two_sided() {
                return Err(Error::Unsupported(
                    "the normal approximation applies only to the linear statistics S and C".into(),
                ));
            }
            let scores = risk_scores.as_ref().expect("linear statistics carry scores");
            normal_p(scores, y)?
        }
        MethodUsed::ExtremeValue => {
            if statistic != Statistic::M {
                return Err(Error::Unsupported(
                    "the extreme-value approximation applies only to the max-pair statistic M"
                        .into(),
                ));
            }
            extreme_value_p(value, x.n_features())?
        }
        MethodUsed::Permutation => {
            let result = if statistic == Statistic::Q && plan.residualize_in_loop {
                residualized_q_p(x, y, covariates, plan)?
            } else {
                permute_p(statistic, x, y, plan)?
            };
            let p = result.p_value;
            permutation = Some(result);
            p
        }
    };

    Ok(CovTestResult {
        statistic,
        value,
        p_value,
        method,
        analytic_fallback,
        risk_scores,
        max_pair,
        permutation,
    })
}
