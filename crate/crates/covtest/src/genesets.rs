//! Batch pathway analysis: map named feature sets onto the data matrix,
//! test each set's submatrix with the chosen statistics, and control the
//! false discovery rate across sets.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::{Covariates, FeatureMatrix, Outcome};
use crate::perm::PermutationPlan;
use crate::stats::{risk_scores_b, risk_scores_w, pair_product_row, stat_m, MaxStatOptions, RiskScoreKind, RiskScores, Statistic};
use crate::testing::{run_test, MethodChoice, MethodUsed};

/// One named feature set from a catalog file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneSet {
    pub id: String,
    pub description: String,
    /// Member feature ids, order preserved, duplicates removed.
    pub members: Vec<String>,
    /// How many duplicated member entries were dropped from this line.
    pub duplicates_dropped: usize,
}

/// Ordered collection of feature sets.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GeneSetCatalog {
    pub sets: Vec<GeneSet>,
}

impl GeneSetCatalog {
    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

/// Parses the tab-separated catalog format: one set per line,
/// `set_id <TAB> description <TAB> member [<TAB> member ...]`.
/// Blank lines are skipped; duplicate members within a line are dropped
/// (and counted on the set); a line without at least one member is
/// malformed.
pub fn parse_gmt(path: &Path) -> Result<GeneSetCatalog> {
    let file = fs::File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    let reader = BufReader::new(file);
    let mut sets = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(Error::MalformedLine {
                path: path.display().to_string(),
                line: idx + 1,
                reason: format!(
                    "expected set_id<TAB>description<TAB>member..., found {} field(s)",
                    fields.len()
                ),
            });
        }
        let id = fields[0].trim();
        if id.is_empty() {
            return Err(Error::MalformedLine {
                path: path.display().to_string(),
                line: idx + 1,
                reason: "empty set id".into(),
            });
        }
        let mut seen = HashMap::new();
        let mut members = Vec::new();
        let mut duplicates_dropped = 0usize;
        for &m in &fields[2..] {
            let m = m.trim();
            if m.is_empty() {
                continue;
            }
            if seen.insert(m.to_string(), ()).is_none() {
                members.push(m.to_string());
            } else {
                duplicates_dropped += 1;
            }
        }
        if members.is_empty() {
            return Err(Error::MalformedLine {
                path: path.display().to_string(),
                line: idx + 1,
                reason: "no members listed".into(),
            });
        }
        sets.push(GeneSet {
            id: id.to_string(),
            description: fields[1].trim().to_string(),
            members,
            duplicates_dropped,
        });
    }
    Ok(GeneSetCatalog { sets })
}

/// Where one set's members landed in a feature matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetResolution {
    /// Index into the catalog's set list.
    pub set_index: usize,
    /// Matrix row indices of the matched members (unique, member order).
    pub rows: Vec<usize>,
    /// Members with no matching feature id.
    pub unmatched: usize,
}

impl SetResolution {
    /// Sets with fewer than two matched features cannot be tested.
    pub fn skipped(&self) -> bool {
        self.rows.len() < 2
    }
}

/// Matches every set's members against the matrix feature ids (exact,
/// case-sensitive string match). When the matrix carries no feature ids,
/// positional names f1, f2, ... stand in, matching the TSV reader's
/// convention for id-less files.
pub fn resolve_sets(catalog: &GeneSetCatalog, x: &FeatureMatrix) -> Vec<SetResolution> {
    let mut index: HashMap<String, usize> = HashMap::with_capacity(x.n_features());
    for i in 0..x.n_features() {
        // first occurrence wins if the matrix has duplicate ids
        index.entry(x.feature_id(i)).or_insert(i);
    }
    catalog
        .sets
        .iter()
        .enumerate()
        .map(|(set_index, set)| {
            let mut rows = Vec::new();
            let mut unmatched = 0usize;
            for m in &set.members {
                match index.get(m) {
                    Some(&i) => rows.push(i),
                    None => unmatched += 1,
                }
            }
            SetResolution {
                set_index,
                rows,
                unmatched,
            }
        })
        .collect()
}

/// Benjamini-Hochberg step-up adjusted p-values: with p-values sorted
/// ascending, q at rank i is the minimum over ranks j >= i of
/// p_(j) * m / j (capped at 1), mapped back to the input order.
pub fn bh_qvalues(p: &[f64]) -> Result<Vec<f64>> {
    for &v in p {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::OutOfRange(v));
        }
    }
    let m = p.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut q = vec![0.0f64; m];
    let mut running = 1.0f64;
    for rank in (1..=m).rev() {
        let idx = order[rank - 1];
        running = running.min(p[idx] * m as f64 / rank as f64).min(1.0);
        q[idx] = running;
    }
    Ok(q)
}

/// One output row of a batch run: one set, one statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct PathwayRow {
    pub set_id: String,
    /// Number of members matched to matrix rows (the submatrix's feature
    /// count).
    pub p_matched: usize,
    pub statistic: Statistic,
    pub value: f64,
    pub p_value: f64,
    pub method: MethodUsed,
    pub q_value: f64,
}

/// A set left out of the analysis, with why.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedSet {
    pub set_id: String,
    pub matched: usize,
}

/// Results of a batch run: one row per (tested set, statistic), sorted
/// by q-value then p-value (ties broken by set id and statistic so the
/// table is identical no matter the catalog line order), plus the sets
/// that had to be skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PathwayResultTable {
    pub rows: Vec<PathwayRow>,
    pub skipped: Vec<SkippedSet>,
    /// Total catalog members that matched no matrix feature id.
    pub unmatched_members: usize,
}

/// Six significant digits in scientific notation (shared table format
/// for statistic values and p-values).
pub(crate) fn sig6(v: f64) -> String {
    format!("{v:.5e}")
}

impl PathwayResultTable {
    /// Serializes as TSV with a fixed header; numbers carry six
    /// significant digits in scientific notation.
    pub fn to_tsv(&self) -> String {
        let mut out =
            String::from("set_id\tp_matched\tstatistic\tvalue\tp_value\tmethod\tq_value\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.set_id,
                r.p_matched,
                r.statistic,
                sig6(r.value),
                sig6(r.p_value),
                r.method,
                sig6(r.q_value)
            ));
        }
        out
    }

    /// Serializes rows and skip report as JSON.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "rows": self.rows.iter().map(|r| serde_json::json!({
                "set_id": r.set_id,
                "p_matched": r.p_matched,
                "statistic": r.statistic.to_string(),
                "value": r.value,
                "p_value": r.p_value,
                "method": r.method.to_string(),
                "q_value": r.q_value,
            })).collect::<Vec<_>>(),
            "skipped": self.skipped.iter().map(|s| serde_json::json!({
                "set_id": s.set_id,
                "matched": s.matched,
            })).collect::<Vec<_>>(),
            "unmatched_members": self.unmatched_members,
        })
    }
}

/// FNV-1a hash of a set id, used to give every set its own permutation
/// stream regardless of catalog order or composition.
fn set_id_hash(id: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in id.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Permutation plan a given set runs under: the global plan with the
/// seed replaced by a stream derived from (global seed, set id), so
/// adding or removing sets never perturbs another set's p-values.
pub fn per_set_plan(plan: &PermutationPlan, set_id: &str) -> PermutationPlan {
    let mut set_plan = *plan;
    set_plan.seed = crate::perm::derive_seed(plan.seed, set_id_hash(set_id));
    set_plan.store_null = false;
    set_plan
}

/// Tests every resolvable catalog set against the outcome.
///
/// The matrix is expected to be preprocessed already (centering,
/// scaling, covariate residualization as desired); each set's rows are
/// extracted as a submatrix and tested with every requested statistic,
/// with the p-value method resolved per statistic and set size (see
/// [`run_test`]). Benjamini-Hochberg q-values are computed per statistic
/// across the tested sets. Sets with fewer than two matched features are
/// skipped and reported. Covariates are consulted only when the plan
/// requests in-loop residualization for Q.
///
/// Sets are processed concurrently; per-set seeding keeps the table
/// deterministic for a given plan regardless of worker count.
pub fn run_pathways(
    x: &FeatureMatrix,
    y: &Outcome,
    catalog: &GeneSetCatalog,
    statistics: &[Statistic],
    method: MethodChoice,
    plan: &PermutationPlan,
    covariates: &Covariates,
) -> Result<PathwayResultTable> {
    if statistics.is_empty() {
        return Err(Error::InvalidParams(
            "at least one statistic must be selected".into(),
        ));
    }
    let resolutions = resolve_sets(catalog, x);
    let unmatched_members = resolutions.iter().map(|r| r.unmatched).sum();
    let mut skipped = Vec::new();
    let mut tested: Vec<&SetResolution> = Vec::new();
    for r in &resolutions {
        if r.skipped() {
            skipped.push(SkippedSet {
                set_id: catalog.sets[r.set_index].id.clone(),
                matched: r.rows.len(),
            });
        } else {
            tested.push(r);
        }
    }

    // (set, statistic) results in catalog order before FDR adjustment
    let per_set: Vec<Vec<PathwayRow>> = tested
        .par_iter()
        .map(|r| -> Result<Vec<PathwayRow>> {
            let set = &catalog.sets[r.set_index];
            let sub = x.select_rows(&r.rows)?;
            let set_plan = per_set_plan(plan, &set.id);
            statistics
                .iter()
                .map(|&statistic| {
                    let t = run_test(&sub, y, statistic, method, &set_plan, covariates)?;
                    Ok(PathwayRow {
                        set_id: set.id.clone(),
                        p_matched: r.rows.len(),
                        statistic,
                        value: t.value,
                        p_value: t.p_value,
                        method: t.method,
                        q_value: f64::NAN,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut rows: Vec<PathwayRow> = per_set.into_iter().flatten().collect();

    // FDR per statistic across sets, never pooled across statistics
    for &statistic in statistics {
        let idxs: Vec<usize> = (0..rows.len())
            .filter(|&i| rows[i].statistic == statistic)
            .collect();
        let pvals: Vec<f64> = idxs.iter().map(|&i| rows[i].p_value).collect();
        let qvals = bh_qvalues(&pvals)?;
        for (&i, q) in idxs.iter().zip(qvals) {
            rows[i].q_value = q;
        }
    }

    rows.sort_by(|a, b| {
        a.q_value
            .total_cmp(&b.q_value)
            .then(a.p_value.total_cmp(&b.p_value))
            .then(a.set_id.cmp(&b.set_id))
            .then(a.statistic.to_string().cmp(&b.statistic.to_string()))
    });
    Ok(PathwayResultTable {
        rows,
        skipped,
        unmatched_members,
    })
}

/// Per-sample risk scores for one set's submatrix, paired with sample
/// ids for downstream modeling: squared column sums for S, connectivity
/// for C, and for M the product vector of the winning feature pair. The
/// quadratic statistic has no per-sample score decomposition.
pub fn risk_score_export(
    x: &FeatureMatrix,
    y: &Outcome,
    rows: &[usize],
    statistic: Statistic,
) -> Result<(Vec<String>, RiskScores)> {
    let sub = x.select_rows(rows)?;
    let scores = match statistic {
        Statistic::S => risk_scores_w(&sub),
        Statistic::C => risk_scores_b(&sub, true),
        Statistic::M => {
            let m = stat_m(&sub, y, MaxStatOptions::default())?;
            let (i, j) = m.pair;
            RiskScores {
                kind: RiskScoreKind::PairProduct { i, j },
                values: pair_product_row(&sub, i, j)?,
            }
        }
        Statistic::Q => {
            return Err(Error::Unsupported(
                "the quadratic statistic has no per-sample risk-score analogue".into(),
            ))
        }
    };
    let sample_ids = (0..sub.n_samples()).map(|k| sub.sample_id(k)).collect();
    Ok((sample_ids, scores))
}
