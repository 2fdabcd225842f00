//! Command-line frontend for set-based differential covariance testing:
//! single-set tests, batch pathway analysis, and the Monte Carlo power
//! harness.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use covtest::genesets::{parse_gmt, run_pathways};
use covtest::matrix::{read_covariates_tsv, read_matrix_tsv, residualize};
use covtest::sim::{
    power_table_tsv, run_trials, Gamma2Form, MaxPairMethod, Model4Form, SampleDesign,
    SimulationSpec,
};
use covtest::stats::encode_two_group;
use covtest::{
    run_test, Covariates, Error, FeatureMatrix, MethodChoice, Outcome, PermutationPlan, Statistic,
};

#[derive(Parser)]
#[command(
    name = "covtest",
    version,
    about = "Set-based differential covariance testing",
    propagate_version = true
)]
struct Cli {
    /// Worker threads for the permutation and simulation engines
    /// (default: all cores; env COVTEST_THREADS is the fallback).
    /// Results never depend on the worker count.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Test one feature matrix against an outcome with the selected
    /// statistics.
    Test(TestArgs),
    /// Test every set of a catalog against an outcome, with FDR control
    /// across sets.
    Pathways(PathwaysArgs),
    /// Estimate type I error or power over replicated synthetic data.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Feature matrix TSV: first row sample ids, first column feature
    /// ids, real-valued body. Rows are centered after loading (the
    /// statistics are defined on row-centered data).
    #[arg(long)]
    matrix: PathBuf,

    /// Continuous outcome file, one value per line (mutually exclusive
    /// with --groups).
    #[arg(long)]
    outcome: Option<PathBuf>,

    /// Two-group label file, one label per line; labels are encoded as
    /// 1/n1 for the first group and -1/n2 for the second (mutually
    /// exclusive with --outcome).
    #[arg(long)]
    groups: Option<PathBuf>,

    /// Covariates TSV: first row covariate names, first column sample
    /// ids, one sample per row.
    #[arg(long)]
    covariates: Option<PathBuf>,

    /// Scale every row to unit sample variance after centering.
    #[arg(long)]
    scale_rows: bool,

    /// Residualize every row against the covariates (if any) and the
    /// outcome before testing.
    #[arg(long)]
    residualize: bool,
}

#[derive(Args)]
struct EngineArgs {
    /// Comma-separated statistics to run (subset of S,Q,C,M).
    #[arg(long, default_value = "S,Q,C,M")]
    stats: String,

    /// P-value method: auto, mcc, normal, permutation, extreme-value.
    /// Auto picks mcc for S and C, permutation for Q, and for M
    /// extreme-value on large designs (n >= 50 and p >= 32), permutation
    /// otherwise.
    #[arg(long, default_value = "auto")]
    method: String,

    /// Number of permutations H for permutation p-values.
    #[arg(long = "H", default_value_t = 10_000)]
    permutations: usize,

    /// Seed for all random streams; omit to draw one from entropy (the
    /// drawn seed is printed to stderr).
    #[arg(long)]
    seed: Option<u64>,

    /// Report the raw exceedance fraction c/H instead of the default
    /// add-one permutation p-value (1+c)/(1+H).
    #[arg(long)]
    no_add_one: bool,

    /// Re-residualize the permuted outcome direction inside the
    /// permutation loop (Q only; uses --covariates when given).
    #[arg(long)]
    residualize_in_loop: bool,
}

#[derive(Args)]
struct TestArgs {
    #[command(flatten)]
    data: DataArgs,

    #[command(flatten)]
    engine: EngineArgs,

    /// Write the result table here instead of stdout (written atomically).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Write the stored permutation null sample (one value per line) to
    /// this path; requires a single selected statistic and a permutation
    /// method.
    #[arg(long)]
    dump_null: Option<PathBuf>,
}

#[derive(Args)]
struct PathwaysArgs {
    #[command(flatten)]
    data: DataArgs,

    /// Feature-set catalog: one set per line,
    /// set_id<TAB>description<TAB>member...
    #[arg(long)]
    gmt: PathBuf,

    #[command(flatten)]
    engine: EngineArgs,

    /// Write the result table here instead of stdout (written atomically).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Also write the table as JSON to this path.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Data-generating model (1-5): 1 = two-group moving-average null,
    /// 2 = same with skewed innovations, 3 = two-group with a lag-2
    /// covariance change, 4 = continuous outcome sliding toward a
    /// compound-symmetric covariance, 5 = continuous outcome sliding
    /// between a random block covariance and its reversal.
    #[arg(long)]
    model: u8,

    /// Group sizes for models 1-3.
    #[arg(long)]
    n1: Option<usize>,
    #[arg(long)]
    n2: Option<usize>,

    /// Sample count for models 4-5.
    #[arg(long)]
    n: Option<usize>,

    /// Feature count.
    #[arg(long)]
    p: usize,

    /// Lag-1 moving-average coefficient (models 1-3; default 2).
    #[arg(long)]
    theta1: Option<f64>,

    /// Lag-2 moving-average coefficient (models 1-3; default 0 for
    /// models 1-2, 1 for model 3).
    #[arg(long)]
    theta2: Option<f64>,

    /// Effect size in [0, 1) for models 4-5.
    #[arg(long, default_value_t = 0.0)]
    rho: f64,

    /// Monte Carlo replicates.
    #[arg(long, default_value_t = 1000)]
    reps: usize,

    /// Permutations per replicate.
    #[arg(long = "H", default_value_t = 999)]
    permutations: usize,

    /// Rejection level.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,

    /// Seed; omit to draw one from entropy (printed to stderr).
    #[arg(long)]
    seed: Option<u64>,

    /// P-value method for the max-pair statistic: permutation or
    /// extreme-value.
    #[arg(long, default_value = "permutation")]
    m_method: String,

    /// Model 4 correlated endpoint: cs (compound symmetric) or
    /// tridiagonal (requires rho <= 0.45).
    #[arg(long, default_value = "cs")]
    gamma2_form: String,

    /// Model 4 interpolation: convex combination of the endpoints, or
    /// endpoint-sum (the identity endpoint fades but the correlated one
    /// is always fully present).
    #[arg(long, default_value = "convex")]
    model4_form: String,

    /// Write the power table here instead of stdout (written atomically).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let threads = cli.threads.or_else(|| {
        std::env::var("COVTEST_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(t) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
        {
            eprintln!("error: could not configure {t} worker threads: {e}");
            return ExitCode::from(2);
        }
    }

    let result = match cli.command {
        Command::Test(args) => cmd_test(args),
        Command::Pathways(args) => cmd_pathways(args),
        Command::Simulate(args) => cmd_simulate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for input/configuration problems, 3 for numeric failures found in
/// otherwise well-formed data.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_)
        | Error::MalformedLine { .. }
        | Error::InvalidParams(_)
        | Error::InvalidPlan
        | Error::TooLarge { .. }
        | Error::Unsupported(_)
        | Error::DimensionMismatch(_)
        | Error::IndexOutOfBounds { .. }
        | Error::SubsetTooSmall(_)
        | Error::EmptyGroup
        | Error::TooSmallForTest { .. } => 2,
        Error::NonFinite { .. }
        | Error::ZeroVarianceRow(_)
        | Error::ConstantOutcome
        | Error::AllPairsDegenerate
        | Error::DegenerateInput(_)
        | Error::RankDeficientDesign
        | Error::OutOfRange(_) => 3,
    }
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    match seed {
        Some(s) => s,
        None => {
            let s: u64 = rand::random();
            eprintln!("seed: {s} (drawn from entropy; pass --seed {s} to reproduce)");
            s
        }
    }
}

fn parse_stats(arg: &str) -> Result<Vec<Statistic>, Error> {
    let mut out = Vec::new();
    for tok in arg.split(',') {
        let tok = tok.trim();
        if tok.is_empty() {
            continue;
        }
        let s: Statistic = tok.parse()?;
        if !out.contains(&s) {
            out.push(s);
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidParams(
            "no statistics selected (expected a subset of S,Q,C,M)".into(),
        ));
    }
    Ok(out)
}

/// One float per line; blank lines skipped.
fn read_outcome_file(path: &Path) -> Result<Outcome, Error> {
    let text = std::fs::read_to_string(path)?;
    let shown = path.display().to_string();
    let mut values = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line.parse::<f64>() {
            Ok(v) if v.is_finite() => values.push(v),
            _ => {
                return Err(Error::MalformedLine {
                    path: shown,
                    line: lineno + 1,
                    reason: format!("expected a finite number, got {line:?}"),
                })
            }
        }
    }
    Outcome::from_values(values)
}

/// One label per line; exactly two distinct labels. Labels "1"/"2" map
/// to groups 1/2; any other pair maps by first appearance.
fn read_groups_file(path: &Path) -> Result<Outcome, Error> {
    let text = std::fs::read_to_string(path)?;
    let shown = path.display().to_string();
    let mut labels: Vec<String> = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if !line.is_empty() {
            labels.push(line.to_string());
        }
    }
    let mut distinct: Vec<&String> = Vec::new();
    for l in &labels {
        if !distinct.contains(&l) {
            distinct.push(l);
        }
    }
    if distinct.len() != 2 {
        return Err(Error::MalformedLine {
            path: shown,
            line: 1,
            reason: format!(
                "expected exactly two distinct group labels, found {}",
                distinct.len()
            ),
        });
    }
    let first = if distinct.contains(&&"1".to_string()) && distinct.contains(&&"2".to_string()) {
        "1".to_string()
    } else {
        distinct[0].clone()
    };
    let encoded: Vec<u8> = labels
        .iter()
        .map(|l| if *l == first { 1 } else { 2 })
        .collect();
    encode_two_group(&encoded)
}

/// Loads and preprocesses matrix, outcome and covariates. The matrix is
/// always row-centered; --scale-rows and --residualize apply on top.
fn load_inputs(data: &DataArgs) -> Result<(FeatureMatrix, Outcome, Covariates), Error> {
    let y = match (&data.outcome, &data.groups) {
        (Some(path), None) => read_outcome_file(path)?,
        (None, Some(path)) => read_groups_file(path)?,
        (Some(_), Some(_)) => {
            return Err(Error::InvalidParams(
                "--outcome and --groups are mutually exclusive".into(),
            ))
        }
        (None, None) => {
            return Err(Error::InvalidParams(
                "one of --outcome or --groups is required".into(),
            ))
        }
    };
    let covariates = match &data.covariates {
        Some(path) => read_covariates_tsv(path)?,
        None => Covariates::empty(),
    };
    let mut x = read_matrix_tsv(&data.matrix)?;
    if y.len() != x.n_samples() {
        return Err(Error::DimensionMismatch(format!(
            "outcome has {} entries but the matrix has {} samples",
            y.len(),
            x.n_samples()
        )));
    }
    if let Some(nc) = covariates.n_samples() {
        if nc != x.n_samples() {
            return Err(Error::DimensionMismatch(format!(
                "covariates cover {nc} samples but the matrix has {}",
                x.n_samples()
            )));
        }
    }
    x = x.center_rows();
    if data.scale_rows {
        x = x.scale_rows()?;
    }
    if data.residualize {
        // regress every row on the covariates plus the outcome itself
        let mut names = covariates.names().to_vec();
        let mut columns = covariates.columns().to_vec();
        names.push("outcome".into());
        columns.push(y.values().to_vec());
        let design = Covariates::new(names, columns)?;
        x = residualize(&x, &design)?;
    }
    Ok((x, y, covariates))
}

fn build_plan(engine: &EngineArgs) -> PermutationPlan {
    let mut plan = PermutationPlan::new(engine.permutations, resolve_seed(engine.seed));
    plan.add_one = !engine.no_add_one;
    plan.residualize_in_loop = engine.residualize_in_loop;
    plan
}

/// Writes content to the path atomically (temp file in the same
/// directory, then rename), or to stdout when no path is given.
fn emit(out: &Option<PathBuf>, content: &str) -> Result<(), Error> {
    match out {
        None => {
            print!("{content}");
            Ok(())
        }
        Some(path) => {
            let dir = path.parent().filter(|d| !d.as_os_str().is_empty());
            let mut tmp = match dir {
                Some(d) => tempfile::NamedTempFile::new_in(d)?,
                None => tempfile::NamedTempFile::new_in(".")?,
            };
            tmp.write_all(content.as_bytes())?;
            tmp.persist(path).map_err(|e| Error::Io(e.error))?;
            Ok(())
        }
    }
}

fn sig6(v: f64) -> String {
    format!("{v:.5e}")
}

fn cmd_test(args: TestArgs) -> Result<(), Error> {
    let statistics = parse_stats(&args.engine.stats)?;
    let method: MethodChoice = args.engine.method.parse()?;
    let (x, y, covariates) = load_inputs(&args.data)?;
    let mut plan = build_plan(&args.engine);

    if args.dump_null.is_some() {
        if statistics.len() != 1 {
            return Err(Error::InvalidParams(
                "--dump-null needs exactly one selected statistic".into(),
            ));
        }
        plan.store_null = true;
    }

    let mut out = String::from(
        "statistic\tvalue\tp_value\tmethod\tfallback\tpermutations\texceed\tpair\n",
    );
    for &statistic in &statistics {
        let r = run_test(&x, &y, statistic, method, &plan, &covariates)?;
        let (h_used, exceed) = match &r.permutation {
            Some(p) => (p.h_used.to_string(), p.exceed_count.to_string()),
            None => (String::new(), String::new()),
        };
        let pair = match r.max_pair {
            Some((i, j)) => format!("{}:{}", x.feature_id(i), x.feature_id(j)),
            None => String::new(),
        };
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            statistic,
            sig6(r.value),
            sig6(r.p_value),
            r.method,
            r.analytic_fallback,
            h_used,
            exceed,
            pair
        ));
        if let Some(path) = &args.dump_null {
            match &r.permutation {
                Some(p) => p.write_null_sample(path)?,
                None => {
                    return Err(Error::InvalidParams(
                        "--dump-null needs a permutation p-value method".into(),
                    ))
                }
            }
        }
    }
    emit(&args.out, &out)
}

fn cmd_pathways(args: PathwaysArgs) -> Result<(), Error> {
    let statistics = parse_stats(&args.engine.stats)?;
    let method: MethodChoice = args.engine.method.parse()?;
    if args.engine.residualize_in_loop && statistics != [Statistic::Q] {
        return Err(Error::InvalidParams(
            "--residualize-in-loop applies to Q only; pass --stats Q".into(),
        ));
    }
    let (x, y, covariates) = load_inputs(&args.data)?;
    let catalog = parse_gmt(&args.gmt)?;
    let plan = build_plan(&args.engine);
    let table = run_pathways(&x, &y, &catalog, &statistics, method, &plan, &covariates)?;

    eprintln!(
        "tested {} set(s), skipped {} (fewer than 2 matched features); {} member id(s) had no match",
        catalog.len() - table.skipped.len(),
        table.skipped.len(),
        table.unmatched_members
    );
    for s in &table.skipped {
        eprintln!("  skipped {} ({} matched feature(s))", s.set_id, s.matched);
    }
    if let Some(path) = &args.json {
        let json = serde_json::to_string_pretty(&table.to_json())
            .expect("tables serialize without error");
        emit(&Some(path.clone()), &(json + "\n"))?;
    }
    emit(&args.out, &table.to_tsv())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Error> {
    let mut spec = match args.model {
        1..=3 => {
            let (n1, n2) = match (args.n1, args.n2) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(Error::InvalidParams(
                        "models 1-3 need --n1 and --n2".into(),
                    ))
                }
            };
            match args.model {
                1 => SimulationSpec::model1(n1, n2, args.p),
                2 => SimulationSpec::model2(n1, n2, args.p),
                _ => SimulationSpec::model3(n1, n2, args.p),
            }
        }
        4..=5 => {
            let n = args.n.ok_or_else(|| {
                Error::InvalidParams("models 4-5 need --n".into())
            })?;
            if args.model == 4 {
                SimulationSpec::model4(n, args.p, args.rho)
            } else {
                SimulationSpec::model5(n, args.p, args.rho)
            }
        }
        m => {
            return Err(Error::InvalidParams(format!(
                "unknown model {m} (expected 1-5)"
            )))
        }
    };
    if let Some(t) = args.theta1 {
        spec.theta1 = t;
    }
    if let Some(t) = args.theta2 {
        spec.theta2 = t;
    }
    spec.replicates = args.reps;
    spec.alpha = args.alpha;
    spec.plan = PermutationPlan::new(args.permutations, 0);
    spec.seed = resolve_seed(args.seed);
    spec.m_method = match args.m_method.to_ascii_lowercase().as_str() {
        "permutation" | "perm" => MaxPairMethod::Permutation,
        "extreme-value" | "extreme_value" | "ev" => MaxPairMethod::ExtremeValue,
        other => {
            return Err(Error::InvalidParams(format!(
                "unknown m-method '{other}' (expected permutation or extreme-value)"
            )))
        }
    };
    spec.gamma2_form = match args.gamma2_form.to_ascii_lowercase().as_str() {
        "cs" | "compound-symmetric" => Gamma2Form::CompoundSymmetric,
        "tridiagonal" => Gamma2Form::Tridiagonal,
        other => {
            return Err(Error::InvalidParams(format!(
                "unknown gamma2 form '{other}' (expected cs or tridiagonal)"
            )))
        }
    };
    spec.model4_form = match args.model4_form.to_ascii_lowercase().as_str() {
        "convex" => Model4Form::Convex,
        "endpoint-sum" | "endpoint_sum" => Model4Form::EndpointSum,
        other => {
            return Err(Error::InvalidParams(format!(
                "unknown model4 form '{other}' (expected convex or endpoint-sum)"
            )))
        }
    };

    let report = run_trials(&spec)?;
    let (design, total) = match report.design {
        SampleDesign::TwoGroup { n1, n2 } => (format!("{n1}+{n2}"), n1 + n2),
        SampleDesign::Continuous { n } => (n.to_string(), n),
    };
    eprintln!(
        "model {} (n = {design}, {} samples, p = {}): {} replicate(s) in {:.1?}",
        report.model, total, report.p, report.replicates, report.runtime
    );
    emit(&args.out, &power_table_tsv(&[report]))
}
