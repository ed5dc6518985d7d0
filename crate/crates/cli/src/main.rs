//! Command-line front end: two-sample, k-sample, Latin-square, and blocked
//! analyses; simulation studies; and the analytic-vs-simulation benchmark.
//!
//! Reports are JSON by default (CSV on request) with a versioned schema, and
//! every report embeds its full effective configuration including the seed,
//! so any statistical field can be reproduced bit-for-bit by re-running the
//! printed config. Timing fields of the benchmark are the only exception.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use permbound::bounds::{BoundConfig, Observation};
use permbound::designs::{
    crbd_test, global_test, latin_square_stepdown, pairwise_tests, second_order_embedding,
    Correction, CrbdData, CrbdMode, LatinMode, LatinReport, LatinSquare, PValueReport,
    TestSettings,
};
use permbound::error::Error;
use permbound::ingest::{load_curves, load_operators, LabeledSample};
use permbound::linalg::{NormSpec, Q};
use permbound::scenarios;

const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(
    name = "permbound",
    version,
    about = "Analytic permutation-test p-values with a Monte-Carlo oracle",
    long_about = "Computes permutation-test p-values analytically via sub-Gaussian tail \
bounds plus beta calibration, for two-sample and k-sample tests on scalars, curves, and \
covariance operators, with simulation studies and a benchmark harness.\n\n\
Exit codes: 0 success; 2 parse error; 3 domain error; 4 degenerate data; 5 unsupported \
design; 6 calibration failure (only with --strict; otherwise the raw bound is reported \
with a warning flag); 7 numeric error; 8 size guard; 9 i/o error."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-sample test on a file with exactly two labels.
    TwoSample(AnalyzeArgs),
    /// Pairwise + synchronized global tests across k labeled groups.
    Ksample(KsampleArgs),
    /// Stepdown analysis of an unreplicated Latin square (needs row,col
    /// design columns; the label column is the treatment).
    Latin(LatinArgs),
    /// Complete randomized block analysis (needs a block design column).
    Crbd(CrbdArgs),
    /// Seeded replication studies with plot-ready output.
    Simulate(SimulateArgs),
    /// Analytic-vs-simulation timing and decomposition-count benchmark.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum NormArg {
    L1,
    L2,
    Linf,
    S1,
    S2,
    Sinf,
}

impl NormArg {
    fn is_schatten(self) -> bool {
        matches!(self, NormArg::S1 | NormArg::S2 | NormArg::Sinf)
    }

    fn q(self) -> Q {
        match self {
            NormArg::L1 | NormArg::S1 => Q::Finite(1.0),
            NormArg::L2 | NormArg::S2 => Q::Finite(2.0),
            NormArg::Linf | NormArg::Sinf => Q::Inf,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            NormArg::L1 => "l1",
            NormArg::L2 => "l2",
            NormArg::Linf => "linf",
            NormArg::S1 => "s1",
            NormArg::S2 => "s2",
            NormArg::Sinf => "sinf",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputArg {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CorrectionArg {
    None,
    Bonferroni,
    Holm,
}

impl From<CorrectionArg> for Correction {
    fn from(c: CorrectionArg) -> Self {
        match c {
            CorrectionArg::None => Correction::None,
            CorrectionArg::Bonferroni => Correction::Bonferroni,
            CorrectionArg::Holm => Correction::Holm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Means,
    Covariances,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Input data file: curve CSV (`grid,...` header) or stacked operator
    /// blocks (`operator,<label>,dim=<d>` headers).
    #[arg(long)]
    input: PathBuf,

    /// Norm driving the statistic: l1/l2/linf for curves and scalars,
    /// s1/s2/sinf (Schatten) for operators.
    #[arg(long, value_enum, default_value = "l2")]
    norm: NormArg,

    /// RNG seed. Every statistical field is reproducible from it.
    #[arg(long, env = "PERMBOUND_SEED", default_value_t = 0)]
    seed: u64,

    /// Calibration draws for the empirical beta transform.
    #[arg(long, default_value_t = 10)]
    r: usize,

    /// Universal constant of the sub-Gaussian bounds.
    #[arg(long, default_value_t = 64.0)]
    c: f64,

    /// Skip beta calibration and report raw bounds.
    #[arg(long)]
    raw: bool,

    /// Attach a Monte-Carlo cross-check with N permutations.
    #[arg(long, value_name = "N")]
    mc: Option<usize>,

    /// Output format. CSV report columns: comparison, statistic, scale,
    /// p_raw, p_adjusted, log2_p_adjusted, log10_p_adjusted, p_mc,
    /// mc_std_err, norm, method, correction, flags.
    #[arg(long, value_enum, default_value = "json")]
    output: OutputArg,

    /// Exit with code 6 when calibration falls back to the raw bound.
    #[arg(long)]
    strict: bool,
}

impl CommonArgs {
    fn settings(&self, spec: NormSpec) -> Result<TestSettings, Error> {
        let mut cfg = BoundConfig::with_constant(self.c)?;
        cfg.calibrate = !self.raw;
        Ok(TestSettings {
            spec,
            cfg,
            r: self.r,
            mc: self.mc,
            seed: self.seed,
        })
    }

    fn config_json(&self, command: &str) -> Value {
        json!({
            "command": command,
            "input": self.input.display().to_string(),
            "norm": self.norm.as_str(),
            "seed": self.seed,
            "r": self.r,
            "c": self.c,
            "calibrate": !self.raw,
            "mc": self.mc,
        })
    }
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// With a Schatten norm on curve input, group every G curves into one
    /// covariance operator instead of the rank-one embedding.
    #[arg(long, value_name = "G")]
    group_size: Option<usize>,
}

#[derive(Args, Debug)]
struct KsampleArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Multiple-testing correction for the pairwise p-values.
    #[arg(long, value_enum, default_value = "none")]
    correction: CorrectionArg,

    #[arg(long, value_name = "G")]
    group_size: Option<usize>,
}

#[derive(Args, Debug)]
struct LatinArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Stepdown rejection level.
    #[arg(long, default_value_t = 0.05)]
    level: f64,

    /// Use Monte-Carlo p-values with N permutations at each stage instead
    /// of calibrated analytic bounds.
    #[arg(long, value_name = "N")]
    mc_stepdown: Option<usize>,
}

#[derive(Args, Debug)]
struct CrbdArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Compare functional means or second-order (covariance) structure.
    #[arg(long, value_enum, default_value = "means")]
    mode: ModeArg,

    /// In covariance mode, group every G responses per cell into one
    /// empirical covariance operator (default: rank-one embedding).
    #[arg(long, value_name = "G")]
    group_size: Option<usize>,

    #[arg(long, value_enum, default_value = "none")]
    correction: CorrectionArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScenarioArg {
    UniTwoSample,
    UniKsample,
    CurvesMean,
    OperatorsProcrustes,
    NullCalibration,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Which replication study to run.
    #[arg(long, value_enum)]
    scenario: ScenarioArg,

    #[arg(long, env = "PERMBOUND_SEED", default_value_t = 0)]
    seed: u64,

    #[arg(long)]
    replicates: Option<usize>,

    /// Monte-Carlo permutations per replicate.
    #[arg(long)]
    n_perms: Option<usize>,

    /// Calibration draws.
    #[arg(long)]
    r: Option<usize>,

    /// Number of groups (uni-ksample).
    #[arg(long)]
    k: Option<usize>,

    /// Per-group sample size, where the scenario has one.
    #[arg(long)]
    m: Option<usize>,

    /// Grid length / operator dimension, where the scenario has one.
    #[arg(long)]
    dim: Option<usize>,

    /// Norm for the functional scenarios (l* for curves-mean, s* for
    /// operators-procrustes).
    #[arg(long, value_enum)]
    norm: Option<NormArg>,

    /// Output format. CSV columns are scenario-specific and mirror the JSON
    /// field names.
    #[arg(long, value_enum, default_value = "csv")]
    output: OutputArg,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    /// Operator dimension d.
    #[arg(long, default_value_t = 100)]
    dim: usize,

    /// Number of treatments.
    #[arg(long, default_value_t = 12)]
    k: usize,

    /// Number of block levels.
    #[arg(long, default_value_t = 4)]
    blocks: usize,

    /// Operators per (treatment, block) cell.
    #[arg(long, default_value_t = 6)]
    m: usize,

    /// Per-hypothesis permutation budget of the modeled simulation study.
    #[arg(long, default_value_t = 2000)]
    n_perms: usize,

    /// Permutations actually timed to estimate the per-permutation cost.
    #[arg(long, default_value_t = 10)]
    measured_perms: usize,

    #[arg(long, value_enum, default_value = "s2")]
    norm: NormArg,

    #[arg(long, default_value_t = 10)]
    r: usize,

    #[arg(long, env = "PERMBOUND_SEED", default_value_t = 0)]
    seed: u64,

    #[arg(long, value_enum, default_value = "json")]
    output: OutputArg,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(error_code(&e))
        }
    }
}

fn error_code(e: &Error) -> u8 {
    match e {
        Error::Parse { .. } => 2,
        Error::Domain(_) => 3,
        Error::DegenerateData(_) => 4,
        Error::UnsupportedDesign(_) => 5,
        Error::CalibrationFailure(_) => 6,
        Error::Numeric(_) => 7,
        Error::Size(_) => 8,
        Error::Io(_) => 9,
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::TwoSample(args) => cmd_two_sample(args),
        Command::Ksample(args) => cmd_ksample(args),
        Command::Latin(args) => cmd_latin(args),
        Command::Crbd(args) => cmd_crbd(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Benchmark(args) => cmd_benchmark(args),
    }
}

// ---------------------------------------------------------------------------
// Input handling
// ---------------------------------------------------------------------------

fn load_input(path: &PathBuf) -> Result<LabeledSample, Error> {
    let head = {
        let text = std::fs::read_to_string(path)?;
        text.lines()
            .find(|l| !l.trim().is_empty())
            .unwrap_or("")
            .trim()
            .to_ascii_lowercase()
    };
    if head.starts_with("operator") {
        load_operators(path)
    } else {
        load_curves(path)
    }
}

fn data_kind(items: &[Observation]) -> &'static str {
    match items.first() {
        Some(Observation::Scalar(_)) => "scalar",
        Some(Observation::Curve(_)) => "curve",
        Some(Observation::Vector(_)) => "vector",
        Some(Observation::Operator(_)) => "operator",
        None => "empty",
    }
}

/// Resolves the norm flag against the data type, applying the second-order
/// embedding when a Schatten norm is requested on curve data.
type Groups = Vec<(String, Vec<Observation>)>;

fn resolve_groups(
    groups: Groups,
    norm: NormArg,
    group_size: Option<usize>,
    seed: u64,
) -> Result<(Groups, NormSpec), Error> {
    let kind = data_kind(&groups[0].1);
    match (norm.is_schatten(), kind) {
        (false, "scalar") => Ok((groups, NormSpec::sequence(norm.q()))),
        (false, "vector") => Ok((groups, NormSpec::sequence(norm.q()))),
        (false, "curve") => Ok((groups, NormSpec::function(norm.q()))),
        (true, "operator") => Ok((groups, NormSpec::schatten(norm.q()))),
        (true, "curve") | (true, "vector") => {
            let spec = NormSpec::schatten(norm.q());
            let embedded = groups
                .into_iter()
                .enumerate()
                .map(|(i, (label, items))| {
                    let ops = second_order_embedding(
                        &items,
                        group_size,
                        permbound::mc_oracle::derive_seed(seed, 60_000 + i as u64),
                    )?;
                    Ok((label, ops))
                })
                .collect::<Result<Vec<_>, Error>>()?;
            Ok((embedded, spec))
        }
        (true, "scalar") => Err(Error::domain(
            "Schatten norms do not apply to scalar data; use l1/l2/linf",
        )),
        (false, "operator") => Err(Error::domain(
            "operator data needs a Schatten norm (s1/s2/sinf)",
        )),
        (_, other) => Err(Error::domain(format!("unsupported data kind {other:?}"))),
    }
}

// ---------------------------------------------------------------------------
// Report rendering
// ---------------------------------------------------------------------------

fn report_value(rep: &PValueReport) -> Value {
    let mut v = serde_json::to_value(rep).expect("report serializes");
    let obj = v.as_object_mut().expect("report is an object");
    obj.insert(
        "log2_p_adjusted".into(),
        json!(rep.p_adjusted.max(f64::MIN_POSITIVE).log2()),
    );
    obj.insert(
        "log10_p_adjusted".into(),
        json!(rep.p_adjusted.max(f64::MIN_POSITIVE).log10()),
    );
    obj.insert(
        "log2_p_raw".into(),
        json!(rep.p_raw.max(f64::MIN_POSITIVE).log2()),
    );
    obj.insert(
        "log10_p_raw".into(),
        json!(rep.p_raw.max(f64::MIN_POSITIVE).log10()),
    );
    v
}

fn reports_csv(reports: &[PValueReport]) -> String {
    let mut out = String::from(
        "comparison,statistic,scale,p_raw,p_adjusted,log2_p_adjusted,log10_p_adjusted,p_mc,mc_std_err,norm,method,correction,flags\n",
    );
    for r in reports {
        let (p_mc, se) = match &r.p_mc {
            Some(m) => (m.p_hat.to_string(), m.std_err.to_string()),
            None => (String::new(), String::new()),
        };
        let method = serde_json::to_value(r.method).unwrap();
        let correction = serde_json::to_value(r.correction).unwrap();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.comparison.replace(',', ";"),
            r.statistic,
            r.scale,
            r.p_raw,
            r.p_adjusted,
            r.p_adjusted.max(f64::MIN_POSITIVE).log2(),
            r.p_adjusted.max(f64::MIN_POSITIVE).log10(),
            p_mc,
            se,
            r.norm,
            method.as_str().unwrap(),
            correction.as_str().unwrap(),
            r.flags.join(";").replace(',', ";"),
        ));
    }
    out
}

fn emit(output: OutputArg, envelope: Value, csv: Option<String>) {
    match output {
        OutputArg::Json => println!("{}", serde_json::to_string_pretty(&envelope).unwrap()),
        OutputArg::Csv => match csv {
            Some(body) => print!("{body}"),
            None => println!("{}", serde_json::to_string_pretty(&envelope).unwrap()),
        },
    }
}

fn has_calibration_fallback(reports: &[PValueReport]) -> bool {
    reports.iter().any(|r| {
        r.flags
            .iter()
            .any(|f| f.starts_with("calibration-fallback-raw"))
    })
}

fn strict_exit(strict: bool, fallback: bool) -> ExitCode {
    if strict && fallback {
        eprintln!("error: calibration failure (strict mode); raw bounds were reported");
        ExitCode::from(6)
    } else {
        ExitCode::SUCCESS
    }
}

/// Lower-triangular log10(p) table of the pairwise comparisons, printed to
/// stderr for human consumption.
fn print_log10_table(labels: &[String], reports: &[PValueReport]) {
    let k = labels.len();
    if k < 2 {
        return;
    }
    let pair_index = |a: usize, b: usize| a * k - a * (a + 1) / 2 + (b - a - 1);
    eprintln!("log10 p-values (pairwise, lower triangle):");
    let widths: Vec<usize> = labels.iter().map(|l| l.len().max(6)).collect();
    let mut header = format!("{:>8} ", "");
    for j in 0..k - 1 {
        header.push_str(&format!("{:>w$} ", labels[j], w = widths[j]));
    }
    eprintln!("{header}");
    for i in 1..k {
        let mut line = format!("{:>8} ", labels[i]);
        for j in 0..i {
            let p = reports[pair_index(j, i)].p_adjusted.max(f64::MIN_POSITIVE);
            line.push_str(&format!("{:>w$.1} ", p.log10(), w = widths[j]));
        }
        eprintln!("{line}");
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_two_sample(args: AnalyzeArgs) -> Result<ExitCode, Error> {
    let sample = load_input(&args.common.input)?;
    let groups = sample.groups();
    if groups.len() != 2 {
        return Err(Error::domain(format!(
            "two-sample analysis needs exactly 2 labels, found {}",
            groups.len()
        )));
    }
    let (groups, spec) =
        resolve_groups(groups, args.common.norm, args.group_size, args.common.seed)?;
    let settings = args.common.settings(spec)?;
    let reports = pairwise_tests(&groups, &settings, Correction::None)?;
    let envelope = json!({
        "schema_version": SCHEMA_VERSION,
        "config": args.common.config_json("two-sample"),
        "results": { "reports": [report_value(&reports[0])] },
    });
    let fallback = has_calibration_fallback(&reports);
    emit(args.common.output, envelope, Some(reports_csv(&reports)));
    Ok(strict_exit(args.common.strict, fallback))
}

fn cmd_ksample(args: KsampleArgs) -> Result<ExitCode, Error> {
    let sample = load_input(&args.common.input)?;
    let groups = sample.groups();
    if groups.len() < 2 {
        return Err(Error::domain("k-sample analysis needs at least 2 labels"));
    }
    let (groups, spec) =
        resolve_groups(groups, args.common.norm, args.group_size, args.common.seed)?;
    let settings = args.common.settings(spec)?;
    let reports = pairwise_tests(&groups, &settings, args.correction.into())?;
    let labels: Vec<String> = groups.iter().map(|(l, _)| l.clone()).collect();
    print_log10_table(&labels, &reports);

    let balanced = groups.windows(2).all(|w| w[0].1.len() == w[1].1.len());
    let mut all_reports = reports.clone();
    let global = if balanced {
        let g = global_test(&groups, &settings)?;
        all_reports.push(g.clone());
        Some(g)
    } else {
        eprintln!("note: groups are unbalanced; the synchronized global test was skipped");
        None
    };
    let envelope = json!({
        "schema_version": SCHEMA_VERSION,
        "config": args.common.config_json("ksample"),
        "results": {
            "pairwise": reports.iter().map(report_value).collect::<Vec<_>>(),
            "global": global.as_ref().map(report_value),
        },
    });
    let fallback = has_calibration_fallback(&all_reports);
    emit(
        args.common.output,
        envelope,
        Some(reports_csv(&all_reports)),
    );
    Ok(strict_exit(args.common.strict, fallback))
}

fn cmd_latin(args: LatinArgs) -> Result<ExitCode, Error> {
    let sample = load_input(&args.common.input)?;
    let rows = sample.design.row.clone().ok_or_else(|| {
        Error::domain("Latin analysis needs a `row` design column in the curve CSV")
    })?;
    let cols = sample.design.col.clone().ok_or_else(|| {
        Error::domain("Latin analysis needs a `col` design column in the curve CSV")
    })?;
    let labels = sample.label_order();
    let k = labels.len();
    if k * k != sample.len() {
        return Err(Error::domain(format!(
            "expected a complete {k}x{k} layout, found {} responses",
            sample.len()
        )));
    }
    // normalize indices to 0-based
    let base_r = *rows.iter().min().unwrap();
    let base_c = *cols.iter().min().unwrap();
    let mut grid: Vec<Vec<Option<Observation>>> = vec![vec![None; k]; k];
    let mut treatment: Vec<Vec<usize>> = vec![vec![usize::MAX; k]; k];
    for (idx, item) in sample.items.iter().enumerate() {
        let r = rows[idx] - base_r;
        let c = cols[idx] - base_c;
        if r >= k || c >= k {
            return Err(Error::domain(format!(
                "row/col index ({},{}) outside the {k}x{k} layout",
                rows[idx], cols[idx]
            )));
        }
        if grid[r][c].is_some() {
            return Err(Error::domain(format!("duplicate cell at row {r}, col {c}")));
        }
        grid[r][c] = Some(item.clone());
        treatment[r][c] = labels
            .iter()
            .position(|l| *l == sample.labels[idx])
            .expect("label present");
    }
    let responses: Vec<Vec<Observation>> = grid
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|c| c.ok_or_else(|| Error::domain("incomplete Latin layout")))
                .collect::<Result<Vec<_>, Error>>()
        })
        .collect::<Result<_, _>>()?;
    let layout = LatinSquare::new(treatment)?;
    let spec = if args.common.norm.is_schatten() {
        return Err(Error::domain(
            "the Latin stepdown runs on the responses themselves; use l1/l2/linf",
        ));
    } else {
        match data_kind(&sample.items) {
            "curve" => NormSpec::function(args.common.norm.q()),
            _ => NormSpec::sequence(args.common.norm.q()),
        }
    };
    let settings = args.common.settings(spec)?;
    let mode = match args.mc_stepdown {
        Some(n_perms) => LatinMode::MonteCarlo { n_perms },
        None => LatinMode::Analytic { r: args.common.r },
    };
    let report: LatinReport =
        latin_square_stepdown(&responses, &layout, &settings, args.level, mode)?;
    let mut config = args.common.config_json("latin");
    config["level"] = json!(args.level);
    let envelope = json!({
        "schema_version": SCHEMA_VERSION,
        "config": config,
        "results": serde_json::to_value(&report).unwrap(),
    });
    let csv = {
        let mut out = String::from("factor,statistic,p_value,decision\n");
        for o in &report.outcomes {
            out.push_str(&format!(
                "{},{},{},{}\n",
                serde_json::to_value(o.factor).unwrap().as_str().unwrap(),
                o.statistic,
                o.p_value.map(|p| p.to_string()).unwrap_or_default(),
                serde_json::to_value(o.decision).unwrap().as_str().unwrap(),
            ));
        }
        out
    };
    emit(args.common.output, envelope, Some(csv));
    Ok(ExitCode::SUCCESS)
}

fn cmd_crbd(args: CrbdArgs) -> Result<ExitCode, Error> {
    let sample = load_input(&args.common.input)?;
    let blocks_col = sample.design.block.clone().ok_or_else(|| {
        Error::domain("blocked analysis needs a `block` design column in the curve CSV")
    })?;
    let treatments = sample.label_order();
    let mut blocks: Vec<String> = Vec::new();
    for b in &blocks_col {
        if !blocks.contains(b) {
            blocks.push(b.clone());
        }
    }
    let mut cells: Vec<Vec<Vec<Observation>>> =
        vec![vec![Vec::new(); blocks.len()]; treatments.len()];
    for (idx, item) in sample.items.iter().enumerate() {
        let t = treatments
            .iter()
            .position(|l| *l == sample.labels[idx])
            .expect("label present");
        let b = blocks
            .iter()
            .position(|l| *l == blocks_col[idx])
            .expect("block present");
        cells[t][b].push(item.clone());
    }
    if cells.iter().flatten().any(|c| c.is_empty()) {
        return Err(Error::unsupported(
            "every (treatment, block) cell must be non-empty",
        ));
    }
    let mode = match args.mode {
        ModeArg::Means => CrbdMode::Means,
        ModeArg::Covariances => CrbdMode::Covariances {
            group_size: args.group_size,
        },
    };
    let spec = match (args.mode, data_kind(&sample.items)) {
        (ModeArg::Covariances, _) => {
            if !args.common.norm.is_schatten() {
                return Err(Error::domain(
                    "covariance mode compares operators; use s1/s2/sinf",
                ));
            }
            NormSpec::schatten(args.common.norm.q())
        }
        (ModeArg::Means, "curve") => NormSpec::function(args.common.norm.q()),
        (ModeArg::Means, "operator") => {
            if !args.common.norm.is_schatten() {
                return Err(Error::domain("operator data needs a Schatten norm"));
            }
            NormSpec::schatten(args.common.norm.q())
        }
        (ModeArg::Means, _) => NormSpec::sequence(args.common.norm.q()),
    };
    let settings = args.common.settings(spec)?;
    let data = CrbdData {
        treatments: treatments.clone(),
        blocks,
        cells,
    };
    let report = crbd_test(&data, &settings, mode, args.correction.into())?;
    print_log10_table(&treatments, &report.pairwise);
    let mut all = report.pairwise.clone();
    all.push(report.global.clone());
    all.extend(report.block_tests.iter().cloned());
    let mut config = args.common.config_json("crbd");
    config["mode"] = json!(match args.mode {
        ModeArg::Means => "means",
        ModeArg::Covariances => "covariances",
    });
    config["group_size"] = json!(args.group_size);
    let envelope = json!({
        "schema_version": SCHEMA_VERSION,
        "config": config,
        "results": {
            "pairwise": report.pairwise.iter().map(report_value).collect::<Vec<_>>(),
            "global": report_value(&report.global),
            "block_tests": report.block_tests.iter().map(report_value).collect::<Vec<_>>(),
            "flags": report.flags,
        },
    });
    let fallback = has_calibration_fallback(&all);
    emit(args.common.output, envelope, Some(reports_csv(&all)));
    Ok(strict_exit(args.common.strict, fallback))
}

fn cmd_simulate(args: SimulateArgs) -> Result<ExitCode, Error> {
    let (results, csv, config): (Value, String, Value) = match args.scenario {
        ScenarioArg::UniTwoSample => {
            let mut cfg = scenarios::UniTwoSampleConfig {
                seed: args.seed,
                ..Default::default()
            };
            if let Some(m) = args.m {
                cfg.m1 = m;
                cfg.m2 = m;
            }
            if let Some(r) = args.replicates {
                cfg.replicates = r;
            }
            if let Some(n) = args.n_perms {
                cfg.n_perms = n;
            }
            let rows = scenarios::uni_two_sample(&cfg)?;
            let mut csv = String::from(
                "mu,mean_log2_ttest,mean_log2_mc,mean_log2_raw,mean_log2_adjusted,mean_abs_log2_adj_vs_ttest\n",
            );
            for r in &rows {
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.mu,
                    r.mean_log2_ttest,
                    r.mean_log2_mc,
                    r.mean_log2_raw,
                    r.mean_log2_adjusted,
                    r.mean_abs_log2_adj_vs_ttest
                ));
            }
            (json!(rows), csv, json!(cfg))
        }
        ScenarioArg::UniKsample => {
            let mut cfg = scenarios::UniKsampleConfig {
                seed: args.seed,
                ..Default::default()
            };
            if let Some(k) = args.k {
                cfg.k = k;
            }
            if let Some(m) = args.m {
                cfg.n_per_group = m;
            }
            if let Some(r) = args.replicates {
                cfg.replicates = r;
            }
            if let Some(n) = args.n_perms {
                cfg.n_perms = n;
            }
            if let Some(r) = args.r {
                cfg.r = r;
            }
            let rows = scenarios::uni_ksample(&cfg)?;
            let mut csv = String::from(
                "shift,mean_log2_ftest,mean_log2_mc,mean_log2_raw,mean_log2_calibrated,mean_abs_log2_ratio,mc_floor_fraction\n",
            );
            for r in &rows {
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    r.shift,
                    r.mean_log2_ftest,
                    r.mean_log2_mc,
                    r.mean_log2_raw,
                    r.mean_log2_calibrated,
                    r.mean_abs_log2_ratio,
                    r.mc_floor_fraction
                ));
            }
            (json!(rows), csv, json!(cfg))
        }
        ScenarioArg::CurvesMean => {
            let mut cfg = scenarios::CurvesMeanConfig {
                seed: args.seed,
                ..Default::default()
            };
            if let Some(m) = args.m {
                cfg.m_per_group = m;
            }
            if let Some(d) = args.dim {
                cfg.grid_len = d;
            }
            if let Some(r) = args.replicates {
                cfg.replicates = r;
            }
            if let Some(n) = args.n_perms {
                cfg.n_perms = n;
            }
            if let Some(r) = args.r {
                cfg.r = r;
            }
            if let Some(norm) = args.norm {
                if norm.is_schatten() {
                    return Err(Error::domain("curves-mean compares means; use l1/l2/linf"));
                }
                cfg.norm = NormSpec::function(norm.q());
            }
            let rows = scenarios::curves_mean(&cfg)?;
            let mut csv = String::from("shift,mean_log2_mc,mean_log2_raw,mean_log2_adjusted\n");
            for r in &rows {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    r.shift, r.mean_log2_mc, r.mean_log2_raw, r.mean_log2_adjusted
                ));
            }
            (json!(rows), csv, json!(cfg))
        }
        ScenarioArg::OperatorsProcrustes => {
            let mut cfg = scenarios::ProcrustesConfig {
                seed: args.seed,
                ..Default::default()
            };
            if let Some(m) = args.m {
                cfg.n_curves = m;
            }
            if let Some(d) = args.dim {
                cfg.dim = d;
            }
            if let Some(r) = args.replicates {
                cfg.replicates = r;
            }
            if let Some(n) = args.n_perms {
                cfg.n_perms = n;
            }
            if let Some(r) = args.r {
                cfg.r = r;
            }
            if let Some(norm) = args.norm {
                if !norm.is_schatten() {
                    return Err(Error::domain(
                        "operators-procrustes compares operators; use s1/s2/sinf",
                    ));
                }
                cfg.norm = NormSpec::schatten(norm.q());
            }
            let report = scenarios::operators_procrustes(&cfg)?;
            let mut csv = String::from(
                "gamma,mean_p_adjusted,mean_p_mc,mean_log2_adjusted,mean_log2_mc,mean_log2_raw\n",
            );
            for r in &report.rows {
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.gamma,
                    r.mean_p_adjusted,
                    r.mean_p_mc,
                    r.mean_log2_adjusted,
                    r.mean_log2_mc,
                    r.mean_log2_raw
                ));
            }
            (json!(report), csv, json!(cfg))
        }
        ScenarioArg::NullCalibration => {
            let mut cfg = scenarios::NullCalibrationConfig {
                seed: args.seed,
                ..Default::default()
            };
            if let Some(r) = args.replicates {
                cfg.replicates = r;
            }
            if let Some(m) = args.m {
                cfg.m_curves = m;
            }
            if let Some(d) = args.dim {
                cfg.grid_len = d;
            }
            if let Some(r) = args.r {
                cfg.r = r;
            }
            let settings = scenarios::null_calibration(&cfg)?;
            let mut csv = String::from("setting,ks_statistic,ks_p_value,n\n");
            for s in &settings {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    s.name, s.ks.statistic, s.ks.p_value, s.ks.n
                ));
            }
            (json!(settings), csv, json!(cfg))
        }
    };
    let envelope = json!({
        "schema_version": SCHEMA_VERSION,
        "config": config,
        "results": results,
    });
    emit(args.output, envelope, Some(csv));
    Ok(ExitCode::SUCCESS)
}

fn cmd_benchmark(args: BenchmarkArgs) -> Result<ExitCode, Error> {
    if !args.norm.is_schatten() {
        return Err(Error::domain(
            "the benchmark compares operators; use s1/s2/sinf",
        ));
    }
    let cfg = scenarios::BenchmarkConfig {
        dim: args.dim,
        k: args.k,
        blocks: args.blocks,
        m_per_cell: args.m,
        n_perms: args.n_perms,
        measured_perms: args.measured_perms,
        norm: NormSpec::schatten(args.norm.q()),
        r: args.r,
        seed: args.seed,
    };
    let report = scenarios::benchmark(&cfg)?;
    eprintln!(
        "analytic: {:.3}s, {} decompositions; simulation: {:.4}s/perm x {} perms \
         ({} decompositions each) -> {:.1}s extrapolated; speedup {:.0}x",
        report.analytic_secs,
        report.analytic_decompositions,
        report.per_perm_secs,
        report.total_perms,
        report.per_perm_decompositions,
        report.extrapolated_mc_secs,
        report.speedup
    );
    let envelope = json!({
        "schema_version": SCHEMA_VERSION,
        "config": json!(cfg),
        "results": json!(report),
    });
    let csv = {
        let mut out = String::from(
            "dim,k,blocks,m_per_cell,pairings,analytic_secs,analytic_decompositions,per_perm_secs,per_perm_decompositions,total_perms,extrapolated_mc_secs,extrapolated_mc_decompositions,speedup\n",
        );
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            report.dim,
            report.k,
            report.blocks,
            report.m_per_cell,
            report.pairings,
            report.analytic_secs,
            report.analytic_decompositions,
            report.per_perm_secs,
            report.per_perm_decompositions,
            report.total_perms,
            report.extrapolated_mc_secs,
            report.extrapolated_mc_decompositions,
            report.speedup
        ));
        out
    };
    emit(args.output, envelope, Some(csv));
    Ok(ExitCode::SUCCESS)
}
