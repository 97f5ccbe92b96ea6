//! `pia`: runs penalized policy-iteration experiments from a JSON config.
//!
//! Exit codes: 0 success, 1 I/O failure or failed cross-check, 2 invalid
//! configuration, 3 numerical abort.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use pia_core::bench::{benchmark, list_benchmarks, BenchmarkParams, BenchmarkSpec};
use pia_core::driver::{entropic_crosscheck, run, SchemeConfig};
use pia_core::problem::PenaltySchedule;
use pia_core::report::{ConvergenceReport, CrosscheckResult, RateFit, Reference, CSV_HEADER};
use pia_core::PiaError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
enum Format {
    #[default]
    Csv,
    Json,
    Both,
}

/// One experiment: a benchmark, a scheme and where to write the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentConfig {
    benchmark: String,
    #[serde(default)]
    params: BenchmarkParams,
    #[serde(default)]
    scheme: SchemeConfig,
    /// Schedules compared by `converge`.
    #[serde(default)]
    schedules: Vec<PenaltySchedule>,
    /// Iterate compared by `crosscheck`.
    #[serde(default = "one")]
    crosscheck_n: usize,
    #[serde(default = "default_output")]
    output: PathBuf,
    #[serde(default)]
    format: Format,
}

fn one() -> usize {
    1
}

fn default_output() -> PathBuf {
    PathBuf::from("pia-report")
}

#[derive(Parser)]
#[command(name = "pia", version, about = "Penalized policy iteration for stochastic control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path stem; `.csv` / `.json` are appended.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured scheme and write its report.
    Solve(RunArgs),
    /// Run the experiment once per configured schedule on shared random numbers.
    Converge(RunArgs),
    /// Compare the entropic and explicit values at iterate `n`.
    Crosscheck {
        #[command(flatten)]
        args: RunArgs,
        /// Iterate to compare; defaults to `crosscheck_n` from the config.
        n: Option<usize>,
    },
    /// Print the registered benchmarks.
    ListBenchmarks,
}

#[derive(Debug)]
enum Failure {
    Validation(String),
    Numerical(String),
    Io(String),
    Check(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Io(_) | Failure::Check(_) => 1,
            Failure::Validation(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Numerical(m) | Failure::Io(m) | Failure::Check(m) => m,
        }
    }
}

impl From<PiaError> for Failure {
    fn from(e: PiaError) -> Self {
        match e {
            e if e.is_validation() => Failure::Validation(e.to_string()),
            PiaError::Io(e) => Failure::Io(e.to_string()),
            e => Failure::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

/// Reads, overrides and validates a config; nothing runs before this
/// succeeds.
fn load(args: &RunArgs) -> Result<(ExperimentConfig, BenchmarkSpec), Failure> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| Failure::Io(format!("cannot read {}: {e}", args.config.display())))?;
    let mut cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| Failure::Validation(format!("invalid config: {e}")))?;
    if let Some(s) = args.seed {
        cfg.scheme.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.output = o.clone();
    }
    if let Some(f) = args.format {
        cfg.format = f;
    }
    let spec = benchmark(&cfg.benchmark, cfg.params)?;
    cfg.scheme.validate_for(&spec.problem)?;
    for s in &cfg.schedules {
        s.validate(cfg.scheme.n_max)?;
    }
    Ok((cfg, spec))
}

/// Writes through a temporary file in the same directory and a rename.
fn write_atomic(path: &Path, contents: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Failure::Io(format!("cannot write {}: {e}", path.display()))
    })
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    match stem.extension().and_then(|e| e.to_str()) {
        Some("csv") | Some("json") => stem.with_extension(ext),
        _ => {
            let mut s = stem.as_os_str().to_owned();
            s.push(".");
            s.push(ext);
            PathBuf::from(s)
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Versions {
    pia_core: String,
    pia_cli: String,
}

/// JSON envelope of a single report.
#[derive(Serialize, Deserialize)]
struct Envelope {
    config: ExperimentConfig,
    mode: String,
    records: Vec<pia_core::report::IterationRecord>,
    reference: Reference,
    crosschecks: Vec<CrosscheckResult>,
    fitted_rate: Option<RateFit>,
    partial: bool,
    warnings: Vec<String>,
    seed: u64,
    versions: Versions,
}

fn versions() -> Versions {
    Versions {
        pia_core: pia_core::VERSION.to_string(),
        pia_cli: env!("CARGO_PKG_VERSION").to_string(),
    }
}

fn envelope(cfg: &ExperimentConfig, rep: &ConvergenceReport) -> Envelope {
    Envelope {
        config: cfg.clone(),
        mode: rep.mode.clone(),
        records: rep.records.clone(),
        reference: rep.reference.clone(),
        crosschecks: rep.crosschecks.clone(),
        fitted_rate: rep.fitted_rate.clone(),
        partial: rep.partial,
        warnings: rep.warnings.clone(),
        seed: cfg.scheme.seed,
        versions: versions(),
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(v)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| Failure::Io(e.to_string()))
}

fn emit(cfg: &ExperimentConfig, csv: impl FnOnce() -> String, json: impl FnOnce() -> Result<String, Failure>) -> Result<(), Failure> {
    if matches!(cfg.format, Format::Csv | Format::Both) {
        write_atomic(&with_ext(&cfg.output, "csv"), &csv())?;
    }
    if matches!(cfg.format, Format::Json | Format::Both) {
        write_atomic(&with_ext(&cfg.output, "json"), &json()?)?;
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into())
}

fn summary(rep: &ConvergenceReport) -> String {
    let last = rep.records.last();
    let rate = rep
        .fitted_rate
        .as_ref()
        .map(|r| format!("{:.4} over n={}..{}", r.slope, r.window.0, r.window.1))
        .unwrap_or_else(|| "-".into());
    format!(
        "value={} reference={} ({}) err={} rate={}",
        fmt_opt(last.map(|r| r.value)),
        fmt_opt(rep.reference.value),
        rep.reference.provenance.as_str(),
        fmt_opt(last.and_then(|r| r.err)),
        rate
    )
}

fn report_warnings(rep: &ConvergenceReport) {
    for w in &rep.warnings {
        log::warn!("{w}");
    }
}

fn cmd_solve(args: &RunArgs) -> Result<(), Failure> {
    let (cfg, spec) = load(args)?;
    let out = run(&spec.problem, &cfg.scheme, &spec.known())?;
    report_warnings(&out.report);
    emit(&cfg, || out.report.to_csv(), || to_json(&envelope(&cfg, &out.report)))?;
    println!("{}", summary(&out.report));
    match out.abort {
        Some(e) => Err(Failure::Numerical(format!("aborted after {} records: {e}", out.report.records.len()))),
        None => Ok(()),
    }
}

#[derive(Serialize, Deserialize)]
struct LabelledReport {
    schedule: String,
    report: Envelope,
}

fn cmd_converge(args: &RunArgs) -> Result<(), Failure> {
    let (cfg, spec) = load(args)?;
    if cfg.schedules.is_empty() {
        return Err(Failure::Validation("converge needs at least one schedule".into()));
    }
    let mut csv = format!("schedule,{CSV_HEADER}\n");
    let mut all = vec![];
    let mut abort = None;
    for s in &cfg.schedules {
        let scheme = SchemeConfig {
            schedule: s.clone(),
            ..cfg.scheme.clone()
        };
        let out = run(&spec.problem, &scheme, &spec.known())?;
        report_warnings(&out.report);
        csv.push_str(&out.report.to_labelled_csv_rows(&s.label()));
        println!("{}: {}", s.label(), summary(&out.report));
        all.push(LabelledReport {
            schedule: s.label(),
            report: envelope(&cfg, &out.report),
        });
        if let Some(e) = out.abort {
            abort = Some(e);
            break;
        }
    }
    emit(&cfg, || csv, || to_json(&all))?;
    match abort {
        Some(e) => Err(Failure::Numerical(e.to_string())),
        None => Ok(()),
    }
}

fn cmd_crosscheck(args: &RunArgs, n: Option<usize>) -> Result<(), Failure> {
    let (mut cfg, spec) = load(args)?;
    if let Some(n) = n {
        cfg.crosscheck_n = n;
    }
    let r = entropic_crosscheck(&spec.problem, &cfg.scheme, cfg.crosscheck_n, &spec.known())?;
    let rep = ConvergenceReport {
        mode: "entropic_crosscheck".into(),
        records: vec![],
        reference: Reference::none(),
        fitted_rate: None,
        crosschecks: vec![r.clone()],
        partial: false,
        warnings: vec![],
    };
    emit(
        &cfg,
        || {
            format!(
                "n,v_tilde,v_n,gap,stderr_tilde,stderr_n,combined_stderr,passed\n{},{},{},{},{},{},{},{}\n",
                r.n, r.v_tilde, r.v_n, r.gap, r.stderr_tilde, r.stderr_n, r.combined_stderr, r.passed
            )
        },
        || to_json(&envelope(&cfg, &rep)),
    )?;
    println!(
        "n={} v_tilde={:.6} v_n={:.6} gap={:.3e} combined_stderr={:.3e} {}",
        r.n,
        r.v_tilde,
        r.v_n,
        r.gap,
        r.combined_stderr,
        if r.passed { "PASS" } else { "FAIL" }
    );
    if r.passed {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "gap {:.3e} exceeds 3 x combined stderr {:.3e}",
            r.gap, r.combined_stderr
        )))
    }
}

fn cmd_list() {
    for (name, desc, p) in list_benchmarks() {
        println!("{name}\t{desc}");
        println!(
            "\tdefaults: x0={} horizon={} kappa={} action_step={} z_clip={}",
            p.x0, p.horizon, p.kappa, p.action_step, p.z_clip
        );
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Converge(a) => cmd_converge(a),
        Command::Crosscheck { args, n } => cmd_crosscheck(args, *n),
        Command::ListBenchmarks => {
            cmd_list();
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extensions() {
        assert_eq!(with_ext(Path::new("out/r"), "csv"), PathBuf::from("out/r.csv"));
        assert_eq!(with_ext(Path::new("out/r.json"), "csv"), PathBuf::from("out/r.csv"));
        assert_eq!(with_ext(Path::new("out/r.v2"), "json"), PathBuf::from("out/r.v2.json"));
    }

    #[test]
    fn config_defaults_round_trip() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"benchmark": "bm-lin"}"#).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(c, back);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"benchmark": "bm-lin", "extra": 1}"#).is_err());
    }
}
