//! Command-line front end: synthetic data generation, experiment runs, survey
//! fits and report printing.

pub mod export;
pub mod plan;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use cdand::cda::{build_ensemble, DEFAULT_SUBSET_SIZE};
use cdand::detect::detect;
use cdand::pipeline::{run_on_batch, survey_fit, PipelineError, RunResult};
use cdand::scenario::{FileFormat, ScenarioError};
use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::export::{provenance_comments, write_batch, write_mmd, write_run, write_stamped_json, write_survey};
use crate::plan::{PlanArgs, Resolved};

/// Failure classes, each with its own exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn class(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Data(_) => "data",
            CliError::Numeric(_) => "numeric",
        }
    }

    /// `error[class]: message` on one line.
    pub fn line(&self) -> String {
        let message = match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        };
        let flat: Vec<&str> = message.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        format!("error[{}]: {}", self.class(), flat.join("; "))
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match &e {
            PipelineError::InvalidPlan(_) | PipelineError::Scenario(ScenarioError::InvalidConfig(_)) => {
                CliError::Usage(e.to_string())
            }
            PipelineError::Survey { .. } => CliError::Numeric(e.to_string()),
            PipelineError::Scenario(_)
            | PipelineError::InsufficientLabels { .. }
            | PipelineError::NoUsableSnapshots => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "cdand",
    version,
    about = "NLoS detection and robust positioning from RTT range snapshots"
)]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a measurement batch from a preset.
    Generate(GenerateArgs),
    /// Run the full detection and positioning experiment.
    Run(RunArgs),
    /// Fit the soft-decision mapping on a whole labelled batch.
    FitSurvey(OutputArgs),
    /// Print the summary of a finished run.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    #[command(flatten)]
    pub plan: PlanArgs,
    /// Output directory.
    #[arg(short, long, value_name = "DIR")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: OutputArgs,
    /// Batch file format.
    #[arg(long, default_value = "csv", value_parser = parse_format)]
    pub format: FileFormat,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: OutputArgs,
    /// Random gNB insertion orders per snapshot for MMD stabilization curves (0 skips them).
    #[arg(long, default_value_t = 0)]
    pub mmd_orders: usize,
    /// Snapshots used for the MMD curves.
    #[arg(long, default_value_t = 100)]
    pub mmd_snapshots: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory or its run_result.json.
    pub run: PathBuf,
    /// Write the CSV summary here instead of standard output.
    #[arg(short, long, value_name = "FILE")]
    pub output: Option<PathBuf>,
}

fn parse_format(s: &str) -> Result<FileFormat, String> {
    match s.to_ascii_lowercase().as_str() {
        "csv" => Ok(FileFormat::Csv),
        "json" => Ok(FileFormat::Json),
        _ => Err(format!("unknown format {s:?} (csv or json)")),
    }
}

/// Parse arguments and run; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let err = CliError::Usage(e.to_string().trim_start_matches("error: ").to_string());
            eprintln!("{}", err.line());
            return err.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("{}", err.line());
            err.exit_code()
        }
    }
}

pub fn execute(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Generate(args) => {
            let resolved = args.common.plan.resolve()?;
            with_threads(&resolved, || generate(&resolved, &args.common.output, args.format))
        }
        Command::Run(args) => {
            let resolved = args.common.plan.resolve()?;
            with_threads(&resolved, || run(&resolved, args))
        }
        Command::FitSurvey(args) => {
            let resolved = args.plan.resolve()?;
            with_threads(&resolved, || fit_survey(&resolved, &args.output))
        }
        Command::Report(args) => report(args),
    }
}

fn with_threads<F>(resolved: &Resolved, f: F) -> Result<(), CliError>
where
    F: FnOnce() -> Result<(), CliError> + Send,
{
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = resolved.threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    pool.install(f)
}

fn generate(resolved: &Resolved, out: &Path, format: FileFormat) -> Result<(), CliError> {
    let plan = &resolved.plan;
    let batch = plan.load_data()?;
    let hash = plan.hash();
    let name = match format {
        FileFormat::Csv => "snapshots.csv",
        FileFormat::Json => "snapshots.json",
    };
    write_batch(&out.join(name), format, &batch, &provenance_comments(&hash, plan.seed))?;
    write_stamped_json(&out.join("plan.json"), &hash, plan.seed, plan)
}

fn run(resolved: &Resolved, args: &RunArgs) -> Result<(), CliError> {
    let plan = &resolved.plan;
    let out = &args.common.output;
    let batch = plan.load_data()?;
    let result = run_on_batch(plan, &batch)?;
    write_stamped_json(&out.join("plan.json"), &result.provenance.plan_hash, plan.seed, plan)?;
    write_run(out, &result)?;
    if args.mmd_orders > 0 {
        write_mmd(&out.join("mmd.csv"), &batch, plan, args.mmd_orders, args.mmd_snapshots)?;
    }
    Ok(())
}

fn fit_survey(resolved: &Resolved, out: &Path) -> Result<(), CliError> {
    let plan = &resolved.plan;
    let batch = plan.load_data()?;
    let fit = survey_fit(&batch, plan, plan.seed)?;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in &batch.snapshots {
        let Ok(ensemble) = build_ensemble(s, DEFAULT_SUBSET_SIZE) else {
            continue;
        };
        let Ok(report) = detect(&ensemble, s, plan.lambda) else {
            continue;
        };
        for rho in report.scores().into_iter().flatten() {
            lo = lo.min(rho);
            hi = hi.max(rho);
        }
    }
    if lo >= hi {
        return Err(CliError::Data("no usable scores in the batch".into()));
    }
    write_survey(out, plan, &fit, (lo, hi))?;
    write_stamped_json(&out.join("plan.json"), &plan.hash(), plan.seed, plan)
}

fn report(args: &ReportArgs) -> Result<(), CliError> {
    let path = if args.run.is_dir() {
        args.run.join("run_result.json")
    } else {
        args.run.clone()
    };
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let result: RunResult =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let text = report_text(&result);
    match &args.output {
        Some(file) => export::write_atomic(file, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// CSV report: provenance comments, one row per method, then detection rows.
pub fn report_text(result: &RunResult) -> String {
    let prov = &result.provenance;
    let mut out = String::new();
    for c in provenance_comments(&prov.plan_hash, prov.seed) {
        out.push_str(&format!("# {c}\n"));
    }
    out.push_str("scenario,method,count,mae_m,std_m,median_m,p95_m,fallbacks,failures\n");
    for row in export::summary_rows(result) {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    for (mode, d) in &result.detection {
        let f = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.4}"));
        out.push_str(&format!(
            "# {mode}: recall={} precision={} accuracy={} auc={}\n",
            f(d.recall),
            f(d.precision),
            f(d.accuracy),
            f(d.auc)
        ));
    }
    out
}
