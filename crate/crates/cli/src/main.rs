use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use xsense_core::dataset::{synth_generate, write_recordings, SynthParams};
use xsense_core::evaluation::{render_markdown, ReportFormat};
use xsense_core::experiment::{report_from_dir, run_experiment, write_reports, ExperimentConfig, RunOptions, OUTPUT_ROOT_ENV};
use xsense_core::loss::composite_grad_check;
use xsense_core::numerics::gradcheck::primitive_suite;
use xsense_core::numerics::OpKind;
use xsense_core::training::Mode;

#[derive(Parser)]
#[command(name = "xsense", version, about = "Cross-location representation transfer for activity recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every requested mode over all leave-one-subject-out folds.
    Run(RunArgs),
    /// Check analytic gradients of every differentiable op against finite differences.
    Gradcheck(GradcheckArgs),
    /// Re-emit report tables from the fold results stored in an output dir.
    Report(ReportArgs),
    /// Write the synthetic two-location dataset as CSV.
    Synth(SynthArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated subset of modes, e.g. `baseline,cfsr`.
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<Mode>>,
    /// Recompute folds that already have results.
    #[arg(long)]
    force: bool,
    #[arg(long, default_value_t = 1)]
    parallel_folds: usize,
    /// Assemble batches on the training thread.
    #[arg(long)]
    strict_determinism: bool,
    /// Root for relative output dirs.
    #[arg(long, env = OUTPUT_ROOT_ENV)]
    output_root: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt the backward pass of one op (negative control).
    #[arg(long, hide = true)]
    corrupt_op: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Output dir of a previous `run`.
    #[arg(long)]
    dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "json,csv,markdown")]
    formats: Vec<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Take generator parameters from this experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Report(a) => cmd_report(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_run(a: RunArgs) -> Result<bool> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let opts = RunOptions {
        modes: a.modes,
        force: a.force,
        parallel_folds: a.parallel_folds.max(1),
        strict_determinism: a.strict_determinism,
        output_root: a.output_root,
    };
    let summary = run_experiment(&cfg, &opts)?;
    for (mode, fold, err) in &summary.failures {
        eprintln!("{mode} fold {fold} failed: {err}");
    }
    println!("{}", render_markdown(&summary.report));
    println!("results in {}", summary.output_dir.display());
    Ok(summary.failures.is_empty())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<bool> {
    let corrupt = match &a.corrupt_op {
        Some(name) => Some(OpKind::from_name(name).with_context(|| format!("unknown op `{name}`"))?),
        None => None,
    };
    let mut reports = primitive_suite(a.seed, a.tol, corrupt);
    let covered: Vec<&str> = reports.iter().map(|r| r.op_name.as_str()).collect();
    let missing: Vec<&str> = OpKind::DIFFERENTIABLE.iter().map(|k| k.name()).filter(|n| !covered.contains(n)).collect();
    if !missing.is_empty() {
        bail!("ops without a gradient check: {}", missing.join(", "));
    }
    reports.push(composite_grad_check(a.seed, 1.0, a.tol));
    let mut ok = true;
    for r in &reports {
        println!("{r}");
        ok &= r.passed;
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", reports.len());
    Ok(ok)
}

fn cmd_report(a: ReportArgs) -> Result<bool> {
    let formats = a
        .formats
        .iter()
        .map(|f| match f.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => bail!("unknown format `{other}`"),
        })
        .collect::<Result<Vec<_>>>()?;
    let report = report_from_dir(&a.dir)?;
    write_reports(&a.dir, &report, &formats)?;
    println!("{}", render_markdown(&report));
    Ok(true)
}

fn cmd_synth(a: SynthArgs) -> Result<bool> {
    let mut p = match &a.config {
        Some(path) => ExperimentConfig::load(path)?.dataset.synthetic.unwrap_or_default(),
        None => SynthParams::default(),
    };
    if let Some(s) = a.seed {
        p.seed = s;
    }
    if let Some(n) = a.subjects {
        p.n_subjects = n;
    }
    if let Some(k) = a.classes {
        p.n_classes = k;
    }
    let out = synth_generate(&p);
    write_recordings(&a.out, &out.recordings, &p.activities())?;
    let samples: usize = out.recordings.iter().map(|r| r.len()).sum();
    println!("wrote {samples} samples of {} subjects to {}", p.n_subjects, a.out.display());
    Ok(true)
}
