use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use gatelab::config::{sanitize, RunConfig, Sweep};
use gatelab::experiment::{self, RunOptions, RunResult};
use gatelab::LabError;

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_INCONSISTENT: u8 = 3;

#[derive(Parser)]
#[command(name = "gatelab", version, about = "Prompt-gating experiments on a frozen toy encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunFlags {
    /// Replace the configured seed list (repeatable)
    #[arg(long = "seed-override", value_name = "SEED")]
    seed_override: Vec<u64>,

    /// Output directory; defaults to `$GATELAB_OUT/<name>` or `runs/<name>`
    #[arg(long)]
    out: Option<PathBuf>,

    /// Worker threads for seeds and sweep cells
    #[arg(long, default_value_t = 1)]
    jobs: usize,

    /// Record every N-th training step in the trace
    #[arg(long = "record-every", value_name = "N")]
    record_every: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config and write traces, results and a report
    Run {
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Run the Cartesian product of a sweep file and tabulate the cells
    Sweep {
        sweep: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Recompute metrics from traces and check their embedded verdicts
    Diagnose {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
    },
    /// Regenerate report.md of a finished run
    Report { dir: PathBuf },
}

fn apply_flags(cfg: &RunConfig, flags: &RunFlags) -> gatelab::Result<RunConfig> {
    let mut pairs = Vec::new();
    if !flags.seed_override.is_empty() {
        pairs.push(("run.seeds", serde_json::json!(flags.seed_override)));
    }
    if let Some(n) = flags.record_every {
        pairs.push(("run.record_every", serde_json::json!(n)));
    }
    let cfg = cfg.with_overrides(pairs)?;
    cfg.validate()?;
    Ok(cfg)
}

fn default_root() -> PathBuf {
    std::env::var_os("GATELAB_OUT").map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn out_dir(flags: &RunFlags, configured: Option<&Path>, name: &str) -> PathBuf {
    flags
        .out
        .clone()
        .or_else(|| configured.map(Path::to_path_buf))
        .unwrap_or_else(|| default_root().join(sanitize(name)))
}

fn print_result(r: &RunResult) {
    for s in &r.seeds {
        let verdict = s.verdict.map_or("n/a", |v| v.as_str());
        let h = s.h_mean.map_or_else(|| "n/a".into(), |h| format!("{h:.2}"));
        println!(
            "seed {:>4}  base {:6.2}  novel {:6.2}  H {:>6}  verdict {verdict}",
            s.seed, s.base_acc, s.novel_acc, h
        );
    }
    let h = r.h_mean.map_or_else(|| "n/a".into(), |h| format!("{h:.2}"));
    println!("mean       base {:6.2}  novel {:6.2}  H {h:>6}", r.mean_base, r.mean_novel);
}

fn execute(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { config, flags } => {
            let cfg = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let cfg = apply_flags(&cfg, &flags)?;
            let dir = out_dir(&flags, cfg.run.output_dir.as_deref(), &cfg.run.name);
            let result = experiment::run(
                &cfg,
                &RunOptions {
                    out_dir: dir.clone(),
                    jobs: flags.jobs,
                },
            )?;
            print_result(&result);
            println!("artifacts in {}", dir.display());
        }
        Command::Sweep { sweep, flags } => {
            let mut spec = Sweep::load(&sweep).with_context(|| format!("loading {}", sweep.display()))?;
            for (_, cfg) in &mut spec.cells {
                *cfg = apply_flags(cfg, &flags)?;
            }
            let dir = out_dir(&flags, None, &spec.name);
            let rows = experiment::sweep(
                &spec,
                &RunOptions {
                    out_dir: dir.clone(),
                    jobs: flags.jobs,
                },
            )?;
            let (_, md) = experiment::summary_tables(&rows)?;
            print!("{md}");
            println!("artifacts in {}", dir.display());
        }
        Command::Diagnose { traces } => {
            let reports = experiment::diagnose(&traces)?;
            let mut consistent = true;
            for r in &reports {
                let verdict = r.recomputed.as_ref().map_or("n/a", |v| v.verdict.as_str());
                let gap = r.gap.map_or_else(|| "n/a".into(), |g| format!("{:.3}", g.mean));
                let status = if r.consistent { "ok" } else { "INCONSISTENT" };
                println!(
                    "{}: {} steps, gap {gap}, verdict {verdict} [{status}]",
                    r.trace.display(),
                    r.steps
                );
                consistent &= r.consistent;
            }
            if !consistent {
                return Ok(ExitCode::from(EXIT_INCONSISTENT));
            }
        }
        Command::Report { dir } => {
            print!("{}", experiment::report(&dir)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            // Configuration problems and every other failure share code 1.
            match err.downcast_ref::<LabError>() {
                Some(e) if e.is_numerical() => ExitCode::from(EXIT_NUMERICAL),
                _ => ExitCode::from(EXIT_CONFIG),
            }
        }
    }
}
