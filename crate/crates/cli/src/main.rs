use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hibcg::config::{bundled, RunConfig};
use hibcg::harness::{self, SeedOutcome};
use hibcg::Error;

/// Group-aligned information bottlenecks for coordination graphs.
#[derive(Parser)]
#[command(name = "hibcg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Recompute golden worked-example values and compare them.
    Verify {
        #[command(subcommand)]
        target: VerifyTarget,
    },
    /// Run randomized property suites.
    Props {
        /// prop1..prop5 or "all".
        #[arg(default_value = "all")]
        suite: String,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the JSON report here as well.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train every seed of a config (file path or bundled name).
    Train {
        config: String,
        /// Concurrent seeds; defaults to the available cores.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Train the config once per sigma_intra/sigma_cross ratio.
    SweepSigma {
        config: String,
        /// Comma-separated ratios, e.g. 0.1,1,10.
        ratios: String,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Water-fill a budget across a channel file and print the allocation.
    Allocate { channels: PathBuf, budget: f64 },
}

#[derive(Subcommand)]
enum VerifyTarget {
    /// The ten-agent bound example and the five-agent block layout.
    AppendixE {
        /// Self-test: perturb the quoted value of this quantity.
        #[arg(long)]
        corrupt: Option<String>,
    },
}

/// 0 all checks pass, 1 a check failed, 2 bad input.
fn exit_for(err: &Error) -> ExitCode {
    match err {
        Error::Config(_) | Error::Parse { .. } | Error::Io(_) | Error::Contract(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn load_config(arg: &str) -> hibcg::Result<RunConfig> {
    match bundled(arg) {
        Some(text) if !Path::new(arg).exists() => RunConfig::parse(text),
        _ => RunConfig::load(Path::new(arg)),
    }
}

fn check(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn run(cmd: Command) -> hibcg::Result<ExitCode> {
    match cmd {
        Command::Verify { target: VerifyTarget::AppendixE { corrupt } } => {
            let report = harness::verify_golden(corrupt.as_deref())?;
            print!("{}", report.table());
            if !report.passed() {
                eprintln!("mismatched: {}", report.failures().join(", "));
            }
            Ok(check(report.passed()))
        }
        Command::Props { suite, trials, seed, json } => {
            let reports = harness::run_props(&suite, trials, seed)?;
            for r in &reports {
                for p in &r.properties {
                    let status = if p.passed() { "pass" } else { "FAIL" };
                    let worst = p.worst.map_or("-".to_string(), |w| format!("{w:.3e}"));
                    println!("{:<6} {:<40} {status} failures={}/{} worst={worst} tol={:.1e}", r.suite, p.name, p.failures, p.trials, p.tolerance);
                    if let Some(c) = &p.counterexample {
                        println!("       counterexample: {c}");
                    }
                }
            }
            if let Some(path) = json {
                std::fs::write(path, serde_json::to_string_pretty(&reports)?)?;
            }
            Ok(check(reports.iter().all(|r| r.passed)))
        }
        Command::Train { config, workers } => {
            let cfg = load_config(&config)?;
            let root = harness::output_root(&cfg);
            let report = harness::run_training(&cfg, &root, workers.unwrap_or_else(harness::default_workers))?;
            for (seed, outcome) in &report.seeds {
                match outcome {
                    SeedOutcome::Ok { summary: s } => println!(
                        "seed {seed}: eval_return={:.3} intra_kl/edge={:.4} cross_kl/edge={:.4}",
                        s.tail_eval_return, s.tail_aib_intra_per_edge, s.tail_aib_cross_per_edge
                    ),
                    SeedOutcome::Failed { error } => println!("seed {seed}: FAILED {error}"),
                }
            }
            println!("outputs in {}", report.dir.display());
            Ok(check(report.all_ok()))
        }
        Command::SweepSigma { config, ratios, workers } => {
            let cfg = load_config(&config)?;
            let ratios = harness::parse_ratios(&ratios)?;
            let root = harness::output_root(&cfg);
            let sweep = harness::run_sweep(&cfg, &ratios, &root, workers.unwrap_or_else(harness::default_workers))?;
            print!("{}", sweep.csv);
            eprintln!("table written to {}", sweep.csv_path.display());
            Ok(check(sweep.runs.iter().all(|(_, r)| r.all_ok())))
        }
        Command::Allocate { channels, budget } => {
            let text = std::fs::read_to_string(&channels)?;
            let report = harness::run_allocate(&text, budget)?;
            print!("{}", report.csv);
            for v in &report.kkt.violations {
                eprintln!("kkt violation: {v}");
            }
            Ok(check(report.kkt.ok))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_for(&e)
        }
    }
}
