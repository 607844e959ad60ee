use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use ett_core::harness::{check, run, Arm, ExperimentConfig, RunOptions};
use ett_core::Error;

#[derive(Parser)]
#[command(name = "ett", about = "Train and evaluate task translators on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every arm for every seed and write reports.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run seeds 0..N instead of the configured list.
        #[arg(long)]
        seeds: Option<usize>,
        /// Run a single arm.
        #[arg(long)]
        arm: Option<String>,
        /// Only run the built-in invariant suite.
        #[arg(long)]
        check: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) => 2,
        Error::Divergence(_) => 3,
        Error::Io(_) => 4,
        _ => 1,
    }
}

fn kind(e: &Error) -> &'static str {
    match e.root() {
        Error::Config(_) => "config",
        Error::Divergence(_) => "divergence",
        Error::Io(_) => "io",
        _ => "internal",
    }
}

fn fail(e: &Error, out: Option<&PathBuf>) -> ExitCode {
    let code = exit_code(e);
    let record = json!({
        "error": kind(e),
        "message": e.to_string(),
        "exit_code": code,
    });
    eprintln!("{record}");
    if let Some(dir) = out {
        if std::fs::create_dir_all(dir).is_ok() {
            let _ = std::fs::write(dir.join("error.json"), format!("{record:#}\n"));
        }
    }
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let Command::Run {
        config,
        seeds,
        arm,
        check: check_only,
        out,
    } = Cli::parse().command;

    if check_only {
        let results = check::run_all();
        let mut ok = true;
        for r in &results {
            println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            ok &= r.passed;
        }
        return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
    }

    let Some(path) = config else {
        return fail(&Error::Config("--config is required unless --check is given".into()), out.as_ref());
    };
    let cfg = match ExperimentConfig::load(&path) {
        Ok(c) => c,
        Err(e) => return fail(&e, out.as_ref()),
    };
    let out_dir = out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    let arm = match arm.as_deref().map(Arm::parse).transpose() {
        Ok(a) => a,
        Err(e) => return fail(&e, Some(&out_dir)),
    };
    let opts = RunOptions {
        seeds,
        arm,
        out_dir: Some(out_dir.clone()),
        workers: None,
    };
    match run(&cfg, &opts) {
        Ok(outcome) => {
            for (arm, metrics) in &outcome.aggregate.arms {
                for (name, s) in metrics {
                    println!("{arm:<24} {name:<12} {:.4} ± {:.4}", s.mean, s.stddev);
                }
            }
            println!("reports written to {}", outcome.out_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e, Some(&out_dir)),
    }
}
