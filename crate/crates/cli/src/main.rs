use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use manl::config::{ExperimentConfig, ExperimentKind};
use manl::run::run_experiment;
use manl::summarize::summarize;

#[derive(Parser)]
#[command(name = "manl", version, about = "Two-species annihilation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads (default: MANL_THREADS, else all cores).
        #[arg(long)]
        threads: Option<usize>,
        /// `key.path=value`, value read as JSON or else as a string. Repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Suppress progress lines on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Print the consolidated report of a results directory.
    Summarize { dir: PathBuf },
    /// Run the deterministic self-test suite with default settings.
    Selftest {
        #[arg(long, default_value = "results/selftest")]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn execute(cfg: &ExperimentConfig, threads: Option<usize>, quiet: bool) -> anyhow::Result<bool> {
    manl::init_threads(threads)?;
    let start = Instant::now();
    let mut progress = |msg: &str| {
        if !quiet {
            eprintln!("[{:>7.1}s] {msg}", start.elapsed().as_secs_f64());
        }
    };
    let res = run_experiment(cfg, &mut progress)?;
    for c in &res.outcome.checks {
        println!(
            "criterion {:>2} {}  {}  value {:.6e} rule {}",
            c.criterion,
            if c.passed { "PASS" } else { "FAIL" },
            c.label,
            c.value,
            c.rule
        );
    }
    println!("outputs in {}", res.dir.display());
    Ok(res.passed())
}

fn finish(r: anyhow::Result<bool>) -> ExitCode {
    match r {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, threads, overrides, quiet } => {
            finish(ExperimentConfig::load(&config, &overrides).and_then(|cfg| execute(&cfg, threads, quiet)))
        }
        Command::Selftest { out, threads } => {
            let mut cfg = ExperimentConfig::default_for(ExperimentKind::Selftest);
            cfg.outputs = out;
            finish(execute(&cfg, threads, false))
        }
        Command::Summarize { dir } => match summarize(&dir) {
            Ok(s) => {
                for w in &s.warnings {
                    eprintln!("warning: {w}");
                }
                print!("{}", s.text);
                ExitCode::from(s.exit_code() as u8)
            }
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}
