//! `ew-embed`: joint embedding of two metric-measure spaces into a fixed
//! reference space, pairwise distance matrices, alignment scores and the
//! circle benchmark.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 solver
//! non-convergence (artifacts are still written).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ew_core::ew::EwInit;
use ew_core::Error;
use serde_json::json;

use ew_cli::commands::{self, CircleBench, Overrides};

#[derive(Debug, Parser)]
#[command(
    name = "ew-embed",
    version,
    about = "Embedded Wasserstein alignment of metric-measure spaces"
)]
struct Cli {
    /// Worker threads for the solvers (defaults to all cores).
    #[arg(long, global = true, env = "EW_EMBED_THREADS")]
    threads: Option<usize>,
    /// Output directory; overrides `output.dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for subsampling and synthetic inputs; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve EW_lambda for the two inputs and write plans, masses and plots.
    Embed {
        #[arg(long)]
        config: PathBuf,
    },
    /// Pairwise W2, GW or EW_lambda distances over a corpus.
    Distances {
        #[arg(long)]
        config: PathBuf,
    },
    /// Embed paired inputs and score the alignment (FOSCTTM, k-NN transfer).
    Eval {
        #[arg(long)]
        config: PathBuf,
    },
    /// EW_lambda^2 against exact EW^2 for von Mises measures on a circle.
    CircleBench {
        #[arg(long, default_value_t = 90)]
        bins: usize,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 1.0, 2.0, 4.0])]
        kappas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.2, 20.0])]
        lambdas: Vec<f64>,
        #[arg(long, default_value_t = 1e-3)]
        epsilon: f64,
        #[arg(long, default_value_t = ew_core::ew::DEFAULT_BCD_ITERS)]
        bcd_iters: usize,
    },
    /// Check a config and every file it references without solving.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn error_json(e: &Error) -> serde_json::Value {
    let mut v = json!({ "error": e.kind(), "message": e.to_string() });
    if let Error::Io { path, .. } | Error::Parse { path, .. } = e {
        v["path"] = json!(path);
    }
    v
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::NotConverged { .. } | Error::NumericalOverflow(_) => 3,
        _ => 2,
    }
}

fn report_error(e: &Error, out: Option<&Path>) -> ExitCode {
    let v = error_json(e);
    eprintln!("{v}");
    if let Some(dir) = out {
        if dir.is_dir() {
            let _ = std::fs::write(dir.join("error.json"), format!("{v:#}\n"));
        }
    }
    ExitCode::from(exit_code_for(e))
}

fn finish(result: Result<(bool, PathBuf), Error>, out: Option<&Path>) -> ExitCode {
    match result {
        Ok((true, dir)) => {
            println!("{}", json!({ "status": "ok", "out": dir.display().to_string() }));
            ExitCode::SUCCESS
        }
        Ok((false, dir)) => {
            eprintln!(
                "{}",
                json!({ "error": "SinkhornNotConverged", "message": "an inner Sinkhorn solve hit its iteration cap", "out": dir.display().to_string() })
            );
            ExitCode::from(3)
        }
        Err(e) => report_error(&e, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            return report_error(&Error::InvalidParameter("--threads must be positive".into()), None);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return report_error(&Error::InvalidParameter(format!("thread pool: {e}")), None);
        }
    }
    let overrides = Overrides {
        out: cli.out.clone(),
        seed: cli.seed,
    };
    // Where to leave error.json when a command fails after choosing its output.
    let out_for = |config: &Path| {
        commands::prepare(config, &overrides)
            .map(|(_, o)| o)
            .ok()
            .or_else(|| cli.out.clone())
    };
    match &cli.command {
        Command::Embed { config } => finish(commands::embed(config, &overrides), out_for(config).as_deref()),
        Command::Distances { config } => finish(commands::distances(config, &overrides), out_for(config).as_deref()),
        Command::Eval { config } => finish(commands::eval(config, &overrides), out_for(config).as_deref()),
        Command::CircleBench {
            bins,
            kappas,
            lambdas,
            epsilon,
            bcd_iters,
        } => {
            let params = CircleBench {
                bins: *bins,
                kappas: kappas.clone(),
                lambdas: lambdas.clone(),
                epsilon: *epsilon,
                bcd_iters: *bcd_iters,
                init: EwInit::Product,
            };
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("ew-output"));
            finish(commands::circle_bench(&params, &out), Some(&out))
        }
        Command::Validate { config } => match commands::validate(config, &overrides) {
            Ok(report) => {
                println!("{report}");
                ExitCode::SUCCESS
            }
            Err(e) => report_error(&e, None),
        },
    }
}
