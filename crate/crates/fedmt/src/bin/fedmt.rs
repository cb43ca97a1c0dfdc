//! Command-line front end: run one experiment, sweep an axis, or evaluate
//! the kernel checks for a config. Exit code 0 on success, 2 on a config
//! problem, 1 on a runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedmt::harness::{
    resolve_output_dir, run_experiment, run_id, run_ntk_checks, run_sweep, ExperimentConfig,
    SweepAxis, OUT_DIR_ENV,
};
use fedmt::Error;

#[derive(Parser)]
#[command(name = "fedmt", about = "Federated training across label spaces", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single experiment from a JSON config.
    Run {
        /// Path to the experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides FEDMT_OUT_DIR and the config).
        #[arg(long)]
        out: Option<String>,
    },
    /// Run one experiment per value of a sweep axis.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Axis to vary: n, xi, c, j, local_steps, batch.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long)]
        out: Option<String>,
    },
    /// Evaluate the kernel partition and noise checks for a config.
    NtkCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<String>,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 1;

fn fail(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    match err {
        Error::ConfigInvalid(_) => ExitCode::from(EXIT_CONFIG),
        _ => ExitCode::from(EXIT_RUNTIME),
    }
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))?;
    ExperimentConfig::from_json(&text)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let env_out = std::env::var(OUT_DIR_ENV).ok();
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out_root = resolve_output_dir(out.as_deref(), env_out.as_deref(), &cfg);
            match run_experiment(&cfg, &out_root) {
                Ok(store) => {
                    println!(
                        "run {} finished: final_test_acc={:.4} best_test_acc={:.4} artifacts={}",
                        store.run_id,
                        store.summary.final_test_acc,
                        store.summary.best_test_acc,
                        out_root.join(&store.run_id).display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Sweep { config, axis, values, out } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            let axis = match SweepAxis::parse(&axis) {
                Ok(a) => a,
                Err(e) => return fail(&e),
            };
            let out_root = resolve_output_dir(out.as_deref(), env_out.as_deref(), &cfg);
            match run_sweep(&cfg, axis, &values, &out_root) {
                Ok(entries) => {
                    let failures = entries.iter().filter(|e| e.outcome.is_err()).count();
                    for e in &entries {
                        match &e.outcome {
                            Ok(s) => println!(
                                "value {}: run {} final_test_acc={:.4}",
                                e.value, e.run_id, s.summary.final_test_acc
                            ),
                            Err(msg) => println!("value {}: failed: {msg}", e.value),
                        }
                    }
                    if entries.is_empty() {
                        println!("no values given; nothing to run");
                    } else {
                        println!(
                            "sweep finished: {}/{} succeeded, table at {}",
                            entries.len() - failures,
                            entries.len(),
                            out_root.join("sweep.csv").display()
                        );
                    }
                    if failures == entries.len() && !entries.is_empty() {
                        ExitCode::from(EXIT_RUNTIME)
                    } else {
                        ExitCode::SUCCESS
                    }
                }
                Err(e) => fail(&e),
            }
        }
        Command::NtkCheck { config, out } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            let dataset = match build_dataset_for_checks(&cfg) {
                Ok(d) => d,
                Err(e) => return fail(&e),
            };
            match run_ntk_checks(&cfg, &dataset) {
                Ok(report) => {
                    let text = serde_json::to_string_pretty(&report)
                        .expect("report serialization cannot fail");
                    let out_root = resolve_output_dir(out.as_deref(), env_out.as_deref(), &cfg);
                    let dir = out_root.join(run_id(&cfg));
                    if let Err(e) = std::fs::create_dir_all(&dir)
                        .and_then(|()| std::fs::write(dir.join("ntk_report.json"), &text))
                    {
                        return fail(&Error::from(e));
                    }
                    println!("{text}");
                    let all_pass = report.bound_checks.iter().all(|c| c.pass);
                    if all_pass {
                        ExitCode::SUCCESS
                    } else {
                        eprintln!("error: one or more kernel checks failed");
                        ExitCode::from(EXIT_RUNTIME)
                    }
                }
                Err(e) => fail(&e),
            }
        }
    }
}

fn build_dataset_for_checks(
    cfg: &ExperimentConfig,
) -> Result<fedmt::datagen::FederatedDataset, Error> {
    cfg.validate()?;
    match &cfg.task {
        fedmt::harness::TaskKind::GaussianClusters(spec) => {
            fedmt::datagen::gen_gaussian_clusters(spec)
        }
        fedmt::harness::TaskKind::SemgLike(spec) => fedmt::datagen::gen_semg_like(spec),
    }
}
