use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use fedembed::config::ExperimentConfig;
use fedembed::federation::Simulation;
use fedembed::metrics::{export_embeddings, RunReport, Timing};
use fedembed::{verify, FedError};

/// Personalized federated learning simulator.
#[derive(Parser)]
#[command(name = "fedembed", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for report.json and embeddings.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Simulate the clients of a round in parallel.
        #[arg(long)]
        parallel_clients: bool,
    },
    /// Run every config in a directory and collect a results table.
    Grid {
        config_dir: PathBuf,
        /// Base seed; overrides each config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Repetitions per config, with consecutive seeds.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value = "grid-out")]
        out: PathBuf,
        #[arg(long)]
        parallel_clients: bool,
    },
    /// Run the built-in property checks.
    Verify,
}

/// Failure classes mapped to exit codes 2 (configuration) and 1 (anything else).
enum Failure {
    Config(String),
    Run(String),
}

impl From<FedError> for Failure {
    fn from(e: FedError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Run(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            out,
            parallel_clients,
        } => run_one(&config, seed, out, parallel_clients).map(|dir| {
            println!("wrote {}", dir.display());
        }),
        Command::Grid {
            config_dir,
            seed,
            seeds,
            out,
            parallel_clients,
        } => run_grid(&config_dir, seed, seeds, &out, parallel_clients),
        Command::Verify => run_verify(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::from_file(path).map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Run(format!("i/o error on {}: {e}", path.display()))
}

/// Runs one configuration and writes its report and embedding export into `out`.
fn execute(cfg: ExperimentConfig, out: &Path, parallel: bool) -> Result<RunReport, Failure> {
    fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let clock = Instant::now();
    let sim = Simulation::new(cfg)?
        .with_parallel_clients(parallel)
        .run()?;
    let mut report = sim.report()?;
    let emb = out.join("embeddings.csv");
    export_embeddings(sim.users(), sim.behavior(), &emb)?;
    report.embeddings_file = Some("embeddings.csv".into());
    report.timing = Some(Timing {
        started_unix_secs: started,
        elapsed_secs: clock.elapsed().as_secs_f64(),
    });
    let path = out.join("report.json");
    fs::write(&path, report.to_json()?).map_err(|e| io_failure(&path, e))?;
    Ok(report)
}

fn run_one(
    config: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    parallel: bool,
) -> Result<PathBuf, Failure> {
    let cfg = load_config(config, seed)?;
    let dir = out
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", cfg.method.name(), cfg.seed)));
    let report = execute(cfg, &dir, parallel)?;
    println!(
        "{} seed {}: macro-F1 {:.4}, user-mean F1 {:.4}",
        report.method,
        report.seed,
        report.final_eval.f1.macro_f1,
        report.final_eval.f1.user_mean_f1
    );
    Ok(dir)
}

fn balance_label(cfg: &ExperimentConfig) -> Result<&'static str, Failure> {
    let spec = cfg.population_spec()?;
    let first = spec.proportions[0];
    Ok(
        if spec.proportions.iter().all(|&p| (p - first).abs() < 1e-12) {
            "balanced"
        } else {
            "imbalanced"
        },
    )
}

fn run_grid(
    dir: &Path,
    seed: Option<u64>,
    seeds: u64,
    out: &Path,
    parallel: bool,
) -> Result<(), Failure> {
    let entries = fs::read_dir(dir)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", dir.display())))?;
    let mut configs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    configs.sort();
    if configs.is_empty() {
        return Err(Failure::Config(format!(
            "no .toml configs in {}",
            dir.display()
        )));
    }
    // Validate everything before the first run starts.
    let mut loaded = Vec::new();
    let mut problems = Vec::new();
    for path in &configs {
        match load_config(path, seed) {
            Ok(cfg) => loaded.push((path, cfg)),
            Err(Failure::Config(m) | Failure::Run(m)) => {
                problems.push(format!("{}: {m}", path.display()))
            }
        }
    }
    if !problems.is_empty() {
        return Err(Failure::Config(problems.join("\n")));
    }
    fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    let table = out.join("results.csv");
    let mut writer = csv::Writer::from_path(&table)
        .map_err(|e| Failure::Run(format!("{}: {e}", table.display())))?;
    let csv_err = |e: csv::Error| Failure::Run(format!("{}: {e}", table.display()));
    writer
        .write_record([
            "config",
            "method",
            "privacy",
            "population",
            "seed",
            "macro_f1",
            "per_subpop_f1",
        ])
        .map_err(csv_err)?;
    for (path, base) in loaded {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        for rep in 0..seeds {
            let mut cfg = base.clone();
            cfg.seed = base.seed + rep;
            let privacy = if cfg.privacy.enabled { "dp" } else { "none" };
            let balance = balance_label(&cfg)?;
            let run_dir = out.join(format!("{stem}-seed{}", cfg.seed));
            let report = execute(cfg, &run_dir, parallel)?;
            let f1 = &report.final_eval.f1;
            let per: Vec<String> = f1
                .per_subpop
                .iter()
                .map(|v| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}")))
                .collect();
            println!("{stem} seed {}: macro-F1 {:.4}", report.seed, f1.macro_f1);
            writer
                .write_record([
                    stem.as_str(),
                    report.method.as_str(),
                    privacy,
                    balance,
                    &report.seed.to_string(),
                    &format!("{:.6}", f1.macro_f1),
                    &per.join(";"),
                ])
                .map_err(csv_err)?;
            writer.flush().map_err(|e| io_failure(&table, e))?;
        }
    }
    println!("wrote {}", table.display());
    Ok(())
}

fn run_verify() -> Result<(), Failure> {
    let clock = Instant::now();
    let outcomes = verify::run_all();
    for o in &outcomes {
        println!("{o}");
    }
    println!(
        "{} checks in {:.1}s",
        outcomes.len(),
        clock.elapsed().as_secs_f64()
    );
    if verify::all_passed(&outcomes) {
        Ok(())
    } else {
        Err(Failure::Run("property checks failed".into()))
    }
}
