use std::io::Read;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use organism::config::RunConfig;
use organism::data::{mnist_paths, read_idx_images, read_idx_labels, Split};
use organism::run::{self, RunReport};

/// Organism networks built from self-replicating particle networks.
///
/// Settings resolve as flags > --set > config file > defaults. The default
/// MNIST directory comes from ORGANISM_DATA_DIR, else `data/mnist`.
#[derive(Debug, Parser)]
#[command(name = "organism", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat TOML config file; unknown keys are rejected.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override any config key, e.g. `--set mnist_epochs=20`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Worker threads for self-training (0 = all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Run on a single worker thread.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Checkpoint for robustness, dropout-compare and resub-check.
    #[arg(long, global = true, value_name = "PATH")]
    checkpoint: Option<PathBuf>,

    #[arg(long, global = true, value_name = "DIR")]
    data_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Float addition with a Linear organism.
    ExpAdd,
    /// 15x15 MNIST classification with a Gelu organism.
    ExpMnist,
    /// Perturb SR particles of a checkpoint and count self-application steps.
    Robustness,
    /// Accuracy of the full organism, SR/F dropout and matched l1 pruning.
    DropoutCompare,
    /// Compare the organism forward with its re-substituted network.
    ResubCheck,
    /// Download the MNIST IDX files into the data directory.
    FetchMnist,
}

const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte.gz",
];

fn resolve(cli: &Cli) -> Result<RunConfig, String> {
    let mut table = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            text.parse::<toml::Table>().map_err(|e| format!("{}: {e}", path.display()))?
        }
        None => toml::Table::new(),
    };
    for kv in &cli.overrides {
        let (key, value) = kv.split_once('=').ok_or_else(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        let key = key.trim();
        // Bare words such as `linear` are taken as strings.
        let value = format!("v = {}", value.trim())
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.trim().to_string()));
        table.insert(key.to_string(), value);
    }
    let mut cfg = RunConfig::from_table(table).map_err(|e| e.to_string())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    if let Some(path) = &cli.checkpoint {
        cfg.checkpoint = Some(path.clone());
    }
    if let Some(dir) = &cli.data_dir {
        cfg.data_dir = dir.clone();
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn fetch_mnist(cfg: &RunConfig) -> Result<(), String> {
    std::fs::create_dir_all(&cfg.data_dir).map_err(|e| format!("{}: {e}", cfg.data_dir.display()))?;
    for name in MNIST_FILES {
        let dest = cfg.data_dir.join(name);
        if dest.exists() {
            eprintln!("{} exists, skipping", dest.display());
            continue;
        }
        let url = format!("{}/{name}", cfg.mnist_url.trim_end_matches('/'));
        eprintln!("fetching {url}");
        let mut bytes = Vec::new();
        ureq::get(&url)
            .call()
            .map_err(|e| format!("{url}: {e}"))?
            .into_body()
            .into_reader()
            .read_to_end(&mut bytes)
            .map_err(|e| format!("{url}: {e}"))?;
        let partial = dest.with_extension("part");
        std::fs::write(&partial, &bytes).map_err(|e| format!("{}: {e}", partial.display()))?;
        std::fs::rename(&partial, &dest).map_err(|e| format!("{}: {e}", dest.display()))?;
    }
    for split in [Split::Train, Split::Test] {
        let (images, labels) = mnist_paths(&cfg.data_dir, split);
        let (imgs, _, _) = read_idx_images(&images).map_err(|e| e.to_string())?;
        let labs = read_idx_labels(&labels).map_err(|e| e.to_string())?;
        if imgs.len() != labs.len() {
            return Err(format!("{split:?}: {} images but {} labels", imgs.len(), labs.len()));
        }
        eprintln!("{split:?}: {} samples", imgs.len());
    }
    Ok(())
}

fn print_report(report: &RunReport) {
    println!("{}", serde_json::to_string_pretty(&report.summary).unwrap_or_default());
    eprintln!("results in {}", report.out_dir.display());
}

fn execute(cli: &Cli) -> Result<bool, String> {
    let cfg = resolve(cli)?;
    let threads = if cfg.deterministic { 1 } else { cfg.threads };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| e.to_string())?;
    let run = |f: fn(&RunConfig) -> organism::Result<RunReport>| f(&cfg).map_err(|e| e.to_string());
    let report = match cli.command {
        Command::ExpAdd => run(run::run_exp_addition)?,
        Command::ExpMnist => run(run::run_exp_mnist)?,
        Command::Robustness => run(run::run_robustness)?,
        Command::DropoutCompare => run(run::run_dropout_compare)?,
        Command::ResubCheck => run(run::run_resub_check)?,
        Command::FetchMnist => {
            fetch_mnist(&cfg)?;
            return Ok(true);
        }
    };
    print_report(&report);
    Ok(report.completed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("run stopped early; partial results were kept");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
