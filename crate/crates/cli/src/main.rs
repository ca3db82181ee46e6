use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use scalefl::compare::{compare_on, print_arch};
use scalefl::config::{parse_config, ExperimentConfig};
use scalefl::data::generate;
use scalefl::fed::{run_experiment, Federation, RunOutput};
use scalefl::params::{read_tensors, tensor_checksum};
use scalefl::selftest::run_selftest;
use scalefl::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_SELFTEST: u8 = 3;

#[derive(Parser)]
#[command(name = "scalefl", version, about = "Federated learning across clients with different image sizes and category counts")]
struct Cli {
    /// Experiment configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override the training seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for local updates (0 = all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one method and write metrics, gap report and checkpoints.
    Run,
    /// Run every configured method over the configured repeats and tabulate accuracies.
    Compare,
    /// Print the local and global architectures of the configured groups.
    Arch,
    /// Print a checkpoint's tensors, or the fully resolved configuration when no file is given.
    Dump {
        /// Checkpoint file (`.sfl`).
        file: Option<PathBuf>,
    },
    /// Check the reference architecture tables and the aggregation oracles.
    Selftest,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let path = cli.config.as_ref().ok_or_else(|| Failure::Config("--config PATH is required".into()))?;
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let mut config = parse_config(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    if let Some(seed) = cli.seed {
        config.federation.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output.dir = out.clone();
    }
    if let Some(threads) = cli.threads {
        config.federation.threads = threads;
    }
    Ok(config)
}

fn write(path: &Path, body: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, body).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let config = load_config(cli)?;
    let dir = config.output.dir.clone();
    write(&dir.join("config.txt"), &config.render())?;
    let data = Arc::new(generate(&config.data)?);
    let mut fed = Federation::new(config.federation.clone(), &config.design, data)?;
    let out = RunOutput {
        dir: dir.clone(),
        checkpoints: config.output.checkpoints,
    };
    let report = run_experiment(&mut fed, Some(&out))?;
    println!("method {} after {} rounds", report.method, report.reports.len());
    for e in &report.final_eval {
        println!("  {:<8} test accuracy {:.4}  test loss {:.4}", e.group.to_string(), e.test_accuracy, e.test_loss);
    }
    println!("  mean     test accuracy {:.4}", report.mean_accuracy());
    println!("wrote {}", dir.display());
    Ok(())
}

fn compare(cli: &Cli) -> Result<(), Failure> {
    let config = load_config(cli)?;
    let dir = config.output.dir.clone();
    write(&dir.join("config.txt"), &config.render())?;
    let data = Arc::new(generate(&config.data)?);
    let table = compare_on(&config, data, Some(&dir))?;
    print!("{}", table.render());
    println!("dataset checksum {}", table.dataset_checksum);
    println!("wrote {}", dir.display());
    if table.rows.iter().all(|r| r.cells.iter().all(Option::is_none)) {
        return Err(Failure::Runtime("every run failed".into()));
    }
    Ok(())
}

fn dump(cli: &Cli, file: Option<&Path>) -> Result<(), Failure> {
    let Some(file) = file else {
        print!("{}", load_config(cli)?.render());
        return Ok(());
    };
    let bytes = fs::read(file).map_err(|e| Failure::Runtime(format!("{}: {e}", file.display())))?;
    let tensors = read_tensors(&bytes)?;
    println!("{}: {} tensors", file.display(), tensors.len());
    for (name, t) in &tensors {
        let d = t.data();
        let min = d.iter().copied().fold(f64::INFINITY, f64::min);
        let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        println!("{name:<24} {:<18} sha256:{} min {min:.4} max {max:.4} mean {mean:.4}", format!("{:?}", t.dims()), tensor_checksum(t));
    }
    Ok(())
}

fn selftest() -> ExitCode {
    let checks = run_selftest();
    for c in &checks {
        println!("[{}] {} ({} ms): {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.millis, c.detail);
    }
    if checks.iter().all(|c| c.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_SELFTEST)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Run => run(&cli),
        Command::Compare => compare(&cli),
        Command::Arch => load_config(&cli).and_then(|c| Ok(print_arch(&c)?)).map(|text| print!("{text}")),
        Command::Dump { file } => dump(&cli, file.as_deref()),
        Command::Selftest => return selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
