use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use shmpc::experiment::config::PRESETS;
use shmpc::experiment::simulate::{initial_scenarios, read_plans, validate_plans, write_outputs, write_validation_csv};
use shmpc::experiment::sweep::{sensitivity_sweep, write_sweep_csv, SweepParameter};
use shmpc::experiment::toy::{toy_example, ToyMode};
use shmpc::experiment::{run_experiment, ExperimentConfig, SummaryTable};
use shmpc::planner::ConstraintMethod;
use shmpc::risk::RiskConfig;

#[derive(Parser)]
#[command(name = "shmpc", version, about = "Scenario-based MPC with certified collision risk")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Minimal sample size and the eps(n) table as CSV.
    SampleSize {
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        beta: f64,
        /// Support limit before removal.
        #[arg(long)]
        support: usize,
        /// Scenarios that may be removed; raises the support limit by the same amount.
        #[arg(long, default_value_t = 0)]
        removal: usize,
    },
    /// Closed-loop runs with Monte Carlo validation of the stored plans.
    Simulate {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        mc: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Method::Scenario)]
        method: Method,
        /// Per-stage risk of the Gaussian baseline.
        #[arg(long, default_value_t = 0.0025)]
        epsilon_k: f64,
        /// Write the scenarios of the first control step as CSV and exit.
        #[arg(long, value_name = "FILE")]
        dump_samples: Option<PathBuf>,
    },
    /// Re-estimates the collision probability of stored plans.
    Validate {
        /// Directory holding plans.jsonl.
        #[arg(long)]
        plans: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        mc: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV; defaults to validation.csv next to the plans.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeats an experiment over values of one parameter.
    Sweep {
        #[arg(long)]
        param: SweepParameter,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        mc: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prints a built-in scene as an editable TOML experiment file.
    Config {
        #[arg(long)]
        preset: String,
    },
    /// The one-dimensional illustrating example.
    Toy {
        #[arg(long, value_parser = parse_toy_mode)]
        mode: ToyMode,
        /// Sample sizes, or removal budgets for the removal study.
        #[arg(long, value_delimiter = ',')]
        range: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct SceneArgs {
    /// Experiment file in TOML.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in scene: static, gaussian-4, gaussian-8 or gmm-8.
    #[arg(long)]
    preset: Option<String>,
}

impl SceneArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        Ok(match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            (None, Some(name)) => ExperimentConfig::preset(name)?,
            (None, None) => bail!("either --config or --preset is required (presets: {})", PRESETS.join(", ")),
        })
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Scenario,
    Gaussian,
}

fn parse_toy_mode(s: &str) -> std::result::Result<ToyMode, String> {
    s.parse().map_err(|e: shmpc::Error| e.to_string())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        // a closed stdout, e.g. piping into `head`, is not an error
        Err(e) if e.chain().any(|c| c.downcast_ref::<io::Error>().is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe)) => {
            Ok(())
        }
        r => r,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::SampleSize { epsilon, beta, support, removal } => sample_size(epsilon, beta, support, removal),
        Command::Simulate { scene, seed, reps, mc, out, method, epsilon_k, dump_samples } => {
            let mut cfg = scene.load()?;
            override_config(&mut cfg, seed, reps, mc);
            if let Method::Gaussian = method {
                cfg = cfg.with_method(ConstraintMethod::Gaussian { epsilon_k });
            }
            cfg.validate()?;
            if let Some(path) = dump_samples {
                initial_scenarios(&cfg, 0)?.write_csv(BufWriter::new(File::create(&path)?))?;
                info!("wrote {} scenarios to {}", cfg.planner.risk.sample_size, path.display());
                return Ok(());
            }
            let dir = out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| Path::new("out").join(&cfg.name));
            let output = run_experiment(&cfg)?;
            write_outputs(&output, &dir)?;
            info!("wrote results to {}", dir.display());
            print_summaries(std::slice::from_ref(&output.summary))
        }
        Command::Validate { plans, mc, seed, out } => validate(&plans, mc, seed, out),
        Command::Sweep { param, values, scene, reps, mc, out } => {
            let mut base = scene.load()?;
            override_config(&mut base, None, reps, mc);
            let rows = sensitivity_sweep(param, &values, &base)?;
            let path = out.unwrap_or_else(|| PathBuf::from(format!("sweep-{}.csv", base.name)));
            write_sweep_csv(&rows, &path)?;
            info!("wrote {}", path.display());
            let summaries: Vec<SummaryTable> = rows.into_iter().map(|r| r.summary).collect();
            print_summaries(&summaries)
        }
        Command::Config { preset } => {
            print!("{}", ExperimentConfig::preset(&preset)?.to_toml_string()?);
            Ok(())
        }
        Command::Toy { mode, range, seed, out } => {
            let range = if range.is_empty() { mode.default_range() } else { range };
            let report = toy_example(mode, &range, seed)?;
            match out {
                Some(path) => report.write_csv(BufWriter::new(File::create(&path)?))?,
                None => report.write_csv(io::stdout().lock())?,
            }
            Ok(())
        }
    }
}

fn override_config(cfg: &mut ExperimentConfig, seed: Option<u64>, reps: Option<usize>, mc: Option<usize>) {
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(reps) = reps {
        cfg.repetitions = reps;
    }
    if let Some(mc) = mc {
        cfg.mc_samples = mc;
    }
}

fn sample_size(epsilon: f64, beta: f64, support: usize, removal: usize) -> Result<()> {
    let risk = RiskConfig::with_removal_allowance(epsilon, beta, support, removal)?;
    let mut out = io::stdout().lock();
    writeln!(out, "# sample_size {}", risk.sample_size)?;
    writeln!(out, "n,epsilon_n")?;
    for (n, e) in risk.epsilon_table() {
        writeln!(out, "{n},{e}")?;
    }
    Ok(())
}

fn validate(dir: &Path, mc: usize, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let file = dir.join("plans.jsonl");
    let plans = read_plans(&file).with_context(|| format!("reading {}", file.display()))?;
    let validations = validate_plans(&plans, mc, seed)?;
    let path = out.unwrap_or_else(|| dir.join("validation.csv"));
    write_validation_csv(&validations, &path)?;
    let above = validations
        .iter()
        .filter(|v| v.estimate.joint > v.epsilon_bound + 3.0 * v.estimate.joint_std_error)
        .count();
    let max = validations.iter().map(|v| v.estimate.joint).fold(0.0, f64::max);
    println!("plans {} max_joint_cp {max} above_certificate {above}", validations.len());
    info!("wrote {}", path.display());
    Ok(())
}

fn print_summaries(rows: &[SummaryTable]) -> Result<()> {
    let mut out = io::stdout().lock();
    writeln!(out, "{}", SummaryTable::HEADER.join(","))?;
    for r in rows {
        writeln!(out, "{}", r.fields().join(","))?;
    }
    Ok(())
}
