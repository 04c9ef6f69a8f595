use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use moc_her::trainer::{parse_kv_text, run_experiment, tail_mean, ExperimentConfig};

#[derive(Parser)]
#[command(name = "moc-her", about = "Option-critic with hindsight relabeling on point-mass goal tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent and write metrics.csv, params.txt and config.resolved.txt.
    Train(TrainArgs),
}

#[derive(Parser)]
struct TrainArgs {
    /// point-reach or point-push
    #[arg(long)]
    env: Option<String>,
    /// moc or oc
    #[arg(long)]
    algo: Option<String>,
    /// none, her or 2her
    #[arg(long = "her")]
    hindsight: Option<String>,
    #[arg(long)]
    options: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Environment steps per iteration; a multiple of the 50-step horizon.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Flat `key = value` file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long = "k-decay")]
    k_decay: Option<String>,
    #[arg(long)]
    cr: Option<f64>,
    #[arg(long = "2her-disable")]
    two_her_disable: Option<String>,
    #[arg(long)]
    entropy: Option<f64>,
    /// Learning rate for all four parameter groups.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    minibatch: Option<usize>,
    /// Update only the executed option (plain option-critic).
    #[arg(long = "single-option")]
    single_option: bool,
}

impl TrainArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut s: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                s.push((k.to_string(), v));
            }
        };
        put("env", self.env.clone());
        put("algo", self.algo.clone());
        put("hindsight", self.hindsight.clone());
        put("n_options", self.options.map(|v| v.to_string()));
        put("n_iterations", self.iterations.map(|v| v.to_string()));
        put("steps_per_iteration", self.steps.map(|v| v.to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        put("k0", self.k.map(|v| v.to_string()));
        put("k_decay_interval", self.k_decay.clone());
        put("c_r", self.cr.map(|v| v.to_string()));
        put("disable_2her_at", self.two_her_disable.clone());
        put("entropy_coef", self.entropy.map(|v| v.to_string()));
        if let Some(lr) = self.lr {
            for key in ["lr_theta", "lr_zeta", "lr_nu", "lr_z"] {
                put(key, Some(lr.to_string()));
            }
        }
        put("minibatch_size", self.minibatch.map(|v| v.to_string()));
        if self.single_option {
            put("algo", Some("oc".into()));
        }
        put("output", Some(self.out.display().to_string()));
        s
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let mut settings = Vec::new();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        settings.extend(parse_kv_text(&text)?);
    }
    settings.extend(args.overrides());
    let config = ExperimentConfig::resolve(&settings)?;
    config.validate()?;
    let out = run_experiment(&config)?;
    let success: Vec<f64> = out.metrics.iter().map(|m| m.success_rate).collect();
    println!(
        "{} {} {} options={} seed={}: final-20 success {:.3}",
        config.env,
        config.algo,
        config.hindsight,
        config.n_options,
        config.seed,
        tail_mean(&success, 20)
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => train(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
