use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use gpnmpc::pipeline::{
    self, cmd_backoff, cmd_evaluate, cmd_fit, cmd_generate, load_backoffs, load_model,
    summary_to_csv, variant_config, ExperimentConfig, SummaryRow,
};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "gpnmpc",
    about = "Back-off NMPC with a Gaussian-process plant model: dataset generation, \
             model fitting, Monte-Carlo constraint back-offs, and closed-loop evaluation"
)]
struct Cli {
    /// JSON experiment configuration; omitted keys fall back to the
    /// case-study defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dataset / Monte-Carlo seed, overrides the config value
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for Monte-Carlo sampling
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Monte-Carlo budget preset
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,

    /// Exit zero even when the back-off bisection did not converge
    #[arg(long, global = true)]
    allow_nonconverged: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Desk,
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a training dataset and write dataset.csv + metadata
    Generate,
    /// Fit the GP state-space model from dataset.csv and write model.json
    Fit,
    /// Compute constraint back-offs via Monte-Carlo bisection
    Backoff,
    /// Run the controller closed-loop against the simulated plant
    Evaluate,
    /// Full pipeline for a named study variant
    Reproduce {
        /// One of gp50, gp60, gp100, gp50-learning, gp50-sd, gp50-nsd
        variant: String,
    },
}

fn build_config(cli: &Cli, base: Option<ExperimentConfig>) -> Result<ExperimentConfig> {
    let mut config = match (&cli.config, base) {
        (Some(path), _) => {
            ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?
        }
        (None, Some(base)) => base,
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(profile) = cli.profile {
        config.apply_profile(match profile {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })?;
    }
    if let Some(seed) = cli.seed {
        config.dataset.seed = seed;
    }
    if let Some(workers) = cli.workers {
        config.workers = workers;
    }
    Ok(config)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Generate => {
            let config = build_config(&cli, None)?;
            let (z, _) = cmd_generate(&config)?;
            println!(
                "wrote {} rows to {}",
                z.nrows(),
                config.output_dir.join("dataset.csv").display()
            );
        }
        Command::Fit => {
            let config = build_config(&cli, None)?;
            let (gpss, reports) = cmd_fit(&config)?;
            for (i, (gp, report)) in gpss.gps().iter().zip(&reports).enumerate() {
                let psi = gp.psi();
                println!(
                    "output {}: nll = {:.6}, zeta = {:.4}, lambda = {:?}, sigma_nu = {:.6}",
                    i + 1,
                    report.nll,
                    psi.log_zeta.exp(),
                    psi.log_lambda.iter().map(|l| l.exp()).collect::<Vec<_>>(),
                    psi.log_sigma_nu.exp(),
                );
            }
            println!("wrote {}", config.output_dir.join("model.json").display());
        }
        Command::Backoff => {
            let config = build_config(&cli, None)?;
            let gpss = load_model(&config)?;
            let report = cmd_backoff(&config, &gpss)?;
            for it in &report.iterations {
                println!(
                    "iteration {:2}: gamma = {:.4}, beta_hat = {:.4}, beta_lb = {:.4}",
                    it.iteration, it.gamma, it.beta_hat, it.beta_lb
                );
            }
            println!(
                "converged = {}, no_sign_change = {}, beta_hat = {:.4}, beta_lb = {:.4}",
                report.converged, report.no_sign_change, report.beta_hat, report.beta_lb
            );
            if !report.converged && !cli.allow_nonconverged {
                bail!("back-off bisection did not converge (rerun with --allow-nonconverged to accept)");
            }
        }
        Command::Evaluate => {
            let config = build_config(&cli, None)?;
            let gpss = load_model(&config)?;
            let artifact = load_backoffs(&config)?;
            let outcome = cmd_evaluate(&config, &gpss, &artifact.report.table, "custom")?;
            for summary in &outcome.summaries {
                println!(
                    "{}: violation fraction = {:.3}, objective = {:.4} +- {:.4} ({} runs, {} failed)",
                    summary.variant,
                    summary.violation_fraction,
                    summary.mean_objective,
                    summary.std_objective,
                    summary.n_runs,
                    summary.n_failed,
                );
            }
        }
        Command::Reproduce { variant } => {
            let config = build_config(&cli, Some(variant_config(variant)?))?;
            let row = pipeline::cmd_reproduce(&config, variant)?;
            print_summary(&row)?;
            if row.beta_lb < 1.0 - config.chance.epsilon && !cli.allow_nonconverged {
                let report = load_backoffs(&config)?;
                if !report.converged {
                    bail!("back-off bisection did not converge for {variant}");
                }
            }
        }
    }
    Ok(())
}

fn print_summary(row: &SummaryRow) -> Result<()> {
    let mut buf = Vec::new();
    summary_to_csv(std::slice::from_ref(row), &mut buf)?;
    print!("{}", String::from_utf8(buf)?);
    Ok(())
}
