use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gear::io::commands::{summary_csv, token_counts_csv};
use gear::io::config::OUTPUT_DIR_VAR;
use gear::io::{cmd_ablate, cmd_analyze_tokens, cmd_reweight, cmd_sweep, cmd_train, RunConfig};
use gear::{Error, Result, Variant};

#[derive(Parser)]
#[command(name = "gear", version, about = "Segment-level advantage reweighting for GRPO")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    lambda_kl: Option<f64>,
    #[arg(long)]
    lambda_h: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Affine offset; defaults to 1 - alpha/2.
    #[arg(long)]
    offset: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Overrides {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load_or_default(self.config.as_deref())?;
        if let Some(v) = &self.variant {
            cfg.variant = v.parse::<Variant>()?;
        }
        if let Some(v) = self.lambda_kl {
            cfg.lambda_kl = v;
        }
        if let Some(v) = self.lambda_h {
            cfg.lambda_h = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if self.offset.is_some() {
            cfg.offset = self.offset;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Append per-token credit fields to a trace.
    Reweight {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Train one policy and write metrics and parameters.
    Train {
        /// Output directory.
        #[arg(long, env = OUTPUT_DIR_VAR)]
        out: Option<PathBuf>,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Compare every segmentation variant and plain GRPO over the configured seeds.
    Ablate {
        #[arg(long, env = OUTPUT_DIR_VAR)]
        out: Option<PathBuf>,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Train once per value of one hyperparameter.
    Sweep {
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, env = OUTPUT_DIR_VAR)]
        out: Option<PathBuf>,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Count high-divergence tokens in a trace.
    AnalyzeTokens {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        threshold: f64,
        #[arg(long, default_value_t = 20)]
        top: usize,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write_table(dir: &std::path::Path, name: &str, table: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    let path = dir.join(name);
    std::fs::write(&path, table).map_err(|e| Error::Io { path, source: e })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Reweight { trace, out, opts } => {
            let report = cmd_reweight(&trace, &opts.load()?, &out)?;
            println!(
                "reweighted {} groups, {} trajectories, {} policy tokens, {} segments",
                report.groups, report.trajectories, report.policy_tokens, report.segments
            );
        }
        Command::Train { out, opts } => {
            let mut cfg = opts.load()?;
            if out.is_some() {
                cfg.output_dir = out;
            }
            let report = cmd_train(&cfg)?;
            println!("metrics: {}", report.metrics_path.display());
            println!("params: {}", report.params_path.display());
            if let Some(p) = &report.trace_path {
                println!("trace: {}", p.display());
            }
            println!("final eval success: {}", report.outcome.final_eval_success);
        }
        Command::Ablate { out, opts } => {
            let mut cfg = opts.load()?;
            if out.is_some() {
                cfg.output_dir = out;
            }
            let table = summary_csv(&cmd_ablate(&cfg)?);
            write_table(&cfg.output_dir(), "ablation.csv", &table)?;
            print!("{table}");
        }
        Command::Sweep { param, values, out, opts } => {
            let mut cfg = opts.load()?;
            if out.is_some() {
                cfg.output_dir = out;
            }
            let table = summary_csv(&cmd_sweep(&cfg, &param, &values)?);
            write_table(&cfg.output_dir(), &format!("sweep_{param}.csv"), &table)?;
            print!("{table}");
        }
        Command::AnalyzeTokens { trace, threshold, top, out } => {
            let table = token_counts_csv(&cmd_analyze_tokens(&trace, threshold, top)?);
            match out {
                Some(path) => std::fs::write(&path, table).map_err(|e| Error::Io { path, source: e })?,
                None => print!("{table}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
