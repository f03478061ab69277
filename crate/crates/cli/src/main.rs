use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moec_fusion::experiment::{run_ablation, run_experiment, Checkpoint, ExperimentConfig};
use moec_fusion::pipeline::{flops_estimate, gradient_check, ConnectorKind};
use moec_fusion::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERIC: u8 = 2;
const EXIT_IO: u8 = 3;

/// Mixture-of-experts connector and group-attention experiments on
/// synthetic encoder streams.
#[derive(Parser, Debug)]
#[command(name = "moec-fusion", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one configuration, writing metrics and a checkpoint.
    Run {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sweep the `[ablation]` axes of the config.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic and finite-difference gradients.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Print the multiply-add estimate per sample.
    Flops {
        #[command(flatten)]
        common: Common,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Summarise a checkpoint file.
    InspectCheckpoint { path: PathBuf },
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment file; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Output directory; overrides `run.out_dir`.
    #[arg(long, env = "MOEC_FUSION_OUT_DIR")]
    out: Option<PathBuf>,
    /// Override any config key, e.g. `--set moec.top_k=1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self, fallback: impl FnOnce() -> ExperimentConfig) -> Result<ExperimentConfig, Error> {
        let mut sets = self.overrides.clone();
        if let Some(s) = self.seed {
            sets.push(format!("seed={s}"));
        }
        if let Some(s) = self.steps {
            sets.push(format!("run.steps={s}"));
        }
        if let Some(o) = &self.out {
            sets.push(format!("run.out_dir={}", toml_string(&o.display().to_string())));
        }
        match &self.config {
            Some(p) => ExperimentConfig::load(p, &sets),
            None => {
                let base = fallback().to_toml()?;
                ExperimentConfig::from_toml_with(&base, &sets)
            }
        }
    }
}

fn toml_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serialises")
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        Error::Io { .. } | Error::Checkpoint { .. } => EXIT_IO,
        Error::NonFinite { .. } | Error::Shape { .. } | Error::Param { .. } | Error::Contract(_) => EXIT_NUMERIC,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Command) -> Result<u8, Error> {
    match cmd {
        Command::Run { common, resume } => {
            let cfg = common.load(ExperimentConfig::default)?;
            let s = run_experiment(&cfg, resume.as_deref())?;
            if let Some(last) = s.records.last() {
                println!(
                    "step {}  task {:.6}  total {:.6}",
                    last.step, last.task_loss, last.total
                );
            }
            println!("ran {} steps; metrics and checkpoint in {}", s.steps_run, s.out_dir.display());
            Ok(0)
        }
        Command::Ablate { common } => {
            let cfg = common.load(ExperimentConfig::default)?;
            let summary = run_ablation(&cfg, &cfg.ablation, Some(&cfg.run.out_dir))?;
            print!("{}", summary.table());
            let failed = summary.rows.iter().filter(|r| r.error.is_some()).count();
            if failed > 0 {
                eprintln!("{failed} cell(s) failed");
                return Ok(EXIT_NUMERIC);
            }
            Ok(0)
        }
        Command::GradCheck { common, tolerance } => {
            let cfg = common.load(ExperimentConfig::tiny)?;
            let model = cfg.model_config();
            if model.total_tokens() > 64 {
                return Err(Error::Config {
                    key: "encoders".into(),
                    line: None,
                    msg: format!("{} tokens is too many for finite differences; use 64 or fewer", model.total_tokens()),
                });
            }
            let r = gradient_check(&model, tolerance)?;
            let w = r.blocks.iter().map(|b| b.name.len()).max().unwrap_or(0);
            for b in &r.blocks {
                println!("{:<w$}  {:>4}  {:.3e}", b.name, b.entries, b.max_rel_error);
            }
            let verdict = if r.passed() { "PASS" } else { "FAIL" };
            println!("{verdict}: max relative error {:.3e} (tolerance {tolerance:e})", r.max_rel_error());
            Ok(if r.passed() { 0 } else { EXIT_NUMERIC })
        }
        Command::Flops { common, json } => {
            let cfg = common.load(ExperimentConfig::default)?;
            let f = flops_estimate(&cfg.model_config())?;
            if json {
                println!("{}", serde_json::to_string_pretty(&f).expect("plain struct"));
                return Ok(0);
            }
            let rows = [
                ("tokens", f.total_tokens),
                ("pooling", f.pooling),
                ("router", f.router),
                ("experts", f.experts),
                ("mlp connector", f.mlp_connector),
                ("intra similarity", f.intra_similarity),
                ("inter similarity", f.inter_similarity),
                ("aggregation", f.aggregation),
                ("gate", f.gate),
                ("head", f.head),
                ("total (moec)", f.total_moec),
                ("total (mlp)", f.total_mlp),
            ];
            for (k, v) in rows {
                println!("{k:<18}{v:>16}");
            }
            let configured = match cfg.model.connector {
                ConnectorKind::Mlp => "mlp",
                ConnectorKind::Moec => "moec",
            };
            println!("moec overhead      {:>15.3}%  (configured: {configured})", 100.0 * f.moec_overhead());
            Ok(0)
        }
        Command::InspectCheckpoint { path } => inspect(&path),
    }
}

fn inspect(path: &Path) -> Result<u8, Error> {
    let ck = Checkpoint::load(path)?;
    println!("step         {}", ck.step);
    println!("next sample  {}", ck.next_sample);
    println!("seed         {}", ck.config.seed);
    println!("optimizer    {:?} (momentum {})", ck.optimizer.kind, ck.optimizer.momentum);
    let params = ck.model.named_params();
    let w = params.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
    for (name, m) in &params {
        let norm = m.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("{name:<w$}  {:>3}x{:<3}  |w| {norm:.6}", m.rows(), m.cols());
    }
    println!("{} parameters", ck.model.num_scalars());
    Ok(0)
}
