use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use xrecog::config::{Layout, RunConfig};
use xrecog::pipeline;

/// Identity verification with triplet-trained embeddings.
///
/// Every stage reads one TOML run config; paths that are not given on the
/// command line or in the `[paths]` section default to files in `--out`.
#[derive(Debug, Parser)]
#[command(name = "xrecog", version, about)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed; re-derives every per-stage seed from this value.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,

    /// Directory for outputs and default inputs.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic manifest (and its shifted companion, if configured).
    Synth(SynthArgs),
    /// Split a manifest into patient-disjoint train/validation/test manifests.
    Split(SplitArgs),
    /// Train the encoder; writes a checkpoint and per-epoch history CSV.
    Train(TrainArgs),
    /// Score verification pairs; writes a JSON report and ROC CSVs.
    Eval(EvalArgs),
    /// Fit a linear probe on frozen embeddings; writes a JSON report.
    Probe(ProbeArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Manifest to write.
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// Shifted manifest to write when `ood_shift` is configured.
    #[arg(long, value_name = "PATH")]
    ood: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SplitArgs {
    /// Manifest to split.
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training manifest.
    #[arg(long, value_name = "PATH")]
    train: Option<PathBuf>,
    /// Validation manifest.
    #[arg(long, value_name = "PATH")]
    val: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// History CSV to write.
    #[arg(long, value_name = "PATH")]
    history: Option<PathBuf>,
    /// Override the configured number of epochs.
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Encoder checkpoint.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Test manifest.
    #[arg(long, value_name = "PATH")]
    test: Option<PathBuf>,
    /// Validation manifest used to calibrate the decision threshold.
    #[arg(long, value_name = "PATH")]
    val: Option<PathBuf>,
    /// Manifest for the `ood` setting.
    #[arg(long, value_name = "PATH")]
    ood: Option<PathBuf>,
    /// Report JSON to write.
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    /// Encoder checkpoint.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Manifest the probe is fitted on.
    #[arg(long, value_name = "PATH")]
    train: Option<PathBuf>,
    /// Held-out manifest the probe is scored on.
    #[arg(long, value_name = "PATH")]
    test: Option<PathBuf>,
    /// Attribute to predict; overrides `probe.task_attribute`.
    #[arg(long, value_name = "NAME")]
    attribute: Option<String>,
    /// Report JSON to write.
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,
}

fn set(slot: &mut Option<PathBuf>, value: Option<PathBuf>) {
    if value.is_some() {
        *slot = value;
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let Some(path) = &cli.config else {
        bail!("--config <PATH> is required");
    };
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.set_master_seed(seed);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    let paths = &mut cfg.paths;
    match cli.command {
        Command::Synth(a) => {
            set(&mut paths.data, a.data);
            set(&mut paths.ood, a.ood);
            let layout = Layout::new(&cli.out, &cfg.paths);
            for p in pipeline::synth(&cfg, &layout).context("synth")? {
                println!("wrote {}", p.display());
            }
        }
        Command::Split(a) => {
            set(&mut paths.data, a.data);
            let layout = Layout::new(&cli.out, &cfg.paths);
            for p in pipeline::split(&cfg, &layout).context("split")? {
                println!("wrote {}", p.display());
            }
        }
        Command::Train(a) => {
            set(&mut paths.train, a.train);
            set(&mut paths.val, a.val);
            set(&mut paths.checkpoint, a.checkpoint);
            set(&mut paths.history, a.history);
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            let layout = Layout::new(&cli.out, &cfg.paths);
            let (_, history, written) = pipeline::train(&cfg, &layout).context("train")?;
            if let (Some(l), Some(a)) = (history.train_loss.last(), history.val_auroc.last()) {
                println!("final epoch: train loss {l:.4}, validation AUROC {a:.4}");
            }
            for p in written {
                println!("wrote {}", p.display());
            }
        }
        Command::Eval(a) => {
            set(&mut paths.checkpoint, a.checkpoint);
            set(&mut paths.test, a.test);
            set(&mut paths.val, a.val);
            set(&mut paths.ood, a.ood);
            set(&mut paths.eval_report, a.report);
            let layout = Layout::new(&cli.out, &cfg.paths);
            let (reports, written) = pipeline::evaluate(&cfg, &layout).context("eval")?;
            for r in &reports {
                println!(
                    "{}: AUROC {:.4}, EER {:.4}, accuracy {:.4} ({} same / {} different pairs)",
                    r.setting, r.auroc, r.eer, r.test_accuracy, r.n_pos, r.n_neg
                );
            }
            for p in written {
                println!("wrote {}", p.display());
            }
        }
        Command::Probe(a) => {
            set(&mut paths.checkpoint, a.checkpoint);
            set(&mut paths.train, a.train);
            set(&mut paths.test, a.test);
            set(&mut paths.probe_report, a.report);
            if let Some(attr) = a.attribute {
                match &mut cfg.probe {
                    Some(p) => p.task_attribute = attr,
                    None => cfg.probe = Some(xrecog::ProbeConfig::new(attr)),
                }
            }
            let layout = Layout::new(&cli.out, &cfg.paths);
            let (report, path) = pipeline::probe(&cfg, &layout).context("probe")?;
            println!(
                "{}: accuracy {:.4} vs majority baseline {:.4} on {} records",
                report.task, report.accuracy, report.majority_baseline, report.n
            );
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
