use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use shapeprior_cli::commands::{cmd_eval, cmd_synth, cmd_train, cmd_xval, Selection, LATENTS_FILE};
use shapeprior_cli::dataset::read_subject_list;
use shapeprior_cli::{CliError, CliResult, Overrides, RunConfig};

/// Implicit occupancy shape prior: synthesize, train, evaluate, cross-validate.
#[derive(Parser)]
#[command(name = "shapeprior", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML run configuration; unset keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// 1-based fold to train or evaluate.
    #[arg(long, global = true)]
    fold: Option<usize>,
    /// Number of cross-validation folds.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Run everything on one thread.
    #[arg(long, global = true)]
    single_thread: bool,
    /// Cubic grid size for synthesized populations.
    #[arg(long, global = true)]
    grid: Option<usize>,
    /// Training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Latent inference epochs per test shape.
    #[arg(long, global = true)]
    infer_epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic population.
    Synth,
    /// Train the prior on one fold's training subjects.
    Train {
        /// Population directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Train on the subjects listed in this file instead of a fold.
        #[arg(long, conflicts_with = "fold")]
        train_list: Option<PathBuf>,
    },
    /// Score held-out shapes with a trained prior.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Training latent table; defaults to the one next to the checkpoint.
        #[arg(long)]
        latents: Option<PathBuf>,
        /// Evaluate the subjects listed in this file instead of a fold.
        #[arg(long, conflicts_with = "fold")]
        test_list: Option<PathBuf>,
    },
    /// Train and evaluate every fold, then summarize.
    Xval {
        #[arg(long)]
        data: PathBuf,
    },
}

fn selection(cfg: &RunConfig, fold: Option<usize>, list: Option<&PathBuf>) -> CliResult<Selection> {
    match (fold, list) {
        (_, Some(path)) => Ok(Selection::Subjects(read_subject_list(path)?)),
        (Some(fold), None) => Ok(Selection::Fold { k: cfg.xval.k, fold }),
        (None, None) => Err(CliError::Usage("either --fold or a subject list is required".into())),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let g = cli.global;
    let mut cfg = RunConfig::load(g.config.as_deref())?;
    cfg.apply(&Overrides {
        seed: g.seed,
        grid: g.grid,
        epochs: g.epochs,
        infer_epochs: g.infer_epochs,
        k: g.k,
        single_thread: g.single_thread,
    });
    let out = g.out.ok_or_else(|| CliError::Usage("--out is required".into()))?;
    match cli.command {
        Command::Synth => {
            let res = cmd_synth(&cfg, &out)?;
            println!("wrote {} scans to {}", res.rows.len(), out.display());
        }
        Command::Train { data, train_list } => {
            let sel = selection(&cfg, g.fold, train_list.as_ref())?;
            let res = cmd_train(&cfg, &data, &sel, &out)?;
            println!("wrote {}", res.checkpoint.display());
        }
        Command::Eval {
            data,
            checkpoint,
            latents,
            test_list,
        } => {
            let sel = selection(&cfg, g.fold, test_list.as_ref())?;
            let latents = latents.unwrap_or_else(|| checkpoint.with_file_name(LATENTS_FILE));
            let res = cmd_eval(&cfg, &checkpoint, &latents, &data, &sel, &out)?;
            let r = &res.summary.anomaly;
            println!(
                "threshold {:.4}, {} normal / {} anomalous verdicts, AUC {}",
                r.threshold,
                r.n_normal_verdicts,
                r.n_anomalous_verdicts,
                r.auc.map_or("n/a".to_string(), |a| format!("{a:.4}"))
            );
        }
        Command::Xval { data } => {
            let res = cmd_xval(&cfg, &data, &out)?;
            for f in &res.summary.folds {
                println!(
                    "fold {}: threshold {:.4}, AUC {}",
                    f.fold,
                    f.threshold,
                    f.auc.map_or("n/a".to_string(), |a| format!("{a:.4}"))
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
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
