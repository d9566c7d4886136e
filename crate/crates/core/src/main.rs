use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bitadapt::data::{generate_glyphs, idx, GlyphConfig};
use bitadapt::harness::diagnostics::{gradcheck_suite, SuiteSelection};
use bitadapt::harness::run::{self, RESOLVED_CONFIG_FILE};
use bitadapt::harness::{cost, read_checkpoint, read_checkpoint_meta, report_cost, RunConfig};
use bitadapt::quant::BitwidthTask;
use bitadapt::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "bitadapt",
    version,
    about = "Bitwidth-adaptive quantization-aware training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train with the engine named in the config.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory; overrides `out_dir` from the config.
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Overrides `engine.epochs`.
        #[arg(long)]
        epochs: Option<u64>,
    },
    /// Accuracy of a checkpoint at each bitwidth pair over one pass of the test set.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Pairs to evaluate, e.g. `--tasks 2,2 --tasks FP,FP`; defaults to `eval.tasks`.
        #[arg(long = "tasks", value_name = "W,A")]
        tasks: Vec<BitwidthTask>,
    },
    /// Few-shot accuracy over episodes from held-out classes.
    MetaEval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of episodes; defaults to `eval.episodes`.
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long = "tasks", value_name = "W,A")]
        tasks: Vec<BitwidthTask>,
    },
    /// Compare autodiff gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        /// Skip the end-to-end model cases.
        #[arg(long)]
        primitives_only: bool,
    },
    /// Parameter storage and backward passes per update of a checkpoint.
    ReportCost {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write a synthetic glyph dataset as IDX files.
    MakeSynthetic {
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        classes: usize,
        #[arg(long, default_value_t = 20)]
        per_class: usize,
        #[arg(long, default_value_t = 28)]
        size: usize,
    },
}

fn load_config(run: &RunArgs, fallback: Option<&Path>) -> Result<RunConfig> {
    let path = match (&run.config, fallback) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(dir)) if dir.join(RESOLVED_CONFIG_FILE).exists() => {
            Some(dir.join(RESOLVED_CONFIG_FILE))
        }
        _ => None,
    };
    let mut cfg = match path {
        Some(p) => RunConfig::load(&p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn checkpoint_dir(path: &Path) -> Option<&Path> {
    path.parent()
}

fn tasks_or(tasks: Vec<BitwidthTask>, cfg: &RunConfig) -> Vec<BitwidthTask> {
    if tasks.is_empty() {
        cfg.eval.tasks.clone()
    } else {
        tasks
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train { run, out, epochs } => {
            let mut cfg = load_config(&run, None)?;
            if let Some(e) = epochs {
                cfg.engine.epochs = e;
            }
            let out = out
                .or_else(|| cfg.out_dir.clone())
                .ok_or_else(|| Error::Config {
                    field: "out_dir".into(),
                    reason: "pass --out or set out_dir".into(),
                })?;
            let r = run::train(&cfg, &out)?;
            println!(
                "trained {} updates ({} backward passes); wrote {}",
                r.learner.counters.updates,
                r.learner.counters.backprops,
                r.checkpoint.display()
            );
        }
        Command::Eval {
            run,
            checkpoint,
            tasks,
        } => {
            let cfg = load_config(&run, checkpoint_dir(&checkpoint))?.resolve()?;
            let params = read_checkpoint(&checkpoint)?;
            let spec = cost::spec_from_meta(&read_checkpoint_meta(&checkpoint)?)?;
            let data = run::load_data(&cfg)?;
            let tasks = tasks_or(tasks, &cfg);
            let rows = run::eval_sweep(
                &spec,
                &run::policy(&cfg),
                &params,
                data.eval_set(),
                &tasks,
                cfg.eval.batch_size,
            )?;
            println!("b_w,b_a,accuracy");
            for r in rows {
                println!("{},{},{:.4}", r.task.b_w, r.task.b_a, r.accuracy);
            }
        }
        Command::MetaEval {
            run,
            checkpoint,
            episodes,
            tasks,
        } => {
            let cfg = load_config(&run, checkpoint_dir(&checkpoint))?.resolve()?;
            let params = read_checkpoint(&checkpoint)?;
            let spec = cost::spec_from_meta(&read_checkpoint_meta(&checkpoint)?)?;
            let data = run::load_data(&cfg)?;
            let tasks = tasks_or(tasks, &cfg);
            let episodes = episodes.unwrap_or(cfg.eval.episodes);
            let rows = run::meta_eval(
                &cfg,
                &spec,
                &params,
                &data.train,
                &data.split.meta_test,
                &tasks,
                episodes,
                cfg.seed.wrapping_add(3),
            )?;
            println!("b_w,b_a,episodes,accuracy,ci95,pre_accuracy,median_improvement");
            for r in rows {
                let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.4}"));
                println!(
                    "{},{},{},{:.4},{:.4},{},{}",
                    r.task.b_w,
                    r.task.b_a,
                    r.post.len(),
                    r.mean(),
                    r.ci95(),
                    opt(r.pre_mean()),
                    opt(r.median_improvement())
                );
            }
        }
        Command::Gradcheck {
            seed,
            trials,
            tol,
            primitives_only,
        } => {
            let which = SuiteSelection {
                primitives: true,
                models: !primitives_only,
                ste: !primitives_only,
            };
            let reports = gradcheck_suite(seed, trials, tol, which)?;
            let mut failed = 0;
            for r in &reports {
                let status = match (r.excluded, r.passed()) {
                    (true, _) => "EXCLUDED",
                    (false, true) => "ok",
                    (false, false) => "FAIL",
                };
                println!(
                    "{:<32} {:>8} max_rel={:.3e} failed={}/{} kinks={} time={:.2}s",
                    r.name,
                    status,
                    r.max_rel_error,
                    r.failed_trials,
                    r.trials,
                    r.skipped_kinks,
                    r.elapsed.as_secs_f64()
                );
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(Error::Other(format!("{failed} gradient checks failed")));
            }
        }
        Command::ReportCost { checkpoint } => {
            let r = report_cost(&checkpoint)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&r).map_err(|e| Error::Other(e.to_string()))?
            );
        }
        Command::MakeSynthetic {
            out,
            seed,
            classes,
            per_class,
            size,
        } => {
            let (images, labels) = generate_glyphs(&GlyphConfig {
                seed,
                num_classes: classes,
                samples_per_class: per_class,
                image_size: size,
            })?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            let img = out.join("glyphs-images-idx3-ubyte");
            let lbl = out.join("glyphs-labels-idx1-ubyte");
            idx::write_images(&img, &images)?;
            idx::write_labels(&lbl, &labels)?;
            println!(
                "wrote {} glyphs to {} and {}",
                labels.len(),
                img.display(),
                lbl.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
