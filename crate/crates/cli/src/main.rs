use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use realgin::bench::{bench, bench_inputs};
use realgin::checks::{run_all, TOLERANCE};
use realgin::eval::evaluate;
use realgin::train::{train, TrainOptions, BEST_CHECKPOINT};
use realgin::visualize::visualize;
use realgin::{Checkpoint, Model, RginError, RunConfig};
use rgin_synth::{read_dataset, write_dataset, Split};
use rgin_tensor::gradcheck::GradCheckConfig;
use rgin_tensor::OpKind;

#[derive(Parser)]
#[command(
    name = "rgin",
    version,
    about = "Referring expression grounding on synthetic scenes"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Takes precedence over RGIN_SEED and the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long)]
        scenes: Option<usize>,
        /// Template proportions, e.g. `category=0.25,attribute=0.25,location=0.25,relational=0.25`.
        #[arg(long)]
        mix: Option<String>,
    },
    /// Train a model; logs and checkpoints go to the output directory.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from the output directory's last checkpoint.
        #[arg(long)]
        resume: bool,
        /// Also log every step's losses.
        #[arg(long)]
        log_steps: bool,
    },
    /// Precision@0.5 of a checkpoint on one split.
    Eval {
        /// Defaults to best.ckpt in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 32)]
        batch: usize,
    },
    /// Finite-difference gradient checks in f64.
    Gradcheck {
        /// Corrupt this op's backward rule (checks that failures are caught).
        #[arg(long, value_name = "OP")]
        inject_fault: Option<String>,
    },
    /// Forward-pass latency.
    Bench {
        /// Model to time; without it a freshly initialised model from the config is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        iterations: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
    },
    /// Dump boxes, attention heatmaps and AFS weights for some scenes.
    Visualize {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated scene ids.
        #[arg(long, value_delimiter = ',', required = true)]
        scenes: Vec<u64>,
        /// Defaults to `<out_dir>/visualize`.
        #[arg(long)]
        dest: Option<PathBuf>,
    },
}

fn invalid(msg: impl Into<String>) -> RginError {
    RginError::InvalidArgument(msg.into())
}

fn load_config(common: &Common) -> realgin::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| invalid(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())
            .map_err(RginError::InvalidConfig)?;
    }
    if let Some(d) = &common.data_dir {
        cfg.data.data_dir = d.clone();
    }
    if let Some(d) = &common.out_dir {
        cfg.data.out_dir = d.clone();
    }
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(t) = common.threads {
        cfg.train.threads = t;
    }
    Ok(cfg)
}

fn checkpoint_path(given: &Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    given
        .clone()
        .unwrap_or_else(|| cfg.data.out_dir.join(BEST_CHECKPOINT))
}

fn run(cli: Cli) -> realgin::Result<bool> {
    let mut cfg = load_config(&cli.common)?;
    match cli.command {
        Command::GenData { scenes, mix } => {
            if let Some(n) = scenes {
                cfg.data.scenes = n;
            }
            if let Some(m) = mix {
                cfg.set("mix", &m).map_err(RginError::InvalidConfig)?;
            }
            cfg.validate()?;
            let scene_cfg = rgin_synth::SceneConfig {
                canvas: cfg.model.canvas as u32,
                ..Default::default()
            };
            let start = Instant::now();
            let manifest = write_dataset(
                &cfg.data.data_dir,
                cfg.train.seed,
                cfg.data.scenes,
                &cfg.data.mix,
                &scene_cfg,
            )?;
            let dataset = read_dataset(&cfg.data.data_dir)?;
            let unique = dataset
                .records
                .iter()
                .filter(|r| {
                    r.scene.expression.matches(&r.scene.objects, r.scene.canvas)
                        == [r.scene.referent]
                })
                .count();
            let c = manifest.counts;
            println!(
                "wrote {} scenes to {}",
                manifest.count,
                cfg.data.data_dir.display()
            );
            println!("split train {} val {} test {}", c.train, c.val, c.test);
            println!(
                "expression oracle: {unique}/{} pick out exactly the referent ({:.2}%)",
                dataset.records.len(),
                100.0 * unique as f64 / dataset.records.len() as f64
            );
            println!("content sha256 {}", manifest.content_sha256);
            log::info!("generated in {:.1}s", start.elapsed().as_secs_f64());
            Ok(unique == dataset.records.len())
        }
        Command::Train {
            epochs,
            resume,
            log_steps,
        } => {
            if let Some(e) = epochs {
                cfg.train.max_epochs = e;
            }
            cfg.validate()?;
            let start = Instant::now();
            let summary = train(
                &cfg,
                &TrainOptions {
                    resume,
                    log_steps,
                    poison_step: None,
                },
            )?;
            println!(
                "trained {} epochs{} in {:.1}s; best val precision {:.4} at epoch {}",
                summary.epochs_completed,
                if summary.stopped_early {
                    " (early stop)"
                } else {
                    ""
                },
                start.elapsed().as_secs_f64(),
                summary.best_precision,
                summary.best_epoch
            );
            println!("outputs in {}", summary.out_dir.display());
            Ok(true)
        }
        Command::Eval {
            checkpoint,
            split,
            batch,
        } => {
            let split =
                Split::parse(&split).ok_or_else(|| invalid(format!("unknown split {split:?}")))?;
            let ck = Checkpoint::load(&checkpoint_path(&checkpoint, &cfg))?;
            let dataset = read_dataset(&cfg.data.data_dir)?;
            let report = evaluate(&ck.model, &dataset, split, batch, cfg.train.threads, false)?;
            println!("split {}", split.name());
            print!("{report}");
            Ok(true)
        }
        Command::Gradcheck { inject_fault } => {
            let fault = match inject_fault {
                Some(name) => Some(
                    OpKind::ALL
                        .into_iter()
                        .find(|k| k.name() == name)
                        .ok_or_else(|| invalid(format!("unknown op {name:?}")))?,
                ),
                None => None,
            };
            let start = Instant::now();
            let rows = run_all(&GradCheckConfig {
                fault,
                ..GradCheckConfig::default()
            })?;
            let mut ok = true;
            for r in &rows {
                let pass = r.passes();
                ok &= pass;
                println!(
                    "{:<16} {:>10.3e}  {:>6} entries  {}",
                    r.name,
                    r.report.max_rel_error,
                    r.report.entries_checked,
                    if pass { "pass" } else { "FAIL" }
                );
            }
            println!(
                "{} checks, tolerance {TOLERANCE:e}, {:.1}s: {}",
                rows.len(),
                start.elapsed().as_secs_f64(),
                if ok { "all pass" } else { "FAILED" }
            );
            Ok(ok)
        }
        Command::Bench {
            checkpoint,
            iterations,
            warmup,
        } => {
            let model = match &checkpoint {
                Some(p) => Checkpoint::load(p)?.model,
                None => {
                    cfg.validate()?;
                    let priors = (0..cfg.model.priors)
                        .map(|i| (1.0 + i as f64, 1.0 + i as f64))
                        .collect();
                    Model::new(cfg.model.clone(), priors, cfg.train.seed)?
                }
            };
            let inputs = bench_inputs(model.cfg.canvas, 32)?;
            let report = bench(&model, &inputs, iterations, warmup, cfg.train.threads)?;
            println!(
                "model heads {} afs {} garan {}; warmup {}",
                model.cfg.heads, model.cfg.enable_afs, model.cfg.enable_garan, report.warmup
            );
            print!("{report}");
            Ok(true)
        }
        Command::Visualize {
            checkpoint,
            scenes,
            dest,
        } => {
            let ck = Checkpoint::load(&checkpoint_path(&checkpoint, &cfg))?;
            let dataset = read_dataset(&cfg.data.data_dir)?;
            let dest = dest.unwrap_or_else(|| cfg.data.out_dir.join("visualize"));
            let files = visualize(&ck.model, &dataset, &scenes, &dest)?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
