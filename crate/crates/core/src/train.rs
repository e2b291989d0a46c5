//! Training loop: Adam, step-halved learning rate, early stopping on
//! validation loss, best-precision checkpointing and a JSONL metrics log.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rgin_synth::{read_dataset, Dataset, Split};
use rgin_tensor::Tape;
use serde::Serialize;

use crate::backbone;
use crate::checkpoint::{Checkpoint, TrainState};
use crate::config::RunConfig;
use crate::ctx::{update_running_stats, BnStat, Ctx, Mode};
use crate::data::{dataset_priors, load_batch, split_records, Batch};
use crate::error::{Result, RginError};
use crate::eval::evaluate;
use crate::model::{forward, loss, Model, Targets};
use crate::optim::{lr_at, Adam};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const STEPS_FILE: &str = "steps.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Batch size used for validation passes.
const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub total: f32,
    pub det: f32,
    pub att: Option<f32>,
}

/// One optimisation step on `batch`. Returns the losses before the update;
/// a non-finite loss leaves the model untouched and is reported as `None`.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &Batch,
    targets: &[Targets],
    lr: f64,
) -> Result<Option<StepLosses>> {
    let cfg = model.cfg.clone();
    let mut tape = Tape::<f32>::new();
    let (losses, stats): (StepLosses, Vec<BnStat<f32>>) = {
        let mut ctx = Ctx::new(&mut tape, &model.params, &model.buffers, &cfg, Mode::Train);
        let x = backbone::image_batch::<f32>(&batch.image_refs(), &cfg)?;
        let x = ctx.tape.constant(x);
        let out = forward(&mut ctx, &cfg, x, &batch.tokens)?;
        let parts = loss(&mut ctx, &cfg, &out, targets)?;
        let v = |var| ctx.tape.value(var).data()[0];
        let losses = StepLosses {
            total: v(parts.total),
            det: v(parts.det),
            att: parts.att.map(v),
        };
        if !losses.total.is_finite() {
            return Ok(None);
        }
        ctx.tape.backward(parts.total)?;
        (losses, std::mem::take(&mut ctx.bn_stats))
    };
    let grads = tape.param_grads();
    if grads.iter().any(|(_, g)| !g.all_finite()) {
        return Ok(None);
    }
    adam.update(&mut model.params, &grads, lr);
    let stats: Vec<BnStat<f32>> = if cfg.freeze_backbone {
        stats
            .into_iter()
            .filter(|s| !s.prefix.starts_with("backbone."))
            .collect()
    } else {
        stats
    };
    update_running_stats(&mut model.buffers, &stats, cfg.bn_momentum);
    Ok(Some(losses))
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub train_loss: f64,
    pub train_det_loss: f64,
    pub train_att_loss: Option<f64>,
    pub val_loss: f64,
    pub val_det_loss: f64,
    pub val_att_loss: Option<f64>,
    pub val_precision: f64,
    pub best: bool,
}

#[derive(Debug, Clone, Serialize)]
struct StepRecord {
    epoch: usize,
    step: usize,
    total: f32,
    det: f32,
    att: Option<f32>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from `last.ckpt` in the output directory.
    pub resume: bool,
    /// Write per-step losses to `steps.jsonl`.
    pub log_steps: bool,
    /// Replace the loss at this global step with NaN (exercises the abort path).
    pub poison_step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs_completed: usize,
    pub best_epoch: usize,
    pub best_precision: f64,
    pub stopped_early: bool,
    pub out_dir: PathBuf,
    pub history: Vec<EpochMetrics>,
}

fn open_log(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| RginError::io(path, e))?;
    Ok(BufWriter::new(file))
}

fn write_line<S: Serialize>(out: &mut BufWriter<File>, path: &Path, value: &S) -> Result<()> {
    let line = serde_json::to_string(value).expect("metrics serialise");
    writeln!(out, "{line}")
        .and_then(|_| out.flush())
        .map_err(|e| RginError::io(path, e))
}

/// Trains on the dataset at `cfg.data.data_dir`, writing logs and checkpoints
/// to `cfg.data.out_dir`.
pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    let dataset = read_dataset(&cfg.data.data_dir)?;
    train_on(cfg, &dataset, opts)
}

pub fn train_on(cfg: &RunConfig, dataset: &Dataset, opts: &TrainOptions) -> Result<TrainSummary> {
    let out_dir = cfg.data.out_dir.clone();
    std::fs::create_dir_all(&out_dir).map_err(|e| RginError::io(&out_dir, e))?;
    if dataset.manifest.canvas as usize != cfg.model.canvas {
        return Err(RginError::InvalidConfig(format!(
            "dataset canvas {} differs from model canvas {}",
            dataset.manifest.canvas, cfg.model.canvas
        )));
    }
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let (mut model, mut adam, mut state) = if opts.resume {
        let ck = Checkpoint::load(&last_path)?;
        if ck.config.model != cfg.model {
            return Err(RginError::InvalidConfig(
                "model settings differ from the checkpoint being resumed".into(),
            ));
        }
        log::info!("resuming after epoch {}", ck.state.epoch);
        (ck.model, ck.adam, ck.state)
    } else {
        let s = cfg.model.grid();
        let priors = dataset_priors(dataset, cfg.model.priors, s, cfg.train.seed)?;
        log::info!("priors (grid units): {priors:?}");
        (
            Model::new(cfg.model.clone(), priors, cfg.train.seed)?,
            Adam::default(),
            TrainState::default(),
        )
    };

    let metrics_path = out_dir.join(METRICS_FILE);
    let steps_path = out_dir.join(STEPS_FILE);
    let mut metrics = open_log(&metrics_path, opts.resume)?;
    let mut steps_log = if opts.log_steps {
        Some(open_log(&steps_path, opts.resume)?)
    } else {
        None
    };

    let train_records = {
        let mut r = split_records(dataset, Split::Train);
        if cfg.train.train_limit > 0 {
            r.truncate(cfg.train.train_limit);
        }
        r
    };
    if train_records.len() < 2 {
        return Err(RginError::InvalidArgument(
            "training split needs at least two scenes".into(),
        ));
    }
    let s = model.cfg.grid();
    let mut history = Vec::new();
    let mut stopped_early = false;

    while state.epoch < cfg.train.max_epochs {
        if state.bad_epochs >= cfg.train.patience && cfg.train.patience > 0 {
            stopped_early = true;
            break;
        }
        let epoch = state.epoch;
        let lr = lr_at(cfg.train.lr, epoch, cfg.train.lr_halve_every);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order = train_records.clone();
        order.shuffle(&mut rng);

        let mut sums = (0.0f64, 0.0f64, None::<f64>);
        let mut count = 0usize;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.train.batch) {
            if chunk.len() < 2 {
                log::debug!("skipping trailing batch of {}", chunk.len());
                continue;
            }
            let batch = load_batch(
                dataset,
                chunk,
                &model.vocab,
                model.cfg.max_tokens,
                cfg.train.threads,
            )?;
            let targets = batch.targets(&model.priors, s)?;
            let poisoned = opts.poison_step == Some(adam.step);
            let result = if poisoned {
                None
            } else {
                train_step(&mut model, &mut adam, &batch, &targets, lr)?
            };
            let Some(l) = result else {
                log::error!(
                    "non-finite loss at epoch {epoch} step {steps}; last good checkpoint is {}",
                    last_path.display()
                );
                return Err(RginError::NonFiniteLoss { epoch, step: steps });
            };
            if let Some(log) = steps_log.as_mut() {
                let rec = StepRecord {
                    epoch,
                    step: steps,
                    total: l.total,
                    det: l.det,
                    att: l.att,
                };
                write_line(log, &steps_path, &rec)?;
            }
            let n = batch.len() as f64;
            sums.0 += l.total as f64 * n;
            sums.1 += l.det as f64 * n;
            if let Some(a) = l.att {
                sums.2 = Some(sums.2.unwrap_or(0.0) + a as f64 * n);
            }
            count += batch.len();
            steps += 1;
        }

        let val = evaluate(
            &model,
            dataset,
            Split::Val,
            EVAL_BATCH,
            cfg.train.threads,
            true,
        )?;
        let vl = val.loss.expect("loss requested");
        let precision = val.precision();
        let best = precision > state.best_precision;
        if vl.total < state.best_val_loss {
            state.best_val_loss = vl.total;
            state.bad_epochs = 0;
        } else {
            state.bad_epochs += 1;
        }
        state.epoch = epoch + 1;
        if best {
            state.best_precision = precision;
            state.best_epoch = epoch;
        }
        let c = count.max(1) as f64;
        let m = EpochMetrics {
            epoch,
            lr,
            steps,
            train_loss: sums.0 / c,
            train_det_loss: sums.1 / c,
            train_att_loss: sums.2.map(|a| a / c),
            val_loss: vl.total,
            val_det_loss: vl.det,
            val_att_loss: vl.att,
            val_precision: precision,
            best,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} det {:.4} val loss {:.4} val precision {:.4}{}",
            m.train_loss,
            m.train_det_loss,
            m.val_loss,
            precision,
            if best { " (best)" } else { "" }
        );
        let ck = Checkpoint {
            config: cfg.clone(),
            model: model.clone(),
            adam: adam.clone(),
            state,
        };
        if best {
            ck.save(&best_path)?;
        }
        ck.save(&last_path)?;
        write_line(&mut metrics, &metrics_path, &m)?;
        history.push(m);
    }
    Ok(TrainSummary {
        epochs_completed: state.epoch,
        best_epoch: state.best_epoch,
        best_precision: state.best_precision,
        stopped_early,
        out_dir,
        history,
    })
}
