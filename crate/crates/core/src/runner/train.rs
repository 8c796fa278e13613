//! Epoch loop with per-epoch teacher resampling, validation-perplexity
//! checkpoint selection and early stopping.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::autodiff::{adam_step, AdamConfig, AdamState, Tape, Tensor};
use crate::model::CondSeqModel;
use crate::objectives::{training_objective, validation_perplexity, BatchStats, Example, ObjectiveConfig};
use crate::rng::rng_from;
use crate::teacher::Teacher;

use super::RunError;

const TAG_SHUFFLE: u64 = 0x7368_7566;

pub const BEST_CHECKPOINT: &str = "checkpoint_best.ckpt";
pub const LAST_CHECKPOINT: &str = "checkpoint_last.ckpt";
pub const RUNLOG_FILE: &str = "runlog.txt";

/// Optimization settings for one training phase.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub objective: ObjectiveConfig,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Batches whose gradients are averaged into one update.
    pub update_freq: usize,
    pub seed: u64,
    /// Also keep `checkpoint{epoch}.ckpt` every this many epochs; 0 disables.
    pub save_interval: usize,
    /// Record elapsed seconds in the run log.
    pub log_wall_clock: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            objective: ObjectiveConfig::default(),
            adam: AdamConfig::default(),
            epochs: 100,
            patience: 50,
            batch_size: 32,
            update_freq: 1,
            seed: 1,
            save_interval: 0,
            log_wall_clock: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_ppl: f64,
    pub updates: u64,
    pub lr: f64,
    pub smrt_examples: usize,
    pub mean_path_len: f64,
    pub mean_teacher_entropy: f64,
    pub forced_paths: usize,
    pub wall_clock_s: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Epochs,
    Patience,
    Diverged,
}

impl StopReason {
    fn as_str(self) -> &'static str {
        match self {
            StopReason::Epochs => "epochs",
            StopReason::Patience => "patience",
            StopReason::Diverged => "diverged",
        }
    }
}

/// Per-epoch training record plus the outcome of checkpoint selection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stop: Option<StopReason>,
    /// Parameter hash of the model the phase started from.
    pub init_param_hash: u64,
}

impl RunLog {
    pub fn best_ppl(&self) -> Option<f64> {
        let best = self.best_epoch?;
        self.records.iter().find(|r| r.epoch == best).map(|r| r.valid_ppl)
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }

    /// One `key = value` block per epoch, blank-line separated, followed by
    /// a summary block.
    pub fn to_text(&self) -> String {
        let mut out = format!("init_param_hash = {:016x}\n", self.init_param_hash);
        for r in &self.records {
            let _ = write!(
                out,
                "\nepoch = {}\ntrain_loss = {}\nvalid_ppl = {}\nupdates = {}\nlr = {}\nsmrt_examples = {}\nmean_path_len = {}\nmean_teacher_entropy = {}\nforced_paths = {}\n",
                r.epoch,
                r.train_loss,
                r.valid_ppl,
                r.updates,
                r.lr,
                r.smrt_examples,
                r.mean_path_len,
                r.mean_teacher_entropy,
                r.forced_paths
            );
            if let Some(w) = r.wall_clock_s {
                let _ = writeln!(out, "wall_clock_s = {w:.3}");
            }
        }
        if let Some(stop) = self.stop {
            out.push('\n');
            if let Some(b) = self.best_epoch {
                let _ = writeln!(out, "best_epoch = {b}");
            }
            let _ = writeln!(out, "stop = {}", stop.as_str());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), RunError> {
        std::fs::write(path, self.to_text()).map_err(|e| RunError::io(path, e))
    }
}

/// Result of a finished training phase.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: CondSeqModel,
    pub last: CondSeqModel,
    pub log: RunLog,
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(seed, &[TAG_SHUFFLE, epoch]));
    order
}

/// Trains `model` in place of a fresh copy and returns the perplexity-best
/// and last models. With `out_dir`, checkpoints and the run log are written
/// there as training proceeds.
pub fn train_model(
    model: CondSeqModel,
    train: &[Example],
    valid: &[Example],
    teacher: Option<&dyn Teacher>,
    settings: &TrainSettings,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, RunError> {
    settings.objective.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(RunError::Config(
            "training and validation sets must be non-empty".into(),
        ));
    }
    if settings.batch_size == 0 || settings.update_freq == 0 {
        return Err(RunError::Config("batch_size and update_freq must be positive".into()));
    }
    if settings.objective.needs_teacher() && teacher.is_none() {
        return Err(RunError::Config(format!(
            "objective `{}` needs a teacher",
            settings.objective.mode
        )));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))?;
    }
    let start = Instant::now();
    let mut model = model;
    let mut adam = AdamState::new(settings.adam.clone(), model.params());
    let mut log = RunLog {
        init_param_hash: model.param_hash(),
        ..RunLog::default()
    };
    let mut best = model.clone();
    let mut best_ppl = f64::INFINITY;
    let mut since_best = 0usize;

    let save_log = |log: &RunLog| -> Result<(), RunError> {
        match out_dir {
            Some(dir) => log.save(&dir.join(RUNLOG_FILE)),
            None => Ok(()),
        }
    };

    for epoch in 1..=settings.epochs {
        let order = epoch_order(train.len(), settings.seed, epoch as u64);
        let mut epoch_stats = BatchStats::default();
        let mut loss_sum = 0.0;
        let mut pending: Option<Vec<Tensor>> = None;
        let mut pending_batches = 0usize;
        let batches: Vec<&[usize]> = order.chunks(settings.batch_size).collect();
        for (bi, chunk) in batches.iter().enumerate() {
            let batch: Vec<Example> = chunk.iter().map(|&i| train[i].clone()).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let (loss, stats) = training_objective(
                &mut tape,
                &bound,
                &settings.objective,
                &batch,
                teacher,
                epoch as u64,
                settings.seed,
                true,
            )?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                log.stop = Some(StopReason::Diverged);
                save_log(&log)?;
                return Err(RunError::Diverged {
                    epoch,
                    loss: value,
                    log: Box::new(log),
                });
            }
            loss_sum += value * stats.tokens as f64;
            epoch_stats.merge(&stats);
            tape.backward(loss)?;
            let vars = bound.vars().to_vec();
            let grads: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v)).collect();
            pending = Some(match pending {
                None => grads,
                Some(mut acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                    acc
                }
            });
            pending_batches += 1;
            if pending_batches == settings.update_freq || bi + 1 == batches.len() {
                let mut grads = pending.take().expect("gradients pending");
                if pending_batches > 1 {
                    let k = 1.0 / pending_batches as f64;
                    for g in &mut grads {
                        g.data_mut().iter_mut().for_each(|x| *x *= k);
                    }
                }
                pending_batches = 0;
                if let Err(e) = adam_step(model.params_mut(), &grads, &mut adam) {
                    log.stop = Some(StopReason::Diverged);
                    save_log(&log)?;
                    return Err(RunError::Autodiff(e));
                }
            }
        }
        let valid_ppl = validation_perplexity(&model, valid)?;
        let mean = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
        log.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / epoch_stats.tokens as f64,
            valid_ppl,
            updates: adam.t,
            lr: settings.adam.learning_rate(adam.t.max(1)),
            smrt_examples: epoch_stats.smrt_examples,
            mean_path_len: mean(epoch_stats.path_tokens as f64, epoch_stats.smrt_examples),
            mean_teacher_entropy: mean(epoch_stats.entropy_sum, epoch_stats.entropy_steps),
            forced_paths: epoch_stats.forced_paths,
            wall_clock_s: settings.log_wall_clock.then(|| start.elapsed().as_secs_f64()),
        });
        if valid_ppl < best_ppl {
            best_ppl = valid_ppl;
            best = model.clone();
            log.best_epoch = Some(epoch);
            since_best = 0;
            if let Some(dir) = out_dir {
                best.save(&dir.join(BEST_CHECKPOINT))?;
            }
        } else {
            since_best += 1;
        }
        if let Some(dir) = out_dir {
            model.save(&dir.join(LAST_CHECKPOINT))?;
            if settings.save_interval > 0 && epoch % settings.save_interval == 0 {
                model.save(&dir.join(format!("checkpoint{epoch}.ckpt")))?;
            }
        }
        let stop = if since_best >= settings.patience {
            Some(StopReason::Patience)
        } else if epoch == settings.epochs {
            Some(StopReason::Epochs)
        } else {
            None
        };
        if stop.is_some() {
            log.stop = stop;
            save_log(&log)?;
            break;
        }
        save_log(&log)?;
    }
    if settings.epochs == 0 {
        log.stop = Some(StopReason::Epochs);
        if let Some(dir) = out_dir {
            best.save(&dir.join(BEST_CHECKPOINT))?;
            model.save(&dir.join(LAST_CHECKPOINT))?;
        }
        save_log(&log)?;
    }
    Ok(TrainOutcome { best, last: model, log })
}
