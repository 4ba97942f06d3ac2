use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;

use super::adam::AdamState;
use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::scheduler::SchedulerState;
use crate::data::{Batch, BatchIterator, SampleWindow};
use crate::error::{Error, Result};
use crate::metrics::{average_metric, loss_on_graph, EvalReport, MetricKind, MetricSpec};
use crate::model::EncoderForecaster;
use crate::tensor::{Graph, Tensor};

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_metric,lr,checkpointed";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const HISTORY_FILE: &str = "history.csv";

/// One row of the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based index of the finished epoch.
    pub epoch: u64,
    pub train_loss: f64,
    pub val_metric: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub checkpointed: bool,
}

impl EpochRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.train_loss, self.val_metric, self.lr, self.checkpointed as u8
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    EpochBudget,
    TimeBudget,
    StepBudget,
    EarlyStop,
}

pub struct TrainReport {
    /// Weights with the best validation metric so far (the starting weights
    /// when no epoch ran).
    pub best: Checkpoint,
    /// State after the last finished epoch; resuming from it continues the run.
    pub last: Checkpoint,
    /// Epochs run by this call.
    pub history: Vec<EpochRecord>,
    pub stop: StopReason,
}

/// Slice sample `i` out of a batch tensor, keeping a leading batch axis of 1.
pub fn sample_of(t: &Tensor<f32>, i: usize) -> Result<Tensor<f32>> {
    let shape = t.shape();
    if shape.is_empty() || i >= shape[0] {
        return Err(Error::Shape(format!("no sample {i} in tensor {shape:?}")));
    }
    let n = t.len() / shape[0];
    let mut s = shape.to_vec();
    s[0] = 1;
    Tensor::new(&s, t.data()[i * n..(i + 1) * n].to_vec())
}

/// Batch loss and the gradient of every parameter.
///
/// Each sample is differentiated on its own tape and the gradients are
/// summed in sample order, so the result does not depend on how samples are
/// spread across threads. Sample losses are weighted so the total equals
/// the loss of the whole batch (by valid-pixel count under masked MSE).
/// Returns `None` when no pixel of the batch is valid.
pub fn batch_gradients(
    model: &EncoderForecaster<f32>,
    batch: &Batch,
    kind: MetricKind,
    epsilon: f64,
) -> Result<Option<(f64, Vec<Tensor<f32>>)>> {
    let b = batch.len();
    let weights: Vec<f64> = if kind == MetricKind::MaskedMse {
        let counts: Vec<f64> = (0..b)
            .map(|i| sample_of(&batch.target_mask, i).map(|m| m.sum() as f64))
            .collect::<Result<_>>()?;
        let total: f64 = counts.iter().sum();
        if total <= 0.0 {
            return Ok(None);
        }
        counts.iter().map(|c| c / total).collect()
    } else {
        vec![1.0 / b as f64; b]
    };
    let shapes = model.params().shapes();
    let per_sample: Vec<Result<Option<(f64, Vec<Tensor<f32>>)>>> = (0..b)
        .into_par_iter()
        .map(|i| {
            if weights[i] == 0.0 {
                return Ok(None);
            }
            let mut g = Graph::new();
            let x = g.constant(sample_of(&batch.inputs, i)?);
            let pred = model.forward(&mut g, &x)?;
            let target = sample_of(&batch.targets, i)?;
            let mask = sample_of(&batch.target_mask, i)?;
            let loss = loss_on_graph(&mut g, pred, &target, &mask, kind, epsilon)?;
            let value = g.value(loss).item()? as f64;
            let scaled = g.scale(loss, weights[i] as f32);
            g.backward(scaled)?;
            Ok(Some((value * weights[i], g.param_grads(&shapes))))
        })
        .collect();
    let mut total = 0.0;
    let mut grads: Vec<Tensor<f32>> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
    for r in per_sample {
        if let Some((l, gs)) = r? {
            total += l;
            for (acc, g) in grads.iter_mut().zip(&gs) {
                acc.add_assign(g)?;
            }
        }
    }
    Ok(Some((total, grads)))
}

/// Rescale `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Predict every window and average the metric over windows.
pub fn evaluate_model(
    model: &EncoderForecaster<f32>,
    windows: &[SampleWindow],
    spec: &MetricSpec,
) -> Result<EvalReport> {
    if windows.is_empty() {
        return Err(Error::Empty("no windows to evaluate".into()));
    }
    let preds: Vec<Tensor<f32>> = windows
        .par_iter()
        .map(|w| {
            let mut shape = vec![1];
            shape.extend_from_slice(w.inputs.shape());
            model.predict(&w.inputs.clone().reshape(&shape)?)
        })
        .collect::<Result<_>>()?;
    average_metric(
        spec,
        preds
            .iter()
            .zip(windows)
            .map(|(p, w)| (p.data(), w.targets.data(), w.target_mask.data())),
    )
}

/// Model, optimizer and schedule of one training run.
pub struct Trainer {
    pub model: EncoderForecaster<f32>,
    pub adam: AdamState<f32>,
    pub scheduler: SchedulerState,
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: u64,
    pool: rayon::ThreadPool,
}

impl Trainer {
    /// Fresh run: weights drawn from `config.train.seed`.
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let model = EncoderForecaster::build(&config.model, config.train.seed)?;
        Self::with_model(model, config)
    }

    pub fn with_model(model: EncoderForecaster<f32>, config: &RunConfig) -> Result<Self> {
        config.validate()?;
        if model.config() != &config.model {
            return Err(Error::Config("model does not match the run configuration".into()));
        }
        let t = &config.train;
        let mut scheduler = SchedulerState::new(t.learning_rate);
        scheduler.decay_factor = t.decay_factor;
        scheduler.patience_decay = t.patience_decay;
        scheduler.patience_stop = t.patience_stop;
        let adam = AdamState::new(&model.params().shapes());
        Ok(Self {
            model,
            adam,
            scheduler,
            config: config.clone(),
            epoch: 0,
            pool: build_pool(t.threads)?,
        })
    }

    /// Continue from `ckpt`. Budgets and thread count come from `config`;
    /// the model and seed must match the checkpoint's.
    pub fn resume(ckpt: &Checkpoint, config: &RunConfig) -> Result<Self> {
        config.validate()?;
        if ckpt.config.model != config.model {
            return Err(Error::Config(
                "checkpoint was trained with a different model configuration".into(),
            ));
        }
        if ckpt.seed != config.train.seed || ckpt.config.train.variable != config.train.variable {
            return Err(Error::Config(
                "checkpoint seed or variable differs from the run configuration".into(),
            ));
        }
        let model = ckpt.build_model()?;
        Ok(Self {
            model,
            adam: ckpt.adam.clone(),
            scheduler: ckpt.scheduler.clone(),
            config: config.clone(),
            epoch: ckpt.epoch,
            pool: build_pool(config.train.threads)?,
        })
    }

    pub fn metric_spec(&self) -> Result<MetricSpec> {
        MetricSpec::for_variable(self.config.train.variable, self.config.train.logit_epsilon)
    }

    /// One optimizer update at the scheduler's current learning rate.
    /// Returns the batch loss, or `None` when the batch had no valid pixel.
    pub fn step(&mut self, batch: &Batch) -> Result<Option<f64>> {
        let t = &self.config.train;
        let kind = t.variable.training_kind();
        let eps = t.logit_epsilon;
        let model = &self.model;
        let Some((loss, mut grads)) = self
            .pool
            .install(|| batch_gradients(model, batch, kind, eps))?
        else {
            return Ok(None);
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {loss} at step {} of epoch {}",
                self.adam.t + 1,
                self.epoch + 1
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of '{}' at step {}",
                self.model.params().names()[i],
                self.adam.t + 1
            )));
        }
        if t.grad_clip > 0.0 {
            clip_global_norm(&mut grads, t.grad_clip);
        }
        let lr = self.scheduler.lr;
        self.adam
            .step(self.model.params_mut().tensors_mut(), &grads, lr)?;
        Ok(Some(loss))
    }

    pub fn evaluate(&self, windows: &[SampleWindow]) -> Result<EvalReport> {
        let spec = self.metric_spec()?;
        self.pool
            .install(|| evaluate_model(&self.model, windows, &spec))
    }

    pub fn checkpoint(&self, metric: f64) -> Checkpoint {
        Checkpoint::capture(
            &self.config,
            &self.model,
            &self.adam,
            &self.scheduler,
            metric,
            self.epoch,
        )
    }

    /// Run epochs until a budget runs out or the schedule stops. With
    /// `out_dir`, writes `best.ckpt` on every improvement, `last.ckpt` after
    /// every epoch and appends to `history.csv`.
    pub fn train(
        &mut self,
        train: &[SampleWindow],
        val: &[SampleWindow],
        out_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<TrainReport> {
        if train.is_empty() {
            return Err(Error::Empty("no training windows".into()));
        }
        if val.is_empty() {
            return Err(Error::Empty("no validation windows".into()));
        }
        let started = Instant::now();
        let t = self.config.train.clone();
        let deadline = (t.budget_hours > 0.0).then(|| Duration::from_secs_f64(t.budget_hours * 3600.0));
        let out = out_dir.map(Path::to_path_buf);
        let mut history_file = match &out {
            Some(dir) => Some(open_history(dir, self.epoch > 0)?),
            None => None,
        };
        let mut best = match &out {
            Some(dir) if self.epoch > 0 && dir.join(BEST_CHECKPOINT).exists() => {
                Checkpoint::load(dir.join(BEST_CHECKPOINT))?
            }
            _ => self.checkpoint(f64::NAN),
        };
        if self.epoch == 0 {
            if let Some(dir) = &out {
                best.save(dir.join(BEST_CHECKPOINT))?;
            }
        }
        let mut last = self.checkpoint(best.metric);
        let mut history = Vec::new();

        let out_of_time = || deadline.is_some_and(|d| started.elapsed() >= d);
        let out_of_steps = |s: &Self| t.max_steps > 0 && s.adam.t >= t.max_steps;
        let stop = loop {
            if self.scheduler.stopped {
                break StopReason::EarlyStop;
            }
            if self.epoch >= t.budget_epochs {
                break StopReason::EpochBudget;
            }
            if out_of_steps(self) {
                break StopReason::StepBudget;
            }
            if out_of_time() {
                break StopReason::TimeBudget;
            }
            let lr = self.scheduler.lr;
            let mut loss_sum = 0.0;
            let mut steps = 0usize;
            let batches = BatchIterator::new(train, t.batch_size, t.seed, self.epoch, t.augment)?;
            let mut cut_short = None;
            for batch in batches {
                if let Some(l) = self.step(&batch?)? {
                    loss_sum += l;
                    steps += 1;
                }
                if out_of_steps(self) {
                    cut_short = Some(StopReason::StepBudget);
                    break;
                }
                if out_of_time() {
                    cut_short = Some(StopReason::TimeBudget);
                    break;
                }
            }
            self.epoch += 1;
            let train_loss = if steps > 0 { loss_sum / steps as f64 } else { f64::NAN };
            let metric = self.evaluate(val)?.value;
            if !metric.is_finite() {
                return Err(Error::NonFinite(format!(
                    "validation metric {metric} after epoch {}",
                    self.epoch
                )));
            }
            let ev = self.scheduler.update(metric)?;
            let ckpt = self.checkpoint(metric);
            if ev.improved {
                if let Some(dir) = &out {
                    ckpt.save(dir.join(BEST_CHECKPOINT))?;
                }
                best = ckpt.clone();
            }
            if let Some(dir) = &out {
                ckpt.save(dir.join(LAST_CHECKPOINT))?;
            }
            last = ckpt;
            let rec = EpochRecord {
                epoch: self.epoch,
                train_loss,
                val_metric: metric,
                lr,
                checkpointed: ev.improved,
            };
            if let Some(f) = history_file.as_mut() {
                writeln!(f, "{}", rec.to_csv_row())?;
                f.flush()?;
            }
            on_epoch(&rec);
            history.push(rec);
            if let Some(r) = cut_short {
                break r;
            }
        };
        Ok(TrainReport {
            best,
            last,
            history,
            stop,
        })
    }
}

fn build_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))
}

fn open_history(dir: &Path, append: bool) -> Result<std::fs::File> {
    std::fs::create_dir_all(dir)?;
    let path: PathBuf = dir.join(HISTORY_FILE);
    if append && path.exists() {
        Ok(OpenOptions::new().append(true).open(path)?)
    } else {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "{HISTORY_HEADER}")?;
        Ok(f)
    }
}
