//! Masked objective, AdamW, scheduled sampling and the epoch loop with early stopping.

mod loss;
mod optim;
mod schedule;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{masked_mse, masked_mse_value};
pub use optim::{clip_grad_norm, global_norm, AdamW, AdamWConfig};
pub use schedule::{sample_teacher, scheduled_sampling_mask, SamplingSchedule};

use crate::error::{ensure, Error, Result};
use crate::evaluation::{evaluate_forecasts, predict_cubes, spatial_shuffle};
use crate::minicube::Minicube;
use crate::models::{Batch, Checkpoint, Crop, Family, Model};
use crate::nn::Ctx;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap.
    pub grad_clip: f64,
    /// Weight of the ST-LSTM memory decoupling penalty.
    pub decouple_weight: f64,
    /// Teacher forcing during the target period (next-frame recurrent model only).
    pub sampling: Option<SamplingSchedule>,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Side of the random square crop each training batch is cut to.
    pub crop: Option<usize>,
    /// Spatially shuffle every training and validation batch.
    pub shuffle: bool,
    pub eval_batch_size: usize,
}

impl TrainConfig {
    /// Hyperparameters of the original 100-epoch runs.
    pub fn paper(family: Family) -> Self {
        let (batch_size, learning_rate) = match family {
            Family::ConvlstmMeteo | Family::Lstm1x1 => (32, 4e-5),
            Family::PredrnnMeteo => (32, 3e-4),
            Family::SimvpMeteo | Family::UnetNextFrame | Family::UnetNextCuboid => (64, 6e-4),
        };
        let predrnn = family == Family::PredrnnMeteo;
        Self {
            epochs: 100,
            batch_size,
            learning_rate,
            weight_decay: 0.01,
            grad_clip: 1.0,
            decouple_weight: if predrnn { 0.1 } else { 0.0 },
            sampling: predrnn.then_some(SamplingSchedule { p0: 1.0, decay_steps: 5000.0 }),
            patience: 10,
            seed: 42,
            crop: None,
            shuffle: false,
            eval_batch_size: 8,
        }
    }

    /// Minutes-scale runs on 200 training cubes: batch 8, 30 epochs, 16×16 crops and
    /// learning rates raised to match the far smaller number of updates.
    pub fn desk(family: Family) -> Self {
        let learning_rate = match family {
            Family::ConvlstmMeteo | Family::Lstm1x1 | Family::PredrnnMeteo => 1e-3,
            Family::SimvpMeteo | Family::UnetNextFrame | Family::UnetNextCuboid => 2e-3,
        };
        let mut c = Self::paper(family);
        c.epochs = 30;
        c.batch_size = 8;
        c.learning_rate = learning_rate;
        c.crop = Some(16);
        if let Some(s) = c.sampling.as_mut() {
            s.decay_steps = 250.0;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1 && self.batch_size >= 1 && self.eval_batch_size >= 1, "epochs and batch sizes must be positive");
        ensure!(self.learning_rate >= 0.0 && self.learning_rate.is_finite(), "learning rate must be finite and non-negative");
        ensure!(self.weight_decay >= 0.0 && self.grad_clip > 0.0, "weight decay must be ≥ 0 and the clip norm > 0");
        ensure!(self.decouple_weight >= 0.0, "decoupling weight must be non-negative");
        ensure!(self.patience >= 1, "patience must be at least 1");
        if let Some(s) = self.sampling {
            ensure!((0.0..=1.0).contains(&s.p0) && s.decay_steps > 0.0, "invalid sampling schedule");
        }
        if let Some(c) = self.crop {
            ensure!(c > 0, "crop size must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rmse: f64,
    pub learning_rate: f64,
    pub steps: u64,
    pub skipped_batches: usize,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    /// One JSON object per epoch.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for e in &self.epochs {
            let line = serde_json::to_string(e).map_err(|err| Error::json(path, err))?;
            writeln!(f, "{line}").map_err(|err| Error::io(path, err))?;
        }
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let epochs = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
            .collect::<Result<_>>()?;
        Ok(Self { epochs })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum TrainStatus {
    Completed,
    EarlyStopped,
    Diverged { epoch: usize },
}

/// Everything needed to continue a run where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub epochs_done: usize,
    pub step: u64,
    pub optimizer: AdamW,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_params: Vec<Tensor<f32>>,
    pub bad_epochs: usize,
    pub log: TrainLog,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    epochs_done: usize,
    step: u64,
    optimizer: AdamWConfig,
    optimizer_step: u64,
    best_val: Option<f64>,
    best_epoch: Option<usize>,
    bad_epochs: usize,
    log: TrainLog,
}

impl TrainState {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Self {
        let optimizer = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..Default::default() }, &model.store);
        Self {
            epochs_done: 0,
            step: 0,
            optimizer,
            best_val: None,
            best_epoch: None,
            best_params: Vec::new(),
            bad_epochs: 0,
            log: TrainLog::default(),
        }
    }

    /// Tensors and JSON metadata for a checkpoint (optimizer moments, best parameters).
    pub fn to_checkpoint_parts(&self, model: &Model) -> (Vec<(String, Tensor<f32>)>, serde_json::Value) {
        let mut tensors = self.optimizer.state_tensors(&model.store);
        for (e, t) in model.store.entries().iter().zip(&self.best_params) {
            tensors.push((format!("best.{}", e.name), t.clone()));
        }
        let meta = StateMeta {
            epochs_done: self.epochs_done,
            step: self.step,
            optimizer: self.optimizer.config,
            optimizer_step: self.optimizer.step,
            best_val: self.best_val,
            best_epoch: self.best_epoch,
            bad_epochs: self.bad_epochs,
            log: self.log.clone(),
        };
        (tensors, serde_json::to_value(meta).expect("serializable"))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: StateMeta = serde_json::from_value(ck.metrics.clone())
            .map_err(|e| Error::Contract(format!("checkpoint has no resumable training state: {e}")))?;
        let optimizer = AdamW::from_state(meta.optimizer, meta.optimizer_step, &ck.model.store, &ck.state)?;
        let best_params: Vec<Tensor<f32>> = ck
            .model
            .store
            .entries()
            .iter()
            .filter_map(|e| ck.state.iter().find(|(n, _)| *n == format!("best.{}", e.name)).map(|(_, t)| t.clone()))
            .collect();
        ensure!(
            best_params.is_empty() || best_params.len() == ck.model.store.len(),
            "checkpoint has an incomplete set of best parameters"
        );
        Ok(Self {
            epochs_done: meta.epochs_done,
            step: meta.step,
            optimizer,
            best_val: meta.best_val,
            best_epoch: meta.best_epoch,
            best_params,
            bad_epochs: meta.bad_epochs,
            log: meta.log,
        })
    }
}

pub struct TrainOutcome {
    /// Best-validation parameters (last finite ones if validation never succeeded).
    pub model: Model,
    pub state: TrainState,
    pub status: TrainStatus,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64 + 1))
}

fn snapshot(model: &Model) -> Vec<Tensor<f32>> {
    model.store.entries().iter().map(|e| (*e.value).clone()).collect()
}

fn restore(model: &mut Model, params: &[Tensor<f32>]) {
    let ids: Vec<_> = model.store.ids().collect();
    for (id, t) in ids.into_iter().zip(params) {
        model.store.set(id, t.clone());
    }
}

/// Macro-averaged RMSE of the scoring protocol; pooled masked RMSE when no pixel
/// survives the filter.
pub fn validation_rmse(model: &Model, cubes: &[&Minicube], batch_size: usize, shuffle_seed: Option<u64>) -> Result<f64> {
    let forecasts = predict_cubes(model, cubes, batch_size, shuffle_seed)?;
    let table = evaluate_forecasts(&model.model_id(), model.config_hash(), cubes, &forecasts)?;
    if let Some(m) = table.macro_avg {
        return Ok(m.rmse);
    }
    let (mut sse, mut n) = (0.0, 0.0);
    for (cube, fc) in cubes.iter().zip(&forecasts) {
        let hw = cube.height() * cube.width();
        let valid = cube.valid_mask()?;
        let start = cube.context_len * hw;
        for (i, &p) in fc.ndvi_hat.data().iter().enumerate() {
            if valid.data()[start + i] > 0.0 {
                sse += (cube.ndvi.data()[start + i] as f64 - p as f64).powi(2);
                n += 1.0;
            }
        }
    }
    ensure!(n > 0.0, "validation cubes have no valid target pixels");
    Ok((sse / n).sqrt())
}

/// One optimizer step on `batch`. `Ok(None)` means the batch had no valid pixels.
fn train_step(
    model: &mut Model,
    state: &mut TrainState,
    cfg: &TrainConfig,
    batch: &Batch,
    teacher: Option<&[bool]>,
) -> Result<Option<f64>> {
    let g = Graph::new();
    let (loss_value, mut grads) = {
        let cx = Ctx::new(&g, &model.store);
        let out = model.rollout(&cx, batch, teacher)?;
        let mse = match masked_mse(&cx, out.pred, &batch.target, &batch.mask) {
            Ok(l) => l,
            Err(Error::NoValidPixels) => return Ok(None),
            Err(e) => return Err(e),
        };
        let loss_value = mse.value().item() as f64;
        let total = match out.penalty {
            Some(p) if cfg.decouple_weight > 0.0 => mse.add(p.scale(cfg.decouple_weight)),
            _ => mse,
        };
        if !loss_value.is_finite() {
            return Ok(Some(loss_value));
        }
        (loss_value, g.backward(total).into_param_grads(model.store.len()))
    };
    let norm = clip_grad_norm(&mut grads, cfg.grad_clip);
    if !norm.is_finite() {
        return Ok(Some(f64::NAN));
    }
    state.optimizer.update(&mut model.store, &grads, cfg.learning_rate);
    state.step += 1;
    Ok(Some(loss_value))
}

pub fn train(model: Model, train: &[&Minicube], val: &[&Minicube], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, train, val, cfg, None, |_, _| Ok(()))
}

/// Runs (or resumes) training; `on_epoch` sees the model and state after every
/// completed epoch, e.g. to write a checkpoint.
pub fn train_with(
    mut model: Model,
    train: &[&Minicube],
    val: &[&Minicube],
    cfg: &TrainConfig,
    resume: Option<TrainState>,
    mut on_epoch: impl FnMut(&Model, &TrainState) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure!(!train.is_empty(), "no training cubes");
    ensure!(!val.is_empty(), "no validation cubes");
    let mut state = resume.unwrap_or_else(|| TrainState::new(&model, cfg));
    let (h, w) = (train[0].height(), train[0].width());
    if let Some(c) = cfg.crop {
        ensure!(c <= h && c <= w, "crop {c} exceeds the {h}x{w} cubes");
    }
    let sampling = if model.config.family.is_next_frame() { cfg.sampling } else { None };
    let (t, k) = (model.config.context_len, model.config.target_len);
    let mut status = TrainStatus::Completed;
    for epoch in state.epochs_done..cfg.epochs {
        if state.bad_epochs >= cfg.patience {
            status = TrainStatus::EarlyStopped;
            break;
        }
        let clock = Instant::now();
        let mut rng = epoch_rng(cfg.seed, epoch);
        // Separate stream so shuffled and aligned runs draw the same crops, order and teacher flags.
        let mut shuffle_rng = epoch_rng(!cfg.seed, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches, mut skipped) = (0.0, 0usize, 0usize);
        let mut diverged = false;
        for chunk in order.chunks(cfg.batch_size) {
            let cubes: Vec<&Minicube> = chunk.iter().map(|&i| train[i]).collect();
            let crop = cfg.crop.map(|size| Crop {
                top: rng.random_range(0..=h - size),
                left: rng.random_range(0..=w - size),
                size,
            });
            let mut batch = Batch::from_cubes(&cubes, &model.weather_stats, crop)?;
            if cfg.shuffle {
                batch = spatial_shuffle(&batch, shuffle_rng.random()).0;
            }
            let teacher = sampling.map(|s| sample_teacher(&scheduled_sampling_mask(state.step, &s, t, k)[t..], &mut rng));
            match train_step(&mut model, &mut state, cfg, &batch, teacher.as_deref())? {
                None => skipped += 1,
                Some(l) if !l.is_finite() => {
                    diverged = true;
                    break;
                }
                Some(l) => {
                    loss_sum += l;
                    batches += 1;
                }
            }
        }
        let val_rmse = if diverged {
            f64::NAN
        } else {
            validation_rmse(&model, val, cfg.eval_batch_size, cfg.shuffle.then_some(cfg.seed ^ epoch as u64))?
        };
        if diverged || !val_rmse.is_finite() {
            status = TrainStatus::Diverged { epoch };
            break;
        }
        state.log.epochs.push(EpochLog {
            epoch,
            train_loss: if batches > 0 { loss_sum / batches as f64 } else { f64::NAN },
            val_rmse,
            learning_rate: cfg.learning_rate,
            steps: state.step,
            skipped_batches: skipped,
            wall_clock_s: clock.elapsed().as_secs_f64(),
        });
        if state.best_val.is_none_or(|b| val_rmse < b) {
            state.best_val = Some(val_rmse);
            state.best_epoch = Some(epoch);
            state.best_params = snapshot(&model);
            state.bad_epochs = 0;
        } else {
            state.bad_epochs += 1;
        }
        state.epochs_done = epoch + 1;
        on_epoch(&model, &state)?;
        if state.bad_epochs >= cfg.patience {
            status = TrainStatus::EarlyStopped;
            break;
        }
    }
    if !state.best_params.is_empty() {
        let best = state.best_params.clone();
        restore(&mut model, &best);
    }
    Ok(TrainOutcome { model, state, status })
}

#[cfg(test)]
mod tests;
