//! Training loop: AdamW with decoupled weight decay, linear warmup into
//! polynomial learning-rate decay, periodic held-out dice evaluation,
//! JSON-lines metrics, and checkpointing.
//!
//! Everything here is deterministic: a fixed `(seed, config)` pair fully
//! determines batch composition, augmentation draws, and therefore the whole
//! weight trajectory, bit for bit. A single logical thread owns the weights
//! and optimizer state.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::{augment, VolumeSample};
use crate::error::{Error, Result};
use crate::loss::{argmax_classes, dice_ce_loss, dice_score, SoftDiceConfig};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

/// Linear warmup from `warmup_start` to `warmup_end` over `warmup_steps`,
/// then polynomial decay from `warmup_end` to zero at `total_steps`.
///
/// `constant_lr`, when set, bypasses the schedule entirely and holds the
/// learning rate fixed for every step; the warmup/decay fields are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub warmup_start: f32,
    pub warmup_end: f32,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub poly_power: f32,
    #[serde(default)]
    pub constant_lr: Option<f32>,
}

impl ScheduleConfig {
    /// Standard schedule for a run of `total_steps`: warmup from 4e-6 to the
    /// 4e-4 peak over the first 5% of steps, then polynomial decay with
    /// power 0.9.
    pub fn for_total_steps(total_steps: usize) -> ScheduleConfig {
        ScheduleConfig {
            warmup_start: 4e-6,
            warmup_end: 4e-4,
            warmup_steps: total_steps / 20,
            total_steps,
            poly_power: 0.9,
            constant_lr: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(lr) = self.constant_lr {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("constant_lr must be finite and positive, got {lr}")));
            }
            return Ok(());
        }
        if !(self.warmup_start > 0.0 && self.warmup_start.is_finite()) {
            return Err(Error::Config(format!(
                "warmup_start must be positive, got {}",
                self.warmup_start
            )));
        }
        if !(self.warmup_end > self.warmup_start && self.warmup_end.is_finite()) {
            return Err(Error::Config(format!(
                "warmup_end must exceed warmup_start, got {} <= {}",
                self.warmup_end, self.warmup_start
            )));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.poly_power > 0.0 && self.poly_power.is_finite()) {
            return Err(Error::Config(format!(
                "poly_power must be positive, got {}",
                self.poly_power
            )));
        }
        Ok(())
    }
}

/// Learning rate for a given optimizer step.
///
/// Exact endpoints: step 0 yields `warmup_start`, step `warmup_steps` yields
/// `warmup_end` (the decay branch at progress 0, so the junction is
/// continuous), and any step at or past `total_steps` yields 0. After warmup
/// the rate is monotone nonincreasing.
pub fn lr_at(step: usize, cfg: &ScheduleConfig) -> f32 {
    if let Some(lr) = cfg.constant_lr {
        return lr;
    }
    if step < cfg.warmup_steps {
        let t = step as f64 / cfg.warmup_steps as f64;
        (cfg.warmup_start as f64 + (cfg.warmup_end as f64 - cfg.warmup_start as f64) * t) as f32
    } else {
        let span = (cfg.total_steps - cfg.warmup_steps) as f64;
        let t = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
        (cfg.warmup_end as f64 * (1.0 - t).powf(cfg.poly_power as f64)) as f32
    }
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> AdamWConfig {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b >= 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// AdamW optimizer state: first/second moment buffers aligned with a fixed
/// parameter list, plus the step counter used for bias correction.
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: usize,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(params: &[(String, Tensor)], cfg: AdamWConfig) -> AdamW {
        let m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamW { cfg, step: 0, m, v }
    }

    /// Number of optimizer steps taken so far.
    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update over `params`, in list order, reading each tensor's
    /// accumulated gradient (a missing gradient counts as zero).
    ///
    /// Decoupled weight decay runs before the Adam update, so a zero-gradient
    /// step still shrinks every weight by exactly `1 - lr*wd`. Moments are
    /// bias-corrected; with `weight_decay` 0 this is plain Adam.
    pub fn step(&mut self, params: &[(String, Tensor)], lr: f32) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - (beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (beta2 as f64).powi(self.step as i32);
        let decay = 1.0 - lr * weight_decay;
        for (i, (name, p)) in params.iter().enumerate() {
            let n = p.numel();
            if self.m[i].len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "optimizer buffer for {name:?} holds {} elements, parameter has {n}",
                    self.m[i].len()
                )));
            }
            let grad = p.grad();
            if let Some(g) = &grad {
                if g.len() != n {
                    return Err(Error::ShapeMismatch(format!(
                        "gradient for {name:?} has {} elements, parameter has {n}",
                        g.len()
                    )));
                }
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            p.update_data(|data| {
                for j in 0..n {
                    let g = grad.as_ref().map_or(0.0, |g| g[j]);
                    data[j] *= decay;
                    m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                    v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                    let mh = (m[j] as f64 / bc1) as f32;
                    let vh = (v[j] as f64 / bc2) as f32;
                    data[j] -= lr * mh / (vh.sqrt() + eps);
                }
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds model init, epoch shuffles, and augmentation draws.
    pub seed: u64,
    /// Run a held-out evaluation every this many epochs (0 = final only).
    pub eval_every: usize,
    /// Write a checkpoint every this many epochs (0 = final only).
    pub checkpoint_every: usize,
    pub augment: bool,
    pub optimizer: AdamWConfig,
    pub dice: SoftDiceConfig,
    pub warmup_start: f32,
    pub warmup_end: f32,
    /// Warmup length as a fraction of total steps.
    pub warmup_ratio: f32,
    pub poly_power: f32,
    /// Fixed learning rate overriding the warmup/decay schedule.
    pub constant_lr: Option<f32>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 200,
            batch_size: 4,
            seed: 0,
            eval_every: 10,
            checkpoint_every: 0,
            augment: true,
            optimizer: AdamWConfig::default(),
            dice: SoftDiceConfig::default(),
            warmup_start: 4e-6,
            warmup_end: 4e-4,
            warmup_ratio: 0.05,
            poly_power: 0.9,
            constant_lr: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.warmup_ratio >= 0.0 && self.warmup_ratio < 1.0) {
            return Err(Error::Config(format!(
                "warmup_ratio must lie in [0, 1), got {}",
                self.warmup_ratio
            )));
        }
        self.optimizer.validate()?;
        self.dice.validate()?;
        // Schedule fields are validated with the real step counts once the
        // dataset size is known; see `schedule_for`.
        Ok(())
    }

    /// Concrete schedule for a run of `steps_per_epoch * epochs` steps.
    pub fn schedule_for(&self, steps_per_epoch: usize) -> Result<ScheduleConfig> {
        let total = steps_per_epoch
            .checked_mul(self.epochs)
            .ok_or_else(|| Error::Config("total step count overflows".into()))?;
        let warmup =
            (((total as f64) * self.warmup_ratio as f64).round() as usize).min(total.saturating_sub(1));
        let sched = ScheduleConfig {
            warmup_start: self.warmup_start,
            warmup_end: self.warmup_end,
            warmup_steps: warmup,
            total_steps: total,
            poly_power: self.poly_power,
            constant_lr: self.constant_lr,
        };
        sched.validate()?;
        Ok(sched)
    }
}

/// One line of the metrics log. Dice fields are present only on evaluation
/// records; step records leave them `None` (serialized as `null`). A step
/// record's `loss` is the training loss at that step; an evaluation record's
/// `loss` is the held-out mean loss. `dice_per_class` lists foreground
/// classes only (entry `i` scores class `i + 1`), and `mean_dice` averages
/// that list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f32,
    pub loss: f32,
    pub dice_per_class: Option<Vec<f32>>,
    pub mean_dice: Option<f32>,
    pub wall_ms: u64,
}

/// Everything train() measured, kept in memory for callers and tests; the
/// same records go to `metrics.jsonl` when an output directory is given.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub records: Vec<MetricsRecord>,
    /// Mean loss per epoch, index = epoch.
    pub epoch_losses: Vec<f32>,
    /// Per-class dice and foreground mean from the last evaluation.
    pub final_eval: Option<(Vec<f32>, f32)>,
    pub steps: usize,
}

/// File name of the JSON-lines metrics log inside the output directory.
pub const METRICS_FILE: &str = "metrics.jsonl";

fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    let mut z = seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stack samples into one `[B, C, D, H, W]` input tensor and a flat label
/// vector. All samples must share channel count and extents.
pub fn stack_samples(samples: &[VolumeSample]) -> Result<(Tensor, Vec<u8>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("cannot stack an empty batch".into()))?;
    let (d, h, w) = first.shape;
    let c = first.image.shape()[0];
    let vox = d * h * w;
    let mut data = Vec::with_capacity(samples.len() * c * vox);
    let mut labels = Vec::with_capacity(samples.len() * vox);
    for s in samples {
        if s.shape != first.shape || s.image.shape()[0] != c {
            return Err(Error::ShapeMismatch(format!(
                "cannot stack {:?}x{:?} with {:?}x{:?}",
                s.image.shape()[0],
                s.shape,
                c,
                first.shape
            )));
        }
        data.extend_from_slice(&s.image.data());
        labels.extend_from_slice(&s.mask);
    }
    Ok((Tensor::from_vec(data, &[samples.len(), c, d, h, w]), labels))
}

/// Held-out evaluation summary: per-case hard dice plus the mean combined
/// loss over the split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    /// Foreground dice averaged over cases; entry `i` scores class `i + 1`
    /// (background is excluded, matching [`dice_score`]).
    pub dice_per_class: Vec<f32>,
    /// Mean of `dice_per_class`.
    pub mean_dice: f32,
    /// Case-weighted mean dice+cross-entropy loss over the split.
    pub loss: f32,
}

/// Per-case dice of `model` over `eval_set`: each sample is segmented by
/// logit argmax and scored against its mask, then per-class dice is averaged
/// over cases. The same logits also feed the combined loss, so the split is
/// forwarded once.
pub fn evaluate_with_loss(
    model: &Model,
    eval_set: &[VolumeSample],
    batch_size: usize,
    dice: &SoftDiceConfig,
) -> Result<EvalSummary> {
    let k = model.config.num_classes;
    if eval_set.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    // dice_score reports foreground classes only: slot i scores class i + 1.
    let mut per_class_sum = vec![0.0f64; k - 1];
    let mut loss_sum = 0.0f64;
    for chunk in eval_set.chunks(batch_size.max(1)) {
        let (x, labels) = stack_samples(chunk)?;
        let logits = model.forward(&x)?;
        loss_sum += dice_ce_loss(&logits, &labels, dice)?.item() as f64 * chunk.len() as f64;
        let preds = argmax_classes(&logits)?;
        let vox = preds.len() / chunk.len();
        for (bi, s) in chunk.iter().enumerate() {
            let (per_class, _) = dice_score(&preds[bi * vox..(bi + 1) * vox], &s.mask, k)?;
            debug_assert_eq!(per_class.len(), k - 1);
            for (acc, d) in per_class_sum.iter_mut().zip(&per_class) {
                *acc += *d as f64;
            }
        }
    }
    let cases = eval_set.len() as f64;
    let dice_per_class: Vec<f32> = per_class_sum.iter().map(|s| (s / cases) as f32).collect();
    let mean_dice =
        (per_class_sum.iter().sum::<f64>() / (cases * per_class_sum.len() as f64)) as f32;
    Ok(EvalSummary { dice_per_class, mean_dice, loss: (loss_sum / cases) as f32 })
}

/// [`evaluate_with_loss`] with the default dice smoothing, returning only the
/// `(per_class, foreground_mean)` dice pair.
pub fn evaluate(model: &Model, eval_set: &[VolumeSample], batch_size: usize) -> Result<(Vec<f32>, f32)> {
    let s = evaluate_with_loss(model, eval_set, batch_size, &SoftDiceConfig::default())?;
    Ok((s.dice_per_class, s.mean_dice))
}

/// Train a freshly initialized model on `train_set`, evaluating on
/// `eval_set`. When `out_dir` is given, writes `metrics.jsonl` plus
/// checkpoint directories (`checkpoint_epoch<NNNN>` at the configured cadence
/// and `checkpoint_final` at the end) underneath it.
///
/// The first logged loss is measured at epoch-0 start, before any optimizer
/// step. A NaN or infinite loss aborts with `NonFiniteLoss` after flushing
/// the metrics written so far.
pub fn train(
    model_cfg: &ModelConfig,
    train_set: &[VolumeSample],
    eval_set: &[VolumeSample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    for s in train_set.iter().chain(eval_set) {
        if s.image.shape()[0] != model_cfg.in_channels {
            return Err(Error::Config(format!(
                "sample has {} channels, model expects {}",
                s.image.shape()[0],
                model_cfg.in_channels
            )));
        }
        if s.num_classes != model_cfg.num_classes {
            return Err(Error::Config(format!(
                "sample has {} classes, model expects {}",
                s.num_classes, model_cfg.num_classes
            )));
        }
    }

    let model = Model::new(model_cfg.clone(), cfg.seed)?;
    let params = model.named_params();
    let mut opt = AdamW::new(&params, cfg.optimizer);
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let sched = cfg.schedule_for(steps_per_epoch)?;

    let mut writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(fs::File::create(dir.join(METRICS_FILE))?))
        }
        None => None,
    };
    let mut report = TrainReport::default();
    let start = Instant::now();
    let mut global_step = 0usize;
    let mut last_lr = 0.0f32;

    let log = |report: &mut TrainReport,
                   writer: &mut Option<std::io::BufWriter<fs::File>>,
                   rec: MetricsRecord|
     -> Result<()> {
        if let Some(w) = writer {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
        }
        report.records.push(rec);
        Ok(())
    };

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch as u64));
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        let mut loss_count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<VolumeSample> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        augment(&train_set[i], &mut rng)
                    } else {
                        train_set[i].clone()
                    }
                })
                .collect();
            let (x, labels) = stack_samples(&batch)?;
            let logits = model.forward(&x)?;
            let loss_t = dice_ce_loss(&logits, &labels, &cfg.dice)?;
            let loss = loss_t.item();
            if !loss.is_finite() {
                if let Some(w) = &mut writer {
                    w.flush()?;
                }
                return Err(Error::NonFiniteLoss { step: global_step, loss });
            }
            for (_, p) in &params {
                p.zero_grad();
            }
            loss_t.backward()?;
            let lr = lr_at(global_step, &sched);
            opt.step(&params, lr)?;
            last_lr = lr;

            log(
                &mut report,
                &mut writer,
                MetricsRecord {
                    epoch,
                    step: global_step,
                    lr,
                    loss,
                    dice_per_class: None,
                    mean_dice: None,
                    wall_ms: start.elapsed().as_millis() as u64,
                },
            )?;
            loss_sum += loss as f64;
            loss_count += 1;
            global_step += 1;
        }
        let epoch_loss = (loss_sum / loss_count as f64) as f32;
        report.epoch_losses.push(epoch_loss);

        let last_epoch = epoch + 1 == cfg.epochs;
        let eval_due = !eval_set.is_empty()
            && (last_epoch || (cfg.eval_every != 0 && (epoch + 1) % cfg.eval_every == 0));
        if eval_due {
            let summary = evaluate_with_loss(&model, eval_set, cfg.batch_size, &cfg.dice)?;
            log(
                &mut report,
                &mut writer,
                MetricsRecord {
                    epoch,
                    step: global_step,
                    lr: last_lr,
                    loss: summary.loss,
                    dice_per_class: Some(summary.dice_per_class.clone()),
                    mean_dice: Some(summary.mean_dice),
                    wall_ms: start.elapsed().as_millis() as u64,
                },
            )?;
            report.final_eval = Some((summary.dice_per_class, summary.mean_dice));
        }

        if let Some(dir) = out_dir {
            let ckpt_due = cfg.checkpoint_every != 0 && (epoch + 1) % cfg.checkpoint_every == 0;
            if ckpt_due && !last_epoch {
                save_checkpoint(&dir.join(format!("checkpoint_epoch{:04}", epoch + 1)), &model, global_step)?;
            }
            if last_epoch {
                save_checkpoint(&dir.join("checkpoint_final"), &model, global_step)?;
            }
        }
    }
    if let Some(w) = &mut writer {
        w.flush()?;
    }
    report.steps = global_step;
    Ok((model, report))
}
