//! Training loop: per-sample graphs with accumulated gradients, AdamW under
//! a cosine schedule, periodic checkpoints and a CSV log.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::RngCore;

use crate::autograd::Var;
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::{parse_bool, parse_kv};
use crate::data::{random_crop_pair, random_flips, sample_seed, ImagePair, TaskSampler};
use crate::error::{Error, Result};
use crate::loss::total_loss_var;
use crate::metrics::psnr;
use crate::model::{forward_graph, forward_se_symunet, forward_symunet, initial_context, Model};
use crate::optim::{adamw_step, cosine_lr, AdamWConfig};
use crate::tensor::Tensor;

pub const LOG_HEADER: &str = "step,lr,loss,psnr_val";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lambda_fft: f64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub crop: usize,
    pub flips: bool,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
    /// Evaluate validation PSNR every this many steps (0 = never).
    pub val_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            lr_min: 1e-7,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
            lambda_fft: 0.1,
            total_steps: 2000,
            batch_size: 1,
            crop: 128,
            flips: true,
            seed: 0,
            checkpoint_every: 500,
            val_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_min < self.lr0) {
            return bad(format!("lr_min ({}) must be below lr0 ({})", self.lr_min, self.lr0));
        }
        if self.lambda_fft < 0.0 {
            return bad(format!("lambda_fft must be >= 0, got {}", self.lambda_fft));
        }
        if self.batch_size == 0 || self.crop == 0 {
            return bad("batch_size and crop must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Applies one `key=value` setting; returns `false` for unknown keys.
    pub fn apply(&mut self, key: &str, v: &str) -> Result<bool> {
        let f = |v: &str| -> Result<f64> {
            v.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
        };
        let u = |v: &str| -> Result<u64> {
            v.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
        };
        match key {
            "lr0" => self.lr0 = f(v)?,
            "lr_min" => self.lr_min = f(v)?,
            "beta1" => self.beta1 = f(v)?,
            "beta2" => self.beta2 = f(v)?,
            "eps" => self.eps = f(v)?,
            "weight_decay" => self.weight_decay = f(v)?,
            "lambda_fft" => self.lambda_fft = f(v)?,
            "total_steps" | "steps" => self.total_steps = u(v)?,
            "batch_size" => self.batch_size = u(v)? as usize,
            "crop" => self.crop = u(v)? as usize,
            "flips" => self.flips = parse_bool(key, v)?,
            "seed" => self.seed = u(v)?,
            "checkpoint_every" => self.checkpoint_every = u(v)?,
            "val_every" => self.val_every = u(v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr0", self.lr0.to_string()),
            ("lr_min", self.lr_min.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("lambda_fft", self.lambda_fft.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("crop", self.crop.to_string()),
            ("flips", self.flips.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("val_every", self.val_every.to_string()),
        ]
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in parse_kv(text)? {
            if !c.apply(&k, &v)? {
                return Err(Error::Config(format!("unknown training key '{k}'")));
            }
        }
        Ok(c)
    }
}

/// Deterministic source of training samples: the same seed always yields
/// the same (cropped, flipped) pair.
pub trait SampleSource {
    fn sample(&self, seed: u64) -> Result<ImagePair>;
}

/// In-memory pairs with uniform task mixing, random crops and flips.
pub struct PairDataset {
    pairs: Vec<ImagePair>,
    sampler: TaskSampler,
    crop: usize,
    flips: bool,
}

impl PairDataset {
    pub fn new(pairs: Vec<ImagePair>, crop: usize, flips: bool) -> Result<Self> {
        let sampler = TaskSampler::new(&pairs)?;
        for p in &pairs {
            let s = p.clean.shape();
            if s[1] < crop || s[2] < crop {
                return Err(Error::Shape(format!(
                    "training image {}x{} is smaller than the {crop}x{crop} crop",
                    s[1], s[2]
                )));
            }
        }
        Ok(Self { pairs, sampler, crop, flips })
    }

    pub fn pairs(&self) -> &[ImagePair] {
        &self.pairs
    }
}

impl SampleSource for PairDataset {
    fn sample(&self, seed: u64) -> Result<ImagePair> {
        let pair = &self.pairs[self.sampler.pick(sample_seed(seed, 0))];
        let s = pair.clean.shape();
        let mut out = if s[1] == self.crop && s[2] == self.crop {
            pair.clone()
        } else {
            random_crop_pair(pair, self.crop, sample_seed(seed, 1))?
        };
        if self.flips {
            out = random_flips(&out, sample_seed(seed, 2));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub psnr_val: Option<f64>,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        let p = self.psnr_val.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!("{},{:e},{:.9},{}", self.step, self.lr, self.loss, p)
    }
}

#[derive(Clone, Debug, Default)]
pub struct LoopOptions {
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    /// Pairs evaluated (full image, no augmentation) for `psnr_val`.
    pub validation: Vec<ImagePair>,
    /// Stop once validation PSNR exceeds this value.
    pub target_psnr: Option<f64>,
    /// Stop after this step even if `total_steps` is larger.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub rows: Vec<LogRow>,
    pub stopped_early: bool,
}

/// Restores each degraded input with the model (guided when the model is).
pub fn restore(model: &Model<f32>, y: &Tensor<f32>) -> Result<Tensor<f32>> {
    if model.config().guidance_mode.is_guided() {
        Ok(forward_se_symunet(model, y)?.0)
    } else {
        forward_symunet(model, y)
    }
}

/// Mean PSNR of the model's restorations over `pairs`.
pub fn mean_psnr(model: &Model<f32>, pairs: &[ImagePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Training("no pairs to evaluate".into()));
    }
    let mut s = 0.0;
    for p in pairs {
        s += psnr(&restore(model, &p.degraded)?, &p.clean, 1.0)?;
    }
    Ok(s / pairs.len() as f64)
}

/// Loss and gradients for one batch, averaged over its samples.
pub fn batch_gradients(
    model: &Model<f32>,
    batch: &[ImagePair],
    lambda_fft: f64,
) -> Result<(f64, Vec<Option<Vec<f32>>>)> {
    let store = model.store();
    let mut grads: Vec<Option<Vec<f32>>> = vec![None; store.len()];
    let mut loss_sum = 0.0;
    let inv = 1.0 / batch.len() as f32;
    for pair in batch {
        let b = store.bind(true);
        let ctx = if model.config().guidance_mode.is_guided() {
            Some(initial_context(model, &pair.degraded)?)
        } else {
            None
        };
        let y = Var::constant(pair.degraded.clone());
        let out = forward_graph(model, &b, &y, ctx.as_ref(), &[])?;
        let loss = total_loss_var(&out.output, &Var::constant(pair.clean.clone()), lambda_fft)?;
        let value = loss.item() as f64;
        if !value.is_finite() {
            return Ok((value, grads));
        }
        loss_sum += value;
        let mut g = loss.scale(inv).backward()?;
        for (slot, v) in grads.iter_mut().zip(b.vars()) {
            if let Some(gv) = g.take(v) {
                match slot {
                    Some(acc) => acc.iter_mut().zip(&gv).for_each(|(a, x)| *a += *x),
                    None => *slot = Some(gv),
                }
            }
        }
    }
    Ok((loss_sum / batch.len() as f64, grads))
}

fn append_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(LOG_HEADER);
        text.push('\n');
    }
    for r in rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Runs training from `ckpt.adam.step` up to `tcfg.total_steps`. Each step
/// draws one seed from the checkpointed rng and derives the batch from it,
/// so a resumed run replays the uninterrupted one exactly.
pub fn train_loop(
    ckpt: &mut Checkpoint,
    data: &dyn SampleSource,
    tcfg: &TrainConfig,
    opts: &LoopOptions,
) -> Result<TrainReport> {
    tcfg.validate()?;
    let hp = tcfg.adamw();
    let mut report = TrainReport::default();
    let mut pending: Vec<LogRow> = Vec::new();
    let end = opts.stop_after.map_or(tcfg.total_steps, |s| s.min(tcfg.total_steps));
    if let Some(dir) = &opts.checkpoint_dir {
        fs::create_dir_all(dir.parent().unwrap_or(Path::new("."))).ok();
    }
    let mut last_saved = ckpt.adam.step;
    let flush = |pending: &mut Vec<LogRow>| -> Result<()> {
        if let Some(p) = &opts.log_path {
            append_log(p, pending)?;
        }
        pending.clear();
        Ok(())
    };
    while ckpt.adam.step < end {
        let step = ckpt.adam.step;
        let step_seed = ckpt.rng.next_u64();
        let batch = (0..tcfg.batch_size)
            .map(|j| data.sample(sample_seed(step_seed, j as u64)))
            .collect::<Result<Vec<_>>>()?;
        let (loss, grads) = batch_gradients(&ckpt.model, &batch, tcfg.lambda_fft)?;
        if !loss.is_finite() {
            flush(&mut pending)?;
            return Err(Error::Training(format!(
                "non-finite loss at step {step}; last checkpoint (step {last_saved}) retained"
            )));
        }
        let lr = cosine_lr(step, tcfg.total_steps, tcfg.lr0, tcfg.lr_min);
        adamw_step(ckpt.model.store_mut(), &grads, &mut ckpt.adam, lr, &hp)?;
        let done = ckpt.adam.step;
        let psnr_val = if tcfg.val_every > 0 && done % tcfg.val_every == 0 && !opts.validation.is_empty() {
            Some(mean_psnr(&ckpt.model, &opts.validation)?)
        } else {
            None
        };
        let row = LogRow { step: done, lr, loss, psnr_val };
        pending.push(row.clone());
        report.rows.push(row);
        let hit_target = matches!((psnr_val, opts.target_psnr), (Some(p), Some(t)) if p > t);
        let periodic = tcfg.checkpoint_every > 0 && done % tcfg.checkpoint_every == 0;
        if let Some(dir) = &opts.checkpoint_dir {
            if periodic || done == end || hit_target {
                save_checkpoint(dir, ckpt)?;
                last_saved = done;
                flush(&mut pending)?;
            }
        }
        if hit_target {
            report.stopped_early = true;
            break;
        }
    }
    flush(&mut pending)?;
    Ok(report)
}
