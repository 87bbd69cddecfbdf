//! `symunet` subcommands. Each command returns its report text; the binary
//! prints it and maps errors to a non-zero exit code.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use symunet_core::checkpoint::{load_checkpoint, load_model, save_checkpoint, Checkpoint};
use symunet_core::config::{parse_kv, GuidanceMode, ModelConfig};
use symunet_core::data::{
    crop_back, list_pngs, load_png, pad_to_multiple, parse_degradation, save_gray_png, save_png,
    synthesize_dataset, ImagePair, Manifest,
};
use symunet_core::metrics::{psnr, ssim};
use symunet_core::model::{build_any, count_parameters, estimate_flops, extract_features, Model};
use symunet_core::train::{restore, train_loop, LoopOptions, PairDataset, TrainConfig};
use symunet_core::{Error, Result, Tensor};

/// Reference complexity of the published model.
pub const REFERENCE_PARAMS: f64 = 22.26e6;
pub const REFERENCE_GFLOPS: f64 = 78.47;

#[derive(Parser, Debug)]
#[command(name = "symunet", version, about = "All-in-one image restoration with a symmetric U-Net")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Degrade clean PNGs and write a dataset manifest.
    Synth(SynthArgs),
    /// Write a freshly initialized checkpoint.
    Init(InitArgs),
    /// Train on a dataset manifest.
    Train(TrainArgs),
    /// Restore one PNG.
    Infer(InferArgs),
    /// Per-task PSNR/SSIM over a pairs manifest.
    Eval(EvalArgs),
    /// Parameter and FLOP counts of a configuration.
    Count(ModelArgs),
    /// Save feature maps as grayscale PNGs and SYMT tensors.
    DumpFeatures(DumpArgs),
}

/// Model selection shared by commands that build a model.
#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// Flat key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_guidance)]
    pub guidance_mode: Option<GuidanceMode>,
    /// Build the asymmetric ablation baseline.
    #[arg(long)]
    pub asymmetric: bool,
    /// Config overrides, applied after the file.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

fn parse_guidance(s: &str) -> std::result::Result<GuidanceMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Directory of clean PNG images.
    #[arg(long)]
    pub clean_dir: PathBuf,
    /// Degradation as `kind` or `kind:param=value,...`; repeatable.
    #[arg(long = "kind")]
    pub kinds: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct InitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Dataset manifest written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory: checkpoint/, train_log.csv, train_config.txt.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from the checkpoint in the run directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many total steps without changing the schedule.
    #[arg(long)]
    pub stop_after: Option<u64>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Pairs manifest (`<clean>\t<kind>\t<params>\t<seed>` lines).
    #[arg(long)]
    pub pairs: PathBuf,
    /// Also write the results as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Comma-separated tap names.
    #[arg(long, value_delimiter = ',', default_value = "f_enc_0,f_dec_0")]
    pub taps: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Init(a) => cmd_init(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Infer(a) => cmd_infer(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Count(a) => cmd_count(&a),
        Command::DumpFeatures(a) => cmd_dump_features(&a),
    }
}

/// Model and training settings from a config file plus overrides. Keys are
/// offered to the model config first, then to the training config.
#[derive(Clone, Debug, Default)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

fn apply_pair(s: &mut Settings, key: &str, value: &str) -> Result<()> {
    if key == "model_seed" {
        s.seed = value
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("model_seed: cannot parse '{value}'")))?;
        return Ok(());
    }
    if s.model.apply(key, value)? || s.train.apply(key, value)? {
        return Ok(());
    }
    Err(Error::Config(format!("unknown config key '{key}'")))
}

pub fn resolve_settings(args: &ModelArgs) -> Result<Settings> {
    let mut s = Settings::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (k, v) in parse_kv(&text)? {
            apply_pair(&mut s, &k, &v)?;
        }
    }
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{o}' is not of the form key=value")))?;
        apply_pair(&mut s, k.trim(), v.trim())?;
    }
    if let Some(g) = args.guidance_mode {
        s.model.guidance_mode = g;
    }
    if args.asymmetric {
        s.model.symmetric = false;
    }
    if let Some(seed) = args.seed {
        s.seed = seed;
        s.train.seed = seed;
    }
    s.model.validate()?;
    s.train.validate()?;
    Ok(s)
}

fn settings_text(s: &Settings) -> String {
    let mut pairs: Vec<(&str, String)> = vec![("model_seed", s.seed.to_string())];
    pairs.extend(s.model.to_pairs());
    pairs.extend(s.train.to_pairs());
    symunet_core::config::to_kv_text(&pairs)
}

fn variant_name(cfg: &ModelConfig) -> &'static str {
    match (cfg.symmetric, cfg.guidance_mode) {
        (false, _) => "asymmetric baseline",
        (true, GuidanceMode::None) => "SymUNet",
        (true, GuidanceMode::OneWay) => "SE-SymUNet (one-way guidance)",
        (true, GuidanceMode::Bidirectional) => "SE-SymUNet",
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<String> {
    let degradations = a
        .kinds
        .iter()
        .map(|k| parse_degradation(k))
        .collect::<Result<Vec<_>>>()?;
    let clean = list_pngs(&a.clean_dir)?;
    let m = synthesize_dataset(&clean, &degradations, a.seed, &a.out)?;
    Ok(format!(
        "wrote {} pairs ({} images x {} degradations) to {}\n",
        m.entries.len(),
        clean.len(),
        degradations.len(),
        a.out.join("manifest.txt").display()
    ))
}

pub fn cmd_init(a: &InitArgs) -> Result<String> {
    let s = resolve_settings(&a.model)?;
    let model: Model<f32> = build_any(&s.model, s.seed)?;
    let n = count_parameters(&model);
    save_checkpoint(&a.out, &Checkpoint::fresh(model, s.train.seed))?;
    Ok(format!("initialized {} ({n} parameters) at {}\n", variant_name(&s.model), a.out.display()))
}

pub fn cmd_train(a: &TrainArgs) -> Result<String> {
    let ckpt_dir = a.out.join("checkpoint");
    let log_path = a.out.join("train_log.csv");
    let cfg_path = a.out.join("train_config.txt");
    let (mut ckpt, mut s) = if a.resume {
        let ckpt = load_checkpoint(&ckpt_dir)?;
        let saved = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let mut s = Settings::default();
        for (k, v) in parse_kv(&saved)? {
            apply_pair(&mut s, &k, &v)?;
        }
        (ckpt, s)
    } else {
        if ckpt_dir.exists() {
            return Err(Error::Config(format!(
                "{} already holds a checkpoint; pass --resume or choose another --out",
                a.out.display()
            )));
        }
        let s = resolve_settings(&a.model)?;
        let model: Model<f32> = build_any(&s.model, s.seed)?;
        (Checkpoint::fresh(model, s.train.seed), s)
    };
    if let Some(n) = a.steps {
        s.train.total_steps = n;
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    fs::write(&cfg_path, settings_text(&s)).map_err(|e| Error::io(&cfg_path, e))?;

    let manifest = Manifest::read(&a.data)?;
    let pairs = manifest.load_all()?;
    let data = PairDataset::new(pairs, s.train.crop, s.train.flips)?;
    let opts = LoopOptions {
        checkpoint_dir: Some(ckpt_dir.clone()),
        log_path: Some(log_path.clone()),
        stop_after: a.stop_after,
        ..Default::default()
    };
    let start = ckpt.adam.step;
    let report = train_loop(&mut ckpt, &data, &s.train, &opts)?;
    if ckpt.adam.step == start && !ckpt_dir.exists() {
        save_checkpoint(&ckpt_dir, &ckpt)?;
    }
    let last = report.rows.last().map(|r| format!("{:.6}", r.loss)).unwrap_or_else(|| "-".into());
    Ok(format!(
        "trained {} from step {start} to {} (last loss {last}); checkpoint {}\n",
        variant_name(&s.model),
        ckpt.adam.step,
        ckpt_dir.display()
    ))
}

/// Pads to the model's size multiple, restores and crops back.
pub fn restore_any_size(model: &Model<f32>, y: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (padded, orig) = pad_to_multiple(y, model.config().required_multiple())?;
    crop_back(&restore(model, &padded)?, orig)
}

pub fn cmd_infer(a: &InferArgs) -> Result<String> {
    let model = load_model(&a.checkpoint)?;
    let y = load_png(&a.input)?;
    let x = restore_any_size(&model, &y)?;
    save_png(&a.output, &x)?;
    Ok(format!("wrote {}\n", a.output.display()))
}

/// Per-task mean PSNR/SSIM in first-seen task order.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTable {
    pub rows: Vec<(String, usize, f64, f64)>,
}

impl EvalTable {
    pub const CSV_HEADER: &'static str = "task,count,psnr,ssim";

    /// Unweighted mean over tasks.
    pub fn average(&self) -> (f64, f64) {
        let n = self.rows.len() as f64;
        (
            self.rows.iter().map(|r| r.2).sum::<f64>() / n,
            self.rows.iter().map(|r| r.3).sum::<f64>() / n,
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        let total: usize = self.rows.iter().map(|r| r.1).sum();
        for (t, n, p, q) in &self.rows {
            s.push_str(&format!("{t},{n},{p:.4},{q:.4}\n"));
        }
        let (p, q) = self.average();
        s.push_str(&format!("Average,{total},{p:.4},{q:.4}\n"));
        s
    }

    /// One column per task plus `Average`, cells `PSNR/SSIM`.
    pub fn to_text(&self, method: &str) -> String {
        let mut heads: Vec<String> = self.rows.iter().map(|r| r.0.clone()).collect();
        heads.push("Average".into());
        let (ap, aq) = self.average();
        let mut cells: Vec<String> = self.rows.iter().map(|r| format!("{:.2}/{:.4}", r.2, r.3)).collect();
        cells.push(format!("{ap:.2}/{aq:.4}"));
        let first = method.len().max(6);
        let widths: Vec<usize> = heads.iter().zip(&cells).map(|(h, c)| h.len().max(c.len())).collect();
        let mut out = format!("{:<first$}", "Method");
        for (h, w) in heads.iter().zip(&widths) {
            out.push_str(&format!(" | {h:>w$}"));
        }
        out.push('\n');
        out.push_str(&format!("{:<first$}", method));
        for (c, w) in cells.iter().zip(&widths) {
            out.push_str(&format!(" | {c:>w$}"));
        }
        out.push('\n');
        out
    }
}

pub fn evaluate(model: &Model<f32>, pairs: &[ImagePair]) -> Result<EvalTable> {
    if pairs.is_empty() {
        return Err(Error::Parameter("no evaluation pairs".into()));
    }
    let mut rows: Vec<(String, usize, f64, f64)> = Vec::new();
    for p in pairs {
        let x = restore_any_size(model, &p.degraded)?;
        let (ps, ss) = (psnr(&x, &p.clean, 1.0)?, ssim(&x, &p.clean)?);
        let label = p.task_label();
        match rows.iter_mut().find(|r| r.0 == label) {
            Some(r) => {
                r.1 += 1;
                r.2 += ps;
                r.3 += ss;
            }
            None => rows.push((label, 1, ps, ss)),
        }
    }
    for r in &mut rows {
        r.2 /= r.1 as f64;
        r.3 /= r.1 as f64;
    }
    Ok(EvalTable { rows })
}

pub fn cmd_eval(a: &EvalArgs) -> Result<String> {
    let model = load_model(&a.checkpoint)?;
    let manifest = Manifest::read(&a.pairs)?;
    if manifest.entries.is_empty() {
        return Err(Error::Parameter(format!("pairs manifest {} is empty", a.pairs.display())));
    }
    let table = evaluate(&model, &manifest.load_all()?)?;
    if let Some(csv) = &a.csv {
        fs::write(csv, table.to_csv()).map_err(|e| Error::io(csv, e))?;
    }
    Ok(table.to_text(variant_name(model.config())))
}

/// Published `(parameters, GFLOPs)` for the variants that have them.
pub fn reference_complexity(cfg: &ModelConfig) -> Option<(f64, f64)> {
    match (cfg.symmetric, cfg.guidance_mode) {
        (true, GuidanceMode::None) => Some((REFERENCE_PARAMS, REFERENCE_GFLOPS)),
        (true, GuidanceMode::Bidirectional) => Some((162.27e6, 85.42)),
        _ => None,
    }
}

pub fn count_report(cfg: &ModelConfig, model: &Model<f32>) -> Result<String> {
    let n = count_parameters(model);
    let m = cfg.required_multiple();
    let side = 256usize.div_ceil(m) * m;
    let gmacs = estimate_flops(model, side, side)? as f64 / 1e9;
    let mut out = format!("variant: {}\nparameters: {n} ({:.2}M", variant_name(cfg), n as f64 / 1e6);
    match reference_complexity(cfg) {
        Some((p, f)) => out.push_str(&format!(
            ", {:+.2}% vs {:.2}M reference)\nmacs@{side}x{side}: {gmacs:.2}G ({:.3}x the {f:.2}G reference)\n",
            (n as f64 - p) / p * 100.0,
            p / 1e6,
            gmacs / f
        )),
        None => out.push_str(&format!(")\nmacs@{side}x{side}: {gmacs:.2}G\n")),
    }
    Ok(out)
}

pub fn cmd_count(a: &ModelArgs) -> Result<String> {
    let s = resolve_settings(a)?;
    let model: Model<f32> = build_any(&s.model, s.seed)?;
    count_report(&s.model, &model)
}

/// Channel mean of a `(C, H, W)` map, min-max normalized to `[0, 1]`
/// (all zeros when constant).
pub fn channel_mean_normalized(t: &Tensor<f32>) -> Result<(Vec<f32>, usize, usize)> {
    let (c, h, w) = t.dims3()?;
    let mut mean = vec![0f32; h * w];
    for plane in t.data().chunks(h * w) {
        mean.iter_mut().zip(plane).for_each(|(m, v)| *m += *v);
    }
    mean.iter_mut().for_each(|m| *m /= c as f32);
    let lo = mean.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = mean.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let norm = mean
        .iter()
        .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect();
    Ok((norm, h, w))
}

pub fn cmd_dump_features(a: &DumpArgs) -> Result<String> {
    let model = load_model(&a.checkpoint)?;
    let y = load_png(&a.input)?;
    let (padded, _) = pad_to_multiple(&y, model.config().required_multiple())?;
    let (_, taps) = extract_features(&model, &padded, &a.taps)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut report = String::new();
    for name in &a.taps {
        let t = &taps[name];
        let (plane, h, w) = channel_mean_normalized(t)?;
        let png = a.out.join(format!("{name}.png"));
        save_gray_png(&png, &plane, h, w)?;
        t.save_symt(a.out.join(format!("{name}.symt")))?;
        report.push_str(&format!("{name}: {:?} -> {}\n", t.shape(), png.display()));
    }
    Ok(report)
}

/// Path helper shared with tests: the manifest written by `synth`.
pub fn synth_manifest(out: &Path) -> PathBuf {
    out.join("manifest.txt")
}
