use std::cell::Cell;
use std::f64::consts::PI;
use std::fs;

use symunet_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use symunet_core::config::ModelConfig;
use symunet_core::data::{Degradation, DegradationSpec, ImagePair};
use symunet_core::loss::{fft_loss, l1_loss, total_loss};
use symunet_core::metrics::{psnr, ssim};
use symunet_core::model::{build_model, build_model_with, BuildOptions, Model};
use symunet_core::optim::{adamw_step, cosine_lr, AdamState, AdamWConfig};
use symunet_core::params::{Initializer, ParamStore};
use symunet_core::train::{
    batch_gradients, train_loop, LoopOptions, PairDataset, SampleSource, TrainConfig, LOG_HEADER,
};
use symunet_core::{Error, Result, Tensor};

fn image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    Initializer::new(seed).uniform::<f32>(vec![3, h, w], 0.4).map(|v| v + 0.5)
}

fn noisy_pair(size: usize, seed: u64) -> ImagePair {
    let spec = DegradationSpec::new(Degradation::Noise { sigma: 25.0 }, seed).unwrap();
    ImagePair::synthesize(image(size, size, seed), spec).unwrap()
}

fn dft_oracle(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let (c, h, w) = a.dims3().unwrap();
    let mut total = 0.0;
    for ch in 0..c {
        for u in 0..h {
            for v in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let i = (ch * h + y) * w + x;
                        let d = a.data()[i] as f64 - b.data()[i] as f64;
                        let ang = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        re += d * ang.cos();
                        im += d * ang.sin();
                    }
                }
                total += re.hypot(im);
            }
        }
    }
    total / (c * h * w) as f64
}

#[test]
fn l1_examples() {
    let x = image(6, 5, 1);
    assert_eq!(l1_loss(&x, &x).unwrap(), 0.0);
    let shifted = Tensor::<f64>::full(vec![3, 4, 4], 0.25).map(|v| v + 0.5);
    let base = Tensor::<f64>::full(vec![3, 4, 4], 0.25);
    assert_eq!(l1_loss(&shifted, &base).unwrap(), 0.5);
    let y = image(6, 5, 2);
    let want: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum::<f64>()
        / x.numel() as f64;
    assert!((l1_loss(&x, &y).unwrap() - want).abs() < 1e-7);
    assert!(matches!(l1_loss(&x, &image(5, 5, 2)), Err(Error::Shape(_))));
}

#[test]
fn fft_loss_examples() {
    let x = image(4, 4, 3);
    assert_eq!(fft_loss(&x, &x).unwrap(), 0.0);
    let mut y = x.clone();
    y.data_mut()[16 + 5] += 0.3;
    // A delta has modulus d at all H*W bins of one channel.
    let got = fft_loss(&y, &x).unwrap();
    let want = 16.0 * 0.3 / 48.0;
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    let (a, b) = (image(8, 8, 4), image(8, 8, 5));
    assert!((fft_loss(&a, &b).unwrap() - dft_oracle(&a, &b)).abs() < 1e-5);
    let (a, b) = (image(6, 10, 6), image(6, 10, 7));
    assert!((fft_loss(&a, &b).unwrap() - dft_oracle(&a, &b)).abs() < 1e-5);
}

#[test]
fn total_loss_examples() {
    let (a, b) = (image(8, 8, 8), image(8, 8, 9));
    assert_eq!(total_loss(&a, &b, 0.0).unwrap(), l1_loss(&a, &b).unwrap());
    assert_eq!(total_loss(&a, &a, 0.1).unwrap(), 0.0);
    let d = total_loss(&a, &b, 0.2).unwrap() - total_loss(&a, &b, 0.1).unwrap();
    assert!((d - 0.1 * fft_loss(&a, &b).unwrap()).abs() < 1e-12);
    assert!(total_loss(&a, &b, 0.1).unwrap() > 0.0);
}

fn scalar_store(v: f64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("theta", Tensor::full(vec![1], v)).unwrap();
    s
}

#[test]
fn adamw_first_step_closed_form() {
    let mut store = scalar_store(2.0);
    let mut st = AdamState::new(&store);
    let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
    adamw_step(&mut store, &[Some(vec![1.0])], &mut st, 1.0, &cfg).unwrap();
    let theta = store.by_name("theta").unwrap().data()[0];
    assert!((theta - (2.0 - 1.0 / (1.0 + 1e-8))).abs() < 1e-12);
    assert_eq!(st.step, 1);
}

#[test]
fn adamw_decay_only_step() {
    let mut store = scalar_store(3.0);
    let mut st = AdamState::new(&store);
    let cfg = AdamWConfig { weight_decay: 0.1, ..AdamWConfig::default() };
    adamw_step(&mut store, &[Some(vec![0.0])], &mut st, 0.5, &cfg).unwrap();
    assert_eq!(store.by_name("theta").unwrap().data()[0], 3.0 * (1.0 - 0.5 * 0.1));
}

#[test]
fn adamw_without_decay_follows_adam() {
    let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
    let mut store = scalar_store(-1.0);
    let mut st = AdamState::new(&store);
    let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
    let (mut th, mut m, mut v) = (-1.0f64, 0.0f64, 0.0f64);
    for t in 1..=60 {
        let g_impl = 2.0 * (store.by_name("theta").unwrap().data()[0] - 3.0);
        adamw_step(&mut store, &[Some(vec![g_impl])], &mut st, lr, &cfg).unwrap();
        let g = 2.0 * (th - 3.0);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        th -= lr * mh / (vh.sqrt() + eps);
        assert!((store.by_name("theta").unwrap().data()[0] - th).abs() < 1e-12, "step {t}");
    }
}

#[test]
fn adamw_rejects_non_finite_gradient_by_name() {
    let mut store = scalar_store(1.0);
    let mut st = AdamState::new(&store);
    let err = adamw_step(&mut store, &[Some(vec![f64::NAN])], &mut st, 0.1, &AdamWConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Training(_)));
    assert!(err.to_string().contains("theta"));
    assert_eq!(st.step, 0);
}

#[test]
fn zero_lr_step_leaves_parameters() {
    let mut model: Model<f32> = build_model_with(&ModelConfig::tiny(), 1, BuildOptions::dense()).unwrap();
    let before = model.store().checksum();
    let (_, grads) = batch_gradients(&model, &[noisy_pair(16, 1)], 0.1).unwrap();
    let mut st = AdamState::new(model.store());
    adamw_step(model.store_mut(), &grads, &mut st, 0.0, &AdamWConfig::default()).unwrap();
    assert_eq!(model.store().checksum(), before);
}

#[test]
fn small_step_does_not_increase_loss() {
    let batch = [noisy_pair(16, 3)];
    let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
    let mut failures = 0;
    for seed in 0..20 {
        let mut model: Model<f32> = build_model_with(&ModelConfig::tiny(), seed, BuildOptions::dense()).unwrap();
        let (before, grads) = batch_gradients(&model, &batch, 0.1).unwrap();
        let mut st = AdamState::new(model.store());
        adamw_step(model.store_mut(), &grads, &mut st, 1e-5, &cfg).unwrap();
        let (after, _) = batch_gradients(&model, &batch, 0.1).unwrap();
        if after > before {
            failures += 1;
        }
    }
    assert!(failures <= 1, "{failures} of 20 steps increased the loss");
}

#[test]
fn cosine_schedule_examples() {
    assert_eq!(cosine_lr(0, 2000, 1e-3, 1e-7), 1e-3);
    assert_eq!(cosine_lr(2000, 2000, 1e-3, 1e-7), 1e-7);
    assert!((cosine_lr(1000, 2000, 1e-3, 1e-7) - (1e-3 + 1e-7) / 2.0).abs() < 1e-18);
    assert!((cosine_lr(1000, 2000, 1e-3, 1e-7) - 5.0005e-4).abs() < 1e-15);
    assert_eq!(cosine_lr(5000, 2000, 1e-3, 1e-7), 1e-7);
    for s in 1..=2000 {
        assert!(cosine_lr(s, 2000, 1e-3, 1e-7) <= cosine_lr(s - 1, 2000, 1e-3, 1e-7));
    }
}

#[test]
fn psnr_examples() {
    let x = image(9, 11, 1);
    assert_eq!(psnr(&x, &x, 1.0).unwrap(), 100.0);
    let base = Tensor::full(vec![3, 8, 8], 0.5f64);
    let off = base.map(|v| v + 16.0 / 255.0);
    let p = psnr(&off, &base, 1.0).unwrap();
    assert!((p - 24.05).abs() < 0.005, "{p}");
    let y = image(9, 11, 2);
    let mse: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>()
        / x.numel() as f64;
    assert!((psnr(&x, &y, 1.0).unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-6);
}

fn ssim_oracle(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let (c, h, w) = a.dims3().unwrap();
    let mut g = [[0.0f64; 11]; 11];
    let mut s = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dy * dy + dx * dx) / 4.5).exp();
            s += *v;
        }
    }
    let px = |t: &Tensor<f32>, ch, y, x| t.data()[(ch * h + y) * w + x] as f64;
    let mut total = 0.0;
    for ch in 0..c {
        let mut acc = 0.0;
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let mut st = [0.0f64; 5];
                for i in 0..11 {
                    for j in 0..11 {
                        let wgt = g[i][j] / s;
                        let (p, q) = (px(a, ch, y0 + i, x0 + j), px(b, ch, y0 + i, x0 + j));
                        st[0] += wgt * p;
                        st[1] += wgt * q;
                        st[2] += wgt * p * p;
                        st[3] += wgt * q * q;
                        st[4] += wgt * p * q;
                    }
                }
                let (ma, mb) = (st[0], st[1]);
                let (va, vb, cv) = (st[2] - ma * ma, st[3] - mb * mb, st[4] - ma * mb);
                let (c1, c2) = (1e-4, 9e-4);
                acc += (2.0 * ma * mb + c1) * (2.0 * cv + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
        total += acc / ((h - 10) * (w - 10)) as f64;
    }
    total / c as f64
}

#[test]
fn ssim_examples() {
    let x = image(32, 32, 3);
    assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    let y = image(32, 32, 4).map(|v| 0.5 * v + 0.5 * x.data()[0]);
    assert!((ssim(&x, &y).unwrap() - ssim_oracle(&x, &y)).abs() < 1e-6);
    let bin = Tensor::from_fn(vec![3, 16, 16], |i| if (i * 7919) % 13 < 6 { 1.0f32 } else { 0.0 });
    assert!(ssim(&bin, &bin.map(|v| 1.0 - v)).unwrap() < 0.0);
    assert!(matches!(ssim(&image(8, 20, 0), &image(8, 20, 1)), Err(Error::Shape(_))));
}

fn tiny_checkpoint(seed: u64) -> Checkpoint {
    Checkpoint::fresh(build_model(&ModelConfig::tiny(), seed).unwrap(), seed)
}

fn small_run() -> TrainConfig {
    TrainConfig {
        total_steps: 6,
        crop: 16,
        checkpoint_every: 3,
        batch_size: 2,
        ..TrainConfig::default()
    }
}

fn dataset() -> PairDataset {
    PairDataset::new((0..3).map(|k| noisy_pair(24, k)).collect(), 16, true).unwrap()
}

fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn checkpoint_save_load_save_is_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let mut ck = tiny_checkpoint(2);
    train_loop(&mut ck, &dataset(), &TrainConfig { total_steps: 2, ..small_run() }, &LoopOptions::default()).unwrap();
    let a = tmp.path().join("a");
    save_checkpoint(&a, &ck).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    assert_eq!(loaded.adam, ck.adam);
    assert_eq!(loaded.model.store().checksum(), ck.model.store().checksum());
    let b = tmp.path().join("b");
    save_checkpoint(&b, &loaded).unwrap();
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
}

#[test]
fn checkpoint_missing_tensor_and_version() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("ck");
    save_checkpoint(&dir, &tiny_checkpoint(0)).unwrap();
    let manifest = fs::read_to_string(dir.join("manifest.txt")).unwrap();
    let kept: String = manifest.lines().filter(|l| !l.starts_with("head.weight")).map(|l| format!("{l}\n")).collect();
    fs::write(dir.join("manifest.txt"), kept).unwrap();
    let err = load_checkpoint(&dir).unwrap_err().to_string();
    assert!(err.contains("head.weight"), "{err}");

    let dir2 = tmp.path().join("ck2");
    save_checkpoint(&dir2, &tiny_checkpoint(0)).unwrap();
    let state = fs::read_to_string(dir2.join("state.txt")).unwrap().replace("version=1", "version=7");
    fs::write(dir2.join("state.txt"), state).unwrap();
    let err = load_checkpoint(&dir2).unwrap_err().to_string();
    assert!(err.contains("version 7"), "{err}");
    assert!(load_checkpoint(&tmp.path().join("absent")).is_err());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset();
    let tcfg = small_run();
    let mut full = tiny_checkpoint(5);
    let full_dir = tmp.path().join("full");
    let report = train_loop(
        &mut full,
        &data,
        &tcfg,
        &LoopOptions { checkpoint_dir: Some(full_dir.clone()), ..Default::default() },
    )
    .unwrap();
    assert_eq!(report.rows.len(), 6);

    let part_dir = tmp.path().join("part");
    let mut part = tiny_checkpoint(5);
    let opts = LoopOptions { checkpoint_dir: Some(part_dir.clone()), stop_after: Some(3), ..Default::default() };
    let first = train_loop(&mut part, &data, &tcfg, &opts).unwrap();
    let mut resumed = load_checkpoint(&part_dir).unwrap();
    assert_eq!(resumed.adam.step, 3);
    let opts = LoopOptions { checkpoint_dir: Some(part_dir.clone()), ..Default::default() };
    let second = train_loop(&mut resumed, &data, &tcfg, &opts).unwrap();
    let rows: Vec<_> = first.rows.into_iter().chain(second.rows).collect();
    assert_eq!(rows, report.rows);
    assert_eq!(dir_bytes(&full_dir), dir_bytes(&part_dir));
}

#[test]
fn identical_runs_have_identical_checksums() {
    let run = || {
        let mut ck = tiny_checkpoint(8);
        train_loop(&mut ck, &dataset(), &small_run(), &LoopOptions::default()).unwrap();
        ck.model.store().checksum()
    };
    assert_eq!(run(), run());
}

struct Poisoned {
    inner: PairDataset,
    calls: Cell<usize>,
    after: usize,
}

impl SampleSource for Poisoned {
    fn sample(&self, seed: u64) -> Result<ImagePair> {
        let n = self.calls.get();
        self.calls.set(n + 1);
        let mut p = self.inner.sample(seed)?;
        if n >= self.after {
            p.degraded.data_mut()[0] = f32::NAN;
        }
        Ok(p)
    }
}

#[test]
fn nan_loss_aborts_and_keeps_last_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("ck");
    let data = Poisoned { inner: dataset(), calls: Cell::new(0), after: 8 };
    let mut ck = tiny_checkpoint(1);
    let log = tmp.path().join("log.csv");
    let opts = LoopOptions { checkpoint_dir: Some(dir.clone()), log_path: Some(log.clone()), ..Default::default() };
    let tcfg = TrainConfig { checkpoint_every: 2, ..small_run() };
    let err = train_loop(&mut ck, &data, &tcfg, &opts).unwrap_err();
    assert!(matches!(err, Error::Training(_)));
    assert!(err.to_string().contains("step 4"), "{err}");
    assert!(err.to_string().contains("checkpoint (step 4)"), "{err}");
    assert_eq!(load_checkpoint(&dir).unwrap().adam.step, 4);
    let text = fs::read_to_string(&log).unwrap();
    assert_eq!(text.lines().next().unwrap(), LOG_HEADER);
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn train_config_text_round_trip() {
    let t = TrainConfig { total_steps: 77, crop: 64, flips: false, ..TrainConfig::default() };
    let text = symunet_core::config::to_kv_text(&t.to_pairs());
    assert_eq!(TrainConfig::from_kv_text(&text).unwrap(), t);
    let bad = TrainConfig { lr_min: 1.0, ..TrainConfig::default() };
    assert!(bad.validate().is_err());
}
