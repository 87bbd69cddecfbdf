use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use symunet_cli::{resolve_settings, ModelArgs};
use symunet_core::data::{load_png, save_png};
use symunet_core::Tensor;
use tempfile::TempDir;

const TINY: [&str; 4] = [
    "base_channels=16",
    "encoder_blocks=1,1,1",
    "bottleneck_blocks=2",
    "decoder_blocks=1,1,1",
];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_symunet"))
}

fn exec(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn symunet")
}

fn ok(cmd: &mut Command) -> String {
    let out = exec(cmd);
    assert!(out.status.success(), "symunet failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fails(cmd: &mut Command) -> String {
    let out = exec(cmd);
    assert!(!out.status.success(), "expected failure, got: {}", String::from_utf8_lossy(&out.stdout));
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(err.starts_with("error:"), "stderr: {err}");
    err
}

fn pattern(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let s = seed as f32;
    Tensor::from_fn(vec![3, h, w], |i| {
        let c = (i / (h * w)) as f32;
        let y = ((i / w) % h) as f32;
        let x = (i % w) as f32;
        0.5 + 0.3 * (0.3 * x + 0.2 * y + s + c).sin() * (0.11 * y - s).cos()
    })
}

fn clean_dir(root: &Path, n: u64, h: usize, w: usize) -> PathBuf {
    let dir = root.join("clean");
    fs::create_dir_all(&dir).unwrap();
    for k in 0..n {
        save_png(&dir.join(format!("c{k}.png")), &pattern(h, w, k + 1)).unwrap();
    }
    dir
}

fn synth(clean: &Path, out: &Path, kinds: &[&str]) -> Command {
    let mut c = bin();
    c.arg("synth").arg("--clean-dir").arg(clean).arg("--out").arg(out).args(["--seed", "3"]);
    for k in kinds {
        c.args(["--kind", k]);
    }
    c
}

fn init(out: &Path, extra: &[&str]) {
    ok(bin().arg("init").arg("--out").arg(out).args(TINY).args(extra));
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        if p.is_dir() {
            v.extend(tree_bytes(&p).into_iter().map(|(n, b)| (format!("{name}/{n}"), b)));
        } else {
            v.push((name, fs::read(&p).unwrap()));
        }
    }
    v.sort();
    v
}

fn dataset(tmp: &Path) -> PathBuf {
    let clean = clean_dir(tmp, 2, 36, 36);
    let out = tmp.join("data");
    ok(&mut synth(&clean, &out, &["noise", "haze"]));
    out.join("manifest.txt")
}

#[test]
fn synth_requires_a_kind_and_lists_valid_ones() {
    let tmp = TempDir::new().unwrap();
    let clean = clean_dir(tmp.path(), 1, 16, 16);
    let err = fails(&mut synth(&clean, &tmp.path().join("out"), &[]));
    for kind in ["noise", "haze", "rain", "blur", "lowlight"] {
        assert!(err.contains(kind), "{err}");
    }
    let err = fails(&mut synth(&clean, &tmp.path().join("out2"), &["snow"]));
    assert!(err.contains("snow") && err.contains("lowlight"), "{err}");
}

#[test]
fn synth_is_deterministic_and_writes_one_line_per_pair() {
    let tmp = TempDir::new().unwrap();
    let clean = clean_dir(tmp.path(), 3, 24, 20);
    let kinds = ["noise:sigma=25", "rain", "lowlight:gamma=2"];
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let report = ok(&mut synth(&clean, &a, &kinds));
    ok(&mut synth(&clean, &b, &kinds));
    assert!(report.contains("9 pairs"), "{report}");
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().filter(|l| !l.trim().is_empty()).count(), 9);

    let a_files: Vec<_> = tree_bytes(&a).into_iter().filter(|(n, _)| n != "manifest.txt").collect();
    let b_files: Vec<_> = tree_bytes(&b).into_iter().filter(|(n, _)| n != "manifest.txt").collect();
    assert!(!a_files.is_empty());
    assert_eq!(a_files, b_files);
    let strip = |m: &str, root: &Path| m.replace(&root.display().to_string(), "");
    assert_eq!(
        strip(&manifest, &a),
        strip(&fs::read_to_string(b.join("manifest.txt")).unwrap(), &b)
    );
}

#[test]
fn train_runs_for_each_variant_and_refuses_to_overwrite() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(tmp.path());
    let train = |out: &Path, extra: &[&str]| {
        let mut c = bin();
        c.arg("train").arg("--data").arg(&data).arg("--out").arg(out);
        c.args(TINY).args(["crop=32", "steps=2", "checkpoint_every=1"]).args(extra);
        c
    };

    let plain = tmp.path().join("plain");
    let report = ok(&mut train(&plain, &[]));
    assert!(report.contains("to 2"), "{report}");
    assert!(plain.join("checkpoint").exists());
    assert_eq!(fs::read_to_string(plain.join("train_log.csv")).unwrap().lines().count(), 3);

    let err = fails(&mut train(&plain, &[]));
    assert!(err.contains("--resume"), "{err}");

    let asym = tmp.path().join("asym");
    let report = ok(&mut train(&asym, &["--asymmetric"]));
    assert!(report.contains("asymmetric"), "{report}");

    let guided = tmp.path().join("guided");
    let report = ok(&mut train(
        &guided,
        &[
            "--guidance-mode",
            "one_way",
            "context_tokens=5",
            "context_dim=16",
            "guidance_heads=2",
            "bottleneck_patch=1",
            "decoder_patches=1,1,1",
        ],
    ));
    assert!(report.contains("one-way"), "{report}");
    let saved = fs::read_to_string(guided.join("train_config.txt")).unwrap();
    assert!(saved.contains("one_way"), "{saved}");
}

#[test]
fn resume_without_checkpoint_fails() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(tmp.path());
    let err = fails(
        bin()
            .arg("train")
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(tmp.path().join("none"))
            .arg("--resume"),
    );
    assert!(err.contains("none"), "{err}");
}

#[test]
fn zero_init_infer_returns_input_at_any_size() {
    let tmp = TempDir::new().unwrap();
    let ckpt = tmp.path().join("ckpt");
    init(&ckpt, &[]);
    for (h, w) in [(32, 32), (13, 19)] {
        let input = tmp.path().join(format!("in_{h}x{w}.png"));
        save_png(&input, &pattern(h, w, 9)).unwrap();
        let output = tmp.path().join(format!("out_{h}x{w}.png"));
        ok(bin()
            .arg("infer")
            .arg("--checkpoint")
            .arg(&ckpt)
            .arg("--input")
            .arg(&input)
            .arg("--output")
            .arg(&output));
        let (x, y) = (load_png(&input).unwrap(), load_png(&output).unwrap());
        assert_eq!(y.shape(), &[3, h, w]);
        assert!(x.bit_eq(&y), "{h}x{w}: max diff {}", x.max_abs_diff(&y).unwrap());
    }
}

#[test]
fn infer_without_checkpoint_fails() {
    let tmp = TempDir::new().unwrap();
    let input = tmp.path().join("in.png");
    save_png(&input, &pattern(8, 8, 1)).unwrap();
    fails(bin()
        .arg("infer")
        .arg("--checkpoint")
        .arg(tmp.path().join("missing"))
        .arg("--input")
        .arg(&input)
        .arg("--output")
        .arg(tmp.path().join("out.png")));
    assert!(!tmp.path().join("out.png").exists());
}

#[test]
fn eval_reports_fixed_columns_and_rejects_empty_manifest() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(tmp.path());
    let ckpt = tmp.path().join("ckpt");
    init(&ckpt, &[]);
    let eval = |pairs: &Path, csv: &Path| {
        let mut c = bin();
        c.arg("eval").arg("--checkpoint").arg(&ckpt).arg("--pairs").arg(pairs).arg("--csv").arg(csv);
        c
    };

    let csv = tmp.path().join("eval.csv");
    let text = ok(&mut eval(&data, &csv));
    let table = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "task,count,psnr,ssim");
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|l| l.split(',').count() == 4), "{table}");
    assert!(lines[3].starts_with("Average,4,"), "{table}");
    let head = text.lines().next().unwrap();
    assert!(head.starts_with("Method") && head.ends_with("Average"), "{text}");
    assert_eq!(text.lines().count(), 2);

    let empty = tmp.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    let err = fails(&mut eval(&empty, &tmp.path().join("e.csv")));
    assert!(err.contains("empty"), "{err}");
}

#[test]
fn count_default_reports_deviation_from_reference() {
    let a = ok(bin().arg("count"));
    assert!(a.contains("parameters: 22118760 (22.12M, -0.63% vs 22.26M reference)"), "{a}");
    assert!(a.contains("macs@256x256:"), "{a}");
    assert_eq!(a, ok(bin().arg("count")));
}

#[test]
fn count_single_level_matches_hand_sum() {
    // stem 3*8*9, block(8) 1387, down 8*4*9, block(16) 4293, up 16*32, block(8), head 8*3*9
    let hand = 216 + 1387 + 288 + 4293 + 512 + 1387 + 216;
    let out = ok(bin().arg("count").args([
        "levels=1",
        "base_channels=8",
        "encoder_blocks=1",
        "decoder_blocks=1",
        "bottleneck_blocks=1",
        "heads_per_level=1,1",
        "refinement_blocks=0",
    ]));
    assert!(out.contains(&format!("parameters: {hand} ")), "{out}");
}

#[test]
fn dump_features_writes_maps_and_tensors() {
    let tmp = TempDir::new().unwrap();
    let ckpt = tmp.path().join("ckpt");
    init(&ckpt, &["--seed", "2"]);
    let input = tmp.path().join("in.png");
    save_png(&input, &pattern(32, 32, 4)).unwrap();
    let out = tmp.path().join("maps");
    let dump = |taps: &str, out: &Path| {
        let mut c = bin();
        c.arg("dump-features").arg("--checkpoint").arg(&ckpt).arg("--input").arg(&input);
        c.args(["--taps", taps]).arg("--out").arg(out);
        c
    };
    ok(&mut dump("f_enc_0,f_dec_0", &out));
    let mut names: Vec<String> = tree_bytes(&out).into_iter().map(|(n, _)| n).collect();
    names.sort();
    assert_eq!(names, ["f_dec_0.png", "f_dec_0.symt", "f_enc_0.png", "f_enc_0.symt"]);
    for tap in ["f_enc_0", "f_dec_0"] {
        let t = Tensor::<f32>::load_symt(out.join(format!("{tap}.symt"))).unwrap();
        assert_eq!(t.shape(), &[16, 32, 32]);
        let img = load_png(&out.join(format!("{tap}.png"))).unwrap();
        assert_eq!(&img.shape()[1..], &[32, 32]);
        let lo = img.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = img.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!((lo * 255.0, hi * 255.0), (0.0, 255.0));
    }

    let err = fails(&mut dump("f_enc_0,f_nowhere", &tmp.path().join("bad")));
    assert!(err.contains("f_nowhere") && err.contains("f_dec_0"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let err = fails(bin().args(["count", "widht=3"]));
    assert!(err.contains("widht"), "{err}");

    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("model.cfg");
    fs::write(&cfg, "base_channels = 16\nnot_a_key = 1\n").unwrap();
    let err = fails(bin().arg("count").arg("--config").arg(&cfg));
    assert!(err.contains("not_a_key"), "{err}");
}

#[test]
fn overrides_apply_after_config_file() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("model.cfg");
    fs::write(&cfg, "base_channels = 16\nlr0 = 0.01\n").unwrap();
    let args = ModelArgs {
        config: Some(cfg),
        overrides: vec!["base_channels=32".into()],
        ..Default::default()
    };
    let s = resolve_settings(&args).unwrap();
    assert_eq!(s.model.base_channels, 32);
    assert_eq!(s.train.lr0, 0.01);
}
