use std::f64::consts::LN_2;
use std::fs;

use symunet_core::data::{
    add_gaussian_noise, crop_back, flip_horizontal, flip_vertical, load_paired_folder, load_png,
    pad_to_multiple, parse_degradation, random_crop_pair, random_flips, rain_mask, sample_seed,
    save_png, synth_blur, synth_haze, synth_haze_with_depth, synth_lowlight, synth_rain,
    synthesize_dataset, Degradation, DegradationKind, DegradationSpec, ImagePair, Manifest,
    RainParams, TaskSampler,
};
use symunet_core::metrics::psnr;
use symunet_core::params::Initializer;
use symunet_core::{Error, Tensor};

fn image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    Initializer::new(seed).uniform::<f32>(vec![3, h, w], 0.4).map(|v| v + 0.5)
}

#[test]
fn noise_at_sigma_25_on_mid_gray() {
    let x = Tensor::full(vec![3, 128, 128], 0.5f32);
    let y = add_gaussian_noise(&x, 25.0, 7).unwrap();
    let want = 10.0 * (255.0f64 * 255.0 / 625.0).log10();
    let got = psnr(&y, &x, 1.0).unwrap();
    assert!((got - want).abs() < 0.1, "{got} vs {want}");
    assert!((want - 20.17).abs() < 0.005);
}

#[test]
fn noise_identity_determinism_and_errors() {
    let x = image(16, 16, 1);
    assert!(add_gaussian_noise(&x, 0.0, 3).unwrap().bit_eq(&x));
    let a = add_gaussian_noise(&x, 15.0, 3).unwrap();
    assert!(a.bit_eq(&add_gaussian_noise(&x, 15.0, 3).unwrap()));
    assert!(!a.bit_eq(&add_gaussian_noise(&x, 15.0, 4).unwrap()));
    assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(matches!(add_gaussian_noise(&x, -1.0, 0), Err(Error::Parameter(_))));
}

#[test]
fn haze_limits() {
    let x = image(20, 24, 2);
    let faint = synth_haze(&x, 1e-6, 0.8, 1).unwrap();
    assert!(faint.max_abs_diff(&x).unwrap() < 1e-4);
    let thick = synth_haze(&x, 200.0, 1.0, 1).unwrap();
    assert!(thick.data().iter().all(|v| (*v - 1.0).abs() < 1e-6));
    let depth = vec![1.0f32; 20 * 24];
    let half = synth_haze_with_depth(&x, &depth, LN_2, 0.3).unwrap();
    for (h, v) in half.data().iter().zip(x.data()) {
        assert!((*h as f64 - (0.5 * *v as f64 + 0.15)).abs() < 1e-6);
    }
    assert!(synth_haze(&x, 0.0, 0.5, 0).is_err());
    assert!(synth_haze(&x, 1.0, 1.5, 0).is_err());
}

#[test]
fn rain_brightens_along_streaks() {
    let x = Tensor::full(vec![3, 32, 32], 0.2f32);
    let p = RainParams::default();
    let y = synth_rain(&x, &p, 5).unwrap();
    let mask = rain_mask(32, 32, &p, 5);
    for (i, m) in mask.iter().enumerate() {
        if *m == 0.0 {
            assert_eq!(y.data()[i], 0.2);
        } else {
            assert!(y.data()[i] > 0.2);
        }
    }
    assert!(y.bit_eq(&synth_rain(&x, &p, 5).unwrap()));
}

#[test]
fn blur_and_lowlight_identities() {
    let x = image(12, 10, 3);
    assert!(synth_blur(&x, 0.0).unwrap().bit_eq(&x));
    let flat = Tensor::full(vec![3, 15, 9], 0.37f32);
    assert!(synth_blur(&flat, 2.5).unwrap().bit_eq(&flat));
    assert!(synth_lowlight(&x, 1.0, 1.0).unwrap().bit_eq(&x));
    let one = Tensor::full(vec![3, 2, 2], 1.0f32);
    assert!(synth_lowlight(&one, 2.2, 0.5).unwrap().data().iter().all(|v| *v == 0.5));
    assert!(synth_lowlight(&x, 0.5, 0.5).is_err());
    assert!(synth_lowlight(&x, 2.0, 1.5).is_err());
}

#[test]
fn blur_smooths_an_impulse() {
    let mut x = Tensor::zeros(vec![3, 21, 21]);
    x.data_mut()[10 * 21 + 10] = 1.0;
    let y = synth_blur(&x, 1.0).unwrap();
    let plane = &y.data()[..441];
    let total: f32 = plane.iter().sum();
    assert!((total - 1.0).abs() < 1e-5);
    assert!(plane[10 * 21 + 10] < 0.2);
    assert!((plane[10 * 21 + 9] - plane[10 * 21 + 11]).abs() < 1e-7);
}

fn coord_pair(h: usize, w: usize) -> ImagePair {
    let clean = Tensor::from_fn(vec![3, h, w], |i| ((i % (h * w)) as f32) / (h * w) as f32);
    let degraded = clean.map(|v| 1.0 - v);
    ImagePair::new(clean, degraded, None).unwrap()
}

#[test]
fn crop_shares_one_window() {
    let pair = coord_pair(40, 50);
    for seed in 0..5 {
        let c = random_crop_pair(&pair, 16, seed).unwrap();
        assert_eq!(c.clean.shape(), &[3, 16, 16]);
        let first = (c.clean.data()[0] * 2000.0).round() as usize;
        let (top, left) = (first / 50, first % 50);
        for y in 0..16 {
            for x in 0..16 {
                let i = y * 16 + x;
                let want = ((top + y) * 50 + left + x) as f32 / 2000.0;
                assert!((c.clean.data()[i] - want).abs() < 1e-6);
                assert!((c.degraded.data()[i] - (1.0 - want)).abs() < 1e-6);
            }
        }
    }
    let same = coord_pair(16, 16);
    let c = random_crop_pair(&same, 16, 3).unwrap();
    assert!(c.clean.bit_eq(&same.clean));
    assert!(random_crop_pair(&same, 17, 0).is_err());
}

#[test]
fn flips_are_involutions_and_shared() {
    let pair = coord_pair(6, 7);
    assert!(flip_horizontal(&flip_horizontal(&pair.clean)).bit_eq(&pair.clean));
    assert!(flip_vertical(&flip_vertical(&pair.clean)).bit_eq(&pair.clean));
    assert_eq!(flip_horizontal(&pair.clean).data()[0], pair.clean.data()[6]);
    assert_eq!(flip_vertical(&pair.clean).data()[0], pair.clean.data()[35]);
    for seed in 0..8 {
        let f = random_flips(&pair, seed);
        assert!(f.degraded.bit_eq(&f.clean.map(|v| 1.0 - v)));
        let g = random_flips(&f, seed);
        assert!(g.clean.bit_eq(&pair.clean));
    }
}

#[test]
fn pad_and_crop_back() {
    let x = image(130, 127, 4);
    let (p, orig) = pad_to_multiple(&x, 8).unwrap();
    assert_eq!(p.shape(), &[3, 136, 128]);
    assert_eq!(orig, (130, 127));
    assert!(crop_back(&p, orig).unwrap().bit_eq(&x));
    let (w, h) = (128, 136);
    // Row H equals row H-2, column W equals column W-2.
    for c in 0..3 {
        for col in 0..127 {
            assert_eq!(p.data()[(c * h + 130) * w + col], x.data()[(c * 130 + 128) * 127 + col]);
        }
        for row in 0..130 {
            assert_eq!(p.data()[(c * h + row) * w + 127], x.data()[(c * 130 + row) * 127 + 125]);
        }
    }
    let y = image(16, 24, 1);
    assert!(pad_to_multiple(&y, 8).unwrap().0.bit_eq(&y));
    assert!(pad_to_multiple(&y, 6).is_err());
}

#[test]
fn degradation_text_forms() {
    let d = parse_degradation("noise:sigma=50").unwrap();
    assert_eq!(d, Degradation::Noise { sigma: 50.0 });
    assert_eq!(d.task_label(), "noise_s50");
    let h = parse_degradation("haze").unwrap();
    assert_eq!(h.kind(), DegradationKind::Haze);
    assert_eq!(Degradation::parse(h.kind(), &h.params_string()).unwrap(), h);
    let err = parse_degradation("snow").unwrap_err().to_string();
    for k in ["noise", "haze", "rain", "blur", "lowlight"] {
        assert!(err.contains(k), "{err}");
    }
    assert!(parse_degradation("noise:sigma=-3").is_err());
    assert!(parse_degradation("blur:radius=2").is_err());
}

#[test]
fn sample_seeds_are_distinct() {
    let seeds: std::collections::BTreeSet<u64> = (0..1000).map(|i| sample_seed(42, i)).collect();
    assert_eq!(seeds.len(), 1000);
    assert_ne!(sample_seed(1, 0), sample_seed(2, 0));
}

#[test]
fn dataset_matches_serial_generation() {
    let dir = tempfile::tempdir().unwrap();
    let clean_dir = dir.path().join("clean");
    fs::create_dir_all(&clean_dir).unwrap();
    let mut paths = Vec::new();
    for k in 0..4 {
        let p = clean_dir.join(format!("c{k}.png"));
        save_png(&p, &image(24, 20, k)).unwrap();
        paths.push(p);
    }
    let kinds = [
        parse_degradation("noise:sigma=15").unwrap(),
        parse_degradation("rain").unwrap(),
        parse_degradation("lowlight").unwrap(),
    ];
    let out = dir.path().join("data");
    let m = synthesize_dataset(&paths, &kinds, 9, &out).unwrap();
    assert_eq!(m.entries.len(), 12);
    let reread = Manifest::read(&out.join("manifest.txt")).unwrap();
    assert_eq!(reread.entries, m.entries);
    let serial_dir = dir.path().join("serial");
    fs::create_dir_all(&serial_dir).unwrap();
    for (i, p) in paths.iter().enumerate() {
        let img = load_png(p).unwrap();
        for (j, d) in kinds.iter().enumerate() {
            let k = (i * kinds.len() + j) as u64;
            let spec = DegradationSpec::new(*d, sample_seed(9, k)).unwrap();
            let e = &m.entries[k as usize];
            assert_eq!(e.spec, spec);
            let sp = serial_dir.join(format!("{k}.png"));
            save_png(&sp, &spec.apply(&img).unwrap()).unwrap();
            assert_eq!(fs::read(&sp).unwrap(), fs::read(e.degraded_path(&out)).unwrap());
        }
    }
    let pairs = reread.load_all().unwrap();
    assert_eq!(pairs.len(), 12);
    let sampler = TaskSampler::new(&pairs).unwrap();
    assert_eq!(sampler.tasks(), vec!["noise_s15", "rain", "lowlight"]);
    assert!(synthesize_dataset(&paths, &[], 0, &out).is_err());
}

#[test]
fn task_sampler_is_uniform_over_tasks() {
    let mk = |d: Degradation| {
        let spec = DegradationSpec::new(d, 0).unwrap();
        ImagePair::synthesize(image(4, 4, 0), spec).unwrap()
    };
    let mut pairs: Vec<ImagePair> = (0..9).map(|_| mk(Degradation::Noise { sigma: 25.0 })).collect();
    pairs.push(mk(Degradation::Blur { sigma: 1.0 }));
    let s = TaskSampler::new(&pairs).unwrap();
    let blur = (0..4000).filter(|&i| s.pick(sample_seed(1, i)) == 9).count();
    assert!((1800..2200).contains(&blur), "{blur}");
}

#[test]
fn paired_folder_loader() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["clean", "degraded"] {
        fs::create_dir_all(dir.path().join(sub)).unwrap();
    }
    save_png(&dir.path().join("clean/a.png"), &image(8, 8, 1)).unwrap();
    save_png(&dir.path().join("degraded/a.png"), &image(8, 8, 2)).unwrap();
    let pairs = load_paired_folder(dir.path()).unwrap();
    assert_eq!(pairs.len(), 1);
    assert_eq!(pairs[0].task_label(), "paired");
    save_png(&dir.path().join("clean/b.png"), &image(8, 8, 3)).unwrap();
    assert!(matches!(load_paired_folder(dir.path()), Err(Error::Format(_))));
}

#[test]
fn png_round_trip_is_exact_on_8bit_values() {
    let dir = tempfile::tempdir().unwrap();
    let x = Tensor::from_fn(vec![3, 5, 7], |i| ((i * 13) % 256) as f32 / 255.0);
    let p = dir.path().join("x.png");
    save_png(&p, &x).unwrap();
    assert!(load_png(&p).unwrap().bit_eq(&x));
}
