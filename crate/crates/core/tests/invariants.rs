use proptest::prelude::*;

use symunet_core::config::{GuidanceMode, ModelConfig};
use symunet_core::data::{crop_back, pad_to_multiple, Degradation, DegradationSpec, RainParams};
use symunet_core::loss::total_loss;
use symunet_core::nn::{pixel_shuffle, pixel_unshuffle};
use symunet_core::optim::cosine_lr;
use symunet_core::params::Initializer;
use symunet_core::semantic::{patchify, unpatchify};
use symunet_core::{Tensor, Var};

fn image(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    Initializer::new(seed).uniform::<f32>(vec![c, h, w], 0.5).map(|v| v + 0.5)
}

fn degradation() -> impl Strategy<Value = Degradation> {
    prop_oneof![
        (0.0f64..80.0).prop_map(|sigma| Degradation::Noise { sigma }),
        (0.01f64..3.0, 0.0f64..=1.0).prop_map(|(beta, airlight)| Degradation::Haze { beta, airlight }),
        (0usize..200, 1.0f64..20.0, -40.0f64..40.0, 0.0f64..=1.0).prop_map(|(streaks, length, angle, intensity)| {
            Degradation::Rain(RainParams { streaks, length, angle, intensity })
        }),
        (0.0f64..4.0).prop_map(|sigma| Degradation::Blur { sigma }),
        (1.0f64..3.0, 0.05f64..=1.0).prop_map(|(gamma, gain)| Degradation::Lowlight { gamma, gain }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pad_then_crop_is_identity(h in 1usize..40, w in 1usize..40, e in 0u32..5, seed in any::<u64>()) {
        let m = 1usize << e;
        let x = image(3, h, w, seed);
        let (p, orig) = pad_to_multiple(&x, m).unwrap();
        prop_assert_eq!(p.shape()[1] % m, 0);
        prop_assert_eq!(p.shape()[2] % m, 0);
        prop_assert!(p.shape()[1] - h < m && p.shape()[2] - w < m);
        prop_assert!(crop_back(&p, orig).unwrap().bit_eq(&x));
    }

    #[test]
    fn patch_round_trip(c in 1usize..5, gh in 1usize..4, gw in 1usize..4, p in 1usize..4, seed in any::<u64>()) {
        let x = image(c, gh * p, gw * p, seed);
        let t = patchify(&Var::constant(x.clone()), p).unwrap();
        prop_assert_eq!(t.shape(), &[gh * gw, p * p * c][..]);
        let back = unpatchify(&t, p, c, gh * p, gw * p).unwrap();
        prop_assert!(back.to_tensor().bit_eq(&x));
    }

    #[test]
    fn shuffle_round_trip(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let x = image(c, 2 * h, 2 * w, seed);
        let u = pixel_unshuffle(&Var::constant(x.clone()), 2).unwrap();
        prop_assert_eq!(u.shape(), &[4 * c, h, w][..]);
        prop_assert!(pixel_shuffle(&u, 2).unwrap().to_tensor().bit_eq(&x));
    }

    #[test]
    fn total_loss_is_nonnegative_and_zero_on_equal(h in 1usize..9, w in 1usize..9, s1 in any::<u64>(), s2 in any::<u64>(), lambda in 0.0f64..2.0) {
        let a = image(3, h, w, s1);
        let b = image(3, h, w, s2);
        prop_assert!(total_loss(&a, &b, lambda).unwrap() >= 0.0);
        prop_assert_eq!(total_loss(&a, &a, lambda).unwrap(), 0.0);
    }

    #[test]
    fn degradations_clamp_and_repeat(d in degradation(), seed in any::<u64>(), img_seed in any::<u64>()) {
        let x = image(3, 12, 10, img_seed);
        let spec = DegradationSpec::new(d, seed).unwrap();
        let y = spec.apply(&x).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(y.bit_eq(&spec.apply(&x).unwrap()));
        let back = Degradation::parse(d.kind(), &d.params_string()).unwrap();
        prop_assert_eq!(back, d);
    }

    #[test]
    fn cosine_is_monotone_and_bounded(total in 1u64..500, lr0 in 1e-5f64..1e-1, frac in 0.0f64..0.99) {
        let lr_min = lr0 * frac;
        prop_assert_eq!(cosine_lr(0, total, lr0, lr_min), lr0);
        prop_assert_eq!(cosine_lr(total, total, lr0, lr_min), lr_min);
        for s in 1..=total {
            let (a, b) = (cosine_lr(s - 1, total, lr0, lr_min), cosine_lr(s, total, lr0, lr_min));
            prop_assert!(b <= a && b >= lr_min && a <= lr0);
        }
    }

    #[test]
    fn config_text_round_trip(levels in 1usize..4, c in 1usize..5, blocks in 1usize..4, guided in any::<bool>()) {
        let cfg = ModelConfig {
            levels,
            base_channels: 8 * c,
            encoder_blocks: vec![blocks; levels],
            decoder_blocks: vec![blocks; levels],
            heads_per_level: vec![1; levels + 1],
            decoder_patches: vec![2; levels],
            guidance_mode: if guided { GuidanceMode::Bidirectional } else { GuidanceMode::None },
            ..ModelConfig::default()
        };
        let back = ModelConfig::from_kv_text(&cfg.to_kv_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
