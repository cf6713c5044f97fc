use std::path::{Path, PathBuf};

use ledd::codec::{self, CodeStream};
use ledd::eval::{linf_bound, load_dir};
use ledd::image_io::GrayImage;
use ledd::network::{build_model, forward_refine, load_weights, save_weights, Model, ModelConfig};
use ledd::training::{train, train_single_rate, TrainConfig};
use proptest::prelude::*;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn arb_image() -> impl Strategy<Value = GrayImage> {
    (1usize..24, 1usize..24).prop_flat_map(|(w, h)| {
        prop_oneof![
            proptest::collection::vec(any::<u8>(), w * h),
            // Smooth ramps with sparse jumps look more like photographs.
            (any::<u8>(), -3i32..4, proptest::collection::vec(0u8..4, w * h)).prop_map(
                move |(base, slope, noise)| {
                    (0..w * h)
                        .map(|i| {
                            let v = base as i32 + slope * (i % w) as i32 + noise[i] as i32;
                            v.clamp(0, 255) as u8
                        })
                        .collect()
                }
            ),
        ]
        .prop_map(move |px| GrayImage::new(w, h, px).unwrap())
    })
}

fn tiny_config(taus: Vec<u8>) -> TrainConfig {
    TrainConfig {
        taus,
        patch: 32,
        stride: 32,
        batch: 4,
        epochs_hi: 1,
        epochs_lo: 1,
        base_channels: 4,
        num_body_blocks: 1,
        seed: 9,
        ..TrainConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn stream_bytes_decode_to_the_encoder_reconstruction(img in arb_image(), tau in 0u8..=8) {
        let enc = codec::encode_image(&img, tau).unwrap();
        let bytes = enc.stream.to_bytes();
        prop_assert_eq!(CodeStream::from_bytes(&bytes).unwrap().to_bytes(), bytes.clone());
        let decoded = codec::decode_bytes(&bytes).unwrap();
        prop_assert_eq!(&decoded, &enc.reconstruction);
        prop_assert!(linf_bound(&img, &decoded).unwrap() <= tau);
        if tau == 0 {
            prop_assert_eq!(&decoded, &img);
        }
    }

    #[test]
    fn refined_output_stays_inside_both_bounds(img in arb_image(), tau in 1u8..=8, seed in 0u64..4) {
        let model = random_model(seed);
        let y = codec::decode_bytes(&codec::encode_image(&img, tau).unwrap().stream.to_bytes()).unwrap();
        let x_hat = forward_refine(&model, &y, tau).unwrap();
        prop_assert_eq!((x_hat.width(), x_hat.height()), (img.width(), img.height()));
        prop_assert!(linf_bound(&y, &x_hat).unwrap() <= tau);
        prop_assert!(linf_bound(&img, &x_hat).unwrap() <= 2 * tau);
    }
}

/// A small model whose every layer, tail included, carries random weights,
/// so the truncation is actually exercised.
fn random_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        base_channels: 4,
        num_body_blocks: 2,
        ..ModelConfig::desk()
    };
    let mut model = build_model(cfg, seed).unwrap();
    let mut state = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    let flat: Vec<f32> = model
        .flatten()
        .iter()
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            ((state >> 40) as f32 / (1u64 << 24) as f32 - 0.5) * 0.8
        })
        .collect();
    model.set_flat(&flat);
    model
}

#[test]
fn refined_corpus_images_respect_two_tau() {
    let model = random_model(7);
    for (path, img) in load_dir(&data("corpus")).unwrap().iter().take(6) {
        for tau in [1u8, 4, 8] {
            let y = codec::encode_image(img, tau).unwrap().reconstruction;
            let x_hat = forward_refine(&model, &y, tau).unwrap();
            assert!(linf_bound(&y, &x_hat).unwrap() <= tau, "{}", path.display());
            assert!(linf_bound(img, &x_hat).unwrap() <= 2 * tau, "{}", path.display());
        }
    }
}

#[test]
fn multi_rate_and_single_rate_models_both_respect_two_tau_at_four() {
    let dir = tempfile::tempdir().unwrap();
    let multi = train(&data("toy"), &tiny_config(vec![1, 4, 8]), &dir.path().join("multi.lnw")).unwrap();
    let single_path = dir.path().join("single.lnw");
    let single = train_single_rate(&data("toy"), &tiny_config(vec![4]), &single_path).unwrap();
    assert!(train_single_rate(&data("toy"), &tiny_config(vec![2, 4]), &single_path).is_err());

    // Same file format for both kinds of model.
    let reloaded = load_weights(&single_path).unwrap();
    assert_eq!(reloaded.flatten(), single.flatten());
    assert_eq!(reloaded.config(), multi.config());

    for (_, img) in load_dir(&data("corpus")).unwrap() {
        let y = codec::encode_image(&img, 4).unwrap().reconstruction;
        for model in [&multi, &single] {
            let x_hat = forward_refine(model, &y, 4).unwrap();
            assert!(linf_bound(&y, &x_hat).unwrap() <= 4);
            assert!(linf_bound(&img, &x_hat).unwrap() <= 8);
        }
    }
}

#[test]
fn odd_sized_images_are_refined_at_their_own_size() {
    let model = random_model(3);
    let img = GrayImage::new(13, 7, (0..91).map(|i| (i * 37 % 256) as u8).collect()).unwrap();
    let y = codec::encode_image(&img, 3).unwrap().reconstruction;
    let x_hat = forward_refine(&model, &y, 3).unwrap();
    assert_eq!((x_hat.width(), x_hat.height()), (13, 7));
    assert!(linf_bound(&y, &x_hat).unwrap() <= 3);
}

#[test]
fn weights_survive_a_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lnw");
    let model = random_model(11);
    save_weights(&model, &path).unwrap();
    let back = load_weights(&path).unwrap();
    assert_eq!(back.config(), model.config());
    let bits = |m: &Model| m.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&model));
}

#[test]
fn bundled_desk_config_covers_every_rate_and_enough_patches() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.cfg");
    let cfg = TrainConfig::from_kv_file(path).unwrap();
    assert_eq!(cfg.taus, (1..=8).collect::<Vec<u8>>());
    assert_eq!((cfg.base_channels, cfg.epochs_hi, cfg.epochs_lo), (16, 20, 10));
    let pairs = ledd::training::build_dataset(&data("train"), &cfg).unwrap();
    assert!(pairs.len() / cfg.taus.len() >= 200, "{} pairs", pairs.len());
}
