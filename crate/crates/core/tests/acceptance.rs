//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any criterion fails.
//!
//! Uses the bundled images under `data/`: `corpus` (20 held-out natural
//! images), `train` (8 training images) and `toy` (4 small images).

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ledd::autodiff::{linf_loss, truncated_l2_loss, Tensor};
use ledd::codec::bits::{BitReader, BitWriter};
use ledd::codec::{
    decode_bytes, decode_image, encode_image, golomb_rice_decode, golomb_rice_encode,
    quantize_residual,
};
use ledd::eval::{linf_bound, load_dir, measure_image, rd_sweep_images, roundtrip_check};
use ledd::gradcheck_suite::{operator_suite, Precision};
use ledd::image_io::GrayImage;
use ledd::network::{build_model, encode_weights, forward_refine, Model, ModelConfig};
use ledd::training::{
    build_dataset, train_with, RunOptions, TrainConfig, Trainer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Images = Vec<(PathBuf, GrayImage)>;

fn data_dir(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name)
}

fn corpus() -> Images {
    load_dir(&data_dir("corpus")).expect("bundled corpus")
}

/// Outcome of one criterion: a verdict plus a one-line summary.
struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within_budget(start: Instant, budget: Duration) -> (bool, String) {
    let elapsed = start.elapsed();
    (
        elapsed <= budget,
        format!("{:.1}s of {}s", elapsed.as_secs_f64(), budget.as_secs()),
    )
}

fn hard_bound() -> Outcome {
    let start = Instant::now();
    let images = corpus();
    let taus: Vec<u8> = (0..=8).collect();
    let records = roundtrip_check(&images, &taus, decode_bytes).expect("roundtrip");
    let violations = records.iter().filter(|r| !r.pass).count();
    let (fast, time) = within_budget(start, Duration::from_secs(60));
    outcome(
        images.len() == 20 && violations == 0 && fast,
        format!("{} images x 9 taus, {violations} violations, {time}", images.len()),
    )
}

fn quantizer_oracle() -> Outcome {
    let start = Instant::now();
    let mut bad = 0;
    for tau in 0u8..=8 {
        let step = 2 * i32::from(tau) + 1;
        for e in -255..=255 {
            let got = quantize_residual(e, tau).e_hat;
            // Nearest multiple of the odd step, found by search.
            let nearest = (-300..=300)
                .map(|m| m * step)
                .min_by_key(|v| (e - v).abs())
                .unwrap();
            if (e - got).abs() > i32::from(tau) || got % step != 0 || got != nearest {
                bad += 1;
            }
        }
    }
    let (fast, time) = within_budget(start, Duration::from_secs(1));
    outcome(bad == 0 && fast, format!("9 x 511 residuals, {bad} failures, {time}"))
}

/// PSNR of error uniform over the `2 tau + 1` integers in `[-tau, tau]`.
fn uniform_model_psnr(tau: u8) -> f64 {
    let t = f64::from(tau);
    10.0 * (3.0 * 255.0f64.powi(2) / (t * (t + 1.0))).log10()
}

fn psnr_model() -> Outcome {
    let start = Instant::now();
    let rows = rd_sweep_images(&corpus(), &[1, 2, 3, 4], None).expect("sweep");
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for row in &rows {
        let c = row.conventional;
        let model = uniform_model_psnr(c.tau);
        worst = worst.max((c.psnr_db - model).abs());
        parts.push(format!("tau {} {:.2}/{:.2}", c.tau, c.psnr_db, model));
    }
    let (fast, time) = within_budget(start, Duration::from_secs(60));
    outcome(
        worst <= 0.7 && fast,
        format!("{} dB (measured/model), max gap {worst:.3} dB, {time}", parts.join(", ")),
    )
}

fn rate_sanity() -> Outcome {
    let images = corpus();
    let mut ratio_range = (f64::MAX, f64::MIN);
    let mut non_monotone = Vec::new();
    let mut bpp_tau1 = 0.0;
    for (path, img) in &images {
        let bpp: Vec<f64> = (0..=8)
            .map(|tau| measure_image(path, img, tau, None).expect("measure").bpp)
            .collect();
        let ratio = 8.0 / bpp[0];
        ratio_range = (ratio_range.0.min(ratio), ratio_range.1.max(ratio));
        if bpp.windows(2).any(|w| w[1] >= w[0]) {
            non_monotone.push(path.display().to_string());
        }
        bpp_tau1 += bpp[1] / images.len() as f64;
    }
    let limit = 2.61 * 1.25;
    outcome(
        ratio_range.0 >= 1.3 && ratio_range.1 <= 3.0 && non_monotone.is_empty() && bpp_tau1 <= limit,
        format!(
            "lossless ratio {:.2}..{:.2}:1, non-monotone images {:?}, mean bpp at tau 1 {:.3} (limit {:.4})",
            ratio_range.0, ratio_range.1, non_monotone, bpp_tau1, limit
        ),
    )
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut failing = Vec::new();
    let mut worst = [0.0f64; 2];
    for (slot, precision) in [Precision::Single, Precision::Double].into_iter().enumerate() {
        for r in operator_suite(precision) {
            worst[slot] = worst[slot].max(r.report.max_rel_error);
            if !r.passed() {
                failing.push(format!("{precision:?} {}", r.name));
            }
        }
    }
    let (fast, time) = within_budget(start, Duration::from_secs(120));
    outcome(
        failing.is_empty() && fast,
        format!(
            "max rel error f32 {:.2e} (tol 1e-3), f64 {:.2e} (tol 1e-6), failing {failing:?}, {time}",
            worst[0], worst[1]
        ),
    )
}

/// Desk network with every layer, the tail included, drawn at random.
fn random_model(seed: u64, scale: f32) -> Model {
    let mut model = build_model(ModelConfig::desk(), seed).expect("model");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in model.layers_mut() {
        for v in layer
            .conv
            .weight
            .data_mut()
            .iter_mut()
            .chain(layer.conv.bias.data_mut())
        {
            *v = rng.gen_range(-scale..scale);
        }
    }
    model
}

fn truncation_guarantee() -> Outcome {
    let start = Instant::now();
    let images = corpus();
    let models = [
        build_model(ModelConfig::desk(), 1).expect("model"),
        random_model(2, 0.3),
    ];
    let mut violations = 0;
    let mut checks = 0;
    for (_, x) in &images {
        for tau in 1..=8u8 {
            let y = decode_image(&encode_image(x, tau).expect("encode").stream).expect("decode");
            for model in &models {
                let x_hat = forward_refine(model, &y, tau).expect("refine");
                checks += 1;
                if linf_bound(&x_hat, &y).unwrap() > tau || linf_bound(&x_hat, x).unwrap() > 2 * tau
                {
                    violations += 1;
                }
            }
        }
    }
    let (fast, time) = within_budget(start, Duration::from_secs(120));
    outcome(
        violations == 0 && fast,
        format!("{checks} refinements, {violations} violations, {time}"),
    )
}

fn single_pixel(v: f64) -> Tensor<f64> {
    Tensor::from_vec([1, 1, 1, 1], vec![v]).unwrap()
}

fn loss_identities() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ok = true;
    // Zero inside the tube, positive as soon as one pixel leaves it.
    for tau in 1..=8u8 {
        let t = f64::from(tau) / 255.0;
        let x: Vec<f64> = (0..64).map(|_| rng.gen_range(0.1..0.9)).collect();
        let inside: Vec<f64> = x.iter().map(|v| v + rng.gen_range(-t..=t)).collect();
        let xt = Tensor::from_vec([1, 1, 8, 8], x).unwrap();
        let mut it = Tensor::from_vec([1, 1, 8, 8], inside).unwrap();
        ok &= linf_loss(&it, &xt, t).unwrap().value == 0.0;
        it.data_mut()[5] = xt.data()[5] + t + 0.01;
        ok &= linf_loss(&it, &xt, t).unwrap().value > 0.0;
    }
    let single = linf_loss(&single_pixel(0.5 + 0.1 + 4.0 / 255.0), &single_pixel(0.5), 4.0 / 255.0)
        .unwrap()
        .value;
    let expected = -(0.9f64.ln());
    ok &= (single - expected).abs() <= 1e-6;
    let mut dominance_failures = 0;
    for tau in 1..=8u8 {
        let t = f64::from(tau) / 255.0;
        for i in 1..=500 {
            let excess = 0.5 * f64::from(i) / 500.0;
            for sign in [1.0, -1.0] {
                let x_hat = single_pixel(0.25 + sign * (t + excess));
                let x = single_pixel(0.25);
                let linf = linf_loss(&x_hat, &x, t).unwrap().value;
                let tl2 = truncated_l2_loss(&x_hat, &x, t).unwrap().value;
                if linf <= tl2 {
                    dominance_failures += 1;
                }
            }
        }
    }
    ok &= dominance_failures == 0;
    let (fast, time) = within_budget(start, Duration::from_secs(1));
    outcome(
        ok && fast,
        format!(
            "single pixel {single:.6} vs {expected:.6}, dominance failures {dominance_failures}/8000, {time}"
        ),
    )
}

/// Desk-scale training run shared by the efficacy and determinism checks.
fn desk_config() -> TrainConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.cfg");
    TrainConfig::from_kv_file(path).expect("configs/desk.cfg")
}

struct DeskRun {
    weights: Vec<u8>,
    model: Model,
    elapsed: Duration,
    pairs: usize,
    last_loss: f64,
}

fn desk_training(dir: &Path) -> DeskRun {
    let cfg = desk_config();
    let pairs = build_dataset(&data_dir("train"), &cfg).expect("dataset").len();
    let out = dir.join("desk.lnw");
    let start = Instant::now();
    let mut last_loss = f64::NAN;
    let model = train_with(&data_dir("train"), &cfg, &out, &RunOptions::default(), |log| {
        assert!(log.train_loss.is_finite(), "non-finite loss at epoch {}", log.epoch);
        last_loss = log.train_loss;
        println!("  {log}");
    })
    .expect("training");
    DeskRun {
        weights: std::fs::read(&out).expect("weights"),
        model,
        elapsed: start.elapsed(),
        pairs,
        last_loss,
    }
}

fn training_efficacy(run: &DeskRun) -> Outcome {
    let rows = rd_sweep_images(&corpus(), &[4, 6, 8], Some(&run.model)).expect("sweep");
    let mut ok = run.pairs >= 200 && run.elapsed <= Duration::from_secs(30 * 60);
    let mut parts = Vec::new();
    for row in &rows {
        let c = row.conventional;
        let r = row.refined.expect("refined");
        ok &= r.psnr_db > c.psnr_db && r.linf_bound <= 2 * c.tau;
        parts.push(format!(
            "tau {} {:+.3} dB (linf {})",
            c.tau,
            r.psnr_db - c.psnr_db,
            r.linf_bound
        ));
    }
    outcome(
        ok,
        format!(
            "{} pairs, final loss {:.3e}, held-out gain {}, {:.0}s",
            run.pairs,
            run.last_loss,
            parts.join(", "),
            run.elapsed.as_secs_f64()
        ),
    )
}

fn determinism(first: &DeskRun, dir: &Path) -> Outcome {
    let start = Instant::now();
    let cfg = desk_config();
    let train = build_dataset(&data_dir("train"), &cfg).expect("dataset");
    // Second run: interrupted after a third of the schedule, restored from
    // its checkpoint and finished on a different thread count.
    let split = cfg.total_epochs() / 3;
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let ckpt = single.install(|| {
        let mut t = Trainer::new(cfg.clone(), &train, &[]).expect("trainer");
        for _ in 0..split {
            t.run_epoch().expect("epoch");
        }
        let path = dir.join("desk.ckpt");
        t.save_checkpoint(&path).expect("checkpoint");
        path
    });
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let resumed = pool.install(|| {
        let bytes = std::fs::read(&ckpt).expect("checkpoint");
        let mut t = Trainer::from_checkpoint(cfg.clone(), &train, &[], &bytes).expect("resume");
        while !t.is_finished() {
            t.run_epoch().expect("epoch");
        }
        encode_weights(t.model())
    });
    let identical = resumed == first.weights;
    let elapsed = start.elapsed();
    outcome(
        identical && elapsed <= 2 * first.elapsed,
        format!(
            "resumed run after epoch {split} {} the uninterrupted run ({} bytes), {:.0}s",
            if identical { "matches" } else { "DIFFERS from" },
            first.weights.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn entropy_roundtrip() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let pairs: Vec<(u32, u32)> = (0..100_000)
        .map(|_| {
            let k = rng.gen_range(0..=16);
            (rng.gen_range(0..1u32 << 16), k)
        })
        .collect();
    let mut w = BitWriter::new();
    for &(u, k) in &pairs {
        golomb_rice_encode(&mut w, u, k);
    }
    let bytes = w.finish();
    let mut r = BitReader::new(&bytes);
    let values_ok = pairs
        .iter()
        .all(|&(u, k)| golomb_rice_decode(&mut r, k).ok() == Some(u));

    let mut images_ok = 0;
    for i in 0..50 {
        let (w, h) = (rng.gen_range(1..=96), rng.gen_range(1..=96));
        let smooth = i % 2 == 0;
        let samples = (0..w * h)
            .map(|p| {
                if smooth {
                    let (row, col) = (p / w, p % w);
                    ((row * 2 + col * 3) as i32 + rng.gen_range(-6..=6)).clamp(0, 255) as u8
                } else {
                    rng.gen()
                }
            })
            .collect();
        let img = GrayImage::new(w, h, samples).unwrap();
        let tau = rng.gen_range(0..=8);
        let enc = encode_image(&img, tau).unwrap();
        let dec = decode_bytes(&enc.stream.to_bytes()).unwrap();
        if dec == enc.reconstruction && (tau > 0 || dec == img) {
            images_ok += 1;
        }
    }
    let (fast, time) = within_budget(start, Duration::from_secs(10));
    outcome(
        values_ok && images_ok == 50 && fast,
        format!(
            "1e5 codewords {}, {images_ok}/50 images bit-exact, {time}",
            if values_ok { "exact" } else { "MISMATCH" }
        ),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    panic::catch_unwind(AssertUnwindSafe(f))
        .unwrap_or_else(|_| outcome(false, "panicked (see message above)"))
}

fn main() {
    // `cargo test -- <filter>` passes extra arguments; the suite always runs whole.
    let dir = tempfile::tempdir().expect("tempdir");
    let mut results: Vec<(u8, &str, Outcome)> = Vec::new();
    let mut report = |n: u8, name: &'static str, o: Outcome| {
        println!(
            "criterion {n:>2} {} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, name, o));
    };
    report(1, "hard l-infinity bound", guarded(hard_bound));
    report(2, "quantizer oracle", guarded(quantizer_oracle));
    report(3, "PSNR vs uniform-error model", guarded(psnr_model));
    report(4, "rate sanity", guarded(rate_sanity));
    report(5, "gradient checks", guarded(gradient_checks));
    report(6, "truncation guarantee", guarded(truncation_guarantee));
    report(7, "loss identities", guarded(loss_identities));
    let run = panic::catch_unwind(AssertUnwindSafe(|| desk_training(dir.path()))).ok();
    match &run {
        Some(run) => {
            report(8, "desk-scale training efficacy", guarded(|| training_efficacy(run)));
            report(9, "determinism and resume", guarded(|| determinism(run, dir.path())));
        }
        None => {
            report(8, "desk-scale training efficacy", outcome(false, "training failed"));
            report(9, "determinism and resume", outcome(false, "training failed"));
        }
    }
    report(10, "entropy coder roundtrip", guarded(entropy_roundtrip));

    let failed: Vec<u8> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
