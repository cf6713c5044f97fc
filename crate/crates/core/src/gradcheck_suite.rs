//! Finite-difference checks of every differentiable operator and of the
//! full network loss.
//!
//! Tensor-valued operators are reduced to a scalar by a fixed random
//! projection `sum_i w_i out_i`, whose gradient is the backward pass fed
//! with `w`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    add, conv2d, conv2d_backward, grad_check, joint_loss, linf_loss, mse_loss, relu,
    relu_backward, truncate, truncate_backward, truncated_l2_loss, upsample_nearest2x,
    upsample_nearest2x_backward, BranchPattern, ConvParams, GradCheckConfig, GradCheckReport,
    Loss, Probe, Real, Tensor, TruncationBounds, DEFAULT_LAMBDA,
};
use crate::network::{Model, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn config(self) -> GradCheckConfig {
        match self {
            Precision::Single => GradCheckConfig::single(),
            Precision::Double => GradCheckConfig::double(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub name: String,
    pub report: GradCheckReport,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

/// Runs the whole suite; deterministic for a given precision.
pub fn operator_suite(precision: Precision) -> Vec<OpReport> {
    let cfg = precision.config();
    match precision {
        Precision::Single => run::<f32>(&cfg),
        Precision::Double => run::<f64>(&cfg),
    }
}

fn run<T: Real>(cfg: &GradCheckConfig) -> Vec<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6c6e_6c63);
    let mut out = vec![
        check_conv::<T>("conv2d 3x3", &mut rng, cfg, (3, 4, 3, 1, 1)),
        check_conv::<T>("conv2d 3x3 dilated", &mut rng, cfg, (3, 4, 3, 1, 2)),
        check_conv::<T>("conv2d 3x3 stride 2", &mut rng, cfg, (3, 4, 3, 2, 1)),
        check_conv::<T>("conv2d 1x1", &mut rng, cfg, (3, 4, 1, 1, 1)),
        check_relu::<T>(&mut rng, cfg),
        check_upsample::<T>(&mut rng, cfg),
        check_add::<T>(&mut rng, cfg),
        check_truncate::<T>(&mut rng, cfg),
    ];
    let tau = 4.0 / 255.0;
    out.push(check_loss::<T, _>("mse_loss", &mut rng, cfg, |a, b| mse_loss(a, b)));
    out.push(check_loss::<T, _>("truncated_l2_loss", &mut rng, cfg, |a, b| {
        truncated_l2_loss(a, b, tau)
    }));
    out.push(check_loss::<T, _>("linf_loss", &mut rng, cfg, |a, b| {
        linf_loss(a, b, tau)
    }));
    out.push(check_loss::<T, _>("joint_loss", &mut rng, cfg, |a, b| {
        joint_loss(a, b, tau, DEFAULT_LAMBDA)
    }));
    out.push(check_network::<T>(&mut rng, cfg));
    out
}

fn random_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.gen_range(lo..hi))).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

fn project<T: Real>(t: &Tensor<T>, w: &Tensor<T>) -> f64 {
    t.data()
        .iter()
        .zip(w.data())
        .map(|(a, b)| a.as_f64() * b.as_f64())
        .sum()
}

fn to_f64<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn with_data<T: Real>(shape: [usize; 4], data: &[T]) -> Tensor<T> {
    Tensor::from_vec(shape, data.to_vec()).expect("shape matches")
}

fn smooth(value: f64) -> Probe {
    Probe { value, pattern: 0 }
}

/// `(in, out, kernel, stride, dilation)`; checks input, weight and bias.
fn check_conv<T: Real>(
    name: &str,
    rng: &mut ChaCha8Rng,
    cfg: &GradCheckConfig,
    (cin, cout, k, stride, dilation): (usize, usize, usize, usize, usize),
) -> OpReport {
    let x = random_tensor::<T>(rng, [2, cin, 8, 8], -1.0, 1.0);
    let mut p = ConvParams::<T>::zeros(cout, cin, k, stride, dilation).expect("valid geometry");
    p.weight = random_tensor(rng, p.weight.shape(), -0.5, 0.5);
    p.bias = random_tensor(rng, p.bias.shape(), -0.5, 0.5);
    let y = conv2d(&x, &p).expect("forward");
    let w = random_tensor::<T>(rng, y.shape(), -1.0, 1.0);
    let g = conv2d_backward(&x, &p, &w).expect("backward");

    let mut report = grad_check(
        x.data(),
        &to_f64(&g.input),
        &all(x.len()),
        |d| smooth(project(&conv2d(&with_data(x.shape(), d), &p).unwrap(), &w)),
        cfg,
    );
    let wshape = p.weight.shape();
    report.merge(&grad_check(
        p.weight.data(),
        &to_f64(&g.weight),
        &all(p.weight.len()),
        |d| {
            let mut q = p.clone();
            q.weight = with_data(wshape, d);
            smooth(project(&conv2d(&x, &q).unwrap(), &w))
        },
        cfg,
    ));
    let bshape = p.bias.shape();
    report.merge(&grad_check(
        p.bias.data(),
        &to_f64(&g.bias),
        &all(p.bias.len()),
        |d| {
            let mut q = p.clone();
            q.bias = with_data(bshape, d);
            smooth(project(&conv2d(&x, &q).unwrap(), &w))
        },
        cfg,
    ));
    OpReport {
        name: name.into(),
        report,
    }
}

fn check_relu<T: Real>(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> OpReport {
    let x = random_tensor::<T>(rng, [2, 3, 5, 5], -1.0, 1.0);
    let w = random_tensor::<T>(rng, x.shape(), -1.0, 1.0);
    let g = relu_backward(&x, &w).expect("backward");
    let report = grad_check(
        x.data(),
        &to_f64(&g),
        &all(x.len()),
        |d| {
            let mut pattern = BranchPattern::default();
            for v in d {
                pattern.push(u8::from(*v > T::zero()));
            }
            let t = with_data(x.shape(), d);
            Probe {
                value: project(&relu(&t), &w),
                pattern: pattern.finish(),
            }
        },
        cfg,
    );
    OpReport {
        name: "relu".into(),
        report,
    }
}

fn check_upsample<T: Real>(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> OpReport {
    let x = random_tensor::<T>(rng, [2, 3, 4, 5], -1.0, 1.0);
    let w = random_tensor::<T>(rng, [2, 3, 8, 10], -1.0, 1.0);
    let g = upsample_nearest2x_backward(&w).expect("backward");
    let report = grad_check(
        x.data(),
        &to_f64(&g),
        &all(x.len()),
        |d| smooth(project(&upsample_nearest2x(&with_data(x.shape(), d)), &w)),
        cfg,
    );
    OpReport {
        name: "upsample_nearest2x".into(),
        report,
    }
}

fn check_add<T: Real>(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> OpReport {
    let a = random_tensor::<T>(rng, [2, 3, 4, 4], -1.0, 1.0);
    let b = random_tensor::<T>(rng, a.shape(), -1.0, 1.0);
    let w = random_tensor::<T>(rng, a.shape(), -1.0, 1.0);
    // d/da = d/db = w
    let mut report = grad_check(
        a.data(),
        &to_f64(&w),
        &all(a.len()),
        |d| smooth(project(&add(&with_data(a.shape(), d), &b).unwrap(), &w)),
        cfg,
    );
    report.merge(&grad_check(
        b.data(),
        &to_f64(&w),
        &all(b.len()),
        |d| smooth(project(&add(&a, &with_data(b.shape(), d)).unwrap(), &w)),
        cfg,
    ));
    OpReport {
        name: "add".into(),
        report,
    }
}

fn region<T: Real>(v: T, lo: T, hi: T) -> u8 {
    if v < lo {
        0
    } else if v > hi {
        2
    } else {
        1
    }
}

fn check_truncate<T: Real>(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> OpReport {
    let y = random_tensor::<T>(rng, [1, 1, 8, 8], 0.2, 0.8);
    let bounds = TruncationBounds::around(&y, 8);
    // Spread values so that all three regions occur.
    let x = random_tensor::<T>(rng, y.shape(), 0.1, 0.9);
    let w = random_tensor::<T>(rng, y.shape(), -1.0, 1.0);
    let g = truncate_backward(&x, &bounds, &w).expect("backward");
    let report = grad_check(
        x.data(),
        &to_f64(&g),
        &all(x.len()),
        |d| {
            let mut pattern = BranchPattern::default();
            for ((v, lo), hi) in d.iter().zip(bounds.lo().data()).zip(bounds.hi().data()) {
                pattern.push(region(*v, *lo, *hi));
            }
            let t = with_data(y.shape(), d);
            Probe {
                value: project(&truncate(&t, &bounds).unwrap(), &w),
                pattern: pattern.finish(),
            }
        },
        cfg,
    );
    OpReport {
        name: "truncate".into(),
        report,
    }
}

/// Fingerprint of which pixels lie outside the `tau` tube.
fn tube_pattern<T: Real>(x_hat: &[T], x: &[T], tau: f64, pattern: &mut BranchPattern) {
    for (a, b) in x_hat.iter().zip(x) {
        pattern.push(u8::from((a.as_f64() - b.as_f64()).abs() > tau));
    }
}

fn check_loss<T: Real, L>(
    name: &str,
    rng: &mut ChaCha8Rng,
    cfg: &GradCheckConfig,
    loss: L,
) -> OpReport
where
    L: Fn(&Tensor<T>, &Tensor<T>) -> Result<Loss<T>, crate::autodiff::AutodiffError>,
{
    let tau = 4.0 / 255.0;
    let x = random_tensor::<T>(rng, [1, 1, 6, 6], 0.2, 0.8);
    // Errors of up to ~4 tau, so both sides of the tube occur.
    let offset = random_tensor::<T>(rng, x.shape(), -0.06, 0.06);
    let mut x_hat = x.clone();
    x_hat.add_assign(&offset).expect("same shape");
    let grad = loss(&x_hat, &x).expect("loss");
    let report = grad_check(
        x_hat.data(),
        &to_f64(&grad.grad),
        &all(x_hat.len()),
        |d| {
            let mut pattern = BranchPattern::default();
            tube_pattern(d, x.data(), tau, &mut pattern);
            Probe {
                value: loss(&with_data(x.shape(), d), &x).expect("loss").value,
                pattern: pattern.finish(),
            }
        },
        cfg,
    );
    OpReport {
        name: name.into(),
        report,
    }
}

/// Joint loss of the whole network at `tau = 4`, checked on sampled
/// weights and every bias of each layer.
fn check_network<T: Real>(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> OpReport {
    const TAU: u8 = 4;
    const SIZE: usize = 8;
    const WEIGHTS_PER_LAYER: usize = 16;
    let config = ModelConfig {
        base_channels: 2,
        num_body_blocks: 1,
        ..ModelConfig::desk()
    };
    let mut model = Model::<T>::zeros(config).expect("valid config");
    for layer in model.layers_mut() {
        let fan_in = layer.conv.in_channels() * layer.conv.kernel().pow(2);
        let bound = (3.0 / fan_in as f64).sqrt();
        layer.conv.weight = random_tensor(rng, layer.conv.weight.shape(), -bound, bound);
        layer.conv.bias = random_tensor(rng, layer.conv.bias.shape(), -0.1, 0.1);
    }
    let y = random_tensor::<T>(rng, [1, 1, SIZE, SIZE], 0.2, 0.8);
    let noise = random_tensor::<T>(rng, y.shape(), -0.04, 0.04);
    let mut x = y.clone();
    x.add_assign(&noise).expect("same shape");
    let tau = f64::from(TAU) / 255.0;
    let bounds = TruncationBounds::around(&y, TAU);

    let analytic = model
        .sample_loss(&y, &x, TAU, DEFAULT_LAMBDA)
        .expect("loss")
        .grads
        .flatten();
    let analytic: Vec<f64> = analytic.iter().map(|v| v.as_f64()).collect();

    let mut coords = Vec::new();
    let mut start = 0;
    for layer in model.layers() {
        let (nw, nb) = (layer.conv.weight.len(), layer.conv.bias.len());
        for _ in 0..WEIGHTS_PER_LAYER {
            coords.push(start + rng.gen_range(0..nw));
        }
        coords.extend(start + nw..start + nw + nb);
        start += nw + nb;
    }
    let params = model.flatten();
    let mut probe_model = model.clone();
    let report = grad_check(
        &params,
        &analytic,
        &coords,
        |theta| {
            probe_model.set_flat(theta);
            let trace = probe_model.forward_traced(&y).expect("forward");
            let mut pattern = BranchPattern::default();
            trace.relu_pattern(&mut pattern);
            for ((v, lo), hi) in trace
                .x_tilde
                .data()
                .iter()
                .zip(bounds.lo().data())
                .zip(bounds.hi().data())
            {
                pattern.push(region(*v, *lo, *hi));
            }
            let x_hat = truncate(&trace.x_tilde, &bounds).expect("truncate");
            tube_pattern(x_hat.data(), x.data(), tau, &mut pattern);
            Probe {
                value: joint_loss(&x_hat, &x, tau, DEFAULT_LAMBDA)
                    .expect("loss")
                    .value,
                pattern: pattern.finish(),
            }
        },
        cfg,
    );
    OpReport {
        name: "network joint loss".into(),
        report,
    }
}
