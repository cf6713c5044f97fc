//! The l-infinity CNN refinement decoder.
//!
//! ```text
//! Y -> head conv + ReLU
//!   -> downsampled residual block (stride 2, 2x channels)
//!   -> N dilated residual blocks
//!   -> upsampled residual block (nearest x2)
//!   -> tail conv (1 channel) + Y        = x_tilde
//!   -> clamp into [Y - tau, Y + tau]   = x_hat
//! ```

mod weights;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{
    add, conv2d, conv2d_backward, joint_loss, relu, relu_backward, truncate, truncate_backward,
    upsample_nearest2x, upsample_nearest2x_backward, AutodiffError, BranchPattern, ConvParams,
    Real, Tensor, TruncationBounds,
};
use crate::image_io::{from_normalized, to_normalized, GrayImage, ImageError};

pub use weights::{
    decode_weights, encode_weights, load_weights, load_weights_expecting, read_tensor,
    save_weights, write_tensor, WEIGHTS_MAGIC, WEIGHTS_VERSION,
};
pub(crate) use weights::{read_tensor_at, Cursor};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("model/config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("malformed weight file: {0}")]
    Format(String),
    #[error("tau {0} outside 0..=8")]
    InvalidTau(u8),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub num_body_blocks: usize,
    pub dilation: usize,
    pub kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            num_body_blocks: 8,
            dilation: 2,
            kernel: 3,
        }
    }
}

impl ModelConfig {
    /// Width used for CPU-scale experiments.
    pub fn desk() -> Self {
        Self {
            base_channels: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.base_channels == 0 {
            return Err(NetworkError::InvalidConfig("base_channels must be >= 1".into()));
        }
        if self.num_body_blocks == 0 {
            return Err(NetworkError::InvalidConfig("num_body_blocks must be >= 1".into()));
        }
        if self.dilation != 2 || self.kernel != 3 {
            return Err(NetworkError::InvalidConfig(format!(
                "dilation {} / kernel {} (must be 2 / 3)",
                self.dilation, self.kernel
            )));
        }
        Ok(())
    }

    /// Layer names and geometry `(name, out, in, k, stride, dilation)` in
    /// parameter order.
    fn layout(&self) -> Vec<(String, usize, usize, usize, usize, usize)> {
        let (b, k, d) = (self.base_channels, self.kernel, self.dilation);
        let mut layers = vec![
            ("head".to_string(), b, 1, k, 1, 1),
            ("down.conv1".to_string(), 2 * b, b, k, 2, 1),
            ("down.conv2".to_string(), 2 * b, 2 * b, k, 1, 1),
            ("down.skip".to_string(), 2 * b, b, 1, 2, 1),
        ];
        for i in 0..self.num_body_blocks {
            layers.push((format!("body.{i}.conv1"), 2 * b, 2 * b, k, 1, d));
            layers.push((format!("body.{i}.conv2"), 2 * b, 2 * b, k, 1, d));
        }
        layers.extend([
            ("up.conv1".to_string(), b, 2 * b, k, 1, 1),
            ("up.conv2".to_string(), b, b, k, 1, 1),
            ("up.skip".to_string(), b, 2 * b, 1, 1, 1),
            ("tail".to_string(), 1, b, k, 1, 1),
        ]);
        layers
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedConv<T = f32> {
    pub name: String,
    pub conv: ConvParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    config: ModelConfig,
    layers: Vec<NamedConv<T>>,
}

/// Gradient w.r.t. one layer's weight and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients for every layer, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads<T = f32> {
    pub layers: Vec<LayerGrad<T>>,
}

impl<T: Real> ModelGrads<T> {
    pub fn zeros_like(model: &Model<T>) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Tensor::zeros(l.conv.weight.shape()),
                    bias: Tensor::zeros(l.conv.bias.shape()),
                })
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_assign(&b.weight).expect("same model");
            a.bias.add_assign(&b.bias).expect("same model");
        }
    }

    pub fn scale(&mut self, factor: T) {
        for l in &mut self.layers {
            l.weight.scale(factor);
            l.bias.scale(factor);
        }
    }

    /// All gradient values in parameter order (weight then bias per layer).
    pub fn flatten(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight
                .data()
                .iter()
                .chain(l.bias.data())
                .all(|v| v.is_finite())
        })
    }
}

/// Indices into the layer list.
const HEAD: usize = 0;
const DOWN_CONV1: usize = 1;
const DOWN_CONV2: usize = 2;
const DOWN_SKIP: usize = 3;
const BODY: usize = 4;

/// Cached activations of one forward pass.
pub struct Trace<T> {
    input: Tensor<T>,
    head_pre: Tensor<T>,
    head_act: Tensor<T>,
    down_pre: Tensor<T>,
    down_act: Tensor<T>,
    /// Input of each body block, then the body output.
    body_io: Vec<Tensor<T>>,
    body_pre: Vec<Tensor<T>>,
    body_act: Vec<Tensor<T>>,
    up_in: Tensor<T>,
    up_pre: Tensor<T>,
    up_act: Tensor<T>,
    up_out: Tensor<T>,
    /// Pre-truncation output: tail + input.
    pub x_tilde: Tensor<T>,
}

impl<T: Real> Trace<T> {
    /// Fingerprint of every ReLU sign in the pass.
    pub fn relu_pattern(&self, pattern: &mut BranchPattern) {
        let pres = [&self.head_pre, &self.down_pre, &self.up_pre]
            .into_iter()
            .chain(&self.body_pre);
        for t in pres {
            for &v in t.data() {
                pattern.push(u8::from(v > T::zero()));
            }
        }
    }
}

/// Value and gradients of the training objective for one sample.
#[derive(Clone, Debug)]
pub struct SampleLoss<T = f32> {
    pub value: f64,
    pub grads: ModelGrads<T>,
    pub x_hat: Tensor<T>,
}

impl Model<f32> {
    /// Builds the network with fan-in scaled Kaiming-uniform weights
    /// (bound `1/sqrt(fan_in)`) and zero biases. The tail starts at zero, so
    /// at initialization `x_tilde == Y`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self, NetworkError> {
        let mut model = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in model.layers.iter_mut().filter(|l| l.name != "tail") {
            let [_, in_ch, k, _] = layer.conv.weight.shape();
            let bound = 1.0 / ((in_ch * k * k) as f64).sqrt();
            for w in layer.conv.weight.data_mut() {
                let unit = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
                *w = ((2.0 * unit - 1.0) * bound) as f32;
            }
        }
        Ok(model)
    }
}

pub fn build_model(config: ModelConfig, seed: u64) -> Result<Model, NetworkError> {
    Model::build(config, seed)
}

impl<T: Real> Model<T> {
    /// All-zero parameters with the architecture of `config`.
    pub fn zeros(config: ModelConfig) -> Result<Self, NetworkError> {
        config.validate()?;
        let layers = config
            .layout()
            .into_iter()
            .map(|(name, out, inp, k, stride, dilation)| {
                Ok(NamedConv {
                    name,
                    conv: ConvParams::zeros(out, inp, k, stride, dilation)?,
                })
            })
            .collect::<Result<_, AutodiffError>>()?;
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[NamedConv<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [NamedConv<T>] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.conv.num_params()).sum()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config,
            layers: self
                .layers
                .iter()
                .map(|l| NamedConv {
                    name: l.name.clone(),
                    conv: l.conv.cast(),
                })
                .collect(),
        }
    }

    /// All parameter values in the order of [`ModelGrads::flatten`].
    pub fn flatten(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.conv.weight.data().iter().chain(l.conv.bias.data()).copied())
            .collect()
    }

    /// Inverse of [`Model::flatten`].
    pub fn set_flat(&mut self, values: &[T]) {
        assert_eq!(values.len(), self.num_params());
        let mut rest = values;
        for l in &mut self.layers {
            for t in [&mut l.conv.weight, &mut l.conv.bias] {
                let (head, tail) = rest.split_at(t.len());
                t.data_mut().copy_from_slice(head);
                rest = tail;
            }
        }
    }

    fn conv(&self, i: usize) -> &ConvParams<T> {
        &self.layers[i].conv
    }

    fn body_conv(&self, block: usize, which: usize) -> &ConvParams<T> {
        self.conv(BODY + 2 * block + which)
    }

    fn up_index(&self) -> usize {
        BODY + 2 * self.config.num_body_blocks
    }

    /// Runs the network up to the global skip, keeping every activation.
    pub fn forward_traced(&self, input: &Tensor<T>) -> Result<Trace<T>, NetworkError> {
        if input.channels() != 1 {
            return Err(NetworkError::ConfigMismatch(format!(
                "expected 1 input channel, got {}",
                input.channels()
            )));
        }
        // The head sees Y shifted to [-0.5, 0.5]; the skip adds the raw Y.
        let half = T::from_f64(0.5);
        let centered = input.map(|v| v - half);
        let head_pre = conv2d(&centered, self.conv(HEAD))?;
        let head_act = relu(&head_pre);

        let down_pre = conv2d(&head_act, self.conv(DOWN_CONV1))?;
        let down_act = relu(&down_pre);
        let down_out = add(
            &conv2d(&down_act, self.conv(DOWN_CONV2))?,
            &conv2d(&head_act, self.conv(DOWN_SKIP))?,
        )?;

        let blocks = self.config.num_body_blocks;
        let mut body_io = Vec::with_capacity(blocks + 1);
        let mut body_pre = Vec::with_capacity(blocks);
        let mut body_act = Vec::with_capacity(blocks);
        body_io.push(down_out);
        for b in 0..blocks {
            let x = &body_io[b];
            let pre = conv2d(x, self.body_conv(b, 0))?;
            let act = relu(&pre);
            let out = add(&conv2d(&act, self.body_conv(b, 1))?, x)?;
            body_pre.push(pre);
            body_act.push(act);
            body_io.push(out);
        }

        let up = self.up_index();
        let up_in = upsample_nearest2x(&body_io[blocks]);
        let up_pre = conv2d(&up_in, self.conv(up))?;
        let up_act = relu(&up_pre);
        let up_out = add(
            &conv2d(&up_act, self.conv(up + 1))?,
            &conv2d(&up_in, self.conv(up + 2))?,
        )?;
        let x_tilde = add(&conv2d(&up_out, self.conv(up + 3))?, input)?;

        Ok(Trace {
            input: centered,
            head_pre,
            head_act,
            down_pre,
            down_act,
            body_io,
            body_pre,
            body_act,
            up_in,
            up_pre,
            up_act,
            up_out,
            x_tilde,
        })
    }

    /// Back-propagates `grad_x_tilde` through the network. Returns the
    /// parameter gradients and the gradient w.r.t. the network input.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        grad_x_tilde: &Tensor<T>,
    ) -> Result<(ModelGrads<T>, Tensor<T>), NetworkError> {
        let mut grads = ModelGrads::zeros_like(self);
        let mut put = |i: usize, w: Tensor<T>, b: Tensor<T>| {
            grads.layers[i] = LayerGrad { weight: w, bias: b };
        };
        let up = self.up_index();

        let tail = conv2d_backward(&trace.up_out, self.conv(up + 3), grad_x_tilde)?;
        put(up + 3, tail.weight, tail.bias);
        let g_up_out = tail.input;

        let c2 = conv2d_backward(&trace.up_act, self.conv(up + 1), &g_up_out)?;
        put(up + 1, c2.weight, c2.bias);
        let g_pre = relu_backward(&trace.up_pre, &c2.input)?;
        let c1 = conv2d_backward(&trace.up_in, self.conv(up), &g_pre)?;
        put(up, c1.weight, c1.bias);
        let skip = conv2d_backward(&trace.up_in, self.conv(up + 2), &g_up_out)?;
        put(up + 2, skip.weight, skip.bias);
        let mut g_up_in = c1.input;
        g_up_in.add_assign(&skip.input)?;
        let mut g = upsample_nearest2x_backward(&g_up_in)?;

        for b in (0..self.config.num_body_blocks).rev() {
            let c2 = conv2d_backward(&trace.body_act[b], self.body_conv(b, 1), &g)?;
            put(BODY + 2 * b + 1, c2.weight, c2.bias);
            let g_pre = relu_backward(&trace.body_pre[b], &c2.input)?;
            let c1 = conv2d_backward(&trace.body_io[b], self.body_conv(b, 0), &g_pre)?;
            put(BODY + 2 * b, c1.weight, c1.bias);
            g.add_assign(&c1.input)?;
        }

        let c2 = conv2d_backward(&trace.down_act, self.conv(DOWN_CONV2), &g)?;
        put(DOWN_CONV2, c2.weight, c2.bias);
        let g_pre = relu_backward(&trace.down_pre, &c2.input)?;
        let c1 = conv2d_backward(&trace.head_act, self.conv(DOWN_CONV1), &g_pre)?;
        put(DOWN_CONV1, c1.weight, c1.bias);
        let skip = conv2d_backward(&trace.head_act, self.conv(DOWN_SKIP), &g)?;
        put(DOWN_SKIP, skip.weight, skip.bias);
        let mut g_head = c1.input;
        g_head.add_assign(&skip.input)?;

        let g_pre = relu_backward(&trace.head_pre, &g_head)?;
        let head = conv2d_backward(&trace.input, self.conv(HEAD), &g_pre)?;
        put(HEAD, head.weight, head.bias);
        let mut g_input = head.input;
        g_input.add_assign(grad_x_tilde)?;
        Ok((grads, g_input))
    }

    /// Pre-truncation output for a normalized `(N, 1, H, W)` input.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>, NetworkError> {
        Ok(self.forward_traced(input)?.x_tilde)
    }

    /// Joint training loss for one normalized pair, with gradients.
    /// `tau` is in 8-bit units.
    pub fn sample_loss(
        &self,
        y: &Tensor<T>,
        x: &Tensor<T>,
        tau: u8,
        lambda: f64,
    ) -> Result<SampleLoss<T>, NetworkError> {
        let trace = self.forward_traced(y)?;
        let bounds = TruncationBounds::around(y, tau);
        let x_hat = truncate(&trace.x_tilde, &bounds)?;
        let loss = joint_loss(&x_hat, x, f64::from(tau) / 255.0, lambda)?;
        let g_tilde = truncate_backward(&trace.x_tilde, &bounds, &loss.grad)?;
        let (grads, _) = self.backward(&trace, &g_tilde)?;
        Ok(SampleLoss {
            value: loss.value,
            grads,
            x_hat,
        })
    }

    /// Refined output `x_hat` for a normalized decoded image.
    pub fn refine_tensor(&self, y: &Tensor<T>, tau: u8) -> Result<Tensor<T>, NetworkError> {
        let x_tilde = self.forward(y)?;
        Ok(truncate(&x_tilde, &TruncationBounds::around(y, tau))?)
    }
}

/// Deep-decodes a conventionally decoded image. The output is guaranteed to
/// lie within `tau` of `y`, hence within `2 tau` of the original.
pub fn forward_refine<T: Real>(
    model: &Model<T>,
    y: &GrayImage,
    tau: u8,
) -> Result<GrayImage, NetworkError> {
    if tau > crate::codec::MAX_TAU {
        return Err(NetworkError::InvalidTau(tau));
    }
    let padded = y.pad_reflect_to_even();
    let x_hat = model.refine_tensor(&to_normalized::<T>(&padded), tau)?;
    let refined = from_normalized(&x_hat)?;
    let refined = if refined.width() == y.width() && refined.height() == y.height() {
        refined
    } else {
        refined.crop(0, 0, y.width(), y.height())
    };
    debug_assert!(refined
        .samples()
        .iter()
        .zip(y.samples())
        .all(|(a, b)| a.abs_diff(*b) <= tau));
    Ok(refined)
}
