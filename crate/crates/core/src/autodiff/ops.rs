//! Differentiable operators. Each forward function has a matching
//! `*_backward` that maps the upstream gradient onto the operator inputs.

use super::tensor::{Real, Tensor};
use super::AutodiffError;

/// Weights and geometry of one convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    /// `(out_ch, in_ch, k, k)`
    pub weight: Tensor<T>,
    /// `(out_ch, 1, 1, 1)`
    pub bias: Tensor<T>,
    pub stride: usize,
    pub dilation: usize,
}

/// Gradients of a convolution w.r.t. its input and parameters.
#[derive(Clone, Debug)]
pub struct ConvGrads<T = f32> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> ConvParams<T> {
    pub fn zeros(
        out_ch: usize,
        in_ch: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
    ) -> Result<Self, AutodiffError> {
        let params = Self {
            weight: Tensor::zeros([out_ch, in_ch, kernel, kernel]),
            bias: Tensor::zeros([out_ch, 1, 1, 1]),
            stride,
            dilation,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    /// Zero padding on each side; keeps stride-1 outputs the input size.
    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel() - 1) / 2
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn cast<U: Real>(&self) -> ConvParams<U> {
        ConvParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            stride: self.stride,
            dilation: self.dilation,
        }
    }

    pub fn validate(&self) -> Result<(), AutodiffError> {
        let [o, _, kh, kw] = self.weight.shape();
        if kh != kw || kh % 2 == 0 {
            return Err(AutodiffError::InvalidGeometry(format!(
                "kernel must be square and odd, got {kh}x{kw}"
            )));
        }
        if !matches!(self.stride, 1 | 2) || !matches!(self.dilation, 1 | 2) {
            return Err(AutodiffError::InvalidGeometry(format!(
                "stride {} / dilation {} not in {{1, 2}}",
                self.stride, self.dilation
            )));
        }
        if self.bias.shape() != [o, 1, 1, 1] {
            return Err(AutodiffError::ShapeMismatch(format!(
                "bias {:?} for {o} output channels",
                self.bias.shape()
            )));
        }
        Ok(())
    }

    fn output_dims(&self, input: &Tensor<T>) -> Result<(usize, usize), AutodiffError> {
        self.validate()?;
        if input.channels() != self.in_channels() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "input has {} channels, layer expects {}",
                input.channels(),
                self.in_channels()
            )));
        }
        let (h, w) = (input.height(), input.width());
        if self.stride == 2 && (h % 2 != 0 || w % 2 != 0) {
            return Err(AutodiffError::InvalidGeometry(format!(
                "stride 2 needs even spatial dims, got {h}x{w}"
            )));
        }
        Ok((h / self.stride, w / self.stride))
    }
}

struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    out_height: usize,
    out_width: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Input coordinate sampled by kernel tap `tap` at output index `o`.
    #[inline]
    fn source(&self, o: usize, tap: usize) -> Option<usize> {
        let pos = (o * self.stride + tap * self.dilation) as isize - self.pad as isize;
        (pos >= 0).then_some(pos as usize)
    }
}

fn im2col<T: Real>(input: &[T], g: &Geometry, col: &mut [T]) {
    let cols = g.cols();
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_height {
                    let line = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    match g.source(oy, ky).filter(|&y| y < g.height) {
                        None => line.fill(T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * g.width..(iy + 1) * g.width];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.source(ox, kx).filter(|&x| x < g.width) {
                                    Some(ix) => src[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &Geometry, input_grad: &mut [T]) {
    let cols = g.cols();
    for c in 0..g.channels {
        let plane = &mut input_grad[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_height {
                    let Some(iy) = g.source(oy, ky).filter(|&y| y < g.height) else {
                        continue;
                    };
                    let line = &src[oy * g.out_width..(oy + 1) * g.out_width];
                    let dst = &mut plane[iy * g.width..(iy + 1) * g.width];
                    for (ox, &v) in line.iter().enumerate() {
                        if let Some(ix) = g.source(ox, kx).filter(|&x| x < g.width) {
                            dst[ix] = dst[ix] + v;
                        }
                    }
                }
            }
        }
    }
}

fn geometry<T: Real>(input: &Tensor<T>, p: &ConvParams<T>) -> Result<Geometry, AutodiffError> {
    let (out_height, out_width) = p.output_dims(input)?;
    Ok(Geometry {
        channels: input.channels(),
        height: input.height(),
        width: input.width(),
        out_height,
        out_width,
        kernel: p.kernel(),
        stride: p.stride,
        dilation: p.dilation,
        pad: p.padding(),
    })
}

/// Zero-padded 2-D cross-correlation.
pub fn conv2d<T: Real>(input: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>, AutodiffError> {
    let g = geometry(input, p)?;
    let out_ch = p.out_channels();
    let (rows, cols) = (g.rows(), g.cols());
    let mut out = Tensor::zeros([input.batch(), out_ch, g.out_height, g.out_width]);
    let mut col = vec![T::zero(); rows * cols];
    for n in 0..input.batch() {
        im2col(input.item(n), &g, &mut col);
        let dst = out.item_mut(n);
        for (o, &b) in p.bias.data().iter().enumerate() {
            dst[o * cols..(o + 1) * cols].fill(b);
        }
        T::gemm(
            out_ch,
            rows,
            cols,
            T::one(),
            p.weight.data(),
            rows as isize,
            1,
            &col,
            cols as isize,
            1,
            T::one(),
            dst,
            cols as isize,
            1,
        );
    }
    Ok(out)
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>, AutodiffError> {
    let g = geometry(input, p)?;
    let out_ch = p.out_channels();
    if grad_out.shape() != [input.batch(), out_ch, g.out_height, g.out_width] {
        return Err(AutodiffError::ShapeMismatch(format!(
            "output gradient {:?} does not match layer output",
            grad_out.shape()
        )));
    }
    let (rows, cols) = (g.rows(), g.cols());
    let mut grads = ConvGrads {
        input: Tensor::zeros(input.shape()),
        weight: Tensor::zeros(p.weight.shape()),
        bias: Tensor::zeros(p.bias.shape()),
    };
    let mut col = vec![T::zero(); rows * cols];
    for n in 0..input.batch() {
        let go = grad_out.item(n);
        for (o, b) in grads.bias.data_mut().iter_mut().enumerate() {
            *b = go[o * cols..(o + 1) * cols]
                .iter()
                .fold(*b, |acc, &v| acc + v);
        }
        im2col(input.item(n), &g, &mut col);
        // dW += dOut * col^T
        T::gemm(
            out_ch,
            cols,
            rows,
            T::one(),
            go,
            cols as isize,
            1,
            &col,
            1,
            cols as isize,
            T::one(),
            grads.weight.data_mut(),
            rows as isize,
            1,
        );
        // dcol = W^T * dOut
        T::gemm(
            rows,
            out_ch,
            cols,
            T::one(),
            p.weight.data(),
            1,
            rows as isize,
            go,
            cols as isize,
            1,
            T::zero(),
            &mut col,
            cols as isize,
            1,
        );
        col2im(&col, &g, grads.input.item_mut(n));
    }
    Ok(grads)
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward<T: Real>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>, AutodiffError> {
    input.check_same_shape(grad_out)?;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest2x<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = input.shape();
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    let src = input.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut dst[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for y in 0..2 * h {
            for x in 0..2 * w {
                d[y * 2 * w + x] = s[(y / 2) * w + x / 2];
            }
        }
    }
    out
}

/// 2x2 block sum of the output gradient.
pub fn upsample_nearest2x_backward<T: Real>(
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>, AutodiffError> {
    let [n, c, h2, w2] = grad_out.shape();
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(AutodiffError::ShapeMismatch(format!(
            "upsampled gradient {:?} has odd spatial dims",
            grad_out.shape()
        )));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros([n, c, h, w]);
    let src = grad_out.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let s = &src[plane * h2 * w2..(plane + 1) * h2 * w2];
        let d = &mut dst[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let top = 2 * y * w2 + 2 * x;
                let bottom = top + w2;
                d[y * w + x] = s[top] + s[top + 1] + s[bottom] + s[bottom + 1];
            }
        }
    }
    Ok(out)
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

/// Per-element interval `[lo, hi]` the truncated activation clamps into.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncationBounds<T = f32> {
    lo: Tensor<T>,
    hi: Tensor<T>,
}

impl<T: Real> TruncationBounds<T> {
    /// Bounds `(y - tau) / 255` and `(y + tau) / 255` around a normalized
    /// decoded image `y`.
    pub fn around(y: &Tensor<T>, tau: u8) -> Self {
        let offset = T::from_f64(f64::from(tau) / 255.0);
        Self {
            lo: y.map(|v| v - offset),
            hi: y.map(|v| v + offset),
        }
    }

    pub fn from_tensors(lo: Tensor<T>, hi: Tensor<T>) -> Result<Self, AutodiffError> {
        lo.check_same_shape(&hi)?;
        if lo.data().iter().zip(hi.data()).any(|(l, h)| l > h) {
            return Err(AutodiffError::InvalidBounds);
        }
        Ok(Self { lo, hi })
    }

    pub fn lo(&self) -> &Tensor<T> {
        &self.lo
    }

    pub fn hi(&self) -> &Tensor<T> {
        &self.hi
    }

    pub fn cast<U: Real>(&self) -> TruncationBounds<U> {
        TruncationBounds {
            lo: self.lo.cast(),
            hi: self.hi.cast(),
        }
    }
}

/// Truncated activation: clamps each element into its bound interval.
pub fn truncate<T: Real>(
    x_tilde: &Tensor<T>,
    bounds: &TruncationBounds<T>,
) -> Result<Tensor<T>, AutodiffError> {
    x_tilde.check_same_shape(&bounds.lo)?;
    let data = x_tilde
        .data()
        .iter()
        .zip(bounds.lo.data().iter().zip(bounds.hi.data()))
        .map(|(&x, (&lo, &hi))| {
            if x < lo {
                lo
            } else if x > hi {
                hi
            } else {
                x
            }
        })
        .collect();
    Tensor::from_vec(x_tilde.shape(), data)
}

/// Derivative 1 on the closed interval, 0 outside it.
pub fn truncate_backward<T: Real>(
    x_tilde: &Tensor<T>,
    bounds: &TruncationBounds<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>, AutodiffError> {
    x_tilde.check_same_shape(&bounds.lo)?;
    x_tilde.check_same_shape(grad_out)?;
    let data = x_tilde
        .data()
        .iter()
        .zip(bounds.lo.data().iter().zip(bounds.hi.data()))
        .zip(grad_out.data())
        .map(|((&x, (&lo, &hi)), &g)| if x >= lo && x <= hi { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x_tilde.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones_kernel(dilation: usize) -> ConvParams<f64> {
        let mut p = ConvParams::zeros(1, 1, 3, 1, dilation).unwrap();
        p.weight.data_mut().fill(1.0);
        p
    }

    #[test]
    fn identity_1x1_kernel() {
        let mut p = ConvParams::<f32>::zeros(2, 2, 1, 1, 1).unwrap();
        p.weight.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let data: Vec<f32> = (0..2 * 2 * 3 * 3).map(|v| v as f32 * 0.5 - 3.0).collect();
        let x = Tensor::from_vec([2, 2, 3, 3], data).unwrap();
        assert_eq!(conv2d(&x, &p).unwrap(), x);
    }

    #[test]
    fn all_ones_kernel_on_constant_input() {
        let x = Tensor::<f64>::full([1, 1, 5, 5], 1.0);
        let out = conv2d(&x, &ones_kernel(1)).unwrap();
        let at = |y: usize, x: usize| out.data()[y * 5 + x];
        assert_eq!(at(2, 2), 9.0);
        assert_eq!(at(0, 0), 4.0);
        assert_eq!(at(0, 2), 6.0);
    }

    #[test]
    fn dilated_kernel_footprint() {
        let x = Tensor::<f64>::full([1, 1, 5, 5], 1.0);
        let out = conv2d(&x, &ones_kernel(2)).unwrap();
        assert_eq!(out.shape(), [1, 1, 5, 5]);
        assert_eq!(out.data()[0], 4.0);
        assert_eq!(out.data()[2 * 5 + 2], 9.0);
        // (1,1): taps at -1, 1, 3 in each axis, only two land inside.
        assert_eq!(out.data()[5 + 1], 4.0);
    }

    #[test]
    fn stride_two_halves_even_inputs() {
        let mut p = ConvParams::<f32>::zeros(3, 1, 3, 2, 1).unwrap();
        p.weight.data_mut().fill(0.1);
        let x = Tensor::<f32>::full([1, 1, 8, 6], 1.0);
        assert_eq!(conv2d(&x, &p).unwrap().shape(), [1, 3, 4, 3]);
        let odd = Tensor::<f32>::full([1, 1, 7, 6], 1.0);
        assert!(matches!(conv2d(&odd, &p), Err(AutodiffError::InvalidGeometry(_))));
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_bad_geometry() {
        let p = ConvParams::<f32>::zeros(1, 2, 3, 1, 1).unwrap();
        let x = Tensor::<f32>::zeros([1, 3, 4, 4]);
        assert!(matches!(conv2d(&x, &p), Err(AutodiffError::ShapeMismatch(_))));
        assert!(ConvParams::<f32>::zeros(1, 1, 2, 1, 1).is_err());
        assert!(ConvParams::<f32>::zeros(1, 1, 3, 3, 1).is_err());
        assert!(ConvParams::<f32>::zeros(1, 1, 3, 1, 4).is_err());
    }

    #[test]
    fn relu_forward_and_backward() {
        let x = Tensor::<f32>::from_vec([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = Tensor::full([1, 1, 1, 3], 5.0);
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn upsample_replicates_and_block_sums() {
        let x = Tensor::<f32>::full([1, 1, 1, 1], 3.0);
        let up = upsample_nearest2x(&x);
        assert_eq!(up.shape(), [1, 1, 2, 2]);
        assert_eq!(up.data(), &[3.0; 4]);
        let x = Tensor::<f32>::zeros([1, 3, 2, 5]);
        assert_eq!(upsample_nearest2x(&x).shape(), [1, 3, 4, 10]);
        let g = Tensor::from_vec([1, 1, 2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(upsample_nearest2x_backward(&g).unwrap().data(), &[14.0, 22.0]);
    }

    #[test]
    fn add_identity_and_commutes() {
        let a = Tensor::<f32>::from_vec([1, 1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let b = Tensor::<f32>::from_vec([1, 1, 1, 3], vec![4.0, 0.25, -8.0]).unwrap();
        assert_eq!(add(&a, &Tensor::zeros(a.shape())).unwrap(), a);
        assert_eq!(add(&a, &b).unwrap(), add(&b, &a).unwrap());
        assert!(add(&a, &Tensor::zeros([1, 1, 3, 1])).is_err());
    }

    #[test]
    fn truncation_clamps_and_gates_gradient() {
        let y = Tensor::<f64>::full([1, 1, 1, 4], 8.0 / 255.0);
        let bounds = TruncationBounds::around(&y, 1);
        let hi = 9.0 / 255.0;
        let lo = 7.0 / 255.0;
        let x = Tensor::from_vec([1, 1, 1, 4], vec![8.0 / 255.0, hi + 0.1, -1.0, hi]).unwrap();
        let out = truncate(&x, &bounds).unwrap();
        let expected = [8.0 / 255.0, hi, lo, hi];
        for (o, e) in out.data().iter().zip(expected) {
            assert!((o - e).abs() < 1e-15);
        }
        let g = Tensor::full([1, 1, 1, 4], 1.0);
        let back = truncate_backward(&x, &bounds, &g).unwrap();
        assert_eq!(back.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn bounds_width_is_two_tau() {
        let y = Tensor::<f64>::from_vec([1, 1, 1, 3], vec![0.0, 0.5, 1.0]).unwrap();
        let b = TruncationBounds::around(&y, 3);
        for (l, h) in b.lo().data().iter().zip(b.hi().data()) {
            assert!((h - l - 6.0 / 255.0).abs() < 1e-12);
        }
        assert!(TruncationBounds::from_tensors(b.hi().clone(), b.lo().clone()).is_err());
    }
}
