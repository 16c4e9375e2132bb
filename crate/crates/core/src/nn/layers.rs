//! Differentiable layers with hand-written backward passes.
//!
//! Every layer caches whatever its backward pass needs during forward.
//! Backward passes accumulate (`+=`) into the gradient buffers; the
//! optimizer zeroes them after each step. Gradient buffers always have
//! the same shapes as their parameters.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Forward-pass mode. Only batch normalization distinguishes the two:
/// `Train` uses batch statistics (and updates the running averages),
/// `Eval` uses the running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn xavier_uniform(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("init shape consistent")
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

/// Fully connected layer `y = W x + b` with `W: [out, in]`.
///
/// Inputs of rank > 2 are flattened past the batch axis; the backward pass
/// restores the original input shape. An optional `reshape_to` re-shapes the
/// output rows (used when a dense layer feeds a convolutional stack).
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
    pub grad_weight: Tensor,
    pub grad_bias: Tensor,
    reshape_to: Option<Vec<usize>>,
    cached_input: Option<Tensor>,
}

impl Dense {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self::from_parts(
            xavier_uniform(vec![out_dim, in_dim], in_dim, out_dim, rng),
            Tensor::zeros(vec![out_dim]),
        )
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Self {
        assert_eq!(weight.rank(), 2, "dense weight must be [out, in]");
        assert_eq!(weight.dim(0), bias.len(), "bias width must match weight rows");
        let gw = Tensor::zeros(weight.shape().to_vec());
        let gb = Tensor::zeros(bias.shape().to_vec());
        Self {
            weight,
            bias,
            grad_weight: gw,
            grad_bias: gb,
            reshape_to: None,
            cached_input: None,
        }
    }

    pub fn with_output_shape(mut self, shape: Vec<usize>) -> Self {
        let out_dim = self.weight.dim(0);
        assert_eq!(
            shape.iter().product::<usize>(),
            out_dim,
            "reshape_to must preserve the output width"
        );
        self.reshape_to = Some(shape);
        self
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let in_dim = self.in_dim();
        if input.row_len() != in_dim {
            return Err(Error::Shape(format!(
                "dense expects row width {in_dim}, got input shape {:?}",
                input.shape()
            )));
        }
        let n = input.batch();
        let out_dim = self.out_dim();
        let w = self.weight.data();
        let b = self.bias.data();
        let mut out = vec![0.0; n * out_dim];
        for i in 0..n {
            let x = input.row(i);
            let y = &mut out[i * out_dim..(i + 1) * out_dim];
            for (o, yo) in y.iter_mut().enumerate() {
                let wrow = &w[o * in_dim..(o + 1) * in_dim];
                let mut acc = b[o];
                for (wj, xj) in wrow.iter().zip(x) {
                    acc += wj * xj;
                }
                *yo = acc;
            }
        }
        self.cached_input = Some(input.clone());
        let mut shape = vec![n, out_dim];
        if let Some(rs) = &self.reshape_to {
            shape = std::iter::once(n).chain(rs.iter().copied()).collect();
        }
        Tensor::new(shape, out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let input = self
            .cached_input
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("dense backward without prior forward".into()))?;
        let (n, in_dim, out_dim) = (input.batch(), self.in_dim(), self.out_dim());
        if grad_out.batch() != n || grad_out.row_len() != out_dim {
            return Err(Error::Shape(format!(
                "dense backward: gradient shape {:?} does not match output [{n}, {out_dim}]",
                grad_out.shape()
            )));
        }
        let w = self.weight.data();
        let gw = self.grad_weight.data_mut();
        let gb = self.grad_bias.data_mut();
        let mut grad_in = Tensor::zeros(input.shape().to_vec());
        for i in 0..n {
            let x = input.row(i);
            let g = grad_out.row(i);
            let gi = grad_in.row_mut(i);
            for (o, &go) in g.iter().enumerate() {
                gb[o] += go;
                let wrow = &w[o * in_dim..(o + 1) * in_dim];
                let gwrow = &mut gw[o * in_dim..(o + 1) * in_dim];
                for j in 0..in_dim {
                    gwrow[j] += go * x[j];
                    gi[j] += go * wrow[j];
                }
            }
        }
        Ok(grad_in)
    }
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

/// 2-D convolution with zero padding and declared stride.
///
/// Input `[n, in_c, h, w]`, kernel `[out_c, in_c, kh, kw]`, output spatial
/// size `floor((h + 2p - kh) / stride) + 1`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub grad_kernel: Tensor,
    pub grad_bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    cached_input: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(stride >= 1 && kernel >= 1);
        let fan_in = in_c * kernel * kernel;
        let fan_out = out_c * kernel * kernel;
        let k = xavier_uniform(vec![out_c, in_c, kernel, kernel], fan_in, fan_out, rng);
        Self::from_parts(k, Tensor::zeros(vec![out_c]), stride, padding)
    }

    pub fn from_parts(kernel: Tensor, bias: Tensor, stride: usize, padding: usize) -> Self {
        assert_eq!(kernel.rank(), 4, "conv kernel must be [out_c, in_c, kh, kw]");
        let gk = Tensor::zeros(kernel.shape().to_vec());
        let gb = Tensor::zeros(bias.shape().to_vec());
        Self {
            kernel,
            bias,
            grad_kernel: gk,
            grad_bias: gb,
            stride,
            padding,
            cached_input: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = (self.kernel.dim(2), self.kernel.dim(3));
        let (s, p) = (self.stride, self.padding);
        if h + 2 * p < kh || w + 2 * p < kw {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {h}x{w} (padding {p})"
            )));
        }
        Ok(((h + 2 * p - kh) / s + 1, (w + 2 * p - kw) / s + 1))
    }

    pub fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let (out_c, in_c, kh, kw) = (
            self.kernel.dim(0),
            self.kernel.dim(1),
            self.kernel.dim(2),
            self.kernel.dim(3),
        );
        if input.rank() != 4 || input.dim(1) != in_c {
            return Err(Error::Shape(format!(
                "conv2d expects [n, {in_c}, h, w], got {:?}",
                input.shape()
            )));
        }
        let (n, h, w) = (input.dim(0), input.dim(2), input.dim(3));
        let (oh, ow) = self.output_hw(h, w)?;
        let (s, p) = (self.stride as isize, self.padding as isize);
        let x = input.data();
        let k = self.kernel.data();
        let b = self.bias.data();
        let mut out = vec![0.0; n * out_c * oh * ow];
        for i in 0..n {
            for oc in 0..out_c {
                let o_base = ((i * out_c) + oc) * oh * ow;
                let k_base = oc * in_c * kh * kw;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[oc];
                        for ic in 0..in_c {
                            let x_base = ((i * in_c) + ic) * h * w;
                            let kk = &k[k_base + ic * kh * kw..k_base + (ic + 1) * kh * kw];
                            for u in 0..kh {
                                let iy = oy as isize * s + u as isize - p;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let row = x_base + iy as usize * w;
                                for v in 0..kw {
                                    let ix = ox as isize * s + v as isize - p;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[row + ix as usize] * kk[u * kw + v];
                                }
                            }
                        }
                        out[o_base + oy * ow + ox] = acc;
                    }
                }
            }
        }
        self.cached_input = Some(input.clone());
        Tensor::new(vec![n, out_c, oh, ow], out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let input = self
            .cached_input
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("conv2d backward without prior forward".into()))?;
        let (out_c, in_c, kh, kw) = (
            self.kernel.dim(0),
            self.kernel.dim(1),
            self.kernel.dim(2),
            self.kernel.dim(3),
        );
        let (n, h, w) = (input.dim(0), input.dim(2), input.dim(3));
        let (oh, ow) = self.output_hw(h, w)?;
        if grad_out.shape() != [n, out_c, oh, ow] {
            return Err(Error::Shape(format!(
                "conv2d backward: gradient shape {:?} does not match output [{n}, {out_c}, {oh}, {ow}]",
                grad_out.shape()
            )));
        }
        let (s, p) = (self.stride as isize, self.padding as isize);
        let x = input.data();
        let k = self.kernel.data();
        let g = grad_out.data();
        let gk = self.grad_kernel.data_mut();
        let gb = self.grad_bias.data_mut();
        let mut grad_in = Tensor::zeros(input.shape().to_vec());
        let gi = grad_in.data_mut();
        for i in 0..n {
            for oc in 0..out_c {
                let o_base = ((i * out_c) + oc) * oh * ow;
                let k_base = oc * in_c * kh * kw;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = g[o_base + oy * ow + ox];
                        gb[oc] += go;
                        for ic in 0..in_c {
                            let x_base = ((i * in_c) + ic) * h * w;
                            let kk_off = k_base + ic * kh * kw;
                            for u in 0..kh {
                                let iy = oy as isize * s + u as isize - p;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let row = x_base + iy as usize * w;
                                for v in 0..kw {
                                    let ix = ox as isize * s + v as isize - p;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = row + ix as usize;
                                    gk[kk_off + u * kw + v] += go * x[xi];
                                    gi[xi] += go * k[kk_off + u * kw + v];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(grad_in)
    }
}

// ---------------------------------------------------------------------------
// ConvTranspose2d
// ---------------------------------------------------------------------------

/// Transposed 2-D convolution, defined as the gradient of the matching
/// convolution.
///
/// Input `[n, in_c, h, w]`, kernel `[in_c, out_c, kh, kw]`, output spatial
/// size `(h - 1) * stride + kh - 2p + output_padding`. `output_padding`
/// resolves the ambiguity left by the matching convolution's floor division;
/// [`ConvTranspose2d::output_padding_for`] computes the value that makes the
/// transpose restore a given convolution input size.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub grad_kernel: Tensor,
    pub grad_bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
    cached_input: Option<Tensor>,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(stride >= 1 && kernel >= 1);
        assert!(output_padding < stride, "output_padding must be < stride");
        let fan_in = in_c * kernel * kernel;
        let fan_out = out_c * kernel * kernel;
        let k = xavier_uniform(vec![in_c, out_c, kernel, kernel], fan_in, fan_out, rng);
        Self::from_parts(k, Tensor::zeros(vec![out_c]), stride, padding, output_padding)
    }

    pub fn from_parts(
        kernel: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Self {
        assert_eq!(kernel.rank(), 4, "kernel must be [in_c, out_c, kh, kw]");
        let gk = Tensor::zeros(kernel.shape().to_vec());
        let gb = Tensor::zeros(bias.shape().to_vec());
        Self {
            kernel,
            bias,
            grad_kernel: gk,
            grad_bias: gb,
            stride,
            padding,
            output_padding,
            cached_input: None,
        }
    }

    /// Output padding that makes a transpose with this (kernel, stride,
    /// padding) invert a convolution applied to a `conv_input` wide axis.
    pub fn output_padding_for(
        conv_input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> usize {
        (conv_input + 2 * padding - kernel) % stride
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = (self.kernel.dim(2), self.kernel.dim(3));
        let (s, p, op) = (self.stride, self.padding, self.output_padding);
        let oh = ((h - 1) * s + kh + op) as isize - 2 * p as isize;
        let ow = ((w - 1) * s + kw + op) as isize - 2 * p as isize;
        if oh < 1 || ow < 1 {
            return Err(Error::Shape(format!(
                "conv2d_transpose output collapses to {oh}x{ow} for input {h}x{w}"
            )));
        }
        Ok((oh as usize, ow as usize))
    }

    pub fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let (in_c, out_c, kh, kw) = (
            self.kernel.dim(0),
            self.kernel.dim(1),
            self.kernel.dim(2),
            self.kernel.dim(3),
        );
        if input.rank() != 4 || input.dim(1) != in_c {
            return Err(Error::Shape(format!(
                "conv2d_transpose expects [n, {in_c}, h, w], got {:?}",
                input.shape()
            )));
        }
        let (n, h, w) = (input.dim(0), input.dim(2), input.dim(3));
        let (oh, ow) = self.output_hw(h, w)?;
        let (s, p) = (self.stride as isize, self.padding as isize);
        let x = input.data();
        let k = self.kernel.data();
        let mut out = vec![0.0; n * out_c * oh * ow];
        // bias first, then scatter-add each input pixel through the kernel
        for i in 0..n {
            for oc in 0..out_c {
                let o_base = ((i * out_c) + oc) * oh * ow;
                out[o_base..o_base + oh * ow].iter_mut().for_each(|v| *v += self.bias.data()[oc]);
            }
            for ic in 0..in_c {
                let x_base = ((i * in_c) + ic) * h * w;
                for y in 0..h {
                    for xw in 0..w {
                        let xv = x[x_base + y * w + xw];
                        for oc in 0..out_c {
                            let o_base = ((i * out_c) + oc) * oh * ow;
                            let kk = &k[(ic * out_c + oc) * kh * kw..(ic * out_c + oc + 1) * kh * kw];
                            for u in 0..kh {
                                let oy = y as isize * s + u as isize - p;
                                if oy < 0 || oy >= oh as isize {
                                    continue;
                                }
                                let row = o_base + oy as usize * ow;
                                for v in 0..kw {
                                    let ox = xw as isize * s + v as isize - p;
                                    if ox < 0 || ox >= ow as isize {
                                        continue;
                                    }
                                    out[row + ox as usize] += xv * kk[u * kw + v];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.cached_input = Some(input.clone());
        Tensor::new(vec![n, out_c, oh, ow], out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let input = self.cached_input.as_ref().ok_or_else(|| {
            Error::InvalidArgument("conv2d_transpose backward without prior forward".into())
        })?;
        let (in_c, out_c, kh, kw) = (
            self.kernel.dim(0),
            self.kernel.dim(1),
            self.kernel.dim(2),
            self.kernel.dim(3),
        );
        let (n, h, w) = (input.dim(0), input.dim(2), input.dim(3));
        let (oh, ow) = self.output_hw(h, w)?;
        if grad_out.shape() != [n, out_c, oh, ow] {
            return Err(Error::Shape(format!(
                "conv2d_transpose backward: gradient shape {:?} does not match output [{n}, {out_c}, {oh}, {ow}]",
                grad_out.shape()
            )));
        }
        let (s, p) = (self.stride as isize, self.padding as isize);
        let x = input.data();
        let k = self.kernel.data();
        let g = grad_out.data();
        let gk = self.grad_kernel.data_mut();
        let gb = self.grad_bias.data_mut();
        for (oc, gbo) in gb.iter_mut().enumerate() {
            for i in 0..n {
                let o_base = ((i * out_c) + oc) * oh * ow;
                *gbo += g[o_base..o_base + oh * ow].iter().sum::<f64>();
            }
        }
        let mut grad_in = Tensor::zeros(input.shape().to_vec());
        let gi = grad_in.data_mut();
        for i in 0..n {
            for ic in 0..in_c {
                let x_base = ((i * in_c) + ic) * h * w;
                for y in 0..h {
                    for xw in 0..w {
                        let xi = x_base + y * w + xw;
                        let xv = x[xi];
                        let mut acc = 0.0;
                        for oc in 0..out_c {
                            let o_base = ((i * out_c) + oc) * oh * ow;
                            let kk_off = (ic * out_c + oc) * kh * kw;
                            for u in 0..kh {
                                let oy = y as isize * s + u as isize - p;
                                if oy < 0 || oy >= oh as isize {
                                    continue;
                                }
                                let row = o_base + oy as usize * ow;
                                for v in 0..kw {
                                    let ox = xw as isize * s + v as isize - p;
                                    if ox < 0 || ox >= ow as isize {
                                        continue;
                                    }
                                    let go = g[row + ox as usize];
                                    acc += go * k[kk_off + u * kw + v];
                                    gk[kk_off + u * kw + v] += go * xv;
                                }
                            }
                        }
                        gi[xi] += acc;
                    }
                }
            }
        }
        Ok(grad_in)
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct Relu {
    cached_input: Option<Tensor>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let out = Tensor::new(
            input.shape().to_vec(),
            input.data().iter().map(|&v| v.max(0.0)).collect(),
        )?;
        self.cached_input = Some(input.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let input = self
            .cached_input
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("relu backward without prior forward".into()))?;
        if grad_out.shape() != input.shape() {
            return Err(Error::Shape(format!(
                "relu backward: gradient shape {:?} vs input {:?}",
                grad_out.shape(),
                input.shape()
            )));
        }
        Tensor::new(
            input.shape().to_vec(),
            input
                .data()
                .iter()
                .zip(grad_out.data())
                .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sigmoid {
    cached_output: Option<Tensor>,
}

impl Sigmoid {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let out = Tensor::new(
            input.shape().to_vec(),
            input.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
        )?;
        self.cached_output = Some(out.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let out = self
            .cached_output
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("sigmoid backward without prior forward".into()))?;
        if grad_out.shape() != out.shape() {
            return Err(Error::Shape(format!(
                "sigmoid backward: gradient shape {:?} vs output {:?}",
                grad_out.shape(),
                out.shape()
            )));
        }
        Tensor::new(
            out.shape().to_vec(),
            out.data()
                .iter()
                .zip(grad_out.data())
                .map(|(&y, &g)| g * y * (1.0 - y))
                .collect(),
        )
    }
}

// ---------------------------------------------------------------------------
// BatchNorm
// ---------------------------------------------------------------------------

/// Batch normalization over the feature axis: per column for `[n, d]`
/// inputs, per channel over `(n, h, w)` for `[n, c, h, w]` inputs.
///
/// Training mode normalizes with (biased) batch statistics and maintains
/// running averages with decay 0.9; eval mode applies the running averages.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub scale: Tensor,
    pub shift: Tensor,
    pub grad_scale: Tensor,
    pub grad_shift: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub decay: f64,
    pub eps: f64,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
    count: f64,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        Self {
            scale: Tensor::filled(vec![features], 1.0),
            shift: Tensor::zeros(vec![features]),
            grad_scale: Tensor::zeros(vec![features]),
            grad_shift: Tensor::zeros(vec![features]),
            running_mean: Tensor::zeros(vec![features]),
            running_var: Tensor::filled(vec![features], 1.0),
            decay: 0.9,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn features(&self) -> usize {
        self.scale.len()
    }

    /// (batch, features, spatial) decomposition of the input shape.
    fn dims(&self, input: &Tensor) -> Result<(usize, usize, usize)> {
        let c = self.features();
        match input.rank() {
            2 if input.dim(1) == c => Ok((input.dim(0), c, 1)),
            4 if input.dim(1) == c => Ok((input.dim(0), c, input.dim(2) * input.dim(3))),
            _ => Err(Error::Shape(format!(
                "batchnorm over {c} features cannot apply to input {:?}",
                input.shape()
            ))),
        }
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, c, spatial) = self.dims(input)?;
        let x = input.data();
        let mut out = vec![0.0; x.len()];
        match mode {
            Mode::Train => {
                let m = (n * spatial) as f64;
                let mut x_hat = vec![0.0; x.len()];
                let mut inv_std = vec![0.0; c];
                for ci in 0..c {
                    let mut sum = 0.0;
                    let mut sum_sq = 0.0;
                    for i in 0..n {
                        let base = (i * c + ci) * spatial;
                        for s in 0..spatial {
                            let v = x[base + s];
                            sum += v;
                            sum_sq += v * v;
                        }
                    }
                    let mean = sum / m;
                    let var = (sum_sq / m - mean * mean).max(0.0);
                    let istd = 1.0 / (var + self.eps).sqrt();
                    inv_std[ci] = istd;
                    let (g, b) = (self.scale.data()[ci], self.shift.data()[ci]);
                    for i in 0..n {
                        let base = (i * c + ci) * spatial;
                        for s in 0..spatial {
                            let xh = (x[base + s] - mean) * istd;
                            x_hat[base + s] = xh;
                            out[base + s] = g * xh + b;
                        }
                    }
                    let rm = &mut self.running_mean.data_mut()[ci];
                    *rm = self.decay * *rm + (1.0 - self.decay) * mean;
                    let rv = &mut self.running_var.data_mut()[ci];
                    *rv = self.decay * *rv + (1.0 - self.decay) * var;
                }
                self.cache = Some(BnCache {
                    x_hat: Tensor::new(input.shape().to_vec(), x_hat)?,
                    inv_std,
                    count: m,
                });
            }
            Mode::Eval => {
                self.cache = None;
                for ci in 0..c {
                    let mean = self.running_mean.data()[ci];
                    let istd = 1.0 / (self.running_var.data()[ci] + self.eps).sqrt();
                    let (g, b) = (self.scale.data()[ci], self.shift.data()[ci]);
                    for i in 0..n {
                        let base = (i * c + ci) * spatial;
                        for s in 0..spatial {
                            out[base + s] = g * (x[base + s] - mean) * istd + b;
                        }
                    }
                }
            }
        }
        Tensor::new(input.shape().to_vec(), out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self.cache.as_ref().ok_or_else(|| {
            Error::InvalidArgument("batchnorm backward without prior training-mode forward".into())
        })?;
        let x_hat = &cache.x_hat;
        if grad_out.shape() != x_hat.shape() {
            return Err(Error::Shape(format!(
                "batchnorm backward: gradient shape {:?} vs input {:?}",
                grad_out.shape(),
                x_hat.shape()
            )));
        }
        let (n, c, spatial) = self.dims(x_hat)?;
        let m = cache.count;
        let g = grad_out.data();
        let xh = x_hat.data();
        let mut grad_in = Tensor::zeros(x_hat.shape().to_vec());
        let gi = grad_in.data_mut();
        for ci in 0..c {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for i in 0..n {
                let base = (i * c + ci) * spatial;
                for s in 0..spatial {
                    sum_g += g[base + s];
                    sum_gx += g[base + s] * xh[base + s];
                }
            }
            self.grad_shift.data_mut()[ci] += sum_g;
            self.grad_scale.data_mut()[ci] += sum_gx;
            let coeff = self.scale.data()[ci] * cache.inv_std[ci] / m;
            for i in 0..n {
                let base = (i * c + ci) * spatial;
                for s in 0..spatial {
                    gi[base + s] =
                        coeff * (m * g[base + s] - sum_g - xh[base + s] * sum_gx);
                }
            }
        }
        Ok(grad_in)
    }
}

// ---------------------------------------------------------------------------
// Layer enum
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    ConvTranspose2d(ConvTranspose2d),
    Relu(Relu),
    Sigmoid(Sigmoid),
    BatchNorm(BatchNorm),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::ConvTranspose2d(_) => "conv2d_transpose",
            Layer::Relu(_) => "relu",
            Layer::Sigmoid(_) => "sigmoid",
            Layer::BatchNorm(_) => "batchnorm",
        }
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        match self {
            Layer::Dense(l) => l.forward(input, mode),
            Layer::Conv2d(l) => l.forward(input, mode),
            Layer::ConvTranspose2d(l) => l.forward(input, mode),
            Layer::Relu(l) => l.forward(input, mode),
            Layer::Sigmoid(l) => l.forward(input, mode),
            Layer::BatchNorm(l) => l.forward(input, mode),
        }
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense(l) => l.backward(grad_out),
            Layer::Conv2d(l) => l.backward(grad_out),
            Layer::ConvTranspose2d(l) => l.backward(grad_out),
            Layer::Relu(l) => l.backward(grad_out),
            Layer::Sigmoid(l) => l.backward(grad_out),
            Layer::BatchNorm(l) => l.backward(grad_out),
        }
    }

    /// Trainable (parameter, gradient) pairs, in a fixed order.
    pub fn params_mut(&mut self) -> Vec<(&mut Tensor, &mut Tensor)> {
        match self {
            Layer::Dense(l) => vec![
                (&mut l.weight, &mut l.grad_weight),
                (&mut l.bias, &mut l.grad_bias),
            ],
            Layer::Conv2d(l) => vec![
                (&mut l.kernel, &mut l.grad_kernel),
                (&mut l.bias, &mut l.grad_bias),
            ],
            Layer::ConvTranspose2d(l) => vec![
                (&mut l.kernel, &mut l.grad_kernel),
                (&mut l.bias, &mut l.grad_bias),
            ],
            Layer::Relu(_) | Layer::Sigmoid(_) => vec![],
            Layer::BatchNorm(l) => vec![
                (&mut l.scale, &mut l.grad_scale),
                (&mut l.shift, &mut l.grad_shift),
            ],
        }
    }

    /// Everything that must survive a save/load round trip: parameters plus
    /// non-trainable state (batchnorm running averages).
    pub fn persisted_tensors(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            Layer::Conv2d(l) => vec![&l.kernel, &l.bias],
            Layer::ConvTranspose2d(l) => vec![&l.kernel, &l.bias],
            Layer::Relu(_) | Layer::Sigmoid(_) => vec![],
            Layer::BatchNorm(l) => vec![&l.scale, &l.shift, &l.running_mean, &l.running_var],
        }
    }

    pub fn persisted_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Conv2d(l) => vec![&mut l.kernel, &mut l.bias],
            Layer::ConvTranspose2d(l) => vec![&mut l.kernel, &mut l.bias],
            Layer::Relu(_) | Layer::Sigmoid(_) => vec![],
            Layer::BatchNorm(l) => {
                vec![&mut l.scale, &mut l.shift, &mut l.running_mean, &mut l.running_var]
            }
        }
    }
}
