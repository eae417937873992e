use super::{Shape4, Tensor4};
use crate::error::{check_dim, Error, Result};
use crate::parallel;

/// Stride-1, same-padded 2D convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
        }
    }

    pub fn padding(&self) -> (usize, usize) {
        ((self.kernel_h - 1) / 2, (self.kernel_w - 1) / 2)
    }

    pub fn taps(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    /// Length of one unrolled receptive field (`in_channels * kh * kw`).
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.taps()
    }

    pub fn weight_shape(&self) -> Shape4 {
        Shape4::new(
            self.out_channels,
            self.in_channels,
            self.kernel_h,
            self.kernel_w,
        )
    }

    pub fn output_shape(&self, input: Shape4) -> Shape4 {
        Shape4::new(input.batch, self.out_channels, input.height, input.width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::contract("conv channel counts must be positive"));
        }
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::contract("conv kernel dims must be positive"));
        }
        if self.kernel_h.is_multiple_of(2) || self.kernel_w.is_multiple_of(2) {
            return Err(Error::contract(format!(
                "same-padding needs odd kernels, got {}x{}",
                self.kernel_h, self.kernel_w
            )));
        }
        Ok(())
    }

    fn check_args(&self, input: Shape4, weights: Shape4, bias_len: usize) -> Result<()> {
        self.validate()?;
        check_dim("channels", self.in_channels, input.channels)?;
        let ws = self.weight_shape();
        check_dim("weight out_channels", ws.batch, weights.batch)?;
        check_dim("weight in_channels", ws.channels, weights.channels)?;
        check_dim("weight kernel_h", ws.height, weights.height)?;
        check_dim("weight kernel_w", ws.width, weights.width)?;
        check_dim("bias", self.out_channels, bias_len)
    }
}

/// Gradients of [`conv2d_forward`] with respect to each of its arguments.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor4,
    pub weights: Tensor4,
    pub bias: Vec<f64>,
}

/// `c[m×n] += a[m×k] · b[k×n]`, row-major.
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// Unrolls one batch entry into a `(in_c*kh*kw) × (H*W)` column matrix.
fn im2col(item: &[f64], spec: &ConvSpec, h: usize, w: usize) -> Vec<f64> {
    let (ph, pw) = spec.padding();
    let n = h * w;
    let mut col = vec![0.0; spec.fan_in() * n];
    for c in 0..spec.in_channels {
        let plane = &item[c * n..(c + 1) * n];
        for ky in 0..spec.kernel_h {
            for kx in 0..spec.kernel_w {
                let row = (c * spec.kernel_h + ky) * spec.kernel_w + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                for y in 0..h {
                    let iy = y as isize + ky as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let x_lo = pw.saturating_sub(kx);
                    let x_hi = (w + pw).saturating_sub(kx).min(w);
                    for x in x_lo..x_hi {
                        dst[y * w + x] = src_row[x + kx - pw];
                    }
                }
            }
        }
    }
    col
}

/// Scatters a column-matrix gradient back onto one batch entry.
fn col2im(col: &[f64], spec: &ConvSpec, h: usize, w: usize, item: &mut [f64]) {
    let (ph, pw) = spec.padding();
    let n = h * w;
    for c in 0..spec.in_channels {
        let plane = &mut item[c * n..(c + 1) * n];
        for ky in 0..spec.kernel_h {
            for kx in 0..spec.kernel_w {
                let row = (c * spec.kernel_h + ky) * spec.kernel_w + kx;
                let src = &col[row * n..(row + 1) * n];
                for y in 0..h {
                    let iy = y as isize + ky as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_lo = pw.saturating_sub(kx);
                    let x_hi = (w + pw).saturating_sub(kx).min(w);
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for x in x_lo..x_hi {
                        dst_row[x + kx - pw] += src[y * w + x];
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero same-padding, via im2col and a dense product.
pub fn conv2d_forward(
    input: &Tensor4,
    spec: &ConvSpec,
    weights: &Tensor4,
    bias: &[f64],
) -> Result<Tensor4> {
    spec.check_args(input.shape(), weights.shape(), bias.len())?;
    let (h, w) = (input.height(), input.width());
    let n = h * w;
    let k = spec.fan_in();
    let m = spec.out_channels;
    let items = parallel::map_indexed(input.batch(), |b| {
        let col = im2col(input.item(b), spec, h, w);
        let mut out = vec![0.0; m * n];
        for (o, row) in out.chunks_mut(n).enumerate() {
            row.fill(bias[o]);
        }
        matmul_acc(weights.data(), &col, &mut out, m, k, n);
        out
    });
    Tensor4::from_vec(spec.output_shape(input.shape()), items.concat())
}

/// Direct nested-loop convolution; the reference the im2col path is checked against.
pub fn conv2d_forward_naive(
    input: &Tensor4,
    spec: &ConvSpec,
    weights: &Tensor4,
    bias: &[f64],
) -> Result<Tensor4> {
    spec.check_args(input.shape(), weights.shape(), bias.len())?;
    let (ph, pw) = spec.padding();
    let (h, w) = (input.height() as isize, input.width() as isize);
    let mut out = Tensor4::zeros(spec.output_shape(input.shape()));
    for b in 0..input.batch() {
        for o in 0..spec.out_channels {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias[o];
                    for c in 0..spec.in_channels {
                        for ky in 0..spec.kernel_h {
                            for kx in 0..spec.kernel_w {
                                let iy = y + ky as isize - ph as isize;
                                let ix = x + kx as isize - pw as isize;
                                if iy < 0 || iy >= h || ix < 0 || ix >= w {
                                    continue;
                                }
                                acc += weights.at(o, c, ky, kx)
                                    * input.at(b, c, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(b, o, y as usize, x as usize, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Exact gradients of [`conv2d_forward`] given the upstream gradient.
pub fn conv2d_backward(
    input: &Tensor4,
    spec: &ConvSpec,
    weights: &Tensor4,
    grad_output: &Tensor4,
) -> Result<ConvGrads> {
    spec.check_args(input.shape(), weights.shape(), spec.out_channels)?;
    spec.output_shape(input.shape())
        .expect_eq(&grad_output.shape())?;
    let (h, w) = (input.height(), input.width());
    let n = h * w;
    let k = spec.fan_in();
    let m = spec.out_channels;
    let wdata = weights.data();

    let parts = parallel::map_indexed(input.batch(), |b| {
        let col = im2col(input.item(b), spec, h, w);
        let g = grad_output.item(b);
        let mut gw = vec![0.0; m * k];
        let mut gb = vec![0.0; m];
        let mut gcol = vec![0.0; k * n];
        for o in 0..m {
            let g_row = &g[o * n..(o + 1) * n];
            gb[o] = g_row.iter().sum();
            for (r, gw_v) in gw[o * k..(o + 1) * k].iter_mut().enumerate() {
                *gw_v = g_row
                    .iter()
                    .zip(&col[r * n..(r + 1) * n])
                    .map(|(a, b)| a * b)
                    .sum();
            }
            for r in 0..k {
                let wv = wdata[o * k + r];
                if wv == 0.0 {
                    continue;
                }
                for (gc, &gv) in gcol[r * n..(r + 1) * n].iter_mut().zip(g_row) {
                    *gc += wv * gv;
                }
            }
        }
        let mut gin = vec![0.0; spec.in_channels * n];
        col2im(&gcol, spec, h, w, &mut gin);
        (gin, gw, gb)
    });

    let mut grad_weights = Tensor4::zeros(spec.weight_shape());
    let mut grad_bias = vec![0.0; m];
    let mut grad_input = Vec::with_capacity(input.shape().len());
    for (gin, gw, gb) in parts {
        grad_input.extend_from_slice(&gin);
        for (a, b) in grad_weights.data_mut().iter_mut().zip(&gw) {
            *a += b;
        }
        for (a, b) in grad_bias.iter_mut().zip(&gb) {
            *a += b;
        }
    }
    Ok(ConvGrads {
        input: Tensor4::from_vec(input.shape(), grad_input)?,
        weights: grad_weights,
        bias: grad_bias,
    })
}
