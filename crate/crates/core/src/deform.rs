//! Modulated deformable convolution.
//!
//! A regular 3×3 convolution predicts a (Δy, Δx) pair per kernel tap and a
//! second one predicts a per-tap modulation logit. The main kernel then
//! samples the input bilinearly at the shifted tap positions and scales each
//! sample by the sigmoid of its logit. Offsets and masks are per output
//! location and per tap, shared across input channels (one deformable group).
//!
//! Offset channel `2k` is Δy and `2k + 1` is Δx for tap `k = ky * kw + kx`.

use crate::error::{check_dim, Error, Result};
use crate::layers::{init_uniform, Conv2d};
use crate::parallel;
use crate::param::{join, HasParams, Layer, Param};
use crate::tensor::{
    bilinear_taps, conv2d_forward_naive, matmul_acc, sigmoid, BilinearTaps, ConvSpec, Shape4,
    Tensor4,
};
use rand::Rng;

/// Mask-predictor bias that saturates the sigmoid to exactly 1.0 in `f64`.
pub const MASK_SATURATION_LOGIT: f64 = 40.0;

#[derive(Debug, Clone)]
struct DeformCache {
    input: Tensor4,
    offsets: Tensor4,
    mask: Tensor4,
}

#[derive(Debug, Clone)]
pub struct DeformConv2d {
    pub spec: ConvSpec,
    pub weight: Param,
    pub bias: Param,
    pub offset_conv: Conv2d,
    pub mask_conv: Conv2d,
    cache: Option<DeformCache>,
}

/// Gradients of the sampling stage for one call.
#[derive(Debug, Clone)]
pub struct DeformGrads {
    pub input: Tensor4,
    pub offsets: Tensor4,
    pub mask: Tensor4,
    pub weights: Tensor4,
    pub bias: Vec<f64>,
}

impl DeformConv2d {
    /// Main kernel random, offset and mask predictors zero (mask 0.5, no shift).
    pub fn new<R: Rng + ?Sized>(spec: ConvSpec, rng: &mut R) -> Self {
        let ws = spec.weight_shape();
        let taps = spec.taps();
        let pred = |out| ConvSpec {
            in_channels: spec.in_channels,
            out_channels: out,
            kernel_h: spec.kernel_h,
            kernel_w: spec.kernel_w,
        };
        Self {
            spec,
            weight: Param::new(
                init_uniform(ws.len(), spec.fan_in(), rng),
                ws.to_array().to_vec(),
            ),
            bias: Param::zeros(vec![spec.out_channels]),
            offset_conv: Conv2d::zeroed(pred(2 * taps)),
            mask_conv: Conv2d::zeroed(pred(taps)),
            cache: None,
        }
    }

    /// Zero offsets and a mask of exactly 1 everywhere.
    pub fn freeze_identity_sampling(&mut self) {
        self.offset_conv.weight.value.fill(0.0);
        self.offset_conv.bias.value.fill(0.0);
        self.mask_conv.weight.value.fill(0.0);
        self.mask_conv.bias.value.fill(MASK_SATURATION_LOGIT);
    }

    pub fn weight_tensor(&self) -> Tensor4 {
        Tensor4::from_vec(self.spec.weight_shape(), self.weight.value.clone())
            .expect("weight length fixed at construction")
    }

    /// Predicted offsets and post-sigmoid mask for `input`.
    pub fn predict_sampling(&self, input: &Tensor4) -> Result<(Tensor4, Tensor4)> {
        let offsets = self.offset_conv.apply(input)?;
        let mask = self.mask_conv.apply(input)?.map(sigmoid);
        Ok((offsets, mask))
    }

    fn check_input(&self, input: &Tensor4) -> Result<()> {
        self.spec.validate()?;
        check_dim("channels", self.spec.in_channels, input.channels())?;
        if input.height() == 0 || input.width() == 0 {
            return Err(Error::contract("deformable conv needs non-empty spatial dims"));
        }
        Ok(())
    }
}

/// Forward pass of a [`DeformConv2d`] without caching.
pub fn deform_conv_forward(input: &Tensor4, layer: &DeformConv2d) -> Result<Tensor4> {
    layer.check_input(input)?;
    let (offsets, mask) = layer.predict_sampling(input)?;
    modulated_deform_conv(
        input,
        &offsets,
        &mask,
        &layer.spec,
        &layer.weight_tensor(),
        &layer.bias.value,
    )
}

fn check_sampling(input: Shape4, offsets: Shape4, mask: Shape4, spec: &ConvSpec) -> Result<()> {
    let taps = spec.taps();
    check_dim("offset channels", 2 * taps, offsets.channels)?;
    check_dim("mask channels", taps, mask.channels)?;
    for s in [offsets, mask] {
        check_dim("batch", input.batch, s.batch)?;
        check_dim("height", input.height, s.height)?;
        check_dim("width", input.width, s.width)?;
    }
    Ok(())
}

/// Bilinear taps for every (tap, position) pair of one batch entry.
fn sampling_taps(
    offsets: &[f64],
    spec: &ConvSpec,
    h: usize,
    w: usize,
) -> Vec<BilinearTaps> {
    let n = h * w;
    let (ph, pw) = spec.padding();
    let mut out = Vec::with_capacity(spec.taps() * n);
    for ky in 0..spec.kernel_h {
        for kx in 0..spec.kernel_w {
            let k = ky * spec.kernel_w + kx;
            let dy = &offsets[2 * k * n..(2 * k + 1) * n];
            let dx = &offsets[(2 * k + 1) * n..(2 * k + 2) * n];
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let py = y as f64 - ph as f64 + ky as f64 + dy[p];
                    let px = x as f64 - pw as f64 + kx as f64 + dx[p];
                    out.push(bilinear_taps(h, w, py, px));
                }
            }
        }
    }
    out
}

/// Mask-modulated column matrix `(in_c * taps) × (H * W)` for one batch entry.
fn deform_col(item: &[f64], taps: &[BilinearTaps], mask: &[f64], spec: &ConvSpec, n: usize) -> Vec<f64> {
    let kk = spec.taps();
    let mut col = vec![0.0; spec.fan_in() * n];
    for c in 0..spec.in_channels {
        let plane = &item[c * n..(c + 1) * n];
        for k in 0..kk {
            let row = &mut col[(c * kk + k) * n..(c * kk + k + 1) * n];
            let tk = &taps[k * n..(k + 1) * n];
            let mk = &mask[k * n..(k + 1) * n];
            for p in 0..n {
                row[p] = mk[p] * tk[p].sample(plane);
            }
        }
    }
    col
}

/// Deformable convolution given explicit offsets and mask.
pub fn modulated_deform_conv(
    input: &Tensor4,
    offsets: &Tensor4,
    mask: &Tensor4,
    spec: &ConvSpec,
    weights: &Tensor4,
    bias: &[f64],
) -> Result<Tensor4> {
    spec.validate()?;
    check_dim("channels", spec.in_channels, input.channels())?;
    spec.weight_shape().expect_eq(&weights.shape())?;
    check_dim("bias", spec.out_channels, bias.len())?;
    check_sampling(input.shape(), offsets.shape(), mask.shape(), spec)?;
    let (h, w) = (input.height(), input.width());
    let n = h * w;
    let (m, k) = (spec.out_channels, spec.fan_in());
    let items = parallel::map_indexed(input.batch(), |b| {
        let taps = sampling_taps(offsets.item(b), spec, h, w);
        let col = deform_col(input.item(b), &taps, mask.item(b), spec, n);
        let mut out = vec![0.0; m * n];
        for (o, row) in out.chunks_mut(n).enumerate() {
            row.fill(bias[o]);
        }
        matmul_acc(weights.data(), &col, &mut out, m, k, n);
        out
    });
    Tensor4::from_vec(spec.output_shape(input.shape()), items.concat())
}

/// Exact gradients of [`modulated_deform_conv`], including the chain through
/// the bilinear sampling positions into the offsets.
pub fn modulated_deform_conv_backward(
    input: &Tensor4,
    offsets: &Tensor4,
    mask: &Tensor4,
    spec: &ConvSpec,
    weights: &Tensor4,
    grad_output: &Tensor4,
) -> Result<DeformGrads> {
    spec.validate()?;
    check_dim("channels", spec.in_channels, input.channels())?;
    spec.weight_shape().expect_eq(&weights.shape())?;
    check_sampling(input.shape(), offsets.shape(), mask.shape(), spec)?;
    spec.output_shape(input.shape())
        .expect_eq(&grad_output.shape())?;
    let (h, w) = (input.height(), input.width());
    let n = h * w;
    let (m, k, kk) = (spec.out_channels, spec.fan_in(), spec.taps());
    let wdata = weights.data();

    let parts = parallel::map_indexed(input.batch(), |b| {
        let item = input.item(b);
        let mk_all = mask.item(b);
        let taps = sampling_taps(offsets.item(b), spec, h, w);
        let col = deform_col(item, &taps, mk_all, spec, n);
        let g = grad_output.item(b);
        let mut gw = vec![0.0; m * k];
        let mut gb = vec![0.0; m];
        let mut gcol = vec![0.0; k * n];
        for o in 0..m {
            let g_row = &g[o * n..(o + 1) * n];
            gb[o] = g_row.iter().sum();
            for r in 0..k {
                gw[o * k + r] = g_row
                    .iter()
                    .zip(&col[r * n..(r + 1) * n])
                    .map(|(a, b)| a * b)
                    .sum();
                let wv = wdata[o * k + r];
                if wv != 0.0 {
                    for (gc, &gv) in gcol[r * n..(r + 1) * n].iter_mut().zip(g_row) {
                        *gc += wv * gv;
                    }
                }
            }
        }
        let mut gin = vec![0.0; spec.in_channels * n];
        let mut goff = vec![0.0; 2 * kk * n];
        let mut gmask = vec![0.0; kk * n];
        for c in 0..spec.in_channels {
            let plane = &item[c * n..(c + 1) * n];
            let gplane = &mut gin[c * n..(c + 1) * n];
            for kt in 0..kk {
                let grow = &gcol[(c * kk + kt) * n..(c * kk + kt + 1) * n];
                for p in 0..n {
                    let gv = grow[p];
                    if gv == 0.0 {
                        continue;
                    }
                    let t = &taps[kt * n + p];
                    let mv = mk_all[kt * n + p];
                    gmask[kt * n + p] += gv * t.sample(plane);
                    let gs = gv * mv;
                    t.scatter(gplane, gs);
                    let (dy, dx) = t.position_grad(plane);
                    goff[2 * kt * n + p] += gs * dy;
                    goff[(2 * kt + 1) * n + p] += gs * dx;
                }
            }
        }
        (gin, goff, gmask, gw, gb)
    });

    let s = input.shape();
    let mut grad_in = Vec::with_capacity(s.len());
    let mut grad_off = Vec::with_capacity(offsets.shape().len());
    let mut grad_mask = Vec::with_capacity(mask.shape().len());
    let mut grad_w = Tensor4::zeros(spec.weight_shape());
    let mut grad_b = vec![0.0; m];
    for (gin, goff, gmask, gw, gb) in parts {
        grad_in.extend_from_slice(&gin);
        grad_off.extend_from_slice(&goff);
        grad_mask.extend_from_slice(&gmask);
        for (a, v) in grad_w.data_mut().iter_mut().zip(&gw) {
            *a += v;
        }
        for (a, v) in grad_b.iter_mut().zip(&gb) {
            *a += v;
        }
    }
    Ok(DeformGrads {
        input: Tensor4::from_vec(s, grad_in)?,
        offsets: Tensor4::from_vec(offsets.shape(), grad_off)?,
        mask: Tensor4::from_vec(mask.shape(), grad_mask)?,
        weights: grad_w,
        bias: grad_b,
    })
}

/// Per-output-pixel reference implementation: predicts offsets and masks
/// with nested-loop convolutions and samples with its own bilinear formula.
pub fn deform_conv_forward_naive(input: &Tensor4, layer: &DeformConv2d) -> Result<Tensor4> {
    layer.check_input(input)?;
    let spec = &layer.spec;
    let offsets = conv2d_forward_naive(
        input,
        &layer.offset_conv.spec,
        &layer.offset_conv.weight_tensor(),
        &layer.offset_conv.bias.value,
    )?;
    let logits = conv2d_forward_naive(
        input,
        &layer.mask_conv.spec,
        &layer.mask_conv.weight_tensor(),
        &layer.mask_conv.bias.value,
    )?;
    let (h, w) = (input.height() as i64, input.width() as i64);
    let read = |b: usize, c: usize, yy: i64, xx: i64| {
        if yy < 0 || yy >= h || xx < 0 || xx >= w {
            0.0
        } else {
            input.at(b, c, yy as usize, xx as usize)
        }
    };
    let (ph, pw) = spec.padding();
    let mut out = Tensor4::zeros(spec.output_shape(input.shape()));
    for b in 0..input.batch() {
        for o in 0..spec.out_channels {
            for y in 0..input.height() {
                for x in 0..input.width() {
                    let mut acc = layer.bias.value[o];
                    for ky in 0..spec.kernel_h {
                        for kx in 0..spec.kernel_w {
                            let k = ky * spec.kernel_w + kx;
                            let py = (y + ky) as f64 - ph as f64 + offsets.at(b, 2 * k, y, x);
                            let px = (x + kx) as f64 - pw as f64 + offsets.at(b, 2 * k + 1, y, x);
                            let m = 1.0 / (1.0 + (-logits.at(b, k, y, x)).exp());
                            let (y0, x0) = (py.floor(), px.floor());
                            let (fy, fx) = (py - y0, px - x0);
                            let (y0, x0) = (y0 as i64, x0 as i64);
                            for c in 0..spec.in_channels {
                                let v = (1.0 - fy) * (1.0 - fx) * read(b, c, y0, x0)
                                    + (1.0 - fy) * fx * read(b, c, y0, x0 + 1)
                                    + fy * (1.0 - fx) * read(b, c, y0 + 1, x0)
                                    + fy * fx * read(b, c, y0 + 1, x0 + 1);
                                acc += layer.weight.value
                                    [((o * spec.in_channels + c) * spec.kernel_h + ky) * spec.kernel_w + kx]
                                    * m
                                    * v;
                            }
                        }
                    }
                    out.set(b, o, y, x, acc);
                }
            }
        }
    }
    Ok(out)
}

impl HasParams for DeformConv2d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
        self.offset_conv.visit_params(&join(prefix, "offset"), f);
        self.mask_conv.visit_params(&join(prefix, "mask"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
        self.offset_conv.visit_params_mut(&join(prefix, "offset"), f);
        self.mask_conv.visit_params_mut(&join(prefix, "mask"), f);
    }
}

impl Layer for DeformConv2d {
    fn forward(&mut self, input: &Tensor4) -> Result<Tensor4> {
        self.check_input(input)?;
        let offsets = self.offset_conv.forward(input)?;
        let mask = self.mask_conv.forward(input)?.map(sigmoid);
        let out = modulated_deform_conv(
            input,
            &offsets,
            &mask,
            &self.spec,
            &self.weight_tensor(),
            &self.bias.value,
        )?;
        self.cache = Some(DeformCache {
            input: input.clone(),
            offsets,
            mask,
        });
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Tensor4) -> Result<Tensor4> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::contract("deformable conv backward before forward"))?;
        let g = modulated_deform_conv_backward(
            &cache.input,
            &cache.offsets,
            &cache.mask,
            &self.spec,
            &self.weight_tensor(),
            grad_output,
        )?;
        self.weight.accumulate(g.weights.data());
        self.bias.accumulate(&g.bias);
        let mut grad_logits = g.mask;
        for (gl, &m) in grad_logits.data_mut().iter_mut().zip(cache.mask.data()) {
            *gl *= m * (1.0 - m);
        }
        let mut grad_in = g.input;
        grad_in.add_assign(&self.offset_conv.backward(&g.offsets)?)?;
        grad_in.add_assign(&self.mask_conv.backward(&grad_logits)?)?;
        self.cache = Some(cache);
        Ok(grad_in)
    }
}
