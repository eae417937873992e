use super::Tensor4;
use crate::error::Result;

/// 3×3 mean pool, stride 1, zero padding, divisor always 9.
pub fn avg_pool3x3_same(input: &Tensor4) -> Tensor4 {
    let s = input.shape();
    let (h, w) = (s.height, s.width);
    let mut out = Tensor4::zeros(s);
    for bc in 0..s.batch * s.channels {
        let src = &input.data()[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out.data_mut()[bc * h * w..(bc + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for iy in y.saturating_sub(1)..(y + 2).min(h) {
                    for ix in x.saturating_sub(1)..(x + 2).min(w) {
                        acc += src[iy * w + ix];
                    }
                }
                dst[y * w + x] = acc / 9.0;
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool3x3_same`]; the pool is linear so no forward cache is needed.
pub fn avg_pool3x3_backward(grad_output: &Tensor4) -> Result<Tensor4> {
    let s = grad_output.shape();
    let (h, w) = (s.height, s.width);
    let mut out = Tensor4::zeros(s);
    for bc in 0..s.batch * s.channels {
        let g = &grad_output.data()[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out.data_mut()[bc * h * w..(bc + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let share = g[y * w + x] / 9.0;
                for iy in y.saturating_sub(1)..(y + 2).min(h) {
                    for ix in x.saturating_sub(1)..(x + 2).min(w) {
                        dst[iy * w + ix] += share;
                    }
                }
            }
        }
    }
    Ok(out)
}
