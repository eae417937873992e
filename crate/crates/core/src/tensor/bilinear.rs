use super::Tensor4;

/// The four grid neighbours of a fractional position, with their weights and
/// the weights' derivatives in y and x. Out-of-bounds neighbours have `None`
/// and read as zero.
#[derive(Debug, Clone, Copy)]
pub struct BilinearTaps {
    pub index: [Option<usize>; 4],
    pub weight: [f64; 4],
    pub dweight_dy: [f64; 4],
    pub dweight_dx: [f64; 4],
}

impl BilinearTaps {
    #[inline]
    pub fn sample(&self, plane: &[f64]) -> f64 {
        let mut v = 0.0;
        for t in 0..4 {
            if let Some(i) = self.index[t] {
                v += self.weight[t] * plane[i];
            }
        }
        v
    }

    /// (d value / dy, d value / dx) on `plane`.
    #[inline]
    pub fn position_grad(&self, plane: &[f64]) -> (f64, f64) {
        let (mut dy, mut dx) = (0.0, 0.0);
        for t in 0..4 {
            if let Some(i) = self.index[t] {
                dy += self.dweight_dy[t] * plane[i];
                dx += self.dweight_dx[t] * plane[i];
            }
        }
        (dy, dx)
    }

    #[inline]
    pub fn scatter(&self, plane: &mut [f64], grad: f64) {
        for t in 0..4 {
            if let Some(i) = self.index[t] {
                plane[i] += self.weight[t] * grad;
            }
        }
    }
}

/// Bilinear weights for position `(y, x)` on an `h × w` plane.
#[inline]
pub fn bilinear_taps(h: usize, w: usize, y: f64, x: f64) -> BilinearTaps {
    let y0 = y.floor();
    let x0 = x.floor();
    let ly = y - y0;
    let lx = x - x0;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    let (y0, x0) = (y0 as i64, x0 as i64);
    let at = |yy: i64, xx: i64| {
        (yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64).then(|| yy as usize * w + xx as usize)
    };
    BilinearTaps {
        index: [at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1)],
        weight: [hy * hx, hy * lx, ly * hx, ly * lx],
        dweight_dy: [-hx, -lx, hx, lx],
        dweight_dx: [-hy, hy, -ly, ly],
    }
}

/// Value at fractional `(y, x)` of channel `c` in batch entry `b`, zero outside the grid.
pub fn bilinear_sample(input: &Tensor4, b: usize, c: usize, y: f64, x: f64) -> f64 {
    bilinear_taps(input.height(), input.width(), y, x).sample(input.plane(b, c))
}

#[derive(Debug, Clone, Copy)]
pub struct BilinearGrad {
    pub value: f64,
    pub d_dy: f64,
    pub d_dx: f64,
    /// Gradient with respect to the input values is `taps.weight` at `taps.index`.
    pub taps: BilinearTaps,
}

pub fn bilinear_sample_grad(input: &Tensor4, b: usize, c: usize, y: f64, x: f64) -> BilinearGrad {
    let taps = bilinear_taps(input.height(), input.width(), y, x);
    let plane = input.plane(b, c);
    let (d_dy, d_dx) = taps.position_grad(plane);
    BilinearGrad {
        value: taps.sample(plane),
        d_dy,
        d_dx,
        taps,
    }
}
