//! Training objective: penalty-reduced focal loss on the center map, plus L1
//! and GIoU losses on the box read at the ground-truth cell.

use crate::bbox::{BBox, Corners};
use crate::error::{check_dim, Error, Result};
use crate::head::{encode_box, ScoreMapGrads, ScoreMaps};
use serde::{Deserialize, Serialize};

pub const FOCAL_ALPHA: i32 = 2;
pub const FOCAL_BETA: i32 = 4;
pub const PROB_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.cls, self.l1, self.giou];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().all(|v| *v == 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative with one positive, got {w:?}"
            )));
        }
        Ok(())
    }
}

/// Gaussian bump centered on the cell holding the box center.
///
/// `sigma = max(1, min(w, h) · H / 6)` in cells, so the peak cell is exactly 1.
pub fn gaussian_target(bbox: &BBox, h: usize, w: usize) -> Vec<f64> {
    let ((py, px), _, _) = encode_box(bbox, h, w);
    let sigma = (bbox.w.min(bbox.h) * h as f64 / 6.0).max(1.0);
    let denom = 2.0 * sigma * sigma;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - py as f64;
            let dx = x as f64 - px as f64;
            out.push((-(dx * dx + dy * dy) / denom).exp());
        }
    }
    out
}

/// Focal loss of one center plane against its target, with its gradient.
///
/// Cells where the target is exactly 1 are positives; the sum is divided by
/// their count. Probabilities are clamped to `[1e-6, 1 − 1e-6]` and the
/// gradient is zero where the clamp is active.
pub fn center_focal_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_dim("center cells", target.len(), pred.len())?;
    if target.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::contract("focal target outside [0,1]"));
    }
    let positives = target.iter().filter(|&&t| t == 1.0).count();
    if positives != 1 {
        return Err(Error::contract(format!(
            "focal target needs exactly one unit peak, found {positives}"
        )));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for (i, (&p_raw, &t)) in pred.iter().zip(target).enumerate() {
        let p = p_raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let live = p == p_raw;
        if t == 1.0 {
            let q = 1.0 - p;
            loss -= q.powi(FOCAL_ALPHA) * p.ln();
            if live {
                grad[i] = 2.0 * q * p.ln() - q * q / p;
            }
        } else {
            let neg = (1.0 - t).powi(FOCAL_BETA);
            let q = 1.0 - p;
            loss -= neg * p.powi(FOCAL_ALPHA) * q.ln();
            if live {
                grad[i] = -neg * (2.0 * p * q.ln() - p * p / q);
            }
        }
    }
    let n = positives as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

/// Mean absolute error over `(cx, cy, w, h)`, with its gradient on `pred`.
pub fn l1_box_loss(pred: &BBox, gt: &BBox) -> (f64, [f64; 4]) {
    let (p, g) = (pred.as_array(), gt.as_array());
    let mut loss = 0.0;
    let mut grad = [0.0; 4];
    for i in 0..4 {
        let d = p[i] - g[i];
        loss += d.abs();
        grad[i] = d.signum() * f64::from(u8::from(d != 0.0)) / 4.0;
    }
    (loss / 4.0, grad)
}

/// `1 − GIoU`, in `[0, 2]`, with its gradient on `pred`'s `(cx, cy, w, h)`.
pub fn giou_loss(pred: &BBox, gt: &BBox) -> (f64, [f64; 4]) {
    let p = pred.corners();
    let g = gt.corners();
    let (pw, ph) = (p.x2 - p.x1, p.y2 - p.y1);
    let area_p = pw * ph;
    let area_g = (g.x2 - g.x1) * (g.y2 - g.y1);

    let iw = (p.x2.min(g.x2) - p.x1.max(g.x1)).max(0.0);
    let ih = (p.y2.min(g.y2) - p.y1.max(g.y1)).max(0.0);
    let inter = iw * ih;
    let union = area_p + area_g - inter;
    let hull = Corners {
        x1: p.x1.min(g.x1),
        y1: p.y1.min(g.y1),
        x2: p.x2.max(g.x2),
        y2: p.y2.max(g.y2),
    };
    let (cw, ch) = (hull.x2 - hull.x1, hull.y2 - hull.y1);
    let c = cw * ch;
    if union <= 0.0 || c <= 0.0 {
        return (1.0, [0.0; 4]);
    }
    let loss = 2.0 - inter / union - union / c;

    // dL/dI, dL/dU, dL/dC
    let dl_di = -1.0 / union;
    let dl_du = inter / (union * union) - 1.0 / c;
    let dl_dc = union / (c * c);

    // Derivatives of iw, ih, cw, ch w.r.t. pred corners (x1, x2) and (y1, y2).
    let overlap_x = iw > 0.0;
    let overlap_y = ih > 0.0;
    let diw = [
        if overlap_x && p.x1 >= g.x1 { -1.0 } else { 0.0 },
        if overlap_x && p.x2 <= g.x2 { 1.0 } else { 0.0 },
    ];
    let dih = [
        if overlap_y && p.y1 >= g.y1 { -1.0 } else { 0.0 },
        if overlap_y && p.y2 <= g.y2 { 1.0 } else { 0.0 },
    ];
    let dcw = [
        if p.x1 <= g.x1 { -1.0 } else { 0.0 },
        if p.x2 >= g.x2 { 1.0 } else { 0.0 },
    ];
    let dch = [
        if p.y1 <= g.y1 { -1.0 } else { 0.0 },
        if p.y2 >= g.y2 { 1.0 } else { 0.0 },
    ];
    let dap_x = [-ph, ph];
    let dap_y = [-pw, pw];

    let mut dx = [0.0; 2];
    let mut dy = [0.0; 2];
    for k in 0..2 {
        let di = diw[k] * ih;
        let du = dap_x[k] - di;
        dx[k] = dl_di * di + dl_du * du + dl_dc * dcw[k] * ch;
        let di = dih[k] * iw;
        let du = dap_y[k] - di;
        dy[k] = dl_di * di + dl_du * du + dl_dc * dch[k] * cw;
    }
    let grad = [
        dx[0] + dx[1],
        dy[0] + dy[1],
        0.5 * (dx[1] - dx[0]),
        0.5 * (dy[1] - dy[0]),
    ];
    (loss, grad)
}

/// Unweighted terms and their weighted total, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

/// Full objective over a batch of score maps, with gradients on each map.
///
/// The size and offset maps are supervised at the cell containing the
/// ground-truth center.
pub fn head_loss(
    maps: &ScoreMaps,
    gts: &[BBox],
    weights: &LossWeights,
) -> Result<(LossBreakdown, ScoreMapGrads)> {
    maps.validate()?;
    check_dim("batch", maps.batch(), gts.len())?;
    let (h, w) = (maps.center.height(), maps.center.width());
    let scale = 1.0 / gts.len() as f64;
    let mut grads = ScoreMapGrads::zeros_like(maps);
    let mut out = LossBreakdown::default();
    for (b, gt) in gts.iter().enumerate() {
        let target = gaussian_target(gt, h, w);
        let (lc, gc) = center_focal_loss(maps.center.plane(b, 0), &target)?;
        for (i, g) in gc.iter().enumerate() {
            grads.center.data_mut()[b * h * w + i] = weights.cls * scale * g;
        }

        let ((y, x), _, _) = encode_box(gt, h, w);
        let pred = maps.box_at(b, y, x);
        let (ll, gl) = l1_box_loss(&pred, gt);
        let (lg, gg) = giou_loss(&pred, gt);
        let d: Vec<f64> = (0..4)
            .map(|i| scale * (weights.l1 * gl[i] + weights.giou * gg[i]))
            .collect();
        // cx = (x + off_x) / W, cy = (y + off_y) / H
        let oi = |c| grads.offset.index(b, c, y, x);
        let si = |c| grads.size.index(b, c, y, x);
        let (o0, o1, s0, s1) = (oi(0), oi(1), si(0), si(1));
        grads.offset.data_mut()[o0] += d[0] / w as f64;
        grads.offset.data_mut()[o1] += d[1] / h as f64;
        grads.size.data_mut()[s0] += d[2];
        grads.size.data_mut()[s1] += d[3];

        out.cls += scale * lc;
        out.l1 += scale * ll;
        out.giou += scale * lg;
    }
    out.total = weights.cls * out.cls + weights.l1 * out.l1 + weights.giou * out.giou;
    Ok((out, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape4, Tensor4};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], i: usize) -> f64 {
        let h = 1e-6;
        let mut a = x.to_vec();
        a[i] += h;
        let mut b = x.to_vec();
        b[i] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    }

    fn one_hot(n: usize, at: usize) -> Vec<f64> {
        let mut t = vec![0.0; n];
        t[at] = 1.0;
        t
    }

    #[test]
    fn exact_prediction_has_tiny_focal_loss() {
        let t = one_hot(16, 5);
        let (l, _) = center_focal_loss(&t, &t).unwrap();
        assert!(l < 1e-4, "{l}");
    }

    #[test]
    fn uniform_half_prediction_costs() {
        let (l, _) = center_focal_loss(&[0.5; 9], &one_hot(9, 4)).unwrap();
        assert!(l > 0.0);
    }

    #[test]
    fn focal_rejects_target_without_single_peak() {
        assert!(center_focal_loss(&[0.5; 4], &[0.2; 4]).is_err());
        assert!(center_focal_loss(&[0.5; 4], &[1.0, 1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let bbox = BBox::new(0.4, 0.6, 0.5, 0.3).unwrap();
        let target = gaussian_target(&bbox, 6, 6);
        for _ in 0..5 {
            let p: Vec<f64> = (0..36).map(|_| r.gen_range(0.05..0.95)).collect();
            let (_, g) = center_focal_loss(&p, &target).unwrap();
            for i in 0..36 {
                let n = fd(|x| center_focal_loss(x, &target).unwrap().0, &p, i);
                assert!((n - g[i]).abs() < 1e-6 * (1.0 + n.abs()), "{i}: {n} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn gaussian_peak_sits_at_center_cell() {
        let bbox = BBox::new(0.55, 0.3, 0.2, 0.4).unwrap();
        let t = gaussian_target(&bbox, 10, 10);
        assert_eq!(t[3 * 10 + 5], 1.0);
        assert_eq!(t.iter().filter(|&&v| v == 1.0).count(), 1);
        assert!(t.iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn identical_boxes_cost_nothing() {
        let a = BBox::new(0.3, 0.7, 0.2, 0.25).unwrap();
        assert_eq!(l1_box_loss(&a, &a).0, 0.0);
        assert!(giou_loss(&a, &a).0.abs() < 1e-15);
    }

    #[test]
    fn worked_pair_giou_loss() {
        let a = BBox::new(0.25, 0.25, 0.5, 0.5).unwrap();
        let b = BBox::new(0.5, 0.5, 0.5, 0.5).unwrap();
        // hull area .5625, union .4375
        let expect = 1.0 - (1.0 / 7.0 - (0.5625 - 0.4375) / 0.5625);
        assert!((giou_loss(&a, &b).0 - expect).abs() < 1e-12);
        assert!((expect - 1.079365).abs() < 1e-6);
    }

    #[test]
    fn disjoint_giou_loss_above_one() {
        let a = BBox::new(0.1, 0.1, 0.1, 0.1).unwrap();
        let b = BBox::new(0.9, 0.9, 0.1, 0.1).unwrap();
        let l = giou_loss(&a, &b).0;
        assert!(l > 1.0 && l <= 2.0);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.1f64..0.9, 0.1f64..0.9, 0.05f64..0.6, 0.05f64..0.6)
            .prop_map(|(cx, cy, w, h)| BBox { cx, cy, w, h })
    }

    proptest! {
        #[test]
        fn giou_loss_bounded(a in arb_box(), b in arb_box()) {
            let l = giou_loss(&a, &b).0;
            prop_assert!((0.0..=2.0).contains(&l));
        }

        #[test]
        fn box_loss_gradients_match_finite_differences(a in arb_box(), b in arb_box()) {
            let x = a.as_array();
            let (_, gg) = giou_loss(&a, &b);
            let (_, gl) = l1_box_loss(&a, &b);
            for i in 0..4 {
                let f = |v: &[f64]| giou_loss(&BBox::from_array([v[0], v[1], v[2], v[3]]), &b).0;
                let n = fd(f, &x, i);
                prop_assert!((n - gg[i]).abs() < 1e-5, "giou {}: {} vs {}", i, n, gg[i]);
                let f = |v: &[f64]| l1_box_loss(&BBox::from_array([v[0], v[1], v[2], v[3]]), &b).0;
                let n = fd(f, &x, i);
                prop_assert!((n - gl[i]).abs() < 1e-5, "l1 {}: {} vs {}", i, n, gl[i]);
            }
        }
    }

    fn random_maps(r: &mut ChaCha8Rng, b: usize, h: usize, w: usize) -> ScoreMaps {
        ScoreMaps {
            center: Tensor4::random_uniform(Shape4::new(b, 1, h, w), 0.05, 0.95, r),
            size: Tensor4::random_uniform(Shape4::new(b, 2, h, w), 0.1, 0.9, r),
            offset: Tensor4::random_uniform(Shape4::new(b, 2, h, w), 0.05, 0.95, r),
        }
    }

    #[test]
    fn weighted_total_is_linear_in_terms() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let maps = random_maps(&mut r, 2, 5, 5);
        let gts = [BBox::new(0.3, 0.5, 0.3, 0.4).unwrap(), BBox::new(0.7, 0.2, 0.2, 0.2).unwrap()];
        let unit = |cls, l1, giou| head_loss(&maps, &gts, &LossWeights { cls, l1, giou }).unwrap();
        let (all, ga) = unit(1.0, 5.0, 2.0);
        let (c, gc) = unit(1.0, 0.0, 0.0);
        let (l, gl) = unit(0.0, 1.0, 0.0);
        let (g, gg) = unit(0.0, 0.0, 1.0);
        assert!((all.total - (c.total + 5.0 * l.total + 2.0 * g.total)).abs() < 1e-12);
        for (t, (a, (b, (cc, d)))) in [
            (&ga.center, (&gc.center, (&gl.center, &gg.center))),
            (&ga.size, (&gc.size, (&gl.size, &gg.size))),
            (&ga.offset, (&gc.offset, (&gl.offset, &gg.offset))),
        ]
        .into_iter()
        .enumerate()
        {
            for i in 0..a.data().len() {
                let lin = b.data()[i] + 5.0 * cc.data()[i] + 2.0 * d.data()[i];
                assert!((a.data()[i] - lin).abs() < 1e-12, "map {t} index {i}");
            }
        }
        assert!(c.cls >= 0.0 && l.l1 >= 0.0 && (0.0..=2.0).contains(&g.giou));
    }

    #[test]
    fn head_loss_gradient_matches_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let maps = random_maps(&mut r, 2, 4, 4);
        let gts = [BBox::new(0.4, 0.6, 0.3, 0.5).unwrap(), BBox::new(0.8, 0.1, 0.2, 0.15).unwrap()];
        let wts = LossWeights::default();
        let (_, grads) = head_loss(&maps, &gts, &wts).unwrap();
        let h = 1e-6;
        for which in 0..3 {
            let n = [&maps.center, &maps.size, &maps.offset][which].data().len();
            for i in 0..n {
                let eval = |delta: f64| {
                    let mut m = maps.clone();
                    [&mut m.center, &mut m.size, &mut m.offset][which].data_mut()[i] += delta;
                    head_loss(&m, &gts, &wts).unwrap().0.total
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let ana = [&grads.center, &grads.size, &grads.offset][which].data()[i];
                assert!((num - ana).abs() < 1e-5, "map {which} index {i}: {num} vs {ana}");
            }
        }
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { cls: 0.0, l1: 0.0, giou: 0.0 }.validate().is_err());
        assert!(LossWeights { cls: -1.0, l1: 1.0, giou: 0.0 }.validate().is_err());
    }
}
