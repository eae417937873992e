//! Normalized axis-aligned boxes and overlap measures.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Center-size box in coordinates normalized to the search region, `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner form `(x1, y1, x2, y2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corners {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Corners {
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }
}

impl BBox {
    /// Checked constructor: `0 <= cx, cy <= 1` and `0 < w, h <= 1`.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.cx) && unit(self.cy)) {
            return Err(Error::contract(format!(
                "box center ({}, {}) outside [0,1]",
                self.cx, self.cy
            )));
        }
        if !(self.w > 0.0 && self.w <= 1.0 && self.h > 0.0 && self.h <= 1.0) {
            return Err(Error::contract(format!(
                "box size ({}, {}) outside (0,1]",
                self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn from_corners(c: Corners) -> Self {
        Self {
            cx: 0.5 * (c.x1 + c.x2),
            cy: 0.5 * (c.y1 + c.y2),
            w: c.x2 - c.x1,
            h: c.y2 - c.y1,
        }
    }

    pub fn corners(&self) -> Corners {
        Corners {
            x1: self.cx - 0.5 * self.w,
            y1: self.cy - 0.5 * self.h,
            x2: self.cx + 0.5 * self.w,
            y2: self.cy + 0.5 * self.h,
        }
    }

    /// Pixel-space `(x, y, w, h)` top-left box normalized by image size.
    pub fn from_pixel_xywh(x: f64, y: f64, w: f64, h: f64, image_w: f64, image_h: f64) -> Self {
        Self {
            cx: (x + 0.5 * w) / image_w,
            cy: (y + 0.5 * h) / image_h,
            w: w / image_w,
            h: h / image_h,
        }
    }

    pub fn to_pixel_xywh(&self, image_w: f64, image_h: f64) -> [f64; 4] {
        let c = self.corners();
        [c.x1 * image_w, c.y1 * image_h, self.w * image_w, self.h * image_h]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self {
            cx: v[0],
            cy: v[1],
            w: v[2],
            h: v[3],
        }
    }
}

fn intersection(a: &Corners, b: &Corners) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

/// Intersection over union; 0 for disjoint or degenerate pairs.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let (ca, cb) = (a.corners(), b.corners());
    let inter = intersection(&ca, &cb);
    let union = ca.area() + cb.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Generalized IoU: IoU minus the fraction of the enclosing hull outside the union.
pub fn generalized_iou(a: &BBox, b: &BBox) -> f64 {
    let (ca, cb) = (a.corners(), b.corners());
    let inter = intersection(&ca, &cb);
    let union = ca.area() + cb.area() - inter;
    let hull = Corners {
        x1: ca.x1.min(cb.x1),
        y1: ca.y1.min(cb.y1),
        x2: ca.x2.max(cb.x2),
        y2: ca.y2.max(cb.y2),
    }
    .area();
    if union <= 0.0 || hull <= 0.0 {
        return 0.0;
    }
    inter / union - (hull - union) / hull
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Pixel-count estimate of IoU on an `n × n` raster of the unit square.
    fn raster_iou(a: &BBox, b: &BBox, n: usize) -> f64 {
        let (ca, cb) = (a.corners(), b.corners());
        let inside = |c: &Corners, x: f64, y: f64| x >= c.x1 && x < c.x2 && y >= c.y1 && y < c.y2;
        let (mut inter, mut uni) = (0usize, 0usize);
        for i in 0..n {
            let y = (i as f64 + 0.5) / n as f64;
            for j in 0..n {
                let x = (j as f64 + 0.5) / n as f64;
                let (ia, ib) = (inside(&ca, x, y), inside(&cb, x, y));
                inter += usize::from(ia && ib);
                uni += usize::from(ia || ib);
            }
        }
        if uni == 0 {
            0.0
        } else {
            inter as f64 / uni as f64
        }
    }

    #[test]
    fn identical_and_disjoint() {
        let a = BBox::new(0.3, 0.4, 0.2, 0.1).unwrap();
        assert_eq!(box_iou(&a, &a), 1.0);
        let b = BBox::new(0.8, 0.8, 0.1, 0.1).unwrap();
        assert_eq!(box_iou(&a, &b), 0.0);
    }

    #[test]
    fn worked_pair_is_one_seventh() {
        let a = BBox::new(0.25, 0.25, 0.5, 0.5).unwrap();
        let b = BBox::new(0.5, 0.5, 0.5, 0.5).unwrap();
        assert!((box_iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
        assert!((raster_iou(&a, &b, 1000) - 1.0 / 7.0).abs() < 2e-3);
        let g = generalized_iou(&a, &b);
        assert!((g - (1.0 / 7.0 - 0.125 / 0.5625)).abs() < 1e-12);
    }

    #[test]
    fn constructor_rejects_out_of_range() {
        assert!(BBox::new(1.2, 0.5, 0.1, 0.1).is_err());
        assert!(BBox::new(0.5, 0.5, 0.0, 0.1).is_err());
        assert!(BBox::new(0.5, 0.5, 0.1, 1.5).is_err());
    }

    // Corners on the 1/1000 grid so the raster count is exact.
    fn arb_box() -> impl Strategy<Value = BBox> {
        (0u32..900, 0u32..900, 20u32..600, 20u32..600).prop_map(|(x, y, w, h)| {
            let x2 = (x + w).min(1000);
            let y2 = (y + h).min(1000);
            BBox::from_corners(Corners {
                x1: x as f64 / 1000.0,
                y1: y as f64 / 1000.0,
                x2: x2 as f64 / 1000.0,
                y2: y2 as f64 / 1000.0,
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn iou_symmetric_bounded_and_matches_raster(a in arb_box(), b in arb_box()) {
            let ab = box_iou(&a, &b);
            prop_assert_eq!(ab, box_iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - raster_iou(&a, &b, 1000)).abs() < 2e-3);
            let g = generalized_iou(&a, &b);
            prop_assert!(g <= ab + 1e-15 && g >= -1.0);
        }
    }
}
