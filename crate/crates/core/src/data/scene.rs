//! Synthetic tracking sequences: a checkerboard-textured target moving with
//! constant velocity and wall bounce, optionally accompanied by a
//! stripe-textured distractor.

use crate::bbox::{box_iou, BBox};
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const CHANNELS: usize = 3;
/// Distractors may overlap the target by at most this IoU when spawned.
pub const MAX_SPAWN_IOU: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub image_size: usize,
    pub frames: usize,
    pub distractor_prob: f64,
    /// Amplitude of the uniform background noise.
    pub noise: f64,
    /// Object side range as a fraction of the image side.
    pub min_size: f64,
    pub max_size: f64,
    /// Per-axis speed bound in pixels per frame.
    pub max_speed: f64,
    /// Fixed target velocity `(vx, vy)` instead of a random one.
    pub velocity: Option<[f64; 2]>,
    /// Fixed initial target pixel box `(x, y, w, h)` instead of a random one.
    pub start: Option<[f64; 4]>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 96,
            frames: 16,
            distractor_prob: 0.5,
            noise: 0.08,
            min_size: 0.15,
            max_size: 0.45,
            max_speed: 3.0,
            velocity: None,
            start: None,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let s = self.image_size as f64;
        if self.image_size == 0 || self.frames == 0 {
            return Err(Error::contract("scene needs a positive image size and frame count"));
        }
        if !(0.0 < self.min_size && self.min_size <= self.max_size && self.max_size <= 1.0) {
            return Err(Error::contract(format!(
                "object size range [{}, {}] must lie in (0, 1]",
                self.min_size, self.max_size
            )));
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) || !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::contract("distractor probability and noise lie in [0, 1]"));
        }
        if let Some([x, y, w, h]) = self.start {
            if !(w > 0.0 && h > 0.0 && w <= s && h <= s) {
                return Err(Error::contract(format!(
                    "object {w}×{h} does not fit a {s}×{s} image"
                )));
            }
            if x < 0.0 || y < 0.0 || x + w > s || y + h > s {
                return Err(Error::contract("initial object box leaves the image"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub name: String,
    /// `(T, 3, S, S)` frames with values on the `k / 255` grid.
    pub frames: Tensor4,
    /// Ground truth as pixel `(x, y, w, h)`.
    pub pixel_boxes: Vec<[f64; 4]>,
    pub boxes: Vec<BBox>,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.frames.width()
    }
}

/// Rounds to the nearest `k / 255`, stored so that an `f32` round trip is exact.
pub fn quantize(v: f64) -> f64 {
    ((v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0) as f64
}

#[derive(Debug, Clone, Copy)]
enum Texture {
    Checker { cell: f64 },
    Stripes { period: f64, vertical: bool },
}

#[derive(Debug, Clone, Copy)]
struct Mover {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    vx: f64,
    vy: f64,
    texture: Texture,
    colors: [[f64; 3]; 2],
}

fn bounce(pos: &mut f64, vel: &mut f64, size: f64, limit: f64) {
    *pos += *vel;
    if *pos < 0.0 {
        *pos = -*pos;
        *vel = -*vel;
    }
    if *pos + size > limit {
        *pos = 2.0 * (limit - size) - *pos;
        *vel = -*vel;
    }
    *pos = pos.clamp(0.0, limit - size);
}

impl Mover {
    fn step(&mut self, limit: f64) {
        bounce(&mut self.x, &mut self.vx, self.w, limit);
        bounce(&mut self.y, &mut self.vy, self.h, limit);
    }

    fn pixel_box(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    fn draw(&self, frame: &mut [f64], s: usize) {
        let plane = s * s;
        for i in 0..s {
            let py = i as f64 + 0.5;
            if py < self.y || py >= self.y + self.h {
                continue;
            }
            for j in 0..s {
                let px = j as f64 + 0.5;
                if px < self.x || px >= self.x + self.w {
                    continue;
                }
                let (u, v) = (px - self.x, py - self.y);
                let phase = match self.texture {
                    Texture::Checker { cell } => {
                        ((u / cell).floor() as i64 + (v / cell).floor() as i64).rem_euclid(2)
                    }
                    Texture::Stripes { period, vertical } => {
                        let t = if vertical { u } else { v };
                        (t / period).floor() as i64 % 2
                    }
                } as usize;
                for c in 0..CHANNELS {
                    frame[c * plane + i * s + j] = quantize(self.colors[phase][c]);
                }
            }
        }
    }
}

fn random_colors(rng: &mut ChaCha8Rng) -> [[f64; 3]; 2] {
    let light = [(); 3].map(|_| rng.gen_range(0.55..1.0));
    let dark = [(); 3].map(|_| rng.gen_range(0.0..0.35));
    [light, dark]
}

fn random_mover(rng: &mut ChaCha8Rng, spec: &SceneSpec, texture: Texture) -> Mover {
    let s = spec.image_size as f64;
    let w = rng.gen_range(spec.min_size..=spec.max_size) * s;
    let h = rng.gen_range(spec.min_size..=spec.max_size) * s;
    let x = rng.gen_range(0.0..=s - w);
    let y = rng.gen_range(0.0..=s - h);
    let vx = rng.gen_range(-spec.max_speed..=spec.max_speed);
    let vy = rng.gen_range(-spec.max_speed..=spec.max_speed);
    let colors = random_colors(rng);
    Mover {
        x,
        y,
        w,
        h,
        vx,
        vy,
        texture,
        colors,
    }
}

/// Renders one sequence; a pure function of `spec`.
pub fn generate_sequence(spec: &SceneSpec, name: &str) -> Result<SequenceRecord> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.image_size;
    let sf = s as f64;

    let checker = Texture::Checker {
        cell: rng.gen_range(3..=5) as f64,
    };
    let mut target = random_mover(&mut rng, spec, checker);
    if let Some([x, y, w, h]) = spec.start {
        (target.x, target.y, target.w, target.h) = (x, y, w, h);
    }
    if let Some([vx, vy]) = spec.velocity {
        (target.vx, target.vy) = (vx, vy);
    }

    let mut distractor = None;
    if rng.gen_bool(spec.distractor_prob) {
        let stripes = Texture::Stripes {
            period: rng.gen_range(2..=4) as f64,
            vertical: rng.gen_bool(0.5),
        };
        let tb = BBox::from_pixel_xywh(target.x, target.y, target.w, target.h, sf, sf);
        for _ in 0..64 {
            let d = random_mover(&mut rng, spec, stripes);
            let db = BBox::from_pixel_xywh(d.x, d.y, d.w, d.h, sf, sf);
            if box_iou(&tb, &db) <= MAX_SPAWN_IOU {
                distractor = Some(d);
                break;
            }
        }
    }

    let background: [f64; 3] = [(); 3].map(|_| rng.gen_range(0.05..0.25));
    let plane = s * s;
    let mut frames = Tensor4::zeros(Shape4::new(spec.frames, CHANNELS, s, s));
    let mut pixel_boxes = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        if t > 0 {
            target.step(sf);
            if let Some(d) = distractor.as_mut() {
                d.step(sf);
            }
        }
        let frame = frames.item_mut(t);
        for c in 0..CHANNELS {
            for v in &mut frame[c * plane..(c + 1) * plane] {
                let n = if spec.noise > 0.0 {
                    rng.gen_range(-spec.noise..=spec.noise)
                } else {
                    0.0
                };
                *v = quantize(background[c] + n);
            }
        }
        if let Some(d) = &distractor {
            d.draw(frame, s);
        }
        target.draw(frame, s);
        pixel_boxes.push(target.pixel_box());
    }
    let boxes = pixel_boxes
        .iter()
        .map(|&[x, y, w, h]| BBox::from_pixel_xywh(x, y, w, h, sf, sf))
        .collect();
    Ok(SequenceRecord {
        name: name.to_string(),
        frames,
        pixel_boxes,
        boxes,
    })
}
