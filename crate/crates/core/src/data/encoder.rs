//! Frozen random convolutional encoder standing in for a transformer backbone.

use crate::error::{check_dim, Result};
use crate::layers::Conv2d;
use crate::tensor::{conv2d_forward, relu_forward, ConvSpec, Shape4, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ENCODER_WIDTHS: [usize; 4] = [3, 16, 32, 32];
pub const ENCODER_STRIDE: usize = 8;

/// Three stride-2 3×3 conv + ReLU stages, `(B, 3, S, S) → (B, 32, S/8, S/8)`.
/// Parameters are fixed at construction; no gradient ever reaches them.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    layers: Vec<Conv2d>,
    image_size: usize,
}

impl ToyEncoder {
    pub fn new(seed: u64, image_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = ENCODER_WIDTHS
            .windows(2)
            .map(|w| {
                let spec = ConvSpec::new(w[0], w[1], 3);
                let mut conv = Conv2d::zeroed(spec);
                let bound = (6.0 / spec.fan_in() as f64).sqrt();
                for v in &mut conv.weight.value {
                    *v = rng.gen_range(-bound..bound);
                }
                conv
            })
            .collect();
        Self { layers, image_size }
    }

    pub fn out_channels(&self) -> usize {
        ENCODER_WIDTHS[ENCODER_WIDTHS.len() - 1]
    }

    pub fn map_size(&self) -> usize {
        self.image_size / ENCODER_STRIDE
    }

    pub fn encode(&self, frames: &Tensor4) -> Result<Tensor4> {
        check_dim("channels", ENCODER_WIDTHS[0], frames.channels())?;
        check_dim("height", self.image_size, frames.height())?;
        check_dim("width", self.image_size, frames.width())?;
        let mut x = frames.clone();
        for conv in &self.layers {
            let full = conv2d_forward(&x, &conv.spec, &conv.weight_tensor(), &conv.bias.value)?;
            x = relu_forward(&subsample2(&full));
        }
        Ok(x)
    }
}

/// Keeps even rows and columns: a stride-2 view of a same-padded stride-1 output.
fn subsample2(input: &Tensor4) -> Tensor4 {
    let s = input.shape();
    let (h, w) = (s.height.div_ceil(2), s.width.div_ceil(2));
    let mut out = Tensor4::zeros(Shape4::new(s.batch, s.channels, h, w));
    for b in 0..s.batch {
        for c in 0..s.channels {
            for y in 0..h {
                for x in 0..w {
                    out.set(b, c, y, x, input.at(b, c, 2 * y, 2 * x));
                }
            }
        }
    }
    out
}

/// Encodes a batch of frames; thin wrapper over [`ToyEncoder::encode`].
pub fn encode_frames(frames: &Tensor4, encoder: &ToyEncoder) -> Result<Tensor4> {
    encoder.encode(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::{generate_sequence, SceneSpec};

    #[test]
    fn output_dims() {
        let enc = ToyEncoder::new(0, 96);
        for b in [1, 8] {
            let x = Tensor4::filled(Shape4::new(b, 3, 96, 96), 0.3);
            assert_eq!(enc.encode(&x).unwrap().shape(), Shape4::new(b, 32, 12, 12));
        }
    }

    #[test]
    fn identical_frames_identical_features() {
        let enc = ToyEncoder::new(5, 96);
        let seq = generate_sequence(&SceneSpec::default(), "s").unwrap();
        let one = seq.frames.select_batch(&[3]).unwrap();
        let two = Tensor4::stack_batch(&[&one, &one]).unwrap();
        let f = enc.encode(&two).unwrap();
        assert_eq!(f.item(0), f.item(1));
        assert_eq!(enc.encode(&one).unwrap().item(0), f.item(0));
    }

    #[test]
    fn wrong_image_dims_rejected() {
        let enc = ToyEncoder::new(0, 96);
        let err = enc.encode(&Tensor4::zeros(Shape4::new(1, 3, 64, 96))).unwrap_err();
        assert!(err.to_string().contains("height"));
        assert!(enc.encode(&Tensor4::zeros(Shape4::new(1, 1, 96, 96))).is_err());
    }

    fn mean_peak(features: &Tensor4, b: usize) -> (usize, usize) {
        let (c, w) = (features.channels(), features.width());
        let mut mean = vec![0.0; features.height() * w];
        for ch in 0..c {
            for (m, v) in mean.iter_mut().zip(features.plane(b, ch)) {
                *m += v / c as f64;
            }
        }
        let best = (0..mean.len()).fold(0, |best, i| if mean[i] > mean[best] { i } else { best });
        (best / w, best % w)
    }

    #[test]
    fn response_follows_the_object() {
        let spec = SceneSpec {
            noise: 0.0,
            distractor_prob: 0.0,
            start: Some([16.0, 40.0, 24.0, 24.0]),
            velocity: Some([16.0, 0.0]),
            frames: 3,
            ..Default::default()
        };
        let seq = generate_sequence(&spec, "s").unwrap();
        let f = ToyEncoder::new(0, 96).encode(&seq.frames).unwrap();
        let (p0, p1, p2) = (mean_peak(&f, 0), mean_peak(&f, 1), mean_peak(&f, 2));
        assert_eq!(p1.0, p0.0);
        assert!(p1.1 > p0.1 && p2.1 > p1.1, "{p0:?} {p1:?} {p2:?}");
        assert_eq!(p1.1 - p0.1, 2);
    }

    #[test]
    fn subsample_keeps_even_positions() {
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let t = Tensor4::from_vec(Shape4::new(1, 1, 4, 4), data).unwrap();
        assert_eq!(subsample2(&t).data(), &[0.0, 2.0, 8.0, 10.0]);
    }
}
