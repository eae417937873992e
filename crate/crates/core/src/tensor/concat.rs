use super::{Shape4, Tensor4};
use crate::error::{check_dim, Error, Result};

/// Concatenates along the channel axis, blocks in argument order.
pub fn concat_channels(inputs: &[&Tensor4]) -> Result<Tensor4> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::contract("concat of zero tensors"))?;
    let s0 = first.shape();
    for t in &inputs[1..] {
        check_dim("batch", s0.batch, t.batch())?;
        check_dim("height", s0.height, t.height())?;
        check_dim("width", s0.width, t.width())?;
    }
    let channels = inputs.iter().map(|t| t.channels()).sum();
    let shape = Shape4::new(s0.batch, channels, s0.height, s0.width);
    let mut data = Vec::with_capacity(shape.len());
    for b in 0..s0.batch {
        for t in inputs {
            data.extend_from_slice(t.item(b));
        }
    }
    Tensor4::from_vec(shape, data)
}

/// Inverse of [`concat_channels`]: cuts `input` into blocks of the given channel counts.
pub fn split_channels(input: &Tensor4, sizes: &[usize]) -> Result<Vec<Tensor4>> {
    let s = input.shape();
    check_dim("channels", s.channels, sizes.iter().sum())?;
    let plane = s.plane();
    let mut parts: Vec<Vec<f64>> = sizes
        .iter()
        .map(|&c| Vec::with_capacity(s.batch * c * plane))
        .collect();
    for b in 0..s.batch {
        let item = input.item(b);
        let mut start = 0;
        for (part, &c) in parts.iter_mut().zip(sizes) {
            part.extend_from_slice(&item[start * plane..(start + c) * plane]);
            start += c;
        }
    }
    parts
        .into_iter()
        .zip(sizes)
        .map(|(data, &c)| Tensor4::from_vec(Shape4::new(s.batch, c, s.height, s.width), data))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn single_input_is_identity() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = Tensor4::random_uniform(Shape4::new(2, 3, 2, 2), -1.0, 1.0, &mut r);
        assert_eq!(concat_channels(&[&x]).unwrap(), x);
    }

    #[test]
    fn block_order_preserved() {
        let a = Tensor4::filled(Shape4::new(2, 2, 3, 3), 1.0);
        let b = Tensor4::filled(Shape4::new(2, 3, 3, 3), 2.0);
        let y = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.shape(), Shape4::new(2, 5, 3, 3));
        for bi in 0..2 {
            for c in 0..5 {
                let want = if c < 2 { 1.0 } else { 2.0 };
                assert!(y.plane(bi, c).iter().all(|&v| v == want));
            }
        }
    }

    #[test]
    fn spatial_mismatch_is_rejected() {
        let a = Tensor4::zeros(Shape4::new(1, 1, 3, 3));
        let b = Tensor4::zeros(Shape4::new(1, 1, 3, 4));
        assert!(concat_channels(&[&a, &b]).is_err());
    }

    proptest! {
        #[test]
        fn concat_then_split_round_trips(
            batch in 1usize..3, c1 in 1usize..4, c2 in 1usize..4, c3 in 1usize..3,
            h in 1usize..4, w in 1usize..4, seed in any::<u64>()
        ) {
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let parts: Vec<Tensor4> = [c1, c2, c3]
                .iter()
                .map(|&c| Tensor4::random_uniform(Shape4::new(batch, c, h, w), -1.0, 1.0, &mut r))
                .collect();
            let refs: Vec<&Tensor4> = parts.iter().collect();
            let joined = concat_channels(&refs).unwrap();
            let back = split_channels(&joined, &[c1, c2, c3]).unwrap();
            prop_assert_eq!(back, parts);
        }
    }
}
