use super::Tensor4;
use crate::error::{check_dim, Error, Result};
use crate::param::Param;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel affine parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub epsilon: f64,
    pub momentum: f64,
    pub mode: BnMode,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(vec![1.0; channels], vec![channels]),
            beta: Param::zeros(vec![channels]),
            running_mean: Param::buffer(vec![0.0; channels]),
            running_var: Param::buffer(vec![1.0; channels]),
            epsilon: 1e-5,
            momentum: 0.1,
            mode: BnMode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// What the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    normalized: Tensor4,
    inv_std: Vec<f64>,
    mode: BnMode,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads {
    pub input: Tensor4,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Train mode normalizes by batch statistics over (B, H, W) and updates the
/// running estimates; eval mode uses the running estimates only.
pub fn batchnorm_forward(
    input: &Tensor4,
    state: &mut BatchNormState,
) -> Result<(Tensor4, BatchNormCache)> {
    let s = input.shape();
    check_dim("channels", state.channels(), s.channels)?;
    let plane = s.plane();
    let count = s.batch * plane;
    if state.mode == BnMode::Train && count < 2 {
        return Err(Error::contract(format!(
            "train-mode batchnorm needs B*H*W >= 2, got {count}"
        )));
    }

    let mut inv_std = vec![0.0; s.channels];
    let mut normalized = Tensor4::zeros(s);
    let mut out = Tensor4::zeros(s);
    for c in 0..s.channels {
        let (mean, var) = match state.mode {
            BnMode::Train => {
                let mut sum = 0.0;
                for b in 0..s.batch {
                    sum += input.plane(b, c).iter().sum::<f64>();
                }
                let mean = sum / count as f64;
                let mut sq = 0.0;
                for b in 0..s.batch {
                    sq += input
                        .plane(b, c)
                        .iter()
                        .map(|v| (v - mean) * (v - mean))
                        .sum::<f64>();
                }
                let var = sq / count as f64;
                let m = state.momentum;
                let unbiased = sq / (count - 1) as f64;
                state.running_mean.value[c] = (1.0 - m) * state.running_mean.value[c] + m * mean;
                state.running_var.value[c] = (1.0 - m) * state.running_var.value[c] + m * unbiased;
                (mean, var)
            }
            BnMode::Eval => (state.running_mean.value[c], state.running_var.value[c]),
        };
        let istd = 1.0 / (var + state.epsilon).sqrt();
        inv_std[c] = istd;
        let (g, bta) = (state.gamma.value[c], state.beta.value[c]);
        for b in 0..s.batch {
            let start = input.index(b, c, 0, 0);
            for i in start..start + plane {
                let xh = (input.data()[i] - mean) * istd;
                normalized.data_mut()[i] = xh;
                out.data_mut()[i] = g * xh + bta;
            }
        }
    }
    Ok((
        out,
        BatchNormCache {
            normalized,
            inv_std,
            mode: state.mode,
        },
    ))
}

pub fn batchnorm_backward(
    grad_output: &Tensor4,
    state: &BatchNormState,
    cache: &BatchNormCache,
) -> Result<BatchNormGrads> {
    let s = grad_output.shape();
    cache.normalized.shape().expect_eq(&s)?;
    let plane = s.plane();
    let count = (s.batch * plane) as f64;
    let mut grad_in = Tensor4::zeros(s);
    let mut gg = vec![0.0; s.channels];
    let mut gb = vec![0.0; s.channels];
    for c in 0..s.channels {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for b in 0..s.batch {
            let start = grad_output.index(b, c, 0, 0);
            for i in start..start + plane {
                let g = grad_output.data()[i];
                sum_g += g;
                sum_gx += g * cache.normalized.data()[i];
            }
        }
        gg[c] = sum_gx;
        gb[c] = sum_g;
        let gamma = state.gamma.value[c];
        let istd = cache.inv_std[c];
        for b in 0..s.batch {
            let start = grad_output.index(b, c, 0, 0);
            for i in start..start + plane {
                let g = grad_output.data()[i];
                grad_in.data_mut()[i] = match cache.mode {
                    BnMode::Train => {
                        let xh = cache.normalized.data()[i];
                        gamma * istd * (g - sum_g / count - xh * sum_gx / count)
                    }
                    BnMode::Eval => gamma * istd * g,
                };
            }
        }
    }
    Ok(BatchNormGrads {
        input: grad_in,
        gamma: gg,
        beta: gb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;
    use rand::SeedableRng;

    fn standardized(shape: Shape4, seed: u64) -> Tensor4 {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut x = Tensor4::random_uniform(shape, -2.0, 2.0, &mut r);
        let n = (shape.batch * shape.plane()) as f64;
        for c in 0..shape.channels {
            let idx: Vec<usize> = (0..shape.batch)
                .flat_map(|b| {
                    let s = x.index(b, c, 0, 0);
                    s..s + shape.plane()
                })
                .collect();
            let mean = idx.iter().map(|&i| x.data()[i]).sum::<f64>() / n;
            let var = idx.iter().map(|&i| (x.data()[i] - mean).powi(2)).sum::<f64>() / n;
            for &i in &idx {
                x.data_mut()[i] = (x.data()[i] - mean) / var.sqrt();
            }
        }
        x
    }

    #[test]
    fn standardized_input_passes_through() {
        let x = standardized(Shape4::new(2, 3, 3, 3), 5);
        let mut st = BatchNormState::new(3);
        st.epsilon = 0.0;
        let (y, _) = batchnorm_forward(&x, &mut st).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let x = standardized(Shape4::new(2, 2, 2, 2), 6);
        let mut st = BatchNormState::new(2);
        st.gamma.value = vec![0.0, 0.0];
        st.beta.value = vec![0.25, -1.5];
        let (y, _) = batchnorm_forward(&x, &mut st).unwrap();
        for b in 0..2 {
            assert!(y.plane(b, 0).iter().all(|&v| v == 0.25));
            assert!(y.plane(b, 1).iter().all(|&v| v == -1.5));
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 1, 4), vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let mut st = BatchNormState::new(1);
        batchnorm_forward(&x, &mut st).unwrap();
        // mean 3, unbiased var 14/3
        assert!((st.running_mean.value[0] - 0.3).abs() < 1e-15);
        assert!((st.running_var.value[0] - (0.9 + 0.1 * 14.0 / 3.0)).abs() < 1e-15);
        assert!(st.running_var.value[0] > 0.0);
    }

    #[test]
    fn eval_mode_is_deterministic_and_uses_running_stats() {
        let x = standardized(Shape4::new(1, 1, 2, 2), 8);
        let mut st = BatchNormState::new(1);
        st.mode = BnMode::Eval;
        st.running_mean.value[0] = 0.5;
        st.running_var.value[0] = 4.0;
        st.epsilon = 0.0;
        let (y1, _) = batchnorm_forward(&x, &mut st).unwrap();
        let (y2, _) = batchnorm_forward(&x, &mut st).unwrap();
        assert_eq!(y1, y2);
        assert!((y1.data()[0] - (x.data()[0] - 0.5) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn train_mode_rejects_single_value() {
        let x = Tensor4::zeros(Shape4::new(1, 1, 1, 1));
        let mut st = BatchNormState::new(1);
        assert!(matches!(
            batchnorm_forward(&x, &mut st),
            Err(Error::Contract(_))
        ));
        st.mode = BnMode::Eval;
        assert!(batchnorm_forward(&x, &mut st).is_ok());
    }
}
