use super::Tensor4;
use crate::error::Result;

/// `max(x, 0)`; NaN passes through so upstream failures stay visible.
pub fn relu_forward(input: &Tensor4) -> Tensor4 {
    input.map(|v| if v < 0.0 { 0.0 } else { v })
}

/// Passes `grad` where the forward input was strictly positive; the subgradient at 0 is 0.
pub fn relu_backward(input: &Tensor4, grad: &Tensor4) -> Result<Tensor4> {
    input.shape().expect_eq(&grad.shape())?;
    let mut out = grad.clone();
    for (g, &x) in out.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(out)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_forward(input: &Tensor4) -> Tensor4 {
    input.map(sigmoid)
}

/// Backward through a sigmoid given its forward *output*.
pub fn sigmoid_backward(output: &Tensor4, grad: &Tensor4) -> Result<Tensor4> {
    output.shape().expect_eq(&grad.shape())?;
    let mut out = grad.clone();
    for (g, &s) in out.data_mut().iter_mut().zip(output.data()) {
        *g *= s * (1.0 - s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    #[test]
    fn relu_values_and_zero_subgradient() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 1, 3), vec![-1.0, 2.0, 0.0]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 2.0, 0.0]);
        let g = Tensor4::filled(x.shape(), 5.0);
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 5.0, 0.0]);
    }

    #[test]
    fn relu_matches_finite_difference_away_from_kink() {
        let xs = [-0.7, -0.1, 0.3, 1.9];
        let h = 1e-5;
        for &x0 in &xs {
            let x = Tensor4::from_vec(Shape4::new(1, 1, 1, 1), vec![x0]).unwrap();
            let g = Tensor4::filled(x.shape(), 1.0);
            let analytic = relu_backward(&x, &g).unwrap().data()[0];
            let numeric = ((x0 + h).max(0.0) - (x0 - h).max(0.0)) / (2.0 * h);
            assert!((analytic - numeric).abs() < 1e-6);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0).is_finite());
        assert_eq!(sigmoid(800.0), 1.0);
        assert_eq!(sigmoid(40.0), 1.0);
    }
}
