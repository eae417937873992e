//! Named parameter storage shared by layers, the optimizer, gradient checks
//! and checkpoints.

use crate::error::Result;
use crate::tensor::Tensor4;

/// A flat parameter array with its gradient accumulator.
///
/// Non-trainable entries (BatchNorm running statistics) ride along so that
/// checkpoints capture the full inference state; the optimizer skips them.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub dims: Vec<usize>,
    pub trainable: bool,
}

impl Param {
    pub fn new(value: Vec<f64>, dims: Vec<usize>) -> Self {
        debug_assert_eq!(value.len(), dims.iter().product::<usize>());
        let grad = vec![0.0; value.len()];
        Self {
            value,
            grad,
            dims,
            trainable: true,
        }
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self::new(vec![0.0; n], dims)
    }

    pub fn buffer(value: Vec<f64>) -> Self {
        let n = value.len();
        let mut p = Self::new(value, vec![n]);
        p.trainable = false;
        p
    }

    pub fn from_tensor(t: Tensor4) -> Self {
        let dims = t.shape().to_array().to_vec();
        Self::new(t.into_vec(), dims)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn accumulate(&mut self, grad: &[f64]) {
        debug_assert_eq!(grad.len(), self.grad.len());
        for (g, d) in self.grad.iter_mut().zip(grad) {
            *g += d;
        }
    }

    /// Views a 4-dim parameter as a tensor (copies).
    pub fn to_tensor(&self) -> Result<Tensor4> {
        let d = &self.dims;
        let shape = match d.len() {
            4 => crate::tensor::Shape4::new(d[0], d[1], d[2], d[3]),
            _ => crate::tensor::Shape4::new(1, 1, 1, self.len()),
        };
        Tensor4::from_vec(shape, self.value.clone())
    }
}

/// Anything owning named [`Param`]s, visited in a fixed order.
pub trait HasParams {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| {
            if p.trainable {
                n += p.len()
            }
        });
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params("", &mut |name, _| names.push(name.to_string()));
        names
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A differentiable layer mapping one tensor to another.
///
/// `forward` caches what `backward` needs; `backward` accumulates parameter
/// gradients and returns the gradient with respect to the forward input.
pub trait Layer: HasParams {
    fn forward(&mut self, input: &Tensor4) -> Result<Tensor4>;
    fn backward(&mut self, grad_output: &Tensor4) -> Result<Tensor4>;
    fn set_training(&mut self, _training: bool) {}
}
