//! Central finite-difference checks of every layer, block and the head.
//!
//! Each check draws a random input and a random projection `R`, takes the
//! scalar `L = Σ out ⊙ R`, and compares the analytic gradient of `L` with
//! respect to the input and every trainable parameter against
//! `(L(θ + h) − L(θ − h)) / 2h`.

use crate::bbox::BBox;
use crate::blocks::{BlockOrder, ConvBlock, DeformInceptionBlock, InceptionBlock};
use crate::deform::DeformConv2d;
use crate::error::{Error, Result};
use crate::head::{Head, HeadConfig, HeadVariant, ScoreMapGrads, ScoreMaps};
use crate::layers::{BatchNorm2d, Conv2d};
use crate::loss::{head_loss, LossWeights};
use crate::param::{HasParams, Layer, Param};
use crate::tensor::{
    avg_pool3x3_backward, avg_pool3x3_same, relu_backward, relu_forward, sigmoid_backward,
    sigmoid_forward, ConvSpec, Shape4, Tensor4,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::fmt::Write as _;

pub const STEP: f64 = 1e-5;
/// Tolerance for paths containing train-mode BatchNorm.
pub const TOL_BATCHNORM: f64 = 1e-3;
pub const TOL_PLAIN: f64 = 1e-4;
/// Denominator floor of the relative error, so near-zero gradients are
/// compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Worst entry found by one check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Worst {
    pub error: f64,
    pub location: String,
    pub checked: usize,
    /// Entries scored at the refined step; see [`FiniteDiff::error`].
    pub kinks: usize,
}

impl Worst {
    fn new() -> Self {
        Self {
            error: 0.0,
            location: String::new(),
            checked: 0,
            kinks: 0,
        }
    }

    fn record(&mut self, analytic: f64, fd: FiniteDiff, location: impl FnOnce() -> String) {
        self.checked += 1;
        let (e, kink) = fd.error(analytic);
        self.kinks += usize::from(kink);
        if e > self.error || e.is_nan() {
            self.error = e;
            self.location = format!("{} analytic {analytic:e} numeric {:e}", location(), fd.central());
        }
    }
}

/// Central differences at the primary step and, when that disagrees, at a refined step.
#[derive(Debug, Clone, Copy)]
struct FiniteDiff {
    central: f64,
    refined: Option<f64>,
}

impl FiniteDiff {
    fn central(&self) -> f64 {
        self.central
    }

    /// Relative error, and whether the primary step straddled a kink.
    ///
    /// A perturbation of `±h` can cross a point where the function is only
    /// piecewise smooth (ReLU at 0, bilinear sampling at an integer
    /// coordinate), and the central difference then averages two slopes. Such
    /// entries are re-measured at `h / 10`. Shrinking the step shrinks a
    /// straddle's bias, so if the refined error is at most half the primary
    /// one the entry counts as a kink and the refined error stands. A wrong
    /// gradient does not improve with the step and keeps its primary error.
    fn error(&self, analytic: f64) -> (f64, bool) {
        let e = relative_error(analytic, self.central);
        match self.refined {
            Some(r) if relative_error(analytic, r) <= KINK_GAIN * e => (relative_error(analytic, r), true),
            _ => (e, false),
        }
    }
}

/// Primary-step errors above this trigger the refined re-measurement.
const RECHECK: f64 = 1e-5;
pub const REFINE: f64 = 10.0;
/// Required error reduction at the refined step for an entry to count as a kink.
const KINK_GAIN: f64 = 0.5;

fn finite_diff(analytic: f64, eval: &mut dyn FnMut(f64) -> Result<f64>) -> Result<FiniteDiff> {
    let central = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
    let refined = if relative_error(analytic, central) > RECHECK {
        let h = STEP / REFINE;
        Some((eval(h)? - eval(-h)?) / (2.0 * h))
    } else {
        None
    };
    Ok(FiniteDiff { central, refined })
}

fn with_param<M: HasParams + ?Sized>(model: &mut M, slot: usize, f: &mut dyn FnMut(&mut Param)) {
    let mut k = 0;
    model.visit_params_mut("", &mut |_, p| {
        if p.trainable {
            if k == slot {
                f(p);
            }
            k += 1;
        }
    });
}

/// Compares analytic and numeric gradients of a scalar objective.
///
/// `objective` evaluates the loss; `gradient` runs forward and backward from a
/// zeroed gradient state and returns the input gradient.
pub fn check_model<M: HasParams + ?Sized>(
    model: &mut M,
    input: &Tensor4,
    objective: &mut dyn FnMut(&mut M, &Tensor4) -> Result<f64>,
    gradient: &mut dyn FnMut(&mut M, &Tensor4) -> Result<Tensor4>,
) -> Result<Worst> {
    model.zero_grad();
    let grad_input = gradient(model, input)?;
    let mut params: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit_params("", &mut |name, p| {
        if p.trainable {
            params.push((name.to_string(), p.grad.clone()));
        }
    });

    let mut worst = Worst::new();
    let mut x = input.clone();
    for i in 0..x.data().len() {
        let orig = x.data()[i];
        let analytic = grad_input.data()[i];
        let fd = finite_diff(analytic, &mut |d| {
            x.data_mut()[i] = orig + d;
            let l = objective(model, &x);
            x.data_mut()[i] = orig;
            l
        })?;
        worst.record(analytic, fd, || format!("input[{i}]"));
    }
    for (slot, (name, grad)) in params.iter().enumerate() {
        for (j, &analytic) in grad.iter().enumerate() {
            let mut orig = 0.0;
            with_param(model, slot, &mut |p| orig = p.value[j]);
            let fd = finite_diff(analytic, &mut |d| {
                with_param(model, slot, &mut |p| p.value[j] = orig + d);
                let l = objective(model, input);
                with_param(model, slot, &mut |p| p.value[j] = orig);
                l
            })?;
            worst.record(analytic, fd, || format!("{name}[{j}]"));
        }
    }
    Ok(worst)
}

/// [`check_model`] for a [`Layer`] under the random projection `proj`.
pub fn check_layer<L: Layer + ?Sized>(layer: &mut L, input: &Tensor4, proj: &Tensor4) -> Result<Worst> {
    check_model(
        layer,
        input,
        &mut |l, x| Ok(l.forward(x)?.dot(proj)),
        &mut |l, x| {
            l.forward(x)?;
            l.backward(proj)
        },
    )
}

struct Relu {
    input: Option<Tensor4>,
}

struct AvgPool;

struct Sigmoid {
    output: Option<Tensor4>,
}

macro_rules! no_params {
    ($($t:ty),*) => {$(
        impl HasParams for $t {
            fn visit_params(&self, _: &str, _: &mut dyn FnMut(&str, &Param)) {}
            fn visit_params_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param)) {}
        }
    )*};
}
no_params!(Relu, AvgPool, Sigmoid);

impl Layer for Relu {
    fn forward(&mut self, input: &Tensor4) -> Result<Tensor4> {
        self.input = Some(input.clone());
        Ok(relu_forward(input))
    }
    fn backward(&mut self, grad: &Tensor4) -> Result<Tensor4> {
        relu_backward(self.input.as_ref().expect("forward first"), grad)
    }
}

impl Layer for AvgPool {
    fn forward(&mut self, input: &Tensor4) -> Result<Tensor4> {
        Ok(avg_pool3x3_same(input))
    }
    fn backward(&mut self, grad: &Tensor4) -> Result<Tensor4> {
        avg_pool3x3_backward(grad)
    }
}

impl Layer for Sigmoid {
    fn forward(&mut self, input: &Tensor4) -> Result<Tensor4> {
        let out = sigmoid_forward(input);
        self.output = Some(out.clone());
        Ok(out)
    }
    fn backward(&mut self, grad: &Tensor4) -> Result<Tensor4> {
        sigmoid_backward(self.output.as_ref().expect("forward first"), grad)
    }
}

/// Replaces the zero-initialized offset and mask predictors with random
/// weights so sampling positions fall off the integer grid, where bilinear
/// interpolation is differentiable.
pub fn randomize_sampling<R: Rng + ?Sized>(layer: &mut DeformConv2d, scale: f64, rng: &mut R) {
    for p in [
        &mut layer.offset_conv.weight,
        &mut layer.offset_conv.bias,
        &mut layer.mask_conv.weight,
        &mut layer.mask_conv.bias,
    ] {
        for v in &mut p.value {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

/// Random BatchNorm affine parameters, so BN is not the identity.
pub fn randomize_bn<M: HasParams + ?Sized, R: Rng + ?Sized>(model: &mut M, rng: &mut R) {
    model.visit_params_mut("", &mut |name, p| {
        if name.ends_with("gamma") {
            p.value.iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5));
        } else if name.ends_with("beta") {
            p.value.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    });
}

/// Random offset and mask predictors in every deformable body layer.
pub fn randomize_head_sampling<R: Rng + ?Sized>(head: &mut Head, rng: &mut R) {
    for b in &mut head.body {
        if let crate::head::BodyBlock::Deform(d) = b {
            if let Some(layer) = d.deform_layer_mut() {
                randomize_sampling(layer, 0.3, rng);
            }
        }
    }
}

/// Every component covered by the suite.
pub const COMPONENTS: [&str; 14] = [
    "conv2d_3x3",
    "conv2d_1x1",
    "relu",
    "avg_pool3x3",
    "sigmoid",
    "batchnorm_train",
    "deform_conv",
    "conv_block",
    "conv_block_bn_relu",
    "inception_block",
    "deform_inception_block",
    "deform_only_block",
    "head",
    "head_objective",
];

/// Whether the component's path runs through train-mode BatchNorm.
pub fn uses_batchnorm(component: &str) -> bool {
    !matches!(
        component,
        "conv2d_3x3" | "conv2d_1x1" | "relu" | "avg_pool3x3" | "sigmoid" | "deform_conv"
    )
}

pub fn tolerance(component: &str) -> f64 {
    if uses_batchnorm(component) {
        TOL_BATCHNORM
    } else {
        TOL_PLAIN
    }
}

fn head_projection(maps: &ScoreMaps, rng: &mut ChaCha8Rng) -> ScoreMapGrads {
    let r = |t: &Tensor4, rng: &mut ChaCha8Rng| Tensor4::random_uniform(t.shape(), -1.0, 1.0, rng);
    ScoreMapGrads {
        center: r(&maps.center, rng),
        size: r(&maps.size, rng),
        offset: r(&maps.offset, rng),
    }
}

fn project(maps: &ScoreMaps, p: &ScoreMapGrads) -> f64 {
    maps.center.dot(&p.center) + maps.size.dot(&p.size) + maps.offset.dot(&p.offset)
}

/// Runs one component's check at one seed.
pub fn check_component(component: &str, seed: u64) -> Result<Worst> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape4::new(2, 4, 5, 5);
    let input = Tensor4::random_uniform(shape, -1.0, 1.0, &mut rng);
    let order = BlockOrder::ConvReluBn;
    let layer_check = |layer: &mut dyn Layer, out_channels: usize, rng: &mut ChaCha8Rng| {
        layer.set_training(true);
        let proj = Tensor4::random_uniform(
            Shape4::new(shape.batch, out_channels, shape.height, shape.width),
            -1.0,
            1.0,
            rng,
        );
        check_layer(layer, &input, &proj)
    };
    match component {
        "conv2d_3x3" => {
            let mut l = Conv2d::new(ConvSpec::new(4, 3, 3), &mut rng);
            l.bias.value.iter_mut().for_each(|v| *v = 0.1);
            layer_check(&mut l, 3, &mut rng)
        }
        "conv2d_1x1" => {
            let mut l = Conv2d::new(ConvSpec::new(4, 3, 1), &mut rng);
            layer_check(&mut l, 3, &mut rng)
        }
        "relu" => layer_check(&mut Relu { input: None }, 4, &mut rng),
        "avg_pool3x3" => layer_check(&mut AvgPool, 4, &mut rng),
        "sigmoid" => layer_check(&mut Sigmoid { output: None }, 4, &mut rng),
        "batchnorm_train" => {
            let mut l = BatchNorm2d::new(4);
            randomize_bn(&mut l, &mut rng);
            layer_check(&mut l, 4, &mut rng)
        }
        "deform_conv" => {
            let mut l = DeformConv2d::new(ConvSpec::new(4, 3, 3), &mut rng);
            randomize_sampling(&mut l, 0.3, &mut rng);
            layer_check(&mut l, 3, &mut rng)
        }
        "conv_block" | "conv_block_bn_relu" => {
            let order = if component == "conv_block" {
                BlockOrder::ConvReluBn
            } else {
                BlockOrder::ConvBnRelu
            };
            let mut b = ConvBlock::new(ConvSpec::new(4, 3, 3), order, &mut rng);
            randomize_bn(&mut b, &mut rng);
            layer_check(&mut b, 3, &mut rng)
        }
        "inception_block" => {
            let mut b = InceptionBlock::new(4, None, order, &mut rng);
            randomize_bn(&mut b, &mut rng);
            layer_check(&mut b, 4, &mut rng)
        }
        "deform_inception_block" | "deform_only_block" => {
            let with_regular = component == "deform_inception_block";
            let mut b = DeformInceptionBlock::new(4, None, order, with_regular, &mut rng);
            randomize_bn(&mut b, &mut rng);
            if let Some(l) = b.deform_layer_mut() {
                randomize_sampling(l, 0.3, &mut rng);
            }
            layer_check(&mut b, 4, &mut rng)
        }
        "head" | "head_objective" => {
            let variant = HeadVariant::ALL[(seed % 4) as usize];
            let mut cfg = HeadConfig::new(variant, 4, 5, 5);
            cfg.score_width = Some(2);
            let mut head = Head::new(cfg, &mut rng)?;
            randomize_bn(&mut head, &mut rng);
            randomize_head_sampling(&mut head, &mut rng);
            head.set_training(true);
            if component == "head" {
                let maps = head.forward(&input)?;
                let proj = head_projection(&maps, &mut rng);
                check_model(
                    &mut head,
                    &input,
                    &mut |h, x| Ok(project(&h.forward(x)?, &proj)),
                    &mut |h, x| {
                        h.forward(x)?;
                        h.backward(&proj)
                    },
                )
            } else {
                let gts: Vec<BBox> = (0..shape.batch)
                    .map(|_| {
                        BBox::new(
                            rng.gen_range(0.2..0.8),
                            rng.gen_range(0.2..0.8),
                            rng.gen_range(0.2..0.6),
                            rng.gen_range(0.2..0.6),
                        )
                    })
                    .collect::<Result<_>>()?;
                let weights = LossWeights::default();
                check_model(
                    &mut head,
                    &input,
                    &mut |h, x| Ok(head_loss(&h.forward(x)?, &gts, &weights)?.0.total),
                    &mut |h, x| {
                        let maps = h.forward(x)?;
                        let (_, g) = head_loss(&maps, &gts, &weights)?;
                        h.backward(&g)
                    },
                )
            }
        }
        other => Err(Error::contract(format!("unknown gradcheck component `{other}`"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentReport {
    pub component: String,
    pub seeds: u64,
    pub checked: usize,
    pub kinks: usize,
    pub max_rel_error: f64,
    pub worst: String,
    pub tolerance: f64,
    pub passed: bool,
}

/// Checks `component` at seeds `0..seeds` and keeps the worst entry.
pub fn run_component(component: &str, seeds: u64) -> Result<ComponentReport> {
    let mut worst = Worst::new();
    let (mut checked, mut kinks) = (0, 0);
    for seed in 0..seeds {
        let w = check_component(component, seed)?;
        checked += w.checked;
        kinks += w.kinks;
        if w.error > worst.error || w.error.is_nan() {
            worst = Worst {
                location: format!("seed {seed} {}", w.location),
                ..w
            };
        }
    }
    let tol = tolerance(component);
    Ok(ComponentReport {
        component: component.to_string(),
        seeds,
        checked,
        kinks,
        max_rel_error: worst.error,
        worst: worst.location,
        tolerance: tol,
        passed: worst.error < tol,
    })
}

pub fn run_suite(seeds: u64) -> Result<Vec<ComponentReport>> {
    let reports = crate::parallel::map_indexed(COMPONENTS.len(), |i| run_component(COMPONENTS[i], seeds));
    reports.into_iter().collect()
}

pub fn format_reports(reports: &[ComponentReport]) -> String {
    let mut out = format!(
        "{:<24} {:>6} {:>9} {:>6} {:>12} {:>9}  {}\n",
        "component", "seeds", "entries", "kinks", "max_rel_err", "tol", "status"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<24} {:>6} {:>9} {:>6} {:>12.3e} {:>9.0e}  {}",
            r.component,
            r.seeds,
            r.checked,
            r.kinks,
            r.max_rel_error,
            r.tolerance,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn every_component_passes_one_seed() {
        for c in COMPONENTS {
            let w = check_component(c, 0).unwrap();
            assert!(w.checked > 0);
            assert!(w.error < tolerance(c), "{c}: {} at {}", w.error, w.location);
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        struct Broken(Conv2d);
        impl HasParams for Broken {
            fn visit_params(&self, p: &str, f: &mut dyn FnMut(&str, &Param)) {
                self.0.visit_params(p, f)
            }
            fn visit_params_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Param)) {
                self.0.visit_params_mut(p, f)
            }
        }
        impl Layer for Broken {
            fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
                self.0.forward(x)
            }
            fn backward(&mut self, g: &Tensor4) -> Result<Tensor4> {
                Ok(self.0.backward(g)?.map(|v| 1.01 * v))
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut l = Broken(Conv2d::new(ConvSpec::new(2, 2, 3), &mut rng));
        let x = Tensor4::random_uniform(Shape4::new(1, 2, 4, 4), -1.0, 1.0, &mut rng);
        let r = Tensor4::random_uniform(Shape4::new(1, 2, 4, 4), -1.0, 1.0, &mut rng);
        let w = check_layer(&mut l, &x, &r).unwrap();
        assert!(w.error > 5e-3 && w.location.starts_with("input"));
        assert_eq!(w.kinks, 0);
    }
}
