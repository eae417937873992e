//! Kernel timing: naive-loop oracles against the optimized paths.

use crate::deform::{deform_conv_forward, deform_conv_forward_naive, DeformConv2d};
use crate::error::{Error, Result};
use crate::gradcheck::randomize_sampling;
use crate::tensor::{conv2d_forward, conv2d_forward_naive, ConvSpec, Shape4, Tensor4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::fmt::Write as _;
use std::time::Instant;

/// Largest allowed gap between optimized and naive outputs.
pub const EQUIVALENCE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchCase {
    pub input: Shape4,
    pub out_channels: usize,
    pub kernel: usize,
}

/// Default sizes; the first conv case is the `(8,32,12,12)×(32,32,3,3)` reference.
pub fn default_cases() -> Vec<BenchCase> {
    vec![
        BenchCase { input: Shape4::new(8, 32, 12, 12), out_channels: 32, kernel: 3 },
        BenchCase { input: Shape4::new(8, 32, 12, 12), out_channels: 16, kernel: 1 },
        BenchCase { input: Shape4::new(2, 16, 24, 24), out_channels: 16, kernel: 3 },
        BenchCase { input: Shape4::new(1, 8, 48, 48), out_channels: 8, kernel: 5 },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub kernel: String,
    pub dims: String,
    pub naive_ms: f64,
    pub optimized_ms: f64,
    pub speedup: f64,
    pub max_abs_diff: f64,
}

fn time_ms<T>(reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<f64> {
    let start = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(f()?);
    }
    Ok(start.elapsed().as_secs_f64() * 1e3 / reps as f64)
}

fn dims(c: &BenchCase) -> String {
    let s = c.input;
    format!(
        "({},{},{},{})x({},{},{},{})",
        s.batch, s.channels, s.height, s.width, c.out_channels, s.channels, c.kernel, c.kernel
    )
}

/// Numeric error unless `gap` is within [`EQUIVALENCE_TOL`].
pub fn equivalence_guard(kernel: &str, case: &BenchCase, gap: f64) -> Result<()> {
    if gap <= EQUIVALENCE_TOL {
        return Ok(());
    }
    Err(Error::Numeric(format!(
        "{kernel} {}: optimized output differs from the naive oracle by {gap:e}; refusing to time",
        dims(case)
    )))
}

/// Checks equivalence for every case first, then times them.
///
/// Returns a numeric error, and no timings, if any optimized output strays
/// from its oracle by more than [`EQUIVALENCE_TOL`].
pub fn run_bench(cases: &[BenchCase], reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prepared = Vec::new();
    for c in cases {
        let spec = ConvSpec::new(c.input.channels, c.out_channels, c.kernel);
        spec.validate()?;
        let x = Tensor4::random_uniform(c.input, -1.0, 1.0, &mut rng);
        let w = Tensor4::random_uniform(spec.weight_shape(), -0.5, 0.5, &mut rng);
        let bias: Vec<f64> = (0..c.out_channels).map(|i| 0.01 * i as f64).collect();
        let mut deform = DeformConv2d::new(spec, &mut rng);
        randomize_sampling(&mut deform, 0.2, &mut rng);

        let conv_gap = conv2d_forward(&x, &spec, &w, &bias)?.max_abs_diff(&conv2d_forward_naive(&x, &spec, &w, &bias)?);
        let deform_gap = deform_conv_forward(&x, &deform)?.max_abs_diff(&deform_conv_forward_naive(&x, &deform)?);
        equivalence_guard("conv2d", c, conv_gap)?;
        equivalence_guard("deform_conv", c, deform_gap)?;
        prepared.push((c, spec, x, w, bias, deform, conv_gap, deform_gap));
    }
    let reps = reps.max(1);
    let mut rows = Vec::new();
    for (c, spec, x, w, bias, deform, conv_gap, deform_gap) in &prepared {
        let naive = time_ms(reps, || conv2d_forward_naive(x, spec, w, bias))?;
        let fast = time_ms(reps, || conv2d_forward(x, spec, w, bias))?;
        rows.push(BenchRow {
            kernel: "conv2d".into(),
            dims: dims(c),
            naive_ms: naive,
            optimized_ms: fast,
            speedup: naive / fast,
            max_abs_diff: *conv_gap,
        });
        let naive = time_ms(reps, || deform_conv_forward_naive(x, deform))?;
        let fast = time_ms(reps, || deform_conv_forward(x, deform))?;
        rows.push(BenchRow {
            kernel: "deform_conv".into(),
            dims: dims(c),
            naive_ms: naive,
            optimized_ms: fast,
            speedup: naive / fast,
            max_abs_diff: *deform_gap,
        });
    }
    Ok(rows)
}

pub fn format_rows(rows: &[BenchRow]) -> String {
    let mut out = format!(
        "{:<12} {:<28} {:>10} {:>10} {:>8} {:>10}\n",
        "kernel", "dims", "naive_ms", "opt_ms", "speedup", "max_diff"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<12} {:<28} {:>10.3} {:>10.3} {:>7.2}x {:>10.1e}",
            r.kernel, r.dims, r.naive_ms, r.optimized_ms, r.speedup, r.max_abs_diff
        );
    }
    out
}

pub fn rows_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("kernel,dims,naive_ms,optimized_ms,speedup,max_abs_diff\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},\"{}\",{},{},{},{}",
            r.kernel, r.dims, r.naive_ms, r.optimized_ms, r.speedup, r.max_abs_diff
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_bench_reports_both_kernels() {
        let cases = [BenchCase { input: Shape4::new(1, 2, 5, 5), out_channels: 2, kernel: 3 }];
        let rows = run_bench(&cases, 1, 0).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.max_abs_diff <= EQUIVALENCE_TOL && r.naive_ms >= 0.0));
        assert_eq!(rows_csv(&rows).lines().count(), 3);
    }

    #[test]
    fn guard_refuses_divergent_kernels() {
        let c = default_cases()[0];
        assert!(equivalence_guard("conv2d", &c, 0.0).is_ok());
        let err = equivalence_guard("conv2d", &c, 1e-3).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)) && err.to_string().contains("refusing"));
        assert!(equivalence_guard("conv2d", &c, f64::NAN).is_err());
    }

    #[test]
    fn even_kernel_rejected_before_timing() {
        let cases = [BenchCase { input: Shape4::new(1, 2, 5, 5), out_channels: 2, kernel: 2 }];
        assert!(run_bench(&cases, 1, 0).is_err());
    }
}
