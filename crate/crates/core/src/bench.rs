//! Timing of the dense filter gradient against the sparse kernel.
//!
//! The approximate path is timed in two parts: the kernel itself, and the
//! layout transposes it needs (activations NCHW to NHWC, filter gradient
//! CoKkCi to KkCiCo), reported together as `transpose_us`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gradcheck::rel_err;
use crate::kernels::{approx_filter_grad, conv2d_filter_grad_dense, sparsify_output_grad, ConvGeometry};
use crate::tensor::{
    transpose_activations, transpose_activations_into, transpose_filter, transpose_filter_into, FilterLayout,
    FilterTensor, Layout, Tensor4,
};

/// Agreement required between the kernel and the dense oracle before timing.
pub const GATE_TOL: f64 = 1e-5;

/// One benchmark shape. Convolutions are stride 1 with "same" padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BenchCase {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub iters: usize,
    pub warmup: usize,
}

impl BenchCase {
    pub fn new(n: usize, ci: usize, h: usize, w: usize, co: usize, k: usize) -> Self {
        BenchCase { n, ci, h, w, co, k, iters: 7, warmup: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.n, self.ci, self.h, self.w, self.co, self.k].contains(&0) {
            return Err(Error::invalid(format!("{self}: all dimensions must be positive")));
        }
        if self.iters < 5 {
            return Err(Error::invalid(format!("{self}: iters must be at least 5")));
        }
        if self.k % 2 == 0 {
            return Err(Error::invalid(format!("{self}: sparse kernel needs an odd filter size")));
        }
        Ok(())
    }
}

impl fmt::Display for BenchCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}x{}x{}", self.n, self.ci, self.h, self.w, self.co, self.k)
    }
}

/// Parses `NxCIxHxWxCOxK`.
impl FromStr for BenchCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split('x')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::invalid(format!("bad case {s:?}; expected NxCIxHxWxCOxK")))?;
        match parts[..] {
            [n, ci, h, w, co, k] => Ok(BenchCase::new(n, ci, h, w, co, k)),
            _ => Err(Error::invalid(format!("bad case {s:?}; expected NxCIxHxWxCOxK"))),
        }
    }
}

/// Representative conv shapes from the evaluated networks.
pub fn default_cases() -> Vec<BenchCase> {
    vec![
        BenchCase::new(128, 64, 16, 16, 64, 3),
        BenchCase::new(128, 16, 32, 32, 16, 3),
        BenchCase::new(128, 32, 16, 16, 32, 3),
        BenchCase::new(128, 64, 8, 8, 64, 3),
        BenchCase::new(128, 64, 16, 16, 64, 5),
        BenchCase::new(128, 3, 32, 32, 64, 5),
    ]
}

/// Medians in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchResult {
    pub dense_us: f64,
    pub approx_kernel_us: f64,
    pub transpose_us: f64,
    pub approx_total_us: f64,
    pub speedup: f64,
}

pub fn median(xs: &mut [f64]) -> f64 {
    assert!(!xs.is_empty());
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

fn time_us(f: impl FnOnce() -> Result<()>) -> Result<f64> {
    let start = Instant::now();
    f()?;
    Ok(start.elapsed().as_secs_f64() * 1e6)
}

/// Compares the sparse kernel against the dense gradient of the densified
/// sparse output gradient, accumulated in `f64`.
pub fn oracle_gate(input: &Tensor4<f32>, d_out: &Tensor4<f32>, k: usize) -> Result<f64> {
    let g = ConvGeometry::same(k);
    let nhwc = transpose_activations(input, Layout::Nhwc);
    let got = transpose_filter(&approx_filter_grad(&nhwc, d_out, k, g.pad)?, FilterLayout::KkCiCo);
    let dense_sparse = sparsify_output_grad(d_out)?.densify();
    let want = conv2d_filter_grad_dense(&input.cast::<f64>(), &dense_sparse.cast::<f64>(), k, g)?;
    let got: Vec<f64> = got.data().iter().map(|&v| v as f64).collect();
    Ok(rel_err(&got, want.data()))
}

pub fn run_bench(case: BenchCase, seed: u64) -> Result<BenchResult> {
    case.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |n, c| Tensor4::from_fn(n, c, case.h, case.w, Layout::Nchw, |_, _, _, _| rng.random_range(-1.0f32..1.0));
    let input = fill(case.n, case.ci);
    let d_out = fill(case.n, case.co);
    let g = ConvGeometry::same(case.k);

    let err = oracle_gate(&input, &d_out, case.k)?;
    if err >= GATE_TOL {
        return Err(Error::Check(format!(
            "{case}: sparse kernel disagrees with dense oracle (rel err {err:e})"
        )));
    }

    // layout buffers are allocated once: fresh multi-megabyte allocations
    // would add page-fault time that says nothing about the transposes
    let mut nhwc = Tensor4::zeros(case.n, case.ci, case.h, case.w, Layout::Nhwc);
    let mut df = FilterTensor::zeros(case.k, case.ci, case.co, FilterLayout::KkCiCo);
    let (mut dense, mut kernel, mut transpose) = (Vec::new(), Vec::new(), Vec::new());
    for it in 0..case.warmup + case.iters {
        let d = time_us(|| conv2d_filter_grad_dense(&input, &d_out, case.k, g).map(drop))?;
        let t_act = time_us(|| {
            transpose_activations_into(&input, &mut nhwc);
            Ok(())
        })?;
        let mut sparse = None;
        let kern = time_us(|| {
            sparse = Some(approx_filter_grad(&nhwc, &d_out, case.k, g.pad)?);
            Ok(())
        })?;
        let sparse = sparse.expect("set above");
        let t_filt = time_us(|| {
            transpose_filter_into(&sparse, &mut df);
            Ok(())
        })?;
        if it >= case.warmup {
            dense.push(d);
            kernel.push(kern);
            transpose.push(t_act + t_filt);
        }
    }
    let dense_us = median(&mut dense);
    let approx_kernel_us = median(&mut kernel);
    let transpose_us = median(&mut transpose);
    let approx_total_us = approx_kernel_us + transpose_us;
    Ok(BenchResult {
        dense_us,
        approx_kernel_us,
        transpose_us,
        approx_total_us,
        speedup: dense_us / approx_total_us,
    })
}

pub const CSV_HEADER: &str =
    "n,ci,h,w,co,k,iters,warmup,dense_us,approx_kernel_us,transpose_us,approx_total_us,speedup,error";

/// Runs every case and writes one CSV row per case; failed cases get empty
/// timing columns and the error text in the last column.
pub fn sweep(cases: &[BenchCase], seed: u64, out: &mut impl Write) -> Result<Vec<(BenchCase, Result<BenchResult>)>> {
    writeln!(out, "{CSV_HEADER}")?;
    let mut results = Vec::with_capacity(cases.len());
    for &case in cases {
        let res = run_bench(case, seed);
        let shape = format!(
            "{},{},{},{},{},{},{},{}",
            case.n, case.ci, case.h, case.w, case.co, case.k, case.iters, case.warmup
        );
        match &res {
            Ok(r) => writeln!(
                out,
                "{shape},{:.1},{:.1},{:.1},{:.1},{:.3},",
                r.dense_us, r.approx_kernel_us, r.transpose_us, r.approx_total_us, r.speedup
            )?,
            Err(e) => writeln!(out, "{shape},,,,,,\"{}\"", e.to_string().replace('"', "'"))?,
        }
        results.push((case, res));
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchCase {
        BenchCase { iters: 5, warmup: 0, ..BenchCase::new(2, 3, 6, 5, 4, 3) }
    }

    #[test]
    fn totals_are_sums() {
        let r = run_bench(small(), 1).unwrap();
        assert_eq!(r.approx_total_us, r.approx_kernel_us + r.transpose_us);
        assert_eq!(r.speedup, r.dense_us / r.approx_total_us);
    }

    #[test]
    fn invalid_cases_rejected() {
        assert!(run_bench(BenchCase { iters: 4, ..small() }, 0).is_err());
        assert!(run_bench(BenchCase { k: 2, ..small() }, 0).is_err());
        assert!(run_bench(BenchCase { n: 0, ..small() }, 0).is_err());
    }

    #[test]
    fn case_parsing() {
        let c: BenchCase = "128x64x16x16x64x3".parse().unwrap();
        assert_eq!(c, BenchCase::new(128, 64, 16, 16, 64, 3));
        assert_eq!(c.to_string().parse::<BenchCase>().unwrap(), c);
        assert!("1x2x3".parse::<BenchCase>().is_err());
        assert!("1x2x3x4x5xq".parse::<BenchCase>().is_err());
    }

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn sweep_rows() {
        let mut buf = Vec::new();
        sweep(&[], 0, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{CSV_HEADER}\n"));

        let mut buf = Vec::new();
        let bad = BenchCase { k: 4, ..small() };
        let res = sweep(&[small(), bad, small()], 0, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(res[1].1.is_err());
        assert!(lines[2].ends_with('"') && lines[2].contains(",,,,,,"));
        assert!(lines[1].ends_with(','));
        for l in &lines {
            assert_eq!(l.matches(',').count(), 13, "{l}");
        }
    }

    #[test]
    fn gate_accepts_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut fill = |c| Tensor4::from_fn(3, c, 7, 7, Layout::Nchw, |_, _, _, _| rng.random_range(-1.0f32..1.0));
        let (x, dy) = (fill(4), fill(5));
        assert!(oracle_gate(&x, &dy, 5).unwrap() < GATE_TOL);
    }
}
