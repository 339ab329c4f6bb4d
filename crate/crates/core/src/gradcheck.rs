//! Finite-difference checks of the exact backward paths.
//!
//! Each check builds a small layer (or network) at the precision under test,
//! runs its analytic backward pass for the scalar loss `sum(r * y)` with a
//! random projection `r`, and compares against central differences of the
//! same function evaluated at `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::kernels::{conv2d_forward, ConvGeometry};
use crate::nn::layers::{BackwardCtx, BatchNorm, Conv, Dense, GlobalAvgPool, Layer, MaxPool, ParamRef, Relu, Residual, Shortcut};
use crate::nn::loss::softmax_cross_entropy;
use crate::nn::model::{build_model, ModelName, Network};
use crate::real::Real;
use crate::tensor::{FilterLayout, FilterTensor, Layout, Tensor4};

/// Relative-error bound for analytic gradients computed in `f32`.
pub const TOL_F32: f64 = 1e-3;
/// Relative-error bound for analytic gradients computed in `f64`.
pub const TOL_F64: f64 = 1e-6;

const STEP: f64 = 1e-5;
/// Coordinates probed per array; larger arrays are sampled.
const MAX_PROBES: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub precision: Precision,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Flip the sign of the first check's analytic gradient.
    pub inject_fault: bool,
}

/// `max |a - b| / max |b|`, the error measure used by every check.
pub fn rel_err(analytic: &[f64], reference: &[f64]) -> f64 {
    let num = analytic
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let den = reference.iter().map(|b| b.abs()).fold(0.0, f64::max);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

#[derive(Debug, Clone, Copy)]
enum Case {
    Conv { k: usize, ci: usize, co: usize, stride: usize, pad: usize, hw: usize },
    BatchNorm { c: usize, hw: usize },
    Relu,
    MaxPool,
    GlobalAvgPool,
    Dense,
    Residual,
}

impl Case {
    fn name(&self) -> String {
        match self {
            Case::Conv { k, stride, pad, .. } => format!("conv k{k} s{stride} p{pad}"),
            Case::BatchNorm { .. } => "batchnorm".into(),
            Case::Relu => "relu".into(),
            Case::MaxPool => "maxpool 3/2".into(),
            Case::GlobalAvgPool => "global_avg_pool".into(),
            Case::Dense => "dense".into(),
            Case::Residual => "residual block (strided shortcut)".into(),
        }
    }

    fn input_dims(&self) -> [usize; 4] {
        match *self {
            Case::Conv { ci, hw, .. } => [2, ci, hw, hw],
            Case::BatchNorm { c, hw } => [4, c, hw, hw],
            Case::Relu | Case::GlobalAvgPool => [2, 3, 4, 4],
            Case::MaxPool => [2, 2, 5, 5],
            Case::Dense => [3, 3, 2, 2],
            Case::Residual => [2, 4, 6, 6],
        }
    }

    fn build<T: Real>(&self, rng: &mut ChaCha8Rng) -> Layer<T> {
        match *self {
            Case::Conv { k, ci, co, stride, pad, .. } => {
                Layer::Conv(Conv::new(1, k, ci, co, ConvGeometry { stride, pad }, rng))
            }
            Case::BatchNorm { c, .. } => Layer::BatchNorm(BatchNorm::new("bn".into(), c)),
            Case::Relu => Layer::Relu(Relu::default()),
            Case::MaxPool => Layer::MaxPool(MaxPool::new(3, 2, 1)),
            Case::GlobalAvgPool => Layer::GlobalAvgPool(GlobalAvgPool::default()),
            Case::Dense => Layer::Dense(Dense::new("dense".into(), 12, 5, rng)),
            Case::Residual => {
                let g2 = ConvGeometry { stride: 2, pad: 1 };
                let body = vec![
                    Layer::Conv(Conv::new(1, 3, 4, 8, g2, rng)),
                    Layer::BatchNorm(BatchNorm::new("bn1".into(), 8)),
                    Layer::Relu(Relu::default()),
                    Layer::Conv(Conv::new(2, 3, 8, 8, ConvGeometry::same(3), rng)),
                    Layer::BatchNorm(BatchNorm::new("bn2".into(), 8)),
                ];
                Layer::Residual(Residual::new(body, Shortcut { stride: 2, in_c: 4, out_c: 8 }))
            }
        }
    }
}

/// Something with a differentiable forward pass and parameters.
trait Probe<T: Real> {
    fn fwd(&mut self, x: Tensor4<T>) -> Result<Tensor4<T>>;
    fn bwd(&mut self, dy: Tensor4<T>) -> Result<Option<Tensor4<T>>>;
    fn params(&mut self) -> Vec<ParamRef<'_, T>>;
}

impl<T: Real> Probe<T> for Layer<T> {
    fn fwd(&mut self, x: Tensor4<T>) -> Result<Tensor4<T>> {
        self.forward(x, true)
    }
    fn bwd(&mut self, dy: Tensor4<T>) -> Result<Option<Tensor4<T>>> {
        self.backward(dy, &mut BackwardCtx::exact())
    }
    fn params(&mut self) -> Vec<ParamRef<'_, T>> {
        Layer::params(self)
    }
}

impl<T: Real> Probe<T> for Network<T> {
    fn fwd(&mut self, x: Tensor4<T>) -> Result<Tensor4<T>> {
        self.forward(x, true)
    }
    fn bwd(&mut self, dy: Tensor4<T>) -> Result<Option<Tensor4<T>>> {
        self.backward(dy, &mut BackwardCtx::exact())?;
        Ok(None)
    }
    fn params(&mut self) -> Vec<ParamRef<'_, T>> {
        Network::params(self)
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, [n, c, h, w]: [usize; 4]) -> Tensor4<f64> {
    Tensor4::from_fn(n, c, h, w, Layout::Nchw, |_, _, _, _| rng.random_range(-1.0..1.0))
}

fn probes(rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
    if len <= MAX_PROBES {
        (0..len).collect()
    } else {
        (0..MAX_PROBES).map(|_| rng.random_range(0..len)).collect()
    }
}

fn dot(r: &Tensor4<f64>, y: &Tensor4<f64>) -> f64 {
    r.data().iter().zip(y.data()).map(|(a, b)| a * b).sum()
}

/// Analytic gradients of `probe_t` at precision `T` against central
/// differences of `probe64`, which must compute the same function.
fn compare<T: Real, P: Probe<T>, Q: Probe<f64>>(
    probe_t: &mut P,
    probe64: &mut Q,
    x: &Tensor4<f64>,
    rng: &mut ChaCha8Rng,
    check_input: bool,
    fault: bool,
) -> Result<f64> {
    // identical parameters at both precisions
    let values: Vec<Vec<f64>> = probe_t
        .params()
        .into_iter()
        .map(|p| p.value.iter().map(|v| v.to_f64_lossy()).collect())
        .collect();
    for (p, v) in probe64.params().into_iter().zip(&values) {
        p.value.copy_from_slice(v);
    }

    let y = probe_t.fwd(x.cast())?;
    let r = random_tensor(rng, y.dims());
    let dx = probe_t.bwd(r.cast())?;
    let sign = if fault { -1.0 } else { 1.0 };
    let param_grads: Vec<Vec<f64>> = probe_t
        .params()
        .into_iter()
        .map(|p| p.grad.iter().map(|g| sign * g.to_f64_lossy()).collect())
        .collect();

    let loss_at = |probe: &mut Q, x: &Tensor4<f64>| -> Result<f64> { Ok(dot(&r, &probe.fwd(x.clone())?)) };

    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    if check_input {
        if let Some(dx) = dx {
            let mut xp = x.clone();
            for i in probes(rng, x.len()) {
                let orig = xp.data()[i];
                xp.data_mut()[i] = orig + STEP;
                let lp = loss_at(probe64, &xp)?;
                xp.data_mut()[i] = orig - STEP;
                let lm = loss_at(probe64, &xp)?;
                xp.data_mut()[i] = orig;
                analytic.push(sign * dx.data()[i].to_f64_lossy());
                numeric.push((lp - lm) / (2.0 * STEP));
            }
        }
    }
    for (pi, grads) in param_grads.iter().enumerate() {
        for i in probes(rng, grads.len()) {
            let orig = probe64.params()[pi].value[i];
            probe64.params()[pi].value[i] = orig + STEP;
            let lp = loss_at(probe64, x)?;
            probe64.params()[pi].value[i] = orig - STEP;
            let lm = loss_at(probe64, x)?;
            probe64.params()[pi].value[i] = orig;
            analytic.push(grads[i]);
            numeric.push((lp - lm) / (2.0 * STEP));
        }
    }
    Ok(rel_err(&analytic, &numeric))
}

fn check_case<T: Real>(case: Case, seed: u64, fault: bool) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer_t: Layer<T> = case.build(&mut rng);
    let mut layer64: Layer<f64> = case.build(&mut ChaCha8Rng::seed_from_u64(seed));
    // move batch-norm affine parameters away from (1, 0)
    for p in layer_t.params() {
        if p.value.len() <= 16 {
            for v in p.value.iter_mut() {
                *v = T::from_f64_lossy(rng.random_range(0.5..1.5));
            }
        }
    }
    let x = random_tensor(&mut rng, case.input_dims());
    compare(&mut layer_t, &mut layer64, &x, &mut rng, true, fault)
}

fn check_network<T: Real>(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net_t: Network<T> = build_model(ModelName::Cnn2, (3, 8, 8), 10, seed)?;
    let mut net64: Network<f64> = build_model(ModelName::Cnn2, (3, 8, 8), 10, seed)?;
    let x = random_tensor(&mut rng, [2, 3, 8, 8]);
    compare(&mut net_t, &mut net64, &x, &mut rng, false, false)
}

fn check_softmax<T: Real>(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = random_tensor(&mut rng, [4, 6, 1, 1]).map(|v| 3.0 * v);
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..6)).collect();
    let (_, grad) = softmax_cross_entropy(&logits.cast::<T>(), &labels)?;
    let mut numeric = Vec::new();
    let mut lp = logits.clone();
    for i in 0..logits.len() {
        let orig = lp.data()[i];
        lp.data_mut()[i] = orig + STEP;
        let a = softmax_cross_entropy(&lp, &labels)?.0;
        lp.data_mut()[i] = orig - STEP;
        let b = softmax_cross_entropy(&lp, &labels)?.0;
        lp.data_mut()[i] = orig;
        numeric.push((a - b) / (2.0 * STEP));
    }
    let analytic: Vec<f64> = grad.data().iter().map(|g| g.to_f64_lossy()).collect();
    Ok(rel_err(&analytic, &numeric))
}

/// Forward convolution against direct summation over every tap.
fn check_conv_forward<T: Real>(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = ConvGeometry { stride: 2, pad: 1 };
    let (n, ci, co, h, w, k) = (2, 3, 4, 7, 6, 3);
    let x = random_tensor(&mut rng, [n, ci, h, w]);
    let f = FilterTensor::from_vec(k, ci, co, FilterLayout::KkCiCo, (0..k * k * ci * co).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let y = conv2d_forward(&x.cast::<T>(), &f.cast::<T>(), g)?;
    let mut want = Vec::with_capacity(y.len());
    for i in 0..n {
        for o in 0..co {
            for r in 0..y.h() {
                for c in 0..y.w() {
                    let mut s = 0.0f64;
                    for kh in 0..k {
                        for kw in 0..k {
                            let ih = (r * g.stride + kh) as isize - g.pad as isize;
                            let iw = (c * g.stride + kw) as isize - g.pad as isize;
                            if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                continue;
                            }
                            for cc in 0..ci {
                                s += x.get(i, cc, ih as usize, iw as usize) * f.get(kh, kw, cc, o);
                            }
                        }
                    }
                    want.push(s);
                }
            }
        }
    }
    let got: Vec<f64> = y.data().iter().map(|v| v.to_f64_lossy()).collect();
    Ok(rel_err(&got, &want))
}

fn cases() -> Vec<Case> {
    vec![
        Case::Conv { k: 3, ci: 3, co: 4, stride: 1, pad: 1, hw: 5 },
        Case::Conv { k: 3, ci: 3, co: 4, stride: 2, pad: 1, hw: 6 },
        Case::Conv { k: 5, ci: 2, co: 3, stride: 1, pad: 2, hw: 6 },
        Case::Conv { k: 1, ci: 4, co: 2, stride: 1, pad: 0, hw: 3 },
        Case::BatchNorm { c: 3, hw: 3 },
        Case::Relu,
        Case::MaxPool,
        Case::GlobalAvgPool,
        Case::Dense,
        Case::Residual,
    ]
}

fn run_precision<T: Real>(precision: Precision, opts: GradcheckOptions, out: &mut Vec<CheckResult>) -> Result<()> {
    let tolerance = match precision {
        Precision::F32 => TOL_F32,
        Precision::F64 => TOL_F64,
    };
    let mut push = |name: String, err: f64| {
        out.push(CheckResult {
            name,
            precision,
            max_rel_err: err,
            tolerance,
            passed: err < tolerance,
        })
    };
    push("conv forward (direct sum)".into(), check_conv_forward::<T>(opts.seed)?);
    for (i, case) in cases().into_iter().enumerate() {
        let fault = opts.inject_fault && i == 0;
        push(case.name(), check_case::<T>(case, opts.seed.wrapping_add(i as u64 + 1), fault)?);
    }
    push("softmax cross-entropy".into(), check_softmax::<T>(opts.seed)?);
    push("cnn2 network (8x8)".into(), check_network::<T>(opts.seed)?);
    Ok(())
}

/// Runs every check at `f32` (unless `f64_only`) and at `f64`.
pub fn run_all(opts: GradcheckOptions, f64_only: bool) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    if !f64_only {
        run_precision::<f32>(Precision::F32, opts, &mut out)?;
    }
    run_precision::<f64>(Precision::F64, opts, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_basics() {
        assert_eq!(rel_err(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(rel_err(&[1.0, 2.5], &[1.0, 2.0]), 0.25);
        assert_eq!(rel_err(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn every_check_passes_at_both_precisions() {
        let results = run_all(GradcheckOptions::default(), false).unwrap();
        for r in &results {
            assert!(r.passed, "{} {:?}: {:e}", r.name, r.precision, r.max_rel_err);
        }
        assert_eq!(results.len(), 2 * (cases().len() + 3));
    }

    #[test]
    fn sign_flip_is_detected() {
        let opts = GradcheckOptions { seed: 0, inject_fault: true };
        let results = run_all(opts, true).unwrap();
        assert!(results.iter().any(|r| !r.passed));
    }
}
