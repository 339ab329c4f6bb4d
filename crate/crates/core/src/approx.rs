//! Filter-gradient approximation methods.
//!
//! A method decides how one conv layer's filter gradient is produced for one
//! batch: exactly, as zeros, as fresh Gaussian noise, or from the sparsified
//! output gradient via the patch-extraction kernel.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{approx_filter_grad_topk, conv2d_filter_grad_dense, ConvGeometry};
use crate::real::Real;
use crate::tensor::{transpose_activations, transpose_filter, FilterLayout, FilterTensor, Layout, Tensor4};

/// Method name as it appears in schedule files and on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Full,
    Zero,
    Random,
    TopK,
}

impl MethodKind {
    pub const ALL: [MethodKind; 4] = [MethodKind::Full, MethodKind::Zero, MethodKind::Random, MethodKind::TopK];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::Full => "full",
            MethodKind::Zero => "zero",
            MethodKind::Random => "random",
            MethodKind::TopK => "topk",
        }
    }

    pub fn is_approx(self) -> bool {
        self != MethodKind::Full
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method `{s}` (expected full, zero, random or topk)")))
    }
}

/// A fully parameterized method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum ApproxMethod {
    Full,
    Zero,
    Random { sigma: f64 },
    TopK { k: usize, scale: f64 },
}

impl ApproxMethod {
    pub fn kind(&self) -> MethodKind {
        match self {
            ApproxMethod::Full => MethodKind::Full,
            ApproxMethod::Zero => MethodKind::Zero,
            ApproxMethod::Random { .. } => MethodKind::Random,
            ApproxMethod::TopK { .. } => MethodKind::TopK,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ApproxMethod::Random { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(Error::invalid(format!("random sigma must be positive, got {sigma}")))
            }
            ApproxMethod::TopK { k, .. } if k == 0 => Err(Error::invalid("top-k count must be at least 1")),
            ApproxMethod::TopK { scale, .. } if !(scale > 0.0 && scale.is_finite()) => {
                Err(Error::invalid(format!("top-k scale must be positive, got {scale}")))
            }
            _ => Ok(()),
        }
    }
}

/// Parameters attached to a [`MethodKind`] when it is resolved for training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodParams {
    pub sigma: f64,
    pub k: usize,
    pub scale: f64,
}

impl MethodParams {
    /// `sigma = scale = 1 / batch_size`, `k = 1`.
    pub fn for_batch(batch_size: usize) -> Self {
        let inv = 1.0 / batch_size.max(1) as f64;
        MethodParams {
            sigma: inv,
            k: 1,
            scale: inv,
        }
    }

    pub fn resolve(&self, kind: MethodKind) -> ApproxMethod {
        match kind {
            MethodKind::Full => ApproxMethod::Full,
            MethodKind::Zero => ApproxMethod::Zero,
            MethodKind::Random => ApproxMethod::Random { sigma: self.sigma },
            MethodKind::TopK => ApproxMethod::TopK {
                k: self.k,
                scale: self.scale,
            },
        }
    }
}

/// Deterministic random stream keyed by `(seed, layer, step)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub layer: u32,
    pub step: u64,
}

impl RngStream {
    pub fn new(seed: u64, layer: usize, step: u64) -> Self {
        RngStream {
            seed,
            layer: layer as u32,
            step,
        }
    }

    /// ChaCha generator keyed by the seed, on a stream selected by
    /// `(layer, step)`. Steps wrap at 2^40.
    pub fn generator(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((self.layer as u64) << 40) | (self.step & ((1 << 40) - 1)));
        rng
    }
}

/// I.i.d. `Normal(0, sigma^2)` filter of shape `k x k x ci x co` (`KkCiCo`).
pub fn random_filter_grad<T: Real>(
    k: usize,
    ci: usize,
    co: usize,
    sigma: f64,
    rng: &RngStream,
) -> Result<FilterTensor<T>> {
    let normal = Normal::new(0.0, sigma)
        .ok()
        .filter(|_| sigma > 0.0)
        .ok_or_else(|| Error::invalid(format!("sigma must be positive, got {sigma}")))?;
    let mut gen = rng.generator();
    let data = (0..k * k * ci * co)
        .map(|_| T::from_f64_lossy(normal.sample(&mut gen)))
        .collect();
    FilterTensor::from_vec(k, ci, co, FilterLayout::KkCiCo, data)
}

/// Filter gradient as produced, plus the method that actually ran.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterGrad<T> {
    pub grad: FilterTensor<T>,
    pub applied: MethodKind,
}

/// Whether the patch-extraction kernel supports this layer geometry.
pub fn sparse_path_supported(k: usize, g: ConvGeometry) -> bool {
    g.stride == 1 && (g.pad == 0 || (k % 2 == 1 && g.pad == (k - 1) / 2))
}

/// Filter gradient of one conv layer for one batch, in `KkCiCo` layout.
///
/// `input` and `d_out` are NCHW. `rng` is only consulted by `Random`. A
/// `TopK` request on a geometry the sparse kernel cannot handle falls back
/// to the exact gradient; `applied` reports `Full` in that case.
pub fn compute_filter_grad<T: Real>(
    method: &ApproxMethod,
    input: &Tensor4<T>,
    d_out: &Tensor4<T>,
    k: usize,
    g: ConvGeometry,
    rng: Option<&RngStream>,
) -> Result<FilterGrad<T>> {
    method.validate()?;
    let (ci, co) = (input.c(), d_out.c());
    let grad = match *method {
        ApproxMethod::Full => conv2d_filter_grad_dense(input, d_out, k, g)?,
        ApproxMethod::Zero => FilterTensor::zeros(k, ci, co, FilterLayout::KkCiCo),
        ApproxMethod::Random { sigma } => {
            let rng = rng.ok_or_else(|| Error::invalid("random method needs an rng stream"))?;
            random_filter_grad(k, ci, co, sigma, rng)?
        }
        ApproxMethod::TopK { k: top, scale } => {
            if !sparse_path_supported(k, g) {
                log::warn!(
                    "topk fallback to full: k={k} stride={} pad={} unsupported by sparse kernel",
                    g.stride,
                    g.pad
                );
                return Ok(FilterGrad {
                    grad: conv2d_filter_grad_dense(input, d_out, k, g)?,
                    applied: MethodKind::Full,
                });
            }
            let input_nhwc = transpose_activations(input, Layout::Nhwc);
            let sparse = approx_filter_grad_topk(&input_nhwc, d_out, k, g.pad, top)?;
            let mut grad = transpose_filter(&sparse, FilterLayout::KkCiCo);
            if scale != 1.0 {
                grad.scale(T::from_f64_lossy(scale));
            }
            grad
        }
    };
    Ok(FilterGrad {
        grad,
        applied: method.kind(),
    })
}
