//! Convolution kernels.
//!
//! The three dense convolutions of a conv layer (forward, input gradient,
//! filter gradient) are lowered to matrix products over an im2col patch
//! matrix whose rows are ordered `(kh, kw, ci)`. With that row order a
//! `KkCiCo` filter is already the `(k*k*ci) x co` weight matrix, so no filter
//! reshuffling is needed on the dense path.
//!
//! The sparse path replaces the filter-gradient convolution: each
//! `(batch, output channel)` plane of the output gradient keeps only its
//! largest-magnitude position, valued at the plane sum, which turns the
//! convolution into one scaled `k x k x ci` patch read per plane.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{FilterLayout, FilterTensor, Layout, Tensor4};

/// Batch items per partial sum in the dense filter gradient. Fixed so the
/// reduction order does not depend on the thread count.
const FILTER_GRAD_GROUP: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        Ok(ConvGeometry { stride, pad })
    }

    /// Stride 1 with `(k - 1) / 2` padding.
    pub fn same(k: usize) -> Self {
        ConvGeometry {
            stride: 1,
            pad: (k.saturating_sub(1)) / 2,
        }
    }

    /// Output extent along one spatial axis (floor division on the stride).
    pub fn output_size(&self, input: usize, k: usize) -> Result<usize> {
        let padded = input + 2 * self.pad;
        if k == 0 || padded < k {
            return Err(Error::shape(format!(
                "filter {k} does not fit input {input} with pad {}",
                self.pad
            )));
        }
        Ok((padded - k) / self.stride + 1)
    }
}

/// Valid output-column range `[lo, hi)` whose input column
/// `o * stride + tap - pad` lands inside `[0, extent)`.
#[inline]
fn valid_range(out: usize, extent: usize, tap: usize, g: ConvGeometry) -> (usize, usize) {
    let s = g.stride;
    let lo = if g.pad > tap {
        (g.pad - tap).div_ceil(s)
    } else {
        0
    };
    if extent + g.pad <= tap {
        return (0, 0);
    }
    let hi = ((extent - 1 + g.pad - tap) / s + 1).min(out);
    (lo.min(hi), hi)
}

struct Dims {
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

/// Fills `cols` (`(k*k*ci) x (ho*wo)`, row-major) from one NCHW image.
fn im2col<T: Real>(x: &[T], d: &Dims, g: ConvGeometry, cols: &mut [T]) {
    let p = d.ho * d.wo;
    for kh in 0..d.k {
        let (oh_lo, oh_hi) = valid_range(d.ho, d.h, kh, g);
        for kw in 0..d.k {
            let (ow_lo, ow_hi) = valid_range(d.wo, d.w, kw, g);
            for c in 0..d.ci {
                let row = &mut cols[((kh * d.k + kw) * d.ci + c) * p..][..p];
                let plane = &x[c * d.h * d.w..][..d.h * d.w];
                for oh in 0..d.ho {
                    let dst = &mut row[oh * d.wo..][..d.wo];
                    if oh < oh_lo || oh >= oh_hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let ih = oh * g.stride + kh - g.pad;
                    let src = &plane[ih * d.w..][..d.w];
                    dst[..ow_lo].fill(T::zero());
                    dst[ow_hi..].fill(T::zero());
                    if ow_lo == ow_hi {
                        continue;
                    }
                    if g.stride == 1 {
                        let start = ow_lo + kw - g.pad;
                        dst[ow_lo..ow_hi].copy_from_slice(&src[start..start + (ow_hi - ow_lo)]);
                    } else {
                        for ow in ow_lo..ow_hi {
                            dst[ow] = src[ow * g.stride + kw - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into one NCHW image (adjoint of `im2col`).
fn col2im<T: Real>(cols: &[T], d: &Dims, g: ConvGeometry, x: &mut [T]) {
    let p = d.ho * d.wo;
    for kh in 0..d.k {
        let (oh_lo, oh_hi) = valid_range(d.ho, d.h, kh, g);
        for kw in 0..d.k {
            let (ow_lo, ow_hi) = valid_range(d.wo, d.w, kw, g);
            for c in 0..d.ci {
                let row = &cols[((kh * d.k + kw) * d.ci + c) * p..][..p];
                let plane = &mut x[c * d.h * d.w..][..d.h * d.w];
                for oh in oh_lo..oh_hi {
                    let ih = oh * g.stride + kh - g.pad;
                    let src = &row[oh * d.wo..][..d.wo];
                    let dst = &mut plane[ih * d.w..][..d.w];
                    for ow in ow_lo..ow_hi {
                        dst[ow * g.stride + kw - g.pad] += src[ow];
                    }
                }
            }
        }
    }
}

fn conv_dims(h: usize, w: usize, ci: usize, k: usize, g: ConvGeometry) -> Result<Dims> {
    Ok(Dims {
        ci,
        h,
        w,
        k,
        ho: g.output_size(h, k)?,
        wo: g.output_size(w, k)?,
    })
}

/// Cross-correlation of an NCHW input with a `KkCiCo` filter.
pub fn conv2d_forward<T: Real>(
    input: &Tensor4<T>,
    filter: &FilterTensor<T>,
    g: ConvGeometry,
) -> Result<Tensor4<T>> {
    input.require_layout(Layout::Nchw, "conv2d_forward input")?;
    require_filter_layout(filter, FilterLayout::KkCiCo, "conv2d_forward filter")?;
    if input.c() != filter.ci() {
        return Err(Error::shape(format!(
            "conv2d_forward: input has {} channels, filter expects {}",
            input.c(),
            filter.ci()
        )));
    }
    let d = conv_dims(input.h(), input.w(), input.c(), filter.k(), g)?;
    let (co, r, p) = (filter.co(), d.k * d.k * d.ci, d.ho * d.wo);
    let mut out = Tensor4::zeros(input.n(), co, d.ho, d.wo, Layout::Nchw);
    if out.is_empty() {
        return Ok(out);
    }
    let fdata = filter.data();
    out.data_mut()
        .par_chunks_mut(co * p)
        .enumerate()
        .for_each_init(
            || vec![T::zero(); r * p],
            |cols, (n, y)| {
                im2col(input.item(n), &d, g, cols);
                // y (co x p) = f^T (co x r) * cols (r x p)
                T::gemm(co, r, p, T::one(), fdata, (1, co as isize), cols, (p as isize, 1), T::zero(), y, (p as isize, 1));
            },
        );
    Ok(out)
}

/// Gradient of the loss with respect to the layer input. `input_hw` is the
/// forward input's spatial size, which strided geometries cannot recover
/// from `d_out` alone.
pub fn conv2d_input_grad<T: Real>(
    d_out: &Tensor4<T>,
    filter: &FilterTensor<T>,
    g: ConvGeometry,
    input_hw: (usize, usize),
) -> Result<Tensor4<T>> {
    d_out.require_layout(Layout::Nchw, "conv2d_input_grad output gradient")?;
    require_filter_layout(filter, FilterLayout::KkCiCo, "conv2d_input_grad filter")?;
    if d_out.c() != filter.co() {
        return Err(Error::shape(format!(
            "conv2d_input_grad: output gradient has {} channels, filter produces {}",
            d_out.c(),
            filter.co()
        )));
    }
    let d = conv_dims(input_hw.0, input_hw.1, filter.ci(), filter.k(), g)?;
    if (d.ho, d.wo) != (d_out.h(), d_out.w()) {
        return Err(Error::shape(format!(
            "conv2d_input_grad: output gradient is {}x{}, geometry gives {}x{}",
            d_out.h(),
            d_out.w(),
            d.ho,
            d.wo
        )));
    }
    let (co, r, p) = (filter.co(), d.k * d.k * d.ci, d.ho * d.wo);
    let mut d_in = Tensor4::zeros(d_out.n(), d.ci, d.h, d.w, Layout::Nchw);
    if d_in.is_empty() {
        return Ok(d_in);
    }
    let fdata = filter.data();
    d_in.data_mut()
        .par_chunks_mut(d.ci * d.h * d.w)
        .enumerate()
        .for_each_init(
            || vec![T::zero(); r * p],
            |cols, (n, dx)| {
                // cols (r x p) = f (r x co) * dO_n (co x p)
                T::gemm(r, co, p, T::one(), fdata, (co as isize, 1), d_out.item(n), (p as isize, 1), T::zero(), cols, (p as isize, 1));
                col2im(cols, &d, g, dx);
            },
        );
    Ok(d_in)
}

/// Exact filter gradient `df = I * dO` in `KkCiCo` layout.
pub fn conv2d_filter_grad_dense<T: Real>(
    input: &Tensor4<T>,
    d_out: &Tensor4<T>,
    k: usize,
    g: ConvGeometry,
) -> Result<FilterTensor<T>> {
    input.require_layout(Layout::Nchw, "conv2d_filter_grad_dense input")?;
    d_out.require_layout(Layout::Nchw, "conv2d_filter_grad_dense output gradient")?;
    if input.n() != d_out.n() {
        return Err(Error::shape(format!(
            "conv2d_filter_grad_dense: input batch {} vs output gradient batch {}",
            input.n(),
            d_out.n()
        )));
    }
    let d = conv_dims(input.h(), input.w(), input.c(), k, g)?;
    if (d.ho, d.wo) != (d_out.h(), d_out.w()) {
        return Err(Error::shape(format!(
            "conv2d_filter_grad_dense: output gradient is {}x{}, geometry gives {}x{}",
            d_out.h(),
            d_out.w(),
            d.ho,
            d.wo
        )));
    }
    let (co, r, p) = (d_out.c(), k * k * d.ci, d.ho * d.wo);
    let n = input.n();
    let partials: Vec<Vec<T>> = (0..n.div_ceil(FILTER_GRAD_GROUP))
        .into_par_iter()
        .map(|grp| {
            let mut acc = vec![T::zero(); r * co];
            let mut cols = vec![T::zero(); r * p];
            let end = ((grp + 1) * FILTER_GRAD_GROUP).min(n);
            for item in grp * FILTER_GRAD_GROUP..end {
                im2col(input.item(item), &d, g, &mut cols);
                // acc (r x co) += cols (r x p) * dO_n^T (p x co)
                T::gemm(r, p, co, T::one(), &cols, (p as isize, 1), d_out.item(item), (1, p as isize), T::one(), &mut acc, (co as isize, 1));
            }
            acc
        })
        .collect();
    let mut df = vec![T::zero(); r * co];
    for part in &partials {
        for (a, &b) in df.iter_mut().zip(part) {
            *a += b;
        }
    }
    FilterTensor::from_vec(k, d.ci, co, FilterLayout::KkCiCo, df)
}

fn require_filter_layout<T: Real>(
    f: &FilterTensor<T>,
    layout: FilterLayout,
    what: &str,
) -> Result<()> {
    if f.layout() != layout {
        return Err(Error::shape(format!(
            "{what}: expected {layout:?} layout, got {:?}",
            f.layout()
        )));
    }
    Ok(())
}

/// One retained output-gradient position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseEntry<T> {
    pub row: usize,
    pub col: usize,
    pub value: T,
}

/// Sparsified output gradient: `k` entries per `(batch, channel)` plane.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOutputGrad<T = f32> {
    n: usize,
    co: usize,
    h: usize,
    w: usize,
    k: usize,
    entries: Vec<SparseEntry<T>>,
}

impl<T: Real> SparseOutputGrad<T> {
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn co(&self) -> usize {
        self.co
    }
    pub fn plane_hw(&self) -> (usize, usize) {
        (self.h, self.w)
    }
    pub fn per_plane(&self) -> usize {
        self.k
    }
    pub fn entries(&self) -> &[SparseEntry<T>] {
        &self.entries
    }

    /// Retained entries of plane `(n, c)`, in selection order.
    pub fn plane(&self, n: usize, c: usize) -> &[SparseEntry<T>] {
        let start = (n * self.co + c) * self.k;
        &self.entries[start..start + self.k]
    }

    /// Dense NCHW tensor holding only the retained entries.
    pub fn densify(&self) -> Tensor4<T> {
        let mut t = Tensor4::zeros(self.n, self.co, self.h, self.w, Layout::Nchw);
        for n in 0..self.n {
            for c in 0..self.co {
                for e in self.plane(n, c) {
                    t.set(n, c, e.row, e.col, e.value);
                }
            }
        }
        t
    }
}

/// Picks the `out.len()` largest-magnitude positions of a row-major plane,
/// each valued at `sum(plane) / out.len()`. Ties go to the smaller row-major
/// index; an all-zero plane selects from `(0, 0)` onward with value zero.
fn select_plane<T: Real>(plane: &[T], w: usize, out: &mut [SparseEntry<T>], scratch: &mut Vec<usize>) {
    let k = out.len();
    let mut sum = T::zero();
    if k == 1 {
        // Blocked scan: each block's max comes from vectorizable lane-wise
        // maxima, the earliest block holding the overall max is kept (strict
        // `>`), and only that block is rescanned for its first maximal entry.
        const LANES: usize = 8;
        const BLOCK: usize = 8 * LANES;
        let mut lane_sum = [T::zero(); LANES];
        let mut max = T::neg_infinity();
        let mut best_block = 0;
        let blocks = plane.chunks_exact(BLOCK);
        let tail = blocks.remainder();
        for (b, block) in blocks.enumerate() {
            let mut lane_max = [T::neg_infinity(); LANES];
            for ch in block.chunks_exact(LANES) {
                for j in 0..LANES {
                    let a = ch[j].abs();
                    if a > lane_max[j] {
                        lane_max[j] = a;
                    }
                    lane_sum[j] += ch[j];
                }
            }
            let block_max = lane_max.iter().fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
            if block_max > max {
                max = block_max;
                best_block = b;
            }
        }
        for v in lane_sum {
            sum += v;
        }
        let start = best_block * BLOCK;
        let mut best = if max > T::neg_infinity() {
            start + plane[start..start + BLOCK].iter().position(|v| v.abs() == max).unwrap_or(0)
        } else {
            0
        };
        let base = plane.len() - tail.len();
        for (i, &v) in tail.iter().enumerate() {
            if v.abs() > max {
                max = v.abs();
                best = base + i;
            }
            sum += v;
        }
        out[0] = SparseEntry {
            row: best / w,
            col: best % w,
            value: sum,
        };
        return;
    }
    for &v in plane {
        sum += v;
    }
    let by_rank = |a: &usize, b: &usize| {
        plane[*b]
            .abs()
            .partial_cmp(&plane[*a].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    };
    scratch.clear();
    scratch.extend(0..plane.len());
    if k < scratch.len() {
        scratch.select_nth_unstable_by(k - 1, by_rank);
    }
    scratch[..k].sort_unstable_by(by_rank);
    let value = sum / T::from_usize(k).expect("k fits");
    for (slot, &idx) in out.iter_mut().zip(scratch.iter()) {
        *slot = SparseEntry {
            row: idx / w,
            col: idx % w,
            value,
        };
    }
}

/// Keeps, per `(batch, channel)` plane, the single largest-magnitude position
/// valued at the plane sum.
pub fn sparsify_output_grad<T: Real>(d_out: &Tensor4<T>) -> Result<SparseOutputGrad<T>> {
    sparsify_output_grad_topk(d_out, 1)
}

/// Top-`k` generalization: `k` positions per plane, each valued at
/// `sum / k`, so the sparse plane sums to the dense plane's total.
pub fn sparsify_output_grad_topk<T: Real>(d_out: &Tensor4<T>, k: usize) -> Result<SparseOutputGrad<T>> {
    d_out.require_layout(Layout::Nchw, "sparsify_output_grad")?;
    let hw = d_out.h() * d_out.w();
    if hw == 0 {
        return Err(Error::shape("sparsify_output_grad: empty planes"));
    }
    if k == 0 || k > hw {
        return Err(Error::invalid(format!("top-k count {k} outside 1..={hw}")));
    }
    let mut entries = vec![
        SparseEntry {
            row: 0,
            col: 0,
            value: T::zero()
        };
        d_out.n() * d_out.c() * k
    ];
    let mut scratch = Vec::new();
    for (plane, out) in d_out.data().chunks_exact(hw).zip(entries.chunks_exact_mut(k)) {
        select_plane(plane, d_out.w(), out, &mut scratch);
    }
    Ok(SparseOutputGrad {
        n: d_out.n(),
        co: d_out.c(),
        h: d_out.h(),
        w: d_out.w(),
        k,
        entries,
    })
}

/// Sparse filter gradient from an NHWC input and an NCHW output gradient,
/// returned in `CoKkCi` layout. Stride 1 only.
pub fn approx_filter_grad<T: Real>(
    input_nhwc: &Tensor4<T>,
    d_out: &Tensor4<T>,
    k_filter: usize,
    pad: usize,
) -> Result<FilterTensor<T>> {
    approx_filter_grad_topk(input_nhwc, d_out, k_filter, pad, 1)
}

/// As [`approx_filter_grad`] with `k` retained positions per plane.
pub fn approx_filter_grad_topk<T: Real>(
    input_nhwc: &Tensor4<T>,
    d_out: &Tensor4<T>,
    k_filter: usize,
    pad: usize,
    k: usize,
) -> Result<FilterTensor<T>> {
    input_nhwc.require_layout(Layout::Nhwc, "approx_filter_grad input")?;
    d_out.require_layout(Layout::Nchw, "approx_filter_grad output gradient")?;
    if input_nhwc.n() != d_out.n() {
        return Err(Error::shape(format!(
            "approx_filter_grad: input batch {} vs output gradient batch {}",
            input_nhwc.n(),
            d_out.n()
        )));
    }
    if k_filter == 0 {
        return Err(Error::invalid("filter size must be positive"));
    }
    if pad != 0 && (k_filter % 2 == 0 || pad != (k_filter - 1) / 2) {
        return Err(Error::invalid(format!(
            "approx_filter_grad needs pad 0 or same padding with an odd filter (k={k_filter}, pad={pad})"
        )));
    }
    let (h, w, ci) = (input_nhwc.h(), input_nhwc.w(), input_nhwc.c());
    let g = ConvGeometry { stride: 1, pad };
    let (ho, wo) = (g.output_size(h, k_filter)?, g.output_size(w, k_filter)?);
    if (ho, wo) != (d_out.h(), d_out.w()) {
        return Err(Error::shape(format!(
            "approx_filter_grad: output gradient is {}x{}, geometry gives {ho}x{wo}",
            d_out.h(),
            d_out.w()
        )));
    }
    if k == 0 || k > ho * wo {
        return Err(Error::invalid(format!("top-k count {k} outside 1..={}", ho * wo)));
    }

    let co = d_out.c();
    let taps = k_filter * k_filter * ci;
    let mut df = FilterTensor::zeros(k_filter, ci, co, FilterLayout::CoKkCi);
    if df.is_empty() {
        return Ok(df);
    }
    let plane_len = ho * wo;
    let patch = Patch { h, w, ci, k: k_filter, pad };

    // Output channels are split into one contiguous group per worker; no two
    // groups write the same memory. Within a group the batch loop is outer so
    // each image stays in cache across channels, and every channel still
    // accumulates over the batch in index order.
    let group = co.div_ceil(rayon::current_num_threads().max(1));
    df.data_mut()
        .par_chunks_mut(taps * group)
        .enumerate()
        .for_each(|(gi, accs)| {
            let channels = accs.len() / taps;
            let blank = SparseEntry {
                row: 0,
                col: 0,
                value: T::zero(),
            };
            let mut sel = vec![blank; channels * k];
            let mut scratch = Vec::new();
            for n in 0..d_out.n() {
                let image = input_nhwc.item(n);
                let planes = d_out.item(n);
                for (j, out) in sel.chunks_exact_mut(k).enumerate() {
                    let c = gi * group + j;
                    select_plane(&planes[c * plane_len..][..plane_len], wo, out, &mut scratch);
                }
                // patches sit at scattered addresses; fetch a few ahead
                const AHEAD: usize = 4;
                for e in sel.iter().take(AHEAD) {
                    patch.prefetch(image, e.row, e.col);
                }
                for (i, e) in sel.iter().enumerate() {
                    if let Some(next) = sel.get(i + AHEAD) {
                        patch.prefetch(image, next.row, next.col);
                    }
                    if e.value != T::zero() {
                        patch.accumulate(image, e.row, e.col, e.value, &mut accs[(i / k) * taps..][..taps]);
                    }
                }
            }
        });
    Ok(df)
}

struct Patch {
    h: usize,
    w: usize,
    ci: usize,
    k: usize,
    pad: usize,
}

impl Patch {
    /// Cache hint for the rows [`Patch::accumulate`] will read.
    #[inline]
    fn prefetch<T>(&self, image: &[T], row: usize, col: usize) {
        #[cfg(target_arch = "x86_64")]
        {
            use std::arch::x86_64::{_mm_prefetch, _MM_HINT_T0};
            let g = ConvGeometry { stride: 1, pad: self.pad };
            let (kh_lo, kh_hi) = tap_range(row, self.h, self.k, g);
            let (kw_lo, kw_hi) = tap_range(col, self.w, self.k, g);
            let bytes = (kw_hi.saturating_sub(kw_lo)) * self.ci * std::mem::size_of::<T>();
            for kh in kh_lo..kh_hi {
                let start = ((row + kh - self.pad) * self.w + col + kw_lo - self.pad) * self.ci;
                let base = image[start..].as_ptr() as *const i8;
                for off in (0..bytes).step_by(64) {
                    // SAFETY: prefetch never faults; the offset stays inside `image`
                    #[allow(unused_unsafe)]
                    unsafe {
                        _mm_prefetch::<_MM_HINT_T0>(base.wrapping_add(off));
                    }
                }
            }
        }
        #[cfg(not(target_arch = "x86_64"))]
        let _ = (image, row, col);
    }

    /// `acc[kh, kw, :] += image[row + kh - pad, col + kw - pad, :] * scale`,
    /// skipping taps that fall in the zero padding.
    #[inline]
    fn accumulate<T: Real>(&self, image: &[T], row: usize, col: usize, scale: T, acc: &mut [T]) {
        let g = ConvGeometry { stride: 1, pad: self.pad };
        let (kh_lo, kh_hi) = tap_range(row, self.h, self.k, g);
        let (kw_lo, kw_hi) = tap_range(col, self.w, self.k, g);
        if kw_lo >= kw_hi {
            return;
        }
        let span = (kw_hi - kw_lo) * self.ci;
        for kh in kh_lo..kh_hi {
            let ih = row + kh - self.pad;
            let iw = col + kw_lo - self.pad;
            let src = &image[(ih * self.w + iw) * self.ci..][..span];
            let dst = &mut acc[(kh * self.k + kw_lo) * self.ci..][..span];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s * scale;
            }
        }
    }
}

/// Taps `[lo, hi)` such that `pos + tap - pad` is inside `[0, extent)`.
#[inline]
fn tap_range(pos: usize, extent: usize, k: usize, g: ConvGeometry) -> (usize, usize) {
    let lo = g.pad.saturating_sub(pos);
    let hi = (extent + g.pad).saturating_sub(pos).min(k);
    (lo, hi.max(lo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{transpose_activations, transpose_filter};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor4<f64> {
        Tensor4::from_fn(n, c, h, w, Layout::Nchw, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let den = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
        num / den.max(1e-300)
    }

    #[test]
    fn one_by_one_scaling_filter() {
        let x = Tensor4::from_vec(1, 1, 2, 2, Layout::Nchw, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let f = FilterTensor::from_vec(1, 1, 1, FilterLayout::KkCiCo, vec![2.0f32]).unwrap();
        let y = conv2d_forward(&x, &f, ConvGeometry::same(1)).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);

        let d_in = conv2d_input_grad(&x, &f, ConvGeometry::same(1), (2, 2)).unwrap();
        assert_eq!(d_in.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn delta_filter_is_identity() {
        let data: Vec<f32> = (0..9).map(|v| v as f32 * 1.5 - 3.0).collect();
        let x = Tensor4::from_vec(1, 1, 3, 3, Layout::Nchw, data.clone()).unwrap();
        let mut f = FilterTensor::zeros(3, 1, 1, FilterLayout::KkCiCo);
        f.set(1, 1, 0, 0, 1.0);
        let y = conv2d_forward(&x, &f, ConvGeometry::same(3)).unwrap();
        assert_eq!(y.data(), &data[..]);
    }

    #[test]
    fn zero_output_grad_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, 2, 3, 4, 4);
        let d_o = Tensor4::<f64>::zeros(2, 5, 4, 4, Layout::Nchw);
        let f = FilterTensor::<f64>::from_vec(3, 3, 5, FilterLayout::KkCiCo, vec![0.5; 135]).unwrap();
        let g = ConvGeometry::same(3);
        assert!(conv2d_input_grad(&d_o, &f, g, (4, 4)).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(conv2d_filter_grad_dense(&x, &d_o, 3, g).unwrap().data().iter().all(|&v| v == 0.0));
        let xh = transpose_activations(&x, Layout::Nhwc);
        assert!(approx_filter_grad(&xh, &d_o, 3, 1).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_filter_grad_hand_value() {
        let x = Tensor4::from_vec(1, 1, 2, 2, Layout::Nchw, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let d_o = Tensor4::from_vec(1, 1, 2, 2, Layout::Nchw, vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
        let df = conv2d_filter_grad_dense(&x, &d_o, 1, ConvGeometry::same(1)).unwrap();
        assert_eq!(df.data(), &[5.0]);
    }

    #[test]
    fn shape_mismatches_are_reported() {
        let x = Tensor4::<f32>::zeros(1, 2, 4, 4, Layout::Nchw);
        let f = FilterTensor::<f32>::zeros(3, 3, 4, FilterLayout::KkCiCo);
        let err = conv2d_forward(&x, &f, ConvGeometry::same(3)).unwrap_err();
        assert!(err.to_string().contains("2 channels"), "{err}");
        let d_o = Tensor4::<f32>::zeros(2, 4, 4, 4, Layout::Nchw);
        assert!(conv2d_filter_grad_dense(&x, &d_o, 3, ConvGeometry::same(3)).is_err());
        assert!(conv2d_input_grad(&d_o, &f, ConvGeometry::same(3), (5, 5)).is_err());
        assert!(ConvGeometry::new(0, 1).is_err());
    }

    #[test]
    fn sparsify_examples() {
        let d_o = Tensor4::from_vec(1, 1, 2, 2, Layout::Nchw, vec![3.0f32, -5.0, 1.0, 2.0]).unwrap();
        let s = sparsify_output_grad(&d_o).unwrap();
        assert_eq!(s.plane(0, 0), &[SparseEntry { row: 0, col: 1, value: 1.0 }]);

        let z = Tensor4::<f32>::zeros(1, 1, 3, 2, Layout::Nchw);
        let s = sparsify_output_grad(&z).unwrap();
        assert_eq!(s.plane(0, 0), &[SparseEntry { row: 0, col: 0, value: 0.0 }]);

        let one = Tensor4::from_vec(1, 1, 1, 1, Layout::Nchw, vec![7.0f32]).unwrap();
        let s = sparsify_output_grad(&one).unwrap();
        assert_eq!(s.plane(0, 0), &[SparseEntry { row: 0, col: 0, value: 7.0 }]);
        // no zeros at all in a 1x1 plane: sparsity 1 - 1/1 = 0
        assert_eq!(s.densify().data().iter().filter(|v| **v == 0.0).count(), 0);
    }

    #[test]
    fn sparsify_ties_take_first() {
        let d_o = Tensor4::from_vec(1, 1, 2, 2, Layout::Nchw, vec![1.0f32, -4.0, 4.0, 4.0]).unwrap();
        let s = sparsify_output_grad(&d_o).unwrap();
        assert_eq!((s.plane(0, 0)[0].row, s.plane(0, 0)[0].col), (0, 1));
        let s = sparsify_output_grad_topk(&d_o, 2).unwrap();
        let pos: Vec<_> = s.plane(0, 0).iter().map(|e| (e.row, e.col)).collect();
        assert_eq!(pos, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn topk_two_example() {
        let d_o = Tensor4::from_vec(1, 1, 2, 2, Layout::Nchw, vec![3.0f32, -5.0, 1.0, 2.0]).unwrap();
        let s = sparsify_output_grad_topk(&d_o, 2).unwrap();
        assert_eq!(
            s.plane(0, 0),
            &[
                SparseEntry { row: 0, col: 1, value: 0.5 },
                SparseEntry { row: 0, col: 0, value: 0.5 }
            ]
        );
        assert!(sparsify_output_grad_topk(&d_o, 0).is_err());
        assert!(sparsify_output_grad_topk(&d_o, 5).is_err());
    }

    #[test]
    fn approx_hand_example() {
        let x = Tensor4::from_vec(1, 1, 2, 2, Layout::Nchw, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let d_o = Tensor4::from_vec(1, 1, 2, 2, Layout::Nchw, vec![0.5f32, -1.0, 0.25, 0.5]).unwrap();
        let xh = transpose_activations(&x, Layout::Nhwc);
        let df = approx_filter_grad(&xh, &d_o, 1, 0).unwrap();
        assert_eq!(df.data(), &[0.5]);
        assert_eq!(df.layout(), FilterLayout::CoKkCi);
    }

    #[test]
    fn approx_rejects_bad_geometry() {
        let x = Tensor4::<f32>::zeros(1, 2, 6, 6, Layout::Nhwc);
        let d_o = Tensor4::<f32>::zeros(1, 3, 6, 6, Layout::Nchw);
        // even filter with same padding
        assert!(approx_filter_grad(&x, &d_o, 2, 1).is_err());
        // NCHW input
        let xc = Tensor4::<f32>::zeros(1, 2, 6, 6, Layout::Nchw);
        assert!(approx_filter_grad(&xc, &d_o, 3, 1).is_err());
        // wrong output plane
        assert!(approx_filter_grad(&x, &d_o, 3, 0).is_err());
        assert!(approx_filter_grad_topk(&x, &d_o, 3, 1, 37).is_err());
    }

    #[test]
    fn approx_valid_padding_matches_sparse_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, 3, 4, 7, 6);
        let d_o = rand_tensor(&mut rng, 3, 5, 5, 4);
        let xh = transpose_activations(&x, Layout::Nhwc);
        let approx = transpose_filter(&approx_filter_grad(&xh, &d_o, 3, 0).unwrap(), FilterLayout::KkCiCo);
        let sparse = sparsify_output_grad(&d_o).unwrap().densify();
        let dense = conv2d_filter_grad_dense(&x, &sparse, 3, ConvGeometry::new(1, 0).unwrap()).unwrap();
        assert!(rel(approx.data(), dense.data()) < 1e-12);
    }

    #[test]
    fn topk_equals_dense_on_sparsified_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, 2, 3, 5, 5);
        let d_o = rand_tensor(&mut rng, 2, 4, 5, 5);
        let xh = transpose_activations(&x, Layout::Nhwc);
        let g = ConvGeometry::same(3);
        for k in [1, 2, 7, 25] {
            let approx = transpose_filter(&approx_filter_grad_topk(&xh, &d_o, 3, 1, k).unwrap(), FilterLayout::KkCiCo);
            let sparse = sparsify_output_grad_topk(&d_o, k).unwrap().densify();
            let dense = conv2d_filter_grad_dense(&x, &sparse, 3, g).unwrap();
            assert!(rel(approx.data(), dense.data()) < 1e-12, "k={k}");
        }
    }

    #[test]
    fn topk_one_is_bitwise_max_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Tensor4<f32> = rand_tensor(&mut rng, 4, 6, 8, 8).cast();
        let d_o: Tensor4<f32> = rand_tensor(&mut rng, 4, 5, 8, 8).cast();
        let xh = transpose_activations(&x, Layout::Nhwc);
        assert_eq!(
            approx_filter_grad(&xh, &d_o, 3, 1).unwrap(),
            approx_filter_grad_topk(&xh, &d_o, 3, 1, 1).unwrap()
        );
    }

    #[test]
    fn strided_im2col_roundtrip_is_adjoint() {
        // <im2col(x), c> == <x, col2im(c)>
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = ConvGeometry::new(2, 1).unwrap();
        let d = conv_dims(7, 6, 2, 3, g).unwrap();
        let x: Vec<f64> = (0..2 * 7 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = d.k * d.k * d.ci * d.ho * d.wo;
        let c: Vec<f64> = (0..r).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut cols = vec![0.0; r];
        im2col(&x, &d, g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&c, &d, g, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn top1_matches_naive_first_argmax(
            vals in proptest::collection::vec(-4i8..=4, 1..300),
            w in 1usize..20,
        ) {
            // small integer values force many ties, and sums stay exact
            let plane: Vec<f32> = vals.iter().map(|&v| v as f32).collect();
            let mut want = 0;
            for (i, v) in plane.iter().enumerate() {
                if v.abs() > plane[want].abs() {
                    want = i;
                }
            }
            let mut out = [SparseEntry { row: 0, col: 0, value: 0.0f32 }];
            select_plane(&plane, w, &mut out, &mut Vec::new());
            proptest::prop_assert_eq!(out[0].row * w + out[0].col, want);
            proptest::prop_assert_eq!(out[0].value, plane.iter().sum::<f32>());
        }
    }
}
