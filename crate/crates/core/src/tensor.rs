//! Rank-4 activation tensors and convolution filters with explicit memory
//! layouts, plus the out-of-place layout transposes used around the sparse
//! filter-gradient kernel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layout {
    Nchw,
    Nhwc,
}

/// Dense `n x c x h x w` tensor stored contiguously in `layout` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T = f32> {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    layout: Layout,
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize, layout: Layout) -> Self {
        Tensor4 {
            n,
            c,
            h,
            w,
            layout,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        layout: Layout,
        data: Vec<T>,
    ) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::shape(format!(
                "tensor {n}x{c}x{h}x{w} needs {} elements, got {}",
                n * c * h * w,
                data.len()
            )));
        }
        Ok(Tensor4 {
            n,
            c,
            h,
            w,
            layout,
            data,
        })
    }

    /// Builds a tensor by evaluating `f(i, j, k, l)` at every coordinate.
    pub fn from_fn(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        layout: Layout,
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Self {
        let mut t = Self::zeros(n, c, h, w, layout);
        for i in 0..n {
            for j in 0..c {
                for k in 0..h {
                    for l in 0..w {
                        let idx = t.offset(i, j, k, l);
                        t.data[idx] = f(i, j, k, l);
                    }
                }
            }
        }
        t
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn c(&self) -> usize {
        self.c
    }
    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }
    pub fn layout(&self) -> Layout {
        self.layout
    }
    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Flat index of logical element `(i, j, k, l)` = (batch, channel, row, col).
    #[inline]
    pub fn offset(&self, i: usize, j: usize, k: usize, l: usize) -> usize {
        debug_assert!(i < self.n && j < self.c && k < self.h && l < self.w);
        match self.layout {
            Layout::Nchw => ((i * self.c + j) * self.h + k) * self.w + l,
            Layout::Nhwc => ((i * self.h + k) * self.w + l) * self.c + j,
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> T {
        self.data[self.offset(i, j, k, l)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, l: usize, v: T) {
        let idx = self.offset(i, j, k, l);
        self.data[idx] = v;
    }

    /// Elements of batch item `i` (a contiguous `c*h*w` block in either layout).
    pub fn item(&self, i: usize) -> &[T] {
        let sz = self.c * self.h * self.w;
        &self.data[i * sz..(i + 1) * sz]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [T] {
        let sz = self.c * self.h * self.w;
        &mut self.data[i * sz..(i + 1) * sz]
    }

    /// New tensor holding batch items `idx` in that order.
    pub fn select_items(&self, idx: &[usize]) -> Self {
        let sz = self.c * self.h * self.w;
        let mut data = Vec::with_capacity(idx.len() * sz);
        for &i in idx {
            data.extend_from_slice(self.item(i));
        }
        Tensor4 {
            n: idx.len(),
            c: self.c,
            h: self.h,
            w: self.w,
            layout: self.layout,
            data,
        }
    }

    /// Same logical tensor, different shape of the trailing dims; layout kept.
    pub fn reshape(self, c: usize, h: usize, w: usize) -> Result<Self> {
        Self::from_vec(self.n, c, h, w, self.layout, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            layout: self.layout,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element type conversion, layout preserved.
    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            layout: self.layout,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn require_layout(&self, layout: Layout, what: &str) -> Result<()> {
        if self.layout != layout {
            return Err(Error::shape(format!(
                "{what}: expected {layout:?} layout, got {:?}",
                self.layout
            )));
        }
        Ok(())
    }
}

/// Out-of-place layout change. A same-layout request returns a copy.
pub fn transpose_activations<T: Real>(t: &Tensor4<T>, target: Layout) -> Tensor4<T> {
    let mut out = Tensor4::zeros(t.n, t.c, t.h, t.w, target);
    transpose_activations_into(t, &mut out);
    out
}

/// As [`transpose_activations`], writing into `out`, whose dimensions must
/// match `t`; `out`'s layout selects the target.
pub fn transpose_activations_into<T: Real>(t: &Tensor4<T>, out: &mut Tensor4<T>) {
    assert_eq!(t.dims(), out.dims(), "transpose_activations_into: dimension mismatch");
    if t.layout == out.layout {
        out.data.copy_from_slice(&t.data);
        return;
    }
    let (c, hw) = (t.c, t.h * t.w);
    let item = c * hw;
    if item == 0 {
        return;
    }
    let target = out.layout;
    out.data
        .par_chunks_mut(item)
        .zip(t.data.par_chunks(item))
        .for_each(|(dst, src)| match target {
            Layout::Nhwc => transpose_tiled(src, dst, c, hw),
            Layout::Nchw => transpose_tiled(src, dst, hw, c),
        });
}

/// Row-major `(rows, cols)` matrix to `(cols, rows)`, in cache-sized tiles.
fn transpose_tiled<T: Copy>(src: &[T], dst: &mut [T], rows: usize, cols: usize) {
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        let r1 = (r0 + TILE).min(rows);
        for c0 in (0..cols).step_by(TILE) {
            let c1 = (c0 + TILE).min(cols);
            for r in r0..r1 {
                let row = &src[r * cols..];
                for c in c0..c1 {
                    dst[c * rows + r] = row[c];
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FilterLayout {
    /// `(kh, kw, ci, co)`, output channel fastest.
    KkCiCo,
    /// `(co, kh, kw, ci)`, produced by the sparse kernel.
    CoKkCi,
}

/// Square `k x k` convolution filter bank mapping `ci` to `co` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterTensor<T = f32> {
    k: usize,
    ci: usize,
    co: usize,
    layout: FilterLayout,
    data: Vec<T>,
}

impl<T: Real> FilterTensor<T> {
    pub fn zeros(k: usize, ci: usize, co: usize, layout: FilterLayout) -> Self {
        FilterTensor {
            k,
            ci,
            co,
            layout,
            data: vec![T::zero(); k * k * ci * co],
        }
    }

    pub fn from_vec(
        k: usize,
        ci: usize,
        co: usize,
        layout: FilterLayout,
        data: Vec<T>,
    ) -> Result<Self> {
        if data.len() != k * k * ci * co {
            return Err(Error::shape(format!(
                "filter {k}x{k}x{ci}x{co} needs {} elements, got {}",
                k * k * ci * co,
                data.len()
            )));
        }
        Ok(FilterTensor {
            k,
            ci,
            co,
            layout,
            data,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }
    pub fn ci(&self) -> usize {
        self.ci
    }
    pub fn co(&self) -> usize {
        self.co
    }
    pub fn layout(&self) -> FilterLayout {
        self.layout
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Flat index of tap `(kh, kw)` from input channel `ci` to output channel `co`.
    #[inline]
    pub fn offset(&self, kh: usize, kw: usize, ci: usize, co: usize) -> usize {
        debug_assert!(kh < self.k && kw < self.k && ci < self.ci && co < self.co);
        match self.layout {
            FilterLayout::KkCiCo => ((kh * self.k + kw) * self.ci + ci) * self.co + co,
            FilterLayout::CoKkCi => ((co * self.k + kh) * self.k + kw) * self.ci + ci,
        }
    }

    #[inline]
    pub fn get(&self, kh: usize, kw: usize, ci: usize, co: usize) -> T {
        self.data[self.offset(kh, kw, ci, co)]
    }

    #[inline]
    pub fn set(&mut self, kh: usize, kw: usize, ci: usize, co: usize, v: T) {
        let idx = self.offset(kh, kw, ci, co);
        self.data[idx] = v;
    }

    pub fn scale(&mut self, factor: T) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn cast<U: Real>(&self) -> FilterTensor<U> {
        FilterTensor {
            k: self.k,
            ci: self.ci,
            co: self.co,
            layout: self.layout,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }
}

/// Out-of-place filter layout change. A same-layout request returns a copy.
pub fn transpose_filter<T: Real>(f: &FilterTensor<T>, target: FilterLayout) -> FilterTensor<T> {
    let mut out = FilterTensor::zeros(f.k, f.ci, f.co, target);
    transpose_filter_into(f, &mut out);
    out
}

/// As [`transpose_filter`], writing into `out`; `out`'s layout selects the
/// target.
pub fn transpose_filter_into<T: Real>(f: &FilterTensor<T>, out: &mut FilterTensor<T>) {
    assert_eq!((f.k, f.ci, f.co), (out.k, out.ci, out.co), "transpose_filter_into: shape mismatch");
    if f.layout == out.layout {
        out.data.copy_from_slice(&f.data);
        return;
    }
    let (taps, co) = (f.k * f.k * f.ci, f.co);
    if taps * co == 0 {
        return;
    }
    match out.layout {
        FilterLayout::KkCiCo => transpose_tiled(&f.data, &mut out.data, co, taps),
        FilterLayout::CoKkCi => transpose_tiled(&f.data, &mut out.data, taps, co),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counting(n: usize, c: usize, h: usize, w: usize) -> Tensor4<f32> {
        let data = (0..n * c * h * w).map(|v| v as f32).collect();
        Tensor4::from_vec(n, c, h, w, Layout::Nchw, data).unwrap()
    }

    #[test]
    fn single_element() {
        let t = Tensor4::from_vec(1, 1, 1, 1, Layout::Nchw, vec![5.0f32]).unwrap();
        let u = transpose_activations(&t, Layout::Nhwc);
        assert_eq!(u.data(), &[5.0]);
        assert_eq!(u.layout(), Layout::Nhwc);
    }

    #[test]
    fn two_channel_interleave() {
        // channels a = [a0, a1], b = [b0, b1] on a 1x2 image
        let t = Tensor4::from_vec(1, 2, 1, 2, Layout::Nchw, vec![10.0f32, 11.0, 20.0, 21.0])
            .unwrap();
        let u = transpose_activations(&t, Layout::Nhwc);
        assert_eq!(u.data(), &[10.0, 20.0, 11.0, 21.0]);
    }

    #[test]
    fn same_layout_is_copy() {
        let t = counting(2, 3, 2, 2);
        assert_eq!(transpose_activations(&t, Layout::Nchw), t);
    }

    #[test]
    fn wrong_length_rejected() {
        assert!(Tensor4::<f32>::from_vec(1, 2, 2, 2, Layout::Nchw, vec![0.0; 7]).is_err());
        assert!(FilterTensor::<f32>::from_vec(3, 1, 1, FilterLayout::KkCiCo, vec![0.0; 8]).is_err());
    }

    #[test]
    fn accessor_agrees_across_layouts_exhaustive() {
        for (n, c, h, w) in [(1, 1, 1, 1), (2, 3, 4, 5), (3, 2, 1, 4), (1, 5, 3, 3)] {
            let t = counting(n, c, h, w);
            let u = transpose_activations(&t, Layout::Nhwc);
            for i in 0..n {
                for j in 0..c {
                    for k in 0..h {
                        for l in 0..w {
                            assert_eq!(t.get(i, j, k, l), u.get(i, j, k, l));
                            // explicit index formulas
                            let chw = c * h * w;
                            assert_eq!(t.offset(i, j, k, l), i * chw + j * h * w + k * w + l);
                            assert_eq!(u.offset(i, j, k, l), i * chw + k * w * c + l * c + j);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn filter_single_and_pair() {
        let f = FilterTensor::from_vec(1, 1, 1, FilterLayout::CoKkCi, vec![3.0f32]).unwrap();
        assert_eq!(transpose_filter(&f, FilterLayout::KkCiCo).data(), &[3.0]);

        // f(ci, co) stored co-major: [f(0,0), f(1,0), f(0,1), f(1,1)]
        let f = FilterTensor::from_vec(1, 2, 2, FilterLayout::CoKkCi, vec![0.0f32, 10.0, 1.0, 11.0])
            .unwrap();
        let g = transpose_filter(&f, FilterLayout::KkCiCo);
        // [f(0,0), f(0,1), f(1,0), f(1,1)]
        assert_eq!(g.data(), &[0.0, 1.0, 10.0, 11.0]);
    }

    #[test]
    fn filter_accessor_agrees_across_layouts() {
        let (k, ci, co) = (3, 8, 16);
        let data = (0..k * k * ci * co).map(|v| v as f32).collect();
        let f = FilterTensor::from_vec(k, ci, co, FilterLayout::KkCiCo, data).unwrap();
        let g = transpose_filter(&f, FilterLayout::CoKkCi);
        for kh in 0..k {
            for kw in 0..k {
                for i in 0..ci {
                    for o in 0..co {
                        assert_eq!(f.get(kh, kw, i, o), g.get(kh, kw, i, o));
                    }
                }
            }
        }
        assert_eq!(transpose_filter(&g, FilterLayout::KkCiCo), f);
    }

    proptest! {
        #[test]
        fn activation_roundtrip_is_exact(
            n in 1usize..4, c in 1usize..6, h in 1usize..6, w in 1usize..6, seed in any::<u64>()
        ) {
            let data: Vec<f32> = (0..n * c * h * w)
                .map(|i| f32::from_bits((seed as u32).wrapping_mul(2654435761).wrapping_add(i as u32) & 0x3fff_ffff))
                .collect();
            let t = Tensor4::from_vec(n, c, h, w, Layout::Nchw, data).unwrap();
            let back = transpose_activations(&transpose_activations(&t, Layout::Nhwc), Layout::Nchw);
            prop_assert_eq!(back, t);
        }

        #[test]
        fn filter_roundtrip_is_exact(k in 1usize..6, ci in 1usize..9, co in 1usize..9) {
            let data: Vec<f64> = (0..k * k * ci * co).map(|v| (v as f64).sin()).collect();
            let f = FilterTensor::from_vec(k, ci, co, FilterLayout::CoKkCi, data).unwrap();
            let back = transpose_filter(&transpose_filter(&f, FilterLayout::KkCiCo), FilterLayout::CoKkCi);
            prop_assert_eq!(back, f);
        }
    }
}
