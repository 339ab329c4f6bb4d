//! Layers with hand-written forward and backward passes.
//!
//! Activations are NCHW throughout. Each layer caches what its backward pass
//! needs during a training-mode forward. Only convolution filter gradients
//! are ever approximated; everything else is exact.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::approx::{compute_filter_grad, ApproxMethod, MethodKind, MethodParams, RngStream};
use crate::error::{Error, Result};
use crate::kernels::{conv2d_forward, conv2d_input_grad, ConvGeometry};
use crate::real::Real;
use crate::schedule::Schedule;
use crate::tensor::{FilterLayout, FilterTensor, Layout, Tensor4};

/// Mutable view of one parameter array and its current gradient.
pub struct ParamRef<'a, T> {
    pub name: &'a str,
    pub value: &'a mut [T],
    pub grad: &'a [T],
}

/// Which filter-gradient method each conv layer used during a backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvRecord {
    pub layer: usize,
    pub requested: MethodKind,
    pub applied: MethodKind,
}

/// Routing state for one backward pass.
pub struct BackwardCtx<'a> {
    pub schedule: Option<&'a Schedule>,
    pub params: MethodParams,
    pub step: u64,
    pub seed: u64,
    pub records: Vec<ConvRecord>,
}

impl<'a> BackwardCtx<'a> {
    /// Exact gradients everywhere.
    pub fn exact() -> Self {
        BackwardCtx {
            schedule: None,
            params: MethodParams::for_batch(1),
            step: 0,
            seed: 0,
            records: Vec::new(),
        }
    }

    pub fn scheduled(schedule: &'a Schedule, params: MethodParams, step: u64, seed: u64) -> Self {
        BackwardCtx {
            schedule: Some(schedule),
            params,
            step,
            seed,
            records: Vec::new(),
        }
    }

    fn method(&self, layer: usize) -> Result<ApproxMethod> {
        match self.schedule {
            None => Ok(ApproxMethod::Full),
            Some(s) => Ok(self.params.resolve(s.method_for(layer, self.step)?)),
        }
    }
}

fn he_normal<T: Real>(rng: &mut impl Rng, fan_in: usize, len: usize) -> Vec<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("valid std");
    (0..len).map(|_| T::from_f64_lossy(normal.sample(rng))).collect()
}

/// Bias-free convolution; `index` is its position among the network's
/// main-path convolutions, which is what schedules address.
#[derive(Debug, Clone)]
pub struct Conv<T: Real> {
    pub name: String,
    pub index: usize,
    pub geom: ConvGeometry,
    pub weight: FilterTensor<T>,
    pub grad: FilterTensor<T>,
    /// False for the network's first layer, whose input gradient is unused.
    pub needs_input_grad: bool,
    cache: Option<Tensor4<T>>,
}

impl<T: Real> Conv<T> {
    pub fn new(
        index: usize,
        k: usize,
        ci: usize,
        co: usize,
        geom: ConvGeometry,
        rng: &mut impl Rng,
    ) -> Self {
        let data = he_normal(rng, k * k * ci, k * k * ci * co);
        Conv {
            name: format!("conv{index}"),
            index,
            geom,
            weight: FilterTensor::from_vec(k, ci, co, FilterLayout::KkCiCo, data).expect("shape"),
            grad: FilterTensor::zeros(k, ci, co, FilterLayout::KkCiCo),
            needs_input_grad: true,
            cache: None,
        }
    }

    fn forward(&mut self, x: Tensor4<T>, train: bool) -> Result<Tensor4<T>> {
        let y = conv2d_forward(&x, &self.weight, self.geom)?;
        if train {
            self.cache = Some(x);
        }
        Ok(y)
    }

    fn backward(&mut self, dy: Tensor4<T>, ctx: &mut BackwardCtx) -> Result<Option<Tensor4<T>>> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::invalid(format!("{}: backward without forward", self.name)))?;
        let method = ctx.method(self.index)?;
        let rng = RngStream::new(ctx.seed, self.index, ctx.step);
        let fg = compute_filter_grad(&method, &x, &dy, self.weight.k(), self.geom, Some(&rng))?;
        ctx.records.push(ConvRecord {
            layer: self.index,
            requested: method.kind(),
            applied: fg.applied,
        });
        self.grad = fg.grad;
        if !self.needs_input_grad {
            return Ok(None);
        }
        conv2d_input_grad(&dy, &self.weight, self.geom, (x.h(), x.w())).map(Some)
    }
}

/// Per-channel batch normalization with learned scale and shift.
#[derive(Debug, Clone)]
pub struct BatchNorm<T: Real> {
    pub name: String,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub grad_gamma: Vec<T>,
    pub grad_beta: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
    // normalized input and 1/std per channel
    cache: Option<(Tensor4<T>, Vec<f64>)>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(name: String, c: usize) -> Self {
        BatchNorm {
            name,
            gamma: vec![T::one(); c],
            beta: vec![T::zero(); c],
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
            grad_gamma: vec![T::zero(); c],
            grad_beta: vec![T::zero(); c],
            eps: 1e-5,
            momentum: 0.9,
            cache: None,
        }
    }

    fn forward(&mut self, mut x: Tensor4<T>, train: bool) -> Result<Tensor4<T>> {
        let c = self.gamma.len();
        if x.c() != c {
            return Err(Error::shape(format!("{}: {} channels, expected {c}", self.name, x.c())));
        }
        let (n, hw) = (x.n(), x.h() * x.w());
        let count = (n * hw) as f64;
        let mut inv_std = vec![0.0f64; c];
        let mut mean = vec![0.0f64; c];
        if train {
            for ch in 0..c {
                let (mut s, mut s2) = (0.0f64, 0.0f64);
                for i in 0..n {
                    for &v in &x.item(i)[ch * hw..(ch + 1) * hw] {
                        let v = v.to_f64_lossy();
                        s += v;
                        s2 += v * v;
                    }
                }
                let m = s / count;
                let var = (s2 / count - m * m).max(0.0);
                mean[ch] = m;
                inv_std[ch] = 1.0 / (var + self.eps).sqrt();
                let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
                let mo = self.momentum;
                self.running_mean[ch] = T::from_f64_lossy(mo * self.running_mean[ch].to_f64_lossy() + (1.0 - mo) * m);
                self.running_var[ch] = T::from_f64_lossy(mo * self.running_var[ch].to_f64_lossy() + (1.0 - mo) * unbiased);
            }
        } else {
            for ch in 0..c {
                mean[ch] = self.running_mean[ch].to_f64_lossy();
                inv_std[ch] = 1.0 / (self.running_var[ch].to_f64_lossy() + self.eps).sqrt();
            }
        }
        for i in 0..n {
            let item = x.item_mut(i);
            for ch in 0..c {
                let (m, s) = (T::from_f64_lossy(mean[ch]), T::from_f64_lossy(inv_std[ch]));
                for v in &mut item[ch * hw..(ch + 1) * hw] {
                    *v = (*v - m) * s;
                }
            }
        }
        let mut y = x.clone();
        for i in 0..n {
            let item = y.item_mut(i);
            for ch in 0..c {
                let (g, b) = (self.gamma[ch], self.beta[ch]);
                for v in &mut item[ch * hw..(ch + 1) * hw] {
                    *v = *v * g + b;
                }
            }
        }
        if train {
            self.cache = Some((x, inv_std));
        }
        Ok(y)
    }

    fn backward(&mut self, mut dy: Tensor4<T>) -> Result<Tensor4<T>> {
        let (xhat, inv_std) = self
            .cache
            .take()
            .ok_or_else(|| Error::invalid(format!("{}: backward without forward", self.name)))?;
        let c = self.gamma.len();
        let (n, hw) = (dy.n(), dy.h() * dy.w());
        let count = (n * hw) as f64;
        for ch in 0..c {
            let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
            for i in 0..n {
                let d = &dy.item(i)[ch * hw..(ch + 1) * hw];
                let xh = &xhat.item(i)[ch * hw..(ch + 1) * hw];
                for (&a, &b) in d.iter().zip(xh) {
                    sum_dy += a.to_f64_lossy();
                    sum_dy_xhat += (a * b).to_f64_lossy();
                }
            }
            self.grad_beta[ch] = T::from_f64_lossy(sum_dy);
            self.grad_gamma[ch] = T::from_f64_lossy(sum_dy_xhat);
            // dx = gamma * inv_std * (dy - mean(dy) - xhat * mean(dy * xhat))
            let g = self.gamma[ch].to_f64_lossy() * inv_std[ch];
            let (m_dy, m_dyx) = (T::from_f64_lossy(sum_dy / count), T::from_f64_lossy(sum_dy_xhat / count));
            let g = T::from_f64_lossy(g);
            for i in 0..n {
                let xh = &xhat.item(i)[ch * hw..(ch + 1) * hw];
                let d = &mut dy.item_mut(i)[ch * hw..(ch + 1) * hw];
                for (v, &b) in d.iter_mut().zip(xh) {
                    *v = g * (*v - m_dy - b * m_dyx);
                }
            }
        }
        Ok(dy)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Relu {
    fn forward<T: Real>(&mut self, mut x: Tensor4<T>, train: bool) -> Tensor4<T> {
        if train {
            self.mask.clear();
            self.mask.extend(x.data().iter().map(|&v| v > T::zero()));
        }
        x.data_mut().iter_mut().for_each(|v| {
            if !(*v > T::zero()) {
                *v = T::zero();
            }
        });
        x
    }

    fn backward<T: Real>(&mut self, mut dy: Tensor4<T>) -> Result<Tensor4<T>> {
        if self.mask.len() != dy.len() {
            return Err(Error::invalid("relu: backward without matching forward"));
        }
        for (v, &keep) in dy.data_mut().iter_mut().zip(&self.mask) {
            if !keep {
                *v = T::zero();
            }
        }
        Ok(dy)
    }
}

/// Max pooling over `size x size` windows; padded cells never win.
#[derive(Debug, Clone)]
pub struct MaxPool {
    pub size: usize,
    pub stride: usize,
    pub pad: usize,
    // flat input index of each output's winner, plus input dims
    cache: Option<(Vec<usize>, [usize; 4])>,
}

impl MaxPool {
    pub fn new(size: usize, stride: usize, pad: usize) -> Self {
        MaxPool {
            size,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn output_size(&self, input: usize) -> usize {
        (input + 2 * self.pad - self.size) / self.stride + 1
    }

    fn forward<T: Real>(&mut self, x: &Tensor4<T>, train: bool) -> Result<Tensor4<T>> {
        if x.h() + 2 * self.pad < self.size || x.w() + 2 * self.pad < self.size {
            return Err(Error::shape(format!("maxpool {} larger than {}x{}", self.size, x.h(), x.w())));
        }
        let (n, c, h, w) = (x.n(), x.c(), x.h(), x.w());
        let (ho, wo) = (self.output_size(h), self.output_size(w));
        let mut y = Tensor4::zeros(n, c, ho, wo, Layout::Nchw);
        let mut arg = vec![0usize; n * c * ho * wo];
        let mut o = 0;
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * h * w;
                let plane = &x.data()[base..base + h * w];
                for oh in 0..ho {
                    let r0 = (oh * self.stride) as isize - self.pad as isize;
                    for ow in 0..wo {
                        let c0 = (ow * self.stride) as isize - self.pad as isize;
                        let mut best = T::neg_infinity();
                        let mut best_idx = usize::MAX;
                        for r in r0.max(0)..(r0 + self.size as isize).min(h as isize) {
                            for cc in c0.max(0)..(c0 + self.size as isize).min(w as isize) {
                                let idx = r as usize * w + cc as usize;
                                if plane[idx] > best || best_idx == usize::MAX {
                                    best = plane[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        y.data_mut()[o] = best;
                        arg[o] = base + best_idx;
                        o += 1;
                    }
                }
            }
        }
        if train {
            self.cache = Some((arg, x.dims()));
        }
        Ok(y)
    }

    fn backward<T: Real>(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (arg, [n, c, h, w]) = self
            .cache
            .take()
            .ok_or_else(|| Error::invalid("maxpool: backward without forward"))?;
        let mut dx = Tensor4::zeros(n, c, h, w, Layout::Nchw);
        for (&src, &g) in arg.iter().zip(dy.data()) {
            dx.data_mut()[src] += g;
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    dims: Option<[usize; 4]>,
}

impl GlobalAvgPool {
    fn forward<T: Real>(&mut self, x: &Tensor4<T>, train: bool) -> Tensor4<T> {
        let hw = x.h() * x.w();
        let scale = T::one() / T::from_usize(hw).expect("fits");
        let data = x
            .data()
            .chunks_exact(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * scale)
            .collect();
        if train {
            self.dims = Some(x.dims());
        }
        Tensor4::from_vec(x.n(), x.c(), 1, 1, Layout::Nchw, data).expect("shape")
    }

    fn backward<T: Real>(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let [n, c, h, w] = self
            .dims
            .take()
            .ok_or_else(|| Error::invalid("global pool: backward without forward"))?;
        let scale = T::one() / T::from_usize(h * w).expect("fits");
        let mut dx = Tensor4::zeros(n, c, h, w, Layout::Nchw);
        for (plane, &g) in dx.data_mut().chunks_exact_mut(h * w).zip(dy.data()) {
            plane.fill(g * scale);
        }
        Ok(dx)
    }
}

/// Fully connected layer on the flattened `c*h*w` features of each item.
#[derive(Debug, Clone)]
pub struct Dense<T: Real> {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs x inputs`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub grad_weight: Vec<T>,
    pub grad_bias: Vec<T>,
    cache: Option<Tensor4<T>>,
}

impl<T: Real> Dense<T> {
    pub fn new(name: String, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Dense {
            name,
            inputs,
            outputs,
            weight: he_normal(rng, inputs, inputs * outputs),
            bias: vec![T::zero(); outputs],
            grad_weight: vec![T::zero(); inputs * outputs],
            grad_bias: vec![T::zero(); outputs],
            cache: None,
        }
    }

    fn forward(&mut self, x: Tensor4<T>, train: bool) -> Result<Tensor4<T>> {
        let n = x.n();
        let features = x.c() * x.h() * x.w();
        if features != self.inputs {
            return Err(Error::shape(format!(
                "{}: {features} input features, expected {}",
                self.name, self.inputs
            )));
        }
        let (i, o) = (self.inputs, self.outputs);
        let mut y = Tensor4::zeros(n, o, 1, 1, Layout::Nchw);
        for row in y.data_mut().chunks_exact_mut(o) {
            row.copy_from_slice(&self.bias);
        }
        // y (n x o) += x (n x i) * W^T (i x o)
        T::gemm(n, i, o, T::one(), x.data(), (i as isize, 1), &self.weight, (1, i as isize), T::one(), y.data_mut(), (o as isize, 1));
        if train {
            self.cache = Some(x);
        }
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::invalid(format!("{}: backward without forward", self.name)))?;
        let (n, i, o) = (x.n(), self.inputs, self.outputs);
        // dW (o x i) = dy^T (o x n) * x (n x i)
        T::gemm(o, n, i, T::one(), dy.data(), (1, o as isize), x.data(), (i as isize, 1), T::zero(), &mut self.grad_weight, (i as isize, 1));
        self.grad_bias.fill(T::zero());
        for row in dy.data().chunks_exact(o) {
            for (b, &g) in self.grad_bias.iter_mut().zip(row) {
                *b += g;
            }
        }
        let mut dx = Tensor4::zeros(n, x.c(), x.h(), x.w(), Layout::Nchw);
        // dx (n x i) = dy (n x o) * W (o x i)
        T::gemm(n, o, i, T::one(), dy.data(), (o as isize, 1), &self.weight, (i as isize, 1), T::zero(), dx.data_mut(), (i as isize, 1));
        Ok(dx)
    }
}

/// Parameter-free shortcut: spatial subsampling by `stride` and symmetric
/// zero padding of the channel dimension.
#[derive(Debug, Clone, Copy)]
pub struct Shortcut {
    pub stride: usize,
    pub in_c: usize,
    pub out_c: usize,
}

impl Shortcut {
    fn pad_lo(&self) -> usize {
        (self.out_c - self.in_c) / 2
    }

    fn forward<T: Real>(&self, x: &Tensor4<T>) -> Tensor4<T> {
        let (ho, wo) = (x.h().div_ceil(self.stride), x.w().div_ceil(self.stride));
        let mut y = Tensor4::zeros(x.n(), self.out_c, ho, wo, Layout::Nchw);
        let lo = self.pad_lo();
        for i in 0..x.n() {
            for c in 0..self.in_c {
                for r in 0..ho {
                    for col in 0..wo {
                        y.set(i, c + lo, r, col, x.get(i, c, r * self.stride, col * self.stride));
                    }
                }
            }
        }
        y
    }

    fn backward<T: Real>(&self, dy: &Tensor4<T>, in_hw: (usize, usize)) -> Tensor4<T> {
        let mut dx = Tensor4::zeros(dy.n(), self.in_c, in_hw.0, in_hw.1, Layout::Nchw);
        let lo = self.pad_lo();
        for i in 0..dy.n() {
            for c in 0..self.in_c {
                for r in 0..dy.h() {
                    for col in 0..dy.w() {
                        dx.set(i, c, r * self.stride, col * self.stride, dy.get(i, c + lo, r, col));
                    }
                }
            }
        }
        dx
    }
}

/// `body(x) + shortcut(x)`; the trailing ReLU is a separate layer.
#[derive(Debug, Clone)]
pub struct Residual<T: Real> {
    pub body: Vec<Layer<T>>,
    pub shortcut: Shortcut,
    in_hw: (usize, usize),
}

impl<T: Real> Residual<T> {
    pub fn new(body: Vec<Layer<T>>, shortcut: Shortcut) -> Self {
        Residual {
            body,
            shortcut,
            in_hw: (0, 0),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Layer<T: Real> {
    Conv(Conv<T>),
    BatchNorm(BatchNorm<T>),
    Relu(Relu),
    MaxPool(MaxPool),
    GlobalAvgPool(GlobalAvgPool),
    Dense(Dense<T>),
    Residual(Residual<T>),
}

impl<T: Real> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Relu(_) => "relu",
            Layer::MaxPool(_) => "maxpool",
            Layer::GlobalAvgPool(_) => "global_avg_pool",
            Layer::Dense(_) => "dense",
            Layer::Residual(_) => "residual",
        }
    }

    pub fn forward(&mut self, x: Tensor4<T>, train: bool) -> Result<Tensor4<T>> {
        match self {
            Layer::Conv(l) => l.forward(x, train),
            Layer::BatchNorm(l) => l.forward(x, train),
            Layer::Relu(l) => Ok(l.forward(x, train)),
            Layer::MaxPool(l) => l.forward(&x, train),
            Layer::GlobalAvgPool(l) => Ok(l.forward(&x, train)),
            Layer::Dense(l) => l.forward(x, train),
            Layer::Residual(r) => {
                r.in_hw = (x.h(), x.w());
                let skip = r.shortcut.forward(&x);
                let mut y = x;
                for layer in &mut r.body {
                    y = layer.forward(y, train)?;
                }
                if y.dims() != skip.dims() {
                    return Err(Error::shape(format!(
                        "residual body gives {:?}, shortcut gives {:?}",
                        y.dims(),
                        skip.dims()
                    )));
                }
                for (a, &b) in y.data_mut().iter_mut().zip(skip.data()) {
                    *a += b;
                }
                Ok(y)
            }
        }
    }

    /// Returns the input gradient, or `None` where it is not needed.
    pub fn backward(&mut self, dy: Tensor4<T>, ctx: &mut BackwardCtx) -> Result<Option<Tensor4<T>>> {
        match self {
            Layer::Conv(l) => l.backward(dy, ctx),
            Layer::BatchNorm(l) => l.backward(dy).map(Some),
            Layer::Relu(l) => l.backward(dy).map(Some),
            Layer::MaxPool(l) => l.backward(&dy).map(Some),
            Layer::GlobalAvgPool(l) => l.backward(&dy).map(Some),
            Layer::Dense(l) => l.backward(&dy).map(Some),
            Layer::Residual(r) => {
                let mut dx = r.shortcut.backward(&dy, r.in_hw);
                let mut g = dy;
                for layer in r.body.iter_mut().rev() {
                    g = layer
                        .backward(g, ctx)?
                        .ok_or_else(|| Error::invalid("residual body layer dropped its input gradient"))?;
                }
                for (a, &b) in dx.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
                Ok(Some(dx))
            }
        }
    }

    pub fn params(&mut self) -> Vec<ParamRef<'_, T>> {
        match self {
            Layer::Conv(l) => vec![ParamRef {
                name: &l.name,
                value: l.weight.data_mut(),
                grad: l.grad.data(),
            }],
            Layer::BatchNorm(l) => vec![
                ParamRef {
                    name: &l.name,
                    value: &mut l.gamma,
                    grad: &l.grad_gamma,
                },
                ParamRef {
                    name: &l.name,
                    value: &mut l.beta,
                    grad: &l.grad_beta,
                },
            ],
            Layer::Dense(l) => vec![
                ParamRef {
                    name: &l.name,
                    value: &mut l.weight,
                    grad: &l.grad_weight,
                },
                ParamRef {
                    name: &l.name,
                    value: &mut l.bias,
                    grad: &l.grad_bias,
                },
            ],
            Layer::Residual(r) => r.body.iter_mut().flat_map(|l| l.params()).collect(),
            Layer::Relu(_) | Layer::MaxPool(_) | Layer::GlobalAvgPool(_) => Vec::new(),
        }
    }

    /// Parameter names with their suffixes, in `params()` order.
    pub fn param_names(&self) -> Vec<(String, Vec<usize>)> {
        match self {
            Layer::Conv(l) => vec![(
                format!("{}.weight", l.name),
                vec![l.weight.k(), l.weight.k(), l.weight.ci(), l.weight.co()],
            )],
            Layer::BatchNorm(l) => vec![
                (format!("{}.gamma", l.name), vec![l.gamma.len()]),
                (format!("{}.beta", l.name), vec![l.beta.len()]),
            ],
            Layer::Dense(l) => vec![
                (format!("{}.weight", l.name), vec![l.outputs, l.inputs]),
                (format!("{}.bias", l.name), vec![l.outputs]),
            ],
            Layer::Residual(r) => r.body.iter().flat_map(|l| l.param_names()).collect(),
            Layer::Relu(_) | Layer::MaxPool(_) | Layer::GlobalAvgPool(_) => Vec::new(),
        }
    }

    /// Non-learned state saved with checkpoints (batch-norm running stats).
    pub fn buffers(&mut self) -> Vec<(String, &mut Vec<T>)> {
        match self {
            Layer::BatchNorm(l) => vec![
                (format!("{}.running_mean", l.name), &mut l.running_mean),
                (format!("{}.running_var", l.name), &mut l.running_var),
            ],
            Layer::Residual(r) => r.body.iter_mut().flat_map(|l| l.buffers()).collect(),
            _ => Vec::new(),
        }
    }

    /// Visits every conv layer, including those inside residual blocks.
    pub fn for_each_conv(&self, f: &mut impl FnMut(&Conv<T>)) {
        match self {
            Layer::Conv(c) => f(c),
            Layer::Residual(r) => r.body.iter().for_each(|l| l.for_each_conv(f)),
            _ => {}
        }
    }
}
