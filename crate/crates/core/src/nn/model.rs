use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    BackwardCtx, BatchNorm, Conv, Dense, GlobalAvgPool, Layer, MaxPool, ParamRef, Relu, Residual,
    Shortcut,
};
use crate::approx::sparse_path_supported;
use crate::error::{Error, Result};
use crate::kernels::ConvGeometry;
use crate::real::Real;
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelName {
    Cnn2,
    Resnet20,
    Resnet14,
    Vgg19,
}

impl ModelName {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelName::Cnn2 => "cnn2",
            ModelName::Resnet20 => "resnet20",
            ModelName::Resnet14 => "resnet14",
            ModelName::Vgg19 => "vgg19",
        }
    }
}

impl fmt::Display for ModelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn2" => Ok(ModelName::Cnn2),
            "resnet20" => Ok(ModelName::Resnet20),
            "resnet14" => Ok(ModelName::Resnet14),
            "vgg19" => Ok(ModelName::Vgg19),
            _ => Err(Error::invalid(format!(
                "unknown model `{s}` (expected cnn2, resnet20, resnet14 or vgg19)"
            ))),
        }
    }
}

/// Static description of one conv layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvInfo {
    pub index: usize,
    pub k: usize,
    pub ci: usize,
    pub co: usize,
    pub stride: usize,
    pub pad: usize,
    /// The sparse kernel supports this layer's geometry.
    pub sparse_capable: bool,
}

#[derive(Debug, Clone)]
pub struct Network<T: Real> {
    pub name: ModelName,
    pub input: (usize, usize, usize),
    pub num_classes: usize,
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> Network<T> {
    /// Logits as an `n x classes x 1 x 1` tensor.
    pub fn forward(&mut self, x: Tensor4<T>, train: bool) -> Result<Tensor4<T>> {
        let (c, h, w) = self.input;
        if (x.c(), x.h(), x.w()) != (c, h, w) {
            return Err(Error::shape(format!(
                "{}: input {}x{}x{}, expected {c}x{h}x{w}",
                self.name,
                x.c(),
                x.h(),
                x.w()
            )));
        }
        self.layers.iter_mut().try_fold(x, |y, layer| layer.forward(y, train))
    }

    pub fn backward(&mut self, d_logits: Tensor4<T>, ctx: &mut BackwardCtx) -> Result<()> {
        let mut g = Some(d_logits);
        for layer in self.layers.iter_mut().rev() {
            let Some(dy) = g.take() else { break };
            g = layer.backward(dy, ctx)?;
        }
        Ok(())
    }

    pub fn params(&mut self) -> Vec<ParamRef<'_, T>> {
        self.layers.iter_mut().flat_map(|l| l.params()).collect()
    }

    /// `(name, shape)` for every parameter array, in `params()` order.
    pub fn param_names(&self) -> Vec<(String, Vec<usize>)> {
        self.layers.iter().flat_map(|l| l.param_names()).collect()
    }

    pub fn buffers(&mut self) -> Vec<(String, &mut Vec<T>)> {
        self.layers.iter_mut().flat_map(|l| l.buffers()).collect()
    }

    pub fn param_count(&mut self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn convs(&self) -> Vec<ConvInfo> {
        let mut out = Vec::new();
        for layer in &self.layers {
            layer.for_each_conv(&mut |c: &Conv<T>| {
                out.push(ConvInfo {
                    index: c.index,
                    k: c.weight.k(),
                    ci: c.weight.ci(),
                    co: c.weight.co(),
                    stride: c.geom.stride,
                    pad: c.geom.pad,
                    sparse_capable: sparse_path_supported(c.weight.k(), c.geom),
                })
            });
        }
        out
    }

    /// Number of schedule-addressable conv layers.
    pub fn conv_count(&self) -> usize {
        self.convs().len()
    }

    /// Copy of conv `index`'s filter values.
    pub fn conv_weight(&self, index: usize) -> Option<Vec<T>> {
        let mut found = None;
        for layer in &self.layers {
            layer.for_each_conv(&mut |c: &Conv<T>| {
                if c.index == index {
                    found = Some(c.weight.data().to_vec());
                }
            });
        }
        found
    }
}

struct Builder<T: Real> {
    rng: ChaCha8Rng,
    convs: usize,
    bns: usize,
    denses: usize,
    layers: Vec<Layer<T>>,
}

impl<T: Real> Builder<T> {
    fn conv(&mut self, k: usize, ci: usize, co: usize, stride: usize) -> Layer<T> {
        let geom = ConvGeometry {
            stride,
            pad: (k - 1) / 2,
        };
        let mut conv = Conv::new(self.convs, k, ci, co, geom, &mut self.rng);
        conv.needs_input_grad = self.convs > 0;
        self.convs += 1;
        Layer::Conv(conv)
    }

    fn bn(&mut self, c: usize) -> Layer<T> {
        let l = Layer::BatchNorm(BatchNorm::new(format!("bn{}", self.bns), c));
        self.bns += 1;
        l
    }

    fn dense(&mut self, i: usize, o: usize) -> Layer<T> {
        let l = Layer::Dense(Dense::new(format!("dense{}", self.denses), i, o, &mut self.rng));
        self.denses += 1;
        l
    }

    fn conv_bn_relu(&mut self, k: usize, ci: usize, co: usize, stride: usize) {
        let conv = self.conv(k, ci, co, stride);
        let bn = self.bn(co);
        self.layers.extend([conv, bn, Layer::Relu(Relu::default())]);
    }
}

/// Builds a model for `(channels, height, width)` inputs with seeded
/// fan-in-scaled normal initialization.
pub fn build_model<T: Real>(
    name: ModelName,
    input: (usize, usize, usize),
    num_classes: usize,
    seed: u64,
) -> Result<Network<T>> {
    let (c, h, w) = input;
    if c == 0 || h == 0 || w == 0 || num_classes == 0 {
        return Err(Error::invalid("model input and class count must be positive"));
    }
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        convs: 0,
        bns: 0,
        denses: 0,
        layers: Vec::new(),
    };
    match name {
        ModelName::Cnn2 => {
            let (mut hh, mut ww) = (h, w);
            let mut ci = c;
            for _ in 0..2 {
                b.conv_bn_relu(5, ci, 64, 1);
                let pool = MaxPool::new(3, 2, 1);
                hh = pool.output_size(hh);
                ww = pool.output_size(ww);
                b.layers.push(Layer::MaxPool(pool));
                ci = 64;
            }
            let d0 = b.dense(64 * hh * ww, 384);
            let d1 = b.dense(384, 192);
            let d2 = b.dense(192, num_classes);
            b.layers.extend([
                d0,
                Layer::Relu(Relu::default()),
                d1,
                Layer::Relu(Relu::default()),
                d2,
            ]);
        }
        ModelName::Resnet20 | ModelName::Resnet14 => {
            let blocks = if name == ModelName::Resnet20 { 3 } else { 2 };
            b.conv_bn_relu(3, c, 16, 1);
            let mut in_c = 16;
            for (stage, width) in [16usize, 32, 64].into_iter().enumerate() {
                for blk in 0..blocks {
                    let stride = if stage > 0 && blk == 0 { 2 } else { 1 };
                    let c1 = b.conv(3, in_c, width, stride);
                    let n1 = b.bn(width);
                    let c2 = b.conv(3, width, width, 1);
                    let n2 = b.bn(width);
                    let body = vec![c1, n1, Layer::Relu(Relu::default()), c2, n2];
                    let shortcut = Shortcut {
                        stride,
                        in_c,
                        out_c: width,
                    };
                    b.layers.push(Layer::Residual(Residual::new(body, shortcut)));
                    b.layers.push(Layer::Relu(Relu::default()));
                    in_c = width;
                }
            }
            b.layers.push(Layer::GlobalAvgPool(GlobalAvgPool::default()));
            let head = b.dense(64, num_classes);
            b.layers.push(head);
        }
        ModelName::Vgg19 => {
            const CFG: [usize; 21] = [
                64, 64, 0, 128, 128, 0, 256, 256, 256, 256, 0, 512, 512, 512, 512, 0, 512, 512, 512,
                512, 0,
            ];
            let (mut hh, mut ww, mut ci) = (h, w, c);
            for &v in &CFG {
                if v == 0 {
                    let pool = MaxPool::new(2, 2, 0);
                    if hh < 2 || ww < 2 {
                        return Err(Error::invalid("vgg19 input too small for five 2x2 pools"));
                    }
                    hh = pool.output_size(hh);
                    ww = pool.output_size(ww);
                    b.layers.push(Layer::MaxPool(pool));
                } else {
                    b.conv_bn_relu(3, ci, v, 1);
                    ci = v;
                }
            }
            let head = b.dense(512 * hh * ww, num_classes);
            b.layers.push(head);
        }
    }
    Ok(Network {
        name,
        input,
        num_classes,
        layers: b.layers,
    })
}
