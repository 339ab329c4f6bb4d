use super::layers::{BackwardCtx, ConvRecord};
use super::loss::{predictions, softmax_cross_entropy};
use super::model::Network;
use super::optim::{Adam, AdamConfig};
use crate::approx::MethodParams;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::schedule::Schedule;
use crate::tensor::Tensor4;

#[derive(Debug, Clone)]
pub struct StepStats {
    pub loss: f64,
    /// Filter-gradient method used by each conv layer, in backward order.
    pub records: Vec<ConvRecord>,
}

/// A network, its optimizer, and the schedule routing its conv filter
/// gradients.
#[derive(Debug, Clone)]
pub struct Trainer<T: Real> {
    pub net: Network<T>,
    pub opt: Adam<T>,
    pub schedule: Schedule,
    pub params: MethodParams,
    pub seed: u64,
}

impl<T: Real> Trainer<T> {
    pub fn new(
        net: Network<T>,
        schedule: Schedule,
        params: MethodParams,
        adam: AdamConfig,
        seed: u64,
    ) -> Result<Self> {
        if schedule.num_layers() != net.conv_count() {
            return Err(Error::invalid(format!(
                "schedule covers {} conv layers, {} has {}",
                schedule.num_layers(),
                net.name,
                net.conv_count()
            )));
        }
        Ok(Trainer {
            net,
            opt: Adam::new(adam),
            schedule,
            params,
            seed,
        })
    }

    /// Forward, backward with schedule-selected filter gradients, and one
    /// optimizer update of every parameter.
    pub fn train_step(&mut self, images: Tensor4<T>, labels: &[usize], step: u64, epoch: usize) -> Result<StepStats> {
        let logits = self.net.forward(images, true)?;
        let (loss, d_logits) = softmax_cross_entropy(&logits, labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { step, loss });
        }
        let mut ctx = BackwardCtx::scheduled(&self.schedule, self.params, step, self.seed);
        self.net.backward(d_logits, &mut ctx)?;
        let records = ctx.records;
        self.opt.step(self.net.params(), epoch)?;
        Ok(StepStats { loss, records })
    }

    /// Classification accuracy in inference mode.
    pub fn evaluate(&mut self, images: &Tensor4<T>, labels: &[usize], batch: usize) -> Result<f64> {
        evaluate(&mut self.net, images, labels, batch)
    }
}

pub fn evaluate<T: Real>(net: &mut Network<T>, images: &Tensor4<T>, labels: &[usize], batch: usize) -> Result<f64> {
    if images.n() != labels.len() {
        return Err(Error::shape(format!("{} images, {} labels", images.n(), labels.len())));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let mut start = 0;
    while start < labels.len() {
        let end = (start + batch.max(1)).min(labels.len());
        let idx: Vec<usize> = (start..end).collect();
        let logits = net.forward(images.select_items(&idx), false)?;
        correct += predictions(&logits)
            .iter()
            .zip(&labels[start..end])
            .filter(|(p, l)| p == l)
            .count();
        start = end;
    }
    Ok(correct as f64 / labels.len() as f64)
}
