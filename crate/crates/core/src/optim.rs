//! Learning-rate schedule and heavy-ball SGD over a [`ParamSet`].

use std::f64::consts::PI;

use crate::encoder::{ParamKind, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear warmup from 0 to `peak` over `warmup` steps, then a half-cosine
/// decay to 0 at `total`.
pub fn lr_at(step: usize, peak: f64, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let t = (step - warmup) as f64 / span;
    peak * (1.0 + (PI * t).cos()) / 2.0
}

/// Plain heavy-ball momentum: `v = mu*v + g + wd*w` (decay on linear
/// weights only), then `w -= lr*v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    /// One buffer per trainable tensor, stage by stage.
    velocity: Vec<Vec<Tensor>>,
    pub steps: usize,
}

impl Sgd {
    pub fn new(params: &ParamSet, momentum: f64, weight_decay: f64) -> Self {
        let velocity = params
            .stages
            .iter()
            .map(|s| {
                let mut bufs = Vec::new();
                s.for_each_trainable(|_, t| bufs.push(Tensor::zeros(t.shape())));
                bufs
            })
            .collect();
        Sgd {
            momentum,
            weight_decay,
            velocity,
            steps: 0,
        }
    }

    pub fn velocity(&self) -> &[Vec<Tensor>] {
        &self.velocity
    }

    /// Apply one update. `grads[s][k]` is the gradient of the k-th trainable
    /// tensor of stage s; `None` means no gradient reached it.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &[Vec<Option<Tensor>>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != params.stages.len() {
            return Err(Error::Contract(format!(
                "{} gradient groups for {} stages",
                grads.len(),
                params.stages.len()
            )));
        }
        let (mu, wd) = (self.momentum, self.weight_decay);
        for ((stage, stage_grads), bufs) in
            params.stages.iter_mut().zip(grads).zip(&mut self.velocity)
        {
            let mut k = 0;
            let mut bad = None;
            stage.for_each_trainable_mut(|kind, w| {
                let v = &mut bufs[k];
                let g = stage_grads.get(k).and_then(Option::as_ref);
                if g.is_some_and(|g| g.shape() != w.shape()) {
                    bad = Some(k);
                }
                let decay = if kind == ParamKind::Weight { wd } else { 0.0 };
                for (i, (wi, vi)) in w.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
                    let gi = g.map_or(0.0, |g| g.data()[i]);
                    *vi = mu * *vi + gi + decay * *wi;
                    *wi -= lr * *vi;
                }
                k += 1;
            });
            if let Some(k) = bad {
                return Err(Error::Contract(format!(
                    "gradient {k} of stage {} has the wrong shape",
                    stage.name
                )));
            }
        }
        self.steps += 1;
        Ok(())
    }
}
