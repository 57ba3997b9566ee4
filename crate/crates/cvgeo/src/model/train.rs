//! Training schedule, optimizer and the single-step update.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::bbox::BBox;
use crate::model::loss::detection_loss;
use crate::model::GeoLocalizer;
use crate::nn::{ParamId, ParamSet, Session};

/// Optimization schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Initial learning rate.
    pub lr0: f64,
    /// Halve the learning rate every this many epochs (0 disables decay).
    pub halve_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            halve_every: 10,
            batch_size: 12,
            epochs: 25,
        }
    }
}

/// Step-decay schedule: the initial rate halved once per `halve_every`
/// completed epochs.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if cfg.halve_every == 0 {
        return cfg.lr0;
    }
    cfg.lr0 * 0.5f64.powi((epoch / cfg.halve_every) as i32)
}

#[derive(Debug, Clone)]
pub(crate) struct Moments {
    pub(crate) m: ArrayD<f64>,
    pub(crate) v: ArrayD<f64>,
}

/// Adam optimizer (bias-corrected first/second moments, no weight decay).
/// Checkpoints persist its state through [`crate::model::checkpoint`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub(crate) t: u64,
    pub(crate) moments: Vec<Option<Moments>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update. `grads` comes from [`Session::grads`]; parameters
    /// without an entry are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[(ParamId, ArrayD<f64>)], lr: f64) {
        self.t += 1;
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, grad) in grads {
            let slot = &mut self.moments[id.index()];
            if slot.is_none() {
                *slot = Some(Moments {
                    m: ArrayD::zeros(grad.raw_dim()),
                    v: ArrayD::zeros(grad.raw_dim()),
                });
            }
            let mom = slot.as_mut().expect("just initialized");
            mom.m.zip_mut_with(grad, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            mom.v
                .zip_mut_with(grad, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let value = params.value_mut(*id);
            ndarray::Zip::from(value)
                .and(&mom.m)
                .and(&mom.v)
                .for_each(|p, &m, &v| {
                    *p -= lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
                });
        }
    }
}

/// One training mini-batch of prepared tensors.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, C+1, Hq, Wq)` encoded query images.
    pub queries: ArrayD<f64>,
    /// `(B, 3, Hr, Wr)` reference images.
    pub references: ArrayD<f64>,
    /// Ground-truth boxes in model reference coordinates.
    pub gt_boxes: Vec<BBox>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.gt_boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt_boxes.is_empty()
    }
}

/// Runs forward + backward + Adam on one batch; returns the loss value.
pub fn train_step(
    model: &mut GeoLocalizer,
    optimizer: &mut Adam,
    batch: &Batch,
    lr: f64,
) -> Result<f64> {
    let (loss_value, grads, buffer_updates) = {
        let mut sess = Session::new(&model.params, true);
        let query = sess.input(batch.queries.clone());
        let reference = sess.input(batch.references.clone());
        let raw = model.forward_raw(&mut sess, query, reference)?;
        let loss = detection_loss(
            &mut sess,
            raw,
            &batch.gt_boxes,
            model.reference_stride(),
            model.config().anchor_w,
            model.config().anchor_h,
        )?;
        let value = sess.tape.value(loss)[[0]];
        let grads = sess.grads(loss)?;
        (value, grads, std::mem::take(&mut sess.buffer_updates))
    };
    if !loss_value.is_finite() {
        return Err(Error::Runtime(format!(
            "non-finite training loss {loss_value}"
        )));
    }
    optimizer.step(&mut model.params, &grads, lr);
    for (id, value) in buffer_updates {
        *model.params.value_mut(id) = value;
    }
    Ok(loss_value)
}
