use std::collections::BTreeMap;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{JcoModel, ParamStore};
use crate::error::{Error, Result};
use crate::flow::{rf_interpolate, rf_target};
use crate::image::ImageTensor;
use crate::patch::patchify;
use crate::tensor::{Tape, Tensor};

/// One supervised example: generate `target` given the optional conditions.
#[derive(Clone, Copy, Debug)]
pub struct TrainItem<'a> {
    pub target: &'a ImageTensor,
    pub person: Option<&'a ImageTensor>,
    pub garment: Option<&'a ImageTensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Anneal the learning rate to zero along a half cosine over the run.
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 4,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            cosine_decay: false,
        }
    }
}

/// Parameter update rule. Gradients are keyed by parameter id and only
/// present for trainable parameters.
pub trait Optimizer {
    fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<usize, Tensor>);
    fn set_lr(&mut self, lr: f64);
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: BTreeMap<usize, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<usize, Tensor>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (&id, g) in grads {
            let p = params.by_id_mut(id);
            let n = g.numel();
            let (m, v) = self.moments.entry(id).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let mut data = p.value.data().to_vec();
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            p.value = Tensor::new(p.value.shape().to_vec(), data).expect("shape preserved");
        }
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// Snapshot of every frozen parameter, for bitwise before/after checks.
#[derive(Clone, Debug)]
pub struct FrozenAudit {
    snapshot: Vec<(usize, Tensor)>,
}

impl FrozenAudit {
    pub fn capture(model: &JcoModel) -> Self {
        let snapshot = model
            .params
            .iter()
            .enumerate()
            .filter(|(_, p)| !p.trainable)
            .map(|(i, p)| (i, p.value.clone()))
            .collect();
        FrozenAudit { snapshot }
    }

    pub fn checked(&self) -> usize {
        self.snapshot.len()
    }

    /// Names of frozen parameters whose bits changed.
    pub fn changed(&self, model: &JcoModel) -> Vec<String> {
        self.snapshot
            .iter()
            .filter(|(i, t)| {
                let now = &model.params.by_id(*i).value;
                now.data().iter().zip(t.data()).any(|(a, b)| a.to_bits() != b.to_bits())
            })
            .map(|(i, _)| model.params.by_id(*i).name.clone())
            .collect()
    }
}

fn mix(seed: u64, step: u64, item: u64) -> u64 {
    // splitmix-style scramble so neighbouring (step, item) pairs decorrelate
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ item.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Drives optimisation with deterministic per-item noise.
#[derive(Clone, Debug)]
pub struct Trainer<O: Optimizer = Adam> {
    pub config: TrainConfig,
    pub optimizer: O,
    pub step: u64,
    /// Total steps planned, for the decay schedule.
    pub horizon: Option<u64>,
}

impl Trainer<Adam> {
    pub fn new(config: TrainConfig) -> Self {
        Trainer {
            optimizer: Adam::from_config(&config),
            config,
            step: 0,
            horizon: None,
        }
    }
}

impl<O: Optimizer> Trainer<O> {
    pub fn with_optimizer(config: TrainConfig, optimizer: O) -> Self {
        Trainer {
            config,
            optimizer,
            step: 0,
            horizon: None,
        }
    }

    pub fn with_horizon(mut self, steps: u64) -> Self {
        self.horizon = Some(steps);
        self
    }

    /// Learning rate for the current step.
    pub fn lr(&self) -> f64 {
        match self.horizon {
            Some(h) if self.config.cosine_decay && h > 0 => {
                let frac = self.step.min(h) as f64 / h as f64;
                0.5 * self.config.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
            _ => self.config.lr,
        }
    }

    /// Deterministic minibatch for the current step, drawn without
    /// replacement from `0..n`.
    pub fn batch_indices(&self, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config.seed, self.step, u64::MAX));
        let k = self.config.batch_size.min(n);
        sample_indices(&mut rng, n, k).into_vec()
    }

    /// Loss and gradients of one item; `seed` fixes its `t` and noise.
    fn item_grads(model: &JcoModel, item: &TrainItem<'_>, seed: u64) -> Result<(f64, Vec<(usize, Tensor)>)> {
        let rf = &model.config.rf;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: f64 = rng.gen_range(0.0..rf.t_max);
        let x0 = item.target.to_tensor();
        let eps = Tensor::from_fn(x0.shape(), |_| rng.sample(rand_distr::StandardNormal));
        let xt = rf_interpolate(&x0, &eps, t)?;
        let target = ImageTensor::from_tensor(&rf_target(&x0, &xt, &eps, t, rf)?)?;
        let target = patchify(&target, model.config.patch)?.vectors;
        let noisy = ImageTensor::from_tensor(&xt)?;

        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape);
        let fwd = model.forward_on_tape(&mut tape, &vars, &noisy, item.person, item.garment, t)?;
        let tv = tape.constant(target);
        let loss = tape.mse(fwd.velocity, tv)?;
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        let out = model
            .params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.trainable)
            .map(|(i, p)| (i, grads.take(vars[i]).unwrap_or_else(|| Tensor::zeros(p.value.shape()))))
            .collect();
        Ok((value, out))
    }

    /// Mean gradient over `batch` without touching the parameters.
    pub fn gradients(&self, model: &JcoModel, batch: &[TrainItem<'_>]) -> Result<(f64, BTreeMap<usize, Tensor>)> {
        if batch.is_empty() {
            return Err(Error::contract("train_step", "empty batch"));
        }
        let seed = self.config.seed;
        let step = self.step;
        let per_item: Vec<_> = batch
            .par_iter()
            .enumerate()
            .map(|(i, item)| Self::item_grads(model, item, mix(seed, step, i as u64)))
            .collect::<Result<_>>()?;
        let inv = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut sum: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        // fixed item order keeps the reduction bitwise reproducible
        for (l, grads) in per_item {
            loss += l;
            for (id, g) in grads {
                let acc = sum.entry(id).or_insert_with(|| vec![0.0; g.numel()]);
                for (a, v) in acc.iter_mut().zip(g.data()) {
                    *a += v;
                }
            }
        }
        loss *= inv;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("training loss at step {step} (batch seed {})", mix(seed, step, 0)),
            });
        }
        let grads = sum
            .into_iter()
            .map(|(id, g)| {
                let shape = model.params.by_id(id).value.shape().to_vec();
                (id, Tensor::new(shape, g.into_iter().map(|v| v * inv).collect()).expect("shape"))
            })
            .collect();
        Ok((loss, grads))
    }

    /// One optimiser update on `batch`. Returns the mean loss before it.
    pub fn train_step(&mut self, model: &mut JcoModel, batch: &[TrainItem<'_>]) -> Result<f64> {
        let (loss, grads) = self.gradients(model, batch)?;
        self.optimizer.set_lr(self.lr());
        self.optimizer.step(&mut model.params, &grads);
        self.step += 1;
        Ok(loss)
    }
}
