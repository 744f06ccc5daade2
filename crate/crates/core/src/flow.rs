//! Rectified-flow objective and Euler sampler.
//!
//! Samples move along the straight path `x_t = (1 − t)·x0 + t·ε`, so `t = 0`
//! is data and `t = 1` is noise. Two velocity parameterisations are
//! supported:
//!
//! * [`Parameterization::ConstantVelocity`] regresses `x0 − ε`, the direction
//!   of travel from noise to data along the path.
//! * [`Parameterization::TimeScaled`] regresses `(x0 − x_t)/(1 − t)`, which
//!   equals `t/(1 − t)·(x0 − ε)`. It diverges as `t → 1`, so `t` is capped at
//!   `t_max < 1`.
//!
//! The sampler always integrates from `t_max` down to 0. Under `TimeScaled` a
//! prediction `v` is first converted to the constant-velocity form
//! `u = (1 − t)/t · v`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    TimeScaled,
    ConstantVelocity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RfConfig {
    pub parameterization: Parameterization,
    pub t_max: f64,
    pub sampler_steps: usize,
}

impl Default for RfConfig {
    fn default() -> Self {
        RfConfig {
            parameterization: Parameterization::ConstantVelocity,
            t_max: 0.99,
            sampler_steps: 20,
        }
    }
}

impl RfConfig {
    /// `0 < t_max < 1` (`t_max = 1` is allowed for constant velocity) and at
    /// least one sampler step.
    pub fn validate(&self) -> Result<()> {
        let ok_t = match self.parameterization {
            Parameterization::TimeScaled => self.t_max > 0.0 && self.t_max < 1.0,
            Parameterization::ConstantVelocity => self.t_max > 0.0 && self.t_max <= 1.0,
        };
        if !ok_t {
            return Err(Error::contract("rf_config", format!("t_max {} out of range", self.t_max)));
        }
        if self.sampler_steps == 0 {
            return Err(Error::contract("rf_config", "sampler_steps must be >= 1"));
        }
        Ok(())
    }
}

/// One training example on the flow path.
#[derive(Clone, Debug, PartialEq)]
pub struct RfBatch {
    pub x0: Tensor,
    pub eps: Tensor,
    pub t: f64,
    pub xt: Tensor,
}

impl RfBatch {
    pub fn new(x0: Tensor, eps: Tensor, t: f64) -> Result<Self> {
        let xt = rf_interpolate(&x0, &eps, t)?;
        Ok(RfBatch { x0, eps, t, xt })
    }
}

/// `(1 − t)·x0 + t·ε`. Exact at both endpoints.
pub fn rf_interpolate(x0: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::contract("rf_interpolate", format!("t = {t} outside [0, 1]")));
    }
    if t == 0.0 {
        if x0.shape() != eps.shape() {
            return Err(Error::dim("rf_interpolate", format!("{:?} vs {:?}", x0.shape(), eps.shape())));
        }
        return Ok(x0.clone());
    }
    if t == 1.0 {
        if x0.shape() != eps.shape() {
            return Err(Error::dim("rf_interpolate", format!("{:?} vs {:?}", x0.shape(), eps.shape())));
        }
        return Ok(eps.clone());
    }
    x0.zip_map(eps, |a, e| (1.0 - t) * a + t * e)
}

/// Regression target for the configured parameterisation.
pub fn rf_target(x0: &Tensor, xt: &Tensor, eps: &Tensor, t: f64, cfg: &RfConfig) -> Result<Tensor> {
    match cfg.parameterization {
        Parameterization::TimeScaled => {
            if t >= cfg.t_max || t >= 1.0 {
                return Err(Error::contract(
                    "rf_target",
                    format!("t = {t} is at or beyond t_max = {}", cfg.t_max),
                ));
            }
            let inv = 1.0 / (1.0 - t);
            x0.zip_map(xt, |a, x| (a - x) * inv)
        }
        Parameterization::ConstantVelocity => {
            if xt.shape() != x0.shape() {
                return Err(Error::dim("rf_target", "x_t shape differs from x0"));
            }
            x0.zip_map(eps, |a, e| a - e)
        }
    }
}

/// Mean squared error over all elements.
pub fn rf_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let d = pred.zip_map(target, |a, b| a - b)?;
    Ok(d.data().iter().map(|v| v * v).sum::<f64>() / d.numel() as f64)
}

/// Anything that predicts a velocity for state `x` at time `t`.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

impl<F> VelocityField for F
where
    F: Fn(&Tensor, f64) -> Result<Tensor>,
{
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self(x, t)
    }
}

/// Integrates from `t_max` to 0 in `cfg.sampler_steps` uniform Euler steps.
///
/// Under `TimeScaled` the final step (the one evaluated at `t = Δt`) reuses the
/// previous step's converted velocity, since the conversion factor
/// `(1 − t)/t` amplifies prediction error as `t → 0`.
pub fn euler_sample<M: VelocityField + ?Sized>(model: &M, x_init: &Tensor, cfg: &RfConfig) -> Result<Tensor> {
    cfg.validate()?;
    let steps = cfg.sampler_steps;
    let dt = cfg.t_max / steps as f64;
    let mut x = x_init.clone();
    let mut last_u: Option<Tensor> = None;
    for k in 0..steps {
        let t = cfg.t_max * (steps - k) as f64 / steps as f64;
        let final_step = k + 1 == steps;
        let u = match cfg.parameterization {
            Parameterization::ConstantVelocity => check(model.velocity(&x, t)?, t)?,
            Parameterization::TimeScaled => match (&last_u, final_step) {
                (Some(prev), true) => prev.clone(),
                _ => {
                    let v = check(model.velocity(&x, t)?, t)?;
                    let factor = (1.0 - t) / t;
                    v.map(|e| e * factor)
                }
            },
        };
        if u.shape() != x.shape() {
            return Err(Error::dim("euler_sample", format!("velocity {:?} for state {:?}", u.shape(), x.shape())));
        }
        x = x.zip_map(&u, |a, b| a + dt * b)?;
        last_u = Some(u);
    }
    Ok(x)
}

fn check(v: Tensor, t: f64) -> Result<Tensor> {
    if !v.all_finite() {
        return Err(Error::NonFinite {
            context: format!("velocity prediction at t = {t:.6}"),
        });
    }
    Ok(v)
}
