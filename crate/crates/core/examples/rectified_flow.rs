//! Both velocity parameterisations on a toy problem with a known answer.

use jco_mvton::flow::{euler_sample, rf_interpolate, rf_target, Parameterization, RfConfig};
use jco_mvton::tensor::Tensor;
use jco_mvton::Result;

pub fn run() -> Result<f64> {
    let x0 = Tensor::new(vec![3], vec![0.2, -0.5, 0.9])?;
    let eps = Tensor::new(vec![3], vec![1.0, 0.3, -1.2])?;
    let dir = x0.zip_map(&eps, |a, e| a - e)?;

    let xt = rf_interpolate(&x0, &eps, 0.5)?;
    let ts = RfConfig { parameterization: Parameterization::TimeScaled, ..RfConfig::default() };
    println!("x_0.5 = {:?}", xt.data());
    println!("scaled target at t=0.5 = {:?}", rf_target(&x0, &xt, &eps, 0.5, &ts)?.data());

    // the oracle field for each parameterisation
    let cv = RfConfig { parameterization: Parameterization::ConstantVelocity, t_max: 1.0, sampler_steps: 8 };
    let constant = |_: &Tensor, _: f64| Ok(dir.clone());
    let out = euler_sample(&constant, &eps, &cv)?;
    println!("constant velocity, 8 steps from eps: {:?}", out.data());

    let start = rf_interpolate(&x0, &eps, ts.t_max)?;
    let scaled = |_: &Tensor, t: f64| Ok(dir.map(|v| v * t / (1.0 - t)));
    let out2 = euler_sample(&scaled, &start, &ts)?;
    let err = out2.max_abs_diff(&x0);
    println!("scaled oracle, {} steps from t_max: max error {err:.2e}", ts.sampler_steps);
    Ok(err)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run().map(|_| ())
}
