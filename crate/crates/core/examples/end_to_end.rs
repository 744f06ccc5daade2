//! A short try-on run on a reduced model: pretrain the backbone without
//! conditions, copy its projections into the person and garment branches,
//! train only those, then sample.

use jco_mvton::cli::{evaluate, train_loop};
use jco_mvton::data::{gen_pool, GenConfig};
use jco_mvton::model::{JcoModel, ModelConfig, ModelSampler, TrainConfig, TrainPolicy};
use jco_mvton::Result;

pub fn run(steps: usize) -> Result<(f64, f64)> {
    let pool = gen_pool(0, 4, &GenConfig::default())?;
    let cfg = ModelConfig { dim: 32, heads: 2, blocks: 2, ..ModelConfig::default() };
    let train = TrainConfig { batch_size: 4, ..TrainConfig::default() };
    let mut model = JcoModel::init(cfg, 0)?;

    let before = evaluate(&pool, &ModelSampler { model: &model, steps: 10 }, 0, "example")?.1;

    model.set_trainable(TrainPolicy::Full)?;
    let bb = train_loop(&mut model, &pool, &train, steps, true)?;
    model.init_conditional_branches();
    model.set_trainable(TrainPolicy::ConditionalOnly)?;
    let cond = train_loop(&mut model, &pool, &train, steps, false)?;
    println!("backbone loss {:.4} -> {:.4}", bb.losses[0], bb.losses[steps - 1]);
    println!("conditional loss {:.4} -> {:.4}, frozen changed: {:?}", cond.losses[0], cond.losses[steps - 1], cond.frozen_changed);

    let after = evaluate(&pool, &ModelSampler { model: &model, steps: 10 }, 0, "example")?.1;
    let ssim = |m: &[jco_mvton::metrics::MetricReport]| m[0].value.unwrap_or(1.0);
    println!("ssim untrained {:.3} -> trained {:.3}", ssim(&before), ssim(&after));
    Ok((ssim(&before), ssim(&after)))
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run(300).map(|_| ())
}
