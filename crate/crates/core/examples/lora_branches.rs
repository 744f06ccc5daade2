//! Branch initialisation, freezing policies and LoRA adapters on the model.

use jco_mvton::image::ImageTensor;
use jco_mvton::model::{JcoModel, LoraConfig, ModelConfig, TrainPolicy};
use jco_mvton::Result;

pub fn run() -> Result<()> {
    let cfg = ModelConfig {
        dim: 32,
        heads: 2,
        blocks: 2,
        lora: Some(LoraConfig { rank: 4, alpha: 4.0 }),
        ..ModelConfig::default()
    };
    let mut model = JcoModel::init(cfg, 0)?;
    model.fill_zero_init(1, 0.05);
    let tn = model.params.get("blocks.0.attn.tn.q")?;
    let c1 = model.params.get("blocks.0.attn.c1.q")?;
    println!("c1 query starts as a copy of t&n: {}", tn == c1);

    for policy in [TrainPolicy::Full, TrainPolicy::ConditionalOnly, TrainPolicy::ConditionalLora] {
        model.set_trainable(policy)?;
        println!("{:>16}: {:>7} trainable of {}", policy.as_str(), model.params.trainable_count(), model.params.total_count());
    }
    println!("closed form for LoRA: blocks·2·4·r·2d = {}", 2 * 2 * 4 * 4 * 64);

    // with B = 0 the adapters change nothing
    let x = ImageTensor::filled(3, 32, 24, 0.4);
    let p = ImageTensor::filled(3, 32, 24, 0.6);
    let g = ImageTensor::filled(3, 16, 16, 0.2);
    let mut zeroed = model.clone();
    for prm in zeroed.params.iter_mut().filter(|p| p.name.ends_with("lora_up")) {
        prm.value = prm.value.map(|_| 0.0);
    }
    let mut plain_cfg = zeroed.config.clone();
    plain_cfg.lora = None;
    let mut plain = JcoModel::init(plain_cfg, 0)?;
    for prm in plain.params.iter_mut() {
        prm.value = zeroed.params.get(&prm.name)?.clone();
    }
    let a = zeroed.forward(&x, Some(&p), Some(&g), 0.3)?;
    let b = plain.forward(&x, Some(&p), Some(&g), 0.3)?;
    println!("zero-B LoRA vs no LoRA: max-abs-diff {}", a.max_abs_diff(&b));
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run()
}
