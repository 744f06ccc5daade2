#![allow(dead_code)]

use jco_mvton::attention::{BranchProjections, ProjectionWeights, Segmentation, TokenSequence};
use jco_mvton::model::ModelConfig;
use jco_mvton::tensor::{Tape, Tensor, Var};
use jco_mvton::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Reduces any output to a scalar through fixed random weights, so every
/// output coordinate contributes a distinct gradient.
pub fn probe_sum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let w = uniform(&mut rng(seed ^ 0xABCD), &shape, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

/// Random segmentation with non-empty noise and reference spans.
pub fn random_seg(rng: &mut impl Rng) -> Segmentation {
    Segmentation::new(
        rng.gen_range(0..=3),
        rng.gen_range(1..=6),
        rng.gen_range(1..=6),
        rng.gen_range(0..=5),
    )
}

pub fn random_seq(rng: &mut impl Rng, seg: Segmentation, d: usize) -> TokenSequence {
    TokenSequence::new(uniform(rng, &[seg.total(), d], 1.0), seg).expect("shape")
}

pub fn random_proj(rng: &mut impl Rng, d: usize) -> BranchProjections {
    BranchProjections {
        text_noise: ProjectionWeights::init(d, rng),
        reference: ProjectionWeights::init(d, rng),
        garment: ProjectionWeights::init(d, rng),
    }
}

/// A model small enough for per-test training loops.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        dim: 16,
        heads: 2,
        blocks: 1,
        image: [8, 8],
        garment: [4, 4],
        text_len: 2,
        ..ModelConfig::default()
    }
}
