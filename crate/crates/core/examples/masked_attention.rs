//! The person/garment exclusion mask, the block-skip kernel and its MAC savings.

use jco_mvton::attention::{
    build_mask, joint_attention, joint_attention_blockskip, BranchProjections, ProjectionWeights, Segmentation,
    TokenSequence, SCORE_MACS,
};
use jco_mvton::tensor::Tensor;
use jco_mvton::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn run() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seg = Segmentation::new(2, 6, 6, 4);
    let d = 16;
    let tokens = Tensor::from_fn(&[seg.total(), d], |_| rng.gen_range(-1.0..1.0));
    let seq = TokenSequence::new(tokens, seg)?;
    let proj = BranchProjections {
        text_noise: ProjectionWeights::init(d, &mut rng),
        reference: ProjectionWeights::init(d, &mut rng),
        garment: ProjectionWeights::init(d, &mut rng),
    };
    let mask = build_mask(seg);
    println!("{} of {} score entries blocked", mask.blocked_count(), seg.total() * seg.total());

    let dense = joint_attention(&seq, &proj, None, Some(&mask), 2)?;
    let skip = joint_attention_blockskip(&seq, &proj, None, 2)?;
    let leak = dense.weights.iter().flat_map(|w| {
        let mut v = Vec::new();
        for i in seg.reference_span() {
            for j in seg.garment_span() {
                v.push(w.at2(i, j));
                v.push(w.at2(j, i));
            }
        }
        v
    });
    println!("max c1<->c2 weight: {}", leak.fold(0.0f64, f64::max));
    let diff = dense.output.tokens.max_abs_diff(&skip.output.tokens);
    println!("dense vs block-skip max-abs-diff: {diff:.2e}");
    let saved = dense.flops.get(SCORE_MACS) - skip.flops.get(SCORE_MACS);
    println!("score MACs saved: {saved} (2·|C1|·|C2|·d_k·heads = {})", 2 * 6 * 4 * 8 * 2);
    Ok(diff)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run().map(|_| ())
}
