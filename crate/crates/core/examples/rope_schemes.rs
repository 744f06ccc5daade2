//! Joint position layouts and the relative-position property of 2D RoPE.

use jco_mvton::patch::GridDims;
use jco_mvton::rope::{apply_rope, build_positions, PosScheme, PositionGrid, RopeConfig};
use jco_mvton::tensor::Tensor;
use jco_mvton::Result;

pub fn run() -> Result<()> {
    let (noise, garment) = (GridDims::new(2, 3), GridDims::new(2, 2));
    for scheme in [PosScheme::Disjoint, PosScheme::Shared] {
        let pos = build_positions(scheme, noise, noise, garment, 2)?;
        println!("{}:", scheme.tag());
        println!("  text      {:?}", pos.span(0, 2));
        println!("  noise     {:?}", pos.span(2, 6));
        println!("  reference {:?}", pos.span(8, 6));
        println!("  garment   {:?}", pos.span(14, 4));
    }

    // q·k after rotation depends only on the offset between positions
    let cfg = RopeConfig::new(8);
    let q = Tensor::from_fn(&[1, 8], |i| (i as f64 + 1.0).cos());
    let k = Tensor::from_fn(&[1, 8], |i| (i as f64 * 0.5).sin());
    let score = |pq: (usize, usize), pk: (usize, usize)| -> Result<f64> {
        let a = apply_rope(&q, &PositionGrid::new(vec![pq]), &cfg)?;
        let b = apply_rope(&k, &PositionGrid::new(vec![pk]), &cfg)?;
        Ok(a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum())
    };
    let s1 = score((1, 2), (3, 5))?;
    let s2 = score((4, 0), (6, 3))?;
    println!("score at offset (2, 3) from two origins: {s1:.12} vs {s2:.12}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run()
}
