//! Axial RoPE: relative-position scores, norm preservation, a direct trig
//! oracle, and the joint layouts.

mod common;

use std::collections::HashSet;

use common::{random_proj, random_seq, rng, uniform};
use jco_mvton::attention::{build_mask, joint_attention, Segmentation};
use jco_mvton::patch::GridDims;
use jco_mvton::rope::{apply_rope, build_positions, PosScheme, PositionGrid, RopeConfig};
use jco_mvton::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn rotate(v: &Tensor, pos: (usize, usize), cfg: &RopeConfig) -> Tensor {
    apply_rope(v, &PositionGrid::new(vec![pos]), cfg).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Straight from the definition: pair `j` of the row half turns by
/// `row·θ^(−4j/head_dim)`, pair `j` of the column half by `col·θ^(−4j/head_dim)`.
fn rope_oracle(v: &[f64], (row, col): (usize, usize), theta: f64) -> Vec<f64> {
    let hd = v.len();
    let quarter = hd / 4;
    let mut out = v.to_vec();
    for p in 0..hd / 2 {
        let (coord, j) = if p < quarter { (row, p) } else { (col, p - quarter) };
        let a = coord as f64 * theta.powf(-4.0 * j as f64 / hd as f64);
        let (x, y) = (v[2 * p], v[2 * p + 1]);
        out[2 * p] = x * a.cos() - y * a.sin();
        out[2 * p + 1] = x * a.sin() + y * a.cos();
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn scores_depend_only_on_offset(
        seed in any::<u64>(),
        quarters in 1usize..5,
        m in (0usize..40, 0usize..40),
        n in (0usize..40, 0usize..40),
        s in (0usize..40, 0usize..40),
    ) {
        let cfg = RopeConfig::new(4 * quarters);
        let mut r = rng(seed);
        let q = uniform(&mut r, &[1, cfg.head_dim], 1.0);
        let k = uniform(&mut r, &[1, cfg.head_dim], 1.0);
        let base = dot(&rotate(&q, m, &cfg), &rotate(&k, n, &cfg));
        // each axis alone, then both together
        for shift in [(s.0, 0), (0, s.1), s] {
            let shifted = dot(
                &rotate(&q, (m.0 + shift.0, m.1 + shift.1), &cfg),
                &rotate(&k, (n.0 + shift.0, n.1 + shift.1), &cfg),
            );
            prop_assert!((shifted - base).abs() < 1e-9, "{} vs {}", shifted, base);
        }
    }

    #[test]
    fn rotation_preserves_norm_and_matches_trig_oracle(
        seed in any::<u64>(),
        quarters in 1usize..5,
        pos in (0usize..100, 0usize..100),
    ) {
        let cfg = RopeConfig::new(4 * quarters);
        let v = uniform(&mut rng(seed), &[1, cfg.head_dim], 3.0);
        let out = rotate(&v, pos, &cfg);
        prop_assert!((out.norm() - v.norm()).abs() < 1e-10);
        let oracle = rope_oracle(v.data(), pos, cfg.theta);
        for (a, b) in out.data().iter().zip(&oracle) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_layout_enumeration(rows in 1usize..7, cols in 1usize..7, gr in 0usize..5, gc in 0usize..5, text in 0usize..5) {
        let (noise, garment) = (GridDims::new(rows, cols), GridDims::new(gr, gc));
        let pos = build_positions(PosScheme::Shared, noise, noise, garment, text).unwrap();
        let n = rows * cols;
        let expected_image: Vec<_> = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect();
        let expected_garment: Vec<_> = (0..gr).flat_map(|r| (0..gc).map(move |c| (r, cols + c))).collect();
        prop_assert_eq!(pos.span(text, n), &expected_image[..]);
        prop_assert_eq!(pos.span(text + n, n), &expected_image[..]);
        prop_assert_eq!(pos.span(text + 2 * n, gr * gc), &expected_garment[..]);
        let band = rows.max(gr);
        for (c, &p) in pos.span(0, text).iter().enumerate() {
            prop_assert_eq!(p, (band, c));
        }
        let image: HashSet<_> = expected_image.iter().collect();
        prop_assert!(expected_garment.iter().all(|p| !image.contains(p)));
    }
}

#[test]
fn shared_layout_ten_grid_shapes() {
    // the garment row starts at (0, W), (0, W+1), ...
    let mut r = rng(11);
    for _ in 0..10 {
        let noise = GridDims::new(r.gen_range(1..10), r.gen_range(1..10));
        let garment = GridDims::new(r.gen_range(1..6), r.gen_range(1..6));
        let pos = build_positions(PosScheme::Shared, noise, noise, garment, 4).unwrap();
        let g = pos.span(4 + 2 * noise.area(), garment.area());
        for c in 0..garment.cols {
            assert_eq!(g[c], (0, noise.cols + c));
        }
        let a: Vec<_> = pos.span(4, noise.area()).to_vec();
        let mut b: Vec<_> = pos.span(4 + noise.area(), noise.area()).to_vec();
        b.sort();
        let mut a_sorted = a.clone();
        a_sorted.sort();
        assert_eq!(a_sorted, b);
    }
}

#[test]
fn disjoint_layout_places_blocks_side_by_side() {
    let (n, g) = (GridDims::new(2, 3), GridDims::new(2, 2));
    let pos = build_positions(PosScheme::Disjoint, n, n, g, 1).unwrap();
    assert_eq!(pos.span(7, 6)[0], (0, 3));
    assert_eq!(pos.span(13, 4)[3], (1, 7));
    let all: HashSet<_> = pos.coords().iter().collect();
    assert_eq!(all.len(), pos.len());
}

#[test]
fn attention_is_invariant_to_a_global_shift() {
    let mut r = rng(4);
    let seg = Segmentation::new(2, 4, 4, 2);
    let seq = random_seq(&mut r, seg, 16);
    let proj = random_proj(&mut r, 16);
    let base = build_positions(PosScheme::Shared, GridDims::new(2, 2), GridDims::new(2, 2), GridDims::new(1, 2), 2).unwrap();
    let moved = PositionGrid::new(base.coords().iter().map(|&(a, b)| (a + 5, b + 9)).collect());
    let mask = build_mask(seg);
    let a = joint_attention(&seq, &proj, Some(&base), Some(&mask), 2).unwrap();
    let b = joint_attention(&seq, &proj, Some(&moved), Some(&mask), 2).unwrap();
    assert!(a.output.tokens.max_abs_diff(&b.output.tokens) < 1e-12);
}
