//! 2D axial rotary position encoding and joint position layouts.
//!
//! Positions are patch-grid coordinates. The first half of each head vector
//! rotates by the row coordinate, the second half by the column coordinate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::GridDims;
use crate::tensor::{Tape, Tensor, Var};

/// How the four segments `[T; X; C1; C2]` are placed in coordinate space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PosScheme {
    /// Every segment gets its own disjoint block, left to right.
    #[serde(rename = "I")]
    Disjoint,
    /// Noise and reference share one block; the garment sits to its right.
    #[serde(rename = "II")]
    Shared,
}

impl PosScheme {
    pub fn tag(self) -> &'static str {
        match self {
            PosScheme::Disjoint => "scheme_I",
            PosScheme::Shared => "scheme_II",
        }
    }
}

/// Per-token `(row, col)` coordinates in sequence order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositionGrid {
    coords: Vec<(usize, usize)>,
}

impl PositionGrid {
    pub fn new(coords: Vec<(usize, usize)>) -> Self {
        PositionGrid { coords }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[(usize, usize)] {
        &self.coords
    }

    pub fn span(&self, start: usize, len: usize) -> &[(usize, usize)] {
        &self.coords[start..start + len]
    }
}

fn block(grid: GridDims, row0: usize, col0: usize, out: &mut Vec<(usize, usize)>) {
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            out.push((row0 + r, col0 + c));
        }
    }
}

/// Lays out positions for `[T; X; C1; C2]`.
///
/// Text always occupies a dedicated row band below every image block, at
/// row `max(image rows)` and columns `0..text_len`. An empty reference grid
/// (zero rows or columns) is allowed under either scheme.
pub fn build_positions(
    scheme: PosScheme,
    noise: GridDims,
    reference: GridDims,
    garment: GridDims,
    text_len: usize,
) -> Result<PositionGrid> {
    if scheme == PosScheme::Shared && reference.area() > 0 && noise != reference {
        return Err(Error::contract(
            "build_positions",
            format!(
                "shared layout needs matching noise and reference grids, got {}x{} and {}x{}",
                noise.rows, noise.cols, reference.rows, reference.cols
            ),
        ));
    }
    let band = noise.rows.max(reference.rows).max(garment.rows);
    let mut coords = Vec::with_capacity(text_len + noise.area() + reference.area() + garment.area());
    coords.extend((0..text_len).map(|c| (band, c)));
    match scheme {
        PosScheme::Shared => {
            block(noise, 0, 0, &mut coords);
            block(reference, 0, 0, &mut coords);
            block(garment, 0, noise.cols, &mut coords);
        }
        PosScheme::Disjoint => {
            block(noise, 0, 0, &mut coords);
            block(reference, 0, noise.cols, &mut coords);
            block(garment, 0, noise.cols + reference.cols, &mut coords);
        }
    }
    Ok(PositionGrid { coords })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub theta: f64,
}

impl RopeConfig {
    pub fn new(head_dim: usize) -> Self {
        RopeConfig {
            head_dim,
            theta: 10_000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim % 2 != 0 {
            return Err(Error::contract("rope", format!("head_dim {} is odd", self.head_dim)));
        }
        if self.head_dim % 4 != 0 || self.head_dim == 0 {
            return Err(Error::contract(
                "rope",
                format!("head_dim {} must be a positive multiple of 4", self.head_dim),
            ));
        }
        Ok(())
    }

    /// Rotation angle of pair `p` (0-based within one head) at `pos`.
    pub fn angle(&self, pos: (usize, usize), p: usize) -> f64 {
        let half = self.head_dim / 2;
        let per_axis = half / 2;
        let (coord, j) = if p < per_axis { (pos.0, p) } else { (pos.1, p - per_axis) };
        coord as f64 * self.theta.powf(-2.0 * j as f64 / half as f64)
    }

    /// Angle table `[L, heads · head_dim/2]` for rotating all heads of a
    /// `[L, heads · head_dim]` projection in one pass.
    pub fn angle_table(&self, pos: &PositionGrid, heads: usize) -> Result<Tensor> {
        self.validate()?;
        let pairs = self.head_dim / 2;
        let width = heads * pairs;
        let mut data = Vec::with_capacity(pos.len() * width);
        for &p in pos.coords() {
            let row: Vec<f64> = (0..pairs).map(|j| self.angle(p, j)).collect();
            for _ in 0..heads {
                data.extend_from_slice(&row);
            }
        }
        Tensor::new(vec![pos.len(), width], data)
    }
}

/// Rotates per-token head vectors `[L, head_dim]` by their positions.
pub fn apply_rope(vectors: &Tensor, pos: &PositionGrid, cfg: &RopeConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (l, hd) = vectors.dims2()?;
    if hd != cfg.head_dim || l != pos.len() {
        return Err(Error::contract(
            "apply_rope",
            format!("input [{l}, {hd}] vs head_dim {} and {} positions", cfg.head_dim, pos.len()),
        ));
    }
    let mut tape = Tape::new();
    let x = tape.constant(vectors.clone());
    let y = rope_on_tape(&mut tape, x, pos, cfg, 1)?;
    Ok(tape.value(y).clone())
}

/// Records the rotation of a `[L, heads · head_dim]` value on a tape.
pub fn rope_on_tape(tape: &mut Tape, x: Var, pos: &PositionGrid, cfg: &RopeConfig, heads: usize) -> Result<Var> {
    let angles = cfg.angle_table(pos, heads)?;
    tape.rotate_pairs(x, &angles)
}
