//! Patchify/unpatchify and the linear patch embedding.
//!
//! An image of `H×W` pixels with patch side `P` becomes `N = (H/P)·(W/P)`
//! flat vectors of length `P²·C`, ordered row-major over the patch grid. Each
//! vector is the row-major flattening of its `P×P×C` block, i.e. index
//! `(py·P + px)·C + c`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::tensor::Tensor;

/// Extent of a patch grid in patches: `(rows, cols)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct GridDims {
    pub rows: usize,
    pub cols: usize,
}

impl GridDims {
    pub fn new(rows: usize, cols: usize) -> Self {
        GridDims { rows, cols }
    }

    pub fn area(&self) -> usize {
        self.rows * self.cols
    }

    /// Grid for an `height×width` pixel image.
    pub fn for_image(height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 || height % patch != 0 || width % patch != 0 {
            return Err(Error::dim(
                "patchify",
                format!("{height}x{width} is not divisible by patch size {patch}"),
            ));
        }
        Ok(GridDims::new(height / patch, width / patch))
    }
}

/// Flat patches of one image: `[N, P²C]` plus the grid they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Patches {
    pub vectors: Tensor,
    pub grid: GridDims,
}

pub fn patchify(img: &ImageTensor, patch: usize) -> Result<Patches> {
    let grid = GridDims::for_image(img.height(), img.width(), patch)?;
    let c = img.channels();
    let len = patch * patch * c;
    let mut data = Vec::with_capacity(grid.area() * len);
    for gy in 0..grid.rows {
        for gx in 0..grid.cols {
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..c {
                        data.push(img.get(ch, gy * patch + py, gx * patch + px));
                    }
                }
            }
        }
    }
    Ok(Patches {
        vectors: Tensor::from_parts(vec![grid.area(), len], data),
        grid,
    })
}

pub fn unpatchify(vectors: &Tensor, grid: GridDims, patch: usize, channels: usize) -> Result<ImageTensor> {
    let (n, len) = vectors.dims2()?;
    if n != grid.area() || len != patch * patch * channels {
        return Err(Error::dim(
            "unpatchify",
            format!(
                "[{n}, {len}] does not match grid {}x{} with patch {patch} and {channels} channels",
                grid.rows, grid.cols
            ),
        ));
    }
    let mut img = ImageTensor::zeros(channels, grid.rows * patch, grid.cols * patch);
    let v = vectors.data();
    for gy in 0..grid.rows {
        for gx in 0..grid.cols {
            let base = (gy * grid.cols + gx) * len;
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..channels {
                        let val = v[base + (py * patch + px) * channels + ch];
                        img.set(ch, gy * patch + py, gx * patch + px, val);
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Learnable linear map from flat patches to `d`-wide tokens:
/// `x_i = W_emb · p_i + b_emb`, with `W_emb` stored as `[d, P²C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedder {
    pub patch: usize,
    pub channels: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl PatchEmbedder {
    /// Fan-in uniform init in `±1/√(P²C)` with zero bias.
    pub fn init<R: Rng>(patch: usize, channels: usize, dim: usize, rng: &mut R) -> Self {
        let fan_in = patch * patch * channels;
        let bound = 1.0 / (fan_in as f64).sqrt();
        PatchEmbedder {
            patch,
            channels,
            weight: Tensor::from_fn(&[dim, fan_in], |_| rng.gen_range(-bound..bound)),
            bias: Tensor::zeros(&[dim]),
        }
    }

    pub fn from_parts(patch: usize, channels: usize, weight: Tensor, bias: Tensor) -> Result<Self> {
        let (d, fan_in) = weight.dims2()?;
        if fan_in != patch * patch * channels || bias.numel() != d {
            return Err(Error::dim(
                "patch_embedder",
                format!("weight {:?} / bias {:?} for P={patch}, C={channels}", weight.shape(), bias.shape()),
            ));
        }
        Ok(PatchEmbedder {
            patch,
            channels,
            weight,
            bias,
        })
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Applies the embedder to every patch: `[N, P²C] → [N, d]`.
pub fn embed_patches(patches: &Tensor, emb: &PatchEmbedder) -> Result<Tensor> {
    let (n, len) = patches.dims2()?;
    if len != emb.patch_len() {
        return Err(Error::dim(
            "embed_patches",
            format!("patch length {len}, embedder expects {}", emb.patch_len()),
        ));
    }
    let proj = patches.matmul(&emb.weight.transpose2()?)?;
    let d = emb.dim();
    let b = emb.bias.data();
    Ok(Tensor::from_fn(&[n, d], |i| proj.data()[i] + b[i % d]))
}

/// Maps tokens back to patches with `W_out` (`[P²C, d]`) and reassembles the
/// image. Output values are not clamped.
pub fn unembed_to_image(
    tokens: &Tensor,
    grid: GridDims,
    patch: usize,
    channels: usize,
    w_out: &Tensor,
) -> Result<ImageTensor> {
    let (n, d) = tokens.dims2()?;
    if n != grid.area() {
        return Err(Error::dim(
            "unembed_to_image",
            format!("{n} tokens for a {}x{} grid", grid.rows, grid.cols),
        ));
    }
    let (len, d2) = w_out.dims2()?;
    if d2 != d || len != patch * patch * channels {
        return Err(Error::dim(
            "unembed_to_image",
            format!("W_out {:?} for token width {d}", w_out.shape()),
        ));
    }
    let patches = tokens.matmul(&w_out.transpose2()?)?;
    unpatchify(&patches, grid, patch, channels)
}
