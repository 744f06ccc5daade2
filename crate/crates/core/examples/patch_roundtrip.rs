//! Patchify, embed, and reassemble an image.

use jco_mvton::image::ImageTensor;
use jco_mvton::patch::{patchify, unpatchify, PatchEmbedder, embed_patches};
use jco_mvton::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn run() -> Result<()> {
    let img = ImageTensor::from_fn(3, 32, 24, |c, y, x| ((c * 31 + y * 7 + x) % 256) as f64 / 255.0);
    let p = patchify(&img, 4)?;
    println!("32x24 image, P=4 -> {} patches of length {}", p.grid.area(), p.vectors.shape()[1]);
    let back = unpatchify(&p.vectors, p.grid, 4, 3)?;
    assert_eq!(back, img);
    println!("unpatchify(patchify(x)) == x");

    let emb = PatchEmbedder::init(4, 3, 64, &mut ChaCha8Rng::seed_from_u64(0));
    let tokens = embed_patches(&p.vectors, &emb)?;
    println!("tokens: {:?}", tokens.shape());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run()
}
