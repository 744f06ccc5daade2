//! SSIM, PSNR and the toy Fréchet distance on synthetic images.

use jco_mvton::data::gen_triplet;
use jco_mvton::metrics::{psnr, ssim, toy_frechet};
use jco_mvton::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn run() -> Result<()> {
    let r = gen_triplet(0).reference;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for sigma in [0.01, 0.05, 0.1] {
        let n = Normal::new(0.0, sigma).expect("valid sigma");
        let mut noisy = r.clone();
        for v in noisy.data_mut() {
            *v += n.sample(&mut rng);
        }
        println!("sigma {sigma:<4}: ssim {:.4}  psnr {:.2} dB", ssim(&r, &noisy)?, psnr(&r, &noisy)?);
    }
    println!("psnr(x, x) = {}", psnr(&r, &r)?);

    let a: Vec<_> = (0..8).map(|s| gen_triplet(s).reference).collect();
    let b: Vec<_> = (100..108).map(|s| gen_triplet(s).person).collect();
    println!("toy_frechet(A, A) = {:.2e}", toy_frechet(&a, &a)?);
    println!("toy_frechet(references, persons) = {:.4}", toy_frechet(&a, &b)?);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run()
}
