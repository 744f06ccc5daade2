//! Procedural `{G, P, R}` triplets with an exact compositing oracle, and a
//! small curation loop: score, filter, expand and regenerate.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::metrics::{ssim, ssim_where, SSIM_WINDOW};

/// Axis-aligned rectangle `[x, y, w, h]` in person-image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct Region {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl From<[usize; 4]> for Region {
    fn from(a: [usize; 4]) -> Self {
        Region {
            x: a[0],
            y: a[1],
            w: a[2],
            h: a[3],
        }
    }
}

impl From<Region> for [usize; 4] {
    fn from(r: Region) -> Self {
        [r.x, r.y, r.w, r.h]
    }
}

impl Region {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y && y < self.y + self.h && x >= self.x && x < self.x + self.w
    }

    /// Does the `k×k` window at `(y, x)` touch the region?
    pub fn touches_window(&self, y: usize, x: usize, k: usize) -> bool {
        y < self.y + self.h && self.y < y + k && x < self.x + self.w && self.x < x + k
    }

    fn check(&self, img: &ImageTensor, op: &'static str) -> Result<()> {
        let (h, w) = img.dims();
        if self.w == 0 || self.h == 0 {
            return Err(Error::contract(op, "empty region"));
        }
        if self.x + self.w > w || self.y + self.h > h {
            return Err(Error::contract(op, format!("region {self:?} outside {h}x{w} image")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletSample {
    pub garment: ImageTensor,
    pub person: ImageTensor,
    pub reference: ImageTensor,
    pub region: Region,
    pub seed: u64,
}

/// Image sizes of generated triplets, `[height, width]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub person: [usize; 2],
    pub garment: [usize; 2],
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            person: [32, 24],
            garment: [16, 16],
        }
    }
}

/// Distinct 8-bit colours; every pixel written is `k/255`.
const PALETTE: [[u8; 3]; 12] = [
    [230, 57, 70],
    [29, 53, 87],
    [69, 123, 157],
    [168, 218, 220],
    [241, 250, 238],
    [244, 162, 97],
    [42, 157, 143],
    [233, 196, 106],
    [38, 70, 83],
    [131, 56, 236],
    [255, 190, 11],
    [58, 134, 255],
];

const SKIN: [[u8; 3]; 3] = [[224, 172, 105], [141, 85, 36], [255, 219, 172]];

fn rgb(c: [u8; 3], ch: usize) -> f64 {
    c[ch] as f64 / 255.0
}

fn fill_rect(img: &mut ImageTensor, x0: usize, y0: usize, w: usize, h: usize, col: [u8; 3]) {
    let (ih, iw) = img.dims();
    for y in y0..(y0 + h).min(ih) {
        for x in x0..(x0 + w).min(iw) {
            for c in 0..3 {
                img.set(c, y, x, rgb(col, c));
            }
        }
    }
}

/// `R = P` with `G` resampled (nearest) into `region`.
pub fn composite(person: &ImageTensor, garment: &ImageTensor, region: Region) -> Result<ImageTensor> {
    region.check(person, "composite")?;
    let mut out = person.clone();
    out.paste(&garment.resize_nearest(region.h, region.w), region.x, region.y)?;
    Ok(out)
}

fn draw_person(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageTensor {
    let top = PALETTE[rng.gen_range(0..PALETTE.len())];
    let bottom = PALETTE[rng.gen_range(0..PALETTE.len())];
    let mut img = ImageTensor::from_fn(3, h, w, |c, y, _| {
        // integer blend keeps every value on the k/255 lattice
        let a = top[c] as usize;
        let b = bottom[c] as usize;
        ((a * (h - 1 - y) + b * y) / (h - 1).max(1)) as f64 / 255.0
    });
    let skin = SKIN[rng.gen_range(0..SKIN.len())];
    let shirt = PALETTE[rng.gen_range(0..PALETTE.len())];
    let legs = PALETTE[rng.gen_range(0..PALETTE.len())];
    let cx = w / 2;
    let head = (w / 4).max(2);
    fill_rect(&mut img, cx - head / 2, 1, head, head, skin);
    let torso_w = (w * 3 / 4).max(2);
    let torso_top = head + 2;
    fill_rect(&mut img, cx - torso_w / 2, torso_top, torso_w, h * 2 / 3 - torso_top, shirt);
    let arm = (w / 8).max(1);
    fill_rect(&mut img, cx - torso_w / 2 - arm, torso_top + 1, arm, h / 2, skin);
    fill_rect(&mut img, cx + torso_w / 2, torso_top + 1, arm, h / 2, skin);
    fill_rect(&mut img, cx - torso_w / 2 + 1, h * 2 / 3, torso_w / 2 - 1, h / 3, legs);
    fill_rect(&mut img, cx + 1, h * 2 / 3, torso_w / 2 - 1, h / 3, legs);
    img
}

fn draw_garment(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageTensor {
    let a = PALETTE[rng.gen_range(0..PALETTE.len())];
    let mut b = PALETTE[rng.gen_range(0..PALETTE.len())];
    while b == a {
        b = PALETTE[rng.gen_range(0..PALETTE.len())];
    }
    let period = rng.gen_range(2..=4usize);
    let kind = rng.gen_range(0..4u8);
    ImageTensor::from_fn(3, h, w, |c, y, x| {
        let use_a = match kind {
            0 => (y / period) % 2 == 0,
            1 => (x / period) % 2 == 0,
            2 => (y / period + x / period) % 2 == 0,
            _ => true,
        };
        rgb(if use_a { a } else { b }, c)
    })
}

/// Deterministic triplet for `seed`. The region sits below the head band
/// and is at least the garment size, so nearest resampling is invertible.
pub fn gen_triplet_with(seed: u64, cfg: &GenConfig) -> Result<TripletSample> {
    let [ph, pw] = cfg.person;
    let [gh, gw] = cfg.garment;
    let band = SSIM_WINDOW;
    if gh == 0 || gw == 0 || ph < band + gh || pw < gw {
        return Err(Error::contract(
            "gen_triplet",
            format!("person {ph}x{pw} cannot hold a {gh}x{gw} garment below an {band}-row head band"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let person = draw_person(&mut rng, ph, pw);
    let garment = draw_garment(&mut rng, gh, gw);
    let h = rng.gen_range(gh..=(ph - band).min(gh + 4));
    let w = rng.gen_range(gw..=pw.min(gw + 4));
    let region = Region {
        x: rng.gen_range(0..=pw - w),
        y: rng.gen_range(band..=ph - h),
        w,
        h,
    };
    let reference = composite(&person, &garment, region)?;
    Ok(TripletSample {
        garment,
        person,
        reference,
        region,
        seed,
    })
}

pub fn gen_triplet(seed: u64) -> TripletSample {
    gen_triplet_with(seed, &GenConfig::default()).expect("default sizes are valid")
}

/// Cuts the region out of `r` and resamples it to the garment canvas.
pub fn tryoff_oracle(r: &ImageTensor, region: Region, garment_dims: (usize, usize)) -> Result<ImageTensor> {
    region.check(r, "tryoff_oracle")?;
    Ok(r.crop(region.x, region.y, region.w, region.h)?
        .resize_nearest(garment_dims.0, garment_dims.1))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// Garment consistency.
    pub g: f64,
    /// Person consistency.
    pub p: f64,
    /// Realism.
    pub r: f64,
}

pub type Thresholds = Scores;

impl Scores {
    pub fn passes(&self, t: &Thresholds) -> bool {
        self.g >= t.g && self.p >= t.p && self.r >= t.r
    }
}

fn mean_abs_laplacian(img: &ImageTensor) -> f64 {
    let (h, w) = img.dims();
    if h < 3 || w < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    let mut n = 0.0;
    for c in 0..img.channels() {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let l = 4.0 * img.get(c, y, x)
                    - img.get(c, y - 1, x)
                    - img.get(c, y + 1, x)
                    - img.get(c, y, x - 1)
                    - img.get(c, y, x + 1);
                s += l.abs();
                n += 1.0;
            }
        }
    }
    s / n
}

/// Scores plus whether the sample was flagged (NaN pixels).
pub fn score_triplet_flagged(s: &TripletSample) -> Result<(Scores, bool)> {
    let r = &s.reference;
    if r.data().iter().any(|v| v.is_nan()) {
        return Ok((Scores { g: 0.0, p: 0.0, r: 0.0 }, true));
    }
    let region = s.region;
    let cut = r.crop(region.x, region.y, region.w, region.h)?;
    let g = ssim(&cut, &s.garment.resize_nearest(region.h, region.w))?;
    let k = SSIM_WINDOW;
    let p = ssim_where(r, &s.person, |y, x| !region.touches_window(y, x, k))?.unwrap_or(1.0);
    let bad = r.data().iter().filter(|v| !(0.0..=1.0).contains(*v)).count() as f64 / r.data().len() as f64;
    let base = composite(&s.person, &s.garment, region)?;
    let excess = (mean_abs_laplacian(r) - mean_abs_laplacian(&base)).max(0.0);
    let realism = 1.0 - (bad + excess).clamp(0.0, 1.0);
    // SSIM can dip below zero; scores live in [0, 1]
    Ok((
        Scores {
            g: g.max(0.0),
            p: p.max(0.0),
            r: realism,
        },
        false,
    ))
}

/// Garment consistency, person consistency (windows fully outside the
/// region) and realism.
pub fn score_triplet(s: &TripletSample) -> Result<Scores> {
    Ok(score_triplet_flagged(s)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Stage1,
    Regenerated,
    StyleExpanded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolRecord {
    pub id: usize,
    pub sample: TripletSample,
    pub scores: Scores,
    pub round: usize,
    pub provenance: Provenance,
    pub flagged: bool,
}

impl PoolRecord {
    pub fn scored(id: usize, sample: TripletSample, round: usize, provenance: Provenance) -> Result<Self> {
        let (scores, flagged) = score_triplet_flagged(&sample)?;
        Ok(PoolRecord {
            id,
            sample,
            scores,
            round,
            provenance,
            flagged,
        })
    }
}

/// `count` stage-1 records for seeds `seed, seed+1, …`.
pub fn gen_pool(seed: u64, count: usize, cfg: &GenConfig) -> Result<Vec<PoolRecord>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let s = gen_triplet_with(seed.wrapping_add(i as u64), cfg)?;
            PoolRecord::scored(i, s, 0, Provenance::Stage1)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub total: usize,
    pub retained: usize,
    /// Records failing each axis (a record may fail several).
    pub rejected_g: usize,
    pub rejected_p: usize,
    pub rejected_r: usize,
}

/// Keeps records meeting every threshold, in order.
pub fn filter_pool(pool: &[PoolRecord], t: &Thresholds) -> (Vec<PoolRecord>, FilterStats) {
    let mut stats = FilterStats {
        total: pool.len(),
        ..FilterStats::default()
    };
    let mut kept = Vec::new();
    for r in pool {
        stats.rejected_g += usize::from(!(r.scores.g >= t.g));
        stats.rejected_p += usize::from(!(r.scores.p >= t.p));
        stats.rejected_r += usize::from(!(r.scores.r >= t.r));
        if r.scores.passes(t) && !r.flagged {
            kept.push(r.clone());
        }
    }
    stats.retained = kept.len();
    (kept, stats)
}

fn permute_channels(img: &ImageTensor, perm: [usize; 3]) -> ImageTensor {
    ImageTensor::from_fn(3, img.height(), img.width(), |c, y, x| img.get(perm[c], y, x))
}

fn roll(img: &ImageTensor, dy: usize, dx: usize) -> ImageTensor {
    let (h, w) = img.dims();
    ImageTensor::from_fn(img.channels(), h, w, |c, y, x| img.get(c, (y + dy) % h, (x + dx) % w))
}

/// Appends `n` recoloured, pattern-shifted copies of pool garments,
/// re-composited onto the same person and region.
pub fn style_expand(pool: &[PoolRecord], n: usize, seed: u64) -> Result<Vec<PoolRecord>> {
    let mut out = pool.to_vec();
    if n == 0 || pool.is_empty() {
        return Ok(out);
    }
    let perms = [[1, 2, 0], [2, 0, 1], [0, 2, 1], [2, 1, 0], [1, 0, 2]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next_id = pool.iter().map(|r| r.id + 1).max().unwrap_or(0);
    let round = pool.iter().map(|r| r.round).max().unwrap_or(0);
    for _ in 0..n {
        let src = pool.choose(&mut rng).expect("non-empty");
        let perm = *perms.choose(&mut rng).expect("non-empty");
        let (gh, gw) = src.sample.garment.dims();
        let g = roll(&permute_channels(&src.sample.garment, perm), rng.gen_range(0..gh), rng.gen_range(0..gw));
        let reference = composite(&src.sample.person, &g, src.sample.region)?;
        let sample = TripletSample {
            garment: g,
            person: src.sample.person.clone(),
            reference,
            region: src.sample.region,
            seed: rng.gen(),
        };
        out.push(PoolRecord::scored(next_id, sample, round, Provenance::StyleExpanded)?);
        next_id += 1;
    }
    Ok(out)
}

/// Anything that can produce a try-on result for a triplet's `(P, G)`.
pub trait TryOnGenerator: Sync {
    fn generate(&self, sample: &TripletSample, seed: u64) -> Result<ImageTensor>;
}

/// Returns the ground-truth reference: a perfect generator.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleReplay;

impl TryOnGenerator for OracleReplay {
    fn generate(&self, sample: &TripletSample, _seed: u64) -> Result<ImageTensor> {
        Ok(sample.reference.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub attempted: usize,
    pub generated: usize,
    pub retained: usize,
    pub retention_rate: f64,
    pub mean_scores: Scores,
    pub filter: FilterStats,
}

/// Regenerates `R'` for every record, rescores, filters and merges the
/// survivors back as `regenerated`. Failed items are dropped and logged.
pub fn bootstrap_round<G: TryOnGenerator + ?Sized>(
    pool: &[PoolRecord],
    generator: &G,
    thresholds: &Thresholds,
    round: usize,
    seed: u64,
) -> Result<(Vec<PoolRecord>, RoundReport)> {
    let next_id = pool.iter().map(|r| r.id + 1).max().unwrap_or(0);
    let regenerated: Vec<Option<PoolRecord>> = pool
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let item_seed = seed ^ (round as u64).rotate_left(32) ^ rec.sample.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let made = generator.generate(&rec.sample, item_seed).and_then(|r| {
                let sample = TripletSample {
                    reference: r,
                    ..rec.sample.clone()
                };
                PoolRecord::scored(next_id + i, sample, round, Provenance::Regenerated)
            });
            match made {
                Ok(r) => Some(r),
                Err(e) => {
                    log::warn!("round {round}: dropping record {} ({e})", rec.id);
                    None
                }
            }
        })
        .collect();
    let generated: Vec<PoolRecord> = regenerated.into_iter().flatten().collect();
    let (kept, filter) = filter_pool(&generated, thresholds);
    let n = generated.len().max(1) as f64;
    let mean_scores = Scores {
        g: generated.iter().map(|r| r.scores.g).sum::<f64>() / n,
        p: generated.iter().map(|r| r.scores.p).sum::<f64>() / n,
        r: generated.iter().map(|r| r.scores.r).sum::<f64>() / n,
    };
    let report = RoundReport {
        round,
        attempted: pool.len(),
        generated: generated.len(),
        retained: kept.len(),
        retention_rate: if pool.is_empty() { 0.0 } else { kept.len() as f64 / pool.len() as f64 },
        mean_scores,
        filter,
    };
    let mut merged = pool.to_vec();
    merged.extend(kept);
    Ok((merged, report))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    id: usize,
    seed: u64,
    region: Region,
    scores: Scores,
    provenance: Provenance,
}

fn image_path(dir: &Path, id: usize, tag: char) -> std::path::PathBuf {
    dir.join(format!("{id:05}_{tag}.ppm"))
}

/// Writes `dir/index.json` and one PPM per image. Images are quantised to
/// 8 bits; generated samples are already on that lattice.
pub fn write_pool(dir: impl AsRef<Path>, pool: &[PoolRecord]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = Vec::with_capacity(pool.len());
    for r in pool {
        r.sample.garment.write_ppm(image_path(dir, r.id, 'G'))?;
        r.sample.person.write_ppm(image_path(dir, r.id, 'P'))?;
        r.sample.reference.write_ppm(image_path(dir, r.id, 'R'))?;
        index.push(IndexEntry {
            id: r.id,
            seed: r.sample.seed,
            region: r.sample.region,
            scores: r.scores,
            provenance: r.provenance,
        });
    }
    let mut json = serde_json::to_vec_pretty(&index)?;
    json.push(b'\n');
    let path = dir.join("index.json");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Reads a pool written by [`write_pool`]; `round` is taken from the caller.
pub fn read_pool(dir: impl AsRef<Path>, round: usize) -> Result<Vec<PoolRecord>> {
    let dir = dir.as_ref();
    let path = dir.join("index.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let index: Vec<IndexEntry> = serde_json::from_slice(&bytes)?;
    index
        .into_iter()
        .map(|e| {
            let sample = TripletSample {
                garment: ImageTensor::read_ppm(image_path(dir, e.id, 'G'))?,
                person: ImageTensor::read_ppm(image_path(dir, e.id, 'P'))?,
                reference: ImageTensor::read_ppm(image_path(dir, e.id, 'R'))?,
                region: e.region,
                seed: e.seed,
            };
            Ok(PoolRecord {
                id: e.id,
                sample,
                scores: e.scores,
                round,
                provenance: e.provenance,
                flagged: false,
            })
        })
        .collect()
}

/// `round_{k}` directory name.
pub fn round_dir(root: impl AsRef<Path>, k: usize) -> std::path::PathBuf {
    root.as_ref().join(format!("round_{k}"))
}
