//! Triplet generation, scoring, filtering, style expansion and bootstrap rounds.

use jco_mvton::data::{
    bootstrap_round, filter_pool, gen_pool, gen_triplet, tryoff_oracle, GenConfig, OracleReplay, Scores,
};
use jco_mvton::Result;

pub fn run() -> Result<usize> {
    let s = gen_triplet(7);
    println!("seed 7: region {:?}", s.region);
    println!("try-off recovers the garment: {}", tryoff_oracle(&s.reference, s.region, (16, 16))? == s.garment);

    let pool = gen_pool(0, 12, &GenConfig::default())?;
    let t = Scores { g: 0.9, p: 0.9, r: 0.5 };
    let (kept, stats) = filter_pool(&pool, &t);
    println!("round 0: kept {} of {}", kept.len(), stats.total);

    let expanded = jco_mvton::data::style_expand(&kept, 4, 1)?;
    println!("after style expansion: {}", expanded.len());

    let mut pool = expanded;
    for round in 1..=3 {
        let (next, report) = bootstrap_round(&pool, &OracleReplay, &t, round, 99)?;
        println!("round {round}: retention {:.2}, pool {}", report.retention_rate, next.len());
        pool = next;
    }
    Ok(pool.len())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run().map(|_| ())
}
