//! Linear-decay survival schedule, sampled masks, and what they save.
//!
//!     cargo run --example stochastic_depth

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pyror::analyzer::expected_compute;
use pyror::archspec::{ArchConfig, BlockVariant};
use pyror::graph::build_graph;
use pyror::stochdepth::linear_decay;

fn main() -> pyror::Result<()> {
    let graph = build_graph(&ArchConfig::new(110, 48, BlockVariant::PyramidBn))?;
    let blocks = graph.final_blocks().len();
    let schedule = linear_decay(blocks, 0.5)?;
    println!("p_l for {blocks} blocks:");
    for (l, p) in schedule.probs().iter().enumerate().step_by(9) {
        println!("  l = {:>2}  p = {p:.4}", l + 1);
    }
    println!("expected fraction of blocks kept: {:.4}", schedule.expected_active());
    println!("expected fraction of forward MACs: {:.4}", expected_compute(&graph, &schedule)?);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..4 {
        let mask: String = schedule.sample_mask(&mut rng).iter().map(|&k| if k { '1' } else { '.' }).collect();
        println!("  {mask}");
    }
    Ok(())
}
