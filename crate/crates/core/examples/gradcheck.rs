//! Finite-difference check of the backward pass on both block variants,
//! with and without dropped blocks.
//!
//!     cargo run --release --example gradcheck [seed]

use pyror::archspec::{ArchConfig, BlockVariant};
use pyror::graph::build_graph;
use pyror::nnkernel::{gradcheck_with, GradcheckOptions};

fn main() -> pyror::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    for variant in [BlockVariant::PreAct, BlockVariant::PyramidBn] {
        let graph = build_graph(&ArchConfig::new(8, 3, variant))?;
        for mask in [None, Some(vec![false, true, true])] {
            let opts = GradcheckOptions {
                sd_mask: mask.clone(),
                ..GradcheckOptions::new(1e-4, seed)
            };
            let r = gradcheck_with(&graph, &opts)?;
            println!(
                "{variant:<10} mask {:<18} max rel err {:.2e} at {:<16} {} ({} coords, {} kinks, {} below resolution)",
                format!("{mask:?}"),
                r.max_rel_error,
                r.worst_param,
                if r.passed { "PASS" } else { "FAIL" },
                r.checked,
                r.kinks_skipped,
                r.below_resolution
            );
        }
    }
    Ok(())
}
