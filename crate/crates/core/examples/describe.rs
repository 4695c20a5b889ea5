//! Static analysis of the standard configurations: widths per group,
//! parameter counts by shortcut level, MACs and expected compute under
//! stochastic depth.
//!
//!     cargo run --example describe [depth alpha]

use pyror::analyzer::analyze;
use pyror::archspec::{ArchConfig, BlockVariant};
use pyror::cli::describe_table;
use pyror::graph::build_graph;
use pyror::stochdepth::linear_decay;

fn main() -> pyror::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer")).collect();
    let configs = match args.as_slice() {
        [depth, alpha] => vec![(*depth, *alpha)],
        _ => vec![(110, 48), (110, 84), (110, 270), (146, 270)],
    };
    for (depth, alpha) in configs {
        let graph = build_graph(&ArchConfig::new(depth, alpha, BlockVariant::PyramidBn))?;
        let survival = linear_decay(graph.final_blocks().len(), 0.5)?;
        let report = analyze(&graph, &survival)?;
        println!("{}", describe_table(&report));
    }

    // Same depth and alpha, the two block variants side by side.
    for variant in [BlockVariant::PreAct, BlockVariant::PyramidBn] {
        let graph = build_graph(&ArchConfig::new(110, 48, variant))?;
        let survival = linear_decay(graph.final_blocks().len(), 0.5)?;
        let r = analyze(&graph, &survival)?;
        println!("{variant:>10}: {} params, {} MACs", r.total_params, r.flops_forward);
    }
    Ok(())
}
