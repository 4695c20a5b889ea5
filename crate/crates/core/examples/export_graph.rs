//! Build a graph, print its nodes, export it to JSON and read it back.
//!
//!     cargo run --example export_graph [out.json]

use pyror::archspec::{ArchConfig, BlockVariant};
use pyror::graph::{build_graph, validate_graph, LayerGraph, Level};

fn main() -> pyror::Result<()> {
    let graph = build_graph(&ArchConfig::new(8, 3, BlockVariant::PyramidBn))?;
    for node in graph.nodes() {
        println!(
            "{:>3}  {:<7} g{} b{:<3} {:<10} {:<40} <- {:?}",
            node.id,
            format!("{:?}", node.tag.level),
            node.tag.group,
            node.tag.block,
            format!("{:?}", node.tag.role),
            format!("{:?}", node.kind),
            node.inputs
        );
    }
    println!(
        "adds: final {}, middle {}, root {}; projections {}",
        graph.count_adds(Level::Final),
        graph.count_adds(Level::Middle),
        graph.count_adds(Level::Root),
        graph.projection_count()
    );

    let json = graph.to_json()?;
    if let Some(path) = std::env::args().nth(1) {
        std::fs::write(&path, &json)?;
        println!("wrote {path}");
    }
    let back = LayerGraph::from_json(&json)?;
    assert_eq!(back, graph);
    assert!(validate_graph(&back).is_empty());
    println!("round trip ok ({} bytes)", json.len());
    Ok(())
}
