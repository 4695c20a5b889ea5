//! Smoke training run: depth 8, alpha 3, PyramidBN on two synthetic classes.
//!
//!     cargo run --release --example train_synthetic [epochs] [seed]

use std::io;
use std::time::Instant;

use pyror::archspec::{ArchConfig, BlockVariant};
use pyror::graph::build_graph;
use pyror::stochdepth::linear_decay;
use pyror::trainer::{make_synthetic, train, RunOptions, TrainConfig};

fn main() -> pyror::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(30, |s| s.parse().expect("epochs"));
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));

    let arch = ArchConfig::new(8, 3, BlockVariant::PyramidBn).with_num_classes(2);
    let graph = build_graph(&arch)?;
    let sd = linear_decay(graph.final_blocks().len(), arch.p_terminal)?;
    let data = make_synthetic(2, 500, seed)?;
    let cfg = TrainConfig {
        epochs,
        seed,
        ..TrainConfig::smoke()
    };

    let started = Instant::now();
    let mut stdout = io::stdout();
    let out = train(
        &graph,
        &cfg,
        &data,
        Some(&sd),
        RunOptions {
            log: Some(&mut stdout),
            ..Default::default()
        },
    )?;
    eprintln!(
        "best train accuracy {:.3} after {} epochs in {:.1?}",
        out.best_train_acc(),
        epochs,
        started.elapsed()
    );
    Ok(())
}
