//! Train a few steps, save a checkpoint, load it back and compare.
//!
//!     cargo run --release --example checkpoint

use pyror::archspec::{ArchConfig, BlockVariant};
use pyror::graph::build_graph;
use pyror::nnkernel::ParamStore;
use pyror::trainer::{make_synthetic, TrainConfig, Trainer};

fn main() -> pyror::Result<()> {
    let arch = ArchConfig::new(8, 3, BlockVariant::PreAct).with_num_classes(2);
    let graph = build_graph(&arch)?;
    let data = make_synthetic(2, 16, 0)?;
    let mut trainer = Trainer::new(&graph, TrainConfig::smoke())?;
    for _ in 0..3 {
        let s = trainer.step(&data.images, &data.labels, 0.05, None)?;
        println!("loss {:.4}", s.loss);
    }

    let path = std::env::temp_dir().join("pyror_example.ckpt");
    trainer.params().save(&arch, &path)?;
    let (arch_back, params) = ParamStore::load(&path)?;
    println!("{} bytes, {} learned values", std::fs::metadata(&path)?.len(), params.learned_count());
    assert_eq!(arch_back, arch);
    assert!(params.values_bitwise_eq(trainer.params()));
    println!("reloaded parameters are bitwise identical");
    Ok(())
}
