//! Trains the toy preset on four synthetic families and prints per-epoch metrics.
//!
//! `cargo run --release -p p2sc-core --example train_toy -- [seed] [epochs]`

use p2sc_core::config::ModelConfig;
use p2sc_core::data::{synthetic_dataset, ShapeFamily};
use p2sc_core::model::Model;
use p2sc_core::par::Execution;
use p2sc_core::train::{evaluate, prepare_samples, Trainer};

fn main() -> p2sc_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(30);
    let families = [ShapeFamily::Sphere, ShapeFamily::Cube, ShapeFamily::Torus, ShapeFamily::Plane];
    let mut cfg = ModelConfig::toy(families.len());
    cfg.seed = seed;
    cfg.optimizer.epochs = epochs;
    let data = synthetic_dataset(&families, 200, cfg.input_points, 0.01, seed)?.prepared(cfg.input_points, seed)?;
    let model = Model::new(cfg)?;
    let exec = Execution::available();
    let all = prepare_samples(&model, &data, exec)?;
    let (train, test): (Vec<_>, Vec<_>) = all.into_iter().enumerate().partition(|(i, _)| i % 5 != 0);
    let train: Vec<_> = train.into_iter().map(|(_, s)| s).collect();
    let test: Vec<_> = test.into_iter().map(|(_, s)| s).collect();
    let mut trainer = Trainer::new(model, exec);
    for _ in 0..epochs {
        let m = trainer.train_epoch(&train)?;
        let acc = evaluate(&trainer.model, &test, exec)?.accuracy;
        println!("epoch {:>2} loss {:.5} train {:.3} test {:.3} ({:.1}s)", m.epoch, m.loss, m.train_accuracy, acc, m.seconds);
    }
    Ok(())
}
