//! Trains one architecture at 1/8 scale on the synthetic pulse-train corpus
//! and prints validation accuracy as it goes.
//!
//! Run with `cargo run --release -p ecgnet --example synthetic_convergence [cnn|crnn] [seed]`.

use std::time::Instant;

use ecgnet::network::{Arch, Model, ModelConfig};
use ecgnet::signal_io::{stratified_partition, ClassCounts};
use ecgnet::synthetic::{generate, SyntheticConfig};
use ecgnet::training::{compute_class_weights, evaluate, train_crnn_three_phase, TrainConfig, Trainer};

fn main() {
    let mut args = std::env::args().skip(1);
    let arch: Arch = args.next().as_deref().unwrap_or("cnn").parse().expect("arch is cnn or crnn");
    let seed: u64 = args.next().map(|s| s.parse().expect("numeric seed")).unwrap_or(1);

    let ds = generate(&SyntheticConfig::default(), 7 + seed).unwrap();
    let val_ids = stratified_partition(&ds, 5, 7).unwrap().test_ids(0);
    let (val, train): (Vec<_>, Vec<_>) = ds.records.iter().partition(|r| val_ids.contains(&r.id));
    let config = ModelConfig::for_arch(arch).with_scale(0.125);
    let tc = TrainConfig {
        max_epochs: 60,
        patience_epochs: 60,
        phase1_epochs: Some(30),
        phase2_epochs: 10,
        phase3_epochs: Some(20),
        seed,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    match arch {
        Arch::Cnn => {
            let mut model = Model::<f32>::build(config, seed).unwrap();
            let counts = ClassCounts::from_labels(train.iter().map(|r| r.label.unwrap()));
            let mut trainer = Trainer::<f32>::new(tc.lr, &compute_class_weights(&counts), seed);
            for epoch in 1..=tc.max_epochs {
                let loss = trainer.train_epoch(&mut model, &train, &tc).unwrap();
                let report = evaluate(&mut model, &val, &tc.preprocess, tc.batch_size).unwrap();
                println!(
                    "epoch {epoch:3}  loss {loss:.4}  val acc {:.3}  f1_avg {:.3}  {:.0}s",
                    report.overall_accuracy,
                    report.f1_avg,
                    start.elapsed().as_secs_f64()
                );
                if report.overall_accuracy >= 0.95 {
                    break;
                }
            }
        }
        Arch::Crnn => {
            let r = train_crnn_three_phase::<f32>(&config, &train, &val, &tc).unwrap();
            for e in r.histories.iter().flat_map(|h| &h.epochs) {
                println!("{:?} epoch {:3}  loss {:.4}  val f1_avg {:.3}", e.phase, e.epoch, e.loss, e.val_f1_avg);
            }
            let mut model = r.model;
            let report = evaluate(&mut model, &val, &tc.preprocess, tc.batch_size).unwrap();
            println!(
                "kept {:?}: val acc {:.3}  {:.0}s",
                r.chosen_phase,
                report.overall_accuracy,
                start.elapsed().as_secs_f64()
            );
        }
    }
}
