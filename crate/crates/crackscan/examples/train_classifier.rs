//! Overfit the toy classifier on a small synthetic corpus.
//!
//! Generates 12 plates (crack / background alternating), trains the toy
//! dense-connectivity classifier on 10 of them, and reports when training
//! accuracy reaches 1.0.
//!
//! ```bash
//! cargo run --release -p crackscan --example train_classifier
//! ```

use crackscan::data::{synth_dataset, Split};
use crackscan::models::DenseNetConfig;
use crackscan::pipeline::{train_classifier, LrSchedule, TrainOptions};

fn main() -> crackscan::Result<()> {
    let dir = std::env::temp_dir().join("crackscan_example_cls");
    let mut manifest = synth_dataset(&dir, 12, 64, 42)?;
    // 10 train, 2 val.
    for (i, r) in manifest.records.iter_mut().enumerate() {
        r.split = if i < 10 { Split::Train } else { Split::Val };
    }

    let cfg = DenseNetConfig::toy();
    let opts = TrainOptions {
        epochs: 200,
        batch_size: 4,
        schedule: LrSchedule::Step { initial: 0.05, factor: 0.1, period: 60 },
        momentum: 0.9,
        seed: 42,
        stop_at_metric: Some(1.0),
        out_dir: dir.join("train"),
    };

    let started = std::time::Instant::now();
    let outcome = train_classifier(&manifest, &cfg, &opts)?;
    let elapsed = started.elapsed().as_secs_f64();

    for log in outcome.log.iter().take(3).chain(outcome.log.last()) {
        println!(
            "epoch {:3}  lr {:.5}  train loss {:.4}  val loss {:.4}  accuracy {:.2}",
            log.epoch, log.lr, log.train_loss, log.val_loss, log.train_metric
        );
    }
    match outcome.reached_target_at {
        Some(epoch) => println!("training accuracy 1.0 reached at epoch {epoch} ({elapsed:.1}s)"),
        None => println!("target not reached in {} epochs ({elapsed:.1}s)", outcome.log.len()),
    }
    println!("best-val weights: {}", outcome.weights_path.display());
    Ok(())
}
