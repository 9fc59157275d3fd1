//! Overfit the toy segmenter on eight synthetic 64x64 crack plates.
//!
//! ```bash
//! cargo run --release -p crackscan --example train_segmenter
//! ```

use crackscan::data::{synth_dataset, Split};
use crackscan::models::{ClassLabel, SegmenterConfig};
use crackscan::pipeline::{train_segmenter, LrSchedule, TrainOptions};

fn main() -> crackscan::Result<()> {
    let dir = std::env::temp_dir().join("crackscan_example_seg");
    let mut manifest = synth_dataset(&dir, 20, 64, 7)?;
    // First 8 crack plates train, the next 2 validate; backgrounds unused.
    let mut crack_seen = 0;
    for r in manifest.records.iter_mut() {
        if r.label == ClassLabel::Crack {
            r.split = if crack_seen < 8 { Split::Train } else { Split::Val };
            crack_seen += 1;
        } else {
            r.split = Split::Test;
        }
    }

    let cfg = SegmenterConfig::toy();
    let opts = TrainOptions {
        epochs: 300,
        batch_size: 8,
        schedule: LrSchedule::TwoPhase { high: 0.05, low: 0.005, switch_epoch: 150 },
        momentum: 0.9,
        seed: 42,
        stop_at_metric: Some(0.9),
        out_dir: dir.join("train"),
    };

    let started = std::time::Instant::now();
    let outcome = train_segmenter(&manifest, &cfg, &opts)?;
    let elapsed = started.elapsed().as_secs_f64();

    for log in outcome.log.iter().step_by(25).chain(outcome.log.last()) {
        println!(
            "epoch {:3}  lr {:.5}  train loss {:.4}  val loss {:.4}  micro IoU {:.4}",
            log.epoch, log.lr, log.train_loss, log.val_loss, log.train_metric
        );
    }
    match outcome.reached_target_at {
        Some(epoch) => println!("train micro-IoU 0.9 reached at epoch {epoch} ({elapsed:.1}s)"),
        None => println!("target not reached in {} epochs ({elapsed:.1}s)", outcome.log.len()),
    }
    println!("best-val weights: {}", outcome.weights_path.display());
    Ok(())
}
