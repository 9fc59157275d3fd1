//! Generate score-weighted activation heatmaps for the overfit toy
//! segmenter and measure how much heatmap mass falls near the true crack.
//!
//! Reuses the corpus and weights of the `train_segmenter` example when they
//! exist; otherwise trains first (about half a minute).
//!
//! ```bash
//! cargo run --release -p crackscan --example explain_scorecam
//! ```

use std::path::Path;

use crackscan::data::{load_image, load_image_raw, load_mask, save_rgb, synth_dataset, Split};
use crackscan::models::{build_segmenter, ClassLabel, SegmenterConfig};
use crackscan::pipeline::{train_segmenter, LrSchedule, TrainOptions};
use crackscan::scorecam::{overlay, scorecam, ScoreCamOptions};
use crackscan::Tensor;

/// Binary dilation by a euclidean disc of the given radius.
fn dilate(mask: &Tensor, radius: usize) -> Vec<bool> {
    let (h, w) = (mask.shape()[2], mask.shape()[3]);
    let r = radius as isize;
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if mask.data()[(y * w as isize + x) as usize] == 0.0 {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx * dx + dy * dy > r * r {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && ny < h as isize && nx >= 0 && nx < w as isize {
                        out[(ny * w as isize + nx) as usize] = true;
                    }
                }
            }
        }
    }
    out
}

fn main() -> crackscan::Result<()> {
    let dir = std::env::temp_dir().join("crackscan_example_seg");
    let manifest_path = dir.join("manifest.tsv");
    let weights = dir.join("train/segmenter.nwb");
    let cfg = SegmenterConfig::toy();

    let manifest = if manifest_path.exists() && weights.exists() {
        crackscan::data::SampleManifest::load(&manifest_path)?
    } else {
        let mut manifest = synth_dataset(&dir, 20, 64, 7)?;
        let mut crack_seen = 0;
        for r in manifest.records.iter_mut() {
            if r.label == ClassLabel::Crack {
                r.split = if crack_seen < 8 { Split::Train } else { Split::Val };
                crack_seen += 1;
            } else {
                r.split = Split::Test;
            }
        }
        manifest.save(&manifest_path)?;
        let opts = TrainOptions {
            epochs: 300,
            batch_size: 8,
            schedule: LrSchedule::TwoPhase { high: 0.05, low: 0.005, switch_epoch: 150 },
            momentum: 0.9,
            seed: 42,
            stop_at_metric: Some(0.9),
            out_dir: dir.join("train"),
        };
        train_segmenter(&manifest, &cfg, &opts)?;
        crackscan::data::SampleManifest::load(&manifest_path)?
    };

    let mut model = build_segmenter(&cfg)?;
    model.load_weights(&weights)?;
    let (h, w) = model.input_size;
    let options = ScoreCamOptions::default();

    let out_dir = dir.join("explain");
    std::fs::create_dir_all(&out_dir)?;

    let crack_train: Vec<_> = manifest
        .records
        .iter()
        .filter(|r| r.label == ClassLabel::Crack && r.split == Split::Train)
        .collect();
    for record in crack_train.iter().take(4) {
        let image = load_image(&manifest.resolve(&record.image_path), h, w)?;
        let raw = load_image_raw(&manifest.resolve(&record.image_path), h, w)?;
        let gt = load_mask(&manifest.resolve(record.mask_path.as_ref().unwrap()), h, w)?;

        for tap in ["enc1", "aspp", "decoder"] {
            let t0 = std::time::Instant::now();
            let map = scorecam(&model, &image, tap, 1, &options)?
                .resized(h, w)
                .into_unit_max();

            let near = dilate(&gt, 5);
            let total: f64 = map.mass();
            let inside: f64 = map
                .values
                .iter()
                .zip(&near)
                .filter(|(_, &n)| n)
                .map(|(v, _)| v)
                .sum();
            let area_frac = near.iter().filter(|&&n| n).count() as f64 / near.len() as f64;
            let frac = if total > 0.0 { inside / total } else { 0.0 };
            println!(
                "{}  tap {tap:8}  mass near crack {:>5.1}%  (dilated area {:>4.1}%, {:.2}s)",
                record.image_path.display(),
                frac * 100.0,
                area_frac * 100.0,
                t0.elapsed().as_secs_f64()
            );

            let stem = record.image_path.file_stem().unwrap().to_string_lossy();
            map.save_gray(&out_dir.join(format!("{stem}_{tap}_c1.png")))?;
            let blended = overlay(&map, &raw, 0.5)?;
            save_rgb(&blended, &out_dir.join(format!("{stem}_{tap}_c1_overlay.png")))?;
        }
    }
    println!("heatmaps written to {}", out_dir.display());
    Ok(())
}
