//! Deterministic synthetic inspection corpus: textured background plates
//! and dark crack polylines with exact ground-truth masks.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{SampleManifest, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::models::ClassLabel;

/// Pixel buffers of one generated sample.
struct Plate {
    size: usize,
    rgb: Vec<[f64; 3]>,
    mask: Vec<bool>,
}

fn value_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize, amp: f64) -> Vec<f64> {
    let grid = cells + 1;
    let offsets: Vec<f64> = (0..grid * grid).map(|_| rng.gen_range(-amp..amp)).collect();
    let mut out = vec![0.0; size * size];
    let scale = cells as f64 / size as f64;
    for y in 0..size {
        let gy = y as f64 * scale;
        let y0 = (gy.floor() as usize).min(cells - 1);
        let fy = gy - y0 as f64;
        for x in 0..size {
            let gx = x as f64 * scale;
            let x0 = (gx.floor() as usize).min(cells - 1);
            let fx = gx - x0 as f64;
            let v00 = offsets[y0 * grid + x0];
            let v01 = offsets[y0 * grid + x0 + 1];
            let v10 = offsets[(y0 + 1) * grid + x0];
            let v11 = offsets[(y0 + 1) * grid + x0 + 1];
            let top = v00 * (1.0 - fx) + v01 * fx;
            let bot = v10 * (1.0 - fx) + v11 * fx;
            out[y * size + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

fn background_plate(rng: &mut ChaCha8Rng, size: usize) -> Plate {
    let base = rng.gen_range(0.60..0.85);
    let coarse = value_noise(rng, size, 5, 0.07);
    let tint_g = rng.gen_range(0.95..1.0);
    let tint_b = rng.gen_range(0.90..0.98);
    let mut rgb = Vec::with_capacity(size * size);
    for i in 0..size * size {
        let v = (base + coarse[i] + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0);
        rgb.push([v, v * tint_g, v * tint_b]);
    }
    Plate {
        size,
        rgb,
        mask: vec![false; size * size],
    }
}

/// Stamp a filled disc, marking mask pixels and darkening the image.
fn stamp(plate: &mut Plate, rng: &mut ChaCha8Rng, cx: f64, cy: f64, radius: f64, darkness: f64) {
    let s = plate.size as isize;
    let r2 = radius * radius;
    let x_lo = ((cx - radius).floor() as isize).max(0);
    let x_hi = ((cx + radius).ceil() as isize).min(s - 1);
    let y_lo = ((cy - radius).floor() as isize).max(0);
    let y_hi = ((cy + radius).ceil() as isize).min(s - 1);
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            if dx * dx + dy * dy <= r2 {
                let i = y as usize * plate.size + x as usize;
                if !plate.mask[i] {
                    plate.mask[i] = true;
                    let v = (darkness + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0);
                    plate.rgb[i] = [v, v, v];
                }
            }
        }
    }
}

fn draw_crack(plate: &mut Plate, rng: &mut ChaCha8Rng) {
    let s = plate.size as f64;
    let thickness = rng.gen_range(s / 16.0..s / 10.0).max(2.0);
    let darkness = rng.gen_range(0.05..0.20);
    let segments = 4;
    let vertical = rng.gen_bool(0.5);

    // A polyline crossing the plate with bounded lateral jitter.
    let mut main = rng.gen_range(0.25 * s..0.75 * s);
    let mut points = Vec::with_capacity(segments + 1);
    for k in 0..=segments {
        let along = s * k as f64 / segments as f64;
        points.push(if vertical { (main, along) } else { (along, main) });
        main = (main + rng.gen_range(-s / 6.0..s / 6.0)).clamp(0.1 * s, 0.9 * s);
    }

    let radius = thickness / 2.0;
    for pair in points.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt().max(1e-9);
        let steps = (len / 0.3).ceil() as usize;
        for t in 0..=steps {
            let f = t as f64 / steps as f64;
            stamp(
                plate,
                rng,
                x0 + (x1 - x0) * f,
                y0 + (y1 - y0) * f,
                radius,
                darkness,
            );
        }
    }
}

fn write_plate(plate: &Plate, image_path: &Path, mask_path: &Path) -> Result<()> {
    let s = plate.size as u32;
    let img = image::RgbImage::from_fn(s, s, |x, y| {
        let px = plate.rgb[y as usize * plate.size + x as usize];
        image::Rgb([
            (px[0] * 255.0).round() as u8,
            (px[1] * 255.0).round() as u8,
            (px[2] * 255.0).round() as u8,
        ])
    });
    img.save(image_path)?;
    let mask = image::GrayImage::from_fn(s, s, |x, y| {
        image::Luma([if plate.mask[y as usize * plate.size + x as usize] {
            255
        } else {
            0
        }])
    });
    mask.save(mask_path)?;
    Ok(())
}

/// Generate `n_images` square plates of extent `size` under `dir`
/// (`images/` and `masks/` subdirectories plus `manifest.tsv`). Even
/// indices carry a crack with a nonempty exact mask; odd indices are
/// defect-free with an all-zero mask. Every record starts in the train
/// split; run a stratified split to partition. The same seed reproduces
/// the corpus byte for byte.
pub fn synth_dataset(dir: &Path, n_images: usize, size: usize, seed: u64) -> Result<SampleManifest> {
    if n_images < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic corpus needs at least 2 images, got {n_images}"
        )));
    }
    if size < 16 {
        return Err(Error::InvalidArgument(format!("plate size {size} too small")));
    }
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;

    let mut manifest = SampleManifest::new(&format!("synth-{seed}"), dir, seed);
    manifest.image_size = Some((size, size));

    for i in 0..n_images {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let mut plate = background_plate(&mut rng, size);
        let label = if i % 2 == 0 {
            draw_crack(&mut plate, &mut rng);
            ClassLabel::Crack
        } else {
            ClassLabel::Background
        };
        let image_rel = format!("images/img_{i:04}.png");
        let mask_rel = format!("masks/img_{i:04}.png");
        write_plate(&plate, &dir.join(&image_rel), &dir.join(&mask_rel))?;
        manifest.records.push(SampleRecord {
            image_path: image_rel.into(),
            label,
            mask_path: Some(mask_rel.into()),
            split: Split::Train,
        });
    }

    manifest.save(&dir.join("manifest.tsv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_mask;
    use tempfile::tempdir;

    #[test]
    fn crack_masks_nonempty_background_masks_empty() {
        let dir = tempdir().unwrap();
        let m = synth_dataset(dir.path(), 6, 48, 9).unwrap();
        assert_eq!(m.records.len(), 6);
        for r in &m.records {
            let mask = load_mask(&m.resolve(r.mask_path.as_ref().unwrap()), 48, 48).unwrap();
            let on: f64 = mask.data().iter().sum();
            match r.label {
                ClassLabel::Crack => assert!(on > 0.0, "{:?}", r.image_path),
                ClassLabel::Background => assert_eq!(on, 0.0, "{:?}", r.image_path),
            }
        }
    }

    #[test]
    fn same_seed_reproduces_bytes() {
        let a = tempdir().unwrap();
        let b = tempdir().unwrap();
        synth_dataset(a.path(), 4, 32, 5).unwrap();
        synth_dataset(b.path(), 4, 32, 5).unwrap();
        for rel in ["images/img_0000.png", "images/img_0003.png", "masks/img_0000.png"] {
            assert_eq!(
                std::fs::read(a.path().join(rel)).unwrap(),
                std::fs::read(b.path().join(rel)).unwrap(),
                "{rel}"
            );
        }
    }

    #[test]
    fn too_few_images_rejected() {
        let dir = tempdir().unwrap();
        assert!(synth_dataset(dir.path(), 1, 32, 5).is_err());
    }
}
