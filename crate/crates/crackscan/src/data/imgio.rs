//! Raster image and mask loading with the preprocessing the models expect.

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{bilinear_resize, Tensor};

/// Per-channel standardization constants applied after scaling to [0, 1]
/// (the defaults the underlying architectures assume).
pub const CHANNEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

fn decode_rgb(path: &Path) -> Result<RgbImage> {
    let img = ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(|e| Error::Image(e))?;
    Ok(img.to_rgb8())
}

fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * h * w + y * w + x] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[1, 3, h, w], data).expect("consistent image shape")
}

/// Decode to RGB, bilinearly resize to `(target_h, target_w)`, and scale
/// values to [0, 1]. No standardization; used for overlays and previews.
pub fn load_image_raw(path: &Path, target_h: usize, target_w: usize) -> Result<Tensor> {
    let img = decode_rgb(path)?;
    let t = rgb_to_tensor(&img);
    if t.shape()[2] == target_h && t.shape()[3] == target_w {
        Ok(t)
    } else {
        bilinear_resize(&t, target_h, target_w).map(|t| t.detached())
    }
}

/// Decode, resize, scale to [0, 1], then standardize each channel with
/// [`CHANNEL_MEAN`] and [`CHANNEL_STD`]. Output is 1x3xHxW.
pub fn load_image(path: &Path, target_h: usize, target_w: usize) -> Result<Tensor> {
    let raw = load_image_raw(path, target_h, target_w)?;
    Ok(standardize(&raw))
}

/// Apply the per-channel standardization to a [0, 1] image tensor.
pub fn standardize(raw: &Tensor) -> Tensor {
    let (h, w) = (raw.shape()[2], raw.shape()[3]);
    let plane = h * w;
    let mut data = raw.data().to_vec();
    for c in 0..3 {
        let (m, s) = (CHANNEL_MEAN[c], CHANNEL_STD[c]);
        for v in &mut data[c * plane..(c + 1) * plane] {
            *v = (*v - m) / s;
        }
    }
    Tensor::new(raw.shape(), data).expect("same shape")
}

#[inline]
fn nearest_index(dst: usize, in_len: usize, out_len: usize) -> usize {
    // Half-pixel-center nearest neighbor; identity when sizes match.
    let src = (dst as f64 + 0.5) * in_len as f64 / out_len as f64;
    (src.floor() as usize).min(in_len - 1)
}

/// Decode a grayscale mask, nearest-neighbor resize (masks must stay
/// binary), and binarize at >= 128. Output is 1x1xHxW holding only 0 and 1.
pub fn load_mask(path: &Path, target_h: usize, target_w: usize) -> Result<Tensor> {
    let img = ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(Error::Image)?
        .to_luma8();
    let (in_w, in_h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; target_h * target_w];
    for y in 0..target_h {
        let sy = nearest_index(y, in_h, target_h);
        for x in 0..target_w {
            let sx = nearest_index(x, in_w, target_w);
            let v = img.get_pixel(sx as u32, sy as u32).0[0];
            data[y * target_w + x] = f64::from(v >= 128);
        }
    }
    Tensor::new(&[1, 1, target_h, target_w], data)
}

/// Write a binary 1x1xHxW mask as an 8-bit grayscale file (0 / 255).
pub fn save_mask(mask: &Tensor, path: &Path) -> Result<()> {
    if mask.ndim() != 4 || mask.shape()[0] != 1 || mask.shape()[1] != 1 {
        return Err(Error::Shape(format!(
            "save_mask expects 1x1xHxW, got {:?}",
            mask.shape()
        )));
    }
    let (h, w) = (mask.shape()[2], mask.shape()[3]);
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = mask.data()[y as usize * w + x as usize];
        image::Luma([if v != 0.0 { 255u8 } else { 0u8 }])
    });
    img.save(path)?;
    Ok(())
}

/// Write an HxW buffer of [0, 1] values as 8-bit grayscale.
pub fn save_gray(values: &[f64], h: usize, w: usize, path: &Path) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::Shape(format!(
            "save_gray got {} values for {h}x{w}",
            values.len()
        )));
    }
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = values[y as usize * w + x as usize].clamp(0.0, 1.0);
        image::Luma([(v * 255.0).round() as u8])
    });
    img.save(path)?;
    Ok(())
}

/// Write a 1x3xHxW [0, 1] tensor as an 8-bit RGB file.
pub fn save_rgb(tensor: &Tensor, path: &Path) -> Result<()> {
    if tensor.ndim() != 4 || tensor.shape()[0] != 1 || tensor.shape()[1] != 3 {
        return Err(Error::Shape(format!(
            "save_rgb expects 1x3xHxW, got {:?}",
            tensor.shape()
        )));
    }
    let (h, w) = (tensor.shape()[2], tensor.shape()[3]);
    let plane = h * w;
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let px = |c: usize| {
            (tensor.data()[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn solid_gray_standardizes_by_the_constants() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("gray.png");
        let img = RgbImage::from_pixel(8, 6, image::Rgb([128, 128, 128]));
        img.save(&path).unwrap();

        let t = load_image(&path, 6, 8).unwrap();
        assert_eq!(t.shape(), &[1, 3, 6, 8]);
        let v = 128.0 / 255.0;
        for c in 0..3 {
            let expect = (v - CHANNEL_MEAN[c]) / CHANNEL_STD[c];
            let got = t.data()[c * 48];
            assert!((got - expect).abs() < 1e-12);
            assert!(t.data()[c * 48..(c + 1) * 48].iter().all(|&x| (x - expect).abs() < 1e-12));
        }
    }

    #[test]
    fn same_size_load_skips_resampling() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("px.png");
        let mut img = RgbImage::new(2, 2);
        img.put_pixel(0, 0, image::Rgb([10, 20, 30]));
        img.put_pixel(1, 0, image::Rgb([40, 50, 60]));
        img.put_pixel(0, 1, image::Rgb([70, 80, 90]));
        img.put_pixel(1, 1, image::Rgb([100, 110, 120]));
        img.save(&path).unwrap();

        let t = load_image_raw(&path, 2, 2).unwrap();
        assert!((t.data()[0] - 10.0 / 255.0).abs() < 1e-12);
        assert!((t.data()[3] - 100.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn masks_binarize_and_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("mask.png");
        // 0/255 checker stays a binary checker at the same size.
        let img = GrayImage::from_fn(4, 4, |x, y| {
            image::Luma([if (x + y) % 2 == 0 { 255 } else { 0 }])
        });
        img.save(&path).unwrap();

        let m = load_mask(&path, 4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let expect = f64::from((x + y) % 2 == 0);
                assert_eq!(m.data()[y * 4 + x], expect);
            }
        }

        let out = dir.path().join("mask_out.png");
        save_mask(&m, &out).unwrap();
        let again = load_mask(&out, 4, 4).unwrap();
        assert_eq!(m.data(), again.data());
    }

    #[test]
    fn all_black_and_all_white_masks() {
        let dir = tempdir().unwrap();
        let black = dir.path().join("black.png");
        GrayImage::from_pixel(5, 5, image::Luma([0])).save(&black).unwrap();
        let m = load_mask(&black, 5, 5).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));

        let white = dir.path().join("white.png");
        GrayImage::from_pixel(5, 5, image::Luma([255])).save(&white).unwrap();
        let m = load_mask(&white, 5, 5).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn unreadable_file_is_an_error() {
        assert!(load_image(Path::new("/nonexistent/file.png"), 4, 4).is_err());
        assert!(load_mask(Path::new("/nonexistent/file.png"), 4, 4).is_err());
    }
}
