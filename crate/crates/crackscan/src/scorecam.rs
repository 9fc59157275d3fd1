//! Score-weighted class activation mapping.
//!
//! Each channel of a tapped activation becomes a [0, 1] mask over the
//! input; the channel's weight is the confidence change the masked input
//! produces against an all-zero baseline; the heatmap is the ReLU of the
//! weighted channel sum, so it is nonnegative everywhere. One heatmap costs
//! exactly K + 2 forward passes at the default mask batch of 1: one tapped
//! forward, one baseline (computed once and reused), and one per channel.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::imgio;
use crate::error::{Error, Result};
use crate::models::ModelGraph;
use crate::tensor::{bilinear_resize, mul, softmax, Tensor};

/// Whether heatmap values are raw weighted sums or scaled to a unit peak.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalization {
    Raw,
    UnitMax,
}

/// Nonnegative saliency map tied to a source layer and target class.
#[derive(Debug, Clone)]
pub struct Heatmap {
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub layer: String,
    pub class_index: usize,
    pub normalization: Normalization,
}

impl Heatmap {
    /// Peak value (zero for an empty map).
    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// Sum of all values.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Bilinear resize; the result is demoted to raw normalization because
    /// interpolation can lower the peak.
    pub fn resized(&self, height: usize, width: usize) -> Heatmap {
        let t = Tensor::new(&[1, 1, self.height, self.width], self.values.clone())
            .expect("heatmap buffer matches extent");
        let r = bilinear_resize(&t, height, width).expect("positive target extent");
        Heatmap {
            values: r.data().to_vec(),
            height,
            width,
            layer: self.layer.clone(),
            class_index: self.class_index,
            normalization: Normalization::Raw,
        }
    }

    /// Scale so the peak is 1; an all-zero map stays all-zero.
    pub fn into_unit_max(mut self) -> Heatmap {
        let max = self.max();
        if max > 0.0 {
            for v in &mut self.values {
                *v /= max;
            }
        }
        self.normalization = Normalization::UnitMax;
        self
    }

    /// Write as 8-bit grayscale (unit-max maps only; values scale to 0-255).
    pub fn save_gray(&self, path: &Path) -> Result<()> {
        if self.normalization != Normalization::UnitMax {
            return Err(Error::InvalidArgument(
                "save_gray expects a unit-max heatmap".into(),
            ));
        }
        imgio::save_gray(&self.values, self.height, self.width, path)
    }
}

/// Channel index paired with its confidence-change weight.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChannelWeight {
    pub channel: usize,
    pub weight: f64,
}

/// Heatmap generation knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreCamOptions {
    /// How many channel masks share one forward pass. 1 preserves the
    /// K + 2 forward-count contract; larger batches change only the pass
    /// count, never the scores.
    pub mask_batch: usize,
}

impl Default for ScoreCamOptions {
    fn default() -> Self {
        ScoreCamOptions { mask_batch: 1 }
    }
}

/// Per-item class scores of a model output: softmax probability of the
/// class for 2-d logits, or its spatial mean for 4-d logit maps.
pub fn class_scores(output: &Tensor, class_index: usize) -> Result<Vec<f64>> {
    match output.ndim() {
        2 => {
            let (b, k) = (output.shape()[0], output.shape()[1]);
            if class_index >= k {
                return Err(Error::InvalidArgument(format!(
                    "class {class_index} out of range for {k} classes"
                )));
            }
            let probs = softmax(output, 1)?;
            Ok((0..b).map(|i| probs.data()[i * k + class_index]).collect())
        }
        4 => {
            let (b, k, h, w) = (
                output.shape()[0],
                output.shape()[1],
                output.shape()[2],
                output.shape()[3],
            );
            if class_index >= k {
                return Err(Error::InvalidArgument(format!(
                    "class {class_index} out of range for {k} classes"
                )));
            }
            let probs = softmax(output, 1)?;
            let plane = h * w;
            Ok((0..b)
                .map(|i| {
                    let base = (i * k + class_index) * plane;
                    probs.data()[base..base + plane].iter().sum::<f64>() / plane as f64
                })
                .collect())
        }
        _ => Err(Error::Shape(format!(
            "class score needs 2-d or 4-d output, got {:?}",
            output.shape()
        ))),
    }
}

/// Scalar class score of a single-item output.
pub fn class_score(output: &Tensor, class_index: usize) -> Result<f64> {
    let scores = class_scores(output, class_index)?;
    if scores.len() != 1 {
        return Err(Error::Shape(format!(
            "expected a single-item output, got batch {}",
            scores.len()
        )));
    }
    Ok(scores[0])
}

/// Upsample one activation channel to the target extent and min-max
/// normalize it into [0, 1]. A constant channel yields an all-zero mask.
pub fn normalize_mask(channel: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    if channel.ndim() != 4 || channel.shape()[0] != 1 || channel.shape()[1] != 1 {
        return Err(Error::Shape(format!(
            "normalize_mask expects a 1x1xHxW channel, got {:?}",
            channel.shape()
        )));
    }
    let resized = bilinear_resize(channel, target_h, target_w)?;
    let data = resized.data();
    let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok(Tensor::zeros(&[1, 1, target_h, target_w]));
    }
    let span = max - min;
    let normalized: Vec<f64> = data.iter().map(|&v| (v - min) / span).collect();
    Tensor::new(&[1, 1, target_h, target_w], normalized)
}

fn check_mask(image: &Tensor, mask: &Tensor) -> Result<()> {
    if mask.ndim() != 4
        || mask.shape()[2] != image.shape()[2]
        || mask.shape()[3] != image.shape()[3]
    {
        return Err(Error::Shape(format!(
            "mask {:?} does not match image {:?}",
            mask.shape(),
            image.shape()
        )));
    }
    Ok(())
}

/// Confidence change of one masked input: `f_c(image * mask) - f_c(0)`,
/// with the all-zero image as the baseline. Runs two forward passes; use
/// [`scorecam`] to share the baseline across channels.
pub fn cic_weight(
    model: &ModelGraph,
    image: &Tensor,
    mask: &Tensor,
    class_index: usize,
) -> Result<f64> {
    check_mask(image, mask)?;
    let baseline_input = Tensor::zeros(image.shape());
    let baseline = class_score(&model.forward(&baseline_input)?, class_index)?;
    let masked = mul(image, mask)?.detached();
    let score = class_score(&model.forward(&masked)?, class_index)?;
    Ok(score - baseline)
}

/// Full Score-CAM heatmap for one tapped layer, at the activation's native
/// resolution, raw normalization. Callers upsample/normalize for overlay.
pub fn scorecam(
    model: &ModelGraph,
    image: &Tensor,
    tap: &str,
    class_index: usize,
    options: &ScoreCamOptions,
) -> Result<Heatmap> {
    if class_index >= model.class_count {
        return Err(Error::InvalidArgument(format!(
            "class {class_index} out of range for {} classes",
            model.class_count
        )));
    }
    let (_, taps) = model.forward_with_taps(image, &[tap.to_string()])?;
    let activation = &taps[tap];
    if activation.ndim() != 4 || activation.shape()[0] != 1 {
        return Err(Error::Shape(format!(
            "tap {tap} is not a 1xKxHxW activation: {:?}",
            activation.shape()
        )));
    }
    let channels = activation.shape()[1];
    let (img_h, img_w) = (image.shape()[2], image.shape()[3]);

    let baseline = class_score(&model.forward(&Tensor::zeros(image.shape()))?, class_index)?;

    let masks: Vec<Tensor> = (0..channels)
        .map(|k| normalize_mask(&activation.channel_plane(0, k)?, img_h, img_w))
        .collect::<Result<_>>()?;

    let weights: Vec<ChannelWeight> = if options.mask_batch <= 1 {
        // Independent masked forwards; deterministic because results are
        // collected by channel index.
        (0..channels)
            .into_par_iter()
            .map(|k| -> Result<ChannelWeight> {
                let masked = mul(image, &masks[k])?.detached();
                let score = class_score(&model.forward(&masked)?, class_index)?;
                Ok(ChannelWeight { channel: k, weight: score - baseline })
            })
            .collect::<Result<_>>()?
    } else {
        let mut out = Vec::with_capacity(channels);
        for chunk in (0..channels).collect::<Vec<_>>().chunks(options.mask_batch) {
            let batch: Vec<Tensor> = chunk
                .iter()
                .map(|&k| mul(image, &masks[k]).map(|t| t.detached()))
                .collect::<Result<_>>()?;
            let stacked = Tensor::stack_batch(&batch)?;
            let scores = class_scores(&model.forward(&stacked)?, class_index)?;
            for (&k, score) in chunk.iter().zip(scores) {
                out.push(ChannelWeight { channel: k, weight: score - baseline });
            }
        }
        out
    };

    Ok(weighted_channel_sum(activation, &weights, tap, class_index))
}

/// ReLU of the weighted channel sum at the activation's native resolution.
pub fn weighted_channel_sum(
    activation: &Tensor,
    weights: &[ChannelWeight],
    layer: &str,
    class_index: usize,
) -> Heatmap {
    let (h, w) = (activation.shape()[2], activation.shape()[3]);
    let plane = h * w;
    let mut values = vec![0.0; plane];
    for cw in weights {
        let base = cw.channel * plane;
        for i in 0..plane {
            values[i] += cw.weight * activation.data()[base + i];
        }
    }
    for v in &mut values {
        *v = v.max(0.0);
    }
    Heatmap {
        values,
        height: h,
        width: w,
        layer: layer.to_string(),
        class_index,
        normalization: Normalization::Raw,
    }
}

/// One heatmap per tap, in tap order.
pub fn explain_stages(
    model: &ModelGraph,
    image: &Tensor,
    taps: &[String],
    class_index: usize,
    options: &ScoreCamOptions,
) -> Result<Vec<Heatmap>> {
    taps.iter()
        .map(|tap| scorecam(model, image, tap, class_index, options))
        .collect()
}

/// Color stops of the overlay colormap (position, RGB in [0, 1]): dark blue
/// through cyan and yellow to dark red, linearly interpolated.
pub const COLORMAP_STOPS: [(f64, [f64; 3]); 6] = [
    (0.000, [0.0, 0.0, 0.5]),
    (0.125, [0.0, 0.0, 1.0]),
    (0.375, [0.0, 1.0, 1.0]),
    (0.625, [1.0, 1.0, 0.0]),
    (0.875, [1.0, 0.0, 0.0]),
    (1.000, [0.5, 0.0, 0.0]),
];

/// Map a [0, 1] value through [`COLORMAP_STOPS`].
pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let mut prev = COLORMAP_STOPS[0];
    for &stop in &COLORMAP_STOPS[1..] {
        if v <= stop.0 {
            let f = (v - prev.0) / (stop.0 - prev.0);
            return [
                prev.1[0] + (stop.1[0] - prev.1[0]) * f,
                prev.1[1] + (stop.1[1] - prev.1[1]) * f,
                prev.1[2] + (stop.1[2] - prev.1[2]) * f,
            ];
        }
        prev = stop;
    }
    prev.1
}

/// Blend `alpha * colormap(heatmap) + (1 - alpha) * image`. The heatmap
/// must be unit-max; it is bilinearly resized to the image extent. The
/// image is a 1x3xHxW [0, 1] tensor; so is the result.
pub fn overlay(heatmap: &Heatmap, image: &Tensor, alpha: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    if heatmap.normalization != Normalization::UnitMax {
        return Err(Error::InvalidArgument("overlay expects a unit-max heatmap".into()));
    }
    if image.ndim() != 4 || image.shape()[0] != 1 || image.shape()[1] != 3 {
        return Err(Error::Shape(format!(
            "overlay expects a 1x3xHxW image, got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[2], image.shape()[3]);
    let map = if heatmap.height == h && heatmap.width == w {
        heatmap.values.clone()
    } else {
        heatmap.resized(h, w).values
    };
    let plane = h * w;
    let mut out = vec![0.0; 3 * plane];
    for i in 0..plane {
        let color = colormap(map[i]);
        for c in 0..3 {
            out[c * plane + i] = alpha * color[c] + (1.0 - alpha) * image.data()[c * plane + i];
        }
    }
    Tensor::new(&[1, 3, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: f64 = 1e-12;

    #[test]
    fn normalize_mask_constant_channel_is_zero() {
        let c = Tensor::full(&[1, 1, 3, 3], 4.2);
        let m = normalize_mask(&c, 6, 6).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_mask_min_max_hand_case() {
        let c = Tensor::new(&[1, 1, 2, 2], vec![0.0, 4.0, 2.0, 8.0]).unwrap();
        let m = normalize_mask(&c, 2, 2).unwrap();
        let expect = [0.0, 0.5, 0.25, 1.0];
        for (a, b) in m.data().iter().zip(&expect) {
            assert!((a - b).abs() < TOL);
        }
    }

    #[test]
    fn normalize_mask_identity_on_unit_range() {
        let c = Tensor::new(&[1, 1, 1, 3], vec![0.0, 0.25, 1.0]).unwrap();
        let m = normalize_mask(&c, 1, 3).unwrap();
        for (a, b) in m.data().iter().zip(c.data()) {
            assert!((a - b).abs() < TOL);
        }
    }

    #[test]
    fn weighted_sum_relu_clamps() {
        // Two identical nonnegative channels with weights (1, -2) cancel to
        // a negative sum that ReLU zeroes.
        let a = Tensor::new(&[1, 2, 1, 2], vec![1.0, 3.0, 1.0, 3.0]).unwrap();
        let weights = [
            ChannelWeight { channel: 0, weight: 1.0 },
            ChannelWeight { channel: 1, weight: -2.0 },
        ];
        let h = weighted_channel_sum(&a, &weights, "t", 1);
        assert!(h.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weighted_sum_single_positive_channel_is_the_channel() {
        let a = Tensor::new(&[1, 1, 1, 3], vec![0.5, 0.0, 2.0]).unwrap();
        let weights = [ChannelWeight { channel: 0, weight: 1.0 }];
        let h = weighted_channel_sum(&a, &weights, "t", 1);
        assert_eq!(h.values, vec![0.5, 0.0, 2.0]);
    }

    #[test]
    fn weighted_sum_channel_permutation_invariant() {
        let a = Tensor::new(&[1, 2, 1, 2], vec![1.0, 2.0, 5.0, 7.0]).unwrap();
        let permuted = Tensor::new(&[1, 2, 1, 2], vec![5.0, 7.0, 1.0, 2.0]).unwrap();
        let w = [
            ChannelWeight { channel: 0, weight: 0.3 },
            ChannelWeight { channel: 1, weight: 0.9 },
        ];
        let w_perm = [
            ChannelWeight { channel: 0, weight: 0.9 },
            ChannelWeight { channel: 1, weight: 0.3 },
        ];
        let h1 = weighted_channel_sum(&a, &w, "t", 1);
        let h2 = weighted_channel_sum(&permuted, &w_perm, "t", 1);
        for (x, y) in h1.values.iter().zip(&h2.values) {
            assert!((x - y).abs() < TOL);
        }
    }

    #[test]
    fn unit_max_peaks_at_one_or_stays_zero() {
        let h = Heatmap {
            values: vec![0.0, 2.0, 1.0],
            height: 1,
            width: 3,
            layer: "t".into(),
            class_index: 1,
            normalization: Normalization::Raw,
        };
        let u = h.into_unit_max();
        assert!((u.max() - 1.0).abs() < TOL);

        let z = Heatmap {
            values: vec![0.0; 3],
            height: 1,
            width: 3,
            layer: "t".into(),
            class_index: 1,
            normalization: Normalization::Raw,
        };
        assert_eq!(z.into_unit_max().max(), 0.0);
    }

    #[test]
    fn overlay_alpha_extremes() {
        let image = Tensor::full(&[1, 3, 2, 2], 0.25);
        let map = Heatmap {
            values: vec![0.0, 1.0, 0.5, 0.25],
            height: 2,
            width: 2,
            layer: "t".into(),
            class_index: 1,
            normalization: Normalization::UnitMax,
        };
        let same = overlay(&map, &image, 0.0).unwrap();
        for (a, b) in same.data().iter().zip(image.data()) {
            assert!((a - b).abs() < TOL);
        }
        let pure = overlay(&map, &image, 1.0).unwrap();
        let c = colormap(1.0);
        // Pixel 1 carries heat 1.0.
        assert!((pure.at4(0, 0, 0, 1) - c[0]).abs() < TOL);
        assert!((pure.at4(0, 2, 0, 1) - c[2]).abs() < TOL);

        assert!(overlay(&map, &image, 1.5).is_err());
    }

    #[test]
    fn overlay_zero_heatmap_blends_base_color() {
        let image = Tensor::full(&[1, 3, 1, 1], 0.8);
        let map = Heatmap {
            values: vec![0.0],
            height: 1,
            width: 1,
            layer: "t".into(),
            class_index: 1,
            normalization: Normalization::UnitMax,
        };
        let out = overlay(&map, &image, 0.5).unwrap();
        let base = colormap(0.0);
        for c in 0..3 {
            let expect = 0.5 * base[c] + 0.5 * 0.8;
            assert!((out.data()[c] - expect).abs() < TOL);
        }
    }
}
