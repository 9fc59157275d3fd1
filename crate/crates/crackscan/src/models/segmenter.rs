//! Atrous encoder-decoder crack segmenter.
//!
//! A strided conv encoder feeds an atrous spatial pyramid (parallel 1x1,
//! dilated 3x3, and global-pool branches, concatenated and projected). The
//! decoder upsamples the pyramid output to the low-level feature size,
//! concatenates it with a 1x1-projected low-level map, refines with two 3x3
//! convs, projects to two channels, and bilinearly upsamples to the input
//! size, so the logit map always matches the image extent.

use serde::{Deserialize, Serialize};

use super::{GraphBuilder, ModelGraph, ModelKind, ResizeTarget, INPUT};
use crate::error::{Error, Result};
use crate::tensor::{softmax, ConvParams, Tensor};

/// Structural hyperparameters of the segmenter.
///
/// `encoder_channels[0]` is the stride-2 stem; every following stage halves
/// the spatial extent again, so the output stride is
/// `2^encoder_channels.len()`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SegmenterConfig {
    pub encoder_channels: Vec<usize>,
    /// Index of the encoder stage whose output feeds the decoder skip path.
    pub low_level_stage: usize,
    /// Dilation rates of the pyramid's 3x3 branches.
    pub aspp_rates: Vec<usize>,
    pub aspp_channels: usize,
    /// Channels of the 1x1-projected low-level features.
    pub low_proj_channels: usize,
    /// Channels of the decoder refinement convs.
    pub decoder_channels: usize,
    pub class_count: usize,
    pub input_channels: usize,
    /// (height, width) the model consumes.
    pub input_size: (usize, usize),
    pub seed: u64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            encoder_channels: vec![64, 128, 256, 512],
            low_level_stage: 1,
            aspp_rates: vec![6, 12, 18],
            aspp_channels: 256,
            low_proj_channels: 48,
            decoder_channels: 256,
            class_count: 2,
            input_channels: 3,
            input_size: (384, 512),
            seed: 42,
        }
    }
}

impl SegmenterConfig {
    /// Small variant for desk-scale training and tests (output stride 8).
    pub fn toy() -> Self {
        SegmenterConfig {
            encoder_channels: vec![8, 16, 32],
            low_level_stage: 1,
            aspp_rates: vec![1, 2, 3],
            aspp_channels: 32,
            low_proj_channels: 8,
            decoder_channels: 16,
            input_size: (64, 64),
            ..Default::default()
        }
    }

    /// Encoder output stride relative to the input.
    pub fn output_stride(&self) -> usize {
        1 << self.encoder_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::Model("encoder channels must be positive".into()));
        }
        if self.low_level_stage >= self.encoder_channels.len() {
            return Err(Error::Model(format!(
                "low-level stage {} out of range for {} encoder stages",
                self.low_level_stage,
                self.encoder_channels.len()
            )));
        }
        if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) {
            return Err(Error::Model("pyramid rates must be positive".into()));
        }
        let mut rates = self.aspp_rates.clone();
        rates.sort_unstable();
        rates.dedup();
        if rates.len() != self.aspp_rates.len() {
            return Err(Error::Model("pyramid rates must be distinct".into()));
        }
        if self.aspp_channels == 0
            || self.low_proj_channels == 0
            || self.decoder_channels == 0
            || self.input_channels == 0
            || self.input_size.0 == 0
            || self.input_size.1 == 0
        {
            return Err(Error::Model("segmenter config fields must be positive".into()));
        }
        if self.class_count != 2 {
            return Err(Error::Model(
                "the inspection pipeline is two-class (background, crack)".into(),
            ));
        }
        Ok(())
    }
}

/// Append the atrous pyramid over `input` (`in_channels` wide): a 1x1
/// branch, one dilated 3x3 branch per rate, and a global-pool branch
/// resized back to the feature extent, concatenated and projected to
/// `out_channels`. Returns the projected layer's name.
pub fn build_aspp(
    b: &mut GraphBuilder,
    prefix: &str,
    input: &str,
    in_channels: usize,
    rates: &[usize],
    out_channels: usize,
) -> String {
    let mut branches = Vec::new();

    let n = b.conv(&format!("{prefix}.b0.conv"), input, in_channels, out_channels, (1, 1), ConvParams::new(1, 0), false);
    let n = b.bn(&format!("{prefix}.b0.bn"), &n, out_channels);
    branches.push(b.relu(&format!("{prefix}.b0"), &n));

    for &rate in rates {
        let p = format!("{prefix}.r{rate}");
        let conv = ConvParams {
            stride: (1, 1),
            padding: (rate, rate),
            dilation: (rate, rate),
            groups: 1,
        };
        let n = b.conv(&format!("{p}.conv"), input, in_channels, out_channels, (3, 3), conv, false);
        let n = b.bn(&format!("{p}.bn"), &n, out_channels);
        branches.push(b.relu(&p, &n));
    }

    let n = b.global_pool(&format!("{prefix}.gp.pool"), input);
    let n = b.conv(&format!("{prefix}.gp.conv"), &n, in_channels, out_channels, (1, 1), ConvParams::new(1, 0), false);
    let n = b.bn(&format!("{prefix}.gp.bn"), &n, out_channels);
    let n = b.relu(&format!("{prefix}.gp.relu"), &n);
    branches.push(b.resize(
        &format!("{prefix}.gp"),
        vec![n, input.to_string()],
        ResizeTarget::LikeSecond,
    ));

    let cat = b.concat(&format!("{prefix}.cat"), branches.clone(), 1);
    let total = out_channels * branches.len();
    let n = b.conv(&format!("{prefix}.proj.conv"), &cat, total, out_channels, (1, 1), ConvParams::new(1, 0), false);
    let n = b.bn(&format!("{prefix}.proj.bn"), &n, out_channels);
    b.relu(prefix, &n)
}

/// Build the stage-two segmenter graph from its config.
///
/// Tap points: `enc0..encN` (encoder stages), `aspp`, `dec_low` and
/// `dec_high` (the decoder's concatenation inputs), `decoder`, `logits`.
pub fn build_segmenter(cfg: &SegmenterConfig) -> Result<ModelGraph> {
    cfg.validate()?;
    let mut b = GraphBuilder::new(cfg.seed);

    // Encoder: stride-2 stem, then stride-2 stages of two 3x3 convs.
    let mut channels = cfg.encoder_channels[0];
    let n = b.conv("enc0.conv", INPUT, cfg.input_channels, channels, (3, 3), ConvParams::new(2, 1), false);
    let n = b.bn("enc0.bn", &n, channels);
    let mut cur = b.relu("enc0", &n);
    b.tap("enc0");

    for (i, &out_c) in cfg.encoder_channels.iter().enumerate().skip(1) {
        let p = format!("enc{i}");
        let n = b.conv(&format!("{p}.conv1"), &cur, channels, out_c, (3, 3), ConvParams::new(2, 1), false);
        let n = b.bn(&format!("{p}.bn1"), &n, out_c);
        let n = b.relu(&format!("{p}.relu1"), &n);
        let n = b.conv(&format!("{p}.conv2"), &n, out_c, out_c, (3, 3), ConvParams::new(1, 1), false);
        let n = b.bn(&format!("{p}.bn2"), &n, out_c);
        cur = b.relu(&p, &n);
        b.tap(&p);
        channels = out_c;
    }

    let aspp = build_aspp(&mut b, "aspp", &cur, channels, &cfg.aspp_rates, cfg.aspp_channels);
    b.tap("aspp");

    // Decoder: upsample pyramid output to the low-level extent, fuse with
    // projected low-level features, refine, classify, upsample to input.
    let low_name = format!("enc{}", cfg.low_level_stage);
    let low_c = cfg.encoder_channels[cfg.low_level_stage];
    let n = b.conv("dec_low.conv", &low_name, low_c, cfg.low_proj_channels, (1, 1), ConvParams::new(1, 0), false);
    let n = b.bn("dec_low.bn", &n, cfg.low_proj_channels);
    let low = b.relu("dec_low", &n);
    b.tap("dec_low");

    let high = b.resize("dec_high", vec![aspp, low_name], ResizeTarget::LikeSecond);
    b.tap("dec_high");

    let cat = b.concat("dec.cat", vec![high, low], 1);
    let cat_c = cfg.aspp_channels + cfg.low_proj_channels;
    let n = b.conv("dec.conv1", &cat, cat_c, cfg.decoder_channels, (3, 3), ConvParams::new(1, 1), false);
    let n = b.bn("dec.bn1", &n, cfg.decoder_channels);
    let n = b.relu("dec.relu1", &n);
    let n = b.conv("dec.conv2", &n, cfg.decoder_channels, cfg.decoder_channels, (3, 3), ConvParams::new(1, 1), false);
    let n = b.bn("dec.bn2", &n, cfg.decoder_channels);
    let dec = b.relu("decoder", &n);
    b.tap("decoder");

    let n = b.conv("logits.conv", &dec, cfg.decoder_channels, cfg.class_count, (1, 1), ConvParams::new(1, 0), true);
    let _ = b.resize("logits", vec![n], ResizeTarget::ToInput);
    b.tap("logits");

    b.finish(ModelKind::Segmenter, cfg.input_channels, cfg.input_size, cfg.class_count)
}

/// Run stage two on a single image: a binary 1x1xHxW mask set where the
/// crack-class probability strictly exceeds `threshold`.
pub fn segment(model: &ModelGraph, image: &Tensor, threshold: f64) -> Result<Tensor> {
    let prob = segment_probabilities(model, image)?;
    let data: Vec<f64> = prob.data().iter().map(|&p| f64::from(p > threshold)).collect();
    Tensor::new(prob.shape(), data)
}

/// Crack-class probability map (1x1xHxW) for a single image.
pub fn segment_probabilities(model: &ModelGraph, image: &Tensor) -> Result<Tensor> {
    let logits = model.forward(image)?;
    if logits.ndim() != 4 || logits.shape()[1] != model.class_count {
        return Err(Error::Shape(format!(
            "segmenter produced {:?}",
            logits.shape()
        )));
    }
    let probs = softmax(&logits, 1)?;
    probs.slice_axis(1, 1, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_layout_shape_trace_matches_input_extent() {
        let cfg = SegmenterConfig::default();
        let model = build_segmenter(&cfg).unwrap();
        let shapes = model.infer_shapes(&[1, 3, 384, 512]).unwrap();
        assert_eq!(shapes["logits"], vec![1, 2, 384, 512]);
        // Five pyramid branches at 256 channels concatenate to 1280.
        assert_eq!(shapes["aspp.cat"][1], 1280);
        assert_eq!(shapes["aspp"][1], 256);
        // Encoder bottom sits at output stride 16.
        assert_eq!(shapes["enc3"][2], 384 / 16);
    }

    #[test]
    fn toy_segmenter_forward_matches_input_extent() {
        let model = build_segmenter(&SegmenterConfig::toy()).unwrap();
        let image = Tensor::full(&[1, 3, 64, 64], 0.1);
        let logits = model.forward(&image).unwrap();
        assert_eq!(logits.shape(), &[1, 2, 64, 64]);

        let probs = softmax(&logits, 1).unwrap();
        for p in 0..64 * 64 {
            let sum = probs.data()[p] + probs.data()[64 * 64 + p];
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_rate_yields_three_branches() {
        let mut b = GraphBuilder::new(0);
        build_aspp(&mut b, "aspp", INPUT, 4, &[2], 8);
        let cat = b.layers.iter().find(|l| l.name == "aspp.cat").unwrap();
        assert_eq!(cat.inputs.len(), 3);
    }

    #[test]
    fn duplicate_rates_rejected() {
        let cfg = SegmenterConfig {
            aspp_rates: vec![2, 2],
            ..SegmenterConfig::toy()
        };
        assert!(build_segmenter(&cfg).is_err());
    }

    #[test]
    fn uniform_logits_segment_to_empty_mask() {
        // 0.5 probability does not strictly exceed the 0.5 threshold.
        let model = build_segmenter(&SegmenterConfig::toy()).unwrap();
        let image = Tensor::zeros(&[1, 3, 64, 64]);
        let mask = segment(&model, &image, 0.5).unwrap();
        assert_eq!(mask.shape(), &[1, 1, 64, 64]);
        assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn segment_rejects_wrong_input_size() {
        let model = build_segmenter(&SegmenterConfig::toy()).unwrap();
        let image = Tensor::zeros(&[1, 3, 32, 32]);
        assert!(segment(&model, &image, 0.5).is_err());
    }
}
