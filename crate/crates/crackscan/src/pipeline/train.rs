//! Mini-batch SGD training for both stages, with seeded shuffling,
//! per-epoch validation, best-model selection, and loss-curve emission.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::schedule::LrSchedule;
use crate::data::{load_image, load_mask, SampleManifest, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::metrics::{pixel_confusion, seg_scores, ConfusionCounts};
use crate::models::{
    build_classifier, build_segmenter, ClassLabel, DenseNetConfig, ModelGraph, SegmenterConfig,
};
use crate::tensor::{cross_entropy_loss, softmax, Tensor};

/// Training-run knobs shared by both stages.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    /// SGD momentum coefficient.
    pub momentum: f64,
    /// Shuffle seed (parameter init comes from the model config seed).
    pub seed: u64,
    /// Stop once the training metric (accuracy or micro-IoU) reaches this.
    pub stop_at_metric: Option<f64>,
    /// Receives the weight bundle and the loss-curve files.
    pub out_dir: PathBuf,
}

impl TrainOptions {
    pub fn classifier_defaults(out_dir: &Path) -> Self {
        TrainOptions {
            epochs: 100,
            batch_size: 4,
            schedule: LrSchedule::classifier_default(),
            momentum: 0.9,
            seed: 42,
            stop_at_metric: None,
            out_dir: out_dir.to_path_buf(),
        }
    }

    pub fn segmenter_defaults(out_dir: &Path) -> Self {
        TrainOptions {
            epochs: 100,
            batch_size: 8,
            schedule: LrSchedule::segmenter_default(),
            momentum: 0.9,
            seed: 42,
            stop_at_metric: None,
            out_dir: out_dir.to_path_buf(),
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Accuracy for the classifier, micro-IoU for the segmenter, measured
    /// on the training split in inference mode.
    pub train_metric: f64,
}

/// Result of a training run. `model` carries the final-epoch parameters;
/// the saved bundle holds the minimum-validation-loss parameters.
pub struct TrainOutcome {
    pub model: ModelGraph,
    pub weights_path: PathBuf,
    pub log: Vec<EpochLog>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub reached_target_at: Option<usize>,
}

struct Sgd {
    momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    fn new(momentum: f64) -> Self {
        Sgd { momentum, velocity: BTreeMap::new() }
    }

    fn step(&mut self, model: &mut ModelGraph, lr: f64) -> Result<()> {
        let names: Vec<String> = model.trainable_params().map(str::to_string).collect();
        for name in names {
            let param = model.param(&name).expect("trainable param exists");
            let Some(grad) = param.grad() else { continue };
            let shape = param.shape().to_vec();
            let data = param.data().to_vec();
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let mut updated = data;
            for i in 0..grad.len() {
                v[i] = self.momentum * v[i] + grad[i];
                updated[i] -= lr * v[i];
            }
            model.set_param(&name, Tensor::new(&shape, updated)?.requiring_grad())?;
        }
        Ok(())
    }
}

fn mean_val_loss(
    model: &ModelGraph,
    images: &[Tensor],
    targets: &[Vec<usize>],
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut items = 0usize;
    let idx: Vec<usize> = (0..images.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let batch: Vec<Tensor> = chunk.iter().map(|&i| images[i].clone()).collect();
        let stacked = Tensor::stack_batch(&batch)?;
        let batch_targets: Vec<usize> =
            chunk.iter().flat_map(|&i| targets[i].iter().copied()).collect();
        let logits = model.forward(&stacked)?;
        let loss = cross_entropy_loss(&logits, &batch_targets)?;
        total += loss.data()[0] * chunk.len() as f64;
        items += chunk.len();
    }
    Ok(total / items as f64)
}

fn write_curve(path: &Path, rows: impl Iterator<Item = (usize, f64)>) -> Result<()> {
    let mut out = String::new();
    for (epoch, loss) in rows {
        out.push_str(&format!("{epoch}\t{loss}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_training(
    mut model: ModelGraph,
    train_images: Vec<Tensor>,
    train_targets: Vec<Vec<usize>>,
    val_images: Vec<Tensor>,
    val_targets: Vec<Vec<usize>>,
    metric: impl Fn(&ModelGraph) -> Result<f64>,
    opts: &TrainOptions,
    weights_file: &str,
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(&opts.out_dir)?;
    model.arm_parameters();
    let mut sgd = Sgd::new(opts.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut log = Vec::with_capacity(opts.epochs);
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params: Option<BTreeMap<String, Tensor>> = None;
    let mut reached_target_at = None;

    for epoch in 0..opts.epochs {
        let lr = opts.schedule.at(epoch);
        let mut indices: Vec<usize> = (0..train_images.len()).collect();
        indices.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for chunk in indices.chunks(opts.batch_size) {
            let batch: Vec<Tensor> = chunk.iter().map(|&i| train_images[i].clone()).collect();
            let stacked = Tensor::stack_batch(&batch)?;
            let targets: Vec<usize> = chunk
                .iter()
                .flat_map(|&i| train_targets[i].iter().copied())
                .collect();
            let logits = model.forward_train(&stacked)?;
            let loss = cross_entropy_loss(&logits, &targets)?;
            let loss_value = loss.data()[0];
            if !loss_value.is_finite() {
                return Err(Error::Train(format!(
                    "loss diverged to {loss_value} at epoch {epoch} (lr {lr})"
                )));
            }
            loss.backward()?;
            sgd.step(&mut model, lr)?;
            epoch_loss += loss_value * chunk.len() as f64;
        }
        let train_loss = epoch_loss / train_images.len() as f64;
        let val_loss = mean_val_loss(&model, &val_images, &val_targets, opts.batch_size)?;
        let train_metric = metric(&model)?;
        log.push(EpochLog { epoch, lr, train_loss, val_loss, train_metric });

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = Some(
                model
                    .params()
                    .iter()
                    .map(|(k, v)| (k.clone(), v.detached()))
                    .collect(),
            );
        }
        if let Some(target) = opts.stop_at_metric {
            if train_metric >= target {
                reached_target_at = Some(epoch);
                break;
            }
        }
    }

    write_curve(
        &opts.out_dir.join("loss_train.tsv"),
        log.iter().map(|l| (l.epoch, l.train_loss)),
    )?;
    write_curve(
        &opts.out_dir.join("loss_val.tsv"),
        log.iter().map(|l| (l.epoch, l.val_loss)),
    )?;

    let weights_path = opts.out_dir.join(weights_file);
    let best = best_params.ok_or_else(|| Error::Train("no epoch completed".into()))?;
    crate::data::weights::save_bundle(&best, &weights_path)?;
    model.disarm_parameters();

    Ok(TrainOutcome {
        model,
        weights_path,
        log,
        best_val_loss: best_val,
        best_epoch,
        reached_target_at,
    })
}

fn load_classification_set(
    manifest: &SampleManifest,
    records: &[&SampleRecord],
    size: (usize, usize),
) -> Result<(Vec<Tensor>, Vec<Vec<usize>>)> {
    let mut images = Vec::with_capacity(records.len());
    let mut targets = Vec::with_capacity(records.len());
    for r in records {
        images.push(load_image(&manifest.resolve(&r.image_path), size.0, size.1)?);
        targets.push(vec![r.label.index()]);
    }
    Ok((images, targets))
}

/// Train the stage-one classifier on the manifest's train split, validating
/// on the val split every epoch. Saves the best-validation-loss weights to
/// `classifier.nwb` plus `loss_train.tsv` / `loss_val.tsv` under the output
/// directory.
pub fn train_classifier(
    manifest: &SampleManifest,
    cfg: &DenseNetConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = manifest.split_records(Split::Train);
    let val = manifest.split_records(Split::Val);
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty(
            "classifier training needs nonempty train and val splits".into(),
        ));
    }
    let (train_images, train_targets) = load_classification_set(manifest, &train, cfg.input_size)?;
    let (val_images, val_targets) = load_classification_set(manifest, &val, cfg.input_size)?;

    let truth: Vec<usize> = train_targets.iter().map(|t| t[0]).collect();
    let metric_images = train_images.clone();
    let metric = move |model: &ModelGraph| -> Result<f64> {
        let stacked = Tensor::stack_batch(&metric_images)?;
        let logits = model.forward(&stacked)?;
        let probs = softmax(&logits, 1)?;
        let mut correct = 0usize;
        for (i, &t) in truth.iter().enumerate() {
            let p_bg = probs.data()[i * 2];
            let p_crack = probs.data()[i * 2 + 1];
            let pred = usize::from(p_crack >= p_bg);
            correct += usize::from(pred == t);
        }
        Ok(correct as f64 / truth.len() as f64)
    };

    let model = build_classifier(cfg)?;
    run_training(
        model,
        train_images,
        train_targets,
        val_images,
        val_targets,
        metric,
        opts,
        "classifier.nwb",
    )
}

fn load_segmentation_set(
    manifest: &SampleManifest,
    records: &[&SampleRecord],
    size: (usize, usize),
) -> Result<(Vec<Tensor>, Vec<Vec<usize>>, Vec<Tensor>)> {
    let mut images = Vec::with_capacity(records.len());
    let mut targets = Vec::with_capacity(records.len());
    let mut masks = Vec::with_capacity(records.len());
    for r in records {
        let mask_path = r.mask_path.as_ref().ok_or_else(|| {
            Error::Manifest(format!("crack record {} has no mask", r.image_path.display()))
        })?;
        images.push(load_image(&manifest.resolve(&r.image_path), size.0, size.1)?);
        let mask = load_mask(&manifest.resolve(mask_path), size.0, size.1)?;
        targets.push(mask.data().iter().map(|&v| v as usize).collect());
        masks.push(mask);
    }
    Ok((images, targets, masks))
}

/// Train the stage-two segmenter on the crack images of the manifest's
/// train split with per-pixel cross-entropy. Saves `segmenter.nwb` plus the
/// loss curves under the output directory.
pub fn train_segmenter(
    manifest: &SampleManifest,
    cfg: &SegmenterConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    fn crack<'a>(records: Vec<&'a SampleRecord>) -> Vec<&'a SampleRecord> {
        records
            .into_iter()
            .filter(|r| r.label == ClassLabel::Crack)
            .collect()
    }
    let train = crack(manifest.split_records(Split::Train));
    let val = crack(manifest.split_records(Split::Val));
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty(
            "segmenter training needs crack images in both train and val splits".into(),
        ));
    }
    let (train_images, train_targets, train_masks) =
        load_segmentation_set(manifest, &train, cfg.input_size)?;
    let (val_images, val_targets, _) = load_segmentation_set(manifest, &val, cfg.input_size)?;

    let metric_images = train_images.clone();
    let metric = move |model: &ModelGraph| -> Result<f64> {
        let mut counts = ConfusionCounts::default();
        let stacked = Tensor::stack_batch(&metric_images)?;
        let probs = softmax(&model.forward(&stacked)?, 1)?;
        let (h, w) = (probs.shape()[2], probs.shape()[3]);
        let plane = h * w;
        for (i, gt) in train_masks.iter().enumerate() {
            let base = (i * 2 + 1) * plane;
            let pred: Vec<f64> = probs.data()[base..base + plane]
                .iter()
                .map(|&p| f64::from(p > 0.5))
                .collect();
            let pred = Tensor::new(&[1, 1, h, w], pred)?;
            counts.add(&pixel_confusion(&pred, gt)?);
        }
        Ok(seg_scores(&counts).iou)
    };

    let model = build_segmenter(cfg)?;
    run_training(
        model,
        train_images,
        train_targets,
        val_images,
        val_targets,
        metric,
        opts,
        "segmenter.nwb",
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use tempfile::tempdir;

    fn tiny_manifest(dir: &Path) -> SampleManifest {
        let mut m = synth_dataset(dir, 6, 32, 11).unwrap();
        // 4 train, 2 val, keeping both classes in each.
        for (i, r) in m.records.iter_mut().enumerate() {
            r.split = if i < 4 { Split::Train } else { Split::Val };
        }
        m
    }

    #[test]
    fn classifier_smoke_run_is_deterministic() {
        let dir = tempdir().unwrap();
        let manifest = tiny_manifest(dir.path());
        let cfg = DenseNetConfig::toy();
        let opts = TrainOptions {
            epochs: 2,
            batch_size: 2,
            schedule: LrSchedule::Constant { lr: 0.01 },
            momentum: 0.9,
            seed: 1,
            stop_at_metric: None,
            out_dir: dir.path().join("run_a"),
        };
        let a = train_classifier(&manifest, &cfg, &opts).unwrap();
        let opts_b = TrainOptions { out_dir: dir.path().join("run_b"), ..opts };
        let b = train_classifier(&manifest, &cfg, &opts_b).unwrap();

        assert_eq!(a.log.len(), 2);
        for (la, lb) in a.log.iter().zip(&b.log) {
            assert_eq!(la.train_loss, lb.train_loss);
            assert_eq!(la.val_loss, lb.val_loss);
        }
        // One row per epoch, two tab-separated columns.
        let curve = std::fs::read_to_string(dir.path().join("run_a/loss_train.tsv")).unwrap();
        let rows: Vec<&str> = curve.lines().collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].split('\t').count(), 2);
        assert!(a.weights_path.exists());
    }

    #[test]
    fn training_requires_nonempty_splits() {
        let dir = tempdir().unwrap();
        let mut manifest = synth_dataset(dir.path(), 4, 32, 3).unwrap();
        for r in manifest.records.iter_mut() {
            r.split = Split::Train;
        }
        let cfg = DenseNetConfig::toy();
        let opts = TrainOptions::classifier_defaults(&dir.path().join("out"));
        assert!(matches!(
            train_classifier(&manifest, &cfg, &opts),
            Err(Error::Empty(_))
        ));
    }
}
