//! Two-stage orchestration: stage one classifies every image, only images
//! labeled crack reach stage two segmentation, and heatmaps can be emitted
//! for any configured tap. Also hosts the training loops and the metrics /
//! run reports with their file formats.

pub mod schedule;
pub mod train;

pub use schedule::{lr_schedule_classifier, lr_schedule_segmenter, LrSchedule};
pub use train::{train_classifier, train_segmenter, EpochLog, TrainOptions, TrainOutcome};

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{imgio, load_image, load_image_raw, load_mask, save_mask, SampleManifest, Split};
use crate::error::{Error, Result};
use crate::metrics::{
    classification_accuracy, measure_fps, pixel_confusion, report_from_counts, seg_scores,
    ConfusionCounts, MetricsReport, TimingStats,
};
use crate::models::{
    build_classifier, build_segmenter, classify, segment, ClassLabel, DenseNetConfig, ModelGraph,
    SegmenterConfig,
};
use crate::scorecam::{overlay, scorecam, ScoreCamOptions};

/// One model section of the pipeline config: structural config plus an
/// optional weight-bundle path (relative paths resolve against the config
/// file location).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelSettings<C> {
    pub weights: Option<PathBuf>,
    #[serde(flatten)]
    pub model: C,
}

/// Heatmap emission settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScoreCamSettings {
    /// Which model to explain: "segmenter" (default) or "classifier".
    pub model: String,
    /// Tap names to explain; must be registered taps of that model.
    pub taps: Vec<String>,
    /// Class of interest (1 = crack).
    pub class_index: usize,
    /// Channel masks per forward pass (1 keeps the K + 2 contract).
    pub mask_batch: usize,
    /// Overlay blend factor.
    pub overlay_alpha: f64,
    /// Also emit heatmaps for every routed crack image during `run`.
    pub emit_in_run: bool,
}

impl Default for ScoreCamSettings {
    fn default() -> Self {
        ScoreCamSettings {
            model: "segmenter".into(),
            taps: vec!["decoder".into()],
            class_index: 1,
            mask_batch: 1,
            overlay_alpha: 0.5,
            emit_in_run: false,
        }
    }
}

/// Output and threshold settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OutputSettings {
    pub dir: PathBuf,
    /// Crack-probability threshold for binarizing stage-two masks.
    pub seg_threshold: f64,
    /// IoU threshold of the detection decision (strictly exceeded).
    pub detect_iou: f64,
}

impl Default for OutputSettings {
    fn default() -> Self {
        OutputSettings {
            dir: PathBuf::from("out"),
            seg_threshold: 0.5,
            detect_iou: 0.5,
        }
    }
}

/// Complete pipeline configuration, stored as TOML. Every key can be
/// overridden on the command line with `--set section.key=value`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PipelineConfig {
    pub classifier: ModelSettings<DenseNetConfig>,
    pub segmenter: ModelSettings<SegmenterConfig>,
    #[serde(default)]
    pub scorecam: ScoreCamSettings,
    #[serde(default)]
    pub output: OutputSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            classifier: ModelSettings { weights: None, model: DenseNetConfig::default() },
            segmenter: ModelSettings { weights: None, model: SegmenterConfig::default() },
            scorecam: ScoreCamSettings::default(),
            output: OutputSettings::default(),
        }
    }
}

impl PipelineConfig {
    /// Desk-scale defaults matching the toy model configs.
    pub fn toy() -> Self {
        PipelineConfig {
            classifier: ModelSettings { weights: None, model: DenseNetConfig::toy() },
            segmenter: ModelSettings { weights: None, model: SegmenterConfig::toy() },
            ..Default::default()
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Load a config file and apply `section.key=value` overrides. Values
    /// parse as TOML literals (numbers, booleans, arrays) and fall back to
    /// strings.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut value: toml::Value =
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        for entry in overrides {
            let (key, raw) = entry
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {entry:?} is not key=value")))?;
            // Parse the value as a TOML literal; non-literals become strings.
            let parsed: toml::Value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut slot = &mut value;
            let parts: Vec<&str> = key.split('.').collect();
            for part in &parts[..parts.len() - 1] {
                slot = slot
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("{key} does not address a table")))?
                    .entry(part.to_string())
                    .or_insert(toml::Value::Table(Default::default()));
            }
            slot.as_table_mut()
                .ok_or_else(|| Error::Config(format!("{key} does not address a table")))?
                .insert(parts[parts.len() - 1].to_string(), parsed);
        }
        let mut config: PipelineConfig =
            value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        // Relative weight paths resolve against the config file.
        let base = path.parent().unwrap_or(Path::new("."));
        for w in [&mut config.classifier.weights, &mut config.segmenter.weights] {
            if let Some(p) = w {
                if p.is_relative() {
                    *p = base.join(&p);
                }
            }
        }
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// Build the classifier and load its weights if configured.
    pub fn load_classifier(&self) -> Result<ModelGraph> {
        let mut model = build_classifier(&self.classifier.model)?;
        if let Some(path) = &self.classifier.weights {
            model.load_weights(path)?;
        }
        Ok(model)
    }

    /// Build the segmenter and load its weights if configured.
    pub fn load_segmenter(&self) -> Result<ModelGraph> {
        let mut model = build_segmenter(&self.segmenter.model)?;
        if let Some(path) = &self.segmenter.weights {
            model.load_weights(path)?;
        }
        Ok(model)
    }
}

/// Per-image outcome of a pipeline run. A record classified background has
/// no stage-two fields; a record that failed to decode carries only the
/// error.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RecordReport {
    pub image: String,
    pub error: Option<String>,
    pub prob_background: Option<f64>,
    pub prob_crack: Option<f64>,
    pub label: Option<ClassLabel>,
    pub mask_path: Option<String>,
    pub iou: Option<f64>,
    pub f1: Option<f64>,
    pub detected: Option<bool>,
    pub heatmap_paths: Vec<String>,
}

/// Full report of a pipeline run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub records: Vec<RecordReport>,
    pub crack_routed: usize,
    pub background_routed: usize,
    pub failed: usize,
    /// Segmentation metrics over routed crack images with ground truth.
    pub segmentation: Option<MetricsReport>,
    pub stage1_seconds: f64,
    pub stage2_seconds: f64,
}

impl RunReport {
    /// Identical to another report up to the timing fields.
    pub fn same_results(&self, other: &RunReport) -> bool {
        self.records == other.records
            && self.crack_routed == other.crack_routed
            && self.background_routed == other.background_routed
            && self.failed == other.failed
    }

    /// Flat tab-delimited table, one record per row.
    pub fn to_table(&self) -> String {
        let mut out = String::from(
            "image\tstatus\tprob_background\tprob_crack\tlabel\tmask\tiou\tdetected\n",
        );
        for r in &self.records {
            let fmt_opt = |v: &Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.image,
                r.error.as_deref().unwrap_or("ok"),
                fmt_opt(&r.prob_background),
                fmt_opt(&r.prob_crack),
                r.label.map_or("-", |l| l.as_str()),
                r.mask_path.as_deref().unwrap_or("-"),
                fmt_opt(&r.iou),
                r.detected.map_or("-".to_string(), |d| d.to_string()),
            ));
        }
        out
    }
}

fn sanitize(name: &str) -> String {
    name.replace(['/', '\\'], "_")
}

fn emit_heatmaps(
    model: &ModelGraph,
    config: &PipelineConfig,
    image_path: &Path,
    stem: &str,
    dir: &Path,
) -> Result<Vec<String>> {
    let sc = &config.scorecam;
    let (h, w) = model.input_size;
    let image = load_image(image_path, h, w)?;
    let raw = load_image_raw(image_path, h, w)?;
    let options = ScoreCamOptions { mask_batch: sc.mask_batch.max(1) };
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for tap in &sc.taps {
        let map = scorecam(model, &image, tap, sc.class_index, &options)?
            .resized(h, w)
            .into_unit_max();
        let base = format!("{stem}_{}_c{}", sanitize(tap), sc.class_index);
        let heat_path = dir.join(format!("{base}.png"));
        map.save_gray(&heat_path)?;
        let blended = overlay(&map, &raw, sc.overlay_alpha)?;
        let overlay_path = dir.join(format!("{base}_overlay.png"));
        imgio::save_rgb(&blended, &overlay_path)?;
        paths.push(heat_path.display().to_string());
        paths.push(overlay_path.display().to_string());
    }
    Ok(paths)
}

/// Run the two-stage pipeline over every record of a manifest: classify
/// each image, segment exactly those labeled crack, score against ground
/// truth where masks exist, and write masks, optional heatmaps, and the
/// run report (`run_report.json` / `run_report.tsv`) under the output
/// directory. Per-record failures are recorded and do not stop the run.
pub fn run_pipeline(config: &PipelineConfig, manifest: &SampleManifest) -> Result<RunReport> {
    if manifest.records.is_empty() {
        return Err(Error::Empty("run on an empty manifest".into()));
    }
    let classifier = config.load_classifier()?;
    let segmenter = config.load_segmenter()?;
    let out_dir = &config.output.dir;
    let mask_dir = out_dir.join("masks");
    std::fs::create_dir_all(&mask_dir)?;

    let (cls_h, cls_w) = classifier.input_size;
    let (seg_h, seg_w) = segmenter.input_size;
    let mut records = Vec::with_capacity(manifest.records.len());
    let mut counts_list: Vec<ConfusionCounts> = Vec::new();
    let mut crack_routed = 0usize;
    let mut background_routed = 0usize;
    let mut failed = 0usize;
    let mut stage1_seconds = 0.0;
    let mut stage2_seconds = 0.0;

    for record in &manifest.records {
        let image_path = manifest.resolve(&record.image_path);
        let mut report = RecordReport {
            image: record.image_path.display().to_string(),
            error: None,
            prob_background: None,
            prob_crack: None,
            label: None,
            mask_path: None,
            iou: None,
            f1: None,
            detected: None,
            heatmap_paths: Vec::new(),
        };

        let stage1 = Instant::now();
        let classified = load_image(&image_path, cls_h, cls_w)
            .and_then(|image| classify(&classifier, &image));
        stage1_seconds += stage1.elapsed().as_secs_f64();

        let ((p_bg, p_crack), label) = match classified {
            Ok(v) => v,
            Err(e) => {
                report.error = Some(e.to_string());
                failed += 1;
                records.push(report);
                continue;
            }
        };
        report.prob_background = Some(p_bg);
        report.prob_crack = Some(p_crack);
        report.label = Some(label);

        if label == ClassLabel::Crack {
            crack_routed += 1;
            let stage2 = Instant::now();
            // Stage two re-loads at segmentation resolution.
            let segmented = load_image(&image_path, seg_h, seg_w)
                .and_then(|image| segment(&segmenter, &image, config.output.seg_threshold));
            stage2_seconds += stage2.elapsed().as_secs_f64();
            match segmented {
                Ok(mask) => {
                    let stem = image_path
                        .file_stem()
                        .map_or_else(|| "image".to_string(), |s| s.to_string_lossy().into_owned());
                    let mask_path = mask_dir.join(format!("{stem}.png"));
                    save_mask(&mask, &mask_path)?;
                    report.mask_path = Some(mask_path.display().to_string());

                    if let Some(gt_rel) = &record.mask_path {
                        let gt = load_mask(&manifest.resolve(gt_rel), seg_h, seg_w)?;
                        let counts = pixel_confusion(&mask, &gt)?;
                        let scores = seg_scores(&counts);
                        report.iou = Some(scores.iou);
                        report.f1 = Some(scores.f1);
                        report.detected = Some(scores.iou > config.output.detect_iou);
                        counts_list.push(counts);
                    }
                    if config.scorecam.emit_in_run {
                        report.heatmap_paths = emit_heatmaps(
                            &segmenter,
                            config,
                            &image_path,
                            &stem,
                            &out_dir.join("heatmaps"),
                        )?;
                    }
                }
                Err(e) => {
                    report.error = Some(e.to_string());
                    failed += 1;
                }
            }
        } else {
            background_routed += 1;
        }
        records.push(report);
    }

    let segmentation = if counts_list.is_empty() {
        None
    } else {
        Some(report_from_counts(&counts_list, config.output.detect_iou)?)
    };
    let report = RunReport {
        records,
        crack_routed,
        background_routed,
        failed,
        segmentation,
        stage1_seconds,
        stage2_seconds,
    };

    std::fs::write(
        out_dir.join("run_report.json"),
        serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    std::fs::write(out_dir.join("run_report.tsv"), report.to_table())?;
    Ok(report)
}

/// Stage-one evaluation block of [`EvalReport`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassificationEval {
    pub accuracy: f64,
    pub timing: TimingStats,
    pub test_images: usize,
    pub background_images: usize,
    pub crack_images: usize,
}

/// Test-split evaluation of both stages.
///
/// Stage two is scored on the ground-truth crack images of the test split
/// (independent of stage-one routing); `run_pipeline` instead scores
/// whatever stage one routes. Both views are intentional.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub classification: ClassificationEval,
    pub segmentation: Option<MetricsReport>,
}

impl EvalReport {
    /// Flat two-column summary table (metric, value).
    pub fn to_table(&self) -> String {
        let mut out = String::from("metric\tvalue\n");
        let c = &self.classification;
        out.push_str(&format!("classification.accuracy\t{}\n", c.accuracy));
        out.push_str(&format!("classification.fps\t{}\n", c.timing.fps));
        out.push_str(&format!("classification.test_images\t{}\n", c.test_images));
        out.push_str(&format!("classification.background_images\t{}\n", c.background_images));
        out.push_str(&format!("classification.crack_images\t{}\n", c.crack_images));
        if let Some(s) = &self.segmentation {
            for (mode, scores) in [("micro", &s.micro), ("macro", &s.macro_mean)] {
                out.push_str(&format!("segmentation.{mode}.precision\t{}\n", scores.precision));
                out.push_str(&format!("segmentation.{mode}.recall\t{}\n", scores.recall));
                out.push_str(&format!("segmentation.{mode}.f1\t{}\n", scores.f1));
                out.push_str(&format!("segmentation.{mode}.iou\t{}\n", scores.iou));
            }
            out.push_str(&format!("segmentation.detection_rate\t{}\n", s.detection_rate));
        }
        out
    }
}

/// Evaluate both stages on the manifest's test split and write
/// `eval_report.json` / `eval_report.tsv` under the output directory.
pub fn eval_command(config: &PipelineConfig, manifest: &SampleManifest) -> Result<EvalReport> {
    let test = manifest.split_records(Split::Test);
    if test.is_empty() {
        return Err(Error::Empty("test split is empty".into()));
    }
    let classifier = config.load_classifier()?;
    let segmenter = config.load_segmenter()?;
    let (cls_h, cls_w) = classifier.input_size;
    let (seg_h, seg_w) = segmenter.input_size;

    let mut images = Vec::with_capacity(test.len());
    let mut truths = Vec::with_capacity(test.len());
    for r in &test {
        images.push(load_image(&manifest.resolve(&r.image_path), cls_h, cls_w)?);
        truths.push(r.label);
    }
    let mut preds = Vec::with_capacity(test.len());
    for image in &images {
        preds.push(classify(&classifier, image)?.1);
    }
    let accuracy = classification_accuracy(&preds, &truths)?;
    let timing = measure_fps(&classifier, &images)?;
    let background_images = truths.iter().filter(|&&l| l == ClassLabel::Background).count();
    let classification = ClassificationEval {
        accuracy,
        timing,
        test_images: test.len(),
        background_images,
        crack_images: test.len() - background_images,
    };

    let mut counts_list = Vec::new();
    for r in &test {
        if r.label != ClassLabel::Crack {
            continue;
        }
        let Some(mask_rel) = &r.mask_path else { continue };
        let image = load_image(&manifest.resolve(&r.image_path), seg_h, seg_w)?;
        let pred = segment(&segmenter, &image, config.output.seg_threshold)?;
        let gt = load_mask(&manifest.resolve(mask_rel), seg_h, seg_w)?;
        counts_list.push(pixel_confusion(&pred, &gt)?);
    }
    let segmentation = if counts_list.is_empty() {
        None
    } else {
        Some(report_from_counts(&counts_list, config.output.detect_iou)?)
    };

    let report = EvalReport { classification, segmentation };
    std::fs::create_dir_all(&config.output.dir)?;
    std::fs::write(
        config.output.dir.join("eval_report.json"),
        serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    std::fs::write(config.output.dir.join("eval_report.tsv"), report.to_table())?;
    Ok(report)
}

/// Emit one heatmap and one overlay per configured tap for a single image.
/// Returns the written paths.
pub fn explain_command(config: &PipelineConfig, image_path: &Path) -> Result<Vec<String>> {
    let model = match config.scorecam.model.as_str() {
        "segmenter" => config.load_segmenter()?,
        "classifier" => config.load_classifier()?,
        other => {
            return Err(Error::Config(format!(
                "scorecam.model must be \"segmenter\" or \"classifier\", got {other:?}"
            )))
        }
    };
    let stem = image_path
        .file_stem()
        .map_or_else(|| "image".to_string(), |s| s.to_string_lossy().into_owned());
    emit_heatmaps(&model, config, image_path, &stem, &config.output.dir.join("heatmaps"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let config = PipelineConfig::toy();
        let text = config.to_toml().unwrap();
        let parsed = PipelineConfig::from_toml(&text).unwrap();
        assert_eq!(config, parsed);
    }

    #[test]
    fn overrides_patch_nested_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.toml");
        PipelineConfig::toy().save(&path).unwrap();
        let config = PipelineConfig::load(
            &path,
            &[
                "output.seg_threshold=0.75".to_string(),
                "classifier.growth_rate=8".to_string(),
                "scorecam.taps=[\"aspp\", \"decoder\"]".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(config.output.seg_threshold, 0.75);
        assert_eq!(config.classifier.model.growth_rate, 8);
        assert_eq!(config.scorecam.taps, vec!["aspp".to_string(), "decoder".to_string()]);
    }

    #[test]
    fn bad_override_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.toml");
        PipelineConfig::toy().save(&path).unwrap();
        assert!(matches!(
            PipelineConfig::load(&path, &["no-equals-sign".to_string()]),
            Err(Error::Config(_))
        ));
    }
}
