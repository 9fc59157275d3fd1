//! Dataset manifests, image and mask loading, stratified splits, weight
//! bundles, and the synthetic corpus generator.

pub mod imgio;
pub mod split;
pub mod synth;
pub mod weights;

pub use imgio::{load_image, load_image_raw, load_mask, save_gray, save_mask, save_rgb};
pub use split::stratified_split;
pub use synth::synth_dataset;
pub use weights::{load_bundle, save_bundle};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::models::ClassLabel;

/// Dataset partition a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Manifest(format!("unknown split {other}"))),
        }
    }
}

/// One dataset entry: image path, class label, optional mask, split.
/// Paths are stored relative to the manifest location.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub image_path: PathBuf,
    pub label: ClassLabel,
    pub mask_path: Option<PathBuf>,
    pub split: Split,
}

/// An ordered list of records plus source metadata. The manifest remembers
/// the directory it was read from (or created in) so relative paths
/// resolve.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleManifest {
    pub records: Vec<SampleRecord>,
    pub dataset_name: String,
    /// Expected source image extent as (width, height), when known.
    pub image_size: Option<(usize, usize)>,
    pub seed: u64,
    /// Directory against which record paths resolve. Not serialized.
    pub root: PathBuf,
}

impl SampleManifest {
    pub fn new(dataset_name: &str, root: &Path, seed: u64) -> Self {
        SampleManifest {
            records: Vec::new(),
            dataset_name: dataset_name.to_string(),
            image_size: None,
            seed,
            root: root.to_path_buf(),
        }
    }

    /// Absolute path of a record-relative path.
    pub fn resolve(&self, rel: &Path) -> PathBuf {
        if rel.is_absolute() {
            rel.to_path_buf()
        } else {
            self.root.join(rel)
        }
    }

    pub fn split_records(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Every crack record must carry a mask path before segmentation
    /// training or evaluation can use the manifest.
    pub fn validate_segmentation(&self) -> Result<()> {
        for r in &self.records {
            if r.label == ClassLabel::Crack && r.mask_path.is_none() {
                return Err(Error::Manifest(format!(
                    "crack record {} has no mask path",
                    r.image_path.display()
                )));
            }
        }
        Ok(())
    }

    /// Serialize to the tab-delimited manifest format: `# key=value`
    /// metadata lines, a header row, then one record per line with `-`
    /// standing for "no mask".
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# dataset={}", self.dataset_name);
        match self.image_size {
            Some((w, h)) => {
                let _ = writeln!(out, "# image_size={w}x{h}");
            }
            None => {
                let _ = writeln!(out, "# image_size=-");
            }
        }
        let _ = writeln!(out, "# seed={}", self.seed);
        let _ = writeln!(out, "image_path\tlabel\tmask_path\tsplit");
        for r in &self.records {
            let mask = r
                .mask_path
                .as_ref()
                .map_or_else(|| "-".to_string(), |p| p.display().to_string());
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                r.image_path.display(),
                r.label.as_str(),
                mask,
                r.split.as_str()
            );
        }
        out
    }

    /// Parse the manifest format; `root` is the directory paths resolve
    /// against.
    pub fn from_text(text: &str, root: &Path) -> Result<Self> {
        let mut manifest = SampleManifest::new("unnamed", root, 42);
        let mut saw_header = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                let meta = meta.trim();
                if let Some((key, value)) = meta.split_once('=') {
                    match key.trim() {
                        "dataset" => manifest.dataset_name = value.trim().to_string(),
                        "seed" => {
                            manifest.seed = value.trim().parse().map_err(|_| {
                                Error::Manifest(format!("bad seed on line {}", lineno + 1))
                            })?;
                        }
                        "image_size" => {
                            let v = value.trim();
                            if v != "-" {
                                let (w, h) = v.split_once('x').ok_or_else(|| {
                                    Error::Manifest(format!("bad image_size on line {}", lineno + 1))
                                })?;
                                manifest.image_size = Some((
                                    w.parse().map_err(|_| {
                                        Error::Manifest("bad image_size width".into())
                                    })?,
                                    h.parse().map_err(|_| {
                                        Error::Manifest("bad image_size height".into())
                                    })?,
                                ));
                            }
                        }
                        _ => {}
                    }
                }
                continue;
            }
            if !saw_header {
                if line != "image_path\tlabel\tmask_path\tsplit" {
                    return Err(Error::Manifest(format!(
                        "line {}: expected header row, got {line:?}",
                        lineno + 1
                    )));
                }
                saw_header = true;
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::Manifest(format!(
                    "line {}: expected 4 tab-separated fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            manifest.records.push(SampleRecord {
                image_path: PathBuf::from(fields[0]),
                label: fields[1].parse()?,
                mask_path: (fields[2] != "-").then(|| PathBuf::from(fields[2])),
                split: fields[3].parse()?,
            });
        }
        if !saw_header {
            return Err(Error::Manifest("missing header row".into()));
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::from_text(&text, &root)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SampleManifest {
        let mut m = SampleManifest::new("demo", Path::new("/tmp/demo"), 42);
        m.image_size = Some((512, 375));
        m.records.push(SampleRecord {
            image_path: PathBuf::from("images/a.png"),
            label: ClassLabel::Crack,
            mask_path: Some(PathBuf::from("masks/a.png")),
            split: Split::Train,
        });
        m.records.push(SampleRecord {
            image_path: PathBuf::from("images/b.png"),
            label: ClassLabel::Background,
            mask_path: None,
            split: Split::Test,
        });
        m
    }

    #[test]
    fn manifest_round_trips_through_text() {
        let m = sample();
        let text = m.to_text();
        let parsed = SampleManifest::from_text(&text, Path::new("/tmp/demo")).unwrap();
        assert_eq!(m, parsed);
        assert_eq!(text, parsed.to_text());
    }

    #[test]
    fn missing_header_is_an_error() {
        assert!(SampleManifest::from_text("images/a.png\tcrack\t-\ttrain\n", Path::new(".")).is_err());
    }

    #[test]
    fn segmentation_validation_requires_crack_masks() {
        let mut m = sample();
        assert!(m.validate_segmentation().is_ok());
        m.records[0].mask_path = None;
        assert!(m.validate_segmentation().is_err());
    }

    #[test]
    fn resolve_joins_relative_paths() {
        let m = sample();
        assert_eq!(
            m.resolve(Path::new("images/a.png")),
            PathBuf::from("/tmp/demo/images/a.png")
        );
    }
}
