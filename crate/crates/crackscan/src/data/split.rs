//! Seeded stratified train/val/test split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{SampleManifest, Split};
use crate::error::{Error, Result};
use crate::models::ClassLabel;

/// Assign splits class by class: shuffle each class's records with the
/// seeded generator, send the first `floor(n * ratios.0)` to train, the
/// next `floor(n * ratios.1)` to val, and the remainder to test. Record
/// order in the output manifest matches the input manifest; only the split
/// fields change. Deterministic for a fixed seed.
pub fn stratified_split(
    manifest: &SampleManifest,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SampleManifest> {
    let (r_train, r_val, r_test) = ratios;
    if r_train <= 0.0 || r_val <= 0.0 || r_test <= 0.0 {
        return Err(Error::InvalidArgument("split ratios must be positive".into()));
    }
    if (r_train + r_val + r_test - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must sum to 1, got {}",
            r_train + r_val + r_test
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = manifest.clone();
    out.seed = seed;

    for class in [ClassLabel::Background, ClassLabel::Crack] {
        let mut indices: Vec<usize> = manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label == class)
            .map(|(i, _)| i)
            .collect();
        if indices.is_empty() {
            return Err(Error::Empty(format!("no {} records to split", class.as_str())));
        }
        indices.shuffle(&mut rng);
        let n = indices.len();
        let n_train = (n as f64 * r_train).floor() as usize;
        let n_val = (n as f64 * r_val).floor() as usize;
        for (pos, &idx) in indices.iter().enumerate() {
            out.records[idx].split = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SampleRecord;
    use std::path::{Path, PathBuf};

    fn manifest(n_background: usize, n_crack: usize) -> SampleManifest {
        let mut m = SampleManifest::new("t", Path::new("."), 42);
        for i in 0..n_background + n_crack {
            let label = if i < n_background {
                ClassLabel::Background
            } else {
                ClassLabel::Crack
            };
            m.records.push(SampleRecord {
                image_path: PathBuf::from(format!("img_{i}.png")),
                label,
                mask_path: None,
                split: Split::Train,
            });
        }
        m
    }

    fn count(m: &SampleManifest, label: ClassLabel, split: Split) -> usize {
        m.records
            .iter()
            .filter(|r| r.label == label && r.split == split)
            .count()
    }

    #[test]
    fn crack_class_floor_arithmetic() {
        let m = manifest(4, 1468);
        let s = stratified_split(&m, (0.7, 0.2, 0.1), 42).unwrap();
        assert_eq!(count(&s, ClassLabel::Crack, Split::Train), 1027);
        assert_eq!(count(&s, ClassLabel::Crack, Split::Val), 293);
        assert_eq!(count(&s, ClassLabel::Crack, Split::Test), 148);
    }

    #[test]
    fn ten_records_split_seven_two_one() {
        let m = manifest(10, 10);
        let s = stratified_split(&m, (0.7, 0.2, 0.1), 7).unwrap();
        for class in [ClassLabel::Background, ClassLabel::Crack] {
            assert_eq!(count(&s, class, Split::Train), 7);
            assert_eq!(count(&s, class, Split::Val), 2);
            assert_eq!(count(&s, class, Split::Test), 1);
        }
    }

    #[test]
    fn same_seed_is_deterministic() {
        let m = manifest(17, 31);
        let a = stratified_split(&m, (0.7, 0.2, 0.1), 3).unwrap();
        let b = stratified_split(&m, (0.7, 0.2, 0.1), 3).unwrap();
        assert_eq!(a, b);
        let c = stratified_split(&m, (0.7, 0.2, 0.1), 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_class_is_an_error() {
        let m = manifest(0, 5);
        assert!(stratified_split(&m, (0.7, 0.2, 0.1), 1).is_err());
    }

    #[test]
    fn bad_ratios_rejected() {
        let m = manifest(5, 5);
        assert!(stratified_split(&m, (0.7, 0.2, 0.2), 1).is_err());
        assert!(stratified_split(&m, (1.0, 0.0, 0.0), 1).is_err());
    }
}
