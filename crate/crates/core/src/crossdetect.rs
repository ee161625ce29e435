//! Crossing detector: a binary classifier trained on sure individual and
//! sure crossing images, used to label the ambiguous blobs. Falls back on
//! the area model when it cannot be trained.

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::blobgraph::{AreaModel, BlobId, BlobKind, BlobStore, SureLabel};
use crate::classifier::{
    seeded_rng, split_train_val, train, ClassifierModel, LabeledDataset, Predictor, TrainConfig, TrainOutcome,
};
use crate::imageprep::{dcd_crop_side, preprocess_dcd, DCD_IMAGE_SIDE};

/// Class index of crossing images.
pub const CROSSING_CLASS: usize = 0;
/// Class index of individual images.
pub const INDIVIDUAL_CLASS: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossingDetectorConfig {
    pub train: TrainConfig,
    pub hidden: usize,
    /// Sure images drawn per class for training.
    pub max_images_per_class: usize,
    pub train_fraction: f64,
}

impl Default for CrossingDetectorConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::crossing_detector(),
            hidden: crate::classifier::DEFAULT_HIDDEN,
            max_images_per_class: 3000,
            train_fraction: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FallbackReason {
    NoSureIndividuals,
    NoSureCrossings,
    TooFewImages,
    Diverged,
}

/// Sure blob ids of each class, deduplicated and in ascending order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SureSets {
    pub individuals: Vec<BlobId>,
    pub crossings: Vec<BlobId>,
}

impl SureSets {
    pub fn from_labels(labels: &[SureLabel]) -> Self {
        let mut s = Self::default();
        for (b, l) in labels.iter().enumerate() {
            match l {
                SureLabel::SureIndividual => s.individuals.push(b),
                SureLabel::SureCrossing => s.crossings.push(b),
                SureLabel::Ambiguous => {}
            }
        }
        s
    }
}

/// Builds the training set (crossing = 0, individual = 1). Each class is
/// subsampled to at most `max_per_class` blobs with a seeded shuffle.
pub fn build_dcd_dataset(
    store: &BlobStore,
    sure: &SureSets,
    crop_side: usize,
    max_per_class: usize,
    seed: u64,
) -> Result<LabeledDataset, FallbackReason> {
    if sure.individuals.is_empty() {
        return Err(FallbackReason::NoSureIndividuals);
    }
    if sure.crossings.is_empty() {
        return Err(FallbackReason::NoSureCrossings);
    }
    let mut rng = seeded_rng(seed, 10);
    let mut ds = LabeledDataset::new(DCD_IMAGE_SIDE * DCD_IMAGE_SIDE, 2);
    for (ids, label) in [(&sure.crossings, CROSSING_CLASS), (&sure.individuals, INDIVIDUAL_CLASS)] {
        let mut ids = ids.clone();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() > max_per_class {
            ids.shuffle(&mut rng);
            ids.truncate(max_per_class);
            ids.sort_unstable();
        }
        for b in ids {
            let img = preprocess_dcd(store.blob(b), crop_side);
            ds.push(&img.values, label).expect("dcd image size");
        }
    }
    Ok(ds)
}

#[derive(Debug, Clone)]
pub enum CrossingDetector {
    Network { model: ClassifierModel, crop_side: usize },
    AreaFallback { area: AreaModel, reason: FallbackReason },
}

/// Trains the detector; any failure turns into the area-model fallback.
pub fn train_crossing_detector(
    dataset: Result<LabeledDataset, FallbackReason>,
    crop_side: usize,
    area: AreaModel,
    cfg: &CrossingDetectorConfig,
    warnings: &mut Vec<String>,
) -> CrossingDetector {
    let fallback = |reason: FallbackReason, warnings: &mut Vec<String>| {
        let msg = format!("crossing detector not trained ({reason:?}), using the area model");
        warn!("{msg}");
        warnings.push(msg);
        CrossingDetector::AreaFallback { area, reason }
    };
    let ds = match dataset {
        Ok(ds) => ds,
        Err(r) => return fallback(r, warnings),
    };
    let (t, v) = match split_train_val(&ds, cfg.train_fraction, cfg.train.seed) {
        Ok(x) => x,
        Err(_) => return fallback(FallbackReason::TooFewImages, warnings),
    };
    let mut model = ClassifierModel::new(ds.input_dim, cfg.hidden, 2, cfg.train.seed);
    let report = match train(&mut model, &t, &v, &cfg.train) {
        Ok(r) => r,
        Err(_) => return fallback(FallbackReason::TooFewImages, warnings),
    };
    match report.outcome {
        TrainOutcome::Diverged => return fallback(FallbackReason::Diverged, warnings),
        TrainOutcome::EpochCap => {
            let msg = format!(
                "crossing detector reached the {}-epoch cap (validation accuracy {:.4})",
                cfg.train.max_epochs, report.validation.accuracy
            );
            warn!("{msg}");
            warnings.push(msg);
        }
        TrainOutcome::Stopped(reason) => info!(
            "crossing detector stopped after {} epochs ({reason:?}), validation accuracy {:.4}",
            report.history.len(),
            report.validation.accuracy
        ),
    }
    CrossingDetector::Network { model, crop_side }
}

/// Crossing iff the crossing output is strictly larger; ties go to
/// individual.
pub fn decide(probabilities: &[f64]) -> BlobKind {
    if probabilities[CROSSING_CLASS] > probabilities[INDIVIDUAL_CLASS] {
        BlobKind::Crossing
    } else {
        BlobKind::Individual
    }
}

/// Final label of every blob: sure labels are kept, ambiguous blobs go
/// through the detector.
pub fn classify_ambiguous(detector: &CrossingDetector, store: &BlobStore, sure: &[SureLabel]) -> Vec<BlobKind> {
    let mut predictor = match detector {
        CrossingDetector::Network { model, .. } => Some(Predictor::new(model)),
        CrossingDetector::AreaFallback { .. } => None,
    };
    sure.iter()
        .enumerate()
        .map(|(b, l)| match l {
            SureLabel::SureIndividual => BlobKind::Individual,
            SureLabel::SureCrossing => BlobKind::Crossing,
            SureLabel::Ambiguous => match detector {
                CrossingDetector::Network { crop_side, .. } => {
                    let img = preprocess_dcd(store.blob(b), *crop_side);
                    decide(predictor.as_mut().unwrap().predict(&img.values))
                }
                CrossingDetector::AreaFallback { area, .. } => area.classify(store.blob(b)),
            },
        })
        .collect()
}

/// Whole stage: skips training when nothing is ambiguous.
pub fn detect_crossings(
    store: &BlobStore,
    sure: &[SureLabel],
    area: AreaModel,
    cfg: &CrossingDetectorConfig,
    warnings: &mut Vec<String>,
) -> (Vec<BlobKind>, Option<CrossingDetector>) {
    let ambiguous = sure.iter().filter(|&&l| l == SureLabel::Ambiguous).count();
    if ambiguous == 0 {
        return (classify_ambiguous(&CrossingDetector::AreaFallback {
            area,
            reason: FallbackReason::TooFewImages,
        }, store, sure), None);
    }
    let sets = SureSets::from_labels(sure);
    let crop_side = dcd_crop_side(sets.crossings.iter().map(|&b| store.blob(b))).unwrap_or(1);
    info!(
        "crossing detector: {} sure individuals, {} sure crossings, {} ambiguous",
        sets.individuals.len(),
        sets.crossings.len(),
        ambiguous
    );
    let ds = build_dcd_dataset(store, &sets, crop_side, cfg.max_images_per_class, cfg.train.seed);
    let det = train_crossing_detector(ds, crop_side, area, cfg, warnings);
    (classify_ambiguous(&det, store, sure), Some(det))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageprep::extract_masked_image;
    use crate::ingest::{Blob, GrayFrame, Pixel};

    #[test]
    fn decision_rule() {
        assert_eq!(decide(&[0.9, 0.1]), BlobKind::Crossing);
        assert_eq!(decide(&[0.5, 0.5]), BlobKind::Individual);
        assert_eq!(decide(&[0.2, 0.8]), BlobKind::Individual);
    }

    fn disc(frame: &mut GrayFrame, cx: f64, cy: f64, r: f64) -> Vec<Pixel> {
        let mut px = Vec::new();
        for y in 0..frame.height {
            for x in 0..frame.width {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                if dx * dx + dy * dy <= r * r {
                    frame.set(x, y, 40);
                    px.push(Pixel::new(x as u16, y as u16));
                }
            }
        }
        px
    }

    /// Small discs (individuals) and two overlapping discs (crossings).
    fn shapes(n: usize) -> (BlobStore, Vec<SureLabel>) {
        let mut frames = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let mut f = GrayFrame::filled(40, 40, 200);
            let jitter = (i % 5) as f64 * 0.3;
            let crossing = i % 2 == 0;
            let mut px = disc(&mut f, 12.0 + jitter, 20.0, 4.0);
            if crossing {
                px.extend(disc(&mut f, 19.0 + jitter, 20.0 + (i % 3) as f64, 4.0));
                px.sort();
                px.dedup();
            }
            let img = extract_masked_image(&f, &px);
            frames.push(vec![Blob::new(i, px, img)]);
            labels.push(if crossing {
                SureLabel::SureCrossing
            } else {
                SureLabel::SureIndividual
            });
        }
        (BlobStore::from_frames(frames), labels)
    }

    #[test]
    fn dataset_weights_and_fallbacks() {
        let (store, mut labels) = shapes(20);
        let sets = SureSets::from_labels(&labels);
        let ds = build_dcd_dataset(&store, &sets, 20, 3000, 0).unwrap();
        assert_eq!(ds.len(), 20);
        assert_eq!(ds.class_counts(), vec![10, 10]);
        assert_eq!(ds.input_dim, 1600);
        let capped = build_dcd_dataset(&store, &sets, 20, 4, 0).unwrap();
        assert_eq!(capped.class_counts(), vec![4, 4]);
        for l in labels.iter_mut() {
            if *l == SureLabel::SureCrossing {
                *l = SureLabel::Ambiguous;
            }
        }
        let sets = SureSets::from_labels(&labels);
        assert_eq!(
            build_dcd_dataset(&store, &sets, 20, 3000, 0).unwrap_err(),
            FallbackReason::NoSureCrossings
        );
    }

    #[test]
    fn dumbbells_and_discs_are_separated() {
        let (store, labels) = shapes(120);
        let sets = SureSets::from_labels(&labels);
        let side = dcd_crop_side(sets.crossings.iter().map(|&b| store.blob(b))).unwrap();
        let ds = build_dcd_dataset(&store, &sets, side, 3000, 1);
        let mut warnings = Vec::new();
        let area = AreaModel { median: 49.0, std: 2.0 };
        let det = train_crossing_detector(ds, side, area, &CrossingDetectorConfig::default(), &mut warnings);
        let CrossingDetector::Network { model, crop_side } = &det else {
            panic!("detector fell back: {det:?}");
        };
        let mut p = Predictor::new(model);
        let mut correct = 0;
        for b in 0..store.len() {
            let img = preprocess_dcd(store.blob(b), *crop_side);
            let expected = if labels[b] == SureLabel::SureCrossing {
                BlobKind::Crossing
            } else {
                BlobKind::Individual
            };
            if decide(p.predict(&img.values)) == expected {
                correct += 1;
            }
        }
        assert!(correct as f64 / store.len() as f64 >= 0.99);
    }

    #[test]
    fn fallback_uses_area_model_and_keeps_sure_labels() {
        let (store, mut labels) = shapes(6);
        labels[1] = SureLabel::Ambiguous;
        labels[2] = SureLabel::Ambiguous;
        let area = AreaModel {
            median: store.blob(1).area() as f64,
            std: 1.0,
        };
        let det = CrossingDetector::AreaFallback {
            area,
            reason: FallbackReason::Diverged,
        };
        let kinds = classify_ambiguous(&det, &store, &labels);
        assert_eq!(kinds[1], BlobKind::Individual);
        assert_eq!(kinds[2], BlobKind::Crossing);
        assert_eq!(kinds[0], BlobKind::Crossing);
        assert_eq!(kinds[3], BlobKind::Individual);
    }

    #[test]
    fn diverged_training_falls_back() {
        let (store, labels) = shapes(40);
        let sets = SureSets::from_labels(&labels);
        let mut ds = build_dcd_dataset(&store, &sets, 20, 3000, 0).unwrap();
        ds.data.iter_mut().for_each(|v| *v = f32::NAN);
        let mut warnings = Vec::new();
        let area = AreaModel { median: 49.0, std: 2.0 };
        let det = train_crossing_detector(Ok(ds), 20, area, &CrossingDetectorConfig::default(), &mut warnings);
        assert!(matches!(
            det,
            CrossingDetector::AreaFallback {
                reason: FallbackReason::Diverged,
                ..
            }
        ));
        assert_eq!(warnings.len(), 1);
    }
}
