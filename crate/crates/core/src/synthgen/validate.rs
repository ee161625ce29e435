//! Scoring a tracking result against ground truth.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::ResultLabels;

use super::GroundTruth;

#[derive(Debug, Error, PartialEq)]
pub enum ValidationError {
    #[error("result has {result} frames, ground truth {truth}")]
    FrameMismatch { result: usize, truth: usize },
    #[error("result blob {blob} of frame {frame} is unknown to the ground truth")]
    UnknownBlob { frame: usize, blob: usize },
    #[error("validation span [{0}, {1}) is empty or outside the video")]
    EmptySpan(usize, usize),
    #[error("no individual image to validate")]
    NoImages,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationOptions {
    /// Frames `[start, end)`; the whole video when absent.
    pub span: Option<(usize, usize)>,
    /// Only count images whose true centroid moved at least this far
    /// (pixels/frame) into the frame.
    pub min_speed: Option<f64>,
    /// True animals (0-based) to report individually.
    pub individuals: Vec<usize>,
}

/// Image tallies behind the indices.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageCounts {
    pub correct: usize,
    pub unassigned: usize,
    pub wrong: usize,
    /// Images of accumulated fragments, and how many of them are correct.
    pub accumulated: usize,
    pub accumulated_correct: usize,
}

impl ImageCounts {
    pub fn total(&self) -> usize {
        self.correct + self.unassigned + self.wrong
    }

    fn ratio(a: usize, b: usize, empty: f64) -> f64 {
        if b == 0 {
            empty
        } else {
            a as f64 / b as f64
        }
    }

    /// Share of accumulated images with the right identity (1 when none).
    pub fn cascade_accuracy(&self) -> f64 {
        Self::ratio(self.accumulated_correct, self.accumulated, 1.0)
    }

    pub fn accuracy(&self) -> f64 {
        Self::ratio(self.correct, self.total(), 1.0)
    }

    pub fn non_identified(&self) -> f64 {
        Self::ratio(self.unassigned, self.total(), 0.0)
    }

    pub fn misidentified(&self) -> f64 {
        Self::ratio(self.wrong, self.total(), 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub counts: ImageCounts,
    pub cascade_accuracy: f64,
    pub accuracy: f64,
    pub non_identified: f64,
    pub misidentified: f64,
    /// Accuracy over the images of each requested animal.
    pub per_individual: BTreeMap<usize, f64>,
    /// True animal of each result identity (0-based on both sides).
    pub identity_map: Vec<Option<usize>>,
}

impl ValidationMetrics {
    fn from_counts(counts: ImageCounts) -> Self {
        Self {
            counts,
            cascade_accuracy: counts.cascade_accuracy(),
            accuracy: counts.accuracy(),
            non_identified: counts.non_identified(),
            misidentified: counts.misidentified(),
            per_individual: BTreeMap::new(),
            identity_map: Vec::new(),
        }
    }
}

/// Validates every image of a single true animal in the span (crossing
/// images excluded).
///
/// Result identities are matched to true animals through the first global
/// fragment: at its core frame each member's identity is paired with the
/// animal its blob shows. Identities without a partner count as wrong.
pub fn validation_metrics(
    labels: &ResultLabels,
    gt: &GroundTruth,
    opts: &ValidationOptions,
) -> Result<ValidationMetrics, ValidationError> {
    if labels.n_frames != gt.n_frames {
        return Err(ValidationError::FrameMismatch {
            result: labels.n_frames,
            truth: gt.n_frames,
        });
    }
    let (s0, s1) = opts.span.unwrap_or((0, gt.n_frames));
    if s0 >= s1 || s1 > gt.n_frames {
        return Err(ValidationError::EmptySpan(s0, s1));
    }
    let truth_of = |frame: usize, blob: usize| -> Result<&[usize], ValidationError> {
        gt.blobs
            .get(frame)
            .and_then(|b| b.get(blob))
            .map(Vec::as_slice)
            .ok_or(ValidationError::UnknownBlob { frame, blob })
    };

    let mut identity_map = vec![None; labels.n_animals];
    for &m in &labels.first_global_members {
        let fr = &labels.fragments[m];
        let Some(id) = fr.identity else { continue };
        let k = labels.first_global_core - fr.start_frame;
        if let [animal] = truth_of(labels.first_global_core, fr.blobs[k])? {
            identity_map[id - 1] = Some(*animal);
        }
    }

    // (identity, accumulated) of every result blob
    let mut assigned: Vec<BTreeMap<usize, (Option<usize>, bool)>> = vec![BTreeMap::new(); gt.n_frames];
    for fr in &labels.fragments {
        for (k, &b) in fr.blobs.iter().enumerate() {
            assigned[fr.start_frame + k].insert(b, (fr.identity, fr.accumulated));
        }
    }

    let mut total = ImageCounts::default();
    let mut per_animal = vec![ImageCounts::default(); gt.n_animals];
    for f in s0..s1 {
        for (b, animals) in gt.blobs[f].iter().enumerate() {
            let [animal] = animals.as_slice() else { continue };
            if opts.min_speed.is_some_and(|v| gt.speed(f, *animal) < v) {
                continue;
            }
            let (identity, accumulated) = assigned[f].get(&b).copied().unwrap_or((None, false));
            let c = &mut per_animal[*animal];
            match identity {
                None => c.unassigned += 1,
                Some(id) => {
                    let ok = identity_map.get(id - 1).copied().flatten() == Some(*animal);
                    if ok {
                        c.correct += 1;
                    } else {
                        c.wrong += 1;
                    }
                    if accumulated {
                        c.accumulated += 1;
                        c.accumulated_correct += ok as usize;
                    }
                }
            }
        }
    }
    for c in &per_animal {
        total.correct += c.correct;
        total.unassigned += c.unassigned;
        total.wrong += c.wrong;
        total.accumulated += c.accumulated;
        total.accumulated_correct += c.accumulated_correct;
    }
    if total.total() == 0 {
        return Err(ValidationError::NoImages);
    }
    let mut m = ValidationMetrics::from_counts(total);
    m.identity_map = identity_map;
    for &i in &opts.individuals {
        if let Some(c) = per_animal.get(i) {
            m.per_individual.insert(i, c.accuracy());
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::FragmentRecord;

    #[test]
    fn index_arithmetic() {
        let c = ImageCounts {
            correct: 990,
            unassigned: 6,
            wrong: 4,
            accumulated: 0,
            accumulated_correct: 0,
        };
        let m = ValidationMetrics::from_counts(c);
        assert!((m.accuracy - 0.99).abs() < 1e-12);
        assert!((m.non_identified - 0.006).abs() < 1e-12);
        assert!((m.misidentified - 0.004).abs() < 1e-12);
    }

    /// Two animals, four frames, no crossings; animal 1 is blob 0.
    fn world() -> GroundTruth {
        GroundTruth {
            n_animals: 2,
            n_frames: 4,
            width: 10,
            height: 10,
            body_length: 2.0,
            blobs: vec![vec![vec![1], vec![0]]; 4],
            centroids: vec![vec![[0.0, 0.0], [5.0, 5.0]]; 4],
            fragments: Vec::new(),
            crossings: Vec::new(),
        }
    }

    fn labels(ids: [Option<usize>; 2], accumulated: [bool; 2]) -> ResultLabels {
        ResultLabels {
            n_animals: 2,
            n_frames: 4,
            first_global_core: 0,
            first_global_members: vec![0, 1],
            fragments: (0..2)
                .map(|k| FragmentRecord {
                    start_frame: 0,
                    blobs: vec![k; 4],
                    identity: ids[k],
                    accumulated: accumulated[k],
                    p2_max: 1.0,
                })
                .collect(),
        }
    }

    #[test]
    fn perfect_run() {
        let m = validation_metrics(&labels([Some(1), Some(2)], [true, true]), &world(), &ValidationOptions::default())
            .unwrap();
        assert_eq!(
            (m.cascade_accuracy, m.accuracy, m.non_identified, m.misidentified),
            (1.0, 1.0, 0.0, 0.0)
        );
        // result identity 1 (index 0) shows true animal 1
        assert_eq!(m.identity_map, vec![Some(1), Some(0)]);
    }

    #[test]
    fn cascade_accuracy_only_counts_accumulated_images() {
        let m = validation_metrics(&labels([Some(1), None], [true, false]), &world(), &ValidationOptions::default())
            .unwrap();
        assert_eq!(m.cascade_accuracy, 1.0);
        assert_eq!(m.counts.accumulated, 4);
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.non_identified, 0.5);
    }

    #[test]
    fn span_and_speed_filters() {
        let l = labels([Some(1), Some(2)], [true, true]);
        let opts = ValidationOptions {
            span: Some((1, 3)),
            ..Default::default()
        };
        assert_eq!(validation_metrics(&l, &world(), &opts).unwrap().counts.total(), 4);
        let opts = ValidationOptions {
            span: Some((2, 2)),
            ..Default::default()
        };
        assert_eq!(validation_metrics(&l, &world(), &opts), Err(ValidationError::EmptySpan(2, 2)));
        let opts = ValidationOptions {
            min_speed: Some(0.5),
            ..Default::default()
        };
        assert_eq!(validation_metrics(&l, &world(), &opts), Err(ValidationError::NoImages));
    }

    #[test]
    fn per_individual_accuracy() {
        let mut l = labels([Some(1), Some(2)], [false, false]);
        l.fragments.push(FragmentRecord {
            start_frame: 0,
            blobs: vec![],
            identity: None,
            accumulated: false,
            p2_max: 0.0,
        });
        let opts = ValidationOptions {
            individuals: vec![0, 1],
            ..Default::default()
        };
        let m = validation_metrics(&l, &world(), &opts).unwrap();
        assert_eq!(m.per_individual.get(&0), Some(&1.0));
        assert_eq!(m.per_individual.get(&1), Some(&1.0));
    }
}
