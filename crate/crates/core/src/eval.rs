//! Evaluation: normalized landmark errors, occlusion recall at a
//! precision floor, cumulative error distributions, and report writers.

use crate::cascade::{detect_traced, CascadeModel};
use crate::dataio::{Dataset, Normalizer, SampleRecord};
use crate::error::{Error, Result};
use crate::seeds;
use crate::shape::Shape;

const EVAL_TAG: u64 = 0x4556_414c_5345_4501;

fn normalizer_distance(record: &SampleRecord) -> Result<f64> {
    let point = |idx: usize, role: &str| -> Result<crate::shape::Point> {
        if idx >= record.landmark_count() || !record.mask[idx] {
            return Err(Error::InvalidConfig(format!(
                "normalizer {role} landmark {idx} is not annotated"
            )));
        }
        record.landmarks[idx].ok_or_else(|| {
            Error::InvalidConfig(format!("normalizer {role} landmark {idx} is null"))
        })
    };
    let dist = match record.normalizer {
        Normalizer::InterOcular { left, right } => {
            point(left, "left eye")?.distance(&point(right, "right eye")?)
        }
        // Profile faces have one usable eye; half the eye-mouth distance
        // approximates the hidden inter-ocular distance.
        Normalizer::Profile { eye, mouth } => {
            0.5 * point(eye, "eye")?.distance(&point(mouth, "mouth")?)
        }
    };
    if !(dist.is_finite() && dist > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "normalizer distance must be positive, got {dist}"
        )));
    }
    Ok(dist)
}

fn masked_mean_error<F: Fn(usize) -> bool>(
    predicted: &Shape,
    record: &SampleRecord,
    keep: F,
) -> Result<f64> {
    let d = record.landmark_count();
    if predicted.len() != d {
        return Err(Error::DimensionMismatch {
            context: "predicted shape vs record landmarks",
            expected: d,
            actual: predicted.len(),
        });
    }
    let norm = normalizer_distance(record)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for l in 0..d {
        if record.mask[l] && keep(l) {
            let gt = record.landmarks[l]
                .expect("validated records never pair mask=1 with null");
            sum += predicted[l].distance(&gt);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyInput("no landmarks match the error mask"));
    }
    Ok(sum / (count as f64 * norm))
}

/// Mean distance between prediction and ground truth over annotated
/// landmarks, divided by the record's normalizer distance.
pub fn normalized_error(predicted: &Shape, record: &SampleRecord) -> Result<f64> {
    masked_mean_error(predicted, record, |_| true)
}

/// Like [`normalized_error`] but restricted to annotated landmarks that
/// are labeled visible.
pub fn visible_normalized_error(predicted: &Shape, record: &SampleRecord) -> Result<f64> {
    masked_mean_error(predicted, record, |l| record.occlusion[l] == 1)
}

/// Occlusion detection quality at a precision floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallAtPrecision {
    /// Best recall among thresholds meeting the precision floor; 0 when
    /// no threshold qualifies.
    pub recall: f64,
    /// Precision at the chosen threshold.
    pub precision: f64,
    /// Chosen score threshold; predictions with score >= threshold are
    /// declared occluded.
    pub threshold: f64,
    /// False when no threshold reached the precision floor.
    pub achievable: bool,
}

/// Sweeps every distinct score as a decision threshold and returns the
/// best recall whose precision meets `target_precision`. Ties prefer the
/// smallest threshold. `truth_occluded[i]` marks ground-truth occlusion,
/// higher scores mean more confidently occluded.
pub fn recall_at_precision(
    scores: &[f64],
    truth_occluded: &[bool],
    target_precision: f64,
) -> Result<RecallAtPrecision> {
    if scores.len() != truth_occluded.len() {
        return Err(Error::DimensionMismatch {
            context: "scores vs truth labels",
            expected: truth_occluded.len(),
            actual: scores.len(),
        });
    }
    if !(0.0..=1.0).contains(&target_precision) {
        return Err(Error::InvalidConfig(format!(
            "target precision must lie in [0, 1], got {target_precision}"
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("occlusion scores"));
    }
    let positives = truth_occluded.iter().filter(|&&t| t).count();
    if positives == 0 {
        return Err(Error::EmptyInput("no occluded landmarks in the truth"));
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    thresholds.dedup();

    let mut best: Option<RecallAtPrecision> = None;
    for &tau in &thresholds {
        let mut tp = 0usize;
        let mut fp = 0usize;
        for (s, &t) in scores.iter().zip(truth_occluded) {
            if *s >= tau {
                if t {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        if tp + fp == 0 {
            continue;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        if precision < target_precision {
            continue;
        }
        let recall = tp as f64 / positives as f64;
        let better = match &best {
            None => true,
            // Strictly better recall wins; ties keep the earlier
            // (smaller) threshold from the sorted sweep.
            Some(b) => recall > b.recall,
        };
        if better {
            best = Some(RecallAtPrecision {
                recall,
                precision,
                threshold: tau,
                achievable: true,
            });
        }
    }
    Ok(best.unwrap_or(RecallAtPrecision {
        recall: 0.0,
        precision: 0.0,
        threshold: f64::INFINITY,
        achievable: false,
    }))
}

/// Fraction of errors at or below each threshold.
pub fn cumulative_error_distribution(errors: &[f64], thresholds: &[f64]) -> Vec<f64> {
    if errors.is_empty() {
        return vec![0.0; thresholds.len()];
    }
    thresholds
        .iter()
        .map(|&t| errors.iter().filter(|&&e| e <= t).count() as f64 / errors.len() as f64)
        .collect()
}

/// Aggregate evaluation of one model over one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    /// Mean normalized error over all annotated landmarks.
    pub mean_error: f64,
    /// Mean normalized error over visible annotated landmarks, absent
    /// when every annotated landmark in the set is occluded.
    pub mean_visible_error: Option<f64>,
    /// Occlusion recall at the precision floor, absent when the set has
    /// no occluded landmarks.
    pub occlusion_recall: Option<RecallAtPrecision>,
    pub precision_floor: f64,
    pub per_sample_errors: Vec<f64>,
}

impl EvalReport {
    /// Fixed-width human-readable summary.
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<28} {:>10}\n", "samples", self.samples));
        out.push_str(&format!("{:<28} {:>10.6}\n", "mean normalized error", self.mean_error));
        match self.mean_visible_error {
            Some(e) => out.push_str(&format!("{:<28} {:>10.6}\n", "visible-only error", e)),
            None => out.push_str(&format!("{:<28} {:>10}\n", "visible-only error", "n/a")),
        }
        match &self.occlusion_recall {
            Some(r) if r.achievable => {
                out.push_str(&format!(
                    "{:<28} {:>10.6}\n",
                    format!("recall @ precision {:.2}", self.precision_floor),
                    r.recall
                ));
                out.push_str(&format!("{:<28} {:>10.6}\n", "chosen threshold", r.threshold));
            }
            Some(_) => out.push_str(&format!(
                "{:<28} {:>10}\n",
                format!("recall @ precision {:.2}", self.precision_floor),
                "unachieved"
            )),
            None => out.push_str(&format!(
                "{:<28} {:>10}\n",
                format!("recall @ precision {:.2}", self.precision_floor),
                "n/a"
            )),
        }
        out
    }

    /// Per-sample errors as CSV with a header row.
    pub fn csv(&self) -> String {
        let mut out = String::from("sample,normalized_error\n");
        for (i, e) in self.per_sample_errors.iter().enumerate() {
            out.push_str(&format!("{i},{e}\n"));
        }
        out
    }
}

/// Runs the detector over a dataset and aggregates the metrics. Each
/// sample gets an independent seed derived from `seed`.
pub fn evaluate_model(dataset: &Dataset, model: &CascadeModel, seed: u64) -> Result<EvalReport> {
    evaluate_model_at_precision(dataset, model, seed, 0.8)
}

/// [`evaluate_model`] with an explicit precision floor for the recall
/// metric.
pub fn evaluate_model_at_precision(
    dataset: &Dataset,
    model: &CascadeModel,
    seed: u64,
    precision_floor: f64,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("evaluation dataset is empty"));
    }
    let mut per_sample = Vec::with_capacity(dataset.len());
    let mut visible_errors = Vec::new();
    let mut scores = Vec::new();
    let mut truth = Vec::new();
    for (i, rec) in dataset.records.iter().enumerate() {
        let det_seed = seeds::derive(seed, EVAL_TAG, i as u64);
        let (det, _) = detect_traced(&dataset.images[i], &rec.face_box, model, det_seed)?;
        per_sample.push(normalized_error(&det.landmarks, rec)?);
        match visible_normalized_error(&det.landmarks, rec) {
            Ok(e) => visible_errors.push(e),
            Err(Error::EmptyInput(_)) => {}
            Err(e) => return Err(e),
        }
        for l in 0..rec.landmark_count() {
            if rec.mask[l] {
                scores.push(1.0 - det.visibility[l]);
                truth.push(rec.occlusion[l] == 0);
            }
        }
    }
    let mean_error = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    let mean_visible_error = if visible_errors.is_empty() {
        None
    } else {
        Some(visible_errors.iter().sum::<f64>() / visible_errors.len() as f64)
    };
    let occlusion_recall = match recall_at_precision(&scores, &truth, precision_floor) {
        Ok(r) => Some(r),
        Err(Error::EmptyInput(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        samples: dataset.len(),
        mean_error,
        mean_visible_error,
        occlusion_recall,
        precision_floor,
        per_sample_errors: per_sample,
    })
}

/// Mean normalized error after each cascade iteration, entry 0 at the
/// initialization. Useful for checking that iterations help.
pub fn iteration_errors(dataset: &Dataset, model: &CascadeModel, seed: u64) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("evaluation dataset is empty"));
    }
    let steps = model.stages.len() + 1;
    let mut sums = vec![0.0; steps];
    for (i, rec) in dataset.records.iter().enumerate() {
        let det_seed = seeds::derive(seed, EVAL_TAG, i as u64);
        let (_, trace) = detect_traced(&dataset.images[i], &rec.face_box, model, det_seed)?;
        for (t, shape) in trace.shapes.iter().enumerate() {
            sums[t] += normalized_error(shape, rec)?;
        }
    }
    for s in sums.iter_mut() {
        *s /= dataset.len() as f64;
    }
    Ok(sums)
}
