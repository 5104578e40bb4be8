//! Cascade training and detection: alternating visibility and location
//! regression stages applied to a mean-face initialization.
//!
//! Training fits one visibility regressor and one location regressor per
//! iteration. The visibility regressor is fit on raw features against
//! probability residuals, then constrained inference snaps each row's
//! probabilities toward the occlusion-pattern prior. The location
//! regressor is fit on visibility-weighted features against coordinate
//! residuals measured in face-size units, so one model transfers across
//! face scales. Detection replays the same per-iteration random streams,
//! which makes a detection with a training row's seed reproduce that
//! row's training trajectory bit for bit.

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::features::{concat_features, FeatureVector};
use crate::image::GrayImage;
use crate::location::{
    predict_on_weighted, train_location_regressor_with_exponent, weight_features_with_exponent,
    LocationRegressor,
};
use crate::occlusion::{
    synth_occlusion_labels, train_autoencoder, OccluderConfig, OcclusionPrior, OcclusionVector,
    PriorTrainConfig,
};
use crate::seeds;
use crate::shape::{mean_shape, perturb_init, place_in_box, FaceBox, PerturbConfig, Shape};
use crate::visibility::{
    infer_visibility_update, train_visibility_regressor, InferenceConfig, VisibilityProbs,
    VisibilityRegressor,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const ROW_TAG: u64 = 0x4341_5343_524f_5701;
const AUGMENT_TAG: u64 = 0x4341_5343_4155_4701;
const INFER_TAG: u64 = 0x4341_5343_494e_4601;
const PRIOR_TAG: u64 = 0x4341_5343_5052_4901;

/// Full training configuration for one cascade model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeConfig {
    /// Number of regression stages T.
    pub iterations: usize,
    /// Training initializations per sample; copy 0 is the unperturbed
    /// mean face, further copies are randomly perturbed.
    pub augment_copies: usize,
    /// A landmark is reported occluded when its final visibility
    /// probability falls below this.
    pub occlusion_threshold: f64,
    /// Descriptor patch radius as a fraction of face size.
    pub patch_radius_ratio: f64,
    /// Exponent on visibility probabilities when weighting features for
    /// the location regressor.
    pub visibility_exponent: f64,
    /// When false, the pairwise shape block is zeroed out everywhere.
    pub use_shape_features: bool,
    /// When false, constrained inference drops the prior term (lambda 0)
    /// and reduces to box-clamped regression.
    pub use_occlusion_pattern: bool,
    /// Relative ridge for the visibility regressor fit.
    pub ridge_visibility: f64,
    /// Relative ridge for the location regressor fit.
    pub ridge_location: f64,
    /// Autoencoder hidden units.
    pub hidden_units: usize,
    /// Synthetic occlusion patterns added to the prior's training set.
    pub synthetic_labels: usize,
    /// Rectangle model used to sample those synthetic patterns.
    pub occluder: OccluderConfig,
    /// Initialization-perturbation ranges for augmentation copies.
    pub perturb: PerturbConfig,
    /// Constrained visibility inference knobs.
    pub inference: InferenceConfig,
    /// Autoencoder training knobs.
    pub prior: PriorTrainConfig,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            iterations: 4,
            augment_copies: 5,
            occlusion_threshold: 0.6,
            patch_radius_ratio: 0.14,
            visibility_exponent: 0.5,
            use_shape_features: true,
            use_occlusion_pattern: true,
            ridge_visibility: 1e-3,
            ridge_location: 1e-3,
            hidden_units: 25,
            synthetic_labels: 10_000,
            occluder: OccluderConfig::default(),
            perturb: PerturbConfig::default(),
            inference: InferenceConfig::default(),
            prior: PriorTrainConfig::default(),
        }
    }
}

impl CascadeConfig {
    /// Checks field ranges and cross-field constraints.
    pub fn validate(&self) -> Result<()> {
        if self.augment_copies == 0 {
            return Err(Error::InvalidConfig(
                "augment_copies must be at least 1".into(),
            ));
        }
        if self.augment_copies > MAX_COPIES {
            return Err(Error::InvalidConfig(format!(
                "augment_copies must not exceed {MAX_COPIES}"
            )));
        }
        if !(0.0..=1.0).contains(&self.occlusion_threshold) {
            return Err(Error::InvalidConfig(format!(
                "occlusion_threshold must lie in [0, 1], got {}",
                self.occlusion_threshold
            )));
        }
        if !self.patch_radius_ratio.is_finite() || self.patch_radius_ratio <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "patch_radius_ratio must be positive, got {}",
                self.patch_radius_ratio
            )));
        }
        if !self.visibility_exponent.is_finite() || self.visibility_exponent < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "visibility_exponent must be non-negative, got {}",
                self.visibility_exponent
            )));
        }
        for (name, v) in [
            ("ridge_visibility", self.ridge_visibility),
            ("ridge_location", self.ridge_location),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if self.hidden_units == 0 {
            return Err(Error::InvalidConfig("hidden_units must be positive".into()));
        }
        if self.inference.lambda < 0.0 || !self.inference.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "inference.lambda must be non-negative, got {}",
                self.inference.lambda
            )));
        }
        self.occluder.validate()
    }

    fn effective_inference(&self) -> InferenceConfig {
        if self.use_occlusion_pattern {
            self.inference
        } else {
            InferenceConfig {
                lambda: 0.0,
                ..self.inference
            }
        }
    }
}

/// One cascade iteration's pair of regressors.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeStage {
    pub visibility: VisibilityRegressor,
    pub location: LocationRegressor,
}

/// A trained detector: the mean face in unit-box coordinates, the stage
/// regressors in application order, and the occlusion-pattern prior.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    pub mean_face: Shape,
    pub stages: Vec<CascadeStage>,
    pub prior: OcclusionPrior,
    pub config: CascadeConfig,
}

impl CascadeModel {
    pub fn landmarks(&self) -> usize {
        self.mean_face.len()
    }
}

/// Detector output for one face box.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// Landmark positions in image pixels.
    pub landmarks: Shape,
    /// Per-landmark visibility probabilities from the final iteration.
    pub visibility: Vec<f64>,
    /// visibility < occlusion_threshold.
    pub occluded: Vec<bool>,
}

/// Per-iteration states of a detection; entry 0 is the initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionTrace {
    pub shapes: Vec<Shape>,
    pub probs: Vec<Vec<f64>>,
}

/// Final training-row states, row-major over samples then copies.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub shapes: Vec<Shape>,
    pub probs: Vec<Vec<f64>>,
}

const MAX_COPIES: usize = 1 << 16;

/// Seed of training row (`sample`, `copy`). A detection run with this
/// seed on the same image and box replays that row's trajectory exactly
/// when the row is unperturbed (copy 0).
pub fn training_row_seed(master_seed: u64, sample: usize, copy: usize) -> u64 {
    seeds::derive(
        master_seed,
        ROW_TAG,
        (sample as u64) * MAX_COPIES as u64 + copy as u64,
    )
}

fn unit_box() -> FaceBox {
    FaceBox {
        x: 0.0,
        y: 0.0,
        width: 1.0,
        height: 1.0,
    }
}

fn extract_row_features(
    image: &GrayImage,
    shape: &Shape,
    face_box: &FaceBox,
    config: &CascadeConfig,
) -> Result<FeatureVector> {
    let mut psi = concat_features(image, shape, face_box, config.patch_radius_ratio)?;
    if !config.use_shape_features {
        psi.zero_shape_block();
    }
    Ok(psi)
}

/// Trains the occlusion-pattern prior on the dataset's labels plus
/// synthetic patterns sampled from the rectangle model.
fn train_prior(
    dataset: &Dataset,
    mean_face: &Shape,
    config: &CascadeConfig,
    seed: u64,
) -> Result<OcclusionPrior> {
    let mut labels: Vec<OcclusionVector> =
        dataset.records.iter().map(|r| r.occlusion.clone()).collect();
    let mut rng = seeds::substream(seed, PRIOR_TAG, 0);
    labels.extend(synth_occlusion_labels(
        mean_face,
        &unit_box(),
        &config.occluder,
        &mut rng,
        config.synthetic_labels,
    ));
    // The master seed governs the prior's own randomness too.
    let prior_config = PriorTrainConfig {
        seed: seeds::derive(seed, PRIOR_TAG, 1),
        ..config.prior
    };
    train_autoencoder(&labels, config.hidden_units, &prior_config)
}

/// Trains a cascade and returns the final training-row states alongside
/// the model.
pub fn train_cascade_traced(
    dataset: &Dataset,
    config: &CascadeConfig,
    seed: u64,
) -> Result<(CascadeModel, TrainTrace)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training dataset is empty"));
    }
    let d = dataset.landmark_count()?;
    let n = dataset.len();
    let copies = config.augment_copies;
    let rows = n * copies;
    let inference = config.effective_inference();

    // Mean face over box-normalized annotated landmarks.
    let norm_shapes: Vec<Shape> = dataset
        .records
        .iter()
        .map(|r| place_in_box(&r.annotated_shape(), &r.face_box, &unit_box()))
        .collect();
    let masks: Vec<Vec<bool>> = dataset.records.iter().map(|r| r.mask.clone()).collect();
    let mean_face = mean_shape(&norm_shapes, &masks)?;

    let prior = train_prior(dataset, &mean_face, config, seed)?;

    // Row states: copy 0 starts at the placed mean face, others perturbed.
    let row_seeds: Vec<u64> = (0..rows)
        .map(|r| training_row_seed(seed, r / copies, r % copies))
        .collect();
    let mut shapes: Vec<Shape> = (0..rows)
        .map(|r| {
            let rec = &dataset.records[r / copies];
            let base = place_in_box(&mean_face, &unit_box(), &rec.face_box);
            if r % copies == 0 {
                base
            } else {
                let mut rng = seeds::substream(row_seeds[r], AUGMENT_TAG, 0);
                perturb_init(&base, &rec.face_box, &config.perturb, &mut rng)
            }
        })
        .collect();
    let mut probs: Vec<VisibilityProbs> = vec![VisibilityProbs::ones(d); rows];

    // Per-row constants.
    let p_star: Vec<Vec<f64>> = dataset
        .records
        .iter()
        .map(|r| r.occlusion.iter().map(|&b| b as f64).collect())
        .collect();
    let gt_flat: Vec<Vec<f64>> = dataset
        .records
        .iter()
        .map(|r| r.annotated_shape().to_flat())
        .collect();

    let mut stages = Vec::with_capacity(config.iterations);
    for t in 0..config.iterations {
        let features: Vec<FeatureVector> = (0..rows)
            .into_par_iter()
            .map(|r| {
                let rec = &dataset.records[r / copies];
                extract_row_features(&dataset.images[r / copies], &shapes[r], &rec.face_box, config)
            })
            .collect::<Result<Vec<_>>>()?;

        // Visibility stage: residual targets on raw features, then
        // constrained inference against the prior.
        let vis_targets: Vec<Vec<f64>> = (0..rows)
            .map(|r| {
                let star = &p_star[r / copies];
                (0..d).map(|l| star[l] - probs[r].probs[l]).collect()
            })
            .collect();
        let visibility = train_visibility_regressor(&features, &vis_targets, config.ridge_visibility)?;
        probs = (0..rows)
            .into_par_iter()
            .map(|r| {
                let mut rng = seeds::substream(row_seeds[r], INFER_TAG, t as u64);
                infer_visibility_update(&probs[r], &features[r], &visibility, &prior, &inference, &mut rng)
                    .map(|u| u.probs)
            })
            .collect::<Result<Vec<_>>>()?;

        // Location stage: residuals to ground truth in face-size units.
        let loc_targets: Vec<Vec<f64>> = (0..rows)
            .map(|r| {
                let rec = &dataset.records[r / copies];
                let fs = rec.face_box.face_size();
                let cur = shapes[r].to_flat();
                gt_flat[r / copies]
                    .iter()
                    .zip(&cur)
                    .map(|(g, c)| (g - c) / fs)
                    .collect()
            })
            .collect();
        let row_masks: Vec<Vec<bool>> = (0..rows)
            .map(|r| dataset.records[r / copies].mask.clone())
            .collect();
        let location = train_location_regressor_with_exponent(
            &features,
            &probs,
            &loc_targets,
            &row_masks,
            config.ridge_location,
            config.visibility_exponent,
        )?;

        shapes = (0..rows)
            .into_par_iter()
            .map(|r| {
                let fs = dataset.records[r / copies].face_box.face_size();
                let weighted =
                    weight_features_with_exponent(&features[r], &probs[r], config.visibility_exponent)?;
                let delta = predict_on_weighted(&weighted, &location)?;
                let mut shape = shapes[r].clone();
                for l in 0..d {
                    shape[l].x += fs * delta[2 * l];
                    shape[l].y += fs * delta[2 * l + 1];
                }
                if !shape.is_finite() {
                    return Err(Error::NonFinite("cascade location update"));
                }
                Ok(shape)
            })
            .collect::<Result<Vec<_>>>()?;

        stages.push(CascadeStage {
            visibility,
            location,
        });
    }

    let model = CascadeModel {
        mean_face,
        stages,
        prior,
        config: config.clone(),
    };
    let trace = TrainTrace {
        shapes,
        probs: probs.into_iter().map(|p| p.probs).collect(),
    };
    Ok((model, trace))
}

/// Trains a cascade detector on an annotated dataset.
pub fn train_cascade(dataset: &Dataset, config: &CascadeConfig, seed: u64) -> Result<CascadeModel> {
    train_cascade_traced(dataset, config, seed).map(|(model, _)| model)
}

/// Runs the detector and keeps every intermediate state.
pub fn detect_traced(
    image: &GrayImage,
    face_box: &FaceBox,
    model: &CascadeModel,
    seed: u64,
) -> Result<(Detection, DetectionTrace)> {
    let d = model.landmarks();
    let config = &model.config;
    let inference = config.effective_inference();
    let fs = face_box.face_size();
    if !(fs.is_finite() && fs > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "face box must have positive finite size, got {fs}"
        )));
    }

    let mut shape = place_in_box(&model.mean_face, &unit_box(), face_box);
    let mut p = VisibilityProbs::ones(d);
    let mut shapes = vec![shape.clone()];
    let mut probs_trace = vec![p.probs.clone()];

    for (t, stage) in model.stages.iter().enumerate() {
        let psi = extract_row_features(image, &shape, face_box, config)?;
        let mut rng = seeds::substream(seed, INFER_TAG, t as u64);
        p = infer_visibility_update(&p, &psi, &stage.visibility, &model.prior, &inference, &mut rng)?
            .probs;
        let weighted = weight_features_with_exponent(&psi, &p, config.visibility_exponent)?;
        let delta = predict_on_weighted(&weighted, &stage.location)?;
        for l in 0..d {
            shape[l].x += fs * delta[2 * l];
            shape[l].y += fs * delta[2 * l + 1];
        }
        if !shape.is_finite() {
            return Err(Error::NonFinite("cascade location update"));
        }
        shapes.push(shape.clone());
        probs_trace.push(p.probs.clone());
    }

    let occluded: Vec<bool> = p
        .probs
        .iter()
        .map(|&v| v < config.occlusion_threshold)
        .collect();
    let detection = Detection {
        landmarks: shape,
        visibility: p.probs,
        occluded,
    };
    let trace = DetectionTrace {
        shapes,
        probs: probs_trace,
    };
    Ok((detection, trace))
}

/// Detects landmarks and occlusion in one face box.
///
/// The seed drives the Monte Carlo part of constrained inference; two
/// runs with the same seed are bit-identical.
pub fn detect(
    image: &GrayImage,
    face_box: &FaceBox,
    model: &CascadeModel,
    seed: u64,
) -> Result<Detection> {
    detect_traced(image, face_box, model, seed).map(|(det, _)| det)
}
