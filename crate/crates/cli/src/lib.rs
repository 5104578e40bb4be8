//! Run configuration for the command line: a TOML file mirroring every
//! training and generation knob, plus `--set key=value` overrides.
//!
//! The full key tree serializes from [`RunConfig::default`], so the help
//! listing, the config file format, and the override paths can never
//! drift apart.

use landmark_cascade::cascade::CascadeConfig;
use landmark_cascade::occlusion::{OccluderConfig, PriorTrainConfig};
use landmark_cascade::shape::PerturbConfig;
use landmark_cascade::synth::{ProfileSide, SynthConfig};
use landmark_cascade::visibility::InferenceConfig;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

/// A configuration problem: unknown key, bad type, unreadable file.
#[derive(Debug)]
pub struct ConfigError {
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for ConfigError {}

fn err(message: impl Into<String>) -> ConfigError {
    ConfigError {
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CascadeKeys {
    pub iterations: usize,
}

impl Default for CascadeKeys {
    fn default() -> Self {
        Self { iterations: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentKeys {
    pub copies: usize,
}

impl Default for AugmentKeys {
    fn default() -> Self {
        Self { copies: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcclusionKeys {
    pub threshold: f64,
}

impl Default for OcclusionKeys {
    fn default() -> Self {
        Self { threshold: 0.6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureKeys {
    pub patch_radius_ratio: f64,
    pub visibility_exponent: f64,
}

impl Default for FeatureKeys {
    fn default() -> Self {
        Self {
            patch_radius_ratio: 0.14,
            visibility_exponent: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceKeys {
    pub lambda: f64,
    pub mc_samples: usize,
    pub exhaustive_threshold: usize,
    pub step_init: f64,
    pub step_shrink: f64,
    pub max_iters: usize,
    pub convergence_tol: f64,
    pub prob_clamp_eps: f64,
}

impl Default for InferenceKeys {
    fn default() -> Self {
        let d = InferenceConfig::default();
        Self {
            lambda: d.lambda,
            mc_samples: d.mc_samples,
            exhaustive_threshold: d.exhaustive_threshold,
            step_init: d.step_init,
            step_shrink: d.step_shrink,
            max_iters: d.max_iters,
            convergence_tol: d.convergence_tol,
            prob_clamp_eps: d.prob_clamp_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorKeys {
    pub hidden_units: usize,
    pub synthetic_labels: usize,
    pub rbm_epochs: usize,
    pub rbm_learning_rate: f64,
    pub rbm_minibatch: usize,
    pub finetune_epochs: usize,
    pub finetune_learning_rate: f64,
    pub finetune_momentum: f64,
}

impl Default for PriorKeys {
    fn default() -> Self {
        let d = PriorTrainConfig::default();
        Self {
            hidden_units: 25,
            synthetic_labels: 10_000,
            rbm_epochs: d.rbm_epochs,
            rbm_learning_rate: d.rbm_learning_rate,
            rbm_minibatch: d.rbm_minibatch,
            finetune_epochs: d.finetune_epochs,
            finetune_learning_rate: d.finetune_learning_rate,
            finetune_momentum: d.finetune_momentum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RidgeKeys {
    pub visibility: f64,
    pub location: f64,
}

impl Default for RidgeKeys {
    fn default() -> Self {
        Self {
            visibility: 1e-3,
            location: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbKeys {
    pub scale: f64,
    pub rotation: f64,
    pub translate: f64,
}

impl Default for PerturbKeys {
    fn default() -> Self {
        let d = PerturbConfig::default();
        Self {
            scale: d.scale_range,
            rotation: d.rotation_range,
            translate: d.translate_range,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OccluderKeys {
    pub max_rectangles: usize,
    pub size_min: f64,
    pub size_max: f64,
}

impl Default for OccluderKeys {
    fn default() -> Self {
        let d = OccluderConfig::default();
        Self {
            max_rectangles: d.max_rectangles,
            size_min: d.size_min,
            size_max: d.size_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthKeys {
    pub landmarks: usize,
    pub samples: usize,
    pub image_size: usize,
    pub deform_magnitude: f64,
    pub scale_range: f64,
    pub rotation_range: f64,
    pub translate_range: f64,
    pub occlusion_rate: f64,
    pub profile_prob: f64,
    pub profile_span: usize,
    pub profile_side: ProfileSide,
}

impl Default for SynthKeys {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            landmarks: d.landmarks,
            samples: d.samples,
            image_size: d.image_size,
            deform_magnitude: d.deform_magnitude,
            scale_range: d.scale_range,
            rotation_range: d.rotation_range,
            translate_range: d.translate_range,
            occlusion_rate: d.occlusion_rate,
            profile_prob: d.profile_prob,
            profile_span: d.profile_span,
            profile_side: d.profile_side,
        }
    }
}

/// All knobs of the command line in one TOML-shaped tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub use_shape_features: bool,
    pub use_occlusion_pattern: bool,
    pub cascade: CascadeKeys,
    pub augment: AugmentKeys,
    pub occlusion: OcclusionKeys,
    pub features: FeatureKeys,
    pub inference: InferenceKeys,
    pub prior: PriorKeys,
    pub ridge: RidgeKeys,
    pub perturb: PerturbKeys,
    pub occluder: OccluderKeys,
    pub synth: SynthKeys,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            use_shape_features: true,
            use_occlusion_pattern: true,
            cascade: CascadeKeys::default(),
            augment: AugmentKeys::default(),
            occlusion: OcclusionKeys::default(),
            features: FeatureKeys::default(),
            inference: InferenceKeys::default(),
            prior: PriorKeys::default(),
            ridge: RidgeKeys::default(),
            perturb: PerturbKeys::default(),
            occluder: OccluderKeys::default(),
            synth: SynthKeys::default(),
        }
    }
}

impl RunConfig {
    fn occluder_config(&self) -> OccluderConfig {
        OccluderConfig {
            max_rectangles: self.occluder.max_rectangles,
            size_min: self.occluder.size_min,
            size_max: self.occluder.size_max,
        }
    }

    /// Training configuration implied by these keys.
    pub fn cascade_config(&self) -> CascadeConfig {
        CascadeConfig {
            iterations: self.cascade.iterations,
            augment_copies: self.augment.copies,
            occlusion_threshold: self.occlusion.threshold,
            patch_radius_ratio: self.features.patch_radius_ratio,
            visibility_exponent: self.features.visibility_exponent,
            use_shape_features: self.use_shape_features,
            use_occlusion_pattern: self.use_occlusion_pattern,
            ridge_visibility: self.ridge.visibility,
            ridge_location: self.ridge.location,
            hidden_units: self.prior.hidden_units,
            synthetic_labels: self.prior.synthetic_labels,
            occluder: self.occluder_config(),
            perturb: PerturbConfig {
                scale_range: self.perturb.scale,
                rotation_range: self.perturb.rotation,
                translate_range: self.perturb.translate,
            },
            inference: InferenceConfig {
                lambda: self.inference.lambda,
                mc_samples: self.inference.mc_samples,
                exhaustive_threshold: self.inference.exhaustive_threshold,
                step_init: self.inference.step_init,
                step_shrink: self.inference.step_shrink,
                max_iters: self.inference.max_iters,
                convergence_tol: self.inference.convergence_tol,
                prob_clamp_eps: self.inference.prob_clamp_eps,
            },
            // The prior's own seed is derived from the master seed at
            // training time, so it is not a separate key here.
            prior: PriorTrainConfig {
                rbm_epochs: self.prior.rbm_epochs,
                rbm_learning_rate: self.prior.rbm_learning_rate,
                rbm_minibatch: self.prior.rbm_minibatch,
                finetune_epochs: self.prior.finetune_epochs,
                finetune_learning_rate: self.prior.finetune_learning_rate,
                finetune_momentum: self.prior.finetune_momentum,
                ..PriorTrainConfig::default()
            },
        }
    }

    /// Generator configuration implied by these keys; the master seed
    /// drives generation too.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            landmarks: self.synth.landmarks,
            samples: self.synth.samples,
            image_size: self.synth.image_size,
            deform_magnitude: self.synth.deform_magnitude,
            scale_range: self.synth.scale_range,
            rotation_range: self.synth.rotation_range,
            translate_range: self.synth.translate_range,
            occlusion_rate: self.synth.occlusion_rate,
            occluder: self.occluder_config(),
            profile_prob: self.synth.profile_prob,
            profile_span: self.synth.profile_span,
            profile_side: self.synth.profile_side,
            seed: self.seed,
        }
    }
}

/// Defaults when `path` is None, otherwise the parsed file. Unknown keys
/// are rejected with their location.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig, ConfigError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| err(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| err(format!("config {}: {e}", p.display())))
        }
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    // A bare token like `right` is not a valid TOML value, so strings
    // fall back to being taken literally.
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut table) => table.remove("v").expect("parsed assignment has v"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `key.path=value` overrides on top of `config`. Every path must
/// already exist in the tree and the result must type-check.
pub fn apply_overrides(config: &RunConfig, sets: &[String]) -> Result<RunConfig, ConfigError> {
    if sets.is_empty() {
        return Ok(config.clone());
    }
    let mut root = toml::Value::try_from(config)
        .map_err(|e| err(format!("config serialization failed: {e}")))?;
    for set in sets {
        let (key, raw) = set
            .split_once('=')
            .ok_or_else(|| err(format!("--set expects key=value, got '{set}'")))?;
        let key = key.trim();
        let segments: Vec<&str> = key.split('.').collect();
        if segments.iter().any(|s| s.is_empty()) {
            return Err(err(format!("malformed configuration key '{key}'")));
        }
        let mut node = &mut root;
        for (i, segment) in segments.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| err(format!("'{}' is not a table", segments[..i].join("."))))?;
            if !table.contains_key(*segment) {
                return Err(err(format!("unknown configuration key '{key}'")));
            }
            node = table.get_mut(*segment).expect("checked above");
        }
        *node = parse_override_value(raw.trim());
    }
    root.try_into()
        .map_err(|e| err(format!("override produced an invalid config: {e}")))
}

fn flatten_into(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) {
    match value {
        toml::Value::Table(table) => {
            for (k, v) in table {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_into(&path, v, out);
            }
        }
        leaf => out.push((prefix.to_string(), leaf.to_string())),
    }
}

/// Every leaf key with its value, sorted by path.
pub fn flatten_config(config: &RunConfig) -> Vec<(String, String)> {
    let value = toml::Value::try_from(config).expect("RunConfig always serializes");
    let mut out = Vec::new();
    flatten_into("", &value, &mut out);
    out.sort();
    out
}

/// Help section listing every `--set` path with its default.
pub fn config_keys_help() -> String {
    let mut out = String::from("Configuration keys (via --set KEY=VALUE or a --config file; defaults shown):\n");
    for (key, value) in flatten_config(&RunConfig::default()) {
        out.push_str(&format!("  {key} = {value}\n"));
    }
    out
}
