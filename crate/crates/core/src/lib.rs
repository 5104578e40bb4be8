//! Occlusion-aware cascaded regression for facial landmark detection.
//!
//! The detector jointly estimates landmark locations and per-landmark
//! visibility probabilities. Starting from a mean shape placed in a face
//! box with all landmarks assumed visible, each cascade iteration
//!
//! 1. extracts local appearance descriptors and pairwise shape features
//!    at the current landmark estimates,
//! 2. updates the visibility probabilities by solving a box-constrained
//!    problem that balances a learned linear prediction against the
//!    expected implausibility of the implied occlusion pattern (scored
//!    by an autoencoder trained on feasible occlusion labels), and
//! 3. updates the landmark locations with a linear regressor applied to
//!    visibility-weighted features, trained with per-landmark annotation
//!    masks so that samples with missing annotations never influence the
//!    rows they cannot supervise.
//!
//! Training handles datasets where some landmarks carry no location
//! annotation at all (e.g. self-occluded points on profile faces).
//!
//! The crate ships a synthetic dataset generator ([`synth`]) that renders
//! glyph-marked faces with rectangle occluders, making the full pipeline
//! trainable and verifiable without any external data, plus evaluation
//! metrics ([`eval`]) for normalized errors, occlusion precision/recall,
//! and cumulative error distributions.
//!
//! # Quick start
//!
//! ```
//! use landmark_cascade::cascade::{train_cascade, detect, CascadeConfig};
//! use landmark_cascade::synth::{generate_synthetic_dataset, SynthConfig};
//!
//! let cfg = SynthConfig { landmarks: 8, samples: 40, seed: 7, ..SynthConfig::default() };
//! let dataset = generate_synthetic_dataset(&cfg).unwrap();
//! let train_cfg = CascadeConfig { iterations: 1, augment_copies: 1, ..CascadeConfig::default() };
//! let model = train_cascade(&dataset, &train_cfg, 42).unwrap();
//! let det = detect(&dataset.images[0], &dataset.records[0].face_box, &model, 42).unwrap();
//! assert_eq!(det.landmarks.len(), 8);
//! ```

pub mod cascade;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod features;
pub mod image;
pub mod linalg;
pub mod location;
pub mod model_io;
pub mod occlusion;
pub mod seeds;
pub mod shape;
pub mod synth;
pub mod visibility;

pub use error::{Error, Result};
pub use image::GrayImage;
pub use shape::{FaceBox, Point, Shape};
