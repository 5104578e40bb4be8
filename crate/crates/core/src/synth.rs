//! Synthetic face generator with known landmark, visibility, and
//! occluder geometry, used for end-to-end training and evaluation.
//!
//! Each sample is a smoothly deformed template face rendered as a set of
//! oriented grating glyphs (one distinctive texture per landmark) on a
//! light background, with textured gray rectangles pasted over a subset
//! of landmarks. Occlusion bits are computed exactly from rectangle
//! membership, so every label is consistent with the rendered image.

use crate::dataio::{Dataset, Normalizer, SampleRecord};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::occlusion::OccluderConfig;
use crate::seeds;
use crate::shape::{FaceBox, Point, Shape};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Which contour block a profile sample hides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileSide {
    /// Mask the first `profile_span` contour landmarks (indices 4..).
    Left,
    /// Mask the last `profile_span` landmarks.
    Right,
}

/// Synthetic dataset parameters.
///
/// Landmark indices 0 and 1 are the eyes and 2 and 3 the mouth corners;
/// the remainder sit on a face-oval ring. Profile masking only ever hides
/// ring landmarks, so both normalizations stay well defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Landmarks per face, at least 5.
    pub landmarks: usize,
    /// Number of samples to generate.
    pub samples: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    /// Per-mode deformation coefficient range, in face-span units.
    pub deform_magnitude: f64,
    /// Face scale drawn from [1 - scale_range, 1 + scale_range].
    pub scale_range: f64,
    /// In-plane rotation range in degrees.
    pub rotation_range: f64,
    /// Face center offset per axis, as a fraction of the face span.
    pub translate_range: f64,
    /// Target fraction of annotated landmarks covered by occluders.
    pub occlusion_rate: f64,
    /// Occluder rectangle size range (fractions of face size).
    pub occluder: OccluderConfig,
    /// Probability that a sample is a profile view with masked landmarks.
    pub profile_prob: f64,
    /// How many contour landmarks a profile view hides.
    pub profile_span: usize,
    /// Which contour block profile views hide.
    pub profile_side: ProfileSide,
    /// Master seed; every sample derives an independent substream.
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            landmarks: 15,
            samples: 100,
            image_size: 96,
            deform_magnitude: 0.04,
            scale_range: 0.08,
            rotation_range: 12.0,
            translate_range: 0.04,
            occlusion_rate: 0.25,
            occluder: OccluderConfig::default(),
            profile_prob: 0.0,
            profile_span: 3,
            profile_side: ProfileSide::Right,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Checks field ranges and cross-field constraints.
    pub fn validate(&self) -> Result<()> {
        if self.landmarks < 5 {
            return Err(Error::InvalidConfig(format!(
                "landmarks must be at least 5, got {}",
                self.landmarks
            )));
        }
        if self.image_size < 32 {
            return Err(Error::InvalidConfig(format!(
                "image_size must be at least 32, got {}",
                self.image_size
            )));
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return Err(Error::InvalidConfig(format!(
                "occlusion_rate must lie in [0, 1], got {}",
                self.occlusion_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.profile_prob) {
            return Err(Error::InvalidConfig(format!(
                "profile_prob must lie in [0, 1], got {}",
                self.profile_prob
            )));
        }
        if self.profile_prob > 0.0 && (self.profile_span == 0 || self.profile_span > self.landmarks - 4)
        {
            return Err(Error::InvalidConfig(format!(
                "profile_span must lie in [1, landmarks - 4], got {}",
                self.profile_span
            )));
        }
        for (name, v) in [
            ("deform_magnitude", self.deform_magnitude),
            ("scale_range", self.scale_range),
            ("rotation_range", self.rotation_range),
            ("translate_range", self.translate_range),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if self.scale_range >= 1.0 {
            return Err(Error::InvalidConfig(format!(
                "scale_range must be below 1, got {}",
                self.scale_range
            )));
        }
        self.occluder.validate()
    }
}

/// Axis-aligned rectangle in pixel coordinates, closed on all edges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    /// Membership test, boundary inclusive.
    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }
}

const SAMPLE_TAG: u64 = 0x53594e_54480001;
const BACKGROUND: u8 = 235;
const OCCLUDER_GRAY: i32 = 128;
const OCCLUDER_NOISE: i32 = 12;
/// Glyph disc radius as a fraction of face size. Slightly larger than the
/// default descriptor patch so a centered patch sees mostly glyph texture.
const GLYPH_RATIO: f64 = 0.21;
const GLYPH_AMPLITUDE: f64 = 150.0;

/// Canonical face template in unit coordinates. Eyes at 0 and 1, mouth
/// corners at 2 and 3, remaining landmarks spread over a face-oval ring.
pub fn base_face(landmarks: usize) -> Shape {
    let mut points = Vec::with_capacity(landmarks);
    points.push(Point { x: 0.35, y: 0.40 });
    points.push(Point { x: 0.65, y: 0.40 });
    points.push(Point { x: 0.38, y: 0.72 });
    points.push(Point { x: 0.62, y: 0.72 });
    let ring = landmarks.saturating_sub(4);
    for k in 0..ring {
        let angle = std::f64::consts::TAU * k as f64 / ring as f64 - std::f64::consts::FRAC_PI_2;
        points.push(Point {
            x: 0.5 + 0.38 * angle.cos(),
            y: 0.52 + 0.44 * angle.sin(),
        });
    }
    Shape { points }
}

/// Smooth low-rank deformation field: four fixed spatial modes evaluated
/// at the template points, mixed with per-sample coefficients.
fn deformation_mode(mode: usize, p: Point) -> (f64, f64) {
    let cx = p.x - 0.5;
    let cy = p.y - 0.5;
    match mode {
        0 => (cx, 0.0),
        1 => (0.0, cy),
        2 => (
            (std::f64::consts::PI * cy).sin(),
            (std::f64::consts::PI * cx).sin(),
        ),
        _ => (2.0 * cx * cy, 2.0 * cx * cx - 0.1),
    }
}

const DEFORM_MODES: usize = 4;

/// Deterministic per-pixel noise in [-OCCLUDER_NOISE, OCCLUDER_NOISE].
fn occluder_noise(x: u32, y: u32, salt: u64) -> i32 {
    let mut h = (x as u64) ^ ((y as u64) << 32) ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    (h % (2 * OCCLUDER_NOISE as u64 + 1)) as i32 - OCCLUDER_NOISE
}

/// Renders one oriented grating glyph centered on `center`. Darker pixels
/// win where glyphs overlap, which keeps rendering order irrelevant.
fn render_glyph(image: &mut GrayImage, center: Point, radius: f64, landmark: usize) {
    // Golden-ratio spacing keeps orientations distinct across landmarks.
    let orientation = std::f64::consts::PI * ((landmark as f64 * 0.618_033_988_749_895) % 1.0);
    let wavelength = radius * (0.55 + 0.20 * ((landmark * 7) % 3) as f64);
    let phase = landmark as f64 * 1.7;
    let (sin_o, cos_o) = orientation.sin_cos();
    let x_lo = ((center.x - radius).floor() as i64).max(0);
    let x_hi = ((center.x + radius).ceil() as i64).min(image.width() as i64 - 1);
    let y_lo = ((center.y - radius).floor() as i64).max(0);
    let y_hi = ((center.y + radius).ceil() as i64).min(image.height() as i64 - 1);
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let dx = x as f64 - center.x;
            let dy = y as f64 - center.y;
            let r = (dx * dx + dy * dy).sqrt();
            if r > radius {
                continue;
            }
            let window = (std::f64::consts::FRAC_PI_2 * r / radius).cos().powi(2);
            let carrier = (std::f64::consts::TAU / wavelength * (dx * cos_o + dy * sin_o) + phase)
                .cos();
            let value = BACKGROUND as f64 - GLYPH_AMPLITUDE * (0.5 + 0.5 * carrier) * window;
            let value = value.round().clamp(0.0, 255.0) as u8;
            let current = image.get(x as usize, y as usize);
            if value < current {
                image.set(x as usize, y as usize, value);
            }
        }
    }
}

/// Fills a rectangle with mid-gray plus deterministic texture noise.
fn render_rect(image: &mut GrayImage, rect: &Rect, salt: u64) {
    let x_lo = (rect.x0.ceil() as i64).max(0);
    let x_hi = (rect.x1.floor() as i64).min(image.width() as i64 - 1);
    let y_lo = (rect.y0.ceil() as i64).max(0);
    let y_hi = (rect.y1.floor() as i64).min(image.height() as i64 - 1);
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let value = (OCCLUDER_GRAY + occluder_noise(x as u32, y as u32, salt)).clamp(0, 255);
            image.set(x as usize, y as usize, value as u8);
        }
    }
}

fn count_covered(gt: &Shape, annotated: &[bool], rects: &[Rect]) -> usize {
    (0..gt.len())
        .filter(|&l| annotated[l] && rects.iter().any(|r| r.contains(gt[l])))
        .count()
}

/// Places one rectangle over landmark `target`, shrinking it if a larger
/// one would push the covered count past `budget`. The returned rectangle
/// always contains the target landmark.
fn place_rect<R: Rng>(
    gt: &Shape,
    annotated: &[bool],
    rects: &[Rect],
    target: usize,
    budget: usize,
    face_size: f64,
    occluder: &OccluderConfig,
    rng: &mut R,
) -> Rect {
    let w0 = rng.random_range(occluder.size_min..=occluder.size_max) * face_size;
    let h0 = rng.random_range(occluder.size_min..=occluder.size_max) * face_size;
    let jx = rng.random_range(-0.3..=0.3);
    let jy = rng.random_range(-0.3..=0.3);
    let center = gt[target];
    let mut best: Option<Rect> = None;
    let mut best_count = usize::MAX;
    for attempt in 0..5 {
        let shrink = 0.7_f64.powi(attempt);
        let (w, h) = (w0 * shrink, h0 * shrink);
        let rect = Rect {
            x0: center.x + jx * w - w / 2.0,
            y0: center.y + jy * h - h / 2.0,
            x1: center.x + jx * w + w / 2.0,
            y1: center.y + jy * h + h / 2.0,
        };
        debug_assert!(rect.contains(center));
        let mut all = rects.to_vec();
        all.push(rect);
        let count = count_covered(gt, annotated, &all);
        if count <= budget {
            return rect;
        }
        if count < best_count {
            best_count = count;
            best = Some(rect);
        }
    }
    best.expect("at least one candidate rectangle")
}

struct RawSample {
    image: GrayImage,
    record: SampleRecord,
    rects: Vec<Rect>,
}

fn generate_sample(cfg: &SynthConfig, index: usize) -> RawSample {
    let mut rng = seeds::substream(cfg.seed, SAMPLE_TAG, index as u64);
    let d = cfg.landmarks;

    // Ground-truth geometry: deformed template under a random similarity.
    let template = base_face(d);
    let mut coeffs = [0.0; DEFORM_MODES];
    for c in coeffs.iter_mut() {
        *c = rng.random_range(-cfg.deform_magnitude..=cfg.deform_magnitude);
    }
    let span = 0.58 * cfg.image_size as f64;
    let scale = span * (1.0 + rng.random_range(-cfg.scale_range..=cfg.scale_range));
    let theta = rng
        .random_range(-cfg.rotation_range..=cfg.rotation_range)
        .to_radians();
    let tx = rng.random_range(-cfg.translate_range..=cfg.translate_range) * span;
    let ty = rng.random_range(-cfg.translate_range..=cfg.translate_range) * span;
    let (sin_t, cos_t) = theta.sin_cos();
    let center = cfg.image_size as f64 / 2.0;
    let mut gt = Shape::zeros(d);
    for l in 0..d {
        let mut p = template[l];
        for (m, &c) in coeffs.iter().enumerate() {
            let (mx, my) = deformation_mode(m, template[l]);
            p.x += c * mx;
            p.y += c * my;
        }
        let ux = p.x - 0.5;
        let uy = p.y - 0.5;
        gt[l] = Point {
            x: center + tx + scale * (cos_t * ux - sin_t * uy),
            y: center + ty + scale * (sin_t * ux + cos_t * uy),
        };
    }

    // Profile views hide a contiguous ring block; eyes and mouth stay.
    let profile = cfg.profile_prob > 0.0 && rng.random_range(0.0..1.0) < cfg.profile_prob;
    let mut annotated = vec![true; d];
    if profile {
        let range = match cfg.profile_side {
            ProfileSide::Left => 4..4 + cfg.profile_span,
            ProfileSide::Right => d - cfg.profile_span..d,
        };
        for l in range {
            annotated[l] = false;
        }
    }

    // Face box from the annotated extent, padded like a detector box.
    let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
    let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for l in 0..d {
        if annotated[l] {
            min_x = min_x.min(gt[l].x);
            min_y = min_y.min(gt[l].y);
            max_x = max_x.max(gt[l].x);
            max_y = max_y.max(gt[l].y);
        }
    }
    let margin = 0.15 * (max_x - min_x).max(max_y - min_y);
    let face_box = FaceBox {
        x: min_x - margin,
        y: min_y - margin,
        width: max_x - min_x + 2.0 * margin,
        height: max_y - min_y + 2.0 * margin,
    };
    let face_size = face_box.face_size();

    // Render glyphs for annotated landmarks only.
    let mut image = GrayImage::new(cfg.image_size, cfg.image_size).expect("validated image size");
    image.fill(BACKGROUND);
    let glyph_radius = GLYPH_RATIO * face_size;
    for l in 0..d {
        if annotated[l] {
            render_glyph(&mut image, gt[l], glyph_radius, l);
        }
    }

    // Occluders: draw a per-landmark coin to pick the target count, then
    // place landmark-centered rectangles until that many are covered.
    let annotated_count = annotated.iter().filter(|&&a| a).count();
    let mut target_count = 0usize;
    for _ in 0..annotated_count {
        if rng.random_range(0.0..1.0) < cfg.occlusion_rate {
            target_count += 1;
        }
    }
    let mut rects: Vec<Rect> = Vec::new();
    while count_covered(&gt, &annotated, &rects) < target_count {
        let uncovered: Vec<usize> = (0..d)
            .filter(|&l| annotated[l] && !rects.iter().any(|r| r.contains(gt[l])))
            .collect();
        let target = uncovered[rng.random_range(0..uncovered.len())];
        let rect = place_rect(
            &gt,
            &annotated,
            &rects,
            target,
            target_count,
            face_size,
            &cfg.occluder,
            &mut rng,
        );
        rects.push(rect);
    }
    let salt = seeds::derive(cfg.seed, SAMPLE_TAG ^ 0xae, index as u64);
    for rect in &rects {
        render_rect(&mut image, rect, salt);
    }

    // Labels follow rectangle membership exactly.
    let mut landmarks = Vec::with_capacity(d);
    let mut occlusion = Vec::with_capacity(d);
    for l in 0..d {
        if annotated[l] {
            landmarks.push(Some(gt[l]));
            let covered = rects.iter().any(|r| r.contains(gt[l]));
            occlusion.push(if covered { 0 } else { 1 });
        } else {
            landmarks.push(None);
            occlusion.push(0);
        }
    }
    let normalizer = if profile {
        Normalizer::Profile { eye: 0, mouth: 2 }
    } else {
        Normalizer::InterOcular { left: 0, right: 1 }
    };
    let record = SampleRecord {
        image: format!("img/{index:05}.pgm"),
        face_box,
        landmarks,
        mask: annotated,
        occlusion,
        normalizer,
    };
    RawSample {
        image,
        record,
        rects,
    }
}

/// Generates a dataset plus the occluder rectangles used per sample, for
/// tests that check label geometry against the rendering.
pub fn generate_synthetic_dataset_detailed(
    cfg: &SynthConfig,
) -> Result<(Dataset, Vec<Vec<Rect>>)> {
    cfg.validate()?;
    let mut records = Vec::with_capacity(cfg.samples);
    let mut images = Vec::with_capacity(cfg.samples);
    let mut rects = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let sample = generate_sample(cfg, i);
        records.push(sample.record);
        images.push(sample.image);
        rects.push(sample.rects);
    }
    Ok((Dataset { records, images }, rects))
}

/// Generates a fully labeled synthetic dataset.
pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    generate_synthetic_dataset_detailed(cfg).map(|(dataset, _)| dataset)
}
