//! Landmark shape representation and geometric plumbing: mean shape over
//! partially annotated sets, placement of a reference shape into a face
//! box, and randomized similarity perturbations for training.

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// A 2D point in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }
}

/// Axis-aligned face box from an upstream detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl FaceBox {
    pub const fn new(x: f64, y: f64, width: f64, height: f64) -> Self {
        Self {
            x,
            y,
            width,
            height,
        }
    }

    /// Scalar face size: mean of width and height.
    pub fn face_size(&self) -> f64 {
        (self.width + self.height) / 2.0
    }

    pub fn center(&self) -> Point {
        Point::new(self.x + self.width / 2.0, self.y + self.height / 2.0)
    }
}

/// Ordered landmark locations of one face instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub points: Vec<Point>,
}

/// Per-landmark annotation flags; `false` marks a landmark with no ground
/// truth in that instance.
pub type AnnotationMask = Vec<bool>;

impl Shape {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            points: vec![Point::new(0.0, 0.0); n],
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Interleaved flat coordinates `[x0, y0, x1, y1, ...]`. Keeping the
    /// two rows of a landmark adjacent is what lets the location solver
    /// mask whole landmarks by row pairs.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.points.len() * 2);
        for p in &self.points {
            v.push(p.x);
            v.push(p.y);
        }
        v
    }

    pub fn from_flat(v: &[f64]) -> Self {
        debug_assert!(v.len() % 2 == 0);
        Self {
            points: v.chunks_exact(2).map(|c| Point::new(c[0], c[1])).collect(),
        }
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len().max(1) as f64;
        let (sx, sy) = self
            .points
            .iter()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
        Point::new(sx / n, sy / n)
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.x.is_finite() && p.y.is_finite())
    }
}

impl std::ops::Index<usize> for Shape {
    type Output = Point;

    fn index(&self, idx: usize) -> &Self::Output {
        &self.points[idx]
    }
}

impl std::ops::IndexMut<usize> for Shape {
    fn index_mut(&mut self, idx: usize) -> &mut Self::Output {
        &mut self.points[idx]
    }
}

/// Ranges for the randomized similarity applied to training initializations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbConfig {
    /// Scale drawn from [1 - scale_range, 1 + scale_range].
    pub scale_range: f64,
    /// Rotation drawn from [-rotation_range, rotation_range] degrees.
    pub rotation_range: f64,
    /// Translation per axis drawn from ±translate_range · face size.
    pub translate_range: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            scale_range: 0.1,
            rotation_range: 15.0,
            translate_range: 0.05,
        }
    }
}

/// Per-landmark mean over the instances where that landmark is annotated.
/// Shapes must already live in a common reference frame.
pub fn mean_shape(shapes: &[Shape], masks: &[AnnotationMask]) -> Result<Shape> {
    if shapes.is_empty() {
        return Err(Error::EmptyInput("mean_shape needs at least one shape"));
    }
    if shapes.len() != masks.len() {
        return Err(Error::DimensionMismatch {
            context: "mean_shape shapes vs masks",
            expected: shapes.len(),
            actual: masks.len(),
        });
    }
    let d = shapes[0].len();
    for (s, m) in shapes.iter().zip(masks) {
        if s.len() != d || m.len() != d {
            return Err(Error::DimensionMismatch {
                context: "mean_shape landmark count",
                expected: d,
                actual: if s.len() != d { s.len() } else { m.len() },
            });
        }
    }
    let mut out = Shape::zeros(d);
    for l in 0..d {
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut count = 0usize;
        for (s, m) in shapes.iter().zip(masks) {
            if m[l] {
                sx += s[l].x;
                sy += s[l].y;
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::LandmarkNeverAnnotated { landmark: l });
        }
        out[l] = Point::new(sx / count as f64, sy / count as f64);
    }
    Ok(out)
}

/// Map a shape expressed relative to `reference_box` into `target_box`
/// by per-axis scale and translation.
pub fn place_in_box(reference: &Shape, reference_box: &FaceBox, target_box: &FaceBox) -> Shape {
    let sx = target_box.width / reference_box.width;
    let sy = target_box.height / reference_box.height;
    let points = reference
        .points
        .iter()
        .map(|p| {
            Point::new(
                target_box.x + (p.x - reference_box.x) * sx,
                target_box.y + (p.y - reference_box.y) * sy,
            )
        })
        .collect();
    Shape::new(points)
}

/// Random similarity transform of an initialization: scale and rotation
/// about the shape centroid, then translation proportional to face size.
///
/// Draw order is fixed (scale, rotation, tx, ty) so a seeded source
/// reproduces exactly. All-zero ranges return the shape bit-identically.
pub fn perturb_init<R: Rng>(
    shape: &Shape,
    face_box: &FaceBox,
    config: &PerturbConfig,
    rng: &mut R,
) -> Shape {
    let scale = rng.random_range(1.0 - config.scale_range..=1.0 + config.scale_range);
    let theta_deg = rng.random_range(-config.rotation_range..=config.rotation_range);
    let fs = face_box.face_size();
    let tx = rng.random_range(-config.translate_range..=config.translate_range) * fs;
    let ty = rng.random_range(-config.translate_range..=config.translate_range) * fs;
    if scale == 1.0 && theta_deg == 0.0 && tx == 0.0 && ty == 0.0 {
        return shape.clone();
    }
    let theta = theta_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let c = shape.centroid();
    let points = shape
        .points
        .iter()
        .map(|p| {
            let dx = p.x - c.x;
            let dy = p.y - c.y;
            Point::new(
                c.x + scale * (cos * dx - sin * dy) + tx,
                c.y + scale * (sin * dx + cos * dy) + ty,
            )
        })
        .collect();
    Shape::new(points)
}
