//! Appearance and shape features. The appearance part is an upright
//! SIFT-style descriptor (4x4 spatial cells, 8 orientation bins) extracted
//! around each landmark; the shape part is pairwise coordinate differences
//! normalized by face size. Together they form the regression input.

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::shape::{FaceBox, Point, Shape};

/// Entries per patch descriptor: 4x4 cells times 8 orientation bins.
pub const PATCH_DIM: usize = 128;

const CELLS: usize = 4;
const ORI_BINS: usize = 8;
const NORM_CLAMP: f64 = 0.2;

/// Joint feature vector: all landmark descriptors concatenated in landmark
/// order, followed by the pairwise shape block.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
    landmarks: usize,
}

/// Total feature length for a landmark count.
pub fn feature_len(landmarks: usize) -> usize {
    landmarks * PATCH_DIM + landmarks * (landmarks - 1)
}

impl FeatureVector {
    pub fn from_parts(appearance: Vec<f64>, shape: Vec<f64>, landmarks: usize) -> Result<Self> {
        if appearance.len() != landmarks * PATCH_DIM {
            return Err(Error::DimensionMismatch {
                context: "feature appearance block",
                expected: landmarks * PATCH_DIM,
                actual: appearance.len(),
            });
        }
        if shape.len() != landmarks * (landmarks - 1) {
            return Err(Error::DimensionMismatch {
                context: "feature shape block",
                expected: landmarks * (landmarks - 1),
                actual: shape.len(),
            });
        }
        let mut values = appearance;
        values.extend_from_slice(&shape);
        Ok(Self { values, landmarks })
    }

    pub fn landmarks(&self) -> usize {
        self.landmarks
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn appearance(&self) -> &[f64] {
        &self.values[..self.landmarks * PATCH_DIM]
    }

    pub fn shape_block(&self) -> &[f64] {
        &self.values[self.landmarks * PATCH_DIM..]
    }

    /// Descriptor block of one landmark.
    pub fn appearance_of(&self, landmark: usize) -> &[f64] {
        &self.values[landmark * PATCH_DIM..(landmark + 1) * PATCH_DIM]
    }

    /// Zero the shape block in place. Used by the ablation that trains
    /// without shape features while keeping the vector length stable.
    pub fn zero_shape_block(&mut self) {
        let start = self.landmarks * PATCH_DIM;
        self.values[start..].fill(0.0);
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Upright SIFT-style descriptor over the square patch of half-width
/// `radius` centered at `center` (rounded to the nearest pixel). Gradients
/// come from central differences on edge-clamped reads, so patches may
/// overflow the image. A patch with no gradient energy returns all zeros.
pub fn extract_patch_descriptor(
    image: &GrayImage,
    center: Point,
    radius: f64,
) -> Result<[f64; PATCH_DIM]> {
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::DegenerateImage);
    }
    if !(radius > 0.0) || !center.x.is_finite() || !center.y.is_finite() {
        return Err(Error::NonFinite("patch center or radius"));
    }
    let cx = center.x.round() as i64;
    let cy = center.y.round() as i64;
    let r = radius;
    let ir = (radius.round() as i64).max(1);
    let cell_w = r / 2.0;
    let mut desc = [0.0f64; PATCH_DIM];
    for dy in -ir..=ir {
        for dx in -ir..=ir {
            let x = cx + dx;
            let y = cy + dy;
            let gx = image.get_clamped(x + 1, y) as f64 - image.get_clamped(x - 1, y) as f64;
            let gy = image.get_clamped(x, y + 1) as f64 - image.get_clamped(x, y - 1) as f64;
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let theta = gy.atan2(gx);
            // Spatial cell coordinates in [-0.5, 3.5]; orientation
            // coordinate in [0, 8] with wraparound.
            let u = (dx as f64 + r) / cell_w - 0.5;
            let v = (dy as f64 + r) / cell_w - 0.5;
            let o = (theta + std::f64::consts::PI) / (2.0 * std::f64::consts::PI / ORI_BINS as f64);
            let u0 = u.floor();
            let v0 = v.floor();
            let o0 = o.floor();
            let fu = u - u0;
            let fv = v - v0;
            let fo = o - o0;
            for (du, wu) in [(0i64, 1.0 - fu), (1, fu)] {
                let cu = u0 as i64 + du;
                if !(0..CELLS as i64).contains(&cu) || wu == 0.0 {
                    continue;
                }
                for (dv, wv) in [(0i64, 1.0 - fv), (1, fv)] {
                    let cv = v0 as i64 + dv;
                    if !(0..CELLS as i64).contains(&cv) || wv == 0.0 {
                        continue;
                    }
                    for (do_, wo) in [(0i64, 1.0 - fo), (1, fo)] {
                        if wo == 0.0 {
                            continue;
                        }
                        let bin = ((o0 as i64 + do_).rem_euclid(ORI_BINS as i64)) as usize;
                        let idx = (cv as usize * CELLS + cu as usize) * ORI_BINS + bin;
                        desc[idx] += mag * wu * wv * wo;
                    }
                }
            }
        }
    }
    let norm = desc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Ok([0.0; PATCH_DIM]);
    }
    for v in desc.iter_mut() {
        *v = (*v / norm).min(NORM_CLAMP);
    }
    let norm2 = desc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm2 >= 1e-12 {
        for v in desc.iter_mut() {
            *v /= norm2;
        }
    }
    Ok(desc)
}

/// Pairwise coordinate differences `(p_i - p_j) / face_size` over all
/// unordered pairs `i < j` in lexicographic order. Length D_l(D_l - 1).
pub fn shape_features(shape: &Shape, face_size: f64) -> Vec<f64> {
    let d = shape.len();
    let mut out = Vec::with_capacity(d * (d.max(1) - 1));
    for i in 0..d {
        for j in (i + 1)..d {
            out.push((shape[i].x - shape[j].x) / face_size);
            out.push((shape[i].y - shape[j].y) / face_size);
        }
    }
    out
}

/// Full feature vector at the current shape estimate: descriptors at every
/// landmark (patch radius = `patch_radius_ratio` of face size) followed by
/// the shape block.
pub fn concat_features(
    image: &GrayImage,
    shape: &Shape,
    face_box: &FaceBox,
    patch_radius_ratio: f64,
) -> Result<FeatureVector> {
    let fs = face_box.face_size();
    let radius = patch_radius_ratio * fs;
    let mut appearance = Vec::with_capacity(shape.len() * PATCH_DIM);
    for p in &shape.points {
        let desc = extract_patch_descriptor(image, *p, radius)?;
        appearance.extend_from_slice(&desc);
    }
    let shape_block = shape_features(shape, fs);
    FeatureVector::from_parts(appearance, shape_block, shape.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use rand::Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = seeds::substream(seed, 900, 0);
        let mut img = GrayImage::new(w, h).unwrap();
        for y in 0..h {
            for x in 0..w {
                img.set(x, y, rng.random_range(0..=200u8));
            }
        }
        img
    }

    /// Reference descriptor written as straight-line scalar code, kept
    /// independent of the production binning loop.
    fn reference_descriptor(image: &GrayImage, cx: i64, cy: i64, radius: f64) -> Vec<f64> {
        let ir = (radius.round() as i64).max(1);
        let mut acc = vec![0.0f64; 128];
        for dy in -ir..=ir {
            for dx in -ir..=ir {
                let gx = image.get_clamped(cx + dx + 1, cy + dy) as f64
                    - image.get_clamped(cx + dx - 1, cy + dy) as f64;
                let gy = image.get_clamped(cx + dx, cy + dy + 1) as f64
                    - image.get_clamped(cx + dx, cy + dy - 1) as f64;
                let mag = (gx * gx + gy * gy).sqrt();
                if mag == 0.0 {
                    continue;
                }
                let u = (dx as f64 + radius) / (radius / 2.0) - 0.5;
                let v = (dy as f64 + radius) / (radius / 2.0) - 0.5;
                let o = (gy.atan2(gx) + std::f64::consts::PI) * 8.0
                    / (2.0 * std::f64::consts::PI);
                // Distribute into the 8 neighboring (cell, cell, bin)
                // triples by explicit enumeration.
                let candidates = [
                    (u.floor(), v.floor(), o.floor()),
                    (u.floor() + 1.0, v.floor(), o.floor()),
                    (u.floor(), v.floor() + 1.0, o.floor()),
                    (u.floor() + 1.0, v.floor() + 1.0, o.floor()),
                    (u.floor(), v.floor(), o.floor() + 1.0),
                    (u.floor() + 1.0, v.floor(), o.floor() + 1.0),
                    (u.floor(), v.floor() + 1.0, o.floor() + 1.0),
                    (u.floor() + 1.0, v.floor() + 1.0, o.floor() + 1.0),
                ];
                for (tu, tv, to) in candidates {
                    if tu < 0.0 || tu > 3.0 || tv < 0.0 || tv > 3.0 {
                        continue;
                    }
                    let w = (1.0 - (u - tu).abs()) * (1.0 - (v - tv).abs())
                        * (1.0 - (o - to).abs());
                    if w <= 0.0 {
                        continue;
                    }
                    let bin = (to as i64).rem_euclid(8) as usize;
                    acc[(tv as usize * 4 + tu as usize) * 8 + bin] += mag * w;
                }
            }
        }
        let n = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < 1e-12 {
            return vec![0.0; 128];
        }
        for v in acc.iter_mut() {
            *v = (*v / n).min(0.2);
        }
        let n2 = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in acc.iter_mut() {
            *v /= n2;
        }
        acc
    }

    #[test]
    fn constant_image_gives_zero_descriptor() {
        let mut img = GrayImage::new(32, 32).unwrap();
        img.fill(140);
        let d = extract_patch_descriptor(&img, Point::new(16.0, 16.0), 6.0).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_step_edge_hits_horizontal_orientation_bins_only() {
        // Intensity constant in y, step in x: gradients point along +x
        // everywhere they are non-zero, i.e. theta = 0, which lands in
        // orientation coordinate 4. Bins 4 (and its wrap partner 0 for
        // theta = pi) are the only legal destinations.
        let mut img = GrayImage::new(40, 40).unwrap();
        for y in 0..40 {
            for x in 0..40 {
                img.set(x, y, if x < 20 { 40 } else { 200 });
            }
        }
        let d = extract_patch_descriptor(&img, Point::new(20.0, 20.0), 8.0).unwrap();
        assert!(d.iter().any(|&v| v > 0.0), "edge must produce energy");
        for cell in 0..16 {
            for bin in 0..8 {
                if bin != 4 && bin != 0 {
                    assert_eq!(
                        d[cell * 8 + bin],
                        0.0,
                        "cell {cell} bin {bin} should be empty"
                    );
                }
            }
        }
    }

    #[test]
    fn descriptor_matches_reference_binning() {
        let img = random_image(48, 48, 31);
        for (cx, cy, r) in [(24.0, 24.0, 7.0), (10.0, 30.0, 5.0), (40.0, 8.0, 9.3)] {
            let d = extract_patch_descriptor(&img, Point::new(cx, cy), r).unwrap();
            let reference = reference_descriptor(&img, cx.round() as i64, cy.round() as i64, r);
            for (i, (a, b)) in d.iter().zip(&reference).enumerate() {
                assert!((a - b).abs() < 1e-9, "entry {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn descriptor_has_length_128_and_unit_norm_cap() {
        let img = random_image(32, 32, 7);
        let d = extract_patch_descriptor(&img, Point::new(16.0, 16.0), 6.0).unwrap();
        assert_eq!(d.len(), PATCH_DIM);
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 1.0 + 1e-9);
        assert!(d.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn descriptor_ignores_constant_intensity_offset() {
        let base = random_image(40, 40, 3);
        let mut shifted = GrayImage::new(40, 40).unwrap();
        for y in 0..40 {
            for x in 0..40 {
                shifted.set(x, y, base.get(x, y) + 50);
            }
        }
        let a = extract_patch_descriptor(&base, Point::new(20.0, 20.0), 7.0).unwrap();
        let b = extract_patch_descriptor(&shifted, Point::new(20.0, 20.0), 7.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn descriptor_translates_with_content() {
        let base = random_image(30, 30, 11);
        // Embed the same content at two offsets inside a larger canvas.
        let mut big = GrayImage::new(90, 90).unwrap();
        big.fill(90);
        for (ox, oy) in [(10usize, 12usize), (45, 40)] {
            for y in 0..30 {
                for x in 0..30 {
                    big.set(ox + x, oy + y, base.get(x, y));
                }
            }
        }
        let a = extract_patch_descriptor(&big, Point::new(25.0, 27.0), 6.0).unwrap();
        let b = extract_patch_descriptor(&big, Point::new(60.0, 55.0), 6.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_features_single_pair_and_length() {
        let s = Shape::new(vec![Point::new(0.0, 0.0), Point::new(3.0, 4.0)]);
        assert_eq!(shape_features(&s, 1.0), vec![-3.0, -4.0]);

        let s3 = Shape::new(vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(0.0, 1.0),
        ]);
        assert_eq!(shape_features(&s3, 1.0).len(), 6);
    }

    #[test]
    fn shape_features_translation_invariant_and_scale_by_face_size() {
        let s = Shape::new(vec![
            Point::new(2.0, 9.0),
            Point::new(-4.0, 1.0),
            Point::new(7.5, 3.25),
        ]);
        let moved = Shape::new(
            s.points
                .iter()
                .map(|p| Point::new(p.x + 5.0, p.y - 7.0))
                .collect(),
        );
        assert_eq!(shape_features(&s, 10.0), shape_features(&moved, 10.0));

        let f1 = shape_features(&s, 1.0);
        let f2 = shape_features(&s, 2.0);
        for (a, b) in f1.iter().zip(&f2) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_features_layout_and_purity() {
        let img = random_image(64, 64, 5);
        let shape = Shape::new(vec![
            Point::new(20.0, 20.0),
            Point::new(40.0, 22.0),
            Point::new(30.0, 45.0),
        ]);
        let fb = FaceBox::new(10.0, 10.0, 44.0, 44.0);
        let f = concat_features(&img, &shape, &fb, 0.14).unwrap();
        assert_eq!(f.appearance().len(), 3 * PATCH_DIM);
        assert_eq!(f.shape_block().len(), 6);
        assert_eq!(f.len(), feature_len(3));
        assert!(f.as_slice().iter().all(|v| v.is_finite()));

        let g = concat_features(&img, &shape, &fb, 0.14).unwrap();
        assert_eq!(f, g);

        // Per-landmark block slicing agrees with the flat layout.
        let d1 = extract_patch_descriptor(&img, shape[1], 0.14 * fb.face_size()).unwrap();
        assert_eq!(f.appearance_of(1), &d1[..]);
    }

    #[test]
    fn zeroing_shape_block_keeps_dims() {
        let img = random_image(64, 64, 6);
        let shape = Shape::new(vec![Point::new(20.0, 20.0), Point::new(40.0, 40.0)]);
        let fb = FaceBox::new(0.0, 0.0, 64.0, 64.0);
        let mut f = concat_features(&img, &shape, &fb, 0.14).unwrap();
        let app = f.appearance().to_vec();
        f.zero_shape_block();
        assert_eq!(f.len(), feature_len(2));
        assert_eq!(f.appearance(), &app[..]);
        assert!(f.shape_block().iter().all(|&v| v == 0.0));
    }
}
