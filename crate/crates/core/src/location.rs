//! Location update: landmark coordinate regression on visibility-weighted
//! features, and the masked weighted least-squares fit that tolerates
//! samples with missing landmark annotations.
//!
//! The per-sample weight matrix is diagonal with one bit per landmark
//! repeated over its two coordinate rows, so the regressor's rows
//! decouple: each landmark's (x, y) row pair is fit on exactly the
//! samples where that landmark is annotated. Landmarks with identical
//! annotation patterns share one normal-equations solve.

use crate::error::{Error, Result};
use crate::features::{FeatureVector, PATCH_DIM};
use crate::linalg;
use crate::shape::AnnotationMask;
use crate::visibility::VisibilityProbs;
use ndarray::{Array2, ArrayView1};
use std::collections::BTreeMap;

/// Linear regressor mapping weighted features to a flat coordinate update
/// (interleaved x, y per landmark).
#[derive(Debug, Clone, PartialEq)]
pub struct LocationRegressor {
    /// 2 D_l x F matrix.
    pub r: Array2<f64>,
}

/// Scale each landmark's appearance block by `p_d^exponent`; the shape
/// block passes through unchanged.
pub fn weight_features_with_exponent(
    features: &FeatureVector,
    p: &VisibilityProbs,
    exponent: f64,
) -> Result<FeatureVector> {
    let d = features.landmarks();
    if p.len() != d {
        return Err(Error::DimensionMismatch {
            context: "visibility weights vs feature landmarks",
            expected: d,
            actual: p.len(),
        });
    }
    let mut out = features.clone();
    let values = out.values_mut();
    for l in 0..d {
        let w = p.probs[l].powf(exponent);
        if w != 1.0 {
            for v in &mut values[l * PATCH_DIM..(l + 1) * PATCH_DIM] {
                *v *= w;
            }
        }
    }
    Ok(out)
}

/// Square-root visibility weighting, the default exponent.
pub fn weight_features(features: &FeatureVector, p: &VisibilityProbs) -> Result<FeatureVector> {
    weight_features_with_exponent(features, p, 0.5)
}

/// Predicted coordinate update `R (sqrt(p) o psi)`.
pub fn predict_update(
    features: &FeatureVector,
    p: &VisibilityProbs,
    r: &LocationRegressor,
) -> Result<Vec<f64>> {
    let weighted = weight_features(features, p)?;
    predict_on_weighted(&weighted, r)
}

/// Apply the regressor to an already-weighted feature vector.
pub fn predict_on_weighted(weighted: &FeatureVector, r: &LocationRegressor) -> Result<Vec<f64>> {
    if weighted.len() != r.r.ncols() {
        return Err(Error::DimensionMismatch {
            context: "location regressor input",
            expected: r.r.ncols(),
            actual: weighted.len(),
        });
    }
    let psi = ArrayView1::from(weighted.as_slice());
    Ok(r.r.dot(&psi).to_vec())
}

/// Fit the location regressor on visibility-weighted features with
/// per-sample annotation masks. Targets are flat interleaved coordinate
/// updates; entries of unannotated landmarks carry zero weight and their
/// stored values are irrelevant.
pub fn train_location_regressor(
    features: &[FeatureVector],
    probs: &[VisibilityProbs],
    targets: &[Vec<f64>],
    masks: &[AnnotationMask],
    ridge: f64,
) -> Result<LocationRegressor> {
    train_location_regressor_with_exponent(features, probs, targets, masks, ridge, 0.5)
}

pub fn train_location_regressor_with_exponent(
    features: &[FeatureVector],
    probs: &[VisibilityProbs],
    targets: &[Vec<f64>],
    masks: &[AnnotationMask],
    ridge: f64,
    exponent: f64,
) -> Result<LocationRegressor> {
    let n = features.len();
    if n == 0 {
        return Err(Error::EmptyInput("location training set is empty"));
    }
    if probs.len() != n || targets.len() != n || masks.len() != n {
        return Err(Error::DimensionMismatch {
            context: "location training sequences",
            expected: n,
            actual: probs.len().min(targets.len()).min(masks.len()),
        });
    }
    let d = features[0].landmarks();
    let f = features[0].len();
    for i in 0..n {
        if features[i].len() != f
            || probs[i].len() != d
            || targets[i].len() != 2 * d
            || masks[i].len() != d
        {
            return Err(Error::DimensionMismatch {
                context: "location sample dimensions",
                expected: f,
                actual: features[i].len(),
            });
        }
    }

    // Weighted design matrix shared by every landmark group.
    let mut x = Array2::zeros((n, f));
    for (i, (feat, p)) in features.iter().zip(probs).enumerate() {
        let weighted = weight_features_with_exponent(feat, p, exponent)?;
        x.row_mut(i).assign(&ArrayView1::from(weighted.as_slice()));
    }

    // Landmarks with the same annotation column share the same subsample
    // and therefore the same Gram matrix; group them.
    let mut groups: BTreeMap<Vec<bool>, Vec<usize>> = BTreeMap::new();
    for l in 0..d {
        let signature: Vec<bool> = masks.iter().map(|m| m[l]).collect();
        if !signature.iter().any(|&b| b) {
            return Err(Error::LandmarkNeverAnnotated { landmark: l });
        }
        groups.entry(signature).or_default().push(l);
    }

    let mut r = Array2::zeros((2 * d, f));
    for (signature, landmarks) in &groups {
        let rows: Vec<usize> = signature
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect();
        let x_sub = x.select(ndarray::Axis(0), &rows);
        let mut y_sub = Array2::zeros((rows.len(), 2 * landmarks.len()));
        for (c, &l) in landmarks.iter().enumerate() {
            for (rr, &i) in rows.iter().enumerate() {
                y_sub[[rr, 2 * c]] = targets[i][2 * l];
                y_sub[[rr, 2 * c + 1]] = targets[i][2 * l + 1];
            }
        }
        let solved = linalg::ridge_regression(&x_sub, &y_sub, ridge)?;
        for (c, &l) in landmarks.iter().enumerate() {
            r.row_mut(2 * l).assign(&solved.row(2 * c));
            r.row_mut(2 * l + 1).assign(&solved.row(2 * c + 1));
        }
    }
    Ok(LocationRegressor { r })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use rand::Rng;

    fn random_feature<R: Rng>(d: usize, rng: &mut R) -> FeatureVector {
        let appearance: Vec<f64> = (0..d * PATCH_DIM)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let shape: Vec<f64> = (0..d * (d - 1)).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureVector::from_parts(appearance, shape, d).unwrap()
    }

    #[test]
    fn unit_weights_are_identity() {
        let mut rng = seeds::substream(1, 0x10c, 0);
        let f = random_feature(3, &mut rng);
        let p = VisibilityProbs::ones(3);
        assert_eq!(weight_features(&f, &p).unwrap(), f);
    }

    #[test]
    fn zero_weight_clears_one_appearance_block_only() {
        let mut rng = seeds::substream(2, 0x10c, 0);
        let f = random_feature(3, &mut rng);
        let p = VisibilityProbs::from_vec(vec![1.0, 0.0, 1.0]).unwrap();
        let w = weight_features(&f, &p).unwrap();
        assert_eq!(w.appearance_of(0), f.appearance_of(0));
        assert!(w.appearance_of(1).iter().all(|&v| v == 0.0));
        assert_eq!(w.appearance_of(2), f.appearance_of(2));
        assert_eq!(w.shape_block(), f.shape_block());
    }

    #[test]
    fn quarter_probability_halves_the_block() {
        let mut rng = seeds::substream(3, 0x10c, 0);
        let f = random_feature(2, &mut rng);
        let p = VisibilityProbs::from_vec(vec![0.25, 1.0]).unwrap();
        let w = weight_features(&f, &p).unwrap();
        for (a, b) in w.appearance_of(0).iter().zip(f.appearance_of(0)) {
            assert_eq!(*a, b * 0.5);
        }
    }

    #[test]
    fn lower_visibility_never_raises_magnitudes() {
        let mut rng = seeds::substream(4, 0x10c, 0);
        let f = random_feature(4, &mut rng);
        let hi = VisibilityProbs::from_vec(vec![0.9, 0.8, 0.7, 0.6]).unwrap();
        let lo = VisibilityProbs::from_vec(vec![0.5, 0.8, 0.2, 0.6]).unwrap();
        let wh = weight_features(&f, &hi).unwrap();
        let wl = weight_features(&f, &lo).unwrap();
        for (a, b) in wl.appearance().iter().zip(wh.appearance()) {
            assert!(a.abs() <= b.abs() + 1e-15);
        }
    }

    #[test]
    fn predict_matches_triple_loop_oracle() {
        let mut rng = seeds::substream(5, 0x10c, 0);
        let d = 3;
        let f = random_feature(d, &mut rng);
        let p = VisibilityProbs::from_vec(vec![0.9, 0.5, 0.3]).unwrap();
        let cols = f.len();
        let r = LocationRegressor {
            r: Array2::from_shape_fn((2 * d, cols), |_| rng.random_range(-0.2..0.2)),
        };
        let got = predict_update(&f, &p, &r).unwrap();

        // Oracle: explicit loops over raw slices.
        let mut weighted = f.as_slice().to_vec();
        for l in 0..d {
            let w = p.probs[l].sqrt();
            for v in &mut weighted[l * PATCH_DIM..(l + 1) * PATCH_DIM] {
                *v *= w;
            }
        }
        for row in 0..2 * d {
            let mut acc = 0.0;
            for col in 0..cols {
                acc += r.r[[row, col]] * weighted[col];
            }
            assert!((got[row] - acc).abs() < 1e-10, "row {row}");
        }
    }

    #[test]
    fn zero_inputs_give_zero_updates() {
        let d = 2;
        let f = FeatureVector::from_parts(
            vec![0.0; d * PATCH_DIM],
            vec![0.0; d * (d - 1)],
            d,
        )
        .unwrap();
        let p = VisibilityProbs::ones(d);
        let mut rng = seeds::substream(6, 0x10c, 0);
        let r = LocationRegressor {
            r: Array2::from_shape_fn((2 * d, f.len()), |_| rng.random_range(-1.0..1.0)),
        };
        assert!(predict_update(&f, &p, &r)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));

        let fr = random_feature(d, &mut rng);
        let rz = LocationRegressor {
            r: Array2::zeros((2 * d, fr.len())),
        };
        assert!(predict_update(&fr, &p, &rz)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn predict_is_linear_in_weighted_features() {
        let mut rng = seeds::substream(7, 0x10c, 0);
        let d = 2;
        let fa = random_feature(d, &mut rng);
        let fb = random_feature(d, &mut rng);
        let r = LocationRegressor {
            r: Array2::from_shape_fn((2 * d, fa.len()), |_| rng.random_range(-0.5..0.5)),
        };
        let sum = FeatureVector::from_parts(
            fa.appearance()
                .iter()
                .zip(fb.appearance())
                .map(|(x, y)| x + y)
                .collect(),
            fa.shape_block()
                .iter()
                .zip(fb.shape_block())
                .map(|(x, y)| x + y)
                .collect(),
            d,
        )
        .unwrap();
        let pa = predict_on_weighted(&fa, &r).unwrap();
        let pb = predict_on_weighted(&fb, &r).unwrap();
        let ps = predict_on_weighted(&sum, &r).unwrap();
        for i in 0..2 * d {
            assert!((ps[i] - pa[i] - pb[i]).abs() < 1e-10);
        }
        let scaled = FeatureVector::from_parts(
            fa.appearance().iter().map(|v| 3.0 * v).collect(),
            fa.shape_block().iter().map(|v| 3.0 * v).collect(),
            d,
        )
        .unwrap();
        let psc = predict_on_weighted(&scaled, &r).unwrap();
        for i in 0..2 * d {
            assert!((psc[i] - 3.0 * pa[i]).abs() < 1e-10);
        }
    }

    fn training_fixture(
        n: usize,
        d: usize,
        seed: u64,
    ) -> (Vec<FeatureVector>, Vec<VisibilityProbs>, Vec<Vec<f64>>) {
        let mut rng = seeds::substream(seed, 0x10d, 0);
        let feats: Vec<FeatureVector> = (0..n).map(|_| random_feature(d, &mut rng)).collect();
        let probs: Vec<VisibilityProbs> = (0..n)
            .map(|_| {
                VisibilityProbs::from_vec((0..d).map(|_| rng.random_range(0.3..1.0)).collect())
                    .unwrap()
            })
            .collect();
        let targets: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..2 * d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        (feats, probs, targets)
    }

    #[test]
    fn full_masks_match_gauss_jordan_oracle() {
        let d = 2;
        let n = 300;
        let (feats, probs, targets) = training_fixture(n, d, 8);
        let masks = vec![vec![true; d]; n];
        let got = train_location_regressor(&feats, &probs, &targets, &masks, 0.0).unwrap();

        // Oracle: plain normal equations on the weighted design matrix,
        // solved by Gauss-Jordan inversion.
        let f = feats[0].len();
        let mut x = Array2::zeros((n, f));
        let mut y = Array2::zeros((n, 2 * d));
        for i in 0..n {
            let w = weight_features(&feats[i], &probs[i]).unwrap();
            for j in 0..f {
                x[[i, j]] = w.as_slice()[j];
            }
            for j in 0..2 * d {
                y[[i, j]] = targets[i][j];
            }
        }
        let xtx = x.t().dot(&x);
        let xty = x.t().dot(&y);
        let oracle = invert(&xtx).dot(&xty); // f x 2d
        let num = (&got.r - &oracle.t()).mapv(f64::abs).sum();
        let den = oracle.mapv(f64::abs).sum();
        assert!(num / den < 1e-6, "relative deviation {}", num / den);
    }

    #[test]
    fn masked_targets_cannot_influence_the_fit() {
        let d = 3;
        let n = 40;
        let (feats, probs, mut targets) = training_fixture(n, d, 9);
        // Landmark 1 unannotated in the odd samples.
        let masks: Vec<Vec<bool>> = (0..n).map(|i| vec![true, i % 2 == 0, true]).collect();
        let base =
            train_location_regressor(&feats, &probs, &targets, &masks, 1e-3).unwrap();
        for (i, t) in targets.iter_mut().enumerate() {
            if i % 2 == 1 {
                t[2] = 1e9;
                t[3] = -1e9;
            }
        }
        let corrupted =
            train_location_regressor(&feats, &probs, &targets, &masks, 1e-3).unwrap();
        assert_eq!(base, corrupted);
    }

    #[test]
    fn rows_decouple_per_landmark() {
        let d = 3;
        let n = 50;
        let (feats, probs, targets) = training_fixture(n, d, 10);
        let mut rng = seeds::substream(10, 0x10e, 0);
        let masks: Vec<Vec<bool>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(0..4) != 0).collect())
            .collect();
        let joint = train_location_regressor(&feats, &probs, &targets, &masks, 1e-3).unwrap();

        // Reference: solve each landmark's row pair alone on its
        // annotated subsample, through the generic solver.
        let f = feats[0].len();
        for l in 0..d {
            let rows: Vec<usize> = (0..n).filter(|&i| masks[i][l]).collect();
            assert!(!rows.is_empty());
            let mut x = Array2::zeros((rows.len(), f));
            let mut y = Array2::zeros((rows.len(), 2));
            for (rr, &i) in rows.iter().enumerate() {
                let w = weight_features(&feats[i], &probs[i]).unwrap();
                x.row_mut(rr).assign(&ArrayView1::from(w.as_slice()));
                y[[rr, 0]] = targets[i][2 * l];
                y[[rr, 1]] = targets[i][2 * l + 1];
            }
            let solo = crate::linalg::ridge_regression(&x, &y, 1e-3).unwrap();
            for c in 0..f {
                assert!((joint.r[[2 * l, c]] - solo[[0, c]]).abs() < 1e-9);
                assert!((joint.r[[2 * l + 1, c]] - solo[[1, c]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn interpolating_system_has_zero_weighted_residual() {
        // More samples than active dimensions, but targets generated by an
        // exact linear map: residual must vanish.
        let d = 2;
        let n = 600;
        let mut rng = seeds::substream(11, 0x10f, 0);
        let feats: Vec<FeatureVector> = (0..n).map(|_| random_feature(d, &mut rng)).collect();
        let probs: Vec<VisibilityProbs> = (0..n)
            .map(|_| {
                VisibilityProbs::from_vec((0..d).map(|_| rng.random_range(0.4..1.0)).collect())
                    .unwrap()
            })
            .collect();
        let f = feats[0].len();
        let true_r = Array2::from_shape_fn((2 * d, f), |_| rng.random_range(-0.3..0.3));
        let targets: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let w = weight_features(&feats[i], &probs[i]).unwrap();
                true_r.dot(&ArrayView1::from(w.as_slice())).to_vec()
            })
            .collect();
        let masks = vec![vec![true; d]; n];
        let fit = train_location_regressor(&feats, &probs, &targets, &masks, 0.0).unwrap();
        let mut max_resid = 0.0f64;
        for i in 0..n {
            let pred = predict_update(&feats[i], &probs[i], &fit).unwrap();
            for j in 0..2 * d {
                max_resid = max_resid.max((pred[j] - targets[i][j]).abs());
            }
        }
        assert!(max_resid < 1e-7, "max residual {max_resid}");
    }

    #[test]
    fn never_annotated_landmark_is_reported() {
        let d = 2;
        let n = 5;
        let (feats, probs, targets) = training_fixture(n, d, 12);
        let masks: Vec<Vec<bool>> = vec![vec![true, false]; n];
        let err = train_location_regressor(&feats, &probs, &targets, &masks, 1e-3).unwrap_err();
        match err {
            Error::LandmarkNeverAnnotated { landmark } => assert_eq!(landmark, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    /// Local Gauss-Jordan inverse for the oracle comparison.
    fn invert(a: &Array2<f64>) -> Array2<f64> {
        let n = a.nrows();
        let mut m = a.clone();
        let mut inv = Array2::eye(n);
        for col in 0..n {
            let mut piv = col;
            for r in col + 1..n {
                if m[[r, col]].abs() > m[[piv, col]].abs() {
                    piv = r;
                }
            }
            for c in 0..n {
                m.swap([col, c], [piv, c]);
                inv.swap([col, c], [piv, c]);
            }
            let dl = m[[col, col]];
            for c in 0..n {
                m[[col, c]] /= dl;
                inv[[col, c]] /= dl;
            }
            for r in 0..n {
                if r != col {
                    let f = m[[r, col]];
                    for c in 0..n {
                        m[[r, c]] -= f * m[[col, c]];
                        inv[[r, c]] -= f * inv[[col, c]];
                    }
                }
            }
        }
        inv
    }
}
