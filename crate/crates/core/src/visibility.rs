//! Visibility estimation: the Bernoulli distribution over occlusion
//! patterns, expected prior loss (exhaustive or Monte Carlo with a fixed
//! sample set), the constrained update objective with its analytic
//! gradient, projected gradient inference, and the regressor fit.
//!
//! The inference problem per landmark set is
//!
//! ```text
//! min_dp ||dp - T psi||^2 + lambda * E_{c ~ P(c; p_prev + dp)}[Loss(c)]
//! s.t.   0 <= p_prev + dp <= 1
//! ```
//!
//! With lambda = 0 the minimizer is the box-clamped regression response and
//! is computed in closed form; otherwise projected gradient descent with
//! backtracking runs against a sample set drawn once per call, making the
//! objective deterministic during descent.

use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::linalg;
use crate::occlusion::OcclusionPrior;
use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Per-landmark probability of being visible.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityProbs {
    pub probs: Vec<f64>,
}

impl VisibilityProbs {
    /// The cascade's starting state: everything visible.
    pub fn ones(d: usize) -> Self {
        Self {
            probs: vec![1.0; d],
        }
    }

    pub fn from_vec(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::NonFinite("visibility probability outside [0,1]"));
        }
        Ok(Self { probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn in_unit_box(&self) -> bool {
        self.probs.iter().all(|p| (0.0..=1.0).contains(p))
    }
}

/// Linear regressor mapping a feature vector to a visibility update.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityRegressor {
    /// D_l x F matrix.
    pub t: Array2<f64>,
}

impl VisibilityRegressor {
    pub fn predict(&self, features: &FeatureVector) -> Result<Array1<f64>> {
        if features.len() != self.t.ncols() {
            return Err(Error::DimensionMismatch {
                context: "visibility regressor input",
                expected: self.t.ncols(),
                actual: features.len(),
            });
        }
        let psi = ndarray::ArrayView1::from(features.as_slice());
        Ok(self.t.dot(&psi))
    }
}

/// Knobs of the constrained inference step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    /// Weight of the occlusion-pattern term.
    pub lambda: f64,
    /// Monte Carlo sample count K.
    pub mc_samples: usize,
    /// Landmark counts up to this use exact enumeration instead of MC.
    pub exhaustive_threshold: usize,
    pub step_init: f64,
    pub step_shrink: f64,
    pub max_iters: usize,
    /// Stop when the infinity norm of the iterate change drops below this.
    pub convergence_tol: f64,
    /// Probabilities are clamped to [eps, 1-eps] when evaluating the
    /// expectation; its gradient has 1/p and 1/(1-p) factors.
    pub prob_clamp_eps: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            lambda: 0.001,
            mc_samples: 5000,
            exhaustive_threshold: 12,
            step_init: 0.1,
            step_shrink: 0.5,
            max_iters: 200,
            convergence_tol: 1e-5,
            prob_clamp_eps: 1e-6,
        }
    }
}

/// Probability of the binary pattern `c` under independent per-landmark
/// visibility probabilities `p`, computed in log space.
pub fn bernoulli_prob(c: &[u8], p: &VisibilityProbs) -> Result<f64> {
    if c.len() != p.len() {
        return Err(Error::DimensionMismatch {
            context: "bernoulli pattern vs probabilities",
            expected: p.len(),
            actual: c.len(),
        });
    }
    let mut log_p = 0.0f64;
    for (&bit, &q) in c.iter().zip(&p.probs) {
        // Branching keeps 0 * ln(0) out of the sum entirely.
        log_p += if bit == 1 { q.ln() } else { (1.0 - q).ln() };
    }
    Ok(log_p.exp())
}

/// A fixed set of occlusion patterns with precomputed prior losses, used
/// to evaluate `E[Loss]` and its gradient many times during one descent.
/// Exhaustive sets cover all `2^D` patterns with `scale = 1`; Monte Carlo
/// sets hold `K` uniform patterns with `scale = 2^D / K` (the estimator's
/// importance constant).
pub struct LossExpectation {
    patterns: Array2<f64>,
    losses: Array1<f64>,
    scale: f64,
}

impl LossExpectation {
    /// All `2^d` patterns. Rejected above `max_landmarks` (enumeration is
    /// exponential); callers should fall back to [`LossExpectation::monte_carlo`].
    pub fn exhaustive(prior: &OcclusionPrior, max_landmarks: usize) -> Result<Self> {
        let d = prior.landmarks();
        if d > max_landmarks {
            return Err(Error::ExhaustiveTooLarge(d, max_landmarks));
        }
        let n = 1usize << d;
        let mut patterns = Array2::zeros((n, d));
        for k in 0..n {
            for bit in 0..d {
                patterns[[k, bit]] = ((k >> bit) & 1) as f64;
            }
        }
        let losses = prior.batch_loss(&patterns);
        Ok(Self {
            patterns,
            losses,
            scale: 1.0,
        })
    }

    /// `k` patterns with every bit fair and independent.
    pub fn monte_carlo<R: Rng>(prior: &OcclusionPrior, k: usize, rng: &mut R) -> Self {
        let d = prior.landmarks();
        let patterns =
            Array2::from_shape_fn((k.max(1), d), |_| if rng.random::<bool>() { 1.0 } else { 0.0 });
        let losses = prior.batch_loss(&patterns);
        Self {
            patterns,
            losses,
            scale: 2f64.powi(d as i32) / k.max(1) as f64,
        }
    }

    /// Exhaustive set when the landmark count permits, Monte Carlo
    /// otherwise. This is the policy used by inference.
    pub fn for_config<R: Rng>(
        prior: &OcclusionPrior,
        config: &InferenceConfig,
        rng: &mut R,
    ) -> Self {
        match Self::exhaustive(prior, config.exhaustive_threshold) {
            Ok(e) => e,
            Err(_) => Self::monte_carlo(prior, config.mc_samples, rng),
        }
    }

    pub fn landmarks(&self) -> usize {
        self.patterns.ncols()
    }

    /// Pattern probabilities under `p` (clamped to the eps box), all at
    /// once: `log P_k = patterns·(ln p - ln(1-p)) + sum ln(1-p)`.
    fn pattern_probs(&self, p: &[f64], eps: f64) -> Array1<f64> {
        let d = self.landmarks();
        debug_assert_eq!(p.len(), d);
        let mut logit = Array1::zeros(d);
        let mut base = 0.0;
        for i in 0..d {
            let q = p[i].clamp(eps, 1.0 - eps);
            logit[i] = q.ln() - (1.0 - q).ln();
            base += (1.0 - q).ln();
        }
        let mut log_probs = self.patterns.dot(&logit);
        log_probs.mapv_inplace(|v| (v + base).exp());
        log_probs
    }

    /// `E[Loss]` at visibility vector `p`.
    pub fn value(&self, p: &[f64], eps: f64) -> f64 {
        let probs = self.pattern_probs(p, eps);
        self.scale * self.losses.dot(&probs)
    }

    /// `E[Loss]` and its gradient with respect to `p`. Writing
    /// `a_k = Loss_k P_k`, the d-th partial is
    /// `scale * ((C^T a)_d / p_d - (sum(a) - (C^T a)_d) / (1 - p_d))`.
    pub fn value_and_gradient(&self, p: &[f64], eps: f64) -> (f64, Vec<f64>) {
        let probs = self.pattern_probs(p, eps);
        let a = &self.losses * &probs;
        let sum_a = a.sum();
        let cta = self.patterns.t().dot(&a);
        let mut grad = vec![0.0; p.len()];
        for i in 0..p.len() {
            let q = p[i].clamp(eps, 1.0 - eps);
            grad[i] = self.scale * (cta[i] / q - (sum_a - cta[i]) / (1.0 - q));
        }
        (self.scale * sum_a, grad)
    }
}

/// Expected prior loss by full enumeration. Fails for landmark counts
/// above the default exhaustive threshold; use the Monte Carlo estimator
/// there instead.
pub fn expected_loss_exact(p: &VisibilityProbs, prior: &OcclusionPrior) -> Result<f64> {
    let threshold = InferenceConfig::default().exhaustive_threshold;
    let exp = LossExpectation::exhaustive(prior, threshold)?;
    if p.len() != prior.landmarks() {
        return Err(Error::DimensionMismatch {
            context: "probabilities vs prior",
            expected: prior.landmarks(),
            actual: p.len(),
        });
    }
    Ok(exp.value(&p.probs, 0.0))
}

/// Monte Carlo estimate of the expected prior loss with `k` fresh samples.
pub fn expected_loss_mc<R: Rng>(
    p: &VisibilityProbs,
    prior: &OcclusionPrior,
    k: usize,
    rng: &mut R,
) -> Result<f64> {
    if p.len() != prior.landmarks() {
        return Err(Error::DimensionMismatch {
            context: "probabilities vs prior",
            expected: prior.landmarks(),
            actual: p.len(),
        });
    }
    let exp = LossExpectation::monte_carlo(prior, k, rng);
    Ok(exp.value(&p.probs, 0.0))
}

fn objective_gradient_inner(
    delta_p: &[f64],
    p_prev: &[f64],
    t_psi: &[f64],
    lambda: f64,
    samples: &LossExpectation,
    eps: f64,
) -> Result<(f64, Vec<f64>)> {
    let d = delta_p.len();
    let mut obj = 0.0;
    let mut grad = vec![0.0; d];
    for i in 0..d {
        let r = delta_p[i] - t_psi[i];
        obj += r * r;
        grad[i] = 2.0 * r;
    }
    if lambda > 0.0 {
        let p: Vec<f64> = (0..d).map(|i| p_prev[i] + delta_p[i]).collect();
        let (e, eg) = samples.value_and_gradient(&p, eps);
        obj += lambda * e;
        for i in 0..d {
            grad[i] += lambda * eg[i];
        }
    }
    if !obj.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("visibility objective"));
    }
    Ok((obj, grad))
}

/// Objective of the constrained update problem and its gradient with
/// respect to `delta_p`, evaluated on the fixed sample set.
pub fn objective_and_gradient(
    delta_p: &[f64],
    p_prev: &VisibilityProbs,
    features: &FeatureVector,
    t: &VisibilityRegressor,
    config: &InferenceConfig,
    samples: &LossExpectation,
) -> Result<(f64, Vec<f64>)> {
    let t_psi = t.predict(features)?;
    objective_gradient_inner(
        delta_p,
        &p_prev.probs,
        t_psi.as_slice().expect("contiguous"),
        config.lambda,
        samples,
        config.prob_clamp_eps,
    )
}

/// Result of one constrained inference call.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityUpdate {
    pub probs: VisibilityProbs,
    /// False when max_iters ran out before the iterate settled.
    pub converged: bool,
    /// Objective value after every accepted step, first entry at the
    /// starting point. Non-increasing by construction.
    pub objective_trace: Vec<f64>,
}

#[inline]
fn project(delta: &mut [f64], p_prev: &[f64]) {
    for i in 0..delta.len() {
        delta[i] = delta[i].clamp(-p_prev[i], 1.0 - p_prev[i]);
    }
}

/// Minimize the visibility update objective over the box
/// `0 <= p_prev + dp <= 1` and return the updated probabilities.
///
/// The Monte Carlo sample set (when used) is drawn once from `rng` at the
/// start; descent runs on that fixed set. With `lambda = 0` the exact
/// solution `clamp(p_prev + T psi)` is returned directly.
pub fn infer_visibility_update<R: Rng>(
    p_prev: &VisibilityProbs,
    features: &FeatureVector,
    t: &VisibilityRegressor,
    prior: &OcclusionPrior,
    config: &InferenceConfig,
    rng: &mut R,
) -> Result<VisibilityUpdate> {
    let d = p_prev.len();
    let t_psi = t.predict(features)?;
    let t_psi = t_psi.as_slice().expect("contiguous").to_vec();
    if t_psi.len() != d {
        return Err(Error::DimensionMismatch {
            context: "regressor output vs probabilities",
            expected: d,
            actual: t_psi.len(),
        });
    }

    if config.lambda == 0.0 {
        // Unconstrained minimizer of the quadratic, clamped to the box:
        // exact, no sampling, no descent.
        let probs: Vec<f64> = (0..d)
            .map(|i| (p_prev.probs[i] + t_psi[i]).clamp(0.0, 1.0))
            .collect();
        let delta: Vec<f64> = (0..d).map(|i| probs[i] - p_prev.probs[i]).collect();
        let obj: f64 = (0..d).map(|i| (delta[i] - t_psi[i]).powi(2)).sum();
        return Ok(VisibilityUpdate {
            probs: VisibilityProbs { probs },
            converged: true,
            objective_trace: vec![obj],
        });
    }

    let samples = LossExpectation::for_config(prior, config, rng);
    if samples.landmarks() != d {
        return Err(Error::DimensionMismatch {
            context: "prior landmarks vs probabilities",
            expected: d,
            actual: samples.landmarks(),
        });
    }
    // Warm start at the projected regression response; with small lambda
    // the optimum is nearby.
    let mut delta = t_psi.clone();
    project(&mut delta, &p_prev.probs);
    let eps = config.prob_clamp_eps;
    let (mut obj, mut grad) = objective_gradient_inner(
        &delta,
        &p_prev.probs,
        &t_psi,
        config.lambda,
        &samples,
        eps,
    )?;
    let mut trace = vec![obj];
    let mut converged = false;
    for _ in 0..config.max_iters {
        // Backtracking projected step: shrink until the objective drops.
        let mut step = config.step_init;
        let mut accepted = None;
        for _ in 0..60 {
            let mut cand: Vec<f64> = (0..d).map(|i| delta[i] - step * grad[i]).collect();
            project(&mut cand, &p_prev.probs);
            let (cand_obj, cand_grad) = objective_gradient_inner(
                &cand,
                &p_prev.probs,
                &t_psi,
                config.lambda,
                &samples,
                eps,
            )?;
            if cand_obj < obj {
                accepted = Some((cand, cand_obj, cand_grad));
                break;
            }
            step *= config.step_shrink;
        }
        let Some((cand, cand_obj, cand_grad)) = accepted else {
            // No descent at any step size: numerically stationary.
            converged = true;
            break;
        };
        debug_assert!(cand_obj <= obj);
        let max_change = delta
            .iter()
            .zip(&cand)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        delta = cand;
        obj = cand_obj;
        grad = cand_grad;
        trace.push(obj);
        if max_change < config.convergence_tol {
            converged = true;
            break;
        }
    }
    let probs: Vec<f64> = (0..d)
        .map(|i| (p_prev.probs[i] + delta[i]).clamp(0.0, 1.0))
        .collect();
    Ok(VisibilityUpdate {
        probs: VisibilityProbs { probs },
        converged,
        objective_trace: trace,
    })
}

/// Fit the visibility regressor `T` minimizing
/// `sum_i ||dp_i - T psi_i||^2 + ridge_F ||T||_F^2` in closed form.
pub fn train_visibility_regressor(
    features: &[FeatureVector],
    targets: &[Vec<f64>],
    ridge: f64,
) -> Result<VisibilityRegressor> {
    if features.is_empty() {
        return Err(Error::EmptyInput("visibility training set is empty"));
    }
    if features.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            context: "visibility features vs targets",
            expected: features.len(),
            actual: targets.len(),
        });
    }
    let f = features[0].len();
    let d = targets[0].len();
    let n = features.len();
    let mut x = Array2::zeros((n, f));
    let mut y = Array2::zeros((n, d));
    for (i, (feat, tgt)) in features.iter().zip(targets).enumerate() {
        if feat.len() != f || tgt.len() != d {
            return Err(Error::DimensionMismatch {
                context: "visibility sample dimensions",
                expected: f,
                actual: feat.len(),
            });
        }
        x.row_mut(i)
            .assign(&ndarray::ArrayView1::from(feat.as_slice()));
        y.row_mut(i).assign(&ndarray::ArrayView1::from(&tgt[..]));
    }
    let t = linalg::ridge_regression(&x, &y, ridge)?;
    Ok(VisibilityRegressor { t })
}
