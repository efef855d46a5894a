//! Soft-decision mapping from score to NLoS probability.
//!
//! A site survey supplies score samples and the average NLoS probability π.
//! The score density is modelled by a K-component Gaussian mixture whose means
//! are kept sorted; the lower ⌈K/2⌉ components carry total mass 1 − π and the
//! upper ones carry π. The mixture posterior of the upper group is then
//! smoothed by a four-parameter monotone sigmoid, which is the final mapping.

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default mixture order.
pub const DEFAULT_COMPONENTS: usize = 8;
/// Default log-likelihood tolerance for the constrained EM.
pub const DEFAULT_CEM_EPS: f64 = 1e-3;
/// Default iteration cap for the constrained EM.
pub const DEFAULT_CEM_MAX_ITER: usize = 500;
/// Component standard deviations are floored at this fraction of the sample std.
pub const SIGMA_FLOOR_RATIO: f64 = 1e-6;
/// Aggregate responsibility below which a component counts as empty.
pub const MIN_RESPONSIBILITY: f64 = 1e-12;
/// Iteration cap for the sigmoid fit.
pub const SIGMOID_MAX_ITER: usize = 500;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SdError {
    #[error("invalid survey prior: {0}")]
    InvalidPrior(String),
    #[error("need at least {need} score samples, got {have}")]
    InsufficientSamples { need: usize, have: usize },
    #[error("invalid component count {0} (need K >= 2)")]
    InvalidComponents(usize),
    #[error("mixture component collapsed (sample spread is zero or non-finite)")]
    DegenerateComponent,
    #[error("component {component} lost all responsibility at iteration {iteration}")]
    EmptyResponsibility { component: usize, iteration: usize },
    #[error("sigmoid fit diverged")]
    FitDiverged,
    #[error("need at least 4 distinct score points for the sigmoid fit")]
    TooFewPoints,
}

/// Site-survey statistics: score samples and the average NLoS probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyPrior {
    pub score_samples: Vec<f64>,
    pub pi: f64,
}

impl SurveyPrior {
    pub fn new(score_samples: Vec<f64>, pi: f64) -> Result<Self, SdError> {
        if !(pi > 0.0 && pi < 1.0) {
            return Err(SdError::InvalidPrior(format!("pi must lie in (0, 1), got {pi}")));
        }
        if score_samples.iter().any(|s| !s.is_finite()) {
            return Err(SdError::InvalidPrior("non-finite score sample".into()));
        }
        Ok(Self { score_samples, pi })
    }
}

/// Gaussian mixture with ascending means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

fn log_normal_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    -0.5 * z * z - std.ln() - LN_SQRT_2PI
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl GmmParams {
    pub fn num_components(&self) -> usize {
        self.means.len()
    }

    /// Number of LoS-like components, ⌈K/2⌉.
    pub fn los_components(&self) -> usize {
        self.num_components().div_ceil(2)
    }

    fn log_terms(&self, rho: f64) -> impl Iterator<Item = f64> + Clone + '_ {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(move |((w, m), s)| w.ln() + log_normal_pdf(rho, *m, *s))
    }

    pub fn log_density(&self, rho: f64) -> f64 {
        log_sum_exp(self.log_terms(rho))
    }

    pub fn density(&self, rho: f64) -> f64 {
        self.log_density(rho).exp()
    }

    pub fn log_likelihood(&self, samples: &[f64]) -> f64 {
        samples.iter().map(|&r| self.log_density(r)).sum()
    }

    /// Largest deviation of the two group masses from 1 − π and π.
    pub fn partition_mass_error(&self, pi: f64) -> f64 {
        let split = self.los_components();
        let los: f64 = self.weights[..split].iter().sum();
        let nlos: f64 = self.weights[split..].iter().sum();
        (los - (1.0 - pi)).abs().max((nlos - pi).abs())
    }
}

/// Result of the constrained EM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CemFit {
    pub params: GmmParams,
    /// Log-likelihood of the initial state followed by every post-update state.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Iterations whose log-likelihood fell below the previous state's.
    pub monotone_violations: usize,
    /// Worst partition-mass deviation seen across all iterations.
    pub max_mass_error: f64,
}

/// Σ ζ, weighted mean and weighted population std of one component.
fn component_moments(samples: &[f64], resp: &[f64]) -> (f64, f64, f64) {
    let total: f64 = resp.iter().sum();
    let mean = samples.iter().zip(resp).map(|(x, z)| z * x).sum::<f64>() / total;
    let var = samples
        .iter()
        .zip(resp)
        .map(|(x, z)| z * (x - mean) * (x - mean))
        .sum::<f64>()
        / total;
    (total, mean, var.sqrt())
}

fn population_std(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    (samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// k-means++ seeding on the scalar samples; returns ascending centres.
fn seed_centres(samples: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centres = vec![samples[rng.random_range(0..samples.len())]];
    let mut d2: Vec<f64> = samples.iter().map(|x| (x - centres[0]).powi(2)).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = samples.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            samples[pick]
        } else {
            samples[rng.random_range(0..samples.len())]
        };
        centres.push(next);
        for (d, x) in d2.iter_mut().zip(samples) {
            *d = d.min((x - next).powi(2));
        }
    }
    centres.sort_by(f64::total_cmp);
    centres
}

fn partition_weights(mass: &[f64], split: usize, pi: f64) -> Vec<f64> {
    let los: f64 = mass[..split].iter().sum();
    let nlos: f64 = mass[split..].iter().sum();
    mass.iter()
        .enumerate()
        .map(|(k, s)| if k < split { (1.0 - pi) * s / los } else { pi * s / nlos })
        .collect()
}

fn initial_params(samples: &[f64], k: usize, pi: f64, floor: f64, spread: f64, rng: &mut ChaCha8Rng) -> GmmParams {
    let centres = seed_centres(samples, k, rng);
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); k];
    for &x in samples {
        let nearest = (0..k)
            .min_by(|&a, &b| (x - centres[a]).abs().total_cmp(&(x - centres[b]).abs()))
            .unwrap();
        members[nearest].push(x);
    }
    let stds = members
        .iter()
        .map(|m| {
            let s = if m.len() >= 2 { population_std(m) } else { 0.0 };
            if s > floor {
                s
            } else {
                (spread / k as f64).max(floor)
            }
        })
        .collect();
    let counts: Vec<f64> = members.iter().map(|m| m.len() as f64 + 1.0).collect();
    GmmParams {
        weights: partition_weights(&counts, k.div_ceil(2), pi),
        means: centres,
        stds,
    }
}

/// Responsibilities (row-major Q×K) and the log-likelihood of `params`.
fn e_step(params: &GmmParams, samples: &[f64], resp: &mut [f64]) -> f64 {
    let k = params.num_components();
    let mut ll = 0.0;
    let mut terms = vec![0.0; k];
    for (q, &x) in samples.iter().enumerate() {
        for (t, v) in terms.iter_mut().zip(params.log_terms(x)) {
            *t = v;
        }
        let lse = log_sum_exp(terms.iter().copied());
        ll += lse;
        for (j, t) in terms.iter().enumerate() {
            resp[q * k + j] = (t - lse).exp();
        }
    }
    ll
}

/// Constrained EM: mixture fit whose lower and upper halves carry masses 1 − π
/// and π, with component means re-sorted after every M-step.
pub fn fit_cem(prior: &SurveyPrior, k: usize, seed: u64, eps: f64, max_iter: usize) -> Result<CemFit, SdError> {
    if k < 2 {
        return Err(SdError::InvalidComponents(k));
    }
    let samples = &prior.score_samples;
    let need = 10 * k;
    if samples.len() < need {
        return Err(SdError::InsufficientSamples {
            need,
            have: samples.len(),
        });
    }
    let spread = population_std(samples);
    if !(spread.is_finite() && spread > 0.0) {
        return Err(SdError::DegenerateComponent);
    }
    let floor = SIGMA_FLOOR_RATIO * spread;
    let pi = prior.pi;
    let split = k.div_ceil(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = initial_params(samples, k, pi, floor, spread, &mut rng);

    let q = samples.len();
    let mut resp = vec![0.0; q * k];
    let mut column = vec![0.0; q];
    let mut ll = e_step(&params, samples, &mut resp);
    let mut trace = vec![ll];
    let mut violations = 0;
    let mut max_mass_error = params.partition_mass_error(pi);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iter {
        iterations += 1;
        // M-step: standard mean/std updates per component.
        let mut updated: Vec<(f64, f64, f64)> = Vec::with_capacity(k);
        for j in 0..k {
            for (i, c) in column.iter_mut().enumerate() {
                *c = resp[i * k + j];
            }
            let (mass, mean, std) = component_moments(samples, &column);
            if !(mass >= MIN_RESPONSIBILITY) {
                return Err(SdError::EmptyResponsibility {
                    component: j,
                    iteration: iterations,
                });
            }
            if !(mean.is_finite() && std.is_finite()) {
                return Err(SdError::DegenerateComponent);
            }
            updated.push((mass, mean, std.max(floor)));
        }
        // Keep the means ascending; mass and std travel with their component.
        updated.sort_by(|a, b| a.1.total_cmp(&b.1));
        let mass: Vec<f64> = updated.iter().map(|c| c.0).collect();
        params = GmmParams {
            weights: partition_weights(&mass, split, pi),
            means: updated.iter().map(|c| c.1).collect(),
            stds: updated.iter().map(|c| c.2).collect(),
        };
        let mass_error = params.partition_mass_error(pi);
        assert!(mass_error <= 1e-9, "partition mass drifted by {mass_error}");
        max_mass_error = max_mass_error.max(mass_error);

        let next = e_step(&params, samples, &mut resp);
        if !next.is_finite() {
            return Err(SdError::DegenerateComponent);
        }
        trace.push(next);
        if next < ll - 1e-9 * ll.abs().max(1.0) {
            violations += 1;
            warn!("constrained EM log-likelihood decreased at iteration {iterations}: {ll} -> {next}");
        }
        let delta = (next - ll).abs();
        ll = next;
        if delta <= eps {
            converged = true;
            break;
        }
    }
    debug!("constrained EM finished after {iterations} iterations (converged: {converged})");
    Ok(CemFit {
        params,
        log_likelihood: trace,
        iterations,
        converged,
        monotone_violations: violations,
        max_mass_error,
    })
}

/// Mixture posterior of the NLoS-like group at `rho`.
pub fn gmm_posterior(params: &GmmParams, rho: f64) -> f64 {
    let split = params.los_components();
    let all = params.log_density(rho);
    let nlos = log_sum_exp(params.log_terms(rho).skip(split));
    if nlos == f64::NEG_INFINITY || !all.is_finite() {
        return 0.0;
    }
    (nlos - all).exp().clamp(0.0, 1.0)
}

/// Ψ(ρ) = φ₁ / (1 + exp(−φ₂(ρ − φ₃))) + φ₄.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmoidParams {
    pub phi1: f64,
    pub phi2: f64,
    pub phi3: f64,
    pub phi4: f64,
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Euclidean projection of (a, c) onto {a ≥ 0, c ≥ 0, a + c ≤ 1}.
fn project_amplitudes(a: f64, c: f64) -> (f64, f64) {
    if a >= 0.0 && c >= 0.0 && a + c <= 1.0 {
        return (a, c);
    }
    let mut best = (f64::INFINITY, (0.0, 0.0));
    let mut consider = |pa: f64, pc: f64| {
        let d = (pa - a).powi(2) + (pc - c).powi(2);
        if d < best.0 {
            best = (d, (pa, pc));
        }
    };
    consider(a.clamp(0.0, 1.0), 0.0);
    consider(0.0, c.clamp(0.0, 1.0));
    let t = ((a - c + 1.0) / 2.0).clamp(0.0, 1.0);
    consider(t, 1.0 - t);
    best.1
}

impl SigmoidParams {
    pub fn new(phi1: f64, phi2: f64, phi3: f64, phi4: f64) -> Self {
        Self { phi1, phi2, phi3, phi4 }
    }

    fn raw(&self, rho: f64) -> f64 {
        self.phi1 * logistic(self.phi2 * (rho - self.phi3)) + self.phi4
    }

    pub fn evaluate(&self, rho: f64) -> f64 {
        evaluate_sd(self, rho)
    }

    pub fn is_feasible(&self) -> bool {
        let tol = 1e-12;
        self.phi1 >= 0.0 && self.phi2 >= 0.0 && self.phi4 >= 0.0 && self.phi1 + self.phi4 <= 1.0 + tol
    }

    /// Nearest point of the feasible set.
    pub fn projected(&self) -> Self {
        let (phi1, phi4) = project_amplitudes(self.phi1, self.phi4);
        Self {
            phi1,
            phi2: self.phi2.max(0.0),
            phi3: self.phi3,
            phi4,
        }
    }

    fn as_array(&self) -> [f64; 4] {
        [self.phi1, self.phi2, self.phi3, self.phi4]
    }

    fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

/// Soft-decision value h*(ρ), clamped to [0, 1].
pub fn evaluate_sd(phi: &SigmoidParams, rho: f64) -> f64 {
    let v = phi.raw(rho);
    if v.is_nan() {
        return phi.phi4.clamp(0.0, 1.0);
    }
    v.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmoidFit {
    pub params: SigmoidParams,
    pub objective: f64,
    pub initial_objective: f64,
    pub iterations: usize,
}

fn sigmoid_objective(phi: &SigmoidParams, rhos: &[f64], targets: &[f64]) -> f64 {
    rhos.iter().zip(targets).map(|(r, t)| (phi.raw(*r) - t).powi(2)).sum()
}

/// Solve the 4×4 system `a·x = b` by Gaussian elimination with partial pivoting.
#[allow(clippy::needless_range_loop)]
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let pivot = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for c in col..4 {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for row in (0..4).rev() {
        let s: f64 = (row + 1..4).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Constrained least-squares sigmoid fit to arbitrary targets: projected
/// Levenberg–Marquardt from `init`.
pub fn fit_sigmoid_targets(rhos: &[f64], targets: &[f64], init: SigmoidParams) -> Result<SigmoidFit, SdError> {
    assert_eq!(rhos.len(), targets.len(), "one target per score point");
    let mut distinct: Vec<f64> = rhos.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 4 {
        return Err(SdError::TooFewPoints);
    }
    let mut phi = init.projected();
    let initial_objective = sigmoid_objective(&phi, rhos, targets);
    if !initial_objective.is_finite() {
        return Err(SdError::FitDiverged);
    }
    let mut objective = initial_objective;
    let mut damping = 1e-3;
    let mut iterations = 0;

    while iterations < SIGMOID_MAX_ITER {
        iterations += 1;
        let mut jtj = [[0.0; 4]; 4];
        let mut jtr = [0.0; 4];
        for (r, t) in rhos.iter().zip(targets) {
            let s = logistic(phi.phi2 * (r - phi.phi3));
            let ds = s * (1.0 - s);
            let grad = [s, phi.phi1 * ds * (r - phi.phi3), -phi.phi1 * ds * phi.phi2, 1.0];
            let resid = phi.raw(*r) - t;
            for i in 0..4 {
                jtr[i] += grad[i] * resid;
                for j in 0..4 {
                    jtj[i][j] += grad[i] * grad[j];
                }
            }
        }
        let mut improved = false;
        let mut tiny_step = false;
        for _ in 0..30 {
            let mut a = jtj;
            for (i, row) in a.iter_mut().enumerate() {
                row[i] += damping * jtj[i][i].max(1e-12);
            }
            let Some(step) = solve4(a, jtr.map(|g| -g)) else {
                damping *= 10.0;
                continue;
            };
            let current = phi.as_array();
            let mut cand = current;
            for i in 0..4 {
                cand[i] += step[i];
            }
            let candidate = SigmoidParams::from_array(cand).projected();
            let cand_obj = sigmoid_objective(&candidate, rhos, targets);
            let moved: f64 = candidate
                .as_array()
                .iter()
                .zip(current)
                .map(|(a, b)| (a - b).abs() / (1.0 + b.abs()))
                .fold(0.0, f64::max);
            if cand_obj.is_finite() && cand_obj <= objective {
                let gain = objective - cand_obj;
                phi = candidate;
                objective = cand_obj;
                damping = (damping * 0.3).max(1e-12);
                improved = true;
                tiny_step = moved < 1e-12 || gain <= 1e-15 * objective.max(1e-300);
                break;
            }
            if moved < 1e-14 {
                tiny_step = true;
                break;
            }
            damping *= 10.0;
        }
        if !improved || tiny_step || objective == 0.0 {
            break;
        }
    }
    if !objective.is_finite() {
        return Err(SdError::FitDiverged);
    }
    Ok(SigmoidFit {
        params: phi,
        objective,
        initial_objective,
        iterations,
    })
}

/// Deterministic starting point derived from the two mixture components that
/// straddle the LoS/NLoS split.
pub fn sigmoid_initialization(params: &GmmParams, pi: f64) -> SigmoidParams {
    let split = params.los_components();
    let (lo, hi) = if split < params.num_components() {
        (split - 1, split)
    } else {
        (split.saturating_sub(2), split - 1)
    };
    let (m_lo, m_hi) = (params.means[lo], params.means[hi]);
    let (s_lo, s_hi) = (params.stds[lo], params.stds[hi]);
    // Point equally many standard deviations from both means.
    let phi3 = (m_lo * s_hi + m_hi * s_lo) / (s_lo + s_hi);
    let gap = m_hi - m_lo;
    let gap = if gap > 0.0 { gap } else { (s_lo + s_hi).max(1e-9) };
    SigmoidParams::new((1.5 * pi).min(1.0), 4.0 / gap, phi3, 0.01).projected()
}

/// Fit the sigmoid to the mixture posterior evaluated at the survey samples.
pub fn fit_sigmoid(params: &GmmParams, pi: f64, samples: &[f64]) -> Result<SigmoidFit, SdError> {
    let targets: Vec<f64> = samples.iter().map(|&r| gmm_posterior(params, r)).collect();
    fit_sigmoid_targets(samples, &targets, sigmoid_initialization(params, pi))
}

/// Fitted soft-decision mapping, serialized as
/// `{K, alpha[], mu[], sigma[], phi[4], pi, seed}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdMapping {
    #[serde(rename = "K")]
    pub k: usize,
    pub alpha: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub phi: [f64; 4],
    pub pi: f64,
    pub seed: u64,
}

impl SdMapping {
    pub fn new(gmm: &GmmParams, sigmoid: &SigmoidParams, pi: f64, seed: u64) -> Self {
        Self {
            k: gmm.num_components(),
            alpha: gmm.weights.clone(),
            mu: gmm.means.clone(),
            sigma: gmm.stds.clone(),
            phi: sigmoid.as_array(),
            pi,
            seed,
        }
    }

    pub fn gmm(&self) -> GmmParams {
        GmmParams {
            weights: self.alpha.clone(),
            means: self.mu.clone(),
            stds: self.sigma.clone(),
        }
    }

    pub fn sigmoid(&self) -> SigmoidParams {
        SigmoidParams::from_array(self.phi)
    }

    /// h*(ρ).
    pub fn evaluate(&self, rho: f64) -> f64 {
        evaluate_sd(&self.sigmoid(), rho)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mapping is always serializable")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}
