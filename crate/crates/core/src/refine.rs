//! Iterative reliability-weighted score refinement.
//!
//! Each PEL built only from HD-LoS gNBs is weighted by the probability that all
//! of its gNBs are LoS. Weighted L1 medians over those PELs replace the plain
//! medians of the hard-decision score, the scores are recomputed, mapped to
//! soft decisions, and the weights updated until the soft decisions settle.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cda::{gnb_mask, PelEnsemble, Snapshot};
use crate::detect::{score, ScoreReport};
use crate::geometry::{weighted_l1_median, GeometryError, Point2, WeightedPointSet};
use crate::sdmap::{evaluate_sd, SigmoidParams};

pub const DEFAULT_REFINE_EPS: f64 = 1e-3;
pub const DEFAULT_MAX_ITERATIONS: usize = 25;
/// Below this total weight a median falls back to uniform weights.
pub const MIN_TOTAL_WEIGHT: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RefineError {
    #[error("no PEL is built exclusively from HD-LoS gNBs")]
    EmptyHdSet,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub eps: f64,
    pub max_iterations: usize,
    /// Soft decision used for a gNB that never received a score.
    pub unscored_sd: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            eps: DEFAULT_REFINE_EPS,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            unscored_sd: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineOutcome {
    /// Refined scores for HD-LoS gNBs, original scores elsewhere.
    pub final_scores: Vec<Option<f64>>,
    /// Final soft decisions ψ*.
    pub final_sd: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Σ over HD-LoS gNBs of the squared soft-decision change in the last iteration.
    pub convergence_sum: f64,
    /// gNBs whose score stopped updating because a restricted partition was empty
    /// or the reference vector vanished.
    pub frozen: Vec<usize>,
}

/// ω = Π (1 − h*) over the subset's gNBs.
pub fn pel_weight(sd_values: &[f64], subset: &[usize]) -> f64 {
    subset.iter().map(|&n| 1.0 - sd_values[n]).product()
}

/// Soft decisions straight from the hard-decision scores, without refinement.
pub fn unrefined_sd(scores: &[Option<f64>], mapping: &SigmoidParams, unscored_sd: f64) -> Vec<f64> {
    scores
        .iter()
        .map(|s| s.map_or(unscored_sd, |r| evaluate_sd(mapping, r)))
        .collect()
}

fn weighted_median_at(ensemble: &PelEnsemble, indices: &[usize], weights: &[f64]) -> Result<Point2, GeometryError> {
    let points = ensemble.points_at(indices);
    let mut w: Vec<f64> = indices.iter().map(|&l| weights[l]).collect();
    if w.iter().sum::<f64>() < MIN_TOTAL_WEIGHT {
        w.iter_mut().for_each(|x| *x = 1.0);
    }
    weighted_l1_median(&WeightedPointSet::new(points, w)?)
}

/// Refine the scores of the HD-LoS gNBs and return the final soft decisions.
pub fn refine_scores(
    ensemble: &PelEnsemble,
    snapshot: &Snapshot,
    report: &ScoreReport,
    mapping: &SigmoidParams,
    config: &RefineConfig,
) -> Result<RefineOutcome, RefineError> {
    if !(config.eps >= 0.0) {
        return Err(RefineError::InvalidParameter(format!(
            "eps must be nonnegative, got {}",
            config.eps
        )));
    }
    if config.max_iterations == 0 {
        return Err(RefineError::InvalidParameter("max_iterations must be positive".into()));
    }
    let n_gnbs = ensemble.num_gnbs();
    let hd_set = report.decision.los_set();
    let hd_indices = ensemble.restrict_indices(gnb_mask(&hd_set));
    if hd_indices.is_empty() {
        return Err(RefineError::EmptyHdSet);
    }

    let mut scores = report.scores();
    let mut sd = unrefined_sd(&scores, mapping, config.unscored_sd);

    // Restricted partitions are fixed across iterations; only weights change.
    let partitions: Vec<(usize, Vec<usize>, Vec<usize>)> = hd_set
        .iter()
        .map(|&n| {
            let bit = 1u64 << n;
            let (with, without) = hd_indices.iter().partition(|&&l| ensemble.mask(l) & bit != 0);
            (n, with, without)
        })
        .collect();
    let mut frozen: Vec<bool> = vec![false; n_gnbs];
    for (n, with, without) in &partitions {
        if with.is_empty() || without.is_empty() || scores[*n].is_none() {
            frozen[*n] = true;
        }
    }

    let mut weights = vec![0.0; ensemble.len()];
    let mut iterations = 0;
    let mut converged = false;
    let mut convergence_sum = f64::INFINITY;
    while iterations < config.max_iterations {
        iterations += 1;
        for &l in &hd_indices {
            weights[l] = pel_weight(&sd, ensemble.subset(l));
        }
        let centre = weighted_median_at(ensemble, &hd_indices, &weights)?;
        let mut next_scores = scores.clone();
        for (n, with, without) in &partitions {
            if frozen[*n] {
                continue;
            }
            let nev = weighted_median_at(ensemble, with, &weights)? - weighted_median_at(ensemble, without, &weights)?;
            let reference = centre - snapshot.gnb_positions[*n];
            match score(nev, reference, snapshot.ranges[*n]) {
                Ok(rho) => next_scores[*n] = Some(rho),
                Err(_) => frozen[*n] = true,
            }
        }
        let mut next_sd = sd.clone();
        for &n in &hd_set {
            if let Some(rho) = next_scores[n] {
                next_sd[n] = evaluate_sd(mapping, rho);
            }
        }
        convergence_sum = hd_set.iter().map(|&n| (next_sd[n] - sd[n]).powi(2)).sum();
        scores = next_scores;
        sd = next_sd;
        if convergence_sum <= config.eps {
            converged = true;
            break;
        }
    }

    Ok(RefineOutcome {
        final_scores: scores,
        final_sd: sd,
        iterations,
        converged,
        convergence_sum,
        frozen: (0..n_gnbs).filter(|&n| frozen[n] && hd_set.contains(&n)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cda::{build_ensemble, LinkState};
    use crate::detect::{detect, hard_decide};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn pel_weight_products() {
        assert_eq!(pel_weight(&[0.0, 0.0, 0.0], &[0, 1, 2]), 1.0);
        assert_eq!(pel_weight(&[0.2, 1.0, 0.0], &[0, 1, 2]), 0.0);
        assert_eq!(pel_weight(&[0.5, 0.5, 0.5], &[0, 1, 2]), 0.125);
    }

    #[test]
    fn unequal_sd_values_give_unequal_weights() {
        let sd = [0.1, 0.4, 0.4, 0.4];
        assert_ne!(pel_weight(&sd, &[0, 1, 2]), pel_weight(&sd, &[1, 2, 3]));
    }

    fn ring_snapshot(n: usize, truth: Point2, biased: &[usize], bias: f64, noise: f64, seed: u64) -> Snapshot {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise).unwrap();
        let gnbs: Vec<Point2> = (0..n)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / n as f64;
                Point2::new(50.0 + 40.0 * a.cos(), 50.0 + 30.0 * a.sin())
            })
            .collect();
        let ranges = gnbs
            .iter()
            .enumerate()
            .map(|(i, z)| {
                let b = if biased.contains(&i) { bias } else { 0.0 };
                z.distance(truth) + b + normal.sample(&mut rng)
            })
            .collect();
        let mut s = Snapshot::new(gnbs, ranges);
        s.truth_position = Some(truth);
        s
    }

    #[test]
    fn zero_mapping_converges_in_one_iteration() {
        let s = ring_snapshot(8, Point2::new(45.0, 52.0), &[], 0.0, 0.3, 3);
        let e = build_ensemble(&s, 3).unwrap();
        let mut report = detect(&e, &s, 1.4).unwrap();
        report.decision = hard_decide(&report.scores(), f64::INFINITY, 1.4);
        let out = refine_scores(
            &e,
            &s,
            &report,
            &SigmoidParams::new(0.0, 1.0, 0.0, 0.0),
            &RefineConfig::default(),
        )
        .unwrap();
        assert_eq!(out.iterations, 1);
        assert!(out.converged);
        assert!(out.final_sd.iter().all(|&v| v == 0.0));
        // Uniform weights over the full ensemble reproduce the unweighted medians.
        for (a, b) in out.final_scores.iter().zip(report.scores()) {
            assert!((a.unwrap() - b.unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn infinite_eps_stops_after_one_iteration() {
        let s = ring_snapshot(8, Point2::new(45.0, 52.0), &[2], 20.0, 0.5, 5);
        let e = build_ensemble(&s, 3).unwrap();
        let report = detect(&e, &s, 1.4).unwrap();
        let cfg = RefineConfig {
            eps: f64::INFINITY,
            ..RefineConfig::default()
        };
        let out = refine_scores(&e, &s, &report, &SigmoidParams::new(0.9, 0.2, 10.0, 0.02), &cfg).unwrap();
        assert_eq!(out.iterations, 1);
    }

    #[test]
    fn all_flagged_is_empty_hd_set() {
        let s = ring_snapshot(6, Point2::new(45.0, 52.0), &[], 0.0, 0.3, 1);
        let e = build_ensemble(&s, 3).unwrap();
        let mut report = detect(&e, &s, 1.4).unwrap();
        report.decision = hard_decide(&report.scores(), f64::NEG_INFINITY, 1.4);
        let out = refine_scores(
            &e,
            &s,
            &report,
            &SigmoidParams::new(1.0, 1.0, 0.0, 0.0),
            &RefineConfig::default(),
        );
        assert_eq!(out, Err(RefineError::EmptyHdSet));
    }

    /// Ten gNBs on an ellipse, 30% of links biased by +20 m, σ = 0.5 m.
    fn random_ring_snapshot(seed: u64) -> (Snapshot, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.5).unwrap();
        let gnbs: Vec<Point2> = (0..10)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / 10.0;
                Point2::new(50.0 + 40.0 * a.cos(), 50.0 + 30.0 * a.sin())
            })
            .collect();
        let truth = Point2::new(rng.random_range(30.0..70.0), rng.random_range(35.0..65.0));
        let biased: Vec<usize> = (0..10).filter(|_| rng.random_bool(0.3)).collect();
        let ranges = gnbs
            .iter()
            .enumerate()
            .map(|(i, z)| {
                let b = if biased.contains(&i) { 20.0 } else { 0.0 };
                z.distance(truth) + b + normal.sample(&mut rng)
            })
            .collect();
        (Snapshot::new(gnbs, ranges), biased)
    }

    #[test]
    fn escaped_nlos_gnb_gains_probability() {
        let (s, biased) = random_ring_snapshot(281);
        assert_eq!(biased, vec![0, 1, 2]);
        let e = build_ensemble(&s, 3).unwrap();
        let report = detect(&e, &s, 1.4).unwrap();
        assert_eq!(report.decision.labels[0], LinkState::Los);
        let mapping = SigmoidParams::new(0.95, 0.3, report.decision.threshold, 0.02);
        let before = evaluate_sd(&mapping, report.scores()[0].unwrap());
        let out = refine_scores(&e, &s, &report, &mapping, &RefineConfig::default()).unwrap();
        assert!(out.final_sd[0] > before + 0.5, "{} -> {}", before, out.final_sd[0]);
        assert!(out.final_sd.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(out.iterations <= DEFAULT_MAX_ITERATIONS);
        assert!(out.converged || out.iterations == DEFAULT_MAX_ITERATIONS);
        // Flagged gNBs keep their unrefined soft decision.
        for n in 0..10 {
            if report.decision.labels[n].is_nlos() {
                assert_eq!(out.final_sd[n], evaluate_sd(&mapping, report.scores()[n].unwrap()));
            }
        }
        let again = refine_scores(&e, &s, &report, &mapping, &RefineConfig::default()).unwrap();
        assert_eq!(again.convergence_sum.to_bits(), out.convergence_sum.to_bits());
    }
}
