//! Hard-decision NLoS detection from the PEL ensemble.
//!
//! For every gNB the ensemble is split into PELs built with and without its
//! range. The displacement between the two coordinate-wise medians (the NLoS
//! evidence vector) is projected onto the direction from the gNB to the
//! ensemble median and scaled by the square root of the measured range. Scores
//! at or above an adaptive, median-plus-dispersion threshold are flagged NLoS.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cda::{LinkState, PelEnsemble, Snapshot};
use crate::geometry::{coordinate_median, median, GeometryError, Point2};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DetectError {
    #[error("gNB {gnb}: a PEL partition is empty")]
    EmptyPartition { gnb: usize },
    #[error("reference vector has zero length")]
    ZeroReference,
    #[error("no scores to threshold")]
    EmptyScores,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Medians of the two partitions and their displacement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nev {
    pub nev: Point2,
    pub median_with: Point2,
    pub median_without: Point2,
}

/// Per-gNB evidence. Fields are `None` when the gNB could not be scored.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GnbEvidence {
    pub nev: Option<Point2>,
    pub reference: Option<Point2>,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NevReport {
    pub pseudo_location: Point2,
    pub gnbs: Vec<GnbEvidence>,
}

impl NevReport {
    pub fn scores(&self) -> Vec<Option<f64>> {
        self.gnbs.iter().map(|g| g.score).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardDecision {
    pub labels: Vec<LinkState>,
    pub threshold: f64,
    pub lambda: f64,
}

impl HardDecision {
    /// Indices of gNBs kept as LoS.
    pub fn los_set(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| !l.is_nlos())
            .map(|(i, _)| i)
            .collect()
    }
}

/// Everything the hard-decision stage produces for one snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub evidence: NevReport,
    pub decision: HardDecision,
}

impl ScoreReport {
    pub fn scores(&self) -> Vec<Option<f64>> {
        self.evidence.scores()
    }
}

/// NLoS evidence vector of gNB `n`: med(Xₙ) − med(X₋ₙ).
pub fn compute_nev(ensemble: &PelEnsemble, n: usize) -> Result<Nev, DetectError> {
    let (with, without) = ensemble.partition_indices(n);
    if with.is_empty() || without.is_empty() {
        return Err(DetectError::EmptyPartition { gnb: n });
    }
    let median_with = coordinate_median(&ensemble.points_at(&with))?;
    let median_without = coordinate_median(&ensemble.points_at(&without))?;
    Ok(Nev {
        nev: median_with - median_without,
        median_with,
        median_without,
    })
}

/// Scalar projection of `nev` on `reference`, scaled by √range.
pub fn score(nev: Point2, reference: Point2, range: f64) -> Result<f64, DetectError> {
    let norm = reference.norm();
    if !(norm > 0.0) {
        return Err(DetectError::ZeroReference);
    }
    if !(range >= 0.0) {
        return Err(DetectError::InvalidParameter(format!("range {range} is negative")));
    }
    Ok(nev.dot(reference) / norm * range.sqrt())
}

/// η = med(ρ) + λ·med(|ρ − med(ρ)|).
pub fn adaptive_threshold(scores: &[f64], lambda: f64) -> Result<f64, DetectError> {
    if !(lambda > 0.0) {
        return Err(DetectError::InvalidParameter(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let centre = median(scores).ok_or(DetectError::EmptyScores)?;
    let deviations: Vec<f64> = scores.iter().map(|s| (s - centre).abs()).collect();
    let spread = median(&deviations).ok_or(DetectError::EmptyScores)?;
    Ok(centre + lambda * spread)
}

/// NLoS iff ρ ≥ η. Unscored gNBs stay LoS.
pub fn hard_decide(scores: &[Option<f64>], threshold: f64, lambda: f64) -> HardDecision {
    let labels = scores
        .iter()
        .map(|s| LinkState::from_nlos(matches!(s, Some(s) if *s >= threshold)))
        .collect();
    HardDecision {
        labels,
        threshold,
        lambda,
    }
}

/// Evidence vectors and scores for every gNB of a snapshot.
pub fn evaluate_evidence(ensemble: &PelEnsemble, snapshot: &Snapshot) -> Result<NevReport, DetectError> {
    let pseudo_location = coordinate_median(&ensemble.valid_points())?;
    let gnbs = (0..ensemble.num_gnbs())
        .map(|n| {
            let Ok(nev) = compute_nev(ensemble, n) else {
                return GnbEvidence::default();
            };
            let reference = pseudo_location - snapshot.gnb_positions[n];
            GnbEvidence {
                nev: Some(nev.nev),
                reference: Some(reference),
                score: score(nev.nev, reference, snapshot.ranges[n]).ok(),
            }
        })
        .collect();
    Ok(NevReport { pseudo_location, gnbs })
}

/// Full hard-decision stage: evidence, adaptive threshold, labels.
///
/// gNBs without a score are excluded from the threshold statistics and
/// labelled LoS. With no scores at all the threshold is +∞.
pub fn detect(ensemble: &PelEnsemble, snapshot: &Snapshot, lambda: f64) -> Result<ScoreReport, DetectError> {
    let evidence = evaluate_evidence(ensemble, snapshot)?;
    let scored: Vec<f64> = evidence.gnbs.iter().filter_map(|g| g.score).collect();
    let threshold = match adaptive_threshold(&scored, lambda) {
        Ok(eta) => eta,
        Err(DetectError::EmptyScores) => f64::INFINITY,
        Err(e) => return Err(e),
    };
    let decision = hard_decide(&evidence.scores(), threshold, lambda);
    Ok(ScoreReport { evidence, decision })
}
