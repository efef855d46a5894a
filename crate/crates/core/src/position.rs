//! Position estimators: plain and NLoS-excluding least squares, RE/RS-filtered
//! ensemble medians, and the soft-decision weighted median.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cda::{gnb_mask, PelEnsemble, Snapshot};
use crate::detect::HardDecision;
use crate::geometry::{
    coordinate_median, multilaterate, weighted_l1_median, weighted_multilaterate, GeometryError, Point2,
    WeightedPointSet,
};
use crate::refine::{pel_weight, MIN_TOTAL_WEIGHT};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PositionError {
    #[error("invalid filter ratio {0} (must lie in (0, 1])")]
    InvalidRatio(f64),
    #[error("method {method} needs {artifact}")]
    MissingArtifact { method: Method, artifact: &'static str },
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Estimator selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "LS")]
    Ls,
    #[serde(rename = "CDA_RERS")]
    CdaRers,
    #[serde(rename = "LS_ND_HD")]
    LsNdHd,
    #[serde(rename = "CDA_ND_HD")]
    CdaNdHd,
    #[serde(rename = "CDA_ND_RERS_HD")]
    CdaNdRersHd,
    #[serde(rename = "LS_ND_SD")]
    LsNdSd,
    #[serde(rename = "CDA_ND_SD")]
    CdaNdSd,
    #[serde(rename = "CDA_ND_RERS_SD")]
    CdaNdRersSd,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Ls,
        Method::CdaRers,
        Method::LsNdHd,
        Method::CdaNdHd,
        Method::CdaNdRersHd,
        Method::LsNdSd,
        Method::CdaNdSd,
        Method::CdaNdRersSd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ls => "LS",
            Method::CdaRers => "CDA_RERS",
            Method::LsNdHd => "LS_ND_HD",
            Method::CdaNdHd => "CDA_ND_HD",
            Method::CdaNdRersHd => "CDA_ND_RERS_HD",
            Method::LsNdSd => "LS_ND_SD",
            Method::CdaNdSd => "CDA_ND_SD",
            Method::CdaNdRersSd => "CDA_ND_RERS_SD",
        }
    }

    pub fn needs_hard_decision(self) -> bool {
        !matches!(self, Method::Ls | Method::CdaRers)
    }

    pub fn needs_soft_decision(self) -> bool {
        matches!(self, Method::LsNdSd | Method::CdaNdSd | Method::CdaNdRersSd)
    }

    pub fn is_ensemble_based(self) -> bool {
        !matches!(self, Method::Ls | Method::LsNdHd | Method::LsNdSd)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = PositionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| PositionError::UnknownMethod(s.to_string()))
    }
}

/// Fractions of the filter input kept by the RE and RS stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub re_ratio: f64,
    pub rs_ratio: f64,
}

impl FilterConfig {
    pub fn new(re_ratio: f64, rs_ratio: f64) -> Result<Self, PositionError> {
        for r in [re_ratio, rs_ratio] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(PositionError::InvalidRatio(r));
            }
        }
        Ok(Self { re_ratio, rs_ratio })
    }

    pub const IDENTITY: FilterConfig = FilterConfig {
        re_ratio: 1.0,
        rs_ratio: 1.0,
    };
}

/// Filter settings for the three RE/RS-filtered methods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodFilters {
    pub cda_rers: FilterConfig,
    pub nd_rers_hd: FilterConfig,
    pub nd_rers_sd: FilterConfig,
}

impl Default for MethodFilters {
    fn default() -> Self {
        Self {
            cda_rers: FilterConfig::IDENTITY,
            nd_rers_hd: FilterConfig::IDENTITY,
            nd_rers_sd: FilterConfig::IDENTITY,
        }
    }
}

/// Why an estimate took a fallback path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fallback {
    /// Fewer than three HD-LoS gNBs; all gNBs were used instead.
    InsufficientGnbs,
    /// No PEL built only from HD-LoS gNBs; the full ensemble was used instead.
    EmptyPelSet,
    /// Every soft weight vanished; uniform weights were used instead.
    ZeroWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionEstimate {
    pub point: Point2,
    pub method: Method,
    /// PELs entering the final median (0 for least-squares methods).
    pub pels_used: usize,
    pub fallback: Option<Fallback>,
}

/// Σₙ |dₙ − ‖x − zₙ‖| over the subset.
pub fn residual_error(pel: Point2, subset: &[usize], snapshot: &Snapshot) -> f64 {
    subset
        .iter()
        .map(|&n| (snapshot.ranges[n] - pel.distance(snapshot.gnb_positions[n])).abs())
        .sum()
}

/// Σₙ dₙ over the subset.
pub fn rtt_sum(subset: &[usize], snapshot: &Snapshot) -> f64 {
    subset.iter().map(|&n| snapshot.ranges[n]).sum()
}

fn cut_count(ratio: f64, base: usize, current: usize) -> usize {
    ((ratio * base as f64).round() as usize).clamp(1, current.max(1))
}

/// Keep the indices whose metric is at most the `count`-th smallest value.
fn keep_smallest(indices: Vec<usize>, metric: impl Fn(usize) -> f64, count: usize) -> Vec<usize> {
    let mut values: Vec<f64> = indices.iter().map(|&l| metric(l)).collect();
    values.sort_by(f64::total_cmp);
    let threshold = values[count - 1];
    indices.into_iter().filter(|&l| metric(l) <= threshold).collect()
}

/// RE then RS filtering of valid PEL indices. Both cut counts are fractions of
/// the input size; ties at a cut are kept.
pub fn filter_re_rs(ensemble: &PelEnsemble, indices: &[usize], snapshot: &Snapshot, cfg: &FilterConfig) -> Vec<usize> {
    let input: Vec<usize> = indices.iter().copied().filter(|&l| ensemble.is_valid(l)).collect();
    if input.is_empty() {
        return input;
    }
    let base = input.len();
    let re = |l: usize| residual_error(ensemble.pel(l).expect("valid PEL"), ensemble.subset(l), snapshot);
    let kept = keep_smallest(input, re, cut_count(cfg.re_ratio, base, base));
    let current = kept.len();
    let rs = |l: usize| rtt_sum(ensemble.subset(l), snapshot);
    keep_smallest(kept, rs, cut_count(cfg.rs_ratio, base, current))
}

/// Inputs an estimator may need beyond the snapshot itself.
#[derive(Debug, Clone, Copy)]
pub struct EstimationInputs<'a> {
    pub ensemble: Option<&'a PelEnsemble>,
    pub hard_decision: Option<&'a HardDecision>,
    /// Final soft decisions ψ*, one per gNB.
    pub soft_decision: Option<&'a [f64]>,
    pub filters: MethodFilters,
}

fn ls_over(snapshot: &Snapshot, gnbs: &[usize], weights: Option<&[f64]>) -> Result<Point2, GeometryError> {
    let anchors: Vec<Point2> = gnbs.iter().map(|&n| snapshot.gnb_positions[n]).collect();
    let ranges: Vec<f64> = gnbs.iter().map(|&n| snapshot.ranges[n]).collect();
    match weights {
        Some(w) => weighted_multilaterate(&anchors, &ranges, w),
        None => multilaterate(&anchors, &ranges),
    }
}

fn all_gnbs(snapshot: &Snapshot) -> Vec<usize> {
    (0..snapshot.num_gnbs()).collect()
}

pub fn estimate(
    snapshot: &Snapshot,
    method: Method,
    inputs: &EstimationInputs<'_>,
) -> Result<PositionEstimate, PositionError> {
    let missing = |artifact| PositionError::MissingArtifact { method, artifact };
    let finish = |point, pels_used, fallback| PositionEstimate {
        point,
        method,
        pels_used,
        fallback,
    };

    if method == Method::Ls {
        return Ok(finish(ls_over(snapshot, &all_gnbs(snapshot), None)?, 0, None));
    }
    let hd = if method.needs_hard_decision() {
        Some(inputs.hard_decision.ok_or_else(|| missing("a hard decision"))?)
    } else {
        None
    };
    let sd = if method.needs_soft_decision() {
        Some(inputs.soft_decision.ok_or_else(|| missing("soft decisions"))?)
    } else {
        None
    };
    let hd_set = hd.map(|h| h.los_set()).unwrap_or_default();

    if !method.is_ensemble_based() {
        if hd_set.len() < 3 {
            let point = ls_over(snapshot, &all_gnbs(snapshot), None)?;
            return Ok(finish(point, 0, Some(Fallback::InsufficientGnbs)));
        }
        if let Some(sd) = sd {
            let weights: Vec<f64> = hd_set.iter().map(|&n| 1.0 - sd[n]).collect();
            return match ls_over(snapshot, &hd_set, Some(&weights)) {
                Ok(point) => Ok(finish(point, 0, None)),
                Err(GeometryError::AllZeroWeights | GeometryError::DegenerateGeometry) => Ok(finish(
                    ls_over(snapshot, &hd_set, None)?,
                    0,
                    Some(Fallback::ZeroWeights),
                )),
                Err(e) => Err(e.into()),
            };
        }
        return Ok(finish(ls_over(snapshot, &hd_set, None)?, 0, None));
    }

    let ensemble = inputs.ensemble.ok_or_else(|| missing("a PEL ensemble"))?;
    let mut fallback = None;
    let candidates = if method == Method::CdaRers {
        ensemble.valid_indices()
    } else {
        let restricted = ensemble.restrict_indices(gnb_mask(&hd_set));
        if restricted.is_empty() {
            fallback = Some(Fallback::EmptyPelSet);
            ensemble.valid_indices()
        } else {
            restricted
        }
    };
    let used = match method {
        Method::CdaRers => filter_re_rs(ensemble, &candidates, snapshot, &inputs.filters.cda_rers),
        Method::CdaNdRersHd => filter_re_rs(ensemble, &candidates, snapshot, &inputs.filters.nd_rers_hd),
        Method::CdaNdRersSd => filter_re_rs(ensemble, &candidates, snapshot, &inputs.filters.nd_rers_sd),
        _ => candidates,
    };
    let points = ensemble.points_at(&used);
    let point = match sd {
        None => coordinate_median(&points)?,
        Some(sd) => {
            let mut weights: Vec<f64> = used.iter().map(|&l| pel_weight(sd, ensemble.subset(l))).collect();
            if weights.iter().sum::<f64>() < MIN_TOTAL_WEIGHT {
                weights.iter_mut().for_each(|w| *w = 1.0);
                fallback = fallback.or(Some(Fallback::ZeroWeights));
            }
            weighted_l1_median(&WeightedPointSet::new(points, weights)?)?
        }
    };
    Ok(finish(point, used.len(), fallback))
}
