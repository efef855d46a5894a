//! Combinatorial data augmentation: one preliminary estimated location (PEL)
//! per M-subset of gNBs, and the per-gNB partitions of that ensemble.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{multilaterate, Point2};

/// Speed of light in vacuum (m/s), used for RTT to range conversion.
pub const SPEED_OF_LIGHT: f64 = 2.997_924_58e8;
/// Default subset size.
pub const DEFAULT_SUBSET_SIZE: usize = 3;
/// Largest gNB count supported by the bitmask subset representation.
pub const MAX_GNBS: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CdaError {
    #[error("invalid subset arity: M={m}, N={n} (need 3 <= M <= N)")]
    InvalidArity { n: usize, m: usize },
    #[error("too many gNBs: {0} (at most {MAX_GNBS} supported)")]
    TooManyGnbs(usize),
    #[error("only {valid} valid PELs (need at least 2)")]
    TooFewValidPels { valid: usize },
    #[error("invalid snapshot: {0}")]
    InvalidSnapshot(String),
}

/// Propagation state of a gNB link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LinkState {
    #[serde(rename = "LoS")]
    Los,
    #[serde(rename = "NLoS")]
    Nlos,
}

impl LinkState {
    pub fn is_nlos(self) -> bool {
        matches!(self, LinkState::Nlos)
    }

    pub fn from_nlos(nlos: bool) -> Self {
        if nlos {
            LinkState::Nlos
        } else {
            LinkState::Los
        }
    }
}

/// One UE realization: gNB coordinates and their range measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub gnb_positions: Vec<Point2>,
    pub ranges: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_labels: Option<Vec<LinkState>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_position: Option<Point2>,
    /// Round-trip times in seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rtt: Option<Vec<f64>>,
    /// Scenario instantiation this drop belongs to, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance: Option<usize>,
}

impl Snapshot {
    pub fn new(gnb_positions: Vec<Point2>, ranges: Vec<f64>) -> Self {
        Self {
            gnb_positions,
            ranges,
            truth_labels: None,
            truth_position: None,
            rtt: None,
            instance: None,
        }
    }

    /// Build from round-trip times, d = τ·c/2.
    pub fn from_rtt(gnb_positions: Vec<Point2>, rtt: Vec<f64>) -> Self {
        let ranges = rtt.iter().map(|t| t * SPEED_OF_LIGHT / 2.0).collect();
        Self {
            rtt: Some(rtt),
            ..Self::new(gnb_positions, ranges)
        }
    }

    pub fn num_gnbs(&self) -> usize {
        self.gnb_positions.len()
    }

    pub fn validate(&self) -> Result<(), CdaError> {
        let n = self.gnb_positions.len();
        if self.ranges.len() != n {
            return Err(CdaError::InvalidSnapshot(format!(
                "{} gNB positions but {} ranges",
                n,
                self.ranges.len()
            )));
        }
        if n > MAX_GNBS {
            return Err(CdaError::TooManyGnbs(n));
        }
        if self.gnb_positions.iter().any(|p| !p.is_finite()) {
            return Err(CdaError::InvalidSnapshot("non-finite gNB coordinate".into()));
        }
        if let Some(i) = self.ranges.iter().position(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(CdaError::InvalidSnapshot(format!(
                "range {i} is negative or non-finite"
            )));
        }
        if let Some(labels) = &self.truth_labels {
            if labels.len() != n {
                return Err(CdaError::InvalidSnapshot(format!(
                    "{} labels for {n} gNBs",
                    labels.len()
                )));
            }
        }
        if let Some(p) = &self.truth_position {
            if !p.is_finite() {
                return Err(CdaError::InvalidSnapshot("non-finite truth position".into()));
            }
        }
        if let Some(rtt) = &self.rtt {
            if rtt.len() != n {
                return Err(CdaError::InvalidSnapshot(format!("{} RTTs for {n} gNBs", rtt.len())));
            }
            for (i, (t, d)) in rtt.iter().zip(&self.ranges).enumerate() {
                if (t * SPEED_OF_LIGHT / 2.0 - d).abs() > 1e-9 {
                    return Err(CdaError::InvalidSnapshot(format!("range {i} disagrees with its RTT")));
                }
            }
        }
        Ok(())
    }
}

/// All M-element subsets of {0..N-1} in lexicographic order.
pub fn enumerate_subsets(n: usize, m: usize) -> Result<Vec<Vec<usize>>, CdaError> {
    if m < 3 || m > n {
        return Err(CdaError::InvalidArity { n, m });
    }
    let mut out = Vec::new();
    let mut current: Vec<usize> = (0..m).collect();
    loop {
        out.push(current.clone());
        // Rightmost position that can still be advanced.
        let Some(i) = (0..m).rev().find(|&i| current[i] < n - m + i) else {
            break;
        };
        current[i] += 1;
        for j in i + 1..m {
            current[j] = current[j - 1] + 1;
        }
    }
    Ok(out)
}

/// Binomial coefficient C(n, k).
pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

fn mask_of(subset: &[usize]) -> u64 {
    subset.iter().fold(0u64, |m, &i| m | (1u64 << i))
}

/// Bitmask of a gNB index set.
pub fn gnb_mask(indices: &[usize]) -> u64 {
    mask_of(indices)
}

/// The PEL ensemble of one snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct PelEnsemble {
    n_gnbs: usize,
    subset_size: usize,
    subsets: Vec<Vec<usize>>,
    masks: Vec<u64>,
    /// `None` where the subset solver failed.
    pels: Vec<Option<Point2>>,
}

impl PelEnsemble {
    /// Assemble an ensemble from precomputed PELs, one per lexicographic subset.
    pub fn from_parts(n_gnbs: usize, subset_size: usize, pels: Vec<Option<Point2>>) -> Result<Self, CdaError> {
        if n_gnbs > MAX_GNBS {
            return Err(CdaError::TooManyGnbs(n_gnbs));
        }
        let subsets = enumerate_subsets(n_gnbs, subset_size)?;
        if subsets.len() != pels.len() {
            return Err(CdaError::InvalidSnapshot(format!(
                "{} PELs for {} subsets",
                pels.len(),
                subsets.len()
            )));
        }
        let masks = subsets.iter().map(|s| mask_of(s)).collect();
        Ok(Self {
            n_gnbs,
            subset_size,
            subsets,
            masks,
            pels,
        })
    }

    pub fn num_gnbs(&self) -> usize {
        self.n_gnbs
    }

    pub fn subset_size(&self) -> usize {
        self.subset_size
    }

    /// Ensemble size L = C(N, M), including invalid entries.
    pub fn len(&self) -> usize {
        self.subsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsets.is_empty()
    }

    pub fn subsets(&self) -> &[Vec<usize>] {
        &self.subsets
    }

    pub fn subset(&self, l: usize) -> &[usize] {
        &self.subsets[l]
    }

    pub fn mask(&self, l: usize) -> u64 {
        self.masks[l]
    }

    pub fn pel(&self, l: usize) -> Option<Point2> {
        self.pels[l]
    }

    pub fn pels(&self) -> &[Option<Point2>] {
        &self.pels
    }

    pub fn is_valid(&self, l: usize) -> bool {
        self.pels[l].is_some()
    }

    pub fn valid_count(&self) -> usize {
        self.pels.iter().filter(|p| p.is_some()).count()
    }

    pub fn valid_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&l| self.is_valid(l)).collect()
    }

    pub fn valid_points(&self) -> Vec<Point2> {
        self.pels.iter().flatten().copied().collect()
    }

    /// Valid PEL indices whose subset contains `n`, and the remaining valid ones.
    pub fn partition_indices(&self, n: usize) -> (Vec<usize>, Vec<usize>) {
        let bit = 1u64 << n;
        self.valid_indices()
            .into_iter()
            .partition(|&l| self.masks[l] & bit != 0)
    }

    /// Valid PEL indices whose subset lies inside `keep_mask`.
    pub fn restrict_indices(&self, keep_mask: u64) -> Vec<usize> {
        (0..self.len())
            .filter(|&l| self.is_valid(l) && self.masks[l] & !keep_mask == 0)
            .collect()
    }

    pub fn points_at(&self, indices: &[usize]) -> Vec<Point2> {
        indices.iter().filter_map(|&l| self.pels[l]).collect()
    }
}

/// Multilaterate every M-subset of the snapshot's gNBs. Subsets where the
/// solver fails are kept as invalid entries and never used downstream.
pub fn build_ensemble(snapshot: &Snapshot, subset_size: usize) -> Result<PelEnsemble, CdaError> {
    snapshot.validate()?;
    let n = snapshot.num_gnbs();
    let subsets = enumerate_subsets(n, subset_size)?;
    let mut anchors = Vec::with_capacity(subset_size);
    let mut ranges = Vec::with_capacity(subset_size);
    let pels: Vec<Option<Point2>> = subsets
        .iter()
        .map(|subset| {
            anchors.clear();
            ranges.clear();
            for &i in subset {
                anchors.push(snapshot.gnb_positions[i]);
                ranges.push(snapshot.ranges[i]);
            }
            multilaterate(&anchors, &ranges).ok()
        })
        .collect();
    let ensemble = PelEnsemble::from_parts(n, subset_size, pels)?;
    let valid = ensemble.valid_count();
    if valid < 2 {
        return Err(CdaError::TooFewValidPels { valid });
    }
    Ok(ensemble)
}

/// Valid PELs built with gNB `n` (Xₙ) and without it (X₋ₙ).
pub fn partition_by_gnb(ensemble: &PelEnsemble, n: usize) -> (Vec<Point2>, Vec<Point2>) {
    let (with, without) = ensemble.partition_indices(n);
    (ensemble.points_at(&with), ensemble.points_at(&without))
}

/// Valid PELs built only from gNBs in `keep`.
pub fn restrict_to_gnbs(ensemble: &PelEnsemble, keep: &[usize]) -> Vec<Point2> {
    ensemble.points_at(&ensemble.restrict_indices(gnb_mask(keep)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ring_snapshot(n: usize, truth: Point2) -> Snapshot {
        let gnbs: Vec<Point2> = (0..n)
            .map(|i| {
                let a = i as f64 * std::f64::consts::TAU / n as f64;
                Point2::new(50.0 * a.cos() + 3.0 * i as f64, 40.0 * a.sin())
            })
            .collect();
        let ranges = gnbs.iter().map(|z| z.distance(truth)).collect();
        let mut s = Snapshot::new(gnbs, ranges);
        s.truth_position = Some(truth);
        s
    }

    #[test]
    fn small_enumeration() {
        let s = enumerate_subsets(4, 3).unwrap();
        assert_eq!(s, vec![vec![0, 1, 2], vec![0, 1, 3], vec![0, 2, 3], vec![1, 2, 3]]);
        assert_eq!(enumerate_subsets(18, 3).unwrap().len(), 816);
        assert_eq!(enumerate_subsets(3, 3).unwrap(), vec![vec![0, 1, 2]]);
        assert_eq!(enumerate_subsets(5, 2), Err(CdaError::InvalidArity { n: 5, m: 2 }));
        assert_eq!(enumerate_subsets(3, 4), Err(CdaError::InvalidArity { n: 3, m: 4 }));
    }

    #[test]
    fn membership_counts() {
        let subsets = enumerate_subsets(6, 3).unwrap();
        assert_eq!(subsets.len(), 20);
        for n in 0..6 {
            let count = subsets.iter().filter(|s| s.contains(&n)).count();
            assert_eq!(count, 10);
        }
        // Distinct, sorted, lexicographic.
        for w in subsets.windows(2) {
            assert!(w[0] < w[1]);
        }
        assert!(subsets.iter().all(|s| s.windows(2).all(|p| p[0] < p[1])));
        assert_eq!(binomial(17, 2), 136);
        assert_eq!(binomial(18, 3), 816);
    }

    #[test]
    fn noiseless_ensemble_recovers_truth() {
        let truth = Point2::new(7.0, -3.0);
        let s = ring_snapshot(5, truth);
        let e = build_ensemble(&s, 3).unwrap();
        assert_eq!(e.len(), 10);
        assert_eq!(e.valid_count(), 10);
        for p in e.valid_points() {
            assert!(p.distance(truth) < 1e-6);
        }
    }

    #[test]
    fn biased_gnb_pulls_its_pels() {
        let truth = Point2::new(5.0, 2.0);
        let mut s = ring_snapshot(8, truth);
        s.ranges[0] += 10.0;
        let e = build_ensemble(&s, 3).unwrap();
        let (with, without) = partition_by_gnb(&e, 0);
        let mean_err = |pts: &[Point2]| pts.iter().map(|p| p.distance(truth)).sum::<f64>() / pts.len() as f64;
        assert!(mean_err(&with) > mean_err(&without));
        assert!(mean_err(&without) < 1e-6);
    }

    #[test]
    fn partitions_and_restrictions() {
        let e = build_ensemble(&ring_snapshot(4, Point2::new(1.0, 1.0)), 3).unwrap();
        let (a, b) = partition_by_gnb(&e, 0);
        assert_eq!((a.len(), b.len()), (3, 1));

        let e = build_ensemble(&ring_snapshot(18, Point2::new(1.0, 1.0)), 3).unwrap();
        assert_eq!(e.len(), 816);
        for n in 0..18 {
            let (a, b) = partition_by_gnb(&e, n);
            assert_eq!(a.len(), 136);
            assert_eq!(a.len() + b.len(), e.valid_count());
        }
        let all: Vec<usize> = (0..18).collect();
        assert_eq!(restrict_to_gnbs(&e, &all).len(), e.valid_count());
        assert!(restrict_to_gnbs(&e, &[0, 5]).is_empty());
        assert_eq!(restrict_to_gnbs(&e, &[0, 3, 4, 9, 17]).len(), 10);
    }

    #[test]
    fn random_validity_mask_partitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 9;
        let l = binomial(n, 3);
        let pels: Vec<Option<Point2>> = (0..l)
            .map(|i| rng.random_bool(0.7).then(|| Point2::new(i as f64, 0.0)))
            .collect();
        let e = PelEnsemble::from_parts(n, 3, pels.clone()).unwrap();
        let subsets = enumerate_subsets(n, 3).unwrap();
        for g in 0..n {
            let (a, b) = partition_by_gnb(&e, g);
            let mut brute_a = 0;
            let mut brute_b = 0;
            for (s, p) in subsets.iter().zip(&pels) {
                if p.is_some() {
                    if s.contains(&g) {
                        brute_a += 1;
                    } else {
                        brute_b += 1;
                    }
                }
            }
            assert_eq!((a.len(), b.len()), (brute_a, brute_b));
        }
    }

    #[test]
    fn collinear_subsets_are_invalid() {
        let gnbs = vec![
            Point2::new(0.0, 0.0),
            Point2::new(10.0, 0.0),
            Point2::new(20.0, 0.0),
            Point2::new(5.0, 10.0),
        ];
        let truth = Point2::new(4.0, 3.0);
        let ranges = gnbs.iter().map(|z| z.distance(truth)).collect();
        let e = build_ensemble(&Snapshot::new(gnbs, ranges), 3).unwrap();
        assert!(!e.is_valid(0));
        assert_eq!(e.valid_count(), 3);
    }

    #[test]
    fn snapshot_validation() {
        let mut s = ring_snapshot(4, Point2::ORIGIN);
        s.ranges.pop();
        assert!(matches!(s.validate(), Err(CdaError::InvalidSnapshot(_))));
        let mut s = ring_snapshot(4, Point2::ORIGIN);
        s.ranges[1] = -1.0;
        assert!(s.validate().is_err());

        let gnbs = ring_snapshot(4, Point2::ORIGIN).gnb_positions;
        let s = Snapshot::from_rtt(gnbs, vec![1e-7, 2e-7, 3e-7, 4e-7]);
        s.validate().unwrap();
        assert!((s.ranges[0] - 14.9896229).abs() < 1e-6);
        let mut bad = s.clone();
        bad.ranges[2] += 1e-6;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn deterministic_build() {
        let mut s = ring_snapshot(7, Point2::new(2.0, 9.0));
        s.ranges[3] += 4.0;
        assert_eq!(build_ensemble(&s, 3).unwrap(), build_ensemble(&s, 3).unwrap());
    }
}
