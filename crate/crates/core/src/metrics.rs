//! Detection and positioning metrics, and the kernel two-sample statistic used
//! to watch the PEL distribution settle as gNBs are added.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cda::{build_ensemble, LinkState, PelEnsemble, Snapshot, DEFAULT_SUBSET_SIZE};
use crate::geometry::Point2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("empty input")]
    EmptySet,
    #[error("length mismatch: {left} predictions for {right} labels")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Ensemble(#[from] crate::cda::CdaError),
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut carry = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

/// Counts with NLoS as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
}

impl Confusion {
    pub fn from_labels(predicted: &[bool], truth: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.true_positive += 1,
                (true, false) => c.false_positive += 1,
                (false, false) => c.true_negative += 1,
                (false, true) => c.false_negative += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.true_positive + self.false_positive + self.true_negative + self.false_negative
    }

    fn ratio(num: usize, den: usize) -> Option<f64> {
        (den > 0).then(|| num as f64 / den as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        Self::ratio(self.true_positive, self.true_positive + self.false_negative)
    }

    pub fn precision(&self) -> Option<f64> {
        Self::ratio(self.true_positive, self.true_positive + self.false_positive)
    }

    pub fn accuracy(&self) -> Option<f64> {
        Self::ratio(self.true_positive + self.true_negative, self.total())
    }
}

/// Detection quality; ratios are `None` where their denominator is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub confusion: Confusion,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
}

impl DetectionSummary {
    fn new(confusion: Confusion, auc: Option<f64>) -> Self {
        Self {
            confusion,
            recall: confusion.recall(),
            precision: confusion.precision(),
            accuracy: confusion.accuracy(),
            auc,
        }
    }
}

fn check_lengths(left: usize, right: usize) -> Result<(), MetricsError> {
    if left != right {
        return Err(MetricsError::LengthMismatch { left, right });
    }
    if left == 0 {
        return Err(MetricsError::EmptySet);
    }
    Ok(())
}

fn nlos_flags(labels: &[LinkState]) -> Vec<bool> {
    labels.iter().map(|l| l.is_nlos()).collect()
}

/// Metrics of hard labels; the AUC comes from the continuous scores.
pub fn hard_detection_metrics(
    predicted: &[LinkState],
    scores: &[f64],
    truth: &[LinkState],
) -> Result<DetectionSummary, MetricsError> {
    check_lengths(predicted.len(), truth.len())?;
    check_lengths(scores.len(), truth.len())?;
    let truth = nlos_flags(truth);
    let confusion = Confusion::from_labels(&nlos_flags(predicted), &truth);
    Ok(DetectionSummary::new(confusion, auc_trapezoid(scores, &truth)))
}

/// Metrics of soft decisions thresholded at `threshold` (NLoS iff ψ ≥ threshold).
pub fn soft_detection_metrics(
    probabilities: &[f64],
    truth: &[LinkState],
    threshold: f64,
) -> Result<DetectionSummary, MetricsError> {
    check_lengths(probabilities.len(), truth.len())?;
    let truth = nlos_flags(truth);
    let predicted: Vec<bool> = probabilities.iter().map(|&p| p >= threshold).collect();
    let confusion = Confusion::from_labels(&predicted, &truth);
    Ok(DetectionSummary::new(confusion, auc_trapezoid(probabilities, &truth)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores at or above this value are called NLoS.
    pub threshold: f64,
    pub false_positive_rate: f64,
    pub true_positive_rate: f64,
}

/// ROC curve swept over every distinct score, from (0, 0) to (1, 1).
/// `None` when either class is absent.
pub fn roc_curve(scores: &[f64], truth: &[bool]) -> Option<Vec<RocPoint>> {
    let positives = truth.iter().filter(|&&t| t).count();
    let negatives = truth.len() - positives;
    if positives == 0 || negatives == 0 || scores.len() != truth.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        false_positive_rate: 0.0,
        true_positive_rate: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let value = scores[order[i]];
        while i < order.len() && scores[order[i]] == value {
            if truth[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: value,
            false_positive_rate: fp as f64 / negatives as f64,
            true_positive_rate: tp as f64 / positives as f64,
        });
    }
    Some(points)
}

/// Area under the ROC curve by the trapezoidal rule. Tied scores form one
/// diagonal segment, which counts them as half concordant.
pub fn auc_trapezoid(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let roc = roc_curve(scores, truth)?;
    Some(
        roc.windows(2)
            .map(|w| {
                (w[1].false_positive_rate - w[0].false_positive_rate)
                    * (w[1].true_positive_rate + w[0].true_positive_rate)
                    / 2.0
            })
            .sum(),
    )
}

/// Mann–Whitney form of the AUC using mid-ranks.
pub fn auc_rank(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let positives = truth.iter().filter(|&&t| t).count();
    let negatives = truth.len() - positives;
    if positives == 0 || negatives == 0 || scores.len() != truth.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j share their average.
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * order[i..j].iter().filter(|&&k| truth[k]).count() as f64;
        i = j;
    }
    let p = positives as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

/// Positioning error statistics, in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub median: f64,
    /// Nearest-rank 95th percentile.
    pub p95: f64,
    /// Sorted errors.
    pub cdf: Vec<f64>,
}

pub fn error_stats(errors: &[f64]) -> Result<ErrorSummary, MetricsError> {
    if errors.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    if errors.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
        return Err(MetricsError::InvalidArgument(
            "errors must be finite and nonnegative".into(),
        ));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mean = compensated_sum(sorted.iter().copied()) / n as f64;
    let var = compensated_sum(sorted.iter().map(|e| (e - mean) * (e - mean))) / n as f64;
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    Ok(ErrorSummary {
        count: n,
        mean,
        std: var.sqrt(),
        median,
        p95: sorted[rank - 1],
        cdf: sorted,
    })
}

/// Median of a scratch buffer (reordered in place); even counts average the
/// two middle values.
fn median_in_place(values: &mut [f64]) -> f64 {
    let n = values.len();
    let (_, upper, _) = values.select_nth_unstable_by(n / 2, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = values[..n / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lower + upper) / 2.0
    }
}

/// Biased (V-statistic) squared MMD with kernel exp(−ς‖a − b‖²).
pub fn mmd_squared_with_bandwidth(a: &[Point2], b: &[Point2], bandwidth: f64) -> f64 {
    let mean_kernel = |x: &[Point2], y: &[Point2]| {
        let s = compensated_sum(
            x.iter()
                .flat_map(|p| y.iter().map(move |q| (-bandwidth * p.distance_squared(*q)).exp())),
        );
        s / (x.len() * y.len()) as f64
    };
    mean_kernel(a, a) + mean_kernel(b, b) - 2.0 * mean_kernel(a, b)
}

/// Median-heuristic bandwidth 1 / median of pairwise squared distances among
/// the distinct points of the union. `None` when all points coincide.
pub fn median_heuristic_bandwidth(a: &[Point2], b: &[Point2]) -> Option<f64> {
    let mut union: Vec<Point2> = a.iter().chain(b).copied().collect();
    union.sort_by(|p, q| p.x.total_cmp(&q.x).then(p.y.total_cmp(&q.y)));
    union.dedup();
    let mut d2: Vec<f64> = Vec::with_capacity(union.len() * union.len().saturating_sub(1) / 2);
    for i in 0..union.len() {
        for j in i + 1..union.len() {
            d2.push(union[i].distance_squared(union[j]));
        }
    }
    if d2.is_empty() {
        return None;
    }
    let m = median_in_place(&mut d2);
    (m > 0.0).then(|| 1.0 / m)
}

/// Squared MMD between two point sets with the median-heuristic bandwidth.
/// Returns 0 when every point of both sets coincides.
pub fn mmd_squared(a: &[Point2], b: &[Point2]) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    Ok(match median_heuristic_bandwidth(a, b) {
        Some(bw) => mmd_squared_with_bandwidth(a, b, bw),
        None => 0.0,
    })
}

/// Pairwise squared distances of an ensemble's valid PELs, reusable across
/// insertion orders.
pub struct EnsembleDistances {
    subsets: Vec<Vec<usize>>,
    d2: Vec<f64>,
    n_gnbs: usize,
}

impl EnsembleDistances {
    pub fn new(ensemble: &PelEnsemble) -> Self {
        let valid = ensemble.valid_indices();
        let points = ensemble.points_at(&valid);
        let k = points.len();
        let mut d2 = vec![0.0; k * k];
        for i in 0..k {
            for j in i + 1..k {
                let v = points[i].distance_squared(points[j]);
                d2[i * k + j] = v;
                d2[j * k + i] = v;
            }
        }
        Self {
            subsets: valid.iter().map(|&l| ensemble.subset(l).to_vec()).collect(),
            d2,
            n_gnbs: ensemble.num_gnbs(),
        }
    }

    /// MMD² between the PEL sets of the first N and first N − 1 gNBs of
    /// `order`, for N = n_min..=N_total.
    pub fn stabilization_curve(&self, order: &[usize], n_min: usize) -> Result<Vec<(usize, f64)>, MetricsError> {
        let n = self.n_gnbs;
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        if sorted != (0..n).collect::<Vec<_>>() {
            return Err(MetricsError::InvalidArgument(
                "order is not a permutation of the gNBs".into(),
            ));
        }
        if n_min < 4 || n_min > n {
            return Err(MetricsError::InvalidArgument(format!(
                "n_min must lie in 4..={n}, got {n_min}"
            )));
        }
        let mut position = vec![0; n];
        for (p, &g) in order.iter().enumerate() {
            position[g] = p;
        }
        // A PEL joins once its last gNB (in insertion order) arrives.
        let joins: Vec<usize> = self
            .subsets
            .iter()
            .map(|s| s.iter().map(|&g| position[g]).max().unwrap_or(0) + 1)
            .collect();
        let k = joins.len();
        let mut members: Vec<usize> = (0..k).collect();
        members.sort_by_key(|&i| joins[i]);

        let mut curve = Vec::with_capacity(n - n_min + 1);
        let mut scratch = Vec::new();
        for big in n_min..=n {
            let a_len = members.partition_point(|&i| joins[i] <= big);
            let b_len = members.partition_point(|&i| joins[i] < big);
            let (a, b) = (&members[..a_len], &members[..b_len]);
            if b.is_empty() {
                return Err(MetricsError::EmptySet);
            }
            // B ⊂ A, so the set union is A.
            scratch.clear();
            for (x, &i) in a.iter().enumerate() {
                for &j in &a[x + 1..] {
                    scratch.push(self.d2[i * k + j]);
                }
            }
            let bandwidth = if scratch.is_empty() {
                None
            } else {
                let m = median_in_place(&mut scratch);
                (m > 0.0).then(|| 1.0 / m)
            };
            let value = match bandwidth {
                None => 0.0,
                Some(bw) => {
                    // A = B ∪ D. One pass over the pairs i < j of A yields the
                    // off-diagonal kernel sums of B×B, B×D and D×D; the
                    // diagonal contributes exp(0) = 1 per point.
                    let d = &a[b.len()..];
                    let kernel = |i: usize, j: usize| (-bw * self.d2[i * k + j]).exp();
                    let upper = |x: &[usize]| {
                        compensated_sum(
                            x.iter()
                                .enumerate()
                                .flat_map(|(p, &i)| x[p + 1..].iter().map(move |&j| kernel(i, j))),
                        )
                    };
                    let s_bb = b.len() as f64 + 2.0 * upper(b);
                    let s_dd = d.len() as f64 + 2.0 * upper(d);
                    let s_bd = compensated_sum(b.iter().flat_map(|&i| d.iter().map(move |&j| kernel(i, j))));
                    let (na, nb) = (a.len() as f64, b.len() as f64);
                    (s_bb + 2.0 * s_bd + s_dd) / (na * na) + s_bb / (nb * nb) - 2.0 * (s_bb + s_bd) / (na * nb)
                }
            };
            curve.push((big, value));
        }
        Ok(curve)
    }
}

/// MMD² between consecutive ensembles as gNBs are added in `order`.
pub fn mmd_stabilization_curve(
    snapshot: &Snapshot,
    order: &[usize],
    n_min: usize,
) -> Result<Vec<(usize, f64)>, MetricsError> {
    let ensemble = build_ensemble(snapshot, DEFAULT_SUBSET_SIZE)?;
    EnsembleDistances::new(&ensemble).stabilization_curve(order, n_min)
}
