//! Synthetic measurement batches and file ingestion.
//!
//! A generated drop places the UE uniformly in the hall, draws each link's
//! propagation state, and forms dₙ = ‖zₙ − p‖ + γₙbₙ + wₙ. Every drop draws from
//! its own ChaCha stream, so batches are reproducible regardless of how the
//! drops are scheduled.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};
use thiserror::Error;

use crate::cda::{LinkState, Snapshot, MAX_GNBS};
use crate::geometry::Point2;
use crate::position::{FilterConfig, MethodFilters};

/// Stream offset separating per-instance draws from per-drop draws.
const INSTANCE_STREAM: u64 = 1 << 63;
const LOS_CORE_STD: f64 = 0.5;
const LOS_OUTLIER_WEIGHT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("parse error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { line: Option<u64>, message: String },
    #[error("snapshot {snapshot}: {message}")]
    SchemaMismatch { snapshot: usize, message: String },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for ScenarioError {
    fn from(e: std::io::Error) -> Self {
        ScenarioError::Io(e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::InvalidConfig(msg.into())
}

/// A scalar error distribution, parameterized by its mean and std where the
/// family allows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ErrorDist {
    Gaussian {
        mean: f64,
        std: f64,
    },
    /// Gaussian truncated to [0, ∞) whose truncated mean and std are `mean` and `std`.
    TruncatedGaussian {
        mean: f64,
        std: f64,
    },
    Exponential {
        mean: f64,
    },
    Mixture {
        components: Vec<MixtureComponent>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub dist: ErrorDist,
}

impl ErrorDist {
    pub fn mean(&self) -> f64 {
        match self {
            ErrorDist::Gaussian { mean, .. } | ErrorDist::TruncatedGaussian { mean, .. } => *mean,
            ErrorDist::Exponential { mean } => *mean,
            ErrorDist::Mixture { components } => components.iter().map(|c| c.weight * c.dist.mean()).sum(),
        }
    }

    pub fn std(&self) -> f64 {
        match self {
            ErrorDist::Gaussian { std, .. } | ErrorDist::TruncatedGaussian { std, .. } => *std,
            ErrorDist::Exponential { mean } => *mean,
            ErrorDist::Mixture { components } => {
                let m = self.mean();
                let second: f64 = components
                    .iter()
                    .map(|c| c.weight * (c.dist.std().powi(2) + c.dist.mean().powi(2)))
                    .sum();
                (second - m * m).max(0.0).sqrt()
            }
        }
    }

    /// Validate and precompute sampling parameters.
    pub fn sampler(&self) -> Result<ErrorSampler, ScenarioError> {
        match self {
            ErrorDist::Gaussian { mean, std } => {
                if !(mean.is_finite() && std.is_finite() && *std >= 0.0) {
                    return Err(invalid(format!(
                        "gaussian needs finite mean and std >= 0, got {mean}, {std}"
                    )));
                }
                Ok(ErrorSampler::Gaussian { mean: *mean, std: *std })
            }
            ErrorDist::TruncatedGaussian { mean, std } => {
                let (loc, scale) = truncated_gaussian_parameters(*mean, *std)?;
                Ok(ErrorSampler::TruncatedGaussian { loc, scale })
            }
            ErrorDist::Exponential { mean } => {
                if !(mean.is_finite() && *mean > 0.0) {
                    return Err(invalid(format!("exponential mean must be positive, got {mean}")));
                }
                Ok(ErrorSampler::Exponential {
                    dist: Exp::new(1.0 / mean).expect("positive rate"),
                })
            }
            ErrorDist::Mixture { components } => {
                if components.is_empty() {
                    return Err(invalid("mixture has no components"));
                }
                if components.iter().any(|c| !(c.weight > 0.0)) {
                    return Err(invalid("mixture weights must be positive"));
                }
                let total: f64 = components.iter().map(|c| c.weight).sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(invalid(format!("mixture weights sum to {total}")));
                }
                let mut cumulative = Vec::with_capacity(components.len());
                let mut acc = 0.0;
                let mut parts = Vec::with_capacity(components.len());
                for c in components {
                    acc += c.weight;
                    cumulative.push(acc);
                    parts.push(c.dist.sampler()?);
                }
                Ok(ErrorSampler::Mixture { cumulative, parts })
            }
        }
    }
}

fn standard_normal() -> StdNormal {
    StdNormal::new(0.0, 1.0).expect("unit normal")
}

/// Mean/std ratio of N(μ, σ²) truncated to [0, ∞), as a function of α = −μ/σ,
/// and the std of the truncated variable in units of σ.
fn truncated_moments(alpha: f64) -> (f64, f64) {
    let n = standard_normal();
    let tail = n.cdf(-alpha);
    let hazard = (-0.5 * alpha * alpha).exp() / (2.0 * std::f64::consts::PI).sqrt() / tail;
    let mean = hazard - alpha;
    let var = 1.0 + alpha * hazard - hazard * hazard;
    let sd = var.max(0.0).sqrt();
    (mean / sd, sd)
}

/// Underlying location and scale whose zero-truncation has the given mean and std.
pub fn truncated_gaussian_parameters(mean: f64, std: f64) -> Result<(f64, f64), ScenarioError> {
    if !(mean.is_finite() && std.is_finite() && mean > 0.0 && std > 0.0) {
        return Err(invalid(format!(
            "truncated gaussian needs positive mean and std, got {mean}, {std}"
        )));
    }
    let target = mean / std;
    let (lo_alpha, hi_alpha) = (-30.0, 25.0);
    if target >= truncated_moments(lo_alpha).0 {
        // Truncation is immaterial this far from zero.
        return Ok((mean, std));
    }
    if target <= truncated_moments(hi_alpha).0 {
        return Err(invalid(format!(
            "a zero-truncated gaussian cannot have mean/std = {target:.4} (must exceed 1)"
        )));
    }
    let (mut lo, mut hi) = (lo_alpha, hi_alpha);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if truncated_moments(mid).0 > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let alpha = 0.5 * (lo + hi);
    let scale = std / truncated_moments(alpha).1;
    Ok((-alpha * scale, scale))
}

/// Resolved, ready-to-sample form of an [`ErrorDist`].
#[derive(Debug, Clone)]
pub enum ErrorSampler {
    Gaussian {
        mean: f64,
        std: f64,
    },
    TruncatedGaussian {
        loc: f64,
        scale: f64,
    },
    Exponential {
        dist: Exp<f64>,
    },
    Mixture {
        cumulative: Vec<f64>,
        parts: Vec<ErrorSampler>,
    },
}

impl ErrorSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            ErrorSampler::Gaussian { mean, std } => {
                if *std == 0.0 {
                    *mean
                } else {
                    Normal::new(*mean, *std).expect("validated").sample(rng)
                }
            }
            ErrorSampler::TruncatedGaussian { loc, scale } => {
                // Inverse-CDF draw from the upper tail beyond α = −loc/scale.
                let n = standard_normal();
                let tail = n.cdf(loc / scale);
                let u: f64 = 1.0 - rng.random::<f64>();
                let z = -n.inverse_cdf((u * tail).min(1.0));
                (loc + scale * z).max(0.0)
            }
            ErrorSampler::Exponential { dist } => dist.sample(rng),
            ErrorSampler::Mixture { cumulative, parts } => {
                let u: f64 = rng.random::<f64>() * cumulative.last().copied().unwrap_or(1.0);
                let k = cumulative.iter().position(|&c| u < c).unwrap_or(parts.len() - 1);
                parts[k].sample(rng)
            }
        }
    }
}

/// Per-link NLoS occurrence model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum NlosModel {
    /// Independent Bernoulli(π) per link.
    Bernoulli { pi: f64 },
    /// P(NLoS) = 1 − exp(−distance / decay_m).
    DistanceDependent { decay_m: f64 },
    /// Random obstacle disks per instance; a link is NLoS iff it crosses one.
    BlockageDisks {
        count: usize,
        radius_min: f64,
        radius_max: f64,
    },
}

/// gNB placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    /// Regular `cols × rows` grid of cell centres.
    Grid {
        cols: usize,
        rows: usize,
    },
    /// Uniform positions, redrawn per instance.
    UniformRandom,
    Explicit {
        positions: Vec<Point2>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub width: f64,
    pub height: f64,
    pub n_gnb: usize,
    pub layout: Layout,
    pub nlos: NlosModel,
    /// Noise wₙ added to every link.
    pub los_noise: ErrorDist,
    /// Bias bₙ added to NLoS links.
    pub nlos_bias: ErrorDist,
    pub seed: u64,
    pub drops: usize,
    /// Consecutive drops sharing one layout/obstacle instantiation.
    pub drops_per_instance: usize,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.width > 0.0 && self.height > 0.0 && self.width.is_finite() && self.height.is_finite()) {
            return Err(invalid("area must be positive"));
        }
        if self.n_gnb < 4 || self.n_gnb > MAX_GNBS {
            return Err(invalid(format!(
                "gNB count must lie in 4..={MAX_GNBS}, got {}",
                self.n_gnb
            )));
        }
        if self.drops == 0 || self.drops_per_instance == 0 {
            return Err(invalid("drops and drops_per_instance must be positive"));
        }
        match &self.layout {
            Layout::Grid { cols, rows } if cols * rows != self.n_gnb => {
                return Err(invalid(format!("{cols}x{rows} grid does not hold {} gNBs", self.n_gnb)));
            }
            Layout::Explicit { positions } if positions.len() != self.n_gnb => {
                return Err(invalid(format!(
                    "{} explicit positions for {} gNBs",
                    positions.len(),
                    self.n_gnb
                )));
            }
            Layout::Explicit { positions } if positions.iter().any(|p| !p.is_finite()) => {
                return Err(invalid("non-finite explicit gNB position"));
            }
            _ => {}
        }
        match &self.nlos {
            NlosModel::Bernoulli { pi } if !(0.0..=1.0).contains(pi) => {
                return Err(invalid(format!("pi must lie in [0, 1], got {pi}")));
            }
            NlosModel::DistanceDependent { decay_m } if !(*decay_m > 0.0) => {
                return Err(invalid("decay_m must be positive"));
            }
            NlosModel::BlockageDisks {
                radius_min, radius_max, ..
            } if !(*radius_min >= 0.0 && radius_max >= radius_min) => {
                return Err(invalid("disk radii must satisfy 0 <= min <= max"));
            }
            _ => {}
        }
        self.los_noise.sampler()?;
        self.nlos_bias.sampler()?;
        Ok(())
    }
}

/// Named presets for the four indoor-factory configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "inf-sh-fr1")]
    InfShFr1,
    #[serde(rename = "inf-sh-fr2")]
    InfShFr2,
    #[serde(rename = "inf-dh-fr1")]
    InfDhFr1,
    #[serde(rename = "inf-dh-fr2")]
    InfDhFr2,
}

/// Range-error moments (mean, std) of LoS and NLoS links, in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeErrorMoments {
    pub los: (f64, f64),
    pub nlos: (f64, f64),
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::InfShFr1, Preset::InfShFr2, Preset::InfDhFr1, Preset::InfDhFr2];

    pub fn name(self) -> &'static str {
        match self {
            Preset::InfShFr1 => "inf-sh-fr1",
            Preset::InfShFr2 => "inf-sh-fr2",
            Preset::InfDhFr1 => "inf-dh-fr1",
            Preset::InfDhFr2 => "inf-dh-fr2",
        }
    }

    pub fn is_dense(self) -> bool {
        matches!(self, Preset::InfDhFr1 | Preset::InfDhFr2)
    }

    /// Average NLoS probability of the hall.
    pub fn pi(self) -> f64 {
        if self.is_dense() {
            0.56
        } else {
            0.18
        }
    }

    /// Measured range-error statistics the preset reproduces.
    pub fn target_moments(self) -> RangeErrorMoments {
        match self {
            Preset::InfShFr1 => RangeErrorMoments {
                los: (1.48, 5.92),
                nlos: (26.06, 20.08),
            },
            Preset::InfShFr2 => RangeErrorMoments {
                los: (4.35, 48.44),
                nlos: (64.69, 318.11),
            },
            Preset::InfDhFr1 => RangeErrorMoments {
                los: (4.00, 14.04),
                nlos: (25.13, 19.24),
            },
            Preset::InfDhFr2 => RangeErrorMoments {
                los: (3.23, 11.62),
                nlos: (26.84, 22.71),
            },
        }
    }

    /// Threshold multiplier for the hard decision.
    pub fn lambda(self) -> f64 {
        match self {
            Preset::InfShFr1 => 1.4,
            Preset::InfShFr2 => 1.1,
            Preset::InfDhFr1 | Preset::InfDhFr2 => 0.5,
        }
    }

    /// RE/RS keep ratios for the three filtered estimators.
    pub fn filters(self) -> MethodFilters {
        let f = |re, rs| FilterConfig {
            re_ratio: re,
            rs_ratio: rs,
        };
        match self {
            Preset::InfShFr1 => MethodFilters {
                cda_rers: f(0.63, 0.36),
                nd_rers_hd: f(0.88, 0.83),
                nd_rers_sd: f(0.98, 0.96),
            },
            Preset::InfShFr2 => MethodFilters {
                cda_rers: f(0.53, 0.26),
                nd_rers_hd: f(0.85, 0.75),
                nd_rers_sd: f(0.96, 0.94),
            },
            Preset::InfDhFr1 | Preset::InfDhFr2 => MethodFilters {
                cda_rers: f(0.15, 0.08),
                nd_rers_hd: f(0.23, 0.1),
                nd_rers_sd: f(0.30, 0.15),
            },
        }
    }

    fn noise_and_bias(self) -> (ErrorDist, ErrorDist) {
        let moments = self.target_moments();
        let (los_std, nlos_mean, nlos_std) = (moments.los.1, moments.nlos.0, moments.nlos.1);
        match self {
            Preset::InfShFr2 => {
                // Heavy tails: a 2% outlier component carries the large LoS
                // spread, and a 1% far outlier the NLoS spread.
                let los = ErrorDist::Mixture {
                    components: vec![
                        MixtureComponent {
                            weight: 0.98,
                            dist: ErrorDist::Gaussian { mean: 0.0, std: 3.0 },
                        },
                        MixtureComponent {
                            weight: 0.02,
                            dist: outlier_component(moments.los.0, los_std, 0.98, 0.0, 3.0, 0.02),
                        },
                    ],
                };
                let bias_mean = nlos_mean - moments.los.0;
                let bias_std = (nlos_std.powi(2) - los_std.powi(2)).sqrt();
                let bias = ErrorDist::Mixture {
                    components: vec![
                        MixtureComponent {
                            weight: 0.99,
                            dist: ErrorDist::TruncatedGaussian { mean: 30.0, std: 20.0 },
                        },
                        MixtureComponent {
                            weight: 0.01,
                            dist: outlier_component(bias_mean, bias_std, 0.99, 30.0, 20.0, 0.01),
                        },
                    ],
                };
                (los, bias)
            }
            _ => (
                heavy_tailed_los(moments.los.0, los_std),
                ErrorDist::TruncatedGaussian {
                    mean: nlos_mean - moments.los.0,
                    std: (nlos_std.powi(2) - los_std.powi(2)).sqrt(),
                },
            ),
        }
    }

    pub fn config(self, seed: u64, drops: usize) -> ScenarioConfig {
        let (width, height) = if self.is_dense() { (120.0, 60.0) } else { (300.0, 150.0) };
        let (los_noise, nlos_bias) = self.noise_and_bias();
        ScenarioConfig {
            width,
            height,
            n_gnb: 18,
            layout: Layout::Grid { cols: 6, rows: 3 },
            nlos: NlosModel::Bernoulli { pi: self.pi() },
            los_noise,
            nlos_bias,
            seed,
            drops,
            drops_per_instance: 10,
        }
    }
}

/// LoS ranging error: a tight core plus a positive outlier component that
/// carries the target mean and spread.
fn heavy_tailed_los(mean: f64, std: f64) -> ErrorDist {
    let core_weight = 1.0 - LOS_OUTLIER_WEIGHT;
    ErrorDist::Mixture {
        components: vec![
            MixtureComponent {
                weight: core_weight,
                dist: ErrorDist::Gaussian {
                    mean: 0.0,
                    std: LOS_CORE_STD,
                },
            },
            MixtureComponent {
                weight: LOS_OUTLIER_WEIGHT,
                dist: outlier_component(mean, std, core_weight, 0.0, LOS_CORE_STD, LOS_OUTLIER_WEIGHT),
            },
        ],
    }
}

/// Gaussian component that, mixed with a core of weight `core_weight` and the
/// given moments, yields an overall mixture with `mean` and `std`.
fn outlier_component(mean: f64, std: f64, core_weight: f64, core_mean: f64, core_std: f64, weight: f64) -> ErrorDist {
    let m = (mean - core_weight * core_mean) / weight;
    let second = std * std + mean * mean;
    let core_second = core_weight * (core_std * core_std + core_mean * core_mean);
    let var = (second - core_second) / weight - m * m;
    ErrorDist::Gaussian {
        mean: m,
        std: var.max(0.0).sqrt(),
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid(format!("unknown preset {s:?}")))
    }
}

/// Latent draws behind one synthetic snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTruth {
    /// γₙbₙ: zero for LoS links.
    pub bias: Vec<f64>,
    /// wₙ as realized after clamping: dₙ − ‖zₙ − p‖ − γₙbₙ.
    pub noise: Vec<f64>,
    /// Links whose raw range was negative and clamped to zero.
    pub clamped: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotBatch {
    pub snapshots: Vec<Snapshot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ScenarioConfig>,
    /// One entry per snapshot for synthetic batches, empty otherwise.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub generator_truth: Vec<GeneratorTruth>,
}

impl SnapshotBatch {
    pub fn from_snapshots(snapshots: Vec<Snapshot>) -> Self {
        Self {
            snapshots,
            config: None,
            generator_truth: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// Sub-batch with the given snapshot indices, in order.
    pub fn select(&self, indices: &[usize]) -> SnapshotBatch {
        SnapshotBatch {
            snapshots: indices.iter().map(|&i| self.snapshots[i].clone()).collect(),
            config: self.config.clone(),
            generator_truth: if self.generator_truth.is_empty() {
                Vec::new()
            } else {
                indices.iter().map(|&i| self.generator_truth[i].clone()).collect()
            },
        }
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct Instance {
    gnbs: Vec<Point2>,
    disks: Vec<(Point2, f64)>,
}

fn build_instance(config: &ScenarioConfig, index: usize) -> Instance {
    let mut rng = stream_rng(config.seed, INSTANCE_STREAM | index as u64);
    let (w, h) = (config.width, config.height);
    let gnbs = match &config.layout {
        Layout::Grid { cols, rows } => {
            let mut out = Vec::with_capacity(cols * rows);
            for j in 0..*rows {
                for i in 0..*cols {
                    out.push(Point2::new(
                        (i as f64 + 0.5) * w / *cols as f64,
                        (j as f64 + 0.5) * h / *rows as f64,
                    ));
                }
            }
            out
        }
        Layout::UniformRandom => (0..config.n_gnb)
            .map(|_| Point2::new(rng.random::<f64>() * w, rng.random::<f64>() * h))
            .collect(),
        Layout::Explicit { positions } => positions.clone(),
    };
    let disks = match &config.nlos {
        NlosModel::BlockageDisks {
            count,
            radius_min,
            radius_max,
        } => (0..*count)
            .map(|_| {
                let c = Point2::new(rng.random::<f64>() * w, rng.random::<f64>() * h);
                let r = radius_min + (radius_max - radius_min) * rng.random::<f64>();
                (c, r)
            })
            .collect(),
        _ => Vec::new(),
    };
    Instance { gnbs, disks }
}

fn segment_hits_disk(a: Point2, b: Point2, centre: Point2, radius: f64) -> bool {
    let ab = b - a;
    let len2 = ab.dot(ab);
    let t = if len2 > 0.0 {
        ((centre - a).dot(ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (a + ab * t).distance(centre) < radius
}

fn generate_drop(
    config: &ScenarioConfig,
    instance: &Instance,
    instance_index: usize,
    index: usize,
    noise: &ErrorSampler,
    bias: &ErrorSampler,
) -> (Snapshot, GeneratorTruth) {
    let mut rng = stream_rng(config.seed, index as u64);
    let ue = Point2::new(rng.random::<f64>() * config.width, rng.random::<f64>() * config.height);
    let n = instance.gnbs.len();
    let mut ranges = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut truth = GeneratorTruth {
        bias: Vec::with_capacity(n),
        noise: Vec::with_capacity(n),
        clamped: Vec::with_capacity(n),
    };
    for &z in &instance.gnbs {
        let dist = z.distance(ue);
        let nlos = match &config.nlos {
            NlosModel::Bernoulli { pi } => rng.random::<f64>() < *pi,
            NlosModel::DistanceDependent { decay_m } => rng.random::<f64>() < 1.0 - (-dist / decay_m).exp(),
            NlosModel::BlockageDisks { .. } => instance.disks.iter().any(|&(c, r)| segment_hits_disk(ue, z, c, r)),
        };
        let b = if nlos { bias.sample(&mut rng) } else { 0.0 };
        let w = noise.sample(&mut rng);
        let raw = dist + b + w;
        let d = raw.max(0.0);
        ranges.push(d);
        labels.push(LinkState::from_nlos(nlos));
        truth.bias.push(b);
        truth.noise.push(d - dist - b);
        truth.clamped.push(raw < 0.0);
    }
    let mut snapshot = Snapshot::new(instance.gnbs.clone(), ranges);
    snapshot.truth_labels = Some(labels);
    snapshot.truth_position = Some(ue);
    snapshot.instance = Some(instance_index);
    (snapshot, truth)
}

/// Generate a synthetic batch. Output depends only on the config.
pub fn generate(config: &ScenarioConfig) -> Result<SnapshotBatch, ScenarioError> {
    config.validate()?;
    let noise = config.los_noise.sampler()?;
    let bias = config.nlos_bias.sampler()?;
    let n_instances = config.drops.div_ceil(config.drops_per_instance);
    let instances: Vec<Instance> = (0..n_instances).map(|i| build_instance(config, i)).collect();
    let drops: Vec<(Snapshot, GeneratorTruth)> = (0..config.drops)
        .into_par_iter()
        .map(|i| {
            let inst = i / config.drops_per_instance;
            generate_drop(config, &instances[inst], inst, i, &noise, &bias)
        })
        .collect();
    let (snapshots, generator_truth) = drops.into_iter().unzip();
    Ok(SnapshotBatch {
        snapshots,
        config: Some(config.clone()),
        generator_truth,
    })
}

/// Supported measurement file formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FileFormat {
    Csv,
    Json,
}

impl FileFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(FileFormat::Csv),
            "json" => Some(FileFormat::Json),
            _ => None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    snapshot_id: usize,
    gnb_id: usize,
    z_x: f64,
    z_y: f64,
    range_m: Option<f64>,
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    true_x: Option<f64>,
    #[serde(default)]
    true_y: Option<f64>,
    #[serde(default)]
    instance: Option<usize>,
}

fn parse_label(text: &str) -> Option<LinkState> {
    match text.trim().to_ascii_lowercase().as_str() {
        "los" | "0" => Some(LinkState::Los),
        "nlos" | "1" => Some(LinkState::Nlos),
        _ => None,
    }
}

/// Write a batch as CSV, preceded by `#` comment lines.
pub fn write_csv<W: Write>(batch: &SnapshotBatch, mut out: W, comments: &[String]) -> Result<(), ScenarioError> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    let mut writer = csv::Writer::from_writer(out);
    let io = |e: csv::Error| ScenarioError::Io(e.to_string());
    for (s_id, s) in batch.snapshots.iter().enumerate() {
        for n in 0..s.num_gnbs() {
            let row = CsvRow {
                snapshot_id: s_id,
                gnb_id: n,
                z_x: s.gnb_positions[n].x,
                z_y: s.gnb_positions[n].y,
                range_m: Some(s.ranges[n]),
                label: s
                    .truth_labels
                    .as_ref()
                    .map(|l| if l[n].is_nlos() { "NLoS" } else { "LoS" }.to_string()),
                true_x: s.truth_position.map(|p| p.x),
                true_y: s.truth_position.map(|p| p.y),
                instance: s.instance,
            };
            writer.serialize(row).map_err(io)?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Parse a CSV batch. Columns bind by header name; `#` lines are comments.
pub fn read_csv<R: Read>(input: R) -> Result<SnapshotBatch, ScenarioError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut groups: BTreeMap<usize, Vec<CsvRow>> = BTreeMap::new();
    for row in reader.deserialize::<CsvRow>() {
        let row = row.map_err(|e| ScenarioError::Parse {
            line: e.position().map(|p| p.line()),
            message: e.to_string(),
        })?;
        groups.entry(row.snapshot_id).or_default().push(row);
    }
    let mut snapshots = Vec::with_capacity(groups.len());
    for (s_id, mut rows) in groups {
        let mismatch = |message: String| ScenarioError::SchemaMismatch {
            snapshot: s_id,
            message,
        };
        rows.sort_by_key(|r| r.gnb_id);
        for (i, r) in rows.iter().enumerate() {
            if r.gnb_id != i {
                return Err(mismatch(format!(
                    "gNB ids are not 0..{} (found {})",
                    rows.len(),
                    r.gnb_id
                )));
            }
        }
        let ranges: Vec<f64> = rows.iter().filter_map(|r| r.range_m).collect();
        if ranges.len() != rows.len() {
            return Err(mismatch(format!("{} ranges for {} gNB rows", ranges.len(), rows.len())));
        }
        let gnbs = rows.iter().map(|r| Point2::new(r.z_x, r.z_y)).collect();
        let mut snapshot = Snapshot::new(gnbs, ranges);
        let labels: Vec<Option<LinkState>> = rows
            .iter()
            .map(|r| r.label.as_deref().filter(|t| !t.trim().is_empty()).map(parse_label))
            .map(|l| l.map(|v| v.ok_or(())))
            .collect::<Vec<_>>()
            .into_iter()
            .map(|l| l.transpose().map_err(|_| mismatch("unrecognized label".into())))
            .collect::<Result<_, _>>()?;
        match labels.iter().filter(|l| l.is_some()).count() {
            0 => {}
            k if k == rows.len() => snapshot.truth_labels = Some(labels.into_iter().flatten().collect()),
            k => return Err(mismatch(format!("{k} labels for {} gNB rows", rows.len()))),
        }
        let truth: Vec<Option<Point2>> = rows
            .iter()
            .map(|r| match (r.true_x, r.true_y) {
                (Some(x), Some(y)) => Some(Point2::new(x, y)),
                _ => None,
            })
            .collect();
        if truth.iter().any(|t| *t != truth[0]) {
            return Err(mismatch("truth position differs between rows".into()));
        }
        snapshot.truth_position = truth[0];
        if rows.iter().any(|r| r.instance != rows[0].instance) {
            return Err(mismatch("instance differs between rows".into()));
        }
        snapshot.instance = rows[0].instance;
        snapshot.validate().map_err(|e| mismatch(e.to_string()))?;
        snapshots.push(snapshot);
    }
    Ok(SnapshotBatch::from_snapshots(snapshots))
}

#[derive(Serialize)]
struct JsonBatchOut<'a> {
    comments: &'a [String],
    snapshots: &'a [Snapshot],
}

#[derive(Deserialize)]
#[serde(untagged)]
enum JsonBatchIn {
    Bare(Vec<Snapshot>),
    Wrapped {
        #[serde(default)]
        #[allow(dead_code)]
        comments: Vec<String>,
        snapshots: Vec<Snapshot>,
    },
}

/// JSON form: `{"comments": [...], "snapshots": [...]}`. A bare array of
/// snapshots is also accepted on input.
pub fn write_json<W: Write>(batch: &SnapshotBatch, out: W, comments: &[String]) -> Result<(), ScenarioError> {
    let doc = JsonBatchOut {
        comments,
        snapshots: &batch.snapshots,
    };
    serde_json::to_writer_pretty(out, &doc).map_err(|e| ScenarioError::Io(e.to_string()))
}

pub fn read_json<R: Read>(input: R) -> Result<SnapshotBatch, ScenarioError> {
    let doc: JsonBatchIn = serde_json::from_reader(input).map_err(|e| ScenarioError::Parse {
        line: Some(e.line() as u64),
        message: e.to_string(),
    })?;
    let snapshots = match doc {
        JsonBatchIn::Bare(s) | JsonBatchIn::Wrapped { snapshots: s, .. } => s,
    };
    for (i, s) in snapshots.iter().enumerate() {
        s.validate().map_err(|e| ScenarioError::SchemaMismatch {
            snapshot: i,
            message: e.to_string(),
        })?;
    }
    Ok(SnapshotBatch::from_snapshots(snapshots))
}

/// Read a measurement file.
pub fn ingest(path: &Path, format: FileFormat) -> Result<SnapshotBatch, ScenarioError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    match format {
        FileFormat::Csv => read_csv(reader),
        FileFormat::Json => read_json(reader),
    }
}
