//! End-to-end experiment: per-snapshot detection and positioning, with the
//! soft-decision mapping fitted per cross-validation fold on held-out snapshots.

use std::collections::BTreeMap;
use std::path::PathBuf;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cda::{build_ensemble, LinkState, PelEnsemble, DEFAULT_SUBSET_SIZE};
use crate::detect::{detect, ScoreReport};
use crate::geometry::Point2;
use crate::metrics::{error_stats, hard_detection_metrics, soft_detection_metrics, DetectionSummary, ErrorSummary};
use crate::position::{estimate, EstimationInputs, Method, MethodFilters, PositionEstimate};
use crate::refine::{refine_scores, unrefined_sd, RefineConfig, RefineError};
use crate::scenario::{generate, ingest, FileFormat, Preset, ScenarioConfig, ScenarioError, SnapshotBatch};
use crate::sdmap::{
    fit_cem, fit_sigmoid, CemFit, SdError, SdMapping, SigmoidFit, SurveyPrior, DEFAULT_CEM_EPS, DEFAULT_CEM_MAX_ITER,
    DEFAULT_COMPONENTS,
};

/// Extra seeds tried when a mixture component empties out during the survey fit.
const SURVEY_RETRIES: u64 = 5;
/// Stream used for the fold shuffle.
const FOLD_STREAM: u64 = 0xf01d;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("fold {fold}: training data has no usable labels (NLoS fraction {pi})")]
    InsufficientLabels { fold: usize, pi: f64 },
    #[error("fold {fold}: survey fit failed: {source}")]
    Survey { fold: usize, source: SdError },
    #[error("no snapshot could be processed")]
    NoUsableSnapshots,
}

/// Where the measurements come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ScenarioSource {
    Synthetic { config: ScenarioConfig },
    File { path: PathBuf, format: FileFormat },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    /// Scenario name carried into exported summaries.
    pub label: String,
    pub scenario: ScenarioSource,
    pub lambda: f64,
    pub filters: MethodFilters,
    /// Mixture order of the soft-decision fit.
    pub components: usize,
    /// Convergence tolerance of the refinement loop.
    pub eps: f64,
    pub t_max: usize,
    pub cem_eps: f64,
    pub cem_max_iter: usize,
    pub folds: usize,
    /// Keep drops of one scenario instantiation in the same fold.
    pub fold_by_instance: bool,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub subset_size: usize,
    /// Soft decisions at or above this value count as NLoS.
    pub sd_threshold: f64,
}

impl ExperimentPlan {
    /// Defaults for a preset: its λ and filter ratios, K = 8, ε = 1e-3,
    /// T_max = 25, 10 folds and all methods.
    pub fn for_preset(preset: Preset, seed: u64, drops: usize) -> Self {
        Self {
            label: preset.name().to_string(),
            scenario: ScenarioSource::Synthetic {
                config: preset.config(seed, drops),
            },
            lambda: preset.lambda(),
            filters: preset.filters(),
            components: DEFAULT_COMPONENTS,
            eps: crate::refine::DEFAULT_REFINE_EPS,
            t_max: crate::refine::DEFAULT_MAX_ITERATIONS,
            cem_eps: DEFAULT_CEM_EPS,
            cem_max_iter: DEFAULT_CEM_MAX_ITER,
            folds: 10,
            fold_by_instance: false,
            methods: Method::ALL.to_vec(),
            seed,
            subset_size: DEFAULT_SUBSET_SIZE,
            sd_threshold: 0.5,
        }
    }

    pub fn needs_soft_decision(&self) -> bool {
        self.methods.iter().any(|m| m.needs_soft_decision())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidPlan(m));
        if self.methods.is_empty() {
            return bad("no methods requested".into());
        }
        if !(self.lambda > 0.0) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        for f in [self.filters.cda_rers, self.filters.nd_rers_hd, self.filters.nd_rers_sd] {
            if crate::position::FilterConfig::new(f.re_ratio, f.rs_ratio).is_err() {
                return bad(format!("filter ratios must lie in (0, 1], got {f:?}"));
            }
        }
        if self.needs_soft_decision() && self.folds < 2 {
            return bad("soft-decision methods need at least 2 folds".into());
        }
        if self.folds == 0 {
            return bad("folds must be positive".into());
        }
        if self.components < 2 {
            return bad("components must be at least 2".into());
        }
        if !(self.eps >= 0.0 && self.cem_eps >= 0.0) || self.t_max == 0 {
            return bad("eps must be nonnegative and t_max positive".into());
        }
        if self.subset_size < 3 {
            return bad("subset size must be at least 3".into());
        }
        if let ScenarioSource::Synthetic { config } = &self.scenario {
            config.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the plan's canonical JSON.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("plan serializes").as_bytes())
    }

    pub fn load_data(&self) -> Result<SnapshotBatch, PipelineError> {
        Ok(match &self.scenario {
            ScenarioSource::Synthetic { config } => generate(config)?,
            ScenarioSource::File { path, format } => ingest(path, *format)?,
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A fitted soft-decision mapping and how the fit went.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyFit {
    pub mapping: SdMapping,
    pub samples: usize,
    pub cem: CemDiagnostics,
    pub sigmoid_objective: f64,
    pub sigmoid_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CemDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub monotone_violations: usize,
    pub log_likelihood: Vec<f64>,
    pub seed: u64,
}

impl CemDiagnostics {
    fn from_fit(fit: &CemFit, seed: u64) -> Self {
        Self {
            iterations: fit.iterations,
            converged: fit.converged,
            monotone_violations: fit.monotone_violations,
            log_likelihood: fit.log_likelihood.clone(),
            seed,
        }
    }
}

/// Fit the mapping from training scores and labels. π is the NLoS label frequency.
pub fn survey_fit_from_scores(
    scores: &[f64],
    nlos_count: usize,
    label_count: usize,
    components: usize,
    seed: u64,
    cem_eps: f64,
    cem_max_iter: usize,
) -> Result<SurveyFit, SdError> {
    let pi = if label_count == 0 {
        0.0
    } else {
        nlos_count as f64 / label_count as f64
    };
    let prior = SurveyPrior::new(scores.to_vec(), pi)?;
    let mut last_err = None;
    for attempt in 0..=SURVEY_RETRIES {
        let s = seed.wrapping_add(attempt);
        match fit_cem(&prior, components, s, cem_eps, cem_max_iter) {
            Ok(cem) => {
                let sig: SigmoidFit = fit_sigmoid(&cem.params, pi, scores)?;
                return Ok(SurveyFit {
                    mapping: SdMapping::new(&cem.params, &sig.params, pi, s),
                    samples: scores.len(),
                    cem: CemDiagnostics::from_fit(&cem, s),
                    sigmoid_objective: sig.objective,
                    sigmoid_iterations: sig.iterations,
                });
            }
            Err(e @ SdError::EmptyResponsibility { .. }) => {
                warn!("survey fit with seed {s} failed ({e}), retrying");
                last_err = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

/// Survey phase on a labelled batch: HD scores of every link form the sample.
pub fn survey_fit(train: &SnapshotBatch, plan: &ExperimentPlan, seed: u64) -> Result<SurveyFit, PipelineError> {
    let reports: Vec<Option<ScoreReport>> = train
        .snapshots
        .par_iter()
        .map(|s| {
            let e = build_ensemble(s, plan.subset_size).ok()?;
            detect(&e, s, plan.lambda).ok()
        })
        .collect();
    let (scores, nlos, total) = collect_survey_samples(train, &reports, 0..train.len());
    fit_from_samples(&scores, nlos, total, plan, seed, 0)
}

fn fit_from_samples(
    scores: &[f64],
    nlos: usize,
    total: usize,
    plan: &ExperimentPlan,
    seed: u64,
    fold: usize,
) -> Result<SurveyFit, PipelineError> {
    let pi = if total == 0 { 0.0 } else { nlos as f64 / total as f64 };
    if !(pi > 0.0 && pi < 1.0) {
        return Err(PipelineError::InsufficientLabels { fold, pi });
    }
    survey_fit_from_scores(
        scores,
        nlos,
        total,
        plan.components,
        seed,
        plan.cem_eps,
        plan.cem_max_iter,
    )
    .map_err(|source| PipelineError::Survey { fold, source })
}

fn collect_survey_samples(
    batch: &SnapshotBatch,
    reports: &[Option<ScoreReport>],
    indices: impl Iterator<Item = usize>,
) -> (Vec<f64>, usize, usize) {
    let mut scores = Vec::new();
    let (mut nlos, mut total) = (0, 0);
    for i in indices {
        let Some(report) = &reports[i] else { continue };
        let Some(labels) = &batch.snapshots[i].truth_labels else {
            continue;
        };
        for (score, label) in report.scores().iter().zip(labels) {
            if let Some(s) = score {
                scores.push(*s);
                total += 1;
                nlos += label.is_nlos() as usize;
            }
        }
    }
    (scores, nlos, total)
}

/// Fold index of every snapshot: a seeded shuffle dealt round-robin, either
/// over snapshots or over scenario instances.
pub fn assign_folds(batch: &SnapshotBatch, folds: usize, seed: u64, by_instance: bool) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(FOLD_STREAM);
    let n = batch.len();
    if by_instance {
        let key = |i: usize| batch.snapshots[i].instance.unwrap_or(usize::MAX - i);
        let mut groups: Vec<usize> = (0..n).map(key).collect();
        groups.sort_unstable();
        groups.dedup();
        groups.shuffle(&mut rng);
        let fold_of: BTreeMap<usize, usize> = groups.iter().enumerate().map(|(p, &g)| (g, p % folds)).collect();
        (0..n).map(|i| fold_of[&key(i)]).collect()
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut fold = vec![0; n];
        for (p, &i) in order.iter().enumerate() {
            fold[i] = p % folds;
        }
        fold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineSummary {
    pub iterations: usize,
    pub converged: bool,
    pub convergence_sum: f64,
    /// Refinement was impossible (no HD-only PELs); unrefined soft decisions used.
    pub empty_hd_set: bool,
}

/// Everything computed for one evaluated snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub index: usize,
    pub fold: usize,
    pub scores: Vec<Option<f64>>,
    pub hd_labels: Vec<LinkState>,
    pub threshold: f64,
    pub soft_decision: Option<Vec<f64>>,
    pub refinement: Option<RefineSummary>,
    pub truth_labels: Option<Vec<LinkState>>,
    pub truth_position: Option<Point2>,
    pub estimates: BTreeMap<Method, PositionEstimate>,
}

impl SnapshotRecord {
    pub fn error(&self, method: Method) -> Option<f64> {
        Some(self.estimates.get(&method)?.point.distance(self.truth_position?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    /// `None` when no evaluated snapshot has a truth position.
    pub errors: Option<ErrorSummary>,
    pub estimates: usize,
    pub fallbacks: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMapping {
    pub fold: usize,
    pub train_snapshots: usize,
    pub eval_snapshots: usize,
    pub fit: SurveyFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementStats {
    pub snapshots: usize,
    pub converged: usize,
    pub empty_hd_set: usize,
    pub mean_iterations: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub plan: ExperimentPlan,
    pub plan_hash: String,
    pub data_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub snapshots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedSnapshot {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub methods: BTreeMap<Method, MethodResult>,
    /// Keyed by decision mode, "HD" or "SD".
    pub detection: BTreeMap<String, DetectionSummary>,
    pub mappings: Vec<FoldMapping>,
    pub refinement: Option<RefinementStats>,
    pub skipped: Vec<SkippedSnapshot>,
    pub provenance: Provenance,
    /// Per-snapshot detail for exports; not part of the JSON summary.
    #[serde(skip)]
    pub records: Vec<SnapshotRecord>,
}

impl RunResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }
}

/// Generate or load the plan's data and run it.
pub fn run(plan: &ExperimentPlan) -> Result<RunResult, PipelineError> {
    plan.validate()?;
    let batch = plan.load_data()?;
    run_on_batch(plan, &batch)
}

fn process_snapshot(
    plan: &ExperimentPlan,
    batch: &SnapshotBatch,
    index: usize,
    fold: usize,
    ensemble: &PelEnsemble,
    report: &ScoreReport,
    mapping: Option<&SdMapping>,
) -> SnapshotRecord {
    let snapshot = &batch.snapshots[index];
    let scores = report.scores();
    let (soft_decision, refinement) = match mapping {
        None => (None, None),
        Some(m) => {
            let sigmoid = m.sigmoid();
            let config = RefineConfig {
                eps: plan.eps,
                max_iterations: plan.t_max,
                unscored_sd: m.pi,
            };
            match refine_scores(ensemble, snapshot, report, &sigmoid, &config) {
                Ok(out) => (
                    Some(out.final_sd),
                    Some(RefineSummary {
                        iterations: out.iterations,
                        converged: out.converged,
                        convergence_sum: out.convergence_sum,
                        empty_hd_set: false,
                    }),
                ),
                Err(err) => {
                    if !matches!(err, RefineError::EmptyHdSet) {
                        warn!("snapshot {index}: refinement failed ({err}); using unrefined soft decisions");
                    }
                    (
                        Some(unrefined_sd(&scores, &sigmoid, m.pi)),
                        Some(RefineSummary {
                            iterations: 0,
                            converged: false,
                            convergence_sum: f64::NAN,
                            empty_hd_set: true,
                        }),
                    )
                }
            }
        }
    };
    let inputs = EstimationInputs {
        ensemble: Some(ensemble),
        hard_decision: Some(&report.decision),
        soft_decision: soft_decision.as_deref(),
        filters: plan.filters,
    };
    let mut estimates = BTreeMap::new();
    for &method in &plan.methods {
        match estimate(snapshot, method, &inputs) {
            Ok(e) => {
                estimates.insert(method, e);
            }
            Err(err) => warn!("snapshot {index}: {method} failed: {err}"),
        }
    }
    SnapshotRecord {
        index,
        fold,
        scores,
        hd_labels: report.decision.labels.clone(),
        threshold: report.decision.threshold,
        soft_decision,
        refinement,
        truth_labels: snapshot.truth_labels.clone(),
        truth_position: snapshot.truth_position,
        estimates,
    }
}

/// Run the plan's detection and positioning flow on an already-loaded batch.
pub fn run_on_batch(plan: &ExperimentPlan, batch: &SnapshotBatch) -> Result<RunResult, PipelineError> {
    plan.validate()?;
    let n = batch.len();
    let stage: Vec<Result<(PelEnsemble, ScoreReport), String>> = batch
        .snapshots
        .par_iter()
        .map(|s| {
            let e = build_ensemble(s, plan.subset_size).map_err(|e| e.to_string())?;
            let r = detect(&e, s, plan.lambda).map_err(|e| e.to_string())?;
            Ok((e, r))
        })
        .collect();
    let skipped: Vec<SkippedSnapshot> = stage
        .iter()
        .enumerate()
        .filter_map(|(index, r)| {
            r.as_ref().err().map(|reason| SkippedSnapshot {
                index,
                reason: reason.clone(),
            })
        })
        .collect();
    if skipped.len() == n {
        return Err(PipelineError::NoUsableSnapshots);
    }
    let reports: Vec<Option<ScoreReport>> = stage
        .iter()
        .map(|r| r.as_ref().ok().map(|(_, rep)| rep.clone()))
        .collect();

    let soft = plan.needs_soft_decision();
    let folds = if soft { plan.folds } else { plan.folds.max(1) };
    let fold_of = assign_folds(batch, folds, plan.seed, plan.fold_by_instance);

    let mut mappings = Vec::new();
    if soft {
        for fold in 0..folds {
            let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != fold).collect();
            let eval_count = n - train.len();
            assert!(
                train.iter().all(|&i| fold_of[i] != fold),
                "evaluation snapshot leaked into training"
            );
            let (scores, nlos, total) = collect_survey_samples(batch, &reports, train.iter().copied());
            let fit = fit_from_samples(&scores, nlos, total, plan, plan.seed.wrapping_add(fold as u64), fold)?;
            info!(
                "fold {fold}: pi = {:.3}, {} CEM iterations, sigmoid objective {:.3e}",
                fit.mapping.pi, fit.cem.iterations, fit.sigmoid_objective
            );
            mappings.push(FoldMapping {
                fold,
                train_snapshots: train.len(),
                eval_snapshots: eval_count,
                fit,
            });
        }
    }

    let records: Vec<SnapshotRecord> = stage
        .par_iter()
        .enumerate()
        .filter_map(|(index, r)| {
            let (ensemble, report) = r.as_ref().ok()?;
            let fold = fold_of[index];
            let mapping = mappings.get(fold).map(|m| &m.fit.mapping);
            Some(process_snapshot(plan, batch, index, fold, ensemble, report, mapping))
        })
        .collect();

    let mut methods = BTreeMap::new();
    for &method in &plan.methods {
        let errors: Vec<f64> = records.iter().filter_map(|r| r.error(method)).collect();
        let produced: Vec<&PositionEstimate> = records.iter().filter_map(|r| r.estimates.get(&method)).collect();
        methods.insert(
            method,
            MethodResult {
                errors: error_stats(&errors).ok(),
                estimates: produced.len(),
                fallbacks: produced.iter().filter(|e| e.fallback.is_some()).count(),
                failures: records.len() - produced.len(),
            },
        );
    }

    let mut detection = BTreeMap::new();
    let labelled: Vec<&SnapshotRecord> = records.iter().filter(|r| r.truth_labels.is_some()).collect();
    if !labelled.is_empty() {
        let (mut pred, mut score, mut truth, mut prob) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for r in &labelled {
            let labels = r.truth_labels.as_ref().expect("filtered");
            for g in 0..labels.len() {
                let Some(s) = r.scores[g] else { continue };
                pred.push(r.hd_labels[g]);
                score.push(s);
                truth.push(labels[g]);
                if let Some(sd) = &r.soft_decision {
                    prob.push(sd[g]);
                }
            }
        }
        if !truth.is_empty() {
            if let Ok(summary) = hard_detection_metrics(&pred, &score, &truth) {
                detection.insert("HD".to_string(), summary);
            }
            if soft && prob.len() == truth.len() {
                if let Ok(summary) = soft_detection_metrics(&prob, &truth, plan.sd_threshold) {
                    detection.insert("SD".to_string(), summary);
                }
            }
        }
    }

    let refinement = soft.then(|| {
        let refined: Vec<&RefineSummary> = records.iter().filter_map(|r| r.refinement.as_ref()).collect();
        let ran: Vec<&&RefineSummary> = refined.iter().filter(|r| !r.empty_hd_set).collect();
        RefinementStats {
            snapshots: refined.len(),
            converged: ran.iter().filter(|r| r.converged).count(),
            empty_hd_set: refined.len() - ran.len(),
            mean_iterations: if ran.is_empty() {
                0.0
            } else {
                ran.iter().map(|r| r.iterations as f64).sum::<f64>() / ran.len() as f64
            },
        }
    });

    let data_json = serde_json::to_string(&batch.snapshots).expect("snapshots serialize");
    Ok(RunResult {
        methods,
        detection,
        mappings,
        refinement,
        skipped,
        provenance: Provenance {
            plan: plan.clone(),
            plan_hash: plan.hash(),
            data_hash: sha256_hex(data_json.as_bytes()),
            seed: plan.seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            snapshots: n,
        },
        records,
    })
}
