//! Output files. Everything is written to a temporary file next to its target
//! and renamed into place, and every file names the plan hash and seed.

use std::io::Write;
use std::path::Path;

use cdand::cda::{build_ensemble, LinkState};
use cdand::metrics::{roc_curve, EnsembleDistances};
use cdand::pipeline::{ExperimentPlan, RunResult, SurveyFit};
use cdand::scenario::{write_csv, write_json, FileFormat, SnapshotBatch};
use cdand::sdmap::gmm_posterior;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::CliError;

/// Stream used for the MMD insertion orders.
const MMD_STREAM: u64 = 0x3d3d;
/// Smallest ensemble size on an MMD curve.
const MMD_MIN_GNBS: usize = 4;
/// Points on the exported score-to-probability curve.
const CURVE_POINTS: usize = 200;

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_error(dir, e))?;
    tmp.write_all(bytes).map_err(|e| io_error(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_error(path, e))?;
    tmp.persist(path).map_err(|e| io_error(path, e.error))?;
    Ok(())
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

/// `# key=value` header lines shared by every CSV.
pub fn provenance_comments(plan_hash: &str, seed: u64) -> Vec<String> {
    vec![format!("plan_hash={plan_hash}"), format!("seed={seed}")]
}

struct CsvFile {
    writer: csv::Writer<Vec<u8>>,
}

impl CsvFile {
    fn new(comments: &[String], header: &[&str]) -> Self {
        let mut buf = Vec::new();
        for c in comments {
            buf.extend_from_slice(format!("# {c}\n").as_bytes());
        }
        let mut writer = csv::Writer::from_writer(buf);
        writer.write_record(header).expect("in-memory write");
        Self { writer }
    }

    fn row<I, T>(&mut self, fields: I)
    where
        I: IntoIterator<Item = T>,
        T: AsRef<[u8]>,
    {
        self.writer.write_record(fields).expect("in-memory write");
    }

    fn save(self, path: &Path) -> Result<(), CliError> {
        let bytes = self.writer.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
        write_atomic(path, &bytes)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn label(state: LinkState) -> &'static str {
    match state {
        LinkState::Los => "LoS",
        LinkState::Nlos => "NLoS",
    }
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    plan_hash: &'a str,
    seed: u64,
    #[serde(flatten)]
    body: &'a T,
}

pub fn write_stamped_json<T: Serialize>(path: &Path, plan_hash: &str, seed: u64, body: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(&Stamped { plan_hash, seed, body }).expect("serializable") + "\n";
    write_atomic(path, text.as_bytes())
}

pub fn write_batch(
    path: &Path,
    format: FileFormat,
    batch: &SnapshotBatch,
    comments: &[String],
) -> Result<(), CliError> {
    let mut buf = Vec::new();
    match format {
        FileFormat::Csv => write_csv(batch, &mut buf, comments),
        FileFormat::Json => write_json(batch, &mut buf, comments),
    }
    .map_err(|e| CliError::Data(e.to_string()))?;
    write_atomic(path, &buf)
}

/// All run artifacts: result JSON, summary, error CDFs, ROC, confusion and scores.
pub fn write_run(dir: &Path, result: &RunResult) -> Result<(), CliError> {
    let prov = &result.provenance;
    let comments = provenance_comments(&prov.plan_hash, prov.seed);
    write_atomic(&dir.join("run_result.json"), (result.to_json() + "\n").as_bytes())?;
    write_summary(&dir.join("summary.csv"), result, &comments)?;

    for (method, res) in &result.methods {
        let Some(errors) = &res.errors else { continue };
        let mut f = CsvFile::new(&comments, &["error_m", "cdf"]);
        let n = errors.cdf.len() as f64;
        for (i, e) in errors.cdf.iter().enumerate() {
            f.row([e.to_string(), ((i + 1) as f64 / n).to_string()]);
        }
        f.save(&dir.join("cdf").join(format!("{}.csv", method.name())))?;
    }

    let mut confusion = CsvFile::new(
        &comments,
        &["mode", "tp", "fp", "tn", "fn", "recall", "precision", "accuracy", "auc"],
    );
    for (mode, d) in &result.detection {
        let c = &d.confusion;
        confusion.row([
            mode.clone(),
            c.true_positive.to_string(),
            c.false_positive.to_string(),
            c.true_negative.to_string(),
            c.false_negative.to_string(),
            opt(d.recall),
            opt(d.precision),
            opt(d.accuracy),
            opt(d.auc),
        ]);
    }
    confusion.save(&dir.join("confusion.csv"))?;

    let mut scores = CsvFile::new(
        &comments,
        &["snapshot", "fold", "gnb", "score", "hd_label", "soft_decision", "truth"],
    );
    let (mut hd_scores, mut sd_scores, mut truth) = (Vec::new(), Vec::new(), Vec::new());
    for rec in &result.records {
        for n in 0..rec.hd_labels.len() {
            let sd = rec.soft_decision.as_ref().map(|v| v[n]);
            let t = rec.truth_labels.as_ref().map(|v| v[n]);
            scores.row([
                rec.index.to_string(),
                rec.fold.to_string(),
                n.to_string(),
                opt(rec.scores[n]),
                label(rec.hd_labels[n]).to_string(),
                opt(sd),
                t.map_or("", label).to_string(),
            ]);
            if let (Some(s), Some(t)) = (rec.scores[n], t) {
                hd_scores.push(s);
                sd_scores.push(sd);
                truth.push(t.is_nlos());
            }
        }
    }
    scores.save(&dir.join("scores.csv"))?;

    write_roc(&dir.join("roc_hd.csv"), &hd_scores, &truth, &comments)?;
    if sd_scores.iter().all(Option::is_some) && !sd_scores.is_empty() {
        let sd: Vec<f64> = sd_scores.into_iter().flatten().collect();
        write_roc(&dir.join("roc_sd.csv"), &sd, &truth, &comments)?;
    }
    Ok(())
}

fn write_summary(path: &Path, result: &RunResult, comments: &[String]) -> Result<(), CliError> {
    let mut f = CsvFile::new(
        comments,
        &[
            "scenario",
            "method",
            "count",
            "mae_m",
            "std_m",
            "median_m",
            "p95_m",
            "fallbacks",
            "failures",
        ],
    );
    for row in summary_rows(result) {
        f.row(row);
    }
    f.save(path)
}

/// One row per method, in the layout of `summary.csv`.
pub fn summary_rows(result: &RunResult) -> Vec<Vec<String>> {
    let scenario = &result.provenance.plan.label;
    result
        .methods
        .iter()
        .map(|(method, res)| {
            let e = res.errors.as_ref();
            vec![
                scenario.clone(),
                method.name().to_string(),
                e.map_or(0, |e| e.count).to_string(),
                opt(e.map(|e| e.mean)),
                opt(e.map(|e| e.std)),
                opt(e.map(|e| e.median)),
                opt(e.map(|e| e.p95)),
                res.fallbacks.to_string(),
                res.failures.to_string(),
            ]
        })
        .collect()
}

fn write_roc(path: &Path, scores: &[f64], truth: &[bool], comments: &[String]) -> Result<(), CliError> {
    let Some(curve) = roc_curve(scores, truth) else {
        return Ok(());
    };
    let mut f = CsvFile::new(comments, &["threshold", "false_positive_rate", "true_positive_rate"]);
    for p in curve {
        f.row([
            p.threshold.to_string(),
            p.false_positive_rate.to_string(),
            p.true_positive_rate.to_string(),
        ]);
    }
    f.save(path)
}

/// Survey mapping plus its GMM posterior and sigmoid sampled over the score range.
pub fn write_survey(
    dir: &Path,
    plan: &ExperimentPlan,
    fit: &SurveyFit,
    scores_range: (f64, f64),
) -> Result<(), CliError> {
    let hash = plan.hash();
    write_stamped_json(&dir.join("sd_mapping.json"), &hash, plan.seed, fit)?;
    let gmm = fit.mapping.gmm();
    let (lo, hi) = scores_range;
    let mut f = CsvFile::new(
        &provenance_comments(&hash, plan.seed),
        &["score", "gmm_posterior", "sd"],
    );
    for i in 0..CURVE_POINTS {
        let rho = lo + (hi - lo) * i as f64 / (CURVE_POINTS - 1) as f64;
        f.row([
            rho.to_string(),
            gmm_posterior(&gmm, rho).to_string(),
            fit.mapping.evaluate(rho).to_string(),
        ]);
    }
    f.save(&dir.join("sd_curve.csv"))
}

/// Median MMD² against ensemble size over random gNB insertion orders.
pub fn write_mmd(
    path: &Path,
    batch: &SnapshotBatch,
    plan: &ExperimentPlan,
    orders: usize,
    max_snapshots: usize,
) -> Result<(), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    rng.set_stream(MMD_STREAM);
    let mut by_size: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    for snapshot in batch.snapshots.iter().take(max_snapshots) {
        let Ok(ensemble) = build_ensemble(snapshot, plan.subset_size) else {
            continue;
        };
        let distances = EnsembleDistances::new(&ensemble);
        let mut order: Vec<usize> = (0..snapshot.num_gnbs()).collect();
        for _ in 0..orders {
            order.shuffle(&mut rng);
            let Ok(curve) = distances.stabilization_curve(&order, MMD_MIN_GNBS) else {
                continue;
            };
            for (n, v) in curve {
                by_size.entry(n).or_default().push(v);
            }
        }
    }
    let mut f = CsvFile::new(
        &provenance_comments(&plan.hash(), plan.seed),
        &["gnbs", "median_mmd2", "curves"],
    );
    for (n, values) in by_size {
        f.row([
            n.to_string(),
            opt(cdand::geometry::median(&values)),
            values.len().to_string(),
        ]);
    }
    f.save(path)
}
