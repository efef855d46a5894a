//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL ...` line
//! straight to stderr (bypassing output capture) before asserting.
//!
//! The preset runs are shared: InF-DH FR1 and InF-SH FR1, 1000 drops each,
//! seed 1.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use cdand::cda::{build_ensemble, enumerate_subsets, Snapshot};
use cdand::detect::detect;
use cdand::geometry::{multilaterate, weighted_l1_median, Point2, WeightedPointSet};
use cdand::metrics::{auc_trapezoid, mmd_squared, EnsembleDistances};
use cdand::pipeline::{run, ExperimentPlan, RunResult};
use cdand::position::{estimate, filter_re_rs, EstimationInputs, FilterConfig, Method};
use cdand::scenario::{generate, Preset};
use cdand::sdmap::{fit_cem, gmm_posterior, SdError, SurveyPrior};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const SEED: u64 = 1;
const DROPS: usize = 1000;

fn report(id: usize, pass: bool, detail: impl AsRef<str>) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {id:>2}: {verdict}  {}", detail.as_ref());
}

fn check(id: usize, pass: bool, detail: String) {
    report(id, pass, &detail);
    assert!(pass, "criterion {id}: {detail}");
}

struct TimedRun {
    result: RunResult,
    elapsed: Duration,
}

// Serializes the heavy preset runs so timings are not inflated by each other.
static HEAVY: Mutex<()> = Mutex::new(());

fn preset_run(preset: Preset) -> TimedRun {
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let plan = ExperimentPlan::for_preset(preset, SEED, DROPS);
    let start = Instant::now();
    let result = run(&plan).expect("preset run");
    TimedRun {
        result,
        elapsed: start.elapsed(),
    }
}

fn dh_run() -> &'static TimedRun {
    static RUN: OnceLock<TimedRun> = OnceLock::new();
    RUN.get_or_init(|| preset_run(Preset::InfDhFr1))
}

fn sh_run() -> &'static TimedRun {
    static RUN: OnceLock<TimedRun> = OnceLock::new();
    RUN.get_or_init(|| preset_run(Preset::InfShFr1))
}

fn random_point(rng: &mut ChaCha8Rng, extent: f64) -> Point2 {
    Point2::new(rng.random_range(0.0..extent), rng.random_range(0.0..extent))
}

fn triangle_area(a: Point2, b: Point2, c: Point2) -> f64 {
    ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y)).abs() / 2.0
}

#[test]
fn criterion_01_geometry_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut cases = Vec::with_capacity(1000);
    while cases.len() < 1000 {
        let anchors = [
            random_point(&mut rng, 100.0),
            random_point(&mut rng, 100.0),
            random_point(&mut rng, 100.0),
        ];
        if triangle_area(anchors[0], anchors[1], anchors[2]) < 50.0 {
            continue;
        }
        let truth = random_point(&mut rng, 100.0);
        let ranges: Vec<f64> = anchors.iter().map(|a| a.distance(truth)).collect();
        cases.push((anchors, ranges, truth));
    }
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for (anchors, ranges, truth) in &cases {
        match multilaterate(anchors, ranges) {
            Ok(p) => worst = worst.max(p.distance(*truth)),
            Err(_) => failures += 1,
        }
    }
    let elapsed = start.elapsed();
    let pass = failures == 0 && worst < 1e-6 && elapsed < Duration::from_secs(1);
    check(
        1,
        pass,
        format!("1000 noiseless triples: max error {worst:.2e} m, {failures} failures, {elapsed:.2?}"),
    );
}

#[test]
fn criterion_02_ensemble_combinatorics() {
    let subsets = enumerate_subsets(18, 3).unwrap();
    // Brute force: every strictly increasing triple, in lexicographic order.
    let mut oracle = Vec::new();
    for a in 0..18 {
        for b in a + 1..18 {
            for c in b + 1..18 {
                oracle.push(vec![a, b, c]);
            }
        }
    }
    let mut sorted = subsets.clone();
    sorted.sort();
    sorted.dedup();

    // gNBs in general position, so every PEL is valid.
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let truth = Point2::new(61.0, 27.0);
    let gnbs: Vec<Point2> = (0..18).map(|_| random_point(&mut rng, 120.0)).collect();
    let ranges = gnbs.iter().map(|z| z.distance(truth)).collect();
    let ensemble = build_ensemble(&Snapshot::new(gnbs, ranges), 3).unwrap();
    let membership: Vec<usize> = (0..18).map(|n| ensemble.partition_indices(n).0.len()).collect();
    let pass = subsets.len() == 816
        && sorted == oracle
        && ensemble.valid_count() == 816
        && membership.iter().all(|&m| m == 136);
    check(
        2,
        pass,
        format!(
            "N=18, M=3: {} subsets ({} distinct), {} valid PELs, per-gNB membership {:?}",
            subsets.len(),
            sorted.len(),
            ensemble.valid_count(),
            membership.iter().min().zip(membership.iter().max())
        ),
    );
}

fn brute_weighted_l1(points: &[Point2], weights: &[f64]) -> f64 {
    // The per-axis objective is convex and piecewise linear with kinks at the
    // data, so its minimum is attained at one of them.
    let axis = |coord: &dyn Fn(&Point2) -> f64| {
        points
            .iter()
            .map(|c| {
                points
                    .iter()
                    .zip(weights)
                    .map(|(p, w)| w * (coord(p) - coord(c)).abs())
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
    };
    axis(&|p| p.x) + axis(&|p| p.y)
}

fn brute_auc(scores: &[f64], truth: &[bool]) -> f64 {
    let (mut acc, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if truth[i] && !truth[j] {
                pairs += 1.0;
                acc += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    acc / pairs
}

fn brute_mmd(a: &[Point2], b: &[Point2]) -> f64 {
    let mut union: Vec<Point2> = a.iter().chain(b).copied().collect();
    union.sort_by(|p, q| p.x.total_cmp(&q.x).then(p.y.total_cmp(&q.y)));
    union.dedup();
    let mut d2 = Vec::new();
    for i in 0..union.len() {
        for j in i + 1..union.len() {
            d2.push(union[i].distance_squared(union[j]));
        }
    }
    d2.sort_by(f64::total_cmp);
    let n = d2.len();
    let med = if n % 2 == 1 {
        d2[n / 2]
    } else {
        (d2[n / 2 - 1] + d2[n / 2]) / 2.0
    };
    let bw = 1.0 / med;
    let k = |x: &[Point2], y: &[Point2]| {
        let mut s = 0.0;
        for p in x {
            for q in y {
                s += (-bw * p.distance_squared(*q)).exp();
            }
        }
        s / (x.len() * y.len()) as f64
    };
    k(a, a) + k(b, b) - 2.0 * k(a, b)
}

fn brute_filter(
    snapshot: &Snapshot,
    valid: &[usize],
    pels: &[Option<Point2>],
    subsets: &[Vec<usize>],
    cfg: &FilterConfig,
) -> Vec<usize> {
    let re_of = |l: usize| -> f64 {
        let x = pels[l].unwrap();
        subsets[l]
            .iter()
            .map(|&n| (snapshot.ranges[n] - x.distance(snapshot.gnb_positions[n])).abs())
            .sum()
    };
    let rs_of = |l: usize| -> f64 { subsets[l].iter().map(|&n| snapshot.ranges[n]).sum() };
    let base = valid.len();
    let cut = |ratio: f64, current: usize| ((ratio * base as f64).round() as usize).clamp(1, current);
    let mut by_re: Vec<f64> = valid.iter().map(|&l| re_of(l)).collect();
    by_re.sort_by(f64::total_cmp);
    let re_cut = by_re[cut(cfg.re_ratio, base) - 1];
    let kept: Vec<usize> = valid.iter().copied().filter(|&l| re_of(l) <= re_cut).collect();
    let mut by_rs: Vec<f64> = kept.iter().map(|&l| rs_of(l)).collect();
    by_rs.sort_by(f64::total_cmp);
    let rs_cut = by_rs[cut(cfg.rs_ratio, kept.len()) - 1];
    kept.into_iter().filter(|&l| rs_of(l) <= rs_cut).collect()
}

#[test]
fn criterion_03_oracle_equivalence() {
    const INSTANCES: usize = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut mismatches: BTreeMap<&str, usize> = BTreeMap::new();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, err: f64, tol: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(err);
        *mismatches.entry(name).or_insert(0) += usize::from(err.is_nan() || err > tol);
    };

    for _ in 0..INSTANCES {
        let n = rng.random_range(3..25);
        let points: Vec<Point2> = (0..n).map(|_| random_point(&mut rng, 10.0)).collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        let set = WeightedPointSet::new(points.clone(), weights.clone()).unwrap();
        let m = weighted_l1_median(&set).unwrap();
        let oracle = brute_weighted_l1(&points, &weights);
        note(
            "weighted L1 median",
            (set.l1_objective(m) - oracle).abs() / oracle.max(1.0),
            1e-12,
        );

        let len = rng.random_range(4..40);
        let scores: Vec<f64> = (0..len).map(|_| rng.random_range(0..10) as f64).collect();
        let mut truth: Vec<bool> = (0..len).map(|_| rng.random_bool(0.4)).collect();
        truth[0] = true;
        truth[1] = false;
        note(
            "AUC",
            (auc_trapezoid(&scores, &truth).unwrap() - brute_auc(&scores, &truth)).abs(),
            1e-12,
        );

        let a: Vec<Point2> = (0..rng.random_range(2..20))
            .map(|_| random_point(&mut rng, 5.0))
            .collect();
        let b: Vec<Point2> = (0..rng.random_range(2..20))
            .map(|_| random_point(&mut rng, 5.0))
            .collect();
        note("MMD^2", (mmd_squared(&a, &b).unwrap() - brute_mmd(&a, &b)).abs(), 1e-10);

        let gnbs: Vec<Point2> = (0..rng.random_range(5..9))
            .map(|_| random_point(&mut rng, 50.0))
            .collect();
        let truth_pos = random_point(&mut rng, 50.0);
        let ranges = gnbs
            .iter()
            .map(|z| z.distance(truth_pos) + rng.random_range(0.0..1.0) + if rng.random_bool(0.3) { 20.0 } else { 0.0 })
            .collect();
        let snapshot = Snapshot::new(gnbs, ranges);
        let ensemble = build_ensemble(&snapshot, 3).unwrap();
        let valid = ensemble.valid_indices();
        if !valid.is_empty() {
            let cfg = FilterConfig::new(rng.random_range(0.05..1.0), rng.random_range(0.05..1.0)).unwrap();
            let got = filter_re_rs(&ensemble, &valid, &snapshot, &cfg);
            let want = brute_filter(&snapshot, &valid, ensemble.pels(), ensemble.subsets(), &cfg);
            note("RE/RS order statistics", if got == want { 0.0 } else { 1.0 }, 0.0);
        }
    }
    let pass = mismatches.values().all(|&m| m == 0);
    let detail = worst
        .iter()
        .map(|(k, v)| format!("{k}: {} mismatches, max dev {v:.1e}", mismatches[k]))
        .collect::<Vec<_>>()
        .join("; ");
    check(3, pass, format!("{INSTANCES} instances each; {detail}"));
}

fn score_like(seed: u64, pi: f64) -> Vec<f64> {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parts = [(1.0 - pi, 0.0, 3.0), (0.6 * pi, 20.0, 8.0), (0.4 * pi, 45.0, 15.0)];
    let mut out = Vec::new();
    for (w, mean, std) in parts {
        let normal = Normal::new(mean, std).unwrap();
        out.extend((0..(2000.0 * w) as usize).map(|_| normal.sample(&mut rng)));
    }
    out
}

#[test]
fn criterion_04_cem_correctness() {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut two: Vec<f64> = Normal::new(0.0, 1.0)
        .unwrap()
        .sample_iter(&mut rng)
        .take(5000)
        .collect();
    two.extend(Normal::new(10.0, 1.0).unwrap().sample_iter(&mut rng).take(5000));
    let fit = fit_cem(&SurveyPrior::new(two, 0.5).unwrap(), 2, 4, 1e-6, 500).unwrap();
    let mean_err = (fit.params.means[0] - 0.0)
        .abs()
        .max((fit.params.means[1] - 10.0).abs());

    let (mut steps, mut violations, mut worst_mass, mut retried) = (0usize, 0usize, fit.max_mass_error, 0usize);
    for seed in 0..100u64 {
        let pi = [0.18, 0.56][seed as usize % 2];
        let prior = SurveyPrior::new(score_like(7000 + seed, pi), pi).unwrap();
        let mut attempt = seed;
        let fit = loop {
            match fit_cem(&prior, 8, attempt, 1e-3, 500) {
                Ok(f) => break f,
                Err(SdError::EmptyResponsibility { .. }) if attempt < seed + 5 => {
                    retried += 1;
                    attempt += 1;
                }
                Err(e) => panic!("run {seed}: {e}"),
            }
        };
        worst_mass = worst_mass.max(fit.max_mass_error);
        steps += fit.log_likelihood.len() - 1;
        violations += fit.log_likelihood.windows(2).filter(|w| w[1] < w[0]).count();
    }
    let monotone = 1.0 - violations as f64 / steps as f64;
    let pass = mean_err < 0.1 && worst_mass <= 1e-9 && monotone >= 0.99;
    check(
        4,
        pass,
        format!(
            "K=2 mean error {mean_err:.3}; worst partition-mass error {worst_mass:.1e}; \
             LL non-decreasing on {:.2}% of {steps} iterations ({violations} violations, {retried} reseeded runs)",
            100.0 * monotone
        ),
    );
}

#[test]
fn criterion_05_posterior_mass_identity() {
    let mut worst: f64 = 0.0;
    for model in 0..20u64 {
        let pi = 0.12 + 0.035 * model as f64;
        let fit = fit_cem(
            &SurveyPrior::new(score_like(9000 + model, pi), pi).unwrap(),
            8,
            model,
            1e-3,
            500,
        )
        .unwrap();
        let p = &fit.params;
        let lo = (0..p.num_components())
            .map(|k| p.means[k] - 12.0 * p.stds[k])
            .fold(f64::INFINITY, f64::min);
        let hi = (0..p.num_components())
            .map(|k| p.means[k] + 12.0 * p.stds[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let smallest = p.stds.iter().copied().fold(f64::INFINITY, f64::min);
        let n = (((hi - lo) / (smallest / 20.0)).ceil() as usize).max(2000) / 2 * 2;
        let h = (hi - lo) / n as f64;
        let f = |r: f64| gmm_posterior(p, r) * p.density(r);
        let mut acc = f(lo) + f(hi);
        for i in 1..n {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(lo + i as f64 * h);
        }
        worst = worst.max((acc * h / 3.0 - pi).abs());
    }
    check(
        5,
        worst < 1e-4,
        format!("20 fitted models, max |integral - pi| = {worst:.2e}"),
    );
}

#[test]
fn criterion_06_refinement_loop() {
    let first = dh_run();
    let stats = first.result.refinement.as_ref().expect("refinement stats");
    let rate = stats.converged as f64 / stats.snapshots as f64;
    let in_range = first
        .result
        .records
        .iter()
        .flat_map(|r| r.soft_decision.iter().flatten())
        .all(|v| (0.0..=1.0).contains(v));
    let again = preset_run(Preset::InfDhFr1).result;
    let identical = again.to_json() == first.result.to_json()
        && serde_json::to_string(&again.records).unwrap() == serde_json::to_string(&first.result.records).unwrap();
    let pass = rate >= 0.95 && in_range && identical;
    check(
        6,
        pass,
        format!(
            "InF-DH FR1, {} snapshots: converged {}/{} ({:.1}%, need 95%), {} without HD-only PELs, \
             mean iterations {:.2}; sd in [0,1]: {in_range}; bit-identical rerun: {identical}",
            DROPS,
            stats.converged,
            stats.snapshots,
            100.0 * rate,
            stats.empty_hd_set,
            stats.mean_iterations
        ),
    );
}

#[test]
fn criterion_07_hd_detection_trend() {
    let sh = sh_run();
    let hd = &sh.result.detection["HD"];
    let (acc, auc) = (hd.accuracy.unwrap_or(0.0), hd.auc.unwrap_or(0.0));
    let pass = acc >= 0.85 && auc >= 0.90 && sh.elapsed < Duration::from_secs(120);
    check(
        7,
        pass,
        format!(
            "InF-SH FR1, {} snapshots: HD accuracy {:.4} (>= 0.85), AUC {:.4} (>= 0.90), full run {:.1?}",
            sh.result.provenance.snapshots, acc, auc, sh.elapsed
        ),
    );
}

#[test]
fn criterion_08_sd_dominates_hd() {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, r) in [("InF-SH FR1", sh_run()), ("InF-DH FR1", dh_run())] {
        let (hd, sd) = (&r.result.detection["HD"], &r.result.detection["SD"]);
        let v = |x: Option<f64>| x.unwrap_or(f64::NAN);
        let ok = v(sd.auc) >= v(hd.auc) && v(sd.recall) >= v(hd.recall);
        pass &= ok;
        parts.push(format!(
            "{name}: AUC SD {:.4} vs HD {:.4}, recall SD {:.4} vs HD {:.4} [{}]",
            v(sd.auc),
            v(hd.auc),
            v(sd.recall),
            v(hd.recall),
            if ok { "ok" } else { "violated" }
        ));
    }
    check(8, pass, parts.join("; "));
}

#[test]
fn criterion_09_positioning_ordering() {
    let r = &dh_run().result;
    let chain = [Method::Ls, Method::LsNdHd, Method::CdaNdRersHd, Method::CdaNdRersSd];
    let mae: Vec<f64> = chain
        .iter()
        .map(|m| r.methods[m].errors.as_ref().map_or(f64::NAN, |e| e.mean))
        .collect();
    let margins: Vec<f64> = mae.windows(2).map(|w| w[0] / w[1] - 1.0).collect();
    let pass = margins.iter().all(|&m| m >= 0.10);
    let detail = chain
        .iter()
        .zip(&mae)
        .map(|(m, e)| format!("{} {e:.3} m", m.name()))
        .collect::<Vec<_>>()
        .join(" > ");
    let margins = margins
        .iter()
        .map(|m| format!("{:+.1}%", 100.0 * m))
        .collect::<Vec<_>>()
        .join(", ");
    check(
        9,
        pass,
        format!("InF-DH FR1 MAE {detail}; margins {margins} (need +10% each)"),
    );
}

#[test]
fn criterion_10_uniform_weight_reduction() {
    let batch = generate(&Preset::InfDhFr1.config(1010, 100)).unwrap();
    let filter = Preset::InfDhFr1.filters().nd_rers_hd;
    let mut filters = Preset::InfDhFr1.filters();
    filters.nd_rers_sd = filter;
    let mut differing = 0;
    for s in &batch.snapshots {
        let ensemble = build_ensemble(s, 3).unwrap();
        let report = detect(&ensemble, s, Preset::InfDhFr1.lambda()).unwrap();
        let zeros = vec![0.0; s.num_gnbs()];
        let inputs = EstimationInputs {
            ensemble: Some(&ensemble),
            hard_decision: Some(&report.decision),
            soft_decision: Some(&zeros),
            filters,
        };
        let hd = estimate(s, Method::CdaNdRersHd, &inputs).unwrap();
        let sd = estimate(s, Method::CdaNdRersSd, &inputs).unwrap();
        let same = hd.point.x.to_bits() == sd.point.x.to_bits() && hd.point.y.to_bits() == sd.point.y.to_bits();
        differing += usize::from(!same);
    }
    check(
        10,
        differing == 0,
        format!("100 InF-DH FR1 snapshots, SD forced to 0, same RE/RS ratios: {differing} estimates differ bitwise"),
    );
}

#[test]
fn criterion_11_mmd_stabilization() {
    const SNAPSHOTS: usize = 100;
    const ORDERS: usize = 50;
    let batch = generate(&Preset::InfDhFr1.config(1111, SNAPSHOTS)).unwrap();
    let curves: Vec<Vec<(usize, f64)>> = batch
        .snapshots
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(1111);
            rng.set_stream(i as u64);
            let distances = EnsembleDistances::new(&build_ensemble(s, 3).unwrap());
            let mut order: Vec<usize> = (0..s.num_gnbs()).collect();
            (0..ORDERS)
                .map(|_| {
                    order.shuffle(&mut rng);
                    // Starting at N = 8 keeps the first ensemble non-empty even
                    // when the earliest gNBs happen to be collinear.
                    distances.stabilization_curve(&order, 8).unwrap()
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let mut by_size: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (n, v) in curves.into_iter().flatten() {
        by_size.entry(n).or_default().push(v);
    }
    let medians: Vec<(usize, f64)> = by_size
        .into_iter()
        .map(|(n, v)| (n, cdand::geometry::median(&v).unwrap()))
        .collect();
    let inversions = medians.windows(2).filter(|w| w[1].1 > w[0].1).count();
    let curve = medians
        .iter()
        .map(|(n, m)| format!("{n}:{m:.2e}"))
        .collect::<Vec<_>>()
        .join(" ");
    check(
        11,
        inversions <= 1,
        format!("{SNAPSHOTS} snapshots x {ORDERS} orders, {inversions} adjacent inversions for N >= 8; {curve}"),
    );
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(
                    path.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    files
}

#[test]
fn criterion_12_end_to_end_determinism() {
    let scratch = tempfile::tempdir().unwrap();
    let run_cli = |name: &str| {
        let out = scratch.path().join(name);
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_cdand"))
            .args([
                "run",
                "--preset",
                "inf-dh-fr1",
                "--seed",
                "12",
                "--drops",
                "150",
                "--mmd-orders",
                "5",
                "-o",
            ])
            .arg(&out)
            .status()
            .expect("cli runs");
        assert!(status.success());
        tree(&out)
    };
    let a = run_cli("a");
    let b = run_cli("b");
    let differing: Vec<_> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    let pass = !a.is_empty() && a.len() == b.len() && differing.is_empty();
    check(
        12,
        pass,
        format!(
            "two `run` invocations, {} files each, {} differ",
            a.len(),
            differing.len()
        ),
    );
}
