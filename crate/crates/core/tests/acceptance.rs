//! Acceptance criteria 1-9. Each test prints one `criterion N: PASS|FAIL`
//! line and asserts on the same condition.
//!
//! Tests hold a shared lock so wall-clock budgets are not skewed by
//! siblings competing for cores.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use hibcg::config::{RunConfig, FLAT_PRIOR, HIBCG_DEFAULT};
use hibcg::harness::{self, GoldenReport, TrainReport};
use hibcg::props::{self, SuiteReport};

static SERIAL: Mutex<()> = Mutex::new(());

fn report(n: usize, pass: bool, elapsed: Duration, budget: Duration, detail: &str) {
    let within = elapsed < budget;
    let status = if pass && within { "PASS" } else { "FAIL" };
    println!("criterion {n}: {status} ({:.2}s of {:.0}s budget) {detail}", elapsed.as_secs_f64(), budget.as_secs_f64());
    assert!(pass, "criterion {n}: {detail}");
    assert!(within, "criterion {n} over its runtime budget: {elapsed:?}");
}

fn golden_subset(r: &GoldenReport, pick: impl Fn(&str) -> bool) -> (bool, String) {
    let rows: Vec<_> = r.rows.iter().filter(|x| pick(&x.quantity)).collect();
    let bad: Vec<String> = rows
        .iter()
        .filter(|x| !x.pass)
        .map(|x| format!("{}={:.4} (quoted {})", x.quantity, x.computed, x.quoted))
        .collect();
    let detail = if bad.is_empty() { format!("{} values match", rows.len()) } else { format!("mismatched: {}", bad.join(", ")) };
    (bad.is_empty(), detail)
}

fn suite(name: &str, trials: usize, props_wanted: &[&str]) -> (bool, String) {
    let reports: Vec<SuiteReport> = props::run(name, Some(trials), 0).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for want in props_wanted {
        let p = reports[0].properties.iter().find(|p| p.name == *want).unwrap_or_else(|| panic!("no property {want}"));
        ok &= p.passed();
        parts.push(format!("{want} {}/{} failed, worst {:?}", p.failures, p.trials, p.worst));
    }
    (ok, parts.join("; "))
}

#[test]
fn criterion_1_part_one_golden_values() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let r = harness::verify_golden(None).unwrap();
    let (ok, detail) = golden_subset(&r, |q| {
        q.starts_with("I.flat.") || q == "I.matched.total" || (q.starts_with("I.suboptimal.") && q != "I.suboptimal.reduction")
    });
    report(1, ok, t.elapsed(), Duration::from_secs(1), &detail);
}

#[test]
fn criterion_2_part_two_golden_values() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let r = harness::verify_golden(None).unwrap();
    let (ok, detail) = golden_subset(&r, |q| q.starts_with("II.aib.") || q == "II.penalty.total" || q == "II.penalty.cross_share");
    report(2, ok, t.elapsed(), Duration::from_secs(1), &detail);
}

#[test]
fn criterion_3_no_regret() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let (ok, detail) = suite("prop2", 1000, &["no_regret"]);
    report(3, ok, t.elapsed(), Duration::from_secs(5), &detail);
}

#[test]
fn criterion_4_blockwise_additivity() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let (ok, detail) = suite("prop3", 1000, &["blockwise_additivity"]);
    report(4, ok, t.elapsed(), Duration::from_secs(5), &detail);
}

#[test]
fn criterion_5_allocator_oracle_equivalence() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let (ok, detail) = suite("prop5", 50, &["water_fill_matches_grid", "active_marginal_utilities_equal", "dual_ascent_closed_loop"]);
    report(5, ok, t.elapsed(), Duration::from_secs(30), &detail);
}

#[test]
fn criterion_6_relevance_bound() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let (ok, detail) = suite("prop4", 100, &["fano_limit_is_entropy", "fano_nonincreasing", "markov_containment", "exact_recovery"]);
    report(6, ok, t.elapsed(), Duration::from_secs(30), &detail);
}

#[test]
fn criterion_7_gradient_fidelity() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let g = props::gradient_check(0, 10, 1e-5).unwrap();
    let ok = g.max_rel_err <= 1e-4 && g.networks == 10 && g.entries > 0;
    let detail = format!("{} networks, {} entries, max relative error {:.2e}", g.networks, g.entries, g.max_rel_err);
    report(7, ok, t.elapsed(), Duration::from_secs(60), &detail);
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Per-seed intra minus cross per-edge KL, and per-step tail eval return.
fn separation(r: &TrainReport) -> (Vec<f64>, f64) {
    let s = r.summaries();
    assert_eq!(s.len(), 5, "every seed must finish: {:?}", r.seeds);
    let d = s.iter().map(|x| x.tail_aib_intra_per_edge - x.tail_aib_cross_per_edge).collect();
    let ret = s.iter().map(|x| x.tail_eval_return / x.episode_length as f64).sum::<f64>() / s.len() as f64;
    (d, ret)
}

#[test]
fn criterion_8_heterogeneous_pressure_direction() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let hib = RunConfig::parse(HIBCG_DEFAULT).unwrap();
    let flat = RunConfig::parse(FLAT_PRIOR).unwrap();
    assert_eq!(hib.prior.sigma_intra / hib.prior.sigma_cross, 10.0);
    assert_eq!(flat.prior.sigma_intra, flat.prior.sigma_cross);
    assert_eq!(hib.seeds.len(), 5);
    let workers = harness::default_workers();
    let (dh, ret_h) = separation(&harness::run_training(&hib, tmp.path(), workers).unwrap());
    let (df, ret_f) = separation(&harness::run_training(&flat, tmp.path(), workers).unwrap());
    let (mh, seh) = mean_se(&dh);
    let (mf, sef) = mean_se(&df);
    let m = hib.env.groups.len() as f64;
    let a = mh > 0.0 && mh > 2.0 * seh && mf.abs() <= 2.0 * sef;
    let b = ret_h >= ret_f - 0.05 * m;
    let detail = format!(
        "intra-cross per-edge KL: hibcg {mh:.4}±{seh:.4}, flat {mf:.4}±{sef:.4}; per-step tail return hibcg {ret_h:.3} vs flat {ret_f:.3} (slack {:.2})",
        0.05 * m
    );
    report(8, a && b, t.elapsed(), Duration::from_secs(15 * 60), &detail);
}

fn snapshot(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if matches!(p.extension().and_then(|x| x.to_str()), Some("csv" | "json")) {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_9_determinism() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let mut cfg = RunConfig::parse(HIBCG_DEFAULT).unwrap();
    cfg.seeds = vec![3, 4];
    cfg.training.steps = 300;
    cfg.training.eval_interval = 100;
    cfg.training.eval_episodes = 3;
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let tmp = tempfile::tempdir().unwrap();
            harness::run_training(&cfg, tmp.path(), 2).unwrap();
            harness::run_sweep(&cfg, &[0.5, 1.0], tmp.path(), 2).unwrap();
            let props = serde_json::to_string(&props::run("all", Some(20), 9).unwrap()).unwrap();
            let golden = harness::verify_golden(None).unwrap().table();
            let alloc = harness::run_allocate("a reciprocal 3\nb exponential 2 1\nc tabulated 0:1 1:0.5 2:0\n", 1.5).unwrap().csv;
            (snapshot(tmp.path()), props, golden, alloc)
        })
        .collect();
    let files = runs[0].0.len();
    let ok = files > 10 && runs[0] == runs[1];
    report(9, ok, t.elapsed(), Duration::from_secs(120), &format!("{files} CSV/JSON files plus props, verify and allocate outputs compared"));
}
