//! Acceptance suite. Runs with `cargo test --test acceptance` and prints one
//! PASS/FAIL line per criterion; exits non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use ett_core::align::plan_windows;
use ett_core::harness::cache::{decode, encode};
use ett_core::harness::check::{gradient_suite, DECODER_KINDS};
use ett_core::harness::{run, ExperimentConfig, RunOptions, RunReport, DEFAULT_CONFIG};
use ett_core::metrics::{average_precision, edit_distance_at_z, mean_localization_error, Action};
use ett_core::Result;
use rand::Rng;

const SEEDS: usize = 3;

type Outcome = std::result::Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mean_accuracy(reports: &[RunReport], arm: &str) -> f64 {
    let v: Vec<f64> = reports
        .iter()
        .filter(|r| r.arm == arm)
        .map(|r| r.metric("accuracy").expect("binary primary reports accuracy"))
        .collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn run_default(cfg: &ExperimentConfig) -> Result<(Vec<RunReport>, Duration)> {
    let dir = tempfile::tempdir()?;
    let opts = RunOptions {
        seeds: Some(SEEDS),
        out_dir: Some(dir.path().to_path_buf()),
        workers: Some(1),
        ..Default::default()
    };
    let start = Instant::now();
    let outcome = run(cfg, &opts)?;
    Ok((outcome.reports, start.elapsed()))
}

fn uplift(reports: &[RunReport], elapsed: Duration) -> Outcome {
    let tr = mean_accuracy(reports, "translator");
    let po = mean_accuracy(reports, "primary_only");
    let ceil = reports[0].ceilings.expect("binary primary has ceilings");
    let gap = ceil.combined - tr;
    let detail = format!(
        "translator {tr:.4}, primary_only {po:.4}, uplift {:.1} pts, combined ceiling {:.4} (gap {:.1} pts), {:.0} s",
        100.0 * (tr - po),
        ceil.combined,
        100.0 * gap,
        elapsed.as_secs_f64()
    );
    check(tr - po >= 0.10 && gap <= 0.05 && elapsed <= Duration::from_secs(300), detail)
}

fn no_harm() -> Result<Outcome> {
    let mut cfg = ExperimentConfig::from_toml(DEFAULT_CONFIG)?;
    for t in cfg.tasks.iter_mut().filter(|t| !t.spec.primary) {
        t.spec.corr_rho = 0.0;
    }
    cfg.arms = vec![ett_core::harness::Arm::Translator, ett_core::harness::Arm::PrimaryOnly];
    let (reports, _) = run_default(&cfg)?;
    let tr = mean_accuracy(&reports, "translator");
    let po = mean_accuracy(&reports, "primary_only");
    Ok(check(
        (tr - po).abs() <= 0.03,
        format!("translator {tr:.4}, primary_only {po:.4}, delta {:+.1} pts", 100.0 * (tr - po)),
    ))
}

fn frozen_contract(reports: &[RunReport]) -> Outcome {
    let verified = reports.iter().filter(|r| r.frozen_checksums_verified).count();
    let per_model = reports.iter().map(|r| r.stage2.frozen_checksums.len()).min().unwrap_or(0);
    check(
        verified == reports.len() && per_model > 0,
        format!("{verified}/{} runs verified, at least {per_model} frozen checksums per run", reports.len()),
    )
}

fn gradients() -> Result<Outcome> {
    let start = Instant::now();
    let mut worst = (String::new(), 0.0f64);
    let mut count = 0;
    for seed in 0..10 {
        for (name, err) in gradient_suite(seed)? {
            count += 1;
            if !(err < worst.1) {
                worst = (format!("{name} seed {seed}"), err);
            }
        }
    }
    let t = start.elapsed();
    Ok(check(
        worst.1 < 1e-4 && t <= Duration::from_secs(60),
        format!("{count} checks, max rel err {:.2e} ({}), {:.1} s", worst.1, worst.0, t.as_secs_f64()),
    ))
}

fn permutation() -> Result<Outcome> {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        worst = worst.max(block_permutation_delta(seed)?);
    }
    Ok(check(worst < 1e-6, format!("max |logit change| {worst:.2e} over 6 orderings, 10 toys")))
}

fn random_actions(r: &mut impl Rng, z: usize) -> Vec<Action> {
    (0..z).map(|_| (r.random_range(0..3), r.random_range(0..4))).collect()
}

fn metric_oracles() -> Result<Outcome> {
    let mut r = rng(100);
    let mut ap_bad = 0;
    for _ in 0..1000 {
        let n = r.random_range(1..=8);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..5) as f64 / 4.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| r.random()).collect();
        labels[r.random_range(0..n)] = true;
        if average_precision(&scores, &labels)? != ap_bruteforce(&scores, &labels) {
            ap_bad += 1;
        }
    }
    let mut ed_bad = 0;
    for _ in 0..1000 {
        let z = r.random_range(1..12);
        let truth = random_actions(&mut r, z);
        let cand = random_actions(&mut r, z);
        let ed = edit_distance_at_z(std::slice::from_ref(&cand), &truth)?;
        let ref_of = |f: fn(&Action) -> usize| {
            let a: Vec<usize> = cand.iter().map(f).collect();
            let b: Vec<usize> = truth.iter().map(f).collect();
            levenshtein_dp(&a, &b) as f64 / z as f64
        };
        let action = levenshtein_dp(&cand, &truth) as f64 / z as f64;
        if ed.verb != ref_of(|a| a.0) || ed.noun != ref_of(|a| a.1) || ed.action != action {
            ed_bad += 1;
        }
    }
    let pairs: Vec<(f64, f64)> = (0..1000).map(|_| (r.random_range(0.0..8.0), r.random_range(0.0..8.0))).collect();
    let mut sum = 0.0;
    for &(p, t) in &pairs {
        sum += (p - t).abs();
    }
    let loc_ok = mean_localization_error(&pairs, 8.0)? == sum / pairs.len() as f64;
    Ok(check(
        ap_bad == 0 && ed_bad == 0 && loc_ok,
        format!("AP mismatches {ap_bad}/1000, ED mismatches {ed_bad}/1000, localization exact {loc_ok}"),
    ))
}

fn alignment() -> Result<Outcome> {
    let mut r = rng(200);
    let mut bad = 0;
    let mut rejected = 0;
    for _ in 0..1000 {
        let ((d, win, st, fps), (n, w, s)) = fuzz_tuple(&mut r);
        let expect = offsets_oracle(n, w, s);
        match plan_windows(d, win, st, fps) {
            Ok(p) if !has_gap(&expect, w) && p.offsets_frames == expect => {}
            Err(_) if has_gap(&expect, w) => rejected += 1,
            _ => bad += 1,
        }
    }
    let example = plan_windows(16.0, 8.0, 4.0, 2.0)?;
    Ok(check(
        bad == 0 && example.len() == 3,
        format!(
            "{bad}/1000 mismatches ({rejected} gapped plans rejected), 16 s example gives {} windows",
            example.len()
        ),
    ))
}

fn stripped_bytes(dir: &std::path::Path) -> Vec<(String, String)> {
    reports_without_timing(dir)
        .into_iter()
        .map(|(k, v)| (k, serde_json::to_string_pretty(&v).expect("json")))
        .collect()
}

fn determinism() -> Result<Outcome> {
    let a = tempfile::tempdir()?;
    let b = tempfile::tempdir()?;
    run(&tiny_config(a.path()), &RunOptions { workers: Some(1), ..Default::default() })?;
    run(&tiny_config(b.path()), &RunOptions { workers: Some(1), ..Default::default() })?;
    let (ra, rb) = (stripped_bytes(a.path()), stripped_bytes(b.path()));
    let identical = ra == rb && !ra.is_empty();

    let mut r = rng(300);
    let mut round_trip = true;
    let mut truncations_rejected = true;
    for i in 0..20 {
        let (t, d) = (r.random_range(1..30), r.random_range(1..16));
        let v = to_tensor(&random_mat(&mut r, t, d, 2.0));
        let times: Vec<f64> = (0..t).map(|k| k as f64 * 0.25).collect();
        let seq = ett_core::align::FeatureSequence::new(format!("task{i}"), v, times)?.to_f32();
        let bytes = encode(&seq)?;
        let back = decode(&bytes)?;
        round_trip &= back == seq && encode(&back)? == bytes;
        truncations_rejected &= (0..bytes.len()).all(|n| decode(&bytes[..n]).is_err());
    }
    Ok(check(
        identical && round_trip && truncations_rejected,
        format!(
            "{} report files identical {identical}, cache round trip {round_trip}, truncations rejected {truncations_rejected}",
            ra.len()
        ),
    ))
}

fn overfit() -> Result<Outcome> {
    let mut parts = Vec::new();
    let mut ok = true;
    for kind in DECODER_KINDS {
        let losses = overfit_losses(kind, 500, 1e-2, 0)?;
        let hit = losses.iter().position(|&l| l < 0.05);
        ok &= hit.is_some();
        let name = ett_core::train::metric_name_for(kind);
        parts.push(match hit {
            Some(step) => format!("{name} < 0.05 at step {step}"),
            None => format!("{name} best {:.3}", losses.iter().cloned().fold(f64::INFINITY, f64::min)),
        });
    }
    Ok(check(ok, parts.join(", ")))
}

fn guarded(f: impl FnOnce() -> Result<Outcome>) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(o)) => o,
        Ok(Err(e)) => Err(format!("error: {e}")),
        Err(_) => Err("panicked".into()),
    }
}

fn main() -> ExitCode {
    let default = ExperimentConfig::from_toml(DEFAULT_CONFIG).expect("default config");
    let main_run = run_default(&default);
    let criteria: Vec<(&str, Outcome)> = vec![
        (
            "1 uplift",
            match &main_run {
                Ok((reports, t)) => uplift(reports, *t),
                Err(e) => Err(format!("error: {e}")),
            },
        ),
        ("2 no-harm", guarded(no_harm)),
        (
            "3 frozen contract",
            match &main_run {
                Ok((reports, _)) => frozen_contract(reports),
                Err(e) => Err(format!("error: {e}")),
            },
        ),
        ("4 gradient suite", guarded(gradients)),
        ("5 permutation", guarded(permutation)),
        ("6 metric oracles", guarded(metric_oracles)),
        ("7 alignment", guarded(alignment)),
        ("8 determinism and persistence", guarded(determinism)),
        ("9 overfit", guarded(overfit)),
    ];
    let mut failed = 0;
    for (name, outcome) in &criteria {
        match outcome {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name}: {d}");
            }
        }
    }
    println!("{}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
