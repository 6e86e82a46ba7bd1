//! Acceptance gate: one line per criterion, non-zero exit if any hard
//! criterion fails.

mod common;

use std::path::Path;
use std::time::Instant;

use pcnerf::config::{InferMode, Profile, RunConfig};
use pcnerf::eval::{chamfer_distance, f_score, read_report, SplitMode};
use pcnerf::field::{render_depth, RenderResult};
use pcnerf::geom::{RayInterval, Vec3};
use pcnerf::infer::{interval_depth, score_candidates, select_child, Candidate, SelectionRule};
use pcnerf::pipeline::{cmd_eval, cmd_full, cmd_partition, cmd_simulate, cmd_train};
use rand::Rng;

enum Verdict {
    Pass,
    Fail,
    /// Soft criterion missed; reported but not fatal.
    Soft,
}

struct Outcome {
    verdict: Verdict,
    detail: String,
}

fn check(ok: bool, detail: String) -> Outcome {
    Outcome { verdict: if ok { Verdict::Pass } else { Verdict::Fail }, detail }
}

fn gradients() -> Outcome {
    let started = Instant::now();
    let cases = [
        ("pd", common::loss_only(1.0, 0.0, 0.0)),
        ("cf", common::loss_only(0.0, 1.0, 0.0)),
        ("cd", common::loss_only(0.0, 0.0, 1.0)),
        ("total", pcnerf::train::LossConfig::default()),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (k, (name, cfg)) in cases.iter().enumerate() {
        let (err, skipped) = common::gradient_check(cfg, 10, 5, 40 + k as u64);
        ok &= err <= 1e-4 && skipped < 0.5;
        parts.push(format!("{name} {err:.1e}"));
    }
    let secs = started.elapsed().as_secs_f64();
    ok &= secs < 30.0;
    check(ok, format!("max rel err: {}; {secs:.1} s", parts.join(", ")))
}

fn quadrature() -> Outcome {
    let mut rng = common::rng(2);
    let mut worst_sum: f64 = 0.0;
    let mut bad = 0;
    for _ in 0..10_000 {
        let n = rng.gen_range(1..128);
        let mut t = Vec::with_capacity(n);
        let mut acc = rng.gen_range(0.0..1.0);
        for _ in 0..n {
            acc += rng.gen_range(1e-4..1.0);
            t.push(acc);
        }
        let sigma: Vec<f64> = (0..n)
            .map(|_| if rng.gen_bool(0.3) { 0.0 } else { 10f64.powf(rng.gen_range(-6.0..6.0)) })
            .collect();
        let r = RenderResult::from_sigma(t, sigma);
        let sum = r.total_weight();
        worst_sum = worst_sum.max(sum);
        let monotone = r.transmittance.windows(2).all(|w| w[1] <= w[0]);
        let bounded = r.weight.iter().all(|w| (0.0..=1.0).contains(w));
        bad += usize::from(sum > 1.0 + 1e-6 || !monotone || !bounded);
    }
    let mut wall_err: f64 = 0.0;
    for spacing in [0.05, 0.1, 0.37] {
        let t: Vec<f64> = (0..(40.0 / spacing) as usize).map(|k| 0.5 + spacing * k as f64).collect();
        let wall = 21.3;
        let sigma = t.iter().map(|&x| if x >= wall { 1e4 } else { 0.0 }).collect();
        let d = render_depth(&RenderResult::from_sigma(t, sigma), &RayInterval::new(0.0, 1e9));
        wall_err = wall_err.max((d - wall).abs() / spacing);
    }
    check(
        bad == 0 && wall_err <= 1.0,
        format!("10000 renders, {bad} violations, max sum w {worst_sum:.9}; wall error {wall_err:.2} spacings"),
    )
}

fn geometry() -> Outcome {
    let s = common::geometry_oracle(1000, 3);
    check(
        s.disagreements == 0 && s.worst_endpoint_rel <= 1e-3 && s.prefilter_false_negatives == 0,
        format!(
            "1000 pairs, {} hits, {} disagreements, endpoint err {:.2e} diag, {} prefilter misses",
            s.hits, s.disagreements, s.worst_endpoint_rel, s.prefilter_false_negatives
        ),
    )
}

fn partition() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in 0..3 {
        let s = common::partition_recovery(seed);
        ok &= s.ground_precision >= 0.99
            && s.ground_recall >= 0.99
            && s.n_clusters == s.n_boxes
            && s.worst_purity >= 0.99;
        parts.push(format!(
            "seed {seed}: K={} clusters={} P={:.4} R={:.4} purity={:.4}",
            s.n_boxes, s.n_clusters, s.ground_precision, s.ground_recall, s.worst_purity
        ));
    }
    check(ok, parts.join("; "))
}

fn metrics() -> Outcome {
    let mut rng = common::rng(5);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let a = common::random_cloud(&mut rng, 100, 5.0);
        let b = common::random_cloud(&mut rng, 100, 5.0);
        worst = worst.max((chamfer_distance(&a, &b).unwrap() - common::brute_chamfer(&a, &b)).abs());
        for tau in [0.2, 1.0] {
            worst = worst.max((f_score(&a, &b, tau).unwrap() - common::brute_f_score(&a, &b, tau)).abs());
        }
    }
    let a = common::random_cloud(&mut rng, 100, 5.0);
    let self_cd = chamfer_distance(&a, &a).unwrap();
    let mut f_shift: f64 = 1.0;
    for _ in 0..20 {
        let delta = common::unit_vector(&mut rng) * rng.gen_range(0.0..0.999);
        let moved: Vec<Vec3> = a.iter().map(|p| p + delta).collect();
        f_shift = f_shift.min(f_score(&a, &moved, 1.0).unwrap());
    }
    check(
        worst <= 1e-9 && self_cd == 0.0 && f_shift == 1.0,
        format!("max |grid - brute| {worst:.1e}, CD(a,a) {self_cd}, min F@1 under shift {f_shift}"),
    )
}

fn cand(id: usize, a: f64, b: f64, w: f64, peak: bool) -> Candidate {
    Candidate { child_id: id, interval: RayInterval::new(a, b), weight_integral: w, contains_peak: peak }
}

fn two_step() -> Outcome {
    let mut rng = common::rng(6);
    let (mut scale_err, mut outside): (f64, usize) = (0.0, 0);
    for _ in 0..2000 {
        let n = rng.gen_range(8..96);
        let mut t: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..30.0)).collect();
        t.sort_by(f64::total_cmp);
        let sigma: Vec<f64> = (0..n).map(|_| 10f64.powf(rng.gen_range(-3.0..1.0))).collect();
        let r = RenderResult::from_sigma(t, sigma);
        let located: Vec<(usize, RayInterval)> = (0..rng.gen_range(1..4))
            .map(|i| {
                let a = rng.gen_range(0.0..25.0);
                (i, RayInterval::new(a, a + rng.gen_range(0.5..5.0)))
            })
            .collect();
        let cands = score_candidates(&r, &located);
        let sel = select_child(&cands, 0.0);
        let Some(i) = sel.index else { continue };
        let Some(d) = interval_depth(&r, &cands[i].interval) else { continue };
        let iv = cands[i].interval;
        outside += usize::from(d < iv.t_enter || d > iv.t_exit);
        let c = 10f64.powf(rng.gen_range(-4.0..0.0));
        let mut scaled = r.clone();
        scaled.weight.iter_mut().for_each(|w| *w *= c);
        let cands_s = score_candidates(&scaled, &located);
        let sel_s = select_child(&cands_s, 0.0);
        if sel_s.index != Some(i) {
            outside += 1;
            continue;
        }
        let ds = interval_depth(&scaled, &iv).unwrap();
        scale_err = scale_err.max((ds - d).abs() / d.max(1.0));
    }
    let rules = [
        (vec![cand(0, 2.0, 3.0, 0.4, false), cand(1, 6.0, 7.0, 0.3, true)], Some(1), SelectionRule::Peak),
        (vec![cand(0, 2.0, 3.0, 0.3, false), cand(1, 6.0, 7.0, 0.6, false)], Some(1), SelectionRule::MaxIntegral),
        (vec![cand(0, 4.0, 5.0, 0.2, false)], Some(0), SelectionRule::Single),
    ];
    let rules_ok = rules.iter().all(|(c, idx, rule)| {
        let s = select_child(c, 1e-3);
        s.index == *idx && s.rule == *rule
    });
    check(
        scale_err <= 1e-12 && outside == 0 && rules_ok,
        format!("weight-scale rel err {scale_err:.1e}, {outside} out-of-interval, rule fixtures {}", if rules_ok { "ok" } else { "wrong" }),
    )
}

fn desk_config(root: &Path, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::profile(Profile::Desk);
    cfg.seed = seed;
    cfg.data.dataset = root.join("data");
    cfg.data.output = root.join("run");
    cfg
}

fn ordering() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_config(dir.path(), 0);
    let started = Instant::now();
    let runs = match cmd_full(&cfg, false) {
        Ok(r) => r,
        Err(e) => return check(false, format!("run failed: {e}")),
    };
    let secs = started.elapsed().as_secs_f64();
    let err = |m: InferMode| runs.iter().find(|r| r.report.mode == m.as_str()).unwrap().report.avg_error_m;
    let (one, two, ray) = (err(InferMode::OneStep), err(InferMode::TwoStep), err(InferMode::Raycast));
    check(
        two < one && two < ray && secs < 300.0,
        format!("avg error two-step {two:.4} m, one-step {one:.4} m, raycast {ray:.4} m; {secs:.0} s"),
    )
}

fn loss_rates() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let base = desk_config(dir.path(), 0);
    if let Err(e) = cmd_simulate(&base, false) {
        return check(false, format!("simulation failed: {e}"));
    }
    let mut errors = Vec::new();
    for (label, frac) in [("20%", 0.8), ("50%", 0.5), ("67%", 1.0 / 3.0)] {
        let mut cfg = base.clone();
        cfg.split.mode = SplitMode::LossRate;
        cfg.split.train_fraction = frac;
        cfg.data.output = dir.path().join(format!("run_{label}"));
        let run = cmd_partition(&cfg)
            .and_then(|_| cmd_train(&cfg))
            .and_then(|_| cmd_eval(&cfg, &[InferMode::TwoStep]));
        match run {
            Ok(r) => errors.push((label, r[0].report.avg_error_m)),
            Err(e) => return check(false, format!("loss rate {label} failed: {e}")),
        }
    }
    let listed: Vec<String> = errors.iter().map(|(l, e)| format!("{l}: {e:.4} m")).collect();
    let ratio = errors[2].1 / errors[0].1;
    let detail = format!("two-step avg error {}; 67%/20% ratio {ratio:.2}", listed.join(", "));
    if ratio <= 2.0 {
        check(true, detail)
    } else {
        Outcome { verdict: Verdict::Soft, detail: detail + " (soft bound of 2x missed)" }
    }
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut ca = common::tiny_config(a.path(), 9);
    ca.train.epochs = 2;
    let mut cb = common::tiny_config(b.path(), 9);
    cb.train.epochs = 2;
    if let Err(e) = cmd_full(&ca, false) {
        return check(false, format!("first run failed: {e}"));
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    if let Err(e) = pool.install(|| cmd_full(&cb, false)) {
        return check(false, format!("second run failed: {e}"));
    }
    let outputs = |root: &Path| {
        common::tree_bytes(root)
            .into_iter()
            .filter(|(p, _)| {
                let s = p.to_string_lossy();
                s.starts_with("loss_log_") || s.ends_with(".json")
            })
            .collect::<Vec<_>>()
    };
    let (oa, ob) = (outputs(&ca.data.output), outputs(&cb.data.output));
    let logs = oa.iter().filter(|(p, _)| p.to_string_lossy().starts_with("loss_log_")).count();
    let reports = oa.len() - logs;
    let parsed_equal = ["one_step", "two_step", "raycast"].iter().all(|m| {
        let path = |root: &Path| root.join("eval").join(format!("{m}.json"));
        read_report(&path(&ca.data.output)).ok() == read_report(&path(&cb.data.output)).ok()
    });
    check(
        oa == ob && logs > 0 && reports == 3 && parsed_equal,
        format!("{logs} loss logs and {reports} reports byte-identical across runs (1 vs 3 threads)"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", gradients),
        ("quadrature invariants", quadrature),
        ("geometry oracle", geometry),
        ("partition recovery", partition),
        ("metric oracles", metrics),
        ("two-step inference properties", two_step),
        ("end-to-end ordering", ordering),
        ("data-loss robustness (soft)", loss_rates),
        ("determinism", determinism),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let out = run();
        let tag = match out.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                failed += 1;
                "FAIL"
            }
            Verdict::Soft => "SOFT-MISS",
        };
        println!("[{tag}] {}. {name}: {}", i + 1, out.detail);
    }
    if failed > 0 {
        println!("acceptance: {failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("acceptance: all hard criteria passed");
}
