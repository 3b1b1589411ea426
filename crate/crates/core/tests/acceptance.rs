//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line on
//! stderr (outside the test harness capture); the test fails if any fails.

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use costpose::costvolume::{aggregate, build_volume};
use costpose::engine::{register, register_with, EngineConfig, PreparedScene};
use costpose::features::FeatureMap2D;
use costpose::features::{ConfidenceSet3D, FeatureSet3D, OracleFeatureConfig, OutsideMode};
use costpose::geometry::{euler_to_rotation, CameraIntrinsics, PointCloud, Pose};
use costpose::harness::cli::{grad_check_report, training_scenes, GradCheckConfig, TrainScorerConfig};
use costpose::harness::{
    generate_scene, oracle_bundle, perturb_problem, run_benchmark, run_benchmark_with, BenchmarkReport, SuiteConfig,
};
use costpose::losses::{
    circle_loss, cross_entropy_scores, focal_loss, CircleLossConfig, CorrespondenceSets, FocalConfig,
};
use costpose::sampling::{sample_candidates, Schedule};
use costpose::scoring::{score_batch, train_scorer, BaselineScorer, OptimizerConfig, OptimizerKind, ScorerArch};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = Box<dyn FnOnce(&mut Option<BenchmarkReport>) -> Outcome>;

fn report(id: usize, name: &str, outcome: &Outcome) {
    let line = match outcome {
        Ok(detail) => format!("criterion {id:>2} PASS  {name}: {detail}\n"),
        Err(detail) => format!("criterion {id:>2} FAIL  {name}: {detail}\n"),
    };
    let mut err = std::io::stderr().lock();
    let _ = err.write_all(line.as_bytes());
    let _ = err.flush();
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn run(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(p) => Err(format!(
            "panicked: {}",
            p.downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default()
        )),
    }
}

fn opt(x: Option<f64>) -> f64 {
    x.unwrap_or(f64::NAN)
}

fn oracle_benchmark(report: &mut Option<BenchmarkReport>) -> Outcome {
    let config = SuiteConfig::default();
    let start = Instant::now();
    let r = run_benchmark(&config).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let (rte, rre) = (opt(r.rte_mean), opt(r.rre_mean));
    let detail = format!(
        "{} scenes, RR {:.3}, mean RTE {:.3} m, mean RRE {:.3} deg, {:.0} s",
        r.scene_count, r.rr, rte, rre, secs
    );
    let ok = r.scene_count == 100 && r.rr >= 0.99 && rte <= 0.5 && rre <= 1.5 && secs <= 600.0;
    *report = Some(r);
    check(ok, detail)
}

fn iteration_trend(full: &Option<BenchmarkReport>) -> Outcome {
    let full = full.as_ref().ok_or("oracle benchmark did not produce a report")?;
    let mut rows = Vec::new();
    for k in [1, 3, 5, 9] {
        let r = full.truncated(k).map_err(|e| e.to_string())?;
        rows.push((k, r.rr, opt(r.all_scenes.rte_mean), opt(r.all_scenes.rre_mean)));
    }
    let monotone = rows.windows(2).all(|w| w[1].2 <= w[0].2 && w[1].3 <= w[0].3);
    let detail = rows
        .iter()
        .map(|(k, rr, t, r)| format!("{k} it: RR {rr:.2} RTE {t:.2} RRE {r:.2}"))
        .collect::<Vec<_>>()
        .join("; ");
    check(monotone && rows[0].1 < rows[3].1, detail)
}

fn zoif_ablation() -> Outcome {
    let mut full = SuiteConfig {
        scenes: 200,
        seed: 3,
        features: OracleFeatureConfig {
            outside_mode: OutsideMode::Random,
            conf_flip_prob: 0.05,
            noise_sigma: 0.1,
            ..Default::default()
        },
        ..Default::default()
    };
    full.scene.n_points = 4096;
    let mut no_zoif = full.clone();
    no_zoif.engine.zoif_enabled = false;
    let a = run_benchmark(&full).map_err(|e| e.to_string())?;
    let b = run_benchmark(&no_zoif).map_err(|e| e.to_string())?;
    check(
        a.rr >= b.rr,
        format!("RR full {:.3}, RR without ZOIF {:.3}", a.rr, b.rr),
    )
}

fn cost_volume_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..50 {
        let w = rng.random_range(1..=32usize);
        let h = rng.random_range(1..=32usize);
        let f = rng.random_range(1..=6usize);
        let n = rng.random_range(1..=500usize);
        let k = CameraIntrinsics::new(
            rng.random_range(5.0..40.0),
            rng.random_range(5.0..40.0),
            rng.random_range(0.0..w as f64),
            rng.random_range(0.0..h as f64),
            w,
            h,
        )
        .unwrap();
        let pts: Vec<Vector3<f64>> = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-4.0..4.0),
                    rng.random_range(-4.0..4.0),
                    rng.random_range(-2.0..8.0),
                )
            })
            .collect();
        let feats: Vec<f64> = (0..n * f).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wts: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let pose = Pose::new(
            euler_to_rotation(
                rng.random_range(-30.0..30.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
            ),
            Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
        )
        .unwrap();
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let agg = aggregate(
            &cloud,
            &FeatureSet3D::new(n, f, feats.clone()).unwrap(),
            &ConfidenceSet3D::new(wts.clone()).unwrap(),
            &pose,
            &k,
        )
        .map_err(|e| e.to_string())?;

        // brute force: pinhole projection, floor, bucket
        let mut buckets: BTreeMap<usize, (Vec<f64>, f64, u32)> = BTreeMap::new();
        let mut in_frustum = 0u32;
        for j in 0..n {
            let q = pose.rotation() * pts[j] + pose.translation();
            if q.z <= 1e-6 {
                continue;
            }
            let u = (k.fx * q.x / q.z + k.cx).floor();
            let v = (k.fy * q.y / q.z + k.cy).floor();
            if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
                continue;
            }
            in_frustum += 1;
            let e = buckets
                .entry(v as usize * w + u as usize)
                .or_insert((vec![0.0; f], 0.0, 0));
            for (acc, x) in e.0.iter_mut().zip(&feats[j * f..(j + 1) * f]) {
                *acc += x;
            }
            e.1 += wts[j];
            e.2 += 1;
        }
        let occ_sum: u32 = agg.occupancy().iter().sum();
        if occ_sum != in_frustum {
            return Err(format!(
                "case {case}: occupancy sum {occ_sum} vs {in_frustum} in frustum"
            ));
        }
        for p in 0..w * h {
            let (mean, wsum, count) = match buckets.get(&p) {
                Some((s, ws, c)) => (s.iter().map(|x| x / *c as f64).collect(), *ws, *c),
                None => (vec![0.0; f], 0.0, 0),
            };
            if agg.occupancy()[p] != count {
                return Err(format!("case {case}: pixel {p} occupancy"));
            }
            if (agg.weights()[p] - wsum).abs() > 1e-12 {
                return Err(format!("case {case}: pixel {p} weight {} vs {wsum}", agg.weights()[p]));
            }
            let got = agg.feature(p).map(|r| r.to_vec()).unwrap_or(vec![0.0; f]);
            if got.iter().zip(&mean).any(|(a, b)| (a - b).abs() > 1e-12) {
                return Err(format!("case {case}: pixel {p} mean feature"));
            }
        }
    }
    Ok("50 random instances match brute-force bucketing".into())
}

fn gradient_checks() -> Outcome {
    let cfg = GradCheckConfig::default();
    let r = grad_check_report(&cfg, 11).map_err(|e| e.to_string())?;
    let needed = ["cross_entropy_scores", "focal_loss", "circle_loss"];
    let mut ok = cfg.points >= 20;
    let mut parts = Vec::new();
    for name in needed {
        match r.entries.iter().find(|c| c.function == name) {
            Some(c) => {
                ok &= c.points >= 20 && c.max_relative_error < 1e-4;
                parts.push(format!("{name} {:.2e} over {} points", c.max_relative_error, c.points));
            }
            None => {
                ok = false;
                parts.push(format!("{name} missing"));
            }
        }
    }
    check(ok, parts.join(", "))
}

fn spot_values() -> Outcome {
    let (ce, _) = cross_entropy_scores(&[0.0; 729], 17).map_err(|e| e.to_string())?;
    let c = CircleLossConfig::default();
    let sets = CorrespondenceSets::from_projections(vec![0, 1], &[(0.5, 0.5), (3.5, 0.5)], 4, 1.0)
        .map_err(|e| e.to_string())?;
    let f2d = FeatureMap2D::new(1, 4, 1, vec![0.0, 0.0, 0.0, 1.5]).unwrap();
    let f3d = FeatureSet3D::new(2, 1, vec![0.1, 1.4]).unwrap();
    let circle = circle_loss(&f2d, &f3d, &sets, &c).map_err(|e| e.to_string())?;
    let (focal, _) = focal_loss(&[0.5], &[1.0], &FocalConfig::default()).map_err(|e| e.to_string())?;
    let ln2 = 2f64.ln();
    let ok = (ce - 729f64.ln()).abs() < 1e-9
        && (circle.value_2d - ln2).abs() < 1e-9
        && (circle.value_3d - ln2).abs() < 1e-9
        && (focal - 0.043322).abs() < 1e-6;
    check(
        ok,
        format!(
            "CE {ce:.12}, circle {:.12}/{:.12}, focal {focal:.9}",
            circle.value_2d, circle.value_3d
        ),
    )
}

fn schedule_endpoints() -> Outcome {
    let s = Schedule::default();
    let last = s.space_at(s.iterations - 1);
    let (r, t) = (last.rotation_full_range(), last.translation_full_range());
    check(
        s.iterations == 9 && r < 1.0 && t < 0.5,
        format!("{} iterations, final full ranges {r:.4} deg, {t:.4} m", s.iterations),
    )
}

fn segmentation_invariance() -> Outcome {
    let suite = SuiteConfig::default();
    for idx in 0..2 {
        let seed = suite.scene_seed(idx);
        let scene = generate_scene(&suite.scene, seed).map_err(|e| e.to_string())?;
        let initial = perturb_problem(&scene, &suite.perturb, seed).map_err(|e| e.to_string())?;
        let bundle = oracle_bundle(&scene, &suite.features).map_err(|e| e.to_string())?;
        let prepared = PreparedScene::new(
            scene.cloud.clone(),
            scene.intrinsics,
            bundle,
            true,
            Default::default(),
            Some(scene.gt_pose),
        )
        .map_err(|e| e.to_string())?;
        let candidates =
            sample_candidates(&initial, &suite.engine.schedule.initial_space).map_err(|e| e.to_string())?;
        let mut scores = Vec::new();
        let mut results = Vec::new();
        for segment in [27, 81, 729] {
            let stream = build_volume(&candidates, prepared.inputs(), segment).map_err(|e| e.to_string())?;
            scores.push(score_batch(stream, &BaselineScorer).map_err(|e| e.to_string())?);
            let config = EngineConfig {
                segment_size: segment,
                ..Default::default()
            };
            results.push(register(&prepared, &initial, &config).map_err(|e| e.to_string())?);
        }
        for workers in [1, 4] {
            let config = EngineConfig {
                workers: Some(workers),
                ..Default::default()
            };
            results.push(register_with(&prepared, &initial, &config, &BaselineScorer).map_err(|e| e.to_string())?);
        }
        if scores.windows(2).any(|w| w[0] != w[1]) {
            return Err(format!("scene {idx}: score vectors differ across segment sizes"));
        }
        if results.windows(2).any(|w| w[0] != w[1]) {
            return Err(format!("scene {idx}: registration results differ"));
        }
    }
    Ok("segments 27/81/729 and 1 vs 4 workers identical on 2 scenes".into())
}

fn toy_training() -> Outcome {
    let mut cfg = TrainScorerConfig::default();
    cfg.train.arch = ScorerArch {
        widths: vec![8, 8, 8, 8],
    };
    cfg.train.optimizer = OptimizerConfig {
        kind: OptimizerKind::Adam,
        learning_rate: 1e-2,
        ..Default::default()
    };
    let scenes = training_scenes(
        &cfg.scene,
        &cfg.features,
        cfg.zoif_enabled,
        cfg.weighting,
        cfg.scenes,
        5,
    )
    .map_err(|e| e.to_string())?;
    let trained = train_scorer(&scenes, &cfg.train).map_err(|e| e.to_string())?;
    let ratio = trained.final_eval_loss / trained.initial_eval_loss;

    let mut held_out = SuiteConfig {
        scenes: 50,
        seed: 99,
        scene: cfg.scene,
        features: OracleFeatureConfig {
            noise_sigma: 0.1,
            ..cfg.features
        },
        ..Default::default()
    };
    held_out.engine.zoif_enabled = cfg.zoif_enabled;
    held_out.engine.weighting = cfg.weighting;
    let base = run_benchmark_with(&held_out, &BaselineScorer).map_err(|e| e.to_string())?;
    let net = run_benchmark_with(&held_out, &trained.params).map_err(|e| e.to_string())?;
    check(
        trained.loss_curve.len() == 200 && ratio < 0.5 && net.rr >= base.rr - 0.05,
        format!(
            "eval loss {:.3} -> {:.3} ({:.0}%), held-out RR trained {:.2} vs baseline {:.2}",
            trained.initial_eval_loss,
            trained.final_eval_loss,
            ratio * 100.0,
            net.rr,
            base.rr
        ),
    )
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn cli_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let small_scene = r#"{"n_points": 1024, "intrinsics": {"fx": 13.4, "fy": 13.4, "cx": 16.0, "cy": 8.0, "width": 32, "height": 16}}"#;
    let configs = [
        ("synth", format!(r#"{{"scenes": 2, "scene": {small_scene}}}"#)),
        (
            "register",
            format!(r#"{{"scene": {small_scene}, "engine": {{"schedule": {{"iterations": 3}}}}}}"#),
        ),
        (
            "bench",
            format!(r#"{{"scenes": 2, "scene": {small_scene}, "engine": {{"schedule": {{"iterations": 3}}}}}}"#),
        ),
        (
            "train-scorer",
            r#"{"scenes": 2, "train": {"steps": 3, "eval_states": 2, "arch": {"widths": [4, 4]}}}"#.to_string(),
        ),
        ("grad-check", r#"{"points": 20}"#.to_string()),
    ];
    let exe = env!("CARGO_BIN_EXE_costpose");
    for (cmd, cfg) in &configs {
        let cfg_path = tmp.path().join(format!("{cmd}.json"));
        std::fs::write(&cfg_path, cfg).map_err(|e| e.to_string())?;
        let mut outputs = Vec::new();
        for attempt in 0..2 {
            let out_dir = tmp.path().join(format!("{cmd}_{attempt}"));
            std::fs::create_dir_all(&out_dir).map_err(|e| e.to_string())?;
            let target = if *cmd == "register" {
                out_dir.join("result.json")
            } else {
                out_dir.join("out")
            };
            let status = Command::new(exe)
                .arg(cmd)
                .arg("--config")
                .arg(&cfg_path)
                .arg("--seed")
                .arg("7")
                .arg("--out")
                .arg(&target)
                .output()
                .map_err(|e| e.to_string())?;
            if !status.status.success() {
                return Err(format!(
                    "{cmd} exited with {}: {}",
                    status.status,
                    String::from_utf8_lossy(&status.stderr)
                ));
            }
            let tree = read_tree(&out_dir);
            if tree.is_empty() {
                return Err(format!("{cmd} wrote nothing"));
            }
            outputs.push((tree, status.stdout));
        }
        if outputs[0] != outputs[1] {
            return Err(format!("{cmd}: outputs differ between runs"));
        }
    }
    Ok("synth, register, bench, train-scorer, grad-check byte-identical across two runs".into())
}

#[test]
fn acceptance_criteria() {
    let mut bench = None;
    let criteria: Vec<(usize, &str, Criterion)> = vec![
        (1, "oracle benchmark", Box::new(oracle_benchmark)),
        (2, "iteration trend", Box::new(|b| iteration_trend(b))),
        (3, "ZOIF ablation", Box::new(|_| zoif_ablation())),
        (4, "cost-volume equivalence", Box::new(|_| cost_volume_equivalence())),
        (5, "gradient checks", Box::new(|_| gradient_checks())),
        (6, "spot values", Box::new(|_| spot_values())),
        (7, "schedule endpoints", Box::new(|_| schedule_endpoints())),
        (
            8,
            "segmentation and worker invariance",
            Box::new(|_| segmentation_invariance()),
        ),
        (9, "toy scorer training", Box::new(|_| toy_training())),
        (10, "CLI determinism", Box::new(|_| cli_determinism())),
    ];
    let mut failed = Vec::new();
    for (id, name, f) in criteria {
        let outcome = run(|| f(&mut bench));
        report(id, name, &outcome);
        if outcome.is_err() {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
