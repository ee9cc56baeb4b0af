//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use cohesion::dataset::{
    self, balance_downsample, normalize_label, synth_generate, CohesionLabel, LabeledDataset,
    PredictionScale, Split,
};
use cohesion::evaluation::{
    self, parse_report, render_report_string, DatasetVariant, EvaluationReport, ExperimentConfig,
    ExperimentData, Method,
};
use cohesion::feature_store::{self, FeatureRecord, Modality, ModalitySpec};
use cohesion::fusion::{self, FusionStrategy, FusionWeights};
use cohesion::svr::{
    self, dual_objective, train_standardized_with_stats, train_svr_with_stats, KernelConfig,
    KernelSpec, SolveStats, SvrModel, SvrParams,
};
use common::{acceptance_synth, oracle_predict, solve_oracle, synth_data, OracleKernel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        {
            let ok: bool = $cond;
            if !ok {
                return Err(format!($($msg)+));
            }
        }
    };
}

struct Instance {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    kernel: KernelSpec,
    oracle_kernel: OracleKernel,
    params: SvrParams,
}

fn oracle_instances() -> Vec<Instance> {
    (0..60u64)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
            let n = rng.random_range(3..=12);
            let d = rng.random_range(1..=4);
            let w: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let y = x
                .iter()
                .map(|v| {
                    let s: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
                    (0.5 + 0.3 * s.sin() + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0)
                })
                .collect();
            let c = [0.5, 1.0, 5.0][(i % 3) as usize];
            let epsilon = [0.01, 0.05, 0.1][((i / 3) % 3) as usize];
            let (kernel, oracle_kernel) = if i % 2 == 0 {
                (KernelSpec::Linear, OracleKernel::Linear)
            } else {
                let g = [0.5, 1.0, 2.0][((i / 2) % 3) as usize];
                (KernelSpec::rbf(g).unwrap(), OracleKernel::Rbf(g))
            };
            Instance {
                x,
                y,
                kernel,
                oracle_kernel,
                params: SvrParams {
                    c,
                    epsilon,
                    // Prediction error scales with the square root of the
                    // objective gap, so the stopping threshold is tighter
                    // than the default here.
                    tol: 1e-5,
                    ..SvrParams::default()
                },
            }
        })
        .collect()
}

fn svr_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let instances = oracle_instances();
    let (mut linear, mut rbf) = (0, 0);
    let (mut worst_obj, mut worst_pred, mut worst_gap, mut worst_loose) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (idx, inst) in instances.iter().enumerate() {
        let (model, stats) = train_svr_with_stats(&inst.x, &inst.y, inst.kernel, &inst.params)
            .map_err(|e| format!("instance {idx}: {e}"))?;
        ensure!(stats.converged, "instance {idx}: solver did not converge");
        let sol = solve_oracle(
            inst.oracle_kernel,
            &inst.x,
            &inst.y,
            inst.params.c,
            inst.params.epsilon,
        );
        worst_gap = worst_gap.max(sol.gap().abs());
        ensure!(
            sol.gap().abs() <= 1e-7,
            "instance {idx}: oracle duality gap {:.2e} too large to certify",
            sol.gap()
        );

        let ours = dual_objective(&inst.x, &inst.y, &inst.kernel, &inst.params, &stats.betas)
            .map_err(|e| format!("instance {idx}: {e}"))?;
        let d_obj = (ours - sol.objective).abs();
        worst_obj = worst_obj.max(d_obj);
        ensure!(
            d_obj <= 1e-4,
            "instance {idx}: objective {ours} vs oracle {}",
            sol.objective
        );

        let loose = SvrParams {
            tol: SvrParams::default().tol,
            ..inst.params
        };
        let (_, loose_stats) = train_svr_with_stats(&inst.x, &inst.y, inst.kernel, &loose)
            .map_err(|e| e.to_string())?;
        let loose_obj = dual_objective(&inst.x, &inst.y, &inst.kernel, &loose, &loose_stats.betas)
            .map_err(|e| e.to_string())?;
        worst_loose = worst_loose.max((loose_obj - sol.objective).abs());
        ensure!(
            (loose_obj - sol.objective).abs() <= 1e-4,
            "instance {idx}: default-tol objective {loose_obj} vs oracle {}",
            sol.objective
        );

        let mut rng = ChaCha8Rng::seed_from_u64(5000 + idx as u64);
        let d = inst.x[0].len();
        let probes: Vec<Vec<f64>> = inst
            .x
            .iter()
            .cloned()
            .chain((0..5).map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect()))
            .collect();
        for q in &probes {
            let ours = model.predict(q).map_err(|e| e.to_string())?;
            let theirs = oracle_predict(inst.oracle_kernel, &inst.x, &sol, q);
            worst_pred = worst_pred.max((ours - theirs).abs());
            ensure!(
                (ours - theirs).abs() <= 1e-3,
                "instance {idx}: prediction {ours} vs oracle {theirs} at {q:?}"
            );
        }
        match inst.kernel {
            KernelSpec::Linear => linear += 1,
            KernelSpec::Rbf { .. } => rbf += 1,
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!(
        "{} instances ({linear} linear, {rbf} rbf), max |dobj| {worst_obj:.2e}, max |dpred| {worst_pred:.2e}, max |dobj| at default tol {worst_loose:.2e}, max oracle gap {worst_gap:.2e}, {:.2}s",
        instances.len(),
        elapsed.as_secs_f64()
    ))
}

/// Checks one solved problem. `f` holds training-set predictions.
fn check_kkt(stats: &SolveStats, y: &[f64], f: &[f64], p: &SvrParams) -> Result<(), String> {
    let n = y.len();
    ensure!(stats.converged, "not converged");
    let sum: f64 = stats.betas.iter().sum();
    ensure!(
        sum.abs() <= 1e-6 * p.c * n as f64,
        "sum of coefficients {sum:e}"
    );
    let slack = 10.0 * p.tol;
    for (i, b) in stats.betas.iter().enumerate() {
        ensure!(b.abs() <= p.c + 1e-12, "|beta_{i}| = {} exceeds C", b.abs());
        let r = y[i] - f[i];
        if *b == 0.0 {
            ensure!(
                r.abs() <= p.epsilon + slack,
                "beta_{i} = 0 but |y - f| = {}",
                r.abs()
            );
        } else {
            // Positive coefficients sit on or above the tube, negative below.
            let signed = r * b.signum();
            ensure!(
                signed >= p.epsilon - slack,
                "beta_{i} = {b} on the wrong side (y - f = {r})"
            );
            if b.abs() < p.c {
                ensure!(
                    (signed - p.epsilon).abs() <= slack,
                    "free beta_{i} = {b} is {} from the tube boundary",
                    (signed - p.epsilon).abs()
                );
            }
        }
    }
    Ok(())
}

fn kkt_invariants() -> Outcome {
    let mut checked = 0;
    for (idx, inst) in oracle_instances().iter().enumerate() {
        let (model, stats) = train_svr_with_stats(&inst.x, &inst.y, inst.kernel, &inst.params)
            .map_err(|e| e.to_string())?;
        let f: Vec<f64> = inst.x.iter().map(|q| model.predict(q).unwrap()).collect();
        check_kkt(&stats, &inst.y, &f, &inst.params)
            .map_err(|e| format!("oracle instance {idx}: {e}"))?;
        checked += 1;
    }

    let data = synth_data(&acceptance_synth());
    let cfg = ExperimentConfig {
        eval_split: Split::Test,
        ..ExperimentConfig::default()
    };
    for variant in DatasetVariant::ALL {
        let split =
            evaluation::prepare_variant(&data.dataset, variant, &cfg).map_err(|e| e.to_string())?;
        let pipeline_models = evaluation::train_modalities(
            &data,
            &split.dataset,
            &split.fit_ids,
            &data.features.keys().cloned().collect::<Vec<_>>(),
            &cfg,
        )
        .map_err(|e| e.to_string())?;
        for m in data.features.keys() {
            let (x, y) =
                evaluation::modality_training_set(&data, &split.dataset, &split.fit_ids, m)
                    .map_err(|e| e.to_string())?;
            let (model, stats) = train_standardized_with_stats(&x, &y, &cfg.kernel, &cfg.svr)
                .map_err(|e| e.to_string())?;
            ensure!(
                pipeline_models[m] == model,
                "{variant}/{m}: retrained model differs from pipeline model"
            );
            let f: Vec<f64> = x.iter().map(|q| model.predict(q).unwrap()).collect();
            check_kkt(&stats, &y, &f, &cfg.svr).map_err(|e| format!("{variant}/{m}: {e}"))?;
            checked += 1;
        }
    }
    Ok(format!(
        "{checked} models satisfy equality, box and tube conditions"
    ))
}

fn matrix(
    data: &ExperimentData,
    split: Split,
    variants: &[DatasetVariant],
) -> Result<EvaluationReport, String> {
    let cfg = ExperimentConfig {
        eval_split: split,
        cells: ExperimentConfig::full_cells(&Modality::BUILTIN, variants),
        ..ExperimentConfig::default()
    };
    evaluation::run_experiment_matrix(data, &cfg).map_err(|e| e.to_string())
}

fn row_mse(r: &EvaluationReport, m: &Method, v: DatasetVariant) -> Result<f64, String> {
    r.find(m, v)
        .map(|row| row.mse)
        .ok_or_else(|| format!("missing row {m}/{v}"))
}

fn fusion_dominance() -> Outcome {
    let start = Instant::now();
    let data = synth_data(&acceptance_synth());
    let variants = [DatasetVariant::Train, DatasetVariant::BalancedTrain];
    let report = matrix(&data, Split::Val, &variants)?;
    let elapsed = start.elapsed();
    let mut summary = Vec::new();
    for v in variants {
        let grid = row_mse(&report, &Method::FusionGrid, v)?;
        let avg = row_mse(&report, &Method::FusionAverage, v)?;
        ensure!(grid <= avg, "{v}: grid {grid} > average {avg}");
        for m in Modality::BUILTIN {
            let single = row_mse(&report, &Method::Single(m.clone()), v)?;
            ensure!(grid <= single, "{v}: grid {grid} > {m} {single}");
        }
        summary.push(format!("{v}: grid {grid:.4} avg {avg:.4}"));
    }
    ensure!(
        elapsed < Duration::from_secs(60),
        "pipeline took {elapsed:?}"
    );
    Ok(format!(
        "{}, {:.2}s",
        summary.join("; "),
        elapsed.as_secs_f64()
    ))
}

fn signal_recovery() -> Outcome {
    let data = synth_data(&acceptance_synth());
    let variants = [DatasetVariant::Train, DatasetVariant::BalancedTrain];
    let report = matrix(&data, Split::Test, &variants)?;
    let mut summary = Vec::new();
    for v in variants {
        let fused = row_mse(&report, &Method::FusionGrid, v)?;
        let base = row_mse(&report, &Method::Baseline, v)?;
        ensure!(
            fused < 0.5 * base,
            "{v}: fused test MSE {fused} not below half of baseline {base}"
        );
        summary.push(format!("{v}: fused {fused:.4} vs baseline {base:.4}"));
    }
    Ok(summary.join("; "))
}

fn binomial(n: u64, k: u64) -> u64 {
    (1..=k).fold(1, |acc, i| acc * (n + 1 - i) / i)
}

fn arithmetic_fidelity() -> Outcome {
    ensure!(
        normalize_label(3).map_err(|e| e.to_string())? == 1.0,
        "normalize(3) != 1"
    );
    ensure!(
        normalize_label(0).map_err(|e| e.to_string())? == 0.0,
        "normalize(0) != 0"
    );

    let mut labels = BTreeMap::new();
    let mut splits = BTreeMap::new();
    for i in 0..4601 {
        labels.insert(format!("a{i:05}"), CohesionLabel::new(2).unwrap());
        splits.insert(format!("a{i:05}"), Split::Train);
    }
    for i in 0..300 {
        labels.insert(
            format!("b{i:05}"),
            CohesionLabel::new([0, 1, 3][(i % 3) as usize]).unwrap(),
        );
        splits.insert(
            format!("b{i:05}"),
            if i % 2 == 0 { Split::Train } else { Split::Val },
        );
    }
    let ds = LabeledDataset::new(labels, splits).map_err(|e| e.to_string())?;
    let before = ds.level_counts(Split::Train);
    let out = balance_downsample(&ds, 2, 0.3, 42).map_err(|e| e.to_string())?;
    let after = out.level_counts(Split::Train);
    ensure!(
        before[2] == 4601,
        "fixture has {} level-2 images",
        before[2]
    );
    ensure!(after[2] == 3221, "kept {} of 4601", after[2]);
    for l in [0, 1, 3] {
        ensure!(after[l] == before[l], "level {l} changed");
    }
    ensure!(
        out.level_counts(Split::Val) == ds.level_counts(Split::Val),
        "validation changed"
    );

    let count = fusion::grid_candidates(3, 0.05)
        .map_err(|e| e.to_string())?
        .len();
    // Simplex lattice points for N = 20 plus the exact uniform vector.
    let expected = binomial(20 + 2, 2) as usize + 1;
    ensure!(
        expected == 232 && count == 232,
        "candidate count {count}, lattice formula {expected}"
    );
    Ok("normalize 3 -> 1, 0 -> 0; 4601 -> 3221; 232 candidates".into())
}

fn recombination_error(report: &EvaluationReport) -> f64 {
    report
        .rows
        .iter()
        .map(|row| (row.per_level.overall() - row.mse).abs())
        .fold(0.0, f64::max)
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let bin = env!("CARGO_BIN_EXE_cohesion");
    let data_dir = tmp.path().join("data");
    let status = Command::new(bin)
        .args(["synth", "--seed", "42", "--out"])
        .arg(&data_dir)
        .status()
        .map_err(|e| e.to_string())?;
    ensure!(status.success(), "synth failed");

    let mut reports = Vec::new();
    for run in 0..2 {
        let out = tmp.path().join(format!("run{run}"));
        let status = Command::new(bin)
            .arg("pipeline")
            .args(common::data_flags(&data_dir))
            .args([
                "--variant",
                "train",
                "--variant",
                "balanced_train",
                "--grid-step",
                "0.05",
                "--out",
            ])
            .arg(&out)
            .status()
            .map_err(|e| e.to_string())?;
        ensure!(status.success(), "pipeline run {run} failed");
        reports.push(std::fs::read(out.join("report.tsv")).map_err(|e| e.to_string())?);
    }
    ensure!(
        reports[0] == reports[1],
        "reports differ between identical runs"
    );

    let data = synth_data(&acceptance_synth());
    let a = matrix(&data, Split::Val, &DatasetVariant::ALL[..2])?;
    let b = matrix(&data, Split::Val, &DatasetVariant::ALL[..2])?;
    ensure!(
        render_report_string(&a) == render_report_string(&b),
        "in-process reports differ"
    );
    ensure!(
        render_report_string(&a).as_bytes() == reports[0].as_slice(),
        "library and CLI reports differ"
    );
    let test = matrix(&data, Split::Test, &DatasetVariant::ALL)?;
    let worst = recombination_error(&a).max(recombination_error(&test));
    ensure!(worst <= 1e-9, "per-level recombination off by {worst:e}");
    Ok(format!(
        "{} report bytes identical across runs; max recombination error {worst:.1e}",
        reports[0].len()
    ))
}

fn format_round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let e = |e: cohesion::Error| e.to_string();

    // Features, including multi-instance faces and awkward magnitudes.
    let face = ModalitySpec::face().with_dim(5).map_err(e)?;
    let records: Vec<FeatureRecord> = (0..20)
        .flat_map(|i| {
            let k = i % 3 + 1;
            let mut rows = Vec::new();
            for j in 0..k {
                let v = (0..5)
                    .map(|_| rng.random_range(-1e6..1e6) * 10f64.powi(rng.random_range(-12..4)))
                    .collect();
                rows.push(FeatureRecord::new(format!("img{i:03}"), j, v));
            }
            rows
        })
        .collect();
    let mut buf = Vec::new();
    feature_store::write_feature_file(&mut buf, &records, &face).map_err(e)?;
    let (spec, back) = feature_store::parse_feature_file_any(buf.as_slice()).map_err(e)?;
    ensure!(spec == face && back == records, "feature records changed");

    // Labels and splits.
    let out = synth_generate(&dataset::SynthConfig {
        n_train: 30,
        n_val: 10,
        n_test: 10,
        ..acceptance_synth()
    })
    .map_err(e)?;
    let mut buf = Vec::new();
    dataset::write_labels(&mut buf, out.dataset.labels()).map_err(e)?;
    ensure!(
        &dataset::parse_labels(buf.as_slice()).map_err(e)? == out.dataset.labels(),
        "labels changed"
    );
    let mut buf = Vec::new();
    dataset::write_splits(&mut buf, out.dataset.splits()).map_err(e)?;
    ensure!(
        &dataset::parse_splits(buf.as_slice()).map_err(e)? == out.dataset.splits(),
        "splits changed"
    );

    // Predictions.
    let preds: BTreeMap<String, f64> = (0..10)
        .map(|i| (format!("p{i}"), rng.random_range(-0.5..1.5)))
        .collect();
    let mut buf = Vec::new();
    dataset::write_predictions(&mut buf, &preds, PredictionScale::Normalized).map_err(e)?;
    ensure!(
        dataset::parse_predictions(buf.as_slice()).map_err(e)?
            == (PredictionScale::Normalized, preds),
        "predictions changed"
    );

    // Models of both kernels.
    let data = common::experiment_data(&out);
    let ids = out.dataset.ids(Split::Train);
    for kernel in [
        KernelConfig::default(),
        KernelConfig {
            kind: svr::KernelKind::Linear,
            gamma: None,
        },
    ] {
        let (x, y) = evaluation::modality_training_set(&data, &out.dataset, &ids, &Modality::Scene)
            .map_err(e)?;
        let model: SvrModel =
            svr::train_standardized(&x, &y, &kernel, &SvrParams::default()).map_err(e)?;
        let mut buf = Vec::new();
        svr::write_model(&mut buf, &model).map_err(e)?;
        let back = svr::parse_model(buf.as_slice()).map_err(e)?;
        ensure!(back == model, "{} model changed", kernel.kind);
        for q in &x {
            ensure!(
                back.predict(q).map_err(e)? == model.predict(q).map_err(e)?,
                "model predictions changed"
            );
        }
    }

    // Weights from both strategies.
    let grid = FusionWeights::new(
        Modality::BUILTIN.to_vec(),
        vec![0.15, 0.35, 0.5],
        FusionStrategy::GridSearch,
        Some(0.05),
    )
    .map_err(e)?;
    for w in [
        grid,
        FusionWeights::uniform(Modality::BUILTIN.to_vec()).map_err(e)?,
    ] {
        let mut buf = Vec::new();
        fusion::write_weights(&mut buf, &w).map_err(e)?;
        ensure!(
            fusion::parse_weights(buf.as_slice()).map_err(e)? == w,
            "weights changed"
        );
    }

    // Report: rendered numbers parse back within half a unit of the sixth decimal.
    let report = matrix(&data, Split::Val, &[DatasetVariant::Train])?;
    let parsed = parse_report(render_report_string(&report).as_bytes()).map_err(e)?;
    ensure!(
        parsed.seed == report.seed && parsed.rows.len() == report.rows.len(),
        "report shape changed"
    );
    let half = 0.5e-6 + 1e-15;
    for (p, r) in parsed.rows.iter().zip(&report.rows) {
        ensure!(
            p.method == r.method && p.variant == r.variant && p.split == r.split && p.n == r.n(),
            "row key changed"
        );
        ensure!((p.mse - r.mse).abs() <= half, "mse {} vs {}", p.mse, r.mse);
        for (a, b) in p.mse_per_level.iter().zip(&r.per_level.mse) {
            match (a, b) {
                (Some(a), Some(b)) => ensure!((a - b).abs() <= half, "level mse {a} vs {b}"),
                (None, None) => {}
                _ => return Err("absent level changed".into()),
            }
        }
    }
    Ok("features, labels, splits, predictions, models, weights, report".into())
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("svr_oracle_equivalence", svr_oracle_equivalence),
        ("kkt_invariants", kkt_invariants),
        ("fusion_dominance", fusion_dominance),
        ("end_to_end_signal_recovery", signal_recovery),
        ("arithmetic_fidelity", arithmetic_fidelity),
        ("determinism", determinism),
        ("format_round_trips", format_round_trips),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
