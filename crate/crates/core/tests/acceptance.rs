//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use dstgcn::data::{prepare_dataset, synth_generate, PrepareOptions, SynthConfig};
use dstgcn::diffcore::{grad_check, Bound, Tensor};
use dstgcn::graphops::affinity_from_travel_time;
use dstgcn::model::{DstGcnn, ModelConfig};
use dstgcn::traineval::{
    ablation_run, factorization_benchmark, flat_metrics, graph_recovery_error, reports_from_predictions, train,
    BenchConfig, TrainSchedule,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SPECTRAL_GRAPHS: usize = 200;
const SPECTRAL_TOL: f64 = 1e-8;
const SPECTRAL_SECONDS: f64 = 10.0;

const GRAD_TOL: f64 = 1e-4;
const GRAD_EPSILON: f64 = 1e-6;
const GRAD_SECONDS: f64 = 60.0;

const METRIC_TOL: f64 = 1e-6;

const ABLATION_MARGIN: f64 = 0.98;
const ABLATION_SECONDS: f64 = 30.0 * 60.0;

const RECOVERY_TOL: f64 = 0.05;

const BENCH_RATIO: f64 = 1.0;
const BENCH_FACTORIZED_DOUBLING: (f64, f64) = (1.6, 2.6);
const BENCH_JOINT_DOUBLING: f64 = 3.0;

const SUITE_SECONDS: f64 = 5.0 * 60.0;

type Outcome = Result<String, String>;

fn timed(limit: Option<f64>, f: impl FnOnce() -> Outcome) -> (Outcome, f64) {
    let start = Instant::now();
    let out = f();
    let secs = start.elapsed().as_secs_f64();
    let out = match (out, limit) {
        (Ok(_), Some(l)) if secs >= l => Err(format!("took {secs:.1}s, limit {l:.0}s")),
        (o, _) => o,
    };
    (out, secs)
}

fn spectral() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut worst: f64 = 0.0;
    for _ in 0..SPECTRAL_GRAPHS {
        let n = rng.random_range(4..=12);
        let k = rng.random_range(1..=6);
        let mut a = Tensor::zeros(&[n, n]);
        for i in 0..n {
            a.set(&[i, i], 1.0);
            for j in 0..i {
                let v: f64 = rng.random_range(0.0..1.0);
                a.set(&[i, j], v);
                a.set(&[j, i], v);
            }
        }
        let theta: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        worst = worst.max(common::spectral_gap(&a, &theta, &x)?);
    }
    let msg = format!("max abs error {worst:.2e} over {SPECTRAL_GRAPHS} graphs");
    if worst < SPECTRAL_TOL {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn gradients() -> Outcome {
    let syn = synth_generate::<f64>(&SynthConfig {
        nodes: 4,
        steps: 200,
        seed: 4,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let opts = PrepareOptions {
        history: 4,
        horizon: 3,
        ..PrepareOptions::default()
    };
    let data = prepare_dataset(&syn.traffic, &syn.travel, &opts).map_err(|e| e.to_string())?;
    let mut cfg = ModelConfig {
        nodes: 4,
        ..ModelConfig::default()
    };
    cfg.flow.history = 4;
    cfg.flow.horizon = 3;
    cfg.aux.slots_per_day = data.traffic.slots_per_day();
    let model = DstGcnn::<f64>::new(cfg, 9).map_err(|e| e.to_string())?;
    let w = &data.train[data.train.len() / 2];
    let point: Vec<Tensor<f64>> = model.params().iter().map(|(_, _, t)| t.clone()).collect();
    let report = grad_check(
        |tape, vars| Ok(model.loss(tape, &Bound::from_vars(vars.to_vec()), w)?.total),
        &point,
        GRAD_EPSILON,
    )
    .map_err(|e| e.to_string())?;
    let names: Vec<String> = model.params().iter().map(|(_, n, _)| n.to_string()).collect();
    let failing: Vec<String> = names
        .iter()
        .zip(&report.per_input)
        .filter(|(_, &e)| !(e < GRAD_TOL))
        .map(|(n, e)| format!("{n}={e:.2e}"))
        .collect();
    let msg = format!("max rel error {:.2e} over {} tensors", report.max_rel_error, point.len());
    if failing.is_empty() {
        Ok(msg)
    } else {
        Err(format!("{msg}; failing {}", failing.join(", ")))
    }
}

fn frame(v: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
}

fn metrics() -> Outcome {
    let r = reports_from_predictions("hand", &[frame(&[2.0, 4.0])], &[frame(&[1.0, 2.0])], 1, None, 0.0)
        .map_err(|e| e.to_string())?;
    let want = (2.5f64.sqrt(), 1.5, 100.0);
    let close = |a: f64, b: f64| (a - b).abs() < METRIC_TOL;
    if !(close(r.rmse, want.0) && close(r.mae, want.1) && close(r.mape, want.2)) {
        return Err(format!("got RMSE {} MAE {} MAPE {}", r.rmse, r.mae, r.mape));
    }
    // Two timesteps, residuals 0 then 2: per-step RMSE averages to 1, flat pooling gives √2.
    let preds = [frame(&[0.0, 0.0]), frame(&[1.0, 1.0])];
    let truths = [frame(&[0.0, 0.0]), frame(&[3.0, 3.0])];
    let ordered = reports_from_predictions("order", &preds, &truths, 1, None, 0.0).map_err(|e| e.to_string())?;
    let flat = flat_metrics(&[vec![0.0, 0.0], vec![1.0, 1.0]], &[vec![0.0, 0.0], vec![3.0, 3.0]])
        .map_err(|e| e.to_string())?;
    if !(close(ordered.rmse, 1.0) && close(flat.rmse, 2f64.sqrt())) {
        return Err(format!("per-step RMSE {} (want 1), flat {} (want √2)", ordered.rmse, flat.rmse));
    }
    Ok(format!(
        "RMSE {:.4} MAE {:.4} MAPE {:.1}%; per-step RMSE {:.4} vs flat {:.4}",
        r.rmse, r.mae, r.mape, ordered.rmse, flat.rmse
    ))
}

/// Desk-scale schedule for the regime-switching ablation.
fn ablation_schedule() -> (PrepareOptions, TrainSchedule) {
    let opts = PrepareOptions {
        train_stride: 2,
        ..PrepareOptions::default()
    };
    let schedule = TrainSchedule {
        pretrain_epochs: 10,
        joint_epochs: 100,
        lr_phase1: 0.03,
        lr_phase2: 0.03,
        lr_step_epoch: 50,
        batch_size: 4,
        ..TrainSchedule::default()
    };
    (opts, schedule)
}

fn ablation() -> Outcome {
    let syn = synth_generate::<f64>(&SynthConfig::default()).map_err(|e| e.to_string())?;
    let (opts, schedule) = ablation_schedule();
    let data = prepare_dataset(&syn.traffic, &syn.travel, &opts).map_err(|e| e.to_string())?;
    let base = ModelConfig {
        nodes: syn.config.nodes,
        ..ModelConfig::default()
    };
    let table = ablation_run(&data, &base, &schedule, 1).map_err(|e| e.to_string())?;
    for line in table.to_text().lines() {
        println!("    {line}");
    }
    let mae = |n: &str| table.mae(n).ok_or_else(|| format!("no row {n}"));
    let (basel, ae, dg, full) = (mae("Basel")?, mae("Basel+AE")?, mae("Basel+AE+DG")?, mae("Basel+AE+DG+TP")?);
    let persistence = table.persistence.mae;
    println!(
        "    ordering: full<DG {} DG<=AE {} AE<=Basel {}",
        full < dg,
        dg <= ae,
        ae <= basel
    );
    let msg = format!(
        "MAE full {full:.4} vs Basel {basel:.4} ({:+.1}%) vs persistence {persistence:.4} ({:+.1}%)",
        100.0 * (full / basel - 1.0),
        100.0 * (full / persistence - 1.0)
    );
    if full < ABLATION_MARGIN * basel && full < ABLATION_MARGIN * persistence {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn recovery() -> Outcome {
    let syn = synth_generate::<f64>(&SynthConfig {
        single_regime: true,
        seed: 3,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let opts = PrepareOptions {
        train_stride: 4,
        ..PrepareOptions::default()
    };
    let data = prepare_dataset(&syn.traffic, &syn.travel, &opts).map_err(|e| e.to_string())?;
    let truth = affinity_from_travel_time(&syn.true_travel[0], data.sigma).map_err(|e| e.to_string())?;
    let cfg = ModelConfig {
        nodes: syn.config.nodes,
        ..ModelConfig::default()
    };
    let mut model = DstGcnn::<f64>::new(cfg, 5).map_err(|e| e.to_string())?;
    let schedule = TrainSchedule {
        pretrain_epochs: 15,
        joint_epochs: 0,
        lr_phase1: 0.05,
        ..TrainSchedule::default()
    };
    train(&mut model, &data.train, &[], &schedule).map_err(|e| e.to_string())?;
    let err = graph_recovery_error(&model, &data.test, truth.as_tensor()).map_err(|e| e.to_string())?;
    let msg = format!("mean abs error {err:.4} over {} test windows", data.test.len());
    if err < RECOVERY_TOL {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn benchmark() -> Outcome {
    let rows = factorization_benchmark(&BenchConfig::default()).map_err(|e| e.to_string())?;
    let (a, b) = match rows.as_slice() {
        [a, b] if b.steps == 2 * a.steps => (a, b),
        _ => return Err("expected rows at T and 2T".into()),
    };
    let fact = b.factorized_seconds / a.factorized_seconds;
    let joint = b.joint_seconds / a.joint_seconds;
    let msg = format!("ratio {:.2} at T={}, doubling factorized {fact:.2} joint {joint:.2}", a.ratio, a.steps);
    let ok = a.ratio > BENCH_RATIO
        && (BENCH_FACTORIZED_DOUBLING.0..=BENCH_FACTORIZED_DOUBLING.1).contains(&fact)
        && joint >= BENCH_JOINT_DOUBLING;
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn suites() -> Outcome {
    let mut failed = Vec::new();
    for (name, f) in common::SUITES {
        if let Err(e) = f() {
            failed.push(format!("{name}: {e}"));
        }
    }
    if failed.is_empty() {
        Ok(format!("{} suites", common::SUITES.len()))
    } else {
        Err(failed.join("; "))
    }
}

type Criterion = (&'static str, Option<f64>, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("spectral_equivalence", Some(SPECTRAL_SECONDS), spectral),
        ("gradient_integrity", Some(GRAD_SECONDS), gradients),
        ("metric_fidelity", None, metrics),
        ("two_step_and_dynamic_graph_efficacy", Some(ABLATION_SECONDS), ablation),
        ("graph_stream_recovery", None, recovery),
        ("factorization_benchmark", None, benchmark),
        ("invariant_suites", Some(SUITE_SECONDS), suites),
    ];
    let only = std::env::args().nth(1).filter(|a| !a.starts_with('-'));
    let mut failures = 0;
    for (name, limit, f) in criteria {
        if only.as_deref().is_some_and(|o| !name.contains(o)) {
            continue;
        }
        let (out, secs) = timed(limit, f);
        match out {
            Ok(m) => println!("PASS {name}: {m} [{secs:.1}s]"),
            Err(m) => {
                failures += 1;
                println!("FAIL {name}: {m} [{secs:.1}s]");
            }
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
