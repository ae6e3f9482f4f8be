use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use dstgcn::data::{
    load_series, prepare_dataset, synth_generate, write_regime_labels, write_travel_csv, write_volume_csv, LoadReport,
    PreparedDataset, TrainingWindow,
};
use dstgcn::diffcore::{grad_check, Bound, Tensor};
use dstgcn::model::{AuxiliaryCodes, DstGcnn, ModelConfig};
use dstgcn::traineval::{
    baseline_historical_average, baseline_persistence, evaluate, factorization_benchmark, train, HistoricalAverage,
    MetricReport,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;

/// Gradient check above tolerance; exits with the numerical-failure code.
#[derive(Debug, thiserror::Error)]
#[error("gradient check failed: max_rel_err {0:.3e} >= {1:.0e}")]
pub struct GradcheckFailed(pub f64, pub f64);

pub const VOLUME_FILE: &str = "volumes.csv";
pub const TRAVEL_FILE: &str = "travel_times.csv";
pub const REGIME_FILE: &str = "regimes.csv";

fn ensure_out(c: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(&c.out).with_context(|| format!("creating output directory {}", c.out.display()))
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn generate(c: &mut RunConfig) -> anyhow::Result<()> {
    let syn = synth_generate::<f64>(&c.synth)?;
    ensure_out(c)?;
    let (vol, travel) = (c.out.join(VOLUME_FILE), c.out.join(TRAVEL_FILE));
    write_volume_csv(&vol, &syn.traffic)?;
    write_travel_csv(&travel, syn.traffic.timestamps(), &syn.travel)?;
    write_regime_labels(&c.out.join(REGIME_FILE), syn.traffic.timestamps(), &syn.regimes)?;
    // the snapshot doubles as a ready-to-train config for this dataset
    c.data.volume = vol;
    c.data.travel = travel;
    c.data.slot_minutes = c.synth.slot_minutes;
    c.model.nodes = c.synth.nodes;
    c.model.flow.in_channels = 1;
    c.write_snapshot()?;
    println!(
        "wrote {} steps x {} nodes to {} (regime affinity gap {:.3})",
        c.synth.steps,
        c.synth.nodes,
        c.out.display(),
        syn.regime_affinity_gap()
    );
    Ok(())
}

struct Loaded {
    data: PreparedDataset<f64>,
    report: LoadReport,
}

fn load(c: &mut RunConfig) -> anyhow::Result<Loaded> {
    for p in [&c.data.volume, &c.data.travel] {
        if !p.is_file() {
            bail!("input file {} does not exist", p.display());
        }
    }
    let (traffic, travel, report) = load_series::<f64>(&c.data.volume, &c.data.travel, &c.schema())?;
    let data = prepare_dataset(&traffic, &travel, &c.prepare_options())?;
    // the embedding width follows the data's slot length
    c.model.aux.slots_per_day = data.traffic.slots_per_day();
    c.model.validate()?;
    Ok(Loaded { data, report })
}

fn build_model(c: &RunConfig, data: &PreparedDataset<f64>) -> anyhow::Result<DstGcnn<f64>> {
    let mut m = DstGcnn::new(c.model.clone(), c.seed)?;
    if !c.model.dynamic_graph {
        m.set_static_affinity(&data.train_affinity)?;
    }
    Ok(m)
}

fn write_report(c: &RunConfig, stem: &str, reports: &[MetricReport]) -> anyhow::Result<()> {
    let json = serde_json::to_string_pretty(reports)?;
    write(&c.out.join(format!("{stem}.json")), &json)?;
    let mut csv = String::from(MetricReport::csv_header());
    csv.push('\n');
    for r in reports {
        csv.push_str(&r.csv_rows());
    }
    write(&c.out.join(format!("{stem}.csv")), &csv)
}

fn summary(r: &MetricReport) -> String {
    format!(
        "{:<20} windows {:>5}  RMSE {:>10.4}  MAE {:>10.4}  MAPE {:>8.2}%",
        r.name, r.windows, r.rmse, r.mae, r.mape
    )
}

pub fn train_cmd(c: &mut RunConfig) -> anyhow::Result<()> {
    let Loaded { data, report } = load(c)?;
    ensure_out(c)?;
    c.write_snapshot()?;
    write(&c.out.join("load_report.json"), &serde_json::to_string_pretty(&report)?)?;
    if report.volume_missing_fraction > 0.0 || report.travel_missing_fraction > 0.0 {
        println!(
            "filled {:.2}% of volume cells and {:.2}% of travel entries",
            100.0 * report.volume_missing_fraction,
            100.0 * report.travel_missing_fraction
        );
    }
    let mut model = build_model(c, &data)?;
    println!(
        "training {} parameters on {} windows ({} validation)",
        model.params().num_scalars(),
        data.train.len(),
        data.validation.len()
    );
    let rep = train(&mut model, &data.train, &data.validation, &c.schedule)?;
    write(&c.out.join("loss_curve.csv"), &rep.curve_csv())?;
    model.save_checkpoint(&c.checkpoint_path())?;
    if let Some(best) = &rep.best_params {
        let mut b = model.clone();
        *b.params_mut() = best.clone();
        b.save_checkpoint(&c.out.join("checkpoint_best.txt"))?;
    }
    if !data.validation.is_empty() {
        let mut r = evaluate(&model, &data.validation, &data.stats)?;
        r.name = "model".into();
        println!("{}", summary(&r));
        write_report(c, "validation_metrics", &[r])?;
    }
    if let Some(l) = rep.final_loss() {
        println!("final train loss {l:.6} after {:.1}s", rep.seconds);
    }
    Ok(())
}

fn load_model(c: &RunConfig) -> anyhow::Result<DstGcnn<f64>> {
    let path = c.checkpoint_path();
    if !path.is_file() {
        bail!("checkpoint {} does not exist", path.display());
    }
    Ok(DstGcnn::load_checkpoint(c.model.clone(), &path)?)
}

pub fn eval_cmd(c: &mut RunConfig) -> anyhow::Result<()> {
    let Loaded { data, .. } = load(c)?;
    let model = load_model(c)?;
    ensure_out(c)?;
    if data.test.is_empty() {
        bail!("test split is too short for a single window");
    }
    let horizon = c.model.flow.horizon;
    let mut m = evaluate(&model, &data.test, &data.stats)?;
    m.name = "model".into();
    let p = baseline_persistence(&data.test, &data.stats, horizon)?;
    let ha = HistoricalAverage::fit(&data.traffic, data.splits.train.clone())?;
    let h = baseline_historical_average(&data.test, &data.traffic, &ha, &data.stats, horizon)?;
    for r in [&m, &p, &h] {
        println!("{}", summary(r));
    }
    write_report(c, "test_metrics", &[m, p, h])
}

fn anchor_inputs(data: &PreparedDataset<f64>, codes: &[AuxiliaryCodes], tp: usize, t: usize) -> anyhow::Result<TrainingWindow<f64>> {
    let steps = data.flows.shape()[0];
    if t >= steps || t + 1 < tp {
        bail!("anchor {t} needs {tp} steps of history inside a {steps}-step series");
    }
    let (c0, n) = (data.flows.shape()[1], data.flows.shape()[2]);
    let mut x = Tensor::zeros(&[c0, tp, n]);
    let mut s = Vec::with_capacity(tp * n * n);
    for p in 0..tp {
        let step = t + 1 + p - tp;
        for ch in 0..c0 {
            for i in 0..n {
                x.set(&[ch, p, i], data.flows.get(&[step, ch, i]));
            }
        }
        s.extend_from_slice(data.affinities[step].data());
    }
    Ok(TrainingWindow {
        anchor: t,
        x,
        s: Tensor::new(vec![tp, n, n], s)?,
        y: None,
        target: Tensor::zeros(&[c0, n]),
        abar: Tensor::zeros(&[n, n]),
        codes: codes[t].clone(),
    })
}

pub fn predict_cmd(c: &mut RunConfig) -> anyhow::Result<()> {
    let Loaded { data, .. } = load(c)?;
    let model = load_model(c)?;
    ensure_out(c)?;
    let steps = data.traffic.steps();
    let t = c.anchor.unwrap_or(steps - 1);
    let codes = data.traffic.codes()?;
    let w = anchor_inputs(&data, &codes, c.model.flow.history, t)?;
    let b = model.predict_window(&w)?;
    let target = data.stats.denormalize(&b.target)?;
    let (c0, n) = (target.shape()[0], target.shape()[1]);
    let slot = chrono::Duration::minutes(i64::from(data.traffic.slot_minutes()));
    let at = |k: usize| data.traffic.timestamps()[t] + slot * k as i32;
    let stamp = |k: usize| at(k).to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
    let horizon = c.model.flow.horizon;
    let mut csv = String::from("timestamp,channel,node,value\n");
    for ch in 0..c0 {
        for i in 0..n {
            let _ = writeln!(csv, "{},{ch},{i},{}", stamp(horizon), target.get(&[ch, i]));
        }
    }
    write(&c.out.join("predictions.csv"), &csv)?;
    if let Some(y) = &b.close_future {
        let y = data.stats.denormalize_steps(y)?;
        let mut csv = String::from("timestamp,channel,node,value\n");
        for ch in 0..c0 {
            for j in 0..horizon - 1 {
                for i in 0..n {
                    let _ = writeln!(csv, "{},{ch},{i},{}", stamp(j + 1), y.get(&[ch, j, i]));
                }
            }
        }
        write(&c.out.join("close_future.csv"), &csv)?;
    }
    println!("forecast for {} from anchor step {t}: {} rows", stamp(horizon), c0 * n);
    Ok(())
}

fn random_window(cfg: &ModelConfig, seed: u64) -> anyhow::Result<TrainingWindow<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, f) = (cfg.nodes, &cfg.flow);
    let sym = |rng: &mut ChaCha8Rng| {
        let mut a = Tensor::zeros(&[n, n]);
        for i in 0..n {
            a.set(&[i, i], 1.0);
            for j in 0..i {
                let v = rng.random_range(0.05..0.95);
                a.set(&[i, j], v);
                a.set(&[j, i], v);
            }
        }
        a
    };
    let mut s = Vec::with_capacity(f.history * n * n);
    for _ in 0..f.history {
        s.extend(sym(&mut rng).into_data());
    }
    let abar = sym(&mut rng);
    let mut uniform = |shape: &[usize]| -> anyhow::Result<Tensor<f64>> {
        let len = shape.iter().product();
        Ok(Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(0.05..0.95)).collect())?)
    };
    let x = uniform(&[f.in_channels, f.history, n])?;
    let y = if f.horizon > 1 {
        Some(uniform(&[f.in_channels, f.horizon - 1, n])?)
    } else {
        None
    };
    let target = uniform(&[f.in_channels, n])?;
    let spd = cfg.aux.slots_per_day;
    Ok(TrainingWindow {
        anchor: f.history - 1,
        x,
        s: Tensor::new(vec![f.history, n, n], s)?,
        y,
        target,
        abar,
        codes: AuxiliaryCodes::from_indices(seed as usize % spd, spd, (seed / 7) as usize % 7, None)?,
    })
}

pub fn gradcheck_cmd(c: &mut RunConfig) -> anyhow::Result<()> {
    let g = c.gradcheck.clone();
    let mut cfg = c.model.clone();
    cfg.nodes = g.nodes;
    cfg.flow.history = g.history;
    cfg.flow.horizon = g.horizon;
    cfg.aux.slots_per_day = g.slots_per_day;
    let mut model = DstGcnn::<f64>::new(cfg.clone(), c.seed)?;
    let w = random_window(&cfg, c.seed.wrapping_add(1))?;
    if !cfg.dynamic_graph {
        model.set_static_affinity(&dstgcn::graphops::AffinityMatrix::from_tensor(w.abar.clone(), 1.0)?)?;
    }
    let point: Vec<Tensor<f64>> = model.params().iter().map(|(_, _, t)| t.clone()).collect();
    let report = grad_check(
        |tape, vars| Ok(model.loss(tape, &Bound::from_vars(vars.to_vec()), &w)?.total),
        &point,
        g.epsilon,
    )?;
    ensure_out(c)?;
    let mut text = String::from("parameter,max_rel_err\n");
    for ((_, name, _), e) in model.params().iter().zip(&report.per_input) {
        let _ = writeln!(text, "{name},{e:.6e}");
    }
    write(&c.out.join("gradcheck.csv"), &text)?;
    let (worst, _) = report.worst;
    let worst_name = model.params().iter().nth(worst).map_or("?", |(_, n, _)| n).to_string();
    if report.max_rel_error < g.tolerance {
        println!(
            "PASS, max_rel_err={:.3e} < {:.0e} over {} tensors",
            report.max_rel_error,
            g.tolerance,
            point.len()
        );
        Ok(())
    } else {
        println!("FAIL, max_rel_err={:.3e} at {worst_name}", report.max_rel_error);
        Err(GradcheckFailed(report.max_rel_error, g.tolerance).into())
    }
}

pub fn bench_cmd(c: &mut RunConfig) -> anyhow::Result<()> {
    let rows = factorization_benchmark(&c.bench)?;
    ensure_out(c)?;
    let mut csv = String::from("nodes,channels,steps,factorized_seconds,joint_seconds,ratio\n");
    println!("{:>5} {:>8} {:>5} {:>14} {:>14} {:>8}", "N", "C", "T", "factorized_s", "joint_s", "ratio");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{:.6e},{:.6e},{:.3}",
            r.nodes, r.channels, r.steps, r.factorized_seconds, r.joint_seconds, r.ratio
        );
        println!(
            "{:>5} {:>8} {:>5} {:>14.6e} {:>14.6e} {:>8.2}",
            r.nodes, r.channels, r.steps, r.factorized_seconds, r.joint_seconds, r.ratio
        );
    }
    write(&c.out.join("bench.csv"), &csv)
}
