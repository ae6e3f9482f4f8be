// Property suites shared by the `invariants` test target and the acceptance runner.
#![allow(dead_code)]

use dstgcn::data::{prepare_dataset, synth_generate, NormStats, PrepareOptions, SynthConfig};
use dstgcn::diffcore::{grad_check, Tape, Tensor, Var};
use dstgcn::graphops::{
    affinity_from_travel_time, laplacian_of, normalized_laplacian, spatial_graph_conv, spectral_conv_oracle,
    symmetric_eigen, GraphLaplacian, SpectralFilter, TravelTimeMatrix,
};
use dstgcn::model::{AuxConfig, AuxiliaryCodes, DstGcnn, FlowStreamConfig, GraphStreamConfig, ModelConfig};
use dstgcn::stc::{FeatureTensor, StcLayerParams};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

pub type Suite = (&'static str, fn() -> Result<(), String>);

pub const SUITES: &[Suite] = &[
    ("chain_rule_on_random_compositions", chain_rule),
    ("tape_replay_is_deterministic", tape_determinism),
    ("spectral_equivalence", spectral_equivalence),
    ("graph_conv_permutation_equivariance", graph_conv_equivariance),
    ("laplacian_spectrum_in_0_2", laplacian_spectrum),
    ("filter_locality_on_paths", locality),
    ("affinity_symmetry_and_range", affinity_range),
    ("stc_shape_and_linearity", stc_linearity),
    ("stc_permutation_equivariance", stc_equivariance),
    ("model_outputs_non_negative", model_non_negativity),
    ("window_alignment", window_alignment),
];

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn run<T: Strategy>(cases: u32, strategy: T, test: impl Fn(T::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    runner(cases).run(&strategy, test).map_err(|e| e.to_string())
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), TestCaseError> {
    if ok {
        Ok(())
    } else {
        Err(TestCaseError::fail(msg()))
    }
}

fn sym_matrix(n: usize, vals: &[f64]) -> Tensor<f64> {
    let mut a = Tensor::zeros(&[n, n]);
    let mut k = 0;
    for i in 0..n {
        a.set(&[i, i], 1.0);
        for j in 0..i {
            a.set(&[i, j], vals[k]);
            a.set(&[j, i], vals[k]);
            k += 1;
        }
    }
    a
}

/// A random weighted graph on `4..=12` nodes with every weight in `(0, 1]`.
pub fn graph_strategy() -> impl Strategy<Value = Tensor<f64>> {
    (4usize..=12)
        .prop_flat_map(|n| (Just(n), prop::collection::vec(0.01f64..1.0, n * (n - 1) / 2)))
        .prop_map(|(n, v)| sym_matrix(n, &v))
}

fn signed_magnitude() -> impl Strategy<Value = f64> {
    (0.2f64..1.0, any::<bool>()).prop_map(|(m, s)| if s { m } else { -m })
}

#[derive(Clone, Debug)]
enum Op {
    Add,
    Mul,
    Scale(f64),
    Sigmoid,
    Square,
    Matmul,
    Bias,
    ConcatSlice(usize),
}

fn op_strategy() -> impl Strategy<Value = Op> {
    prop_oneof![
        Just(Op::Add),
        Just(Op::Mul),
        (-2.0f64..2.0).prop_map(Op::Scale),
        Just(Op::Sigmoid),
        Just(Op::Square),
        Just(Op::Matmul),
        Just(Op::Bias),
        (0usize..8).prop_map(Op::ConcatSlice),
    ]
}

fn apply(tape: &mut Tape<f64>, ops: &[Op], v: &[Var], rows: usize) -> dstgcn::Result<Var> {
    let (mut h, b, w, bias) = (v[0], v[1], v[2], v[3]);
    for op in ops {
        h = match *op {
            Op::Add => tape.add(h, b)?,
            Op::Mul => tape.mul(h, b)?,
            Op::Scale(c) => tape.scale(h, c)?,
            Op::Sigmoid => tape.sigmoid(h)?,
            Op::Square => tape.square(h)?,
            Op::Matmul => tape.matmul(h, w)?,
            Op::Bias => tape.add_bias(h, bias)?,
            Op::ConcatSlice(k) => {
                let c = tape.concat(&[h, b], 0)?;
                tape.slice(c, 0, k % (rows + 1), rows)?
            }
        };
    }
    tape.mean(h)
}

/// Reverse-mode gradients of up to five chained primitives agree with central differences.
pub fn chain_rule() -> Result<(), String> {
    let case = (1usize..=8, 1usize..=8)
        .prop_flat_map(|(r, c)| {
            (
                Just((r, c)),
                prop::collection::vec(signed_magnitude(), 2 * r * c + c * c + r),
                prop::collection::vec(op_strategy(), 1..=5),
            )
        });
    run(200, case, |((r, c), vals, ops)| {
        let (x, rest) = vals.split_at(r * c);
        let (b, rest) = rest.split_at(r * c);
        let (w, bias) = rest.split_at(c * c);
        let point = vec![
            Tensor::new(vec![r, c], x.to_vec()).unwrap(),
            Tensor::new(vec![r, c], b.to_vec()).unwrap(),
            Tensor::new(vec![c, c], w.to_vec()).unwrap(),
            Tensor::new(vec![r], bias.to_vec()).unwrap(),
        ];
        let rep = grad_check(|tape, v| apply(tape, &ops, v, r), &point, 1e-6).map_err(|e| TestCaseError::fail(e.to_string()))?;
        check(rep.max_rel_error < 1e-5, || format!("{ops:?} on {r}x{c}: {rep:?}"))
    })
}

pub fn tape_determinism() -> Result<(), String> {
    let case = (prop::collection::vec(signed_magnitude(), 16 + 16 + 16 + 4), prop::collection::vec(op_strategy(), 1..=5));
    run(50, case, |(vals, ops)| {
        let grads = || {
            let mut tape = Tape::new();
            let vars: Vec<Var> = [(0, vec![4, 4]), (16, vec![4, 4]), (32, vec![4, 4]), (48, vec![4])]
                .into_iter()
                .map(|(o, s)| {
                    let len: usize = s.iter().product();
                    tape.leaf(Tensor::new(s, vals[o..o + len].to_vec()).unwrap())
                })
                .collect();
            let out = apply(&mut tape, &ops, &vars, 4).unwrap();
            let mut g = tape.backward(out).unwrap();
            vars.iter().map(|&v| g.take(v).map(|t| t.into_data())).collect::<Vec<_>>()
        };
        check(grads() == grads(), || format!("{ops:?}"))
    })
}

fn filter_case() -> impl Strategy<Value = (Tensor<f64>, Vec<f64>, Vec<f64>)> {
    graph_strategy().prop_flat_map(|a| {
        let n = a.shape()[0];
        (
            Just(a),
            prop::collection::vec(-1.0f64..1.0, 1..=6),
            prop::collection::vec(-1.0f64..1.0, n),
        )
    })
}

/// Max abs gap between the polynomial filter and the eigenbasis filter.
pub fn spectral_gap(a: &Tensor<f64>, theta: &[f64], x: &[f64]) -> Result<f64, String> {
    let lap = laplacian_of(a).map_err(|e| e.to_string())?;
    let filter = SpectralFilter::new(theta.to_vec()).map_err(|e| e.to_string())?;
    let poly = spatial_graph_conv(x, &lap, &filter).map_err(|e| e.to_string())?;
    let eig = symmetric_eigen(&lap).map_err(|e| e.to_string())?;
    let response: Vec<f64> = eig.eigenvalues.iter().map(|&l| filter.response(l)).collect();
    let oracle = spectral_conv_oracle(x, &lap, &response).map_err(|e| e.to_string())?;
    Ok(poly.iter().zip(&oracle).map(|(p, o)| (p - o).abs()).fold(0.0, f64::max))
}

pub fn spectral_equivalence() -> Result<(), String> {
    run(200, filter_case(), |(a, theta, x)| {
        let gap = spectral_gap(&a, &theta, &x).map_err(TestCaseError::fail)?;
        check(gap < 1e-8, || format!("gap {gap}"))
    })
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

pub fn graph_conv_equivariance() -> Result<(), String> {
    let case = filter_case().prop_flat_map(|c| {
        let n = c.0.shape()[0];
        (Just(c), permutation(n))
    });
    run(100, case, |((a, theta, x), perm)| {
        let lap = laplacian_of(&a).unwrap();
        let filter = SpectralFilter::new(theta).unwrap();
        let y = spatial_graph_conv(&x, &lap, &filter).unwrap();
        let px: Vec<f64> = perm.iter().map(|&p| x[p]).collect();
        let py = spatial_graph_conv(&px, &lap.permuted(&perm), &filter).unwrap();
        let gap = perm.iter().zip(&py).map(|(&p, v)| (v - y[p]).abs()).fold(0.0, f64::max);
        check(gap < 1e-12, || format!("gap {gap}"))
    })
}

fn eigen_range(lap: &GraphLaplacian<f64>) -> (f64, f64) {
    let eig = symmetric_eigen(lap).unwrap();
    let lo = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

pub fn laplacian_spectrum() -> Result<(), String> {
    // zero weights are allowed here, including isolated nodes
    let case = (4usize..=12).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..1.0], n * (n - 1) / 2),
            prop::collection::vec(0.0f64..1.0, n),
        )
    });
    run(200, case, |(n, off, diag)| {
        let mut a = sym_matrix(n, &off);
        for (i, d) in diag.iter().enumerate() {
            a.set(&[i, i], *d);
        }
        let lap = laplacian_of(&a).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let (lo, hi) = eigen_range(&lap);
        let sym = (0..n).all(|i| (0..n).all(|j| lap.get(i, j) == lap.get(j, i)));
        let deg = (0..n).all(|i| (lap.degree()[i] - (0..n).map(|j| a.get(&[i, j])).sum::<f64>()).abs() < 1e-12);
        check(sym && deg && lo >= -1e-10 && hi <= 2.0 + 1e-10, || format!("spectrum [{lo}, {hi}] sym {sym} deg {deg}"))
    })
}

pub fn locality() -> Result<(), String> {
    let case = (4usize..=12).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec(0.1f64..1.0, n - 1),
            0usize..4,
            0..n,
            prop::collection::vec(-1.0f64..1.0, n),
        )
    });
    run(100, case, |(n, w, k, i, x)| {
        let mut a = Tensor::zeros(&[n, n]);
        for (j, &v) in w.iter().enumerate() {
            a.set(&[j, j + 1], v);
            a.set(&[j + 1, j], v);
        }
        let lap = laplacian_of(&a).unwrap();
        let mut theta = vec![0.0; k + 1];
        theta[k] = 1.0;
        let filter = SpectralFilter::new(theta).unwrap();
        let y = spatial_graph_conv(&x, &lap, &filter).unwrap();
        let near: Vec<f64> = (0..n).map(|j| if j.abs_diff(i) <= k { x[j] } else { 0.0 }).collect();
        let yn = spatial_graph_conv(&near, &lap, &filter).unwrap();
        check((y[i] - yn[i]).abs() < 1e-12, || format!("node {i} order {k}: {} vs {}", y[i], yn[i]))
    })
}

pub fn affinity_range() -> Result<(), String> {
    let case = (4usize..=12).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec(prop_oneof![0.0f64..2000.0, Just(0.0)], n * n),
            1.0f64..1000.0,
        )
    });
    run(200, case, |(n, mut t, sigma)| {
        for i in 0..n {
            t[i * n + i] = 0.0;
        }
        let times = TravelTimeMatrix::new(n, t).unwrap();
        let a = affinity_from_travel_time(&times, sigma).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let sym = (0..n).all(|i| (0..n).all(|j| a.get(i, j) == a.get(j, i)));
        let range = a.as_tensor().data().iter().all(|&v| v > 0.0 && v <= 1.0);
        let diag = (0..n).all(|i| a.get(i, i) == 1.0);
        let lap = normalized_laplacian(&a).unwrap();
        let (lo, hi) = eigen_range(&lap);
        check(sym && range && diag && lo >= -1e-10 && hi <= 2.0 + 1e-10, || {
            format!("sym {sym} range {range} diag {diag} spectrum [{lo}, {hi}]")
        })
    })
}

#[derive(Clone, Debug)]
struct StcCase {
    a: Tensor<f64>,
    c_in: usize,
    c_out: usize,
    t: usize,
    k: usize,
    q: usize,
    theta: Vec<f64>,
    kernel: Vec<f64>,
    x: Vec<f64>,
    y: Vec<f64>,
}

fn stc_case() -> impl Strategy<Value = StcCase> {
    (graph_strategy(), 1usize..=3, 1usize..=3, 1usize..=6, 1usize..=4, 0usize..3)
        .prop_flat_map(|(a, c_in, c_out, t, k, qh)| {
            let n = a.shape()[0];
            let q = 2 * qh + 1;
            (
                Just((a, c_in, c_out, t, k, q)),
                prop::collection::vec(-1.0f64..1.0, c_in * t * k),
                prop::collection::vec(-1.0f64..1.0, c_in * c_out * q),
                prop::collection::vec(-1.0f64..1.0, c_in * t * n),
                prop::collection::vec(-1.0f64..1.0, c_in * t * n),
            )
        })
        .prop_map(|((a, c_in, c_out, t, k, q), theta, kernel, x, y)| StcCase {
            a,
            c_in,
            c_out,
            t,
            k,
            q,
            theta,
            kernel,
            x,
            y,
        })
}

fn stc_layer(c: &StcCase) -> StcLayerParams<f64> {
    StcLayerParams {
        spatial_theta: Tensor::new(vec![c.c_in, c.t, c.k], c.theta.clone()).unwrap(),
        temporal_kernel: Tensor::new(vec![c.c_in, c.c_out, c.q], c.kernel.clone()).unwrap(),
        bias: None,
    }
}

pub fn stc_linearity() -> Result<(), String> {
    run(100, (stc_case(), -2.0f64..2.0, -2.0f64..2.0), |(c, alpha, beta)| {
        let n = c.a.shape()[0];
        let lap = laplacian_of(&c.a).unwrap();
        let layer = stc_layer(&c);
        let f = |v: Vec<f64>| layer.forward(&FeatureTensor::new(c.c_in, c.t, n, v).unwrap(), &lap).unwrap();
        let mix: Vec<f64> = c.x.iter().zip(&c.y).map(|(a, b)| alpha * a + beta * b).collect();
        let (fx, fy, fm) = (f(c.x.clone()), f(c.y.clone()), f(mix));
        let shape = (fm.channels(), fm.steps(), fm.nodes()) == (c.c_out, c.t, n);
        let gap = fm
            .as_tensor()
            .data()
            .iter()
            .zip(fx.as_tensor().data().iter().zip(fy.as_tensor().data()))
            .map(|(m, (a, b))| (m - alpha * a - beta * b).abs())
            .fold(0.0, f64::max);
        check(shape && gap < 1e-10, || format!("shape ok {shape}, linearity gap {gap}"))
    })
}

pub fn stc_equivariance() -> Result<(), String> {
    let case = stc_case().prop_flat_map(|c| {
        let n = c.a.shape()[0];
        (Just(c), permutation(n))
    });
    run(100, case, |(c, perm)| {
        let n = c.a.shape()[0];
        let lap = laplacian_of(&c.a).unwrap();
        let mut layer = stc_layer(&c);
        layer.bias = Some(Tensor::full(&[c.c_out], 0.25));
        let x = FeatureTensor::new(c.c_in, c.t, n, c.x.clone()).unwrap();
        let out = layer.forward(&x, &lap).unwrap().permute_nodes(&perm);
        let pout = layer.forward(&x.permute_nodes(&perm), &lap.permuted(&perm)).unwrap();
        let gap = out
            .as_tensor()
            .data()
            .iter()
            .zip(pout.as_tensor().data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        check(gap < 1e-12, || format!("gap {gap}"))
    })
}

fn small_model_config(nodes: usize, history: usize, horizon: usize, channels: usize, dynamic: bool) -> ModelConfig {
    ModelConfig {
        nodes,
        flow: FlowStreamConfig {
            stc_channels: vec![3, 4],
            poly_order: 3,
            temporal_window: 3,
            history,
            horizon,
            in_channels: channels,
            head_bias_init: 0.5,
        },
        graph: GraphStreamConfig { channels: 3, pairs: 2 },
        aux: AuxConfig {
            enabled: true,
            slots_per_day: 6,
            hidden: 5,
        },
        dynamic_graph: dynamic,
        ..ModelConfig::default()
    }
}

/// Outputs stay non-negative, and the predicted affinity stays a legal graph, for any finite inputs.
pub fn model_non_negativity() -> Result<(), String> {
    let case = (4usize..=7, 2usize..=5, 1usize..=3, 1usize..=2, any::<u64>(), 0usize..6, 0usize..7).prop_flat_map(
        |(n, tp, tf, c0, seed, slot, day)| {
            (
                Just((n, tp, tf, c0, seed, slot, day)),
                prop::collection::vec(-50.0f64..50.0, c0 * tp * n),
                prop::collection::vec(0.0f64..1.0, tp * n * n),
            )
        },
    );
    run(40, case, |((n, tp, tf, c0, seed, slot, day), x, s)| {
        let cfg = small_model_config(n, tp, tf, c0, true);
        let m = DstGcnn::<f64>::new(cfg, seed).unwrap();
        let mut hist = Tensor::new(vec![tp, n, n], s).unwrap();
        for p in 0..tp {
            for i in 0..n {
                for j in 0..i {
                    let v = hist.get(&[p, i, j]);
                    hist.set(&[p, j, i], v);
                }
            }
        }
        let codes = AuxiliaryCodes::from_indices(slot, 6, day, None).unwrap();
        let b = m
            .predict(&Tensor::new(vec![c0, tp, n], x).unwrap(), &hist, &codes)
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        let target_ok = b.target.data().iter().all(|&v| v >= 0.0);
        let close_ok = match (&b.close_future, tf) {
            (None, 1) => true,
            (Some(y), _) => tf > 1 && y.shape() == [c0, tf - 1, n] && y.data().iter().all(|&v| v >= 0.0),
            _ => false,
        };
        let a = &b.predicted_affinity;
        let sym = (0..n).all(|i| (0..n).all(|j| (a.get(&[i, j]) - a.get(&[j, i])).abs() <= 1e-12));
        let range = a.data().iter().all(|&v| v > 0.0 && v < 1.0);
        let (lo, hi) = eigen_range(&laplacian_of(a).unwrap());
        check(target_ok && close_ok && sym && range && lo >= -1e-10 && hi <= 2.0 + 1e-10, || {
            format!("target {target_ok} close {close_ok} sym {sym} range {range} spectrum [{lo}, {hi}]")
        })
    })
}

/// Windows rebuild exactly from the raw series; statistics come from the training split only.
pub fn window_alignment() -> Result<(), String> {
    let case = (4usize..=6, 2usize..=5, 1usize..=3, 1usize..=3, any::<u64>());
    run(12, case, |(n, tp, tf, stride, seed)| {
        let syn = synth_generate::<f64>(&SynthConfig {
            nodes: n,
            steps: 200,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let opts = PrepareOptions {
            history: tp,
            horizon: tf,
            train_stride: stride,
            eval_stride: stride,
            ..PrepareOptions::default()
        };
        let d = prepare_dataset(&syn.traffic, &syn.travel, &opts).unwrap();
        let vol = syn.traffic.volumes();
        let c0 = syn.traffic.channels();
        let norm = |t: usize, c: usize, i: usize| d.stats.normalize_value(c * n + i, syn.traffic.value(t, c, i));
        let affinity = |t: usize| affinity_from_travel_time(syn.travel.matrix(t), d.sigma).unwrap();
        for (w, range) in d
            .train
            .iter()
            .map(|w| (w, &d.splits.train))
            .chain(d.test.iter().map(|w| (w, &d.splits.test)))
        {
            let t = w.anchor;
            check(t + 1 >= range.start + tp && t + tf < range.end, || format!("anchor {t} outside {range:?}"))?;
            for c in 0..c0 {
                for i in 0..n {
                    for p in 0..tp {
                        let want = norm(t + 1 + p - tp, c, i);
                        check((w.x.get(&[c, p, i]) - want).abs() < 1e-12, || format!("X mismatch at anchor {t}"))?;
                    }
                    if let Some(y) = &w.y {
                        for j in 0..tf - 1 {
                            let want = norm(t + 1 + j, c, i);
                            check((y.get(&[c, j, i]) - want).abs() < 1e-12, || format!("Y mismatch at anchor {t}"))?;
                        }
                    }
                    let want = norm(t + tf, c, i);
                    check((w.target.get(&[c, i]) - want).abs() < 1e-12, || format!("target mismatch at anchor {t}"))?;
                }
            }
            check(w.x.data().iter().all(|v| (0.0..=1.0).contains(v)) || range == &d.splits.test, || {
                format!("training X outside [0, 1] at anchor {t}")
            })?;
            let span: Vec<_> = (t + 1 - tp..=t + tf).map(affinity).collect();
            for i in 0..n {
                for j in 0..n {
                    let mean = span.iter().map(|a| a.get(i, j)).sum::<f64>() / span.len() as f64;
                    let v = w.abar.get(&[i, j]);
                    check((v - mean).abs() < 1e-12 && v == w.abar.get(&[j, i]) && v > 0.0 && v <= 1.0, || {
                        format!("Abar mismatch at anchor {t} ({i}, {j})")
                    })?;
                }
                for p in 0..tp {
                    check((w.s.get(&[p, i, i]) - 1.0).abs() < 1e-12, || "S diagonal".into())?;
                }
            }
            let codes = &w.codes;
            let spd = codes.slots_per_day();
            let hot = codes.as_slice()[..spd + 7].iter().sum::<f64>();
            check(hot == 2.0 && codes.time_of_day() == syn.traffic.slot_of(t), || format!("codes at anchor {t}"))?;
        }
        let leak = NormStats::fit(vol, d.splits.test.clone()).unwrap();
        check(leak != d.stats, || "test-split statistics equal training statistics".into())
    })
}
