//! Wall-clock comparison of the factorized layer against one dense graph
//! convolution over every (channel, time, node) triple.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::graphops::{laplacian_of, GraphLaplacian};
use crate::stc::{FeatureTensor, StcLayerParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub nodes: usize,
    pub channels: usize,
    pub steps: Vec<usize>,
    pub poly_order: usize,
    pub temporal_window: usize,
    /// Timed samples per size; the median is reported.
    pub repeats: usize,
    /// Each sample loops until at least this many seconds have passed.
    pub min_sample_seconds: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            nodes: 32,
            channels: 8,
            steps: vec![16, 32],
            poly_order: 3,
            temporal_window: 3,
            repeats: 5,
            min_sample_seconds: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub nodes: usize,
    pub channels: usize,
    pub steps: usize,
    pub factorized_seconds: f64,
    pub joint_seconds: f64,
    /// `joint / factorized`
    pub ratio: f64,
}

fn median_seconds(repeats: usize, min_sample: f64, mut f: impl FnMut()) -> f64 {
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        let mut calls = 0u32;
        loop {
            f();
            calls += 1;
            let el = start.elapsed().as_secs_f64();
            if el >= min_sample {
                samples.push(el / f64::from(calls));
                break;
            }
        }
    }
    samples.sort_by(f64::total_cmp);
    samples[samples.len() / 2]
}

/// Separable stand-in for a dense affinity over `(c, p, n)` triples.
struct JointGraph {
    a_node: Vec<f64>,
    a_time: Vec<f64>,
    a_chan: Vec<f64>,
    inv_sqrt: Vec<f64>,
    n: usize,
    t: usize,
    c: usize,
}

impl JointGraph {
    fn new(a_node: &Tensor<f64>, channels: usize, steps: usize) -> Self {
        let n = a_node.shape()[0];
        let a_time: Vec<f64> = (0..steps * steps)
            .map(|k| (-((k / steps) as f64 - (k % steps) as f64).abs()).exp())
            .collect();
        let a_chan: Vec<f64> = (0..channels * channels)
            .map(|k| if k / channels == k % channels { 1.0 } else { 0.5 })
            .collect();
        let rows = |a: &[f64], m: usize| -> Vec<f64> { (0..m).map(|i| a[i * m..(i + 1) * m].iter().sum()).collect() };
        let (dn, dt, dc) = (rows(a_node.data(), n), rows(&a_time, steps), rows(&a_chan, channels));
        let mut inv_sqrt = Vec::with_capacity(channels * steps * n);
        for c in 0..channels {
            for p in 0..steps {
                for i in 0..n {
                    inv_sqrt.push(1.0 / (dc[c] * dt[p] * dn[i]).sqrt());
                }
            }
        }
        Self {
            a_node: a_node.data().to_vec(),
            a_time,
            a_chan,
            inv_sqrt,
            n,
            t: steps,
            c: channels,
        }
    }

    /// `y = L x`, visiting every one of the `M²` operator entries.
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let (n, t, c) = (self.n, self.t, self.c);
        let z: Vec<f64> = x.iter().zip(&self.inv_sqrt).map(|(a, b)| a * b).collect();
        for ci in 0..c {
            for pi in 0..t {
                for ni in 0..n {
                    let row = (ci * t + pi) * n + ni;
                    let arow = &self.a_node[ni * n..(ni + 1) * n];
                    let mut acc = 0.0;
                    for cj in 0..c {
                        for pj in 0..t {
                            let w = self.a_chan[ci * c + cj] * self.a_time[pi * t + pj];
                            let zj = &z[(cj * t + pj) * n..(cj * t + pj + 1) * n];
                            let mut dot = 0.0;
                            for (a, v) in arow.iter().zip(zj) {
                                dot += a * w * v;
                            }
                            acc += dot;
                        }
                    }
                    y[row] = x[row] - self.inv_sqrt[row] * acc;
                }
            }
        }
    }
}

/// `Σ_k θ_k L_J^k x` over the joint `(N·C·T)`-node graph.
pub fn joint_dense_conv(x: &FeatureTensor<f64>, a_node: &Tensor<f64>, theta: &[f64]) -> Vec<f64> {
    let g = JointGraph::new(a_node, x.channels(), x.steps());
    let mut basis = x.as_tensor().data().to_vec();
    let mut out: Vec<f64> = basis.iter().map(|v| v * theta[0]).collect();
    let mut next = vec![0.0; basis.len()];
    for &th in &theta[1..] {
        g.apply(&basis, &mut next);
        std::mem::swap(&mut basis, &mut next);
        for (o, b) in out.iter_mut().zip(&basis) {
            *o += th * b;
        }
    }
    out
}

fn random_graph(n: usize, rng: &mut impl Rng) -> Result<(Tensor<f64>, GraphLaplacian<f64>)> {
    let mut a = Tensor::zeros(&[n, n]);
    for i in 0..n {
        a.set(&[i, i], 1.0);
        for j in 0..i {
            let v: f64 = rng.random_range(0.05..1.0);
            a.set(&[i, j], v);
            a.set(&[j, i], v);
        }
    }
    let l = laplacian_of(&a)?;
    Ok((a, l))
}

pub fn factorization_benchmark(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.nodes == 0 || cfg.channels == 0 || cfg.steps.contains(&0) || cfg.poly_order == 0 || cfg.temporal_window % 2 == 0 {
        return Err(Error::Config(format!("invalid benchmark sizes {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (a, lap) = random_graph(cfg.nodes, &mut rng)?;
    let theta: Vec<f64> = (0..cfg.poly_order).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut rows = Vec::with_capacity(cfg.steps.len());
    for &t in &cfg.steps {
        let (c, n, k, q) = (cfg.channels, cfg.nodes, cfg.poly_order, cfg.temporal_window);
        let x = FeatureTensor::new(c, t, n, (0..c * t * n).map(|_| rng.random_range(0.0..1.0)).collect())?;
        let rand_t = |shape: &[usize], rng: &mut ChaCha8Rng| {
            let len = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-0.5..0.5)).collect())
        };
        let layer = StcLayerParams {
            spatial_theta: rand_t(&[c, t, k], &mut rng)?,
            temporal_kernel: rand_t(&[c, c, q], &mut rng)?,
            bias: Some(rand_t(&[c], &mut rng)?),
        };
        let factorized = median_seconds(cfg.repeats, cfg.min_sample_seconds, || {
            std::hint::black_box(layer.forward(&x, &lap).expect("stc forward"));
        });
        let joint = median_seconds(cfg.repeats, cfg.min_sample_seconds, || {
            std::hint::black_box(joint_dense_conv(&x, &a, &theta));
        });
        rows.push(BenchRow {
            nodes: n,
            channels: c,
            steps: t,
            factorized_seconds: factorized,
            joint_seconds: joint,
            ratio: joint / factorized,
        });
    }
    Ok(rows)
}
