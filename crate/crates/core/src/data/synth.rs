//! Regime-switching traffic generator.
//!
//! Regime 0 links the nodes in a ring in index order; regime 1 splits them
//! into two cliques by a seeded shuffle. Linked pairs are `near_seconds`
//! apart, all others `far_seconds`. Each step a node takes the
//! affinity-weighted mean of the other nodes' flows, is pulled toward its
//! daily sinusoidal load and receives a Gaussian innovation.

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{TrafficSeries, TravelTimeSeries};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::graphops::TravelTimeMatrix;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub nodes: usize,
    pub steps: usize,
    /// Steps between regime switches.
    pub regime_period: usize,
    pub seed: u64,
    pub slot_minutes: u32,
    /// Keep regime 0 throughout.
    pub single_regime: bool,
    /// Share of each step's flow drawn from the load rather than diffusion.
    pub gamma: f64,
    /// Innovation standard deviation, relative to a node's base load.
    pub noise: f64,
    /// Relative standard deviation of observed travel times.
    pub travel_noise: f64,
    /// Relative amplitude of the daily load cycle.
    pub load_amplitude: f64,
    pub near_seconds: f64,
    pub far_seconds: f64,
    /// Per-pair uniform offset range added to the base travel times.
    pub jitter_seconds: f64,
    /// Bandwidth of the generator's own diffusion affinity.
    pub sigma: f64,
    /// Multiplier taking flows to vehicle counts.
    pub scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            nodes: 16,
            steps: 2000,
            regime_period: 40,
            seed: 7,
            slot_minutes: 15,
            single_regime: false,
            gamma: 0.03,
            noise: 0.05,
            travel_noise: 0.05,
            load_amplitude: 0.5,
            near_seconds: 60.0,
            far_seconds: 900.0,
            jitter_seconds: 30.0,
            sigma: 120.0,
            scale: 100.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.nodes < 4 {
            return bad(format!("synthetic generator needs at least 4 nodes, got {}", self.nodes));
        }
        if self.steps < 200 {
            return bad(format!("synthetic generator needs at least 200 steps, got {}", self.steps));
        }
        if self.regime_period == 0 {
            return bad("regime_period must be >= 1".into());
        }
        if self.slot_minutes == 0 || 1440 % self.slot_minutes != 0 {
            return bad(format!("slot length {} min must divide a day", self.slot_minutes));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} must lie in [0, 1]", self.gamma));
        }
        let nonneg = [
            self.noise,
            self.travel_noise,
            self.load_amplitude,
            self.jitter_seconds,
            self.scale,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0)) || !(self.near_seconds > 0.0 && self.far_seconds > 0.0 && self.sigma > 0.0)
        {
            return bad("generator amplitudes must be non-negative and times positive".into());
        }
        Ok(())
    }
}

/// Generator output plus the hidden quantities behind it.
#[derive(Clone, Debug)]
pub struct SynthDataset<S> {
    pub config: SynthConfig,
    pub traffic: TrafficSeries<S>,
    pub travel: TravelTimeSeries<S>,
    /// Active regime at every step.
    pub regimes: Vec<u8>,
    /// Noise-free travel times of each regime.
    pub true_travel: [TravelTimeMatrix<f64>; 2],
    base_load: Vec<f64>,
    phase: Vec<f64>,
}

fn linked(regime: u8, n: usize, clique: &[bool], i: usize, j: usize) -> bool {
    match regime {
        0 => {
            let d = i.abs_diff(j);
            d == 1 || d == n - 1
        }
        _ => clique[i] == clique[j],
    }
}

impl<S: Scalar> SynthDataset<S> {
    /// `exp(−T/σ)` of a regime without self-loops, row-normalized: the
    /// generator's diffusion operator.
    pub fn diffusion_operator(&self, regime: u8) -> Tensor<f64> {
        let n = self.config.nodes;
        let t = &self.true_travel[regime as usize];
        let mut w = Tensor::zeros(&[n, n]);
        for i in 0..n {
            let row: Vec<f64> = (0..n)
                .map(|j| if i == j { 0.0 } else { (-t.get(i, j) / self.config.sigma).exp() })
                .collect();
            let total: f64 = row.iter().sum();
            for (j, v) in row.into_iter().enumerate() {
                w.set(&[i, j], v / total);
            }
        }
        w
    }

    /// Noise-free load for every node at step `k`, in flow units.
    pub fn load(&self, k: usize) -> Vec<f64> {
        let spd = (1440 / self.config.slot_minutes) as usize;
        let angle = 2.0 * std::f64::consts::PI * (k % spd) as f64 / spd as f64;
        self.base_load
            .iter()
            .zip(&self.phase)
            .map(|(b, p)| b * (1.0 + self.config.load_amplitude * (angle + p).sin()))
            .collect()
    }

    /// Scale and sign convention between internal flow and written volumes.
    pub fn flow_scale(&self) -> f64 {
        self.config.scale
    }

    /// Mean absolute difference between the two regimes' generator affinities.
    pub fn regime_affinity_gap(&self) -> f64 {
        let n = self.config.nodes;
        let (a, b) = (&self.true_travel[0], &self.true_travel[1]);
        let s = self.config.sigma;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                total += ((-a.get(i, j) / s).exp() - (-b.get(i, j) / s).exp()).abs();
            }
        }
        total / (n * n) as f64
    }
}

pub fn synth_generate<S: Scalar>(config: &SynthConfig) -> Result<SynthDataset<S>> {
    config.validate()?;
    let n = config.nodes;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut clique = vec![false; n];
    for &i in &order[..n / 2] {
        clique[i] = true;
    }
    let mut true_travel = Vec::with_capacity(2);
    for r in 0..2u8 {
        let mut t = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let base = if linked(r, n, &clique, i, j) {
                    config.near_seconds
                } else {
                    config.far_seconds
                };
                let v = base + config.jitter_seconds * rng.random::<f64>();
                t[i * n + j] = v;
                t[j * n + i] = v;
            }
        }
        true_travel.push(TravelTimeMatrix::new(n, t)?);
    }
    let true_travel: [TravelTimeMatrix<f64>; 2] = true_travel.try_into().expect("two regimes");
    let base_load: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let phase: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();

    let mut ds = SynthDataset::<S> {
        config: config.clone(),
        traffic: TrafficSeries::new(
            Tensor::zeros(&[1, 1, n]),
            vec![Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()],
            config.slot_minutes,
        )?,
        travel: TravelTimeSeries::new(Vec::new())?,
        regimes: Vec::new(),
        true_travel,
        base_load,
        phase,
    };
    let regimes: Vec<u8> = (0..config.steps)
        .map(|k| if config.single_regime { 0 } else { ((k / config.regime_period) % 2) as u8 })
        .collect();
    let ops = [ds.diffusion_operator(0), ds.diffusion_operator(1)];

    let mut flow = ds.load(0);
    let mut volumes = Vec::with_capacity(config.steps * n);
    let mut mats = Vec::with_capacity(config.steps);
    for (k, &r) in regimes.iter().enumerate() {
        if k > 0 {
            let w = &ops[r as usize];
            let load = ds.load(k - 1);
            let mut next = vec![0.0; n];
            for i in 0..n {
                let diffused: f64 = (0..n).map(|j| w.get(&[i, j]) * flow[j]).sum();
                let eps: f64 = rng.sample(StandardNormal);
                let innovation = config.noise * ds.base_load[i] * eps;
                next[i] = ((1.0 - config.gamma) * diffused + config.gamma * load[i] + innovation).max(0.0);
            }
            flow = next;
        }
        volumes.extend(flow.iter().map(|f| S::lit(f * config.scale)));
        let t = &ds.true_travel[r as usize];
        let mut obs = vec![S::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let eps: f64 = rng.sample(StandardNormal);
                    obs[i * n + j] = S::lit((t.get(i, j) * (1.0 + config.travel_noise * eps)).max(0.0));
                }
            }
        }
        mats.push(TravelTimeMatrix::new(n, obs)?);
    }
    let t0 = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
    let slot = Duration::minutes(i64::from(config.slot_minutes));
    let stamps: Vec<DateTime<Utc>> = (0..config.steps).map(|k| t0 + slot * k as i32).collect();
    ds.traffic = TrafficSeries::new(Tensor::new(vec![config.steps, 1, n], volumes)?, stamps, config.slot_minutes)?;
    ds.travel = TravelTimeSeries::new(mats)?;
    ds.regimes = regimes;
    Ok(ds)
}
