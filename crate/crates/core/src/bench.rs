//! Wall-clock scaling of one decision-focused gradient step.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datagen::{generate_dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::predictor::{PredictorModel, DEFAULT_DROPOUT, DEFAULT_HIDDEN_DIM};
use crate::rng::Rng;
use crate::training::{df_gradient, DfSettings, Problem, TrainConfig};

/// Matrix multiplication exponent used by the reference cost curve.
pub const OMEGA: f64 = 2.373;
pub const MIN_REPETITIONS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub arms: Vec<usize>,
    pub states: Vec<usize>,
    /// Arm count used for the sweep over states.
    pub arms_for_states: usize,
    /// State count used for the sweep over arms.
    pub states_for_arms: usize,
    pub repetitions: usize,
    pub horizon: usize,
    pub trajectories: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            arms: vec![10, 20, 40, 80],
            states: vec![2, 3, 4, 5],
            arms_for_states: 10,
            states_for_arms: 2,
            repetitions: MIN_REPETITIONS,
            horizon: 10,
            trajectories: 10,
            gamma: 0.99,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub arms: usize,
    pub states: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub repetitions: usize,
    /// `c·N·M^(ω+1)` with `c` fitted through the first point of the sweep.
    pub reference_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub arm_sweep: Vec<BenchPoint>,
    pub state_sweep: Vec<BenchPoint>,
    pub slope_vs_arms: f64,
    pub slope_vs_states: f64,
}

pub const BENCH_CSV_HEADER: &str = "sweep,arms,states,mean_ms,std_ms,repetitions,reference_ms";

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(BENCH_CSV_HEADER);
        out.push('\n');
        for (name, pts) in [("arms", &self.arm_sweep), ("states", &self.state_sweep)] {
            for p in pts {
                out.push_str(&format!(
                    "{name},{},{},{},{},{},{}\n",
                    p.arms, p.states, p.mean_ms, p.std_ms, p.repetitions, p.reference_ms
                ));
            }
        }
        out.push_str(&format!("# slope_vs_arms,{}\n# slope_vs_states,{}\n", self.slope_vs_arms, self.slope_vs_states));
        out
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn reference(arms: usize, states: usize) -> f64 {
    arms as f64 * (states as f64).powf(OMEGA + 1.0)
}

/// Times `repetitions` gradient steps after one untimed warm-up step.
pub fn time_point(cfg: &BenchConfig, arms: usize, states: usize) -> Result<(f64, f64)> {
    let spec = DatasetSpec {
        num_instances: 1,
        arms,
        states,
        budget: (arms / 5).max(1),
        horizon: cfg.horizon,
        gamma: cfg.gamma,
        trajectories: cfg.trajectories,
        seed: cfg.seed,
        ..Default::default()
    };
    let data = generate_dataset(&spec)?;
    let mut model = PredictorModel::init(
        spec.feature_dim,
        DEFAULT_HIDDEN_DIM,
        states,
        DEFAULT_DROPOUT,
        &mut Rng::new(cfg.seed).derive(1),
    );
    let train_cfg = TrainConfig::default();
    let settings = DfSettings::from_config(&train_cfg);
    let problem = Problem::from_instance(&data.instances[0], &spec, None);
    let mut rng = Rng::new(cfg.seed).derive(2);
    let mut times = Vec::with_capacity(cfg.repetitions);
    for rep in 0..=cfg.repetitions {
        let start = Instant::now();
        let (_, grad) = df_gradient(&model, &problem, &settings, Some(&mut rng))?;
        model.apply(&grad, train_cfg.learning_rate);
        let ms = start.elapsed().as_secs_f64() * 1e3;
        if rep > 0 {
            times.push(ms);
        }
    }
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let std = (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    Ok((mean, std))
}

fn sweep(cfg: &BenchConfig, grid: &[(usize, usize)]) -> Result<Vec<BenchPoint>> {
    let mut pts = Vec::with_capacity(grid.len());
    for &(n, m) in grid {
        let (mean_ms, std_ms) = time_point(cfg, n, m)?;
        pts.push(BenchPoint {
            arms: n,
            states: m,
            mean_ms,
            std_ms,
            repetitions: cfg.repetitions,
            reference_ms: 0.0,
        });
    }
    if let Some(first) = pts.first().copied() {
        let c = first.mean_ms / reference(first.arms, first.states);
        for p in &mut pts {
            p.reference_ms = c * reference(p.arms, p.states);
        }
    }
    Ok(pts)
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.repetitions < MIN_REPETITIONS {
        return Err(Error::InvalidInput(format!("at least {MIN_REPETITIONS} repetitions per point")));
    }
    if cfg.arms.len() < 2 || cfg.states.len() < 2 {
        return Err(Error::InvalidInput("each sweep needs at least two points".into()));
    }
    let arm_sweep = sweep(cfg, &cfg.arms.iter().map(|&n| (n, cfg.states_for_arms)).collect::<Vec<_>>())?;
    let state_sweep = sweep(cfg, &cfg.states.iter().map(|&m| (cfg.arms_for_states, m)).collect::<Vec<_>>())?;
    let slope = |pts: &[BenchPoint], key: fn(&BenchPoint) -> usize| {
        let x: Vec<f64> = pts.iter().map(|p| key(p) as f64).collect();
        let y: Vec<f64> = pts.iter().map(|p| p.mean_ms).collect();
        log_log_slope(&x, &y)
    };
    Ok(BenchReport {
        slope_vs_arms: slope(&arm_sweep, |p| p.arms),
        slope_vs_states: slope(&state_sweep, |p| p.states),
        arm_sweep,
        state_sweep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.7)).collect();
        assert!((log_log_slope(&x, &y) - 1.7).abs() < 1e-12);
    }

    #[test]
    fn too_few_repetitions_rejected() {
        let cfg = BenchConfig {
            repetitions: 2,
            ..Default::default()
        };
        assert!(run_bench(&cfg).is_err());
    }
}
