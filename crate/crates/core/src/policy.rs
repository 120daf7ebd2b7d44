//! Whittle index policies and their evaluation.
//!
//! Off-policy values use consistent weighted per-decision importance sampling
//! (CWPDIS) over logged trajectories, or the non-multiplicative
//! single-trajectory estimator when only one trajectory is available. Both
//! return the gradient of the value with respect to the target policy's pull
//! probabilities. Importance ratios are handled in log space.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{RewardVector, Trajectory, TransitionKernel};
use crate::rng::Rng;
use crate::soft_topk::{hard_topk, soft_topk_forward, SoftTopKConfig, SoftTopKState};
use crate::whittle::WhittleTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutput {
    pub pull_probs: Vec<f64>,
}

/// Pulls the `k` arms with the largest current index; ties go to the lower
/// arm index.
pub fn strict_policy(table: &WhittleTable, joint_state: &[usize], k: usize) -> PolicyOutput {
    PolicyOutput {
        pull_probs: hard_topk(&table.gather(joint_state), k),
    }
}

/// Soft top-k of the current indices. The returned state drives the backward
/// pass from pull probabilities to indices.
pub fn soft_policy(
    table: &WhittleTable,
    joint_state: &[usize],
    k: usize,
    cfg: &SoftTopKConfig,
) -> Result<(PolicyOutput, SoftTopKState)> {
    let st = soft_topk_forward(&table.gather(joint_state), k, cfg)?;
    Ok((
        PolicyOutput {
            pull_probs: st.probs.clone(),
        },
        st,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalVariant {
    Cwpdis,
    SingleTrajectory,
    Simulation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: EvalVariant,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub std_error: Option<f64>,
    /// Normalized importance weights, `[trajectory][t][arm]`. Empty for
    /// simulation.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub weights: Vec<Vec<Vec<f64>>>,
}

/// Target pull probabilities at every logged `(trajectory, t, arm)`.
pub type PullProbs = Vec<Vec<Vec<f64>>>;

fn check_shapes(probs: &PullProbs, trajs: &[Trajectory]) -> Result<()> {
    if probs.len() != trajs.len() {
        return Err(Error::Dimension {
            what: "pull probabilities per trajectory",
            expected: trajs.len(),
            got: probs.len(),
        });
    }
    for (p, tr) in probs.iter().zip(trajs) {
        if p.len() != tr.horizon() {
            return Err(Error::Dimension {
                what: "pull probabilities per step",
                expected: tr.horizon(),
                got: p.len(),
            });
        }
        for row in p {
            if row.len() != tr.num_arms() {
                return Err(Error::Dimension {
                    what: "pull probabilities per arm",
                    expected: tr.num_arms(),
                    got: row.len(),
                });
            }
        }
    }
    Ok(())
}

fn check_behavior(trajs: &[Trajectory]) -> Result<()> {
    for (j, tr) in trajs.iter().enumerate() {
        for (t, row) in tr.behavior_probs.iter().enumerate() {
            for (i, &b) in row.iter().enumerate() {
                if !(b > 0.0) {
                    return Err(Error::UnsupportedBehaviorAction {
                        trajectory: j,
                        step: t,
                        arm: i,
                        prob: b,
                    });
                }
            }
        }
    }
    Ok(())
}

/// `π(a | s)` given the pull probability.
#[inline]
fn target_prob(pull: f64, action: u8) -> f64 {
    if action == 1 {
        pull
    } else {
        1.0 - pull
    }
}

/// `d log π(a | s) / d pull`.
#[inline]
fn dlog_target(pull: f64, action: u8) -> f64 {
    if action == 1 {
        1.0 / pull
    } else {
        -1.0 / (1.0 - pull)
    }
}

/// Value and gradient with respect to the pull probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalWithGradient {
    pub report: EvalReport,
    pub grad: PullProbs,
}

pub fn cwpdis_eval(probs: &PullProbs, trajs: &[Trajectory], gamma: f64) -> Result<EvalReport> {
    Ok(cwpdis_eval_grad(probs, trajs, gamma)?.report)
}

/// `Σ_t γ^{t−1} Σ_i Σ_τ r ρ / Σ_τ ρ` with per-decision products
/// `ρ_ti(τ) = Π_{t' ≤ t} π / π_beh`.
pub fn cwpdis_eval_grad(probs: &PullProbs, trajs: &[Trajectory], gamma: f64) -> Result<EvalWithGradient> {
    if trajs.len() < 2 {
        return Err(Error::SingleTrajectory);
    }
    check_shapes(probs, trajs)?;
    check_behavior(trajs)?;
    let horizon = trajs[0].horizon();
    let arms = trajs[0].num_arms();
    if trajs.iter().any(|t| t.horizon() != horizon || t.num_arms() != arms) {
        return Err(Error::InvalidInput("trajectories differ in shape".into()));
    }
    let ntraj = trajs.len();

    // log ρ accumulated along t, [τ][t][i]
    let mut log_rho = vec![vec![vec![0.0; arms]; horizon]; ntraj];
    for (j, tr) in trajs.iter().enumerate() {
        let mut acc = vec![0.0; arms];
        for t in 0..horizon {
            for i in 0..arms {
                let a = tr.actions[t][i];
                acc[i] += target_prob(probs[j][t][i], a).ln() - tr.behavior_probs[t][i].ln();
                log_rho[j][t][i] = acc[i];
            }
        }
    }

    let mut weights = vec![vec![vec![0.0; arms]; horizon]; ntraj];
    // γ^{t−1} w_τ (r_τ − E_ti): sensitivity of the value to log ρ_ti(τ).
    let mut sens = vec![vec![vec![0.0; arms]; horizon]; ntraj];
    let mut value = 0.0;
    let mut disc = 1.0;
    for t in 0..horizon {
        for i in 0..arms {
            let max = (0..ntraj).map(|j| log_rho[j][t][i]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let total: f64 = (0..ntraj).map(|j| (log_rho[j][t][i] - max).exp()).sum();
            let mut e = 0.0;
            for j in 0..ntraj {
                let w = (log_rho[j][t][i] - max).exp() / total;
                weights[j][t][i] = w;
                e += w * trajs[j].rewards[t][i];
            }
            value += disc * e;
            for j in 0..ntraj {
                sens[j][t][i] = disc * weights[j][t][i] * (trajs[j].rewards[t][i] - e);
            }
        }
        disc *= gamma;
    }

    // log ρ_ti depends on the pull probability at every t' ≤ t.
    let mut grad = vec![vec![vec![0.0; arms]; horizon]; ntraj];
    for j in 0..ntraj {
        for i in 0..arms {
            let mut suffix = 0.0;
            for t in (0..horizon).rev() {
                suffix += sens[j][t][i];
                let d = suffix * dlog_target(probs[j][t][i], trajs[j].actions[t][i]);
                grad[j][t][i] = if d.is_finite() { d } else { 0.0 };
            }
        }
    }
    if !value.is_finite() {
        return Err(Error::NumericAbort {
            stage: "cwpdis",
            detail: format!("value {value}"),
        });
    }
    Ok(EvalWithGradient {
        report: EvalReport {
            variant: EvalVariant::Cwpdis,
            value,
            std_error: None,
            weights,
        },
        grad,
    })
}

pub fn cwpdis_eval_single(probs: &[Vec<f64>], traj: &Trajectory, gamma: f64) -> Result<EvalReport> {
    Ok(cwpdis_eval_single_grad(probs, traj, gamma)?.report)
}

/// Non-multiplicative ratios `ρ'_ti = π / π_beh`, normalized per arm by their
/// mean over time: `Σ_i Σ_t γ^{t−1} r ρ' / mean_t ρ'`.
pub fn cwpdis_eval_single_grad(probs: &[Vec<f64>], traj: &Trajectory, gamma: f64) -> Result<EvalWithGradient> {
    let wrapped = vec![probs.to_vec()];
    check_shapes(&wrapped, std::slice::from_ref(traj))?;
    check_behavior(std::slice::from_ref(traj))?;
    let horizon = traj.horizon();
    let arms = traj.num_arms();
    let hf = horizon as f64;
    let mut weights = vec![vec![0.0; arms]; horizon];
    let mut grad = vec![vec![0.0; arms]; horizon];
    let mut value = 0.0;
    for i in 0..arms {
        let rho: Vec<f64> = (0..horizon)
            .map(|t| target_prob(probs[t][i], traj.actions[t][i]) / traj.behavior_probs[t][i])
            .collect();
        let total: f64 = rho.iter().sum();
        if !(total > 0.0) {
            continue;
        }
        let mut disc = 1.0;
        let mut c = Vec::with_capacity(horizon);
        for t in 0..horizon {
            c.push(disc * traj.rewards[t][i]);
            disc *= gamma;
        }
        let arm_value = hf * c.iter().zip(&rho).map(|(a, b)| a * b).sum::<f64>() / total;
        value += arm_value;
        for t in 0..horizon {
            weights[t][i] = hf * rho[t] / total;
            let d_rho = hf / total * (c[t] - arm_value / hf);
            let sign = if traj.actions[t][i] == 1 { 1.0 } else { -1.0 };
            grad[t][i] = d_rho * sign / traj.behavior_probs[t][i];
        }
    }
    Ok(EvalWithGradient {
        report: EvalReport {
            variant: EvalVariant::SingleTrajectory,
            value,
            std_error: None,
            weights: vec![weights],
        },
        grad: vec![grad],
    })
}

/// Per-arm kernels estimated from transition counts, with a `[arm][s][a]`
/// mask of rows that were never observed (filled uniformly).
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalKernels {
    pub kernels: Vec<TransitionKernel>,
    pub missing: Vec<Vec<[bool; 2]>>,
}

pub fn empirical_kernels(trajs: &[Trajectory], num_arms: usize, num_states: usize) -> Result<EmpiricalKernels> {
    let m = num_states;
    let mut counts = vec![vec![0.0; m * 2 * m]; num_arms];
    for tr in trajs {
        if tr.num_arms() != num_arms {
            return Err(Error::Dimension {
                what: "trajectory arms",
                expected: num_arms,
                got: tr.num_arms(),
            });
        }
        for t in 0..tr.horizon().saturating_sub(1) {
            for i in 0..num_arms {
                let (s, a, next) = (tr.states[t][i], tr.actions[t][i] as usize, tr.states[t + 1][i]);
                if s >= m || next >= m || a > 1 {
                    return Err(Error::InvalidInput(format!("transition ({s}, {a}, {next}) out of range")));
                }
                counts[i][(s * 2 + a) * m + next] += 1.0;
            }
        }
    }
    let mut kernels = Vec::with_capacity(num_arms);
    let mut missing = Vec::with_capacity(num_arms);
    for c in counts {
        let mut probs = c;
        let mut mask = vec![[false; 2]; m];
        for (r, row) in probs.chunks_mut(m).enumerate() {
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|x| *x /= total);
            } else {
                row.iter_mut().for_each(|x| *x = 1.0 / m as f64);
                mask[r / 2][r % 2] = true;
            }
        }
        kernels.push(TransitionKernel::new(m, probs)?);
        missing.push(mask);
    }
    Ok(EmpiricalKernels { kernels, missing })
}

/// Policies that can be rolled out in simulation.
#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    Strict(&'a WhittleTable),
    Soft(&'a WhittleTable, SoftTopKConfig),
    NoAction,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StartStates {
    /// Each arm starts in a uniformly random state.
    Uniform,
    Fixed(Vec<usize>),
    /// Each episode starts from one of these joint states, drawn uniformly.
    Logged(Vec<Vec<usize>>),
}

#[derive(Debug, Clone)]
pub struct SimulationSetup<'a> {
    pub kernels: &'a [TransitionKernel],
    pub reward: &'a RewardVector,
    pub budget: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub start: StartStates,
}

fn choose_actions(policy: &Policy, state: &[usize], k: usize, rng: &mut Rng) -> Result<Vec<bool>> {
    let n = state.len();
    let mut pull = vec![false; n];
    match policy {
        Policy::NoAction => {}
        Policy::Random => {
            for i in rng.subset(n, k) {
                pull[i] = true;
            }
        }
        Policy::Strict(table) => {
            for (i, p) in strict_policy(table, state, k).pull_probs.iter().enumerate() {
                pull[i] = *p > 0.5;
            }
        }
        Policy::Soft(table, cfg) => {
            // Sequential proportional selection without replacement.
            let (out, _) = soft_policy(table, state, k, cfg)?;
            let mut w = out.pull_probs;
            for _ in 0..k {
                let i = match rng.weighted(&w) {
                    Some(i) => i,
                    None => match w.iter().position(|&x| x == 0.0) {
                        Some(i) if !pull[i] => i,
                        _ => (0..n).find(|&i| !pull[i]).expect("k <= n"),
                    },
                };
                pull[i] = true;
                w[i] = 0.0;
            }
        }
    }
    Ok(pull)
}

fn run_episode(setup: &SimulationSetup, policy: &Policy, rng: &mut Rng) -> Result<f64> {
    let n = setup.kernels.len();
    let m = setup.reward.len();
    let r = setup.reward.values();
    let mut state: Vec<usize> = match &setup.start {
        StartStates::Uniform => (0..n).map(|_| rng.below(m)).collect(),
        StartStates::Fixed(s) => s.clone(),
        StartStates::Logged(all) => all[rng.below(all.len())].clone(),
    };
    let mut total = 0.0;
    let mut disc = 1.0;
    for _ in 0..setup.horizon {
        total += disc * state.iter().map(|&s| r[s]).sum::<f64>();
        let pull = choose_actions(policy, &state, setup.budget, rng)?;
        for i in 0..n {
            let row = setup.kernels[i].row(state[i], pull[i] as usize);
            state[i] = rng.weighted(row).unwrap_or(state[i]);
        }
        disc *= setup.gamma;
    }
    Ok(total)
}

/// Monte-Carlo discounted return. Episode `e` draws from `rng.derive(e)`, so
/// results do not depend on thread scheduling.
pub fn simulate_eval(setup: &SimulationSetup, policy: &Policy, episodes: usize, rng: &Rng) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::InvalidInput("episodes must be positive".into()));
    }
    let starts: &[Vec<usize>] = match &setup.start {
        StartStates::Uniform => &[],
        StartStates::Fixed(s) => std::slice::from_ref(s),
        StartStates::Logged(all) if all.is_empty() => {
            return Err(Error::InvalidInput("no logged start states".into()));
        }
        StartStates::Logged(all) => all,
    };
    let m = setup.reward.len();
    for s in starts {
        if s.len() != setup.kernels.len() {
            return Err(Error::Dimension {
                what: "start states",
                expected: setup.kernels.len(),
                got: s.len(),
            });
        }
        if s.iter().any(|&x| x >= m) {
            return Err(Error::InvalidInput("start state out of range".into()));
        }
    }
    if setup.budget > setup.kernels.len() {
        return Err(Error::InvalidInput("budget exceeds arms".into()));
    }
    let returns: Vec<f64> = (0..episodes)
        .into_par_iter()
        .map(|e| run_episode(setup, policy, &mut rng.derive(e as u64)))
        .collect::<Result<_>>()?;
    let ef = episodes as f64;
    let mean = returns.iter().sum::<f64>() / ef;
    let var = if episodes > 1 {
        returns.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (ef - 1.0)
    } else {
        0.0
    };
    Ok(EvalReport {
        variant: EvalVariant::Simulation,
        value: mean,
        std_error: Some((var / ef).sqrt()),
        weights: vec![],
    })
}

/// Pull probabilities the behavior policy itself assigns along the logged
/// trajectories (target = behavior).
pub fn behavior_pull_probs(trajs: &[Trajectory]) -> PullProbs {
    trajs
        .iter()
        .map(|tr| {
            tr.behavior_probs
                .iter()
                .zip(&tr.actions)
                .map(|(bp, acts)| {
                    bp.iter()
                        .zip(acts)
                        .map(|(&b, &a)| if a == 1 { b } else { 1.0 - b })
                        .collect()
                })
                .collect()
        })
        .collect()
}
