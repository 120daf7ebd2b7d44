//! Collapsing bandits: 2-state arms whose state is observed only when pulled.
//!
//! The belief over the hidden state is determined by the last observed state
//! `ω` and the number `d` of passive steps since, `b(ω, d) = e_ω P₀^d`, with
//! `d` capped at the horizon. Chain state `(ω, d)` has index `ω·(T+1) + d`.
//! A passive step moves `(ω, d)` to `(ω, min(d+1, T))`; a pull reveals the
//! next state `s'`, landing in `(s', 0)` with probability `(b P₁)[s']`. The
//! chain reward is `b·R`. Whittle indices of the chain are differentiated
//! back to the underlying kernel through the matrix powers.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{instance_to_json, RewardVector, RmabInstance, TransitionKernel, ACTIVE, PASSIVE};
use crate::whittle::{whittle_index_with, SolverSettings};
use crate::whittle_diff::factorize;

#[derive(Debug, Clone, PartialEq)]
pub struct BeliefChain {
    pub horizon: usize,
    /// `(ω, d)` of each chain state.
    pub labels: Vec<(usize, usize)>,
    pub beliefs: Vec<[f64; 2]>,
    pub kernel: TransitionKernel,
    pub reward: RewardVector,
}

pub fn chain_index(omega: usize, d: usize, horizon: usize) -> usize {
    omega * (horizon + 1) + d
}

pub fn num_chain_states(horizon: usize) -> usize {
    2 * (horizon + 1)
}

fn check_underlying(kernel: &TransitionKernel, reward: &RewardVector) -> Result<()> {
    if kernel.num_states() != 2 {
        return Err(Error::CollapsingStates(kernel.num_states()));
    }
    if reward.len() != 2 {
        return Err(Error::CollapsingStates(reward.len()));
    }
    Ok(())
}

fn vec_mat(b: [f64; 2], kernel: &TransitionKernel, a: usize) -> [f64; 2] {
    let mut out = [0.0; 2];
    for (s, bs) in b.iter().enumerate() {
        for (next, p) in kernel.row(s, a).iter().enumerate() {
            out[next] += bs * p;
        }
    }
    out
}

/// Beliefs `[ω][d]` for `d = 0..=T`.
fn belief_table(kernel: &TransitionKernel, horizon: usize) -> [Vec<[f64; 2]>; 2] {
    let mut out = [Vec::with_capacity(horizon + 1), Vec::with_capacity(horizon + 1)];
    for (omega, beliefs) in out.iter_mut().enumerate() {
        let mut b = [0.0; 2];
        b[omega] = 1.0;
        beliefs.push(b);
        for _ in 0..horizon {
            b = vec_mat(b, kernel, PASSIVE);
            beliefs.push(b);
        }
    }
    out
}

pub fn expand_belief_chain(kernel: &TransitionKernel, reward: &RewardVector, horizon: usize) -> Result<BeliefChain> {
    check_underlying(kernel, reward)?;
    if horizon == 0 {
        return Err(Error::InvalidInput("horizon must be at least 1".into()));
    }
    let n = num_chain_states(horizon);
    let table = belief_table(kernel, horizon);
    let mut probs = vec![0.0; n * 2 * n];
    let mut labels = Vec::with_capacity(n);
    let mut beliefs = Vec::with_capacity(n);
    let mut chain_reward = Vec::with_capacity(n);
    for omega in 0..2 {
        for d in 0..=horizon {
            let c = chain_index(omega, d, horizon);
            let b = table[omega][d];
            probs[(c * 2 + PASSIVE) * n + chain_index(omega, (d + 1).min(horizon), horizon)] = 1.0;
            let after = vec_mat(b, kernel, ACTIVE);
            for (next, q) in after.iter().enumerate() {
                probs[(c * 2 + ACTIVE) * n + chain_index(next, 0, horizon)] += q;
            }
            labels.push((omega, d));
            beliefs.push(b);
            chain_reward.push(b[0] * reward.values()[0] + b[1] * reward.values()[1]);
        }
    }
    Ok(BeliefChain {
        horizon,
        labels,
        beliefs,
        kernel: TransitionKernel::new_unchecked(n, probs)?,
        reward: RewardVector(chain_reward),
    })
}

/// Chain indices and their gradients with respect to the underlying 2-state
/// kernel (flat `[s][a][s']`, 8 entries per chain state).
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefWhittle {
    pub chain: BeliefChain,
    pub indices: Vec<f64>,
    pub jacobian: Vec<Vec<f64>>,
}

/// Pulls a gradient over chain kernel entries (flat `[c][a][c']`) and chain
/// rewards back to the underlying 2-state kernel.
pub fn chain_gradient_to_underlying(
    kernel: &TransitionKernel,
    reward: &RewardVector,
    horizon: usize,
    kernel_grad: &[f64],
    reward_grad: &[f64],
) -> Vec<f64> {
    let n = num_chain_states(horizon);
    let table = belief_table(kernel, horizon);
    let r = reward.values();
    let mut out = vec![0.0; 8];
    for omega in 0..2 {
        // Adjoints of b(ω, d) for every d.
        let mut b_bar = vec![[0.0; 2]; horizon + 1];
        for d in 0..=horizon {
            let c = chain_index(omega, d, horizon);
            let b = table[omega][d];
            let g_active: [f64; 2] = [
                kernel_grad[(c * 2 + ACTIVE) * n + chain_index(0, 0, horizon)],
                kernel_grad[(c * 2 + ACTIVE) * n + chain_index(1, 0, horizon)],
            ];
            // q = b P₁: ∂/∂P₁(s, s') = b_s ḡ_{s'}, ∂/∂b_s = Σ_{s'} P₁(s, s') ḡ_{s'}.
            for s in 0..2 {
                for next in 0..2 {
                    out[kernel.offset(s, ACTIVE) + next] += b[s] * g_active[next];
                    b_bar[d][s] += kernel.get(s, ACTIVE, next) * g_active[next];
                }
                b_bar[d][s] += reward_grad[c] * r[s];
            }
        }
        // b_d = b_{d−1} P₀, reversed.
        for d in (1..=horizon).rev() {
            let prev = table[omega][d - 1];
            let bar = b_bar[d];
            for s in 0..2 {
                for next in 0..2 {
                    out[kernel.offset(s, PASSIVE) + next] += prev[s] * bar[next];
                    b_bar[d - 1][s] += kernel.get(s, PASSIVE, next) * bar[next];
                }
            }
        }
    }
    out
}

pub fn belief_whittle(kernel: &TransitionKernel, reward: &RewardVector, gamma: f64, horizon: usize) -> Result<BeliefWhittle> {
    belief_whittle_with(kernel, reward, gamma, horizon, &SolverSettings::default())
}

pub fn belief_whittle_with(
    kernel: &TransitionKernel,
    reward: &RewardVector,
    gamma: f64,
    horizon: usize,
    settings: &SolverSettings,
) -> Result<BeliefWhittle> {
    let chain = expand_belief_chain(kernel, reward, horizon)?;
    let n = chain.kernel.num_states();
    let per_state = (0..n)
        .into_par_iter()
        .map(|u| {
            let (w, vals) = whittle_index_with(&chain.kernel, &chain.reward, gamma, u, settings)?;
            let g = factorize(&chain.kernel, &chain.reward, gamma, u, &vals)?.index_gradient(gamma);
            let jac = chain_gradient_to_underlying(kernel, reward, horizon, &g.kernel, &g.reward);
            Ok((w, jac))
        })
        .collect::<Result<Vec<_>>>()?;
    let (indices, jacobian) = per_state.into_iter().unzip();
    Ok(BeliefWhittle {
        chain,
        indices,
        jacobian,
    })
}

/// A chain as a one-arm instance, annotated with the `(ω, d)` of each state.
pub fn chain_to_json(chain: &BeliefChain, discount: f64) -> Result<String> {
    #[derive(Serialize)]
    struct Annotated {
        instance: serde_json::Value,
        belief_states: Vec<BeliefLabel>,
    }
    #[derive(Serialize)]
    struct BeliefLabel {
        index: usize,
        omega: usize,
        d: usize,
        belief: [f64; 2],
    }
    let inst = RmabInstance {
        arms: vec![chain.kernel.clone()],
        reward: chain.reward.clone(),
        budget: 1,
        horizon: chain.horizon,
        discount,
    };
    let out = Annotated {
        instance: serde_json::from_str(&instance_to_json(&inst)?)?,
        belief_states: chain
            .labels
            .iter()
            .zip(&chain.beliefs)
            .enumerate()
            .map(|(index, (&(omega, d), &belief))| BeliefLabel { index, omega, d, belief })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worked() -> TransitionKernel {
        TransitionKernel::from_matrices(&[vec![0.8, 0.2], vec![0.5, 0.5]], &[vec![0.2, 0.8], vec![0.5, 0.5]]).unwrap()
    }

    #[test]
    fn propagated_belief_two_steps() {
        let c = expand_belief_chain(&worked(), &RewardVector::ladder(2), 4).unwrap();
        let b = c.beliefs[chain_index(0, 2, 4)];
        assert!((b[0] - 0.74).abs() < 1e-12 && (b[1] - 0.26).abs() < 1e-12);
    }

    #[test]
    fn chain_rows_are_stochastic() {
        let c = expand_belief_chain(&worked(), &RewardVector::ladder(2), 5).unwrap();
        assert!(TransitionKernel::new(c.kernel.num_states(), c.kernel.as_slice().to_vec()).is_ok());
    }

    #[test]
    fn more_than_two_states_is_rejected() {
        let k = TransitionKernel::action_independent(&vec![vec![1.0, 0.0, 0.0]; 3]).unwrap();
        assert!(matches!(
            expand_belief_chain(&k, &RewardVector::ladder(3), 3),
            Err(Error::CollapsingStates(3))
        ));
    }

    #[test]
    fn identity_passive_gives_constant_indices_in_d() {
        let k = TransitionKernel::from_matrices(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[vec![0.3, 0.7], vec![0.1, 0.9]]).unwrap();
        let bw = belief_whittle(&k, &RewardVector::ladder(2), 0.9, 4).unwrap();
        for omega in 0..2 {
            let w0 = bw.indices[chain_index(omega, 0, 4)];
            for d in 1..=4 {
                assert!((bw.indices[chain_index(omega, d, 4)] - w0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn jacobian_matches_raw_fd() {
        let k = TransitionKernel::from_matrices(&[vec![0.7, 0.3], vec![0.4, 0.6]], &[vec![0.35, 0.65], vec![0.2, 0.8]]).unwrap();
        let r = RewardVector::ladder(2);
        let tight = SolverSettings::tight();
        let (gamma, horizon) = (0.8, 3);
        let bw = belief_whittle_with(&k, &r, gamma, horizon, &tight).unwrap();
        let h = 1e-6;
        for e in 0..8 {
            let mut p = k.as_slice().to_vec();
            let mut m = k.as_slice().to_vec();
            p[e] += h;
            m[e] -= h;
            let kp = TransitionKernel::new_unchecked(2, p).unwrap();
            let km = TransitionKernel::new_unchecked(2, m).unwrap();
            let cp = expand_belief_chain(&kp, &r, horizon).unwrap();
            let cm = expand_belief_chain(&km, &r, horizon).unwrap();
            for u in 0..num_chain_states(horizon) {
                let wp = whittle_index_with(&cp.kernel, &cp.reward, gamma, u, &tight).unwrap().0;
                let wm = whittle_index_with(&cm.kernel, &cm.reward, gamma, u, &tight).unwrap().0;
                let fd = (wp - wm) / (2.0 * h);
                assert!((fd - bw.jacobian[u][e]).abs() < 1e-5, "u={u} e={e}: {fd} vs {}", bw.jacobian[u][e]);
            }
        }
    }

    #[test]
    fn annotated_json_lists_every_state() {
        let c = expand_belief_chain(&worked(), &RewardVector::ladder(2), 2).unwrap();
        let v: serde_json::Value = serde_json::from_str(&chain_to_json(&c, 0.9).unwrap()).unwrap();
        assert_eq!(v["belief_states"].as_array().unwrap().len(), 6);
        assert_eq!(v["instance"]["num_states"], 6);
    }
}
