//! Whittle indices by value iteration inside a binary search over the passive
//! subsidy.
//!
//! For subsidy `m` the subsidized Bellman equations are
//!
//! ```text
//! Q(s, a) = m·[a = passive] + R(s) + γ Σ_s' P(s, a, s') V(s')
//! V(s)    = max_a Q(s, a)
//! ```
//!
//! and the index of state `u` is the smallest `m` at which the passive and
//! active actions are equally valuable in `u`. The indifference gap
//! `Q(u, passive) − Q(u, active)` is non-decreasing in `m` for indexable arms,
//! so the crossing is found by bisection on `[−B, B]` with
//! `B = (max R − min R) / (1 − γ)`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{RewardVector, RmabInstance, TransitionKernel, ACTIVE, PASSIVE};

/// Numerical tolerances of the forward solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    /// Sup-norm change between successive value-iteration sweeps.
    pub vi_tol: f64,
    /// Bisection stops once the subsidy bracket is this narrow.
    pub bracket_tol: f64,
    /// Accepted `|Q(u,0) − Q(u,1)|` at the returned index.
    pub indifference_tol: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            vi_tol: 1e-9,
            bracket_tol: 1e-9,
            indifference_tol: 1e-6,
        }
    }
}

impl SolverSettings {
    /// Near machine precision; used when finite differences of the index are
    /// taken.
    pub fn tight() -> Self {
        SolverSettings {
            vi_tol: 1e-14,
            bracket_tol: 1e-14,
            indifference_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsidizedValues {
    pub subsidy: f64,
    pub values: Vec<f64>,
    /// `[s][a]`
    pub q_values: Vec<[f64; 2]>,
}

impl SubsidizedValues {
    /// `Q(s, passive) − Q(s, active)`.
    pub fn gap(&self, s: usize) -> f64 {
        self.q_values[s][PASSIVE] - self.q_values[s][ACTIVE]
    }

    /// Greedy action; exact ties resolve to passive.
    pub fn greedy_action(&self, s: usize) -> usize {
        if self.q_values[s][ACTIVE] > self.q_values[s][PASSIVE] {
            ACTIVE
        } else {
            PASSIVE
        }
    }
}

fn q_from_values(
    kernel: &TransitionKernel,
    reward: &[f64],
    gamma: f64,
    subsidy: f64,
    values: &[f64],
    q: &mut [[f64; 2]],
) {
    for (s, qs) in q.iter_mut().enumerate() {
        for (a, qa) in qs.iter_mut().enumerate() {
            let future: f64 = kernel.row(s, a).iter().zip(values).map(|(p, v)| p * v).sum();
            *qa = reward[s] + gamma * future + if a == PASSIVE { subsidy } else { 0.0 };
        }
    }
}

#[inline]
fn max_passive_ties(q: &[f64; 2]) -> f64 {
    if q[ACTIVE] > q[PASSIVE] {
        q[ACTIVE]
    } else {
        q[PASSIVE]
    }
}

fn check_dims(kernel: &TransitionKernel, reward: &RewardVector, gamma: f64) -> Result<()> {
    if kernel.num_states() != reward.len() {
        return Err(Error::Dimension {
            what: "reward entries",
            expected: kernel.num_states(),
            got: reward.len(),
        });
    }
    if !(gamma >= 0.0 && gamma < 1.0) {
        return Err(Error::InvalidInput(format!("discount {gamma} outside [0,1)")));
    }
    Ok(())
}

pub fn value_iteration(
    kernel: &TransitionKernel,
    reward: &RewardVector,
    gamma: f64,
    subsidy: f64,
) -> Result<SubsidizedValues> {
    value_iteration_with(kernel, reward, gamma, subsidy, SolverSettings::default().vi_tol)
}

/// Value iteration from `V ≡ 0` until successive iterates differ by at most
/// `tol` in sup-norm.
pub fn value_iteration_with(
    kernel: &TransitionKernel,
    reward: &RewardVector,
    gamma: f64,
    subsidy: f64,
    tol: f64,
) -> Result<SubsidizedValues> {
    check_dims(kernel, reward, gamma)?;
    let zeros = vec![0.0; kernel.num_states()];
    match iterate(kernel, reward.values(), gamma, subsidy, tol, &zeros, None)? {
        Sweep::Converged(v) => Ok(v),
        Sweep::SignCertified { .. } => unreachable!("no target given"),
    }
}

enum Sweep {
    Converged(SubsidizedValues),
    /// The sign of `Q(u,0) − Q(u,1)` at the fixed point is already decided.
    SignCertified { gap: f64, values: Vec<f64> },
}

/// Value iteration from `init`. With a target state it stops as soon as the
/// gap at the target provably has the sign of the fixed point's gap:
/// `|gap_n − gap*| ≤ 2γ‖V_n − V*‖ ≤ 2γ²/(1−γ)·‖V_n − V_{n−1}‖`.
fn iterate(
    kernel: &TransitionKernel,
    r: &[f64],
    gamma: f64,
    subsidy: f64,
    tol: f64,
    init: &[f64],
    target: Option<usize>,
) -> Result<Sweep> {
    let m = kernel.num_states();
    let mut values = init.to_vec();
    let mut next = vec![0.0; m];
    let mut q = vec![[0.0; 2]; m];
    let certify = if gamma == 0.0 { 0.0 } else { 2.0 * gamma * gamma / (1.0 - gamma) };

    let mut bound = usize::MAX;
    let mut residual = f64::INFINITY;
    let mut sweeps = 0;
    while sweeps < bound {
        q_from_values(kernel, r, gamma, subsidy, &values, &mut q);
        if let Some(u) = target {
            let gap = q[u][PASSIVE] - q[u][ACTIVE];
            if gap.abs() > certify * residual {
                return Ok(Sweep::SignCertified { gap, values });
            }
        }
        residual = 0.0;
        let mut scale = 0.0f64;
        for s in 0..m {
            next[s] = max_passive_ties(&q[s]);
            residual = residual.max((next[s] - values[s]).abs());
            scale = scale.max(next[s].abs());
        }
        std::mem::swap(&mut values, &mut next);
        sweeps += 1;
        if !residual.is_finite() {
            break;
        }
        // Below a few ulps of |V| the residual cannot shrink further.
        if residual <= tol.max(16.0 * f64::EPSILON * scale) {
            q_from_values(kernel, r, gamma, subsidy, &values, &mut q);
            return Ok(Sweep::Converged(SubsidizedValues {
                subsidy,
                values,
                q_values: q,
            }));
        }
        if sweeps == 1 {
            // Contraction bounds the remaining sweeps by the first residual.
            bound = if gamma == 0.0 {
                2
            } else {
                ((residual / tol).ln() / (1.0 / gamma).ln()).ceil().max(0.0) as usize + 3
            };
        }
    }
    Err(Error::NonConvergence {
        iterations: sweeps,
        residual,
    })
}

/// Subsidy bracket `±(max R − min R)/(1 − γ)`.
pub fn subsidy_bracket(reward: &RewardVector, gamma: f64) -> (f64, f64) {
    let b = reward.span() / (1.0 - gamma);
    (-b, b)
}

pub fn whittle_index(
    kernel: &TransitionKernel,
    reward: &RewardVector,
    gamma: f64,
    target: usize,
) -> Result<(f64, SubsidizedValues)> {
    whittle_index_with(kernel, reward, gamma, target, &SolverSettings::default())
}

pub fn whittle_index_with(
    kernel: &TransitionKernel,
    reward: &RewardVector,
    gamma: f64,
    target: usize,
    settings: &SolverSettings,
) -> Result<(f64, SubsidizedValues)> {
    check_dims(kernel, reward, gamma)?;
    if target >= kernel.num_states() {
        return Err(Error::InvalidInput(format!(
            "target state {target} out of range for {} states",
            kernel.num_states()
        )));
    }
    // Probes warm-start from the previous probe's values and stop once the
    // sign of the gap is certain; the returned values are recomputed from zero.
    let mut warm = vec![0.0; kernel.num_states()];
    let mut gap_at = |m: f64| -> Result<f64> {
        match iterate(kernel, reward.values(), gamma, m, settings.vi_tol, &warm, Some(target))? {
            Sweep::Converged(v) => {
                let gap = v.gap(target);
                warm = v.values;
                Ok(gap)
            }
            Sweep::SignCertified { gap, values } => {
                warm = values;
                Ok(gap)
            }
        }
    };

    let (mut lo, mut hi) = subsidy_bracket(reward, gamma);
    let gap_lo = gap_at(lo)?;
    let gap_hi = gap_at(hi)?;
    if gap_lo > settings.indifference_tol || gap_hi < -settings.indifference_tol {
        return Err(Error::IndexOutsideBracket {
            state: target,
            lo,
            hi,
            gap_lo,
            gap_hi,
        });
    }
    while hi - lo > settings.bracket_tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if gap_at(mid)? >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let index = 0.5 * (lo + hi);
    let vals = value_iteration_with(kernel, reward, gamma, index, settings.vi_tol)?;
    let gap = vals.gap(target);
    if gap.abs() > settings.indifference_tol {
        return Err(Error::IndexOutsideBracket {
            state: target,
            lo,
            hi,
            gap_lo: gap,
            gap_hi: gap,
        });
    }
    Ok((index, vals))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WhittleTable {
    /// `[arm][state]`
    pub indices: Vec<Vec<f64>>,
    /// Value functions at subsidy `indices[arm][state]`.
    pub values_at_index: Vec<Vec<SubsidizedValues>>,
}

impl WhittleTable {
    /// Table without stored value functions, for indices computed elsewhere
    /// (belief chains).
    pub fn from_indices(indices: Vec<Vec<f64>>) -> Self {
        let values_at_index = vec![Vec::new(); indices.len()];
        WhittleTable {
            indices,
            values_at_index,
        }
    }

    pub fn num_arms(&self) -> usize {
        self.indices.len()
    }

    pub fn index(&self, arm: usize, state: usize) -> f64 {
        self.indices[arm][state]
    }

    /// `[W_i(s_i)]` for a joint state.
    pub fn gather(&self, joint_state: &[usize]) -> Vec<f64> {
        joint_state
            .iter()
            .enumerate()
            .map(|(i, &s)| self.indices[i][s])
            .collect()
    }
}

pub fn whittle_table(inst: &RmabInstance) -> Result<WhittleTable> {
    whittle_table_for(&inst.arms, &inst.reward, inst.discount, &SolverSettings::default())
}

/// Indices for every arm and state. Arms are solved in parallel into
/// per-arm slots, so the result does not depend on scheduling.
pub fn whittle_table_for(
    arms: &[TransitionKernel],
    reward: &RewardVector,
    gamma: f64,
    settings: &SolverSettings,
) -> Result<WhittleTable> {
    let per_arm: Vec<Result<(Vec<f64>, Vec<SubsidizedValues>)>> = arms
        .par_iter()
        .enumerate()
        .map(|(i, kernel)| {
            let mut idx = Vec::with_capacity(kernel.num_states());
            let mut vals = Vec::with_capacity(kernel.num_states());
            for u in 0..kernel.num_states() {
                let (w, v) = whittle_index_with(kernel, reward, gamma, u, settings)
                    .map_err(|e| e.for_arm_state(i, u))?;
                idx.push(w);
                vals.push(v);
            }
            Ok((idx, vals))
        })
        .collect();
    let mut indices = Vec::with_capacity(arms.len());
    let mut values_at_index = Vec::with_capacity(arms.len());
    for r in per_arm {
        let (i, v) = r?;
        indices.push(i);
        values_at_index.push(v);
    }
    Ok(WhittleTable {
        indices,
        values_at_index,
    })
}
