//! Domain types shared by every stage: per-arm transition kernels, the shared
//! reward vector, RMAB instances and behavior trajectories, together with
//! validation and the JSON interchange formats.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-sum tolerance accepted for in-memory kernels.
pub const ROW_SUM_TOL: f64 = 1e-9;
/// Kernels read from files are re-normalized only if every row is within this
/// distance of stochastic.
pub const INGEST_RENORMALIZE_TOL: f64 = 1e-6;

pub const PASSIVE: usize = 0;
pub const ACTIVE: usize = 1;

/// Transition probabilities of one arm, stored flat as `[s][a][s']` with two
/// actions (0 = passive, 1 = active).
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionKernel {
    num_states: usize,
    probs: Vec<f64>,
}

impl TransitionKernel {
    /// Builds a kernel from a flat `[s][a][s']` buffer, checking shape, range
    /// and row sums.
    pub fn new(num_states: usize, probs: Vec<f64>) -> Result<Self> {
        let kernel = TransitionKernel::new_unchecked(num_states, probs)?;
        let violations = kernel.violations(&[]);
        if let Some(v) = violations.first() {
            return Err(Error::InvalidInput(v.to_string()));
        }
        Ok(kernel)
    }

    /// Shape check only; rows may be off-simplex. Used by finite-difference
    /// code that perturbs entries before re-normalizing.
    pub fn new_unchecked(num_states: usize, probs: Vec<f64>) -> Result<Self> {
        if num_states < 1 {
            return Err(Error::InvalidInput("kernel needs at least one state".into()));
        }
        let expected = num_states * 2 * num_states;
        if probs.len() != expected {
            return Err(Error::Dimension {
                what: "kernel entries",
                expected,
                got: probs.len(),
            });
        }
        Ok(TransitionKernel { num_states, probs })
    }

    /// `passive[s][s']`, `active[s][s']`.
    pub fn from_matrices(passive: &[Vec<f64>], active: &[Vec<f64>]) -> Result<Self> {
        let m = passive.len();
        if active.len() != m {
            return Err(Error::Dimension {
                what: "active rows",
                expected: m,
                got: active.len(),
            });
        }
        let mut probs = Vec::with_capacity(m * 2 * m);
        for s in 0..m {
            for rows in [passive, active] {
                if rows[s].len() != m {
                    return Err(Error::Dimension {
                        what: "row length",
                        expected: m,
                        got: rows[s].len(),
                    });
                }
                probs.extend_from_slice(&rows[s]);
            }
        }
        TransitionKernel::new(m, probs)
    }

    /// Kernel whose passive and active rows coincide.
    pub fn action_independent(rows: &[Vec<f64>]) -> Result<Self> {
        TransitionKernel::from_matrices(rows, rows)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    #[inline]
    pub fn offset(&self, s: usize, a: usize) -> usize {
        (s * 2 + a) * self.num_states
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize, next: usize) -> f64 {
        self.probs[self.offset(s, a) + next]
    }

    #[inline]
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let o = self.offset(s, a);
        &self.probs[o..o + self.num_states]
    }

    pub fn row_mut(&mut self, s: usize, a: usize) -> &mut [f64] {
        let o = self.offset(s, a);
        let m = self.num_states;
        &mut self.probs[o..o + m]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }

    /// Divides every row by its sum.
    pub fn normalize_rows(&mut self) {
        let m = self.num_states;
        for row in self.probs.chunks_mut(m) {
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= total);
        }
    }

    fn violations(&self, path: &[usize]) -> Vec<Violation> {
        let mut out = Vec::new();
        for s in 0..self.num_states {
            for a in 0..2 {
                let row = self.row(s, a);
                let mut p = path.to_vec();
                p.extend([s, a]);
                if let Some(bad) = row.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                    out.push(Violation::new(p.clone(), format!("entry {bad} outside [0,1]")));
                }
                let total: f64 = row.iter().sum();
                if !((total - 1.0).abs() <= ROW_SUM_TOL) {
                    out.push(Violation::new(p, format!("row sums to {total}, expected 1")));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RewardVector(pub Vec<f64>);

impl RewardVector {
    /// `values[i] = i / (M - 1)` for `i = 0..M` (the evenly spaced ladder).
    pub fn ladder(num_states: usize) -> Self {
        if num_states < 2 {
            return RewardVector(vec![0.0; num_states]);
        }
        let denom = (num_states - 1) as f64;
        RewardVector((0..num_states).map(|i| i as f64 / denom).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn span(&self) -> f64 {
        let max = self.0.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = self.0.iter().cloned().fold(f64::INFINITY, f64::min);
        if self.0.is_empty() {
            0.0
        } else {
            max - min
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmabInstance {
    pub arms: Vec<TransitionKernel>,
    pub reward: RewardVector,
    pub budget: usize,
    pub horizon: usize,
    pub discount: f64,
}

impl RmabInstance {
    pub fn num_arms(&self) -> usize {
        self.arms.len()
    }

    pub fn num_states(&self) -> usize {
        self.reward.len()
    }
}

/// One invariant violation, located by an index path into the instance
/// (`[arm, state, action]` for kernel rows).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: Vec<usize>,
    pub message: String,
}

impl Violation {
    fn new(path: Vec<usize>, message: impl Into<String>) -> Self {
        Violation {
            path,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let path: Vec<String> = self.path.iter().map(|p| format!("[{p}]")).collect();
        write!(f, "{}: {}", path.concat(), self.message)
    }
}

/// Every invariant violation of `inst`; empty iff the instance is valid.
pub fn validate_instance(inst: &RmabInstance) -> Vec<Violation> {
    let mut out = Vec::new();
    let m = inst.reward.len();
    if m < 2 {
        out.push(Violation::new(vec![], format!("need at least 2 states, got {m}")));
    }
    if inst.reward.0.iter().any(|r| !r.is_finite()) {
        out.push(Violation::new(vec![], "reward has non-finite entries"));
    }
    if inst.arms.is_empty() {
        out.push(Violation::new(vec![], "no arms"));
    }
    if inst.budget < 1 {
        out.push(Violation::new(vec![], "budget must be at least 1"));
    }
    if inst.budget > inst.arms.len() {
        out.push(Violation::new(vec![], "budget exceeds arms"));
    }
    if inst.horizon < 1 {
        out.push(Violation::new(vec![], "horizon must be at least 1"));
    }
    if !(inst.discount > 0.0 && inst.discount < 1.0) {
        out.push(Violation::new(
            vec![],
            format!("discount {} outside (0,1)", inst.discount),
        ));
    }
    for (i, arm) in inst.arms.iter().enumerate() {
        if arm.num_states() != m {
            out.push(Violation::new(
                vec![i],
                format!("arm has {} states, reward has {m}", arm.num_states()),
            ));
            continue;
        }
        out.extend(arm.violations(&[i]));
    }
    out
}

/// Behavior data for all arms over `T` steps. Indexed `[t][arm]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<usize>>,
    pub actions: Vec<Vec<u8>>,
    pub rewards: Vec<Vec<f64>>,
    /// Behavior probability of the action actually taken.
    pub behavior_probs: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.states.len()
    }

    pub fn num_arms(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }
}

/// Checks shape, action budget and the reward/state relation. The reward
/// check is skipped when `check_rewards` is false (partially observable data
/// records realized rewards of hidden states).
pub fn validate_trajectory(
    traj: &Trajectory,
    num_states: usize,
    budget: usize,
    reward: &RewardVector,
    check_rewards: bool,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let horizon = traj.states.len();
    let n = traj.num_arms();
    if traj.actions.len() != horizon
        || traj.rewards.len() != horizon
        || traj.behavior_probs.len() != horizon
    {
        out.push(Violation::new(vec![], "trajectory fields have different lengths"));
        return out;
    }
    for t in 0..horizon {
        let rows = [
            traj.states[t].len(),
            traj.actions[t].len(),
            traj.rewards[t].len(),
            traj.behavior_probs[t].len(),
        ];
        if rows.iter().any(|&l| l != n) {
            out.push(Violation::new(vec![t], "ragged step"));
            continue;
        }
        let pulls: usize = traj.actions[t].iter().map(|&a| a as usize).sum();
        if pulls > budget {
            out.push(Violation::new(vec![t], format!("{pulls} pulls exceed budget {budget}")));
        }
        for i in 0..n {
            let s = traj.states[t][i];
            if s >= num_states {
                out.push(Violation::new(vec![t, i], format!("state {s} out of range")));
                continue;
            }
            if traj.actions[t][i] > 1 {
                out.push(Violation::new(vec![t, i], "action not binary"));
            }
            let bp = traj.behavior_probs[t][i];
            if !(bp > 0.0 && bp <= 1.0) {
                out.push(Violation::new(vec![t, i], format!("behavior probability {bp} outside (0,1]")));
            }
            if check_rewards && reward.len() == num_states && traj.rewards[t][i] != reward.0[s] {
                out.push(Violation::new(vec![t, i], "reward does not match state"));
            }
        }
    }
    out
}

/// `Σ_t γ^t Σ_i rewards[t][i]` with `t` counted from zero.
pub fn discounted_return(traj: &Trajectory, gamma: f64) -> f64 {
    let mut discount = 1.0;
    let mut total = 0.0;
    for step in &traj.rewards {
        total += discount * step.iter().sum::<f64>();
        discount *= gamma;
    }
    total
}

// ---------------------------------------------------------------------------
// JSON interchange

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceJson {
    pub num_states: usize,
    pub budget: usize,
    pub horizon: usize,
    pub discount: f64,
    pub reward: Vec<f64>,
    /// `[arm][state][action][next_state]`
    pub arms: Vec<Vec<Vec<Vec<f64>>>>,
}

impl From<&RmabInstance> for InstanceJson {
    fn from(inst: &RmabInstance) -> Self {
        let m = inst.num_states();
        InstanceJson {
            num_states: m,
            budget: inst.budget,
            horizon: inst.horizon,
            discount: inst.discount,
            reward: inst.reward.0.clone(),
            arms: inst.arms.iter().map(kernel_to_nested).collect(),
        }
    }
}

pub fn kernel_to_nested(k: &TransitionKernel) -> Vec<Vec<Vec<f64>>> {
    (0..k.num_states())
        .map(|s| (0..2).map(|a| k.row(s, a).to_vec()).collect())
        .collect()
}

/// Parses a nested `[state][action][next]` kernel; rows within
/// [`INGEST_RENORMALIZE_TOL`] of stochastic are re-normalized, others rejected.
pub fn kernel_from_nested(nested: &[Vec<Vec<f64>>], num_states: usize) -> Result<TransitionKernel> {
    if nested.len() != num_states {
        return Err(Error::Dimension {
            what: "kernel states",
            expected: num_states,
            got: nested.len(),
        });
    }
    let mut probs = Vec::with_capacity(num_states * 2 * num_states);
    for (s, per_action) in nested.iter().enumerate() {
        if per_action.len() != 2 {
            return Err(Error::Dimension {
                what: "actions",
                expected: 2,
                got: per_action.len(),
            });
        }
        for (a, row) in per_action.iter().enumerate() {
            if row.len() != num_states {
                return Err(Error::Dimension {
                    what: "next states",
                    expected: num_states,
                    got: row.len(),
                });
            }
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidInput(format!("[{s}][{a}]: entry outside [0,1]")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > INGEST_RENORMALIZE_TOL {
                return Err(Error::InvalidInput(format!(
                    "[{s}][{a}]: row sums to {total}, not within {INGEST_RENORMALIZE_TOL} of 1"
                )));
            }
            probs.extend(row.iter().map(|p| p / total));
        }
    }
    TransitionKernel::new(num_states, probs)
}

impl TryFrom<InstanceJson> for RmabInstance {
    type Error = Error;

    fn try_from(json: InstanceJson) -> Result<Self> {
        if json.reward.len() != json.num_states {
            return Err(Error::Dimension {
                what: "reward entries",
                expected: json.num_states,
                got: json.reward.len(),
            });
        }
        let arms = json
            .arms
            .iter()
            .enumerate()
            .map(|(i, a)| kernel_from_nested(a, json.num_states).map_err(|e| e.for_arm(i)))
            .collect::<Result<Vec<_>>>()?;
        let inst = RmabInstance {
            arms,
            reward: RewardVector(json.reward),
            budget: json.budget,
            horizon: json.horizon,
            discount: json.discount,
        };
        let violations = validate_instance(&inst);
        if !violations.is_empty() {
            let msgs: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(Error::InvalidInput(msgs.join("; ")));
        }
        Ok(inst)
    }
}

pub fn instance_to_json(inst: &RmabInstance) -> Result<String> {
    Ok(serde_json::to_string_pretty(&InstanceJson::from(inst))?)
}

pub fn instance_from_json(text: &str) -> Result<RmabInstance> {
    let json: InstanceJson = serde_json::from_str(text)?;
    json.try_into()
}
