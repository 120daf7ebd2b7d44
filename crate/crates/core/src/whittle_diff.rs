//! Gradients of Whittle indices with respect to transition probabilities.
//!
//! At `m = W(u)` every state satisfies at least one of its two subsidized
//! Bellman equalities with equality, and the target state `u` satisfies both.
//! Picking those `M + 1` equalities from the stacked system
//!
//! ```text
//! [ 1  γP(·,0,·) − I ] [m]   [−R]
//! [ 0  γP(·,1,·) − I ] [V] = [−R]
//! ```
//!
//! yields a square, generically full-rank system whose solution is `(m, V)`.
//! Holding the selection fixed, the implicit function theorem gives
//! `dx = lhs⁻¹ (∂rhs − ∂lhs · x)` for every perturbed kernel or reward entry.
//! Only the first component (`m`) is needed for the index gradient, so one
//! transposed solve against `e₀` serves all `2M²` kernel entries.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{condition_number, Lu, Matrix};
use crate::model::{RewardVector, RmabInstance, TransitionKernel, ACTIVE, PASSIVE};
use crate::whittle::{SolverSettings, SubsidizedValues, WhittleTable};

pub const MAX_CONDITION: f64 = 1e12;
pub const INDEX_MISMATCH_TOL: f64 = 1e-4;

/// Which `M + 1` Bellman equalities hold at `m = W(u)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowSelection {
    pub target: usize,
    /// Action whose equality is used for state `s` (row `s`).
    pub actions: Vec<usize>,
    /// Action of the extra row (row `M`), always the target state's other
    /// action.
    pub extra_action: usize,
}

impl RowSelection {
    pub fn num_states(&self) -> usize {
        self.actions.len()
    }

    /// `(state, action)` of each of the `M + 1` rows.
    pub fn rows(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.actions
            .iter()
            .enumerate()
            .map(|(s, &a)| (s, a))
            .chain(std::iter::once((self.target, self.extra_action)))
    }

    /// Binary `(M + 1) × 2M` selector over the stacked rows (passive block
    /// first), with a single 1 per row.
    pub fn matrix(&self) -> Vec<Vec<u8>> {
        let m = self.num_states();
        self.rows()
            .map(|(s, a)| {
                let mut row = vec![0u8; 2 * m];
                row[a * m + s] = 1;
                row
            })
            .collect()
    }
}

/// Resolves the `max` of the Bellman equation at every state, re-deriving
/// `Q` from `vals.values` so stale value functions are caught.
pub fn select_rows(
    kernel: &TransitionKernel,
    reward: &RewardVector,
    gamma: f64,
    target: usize,
    vals: &SubsidizedValues,
) -> Result<RowSelection> {
    select_rows_with(kernel, reward, gamma, target, vals, SolverSettings::default().indifference_tol)
}

pub fn select_rows_with(
    kernel: &TransitionKernel,
    reward: &RewardVector,
    gamma: f64,
    target: usize,
    vals: &SubsidizedValues,
    tol: f64,
) -> Result<RowSelection> {
    let m = kernel.num_states();
    if vals.values.len() != m || reward.len() != m {
        return Err(Error::Dimension {
            what: "value function length",
            expected: m,
            got: vals.values.len(),
        });
    }
    if target >= m {
        return Err(Error::InvalidInput(format!("target state {target} out of range")));
    }
    let r = reward.values();
    let mut actions = Vec::with_capacity(m);
    for s in 0..m {
        let q = |a: usize| -> f64 {
            let future: f64 = kernel.row(s, a).iter().zip(&vals.values).map(|(p, v)| p * v).sum();
            r[s] + gamma * future + if a == PASSIVE { vals.subsidy } else { 0.0 }
        };
        let gap_passive = (vals.values[s] - q(PASSIVE)).abs();
        let gap_active = (vals.values[s] - q(ACTIVE)).abs();
        let passive_holds = gap_passive <= tol;
        let active_holds = gap_active <= tol;
        if s == target {
            if !(passive_holds && active_holds) {
                return Err(Error::InconsistentValues {
                    state: s,
                    gap_passive,
                    gap_active,
                });
            }
            actions.push(PASSIVE);
            continue;
        }
        let action = match (passive_holds, active_holds) {
            (true, _) => PASSIVE,
            (false, true) => ACTIVE,
            (false, false) => {
                return Err(Error::InconsistentValues {
                    state: s,
                    gap_passive,
                    gap_active,
                })
            }
        };
        actions.push(action);
    }
    Ok(RowSelection {
        target,
        actions,
        extra_action: ACTIVE,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub lhs: Matrix,
    pub rhs: Vec<f64>,
}

/// Unknowns are `[m, V(0), …, V(M−1)]`. The row for `(s, a)` carries a 1 on
/// `m` iff `a` is passive, `γP(s, a, ·) − e_s` on `V`, and `−R(s)` on the
/// right-hand side.
pub fn assemble_system(
    kernel: &TransitionKernel,
    reward: &RewardVector,
    gamma: f64,
    sel: &RowSelection,
) -> LinearSystem {
    let m = kernel.num_states();
    let n = m + 1;
    let mut lhs = Matrix::zeros(n);
    let mut rhs = vec![0.0; n];
    for (row, (s, a)) in sel.rows().enumerate() {
        lhs.set(row, 0, if a == PASSIVE { 1.0 } else { 0.0 });
        for (next, p) in kernel.row(s, a).iter().enumerate() {
            lhs.set(row, 1 + next, gamma * p);
        }
        let diag = lhs.get(row, 1 + s);
        lhs.set(row, 1 + s, diag - 1.0);
        rhs[row] = -reward.values()[s];
    }
    LinearSystem { lhs, rhs }
}

/// Index, value function and gradients of the index of one `(arm, state)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexGradient {
    pub index: f64,
    pub values: Vec<f64>,
    /// `∂W/∂P(s, a, s')`, flat `[s][a][s']` like the kernel.
    pub kernel: Vec<f64>,
    /// `∂W/∂R(s)`.
    pub reward: Vec<f64>,
}

/// Factorized system kept for repeated sensitivity solves.
pub struct FactorizedSystem {
    pub selection: RowSelection,
    pub system: LinearSystem,
    pub lu: Lu,
    pub solution: Vec<f64>,
    pub condition: f64,
}

/// Selects rows, assembles and factorizes the system, and checks its
/// conditioning and agreement with the binary-search index.
pub fn factorize(
    kernel: &TransitionKernel,
    reward: &RewardVector,
    gamma: f64,
    target: usize,
    vals: &SubsidizedValues,
) -> Result<FactorizedSystem> {
    let selection = select_rows(kernel, reward, gamma, target, vals)?;
    let system = assemble_system(kernel, reward, gamma, &selection);
    let lu = Lu::factor(&system.lhs).ok_or(Error::IllConditioned {
        condition: f64::INFINITY,
    })?;
    let condition = condition_number(&system.lhs, &lu);
    if condition > MAX_CONDITION {
        return Err(Error::IllConditioned { condition });
    }
    let solution = lu.solve(&system.rhs);
    if !((solution[0] - vals.subsidy).abs() <= INDEX_MISMATCH_TOL) {
        return Err(Error::RowSelectionInconsistent {
            solved: solution[0],
            searched: vals.subsidy,
        });
    }
    Ok(FactorizedSystem {
        selection,
        system,
        lu,
        solution,
        condition,
    })
}

impl FactorizedSystem {
    /// Gradient of the index via one transposed solve.
    pub fn index_gradient(&self, gamma: f64) -> IndexGradient {
        let m = self.selection.num_states();
        let mut e0 = vec![0.0; m + 1];
        e0[0] = 1.0;
        // adjoint[r] = (lhs⁻¹)[0][r]
        let adjoint = self.lu.solve_transpose(&e0);
        let x = &self.solution;
        let mut kernel = vec![0.0; m * 2 * m];
        let mut reward = vec![0.0; m];
        for (row, (s, a)) in self.selection.rows().enumerate() {
            let w = adjoint[row];
            let base = (s * 2 + a) * m;
            for next in 0..m {
                kernel[base + next] -= gamma * x[1 + next] * w;
            }
            reward[s] -= w;
        }
        IndexGradient {
            index: x[0],
            values: x[1..].to_vec(),
            kernel,
            reward,
        }
    }

    /// Full sensitivity `∂[m; V]/∂P(s, a, s')` for every kernel entry, solving
    /// the `2M²` right-hand sides against the stored factorization. Flat
    /// `[s][a][s'][component]`.
    pub fn kernel_sensitivities(&self, gamma: f64) -> Vec<Vec<f64>> {
        let m = self.selection.num_states();
        let rows: Vec<(usize, usize)> = self.selection.rows().collect();
        let mut out = Vec::with_capacity(2 * m * m);
        for s in 0..m {
            for a in 0..2 {
                for next in 0..m {
                    let mut rhs = vec![0.0; m + 1];
                    for (row, &(rs, ra)) in rows.iter().enumerate() {
                        if rs == s && ra == a {
                            rhs[row] = -gamma * self.solution[1 + next];
                        }
                    }
                    out.push(self.lu.solve(&rhs));
                }
            }
        }
        out
    }
}

pub fn solve_and_differentiate(
    kernel: &TransitionKernel,
    reward: &RewardVector,
    gamma: f64,
    target: usize,
    vals: &SubsidizedValues,
) -> Result<IndexGradient> {
    Ok(factorize(kernel, reward, gamma, target, vals)?.index_gradient(gamma))
}

/// Index gradients for every `(arm, state)`. Indexed `[arm][state]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WhittleJacobian {
    pub blocks: Vec<Vec<IndexGradient>>,
}

impl WhittleJacobian {
    pub fn get(&self, arm: usize, state: usize) -> &IndexGradient {
        &self.blocks[arm][state]
    }
}

pub fn whittle_jacobian(inst: &RmabInstance, table: &WhittleTable) -> Result<WhittleJacobian> {
    whittle_jacobian_for(&inst.arms, &inst.reward, inst.discount, table)
}

pub fn whittle_jacobian_for(
    arms: &[TransitionKernel],
    reward: &RewardVector,
    gamma: f64,
    table: &WhittleTable,
) -> Result<WhittleJacobian> {
    if table.num_arms() != arms.len() {
        return Err(Error::Dimension {
            what: "table arms",
            expected: arms.len(),
            got: table.num_arms(),
        });
    }
    let blocks = arms
        .par_iter()
        .enumerate()
        .map(|(i, kernel)| {
            (0..kernel.num_states())
                .map(|u| {
                    solve_and_differentiate(kernel, reward, gamma, u, &table.values_at_index[i][u])
                        .map_err(|e| e.for_arm_state(i, u))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WhittleJacobian { blocks })
}

/// Directional derivative of a raw kernel gradient along the curve that adds
/// `h` to entry `(s, a, s')` and re-normalizes the row:
/// `g[s,a,s'] − Σ_j g[s,a,j] P(s,a,j)`.
pub fn renormalized_entry_derivative(grad: &[f64], kernel: &TransitionKernel, s: usize, a: usize, next: usize) -> f64 {
    let o = kernel.offset(s, a);
    let row = kernel.row(s, a);
    let mean: f64 = row.iter().enumerate().map(|(j, p)| grad[o + j] * p).sum();
    grad[o + next] - mean
}

/// Projection of each row of a raw gradient onto the simplex tangent space
/// (subtract the row mean).
pub fn project_to_tangent(grad: &[f64], num_states: usize) -> Vec<f64> {
    let mut out = grad.to_vec();
    for row in out.chunks_mut(num_states) {
        let mean = row.iter().sum::<f64>() / num_states as f64;
        row.iter_mut().for_each(|g| *g -= mean);
    }
    out
}
