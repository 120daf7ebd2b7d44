//! Independent oracles shared by the integration tests. None of them call the
//! library's solvers; they only use its data types.

#![allow(dead_code)]

use rmab_core::model::{RewardVector, TransitionKernel};
use rmab_core::rng::Rng;

/// Plain value iteration on nested vectors, run to `1e-13`.
pub fn oracle_q(kernel: &TransitionKernel, reward: &[f64], gamma: f64, subsidy: f64) -> Vec<[f64; 2]> {
    let m = reward.len();
    let p: Vec<Vec<Vec<f64>>> = (0..m)
        .map(|s| (0..2).map(|a| (0..m).map(|j| kernel.get(s, a, j)).collect()).collect())
        .collect();
    let mut v = vec![0.0; m];
    loop {
        let q: Vec<[f64; 2]> = (0..m)
            .map(|s| {
                let ev = |a: usize| -> f64 { p[s][a].iter().zip(&v).map(|(x, y)| x * y).sum() };
                [subsidy + reward[s] + gamma * ev(0), reward[s] + gamma * ev(1)]
            })
            .collect();
        let next: Vec<f64> = q.iter().map(|x| x[0].max(x[1])).collect();
        let diff = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if diff <= 1e-13 * (1.0 + v.iter().fold(0.0f64, |a, b| a.max(b.abs()))) {
            return q;
        }
    }
}

fn oracle_gap(kernel: &TransitionKernel, reward: &[f64], gamma: f64, u: usize, m: f64) -> f64 {
    let q = oracle_q(kernel, reward, gamma, m);
    q[u][0] - q[u][1]
}

/// Grid search for the first subsidy at which `Q(u,0) − Q(u,1)` turns
/// non-negative, scanning the bracket `±span/(1−γ)`: a coarse pass at
/// `coarse` locates the crossing cell, which is then rescanned at `1e-4`.
pub fn grid_search_index(kernel: &TransitionKernel, reward: &[f64], gamma: f64, u: usize) -> Option<f64> {
    let span = reward.iter().copied().fold(f64::NEG_INFINITY, f64::max) - reward.iter().copied().fold(f64::INFINITY, f64::min);
    let bound = span / (1.0 - gamma);
    let fine = 1e-4;
    let coarse = 1e-2;
    let mut m = -bound;
    if oracle_gap(kernel, reward, gamma, u, m) >= 0.0 {
        return Some(m);
    }
    while m < bound {
        let next = (m + coarse).min(bound);
        if oracle_gap(kernel, reward, gamma, u, next) >= 0.0 {
            let mut x = m;
            while x < next {
                let y = (x + fine).min(next);
                if oracle_gap(kernel, reward, gamma, u, y) >= 0.0 {
                    // The crossing lies in (x, y]; report the midpoint.
                    return Some(0.5 * (x + y));
                }
                x = y;
            }
            return Some(next);
        }
        m = next;
    }
    None
}

pub fn random_kernel(m: usize, rng: &mut Rng) -> TransitionKernel {
    let mut probs = Vec::with_capacity(2 * m * m);
    for _ in 0..2 * m {
        probs.extend(rng.simplex(m));
    }
    TransitionKernel::new(m, probs).unwrap()
}

/// Random kernel with every entry at least `floor` before normalization, so
/// that re-normalized finite differences stay inside the simplex.
pub fn interior_kernel(m: usize, rng: &mut Rng, floor: f64) -> TransitionKernel {
    let mut probs = Vec::with_capacity(2 * m * m);
    for _ in 0..2 * m {
        let row: Vec<f64> = rng.simplex(m).iter().map(|p| p + floor).collect();
        let s: f64 = row.iter().sum();
        probs.extend(row.iter().map(|p| p / s));
    }
    TransitionKernel::new(m, probs).unwrap()
}

/// Adds `h` to one raw entry and re-normalizes its row.
pub fn perturb_renormalized(kernel: &TransitionKernel, s: usize, a: usize, next: usize, h: f64) -> TransitionKernel {
    let m = kernel.num_states();
    let mut probs = kernel.as_slice().to_vec();
    let o = (s * 2 + a) * m;
    probs[o + next] += h;
    let total: f64 = probs[o..o + m].iter().sum();
    for p in &mut probs[o..o + m] {
        *p /= total;
    }
    TransitionKernel::new_unchecked(m, probs).unwrap()
}

pub fn central_difference(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// Determinant-free solve of a small dense system by Gauss-Jordan
/// elimination with full pivot search per column.
pub fn gauss_jordan(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        let d = a[col][col];
        for j in 0..n {
            a[col][j] /= d;
        }
        b[col] /= d;
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                for j in 0..n {
                    a[r][j] -= f * a[col][j];
                }
                b[r] -= f * b[col];
            }
        }
    }
    b
}

/// The two 3×3 systems of the 2-state closed form for target state `u`
/// (reward `[0, 1]` generalized to any `R`): the target's passive and active
/// equalities plus either the passive or the active equality of the other
/// state. Returns `(lhs, rhs)` pairs, passive variant first.
pub fn legacy_systems(kernel: &TransitionKernel, reward: &[f64], gamma: f64, u: usize) -> [(Vec<Vec<f64>>, Vec<f64>); 2] {
    let o = 1 - u;
    let row = |s: usize, a: usize| -> Vec<f64> {
        let mut r = vec![if a == 0 { 1.0 } else { 0.0 }];
        for j in 0..2 {
            r.push(gamma * kernel.get(s, a, j) - if j == s { 1.0 } else { 0.0 });
        }
        r
    };
    let build = |other_action: usize| {
        (
            vec![row(u, 0), row(u, 1), row(o, other_action)],
            vec![-reward[u], -reward[u], -reward[o]],
        )
    };
    [build(0), build(1)]
}

/// Closed-form 2-state index: solve both legacy systems and keep the one
/// whose non-target choice is the better action at the solution.
pub fn legacy_index(kernel: &TransitionKernel, reward: &[f64], gamma: f64, u: usize) -> Option<f64> {
    let o = 1 - u;
    for (variant, (lhs, rhs)) in legacy_systems(kernel, reward, gamma, u).into_iter().enumerate() {
        let x = gauss_jordan(lhs, rhs);
        let (m, v) = (x[0], [x[1], x[2]]);
        let q = |a: usize| -> f64 {
            (if a == 0 { m } else { 0.0 }) + reward[o] + gamma * (0..2).map(|j| kernel.get(o, a, j) * v[j]).sum::<f64>()
        };
        let chosen = q(variant);
        let other = q(1 - variant);
        if chosen >= other - 1e-9 {
            return Some(m);
        }
    }
    None
}

/// Joint-state enumeration helpers for exact evaluation of small RMABs.
pub fn decode(mut idx: usize, n: usize, m: usize) -> Vec<usize> {
    let mut s = vec![0; n];
    for x in s.iter_mut() {
        *x = idx % m;
        idx /= m;
    }
    s
}

pub fn encode(s: &[usize], m: usize) -> usize {
    s.iter().rev().fold(0, |acc, &x| acc * m + x)
}

/// Exact finite-horizon expected discounted return of a Markov policy on the
/// joint MDP, by backward induction over all `M^N` joint states. `policy`
/// returns a distribution over joint actions for a joint state. `start` is
/// a distribution over joint states.
pub fn exact_joint_value(
    kernels: &[TransitionKernel],
    reward: &[f64],
    gamma: f64,
    horizon: usize,
    policy: &dyn Fn(&[usize]) -> Vec<(f64, Vec<bool>)>,
    start: &[(f64, Vec<usize>)],
) -> f64 {
    let n = kernels.len();
    let m = reward.len();
    let total = m.pow(n as u32);
    let mut v = vec![0.0; total];
    for _ in 0..horizon {
        let mut next = vec![0.0; total];
        for (idx, out) in next.iter_mut().enumerate() {
            let s = decode(idx, n, m);
            let r: f64 = s.iter().map(|&x| reward[x]).sum();
            let mut future = 0.0;
            for (pa, act) in policy(&s) {
                if pa == 0.0 {
                    continue;
                }
                for (jdx, vj) in v.iter().enumerate() {
                    let t = decode(jdx, n, m);
                    let p: f64 = (0..n).map(|i| kernels[i].get(s[i], act[i] as usize, t[i])).product();
                    future += pa * p * vj;
                }
            }
            *out = r + gamma * future;
        }
        v = next;
    }
    start.iter().map(|(p, s)| p * v[encode(s, m)]).sum()
}

/// All size-`k` subsets of `0..n` as indicator vectors.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<bool>> {
    (0..1usize << n)
        .filter(|mask| mask.count_ones() as usize == k)
        .map(|mask| (0..n).map(|i| mask >> i & 1 == 1).collect())
        .collect()
}

/// Euclidean projection onto `{x : lo ≤ x_i ≤ hi, Σx = total}` by bisection
/// on the shift.
pub fn project_capped_simplex(y: &[f64], lo: f64, hi: f64, total: f64) -> Vec<f64> {
    let clip = |t: f64| -> Vec<f64> { y.iter().map(|v| (v - t).clamp(lo, hi)).collect() };
    let (mut a, mut b) = (
        y.iter().copied().fold(f64::INFINITY, f64::min) - hi - 1.0,
        y.iter().copied().fold(f64::NEG_INFINITY, f64::max) - lo + 1.0,
    );
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if clip(mid).iter().sum::<f64>() > total {
            a = mid;
        } else {
            b = mid;
        }
    }
    clip(0.5 * (a + b))
}

/// Direct solve of the entropic two-anchor transport program
/// `min Σ_ij Γ_ij C_ij / ε + Σ_ij Γ_ij log Γ_ij` over plans with row mass `1/N`
/// and column masses `((N−k)/N, k/N)`, parameterized by the selected column
/// `x` on the capped simplex, by projected gradient descent with backtracking.
/// Returns `N·x`.
pub fn transport_oracle(scores: &[f64], k: usize, epsilon: f64, normalize: bool) -> Vec<f64> {
    let n = scores.len();
    let nf = n as f64;
    let z: Vec<f64> = if normalize {
        let mean = scores.iter().sum::<f64>() / nf;
        let sd = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / nf).sqrt();
        scores.iter().map(|s| (s - mean) / (sd + 1e-8)).collect()
    } else {
        scores.to_vec()
    };
    let hi_anchor = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo_anchor = z.iter().copied().fold(f64::INFINITY, f64::min);
    let scale = epsilon * if normalize { (hi_anchor - lo_anchor).powi(2) } else { 1.0 };
    let c_sel: Vec<f64> = z.iter().map(|v| (v - hi_anchor).powi(2) / scale).collect();
    let c_rej: Vec<f64> = z.iter().map(|v| (v - lo_anchor).powi(2) / scale).collect();
    let cap = 1.0 / nf;
    let floor = 1e-300;
    // Iterates stay strictly inside the box so the entropy gradient is finite.
    let margin = 1e-14;
    let xlogx = |v: f64| if v <= 0.0 { 0.0 } else { v * v.ln() };
    let objective = |x: &[f64]| -> f64 {
        x.iter()
            .enumerate()
            .map(|(i, &xi)| xi * c_sel[i] + (cap - xi) * c_rej[i] + xlogx(xi) + xlogx(cap - xi))
            .sum()
    };
    let grad = |x: &[f64]| -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, &xi)| c_sel[i] - c_rej[i] + xi.max(floor).ln() - (cap - xi).max(floor).ln())
            .collect()
    };
    let mut x = vec![k as f64 / nf / nf; n];
    let mut step = 1e-3;
    for _ in 0..200_000 {
        let g = grad(&x);
        let f0 = objective(&x);
        loop {
            let y: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - step * b).collect();
            let cand = project_capped_simplex(&y, margin, cap - margin, k as f64 / nf);
            let decrease: f64 = g.iter().zip(cand.iter().zip(&x)).map(|(gi, (c, xi))| gi * (c - xi)).sum::<f64>();
            let dist2: f64 = cand.iter().zip(&x).map(|(c, xi)| (c - xi).powi(2)).sum();
            if objective(&cand) <= f0 + decrease + dist2 / (2.0 * step) || step < 1e-30 {
                let moved = dist2.sqrt();
                x = cand;
                step *= 2.0;
                if moved < 1e-16 {
                    return x.iter().map(|v| v * nf).collect();
                }
                break;
            }
            step *= 0.5;
        }
    }
    x.iter().map(|v| v * nf).collect()
}

pub fn ladder(m: usize) -> RewardVector {
    RewardVector((0..m).map(|i| i as f64 / (m - 1) as f64).collect())
}

/// The bundled small instances (N ≤ 2, M ≤ 3) under `tests/fixtures`.
pub fn fixtures() -> Vec<(String, rmab_core::model::RmabInstance)> {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let mut names: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|p| {
            let text = std::fs::read_to_string(&p).unwrap();
            let name = p.file_stem().unwrap().to_string_lossy().into_owned();
            (name, rmab_core::model::instance_from_json(&text).unwrap())
        })
        .collect()
}

/// Uniform distribution over all joint states.
pub fn uniform_start(n: usize, m: usize) -> Vec<(f64, Vec<usize>)> {
    let total = m.pow(n as u32);
    (0..total).map(|i| (1.0 / total as f64, decode(i, n, m))).collect()
}
