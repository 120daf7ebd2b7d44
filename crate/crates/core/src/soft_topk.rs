//! Soft top-k selection as entropic optimal transport between the scores and
//! two anchors, "rejected" at the minimum score and "selected" at the maximum.
//!
//! Row masses are `1/N` and column masses `((N−k)/N, k/N)`; the cost is
//! `C(i, j) = (z_i − y_j)²`, divided by its maximum when normalizing. The
//! converged plan has the closed row form `p_i = N·Γ(i, sel) = σ((δ − Δ_i)/ε)`,
//! where `Δ_i = C(i, sel) − C(i, rej)` and the dual gap `δ` is fixed by
//! `Σ p_i = k`. The backward pass differentiates this fixed point directly:
//! `dδ/dΔ_j = s_j / Σ s` with `s = p(1 − p)`, which costs O(N).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const STD_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftTopKConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub convergence_tol: f64,
    /// Standardize scores and divide the cost by its maximum, which makes
    /// the map invariant to positive affine rescaling of the scores.
    pub normalize: bool,
}

impl Default for SoftTopKConfig {
    fn default() -> Self {
        SoftTopKConfig {
            epsilon: 0.1,
            max_iters: 200,
            convergence_tol: 1e-6,
            normalize: true,
        }
    }
}

impl SoftTopKConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        SoftTopKConfig {
            epsilon,
            ..Default::default()
        }
    }

    /// Same temperature, iterated to near machine precision. Used where the
    /// forward map itself is differenced numerically.
    pub fn tight(self) -> Self {
        SoftTopKConfig {
            max_iters: 1_000_000,
            convergence_tol: 1e-12,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidInput(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidInput("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Regime {
    /// Regular transport solution.
    Transport,
    /// `k = N`: every entry is 1.
    AllSelected,
    /// All scores equal: every entry is `k/N`.
    Uniform,
}

/// Everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct SoftTopKState {
    regime: Regime,
    pub probs: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
    epsilon: f64,
    normalize: bool,
    centered: Vec<f64>,
    std: f64,
    z: Vec<f64>,
    sel_anchor: usize,
    rej_anchor: usize,
}

impl SoftTopKState {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

fn log_sum_exp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn argmax_first(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

fn argmin_first(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v < z[best] {
            best = i;
        }
    }
    best
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `δ` with `Σ σ(δ − gap_i) = k`, by bisection.
fn reduced_dual_root(gaps: &[f64], k: usize) -> f64 {
    let lo_gap = gaps.iter().copied().fold(f64::INFINITY, f64::min);
    let hi_gap = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (lo_gap - 50.0, hi_gap + 50.0);
    let kf = k as f64;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if gaps.iter().map(|d| sigmoid(mid - d)).sum::<f64>() < kf {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn soft_topk_forward(scores: &[f64], k: usize, cfg: &SoftTopKConfig) -> Result<SoftTopKState> {
    cfg.validate()?;
    let n = scores.len();
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!("k = {k} must lie in 1..={n}")));
    }
    if let Some(i) = scores.iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!("score {i} is not finite")));
    }
    let nf = n as f64;
    let mean = scores.iter().sum::<f64>() / nf;
    let centered: Vec<f64> = scores.iter().map(|x| x - mean).collect();
    let std = (centered.iter().map(|c| c * c).sum::<f64>() / nf).sqrt();
    let z: Vec<f64> = if cfg.normalize {
        centered.iter().map(|c| c / (std + STD_EPS)).collect()
    } else {
        scores.to_vec()
    };
    let sel_anchor = argmax_first(&z);
    let rej_anchor = argmin_first(&z);
    let mut state = SoftTopKState {
        regime: Regime::Transport,
        probs: vec![],
        converged: true,
        iterations: 0,
        residual: 0.0,
        epsilon: cfg.epsilon,
        normalize: cfg.normalize,
        centered,
        std,
        z,
        sel_anchor,
        rej_anchor,
    };
    if k == n {
        state.regime = Regime::AllSelected;
        state.probs = vec![1.0; n];
        return Ok(state);
    }
    let y_sel = state.z[sel_anchor];
    let y_rej = state.z[rej_anchor];
    if y_sel == y_rej {
        state.regime = Regime::Uniform;
        state.probs = vec![k as f64 / nf; n];
        return Ok(state);
    }

    // Scaled costs C/(c·ε), columns [rej, sel], where c = (y_sel − y_rej)² is
    // the largest cost when normalizing and 1 otherwise.
    let scale = cfg.epsilon * if cfg.normalize { (y_sel - y_rej).powi(2) } else { 1.0 };
    let cost: Vec<[f64; 2]> = state
        .z
        .iter()
        .map(|&zi| [(zi - y_rej).powi(2) / scale, (zi - y_sel).powi(2) / scale])
        .collect();
    let log_a = -(nf.ln());
    let log_b = [((n - k) as f64 / nf).ln(), (k as f64 / nf).ln()];
    // Scaled potentials f/ε, g/ε. The column gap is warm-started at the root
    // of the reduced dual, where plain Sinkhorn contracts slowly near the
    // hard limit.
    let gaps: Vec<f64> = cost.iter().map(|c| c[1] - c[0]).collect();
    let mut f = vec![0.0; n];
    let mut g = [0.0, reduced_dual_root(&gaps, k)];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        for (fi, c) in f.iter_mut().zip(&cost) {
            *fi = log_a - log_sum_exp2(g[0] - c[0], g[1] - c[1]);
        }
        for j in 0..2 {
            g[j] = log_b[j] - log_sum_exp(f.iter().zip(&cost).map(|(fi, c)| fi - c[j]));
        }
        // Columns are exact after the g update; measure the row marginals.
        residual = f
            .iter()
            .zip(&cost)
            .map(|(fi, c)| (log_sum_exp2(fi + g[0] - c[0], fi + g[1] - c[1]).exp() - 1.0 / nf).abs())
            .sum::<f64>();
        if residual <= cfg.convergence_tol {
            break;
        }
    }
    // Selected share of each row; equals N times the selected mass at the
    // fixed point and stays inside [0, 1] away from it.
    state.probs = cost
        .iter()
        .map(|c| 1.0 / (1.0 + (g[0] - c[0] - g[1] + c[1]).exp()))
        .collect();
    state.converged = residual <= cfg.convergence_tol;
    state.iterations = iterations;
    state.residual = residual;
    let total: f64 = state.probs.iter().sum();
    if !((total - k as f64).abs() <= 1e-6) {
        return Err(Error::NumericAbort {
            stage: "soft-topk",
            detail: format!("selected mass {total} differs from k = {k}"),
        });
    }
    Ok(state)
}

/// Vector-Jacobian product of the converged forward map.
pub fn soft_topk_backward(state: &SoftTopKState, upstream: &[f64]) -> Result<Vec<f64>> {
    let n = state.probs.len();
    if upstream.len() != n {
        return Err(Error::Dimension {
            what: "soft-topk upstream gradient",
            expected: n,
            got: upstream.len(),
        });
    }
    if !state.converged {
        return Err(Error::UnconvergedTransport {
            iterations: state.iterations,
            residual: state.residual,
        });
    }
    if state.regime != Regime::Transport {
        return Ok(vec![0.0; n]);
    }
    let eps = state.epsilon;
    let s: Vec<f64> = state.probs.iter().map(|p| p * (1.0 - p)).collect();
    let s_total: f64 = s.iter().sum();
    let us: f64 = upstream.iter().zip(&s).map(|(u, si)| u * si).sum();
    let delta_bar: Vec<f64> = upstream
        .iter()
        .zip(&s)
        .map(|(u, si)| {
            let shared = if s_total > 0.0 { us * si / s_total } else { 0.0 };
            (shared - u * si) / eps
        })
        .collect();

    let y_sel = state.z[state.sel_anchor];
    let y_rej = state.z[state.rej_anchor];
    let mut z_bar = vec![0.0; n];
    let mut y_sel_bar = 0.0;
    let mut y_rej_bar = 0.0;
    if state.normalize {
        // Δ_i = (y_sel + y_rej − 2 z_i) / (y_sel − y_rej)
        let span = y_sel - y_rej;
        for ((zb, d), &zi) in z_bar.iter_mut().zip(&delta_bar).zip(&state.z) {
            *zb = -2.0 * d / span;
            y_sel_bar += 2.0 * d * (zi - y_rej) / (span * span);
            y_rej_bar += 2.0 * d * (y_sel - zi) / (span * span);
        }
    } else {
        // Δ_i = 2 z_i (y_rej − y_sel) + y_sel² − y_rej²
        for ((zb, d), &zi) in z_bar.iter_mut().zip(&delta_bar).zip(&state.z) {
            *zb = 2.0 * d * (y_rej - y_sel);
            y_sel_bar += 2.0 * d * (y_sel - zi);
            y_rej_bar += 2.0 * d * (zi - y_rej);
        }
    }
    z_bar[state.sel_anchor] += y_sel_bar;
    z_bar[state.rej_anchor] += y_rej_bar;

    if !state.normalize {
        return Ok(z_bar);
    }
    let nf = n as f64;
    let denom = state.std + STD_EPS;
    let mean_bar = z_bar.iter().sum::<f64>() / nf;
    let zc: f64 = z_bar.iter().zip(&state.centered).map(|(g, c)| g * c).sum();
    Ok(z_bar
        .iter()
        .zip(&state.centered)
        .map(|(g, c)| {
            let through_std = if state.std > 0.0 {
                zc / (denom * denom) * c / (nf * state.std)
            } else {
                0.0
            };
            (g - mean_bar) / denom - through_std
        })
        .collect())
}

/// Indicator of the `k` largest scores, ties to the lower index.
pub fn hard_topk(scores: &[f64], k: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut out = vec![0.0; scores.len()];
    for &i in order.iter().take(k) {
        out[i] = 1.0;
    }
    out
}
