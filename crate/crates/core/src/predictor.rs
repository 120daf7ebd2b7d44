//! Feature-to-kernel predictor: one hidden ReLU layer followed by `2M`
//! independent softmax heads of width `M`, one per `(state, action)` row.
//! Gradients are computed by hand.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Trajectory, TransitionKernel};
use crate::rng::Rng;

pub const DEFAULT_INPUT_DIM: usize = 16;
pub const DEFAULT_HIDDEN_DIM: usize = 64;
pub const DEFAULT_DROPOUT: f64 = 0.2;
const CHECKPOINT_FORMAT: &str = "rmab-predictor";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorModel {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_states: usize,
    pub dropout: f64,
    /// `[hidden][input]`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `[output][hidden]`, output laid out like a kernel `[s][a][s']`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Same shapes as the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl GradientSet {
    pub fn zeros_like(model: &PredictorModel) -> Self {
        GradientSet {
            w1: vec![0.0; model.w1.len()],
            b1: vec![0.0; model.b1.len()],
            w2: vec![0.0; model.w2.len()],
            b2: vec![0.0; model.b2.len()],
        }
    }

    fn parts(&self) -> [&Vec<f64>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn parts_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.parts_mut().into_iter().zip(other.parts()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for p in self.parts_mut() {
            p.iter_mut().for_each(|x| *x *= c);
        }
    }

    /// Flattened in the order `w1, b1, w2, b2`.
    pub fn flat(&self) -> Vec<f64> {
        self.parts().into_iter().flatten().copied().collect()
    }

    pub fn norm(&self) -> f64 {
        self.parts().into_iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.parts().into_iter().flatten().all(|x| x.is_finite())
    }
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    features: Vec<Vec<f64>>,
    /// Post-ReLU, post-dropout hidden activations per arm.
    hidden: Vec<Vec<f64>>,
    /// Dropout multipliers (0 or `1/(1−p)`); `None` at inference.
    masks: Option<Vec<Vec<f64>>>,
    pre_relu: Vec<Vec<f64>>,
    pub kernels: Vec<TransitionKernel>,
}

fn softmax_rows(logits: &mut [f64], width: usize) {
    for row in logits.chunks_mut(width) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        row.iter_mut().for_each(|x| *x /= total);
    }
}

impl PredictorModel {
    pub fn output_dim(&self) -> usize {
        self.num_states * 2 * self.num_states
    }

    /// All parameters zero: every predicted row is uniform.
    pub fn zeros(input_dim: usize, hidden_dim: usize, num_states: usize, dropout: f64) -> Self {
        let out = num_states * 2 * num_states;
        PredictorModel {
            input_dim,
            hidden_dim,
            num_states,
            dropout,
            w1: vec![0.0; hidden_dim * input_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; out * hidden_dim],
            b2: vec![0.0; out],
        }
    }

    /// Weights and biases uniform in `±1/√fan_in`.
    pub fn init(input_dim: usize, hidden_dim: usize, num_states: usize, dropout: f64, rng: &mut Rng) -> Self {
        let mut m = Self::zeros(input_dim, hidden_dim, num_states, dropout);
        let b1 = 1.0 / (input_dim as f64).sqrt();
        let b2 = 1.0 / (hidden_dim as f64).sqrt();
        m.w1.iter_mut().for_each(|w| *w = rng.uniform(-b1, b1));
        m.b1.iter_mut().for_each(|w| *w = rng.uniform(-b1, b1));
        m.w2.iter_mut().for_each(|w| *w = rng.uniform(-b2, b2));
        m.b2.iter_mut().for_each(|w| *w = rng.uniform(-b2, b2));
        m
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Flattened in the order `w1, b1, w2, b2`.
    pub fn flat_params(&self) -> Vec<f64> {
        [&self.w1, &self.b1, &self.w2, &self.b2].into_iter().flatten().copied().collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension {
                what: "flat parameters",
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        let mut rest = flat;
        for p in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            let (head, tail) = rest.split_at(p.len());
            p.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// `w ← w + step·g`.
    pub fn apply(&mut self, grad: &GradientSet, step: f64) {
        for (p, g) in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
            .into_iter()
            .zip(grad.parts())
        {
            p.iter_mut().zip(g).for_each(|(w, d)| *w += step * d);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flat_params().iter().all(|x| x.is_finite())
    }

    fn check_features(&self, features: &[Vec<f64>]) -> Result<()> {
        for f in features {
            if f.len() != self.input_dim {
                return Err(Error::Dimension {
                    what: "feature length",
                    expected: self.input_dim,
                    got: f.len(),
                });
            }
        }
        Ok(())
    }

    /// Forward pass. Dropout is applied only when `dropout_rng` is given.
    pub fn forward(&self, features: &[Vec<f64>], mut dropout_rng: Option<&mut Rng>) -> Result<ForwardCache> {
        self.check_features(features)?;
        let (h, d, m) = (self.hidden_dim, self.input_dim, self.num_states);
        let keep = 1.0 - self.dropout;
        let mut hidden = Vec::with_capacity(features.len());
        let mut pre_relu = Vec::with_capacity(features.len());
        let mut masks = dropout_rng.as_ref().map(|_| Vec::with_capacity(features.len()));
        let mut kernels = Vec::with_capacity(features.len());
        for x in features {
            let pre: Vec<f64> = (0..h)
                .map(|j| self.b1[j] + self.w1[j * d..(j + 1) * d].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
                .collect();
            let mut act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
            if let (Some(rng), Some(ms)) = (dropout_rng.as_deref_mut(), masks.as_mut()) {
                let mask: Vec<f64> = (0..h)
                    .map(|_| if rng.next_f64() < self.dropout { 0.0 } else { 1.0 / keep })
                    .collect();
                act.iter_mut().zip(&mask).for_each(|(a, k)| *a *= k);
                ms.push(mask);
            }
            let mut logits: Vec<f64> = (0..self.output_dim())
                .map(|o| self.b2[o] + self.w2[o * h..(o + 1) * h].iter().zip(&act).map(|(w, v)| w * v).sum::<f64>())
                .collect();
            softmax_rows(&mut logits, m);
            kernels.push(TransitionKernel::new_unchecked(m, logits)?);
            hidden.push(act);
            pre_relu.push(pre);
        }
        Ok(ForwardCache {
            features: features.to_vec(),
            hidden,
            masks,
            pre_relu,
            kernels,
        })
    }

    /// Deterministic inference (dropout off).
    pub fn predict(&self, features: &[Vec<f64>]) -> Result<Vec<TransitionKernel>> {
        Ok(self.forward(features, None)?.kernels)
    }

    /// Gradient of a scalar loss given `∂loss/∂P` per arm (flat
    /// `[s][a][s']`), through the cached forward pass.
    pub fn backprop_cached(&self, cache: &ForwardCache, upstream: &[Vec<f64>]) -> Result<GradientSet> {
        if upstream.len() != cache.kernels.len() {
            return Err(Error::Dimension {
                what: "upstream arms",
                expected: cache.kernels.len(),
                got: upstream.len(),
            });
        }
        let (h, d, m) = (self.hidden_dim, self.input_dim, self.num_states);
        let mut g = GradientSet::zeros_like(self);
        for (arm, up) in upstream.iter().enumerate() {
            if up.len() != self.output_dim() {
                return Err(Error::Dimension {
                    what: "upstream kernel entries",
                    expected: self.output_dim(),
                    got: up.len(),
                });
            }
            let probs = cache.kernels[arm].as_slice();
            // Softmax: ∂z_j = P_j (g_j − Σ_l P_l g_l), per row.
            let mut dlogit = vec![0.0; self.output_dim()];
            for ((dz, p), gu) in dlogit.chunks_mut(m).zip(probs.chunks(m)).zip(up.chunks(m)) {
                let mean: f64 = p.iter().zip(gu).map(|(a, b)| a * b).sum();
                for j in 0..m {
                    dz[j] = p[j] * (gu[j] - mean);
                }
            }
            let act = &cache.hidden[arm];
            let mut dact = vec![0.0; h];
            for (o, dz) in dlogit.iter().enumerate() {
                if *dz == 0.0 {
                    continue;
                }
                g.b2[o] += dz;
                let row = &mut g.w2[o * h..(o + 1) * h];
                for j in 0..h {
                    row[j] += dz * act[j];
                    dact[j] += dz * self.w2[o * h + j];
                }
            }
            let x = &cache.features[arm];
            for j in 0..h {
                let mut dpre = if cache.pre_relu[arm][j] > 0.0 { dact[j] } else { 0.0 };
                if let Some(masks) = &cache.masks {
                    dpre *= masks[arm][j];
                }
                if dpre == 0.0 {
                    continue;
                }
                g.b1[j] += dpre;
                for (w, v) in g.w1[j * d..(j + 1) * d].iter_mut().zip(x) {
                    *w += dpre * v;
                }
            }
        }
        Ok(g)
    }

    /// Gradient through a deterministic forward pass.
    pub fn backprop(&self, features: &[Vec<f64>], upstream: &[Vec<f64>]) -> Result<GradientSet> {
        let cache = self.forward(features, None)?;
        self.backprop_cached(&cache, upstream)
    }

    pub fn to_checkpoint_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Out<'a> {
            format: &'a str,
            version: u32,
            layers: [[usize; 2]; 2],
            model: &'a PredictorModel,
        }
        Ok(serde_json::to_string_pretty(&Out {
            format: CHECKPOINT_FORMAT,
            version: CHECKPOINT_VERSION,
            layers: [[self.hidden_dim, self.input_dim], [self.output_dim(), self.hidden_dim]],
            model: self,
        })?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct In {
            format: String,
            version: u32,
            model: PredictorModel,
        }
        let parsed: In = serde_json::from_str(text)?;
        if parsed.format != CHECKPOINT_FORMAT || parsed.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported checkpoint {} v{}",
                parsed.format, parsed.version
            )));
        }
        let m = parsed.model;
        let out = m.output_dim();
        let shapes = [
            (m.w1.len(), m.hidden_dim * m.input_dim, "w1"),
            (m.b1.len(), m.hidden_dim, "b1"),
            (m.w2.len(), out * m.hidden_dim, "w2"),
            (m.b2.len(), out, "b2"),
        ];
        for (got, expected, what) in shapes {
            if got != expected {
                return Err(Error::Dimension { what, expected, got });
            }
        }
        if !m.is_finite() || !(0.0..1.0).contains(&m.dropout) {
            return Err(Error::InvalidInput("checkpoint has non-finite weights or bad dropout".into()));
        }
        Ok(m)
    }
}

/// `−(1/|T|) Σ_τ Σ_t Σ_i log P_i(s_t, a_t, s_{t+1})` and its gradient
/// `−count/(|T|·P)` per kernel entry.
pub fn nll_loss(kernels: &[TransitionKernel], trajs: &[Trajectory]) -> Result<(f64, Vec<Vec<f64>>)> {
    if trajs.is_empty() {
        return Err(Error::InvalidInput("no trajectories".into()));
    }
    let m = kernels.first().map(|k| k.num_states()).unwrap_or(0);
    let mut counts: Vec<Vec<f64>> = kernels.iter().map(|k| vec![0.0; k.as_slice().len()]).collect();
    for tr in trajs {
        if tr.num_arms() != kernels.len() {
            return Err(Error::Dimension {
                what: "trajectory arms",
                expected: kernels.len(),
                got: tr.num_arms(),
            });
        }
        for t in 0..tr.horizon().saturating_sub(1) {
            for (i, c) in counts.iter_mut().enumerate() {
                let (s, a, next) = (tr.states[t][i], tr.actions[t][i] as usize, tr.states[t + 1][i]);
                if s >= m || next >= m || a > 1 {
                    return Err(Error::InvalidInput(format!("transition ({s}, {a}, {next}) out of range")));
                }
                c[(s * 2 + a) * m + next] += 1.0;
            }
        }
    }
    let nt = trajs.len() as f64;
    let mut loss = 0.0;
    let grads = kernels
        .iter()
        .zip(&counts)
        .map(|(k, c)| {
            k.as_slice()
                .iter()
                .zip(c)
                .map(|(&p, &n)| {
                    if n == 0.0 {
                        return 0.0;
                    }
                    loss -= n * p.ln() / nt;
                    -n / (nt * p)
                })
                .collect()
        })
        .collect();
    Ok((loss, grads))
}
