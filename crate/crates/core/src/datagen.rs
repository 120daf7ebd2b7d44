//! Synthetic datasets: random kernels in which pulling is strictly better,
//! features produced by a frozen random network, and rollouts of a
//! uniform-random budget-feasible behavior policy.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::belief::{chain_index, num_chain_states};
use crate::error::{Error, Result};
use crate::model::{
    instance_from_json, instance_to_json, validate_instance, validate_trajectory, RewardVector, RmabInstance, Trajectory,
    TransitionKernel, ACTIVE, PASSIVE,
};
use crate::rng::Rng;

pub const DOMINANCE_MARGIN: f64 = 1e-3;
pub const MAX_REJECTIONS: usize = 10_000;
pub const FEATURE_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Observability {
    #[default]
    Full,
    /// 2-state arms observed only when pulled; trajectories record belief
    /// chain states.
    Collapsing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub num_instances: usize,
    pub arms: usize,
    pub states: usize,
    pub budget: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub trajectories: usize,
    pub feature_dim: usize,
    pub seed: u64,
    pub observability: Observability,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_instances: 20,
            arms: 100,
            states: 2,
            budget: 20,
            horizon: 10,
            gamma: 0.99,
            trajectories: 10,
            feature_dim: 16,
            seed: 0,
            observability: Observability::Full,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_instances", self.num_instances),
            ("arms", self.arms),
            ("budget", self.budget),
            ("horizon", self.horizon),
            ("trajectories", self.trajectories),
            ("feature_dim", self.feature_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidInput(format!("{name} must be positive")));
            }
        }
        if self.states < 2 {
            return Err(Error::InvalidInput("states must be at least 2".into()));
        }
        if self.budget > self.arms {
            return Err(Error::InvalidInput("budget exceeds arms".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidInput(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if self.observability == Observability::Collapsing && self.states != 2 {
            return Err(Error::CollapsingStates(self.states));
        }
        Ok(())
    }

    /// Number of states the logged trajectories range over.
    pub fn observed_states(&self) -> usize {
        match self.observability {
            Observability::Full => self.states,
            Observability::Collapsing => num_chain_states(self.horizon),
        }
    }
}

fn expected(row: &[f64], reward: &[f64]) -> f64 {
    row.iter().zip(reward).map(|(p, r)| p * r).sum()
}

/// `N` kernels with Dirichlet(1) rows, rejection-sampled per state until the
/// active row's expected next reward beats the passive one by the margin.
pub fn generate_kernels(spec: &DatasetSpec, reward: &RewardVector, rng: &mut Rng) -> Result<Vec<TransitionKernel>> {
    let m = spec.states;
    (0..spec.arms)
        .map(|_| {
            let mut passive = Vec::with_capacity(m);
            let mut active = Vec::with_capacity(m);
            for s in 0..m {
                let mut attempts = 0;
                loop {
                    if attempts == MAX_REJECTIONS {
                        return Err(Error::RejectionExhausted { state: s, attempts });
                    }
                    attempts += 1;
                    let p0 = rng.simplex(m);
                    let p1 = rng.simplex(m);
                    if expected(&p1, reward.values()) > expected(&p0, reward.values()) + DOMINANCE_MARGIN {
                        passive.push(p0);
                        active.push(p1);
                        break;
                    }
                }
            }
            TransitionKernel::from_matrices(&passive, &active)
        })
        .collect()
}

/// Whether every state of `kernel` satisfies the dominance constraint.
pub fn satisfies_dominance(kernel: &TransitionKernel, reward: &RewardVector) -> bool {
    (0..kernel.num_states()).all(|s| {
        expected(kernel.row(s, ACTIVE), reward.values()) > expected(kernel.row(s, PASSIVE), reward.values()) + DOMINANCE_MARGIN
    })
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    inputs: usize,
    outputs: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    fn random(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Dense {
            inputs,
            outputs,
            weights: (0..inputs * outputs).map(|_| rng.uniform(-bound, bound)).collect(),
            bias: (0..outputs).map(|_| rng.uniform(-bound, bound)).collect(),
        }
    }

    fn apply(&self, x: &[f64], relu: bool) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let v = self.bias[o]
                    + self.weights[o * self.inputs..(o + 1) * self.inputs]
                        .iter()
                        .zip(x)
                        .map(|(w, v)| w * v)
                        .sum::<f64>();
                if relu {
                    v.max(0.0)
                } else {
                    v
                }
            })
            .collect()
    }
}

/// Frozen `(M·2·M) → 64 → 64 → feature_dim` network with ReLU hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNetwork {
    layers: [Dense; 3],
}

impl FeatureNetwork {
    pub fn random(num_states: usize, feature_dim: usize, rng: &mut Rng) -> Self {
        let input = num_states * 2 * num_states;
        FeatureNetwork {
            layers: [
                Dense::random(input, FEATURE_HIDDEN, rng),
                Dense::random(FEATURE_HIDDEN, FEATURE_HIDDEN, rng),
                Dense::random(FEATURE_HIDDEN, feature_dim, rng),
            ],
        }
    }

    /// All weights zero; the output is the final bias.
    pub fn with_zero_weights(mut self) -> Self {
        for l in self.layers.iter_mut() {
            l.weights.iter_mut().for_each(|w| *w = 0.0);
        }
        self
    }

    pub fn output_bias(&self) -> &[f64] {
        &self.layers[2].bias
    }

    pub fn apply(&self, kernel: &TransitionKernel) -> Vec<f64> {
        let h1 = self.layers[0].apply(kernel.as_slice(), true);
        let h2 = self.layers[1].apply(&h1, true);
        self.layers[2].apply(&h2, false)
    }
}

/// Draws a network from `rng` and applies it to every kernel.
pub fn generate_features(kernels: &[TransitionKernel], feature_dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let m = kernels.first().map(|k| k.num_states()).unwrap_or(2);
    let net = FeatureNetwork::random(m, feature_dim, rng);
    kernels.iter().map(|k| net.apply(k)).collect()
}

fn behavior_probs(pulled: &[bool], k: usize) -> Vec<f64> {
    let p = k as f64 / pulled.len() as f64;
    pulled.iter().map(|&a| if a { p } else { 1.0 - p }).collect()
}

fn sample_actions(n: usize, k: usize, rng: &mut Rng) -> Vec<bool> {
    let mut pulled = vec![false; n];
    for i in rng.subset(n, k) {
        pulled[i] = true;
    }
    pulled
}

/// Fully observed rollouts of the uniform `K`-subset behavior policy.
pub fn rollout_behavior(inst: &RmabInstance, num_trajectories: usize, rng: &mut Rng) -> Vec<Trajectory> {
    let (n, m, k) = (inst.num_arms(), inst.num_states(), inst.budget);
    let r = inst.reward.values();
    (0..num_trajectories)
        .map(|_| {
            let mut state: Vec<usize> = (0..n).map(|_| rng.below(m)).collect();
            let mut traj = Trajectory {
                states: vec![],
                actions: vec![],
                rewards: vec![],
                behavior_probs: vec![],
            };
            for _ in 0..inst.horizon {
                let pulled = sample_actions(n, k, rng);
                traj.states.push(state.clone());
                traj.rewards.push(state.iter().map(|&s| r[s]).collect());
                traj.actions.push(pulled.iter().map(|&a| a as u8).collect());
                traj.behavior_probs.push(behavior_probs(&pulled, k));
                for i in 0..n {
                    let row = inst.arms[i].row(state[i], pulled[i] as usize);
                    state[i] = rng.weighted(row).unwrap_or(state[i]);
                }
            }
            traj
        })
        .collect()
}

/// Collapsing rollouts. States are belief chain indices `(ω, d)`; rewards are
/// those of the hidden states. Each arm's state is observed at the start.
pub fn rollout_collapsing(inst: &RmabInstance, num_trajectories: usize, rng: &mut Rng) -> Result<Vec<Trajectory>> {
    if inst.num_states() != 2 {
        return Err(Error::CollapsingStates(inst.num_states()));
    }
    let (n, k, horizon) = (inst.num_arms(), inst.budget, inst.horizon);
    let r = inst.reward.values();
    Ok((0..num_trajectories)
        .map(|_| {
            let mut hidden: Vec<usize> = (0..n).map(|_| rng.below(2)).collect();
            let mut belief: Vec<(usize, usize)> = hidden.iter().map(|&s| (s, 0)).collect();
            let mut traj = Trajectory {
                states: vec![],
                actions: vec![],
                rewards: vec![],
                behavior_probs: vec![],
            };
            for _ in 0..horizon {
                let pulled = sample_actions(n, k, rng);
                traj.states.push(belief.iter().map(|&(w, d)| chain_index(w, d, horizon)).collect());
                traj.rewards.push(hidden.iter().map(|&s| r[s]).collect());
                traj.actions.push(pulled.iter().map(|&a| a as u8).collect());
                traj.behavior_probs.push(behavior_probs(&pulled, k));
                for i in 0..n {
                    let row = inst.arms[i].row(hidden[i], pulled[i] as usize);
                    hidden[i] = rng.weighted(row).unwrap_or(hidden[i]);
                    belief[i] = if pulled[i] {
                        (hidden[i], 0)
                    } else {
                        (belief[i].0, (belief[i].1 + 1).min(horizon))
                    };
                }
            }
            traj
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceData {
    /// True kernels (hidden from learners).
    pub instance: RmabInstance,
    pub features: Vec<Vec<f64>>,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub instances: Vec<InstanceData>,
}

/// The feature network is drawn once from stream 0 of the seed; instance `j`
/// uses stream `j + 1`, so instances can be generated in parallel.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let net = FeatureNetwork::random(spec.states, spec.feature_dim, &mut root.derive(0));
    let reward = RewardVector::ladder(spec.states);
    let instances = (0..spec.num_instances)
        .into_par_iter()
        .map(|j| {
            let mut rng = root.derive(j as u64 + 1);
            let arms = generate_kernels(spec, &reward, &mut rng)?;
            let instance = RmabInstance {
                arms,
                reward: reward.clone(),
                budget: spec.budget,
                horizon: spec.horizon,
                discount: spec.gamma,
            };
            let violations = validate_instance(&instance);
            if let Some(v) = violations.first() {
                return Err(Error::InvalidInput(format!("generated instance {j} invalid: {v}")));
            }
            let features = instance.arms.iter().map(|k| net.apply(k)).collect();
            let trajectories = match spec.observability {
                Observability::Full => rollout_behavior(&instance, spec.trajectories, &mut rng),
                Observability::Collapsing => rollout_collapsing(&instance, spec.trajectories, &mut rng)?,
            };
            Ok(InstanceData {
                instance,
                features,
                trajectories,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        instances,
    })
}

fn dataset_files(num_instances: usize) -> Vec<String> {
    let mut files = vec!["spec.json".to_string()];
    for k in 0..num_instances {
        files.push(format!("instance_{k}.json"));
        files.push(format!("features_{k}.json"));
        files.push(format!("trajectories_{k}.json"));
    }
    files
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("spec.json"), serde_json::to_string_pretty(&data.spec)?)?;
    for (k, inst) in data.instances.iter().enumerate() {
        fs::write(dir.join(format!("instance_{k}.json")), instance_to_json(&inst.instance)?)?;
        fs::write(dir.join(format!("features_{k}.json")), serde_json::to_string(&inst.features)?)?;
        fs::write(dir.join(format!("trajectories_{k}.json")), serde_json::to_string(&inst.trajectories)?)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let spec: DatasetSpec = serde_json::from_str(&fs::read_to_string(dir.join("spec.json"))?)?;
    spec.validate()?;
    let observed = spec.observed_states();
    let mut instances = Vec::with_capacity(spec.num_instances);
    for k in 0..spec.num_instances {
        let instance = instance_from_json(&fs::read_to_string(dir.join(format!("instance_{k}.json")))?)?;
        let features: Vec<Vec<f64>> = serde_json::from_str(&fs::read_to_string(dir.join(format!("features_{k}.json")))?)?;
        let trajectories: Vec<Trajectory> =
            serde_json::from_str(&fs::read_to_string(dir.join(format!("trajectories_{k}.json")))?)?;
        if features.len() != instance.num_arms() {
            return Err(Error::Dimension {
                what: "feature vectors",
                expected: instance.num_arms(),
                got: features.len(),
            });
        }
        if features.iter().any(|f| f.len() != spec.feature_dim) {
            return Err(Error::InvalidInput(format!("instance {k}: feature length differs from {}", spec.feature_dim)));
        }
        for (j, tr) in trajectories.iter().enumerate() {
            let check_rewards = spec.observability == Observability::Full;
            if let Some(v) = validate_trajectory(tr, observed, instance.budget, &instance.reward, check_rewards).first() {
                return Err(Error::InvalidInput(format!("instance {k}, trajectory {j}: {v}")));
            }
        }
        instances.push(InstanceData {
            instance,
            features,
            trajectories,
        });
    }
    Ok(Dataset { spec, instances })
}

/// SHA-256 over the dataset files in canonical order, hex encoded.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let spec: DatasetSpec = serde_json::from_str(&fs::read_to_string(dir.join("spec.json"))?)?;
    let mut hasher = Sha256::new();
    for name in dataset_files(spec.num_instances) {
        let bytes = fs::read(dir.join(&name))?;
        hasher.update(name.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Hash of the in-memory dataset via its serialized files.
pub fn dataset_fingerprint(data: &Dataset) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_string_pretty(&data.spec)?.as_bytes());
    for inst in &data.instances {
        hasher.update(instance_to_json(&inst.instance)?.as_bytes());
        hasher.update(serde_json::to_string(&inst.features)?.as_bytes());
        hasher.update(serde_json::to_string(&inst.trajectories)?.as_bytes());
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
