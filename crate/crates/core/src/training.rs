//! Two-stage and decision-focused training of the kernel predictor.
//!
//! The decision-focused gradient composes
//! `∂Eval/∂π · ∂π/∂W · ∂W/∂P · ∂P/∂w`: importance-sampled value, soft top-k
//! backward at every logged joint state, Whittle index Jacobians, and predictor
//! backprop. Steps are applied per training instance in dataset order.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belief::{belief_whittle_with, chain_gradient_to_underlying, expand_belief_chain, num_chain_states};
use crate::datagen::{Dataset, DatasetSpec, InstanceData, Observability};
use crate::error::{Error, Result};
use crate::model::{RewardVector, Trajectory, TransitionKernel};
use crate::policy::{
    cwpdis_eval_grad, cwpdis_eval_single_grad, empirical_kernels, simulate_eval, strict_policy, EvalWithGradient,
    Policy, PullProbs, SimulationSetup, StartStates,
};
use crate::predictor::{nll_loss, GradientSet, PredictorModel, DEFAULT_DROPOUT, DEFAULT_HIDDEN_DIM};
use crate::rng::Rng;
use crate::soft_topk::{soft_topk_backward, soft_topk_forward, SoftTopKConfig};
use crate::whittle::{whittle_table_for, SolverSettings, WhittleTable};
use crate::whittle_diff::whittle_jacobian_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    TwoStage,
    DfWhittle,
}

/// Importance-sampling estimator used as the training signal and for
/// reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSignal {
    #[default]
    Cwpdis,
    SingleTrajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub learning_rate: f64,
    pub soft_topk: SoftTopKConfig,
    /// Discount; the dataset's when absent.
    pub gamma: Option<f64>,
    pub seed: u64,
    pub eval_signal: EvalSignal,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub sim_episodes: usize,
    /// Metrics are logged at epoch 0, every `log_every` epochs, and at the
    /// last epoch.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::DfWhittle,
            epochs: 50,
            learning_rate: 0.01,
            soft_topk: SoftTopKConfig::default(),
            gamma: None,
            seed: 0,
            eval_signal: EvalSignal::Cwpdis,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            dropout: DEFAULT_DROPOUT,
            sim_episodes: 100,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidInput(format!("learning rate must be non-negative, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidInput(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.sim_episodes == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidInput("sim_episodes and hidden_dim must be positive".into()));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g < 1.0) {
                return Err(Error::InvalidInput(format!("gamma must lie in (0, 1), got {g}")));
            }
        }
        self.soft_topk.validate()
    }
}

/// Instance-level split, 70/10/20 after a seeded shuffle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidInput(format!("unknown split {s}"))),
        }
    }
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

pub fn split_instances(num_instances: usize, seed: u64) -> Splits {
    let mut idx: Vec<usize> = (0..num_instances).collect();
    Rng::new(seed).derive(u64::MAX).shuffle(&mut idx);
    let n = num_instances as f64;
    let mut train = (0.7 * n).round() as usize;
    let mut val = (0.1 * n).round() as usize;
    if num_instances > 0 && train == 0 {
        train = 1;
    }
    if train + val > num_instances {
        val = num_instances - train;
    }
    Splits {
        train: idx[..train].to_vec(),
        validation: idx[train..train + val].to_vec(),
        test: idx[train + val..].to_vec(),
    }
}

/// One RMAB instance as seen by a learner: features, logged trajectories and
/// the problem constants. True kernels are not part of it.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub features: &'a [Vec<f64>],
    pub trajectories: &'a [Trajectory],
    pub reward: &'a RewardVector,
    pub budget: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub observability: Observability,
}

impl<'a> Problem<'a> {
    pub fn from_instance(data: &'a InstanceData, spec: &DatasetSpec, gamma: Option<f64>) -> Self {
        Problem {
            features: &data.features,
            trajectories: &data.trajectories,
            reward: &data.instance.reward,
            budget: data.instance.budget,
            horizon: data.instance.horizon,
            gamma: gamma.unwrap_or(data.instance.discount),
            observability: spec.observability,
        }
    }

    pub fn num_arms(&self) -> usize {
        self.features.len()
    }

    pub fn observed_states(&self) -> usize {
        match self.observability {
            Observability::Full => self.reward.len(),
            Observability::Collapsing => num_chain_states(self.horizon),
        }
    }
}

/// Settings of the differentiable forward map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DfSettings {
    pub solver: SolverSettings,
    pub soft_topk: SoftTopKConfig,
    pub signal: EvalSignal,
}

impl DfSettings {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        DfSettings {
            solver: SolverSettings::default(),
            soft_topk: cfg.soft_topk,
            signal: cfg.eval_signal,
        }
    }
}

/// Indices over observed states and, optionally, their gradients with
/// respect to each arm's kernel entries.
#[derive(Debug, Clone)]
pub struct IndexModel {
    /// `[arm][observed state]`
    pub table: WhittleTable,
    /// `[arm][observed state][kernel entry]`
    pub jacobian: Option<Vec<Vec<Vec<f64>>>>,
}

pub fn index_model(
    kernels: &[TransitionKernel],
    problem: &Problem,
    solver: &SolverSettings,
    with_jacobian: bool,
) -> Result<IndexModel> {
    match problem.observability {
        Observability::Full => {
            let table = whittle_table_for(kernels, problem.reward, problem.gamma, solver)?;
            let jacobian = if with_jacobian {
                let jac = whittle_jacobian_for(kernels, problem.reward, problem.gamma, &table)?;
                Some(
                    jac.blocks
                        .into_iter()
                        .map(|arm| arm.into_iter().map(|g| g.kernel).collect())
                        .collect(),
                )
            } else {
                None
            };
            Ok(IndexModel { table, jacobian })
        }
        Observability::Collapsing => {
            let per_arm = kernels
                .par_iter()
                .enumerate()
                .map(|(i, k)| {
                    belief_whittle_with(k, problem.reward, problem.gamma, problem.horizon, solver).map_err(|e| e.for_arm(i))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut indices = Vec::with_capacity(per_arm.len());
            let mut jac = Vec::with_capacity(per_arm.len());
            for bw in per_arm {
                indices.push(bw.indices);
                jac.push(bw.jacobian);
            }
            Ok(IndexModel {
                table: WhittleTable::from_indices(indices),
                jacobian: with_jacobian.then_some(jac),
            })
        }
    }
}

fn is_estimate(probs: &PullProbs, trajs: &[Trajectory], gamma: f64, signal: EvalSignal) -> Result<EvalWithGradient> {
    if signal == EvalSignal::Cwpdis && trajs.len() >= 2 {
        return cwpdis_eval_grad(probs, trajs, gamma);
    }
    // Single-trajectory estimator, averaged over the available trajectories.
    let n = trajs.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(trajs.len());
    let mut weights = Vec::with_capacity(trajs.len());
    for (p, tr) in probs.iter().zip(trajs) {
        let mut r = cwpdis_eval_single_grad(p, tr, gamma)?;
        value += r.report.value / n;
        let mut g = r.grad.pop().unwrap_or_default();
        g.iter_mut().flatten().for_each(|x| *x /= n);
        grad.push(g);
        weights.append(&mut r.report.weights);
    }
    Ok(EvalWithGradient {
        report: crate::policy::EvalReport {
            variant: crate::policy::EvalVariant::SingleTrajectory,
            value,
            std_error: None,
            weights,
        },
        grad,
    })
}

fn check_finite(stage: &'static str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::NumericAbort {
            stage,
            detail: "non-finite value".into(),
        })
    }
}

/// Soft-policy IS value and its gradient with respect to the index table.
pub fn soft_value_and_index_gradient(
    table: &WhittleTable,
    problem: &Problem,
    settings: &DfSettings,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let trajs = problem.trajectories;
    let mut states = Vec::with_capacity(trajs.len());
    let mut probs: PullProbs = Vec::with_capacity(trajs.len());
    for tr in trajs {
        let mut per_t = Vec::with_capacity(tr.horizon());
        let mut p_t = Vec::with_capacity(tr.horizon());
        for joint in &tr.states {
            let st = soft_topk_forward(&table.gather(joint), problem.budget, &settings.soft_topk)?;
            p_t.push(st.probs.clone());
            per_t.push(st);
        }
        states.push(per_t);
        probs.push(p_t);
    }
    let eval = is_estimate(&probs, trajs, problem.gamma, settings.signal)?;
    check_finite("policy-eval", std::iter::once(eval.report.value))?;
    let mut w_bar: Vec<Vec<f64>> = table.indices.iter().map(|row| vec![0.0; row.len()]).collect();
    for ((tr, sts), g) in trajs.iter().zip(&states).zip(&eval.grad) {
        for ((joint, st), up) in tr.states.iter().zip(sts).zip(g) {
            let d = soft_topk_backward(st, up)?;
            for (i, (&s, di)) in joint.iter().zip(d).enumerate() {
                w_bar[i][s] += di;
            }
        }
    }
    check_finite("soft-topk", w_bar.iter().flatten().copied())?;
    Ok((eval.report.value, w_bar))
}

/// Soft-policy IS value of the model's predictions (no dropout).
pub fn df_objective(model: &PredictorModel, problem: &Problem, settings: &DfSettings) -> Result<f64> {
    let kernels = model.predict(problem.features)?;
    let im = index_model(&kernels, problem, &settings.solver, false)?;
    Ok(soft_value_and_index_gradient(&im.table, problem, settings)?.0)
}

/// Value and gradient of the decision-focused objective with respect to the
/// predictor weights. Dropout is applied when `dropout_rng` is given.
pub fn df_gradient(
    model: &PredictorModel,
    problem: &Problem,
    settings: &DfSettings,
    dropout_rng: Option<&mut Rng>,
) -> Result<(f64, GradientSet)> {
    let cache = model.forward(problem.features, dropout_rng)?;
    check_finite("predict", cache.kernels.iter().flat_map(|k| k.as_slice().iter().copied()))?;
    let im = index_model(&cache.kernels, problem, &settings.solver, true)?;
    check_finite("whittle", im.table.indices.iter().flatten().copied())?;
    let (value, w_bar) = soft_value_and_index_gradient(&im.table, problem, settings)?;
    let jac = im.jacobian.expect("requested");
    let upstream: Vec<Vec<f64>> = jac
        .iter()
        .zip(&w_bar)
        .map(|(arm_jac, arm_bar)| {
            let mut out = vec![0.0; arm_jac.first().map(|g| g.len()).unwrap_or(0)];
            for (g, &b) in arm_jac.iter().zip(arm_bar) {
                if b != 0.0 {
                    out.iter_mut().zip(g).for_each(|(o, x)| *o += b * x);
                }
            }
            out
        })
        .collect();
    check_finite("whittle-diff", upstream.iter().flatten().copied())?;
    let grad = model.backprop_cached(&cache, &upstream)?;
    if !grad.is_finite() {
        return Err(Error::NumericAbort {
            stage: "backprop",
            detail: "non-finite weight gradient".into(),
        });
    }
    Ok((value, grad))
}

/// Kernels over the states recorded in trajectories: the predicted kernels
/// themselves, or their belief chains for collapsing arms.
fn observed_kernels(kernels: &[TransitionKernel], problem: &Problem) -> Result<Vec<TransitionKernel>> {
    match problem.observability {
        Observability::Full => Ok(kernels.to_vec()),
        Observability::Collapsing => kernels
            .iter()
            .map(|k| Ok(expand_belief_chain(k, problem.reward, problem.horizon)?.kernel))
            .collect(),
    }
}

/// Likelihood loss of the logged transitions and its gradient with respect to
/// the predicted (underlying) kernels.
pub fn predictive_loss(kernels: &[TransitionKernel], problem: &Problem) -> Result<(f64, Vec<Vec<f64>>)> {
    let observed = observed_kernels(kernels, problem)?;
    let (loss, grads) = nll_loss(&observed, problem.trajectories)?;
    let grads = match problem.observability {
        Observability::Full => grads,
        Observability::Collapsing => {
            let zeros = vec![0.0; num_chain_states(problem.horizon)];
            kernels
                .iter()
                .zip(&grads)
                .map(|(k, g)| chain_gradient_to_underlying(k, problem.reward, problem.horizon, g, &zeros))
                .collect()
        }
    };
    Ok((loss, grads))
}

fn two_stage_step(model: &mut PredictorModel, problem: &Problem, lr: f64, rng: &mut Rng) -> Result<()> {
    let cache = model.forward(problem.features, Some(rng))?;
    let (loss, upstream) = predictive_loss(&cache.kernels, problem)?;
    check_finite("nll", std::iter::once(loss))?;
    let grad = model.backprop_cached(&cache, &upstream)?;
    if !grad.is_finite() {
        return Err(Error::NumericAbort {
            stage: "backprop",
            detail: "non-finite weight gradient".into(),
        });
    }
    model.apply(&grad, -lr);
    Ok(())
}

fn df_step(model: &mut PredictorModel, problem: &Problem, settings: &DfSettings, lr: f64, rng: &mut Rng) -> Result<()> {
    let (_, grad) = df_gradient(model, problem, settings, Some(rng))?;
    model.apply(&grad, lr);
    Ok(())
}

/// Where evaluated policies get their kernels.
#[derive(Debug, Clone, Copy)]
pub enum KernelSource<'a> {
    Model(&'a PredictorModel),
    /// The true kernels of the instance, bypassing the predictor.
    Truth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Metrics {
    pub nll: f64,
    /// Strict (top-k) policy, importance sampled.
    pub is_eval: f64,
    /// Soft policy, importance sampled (the training signal).
    pub soft_is_eval: f64,
    /// Strict policy simulated on kernels estimated from the trajectories.
    pub sim_eval: f64,
    pub sim_std_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub settings: DfSettings,
    pub sim_episodes: usize,
    pub seed: u64,
    pub gamma: Option<f64>,
}

impl EvalConfig {
    pub fn from_train(cfg: &TrainConfig) -> Self {
        EvalConfig {
            settings: DfSettings::from_config(cfg),
            sim_episodes: cfg.sim_episodes,
            seed: cfg.seed,
            gamma: cfg.gamma,
        }
    }
}

/// Per-state mean of the logged rewards; the model's reward where a state
/// was never visited.
fn empirical_rewards(trajs: &[Trajectory], num_states: usize, fallback: &[f64]) -> RewardVector {
    let mut sum = vec![0.0; num_states];
    let mut count = vec![0.0; num_states];
    for tr in trajs {
        for (states, rewards) in tr.states.iter().zip(&tr.rewards) {
            for (&s, &r) in states.iter().zip(rewards) {
                sum[s] += r;
                count[s] += 1.0;
            }
        }
    }
    RewardVector(
        (0..num_states)
            .map(|s| if count[s] > 0.0 { sum[s] / count[s] } else { fallback.get(s).copied().unwrap_or(0.0) })
            .collect(),
    )
}

/// The simulator built from an instance's logged trajectories: empirical
/// kernels and rewards over observed states, starting from a uniformly drawn
/// logged initial joint state.
#[derive(Debug, Clone)]
pub struct EmpiricalSimulator {
    pub kernels: Vec<TransitionKernel>,
    pub reward: RewardVector,
    pub starts: Vec<Vec<usize>>,
}

impl EmpiricalSimulator {
    pub fn build(problem: &Problem) -> Result<Self> {
        let m = problem.observed_states();
        let fallback: Vec<f64> = match problem.observability {
            Observability::Full => problem.reward.values().to_vec(),
            Observability::Collapsing => vec![0.0; m],
        };
        Ok(EmpiricalSimulator {
            kernels: empirical_kernels(problem.trajectories, problem.num_arms(), m)?.kernels,
            reward: empirical_rewards(problem.trajectories, m, &fallback),
            starts: problem.trajectories.iter().filter_map(|t| t.states.first().cloned()).collect(),
        })
    }

    pub fn run(&self, problem: &Problem, policy: &Policy, episodes: usize, rng: &Rng) -> Result<crate::policy::EvalReport> {
        let setup = SimulationSetup {
            kernels: &self.kernels,
            reward: &self.reward,
            budget: problem.budget,
            horizon: problem.horizon,
            gamma: problem.gamma,
            start: StartStates::Logged(self.starts.clone()),
        };
        simulate_eval(&setup, policy, episodes, rng)
    }
}

/// Metrics of one instance; never mutates anything.
pub fn evaluate_instance(source: KernelSource, data: &InstanceData, spec: &DatasetSpec, cfg: &EvalConfig, instance: usize) -> Result<Metrics> {
    let problem = Problem::from_instance(data, spec, cfg.gamma);
    let kernels = match source {
        KernelSource::Model(m) => m.predict(problem.features).map_err(|e| e.in_stage("predict", instance))?,
        KernelSource::Truth => data.instance.arms.clone(),
    };
    let (nll, _) = predictive_loss(&kernels, &problem).map_err(|e| e.in_stage("nll", instance))?;
    let im = index_model(&kernels, &problem, &cfg.settings.solver, false).map_err(|e| e.in_stage("whittle", instance))?;
    let strict: PullProbs = problem
        .trajectories
        .iter()
        .map(|tr| tr.states.iter().map(|s| strict_policy(&im.table, s, problem.budget).pull_probs).collect())
        .collect();
    let is_eval = is_estimate(&strict, problem.trajectories, problem.gamma, cfg.settings.signal)
        .map_err(|e| e.in_stage("policy-eval", instance))?
        .report
        .value;
    let (soft_is_eval, _) =
        soft_value_and_index_gradient(&im.table, &problem, &cfg.settings).map_err(|e| e.in_stage("policy-eval", instance))?;
    let sim = EmpiricalSimulator::build(&problem)
        .and_then(|s| s.run(&problem, &Policy::Strict(&im.table), cfg.sim_episodes, &Rng::new(cfg.seed).derive(instance as u64)))
        .map_err(|e| e.in_stage("simulate", instance))?;
    let m = Metrics {
        nll,
        is_eval,
        soft_is_eval,
        sim_eval: sim.value,
        sim_std_error: sim.std_error.unwrap_or(0.0),
    };
    check_finite("evaluate", [m.nll, m.is_eval, m.soft_is_eval, m.sim_eval]).map_err(|e| e.in_stage("evaluate", instance))?;
    Ok(m)
}

/// IS and simulation values of a fixed baseline policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineMetrics {
    pub is_eval: f64,
    pub sim_eval: f64,
    pub sim_std_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    NoAction,
    Random,
}

pub fn evaluate_baseline(baseline: Baseline, data: &InstanceData, spec: &DatasetSpec, cfg: &EvalConfig, instance: usize) -> Result<BaselineMetrics> {
    let problem = Problem::from_instance(data, spec, cfg.gamma);
    let pull = match baseline {
        Baseline::NoAction => 0.0,
        Baseline::Random => problem.budget as f64 / problem.num_arms() as f64,
    };
    let probs: PullProbs = problem
        .trajectories
        .iter()
        .map(|tr| vec![vec![pull; problem.num_arms()]; tr.horizon()])
        .collect();
    let is_eval = is_estimate(&probs, problem.trajectories, problem.gamma, cfg.settings.signal)
        .map_err(|e| e.in_stage("policy-eval", instance))?
        .report
        .value;
    let policy = match baseline {
        Baseline::NoAction => Policy::NoAction,
        Baseline::Random => Policy::Random,
    };
    let sim = EmpiricalSimulator::build(&problem)
        .and_then(|s| s.run(&problem, &policy, cfg.sim_episodes, &Rng::new(cfg.seed).derive(instance as u64)))
        .map_err(|e| e.in_stage("simulate", instance))?;
    Ok(BaselineMetrics {
        is_eval,
        sim_eval: sim.value,
        sim_std_error: sim.std_error.unwrap_or(0.0),
    })
}

/// Mean metrics over the given instances, evaluated in parallel.
pub fn evaluate_model(source: KernelSource, data: &Dataset, instances: &[usize], cfg: &EvalConfig) -> Result<Vec<Metrics>> {
    instances
        .par_iter()
        .map(|&j| evaluate_instance(source, &data.instances[j], &data.spec, cfg, j))
        .collect()
}

pub fn mean_metrics(ms: &[Metrics]) -> Metrics {
    if ms.is_empty() {
        return Metrics::default();
    }
    let n = ms.len() as f64;
    let mut out = Metrics::default();
    for m in ms {
        out.nll += m.nll / n;
        out.is_eval += m.is_eval / n;
        out.soft_is_eval += m.soft_is_eval / n;
        out.sim_eval += m.sim_eval / n;
        out.sim_std_error += m.sim_std_error.powi(2);
    }
    out.sim_std_error = out.sim_std_error.sqrt() / n;
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: Split,
    pub nll: f64,
    pub is_eval: f64,
    pub sim_eval: f64,
    pub ms_per_step: f64,
    pub soft_is_eval: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

pub const CSV_HEADER: &str = "epoch,split,nll,is_eval,sim_eval,ms_per_step,soft_is_eval";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch,
                r.split.name(),
                r.nll,
                r.is_eval,
                r.sim_eval,
                r.ms_per_step,
                r.soft_is_eval
            ));
        }
        out
    }

    pub fn row(&self, epoch: usize, split: Split) -> Option<&LogRow> {
        self.rows.iter().find(|r| r.epoch == epoch && r.split == split)
    }

    pub fn last_epoch(&self) -> usize {
        self.rows.iter().map(|r| r.epoch).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PredictorModel,
    /// Checkpoint with the best validation metric (NLL for two-stage, strict
    /// IS value for DF-Whittle).
    pub best_model: PredictorModel,
    pub best_epoch: usize,
    pub splits: Splits,
    pub log: TrainLog,
}

impl TrainOutcome {
    pub fn summary_json(&self, cfg: &TrainConfig) -> Result<String> {
        #[derive(Serialize)]
        struct Summary<'a> {
            method: Method,
            epochs: usize,
            learning_rate: f64,
            seed: u64,
            best_epoch: usize,
            splits: &'a Splits,
            final_metrics: Vec<&'a LogRow>,
            best_metrics: Vec<&'a LogRow>,
        }
        let last = self.log.last_epoch();
        let pick = |e: usize| self.log.rows.iter().filter(|r| r.epoch == e).collect::<Vec<_>>();
        Ok(serde_json::to_string_pretty(&Summary {
            method: cfg.method,
            epochs: cfg.epochs,
            learning_rate: cfg.learning_rate,
            seed: cfg.seed,
            best_epoch: self.best_epoch,
            splits: &self.splits,
            final_metrics: pick(last),
            best_metrics: pick(self.best_epoch),
        })?)
    }
}

pub fn init_model(data: &Dataset, cfg: &TrainConfig) -> PredictorModel {
    PredictorModel::init(
        data.spec.feature_dim,
        cfg.hidden_dim,
        data.spec.states,
        cfg.dropout,
        &mut Rng::new(cfg.seed).derive(u64::MAX - 1),
    )
}

pub fn train_two_stage(data: &Dataset, model: PredictorModel, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train(data, model, &TrainConfig { method: Method::TwoStage, ..cfg.clone() })
}

pub fn train_df_whittle(data: &Dataset, model: PredictorModel, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train(data, model, &TrainConfig { method: Method::DfWhittle, ..cfg.clone() })
}

/// Runs `cfg.method` for `cfg.epochs` epochs.
pub fn train(data: &Dataset, mut model: PredictorModel, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.input_dim != data.spec.feature_dim || model.num_states != data.spec.states {
        return Err(Error::InvalidInput("model dimensions do not match the dataset".into()));
    }
    let splits = split_instances(data.instances.len(), cfg.seed);
    let eval_cfg = EvalConfig::from_train(cfg);
    let settings = DfSettings::from_config(cfg);
    let root = Rng::new(cfg.seed);
    let mut log = TrainLog::default();
    let mut best_model = model.clone();
    let mut best_epoch = 0;
    let mut best_score = f64::NEG_INFINITY;

    let mut record = |epoch: usize, model: &PredictorModel, ms: f64, log: &mut TrainLog| -> Result<()> {
        for split in Split::ALL {
            let ms_split = mean_metrics(&evaluate_model(KernelSource::Model(model), data, splits.get(split), &eval_cfg)?);
            log.rows.push(LogRow {
                epoch,
                split,
                nll: ms_split.nll,
                is_eval: ms_split.is_eval,
                sim_eval: ms_split.sim_eval,
                ms_per_step: ms,
                soft_is_eval: ms_split.soft_is_eval,
            });
            if split == Split::Validation && !splits.validation.is_empty() {
                let score = match cfg.method {
                    Method::TwoStage => -ms_split.nll,
                    Method::DfWhittle => ms_split.is_eval,
                };
                if score > best_score {
                    best_score = score;
                    best_epoch = epoch;
                    best_model = model.clone();
                }
            }
        }
        Ok(())
    };

    record(0, &model, 0.0, &mut log)?;
    for epoch in 1..=cfg.epochs {
        let mut elapsed = 0.0;
        for &j in &splits.train {
            let inst = &data.instances[j];
            let problem = Problem::from_instance(inst, &data.spec, cfg.gamma);
            let mut rng = root.derive(((epoch as u64) << 32) | j as u64);
            let start = Instant::now();
            match cfg.method {
                Method::TwoStage => two_stage_step(&mut model, &problem, cfg.learning_rate, &mut rng),
                Method::DfWhittle => df_step(&mut model, &problem, &settings, cfg.learning_rate, &mut rng),
            }
            .map_err(|e| e.in_stage("train-step", j))?;
            elapsed += start.elapsed().as_secs_f64() * 1e3;
            if !model.is_finite() {
                return Err(Error::NumericAbort {
                    stage: "update",
                    detail: format!("non-finite weights after instance {j}, epoch {epoch}"),
                }
                .in_stage("train-step", j));
            }
        }
        let ms = if splits.train.is_empty() { 0.0 } else { elapsed / splits.train.len() as f64 };
        if epoch == cfg.epochs || (cfg.log_every > 0 && epoch % cfg.log_every == 0) {
            record(epoch, &model, ms, &mut log)?;
        }
    }
    if splits.validation.is_empty() {
        best_model = model.clone();
        best_epoch = cfg.epochs;
    }
    Ok(TrainOutcome {
        model,
        best_model,
        best_epoch,
        splits,
        log,
    })
}
