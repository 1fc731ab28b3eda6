//! Preference-learning and REINFORCE training of the policy.
//!
//! Each step draws `B` subproblems (an instance plus a weight vector),
//! samples `K` solutions per subproblem from one shared encoding and turns
//! them into a loss:
//!
//! * PL: every pair with distinct scalarized values is oriented so that the
//!   better solution wins, and the Bradley-Terry loss
//!   `-log sigmoid(beta * (avg_ll(winner) - avg_ll(loser)))` is applied.
//! * REINFORCE: rewards minus their per-subproblem mean weight the
//!   log-likelihoods.
//!
//! Labels and advantages are constants for differentiation. Losses are
//! averaged over subproblems.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::decomposition::{das_dennis_weights, reward, scalarize_objective, ScalarizationConfig, WeightVector};
use crate::error::{invalid, Error, Result};
use crate::inference::{instance_hv, FrontOptions};
use crate::math;
use crate::model::{Decoding, ModelConfig, PolicyParams, TracedTrajectory};
use crate::pareto::HvFrame;
use crate::problems::{generate, Instance, Problem};
use crate::rng::{derive_seed, rng_from_seed, stream_rng, Rng, Stream};
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "PL")]
    Pl,
    #[serde(rename = "REINFORCE")]
    Reinforce,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Pl => "PL",
            Algorithm::Reinforce => "REINFORCE",
        }
    }
}

impl core::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

impl core::str::FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "PL" | "pl" => Ok(Algorithm::Pl),
            "REINFORCE" | "reinforce" => Ok(Algorithm::Reinforce),
            _ => Err(invalid!("unknown algorithm {s:?}")),
        }
    }
}

/// Default Bradley-Terry temperature for `kappa` objectives.
pub fn default_beta(kappa: usize) -> f64 {
    if kappa >= 3 {
        4.5
    } else {
        3.5
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub problem: Problem,
    pub n: usize,
    pub kappa: usize,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub samples_per_subproblem: usize,
    pub beta: f64,
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub scalarization: ScalarizationConfig,
    /// Validate every this many steps (and at steps 0 and `steps`).
    pub validation_every: usize,
    pub validation_instances: usize,
    /// Lattice resolution of the validation weights.
    pub validation_h: usize,
    /// Gradient variance is logged for the first this many steps and at
    /// every validation step.
    #[serde(default = "default_variance_batches")]
    pub variance_batches: usize,
}

fn default_variance_batches() -> usize {
    5
}

impl TrainConfig {
    /// Small single-core setup.
    pub fn desk(problem: Problem, n: usize, kappa: usize, algorithm: Algorithm, seed: u64, steps: usize) -> Self {
        TrainConfig {
            problem,
            n,
            kappa,
            algorithm,
            seed,
            steps,
            batch: 16,
            samples_per_subproblem: 2,
            beta: default_beta(kappa),
            model: ModelConfig::desk(problem, kappa),
            optimizer: AdamConfig::default(),
            scalarization: ScalarizationConfig::weighted_sum(kappa),
            validation_every: 50,
            validation_instances: 64,
            validation_h: if kappa == 2 { 10 } else { 4 },
            variance_batches: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.problem != self.problem || self.model.kappa != self.kappa {
            return Err(invalid!("model config is for {} kappa {}", self.model.problem, self.model.kappa));
        }
        if self.batch == 0 || self.validation_every == 0 || self.validation_instances == 0 || self.validation_h == 0 {
            return Err(invalid!("batch, validation_every, validation_instances and validation_h must be positive"));
        }
        if self.samples_per_subproblem < 2 {
            return Err(invalid!("samples_per_subproblem must be at least 2"));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(invalid!("beta must be positive, got {}", self.beta));
        }
        if self.scalarization.ideal.len() != self.kappa {
            return Err(invalid!("ideal point must have {} components", self.kappa));
        }
        if HvFrame::reference(self.problem, self.kappa, self.n).is_none() {
            return Err(Error::Unsupported(format!("no HV frame for {}{} kappa {}", self.problem, self.n, self.kappa)));
        }
        Ok(())
    }
}

/// A weight vector uniform on the simplex. The last component is one minus
/// the others so that the sum is exact.
pub fn sample_weight(kappa: usize, rng: &mut Rng) -> WeightVector {
    let e: Vec<f64> = (0..kappa).map(|_| -math::ln(1.0 - rng.gen::<f64>())).collect();
    let s: f64 = e.iter().sum();
    let mut lambda: Vec<f64> = e.iter().map(|x| x / s).collect();
    let head: f64 = lambda[..kappa - 1].iter().sum();
    lambda[kappa - 1] = (1.0 - head).max(0.0);
    WeightVector::new(lambda).expect("simplex sample")
}

/// `b` i.i.d. instances, then `b` i.i.d. weight vectors.
pub fn sample_subproblems(
    problem: Problem,
    n: usize,
    kappa: usize,
    rng: &mut Rng,
    b: usize,
) -> Result<Vec<(Instance, WeightVector)>> {
    let instances = (0..b).map(|_| generate(problem, n, kappa, rng)).collect::<Result<Vec<_>>>()?;
    Ok(instances.into_iter().map(|inst| (inst, sample_weight(kappa, rng))).collect())
}

/// Indices into the `K` solutions of one subproblem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreferencePair {
    pub winner: usize,
    pub loser: usize,
    pub label: f64,
}

/// Every unordered pair with distinct scalarized values (lower wins).
pub fn build_pairs(scalarized: &[f64]) -> Vec<PreferencePair> {
    let mut out = Vec::new();
    for i in 0..scalarized.len() {
        for j in i + 1..scalarized.len() {
            let (a, b) = (scalarized[i], scalarized[j]);
            if a < b {
                out.push(PreferencePair { winner: i, loser: j, label: 1.0 });
            } else if b < a {
                out.push(PreferencePair { winner: j, loser: i, label: 1.0 });
            }
        }
    }
    out
}

/// `-y * log sigmoid(beta * (w - l))` for `[1]` nodes `w`, `l`.
pub fn pl_loss(g: &mut Graph, avg_ll_winner: Var, avg_ll_loser: Var, label: f64, beta: f64) -> Result<Var> {
    let diff = g.sub(avg_ll_winner, avg_ll_loser)?;
    let z = g.scale(diff, beta)?;
    let zero = g.constant(Tensor::scalar(0.0));
    let pair = g.concat(&[zero, z], 0)?;
    let ls = g.log_softmax(pair, 0)?;
    let log_sig = g.gather(ls, 0, vec![1])?;
    g.scale(log_sig, -label)
}

/// `-(1/K) * sum_j (R_j - mean(R)) * log p_j`.
pub fn reinforce_loss(g: &mut Graph, log_likelihoods: &[Var], rewards: &[f64]) -> Result<Var> {
    if log_likelihoods.len() != rewards.len() || rewards.is_empty() {
        return Err(invalid!("{} log-likelihoods for {} rewards", log_likelihoods.len(), rewards.len()));
    }
    let k = rewards.len() as f64;
    let baseline = rewards.iter().sum::<f64>() / k;
    let mut total: Option<Var> = None;
    for (&ll, &r) in log_likelihoods.iter().zip(rewards) {
        let term = g.scale(ll, -(r - baseline) / k)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Population variance of all gradient entries pooled across tensors.
pub fn gradient_variance(grads: &[Tensor]) -> f64 {
    let n: usize = grads.iter().map(Tensor::len).sum();
    if n == 0 {
        return 0.0;
    }
    let mean = grads.iter().flat_map(|t| t.data()).sum::<f64>() / n as f64;
    let ss: f64 = grads.iter().flat_map(|t| t.data()).map(|x| (x - mean) * (x - mean)).sum();
    (ss / n as f64).max(0.0)
}

fn sigmoid(z: f64) -> f64 {
    math::sigmoid(z)
}

fn avg_ll_gradient(params: &PolicyParams, inst: &Instance, lambda: &WeightVector, actions: &[usize]) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, true);
    let traced = p.solve(&mut g, inst, lambda, Decoding::Replay(actions))?;
    let avg = traced.avg_log_likelihood(&mut g)?;
    let value = g.item(avg);
    g.backward(avg)?;
    Ok((value, p.grads(&g)))
}

/// Gradients of the PL loss for one pair, by autodiff and by the closed
/// form `-y beta (1 - sigmoid(z)) (grad avg_ll(w) - grad avg_ll(l))`.
#[derive(Clone, Debug)]
pub struct PlGradientCheck {
    pub autodiff: Vec<Tensor>,
    pub closed_form: Vec<Tensor>,
    pub max_deviation: f64,
    pub loss: f64,
}

pub fn pl_gradient_check(
    params: &PolicyParams,
    inst: &Instance,
    lambda: &WeightVector,
    winner: &[usize],
    loser: &[usize],
    label: f64,
    beta: f64,
) -> Result<PlGradientCheck> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, true);
    let emb = p.encode(&mut g, inst, lambda)?;
    let tw = p.rollout(&mut g, &emb, inst, Decoding::Replay(winner))?;
    let tl = p.rollout(&mut g, &emb, inst, Decoding::Replay(loser))?;
    let aw = tw.avg_log_likelihood(&mut g)?;
    let al = tl.avg_log_likelihood(&mut g)?;
    let loss = pl_loss(&mut g, aw, al, label, beta)?;
    g.backward(loss)?;
    let autodiff = p.grads(&g);

    let (vw, gw) = avg_ll_gradient(params, inst, lambda, winner)?;
    let (vl, gl) = avg_ll_gradient(params, inst, lambda, loser)?;
    let z = beta * (vw - vl);
    let coef = -label * beta * (1.0 - sigmoid(z));
    let closed_form: Vec<Tensor> = gw
        .iter()
        .zip(&gl)
        .map(|(a, b)| {
            let data = a.data().iter().zip(b.data()).map(|(x, y)| coef * (x - y)).collect();
            Tensor::from_shape(a.shape().clone(), data).expect("same shape")
        })
        .collect();
    let max_deviation = autodiff
        .iter()
        .zip(&closed_form)
        .flat_map(|(a, c)| a.data().iter().zip(c.data()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    Ok(PlGradientCheck { autodiff, closed_form, max_deviation, loss: g.item(loss) })
}

/// Held-out instances and structured weights for greedy validation.
#[derive(Clone, Debug)]
pub struct ValidationSet {
    pub instances: Vec<Instance>,
    pub weights: Vec<WeightVector>,
    pub frame: HvFrame,
}

impl ValidationSet {
    pub fn for_config(cfg: &TrainConfig) -> Result<Self> {
        let mut rng = stream_rng(cfg.seed, Stream::Validation, 0);
        let instances = (0..cfg.validation_instances)
            .map(|_| generate(cfg.problem, cfg.n, cfg.kappa, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let weights = das_dennis_weights(cfg.kappa, cfg.validation_h)?;
        let frame = HvFrame::reference(cfg.problem, cfg.kappa, cfg.n)
            .ok_or_else(|| Error::Unsupported(format!("no HV frame for {}{}", cfg.problem, cfg.n)))?;
        Ok(ValidationSet { instances, weights, frame })
    }

    /// Mean normalized HV of greedy fronts.
    pub fn mean_hv(&self, params: &PolicyParams, scal: &ScalarizationConfig) -> Result<f64> {
        let mut total = 0.0;
        for inst in &self.instances {
            total += instance_hv(params, inst, &self.weights, &self.frame, scal, FrontOptions::default())?;
        }
        Ok(total / self.instances.len() as f64)
    }
}

/// Loss and gradients of one optimization batch.
#[derive(Clone, Debug)]
pub struct BatchGradients {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub n_pairs: usize,
    /// Selection count per expert (identity last) over every decode step.
    pub expert_usage: Vec<usize>,
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub algorithm: Algorithm,
    /// `None` for the initial validation row.
    pub loss: Option<f64>,
    pub validation_hv: Option<f64>,
    pub grad_variance: Option<f64>,
    pub n_pairs: usize,
    pub expert_usage: Vec<usize>,
}

/// Pooled gradient variance of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceEntry {
    pub batch: usize,
    pub algorithm: Algorithm,
    pub variance: f64,
}

pub type VarianceLog = Vec<VarianceEntry>;

pub struct Trainer {
    config: TrainConfig,
    params: PolicyParams,
    adam: Vec<AdamState>,
    validation: ValidationSet,
    step: usize,
}

impl Trainer {
    /// Parameters initialized from the seed's init stream.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(derive_seed(config.seed, Stream::Init, 0));
        let params = PolicyParams::init(config.model.clone(), &mut rng)?;
        Self::with_params(config, params)
    }

    pub fn with_params(config: TrainConfig, params: PolicyParams) -> Result<Self> {
        config.validate()?;
        if params.config() != &config.model {
            return Err(invalid!("parameters were built for a different model config"));
        }
        let adam = params.tensors().iter().map(|t| AdamState::new(t.len(), config.optimizer)).collect();
        let validation = ValidationSet::for_config(&config)?;
        Ok(Trainer { config, params, adam, validation, step: 0 })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn into_params(self) -> PolicyParams {
        self.params
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn validation(&self) -> &ValidationSet {
        &self.validation
    }

    pub fn validate(&self) -> Result<f64> {
        self.validation.mean_hv(&self.params, &self.config.scalarization)
    }

    /// The subproblems of (1-based) step `step`.
    pub fn batch(&self, step: usize) -> Result<Vec<(Instance, WeightVector)>> {
        let c = &self.config;
        let mut rng = stream_rng(c.seed, Stream::TrainInstances, step as u64);
        let instances = (0..c.batch)
            .map(|_| generate(c.problem, c.n, c.kappa, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mut wrng = stream_rng(c.seed, Stream::TrainWeights, step as u64);
        Ok(instances.into_iter().map(|i| (i, sample_weight(c.kappa, &mut wrng))).collect())
    }

    /// Loss and gradients at the current parameters for step `step`.
    pub fn batch_gradients(&self, step: usize) -> Result<BatchGradients> {
        let c = &self.config;
        let subproblems = self.batch(step)?;
        let mut rng = stream_rng(c.seed, Stream::Rollouts, step as u64);
        let mut grads: Vec<Tensor> = self
            .params
            .tensors()
            .iter()
            .map(|t| Tensor::from_shape(t.shape().clone(), vec![0.0; t.len()]).expect("shape"))
            .collect();
        let mut usage = vec![0usize; c.model.n_ff_experts + 1];
        let mut loss_total = 0.0;
        let mut n_pairs = 0;
        let inv_b = 1.0 / c.batch as f64;
        for (b, (inst, lambda)) in subproblems.iter().enumerate() {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, true);
            let emb = p.encode(&mut g, inst, lambda)?;
            let traced: Vec<TracedTrajectory> = (0..c.samples_per_subproblem)
                .map(|_| p.rollout(&mut g, &emb, inst, Decoding::Sample(&mut rng)))
                .collect::<Result<_>>()?;
            for t in &traced {
                for gates in &t.gates {
                    for (j, &v) in gates.iter().enumerate() {
                        if v > 0.0 {
                            usage[j] += 1;
                        }
                    }
                }
            }
            let loss = match c.algorithm {
                Algorithm::Pl => {
                    let values = traced
                        .iter()
                        .map(|t| scalarize_objective(&t.trajectory.objective, lambda, &c.scalarization))
                        .collect::<Result<Vec<_>>>()?;
                    let pairs = build_pairs(&values);
                    n_pairs += pairs.len();
                    let avgs = traced.iter().map(|t| t.avg_log_likelihood(&mut g)).collect::<Result<Vec<_>>>()?;
                    let mut total: Option<Var> = None;
                    for pair in &pairs {
                        let l = pl_loss(&mut g, avgs[pair.winner], avgs[pair.loser], pair.label, c.beta)?;
                        total = Some(match total {
                            Some(t) => g.add(t, l)?,
                            None => l,
                        });
                    }
                    total
                }
                Algorithm::Reinforce => {
                    let rewards = traced
                        .iter()
                        .map(|t| reward(&t.trajectory.objective, lambda, &c.scalarization))
                        .collect::<Result<Vec<_>>>()?;
                    let lls = traced.iter().map(|t| t.log_likelihood(&mut g)).collect::<Result<Vec<_>>>()?;
                    Some(reinforce_loss(&mut g, &lls, &rewards)?)
                }
            };
            let Some(loss) = loss else { continue };
            let loss = g.scale(loss, inv_b)?;
            let value = g.item(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {value} at step {step}, subproblem {b}, weight {:?}",
                    lambda.as_slice()
                )));
            }
            loss_total += value;
            g.backward(loss)?;
            for (acc, &v) in grads.iter_mut().zip(p.vars()) {
                if let Some(gv) = g.grad(v) {
                    for (a, x) in acc.data_mut().iter_mut().zip(gv) {
                        *a += x;
                    }
                }
            }
        }
        if let Some((i, _)) = grads.iter().enumerate().find(|(_, t)| t.data().iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite(format!(
                "gradient of {} at step {step}",
                self.params.specs()[i].name
            )));
        }
        Ok(BatchGradients { loss: loss_total, grads, n_pairs, expert_usage: usage })
    }

    fn logs_variance(&self, step: usize) -> bool {
        step <= self.config.variance_batches || step % self.config.validation_every == 0
    }

    fn validates(&self, step: usize) -> bool {
        step % self.config.validation_every == 0 || step == self.config.steps
    }

    /// Runs one optimization step and returns its log row.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step + 1;
        let mut bg = self.batch_gradients(step)?;
        let grad_variance = self.logs_variance(step).then(|| gradient_variance(&bg.grads));
        adam_step(self.params.tensors_mut(), &mut bg.grads, &mut self.adam)?;
        self.step = step;
        let validation_hv = if self.validates(step) { Some(self.validate()?) } else { None };
        Ok(StepRecord {
            step,
            algorithm: self.config.algorithm,
            loss: Some(bg.loss),
            validation_hv,
            grad_variance,
            n_pairs: bg.n_pairs,
            expert_usage: bg.expert_usage,
        })
    }

    /// Step-0 validation followed by `steps` optimization steps. Each row
    /// is passed to `observe` as soon as it is available.
    pub fn run(&mut self, mut observe: impl FnMut(&StepRecord) -> Result<()>) -> Result<Vec<StepRecord>> {
        let mut records = Vec::with_capacity(self.config.steps + 1);
        if self.step == 0 {
            let initial = StepRecord {
                step: 0,
                algorithm: self.config.algorithm,
                loss: None,
                validation_hv: Some(self.validate()?),
                grad_variance: None,
                n_pairs: 0,
                expert_usage: vec![0; self.config.model.n_ff_experts + 1],
            };
            observe(&initial)?;
            records.push(initial);
        }
        while self.step < self.config.steps {
            let r = self.train_step()?;
            observe(&r)?;
            records.push(r);
        }
        Ok(records)
    }
}

/// Trains both algorithms from one initialization for `batches` steps and
/// records the pooled gradient variance of every batch.
pub fn variance_comparison(base: &TrainConfig, batches: usize) -> Result<VarianceLog> {
    let mut log = Vec::with_capacity(2 * batches);
    let mut trainers = Vec::new();
    for algorithm in [Algorithm::Pl, Algorithm::Reinforce] {
        let cfg = TrainConfig { algorithm, steps: batches, ..base.clone() };
        trainers.push(Trainer::new(cfg)?);
    }
    for batch in 1..=batches {
        for t in &mut trainers {
            let mut bg = t.batch_gradients(batch)?;
            log.push(VarianceEntry { batch, algorithm: t.config.algorithm, variance: gradient_variance(&bg.grads) });
            adam_step(t.params.tensors_mut(), &mut bg.grads, &mut t.adam)?;
            t.step = batch;
        }
    }
    Ok(log)
}

/// Human-readable one-line summary of a record.
pub fn describe(r: &StepRecord) -> String {
    format!(
        "step {} {} loss {:?} hv {:?} var {:?} pairs {}",
        r.step, r.algorithm, r.loss, r.validation_hv, r.grad_variance, r.n_pairs
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs() {
        let p = build_pairs(&[3.0, 5.0]);
        assert_eq!(p, vec![PreferencePair { winner: 0, loser: 1, label: 1.0 }]);
        assert_eq!(build_pairs(&[5.0, 3.0])[0].winner, 1);
        assert_eq!(build_pairs(&[1.0, 2.0, 3.0]).len(), 3);
        assert!(build_pairs(&[4.0, 4.0]).is_empty());
    }

    #[test]
    fn weights_on_simplex() {
        let mut rng = rng_from_seed(9);
        for kappa in [2, 3] {
            for _ in 0..1000 {
                let w = sample_weight(kappa, &mut rng);
                let s: f64 = w.as_slice().iter().sum();
                assert!((s - 1.0).abs() <= 1e-12);
            }
        }
        let w = sample_weight(2, &mut rng);
        assert_eq!(w.as_slice()[1], 1.0 - w.as_slice()[0]);
    }

    #[test]
    fn variance_of_constants() {
        let t = Tensor::new(&[3], vec![2.0; 3]).unwrap();
        assert_eq!(gradient_variance(&[t.clone(), t]), 0.0);
        assert_eq!(gradient_variance(&[Tensor::new(&[2], vec![1.0, 3.0]).unwrap()]), 1.0);
    }

    #[test]
    fn algorithm_names() {
        assert_eq!("PL".parse::<Algorithm>().unwrap(), Algorithm::Pl);
        assert!("ppo".parse::<Algorithm>().is_err());
        assert_eq!(default_beta(2), 3.5);
        assert_eq!(default_beta(3), 4.5);
    }
}
