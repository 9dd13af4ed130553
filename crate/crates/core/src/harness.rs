//! Training runs: configuration, annealing schedules, the update loop,
//! greedy evaluation and checkpoints.
//!
//! An update samples `contexts_per_update` contexts and plays `group_size`
//! episodes from each. Under routing every turn is logged into a replay buffer
//! that trains the reward predictor; the router scores candidates with a copy
//! of the predictor taken at the start of the update. The first
//! `warmup_updates` updates train only the predictor. After that each agent
//! receives its signal and takes one optimizer step.
//!
//! Every random draw comes from streams derived from the seed: one for
//! parameter initialization, one for the evaluation set, one for training and
//! one per evaluation. A run restored from a checkpoint continues the training
//! stream where it stopped.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::env::{Context, DeployedOutput, EnvSpec, OutputKey, Proposal};
use crate::error::{config_err, Error, Result};
use crate::estimator::{self, EstimatorKind, PredictorConfig, ReplayBuffer, RewardPredictor, TurnState};
use crate::math::{self, Matrix};
use crate::mechanism::{self, Aggregator, LinearScorer, LoggedObservation, Mechanism, Router};
use crate::optimizer::{self, GrpoGroup, GrpoSample, OptimizerConfig, ScoredAction};
use crate::policy::{AgentPolicy, Conditioning, DifferentiablePolicy, ReplacementPolicy};
use crate::presets;
use crate::rollout::{self, Episode};
use crate::stream::{self, Stream, StreamState};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

const STREAM_INIT: u64 = 1;
const STREAM_EVAL_SET: u64 = 2;
const STREAM_TRAIN: u64 = 3;
const STREAM_EVAL_BASE: u64 = 1 << 32;

/// A preset name or a full environment specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnvSource {
    Preset(String),
    Spec(alloc::boxed::Box<EnvSpec>),
}

impl EnvSource {
    pub fn resolve(&self) -> Result<EnvSpec> {
        match self {
            EnvSource::Preset(name) => presets::preset(name),
            EnvSource::Spec(spec) => {
                spec.validate()?;
                Ok(spec.as_ref().clone().with_optimum())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MechanismConfig {
    Router,
    TupleIdentity,
    SelectMaxScore { token_scores: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Reinforce,
    Grpo,
}

/// Linear interpolation of router temperature and exploration over
/// `[0, n_updates]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub tau_start: f64,
    pub tau_end: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { tau_start: 1.0, tau_end: 0.7, epsilon_start: 0.05, epsilon_end: 0.03 }
    }
}

impl Schedule {
    fn lerp(a: f64, b: f64, update: usize, n_updates: usize) -> f64 {
        if n_updates == 0 {
            return a;
        }
        let f = update.min(n_updates) as f64 / n_updates as f64;
        a + (b - a) * f
    }

    pub fn tau(&self, update: usize, n_updates: usize) -> f64 {
        Self::lerp(self.tau_start, self.tau_end, update, n_updates)
    }

    pub fn epsilon(&self, update: usize, n_updates: usize) -> f64 {
        Self::lerp(self.epsilon_start, self.epsilon_end, update, n_updates)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) {
            return Err(config_err!("router temperatures must be positive"));
        }
        let unit = 0.0..=1.0;
        if !unit.contains(&self.epsilon_start) || !unit.contains(&self.epsilon_end) {
            return Err(config_err!("router exploration must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PolicyInit {
    Zeros,
    /// Independent uniform draws on `[-scale, scale]`.
    Uniform { scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ReplacementChoice {
    Uniform,
    FrozenInitial,
    FixedToken { token: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ReferenceChoice {
    Initial,
    /// Refreshed to the current policy every `interval` updates.
    Refresh { interval: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub env: EnvSource,
    #[serde(default = "default_mechanism")]
    pub mechanism: MechanismConfig,
    pub estimator: EstimatorKind,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub optimizer_config: OptimizerConfig,
    #[serde(default = "default_conditioning")]
    pub conditioning: Conditioning,
    #[serde(default = "default_init")]
    pub policy_init: PolicyInit,
    #[serde(default = "default_replacement")]
    pub replacement: ReplacementChoice,
    #[serde(default = "default_reference")]
    pub reference: ReferenceChoice,
    #[serde(default = "default_n_updates")]
    pub n_updates: usize,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    #[serde(default = "default_contexts_per_update")]
    pub contexts_per_update: usize,
    #[serde(default = "default_warmup")]
    pub warmup_updates: usize,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub predictor: PredictorConfig,
    #[serde(default = "default_predictor_steps")]
    pub predictor_steps: usize,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    #[serde(default = "default_eval_size")]
    pub eval_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_name() -> String {
    String::from("experiment")
}
fn default_mechanism() -> MechanismConfig {
    MechanismConfig::Router
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Grpo
}
fn default_conditioning() -> Conditioning {
    Conditioning::Independent
}
fn default_init() -> PolicyInit {
    PolicyInit::Uniform { scale: 0.5 }
}
fn default_replacement() -> ReplacementChoice {
    ReplacementChoice::Uniform
}
fn default_reference() -> ReferenceChoice {
    ReferenceChoice::Initial
}
fn default_n_updates() -> usize {
    150
}
fn default_group_size() -> usize {
    4
}
fn default_contexts_per_update() -> usize {
    8
}
fn default_warmup() -> usize {
    25
}
fn default_predictor_steps() -> usize {
    8
}
fn default_eval_interval() -> usize {
    10
}
fn default_eval_size() -> usize {
    300
}

impl ExperimentConfig {
    /// Defaults for every field except the environment and estimator.
    pub fn new(env: EnvSource, estimator: EstimatorKind) -> Self {
        ExperimentConfig {
            name: default_name(),
            env,
            mechanism: default_mechanism(),
            estimator,
            optimizer: default_optimizer(),
            optimizer_config: OptimizerConfig::default(),
            conditioning: default_conditioning(),
            policy_init: default_init(),
            replacement: default_replacement(),
            reference: default_reference(),
            n_updates: default_n_updates(),
            group_size: default_group_size(),
            contexts_per_update: default_contexts_per_update(),
            warmup_updates: default_warmup(),
            schedule: Schedule::default(),
            predictor: PredictorConfig::default(),
            predictor_steps: default_predictor_steps(),
            eval_interval: default_eval_interval(),
            eval_size: default_eval_size(),
            seed: 0,
        }
    }

    /// Checks every field and their combinations, returning the resolved
    /// environment.
    pub fn validate(&self) -> Result<EnvSpec> {
        let env = self.env.resolve()?;
        self.schedule.validate()?;
        self.optimizer_config.validate()?;
        self.predictor.validate()?;
        if self.group_size == 0 || self.contexts_per_update == 0 {
            return Err(config_err!("group_size and contexts_per_update must be positive"));
        }
        if self.optimizer == OptimizerKind::Grpo && self.group_size < 2 {
            return Err(config_err!("grpo needs group_size of at least 2"));
        }
        if self.eval_interval == 0 || self.eval_size == 0 {
            return Err(config_err!("eval_interval and eval_size must be positive"));
        }
        if let PolicyInit::Uniform { scale } = self.policy_init {
            if !(scale >= 0.0 && scale.is_finite()) {
                return Err(config_err!("policy_init scale must be finite and non-negative"));
            }
        }
        if let ReferenceChoice::Refresh { interval: 0 } = self.reference {
            return Err(config_err!("reference refresh interval must be positive"));
        }
        if let ReplacementChoice::FixedToken { token } = self.replacement {
            if token >= env.vocab_size {
                return Err(config_err!("replacement token {} outside vocabulary of size {}", token, env.vocab_size));
            }
        }
        let mechanism = build_mechanism(&self.mechanism, &env, None)?;
        if mechanism.output_space() != env.output_space {
            return Err(config_err!(
                "mechanism {:?} deploys {:?} outputs but {} expects {:?}",
                self.mechanism,
                mechanism.output_space(),
                env.name,
                env.output_space
            ));
        }
        match (&mechanism, self.estimator) {
            (Mechanism::Router(_), EstimatorKind::Loo) => {
                return Err(config_err!("routing uses the dr estimator for counterfactual credit, not loo"));
            }
            (Mechanism::Aggregator(_), EstimatorKind::Dr | EstimatorKind::Wta) => {
                return Err(config_err!("{:?} needs a router; aggregation supports loo and shared", self.estimator));
            }
            (Mechanism::Router(_), EstimatorKind::Dr) if self.conditioning != Conditioning::Independent => {
                return Err(config_err!("removal counterfactuals under routing need independent conditioning"));
            }
            (Mechanism::Router(_), EstimatorKind::Dr) if env.n_agents < 2 => {
                return Err(config_err!("dr credit needs at least two agents"));
            }
            _ => {}
        }
        Ok(env)
    }
}

fn build_mechanism(config: &MechanismConfig, env: &EnvSpec, scorer: Option<(&LinearScorer, f64, f64)>) -> Result<Mechanism> {
    Ok(match config {
        MechanismConfig::Router => {
            let router = match scorer {
                Some((s, tau, eps)) => Router::new(s.clone(), tau, eps)?,
                None => Router::new(LinearScorer::zeros(env.feature_dim(), env.n_agents, env.vocab_size), 1.0, 0.0)?,
            };
            Mechanism::Router(router)
        }
        MechanismConfig::TupleIdentity => Mechanism::Aggregator(Aggregator::TupleIdentity),
        MechanismConfig::SelectMaxScore { token_scores } => {
            if token_scores.len() != env.vocab_size {
                return Err(config_err!("select-max-score needs {} token scores", env.vocab_size));
            }
            Mechanism::Aggregator(Aggregator::SelectMaxScore { token_scores: token_scores.clone() })
        }
    })
}

/// Metrics from one greedy evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub update: usize,
    /// Expected return of the greedy system over a full episode.
    pub mean_return: f64,
    /// Expected reward of the deployed output, per turn.
    pub router_accuracy: f64,
    /// Expected reward of the best proposal among the same candidates.
    pub oracle_accuracy: f64,
    pub regret: f64,
    /// Routing entropy divided by `ln K`.
    pub routing_entropy: Option<f64>,
    pub routing_entropy_nats: Option<f64>,
    pub brier: Option<f64>,
    pub specialization: Option<f64>,
    pub selection_shares: Option<Vec<f64>>,
    pub tau: f64,
    pub epsilon: f64,
}

/// Mean squared difference after clamping predictions to `[0, 1]`.
pub fn brier_score(predictions: &[f64], outcomes: &[f64]) -> Result<f64> {
    if predictions.len() != outcomes.len() {
        return Err(Error::Dimension { what: "brier outcomes", expected: predictions.len(), found: outcomes.len() });
    }
    if predictions.is_empty() {
        return Err(config_err!("brier score of an empty set"));
    }
    let total: f64 = predictions
        .iter()
        .zip(outcomes)
        .map(|(p, o)| {
            let e = p.clamp(0.0, 1.0) - o;
            e * e
        })
        .sum();
    Ok(total / predictions.len() as f64)
}

/// Fraction of `(context, selected agent)` pairs where the agent's
/// specialty matches the context label.
pub fn specialization_score(selections: &[(usize, usize)], context_labels: &[usize], agent_specialties: &[usize]) -> Result<f64> {
    if selections.is_empty() {
        return Err(config_err!("specialization score of an empty set"));
    }
    let mut hits = 0usize;
    for &(c, agent) in selections {
        let label = context_labels.get(c).ok_or_else(|| config_err!("context {} has no specialty label", c))?;
        let spec = agent_specialties.get(agent).ok_or_else(|| config_err!("agent {} declares no specialty", agent))?;
        if label == spec {
            hits += 1;
        }
    }
    Ok(hits as f64 / selections.len() as f64)
}

fn greedy_proposals(policies: &[AgentPolicy], ctx: &Context) -> Result<Vec<Proposal>> {
    let mut proposals = Vec::with_capacity(policies.len());
    for p in policies {
        let z = p.input(ctx, &proposals)?;
        proposals.push(p.greedy(&z)?);
    }
    Ok(proposals)
}

/// Greedy evaluation: argmax proposals, and under routing the candidate with
/// the highest predictor score. Reward noise and transitions are drawn from
/// `rng`.
pub fn evaluate(
    policies: &[AgentPolicy],
    mechanism: &Mechanism,
    predictor: Option<&RewardPredictor>,
    env: &EnvSpec,
    eval_contexts: &[usize],
    update: usize,
    rng: &mut Stream,
) -> Result<MetricsRecord> {
    if eval_contexts.is_empty() {
        return Err(config_err!("evaluation needs at least one context"));
    }
    let k = env.n_agents;
    let router = mechanism.router();
    let (mut total_return, mut acc, mut best, mut entropy) = (0.0, 0.0, 0.0, 0.0);
    let (mut preds, mut outcomes, mut selections) = (Vec::new(), Vec::new(), Vec::new());
    let mut shares = vec![0.0; k];
    let mut visits = 0usize;
    for &c0 in eval_contexts {
        let mut ctx = env.context(c0);
        for t in 0..env.horizon {
            let proposals = greedy_proposals(policies, &ctx)?;
            let reward_of = |p: &Proposal| env.expected_reward(ctx.id, &DeployedOutput { key: OutputKey::Selected(*p) });
            let output = match router {
                Some(r) => {
                    let chosen = r.greedy(&ctx, &proposals)?;
                    let probs = r.route_probabilities(&ctx, &proposals)?;
                    entropy += math::entropy(&probs);
                    let mut top = f64::NEG_INFINITY;
                    for p in &proposals {
                        top = top.max(reward_of(p)?);
                    }
                    best += top;
                    shares[chosen] += 1.0;
                    selections.push((ctx.id, chosen));
                    DeployedOutput { key: OutputKey::Selected(proposals[chosen]) }
                }
                None => mechanism.deploy(&ctx, &proposals, 0)?.output,
            };
            let expected = env.expected_reward(ctx.id, &output)?;
            if router.is_none() {
                best += expected;
            }
            acc += expected;
            total_return += expected;
            if let (Some(pred), OutputKey::Selected(p)) = (predictor, &output.key) {
                preds.push(pred.predict_return(&ctx, p)?);
                outcomes.push(env.reward(&ctx, &output, rng)?);
            }
            visits += 1;
            if t + 1 < env.horizon {
                ctx = env.transition(&ctx, &output, rng)?;
            }
        }
    }
    let n_visits = visits as f64;
    let routed = router.is_some();
    let ln_k = libm::log(k as f64);
    let specialization = match (&env.context_labels, &env.agent_specialties) {
        (Some(labels), Some(specs)) if routed => Some(specialization_score(&selections, labels, specs)?),
        _ => None,
    };
    Ok(MetricsRecord {
        update,
        mean_return: total_return / eval_contexts.len() as f64,
        router_accuracy: acc / n_visits,
        oracle_accuracy: best / n_visits,
        regret: (best - acc) / n_visits,
        routing_entropy: routed.then(|| if k > 1 { entropy / n_visits / ln_k } else { 0.0 }),
        routing_entropy_nats: routed.then(|| entropy / n_visits),
        brier: if preds.is_empty() { None } else { Some(brier_score(&preds, &outcomes)?) },
        specialization,
        selection_shares: routed.then(|| shares.iter().map(|s| s / n_visits).collect()),
        tau: router.map_or(0.0, |r| r.tau),
        epsilon: router.map_or(0.0, |r| r.epsilon),
    })
}

/// Expected greedy return of the initial first agent deployed alone.
pub fn frozen_baseline_return(initial: &AgentPolicy, env: &EnvSpec, eval_contexts: &[usize], rng: &mut Stream) -> Result<f64> {
    let mut total = 0.0;
    for &c0 in eval_contexts {
        let mut ctx = env.context(c0);
        for t in 0..env.horizon {
            let z = initial.input(&ctx, &[])?;
            let proposal = initial.greedy(&z)?;
            let output = match env.output_space {
                crate::env::OutputSpace::Selected => DeployedOutput { key: OutputKey::Selected(proposal) },
                crate::env::OutputSpace::Joint => {
                    return Err(Error::Usage("a lone agent cannot fill a joint output".into()));
                }
            };
            total += env.expected_reward(ctx.id, &output)?;
            if t + 1 < env.horizon {
                ctx = env.transition(&ctx, &output, rng)?;
            }
        }
    }
    Ok(total / eval_contexts.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    pub seed: u64,
    pub version: String,
    pub env: String,
    pub optimum: Option<f64>,
    pub config: ExperimentConfig,
    pub n_updates: usize,
    pub initial: MetricsRecord,
    #[serde(rename = "final")]
    pub final_metrics: MetricsRecord,
    /// Greedy return of the initial first agent alone; absent for joint
    /// outputs.
    pub frozen_return: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub series: Vec<MetricsRecord>,
    pub report: Report,
}

/// Everything needed to continue a run bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub version: String,
    pub config: ExperimentConfig,
    pub update: usize,
    pub policies: Vec<AgentPolicy>,
    pub initial: Vec<AgentPolicy>,
    pub reference: Vec<AgentPolicy>,
    pub predictor: Option<RewardPredictor>,
    pub buffer: ReplayBuffer,
    pub rng: StreamState,
    pub eval_contexts: Vec<usize>,
    pub series: Vec<MetricsRecord>,
}

/// Per-update diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub update: usize,
    pub warmup: bool,
    pub mean_episode_return: f64,
    pub predictor_loss: Option<f64>,
    pub grad_norms: Vec<f64>,
}

pub struct Trainer {
    config: ExperimentConfig,
    env: EnvSpec,
    policies: Vec<AgentPolicy>,
    initial: Vec<AgentPolicy>,
    reference: Vec<AgentPolicy>,
    predictor: Option<RewardPredictor>,
    buffer: ReplayBuffer,
    rng: Stream,
    update: usize,
    eval_contexts: Vec<usize>,
    series: Vec<MetricsRecord>,
}

struct Sample {
    episode: Episode,
    observations: Vec<Option<LoggedObservation>>,
}

impl Trainer {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let env = config.validate()?;
        let mut init_rng = stream::derive(config.seed, STREAM_INIT);
        let policies: Vec<AgentPolicy> = (0..env.n_agents)
            .map(|i| {
                let p = AgentPolicy::new(i, config.conditioning, env.feature_dim(), env.n_agents, env.vocab_size);
                let (rows, cols) = (p.theta().rows(), p.theta().cols());
                let data = match config.policy_init {
                    PolicyInit::Zeros => vec![0.0; rows * cols],
                    PolicyInit::Uniform { scale } => {
                        (0..rows * cols).map(|_| scale * (2.0 * stream::uniform(&mut init_rng) - 1.0)).collect()
                    }
                };
                p.with_theta(Matrix::from_vec(rows, cols, data)?)
            })
            .collect::<Result<_>>()?;
        let mut eval_rng = stream::derive(config.seed, STREAM_EVAL_SET);
        let eval_contexts = (0..config.eval_size).map(|_| env.sample_context(&mut eval_rng).id).collect();
        let predictor = (config.mechanism == MechanismConfig::Router)
            .then(|| RewardPredictor::new(env.feature_dim(), env.n_agents, env.vocab_size, config.predictor));
        let mut trainer = Trainer {
            buffer: ReplayBuffer::new(config.predictor.replay_capacity),
            rng: stream::derive(config.seed, STREAM_TRAIN),
            initial: policies.clone(),
            reference: policies.clone(),
            policies,
            predictor,
            update: 0,
            eval_contexts,
            series: Vec::new(),
            config,
            env,
        };
        let first = trainer.evaluate_now()?;
        trainer.series.push(first);
        Ok(trainer)
    }

    pub fn restore(state: TrainerState) -> Result<Self> {
        let env = state.config.validate()?;
        if state.policies.len() != env.n_agents || state.update > state.config.n_updates {
            return Err(config_err!("checkpoint does not match its configuration"));
        }
        rollout::check_compatible(&env, &state.policies, &build_mechanism(&state.config.mechanism, &env, None)?)?;
        Ok(Trainer {
            config: state.config,
            env,
            policies: state.policies,
            initial: state.initial,
            reference: state.reference,
            predictor: state.predictor,
            buffer: state.buffer,
            rng: state.rng.restore(),
            update: state.update,
            eval_contexts: state.eval_contexts,
            series: state.series,
        })
    }

    pub fn checkpoint(&self) -> TrainerState {
        TrainerState {
            version: String::from(VERSION),
            config: self.config.clone(),
            update: self.update,
            policies: self.policies.clone(),
            initial: self.initial.clone(),
            reference: self.reference.clone(),
            predictor: self.predictor.clone(),
            buffer: self.buffer.clone(),
            rng: StreamState::capture(&self.rng),
            eval_contexts: self.eval_contexts.clone(),
            series: self.series.clone(),
        }
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn env(&self) -> &EnvSpec {
        &self.env
    }

    pub fn policies(&self) -> &[AgentPolicy] {
        &self.policies
    }

    pub fn predictor(&self) -> Option<&RewardPredictor> {
        self.predictor.as_ref()
    }

    pub fn update_index(&self) -> usize {
        self.update
    }

    pub fn is_finished(&self) -> bool {
        self.update >= self.config.n_updates
    }

    pub fn series(&self) -> &[MetricsRecord] {
        &self.series
    }

    /// Mechanism as configured at update `u`.
    pub fn mechanism_at(&self, u: usize) -> Result<Mechanism> {
        let n = self.config.n_updates;
        let (tau, eps) = (self.config.schedule.tau(u, n), self.config.schedule.epsilon(u, n));
        let scorer = self.predictor.as_ref().map(|p| (&p.scorer, tau, eps));
        build_mechanism(&self.config.mechanism, &self.env, scorer)
    }

    fn evaluate_now(&self) -> Result<MetricsRecord> {
        let mechanism = self.mechanism_at(self.update)?;
        let mut rng = stream::derive(self.config.seed, STREAM_EVAL_BASE + self.update as u64);
        evaluate(&self.policies, &mechanism, self.predictor.as_ref(), &self.env, &self.eval_contexts, self.update, &mut rng)
    }

    fn replacement(&self, agent: usize) -> ReplacementPolicy {
        match self.config.replacement {
            ReplacementChoice::Uniform => ReplacementPolicy::Uniform { vocab_size: self.env.vocab_size },
            ReplacementChoice::FrozenInitial => ReplacementPolicy::frozen(&self.initial[agent], 0),
            ReplacementChoice::FixedToken { token } => {
                ReplacementPolicy::FixedToken { token, vocab_size: self.env.vocab_size }
            }
        }
    }

    /// Runs one update and returns its diagnostics plus a metrics record when
    /// an evaluation is due.
    pub fn step(&mut self) -> Result<(StepSummary, Option<MetricsRecord>)> {
        if self.is_finished() {
            return Err(Error::Usage("training already reached n_updates".into()));
        }
        let u = self.update;
        let mechanism = self.mechanism_at(u)?;
        let warmup = u < self.config.warmup_updates;
        let samples = self.collect(&mechanism)?;
        let mean_episode_return =
            samples.iter().map(|s| s.episode.total_return()).sum::<f64>() / samples.len() as f64;

        let predictor_loss = match self.predictor.as_mut() {
            Some(pred) => {
                let mut loss = 0.0;
                for _ in 0..self.config.predictor_steps {
                    loss = pred.update(&self.buffer, &mut self.rng)?.weighted_loss;
                }
                Some(loss)
            }
            None => None,
        };

        let mut grad_norms = Vec::new();
        if !warmup {
            let signals = self.signals(&samples, &mechanism)?;
            grad_norms = self.optimize(&samples, &signals)?;
        }
        self.update += 1;
        if let ReferenceChoice::Refresh { interval } = self.config.reference {
            if self.update.is_multiple_of(interval) {
                self.reference = self.policies.clone();
            }
        }
        let record = if self.update.is_multiple_of(self.config.eval_interval) || self.is_finished() {
            let r = self.evaluate_now()?;
            self.series.push(r.clone());
            Some(r)
        } else {
            None
        };
        Ok((StepSummary { update: u, warmup, mean_episode_return, predictor_loss, grad_norms }, record))
    }

    fn collect(&mut self, mechanism: &Mechanism) -> Result<Vec<Sample>> {
        let mut samples = Vec::with_capacity(self.config.contexts_per_update * self.config.group_size);
        for _ in 0..self.config.contexts_per_update {
            let ctx = self.env.sample_context(&mut self.rng);
            for _ in 0..self.config.group_size {
                let episode = rollout::play_from(&self.env, &self.policies, mechanism, ctx.clone(), 0, &mut self.rng)?;
                let mut observations = Vec::with_capacity(episode.turns.len());
                for (t, rec) in episode.turns.iter().enumerate() {
                    let obs = match (&rec.deployment.propensities, rec.deployment.selected) {
                        (Some(p), Some(sel)) => {
                            let obs = mechanism::log_observation(
                                rec.ctx.clone(),
                                &rec.sample.proposals,
                                p,
                                sel,
                                episode.return_to_go(t),
                                rec.mech_seed,
                                rec.turn,
                            )?;
                            self.buffer.push(obs.clone());
                            Some(obs)
                        }
                        _ => None,
                    };
                    observations.push(obs);
                }
                samples.push(Sample { episode, observations });
            }
        }
        Ok(samples)
    }

    /// `signals[sample][turn][agent]`
    fn signals(&mut self, samples: &[Sample], mechanism: &Mechanism) -> Result<Vec<Vec<Vec<f64>>>> {
        let k = self.env.n_agents;
        let mut out = Vec::with_capacity(samples.len());
        for s in samples {
            let mut per_turn = Vec::with_capacity(s.episode.turns.len());
            for (t, rec) in s.episode.turns.iter().enumerate() {
                let g = s.episode.return_to_go(t);
                let row: Vec<f64> = match self.config.estimator {
                    EstimatorKind::Shared => vec![g; k],
                    EstimatorKind::Wta => {
                        let obs = s.observations[t].as_ref().ok_or_else(|| Error::Usage("wta needs routing logs".into()))?;
                        (0..k).map(|i| estimator::winner_take_all_signal(obs, i).value).collect()
                    }
                    EstimatorKind::Dr => {
                        let obs = s.observations[t].as_ref().ok_or_else(|| Error::Usage("dr needs routing logs".into()))?;
                        let router = mechanism.router().ok_or_else(|| Error::Usage("dr needs a router".into()))?;
                        let pred = self.predictor.as_ref().ok_or_else(|| Error::Usage("dr needs a predictor".into()))?;
                        (0..k)
                            .map(|i| estimator::routing_marginal_contribution(obs, i, pred, router).map(|m| m.value))
                            .collect::<Result<_>>()?
                    }
                    EstimatorKind::Loo => {
                        let state = TurnState { ctx: &rec.ctx, turn: t, proposals: &rec.sample.proposals, realized_return: g };
                        (0..k)
                            .map(|i| {
                                let q = self.replacement(i);
                                estimator::loo_marginal_contribution(&state, i, &q, &self.policies, mechanism, &self.env, &mut self.rng)
                                    .map(|m| m.value)
                            })
                            .collect::<Result<_>>()?
                    }
                };
                per_turn.push(row);
            }
            out.push(per_turn);
        }
        Ok(out)
    }

    fn optimize(&mut self, samples: &[Sample], signals: &[Vec<Vec<f64>>]) -> Result<Vec<f64>> {
        let cfg = self.config.optimizer_config;
        let mut norms = Vec::with_capacity(self.policies.len());
        for i in 0..self.policies.len() {
            let stats = match self.config.optimizer {
                OptimizerKind::Reinforce => {
                    let mut batch = Vec::new();
                    for (s, sig) in samples.iter().zip(signals) {
                        for (t, rec) in s.episode.turns.iter().enumerate() {
                            batch.push(ScoredAction {
                                z: rec.sample.inputs[i].clone(),
                                token: rec.sample.proposals[i].token,
                                signal: sig[t][i],
                            });
                        }
                    }
                    optimizer::reinforce_update(&mut self.policies[i], &batch, cfg.learning_rate, cfg.grad_clip_norm)?
                }
                OptimizerKind::Grpo => {
                    let mut groups: BTreeMap<(usize, usize, usize), GrpoGroup> = BTreeMap::new();
                    let per_context = self.config.group_size;
                    for (n, (s, sig)) in samples.iter().zip(signals).enumerate() {
                        for (t, rec) in s.episode.turns.iter().enumerate() {
                            let key = (n / per_context, t, rec.ctx.id);
                            groups
                                .entry(key)
                                .or_insert_with(|| GrpoGroup { context: rec.ctx.clone(), samples: Vec::new() })
                                .samples
                                .push(GrpoSample {
                                    z: rec.sample.inputs[i].clone(),
                                    token: rec.sample.proposals[i].token,
                                    signal: sig[t][i],
                                });
                        }
                    }
                    let groups: Vec<GrpoGroup> = groups.into_values().filter(|g| g.samples.len() >= 2).collect();
                    let old = optimizer::capture_snapshot(&self.policies[i]);
                    let reference = optimizer::capture_snapshot(&self.reference[i]);
                    optimizer::grpo_update(&mut self.policies[i], &groups, &old, &reference, &cfg)?
                }
            };
            if !self.policies[i].params().is_finite() {
                return Err(Error::Precondition(alloc::format!("agent {i} parameters became non-finite")));
            }
            norms.push(stats.grad_norm);
        }
        Ok(norms)
    }

    /// Runs the remaining updates.
    pub fn run_to_end(&mut self) -> Result<RunOutput> {
        while !self.is_finished() {
            self.step()?;
        }
        self.output()
    }

    pub fn output(&self) -> Result<RunOutput> {
        let mut rng = stream::derive(self.config.seed, STREAM_EVAL_BASE - 1);
        let frozen_return = match self.env.output_space {
            crate::env::OutputSpace::Selected => {
                Some(frozen_baseline_return(&self.initial[0], &self.env, &self.eval_contexts, &mut rng)?)
            }
            crate::env::OutputSpace::Joint => None,
        };
        let initial = self.series.first().cloned().ok_or_else(|| Error::Usage("no evaluation recorded".into()))?;
        let final_metrics = self.series.last().cloned().ok_or_else(|| Error::Usage("no evaluation recorded".into()))?;
        Ok(RunOutput {
            series: self.series.clone(),
            report: Report {
                name: self.config.name.clone(),
                seed: self.config.seed,
                version: String::from(VERSION),
                env: self.env.name.clone(),
                optimum: self.env.optimum,
                config: self.config.clone(),
                n_updates: self.config.n_updates,
                initial,
                final_metrics,
                frozen_return,
            },
        })
    }
}

pub fn run_experiment(config: ExperimentConfig) -> Result<RunOutput> {
    Trainer::new(config)?.run_to_end()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(estimator: EstimatorKind, n_updates: usize) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(EnvSource::Preset("routing-basic".into()), estimator);
        c.n_updates = n_updates;
        c.warmup_updates = 2;
        c.eval_size = 30;
        c.contexts_per_update = 2;
        c
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule::default();
        assert_eq!(s.tau(0, 150), 1.0);
        assert!(math::abs(s.tau(150, 150) - 0.7) < 1e-15);
        assert!(math::abs(s.tau(75, 150) - 0.85) < 1e-15);
        assert_eq!(s.epsilon(0, 150), 0.05);
        assert!(math::abs(s.epsilon(150, 150) - 0.03) < 1e-15);
        assert_eq!(s.tau(3, 0), 1.0);
    }

    #[test]
    fn brier() {
        assert_eq!(brier_score(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(brier_score(&[0.5; 4], &[1.0, 0.0, 1.0, 0.0]).unwrap(), 0.25);
        assert_eq!(brier_score(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(brier_score(&[1.7], &[1.0]).unwrap(), 0.0);
    }

    #[test]
    fn specialization() {
        let labels = [0, 1, 2];
        assert_eq!(specialization_score(&[(0, 0), (1, 1), (2, 2)], &labels, &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(specialization_score(&[(0, 0), (1, 2)], &[0, 0], &[0, 0, 0]).unwrap(), 1.0);
        assert!(specialization_score(&[(5, 0)], &labels, &[0, 1, 2]).is_err());
    }

    #[test]
    fn zero_updates_report_initial_evaluation() {
        let out = run_experiment(quick(EstimatorKind::Dr, 0)).unwrap();
        assert_eq!(out.series.len(), 1);
        assert_eq!(out.report.initial, out.report.final_metrics);
    }

    #[test]
    fn same_seed_same_output() {
        let a = run_experiment(quick(EstimatorKind::Dr, 6)).unwrap();
        let b = run_experiment(quick(EstimatorKind::Dr, 6)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_resume_matches() {
        let full = run_experiment(quick(EstimatorKind::Wta, 8)).unwrap();
        let mut t = Trainer::new(quick(EstimatorKind::Wta, 8)).unwrap();
        for _ in 0..5 {
            t.step().unwrap();
        }
        let state = t.checkpoint();
        let resumed = Trainer::restore(state).unwrap().run_to_end().unwrap();
        assert_eq!(full, resumed);
    }

    #[test]
    fn metric_invariants() {
        let out = run_experiment(quick(EstimatorKind::Dr, 10)).unwrap();
        for r in &out.series {
            let h = r.routing_entropy.unwrap();
            assert!((0.0..=1.0 + 1e-12).contains(&h));
            assert!(r.regret >= -1e-12);
            assert!(math::abs(r.regret - (r.oracle_accuracy - r.router_accuracy)) < 1e-12);
            assert!(math::abs(r.selection_shares.as_ref().unwrap().iter().sum::<f64>() - 1.0) < 1e-9);
        }
        assert!(math::abs(out.series[0].routing_entropy.unwrap() - 1.0) < 1e-12);
    }

    #[test]
    fn invalid_combinations_are_rejected() {
        assert!(quick(EstimatorKind::Loo, 1).validate().is_err());
        let mut c = quick(EstimatorKind::Dr, 1);
        c.conditioning = Conditioning::Autoregressive;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::new(EnvSource::Preset("collab-interaction".into()), EstimatorKind::Dr);
        c.mechanism = MechanismConfig::TupleIdentity;
        assert!(c.validate().is_err());
        c.estimator = EstimatorKind::Loo;
        assert!(c.validate().is_ok());
        let mut c = quick(EstimatorKind::Dr, 1);
        c.group_size = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn collaborative_training_runs() {
        let mut c = ExperimentConfig::new(EnvSource::Preset("collab-multiturn".into()), EstimatorKind::Loo);
        c.mechanism = MechanismConfig::TupleIdentity;
        c.conditioning = Conditioning::Autoregressive;
        c.n_updates = 5;
        c.warmup_updates = 0;
        c.eval_size = 10;
        let out = run_experiment(c).unwrap();
        assert_eq!(out.series.len(), 2);
        assert!(out.report.frozen_return.is_none());
        assert!(out.series[0].routing_entropy.is_none());
    }
}
