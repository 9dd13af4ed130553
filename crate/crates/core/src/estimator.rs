//! Per-agent training signals.
//!
//! Routing: the deployed candidate's return is the only feedback, so each
//! candidate's return-to-go is estimated doubly robustly from a learned
//! predictor plus an inverse-propensity correction on the selected one, and
//! agent `i`'s contribution is the gap between the router's value with and
//! without its candidate.
//!
//! Collaboration: the shared return is observed, and agent `i`'s contribution
//! is `G − G^{-i}` where `G^{-i}` comes from a counterfactual rollout with its
//! proposal replaced by a baseline draw.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::env::{Context, DeployedOutput, EnvSpec, Proposal};
use crate::error::{config_err, Error, Result};
use crate::mechanism::{LinearScorer, LoggedObservation, Mechanism, Router};
use crate::policy::{self, AgentPolicy, ReplacementPolicy};
use crate::rollout;
use crate::stream::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub propensity_floor: f64,
    pub ips_clip: f64,
    pub replay_capacity: usize,
    pub replay_batch: usize,
    pub learning_rate: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            propensity_floor: 0.05,
            ips_clip: 3.0,
            replay_capacity: 50_000,
            replay_batch: 64,
            learning_rate: 0.1,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.propensity_floor > 0.0 && self.propensity_floor <= 1.0) {
            return Err(config_err!("propensity_floor must lie in (0, 1]"));
        }
        if !(self.ips_clip >= 1.0) {
            return Err(config_err!("ips_clip must be at least 1"));
        }
        if self.replay_capacity == 0 || self.replay_batch == 0 {
            return Err(config_err!("replay capacity and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(config_err!("predictor learning_rate must be positive"));
        }
        Ok(())
    }

    /// `min(1 / max(p, floor), clip)`
    pub fn ips_weight(&self, propensity: f64) -> f64 {
        (1.0 / propensity.max(self.propensity_floor)).min(self.ips_clip)
    }
}

/// A model of the expected return-to-go of deploying a candidate.
pub trait ReturnModel {
    fn predict(&self, ctx: &Context, candidate: &Proposal) -> Result<f64>;
}

impl<F> ReturnModel for F
where
    F: Fn(&Context, &Proposal) -> f64,
{
    fn predict(&self, ctx: &Context, candidate: &Proposal) -> Result<f64> {
        Ok(self(ctx, candidate))
    }
}

/// Linear return predictor trained from selection-gated logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardPredictor {
    pub scorer: LinearScorer,
    pub config: PredictorConfig,
}

/// Summary of one predictor step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorStep {
    pub batch_size: usize,
    pub mean_weight: f64,
    pub weighted_loss: f64,
}

impl RewardPredictor {
    pub fn new(context_dim: usize, n_agents: usize, vocab_size: usize, config: PredictorConfig) -> Self {
        RewardPredictor { scorer: LinearScorer::zeros(context_dim, n_agents, vocab_size), config }
    }

    /// Unclamped prediction for `candidate`; its agent identity is part of
    /// the features.
    pub fn predict_return(&self, ctx: &Context, candidate: &Proposal) -> Result<f64> {
        self.scorer.score(ctx, candidate)
    }

    /// One SGD step on a replay batch: squared error of the selected
    /// candidate's prediction against the logged return, weighted by the
    /// floored and clipped inverse propensity.
    pub fn update(&mut self, buffer: &ReplayBuffer, rng: &mut Stream) -> Result<PredictorStep> {
        if buffer.is_empty() {
            return Err(Error::Precondition("predictor update needs a non-empty replay buffer".into()));
        }
        let batch = buffer.sample_batch(self.config.replay_batch, rng);
        let mut grad = vec![0.0; self.scorer.weights().len()];
        let (mut loss, mut weight_sum) = (0.0, 0.0);
        for obs in &batch {
            let chosen = obs.candidates()[obs.selected()];
            let w = self.config.ips_weight(obs.propensities()[obs.selected()]);
            let feats = self.scorer.features(obs.ctx(), &chosen)?;
            let pred: f64 = feats.iter().map(|&(k, x)| self.scorer.weights()[k] * x).sum();
            let err = pred - obs.observed_return();
            loss += 0.5 * w * err * err;
            weight_sum += w;
            for (k, x) in feats {
                grad[k] += w * err * x;
            }
        }
        let n = batch.len() as f64;
        let lr = self.config.learning_rate;
        for (wk, g) in self.scorer.weights_mut().iter_mut().zip(&grad) {
            *wk -= lr * g / n;
        }
        Ok(PredictorStep { batch_size: batch.len(), mean_weight: weight_sum / n, weighted_loss: loss / n })
    }
}

impl ReturnModel for RewardPredictor {
    fn predict(&self, ctx: &Context, candidate: &Proposal) -> Result<f64> {
        self.predict_return(ctx, candidate)
    }
}

/// Bounded FIFO of logged observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    records: VecDeque<LoggedObservation>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity: capacity.max(1), records: VecDeque::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, obs: LoggedObservation) {
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(obs);
    }

    pub fn iter(&self) -> impl Iterator<Item = &LoggedObservation> {
        self.records.iter()
    }

    /// Uniform draws with replacement.
    pub fn sample_batch(&self, size: usize, rng: &mut Stream) -> Vec<&LoggedObservation> {
        let n = self.records.len();
        (0..size)
            .map(|_| &self.records[(stream::uniform(rng) * n as f64) as usize % n])
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Wta,
    Dr,
    Loo,
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalContribution {
    pub agent: usize,
    pub turn: usize,
    pub value: f64,
    pub kind: EstimatorKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateReturnEstimate {
    pub candidate: usize,
    pub value: f64,
}

/// Doubly-robust return-to-go of candidate `j`:
/// `μ̂ + 1{I = j}/p_j · (G − μ̂)`.
pub fn dr_candidate_return(obs: &LoggedObservation, j: usize, model: &dyn ReturnModel) -> Result<CandidateReturnEstimate> {
    if j >= obs.n_candidates() {
        return Err(config_err!("candidate {} outside {} candidates", j, obs.n_candidates()));
    }
    let mu = model.predict(obs.ctx(), &obs.candidates()[j])?;
    let value = if j == obs.selected() {
        let p = obs.propensities()[j];
        if !(p > 0.0) {
            return Err(Error::Precondition(alloc::format!("selected candidate {j} has zero propensity")));
        }
        mu + (obs.observed_return() - mu) / p
    } else {
        mu
    };
    Ok(CandidateReturnEstimate { candidate: j, value })
}

/// Per-step record of the quantities entering a DR contribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrDiagnostics {
    pub agent: usize,
    pub turn: usize,
    pub selected: usize,
    pub predictions: Vec<f64>,
    pub ips_weight: f64,
    pub estimates: Vec<f64>,
    pub value: f64,
}

/// `Σ_j p_j Ĝ^(j) − Σ_{j≠i} p_j^{-i} Ĝ^(j)` with logged `p` and `p^{-i}`
/// recomputed from `router` on the reduced candidate set.
pub fn routing_marginal_contribution(
    obs: &LoggedObservation,
    i: usize,
    model: &dyn ReturnModel,
    router: &Router,
) -> Result<MarginalContribution> {
    Ok(dr_diagnostics(obs, i, model, router)?.into_contribution())
}

pub fn dr_diagnostics(obs: &LoggedObservation, i: usize, model: &dyn ReturnModel, router: &Router) -> Result<DrDiagnostics> {
    let k = obs.n_candidates();
    if k < 2 {
        return Err(Error::Usage("routing contribution needs at least two candidates".into()));
    }
    if i >= k {
        return Err(config_err!("agent {} outside {} candidates", i, k));
    }
    let estimates: Vec<f64> =
        (0..k).map(|j| dr_candidate_return(obs, j, model).map(|e| e.value)).collect::<Result<_>>()?;
    let predictions: Vec<f64> =
        obs.candidates().iter().map(|c| model.predict(obs.ctx(), c)).collect::<Result<_>>()?;
    let without = router.route_probabilities_without(obs.ctx(), obs.candidates(), i)?;
    let with_all: f64 = obs.propensities().iter().zip(&estimates).map(|(p, g)| p * g).sum();
    let others: f64 = (0..k).filter(|&j| j != i).zip(&without).map(|(j, p)| p * estimates[j]).sum();
    Ok(DrDiagnostics {
        agent: i,
        turn: obs.turn(),
        selected: obs.selected(),
        predictions,
        ips_weight: 1.0 / obs.propensities()[obs.selected()],
        estimates,
        value: with_all - others,
    })
}

impl DrDiagnostics {
    pub fn into_contribution(self) -> MarginalContribution {
        MarginalContribution { agent: self.agent, turn: self.turn, value: self.value, kind: EstimatorKind::Dr }
    }
}

/// Observed return for the selected agent, zero for everyone else.
pub fn winner_take_all_signal(obs: &LoggedObservation, i: usize) -> MarginalContribution {
    let value = if i == obs.selected() { obs.observed_return() } else { 0.0 };
    MarginalContribution { agent: i, turn: obs.turn(), value, kind: EstimatorKind::Wta }
}

/// The undivided shared return for every agent.
pub fn shared_signal(g: f64, n_agents: usize, turn: usize) -> Vec<MarginalContribution> {
    (0..n_agents).map(|agent| MarginalContribution { agent, turn, value: g, kind: EstimatorKind::Shared }).collect()
}

/// Realized state of an episode at turn `t`.
#[derive(Debug, Clone, Copy)]
pub struct TurnState<'a> {
    pub ctx: &'a Context,
    pub turn: usize,
    pub proposals: &'a [Proposal],
    /// Realized return-to-go `G_t`.
    pub realized_return: f64,
}

/// Samples `G_t^{-i}`: agent `i`'s proposal is replaced by a draw from `q`,
/// downstream agents are redrawn under the counterfactual prefix, the
/// mechanism and environment run with fresh randomness to the horizon.
pub fn counterfactual_return(
    state: &TurnState<'_>,
    i: usize,
    q: &ReplacementPolicy,
    policies: &[AgentPolicy],
    mechanism: &Mechanism,
    env: &EnvSpec,
    rng: &mut Stream,
) -> Result<f64> {
    if matches!(mechanism, Mechanism::Router(_)) {
        return Err(Error::Usage("leave-one-out credit needs a collaborative mechanism".into()));
    }
    if i >= state.proposals.len() || state.proposals.len() != policies.len() {
        return Err(config_err!("agent {} outside a team of {}", i, policies.len()));
    }
    policy::check_team(policies)?;
    let prefix = &state.proposals[..i];
    let z = policies[i].input(state.ctx, prefix)?;
    let replacement = q.sample(&z, rng)?;
    let mut cf = prefix.to_vec();
    cf.push(Proposal { agent: i, token: replacement.token });
    let cf = policy::sample_from(policies, state.ctx, &cf, rng)?.proposals;
    let deployment = mechanism.deploy(state.ctx, &cf, rng.next_u64())?;
    let r = env.reward(state.ctx, &deployment.output, rng)?;
    let rest = rollout::continuation(env, policies, mechanism, state.ctx, state.turn, &deployment.output, rng)?;
    Ok(r + rest)
}

/// `Δ̂ = G_t − G_t^{-i}` from one counterfactual rollout.
pub fn loo_marginal_contribution(
    state: &TurnState<'_>,
    i: usize,
    q: &ReplacementPolicy,
    policies: &[AgentPolicy],
    mechanism: &Mechanism,
    env: &EnvSpec,
    rng: &mut Stream,
) -> Result<MarginalContribution> {
    let g_minus = counterfactual_return(state, i, q, policies, mechanism, env, rng)?;
    Ok(MarginalContribution { agent: i, turn: state.turn, value: state.realized_return - g_minus, kind: EstimatorKind::Loo })
}

/// Rollout estimate of the expected return-to-go after deploying `y`:
/// the table reward of `y` plus the mean realized continuation over
/// `n_rollouts` simulated futures. Equals the table reward on the last turn.
#[allow(clippy::too_many_arguments)]
pub fn mr_estimate(
    env: &EnvSpec,
    ctx: &Context,
    turn: usize,
    y: &DeployedOutput,
    policies: &[AgentPolicy],
    mechanism: &Mechanism,
    n_rollouts: usize,
    rng: &mut Stream,
) -> Result<f64> {
    if n_rollouts == 0 {
        return Err(config_err!("n_rollouts must be at least 1"));
    }
    let immediate = env.expected_reward(ctx.id, y)?;
    if turn + 1 >= env.horizon {
        return Ok(immediate);
    }
    let mut total = 0.0;
    for _ in 0..n_rollouts {
        total += rollout::continuation(env, policies, mechanism, ctx, turn, y, rng)?;
    }
    Ok(immediate + total / n_rollouts as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{OutputKey, OutputSpace, RewardNoise};
    use crate::math::abs;
    use crate::mechanism::{log_observation, Aggregator};
    use crate::policy::Conditioning;
    use crate::stream::derive;

    fn ctx(n: usize, id: usize) -> Context {
        let mut features = vec![0.0; n];
        features[id] = 1.0;
        Context { id, features }
    }

    fn cand(agent: usize, token: usize) -> Proposal {
        Proposal { agent, token }
    }

    fn uniform_router(k: usize, v: usize, d: usize) -> Router {
        Router::new(LinearScorer::zeros(d, k, v), 1.0, 0.0).unwrap()
    }

    #[test]
    fn zero_predictor_predicts_zero() {
        let pred = RewardPredictor::new(2, 3, 4, PredictorConfig::default());
        assert_eq!(pred.predict_return(&ctx(2, 1), &cand(2, 3)).unwrap(), 0.0);
    }

    #[test]
    fn ips_weights() {
        let cfg = PredictorConfig::default();
        assert_eq!(cfg.ips_weight(1.0), 1.0);
        assert_eq!(cfg.ips_weight(0.01), 3.0);
        assert_eq!(cfg.ips_weight(0.5), 2.0);
    }

    #[test]
    fn prediction_ignores_other_candidates() {
        let mut pred = RewardPredictor::new(2, 2, 2, PredictorConfig::default());
        pred.scorer.weights_mut().iter_mut().enumerate().for_each(|(k, w)| *w = 0.1 * k as f64);
        let c = ctx(2, 0);
        let a = pred.predict_return(&c, &cand(1, 1)).unwrap();
        let obs = log_observation(c.clone(), &[cand(0, 0), cand(1, 1)], &[0.5, 0.5], 0, 1.0, 0, 0).unwrap();
        let b = dr_candidate_return(&obs, 1, &pred).unwrap().value;
        assert_eq!(a, b);
    }

    /// Uniform routing over a deterministic table; every cell is realizable.
    fn fit_on_uniform_logs(steps: usize) -> (RewardPredictor, Vec<Vec<Vec<f64>>>) {
        let (d, k, v) = (3, 2, 3);
        let mut rng = derive(31, 0);
        let table: Vec<Vec<Vec<f64>>> = (0..d)
            .map(|_| (0..k).map(|_| (0..v).map(|_| (stream::uniform(&mut rng) * 10.0).floor() / 10.0).collect()).collect())
            .collect();
        let router = uniform_router(k, v, d);
        let mut buffer = ReplayBuffer::new(50_000);
        for _ in 0..4000 {
            let c = ctx(d, (stream::uniform(&mut rng) * d as f64) as usize);
            let cands: Vec<Proposal> =
                (0..k).map(|a| cand(a, (stream::uniform(&mut rng) * v as f64) as usize)).collect();
            let p = router.route_probabilities(&c, &cands).unwrap();
            let sel = crate::mechanism::select(&p, &mut rng).unwrap();
            let g = table[c.id][sel][cands[sel].token];
            buffer.push(log_observation(c, &cands, &p, sel, g, 0, 0).unwrap());
        }
        let mut pred = RewardPredictor::new(d, k, v, PredictorConfig::default());
        for _ in 0..steps {
            pred.update(&buffer, &mut rng).unwrap();
        }
        (pred, table)
    }

    #[test]
    fn predictor_converges_on_realizable_target() {
        let (pred, table) = fit_on_uniform_logs(5000);
        let mut se = 0.0;
        let mut n = 0.0;
        for (c, per_agent) in table.iter().enumerate() {
            for (a, row) in per_agent.iter().enumerate() {
                for (t, target) in row.iter().enumerate() {
                    let e = pred.predict_return(&ctx(3, c), &cand(a, t)).unwrap() - target;
                    se += e * e;
                    n += 1.0;
                }
            }
        }
        assert!(se / n < 1e-3, "mse {}", se / n);
    }

    #[test]
    fn empty_buffer_is_rejected() {
        let mut pred = RewardPredictor::new(1, 1, 1, PredictorConfig::default());
        assert!(pred.update(&ReplayBuffer::new(4), &mut derive(0, 0)).is_err());
    }

    #[test]
    fn replay_buffer_is_fifo() {
        let mut buf = ReplayBuffer::new(5);
        for t in 0..8 {
            buf.push(log_observation(ctx(1, 0), &[cand(0, 0)], &[1.0], 0, 0.0, 0, t).unwrap());
        }
        assert_eq!(buf.len(), 5);
        let turns: Vec<usize> = buf.iter().map(|o| o.turn()).collect();
        assert_eq!(turns, vec![3, 4, 5, 6, 7]);
    }

    #[test]
    fn dr_branches() {
        let c = ctx(1, 0);
        let mu = |_: &Context, p: &Proposal| 0.25 * (p.agent + 1) as f64;
        let obs = log_observation(c.clone(), &[cand(0, 0), cand(1, 0)], &[0.4, 0.6], 1, 0.9, 0, 0).unwrap();
        assert_eq!(dr_candidate_return(&obs, 0, &mu).unwrap().value, 0.25);
        let sel = dr_candidate_return(&obs, 1, &mu).unwrap().value;
        assert!(abs(sel - (0.5 + (0.9 - 0.5) / 0.6)) < 1e-15);

        let zero = |_: &Context, _: &Proposal| 0.0;
        let unit = log_observation(c.clone(), &[cand(0, 0), cand(1, 0)], &[1.0, 0.0], 0, 0.7, 0, 0).unwrap();
        assert_eq!(dr_candidate_return(&unit, 0, &zero).unwrap().value, 0.7);
    }

    #[test]
    fn routing_contribution_two_agents() {
        // p = (1, 0), removing agent 0 leaves agent 1 with probability 1
        let c = ctx(1, 0);
        let g = [0.8, 0.3];
        let mu = move |_: &Context, p: &Proposal| g[p.agent];
        let obs = log_observation(c, &[cand(0, 0), cand(1, 0)], &[1.0, 0.0], 0, 0.8, 0, 0).unwrap();
        let router = uniform_router(2, 1, 1);
        let d = routing_marginal_contribution(&obs, 0, &mu, &router).unwrap();
        assert!(abs(d.value - (g[0] - g[1])) < 1e-15);
        assert_eq!(d.kind, EstimatorKind::Dr);
    }

    #[test]
    fn identical_candidates_contribute_nothing() {
        let c = ctx(1, 0);
        let cands = [cand(0, 1), cand(1, 1), cand(2, 1)];
        let mu = |_: &Context, _: &Proposal| 0.4;
        let router = uniform_router(3, 2, 1);
        for sel in 0..3 {
            let obs = log_observation(c.clone(), &cands, &[1.0 / 3.0; 3], sel, 0.4, 0, 0).unwrap();
            for i in 0..3 {
                assert!(abs(routing_marginal_contribution(&obs, i, &mu, &router).unwrap().value) < 1e-12);
            }
        }
    }

    #[test]
    fn wta_and_shared() {
        let obs = log_observation(ctx(1, 0), &[cand(0, 0), cand(1, 0), cand(2, 1)], &[0.2, 0.3, 0.5], 2, 0.6, 0, 0).unwrap();
        assert_eq!(winner_take_all_signal(&obs, 2).value, 0.6);
        assert_eq!(winner_take_all_signal(&obs, 0).value, 0.0);
        let total: f64 = (0..3).map(|i| winner_take_all_signal(&obs, i).value).sum();
        assert_eq!(total, 0.6);
        assert!(shared_signal(0.7, 3, 0).iter().all(|m| m.value == 0.7 && m.kind == EstimatorKind::Shared));
    }

    fn collab_env(table: Vec<f64>, noise: RewardNoise) -> EnvSpec {
        EnvSpec {
            name: "collab".into(),
            n_contexts: 1,
            features: None,
            n_agents: 2,
            vocab_size: 2,
            horizon: 1,
            output_space: OutputSpace::Joint,
            reward_table: vec![table],
            reward_noise: noise,
            transition_table: None,
            initial_distribution: None,
            context_labels: None,
            agent_specialties: None,
            optimum: None,
            description: None,
        }
    }

    #[test]
    fn loo_with_identical_replacement_and_irrelevant_downstream_is_zero() {
        let env = collab_env(vec![0.1, 0.1, 0.7, 0.7], RewardNoise::Deterministic);
        let team: Vec<AgentPolicy> = (0..2).map(|i| AgentPolicy::new(i, Conditioning::Independent, 1, 2, 2)).collect();
        let mech = Mechanism::Aggregator(Aggregator::TupleIdentity);
        let c = env.context(0);
        let props = [cand(0, 1), cand(1, 0)];
        let g = env.expected_reward(0, &DeployedOutput { key: OutputKey::Joint(vec![1, 0]) }).unwrap();
        let state = TurnState { ctx: &c, turn: 0, proposals: &props, realized_return: g };
        let q = ReplacementPolicy::FixedToken { token: 1, vocab_size: 2 };
        let mut rng = derive(3, 0);
        for _ in 0..20 {
            assert_eq!(loo_marginal_contribution(&state, 0, &q, &team, &mech, &env, &mut rng).unwrap().value, 0.0);
        }
    }

    #[test]
    fn loo_rejects_routing() {
        let env = collab_env(vec![0.0; 4], RewardNoise::Deterministic);
        let team: Vec<AgentPolicy> = (0..2).map(|i| AgentPolicy::new(i, Conditioning::Independent, 1, 2, 2)).collect();
        let mech = Mechanism::Router(uniform_router(2, 2, 1));
        let c = env.context(0);
        let props = [cand(0, 1), cand(1, 0)];
        let state = TurnState { ctx: &c, turn: 0, proposals: &props, realized_return: 0.0 };
        let q = ReplacementPolicy::Uniform { vocab_size: 2 };
        assert!(loo_marginal_contribution(&state, 0, &q, &team, &mech, &env, &mut derive(0, 0)).is_err());
    }

    #[test]
    fn mr_single_turn_is_reward() {
        let env = collab_env(vec![0.1, 0.4, 0.7, 1.0], RewardNoise::Bernoulli);
        let team: Vec<AgentPolicy> = (0..2).map(|i| AgentPolicy::new(i, Conditioning::Independent, 1, 2, 2)).collect();
        let mech = Mechanism::Aggregator(Aggregator::TupleIdentity);
        let y = DeployedOutput { key: OutputKey::Joint(vec![0, 1]) };
        for n in [1, 7, 100] {
            assert_eq!(mr_estimate(&env, &env.context(0), 0, &y, &team, &mech, n, &mut derive(1, 0)).unwrap(), 0.4);
        }
        assert!(mr_estimate(&env, &env.context(0), 0, &y, &team, &mech, 0, &mut derive(1, 0)).is_err());
    }
}
