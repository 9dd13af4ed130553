//! Mechanisms that turn K proposals into one deployed output, and the logging
//! map that records what learning is allowed to see.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::env::{Context, DeployedOutput, OutputKey, OutputSpace, Proposal};
use crate::error::{config_err, Error, Result};
use crate::math::{self, abs};
use crate::stream::{self, Stream};

/// Normalization tolerance accepted by [`select`].
pub const SELECT_TOL: f64 = 1e-6;

/// Linear score over `context ⊕ onehot(token) ⊕ onehot(agent)` plus the
/// `context ⊗ onehot(agent, token)` cross block.
///
/// With one-hot contexts the cross block makes the scorer tabular in
/// (context, agent, token), so any reward table is exactly representable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearScorer {
    pub context_dim: usize,
    pub n_agents: usize,
    pub vocab_size: usize,
    weights: Vec<f64>,
}

impl LinearScorer {
    pub fn zeros(context_dim: usize, n_agents: usize, vocab_size: usize) -> Self {
        let dim = Self::dim_for(context_dim, n_agents, vocab_size);
        LinearScorer { context_dim, n_agents, vocab_size, weights: vec![0.0; dim] }
    }

    pub fn dim_for(context_dim: usize, n_agents: usize, vocab_size: usize) -> usize {
        context_dim + vocab_size + n_agents + context_dim * n_agents * vocab_size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn check(&self, ctx: &Context, p: &Proposal) -> Result<()> {
        if ctx.features.len() != self.context_dim {
            return Err(Error::Dimension { what: "scorer context", expected: self.context_dim, found: ctx.features.len() });
        }
        if p.agent >= self.n_agents || p.token >= self.vocab_size {
            return Err(config_err!("candidate a{}:t{} outside scorer range", p.agent, p.token));
        }
        Ok(())
    }

    /// Sparse feature vector as (index, value) pairs.
    pub fn features(&self, ctx: &Context, p: &Proposal) -> Result<Vec<(usize, f64)>> {
        self.check(ctx, p)?;
        let d = self.context_dim;
        let mut out = Vec::with_capacity(2 * d + 2);
        out.extend(ctx.features.iter().copied().enumerate().filter(|(_, x)| *x != 0.0));
        out.push((d + p.token, 1.0));
        out.push((d + self.vocab_size + p.agent, 1.0));
        let base = d + self.vocab_size + self.n_agents;
        let cell = p.agent * self.vocab_size + p.token;
        let width = self.n_agents * self.vocab_size;
        out.extend(
            ctx.features.iter().enumerate().filter(|(_, x)| **x != 0.0).map(|(k, &x)| (base + k * width + cell, x)),
        );
        Ok(out)
    }

    pub fn score(&self, ctx: &Context, p: &Proposal) -> Result<f64> {
        Ok(self.features(ctx, p)?.iter().map(|&(k, x)| self.weights[k] * x).sum())
    }
}

/// Probabilities of an epsilon-mixed temperature softmax over `scores`:
/// `(1 − ε)·softmax(s/τ) + ε/K`.
pub fn mixed_softmax(scores: &[f64], tau: f64, epsilon: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(config_err!("router temperature must be positive, got {tau}"));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(config_err!("router exploration must lie in [0, 1], got {epsilon}"));
    }
    if scores.is_empty() {
        return Err(config_err!("router needs at least one candidate"));
    }
    let scaled: Vec<f64> = scores.iter().map(|s| s / tau).collect();
    let k = scores.len() as f64;
    Ok(math::softmax(&scaled).into_iter().map(|p| (1.0 - epsilon) * p + epsilon / k).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Router {
    pub scorer: LinearScorer,
    pub tau: f64,
    pub epsilon: f64,
}

impl Router {
    pub fn new(scorer: LinearScorer, tau: f64, epsilon: f64) -> Result<Self> {
        mixed_softmax(&[0.0], tau, epsilon)?;
        Ok(Router { scorer, tau, epsilon })
    }

    pub fn scores(&self, ctx: &Context, candidates: &[Proposal]) -> Result<Vec<f64>> {
        candidates.iter().map(|c| self.scorer.score(ctx, c)).collect()
    }

    pub fn route_probabilities(&self, ctx: &Context, candidates: &[Proposal]) -> Result<Vec<f64>> {
        mixed_softmax(&self.scores(ctx, candidates)?, self.tau, self.epsilon)
    }

    /// Router probabilities over the candidate list with position `removed`
    /// deleted; the exploration mass is spread over the remaining K − 1.
    pub fn route_probabilities_without(&self, ctx: &Context, candidates: &[Proposal], removed: usize) -> Result<Vec<f64>> {
        if candidates.len() < 2 {
            return Err(Error::Usage("cannot remove sole agent".into()));
        }
        if removed >= candidates.len() {
            return Err(config_err!("removed index {} outside {} candidates", removed, candidates.len()));
        }
        let reduced: Vec<Proposal> =
            candidates.iter().enumerate().filter(|(j, _)| *j != removed).map(|(_, c)| *c).collect();
        self.route_probabilities(ctx, &reduced)
    }

    /// Index with the highest score; ties go to the lowest index.
    pub fn greedy(&self, ctx: &Context, candidates: &[Proposal]) -> Result<usize> {
        let scores = self.scores(ctx, candidates)?;
        let mut best = 0;
        for (j, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = j;
            }
        }
        Ok(best)
    }
}

/// Categorical draw of the deployed index.
pub fn select(probabilities: &[f64], rng: &mut Stream) -> Result<usize> {
    math::check_distribution(probabilities, SELECT_TOL)?;
    Ok(stream::categorical(probabilities, rng))
}

/// Deterministic collaborative combination rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum Aggregator {
    /// Deploys the ordered tuple of all tokens.
    TupleIdentity,
    /// Deploys the proposal whose token has the highest fixed score; ties go
    /// to the earliest agent.
    SelectMaxScore { token_scores: Vec<f64> },
}

impl Aggregator {
    pub fn output_space(&self) -> OutputSpace {
        match self {
            Aggregator::TupleIdentity => OutputSpace::Joint,
            Aggregator::SelectMaxScore { .. } => OutputSpace::Selected,
        }
    }

    pub fn aggregate(&self, _ctx: &Context, proposals: &[Proposal]) -> Result<DeployedOutput> {
        if proposals.is_empty() {
            return Err(config_err!("aggregation needs at least one proposal"));
        }
        let key = match self {
            Aggregator::TupleIdentity => OutputKey::Joint(proposals.iter().map(|p| p.token).collect()),
            Aggregator::SelectMaxScore { token_scores } => {
                let score = |p: &Proposal| {
                    token_scores.get(p.token).copied().ok_or_else(|| config_err!("no aggregation score for token {}", p.token))
                };
                let mut best = proposals[0];
                let mut best_score = score(&best)?;
                for p in &proposals[1..] {
                    let s = score(p)?;
                    if s > best_score {
                        best = *p;
                        best_score = s;
                    }
                }
                OutputKey::Selected(best)
            }
        };
        Ok(DeployedOutput { key })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AllocationRule {
    SelectedIndicator,
    UniformShare,
}

/// Fraction of the deployed reward assigned to each of `k` agents.
pub fn allocation(rule: AllocationRule, k: usize, selected: Option<usize>) -> Result<Vec<f64>> {
    match rule {
        AllocationRule::SelectedIndicator => {
            let i = selected.ok_or_else(|| Error::Usage("selected-indicator allocation needs a selected index".into()))?;
            if i >= k {
                return Err(config_err!("selected index {} outside {} agents", i, k));
            }
            let mut alpha = vec![0.0; k];
            alpha[i] = 1.0;
            Ok(alpha)
        }
        AllocationRule::UniformShare => Ok(vec![1.0 / k as f64; k]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Mechanism {
    Router(Router),
    Aggregator(Aggregator),
}

/// Result of applying a mechanism at one turn.
#[derive(Debug, Clone, PartialEq)]
pub struct Deployment {
    pub output: DeployedOutput,
    pub selected: Option<usize>,
    pub propensities: Option<Vec<f64>>,
}

impl Mechanism {
    pub fn output_space(&self) -> OutputSpace {
        match self {
            Mechanism::Router(_) => OutputSpace::Selected,
            Mechanism::Aggregator(a) => a.output_space(),
        }
    }

    pub fn allocation_rule(&self) -> AllocationRule {
        match self {
            Mechanism::Router(_) => AllocationRule::SelectedIndicator,
            Mechanism::Aggregator(_) => AllocationRule::UniformShare,
        }
    }

    pub fn router(&self) -> Option<&Router> {
        match self {
            Mechanism::Router(r) => Some(r),
            Mechanism::Aggregator(_) => None,
        }
    }

    /// Applies the mechanism; routing randomness comes only from `mech_seed`.
    pub fn deploy(&self, ctx: &Context, proposals: &[Proposal], mech_seed: u64) -> Result<Deployment> {
        match self {
            Mechanism::Router(router) => {
                let p = router.route_probabilities(ctx, proposals)?;
                let mut xi = Stream::seed_from_u64(mech_seed);
                let i = select(&p, &mut xi)?;
                Ok(Deployment {
                    output: DeployedOutput { key: OutputKey::Selected(proposals[i]) },
                    selected: Some(i),
                    propensities: Some(p),
                })
            }
            Mechanism::Aggregator(agg) => {
                Ok(Deployment { output: agg.aggregate(ctx, proposals)?, selected: None, propensities: None })
            }
        }
    }

    /// Every output the mechanism can deploy for these proposals, with its
    /// probability.
    pub fn outcomes(&self, ctx: &Context, proposals: &[Proposal]) -> Result<Vec<(f64, DeployedOutput)>> {
        match self {
            Mechanism::Router(router) => {
                let p = router.route_probabilities(ctx, proposals)?;
                Ok(p.into_iter()
                    .zip(proposals)
                    .map(|(pj, c)| (pj, DeployedOutput { key: OutputKey::Selected(*c) }))
                    .collect())
            }
            Mechanism::Aggregator(agg) => Ok(vec![(1.0, agg.aggregate(ctx, proposals)?)]),
        }
    }
}

pub const LOG_SCHEMA_VERSION: u32 = 1;

/// Filtered record of one routed turn.
///
/// Only the deployed candidate's return is stored; there is no field that
/// could hold the reward of an unselected candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawObservation", into = "RawObservation")]
pub struct LoggedObservation {
    ctx: Context,
    candidates: Vec<Proposal>,
    selected: usize,
    propensities: Vec<f64>,
    observed_return: f64,
    mech_seed: u64,
    turn: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawObservation {
    schema_version: u32,
    ctx: Context,
    candidates: Vec<Proposal>,
    selected: usize,
    propensities: Vec<f64>,
    observed_return: f64,
    mech_seed: u64,
    turn: usize,
}

impl TryFrom<RawObservation> for LoggedObservation {
    type Error = Error;

    fn try_from(raw: RawObservation) -> Result<Self> {
        if raw.schema_version != LOG_SCHEMA_VERSION {
            return Err(config_err!("unsupported log schema version {}", raw.schema_version));
        }
        log_observation(raw.ctx, &raw.candidates, &raw.propensities, raw.selected, raw.observed_return, raw.mech_seed, raw.turn)
    }
}

impl From<LoggedObservation> for RawObservation {
    fn from(o: LoggedObservation) -> Self {
        RawObservation {
            schema_version: LOG_SCHEMA_VERSION,
            ctx: o.ctx,
            candidates: o.candidates,
            selected: o.selected,
            propensities: o.propensities,
            observed_return: o.observed_return,
            mech_seed: o.mech_seed,
            turn: o.turn,
        }
    }
}

/// The logging map: validates and copies the routed turn into a record.
pub fn log_observation(
    ctx: Context,
    candidates: &[Proposal],
    propensities: &[f64],
    selected: usize,
    observed_return: f64,
    mech_seed: u64,
    turn: usize,
) -> Result<LoggedObservation> {
    if candidates.is_empty() || candidates.len() != propensities.len() {
        return Err(config_err!("{} candidates with {} propensities", candidates.len(), propensities.len()));
    }
    if selected >= candidates.len() {
        return Err(config_err!("selected index {} outside {} candidates", selected, candidates.len()));
    }
    math::check_distribution(propensities, 1e-9)?;
    if !observed_return.is_finite() {
        return Err(config_err!("observed return must be finite"));
    }
    Ok(LoggedObservation {
        ctx,
        candidates: candidates.to_vec(),
        selected,
        propensities: propensities.to_vec(),
        observed_return,
        mech_seed,
        turn,
    })
}

impl LoggedObservation {
    pub fn ctx(&self) -> &Context {
        &self.ctx
    }

    pub fn candidates(&self) -> &[Proposal] {
        &self.candidates
    }

    pub fn selected(&self) -> usize {
        self.selected
    }

    pub fn propensities(&self) -> &[f64] {
        &self.propensities
    }

    pub fn observed_return(&self) -> f64 {
        self.observed_return
    }

    pub fn mech_seed(&self) -> u64 {
        self.mech_seed
    }

    pub fn turn(&self) -> usize {
        self.turn
    }

    pub fn n_candidates(&self) -> usize {
        self.candidates.len()
    }
}

/// True when every entry is at least `floor`, within `tol`.
pub fn respects_floor(probabilities: &[f64], floor: f64, tol: f64) -> bool {
    probabilities.iter().all(|&p| p >= floor - tol)
}

/// Largest absolute elementwise gap between two vectors.
pub fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| abs(x - y)).fold(0.0, f64::max)
}
