//! Ground truth by exhaustive enumeration.
//!
//! [`Oracle`] sums over contexts, joint proposals, mechanism outcomes and
//! transitions. Policies are stationary, so each context induces one output
//! distribution `P_c(y)` and the per-turn values follow by backward
//! induction:
//!
//! ```text
//! Q_t(c, y) = r̄(c, y) + Σ_c' P(c' | c, y) V_{t+1}(c')
//! V_t(c)    = Σ_y P_c(y) Q_t(c, y)
//! ```
//!
//! Second moments use the same recursion with
//! `Q2_t = E[r²] + 2 r̄ Σ P V_{t+1} + Σ P W_{t+1}`.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::env::{Context, EnvSpec, OutputSpace, Proposal, RewardNoise};
use crate::error::{config_err, Error, Result};
use crate::estimator::{self, TurnState};
use crate::math::{self, Matrix};
use crate::mechanism::{self, Aggregator, Mechanism, Router};
use crate::policy::{self, AgentPolicy, Conditioning, ConditioningInput, DifferentiablePolicy, ReplacementPolicy};
use crate::rollout;
use crate::stream::Stream;

/// Largest number of enumerated paths an oracle accepts.
pub const MAX_PATHS: u128 = 1_000_000;

/// `n_contexts · Π_t (V^K · selections · next contexts)`.
pub fn path_cardinality(env: &EnvSpec, mechanism: &Mechanism) -> u128 {
    let k = env.n_agents as u32;
    let profiles = (env.vocab_size as u128).saturating_pow(k);
    let selections = match mechanism {
        Mechanism::Router(_) => env.n_agents as u128,
        Mechanism::Aggregator(_) => 1,
    };
    let mut total = env.n_contexts as u128;
    for t in 0..env.horizon {
        let next = if t + 1 < env.horizon { env.n_contexts as u128 } else { 1 };
        total = total.saturating_mul(profiles).saturating_mul(selections).saturating_mul(next);
    }
    total
}

pub struct Oracle<'a> {
    env: &'a EnvSpec,
    policies: &'a [AgentPolicy],
    mechanism: &'a Mechanism,
    conditioning: Conditioning,
    contexts: Vec<Context>,
    profiles: Vec<Vec<(Vec<Proposal>, f64)>>,
    output_dist: Vec<Vec<f64>>,
    value: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    occupancy: Vec<Vec<f64>>,
}

impl<'a> Oracle<'a> {
    pub fn new(env: &'a EnvSpec, policies: &'a [AgentPolicy], mechanism: &'a Mechanism) -> Result<Self> {
        rollout::check_compatible(env, policies, mechanism)?;
        let cardinality = path_cardinality(env, mechanism);
        if cardinality > MAX_PATHS {
            return Err(Error::TooLarge { cardinality, limit: MAX_PATHS });
        }
        let conditioning = policy::check_team(policies)?;
        let contexts: Vec<Context> = (0..env.n_contexts).map(|c| env.context(c)).collect();
        let mut oracle = Oracle {
            env,
            policies,
            mechanism,
            conditioning,
            contexts,
            profiles: Vec::new(),
            output_dist: Vec::new(),
            value: Vec::new(),
            second: Vec::new(),
            occupancy: Vec::new(),
        };
        for c in 0..env.n_contexts {
            let profiles = oracle.completions(&oracle.contexts[c], &[], env.n_agents)?;
            let mut dist = vec![0.0; env.n_outputs()];
            for (profile, w) in &profiles {
                for (p, y) in mechanism.outcomes(&oracle.contexts[c], profile)? {
                    dist[env.output_index(&y.key)?] += w * p;
                }
            }
            oracle.profiles.push(profiles);
            oracle.output_dist.push(dist);
        }
        oracle.backward();
        oracle.forward();
        Ok(oracle)
    }

    fn backward(&mut self) {
        let (t_max, n_ctx) = (self.env.horizon, self.env.n_contexts);
        self.value = vec![vec![0.0; n_ctx]; t_max + 1];
        self.second = vec![vec![0.0; n_ctx]; t_max + 1];
        for t in (0..t_max).rev() {
            for c in 0..n_ctx {
                let (mut v, mut w) = (0.0, 0.0);
                for (o, &p) in self.output_dist[c].iter().enumerate() {
                    if p != 0.0 {
                        v += p * self.q_value(t, c, o);
                        w += p * self.q_second(t, c, o);
                    }
                }
                self.value[t][c] = v;
                self.second[t][c] = w;
            }
        }
    }

    fn forward(&mut self) {
        let n_ctx = self.env.n_contexts;
        let mut d = self.env.initial_probabilities();
        self.occupancy.clear();
        for t in 0..self.env.horizon {
            let mut next = vec![0.0; n_ctx];
            if t + 1 < self.env.horizon {
                for (c, (dist, &dc)) in self.output_dist.iter().zip(&d).enumerate() {
                    for (o, &p) in dist.iter().enumerate() {
                        if let Some(row) = self.env.transition_row(c, o) {
                            for (c2, &pt) in row.iter().enumerate() {
                                next[c2] += dc * p * pt;
                            }
                        }
                    }
                }
            }
            self.occupancy.push(core::mem::replace(&mut d, next));
        }
    }

    fn continuation(&self, t: usize, c: usize, o: usize, table: &[Vec<f64>]) -> f64 {
        if t + 1 >= self.env.horizon {
            return 0.0;
        }
        match self.env.transition_row(c, o) {
            Some(row) => row.iter().zip(&table[t + 1]).map(|(p, v)| p * v).sum(),
            None => 0.0,
        }
    }

    pub fn env(&self) -> &EnvSpec {
        self.env
    }

    pub fn policies(&self) -> &[AgentPolicy] {
        self.policies
    }

    /// Exact `E[Σ_t r_t]` from the initial distribution.
    pub fn j_sys(&self) -> f64 {
        self.occupancy[0].iter().zip(&self.value[0]).map(|(d, v)| d * v).sum()
    }

    /// `V_t(c)`; zero at the horizon.
    pub fn value(&self, t: usize, c: usize) -> f64 {
        self.value[t][c]
    }

    /// `W_t(c) = E[G_t² | c_t = c]`.
    pub fn second_moment(&self, t: usize, c: usize) -> f64 {
        self.second[t][c]
    }

    /// Probability of being in each context at turn `t`.
    pub fn occupancy(&self, t: usize) -> &[f64] {
        &self.occupancy[t]
    }

    /// Output distribution induced in context `c` by the team and mechanism.
    pub fn output_distribution(&self, c: usize) -> &[f64] {
        &self.output_dist[c]
    }

    /// `E[G_t | c_t = c, y_t = o]`.
    pub fn q_value(&self, t: usize, c: usize, o: usize) -> f64 {
        self.env.reward_table[c][o] + self.continuation(t, c, o, &self.value)
    }

    /// `E[G_t² | c_t = c, y_t = o]`.
    pub fn q_second(&self, t: usize, c: usize, o: usize) -> f64 {
        let r = self.env.reward_table[c][o];
        self.env.reward_second_moment(c, o)
            + 2.0 * r * self.continuation(t, c, o, &self.value)
            + self.continuation(t, c, o, &self.second)
    }

    /// Every profile of agents `prefix.len()..upto` extending `prefix`, with
    /// its conditional probability.
    pub fn completions(&self, ctx: &Context, prefix: &[Proposal], upto: usize) -> Result<Vec<(Vec<Proposal>, f64)>> {
        let mut out = vec![(prefix.to_vec(), 1.0)];
        for agent in prefix.len()..upto {
            let mut grown = Vec::with_capacity(out.len() * self.env.vocab_size);
            for (head, w) in out {
                let z = self.policies[agent].input(ctx, &head)?;
                for (token, p) in self.policies[agent].action_probabilities(&z)?.into_iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let mut next = head.clone();
                    next.push(Proposal { agent, token });
                    grown.push((next, w * p));
                }
            }
            out = grown;
        }
        Ok(out)
    }

    fn outcome_moments(&self, t: usize, ctx: &Context, proposals: &[Proposal]) -> Result<(f64, f64)> {
        let (mut m1, mut m2) = (0.0, 0.0);
        for (p, y) in self.mechanism.outcomes(ctx, proposals)? {
            let o = self.env.output_index(&y.key)?;
            m1 += p * self.q_value(t, ctx.id, o);
            m2 += p * self.q_second(t, ctx.id, o);
        }
        Ok((m1, m2))
    }

    /// `E[G_t | h, a_t]` for a complete (or, under routing, reduced)
    /// candidate list, averaging over the mechanism's randomness.
    pub fn profile_value(&self, t: usize, ctx: &Context, proposals: &[Proposal]) -> Result<f64> {
        Ok(self.outcome_moments(t, ctx, proposals)?.0)
    }

    /// `(E[G_t | h, a^(1:m)], E[G_t² | h, a^(1:m)])` with the remaining
    /// agents drawn from the team.
    pub fn moments_given(&self, t: usize, ctx: &Context, prefix: &[Proposal]) -> Result<(f64, f64)> {
        let (mut m1, mut m2) = (0.0, 0.0);
        for (profile, w) in self.completions(ctx, prefix, self.env.n_agents)? {
            let (a, b) = self.outcome_moments(t, ctx, &profile)?;
            m1 += w * a;
            m2 += w * b;
        }
        Ok((m1, m2))
    }

    pub fn expected_return_given(&self, t: usize, ctx: &Context, prefix: &[Proposal]) -> Result<f64> {
        Ok(self.moments_given(t, ctx, prefix)?.0)
    }

    /// First and second moments of `G_t^{-i}` given the realized upstream
    /// proposals `a^(1:i-1)`: agent `i` draws from `q`, later agents are
    /// redrawn from the team.
    pub fn replacement_moments(&self, t: usize, ctx: &Context, upstream: &[Proposal], q: &ReplacementPolicy) -> Result<(f64, f64)> {
        let i = upstream.len();
        if i >= self.env.n_agents {
            return Err(config_err!("no agent {} to replace", i));
        }
        let z = self.policies[i].input(ctx, upstream)?;
        let (mut m1, mut m2) = (0.0, 0.0);
        let mut head = upstream.to_vec();
        for (token, p) in q.probabilities(&z)?.into_iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            head.push(Proposal { agent: i, token });
            let (a, b) = self.moments_given(t, ctx, &head)?;
            head.pop();
            m1 += p * a;
            m2 += p * b;
        }
        Ok((m1, m2))
    }

    fn require_aggregator(&self) -> Result<()> {
        match self.mechanism {
            Mechanism::Aggregator(_) => Ok(()),
            Mechanism::Router(_) => Err(Error::Usage("routing contributions use removal; call routing_contribution".into())),
        }
    }

    /// `E[G_t − G_t^{-i} | h, a^(1:i)]` conditioned on the full upstream.
    pub fn marginal_given_upstream(&self, t: usize, ctx: &Context, head: &[Proposal], q: &ReplacementPolicy) -> Result<f64> {
        self.require_aggregator()?;
        let (split, _) = head.split_at(head.len().saturating_sub(1));
        let with = self.expected_return_given(t, ctx, head)?;
        let without = self.replacement_moments(t, ctx, split, q)?.0;
        Ok(with - without)
    }

    /// `Δ_{i,t}(z, a^(i))`. Upstream proposals the input does not carry
    /// (independent teams) are averaged over the team.
    pub fn marginal_contribution(&self, t: usize, z: &ConditioningInput, token: usize, q: &ReplacementPolicy) -> Result<f64> {
        self.require_aggregator()?;
        let i = z.agent;
        let ctx = &self.contexts[z.context.id];
        let mut total = 0.0;
        for (mut head, w) in self.completions(ctx, &z.prefix, i)? {
            head.push(Proposal { agent: i, token });
            total += w * self.marginal_given_upstream(t, ctx, &head, q)?;
        }
        Ok(total)
    }

    /// `Σ_j p_j Q(h, a^(j)) − Σ_{j≠i} p_j^{-i} Q(h, a^(j))`, both sums taken
    /// over the mechanism's outcomes for the full and reduced lists.
    pub fn routing_contribution(&self, t: usize, ctx: &Context, profile: &[Proposal], i: usize) -> Result<f64> {
        if self.mechanism.router().is_none() {
            return Err(Error::Usage("routing contribution needs a router".into()));
        }
        if profile.len() < 2 {
            return Err(Error::Usage("cannot remove sole agent".into()));
        }
        let reduced: Vec<Proposal> = profile.iter().copied().filter(|p| p.agent != i).collect();
        if reduced.len() + 1 != profile.len() {
            return Err(config_err!("agent {} does not appear exactly once in the profile", i));
        }
        Ok(self.profile_value(t, ctx, profile)? - self.profile_value(t, ctx, &reduced)?)
    }

    /// `Σ_t E[α_i · r_t]`; for routing `α_i = 1{I = i}`, giving `E[p_i r(h, a^(i))]`.
    pub fn utility(&self, i: usize) -> Result<f64> {
        let k = self.env.n_agents;
        let rule = self.mechanism.allocation_rule();
        let mut total = 0.0;
        for t in 0..self.env.horizon {
            for (c, ctx) in self.contexts.iter().enumerate() {
                let d = self.occupancy[t][c];
                if d == 0.0 {
                    continue;
                }
                for (profile, w) in &self.profiles[c] {
                    for (j, (p, y)) in self.mechanism.outcomes(ctx, profile)?.into_iter().enumerate() {
                        let selected = self.mechanism.router().map(|_| j);
                        let alpha = mechanism::allocation(rule, k, selected)?[i];
                        total += d * w * p * alpha * self.env.expected_reward(c, &y)?;
                    }
                }
            }
        }
        Ok(total)
    }

    fn psi(&self, ctx: &Context, head: &[Proposal]) -> Result<Matrix> {
        let i = head.len() - 1;
        let z = self.policies[i].input(ctx, &head[..i])?;
        self.policies[i].logprob_grad(&z, head[i].token)
    }

    /// `Σ_t E[ψ_{i,t} G_t]`.
    pub fn score_gradient(&self, i: usize) -> Result<Matrix> {
        let theta = self.policies[i].theta();
        let mut grad = Matrix::zeros(theta.rows(), theta.cols());
        for t in 0..self.env.horizon {
            for (c, ctx) in self.contexts.iter().enumerate() {
                let d = self.occupancy[t][c];
                if d == 0.0 {
                    continue;
                }
                for (head, w) in self.completions(ctx, &[], i + 1)? {
                    let g = self.expected_return_given(t, ctx, &head)?;
                    grad.add_scaled(&self.psi(ctx, &head)?, d * w * g);
                }
            }
        }
        Ok(grad)
    }

    /// `Σ_t E[ψ_{i,t} Δ_{i,t}]` with the removal counterfactual under routing
    /// and replacement by `q` under aggregation.
    pub fn analytic_gradient(&self, i: usize, q: &ReplacementPolicy) -> Result<Matrix> {
        if i >= self.env.n_agents {
            return Err(config_err!("agent {} outside a team of {}", i, self.env.n_agents));
        }
        let routing = self.mechanism.router().is_some();
        if routing && self.conditioning == Conditioning::Autoregressive {
            return Err(Error::Usage("removal counterfactuals need an independent team".into()));
        }
        let theta = self.policies[i].theta();
        let mut grad = Matrix::zeros(theta.rows(), theta.cols());
        for t in 0..self.env.horizon {
            for (c, ctx) in self.contexts.iter().enumerate() {
                let d = self.occupancy[t][c];
                if d == 0.0 {
                    continue;
                }
                if routing {
                    for (profile, w) in &self.profiles[c] {
                        let delta = self.routing_contribution(t, ctx, profile, i)?;
                        grad.add_scaled(&self.psi(ctx, &profile[..=i])?, d * w * delta);
                    }
                } else {
                    for (head, w) in self.completions(ctx, &[], i + 1)? {
                        let delta = self.marginal_given_upstream(t, ctx, &head, q)?;
                        grad.add_scaled(&self.psi(ctx, &head)?, d * w * delta);
                    }
                }
            }
        }
        Ok(grad)
    }

    /// Law of the first-turn reward as sorted `(value, probability)` pairs.
    pub fn reward_law(&self) -> Vec<(f64, f64)> {
        let mut law: Vec<(f64, f64)> = Vec::new();
        let mut add = |v: f64, p: f64| {
            if p == 0.0 {
                return;
            }
            match law.iter_mut().find(|(x, _)| *x == v) {
                Some(entry) => entry.1 += p,
                None => law.push((v, p)),
            }
        };
        for c in 0..self.env.n_contexts {
            for (o, &p) in self.output_dist[c].iter().enumerate() {
                let mass = self.occupancy[0][c] * p;
                let r = self.env.reward_table[c][o];
                match self.env.reward_noise {
                    RewardNoise::Deterministic => add(r, mass),
                    RewardNoise::Bernoulli => {
                        add(1.0, mass * r);
                        add(0.0, mass * (1.0 - r));
                    }
                }
            }
        }
        law.sort_by(|a, b| a.0.total_cmp(&b.0));
        law
    }

    /// First-turn trace variances of `ψ·G`, `ψ·(G − G^{-i})`, `ψ·Δ` and
    /// `ψ·G^{-i}` with the replacement rollout drawn independently of the
    /// realized one given `(h, a^(1:i))`.
    pub fn exact_variance_terms(&self, i: usize, q: &ReplacementPolicy) -> Result<ExactVarianceTerms> {
        self.require_aggregator()?;
        let theta = self.policies[i].theta();
        let (rows, cols) = (theta.rows(), theta.cols());
        let mut mean_shared = Matrix::zeros(rows, cols);
        let mut mean_difference = Matrix::zeros(rows, cols);
        let mut mean_delta = Matrix::zeros(rows, cols);
        let mut mean_cf = Matrix::zeros(rows, cols);
        let (mut sq_shared, mut sq_diff, mut sq_delta, mut sq_cf) = (0.0, 0.0, 0.0, 0.0);
        let mut delta_cache: BTreeMap<(usize, Vec<usize>, usize), f64> = BTreeMap::new();
        for (c, ctx) in self.contexts.iter().enumerate() {
            let d = self.occupancy[0][c];
            if d == 0.0 {
                continue;
            }
            for (head, w) in self.completions(ctx, &[], i + 1)? {
                let psi = self.psi(ctx, &head)?;
                let n2 = psi.norm() * psi.norm();
                let (m1, m2) = self.moments_given(0, ctx, &head)?;
                let (c1, c2) = self.replacement_moments(0, ctx, &head[..i], q)?;
                let z = self.policies[i].input(ctx, &head[..i])?;
                let key = (c, z.prefix.iter().map(|p| p.token).collect(), head[i].token);
                let delta = match delta_cache.get(&key) {
                    Some(&v) => v,
                    None => {
                        let v = self.marginal_contribution(0, &z, head[i].token, q)?;
                        delta_cache.insert(key, v);
                        v
                    }
                };
                let mass = d * w;
                mean_shared.add_scaled(&psi, mass * m1);
                mean_difference.add_scaled(&psi, mass * (m1 - c1));
                mean_delta.add_scaled(&psi, mass * delta);
                mean_cf.add_scaled(&psi, mass * c1);
                sq_shared += mass * n2 * m2;
                sq_diff += mass * n2 * (m2 - 2.0 * m1 * c1 + c2);
                sq_delta += mass * n2 * delta * delta;
                sq_cf += mass * n2 * c2;
            }
        }
        let var = |sq: f64, m: &Matrix| sq - m.norm() * m.norm();
        Ok(ExactVarianceTerms {
            agent: i,
            var_shared: var(sq_shared, &mean_shared),
            var_difference: var(sq_diff, &mean_difference),
            var_delta: var(sq_delta, &mean_delta),
            var_counterfactual: var(sq_cf, &mean_cf),
            mean_shared: mean_shared.into_vec(),
            mean_difference: mean_difference.into_vec(),
            mean_delta: mean_delta.into_vec(),
        })
    }

    /// Every exact quantity at the first turn, for reporting.
    pub fn exact_quantities(&self, q: &ReplacementPolicy) -> Result<ExactQuantities> {
        let k = self.env.n_agents;
        let mut marginals = Vec::new();
        for (c, ctx) in self.contexts.iter().enumerate() {
            for (profile, _) in &self.profiles[c] {
                for i in 0..k {
                    let value = match self.mechanism {
                        Mechanism::Router(_) if k < 2 => continue,
                        Mechanism::Router(_) => self.routing_contribution(0, ctx, profile, i)?,
                        Mechanism::Aggregator(_) => self.marginal_given_upstream(0, ctx, &profile[..=i], q)?,
                    };
                    marginals.push(ExactMarginal {
                        context: c,
                        profile: profile.iter().map(|p| p.token).collect(),
                        agent: i,
                        value,
                    });
                }
            }
        }
        let grad_j = match self.mechanism {
            Mechanism::Router(_) if k < 2 || self.conditioning == Conditioning::Autoregressive => Vec::new(),
            _ => (0..k).map(|i| self.analytic_gradient(i, q).map(Matrix::into_vec)).collect::<Result<_>>()?,
        };
        Ok(ExactQuantities {
            j_sys: self.j_sys(),
            utilities: (0..k).map(|i| self.utility(i)).collect::<Result<_>>()?,
            marginals,
            grad_j,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactMarginal {
    pub context: usize,
    pub profile: Vec<usize>,
    pub agent: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactQuantities {
    pub j_sys: f64,
    pub utilities: Vec<f64>,
    pub marginals: Vec<ExactMarginal>,
    /// Row-major `∇_{θ_i} J_sys` per agent.
    pub grad_j: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactVarianceTerms {
    pub agent: usize,
    pub var_shared: f64,
    pub var_difference: f64,
    pub var_delta: f64,
    pub var_counterfactual: f64,
    pub mean_shared: Vec<f64>,
    pub mean_difference: Vec<f64>,
    pub mean_delta: Vec<f64>,
}

pub fn exact_system_objective(policies: &[AgentPolicy], mechanism: &Mechanism, env: &EnvSpec) -> Result<f64> {
    Ok(Oracle::new(env, policies, mechanism)?.j_sys())
}

pub fn exact_utility(policies: &[AgentPolicy], router: &Router, env: &EnvSpec, i: usize) -> Result<f64> {
    let mechanism = Mechanism::Router(router.clone());
    Oracle::new(env, policies, &mechanism)?.utility(i)
}

/// First-turn `Δ_i(z, a^(i))` under aggregation.
pub fn exact_marginal_contribution(
    policies: &[AgentPolicy],
    mechanism: &Mechanism,
    env: &EnvSpec,
    q: &ReplacementPolicy,
    z: &ConditioningInput,
    token: usize,
) -> Result<f64> {
    Oracle::new(env, policies, mechanism)?.marginal_contribution(0, z, token, q)
}

/// Central differences of `objective` around `theta`, one coordinate at a
/// time.
pub fn finite_difference_gradient<F>(mut objective: F, theta: &Matrix, step: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(config_err!("finite-difference step must be positive"));
    }
    let mut grad = Matrix::zeros(theta.rows(), theta.cols());
    let mut probe = theta.clone();
    for k in 0..theta.as_slice().len() {
        let x = theta.as_slice()[k];
        probe.as_mut_slice()[k] = x + step;
        let up = objective(&probe)?;
        probe.as_mut_slice()[k] = x - step;
        let down = objective(&probe)?;
        probe.as_mut_slice()[k] = x;
        grad.as_mut_slice()[k] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// Finite-difference `∇_{θ_i} J_sys` with every other parameter held fixed.
pub fn system_objective_fd_gradient(
    policies: &[AgentPolicy],
    mechanism: &Mechanism,
    env: &EnvSpec,
    i: usize,
    step: f64,
) -> Result<Matrix> {
    let mut team = policies.to_vec();
    let theta = policies[i].theta().clone();
    finite_difference_gradient(
        |probe| {
            *team[i].theta_mut() = probe.clone();
            exact_system_objective(&team, mechanism, env)
        },
        &theta,
        step,
    )
}

/// Finite-support reward law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardDistribution {
    pub outcomes: Vec<(f64, f64)>,
}

impl RewardDistribution {
    pub fn point_mass(value: f64) -> Self {
        RewardDistribution { outcomes: vec![(value, 1.0)] }
    }

    /// Values `{0, 1}` with `P(1) = p`.
    pub fn bernoulli(p: f64) -> Self {
        RewardDistribution { outcomes: vec![(0.0, 1.0 - p), (1.0, p)] }
    }

    pub fn mean(&self) -> f64 {
        self.outcomes.iter().map(|(v, p)| v * p).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let probs: Vec<f64> = self.outcomes.iter().map(|o| o.1).collect();
        math::check_distribution(&probs, 1e-12)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskSensitivity {
    pub utility_a: f64,
    pub utility_b: f64,
}

impl RiskSensitivity {
    pub fn gap(&self) -> f64 {
        math::abs(self.utility_a - self.utility_b)
    }
}

/// Utility `E[p_0 r_0]` of agent 0 when its candidate reward follows
/// `dist_a` versus `dist_b`, with router scores `σ(r)` and the other agents'
/// rewards drawn independently from `others`.
pub fn risk_sensitivity_demo(
    score_map: &dyn Fn(f64) -> f64,
    dist_a: &RewardDistribution,
    dist_b: &RewardDistribution,
    others: &[RewardDistribution],
    tau: f64,
    epsilon: f64,
) -> Result<RiskSensitivity> {
    for d in [dist_a, dist_b].into_iter().chain(others) {
        d.validate()?;
    }
    if math::abs(dist_a.mean() - dist_b.mean()) > 1e-12 {
        return Err(Error::Precondition(alloc::format!(
            "reward distributions must share a mean, got {} and {}",
            dist_a.mean(),
            dist_b.mean()
        )));
    }
    if others.is_empty() {
        return Err(config_err!("risk sensitivity needs at least one competing agent"));
    }
    let utility = |dist: &RewardDistribution| -> Result<f64> {
        let mut laws = vec![dist];
        laws.extend(others);
        let mut total = 0.0;
        let mut idx = vec![0usize; laws.len()];
        loop {
            let mut prob = 1.0;
            let mut scores = Vec::with_capacity(laws.len());
            for (law, &k) in laws.iter().zip(&idx) {
                prob *= law.outcomes[k].1;
                scores.push(score_map(law.outcomes[k].0));
            }
            if prob != 0.0 {
                let p = mechanism::mixed_softmax(&scores, tau, epsilon)?;
                total += prob * p[0] * laws[0].outcomes[idx[0]].0;
            }
            let mut slot = 0;
            loop {
                if slot == laws.len() {
                    return Ok(total);
                }
                idx[slot] += 1;
                if idx[slot] < laws[slot].outcomes.len() {
                    break;
                }
                idx[slot] = 0;
                slot += 1;
            }
        }
    };
    Ok(RiskSensitivity { utility_a: utility(dist_a)?, utility_b: utility(dist_b)? })
}

/// Two agents with uniform binary proposals deployed as a tuple, rewarded
/// by one agent's token. `rewarded` selects which agent.
pub fn shared_reward_env(rewarded: usize) -> EnvSpec {
    let table = (0..4).map(|idx| if rewarded == 0 { (idx / 2) as f64 } else { (idx % 2) as f64 }).collect();
    EnvSpec {
        name: alloc::format!("shared-reward-{}", if rewarded == 0 { "first" } else { "second" }),
        n_contexts: 1,
        features: None,
        n_agents: 2,
        vocab_size: 2,
        horizon: 1,
        output_space: OutputSpace::Joint,
        reward_table: vec![table],
        reward_noise: RewardNoise::Deterministic,
        transition_table: None,
        initial_distribution: None,
        context_labels: None,
        agent_specialties: None,
        optimum: None,
        description: Some(String::from(
            "independent uniform binary proposals, tuple deployment, reward equals one agent's token",
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleCase {
    pub name: String,
    pub rewarded_agent: usize,
    /// `(reward value, probability)`
    pub reward_law: Vec<(f64, f64)>,
    /// Agent 0's exact contribution for proposals 0 and 1.
    pub first_agent_marginals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleReport {
    pub cases: Vec<CounterexampleCase>,
    pub identical_reward_laws: bool,
}

/// Two mechanisms with identical reward laws whose credit for the first
/// agent differs.
pub fn shared_reward_counterexample() -> Result<CounterexampleReport> {
    let team: Vec<AgentPolicy> = (0..2).map(|i| AgentPolicy::new(i, Conditioning::Independent, 1, 2, 2)).collect();
    let mech = Mechanism::Aggregator(Aggregator::TupleIdentity);
    let q = ReplacementPolicy::Uniform { vocab_size: 2 };
    let mut cases = Vec::new();
    for rewarded in 0..2 {
        let env = shared_reward_env(rewarded);
        let oracle = Oracle::new(&env, &team, &mech)?;
        let z = team[0].input(&env.context(0), &[])?;
        let first_agent_marginals =
            (0..2).map(|a| oracle.marginal_contribution(0, &z, a, &q)).collect::<Result<Vec<f64>>>()?;
        cases.push(CounterexampleCase { name: env.name.clone(), rewarded_agent: rewarded, reward_law: oracle.reward_law(), first_agent_marginals });
    }
    let identical_reward_laws = cases[0].reward_law == cases[1].reward_law;
    Ok(CounterexampleReport { cases, identical_reward_laws })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignalKind {
    Shared,
    LooDifference,
    OracleDelta,
    Counterfactual,
}

/// Elementwise moments of `ψ · signal` over the samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalMoments {
    pub kind: SignalKind,
    pub mean: Vec<f64>,
    pub mean_se: Vec<f64>,
    pub variance: Vec<f64>,
    pub trace_variance: f64,
    pub trace_variance_se: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub value: f64,
    pub se: f64,
}

impl Gap {
    /// Gap in standard errors.
    pub fn sigmas(&self) -> f64 {
        if self.se > 0.0 {
            self.value / self.se
        } else if self.value > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    }
}

/// `Var(ψG) = Var(ψ(G − G^{-i})) + Var(ψG^{-i}) + 2 Cov(ψ(G − G^{-i}), ψG^{-i})`
/// in trace form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub var_difference: f64,
    pub var_counterfactual: f64,
    pub twice_covariance: f64,
    pub total: f64,
    pub target: f64,
    pub residual: f64,
    pub residual_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub agent: usize,
    pub n_samples: usize,
    pub signals: Vec<SignalMoments>,
    /// `Var(ψG) − Var(ψ(G − G^{-i}))`
    pub shared_minus_difference: Gap,
    /// `Var(ψ(G − G^{-i})) − Var(ψΔ)`
    pub difference_minus_delta: Gap,
    /// Largest elementwise `|mean(ψG) − mean(ψ(G − G^{-i}))|` in paired
    /// standard errors.
    pub max_mean_z_shared_difference: f64,
    /// Same, against `ψΔ`.
    pub max_mean_z_shared_delta: f64,
    pub decomposition: Decomposition,
    pub exact: ExactVarianceTerms,
}

impl VarianceReport {
    pub fn signal(&self, kind: SignalKind) -> &SignalMoments {
        self.signals.iter().find(|s| s.kind == kind).expect("every kind is reported")
    }
}

struct Draw {
    ctx: usize,
    head: Vec<Proposal>,
    g: f64,
    g_minus: f64,
    delta: f64,
}

/// Monte Carlo moments of `ψ_{i,0}` times the shared return, the
/// leave-one-out difference, the exact contribution and the counterfactual
/// return, at the first turn of an aggregation environment.
pub fn gradient_variance_report(
    env: &EnvSpec,
    policies: &[AgentPolicy],
    mechanism: &Mechanism,
    q: &ReplacementPolicy,
    agent: usize,
    n_samples: usize,
    rng: &mut Stream,
) -> Result<VarianceReport> {
    if n_samples < 10_000 {
        return Err(Error::Precondition(alloc::format!("variance report needs at least 10^4 samples, got {n_samples}")));
    }
    let oracle = Oracle::new(env, policies, mechanism)?;
    oracle.require_aggregator()?;
    if agent >= env.n_agents {
        return Err(config_err!("agent {} outside a team of {}", agent, env.n_agents));
    }
    let mut delta_cache: BTreeMap<(usize, Vec<usize>, usize), f64> = BTreeMap::new();
    let mut draws = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let ctx = env.sample_context(rng);
        let joint = policy::sample_joint(policies, &ctx, rng)?;
        let deployment = mechanism.deploy(&ctx, &joint.proposals, rng.next_u64())?;
        let r = env.reward(&ctx, &deployment.output, rng)?;
        let g = r + rollout::continuation(env, policies, mechanism, &ctx, 0, &deployment.output, rng)?;
        let state = TurnState { ctx: &ctx, turn: 0, proposals: &joint.proposals, realized_return: g };
        let g_minus = estimator::counterfactual_return(&state, agent, q, policies, mechanism, env, rng)?;
        let z = &joint.inputs[agent];
        let token = joint.proposals[agent].token;
        let key = (ctx.id, z.prefix.iter().map(|p| p.token).collect(), token);
        let delta = match delta_cache.get(&key) {
            Some(&v) => v,
            None => {
                let v = oracle.marginal_contribution(0, z, token, q)?;
                delta_cache.insert(key, v);
                v
            }
        };
        draws.push(Draw { ctx: ctx.id, head: joint.proposals[..=agent].to_vec(), g, g_minus, delta });
    }

    let mut psi_cache: BTreeMap<(usize, Vec<usize>), Vec<f64>> = BTreeMap::new();
    for d in &draws {
        let key = (d.ctx, d.head.iter().map(|p| p.token).collect::<Vec<_>>());
        if let alloc::collections::btree_map::Entry::Vacant(slot) = psi_cache.entry(key) {
            slot.insert(oracle.psi(&oracle.contexts[d.ctx], &d.head)?.into_vec());
        }
    }
    let psi_of = |d: &Draw| &psi_cache[&(d.ctx, d.head.iter().map(|p| p.token).collect::<Vec<_>>())];
    let signal = |d: &Draw, kind: SignalKind| match kind {
        SignalKind::Shared => d.g,
        SignalKind::LooDifference => d.g - d.g_minus,
        SignalKind::OracleDelta => d.delta,
        SignalKind::Counterfactual => d.g_minus,
    };
    const KINDS: [SignalKind; 4] =
        [SignalKind::Shared, SignalKind::LooDifference, SignalKind::OracleDelta, SignalKind::Counterfactual];
    let dim = policies[agent].theta().as_slice().len();
    let n = n_samples as f64;

    let mut means = [vec![0.0; dim], vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]];
    for d in &draws {
        let psi = psi_of(d);
        for (m, &kind) in means.iter_mut().zip(&KINDS) {
            let s = signal(d, kind);
            for (acc, x) in m.iter_mut().zip(psi) {
                *acc += x * s / n;
            }
        }
    }

    let mut variances = [vec![0.0; dim], vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]];
    let mut cov_diff_cf = 0.0;
    let mut diff_shared_diff = vec![0.0; dim];
    let mut diff_shared_delta = vec![0.0; dim];
    // per-sample centered squared norms, for the standard errors
    let mut sq_norms: Vec<[f64; 4]> = Vec::with_capacity(n_samples);
    for d in &draws {
        let psi = psi_of(d);
        let mut norms = [0.0; 4];
        for (k, &kind) in KINDS.iter().enumerate() {
            let s = signal(d, kind);
            for ((v, m), x) in variances[k].iter_mut().zip(&means[k]).zip(psi) {
                let e = x * s - m;
                *v += e * e / n;
                norms[k] += e * e;
            }
        }
        let (sd, sc) = (signal(d, SignalKind::LooDifference), signal(d, SignalKind::Counterfactual));
        let (sg, sdel) = (signal(d, SignalKind::Shared), signal(d, SignalKind::OracleDelta));
        for (j, x) in psi.iter().enumerate() {
            cov_diff_cf += (x * sd - means[1][j]) * (x * sc - means[3][j]) / n;
            let a = x * (sg - sd) - (means[0][j] - means[1][j]);
            diff_shared_diff[j] += a * a / n;
            let b = x * (sg - sdel) - (means[0][j] - means[2][j]);
            diff_shared_delta[j] += b * b / n;
        }
        sq_norms.push(norms);
    }
    let trace: Vec<f64> = variances.iter().map(|v| v.iter().sum()).collect();
    let se_of = |f: &dyn Fn(&[f64; 4]) -> f64| -> f64 {
        let xs: Vec<f64> = sq_norms.iter().map(f).collect();
        libm::sqrt(math::mean_var(&xs).1 / n)
    };
    let signals: Vec<SignalMoments> = KINDS
        .iter()
        .enumerate()
        .map(|(k, &kind)| SignalMoments {
            kind,
            mean: means[k].clone(),
            mean_se: variances[k].iter().map(|v| libm::sqrt(v / n)).collect(),
            variance: variances[k].clone(),
            trace_variance: trace[k],
            trace_variance_se: se_of(&|s| s[k]),
        })
        .collect();
    let max_z = |paired_var: &[f64], other: usize| -> f64 {
        means[0]
            .iter()
            .zip(&means[other])
            .zip(paired_var)
            .map(|((a, b), v)| {
                let se = libm::sqrt(v / n);
                let gap = math::abs(a - b);
                if se > 0.0 {
                    gap / se
                } else if gap > 1e-12 {
                    f64::INFINITY
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max)
    };
    let total = trace[1] + trace[3] + 2.0 * cov_diff_cf;
    Ok(VarianceReport {
        agent,
        n_samples,
        shared_minus_difference: Gap { value: trace[0] - trace[1], se: se_of(&|s| s[0] - s[1]) },
        difference_minus_delta: Gap { value: trace[1] - trace[2], se: se_of(&|s| s[1] - s[2]) },
        max_mean_z_shared_difference: max_z(&diff_shared_diff, 1),
        max_mean_z_shared_delta: max_z(&diff_shared_delta, 2),
        decomposition: Decomposition {
            var_difference: trace[1],
            var_counterfactual: trace[3],
            twice_covariance: 2.0 * cov_diff_cf,
            total,
            target: trace[0],
            residual: trace[0] - total,
            residual_se: signals[0].trace_variance_se,
        },
        signals,
        exact: oracle.exact_variance_terms(agent, q)?,
    })
}
