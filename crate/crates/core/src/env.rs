//! Tabular episodic environments.
//!
//! Rewards and transitions are dense tables indexed by context id and a
//! canonical output index, so every expectation the library needs can be
//! computed by exhaustive summation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::math::abs;
use crate::stream::{self, Stream};

/// Upper bound on table entries an environment may carry.
pub const MAX_TABLE_ENTRIES: usize = 1_000_000;

/// Tolerance for row sums of probability tables.
pub const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub id: usize,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Proposal {
    pub agent: usize,
    pub token: usize,
}

/// How deployed outputs are keyed in the reward table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputSpace {
    /// One proposal is deployed; keyed by (agent, token).
    Selected,
    /// All proposals are combined; keyed by the ordered token tuple.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OutputKey {
    Selected(Proposal),
    Joint(Vec<usize>),
}

impl fmt::Display for OutputKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutputKey::Selected(p) => write!(f, "a{}:t{}", p.agent, p.token),
            OutputKey::Joint(tokens) => {
                write!(f, "(")?;
                for (k, t) in tokens.iter().enumerate() {
                    if k > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{t}")?;
                }
                write!(f, ")")
            }
        }
    }
}

/// The output `y_t` a mechanism deploys.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeployedOutput {
    pub key: OutputKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardNoise {
    Deterministic,
    Bernoulli,
}

/// A finite episodic environment.
///
/// `reward_table[c][o]` is the expected reward of output index `o` in context
/// `c`; `transition_table[c][o]` is the next-context distribution and is only
/// required when `horizon > 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub n_contexts: usize,
    /// Per-context feature rows; one-hot context encoding when absent.
    #[serde(default)]
    pub features: Option<Vec<Vec<f64>>>,
    pub n_agents: usize,
    pub vocab_size: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    pub output_space: OutputSpace,
    pub reward_table: Vec<Vec<f64>>,
    pub reward_noise: RewardNoise,
    #[serde(default)]
    pub transition_table: Option<Vec<Vec<Vec<f64>>>>,
    /// Initial context law; uniform when absent.
    #[serde(default)]
    pub initial_distribution: Option<Vec<f64>>,
    #[serde(default)]
    pub context_labels: Option<Vec<usize>>,
    #[serde(default)]
    pub agent_specialties: Option<Vec<usize>>,
    /// Best achievable expected return, filled in by [`EnvSpec::with_optimum`].
    #[serde(default)]
    pub optimum: Option<f64>,
    #[serde(default)]
    pub description: Option<String>,
}

fn default_horizon() -> usize {
    1
}

impl EnvSpec {
    pub fn feature_dim(&self) -> usize {
        match &self.features {
            Some(rows) => rows.first().map_or(0, Vec::len),
            None => self.n_contexts,
        }
    }

    pub fn n_outputs(&self) -> usize {
        match self.output_space {
            OutputSpace::Selected => self.n_agents * self.vocab_size,
            OutputSpace::Joint => self.vocab_size.pow(self.n_agents as u32),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_contexts == 0 || self.n_agents == 0 || self.vocab_size == 0 {
            return Err(config_err!("{}: n_contexts, n_agents and vocab_size must be positive", self.name));
        }
        if self.horizon == 0 {
            return Err(config_err!("{}: horizon must be at least 1", self.name));
        }
        let n_out = match self.output_space {
            OutputSpace::Selected => Some(self.n_agents * self.vocab_size),
            OutputSpace::Joint => self.vocab_size.checked_pow(self.n_agents as u32),
        };
        let n_out = n_out.ok_or_else(|| config_err!("{}: output space overflows", self.name))?;
        let mut entries = self.n_contexts.saturating_mul(n_out);
        if self.horizon > 1 {
            entries = entries.saturating_mul(self.n_contexts);
        }
        if entries > MAX_TABLE_ENTRIES {
            return Err(config_err!("{}: {} table entries exceed the limit {}", self.name, entries, MAX_TABLE_ENTRIES));
        }
        if let Some(rows) = &self.features {
            if rows.len() != self.n_contexts {
                return Err(config_err!("{}: {} feature rows for {} contexts", self.name, rows.len(), self.n_contexts));
            }
            let d = self.feature_dim();
            if rows.iter().any(|r| r.len() != d || r.iter().any(|x| !x.is_finite())) {
                return Err(config_err!("{}: feature rows must be finite with equal length", self.name));
            }
        }
        if self.reward_table.len() != self.n_contexts {
            return Err(config_err!("{}: reward_table has {} rows, expected {}", self.name, self.reward_table.len(), self.n_contexts));
        }
        for (c, row) in self.reward_table.iter().enumerate() {
            if row.len() != n_out {
                return Err(config_err!("{}: reward_table row {} has {} entries, expected {}", self.name, c, row.len(), n_out));
            }
            if let Some(r) = row.iter().find(|r| !(0.0..=1.0).contains(*r)) {
                return Err(config_err!("{}: reward {} in context {} outside [0, 1]", self.name, r, c));
            }
        }
        match (&self.transition_table, self.horizon) {
            (None, t) if t > 1 => {
                return Err(config_err!("{}: horizon {} requires a transition_table", self.name, t));
            }
            (Some(table), _) => {
                if table.len() != self.n_contexts || table.iter().any(|r| r.len() != n_out) {
                    return Err(config_err!("{}: transition_table must be n_contexts x n_outputs", self.name));
                }
                for (c, per_out) in table.iter().enumerate() {
                    for (o, next) in per_out.iter().enumerate() {
                        check_row(next, self.n_contexts)
                            .map_err(|e| config_err!("{}: transition row ({}, {}): {}", self.name, c, o, e))?;
                    }
                }
            }
            _ => {}
        }
        if let Some(init) = &self.initial_distribution {
            check_row(init, self.n_contexts).map_err(|e| config_err!("{}: initial_distribution: {}", self.name, e))?;
        }
        if let Some(labels) = &self.context_labels {
            if labels.len() != self.n_contexts {
                return Err(config_err!("{}: {} context labels for {} contexts", self.name, labels.len(), self.n_contexts));
            }
        }
        if let Some(spec) = &self.agent_specialties {
            if spec.len() != self.n_agents {
                return Err(config_err!("{}: {} agent specialties for {} agents", self.name, spec.len(), self.n_agents));
            }
        }
        Ok(())
    }

    pub fn context(&self, id: usize) -> Context {
        let features = match &self.features {
            Some(rows) => rows[id].clone(),
            None => {
                let mut v = vec![0.0; self.n_contexts];
                v[id] = 1.0;
                v
            }
        };
        Context { id, features }
    }

    /// Probability of each context at the first turn.
    pub fn initial_probabilities(&self) -> Vec<f64> {
        match &self.initial_distribution {
            Some(p) => p.clone(),
            None => vec![1.0 / self.n_contexts as f64; self.n_contexts],
        }
    }

    pub fn sample_context(&self, rng: &mut Stream) -> Context {
        let id = match &self.initial_distribution {
            Some(p) => stream::categorical(p, rng),
            None if self.n_contexts == 1 => 0,
            None => (stream::uniform(rng) * self.n_contexts as f64) as usize % self.n_contexts,
        };
        self.context(id)
    }

    pub fn output_index(&self, key: &OutputKey) -> Result<usize> {
        let v = self.vocab_size;
        match (self.output_space, key) {
            (OutputSpace::Selected, OutputKey::Selected(p)) if p.agent < self.n_agents && p.token < v => {
                Ok(p.agent * v + p.token)
            }
            (OutputSpace::Joint, OutputKey::Joint(tokens))
                if tokens.len() == self.n_agents && tokens.iter().all(|&t| t < v) =>
            {
                Ok(tokens.iter().fold(0, |acc, &t| acc * v + t))
            }
            _ => Err(config_err!("{}: no table entry for output {}", self.name, key)),
        }
    }

    pub fn output_key(&self, index: usize) -> OutputKey {
        let v = self.vocab_size;
        match self.output_space {
            OutputSpace::Selected => OutputKey::Selected(Proposal { agent: index / v, token: index % v }),
            OutputSpace::Joint => {
                let mut tokens = vec![0; self.n_agents];
                let mut rest = index;
                for slot in tokens.iter_mut().rev() {
                    *slot = rest % v;
                    rest /= v;
                }
                OutputKey::Joint(tokens)
            }
        }
    }

    /// Table value of `y` in context `ctx_id`.
    pub fn expected_reward(&self, ctx_id: usize, y: &DeployedOutput) -> Result<f64> {
        let row = self
            .reward_table
            .get(ctx_id)
            .ok_or_else(|| config_err!("{}: no reward entry for (context {}, output {})", self.name, ctx_id, y.key))?;
        let o = self
            .output_index(&y.key)
            .map_err(|_| config_err!("{}: no reward entry for (context {}, output {})", self.name, ctx_id, y.key))?;
        Ok(row[o])
    }

    /// Realized reward: the table value, or a Bernoulli draw with that mean.
    pub fn reward(&self, ctx: &Context, y: &DeployedOutput, rng: &mut Stream) -> Result<f64> {
        let mean = self.expected_reward(ctx.id, y)?;
        Ok(match self.reward_noise {
            RewardNoise::Deterministic => mean,
            RewardNoise::Bernoulli => {
                if stream::uniform(rng) < mean {
                    1.0
                } else {
                    0.0
                }
            }
        })
    }

    /// Second moment of the realized reward.
    pub fn reward_second_moment(&self, ctx_id: usize, output: usize) -> f64 {
        let mean = self.reward_table[ctx_id][output];
        match self.reward_noise {
            RewardNoise::Deterministic => mean * mean,
            RewardNoise::Bernoulli => mean,
        }
    }

    /// Next-context distribution after deploying output index `output`.
    pub fn transition_row(&self, ctx_id: usize, output: usize) -> Option<&[f64]> {
        self.transition_table.as_ref().map(|t| t[ctx_id][output].as_slice())
    }

    pub fn transition(&self, ctx: &Context, y: &DeployedOutput, rng: &mut Stream) -> Result<Context> {
        if self.horizon <= 1 {
            return Err(Error::Usage(format!("{}: transition called on a single-turn environment", self.name)));
        }
        let o = self.output_index(&y.key)?;
        let row = self
            .transition_row(ctx.id, o)
            .ok_or_else(|| config_err!("{}: no transition entry for (context {}, output {})", self.name, ctx.id, y.key))?;
        Ok(self.context(stream::categorical(row, rng)))
    }

    /// Every output with its expected reward in `ctx`.
    pub fn enumerate_outcomes(&self, ctx: &Context) -> Vec<(DeployedOutput, f64)> {
        self.reward_table[ctx.id]
            .iter()
            .enumerate()
            .map(|(o, &r)| (DeployedOutput { key: self.output_key(o) }, r))
            .collect()
    }

    /// Best achievable expected return from the initial distribution, by
    /// backward induction over the full output space.
    pub fn optimal_value(&self) -> f64 {
        let n_out = self.n_outputs();
        let mut next = vec![0.0; self.n_contexts];
        for t in (0..self.horizon).rev() {
            let cur: Vec<f64> = (0..self.n_contexts)
                .map(|c| {
                    (0..n_out)
                        .map(|o| {
                            let mut q = self.reward_table[c][o];
                            if t + 1 < self.horizon {
                                if let Some(row) = self.transition_row(c, o) {
                                    q += row.iter().zip(&next).map(|(p, v)| p * v).sum::<f64>();
                                }
                            }
                            q
                        })
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            next = cur;
        }
        self.initial_probabilities().iter().zip(&next).map(|(p, v)| p * v).sum()
    }

    pub fn with_optimum(mut self) -> Self {
        self.optimum = Some(self.optimal_value());
        self
    }
}

fn check_row(row: &[f64], len: usize) -> core::result::Result<(), String> {
    if row.len() != len {
        return Err(format!("length {} != {}", row.len(), len));
    }
    if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err("entries must lie in [0, 1]".into());
    }
    let total: f64 = row.iter().sum();
    if abs(total - 1.0) > ROW_SUM_TOL {
        return Err(format!("sums to {total}"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::derive;

    fn routing_env(n_contexts: usize, rewards: Vec<Vec<f64>>, noise: RewardNoise) -> EnvSpec {
        EnvSpec {
            name: "test".into(),
            n_contexts,
            features: None,
            n_agents: 1,
            vocab_size: rewards[0].len(),
            horizon: 1,
            output_space: OutputSpace::Selected,
            reward_table: rewards,
            reward_noise: noise,
            transition_table: None,
            initial_distribution: None,
            context_labels: None,
            agent_specialties: None,
            optimum: None,
            description: None,
        }
    }

    fn sel(agent: usize, token: usize) -> DeployedOutput {
        DeployedOutput { key: OutputKey::Selected(Proposal { agent, token }) }
    }

    #[test]
    fn single_context_always_zero() {
        let env = routing_env(1, vec![vec![0.5, 0.5]], RewardNoise::Deterministic);
        let mut rng = derive(3, 0);
        for _ in 0..100 {
            assert_eq!(env.sample_context(&mut rng).id, 0);
        }
    }

    #[test]
    fn uniform_contexts_within_three_sigma() {
        let env = routing_env(4, vec![vec![0.0]; 4], RewardNoise::Deterministic);
        let mut rng = derive(11, 0);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[env.sample_context(&mut rng).id] += 1;
        }
        let sigma = libm::sqrt(0.25 * 0.75 / n as f64);
        for c in counts {
            assert!(abs(c as f64 / n as f64 - 0.25) < 3.0 * sigma);
        }
    }

    #[test]
    fn seeded_context_sequences_repeat() {
        let env = routing_env(4, vec![vec![0.0]; 4], RewardNoise::Deterministic);
        let draw = || {
            let mut rng = derive(42, 0);
            (0..64).map(|_| env.sample_context(&mut rng).id).collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn reward_modes() {
        let mut rng = derive(5, 0);
        for noise in [RewardNoise::Deterministic, RewardNoise::Bernoulli] {
            let env = routing_env(1, vec![vec![0.0, 1.0, 0.3]], noise);
            let ctx = env.context(0);
            for _ in 0..1000 {
                assert_eq!(env.reward(&ctx, &sel(0, 0), &mut rng).unwrap(), 0.0);
                assert_eq!(env.reward(&ctx, &sel(0, 1), &mut rng).unwrap(), 1.0);
            }
        }
        let env = routing_env(1, vec![vec![0.0, 1.0, 0.3]], RewardNoise::Bernoulli);
        let ctx = env.context(0);
        let n = 100_000;
        let mean = (0..n).map(|_| env.reward(&ctx, &sel(0, 2), &mut rng).unwrap()).sum::<f64>() / n as f64;
        assert!(abs(mean - 0.3) < 3.0 * libm::sqrt(0.3 * 0.7 / n as f64));
        assert!(env.reward(&ctx, &sel(0, 2), &mut derive(1, 0)).is_ok());
    }

    #[test]
    fn missing_entry_names_the_pair() {
        let env = routing_env(1, vec![vec![0.0, 1.0]], RewardNoise::Deterministic);
        let err = env.expected_reward(0, &sel(0, 9)).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("context 0") && msg.contains("a0:t9"), "{msg}");
    }

    fn chain_env(table: Vec<Vec<Vec<f64>>>) -> EnvSpec {
        let mut env = routing_env(3, vec![vec![0.5]; 3], RewardNoise::Deterministic);
        env.horizon = 3;
        env.transition_table = Some(table);
        env.validate().unwrap();
        env
    }

    #[test]
    fn transitions() {
        let mut rng = derive(9, 0);
        let point = chain_env(vec![vec![vec![0.0, 0.0, 1.0]]; 3]);
        for _ in 0..100 {
            assert_eq!(point.transition(&point.context(0), &sel(0, 0), &mut rng).unwrap().id, 2);
        }
        let coin = chain_env(vec![vec![vec![0.5, 0.5, 0.0]]; 3]);
        let n = 100_000;
        let zeros = (0..n).filter(|_| coin.transition(&coin.context(1), &sel(0, 0), &mut rng).unwrap().id == 0).count();
        assert!(abs(zeros as f64 / n as f64 - 0.5) < 3.0 * libm::sqrt(0.25 / n as f64));
        let identity = chain_env((0..3).map(|c| vec![(0..3).map(|n| if n == c { 1.0 } else { 0.0 }).collect()]).collect());
        let mut ctx = identity.context(1);
        for _ in 0..identity.horizon {
            ctx = identity.transition(&ctx, &sel(0, 0), &mut rng).unwrap();
            assert_eq!(ctx.id, 1);
        }
        let single = routing_env(1, vec![vec![0.5]], RewardNoise::Deterministic);
        assert!(matches!(single.transition(&single.context(0), &sel(0, 0), &mut rng), Err(Error::Usage(_))));
    }

    #[test]
    fn outcome_enumeration() {
        let env = routing_env(1, vec![vec![0.2, 0.9]], RewardNoise::Deterministic);
        let outcomes = env.enumerate_outcomes(&env.context(0));
        assert_eq!(outcomes.len(), 2);
        for (y, r) in &outcomes {
            assert_eq!(env.expected_reward(0, y).unwrap(), *r);
        }
        // Σ_o P(o) r(o) against a direct per-token sum
        let probs = [0.3, 0.7];
        let via_enum: f64 = outcomes.iter().zip(&probs).map(|((_, r), p)| r * p).sum();
        assert!(abs(via_enum - (0.3 * 0.2 + 0.7 * 0.9)) < 1e-15);

        let mut joint = routing_env(1, vec![vec![0.0; 9]], RewardNoise::Deterministic);
        joint.n_agents = 2;
        joint.vocab_size = 3;
        joint.output_space = OutputSpace::Joint;
        joint.validate().unwrap();
        let keys: std::collections::BTreeSet<String> =
            joint.enumerate_outcomes(&joint.context(0)).iter().map(|(y, _)| alloc::format!("{}", y.key)).collect();
        assert_eq!(keys.len(), 9);
        for o in 0..9 {
            assert_eq!(joint.output_index(&joint.output_key(o)).unwrap(), o);
        }
    }

    #[test]
    fn validation_rejects_bad_tables() {
        let mut env = routing_env(1, vec![vec![1.5]], RewardNoise::Deterministic);
        assert!(env.validate().is_err());
        env.reward_table = vec![vec![0.5]];
        env.horizon = 2;
        assert!(env.validate().is_err());
        env.transition_table = Some(vec![vec![vec![0.9]]]);
        assert!(env.validate().is_err());
        env.transition_table = Some(vec![vec![vec![1.0]]]);
        env.validate().unwrap();
    }

    #[test]
    fn optimum_by_backward_induction() {
        // two contexts, staying in context 1 pays 1 per turn
        let mut env = routing_env(2, vec![vec![0.0, 0.2], vec![1.0, 0.0]], RewardNoise::Deterministic);
        env.horizon = 2;
        env.transition_table = Some(vec![
            vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            vec![vec![0.0, 1.0], vec![0.0, 1.0]],
        ]);
        env.initial_distribution = Some(vec![1.0, 0.0]);
        env.validate().unwrap();
        // from context 0: token 0 (0 now, 1 later) beats token 1 (0.2 now, 0.2 later)
        assert!(abs(env.optimal_value() - 1.0) < 1e-15);
    }
}
