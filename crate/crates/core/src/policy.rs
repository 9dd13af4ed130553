//! Linear-softmax agent policies.
//!
//! Agent `i` sees a conditioning input `z = (h, a^(1:i-1))` encoded as the
//! context features followed by one one-hot slot of width `V` per earlier
//! agent (slots for agents at or after `i` stay zero). Under independent
//! conditioning the prefix is dropped and only the features remain. Logits
//! are `zᵀθ` with `θ` of shape `dim(z) × V`.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::env::{Context, Proposal};
use crate::error::{config_err, Error, Result};
use crate::math::{self, Matrix};
use crate::stream::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    Independent,
    Autoregressive,
}

/// Width of the encoded input for a given conditioning mode.
pub fn input_dim(conditioning: Conditioning, context_dim: usize, n_agents: usize, vocab: usize) -> usize {
    match conditioning {
        Conditioning::Independent => context_dim,
        Conditioning::Autoregressive => context_dim + n_agents.saturating_sub(1) * vocab,
    }
}

/// Information available to `agent` before it proposes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningInput {
    pub agent: usize,
    pub context: Context,
    pub prefix: Vec<Proposal>,
    pub encoded: Vec<f64>,
}

impl ConditioningInput {
    pub fn new(
        agent: usize,
        context: Context,
        prefix: &[Proposal],
        conditioning: Conditioning,
        n_agents: usize,
        vocab: usize,
    ) -> Result<Self> {
        let prefix: Vec<Proposal> = match conditioning {
            Conditioning::Independent => Vec::new(),
            Conditioning::Autoregressive => {
                if prefix.len() != agent {
                    return Err(Error::Dimension { what: "autoregressive prefix", expected: agent, found: prefix.len() });
                }
                prefix.to_vec()
            }
        };
        let mut encoded = context.features.clone();
        if conditioning == Conditioning::Autoregressive {
            let start = encoded.len();
            encoded.resize(start + n_agents.saturating_sub(1) * vocab, 0.0);
            for (slot, p) in prefix.iter().enumerate() {
                if p.token >= vocab {
                    return Err(config_err!("prefix token {} outside vocabulary of size {}", p.token, vocab));
                }
                encoded[start + slot * vocab + p.token] = 1.0;
            }
        }
        Ok(ConditioningInput { agent, context, prefix, encoded })
    }
}

/// Hook for differentiable policies over a finite vocabulary.
pub trait DifferentiablePolicy {
    fn vocab_size(&self) -> usize;
    fn action_probabilities(&self, z: &ConditioningInput) -> Result<Vec<f64>>;
    /// `∇_θ log π_θ(token | z)`, shaped like [`DifferentiablePolicy::params`].
    fn logprob_grad(&self, z: &ConditioningInput, token: usize) -> Result<Matrix>;
    fn params(&self) -> &Matrix;
    fn params_mut(&mut self) -> &mut Matrix;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentPolicy {
    pub agent: usize,
    pub conditioning: Conditioning,
    pub n_agents: usize,
    pub vocab_size: usize,
    pub context_dim: usize,
    theta: Matrix,
}

impl AgentPolicy {
    /// Uniform policy (all-zero weights).
    pub fn new(agent: usize, conditioning: Conditioning, context_dim: usize, n_agents: usize, vocab_size: usize) -> Self {
        let rows = input_dim(conditioning, context_dim, n_agents, vocab_size);
        AgentPolicy { agent, conditioning, n_agents, vocab_size, context_dim, theta: Matrix::zeros(rows, vocab_size) }
    }

    pub fn with_theta(mut self, theta: Matrix) -> Result<Self> {
        if !theta.same_shape(&self.theta) {
            return Err(Error::Dimension { what: "theta", expected: self.theta.as_slice().len(), found: theta.as_slice().len() });
        }
        if !theta.is_finite() {
            return Err(config_err!("theta for agent {} has non-finite entries", self.agent));
        }
        self.theta = theta;
        Ok(self)
    }

    pub fn theta(&self) -> &Matrix {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut Matrix {
        &mut self.theta
    }

    /// Conditioning input for this agent given the realized earlier proposals.
    pub fn input(&self, context: &Context, prefix: &[Proposal]) -> Result<ConditioningInput> {
        if context.features.len() != self.context_dim {
            return Err(Error::Dimension { what: "context features", expected: self.context_dim, found: context.features.len() });
        }
        let prefix = match self.conditioning {
            Conditioning::Independent => &[][..],
            Conditioning::Autoregressive => &prefix[..self.agent.min(prefix.len())],
        };
        ConditioningInput::new(self.agent, context.clone(), prefix, self.conditioning, self.n_agents, self.vocab_size)
    }

    fn check_input(&self, z: &ConditioningInput) -> Result<()> {
        if z.encoded.len() != self.theta.rows() {
            return Err(Error::Dimension { what: "encoded input", expected: self.theta.rows(), found: z.encoded.len() });
        }
        Ok(())
    }

    pub fn logits(&self, z: &ConditioningInput) -> Result<Vec<f64>> {
        self.check_input(z)?;
        Ok(self.theta.left_mul(&z.encoded))
    }

    pub fn log_prob(&self, z: &ConditioningInput, token: usize) -> Result<f64> {
        let lp = math::log_softmax(&self.logits(z)?);
        lp.get(token).copied().ok_or_else(|| config_err!("token {} outside vocabulary of size {}", token, self.vocab_size))
    }

    /// Draws a proposal and returns it with its log-probability.
    pub fn propose(&self, z: &ConditioningInput, rng: &mut Stream) -> Result<(Proposal, f64)> {
        let logits = self.logits(z)?;
        let probs = math::softmax(&logits);
        let token = stream::categorical(&probs, rng);
        let lp = math::log_softmax(&logits)[token];
        Ok((Proposal { agent: self.agent, token }, lp))
    }

    /// Most likely token; ties go to the lowest index.
    pub fn greedy(&self, z: &ConditioningInput) -> Result<Proposal> {
        let logits = self.logits(z)?;
        let mut best = 0;
        for (k, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = k;
            }
        }
        Ok(Proposal { agent: self.agent, token: best })
    }
}

impl DifferentiablePolicy for AgentPolicy {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn action_probabilities(&self, z: &ConditioningInput) -> Result<Vec<f64>> {
        Ok(math::softmax(&self.logits(z)?))
    }

    /// `z ⊗ (onehot(a) − π(·|z))`
    fn logprob_grad(&self, z: &ConditioningInput, token: usize) -> Result<Matrix> {
        if token >= self.vocab_size {
            return Err(config_err!("token {} outside vocabulary of size {}", token, self.vocab_size));
        }
        let mut dir = self.action_probabilities(z)?;
        dir.iter_mut().for_each(|p| *p = -*p);
        dir[token] += 1.0;
        Ok(Matrix::outer(&z.encoded, &dir))
    }

    fn params(&self) -> &Matrix {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut Matrix {
        &mut self.theta
    }
}

/// One draw of all agents' proposals at a turn.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSample {
    pub inputs: Vec<ConditioningInput>,
    pub proposals: Vec<Proposal>,
    pub log_probs: Vec<f64>,
}

/// Checks that `policies` form a consistent team and returns its mode.
pub fn check_team(policies: &[AgentPolicy]) -> Result<Conditioning> {
    let first = policies.first().ok_or_else(|| config_err!("empty team"))?;
    for (i, p) in policies.iter().enumerate() {
        if p.agent != i || p.n_agents != policies.len() {
            return Err(config_err!("policy {} is declared as agent {} of {}", i, p.agent, p.n_agents));
        }
        if p.conditioning != first.conditioning {
            return Err(config_err!("mixed conditioning modes in one team"));
        }
        if p.context_dim != first.context_dim {
            return Err(config_err!("policies disagree on the context dimension"));
        }
    }
    Ok(first.conditioning)
}

/// Samples agents in index order, feeding each the realized prefix when the
/// team is autoregressive.
pub fn sample_joint(policies: &[AgentPolicy], ctx: &Context, rng: &mut Stream) -> Result<JointSample> {
    check_team(policies)?;
    sample_from(policies, ctx, &[], rng)
}

/// Continues a joint draw after a fixed `prefix`.
pub fn sample_from(policies: &[AgentPolicy], ctx: &Context, prefix: &[Proposal], rng: &mut Stream) -> Result<JointSample> {
    let mut proposals = prefix.to_vec();
    let mut inputs = Vec::with_capacity(policies.len());
    let mut log_probs = Vec::with_capacity(policies.len());
    for policy in &policies[prefix.len()..] {
        let z = policy.input(ctx, &proposals)?;
        let (a, lp) = policy.propose(&z, rng)?;
        proposals.push(a);
        inputs.push(z);
        log_probs.push(lp);
    }
    Ok(JointSample { inputs, proposals, log_probs })
}

/// Probability of the complete token profile, by chaining conditionals.
pub fn joint_probability(policies: &[AgentPolicy], ctx: &Context, tokens: &[usize]) -> Result<f64> {
    let mut prefix = Vec::with_capacity(tokens.len());
    let mut prob = 1.0;
    for (policy, &t) in policies.iter().zip(tokens) {
        let z = policy.input(ctx, &prefix)?;
        prob *= policy.action_probabilities(&z)?[t];
        prefix.push(Proposal { agent: policy.agent, token: t });
    }
    Ok(prob)
}

/// Baseline distribution `q_i` used to replace an agent's proposal.
///
/// None of the variants reference trainable parameters: a frozen copy owns its
/// own snapshot tagged with a version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ReplacementPolicy {
    FixedToken { token: usize, vocab_size: usize },
    Uniform { vocab_size: usize },
    FrozenCopy { version: u64, snapshot: AgentPolicy },
}

impl ReplacementPolicy {
    pub fn frozen(policy: &AgentPolicy, version: u64) -> Self {
        ReplacementPolicy::FrozenCopy { version, snapshot: policy.clone() }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            ReplacementPolicy::FixedToken { vocab_size, .. } | ReplacementPolicy::Uniform { vocab_size } => *vocab_size,
            ReplacementPolicy::FrozenCopy { snapshot, .. } => snapshot.vocab_size,
        }
    }

    pub fn probabilities(&self, z: &ConditioningInput) -> Result<Vec<f64>> {
        match self {
            ReplacementPolicy::FixedToken { token, vocab_size } => {
                if token >= vocab_size {
                    return Err(config_err!("replacement token {} outside vocabulary of size {}", token, vocab_size));
                }
                let mut p = vec![0.0; *vocab_size];
                p[*token] = 1.0;
                Ok(p)
            }
            ReplacementPolicy::Uniform { vocab_size } => Ok(vec![1.0 / *vocab_size as f64; *vocab_size]),
            ReplacementPolicy::FrozenCopy { snapshot, .. } => {
                let zz = snapshot.input(&z.context, &z.prefix)?;
                snapshot.action_probabilities(&zz)
            }
        }
    }

    pub fn sample(&self, z: &ConditioningInput, rng: &mut Stream) -> Result<Proposal> {
        let token = match self {
            ReplacementPolicy::FixedToken { token, .. } => *token,
            ReplacementPolicy::Uniform { vocab_size } => {
                (stream::uniform(rng) * *vocab_size as f64) as usize % vocab_size
            }
            ReplacementPolicy::FrozenCopy { .. } => stream::categorical(&self.probabilities(z)?, rng),
        };
        Ok(Proposal { agent: z.agent, token })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::abs;
    use crate::stream::derive;
    use proptest::prelude::*;

    fn ctx(dim: usize, id: usize) -> Context {
        let mut features = vec![0.0; dim];
        features[id] = 1.0;
        Context { id, features }
    }

    fn random_theta(rows: usize, cols: usize, rng: &mut Stream, scale: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| scale * (2.0 * stream::uniform(rng) - 1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn zero_theta_is_uniform() {
        let pol = AgentPolicy::new(0, Conditioning::Independent, 2, 1, 4);
        let z = pol.input(&ctx(2, 0), &[]).unwrap();
        let p = pol.action_probabilities(&z).unwrap();
        assert!(p.iter().all(|&x| abs(x - 0.25) < 1e-15));
        let (_, lp) = pol.propose(&z, &mut derive(0, 0)).unwrap();
        assert!(abs(lp - libm::log(0.25)) < 1e-12);
    }

    #[test]
    fn dominant_logit_wins() {
        let mut theta = Matrix::zeros(1, 3);
        theta.set(0, 1, 20.0);
        let pol = AgentPolicy::new(0, Conditioning::Independent, 1, 1, 3).with_theta(theta).unwrap();
        let z = pol.input(&ctx(1, 0), &[]).unwrap();
        let mut rng = derive(2, 0);
        let hits = (0..10_000).filter(|_| pol.propose(&z, &mut rng).unwrap().0.token == 1).count();
        assert!(hits as f64 / 10_000.0 > 0.999);
    }

    #[test]
    fn prefix_changes_autoregressive_distribution() {
        // agent 1 reacts to agent 0's token through the prefix slot
        let mut theta = Matrix::zeros(1 + 2, 2);
        theta.set(1, 0, 2.0);
        theta.set(2, 1, 2.0);
        let pol = AgentPolicy::new(1, Conditioning::Autoregressive, 1, 2, 2).with_theta(theta).unwrap();
        let c = ctx(1, 0);
        let pa = pol.action_probabilities(&pol.input(&c, &[Proposal { agent: 0, token: 0 }]).unwrap()).unwrap();
        let pb = pol.action_probabilities(&pol.input(&c, &[Proposal { agent: 0, token: 1 }]).unwrap()).unwrap();
        let tv: f64 = pa.iter().zip(&pb).map(|(x, y)| abs(x - y)).sum::<f64>() / 2.0;
        assert!(tv > 0.5);
    }

    #[test]
    fn empirical_frequencies_match_probabilities() {
        let mut rng = derive(4, 0);
        let pol = AgentPolicy::new(0, Conditioning::Independent, 2, 1, 3)
            .with_theta(random_theta(2, 3, &mut rng, 1.0))
            .unwrap();
        let z = pol.input(&ctx(2, 1), &[]).unwrap();
        let p = pol.action_probabilities(&z).unwrap();
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[pol.propose(&z, &mut rng).unwrap().0.token] += 1;
        }
        for (c, q) in counts.iter().zip(&p) {
            assert!(abs(*c as f64 / n as f64 - q) < 3.0 * libm::sqrt(q * (1.0 - q) / n as f64));
        }
    }

    #[test]
    fn uniform_binary_gradient_closed_form() {
        let pol = AgentPolicy::new(0, Conditioning::Independent, 2, 1, 2);
        let z = ConditioningInput { agent: 0, context: ctx(2, 0), prefix: vec![], encoded: vec![1.0, 2.0] };
        let g = pol.logprob_grad(&z, 0).unwrap();
        assert_eq!(g.as_slice(), &[0.5, -0.5, 1.0, -1.0]);
    }

    #[test]
    fn gradient_matches_central_differences() {
        // 100 random instances, step 1e-5, relative error 1e-4
        let mut rng = derive(8, 0);
        for case in 0..100 {
            let (d, k, v) = (3, 3, 4);
            let agent = case % k;
            let mode = if case % 2 == 0 { Conditioning::Independent } else { Conditioning::Autoregressive };
            let rows = input_dim(mode, d, k, v);
            let pol = AgentPolicy::new(agent, mode, d, k, v).with_theta(random_theta(rows, v, &mut rng, 2.0)).unwrap();
            let features: Vec<f64> = (0..d).map(|_| stream::uniform(&mut rng) * 2.0 - 1.0).collect();
            let c = Context { id: 0, features };
            let prefix: Vec<Proposal> =
                (0..agent).map(|j| Proposal { agent: j, token: stream::categorical(&[0.25; 4], &mut rng) }).collect();
            let z = pol.input(&c, &prefix).unwrap();
            let a = stream::categorical(&[0.25; 4], &mut rng);
            let g = pol.logprob_grad(&z, a).unwrap();
            let h = 1e-5;
            let mut fd = Matrix::zeros(rows, v);
            for idx in 0..rows * v {
                let mut plus = pol.clone();
                plus.theta_mut().as_mut_slice()[idx] += h;
                let mut minus = pol.clone();
                minus.theta_mut().as_mut_slice()[idx] -= h;
                fd.as_mut_slice()[idx] = (plus.log_prob(&z, a).unwrap() - minus.log_prob(&z, a).unwrap()) / (2.0 * h);
            }
            let mut diff = g.clone();
            diff.add_scaled(&fd, -1.0);
            assert!(diff.norm() / fd.norm().max(1e-12) < 1e-4, "case {case}");
        }
    }

    #[test]
    fn independent_joint_is_product_of_marginals() {
        let mut rng = derive(12, 0);
        let team: Vec<AgentPolicy> = (0..3)
            .map(|i| AgentPolicy::new(i, Conditioning::Independent, 2, 3, 3).with_theta(random_theta(2, 3, &mut rng, 1.5)).unwrap())
            .collect();
        let c = ctx(2, 1);
        let marg: Vec<Vec<f64>> =
            team.iter().map(|p| p.action_probabilities(&p.input(&c, &[]).unwrap()).unwrap()).collect();
        for t0 in 0..3 {
            for t1 in 0..3 {
                for t2 in 0..3 {
                    let joint = joint_probability(&team, &c, &[t0, t1, t2]).unwrap();
                    assert!(abs(joint - marg[0][t0] * marg[1][t1] * marg[2][t2]) < 1e-9);
                }
            }
        }
    }

    #[test]
    fn prefix_insensitive_autoregressive_equals_independent() {
        let mut rng = derive(13, 0);
        let (d, k, v) = (2, 3, 2);
        let mut ind = Vec::new();
        let mut ar = Vec::new();
        for i in 0..k {
            let base = random_theta(d, v, &mut rng, 1.0);
            ind.push(AgentPolicy::new(i, Conditioning::Independent, d, k, v).with_theta(base.clone()).unwrap());
            let rows = input_dim(Conditioning::Autoregressive, d, k, v);
            let mut full = Matrix::zeros(rows, v);
            full.as_mut_slice()[..d * v].copy_from_slice(base.as_slice());
            ar.push(AgentPolicy::new(i, Conditioning::Autoregressive, d, k, v).with_theta(full).unwrap());
        }
        let c = ctx(2, 0);
        for idx in 0..v.pow(k as u32) {
            let tokens = [idx / 4 % 2, idx / 2 % 2, idx % 2];
            let a = joint_probability(&ind, &c, &tokens).unwrap();
            let b = joint_probability(&ar, &c, &tokens).unwrap();
            assert!(abs(a - b) < 1e-9);
        }
    }

    #[test]
    fn autoregressive_joint_sums_to_one() {
        let mut rng = derive(14, 0);
        let (d, k, v) = (2, 3, 4);
        let rows = input_dim(Conditioning::Autoregressive, d, k, v);
        let team: Vec<AgentPolicy> = (0..k)
            .map(|i| AgentPolicy::new(i, Conditioning::Autoregressive, d, k, v).with_theta(random_theta(rows, v, &mut rng, 2.0)).unwrap())
            .collect();
        let c = ctx(2, 1);
        let total: f64 = (0..v.pow(k as u32))
            .map(|idx| joint_probability(&team, &c, &[idx / 16, idx / 4 % 4, idx % 4]).unwrap())
            .sum();
        assert!(abs(total - 1.0) < 1e-8);
    }

    #[test]
    fn sample_joint_single_agent_and_mixed_modes() {
        let pol = AgentPolicy::new(0, Conditioning::Independent, 1, 1, 3);
        let s = sample_joint(core::slice::from_ref(&pol), &ctx(1, 0), &mut derive(1, 1)).unwrap();
        assert_eq!(s.proposals.len(), 1);
        let (a, lp) = pol.propose(&pol.input(&ctx(1, 0), &[]).unwrap(), &mut derive(1, 1)).unwrap();
        assert_eq!((s.proposals[0], s.log_probs[0]), (a, lp));

        let mixed = vec![
            AgentPolicy::new(0, Conditioning::Independent, 1, 2, 2),
            AgentPolicy::new(1, Conditioning::Autoregressive, 1, 2, 2),
        ];
        assert!(sample_joint(&mixed, &ctx(1, 0), &mut derive(1, 1)).is_err());
    }

    #[test]
    fn replacement_policies() {
        let mut rng = derive(21, 0);
        let z = ConditioningInput::new(0, ctx(1, 0), &[], Conditioning::Independent, 1, 4).unwrap();
        let fixed = ReplacementPolicy::FixedToken { token: 0, vocab_size: 4 };
        assert!((0..100).all(|_| fixed.sample(&z, &mut rng).unwrap().token == 0));

        let n = 100_000;
        let uniform = ReplacementPolicy::Uniform { vocab_size: 4 };
        let frozen = ReplacementPolicy::frozen(&AgentPolicy::new(0, Conditioning::Independent, 1, 1, 4), 1);
        let sigma = libm::sqrt(0.25 * 0.75 / n as f64);
        for q in [&uniform, &frozen] {
            let mut counts = [0usize; 4];
            for _ in 0..n {
                counts[q.sample(&z, &mut rng).unwrap().token] += 1;
            }
            assert!(counts.iter().all(|&c| abs(c as f64 / n as f64 - 0.25) < 3.0 * sigma));
        }
    }

    #[test]
    fn frozen_copy_does_not_track_updates() {
        let mut pol = AgentPolicy::new(0, Conditioning::Independent, 1, 1, 2);
        let q = ReplacementPolicy::frozen(&pol, 7);
        pol.theta_mut().set(0, 0, 5.0);
        let z = pol.input(&ctx(1, 0), &[]).unwrap();
        assert_eq!(q.probabilities(&z).unwrap(), vec![0.5, 0.5]);
    }

    proptest! {
        #[test]
        fn score_identity(seed in 0u64..1000, v in 2usize..6) {
            let mut rng = derive(seed, 0);
            let pol = AgentPolicy::new(0, Conditioning::Independent, 3, 1, v)
                .with_theta(random_theta(3, v, &mut rng, 3.0)).unwrap();
            let features: Vec<f64> = (0..3).map(|_| stream::uniform(&mut rng) * 4.0 - 2.0).collect();
            let z = pol.input(&Context { id: 0, features }, &[]).unwrap();
            let p = pol.action_probabilities(&z).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let mut acc = Matrix::zeros(3, v);
            for (a, pa) in p.iter().enumerate() {
                acc.add_scaled(&pol.logprob_grad(&z, a).unwrap(), *pa);
            }
            prop_assert!(acc.as_slice().iter().all(|x| x.abs() < 1e-9));
        }
    }
}
