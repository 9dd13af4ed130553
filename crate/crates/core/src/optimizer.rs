//! Policy updates driven by per-agent signals.
//!
//! [`reinforce_update`] ascends `mean(∇log π(a|z) · Δ̂)`. [`grpo_update`]
//! normalizes the signals within each group of samples that share a context,
//! applies the ratio-clipped surrogate and subtracts an exact KL penalty to a
//! reference policy. Both clip the global gradient norm before stepping.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::env::Context;
use crate::error::{config_err, Error, Result};
use crate::math::{self, Matrix};
use crate::policy::{ConditioningInput, DifferentiablePolicy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub norm_delta: f64,
    pub grad_clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { clip_eps: 0.2, kl_beta: 0.02, learning_rate: 0.05, norm_delta: 1e-8, grad_clip_norm: 1.0 }
    }
}

impl OptimizerConfig {
    /// Learning rate sized for large language model adapters.
    pub fn language_model() -> Self {
        OptimizerConfig { learning_rate: 1e-5, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(config_err!("clip_eps must lie in (0, 1), got {}", self.clip_eps));
        }
        if !(self.kl_beta >= 0.0) {
            return Err(config_err!("kl_beta must be non-negative"));
        }
        if !(self.norm_delta > 0.0) {
            return Err(config_err!("norm_delta must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip_norm > 0.0) {
            return Err(config_err!("learning_rate and grad_clip_norm must be positive"));
        }
        Ok(())
    }
}

/// Frozen copy of a policy, used as `π_old` or `π_ref`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot<P> {
    policy: P,
}

impl<P> PolicySnapshot<P> {
    pub fn policy(&self) -> &P {
        &self.policy
    }
}

impl<P: DifferentiablePolicy> PolicySnapshot<P> {
    pub fn probabilities(&self, z: &ConditioningInput) -> Result<Vec<f64>> {
        self.policy.action_probabilities(z)
    }
}

pub fn capture_snapshot<P: Clone>(policy: &P) -> PolicySnapshot<P> {
    PolicySnapshot { policy: policy.clone() }
}

/// `(G̃_n − mean) / (population std + δ)`.
pub fn group_normalized_advantages(signals: &[f64], delta: f64) -> Result<Vec<f64>> {
    if signals.len() < 2 {
        return Err(Error::Precondition(alloc::format!("group normalization needs at least 2 samples, got {}", signals.len())));
    }
    let (mean, var) = math::mean_var(signals);
    let denom = libm::sqrt(var) + delta;
    Ok(signals.iter().map(|s| (s - mean) / denom).collect())
}

/// One action with the signal credited to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredAction {
    pub z: ConditioningInput,
    pub token: usize,
    pub signal: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub grad_norm: f64,
    pub clipped: bool,
    pub objective: f64,
}

/// `(1/|batch|) Σ ∇log π(a|z) · signal`.
pub fn reinforce_gradient<P: DifferentiablePolicy>(policy: &P, batch: &[ScoredAction]) -> Result<Matrix> {
    let params = policy.params();
    let mut grad = Matrix::zeros(params.rows(), params.cols());
    if batch.is_empty() {
        return Ok(grad);
    }
    for item in batch {
        if !item.signal.is_finite() {
            return Err(Error::Precondition("non-finite training signal".into()));
        }
        if item.signal != 0.0 {
            grad.add_scaled(&policy.logprob_grad(&item.z, item.token)?, item.signal);
        }
    }
    grad.scale(1.0 / batch.len() as f64);
    Ok(grad)
}

pub fn reinforce_update<P: DifferentiablePolicy>(
    policy: &mut P,
    batch: &[ScoredAction],
    learning_rate: f64,
    grad_clip_norm: f64,
) -> Result<UpdateStats> {
    let grad = reinforce_gradient(policy, batch)?;
    let objective = if batch.is_empty() { 0.0 } else { batch.iter().map(|b| b.signal).sum::<f64>() / batch.len() as f64 };
    Ok(ascend(policy.params_mut(), grad, learning_rate, grad_clip_norm, objective))
}

fn ascend(params: &mut Matrix, mut grad: Matrix, lr: f64, clip: f64, objective: f64) -> UpdateStats {
    let grad_norm = grad.norm();
    let clipped = grad_norm > clip;
    if clipped {
        grad.scale(clip / grad_norm);
    }
    params.add_scaled(&grad, lr);
    UpdateStats { grad_norm, clipped, objective }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoSample {
    pub z: ConditioningInput,
    pub token: usize,
    /// Per-agent signal `G̃_{i,n}` before normalization.
    pub signal: f64,
}

/// Samples drawn for one context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoGroup {
    pub context: Context,
    pub samples: Vec<GrpoSample>,
}

impl GrpoGroup {
    fn check(&self) -> Result<()> {
        if self.samples.len() < 2 {
            return Err(Error::Precondition(alloc::format!("group of size {} cannot be normalized", self.samples.len())));
        }
        if self.samples.iter().any(|s| s.z.context != self.context) {
            return Err(config_err!("group samples must share context {}", self.context.id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoGradient {
    pub gradient: Matrix,
    pub surrogate: f64,
    pub kl: f64,
    pub clipped_fraction: f64,
}

impl GrpoGradient {
    pub fn objective(&self, kl_beta: f64) -> f64 {
        self.surrogate - kl_beta * self.kl
    }
}

/// `KL(π(·|z) ‖ r)` and its gradient `Σ_a π_a ∇log π_a · log(π_a / r_a)`.
pub fn kl_and_gradient<P: DifferentiablePolicy>(policy: &P, reference: &[f64], z: &ConditioningInput) -> Result<(f64, Matrix)> {
    let probs = policy.action_probabilities(z)?;
    let params = policy.params();
    let mut grad = Matrix::zeros(params.rows(), params.cols());
    let mut kl = 0.0;
    for (a, (&p, &r)) in probs.iter().zip(reference).enumerate() {
        if p == 0.0 {
            continue;
        }
        let log_ratio = libm::log(p) - libm::log(r);
        kl += p * log_ratio;
        grad.add_scaled(&policy.logprob_grad(z, a)?, p * log_ratio);
    }
    Ok((kl, grad))
}

/// Gradient of the clipped surrogate minus `β · KL`, both averaged over every
/// sample of every group.
pub fn grpo_gradient<P: DifferentiablePolicy>(
    policy: &P,
    groups: &[GrpoGroup],
    old: &PolicySnapshot<P>,
    reference: &PolicySnapshot<P>,
    config: &OptimizerConfig,
) -> Result<GrpoGradient> {
    config.validate()?;
    let params = policy.params();
    let mut gradient = Matrix::zeros(params.rows(), params.cols());
    let (mut surrogate, mut kl, mut n, mut clipped) = (0.0, 0.0, 0usize, 0usize);
    for group in groups {
        group.check()?;
        let signals: Vec<f64> = group.samples.iter().map(|s| s.signal).collect();
        if signals.iter().any(|s| !s.is_finite()) {
            return Err(Error::Precondition("non-finite training signal".into()));
        }
        let adv = group_normalized_advantages(&signals, config.norm_delta)?;
        for (sample, &a) in group.samples.iter().zip(&adv) {
            let probs = policy.action_probabilities(&sample.z)?;
            let old_probs = old.probabilities(&sample.z)?;
            let ratio = probs[sample.token] / old_probs[sample.token];
            if !ratio.is_finite() {
                return Err(Error::Probability(alloc::format!(
                    "importance ratio is not finite for token {} (old probability {})",
                    sample.token,
                    old_probs[sample.token]
                )));
            }
            let unclipped = ratio * a;
            let bounded = ratio.clamp(1.0 - config.clip_eps, 1.0 + config.clip_eps) * a;
            if unclipped <= bounded {
                surrogate += unclipped;
                if unclipped != 0.0 {
                    gradient.add_scaled(&policy.logprob_grad(&sample.z, sample.token)?, unclipped);
                }
            } else {
                surrogate += bounded;
                clipped += 1;
            }
            if config.kl_beta > 0.0 {
                let (k, g) = kl_and_gradient(policy, &reference.probabilities(&sample.z)?, &sample.z)?;
                kl += k;
                gradient.add_scaled(&g, -config.kl_beta);
            }
            n += 1;
        }
    }
    if n == 0 {
        return Ok(GrpoGradient { gradient, surrogate: 0.0, kl: 0.0, clipped_fraction: 0.0 });
    }
    let scale = 1.0 / n as f64;
    gradient.scale(scale);
    Ok(GrpoGradient { gradient, surrogate: surrogate * scale, kl: kl * scale, clipped_fraction: clipped as f64 * scale })
}

pub fn grpo_update<P: DifferentiablePolicy>(
    policy: &mut P,
    groups: &[GrpoGroup],
    old: &PolicySnapshot<P>,
    reference: &PolicySnapshot<P>,
    config: &OptimizerConfig,
) -> Result<UpdateStats> {
    let step = grpo_gradient(policy, groups, old, reference, config)?;
    let objective = step.objective(config.kl_beta);
    Ok(ascend(policy.params_mut(), step.gradient, config.learning_rate, config.grad_clip_norm, objective))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::abs;
    use crate::policy::{AgentPolicy, Conditioning};
    use crate::stream::{self, derive, Stream};
    use alloc::vec;
    use proptest::prelude::*;

    fn ctx(dim: usize, id: usize) -> Context {
        let mut features = vec![0.0; dim];
        features[id] = 1.0;
        Context { id, features }
    }

    fn random_policy(rng: &mut Stream, d: usize, v: usize, scale: f64) -> AgentPolicy {
        let data = (0..d * v).map(|_| scale * (2.0 * stream::uniform(rng) - 1.0)).collect();
        AgentPolicy::new(0, Conditioning::Independent, d, 1, v).with_theta(Matrix::from_vec(d, v, data).unwrap()).unwrap()
    }

    fn group(policy: &AgentPolicy, c: &Context, tokens: &[usize], signals: &[f64]) -> GrpoGroup {
        let z = policy.input(c, &[]).unwrap();
        GrpoGroup {
            context: c.clone(),
            samples: tokens.iter().zip(signals).map(|(&token, &signal)| GrpoSample { z: z.clone(), token, signal }).collect(),
        }
    }

    #[test]
    fn advantages() {
        assert_eq!(group_normalized_advantages(&[0.3; 4], 1e-8).unwrap(), vec![0.0; 4]);
        let a = group_normalized_advantages(&[0.0, 1.0], 1e-12).unwrap();
        assert!(abs(a[0] + 1.0) < 1e-9 && abs(a[1] - 1.0) < 1e-9);
        assert!(group_normalized_advantages(&[1.0], 1e-8).is_err());
    }

    proptest! {
        #[test]
        fn advantages_are_centered(xs in proptest::collection::vec(-10.0f64..10.0, 2..12), shift in -5.0f64..5.0) {
            let a = group_normalized_advantages(&xs, 1e-8).unwrap();
            prop_assert!(abs(a.iter().sum::<f64>() / a.len() as f64) < 1e-12);
            let shifted: Vec<f64> = xs.iter().map(|x| x + shift).collect();
            let b = group_normalized_advantages(&shifted, 1e-8).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(abs(x - y) < 1e-6);
            }
        }
    }

    #[test]
    fn zero_signals_leave_parameters_unchanged() {
        let mut rng = derive(4, 0);
        let mut p = random_policy(&mut rng, 2, 3, 1.0);
        let before = p.clone();
        let z = p.input(&ctx(2, 1), &[]).unwrap();
        let batch: Vec<ScoredAction> = (0..5).map(|t| ScoredAction { z: z.clone(), token: t % 3, signal: 0.0 }).collect();
        reinforce_update(&mut p, &batch, 0.5, 1.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn reinforce_solves_two_armed_bandit() {
        let mut rng = derive(5, 0);
        let mut p = AgentPolicy::new(0, Conditioning::Independent, 1, 1, 2);
        let c = ctx(1, 0);
        let z = p.input(&c, &[]).unwrap();
        for _ in 0..2000 {
            let batch: Vec<ScoredAction> = (0..8)
                .map(|_| {
                    let (a, _) = p.propose(&z, &mut rng).unwrap();
                    ScoredAction { z: z.clone(), token: a.token, signal: if a.token == 0 { 1.0 } else { 0.0 } }
                })
                .collect();
            reinforce_update(&mut p, &batch, 0.5, 1.0).unwrap();
        }
        assert!(p.action_probabilities(&z).unwrap()[0] > 0.99);
    }

    #[test]
    fn global_norm_clipping() {
        let mut p = AgentPolicy::new(0, Conditioning::Independent, 1, 1, 2);
        let z = p.input(&ctx(1, 0), &[]).unwrap();
        let stats = reinforce_update(&mut p, &[ScoredAction { z, token: 0, signal: 100.0 }], 1.0, 1.0).unwrap();
        assert!(stats.clipped);
        assert!(abs(p.theta().norm() - 1.0) < 1e-12);
    }

    #[test]
    fn unit_ratio_matches_normalized_reinforce() {
        let mut rng = derive(6, 0);
        let p = random_policy(&mut rng, 3, 4, 1.0);
        let cfg = OptimizerConfig { kl_beta: 0.0, ..OptimizerConfig::default() };
        let snap = capture_snapshot(&p);
        let groups: Vec<GrpoGroup> = (0..3)
            .map(|c| {
                let tokens: Vec<usize> = (0..4).map(|_| stream::categorical(&[0.25; 4], &mut rng)).collect();
                let signals: Vec<f64> = (0..4).map(|_| stream::uniform(&mut rng)).collect();
                group(&p, &ctx(3, c), &tokens, &signals)
            })
            .collect();
        let g = grpo_gradient(&p, &groups, &snap, &snap, &cfg).unwrap();
        let mut batch = Vec::new();
        for grp in &groups {
            let signals: Vec<f64> = grp.samples.iter().map(|s| s.signal).collect();
            let adv = group_normalized_advantages(&signals, cfg.norm_delta).unwrap();
            for (s, a) in grp.samples.iter().zip(adv) {
                batch.push(ScoredAction { z: s.z.clone(), token: s.token, signal: a });
            }
        }
        let r = reinforce_gradient(&p, &batch).unwrap();
        for (x, y) in g.gradient.as_slice().iter().zip(r.as_slice()) {
            assert!(abs(x - y) < 1e-9);
        }
        assert_eq!(g.clipped_fraction, 0.0);
    }

    #[test]
    fn saturated_ratio_contributes_no_gradient() {
        let cfg = OptimizerConfig { kl_beta: 0.0, ..OptimizerConfig::default() };
        let c = ctx(1, 0);
        let old = AgentPolicy::new(0, Conditioning::Independent, 1, 1, 2);
        // π(0) = 0.7 against π_old(0) = 0.5 gives ρ = 1.4 = 1 + 2ε
        let logit = libm::log(0.7 / 0.3);
        let cur = old.clone().with_theta(Matrix::from_vec(1, 2, vec![logit, 0.0]).unwrap()).unwrap();
        let z = cur.input(&c, &[]).unwrap();
        assert!(abs(cur.action_probabilities(&z).unwrap()[0] / 0.5 - 1.4) < 1e-12);
        // token 0 gets the positive advantage
        let grp = group(&cur, &c, &[0, 1], &[1.0, 0.0]);
        let snap = capture_snapshot(&old);
        let g = grpo_gradient(&cur, &[grp], &snap, &snap, &cfg).unwrap();
        // the token-1 sample has ρ = 0.6 < 1 − ε with Â < 0, so it saturates too
        assert_eq!(g.clipped_fraction, 1.0);
        assert!(g.gradient.as_slice().iter().all(|&x| x == 0.0));

        let unsaturated = group(&cur, &c, &[0, 1], &[0.0, 1.0]);
        let g = grpo_gradient(&cur, &[unsaturated], &snap, &snap, &cfg).unwrap();
        assert_eq!(g.clipped_fraction, 0.0);
        assert!(g.gradient.norm() > 0.0);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let mut rng = derive(7, 0);
        let p = random_policy(&mut rng, 2, 3, 1.0);
        let r = [0.2, 0.3, 0.5];
        let z = p.input(&ctx(2, 0), &[]).unwrap();
        let (_, g) = kl_and_gradient(&p, &r, &z).unwrap();
        let h = 1e-6;
        for k in 0..6 {
            let mut plus = p.clone();
            plus.theta_mut().as_mut_slice()[k] += h;
            let mut minus = p.clone();
            minus.theta_mut().as_mut_slice()[k] -= h;
            let fd = (kl_and_gradient(&plus, &r, &z).unwrap().0 - kl_and_gradient(&minus, &r, &z).unwrap().0) / (2.0 * h);
            assert!(abs(fd - g.as_slice()[k]) < 1e-7);
        }
    }

    #[test]
    fn strong_kl_pulls_toward_reference() {
        let mut rng = derive(8, 0);
        let reference = AgentPolicy::new(0, Conditioning::Independent, 2, 1, 3);
        let mut p = random_policy(&mut rng, 2, 3, 1.5);
        let cfg = OptimizerConfig { kl_beta: 10.0, ..OptimizerConfig::default() };
        let ref_snap = capture_snapshot(&reference);
        let kl_at = |p: &AgentPolicy| -> f64 {
            (0..2)
                .map(|c| {
                    let z = p.input(&ctx(2, c), &[]).unwrap();
                    kl_and_gradient(p, &[1.0 / 3.0; 3], &z).unwrap().0
                })
                .sum()
        };
        let start = kl_at(&p);
        for _ in 0..100 {
            let groups: Vec<GrpoGroup> = (0..2)
                .map(|c| {
                    let z = p.input(&ctx(2, c), &[]).unwrap();
                    let tokens: Vec<usize> = (0..4).map(|_| p.propose(&z, &mut rng).unwrap().0.token).collect();
                    let signals: Vec<f64> = (0..4).map(|_| stream::uniform(&mut rng)).collect();
                    group(&p, &ctx(2, c), &tokens, &signals)
                })
                .collect();
            let old = capture_snapshot(&p);
            grpo_update(&mut p, &groups, &old, &ref_snap, &cfg).unwrap();
        }
        let end = kl_at(&p);
        assert!(end < start || end < 1e-6, "{start} -> {end}");
    }

    #[test]
    fn snapshots_are_deep_copies() {
        let mut rng = derive(9, 0);
        let mut p = random_policy(&mut rng, 2, 3, 1.0);
        let snap = capture_snapshot(&p);
        let z = p.input(&ctx(2, 1), &[]).unwrap();
        let before = snap.probabilities(&z).unwrap();
        p.theta_mut().scale(3.0);
        assert_eq!(snap.probabilities(&z).unwrap(), before);
        assert_eq!(capture_snapshot(snap.policy()), snap);
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        assert_eq!(OptimizerConfig::language_model().learning_rate, 1e-5);
        assert!(OptimizerConfig { clip_eps: 1.0, ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { kl_beta: -1.0, ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { norm_delta: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn undersized_group_rejected() {
        let p = AgentPolicy::new(0, Conditioning::Independent, 1, 1, 2);
        let g = group(&p, &ctx(1, 0), &[0], &[1.0]);
        let snap = capture_snapshot(&p);
        assert!(grpo_gradient(&p, &[g], &snap, &snap, &OptimizerConfig::default()).is_err());
    }
}
