//! Forward simulation of episodes.

use alloc::vec::Vec;

use rand::RngCore;

use crate::env::{Context, DeployedOutput, EnvSpec};
use crate::error::{config_err, Result};
use crate::mechanism::{Deployment, Mechanism};
use crate::policy::{self, AgentPolicy, JointSample};
use crate::stream::Stream;

#[derive(Debug, Clone, PartialEq)]
pub struct TurnRecord {
    pub turn: usize,
    pub ctx: Context,
    pub sample: JointSample,
    pub mech_seed: u64,
    pub deployment: Deployment,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub turns: Vec<TurnRecord>,
}

impl Episode {
    /// `G_t`: realized rewards summed from turn `t` to the horizon.
    pub fn return_to_go(&self, t: usize) -> f64 {
        self.turns[t..].iter().map(|r| r.reward).sum()
    }

    pub fn total_return(&self) -> f64 {
        self.return_to_go(0)
    }
}

/// Checks that the team, mechanism and environment agree on shapes.
pub fn check_compatible(env: &EnvSpec, policies: &[AgentPolicy], mechanism: &Mechanism) -> Result<()> {
    env.validate()?;
    policy::check_team(policies)?;
    if policies.len() != env.n_agents {
        return Err(config_err!("{} policies for {} agents", policies.len(), env.n_agents));
    }
    if let Some(p) = policies.iter().find(|p| p.vocab_size != env.vocab_size || p.context_dim != env.feature_dim()) {
        return Err(config_err!("policy for agent {} does not match the environment shape", p.agent));
    }
    if mechanism.output_space() != env.output_space {
        return Err(config_err!("mechanism output space {:?} does not match environment {:?}", mechanism.output_space(), env.output_space));
    }
    Ok(())
}

/// Samples proposals, applies the mechanism and draws the reward.
pub fn play_turn(
    env: &EnvSpec,
    policies: &[AgentPolicy],
    mechanism: &Mechanism,
    ctx: &Context,
    turn: usize,
    rng: &mut Stream,
) -> Result<TurnRecord> {
    let sample = policy::sample_from(policies, ctx, &[], rng)?;
    let mech_seed = rng.next_u64();
    let deployment = mechanism.deploy(ctx, &sample.proposals, mech_seed)?;
    let reward = env.reward(ctx, &deployment.output, rng)?;
    Ok(TurnRecord { turn, ctx: ctx.clone(), sample, mech_seed, deployment, reward })
}

/// Plays turns `turn..horizon` starting in `ctx`.
pub fn play_from(
    env: &EnvSpec,
    policies: &[AgentPolicy],
    mechanism: &Mechanism,
    ctx: Context,
    turn: usize,
    rng: &mut Stream,
) -> Result<Episode> {
    let mut turns = Vec::with_capacity(env.horizon.saturating_sub(turn));
    let mut ctx = ctx;
    for t in turn..env.horizon {
        let record = play_turn(env, policies, mechanism, &ctx, t, rng)?;
        if t + 1 < env.horizon {
            ctx = env.transition(&ctx, &record.deployment.output, rng)?;
        }
        turns.push(record);
    }
    Ok(Episode { turns })
}

pub fn play_episode(env: &EnvSpec, policies: &[AgentPolicy], mechanism: &Mechanism, rng: &mut Stream) -> Result<Episode> {
    let ctx = env.sample_context(rng);
    play_from(env, policies, mechanism, ctx, 0, rng)
}

/// Realized rewards after deploying `y` at (`ctx`, `turn`), excluding the
/// reward of `y` itself. Zero on the last turn.
pub fn continuation(
    env: &EnvSpec,
    policies: &[AgentPolicy],
    mechanism: &Mechanism,
    ctx: &Context,
    turn: usize,
    y: &DeployedOutput,
    rng: &mut Stream,
) -> Result<f64> {
    if turn + 1 >= env.horizon {
        return Ok(0.0);
    }
    let next = env.transition(ctx, y, rng)?;
    Ok(play_from(env, policies, mechanism, next, turn + 1, rng)?.total_return())
}
