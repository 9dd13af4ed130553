//! Built-in environments.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::env::{EnvSpec, OutputSpace, RewardNoise};
use crate::error::{config_err, Result};
use crate::oracle;

pub struct PresetInfo {
    pub name: &'static str,
    pub summary: &'static str,
}

pub const PRESETS: &[PresetInfo] = &[
    PresetInfo {
        name: "routing-basic",
        summary: "3 specialist agents, 6 labelled contexts, 4 tokens, Bernoulli rewards, softmax routing",
    },
    PresetInfo {
        name: "routing-multiturn",
        summary: "2 agents over 2 turns; a correct first answer leads to an easier follow-up",
    },
    PresetInfo {
        name: "collab-interaction",
        summary: "2 agents deployed as a tuple; reward needs the second token to complement the first",
    },
    PresetInfo { name: "collab-additive", summary: "2 agents deployed as a tuple with additive Bernoulli rewards" },
    PresetInfo {
        name: "collab-multiturn",
        summary: "2 agents deployed as a tuple over 2 turns with context-dependent transitions",
    },
    PresetInfo { name: "shared-reward-first", summary: "uniform binary tuple rewarded by the first agent's token" },
    PresetInfo { name: "shared-reward-second", summary: "uniform binary tuple rewarded by the second agent's token" },
];

pub fn names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|p| p.name)
}

pub fn preset(name: &str) -> Result<EnvSpec> {
    let env = match name {
        "routing-basic" => routing_basic(),
        "routing-multiturn" => routing_multiturn(),
        "collab-interaction" => collab_interaction(),
        "collab-additive" => collab_additive(),
        "collab-multiturn" => collab_multiturn(),
        "shared-reward-first" => oracle::shared_reward_env(0),
        "shared-reward-second" => oracle::shared_reward_env(1),
        other => {
            let known: Vec<&str> = names().collect();
            return Err(config_err!("unknown preset `{}`; known presets: {}", other, known.join(", ")));
        }
    };
    env.validate()?;
    Ok(env.with_optimum())
}

fn base(name: &str, n_contexts: usize, n_agents: usize, vocab_size: usize, output_space: OutputSpace) -> EnvSpec {
    EnvSpec {
        name: String::from(name),
        n_contexts,
        features: None,
        n_agents,
        vocab_size,
        horizon: 1,
        output_space,
        reward_table: Vec::new(),
        reward_noise: RewardNoise::Bernoulli,
        transition_table: None,
        initial_distribution: None,
        context_labels: None,
        agent_specialties: None,
        optimum: None,
        description: None,
    }
}

/// Correct answers pay most when the agent's specialty matches the context.
fn routing_basic() -> EnvSpec {
    let (k, v) = (3, 4);
    let labels = vec![0, 0, 1, 1, 2, 2];
    let answers = [0, 3, 1, 2, 3, 0];
    let mut env = base("routing-basic", labels.len(), k, v, OutputSpace::Selected);
    env.reward_table = labels
        .iter()
        .zip(answers)
        .map(|(&label, answer)| {
            (0..k * v)
                .map(|o| {
                    let (agent, token) = (o / v, o % v);
                    match (token == answer, agent == label) {
                        (true, true) => 0.9,
                        (true, false) => 0.5,
                        (false, _) => 0.1,
                    }
                })
                .collect()
        })
        .collect();
    env.context_labels = Some(labels);
    env.agent_specialties = Some(vec![0, 1, 2]);
    env.description = Some(String::from("context label l is the specialty of agent l"));
    env
}

fn routing_multiturn() -> EnvSpec {
    let (k, v) = (2, 3);
    // contexts 0 and 1 open an episode; context 2 is the follow-up
    let answers = [0, 2, 1];
    let labels = vec![0, 1, 0];
    let mut env = base("routing-multiturn", 3, k, v, OutputSpace::Selected);
    env.horizon = 2;
    env.initial_distribution = Some(vec![0.5, 0.5, 0.0]);
    env.reward_table = (0..3)
        .map(|c| {
            (0..k * v)
                .map(|o| {
                    let (agent, token) = (o / v, o % v);
                    match (token == answers[c], agent == labels[c]) {
                        (true, true) => 0.8,
                        (true, false) => 0.6,
                        (false, _) => 0.2,
                    }
                })
                .collect()
        })
        .collect();
    env.transition_table = Some(
        (0..3)
            .map(|c| {
                (0..k * v)
                    .map(|o| if o % v == answers[c] { vec![0.0, 0.0, 1.0] } else { vec![0.5, 0.5, 0.0] })
                    .collect()
            })
            .collect(),
    );
    env.context_labels = Some(labels);
    env.agent_specialties = Some(vec![0, 1]);
    env
}

/// Large context offsets carry no information about the actions, so the
/// shared return is dominated by noise a counterfactual difference removes.
fn collab_interaction() -> EnvSpec {
    let v = 3;
    let offsets = [0.0, 0.35, 0.7];
    let mut env = base("collab-interaction", offsets.len(), 2, v, OutputSpace::Joint);
    env.reward_noise = RewardNoise::Deterministic;
    env.reward_table = offsets
        .iter()
        .enumerate()
        .map(|(c, off)| {
            (0..v * v)
                .map(|o| {
                    let (a1, a2) = (o / v, o % v);
                    let matched = a2 == (a1 + c) % v;
                    off + if matched { 0.2 } else { 0.0 } + if a1 == 0 { 0.05 } else { 0.0 }
                })
                .collect()
        })
        .collect();
    env
}

fn collab_additive() -> EnvSpec {
    let v = 3;
    let utilities = [[[0.1, 0.5, 0.9], [0.6, 0.2, 0.3]], [[0.7, 0.2, 0.1], [0.1, 0.4, 0.8]]];
    let mut env = base("collab-additive", 2, 2, v, OutputSpace::Joint);
    env.reward_table = utilities
        .iter()
        .map(|u| (0..v * v).map(|o| (u[0][o / v] + u[1][o % v]) / 2.0).collect())
        .collect();
    env
}

fn collab_multiturn() -> EnvSpec {
    let v = 2;
    let mut env = base("collab-multiturn", 2, 2, v, OutputSpace::Joint);
    env.horizon = 2;
    env.initial_distribution = Some(vec![1.0, 0.0]);
    env.reward_table = vec![vec![0.2, 0.7, 0.4, 0.3], vec![0.9, 0.1, 0.1, 0.6]];
    // agreeing tokens move to context 1
    env.transition_table = Some(
        (0..2)
            .map(|_| (0..v * v).map(|o| if o / v == o % v { vec![0.2, 0.8] } else { vec![0.9, 0.1] }).collect())
            .collect(),
    );
    env
}
