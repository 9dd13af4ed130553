//! Monte Carlo estimators against exact enumeration on the built-in
//! environments.

use cfcredit::env::{Context, EnvSpec, OutputKey, Proposal};
use cfcredit::estimator::{self, TurnState};
use cfcredit::math::{self, Matrix};
use cfcredit::mechanism::{self, Aggregator, LinearScorer, Mechanism, Router};
use cfcredit::oracle::{self, Oracle};
use cfcredit::policy::{AgentPolicy, Conditioning, DifferentiablePolicy, ReplacementPolicy};
use cfcredit::presets;
use cfcredit::rollout;
use cfcredit::stream::{self, Stream};

fn team(env: &EnvSpec, mode: Conditioning, scale: f64, rng: &mut Stream) -> Vec<AgentPolicy> {
    (0..env.n_agents)
        .map(|i| {
            let p = AgentPolicy::new(i, mode, env.feature_dim(), env.n_agents, env.vocab_size);
            let (r, c) = (p.theta().rows(), p.theta().cols());
            let data = (0..r * c).map(|_| scale * (2.0 * stream::uniform(rng) - 1.0)).collect();
            p.with_theta(Matrix::from_vec(r, c, data).unwrap()).unwrap()
        })
        .collect()
}

fn router(env: &EnvSpec, rng: &mut Stream) -> Mechanism {
    let mut scorer = LinearScorer::zeros(env.feature_dim(), env.n_agents, env.vocab_size);
    scorer.weights_mut().iter_mut().for_each(|w| *w = 2.0 * stream::uniform(rng) - 1.0);
    Mechanism::Router(Router::new(scorer, 0.8, 0.05).unwrap())
}

fn tuple() -> Mechanism {
    Mechanism::Aggregator(Aggregator::TupleIdentity)
}

/// Largest per-coordinate z-score of the sample mean against `target`.
fn max_z(samples: &[Vec<f64>], target: &[f64]) -> f64 {
    let n = samples.len() as f64;
    (0..target.len())
        .map(|k| {
            let col: Vec<f64> = samples.iter().map(|s| s[k]).collect();
            let (m, v) = math::mean_var(&col);
            let se = (v / n).sqrt();
            if se == 0.0 {
                assert!((m - target[k]).abs() < 1e-12);
                0.0
            } else {
                (m - target[k]).abs() / se
            }
        })
        .fold(0.0, f64::max)
}

#[test]
fn system_objective_matches_simulation() {
    let cases: [(&str, Conditioning, bool); 4] = [
        ("routing-basic", Conditioning::Independent, true),
        ("routing-multiturn", Conditioning::Independent, true),
        ("collab-interaction", Conditioning::Autoregressive, false),
        ("collab-multiturn", Conditioning::Autoregressive, false),
    ];
    for (n, (name, mode, routed)) in cases.into_iter().enumerate() {
        let env = presets::preset(name).unwrap();
        let mut rng = stream::derive(900, n as u64);
        let policies = team(&env, mode, 1.0, &mut rng);
        let mech = if routed { router(&env, &mut rng) } else { tuple() };
        let oracle = Oracle::new(&env, &policies, &mech).unwrap();
        for t in 0..env.horizon {
            assert!((oracle.occupancy(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let returns: Vec<Vec<f64>> = (0..50_000)
            .map(|_| vec![rollout::play_episode(&env, &policies, &mech, &mut rng).unwrap().total_return()])
            .collect();
        let z = max_z(&returns, &[oracle.j_sys()]);
        assert!(z < 3.5, "{name}: {z}σ");
    }
}

#[test]
fn rollout_estimate_matches_exact_return_to_go() {
    let env = presets::preset("collab-multiturn").unwrap();
    let mut rng = stream::derive(901, 0);
    let policies = team(&env, Conditioning::Autoregressive, 1.0, &mut rng);
    let mech = tuple();
    let oracle = Oracle::new(&env, &policies, &mech).unwrap();
    let ctx = env.context(0);
    for o in 0..env.n_outputs() {
        let y = cfcredit::env::DeployedOutput { key: env.output_key(o) };
        let est = estimator::mr_estimate(&env, &ctx, 0, &y, &policies, &mech, 40_000, &mut rng).unwrap();
        assert!((est - oracle.q_value(0, 0, o)).abs() < 0.01, "output {o}: {est} vs {}", oracle.q_value(0, 0, o));
        let last = estimator::mr_estimate(&env, &ctx, 1, &y, &policies, &mech, 3, &mut rng).unwrap();
        assert_eq!(last, env.reward_table[0][o]);
    }
}

/// Averages `ψ_i · signal` over simulated first turns and compares the result
/// with finite differences of the exact objective.
fn policy_gradient_check(
    env: &EnvSpec,
    policies: &[AgentPolicy],
    mech: &Mechanism,
    i: usize,
    n: usize,
    rng: &mut Stream,
    signal: &mut dyn FnMut(&rollout::Episode, &mut Stream) -> f64,
) -> f64 {
    let fd = oracle::system_objective_fd_gradient(policies, mech, env, i, 1e-5).unwrap();
    let samples: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let ep = rollout::play_episode(env, policies, mech, rng).unwrap();
            let first = &ep.turns[0];
            let mut g = policies[i].logprob_grad(&first.sample.inputs[i], first.sample.proposals[i].token).unwrap();
            g.scale(signal(&ep, rng));
            g.into_vec()
        })
        .collect();
    max_z(&samples, fd.as_slice())
}

#[test]
fn leave_one_out_policy_gradient_is_unbiased() {
    let env = presets::preset("collab-interaction").unwrap();
    let mut rng = stream::derive(902, 0);
    let policies = team(&env, Conditioning::Autoregressive, 1.0, &mut rng);
    let mech = tuple();
    let q = ReplacementPolicy::Uniform { vocab_size: env.vocab_size };
    for i in 0..env.n_agents {
        let z = policy_gradient_check(&env, &policies, &mech, i, 100_000, &mut rng, &mut |ep, rng| {
            let turn = &ep.turns[0];
            let state = TurnState { ctx: &turn.ctx, turn: 0, proposals: &turn.sample.proposals, realized_return: ep.return_to_go(0) };
            estimator::loo_marginal_contribution(&state, i, &q, &policies, &mech, &env, rng).unwrap().value
        });
        assert!(z < 4.0, "agent {i}: {z}σ");
    }
}

#[test]
fn doubly_robust_policy_gradient_is_unbiased() {
    let env = presets::preset("routing-basic").unwrap();
    let mut rng = stream::derive(903, 0);
    let policies = team(&env, Conditioning::Independent, 1.0, &mut rng);
    let mech = router(&env, &mut rng);
    let r = mech.router().unwrap().clone();
    let model = |_: &Context, p: &Proposal| 0.3 + 0.1 * (p.token as f64) - 0.07 * p.agent as f64;
    for i in 0..env.n_agents {
        let z = policy_gradient_check(&env, &policies, &mech, i, 100_000, &mut rng, &mut |ep, _| {
            let t = &ep.turns[0];
            let obs = mechanism::log_observation(
                t.ctx.clone(),
                &t.sample.proposals,
                t.deployment.propensities.as_ref().unwrap(),
                t.deployment.selected.unwrap(),
                ep.return_to_go(0),
                t.mech_seed,
                0,
            )
            .unwrap();
            estimator::routing_marginal_contribution(&obs, i, &model, &r).unwrap().value
        });
        assert!(z < 4.0, "agent {i}: {z}σ");
    }
}

#[test]
fn removal_contribution_matches_brute_force() {
    let env = presets::preset("routing-basic").unwrap();
    let mut rng = stream::derive(904, 0);
    let policies = team(&env, Conditioning::Independent, 1.0, &mut rng);
    let mech = router(&env, &mut rng);
    let r = mech.router().unwrap();
    let oracle = Oracle::new(&env, &policies, &mech).unwrap();
    let ctx = env.context(2);
    let profile = [Proposal { agent: 0, token: 1 }, Proposal { agent: 1, token: 1 }, Proposal { agent: 2, token: 3 }];
    let reward = |p: &Proposal| env.reward_table[ctx.id][env.output_index(&OutputKey::Selected(*p)).unwrap()];
    for i in 0..3 {
        let full: f64 = r.route_probabilities(&ctx, &profile).unwrap().iter().zip(&profile).map(|(p, a)| p * reward(a)).sum();
        let reduced: Vec<Proposal> = profile.iter().copied().filter(|a| a.agent != i).collect();
        let scores: Vec<f64> = reduced.iter().map(|a| r.scorer.score(&ctx, a).unwrap()).collect();
        let p = mechanism::mixed_softmax(&scores, r.tau, r.epsilon).unwrap();
        let without: f64 = p.iter().zip(&reduced).map(|(p, a)| p * reward(a)).sum();
        assert!((oracle.routing_contribution(0, &ctx, &profile, i).unwrap() - (full - without)).abs() < 1e-15);
    }
}

#[test]
fn analytic_gradient_with_frozen_and_fixed_replacements() {
    let env = presets::preset("collab-additive").unwrap();
    let mut rng = stream::derive(905, 0);
    let policies = team(&env, Conditioning::Autoregressive, 1.5, &mut rng);
    let frozen = team(&env, Conditioning::Autoregressive, 1.5, &mut rng);
    let mech = tuple();
    let oracle = Oracle::new(&env, &policies, &mech).unwrap();
    for (i, snapshot) in frozen.iter().enumerate() {
        let fd = oracle::system_objective_fd_gradient(&policies, &mech, &env, i, 1e-5).unwrap();
        for q in [ReplacementPolicy::frozen(snapshot, 0), ReplacementPolicy::FixedToken { token: 2, vocab_size: 3 }] {
            let mut diff = oracle.analytic_gradient(i, &q).unwrap();
            diff.add_scaled(&fd, -1.0);
            assert!(diff.norm() / fd.norm() < 1e-6);
        }
    }
}
