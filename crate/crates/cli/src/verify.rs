//! The acceptance suite: nine numbered checks, each comparing an estimator,
//! gradient or training outcome against an exact oracle or a stated
//! tolerance.
//!
//! Every check is deterministic given its hard-coded seeds and reports a
//! one-line verdict. A check that errors counts as failed.

use std::time::{Duration, Instant};

use cfcredit::env::{Context, EnvSpec, OutputKey, Proposal};
use cfcredit::estimator::{self, EstimatorKind, TurnState};
use cfcredit::harness::{self, EnvSource, ExperimentConfig, MechanismConfig, RunOutput, Trainer, TrainerState};
use cfcredit::math::{self, Matrix};
use cfcredit::mechanism::{self, Aggregator, LinearScorer, Mechanism, Router};
use cfcredit::optimizer::{self, GrpoGroup, GrpoSample, OptimizerConfig, ScoredAction};
use cfcredit::oracle::{self, Oracle, RewardDistribution};
use cfcredit::policy::{self, AgentPolicy, Conditioning, DifferentiablePolicy, ReplacementPolicy};
use cfcredit::presets;
use cfcredit::rollout;
use cfcredit::stream::{self, Stream};
use rand::RngCore;

use crate::output;

#[derive(Debug, Clone)]
pub struct Verdict {
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: String) -> Self {
        Verdict { passed, detail }
    }
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
    pub budget: Duration,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "[{}] criterion {} ({}): {} [{:.1}s of {}s]",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.elapsed.as_secs_f64(),
            self.budget.as_secs()
        )
    }
}

type CheckFn = fn() -> anyhow::Result<Verdict>;

pub struct Criterion {
    pub id: usize,
    pub name: &'static str,
    pub budget_secs: u64,
    run: CheckFn,
}

pub const CRITERIA: [Criterion; 9] = [
    Criterion { id: 1, name: "dr unbiasedness", budget_secs: 10, run: dr_unbiasedness },
    Criterion { id: 2, name: "loo unbiasedness", budget_secs: 60, run: loo_unbiasedness },
    Criterion { id: 3, name: "counterfactual gradient identity", budget_secs: 60, run: gradient_identity },
    Criterion { id: 4, name: "variance ordering", budget_secs: 120, run: variance_ordering },
    Criterion { id: 5, name: "risk-sensitive incentives", budget_secs: 5, run: risk_sensitivity },
    Criterion { id: 6, name: "shared-reward counterexample", budget_secs: 30, run: shared_reward },
    Criterion { id: 7, name: "routing training comparison", budget_secs: 600, run: routing_training },
    Criterion { id: 8, name: "grpo mechanics", budget_secs: 5, run: grpo_mechanics },
    Criterion { id: 9, name: "determinism", budget_secs: 60, run: determinism },
];

/// Runs one criterion. Exceeding the time budget fails the check.
pub fn run(c: &Criterion) -> CheckOutcome {
    let start = Instant::now();
    let (passed, mut detail) = match (c.run)() {
        Ok(v) => (v.passed, v.detail),
        Err(e) => (false, format!("error: {e:#}")),
    };
    let elapsed = start.elapsed();
    let budget = Duration::from_secs(c.budget_secs);
    let in_time = elapsed <= budget;
    if !in_time {
        detail.push_str("; over time budget");
    }
    CheckOutcome { id: c.id, name: c.name, passed: passed && in_time, detail, elapsed, budget }
}

pub fn run_all() -> Vec<CheckOutcome> {
    CRITERIA.iter().map(run).collect()
}

pub fn criterion(id: usize) -> Option<&'static Criterion> {
    CRITERIA.iter().find(|c| c.id == id)
}

fn symmetric(rng: &mut Stream, scale: f64) -> f64 {
    scale * (2.0 * stream::uniform(rng) - 1.0)
}

/// Team with independent uniform weights on `[-scale, scale]`.
pub fn random_team(env: &EnvSpec, mode: Conditioning, scale: f64, rng: &mut Stream) -> anyhow::Result<Vec<AgentPolicy>> {
    (0..env.n_agents)
        .map(|i| {
            let p = AgentPolicy::new(i, mode, env.feature_dim(), env.n_agents, env.vocab_size);
            let (r, c) = (p.theta().rows(), p.theta().cols());
            let data = (0..r * c).map(|_| symmetric(rng, scale)).collect();
            Ok(p.with_theta(Matrix::from_vec(r, c, data)?)?)
        })
        .collect()
}

fn random_router(env: &EnvSpec, tau: f64, epsilon: f64, rng: &mut Stream) -> anyhow::Result<Router> {
    let mut scorer = LinearScorer::zeros(env.feature_dim(), env.n_agents, env.vocab_size);
    scorer.weights_mut().iter_mut().for_each(|w| *w = symmetric(rng, 1.0));
    Ok(Router::new(scorer, tau, epsilon)?)
}

fn profiles(k: usize, v: usize) -> Vec<Vec<Proposal>> {
    let mut out = Vec::with_capacity(v.pow(k as u32));
    for mut code in 0..v.pow(k as u32) {
        let mut p = Vec::with_capacity(k);
        for agent in 0..k {
            p.push(Proposal { agent, token: code % v });
            code /= v;
        }
        out.push(p);
    }
    out
}

/// Mean, standard error and z-score against `target`. A zero standard error
/// gives a z-score of 0 on exact agreement and infinity otherwise.
fn z_score(xs: &[f64], target: f64) -> (f64, f64, f64) {
    let (m, v) = math::mean_var(xs);
    let se = (v / xs.len() as f64).sqrt();
    let diff = (m - target).abs();
    let z = if se > 0.0 {
        diff / se
    } else if diff < 1e-12 {
        0.0
    } else {
        f64::INFINITY
    };
    (m, se, z)
}

/// Exact expectation of the routing estimator over the selection, compared
/// with the enumerated removal contribution for every context, turn,
/// proposal profile and agent. The propensity branch uses true logged
/// propensities with a deliberately wrong reward model. The model branch
/// uses the exact return-to-go model while the selection follows a
/// distribution unrelated to the logged propensities.
fn dr_unbiasedness() -> anyhow::Result<Verdict> {
    let mut worst: f64 = 0.0;
    let mut worst_candidate: f64 = 0.0;
    let mut cases = 0usize;
    for (n, name) in ["routing-basic", "routing-multiturn"].into_iter().enumerate() {
        let env = presets::preset(name)?;
        let mut rng = stream::derive(101, n as u64);
        let team = random_team(&env, Conditioning::Independent, 1.0, &mut rng)?;
        let router = random_router(&env, 0.8, 0.05, &mut rng)?;
        let mech = Mechanism::Router(router.clone());
        let oracle = Oracle::new(&env, &team, &mech)?;
        let k = env.n_agents;
        let wrong = |_: &Context, p: &Proposal| 0.37 + 0.11 * p.token as f64 - 0.05 * p.agent as f64;
        for t in 0..env.horizon {
            for c in 0..env.n_contexts {
                let ctx = env.context(c);
                let exact_model = |cx: &Context, p: &Proposal| {
                    let o = env.output_index(&OutputKey::Selected(*p)).expect("proposal inside the output space");
                    oracle.q_value(t, cx.id, o)
                };
                for profile in profiles(k, env.vocab_size) {
                    let p = router.route_probabilities(&ctx, &profile)?;
                    let q: Vec<f64> = profile.iter().map(|a| exact_model(&ctx, a)).collect();
                    let arbitrary: Vec<f64> = (0..k).map(|j| (j + 1) as f64 / (k * (k + 1) / 2) as f64).collect();
                    let obs = |sel: usize| {
                        mechanism::log_observation(ctx.clone(), &profile, &p, sel, q[sel], 0, t)
                    };
                    // candidate-level identities, with arbitrary logged propensities in the model branch
                    for j in 0..k {
                        let mut prop_branch = 0.0;
                        let mut model_branch = 0.0;
                        for s in 0..k {
                            prop_branch += p[s] * estimator::dr_candidate_return(&obs(s)?, j, &wrong)?.value;
                            let skewed = mechanism::log_observation(ctx.clone(), &profile, &arbitrary, s, q[s], 0, t)?;
                            model_branch += p[s] * estimator::dr_candidate_return(&skewed, j, &exact_model)?.value;
                        }
                        worst_candidate = worst_candidate.max((prop_branch - q[j]).abs()).max((model_branch - q[j]).abs());
                    }
                    for i in 0..k {
                        let target = oracle.routing_contribution(t, &ctx, &profile, i)?;
                        let mut prop_branch = 0.0;
                        let mut model_branch = 0.0;
                        for s in 0..k {
                            let o = obs(s)?;
                            prop_branch += p[s] * estimator::routing_marginal_contribution(&o, i, &wrong, &router)?.value;
                            model_branch +=
                                arbitrary[s] * estimator::routing_marginal_contribution(&o, i, &exact_model, &router)?.value;
                        }
                        worst = worst.max((prop_branch - target).abs()).max((model_branch - target).abs());
                        cases += 1;
                    }
                }
            }
        }
    }
    let passed = worst < 1e-12 && worst_candidate < 1e-12;
    Ok(Verdict::new(
        passed,
        format!("{cases} (turn, context, profile, agent) cases; max |E[Δ̂] − Δ| = {worst:.2e}, max candidate error = {worst_candidate:.2e} (tol 1e-12)"),
    ))
}

fn collab_mechanism() -> Mechanism {
    Mechanism::Aggregator(Aggregator::TupleIdentity)
}

/// Monte Carlo leave-one-out contributions at a fixed head `(z, a^(i))`.
#[allow(clippy::too_many_arguments)]
pub fn loo_samples(
    env: &EnvSpec,
    team: &[AgentPolicy],
    mech: &Mechanism,
    q: &ReplacementPolicy,
    ctx: &Context,
    head: &[Proposal],
    n: usize,
    rng: &mut Stream,
) -> anyhow::Result<Vec<f64>> {
    let i = head.len() - 1;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let proposals = policy::sample_from(team, ctx, head, rng)?.proposals;
        let deployment = mech.deploy(ctx, &proposals, rng.next_u64())?;
        let r = env.reward(ctx, &deployment.output, rng)?;
        let g = r + rollout::continuation(env, team, mech, ctx, 0, &deployment.output, rng)?;
        let state = TurnState { ctx, turn: 0, proposals: &proposals, realized_return: g };
        out.push(estimator::loo_marginal_contribution(&state, i, q, team, mech, env, rng)?.value);
    }
    Ok(out)
}

fn loo_unbiasedness() -> anyhow::Result<Verdict> {
    const N: usize = 100_000;
    let mech = collab_mechanism();
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (n, name) in ["collab-interaction", "collab-additive", "collab-multiturn"].into_iter().enumerate() {
        let env = presets::preset(name)?;
        let mut rng = stream::derive(202, n as u64);
        let team = random_team(&env, Conditioning::Autoregressive, 1.0, &mut rng)?;
        let q = ReplacementPolicy::Uniform { vocab_size: env.vocab_size };
        let oracle = Oracle::new(&env, &team, &mech)?;
        let ctx = env.context(0);
        let tokens = [1 % env.vocab_size, 0];
        for i in 0..env.n_agents {
            let head: Vec<Proposal> = (0..=i).map(|a| Proposal { agent: a, token: tokens[a] }).collect();
            let exact = oracle.marginal_given_upstream(0, &ctx, &head, &q)?;
            let xs = loo_samples(&env, &team, &mech, &q, &ctx, &head, N, &mut rng)?;
            let (m, _, z) = z_score(&xs, exact);
            worst = worst.max(z);
            parts.push(format!("{name}/agent {i}: {m:.4} vs {exact:.4} ({z:.2}σ)"));
        }
    }
    Ok(Verdict::new(worst < 3.0, format!("max deviation {worst:.2}σ at 1e5 samples (tol 3σ); {}", parts.join(", "))))
}

fn gradient_identity() -> anyhow::Result<Verdict> {
    const INITS: usize = 20;
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    let setups: [(&str, Conditioning, bool); 3] = [
        ("collab-interaction", Conditioning::Autoregressive, false),
        ("collab-multiturn", Conditioning::Autoregressive, false),
        ("routing-basic", Conditioning::Independent, true),
    ];
    for (n, (name, mode, routed)) in setups.into_iter().enumerate() {
        let env = presets::preset(name)?;
        let mut rng = stream::derive(303, n as u64);
        let q = ReplacementPolicy::Uniform { vocab_size: env.vocab_size };
        let mut local: f64 = 0.0;
        for _ in 0..INITS {
            let team = random_team(&env, mode, 1.0, &mut rng)?;
            let mech = if routed { Mechanism::Router(random_router(&env, 0.8, 0.05, &mut rng)?) } else { collab_mechanism() };
            let oracle = Oracle::new(&env, &team, &mech)?;
            for i in 0..env.n_agents {
                let analytic = oracle.analytic_gradient(i, &q)?;
                let fd = oracle::system_objective_fd_gradient(&team, &mech, &env, i, 1e-5)?;
                let mut diff = analytic.clone();
                diff.add_scaled(&fd, -1.0);
                local = local.max(diff.norm() / fd.norm().max(1e-12));
            }
        }
        worst = worst.max(local);
        parts.push(format!("{name} {local:.2e}"));
    }
    Ok(Verdict::new(
        worst < 1e-4,
        format!("max relative error {worst:.2e} over {INITS} initializations per preset (tol 1e-4); {}", parts.join(", ")),
    ))
}

fn variance_ordering() -> anyhow::Result<Verdict> {
    const N: usize = 100_000;
    let env = presets::preset("collab-interaction")?;
    let mech = collab_mechanism();
    let mut rng = stream::derive(404, 0);
    let team = random_team(&env, Conditioning::Autoregressive, 1.0, &mut rng)?;
    let q = ReplacementPolicy::Uniform { vocab_size: env.vocab_size };
    let mut passed = true;
    let mut parts = Vec::new();
    for i in 0..env.n_agents {
        let r = oracle::gradient_variance_report(&env, &team, &mech, &q, i, N, &mut rng)?;
        let means_ok = r.max_mean_z_shared_difference < 3.0 && r.max_mean_z_shared_delta < 3.0;
        let gap1 = r.shared_minus_difference.sigmas();
        let gap2 = r.difference_minus_delta.sigmas();
        let d = &r.decomposition;
        let resid_ok = d.residual.abs() < 3.0 * d.residual_se;
        passed &= means_ok && gap1 > 5.0 && gap2 > 5.0 && resid_ok;
        parts.push(format!(
            "agent {i}: mean z {:.2}/{:.2}, Var ψG − Var ψ(G−G⁻) = {:.4} ({gap1:.1}σ), Var ψ(G−G⁻) − Var ψΔ = {:.4} ({gap2:.1}σ), decomposition residual {:.2e} ({:.2}σ)",
            r.max_mean_z_shared_difference,
            r.max_mean_z_shared_delta,
            r.shared_minus_difference.value,
            r.difference_minus_delta.value,
            d.residual,
            if d.residual_se > 0.0 { d.residual.abs() / d.residual_se } else { 0.0 },
        ));
    }
    Ok(Verdict::new(passed, parts.join("; ")))
}

/// The shipped instance: squared-reward scores, a sure 0.5 against a fair
/// coin, one competitor with a sure 0.5.
pub fn risk_instance(score: &dyn Fn(f64) -> f64, tau: f64) -> cfcredit::Result<oracle::RiskSensitivity> {
    oracle::risk_sensitivity_demo(
        score,
        &RewardDistribution::point_mass(0.5),
        &RewardDistribution::bernoulli(0.5),
        &[RewardDistribution::point_mass(0.5)],
        tau,
        0.0,
    )
}

fn risk_sensitivity() -> anyhow::Result<Verdict> {
    let square = |r: f64| r * r;
    let base = risk_instance(&square, 1.0)?;
    let constant = risk_instance(&|_| 0.4, 1.0)?;
    let taus = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0];
    let gaps: Vec<f64> = taus.iter().map(|&t| risk_instance(&square, t).map(|r| r.gap())).collect::<Result<_, _>>()?;
    let monotone = gaps.windows(2).all(|w| w[1] < w[0]);
    let passed = base.gap() > 1e-4 && constant.gap() < 1e-12 && monotone;
    Ok(Verdict::new(
        passed,
        format!(
            "|U_A − U_B| = {:.4} (> 1e-4), constant-score gap {:.1e}, τ sweep {:.2e} → {:.2e} monotone: {monotone}",
            base.gap(),
            constant.gap(),
            gaps[0],
            gaps[gaps.len() - 1]
        ),
    ))
}

fn shared_reward() -> anyhow::Result<Verdict> {
    const N: usize = 100_000;
    let report = oracle::shared_reward_counterexample()?;
    let fair = vec![(0.0, 0.5), (1.0, 0.5)];
    let laws_ok = report.identical_reward_laws && report.cases.iter().all(|c| c.reward_law == fair);
    let expected = [[-0.5, 0.5], [0.0, 0.0]];
    let exact_ok = report
        .cases
        .iter()
        .zip(expected)
        .all(|(c, e)| c.first_agent_marginals.iter().zip(e).all(|(a, b)| (a - b).abs() < 1e-15));
    let mech = collab_mechanism();
    let q = ReplacementPolicy::Uniform { vocab_size: 2 };
    let mut worst: f64 = 0.0;
    let mut means = Vec::new();
    for (case, targets) in expected.iter().enumerate() {
        let env = presets::preset(if case == 0 { "shared-reward-first" } else { "shared-reward-second" })?;
        let team: Vec<AgentPolicy> =
            (0..2).map(|i| AgentPolicy::new(i, Conditioning::Independent, 1, 2, 2)).collect();
        let mut rng = stream::derive(606, case as u64);
        let ctx = env.context(0);
        for (a, &target) in targets.iter().enumerate() {
            let xs = loo_samples(&env, &team, &mech, &q, &ctx, &[Proposal { agent: 0, token: a }], N, &mut rng)?;
            let (m, _, z) = z_score(&xs, target);
            worst = worst.max(z);
            means.push(format!("{m:+.4}"));
        }
    }
    Ok(Verdict::new(
        laws_ok && exact_ok && worst < 3.0,
        format!(
            "reward laws Bernoulli(1/2) and identical: {laws_ok}; exact first-agent credit [-0.5, 0.5] and [0, 0]: {exact_ok}; Monte Carlo means [{}] within {worst:.2}σ",
            means.join(", ")
        ),
    ))
}

/// Default-hyperparameter runs on `routing-basic` for the given estimator
/// and seeds, in parallel threads.
pub fn routing_runs(estimator: EstimatorKind, seeds: &[u64]) -> anyhow::Result<Vec<RunOutput>> {
    std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                s.spawn(move || {
                    let mut c = ExperimentConfig::new(EnvSource::Preset("routing-basic".into()), estimator);
                    c.seed = seed;
                    harness::run_experiment(c)
                })
            })
            .collect();
        handles.into_iter().map(|h| Ok(h.join().map_err(|_| anyhow::anyhow!("training thread panicked"))??)).collect()
    })
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn routing_training() -> anyhow::Result<Verdict> {
    let seeds = [0, 1, 2, 3, 4];
    let dr = routing_runs(EstimatorKind::Dr, &seeds)?;
    let wta = routing_runs(EstimatorKind::Wta, &seeds)?;
    let final_return = |runs: &[RunOutput]| runs.iter().map(|r| r.report.final_metrics.mean_return).collect::<Vec<_>>();
    let (dr_ret, wta_ret) = (final_return(&dr), final_return(&wta));
    let frozen: Vec<f64> = dr.iter().map(|r| r.report.frozen_return.unwrap_or(f64::NAN)).collect();
    let (m_dr, _) = mean_se(&dr_ret);
    let (m_wta, _) = mean_se(&wta_ret);
    let (m_frozen, _) = mean_se(&frozen);
    let paired: Vec<f64> = dr_ret.iter().zip(&wta_ret).map(|(a, b)| a - b).collect();
    let (gap, gap_se) = mean_se(&paired);
    let regret_wins = dr
        .iter()
        .zip(&wta)
        .filter(|(a, b)| a.report.final_metrics.regret <= b.report.final_metrics.regret)
        .count();
    let passed = m_dr > m_wta && m_wta > m_frozen && gap > gap_se && regret_wins >= 4;
    Ok(Verdict::new(
        passed,
        format!(
            "final return DR {m_dr:.4} > WTA {m_wta:.4} > frozen {m_frozen:.4}; DR − WTA = {gap:.4} (paired SE {gap_se:.4}); DR regret ≤ WTA on {regret_wins}/5 seeds"
        ),
    ))
}

fn grpo_mechanics() -> anyhow::Result<Verdict> {
    let cfg = OptimizerConfig { kl_beta: 0.0, ..OptimizerConfig::default() };
    let mut rng = stream::derive(808, 0);
    let (d, v) = (3, 4);
    let ctx = |id: usize| {
        let mut features = vec![0.0; d];
        features[id] = 1.0;
        Context { id, features }
    };
    let random_policy = |rng: &mut Stream| -> anyhow::Result<AgentPolicy> {
        let data = (0..d * v).map(|_| symmetric(rng, 1.0)).collect();
        Ok(AgentPolicy::new(0, Conditioning::Independent, d, 1, v).with_theta(Matrix::from_vec(d, v, data)?)?)
    };

    // constant signals
    let adv = optimizer::group_normalized_advantages(&[0.7; 4], cfg.norm_delta)?;
    let pol = random_policy(&mut rng)?;
    let snap = optimizer::capture_snapshot(&pol);
    let z0 = pol.input(&ctx(0), &[])?;
    let constant = GrpoGroup {
        context: ctx(0),
        samples: (0..4).map(|t| GrpoSample { z: z0.clone(), token: t % v, signal: 0.7 }).collect(),
    };
    let g = optimizer::grpo_gradient(&pol, &[constant], &snap, &snap, &cfg)?;
    let constant_ok = adv.iter().all(|a| *a == 0.0) && g.gradient.norm() == 0.0;

    // ratio one, no KL: equals REINFORCE on normalized advantages
    let mut groups = Vec::new();
    let mut batch = Vec::new();
    for c in 0..d {
        let z = pol.input(&ctx(c), &[])?;
        let samples: Vec<GrpoSample> = (0..6)
            .map(|_| GrpoSample { z: z.clone(), token: (stream::uniform(&mut rng) * v as f64) as usize, signal: stream::uniform(&mut rng) })
            .collect();
        let signals: Vec<f64> = samples.iter().map(|s| s.signal).collect();
        let adv = optimizer::group_normalized_advantages(&signals, cfg.norm_delta)?;
        batch.extend(samples.iter().zip(&adv).map(|(s, &a)| ScoredAction { z: s.z.clone(), token: s.token, signal: a }));
        groups.push(GrpoGroup { context: ctx(c), samples });
    }
    let g = optimizer::grpo_gradient(&pol, &groups, &snap, &snap, &cfg)?;
    let mut diff = optimizer::reinforce_gradient(&pol, &batch)?;
    diff.add_scaled(&g.gradient, -1.0);
    let max_diff = diff.as_slice().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let equivalence_ok = max_diff < 1e-9 && g.clipped_fraction == 0.0;

    // saturation: ρ = 1 + 2ε with a positive advantage
    let old = AgentPolicy::new(0, Conditioning::Independent, 1, 1, 2);
    let target = 0.5 * (1.0 + 2.0 * cfg.clip_eps);
    let logit = (target / (1.0 - target)).ln();
    let cur = old.clone().with_theta(Matrix::from_vec(1, 2, vec![logit, 0.0])?)?;
    let c0 = Context { id: 0, features: vec![1.0] };
    let z = cur.input(&c0, &[])?;
    let old_snap = optimizer::capture_snapshot(&old);
    let saturated = GrpoGroup {
        context: c0.clone(),
        samples: vec![GrpoSample { z: z.clone(), token: 0, signal: 1.0 }, GrpoSample { z: z.clone(), token: 1, signal: 0.0 }],
    };
    let rho = cur.action_probabilities(&z)?[0] / 0.5;
    let gs = optimizer::grpo_gradient(&cur, &[saturated], &old_snap, &old_snap, &cfg)?;
    let saturation_ok = (rho - (1.0 + 2.0 * cfg.clip_eps)).abs() < 1e-12 && gs.gradient.norm() == 0.0 && gs.clipped_fraction == 1.0;

    Ok(Verdict::new(
        constant_ok && equivalence_ok && saturation_ok,
        format!(
            "constant-signal advantages zero: {constant_ok}; ρ=1, β=0 vs REINFORCE max diff {max_diff:.1e} (tol 1e-9); saturated ρ = {rho:.3} gives zero gradient: {saturation_ok}"
        ),
    ))
}

/// Rendered `(metrics.csv, report.json)` bytes for a run.
pub fn rendered(run: &RunOutput) -> anyhow::Result<(Vec<u8>, String)> {
    Ok((output::render_metrics(&run.series)?, output::render_report(&run.report)?))
}

fn determinism_configs() -> Vec<ExperimentConfig> {
    let mut dr = ExperimentConfig::new(EnvSource::Preset("routing-multiturn".into()), EstimatorKind::Dr);
    dr.name = "dr-short".into();
    dr.n_updates = 20;
    dr.warmup_updates = 5;
    dr.eval_size = 60;
    dr.seed = 17;
    let mut loo = ExperimentConfig::new(EnvSource::Preset("collab-multiturn".into()), EstimatorKind::Loo);
    loo.name = "loo-short".into();
    loo.mechanism = MechanismConfig::TupleIdentity;
    loo.conditioning = Conditioning::Autoregressive;
    loo.optimizer = harness::OptimizerKind::Reinforce;
    loo.n_updates = 20;
    loo.warmup_updates = 0;
    loo.eval_size = 60;
    loo.seed = 17;
    vec![dr, loo]
}

fn determinism() -> anyhow::Result<Verdict> {
    let mut passed = true;
    let mut parts = Vec::new();
    for config in determinism_configs() {
        let first = rendered(&harness::run_experiment(config.clone())?)?;
        let second = rendered(&harness::run_experiment(config.clone())?)?;
        let threaded = std::thread::scope(|s| {
            let h = s.spawn(|| harness::run_experiment(config.clone()));
            h.join().map_err(|_| anyhow::anyhow!("thread panicked"))
        })??;
        let threaded = rendered(&threaded)?;
        let mut t = Trainer::new(config.clone())?;
        for _ in 0..config.n_updates / 2 {
            t.step()?;
        }
        let json = serde_json::to_string(&t.checkpoint())?;
        let state: TrainerState = serde_json::from_str(&json)?;
        let resumed = rendered(&Trainer::restore(state)?.run_to_end()?)?;
        let same = first == second && first == threaded && first == resumed;
        passed &= same;
        parts.push(format!("{}: repeat/thread/resume byte-identical: {same}", config.name));
    }
    Ok(Verdict::new(passed, parts.join("; ")))
}
