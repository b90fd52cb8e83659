//! Comparison algorithms under matched sample budgets. Both keep critics
//! local (no critic federation): the shared-actor baseline averages policy
//! gradients every step in the style of asynchronous advantage
//! actor-critic adapted to synchronous rounds, and the independent
//! baseline runs each agent fully on its own. Budgets are matched to the
//! federated run by round count, so comparisons are per environment
//! interaction.

use anyhow::{bail, Result};

use sfac_core::actor::{
    feda_aggregate, local_policy_gradient, tabular_policy, ActionFeatures, PolicyParams,
};
use sfac_core::critic::{project_ball, td_semi_gradient, FeatureMap};
use sfac_core::driver::{
    select_output, step_schedule, Clock, FedaTraceRow, FedcTraceRow, RoundRecord, RunHistory,
    SfacConfig,
};
use sfac_core::mdp::TabularMdp;
use sfac_core::na::DVector;
use sfac_core::oracles::{
    exact_avg_j, exact_j, exact_policy_gradient, exact_td_fixed_point, Scope, TdSystem,
};
use sfac_core::sampling::{
    derive_stream_seed, sample_minibatch, step_critic_chain, ChainCursor, ChainKind, StreamTag,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    /// Local critics, actor gradients averaged every round.
    SharedActor,
    /// No communication at all; each agent trains its own actor and
    /// critic. Recorded returns average the per-agent objectives, and the
    /// policy iterates stored for selection are the across-agent means,
    /// for reporting only.
    Independent,
}

/// Environment interactions one federated run consumes:
/// K·(T·Σ_i υ_i + N·M).
pub fn sfac_budget(config: &SfacConfig) -> u64 {
    let upsilon_sum: usize = config.fedc.local_updates.iter().sum();
    let n = config.fedc.local_updates.len();
    (config.outer_rounds * (config.fedc.rounds * upsilon_sum + n * config.feda.minibatch)) as u64
}

/// Baseline round count consuming the same interaction budget; each
/// baseline round costs N·(1 + M).
pub fn matched_rounds(config: &SfacConfig) -> usize {
    let n = config.fedc.local_updates.len();
    let per_round = (n * (1 + config.feda.minibatch)) as f64;
    let rounds = (sfac_budget(config) as f64 / per_round).round() as usize;
    rounds.max(1)
}

/// Derives the baseline's own loop configuration: same schedule family,
/// minibatch, and radius, with the horizon stretched to the matched round
/// count and exactly one local critic step per round.
pub fn baseline_config(config: &SfacConfig) -> SfacConfig {
    let n = config.fedc.local_updates.len();
    let mut derived = config.clone();
    derived.outer_rounds = matched_rounds(config);
    derived.fedc.rounds = 1;
    derived.fedc.local_updates = vec![1; n];
    derived.fedc.local_beta = None;
    derived
}

/// Runs the selected baseline for `config.outer_rounds` rounds. The config
/// is used as given (call [`baseline_config`] first to match a federated
/// budget); stream derivation matches the federated runner, so with N = 1,
/// T = 1, and one local update the shared-actor baseline replays the
/// federated run exactly.
#[allow(clippy::too_many_arguments)]
pub fn run_baseline<C: Clock>(
    kind: BaselineKind,
    envs: &[TabularMdp],
    critic_features: &FeatureMap,
    action_features: &ActionFeatures,
    theta_init: &PolicyParams,
    omega_init: &DVector<f64>,
    config: &SfacConfig,
    clock: &C,
) -> Result<(RunHistory, PolicyParams)> {
    config
        .validate()
        .map_err(|e| anyhow::anyhow!("invalid baseline config: {e}"))?;
    let n = envs.len();
    if n == 0 || n != config.fedc.local_updates.len() {
        bail!(
            "baseline needs one environment per configured agent ({} vs {})",
            n,
            config.fedc.local_updates.len()
        );
    }
    let gamma = envs[0].discount();
    let radius = config.fedc.radius;
    let k_total = config.outer_rounds;

    let mut critic_cursors: Vec<ChainCursor> = (0..n)
        .map(|i| ChainCursor::new(config.master_seed, i, ChainKind::Critic, &envs[i]))
        .collect();
    let mut actor_cursors: Vec<ChainCursor> = (0..n)
        .map(|i| ChainCursor::new(config.master_seed, i, ChainKind::Actor, &envs[i]))
        .collect();

    let mut omegas: Vec<DVector<f64>> = vec![omega_init.clone(); n];
    let mut thetas_local: Vec<PolicyParams> = vec![theta_init.clone(); n];
    let mut theta_shared = theta_init.clone();

    let start = clock.now_secs();
    let mut history = RunHistory {
        rounds: Vec::with_capacity(k_total),
        thetas: Vec::with_capacity(k_total),
        fedc_trace: Vec::new(),
        feda_trace: Vec::new(),
        selected: 0,
        final_omega: omega_init.clone(),
        total_env_steps: 0,
    };

    for k in 0..k_total {
        let (alpha_k, beta_k) = step_schedule(k, config);
        let oracle_round = config.oracle_every > 0
            && (k % config.oracle_every == 0 || k + 1 == k_total);

        // Exact critic targets for the policies about to be evaluated.
        let critic_targets: Option<Vec<DVector<f64>>> = if oracle_round {
            Some(match kind {
                BaselineKind::SharedActor => {
                    let policy = tabular_policy(&theta_shared, action_features)?;
                    let system = TdSystem::build(envs, &policy, critic_features)?;
                    let star = exact_td_fixed_point(&system, Scope::Global)?;
                    vec![star; n]
                }
                BaselineKind::Independent => {
                    let mut stars = Vec::with_capacity(n);
                    for i in 0..n {
                        let policy = tabular_policy(&thetas_local[i], action_features)?;
                        let system = TdSystem::build(
                            std::slice::from_ref(&envs[i]),
                            &policy,
                            critic_features,
                        )?;
                        stars.push(exact_td_fixed_point(&system, Scope::Global)?);
                    }
                    stars
                }
            })
        } else {
            None
        };

        // One local TD step per agent, projected locally.
        let mut td_mean = DVector::<f64>::zeros(critic_features.dim());
        for i in 0..n {
            let policy = match kind {
                BaselineKind::SharedActor => tabular_policy(&theta_shared, action_features)?,
                BaselineKind::Independent => tabular_policy(&thetas_local[i], action_features)?,
            };
            let obs = step_critic_chain(&mut critic_cursors[i], &envs[i], &policy);
            let g = td_semi_gradient(&omegas[i], &obs, critic_features, gamma);
            td_mean += &g;
            omegas[i] += g * beta_k;
            project_ball(&mut omegas[i], radius);
            if omegas[i].iter().any(|x| !x.is_finite()) {
                bail!("agent {i} critic weights became non-finite at round {k}");
            }
        }
        td_mean /= n as f64;
        let critic_err_sq = critic_targets.as_ref().map(|targets| {
            omegas
                .iter()
                .zip(targets)
                .map(|(w, star)| (w - star).norm_squared())
                .sum::<f64>()
                / n as f64
        });
        history.fedc_trace.push(FedcTraceRow {
            outer_k: k,
            inner_t: 0,
            critic_err_sq,
            grad_avg_norm: td_mean.norm(),
        });

        // Actor step: averaged across agents or fully local.
        let mut gradients = Vec::with_capacity(n);
        let mut mean_gradient = DVector::<f64>::zeros(action_features.dim());
        for i in 0..n {
            let theta_i = match kind {
                BaselineKind::SharedActor => &theta_shared,
                BaselineKind::Independent => &thetas_local[i],
            };
            let policy = tabular_policy(theta_i, action_features)?;
            let batch = sample_minibatch(
                &mut actor_cursors[i],
                &envs[i],
                &policy,
                config.feda.minibatch,
            );
            let h_i = local_policy_gradient(
                theta_i,
                &omegas[i],
                &batch,
                critic_features,
                action_features,
                gamma,
            )?;
            history.feda_trace.push(FedaTraceRow {
                outer_k: k,
                agent: Some(i),
                grad_norm: h_i.norm(),
            });
            mean_gradient += &h_i;
            gradients.push(h_i);
        }
        mean_gradient /= n as f64;
        history.feda_trace.push(FedaTraceRow {
            outer_k: k,
            agent: None,
            grad_norm: mean_gradient.norm(),
        });
        match kind {
            BaselineKind::SharedActor => {
                theta_shared = feda_aggregate(&theta_shared, &gradients, alpha_k)?;
                if theta_shared.theta.iter().any(|x| !x.is_finite()) {
                    bail!("policy parameters became non-finite at round {k}");
                }
            }
            BaselineKind::Independent => {
                for (i, h_i) in gradients.iter().enumerate() {
                    thetas_local[i].theta += h_i * alpha_k;
                    if thetas_local[i].theta.iter().any(|x| !x.is_finite()) {
                        bail!("agent {i} policy parameters became non-finite at round {k}");
                    }
                }
            }
        }

        // Record. The independent baseline reports the average of local
        // objectives and stores the mean policy for selection.
        let representative = match kind {
            BaselineKind::SharedActor => theta_shared.clone(),
            BaselineKind::Independent => {
                let mut mean = DVector::<f64>::zeros(action_features.dim());
                for t in &thetas_local {
                    mean += &t.theta;
                }
                PolicyParams {
                    theta: mean / n as f64,
                }
            }
        };
        let (j_avg_exact, grad_norm_sq_exact) = if oracle_round {
            match kind {
                BaselineKind::SharedActor => {
                    let j = exact_avg_j(&theta_shared, action_features, envs)?;
                    let mut grad = DVector::<f64>::zeros(action_features.dim());
                    for env in envs {
                        grad += exact_policy_gradient(&theta_shared, action_features, env)?;
                    }
                    grad /= n as f64;
                    (Some(j), Some(grad.norm_squared()))
                }
                BaselineKind::Independent => {
                    let mut j_sum = 0.0;
                    let mut grad_sq_sum = 0.0;
                    for i in 0..n {
                        j_sum += exact_j(&thetas_local[i], action_features, &envs[i])?;
                        grad_sq_sum +=
                            exact_policy_gradient(&thetas_local[i], action_features, &envs[i])?
                                .norm_squared();
                    }
                    (Some(j_sum / n as f64), Some(grad_sq_sum / n as f64))
                }
            }
        } else {
            (None, None)
        };

        history.rounds.push(RoundRecord {
            k,
            alpha_k,
            beta_k,
            j_avg_exact,
            grad_norm_sq_exact,
            critic_err_sq,
            wall_secs: clock.now_secs() - start,
        });
        history.thetas.push(representative);
    }

    let mut omega_mean = DVector::<f64>::zeros(critic_features.dim());
    for w in &omegas {
        omega_mean += w;
    }
    history.final_omega = omega_mean / n as f64;
    history.total_env_steps = critic_cursors
        .iter()
        .chain(&actor_cursors)
        .map(ChainCursor::steps)
        .sum();

    let mut selection_rng = ChaCha8Rng::seed_from_u64(derive_stream_seed(
        config.master_seed,
        0,
        StreamTag::Selection,
    ));
    let (selected, theta_hat) = select_output(&history.thetas, &mut selection_rng);
    history.selected = selected;
    let theta_hat = theta_hat.clone();
    Ok((history, theta_hat))
}
