//! Single-loop training orchestration: each outer round broadcasts the
//! current policy, runs T federated critic rounds warm-started from the
//! previous round's weights, then takes one federated actor step. The
//! returned policy is drawn uniformly from the visited iterates.

use alloc::vec::Vec;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::actor::{
    feda_aggregate, local_policy_gradient, tabular_policy, ActionFeatures, FedAConfig,
    PolicyParams,
};
use crate::critic::{run_fedc, FeatureMap, FedCConfig};
use crate::error::CoreError;
use crate::mdp::TabularMdp;
use crate::oracles::{
    exact_avg_j, exact_policy_gradient, exact_td_fixed_point, Scope, TdSystem,
};
use crate::sampling::{derive_stream_seed, sample_minibatch, ChainCursor, ChainKind, StreamTag};
use crate::Result;

/// Wall-clock source for the per-round timing column. The core stays
/// timer-free; callers with an OS clock implement this, and [`NullClock`]
/// records zeros everywhere else.
pub trait Clock {
    /// Seconds since an arbitrary fixed origin.
    fn now_secs(&self) -> f64;
}

/// Clock that always reads zero.
pub struct NullClock;

impl Clock for NullClock {
    fn now_secs(&self) -> f64 {
        0.0
    }
}

/// Step-size schedule across outer rounds; rounds are indexed from zero.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    /// Round-independent α = a·√(N/K), β = b·√(N/K): more agents license
    /// larger steps, longer horizons require smaller ones.
    Constant { actor_coeff: f64, critic_coeff: f64 },
    /// α_k = α₀·decay^k, β_k = β₀·decay^k. `growing` negates the
    /// exponent so the sequence grows by 1/decay per round; that diverges
    /// over long runs, so leave it off unless replaying a configuration
    /// that explicitly calls for growth.
    Geometric {
        alpha0: f64,
        beta0: f64,
        decay: f64,
        growing: bool,
    },
}

/// Everything [`run_sfac`] needs beyond the environments and features. The
/// critic config's `beta` and the actor config's `alpha` act as defaults
/// that the schedule overrides each round.
#[derive(Debug, Clone, PartialEq)]
pub struct SfacConfig {
    /// Number of outer rounds K.
    pub outer_rounds: usize,
    /// Critic side: local update counts, rounds per outer round T,
    /// projection radius.
    pub fedc: FedCConfig,
    /// Actor side: minibatch size M.
    pub feda: FedAConfig,
    pub schedule: Schedule,
    /// Root seed; every sampling stream is derived from it.
    pub master_seed: u64,
    /// Record exact-oracle columns every this many rounds (the final round
    /// is always recorded); 0 disables them entirely.
    pub oracle_every: usize,
}

impl SfacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_rounds == 0 {
            return Err(CoreError::BadParameter {
                what: "outer round count",
                value: 0.0,
            });
        }
        self.fedc.validate()?;
        if self.fedc.rounds == 0 {
            return Err(CoreError::BadParameter {
                what: "critic rounds per outer round",
                value: 0.0,
            });
        }
        self.feda.validate()?;
        match &self.schedule {
            Schedule::Constant {
                actor_coeff,
                critic_coeff,
            } => {
                for (what, &v) in [
                    ("constant schedule actor coefficient", actor_coeff),
                    ("constant schedule critic coefficient", critic_coeff),
                ] {
                    if !(v > 0.0 && v.is_finite()) {
                        return Err(CoreError::BadParameter { what, value: v });
                    }
                }
            }
            Schedule::Geometric {
                alpha0,
                beta0,
                decay,
                ..
            } => {
                for (what, &v) in [
                    ("geometric schedule initial actor step", alpha0),
                    ("geometric schedule initial critic step", beta0),
                ] {
                    if !(v > 0.0 && v.is_finite()) {
                        return Err(CoreError::BadParameter { what, value: v });
                    }
                }
                if !(*decay > 0.0 && *decay <= 1.0) {
                    return Err(CoreError::BadParameter {
                        what: "geometric schedule decay (must lie in (0, 1])",
                        value: *decay,
                    });
                }
            }
        }
        Ok(())
    }

    fn n_agents(&self) -> usize {
        self.fedc.local_updates.len()
    }
}

/// Step sizes (α_k, β_k) for outer round k, counted from zero.
pub fn step_schedule(k: usize, config: &SfacConfig) -> (f64, f64) {
    match &config.schedule {
        Schedule::Constant {
            actor_coeff,
            critic_coeff,
        } => {
            let scale =
                libm::sqrt(config.n_agents() as f64 / config.outer_rounds as f64);
            (actor_coeff * scale, critic_coeff * scale)
        }
        Schedule::Geometric {
            alpha0,
            beta0,
            decay,
            growing,
        } => {
            let exponent = if *growing { -(k as f64) } else { k as f64 };
            let factor = libm::pow(*decay, exponent);
            (alpha0 * factor, beta0 * factor)
        }
    }
}

/// One row of the outer-round record. Oracle columns are present on rounds
/// where exact evaluation ran. All quantities describe the state after the
/// round's updates, except `critic_err_sq`, which compares the new critic
/// weights against the fixed point of the policy those weights were
/// trained to evaluate.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub k: usize,
    pub alpha_k: f64,
    pub beta_k: f64,
    pub j_avg_exact: Option<f64>,
    pub grad_norm_sq_exact: Option<f64>,
    pub critic_err_sq: Option<f64>,
    pub wall_secs: f64,
}

/// One row of the critic-side detail trace.
#[derive(Debug, Clone, PartialEq)]
pub struct FedcTraceRow {
    pub outer_k: usize,
    pub inner_t: usize,
    pub critic_err_sq: Option<f64>,
    pub grad_avg_norm: f64,
}

/// One row of the actor-side detail trace; `agent` is `None` on the row
/// holding the norm of the averaged gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct FedaTraceRow {
    pub outer_k: usize,
    pub agent: Option<usize>,
    pub grad_norm: f64,
}

/// Complete record of a training run: exactly one [`RoundRecord`] and one
/// policy iterate per outer round, the detail traces, and the uniformly
/// selected output index.
#[derive(Debug, Clone, PartialEq)]
pub struct RunHistory {
    pub rounds: Vec<RoundRecord>,
    /// θ after round k, for k = 0..K.
    pub thetas: Vec<PolicyParams>,
    pub fedc_trace: Vec<FedcTraceRow>,
    pub feda_trace: Vec<FedaTraceRow>,
    /// Index into `thetas` drawn by the selection stream.
    pub selected: usize,
    /// Critic weights after the final round.
    pub final_omega: DVector<f64>,
    /// Total environment transitions drawn across all chains.
    pub total_env_steps: u64,
}

/// Uniform draw from the recorded policy iterates.
///
/// The history always holds at least one iterate, so the draw cannot fail.
pub fn select_output<'a>(
    history: &'a [PolicyParams],
    rng: &mut ChaCha8Rng,
) -> (usize, &'a PolicyParams) {
    let k = rng.random_range(0..history.len());
    (k, &history[k])
}

/// Runs the full single-loop scheme for `config.outer_rounds` rounds from
/// the given initial parameters and returns the history together with the
/// selected output policy.
///
/// Chains persist across the whole run: each agent walks one critic
/// trajectory and one actor trajectory, re-steered as the policy moves,
/// and the critic weights carry over between outer rounds unchanged.
pub fn run_sfac<C: Clock>(
    envs: &[TabularMdp],
    critic_features: &FeatureMap,
    action_features: &ActionFeatures,
    theta_init: &PolicyParams,
    omega_init: &DVector<f64>,
    config: &SfacConfig,
    clock: &C,
) -> Result<(RunHistory, PolicyParams)> {
    config.validate()?;
    if envs.is_empty() {
        return Err(CoreError::EmptyInput {
            what: "environment list",
        });
    }
    if envs.len() != config.n_agents() {
        return Err(CoreError::DimensionMismatch {
            what: "environments vs configured agents",
            expected: config.n_agents(),
            got: envs.len(),
        });
    }
    let gamma = envs[0].discount();
    for env in envs {
        if env.discount() != gamma {
            return Err(CoreError::BadParameter {
                what: "per-agent discount (must be shared)",
                value: env.discount(),
            });
        }
        if env.n_states() != critic_features.n_states()
            || env.n_states() != action_features.n_states()
            || env.n_actions() != action_features.n_actions()
        {
            return Err(CoreError::DimensionMismatch {
                what: "environment vs feature dimensions",
                expected: env.n_states(),
                got: critic_features.n_states(),
            });
        }
    }
    if theta_init.dim() != action_features.dim() {
        return Err(CoreError::DimensionMismatch {
            what: "policy parameter dimension",
            expected: action_features.dim(),
            got: theta_init.dim(),
        });
    }
    if omega_init.len() != critic_features.dim() {
        return Err(CoreError::DimensionMismatch {
            what: "critic parameter dimension",
            expected: critic_features.dim(),
            got: omega_init.len(),
        });
    }

    let n = envs.len();
    let k_total = config.outer_rounds;
    let mut critic_cursors: Vec<ChainCursor> = (0..n)
        .map(|i| ChainCursor::new(config.master_seed, i, ChainKind::Critic, &envs[i]))
        .collect();
    let mut actor_cursors: Vec<ChainCursor> = (0..n)
        .map(|i| ChainCursor::new(config.master_seed, i, ChainKind::Actor, &envs[i]))
        .collect();

    let start = clock.now_secs();
    let mut theta = theta_init.clone();
    let mut omega = omega_init.clone();
    let mut history = RunHistory {
        rounds: Vec::with_capacity(k_total),
        thetas: Vec::with_capacity(k_total),
        fedc_trace: Vec::new(),
        feda_trace: Vec::new(),
        selected: 0,
        final_omega: omega.clone(),
        total_env_steps: 0,
    };

    for k in 0..k_total {
        let (alpha_k, beta_k) = step_schedule(k, config);
        let policy = tabular_policy(&theta, action_features)?;
        let oracle_round = config.oracle_every > 0
            && (k % config.oracle_every == 0 || k + 1 == k_total);

        let omega_star = if oracle_round {
            let system = TdSystem::build(envs, &policy, critic_features)?;
            Some(exact_td_fixed_point(&system, Scope::Global)?)
        } else {
            None
        };

        let mut fedc_config = config.fedc.clone();
        fedc_config.beta = beta_k;
        let (omega_next, fedc_rounds) = run_fedc(
            &policy,
            envs,
            &omega,
            &fedc_config,
            &mut critic_cursors,
            critic_features,
            omega_star.as_ref(),
        )?;
        omega = omega_next;
        for row in fedc_rounds {
            history.fedc_trace.push(FedcTraceRow {
                outer_k: k,
                inner_t: row.inner_t,
                critic_err_sq: row.critic_err_sq,
                grad_avg_norm: row.grad_avg_norm,
            });
        }

        let mut gradients = Vec::with_capacity(n);
        let mut mean_gradient = DVector::<f64>::zeros(action_features.dim());
        for (i, env) in envs.iter().enumerate() {
            let batch = sample_minibatch(&mut actor_cursors[i], env, &policy, config.feda.minibatch);
            let h_i = local_policy_gradient(
                &theta,
                &omega,
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
        theta = feda_aggregate(&theta, &gradients, alpha_k)?;

        if theta.theta.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::NonFinite {
                round: k,
                what: "policy parameters",
            });
        }
        if omega.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::NonFinite {
                round: k,
                what: "critic weights",
            });
        }

        let (j_avg_exact, grad_norm_sq_exact) = if oracle_round {
            let j = exact_avg_j(&theta, action_features, envs)?;
            let mut grad = DVector::<f64>::zeros(action_features.dim());
            for env in envs {
                grad += exact_policy_gradient(&theta, action_features, env)?;
            }
            grad /= n as f64;
            (Some(j), Some(grad.norm_squared()))
        } else {
            (None, None)
        };
        let critic_err_sq = omega_star.as_ref().map(|w| (&omega - w).norm_squared());

        history.rounds.push(RoundRecord {
            k,
            alpha_k,
            beta_k,
            j_avg_exact,
            grad_norm_sq_exact,
            critic_err_sq,
            wall_secs: clock.now_secs() - start,
        });
        history.thetas.push(theta.clone());
    }

    history.final_omega = omega;
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
