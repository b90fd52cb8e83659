//! Federated TD(0) policy evaluation with linear features: per-agent local
//! update loops with heterogeneous step counts, and server aggregation that
//! averages normalized local directions and projects onto a weight ball.
//!
//! Local loops mutate private copies of the critic weights while the server
//! iterate only moves at aggregation time, so agents with many local steps
//! cannot drag the shared model unilaterally. Chains persist across rounds;
//! nothing is re-mixed between aggregations.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::CoreError;
use crate::mdp::{TabularMdp, TabularPolicy};
use crate::sampling::{derive_stream_seed, step_critic_chain, ChainCursor, Observation, StreamTag};
use crate::Result;

/// Minimum smallest singular value for a feature matrix to count as full
/// column rank.
pub const FEATURE_MIN_SINGULAR: f64 = 1e-8;

/// State feature matrix with rows φ(s)ᵀ, guaranteed full column rank and
/// row norms at most one.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    phi: DMatrix<f64>,
}

impl FeatureMap {
    /// Validates a feature matrix, rescaling it by the largest row norm
    /// when that norm exceeds one.
    pub fn new(mut phi: DMatrix<f64>) -> Result<Self> {
        if phi.nrows() == 0 || phi.ncols() == 0 {
            return Err(CoreError::EmptyInput {
                what: "feature matrix",
            });
        }
        if phi.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::NonFinite {
                round: 0,
                what: "feature matrix entry",
            });
        }
        let mut max_row_norm = 0.0f64;
        for s in 0..phi.nrows() {
            max_row_norm = max_row_norm.max(phi.row(s).norm());
        }
        if max_row_norm > 1.0 {
            phi /= max_row_norm;
        }
        let singular_values = phi.clone().svd(false, false).singular_values;
        let smallest = singular_values
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if phi.ncols() > phi.nrows() || smallest <= FEATURE_MIN_SINGULAR {
            let rank = singular_values
                .iter()
                .filter(|&&sv| sv > FEATURE_MIN_SINGULAR)
                .count();
            return Err(CoreError::RankDeficient {
                rank: rank.min(phi.nrows()),
                expected: phi.ncols(),
            });
        }
        Ok(Self { phi })
    }

    /// One-hot state features, Φ = I.
    pub fn tabular(n_states: usize) -> Self {
        Self {
            phi: DMatrix::identity(n_states, n_states),
        }
    }

    /// Random features with entries uniform in [-1, 1), drawn from the
    /// feature stream of `master_seed`, then normalized and rank-checked.
    pub fn random(n_states: usize, dim: usize, master_seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_stream_seed(
            master_seed,
            0,
            StreamTag::Features,
        ));
        let mut phi = DMatrix::<f64>::zeros(n_states, dim);
        for s in 0..n_states {
            for j in 0..dim {
                phi[(s, j)] = 2.0 * rng.random::<f64>() - 1.0;
            }
        }
        Self::new(phi)
    }

    pub fn n_states(&self) -> usize {
        self.phi.nrows()
    }

    /// Feature dimension d.
    pub fn dim(&self) -> usize {
        self.phi.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.phi
    }

    /// φ(s)ᵀ·ω without allocating.
    #[inline]
    pub fn value_of(&self, s: usize, omega: &DVector<f64>) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.phi.ncols() {
            acc += self.phi[(s, j)] * omega[j];
        }
        acc
    }

    /// out += coeff·φ(s).
    #[inline]
    pub fn add_scaled_row(&self, s: usize, coeff: f64, out: &mut DVector<f64>) {
        for j in 0..self.phi.ncols() {
            out[j] += coeff * self.phi[(s, j)];
        }
    }

    /// φ(s) as an owned column vector.
    pub fn feature(&self, s: usize) -> DVector<f64> {
        self.phi.row(s).transpose()
    }
}

/// Critic weights constrained to a ball of radius `radius`.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticModel {
    omega: DVector<f64>,
    radius: f64,
}

impl CriticModel {
    /// Zero weights of dimension `dim` inside radius `radius`.
    pub fn zeros(dim: usize, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(CoreError::BadParameter {
                what: "projection radius",
                value: radius,
            });
        }
        Ok(Self {
            omega: DVector::zeros(dim),
            radius,
        })
    }

    /// Wraps a weight vector, projecting it into the ball if necessary.
    pub fn from_vector(mut omega: DVector<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(CoreError::BadParameter {
                what: "projection radius",
                value: radius,
            });
        }
        project_ball(&mut omega, radius);
        Ok(Self { omega, radius })
    }

    pub fn omega(&self) -> &DVector<f64> {
        &self.omega
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// The modeled value φ(s)ᵀω.
    pub fn value_of(&self, s: usize, features: &FeatureMap) -> f64 {
        features.value_of(s, &self.omega)
    }
}

/// One round of federated evaluation: shared step size, per-agent local
/// update counts, total round count, and the projection radius.
#[derive(Debug, Clone, PartialEq)]
pub struct FedCConfig {
    /// Server and default local step size β.
    pub beta: f64,
    /// υ_i, the number of local TD steps agent i takes per round.
    pub local_updates: Vec<usize>,
    /// Number of aggregation rounds T.
    pub rounds: usize,
    /// Projection radius H.
    pub radius: f64,
    /// Optional per-agent local step sizes overriding `beta` inside local
    /// loops only; the server rule always uses `beta`.
    pub local_beta: Option<Vec<f64>>,
}

impl FedCConfig {
    /// Uniform local update counts and no per-agent step overrides.
    pub fn uniform(beta: f64, upsilon: usize, n_agents: usize, rounds: usize, radius: f64) -> Self {
        Self {
            beta,
            local_updates: alloc::vec![upsilon; n_agents],
            rounds,
            radius,
            local_beta: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(CoreError::BadParameter {
                what: "critic step size",
                value: self.beta,
            });
        }
        if self.local_updates.is_empty() {
            return Err(CoreError::EmptyInput {
                what: "local update counts",
            });
        }
        if let Some(&bad) = self.local_updates.iter().find(|&&u| u == 0) {
            return Err(CoreError::BadParameter {
                what: "local update count",
                value: bad as f64,
            });
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(CoreError::BadParameter {
                what: "projection radius",
                value: self.radius,
            });
        }
        if let Some(betas) = &self.local_beta {
            if betas.len() != self.local_updates.len() {
                return Err(CoreError::DimensionMismatch {
                    what: "per-agent step sizes",
                    expected: self.local_updates.len(),
                    got: betas.len(),
                });
            }
            if let Some(&bad) = betas.iter().find(|&&b| !(b > 0.0 && b.is_finite())) {
                return Err(CoreError::BadParameter {
                    what: "per-agent critic step size",
                    value: bad,
                });
            }
        }
        Ok(())
    }

    fn local_beta_for(&self, agent: usize) -> f64 {
        self.local_beta
            .as_ref()
            .map(|b| b[agent])
            .unwrap_or(self.beta)
    }
}

/// TD(0) semi-gradient ĝ = (r + γ·φ(s')ᵀω − φ(s)ᵀω)·φ(s).
pub fn td_semi_gradient(
    omega: &DVector<f64>,
    obs: &Observation,
    features: &FeatureMap,
    gamma: f64,
) -> DVector<f64> {
    let delta =
        obs.r + gamma * features.value_of(obs.s_next, omega) - features.value_of(obs.s, omega);
    let mut out = DVector::zeros(features.dim());
    features.add_scaled_row(obs.s, delta, &mut out);
    out
}

/// The matrix Â(O) = φ(s)·(γφ(s') − φ(s))ᵀ, the slope of ĝ in ω for a
/// fixed observation: ĝ(ω) = Â(O)·(ω − ω_ref) + ĝ(ω_ref) for any ω_ref.
pub fn td_coefficient_matrix(
    obs: &Observation,
    features: &FeatureMap,
    gamma: f64,
) -> DMatrix<f64> {
    let phi_s = features.feature(obs.s);
    let direction = features.feature(obs.s_next) * gamma - features.feature(obs.s);
    phi_s * direction.transpose()
}

/// Euclidean projection onto the ball of radius `radius`, in place.
pub fn project_ball(omega: &mut DVector<f64>, radius: f64) {
    let norm = omega.norm();
    if norm > radius {
        *omega *= radius / norm;
    }
}

/// Runs υ_i local TD steps from `omega_start` on the agent's critic chain
/// and returns the normalized direction d_i = (1/υ_i)·Σ_υ ĝ(ω_υ), where
/// ω_υ is the agent's private iterate after υ local updates (no projection
/// inside the loop; the server projects).
pub fn local_critic_loop(
    env: &TabularMdp,
    policy: &TabularPolicy,
    omega_start: &DVector<f64>,
    local_beta: f64,
    upsilon: usize,
    cursor: &mut ChainCursor,
    features: &FeatureMap,
) -> DVector<f64> {
    let gamma = env.discount();
    let mut local = omega_start.clone();
    let mut sum = DVector::<f64>::zeros(features.dim());
    for _ in 0..upsilon {
        let obs = step_critic_chain(cursor, env, policy);
        let delta = obs.r + gamma * features.value_of(obs.s_next, &local)
            - features.value_of(obs.s, &local);
        features.add_scaled_row(obs.s, delta, &mut sum);
        features.add_scaled_row(obs.s, local_beta * delta, &mut local);
    }
    sum / upsilon as f64
}

/// Server rule: ω ← Π_H(ω + β·ῡ·(1/N)·Σ_i d_i) with ῡ the mean local
/// update count. Reduction over agents is in ascending agent order.
pub fn fedc_aggregate(
    omega: &DVector<f64>,
    gradients: &[DVector<f64>],
    beta: f64,
    local_updates: &[usize],
    radius: f64,
) -> Result<DVector<f64>> {
    if gradients.is_empty() {
        return Err(CoreError::EmptyInput {
            what: "gradient list",
        });
    }
    if gradients.len() != local_updates.len() {
        return Err(CoreError::DimensionMismatch {
            what: "gradients vs local update counts",
            expected: local_updates.len(),
            got: gradients.len(),
        });
    }
    let n = gradients.len() as f64;
    let mut mean = DVector::<f64>::zeros(omega.len());
    for d_i in gradients {
        if d_i.len() != omega.len() {
            return Err(CoreError::DimensionMismatch {
                what: "gradient dimension",
                expected: omega.len(),
                got: d_i.len(),
            });
        }
        mean += d_i;
    }
    mean /= n;
    let upsilon_bar = local_updates.iter().sum::<usize>() as f64 / n;
    let mut next = omega + mean * (beta * upsilon_bar);
    project_ball(&mut next, radius);
    Ok(next)
}

/// One aggregation round of the federated critic trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FedcRound {
    /// Aggregation index t within the current outer round.
    pub inner_t: usize,
    /// ‖ω_t − ω*‖² when a fixed-point reference is attached.
    pub critic_err_sq: Option<f64>,
    /// ‖(1/N)·Σ_i d_i‖₂.
    pub grad_avg_norm: f64,
}

/// Runs T federated evaluation rounds, returning the final weights and the
/// per-round trace. Critic chains advance in place and persist across
/// calls, which is what lets an outer training loop warm-start evaluation.
/// `omega_star` attaches an exact fixed point for error tracking; without
/// it no per-round error is computed.
pub fn run_fedc(
    policy: &TabularPolicy,
    envs: &[TabularMdp],
    omega_init: &DVector<f64>,
    config: &FedCConfig,
    cursors: &mut [ChainCursor],
    features: &FeatureMap,
    omega_star: Option<&DVector<f64>>,
) -> Result<(DVector<f64>, Vec<FedcRound>)> {
    config.validate()?;
    if envs.is_empty() {
        return Err(CoreError::EmptyInput {
            what: "environment list",
        });
    }
    if envs.len() != config.local_updates.len() || envs.len() != cursors.len() {
        return Err(CoreError::DimensionMismatch {
            what: "agents vs cursors vs local update counts",
            expected: envs.len(),
            got: cursors.len().min(config.local_updates.len()),
        });
    }

    let mut omega = omega_init.clone();
    let mut trace = Vec::with_capacity(config.rounds);
    let mut gradients: Vec<DVector<f64>> = Vec::with_capacity(envs.len());
    for t in 0..config.rounds {
        gradients.clear();
        for (agent, (env, cursor)) in envs.iter().zip(cursors.iter_mut()).enumerate() {
            gradients.push(local_critic_loop(
                env,
                policy,
                &omega,
                config.local_beta_for(agent),
                config.local_updates[agent],
                cursor,
                features,
            ));
        }
        let mut mean = DVector::<f64>::zeros(omega.len());
        for d_i in &gradients {
            mean += d_i;
        }
        mean /= envs.len() as f64;
        omega = fedc_aggregate(
            &omega,
            &gradients,
            config.beta,
            &config.local_updates,
            config.radius,
        )?;
        if omega.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::NonFinite {
                round: t,
                what: "critic weights",
            });
        }
        trace.push(FedcRound {
            inner_t: t,
            critic_err_sq: omega_star.map(|star| (&omega - star).norm_squared()),
            grad_avg_norm: mean.norm(),
        });
    }
    Ok((omega, trace))
}
