//! Exact ground truth for everything the samplers estimate: TD fixed
//! points, expected TD gradients, exact returns and policy gradients,
//! heterogeneity and contraction constants, mixing diagnostics, and the
//! critic approximation error.
//!
//! All quantities come from dense solves and exhaustive summation over the
//! finite state-action space. Nothing here samples; these functions define
//! what the stochastic pipeline is supposed to converge to.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::actor::{score, tabular_policy, ActionFeatures, PolicyParams};
use crate::critic::FeatureMap;
use crate::error::CoreError;
use crate::mdp::{StateChain, TabularMdp, TabularPolicy, Visitation};
use crate::sampling::estimate_mixing;
use crate::Result;

/// Residual bound enforced after every fixed-point solve.
pub const FIXED_POINT_RESIDUAL_TOL: f64 = 1e-10;

/// Largest acceptable condition number for a TD system solve.
pub const MAX_CONDITION_NUMBER: f64 = 1e10;

/// Iteration budget for policy iteration; termination is guaranteed long
/// before this on desk-scale environments.
const POLICY_ITERATION_BUDGET: usize = 10_000;

/// Whose TD system to address.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Agent(usize),
    Global,
}

/// The linear systems behind TD evaluation: per agent i,
/// A_i = Φᵀ·D_i·(γP_i − I)·Φ and b_i = Φᵀ·D_i·R_i, where D_i is the
/// stationary distribution of agent i's chain under the evaluated policy,
/// plus their averages. The expected TD update at ω is g(ω) = A·ω + b and
/// the fixed point solves g(ω*) = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TdSystem {
    a_mats: Vec<DMatrix<f64>>,
    b_vecs: Vec<DVector<f64>>,
    a_global: DMatrix<f64>,
    b_global: DVector<f64>,
}

/// Assembles A = Φᵀ·D·(γP − I)·Φ and b = Φᵀ·D·R for one chain with known
/// stationary weights.
pub fn td_matrices(
    chain: &StateChain,
    stationary: &DVector<f64>,
    gamma: f64,
    features: &FeatureMap,
) -> (DMatrix<f64>, DVector<f64>) {
    let n = chain.n_states();
    let mut weighted = chain.transition() * gamma;
    for s in 0..n {
        weighted[(s, s)] -= 1.0;
        for s_next in 0..n {
            weighted[(s, s_next)] *= stationary[s];
        }
    }
    let phi = features.matrix();
    let a = phi.transpose() * weighted * phi;
    let b = phi.transpose() * stationary.component_mul(chain.reward());
    (a, b)
}

impl TdSystem {
    /// Builds the per-agent and averaged systems for a fixed policy. Every
    /// environment must share the discount; stationary distributions are
    /// computed here, so all induced chains must be ergodic.
    pub fn build(
        envs: &[TabularMdp],
        policy: &TabularPolicy,
        features: &FeatureMap,
    ) -> Result<Self> {
        if envs.is_empty() {
            return Err(CoreError::EmptyInput {
                what: "environment list",
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
        }
        let d = features.dim();
        let mut a_mats = Vec::with_capacity(envs.len());
        let mut b_vecs = Vec::with_capacity(envs.len());
        let mut a_global = DMatrix::<f64>::zeros(d, d);
        let mut b_global = DVector::<f64>::zeros(d);
        for env in envs {
            let chain = env.induce_state_chain(policy)?.with_stationary()?;
            let stationary = chain.stationary().expect("attached above").clone();
            let (a, b) = td_matrices(&chain, &stationary, gamma, features);
            a_global += &a;
            b_global += &b;
            a_mats.push(a);
            b_vecs.push(b);
        }
        a_global /= envs.len() as f64;
        b_global /= envs.len() as f64;
        Ok(Self {
            a_mats,
            b_vecs,
            a_global,
            b_global,
        })
    }

    /// Wraps precomputed per-agent matrices; the global system is their
    /// average.
    pub fn from_parts(a_mats: Vec<DMatrix<f64>>, b_vecs: Vec<DVector<f64>>) -> Result<Self> {
        if a_mats.is_empty() || a_mats.len() != b_vecs.len() {
            return Err(CoreError::DimensionMismatch {
                what: "TD system parts",
                expected: a_mats.len(),
                got: b_vecs.len(),
            });
        }
        let d = a_mats[0].nrows();
        for (a, b) in a_mats.iter().zip(&b_vecs) {
            if a.nrows() != d || a.ncols() != d || b.len() != d {
                return Err(CoreError::DimensionMismatch {
                    what: "TD system block dimension",
                    expected: d,
                    got: a.nrows().max(a.ncols()).max(b.len()),
                });
            }
        }
        let n = a_mats.len() as f64;
        let mut a_global = DMatrix::<f64>::zeros(d, d);
        let mut b_global = DVector::<f64>::zeros(d);
        for (a, b) in a_mats.iter().zip(&b_vecs) {
            a_global += a;
            b_global += b;
        }
        a_global /= n;
        b_global /= n;
        Ok(Self {
            a_mats,
            b_vecs,
            a_global,
            b_global,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.a_mats.len()
    }

    pub fn dim(&self) -> usize {
        self.a_global.nrows()
    }

    pub fn a(&self, scope: Scope) -> &DMatrix<f64> {
        match scope {
            Scope::Agent(i) => &self.a_mats[i],
            Scope::Global => &self.a_global,
        }
    }

    pub fn b(&self, scope: Scope) -> &DVector<f64> {
        match scope {
            Scope::Agent(i) => &self.b_vecs[i],
            Scope::Global => &self.b_global,
        }
    }
}

/// Solves A·ω = −b for the selected scope, rejecting ill-conditioned
/// systems and verifying the residual ‖Aω* + b‖∞ ≤ 1e-10.
pub fn exact_td_fixed_point(system: &TdSystem, scope: Scope) -> Result<DVector<f64>> {
    let a = system.a(scope);
    let b = system.b(scope);
    let agent = match scope {
        Scope::Agent(i) => Some(i),
        Scope::Global => None,
    };
    let singular_values = a.clone().svd(false, false).singular_values;
    let s_max = singular_values.iter().copied().fold(0.0f64, f64::max);
    let s_min = singular_values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let condition = s_max / s_min;
    if !condition.is_finite() || condition > MAX_CONDITION_NUMBER {
        return Err(CoreError::IllConditioned {
            what: "TD fixed-point system",
            measure: condition,
            agent,
        });
    }
    let omega = a.clone().lu().solve(&(-b)).ok_or(CoreError::IllConditioned {
        what: "TD fixed-point solve",
        measure: condition,
        agent,
    })?;
    let residual = (a * &omega + b).amax();
    if residual > FIXED_POINT_RESIDUAL_TOL {
        return Err(CoreError::IllConditioned {
            what: "TD fixed-point residual",
            measure: residual,
            agent,
        });
    }
    Ok(omega)
}

/// Expected TD update direction g(ω) = A·ω + b for the selected scope.
pub fn exact_expected_td_gradient(
    omega: &DVector<f64>,
    system: &TdSystem,
    scope: Scope,
) -> DVector<f64> {
    system.a(scope) * omega + system.b(scope)
}

/// Exact state-action values Q(s,a) = r̄(s,a) + γ·Σ_s' P(s'|s,a)·V(s').
pub fn exact_q_values(env: &TabularMdp, policy: &TabularPolicy) -> Result<DMatrix<f64>> {
    let chain = env.induce_state_chain(policy)?;
    let v = chain.exact_value(env.discount())?;
    let gamma = env.discount();
    let mut q = DMatrix::<f64>::zeros(env.n_states(), env.n_actions());
    for s in 0..env.n_states() {
        for a in 0..env.n_actions() {
            let mut acc = env.expected_reward(s, a);
            for s_next in 0..env.n_states() {
                acc += gamma * env.transition_prob(s, a, s_next) * v[s_next];
            }
            q[(s, a)] = acc;
        }
    }
    Ok(q)
}

/// Exact advantages A(s,a) = Q(s,a) − V(s).
pub fn exact_advantage(env: &TabularMdp, policy: &TabularPolicy) -> Result<DMatrix<f64>> {
    let chain = env.induce_state_chain(policy)?;
    let v = chain.exact_value(env.discount())?;
    let mut adv = exact_q_values(env, policy)?;
    for s in 0..env.n_states() {
        for a in 0..env.n_actions() {
            adv[(s, a)] -= v[s];
        }
    }
    Ok(adv)
}

/// Exact return J = (1−γ)·Σ_s b(s)·V_π(s) of the policy induced by θ.
pub fn exact_j(
    theta: &PolicyParams,
    action_features: &ActionFeatures,
    env: &TabularMdp,
) -> Result<f64> {
    let policy = tabular_policy(theta, action_features)?;
    let chain = env.induce_state_chain(&policy)?;
    let v = chain.exact_value(env.discount())?;
    Ok((1.0 - env.discount()) * env.initial_dist().dot(&v))
}

/// Average exact return over a family of environments.
pub fn exact_avg_j(
    theta: &PolicyParams,
    action_features: &ActionFeatures,
    envs: &[TabularMdp],
) -> Result<f64> {
    if envs.is_empty() {
        return Err(CoreError::EmptyInput {
            what: "environment list",
        });
    }
    let mut acc = 0.0;
    for env in envs {
        acc += exact_j(theta, action_features, env)?;
    }
    Ok(acc / envs.len() as f64)
}

/// Exact policy gradient ∇J = Σ_{s,a} ν(s,a)·Q(s,a)·ψ(s,a), with ν the
/// normalized discounted visitation measure. With J carrying its (1−γ)
/// normalization, no additional factor appears; the finite-difference tests
/// pin this down.
pub fn exact_policy_gradient(
    theta: &PolicyParams,
    action_features: &ActionFeatures,
    env: &TabularMdp,
) -> Result<DVector<f64>> {
    let policy = tabular_policy(theta, action_features)?;
    let nu = env.discounted_visitation(&policy, Visitation::StateActions)?;
    let q = exact_q_values(env, &policy)?;
    let mut grad = DVector::<f64>::zeros(action_features.dim());
    for s in 0..env.n_states() {
        for a in 0..env.n_actions() {
            let weight = nu[s * env.n_actions() + a] * q[(s, a)];
            if weight == 0.0 {
                continue;
            }
            grad += score(theta, action_features, s, a) * weight;
        }
    }
    Ok(grad)
}

/// The same gradient with advantages in place of Q values; equal to
/// [`exact_policy_gradient`] because the score averages to zero per state.
pub fn exact_policy_gradient_advantage_form(
    theta: &PolicyParams,
    action_features: &ActionFeatures,
    env: &TabularMdp,
) -> Result<DVector<f64>> {
    let policy = tabular_policy(theta, action_features)?;
    let nu = env.discounted_visitation(&policy, Visitation::StateActions)?;
    let adv = exact_advantage(env, &policy)?;
    let mut grad = DVector::<f64>::zeros(action_features.dim());
    for s in 0..env.n_states() {
        for a in 0..env.n_actions() {
            let weight = nu[s * env.n_actions() + a] * adv[(s, a)];
            if weight == 0.0 {
                continue;
            }
            grad += score(theta, action_features, s, a) * weight;
        }
    }
    Ok(grad)
}

/// Exact expectation of the minibatch policy-gradient estimator under the
/// stationary law of the actor chain: (s,a) is weighted by the discounted
/// visitation, the reward inside δ averages over the environment kernel,
/// and the successor value averages over the restart kernel
/// γ·P + (1−γ)·b, matching what the sampler actually records.
pub fn exact_minibatch_expectation(
    theta: &PolicyParams,
    omega: &DVector<f64>,
    critic_features: &FeatureMap,
    action_features: &ActionFeatures,
    env: &TabularMdp,
) -> Result<DVector<f64>> {
    let policy = tabular_policy(theta, action_features)?;
    let nu = env.discounted_visitation(&policy, Visitation::StateActions)?;
    let gamma = env.discount();
    let mut restart_value = 0.0;
    for s in 0..env.n_states() {
        restart_value += env.initial_dist()[s] * critic_features.value_of(s, omega);
    }
    let mut grad = DVector::<f64>::zeros(action_features.dim());
    for s in 0..env.n_states() {
        for a in 0..env.n_actions() {
            let weight = nu[s * env.n_actions() + a];
            if weight == 0.0 {
                continue;
            }
            let mut successor_value = 0.0;
            for s_next in 0..env.n_states() {
                successor_value +=
                    env.transition_prob(s, a, s_next) * critic_features.value_of(s_next, omega);
            }
            let expected_next = gamma * successor_value + (1.0 - gamma) * restart_value;
            let expected_delta = env.expected_reward(s, a) + gamma * expected_next
                - critic_features.value_of(s, omega);
            grad += score(theta, action_features, s, a) * (weight * expected_delta);
        }
    }
    Ok(grad)
}

/// Fits the smallest constants (χ², κ²) with
/// Σ_i p_i·‖g_i(ω)‖² ≤ χ²·‖g(ω)‖² + κ² across the probe points, subject
/// to χ² ≥ 1 and κ² ≥ 0. These are probe-grid estimates, not certificates.
/// `weights` defaults to uniform 1/N.
pub fn estimate_heterogeneity(
    system: &TdSystem,
    probes: &[DVector<f64>],
    weights: Option<&[f64]>,
) -> Result<(f64, f64)> {
    if probes.is_empty() {
        return Err(CoreError::EmptyInput { what: "probe grid" });
    }
    let n = system.n_agents();
    let uniform = vec![1.0 / n as f64; n];
    let p = match weights {
        Some(w) => {
            if w.len() != n {
                return Err(CoreError::DimensionMismatch {
                    what: "agent weights",
                    expected: n,
                    got: w.len(),
                });
            }
            let sum: f64 = w.iter().sum();
            if w.iter().any(|&x| x < 0.0) || libm::fabs(sum - 1.0) > 1e-12 {
                return Err(CoreError::NotStochastic {
                    what: "agent weights",
                    index: 0,
                    sum,
                });
            }
            w.to_vec()
        }
        None => uniform,
    };

    let mut local_sq = Vec::with_capacity(probes.len());
    let mut global_sq = Vec::with_capacity(probes.len());
    for omega in probes {
        let mut l = 0.0;
        for (i, &pi) in p.iter().enumerate() {
            l += pi * exact_expected_td_gradient(omega, system, Scope::Agent(i)).norm_squared();
        }
        local_sq.push(l);
        global_sq.push(exact_expected_td_gradient(omega, system, Scope::Global).norm_squared());
    }

    // Least-squares fit of L ≈ χ²·G + κ², then clamp to the constraint
    // region and push κ² up until no probe point is violated.
    let m = probes.len() as f64;
    let (mut sg, mut sl, mut sgg, mut sgl) = (0.0, 0.0, 0.0, 0.0);
    for (&g, &l) in global_sq.iter().zip(&local_sq) {
        sg += g;
        sl += l;
        sgg += g * g;
        sgl += g * l;
    }
    let denom = m * sgg - sg * sg;
    let (mut chi_sq, mut kappa_sq) = if denom.abs() > 1e-300 {
        let slope = (m * sgl - sg * sl) / denom;
        let intercept = (sl - slope * sg) / m;
        (slope, intercept)
    } else if sgg > 0.0 {
        (sgl / sgg, 0.0)
    } else {
        (1.0, sl / m)
    };
    if chi_sq < 1.0 {
        chi_sq = 1.0;
        kappa_sq = (sl - sg) / m;
    }
    kappa_sq = kappa_sq.max(0.0);
    let mut violation = 0.0f64;
    for (&g, &l) in global_sq.iter().zip(&local_sq) {
        violation = violation.max(l - chi_sq * g - kappa_sq);
    }
    kappa_sq += violation.max(0.0);
    Ok((chi_sq, kappa_sq))
}

/// A deterministic probe grid inside the radius-H ball: the origin, the
/// scaled coordinate directions, and seeded random interior points.
pub fn heterogeneity_probe(dim: usize, radius: f64, n_random: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut probes = Vec::with_capacity(2 * dim + n_random + 1);
    probes.push(DVector::zeros(dim));
    for j in 0..dim {
        let mut up = DVector::zeros(dim);
        up[j] = 0.5 * radius;
        probes.push(up.clone());
        probes.push(-up);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = radius / libm::sqrt(dim as f64);
    for _ in 0..n_random {
        probes.push(DVector::from_fn(dim, |_, _| {
            scale * (2.0 * rng.random::<f64>() - 1.0)
        }));
    }
    probes
}

/// Contraction constant λ = 2·λ_min(−(A + Aᵀ)/2) of the global system.
/// Positive exactly when the expected update is a contraction toward ω*.
pub fn estimate_lambda(system: &TdSystem) -> Result<f64> {
    let a = system.a(Scope::Global);
    let sym = -(a + a.transpose()) / 2.0;
    let eigenvalues = sym.clone().symmetric_eigen().eigenvalues;
    let min_eig = eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let lambda = 2.0 * min_eig;
    if lambda.is_nan() || lambda <= 0.0 {
        return Err(CoreError::NotContractive {
            min_eigenvalue: min_eig,
        });
    }
    Ok(lambda)
}

/// Worst-case critic approximation error over the probe policies:
/// max over agents and probes of Σ_s ν_θ(s)·(V_π(s) − φ(s)ᵀω_θ^{i*})²,
/// where ω_θ^{i*} is agent i's own TD fixed point for that policy.
pub fn estimate_xi_critic(
    envs: &[TabularMdp],
    features: &FeatureMap,
    theta_probes: &[PolicyParams],
    action_features: &ActionFeatures,
) -> Result<f64> {
    if theta_probes.is_empty() {
        return Err(CoreError::EmptyInput {
            what: "policy probe list",
        });
    }
    let mut worst = 0.0f64;
    for theta in theta_probes {
        let policy = tabular_policy(theta, action_features)?;
        let system = TdSystem::build(envs, &policy, features)?;
        for (i, env) in envs.iter().enumerate() {
            let omega_star = exact_td_fixed_point(&system, Scope::Agent(i))?;
            let chain = env.induce_state_chain(&policy)?;
            let v = chain.exact_value(env.discount())?;
            let nu = env.discounted_visitation(&policy, Visitation::States)?;
            let mut err = 0.0;
            for s in 0..env.n_states() {
                let gap = v[s] - features.value_of(s, &omega_star);
                err += nu[s] * gap * gap;
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Exact policy iteration: alternates exact evaluation with greedy
/// improvement (ties to the lowest action index) until the policy is
/// stable. Returns the optimal deterministic policy and its value vector.
pub fn policy_iteration(env: &TabularMdp) -> Result<(TabularPolicy, DVector<f64>)> {
    let n_states = env.n_states();
    let n_actions = env.n_actions();
    let gamma = env.discount();
    let greedy_against = |v: &DVector<f64>| -> Vec<usize> {
        (0..n_states)
            .map(|s| {
                let mut best_a = 0;
                let mut best_q = f64::NEG_INFINITY;
                for a in 0..n_actions {
                    let mut q = env.expected_reward(s, a);
                    for s_next in 0..n_states {
                        q += gamma * env.transition_prob(s, a, s_next) * v[s_next];
                    }
                    if q > best_q {
                        best_q = q;
                        best_a = a;
                    }
                }
                best_a
            })
            .collect()
    };

    let mut choices = greedy_against(&DVector::zeros(n_states));
    for _ in 0..POLICY_ITERATION_BUDGET {
        let policy = TabularPolicy::deterministic(&choices, n_actions)?;
        let v = env.induce_state_chain(&policy)?.exact_value(gamma)?;
        let improved = greedy_against(&v);
        if improved == choices {
            return Ok((policy, v));
        }
        choices = improved;
    }
    Err(CoreError::IllConditioned {
        what: "policy iteration did not stabilize",
        measure: POLICY_ITERATION_BUDGET as f64,
        agent: None,
    })
}

/// Best average return attainable by optimizing each environment
/// separately: (1/N)·Σ_i max_π J_i(π). An upper bound on what any single
/// shared policy can average, which makes suboptimality gaps conservative.
pub fn best_average_return(envs: &[TabularMdp]) -> Result<f64> {
    if envs.is_empty() {
        return Err(CoreError::EmptyInput {
            what: "environment list",
        });
    }
    let mut acc = 0.0;
    for env in envs {
        let (_, v) = policy_iteration(env)?;
        acc += (1.0 - env.discount()) * env.initial_dist().dot(&v);
    }
    Ok(acc / envs.len() as f64)
}

/// Measured analogues of the analysis constants for one family and policy.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticConstants {
    /// Contraction constant of the global TD system.
    pub lambda: f64,
    /// Gradient-heterogeneity slope, at least 1.
    pub chi_sq: f64,
    /// Gradient-heterogeneity floor, 0 for identical agents.
    pub kappa_sq: f64,
    /// Worst-agent total-variation decay envelope TV(t) ≤ eta·rho^t.
    pub eta: f64,
    pub rho: f64,
    /// Worst-agent mixing time at the requested tolerance.
    pub tau: usize,
    /// Semi-gradient slope bound 1 + γ.
    pub c: f64,
    /// Semi-gradient magnitude bound c·H + R_max.
    pub q: f64,
    /// Worst-case value approximation error over the probe policies.
    pub xi_critic: f64,
}

/// Computes every diagnostic constant for a family at one policy: the TD
/// system is built at θ, heterogeneity is fitted on `omega_probes`, mixing
/// is the worst case over agents at `mixing_tol`, and ξ uses θ itself as
/// the policy probe.
pub fn compute_diagnostics(
    envs: &[TabularMdp],
    features: &FeatureMap,
    action_features: &ActionFeatures,
    theta: &PolicyParams,
    radius: f64,
    omega_probes: &[DVector<f64>],
    mixing_tol: f64,
) -> Result<DiagnosticConstants> {
    let policy = tabular_policy(theta, action_features)?;
    let system = TdSystem::build(envs, &policy, features)?;
    let lambda = estimate_lambda(&system)?;
    let (chi_sq, kappa_sq) = estimate_heterogeneity(&system, omega_probes, None)?;

    let mut eta = 0.0f64;
    let mut rho = 0.0f64;
    let mut tau = 0usize;
    for env in envs {
        let chain = env.induce_state_chain(&policy)?;
        let mixing = estimate_mixing(&chain, mixing_tol)?;
        eta = eta.max(mixing.eta);
        rho = rho.max(mixing.rho);
        tau = tau.max(mixing.tau);
    }

    let gamma = envs[0].discount();
    let r_max = envs
        .iter()
        .map(|e| e.reward_bound())
        .fold(0.0f64, f64::max);
    let c = 1.0 + gamma;
    let q = c * radius + r_max;
    let xi_critic = estimate_xi_critic(envs, features, core::slice::from_ref(theta), action_features)?;

    Ok(DiagnosticConstants {
        lambda,
        chi_sq,
        kappa_sq,
        eta,
        rho,
        tau,
        c,
        q,
        xi_critic,
    })
}
