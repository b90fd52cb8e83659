//! Linear softmax policies, score functions, TD-error advantage estimates,
//! minibatch policy gradients, and the actor-side server aggregation.
//!
//! The server broadcasts one shared θ, each agent estimates a policy
//! gradient from its own actor chain, and the server applies the averaged
//! step. Because every agent starts from the same broadcast θ, averaging
//! post-update local policies and averaging gradients are the same affine
//! map, which the tests pin down.

use nalgebra::{DMatrix, DVector};

use crate::critic::FeatureMap;
use crate::error::CoreError;
use crate::mdp::TabularPolicy;
use crate::sampling::Observation;
use crate::Result;

/// State-action features x(s,a) for the policy, one row per (s,a) pair in
/// row-major order, with row norms at most one.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionFeatures {
    x: DMatrix<f64>,
    n_states: usize,
    n_actions: usize,
}

impl ActionFeatures {
    /// Validates a feature matrix of shape (n_states·n_actions) × d,
    /// rescaling by the largest row norm when it exceeds one.
    pub fn new(mut x: DMatrix<f64>, n_states: usize, n_actions: usize) -> Result<Self> {
        if x.nrows() != n_states * n_actions {
            return Err(CoreError::DimensionMismatch {
                what: "action feature rows",
                expected: n_states * n_actions,
                got: x.nrows(),
            });
        }
        if x.ncols() == 0 {
            return Err(CoreError::EmptyInput {
                what: "action feature columns",
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite {
                round: 0,
                what: "action feature entry",
            });
        }
        let mut max_row_norm = 0.0f64;
        for row in 0..x.nrows() {
            max_row_norm = max_row_norm.max(x.row(row).norm());
        }
        if max_row_norm > 1.0 {
            x /= max_row_norm;
        }
        Ok(Self {
            x,
            n_states,
            n_actions,
        })
    }

    /// One-hot state-action features: x(s,a) = e_{s·A+a}, dimension S·A.
    pub fn one_hot(n_states: usize, n_actions: usize) -> Self {
        let d = n_states * n_actions;
        Self {
            x: DMatrix::identity(d, d),
            n_states,
            n_actions,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Policy parameter dimension d_θ.
    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    #[inline]
    fn row(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    /// θᵀx(s,a) without allocating.
    #[inline]
    pub fn logit(&self, s: usize, a: usize, theta: &DVector<f64>) -> f64 {
        let row = self.row(s, a);
        let mut acc = 0.0;
        for j in 0..self.x.ncols() {
            acc += self.x[(row, j)] * theta[j];
        }
        acc
    }

    /// out += coeff·x(s,a).
    #[inline]
    pub fn add_scaled_row(&self, s: usize, a: usize, coeff: f64, out: &mut DVector<f64>) {
        let row = self.row(s, a);
        for j in 0..self.x.ncols() {
            out[j] += coeff * self.x[(row, j)];
        }
    }

    /// x(s,a) as an owned column vector.
    pub fn feature(&self, s: usize, a: usize) -> DVector<f64> {
        self.x.row(self.row(s, a)).transpose()
    }
}

/// Policy weight vector for the linear softmax parameterization.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub theta: DVector<f64>,
}

impl PolicyParams {
    /// All-zero weights, which induce the uniform policy.
    pub fn zeros(dim: usize) -> Self {
        Self {
            theta: DVector::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }
}

/// Actor-side configuration: step size and minibatch length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FedAConfig {
    /// Policy step size α.
    pub alpha: f64,
    /// Observations per local gradient estimate M.
    pub minibatch: usize,
}

impl FedAConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(CoreError::BadParameter {
                what: "actor step size",
                value: self.alpha,
            });
        }
        if self.minibatch == 0 {
            return Err(CoreError::BadParameter {
                what: "minibatch size",
                value: 0.0,
            });
        }
        Ok(())
    }
}

/// Softmax action distribution π_θ(·|s) ∝ exp(θᵀx(s,·)), computed with
/// max-subtraction so large logits cannot overflow.
pub fn policy_probs(
    theta: &PolicyParams,
    features: &ActionFeatures,
    s: usize,
) -> DVector<f64> {
    let n_actions = features.n_actions();
    let mut logits = DVector::<f64>::zeros(n_actions);
    let mut max_logit = f64::NEG_INFINITY;
    for a in 0..n_actions {
        let l = features.logit(s, a, &theta.theta);
        logits[a] = l;
        max_logit = max_logit.max(l);
    }
    let mut sum = 0.0;
    for a in 0..n_actions {
        let e = libm::exp(logits[a] - max_logit);
        logits[a] = e;
        sum += e;
    }
    logits / sum
}

/// The full tabular policy induced by θ, rows π_θ(·|s) for every state.
pub fn tabular_policy(theta: &PolicyParams, features: &ActionFeatures) -> Result<TabularPolicy> {
    let mut probs = DMatrix::<f64>::zeros(features.n_states(), features.n_actions());
    for s in 0..features.n_states() {
        let row = policy_probs(theta, features, s);
        for a in 0..features.n_actions() {
            probs[(s, a)] = row[a];
        }
    }
    TabularPolicy::new(probs)
}

/// Score function ψ_θ(s,a) = ∇_θ log π_θ(a|s) = x(s,a) − Σ_b π_θ(b|s)·x(s,b).
pub fn score(theta: &PolicyParams, features: &ActionFeatures, s: usize, a: usize) -> DVector<f64> {
    let probs = policy_probs(theta, features, s);
    let mut psi = DVector::<f64>::zeros(features.dim());
    features.add_scaled_row(s, a, 1.0, &mut psi);
    for b in 0..features.n_actions() {
        features.add_scaled_row(s, b, -probs[b], &mut psi);
    }
    psi
}

/// TD error δ = r + γ·φ(s')ᵀω − φ(s)ᵀω, the advantage estimate the actor
/// consumes.
pub fn td_error(omega: &DVector<f64>, obs: &Observation, features: &FeatureMap, gamma: f64) -> f64 {
    obs.r + gamma * features.value_of(obs.s_next, omega) - features.value_of(obs.s, omega)
}

/// Minibatch policy-gradient estimate ĥ = (1/M)·Σ_m δ_m·ψ_θ(s_m, a_m).
pub fn local_policy_gradient(
    theta: &PolicyParams,
    omega: &DVector<f64>,
    batch: &[Observation],
    critic_features: &FeatureMap,
    action_features: &ActionFeatures,
    gamma: f64,
) -> Result<DVector<f64>> {
    if batch.is_empty() {
        return Err(CoreError::EmptyInput { what: "minibatch" });
    }
    let mut acc = DVector::<f64>::zeros(action_features.dim());
    for obs in batch {
        let delta = td_error(omega, obs, critic_features, gamma);
        let psi = score(theta, action_features, obs.s, obs.a);
        acc += psi * delta;
    }
    Ok(acc / batch.len() as f64)
}

/// Server rule: θ ← θ + α·(1/N)·Σ_i ĥ_i, reducing in ascending agent
/// order.
pub fn feda_aggregate(
    theta: &PolicyParams,
    gradients: &[DVector<f64>],
    alpha: f64,
) -> Result<PolicyParams> {
    if gradients.is_empty() {
        return Err(CoreError::EmptyInput {
            what: "gradient list",
        });
    }
    let mut mean = DVector::<f64>::zeros(theta.dim());
    for h_i in gradients {
        if h_i.len() != theta.dim() {
            return Err(CoreError::DimensionMismatch {
                what: "policy gradient dimension",
                expected: theta.dim(),
                got: h_i.len(),
            });
        }
        mean += h_i;
    }
    mean /= gradients.len() as f64;
    Ok(PolicyParams {
        theta: &theta.theta + mean * alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_theta(seed: u64, dim: usize) -> PolicyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PolicyParams {
            theta: DVector::from_fn(dim, |_, _| 2.0 * rng.random::<f64>() - 1.0),
        }
    }

    #[test]
    fn zero_weights_give_uniform_policy() {
        let feats = ActionFeatures::one_hot(3, 4);
        let theta = PolicyParams::zeros(feats.dim());
        for s in 0..3 {
            let probs = policy_probs(&theta, &feats, s);
            for a in 0..4 {
                assert!((probs[a] - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn large_logit_saturates() {
        let feats = ActionFeatures::one_hot(1, 3);
        let mut theta = PolicyParams::zeros(feats.dim());
        theta.theta[0] = 20.0;
        let probs = policy_probs(&theta, &feats, 0);
        assert!(probs[0] >= 1.0 - 1e-8);
    }

    #[test]
    fn probabilities_normalize_for_random_weights() {
        let feats = ActionFeatures::one_hot(4, 3);
        for seed in 0..10 {
            let theta = random_theta(seed, feats.dim());
            for s in 0..4 {
                let probs = policy_probs(&theta, &feats, s);
                let sum: f64 = probs.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert!(probs.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn score_is_policy_centered() {
        let feats = ActionFeatures::one_hot(3, 3);
        let theta = random_theta(5, feats.dim());
        for s in 0..3 {
            let probs = policy_probs(&theta, &feats, s);
            let mut weighted = DVector::<f64>::zeros(feats.dim());
            for a in 0..3 {
                weighted += score(&theta, &feats, s, a) * probs[a];
            }
            assert!(weighted.amax() < 1e-12);
        }
    }

    #[test]
    fn uniform_score_on_two_actions_matches_closed_form() {
        let feats = ActionFeatures::one_hot(2, 2);
        let theta = PolicyParams::zeros(feats.dim());
        let s = 1;
        let psi = score(&theta, &feats, s, 0);
        let expected = feats.feature(s, 0) * 0.5 - feats.feature(s, 1) * 0.5;
        assert!((psi - expected).amax() < 1e-15);
    }

    #[test]
    fn score_matches_finite_differences_of_log_policy() {
        let feats = ActionFeatures::one_hot(3, 2);
        let theta = random_theta(9, feats.dim());
        let step = 1e-5;
        for s in 0..3 {
            for a in 0..2 {
                let psi = score(&theta, &feats, s, a);
                for j in 0..feats.dim() {
                    let mut plus = theta.clone();
                    plus.theta[j] += step;
                    let mut minus = theta.clone();
                    minus.theta[j] -= step;
                    let lp = libm::log(policy_probs(&plus, &feats, s)[a]);
                    let lm = libm::log(policy_probs(&minus, &feats, s)[a]);
                    let fd = (lp - lm) / (2.0 * step);
                    let denom = psi[j].abs().max(1.0);
                    assert!((fd - psi[j]).abs() / denom < 1e-6);
                }
            }
        }
    }

    #[test]
    fn score_norm_is_at_most_two() {
        let feats = ActionFeatures::one_hot(4, 3);
        for seed in 0..20 {
            let theta = random_theta(seed, feats.dim());
            for s in 0..4 {
                for a in 0..3 {
                    assert!(score(&theta, &feats, s, a).norm() <= 2.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn td_error_with_zero_weights_is_the_reward() {
        let f = FeatureMap::tabular(3);
        let obs = Observation {
            s: 0,
            a: 0,
            r: 0.7,
            s_next: 2,
        };
        assert_eq!(td_error(&DVector::zeros(3), &obs, &f, 0.9), 0.7);
    }

    #[test]
    fn td_error_on_matching_features_scales_with_discount() {
        let f = FeatureMap::tabular(2);
        let omega = DVector::from_vec(vec![1.5, 0.0]);
        let obs = Observation {
            s: 0,
            a: 0,
            r: 0.0,
            s_next: 0,
        };
        let gamma = 0.8;
        let delta = td_error(&omega, &obs, &f, gamma);
        assert!((delta - (gamma - 1.0) * 1.5).abs() < 1e-15);
    }

    #[test]
    fn single_sample_gradient_is_delta_times_score() {
        let critic_f = FeatureMap::tabular(3);
        let feats = ActionFeatures::one_hot(3, 2);
        let theta = random_theta(13, feats.dim());
        let omega = DVector::from_vec(vec![0.2, -0.4, 0.1]);
        let obs = Observation {
            s: 1,
            a: 0,
            r: 0.5,
            s_next: 2,
        };
        let h = local_policy_gradient(&theta, &omega, &[obs], &critic_f, &feats, 0.9).unwrap();
        let expected = score(&theta, &feats, 1, 0) * td_error(&omega, &obs, &critic_f, 0.9);
        assert_eq!(h, expected);
    }

    #[test]
    fn zero_rewards_and_zero_critic_give_zero_gradient() {
        let critic_f = FeatureMap::tabular(2);
        let feats = ActionFeatures::one_hot(2, 2);
        let theta = random_theta(15, feats.dim());
        let batch = vec![
            Observation {
                s: 0,
                a: 1,
                r: 0.0,
                s_next: 1,
            };
            8
        ];
        let h = local_policy_gradient(
            &theta,
            &DVector::zeros(2),
            &batch,
            &critic_f,
            &feats,
            0.9,
        )
        .unwrap();
        assert_eq!(h.amax(), 0.0);
    }

    #[test]
    fn aggregate_fixed_points_and_cancellation() {
        let theta = random_theta(17, 4);
        let zeros = vec![DVector::zeros(4), DVector::zeros(4)];
        let same = feda_aggregate(&theta, &zeros, 0.5).unwrap();
        assert_eq!(same.theta, theta.theta);

        let g = DVector::from_vec(vec![1.0, -2.0, 0.5, 0.0]);
        let opposite = vec![g.clone(), -g];
        let cancelled = feda_aggregate(&theta, &opposite, 0.5).unwrap();
        assert_eq!(cancelled.theta, theta.theta);
    }

    #[test]
    fn single_agent_aggregate_is_plain_ascent_step() {
        let theta = random_theta(19, 3);
        let g = DVector::from_vec(vec![0.3, 0.1, -0.2]);
        let alpha = 0.25;
        let next = feda_aggregate(&theta, core::slice::from_ref(&g), alpha).unwrap();
        let expected = &theta.theta + g * alpha;
        assert!((next.theta - expected).amax() < 1e-15);
    }

    #[test]
    fn averaging_updated_policies_equals_averaging_gradients() {
        let theta = random_theta(21, 6);
        let alpha = 0.1;
        let gradients: Vec<DVector<f64>> = (0..4)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + i);
                DVector::from_fn(6, |_, _| rng.random::<f64>() - 0.5)
            })
            .collect();

        let via_gradients = feda_aggregate(&theta, &gradients, alpha).unwrap();

        let mut mean_of_updated = DVector::<f64>::zeros(6);
        for h_i in &gradients {
            mean_of_updated += &theta.theta + h_i * alpha;
        }
        mean_of_updated /= 4.0;

        assert!((via_gradients.theta - mean_of_updated).amax() < 1e-12);
    }

    #[test]
    fn aggregation_is_affine_in_each_gradient() {
        let theta = random_theta(23, 3);
        let alpha = 0.3;
        let g1 = DVector::from_vec(vec![0.2, 0.0, -0.1]);
        let g2 = DVector::from_vec(vec![-0.4, 0.5, 0.3]);
        let base = feda_aggregate(&theta, &[DVector::zeros(3), g2.clone()], alpha).unwrap();
        let moved = feda_aggregate(&theta, &[g1.clone(), g2], alpha).unwrap();
        let diff = moved.theta - base.theta;
        let expected = g1 * (alpha / 2.0);
        assert!((diff - expected).amax() < 1e-15);
    }
}
