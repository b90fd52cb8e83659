//! Tabular MDPs, policy-induced state chains, exact value computations, and
//! random heterogeneous environment families.
//!
//! Everything here is exact linear algebra on dense matrices. Chains are
//! small enough that stationary distributions, value functions, and
//! discounted visitation measures come from direct solves, which the sampled
//! estimators elsewhere in the crate are tested against.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::CoreError;
use crate::sampling::{derive_stream_seed, StreamTag};
use crate::Result;

/// Probability rows must sum to one this tightly at construction time.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Residual tolerance for the stationarity check D·P = D after the solve.
pub const STATIONARY_CHECK_TOL: f64 = 1e-10;

/// Bellman residual tolerance for `exact_value`.
pub const VALUE_RESIDUAL_TOL: f64 = 1e-10;

/// The discounted visitation vector must sum to one this tightly.
pub const VISITATION_SUM_TOL: f64 = 1e-10;

/// Row-sum tolerance for the mixture chain, which is assembled from solved
/// stationary distributions and therefore carries their 1e-10 accuracy.
pub const MIXTURE_ROW_SUM_TOL: f64 = 1e-10;

/// Stationary entries below this make the averaged diagonal effectively
/// singular and the mixture construction meaningless.
pub const STATIONARY_MIN_MASS: f64 = 1e-12;

/// Number of repeated squarings P -> P^2 used by the ergodicity check.
/// P^(2^60) flattens any chain whose second eigenvalue is below
/// 1 - 1e-15, so surviving spread means a periodic or reducible chain.
const MIXING_SQUARINGS: usize = 60;

/// All rows of the squared transition matrix must agree to this spread for
/// the chain to count as mixed.
const MIXING_SPREAD_TOL: f64 = 1e-12;

fn check_prob_row(row: &[f64], what: &'static str, index: usize) -> Result<()> {
    let mut sum = 0.0;
    for &p in row {
        if p.is_nan() || p < 0.0 {
            return Err(CoreError::NotStochastic { what, index, sum: p });
        }
        sum += p;
    }
    if libm::fabs(sum - 1.0) > ROW_SUM_TOL {
        return Err(CoreError::NotStochastic { what, index, sum });
    }
    Ok(())
}

/// One agent's environment: dense transition and reward tensors over
/// `(s, a, s')`, a shared discount, and an initial state distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    discount: f64,
    /// Row-major `[s][a][s']`, every `(s, a)` row a probability vector.
    transition: Vec<f64>,
    /// Row-major `[s][a][s']`, entries bounded by `reward_bound`.
    reward: Vec<f64>,
    reward_bound: f64,
    initial_dist: DVector<f64>,
}

impl TabularMdp {
    /// Validates and assembles an environment.
    ///
    /// `transition` and `reward` are row-major `[s][a][s']` tensors of
    /// length `n_states * n_actions * n_states`.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        discount: f64,
        transition: Vec<f64>,
        reward: Vec<f64>,
        reward_bound: f64,
        initial_dist: DVector<f64>,
    ) -> Result<Self> {
        if n_states == 0 {
            return Err(CoreError::EmptyInput { what: "state space" });
        }
        if n_actions == 0 {
            return Err(CoreError::EmptyInput { what: "action space" });
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(CoreError::BadParameter {
                what: "discount",
                value: discount,
            });
        }
        if !(reward_bound >= 0.0 && reward_bound.is_finite()) {
            return Err(CoreError::BadParameter {
                what: "reward bound",
                value: reward_bound,
            });
        }
        let len = n_states * n_actions * n_states;
        if transition.len() != len {
            return Err(CoreError::DimensionMismatch {
                what: "transition tensor",
                expected: len,
                got: transition.len(),
            });
        }
        if reward.len() != len {
            return Err(CoreError::DimensionMismatch {
                what: "reward tensor",
                expected: len,
                got: reward.len(),
            });
        }
        if initial_dist.len() != n_states {
            return Err(CoreError::DimensionMismatch {
                what: "initial distribution",
                expected: n_states,
                got: initial_dist.len(),
            });
        }
        for sa in 0..n_states * n_actions {
            check_prob_row(
                &transition[sa * n_states..(sa + 1) * n_states],
                "transition",
                sa,
            )?;
        }
        check_prob_row(initial_dist.as_slice(), "initial distribution", 0)?;
        for &r in reward.iter() {
            if r.is_nan() || libm::fabs(r) > reward_bound {
                return Err(CoreError::BadParameter {
                    what: "reward entry exceeding declared bound",
                    value: r,
                });
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            discount,
            transition,
            reward,
            reward_bound,
            initial_dist,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn reward_bound(&self) -> f64 {
        self.reward_bound
    }

    pub fn initial_dist(&self) -> &DVector<f64> {
        &self.initial_dist
    }

    #[inline]
    fn idx(&self, s: usize, a: usize, s_next: usize) -> usize {
        (s * self.n_actions + a) * self.n_states + s_next
    }

    /// P(s' | s, a).
    #[inline]
    pub fn transition_prob(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.transition[self.idx(s, a, s_next)]
    }

    /// R(s, a, s').
    #[inline]
    pub fn reward(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.reward[self.idx(s, a, s_next)]
    }

    /// The probability row P(· | s, a).
    #[inline]
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.n_actions + a) * self.n_states;
        &self.transition[base..base + self.n_states]
    }

    /// Expected one-step reward r(s, a) = Σ_s' P(s'|s,a) R(s,a,s').
    pub fn expected_reward(&self, s: usize, a: usize) -> f64 {
        let base = (s * self.n_actions + a) * self.n_states;
        let mut acc = 0.0;
        for s_next in 0..self.n_states {
            acc += self.transition[base + s_next] * self.reward[base + s_next];
        }
        acc
    }

    /// Full transition tensor, row-major `[s][a][s']`.
    pub fn transition_raw(&self) -> &[f64] {
        &self.transition
    }

    /// Full reward tensor, row-major `[s][a][s']`.
    pub fn reward_raw(&self) -> &[f64] {
        &self.reward
    }

    /// Collapses the environment under a fixed policy into a state chain
    /// with transition P_π(s,s') = Σ_a π(a|s) P(s'|s,a) and expected reward
    /// R_π(s) = Σ_{a,s'} π(a|s) P(s'|s,a) R(s,a,s').
    pub fn induce_state_chain(&self, policy: &TabularPolicy) -> Result<StateChain> {
        if policy.n_states() != self.n_states || policy.n_actions() != self.n_actions {
            return Err(CoreError::DimensionMismatch {
                what: "policy shape vs environment",
                expected: self.n_states * self.n_actions,
                got: policy.n_states() * policy.n_actions(),
            });
        }
        let n = self.n_states;
        let mut p = DMatrix::<f64>::zeros(n, n);
        let mut r = DVector::<f64>::zeros(n);
        for s in 0..n {
            for a in 0..self.n_actions {
                let w = policy.prob(s, a);
                if w == 0.0 {
                    continue;
                }
                let base = self.idx(s, a, 0);
                for s_next in 0..n {
                    let pr = self.transition[base + s_next];
                    p[(s, s_next)] += w * pr;
                    r[s] += w * pr * self.reward[base + s_next];
                }
            }
        }
        StateChain::new(p, r)
    }

    /// Exact discounted visitation measure of the restart process, either
    /// over states, ν(s) = (1−γ)·[bᵀ(I − γP_π)⁻¹](s), or over state-action
    /// pairs, ν(s,a) = ν(s)·π(a|s). Sums to one.
    pub fn discounted_visitation(
        &self,
        policy: &TabularPolicy,
        over: Visitation,
    ) -> Result<DVector<f64>> {
        let chain = self.induce_state_chain(policy)?;
        let n = self.n_states;
        let gamma = self.discount;
        let mut system = DMatrix::<f64>::identity(n, n);
        system -= chain.transition().transpose() * gamma;
        let x = system
            .lu()
            .solve(&self.initial_dist)
            .ok_or(CoreError::IllConditioned {
                what: "discounted visitation solve",
                measure: f64::INFINITY,
                agent: None,
            })?;
        let nu_states = x * (1.0 - gamma);
        let mut sum = 0.0;
        for s in 0..n {
            sum += nu_states[s];
        }
        if libm::fabs(sum - 1.0) > VISITATION_SUM_TOL {
            return Err(CoreError::IllConditioned {
                what: "discounted visitation mass",
                measure: sum,
                agent: None,
            });
        }
        match over {
            Visitation::States => Ok(nu_states),
            Visitation::StateActions => {
                let mut nu_sa = DVector::<f64>::zeros(n * self.n_actions);
                for s in 0..n {
                    for a in 0..self.n_actions {
                        nu_sa[s * self.n_actions + a] = nu_states[s] * policy.prob(s, a);
                    }
                }
                Ok(nu_sa)
            }
        }
    }
}

/// Support of a discounted visitation query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Visitation {
    States,
    StateActions,
}

/// A stochastic tabular policy: one action distribution per state.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    /// `n_states x n_actions`, rows are distributions.
    probs: DMatrix<f64>,
}

impl TabularPolicy {
    pub fn new(probs: DMatrix<f64>) -> Result<Self> {
        for s in 0..probs.nrows() {
            let row: Vec<f64> = probs.row(s).iter().copied().collect();
            check_prob_row(&row, "policy", s)?;
        }
        Ok(Self { probs })
    }

    /// The uniform policy.
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_actions as f64;
        Self {
            probs: DMatrix::from_element(n_states, n_actions, p),
        }
    }

    /// A deterministic policy given one action choice per state.
    pub fn deterministic(choices: &[usize], n_actions: usize) -> Result<Self> {
        let mut probs = DMatrix::<f64>::zeros(choices.len(), n_actions);
        for (s, &a) in choices.iter().enumerate() {
            if a >= n_actions {
                return Err(CoreError::DimensionMismatch {
                    what: "deterministic policy action index",
                    expected: n_actions,
                    got: a,
                });
            }
            probs[(s, a)] = 1.0;
        }
        Ok(Self { probs })
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[(s, a)]
    }

    pub fn probs(&self) -> &DMatrix<f64> {
        &self.probs
    }
}

/// A Markov chain on states with an expected one-step reward vector,
/// as induced by fixing a policy in a [`TabularMdp`].
#[derive(Debug, Clone, PartialEq)]
pub struct StateChain {
    transition: DMatrix<f64>,
    reward: DVector<f64>,
    stationary: Option<DVector<f64>>,
}

impl StateChain {
    pub fn new(transition: DMatrix<f64>, reward: DVector<f64>) -> Result<Self> {
        if transition.nrows() != transition.ncols() {
            return Err(CoreError::DimensionMismatch {
                what: "state chain transition matrix",
                expected: transition.nrows(),
                got: transition.ncols(),
            });
        }
        if reward.len() != transition.nrows() {
            return Err(CoreError::DimensionMismatch {
                what: "state chain reward vector",
                expected: transition.nrows(),
                got: reward.len(),
            });
        }
        for s in 0..transition.nrows() {
            let row: Vec<f64> = transition.row(s).iter().copied().collect();
            check_prob_row(&row, "state chain transition", s)?;
        }
        Ok(Self {
            transition,
            reward,
            stationary: None,
        })
    }

    pub fn n_states(&self) -> usize {
        self.transition.nrows()
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn reward(&self) -> &DVector<f64> {
        &self.reward
    }

    /// The cached stationary distribution, if one has been attached.
    pub fn stationary(&self) -> Option<&DVector<f64>> {
        self.stationary.as_ref()
    }

    /// Returns the chain with its stationary distribution computed and
    /// cached.
    pub fn with_stationary(mut self) -> Result<Self> {
        let d = self.stationary_distribution()?;
        self.stationary = Some(d);
        Ok(self)
    }

    /// Checks that repeated squaring of P collapses all rows to a common
    /// distribution, which rules out periodic and reducible chains, then
    /// solves for D with D·P = D, Σ D = 1 directly.
    pub fn stationary_distribution(&self) -> Result<DVector<f64>> {
        let n = self.n_states();
        let mut power = self.transition.clone();
        let mut mixed = false;
        for _ in 0..MIXING_SQUARINGS {
            if row_spread(&power) <= MIXING_SPREAD_TOL {
                mixed = true;
                break;
            }
            power = &power * &power;
        }
        if !mixed && row_spread(&power) > MIXING_SPREAD_TOL {
            return Err(CoreError::NotErgodic {
                residual_tv: 0.5 * row_spread(&power),
                budget: MIXING_SQUARINGS,
            });
        }

        // (Pᵀ − I) x = 0 with the last equation replaced by Σ x = 1.
        let mut system = self.transition.transpose();
        for s in 0..n {
            system[(s, s)] -= 1.0;
        }
        let mut rhs = DVector::<f64>::zeros(n);
        for s in 0..n {
            system[(n - 1, s)] = 1.0;
        }
        rhs[n - 1] = 1.0;
        let d = system.lu().solve(&rhs).ok_or(CoreError::IllConditioned {
            what: "stationary distribution solve",
            measure: f64::INFINITY,
            agent: None,
        })?;

        let residual = (self.transition.tr_mul(&d) - &d).amax();
        let mass: f64 = d.iter().sum();
        let min_entry = d.iter().copied().fold(f64::INFINITY, f64::min);
        if residual > STATIONARY_CHECK_TOL
            || libm::fabs(mass - 1.0) > STATIONARY_CHECK_TOL
            || min_entry < -STATIONARY_CHECK_TOL
        {
            return Err(CoreError::IllConditioned {
                what: "stationary distribution residual",
                measure: residual,
                agent: None,
            });
        }
        Ok(d.map(|x| x.max(0.0)))
    }

    /// Exact value function V = (I − γP)⁻¹ R, verified against the Bellman
    /// residual.
    pub fn exact_value(&self, gamma: f64) -> Result<DVector<f64>> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(CoreError::BadParameter {
                what: "discount",
                value: gamma,
            });
        }
        let n = self.n_states();
        let mut system = DMatrix::<f64>::identity(n, n);
        system -= &self.transition * gamma;
        let v = system
            .lu()
            .solve(&self.reward)
            .ok_or(CoreError::IllConditioned {
                what: "value solve",
                measure: f64::INFINITY,
                agent: None,
            })?;
        let residual = (&v - (&self.reward + &self.transition * &v * gamma)).amax();
        if residual > VALUE_RESIDUAL_TOL {
            return Err(CoreError::IllConditioned {
                what: "Bellman residual",
                measure: residual,
                agent: None,
            });
        }
        Ok(v)
    }
}

/// Largest column-wise spread between rows of a stochastic matrix; zero
/// exactly when all rows are identical.
fn row_spread(m: &DMatrix<f64>) -> f64 {
    let mut spread = 0.0f64;
    for j in 0..m.ncols() {
        let col = m.column(j);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &x in col.iter() {
            lo = lo.min(x);
            hi = hi.max(x);
        }
        spread = spread.max(hi - lo);
    }
    spread
}

/// The averaged environment a federation of chains collectively evaluates:
/// diagonal weights D*, transition P*, and reward R* satisfying
/// (1/N)Σ D_i R_i = D* R* and (1/N)Σ D_i (γP_i − I) = D* (γP* − I).
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureChain {
    d_star: DVector<f64>,
    p_star: DMatrix<f64>,
    r_star: DVector<f64>,
}

impl MixtureChain {
    /// Diagonal of D* as a vector.
    pub fn d_star(&self) -> &DVector<f64> {
        &self.d_star
    }

    pub fn p_star(&self) -> &DMatrix<f64> {
        &self.p_star
    }

    pub fn r_star(&self) -> &DVector<f64> {
        &self.r_star
    }

    /// The mixture as a plain state chain with D* attached as stationary
    /// weights for downstream fixed-point computations.
    pub fn as_state_chain(&self) -> Result<StateChain> {
        let mut chain = StateChain::new(self.p_star.clone(), self.r_star.clone())?;
        chain.stationary = Some(self.d_star.clone());
        Ok(chain)
    }
}

/// Builds the mixture chain from per-agent state chains: D* is the average
/// of the stationary distributions, R* = (D*)⁻¹·(1/N)Σ D_i R_i, and
/// P* = (D*)⁻¹·(1/N)Σ D_i P_i. Chains missing a cached stationary
/// distribution get one computed here. `gamma` is only used to verify the
/// defining identities before returning.
pub fn build_mixture(chains: &[StateChain], gamma: f64) -> Result<MixtureChain> {
    if chains.is_empty() {
        return Err(CoreError::EmptyInput {
            what: "mixture chain list",
        });
    }
    let n = chains[0].n_states();
    let n_agents = chains.len() as f64;

    let mut stationaries: Vec<DVector<f64>> = Vec::with_capacity(chains.len());
    for (i, chain) in chains.iter().enumerate() {
        if chain.n_states() != n {
            return Err(CoreError::DimensionMismatch {
                what: "mixture member state count",
                expected: n,
                got: chain.n_states(),
            });
        }
        let d = match chain.stationary() {
            Some(d) => d.clone(),
            None => chain.stationary_distribution()?,
        };
        let min_mass = d.iter().copied().fold(f64::INFINITY, f64::min);
        if min_mass < STATIONARY_MIN_MASS {
            return Err(CoreError::DegenerateStationary {
                agent: i,
                min_mass,
            });
        }
        stationaries.push(d);
    }

    let mut d_star = DVector::<f64>::zeros(n);
    let mut weighted_p = DMatrix::<f64>::zeros(n, n);
    let mut weighted_r = DVector::<f64>::zeros(n);
    for (chain, d) in chains.iter().zip(&stationaries) {
        for s in 0..n {
            d_star[s] += d[s] / n_agents;
            weighted_r[s] += d[s] * chain.reward()[s] / n_agents;
            for s_next in 0..n {
                weighted_p[(s, s_next)] += d[s] * chain.transition()[(s, s_next)] / n_agents;
            }
        }
    }

    let mut p_star = DMatrix::<f64>::zeros(n, n);
    let mut r_star = DVector::<f64>::zeros(n);
    for s in 0..n {
        r_star[s] = weighted_r[s] / d_star[s];
        for s_next in 0..n {
            p_star[(s, s_next)] = weighted_p[(s, s_next)] / d_star[s];
        }
    }

    for s in 0..n {
        let sum: f64 = p_star.row(s).iter().sum();
        if libm::fabs(sum - 1.0) > MIXTURE_ROW_SUM_TOL {
            return Err(CoreError::NotStochastic {
                what: "mixture transition",
                index: s,
                sum,
            });
        }
    }
    let mut identity_gap = 0.0f64;
    for s in 0..n {
        identity_gap = identity_gap.max(libm::fabs(d_star[s] * r_star[s] - weighted_r[s]));
        for s_next in 0..n {
            let lhs = gamma * weighted_p[(s, s_next)] - if s == s_next { d_star[s] } else { 0.0 };
            let rhs =
                d_star[s] * (gamma * p_star[(s, s_next)] - if s == s_next { 1.0 } else { 0.0 });
            identity_gap = identity_gap.max(libm::fabs(lhs - rhs));
        }
    }
    if identity_gap > MIXTURE_ROW_SUM_TOL {
        return Err(CoreError::IllConditioned {
            what: "mixture identity residual",
            measure: identity_gap,
            agent: None,
        });
    }

    Ok(MixtureChain {
        d_star,
        p_star,
        r_star,
    })
}

/// Knobs for the random environment generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GarnetParams {
    pub n_states: usize,
    pub n_actions: usize,
    /// Number of successor states with non-smoothing mass per (s, a) row.
    pub branching: usize,
    pub discount: f64,
    /// Rewards are drawn uniformly from [0, reward_scale).
    pub reward_scale: f64,
    /// Uniform mass mixed into every transition row so every induced chain
    /// is ergodic regardless of policy.
    pub smoothing: f64,
}

impl GarnetParams {
    /// Defaults: branching min(3, n_states), rewards in [0, 1), smoothing
    /// 1e-3.
    pub fn new(n_states: usize, n_actions: usize, discount: f64) -> Self {
        Self {
            n_states,
            n_actions,
            branching: n_states.min(3),
            discount,
            reward_scale: 1.0,
            smoothing: 1e-3,
        }
    }
}

/// Generates a family of `n_agents` environments that interpolate between a
/// shared random base (h = 0, all agents bitwise identical) and fully
/// independent draws (h = 1): P_i = (1−h)·P₀ + h·U_i and likewise for
/// rewards. All agents share shape, discount, and a uniform initial
/// distribution.
pub fn generate_family(
    base_seed: u64,
    n_agents: usize,
    n_states: usize,
    n_actions: usize,
    heterogeneity: f64,
    discount: f64,
) -> Result<Vec<TabularMdp>> {
    generate_family_with(
        &GarnetParams::new(n_states, n_actions, discount),
        base_seed,
        n_agents,
        heterogeneity,
    )
}

/// [`generate_family`] with full control over branching, reward scale, and
/// smoothing.
pub fn generate_family_with(
    params: &GarnetParams,
    base_seed: u64,
    n_agents: usize,
    heterogeneity: f64,
) -> Result<Vec<TabularMdp>> {
    if !(0.0..=1.0).contains(&heterogeneity) {
        return Err(CoreError::BadParameter {
            what: "heterogeneity",
            value: heterogeneity,
        });
    }
    if n_agents == 0 {
        return Err(CoreError::EmptyInput { what: "agent list" });
    }
    if params.branching == 0 || params.branching > params.n_states {
        return Err(CoreError::BadParameter {
            what: "branching factor",
            value: params.branching as f64,
        });
    }
    if !(params.smoothing >= 0.0 && params.smoothing < 1.0) {
        return Err(CoreError::BadParameter {
            what: "smoothing",
            value: params.smoothing,
        });
    }

    let mut base_rng = ChaCha8Rng::seed_from_u64(derive_stream_seed(
        base_seed,
        0,
        StreamTag::FamilyBase,
    ));
    let (base_p, base_r) = garnet_tensors(params, &mut base_rng);

    let h = heterogeneity;
    let n = params.n_states;
    let uniform_share = params.smoothing / n as f64;
    let initial = DVector::from_element(n, 1.0 / n as f64);

    let mut family = Vec::with_capacity(n_agents);
    for agent in 0..n_agents {
        let mut agent_rng = ChaCha8Rng::seed_from_u64(derive_stream_seed(
            base_seed,
            agent as u64,
            StreamTag::FamilyPerturb,
        ));
        let (own_p, own_r) = garnet_tensors(params, &mut agent_rng);

        let mut transition = vec![0.0f64; base_p.len()];
        let mut reward = vec![0.0f64; base_r.len()];
        for i in 0..base_p.len() {
            transition[i] = (1.0 - h) * base_p[i] + h * own_p[i];
            reward[i] = (1.0 - h) * base_r[i] + h * own_r[i];
        }
        for row in transition.chunks_mut(n) {
            let mut sum = 0.0;
            for p in row.iter_mut() {
                *p = (1.0 - params.smoothing) * *p + uniform_share;
                sum += *p;
            }
            for p in row.iter_mut() {
                *p /= sum;
            }
        }

        family.push(TabularMdp::new(
            params.n_states,
            params.n_actions,
            params.discount,
            transition,
            reward,
            params.reward_scale,
            initial.clone(),
        )?);
    }
    Ok(family)
}

/// Draws one raw Garnet tensor pair: sparse transition rows with
/// `branching` successors whose probabilities come from sorted uniform cut
/// points, and dense rewards uniform in [0, reward_scale). Draw order is
/// fixed (all transition rows, then all rewards) so streams are stable.
fn garnet_tensors(params: &GarnetParams, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let n = params.n_states;
    let len = n * params.n_actions * n;
    let mut transition = vec![0.0f64; len];
    let mut successors: Vec<usize> = (0..n).collect();
    let mut cuts: Vec<f64> = Vec::with_capacity(params.branching + 1);

    for sa in 0..n * params.n_actions {
        for j in 0..params.branching {
            let pick = rng.random_range(j..n);
            successors.swap(j, pick);
        }
        cuts.clear();
        for _ in 0..params.branching.saturating_sub(1) {
            cuts.push(rng.random::<f64>());
        }
        cuts.sort_unstable_by(|a, b| a.partial_cmp(b).expect("uniform draws are finite"));
        cuts.push(1.0);
        let mut prev = 0.0;
        for (j, &cut) in cuts.iter().enumerate() {
            transition[sa * n + successors[j]] = cut - prev;
            prev = cut;
        }
    }

    let mut reward = vec![0.0f64; len];
    for r in reward.iter_mut() {
        *r = rng.random::<f64>() * params.reward_scale;
    }
    (transition, reward)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state_chain(p: [[f64; 2]; 2]) -> StateChain {
        StateChain::new(
            DMatrix::from_row_slice(2, 2, &[p[0][0], p[0][1], p[1][0], p[1][1]]),
            DVector::zeros(2),
        )
        .unwrap()
    }

    fn random_env(seed: u64, n_states: usize, n_actions: usize) -> TabularMdp {
        generate_family(seed, 1, n_states, n_actions, 0.0, 0.9)
            .unwrap()
            .pop()
            .unwrap()
    }

    fn random_policy(seed: u64, n_states: usize, n_actions: usize) -> TabularPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut probs = DMatrix::<f64>::zeros(n_states, n_actions);
        for s in 0..n_states {
            let mut sum = 0.0;
            for a in 0..n_actions {
                let w = rng.random::<f64>() + 0.05;
                probs[(s, a)] = w;
                sum += w;
            }
            for a in 0..n_actions {
                probs[(s, a)] /= sum;
            }
        }
        TabularPolicy::new(probs).unwrap()
    }

    #[test]
    fn construction_rejects_bad_rows() {
        let err = TabularMdp::new(
            2,
            1,
            0.9,
            vec![0.6, 0.3, 0.5, 0.5],
            vec![0.0; 4],
            1.0,
            DVector::from_vec(vec![0.5, 0.5]),
        )
        .unwrap_err();
        assert!(matches!(err, CoreError::NotStochastic { index: 0, .. }));
    }

    #[test]
    fn construction_rejects_reward_outside_bound() {
        let err = TabularMdp::new(
            1,
            1,
            0.9,
            vec![1.0],
            vec![2.0],
            1.0,
            DVector::from_vec(vec![1.0]),
        )
        .unwrap_err();
        assert!(matches!(err, CoreError::BadParameter { .. }));
    }

    #[test]
    fn deterministic_policy_selects_action_slice() {
        let env = random_env(7, 4, 3);
        let policy = TabularPolicy::deterministic(&[0, 0, 0, 0], 3).unwrap();
        let chain = env.induce_state_chain(&policy).unwrap();
        for s in 0..4 {
            for s_next in 0..4 {
                assert_eq!(chain.transition()[(s, s_next)], env.transition_prob(s, 0, s_next));
            }
        }
    }

    #[test]
    fn uniform_policy_averages_action_slices() {
        let flip = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let mut transition = vec![0.0; 8];
        let mut reward = vec![0.0; 8];
        for s in 0..2 {
            for s_next in 0..2 {
                transition[(s * 2) * 2 + s_next] = if s == s_next { 1.0 } else { 0.0 };
                transition[(s * 2 + 1) * 2 + s_next] = flip[(s, s_next)];
                reward[(s * 2) * 2 + s_next] = 0.25;
                reward[(s * 2 + 1) * 2 + s_next] = 0.25;
            }
        }
        let env = TabularMdp::new(
            2,
            2,
            0.9,
            transition,
            reward,
            1.0,
            DVector::from_vec(vec![0.5, 0.5]),
        )
        .unwrap();
        let chain = env
            .induce_state_chain(&TabularPolicy::uniform(2, 2))
            .unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        assert!((chain.transition() - expected).amax() < 1e-15);
    }

    #[test]
    fn induced_chain_rows_sum_to_one() {
        let env = random_env(11, 4, 2);
        let policy = random_policy(3, 4, 2);
        let chain = env.induce_state_chain(&policy).unwrap();
        for s in 0..4 {
            let sum: f64 = chain.transition().row(s).iter().sum();
            assert!((sum - 1.0).abs() <= ROW_SUM_TOL);
        }
    }

    #[test]
    fn induced_reward_matches_direct_summation() {
        let env = random_env(13, 5, 3);
        let policy = random_policy(5, 5, 3);
        let chain = env.induce_state_chain(&policy).unwrap();
        for s in 0..5 {
            let mut expected = 0.0;
            for a in 0..3 {
                for s_next in 0..5 {
                    expected += policy.prob(s, a)
                        * env.transition_prob(s, a, s_next)
                        * env.reward(s, a, s_next);
                }
            }
            assert!((chain.reward()[s] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn periodic_chain_is_rejected() {
        let chain = two_state_chain([[0.0, 1.0], [1.0, 0.0]]);
        assert!(matches!(
            chain.stationary_distribution(),
            Err(CoreError::NotErgodic { .. })
        ));
    }

    #[test]
    fn symmetric_chain_has_uniform_stationary() {
        let chain = two_state_chain([[0.5, 0.5], [0.5, 0.5]]);
        let d = chain.stationary_distribution().unwrap();
        assert!((d[0] - 0.5).abs() < 1e-14);
        assert!((d[1] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn stationary_matches_left_eigenvector_solve() {
        let chain = two_state_chain([[0.9, 0.1], [0.5, 0.5]]);
        let d = chain.stationary_distribution().unwrap();
        assert!((d[0] - 5.0 / 6.0).abs() < 1e-12);
        assert!((d[1] - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn zero_reward_value_is_zero() {
        let chain = two_state_chain([[0.5, 0.5], [0.4, 0.6]]);
        let v = chain.exact_value(0.9).unwrap();
        assert_eq!(v.amax(), 0.0);
    }

    #[test]
    fn single_state_value_is_geometric_series() {
        let chain = StateChain::new(
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DVector::from_vec(vec![1.0]),
        )
        .unwrap();
        let v = chain.exact_value(0.5).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn value_satisfies_bellman_residual() {
        let env = random_env(17, 5, 2);
        let policy = random_policy(9, 5, 2);
        let chain = env.induce_state_chain(&policy).unwrap();
        let v = chain.exact_value(0.9).unwrap();
        let residual = (&v - (chain.reward() + chain.transition() * &v * 0.9)).amax();
        assert!(residual < VALUE_RESIDUAL_TOL);
    }

    #[test]
    fn visitation_approaches_initial_dist_as_gamma_vanishes() {
        let base = random_env(19, 4, 2);
        let env = TabularMdp::new(
            4,
            2,
            1e-12,
            base.transition_raw().to_vec(),
            base.reward_raw().to_vec(),
            1.0,
            base.initial_dist().clone(),
        )
        .unwrap();
        let nu = env
            .discounted_visitation(&TabularPolicy::uniform(4, 2), Visitation::States)
            .unwrap();
        assert!((nu - env.initial_dist()).amax() < 1e-9);
    }

    #[test]
    fn visitation_concentrates_on_absorbing_start() {
        // State 0 self-loops under every action and the chain starts there.
        let mut transition = vec![0.0; 4];
        transition[0] = 1.0;
        transition[2] = 1.0;
        let env = TabularMdp::new(
            2,
            1,
            0.9,
            transition,
            vec![0.0; 4],
            1.0,
            DVector::from_vec(vec![1.0, 0.0]),
        )
        .unwrap();
        let nu = env
            .discounted_visitation(&TabularPolicy::uniform(2, 1), Visitation::States)
            .unwrap();
        assert!((nu[0] - 1.0).abs() < 1e-12);
        assert!(nu[1].abs() < 1e-12);
    }

    #[test]
    fn state_action_visitation_factors_through_policy() {
        let env = random_env(23, 4, 3);
        let policy = random_policy(15, 4, 3);
        let nu_s = env
            .discounted_visitation(&policy, Visitation::States)
            .unwrap();
        let nu_sa = env
            .discounted_visitation(&policy, Visitation::StateActions)
            .unwrap();
        let total: f64 = nu_sa.iter().sum();
        assert!((total - 1.0).abs() < VISITATION_SUM_TOL);
        for s in 0..4 {
            for a in 0..3 {
                assert!((nu_sa[s * 3 + a] - nu_s[s] * policy.prob(s, a)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mixture_of_identical_chains_is_the_chain() {
        let env = random_env(29, 3, 2);
        let policy = random_policy(21, 3, 2);
        let chain = env
            .induce_state_chain(&policy)
            .unwrap()
            .with_stationary()
            .unwrap();
        let mixture = build_mixture(&[chain.clone(), chain.clone(), chain.clone()], 0.9).unwrap();
        assert!((mixture.p_star() - chain.transition()).amax() < 1e-14);
        assert!((mixture.r_star() - chain.reward()).amax() < 1e-14);
        assert!((mixture.d_star() - chain.stationary().unwrap()).amax() < 1e-14);
    }

    #[test]
    fn mixture_identities_hold_for_random_pair() {
        let envs = generate_family(31, 2, 3, 2, 1.0, 0.9).unwrap();
        let policy = random_policy(27, 3, 2);
        let chains: Vec<StateChain> = envs
            .iter()
            .map(|env| {
                env.induce_state_chain(&policy)
                    .unwrap()
                    .with_stationary()
                    .unwrap()
            })
            .collect();
        let gamma = 0.9;
        let mixture = build_mixture(&chains, gamma).unwrap();

        let n = 3;
        let mut avg_dr = DVector::<f64>::zeros(n);
        let mut avg_dpi = DMatrix::<f64>::zeros(n, n);
        for chain in &chains {
            let d = chain.stationary().unwrap();
            for s in 0..n {
                avg_dr[s] += d[s] * chain.reward()[s] / 2.0;
                for s_next in 0..n {
                    let p = chain.transition()[(s, s_next)];
                    let term = gamma * p - if s == s_next { 1.0 } else { 0.0 };
                    avg_dpi[(s, s_next)] += d[s] * term / 2.0;
                }
            }
        }
        for s in 0..n {
            let dr = mixture.d_star()[s] * mixture.r_star()[s];
            assert!((dr - avg_dr[s]).abs() < 1e-10);
            for s_next in 0..n {
                let lhs = mixture.d_star()[s]
                    * (gamma * mixture.p_star()[(s, s_next)] - if s == s_next { 1.0 } else { 0.0 });
                assert!((lhs - avg_dpi[(s, s_next)]).abs() < 1e-10);
            }
        }
        for s in 0..n {
            let sum: f64 = mixture.p_star().row(s).iter().sum();
            assert!((sum - 1.0).abs() < MIXTURE_ROW_SUM_TOL);
        }
    }

    #[test]
    fn zero_heterogeneity_family_is_bitwise_identical() {
        let family = generate_family(37, 4, 5, 2, 0.0, 0.99).unwrap();
        for env in &family[1..] {
            assert_eq!(env.transition_raw(), family[0].transition_raw());
            assert_eq!(env.reward_raw(), family[0].reward_raw());
        }
    }

    #[test]
    fn full_heterogeneity_family_members_differ() {
        let family = generate_family(41, 3, 5, 2, 1.0, 0.99).unwrap();
        let mut max_gap = 0.0f64;
        for env in &family[1..] {
            for (a, b) in env.transition_raw().iter().zip(family[0].transition_raw()) {
                max_gap = max_gap.max((a - b).abs());
            }
        }
        assert!(max_gap > 0.0);
    }

    #[test]
    fn family_rows_have_full_support() {
        let family = generate_family(43, 2, 6, 3, 0.7, 0.95).unwrap();
        for env in &family {
            for &p in env.transition_raw() {
                assert!(p >= 1e-3 / 6.0 * 0.99);
            }
        }
    }

    #[test]
    fn every_induced_family_chain_is_ergodic() {
        let family = generate_family(47, 3, 5, 3, 0.5, 0.9).unwrap();
        for (i, env) in family.iter().enumerate() {
            let policy = random_policy(100 + i as u64, 5, 3);
            let chain = env.induce_state_chain(&policy).unwrap();
            assert!(chain.stationary_distribution().is_ok());
            let det = TabularPolicy::deterministic(&[0, 1, 2, 0, 1], 3).unwrap();
            let chain = env.induce_state_chain(&det).unwrap();
            assert!(chain.stationary_distribution().is_ok());
        }
    }

    #[test]
    fn family_generation_is_deterministic() {
        let a = generate_family(53, 3, 4, 2, 0.4, 0.9).unwrap();
        let b = generate_family(53, 3, 4, 2, 0.4, 0.9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.transition_raw(), y.transition_raw());
            assert_eq!(x.reward_raw(), y.reward_raw());
        }
    }
}
