//! Seeded Markovian samplers: per-agent critic and actor chains with
//! disjoint, portable random streams, plus mixing-time diagnostics.
//!
//! Critic chains follow the environment kernel under the current policy.
//! Actor chains follow the restart kernel γ·P + (1−γ)·b, whose stationary
//! distribution is exactly the discounted visitation measure, so minibatch
//! policy-gradient estimates are sampled from the right weights.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::CoreError;
use crate::mdp::{StateChain, TabularMdp, TabularPolicy};
use crate::Result;

/// Iteration budget for the total-variation decay scan in
/// [`estimate_mixing`].
const MIXING_ITER_BUDGET: usize = 200_000;

/// Total-variation values at or below this are treated as exactly mixed and
/// excluded from the log-linear decay fit.
const TV_FLOOR: f64 = 1e-13;

/// Purpose tag for random stream derivation. Discriminants are part of the
/// on-disk reproducibility contract and must never be renumbered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum StreamTag {
    /// Critic-chain sampling for one agent.
    Critic = 0,
    /// Actor-chain sampling for one agent.
    Actor = 1,
    /// Shared base environment of a generated family.
    FamilyBase = 2,
    /// Per-agent perturbation environment of a generated family.
    FamilyPerturb = 3,
    /// Uniform output-index selection at the end of a run.
    Selection = 4,
    /// Random feature matrix generation.
    Features = 5,
}

/// Which chain a cursor walks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainKind {
    Critic,
    Actor,
}

impl ChainKind {
    fn tag(self) -> StreamTag {
        match self {
            ChainKind::Critic => StreamTag::Critic,
            ChainKind::Actor => StreamTag::Actor,
        }
    }
}

/// Derives the seed for one logical random stream from the master seed.
///
/// The derivation is fixed so runs are portable across machines and
/// versions: FNV-1a over the little-endian agent id followed by the tag
/// byte, XORed into the master seed. Distinct (agent, tag) pairs map to
/// distinct generator seeds.
pub fn derive_stream_seed(master_seed: u64, agent_id: u64, tag: StreamTag) -> u64 {
    const FNV_OFFSET: u64 = 0xcbf29ce484222325;
    const FNV_PRIME: u64 = 0x00000100000001b3;
    let mut hash = FNV_OFFSET;
    for byte in agent_id.to_le_bytes() {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash ^= tag as u64;
    hash = hash.wrapping_mul(FNV_PRIME);
    master_seed ^ hash
}

/// One Markovian sample: the realized transition (s, a, s') and its reward.
/// On an actor-chain restart, `s_next` is the fresh initial-state draw while
/// `r` keeps the reward of the realized environment transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
}

/// A walker on one agent's critic or actor chain. Owns its generator, so
/// streams never interleave across agents or across the two chain kinds,
/// and advancing one cursor can never perturb another.
#[derive(Debug, Clone)]
pub struct ChainCursor {
    agent_id: usize,
    kind: ChainKind,
    state: usize,
    rng: ChaCha8Rng,
    steps: u64,
}

impl ChainCursor {
    /// Creates a cursor whose stream is derived from the master seed and
    /// whose start state is drawn from the environment's initial
    /// distribution.
    pub fn new(master_seed: u64, agent_id: usize, kind: ChainKind, env: &TabularMdp) -> Self {
        let seed = derive_stream_seed(master_seed, agent_id as u64, kind.tag());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = sample_categorical(&mut rng, env.initial_dist().iter().copied());
        Self {
            agent_id,
            kind,
            state,
            rng,
            steps: 0,
        }
    }

    pub fn agent_id(&self) -> usize {
        self.agent_id
    }

    pub fn kind(&self) -> ChainKind {
        self.kind
    }

    pub fn current_state(&self) -> usize {
        self.state
    }

    /// Number of environment transitions realized so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// Draws an index from a nonnegative weight row summing to one, using a
/// single uniform draw and a cumulative walk.
pub(crate) fn sample_categorical<I>(rng: &mut ChaCha8Rng, weights: I) -> usize
where
    I: IntoIterator<Item = f64>,
{
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, w) in weights.into_iter().enumerate() {
        if w > 0.0 {
            last_positive = i;
        }
        acc += w;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// Advances a critic cursor one step: a ~ π(·|s), s' ~ P(·|s,a),
/// r = R(s,a,s').
///
/// Panics if the cursor is not a critic cursor or indices are out of range.
pub fn step_critic_chain(
    cursor: &mut ChainCursor,
    env: &TabularMdp,
    policy: &TabularPolicy,
) -> Observation {
    assert!(
        cursor.kind == ChainKind::Critic,
        "critic step on a non-critic cursor"
    );
    let s = cursor.state;
    let a = sample_categorical(&mut cursor.rng, policy.probs().row(s).iter().copied());
    let s_next = sample_categorical(&mut cursor.rng, env.transition_row(s, a).iter().copied());
    let r = env.reward(s, a, s_next);
    cursor.state = s_next;
    cursor.steps += 1;
    Observation { s, a, r, s_next }
}

/// Advances an actor cursor one step of the restart chain: the environment
/// transition (s, a, s') is realized and its reward recorded, then with
/// probability 1−γ the chain restarts and `s_next` is replaced by a fresh
/// draw from the initial distribution.
///
/// Panics if the cursor is not an actor cursor or indices are out of range.
pub fn step_actor_chain(
    cursor: &mut ChainCursor,
    env: &TabularMdp,
    policy: &TabularPolicy,
) -> Observation {
    assert!(
        cursor.kind == ChainKind::Actor,
        "actor step on a non-actor cursor"
    );
    let s = cursor.state;
    let a = sample_categorical(&mut cursor.rng, policy.probs().row(s).iter().copied());
    let realized = sample_categorical(&mut cursor.rng, env.transition_row(s, a).iter().copied());
    let r = env.reward(s, a, realized);
    let coin: f64 = cursor.rng.random();
    let s_next = if coin < env.discount() {
        realized
    } else {
        sample_categorical(&mut cursor.rng, env.initial_dist().iter().copied())
    };
    cursor.state = s_next;
    cursor.steps += 1;
    Observation { s, a, r, s_next }
}

/// Draws `m` consecutive actor-chain observations (a contiguous Markovian
/// window, not independent samples).
pub fn sample_minibatch(
    cursor: &mut ChainCursor,
    env: &TabularMdp,
    policy: &TabularPolicy,
    m: usize,
) -> Vec<Observation> {
    let mut batch = Vec::with_capacity(m);
    for _ in 0..m {
        batch.push(step_actor_chain(cursor, env, policy));
    }
    batch
}

/// Mixing diagnostics of an ergodic chain: `tau` is the smallest t at which
/// the worst-start total variation to the stationary distribution falls to
/// `tol`, and (`eta`, `rho`) are the log-linear fit of the decay curve
/// TV(t) ≈ eta·rho^t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixingEstimate {
    pub tau: usize,
    pub eta: f64,
    pub rho: f64,
}

/// Scans the exact worst-start total-variation decay of `chain` and fits
/// its geometric envelope.
///
/// Chains that mix exactly in finite time leave no decay curve to fit; they
/// get `eta` = TV(0) and `rho` floored at 1e-12, with `tau` still exact.
pub fn estimate_mixing(chain: &StateChain, tol: f64) -> Result<MixingEstimate> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(CoreError::BadParameter {
            what: "mixing tolerance",
            value: tol,
        });
    }
    let stationary = match chain.stationary() {
        Some(d) => d.clone(),
        None => chain.stationary_distribution()?,
    };
    let n = chain.n_states();

    // Row s of `dist` is the state distribution after t steps from start s.
    let mut dist = nalgebra::DMatrix::<f64>::identity(n, n);
    let mut points: Vec<(f64, f64)> = Vec::new();
    let mut tau = None;
    let mut t = 0usize;
    loop {
        let tv = worst_start_tv(&dist, &stationary);
        if tv > TV_FLOOR {
            points.push((t as f64, libm::log(tv)));
        }
        if tau.is_none() && tv <= tol {
            tau = Some(t);
        }
        if tv <= tol.min(TV_FLOOR) || (tau.is_some() && tv <= TV_FLOOR) {
            break;
        }
        if tau.is_some() && points.len() >= 2 {
            break;
        }
        if t >= MIXING_ITER_BUDGET {
            return Err(CoreError::NotErgodic {
                residual_tv: tv,
                budget: MIXING_ITER_BUDGET,
            });
        }
        dist *= chain.transition();
        t += 1;
    }
    let tau = tau.expect("loop exits only once tau is set");

    let (eta, rho) = if points.len() >= 2 {
        let (intercept, slope) = line_fit(&points);
        let rho = libm::exp(slope).clamp(1e-12, 1.0 - 1e-12);
        (libm::exp(intercept), rho)
    } else {
        let tv0 = worst_start_tv(&nalgebra::DMatrix::identity(n, n), &stationary);
        (tv0.max(1e-12), 1e-12)
    };
    Ok(MixingEstimate { tau, eta, rho })
}

fn worst_start_tv(dist: &nalgebra::DMatrix<f64>, stationary: &nalgebra::DVector<f64>) -> f64 {
    let mut worst = 0.0f64;
    for s in 0..dist.nrows() {
        let mut tv = 0.0;
        for j in 0..dist.ncols() {
            tv += libm::fabs(dist[(s, j)] - stationary[j]);
        }
        worst = worst.max(0.5 * tv);
    }
    worst
}

/// Ordinary least squares fit y = intercept + slope·x.
fn line_fit(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let denom = n * sxx - sx * sx;
    if denom == 0.0 {
        return (sy / n, 0.0);
    }
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    (intercept, slope)
}
