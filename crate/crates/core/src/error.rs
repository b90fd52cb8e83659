//! Error type shared by every fallible operation in the crate.

use core::fmt;

/// Failure modes for environment construction, chain analysis, exact solves,
/// and the federated training loops.
///
/// Variants carry enough context (an agent index, a quantity name, the
/// offending value) to locate the problem without a debugger.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Two objects that must agree on a dimension do not.
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    /// A probability row does not sum to one or has a negative entry.
    NotStochastic {
        what: &'static str,
        index: usize,
        sum: f64,
    },
    /// A scalar parameter is outside its admissible range.
    BadParameter { what: &'static str, value: f64 },
    /// A collection that must be non-empty is empty.
    EmptyInput { what: &'static str },
    /// The chain failed the mixing check: worst-case total variation to the
    /// candidate stationary distribution did not fall below tolerance within
    /// the iteration budget.
    NotErgodic { residual_tv: f64, budget: usize },
    /// A stationary distribution has an entry too close to zero for the
    /// mixture construction to be well defined.
    DegenerateStationary { agent: usize, min_mass: f64 },
    /// A feature matrix does not have full column rank.
    RankDeficient { rank: usize, expected: usize },
    /// A linear system was too ill-conditioned to trust, or a residual check
    /// after the solve failed. Carries the agent index when the system
    /// belongs to one agent.
    IllConditioned {
        what: &'static str,
        measure: f64,
        agent: Option<usize>,
    },
    /// The negated symmetric part of the mean TD matrix is not positive
    /// definite, so the evaluation problem has no usable contraction rate.
    NotContractive { min_eigenvalue: f64 },
    /// A non-finite number appeared during training.
    NonFinite { round: usize, what: &'static str },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::DimensionMismatch {
                what,
                expected,
                got,
            } => write!(f, "{what}: expected dimension {expected}, got {got}"),
            CoreError::NotStochastic { what, index, sum } => {
                write!(f, "{what}: row {index} is not a probability vector (sum {sum})")
            }
            CoreError::BadParameter { what, value } => {
                write!(f, "{what} = {value} is outside the admissible range")
            }
            CoreError::EmptyInput { what } => write!(f, "{what} must not be empty"),
            CoreError::NotErgodic { residual_tv, budget } => write!(
                f,
                "chain failed to mix: worst-start total variation {residual_tv} after {budget} steps"
            ),
            CoreError::DegenerateStationary { agent, min_mass } => write!(
                f,
                "agent {agent}: stationary distribution has near-zero mass {min_mass}"
            ),
            CoreError::RankDeficient { rank, expected } => {
                write!(f, "feature matrix has rank {rank}, need full column rank {expected}")
            }
            CoreError::IllConditioned {
                what,
                measure,
                agent,
            } => match agent {
                Some(i) => write!(
                    f,
                    "agent {i}: {what}: solve rejected, conditioning measure {measure}"
                ),
                None => write!(f, "{what}: solve rejected, conditioning measure {measure}"),
            },
            CoreError::NotContractive { min_eigenvalue } => write!(
                f,
                "TD mean matrix is not contractive: min eigenvalue of symmetric part {min_eigenvalue}"
            ),
            CoreError::NonFinite { round, what } => {
                write!(f, "non-finite {what} at round {round}")
            }
        }
    }
}

impl core::error::Error for CoreError {}
