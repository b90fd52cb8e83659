//! Experiment configuration files. Parsing is strict: unknown keys are
//! rejected so a typo in a hyperparameter name fails loudly instead of
//! silently running the defaults.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use sfac_core::actor::FedAConfig;
use sfac_core::critic::FedCConfig;
use sfac_core::driver::{Schedule, SfacConfig};
use sfac_core::mdp::GarnetParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Sfac,
    A3cBaseline,
    IndependentAc,
}

impl Algorithm {
    pub fn dir_name(self) -> &'static str {
        match self {
            Algorithm::Sfac => "sfac",
            Algorithm::A3cBaseline => "a3c_baseline",
            Algorithm::IndependentAc => "independent_ac",
        }
    }
}

/// `[family]`: the randomly generated environment family shared by all
/// replicas of an experiment.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub n_agents: usize,
    pub n_states: usize,
    pub n_actions: usize,
    /// Discount factor, shared across the family.
    pub gamma: f64,
    /// Blend weight h in [0, 1] between the shared base environment and
    /// each agent's private one.
    pub heterogeneity: f64,
    /// Critic feature dimension; equal to `n_states` it selects the exact
    /// tabular features, below it a seeded random full-rank map.
    pub feature_rank: usize,
    /// Rewards are drawn uniformly from [0, reward_scale).
    #[serde(default = "default_reward_scale")]
    pub reward_scale: f64,
    /// Successor states with non-smoothing mass per transition row;
    /// defaults to min(3, n_states).
    #[serde(default)]
    pub branching: Option<usize>,
    /// Uniform mass mixed into every transition row; defaults to 1e-3.
    #[serde(default)]
    pub smoothing: Option<f64>,
}

fn default_reward_scale() -> f64 {
    1.0
}

impl FamilySpec {
    pub fn garnet_params(&self) -> GarnetParams {
        let mut params = GarnetParams::new(self.n_states, self.n_actions, self.gamma);
        params.reward_scale = self.reward_scale;
        if let Some(b) = self.branching {
            params.branching = b;
        }
        if let Some(s) = self.smoothing {
            params.smoothing = s;
        }
        params
    }
}

/// `[sfac.schedule]`: how the actor and critic step sizes evolve over
/// outer rounds.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    /// α = actor_coeff·√(N/K), β = critic_coeff·√(N/K), fixed all run.
    Constant { actor_coeff: f64, critic_coeff: f64 },
    /// α_k = alpha0·decay^k, β_k = beta0·decay^k; `growing` negates the
    /// exponent.
    Geometric {
        alpha0: f64,
        beta0: f64,
        decay: f64,
        #[serde(default)]
        growing: bool,
    },
}

impl ScheduleSpec {
    fn to_schedule(&self) -> Schedule {
        match *self {
            ScheduleSpec::Constant {
                actor_coeff,
                critic_coeff,
            } => Schedule::Constant {
                actor_coeff,
                critic_coeff,
            },
            ScheduleSpec::Geometric {
                alpha0,
                beta0,
                decay,
                growing,
            } => Schedule::Geometric {
                alpha0,
                beta0,
                decay,
                growing,
            },
        }
    }
}

/// Local TD steps per critic round: one count for everyone, or one per
/// agent.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum LocalUpdates {
    Uniform(usize),
    PerAgent(Vec<usize>),
}

impl LocalUpdates {
    fn resolve(&self, n_agents: usize) -> Result<Vec<usize>> {
        match self {
            LocalUpdates::Uniform(u) => Ok(vec![*u; n_agents]),
            LocalUpdates::PerAgent(list) => {
                if list.len() != n_agents {
                    bail!(
                        "local_updates lists {} entries but the family has {} agents",
                        list.len(),
                        n_agents
                    );
                }
                Ok(list.clone())
            }
        }
    }
}

/// `[sfac]`: the training loop shape. The same section also parameterizes
/// the baselines, which reuse the schedule and minibatch size under a
/// matched sample budget.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SfacSpec {
    /// Outer rounds K.
    pub outer_rounds: usize,
    /// Critic aggregation rounds T per outer round.
    pub critic_rounds: usize,
    /// Local TD steps per critic round (υ).
    pub local_updates: LocalUpdates,
    /// Actor minibatch size M.
    pub minibatch: usize,
    /// Critic projection radius H.
    pub radius: f64,
    /// Record the exact-oracle trace columns every this many rounds (the
    /// final round is always recorded); 0 disables them.
    #[serde(default = "default_oracle_every")]
    pub oracle_every: usize,
    /// Optional per-agent local critic step sizes; the server step always
    /// follows the schedule.
    #[serde(default)]
    pub local_beta: Option<Vec<f64>>,
    pub schedule: ScheduleSpec,
}

fn default_oracle_every() -> usize {
    1
}

/// `[sweep]`: grids for the sweep subcommands.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Agent counts for `sweep-agents`.
    #[serde(default)]
    pub agents: Vec<usize>,
    /// Blend weights for `sweep-heterogeneity`.
    #[serde(default)]
    pub heterogeneity: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    /// Per-round curves from `sfac_trace.csv` files, one band per run
    /// directory.
    Curves,
    /// Column of a sweep summary CSV against its first column.
    Sweep,
}

/// `[plot]`: inputs for the `plot` subcommand.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotSpec {
    pub kind: PlotKind,
    /// Trace or summary column to draw.
    pub column: String,
    /// Run directories (curves) or summary CSV paths (sweep).
    pub inputs: Vec<PathBuf>,
    /// Legend labels, defaulting to the input paths.
    #[serde(default)]
    pub labels: Vec<String>,
    #[serde(default)]
    pub title: Option<String>,
    /// Draw the y axis in log10; every plotted value must be positive.
    #[serde(default)]
    pub log_y: bool,
}

/// One experiment file: family, loop shape, replication, and the optional
/// sweep and plot sections.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub algorithm: Algorithm,
    /// Replicas per configuration; each gets its own derived master seed.
    pub n_seeds: usize,
    pub family: FamilySpec,
    pub sfac: SfacSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub plot: Option<PlotSpec>,
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let spec: ExperimentSpec = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Semantic checks beyond what deserialization enforces.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            bail!("name must be non-empty");
        }
        if self.n_seeds == 0 {
            bail!("n_seeds must be at least 1");
        }
        let f = &self.family;
        if f.n_agents == 0 || f.n_states == 0 || f.n_actions == 0 {
            bail!("family sizes must all be at least 1");
        }
        if !(f.gamma > 0.0 && f.gamma < 1.0) {
            bail!("family.gamma must lie strictly between 0 and 1, got {}", f.gamma);
        }
        if !(0.0..=1.0).contains(&f.heterogeneity) {
            bail!(
                "family.heterogeneity must lie in [0, 1], got {}",
                f.heterogeneity
            );
        }
        if f.feature_rank == 0 || f.feature_rank > f.n_states {
            bail!(
                "family.feature_rank must lie in [1, n_states = {}], got {}",
                f.n_states,
                f.feature_rank
            );
        }
        if f.reward_scale.is_nan() || f.reward_scale <= 0.0 {
            bail!("family.reward_scale must be positive, got {}", f.reward_scale);
        }
        // The loop shape is re-validated by the library; build it once per
        // agent count here so errors surface at load time.
        self.sfac_config(0, f.n_agents)
            .context("validating the [sfac] section")?;
        Ok(())
    }

    /// Assembles the library-level loop configuration for `n_agents`
    /// agents, used directly by runs and with overridden counts by sweeps.
    pub fn sfac_config(&self, master_seed: u64, n_agents: usize) -> Result<SfacConfig> {
        let s = &self.sfac;
        let local_updates = s.local_updates.resolve(n_agents)?;
        if let Some(lb) = &s.local_beta {
            if lb.len() != n_agents {
                bail!(
                    "local_beta lists {} entries but the family has {} agents",
                    lb.len(),
                    n_agents
                );
            }
        }
        let config = SfacConfig {
            outer_rounds: s.outer_rounds,
            fedc: FedCConfig {
                // Placeholder; the schedule sets the live value each round.
                beta: 1.0,
                local_updates,
                rounds: s.critic_rounds,
                radius: s.radius,
                local_beta: s.local_beta.clone(),
            },
            feda: FedAConfig {
                alpha: 1.0,
                minibatch: s.minibatch,
            },
            schedule: s.schedule.to_schedule(),
            master_seed,
            oracle_every: s.oracle_every,
        };
        config
            .validate()
            .map_err(|e| anyhow::anyhow!("invalid [sfac] section: {e}"))?;
        Ok(config)
    }
}
