//! Experiment orchestration: building families and features from a parsed
//! configuration, fanning replicas out over a worker pool, writing traces,
//! diagnostics, and summaries. Every output is a deterministic function of
//! the configuration and the command-line seed, whatever the worker count.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use sfac_core::actor::{ActionFeatures, PolicyParams};
use sfac_core::critic::FeatureMap;
use sfac_core::driver::{run_sfac, Clock, RunHistory, SfacConfig};
use sfac_core::mdp::{generate_family_with, TabularMdp, TabularPolicy};
use sfac_core::na::DVector;
use sfac_core::oracles::{
    compute_diagnostics, estimate_heterogeneity, heterogeneity_probe, DiagnosticConstants,
    TdSystem,
};

use crate::baseline::{baseline_config, run_baseline, sfac_budget, BaselineKind};
use crate::config::{Algorithm, ExperimentSpec};
use crate::family_io::write_family;
use crate::traces::{write_fedc_trace, write_feda_trace, write_sfac_trace};

/// Wall clock backed by a fixed process instant.
pub struct StdClock(Instant);

impl StdClock {
    pub fn new() -> Self {
        StdClock(Instant::now())
    }
}

impl Default for StdClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for StdClock {
    fn now_secs(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Master seed of replica `r`: the base seed advanced along a fixed-stride
/// sequence, so replicas never collide with each other or with the family
/// seed, and adding replicas never changes earlier ones.
pub fn replica_seed(base: u64, replica: usize) -> u64 {
    base.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(replica as u64 + 1))
}

/// Worker threads for fanning out replicas: the `SFAC_WORKERS` variable
/// when set to a positive integer, otherwise the machine's parallelism,
/// both capped by the job count.
pub fn pool_size(n_jobs: usize) -> usize {
    let configured = std::env::var("SFAC_WORKERS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1);
    let threads = configured.unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    });
    threads.max(1).min(n_jobs.max(1))
}

/// Runs `jobs` closures over the pool and returns their outputs in job
/// order, failing with the lowest-indexed error.
fn run_pool<T, F>(jobs: Vec<F>) -> Result<Vec<T>>
where
    T: Send,
    F: FnOnce() -> Result<T> + Send,
{
    let n = jobs.len();
    let workers = pool_size(n);
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<T>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let jobs: Vec<Mutex<Option<F>>> = jobs.into_iter().map(|j| Mutex::new(Some(j))).collect();

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let job = jobs[i].lock().unwrap().take().expect("job taken once");
                *slots[i].lock().unwrap() = Some(job());
            });
        }
    });

    let mut out = Vec::with_capacity(n);
    for slot in slots {
        out.push(slot.into_inner().unwrap().expect("every job ran")?);
    }
    Ok(out)
}

/// The family plus both feature maps, all derived from the base seed.
pub struct Workbench {
    pub envs: Vec<TabularMdp>,
    pub critic_features: FeatureMap,
    pub action_features: ActionFeatures,
}

/// Builds environments and features for `n_agents` agents at blend
/// weight `heterogeneity` (both overridable for sweeps).
pub fn build_workbench(
    spec: &ExperimentSpec,
    seed: u64,
    n_agents: usize,
    heterogeneity: f64,
) -> Result<Workbench> {
    let params = spec.family.garnet_params();
    let envs = generate_family_with(&params, seed, n_agents, heterogeneity)
        .map_err(|e| anyhow::anyhow!("generating the environment family: {e}"))?;
    let critic_features = if spec.family.feature_rank == spec.family.n_states {
        FeatureMap::tabular(spec.family.n_states)
    } else {
        FeatureMap::random(spec.family.n_states, spec.family.feature_rank, seed)
            .map_err(|e| anyhow::anyhow!("building critic features: {e}"))?
    };
    let action_features = ActionFeatures::one_hot(spec.family.n_states, spec.family.n_actions);
    Ok(Workbench {
        envs,
        critic_features,
        action_features,
    })
}

/// Interactions one replica must consume, per algorithm.
fn expected_budget(algorithm: Algorithm, config: &SfacConfig) -> u64 {
    match algorithm {
        Algorithm::Sfac => sfac_budget(config),
        Algorithm::A3cBaseline | Algorithm::IndependentAc => {
            let n = config.fedc.local_updates.len() as u64;
            config.outer_rounds as u64 * n * (1 + config.feda.minibatch as u64)
        }
    }
}

/// Runs one replica of `algorithm` from all-zero initial parameters.
pub fn run_replica(
    algorithm: Algorithm,
    bench: &Workbench,
    config: &SfacConfig,
) -> Result<(RunHistory, PolicyParams)> {
    let theta0 = PolicyParams::zeros(bench.action_features.dim());
    let omega0 = DVector::<f64>::zeros(bench.critic_features.dim());
    let clock = StdClock::new();
    let (history, theta_hat) = match algorithm {
        Algorithm::Sfac => run_sfac(
            &bench.envs,
            &bench.critic_features,
            &bench.action_features,
            &theta0,
            &omega0,
            config,
            &clock,
        )
        .map_err(|e| anyhow::anyhow!("run failed: {e}"))?,
        Algorithm::A3cBaseline => run_baseline(
            BaselineKind::SharedActor,
            &bench.envs,
            &bench.critic_features,
            &bench.action_features,
            &theta0,
            &omega0,
            config,
            &clock,
        )?,
        Algorithm::IndependentAc => run_baseline(
            BaselineKind::Independent,
            &bench.envs,
            &bench.critic_features,
            &bench.action_features,
            &theta0,
            &omega0,
            config,
            &clock,
        )?,
    };
    let expected = expected_budget(algorithm, config);
    if history.total_env_steps != expected {
        bail!(
            "interaction counter mismatch: consumed {} environment steps, budget says {}",
            history.total_env_steps,
            expected
        );
    }
    Ok((history, theta_hat))
}

/// Per-replica scalars kept for summaries.
#[derive(Debug, Clone, Serialize)]
pub struct ReplicaStats {
    pub replica: usize,
    pub master_seed: u64,
    pub j_avg_final: Option<f64>,
    pub critic_mse_asymptotic: Option<f64>,
    pub grad_norm_sq_floor: Option<f64>,
    pub wall_secs: f64,
    pub env_steps: u64,
}

/// Median of a non-empty slice (average of the middle pair on even
/// lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN in medians"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Median of a column over the last quarter of the run (at least one
/// round), skipping rounds where the column was not recorded: the
/// "asymptotic" readout used by the sweeps.
pub fn tail_median<F: Fn(&sfac_core::driver::RoundRecord) -> Option<f64>>(
    history: &RunHistory,
    column: F,
) -> Option<f64> {
    let k = history.rounds.len();
    let tail_start = k - k.div_ceil(4);
    let tail: Vec<f64> = history.rounds[tail_start..]
        .iter()
        .filter_map(column)
        .collect();
    if tail.is_empty() {
        None
    } else {
        Some(median(&tail))
    }
}

pub fn replica_stats(replica: usize, master_seed: u64, history: &RunHistory) -> ReplicaStats {
    ReplicaStats {
        replica,
        master_seed,
        j_avg_final: history.rounds.last().and_then(|r| r.j_avg_exact),
        critic_mse_asymptotic: tail_median(history, |r| r.critic_err_sq),
        grad_norm_sq_floor: tail_median(history, |r| r.grad_norm_sq_exact),
        wall_secs: history.rounds.last().map(|r| r.wall_secs).unwrap_or(0.0),
        env_steps: history.total_env_steps,
    }
}

/// Serializable mirror of the oracle diagnostics plus the probe that
/// produced them.
#[derive(Debug, Clone, Serialize)]
struct DiagnosticsFile {
    family: DiagnosticsFamily,
    probe: DiagnosticsProbe,
    constants: DiagnosticsConstants,
}

#[derive(Debug, Clone, Serialize)]
struct DiagnosticsFamily {
    seed: u64,
    n_agents: usize,
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    heterogeneity: f64,
    feature_rank: usize,
}

#[derive(Debug, Clone, Serialize)]
struct DiagnosticsProbe {
    policy: &'static str,
    n_random_probes: usize,
    probe_radius: f64,
    mixing_tol: f64,
}

#[derive(Debug, Clone, Serialize)]
struct DiagnosticsConstants {
    lambda: f64,
    chi_sq: f64,
    kappa_sq: f64,
    eta: f64,
    rho: f64,
    tau: usize,
    c: f64,
    q: f64,
    xi_critic: f64,
}

impl From<&DiagnosticConstants> for DiagnosticsConstants {
    fn from(d: &DiagnosticConstants) -> Self {
        DiagnosticsConstants {
            lambda: d.lambda,
            chi_sq: d.chi_sq,
            kappa_sq: d.kappa_sq,
            eta: d.eta,
            rho: d.rho,
            tau: d.tau,
            c: d.c,
            q: d.q,
            xi_critic: d.xi_critic,
        }
    }
}

const N_RANDOM_PROBES: usize = 32;
const MIXING_TOL: f64 = 1e-3;

/// Measures the analysis constants of a family at the all-zeros policy and
/// writes them to `diagnostics.json`.
pub fn write_diagnostics(
    dir: &Path,
    spec: &ExperimentSpec,
    bench: &Workbench,
    seed: u64,
    n_agents: usize,
    heterogeneity: f64,
) -> Result<DiagnosticConstants> {
    let theta0 = PolicyParams::zeros(bench.action_features.dim());
    let probes = heterogeneity_probe(
        bench.critic_features.dim(),
        spec.sfac.radius,
        N_RANDOM_PROBES,
        seed,
    );
    let constants = compute_diagnostics(
        &bench.envs,
        &bench.critic_features,
        &bench.action_features,
        &theta0,
        spec.sfac.radius,
        &probes,
        MIXING_TOL,
    )
    .map_err(|e| anyhow::anyhow!("computing diagnostics: {e}"))?;
    let file = DiagnosticsFile {
        family: DiagnosticsFamily {
            seed,
            n_agents,
            n_states: spec.family.n_states,
            n_actions: spec.family.n_actions,
            gamma: spec.family.gamma,
            heterogeneity,
            feature_rank: spec.family.feature_rank,
        },
        probe: DiagnosticsProbe {
            policy: "zeros (uniform)",
            n_random_probes: N_RANDOM_PROBES,
            probe_radius: spec.sfac.radius,
            mixing_tol: MIXING_TOL,
        },
        constants: DiagnosticsConstants::from(&constants),
    };
    let path = dir.join("diagnostics.json");
    let json = serde_json::to_string_pretty(&file)?;
    fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
    Ok(constants)
}

fn write_summary_csv(path: &Path, stats: &[ReplicaStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    for row in stats {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Executes `algorithm` for all replicas of a configuration into `out`: family
/// file, diagnostics, per-replica trace directories, and `summary.csv`.
/// Returns the per-replica stats for callers that aggregate further.
pub fn run_configuration(
    spec: &ExperimentSpec,
    algorithm: Algorithm,
    seed: u64,
    out: &Path,
    n_agents: usize,
    heterogeneity: f64,
) -> Result<Vec<ReplicaStats>> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let bench = build_workbench(spec, seed, n_agents, heterogeneity)?;
    write_family(
        &out.join("family.bin"),
        &bench.envs,
        seed,
        heterogeneity,
        spec.family.reward_scale,
    )?;
    write_diagnostics(out, spec, &bench, seed, n_agents, heterogeneity)?;

    let base_config = spec.sfac_config(0, n_agents)?;
    let config_for = |replica: usize| -> SfacConfig {
        let mut c = match algorithm {
            Algorithm::Sfac => base_config.clone(),
            Algorithm::A3cBaseline | Algorithm::IndependentAc => baseline_config(&base_config),
        };
        c.master_seed = replica_seed(seed, replica);
        c
    };

    let jobs: Vec<_> = (0..spec.n_seeds)
        .map(|replica| {
            let bench = &bench;
            let config = config_for(replica);
            move || -> Result<(RunHistory, PolicyParams)> {
                run_replica(algorithm, bench, &config)
                    .with_context(|| format!("replica {replica}"))
            }
        })
        .collect();
    let results = run_pool(jobs)?;

    let mut stats = Vec::with_capacity(spec.n_seeds);
    for (replica, (history, _theta_hat)) in results.iter().enumerate() {
        let dir = out.join(format!("seed-{replica:03}"));
        fs::create_dir_all(&dir)?;
        write_sfac_trace(&dir.join("sfac_trace.csv"), history)?;
        write_fedc_trace(&dir.join("fedc_trace.csv"), history)?;
        write_feda_trace(&dir.join("feda_trace.csv"), history)?;
        stats.push(replica_stats(
            replica,
            replica_seed(seed, replica),
            history,
        ));
    }
    write_summary_csv(&out.join("summary.csv"), &stats)?;
    Ok(stats)
}

/// `run`: one configuration, the algorithm it names.
pub fn cmd_run(spec: &ExperimentSpec, seed: u64, out: &Path) -> Result<()> {
    let stats = run_configuration(
        spec,
        spec.algorithm,
        seed,
        out,
        spec.family.n_agents,
        spec.family.heterogeneity,
    )?;
    let finals: Vec<f64> = stats.iter().filter_map(|s| s.j_avg_final).collect();
    if finals.is_empty() {
        println!(
            "{}: {} replicas done (exact oracle disabled)",
            spec.name,
            stats.len()
        );
    } else {
        println!(
            "{}: {} replicas done, median final exact return {:.6}",
            spec.name,
            stats.len(),
            median(&finals)
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct AgentsSummaryRow {
    n_agents: usize,
    critic_mse_asymptotic_median: Option<f64>,
    j_avg_final_median: Option<f64>,
    wall_s_per_outer_round_median: f64,
}

/// `sweep-agents`: regenerates the family at each agent count in
/// `[sweep].agents` (same base seed, so earlier agents are identical
/// across counts) and summarizes medians per count.
pub fn cmd_sweep_agents(spec: &ExperimentSpec, seed: u64, out: &Path) -> Result<()> {
    if spec.sweep.agents.is_empty() {
        bail!("sweep-agents needs a non-empty [sweep].agents list");
    }
    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for &n_agents in &spec.sweep.agents {
        let sub = out.join(format!("agents-{n_agents:02}"));
        let stats = run_configuration(
            spec,
            spec.algorithm,
            seed,
            &sub,
            n_agents,
            spec.family.heterogeneity,
        )?;
        let outer_rounds = spec.sfac.outer_rounds as f64;
        rows.push(AgentsSummaryRow {
            n_agents,
            critic_mse_asymptotic_median: median_of(&stats, |s| s.critic_mse_asymptotic),
            j_avg_final_median: median_of(&stats, |s| s.j_avg_final),
            wall_s_per_outer_round_median: median(
                &stats
                    .iter()
                    .map(|s| s.wall_secs / outer_rounds)
                    .collect::<Vec<_>>(),
            ),
        });
    }
    let path = out.join("sweep_agents.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    println!("sweep over {} agent counts written to {}", rows.len(), path.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct HeterogeneitySummaryRow {
    heterogeneity: f64,
    j_avg_final_median: Option<f64>,
    grad_norm_sq_floor_median: Option<f64>,
    kappa_sq: f64,
}

/// `sweep-heterogeneity`: reruns the configuration across `[sweep].heterogeneity`
/// blend weights on the same base environment, recording medians and the
/// fitted gradient-heterogeneity floor κ² per weight.
pub fn cmd_sweep_heterogeneity(spec: &ExperimentSpec, seed: u64, out: &Path) -> Result<()> {
    if spec.sweep.heterogeneity.is_empty() {
        bail!("sweep-heterogeneity needs a non-empty [sweep].heterogeneity list");
    }
    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for (idx, &h) in spec.sweep.heterogeneity.iter().enumerate() {
        let sub = out.join(format!("h-{idx:02}"));
        let stats = run_configuration(spec, spec.algorithm, seed, &sub, spec.family.n_agents, h)?;
        let bench = build_workbench(spec, seed, spec.family.n_agents, h)?;
        let kappa_sq = fitted_kappa_sq(spec, seed, &bench)?;
        rows.push(HeterogeneitySummaryRow {
            heterogeneity: h,
            j_avg_final_median: median_of(&stats, |s| s.j_avg_final),
            grad_norm_sq_floor_median: median_of(&stats, |s| s.grad_norm_sq_floor),
            kappa_sq,
        });
    }
    let path = out.join("sweep_heterogeneity.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    println!(
        "sweep over {} blend weights written to {}",
        rows.len(),
        path.display()
    );
    Ok(())
}

fn fitted_kappa_sq(spec: &ExperimentSpec, seed: u64, bench: &Workbench) -> Result<f64> {
    let policy = TabularPolicy::uniform(spec.family.n_states, spec.family.n_actions);
    let system = TdSystem::build(&bench.envs, &policy, &bench.critic_features)
        .map_err(|e| anyhow::anyhow!("building the TD system: {e}"))?;
    let probes = heterogeneity_probe(
        bench.critic_features.dim(),
        spec.sfac.radius,
        N_RANDOM_PROBES,
        seed,
    );
    let (_, kappa_sq) = estimate_heterogeneity(&system, &probes, None)
        .map_err(|e| anyhow::anyhow!("fitting heterogeneity constants: {e}"))?;
    Ok(kappa_sq)
}

fn median_of<F: Fn(&ReplicaStats) -> Option<f64>>(
    stats: &[ReplicaStats],
    field: F,
) -> Option<f64> {
    let values: Vec<f64> = stats.iter().filter_map(field).collect();
    if values.is_empty() {
        None
    } else {
        Some(median(&values))
    }
}

#[derive(Debug, Clone, Serialize)]
struct ComparisonRow {
    algorithm: &'static str,
    rounds: usize,
    env_steps_per_replica: u64,
    j_avg_final_median: Option<f64>,
}

/// `baseline`: runs the federated algorithm and a budget-matched
/// comparator side by side and writes `comparison.csv`. The comparator is
/// the configured algorithm when that is already a baseline, otherwise
/// the shared-actor one.
pub fn cmd_baseline(spec: &ExperimentSpec, seed: u64, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let comparator = match spec.algorithm {
        Algorithm::Sfac => Algorithm::A3cBaseline,
        other => other,
    };
    let n_agents = spec.family.n_agents;
    let h = spec.family.heterogeneity;

    let sfac_stats = run_configuration(
        spec,
        Algorithm::Sfac,
        seed,
        &out.join(Algorithm::Sfac.dir_name()),
        n_agents,
        h,
    )?;
    let base_stats = run_configuration(
        spec,
        comparator,
        seed,
        &out.join(comparator.dir_name()),
        n_agents,
        h,
    )?;

    let base_config = spec.sfac_config(0, n_agents)?;
    let rows = vec![
        ComparisonRow {
            algorithm: Algorithm::Sfac.dir_name(),
            rounds: base_config.outer_rounds,
            env_steps_per_replica: sfac_stats.first().map(|s| s.env_steps).unwrap_or(0),
            j_avg_final_median: median_of(&sfac_stats, |s| s.j_avg_final),
        },
        ComparisonRow {
            algorithm: comparator.dir_name(),
            rounds: baseline_config(&base_config).outer_rounds,
            env_steps_per_replica: base_stats.first().map(|s| s.env_steps).unwrap_or(0),
            j_avg_final_median: median_of(&base_stats, |s| s.j_avg_final),
        },
    ];
    let path = out.join("comparison.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    println!("comparison written to {}", path.display());
    Ok(())
}
