//! Experiment orchestration: batch episode execution over seed lists,
//! metric aggregation, scalability sweeps, the evaluation matrix over all
//! task settings, generalizability scoring, and result export.
//!
//! Episodes are embarrassingly parallel; every episode derives its own
//! random stream from (plan seed, ordinal), so results are bit-identical
//! regardless of worker count or scheduling.

use std::collections::BTreeMap;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, EnvConfig, RegionConfig, SpawnConfig, TaskSetting};
use crate::runner::{derive_seed, run_episode, PolicySpec};
use crate::world::RNG_ALGORITHM;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid plan: {0}")]
    Config(#[from] ConfigError),
    #[error("plan needs at least one seed and one episode per seed")]
    EmptyPlan,
    #[error("no reference reward for setting {0:?}")]
    MissingReference(String),
    #[error("sweep point N={n} infeasible: {detail}")]
    InfeasiblePoint { n: u32, detail: String },
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

/// A batch of episodes: one environment, one policy, several seeds, a fixed
/// number of episodes per seed. Episode `k` under plan seed `s` runs the
/// world with `derive_seed(s, k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub config: EnvConfig,
    pub policy: PolicySpec,
    pub seeds: Vec<u64>,
    pub episodes_per_seed: u32,
    /// Steps per episode; overrides `config.horizon`.
    pub horizon: u32,
}

impl ExperimentPlan {
    /// A plan with the given seeds, keeping the config's horizon.
    pub fn new(config: EnvConfig, policy: PolicySpec, seeds: Vec<u64>, episodes_per_seed: u32) -> Self {
        let horizon = config.horizon;
        ExperimentPlan {
            config,
            policy,
            seeds,
            episodes_per_seed,
            horizon,
        }
    }

    /// The standard evaluation protocol: 5 seeds x 96 episodes = 480.
    pub fn evaluation(config: EnvConfig, policy: PolicySpec) -> Self {
        let seeds = (0..5).map(|i| config.seed + i).collect();
        Self::new(config, policy, seeds, 96)
    }

    pub fn total_episodes(&self) -> usize {
        self.seeds.len() * self.episodes_per_seed as usize
    }

    fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() || self.episodes_per_seed == 0 {
            return Err(HarnessError::EmptyPlan);
        }
        let mut cfg = self.config.clone();
        cfg.horizon = self.horizon;
        cfg.validate()?;
        Ok(())
    }
}

/// One episode's outcome as exported to the per-episode file. Contains no
/// wall-clock data, so reruns of the same plan produce identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    /// Position in the plan's episode enumeration.
    pub ordinal: u32,
    /// The plan seed this episode belongs to.
    pub seed_group: u64,
    /// The world seed actually used.
    pub episode_seed: u64,
    pub reward: u64,
    pub completions: u32,
    pub steps: u32,
    pub mean_revision_interval: Option<f64>,
    /// Why the episode failed, if it did. Failed episodes are excluded
    /// from aggregates but kept in the record stream.
    pub error: Option<String>,
}

/// Aggregated result of one plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub policy: String,
    pub episodes: Vec<EpisodeRecord>,
    /// Mean episodic reward over non-failed episodes.
    pub mean_reward: f64,
    /// Sample standard deviation (n-1) over non-failed episodes.
    pub std_reward: f64,
    /// Mean of per-episode mean revision intervals, where defined.
    pub mean_revision_interval: Option<f64>,
    /// Wall clock per environment step, aggregated over the whole run.
    pub ms_per_step: f64,
    pub invalid_episodes: u32,
}

impl MetricsRecord {
    /// 95% confidence half-width for the mean reward.
    pub fn ci95(&self) -> f64 {
        let n = self.episodes.len() - self.invalid_episodes as usize;
        ci95_half_width(self.std_reward, n)
    }
}

/// Mean and sample standard deviation (n-1 denominator).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (values.len() - 1) as f64;
    (mean, var.sqrt())
}

/// Normal-approximation 95% confidence half-width.
pub fn ci95_half_width(std: f64, n: usize) -> f64 {
    if n == 0 {
        return f64::INFINITY;
    }
    1.96 * std / (n as f64).sqrt()
}

/// Runs every episode of the plan (in parallel) and aggregates metrics.
/// Individual episode failures are recorded and skipped in aggregation;
/// only a malformed plan fails the whole run.
pub fn run_plan(plan: &ExperimentPlan) -> Result<MetricsRecord, HarnessError> {
    plan.validate()?;
    let mut cfg = plan.config.clone();
    cfg.horizon = plan.horizon;

    let jobs: Vec<(u32, u64, u64)> = plan
        .seeds
        .iter()
        .flat_map(|&seed| {
            (0..plan.episodes_per_seed).map(move |k| (seed, derive_seed(seed, k as u64)))
        })
        .enumerate()
        .map(|(ordinal, (seed_group, episode_seed))| (ordinal as u32, seed_group, episode_seed))
        .collect();

    let started = Instant::now();
    let episodes: Vec<EpisodeRecord> = jobs
        .par_iter()
        .map(|&(ordinal, seed_group, episode_seed)| {
            match run_episode(&cfg, &plan.policy, episode_seed, false) {
                Ok(result) => EpisodeRecord {
                    ordinal,
                    seed_group,
                    episode_seed,
                    reward: result.reward,
                    completions: result.completions,
                    steps: result.steps,
                    mean_revision_interval: result.mean_revision_interval(),
                    error: None,
                },
                Err(err) => EpisodeRecord {
                    ordinal,
                    seed_group,
                    episode_seed,
                    reward: 0,
                    completions: 0,
                    steps: 0,
                    mean_revision_interval: None,
                    error: Some(err.to_string()),
                },
            }
        })
        .collect();
    let elapsed = started.elapsed();

    Ok(aggregate(plan.policy.name().to_string(), episodes, elapsed.as_secs_f64()))
}

fn aggregate(policy: String, episodes: Vec<EpisodeRecord>, elapsed_secs: f64) -> MetricsRecord {
    let rewards: Vec<f64> = episodes
        .iter()
        .filter(|e| e.error.is_none())
        .map(|e| e.reward as f64)
        .collect();
    let (mean_reward, std_reward) = mean_std(&rewards);
    let intervals: Vec<f64> = episodes
        .iter()
        .filter_map(|e| e.mean_revision_interval)
        .collect();
    let mean_revision_interval = if intervals.is_empty() {
        None
    } else {
        Some(intervals.iter().sum::<f64>() / intervals.len() as f64)
    };
    let total_steps: u64 = episodes.iter().map(|e| e.steps as u64).sum();
    let invalid_episodes = episodes.iter().filter(|e| e.error.is_some()).count() as u32;
    MetricsRecord {
        policy,
        mean_reward,
        std_reward,
        mean_revision_interval,
        ms_per_step: elapsed_secs * 1e3 / total_steps.max(1) as f64,
        invalid_episodes,
        episodes,
    }
}

/// Least-squares line fit with coefficient of determination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn least_squares(xs: &[f64], ys: &[f64]) -> LinearFit {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "a fit needs at least two points");
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let e = y - (slope * x + intercept);
            e * e
        })
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    LinearFit {
        slope,
        intercept,
        r_squared,
    }
}

/// Shape of one scalability-sweep point before running it.
///
/// Grid side `W = round(sqrt(N / robot_density))` and task count
/// `T = round(task_density * W^2)`; both densities must land within `1/W^2`
/// of their targets or the point is rejected as infeasible.
pub fn sweep_point_geometry(
    n: u32,
    robot_density: f64,
    task_density: f64,
) -> Result<(u16, u32), HarnessError> {
    let width = (n as f64 / robot_density).sqrt().round();
    if !(3.0..=u16::MAX as f64).contains(&width) {
        return Err(HarnessError::InfeasiblePoint {
            n,
            detail: format!("grid width {width} out of range"),
        });
    }
    let cells = width * width;
    let tasks = (task_density * cells).round();
    let tol = 1.0 / cells;
    if (n as f64 / cells - robot_density).abs() > tol + 1e-12 {
        return Err(HarnessError::InfeasiblePoint {
            n,
            detail: format!(
                "robot density {:.4} misses target {robot_density} at W={width}",
                n as f64 / cells
            ),
        });
    }
    if (tasks / cells - task_density).abs() > tol + 1e-12 {
        return Err(HarnessError::InfeasiblePoint {
            n,
            detail: format!(
                "task density {:.4} misses target {task_density} at W={width}",
                tasks / cells
            ),
        });
    }
    Ok((width as u16, tasks as u32))
}

/// Splits `total` tasks across levels 1..3 in the 0.4/0.3/0.3 proportions
/// of the reference mix, by largest remainder (ties to the lower level).
pub fn proportional_mix(total: u32) -> [u16; 3] {
    let shares = [0.4f64, 0.3, 0.3];
    let mut counts = [0u16; 3];
    let mut remainders = [0.0f64; 3];
    let mut assigned = 0u32;
    for i in 0..3 {
        let quota = shares[i] * total as f64;
        counts[i] = quota.floor() as u16;
        remainders[i] = quota - quota.floor();
        assigned += counts[i] as u32;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| remainders[b].total_cmp(&remainders[a]).then(a.cmp(&b)));
    for &i in order.iter().take((total - assigned) as usize) {
        counts[i] += 1;
    }
    counts
}

/// One executed sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n: u32,
    pub width: u16,
    pub tasks: [u16; 3],
    pub mean_reward: f64,
    pub std_reward: f64,
    pub ms_per_step: f64,
    pub invalid_episodes: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub robot_density: f64,
    pub task_density: f64,
    pub points: Vec<SweepPoint>,
    pub fit: LinearFit,
}

/// Runs the plan at each robot count with the grid rescaled to hold robot
/// and task densities constant (instant respawn, homogeneous region,
/// reference-proportional task mix), then fits reward against N.
pub fn scalability_sweep(
    base: &ExperimentPlan,
    robot_density: f64,
    task_density: f64,
    n_list: &[u32],
) -> Result<SweepResult, HarnessError> {
    let mut points = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let (width, total_tasks) = sweep_point_geometry(n, robot_density, task_density)?;
        let tasks = proportional_mix(total_tasks);
        let mut plan = base.clone();
        plan.config.width = width;
        plan.config.n_robots = n as u16;
        plan.config.spawn = SpawnConfig::Instant;
        plan.config.region = RegionConfig::Homogeneous;
        plan.config.task_setting = format!("{}/{}/{}", tasks[0], tasks[1], tasks[2]);
        let metrics = run_plan(&plan).map_err(|e| match e {
            HarnessError::Config(err) => HarnessError::InfeasiblePoint {
                n,
                detail: err.to_string(),
            },
            other => other,
        })?;
        points.push(SweepPoint {
            n,
            width,
            tasks,
            mean_reward: metrics.mean_reward,
            std_reward: metrics.std_reward,
            ms_per_step: metrics.ms_per_step,
            invalid_episodes: metrics.invalid_episodes,
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.n as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.mean_reward).collect();
    let fit = least_squares(&xs, &ys);
    Ok(SweepResult {
        robot_density,
        task_density,
        points,
        fit,
    })
}

/// One cell of the task-setting evaluation matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub setting: String,
    pub metrics: MetricsRecord,
}

/// Runs the base plan once per catalog evaluation setting (the config's
/// own task setting is replaced cell by cell).
pub fn evaluation_matrix(base: &ExperimentPlan) -> Result<Vec<EvalCell>, HarnessError> {
    TaskSetting::evaluation_matrix()
        .iter()
        .map(|setting| {
            let mut plan = base.clone();
            plan.config.task_setting = setting.name.to_string();
            Ok(EvalCell {
                setting: setting.name.to_string(),
                metrics: run_plan(&plan)?,
            })
        })
        .collect()
}

/// Mean over settings of achieved reward normalized by that setting's
/// reference reward. Every evaluated setting must have a positive
/// reference.
pub fn generalizability_score(
    results: &BTreeMap<String, f64>,
    reference: &BTreeMap<String, f64>,
) -> Result<f64, HarnessError> {
    if results.is_empty() {
        return Err(HarnessError::EmptyPlan);
    }
    let mut sum = 0.0;
    for (setting, &reward) in results {
        let reference = reference
            .get(setting)
            .copied()
            .filter(|&r| r > 0.0)
            .ok_or_else(|| HarnessError::MissingReference(setting.clone()))?;
        sum += reward / reference;
    }
    Ok(sum / results.len() as f64)
}

/// Provenance stamped into every output file header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub rng: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub policy: String,
}

impl RunMeta {
    pub fn for_plan(plan: &ExperimentPlan) -> Self {
        RunMeta {
            rng: RNG_ALGORITHM.to_string(),
            config_hash: plan.config.content_hash(),
            seeds: plan.seeds.clone(),
            policy: plan.policy.name().to_string(),
        }
    }

    fn comment_lines(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        format!(
            "# rng={}\n# config_hash={}\n# seeds={}\n# policy={}\n",
            self.rng,
            self.config_hash,
            seeds.join(","),
            self.policy
        )
    }
}

/// Writes per-episode records as newline-delimited JSON: one header object
/// (provenance), then one record per line. Contains no timing data, so the
/// bytes depend only on the plan.
pub fn write_episode_records(
    path: &Path,
    meta: &RunMeta,
    records: &[EpisodeRecord],
) -> io::Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut out, meta)?;
    out.write_all(b"\n")?;
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Writes a comma-separated summary table prefixed with `#` provenance
/// comment lines.
pub fn write_summary_csv(
    path: &Path,
    meta: &RunMeta,
    columns: &[&str],
    rows: &[Vec<String>],
) -> io::Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(meta.comment_lines().as_bytes())?;
    writeln!(out, "{}", columns.join(","))?;
    for row in rows {
        debug_assert_eq!(row.len(), columns.len());
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()
}

/// The single-row summary for one plan's metrics.
pub fn summary_row(metrics: &MetricsRecord) -> (Vec<&'static str>, Vec<String>) {
    let columns = vec![
        "policy",
        "episodes",
        "invalid",
        "mean_reward",
        "std_reward",
        "mean_revision_interval",
        "ms_per_step",
    ];
    let row = vec![
        metrics.policy.clone(),
        metrics.episodes.len().to_string(),
        metrics.invalid_episodes.to_string(),
        format!("{:.6}", metrics.mean_reward),
        format!("{:.6}", metrics.std_reward),
        metrics
            .mean_revision_interval
            .map_or("".to_string(), |v| format!("{v:.6}")),
        format!("{:.6}", metrics.ms_per_step),
    ];
    (columns, row)
}
