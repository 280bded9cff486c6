//! Episode execution: observation rendering, policy decisions, motion, and
//! world stepping wired into one deterministic loop, plus the seed
//! derivation that keeps parallel batches reproducible.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::EnvConfig;
use crate::grid::Position;
use crate::observe::{render_into, Observation};
use crate::pcfa::PcfaController;
use crate::plan::{motion_step, Planner};
use crate::policies::{
    FirstLegalPolicy, GreedyConfig, GreedyPolicy, RandomPolicy, RobotPolicy,
};
use crate::world::{StepOutcome, TaskId, WorldError, WorldState};

/// Derives an independent 64-bit seed from a base seed and a stream index
/// (splitmix64 finalizer over golden-ratio strides). Episode `k` of a batch
/// uses `derive_seed(base, k)`; robot `i` inside an episode seeds its policy
/// stream from `derive_seed(episode_seed, i)`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Built-in decision-makers selectable by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyChoice {
    Random,
    Greedy,
    FirstLegal,
    Pcfa,
}

impl PolicyChoice {
    pub fn name(self) -> &'static str {
        match self {
            PolicyChoice::Random => "random",
            PolicyChoice::Greedy => "greedy",
            PolicyChoice::FirstLegal => "first-legal",
            PolicyChoice::Pcfa => "pcfa",
        }
    }
}

impl fmt::Display for PolicyChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(PolicyChoice::Random),
            "greedy" => Ok(PolicyChoice::Greedy),
            "first-legal" | "deterministic-first-legal" => Ok(PolicyChoice::FirstLegal),
            "pcfa" => Ok(PolicyChoice::Pcfa),
            other => Err(format!(
                "unknown policy {other:?}; expected random, greedy, first-legal, or pcfa"
            )),
        }
    }
}

/// A policy choice plus its tunables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub choice: PolicyChoice,
    #[serde(default)]
    pub greedy: GreedyConfig,
}

impl PolicySpec {
    pub fn new(choice: PolicyChoice) -> Self {
        PolicySpec {
            choice,
            greedy: GreedyConfig::default(),
        }
    }

    pub fn name(&self) -> &'static str {
        self.choice.name()
    }
}

/// Everything that happened in one step; the unit of trace comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u32,
    /// Target cell each robot selected this step, by robot id.
    pub targets: Vec<Position>,
    /// Cell each robot proposed to move to, by robot id.
    pub moves: Vec<Position>,
    pub reward: u32,
    pub completed: Vec<TaskId>,
    pub spawned: Vec<TaskId>,
}

/// Outcome of one finished episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    /// Total reward over the horizon.
    pub reward: u64,
    pub completions: u32,
    pub steps: u32,
    /// Gaps, in steps, between consecutive target revisions, pooled over
    /// robots. A robot that never changes target contributes nothing.
    pub revision_intervals: Vec<u32>,
    /// Per-step records; populated only when tracing was requested.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trace: Option<Vec<StepRecord>>,
}

impl EpisodeResult {
    /// Mean steps between target revisions, if any robot revised twice.
    pub fn mean_revision_interval(&self) -> Option<f64> {
        if self.revision_intervals.is_empty() {
            return None;
        }
        let sum: u64 = self.revision_intervals.iter().map(|&g| g as u64).sum();
        Some(sum as f64 / self.revision_intervals.len() as f64)
    }
}

/// One live episode: world, planner, and reusable observation buffers.
///
/// The policy loop and the external-client protocol both drive episodes
/// through this type, so a wire client and an in-process policy making the
/// same decisions traverse literally the same code path.
pub struct Episode {
    pub world: WorldState,
    pub planner: Planner,
    pub obs: Vec<Observation>,
}

impl Episode {
    pub fn new(config: &EnvConfig, seed: u64) -> Result<Self, WorldError> {
        let world = WorldState::init(config, seed)?;
        let obs = (0..config.n_robots)
            .map(|_| Observation::empty(&world))
            .collect();
        Ok(Episode {
            world,
            planner: Planner::new(config.width),
            obs,
        })
    }

    /// Renders every robot's observation from the current state. Intent
    /// planes reflect the paths robots are already following, i.e. the
    /// plans broadcast at the end of the previous step.
    pub fn render(&mut self) {
        for id in 0..self.obs.len() {
            render_into(&self.world, id as u16, &mut self.obs[id]);
        }
    }

    /// Assigns each robot its target, advances motion in id order, and
    /// steps the world. Returns the proposed moves and the step outcome.
    pub fn advance(
        &mut self,
        targets: &[Position],
    ) -> Result<(Vec<Position>, StepOutcome), WorldError> {
        let mut moves = Vec::with_capacity(targets.len());
        for (id, &target) in targets.iter().enumerate() {
            let outcome = motion_step(&mut self.world, &mut self.planner, id as u16, target);
            moves.push(outcome.next);
        }
        let outcome = self.world.step(&moves)?;
        Ok((moves, outcome))
    }
}

enum Driver {
    Policies(Vec<Box<dyn RobotPolicy>>),
    Pcfa(Box<PcfaController>),
}

fn build_driver(config: &EnvConfig, spec: &PolicySpec, seed: u64) -> Driver {
    match spec.choice {
        PolicyChoice::Pcfa => Driver::Pcfa(Box::new(PcfaController::new(config))),
        choice => Driver::Policies(
            (0..config.n_robots)
                .map(|i| -> Box<dyn RobotPolicy> {
                    let stream = derive_seed(seed, i as u64);
                    match choice {
                        PolicyChoice::Random => Box::new(RandomPolicy::new(stream)),
                        PolicyChoice::Greedy => Box::new(GreedyPolicy::new(spec.greedy)),
                        PolicyChoice::FirstLegal => Box::new(FirstLegalPolicy::new()),
                        PolicyChoice::Pcfa => unreachable!("handled above"),
                    }
                })
                .collect(),
        ),
    }
}

/// Runs one episode of `config.horizon` steps and aggregates its metrics.
/// With `trace` set, every step's decisions and outcomes are recorded.
pub fn run_episode(
    config: &EnvConfig,
    spec: &PolicySpec,
    seed: u64,
    trace: bool,
) -> Result<EpisodeResult, WorldError> {
    let mut ep = Episode::new(config, seed)?;
    let mut driver = build_driver(config, spec, seed);
    let n = config.n_robots as usize;
    let mut targets = vec![Position::new(0, 0); n];
    let mut records = if trace { Some(Vec::new()) } else { None };
    let mut completions = 0u32;

    for t in 0..config.horizon {
        match &mut driver {
            Driver::Policies(policies) => {
                ep.render();
                for (i, policy) in policies.iter_mut().enumerate() {
                    targets[i] = policy.decide(&ep.obs[i]).target;
                }
            }
            Driver::Pcfa(controller) => {
                for d in controller.decide(&ep.world, &mut ep.planner) {
                    targets[d.robot as usize] = d.target;
                }
            }
        }
        let (moves, outcome) = ep.advance(&targets)?;
        completions += outcome.completions.len() as u32;
        if let Some(records) = records.as_mut() {
            records.push(StepRecord {
                t,
                targets: targets.clone(),
                moves,
                reward: outcome.reward,
                completed: outcome.completions.iter().map(|task| task.id).collect(),
                spawned: outcome.spawned.iter().map(|task| task.id).collect(),
            });
        }
    }

    Ok(EpisodeResult {
        seed,
        reward: ep.world.cumulative_reward(),
        completions,
        steps: config.horizon,
        revision_intervals: collect_revision_intervals(&ep.world),
        trace: records,
    })
}

/// Gaps between consecutive target revisions per robot, pooled. The first
/// assignment of an episode is not a revision; only later target changes
/// anchor intervals.
pub fn collect_revision_intervals(world: &WorldState) -> Vec<u32> {
    let mut intervals = Vec::new();
    for robot in world.robots() {
        let mut last: Option<u32> = None;
        for rev in robot.revision_log() {
            if rev.old.is_none() {
                continue;
            }
            if let Some(prev) = last {
                intervals.push(rev.t - prev);
            }
            last = Some(rev.t);
        }
    }
    intervals
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SpawnConfig;

    fn short_preset() -> EnvConfig {
        let mut cfg = EnvConfig::preset_nonhomogeneous();
        cfg.horizon = 25;
        cfg
    }

    #[test]
    fn policy_names_round_trip() {
        for name in ["random", "greedy", "first-legal", "pcfa"] {
            let choice: PolicyChoice = name.parse().unwrap();
            assert_eq!(choice.name(), name);
        }
        assert_eq!(
            "deterministic-first-legal".parse::<PolicyChoice>().unwrap(),
            PolicyChoice::FirstLegal
        );
        assert!("bogus".parse::<PolicyChoice>().is_err());
    }

    #[test]
    fn derived_seeds_are_distinct_streams() {
        let mut seen = std::collections::HashSet::new();
        for i in 0..1000u64 {
            assert!(seen.insert(derive_seed(42, i)));
        }
        assert_ne!(derive_seed(42, 0), 42, "stream 0 must not alias the base");
        assert_ne!(derive_seed(42, 0), derive_seed(43, 0));
    }

    #[test]
    fn traced_episode_accounts_for_its_reward() {
        let cfg = short_preset();
        let result = run_episode(&cfg, &PolicySpec::new(PolicyChoice::Greedy), 5, true).unwrap();
        assert_eq!(result.steps, cfg.horizon);
        let trace = result.trace.as_ref().unwrap();
        assert_eq!(trace.len(), cfg.horizon as usize);
        let traced_reward: u64 = trace.iter().map(|r| r.reward as u64).sum();
        assert_eq!(traced_reward, result.reward);
        let traced_completions: u32 = trace.iter().map(|r| r.completed.len() as u32).sum();
        assert_eq!(traced_completions, result.completions);
        for record in trace {
            assert_eq!(record.targets.len(), cfg.n_robots as usize);
            assert_eq!(record.moves.len(), cfg.n_robots as usize);
        }
    }

    #[test]
    fn same_seed_same_trace_different_seed_differs() {
        let cfg = short_preset();
        let spec = PolicySpec::new(PolicyChoice::Random);
        let a = run_episode(&cfg, &spec, 11, true).unwrap();
        let b = run_episode(&cfg, &spec, 11, true).unwrap();
        assert_eq!(a, b);
        let c = run_episode(&cfg, &spec, 12, true).unwrap();
        assert_ne!(a.trace, c.trace);
    }

    #[test]
    fn zero_tasks_zero_spawn_scores_zero() {
        let mut cfg = short_preset();
        cfg.task_setting = "none".to_string();
        cfg.spawn = SpawnConfig::Bernoulli { p: 0.0 };
        let result = run_episode(&cfg, &PolicySpec::new(PolicyChoice::Random), 3, false).unwrap();
        assert_eq!(result.reward, 0);
        assert_eq!(result.completions, 0);
    }

    #[test]
    fn pcfa_episode_completes_tasks() {
        let cfg = short_preset();
        let result = run_episode(&cfg, &PolicySpec::new(PolicyChoice::Pcfa), 7, true).unwrap();
        assert_eq!(result.trace.unwrap().len(), cfg.horizon as usize);
        // Instant respawn on a corner patch keeps tasks available; the
        // coalition policy should complete at least one within 25 steps.
        assert!(result.completions > 0, "no task completed in 25 steps");
    }

    #[test]
    fn revision_intervals_measure_consecutive_changes() {
        let cfg = {
            let mut cfg = EnvConfig::preset_nonhomogeneous();
            cfg.spawn = SpawnConfig::Bernoulli { p: 0.0 };
            cfg.region = crate::config::RegionConfig::Homogeneous;
            cfg
        };
        let a = Position::new(5, 5);
        let b = Position::new(15, 15);
        let c = Position::new(5, 15);
        let mut world = crate::world::WorldState::scripted(
            &cfg,
            &[Position::new(10, 10)],
            &[(a, 3), (b, 3), (c, 3)],
            0,
        )
        .unwrap();
        let stay = [Position::new(10, 10)];

        world.assign_target(0, a); // t=0: first assignment, no interval anchor
        world.step(&stay).unwrap();
        world.assign_target(0, a); // unchanged: not a revision
        world.step(&stay).unwrap();
        world.assign_target(0, b); // t=2: revision
        world.step(&stay).unwrap();
        world.step(&stay).unwrap();
        world.step(&stay).unwrap();
        world.assign_target(0, c); // t=5: revision, 3 steps after the last
        assert_eq!(collect_revision_intervals(&world), vec![3]);
    }

    #[test]
    fn manual_episode_loop_matches_run_episode() {
        // Driving an Episode by hand with the same policies must reproduce
        // run_episode exactly; external clients lean on this equivalence.
        let cfg = short_preset();
        let spec = PolicySpec::new(PolicyChoice::FirstLegal);
        let reference = run_episode(&cfg, &spec, 21, true).unwrap();

        let mut ep = Episode::new(&cfg, 21).unwrap();
        let mut policies: Vec<FirstLegalPolicy> = (0..cfg.n_robots)
            .map(|_| FirstLegalPolicy::new())
            .collect();
        let mut trace = Vec::new();
        for t in 0..cfg.horizon {
            ep.render();
            let targets: Vec<Position> = policies
                .iter_mut()
                .enumerate()
                .map(|(i, p)| p.decide(&ep.obs[i]).target)
                .collect();
            let (moves, outcome) = ep.advance(&targets).unwrap();
            trace.push(StepRecord {
                t,
                targets,
                moves,
                reward: outcome.reward,
                completed: outcome.completions.iter().map(|task| task.id).collect(),
                spawned: outcome.spawned.iter().map(|task| task.id).collect(),
            });
        }
        assert_eq!(Some(trace), reference.trace);
        assert_eq!(ep.world.cumulative_reward(), reference.reward);
    }
}
