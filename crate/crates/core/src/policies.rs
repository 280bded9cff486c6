//! Built-in baseline policies behind a single per-robot decision trait.
//!
//! Each robot runs its own policy instance over its own observation — no
//! policy sees the world state directly, which keeps every baseline honest
//! about decentralization. Three baselines live here: a uniform-random
//! target picker (testing floor), a deterministic first-legal picker
//! (reproducibility anchor for the external-process protocol), and a greedy
//! coalition heuristic (non-learned reference opponent).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grid::Position;
use crate::observe::{plane_intent, plane_task, ExplorationMemory, Observation};

/// One target choice for one robot at one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyDecision {
    /// World cell the robot should head for.
    pub target: Position,
    /// True iff `target` differs from the policy's previous decision.
    pub revised: bool,
}

/// A per-robot decision-maker.
///
/// Implementations may keep internal memory and randomness but must decide
/// from the observation alone, and every decision's target must be legal
/// under the observation's action mask.
pub trait RobotPolicy: Send {
    fn decide(&mut self, obs: &Observation) -> PolicyDecision;
}

fn cell_to_world(obs: &Observation, widx: usize) -> Position {
    let side = obs.side as usize;
    obs.window_to_world((widx % side) as u16, (widx / side) as u16)
        .expect("legal window cells map onto the grid")
}

/// Picks a target uniformly at random among the mask's legal cells.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    rng: ChaCha8Rng,
    previous: Option<Position>,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        RandomPolicy {
            rng: ChaCha8Rng::seed_from_u64(seed),
            previous: None,
        }
    }
}

impl RobotPolicy for RandomPolicy {
    fn decide(&mut self, obs: &Observation) -> PolicyDecision {
        let cells: Vec<usize> = obs.legal_cells().collect();
        let widx = cells[self.rng.gen_range(0..cells.len())];
        let target = cell_to_world(obs, widx);
        let revised = self.previous != Some(target);
        self.previous = Some(target);
        PolicyDecision { target, revised }
    }
}

/// Always targets the lowest-indexed legal window cell.
///
/// Trivially deterministic, so in-process runs of this policy double as the
/// reference trace when validating external clients driving the same
/// episode over the wire protocol.
#[derive(Debug, Clone, Default)]
pub struct FirstLegalPolicy {
    previous: Option<Position>,
}

impl FirstLegalPolicy {
    pub fn new() -> Self {
        Self::default()
    }
}

impl RobotPolicy for FirstLegalPolicy {
    fn decide(&mut self, obs: &Observation) -> PolicyDecision {
        let widx = obs
            .legal_cells()
            .next()
            .expect("action mask always has at least one legal cell");
        let target = cell_to_world(obs, widx);
        let revised = self.previous != Some(target);
        self.previous = Some(target);
        PolicyDecision { target, revised }
    }
}

/// Tunables for [`GreedyPolicy`]. The scoring shape and the hysteresis
/// factor are heuristic choices, so both stay configurable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GreedyConfig {
    /// Exponent on the task level in the score numerator.
    pub level_exponent: f64,
    /// Additive offset on the Chebyshev distance in the denominator.
    pub distance_offset: f64,
    /// A challenger must beat the current target's present score by this
    /// factor before the robot switches tasks.
    pub hysteresis: f64,
}

impl Default for GreedyConfig {
    fn default() -> Self {
        GreedyConfig {
            level_exponent: 2.0,
            distance_offset: 1.0,
            hysteresis: 1.2,
        }
    }
}

/// In-view task candidate under the greedy score.
struct Candidate {
    position: Position,
    score: f64,
    /// Whether intent already converging on the task, plus this robot,
    /// would reach the task's level.
    supported: bool,
    widx: usize,
}

/// Greedy coalition heuristic.
///
/// Targets the in-view task maximizing `level^e / (offset + distance)`;
/// score ties prefer tasks whose surrounding intent weight plus this robot
/// would reach the required coalition size, then fall back to window order.
/// The previous target is kept unless a challenger's score exceeds it by
/// the hysteresis factor — frequent retargeting tears coalitions apart
/// faster than any scoring gain can repay. With no task in view the robot
/// walks toward the stalest nearby cell it remembers.
#[derive(Debug, Clone)]
pub struct GreedyPolicy {
    config: GreedyConfig,
    memory: Option<ExplorationMemory>,
    previous: Option<Position>,
    step: u32,
}

impl GreedyPolicy {
    pub fn new(config: GreedyConfig) -> Self {
        GreedyPolicy {
            config,
            memory: None,
            previous: None,
            step: 0,
        }
    }
}

impl RobotPolicy for GreedyPolicy {
    fn decide(&mut self, obs: &Observation) -> PolicyDecision {
        let memory = self
            .memory
            .get_or_insert_with(|| ExplorationMemory::new(obs.width));
        memory.observe(obs.center, obs.view_range, self.step);
        self.step += 1;

        let candidates = scan_tasks(obs, &self.config);
        let target = if candidates.is_empty() {
            memory.pick_target(obs.center, obs.side / 2, |_| false)
        } else {
            let best = &candidates[0];
            let prev = self
                .previous
                .and_then(|p| candidates.iter().find(|c| c.position == p));
            match prev {
                Some(prev) if best.position != prev.position => {
                    if best.score > self.config.hysteresis * prev.score {
                        best.position
                    } else {
                        prev.position
                    }
                }
                _ => best.position,
            }
        };
        let revised = self.previous != Some(target);
        self.previous = Some(target);
        PolicyDecision { target, revised }
    }
}

/// All in-view tasks, best first: score descending, supported tasks ahead
/// of unsupported ones at equal score, then window order.
fn scan_tasks(obs: &Observation, config: &GreedyConfig) -> Vec<Candidate> {
    let side = obs.side as usize;
    let r = (obs.side / 2) as i32;
    let intent = obs.plane(plane_intent(obs.l_max));
    let mut out = Vec::new();
    for wy in 0..obs.side {
        for wx in 0..obs.side {
            let Some(level) = task_level_at(obs, wx, wy) else {
                continue;
            };
            let Some(position) = obs.window_to_world(wx, wy) else {
                continue;
            };
            let cheb = (wx as i32 - r).abs().max((wy as i32 - r).abs());
            let score = (level as f64).powf(config.level_exponent)
                / (config.distance_offset + cheb as f64);
            // Robots already heading here park on the eight surrounding
            // cells, so sum intent over the 3x3 block around the task.
            let mut support = 0.0f64;
            for dy in -1..=1i32 {
                for dx in -1..=1i32 {
                    let nx = wx as i32 + dx;
                    let ny = wy as i32 + dy;
                    if nx >= 0 && ny >= 0 && nx < side as i32 && ny < side as i32 {
                        support += intent[ny as usize * side + nx as usize] as f64;
                    }
                }
            }
            let supported = support + 1.0 >= level as f64 - 1e-9;
            out.push(Candidate {
                position,
                score,
                supported,
                widx: wy as usize * side + wx as usize,
            });
        }
    }
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(b.supported.cmp(&a.supported))
            .then(a.widx.cmp(&b.widx))
    });
    out
}

fn task_level_at(obs: &Observation, wx: u16, wy: u16) -> Option<u8> {
    (1..=obs.l_max).find(|&l| obs.at(plane_task(l), wx, wy) > 0.5)
}
