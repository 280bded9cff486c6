//! Decentralized coalition formation over the communication graph.
//!
//! Every step, each robot bids on the tasks inside its view range with the
//! utility `l^2 * exp(-2 * (t_eta + t_w - t0))`, where `t_eta` is the
//! absolute A*-estimated arrival time, `t_w` the wait for the slowest
//! coalition partner, and `t0` the task's spawn time. Bid tables then spread
//! over the communication graph (links exist between robots within
//! `comm_range`) in synchronized exchange rounds; per task, the top-`level`
//! bidders form the candidate coalition, a robot holding several candidacies
//! keeps only its best task and withdraws from the rest, and the rounds
//! repeat until nothing changes (capped at twice the graph diameter). Full
//! candidate coalitions commit; members of partial ones keep heading for
//! their task; robots with no positive-utility bid fall back to exploring
//! the stalest nearby cell. Everything is recomputed from scratch each step,
//! so assignments adapt as tasks spawn and complete.
//!
//! Robots in different connected components never exchange tables, so two
//! components may each raise a coalition for the same task; the world's
//! completion rule (counting assigned adjacent robots) resolves the overlap
//! physically.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::config::EnvConfig;
use crate::grid::Position;
use crate::observe::ExplorationMemory;
use crate::plan::{plan_for, Planner};
use crate::world::{Task, TaskId, WorldState};

/// Bid utility for a task: `level^2 * exp(-2 * delay)` with
/// `delay = (now + eta) + wait - spawn_time`. An unreachable task
/// (`eta = None`) is worth nothing.
pub fn utility(task: &Task, eta: Option<u32>, wait: u32, now: u32) -> f64 {
    let Some(eta) = eta else { return 0.0 };
    let delay = (now as f64 + eta as f64) + wait as f64 - task.spawn_time as f64;
    let l = task.level as f64;
    l * l * (-2.0 * delay).exp()
}

/// One robot's bid on one task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bid {
    pub robot_id: u16,
    pub task_id: TaskId,
    pub utility: f64,
    pub eta: u32,
    pub stamp: u32,
}

/// What a robot ends up doing after a coalition round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    /// Member of a full coalition.
    Committed(TaskId),
    /// Member of a coalition still waiting for more robots.
    Candidate(TaskId),
    /// Not a candidate anywhere; tags along to its best under-strength task.
    Follower(TaskId),
    /// Nothing worth bidding on: heads for the stalest nearby cell.
    Explore,
}

/// Per-robot outcome of one coalition round, in robot-id order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PcfaDecision {
    pub robot: u16,
    pub target: Position,
    pub role: Role,
}

/// A candidate coalition as agreed inside one communication component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub task: TaskId,
    /// Lowest robot id in the component that formed this record.
    pub component: u16,
    /// Members in ascending id order with their bid utilities.
    pub members: Vec<u16>,
    pub utilities: Vec<f64>,
    pub full: bool,
}

/// The assignment outcome of one coalition round.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoalitionLedger {
    pub t: u32,
    /// robot -> committed task; at most one entry per robot.
    pub committed: BTreeMap<u16, TaskId>,
    pub candidates: Vec<CandidateRecord>,
}

impl CoalitionLedger {
    /// Newline-delimited debug records `{t, task_id, coalition, utilities}`.
    pub fn dump_records(&self) -> Vec<String> {
        self.candidates
            .iter()
            .map(|c| {
                serde_json::json!({
                    "t": self.t,
                    "task_id": c.task.0,
                    "component": c.component,
                    "coalition": c.members,
                    "utilities": c.utilities,
                    "full": c.full,
                })
                .to_string()
            })
            .collect()
    }
}

/// Everything a robot knows about one task, as carried in bid tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct TaskInfo {
    location: Position,
    level: u8,
    spawn_time: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct BidEntry {
    utility: f64,
    eta: u32,
    stamp: u32,
}

/// One robot's view of the auction: known tasks, best-known bids, and the
/// withdrawals it has heard about.
#[derive(Debug, Clone, Default, PartialEq)]
struct RobotView {
    tasks: BTreeMap<TaskId, TaskInfo>,
    bids: BTreeMap<TaskId, BTreeMap<u16, BidEntry>>,
    withdrawn: BTreeSet<(TaskId, u16)>,
}

impl RobotView {
    /// Folds another robot's table into this one. Per (task, robot) the
    /// higher utility wins, ties going to the newer stamp; withdrawals are
    /// unioned. Returns whether anything changed.
    fn merge(&mut self, other: &RobotView) -> bool {
        let mut changed = false;
        for (id, info) in &other.tasks {
            if self.tasks.insert(*id, *info).is_none() {
                changed = true;
            }
        }
        for (task, bids) in &other.bids {
            let mine = self.bids.entry(*task).or_default();
            for (rid, entry) in bids {
                match mine.get(rid) {
                    None => {
                        let _ = mine.insert(*rid, *entry);
                        changed = true;
                    }
                    Some(have) => {
                        if entry.utility > have.utility
                            || (entry.utility == have.utility && entry.stamp > have.stamp)
                        {
                            let _ = mine.insert(*rid, *entry);
                            changed = true;
                        }
                    }
                }
            }
        }
        for w in &other.withdrawn {
            changed |= self.withdrawn.insert(*w);
        }
        changed
    }

    /// Candidate coalition for `task`: the top-`level` non-withdrawn bidders
    /// by (utility desc, robot id asc).
    fn candidates(&self, task: TaskId) -> Vec<(u16, BidEntry)> {
        let Some(info) = self.tasks.get(&task) else {
            return Vec::new();
        };
        let Some(bids) = self.bids.get(&task) else {
            return Vec::new();
        };
        let mut bidders: Vec<(u16, BidEntry)> = bids
            .iter()
            .filter(|(rid, _)| !self.withdrawn.contains(&(task, **rid)))
            .map(|(rid, e)| (*rid, *e))
            .collect();
        bidders.sort_by(|a, b| {
            b.1.utility
                .total_cmp(&a.1.utility)
                .then(a.0.cmp(&b.0))
        });
        bidders.truncate(info.level as usize);
        bidders
    }

    /// Tasks whose candidate coalition currently includes `robot`.
    fn candidacies(&self, robot: u16) -> Vec<TaskId> {
        self.tasks
            .keys()
            .filter(|&&k| self.candidates(k).iter().any(|(rid, _)| *rid == robot))
            .copied()
            .collect()
    }

    /// Utility of `task` adjusted for waiting on the slowest current
    /// candidate: every member idles until the last arrival, so the
    /// effective delay is `now + max-candidate-eta - spawn`.
    fn wait_adjusted_utility(&self, task: TaskId, now: u32) -> f64 {
        let info = self.tasks[&task];
        let max_eta = self
            .candidates(task)
            .iter()
            .map(|(_, e)| e.eta)
            .max()
            .unwrap_or(0);
        let delay = now as f64 + max_eta as f64 - info.spawn_time as f64;
        let l = info.level as f64;
        l * l * (-2.0 * delay).exp()
    }

    /// The task a multiply-candidate robot keeps: highest wait-adjusted
    /// utility, ties to the lower task id.
    fn choose_kept_task(&self, candidacies: &[TaskId], now: u32) -> TaskId {
        let mut best = candidacies[0];
        let mut best_u = self.wait_adjusted_utility(best, now);
        for &k in &candidacies[1..] {
            let u = self.wait_adjusted_utility(k, now);
            if u > best_u || (u == best_u && k < best) {
                best = k;
                best_u = u;
            }
        }
        best
    }
}

/// The coalition-formation controller: owns per-robot exploration memory and
/// the ledger of the latest round. One controller serves one episode.
#[derive(Debug, Clone)]
pub struct PcfaController {
    exploration: Vec<ExplorationMemory>,
    pub ledger: CoalitionLedger,
    /// Whether the last round reached a fixed point before the iteration cap.
    pub last_round_converged: bool,
}

impl PcfaController {
    pub fn new(config: &EnvConfig) -> Self {
        PcfaController {
            exploration: (0..config.n_robots)
                .map(|_| ExplorationMemory::new(config.width))
                .collect(),
            ledger: CoalitionLedger::default(),
            last_round_converged: true,
        }
    }

    /// Runs one full coalition round against the current world snapshot and
    /// returns every robot's target. Deterministic: iteration follows robot
    /// and task ids, and table exchanges are synchronized (each round reads
    /// the previous round's tables).
    pub fn decide(&mut self, world: &WorldState, planner: &mut Planner) -> Vec<PcfaDecision> {
        let cfg = world.config();
        let now = world.time();
        let n = world.robots().len();
        for (r, mem) in self.exploration.iter_mut().enumerate() {
            mem.observe(world.robot(r as u16).position(), cfg.view_range, now);
        }

        // Stage 1: local bids on in-view tasks. Zero-utility (unreachable)
        // tasks never enter the table.
        let mut views: Vec<RobotView> = vec![RobotView::default(); n];
        for (r, view) in views.iter_mut().enumerate() {
            let pos = world.robot(r as u16).position();
            for (id, task) in world.tasks() {
                if pos.chebyshev(task.location) > cfg.view_range {
                    continue;
                }
                let eta = plan_for(world, planner, r as u16, task.location).map(|p| p.cost);
                let u = utility(task, eta, 0, now);
                if u > 0.0 {
                    let _ = view.tasks.insert(
                        *id,
                        TaskInfo {
                            location: task.location,
                            level: task.level,
                            spawn_time: task.spawn_time,
                        },
                    );
                    let _ = view.bids.entry(*id).or_default().insert(
                        r as u16,
                        BidEntry {
                            utility: u,
                            eta: eta.expect("positive utility implies a path"),
                            stamp: now,
                        },
                    );
                }
            }
        }

        // Stages 2+3: synchronized exchange-and-resolve rounds. Merging
        // spreads bids and withdrawals hop by hop; each robot that finds
        // itself candidate for several tasks keeps the best one and
        // withdraws from the rest. Fixed point or 2 * diameter rounds.
        let neighbors = communication_graph(world, cfg.comm_range);
        let cap = 2 * graph_diameter(&neighbors).max(1);
        let mut converged = false;
        for _ in 0..cap {
            let snapshot = views.clone();
            let mut changed = false;
            for (r, view) in views.iter_mut().enumerate() {
                for &nb in &neighbors[r] {
                    changed |= view.merge(&snapshot[nb as usize]);
                }
            }
            for (r, view) in views.iter_mut().enumerate() {
                let candidacies = view.candidacies(r as u16);
                if candidacies.len() > 1 {
                    let keep = view.choose_kept_task(&candidacies, now);
                    for k in candidacies {
                        if k != keep {
                            let _ = view.withdrawn.insert((k, r as u16));
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                converged = true;
                break;
            }
        }
        self.last_round_converged = converged;

        let components = connected_components(&neighbors);
        if converged {
            debug_assert!(
                views_agree_within_components(&views, &components),
                "tables must agree inside each component at fixed point"
            );
        }

        // Stage 4: commitment and fallbacks.
        let mut decisions = Vec::with_capacity(n);
        let mut ledger = CoalitionLedger {
            t: now,
            ..CoalitionLedger::default()
        };
        for r in 0..n {
            let rid = r as u16;
            let view = &views[r];
            let pos = world.robot(rid).position();
            let candidacies = view.candidacies(rid);
            // The cap can cut iteration before all conflicts settle; apply
            // the keep rule once more locally so each robot backs one task.
            let kept = match candidacies.len() {
                0 => None,
                1 => Some(candidacies[0]),
                _ => Some(view.choose_kept_task(&candidacies, now)),
            };
            let (role, target) = if let Some(k) = kept {
                let info = view.tasks[&k];
                let full = view.candidates(k).len() == info.level as usize;
                if full {
                    let _ = ledger.committed.insert(rid, k);
                    (Role::Committed(k), info.location)
                } else {
                    (Role::Candidate(k), info.location)
                }
            } else if let Some((k, info)) = self.best_partial_task(view, rid) {
                (Role::Follower(k), info.location)
            } else {
                let mem = &self.exploration[r];
                let target = mem.pick_target(pos, cfg.comm_range, |p| {
                    view.tasks.values().any(|t| t.location == p)
                        || (pos.chebyshev(p) <= cfg.view_range && world.task_at(p).is_some())
                });
                (Role::Explore, target)
            };
            decisions.push(PcfaDecision {
                robot: rid,
                target,
                role,
            });
        }

        // Ledger candidate records, one per (component, task), from the
        // component's lowest-id member's view.
        for component in &components {
            let rep = component[0];
            let view = &views[rep as usize];
            for (&task, info) in &view.tasks {
                let cands = view.candidates(task);
                if cands.is_empty() {
                    continue;
                }
                let mut members: Vec<u16> = cands.iter().map(|(rid, _)| *rid).collect();
                let mut utilities: Vec<f64> = cands.iter().map(|(_, e)| e.utility).collect();
                let order: Vec<usize> = {
                    let mut idx: Vec<usize> = (0..members.len()).collect();
                    idx.sort_by_key(|&i| members[i]);
                    idx
                };
                members = order.iter().map(|&i| members[i]).collect();
                utilities = order.iter().map(|&i| utilities[i]).collect();
                ledger.candidates.push(CandidateRecord {
                    task,
                    component: rep,
                    members,
                    utilities,
                    full: cands.len() == info.level as usize,
                });
            }
        }
        self.ledger = ledger;
        decisions
    }

    /// Best under-strength coalition among the robot's own positive bids,
    /// by (own utility desc, task id asc); `None` when every task the robot
    /// bid on already has a full candidate list.
    fn best_partial_task(&self, view: &RobotView, robot: u16) -> Option<(TaskId, TaskInfo)> {
        let mut best: Option<(TaskId, TaskInfo, f64)> = None;
        for (&task, bids) in &view.bids {
            let Some(own) = bids.get(&robot) else { continue };
            let info = view.tasks[&task];
            if view.candidates(task).len() >= info.level as usize {
                continue;
            }
            let better = match &best {
                None => true,
                Some((bt, _, bu)) => {
                    own.utility > *bu || (own.utility == *bu && task < *bt)
                }
            };
            if better {
                best = Some((task, info, own.utility));
            }
        }
        best.map(|(t, i, _)| (t, i))
    }
}

/// Adjacency lists of the communication graph: undirected links between
/// robots within `comm_range` of each other.
fn communication_graph(world: &WorldState, comm_range: u16) -> Vec<Vec<u16>> {
    let n = world.robots().len();
    let mut adj = vec![Vec::new(); n];
    for a in 0..n {
        let pa = world.robot(a as u16).position();
        for b in a + 1..n {
            let pb = world.robot(b as u16).position();
            if pa.chebyshev(pb) <= comm_range {
                adj[a].push(b as u16);
                adj[b].push(a as u16);
            }
        }
    }
    adj
}

/// Maximum eccentricity over all components (0 for singleton components).
fn graph_diameter(adj: &[Vec<u16>]) -> u32 {
    let n = adj.len();
    let mut diameter = 0u32;
    let mut dist = vec![u32::MAX; n];
    for start in 0..n {
        dist.iter_mut().for_each(|d| *d = u32::MAX);
        dist[start] = 0;
        let mut queue = VecDeque::new();
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if dist[w as usize] == u32::MAX {
                    dist[w as usize] = dist[v] + 1;
                    queue.push_back(w as usize);
                }
            }
        }
        let ecc = dist.iter().filter(|&&d| d != u32::MAX).max().copied().unwrap_or(0);
        diameter = diameter.max(ecc);
    }
    diameter
}

/// Connected components as ascending robot-id lists, ordered by their
/// smallest member.
fn connected_components(adj: &[Vec<u16>]) -> Vec<Vec<u16>> {
    let n = adj.len();
    let mut seen = vec![false; n];
    let mut components = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let mut component = Vec::new();
        let mut queue = VecDeque::new();
        queue.push_back(start);
        seen[start] = true;
        while let Some(v) = queue.pop_front() {
            component.push(v as u16);
            for &w in &adj[v] {
                if !seen[w as usize] {
                    seen[w as usize] = true;
                    queue.push_back(w as usize);
                }
            }
        }
        component.sort_unstable();
        components.push(component);
    }
    components
}

fn views_agree_within_components(views: &[RobotView], components: &[Vec<u16>]) -> bool {
    components.iter().all(|component| {
        let first = &views[component[0] as usize];
        component
            .iter()
            .all(|&r| &views[r as usize] == first)
    })
}
