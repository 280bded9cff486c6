//! Egocentric observations: channel stacks, action masks, intention maps.
//!
//! Each robot observes a square window of side `2 * comm_range + 1` centered
//! on itself. The first `l_max + 2` planes (robots, one plane per task
//! level, obstacles) are masked to the view range; the intent plane carries
//! the summed intention maps of *other* robots within communication range
//! and is not view-masked, since it arrives over the radio rather than the
//! camera.
//!
//! The action mask marks the window cells a policy may pick as its
//! navigation target: exactly the task cells in view when there are any,
//! otherwise every window cell that lies on the grid.

use serde::{Deserialize, Serialize};

use crate::config::IntentWeighting;
use crate::grid::Position;
use crate::world::WorldState;

/// Plane index of the robot-occupancy channel.
pub const PLANE_ROBOT: usize = 0;
/// Plane index for tasks of `level` (1-based).
pub fn plane_task(level: u8) -> usize {
    level as usize
}
/// Plane index of the obstacle channel given `l_max`.
pub fn plane_obstacle(l_max: u8) -> usize {
    l_max as usize + 1
}
/// Plane index of the intent channel given `l_max`.
pub fn plane_intent(l_max: u8) -> usize {
    l_max as usize + 2
}
/// Number of channel planes (mask excluded).
pub fn plane_count(l_max: u8) -> usize {
    l_max as usize + 3
}

/// One robot's observation: `l_max + 3` planes of side `side`, plus the
/// action mask. Plane cells are row-major (`wy * side + wx`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub side: u16,
    pub l_max: u8,
    pub width: u16,
    /// View radius the first `l_max + 2` planes were masked to.
    pub view_range: u16,
    /// The observing robot's position (window center).
    pub center: Position,
    pub channels: Vec<f32>,
    pub mask: Vec<bool>,
}

impl Observation {
    /// A zeroed observation shaped for `world`'s parameters.
    pub fn empty(world: &WorldState) -> Self {
        let side = world.config().window_side();
        let l_max = world.config().l_max;
        let cells = side as usize * side as usize;
        Observation {
            side,
            l_max,
            width: world.width(),
            view_range: world.config().view_range,
            center: Position::new(0, 0),
            channels: vec![0.0; plane_count(l_max) * cells],
            mask: vec![false; cells],
        }
    }

    pub fn cells(&self) -> usize {
        self.side as usize * self.side as usize
    }

    pub fn plane(&self, p: usize) -> &[f32] {
        let n = self.cells();
        &self.channels[p * n..(p + 1) * n]
    }

    fn plane_mut(&mut self, p: usize) -> &mut [f32] {
        let n = self.cells();
        &mut self.channels[p * n..(p + 1) * n]
    }

    pub fn at(&self, p: usize, wx: u16, wy: u16) -> f32 {
        self.plane(p)[wy as usize * self.side as usize + wx as usize]
    }

    /// Maps a window cell to its world position, or `None` off the grid.
    pub fn window_to_world(&self, wx: u16, wy: u16) -> Option<Position> {
        let r = (self.side / 2) as i32;
        let x = self.center.x as i32 + wx as i32 - r;
        let y = self.center.y as i32 + wy as i32 - r;
        if x < 0 || y < 0 || x >= self.width as i32 || y >= self.width as i32 {
            None
        } else {
            Some(Position::new(x as u16, y as u16))
        }
    }

    /// Maps a world position into window coordinates when it falls inside
    /// the window.
    pub fn world_to_window(&self, p: Position) -> Option<(u16, u16)> {
        let r = (self.side / 2) as i32;
        let wx = p.x as i32 - self.center.x as i32 + r;
        let wy = p.y as i32 - self.center.y as i32 + r;
        if wx < 0 || wy < 0 || wx >= self.side as i32 || wy >= self.side as i32 {
            None
        } else {
            Some((wx as u16, wy as u16))
        }
    }

    /// Flat window-cell indices whose mask bit is set, ascending.
    pub fn legal_cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| if m { Some(i) } else { None })
    }

    /// Flattens channels plus the mask (as 0.0/1.0) into one f32 buffer of
    /// `(l_max + 4) * side^2` values, the wire layout used by the bridge.
    pub fn flatten_with_mask(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.channels.len() + self.mask.len());
        out.extend_from_slice(&self.channels);
        out.extend(self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }));
        out
    }
}

/// Renders robot `id`'s observation into a fresh buffer.
pub fn render_observation(world: &WorldState, id: u16) -> Observation {
    let mut obs = Observation::empty(world);
    render_into(world, id, &mut obs);
    obs
}

/// Renders robot `id`'s observation into `obs`, reusing its buffers. `obs`
/// must be shaped for `world` (see [`Observation::empty`]).
pub fn render_into(world: &WorldState, id: u16, obs: &mut Observation) {
    let cfg = world.config();
    let side = cfg.window_side();
    let comm = cfg.comm_range as i32;
    let view = cfg.view_range as i32;
    let width = world.width() as i32;
    let l_max = cfg.l_max;
    debug_assert_eq!(obs.side, side);

    obs.channels.iter_mut().for_each(|v| *v = 0.0);
    obs.mask.iter_mut().for_each(|m| *m = false);
    obs.view_range = cfg.view_range;
    let center = world.robot(id).position();
    obs.center = center;

    let mut any_task_in_view = false;
    for wy in 0..side {
        for wx in 0..side {
            let dx = wx as i32 - comm;
            let dy = wy as i32 - comm;
            if dx.abs().max(dy.abs()) > view {
                continue;
            }
            let widx = wy as usize * side as usize + wx as usize;
            let x = center.x as i32 + dx;
            let y = center.y as i32 + dy;
            if x < 0 || y < 0 || x >= width || y >= width {
                // Outside the grid reads as obstacle within view range.
                obs.plane_mut(plane_obstacle(l_max))[widx] = 1.0;
                continue;
            }
            let p = Position::new(x as u16, y as u16);
            if p.is_wall(world.width()) {
                obs.plane_mut(plane_obstacle(l_max))[widx] = 1.0;
                continue;
            }
            if world.robot_at(p).is_some() {
                obs.plane_mut(PLANE_ROBOT)[widx] = 1.0;
            }
            if let Some(task) = world.task_at(p) {
                obs.plane_mut(plane_task(task.level))[widx] = 1.0;
                obs.mask[widx] = true;
                any_task_in_view = true;
            }
        }
    }

    // With no task in view, every on-grid window cell is a legal target.
    if !any_task_in_view {
        for wy in 0..side {
            for wx in 0..side {
                let x = center.x as i32 + wx as i32 - comm;
                let y = center.y as i32 + wy as i32 - comm;
                if x >= 0 && y >= 0 && x < width && y < width {
                    obs.mask[wy as usize * side as usize + wx as usize] = true;
                }
            }
        }
    }

    // Intent: sum of other robots' intention maps, restricted to the
    // window; communication reaches robots within comm_range.
    let intent = plane_intent(l_max);
    for other in world.robots() {
        if other.id == id || center.chebyshev(other.position()) > cfg.comm_range {
            continue;
        }
        let path = other.planned_path();
        if path.is_empty() {
            continue;
        }
        let weights = intention_weights(path.len(), cfg.intent_weighting);
        for (cell, weight) in path.iter().zip(&weights) {
            let wx = cell.x as i32 - center.x as i32 + comm;
            let wy = cell.y as i32 - center.y as i32 + comm;
            if wx < 0 || wy < 0 || wx >= side as i32 || wy >= side as i32 {
                continue;
            }
            obs.plane_mut(intent)[wy as usize * side as usize + wx as usize] += *weight as f32;
        }
    }
}

/// Per-robot record of when each grid cell was last inside the robot's view,
/// driving the exploration fallback: robots with nothing to bid on head for
/// the stalest nearby cell.
#[derive(Debug, Clone)]
pub struct ExplorationMemory {
    width: u16,
    /// Last time step each cell was observed; -1 = never.
    last_seen: Vec<i32>,
}

impl ExplorationMemory {
    pub fn new(width: u16) -> Self {
        ExplorationMemory {
            width,
            last_seen: vec![-1; width as usize * width as usize],
        }
    }

    /// Stamps every on-grid cell within `view` of `center` as seen at `time`.
    pub fn observe(&mut self, center: Position, view: u16, time: u32) {
        let w = self.width as i32;
        let v = view as i32;
        for dy in -v..=v {
            for dx in -v..=v {
                let x = center.x as i32 + dx;
                let y = center.y as i32 + dy;
                if x >= 0 && y >= 0 && x < w && y < w {
                    self.last_seen[(y * w + x) as usize] = time as i32;
                }
            }
        }
    }

    pub fn last_seen(&self, p: Position) -> i32 {
        self.last_seen[p.index(self.width)]
    }

    /// The exploration target: among non-wall window cells within `comm` of
    /// `center` that pass the `exclude` filter, the one seen longest ago;
    /// ties prefer the nearest cell, then row-major order. Falls back to
    /// `center` when everything is excluded.
    pub fn pick_target(
        &self,
        center: Position,
        comm: u16,
        exclude: impl Fn(Position) -> bool,
    ) -> Position {
        let w = self.width as i32;
        let c = comm as i32;
        let mut best: Option<(i32, u16, usize, Position)> = None;
        for dy in -c..=c {
            for dx in -c..=c {
                let x = center.x as i32 + dx;
                let y = center.y as i32 + dy;
                if x < 0 || y < 0 || x >= w || y >= w {
                    continue;
                }
                let p = Position::new(x as u16, y as u16);
                if p.is_wall(self.width) || exclude(p) {
                    continue;
                }
                let key = (
                    self.last_seen[p.index(self.width)],
                    center.chebyshev(p),
                    p.index(self.width),
                );
                if best.map_or(true, |(ls, d, i, _)| key < (ls, d, i)) {
                    best = Some((key.0, key.1, key.2, p));
                }
            }
        }
        best.map(|(_, _, _, p)| p).unwrap_or(center)
    }
}

/// Weights along an `n`-cell planned path.
///
/// Goal-anchored (the default): the destination carries weight 1 and each
/// step back toward the robot multiplies by 2/3, i.e.
/// `w_i = (2/3)^(n-1-i)`. Source-anchored inverts the direction:
/// `w_i = (2/3)^i`, so the robot's own cell carries weight 1.
pub fn intention_weights(n: usize, weighting: IntentWeighting) -> Vec<f64> {
    let mut w = vec![0.0f64; n];
    match weighting {
        IntentWeighting::GoalAnchored => {
            let mut v = 1.0f64;
            for i in (0..n).rev() {
                w[i] = v;
                v *= 2.0 / 3.0;
            }
        }
        IntentWeighting::SourceAnchored => {
            let mut v = 1.0f64;
            for slot in w.iter_mut() {
                *slot = v;
                v *= 2.0 / 3.0;
            }
        }
    }
    w
}

/// A robot's intention map: its planned-path cells paired with their
/// weights. Robots with no plan produce an empty map.
pub fn build_intention_map(
    path: &[Position],
    weighting: IntentWeighting,
) -> Vec<(Position, f64)> {
    path.iter()
        .copied()
        .zip(intention_weights(path.len(), weighting))
        .collect()
}
