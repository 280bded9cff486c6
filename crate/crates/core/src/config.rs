//! Environment configuration, task-setting catalog, and named presets.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown task setting {0:?}")]
    UnknownTaskSetting(String),
    #[error("failed to read config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse config file: {0}")]
    Parse(#[from] toml::de::Error),
}

/// Task spawn model selector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SpawnConfig {
    /// Each unoccupied task-region cell independently spawns a task with
    /// probability `p` per step; the level is uniform over `1..=l_max`.
    Bernoulli { p: f64 },
    /// Each completed task immediately respawns at the same level on a
    /// uniformly random unoccupied task-region cell.
    Instant,
}

/// Spatial task distribution selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RegionConfig {
    /// Tasks may occupy any interior cell.
    Homogeneous,
    /// All tasks are confined to one of the four equal corner patches of the
    /// interior, drawn uniformly once per episode.
    CornerPatch,
}

/// Orientation of the intention-map path weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntentWeighting {
    /// Weight 1 at the destination, decaying by 2/3 per cell toward the
    /// robot (default).
    #[default]
    GoalAnchored,
    /// Weight 1 at the robot's current cell, decaying by 2/3 per cell toward
    /// the destination.
    SourceAnchored,
}

/// Full environment configuration.
///
/// Loadable from TOML; every field can be overridden by CLI flags. `seed` is
/// the base seed: batch runs derive one independent stream per episode from
/// it, single runs use it directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub width: u16,
    pub n_robots: u16,
    pub view_range: u16,
    pub comm_range: u16,
    pub l_max: u8,
    pub spawn: SpawnConfig,
    pub region: RegionConfig,
    /// Name of the initial task mix, e.g. "M2" (see [`TaskSetting`]).
    pub task_setting: String,
    /// Steps per episode; 100 means t = 0..=99.
    pub horizon: u32,
    pub seed: u64,
    /// Intention-map orientation; kept switchable for fidelity experiments.
    #[serde(default)]
    pub intent_weighting: IntentWeighting,
}

impl EnvConfig {
    /// Non-homogeneous default: 20x20 grid, 10 robots, M2 tasks confined to a
    /// random corner patch, instant respawn.
    pub fn preset_nonhomogeneous() -> Self {
        EnvConfig {
            width: 20,
            n_robots: 10,
            view_range: 5,
            comm_range: 8,
            l_max: 3,
            spawn: SpawnConfig::Instant,
            region: RegionConfig::CornerPatch,
            task_setting: "M2".to_string(),
            horizon: 100,
            seed: 0,
            intent_weighting: IntentWeighting::GoalAnchored,
        }
    }

    /// Homogeneous default: 20x20 grid, 40 robots, 4xM2 tasks over the whole
    /// interior, instant respawn.
    pub fn preset_homogeneous() -> Self {
        EnvConfig {
            n_robots: 40,
            region: RegionConfig::Homogeneous,
            task_setting: "4xM2".to_string(),
            ..Self::preset_nonhomogeneous()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: EnvConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Initial per-level task counts resolved from `task_setting`.
    pub fn initial_tasks(&self) -> Result<TaskSetting, ConfigError> {
        TaskSetting::by_name(&self.task_setting)
            .ok_or_else(|| ConfigError::UnknownTaskSetting(self.task_setting.clone()))
    }

    /// Side length of the square observation window, `2 * comm_range + 1`.
    pub fn window_side(&self) -> u16 {
        2 * self.comm_range + 1
    }

    pub fn interior_cells(&self) -> usize {
        (self.width as usize - 2) * (self.width as usize - 2)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if self.width < 3 {
            return fail(format!("width must be >= 3, got {}", self.width));
        }
        if self.n_robots < 1 {
            return fail("n_robots must be >= 1".to_string());
        }
        if self.l_max < 1 {
            return fail("l_max must be >= 1".to_string());
        }
        if self.comm_range < self.view_range {
            return fail(format!(
                "comm_range ({}) must be >= view_range ({})",
                self.comm_range, self.view_range
            ));
        }
        if self.view_range < 1 {
            return fail("view_range must be >= 1".to_string());
        }
        if let SpawnConfig::Bernoulli { p } = self.spawn {
            if !(0.0..=1.0).contains(&p) || p.is_nan() {
                return fail(format!("bernoulli p must be in [0, 1], got {p}"));
            }
        }
        let setting = self.initial_tasks()?;
        if setting.max_level() > self.l_max {
            return fail(format!(
                "task setting {} uses levels above l_max {}",
                setting.name, self.l_max
            ));
        }
        let interior = self.interior_cells();
        if self.n_robots as usize > interior {
            return fail(format!(
                "{} robots cannot fit in {} interior cells",
                self.n_robots, interior
            ));
        }
        // Tasks are confined to the region; a corner patch holds roughly a
        // quarter of the interior. Exact feasibility depends on robot
        // placement and is re-checked at episode init.
        if self.n_robots as usize + setting.total() > interior {
            return fail(format!(
                "{} robots + {} tasks exceed {} interior cells",
                self.n_robots,
                setting.total(),
                interior
            ));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding; embedded in output files so
    /// results are traceable to an exact configuration.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }
}

/// A named initial task mix: how many level-1/2/3 tasks an episode starts
/// with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSetting {
    pub name: &'static str,
    /// Counts per level, index 0 = level 1.
    pub counts: [u16; 3],
}

impl TaskSetting {
    pub const fn new(name: &'static str, counts: [u16; 3]) -> Self {
        TaskSetting { name, counts }
    }

    /// The full catalog: easy/medium/hard plus the homogeneous 4xM2 scale-up.
    pub const CATALOG: [TaskSetting; 10] = [
        TaskSetting::new("E1", [15, 0, 0]),
        TaskSetting::new("E2", [10, 0, 0]),
        TaskSetting::new("E3", [5, 5, 0]),
        TaskSetting::new("M1", [6, 4, 4]),
        TaskSetting::new("M2", [4, 3, 3]),
        TaskSetting::new("M3", [2, 2, 1]),
        TaskSetting::new("H1", [0, 5, 5]),
        TaskSetting::new("H2", [0, 0, 10]),
        TaskSetting::new("H3", [0, 0, 5]),
        TaskSetting::new("4xM2", [16, 12, 12]),
    ];

    /// The nine evaluation settings (everything except 4xM2).
    pub fn evaluation_matrix() -> Vec<TaskSetting> {
        Self::CATALOG
            .iter()
            .filter(|s| s.name != "4xM2")
            .cloned()
            .collect()
    }

    /// Looks a setting up by catalog name. Two extra forms are accepted:
    /// "none" resolves to an empty mix (no initial tasks), and "n1/n2/n3"
    /// (e.g. "64/48/48") to explicit per-level counts, which scalability
    /// sweeps use for mixes outside the catalog.
    pub fn by_name(name: &str) -> Option<TaskSetting> {
        if name == "none" {
            return Some(TaskSetting::new("none", [0, 0, 0]));
        }
        if let Some(setting) = Self::CATALOG.iter().find(|s| s.name == name) {
            return Some(setting.clone());
        }
        let parts: Vec<&str> = name.split('/').collect();
        if parts.len() == 3 {
            let mut counts = [0u16; 3];
            for (slot, part) in counts.iter_mut().zip(&parts) {
                *slot = part.parse().ok()?;
            }
            return Some(TaskSetting::new("custom", counts));
        }
        None
    }

    pub fn total(&self) -> usize {
        self.counts.iter().map(|&c| c as usize).sum()
    }

    pub fn max_level(&self) -> u8 {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, _)| i as u8 + 1)
            .max()
            .unwrap_or(1)
    }
}
