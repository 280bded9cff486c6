//! Command-line front end for the simulator: experiment runs, scalability
//! sweeps, the evaluation matrix, generalizability scoring, planner
//! debugging, and a line-protocol server for external policies.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use coalsim_core::bridge::{self, LineTransport, ServedEpisode};
use coalsim_core::config::{EnvConfig, RegionConfig, SpawnConfig};
use coalsim_core::grid::Position;
use coalsim_core::harness::{
    self, EvalCell, ExperimentPlan, MetricsRecord, RunMeta, SweepResult,
};
use coalsim_core::pcfa::PcfaController;
use coalsim_core::plan::{is_blocked_for, GoalKind, PlanQuery};
use coalsim_core::runner::{derive_seed, Episode, PolicyChoice, PolicySpec};

#[derive(Parser)]
#[command(
    name = "coalsim",
    version,
    about = "Deterministic grid-world simulator for multi-robot coalition formation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment plan and write summary + per-episode records.
    Run(RunArgs),
    /// Rescale the world over a list of robot counts at fixed densities.
    Sweep(SweepArgs),
    /// Run the full task-setting evaluation matrix.
    Eval(EvalArgs),
    /// Score evaluation results against a reference result set.
    Score(ScoreArgs),
    /// Trace one path search and print the expansion order.
    PlanDebug(PlanDebugArgs),
    /// Serve episodes to an external policy over the line protocol.
    Serve(ServeArgs),
}

/// Environment selection. A config file provides the base values; every
/// flag below overrides the corresponding key.
#[derive(Args)]
struct ConfigArgs {
    /// TOML config file with environment keys.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Built-in base config: "nonhomogeneous" or "homogeneous".
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Grid side length, including the wall ring.
    #[arg(long)]
    width: Option<u16>,
    /// Number of robots.
    #[arg(long)]
    n_robots: Option<u16>,
    /// View radius (Chebyshev).
    #[arg(long)]
    view_range: Option<u16>,
    /// Communication radius (Chebyshev); also the observation window radius.
    #[arg(long)]
    comm_range: Option<u16>,
    /// Highest task level.
    #[arg(long)]
    l_max: Option<u8>,
    /// Task setting name (e.g. "M2", "4xM2", "none", or "n1/n2/n3" counts).
    #[arg(long)]
    task_setting: Option<String>,
    /// Episode length in steps.
    #[arg(long)]
    horizon: Option<u32>,
    /// Base random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Switch to Bernoulli spawning with this per-cell probability.
    #[arg(long, value_name = "P")]
    spawn_p: Option<f64>,
    /// Switch to instant respawn (completed tasks reappear elsewhere).
    #[arg(long)]
    instant_respawn: bool,
    /// Task region: "homogeneous" or "corner-patch".
    #[arg(long)]
    region: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<EnvConfig> {
        let mut cfg = match (&self.config, self.preset.as_deref()) {
            (Some(path), _) => EnvConfig::from_toml_file(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            (None, None | Some("nonhomogeneous")) => EnvConfig::preset_nonhomogeneous(),
            (None, Some("homogeneous")) => EnvConfig::preset_homogeneous(),
            (None, Some(other)) => {
                bail!("unknown preset {other:?}; expected nonhomogeneous or homogeneous")
            }
        };
        if let Some(v) = self.width {
            cfg.width = v;
        }
        if let Some(v) = self.n_robots {
            cfg.n_robots = v;
        }
        if let Some(v) = self.view_range {
            cfg.view_range = v;
        }
        if let Some(v) = self.comm_range {
            cfg.comm_range = v;
        }
        if let Some(v) = self.l_max {
            cfg.l_max = v;
        }
        if let Some(v) = &self.task_setting {
            cfg.task_setting = v.clone();
        }
        if let Some(v) = self.horizon {
            cfg.horizon = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(p) = self.spawn_p {
            cfg.spawn = SpawnConfig::Bernoulli { p };
        }
        if self.instant_respawn {
            cfg.spawn = SpawnConfig::Instant;
        }
        if let Some(region) = &self.region {
            cfg.region = match region.as_str() {
                "homogeneous" => RegionConfig::Homogeneous,
                "corner-patch" | "corner_patch" => RegionConfig::CornerPatch,
                other => bail!("unknown region {other:?}; expected homogeneous or corner-patch"),
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Plan shape: which policy, which seeds, how many episodes per seed.
#[derive(Args)]
struct PlanArgs {
    /// Policy: random, greedy, first-legal, or pcfa.
    #[arg(long, default_value = "greedy")]
    policy: PolicyChoice,
    /// Comma-separated seed-group list; defaults to five consecutive seeds
    /// starting at the config seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Episodes per seed group.
    #[arg(long, default_value_t = 96)]
    episodes_per_seed: u32,
    /// Greedy: hysteresis factor a challenger must beat.
    #[arg(long)]
    hysteresis: Option<f64>,
    /// Greedy: exponent on task level in the score.
    #[arg(long)]
    level_exponent: Option<f64>,
    /// Greedy: additive distance offset in the score.
    #[arg(long)]
    distance_offset: Option<f64>,
}

impl PlanArgs {
    fn policy_spec(&self) -> PolicySpec {
        let mut spec = PolicySpec::new(self.policy);
        if let Some(v) = self.hysteresis {
            spec.greedy.hysteresis = v;
        }
        if let Some(v) = self.level_exponent {
            spec.greedy.level_exponent = v;
        }
        if let Some(v) = self.distance_offset {
            spec.greedy.distance_offset = v;
        }
        spec
    }

    fn plan(&self, config: EnvConfig) -> ExperimentPlan {
        let seeds = if self.seeds.is_empty() {
            (0..5).map(|i| config.seed + i).collect()
        } else {
            self.seeds.clone()
        };
        ExperimentPlan::new(config, self.policy_spec(), seeds, self.episodes_per_seed)
    }
}

#[derive(Args)]
struct OutputArgs {
    /// Directory output files are written into.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Basename prefix for output files; defaults to the policy name.
    #[arg(long)]
    name: Option<String>,
}

impl OutputArgs {
    fn prepare(&self, default_name: &str) -> Result<(PathBuf, String)> {
        fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("creating {}", self.out_dir.display()))?;
        let name = self.name.clone().unwrap_or_else(|| default_name.to_string());
        Ok((self.out_dir.clone(), name))
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    plan: PlanArgs,
    #[command(flatten)]
    output: OutputArgs,
    /// With the pcfa policy: also write per-step coalition-ledger records
    /// (newline-delimited JSON) to this file for protocol debugging.
    #[arg(long, value_name = "FILE")]
    pcfa_ledger: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    plan: PlanArgs,
    #[command(flatten)]
    output: OutputArgs,
    /// Robots per cell; the grid is rescaled to hold this constant.
    #[arg(long, default_value_t = 0.1)]
    robot_density: f64,
    /// Tasks per cell.
    #[arg(long, default_value_t = 0.1)]
    task_density: f64,
    /// Comma-separated robot counts to sweep over.
    #[arg(long, value_delimiter = ',', default_value = "10,40,160,640,1000")]
    robots: Vec<u32>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    plan: PlanArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct ScoreArgs {
    /// JSON map of task-setting name to mean episodic reward.
    #[arg(long, value_name = "FILE")]
    results: PathBuf,
    /// JSON map of reference rewards to normalize against.
    #[arg(long, value_name = "FILE")]
    reference: PathBuf,
}

#[derive(Args)]
struct PlanDebugArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Robot whose position the search starts from.
    #[arg(long, default_value_t = 0)]
    robot: u16,
    /// Goal cell as "x,y". Task cells are approached, free cells entered.
    #[arg(long, value_parser = parse_position)]
    target: Position,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Number of episodes to serve before closing the session.
    #[arg(long, default_value_t = 1)]
    episodes: u32,
    /// Unix socket to listen on; without it the protocol runs over stdio.
    #[arg(long, value_name = "PATH")]
    socket: Option<PathBuf>,
    /// Seconds to wait for a client line before aborting.
    #[arg(long, default_value_t = 30.0)]
    timeout_secs: f64,
}

fn parse_position(s: &str) -> Result<Position, String> {
    let (x, y) = s
        .split_once(',')
        .ok_or_else(|| format!("expected \"x,y\", got {s:?}"))?;
    let x = x.trim().parse::<u16>().map_err(|e| e.to_string())?;
    let y = y.trim().parse::<u16>().map_err(|e| e.to_string())?;
    Ok(Position::new(x, y))
}

fn main() -> Result<()> {
    env_logger::init();
    match Cli::parse().command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Score(args) => cmd_score(args),
        Command::PlanDebug(args) => cmd_plan_debug(args),
        Command::Serve(args) => cmd_serve(args),
    }
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let plan = args.plan.plan(config);
    let (dir, name) = args.output.prepare(plan.policy.name())?;

    let metrics = harness::run_plan(&plan)?;
    let meta = RunMeta::for_plan(&plan);

    let episodes_path = dir.join(format!("{name}_episodes.ndjson"));
    harness::write_episode_records(&episodes_path, &meta, &metrics.episodes)?;
    let (columns, row) = harness::summary_row(&metrics);
    let summary_path = dir.join(format!("{name}_summary.csv"));
    harness::write_summary_csv(&summary_path, &meta, &columns, &[row])?;

    if let Some(path) = &args.pcfa_ledger {
        dump_pcfa_ledger(&plan, path)?;
        println!("wrote coalition ledger to {}", path.display());
    }

    print_metrics(&plan.policy.name().to_string(), &metrics);
    println!(
        "wrote {} and {}",
        summary_path.display(),
        episodes_path.display()
    );
    fail_on_invalid(metrics.invalid_episodes)
}

/// Replays the plan's episodes sequentially with the coalition controller
/// and writes every step's ledger records. Determinism makes the replay
/// step-for-step identical to the recorded run.
fn dump_pcfa_ledger(plan: &ExperimentPlan, path: &Path) -> Result<()> {
    use std::io::Write;

    if plan.policy.choice != PolicyChoice::Pcfa {
        bail!("--pcfa-ledger requires --policy pcfa");
    }
    let mut config = plan.config.clone();
    config.horizon = plan.horizon;
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    let mut ordinal = 0u32;
    for &seed in &plan.seeds {
        for k in 0..plan.episodes_per_seed {
            let episode_seed = derive_seed(seed, k as u64);
            writeln!(
                out,
                "{}",
                serde_json::json!({
                    "episode": ordinal, "seed_group": seed, "episode_seed": episode_seed
                })
            )?;
            let mut ep = Episode::new(&config, episode_seed)?;
            let mut controller = PcfaController::new(&config);
            let mut targets = vec![Position::new(0, 0); config.n_robots as usize];
            for _ in 0..config.horizon {
                for d in controller.decide(&ep.world, &mut ep.planner) {
                    targets[d.robot as usize] = d.target;
                }
                for line in controller.ledger.dump_records() {
                    writeln!(out, "{line}")?;
                }
                ep.advance(&targets)?;
            }
            ordinal += 1;
        }
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let base = args.plan.plan(config);
    let (dir, name) = args.output.prepare("sweep")?;

    let sweep = harness::scalability_sweep(&base, args.robot_density, args.task_density, &args.robots)?;
    let meta = RunMeta::for_plan(&base);
    let summary_path = dir.join(format!("{name}_summary.csv"));
    write_sweep_csv(&summary_path, &meta, &sweep)?;

    for p in &sweep.points {
        println!(
            "N={:<5} width={:<4} tasks={}/{}/{}  mean reward {:.3} ± {:.3}  {:.3} ms/step",
            p.n,
            p.width,
            p.tasks[0],
            p.tasks[1],
            p.tasks[2],
            p.mean_reward,
            p.std_reward,
            p.ms_per_step
        );
    }
    println!(
        "fit: reward ≈ {:.4}·N + {:.4} (R² = {:.4})",
        sweep.fit.slope, sweep.fit.intercept, sweep.fit.r_squared
    );
    println!("wrote {}", summary_path.display());
    fail_on_invalid(sweep.points.iter().map(|p| p.invalid_episodes).sum())
}

fn write_sweep_csv(path: &Path, meta: &RunMeta, sweep: &SweepResult) -> Result<()> {
    let columns = [
        "n",
        "width",
        "tasks_l1",
        "tasks_l2",
        "tasks_l3",
        "mean_reward",
        "std_reward",
        "ms_per_step",
        "invalid",
        "fit_slope",
        "fit_intercept",
        "fit_r_squared",
    ];
    let rows: Vec<Vec<String>> = sweep
        .points
        .iter()
        .map(|p| {
            vec![
                p.n.to_string(),
                p.width.to_string(),
                p.tasks[0].to_string(),
                p.tasks[1].to_string(),
                p.tasks[2].to_string(),
                format!("{:.6}", p.mean_reward),
                format!("{:.6}", p.std_reward),
                format!("{:.6}", p.ms_per_step),
                p.invalid_episodes.to_string(),
                format!("{:.6}", sweep.fit.slope),
                format!("{:.6}", sweep.fit.intercept),
                format!("{:.6}", sweep.fit.r_squared),
            ]
        })
        .collect();
    harness::write_summary_csv(path, meta, &columns, &rows)?;
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let base = args.plan.plan(config);
    let (dir, name) = args.output.prepare(base.policy.name())?;

    let cells = harness::evaluation_matrix(&base)?;

    // Per-setting episode records, each under the meta of the plan that
    // actually produced it (the setting changes the config hash).
    for cell in &cells {
        let mut plan = base.clone();
        plan.config.task_setting = cell.setting.clone();
        let meta = RunMeta::for_plan(&plan);
        let path = dir.join(format!("{name}_{}_episodes.ndjson", cell.setting));
        harness::write_episode_records(&path, &meta, &cell.metrics.episodes)?;
    }

    let meta = RunMeta::for_plan(&base);
    let summary_path = dir.join(format!("{name}_eval_summary.csv"));
    write_eval_csv(&summary_path, &meta, &cells)?;

    // Mean rewards keyed by setting, directly consumable by `score`.
    let means: BTreeMap<&str, f64> = cells
        .iter()
        .map(|c| (c.setting.as_str(), c.metrics.mean_reward))
        .collect();
    let means_path = dir.join(format!("{name}_means.json"));
    fs::write(&means_path, serde_json::to_string_pretty(&means)?)?;

    for cell in &cells {
        print_metrics(&cell.setting, &cell.metrics);
    }
    println!(
        "wrote {}, {} and per-setting episode records in {}",
        summary_path.display(),
        means_path.display(),
        dir.display()
    );
    fail_on_invalid(cells.iter().map(|c| c.metrics.invalid_episodes).sum())
}

fn write_eval_csv(path: &Path, meta: &RunMeta, cells: &[EvalCell]) -> Result<()> {
    let mut columns = vec!["setting"];
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let (cols, row) = harness::summary_row(&cell.metrics);
        if columns.len() == 1 {
            columns.extend(cols);
        }
        let mut full = vec![cell.setting.clone()];
        full.extend(row);
        rows.push(full);
    }
    harness::write_summary_csv(path, meta, &columns, &rows)?;
    Ok(())
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    let results = read_reward_map(&args.results)?;
    let reference = read_reward_map(&args.reference)?;
    let score = harness::generalizability_score(&results, &reference)?;
    for (setting, reward) in &results {
        // generalizability_score has already rejected missing/zero refs.
        let reference = reference[setting];
        println!("{setting}: {reward:.3} / {reference:.3} = {:.4}", reward / reference);
    }
    println!("generalizability {score:.6}");
    Ok(())
}

fn read_reward_map(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_plan_debug(args: PlanDebugArgs) -> Result<()> {
    let config = args.config.resolve()?;
    if args.robot >= config.n_robots {
        bail!("robot {} out of range (n_robots = {})", args.robot, config.n_robots);
    }
    let mut episode = Episode::new(&config, config.seed)?;
    let start = episode.world.robot(args.robot).position();
    let goal = args.target;
    if goal.x >= config.width || goal.y >= config.width {
        bail!("target {goal} outside the {0}x{0} grid", config.width);
    }
    let kind = if episode.world.task_at(goal).is_some() {
        GoalKind::Adjacent
    } else {
        GoalKind::Enter
    };
    let query = PlanQuery { start, goal, kind };

    let world = &episode.world;
    let mut expansions = Vec::new();
    let path = episode.planner.astar_traced(
        query,
        |p| is_blocked_for(world, args.robot, goal, p),
        &mut expansions,
    );

    println!(
        "robot {} at {start}, goal {goal} ({})",
        args.robot,
        match kind {
            GoalKind::Enter => "enter free cell",
            GoalKind::Adjacent => "reach task adjacency",
        }
    );
    println!("expanded {} cells, in order:", expansions.len());
    for chunk in expansions.chunks(8) {
        let line: Vec<String> = chunk.iter().map(|p| p.to_string()).collect();
        println!("  {}", line.join(" "));
    }
    match &path {
        Some(p) => println!("path found, cost {} ({} cells)", p.cost, p.cells.len()),
        None => println!("no path"),
    }
    print_map(world, args.robot, goal, &expansions, path.as_ref().map(|p| &p.cells[..]));
    Ok(())
}

/// Prints the grid with the search overlaid: S start, G goal, * path,
/// o expanded, digits task levels, r other robots, # walls.
fn print_map(
    world: &coalsim_core::WorldState,
    robot: u16,
    goal: Position,
    expansions: &[Position],
    path: Option<&[Position]>,
) {
    let width = world.config().width;
    let start = world.robot(robot).position();
    let expanded: std::collections::HashSet<Position> = expansions.iter().copied().collect();
    let on_path: std::collections::HashSet<Position> =
        path.map(|cells| cells.iter().copied().collect()).unwrap_or_default();
    for y in 0..width {
        let mut line = String::with_capacity(2 * width as usize);
        for x in 0..width {
            let p = Position::new(x, y);
            let c = if p == start {
                'S'
            } else if p == goal {
                'G'
            } else if on_path.contains(&p) {
                '*'
            } else if p.is_wall(width) {
                '#'
            } else if let Some(task) = world.task_at(p) {
                char::from_digit(task.level as u32, 10).unwrap_or('?')
            } else if world.robot_at(p).is_some() {
                'r'
            } else if expanded.contains(&p) {
                'o'
            } else {
                '.'
            };
            line.push(c);
            line.push(' ');
        }
        println!("{line}");
    }
}

fn cmd_serve(args: ServeArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let timeout = Duration::from_secs_f64(args.timeout_secs);
    let served: Vec<ServedEpisode> = match &args.socket {
        Some(path) => {
            // A stale socket file from a previous run would block the bind.
            let _ = fs::remove_file(path);
            eprintln!("listening on {}", path.display());
            bridge::serve_unix(path, &config, args.episodes, false, timeout)?
        }
        None => {
            // stdout carries the protocol; progress goes to stderr.
            let mut transport = LineTransport::stdio(timeout);
            bridge::serve(&mut transport, &config, args.episodes, false)?
        }
    };
    for ep in &served {
        eprintln!(
            "episode {}: seed {} reward {} ({})",
            ep.episode,
            ep.seed,
            ep.reward,
            if ep.valid { "ok" } else { "invalid" }
        );
    }
    fail_on_invalid(served.iter().filter(|e| !e.valid).count() as u32)
}

fn print_metrics(label: &str, metrics: &MetricsRecord) {
    let interval = metrics
        .mean_revision_interval
        .map(|v| format!("{v:.2}"))
        .unwrap_or_else(|| "-".to_string());
    println!(
        "{label}: {} episodes, mean reward {:.3} ± {:.3} (95% CI), revision interval {}, {:.3} ms/step, {} invalid",
        metrics.episodes.len(),
        metrics.mean_reward,
        metrics.ci95(),
        interval,
        metrics.ms_per_step,
        metrics.invalid_episodes
    );
}

fn fail_on_invalid(invalid: u32) -> Result<()> {
    if invalid > 0 {
        bail!("{invalid} episode(s) did not complete validly");
    }
    Ok(())
}
