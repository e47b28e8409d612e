use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use avcontrol::agent::{train, ActionMode, Checkpoint, PolicyController};
use avcontrol::metrics::{
    comparison_table, evaluate_baseline, evaluate_policy, export_time_space, fmt9,
    learning_curve_csv, learning_curve_summary, run_episode, MetricsAccumulator, MetricsSummary,
};
use avcontrol::solver::{run, RunOptions};
use avcontrol::{Error, ExperimentConfig, Result, TrafficEnv};

#[derive(Parser)]
#[command(name = "avcontrol", version, about = "Mixed-autonomy traffic simulation and control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment file (JSON). Defaults to the built-in stop-and-go benchmark.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if absent.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Open-loop simulation under a constant or piecewise-constant command.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Constant commanded speed.
        #[arg(long, conflicts_with = "schedule")]
        speed: Option<f64>,
        /// CSV with header `t,v`; each speed holds from its time onward.
        #[arg(long)]
        schedule: Option<PathBuf>,
        /// Keep every n-th solver step in the time-space export.
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Train a policy with PPO.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iterations: Option<usize>,
        /// Collect rollouts on a single thread.
        #[arg(long)]
        sequential: bool,
        /// Overwrite existing checkpoints.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Act with the policy mean instead of sampling.
        #[arg(long)]
        deterministic: bool,
        #[arg(long, default_value_t = 5)]
        episodes: usize,
    },
    /// Tabulate checkpoints against the no-control baseline.
    Compare {
        #[command(flatten)]
        common: Common,
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        deterministic: bool,
        #[arg(long, default_value_t = 5)]
        episodes: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate {
            common,
            speed,
            schedule,
            stride,
        } => simulate(&common, speed, schedule.as_deref(), stride),
        Command::Train {
            common,
            iterations,
            sequential,
            force,
        } => train_cmd(&common, iterations, sequential, force),
        Command::Eval {
            common,
            checkpoint,
            deterministic,
            episodes,
        } => eval(&common, &checkpoint, deterministic, episodes),
        Command::Compare {
            common,
            checkpoints,
            deterministic,
            episodes,
        } => compare(&common, &checkpoints, deterministic, episodes),
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.scenario.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mode_of(deterministic: bool) -> ActionMode {
    if deterministic {
        ActionMode::Deterministic
    } else {
        ActionMode::Stochastic
    }
}

fn mode_name(mode: ActionMode) -> &'static str {
    match mode {
        ActionMode::Deterministic => "deterministic",
        ActionMode::Stochastic => "stochastic",
    }
}

fn parse_schedule(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next().map(|h| h.replace(' ', "")) {
        Some(h) if h == "t,v" => {}
        other => return Err(bad(format!("expected header `t,v`, found {other:?}"))),
    }
    let mut points = Vec::new();
    for (k, line) in lines.enumerate() {
        let (t, v) = line
            .split_once(',')
            .ok_or_else(|| bad(format!("row {}: expected two columns", k + 1)))?;
        let t: f64 = t.trim().parse().map_err(|e| bad(format!("row {}: {e}", k + 1)))?;
        let v: f64 = v.trim().parse().map_err(|e| bad(format!("row {}: {e}", k + 1)))?;
        if let Some(&(prev, _)) = points.last() {
            if !(t > prev) {
                return Err(bad(format!("row {}: times must increase", k + 1)));
            }
        }
        points.push((t, v));
    }
    if points.is_empty() {
        return Err(bad("schedule has no rows".into()));
    }
    Ok(points)
}

fn simulate(common: &Common, speed: Option<f64>, schedule: Option<&Path>, stride: usize) -> Result<()> {
    let cfg = load_config(common)?;
    let points = match (speed, schedule) {
        (_, Some(p)) => parse_schedule(p)?,
        (Some(v), None) => vec![(0.0, v)],
        (None, None) => vec![(0.0, cfg.scenario.flow.v_max)],
    };
    if points.iter().any(|&(_, v)| !v.is_finite()) {
        return Err(Error::Config(vec!["commanded speeds must be finite".into()]));
    }
    prepare_out(&common.out)?;

    let mut sim = cfg.scenario.build()?.into_simulation()?;
    let p = *sim.params();
    let w = cfg.env.reward;
    let dt_ctrl = cfg.scenario.dt_ctrl;
    let mut acc = MetricsAccumulator::new();
    let mut last_command = None;
    let trace = run(
        &mut sim,
        cfg.scenario.horizon,
        |t| {
            points
                .iter()
                .take_while(|&&(tk, _)| tk <= t)
                .last()
                .unwrap_or(&points[0])
                .1
        },
        RunOptions {
            cfl: cfg.env.cfl,
            stride,
        },
        |s, report| {
            let ego = report.av_interface.map_or(s.av().y_dot, |i| i.y_dot);
            acc.record_state(s.state(), ego, &p);
            acc.record_reward(avcontrol::env::reward(s.state(), s.av(), &w, &p) * report.dt / dt_ctrl);
            if last_command != Some(s.av().v_cmd) {
                acc.record_command(s.av().v_cmd);
                last_command = Some(s.av().v_cmd);
            }
        },
    )?;
    if trace.len() < 2 {
        return Err(Error::Domain("simulation produced an empty trace".into()));
    }
    let metrics = MetricsSummary::from_episodes(&[acc.finish(&p)?])?;
    export_time_space(&trace, &common.out.join("time_space.csv"))?;
    write(&common.out.join("metrics.txt"), &metrics.to_key_values("simulate"))?;
    print!("{}", comparison_table(&[("simulate".into(), metrics)]));
    Ok(())
}

fn train_cmd(common: &Common, iterations: Option<usize>, sequential: bool, force: bool) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(n) = iterations {
        cfg.ppo.iterations = n;
    }
    if sequential {
        cfg.ppo.workers = 1;
    }
    cfg.validate()?;
    prepare_out(&common.out)?;
    let ck_path = common.out.join("checkpoint.json");
    if ck_path.exists() && !force {
        return Err(Error::io(
            &ck_path,
            std::io::Error::new(
                ErrorKind::AlreadyExists,
                "checkpoint exists; pass --force to overwrite",
            ),
        ));
    }
    let seed = cfg.scenario.seed;
    let save = |trainer: &avcontrol::Trainer| -> Result<()> {
        let mut ck = Checkpoint::new(trainer.clone(), seed);
        ck.experiment = Some(cfg.clone());
        ck.save(&ck_path)
    };
    let (scenario, env_cfg) = (cfg.scenario.clone(), cfg.env);
    let initial = avcontrol::Trainer::new(
        TrafficEnv::new(scenario.clone(), env_cfg)?.observation_dim(),
        cfg.ppo,
        seed,
    )?;
    save(&initial)?;
    let trainer = train(
        || TrafficEnv::new(scenario.clone(), env_cfg),
        cfg.ppo,
        seed,
        |t, report| {
            eprintln!(
                "iteration {:>4}  return {:>12.6}  kl {:.2e}",
                report.iteration, report.mean_return, report.stats.approx_kl
            );
            save(t)
        },
    )?;
    write(&common.out.join("curve.csv"), &learning_curve_csv(&trainer.curve))?;

    let mut summary = format!("iterations={}\nseed={seed}\n", trainer.iteration);
    match learning_curve_summary(&trainer.curve) {
        Ok(s) => {
            summary.push_str(&format!(
                "baseline_return={}\nbest_smoothed_return={}\nimprovement_fraction={}\n",
                fmt9(s.baseline_return),
                fmt9(s.best_smoothed_return),
                fmt9(s.improvement_fraction)
            ));
        }
        Err(e) => summary.push_str(&format!("curve_summary=unavailable ({e})\n")),
    }
    if trainer.curve.len() >= 10 {
        let tail = &trainer.curve[trainer.curve.len() - 10..];
        summary.push_str(&format!("final10_mean_return={}\n", fmt9(tail.iter().sum::<f64>() / 10.0)));
    }
    let base = evaluate_baseline(&scenario, &env_cfg, seed)?;
    summary.push_str(&format!("baseline_episode_return={}\n", fmt9(base.mean.episode_return)));
    write(&common.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn eval(common: &Common, checkpoint: &Path, deterministic: bool, episodes: usize) -> Result<()> {
    let cfg = load_config(common)?;
    let ck = Checkpoint::load(checkpoint)?;
    let mode = mode_of(deterministic);
    prepare_out(&common.out)?;
    let seed = cfg.scenario.seed;
    let summary = evaluate_policy(&ck.trainer.policy, mode, &cfg.scenario, &cfg.env, episodes, seed)?;

    let mut env = TrafficEnv::new(cfg.scenario.clone(), cfg.env)?;
    let mut ctl = PolicyController::new(&ck.trainer.policy, mode, seed);
    let (_, trace) = run_episode(&mut env, &mut ctl, seed, Some(1))?;

    let name = mode_name(mode);
    export_time_space(&trace, &common.out.join(format!("time_space_{name}.csv")))?;
    write(&common.out.join(format!("metrics_{name}.txt")), &summary.to_key_values(name))?;
    print!("{}", comparison_table(&[(name.into(), summary)]));
    Ok(())
}

fn row_label(ck: &Checkpoint, path: &Path) -> String {
    match &ck.experiment {
        Some(e) => {
            let w = e.env.reward;
            format!("[{}, {}, {}]", w.w1, w.w2, w.w3)
        }
        None => path.display().to_string(),
    }
}

fn compare(common: &Common, checkpoints: &[PathBuf], deterministic: bool, episodes: usize) -> Result<()> {
    let cfg = load_config(common)?;
    let mode = mode_of(deterministic);
    let seed = cfg.scenario.seed;
    let loaded = checkpoints
        .iter()
        .map(|p| Checkpoint::load(p).map(|c| (p, c)))
        .collect::<Result<Vec<_>>>()?;
    prepare_out(&common.out)?;

    let mut rows = vec![(
        "No Control".to_string(),
        evaluate_baseline(&cfg.scenario, &cfg.env, seed)?,
    )];
    for (path, ck) in &loaded {
        let s = evaluate_policy(&ck.trainer.policy, mode, &cfg.scenario, &cfg.env, episodes, seed)?;
        rows.push((row_label(ck, path), s));
    }
    let table = comparison_table(&rows);
    let kv: String = rows.iter().map(|(l, s)| s.to_key_values(l)).collect::<Vec<_>>().join("\n");
    write(&common.out.join("compare.txt"), &table)?;
    write(&common.out.join("compare_metrics.txt"), &kv)?;
    print!("{table}");
    Ok(())
}
