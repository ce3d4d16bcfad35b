//! `dilemma-forge`: run experiments, compare runs and plot learning curves.

mod config;
mod svg;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dilemma_forge::harness::{
    self, episode_sentinel, write_audit_jsonl, write_episodes_csv, write_summary_csv, RunRecord,
};
use dilemma_forge::{aggregate, GameSpec, Population, Summary};
use serde::{Deserialize, Serialize};

use config::ConfigError;

#[derive(Parser)]
#[command(
    name = "dilemma-forge",
    version,
    about = "Incentive manipulation experiments in social dilemmas"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config and write records, summary and manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing run directory.
        #[arg(long)]
        force: bool,
        /// Edit a config value, e.g. `seeds=[1,2]` or `agents[0].mode=reverse`.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Trials run in parallel.
        #[arg(long, env = "DILEMMA_FORGE_JOBS")]
        jobs: Option<usize>,
    },
    /// Compare an attack run against a baseline run of the same game.
    Compare {
        baseline: PathBuf,
        attack: PathBuf,
        /// Where to write the report and curves (default: `<attack>/compare`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render mean ± std curves of a run as SVG.
    Plot {
        run_dir: PathBuf,
        #[arg(long = "metric", value_enum, default_values_t = [Metric::Success])]
        metrics: Vec<Metric>,
        /// Moving-average window (default: the run's smoothing_window).
        #[arg(long)]
        smooth: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Metric {
    #[value(name = "success")]
    Success,
    #[value(name = "steps")]
    Steps,
    #[value(name = "env_return")]
    EnvReturn,
    #[value(name = "total_return")]
    TotalReturn,
}

impl Metric {
    fn file_name(self) -> &'static str {
        match self {
            Metric::Success => "success_rate.svg",
            Metric::Steps => "steps.svg",
            Metric::EnvReturn => "env_return.svg",
            Metric::TotalReturn => "total_return.svg",
        }
    }

    fn axis_label(self) -> &'static str {
        match self {
            Metric::Success => "success rate",
            Metric::Steps => "episode length (steps)",
            Metric::EnvReturn => "environment return per episode",
            Metric::TotalReturn => "total return per episode",
        }
    }
}

/// Everything `plot` and `compare` need, stored next to the raw records.
#[derive(Serialize, Deserialize)]
struct RunSummary {
    game: GameSpec,
    modes: Vec<String>,
    smoothing_window: usize,
    convergence_window: usize,
    convergence_threshold: f64,
    #[serde(flatten)]
    summary: Summary,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    version: String,
    wall_time_secs: f64,
    config_source: String,
    game: String,
    seeds: Vec<u64>,
    episodes: usize,
}

const ARTIFACTS: [&str; 8] = [
    "config.json",
    "manifest.json",
    "episodes.csv",
    "iterations.csv",
    "audit.jsonl",
    "summary.csv",
    "summary.json",
    "success_rate.svg",
];

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            force,
            overrides,
            jobs,
        } => cmd_run(&config, &out, force, &overrides, jobs),
        Command::Compare { baseline, attack, out } => cmd_compare(&baseline, &attack, out.as_deref()),
        Command::Plot {
            run_dir,
            metrics,
            smooth,
            out,
        } => cmd_plot(&run_dir, &metrics, smooth, out.as_deref()),
        Command::Validate { config, overrides } => cmd_validate(&config, &overrides),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

/// Prints to stdout, tolerating a closed pipe (`... | head`).
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|()| out.write_all(b"\n"));
}

fn cmd_validate(path: &Path, overrides: &[String]) -> Result<()> {
    let loaded = config::load(path, overrides)?;
    let c = &loaded.config;
    let modes: Vec<&str> = c.agents.iter().map(|a| a.mode.name()).collect();
    emit(&format!(
        "{}: ok ({}, agents [{}], {} seeds x {} episodes, config hash {})",
        loaded.source,
        c.game.label(),
        modes.join(", "),
        c.seeds.len(),
        c.episodes,
        loaded.hash()
    ));
    Ok(())
}

fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let occupied = fs::read_dir(out)
            .with_context(|| format!("cannot read {}", out.display()))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(ConfigError(format!(
                "{} already exists and is not empty; pass --force to overwrite it",
                out.display()
            ))
            .into());
        }
        for name in ARTIFACTS {
            let p = out.join(name);
            if p.exists() {
                fs::remove_file(&p)?;
            }
        }
        for dir in ["checkpoints", "params"] {
            let p = out.join(dir);
            if p.exists() {
                fs::remove_dir_all(&p)?;
            }
        }
    }
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    Ok(())
}

fn save_population(dir: &Path, pop: &Population) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    for (j, a) in pop.agents.iter().enumerate() {
        a.theta.save(
            &dir.join(format!("agent{j}.theta.bin")),
            &dir.join(format!("agent{j}.theta.json")),
        )?;
        a.eta.save(
            &dir.join(format!("agent{j}.eta.bin")),
            &dir.join(format!("agent{j}.eta.json")),
        )?;
    }
    Ok(())
}

fn write_iterations_csv(path: &Path, records: &[RunRecord], n_agents: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["seed".to_string(), "iteration".into(), "episodes_done".into()];
    header.extend((0..n_agents).map(|j| format!("policy_grad_norm_{j}")));
    w.write_record(&header)?;
    for r in records {
        for (k, it) in r.iterations.iter().enumerate() {
            let mut row = vec![r.seed.to_string(), (k + 1).to_string(), it.episodes_done.to_string()];
            row.extend(
                it.policy_grad_norms
                    .iter()
                    .map(|g| g.map_or(String::new(), |v| v.to_string())),
            );
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_run(path: &Path, out: &Path, force: bool, overrides: &[String], jobs: Option<usize>) -> Result<()> {
    let loaded = config::load(path, overrides)?;
    let config = &loaded.config;
    prepare_out_dir(out, force)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(config)?)?;

    let jobs = jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    eprintln!(
        "running {} seeds of {} x {} episodes on {jobs} threads",
        config.seeds.len(),
        config.game.label(),
        config.episodes
    );
    let start = Instant::now();
    let checkpoint_root = out.join("checkpoints");
    let on_checkpoint = |seed: u64, episodes: usize, pop: &Population| {
        let dir = checkpoint_root
            .join(format!("seed{seed}"))
            .join(format!("episode{episodes}"));
        if let Err(e) = save_population(&dir, pop) {
            eprintln!("warning: checkpoint {} not written: {e}", dir.display());
        }
    };
    let records = harness::run_trials_with(config, jobs, &on_checkpoint).context("training failed")?;
    let wall_time = start.elapsed().as_secs_f64();

    write_episodes_csv(&out.join("episodes.csv"), &records)?;
    write_iterations_csv(&out.join("iterations.csv"), &records, config.n_agents())?;
    write_audit_jsonl(&out.join("audit.jsonl"), &records)?;
    for r in &records {
        let dir = out.join("params").join(format!("seed{}", r.seed));
        fs::create_dir_all(&dir)?;
        for (j, (theta, eta)) in r.final_params.iter().enumerate() {
            theta.save(
                &dir.join(format!("agent{j}.theta.bin")),
                &dir.join(format!("agent{j}.theta.json")),
            )?;
            eta.save(
                &dir.join(format!("agent{j}.eta.bin")),
                &dir.join(format!("agent{j}.eta.json")),
            )?;
        }
    }
    let summary = aggregate(&records, config.convergence_window, config.convergence_threshold);
    write_summary_csv(&out.join("summary.csv"), &summary)?;
    let run_summary = RunSummary {
        game: config.game.clone(),
        modes: config.agents.iter().map(|a| a.mode.name().to_string()).collect(),
        smoothing_window: config.smoothing_window,
        convergence_window: config.convergence_window,
        convergence_threshold: config.convergence_threshold,
        summary,
    };
    fs::write(out.join("summary.json"), serde_json::to_string(&run_summary)?)?;
    let manifest = Manifest {
        config_hash: loaded.hash(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_secs: wall_time,
        config_source: loaded.source.clone(),
        game: config.game.label(),
        seeds: config.seeds.clone(),
        episodes: config.episodes,
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;

    let s = &run_summary.summary;
    emit(&format!(
        "{}: final success {:.3}, median convergence {} ({:.1}s)",
        out.display(),
        s.final_success,
        episode_sentinel::format(s.median_convergence),
        wall_time
    ));
    Ok(())
}

fn load_summary(dir: &Path) -> Result<RunSummary> {
    let path = dir.join("summary.json");
    let text = fs::read_to_string(&path).map_err(|e| {
        ConfigError(format!(
            "{} has no run records ({}: {e})",
            dir.display(),
            path.display()
        ))
    })?;
    let run: RunSummary = serde_json::from_str(&text)
        .map_err(|e| ConfigError(format!("{} is not a run summary: {e}", path.display())))?;
    if run.summary.episodes == 0 || run.summary.seeds.is_empty() {
        return Err(ConfigError(format!("{} holds an empty record set", dir.display())).into());
    }
    Ok(run)
}

fn metric_series(run: &RunSummary, metric: Metric, window: usize, prefix: &str) -> Vec<svg::Series> {
    let s = &run.summary;
    let per_agent = |mean: &[Vec<f64>], std: &[Vec<f64>]| -> Vec<svg::Series> {
        (0..s.n_agents)
            .map(|j| svg::Series {
                label: format!("{prefix}agent {j} ({})", run.modes.get(j).map_or("?", |m| m.as_str())),
                mean: svg::smooth(&mean.iter().map(|row| row[j]).collect::<Vec<_>>(), window),
                std: svg::smooth(&std.iter().map(|row| row[j]).collect::<Vec<_>>(), window),
            })
            .collect()
    };
    match metric {
        Metric::Success => vec![svg::Series {
            label: format!("{prefix}success"),
            mean: svg::smooth(&s.mean_success, window),
            std: svg::smooth(&s.std_success, window),
        }],
        Metric::Steps => vec![svg::Series {
            label: format!("{prefix}steps"),
            mean: svg::smooth(&s.mean_steps, window),
            std: svg::smooth(&s.std_steps, window),
        }],
        Metric::EnvReturn => per_agent(&s.mean_env_return, &s.std_env_return),
        Metric::TotalReturn => per_agent(&s.mean_total_return, &s.std_total_return),
    }
}

fn cmd_plot(run_dir: &Path, metrics: &[Metric], smooth: Option<usize>, out: Option<&Path>) -> Result<()> {
    let run = load_summary(run_dir)?;
    let out = out.unwrap_or(run_dir);
    fs::create_dir_all(out)?;
    let window = smooth.unwrap_or(run.smoothing_window).max(1);
    for &metric in metrics {
        let chart = svg::Chart {
            title: format!("{} over {} seeds", run.game.label(), run.summary.seeds.len()),
            y_label: metric.axis_label().to_string(),
            y_range: (metric == Metric::Success).then_some((0.0, 1.0)),
            series: metric_series(&run, metric, window, ""),
        };
        let path = out.join(metric.file_name());
        fs::write(&path, chart.render())?;
        emit(&format!("wrote {}", path.display()));
    }
    Ok(())
}

/// One row of a comparison table.
#[derive(Serialize)]
struct Row {
    metric: String,
    baseline: String,
    attack: String,
    delta: String,
    relative_delta: String,
}

fn numeric_row(metric: String, b: f64, a: f64) -> Row {
    let delta = a - b;
    let relative = if delta == 0.0 {
        "0".to_string()
    } else if b == 0.0 {
        "n/a".to_string()
    } else {
        format!("{:.4}", delta / b.abs())
    };
    Row {
        metric,
        baseline: format!("{b:.4}"),
        attack: format!("{a:.4}"),
        delta: format!("{delta:.4}"),
        relative_delta: relative,
    }
}

fn convergence_row(b: Option<usize>, a: Option<usize>) -> (Row, Option<f64>) {
    let fmt = episode_sentinel::format;
    match (b, a) {
        (Some(b), Some(a)) => {
            let mut row = numeric_row("median convergence episode".into(), b as f64, a as f64);
            row.baseline = b.to_string();
            row.attack = a.to_string();
            row.delta = (a as i64 - b as i64).to_string();
            (row, (a > 0).then(|| b as f64 / a as f64))
        }
        _ => {
            let both = if b == a {
                "0".to_string()
            } else {
                format!("{} vs {}", fmt(b), fmt(a))
            };
            (
                Row {
                    metric: "median convergence episode".into(),
                    baseline: fmt(b),
                    attack: fmt(a),
                    delta: both.clone(),
                    relative_delta: both,
                },
                None,
            )
        }
    }
}

fn cmd_compare(baseline_dir: &Path, attack_dir: &Path, out: Option<&Path>) -> Result<()> {
    let base = load_summary(baseline_dir)?;
    let attack = load_summary(attack_dir)?;
    if base.game != attack.game {
        return Err(ConfigError(format!(
            "runs are not comparable: {} was trained on {} ({:?}) but {} on {} ({:?})",
            baseline_dir.display(),
            base.game.label(),
            base.game,
            attack_dir.display(),
            attack.game.label(),
            attack.game
        ))
        .into());
    }
    let (b, a) = (&base.summary, &attack.summary);
    let (conv, speedup) = convergence_row(b.median_convergence, a.median_convergence);
    let mut rows = vec![
        conv,
        numeric_row("final success".into(), b.final_success, a.final_success),
    ];
    for j in 0..b.n_agents {
        rows.push(numeric_row(
            format!("final env return agent {j}"),
            b.final_env_return[j],
            a.final_env_return[j],
        ));
    }
    for j in 0..b.n_agents {
        rows.push(numeric_row(
            format!("final total return agent {j}"),
            b.final_total_return[j],
            a.final_total_return[j],
        ));
    }

    let widths: Vec<usize> = (0..5)
        .map(|c| {
            rows.iter()
                .map(|r| [&r.metric, &r.baseline, &r.attack, &r.delta, &r.relative_delta][c].len())
                .chain([["metric", "baseline", "attack", "delta", "relative"][c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: [&str; 5]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    emit(&format!(
        "{} ({}) vs {} ({})",
        baseline_dir.display(),
        base.modes.join(","),
        attack_dir.display(),
        attack.modes.join(",")
    ));
    emit(&line(["metric", "baseline", "attack", "delta", "relative"]));
    for r in &rows {
        emit(&line([&r.metric, &r.baseline, &r.attack, &r.delta, &r.relative_delta]));
    }
    if let Some(s) = speedup {
        emit(&format!("convergence speedup (baseline / attack): {s:.3}"));
    }

    let out = out.map(Path::to_path_buf).unwrap_or_else(|| attack_dir.join("compare"));
    fs::create_dir_all(&out)?;
    let mut w = csv::Writer::from_path(out.join("compare.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    fs::write(
        out.join("compare.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "baseline": baseline_dir.display().to_string(),
            "attack": attack_dir.display().to_string(),
            "rows": rows,
            "speedup": speedup,
        }))?,
    )?;
    let window = base.smoothing_window.max(attack.smoothing_window).max(1);
    for metric in [Metric::Success, Metric::TotalReturn] {
        let mut series = metric_series(&base, metric, window, "baseline ");
        series.extend(metric_series(&attack, metric, window, "attack "));
        let chart = svg::Chart {
            title: format!("{}: baseline vs attack", base.game.label()),
            y_label: metric.axis_label().to_string(),
            y_range: (metric == Metric::Success).then_some((0.0, 1.0)),
            series,
        };
        fs::write(out.join(metric.file_name()), chart.render())?;
    }
    emit(&format!("wrote {}", out.display()));
    Ok(())
}
