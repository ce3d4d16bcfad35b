//! Multi-seed experiment orchestration, convergence detection and
//! aggregation across seeds.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::admo::AuditRecord;
use crate::env::{EnvError, GameKind, GameSpec};
use crate::lio::{
    AgentBundle, AgentConfig, EpisodeMetrics, Population, Trainer, DEFAULT_BATCH_SIZE, DEFAULT_COST_WEIGHT,
};
use crate::manip::ManipulationMode;
use crate::nn::ParamVector;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn config_error(field: impl Into<String>, reason: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

pub const DEFAULT_CONVERGENCE_WINDOW: usize = 100;
pub const DEFAULT_CONVERGENCE_THRESHOLD: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub game: GameSpec,
    pub agents: Vec<AgentConfig>,
    pub episodes: usize,
    pub batch_size: usize,
    /// Incentive-cost weight `α` of honest givers.
    pub cost_weight: f64,
    pub seeds: Vec<u64>,
    /// Display smoothing for plots; stored series are never smoothed.
    pub smoothing_window: usize,
    pub convergence_window: usize,
    pub convergence_threshold: f64,
    /// Checkpoint period in episodes; 0 disables checkpoints.
    pub checkpoint_every: usize,
    /// Permit Bypass agents in the matrix games, where idling means
    /// defecting or hunting hare.
    pub allow_matrix_bypass: bool,
}

impl ExperimentConfig {
    /// Honest agents on `game` with default hyperparameters.
    pub fn new(game: GameSpec) -> Self {
        let agents = vec![AgentConfig::default(); game.n_agents];
        ExperimentConfig {
            game,
            agents,
            episodes: 1000,
            batch_size: DEFAULT_BATCH_SIZE,
            cost_weight: DEFAULT_COST_WEIGHT,
            seeds: (0..10).collect(),
            smoothing_window: 1,
            convergence_window: DEFAULT_CONVERGENCE_WINDOW,
            convergence_threshold: DEFAULT_CONVERGENCE_THRESHOLD,
            checkpoint_every: 0,
            allow_matrix_bypass: false,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.game.validate().map_err(|e| match e {
            EnvError::InvalidSpec { field, reason } => config_error(format!("game.{field}"), reason),
            other => config_error("game", other.to_string()),
        })?;
        if self.agents.len() != self.game.n_agents {
            return Err(config_error(
                "agents",
                format!(
                    "{} agents configured for a {}-agent game",
                    self.agents.len(),
                    self.game.n_agents
                ),
            ));
        }
        for (j, agent) in self.agents.iter().enumerate() {
            let field = |name: &str| format!("agents[{j}].{name}");
            if agent.policy_hidden.contains(&0) {
                return Err(config_error(field("policy_hidden"), "layer widths must be at least 1"));
            }
            if agent.incentive_hidden.contains(&0) {
                return Err(config_error(
                    field("incentive_hidden"),
                    "layer widths must be at least 1",
                ));
            }
            if !(agent.r_max > 0.0 && agent.r_max.is_finite()) {
                return Err(config_error(
                    field("r_max"),
                    format!("must be positive, got {}", agent.r_max),
                ));
            }
            for (name, lr) in [("lr_policy", agent.lr_policy), ("lr_incentive", agent.lr_incentive)] {
                if !(lr > 0.0 && lr.is_finite()) {
                    return Err(config_error(field(name), format!("must be positive, got {lr}")));
                }
            }
            agent
                .mode
                .validate(&self.game, agent.r_max)
                .map_err(|reason| config_error(field("mode"), reason))?;
            if agent.mode == ManipulationMode::Bypass
                && self.game.kind != GameKind::EscapeRoom
                && !self.allow_matrix_bypass
            {
                return Err(config_error(
                    field("mode"),
                    "bypass in a matrix game requires allow_matrix_bypass",
                ));
            }
        }
        if self.episodes == 0 {
            return Err(config_error("episodes", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(config_error("batch_size", "must be at least 1"));
        }
        if self.episodes < self.batch_size {
            return Err(config_error(
                "episodes",
                format!(
                    "{} episodes is fewer than one batch of {}",
                    self.episodes, self.batch_size
                ),
            ));
        }
        if !(self.cost_weight >= 0.0 && self.cost_weight.is_finite()) {
            return Err(config_error(
                "cost_weight",
                format!("must be non-negative, got {}", self.cost_weight),
            ));
        }
        if self.seeds.is_empty() {
            return Err(config_error("seeds", "at least one seed is required"));
        }
        let distinct: HashSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return Err(config_error("seeds", "seeds must be distinct"));
        }
        if self.smoothing_window == 0 {
            return Err(config_error("smoothing_window", "must be at least 1"));
        }
        if self.convergence_window == 0 {
            return Err(config_error("convergence_window", "must be at least 1"));
        }
        if !(self.convergence_threshold > 0.0 && self.convergence_threshold <= 1.0) {
            return Err(config_error(
                "convergence_threshold",
                format!("must lie in (0, 1], got {}", self.convergence_threshold),
            ));
        }
        Ok(())
    }

    pub fn n_agents(&self) -> usize {
        self.game.n_agents
    }
}

/// Training statistics of one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    /// Number of episodes completed after this iteration.
    pub episodes_done: usize,
    pub policy_grad_norms: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub episodes: Vec<EpisodeMetrics>,
    pub iterations: Vec<IterationStats>,
    pub audit: Vec<AuditRecord>,
    /// `(θ, η)` per agent at the end of training.
    pub final_params: Vec<(ParamVector, ParamVector)>,
}

impl RunRecord {
    pub fn success_series(&self) -> Vec<f64> {
        self.episodes.iter().map(|e| e.success).collect()
    }

    /// Mean of `f` over the last `window` episodes.
    pub fn final_mean(&self, window: usize, f: impl Fn(&EpisodeMetrics) -> f64) -> f64 {
        let tail = &self.episodes[self.episodes.len().saturating_sub(window.max(1))..];
        tail.iter().map(f).sum::<f64>() / tail.len() as f64
    }

    /// Mean policy-gradient norm of `agent` over iterations whose last
    /// episode falls in `from..=to`.
    pub fn mean_grad_norm(&self, agent: usize, from: usize, to: usize) -> Option<f64> {
        let norms: Vec<f64> = self
            .iterations
            .iter()
            .filter(|it| it.episodes_done >= from && it.episodes_done <= to)
            .filter_map(|it| it.policy_grad_norms[agent])
            .collect();
        if norms.is_empty() {
            None
        } else {
            Some(norms.iter().sum::<f64>() / norms.len() as f64)
        }
    }
}

/// Random streams of one trial, all derived from the trial seed.
struct TrialSeeds {
    policy: Vec<u64>,
    incentive: Vec<u64>,
    sampling: u64,
}

impl TrialSeeds {
    fn derive(seed: u64, n_agents: usize) -> Self {
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let policy = (0..n_agents).map(|_| master.next_u64()).collect();
        let incentive = (0..n_agents).map(|_| master.next_u64()).collect();
        let sampling = master.next_u64();
        TrialSeeds {
            policy,
            incentive,
            sampling,
        }
    }
}

pub fn build_population(config: &ExperimentConfig, seed: u64) -> Population {
    let seeds = TrialSeeds::derive(seed, config.n_agents());
    let agents = config
        .agents
        .iter()
        .enumerate()
        .map(|(j, a)| AgentBundle::new(&config.game, a, seeds.policy[j], seeds.incentive[j]))
        .collect();
    Population {
        spec: config.game.clone(),
        agents,
        cost_weight: config.cost_weight,
    }
}

/// Run one seed of `config`. `on_checkpoint` receives the episode count and
/// the population every `checkpoint_every` episodes.
pub fn run_trial_with(
    config: &ExperimentConfig,
    seed: u64,
    on_checkpoint: &mut dyn FnMut(usize, &Population),
) -> Result<RunRecord, HarnessError> {
    config.validate()?;
    let seeds = TrialSeeds::derive(seed, config.n_agents());
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.sampling);
    let mut trainer = Trainer::new(build_population(config, seed));

    let mut episodes = Vec::with_capacity(config.episodes);
    let mut iterations = Vec::new();
    let mut audit = Vec::new();
    let mut next_checkpoint = config.checkpoint_every;
    while episodes.len() < config.episodes {
        let batch = config.batch_size.min(config.episodes - episodes.len());
        let out = trainer.train_iteration(batch, &mut rng);
        episodes.extend(out.episodes);
        iterations.push(IterationStats {
            episodes_done: episodes.len(),
            policy_grad_norms: out.policy_grad_norms,
        });
        audit.extend(out.audit);
        if config.checkpoint_every > 0 && episodes.len() >= next_checkpoint {
            on_checkpoint(episodes.len(), &trainer.pop);
            while next_checkpoint <= episodes.len() {
                next_checkpoint += config.checkpoint_every;
            }
        }
    }
    let final_params = trainer
        .pop
        .agents
        .iter()
        .map(|a| (a.theta.clone(), a.eta.clone()))
        .collect();
    Ok(RunRecord {
        seed,
        episodes,
        iterations,
        audit,
        final_params,
    })
}

pub fn run_trial(config: &ExperimentConfig, seed: u64) -> Result<RunRecord, HarnessError> {
    run_trial_with(config, seed, &mut |_, _| {})
}

/// All seeds of `config` on a pool of `jobs` threads, in seed order.
pub fn run_trials(config: &ExperimentConfig, jobs: usize) -> Result<Vec<RunRecord>, HarnessError> {
    run_trials_with(config, jobs, &|_, _, _| {})
}

/// [`run_trials`] with a checkpoint callback receiving the seed, the episode
/// count and the population.
pub fn run_trials_with(
    config: &ExperimentConfig,
    jobs: usize,
    on_checkpoint: &(dyn Fn(u64, usize, &Population) + Sync),
) -> Result<Vec<RunRecord>, HarnessError> {
    use rayon::prelude::*;
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| {
        config
            .seeds
            .par_iter()
            .map(|&s| run_trial_with(config, s, &mut |e, pop| on_checkpoint(s, e, pop)))
            .collect()
    })
}

/// First episode count `e` at which the mean of the trailing `window`
/// episodes (ending at episode `e`, counted from 1) reaches `threshold`.
pub fn convergence_episode(series: &[f64], window: usize, threshold: f64) -> Option<usize> {
    assert!(window >= 1, "window must be at least 1");
    if series.len() < window {
        return None;
    }
    let mut sum: f64 = series[..window].iter().sum();
    let tol = 1e-12 * window as f64;
    if sum / window as f64 >= threshold - tol / window as f64 {
        return Some(window);
    }
    for end in window..series.len() {
        sum += series[end] - series[end - window];
        if sum / window as f64 >= threshold - tol / window as f64 {
            return Some(end + 1);
        }
    }
    None
}

/// Lower median with `None` ranked after every episode count.
pub fn median_convergence(values: &[Option<usize>]) -> Option<usize> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by_key(|v| v.unwrap_or(usize::MAX));
    sorted[(sorted.len() - 1) / 2]
}

/// Number of episodes in the final window (the last tenth, at least one).
pub fn final_window(episodes: usize) -> usize {
    episodes.div_ceil(10).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seeds: Vec<u64>,
    pub n_agents: usize,
    pub episodes: usize,
    pub mean_success: Vec<f64>,
    pub std_success: Vec<f64>,
    pub mean_steps: Vec<f64>,
    pub std_steps: Vec<f64>,
    /// `[episode][agent]`.
    pub mean_env_return: Vec<Vec<f64>>,
    pub std_env_return: Vec<Vec<f64>>,
    pub mean_total_return: Vec<Vec<f64>>,
    pub std_total_return: Vec<Vec<f64>>,
    #[serde(with = "episode_sentinel::vec")]
    pub convergence: Vec<Option<usize>>,
    #[serde(with = "episode_sentinel")]
    pub median_convergence: Option<usize>,
    pub final_window: usize,
    /// Final-window mean success per seed.
    pub final_success_per_seed: Vec<f64>,
    pub final_success: f64,
    pub final_env_return: Vec<f64>,
    pub final_total_return: Vec<f64>,
}

/// Serializes `None` episode indices as the string `"none"`.
pub mod episode_sentinel {
    use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

    pub const NONE: &str = "none";

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Episode(usize),
        Sentinel(String),
    }

    fn to_repr(v: Option<usize>) -> Repr {
        v.map_or(Repr::Sentinel(NONE.into()), Repr::Episode)
    }

    fn from_repr<E: de::Error>(r: Repr) -> Result<Option<usize>, E> {
        match r {
            Repr::Episode(e) => Ok(Some(e)),
            Repr::Sentinel(s) if s == NONE => Ok(None),
            Repr::Sentinel(s) => Err(E::custom(format!("expected an episode or \"{NONE}\", got \"{s}\""))),
        }
    }

    pub fn format(v: Option<usize>) -> String {
        v.map_or(NONE.to_string(), |e| e.to_string())
    }

    pub fn serialize<S: Serializer>(v: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[Option<usize>], s: S) -> Result<S::Ok, S::Error> {
            v.iter().map(|e| to_repr(*e)).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Option<usize>>, D::Error> {
            Vec::<Repr>::deserialize(d)?.into_iter().map(from_repr).collect()
        }
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-episode mean and (population) standard deviation across records,
/// convergence episodes and final-window means. Records are assumed to
/// cover the same number of episodes and agents.
pub fn aggregate(records: &[RunRecord], window: usize, threshold: f64) -> Summary {
    assert!(!records.is_empty(), "aggregate needs at least one record");
    let episodes = records[0].episodes.len();
    let n_agents = records[0].episodes.first().map_or(0, |e| e.env_return.len());
    for r in records {
        assert_eq!(r.episodes.len(), episodes, "records differ in length");
    }

    let mut mean_success = Vec::with_capacity(episodes);
    let mut std_success = Vec::with_capacity(episodes);
    let mut mean_steps = Vec::with_capacity(episodes);
    let mut std_steps = Vec::with_capacity(episodes);
    let mut mean_env = Vec::with_capacity(episodes);
    let mut std_env = Vec::with_capacity(episodes);
    let mut mean_total = Vec::with_capacity(episodes);
    let mut std_total = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let (m, s) = mean_std(records.iter().map(|r| r.episodes[e].success));
        mean_success.push(m);
        std_success.push(s);
        let (m, s) = mean_std(records.iter().map(|r| r.episodes[e].steps as f64));
        mean_steps.push(m);
        std_steps.push(s);
        let (me, se): (Vec<f64>, Vec<f64>) = (0..n_agents)
            .map(|j| mean_std(records.iter().map(|r| r.episodes[e].env_return[j])))
            .unzip();
        mean_env.push(me);
        std_env.push(se);
        let (mt, st): (Vec<f64>, Vec<f64>) = (0..n_agents)
            .map(|j| mean_std(records.iter().map(|r| r.episodes[e].total_return[j])))
            .unzip();
        mean_total.push(mt);
        std_total.push(st);
    }

    let convergence: Vec<Option<usize>> = records
        .iter()
        .map(|r| convergence_episode(&r.success_series(), window, threshold))
        .collect();
    let fw = final_window(episodes);
    let final_success_per_seed: Vec<f64> = records.iter().map(|r| r.final_mean(fw, |e| e.success)).collect();
    let n = records.len() as f64;
    let final_success = final_success_per_seed.iter().sum::<f64>() / n;
    let final_env_return = (0..n_agents)
        .map(|j| {
            records
                .iter()
                .map(|r| r.final_mean(fw, |e| e.env_return[j]))
                .sum::<f64>()
                / n
        })
        .collect();
    let final_total_return = (0..n_agents)
        .map(|j| {
            records
                .iter()
                .map(|r| r.final_mean(fw, |e| e.total_return[j]))
                .sum::<f64>()
                / n
        })
        .collect();

    Summary {
        seeds: records.iter().map(|r| r.seed).collect(),
        n_agents,
        episodes,
        mean_success,
        std_success,
        mean_steps,
        std_steps,
        mean_env_return: mean_env,
        std_env_return: std_env,
        mean_total_return: mean_total,
        std_total_return: std_total,
        median_convergence: median_convergence(&convergence),
        convergence,
        final_window: fw,
        final_success_per_seed,
        final_success,
        final_env_return,
        final_total_return,
    }
}

/// One row per episode per record.
pub fn write_episodes_csv(path: &Path, records: &[RunRecord]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    let n_agents = records
        .first()
        .and_then(|r| r.episodes.first())
        .map_or(0, |e| e.env_return.len());
    let mut header = vec!["seed".to_string(), "episode".into(), "success".into(), "steps".into()];
    header.extend((0..n_agents).map(|j| format!("env_return_{j}")));
    header.extend((0..n_agents).map(|j| format!("total_return_{j}")));
    w.write_record(&header)?;
    for r in records {
        for (e, m) in r.episodes.iter().enumerate() {
            let mut row = vec![
                r.seed.to_string(),
                (e + 1).to_string(),
                m.success.to_string(),
                m.steps.to_string(),
            ];
            row.extend(m.env_return.iter().map(f64::to_string));
            row.extend(m.total_return.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_episodes_csv(path: &Path) -> Result<Vec<RunRecord>, HarnessError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let n_agents = headers.iter().filter(|h| h.starts_with("env_return_")).count();
    let mut records: Vec<RunRecord> = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let parse = |k: usize| -> Result<f64, HarnessError> {
            row.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| config_error(path.display().to_string(), format!("bad value in column {k}")))
        };
        let seed = parse(0)? as u64;
        let metrics = EpisodeMetrics {
            success: parse(2)?,
            steps: parse(3)? as usize,
            env_return: (0..n_agents).map(|j| parse(4 + j)).collect::<Result<_, _>>()?,
            total_return: (0..n_agents)
                .map(|j| parse(4 + n_agents + j))
                .collect::<Result<_, _>>()?,
        };
        match records.last_mut() {
            Some(r) if r.seed == seed => r.episodes.push(metrics),
            _ => records.push(RunRecord {
                seed,
                episodes: vec![metrics],
                iterations: Vec::new(),
                audit: Vec::new(),
                final_params: Vec::new(),
            }),
        }
    }
    Ok(records)
}

/// Audit rows of every record as JSON lines, tagged with the seed.
pub fn write_audit_jsonl(path: &Path, records: &[RunRecord]) -> Result<(), HarnessError> {
    #[derive(Serialize)]
    struct Line<'a> {
        seed: u64,
        #[serde(flatten)]
        record: &'a AuditRecord,
    }
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        for a in &r.audit {
            serde_json::to_writer(
                &mut out,
                &Line {
                    seed: r.seed,
                    record: a,
                },
            )?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Per-episode aggregate curves, one row per episode.
pub fn write_summary_csv(path: &Path, summary: &Summary) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    let n = summary.n_agents;
    let mut header = vec![
        "episode".to_string(),
        "success_mean".into(),
        "success_std".into(),
        "steps_mean".into(),
        "steps_std".into(),
    ];
    for j in 0..n {
        header.push(format!("env_return_{j}_mean"));
        header.push(format!("env_return_{j}_std"));
    }
    for j in 0..n {
        header.push(format!("total_return_{j}_mean"));
        header.push(format!("total_return_{j}_std"));
    }
    w.write_record(&header)?;
    for e in 0..summary.episodes {
        let mut row = vec![
            (e + 1).to_string(),
            summary.mean_success[e].to_string(),
            summary.std_success[e].to_string(),
            summary.mean_steps[e].to_string(),
            summary.std_steps[e].to_string(),
        ];
        for j in 0..n {
            row.push(summary.mean_env_return[e][j].to_string());
            row.push(summary.std_env_return[e][j].to_string());
        }
        for j in 0..n {
            row.push(summary.mean_total_return[e][j].to_string());
            row.push(summary.std_total_return[e][j].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
