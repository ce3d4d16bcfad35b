//! Social-dilemma Markov games behind one episodic interface.
//!
//! Three games are provided:
//!
//! * **Escape Room** `ER(N, M)`: agents move between `Start`, `Lever` and
//!   `Door`. Any movement costs `-1`. The door is open while at least `M`
//!   agents stand at the lever, and an agent at the door while it is open
//!   exits with `+10`, ending the episode for everyone.
//! * **Iterated Prisoner's Dilemma**: memory-1, agents observe the previous
//!   joint action. For `N > 2` each agent receives the mean of its pairwise
//!   payoffs against every other agent.
//! * **Stag Hunt**: stag pays `5.0` to everyone if all `N` agents hunt it,
//!   `0.0` to stag hunters otherwise; hare always pays `1.0`.
//!
//! All games are pure state machines: [`step`] and [`observe`] are
//! deterministic functions of their inputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lio::Trajectory;

/// Exit reward for leaving the escape room through the open door.
pub const EXIT_REWARD: f64 = 10.0;
/// Cost of changing position in the escape room.
pub const MOVE_COST: f64 = -1.0;
/// Stag payoff when every agent hunts the stag.
pub const STAG_PAYOFF: f64 = 5.0;
/// Hare payoff, independent of the others.
pub const HARE_PAYOFF: f64 = 1.0;
/// Stag payoff without full coordination.
pub const FAILED_STAG_PAYOFF: f64 = 0.0;

/// Largest team for the matrix games; their observation has `2^N + 1` entries.
pub const MAX_MATRIX_AGENTS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid game spec: `{field}` {reason}")]
    InvalidSpec { field: &'static str, reason: String },
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("agent {agent} chose action {action}, but the game has {n_actions} actions")]
    ActionOutOfRange {
        agent: usize,
        action: usize,
        n_actions: usize,
    },
    #[error("step called on a terminal state")]
    Terminal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GameKind {
    EscapeRoom,
    Ipd,
    StagHunt,
}

impl GameKind {
    pub fn name(self) -> &'static str {
        match self {
            GameKind::EscapeRoom => "escape_room",
            GameKind::Ipd => "ipd",
            GameKind::StagHunt => "stag_hunt",
        }
    }
}

/// Static description of one game instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameSpec {
    pub kind: GameKind,
    pub n_agents: usize,
    /// Lever coalition size `M`; only meaningful for the escape room.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub er_threshold: Option<usize>,
    pub horizon: usize,
    pub discount: f64,
}

pub const DEFAULT_HORIZON: usize = 5;
pub const DEFAULT_DISCOUNT: f64 = 0.99;

impl GameSpec {
    pub fn escape_room(n_agents: usize, threshold: usize) -> Self {
        GameSpec {
            kind: GameKind::EscapeRoom,
            n_agents,
            er_threshold: Some(threshold),
            horizon: DEFAULT_HORIZON,
            discount: DEFAULT_DISCOUNT,
        }
    }

    pub fn ipd(n_agents: usize) -> Self {
        GameSpec {
            kind: GameKind::Ipd,
            n_agents,
            er_threshold: None,
            horizon: DEFAULT_HORIZON,
            discount: DEFAULT_DISCOUNT,
        }
    }

    pub fn stag_hunt(n_agents: usize) -> Self {
        GameSpec {
            kind: GameKind::StagHunt,
            n_agents,
            er_threshold: None,
            horizon: DEFAULT_HORIZON,
            discount: DEFAULT_DISCOUNT,
        }
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn with_discount(mut self, discount: f64) -> Self {
        self.discount = discount;
        self
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let invalid = |field, reason: String| Err(EnvError::InvalidSpec { field, reason });
        if self.n_agents < 2 {
            return invalid("n_agents", format!("must be at least 2, got {}", self.n_agents));
        }
        if self.horizon < 1 {
            return invalid("horizon", "must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.discount) {
            return invalid("discount", format!("must lie in [0, 1), got {}", self.discount));
        }
        match self.kind {
            GameKind::EscapeRoom => match self.er_threshold {
                None => invalid("er_threshold", "is required for the escape room".into()),
                Some(m) if m < 1 || m >= self.n_agents => invalid(
                    "er_threshold",
                    format!("must satisfy 1 <= M < N, got M = {m}, N = {}", self.n_agents),
                ),
                Some(_) => Ok(()),
            },
            GameKind::Ipd | GameKind::StagHunt => {
                if self.er_threshold.is_some() {
                    return invalid("er_threshold", "only applies to the escape room".into());
                }
                if self.n_agents > MAX_MATRIX_AGENTS {
                    return invalid(
                        "n_agents",
                        format!("must be at most {MAX_MATRIX_AGENTS} for matrix games"),
                    );
                }
                Ok(())
            }
        }
    }

    /// Lever coalition size `M`. Panics for non-escape-room games.
    pub fn threshold(&self) -> usize {
        self.er_threshold
            .expect("er_threshold is only defined for the escape room")
    }

    pub fn n_actions(&self) -> usize {
        match self.kind {
            GameKind::EscapeRoom => 3,
            GameKind::Ipd | GameKind::StagHunt => 2,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self.kind {
            GameKind::EscapeRoom => 3 + 1 + (self.n_agents + 1),
            GameKind::Ipd | GameKind::StagHunt => (1usize << self.n_agents) + 1,
        }
    }

    /// Largest single-step environment reward any agent can receive.
    pub fn max_env_reward(&self) -> f64 {
        match self.kind {
            GameKind::EscapeRoom => EXIT_REWARD,
            GameKind::Ipd => 0.0,
            GameKind::StagHunt => STAG_PAYOFF,
        }
    }

    /// The passive, non-contributing action for each game.
    pub fn noop_action(&self, state: &JointState, agent: usize) -> usize {
        match (&self.kind, &state.board) {
            (GameKind::EscapeRoom, Board::Escape { positions, .. }) => positions[agent] as usize,
            (GameKind::Ipd, _) => IpdAction::Defect as usize,
            (GameKind::StagHunt, _) => StagAction::Hare as usize,
            (GameKind::EscapeRoom, Board::Matrix { .. }) => {
                unreachable!("escape room state without a board")
            }
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            GameKind::EscapeRoom => format!("ER({},{})", self.n_agents, self.threshold()),
            GameKind::Ipd => format!("IPD({})", self.n_agents),
            GameKind::StagHunt => format!("StagHunt({})", self.n_agents),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Position {
    Start = 0,
    Lever = 1,
    Door = 2,
}

impl Position {
    pub const ALL: [Position; 3] = [Position::Start, Position::Lever, Position::Door];
}

/// Escape-room actions; the action index equals the target position index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErAction {
    GoStart = 0,
    GoLever = 1,
    GoDoor = 2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IpdAction {
    Cooperate = 0,
    Defect = 1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StagAction {
    Stag = 0,
    Hare = 1,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Board {
    Escape {
        positions: Vec<Position>,
        door_open: bool,
        /// Some agent has left through the open door.
        exited: bool,
    },
    Matrix {
        /// Previous joint action; `None` is the initial marker.
        previous: Option<Vec<usize>>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JointState {
    pub board: Board,
    pub step_index: usize,
    pub terminal: bool,
}

impl JointState {
    pub fn lever_count(&self) -> usize {
        match &self.board {
            Board::Escape { positions, .. } => positions.iter().filter(|p| **p == Position::Lever).count(),
            Board::Matrix { .. } => 0,
        }
    }

    pub fn exited(&self) -> bool {
        matches!(self.board, Board::Escape { exited: true, .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_state: JointState,
    pub env_rewards: Vec<f64>,
    pub terminal: bool,
}

/// Initial state of a game. The start state is fixed for every game, so no
/// seed is involved.
pub fn reset(spec: &GameSpec) -> Result<JointState, EnvError> {
    spec.validate()?;
    let board = match spec.kind {
        GameKind::EscapeRoom => Board::Escape {
            positions: vec![Position::Start; spec.n_agents],
            door_open: false,
            exited: false,
        },
        GameKind::Ipd | GameKind::StagHunt => Board::Matrix { previous: None },
    };
    Ok(JointState {
        board,
        step_index: 0,
        terminal: false,
    })
}

/// Pairwise prisoner's dilemma payoff for the row player.
pub fn ipd_payoff(own: usize, other: usize) -> f64 {
    match (own, other) {
        (0, 0) => -1.0,
        (0, 1) => -3.0,
        (1, 0) => 0.0,
        (1, 1) => -2.0,
        _ => panic!("invalid IPD action pair ({own}, {other})"),
    }
}

pub fn step(spec: &GameSpec, state: &JointState, actions: &[usize]) -> Result<StepOutcome, EnvError> {
    let n = spec.n_agents;
    if state.terminal {
        return Err(EnvError::Terminal);
    }
    if actions.len() != n {
        return Err(EnvError::ActionCount {
            expected: n,
            got: actions.len(),
        });
    }
    let n_actions = spec.n_actions();
    if let Some((agent, &action)) = actions.iter().enumerate().find(|(_, a)| **a >= n_actions) {
        return Err(EnvError::ActionOutOfRange {
            agent,
            action,
            n_actions,
        });
    }

    let step_index = state.step_index + 1;
    let (board, env_rewards, exited) = match (&spec.kind, &state.board) {
        (GameKind::EscapeRoom, Board::Escape { positions, .. }) => {
            let next: Vec<Position> = actions.iter().map(|&a| Position::ALL[a]).collect();
            let mut rewards: Vec<f64> = positions
                .iter()
                .zip(&next)
                .map(|(from, to)| if from != to { MOVE_COST } else { 0.0 })
                .collect();
            let at_lever = next.iter().filter(|p| **p == Position::Lever).count();
            let door_open = at_lever >= spec.threshold();
            let mut exited = false;
            if door_open {
                for (reward, pos) in rewards.iter_mut().zip(&next) {
                    if *pos == Position::Door {
                        *reward += EXIT_REWARD;
                        exited = true;
                    }
                }
            }
            let board = Board::Escape {
                positions: next,
                door_open,
                exited,
            };
            (board, rewards, exited)
        }
        (GameKind::Ipd, Board::Matrix { .. }) => {
            let rewards = (0..n)
                .map(|i| {
                    let total: f64 = (0..n)
                        .filter(|&j| j != i)
                        .map(|j| ipd_payoff(actions[i], actions[j]))
                        .sum();
                    total / (n - 1) as f64
                })
                .collect();
            let board = Board::Matrix {
                previous: Some(actions.to_vec()),
            };
            (board, rewards, false)
        }
        (GameKind::StagHunt, Board::Matrix { .. }) => {
            let all_stag = actions.iter().all(|&a| a == StagAction::Stag as usize);
            let rewards = actions
                .iter()
                .map(|&a| {
                    if a == StagAction::Hare as usize {
                        HARE_PAYOFF
                    } else if all_stag {
                        STAG_PAYOFF
                    } else {
                        FAILED_STAG_PAYOFF
                    }
                })
                .collect();
            let board = Board::Matrix {
                previous: Some(actions.to_vec()),
            };
            (board, rewards, false)
        }
        _ => panic!("state board does not match game kind {:?}", spec.kind),
    };

    let terminal = exited || step_index >= spec.horizon;
    Ok(StepOutcome {
        next_state: JointState {
            board,
            step_index,
            terminal,
        },
        env_rewards,
        terminal,
    })
}

/// Index of a joint action among the `2^N` binary joint actions, agent 0
/// being the most significant bit.
pub fn joint_action_index(actions: &[usize]) -> usize {
    actions.iter().fold(0, |acc, &a| (acc << 1) | a)
}

/// Fixed-length one-hot observation of `state` from `agent`'s point of view.
pub fn observe(spec: &GameSpec, state: &JointState, agent: usize) -> Vec<f64> {
    assert!(agent < spec.n_agents, "agent {agent} out of range");
    let mut obs = vec![0.0; spec.obs_dim()];
    match &state.board {
        Board::Escape {
            positions, door_open, ..
        } => {
            obs[positions[agent] as usize] = 1.0;
            obs[3] = if *door_open { 1.0 } else { 0.0 };
            obs[4 + state.lever_count()] = 1.0;
        }
        Board::Matrix { previous } => {
            let idx = previous.as_deref().map_or(0, |a| 1 + joint_action_index(a));
            obs[idx] = 1.0;
        }
    }
    obs
}

/// Task-specific success of one complete episode, in `[0, 1]`.
///
/// Escape room: whether some agent exited. Stag hunt: mean per-step team
/// env reward normalised by the stag payoff. IPD: fraction of steps with
/// full mutual cooperation.
pub fn success_rate(spec: &GameSpec, trajectory: &Trajectory) -> f64 {
    let steps = &trajectory.steps;
    match spec.kind {
        GameKind::EscapeRoom => {
            if trajectory.final_state.exited() {
                1.0
            } else {
                0.0
            }
        }
        GameKind::StagHunt => {
            if steps.is_empty() {
                return 0.0;
            }
            let n = spec.n_agents as f64;
            let total: f64 = steps
                .iter()
                .map(|s| s.rewards.env.iter().sum::<f64>() / n / STAG_PAYOFF)
                .sum();
            (total / steps.len() as f64).clamp(0.0, 1.0)
        }
        GameKind::Ipd => {
            if steps.is_empty() {
                return 0.0;
            }
            let cooperative = steps
                .iter()
                .filter(|s| s.actions.iter().all(|&a| a == IpdAction::Cooperate as usize))
                .count();
            cooperative as f64 / steps.len() as f64
        }
    }
}
