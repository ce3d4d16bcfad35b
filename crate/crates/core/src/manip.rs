//! Strategy-based manipulations, applied as per-agent interceptors on the
//! incentive-learning loop.
//!
//! * `PartialComm`: the agent learns from its environment reward only while
//!   still sending learned incentives.
//! * `FakeIncentive(c)`: the agent injects a constant `c` into every other
//!   agent's learning reward at every step.
//! * `Bypass`: the agent only ever plays the no-op action.
//! * `Reverse`: the agent descends its own return instead of ascending it.
//! * `Admo`: the adaptive multi-objective adversary, see [`crate::admo`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::admo::AdmoSettings;
use crate::env::{GameKind, GameSpec, JointState};
use crate::lio::{RewardBreakdown, RewardSelector};
use crate::nn::{Mlp, ParamVector, Trace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManipulationMode {
    Honest,
    PartialComm,
    FakeIncentive { c_adv: f64 },
    Bypass,
    Reverse,
    Admo(AdmoSettings),
}

impl ManipulationMode {
    pub fn name(&self) -> &'static str {
        match self {
            ManipulationMode::Honest => "honest",
            ManipulationMode::PartialComm => "partial_comm",
            ManipulationMode::FakeIncentive { .. } => "fake_incentive",
            ManipulationMode::Bypass => "bypass",
            ManipulationMode::Reverse => "reverse",
            ManipulationMode::Admo(_) => "admo",
        }
    }

    pub fn is_adversarial(&self) -> bool {
        !matches!(self, ManipulationMode::Honest)
    }

    /// Checks the fake-incentive dominance condition and ADMO settings.
    pub fn validate(&self, spec: &GameSpec, r_max: f64) -> Result<(), String> {
        match self {
            ManipulationMode::FakeIncentive { c_adv } => {
                if !(*c_adv > r_max && *c_adv > spec.max_env_reward()) {
                    return Err(format!(
                        "fake incentive c = {c_adv} must exceed both r_max = {r_max} and the largest env reward {}",
                        spec.max_env_reward()
                    ));
                }
                Ok(())
            }
            ManipulationMode::Admo(settings) => settings.validate(),
            _ => Ok(()),
        }
    }

    /// Fake incentive this agent injects into each other agent per step.
    pub fn injected_incentive(&self) -> f64 {
        match self {
            ManipulationMode::FakeIncentive { c_adv } => *c_adv,
            _ => 0.0,
        }
    }

    /// Reward selector and ascent direction when this agent's policy is
    /// trained by the recipient update; `None` when something else drives it.
    pub fn learning_rule(&self) -> Option<(RewardSelector, f64)> {
        match self {
            ManipulationMode::Bypass | ManipulationMode::Admo(_) => None,
            mode => Some((reward_selector(mode), update_direction(mode))),
        }
    }
}

pub fn reward_selector(mode: &ManipulationMode) -> RewardSelector {
    match mode {
        ManipulationMode::PartialComm => RewardSelector::EnvOnly,
        _ => RewardSelector::Total,
    }
}

/// The reward agent `j` learns from under `mode`.
///
/// Partial communication keeps only the environment reward. Every other mode
/// uses the incentive-augmented total, which also carries any fake
/// incentives injected by other agents.
pub fn select_reward(mode: &ManipulationMode, breakdown: &RewardBreakdown, agent: usize) -> f64 {
    reward_selector(mode).reward(breakdown, agent)
}

/// `+1` to ascend the learning reward, `-1` to descend it.
pub fn update_direction(mode: &ManipulationMode) -> f64 {
    match mode {
        ManipulationMode::Reverse => -1.0,
        _ => 1.0,
    }
}

/// Chosen action plus the forward trace when it was sampled from the policy.
pub struct ActionChoice {
    pub action: usize,
    pub trace: Option<Trace>,
}

#[allow(clippy::too_many_arguments)]
pub fn select_action(
    mode: &ManipulationMode,
    spec: &GameSpec,
    state: &JointState,
    agent: usize,
    policy: &Mlp,
    theta: &ParamVector,
    obs: &[f64],
    rng: &mut impl Rng,
) -> ActionChoice {
    if let ManipulationMode::Bypass = mode {
        return ActionChoice {
            action: spec.noop_action(state, agent),
            trace: None,
        };
    }
    let trace = policy.forward_trace(theta, obs);
    let probs = policy.action_probs(&trace);
    ActionChoice {
        action: sample_categorical(&probs, rng),
        trace: Some(trace),
    }
}

pub fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

/// Whether the agents outside `idle` can still open the door and exit:
/// `M` lever pullers plus one agent at the door.
pub fn coalition_feasible(spec: &GameSpec, idle: &[usize]) -> bool {
    assert_eq!(
        spec.kind,
        GameKind::EscapeRoom,
        "coalition feasibility is defined for the escape room only"
    );
    let mut idle: Vec<usize> = idle.to_vec();
    idle.sort_unstable();
    idle.dedup();
    assert!(idle.iter().all(|&a| a < spec.n_agents), "idle agent out of range");
    spec.n_agents - idle.len() > spec.threshold()
}
