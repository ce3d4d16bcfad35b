//! Learned-incentive bi-level training.
//!
//! Every agent owns a softmax policy `θ` and an incentive head `η`. At each
//! step giver `i` pays recipient `j` an incentive computed from its own
//! observation and the other agents' actions, so the reward agent `j`
//! learns from is its env reward plus everything it received.
//!
//! One training iteration:
//!
//! 1. roll out a batch under the current policies;
//! 2. compute each recipient's hypothetical REINFORCE step `θ̂ = θ + β ∇J`;
//! 3. roll out a look-ahead batch under `θ̂`;
//! 4. move each giver's `η` along the gradient of its look-ahead env return
//!    (chained through `θ̂(η)`) minus `α` times its incentive spend;
//! 5. commit `θ̂`.
//!
//! Manipulation modes hook into action selection, the learning reward, and
//! the update direction (see [`crate::manip`]); ADMO adversaries are updated
//! by their own controller (see [`crate::admo`]).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::admo::{AdmoController, AuditRecord};
use crate::env::{self, GameSpec, JointState};
use crate::manip::{self, ManipulationMode};
use crate::nn::{Activation, Head, Layout, Mlp, NetConfig, ParamVector, Trace, DEFAULT_HIDDEN, DEFAULT_R_MAX};

/// Per-step reward decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardBreakdown {
    pub env: Vec<f64>,
    /// `incentives[i][j]`: learned incentive paid by giver `i` to recipient `j`.
    pub incentives: Vec<Vec<f64>>,
    /// Constant fake incentives injected into each recipient's learning
    /// reward. Kept apart from `incentives`, which are bounded by `r_max`.
    pub injected: Vec<f64>,
}

impl RewardBreakdown {
    pub fn new(env: Vec<f64>) -> Self {
        let n = env.len();
        RewardBreakdown {
            env,
            incentives: vec![vec![0.0; n]; n],
            injected: vec![0.0; n],
        }
    }

    pub fn n_agents(&self) -> usize {
        self.env.len()
    }
}

/// Env reward plus all learned incentives received by agent `j`.
pub fn total_reward(breakdown: &RewardBreakdown, j: usize) -> f64 {
    let received: f64 = breakdown
        .incentives
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != j)
        .map(|(_, row)| row[j])
        .sum();
    breakdown.env[j] + received
}

/// Which reward a policy-gradient estimate is taken against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardSelector {
    /// Env reward, learned incentives and injected fake incentives.
    Total,
    /// Env reward only.
    EnvOnly,
    /// Negation of `Total`.
    NegatedTotal,
}

impl RewardSelector {
    pub fn reward(self, breakdown: &RewardBreakdown, j: usize) -> f64 {
        match self {
            RewardSelector::Total => total_reward(breakdown, j) + breakdown.injected[j],
            RewardSelector::EnvOnly => breakdown.env[j],
            RewardSelector::NegatedTotal => -(total_reward(breakdown, j) + breakdown.injected[j]),
        }
    }

    /// Derivative of the selected reward with respect to a received incentive.
    pub fn incentive_sensitivity(self) -> f64 {
        match self {
            RewardSelector::Total => 1.0,
            RewardSelector::EnvOnly => 0.0,
            RewardSelector::NegatedTotal => -1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Step {
    pub state: JointState,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: RewardBreakdown,
    /// `∇_θ log π(a|o)` for agents whose action was sampled from their policy.
    pub scores: Vec<Option<ParamVector>>,
    /// Whether giver `i`'s incentive head produced this step's incentives
    /// (false once a budget cap zeroed them).
    pub emitted: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub final_state: JointState,
    pub discount: f64,
    /// Discounted env return per agent.
    pub env_return: Vec<f64>,
    /// Discounted incentive-augmented return per agent (fake incentives excluded).
    pub total_return: Vec<f64>,
}

impl Trajectory {
    pub fn new(steps: Vec<Step>, final_state: JointState, discount: f64) -> Self {
        let n = final_state_agents(&steps);
        let mut traj = Trajectory {
            steps,
            final_state,
            discount,
            env_return: Vec::new(),
            total_return: Vec::new(),
        };
        traj.env_return = (0..n).map(|j| traj.discounted(|b| b.env[j])).collect();
        traj.total_return = (0..n).map(|j| traj.discounted(|b| total_reward(b, j))).collect();
        traj
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn n_agents(&self) -> usize {
        self.env_return.len()
    }

    /// `Σ_t γ^t reward(step_t)`.
    pub fn discounted(&self, reward: impl Fn(&RewardBreakdown) -> f64) -> f64 {
        let mut weight = 1.0;
        let mut total = 0.0;
        for s in &self.steps {
            total += weight * reward(&s.rewards);
            weight *= self.discount;
        }
        total
    }

    /// `G_t = Σ_{u ≥ t} γ^{u-t} reward(step_u)` for every `t`.
    pub fn rewards_to_go(&self, reward: impl Fn(&RewardBreakdown) -> f64) -> Vec<f64> {
        let mut out = vec![0.0; self.steps.len()];
        let mut acc = 0.0;
        for (t, s) in self.steps.iter().enumerate().rev() {
            acc = reward(&s.rewards) + self.discount * acc;
            out[t] = acc;
        }
        out
    }

    pub fn undiscounted(&self, reward: impl Fn(&RewardBreakdown) -> f64) -> f64 {
        self.steps.iter().map(|s| reward(&s.rewards)).sum()
    }
}

fn final_state_agents(steps: &[Step]) -> usize {
    steps.first().map_or(0, |s| s.actions.len())
}

/// A set of episodes with weights summing to one. Sampled batches are
/// uniformly weighted; exhaustive enumeration weights each episode by its
/// probability, which turns every batch estimator into an exact expectation.
#[derive(Clone, Debug)]
pub struct Batch {
    pub episodes: Vec<Trajectory>,
    pub weights: Vec<f64>,
}

impl Batch {
    pub fn uniform(episodes: Vec<Trajectory>) -> Self {
        assert!(!episodes.is_empty(), "empty batch");
        let w = 1.0 / episodes.len() as f64;
        let weights = vec![w; episodes.len()];
        Batch { episodes, weights }
    }

    pub fn weighted(episodes: Vec<Trajectory>, weights: Vec<f64>) -> Self {
        assert_eq!(episodes.len(), weights.len());
        Batch { episodes, weights }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, &Trajectory)> {
        self.weights.iter().copied().zip(&self.episodes)
    }

    pub fn expectation(&self, f: impl Fn(&Trajectory) -> f64) -> f64 {
        self.iter().map(|(w, t)| w * f(t)).sum()
    }
}

/// Per-timestep weighted mean of the returns-to-go over the episodes that
/// reach that timestep.
pub fn timestep_baseline(batch: &Batch, returns: &[Vec<f64>]) -> Vec<f64> {
    let horizon = returns.iter().map(Vec::len).max().unwrap_or(0);
    let mut sums = vec![0.0; horizon];
    let mut mass = vec![0.0; horizon];
    for (w, g) in batch.weights.iter().zip(returns) {
        for (t, v) in g.iter().enumerate() {
            sums[t] += w * v;
            mass[t] += w;
        }
    }
    sums.iter()
        .zip(&mass)
        .map(|(s, m)| if *m > 0.0 { s / m } else { 0.0 })
        .collect()
}

fn accumulate_scores(
    agent: usize,
    traj: &Trajectory,
    advantages: impl Iterator<Item = f64>,
    scale: f64,
    out: &mut ParamVector,
) {
    let mut discount = 1.0;
    for (step, adv) in traj.steps.iter().zip(advantages) {
        if let Some(score) = &step.scores[agent] {
            let coeff = scale * discount * adv;
            if coeff != 0.0 {
                out.add_scaled(coeff, score);
            }
        }
        discount *= traj.discount;
    }
}

/// Single-trajectory REINFORCE estimate `Σ_t γ^t (G_t - b_t) ∇ log π_j(a_t|o_t)`,
/// an unbiased estimate of the gradient of the discounted return.
/// An empty `baseline` means no baseline.
pub fn policy_gradient(
    agent: usize,
    traj: &Trajectory,
    selector: RewardSelector,
    baseline: &[f64],
    layout: &Layout,
) -> ParamVector {
    assert!(!traj.is_empty(), "policy gradient of an empty trajectory");
    let g = traj.rewards_to_go(|b| selector.reward(b, agent));
    let mut out = ParamVector::zeros(layout.clone());
    let adv = g
        .iter()
        .enumerate()
        .map(|(t, v)| v - baseline.get(t).copied().unwrap_or(0.0));
    accumulate_scores(agent, traj, adv, 1.0, &mut out);
    out
}

/// Batch-averaged score-function gradient of `E[Σ γ^t reward]` with respect
/// to agent `agent`'s policy, using a per-timestep mean-return baseline.
pub fn batch_score_gradient(
    agent: usize,
    batch: &Batch,
    reward: impl Fn(&RewardBreakdown) -> f64,
    layout: &Layout,
) -> ParamVector {
    let returns: Vec<Vec<f64>> = batch.episodes.iter().map(|t| t.rewards_to_go(&reward)).collect();
    let baseline = timestep_baseline(batch, &returns);
    let mut out = ParamVector::zeros(layout.clone());
    for ((w, traj), g) in batch.iter().zip(&returns) {
        assert!(!traj.is_empty(), "policy gradient of an empty trajectory");
        let adv = g.iter().zip(&baseline).map(|(v, b)| v - b);
        accumulate_scores(agent, traj, adv, w, &mut out);
    }
    out
}

pub fn batch_policy_gradient(agent: usize, batch: &Batch, selector: RewardSelector, layout: &Layout) -> ParamVector {
    batch_score_gradient(agent, batch, |b| selector.reward(b, agent), layout)
}

/// Discounted incentive spend of `giver` over one episode.
pub fn incentive_cost(giver: usize, traj: &Trajectory) -> f64 {
    traj.discounted(|b| {
        b.incentives[giver]
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != giver)
            .map(|(_, v)| v)
            .sum()
    })
}

/// Recipients of `giver`, in incentive-head output order.
pub fn recipients(n_agents: usize, giver: usize) -> impl Iterator<Item = usize> {
    (0..n_agents).filter(move |j| *j != giver)
}

/// Input of giver `i`'s incentive head: its observation followed by a
/// one-hot encoding of every other agent's action.
pub fn incentive_input(spec: &GameSpec, obs: &[f64], actions: &[usize], giver: usize) -> Vec<f64> {
    let n_actions = spec.n_actions();
    let mut input = Vec::with_capacity(obs.len() + (actions.len() - 1) * n_actions);
    input.extend_from_slice(obs);
    for j in recipients(actions.len(), giver) {
        let start = input.len();
        input.resize(start + n_actions, 0.0);
        input[start + actions[j]] = 1.0;
    }
    input
}

/// Hyperparameters of one agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub policy_hidden: Vec<usize>,
    pub incentive_hidden: Vec<usize>,
    pub r_max: f64,
    pub lr_policy: f64,
    pub lr_incentive: f64,
    /// Initial bias of the incentive head's output layer; 0 starts every
    /// incentive at `r_max / 2`.
    pub incentive_bias_init: f64,
    /// Uniform mixing weight of the action distribution.
    pub exploration: f64,
    pub mode: ManipulationMode,
}

pub const DEFAULT_LR_POLICY: f64 = 5e-3;
pub const DEFAULT_LR_INCENTIVE: f64 = 2.0;
pub const DEFAULT_COST_WEIGHT: f64 = 1e-3;
pub const DEFAULT_BATCH_SIZE: usize = 16;

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            policy_hidden: DEFAULT_HIDDEN.to_vec(),
            incentive_hidden: DEFAULT_HIDDEN.to_vec(),
            r_max: DEFAULT_R_MAX,
            lr_policy: DEFAULT_LR_POLICY,
            lr_incentive: DEFAULT_LR_INCENTIVE,
            incentive_bias_init: 0.0,
            exploration: 0.0,
            mode: ManipulationMode::Honest,
        }
    }
}

impl AgentConfig {
    pub fn with_mode(mode: ManipulationMode) -> Self {
        AgentConfig {
            mode,
            ..AgentConfig::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct AgentBundle {
    pub policy: Mlp,
    pub theta: ParamVector,
    pub incentive: Mlp,
    pub eta: ParamVector,
    pub lr_policy: f64,
    pub lr_incentive: f64,
    pub mode: ManipulationMode,
}

impl AgentBundle {
    pub fn new(spec: &GameSpec, config: &AgentConfig, policy_seed: u64, incentive_seed: u64) -> Self {
        let n_others = spec.n_agents - 1;
        let policy = Mlp::new(NetConfig {
            input_dim: spec.obs_dim(),
            hidden: config.policy_hidden.clone(),
            output_dim: spec.n_actions(),
            activation: Activation::Relu,
            head: Head::Softmax,
            exploration: config.exploration,
        });
        let incentive = Mlp::new(NetConfig {
            input_dim: spec.obs_dim() + n_others * spec.n_actions(),
            hidden: config.incentive_hidden.clone(),
            output_dim: n_others,
            activation: Activation::Relu,
            head: Head::BoundedIncentive { r_max: config.r_max },
            exploration: 0.0,
        });
        let mut eta = incentive.init_params(incentive_seed);
        if config.incentive_bias_init != 0.0 {
            let last = incentive.layout().last().expect("non-empty layout").range();
            eta.values_mut()[last].fill(config.incentive_bias_init);
        }
        AgentBundle {
            theta: policy.init_params(policy_seed),
            eta,
            policy,
            incentive,
            lr_policy: config.lr_policy,
            lr_incentive: config.lr_incentive,
            mode: config.mode.clone(),
        }
    }
}

/// All agents of one game instance plus the incentive-cost weight `α`.
#[derive(Clone, Debug)]
pub struct Population {
    pub spec: GameSpec,
    pub agents: Vec<AgentBundle>,
    pub cost_weight: f64,
}

impl Population {
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn thetas(&self) -> Vec<&ParamVector> {
        self.agents.iter().map(|a| &a.theta).collect()
    }

    fn incentive_budget(&self, giver: usize) -> Option<f64> {
        match &self.agents[giver].mode {
            ManipulationMode::Admo(settings) => Some(settings.budget),
            _ => None,
        }
    }

    /// Incentives and injected fakes for one step; `spent` tracks per-giver
    /// spend this episode.
    fn emit(
        &self,
        obs: &[Vec<f64>],
        actions: &[usize],
        env_rewards: Vec<f64>,
        spent: &mut [f64],
    ) -> (RewardBreakdown, Vec<bool>) {
        let n = self.n_agents();
        let mut breakdown = RewardBreakdown::new(env_rewards);
        let mut emitted = vec![true; n];
        for (i, agent) in self.agents.iter().enumerate() {
            if let Some(budget) = self.incentive_budget(i) {
                if spent[i] >= budget {
                    emitted[i] = false;
                }
            }
            if emitted[i] {
                let input = incentive_input(&self.spec, &obs[i], actions, i);
                let out = agent.incentive.incentive_forward(&agent.eta, &input);
                for (k, j) in recipients(n, i).enumerate() {
                    breakdown.incentives[i][j] = out[k];
                }
                spent[i] += out.iter().sum::<f64>();
            }
            let fake = agent.mode.injected_incentive();
            if fake != 0.0 {
                for j in recipients(n, i) {
                    breakdown.injected[j] += fake;
                }
            }
        }
        (breakdown, emitted)
    }

    /// Play one episode with the given policies (one per agent).
    pub fn rollout(&self, thetas: &[&ParamVector], rng: &mut impl Rng) -> Trajectory {
        let spec = &self.spec;
        let n = self.n_agents();
        let mut state = env::reset(spec).expect("validated game spec");
        let mut spent = vec![0.0; n];
        let mut steps = Vec::with_capacity(spec.horizon);
        while !state.terminal {
            let obs: Vec<Vec<f64>> = (0..n).map(|j| env::observe(spec, &state, j)).collect();
            let mut actions = Vec::with_capacity(n);
            let mut scores = Vec::with_capacity(n);
            for (j, agent) in self.agents.iter().enumerate() {
                let choice = manip::select_action(&agent.mode, spec, &state, j, &agent.policy, thetas[j], &obs[j], rng);
                scores.push(
                    choice
                        .trace
                        .map(|trace| agent.policy.score_from_trace(thetas[j], &trace, choice.action)),
                );
                actions.push(choice.action);
            }
            let outcome = env::step(spec, &state, &actions).expect("actions come from the game's action set");
            let (rewards, emitted) = self.emit(&obs, &actions, outcome.env_rewards, &mut spent);
            steps.push(Step {
                state,
                observations: obs,
                actions,
                rewards,
                scores,
                emitted,
            });
            state = outcome.next_state;
        }
        Trajectory::new(steps, state, spec.discount)
    }

    pub fn sample_batch(&self, thetas: &[&ParamVector], episodes: usize, rng: &mut impl Rng) -> Batch {
        Batch::uniform((0..episodes).map(|_| self.rollout(thetas, rng)).collect())
    }

    /// Every possible episode under `thetas`, weighted by its probability.
    /// Exponential in `horizon × n_agents`; meant for small games.
    pub fn enumerate_batch(&self, thetas: &[&ParamVector]) -> Batch {
        let state = env::reset(&self.spec).expect("validated game spec");
        let mut episodes = Vec::new();
        let mut weights = Vec::new();
        let spent = vec![0.0; self.n_agents()];
        self.enumerate_from(thetas, state, Vec::new(), 1.0, spent, &mut episodes, &mut weights);
        Batch::weighted(episodes, weights)
    }

    #[allow(clippy::too_many_arguments)]
    fn enumerate_from(
        &self,
        thetas: &[&ParamVector],
        state: JointState,
        prefix: Vec<Step>,
        prob: f64,
        spent: Vec<f64>,
        episodes: &mut Vec<Trajectory>,
        weights: &mut Vec<f64>,
    ) {
        let spec = &self.spec;
        if state.terminal {
            episodes.push(Trajectory::new(prefix, state, spec.discount));
            weights.push(prob);
            return;
        }
        let n = self.n_agents();
        let obs: Vec<Vec<f64>> = (0..n).map(|j| env::observe(spec, &state, j)).collect();
        // per agent: candidate (action, probability) pairs and the forward trace
        let mut options: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
        let mut traces: Vec<Option<Trace>> = Vec::with_capacity(n);
        for (j, agent) in self.agents.iter().enumerate() {
            if let ManipulationMode::Bypass = agent.mode {
                options.push(vec![(spec.noop_action(&state, j), 1.0)]);
                traces.push(None);
            } else {
                let trace = agent.policy.forward_trace(thetas[j], &obs[j]);
                let probs = agent.policy.action_probs(&trace);
                options.push(probs.into_iter().enumerate().collect());
                traces.push(Some(trace));
            }
        }
        let mut choice = vec![0usize; n];
        loop {
            let actions: Vec<usize> = (0..n).map(|j| options[j][choice[j]].0).collect();
            let p: f64 = (0..n).map(|j| options[j][choice[j]].1).product();
            let scores = (0..n)
                .map(|j| {
                    traces[j]
                        .as_ref()
                        .map(|tr| self.agents[j].policy.score_from_trace(thetas[j], tr, actions[j]))
                })
                .collect();
            let outcome = env::step(spec, &state, &actions).expect("enumerated actions are valid");
            let mut spent_next = spent.clone();
            let (rewards, emitted) = self.emit(&obs, &actions, outcome.env_rewards, &mut spent_next);
            let mut path = prefix.clone();
            path.push(Step {
                state: state.clone(),
                observations: obs.clone(),
                actions,
                rewards,
                scores,
                emitted,
            });
            self.enumerate_from(
                thetas,
                outcome.next_state,
                path,
                prob * p,
                spent_next,
                episodes,
                weights,
            );

            // advance the mixed-radix counter over joint actions
            let mut k = 0;
            while k < n {
                choice[k] += 1;
                if choice[k] < options[k].len() {
                    break;
                }
                choice[k] = 0;
                k += 1;
            }
            if k == n {
                break;
            }
        }
    }
}

/// Hypothetical updated policy of `agent` after one REINFORCE step on
/// `batch`, using the reward and direction its mode prescribes. Agents whose
/// policy is not trained this way keep `θ`. Nothing is mutated.
pub fn recipient_update(pop: &Population, agent: usize, batch: &Batch) -> ParamVector {
    let bundle = &pop.agents[agent];
    let mut theta_hat = bundle.theta.clone();
    if let Some((selector, direction)) = bundle.mode.learning_rule() {
        let grad = batch_policy_gradient(agent, batch, selector, bundle.theta.layout());
        theta_hat.add_scaled(direction * bundle.lr_policy, &grad);
    }
    theta_hat
}

/// Accumulate `Σ_t cotangent_t · ∂incentives_t / ∂η_giver` over one episode,
/// skipping steps where the giver's head did not emit.
fn accumulate_incentive_vjp(
    pop: &Population,
    giver: usize,
    traj: &Trajectory,
    cotangents: &[Vec<f64>],
    scale: f64,
    out: &mut ParamVector,
) {
    let agent = &pop.agents[giver];
    for (step, cot) in traj.steps.iter().zip(cotangents) {
        if !step.emitted[giver] {
            continue;
        }
        let input = incentive_input(&pop.spec, &step.observations[giver], &step.actions, giver);
        agent.incentive.incentive_vjp_into(&agent.eta, &input, cot, scale, out);
    }
}

/// `∇_η E[incentive_cost]` for `giver` over `batch`.
pub fn incentive_cost_gradient(pop: &Population, giver: usize, batch: &Batch) -> ParamVector {
    let agent = &pop.agents[giver];
    let n_out = agent.incentive.output_dim();
    let mut out = agent.eta.zeros_like();
    for (w, traj) in batch.iter() {
        let mut discount = 1.0;
        let cots: Vec<Vec<f64>> = traj
            .steps
            .iter()
            .map(|_| {
                let c = vec![discount; n_out];
                discount *= traj.discount;
                c
            })
            .collect();
        accumulate_incentive_vjp(pop, giver, traj, &cots, w, &mut out);
    }
    out
}

/// Gradient of giver `i`'s bi-level objective with respect to its `η`:
/// the look-ahead env return (through every recipient's hypothetical step
/// `θ̂_j(η)`) minus `α` times the incentive spend on the old batch.
///
/// For recipient `j` with step size `β_j`, the chain term is
/// `β_j Σ_t γ^t ⟨∇_{θ̂_j} Ĵ^i, ∇log π_j(a_t|o_t)⟩ ∇_η G^j_t`, where `∇_{θ̂_j} Ĵ^i`
/// is estimated on `new` and the sum runs over `old`. Baselines are
/// treated as constants.
pub fn giver_gradient(pop: &Population, giver: usize, old: &Batch, new: &Batch) -> ParamVector {
    let n = pop.n_agents();
    let agent = &pop.agents[giver];
    let n_out = agent.incentive.output_dim();
    let mut cotangents: Vec<Vec<Vec<f64>>> = old.episodes.iter().map(|t| vec![vec![0.0; n_out]; t.len()]).collect();

    for (k, j) in recipients(n, giver).enumerate() {
        let recipient = &pop.agents[j];
        // givers model every recipient as an ascending learner; a reverse
        // adversary's private descent is not visible to them
        let Some((selector, _)) = recipient.mode.learning_rule() else {
            continue;
        };
        let sensitivity = selector.incentive_sensitivity();
        if sensitivity == 0.0 || recipient.lr_policy == 0.0 {
            continue;
        }
        let lookahead = batch_score_gradient(j, new, |b| b.env[giver], recipient.theta.layout());
        let factor = recipient.lr_policy * sensitivity;
        for ((w, traj), cots) in old.iter().zip(&mut cotangents) {
            // reward u enters G_t for every t ≤ u with weight γ^t·γ^{u-t}, so
            // its cotangent is γ^u Σ_{t ≤ u} s_t, s_t = factor·w·⟨lookahead, score_t⟩
            let mut acc = 0.0;
            let mut discount = 1.0;
            for (step, cot) in traj.steps.iter().zip(cots.iter_mut()) {
                acc += step.scores[j].as_ref().map_or(0.0, |score| lookahead.dot(score));
                cot[k] += factor * w * discount * acc;
                discount *= traj.discount;
            }
        }
    }

    if pop.cost_weight != 0.0 {
        for ((w, traj), cots) in old.iter().zip(&mut cotangents) {
            let mut discount = 1.0;
            for cot in cots.iter_mut() {
                for c in cot.iter_mut() {
                    *c -= pop.cost_weight * w * discount;
                }
                discount *= traj.discount;
            }
        }
    }

    let mut out = agent.eta.zeros_like();
    for (traj, cots) in old.episodes.iter().zip(&cotangents) {
        accumulate_incentive_vjp(pop, giver, traj, cots, 1.0, &mut out);
    }
    out
}

/// Reported outcome of one episode. Returns are undiscounted sums; the
/// total return adds learned incentives received but never fake ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub success: f64,
    pub steps: usize,
    pub env_return: Vec<f64>,
    pub total_return: Vec<f64>,
}

impl EpisodeMetrics {
    pub fn from_trajectory(spec: &GameSpec, traj: &Trajectory) -> Self {
        let n = traj.n_agents();
        EpisodeMetrics {
            success: env::success_rate(spec, traj),
            steps: traj.len(),
            env_return: (0..n).map(|j| traj.undiscounted(|b| b.env[j])).collect(),
            total_return: (0..n).map(|j| traj.undiscounted(|b| total_reward(b, j))).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct IterationOutput {
    pub batch: Batch,
    pub episodes: Vec<EpisodeMetrics>,
    /// Norm of each agent's batch policy gradient, for agents trained by the
    /// recipient update.
    pub policy_grad_norms: Vec<Option<f64>>,
    pub audit: Vec<AuditRecord>,
}

/// A population plus the controllers of any ADMO adversaries.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub pop: Population,
    pub adversaries: Vec<Option<AdmoController>>,
}

impl Trainer {
    pub fn new(pop: Population) -> Self {
        let adversaries = pop
            .agents
            .iter()
            .map(|a| match &a.mode {
                ManipulationMode::Admo(settings) => Some(AdmoController::new(settings.clone(), a)),
                _ => None,
            })
            .collect();
        Trainer { pop, adversaries }
    }

    pub fn train_iteration(&mut self, batch_size: usize, rng: &mut impl Rng) -> IterationOutput {
        let n = self.pop.n_agents();
        let old = self.pop.sample_batch(&self.pop.thetas(), batch_size, rng);

        let mut policy_grad_norms = vec![None; n];
        let mut theta_hats = Vec::with_capacity(n);
        for (j, agent) in self.pop.agents.iter().enumerate() {
            if let Some((selector, direction)) = agent.mode.learning_rule() {
                let grad = batch_policy_gradient(j, &old, selector, agent.theta.layout());
                policy_grad_norms[j] = Some(grad.norm());
                let mut theta_hat = agent.theta.clone();
                theta_hat.add_scaled(direction * agent.lr_policy, &grad);
                theta_hats.push(theta_hat);
            } else {
                theta_hats.push(agent.theta.clone());
            }
        }

        let givers: Vec<usize> = (0..n)
            .filter(|&i| self.adversaries[i].is_none() && self.pop.agents[i].lr_incentive != 0.0)
            .collect();
        if !givers.is_empty() {
            let hat_refs: Vec<&ParamVector> = theta_hats.iter().collect();
            let new = self.pop.sample_batch(&hat_refs, batch_size, rng);
            let updates: Vec<(usize, ParamVector)> = givers
                .iter()
                .map(|&i| (i, giver_gradient(&self.pop, i, &old, &new)))
                .collect();
            for (i, grad) in updates {
                let lr = self.pop.agents[i].lr_incentive;
                self.pop.agents[i].eta.add_scaled(lr, &grad);
            }
        }

        for (agent, theta_hat) in self.pop.agents.iter_mut().zip(theta_hats) {
            agent.theta = theta_hat;
        }

        let mut audit = Vec::new();
        for a in 0..n {
            if let Some(ctrl) = self.adversaries[a].as_mut() {
                audit.push(ctrl.step(&mut self.pop, a, &old));
            }
        }

        let episodes = old
            .episodes
            .iter()
            .map(|t| EpisodeMetrics::from_trajectory(&self.pop.spec, t))
            .collect();
        IterationOutput {
            batch: old,
            episodes,
            policy_grad_norms,
            audit,
        }
    }
}
