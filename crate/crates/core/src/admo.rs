//! Adaptive multi-objective adversary.
//!
//! The adversary `a` optimizes `ω = [θ^a; η^a]` against two surrogate losses:
//!
//! * `L_inc`: its negated return margin over the other agents plus a
//!   `β_b`-weighted incentive cost;
//! * `L_pol`: negated (`s = +1`) or plain (`s = -1`) team welfare plus a
//!   proxy-KL penalty `λ_d · ½‖θ^a − θ_ref‖²`.
//!
//! Each iteration combines the two gradients with min-norm weights subject
//! to adaptive floors, clips the result and takes an AdamW step. The `θ`
//! segment of each gradient is a score-function estimate on the batch; the
//! `η` segment differentiates the emitted incentives directly, since they
//! enter the other agents' rewards additively.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::lio::{batch_score_gradient, recipients, total_reward, AgentBundle, Batch, Population, Trajectory};
use crate::nn::ParamVector;

const THETA_PREFIX: &str = "theta.";
const ETA_PREFIX: &str = "eta.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdmoSettings {
    /// `+1` raises team welfare, `-1` depresses it.
    pub s: f64,
    pub beta_b: f64,
    /// Proxy-KL weight outside override windows.
    pub lambda_d: f64,
    /// Proxy-KL weight for the window after a drift trigger.
    pub lambda_override: f64,
    /// `D_proxy` above this at a reference refresh triggers the override.
    pub drift_trigger: f64,
    pub c_init: (f64, f64),
    pub kappa: f64,
    pub k_ref: usize,
    /// Per-episode incentive budget `B_a`.
    pub budget: f64,
    pub clip_norm: f64,
    pub ema_decay: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
}

impl Default for AdmoSettings {
    fn default() -> Self {
        AdmoSettings {
            s: 1.0,
            beta_b: 1e-2,
            lambda_d: 0.01,
            lambda_override: 0.05,
            drift_trigger: 0.5,
            c_init: (0.1, 0.1),
            kappa: 1.0,
            k_ref: 50,
            budget: 20.0,
            clip_norm: 1.0,
            ema_decay: 0.9,
            lr: 1e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Ceiling on each floor and on their sum after adaptation.
pub const FLOOR_CAP: f64 = 0.5;
pub const FLOOR_SUM_CAP: f64 = 0.9;

impl AdmoSettings {
    pub fn with_sign(s: f64) -> Self {
        AdmoSettings {
            s,
            ..AdmoSettings::default()
        }
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), String> {
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(format!("{name} must be a finite non-negative number, got {v}"))
            }
        };
        if self.s != 1.0 && self.s != -1.0 {
            return Err(format!("s must be +1 or -1, got {}", self.s));
        }
        nonneg("beta_b", self.beta_b)?;
        nonneg("lambda_d", self.lambda_d)?;
        nonneg("lambda_override", self.lambda_override)?;
        nonneg("drift_trigger", self.drift_trigger)?;
        nonneg("kappa", self.kappa)?;
        nonneg("budget", self.budget)?;
        nonneg("weight_decay", self.weight_decay)?;
        let (c1, c2) = self.c_init;
        if !(c1 >= 0.0 && c2 >= 0.0 && c1 <= FLOOR_CAP && c2 <= FLOOR_CAP && c1 + c2 <= FLOOR_SUM_CAP) {
            return Err(format!(
                "c_init must lie in [0, {FLOOR_CAP}] each with sum at most {FLOOR_SUM_CAP}, got ({c1}, {c2})"
            ));
        }
        if self.k_ref == 0 {
            return Err("k_ref must be at least 1".into());
        }
        if !(self.clip_norm > 0.0) {
            return Err(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(format!("ema_decay must lie in (0, 1), got {}", self.ema_decay));
        }
        if !(self.lr > 0.0) {
            return Err(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        Ok(())
    }
}

/// `½‖θ − θ_ref‖²`.
pub fn d_proxy(theta: &ParamVector, theta_ref: &ParamVector) -> f64 {
    assert_eq!(theta.len(), theta_ref.len(), "reference layout mismatch");
    0.5 * theta
        .values()
        .iter()
        .zip(theta_ref.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
}

fn omega_of(bundle: &AgentBundle) -> ParamVector {
    ParamVector::concat(&bundle.theta, THETA_PREFIX, &bundle.eta, ETA_PREFIX)
}

fn split_omega(omega: &ParamVector, theta_len: usize) -> (&[f64], &[f64]) {
    omega.values().split_at(theta_len)
}

/// `Σ_τ w_τ Σ_t γ^t ∇_η Σ_j r_{η}^{a→j}` scaled by `scale`.
fn incentive_pathway(pop: &Population, a: usize, batch: &Batch, scale: f64) -> ParamVector {
    let agent = &pop.agents[a];
    let n_out = agent.incentive.output_dim();
    let mut out = agent.eta.zeros_like();
    if scale == 0.0 {
        return out;
    }
    for (w, traj) in batch.iter() {
        let mut discount = 1.0;
        for step in &traj.steps {
            if step.emitted[a] {
                let input = crate::lio::incentive_input(&pop.spec, &step.observations[a], &step.actions, a);
                let cot = vec![discount; n_out];
                agent
                    .incentive
                    .incentive_vjp_into(&agent.eta, &input, &cot, scale * w, &mut out);
            }
            discount *= traj.discount;
        }
    }
    out
}

fn margin_reward(b: &crate::lio::RewardBreakdown, a: usize) -> f64 {
    let n = b.n_agents();
    let others: f64 = recipients(n, a).map(|j| total_reward(b, j)).sum();
    total_reward(b, a) - others / (n - 1) as f64
}

fn welfare_reward(b: &crate::lio::RewardBreakdown) -> f64 {
    (0..b.n_agents()).map(|j| total_reward(b, j)).sum()
}

/// Discounted team welfare of one episode.
pub fn welfare(traj: &Trajectory) -> f64 {
    traj.discounted(welfare_reward)
}

/// Incentive-manipulation loss of adversary `a` and its gradient over `ω`.
pub fn loss_inc(pop: &Population, a: usize, batch: &Batch, beta_b: f64) -> (f64, ParamVector) {
    let n = pop.n_agents();
    assert!(n >= 2, "the margin needs at least one other agent");
    let agent = &pop.agents[a];
    let margin = batch.expectation(|t| t.discounted(|b| margin_reward(b, a)));
    let cost = batch.expectation(|t| crate::lio::incentive_cost(a, t));
    let value = -margin + beta_b * cost;

    // the spend also depends on θ^a through the episode distribution
    let spend = |b: &crate::lio::RewardBreakdown| recipients(n, a).map(|j| b.incentives[a][j]).sum::<f64>();
    let mut g_theta = batch_score_gradient(
        a,
        batch,
        |b| margin_reward(b, a) - beta_b * spend(b),
        agent.theta.layout(),
    );
    g_theta.scale(-1.0);
    let g_eta = incentive_pathway(pop, a, batch, 1.0 / (n - 1) as f64 + beta_b);
    (value, ParamVector::concat(&g_theta, THETA_PREFIX, &g_eta, ETA_PREFIX))
}

/// Policy-manipulation loss of adversary `a` and its gradient over `ω`.
pub fn loss_pol(
    pop: &Population,
    a: usize,
    batch: &Batch,
    theta_ref: &ParamVector,
    s: f64,
    lambda_d: f64,
) -> (f64, ParamVector) {
    let agent = &pop.agents[a];
    let w = batch.expectation(welfare);
    let drift = d_proxy(&agent.theta, theta_ref);
    let value = -s * w + lambda_d * drift;

    let mut g_theta = batch_score_gradient(a, batch, welfare_reward, agent.theta.layout());
    g_theta.scale(-s);
    if lambda_d != 0.0 {
        for ((g, t), r) in g_theta
            .values_mut()
            .iter_mut()
            .zip(agent.theta.values())
            .zip(theta_ref.values())
        {
            *g += lambda_d * (t - r);
        }
    }
    let g_eta = incentive_pathway(pop, a, batch, -s);
    (value, ParamVector::concat(&g_theta, THETA_PREFIX, &g_eta, ETA_PREFIX))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoWeights {
    pub alpha: (f64, f64),
    /// Set when the objective is flat along the feasible segment (identical
    /// or vanishing gradients) and the midpoint was returned.
    pub degenerate: bool,
}

/// Min-norm weights on `{α1 + α2 = 1, α_i ≥ c_i}` for `α1 g_inc + α2 g_pol`.
///
/// Solves the bordered KKT system for the shift `α − c`, then projects onto
/// the floors. The Gram matrix is normalized by its trace first, which
/// leaves the minimizer unchanged and keeps the system well scaled.
pub fn solve_pareto_weights(g_inc: &[f64], g_pol: &[f64], floors: (f64, f64)) -> ParetoWeights {
    assert_eq!(g_inc.len(), g_pol.len(), "gradient dimensions differ");
    let (c1, c2) = floors;
    assert!(
        c1 >= 0.0 && c2 >= 0.0 && c1 + c2 <= 1.0 + 1e-12,
        "infeasible floors ({c1}, {c2})"
    );
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let g11 = dot(g_inc, g_inc);
    let g22 = dot(g_pol, g_pol);
    let g12 = dot(g_inc, g_pol);
    let trace = g11 + g22;
    let gap = g_inc.iter().zip(g_pol).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();

    let project = |a1: f64| {
        let a1 = a1.clamp(c1, 1.0 - c2);
        (a1, 1.0 - a1)
    };
    if trace == 0.0 || gap <= 1e-14 * trace {
        return ParetoWeights {
            alpha: project(0.5),
            degenerate: true,
        };
    }

    let (a, b, d) = (g11 / trace, g12 / trace, g22 / trace);
    // parallel gradients make the Gram matrix singular
    let reg = if a * d - b * b < 1e-10 { 1e-10 } else { 0.0 };
    let m = Matrix3::new(a + reg, b, 1.0, b, d + reg, 1.0, 1.0, 1.0, 0.0);
    let rhs = Vector3::new(-(a * c1 + b * c2), -(b * c1 + d * c2), 1.0 - c1 - c2);
    let shift = m.lu().solve(&rhs).filter(|x| x.iter().all(|v| v.is_finite()));
    match shift {
        Some(x) => ParetoWeights {
            alpha: project(c1 + x[0]),
            degenerate: false,
        },
        None => ParetoWeights {
            alpha: project(0.5),
            degenerate: true,
        },
    }
}

/// `α1 g_inc + α2 g_pol`.
pub fn combine(alpha: (f64, f64), g_inc: &ParamVector, g_pol: &ParamVector) -> ParamVector {
    let mut out = g_inc.scaled(alpha.0);
    out.add_scaled(alpha.1, g_pol);
    out
}

/// Rescales `g` in place so that `‖g‖ ≤ max_norm`; returns the final norm.
pub fn clip_to_norm(g: &mut ParamVector, max_norm: f64) -> f64 {
    let norm = g.norm();
    if norm > max_norm {
        g.scale(max_norm / norm);
        g.norm()
    } else {
        norm
    }
}

/// Exponential moving averages driving the adaptive floors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Emas {
    pub incentive_variance: Option<f64>,
    pub success: Option<f64>,
    /// Success EMA before the latest observation.
    pub success_prev: Option<f64>,
}

impl Emas {
    pub fn observe(&mut self, decay: f64, incentive_variance: f64, success: f64) {
        let blend = |old: Option<f64>, x: f64| Some(old.map_or(x, |o| decay * o + (1.0 - decay) * x));
        self.incentive_variance = blend(self.incentive_variance, incentive_variance);
        self.success_prev = self.success;
        self.success = blend(self.success, success);
    }
}

/// Floors from the EMAs: a falling success EMA raises `c2`, incentive
/// variance (normalized by its maximum `r_max²/4`) raises `c1`.
pub fn update_floors(settings: &AdmoSettings, emas: &Emas, r_max: f64) -> (f64, f64) {
    let (c1_init, c2_init) = settings.c_init;
    let decline = match (emas.success_prev, emas.success) {
        (Some(prev), Some(now)) => (prev - now).max(0.0),
        _ => 0.0,
    };
    let variance = emas.incentive_variance.unwrap_or(0.0) / (r_max * r_max / 4.0);
    let c2 = (c2_init + settings.kappa * decline).clamp(c2_init, FLOOR_CAP);
    let c1 = (c1_init + settings.kappa * variance).clamp(c1_init, FLOOR_CAP);
    let sum = c1 + c2;
    if sum > FLOOR_SUM_CAP {
        let k = FLOOR_SUM_CAP / sum;
        (c1 * k, c2 * k)
    } else {
        (c1, c2)
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamW {
    pub fn new(dim: usize, settings: &AdmoSettings) -> Self {
        AdamW {
            lr: settings.lr,
            beta1: settings.adam_beta1,
            beta2: settings.adam_beta2,
            eps: settings.adam_eps,
            weight_decay: settings.weight_decay,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    /// One descent step on `params` along gradient `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for k in 0..params.len() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * grad[k];
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * grad[k] * grad[k];
            let m_hat = self.m[k] / bc1;
            let v_hat = self.v[k] / bc2;
            params[k] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * params[k]);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdmoState {
    pub theta_ref: ParamVector,
    pub emas: Emas,
    pub floors: (f64, f64),
    /// Proxy-KL weight in force for the current window.
    pub lambda_d: f64,
    pub optimizer: AdamW,
    /// Iterations completed.
    pub k: usize,
}

/// One line of the adversary's audit log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub agent: usize,
    pub k: usize,
    pub alpha: (f64, f64),
    pub floors: (f64, f64),
    pub degenerate: bool,
    pub loss_inc: f64,
    pub loss_pol: f64,
    /// `‖g*‖` before clipping.
    pub g_norm: f64,
    /// Norm of the direction handed to the optimizer.
    pub step_norm: f64,
    pub skipped: bool,
    /// Mean per-episode incentive spend over the batch.
    pub budget_spent: f64,
    pub max_budget_spent: f64,
    pub lambda_d: f64,
    pub d_proxy: f64,
    pub refreshed: bool,
    pub drift_triggered: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefreshOutcome {
    /// Drift measured before any refresh.
    pub d_proxy: f64,
    pub refreshed: bool,
    pub drift_triggered: bool,
}

#[derive(Clone, Debug)]
pub struct AdmoController {
    pub settings: AdmoSettings,
    pub state: AdmoState,
}

fn incentive_stats(a: usize, batch: &Batch) -> (f64, f64, f64) {
    // (variance of emitted incentives, mean and max per-episode spend)
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut count = 0.0;
    let mut mean_spend = 0.0;
    let mut max_spend: f64 = 0.0;
    for (w, traj) in batch.iter() {
        let mut spend = 0.0;
        for step in &traj.steps {
            if !step.emitted[a] {
                continue;
            }
            for j in recipients(traj.n_agents(), a) {
                let v = step.rewards.incentives[a][j];
                sum += w * v;
                sum_sq += w * v * v;
                count += w;
                spend += v;
            }
        }
        mean_spend += w * spend;
        max_spend = max_spend.max(spend);
    }
    let variance = if count > 0.0 {
        let mean = sum / count;
        (sum_sq / count - mean * mean).max(0.0)
    } else {
        0.0
    };
    (variance, mean_spend, max_spend)
}

impl AdmoController {
    pub fn new(settings: AdmoSettings, bundle: &AgentBundle) -> Self {
        let dim = bundle.theta.len() + bundle.eta.len();
        let state = AdmoState {
            theta_ref: bundle.theta.clone(),
            emas: Emas::default(),
            floors: settings.c_init,
            lambda_d: settings.lambda_d,
            optimizer: AdamW::new(dim, &settings),
            k: 0,
        };
        AdmoController { settings, state }
    }

    /// Clips `g_star` and takes an AdamW step on `omega`; a zero direction
    /// leaves `omega` untouched. Returns the norm of the applied direction,
    /// or `None` when the update was skipped.
    pub fn apply_direction(&mut self, omega: &mut [f64], g_star: &mut ParamVector) -> Option<f64> {
        if g_star.norm() > 0.0 {
            let step_norm = clip_to_norm(g_star, self.settings.clip_norm);
            self.state.optimizer.step(omega, g_star.values());
            Some(step_norm)
        } else {
            None
        }
    }

    /// Every `k_ref` iterations: measure drift from the reference, refresh
    /// it, and pick the proxy-KL weight for the next window.
    pub fn advance_reference(&mut self, theta: &ParamVector) -> RefreshOutcome {
        let drift = d_proxy(theta, &self.state.theta_ref);
        if !self.state.k.is_multiple_of(self.settings.k_ref) {
            return RefreshOutcome {
                d_proxy: drift,
                refreshed: false,
                drift_triggered: false,
            };
        }
        self.state.theta_ref = theta.clone();
        let triggered = drift > self.settings.drift_trigger;
        self.state.lambda_d = if triggered {
            self.settings.lambda_override
        } else {
            self.settings.lambda_d
        };
        RefreshOutcome {
            d_proxy: drift,
            refreshed: true,
            drift_triggered: triggered,
        }
    }

    /// One controller iteration on a batch rolled out under the current
    /// policies. Updates `pop.agents[a]`'s `θ` and `η` in place.
    pub fn step(&mut self, pop: &mut Population, a: usize, batch: &Batch) -> AuditRecord {
        let settings = &self.settings;
        let state = &mut self.state;
        state.k += 1;

        let r_max = match pop.agents[a].incentive.config().head {
            crate::nn::Head::BoundedIncentive { r_max } => r_max,
            crate::nn::Head::Softmax => unreachable!("incentive heads are bounded"),
        };
        let (variance, spent, max_spent) = incentive_stats(a, batch);
        let success = batch.expectation(|t| crate::env::success_rate(&pop.spec, t));
        state.emas.observe(settings.ema_decay, variance, success);

        let (l_inc, g_inc) = loss_inc(pop, a, batch, settings.beta_b);
        let (l_pol, g_pol) = loss_pol(pop, a, batch, &state.theta_ref, settings.s, state.lambda_d);

        state.floors = update_floors(settings, &state.emas, r_max);
        let weights = solve_pareto_weights(g_inc.values(), g_pol.values(), state.floors);
        let mut g_star = combine(weights.alpha, &g_inc, &g_pol);
        let g_norm = g_star.norm();

        let theta_len = pop.agents[a].theta.len();
        let mut omega = omega_of(&pop.agents[a]);
        let step_norm = self.apply_direction(omega.values_mut(), &mut g_star);
        if step_norm.is_some() {
            let (theta, eta) = split_omega(&omega, theta_len);
            pop.agents[a].theta.values_mut().copy_from_slice(theta);
            pop.agents[a].eta.values_mut().copy_from_slice(eta);
        }

        let lambda_used = self.state.lambda_d;
        let refresh = self.advance_reference(&pop.agents[a].theta);
        let state = &self.state;

        AuditRecord {
            agent: a,
            k: state.k,
            alpha: weights.alpha,
            floors: state.floors,
            degenerate: weights.degenerate,
            loss_inc: l_inc,
            loss_pol: l_pol,
            g_norm,
            step_norm: step_norm.unwrap_or(0.0),
            skipped: step_norm.is_none(),
            budget_spent: spent,
            max_budget_spent: max_spent,
            lambda_d: lambda_used,
            d_proxy: refresh.d_proxy,
            refreshed: refresh.refreshed,
            drift_triggered: refresh.drift_triggered,
        }
    }
}
