//! Exhaustive-enumeration oracles shared by the integration tests.

#![allow(dead_code)]

use dilemma_forge::env::{GameSpec, Position};
use dilemma_forge::lio::{AgentBundle, AgentConfig, Population, RewardSelector};
use dilemma_forge::manip::ManipulationMode;
use dilemma_forge::nn::ParamVector;

/// Population with small nets; `hidden = []` gives linear networks.
pub fn small_population(spec: GameSpec, modes: Vec<ManipulationMode>, hidden: &[usize], seed: u64) -> Population {
    let agents = modes
        .into_iter()
        .enumerate()
        .map(|(j, mode)| {
            let config = AgentConfig {
                policy_hidden: hidden.to_vec(),
                incentive_hidden: hidden.to_vec(),
                mode,
                ..AgentConfig::default()
            };
            AgentBundle::new(&spec, &config, seed * 100 + j as u64, seed * 100 + 50 + j as u64)
        })
        .collect();
    Population {
        spec,
        agents,
        cost_weight: 0.0,
    }
}

pub fn two_step_ipd() -> GameSpec {
    GameSpec::ipd(2).with_horizon(2).with_discount(0.9)
}

/// Exact `E[Σ γ^t r]` for `agent` under `thetas`, by enumerating every episode.
pub fn exact_return(pop: &Population, thetas: &[&ParamVector], agent: usize, selector: RewardSelector) -> f64 {
    pop.enumerate_batch(thetas)
        .expectation(|t| t.discounted(|b| selector.reward(b, agent)))
}

pub fn exact_env_return(pop: &Population, thetas: &[&ParamVector], agent: usize) -> f64 {
    exact_return(pop, thetas, agent, RewardSelector::EnvOnly)
}

/// Central differences of `f` in every coordinate of `x`.
pub fn central_differences(x: &ParamVector, h: f64, mut f: impl FnMut(&ParamVector) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            let mut plus = x.clone();
            plus.values_mut()[k] += h;
            let mut minus = x.clone();
            minus.values_mut()[k] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖∞ / max(‖b‖∞, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(floor, f64::max);
    diff / scale
}

/// Mixed-radix enumeration of `len` digits in `0..base`.
pub fn all_tuples(len: usize, base: usize) -> Vec<Vec<usize>> {
    (0..base.pow(len as u32))
        .map(|mut code| {
            (0..len)
                .map(|_| {
                    let d = code % base;
                    code /= base;
                    d
                })
                .collect()
        })
        .collect()
}

pub fn position(code: usize) -> Position {
    match code {
        0 => Position::Start,
        1 => Position::Lever,
        2 => Position::Door,
        _ => unreachable!(),
    }
}

pub struct ErOracle {
    pub rewards: Vec<f64>,
    pub door_open: bool,
    pub exited: bool,
}

/// Hand-written escape-room rules over position codes (0 start, 1 lever,
/// 2 door): moving costs one, the door opens with `m` agents on the lever
/// after the move, and agents at an open door earn ten.
pub fn er_oracle(m: usize, from: &[usize], to: &[usize]) -> ErOracle {
    let mut levers = 0;
    for &p in to {
        if p == 1 {
            levers += 1;
        }
    }
    let door_open = levers >= m;
    let mut rewards = Vec::new();
    let mut exited = false;
    for k in 0..from.len() {
        let mut r = 0.0;
        if from[k] != to[k] {
            r -= 1.0;
        }
        if door_open && to[k] == 2 {
            r += 10.0;
            exited = true;
        }
        rewards.push(r);
    }
    ErOracle {
        rewards,
        door_open,
        exited,
    }
}

/// `‖α g1 + (1 − α) g2‖`.
pub fn norm_at(alpha: f64, g1: &[f64], g2: &[f64]) -> f64 {
    g1.iter()
        .zip(g2)
        .map(|(a, b)| (alpha * a + (1.0 - alpha) * b).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Grid search for the least `norm_at` over `[lo, hi]` with step 1e-4,
/// refined around the best cell.
pub fn grid_min(g1: &[f64], g2: &[f64], lo: f64, hi: f64) -> f64 {
    let search = |from: f64, to: f64, step: f64| {
        let n = ((to - from) / step).round() as usize;
        (0..=n)
            .map(|k| (from + k as f64 * step).min(to))
            .map(|a| (a, norm_at(a, g1, g2)))
            .fold((lo, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
    };
    let (coarse, _) = search(lo, hi, 1e-4);
    search((coarse - 1e-4).max(lo), (coarse + 1e-4).min(hi), 1e-7).1
}

/// Direct transcription of the convergence definition: the first episode
/// count `e ≥ w` whose trailing `w` outcomes average at least the threshold.
pub fn scripted_convergence(series: &[f64], window: usize, threshold: f64) -> Option<usize> {
    (window..=series.len()).find(|&end| {
        let slice = &series[end - window..end];
        slice.iter().sum::<f64>() / window as f64 >= threshold - 1e-12
    })
}
