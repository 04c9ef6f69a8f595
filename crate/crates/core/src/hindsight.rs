//! Hindsight relabeling: standard goal relabeling (HER) and the dual-objective variant (2HER)
//! that also substitutes future agent positions for the object position and rewards
//! agent-object proximity.

use std::borrow::Borrow;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::agent::{concat_goal, Trajectory, Transition};
use crate::env::{compute_sparse_reward, distance, extract_positions, substitute_object_position, EnvDescriptor};
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Final,
    Future,
    Episode,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Final => "final",
            Strategy::Future => "future",
            Strategy::Episode => "episode",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(Strategy::Final),
            "future" => Ok(Strategy::Future),
            "episode" => Ok(Strategy::Episode),
            other => Err(Error::Parse(format!("unknown goal sampling strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HindsightConfig {
    pub k0: usize,
    /// k drops by one every `k_decay_interval` iterations.
    pub k_decay_interval: usize,
    pub c_r: f64,
    pub delta_displacement: f64,
    /// Iteration from which 2HER falls back to plain HER.
    pub disable_2her_at: Option<usize>,
    pub strategy: Strategy,
    /// Emit goal relabels and object substitutions as two separate transition sets.
    pub separate_sets: bool,
    /// Also substitute the object position in the current state of a 2HER transition; by
    /// default only the next state is substituted.
    pub substitute_state_in: bool,
}

impl Default for HindsightConfig {
    fn default() -> Self {
        HindsightConfig {
            k0: 4,
            k_decay_interval: usize::MAX,
            c_r: 0.8,
            delta_displacement: 1e-3,
            disable_2her_at: None,
            strategy: Strategy::Future,
            separate_sets: false,
            substitute_state_in: false,
        }
    }
}

impl HindsightConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.k_decay_interval < 1 {
            v.push("k_decay_interval must be >= 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.c_r) {
            v.push(format!("c_r must lie in [0, 1], got {}", self.c_r));
        }
        if !(self.delta_displacement >= 0.0) {
            v.push(format!("delta_displacement must be >= 0, got {}", self.delta_displacement));
        }
        v
    }

    /// Whether 2HER is still active at `iteration`.
    pub fn two_her_active(&self, iteration: usize) -> bool {
        self.disable_2her_at.is_none_or(|d| iteration < d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Real,
    Her,
    TwoHer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelabeledTransition {
    pub transition: Transition,
    pub provenance: Provenance,
}

impl Borrow<Transition> for RelabeledTransition {
    fn borrow(&self) -> &Transition {
        &self.transition
    }
}

/// Sparse reward with the descriptor's reward threshold.
pub fn sparse_reward_fn(desc: &EnvDescriptor) -> impl Fn(&[f64], &[f64]) -> Result<f64> + '_ {
    move |achieved, desired| compute_sparse_reward(achieved, desired, desc.epsilon_reward)
}

/// k = max(0, k0 - floor(iteration / interval))
pub fn k_schedule(iteration: usize, cfg: &HindsightConfig) -> usize {
    let decrements = iteration / cfg.k_decay_interval.max(1);
    cfg.k0.saturating_sub(decrements)
}

/// Object tasks keep a trajectory only if the object moved by more than `delta` between the
/// first and last state. Tasks without an object keep everything.
pub fn displacement_filter(traj: &Trajectory, delta: f64, desc: &EnvDescriptor) -> Result<bool> {
    if !desc.has_object {
        return Ok(true);
    }
    if traj.is_empty() {
        return Ok(false);
    }
    let (_, first) = extract_positions(traj.raw_state_at(0), desc)?;
    let (_, last) = extract_positions(traj.raw_state_at(traj.len()), desc)?;
    let (first, last) = (first.expect("has_object"), last.expect("has_object"));
    Ok(distance(&first, &last) > delta)
}

/// `k` state indices drawn uniformly with replacement from `t+1..=horizon`.
pub fn sample_future_indices(t: usize, horizon: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    ensure(t < horizon, || format!("step index {t} must be < horizon {horizon}"))?;
    Ok((0..k).map(|_| rng.random_range(t + 1..=horizon)).collect())
}

pub fn sample_indices(
    strategy: Strategy,
    t: usize,
    horizon: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    match strategy {
        Strategy::Future => sample_future_indices(t, horizon, k, rng),
        Strategy::Final => {
            ensure(t < horizon, || format!("step index {t} must be < horizon {horizon}"))?;
            Ok(vec![horizon; k])
        }
        Strategy::Episode => {
            ensure(t < horizon, || format!("step index {t} must be < horizon {horizon}"))?;
            Ok((0..k).map(|_| rng.random_range(0..=horizon)).collect())
        }
    }
}

fn with_goal(source: &Transition, raw_next: &[f64], goal: &[f64], reward: f64) -> Transition {
    Transition {
        state_in: concat_goal(&source.raw_state, goal),
        state_next: concat_goal(raw_next, goal),
        reward,
        ..source.clone()
    }
}

/// Standard hindsight relabeling: each transition gets `k` goals taken from achieved goals of
/// sampled states, with rewards recomputed against the new goal.
pub fn relabel_her<R: Rng>(
    traj: &Trajectory,
    cfg: &HindsightConfig,
    k: usize,
    reward_fn: &dyn Fn(&[f64], &[f64]) -> Result<f64>,
    _desc: &EnvDescriptor,
    rng: &mut R,
) -> Result<Vec<RelabeledTransition>> {
    let horizon = traj.len();
    let mut out = Vec::with_capacity(k * horizon);
    for (t, tr) in traj.transitions.iter().enumerate() {
        for j in sample_indices(cfg.strategy, t, horizon, k, rng)? {
            let goal = traj.achieved_goal_at(j);
            let reward = reward_fn(&tr.achieved_goal_next, goal)?;
            out.push(RelabeledTransition {
                transition: with_goal(tr, &tr.raw_state_next, goal, reward),
                provenance: Provenance::Her,
            });
        }
    }
    Ok(out)
}

/// Dual-objective relabeling. Per transition and sample, a goal is drawn as in
/// [`relabel_her`] and, independently, a future agent position that replaces the object
/// position in the next state. The reward is `(1 - c_r) r_goal + c_r r_obj`.
///
/// Random draws per transition: `k` goal indices, then `k` agent-position indices.
/// Falls back to [`relabel_her`] when the environment has no object.
pub fn relabel_2her<R: Rng>(
    traj: &Trajectory,
    cfg: &HindsightConfig,
    k: usize,
    reward_fn: &dyn Fn(&[f64], &[f64]) -> Result<f64>,
    desc: &EnvDescriptor,
    rng: &mut R,
) -> Result<Vec<RelabeledTransition>> {
    if !desc.has_object {
        return relabel_her(traj, cfg, k, reward_fn, desc, rng);
    }
    let horizon = traj.len();
    let mut out = Vec::with_capacity(k * horizon * if cfg.separate_sets { 2 } else { 1 });
    for (t, tr) in traj.transitions.iter().enumerate() {
        let goal_idx = sample_indices(cfg.strategy, t, horizon, k, rng)?;
        let agent_idx = sample_indices(cfg.strategy, t, horizon, k, rng)?;
        for (&jg, &ja) in goal_idx.iter().zip(&agent_idx) {
            let goal = traj.achieved_goal_at(jg);
            let obj_pos = agent_position_at(traj, ja, desc)?;
            let r_goal = reward_fn(&tr.achieved_goal_next, goal)?;
            let r_obj = reward_fn(&tr.agent_pos_next, &obj_pos)?;
            let raw_next = substitute_object_position(&tr.raw_state_next, &obj_pos, desc)?;
            let raw_in = if cfg.substitute_state_in {
                Some(substitute_object_position(&tr.raw_state, &obj_pos, desc)?)
            } else {
                None
            };
            let substituted = |goal: &[f64], reward: f64| {
                let mut t = with_goal(tr, &raw_next, goal, reward);
                if let Some(raw_in) = &raw_in {
                    t.state_in = concat_goal(raw_in, goal);
                }
                t
            };
            if cfg.separate_sets {
                out.push(RelabeledTransition {
                    transition: with_goal(tr, &tr.raw_state_next, goal, r_goal),
                    provenance: Provenance::Her,
                });
                let own_goal = tr.goal().to_vec();
                let r_goal_own = reward_fn(&tr.achieved_goal_next, &own_goal)?;
                let reward = combine_rewards(cfg.c_r, r_goal_own, r_obj);
                out.push(RelabeledTransition {
                    transition: substituted(&own_goal, reward),
                    provenance: Provenance::TwoHer,
                });
            } else {
                let reward = combine_rewards(cfg.c_r, r_goal, r_obj);
                out.push(RelabeledTransition {
                    transition: substituted(goal, reward),
                    provenance: Provenance::TwoHer,
                });
            }
        }
    }
    Ok(out)
}

/// `(1 - c_r) r_goal + c_r r_obj`
pub fn combine_rewards(c_r: f64, r_goal: f64, r_obj: f64) -> f64 {
    (1.0 - c_r) * r_goal + c_r * r_obj
}

fn agent_position_at(traj: &Trajectory, j: usize, desc: &EnvDescriptor) -> Result<Vec<f64>> {
    if j == 0 {
        Ok(extract_positions(&traj.transitions[0].raw_state, desc)?.0)
    } else {
        Ok(traj.transitions[j - 1].agent_pos_next.clone())
    }
}

/// Concatenates real and relabeled transitions, shuffles them and cuts the result into
/// consecutive minibatches; the last one may be smaller.
pub fn merge_shuffle_partition(
    real: Vec<Transition>,
    relabeled: Vec<RelabeledTransition>,
    minibatch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<RelabeledTransition>>> {
    ensure(minibatch_size >= 1, || "minibatch_size must be >= 1".into())?;
    let mut all: Vec<RelabeledTransition> = real
        .into_iter()
        .map(|transition| RelabeledTransition {
            transition,
            provenance: Provenance::Real,
        })
        .chain(relabeled)
        .collect();
    all.shuffle(rng);
    let mut batches = Vec::with_capacity(all.len().div_ceil(minibatch_size));
    let mut iter = all.into_iter().peekable();
    while iter.peek().is_some() {
        batches.push(iter.by_ref().take(minibatch_size).collect());
    }
    Ok(batches)
}
