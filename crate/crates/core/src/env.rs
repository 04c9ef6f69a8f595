//! Goal-conditioned point-mass environments with sparse rewards.
//!
//! Two tasks share a unit-square workspace:
//!
//! * `point-reach`: move the agent onto a goal. The achieved goal is the agent position.
//! * `point-push`: move an object onto a goal. The agent carries the object along while it is
//!   within the contact radius. The achieved goal is the object position, and the object start
//!   position is drawn once per environment instance and reused at every reset.
//!
//! Episodes never end early: every episode lasts exactly `horizon` steps.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};

pub const STEP_SIZE: f64 = 0.05;
pub const CONTACT_RADIUS: f64 = 0.06;
pub const EPSILON_REWARD: f64 = 0.05;
pub const REACH_EPSILON_SUCCESS: f64 = 0.05;
pub const PUSH_EPSILON_SUCCESS: f64 = 0.07;
pub const HORIZON: usize = 50;

const GOAL_DIM: usize = 2;
const ACTION_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnvId {
    PointReach,
    PointPush,
}

impl EnvId {
    pub fn name(self) -> &'static str {
        match self {
            EnvId::PointReach => "point-reach",
            EnvId::PointPush => "point-push",
        }
    }

    pub fn descriptor(self) -> EnvDescriptor {
        match self {
            EnvId::PointReach => EnvDescriptor {
                state_dim: 4,
                goal_dim: GOAL_DIM,
                action_dim: ACTION_DIM,
                has_object: false,
                agent_pos_indices: 0..2,
                object_pos_indices: None,
                epsilon_reward: EPSILON_REWARD,
                epsilon_success: REACH_EPSILON_SUCCESS,
                horizon: HORIZON,
            },
            EnvId::PointPush => EnvDescriptor {
                state_dim: 6,
                goal_dim: GOAL_DIM,
                action_dim: ACTION_DIM,
                has_object: true,
                agent_pos_indices: 0..2,
                object_pos_indices: Some(2..4),
                epsilon_reward: EPSILON_REWARD,
                epsilon_success: PUSH_EPSILON_SUCCESS,
                horizon: HORIZON,
            },
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point-reach" => Ok(EnvId::PointReach),
            "point-push" => Ok(EnvId::PointPush),
            other => Err(Error::Parse(format!(
                "unknown environment `{other}` (expected point-reach or point-push)"
            ))),
        }
    }
}

/// Static layout and thresholds of an environment.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvDescriptor {
    pub state_dim: usize,
    pub goal_dim: usize,
    pub action_dim: usize,
    pub has_object: bool,
    pub agent_pos_indices: Range<usize>,
    pub object_pos_indices: Option<Range<usize>>,
    pub epsilon_reward: f64,
    pub epsilon_success: f64,
    pub horizon: usize,
}

impl EnvDescriptor {
    /// Checks the descriptor's structural invariants.
    pub fn validate(&self) -> Result<()> {
        ensure(self.has_object == self.object_pos_indices.is_some(), || {
            "object_pos_indices must be present iff has_object".into()
        })?;
        ensure(self.epsilon_reward > 0.0, || "epsilon_reward must be > 0".into())?;
        ensure(self.epsilon_success >= self.epsilon_reward, || {
            "epsilon_success must be >= epsilon_reward".into()
        })?;
        ensure(self.horizon > 0, || "horizon must be > 0".into())?;
        let in_bounds = |r: &Range<usize>| r.start < r.end && r.end <= self.state_dim;
        ensure(in_bounds(&self.agent_pos_indices), || {
            "agent_pos_indices out of range".into()
        })?;
        if let Some(obj) = &self.object_pos_indices {
            ensure(in_bounds(obj), || "object_pos_indices out of range".into())?;
            let a = &self.agent_pos_indices;
            ensure(obj.end <= a.start || a.end <= obj.start, || {
                "agent and object index ranges overlap".into()
            })?;
        }
        Ok(())
    }

    /// The slice of `state` that forms the achieved goal.
    pub fn achieved_goal_indices(&self) -> Range<usize> {
        self.object_pos_indices
            .clone()
            .unwrap_or_else(|| self.agent_pos_indices.clone())
    }

    pub fn achieved_goal(&self, state: &[f64]) -> Result<Vec<f64>> {
        ensure(state.len() == self.state_dim, || {
            format!("state length {} != state_dim {}", state.len(), self.state_dim)
        })?;
        Ok(state[self.achieved_goal_indices()].to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoalObservation {
    pub state: Vec<f64>,
    pub achieved_goal: Vec<f64>,
    pub desired_goal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: GoalObservation,
    /// Sparse task reward, exactly 0.0 or -1.0.
    pub reward: f64,
    pub is_success: bool,
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// 0 when `achieved` lies strictly within `epsilon` of `desired`, else -1.
pub fn compute_sparse_reward(achieved: &[f64], desired: &[f64], epsilon: f64) -> Result<f64> {
    ensure(achieved.len() == desired.len(), || {
        format!(
            "achieved goal has length {} but desired goal has length {}",
            achieved.len(),
            desired.len()
        )
    })?;
    ensure(epsilon > 0.0, || format!("epsilon must be > 0, got {epsilon}"))?;
    Ok(if distance(achieved, desired) < epsilon {
        0.0
    } else {
        -1.0
    })
}

/// Copy of `state` with the object position replaced by `new_pos`.
pub fn substitute_object_position(
    state: &[f64],
    new_pos: &[f64],
    desc: &EnvDescriptor,
) -> Result<Vec<f64>> {
    let range = desc
        .object_pos_indices
        .clone()
        .ok_or_else(|| Error::contract("substitute_object_position on an environment without an object"))?;
    ensure(state.len() == desc.state_dim, || {
        format!("state length {} != state_dim {}", state.len(), desc.state_dim)
    })?;
    ensure(new_pos.len() == range.len(), || {
        format!("object position has length {}, expected {}", new_pos.len(), range.len())
    })?;
    let mut out = state.to_vec();
    out[range].copy_from_slice(new_pos);
    Ok(out)
}

pub fn extract_positions(
    state: &[f64],
    desc: &EnvDescriptor,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    ensure(state.len() == desc.state_dim, || {
        format!("state length {} != state_dim {}", state.len(), desc.state_dim)
    })?;
    let agent = state[desc.agent_pos_indices.clone()].to_vec();
    let object = desc.object_pos_indices.clone().map(|r| state[r].to_vec());
    Ok((agent, object))
}

fn clamp_unit(p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

fn uniform_point(rng: &mut impl Rng) -> [f64; 2] {
    [rng.random::<f64>(), rng.random::<f64>()]
}

/// A point-mass environment instance. Single owner; all randomness comes from the
/// construction seed.
#[derive(Debug, Clone)]
pub struct PointEnv {
    id: EnvId,
    desc: EnvDescriptor,
    rng: ChaCha8Rng,
    agent: [f64; 2],
    last_action: [f64; 2],
    object: [f64; 2],
    object_start: [f64; 2],
    goal: [f64; 2],
    steps: usize,
}

impl PointEnv {
    pub fn new(id: EnvId, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let object_start = match id {
            EnvId::PointPush => uniform_point(&mut rng),
            EnvId::PointReach => [0.0, 0.0],
        };
        PointEnv {
            id,
            desc: id.descriptor(),
            rng,
            agent: [0.0; 2],
            last_action: [0.0; 2],
            object: object_start,
            object_start,
            goal: [0.0; 2],
            steps: 0,
        }
    }

    pub fn id(&self) -> EnvId {
        self.id
    }

    pub fn descriptor(&self) -> &EnvDescriptor {
        &self.desc
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.steps >= self.desc.horizon
    }

    /// Object start position shared by every episode of this instance.
    pub fn object_start(&self) -> Option<[f64; 2]> {
        self.desc.has_object.then_some(self.object_start)
    }

    pub fn reset(&mut self) -> GoalObservation {
        self.agent = uniform_point(&mut self.rng);
        self.goal = uniform_point(&mut self.rng);
        self.object = self.object_start;
        self.last_action = [0.0; 2];
        self.steps = 0;
        self.observe()
    }

    /// Places agent, object and goal directly. Used by tests and tooling.
    pub fn set_configuration(&mut self, agent: [f64; 2], object: Option<[f64; 2]>, goal: [f64; 2]) {
        self.agent = clamp_unit(agent);
        if let Some(o) = object {
            self.object = clamp_unit(o);
        }
        self.goal = clamp_unit(goal);
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        ensure(!self.is_done(), || {
            format!("step called after the horizon of {} steps", self.desc.horizon)
        })?;
        ensure(action.len() == self.desc.action_dim, || {
            format!("action length {} != action_dim {}", action.len(), self.desc.action_dim)
        })?;
        let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
        let before = self.agent;
        let moved = clamp_unit([
            before[0] + STEP_SIZE * a[0],
            before[1] + STEP_SIZE * a[1],
        ]);
        if self.desc.has_object && distance(&before, &self.object) < CONTACT_RADIUS {
            let d = [moved[0] - before[0], moved[1] - before[1]];
            self.object = clamp_unit([self.object[0] + d[0], self.object[1] + d[1]]);
        }
        self.agent = moved;
        self.last_action = a;
        self.steps += 1;

        let observation = self.observe();
        let reward = compute_sparse_reward(
            &observation.achieved_goal,
            &observation.desired_goal,
            self.desc.epsilon_reward,
        )?;
        let is_success =
            distance(&observation.achieved_goal, &observation.desired_goal) < self.desc.epsilon_success;
        Ok(StepResult {
            observation,
            reward,
            is_success,
        })
    }

    pub fn observe(&self) -> GoalObservation {
        let state = match self.id {
            EnvId::PointReach => vec![
                self.agent[0],
                self.agent[1],
                self.last_action[0],
                self.last_action[1],
            ],
            EnvId::PointPush => vec![
                self.agent[0],
                self.agent[1],
                self.object[0],
                self.object[1],
                self.agent[0] - self.object[0],
                self.agent[1] - self.object[1],
            ],
        };
        let achieved_goal = state[self.desc.achieved_goal_indices()].to_vec();
        GoalObservation {
            state,
            achieved_goal,
            desired_goal: self.goal.to_vec(),
        }
    }
}
