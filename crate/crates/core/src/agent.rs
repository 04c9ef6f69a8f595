//! Multi-updates option-critic agent.
//!
//! Four parameter groups, each a one-hidden-layer network over `state ‖ goal`:
//!
//! * `z`     policy over options, softmax over `n` logits
//! * `zeta`  intra-option Gaussian policies, `n * action_dim` means plus a free log-std table
//! * `nu`    termination functions, sigmoid over `n` logits
//! * `theta` option-value critic `Q(s, o)`
//!
//! Every update weights each option by the one-step option-transition probability
//! `p(õ | s, ō) = (1 - β(s, ō)) 1[õ = ō] + β(s, ō) μ(õ | s)`, so all options learn from every
//! transition. [`UpdateConfig::multi_option`] set to `false` restricts the critic and actor
//! updates to the executed option (plain option-critic).

use std::borrow::Borrow;
use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::env::{EnvDescriptor, GoalObservation, PointEnv, STEP_SIZE};
use crate::error::{ensure, Error, Result};
use crate::nn::{
    clip_grad_norm, gaussian_entropy, gaussian_log_prob_grad, sigmoid, softmax, Adam, ForwardCache, Mlp,
    NamedTensor, ParamSet,
};

pub const DEFAULT_HIDDEN: usize = 64;

/// Per-option diagonal Gaussian policies sharing one mean network.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub net: Mlp,
    /// `n_options x action_dim`, row-major. State independent.
    pub log_std: Vec<f64>,
    pub action_dim: usize,
}

impl GaussianPolicy {
    pub fn n_options(&self) -> usize {
        self.log_std.len() / self.action_dim
    }

    pub fn log_std_of(&self, option: usize) -> &[f64] {
        &self.log_std[option * self.action_dim..(option + 1) * self.action_dim]
    }

    /// Means for every option, concatenated.
    pub fn forward(&self, s: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.net.forward(s)
    }

    pub fn mean(&self, s: &[f64], option: usize) -> Result<Vec<f64>> {
        let all = self.net.predict(s)?;
        Ok(all[option * self.action_dim..(option + 1) * self.action_dim].to_vec())
    }

    pub fn log_prob(&self, s: &[f64], option: usize, action: &[f64]) -> Result<f64> {
        let mean = self.mean(s, option)?;
        Ok(gaussian_log_prob_grad(&mean, self.log_std_of(option), action)?.logp)
    }
}

impl ParamSet for GaussianPolicy {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.net.tensors();
        t.push(&self.log_std);
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.net.tensors_mut();
        t.push(&mut self.log_std);
        t
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut n = self.net.tensor_names();
        n.push("log_std".into());
        n
    }

    fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        let mut s = self.net.tensor_shapes();
        s.push(vec![self.n_options(), self.action_dim]);
        s
    }
}

/// Fixed preprocessing between `state ‖ goal` and the networks.
///
/// Passes the input through and appends scaled differences `scale * (x[a] - x[b])` for each
/// index pair, e.g. goal minus achieved goal. Positions live in the unit square while rewards
/// change over a few hundredths, so raw coordinates alone leave the first layer badly scaled.
#[derive(Debug, Clone, PartialEq)]
pub struct InputMap {
    pub input_dim: usize,
    pub pairs: Vec<(Range<usize>, Range<usize>)>,
    pub scale: f64,
}

impl InputMap {
    pub fn identity(input_dim: usize) -> Self {
        InputMap {
            input_dim,
            pairs: Vec::new(),
            scale: 1.0,
        }
    }

    /// Goal minus achieved goal and, when `agent_object` is set and the task has an object,
    /// agent minus object; all divided by the step size.
    pub fn for_env(desc: &EnvDescriptor, agent_object: bool) -> Self {
        let goal = desc.state_dim..desc.state_dim + desc.goal_dim;
        let mut pairs = vec![(goal, desc.achieved_goal_indices())];
        if let (true, Some(obj)) = (agent_object, &desc.object_pos_indices) {
            pairs.push((desc.agent_pos_indices.clone(), obj.clone()));
        }
        InputMap {
            input_dim: desc.state_dim + desc.goal_dim,
            pairs,
            scale: 1.0 / STEP_SIZE,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.input_dim + self.pairs.iter().map(|(a, _)| a.len()).sum::<usize>()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure(x.len() == self.input_dim, || {
            format!("input length {} != expected {}", x.len(), self.input_dim)
        })?;
        let mut out = Vec::with_capacity(self.output_dim());
        out.extend_from_slice(x);
        for (a, b) in &self.pairs {
            out.extend(a.clone().zip(b.clone()).map(|(i, j)| self.scale * (x[i] - x[j])));
        }
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        for (a, b) in &self.pairs {
            ensure(a.len() == b.len() && a.end <= self.input_dim && b.end <= self.input_dim, || {
                format!("input map pair {a:?}/{b:?} invalid for input length {}", self.input_dim)
            })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentParams {
    pub z: Mlp,
    pub zeta: GaussianPolicy,
    pub nu: Mlp,
    pub theta: Mlp,
    pub input_map: InputMap,
}

impl AgentParams {
    /// Heads over raw `state ‖ goal` inputs.
    pub fn new(
        input_dim: usize,
        action_dim: usize,
        n_options: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::with_input_map(InputMap::identity(input_dim), action_dim, n_options, hidden, rng)
    }

    pub fn with_input_map(
        input_map: InputMap,
        action_dim: usize,
        n_options: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        ensure(n_options >= 1, || "at least one option is required".into())?;
        ensure(input_map.input_dim >= 1 && action_dim >= 1 && hidden >= 1, || {
            "network dimensions must be positive".into()
        })?;
        input_map.validate()?;
        let n_in = input_map.output_dim();
        Ok(AgentParams {
            z: Mlp::new(n_in, hidden, n_options, rng),
            zeta: GaussianPolicy {
                net: Mlp::new(n_in, hidden, n_options * action_dim, rng),
                log_std: vec![0.0; n_options * action_dim],
                action_dim,
            },
            nu: Mlp::new(n_in, hidden, n_options, rng),
            theta: Mlp::new(n_in, hidden, n_options, rng),
            input_map,
        })
    }

    /// Network features of a `state ‖ goal` vector.
    pub fn features(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.input_map.apply(s)
    }

    pub fn n_options(&self) -> usize {
        self.theta.n_out()
    }

    /// Length of `state ‖ goal`.
    pub fn input_dim(&self) -> usize {
        self.input_map.input_dim
    }

    pub fn action_dim(&self) -> usize {
        self.zeta.action_dim
    }

    /// μ(·|s)
    pub fn option_probs(&self, s: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.z.predict(&self.features(s)?)?))
    }

    /// β(s, ·)
    pub fn terminations(&self, s: &[f64]) -> Result<Vec<f64>> {
        Ok(self.nu.predict(&self.features(s)?)?.into_iter().map(sigmoid).collect())
    }

    /// Q(s, ·)
    pub fn q_values(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.theta.predict(&self.features(s)?)
    }

    /// Mean of π(·|s, o).
    pub fn policy_mean(&self, s: &[f64], option: usize) -> Result<Vec<f64>> {
        self.zeta.mean(&self.features(s)?, option)
    }

    /// log π(a|s, o)
    pub fn log_prob(&self, s: &[f64], option: usize, action: &[f64]) -> Result<f64> {
        self.zeta.log_prob(&self.features(s)?, option, action)
    }

    /// V(s) = Σ_o μ(o|s) Q(s, o)
    pub fn value(&self, s: &[f64]) -> Result<f64> {
        let mu = self.option_probs(s)?;
        let q = self.q_values(s)?;
        Ok(mu.iter().zip(&q).map(|(m, q)| m * q).sum())
    }

    pub fn tensors(&self) -> Vec<NamedTensor> {
        let mut out = NamedTensor::collect("z", &self.z);
        out.extend(NamedTensor::collect("zeta", &self.zeta));
        out.extend(NamedTensor::collect("nu", &self.nu));
        out.extend(NamedTensor::collect("theta", &self.theta));
        out
    }

    /// Overwrites every head from parsed tensors; shapes must match `self`.
    pub fn restore(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        NamedTensor::restore("z", tensors, &mut self.z)?;
        NamedTensor::restore("zeta", tensors, &mut self.zeta)?;
        NamedTensor::restore("nu", tensors, &mut self.nu)?;
        NamedTensor::restore("theta", tensors, &mut self.theta)
    }
}

/// Optimizer state for the four heads.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentOptimizers {
    pub z: Adam,
    pub zeta: Adam,
    pub nu: Adam,
    pub theta: Adam,
}

impl AgentOptimizers {
    pub fn new(params: &AgentParams) -> Self {
        AgentOptimizers {
            z: Adam::new(&params.z),
            zeta: Adam::new(&params.zeta),
            nu: Adam::new(&params.nu),
            theta: Adam::new(&params.theta),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateConfig {
    pub gamma: f64,
    pub rho_max: f64,
    pub entropy_coef: f64,
    pub lr_theta: f64,
    pub lr_zeta: f64,
    pub lr_nu: f64,
    pub lr_z: f64,
    pub grad_clip: f64,
    /// Update every option with occupancy weights (MOC) or only the executed one (OC).
    pub multi_option: bool,
    /// Use `target - Q` in the actor update instead of the raw `Q(s, o)`.
    pub advantage_baseline: bool,
    /// Scale the actor term by the clipped ratio `ρ`, as the critic loss is.
    pub actor_importance_weight: bool,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        UpdateConfig {
            gamma: 0.98,
            rho_max: 2.0,
            entropy_coef: 0.0,
            lr_theta: 1e-4,
            lr_zeta: 1e-4,
            lr_nu: 1e-4,
            lr_z: 1e-4,
            grad_clip: 5.0,
            multi_option: true,
            advantage_baseline: true,
            actor_importance_weight: true,
        }
    }
}

/// One goal-conditioned step as stored for learning.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    /// `raw_state ‖ goal`
    pub state_in: Vec<f64>,
    pub option: usize,
    /// Pre-clamp Gaussian sample; `behavior_logp` is its density.
    pub action: Vec<f64>,
    pub behavior_logp: f64,
    pub reward: f64,
    /// `raw_state_next ‖ goal`
    pub state_next: Vec<f64>,
    /// Option active on the previous step (equal to `option` on the first step).
    pub prev_option: usize,
    /// Option active on the next step; resampled from μ(·|s′) on the final step.
    pub next_option: usize,
    pub raw_state: Vec<f64>,
    pub raw_state_next: Vec<f64>,
    pub achieved_goal: Vec<f64>,
    pub achieved_goal_next: Vec<f64>,
    pub agent_pos_next: Vec<f64>,
}

impl Transition {
    pub fn goal(&self) -> &[f64] {
        &self.state_in[self.raw_state.len()..]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub desired_goal: Vec<f64>,
    /// Achieved goal within the success threshold on the final step.
    pub success: bool,
    pub episode_return: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Achieved goal of state `s_j`, `j` in `0..=len`.
    pub fn achieved_goal_at(&self, j: usize) -> &[f64] {
        if j == 0 {
            &self.transitions[0].achieved_goal
        } else {
            &self.transitions[j - 1].achieved_goal_next
        }
    }

    /// Raw state `s_j`, `j` in `0..=len`.
    pub fn raw_state_at(&self, j: usize) -> &[f64] {
        if j == 0 {
            &self.transitions[0].raw_state
        } else {
            &self.transitions[j - 1].raw_state_next
        }
    }
}

pub fn concat_goal(state: &[f64], goal: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(state.len() + goal.len());
    v.extend_from_slice(state);
    v.extend_from_slice(goal);
    v
}

fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the cumulative sum; take the last option with mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

pub fn select_option(params: &AgentParams, s: &[f64], rng: &mut impl Rng) -> Result<usize> {
    Ok(sample_categorical(&params.option_probs(s)?, rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledAction {
    /// Clamped to `[-1, 1]`; what the environment receives.
    pub action: Vec<f64>,
    /// The raw Gaussian draw.
    pub sample: Vec<f64>,
    /// Log density of `sample`.
    pub logp: f64,
}

pub fn select_action(params: &AgentParams, s: &[f64], option: usize, rng: &mut impl Rng) -> Result<SampledAction> {
    ensure(option < params.n_options(), || {
        format!("option {option} out of range for {} options", params.n_options())
    })?;
    let mean = params.policy_mean(s, option)?;
    let log_std = params.zeta.log_std_of(option);
    let sample: Vec<f64> = mean
        .iter()
        .zip(log_std)
        .map(|(m, ls)| {
            let eps: f64 = rng.sample(StandardNormal);
            m + ls.exp() * eps
        })
        .collect();
    let logp = gaussian_log_prob_grad(&mean, log_std, &sample)?.logp;
    let action = sample.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
    Ok(SampledAction { action, sample, logp })
}

/// Occupancy weights `p(õ | s, ō)` for every õ given β(s, ō) and μ(·|s).
pub fn occupancy_weights(beta_prev: f64, mu: &[f64], prev_option: usize) -> Vec<f64> {
    mu.iter()
        .enumerate()
        .map(|(o, m)| {
            let stay = if o == prev_option { 1.0 - beta_prev } else { 0.0 };
            stay + beta_prev * m
        })
        .collect()
}

pub fn option_transition_prob(
    params: &AgentParams,
    o_tilde: usize,
    s: &[f64],
    o_bar: usize,
) -> Result<f64> {
    let n = params.n_options();
    ensure(o_tilde < n && o_bar < n, || format!("options must be < {n}"))?;
    let beta = params.terminations(s)?[o_bar];
    let mu = params.option_probs(s)?;
    Ok(occupancy_weights(beta, &mu, o_bar)[o_tilde])
}

/// Quantities of a transition that every update treats as constants.
#[derive(Debug, Clone)]
struct Constants {
    weights: Vec<f64>,
    targets: Vec<f64>,
    rho: Vec<f64>,
}

fn option_mask(params: &AgentParams, tr: &Transition, multi_option: bool) -> Result<Vec<f64>> {
    if multi_option {
        let beta = params.terminations(&tr.state_in)?[tr.prev_option];
        let mu = params.option_probs(&tr.state_in)?;
        Ok(occupancy_weights(beta, &mu, tr.prev_option))
    } else {
        let mut w = vec![0.0; params.n_options()];
        w[tr.option] = 1.0;
        Ok(w)
    }
}

fn targets_all(params: &AgentParams, tr: &Transition, gamma: f64) -> Result<Vec<f64>> {
    let q_next = params.q_values(&tr.state_next)?;
    let beta_next = params.terminations(&tr.state_next)?;
    let mu_next = params.option_probs(&tr.state_next)?;
    let v_next: f64 = mu_next.iter().zip(&q_next).map(|(m, q)| m * q).sum();
    Ok(q_next
        .iter()
        .zip(&beta_next)
        .map(|(q, b)| tr.reward + gamma * ((1.0 - b) * q + b * v_next))
        .collect())
}

fn rho_all(params: &AgentParams, tr: &Transition, rho_max: f64) -> Result<Vec<f64>> {
    let means = params.zeta.net.predict(&params.features(&tr.state_in)?)?;
    let d = params.action_dim();
    (0..params.n_options())
        .map(|o| {
            let lp = gaussian_log_prob_grad(&means[o * d..(o + 1) * d], params.zeta.log_std_of(o), &tr.action)?.logp;
            Ok((lp - tr.behavior_logp).exp().min(rho_max))
        })
        .collect()
}

fn constants(params: &AgentParams, tr: &Transition, cfg: &UpdateConfig) -> Result<Constants> {
    check_transition(params, tr)?;
    Ok(Constants {
        weights: option_mask(params, tr, cfg.multi_option)?,
        targets: targets_all(params, tr, cfg.gamma)?,
        rho: rho_all(params, tr, cfg.rho_max)?,
    })
}

fn check_transition(params: &AgentParams, tr: &Transition) -> Result<()> {
    let n = params.n_options();
    ensure(tr.option < n && tr.prev_option < n && tr.next_option < n, || {
        format!("transition options out of range for {n} options")
    })?;
    ensure(
        tr.state_in.len() == params.input_dim() && tr.state_next.len() == params.input_dim(),
        || {
            format!(
                "transition states have lengths {}/{}, network expects {}",
                tr.state_in.len(),
                tr.state_next.len(),
                params.input_dim()
            )
        },
    )?;
    ensure(tr.action.len() == params.action_dim(), || "action length mismatch".into())
}

/// One-step importance-weighted target for option `o_tilde` and its clipped ratio.
pub fn td_target(
    params: &AgentParams,
    tr: &Transition,
    o_tilde: usize,
    gamma: f64,
    rho_max: f64,
) -> Result<(f64, f64)> {
    check_transition(params, tr)?;
    ensure(o_tilde < params.n_options(), || format!("option {o_tilde} out of range"))?;
    ensure((0.0..1.0).contains(&gamma), || format!("gamma {gamma} outside [0, 1)"))?;
    let target = targets_all(params, tr, gamma)?[o_tilde];
    let rho = rho_all(params, tr, rho_max)?[o_tilde];
    Ok((target, rho))
}

fn non_empty<T>(batch: &[T]) -> Result<f64> {
    if batch.is_empty() {
        Err(Error::contract("update called with an empty batch"))
    } else {
        Ok(batch.len() as f64)
    }
}

/// Critic loss `mean_t Σ_õ p(õ) ρ(õ) (y(õ) - Q(s, õ))² / 2` and its gradient w.r.t. θ.
pub fn evaluation_loss<T: Borrow<Transition>>(
    params: &AgentParams,
    batch: &[T],
    cfg: &UpdateConfig,
) -> Result<(f64, Mlp)> {
    let b = non_empty(batch)?;
    let mut grad = params.theta.zeros_like();
    let mut loss = 0.0;
    for tr in batch {
        let tr = tr.borrow();
        let c = constants(params, tr, cfg)?;
        let (q, cache) = params.theta.forward(&params.features(&tr.state_in)?)?;
        let mut dq = vec![0.0; q.len()];
        for o in 0..q.len() {
            let w = c.weights[o] * c.rho[o];
            let err = c.targets[o] - q[o];
            loss += w * err * err / 2.0 / b;
            dq[o] = -w * err / b;
        }
        params.theta.backward_into(cache, &dq, &mut grad)?;
    }
    Ok((loss, grad))
}

/// Actor objective `mean_t Σ_õ p(õ) [ρ(õ) log π(a|s,õ) Â(õ) + c H(π(·|s,õ))]` and its gradient w.r.t. ζ.
///
/// `ρ` is 1 when [`UpdateConfig::actor_importance_weight`] is off.
pub fn improvement_objective<T: Borrow<Transition>>(
    params: &AgentParams,
    batch: &[T],
    cfg: &UpdateConfig,
) -> Result<(f64, GaussianPolicy)> {
    let b = non_empty(batch)?;
    let d = params.action_dim();
    let mut grad = params.zeta.zeros_like();
    let mut objective = 0.0;
    for tr in batch {
        let tr = tr.borrow();
        let c = constants(params, tr, cfg)?;
        let q = params.q_values(&tr.state_in)?;
        let (means, cache) = params.zeta.forward(&params.features(&tr.state_in)?)?;
        let mut dmeans = vec![0.0; means.len()];
        for o in 0..params.n_options() {
            let w = c.weights[o];
            if w == 0.0 {
                continue;
            }
            let adv = if cfg.advantage_baseline {
                c.targets[o] - q[o]
            } else {
                q[o]
            };
            let rho = if cfg.actor_importance_weight { c.rho[o] } else { 1.0 };
            let log_std = params.zeta.log_std_of(o);
            let g = gaussian_log_prob_grad(&means[o * d..(o + 1) * d], log_std, &tr.action)?;
            objective += w * (rho * g.logp * adv + cfg.entropy_coef * gaussian_entropy(log_std)) / b;
            for i in 0..d {
                dmeans[o * d + i] = w * rho * adv * g.dmean[i] / b;
                grad.log_std[o * d + i] += w * (rho * adv * g.dlog_std[i] + cfg.entropy_coef) / b;
            }
        }
        params.zeta.net.backward_into(cache, &dmeans, &mut grad.net)?;
    }
    Ok((objective, grad))
}

/// Termination loss `mean_t β(s′, o) (Q(s′, o) - V(s′))` for the executed option.
pub fn termination_loss<T: Borrow<Transition>>(params: &AgentParams, batch: &[T]) -> Result<(f64, Mlp)> {
    let b = non_empty(batch)?;
    let mut grad = params.nu.zeros_like();
    let mut loss = 0.0;
    for tr in batch {
        let tr = tr.borrow();
        check_transition(params, tr)?;
        let q = params.q_values(&tr.state_next)?;
        let v = params.value(&tr.state_next)?;
        let adv = q[tr.option] - v;
        let (logits, cache) = params.nu.forward(&params.features(&tr.state_next)?)?;
        let beta = sigmoid(logits[tr.option]);
        loss += beta * adv / b;
        let mut dl = vec![0.0; logits.len()];
        dl[tr.option] = beta * (1.0 - beta) * adv / b;
        params.nu.backward_into(cache, &dl, &mut grad)?;
    }
    Ok((loss, grad))
}

/// Meta-policy objective `mean_t β(s′, o) μ(o′|s′) Q(s′, o′)` with β and Q held constant.
pub fn meta_policy_objective<T: Borrow<Transition>>(params: &AgentParams, batch: &[T]) -> Result<(f64, Mlp)> {
    let b = non_empty(batch)?;
    let mut grad = params.z.zeros_like();
    let mut objective = 0.0;
    for tr in batch {
        let tr = tr.borrow();
        check_transition(params, tr)?;
        let beta = params.terminations(&tr.state_next)?[tr.option];
        let q = params.q_values(&tr.state_next)?[tr.next_option];
        let (logits, cache) = params.z.forward(&params.features(&tr.state_next)?)?;
        let mu = softmax(&logits);
        let target = tr.next_option;
        objective += beta * mu[target] * q / b;
        let scale = beta * q / b;
        let dl: Vec<f64> = (0..mu.len())
            .map(|k| {
                let delta = if k == target { 1.0 } else { 0.0 };
                scale * mu[target] * (delta - mu[k])
            })
            .collect();
        params.z.backward_into(cache, &dl, &mut grad)?;
    }
    Ok((objective, grad))
}

fn descend<P: ParamSet>(params: &mut P, opt: &mut Adam, mut grad: P, lr: f64, clip: f64) -> Result<()> {
    clip_grad_norm(&mut grad, clip);
    opt.step(params, &grad, lr)
}

fn negate<P: ParamSet>(mut grad: P) -> P {
    for t in grad.tensors_mut() {
        t.iter_mut().for_each(|g| *g = -*g);
    }
    grad
}

/// Critic update. Returns the loss before the step.
pub fn evaluation_step<T: Borrow<Transition>>(
    params: &mut AgentParams,
    opt: &mut AgentOptimizers,
    batch: &[T],
    cfg: &UpdateConfig,
) -> Result<f64> {
    let (loss, grad) = evaluation_loss(params, batch, cfg)?;
    descend(&mut params.theta, &mut opt.theta, grad, cfg.lr_theta, cfg.grad_clip)?;
    Ok(loss)
}

/// Intra-option policy ascent step. Returns the objective before the step.
pub fn improvement_step<T: Borrow<Transition>>(
    params: &mut AgentParams,
    opt: &mut AgentOptimizers,
    batch: &[T],
    cfg: &UpdateConfig,
) -> Result<f64> {
    let (objective, grad) = improvement_objective(params, batch, cfg)?;
    descend(&mut params.zeta, &mut opt.zeta, negate(grad), cfg.lr_zeta, cfg.grad_clip)?;
    Ok(objective)
}

pub fn termination_update<T: Borrow<Transition>>(
    params: &mut AgentParams,
    opt: &mut AgentOptimizers,
    batch: &[T],
    cfg: &UpdateConfig,
) -> Result<f64> {
    let (loss, grad) = termination_loss(params, batch)?;
    descend(&mut params.nu, &mut opt.nu, grad, cfg.lr_nu, cfg.grad_clip)?;
    Ok(loss)
}

pub fn meta_policy_update<T: Borrow<Transition>>(
    params: &mut AgentParams,
    opt: &mut AgentOptimizers,
    batch: &[T],
    cfg: &UpdateConfig,
) -> Result<f64> {
    let (objective, grad) = meta_policy_objective(params, batch)?;
    descend(&mut params.z, &mut opt.z, negate(grad), cfg.lr_z, cfg.grad_clip)?;
    Ok(objective)
}

/// Evaluation, improvement, termination and meta-policy updates on one minibatch, in that order.
pub fn update_minibatch<T: Borrow<Transition>>(
    params: &mut AgentParams,
    opt: &mut AgentOptimizers,
    batch: &[T],
    cfg: &UpdateConfig,
) -> Result<()> {
    evaluation_step(params, opt, batch, cfg)?;
    improvement_step(params, opt, batch, cfg)?;
    termination_update(params, opt, batch, cfg)?;
    meta_policy_update(params, opt, batch, cfg)?;
    Ok(())
}

/// Runs one full episode with the option/termination control flow.
pub fn run_episode(params: &AgentParams, env: &mut PointEnv, rng: &mut impl Rng) -> Result<Trajectory> {
    let desc = env.descriptor().clone();
    let obs: GoalObservation = env.reset();
    let goal = obs.desired_goal.clone();
    let mut raw = obs.state;
    let mut achieved = obs.achieved_goal;
    let mut s = concat_goal(&raw, &goal);
    let mut option = select_option(params, &s, rng)?;
    let mut prev_option = option;
    let mut transitions = Vec::with_capacity(desc.horizon);
    let mut episode_return = 0.0;
    let mut success = false;

    for t in 0..desc.horizon {
        let act = select_action(params, &s, option, rng)?;
        let step = env.step(&act.action)?;
        let raw_next = step.observation.state;
        let s_next = concat_goal(&raw_next, &goal);
        let next_option = if t + 1 == desc.horizon {
            select_option(params, &s_next, rng)?
        } else {
            let beta = params.terminations(&s_next)?[option];
            if rng.random::<f64>() < beta {
                select_option(params, &s_next, rng)?
            } else {
                option
            }
        };
        episode_return += step.reward;
        success = step.is_success;
        transitions.push(Transition {
            state_in: s,
            option,
            action: act.sample,
            behavior_logp: act.logp,
            reward: step.reward,
            state_next: s_next.clone(),
            prev_option,
            next_option,
            raw_state: raw,
            raw_state_next: raw_next.clone(),
            achieved_goal: achieved,
            achieved_goal_next: step.observation.achieved_goal.clone(),
            agent_pos_next: raw_next[desc.agent_pos_indices.clone()].to_vec(),
        });
        prev_option = option;
        option = next_option;
        raw = raw_next;
        achieved = step.observation.achieved_goal;
        s = s_next;
    }
    Ok(Trajectory {
        transitions,
        desired_goal: goal,
        success,
        episode_return,
    })
}

/// Collects `steps / horizon` complete episodes.
pub fn collect_iteration(
    params: &AgentParams,
    env: &mut PointEnv,
    rng: &mut impl Rng,
    steps: usize,
) -> Result<Vec<Trajectory>> {
    let horizon = env.descriptor().horizon;
    ensure(steps > 0 && steps % horizon == 0, || {
        format!("steps per iteration ({steps}) must be a positive multiple of the horizon ({horizon})")
    })?;
    (0..steps / horizon).map(|_| run_episode(params, env, rng)).collect()
}
