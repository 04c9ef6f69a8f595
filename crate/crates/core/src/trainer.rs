//! Experiment orchestration: configuration, the collect/relabel/update iteration loop,
//! metrics and CSV output.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agent::{collect_iteration, update_minibatch, AgentOptimizers, AgentParams, InputMap, Trajectory, Transition, UpdateConfig};
use crate::env::{distance, EnvDescriptor, EnvId, PointEnv};
use crate::error::{ensure, Error, Result};
use crate::hindsight::{
    displacement_filter, k_schedule, merge_shuffle_partition, relabel_2her, relabel_her, sparse_reward_fn,
    HindsightConfig, Provenance, RelabeledTransition, Strategy,
};
use crate::nn::write_params_text;

const STREAM_INIT: u64 = 0;
const STREAM_COLLECT: u64 = 1;
const STREAM_RELABEL: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algo {
    /// Multi-updates option-critic: every option is updated on every transition.
    Moc,
    /// Plain option-critic: only the executed option is updated.
    Oc,
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algo::Moc => "moc",
            Algo::Oc => "oc",
        })
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moc" => Ok(Algo::Moc),
            "oc" => Ok(Algo::Oc),
            other => Err(Error::Parse(format!("unknown algorithm `{other}` (expected moc or oc)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HindsightVariant {
    None,
    Her,
    TwoHer,
}

impl fmt::Display for HindsightVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HindsightVariant::None => "none",
            HindsightVariant::Her => "her",
            HindsightVariant::TwoHer => "2her",
        })
    }
}

impl FromStr for HindsightVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(HindsightVariant::None),
            "her" => Ok(HindsightVariant::Her),
            "2her" => Ok(HindsightVariant::TwoHer),
            other => Err(Error::Parse(format!("unknown hindsight variant `{other}` (expected none, her or 2her)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvId,
    pub algo: Algo,
    pub hindsight: HindsightVariant,
    pub n_options: usize,
    pub steps_per_iteration: usize,
    pub n_iterations: usize,
    pub minibatch_size: usize,
    pub seed: u64,
    pub hidden_units: usize,
    pub lr_theta: f64,
    pub lr_zeta: f64,
    pub lr_nu: f64,
    pub lr_z: f64,
    pub gamma: f64,
    pub entropy_coef: f64,
    pub rho_max: f64,
    pub grad_clip: f64,
    pub advantage_baseline: bool,
    pub actor_importance_weight: bool,
    /// Start the critic's output bias at this fraction of the discounted return of an episode
    /// that never reaches its goal; 0 starts it at zero.
    pub pessimistic_init: f64,
    /// Feed the scaled agent-object offset to the networks (push only).
    pub agent_object_features: bool,
    pub her: HindsightConfig,
    pub output: Option<PathBuf>,
}

/// Ten times the rate of the full-scale setting: at 500 steps per iteration and a few hundred
/// iterations, 1e-4 leaves the critic far from converged when the runs end.
pub const DEFAULT_LR: f64 = 1e-3;

impl ExperimentConfig {
    /// Per-task defaults. Push scales the 2HER shut-off iteration with the run length.
    pub fn defaults(env: EnvId, hindsight: HindsightVariant) -> Self {
        let n_iterations = match env {
            EnvId::PointReach => 150,
            EnvId::PointPush => 400,
        };
        let mut her = HindsightConfig::default();
        let entropy_coef = match env {
            EnvId::PointReach => {
                her.k0 = 4;
                0.0
            }
            EnvId::PointPush => {
                her.k0 = 8;
                her.k_decay_interval = 37;
                her.c_r = 0.8;
                her.disable_2her_at = Some(scaled_disable(n_iterations));
                0.005
            }
        };
        ExperimentConfig {
            env,
            algo: Algo::Moc,
            hindsight,
            n_options: 2,
            steps_per_iteration: 500,
            n_iterations,
            minibatch_size: 64,
            seed: 0,
            hidden_units: crate::agent::DEFAULT_HIDDEN,
            lr_theta: DEFAULT_LR,
            lr_zeta: DEFAULT_LR,
            lr_nu: DEFAULT_LR,
            lr_z: DEFAULT_LR,
            gamma: 0.98,
            entropy_coef,
            rho_max: 2.0,
            grad_clip: 5.0,
            advantage_baseline: true,
            actor_importance_weight: true,
            pessimistic_init: 1.0,
            agent_object_features: true,
            her,
            output: None,
        }
    }

    pub fn descriptor(&self) -> EnvDescriptor {
        self.env.descriptor()
    }

    pub fn update_config(&self) -> UpdateConfig {
        UpdateConfig {
            gamma: self.gamma,
            rho_max: self.rho_max,
            entropy_coef: self.entropy_coef,
            lr_theta: self.lr_theta,
            lr_zeta: self.lr_zeta,
            lr_nu: self.lr_nu,
            lr_z: self.lr_z,
            grad_clip: self.grad_clip,
            multi_option: self.algo == Algo::Moc,
            advantage_baseline: self.advantage_baseline,
            actor_importance_weight: self.actor_importance_weight,
        }
    }

    /// All violated constraints, empty when the configuration is usable.
    pub fn violations(&self) -> Vec<String> {
        let desc = self.descriptor();
        let mut v = Vec::new();
        if self.n_options < 1 {
            v.push("n_options must be >= 1".into());
        }
        if self.steps_per_iteration == 0 || self.steps_per_iteration % desc.horizon != 0 {
            v.push(format!(
                "steps_per_iteration ({}) must be a positive multiple of the horizon ({})",
                self.steps_per_iteration, desc.horizon
            ));
        }
        if self.minibatch_size < 1 {
            v.push("minibatch_size must be >= 1".into());
        }
        if self.hidden_units < 1 {
            v.push("hidden_units must be >= 1".into());
        }
        if self.hindsight == HindsightVariant::TwoHer && !desc.has_object {
            v.push(format!("2her requires an environment with an object; {} has none", self.env));
        }
        if !(self.pessimistic_init >= 0.0 && self.pessimistic_init.is_finite()) {
            v.push(format!("pessimistic_init must be a finite number >= 0, got {}", self.pessimistic_init));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            v.push(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        for (name, lr) in [
            ("lr_theta", self.lr_theta),
            ("lr_zeta", self.lr_zeta),
            ("lr_nu", self.lr_nu),
            ("lr_z", self.lr_z),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                v.push(format!("{name} must be a positive finite number, got {lr}"));
            }
        }
        if !(self.entropy_coef >= 0.0) {
            v.push(format!("entropy_coef must be >= 0, got {}", self.entropy_coef));
        }
        if !(self.rho_max > 0.0) {
            v.push(format!("rho_max must be > 0, got {}", self.rho_max));
        }
        if !(self.grad_clip > 0.0) {
            v.push(format!("grad_clip must be > 0, got {}", self.grad_clip));
        }
        v.extend(self.her.violations());
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Applies one `key = value` setting. Keys are the field names of this struct and of
    /// [`HindsightConfig`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Parse(format!("invalid value `{value}` for `{key}`")))
        }
        fn optional(key: &str, value: &str) -> Result<Option<usize>> {
            if value == "none" {
                Ok(None)
            } else {
                parse(key, value).map(Some)
            }
        }
        match key {
            "env" => self.env = value.parse()?,
            "algo" => self.algo = value.parse()?,
            "hindsight" => self.hindsight = value.parse()?,
            "n_options" => self.n_options = parse(key, value)?,
            "steps_per_iteration" => self.steps_per_iteration = parse(key, value)?,
            "n_iterations" => self.n_iterations = parse(key, value)?,
            "minibatch_size" => self.minibatch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "hidden_units" => self.hidden_units = parse(key, value)?,
            "lr_theta" => self.lr_theta = parse(key, value)?,
            "lr_zeta" => self.lr_zeta = parse(key, value)?,
            "lr_nu" => self.lr_nu = parse(key, value)?,
            "lr_z" => self.lr_z = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "entropy_coef" => self.entropy_coef = parse(key, value)?,
            "rho_max" => self.rho_max = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "advantage_baseline" => self.advantage_baseline = parse(key, value)?,
            "actor_importance_weight" => self.actor_importance_weight = parse(key, value)?,
            "pessimistic_init" => self.pessimistic_init = parse(key, value)?,
            "agent_object_features" => self.agent_object_features = parse(key, value)?,
            "k0" => self.her.k0 = parse(key, value)?,
            "k_decay_interval" => self.her.k_decay_interval = optional(key, value)?.unwrap_or(usize::MAX),
            "c_r" => self.her.c_r = parse(key, value)?,
            "delta_displacement" => self.her.delta_displacement = parse(key, value)?,
            "disable_2her_at" => self.her.disable_2her_at = optional(key, value)?,
            "strategy" => self.her.strategy = value.parse::<Strategy>()?,
            "separate_sets" => self.her.separate_sets = parse(key, value)?,
            "substitute_state_in" => self.her.substitute_state_in = parse(key, value)?,
            "output" => self.output = (value != "none").then(|| PathBuf::from(value)),
            other => return Err(Error::Parse(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// `key = value` lines covering every field; parseable by [`parse_kv_text`].
    pub fn to_kv_text(&self) -> String {
        let none_or = |v: Option<usize>| v.map_or_else(|| "none".to_string(), |v| v.to_string());
        let decay = (self.her.k_decay_interval != usize::MAX).then_some(self.her.k_decay_interval);
        let fields: Vec<(&str, String)> = vec![
            ("env", self.env.to_string()),
            ("algo", self.algo.to_string()),
            ("hindsight", self.hindsight.to_string()),
            ("n_options", self.n_options.to_string()),
            ("steps_per_iteration", self.steps_per_iteration.to_string()),
            ("n_iterations", self.n_iterations.to_string()),
            ("minibatch_size", self.minibatch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("hidden_units", self.hidden_units.to_string()),
            ("lr_theta", self.lr_theta.to_string()),
            ("lr_zeta", self.lr_zeta.to_string()),
            ("lr_nu", self.lr_nu.to_string()),
            ("lr_z", self.lr_z.to_string()),
            ("gamma", self.gamma.to_string()),
            ("entropy_coef", self.entropy_coef.to_string()),
            ("rho_max", self.rho_max.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("advantage_baseline", self.advantage_baseline.to_string()),
            ("actor_importance_weight", self.actor_importance_weight.to_string()),
            ("pessimistic_init", self.pessimistic_init.to_string()),
            ("agent_object_features", self.agent_object_features.to_string()),
            ("k0", self.her.k0.to_string()),
            ("k_decay_interval", none_or(decay)),
            ("c_r", self.her.c_r.to_string()),
            ("delta_displacement", self.her.delta_displacement.to_string()),
            ("disable_2her_at", none_or(self.her.disable_2her_at)),
            ("strategy", self.her.strategy.to_string()),
            ("separate_sets", self.her.separate_sets.to_string()),
            ("substitute_state_in", self.her.substitute_state_in.to_string()),
            (
                "output",
                self.output
                    .as_ref()
                    .map_or_else(|| "none".to_string(), |p| p.display().to_string()),
            ),
        ];
        fields.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Resolves a configuration from a config file's settings and command-line overrides,
    /// later entries winning. The environment and hindsight variant are resolved first so
    /// their defaults apply. On push, `disable_2her_at` defaults to
    /// `ceil(150 * n_iterations / 1500)` unless set explicitly.
    pub fn resolve(settings: &[(String, String)]) -> Result<Self> {
        let last = |key: &str| settings.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let env: EnvId = last("env").unwrap_or("point-reach").parse()?;
        let hindsight: HindsightVariant = last("hindsight").unwrap_or("her").parse()?;
        let mut cfg = ExperimentConfig::defaults(env, hindsight);
        for (k, v) in settings {
            cfg.set(k, v)?;
        }
        if last("disable_2her_at").is_none() && env == EnvId::PointPush {
            cfg.her.disable_2her_at = Some(scaled_disable(cfg.n_iterations));
        }
        Ok(cfg)
    }
}

/// `ceil(150 * n_iterations / 1500)`
pub fn scaled_disable(n_iterations: usize) -> usize {
    (150 * n_iterations).div_ceil(1500)
}

/// Parses flat `key = value` text. Blank lines and `#` comments are skipped.
pub fn parse_kv_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    pub option_usage: Vec<f64>,
    pub real_transitions: usize,
    pub relabeled_transitions: usize,
    pub her_transitions: usize,
    pub two_her_transitions: usize,
    pub accepted_trajectories: usize,
    pub k: usize,
}

/// Fraction of episodes that ended with the achieved goal within `epsilon_success`.
pub fn success_rate(trajectories: &[Trajectory]) -> Result<f64> {
    ensure(!trajectories.is_empty(), || "success_rate of an empty trajectory list".into())?;
    let hits = trajectories.iter().filter(|t| t.success).count();
    Ok(hits as f64 / trajectories.len() as f64)
}

/// Success recomputed from the final achieved and desired goals.
pub fn final_distance_success(traj: &Trajectory, epsilon_success: f64) -> bool {
    traj.transitions
        .last()
        .is_some_and(|tr| distance(&tr.achieved_goal_next, &traj.desired_goal) < epsilon_success)
}

/// Share of timesteps during which each option was active.
pub fn option_usage(trajectories: &[Trajectory], n_options: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_options];
    for tr in trajectories.iter().flat_map(|t| &t.transitions) {
        counts[tr.option] += 1;
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![0.0; n_options];
    }
    counts.into_iter().map(|c| c as f64 / total as f64).collect()
}

/// Trailing mean over `min(window, t + 1)` values.
pub fn moving_average(series: &[f64], window: usize) -> Result<Vec<f64>> {
    ensure(window >= 1, || "moving average window must be >= 1".into())?;
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for t in 0..series.len() {
        sum += series[t];
        if t >= window {
            sum -= series[t - window];
        }
        out.push(sum / window.min(t + 1) as f64);
    }
    Ok(out)
}

pub fn metrics_csv_header(n_options: usize) -> String {
    let mut h = String::from("iteration,success_rate,mean_return,real_transitions,relabeled_transitions");
    for o in 0..n_options {
        h.push_str(&format!(",opt_usage_{o}"));
    }
    h
}

pub fn metrics_csv_text(rows: &[IterationMetrics], n_options: usize) -> Result<String> {
    let mut out = metrics_csv_header(n_options);
    out.push('\n');
    for r in rows {
        ensure(r.option_usage.len() == n_options, || {
            format!("row {} has {} option columns, expected {n_options}", r.iteration, r.option_usage.len())
        })?;
        out.push_str(&format!(
            "{},{:.6},{:.6},{},{}",
            r.iteration, r.success_rate, r.mean_return, r.real_transitions, r.relabeled_transitions
        ));
        for u in &r.option_usage {
            out.push_str(&format!(",{u:.6}"));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_metrics_csv(rows: &[IterationMetrics], n_options: usize, path: &Path) -> Result<()> {
    let text = metrics_csv_text(rows, n_options)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Training state for one experiment. Single-threaded and fully determined by the config.
pub struct Trainer {
    pub config: ExperimentConfig,
    pub params: AgentParams,
    optimizers: AgentOptimizers,
    env: PointEnv,
    collect_rng: ChaCha8Rng,
    relabel_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
    iteration: usize,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

impl Trainer {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let desc = config.descriptor();
        let mut init = stream(config.seed, STREAM_INIT);
        let params = AgentParams::with_input_map(
            InputMap::for_env(&desc, config.agent_object_features),
            desc.action_dim,
            config.n_options,
            config.hidden_units,
            &mut init,
        )?;
        let mut params = params;
        let failed_return = -(1.0 - config.gamma.powi(desc.horizon as i32)) / (1.0 - config.gamma);
        let q0 = config.pessimistic_init * failed_return;
        params.theta.output.bias.iter_mut().for_each(|b| *b = q0);
        let optimizers = AgentOptimizers::new(&params);
        let env = PointEnv::new(config.env, config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1));
        Ok(Trainer {
            params,
            optimizers,
            env,
            collect_rng: stream(config.seed, STREAM_COLLECT),
            relabel_rng: stream(config.seed, STREAM_RELABEL),
            shuffle_rng: stream(config.seed, STREAM_SHUFFLE),
            iteration: 0,
            config,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Relabeled transitions for one iteration's trajectories, plus the number of trajectories
    /// that passed the displacement filter.
    pub fn relabel(&mut self, trajectories: &[Trajectory], k: usize) -> Result<(Vec<RelabeledTransition>, usize)> {
        let desc = self.config.descriptor();
        let reward_fn = sparse_reward_fn(&desc);
        let her = &self.config.her;
        let use_2her = self.config.hindsight == HindsightVariant::TwoHer && her.two_her_active(self.iteration);
        let mut out = Vec::new();
        let mut accepted = 0;
        if self.config.hindsight == HindsightVariant::None {
            return Ok((out, 0));
        }
        for traj in trajectories {
            if !displacement_filter(traj, her.delta_displacement, &desc)? {
                continue;
            }
            accepted += 1;
            let batch = if use_2her {
                relabel_2her(traj, her, k, &reward_fn, &desc, &mut self.relabel_rng)?
            } else {
                relabel_her(traj, her, k, &reward_fn, &desc, &mut self.relabel_rng)?
            };
            out.extend(batch);
        }
        Ok((out, accepted))
    }

    /// Collect, relabel, update; buffers live only for the duration of this call.
    pub fn run_iteration(&mut self) -> Result<IterationMetrics> {
        let k = k_schedule(self.iteration, &self.config.her);
        let trajectories = collect_iteration(
            &self.params,
            &mut self.env,
            &mut self.collect_rng,
            self.config.steps_per_iteration,
        )?;
        let (relabeled, accepted) = self.relabel(&trajectories, k)?;

        let real: Vec<Transition> = trajectories.iter().flat_map(|t| t.transitions.iter().cloned()).collect();
        let her_count = relabeled.iter().filter(|r| r.provenance == Provenance::Her).count();
        let two_her_count = relabeled.iter().filter(|r| r.provenance == Provenance::TwoHer).count();
        let metrics = IterationMetrics {
            iteration: self.iteration,
            success_rate: success_rate(&trajectories)?,
            mean_return: trajectories.iter().map(|t| t.episode_return).sum::<f64>() / trajectories.len() as f64,
            option_usage: option_usage(&trajectories, self.config.n_options),
            real_transitions: real.len(),
            relabeled_transitions: relabeled.len(),
            her_transitions: her_count,
            two_her_transitions: two_her_count,
            accepted_trajectories: accepted,
            k,
        };

        let batches = merge_shuffle_partition(real, relabeled, self.config.minibatch_size, &mut self.shuffle_rng)?;
        let update = self.config.update_config();
        for batch in &batches {
            update_minibatch(&mut self.params, &mut self.optimizers, batch, &update)?;
        }
        self.iteration += 1;
        Ok(metrics)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub metrics: Vec<IterationMetrics>,
    pub params: AgentParams,
}

/// Runs every iteration; writes `metrics.csv`, `params.txt` and `config.resolved.txt` when an
/// output directory is configured.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let mut trainer = Trainer::new(config.clone())?;
    let mut metrics = Vec::with_capacity(config.n_iterations);
    for _ in 0..config.n_iterations {
        metrics.push(trainer.run_iteration()?);
    }
    if let Some(dir) = &config.output {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_metrics_csv(&metrics, config.n_options, &dir.join("metrics.csv"))?;
        let params_path = dir.join("params.txt");
        fs::write(&params_path, write_params_text(&trainer.params.tensors())).map_err(|e| Error::io(&params_path, e))?;
        let cfg_path = dir.join("config.resolved.txt");
        fs::write(&cfg_path, config.to_kv_text()).map_err(|e| Error::io(&cfg_path, e))?;
    }
    Ok(ExperimentOutput {
        metrics,
        params: trainer.params,
    })
}

/// Runs independent experiments on separate threads; results come back in input order.
pub fn run_many(configs: &[ExperimentConfig]) -> Vec<Result<ExperimentOutput>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = configs
            .iter()
            .map(|cfg| scope.spawn(move || run_experiment(cfg)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("experiment thread panicked"))
            .collect()
    })
}

/// Mean of `series` over its last `window` entries.
pub fn tail_mean(series: &[f64], window: usize) -> f64 {
    let start = series.len().saturating_sub(window);
    let tail = &series[start..];
    if tail.is_empty() {
        0.0
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}
