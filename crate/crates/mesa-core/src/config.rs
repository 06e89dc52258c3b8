//! Typed run configuration: TOML-backed, strict about unknown keys, and
//! validated with error messages that name the offending key.
//!
//! Every field has a sensible default, so a config file only spells out
//! what an experiment overrides. Frozen experiment configs live under
//! `configs/` at the repository root.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::{Error, Result};

/// How a scheduled quantity moves from `start` to `end` over a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnealShape {
    /// Linear interpolation until `t_end_frac`, then flat at `end`.
    Linear,
    /// `start` until `t_end_frac`, then a jump to `end`.
    Step,
}

/// A scheduled scalar: exploration probabilities and ε anneals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnealSchedule {
    /// Value at the start of the run.
    pub start: f64,
    /// Value reached at `t_end_frac` and held afterwards.
    pub end: f64,
    /// Fraction of the budget over which the anneal plays out.
    pub t_end_frac: f64,
    /// Interpolation shape.
    pub shape: AnnealShape,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule {
            start: 0.5,
            end: 0.0,
            t_end_frac: 0.4,
            shape: AnnealShape::Linear,
        }
    }
}

impl AnnealSchedule {
    /// Value at step `t` of a run `budget` steps long.
    pub fn value(&self, t: usize, budget: usize) -> f64 {
        let horizon = (self.t_end_frac * budget as f64).max(1.0);
        match self.shape {
            AnnealShape::Linear => {
                let frac = (t as f64 / horizon).min(1.0);
                self.start + (self.end - self.start) * frac
            }
            AnnealShape::Step => {
                if (t as f64) < horizon {
                    self.start
                } else {
                    self.end
                }
            }
        }
    }

    fn validate(&self, key: &str) -> Result<()> {
        for (name, v) in [("start", self.start), ("end", self.end)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!(
                    "{key}.{name}: must lie in [0, 1], got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.t_end_frac) {
            return Err(Error::InvalidConfig(format!(
                "{key}.t_end_frac: must lie in [0, 1], got {}",
                self.t_end_frac
            )));
        }
        Ok(())
    }
}

/// Behavior-policy noise injected during action selection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExplorationMode {
    /// Always the argmax / deterministic action.
    Greedy,
    /// Each agent independently replaces its action with a uniform one
    /// with probability `eps`.
    EpsGreedy { eps: f64 },
    /// Every agent acts uniformly at random.
    Uniform,
    /// Deterministic action plus Gaussian noise with std `sigma`, clamped
    /// to the action range (continuous control only).
    NoisyDeterministic { sigma: f64 },
}

/// Gradient stepping rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain SGD with global-norm clipping (the default everywhere).
    Sgd,
    /// Adaptive moments; useful for the continuous-control critic.
    Adam,
}

/// Hyperparameters shared by the discrete joint-Q learner and the
/// continuous actor-critic learner. Fields that only one of them reads are
/// documented as such.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerConfig {
    /// Q-network learning rate (discrete learner).
    pub lr: f64,
    /// Actor learning rate (continuous learner).
    pub actor_lr: f64,
    /// Critic learning rate (continuous learner).
    pub critic_lr: f64,
    /// Discount factor.
    pub gamma: f64,
    /// Soft target-update coefficient.
    pub tau: f64,
    /// Minibatch size per gradient step.
    pub batch_size: usize,
    /// Global-norm gradient clip.
    pub grad_clip: f64,
    /// Replay capacity.
    pub buffer_capacity: usize,
    /// Hidden layer widths; empty means a linear head.
    pub hidden: Vec<usize>,
    /// Extra scale on the final layer's init (small → near-zero start).
    pub out_scale: f64,
    /// Behavior-policy noise during training rollouts.
    pub exploration: ExplorationMode,
    /// Environment steps collected before gradient updates begin.
    pub warm_up: usize,
    /// Gradient stepping rule.
    pub optimizer: OptimizerKind,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            lr: 0.05,
            actor_lr: 1e-4,
            critic_lr: 5e-3,
            gamma: 0.95,
            tau: 0.05,
            batch_size: 32,
            grad_clip: 10.0,
            buffer_capacity: 40_000,
            hidden: Vec::new(),
            out_scale: 0.01,
            exploration: ExplorationMode::EpsGreedy { eps: 0.2 },
            warm_up: 3000,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl LearnerConfig {
    fn validate(&self, key: &str) -> Result<()> {
        for (name, v) in [
            ("lr", self.lr),
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("grad_clip", self.grad_clip),
            ("out_scale", self.out_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{key}.{name}: must be positive and finite, got {v}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig(format!(
                "{key}.gamma: must lie in [0, 1), got {}",
                self.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidConfig(format!(
                "{key}.tau: must lie in [0, 1], got {}",
                self.tau
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig(format!(
                "{key}.batch_size: must be at least 1"
            )));
        }
        if self.buffer_capacity == 0 {
            return Err(Error::InvalidConfig(format!(
                "{key}.buffer_capacity: must be at least 1"
            )));
        }
        match self.exploration {
            ExplorationMode::EpsGreedy { eps } if !(0.0..=1.0).contains(&eps) => {
                return Err(Error::InvalidConfig(format!(
                    "{key}.exploration.eps: must lie in [0, 1], got {eps}"
                )));
            }
            ExplorationMode::NoisyDeterministic { sigma } if !(sigma.is_finite() && sigma >= 0.0) => {
                return Err(Error::InvalidConfig(format!(
                    "{key}.exploration.sigma: must be non-negative, got {sigma}"
                )));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Parameters of the high-reward-subspace machinery.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubspaceConfig {
    /// Episode-return threshold for harvesting valuable experience.
    pub r_star: f64,
    /// Densification discount: how fast relabeled reward decays per step
    /// of distance from a rewarding transition.
    pub relabel_gamma: f64,
    /// Exponent of the count-based novelty discount `1 / N^exponent`.
    pub f_d_exponent: f64,
    /// Shaped reward is gated on the embedded point lying within this
    /// distance of some harvested point.
    pub dist_eps: f64,
    /// Number of cluster centroids in the pseudo-count hash.
    pub clusters: usize,
    /// Cap on the merged valuable-set size; sets beyond it are thinned
    /// evenly, keeping the per-step novelty gate affordable on continuous
    /// tasks where harvested points never collide. 0 keeps every point.
    pub mstar_cap: usize,
}

impl Default for SubspaceConfig {
    fn default() -> Self {
        SubspaceConfig {
            r_star: 1.0,
            relabel_gamma: 0.05,
            f_d_exponent: 5.0,
            dist_eps: 0.1,
            clusters: 16,
            mstar_cap: 0,
        }
    }
}

impl SubspaceConfig {
    fn validate(&self, key: &str) -> Result<()> {
        if !self.r_star.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "{key}.r_star: must be finite, got {}",
                self.r_star
            )));
        }
        if !(0.0..1.0).contains(&self.relabel_gamma) {
            return Err(Error::InvalidConfig(format!(
                "{key}.relabel_gamma: must lie in [0, 1), got {}",
                self.relabel_gamma
            )));
        }
        if !(self.f_d_exponent.is_finite() && self.f_d_exponent > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "{key}.f_d_exponent: must be positive, got {}",
                self.f_d_exponent
            )));
        }
        if !(self.dist_eps.is_finite() && self.dist_eps > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "{key}.dist_eps: must be positive, got {}",
                self.dist_eps
            )));
        }
        if self.clusters == 0 {
            return Err(Error::InvalidConfig(format!(
                "{key}.clusters: must be at least 1"
            )));
        }
        Ok(())
    }
}

/// Meta-training schedule: experience harvesting (phase a) and exploration
/// -policy training (phase b).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaTrainConfig {
    /// Episodes of throwaway-policy training per task during harvesting.
    pub collect_episodes: usize,
    /// Harvesting episodes played before the throwaway policy starts its
    /// gradient updates (its behavior is ε-scheduled throughout).
    pub collect_warm_up_episodes: usize,
    /// Gradient steps after each harvesting episode.
    pub collect_updates_per_episode: usize,
    /// ε anneal for the harvesting behavior policy.
    pub collect_eps: AnnealSchedule,
    /// Number of exploration policies to train.
    pub num_policies: usize,
    /// Episode cap per exploration policy.
    pub expl_max_episodes: usize,
    /// Episodes before convergence may be declared.
    pub expl_min_episodes: usize,
    /// Initial episodes with uniform-random behavior before the policy's
    /// own softmax behavior takes over.
    pub expl_uniform_episodes: usize,
    /// Replay gradient steps after each exploration-training episode. Only
    /// the continuous learner consumes this; the discrete learner fits each
    /// finished episode's rows directly.
    pub expl_updates_per_episode: usize,
    /// Moving-average window for convergence detection.
    pub convergence_window: usize,
    /// Relative change across the window below which training stops.
    pub convergence_rel_tol: f64,
    /// Restarts allowed when a policy diverges before giving up.
    pub max_restarts: usize,
    /// Episodes used to refresh the global counts after each policy.
    pub eval_episodes: usize,
    /// ε used during those count-refresh rollouts.
    pub eval_eps: f64,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        MetaTrainConfig {
            collect_episodes: 2500,
            collect_warm_up_episodes: 0,
            collect_updates_per_episode: 5,
            collect_eps: AnnealSchedule {
                start: 1.0,
                end: 0.05,
                t_end_frac: 0.7,
                shape: AnnealShape::Linear,
            },
            num_policies: 8,
            expl_max_episodes: 2500,
            expl_min_episodes: 400,
            expl_uniform_episodes: 50,
            expl_updates_per_episode: 5,
            convergence_window: 50,
            convergence_rel_tol: 0.02,
            max_restarts: 3,
            eval_episodes: 20,
            eval_eps: 0.1,
        }
    }
}

impl MetaTrainConfig {
    fn validate(&self, key: &str) -> Result<()> {
        self.collect_eps.validate(&format!("{key}.collect_eps"))?;
        for (name, v) in [
            ("collect_episodes", self.collect_episodes),
            ("num_policies", self.num_policies),
            ("expl_max_episodes", self.expl_max_episodes),
            ("convergence_window", self.convergence_window),
            ("eval_episodes", self.eval_episodes),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!(
                    "{key}.{name}: must be at least 1"
                )));
            }
        }
        if !(self.convergence_rel_tol.is_finite() && self.convergence_rel_tol > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "{key}.convergence_rel_tol: must be positive, got {}",
                self.convergence_rel_tol
            )));
        }
        if !(0.0..=1.0).contains(&self.eval_eps) {
            return Err(Error::InvalidConfig(format!(
                "{key}.eval_eps: must lie in [0, 1], got {}",
                self.eval_eps
            )));
        }
        Ok(())
    }
}

/// Meta-testing schedule: adapting a fresh learner on a held-out task with
/// scheduled injections of the frozen exploration policies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaTestConfig {
    /// Total environment steps on the held-out task.
    pub budget_steps: usize,
    /// Probability of delegating an episode to an exploration policy.
    pub p_explore: AnnealSchedule,
    /// Per-agent ε applied while executing an exploration policy.
    pub expl_eps: f64,
    /// Learner gradient steps after each episode.
    pub updates_per_episode: usize,
    /// Steps between evaluation-curve points.
    pub eval_interval: usize,
    /// Greedy episodes averaged per evaluation point.
    pub eval_episodes: usize,
}

impl Default for MetaTestConfig {
    fn default() -> Self {
        MetaTestConfig {
            budget_steps: 30_000,
            p_explore: AnnealSchedule::default(),
            expl_eps: 0.2,
            updates_per_episode: 5,
            eval_interval: 1000,
            eval_episodes: 10,
        }
    }
}

impl MetaTestConfig {
    fn validate(&self, key: &str) -> Result<()> {
        self.p_explore.validate(&format!("{key}.p_explore"))?;
        if self.budget_steps == 0 {
            return Err(Error::InvalidConfig(format!(
                "{key}.budget_steps: must be at least 1"
            )));
        }
        if !(0.0..=1.0).contains(&self.expl_eps) {
            return Err(Error::InvalidConfig(format!(
                "{key}.expl_eps: must lie in [0, 1], got {}",
                self.expl_eps
            )));
        }
        if self.eval_interval == 0 || self.eval_episodes == 0 {
            return Err(Error::InvalidConfig(format!(
                "{key}.eval_interval/eval_episodes: must be at least 1"
            )));
        }
        Ok(())
    }
}

/// Which task family an experiment runs on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FamilyConfig {
    /// Single-stage two-agent games, `k ∈ {1, 2}`, `actions` specials.
    OneStep { actions: usize },
    /// Staged two-agent games.
    MultiStage { stages: usize, actions: usize },
    /// Continuous particle worlds; tasks differ in landmark layout and
    /// target landmark, with `k` fixed.
    Particle {
        agents: usize,
        landmarks: usize,
        k: usize,
    },
}

impl Default for FamilyConfig {
    fn default() -> Self {
        FamilyConfig::OneStep { actions: 10 }
    }
}

/// Task family plus train/test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Task family.
    pub family: FamilyConfig,
    /// Number of meta-training tasks.
    pub train_tasks: usize,
    /// Number of held-out meta-test tasks.
    pub test_tasks: usize,
    /// Seed of the task split (fixed per experiment, independent of the
    /// replicate seed).
    pub split_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            family: FamilyConfig::default(),
            train_tasks: 10,
            test_tasks: 3,
            split_seed: 2024,
        }
    }
}

impl ExperimentConfig {
    fn validate(&self, key: &str) -> Result<()> {
        if self.train_tasks == 0 || self.test_tasks == 0 {
            return Err(Error::InvalidConfig(format!(
                "{key}.train_tasks/test_tasks: must be at least 1"
            )));
        }
        match &self.family {
            FamilyConfig::OneStep { actions } if *actions < 2 => Err(Error::InvalidConfig(
                format!("{key}.actions: must be at least 2"),
            )),
            FamilyConfig::MultiStage { stages, actions } if *stages == 0 || *actions < 2 => {
                Err(Error::InvalidConfig(format!(
                    "{key}.stages/actions: must be positive (actions at least 2)"
                )))
            }
            FamilyConfig::Particle {
                agents,
                landmarks,
                k,
            } if *agents == 0 || *landmarks == 0 || *k == 0 || k > agents => {
                Err(Error::InvalidConfig(format!(
                    "{key}.agents/landmarks/k: need agents ≥ 1, landmarks ≥ 1, 1 ≤ k ≤ agents"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Parameter grid for the numerical theory lab.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    /// Action counts to sweep.
    pub u_values: Vec<usize>,
    /// Penalty gaps to sweep.
    pub delta_values: Vec<f64>,
    /// Monte-Carlo sample count for failure-probability estimates.
    pub mc_samples: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            u_values: vec![2, 3, 4, 6, 8, 12, 16],
            delta_values: vec![0.1, 0.25, 0.5, 0.75, 0.9],
            mc_samples: 20_000,
        }
    }
}

/// Top-level run configuration, one per experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Base seed; replicate `i` runs at `seed + i`.
    pub seed: u64,
    /// Replicate seeds (offsets are not assumed; each entry is a full seed).
    pub seeds: Vec<u64>,
    /// Output directory; CLI `--out` overrides.
    pub out_dir: Option<PathBuf>,
    /// Worker cap for parallel sections; the `MESA_WORKERS` environment
    /// variable overrides, and the default is the machine's parallelism.
    pub workers: Option<usize>,
    /// Task family and split.
    pub experiment: ExperimentConfig,
    /// Learner hyperparameters.
    pub learner: LearnerConfig,
    /// Subspace machinery parameters.
    pub subspace: SubspaceConfig,
    /// Meta-training schedule.
    pub meta_train: MetaTrainConfig,
    /// Meta-testing schedule.
    pub meta_test: MetaTestConfig,
    /// Theory-lab sweep (used by the `theory` command only).
    pub theory: TheoryConfig,
}

impl RunConfig {
    /// Parses and validates a TOML config string. Unknown keys are
    /// rejected with the key named in the error.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// Serializes back to TOML (artifact snapshots).
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::InvalidConfig(format!("config serialize error: {e}")))
    }

    /// Validates every section.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig(
                "seeds: must list at least one replicate seed".into(),
            ));
        }
        self.experiment.validate("experiment")?;
        self.learner.validate("learner")?;
        self.subspace.validate("subspace")?;
        self.meta_train.validate("meta_train")?;
        self.meta_test.validate("meta_test")?;
        Ok(())
    }
}
