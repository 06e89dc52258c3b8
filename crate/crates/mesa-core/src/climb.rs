//! Climb games: cooperative one-shot and staged coordination games with a
//! risky high-reward action and a safe fallback.
//!
//! In a single stage with `n` agents and `U` actions per agent, one action
//! `u` is special. The team earns 1 when exactly `k` agents pick `u`,
//! `1 − δ` when nobody picks it, and 0 otherwise. Staged variants chain
//! several such stages with independently drawn `(k, u)` per stage; the
//! episode return is the sum of per-stage rewards.
//!
//! The tension is deliberate: the zero band between "nobody" and "exactly
//! k" punishes uncoordinated attempts at `u`, so value-based learners that
//! explore independently tend to retreat to the safe fallback.

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use crate::{Error, Result};

/// Joint action for discrete games: one action index per agent.
pub type JointAction = Vec<usize>;

/// Which structural family a task belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClimbVariant {
    /// Single stage; the episode is one joint action.
    OneStep,
    /// Several chained stages with per-stage `(k, u)`.
    MultiStage,
    /// Continuous 2-D particle world; landmarks play the role of actions.
    Particle,
}

/// Extension fields for the continuous particle variant. The landmark
/// layout is part of the task (fixed across episodes); agents and physics
/// live in [`crate::particle::ParticleWorld`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleParams {
    /// Landmark centers, one per "action"; index `u` is the target.
    pub landmarks: Vec<[f64; 2]>,
    /// Steps per episode.
    pub horizon: usize,
}

/// One stage of a climb game.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    /// Number of agents that must pick the special action for reward 1.
    pub k: usize,
    /// Index of the special action.
    pub u: usize,
}

/// Full specification of a climb task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClimbTaskSpec {
    /// Number of agents `n`.
    pub agents: usize,
    /// Actions per agent `U`.
    pub actions: usize,
    /// Penalty gap δ: the safe fallback pays `1 − δ`.
    pub delta: f64,
    /// Stage definitions, played in order.
    pub stages: Vec<StageSpec>,
    /// Present iff this is a particle-world task.
    #[serde(default)]
    pub particle: Option<ParticleParams>,
}

impl ClimbTaskSpec {
    /// Convenience constructor for a single-stage game.
    pub fn one_step(agents: usize, actions: usize, delta: f64, k: usize, u: usize) -> Result<Self> {
        let spec = ClimbTaskSpec {
            agents,
            actions,
            delta,
            stages: vec![StageSpec { k, u }],
            particle: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks all structural constraints, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.agents == 0 {
            return Err(Error::InvalidConfig("agents: must be at least 1".into()));
        }
        if self.actions < 2 {
            return Err(Error::InvalidConfig(
                "actions: must be at least 2 so a safe fallback exists".into(),
            ));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "delta: must lie in (0, 1), got {}",
                self.delta
            )));
        }
        if self.stages.is_empty() {
            return Err(Error::InvalidConfig("stages: must be non-empty".into()));
        }
        for (t, s) in self.stages.iter().enumerate() {
            if s.k == 0 || s.k > self.agents {
                return Err(Error::InvalidConfig(format!(
                    "stages[{t}].k: must lie in 1..={}, got {}",
                    self.agents, s.k
                )));
            }
            if s.u >= self.actions {
                return Err(Error::InvalidConfig(format!(
                    "stages[{t}].u: must be below actions={}, got {}",
                    self.actions, s.u
                )));
            }
        }
        if let Some(p) = &self.particle {
            if p.landmarks.len() != self.actions {
                return Err(Error::InvalidConfig(format!(
                    "particle.landmarks: need one per action ({}), got {}",
                    self.actions,
                    p.landmarks.len()
                )));
            }
            if p.horizon == 0 {
                return Err(Error::InvalidConfig(
                    "particle.horizon: must be at least 1".into(),
                ));
            }
            if p.landmarks.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig(
                    "particle.landmarks: coordinates must be finite".into(),
                ));
            }
            if self.stages.len() != 1 {
                return Err(Error::InvalidConfig(
                    "stages: particle tasks have exactly one stage".into(),
                ));
            }
        }
        Ok(())
    }

    /// Structural family of this task.
    pub fn variant(&self) -> ClimbVariant {
        if self.particle.is_some() {
            ClimbVariant::Particle
        } else if self.stages.len() == 1 {
            ClimbVariant::OneStep
        } else {
            ClimbVariant::MultiStage
        }
    }

    /// Number of stages.
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Best possible episode return (reward 1 at every stage).
    pub fn max_return(&self) -> f64 {
        self.stages.len() as f64
    }

    /// Episode return of the all-safe strategy (`1 − δ` at every stage).
    pub fn safe_return(&self) -> f64 {
        (1.0 - self.delta) * self.stages.len() as f64
    }

    /// Dimension of each agent's observation vector:
    /// scaled stage index plus the one-hot history of all joint actions.
    pub fn obs_dim(&self) -> usize {
        1 + self.stages.len() * self.agents * self.actions
    }

    /// Dimension of the global state embedding (stage one-hot).
    pub fn state_dim(&self) -> usize {
        self.stages.len()
    }
}

/// Reward of one stage given the joint action.
pub fn stage_reward(stage: StageSpec, delta: f64, actions: &[usize]) -> f64 {
    let count = actions.iter().filter(|&&a| a == stage.u).count();
    if count == stage.k {
        1.0
    } else if count == 0 {
        1.0 - delta
    } else {
        0.0
    }
}

/// Signed one-hot stage embedding: `+1` at the current stage, `−1`
/// elsewhere; all `−1` once the episode is over (`stage == num_stages`).
pub fn stage_embedding(num_stages: usize, stage: usize) -> Array1<f64> {
    Array1::from_shape_fn(num_stages, |j| if j == stage { 1.0 } else { -1.0 })
}

/// Signed one-hot encoding of a joint action: per agent, `+1` at the chosen
/// action and `−1` elsewhere. Length `agents × actions_per_agent`.
pub fn action_embedding(actions_per_agent: usize, joint: &[usize]) -> Array1<f64> {
    let mut v = Array1::from_elem(joint.len() * actions_per_agent, -1.0);
    for (i, &a) in joint.iter().enumerate() {
        v[i * actions_per_agent + a] = 1.0;
    }
    v
}

/// Encodes a joint action as a single index in `0..U^n` (agent 0 is the
/// most significant digit).
pub fn joint_index(joint: &[usize], actions_per_agent: usize) -> usize {
    joint
        .iter()
        .fold(0, |acc, &a| acc * actions_per_agent + a)
}

/// Inverse of [`joint_index`].
pub fn joint_from_index(mut index: usize, agents: usize, actions_per_agent: usize) -> JointAction {
    let mut out = vec![0; agents];
    for slot in out.iter_mut().rev() {
        *slot = index % actions_per_agent;
        index /= actions_per_agent;
    }
    out
}

/// Mutable episode state: current stage and the joint actions played so far.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameState {
    /// Index of the stage about to be played; equals the stage count once
    /// the episode is over.
    pub stage: usize,
    /// Joint actions of completed stages, in order.
    pub history: Vec<JointAction>,
}

/// Result of one environment step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    /// Per-agent observations after the step.
    pub observations: Vec<Array1<f64>>,
    /// Stage reward.
    pub reward: f64,
    /// Whether the episode ended.
    pub done: bool,
}

/// A playable climb game instance.
#[derive(Clone, Debug)]
pub struct ClimbEnv {
    spec: ClimbTaskSpec,
    state: GameState,
}

impl ClimbEnv {
    /// Builds an environment after validating the spec.
    pub fn new(spec: ClimbTaskSpec) -> Result<Self> {
        spec.validate()?;
        if spec.particle.is_some() {
            return Err(Error::InvalidArgument(
                "particle tasks are played by particle::ParticleWorld, not ClimbEnv".into(),
            ));
        }
        Ok(ClimbEnv {
            spec,
            state: GameState {
                stage: 0,
                history: Vec::new(),
            },
        })
    }

    /// Task specification.
    pub fn spec(&self) -> &ClimbTaskSpec {
        &self.spec
    }

    /// Current episode state.
    pub fn state(&self) -> &GameState {
        &self.state
    }

    /// Starts a fresh episode and returns the initial observations.
    pub fn reset(&mut self) -> Vec<Array1<f64>> {
        self.state = GameState {
            stage: 0,
            history: Vec::new(),
        };
        self.observations()
    }

    /// Whether the episode has ended.
    pub fn is_done(&self) -> bool {
        self.state.stage == self.spec.stages.len()
    }

    /// Plays one joint action.
    pub fn step(&mut self, actions: &[usize]) -> Result<StepOutcome> {
        if self.is_done() {
            return Err(Error::InvalidState(
                "episode is over; call reset before stepping again".into(),
            ));
        }
        if actions.len() != self.spec.agents {
            return Err(Error::InvalidArgument(format!(
                "expected {} agent actions, got {}",
                self.spec.agents,
                actions.len()
            )));
        }
        if let Some(&bad) = actions.iter().find(|&&a| a >= self.spec.actions) {
            return Err(Error::InvalidArgument(format!(
                "action index {bad} out of range 0..{}",
                self.spec.actions
            )));
        }
        let stage = self.spec.stages[self.state.stage];
        let reward = stage_reward(stage, self.spec.delta, actions);
        self.state.history.push(actions.to_vec());
        self.state.stage += 1;
        Ok(StepOutcome {
            observations: self.observations(),
            reward,
            done: self.is_done(),
        })
    }

    /// Per-agent observations. The game is fully observed, so every agent
    /// sees the same vector: the scaled stage index followed by signed
    /// one-hots of all past joint actions, zero-padded for future stages.
    pub fn observations(&self) -> Vec<Array1<f64>> {
        let obs = self.global_observation();
        vec![obs; self.spec.agents]
    }

    fn global_observation(&self) -> Array1<f64> {
        let s = self.spec.stages.len();
        let (n, u_dim) = (self.spec.agents, self.spec.actions);
        let mut v = Array1::zeros(1 + s * n * u_dim);
        v[0] = 2.0 * self.state.stage as f64 / s as f64 - 1.0;
        for (t, joint) in self.state.history.iter().enumerate() {
            for (i, &a) in joint.iter().enumerate() {
                let base = 1 + (t * n + i) * u_dim;
                for j in 0..u_dim {
                    v[base + j] = if j == a { 1.0 } else { -1.0 };
                }
            }
        }
        v
    }

    /// Global state embedding: the signed one-hot of the current stage.
    pub fn state_embedding(&self) -> Array1<f64> {
        stage_embedding(self.spec.stages.len(), self.state.stage)
    }
}

/// How a joint action relates to the stage game's pure equilibria.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EquilibriumClass {
    /// Equilibrium paying 1 (exactly `k` agents on the special action).
    OptimalNe,
    /// Equilibrium paying `1 − δ` (nobody on the special action, `k ≥ 2`).
    SafeNe,
    /// Equilibrium paying 0 (possible only for `n ≥ 4`-style counts where
    /// no single deviation reaches the reward bands).
    ZeroNe,
    /// Not an equilibrium: some unilateral deviation strictly improves.
    NotNe,
}

/// Classifies a joint action in closed form. Everything depends only on the
/// number of agents playing the special action.
pub fn classify_equilibrium(
    agents: usize,
    stage: StageSpec,
    joint: &[usize],
) -> EquilibriumClass {
    let c = joint.iter().filter(|&&a| a == stage.u).count();
    let k = stage.k;
    if c == k {
        // Payoff 1 is the maximum, so no deviation can strictly improve.
        return EquilibriumClass::OptimalNe;
    }
    if c == 0 {
        // Safe band: the only threatening deviation is a single agent
        // joining the special action, which wins exactly when k == 1.
        return if k >= 2 {
            EquilibriumClass::SafeNe
        } else {
            EquilibriumClass::NotNe
        };
    }
    // Zero band: a special-action player leaving moves the count to c−1,
    // a fallback player joining moves it to c+1 (only possible if c < n).
    let leave_improves = c - 1 == 0 || c - 1 == k;
    let join_improves = c < agents && c + 1 == k;
    if leave_improves || join_improves {
        EquilibriumClass::NotNe
    } else {
        EquilibriumClass::ZeroNe
    }
}

/// Classifies a joint action by explicitly scanning every unilateral
/// deviation. Exponentially slower than [`classify_equilibrium`]; exists as
/// an independent check.
pub fn classify_equilibrium_brute(
    actions_per_agent: usize,
    stage: StageSpec,
    delta: f64,
    joint: &[usize],
) -> EquilibriumClass {
    let base = stage_reward(stage, delta, joint);
    for i in 0..joint.len() {
        for alt in 0..actions_per_agent {
            if alt == joint[i] {
                continue;
            }
            let mut dev = joint.to_vec();
            dev[i] = alt;
            if stage_reward(stage, delta, &dev) > base {
                return EquilibriumClass::NotNe;
            }
        }
    }
    if base == 1.0 {
        EquilibriumClass::OptimalNe
    } else if base == 0.0 {
        EquilibriumClass::ZeroNe
    } else {
        EquilibriumClass::SafeNe
    }
}

/// A parametric family of climb tasks: every combination of per-stage
/// threshold (drawn from `thresholds`) and special action (any of
/// `actions`), over a fixed number of stages.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskSpace {
    /// Number of agents in every task.
    pub agents: usize,
    /// Actions per agent in every task.
    pub actions: usize,
    /// Stages per task.
    pub num_stages: usize,
    /// Shared penalty gap.
    pub delta: f64,
    /// Allowed per-stage thresholds `k`.
    pub thresholds: Vec<usize>,
}

impl TaskSpace {
    /// The standard single-stage family: two agents, `k ∈ {1, 2}`, any of
    /// `actions` special actions, δ = 1/2. Size `2 × actions`.
    pub fn one_step(actions: usize) -> Self {
        TaskSpace {
            agents: 2,
            actions,
            num_stages: 1,
            delta: 0.5,
            thresholds: vec![1, 2],
        }
    }

    /// The staged family with the same per-stage structure. Size
    /// `(2 × actions)^num_stages`.
    pub fn multi_stage(num_stages: usize, actions: usize) -> Self {
        TaskSpace {
            agents: 2,
            actions,
            num_stages,
            delta: 0.5,
            thresholds: vec![1, 2],
        }
    }

    /// Checks structural constraints, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::InvalidConfig("thresholds: must be non-empty".into()));
        }
        if self.num_stages == 0 {
            return Err(Error::InvalidConfig("num_stages: must be at least 1".into()));
        }
        // Delegate the remaining checks to a representative task.
        self.task(0)?.validate()
    }

    /// Options per stage.
    fn radix(&self) -> u64 {
        (self.thresholds.len() * self.actions) as u64
    }

    /// Number of distinct tasks in the family.
    pub fn len(&self) -> u64 {
        self.radix().pow(self.num_stages as u32)
    }

    /// True iff the family is empty (it never is for valid parameters).
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Decodes a task index (mixed-radix, stage 0 least significant).
    pub fn task(&self, mut index: u64) -> Result<ClimbTaskSpec> {
        if index >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "task index {index} out of range 0..{}",
                self.len()
            )));
        }
        let radix = self.radix();
        let mut stages = Vec::with_capacity(self.num_stages);
        for _ in 0..self.num_stages {
            let digit = (index % radix) as usize;
            index /= radix;
            stages.push(StageSpec {
                k: self.thresholds[digit / self.actions],
                u: digit % self.actions,
            });
        }
        Ok(ClimbTaskSpec {
            agents: self.agents,
            actions: self.actions,
            delta: self.delta,
            stages,
            particle: None,
        })
    }

    /// Draws `count` distinct task indices uniformly without replacement.
    pub fn sample_indices<R: Rng>(&self, rng: &mut R, count: usize) -> Result<Vec<u64>> {
        let total = self.len();
        if count as u64 > total {
            return Err(Error::InvalidArgument(format!(
                "cannot sample {count} distinct tasks from a family of {total}"
            )));
        }
        if total <= 4096 {
            // Small family: partial Fisher–Yates over the full enumeration.
            let mut all: Vec<u64> = (0..total).collect();
            for i in 0..count {
                let j = rng.random_range(i..all.len());
                all.swap(i, j);
            }
            all.truncate(count);
            Ok(all)
        } else {
            // Large family: rejection sampling on indices.
            let mut seen = HashSet::with_capacity(count);
            let mut out = Vec::with_capacity(count);
            while out.len() < count {
                let idx = rng.random_range(0..total);
                if seen.insert(idx) {
                    out.push(idx);
                }
            }
            Ok(out)
        }
    }

    /// Draws `count` distinct tasks uniformly without replacement.
    pub fn sample_tasks<R: Rng>(&self, rng: &mut R, count: usize) -> Result<Vec<ClimbTaskSpec>> {
        self.sample_indices(rng, count)?
            .into_iter()
            .map(|i| self.task(i))
            .collect()
    }
}
