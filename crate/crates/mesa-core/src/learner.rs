//! Off-policy learners behind a shared interface: a centralized joint-action
//! Q-learner for the discrete climb games and a deterministic actor-critic
//! learner for the continuous particle variant.
//!
//! Both learners perform one clipped gradient step per update call, followed
//! immediately by a soft target-network update, and both surface non-finite
//! losses as [`Error::TrainingDiverged`] so the caller can decide whether to
//! restart. Checkpoints serialize parameters, config, and RNG state as JSON;
//! replay contents are deliberately not persisted (they are reproducible from
//! the seeded rollout stream).

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::climb::{joint_from_index, joint_index, JointAction};
use crate::config::{ExplorationMode, LearnerConfig, OptimizerKind};
use crate::nn::{grad_norm, sgd_step, soft_update, Adam, MlpParams};
use crate::replay::{ReplayBuffer, Transition};
use crate::{Error, Result};

/// Largest joint-action head the centralized learner accepts. Beyond this,
/// the joint enumeration stops being "exact and cheap" and a factored learner
/// should be used instead.
pub const MAX_JOINT_ACTIONS: usize = 100;

/// Version stamp written into learner checkpoints.
pub const CHECKPOINT_VERSION: u32 = 1;

// --- Joint-action Q-learning -------------------------------------------------

/// One TD gradient step on the joint-action Q-network.
///
/// Targets are `r + γ·(1−done)·max_a' q_target(s', a')` with `r` the
/// transition's effective (shaped if present, else raw) reward. The gradient
/// on each taken joint-action output is `(2/B)(q − y)`, i.e. the exact
/// gradient of the mean squared TD error over the batch. After the clipped
/// step the target network is soft-updated with `cfg.tau`.
///
/// Returns the mean squared TD error *before* the step.
pub fn q_update(
    q: &mut MlpParams,
    q_target: &mut MlpParams,
    batch: &[&Transition],
    actions_per_agent: usize,
    cfg: &LearnerConfig,
    adam: Option<&mut Adam>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("q_update: empty batch".into()));
    }
    let b = batch.len();
    let in_dim = q.input_dim();
    let out_dim = q.output_dim();
    let mut states = Array2::zeros((b, in_dim));
    let mut next_states = Array2::zeros((b, in_dim));
    let mut taken = Vec::with_capacity(b);
    for (row, t) in batch.iter().enumerate() {
        if t.state.len() != in_dim || t.next_state.len() != in_dim {
            return Err(Error::InvalidArgument(format!(
                "q_update: state dim {} does not match network input dim {in_dim}",
                t.state.len()
            )));
        }
        let joint = discrete_actions(&t.actions, actions_per_agent)?;
        let ji = joint_index(&joint, actions_per_agent);
        if ji >= out_dim {
            return Err(Error::InvalidArgument(format!(
                "q_update: joint action index {ji} out of range for head size {out_dim}"
            )));
        }
        taken.push(ji);
        states.row_mut(row).assign(&t.state);
        next_states.row_mut(row).assign(&t.next_state);
    }

    // Bootstrap targets from the frozen target network.
    let (next_q, _) = q_target.forward(&next_states);
    let (qs, cache) = q.forward(&states);
    let mut loss = 0.0;
    let mut g = Array2::zeros((b, out_dim));
    for (row, t) in batch.iter().enumerate() {
        let max_next = next_q
            .row(row)
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let not_done = if t.done { 0.0 } else { 1.0 };
        let y = t.effective_reward() + cfg.gamma * not_done * max_next;
        let td = qs[[row, taken[row]]] - y;
        loss += td * td;
        g[[row, taken[row]]] = 2.0 / b as f64 * td;
    }
    loss /= b as f64;
    if !loss.is_finite() {
        return Err(Error::TrainingDiverged(format!(
            "q_update: non-finite TD loss {loss}"
        )));
    }

    let grads = q.backward(&cache, &g);
    match adam {
        Some(opt) => opt.step(q, &grads),
        None => sgd_step(q, &grads, cfg.lr, cfg.grad_clip),
    }
    soft_update(q_target, q, cfg.tau);
    if !q.is_finite() {
        return Err(Error::TrainingDiverged(
            "q_update: parameters became non-finite".into(),
        ));
    }
    Ok(loss)
}

/// Greedy joint action of a joint-head Q-network: argmax over the enumerated
/// joint-action outputs, first maximum on ties.
pub fn greedy_joint(
    q: &MlpParams,
    obs: &Array1<f64>,
    agents: usize,
    actions_per_agent: usize,
) -> JointAction {
    let values = q.forward_one(obs);
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    joint_from_index(best, agents, actions_per_agent)
}

/// Per-agent ε-flip over a base joint action: each agent independently
/// replaces its component with a uniform action with probability `eps`.
pub fn eps_flip<R: Rng>(
    base: &JointAction,
    eps: f64,
    actions_per_agent: usize,
    rng: &mut R,
) -> JointAction {
    let mut joint = base.clone();
    for a in joint.iter_mut() {
        if rng.random::<f64>() < eps {
            *a = rng.random_range(0..actions_per_agent);
        }
    }
    joint
}

fn discrete_actions(actions: &Array1<f64>, actions_per_agent: usize) -> Result<JointAction> {
    let mut joint = Vec::with_capacity(actions.len());
    for &a in actions.iter() {
        let idx = a.round();
        if (a - idx).abs() > 1e-9 || idx < 0.0 || idx as usize >= actions_per_agent {
            return Err(Error::InvalidArgument(format!(
                "discrete action {a} is not an index in 0..{actions_per_agent}"
            )));
        }
        joint.push(idx as usize);
    }
    Ok(joint)
}

/// Centralized Q-learner over the enumerated joint action space of a discrete
/// climb game. The head has `U^n` outputs (capped at [`MAX_JOINT_ACTIONS`]),
/// which keeps greedy action selection exact — no per-agent factorization and
/// no coordinate-descent argmax.
#[derive(Debug)]
pub struct JointQLearner {
    agents: usize,
    actions: usize,
    q: MlpParams,
    q_target: MlpParams,
    cfg: LearnerConfig,
    adam: Option<Adam>,
    /// Replay storage; owned by the learner, filled via [`JointQLearner::store`].
    pub buffer: ReplayBuffer,
    rng: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
struct JointQSnapshot {
    format_version: u32,
    kind: String,
    agents: usize,
    actions: usize,
    cfg: LearnerConfig,
    q: MlpParams,
    q_target: MlpParams,
    adam: Option<Adam>,
    rng: ChaCha8Rng,
}

impl JointQLearner {
    /// Builds a learner for `agents` agents with `actions` actions each,
    /// observing `obs_dim`-dimensional embeddings.
    ///
    /// Network sizes are `[obs_dim, cfg.hidden.., U^n]`; with an empty hidden
    /// list the head is a single linear layer, which represents one-step and
    /// stage-one-hot climb observations exactly.
    pub fn new(agents: usize, actions: usize, obs_dim: usize, cfg: LearnerConfig, mut rng: ChaCha8Rng) -> Result<Self> {
        if agents == 0 || actions < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 1 agent and 2 actions, got {agents} and {actions}"
            )));
        }
        let num_joint = (actions as f64).powi(agents as i32);
        if num_joint > MAX_JOINT_ACTIONS as f64 {
            return Err(Error::InvalidConfig(format!(
                "joint action head would need {num_joint} outputs (> {MAX_JOINT_ACTIONS}); \
                 use a factored learner for action spaces this large"
            )));
        }
        let num_joint = num_joint as usize;
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(num_joint);
        let q = MlpParams::init(&mut rng, &sizes, 1.0, cfg.out_scale);
        let q_target = q.clone();
        let adam = match cfg.optimizer {
            OptimizerKind::Sgd => None,
            OptimizerKind::Adam => Some(Adam::new(&q, cfg.lr, cfg.grad_clip)),
        };
        let buffer = ReplayBuffer::new(cfg.buffer_capacity)?;
        Ok(JointQLearner {
            agents,
            actions,
            q,
            q_target,
            cfg,
            adam,
            buffer,
            rng,
        })
    }

    /// Number of agents.
    pub fn agents(&self) -> usize {
        self.agents
    }

    /// Actions per agent.
    pub fn actions_per_agent(&self) -> usize {
        self.actions
    }

    /// Size of the joint-action head.
    pub fn num_joint_actions(&self) -> usize {
        self.q.output_dim()
    }

    /// Learner hyperparameters.
    pub fn config(&self) -> &LearnerConfig {
        &self.cfg
    }

    /// The online Q-network (e.g. for freezing an exploration policy).
    pub fn q_params(&self) -> &MlpParams {
        &self.q
    }

    /// Joint-action values at an observation.
    pub fn values(&self, obs: &Array1<f64>) -> Array1<f64> {
        self.q.forward_one(obs)
    }

    /// Greedy joint action (first maximum on ties).
    pub fn greedy(&self, obs: &Array1<f64>) -> JointAction {
        greedy_joint(&self.q, obs, self.agents, self.actions)
    }

    /// Selects a joint action under the given behavior mode.
    pub fn select_action(&mut self, obs: &Array1<f64>, mode: ExplorationMode) -> Result<JointAction> {
        match mode {
            ExplorationMode::Greedy => Ok(self.greedy(obs)),
            ExplorationMode::EpsGreedy { eps } => {
                let base = self.greedy(obs);
                Ok(eps_flip(&base, eps, self.actions, &mut self.rng))
            }
            ExplorationMode::Uniform => Ok((0..self.agents)
                .map(|_| self.rng.random_range(0..self.actions))
                .collect()),
            ExplorationMode::NoisyDeterministic { .. } => Err(Error::InvalidArgument(
                "noisy-deterministic selection needs a continuous action space".into(),
            )),
        }
    }

    /// Samples a joint action from the softmax over joint-action values at
    /// temperature `temp` (the behavior policy used when training exploration
    /// policies on shaped rewards).
    pub fn softmax_action(&mut self, obs: &Array1<f64>, temp: f64) -> Result<JointAction> {
        if temp <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "softmax temperature must be positive, got {temp}"
            )));
        }
        let values = self.values(obs);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = values.iter().map(|v| ((v - max) / temp).exp()).collect();
        let total: f64 = weights.iter().sum();
        let u = self.rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = weights.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = i;
                break;
            }
        }
        Ok(joint_from_index(pick, self.agents, self.actions))
    }

    /// Appends a transition to the replay buffer.
    pub fn store(&mut self, t: Transition) {
        self.buffer.push(t);
    }

    /// One TD step on a uniform replay sample of `cfg.batch_size`.
    /// Returns `None` without updating while the buffer is smaller than a
    /// batch; otherwise the pre-step TD loss.
    pub fn update(&mut self) -> Result<Option<f64>> {
        if self.buffer.len() < self.cfg.batch_size {
            return Ok(None);
        }
        let batch = self.buffer.sample(&mut self.rng, self.cfg.batch_size)?;
        let loss = q_update(
            &mut self.q,
            &mut self.q_target,
            &batch,
            self.actions,
            &self.cfg,
            self.adam.as_mut(),
        )?;
        Ok(Some(loss))
    }

    /// One TD step on exactly the given rows (used when fitting exploration
    /// policies, whose dataset is the current episode rather than a replay
    /// sample). Returns the pre-step TD loss.
    pub fn update_rows(&mut self, rows: &[Transition]) -> Result<f64> {
        let refs: Vec<&Transition> = rows.iter().collect();
        q_update(
            &mut self.q,
            &mut self.q_target,
            &refs,
            self.actions,
            &self.cfg,
            self.adam.as_mut(),
        )
    }

    /// Writes parameters, config, and RNG state as JSON. Replay contents are
    /// not persisted.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let snap = JointQSnapshot {
            format_version: CHECKPOINT_VERSION,
            kind: "joint_q".into(),
            agents: self.agents,
            actions: self.actions,
            cfg: self.cfg.clone(),
            q: self.q.clone(),
            q_target: self.q_target.clone(),
            adam: self.adam.clone(),
            rng: self.rng.clone(),
        };
        let text = serde_json::to_string(&snap)
            .map_err(|e| Error::InvalidState(format!("checkpoint encode failed: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Restores a learner from [`JointQLearner::save_checkpoint`] output,
    /// with a fresh empty replay buffer.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let snap: JointQSnapshot = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidState(format!("checkpoint decode failed: {e}")))?;
        if snap.kind != "joint_q" || snap.format_version != CHECKPOINT_VERSION {
            return Err(Error::InvalidState(format!(
                "expected joint_q checkpoint v{CHECKPOINT_VERSION}, got {} v{}",
                snap.kind, snap.format_version
            )));
        }
        let buffer = ReplayBuffer::new(snap.cfg.buffer_capacity)?;
        Ok(JointQLearner {
            agents: snap.agents,
            actions: snap.actions,
            q: snap.q,
            q_target: snap.q_target,
            cfg: snap.cfg,
            adam: snap.adam,
            buffer,
            rng: snap.rng,
        })
    }
}

// --- Deterministic actor-critic (continuous control) -------------------------

/// MADDPG-style learner for the particle climb game: per-agent deterministic
/// actors squashed to the `[-1, 1]²` force box by `tanh`, plus one
/// centralized critic over `(state embedding, all agents' actions)`.
#[derive(Debug)]
pub struct MaddpgLearner {
    agents: usize,
    action_dim: usize,
    state_dim: usize,
    actors: Vec<MlpParams>,
    actor_targets: Vec<MlpParams>,
    critic: MlpParams,
    critic_target: MlpParams,
    cfg: LearnerConfig,
    actor_adam: Vec<Option<Adam>>,
    critic_adam: Option<Adam>,
    /// Replay storage; owned by the learner, filled via [`MaddpgLearner::store`].
    pub buffer: ReplayBuffer,
    rng: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
struct MaddpgSnapshot {
    format_version: u32,
    kind: String,
    agents: usize,
    action_dim: usize,
    state_dim: usize,
    cfg: LearnerConfig,
    actors: Vec<MlpParams>,
    actor_targets: Vec<MlpParams>,
    critic: MlpParams,
    critic_target: MlpParams,
    actor_adam: Vec<Option<Adam>>,
    critic_adam: Option<Adam>,
    rng: ChaCha8Rng,
}

impl MaddpgLearner {
    /// Builds the learner. Actors map `obs_dim → action_dim` (pre-squash);
    /// the critic maps `state_dim + agents·action_dim → 1`. Both use
    /// `cfg.hidden` as their hidden sizes.
    pub fn new(
        agents: usize,
        obs_dim: usize,
        state_dim: usize,
        action_dim: usize,
        cfg: LearnerConfig,
        mut rng: ChaCha8Rng,
    ) -> Result<Self> {
        if agents == 0 || action_dim == 0 {
            return Err(Error::InvalidArgument(
                "need at least 1 agent and a 1-D action".into(),
            ));
        }
        let mut actor_sizes = vec![obs_dim];
        actor_sizes.extend_from_slice(&cfg.hidden);
        actor_sizes.push(action_dim);
        let mut critic_sizes = vec![state_dim + agents * action_dim];
        critic_sizes.extend_from_slice(&cfg.hidden);
        critic_sizes.push(1);
        let actors: Vec<MlpParams> = (0..agents)
            .map(|_| MlpParams::init(&mut rng, &actor_sizes, 1.0, cfg.out_scale))
            .collect();
        let critic = MlpParams::init(&mut rng, &critic_sizes, 1.0, cfg.out_scale);
        let actor_targets = actors.clone();
        let critic_target = critic.clone();
        let (actor_adam, critic_adam) = match cfg.optimizer {
            OptimizerKind::Sgd => (vec![None; agents], None),
            OptimizerKind::Adam => (
                actors
                    .iter()
                    .map(|a| Some(Adam::new(a, cfg.actor_lr, cfg.grad_clip)))
                    .collect(),
                Some(Adam::new(&critic, cfg.critic_lr, cfg.grad_clip)),
            ),
        };
        let buffer = ReplayBuffer::new(cfg.buffer_capacity)?;
        Ok(MaddpgLearner {
            agents,
            action_dim,
            state_dim,
            actors,
            actor_targets,
            critic,
            critic_target,
            cfg,
            actor_adam,
            critic_adam,
            buffer,
            rng,
        })
    }

    /// Number of agents.
    pub fn agents(&self) -> usize {
        self.agents
    }

    /// Learner hyperparameters.
    pub fn config(&self) -> &LearnerConfig {
        &self.cfg
    }

    /// Current actor parameters (pre-squash networks), one per agent —
    /// read access for freezing a trained learner into an exploration
    /// policy.
    pub fn actor_params(&self) -> &[MlpParams] {
        &self.actors
    }

    /// Deterministic (greedy) forces: one `tanh`-squashed row per agent.
    pub fn act(&self, observations: &[Array1<f64>]) -> Result<Array2<f64>> {
        if observations.len() != self.agents {
            return Err(Error::InvalidArgument(format!(
                "expected {} observations, got {}",
                self.agents,
                observations.len()
            )));
        }
        let mut forces = Array2::zeros((self.agents, self.action_dim));
        for (i, obs) in observations.iter().enumerate() {
            let pre = self.actors[i].forward_one(obs);
            for (j, v) in pre.iter().enumerate() {
                forces[[i, j]] = v.tanh();
            }
        }
        Ok(forces)
    }

    /// Selects a force matrix under the given behavior mode.
    pub fn select_action(
        &mut self,
        observations: &[Array1<f64>],
        mode: ExplorationMode,
    ) -> Result<Array2<f64>> {
        match mode {
            ExplorationMode::Greedy => self.act(observations),
            ExplorationMode::NoisyDeterministic { sigma } => {
                let mut forces = self.act(observations)?;
                if sigma > 0.0 {
                    for v in forces.iter_mut() {
                        let noise: f64 = self.rng.sample(StandardNormal);
                        *v = (*v + sigma * noise).clamp(-1.0, 1.0);
                    }
                }
                Ok(forces)
            }
            ExplorationMode::Uniform => {
                let mut forces = Array2::zeros((self.agents, self.action_dim));
                for v in forces.iter_mut() {
                    *v = self.rng.random_range(-1.0..=1.0);
                }
                Ok(forces)
            }
            ExplorationMode::EpsGreedy { eps } => {
                // Per-agent mixing: each agent's force row is replaced by a
                // uniform draw from the box with probability eps.
                let mut forces = self.act(observations)?;
                for i in 0..self.agents {
                    if self.rng.random::<f64>() < eps {
                        for j in 0..self.action_dim {
                            forces[[i, j]] = self.rng.random_range(-1.0..=1.0);
                        }
                    }
                }
                Ok(forces)
            }
        }
    }

    /// Appends a transition to the replay buffer. `actions` must hold the
    /// flattened `agents × action_dim` force matrix.
    pub fn store(&mut self, t: Transition) {
        self.buffer.push(t);
    }

    /// One critic TD step plus one deterministic-policy-gradient step per
    /// actor on a uniform replay sample. Returns `None` while the buffer is
    /// smaller than a batch; otherwise `(critic loss, mean critic value under
    /// the current actors)`, both measured before their respective steps.
    pub fn update(&mut self) -> Result<Option<(f64, f64)>> {
        if self.buffer.len() < self.cfg.batch_size {
            return Ok(None);
        }
        let batch: Vec<Transition> = self
            .buffer
            .sample(&mut self.rng, self.cfg.batch_size)?
            .into_iter()
            .cloned()
            .collect();
        let critic_loss = self.critic_step(&batch)?;
        let actor_value = self.actor_steps(&batch)?;
        Ok(Some((critic_loss, actor_value)))
    }

    // Critic TD step: targets use the *target* actors' squashed actions at the
    // next observations and the target critic's value.
    fn critic_step(&mut self, batch: &[Transition]) -> Result<f64> {
        let b = batch.len();
        let in_dim = self.state_dim + self.agents * self.action_dim;
        let mut inputs = Array2::zeros((b, in_dim));
        let mut next_inputs = Array2::zeros((b, in_dim));
        for (row, t) in batch.iter().enumerate() {
            if t.state.len() != self.state_dim || t.actions.len() != self.agents * self.action_dim {
                return Err(Error::InvalidArgument(format!(
                    "critic batch row has state dim {} and action dim {}, expected {} and {}",
                    t.state.len(),
                    t.actions.len(),
                    self.state_dim,
                    self.agents * self.action_dim
                )));
            }
            for (j, v) in t.state.iter().enumerate() {
                inputs[[row, j]] = *v;
                next_inputs[[row, j]] = t.next_state[j];
            }
            for (j, v) in t.actions.iter().enumerate() {
                inputs[[row, self.state_dim + j]] = *v;
            }
            for (i, obs) in t.next_observations.iter().enumerate() {
                let pre = self.actor_targets[i].forward_one(obs);
                for (j, v) in pre.iter().enumerate() {
                    next_inputs[[row, self.state_dim + i * self.action_dim + j]] = v.tanh();
                }
            }
        }
        let (next_q, _) = self.critic_target.forward(&next_inputs);
        let (qs, cache) = self.critic.forward(&inputs);
        let mut g = Array2::zeros((b, 1));
        let mut loss = 0.0;
        for (row, t) in batch.iter().enumerate() {
            let not_done = if t.done { 0.0 } else { 1.0 };
            let y = t.effective_reward() + self.cfg.gamma * not_done * next_q[[row, 0]];
            let td = qs[[row, 0]] - y;
            loss += td * td;
            g[[row, 0]] = 2.0 / b as f64 * td;
        }
        loss /= b as f64;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged(format!(
                "critic step: non-finite TD loss {loss}"
            )));
        }
        let grads = self.critic.backward(&cache, &g);
        match self.critic_adam.as_mut() {
            Some(opt) => opt.step(&mut self.critic, &grads),
            None => sgd_step(&mut self.critic, &grads, self.cfg.critic_lr, self.cfg.grad_clip),
        }
        soft_update(&mut self.critic_target, &self.critic, self.cfg.tau);
        if !self.critic.is_finite() {
            return Err(Error::TrainingDiverged(
                "critic step: parameters became non-finite".into(),
            ));
        }
        Ok(loss)
    }

    // Deterministic policy gradient: each actor ascends the shared critic
    // w.r.t. its own action block, holding the other agents' stored actions
    // fixed. The ascent direction flows backward through the critic's action
    // inputs and the tanh squash into the actor parameters.
    fn actor_steps(&mut self, batch: &[Transition]) -> Result<f64> {
        let b = batch.len();
        let in_dim = self.state_dim + self.agents * self.action_dim;
        let mut value_before = 0.0;
        for i in 0..self.agents {
            // Own observations and pre-squash actor outputs for this agent.
            let obs_dim = self.actors[i].input_dim();
            let mut obs_batch = Array2::zeros((b, obs_dim));
            for (row, t) in batch.iter().enumerate() {
                if t.observations.len() != self.agents {
                    return Err(Error::InvalidArgument(format!(
                        "actor batch row has {} observations, expected {}",
                        t.observations.len(),
                        self.agents
                    )));
                }
                obs_batch.row_mut(row).assign(&t.observations[i]);
            }
            let (pre, actor_cache) = self.actors[i].forward(&obs_batch);
            let squashed = pre.mapv(f64::tanh);

            // Critic input with agent i's stored action block replaced by the
            // live actor output.
            let mut inputs = Array2::zeros((b, in_dim));
            for (row, t) in batch.iter().enumerate() {
                for (j, v) in t.state.iter().enumerate() {
                    inputs[[row, j]] = *v;
                }
                for (j, v) in t.actions.iter().enumerate() {
                    inputs[[row, self.state_dim + j]] = *v;
                }
                for j in 0..self.action_dim {
                    inputs[[row, self.state_dim + i * self.action_dim + j]] = squashed[[row, j]];
                }
            }
            let (qs, critic_cache) = self.critic.forward(&inputs);
            value_before += qs.sum() / b as f64;

            // d(mean q)/d(critic input), restricted to agent i's action block.
            let cot = Array2::from_elem((b, 1), 1.0 / b as f64);
            let (_, input_grads) = self.critic.backward_io(&critic_cache, &cot);
            let start = self.state_dim + i * self.action_dim;
            let dq_da = input_grads.slice(ndarray::s![.., start..start + self.action_dim]);

            // Chain through tanh; negate to turn ascent into a descent step.
            let mut actor_cot = Array2::zeros((b, self.action_dim));
            for row in 0..b {
                for j in 0..self.action_dim {
                    let a = squashed[[row, j]];
                    actor_cot[[row, j]] = -dq_da[[row, j]] * (1.0 - a * a);
                }
            }
            let grads = self.actors[i].backward(&actor_cache, &actor_cot);
            if !grad_norm(&grads).is_finite() {
                return Err(Error::TrainingDiverged(format!(
                    "actor {i} step: non-finite policy gradient"
                )));
            }
            match self.actor_adam[i].as_mut() {
                Some(opt) => opt.step(&mut self.actors[i], &grads),
                None => sgd_step(&mut self.actors[i], &grads, self.cfg.actor_lr, self.cfg.grad_clip),
            }
            soft_update(&mut self.actor_targets[i], &self.actors[i], self.cfg.tau);
        }
        Ok(value_before / self.agents as f64)
    }

    /// Writes parameters, config, and RNG state as JSON. Replay contents are
    /// not persisted.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let snap = MaddpgSnapshot {
            format_version: CHECKPOINT_VERSION,
            kind: "maddpg".into(),
            agents: self.agents,
            action_dim: self.action_dim,
            state_dim: self.state_dim,
            cfg: self.cfg.clone(),
            actors: self.actors.clone(),
            actor_targets: self.actor_targets.clone(),
            critic: self.critic.clone(),
            critic_target: self.critic_target.clone(),
            actor_adam: self.actor_adam.clone(),
            critic_adam: self.critic_adam.clone(),
            rng: self.rng.clone(),
        };
        let text = serde_json::to_string(&snap)
            .map_err(|e| Error::InvalidState(format!("checkpoint encode failed: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Restores a learner from [`MaddpgLearner::save_checkpoint`] output,
    /// with a fresh empty replay buffer.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let snap: MaddpgSnapshot = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidState(format!("checkpoint decode failed: {e}")))?;
        if snap.kind != "maddpg" || snap.format_version != CHECKPOINT_VERSION {
            return Err(Error::InvalidState(format!(
                "expected maddpg checkpoint v{CHECKPOINT_VERSION}, got {} v{}",
                snap.kind, snap.format_version
            )));
        }
        let buffer = ReplayBuffer::new(snap.cfg.buffer_capacity)?;
        Ok(MaddpgLearner {
            agents: snap.agents,
            action_dim: snap.action_dim,
            state_dim: snap.state_dim,
            actors: snap.actors,
            actor_targets: snap.actor_targets,
            critic: snap.critic,
            critic_target: snap.critic_target,
            cfg: snap.cfg,
            actor_adam: snap.actor_adam,
            critic_adam: snap.critic_adam,
            buffer,
            rng: snap.rng,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::climb::stage_embedding;
    use crate::replay::Provenance;
    use crate::rng::{stream, tags};
    use ndarray::array;

    fn transition(
        state: Array1<f64>,
        actions: Vec<f64>,
        reward: f64,
        next_state: Array1<f64>,
        done: bool,
    ) -> Transition {
        Transition {
            state,
            observations: Vec::new(),
            actions: Array1::from_vec(actions),
            reward,
            shaped_reward: None,
            next_state,
            next_observations: Vec::new(),
            done,
            provenance: Provenance::Learner,
        }
    }

    fn small_cfg() -> LearnerConfig {
        LearnerConfig {
            lr: 0.05,
            tau: 0.05,
            batch_size: 4,
            buffer_capacity: 64,
            hidden: vec![],
            out_scale: 0.01,
            ..LearnerConfig::default()
        }
    }

    #[test]
    fn terminal_batch_with_unit_reward_and_zero_net_has_loss_one() {
        let cfg = small_cfg();
        let mut q = MlpParams::init(&mut stream(0, tags::EXPLORE), &[1, 4], 1.0, 1.0);
        for w in &mut q.weights {
            w.fill(0.0);
        }
        let mut tq = q.clone();
        let rows: Vec<Transition> = (0..4)
            .map(|_| transition(array![1.0], vec![0.0, 1.0], 1.0, array![-1.0], true))
            .collect();
        let refs: Vec<&Transition> = rows.iter().collect();
        let loss = q_update(&mut q, &mut tq, &refs, 2, &cfg, None).unwrap();
        assert!((loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_discount_targets_equal_rewards() {
        let cfg = LearnerConfig {
            gamma: 0.0,
            ..small_cfg()
        };
        let mut q = MlpParams::init(&mut stream(1, tags::EXPLORE), &[1, 4], 1.0, 1.0);
        for w in &mut q.weights {
            w.fill(0.0);
        }
        let mut tq = q.clone();
        let row = transition(array![1.0], vec![1.0, 0.0], 0.7, array![1.0], false);
        let refs = [&row];
        let loss = q_update(&mut q, &mut tq, &refs, 2, &cfg, None).unwrap();
        // Non-terminal transition, but gamma = 0 makes the target exactly the
        // reward: loss = (0 − 0.7)².
        assert!((loss - 0.49).abs() < 1e-12);
    }

    #[test]
    fn repeated_updates_on_2x2_game_reach_reward_argmax() {
        // One-step 2x2 game: reward matrix over joint actions.
        let rewards = [0.2, 0.0, 0.9, 0.5]; // joint index = 2*a0 + a1
        let cfg = LearnerConfig {
            batch_size: 4,
            ..small_cfg()
        };
        let mut learner =
            JointQLearner::new(2, 2, 1, cfg, stream(2, tags::EXPLORE)).unwrap();
        for _ in 0..8 {
            for ji in 0..4 {
                let joint = joint_from_index(ji, 2, 2);
                learner.store(transition(
                    array![1.0],
                    joint.iter().map(|&a| a as f64).collect(),
                    rewards[ji],
                    array![-1.0],
                    true,
                ));
            }
        }
        for _ in 0..400 {
            learner.update().unwrap();
        }
        let greedy = learner.greedy(&array![1.0]);
        assert_eq!(greedy, vec![1, 0], "greedy should match reward argmax");
        // And the argmax flips if the optimal cell is missing from the data:
        // without (1,0) rows the learner can only prefer cells it has seen.
        let cfg2 = LearnerConfig {
            batch_size: 4,
            ..small_cfg()
        };
        let mut partial =
            JointQLearner::new(2, 2, 1, cfg2, stream(3, tags::EXPLORE)).unwrap();
        for _ in 0..8 {
            for ji in [0usize, 1, 3] {
                let joint = joint_from_index(ji, 2, 2);
                partial.store(transition(
                    array![1.0],
                    joint.iter().map(|&a| a as f64).collect(),
                    rewards[ji],
                    array![-1.0],
                    true,
                ));
            }
        }
        for _ in 0..400 {
            partial.update().unwrap();
        }
        assert_eq!(
            partial.greedy(&array![1.0]),
            vec![1, 1],
            "without the optimal cell in replay the greedy action is the best visited cell"
        );
    }

    #[test]
    fn joint_head_size_guard_rejects_large_action_spaces() {
        let cfg = small_cfg();
        let err = JointQLearner::new(3, 10, 4, cfg, stream(4, tags::EXPLORE)).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)), "got {err:?}");
    }

    #[test]
    fn eps_one_selection_is_uniform_over_joint_actions() {
        let cfg = LearnerConfig {
            buffer_capacity: 16,
            ..small_cfg()
        };
        let mut learner =
            JointQLearner::new(2, 10, 3, cfg, stream(5, tags::EXPLORE)).unwrap();
        let obs = array![1.0, -1.0, 0.5];
        let draws = 10_000;
        let mut counts = vec![0usize; 100];
        for _ in 0..draws {
            let a = learner
                .select_action(&obs, ExplorationMode::EpsGreedy { eps: 1.0 })
                .unwrap();
            counts[joint_index(&a, 10)] += 1;
        }
        let expected = draws as f64 / 100.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // 99 degrees of freedom; the p = 0.01 critical value is ~134.6.
        assert!(chi2 < 134.6, "chi-squared {chi2} too large for uniformity");
    }

    #[test]
    fn eps_zero_matches_greedy_and_uniform_ignores_values() {
        let cfg = small_cfg();
        let mut learner =
            JointQLearner::new(2, 3, 2, cfg, stream(6, tags::EXPLORE)).unwrap();
        let obs = array![0.3, -0.7];
        for _ in 0..50 {
            let greedy = learner.greedy(&obs);
            let eps0 = learner
                .select_action(&obs, ExplorationMode::EpsGreedy { eps: 0.0 })
                .unwrap();
            assert_eq!(greedy, eps0);
        }
        // Uniform mode must occasionally disagree with greedy.
        let greedy = learner.greedy(&obs);
        let mut saw_other = false;
        for _ in 0..100 {
            if learner.select_action(&obs, ExplorationMode::Uniform).unwrap() != greedy {
                saw_other = true;
            }
        }
        assert!(saw_other);
    }

    #[test]
    fn softmax_concentrates_on_high_values_at_low_temperature() {
        let cfg = small_cfg();
        let mut learner =
            JointQLearner::new(1, 4, 4, cfg, stream(7, tags::EXPLORE)).unwrap();
        // Force known values through a linear head on a one-hot input.
        learner.q.weights[0] = array![
            [0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0],
        ];
        learner.q.biases[0] = array![0.0, 3.0, 0.0, -1.0];
        let obs = array![0.0, 0.0, 0.0, 0.0];
        let mut hits = 0;
        for _ in 0..500 {
            if learner.softmax_action(&obs, 0.25).unwrap() == vec![1] {
                hits += 1;
            }
        }
        // exp(12) dominance: essentially every draw picks action 1.
        assert!(hits >= 495, "only {hits}/500 draws picked the high value");
        assert!(learner.softmax_action(&obs, 0.0).is_err());
    }

    #[test]
    fn update_returns_none_until_a_full_batch_is_stored() {
        let cfg = small_cfg();
        let mut learner =
            JointQLearner::new(2, 2, 1, cfg, stream(8, tags::EXPLORE)).unwrap();
        for _ in 0..3 {
            assert!(learner.update().unwrap().is_none());
            learner.store(transition(
                array![1.0],
                vec![0.0, 0.0],
                0.0,
                array![-1.0],
                true,
            ));
        }
        learner.store(transition(
            array![1.0],
            vec![1.0, 1.0],
            1.0,
            array![-1.0],
            true,
        ));
        assert!(learner.update().unwrap().is_some());
    }

    #[test]
    fn checkpoint_round_trip_preserves_values_and_rng_stream() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("learner.json");
        let cfg = small_cfg();
        let mut learner =
            JointQLearner::new(2, 3, 4, cfg, stream(9, tags::EXPLORE)).unwrap();
        let rows: Vec<Transition> = (0..4)
            .map(|i| {
                transition(
                    stage_embedding(4, i % 4),
                    vec![(i % 3) as f64, ((i + 1) % 3) as f64],
                    i as f64 * 0.1,
                    stage_embedding(4, (i + 1) % 4),
                    i % 2 == 0,
                )
            })
            .collect();
        learner.update_rows(&rows).unwrap();
        learner.save_checkpoint(&path).unwrap();
        let mut restored = JointQLearner::load_checkpoint(&path).unwrap();
        let obs = stage_embedding(4, 1);
        assert_eq!(learner.values(&obs), restored.values(&obs));
        // The serialized RNG stream continues identically.
        let a1 = learner
            .select_action(&obs, ExplorationMode::EpsGreedy { eps: 0.7 })
            .unwrap();
        let a2 = restored
            .select_action(&obs, ExplorationMode::EpsGreedy { eps: 0.7 })
            .unwrap();
        assert_eq!(a1, a2);
    }

    #[test]
    fn divergence_is_reported_not_propagated_silently() {
        let cfg = LearnerConfig {
            lr: f64::INFINITY,
            ..small_cfg()
        };
        let mut q = MlpParams::init(&mut stream(10, tags::EXPLORE), &[1, 4], 1.0, 1.0);
        let mut tq = q.clone();
        let row = transition(array![1.0], vec![1.0, 0.0], 1.0, array![1.0], true);
        let refs = [&row];
        let err = q_update(&mut q, &mut tq, &refs, 2, &cfg, None).unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged(_)), "got {err:?}");
    }

    // --- continuous-control learner ---

    fn particle_cfg() -> LearnerConfig {
        LearnerConfig {
            actor_lr: 0.05,
            critic_lr: 0.05,
            tau: 0.05,
            batch_size: 8,
            buffer_capacity: 256,
            hidden: vec![32],
            out_scale: 0.1,
            ..LearnerConfig::default()
        }
    }

    fn particle_transition(state: Array1<f64>, obs: Vec<Array1<f64>>, actions: Vec<f64>) -> Transition {
        Transition {
            next_state: state.clone(),
            next_observations: obs.clone(),
            state,
            observations: obs,
            actions: Array1::from_vec(actions),
            reward: 0.0,
            shaped_reward: None,
            done: false,
            provenance: Provenance::Learner,
        }
    }

    #[test]
    fn constant_critic_leaves_actors_unchanged() {
        let cfg = particle_cfg();
        let mut learner =
            MaddpgLearner::new(2, 3, 2, 2, cfg, stream(11, tags::EXPLORE)).unwrap();
        // A constant critic: zero weights, constant bias.
        for w in &mut learner.critic.weights {
            w.fill(0.0);
        }
        learner.critic.biases.last_mut().unwrap().fill(5.0);
        let before = learner.actors.clone();
        let batch: Vec<Transition> = (0..8)
            .map(|i| {
                particle_transition(
                    array![0.1 * i as f64, -0.2],
                    vec![array![0.0, 0.1, 0.2], array![0.3, -0.1, 0.0]],
                    vec![0.1, 0.2, -0.3, 0.4],
                )
            })
            .collect();
        learner.actor_steps(&batch).unwrap();
        for (a, b) in learner.actors.iter().zip(&before) {
            for (wa, wb) in a.weights.iter().zip(&b.weights) {
                assert_eq!(wa, wb, "flat critic must produce exactly zero actor gradients");
            }
        }
    }

    #[test]
    fn actor_ascends_injected_quadratic_critic_to_its_maximum() {
        // 1 agent, 1-D action, constant observation. First fit the critic to
        // Q(s, a) = −(a − 0.3)² by supervised regression on a grid, then run
        // actor-only ascent and check convergence to 0.3.
        let cfg = LearnerConfig {
            actor_lr: 0.05,
            critic_lr: 0.0,
            tau: 0.0,
            batch_size: 1,
            buffer_capacity: 16,
            hidden: vec![64],
            out_scale: 1.0,
            ..LearnerConfig::default()
        };
        let mut learner =
            MaddpgLearner::new(1, 1, 1, 1, cfg, stream(12, tags::EXPLORE)).unwrap();

        // Supervised fit of the critic on inputs [s=0, a]. The fit has to be
        // tight enough that the fitted argmax sits within the final tolerance,
        // so use adaptive moments rather than plain SGD.
        let grid: Vec<f64> = (0..=200).map(|i| -1.0 + 0.01 * i as f64).collect();
        let mut inputs = Array2::zeros((grid.len(), 2));
        let mut targets = Array1::zeros(grid.len());
        for (row, &a) in grid.iter().enumerate() {
            inputs[[row, 1]] = a;
            targets[row] = -(a - 0.3) * (a - 0.3);
        }
        let mut fit_mse = f64::INFINITY;
        for lr in [0.01, 1e-3, 1e-4] {
            let mut opt = Adam::new(&learner.critic, lr, 10.0);
            for _ in 0..8000 {
                let (out, cache) = learner.critic.forward(&inputs);
                let mut cot = Array2::zeros((grid.len(), 1));
                fit_mse = 0.0;
                for row in 0..grid.len() {
                    let err = out[[row, 0]] - targets[row];
                    fit_mse += err * err / grid.len() as f64;
                    cot[[row, 0]] = 2.0 / grid.len() as f64 * err;
                }
                let grads = learner.critic.backward(&cache, &cot);
                opt.step(&mut learner.critic, &grads);
            }
        }
        assert!(fit_mse < 1e-6, "critic fit too loose: mse {fit_mse}");

        // Actor-only ascent (critic_lr = 0 and tau = 0 freeze everything else).
        let batch = vec![particle_transition(array![0.0], vec![array![0.0]], vec![0.0])];
        for _ in 0..4000 {
            learner.actor_steps(&batch).unwrap();
        }
        let force = learner.act(&[array![0.0]]).unwrap();
        assert!(
            (force[[0, 0]] - 0.3).abs() < 0.01,
            "actor converged to {} instead of 0.3",
            force[[0, 0]]
        );
    }

    #[test]
    fn critic_step_reduces_td_error_on_fixed_batch() {
        let cfg = particle_cfg();
        let mut learner =
            MaddpgLearner::new(2, 3, 2, 2, cfg, stream(13, tags::EXPLORE)).unwrap();
        let batch: Vec<Transition> = (0..8)
            .map(|i| {
                let mut t = particle_transition(
                    array![0.05 * i as f64, 0.1],
                    vec![array![0.0, 0.1, 0.2], array![0.3, -0.1, 0.0]],
                    vec![0.1, -0.2, 0.3, 0.0],
                );
                t.reward = if i % 2 == 0 { 1.0 } else { 0.0 };
                t.done = true;
                t
            })
            .collect();
        let first = learner.critic_step(&batch).unwrap();
        let mut last = first;
        for _ in 0..200 {
            last = learner.critic_step(&batch).unwrap();
        }
        assert!(
            last < first * 0.5,
            "TD loss should drop substantially on a fixed batch: {first} → {last}"
        );
    }

    #[test]
    fn noisy_deterministic_with_zero_sigma_is_exact_and_noise_stays_in_box() {
        let cfg = particle_cfg();
        let mut learner =
            MaddpgLearner::new(2, 3, 2, 2, cfg, stream(14, tags::EXPLORE)).unwrap();
        let obs = vec![array![0.2, -0.4, 0.6], array![0.0, 0.0, 1.0]];
        let det = learner.act(&obs).unwrap();
        let noiseless = learner
            .select_action(&obs, ExplorationMode::NoisyDeterministic { sigma: 0.0 })
            .unwrap();
        assert_eq!(det, noiseless);
        for _ in 0..200 {
            let noisy = learner
                .select_action(&obs, ExplorationMode::NoisyDeterministic { sigma: 2.0 })
                .unwrap();
            for v in noisy.iter() {
                assert!((-1.0..=1.0).contains(v));
            }
        }
    }

    #[test]
    fn maddpg_checkpoint_round_trip_preserves_policies() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("maddpg.json");
        let cfg = particle_cfg();
        let learner =
            MaddpgLearner::new(2, 3, 2, 2, cfg, stream(15, tags::EXPLORE)).unwrap();
        learner.save_checkpoint(&path).unwrap();
        let restored = MaddpgLearner::load_checkpoint(&path).unwrap();
        let obs = vec![array![0.1, 0.2, 0.3], array![-0.1, 0.0, 0.4]];
        assert_eq!(learner.act(&obs).unwrap(), restored.act(&obs).unwrap());
    }

    #[test]
    fn wrong_checkpoint_kind_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("learner.json");
        let cfg = small_cfg();
        let learner = JointQLearner::new(2, 3, 4, cfg, stream(16, tags::EXPLORE)).unwrap();
        learner.save_checkpoint(&path).unwrap();
        let err = MaddpgLearner::load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::InvalidState(_)), "got {err:?}");
    }
}
