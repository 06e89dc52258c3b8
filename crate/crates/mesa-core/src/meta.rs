//! The two meta-phases for discrete climb games: training a population of
//! frozen exploration policies on the training tasks, and adapting a fresh
//! learner on a held-out task with scheduled injections of those policies.
//!
//! Meta-training runs in two phases. Phase one trains a throwaway ε-greedy
//! joint-Q policy on every training task, logs all transitions, and harvests
//! the valuable set 𝓜* — the embedded state-action points of episodes whose
//! return cleared `r_star`, with densified rewards. Phase two fits the
//! cluster hash on 𝓜* and trains the exploration policies sequentially:
//! each one maximizes the count-discounted, distance-gated shaped reward,
//! with its trajectory counts re-seeded from the global counts every episode
//! so it is repelled from clusters earlier policies already covered. After a
//! policy converges, evaluation rollouts fold its gated visits back into the
//! global counts.
//!
//! Meta-testing runs a fresh learner on one held-out task. Each episode is
//! delegated, with annealed probability `p_e`, to one uniformly sampled
//! frozen exploration policy; otherwise the learner acts itself. Every
//! transition carries the true task reward — shaped rewards never leak into
//! this phase — and the learner updates from replay after each episode.
//!
//! Everything is deterministic given the seed: per-task, per-policy, and
//! meta-test RNG streams are derived with the domain-tagged scheme in
//! [`crate::rng`].

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::climb::{
    action_embedding, stage_embedding, ClimbEnv, ClimbTaskSpec, JointAction, TaskSpace,
};
use crate::config::{
    AnnealSchedule, ExperimentConfig, ExplorationMode, FamilyConfig, LearnerConfig,
    MetaTestConfig, MetaTrainConfig, SubspaceConfig,
};
use crate::learner::{eps_flip, greedy_joint, JointQLearner};
use crate::nn::MlpParams;
use crate::replay::{Provenance, Transition};
use crate::rng::{stream, substream, tags};
use crate::subspace::{
    collect_valuable, densify_trajectory, fit_clusters, gated, shaped_reward,
    update_global_counts, ClusterHash, EmbeddedStep, EmbeddedTrajectory, PseudoCounts,
    ValuableSet,
};
use crate::{Error, Result};

/// Softmax temperature of the exploration-policy behavior distribution.
const SOFTMAX_TEMP: f64 = 1.0;

/// Lloyd iterations when fitting the cluster hash on 𝓜*.
const KMEANS_MAX_ITERS: usize = 60;

/// Manifest format version written by [`MetaTrainOutput::save`].
const MANIFEST_VERSION: u32 = 1;

/// Manifest kind tag, so stray JSON files are rejected early.
const MANIFEST_KIND: &str = "mesa_policies";

// --- Embeddings and schedules -------------------------------------------------

/// Embeds one discrete climb step into the subspace used for harvesting,
/// gating, and counting: the signed one-hot of the stage *before* the step,
/// concatenated with the signed one-hot of the joint action. Two embedded
/// points are equal iff they describe the same (stage, joint action) cell.
pub fn subspace_point(spec: &ClimbTaskSpec, stage: usize, joint: &JointAction) -> Array1<f64> {
    let s = stage_embedding(spec.num_stages(), stage);
    let a = action_embedding(spec.actions, joint);
    let mut v = Vec::with_capacity(s.len() + a.len());
    v.extend(s.iter().copied());
    v.extend(a.iter().copied());
    Array1::from_vec(v)
}

/// Dimension of [`subspace_point`] embeddings for a task family.
pub fn subspace_dim(spec: &ClimbTaskSpec) -> usize {
    spec.num_stages() + spec.agents * spec.actions
}

/// Probability of delegating the episode starting at step `t` (of a run
/// `budget` steps long) to an exploration policy. Follows the schedule,
/// clamped to `[0, 1]`; non-increasing in `t` whenever `end ≤ start`.
pub fn anneal_probability(schedule: &AnnealSchedule, t: usize, budget: usize) -> f64 {
    schedule.value(t, budget).clamp(0.0, 1.0)
}

// --- Frozen exploration policies ----------------------------------------------

/// One trained exploration policy: frozen joint-Q parameters plus the
/// metadata gathered during its training and evaluation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExplorationPolicy {
    /// Frozen joint-Q network (greedy over the enumerated joint actions).
    pub q: MlpParams,
    /// Number of agents the policy controls.
    pub agents: usize,
    /// Actions per agent.
    pub actions_per_agent: usize,
    /// Gated visits per cluster during the post-training evaluation rollouts
    /// (the same visits that were folded into the global counts).
    pub visit_histogram: Vec<u64>,
    /// Episodes the policy trained for before convergence (or the cap).
    pub episodes_trained: usize,
    /// Mean shaped return over the final convergence window.
    pub final_avg_return: f64,
}

impl ExplorationPolicy {
    /// Greedy joint action at a state embedding.
    pub fn greedy(&self, state: &Array1<f64>) -> JointAction {
        greedy_joint(&self.q, state, self.agents, self.actions_per_agent)
    }

    /// Greedy joint action with per-agent ε-flips (the execution mode during
    /// meta-test rollouts).
    pub fn act<R: Rng>(&self, state: &Array1<f64>, eps: f64, rng: &mut R) -> JointAction {
        eps_flip(&self.greedy(state), eps, self.actions_per_agent, rng)
    }

    /// Clusters this policy visited at least once (within the gate radius).
    pub fn clusters_covered(&self) -> Vec<usize> {
        self.visit_histogram
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(c, _)| c)
            .collect()
    }
}

/// The trained population of exploration policies, sharing one action and
/// observation interface.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExplorationPolicySet {
    agents: usize,
    actions_per_agent: usize,
    obs_dim: usize,
    policies: Vec<ExplorationPolicy>,
}

impl ExplorationPolicySet {
    /// Wraps trained policies, checking that every one matches the declared
    /// interface (agent count, action count, observation dimension).
    pub fn new(
        agents: usize,
        actions_per_agent: usize,
        obs_dim: usize,
        policies: Vec<ExplorationPolicy>,
    ) -> Result<Self> {
        let head = actions_per_agent.pow(agents as u32);
        for (i, p) in policies.iter().enumerate() {
            if p.agents != agents || p.actions_per_agent != actions_per_agent {
                return Err(Error::InvalidArgument(format!(
                    "policy {i} controls {} agents × {} actions; the set declares {agents} × {actions_per_agent}",
                    p.agents, p.actions_per_agent
                )));
            }
            if p.q.input_dim() != obs_dim || p.q.output_dim() != head {
                return Err(Error::InvalidArgument(format!(
                    "policy {i} network is {}→{}; the set needs {obs_dim}→{head}",
                    p.q.input_dim(),
                    p.q.output_dim()
                )));
            }
        }
        Ok(ExplorationPolicySet {
            agents,
            actions_per_agent,
            obs_dim,
            policies,
        })
    }

    /// An empty set with a declared interface — the degenerate population
    /// used by baseline arms that never delegate an episode.
    pub fn empty(agents: usize, actions_per_agent: usize, obs_dim: usize) -> Self {
        ExplorationPolicySet {
            agents,
            actions_per_agent,
            obs_dim,
            policies: Vec::new(),
        }
    }

    /// Number of policies.
    pub fn len(&self) -> usize {
        self.policies.len()
    }

    /// Whether the set holds no policies.
    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    /// The trained policies, in training order.
    pub fn policies(&self) -> &[ExplorationPolicy] {
        &self.policies
    }

    /// Number of agents the policies control.
    pub fn agents(&self) -> usize {
        self.agents
    }

    /// Actions per agent.
    pub fn actions_per_agent(&self) -> usize {
        self.actions_per_agent
    }

    /// State-embedding dimension the policies observe.
    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }
}

// --- Meta-training --------------------------------------------------------

/// Per-task harvesting diagnostics from phase one of meta-training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarvestStats {
    /// Index of the task within the training list.
    pub task_id: u64,
    /// Episodes the throwaway policy played.
    pub episodes: usize,
    /// Points this task contributed to 𝓜* (before deduplication).
    pub harvested_points: usize,
    /// Best episode return seen.
    pub best_return: f64,
    /// Mean episode return over the whole collection run.
    pub mean_return: f64,
}

/// Everything meta-training produces, and everything meta-testing needs.
#[derive(Clone, Debug)]
pub struct MetaTrainOutput {
    /// The trained exploration policies.
    pub policies: ExplorationPolicySet,
    /// Deduplicated valuable set 𝓜* (one entry per distinct embedded point,
    /// keeping the largest densified reward).
    pub mstar: ValuableSet,
    /// Cluster hash fitted on 𝓜*.
    pub hash: ClusterHash,
    /// Global gated-visit counts after all policies trained.
    pub global_counts: PseudoCounts,
    /// Per-task harvesting diagnostics.
    pub harvest: Vec<HarvestStats>,
}

/// Manifest tying together the files of a saved [`MetaTrainOutput`].
#[derive(Serialize, Deserialize)]
struct PolicySetManifest {
    format_version: u32,
    kind: String,
    agents: usize,
    actions_per_agent: usize,
    obs_dim: usize,
    policy_files: Vec<String>,
    mstar_file: String,
    hash: ClusterHash,
    global_counts: PseudoCounts,
    harvest: Vec<HarvestStats>,
    config_fingerprint: String,
}

impl MetaTrainOutput {
    /// Writes the output as a directory: `manifest.json` (interface, cluster
    /// hash, global counts, harvest diagnostics, config fingerprint), one
    /// `policy_NN.json` per exploration policy, and `mstar.csv`.
    pub fn save(&self, dir: &Path, config_fingerprint: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut policy_files = Vec::with_capacity(self.policies.len());
        for (i, p) in self.policies.policies().iter().enumerate() {
            let name = format!("policy_{i:02}.json");
            let text = serde_json::to_string(p)
                .map_err(|e| Error::InvalidState(format!("policy encode failed: {e}")))?;
            std::fs::write(dir.join(&name), text)?;
            policy_files.push(name);
        }
        let mstar_file = "mstar.csv".to_string();
        self.mstar.write_csv(std::fs::File::create(dir.join(&mstar_file))?)?;
        let manifest = PolicySetManifest {
            format_version: MANIFEST_VERSION,
            kind: MANIFEST_KIND.into(),
            agents: self.policies.agents(),
            actions_per_agent: self.policies.actions_per_agent(),
            obs_dim: self.policies.obs_dim(),
            policy_files,
            mstar_file,
            hash: self.hash.clone(),
            global_counts: self.global_counts.clone(),
            harvest: self.harvest.clone(),
            config_fingerprint: config_fingerprint.into(),
        };
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::InvalidState(format!("manifest encode failed: {e}")))?;
        std::fs::write(dir.join("manifest.json"), text)?;
        Ok(())
    }

    /// Restores a saved output directory. Returns the output together with
    /// the config fingerprint recorded at save time, so callers can detect
    /// a manifest trained under different settings.
    pub fn load(dir: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: PolicySetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidState(format!("manifest decode failed: {e}")))?;
        if manifest.kind != MANIFEST_KIND || manifest.format_version != MANIFEST_VERSION {
            return Err(Error::InvalidState(format!(
                "expected {MANIFEST_KIND} manifest v{MANIFEST_VERSION}, got {} v{}",
                manifest.kind, manifest.format_version
            )));
        }
        let mut policies = Vec::with_capacity(manifest.policy_files.len());
        for name in &manifest.policy_files {
            let text = std::fs::read_to_string(dir.join(name))?;
            let p: ExplorationPolicy = serde_json::from_str(&text)
                .map_err(|e| Error::InvalidState(format!("policy {name} decode failed: {e}")))?;
            policies.push(p);
        }
        let set = ExplorationPolicySet::new(
            manifest.agents,
            manifest.actions_per_agent,
            manifest.obs_dim,
            policies,
        )?;
        let mstar = ValuableSet::read_csv(std::fs::File::open(dir.join(&manifest.mstar_file))?)?;
        if manifest.global_counts.counts().len() != manifest.hash.num_clusters() {
            return Err(Error::InvalidState(format!(
                "manifest counts cover {} clusters but the hash has {}",
                manifest.global_counts.counts().len(),
                manifest.hash.num_clusters()
            )));
        }
        Ok((
            MetaTrainOutput {
                policies: set,
                mstar,
                hash: manifest.hash,
                global_counts: manifest.global_counts,
                harvest: manifest.harvest,
            },
            manifest.config_fingerprint,
        ))
    }
}

/// Checks that all tasks share one discrete interface and returns the
/// reference spec.
fn check_task_interface(tasks: &[ClimbTaskSpec]) -> Result<&ClimbTaskSpec> {
    let first = tasks
        .first()
        .ok_or_else(|| Error::InvalidArgument("need at least one task".into()))?;
    for (i, t) in tasks.iter().enumerate() {
        t.validate()?;
        if t.particle.is_some() {
            return Err(Error::InvalidArgument(format!(
                "task {i} is a particle task; this pipeline handles discrete climb games"
            )));
        }
        if t.agents != first.agents
            || t.actions != first.actions
            || t.num_stages() != first.num_stages()
        {
            return Err(Error::InvalidArgument(format!(
                "task {i} ({} agents × {} actions, {} stages) does not match task 0 ({} × {}, {})",
                t.agents,
                t.actions,
                t.num_stages(),
                first.agents,
                first.actions,
                first.num_stages()
            )));
        }
    }
    Ok(first)
}

/// Phase one for a single task: trains a throwaway ε-greedy joint-Q policy
/// while logging every step, then harvests the valuable points.
fn harvest_task(
    spec: &ClimbTaskSpec,
    task_id: u64,
    learner_cfg: &LearnerConfig,
    subspace_cfg: &SubspaceConfig,
    train_cfg: &MetaTrainConfig,
    rng: ChaCha8Rng,
) -> Result<(ValuableSet, HarvestStats)> {
    let mut env = ClimbEnv::new(spec.clone())?;
    let mut learner = JointQLearner::new(
        spec.agents,
        spec.actions,
        spec.num_stages(),
        learner_cfg.clone(),
        rng,
    )?;
    let episodes = train_cfg.collect_episodes;
    let mut trajectories: Vec<EmbeddedTrajectory> = Vec::with_capacity(episodes);
    let mut best = f64::NEG_INFINITY;
    let mut total = 0.0;
    for ep in 0..episodes {
        let eps = train_cfg.collect_eps.value(ep, episodes);
        env.reset();
        let mut traj: EmbeddedTrajectory = Vec::with_capacity(spec.num_stages());
        let mut ep_return = 0.0;
        while !env.is_done() {
            let state = env.state_embedding();
            let stage = env.state().stage;
            let joint = learner.select_action(&state, ExplorationMode::EpsGreedy { eps })?;
            let out = env.step(&joint)?;
            learner.store(transition(
                state,
                &joint,
                out.reward,
                None,
                env.state_embedding(),
                out.done,
                Provenance::Learner,
            ));
            traj.push(EmbeddedStep {
                point: subspace_point(spec, stage, &joint),
                reward: out.reward,
            });
            ep_return += out.reward;
        }
        if ep >= train_cfg.collect_warm_up_episodes {
            for _ in 0..train_cfg.collect_updates_per_episode {
                learner.update()?;
            }
        }
        best = best.max(ep_return);
        total += ep_return;
        trajectories.push(traj);
    }
    let harvested = collect_valuable(
        &trajectories,
        subspace_cfg.r_star,
        subspace_cfg.relabel_gamma,
        task_id,
    )?;
    let stats = HarvestStats {
        task_id,
        episodes,
        harvested_points: harvested.len(),
        best_return: best,
        mean_return: total / episodes as f64,
    };
    Ok((harvested, stats))
}

/// Merges duplicate embedded points, keeping the first-seen order, the
/// largest densified reward, and the first contributing task. Climb-game
/// embeddings are exact signed one-hots, so bit-equality is the right
/// notion of "same cell".
fn dedup_valuable(mstar: &ValuableSet) -> Result<ValuableSet> {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut points: Vec<Array1<f64>> = Vec::new();
    let mut rewards: Vec<f64> = Vec::new();
    let mut task_ids: Vec<u64> = Vec::new();
    for (i, p) in mstar.points().iter().enumerate() {
        let key: Vec<u64> = p.iter().map(|x| x.to_bits()).collect();
        match index.get(&key) {
            Some(&j) => rewards[j] = rewards[j].max(mstar.reward(i)),
            None => {
                index.insert(key, points.len());
                points.push(p.clone());
                rewards.push(mstar.reward(i));
                task_ids.push(mstar.task_id(i));
            }
        }
    }
    let mut out = ValuableSet::new(mstar.dim());
    for ((p, r), tid) in points.into_iter().zip(rewards).zip(task_ids) {
        out.push(p, r, tid)?;
    }
    Ok(out)
}

/// Meta-training: harvests 𝓜* with throwaway policies (phase one), fits the
/// cluster hash, and trains the exploration-policy population sequentially
/// on shaped rewards (phase two).
///
/// Fails with a harvest-failure error — including per-task reward statistics
/// — if no episode anywhere cleared `r_star`.
pub fn meta_train(
    tasks: &[ClimbTaskSpec],
    learner_cfg: &LearnerConfig,
    subspace_cfg: &SubspaceConfig,
    train_cfg: &MetaTrainConfig,
    seed: u64,
) -> Result<MetaTrainOutput> {
    let first = check_task_interface(tasks)?;
    let (agents, actions, obs_dim) = (first.agents, first.actions, first.num_stages());

    // Phase one: harvest valuable experience from every training task.
    let mut mstar = ValuableSet::new(subspace_dim(first));
    let mut harvest = Vec::with_capacity(tasks.len());
    for (i, spec) in tasks.iter().enumerate() {
        let rng = substream(seed, tags::COLLECT, i as u64);
        let (points, stats) =
            harvest_task(spec, i as u64, learner_cfg, subspace_cfg, train_cfg, rng)?;
        mstar.merge(&points)?;
        harvest.push(stats);
    }
    if mstar.is_empty() {
        let per_task: Vec<String> = harvest
            .iter()
            .map(|h| {
                format!(
                    "task {}: best {:.3}, mean {:.3}",
                    h.task_id, h.best_return, h.mean_return
                )
            })
            .collect();
        return Err(Error::HarvestFailure(format!(
            "no episode reached the harvest threshold {} over {} tasks × {} episodes ({})",
            subspace_cfg.r_star,
            tasks.len(),
            train_cfg.collect_episodes,
            per_task.join("; ")
        )));
    }
    let mstar = dedup_valuable(&mstar)?;

    // Cluster hash on the harvested subspace; never more clusters than
    // distinct points.
    let clusters = subspace_cfg.clusters.min(mstar.len());
    let (hash, _) = fit_clusters(mstar.points(), clusters, seed, KMEANS_MAX_ITERS)?;

    // Phase two: sequential exploration-policy training, each repelled from
    // the clusters its predecessors covered.
    let mut global = PseudoCounts::global(hash.num_clusters());
    let mut policies = Vec::with_capacity(train_cfg.num_policies);
    for e in 0..train_cfg.num_policies {
        policies.push(train_exploration_policy(
            &mstar,
            &hash,
            &mut global,
            tasks,
            learner_cfg,
            subspace_cfg,
            train_cfg,
            seed,
            e,
        )?);
    }

    Ok(MetaTrainOutput {
        policies: ExplorationPolicySet::new(agents, actions, obs_dim, policies)?,
        mstar,
        hash,
        global_counts: global,
        harvest,
    })
}

/// One converged training attempt plus the state needed to run its
/// evaluation rollouts.
struct TrainedAttempt {
    learner: JointQLearner,
    outer: ChaCha8Rng,
    episodes: usize,
    final_avg_return: f64,
}

/// Trains one exploration policy to convergence on shaped rewards. Episodes
/// cycle round-robin through environments built from the training tasks;
/// the learner trains on each finished episode's rows, with the trajectory
/// counts re-seeded from the global counts at every episode start.
fn explore_attempt(
    mstar: &ValuableSet,
    hash: &ClusterHash,
    global: &PseudoCounts,
    tasks: &[ClimbTaskSpec],
    learner_cfg: &LearnerConfig,
    subspace_cfg: &SubspaceConfig,
    train_cfg: &MetaTrainConfig,
    learner_rng: ChaCha8Rng,
    mut outer: ChaCha8Rng,
) -> Result<TrainedAttempt> {
    let spec = &tasks[0];
    let mut learner = JointQLearner::new(
        spec.agents,
        spec.actions,
        spec.num_stages(),
        learner_cfg.clone(),
        learner_rng,
    )?;
    let mut envs = tasks
        .iter()
        .map(|t| ClimbEnv::new(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let window = train_cfg.convergence_window;
    let mut returns: Vec<f64> = Vec::new();
    let mut episodes = 0;
    for ep in 0..train_cfg.expl_max_episodes {
        let env = &mut envs[ep % tasks.len()];
        env.reset();
        let mut steps: Vec<(Array1<f64>, JointAction, f64, Array1<f64>, bool, Array1<f64>)> =
            Vec::with_capacity(spec.num_stages());
        while !env.is_done() {
            let state = env.state_embedding();
            let stage = env.state().stage;
            let joint = if ep < train_cfg.expl_uniform_episodes {
                (0..spec.agents)
                    .map(|_| outer.random_range(0..spec.actions))
                    .collect()
            } else {
                learner.softmax_action(&state, SOFTMAX_TEMP)?
            };
            let out = env.step(&joint)?;
            let point = subspace_point(spec, stage, &joint);
            steps.push((state, joint, out.reward, env.state_embedding(), out.done, point));
        }

        // Densify the raw episode rewards, then apply the count-discounted
        // gate; the learner trains on the shaped values.
        let raw: Vec<f64> = steps.iter().map(|s| s.2).collect();
        let densified = densify_trajectory(&raw, subspace_cfg.relabel_gamma);
        let mut counts = PseudoCounts::trajectory_from(global)?;
        let mut rows = Vec::with_capacity(steps.len());
        let mut shaped_return = 0.0;
        for ((state, joint, raw_r, next_state, done, point), r_hat) in
            steps.into_iter().zip(densified)
        {
            let shaped = shaped_reward(
                &point,
                r_hat,
                hash,
                &mut counts,
                mstar,
                subspace_cfg.dist_eps,
                subspace_cfg.f_d_exponent,
            )?;
            shaped_return += shaped;
            rows.push(transition(
                state,
                &joint,
                raw_r,
                Some(shaped),
                next_state,
                done,
                Provenance::Exploration,
            ));
        }
        learner.update_rows(&rows)?;
        returns.push(shaped_return);
        episodes = ep + 1;

        // Converged when the moving average over the last window moved by
        // less than the relative tolerance — never before the minimum
        // episode count, and never with less than two full windows.
        if episodes > train_cfg.expl_min_episodes && returns.len() >= 2 * window {
            let m1 = mean(&returns[returns.len() - window..]);
            let m0 = mean(&returns[returns.len() - 2 * window..returns.len() - window]);
            if (m1 - m0).abs() <= train_cfg.convergence_rel_tol * m0.abs().max(1e-9) {
                break;
            }
        }
    }
    let tail = returns.len().min(window);
    let final_avg_return = mean(&returns[returns.len() - tail..]);
    Ok(TrainedAttempt {
        learner,
        outer,
        episodes,
        final_avg_return,
    })
}

/// Trains the `policy_index`-th exploration policy against the current
/// global counts, restarting with a fresh initialization if training
/// diverges (at most `max_restarts` extra attempts). On success, runs the
/// evaluation rollouts, folds their gated visits into `global`, and freezes
/// the policy. A failed attempt never touches `global`.
#[allow(clippy::too_many_arguments)]
pub fn train_exploration_policy(
    mstar: &ValuableSet,
    hash: &ClusterHash,
    global: &mut PseudoCounts,
    tasks: &[ClimbTaskSpec],
    learner_cfg: &LearnerConfig,
    subspace_cfg: &SubspaceConfig,
    train_cfg: &MetaTrainConfig,
    seed: u64,
    policy_index: usize,
) -> Result<ExplorationPolicy> {
    if mstar.is_empty() {
        return Err(Error::InvalidArgument(
            "exploration-policy training needs a non-empty valuable set".into(),
        ));
    }
    let spec = check_task_interface(tasks)?;
    let attempts = train_cfg.max_restarts + 1;
    let mut diverged = Vec::new();
    let mut trained = None;
    for attempt in 0..attempts {
        // Restarts get fresh, but still seed-determined, streams.
        let lane = (policy_index * attempts + attempt) as u64;
        let learner_rng = substream(seed, tags::EXPLORE, 2 * lane);
        let outer_rng = substream(seed, tags::EXPLORE, 2 * lane + 1);
        match explore_attempt(
            mstar,
            hash,
            global,
            tasks,
            learner_cfg,
            subspace_cfg,
            train_cfg,
            learner_rng,
            outer_rng,
        ) {
            Ok(t) => {
                trained = Some(t);
                break;
            }
            Err(Error::TrainingDiverged(msg)) => diverged.push(msg),
            Err(e) => return Err(e),
        }
    }
    let Some(TrainedAttempt {
        mut learner,
        mut outer,
        episodes,
        final_avg_return,
    }) = trained
    else {
        return Err(Error::TrainingDiverged(format!(
            "exploration policy {policy_index} diverged in all {attempts} attempts; last: {}",
            diverged.last().cloned().unwrap_or_default()
        )));
    };

    // Evaluation rollouts: refresh the global counts with the converged
    // policy's gated visits and record its per-cluster histogram.
    let mut envs = tasks
        .iter()
        .map(|t| ClimbEnv::new(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let mut histogram = vec![0u64; hash.num_clusters()];
    let mut gated_points: Vec<Array1<f64>> = Vec::new();
    for _ in 0..train_cfg.eval_episodes {
        let env = &mut envs[outer.random_range(0..tasks.len())];
        env.reset();
        while !env.is_done() {
            let state = env.state_embedding();
            let stage = env.state().stage;
            let joint = learner.select_action(
                &state,
                ExplorationMode::EpsGreedy {
                    eps: train_cfg.eval_eps,
                },
            )?;
            env.step(&joint)?;
            let point = subspace_point(env.spec(), stage, &joint);
            if gated(mstar, &point, subspace_cfg.dist_eps) {
                histogram[hash.assign(&point)] += 1;
                gated_points.push(point);
            }
        }
    }
    update_global_counts(global, &gated_points, hash)?;

    Ok(ExplorationPolicy {
        q: learner.q_params().clone(),
        agents: spec.agents,
        actions_per_agent: spec.actions,
        visit_histogram: histogram,
        episodes_trained: episodes,
        final_avg_return,
    })
}

// --- Meta-testing ---------------------------------------------------------

/// One point of a meta-test evaluation curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Environment steps consumed when the evaluation ran.
    pub step: usize,
    /// Mean per-step greedy return (episode return divided by the stage
    /// count, so one-step and staged games share the `[0, 1]` scale).
    pub value: f64,
}

/// Result of adapting a learner on one held-out task.
#[derive(Debug)]
pub struct MetaTestOutcome {
    /// The adapted learner (replay buffer included, for provenance audits).
    pub learner: JointQLearner,
    /// Greedy evaluations every `eval_interval` steps, at episode
    /// boundaries.
    pub curve: Vec<CurvePoint>,
    /// Mean per-step greedy return after the full budget.
    pub final_return: f64,
}

/// Mean per-step greedy return over `episodes` rollouts.
fn greedy_eval(learner: &JointQLearner, env: &mut ClimbEnv, episodes: usize) -> Result<f64> {
    let stages = env.spec().num_stages() as f64;
    let mut total = 0.0;
    for _ in 0..episodes {
        env.reset();
        let mut ep_return = 0.0;
        while !env.is_done() {
            let joint = learner.greedy(&env.state_embedding());
            ep_return += env.step(&joint)?.reward;
        }
        total += ep_return / stages;
    }
    Ok(total / episodes as f64)
}

/// Meta-testing: adapts a fresh learner on a held-out task. Each episode is
/// delegated to one uniformly sampled exploration policy with the annealed
/// probability `p_explore(steps)`, and otherwise played by the learner under
/// its own exploration mode; during the learner's warm-up all behavior is
/// uniform random and no updates run. Every stored transition carries the
/// true task reward. An empty policy set is the vanilla-learner baseline and
/// behaves exactly like a schedule that is identically zero.
pub fn meta_test(
    task: &ClimbTaskSpec,
    policies: &ExplorationPolicySet,
    learner_cfg: &LearnerConfig,
    test_cfg: &MetaTestConfig,
    seed: u64,
) -> Result<MetaTestOutcome> {
    task.validate()?;
    if task.particle.is_some() {
        return Err(Error::InvalidArgument(
            "this pipeline handles discrete climb games; the task is a particle task".into(),
        ));
    }
    if !policies.is_empty()
        && (policies.agents() != task.agents
            || policies.actions_per_agent() != task.actions
            || policies.obs_dim() != task.num_stages())
    {
        return Err(Error::InvalidArgument(format!(
            "exploration policies expect {} agents × {} actions over {} stages; the task has {} × {} over {}",
            policies.agents(),
            policies.actions_per_agent(),
            policies.obs_dim(),
            task.agents,
            task.actions,
            task.num_stages()
        )));
    }

    let mut learner = JointQLearner::new(
        task.agents,
        task.actions,
        task.num_stages(),
        learner_cfg.clone(),
        substream(seed, tags::META_TEST, 0),
    )?;
    let mut mix = substream(seed, tags::META_TEST, 1);
    let mut env = ClimbEnv::new(task.clone())?;
    let mut eval_env = ClimbEnv::new(task.clone())?;

    let budget = test_cfg.budget_steps;
    let mut steps = 0usize;
    let mut next_eval = test_cfg.eval_interval;
    let mut curve = Vec::new();
    while steps < budget {
        let p_e = anneal_probability(&test_cfg.p_explore, steps, budget);
        let warm = steps < learner_cfg.warm_up;
        // The delegation draw is consumed even when the set is empty, so an
        // empty-set run and a zero-schedule run are bit-identical.
        let draw: f64 = mix.random();
        let explore = !policies.is_empty() && draw < p_e;
        let pick = if explore {
            mix.random_range(0..policies.len())
        } else {
            0
        };
        env.reset();
        while !env.is_done() {
            let state = env.state_embedding();
            let joint = if warm {
                (0..task.agents)
                    .map(|_| mix.random_range(0..task.actions))
                    .collect()
            } else if explore {
                policies.policies()[pick].act(&state, test_cfg.expl_eps, &mut mix)
            } else {
                learner.select_action(&state, learner_cfg.exploration)?
            };
            let out = env.step(&joint)?;
            learner.store(transition(
                state,
                &joint,
                out.reward,
                None,
                env.state_embedding(),
                out.done,
                if explore && !warm {
                    Provenance::Exploration
                } else {
                    Provenance::Learner
                },
            ));
            steps += 1;
        }
        if steps >= learner_cfg.warm_up {
            for _ in 0..test_cfg.updates_per_episode {
                learner.update()?;
            }
        }
        while next_eval <= steps {
            curve.push(CurvePoint {
                step: next_eval,
                value: greedy_eval(&learner, &mut eval_env, test_cfg.eval_episodes)?,
            });
            next_eval += test_cfg.eval_interval;
        }
    }
    let final_return = greedy_eval(&learner, &mut eval_env, test_cfg.eval_episodes)?;
    Ok(MetaTestOutcome {
        learner,
        curve,
        final_return,
    })
}

// --- Task splits ------------------------------------------------------------

/// Splits the one-step family (`k ∈ {1, 2}` × `actions` specials) into
/// `train_count` training tasks and `test_count` held-out tasks. Held-out
/// tasks are full-coordination games (`k = 2`) whose special action also
/// appears in some `k = 1` training task, so meta-testing measures transfer
/// to a harder threshold on familiar ground. The shuffle is determined by
/// `split_seed` alone.
pub fn split_one_step(
    actions: usize,
    train_count: usize,
    test_count: usize,
    split_seed: u64,
) -> Result<(Vec<ClimbTaskSpec>, Vec<ClimbTaskSpec>)> {
    let space = TaskSpace::one_step(actions);
    space.validate()?;
    if (train_count + test_count) as u64 > space.len() {
        return Err(Error::InvalidConfig(format!(
            "the one-step family with {actions} actions has {} tasks; cannot split into {train_count} + {test_count}",
            space.len()
        )));
    }
    let mut order: Vec<u64> = (0..space.len()).collect();
    order.shuffle(&mut stream(split_seed, tags::SPLIT));
    let train = order[..train_count]
        .iter()
        .map(|&i| space.task(i))
        .collect::<Result<Vec<_>>>()?;
    let covered: std::collections::HashSet<usize> = train
        .iter()
        .filter(|t| t.stages[0].k == 1)
        .map(|t| t.stages[0].u)
        .collect();
    let mut test = Vec::with_capacity(test_count);
    for &i in &order[train_count..] {
        let t = space.task(i)?;
        if t.stages[0].k == 2 && covered.contains(&t.stages[0].u) {
            test.push(t);
            if test.len() == test_count {
                break;
            }
        }
    }
    if test.len() < test_count {
        return Err(Error::InvalidConfig(format!(
            "split seed {split_seed} leaves only {} eligible held-out tasks (k = 2 with a k = 1 training counterpart); need {test_count} — pick another split_seed",
            test.len()
        )));
    }
    Ok((train, test))
}

/// Splits the multi-stage family by rejection sampling: `train_count` tasks
/// sampled uniformly, then `test_count` held-out tasks that (a) duplicate no
/// earlier task, (b) demand full coordination (`k = 2`) on all but at most
/// one stage, and (c) use only special actions that some training task uses
/// at the same stage. If a training draw admits no such held-out set, the
/// training set itself is redrawn. Deterministic in `split_seed`.
pub fn split_multi_stage(
    stages: usize,
    actions: usize,
    train_count: usize,
    test_count: usize,
    split_seed: u64,
) -> Result<(Vec<ClimbTaskSpec>, Vec<ClimbTaskSpec>)> {
    const TRAIN_REDRAWS: usize = 50;
    const TEST_TRIES: usize = 4000;
    let space = TaskSpace::multi_stage(stages, actions);
    space.validate()?;
    let mut rng = stream(split_seed, tags::SPLIT);
    for _ in 0..TRAIN_REDRAWS {
        let train = space.sample_tasks(&mut rng, train_count)?;
        let covered: Vec<std::collections::HashSet<usize>> = (0..stages)
            .map(|t| train.iter().map(|task| task.stages[t].u).collect())
            .collect();
        let mut test: Vec<ClimbTaskSpec> = Vec::with_capacity(test_count);
        for _ in 0..TEST_TRIES {
            if test.len() == test_count {
                break;
            }
            let cand = space
                .sample_tasks(&mut rng, 1)?
                .into_iter()
                .next()
                .ok_or_else(|| Error::InvalidState("task sampling returned nothing".into()))?;
            let fresh = !train
                .iter()
                .chain(test.iter())
                .any(|t| t.stages == cand.stages);
            let hard =
                cand.stages.iter().filter(|s| s.k == 2).count() >= stages.saturating_sub(1);
            let familiar = cand
                .stages
                .iter()
                .enumerate()
                .all(|(t, s)| covered[t].contains(&s.u));
            if fresh && hard && familiar {
                test.push(cand);
            }
        }
        if test.len() == test_count {
            return Ok((train, test));
        }
    }
    Err(Error::InvalidConfig(format!(
        "no held-out set of {test_count} covered hard tasks found for split_seed {split_seed} after {TRAIN_REDRAWS} training redraws — pick another split_seed"
    )))
}

/// Dispatches the train/test split for a discrete experiment family.
pub fn split_tasks(experiment: &ExperimentConfig) -> Result<(Vec<ClimbTaskSpec>, Vec<ClimbTaskSpec>)> {
    match experiment.family {
        FamilyConfig::OneStep { actions } => split_one_step(
            actions,
            experiment.train_tasks,
            experiment.test_tasks,
            experiment.split_seed,
        ),
        FamilyConfig::MultiStage { stages, actions } => split_multi_stage(
            stages,
            actions,
            experiment.train_tasks,
            experiment.test_tasks,
            experiment.split_seed,
        ),
        FamilyConfig::Particle {
            agents,
            landmarks,
            k,
        } => crate::meta_particle::split_particle(
            agents,
            landmarks,
            k,
            experiment.train_tasks,
            experiment.test_tasks,
            experiment.split_seed,
        ),
    }
}

// --- Small helpers ---------------------------------------------------------

/// Builds a discrete-game transition (no per-agent observations; the games
/// are fully observed through the state embedding).
fn transition(
    state: Array1<f64>,
    joint: &JointAction,
    reward: f64,
    shaped: Option<f64>,
    next_state: Array1<f64>,
    done: bool,
    provenance: Provenance,
) -> Transition {
    Transition {
        state,
        observations: Vec::new(),
        actions: joint.iter().map(|&a| a as f64).collect(),
        reward,
        shaped_reward: shaped,
        next_state,
        next_observations: Vec::new(),
        done,
        provenance,
    }
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}
