//! The two meta-phases for continuous particle climb games: training a
//! population of frozen exploration policies on the training tasks, and
//! adapting a fresh deterministic-policy learner on a held-out task with
//! scheduled injections of those policies.
//!
//! The pipeline mirrors the discrete one in [`crate::meta`], with the
//! substitutions a continuous control problem forces:
//!
//! * the learner is [`MaddpgLearner`] — per-agent deterministic actors with
//!   a centralized critic — instead of the joint-Q network;
//! * the harvesting behavior explores with annealed Gaussian noise, so the
//!   collection anneal schedule drives the noise scale σ rather than ε;
//! * the subspace embedding concatenates the layout-relative state
//!   embedding with the flattened joint force matrix, so "same cell" means
//!   "similar configuration under a similar control";
//! * exploration policies train from replay over shaped rows: each stored
//!   transition freezes the count-discounted shaped reward computed when it
//!   was collected, and the learner takes
//!   [`MetaTrainConfig::expl_updates_per_episode`] replay steps per episode
//!   instead of fitting the episode's rows directly;
//! * harvested points never collide in a continuous space, so instead of
//!   deduplication the merged valuable set is thinned down to
//!   [`SubspaceConfig::mstar_cap`] evenly spaced points, keeping the
//!   per-step novelty gate affordable;
//! * harvesting additionally keeps the full transitions behind 𝓜*
//!   ([`ParticleMetaTrainOutput::seed_transitions`]), so a baseline learner
//!   can start from a replay buffer pre-seeded with valuable experience.
//!
//! Everything is deterministic given the seed; the RNG lanes are documented
//! on each entry point.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::climb::ClimbTaskSpec;
use crate::config::{
    ExplorationMode, LearnerConfig, MetaTestConfig, MetaTrainConfig, SubspaceConfig,
};
use crate::learner::MaddpgLearner;
use crate::meta::{anneal_probability, mean, CurvePoint, HarvestStats};
use crate::nn::MlpParams;
use crate::particle::{particle_task, ParticleObservation, ParticleWorld};
use crate::replay::{Provenance, Transition};
use crate::rng::{stream, substream, tags};
use crate::subspace::{
    collect_valuable, densify_trajectory, fit_clusters, gated, shaped_reward,
    update_global_counts, ClusterHash, EmbeddedStep, EmbeddedTrajectory, PseudoCounts,
    ValuableSet,
};
use crate::{Error, Result};

/// Penalty gap δ shared by every task the particle splitter emits.
const PARTICLE_DELTA: f64 = 0.5;

/// Force dimensions per agent.
const ACTION_DIM: usize = 2;

/// Lloyd iterations when fitting the cluster hash on 𝓜*.
const KMEANS_MAX_ITERS: usize = 60;

/// Manifest format version written by [`ParticleMetaTrainOutput::save`].
const MANIFEST_VERSION: u32 = 1;

/// Manifest kind tag, so stray JSON files are rejected early.
const MANIFEST_KIND: &str = "mesa_particle_policies";

// --- Embedding --------------------------------------------------------------

/// Embeds one particle step into the subspace used for harvesting, gating,
/// and counting: the layout-relative state embedding taken *before* the
/// step, concatenated with the flattened joint force matrix. Forces live in
/// `[−1, 1]`, the same scale as the embedding coordinates, so neither side
/// dominates the gate distance.
pub fn particle_subspace_point(embedding: &Array1<f64>, forces: &Array2<f64>) -> Array1<f64> {
    let mut v = Vec::with_capacity(embedding.len() + forces.len());
    v.extend(embedding.iter().copied());
    v.extend(forces.iter().copied());
    Array1::from(v)
}

/// Dimension of [`particle_subspace_point`] for an `agents`-agent world.
pub fn particle_subspace_dim(agents: usize) -> usize {
    ParticleWorld::state_dim(agents) + agents * ACTION_DIM
}

// --- Exploration policies -----------------------------------------------------

/// One frozen exploration policy: the per-agent actors of a converged
/// shaped-reward learner, plus diagnostics about what it learned to visit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParticleExplorationPolicy {
    /// Frozen actor networks (pre-squash), one per agent.
    pub actors: Vec<MlpParams>,
    /// Gated visits per cluster during the policy's evaluation rollouts.
    pub visit_histogram: Vec<u64>,
    /// Episodes the converged attempt trained for.
    pub episodes_trained: usize,
    /// Mean shaped return over the final convergence window.
    pub final_avg_return: f64,
}

impl ParticleExplorationPolicy {
    /// Deterministic forces: one `tanh`-squashed actor output per agent.
    pub fn greedy(&self, observations: &[Array1<f64>]) -> Result<Array2<f64>> {
        if observations.len() != self.actors.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} observations, got {}",
                self.actors.len(),
                observations.len()
            )));
        }
        let mut forces = Array2::zeros((self.actors.len(), ACTION_DIM));
        for (i, obs) in observations.iter().enumerate() {
            let pre = self.actors[i].forward_one(obs);
            for (j, v) in pre.iter().enumerate() {
                forces[[i, j]] = v.tanh();
            }
        }
        Ok(forces)
    }

    /// ε-mixed behavior: each agent's greedy force row is replaced by a
    /// uniform draw from the force box with probability `eps` — the same
    /// per-agent mixing the learner's ε-greedy mode uses.
    pub fn act<R: Rng>(
        &self,
        observations: &[Array1<f64>],
        eps: f64,
        rng: &mut R,
    ) -> Result<Array2<f64>> {
        let mut forces = self.greedy(observations)?;
        for i in 0..self.actors.len() {
            if rng.random::<f64>() < eps {
                for j in 0..ACTION_DIM {
                    forces[[i, j]] = rng.random_range(-1.0..=1.0);
                }
            }
        }
        Ok(forces)
    }

    /// Indices of the clusters this policy visited at least once during its
    /// evaluation rollouts.
    pub fn clusters_covered(&self) -> Vec<usize> {
        self.visit_histogram
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// A validated, interface-consistent population of frozen exploration
/// policies for one particle family.
#[derive(Clone, Debug)]
pub struct ParticleExplorationPolicySet {
    agents: usize,
    obs_dim: usize,
    policies: Vec<ParticleExplorationPolicy>,
}

impl ParticleExplorationPolicySet {
    /// Validates that every policy carries one `obs_dim → 2` actor per
    /// agent.
    pub fn new(
        agents: usize,
        obs_dim: usize,
        policies: Vec<ParticleExplorationPolicy>,
    ) -> Result<Self> {
        for (i, p) in policies.iter().enumerate() {
            if p.actors.len() != agents {
                return Err(Error::InvalidArgument(format!(
                    "policy {i} has {} actors; the family has {agents} agents",
                    p.actors.len()
                )));
            }
            for (a, actor) in p.actors.iter().enumerate() {
                if actor.input_dim() != obs_dim || actor.output_dim() != ACTION_DIM {
                    return Err(Error::InvalidArgument(format!(
                        "policy {i}, agent {a}: actor maps {} → {}, expected {obs_dim} → {ACTION_DIM}",
                        actor.input_dim(),
                        actor.output_dim()
                    )));
                }
            }
        }
        Ok(ParticleExplorationPolicySet {
            agents,
            obs_dim,
            policies,
        })
    }

    /// A set with no policies — the vanilla-learner baseline.
    pub fn empty(agents: usize, obs_dim: usize) -> Self {
        ParticleExplorationPolicySet {
            agents,
            obs_dim,
            policies: Vec::new(),
        }
    }

    /// Number of policies.
    pub fn len(&self) -> usize {
        self.policies.len()
    }

    /// True when the set holds no policies.
    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    /// The policies, in training order.
    pub fn policies(&self) -> &[ParticleExplorationPolicy] {
        &self.policies
    }

    /// Number of agents the policies act for.
    pub fn agents(&self) -> usize {
        self.agents
    }

    /// Observation dimension the actors consume.
    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }
}

// --- Meta-training ------------------------------------------------------------

/// Everything particle meta-training produces, and everything particle
/// meta-testing (and its baselines) needs.
#[derive(Clone, Debug)]
pub struct ParticleMetaTrainOutput {
    /// The trained exploration policies.
    pub policies: ParticleExplorationPolicySet,
    /// The thinned valuable set 𝓜*.
    pub mstar: ValuableSet,
    /// Cluster hash fitted on 𝓜*.
    pub hash: ClusterHash,
    /// Global gated-visit counts after all policies trained.
    pub global_counts: PseudoCounts,
    /// Per-task harvesting diagnostics.
    pub harvest: Vec<HarvestStats>,
    /// Full transitions behind the (unthinned) valuable set, provenance
    /// [`Provenance::Seeded`] — replay-buffer starter material for the
    /// buffer-initialization baseline.
    pub seed_transitions: Vec<Transition>,
}

/// Manifest tying together the files of a saved [`ParticleMetaTrainOutput`].
#[derive(Serialize, Deserialize)]
struct ParticlePolicyManifest {
    format_version: u32,
    kind: String,
    agents: usize,
    obs_dim: usize,
    policy_files: Vec<String>,
    mstar_file: String,
    seed_file: String,
    hash: ClusterHash,
    global_counts: PseudoCounts,
    harvest: Vec<HarvestStats>,
    config_fingerprint: String,
}

impl ParticleMetaTrainOutput {
    /// Writes the output as a directory: `manifest.json` (interface, cluster
    /// hash, global counts, harvest diagnostics, config fingerprint), one
    /// `policy_NN.json` per exploration policy, `mstar.csv`, and
    /// `seed_transitions.json`.
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
        self.mstar
            .write_csv(std::fs::File::create(dir.join(&mstar_file))?)?;
        let seed_file = "seed_transitions.json".to_string();
        let text = serde_json::to_string(&self.seed_transitions)
            .map_err(|e| Error::InvalidState(format!("seed-transition encode failed: {e}")))?;
        std::fs::write(dir.join(&seed_file), text)?;
        let manifest = ParticlePolicyManifest {
            format_version: MANIFEST_VERSION,
            kind: MANIFEST_KIND.into(),
            agents: self.policies.agents(),
            obs_dim: self.policies.obs_dim(),
            policy_files,
            mstar_file,
            seed_file,
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
        let manifest: ParticlePolicyManifest = serde_json::from_str(&text)
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
            let p: ParticleExplorationPolicy = serde_json::from_str(&text)
                .map_err(|e| Error::InvalidState(format!("policy {name} decode failed: {e}")))?;
            policies.push(p);
        }
        let set = ParticleExplorationPolicySet::new(manifest.agents, manifest.obs_dim, policies)?;
        let mstar =
            ValuableSet::read_csv(std::fs::File::open(dir.join(&manifest.mstar_file))?)?;
        let text = std::fs::read_to_string(dir.join(&manifest.seed_file))?;
        let seed_transitions: Vec<Transition> = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidState(format!("seed-transition decode failed: {e}")))?;
        if manifest.global_counts.counts().len() != manifest.hash.num_clusters() {
            return Err(Error::InvalidState(format!(
                "manifest counts cover {} clusters but the hash has {}",
                manifest.global_counts.counts().len(),
                manifest.hash.num_clusters()
            )));
        }
        Ok((
            ParticleMetaTrainOutput {
                policies: set,
                mstar,
                hash: manifest.hash,
                global_counts: manifest.global_counts,
                harvest: manifest.harvest,
                seed_transitions,
            },
            manifest.config_fingerprint,
        ))
    }
}

/// Checks that all tasks are particle worlds sharing one interface and
/// returns the reference spec.
fn check_particle_interface(tasks: &[ClimbTaskSpec]) -> Result<&ClimbTaskSpec> {
    let first = tasks
        .first()
        .ok_or_else(|| Error::InvalidArgument("need at least one task".into()))?;
    for (i, t) in tasks.iter().enumerate() {
        t.validate()?;
        if t.particle.is_none() {
            return Err(Error::InvalidArgument(format!(
                "task {i} is a discrete climb game; this pipeline handles particle worlds"
            )));
        }
        if t.agents != first.agents || t.actions != first.actions {
            return Err(Error::InvalidArgument(format!(
                "task {i} ({} agents, {} landmarks) does not match task 0 ({}, {})",
                t.agents, t.actions, first.agents, first.actions
            )));
        }
    }
    Ok(first)
}

/// Phase one for a single task: trains a throwaway learner under annealed
/// Gaussian noise while logging every step, then harvests both the embedded
/// valuable points and the full transitions behind them. The two pools apply
/// the same membership rule, so they always have the same size.
fn harvest_particle_task(
    spec: &ClimbTaskSpec,
    task_id: u64,
    learner_cfg: &LearnerConfig,
    subspace_cfg: &SubspaceConfig,
    train_cfg: &MetaTrainConfig,
    learner_rng: ChaCha8Rng,
    mut env_rng: ChaCha8Rng,
) -> Result<(ValuableSet, Vec<Transition>, HarvestStats)> {
    let mut world = ParticleWorld::new(spec.clone())?;
    let mut learner = MaddpgLearner::new(
        spec.agents,
        ParticleObservation::dim(spec.agents, spec.actions),
        ParticleWorld::state_dim(spec.agents),
        ACTION_DIM,
        learner_cfg.clone(),
        learner_rng,
    )?;
    let episodes = train_cfg.collect_episodes;
    let mut trajectories: Vec<EmbeddedTrajectory> = Vec::with_capacity(episodes);
    let mut seeds: Vec<Transition> = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut total = 0.0;
    for ep in 0..episodes {
        let sigma = train_cfg.collect_eps.value(ep, episodes);
        let mut obs = obs_arrays(world.reset(&mut env_rng));
        let mut traj: EmbeddedTrajectory = Vec::with_capacity(world.horizon());
        let mut rows: Vec<Transition> = Vec::with_capacity(world.horizon());
        let mut ep_return = 0.0;
        loop {
            let state = world.state_embedding();
            let forces =
                learner.select_action(&obs, ExplorationMode::NoisyDeterministic { sigma })?;
            let out = world.step(&forces)?;
            let next_obs = obs_arrays(out.observations);
            let row = Transition {
                state: state.clone(),
                observations: obs,
                actions: flat_forces(&forces),
                reward: out.reward,
                shaped_reward: None,
                next_state: world.state_embedding(),
                next_observations: next_obs.clone(),
                done: out.done,
                provenance: Provenance::Learner,
            };
            learner.store(row.clone());
            traj.push(EmbeddedStep {
                point: particle_subspace_point(&state, &forces),
                reward: out.reward,
            });
            rows.push(row);
            ep_return += out.reward;
            obs = next_obs;
            if out.done {
                break;
            }
        }
        if ep >= train_cfg.collect_warm_up_episodes {
            for _ in 0..train_cfg.collect_updates_per_episode {
                learner.update()?;
            }
        }
        // Qualifying episodes hand their raw transitions to the seed pool,
        // mirroring the membership rule of `collect_valuable` exactly.
        if ep_return >= subspace_cfg.r_star {
            let raw: Vec<f64> = traj.iter().map(|s| s.reward).collect();
            let densified = densify_trajectory(&raw, subspace_cfg.relabel_gamma);
            for (row, r_hat) in rows.into_iter().zip(densified) {
                if r_hat > 0.0 {
                    seeds.push(Transition {
                        provenance: Provenance::Seeded,
                        ..row
                    });
                }
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
    Ok((harvested, seeds, stats))
}

/// Thins a valuable set down to at most `cap` points by keeping evenly
/// spaced indices, which preserves play order and the per-task mixture.
/// `cap = 0` keeps every point.
fn thin_valuable(mstar: &ValuableSet, cap: usize) -> Result<ValuableSet> {
    if cap == 0 || mstar.len() <= cap {
        return Ok(mstar.clone());
    }
    let mut out = ValuableSet::new(mstar.dim());
    for i in 0..cap {
        let j = i * mstar.len() / cap;
        out.push(mstar.points()[j].clone(), mstar.reward(j), mstar.task_id(j))?;
    }
    Ok(out)
}

/// Particle meta-training: harvests 𝓜* (and the transitions behind it) with
/// throwaway learners, fits the cluster hash on the thinned set, and trains
/// the exploration-policy population sequentially on shaped rewards.
///
/// Fails with a harvest-failure error — including per-task reward statistics
/// — if no episode anywhere cleared `r_star`.
///
/// RNG lanes: task `i` consumes [`tags::COLLECT`] sub-streams `2i` (learner)
/// and `2i + 1` (spawns); policy training consumes [`tags::EXPLORE`]
/// sub-streams exactly like the discrete pipeline.
pub fn meta_train_particle(
    tasks: &[ClimbTaskSpec],
    learner_cfg: &LearnerConfig,
    subspace_cfg: &SubspaceConfig,
    train_cfg: &MetaTrainConfig,
    seed: u64,
) -> Result<ParticleMetaTrainOutput> {
    let first = check_particle_interface(tasks)?;
    let agents = first.agents;
    let obs_dim = ParticleObservation::dim(agents, first.actions);

    // Phase one: harvest valuable experience from every training task.
    let mut mstar = ValuableSet::new(particle_subspace_dim(agents));
    let mut seed_transitions: Vec<Transition> = Vec::new();
    let mut harvest = Vec::with_capacity(tasks.len());
    for (i, spec) in tasks.iter().enumerate() {
        let learner_rng = substream(seed, tags::COLLECT, 2 * i as u64);
        let env_rng = substream(seed, tags::COLLECT, 2 * i as u64 + 1);
        let (points, seeds, stats) = harvest_particle_task(
            spec,
            i as u64,
            learner_cfg,
            subspace_cfg,
            train_cfg,
            learner_rng,
            env_rng,
        )?;
        mstar.merge(&points)?;
        seed_transitions.extend(seeds);
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
    let mstar = thin_valuable(&mstar, subspace_cfg.mstar_cap)?;

    // Cluster hash on the harvested subspace; never more clusters than
    // points.
    let clusters = subspace_cfg.clusters.min(mstar.len());
    let (hash, _) = fit_clusters(mstar.points(), clusters, seed, KMEANS_MAX_ITERS)?;

    // Phase two: sequential exploration-policy training, each repelled from
    // the clusters its predecessors covered.
    let mut global = PseudoCounts::global(hash.num_clusters());
    let mut policies = Vec::with_capacity(train_cfg.num_policies);
    for e in 0..train_cfg.num_policies {
        policies.push(train_particle_exploration_policy(
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

    Ok(ParticleMetaTrainOutput {
        policies: ParticleExplorationPolicySet::new(agents, obs_dim, policies)?,
        mstar,
        hash,
        global_counts: global,
        harvest,
        seed_transitions,
    })
}

/// One converged training attempt plus the state needed to run its
/// evaluation rollouts.
struct TrainedParticleAttempt {
    learner: MaddpgLearner,
    outer: ChaCha8Rng,
    episodes: usize,
    final_avg_return: f64,
}

/// Trains one exploration policy to convergence on shaped rewards. Episodes
/// cycle round-robin through worlds built from the training tasks. Each
/// finished episode is shaped step by step — trajectory counts re-seeded
/// from the global counts, the shaped value frozen into the stored row —
/// and the learner then takes its replay steps.
fn explore_attempt_particle(
    mstar: &ValuableSet,
    hash: &ClusterHash,
    global: &PseudoCounts,
    tasks: &[ClimbTaskSpec],
    learner_cfg: &LearnerConfig,
    subspace_cfg: &SubspaceConfig,
    train_cfg: &MetaTrainConfig,
    learner_rng: ChaCha8Rng,
    mut outer: ChaCha8Rng,
) -> Result<TrainedParticleAttempt> {
    let spec = &tasks[0];
    let mut learner = MaddpgLearner::new(
        spec.agents,
        ParticleObservation::dim(spec.agents, spec.actions),
        ParticleWorld::state_dim(spec.agents),
        ACTION_DIM,
        learner_cfg.clone(),
        learner_rng,
    )?;
    let mut worlds = tasks
        .iter()
        .map(|t| ParticleWorld::new(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let window = train_cfg.convergence_window;
    let mut returns: Vec<f64> = Vec::new();
    let mut episodes = 0;
    for ep in 0..train_cfg.expl_max_episodes {
        let world = &mut worlds[ep % tasks.len()];
        let mut obs = obs_arrays(world.reset(&mut outer));
        let mut steps: Vec<(Transition, Array1<f64>)> = Vec::with_capacity(world.horizon());
        loop {
            let state = world.state_embedding();
            let forces = if ep < train_cfg.expl_uniform_episodes {
                uniform_forces(spec.agents, &mut outer)
            } else {
                learner.select_action(&obs, learner_cfg.exploration)?
            };
            let out = world.step(&forces)?;
            let next_obs = obs_arrays(out.observations);
            let point = particle_subspace_point(&state, &forces);
            steps.push((
                Transition {
                    state,
                    observations: obs,
                    actions: flat_forces(&forces),
                    reward: out.reward,
                    shaped_reward: None,
                    next_state: world.state_embedding(),
                    next_observations: next_obs.clone(),
                    done: out.done,
                    provenance: Provenance::Exploration,
                },
                point,
            ));
            obs = next_obs;
            if out.done {
                break;
            }
        }

        // Densify the raw episode rewards, then apply the count-discounted
        // gate; the stored rows carry the shaped values.
        let raw: Vec<f64> = steps.iter().map(|(t, _)| t.reward).collect();
        let densified = densify_trajectory(&raw, subspace_cfg.relabel_gamma);
        let mut counts = PseudoCounts::trajectory_from(global)?;
        let mut shaped_return = 0.0;
        for ((mut row, point), r_hat) in steps.into_iter().zip(densified) {
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
            row.shaped_reward = Some(shaped);
            learner.store(row);
        }
        for _ in 0..train_cfg.expl_updates_per_episode {
            learner.update()?;
        }
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
    Ok(TrainedParticleAttempt {
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
/// the policy's actors. A failed attempt never touches `global`.
#[allow(clippy::too_many_arguments)]
pub fn train_particle_exploration_policy(
    mstar: &ValuableSet,
    hash: &ClusterHash,
    global: &mut PseudoCounts,
    tasks: &[ClimbTaskSpec],
    learner_cfg: &LearnerConfig,
    subspace_cfg: &SubspaceConfig,
    train_cfg: &MetaTrainConfig,
    seed: u64,
    policy_index: usize,
) -> Result<ParticleExplorationPolicy> {
    if mstar.is_empty() {
        return Err(Error::InvalidArgument(
            "exploration-policy training needs a non-empty valuable set".into(),
        ));
    }
    check_particle_interface(tasks)?;
    let attempts = train_cfg.max_restarts + 1;
    let mut diverged = Vec::new();
    let mut trained = None;
    for attempt in 0..attempts {
        // Restarts get fresh, but still seed-determined, streams.
        let lane = (policy_index * attempts + attempt) as u64;
        let learner_rng = substream(seed, tags::EXPLORE, 2 * lane);
        let outer_rng = substream(seed, tags::EXPLORE, 2 * lane + 1);
        match explore_attempt_particle(
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
    let Some(TrainedParticleAttempt {
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
    let mut worlds = tasks
        .iter()
        .map(|t| ParticleWorld::new(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let mut histogram = vec![0u64; hash.num_clusters()];
    let mut gated_points: Vec<Array1<f64>> = Vec::new();
    for _ in 0..train_cfg.eval_episodes {
        let world = &mut worlds[outer.random_range(0..tasks.len())];
        let mut obs = obs_arrays(world.reset(&mut outer));
        loop {
            let state = world.state_embedding();
            let forces = learner.select_action(
                &obs,
                ExplorationMode::EpsGreedy {
                    eps: train_cfg.eval_eps,
                },
            )?;
            let out = world.step(&forces)?;
            let point = particle_subspace_point(&state, &forces);
            if gated(mstar, &point, subspace_cfg.dist_eps) {
                histogram[hash.assign(&point)] += 1;
                gated_points.push(point);
            }
            obs = obs_arrays(out.observations);
            if out.done {
                break;
            }
        }
    }
    update_global_counts(global, &gated_points, hash)?;

    Ok(ParticleExplorationPolicy {
        actors: learner.actor_params().to_vec(),
        visit_histogram: histogram,
        episodes_trained: episodes,
        final_avg_return,
    })
}

// --- Meta-testing -------------------------------------------------------------

/// Result of adapting a learner on one held-out particle task.
#[derive(Debug)]
pub struct ParticleMetaTestOutcome {
    /// The adapted learner (replay buffer included, for provenance audits).
    pub learner: MaddpgLearner,
    /// Greedy evaluations every `eval_interval` steps, at episode
    /// boundaries.
    pub curve: Vec<CurvePoint>,
    /// Mean per-step greedy return after the full budget.
    pub final_return: f64,
    /// Highest raw step reward of each training episode, in play order —
    /// the basis for optimal-episode-rate comparisons between arms.
    pub episode_peaks: Vec<f64>,
}

/// Mean per-step greedy return over `episodes` rollouts (episode return
/// divided by the horizon, so the curves share the `[0, 1]` scale of the
/// discrete games).
fn greedy_eval_particle(
    learner: &MaddpgLearner,
    world: &mut ParticleWorld,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let horizon = world.horizon() as f64;
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut obs = obs_arrays(world.reset(rng));
        let mut ep_return = 0.0;
        loop {
            let forces = learner.act(&obs)?;
            let out = world.step(&forces)?;
            ep_return += out.reward;
            obs = obs_arrays(out.observations);
            if out.done {
                break;
            }
        }
        total += ep_return / horizon;
    }
    Ok(total / episodes as f64)
}

/// Particle meta-testing: adapts a fresh learner on one held-out task. Each
/// episode is delegated, with annealed probability, to one uniformly sampled
/// frozen exploration policy; otherwise the learner acts under its own
/// exploration mode. During the learner's warm-up all behavior is uniform
/// random and no updates run. Every stored transition carries the true task
/// reward.
///
/// `seed_transitions` are pushed into the replay buffer before the first
/// episode — pass the harvested transitions for the buffer-initialization
/// baseline, an empty slice otherwise. An empty policy set with no seeds is
/// the vanilla baseline and behaves exactly like a schedule that is
/// identically zero.
///
/// RNG lanes under [`tags::META_TEST`]: 0 initializes the learner, 1 drives
/// the behavior mix (spawns, warm-up actions, delegation, policy ε), and 2
/// drives evaluation spawns.
pub fn meta_test_particle(
    task: &ClimbTaskSpec,
    policies: &ParticleExplorationPolicySet,
    seed_transitions: &[Transition],
    learner_cfg: &LearnerConfig,
    test_cfg: &MetaTestConfig,
    seed: u64,
) -> Result<ParticleMetaTestOutcome> {
    task.validate()?;
    if task.particle.is_none() {
        return Err(Error::InvalidArgument(
            "this pipeline handles particle worlds; the task is a discrete climb game".into(),
        ));
    }
    let agents = task.agents;
    let obs_dim = ParticleObservation::dim(agents, task.actions);
    let state_dim = ParticleWorld::state_dim(agents);
    if !policies.is_empty() && (policies.agents() != agents || policies.obs_dim() != obs_dim) {
        return Err(Error::InvalidArgument(format!(
            "exploration policies expect {} agents with {}-dimensional observations; the task has {} with {}",
            policies.agents(),
            policies.obs_dim(),
            agents,
            obs_dim
        )));
    }
    for (i, t) in seed_transitions.iter().enumerate() {
        let ok = t.state.len() == state_dim
            && t.next_state.len() == state_dim
            && t.actions.len() == agents * ACTION_DIM
            && t.observations.len() == agents
            && t.next_observations.len() == agents
            && t.observations
                .iter()
                .chain(&t.next_observations)
                .all(|o| o.len() == obs_dim);
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "seed transition {i} does not match the task interface"
            )));
        }
    }

    let mut learner = MaddpgLearner::new(
        agents,
        obs_dim,
        state_dim,
        ACTION_DIM,
        learner_cfg.clone(),
        substream(seed, tags::META_TEST, 0),
    )?;
    for t in seed_transitions {
        learner.store(t.clone());
    }
    let mut mix = substream(seed, tags::META_TEST, 1);
    let mut eval_rng = substream(seed, tags::META_TEST, 2);
    let mut world = ParticleWorld::new(task.clone())?;
    let mut eval_world = ParticleWorld::new(task.clone())?;

    let budget = test_cfg.budget_steps;
    let mut steps = 0usize;
    let mut next_eval = test_cfg.eval_interval;
    let mut curve = Vec::new();
    let mut episode_peaks = Vec::new();
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
        let mut obs = obs_arrays(world.reset(&mut mix));
        let mut peak = f64::NEG_INFINITY;
        loop {
            let state = world.state_embedding();
            let forces = if warm {
                uniform_forces(agents, &mut mix)
            } else if explore {
                policies.policies()[pick].act(&obs, test_cfg.expl_eps, &mut mix)?
            } else {
                learner.select_action(&obs, learner_cfg.exploration)?
            };
            let out = world.step(&forces)?;
            let next_obs = obs_arrays(out.observations);
            learner.store(Transition {
                state,
                observations: obs,
                actions: flat_forces(&forces),
                reward: out.reward,
                shaped_reward: None,
                next_state: world.state_embedding(),
                next_observations: next_obs.clone(),
                done: out.done,
                provenance: if explore && !warm {
                    Provenance::Exploration
                } else {
                    Provenance::Learner
                },
            });
            peak = peak.max(out.reward);
            steps += 1;
            obs = next_obs;
            if out.done {
                break;
            }
        }
        episode_peaks.push(peak);
        if steps >= learner_cfg.warm_up {
            for _ in 0..test_cfg.updates_per_episode {
                learner.update()?;
            }
        }
        while next_eval <= steps {
            curve.push(CurvePoint {
                step: next_eval,
                value: greedy_eval_particle(
                    &learner,
                    &mut eval_world,
                    test_cfg.eval_episodes,
                    &mut eval_rng,
                )?,
            });
            next_eval += test_cfg.eval_interval;
        }
    }
    let final_return =
        greedy_eval_particle(&learner, &mut eval_world, test_cfg.eval_episodes, &mut eval_rng)?;
    Ok(ParticleMetaTestOutcome {
        learner,
        curve,
        final_return,
        episode_peaks,
    })
}

/// Fraction of the last `final_fraction` of training episodes whose peak
/// step reward reached the optimum. The tail always holds at least one
/// episode; an empty peak list rates 0.
pub fn optimal_episode_rate(episode_peaks: &[f64], final_fraction: f64) -> f64 {
    if episode_peaks.is_empty() {
        return 0.0;
    }
    let frac = final_fraction.clamp(0.0, 1.0);
    let n = ((episode_peaks.len() as f64 * frac).ceil() as usize).clamp(1, episode_peaks.len());
    let tail = &episode_peaks[episode_peaks.len() - n..];
    tail.iter().filter(|&&p| p >= 1.0 - 1e-9).count() as f64 / n as f64
}

// --- Task split ---------------------------------------------------------------

/// Splits a particle family into training and held-out tasks. Every task
/// shares `agents`, `landmarks`, and the coordination threshold `k`, and
/// differs in its seeded landmark layout and target landmark, both drawn
/// from one stream determined by `split_seed` alone. Layouts are continuous,
/// so held-out arenas are fresh with probability one; the layout-relative
/// observations are what carries behavior across arenas.
pub fn split_particle(
    agents: usize,
    landmarks: usize,
    k: usize,
    train_count: usize,
    test_count: usize,
    split_seed: u64,
) -> Result<(Vec<ClimbTaskSpec>, Vec<ClimbTaskSpec>)> {
    let mut rng = stream(split_seed, tags::SPLIT);
    let draw = |rng: &mut ChaCha8Rng, count: usize| -> Result<Vec<ClimbTaskSpec>> {
        (0..count)
            .map(|_| {
                let u = rng.random_range(0..landmarks);
                let layout_seed: u64 = rng.random();
                particle_task(agents, landmarks, k, u, PARTICLE_DELTA, layout_seed)
            })
            .collect()
    };
    let train = draw(&mut rng, train_count)?;
    let test = draw(&mut rng, test_count)?;
    Ok((train, test))
}

// --- Exploration-quality probe --------------------------------------------------

/// Mean fraction of steps whose embedded point passes the 𝓜* novelty gate,
/// over `episodes_per_task` episodes on every task. `Some(set)` cycles the
/// set's policies across episodes, each acting ε-mixed; `None` plays uniform
/// random forces — the reference a useful exploration population should beat
/// by a wide margin on held-out tasks.
pub fn gated_visit_rate(
    policies: Option<&ParticleExplorationPolicySet>,
    tasks: &[ClimbTaskSpec],
    mstar: &ValuableSet,
    dist_eps: f64,
    expl_eps: f64,
    episodes_per_task: usize,
    seed: u64,
) -> Result<f64> {
    check_particle_interface(tasks)?;
    if matches!(policies, Some(set) if set.is_empty()) {
        return Err(Error::InvalidArgument(
            "the policy set is empty; pass None for the uniform reference".into(),
        ));
    }
    let mut rng = stream(seed, tags::ENV);
    let mut gated_steps = 0u64;
    let mut total_steps = 0u64;
    for spec in tasks {
        let mut world = ParticleWorld::new(spec.clone())?;
        for e in 0..episodes_per_task {
            let mut obs = obs_arrays(world.reset(&mut rng));
            loop {
                let state = world.state_embedding();
                let forces = match policies {
                    Some(set) => set.policies()[e % set.len()].act(&obs, expl_eps, &mut rng)?,
                    None => uniform_forces(spec.agents, &mut rng),
                };
                let out = world.step(&forces)?;
                if gated(mstar, &particle_subspace_point(&state, &forces), dist_eps) {
                    gated_steps += 1;
                }
                total_steps += 1;
                obs = obs_arrays(out.observations);
                if out.done {
                    break;
                }
            }
        }
    }
    if total_steps == 0 {
        return Err(Error::InvalidArgument(
            "no steps rolled; episodes_per_task must be at least 1".into(),
        ));
    }
    Ok(gated_steps as f64 / total_steps as f64)
}

// --- Small helpers --------------------------------------------------------------

/// Unwraps observation newtypes into the arrays learners consume.
fn obs_arrays(observations: Vec<ParticleObservation>) -> Vec<Array1<f64>> {
    observations.into_iter().map(|o| o.0).collect()
}

/// Flattens an `agents × 2` force matrix into the row-major action vector
/// stored in transitions.
fn flat_forces(forces: &Array2<f64>) -> Array1<f64> {
    Array1::from_iter(forces.iter().copied())
}

/// Uniform draw from the joint force box.
fn uniform_forces<R: Rng>(agents: usize, rng: &mut R) -> Array2<f64> {
    let mut f = Array2::zeros((agents, ACTION_DIM));
    for v in f.iter_mut() {
        *v = rng.random_range(-1.0..=1.0);
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AnnealSchedule, AnnealShape, OptimizerKind};
    use ndarray::array;

    fn desk_task(u: usize, layout_seed: u64) -> ClimbTaskSpec {
        particle_task(2, 3, 2, u, 0.5, layout_seed).unwrap()
    }

    fn solo_task(u: usize, layout_seed: u64) -> ClimbTaskSpec {
        particle_task(1, 2, 1, u, 0.5, layout_seed).unwrap()
    }

    fn desk_learner_cfg() -> LearnerConfig {
        LearnerConfig {
            actor_lr: 1e-3,
            critic_lr: 5e-3,
            tau: 0.05,
            batch_size: 32,
            buffer_capacity: 30_000,
            hidden: vec![32],
            exploration: ExplorationMode::NoisyDeterministic { sigma: 0.2 },
            warm_up: 0,
            optimizer: OptimizerKind::Adam,
            ..LearnerConfig::default()
        }
    }

    fn desk_subspace_cfg() -> SubspaceConfig {
        SubspaceConfig {
            r_star: 0.5,
            dist_eps: 0.25,
            clusters: 8,
            mstar_cap: 0,
            ..SubspaceConfig::default()
        }
    }

    fn desk_train_cfg() -> MetaTrainConfig {
        MetaTrainConfig {
            collect_episodes: 400,
            collect_warm_up_episodes: 50,
            collect_updates_per_episode: 2,
            collect_eps: AnnealSchedule {
                start: 1.0,
                end: 0.1,
                t_end_frac: 0.7,
                shape: AnnealShape::Linear,
            },
            num_policies: 2,
            expl_max_episodes: 90,
            expl_min_episodes: 25,
            expl_uniform_episodes: 10,
            expl_updates_per_episode: 2,
            convergence_window: 10,
            convergence_rel_tol: 0.02,
            max_restarts: 1,
            eval_episodes: 6,
            eval_eps: 0.1,
        }
    }

    fn desk_test_cfg() -> MetaTestConfig {
        MetaTestConfig {
            budget_steps: 600,
            p_explore: AnnealSchedule {
                start: 0.9,
                end: 0.0,
                t_end_frac: 0.5,
                shape: AnnealShape::Linear,
            },
            expl_eps: 0.2,
            updates_per_episode: 1,
            eval_interval: 200,
            eval_episodes: 2,
        }
    }

    /// A random linear actor set for interface/mechanics tests.
    fn random_policy(agents: usize, obs_dim: usize, seed: u64) -> ParticleExplorationPolicy {
        let mut rng = stream(seed, tags::EXPLORE);
        ParticleExplorationPolicy {
            actors: (0..agents)
                .map(|_| MlpParams::init(&mut rng, &[obs_dim, ACTION_DIM], 1.0, 1.0))
                .collect(),
            visit_histogram: vec![0; 4],
            episodes_trained: 0,
            final_avg_return: 0.0,
        }
    }

    // --- Embedding and splits ---

    #[test]
    fn subspace_point_concatenates_embedding_and_forces() {
        let embedding = array![0.1, -0.2, 0.3, -0.4, 0.5, -0.6, 0.7, -0.8];
        let forces = array![[0.5, -0.25], [1.0, 0.0]];
        let p = particle_subspace_point(&embedding, &forces);
        assert_eq!(p.len(), particle_subspace_dim(2));
        assert_eq!(p.len(), 12);
        assert_eq!(p.slice(ndarray::s![..8]).to_vec(), embedding.to_vec());
        assert_eq!(p.slice(ndarray::s![8..]).to_vec(), vec![0.5, -0.25, 1.0, 0.0]);
    }

    #[test]
    fn split_particle_is_deterministic_and_well_formed() {
        let (train, test) = split_particle(2, 3, 2, 4, 2, 7).unwrap();
        let (train2, test2) = split_particle(2, 3, 2, 4, 2, 7).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
        assert_eq!(train.len(), 4);
        assert_eq!(test.len(), 2);
        for t in train.iter().chain(&test) {
            assert_eq!(t.agents, 2);
            assert_eq!(t.actions, 3);
            assert_eq!(t.stages[0].k, 2);
            assert!(t.stages[0].u < 3);
            assert!(t.particle.is_some());
        }
        // Layouts are fresh draws: no two tasks share one.
        let all: Vec<_> = train.iter().chain(&test).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(
                    all[i].particle.as_ref().unwrap().landmarks,
                    all[j].particle.as_ref().unwrap().landmarks
                );
            }
        }
    }

    // --- Policy mechanics ---

    #[test]
    fn policy_set_rejects_interface_mismatches() {
        let good = random_policy(2, 10, 1);
        assert!(ParticleExplorationPolicySet::new(2, 10, vec![good.clone()]).is_ok());

        // Wrong agent count.
        let err = ParticleExplorationPolicySet::new(3, 10, vec![good.clone()]).unwrap_err();
        assert!(err.to_string().contains("actors"), "got {err}");

        // Wrong observation dimension.
        let err = ParticleExplorationPolicySet::new(2, 12, vec![good]).unwrap_err();
        assert!(err.to_string().contains("actor maps"), "got {err}");

        assert!(ParticleExplorationPolicySet::empty(2, 10).is_empty());
    }

    #[test]
    fn eps_mixing_matches_the_greedy_policy_at_zero() {
        let policy = random_policy(2, 10, 2);
        let obs: Vec<Array1<f64>> = (0..2)
            .map(|i| Array1::from_elem(10, 0.1 * (i as f64 + 1.0)))
            .collect();
        let greedy = policy.greedy(&obs).unwrap();
        assert!(greedy.iter().all(|v| v.abs() <= 1.0));

        let mut rng = stream(3, tags::ENV);
        let mixed = policy.act(&obs, 0.0, &mut rng).unwrap();
        assert_eq!(greedy, mixed);

        // Same seed, same ε-mixed draws.
        let a = policy.act(&obs, 1.0, &mut stream(4, tags::ENV)).unwrap();
        let b = policy.act(&obs, 1.0, &mut stream(4, tags::ENV)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn thinning_keeps_order_and_respects_the_cap() {
        let mut set = ValuableSet::new(2);
        for i in 0..10 {
            set.push(array![i as f64, 0.0], 1.0, i as u64).unwrap();
        }
        let thinned = thin_valuable(&set, 4).unwrap();
        assert_eq!(thinned.len(), 4);
        let kept: Vec<f64> = thinned.points().iter().map(|p| p[0]).collect();
        assert_eq!(kept, vec![0.0, 2.0, 5.0, 7.0]);
        assert_eq!(thinned.task_id(2), 5);

        // No cap, or a cap above the size, keeps everything.
        assert_eq!(thin_valuable(&set, 0).unwrap().len(), 10);
        assert_eq!(thin_valuable(&set, 64).unwrap().len(), 10);
    }

    #[test]
    fn optimal_episode_rate_counts_the_tail() {
        let peaks = [0.0, 1.0, 0.5, 1.0];
        assert_eq!(optimal_episode_rate(&peaks, 0.5), 0.5);
        assert_eq!(optimal_episode_rate(&peaks, 1.0), 0.5);
        assert_eq!(optimal_episode_rate(&peaks, 0.25), 1.0);
        assert_eq!(optimal_episode_rate(&[], 0.5), 0.0);
        // Floating-point peaks a hair under 1 still count as optimal.
        assert_eq!(optimal_episode_rate(&[1.0 - 1e-12], 1.0), 1.0);
        assert_eq!(optimal_episode_rate(&[0.9999], 1.0), 0.0);
    }

    // --- Harvesting ---

    #[test]
    fn lucky_harvest_fills_both_pools_identically() {
        let spec = solo_task(0, 5);
        let (mstar, seeds, stats) = harvest_particle_task(
            &spec,
            0,
            &desk_learner_cfg(),
            &desk_subspace_cfg(),
            &desk_train_cfg(),
            substream(11, tags::COLLECT, 0),
            substream(11, tags::COLLECT, 1),
        )
        .unwrap();
        assert!(!mstar.is_empty(), "no valuable experience harvested");
        assert_eq!(mstar.len(), seeds.len());
        assert_eq!(stats.harvested_points, mstar.len());
        assert_eq!(stats.episodes, 400);
        assert!(stats.best_return >= 0.5);
        for i in 0..mstar.len() {
            assert_eq!(mstar.points()[i].len(), particle_subspace_dim(1));
            assert!(mstar.reward(i) > 0.0 && mstar.reward(i) <= 1.0);
            assert_eq!(mstar.task_id(i), 0);
        }
        for t in &seeds {
            assert_eq!(t.provenance, Provenance::Seeded);
            assert!(t.shaped_reward.is_none());
            assert_eq!(t.state.len(), 4);
            assert_eq!(t.actions.len(), 2);
        }
    }

    #[test]
    fn hopeless_threshold_reports_particle_harvest_failure() {
        let err = meta_train_particle(
            &[solo_task(0, 5)],
            &desk_learner_cfg(),
            &SubspaceConfig {
                r_star: 1e9,
                ..desk_subspace_cfg()
            },
            &MetaTrainConfig {
                collect_episodes: 40,
                collect_warm_up_episodes: 40,
                ..desk_train_cfg()
            },
            11,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("task 0"), "got {msg}");
        assert!(msg.contains("best"), "got {msg}");
    }

    // --- Exploration-policy training ---

    #[test]
    fn unreachable_gate_trains_flat_and_converges_at_the_minimum() {
        let mut far = ValuableSet::new(particle_subspace_dim(1));
        far.push(Array1::from_elem(6, 1e3), 1.0, 0).unwrap();
        let (hash, _) = fit_clusters(far.points(), 1, 0, 8).unwrap();
        let mut global = PseudoCounts::global(1);
        let policy = train_particle_exploration_policy(
            &far,
            &hash,
            &mut global,
            &[solo_task(0, 5)],
            &desk_learner_cfg(),
            &SubspaceConfig {
                dist_eps: 1e-12,
                ..desk_subspace_cfg()
            },
            &desk_train_cfg(),
            6,
            0,
        )
        .unwrap();
        // Shaped returns are identically zero, so the window test fires at
        // the first opportunity past the minimum.
        assert_eq!(policy.episodes_trained, 26);
        assert_eq!(policy.final_avg_return, 0.0);
        assert_eq!(policy.visit_histogram, vec![0]);
        assert_eq!(global.total(), 0);
    }

    #[test]
    fn saturating_gate_counts_every_evaluation_step() {
        let mut near = ValuableSet::new(particle_subspace_dim(1));
        near.push(Array1::zeros(6), 1.0, 0).unwrap();
        let (hash, _) = fit_clusters(near.points(), 1, 0, 8).unwrap();
        let mut global = PseudoCounts::global(1);
        let cfg = desk_train_cfg();
        let policy = train_particle_exploration_policy(
            &near,
            &hash,
            &mut global,
            &[solo_task(0, 5)],
            &desk_learner_cfg(),
            &SubspaceConfig {
                dist_eps: 1e9,
                ..desk_subspace_cfg()
            },
            &cfg,
            6,
            0,
        )
        .unwrap();
        // With everything gated, every evaluation step lands in the
        // histogram and the global counts.
        let expected = (cfg.eval_episodes * 60) as u64;
        assert_eq!(policy.visit_histogram.iter().sum::<u64>(), expected);
        assert_eq!(global.total(), expected);
        assert_eq!(policy.clusters_covered(), vec![0]);
    }

    #[test]
    fn empty_valuable_set_is_rejected_for_exploration_training() {
        let empty = ValuableSet::new(particle_subspace_dim(1));
        let (hash, _) = fit_clusters(&[Array1::zeros(6)], 1, 0, 4).unwrap();
        let mut global = PseudoCounts::global(1);
        let err = train_particle_exploration_policy(
            &empty,
            &hash,
            &mut global,
            &[solo_task(0, 5)],
            &desk_learner_cfg(),
            &desk_subspace_cfg(),
            &desk_train_cfg(),
            6,
            0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("non-empty"), "got {err}");
    }

    // --- Meta-testing ---

    #[test]
    fn empty_policy_set_matches_a_zero_schedule_bit_for_bit() {
        let task = desk_task(0, 11);
        let empty = ParticleExplorationPolicySet::empty(2, 10);
        let cfg = desk_test_cfg();
        let learner_cfg = desk_learner_cfg();
        let vanilla = meta_test_particle(&task, &empty, &[], &learner_cfg, &cfg, 42).unwrap();
        let zero = meta_test_particle(
            &task,
            &empty,
            &[],
            &learner_cfg,
            &MetaTestConfig {
                p_explore: AnnealSchedule {
                    start: 0.0,
                    end: 0.0,
                    t_end_frac: 0.5,
                    shape: AnnealShape::Linear,
                },
                ..cfg.clone()
            },
            42,
        )
        .unwrap();
        assert_eq!(vanilla.curve, zero.curve);
        assert_eq!(vanilla.episode_peaks, zero.episode_peaks);
        assert_eq!(vanilla.final_return, zero.final_return);

        // Learner-only provenance, true rewards, full budget, fixed-horizon
        // episode count, evenly spaced curve.
        assert_eq!(vanilla.learner.buffer.len(), cfg.budget_steps);
        for t in vanilla.learner.buffer.iter_in_order() {
            assert_eq!(t.provenance, Provenance::Learner);
            assert!(t.shaped_reward.is_none());
        }
        assert_eq!(vanilla.episode_peaks.len(), cfg.budget_steps / 60);
        let steps: Vec<usize> = vanilla.curve.iter().map(|c| c.step).collect();
        assert_eq!(steps, vec![200, 400, 600]);
    }

    #[test]
    fn seeded_transitions_enter_the_buffer_first() {
        let task = desk_task(1, 12);
        let seed_row = Transition {
            state: Array1::zeros(8),
            observations: vec![Array1::zeros(10); 2],
            actions: Array1::zeros(4),
            reward: 1.0,
            shaped_reward: None,
            next_state: Array1::zeros(8),
            next_observations: vec![Array1::zeros(10); 2],
            done: false,
            provenance: Provenance::Seeded,
        };
        let seeds = vec![seed_row.clone(), seed_row.clone(), seed_row.clone()];
        let empty = ParticleExplorationPolicySet::empty(2, 10);
        let out = meta_test_particle(
            &task,
            &empty,
            &seeds,
            &desk_learner_cfg(),
            &desk_test_cfg(),
            9,
        )
        .unwrap();
        assert_eq!(out.learner.buffer.len(), desk_test_cfg().budget_steps + 3);
        let provenances: Vec<Provenance> = out
            .learner
            .buffer
            .iter_in_order()
            .map(|t| t.provenance)
            .collect();
        assert_eq!(provenances[..3], vec![Provenance::Seeded; 3]);
        assert!(provenances[3..].iter().all(|&p| p == Provenance::Learner));

        // A malformed seed transition is rejected by name.
        let bad = Transition {
            state: Array1::zeros(5),
            ..seed_row
        };
        let err = meta_test_particle(
            &task,
            &empty,
            &[bad],
            &desk_learner_cfg(),
            &desk_test_cfg(),
            9,
        )
        .unwrap_err();
        assert!(err.to_string().contains("seed transition 0"), "got {err}");
    }

    #[test]
    fn saturated_schedule_delegates_every_episode() {
        let task = desk_task(2, 13);
        let set = ParticleExplorationPolicySet::new(
            2,
            10,
            vec![random_policy(2, 10, 20), random_policy(2, 10, 21)],
        )
        .unwrap();
        let cfg = MetaTestConfig {
            p_explore: AnnealSchedule {
                start: 1.0,
                end: 1.0,
                t_end_frac: 1.0,
                shape: AnnealShape::Linear,
            },
            ..desk_test_cfg()
        };
        let out = meta_test_particle(&task, &set, &[], &desk_learner_cfg(), &cfg, 17).unwrap();
        for t in out.learner.buffer.iter_in_order() {
            assert_eq!(t.provenance, Provenance::Exploration);
            assert!(t.shaped_reward.is_none());
        }
        let again = meta_test_particle(&task, &set, &[], &desk_learner_cfg(), &cfg, 17).unwrap();
        assert_eq!(out.curve, again.curve);
        assert_eq!(out.episode_peaks, again.episode_peaks);
    }

    #[test]
    fn interface_mismatch_is_rejected_at_meta_test() {
        let discrete = ClimbTaskSpec::one_step(2, 3, 0.5, 2, 0).unwrap();
        let empty = ParticleExplorationPolicySet::empty(2, 10);
        let err = meta_test_particle(
            &discrete,
            &empty,
            &[],
            &desk_learner_cfg(),
            &desk_test_cfg(),
            1,
        )
        .unwrap_err();
        assert!(err.to_string().contains("particle"), "got {err}");

        // A populated set with the wrong interface is rejected too.
        let task = desk_task(0, 14);
        let wrong =
            ParticleExplorationPolicySet::new(2, 12, vec![random_policy(2, 12, 30)]).unwrap();
        let err = meta_test_particle(
            &task,
            &wrong,
            &[],
            &desk_learner_cfg(),
            &desk_test_cfg(),
            1,
        )
        .unwrap_err();
        assert!(err.to_string().contains("observations"), "got {err}");
    }

    // --- Persistence ---

    #[test]
    fn particle_manifest_round_trips() {
        let tasks = [solo_task(0, 3), solo_task(1, 4)];
        let learner_cfg = desk_learner_cfg();
        let subspace_cfg = desk_subspace_cfg();
        let train_cfg = MetaTrainConfig {
            collect_episodes: 250,
            collect_warm_up_episodes: 40,
            collect_updates_per_episode: 1,
            expl_max_episodes: 40,
            expl_min_episodes: 12,
            expl_uniform_episodes: 5,
            convergence_window: 5,
            ..desk_train_cfg()
        };
        let out = meta_train_particle(&tasks, &learner_cfg, &subspace_cfg, &train_cfg, 11)
            .expect("harvest found nothing; pick another seed");

        let dir = tempfile::tempdir().unwrap();
        out.save(dir.path(), "fp-particle-1").unwrap();
        let (loaded, fp) = ParticleMetaTrainOutput::load(dir.path()).unwrap();
        assert_eq!(fp, "fp-particle-1");
        assert_eq!(loaded.policies.len(), out.policies.len());
        for (a, b) in loaded
            .policies
            .policies()
            .iter()
            .zip(out.policies.policies())
        {
            assert_eq!(
                serde_json::to_string(a).unwrap(),
                serde_json::to_string(b).unwrap()
            );
        }
        assert_eq!(loaded.mstar.len(), out.mstar.len());
        for i in 0..loaded.mstar.len() {
            assert_eq!(loaded.mstar.points()[i], out.mstar.points()[i]);
            assert_eq!(loaded.mstar.reward(i), out.mstar.reward(i));
            assert_eq!(loaded.mstar.task_id(i), out.mstar.task_id(i));
        }
        assert_eq!(loaded.global_counts.counts(), out.global_counts.counts());
        assert_eq!(loaded.harvest, out.harvest);
        assert_eq!(loaded.seed_transitions.len(), out.seed_transitions.len());

        // The reloaded artifacts drive meta-testing bit-identically.
        let task = solo_task(0, 9);
        let fresh = meta_test_particle(
            &task,
            &out.policies,
            &out.seed_transitions,
            &learner_cfg,
            &desk_test_cfg(),
            5,
        )
        .unwrap();
        let reloaded = meta_test_particle(
            &task,
            &loaded.policies,
            &loaded.seed_transitions,
            &learner_cfg,
            &desk_test_cfg(),
            5,
        )
        .unwrap();
        assert_eq!(fresh.curve, reloaded.curve);
        assert_eq!(fresh.episode_peaks, reloaded.episode_peaks);
        assert_eq!(fresh.final_return, reloaded.final_return);
    }

    #[test]
    fn tampered_particle_manifests_are_rejected() {
        let mut mstar = ValuableSet::new(particle_subspace_dim(1));
        mstar.push(Array1::zeros(6), 1.0, 0).unwrap();
        let (hash, _) = fit_clusters(mstar.points(), 1, 0, 4).unwrap();
        let out = ParticleMetaTrainOutput {
            policies: ParticleExplorationPolicySet::new(1, 6, vec![random_policy(1, 6, 2)])
                .unwrap(),
            mstar,
            hash,
            global_counts: PseudoCounts::global(1),
            harvest: vec![],
            seed_transitions: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        out.save(dir.path(), "fp").unwrap();

        let manifest_path = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path).unwrap();

        let tampered = text.replace("\"format_version\": 1", "\"format_version\": 99");
        std::fs::write(&manifest_path, tampered).unwrap();
        assert!(ParticleMetaTrainOutput::load(dir.path()).is_err());

        let tampered = text.replace(MANIFEST_KIND, "mesa_policies");
        std::fs::write(&manifest_path, tampered).unwrap();
        assert!(ParticleMetaTrainOutput::load(dir.path()).is_err());
    }

    // --- Exploration-quality probe ---

    #[test]
    fn gated_visit_rate_extremes_are_exact() {
        let tasks = [solo_task(0, 5), solo_task(1, 6)];
        let mut far = ValuableSet::new(particle_subspace_dim(1));
        far.push(Array1::from_elem(6, 1e3), 1.0, 0).unwrap();
        let rate = gated_visit_rate(None, &tasks, &far, 1e-12, 0.2, 3, 8).unwrap();
        assert_eq!(rate, 0.0);

        let mut near = ValuableSet::new(particle_subspace_dim(1));
        near.push(Array1::zeros(6), 1.0, 0).unwrap();
        let rate = gated_visit_rate(None, &tasks, &near, 1e9, 0.2, 3, 8).unwrap();
        assert_eq!(rate, 1.0);

        let set =
            ParticleExplorationPolicySet::new(1, 6, vec![random_policy(1, 6, 40)]).unwrap();
        let rate = gated_visit_rate(Some(&set), &tasks, &near, 1e9, 0.2, 3, 8).unwrap();
        assert_eq!(rate, 1.0);
        let again = gated_visit_rate(Some(&set), &tasks, &near, 1e9, 0.2, 3, 8).unwrap();
        assert_eq!(rate, again);

        let empty = ParticleExplorationPolicySet::empty(1, 6);
        let err = gated_visit_rate(Some(&empty), &tasks, &near, 1e9, 0.2, 3, 8).unwrap_err();
        assert!(err.to_string().contains("uniform reference"), "got {err}");
    }
}
