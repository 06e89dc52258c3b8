//! Continuous 2-D particle world playing the climb game over landmarks.
//!
//! Agents are point masses steered by bounded forces. Each of the `U`
//! landmarks corresponds to one discrete "action": standing inside landmark
//! `u` counts toward the special action. Reward follows the climb rule each
//! step once every agent stands on some landmark.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::climb::{ClimbTaskSpec, ClimbVariant, ParticleParams, StageSpec};
use crate::rng::{stream, tags};
use crate::{Error, Result};

/// Integration step length.
pub const DT: f64 = 0.1;
/// Velocity damping factor applied before force integration.
pub const DAMPING: f64 = 0.25;
/// Speed cap per agent.
pub const V_MAX: f64 = 1.0;
/// Arena extends over `[−ARENA_HALFWIDTH, ARENA_HALFWIDTH]²`.
pub const ARENA_HALFWIDTH: f64 = 1.0;
/// An agent occupies a landmark when strictly closer than this.
pub const LANDMARK_RADIUS: f64 = 0.1;
/// Default episode length.
pub const HORIZON: usize = 60;
/// Minimum pairwise landmark separation (disks never overlap).
pub const MIN_SEP: f64 = 3.0 * LANDMARK_RADIUS;

/// One agent's view of the world: own velocity, then relative positions of
/// every landmark, then relative positions of the other agents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleObservation(pub Array1<f64>);

impl ParticleObservation {
    /// Fixed observation length for `n` agents and `u` landmarks.
    pub fn dim(agents: usize, landmarks: usize) -> usize {
        2 + 2 * landmarks + 2 * (agents - 1)
    }
}

/// Draws `count` landmark centers uniformly in the arena, rejecting layouts
/// with any pairwise distance below `min_sep`. Deterministic in `seed`.
pub fn sample_landmarks(
    count: usize,
    arena_halfwidth: f64,
    min_sep: f64,
    seed: u64,
) -> Result<Vec<[f64; 2]>> {
    let mut rng = stream(seed, tags::ENV);
    // Greedy placement with a generous retry budget; exhausting it means the
    // disks cannot reasonably be packed into the arena.
    let budget = 1000 * count.max(1);
    for _ in 0..200 {
        let mut pts: Vec<[f64; 2]> = Vec::with_capacity(count);
        let mut tries = 0;
        while pts.len() < count && tries < budget {
            tries += 1;
            let p = [
                rng.random_range(-arena_halfwidth..=arena_halfwidth),
                rng.random_range(-arena_halfwidth..=arena_halfwidth),
            ];
            let ok = pts
                .iter()
                .all(|q| (p[0] - q[0]).hypot(p[1] - q[1]) >= min_sep);
            if ok {
                pts.push(p);
            }
        }
        if pts.len() == count {
            return Ok(pts);
        }
    }
    Err(Error::InvalidArgument(format!(
        "infeasible geometry: cannot place {count} landmarks with separation {min_sep} \
         in an arena of halfwidth {arena_halfwidth}"
    )))
}

/// Builds a particle task: climb parameters plus a seeded landmark layout.
pub fn particle_task(
    agents: usize,
    landmarks: usize,
    k: usize,
    u: usize,
    delta: f64,
    layout_seed: u64,
) -> Result<ClimbTaskSpec> {
    let spec = ClimbTaskSpec {
        agents,
        actions: landmarks,
        delta,
        stages: vec![StageSpec { k, u }],
        particle: Some(ParticleParams {
            landmarks: sample_landmarks(landmarks, ARENA_HALFWIDTH, MIN_SEP, layout_seed)?,
            horizon: HORIZON,
        }),
    };
    spec.validate()?;
    Ok(spec)
}

/// Result of one particle step.
#[derive(Clone, Debug)]
pub struct ParticleStep {
    /// Per-agent observations after the step.
    pub observations: Vec<ParticleObservation>,
    /// Climb reward at the new positions.
    pub reward: f64,
    /// Whether the episode ended.
    pub done: bool,
}

/// A playable particle-world instance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParticleWorld {
    spec: ClimbTaskSpec,
    positions: Array2<f64>,
    velocities: Array2<f64>,
    t: usize,
    horizon: usize,
}

impl ParticleWorld {
    /// Builds a world from a particle-variant task spec. Positions start at
    /// the origin; call [`ParticleWorld::reset`] to spawn agents.
    pub fn new(spec: ClimbTaskSpec) -> Result<Self> {
        spec.validate()?;
        let params = spec.particle.as_ref().ok_or_else(|| {
            Error::InvalidArgument("ParticleWorld needs a particle-variant task".into())
        })?;
        for (i, a) in params.landmarks.iter().enumerate() {
            for b in params.landmarks.iter().skip(i + 1) {
                if (a[0] - b[0]).hypot(a[1] - b[1]) < MIN_SEP {
                    return Err(Error::InvalidConfig(format!(
                        "particle.landmarks: pair closer than min separation {MIN_SEP}"
                    )));
                }
            }
        }
        debug_assert_eq!(spec.variant(), ClimbVariant::Particle);
        let n = spec.agents;
        let horizon = params.horizon;
        Ok(ParticleWorld {
            spec,
            positions: Array2::zeros((n, 2)),
            velocities: Array2::zeros((n, 2)),
            t: 0,
            horizon,
        })
    }

    /// Task specification.
    pub fn spec(&self) -> &ClimbTaskSpec {
        &self.spec
    }

    /// Landmark centers.
    pub fn landmarks(&self) -> &[[f64; 2]] {
        &self.spec.particle.as_ref().unwrap().landmarks
    }

    /// Current agent positions (`n × 2`).
    pub fn positions(&self) -> &Array2<f64> {
        &self.positions
    }

    /// Current agent velocities (`n × 2`).
    pub fn velocities(&self) -> &Array2<f64> {
        &self.velocities
    }

    /// Timestep within the episode.
    pub fn t(&self) -> usize {
        self.t
    }

    /// Episode length.
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Spawns agents uniformly in the arena with zero velocity and restarts
    /// the clock. Returns the initial observations.
    pub fn reset<R: Rng>(&mut self, rng: &mut R) -> Vec<ParticleObservation> {
        for mut row in self.positions.rows_mut() {
            row[0] = rng.random_range(-ARENA_HALFWIDTH..=ARENA_HALFWIDTH);
            row[1] = rng.random_range(-ARENA_HALFWIDTH..=ARENA_HALFWIDTH);
        }
        self.velocities.fill(0.0);
        self.t = 0;
        self.observations()
    }

    /// Applies one force per agent (`n × 2`, components in `[−1, 1]`).
    pub fn step(&mut self, forces: &Array2<f64>) -> Result<ParticleStep> {
        if self.t >= self.horizon {
            return Err(Error::InvalidState(
                "episode is over; call reset before stepping again".into(),
            ));
        }
        if forces.dim() != (self.spec.agents, 2) {
            return Err(Error::InvalidArgument(format!(
                "forces must be {} × 2, got {:?}",
                self.spec.agents,
                forces.dim()
            )));
        }
        if forces.iter().any(|f| !f.is_finite() || f.abs() > 1.0) {
            return Err(Error::InvalidArgument(
                "force components must lie in [-1, 1]".into(),
            ));
        }
        for i in 0..self.spec.agents {
            let mut vx = (1.0 - DAMPING) * self.velocities[[i, 0]] + forces[[i, 0]] * DT;
            let mut vy = (1.0 - DAMPING) * self.velocities[[i, 1]] + forces[[i, 1]] * DT;
            let speed = vx.hypot(vy);
            if speed > V_MAX {
                vx *= V_MAX / speed;
                vy *= V_MAX / speed;
            }
            self.velocities[[i, 0]] = vx;
            self.velocities[[i, 1]] = vy;
            self.positions[[i, 0]] += vx * DT;
            self.positions[[i, 1]] += vy * DT;
        }
        self.t += 1;
        Ok(ParticleStep {
            observations: self.observations(),
            reward: self.reward(),
            done: self.t == self.horizon,
        })
    }

    /// Index of the landmark nearest to agent `i` (lowest index on ties)
    /// and the distance to it.
    fn nearest_landmark(&self, i: usize) -> (usize, f64) {
        let p = self.positions.index_axis(Axis(0), i);
        let mut best = (0, f64::INFINITY);
        for (j, l) in self.landmarks().iter().enumerate() {
            let d = (p[0] - l[0]).hypot(p[1] - l[1]);
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    }

    /// Landmark occupancy counts: agent `i` counts for landmark `j` iff `j`
    /// is its nearest landmark and the distance is strictly below the
    /// landmark radius, so each agent counts at most once.
    pub fn occupancy(&self) -> Vec<usize> {
        let mut f = vec![0; self.landmarks().len()];
        for i in 0..self.spec.agents {
            let (j, d) = self.nearest_landmark(i);
            if d < LANDMARK_RADIUS {
                f[j] += 1;
            }
        }
        f
    }

    /// Climb reward at the current positions: 1 when exactly `k` agents
    /// occupy the target landmark and everyone occupies some landmark;
    /// `1 − δ` when the target is empty but everyone is placed; else 0.
    pub fn reward(&self) -> f64 {
        let f = self.occupancy();
        let total: usize = f.iter().sum();
        let stage = self.spec.stages[0];
        if total != self.spec.agents {
            0.0
        } else if f[stage.u] == stage.k {
            1.0
        } else if f[stage.u] == 0 {
            1.0 - self.spec.delta
        } else {
            0.0
        }
    }

    /// Per-agent observations.
    pub fn observations(&self) -> Vec<ParticleObservation> {
        let n = self.spec.agents;
        (0..n)
            .map(|i| {
                let p = self.positions.index_axis(Axis(0), i);
                let mut v = Vec::with_capacity(ParticleObservation::dim(n, self.landmarks().len()));
                v.push(self.velocities[[i, 0]]);
                v.push(self.velocities[[i, 1]]);
                for l in self.landmarks() {
                    v.push(l[0] - p[0]);
                    v.push(l[1] - p[1]);
                }
                for other in 0..n {
                    if other != i {
                        v.push(self.positions[[other, 0]] - p[0]);
                        v.push(self.positions[[other, 1]] - p[1]);
                    }
                }
                ParticleObservation(Array1::from(v))
            })
            .collect()
    }

    /// Global state embedding for subspace bookkeeping: per agent, the
    /// offset to its nearest landmark scaled by the arena width and its
    /// velocity scaled by the speed cap. Layout-relative, so it transfers
    /// across tasks with different landmark arrangements.
    pub fn state_embedding(&self) -> Array1<f64> {
        let n = self.spec.agents;
        let mut v = Vec::with_capacity(4 * n);
        for i in 0..n {
            let (j, _) = self.nearest_landmark(i);
            let l = self.landmarks()[j];
            v.push((l[0] - self.positions[[i, 0]]) / (2.0 * ARENA_HALFWIDTH));
            v.push((l[1] - self.positions[[i, 1]]) / (2.0 * ARENA_HALFWIDTH));
            v.push(self.velocities[[i, 0]] / V_MAX);
            v.push(self.velocities[[i, 1]] / V_MAX);
        }
        Array1::from(v)
    }

    /// Dimension of [`ParticleWorld::state_embedding`].
    pub fn state_dim(agents: usize) -> usize {
        4 * agents
    }

    /// Moves agent `i` to an absolute position (testing and seeding).
    pub fn set_position(&mut self, i: usize, p: [f64; 2]) {
        self.positions[[i, 0]] = p[0];
        self.positions[[i, 1]] = p[1];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::array;

    fn world_with_layout(landmarks: Vec<[f64; 2]>, k: usize, u: usize) -> ParticleWorld {
        let n_landmarks = landmarks.len();
        let spec = ClimbTaskSpec {
            agents: 2,
            actions: n_landmarks,
            delta: 0.5,
            stages: vec![StageSpec { k, u }],
            particle: Some(ParticleParams {
                landmarks,
                horizon: 60,
            }),
        };
        ParticleWorld::new(spec).unwrap()
    }

    #[test]
    fn sampled_landmarks_respect_separation_and_seed() {
        let a = sample_landmarks(5, 1.0, 0.4, 11).unwrap();
        let b = sample_landmarks(5, 1.0, 0.4, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        for i in 0..5 {
            for j in i + 1..5 {
                let d = (a[i][0] - a[j][0]).hypot(a[i][1] - a[j][1]);
                assert!(d >= 0.4, "pair ({i},{j}) at distance {d}");
            }
        }
        let single = sample_landmarks(1, 1.0, 0.4, 0).unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn impossible_packing_is_detected() {
        assert!(sample_landmarks(100, 0.1, 0.4, 0).is_err());
    }

    #[test]
    fn rest_plus_unit_force_moves_dt_squared() {
        let mut w = world_with_layout(vec![[0.9, 0.9], [-0.9, -0.9], [0.9, -0.9]], 2, 0);
        // Zero force from rest: fixed point.
        let before = w.positions().clone();
        w.step(&Array2::zeros((2, 2))).unwrap();
        assert_eq!(w.positions(), &before);

        // Unit +x force from rest: v' = dt, p' shifts by dt².
        let forces = array![[1.0, 0.0], [0.0, 0.0]];
        w.step(&forces).unwrap();
        assert!((w.velocities()[[0, 0]] - DT).abs() < 1e-12);
        assert!((w.positions()[[0, 0]] - DT * DT).abs() < 1e-12);
        assert_eq!(w.positions()[[1, 0]], 0.0);
    }

    #[test]
    fn speed_is_clamped() {
        let mut w = world_with_layout(vec![[0.9, 0.9], [-0.9, -0.9]], 2, 0);
        let forces = array![[1.0, 1.0], [1.0, 1.0]];
        for _ in 0..50 {
            w.step(&forces).unwrap();
            for i in 0..2 {
                let s = w.velocities()[[i, 0]].hypot(w.velocities()[[i, 1]]);
                assert!(s <= V_MAX + 1e-12);
            }
        }
    }

    #[test]
    fn out_of_range_force_is_rejected() {
        let mut w = world_with_layout(vec![[0.9, 0.9], [-0.9, -0.9]], 2, 0);
        assert!(w.step(&array![[1.5, 0.0], [0.0, 0.0]]).is_err());
        assert!(w.step(&array![[f64::NAN, 0.0], [0.0, 0.0]]).is_err());
    }

    #[test]
    fn reward_bands_match_climb_rule() {
        let mut w = world_with_layout(vec![[0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]], 2, 0);
        // Both agents inside the target landmark → 1.
        w.set_position(0, [0.52, 0.5]);
        w.set_position(1, [0.48, 0.5]);
        assert_eq!(w.reward(), 1.0);
        // Both inside the same non-target landmark → 1 − δ.
        w.set_position(0, [-0.5, -0.52]);
        w.set_position(1, [-0.5, -0.48]);
        assert_eq!(w.reward(), 0.5);
        // One agent off every landmark → 0.
        w.set_position(0, [0.0, 0.0]);
        assert_eq!(w.reward(), 0.0);
        // Exactly one of two on the target with k=2 → 0.
        w.set_position(0, [0.5, 0.5]);
        w.set_position(1, [-0.5, -0.5]);
        assert_eq!(w.reward(), 0.0);
    }

    #[test]
    fn episode_terminates_at_horizon() {
        let mut w = world_with_layout(vec![[0.9, 0.9], [-0.9, -0.9]], 2, 0);
        let zero = Array2::zeros((2, 2));
        for t in 0..60 {
            let out = w.step(&zero).unwrap();
            assert_eq!(out.done, t == 59);
        }
        assert!(w.step(&zero).is_err());
    }

    #[test]
    fn observation_reconstructs_world() {
        let mut w = world_with_layout(vec![[0.5, 0.5], [-0.5, -0.5]], 2, 0);
        let mut rng = stream(3, 1);
        let obs = w.reset(&mut rng);
        assert_eq!(obs[0].0.len(), ParticleObservation::dim(2, 2));
        // Absolute landmark position = agent position + relative entry.
        for i in 0..2 {
            let o = &obs[i].0;
            for (j, l) in w.landmarks().iter().enumerate() {
                let rx = o[2 + 2 * j];
                let ry = o[2 + 2 * j + 1];
                assert!((w.positions()[[i, 0]] + rx - l[0]).abs() < 1e-12);
                assert!((w.positions()[[i, 1]] + ry - l[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reward_is_translation_invariant() {
        // Shift agents and landmarks together; reward must not change.
        let base = vec![[0.3, 0.2], [-0.4, -0.1]];
        for shift in [[0.0, 0.0], [0.2, -0.3], [-0.5, 0.4]] {
            let shifted: Vec<[f64; 2]> =
                base.iter().map(|l| [l[0] + shift[0], l[1] + shift[1]]).collect();
            let mut w = world_with_layout(shifted.clone(), 2, 0);
            w.set_position(0, [shifted[0][0] + 0.02, shifted[0][1]]);
            w.set_position(1, [shifted[0][0] - 0.02, shifted[0][1]]);
            assert_eq!(w.reward(), 1.0, "shift {shift:?}");
        }
    }

    #[test]
    fn deterministic_dynamics() {
        let mut a = world_with_layout(vec![[0.9, 0.9], [-0.9, -0.9]], 2, 0);
        let mut b = a.clone();
        let forces = array![[0.3, -0.7], [-0.2, 0.5]];
        for _ in 0..10 {
            a.step(&forces).unwrap();
            b.step(&forces).unwrap();
        }
        assert_eq!(a.positions(), b.positions());
        assert_eq!(a.velocities(), b.velocities());
    }

    #[test]
    fn state_embedding_is_bounded_and_sized() {
        let mut w = world_with_layout(vec![[0.5, 0.5], [-0.5, -0.5]], 2, 0);
        let mut rng = stream(9, 1);
        w.reset(&mut rng);
        let e = w.state_embedding();
        assert_eq!(e.len(), ParticleWorld::state_dim(2));
        assert!(e.iter().all(|v| v.abs() <= 1.0 + 1e-12));
    }
}
