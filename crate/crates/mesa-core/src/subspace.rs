//! High-reward-subspace machinery: harvesting valuable experience,
//! densifying sparse rewards, hashing embedded points into clusters, and
//! the count-discounted, distance-gated shaped reward that trains
//! exploration policies.
//!
//! Everything operates on *embedded* joint state-action points: the
//! environment's state embedding concatenated with an action encoding,
//! every feature scaled to `[−1, 1]`. See `climb::action_embedding` and the
//! `state_embedding` methods of the environments.

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};

use crate::rng::{stream, tags};
use crate::{Error, Result};

/// One step of a rollout, reduced to its embedded point and raw reward.
#[derive(Clone, Debug)]
pub struct EmbeddedStep {
    /// Embedding of the joint state-action pair.
    pub point: Array1<f64>,
    /// Raw environment reward.
    pub reward: f64,
}

/// A rollout in embedded form.
pub type EmbeddedTrajectory = Vec<EmbeddedStep>;

/// Densifies a sparse reward sequence: each zero reward is replaced by the
/// nearest *future* positive reward discounted by `relabel_gamma` per step
/// of separation; positive rewards pass through unchanged. Trailing zeros
/// (no future positive reward) stay zero. Single backward pass.
pub fn densify_trajectory(rewards: &[f64], relabel_gamma: f64) -> Vec<f64> {
    let mut out = rewards.to_vec();
    // (value, discount accumulated so far) of the nearest future positive.
    let mut future: Option<(f64, f64)> = None;
    for i in (0..rewards.len()).rev() {
        if rewards[i] > 0.0 {
            future = Some((rewards[i], 1.0));
        } else if let Some((v, disc)) = future {
            let disc = disc * relabel_gamma;
            out[i] = v * disc;
            future = Some((v, disc));
        }
    }
    out
}

/// The harvested set 𝓜* of valuable embedded points with their densified
/// rewards. Exact duplicate points are merged keeping the larger reward, so
/// membership and distance queries are unaffected while the set stays small
/// for discrete games.
#[derive(Clone, Debug, Default)]
pub struct ValuableSet {
    dim: usize,
    points: Vec<Array1<f64>>,
    rewards: Vec<f64>,
    task_ids: Vec<u64>,
    index: HashMap<Vec<u64>, usize>,
}

fn bit_key(point: &Array1<f64>) -> Vec<u64> {
    point.iter().map(|v| v.to_bits()).collect()
}

impl ValuableSet {
    /// Empty set accepting points of dimension `dim`.
    pub fn new(dim: usize) -> Self {
        ValuableSet {
            dim,
            ..Default::default()
        }
    }

    /// Point dimension (0 while empty and unconstrained).
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of stored (distinct) points.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// True iff no points are stored.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Stored points.
    pub fn points(&self) -> &[Array1<f64>] {
        &self.points
    }

    /// Densified reward of point `i`.
    pub fn reward(&self, i: usize) -> f64 {
        self.rewards[i]
    }

    /// Task the point was harvested from.
    pub fn task_id(&self, i: usize) -> u64 {
        self.task_ids[i]
    }

    /// Inserts a point, merging exact duplicates by keeping the larger
    /// reward (and that reward's task id).
    pub fn push(&mut self, point: Array1<f64>, r_hat: f64, task_id: u64) -> Result<()> {
        if self.points.is_empty() && self.dim == 0 {
            self.dim = point.len();
        }
        if point.len() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "point dimension {} does not match set dimension {}",
                point.len(),
                self.dim
            )));
        }
        match self.index.entry(bit_key(&point)) {
            std::collections::hash_map::Entry::Occupied(e) => {
                let i = *e.get();
                if r_hat > self.rewards[i] {
                    self.rewards[i] = r_hat;
                    self.task_ids[i] = task_id;
                }
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(self.points.len());
                self.points.push(point);
                self.rewards.push(r_hat);
                self.task_ids.push(task_id);
            }
        }
        Ok(())
    }

    /// Merges another set into this one.
    pub fn merge(&mut self, other: &ValuableSet) -> Result<()> {
        for i in 0..other.len() {
            self.push(other.points[i].clone(), other.rewards[i], other.task_ids[i])?;
        }
        Ok(())
    }

    /// Exhaustive-scan minimum L2 distance from `point` to the set;
    /// infinite when the set is empty.
    pub fn min_distance(&self, point: &Array1<f64>) -> f64 {
        self.points
            .iter()
            .map(|p| {
                p.iter()
                    .zip(point.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }

    /// Uniform seeded subsample down to at most `max_points`, preserving
    /// insertion order. Used to bound gate-scan cost on continuous games.
    pub fn subsample(&self, max_points: usize, seed: u64) -> ValuableSet {
        if self.len() <= max_points {
            return self.clone();
        }
        let mut rng = stream(seed, tags::COLLECT);
        let mut keep: Vec<usize> = (0..self.len()).collect();
        for i in 0..max_points {
            let j = rng.random_range(i..keep.len());
            keep.swap(i, j);
        }
        keep.truncate(max_points);
        keep.sort_unstable();
        let mut out = ValuableSet::new(self.dim);
        for i in keep {
            out.push(self.points[i].clone(), self.rewards[i], self.task_ids[i])
                .expect("dimensions agree by construction");
        }
        out
    }

    /// Writes the set as CSV: `e0..e{d−1}, r_hat, task_id`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.dim).map(|i| format!("e{i}")).collect();
        header.push("r_hat".into());
        header.push("task_id".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.points[i].iter().map(|v| format!("{v}")).collect();
            rec.push(format!("{}", self.rewards[i]));
            rec.push(format!("{}", self.task_ids[i]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a set written by [`ValuableSet::write_csv`].
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        if headers.len() < 3 {
            return Err(Error::InvalidArgument(
                "valuable-set CSV needs at least e0, r_hat, task_id columns".into(),
            ));
        }
        let dim = headers.len() - 2;
        let mut out = ValuableSet::new(dim);
        let parse = |field: &str, what: &str| -> Result<f64> {
            field.parse::<f64>().map_err(|_| {
                Error::InvalidArgument(format!("valuable-set CSV: bad {what}: {field:?}"))
            })
        };
        for rec in r.records() {
            let rec = rec?;
            let point: Array1<f64> = (0..dim)
                .map(|i| parse(&rec[i], "coordinate"))
                .collect::<Result<Vec<f64>>>()?
                .into();
            let r_hat = parse(&rec[dim], "reward")?;
            let task_id = rec[dim + 1].parse::<u64>().map_err(|_| {
                Error::InvalidArgument(format!(
                    "valuable-set CSV: bad task id: {:?}",
                    &rec[dim + 1]
                ))
            })?;
            out.push(point, r_hat, task_id)?;
        }
        Ok(out)
    }
}

/// Harvests valuable experience from one task's rollouts: trajectories
/// whose raw return reaches `r_star` are densified, and every step with a
/// positive densified reward is stored.
pub fn collect_valuable(
    trajectories: &[EmbeddedTrajectory],
    r_star: f64,
    relabel_gamma: f64,
    task_id: u64,
) -> Result<ValuableSet> {
    if !(relabel_gamma > 0.0 && relabel_gamma < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "relabel_gamma must lie in (0, 1), got {relabel_gamma}"
        )));
    }
    let mut out = ValuableSet::default();
    for traj in trajectories {
        let raw_return: f64 = traj.iter().map(|s| s.reward).sum();
        if raw_return < r_star {
            continue;
        }
        let rewards: Vec<f64> = traj.iter().map(|s| s.reward).collect();
        let densified = densify_trajectory(&rewards, relabel_gamma);
        for (step, &r_hat) in traj.iter().zip(&densified) {
            if r_hat > 0.0 {
                out.push(step.point.clone(), r_hat, task_id)?;
            }
        }
    }
    Ok(out)
}

/// True iff `point` lies within `dist_eps` of the harvested set.
pub fn gated(mstar: &ValuableSet, point: &Array1<f64>, dist_eps: f64) -> bool {
    mstar.min_distance(point) < dist_eps
}

/// K-means hash: maps an embedded point to its nearest centroid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClusterHash {
    centroids: Vec<Array1<f64>>,
}

/// Objective trace of a [`fit_clusters`] run, one entry per Lloyd
/// iteration (sum of squared point-to-centroid distances).
#[derive(Clone, Debug)]
pub struct FitDiagnostics {
    pub objective_trace: Vec<f64>,
}

impl ClusterHash {
    /// Number of clusters.
    pub fn num_clusters(&self) -> usize {
        self.centroids.len()
    }

    /// Point dimension.
    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, |c| c.len())
    }

    /// Centroids.
    pub fn centroids(&self) -> &[Array1<f64>] {
        &self.centroids
    }

    /// Index of the nearest centroid under L2, lowest index on ties.
    pub fn assign(&self, point: &Array1<f64>) -> usize {
        let mut best = (0usize, f64::INFINITY);
        for (i, c) in self.centroids.iter().enumerate() {
            let d: f64 = c
                .iter()
                .zip(point.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    fn objective(&self, points: &[Array1<f64>]) -> f64 {
        points
            .iter()
            .map(|p| {
                let c = &self.centroids[self.assign(p)];
                c.iter()
                    .zip(p.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum()
    }
}

/// Fits a k-means hash with Lloyd's algorithm. Initialization picks a
/// seeded random first centroid among the distinct points, then repeatedly
/// the distinct point farthest from the chosen set (lowest index on ties),
/// which is deterministic given the seed. Iterates to an assignment
/// fixpoint or `max_iters`.
pub fn fit_clusters(
    points: &[Array1<f64>],
    clusters: usize,
    seed: u64,
    max_iters: usize,
) -> Result<(ClusterHash, FitDiagnostics)> {
    if clusters == 0 {
        return Err(Error::InvalidArgument("cluster count must be positive".into()));
    }
    // Distinct points, preserving first-occurrence order.
    let mut seen = HashMap::new();
    let mut distinct: Vec<&Array1<f64>> = Vec::new();
    for p in points {
        if seen.insert(bit_key(p), ()).is_none() {
            distinct.push(p);
        }
    }
    if clusters > distinct.len() {
        return Err(Error::InvalidArgument(format!(
            "cluster count {clusters} exceeds the {} distinct points",
            distinct.len()
        )));
    }

    // Farthest-point initialization.
    let mut rng = stream(seed, tags::CLUSTER);
    let first = rng.random_range(0..distinct.len());
    let mut centroids: Vec<Array1<f64>> = vec![distinct[first].clone()];
    let sq = |a: &Array1<f64>, b: &Array1<f64>| -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let mut min_d: Vec<f64> = distinct.iter().map(|p| sq(p, &centroids[0])).collect();
    while centroids.len() < clusters {
        let far = min_d
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("distances are finite"))
            .map(|(i, _)| i)
            .expect("distinct is non-empty");
        centroids.push(distinct[far].clone());
        for (i, p) in distinct.iter().enumerate() {
            min_d[i] = min_d[i].min(sq(p, centroids.last().unwrap()));
        }
    }

    // Lloyd iterations on the full point list.
    let dim = points[0].len();
    let mut hash = ClusterHash { centroids };
    let mut assignment: Vec<usize> = points.iter().map(|p| hash.assign(p)).collect();
    let mut trace = vec![hash.objective(points)];
    for _ in 0..max_iters {
        // Means of assigned points; empty clusters keep their centroid.
        let mut sums = vec![Array1::<f64>::zeros(dim); hash.num_clusters()];
        let mut counts = vec![0usize; hash.num_clusters()];
        for (p, &a) in points.iter().zip(&assignment) {
            sums[a] += p;
            counts[a] += 1;
        }
        for (c, (s, &n)) in hash.centroids.iter_mut().zip(sums.iter().zip(&counts)) {
            if n > 0 {
                *c = s / n as f64;
            }
        }
        let next: Vec<usize> = points.iter().map(|p| hash.assign(p)).collect();
        trace.push(hash.objective(points));
        let stable = next == assignment;
        assignment = next;
        if stable {
            break;
        }
    }
    Ok((
        hash,
        FitDiagnostics {
            objective_trace: trace,
        },
    ))
}

/// Whether a count vector tracks one trajectory (reset per episode from the
/// global counts) or the global visitation across the whole meta-train run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CountScope {
    Trajectory,
    Global,
}

/// Per-cluster visit counts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PseudoCounts {
    scope: CountScope,
    counts: Vec<u64>,
}

impl PseudoCounts {
    /// Fresh global counts (all zero).
    pub fn global(clusters: usize) -> Self {
        PseudoCounts {
            scope: CountScope::Global,
            counts: vec![0; clusters],
        }
    }

    /// Trajectory counts initialized from the global counts, so exploration
    /// is repelled from clusters earlier policies already covered.
    pub fn trajectory_from(global: &PseudoCounts) -> Result<Self> {
        if global.scope != CountScope::Global {
            return Err(Error::InvalidArgument(
                "trajectory counts must be initialized from global counts".into(),
            ));
        }
        Ok(PseudoCounts {
            scope: CountScope::Trajectory,
            counts: global.counts.clone(),
        })
    }

    /// The scope of this vector.
    pub fn scope(&self) -> CountScope {
        self.scope
    }

    /// Count per cluster.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Sum of all counts.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Count-discounted, distance-gated shaped reward.
///
/// If `point` lies farther than `dist_eps` from every harvested point the
/// reward is 0 and the counts stay untouched. Otherwise the count of the
/// point's cluster is incremented and the reward is
/// `r_hat · 1 / N_new^f_d_exponent` with `N_new` the post-increment count,
/// so a first visit is undiscounted.
pub fn shaped_reward(
    point: &Array1<f64>,
    r_hat: f64,
    hash: &ClusterHash,
    counts: &mut PseudoCounts,
    mstar: &ValuableSet,
    dist_eps: f64,
    f_d_exponent: f64,
) -> Result<f64> {
    if mstar.is_empty() {
        return Err(Error::InvalidState(
            "shaped reward needs a non-empty valuable set".into(),
        ));
    }
    if counts.scope != CountScope::Trajectory {
        return Err(Error::InvalidArgument(
            "shaped reward operates on trajectory-scope counts".into(),
        ));
    }
    if !(dist_eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "dist_eps must be positive, got {dist_eps}"
        )));
    }
    if !gated(mstar, point, dist_eps) {
        return Ok(0.0);
    }
    let c = hash.assign(point);
    counts.counts[c] += 1;
    let n_new = counts.counts[c] as f64;
    Ok(r_hat / n_new.powf(f_d_exponent))
}

/// Folds one episode's gated points into the global counts (the caller
/// gates; only points that passed the within-ε test belong here).
pub fn update_global_counts(
    global: &mut PseudoCounts,
    gated_points: &[Array1<f64>],
    hash: &ClusterHash,
) -> Result<()> {
    if global.scope != CountScope::Global {
        return Err(Error::InvalidArgument(
            "update_global_counts operates on global-scope counts".into(),
        ));
    }
    for p in gated_points {
        global.counts[hash.assign(p)] += 1;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn step(point: Array1<f64>, reward: f64) -> EmbeddedStep {
        EmbeddedStep { point, reward }
    }

    #[test]
    fn densify_matches_hand_computed_examples() {
        let out = densify_trajectory(&[0.0, 0.5, 0.0, 1.0], 0.05);
        assert_eq!(out, vec![0.025, 0.5, 0.05, 1.0]);

        let out = densify_trajectory(&[0.0, 0.0, 1.0], 0.05);
        assert_eq!(out, vec![0.0025000000000000005, 0.05, 1.0]);

        // Positive entries pass through; all-zero stays zero; trailing
        // zeros have no future positive to inherit from.
        assert_eq!(densify_trajectory(&[0.3, 0.7], 0.05), vec![0.3, 0.7]);
        assert_eq!(densify_trajectory(&[0.0, 0.0], 0.05), vec![0.0, 0.0]);
        assert_eq!(densify_trajectory(&[1.0, 0.0], 0.05), vec![1.0, 0.0]);
    }

    #[test]
    fn densify_is_idempotent() {
        let seqs: Vec<Vec<f64>> = vec![
            vec![0.0, 0.5, 0.0, 1.0],
            vec![0.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0, 0.5, 0.0],
            vec![0.0, 0.0, 0.25, 0.0, 0.0, 1.0, 0.0],
        ];
        for s in seqs {
            let once = densify_trajectory(&s, 0.05);
            let twice = densify_trajectory(&once, 0.05);
            assert_eq!(once, twice, "input {s:?}");
        }
    }

    #[test]
    fn collect_stores_positive_densified_points_of_qualifying_trajectories() {
        let traj = vec![
            step(array![0.0, 0.0], 0.0),
            step(array![0.0, 1.0], 0.0),
            step(array![1.0, 1.0], 1.0),
        ];
        let set = collect_valuable(&[traj], 1.0, 0.05, 7).unwrap();
        assert_eq!(set.len(), 3);
        let rewards: Vec<f64> = (0..3).map(|i| set.reward(i)).collect();
        assert!(rewards.contains(&1.0));
        assert!(rewards.contains(&0.05));
        assert!(set.task_id(0) == 7);

        // Trailing zero is not stored.
        let traj = vec![step(array![1.0, 0.0], 1.0), step(array![0.0, 1.0], 0.0)];
        let set = collect_valuable(&[traj], 1.0, 0.05, 0).unwrap();
        assert_eq!(set.len(), 1);

        // All-zero trajectory contributes nothing.
        let traj = vec![step(array![0.0, 0.0], 0.0)];
        let set = collect_valuable(&[traj], 1.0, 0.05, 0).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn collect_filters_trajectories_below_the_return_threshold() {
        // Positive rewards, but the episode return 0.5 misses R* = 1, so
        // nothing is harvested from it.
        let low = vec![step(array![0.5, 0.5], 0.5)];
        let high = vec![step(array![1.0, 1.0], 1.0)];
        let set = collect_valuable(&[low, high], 1.0, 0.05, 0).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.reward(0), 1.0);
    }

    #[test]
    fn collect_rejects_bad_gamma_and_accepts_empty_input() {
        assert!(collect_valuable(&[], 1.0, 1.5, 0).is_err());
        let set = collect_valuable(&[], 1.0, 0.05, 0).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn duplicate_points_keep_the_larger_reward() {
        let mut set = ValuableSet::new(2);
        set.push(array![1.0, 0.0], 0.05, 1).unwrap();
        set.push(array![1.0, 0.0], 1.0, 2).unwrap();
        set.push(array![1.0, 0.0], 0.5, 3).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.reward(0), 1.0);
        assert_eq!(set.task_id(0), 2);
    }

    #[test]
    fn min_distance_scans_exhaustively_and_is_infinite_when_empty() {
        let set = ValuableSet::new(2);
        assert!(set.min_distance(&array![0.0, 0.0]).is_infinite());

        let mut set = ValuableSet::new(2);
        set.push(array![0.0, 0.0], 1.0, 0).unwrap();
        set.push(array![3.0, 4.0], 1.0, 0).unwrap();
        assert!((set.min_distance(&array![3.0, 0.0]) - 3.0).abs() < 1e-12);
        assert!((set.min_distance(&array![0.0, 4.0]) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let mut set = ValuableSet::new(3);
        set.push(array![1.0, -1.0, 0.5], 1.0, 4).unwrap();
        set.push(array![0.0, 0.25, -0.75], 0.05, 9).unwrap();
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let back = ValuableSet::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.dim(), 3);
        assert_eq!(back.points()[0], array![1.0, -1.0, 0.5]);
        assert_eq!(back.reward(1), 0.05);
        assert_eq!(back.task_id(1), 9);
    }

    #[test]
    fn two_blob_clustering_finds_the_blob_means() {
        let pts = vec![
            array![0.0, 0.0],
            array![0.0, 1.0],
            array![10.0, 0.0],
            array![10.0, 1.0],
        ];
        let (hash, diag) = fit_clusters(&pts, 2, 0, 50).unwrap();
        let mut cs: Vec<Vec<f64>> = hash.centroids().iter().map(|c| c.to_vec()).collect();
        cs.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(cs[0], vec![0.0, 0.5]);
        assert_eq!(cs[1], vec![10.0, 0.5]);
        // Objective is non-increasing along the trace.
        for w in diag.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "trace {:?}", diag.objective_trace);
        }
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = vec![array![1.0, 2.0], array![3.0, 4.0], array![5.0, 0.0]];
        let (hash, _) = fit_clusters(&pts, 1, 0, 50).unwrap();
        assert_eq!(hash.centroids()[0], array![3.0, 2.0]);
    }

    #[test]
    fn too_many_clusters_is_an_error() {
        let pts = vec![array![0.0], array![0.0], array![1.0]];
        assert!(fit_clusters(&pts, 3, 0, 50).is_err());
        assert!(fit_clusters(&pts, 2, 0, 50).is_ok());
    }

    #[test]
    fn fit_beats_random_assignment_on_random_data() {
        use rand::Rng;
        let mut rng = crate::rng::stream(5, 1);
        for trial in 0..20 {
            let pts: Vec<Array1<f64>> = (0..40)
                .map(|_| Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0)))
                .collect();
            let c = 4;
            let (hash, _) = fit_clusters(&pts, c, trial, 50).unwrap();
            // Random assignment baseline: centroid = mean of a random split.
            let assign: Vec<usize> = (0..pts.len()).map(|i| i % c).collect();
            let mut sums = vec![Array1::<f64>::zeros(3); c];
            let mut counts = vec![0usize; c];
            for (p, &a) in pts.iter().zip(&assign) {
                sums[a] += p;
                counts[a] += 1;
            }
            let random_obj: f64 = pts
                .iter()
                .zip(&assign)
                .map(|(p, &a)| {
                    let m = &sums[a] / counts[a] as f64;
                    p.iter().zip(m.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
                })
                .sum();
            assert!(
                hash.objective(&pts) <= random_obj + 1e-12,
                "trial {trial}: fit {} vs random {random_obj}",
                hash.objective(&pts)
            );
        }
    }

    #[test]
    fn assignment_breaks_ties_toward_the_lowest_index() {
        let hash = ClusterHash {
            centroids: vec![array![1.0, 0.0], array![-1.0, 0.0]],
        };
        // Origin is equidistant; lowest index wins.
        assert_eq!(hash.assign(&array![0.0, 0.0]), 0);
        assert_eq!(hash.assign(&array![-0.1, 0.0]), 1);
    }

    fn tiny_setup() -> (ValuableSet, ClusterHash, PseudoCounts) {
        let mut mstar = ValuableSet::new(2);
        mstar.push(array![1.0, 1.0], 1.0, 0).unwrap();
        mstar.push(array![-1.0, -1.0], 0.5, 0).unwrap();
        let (hash, _) = fit_clusters(
            &[array![1.0, 1.0], array![-1.0, -1.0]],
            2,
            0,
            10,
        )
        .unwrap();
        let global = PseudoCounts::global(hash.num_clusters());
        (mstar, hash, global)
    }

    #[test]
    fn shaped_reward_first_and_repeat_visits() {
        let (mstar, hash, global) = tiny_setup();
        let mut counts = PseudoCounts::trajectory_from(&global).unwrap();
        let p = array![1.0, 1.0];
        let r1 = shaped_reward(&p, 1.0, &hash, &mut counts, &mstar, 0.1, 5.0).unwrap();
        assert_eq!(r1, 1.0);
        let r2 = shaped_reward(&p, 1.0, &hash, &mut counts, &mstar, 0.1, 5.0).unwrap();
        assert_eq!(r2, 1.0 / 32.0);
        let r3 = shaped_reward(&p, 1.0, &hash, &mut counts, &mstar, 0.1, 5.0).unwrap();
        assert!(r3 < r2 && r2 < r1);
    }

    #[test]
    fn shaped_reward_gate_blocks_distant_points() {
        let (mstar, hash, global) = tiny_setup();
        let mut counts = PseudoCounts::trajectory_from(&global).unwrap();
        let far = array![0.0, 0.0];
        let r = shaped_reward(&far, 1.0, &hash, &mut counts, &mstar, 0.1, 5.0).unwrap();
        assert_eq!(r, 0.0);
        assert_eq!(counts.total(), 0, "gate must leave counts untouched");
    }

    #[test]
    fn shaped_reward_rejects_empty_set_and_wrong_scope() {
        let (mstar, hash, global) = tiny_setup();
        let empty = ValuableSet::new(2);
        let mut counts = PseudoCounts::trajectory_from(&global).unwrap();
        assert!(
            shaped_reward(&array![1.0, 1.0], 1.0, &hash, &mut counts, &empty, 0.1, 5.0).is_err()
        );
        let mut wrong_scope = PseudoCounts::global(hash.num_clusters());
        assert!(
            shaped_reward(&array![1.0, 1.0], 1.0, &hash, &mut wrong_scope, &mstar, 0.1, 5.0)
                .is_err()
        );
    }

    #[test]
    fn trajectory_counts_inherit_global_and_globals_accumulate() {
        let (_, hash, mut global) = tiny_setup();
        update_global_counts(
            &mut global,
            &[array![1.0, 1.0], array![1.0, 1.0], array![1.0, 0.9]],
            &hash,
        )
        .unwrap();
        assert_eq!(global.counts()[hash.assign(&array![1.0, 1.0])], 3);

        // A fresh trajectory vector starts from the global counts, so the
        // "first" visit within the episode is already discounted.
        let mut traj = PseudoCounts::trajectory_from(&global).unwrap();
        let mut mstar = ValuableSet::new(2);
        mstar.push(array![1.0, 1.0], 1.0, 0).unwrap();
        let r = shaped_reward(&array![1.0, 1.0], 1.0, &hash, &mut traj, &mstar, 0.1, 5.0)
            .unwrap();
        assert_eq!(r, 1.0 / 4.0f64.powi(5));

        // Scope misuse is rejected.
        let traj2 = PseudoCounts::trajectory_from(&global).unwrap();
        assert!(PseudoCounts::trajectory_from(&traj2).is_err());
        let mut as_global = traj2;
        assert!(update_global_counts(&mut as_global, &[], &hash).is_err());
    }

    #[test]
    fn subsample_caps_size_deterministically() {
        let mut set = ValuableSet::new(1);
        for i in 0..100 {
            set.push(array![i as f64], 1.0, 0).unwrap();
        }
        let a = set.subsample(10, 42);
        let b = set.subsample(10, 42);
        assert_eq!(a.len(), 10);
        assert_eq!(
            a.points().iter().map(|p| p[0]).collect::<Vec<_>>(),
            b.points().iter().map(|p| p[0]).collect::<Vec<_>>()
        );
        // No-op when already small enough.
        assert_eq!(set.subsample(200, 42).len(), 100);
    }
}
