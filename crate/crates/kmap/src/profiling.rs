//! Cross-segment state management, behavioral clustering, and the two
//! profile losses applied to the base student embeddings between epochs.
//!
//! States carried across segments are plain tensors: the boundary detaches
//! gradients, truncating backpropagation at the segment length.

use crate::config::ModelDims;
use crate::data::mix_seed;
use crate::error::{KmapError, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, HashMap};

/// Behavior-side features of the most recent material of one type, carried
/// across the segment boundary as constants.
#[derive(Debug, Clone)]
pub struct SlotState {
    pub b: Tensor,
    pub w: Tensor,
    pub c: Tensor,
}

/// Everything the next segment's first step needs from its predecessor.
#[derive(Debug, Clone)]
pub struct CarriedState {
    pub memory: Tensor,
    pub h: Tensor,
    pub m: Tensor,
    /// Type embedding of the last processed step; `None` selects the
    /// learned start embedding (stream start).
    pub prev_z: Option<Tensor>,
    pub q_slot: Option<SlotState>,
    pub l_slot: Option<SlotState>,
    /// Response embedding of the most recent assessed step.
    pub r_last: Option<Tensor>,
    /// Segments already processed for this student.
    pub segments_done: usize,
}

impl CarriedState {
    /// Fresh state for the first segment: Gaussian memory, zero LSTM state,
    /// and no boundary features. Deterministic per (student, seed).
    pub fn fresh(dims: &ModelDims, student: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, student as u64, 0x1011]));
        CarriedState {
            memory: Tensor::randn(vec![dims.n_c, dims.d_v], 0.0, 0.1, &mut rng),
            h: Tensor::zeros(vec![dims.d_h]),
            m: Tensor::zeros(vec![dims.d_h]),
            prev_z: None,
            q_slot: None,
            l_slot: None,
            r_last: None,
            segments_done: 0,
        }
    }
}

/// Per-student carried states, reset at every epoch boundary.
#[derive(Debug, Default)]
pub struct StateStore {
    states: HashMap<usize, CarriedState>,
}

impl StateStore {
    pub fn new() -> Self {
        StateStore::default()
    }

    /// Terminal state of the previous segment, or a fresh seeded state for
    /// the first one.
    pub fn init_segment_state(&self, student: usize, dims: &ModelDims, seed: u64) -> CarriedState {
        match self.states.get(&student) {
            Some(s) => s.clone(),
            None => CarriedState::fresh(dims, student, seed),
        }
    }

    pub fn update(&mut self, student: usize, state: CarriedState) {
        self.states.insert(student, state);
    }

    pub fn reset(&mut self) {
        self.states.clear();
    }

    pub fn segments_done(&self, student: usize) -> usize {
        self.states.get(&student).map_or(0, |s| s.segments_done)
    }
}

/// Per-epoch containers of segment-specific student embedding snapshots and
/// terminal behavior states.
#[derive(Debug, Default, Clone)]
pub struct ProfileLedger {
    snapshots: BTreeMap<usize, Vec<Vec<f64>>>,
    terminals: BTreeMap<usize, Vec<Vec<f64>>>,
}

impl ProfileLedger {
    pub fn new() -> Self {
        ProfileLedger::default()
    }

    pub fn record(&mut self, student: usize, snapshot: Vec<f64>, terminal_h: Vec<f64>) {
        self.snapshots.entry(student).or_default().push(snapshot);
        self.terminals.entry(student).or_default().push(terminal_h);
    }

    pub fn clear(&mut self) {
        self.snapshots.clear();
        self.terminals.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn students(&self) -> Vec<usize> {
        self.snapshots.keys().copied().collect()
    }

    pub fn snapshots_of(&self, student: usize) -> &[Vec<f64>] {
        &self.snapshots[&student]
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = l2(v);
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

fn mean_of(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mut out = vec![0.0; d];
    for r in rows {
        for (o, x) in out.iter_mut().zip(r) {
            *o += x;
        }
    }
    for o in out.iter_mut() {
        *o /= rows.len() as f64;
    }
    out
}

/// Lloyd's algorithm with k-means++ seeding. Empty clusters are re-seeded
/// from the point farthest from its assigned centroid.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    if k == 0 || k > points.len() {
        return Err(KmapError::invalid(format!(
            "kmeans needs 1 <= k <= n, got k={k} for {} points",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // k-means++ init
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())].clone());
    while centroids.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centroids
                    .iter()
                    .map(|c| dist(p, c))
                    .fold(f64::INFINITY, f64::min)
                    .powi(2)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.push(points[next].clone());
    }

    let mut assignments = vec![0usize; points.len()];
    let mut prev_objective = f64::INFINITY;
    for _ in 0..max_iter {
        // assignment step
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = dist(p, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assignments[i] = best;
        }
        // update step
        for c in 0..k {
            let members: Vec<Vec<f64>> = points
                .iter()
                .zip(&assignments)
                .filter(|(_, &a)| a == c)
                .map(|(p, _)| p.clone())
                .collect();
            if members.is_empty() {
                // re-seed at the point farthest from its current centroid
                let far = (0..points.len())
                    .max_by(|&i, &j| {
                        dist(&points[i], &centroids[assignments[i]])
                            .partial_cmp(&dist(&points[j], &centroids[assignments[j]]))
                            .unwrap()
                    })
                    .unwrap();
                centroids[c] = points[far].clone();
                assignments[far] = c;
            } else {
                centroids[c] = mean_of(&members);
            }
        }
        let objective: f64 = points
            .iter()
            .zip(&assignments)
            .map(|(p, &a)| dist(p, &centroids[a]).powi(2))
            .sum();
        if (prev_objective - objective).abs() < tol {
            break;
        }
        prev_objective = objective;
    }
    Ok((assignments, centroids))
}

/// Within-cluster sum of squared distances.
pub fn kmeans_objective(points: &[Vec<f64>], assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| dist(p, &centroids[a]).powi(2))
        .sum()
}

/// Output of the per-epoch clustering pass.
#[derive(Debug, Clone)]
pub struct ClusterOutcome {
    /// Students in ledger order; parallel to all the vectors below.
    pub students: Vec<usize>,
    /// Mean normalized embedding snapshots per student.
    pub v_bar: Vec<Vec<f64>>,
    /// Mean normalized terminal behavior states per student.
    pub b_bar: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// KMeans centroids in behavior space.
    pub centroids_b: Vec<Vec<f64>>,
    /// Mean member embedding per cluster.
    pub centroid_embeddings: Vec<Vec<f64>>,
    pub d_ic: Vec<f64>,
    pub d_nc: Vec<f64>,
}

/// Normalize and average each student's snapshots, cluster the behavioral
/// summaries, and derive per-cluster embedding centroids with intra/nearest
/// distances per student.
pub fn epoch_cluster(
    ledger: &ProfileLedger,
    n_clusters: usize,
    seed: u64,
) -> Result<ClusterOutcome> {
    let students = ledger.students();
    if students.is_empty() {
        return Err(KmapError::invalid("cluster pass needs a non-empty ledger"));
    }
    if n_clusters > students.len() {
        return Err(KmapError::invalid(format!(
            "n_clusters ({n_clusters}) exceeds the number of students ({})",
            students.len()
        )));
    }
    let mut v_bar = Vec::with_capacity(students.len());
    let mut b_bar = Vec::with_capacity(students.len());
    for &s in &students {
        let snaps = &ledger.snapshots[&s];
        let terms = &ledger.terminals[&s];
        let v_norm: Vec<Vec<f64>> = snaps.iter().map(|v| normalize(v)).collect();
        let b_norm: Vec<Vec<f64>> = terms.iter().map(|v| normalize(v)).collect();
        v_bar.push(mean_of(&v_norm));
        b_bar.push(mean_of(&b_norm));
    }
    let (assignments, centroids_b) = kmeans(&b_bar, n_clusters, seed, 100, 1e-6)?;

    let mut centroid_embeddings = Vec::with_capacity(n_clusters);
    for c in 0..n_clusters {
        let members: Vec<Vec<f64>> = v_bar
            .iter()
            .zip(&assignments)
            .filter(|(_, &a)| a == c)
            .map(|(v, _)| v.clone())
            .collect();
        // kmeans re-seeding guarantees no empty clusters
        centroid_embeddings.push(mean_of(&members));
    }

    let mut d_ic = Vec::with_capacity(students.len());
    let mut d_nc = Vec::with_capacity(students.len());
    for (i, v) in v_bar.iter().enumerate() {
        let own = assignments[i];
        d_ic.push(dist(v, &centroid_embeddings[own]));
        let nearest_other = (0..n_clusters)
            .filter(|&c| c != own)
            .map(|c| dist(v, &centroid_embeddings[c]))
            .fold(f64::INFINITY, f64::min);
        d_nc.push(nearest_other);
    }

    Ok(ClusterOutcome {
        students,
        v_bar,
        b_bar,
        assignments,
        centroids_b,
        centroid_embeddings,
        d_ic,
        d_nc,
    })
}

/// Mean over students of the summed pairwise distances between their
/// embedding snapshots.
pub fn build_convergence_loss(g: &mut Graph, snapshots: &[Vec<NodeId>]) -> Result<NodeId> {
    if snapshots.is_empty() {
        return Err(KmapError::invalid("convergence loss needs students"));
    }
    let mut terms = Vec::new();
    for snaps in snapshots {
        for i in 0..snaps.len() {
            for j in (i + 1)..snaps.len() {
                terms.push(g.l2_dist(snaps[i], snaps[j])?);
            }
        }
    }
    if terms.is_empty() {
        return g.scalar(0.0);
    }
    let total = g.add_n(&terms)?;
    g.scale(total, 1.0 / snapshots.len() as f64)
}

/// Mean over students of `exp(-((d_nc - d_ic) / max(d_ic, d_nc)) / tau)`,
/// with distances measured from each student's mean embedding to the fixed
/// per-cluster embedding centroids.
pub fn build_silhouette_loss(
    g: &mut Graph,
    v_bar: &[NodeId],
    assignments: &[usize],
    centroid_embeddings: &[Vec<f64>],
    tau: f64,
) -> Result<NodeId> {
    let k = centroid_embeddings.len();
    if k < 2 {
        return Err(KmapError::invalid(
            "silhouette loss requires at least 2 clusters",
        ));
    }
    if v_bar.len() != assignments.len() || v_bar.is_empty() {
        return Err(KmapError::invalid("silhouette loss needs labeled students"));
    }
    let mut terms = Vec::with_capacity(v_bar.len());
    for (i, &v) in v_bar.iter().enumerate() {
        let own = assignments[i];
        let own_centroid = g.constant(Tensor::vector(centroid_embeddings[own].clone()))?;
        let d_ic = g.l2_dist(v, own_centroid)?;
        // pick the nearest other centroid by value, then build the node
        let mut best_c = usize::MAX;
        let mut best_d = f64::INFINITY;
        for (c, centroid) in centroid_embeddings.iter().enumerate() {
            if c == own {
                continue;
            }
            let d = dist(g.value(v).data(), centroid);
            if d < best_d {
                best_d = d;
                best_c = c;
            }
        }
        let near_centroid = g.constant(Tensor::vector(centroid_embeddings[best_c].clone()))?;
        let d_nc = g.l2_dist(v, near_centroid)?;
        let diff = g.sub(d_nc, d_ic)?;
        let denom = if g.value(d_ic).item() >= g.value(d_nc).item() {
            d_ic
        } else {
            d_nc
        };
        let frac = g.div(diff, denom)?;
        let scaled = g.scale(frac, -1.0 / tau)?;
        terms.push(g.exp(scaled)?);
    }
    let total = g.add_n(&terms)?;
    g.scale(total, 1.0 / v_bar.len() as f64)
}
