//! Ranking and classification metrics.
//!
//! Ranking metrics take the 1-based rank of the true item among the
//! candidate pool; step-level values are micro-averaged by the callers.

use crate::error::{KmapError, Result};

/// Hit rate at cutoff `k`: 1 iff the truth ranked within the top k.
pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

/// NDCG at cutoff `k` for a single relevant item: `1 / log2(rank + 1)`
/// inside the cutoff, 0 outside.
pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank as f64) + 1.0).log2()
    } else {
        0.0
    }
}

/// Reciprocal rank of the true item.
pub fn mrr(rank: usize) -> f64 {
    1.0 / rank as f64
}

/// Mann-Whitney AUC: fraction of (positive, negative) pairs where the
/// positive scores higher, ties counted half.
pub fn auc(scored: &[(f64, bool)]) -> Result<f64> {
    let mut pos: Vec<f64> = Vec::new();
    let mut neg: Vec<f64> = Vec::new();
    for &(score, label) in scored {
        if label {
            pos.push(score);
        } else {
            neg.push(score);
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(KmapError::invalid(
            "AUC requires both positive and negative examples",
        ));
    }
    // rank-based computation; ties share averaged ranks
    let mut all: Vec<(f64, bool)> = scored.to_vec();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for item in &all[i..=j] {
            if item.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let np = pos.len() as f64;
    let nn = neg.len() as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(KmapError::invalid(
            "ARI requires two equal-length non-empty labelings",
        ));
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b.iter()) {
        table[x][y] += 1;
    }
    let choose2 = |n: u64| (n * n.saturating_sub(1)) as f64 / 2.0;
    let mut sum_ij = 0.0;
    let mut row_sums = vec![0u64; ka];
    let mut col_sums = vec![0u64; kb];
    for i in 0..ka {
        for j in 0..kb {
            sum_ij += choose2(table[i][j]);
            row_sums[i] += table[i][j];
            col_sums[j] += table[i][j];
        }
    }
    let sum_a: f64 = row_sums.iter().map(|&n| choose2(n)).sum();
    let sum_b: f64 = col_sums.iter().map(|&n| choose2(n)).sum();
    let total = choose2(a.len() as u64);
    let expected = sum_a * sum_b / total;
    let max_index = (sum_a + sum_b) / 2.0;
    if (max_index - expected).abs() < 1e-15 {
        // degenerate: both labelings are constant
        return Ok(1.0);
    }
    Ok((sum_ij - expected) / (max_index - expected))
}

/// Mean silhouette coefficient: for each point, `(b - a) / max(a, b)` with
/// `a` the mean intra-cluster distance and `b` the smallest mean distance to
/// another cluster. Singleton clusters contribute 0.
pub fn silhouette_coefficient(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(KmapError::invalid("silhouette needs labeled points"));
    }
    let k = labels.iter().max().unwrap() + 1;
    if k < 2 {
        return Err(KmapError::invalid("silhouette needs at least 2 clusters"));
    }
    let dist = |x: &[f64], y: &[f64]| -> f64 {
        x.iter()
            .zip(y)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sums[labels[j]] += dist(p, q);
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue; // singleton
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            total += (b - a) / a.max(b);
        }
    }
    Ok(total / points.len() as f64)
}
