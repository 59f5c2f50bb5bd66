//! Brute-force k-th nearest neighbor distances.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::samples::SampleMatrix;

/// Distance from every sample to its k-th nearest other sample.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborDistances {
    /// `r[i]`: Euclidean distance from sample `i` to its k-th nearest neighbor.
    pub r: Vec<f64>,
    /// Index of that neighbor. Ties go to the lower sample index.
    pub neighbor: Vec<usize>,
    pub k: usize,
}

pub(crate) fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k >= n {
        return Err(Error::InvalidK { k, n });
    }
    Ok(())
}

/// Symmetric matrix of squared distances; entry (i, j) and (j, i) come from
/// the same computation so they are bit-identical.
fn squared_distances(samples: &SampleMatrix) -> Vec<f64> {
    let n = samples.n();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        let xi = samples.row(i);
        for j in (i + 1)..n {
            let s: f64 = xi
                .iter()
                .zip(samples.row(j))
                .map(|(a, b)| {
                    let t = a - b;
                    t * t
                })
                .sum();
            dist[i * n + j] = s;
            dist[j * n + i] = s;
        }
    }
    dist
}

/// k-th nearest neighbor of each sample, excluding the sample itself.
///
/// O(n²d). Candidates are ordered by (distance, index), which makes the
/// selected neighbor unique and deterministic.
pub fn knn_distances(samples: &SampleMatrix, k: usize) -> Result<NeighborDistances> {
    let n = samples.n();
    check_k(k, n)?;
    let dist = squared_distances(samples);
    let mut r = Vec::with_capacity(n);
    let mut neighbor = Vec::with_capacity(n);
    let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        candidates.clear();
        candidates.extend((0..n).filter(|&j| j != i).map(|j| (dist[i * n + j], j)));
        let (_, &mut (d2, j), _) = candidates.select_nth_unstable_by(k - 1, |a, b| {
            a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
        });
        r.push(d2.sqrt());
        neighbor.push(j);
    }
    Ok(NeighborDistances { r, neighbor, k })
}
