//! Lloyd's k-means on voxel centres with seeded k-means++ initialisation.

use rand::Rng;

use super::GroupAssignment;
use crate::error::{LestError, Result};
use crate::rng;

fn centre(c: &[u32; 3]) -> [f64; 3] {
    c.map(|v| f64::from(v) + 0.5)
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Nearest centroid, lowest index on ties.
fn nearest(p: &[f64; 3], centroids: &[[f64; 3]]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

fn plus_plus_init(points: &[[f64; 3]], k: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut r = rng::stream(rng::sub_seed(seed, "kmeans++"));
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[r.random_range(0..points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = r.random::<f64>() * total;
            let mut chosen = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    chosen = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            chosen.expect("positive total implies a positive entry")
        } else {
            // every point coincides with a centroid already
            r.random_range(0..points.len())
        };
        let c = points[pick];
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Clusters voxels into at most `k` spatial groups.
///
/// Clusters that end up empty are dropped, so the result may hold fewer than
/// `k` groups. Group ids follow first appearance in voxel order.
pub fn kmeans_group(
    coords: &[[u32; 3]],
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<GroupAssignment> {
    if k == 0 || k > coords.len() {
        return Err(LestError::contract(format!(
            "k-means needs 1 <= k <= {} voxels, got k = {k}",
            coords.len()
        )));
    }
    let points: Vec<[f64; 3]> = coords.iter().map(centre).collect();
    let mut centroids = plus_plus_init(&points, k, seed);
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    for _ in 0..max_iter {
        let mut sums = vec![[0.0f64; 3]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            for a in 0..3 {
                sums[l][a] += p[a];
            }
            counts[l] += 1;
        }
        for ((c, s), &n) in centroids.iter_mut().zip(&sums).zip(&counts) {
            if n > 0 {
                *c = s.map(|v| v / n as f64);
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    Ok(GroupAssignment::from_labels(&labels))
}
