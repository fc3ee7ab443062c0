//! Voxel grouping: space-filling-curve groups of fixed capacity, plus the
//! window, k-means and random baselines they are compared against.

mod kmeans;

use std::collections::HashMap;

use rand::seq::SliceRandom;

use crate::error::{LestError, Result};
use crate::morton::{morton3_unchecked, MORTON_AXIS_LIMIT};
use crate::rng;

pub use kmeans::kmeans_group;

/// Partition of voxels `0..n` into groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupAssignment {
    /// Visiting order of voxels; groups are contiguous runs of it.
    pub perm: Vec<usize>,
    /// Group id of every voxel.
    pub group_of: Vec<usize>,
    /// Members of each group, in `perm` order.
    pub groups: Vec<Vec<usize>>,
    /// Fixed capacity `S`, for curve-based groupings.
    pub capacity: Option<usize>,
}

impl GroupAssignment {
    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_voxels(&self) -> usize {
        self.group_of.len()
    }

    /// Builds an assignment from a per-voxel label, renumbering labels to
    /// `0..G` in first-appearance order. Members stay in ascending voxel
    /// order.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut remap: HashMap<usize, usize> = HashMap::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let group_of: Vec<usize> = labels
            .iter()
            .enumerate()
            .map(|(v, l)| {
                let g = *remap.entry(*l).or_insert_with(|| {
                    groups.push(Vec::new());
                    groups.len() - 1
                });
                groups[g].push(v);
                g
            })
            .collect();
        let perm = groups.iter().flatten().copied().collect();
        Self {
            perm,
            group_of,
            groups,
            capacity: None,
        }
    }

    /// Cuts a visiting order into consecutive runs of `capacity`.
    pub fn from_order(perm: Vec<usize>, capacity: usize) -> Self {
        let mut group_of = vec![0; perm.len()];
        let groups: Vec<Vec<usize>> = perm.chunks(capacity).map(<[usize]>::to_vec).collect();
        for (g, members) in groups.iter().enumerate() {
            for &v in members {
                group_of[v] = g;
            }
        }
        Self {
            perm,
            group_of,
            groups,
            capacity: Some(capacity),
        }
    }
}

/// Integer offset applied to voxel coordinates before encoding.
pub type Shift = [u32; 3];

/// Default pair of grids: unshifted, and shifted by `⌊∛S⌋` on every axis.
pub fn default_shifts(capacity: usize) -> Vec<Shift> {
    let mut s = 0u32;
    while ((s + 1) as usize).pow(3) <= capacity {
        s += 1;
    }
    vec![[0, 0, 0], [s, s, s]]
}

/// Sorts voxels along the Morton curve of `coords + shift` (ties by index)
/// and cuts the order into groups of `capacity`.
pub fn sfc_group(coords: &[[u32; 3]], capacity: usize, shift: Shift) -> Result<GroupAssignment> {
    if capacity == 0 {
        return Err(LestError::contract("group capacity must be at least 1"));
    }
    let mut keyed = Vec::with_capacity(coords.len());
    for (i, c) in coords.iter().enumerate() {
        let s: [u64; 3] = std::array::from_fn(|a| u64::from(c[a]) + u64::from(shift[a]));
        if s.iter().any(|&v| v >= u64::from(MORTON_AXIS_LIMIT)) {
            return Err(LestError::contract(format!(
                "voxel {i} at {c:?} shifted by {shift:?} leaves the 21-bit Morton range"
            )));
        }
        keyed.push((morton3_unchecked(s[0] as u32, s[1] as u32, s[2] as u32), i));
    }
    keyed.sort_unstable();
    let perm = keyed.into_iter().map(|(_, i)| i).collect();
    Ok(GroupAssignment::from_order(perm, capacity))
}

/// Groups voxels by fixed window `(ix div wx, iy div wy, iz div wz)`.
pub fn window_group(coords: &[[u32; 3]], window: [u32; 3]) -> Result<GroupAssignment> {
    if window.contains(&0) {
        return Err(LestError::contract("window dimensions must be at least 1"));
    }
    let keys: Vec<[u32; 3]> = coords
        .iter()
        .map(|c| [c[0] / window[0], c[1] / window[1], c[2] / window[2]])
        .collect();
    let mut ids: HashMap<[u32; 3], usize> = HashMap::new();
    let labels: Vec<usize> = keys
        .iter()
        .map(|k| {
            let next = ids.len();
            *ids.entry(*k).or_insert(next)
        })
        .collect();
    Ok(GroupAssignment::from_labels(&labels))
}

/// Groups a uniformly random permutation into runs of `capacity`; the
/// locality-free reference for curve grouping.
pub fn random_group(n: usize, capacity: usize, seed: u64) -> Result<GroupAssignment> {
    if capacity == 0 {
        return Err(LestError::contract("group capacity must be at least 1"));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(rng::sub_seed(seed, "random_group")));
    Ok(GroupAssignment::from_order(perm, capacity))
}

/// Size distribution of a grouping and the attention cost it implies.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub sizes: Vec<usize>,
    pub mean: f64,
    /// Population variance of the sizes.
    pub variance: f64,
    pub max_size: usize,
    /// Σ X_g², cost of running every group unpadded.
    pub seq_cost: u64,
    /// G · M², cost when every group is padded to the largest.
    pub padded_cost: u64,
}

impl GroupStats {
    pub fn n_groups(&self) -> usize {
        self.sizes.len()
    }
}

pub fn group_stats(a: &GroupAssignment) -> GroupStats {
    stats_from_sizes(a.groups.iter().map(Vec::len).collect())
}

pub fn stats_from_sizes(sizes: Vec<usize>) -> GroupStats {
    let g = sizes.len();
    let mean = if g == 0 {
        0.0
    } else {
        sizes.iter().sum::<usize>() as f64 / g as f64
    };
    let variance = if g == 0 {
        0.0
    } else {
        sizes
            .iter()
            .map(|&x| (x as f64 - mean).powi(2))
            .sum::<f64>()
            / g as f64
    };
    let max_size = sizes.iter().copied().max().unwrap_or(0);
    let seq_cost = sizes.iter().map(|&x| (x as u64).pow(2)).sum();
    GroupStats {
        mean,
        variance,
        max_size,
        seq_cost,
        padded_cost: g as u64 * (max_size as u64).pow(2),
        sizes,
    }
}
