//! Point → voxel quantisation, the mini-PointNet voxel encoder, and the
//! voxel → point scatter of predictions.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{LestError, Result};
use crate::io::PointCloud;
use crate::linalg::{relu, vec_mat_into, Matrix};
use crate::morton::MORTON_AXIS_LIMIT;
use crate::rng;

/// Width of the per-point input to the encoder: offset from the voxel
/// centre (3) plus intensity.
pub const POINT_FEATURES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelGridSpec {
    /// Edge lengths in meters, all > 0.
    pub voxel_size: [f64; 3],
    pub origin: [f64; 3],
    /// Largest admissible index per axis (inclusive), < 2^21.
    pub max_coord: [u32; 3],
}

impl Default for VoxelGridSpec {
    fn default() -> Self {
        Self {
            voxel_size: [0.2, 0.2, 0.2],
            origin: [-81.92, -81.92, -4.0],
            max_coord: [1023, 1023, 63],
        }
    }
}

impl VoxelGridSpec {
    pub fn validate(&self) -> Result<()> {
        for (axis, &s) in ["x", "y", "z"].iter().zip(&self.voxel_size) {
            if !(s.is_finite() && s > 0.0) {
                return Err(LestError::contract(format!(
                    "voxel_size.{axis} must be positive, got {s}"
                )));
            }
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(LestError::contract("grid origin must be finite"));
        }
        for (axis, &m) in ["x", "y", "z"].iter().zip(&self.max_coord) {
            if m >= MORTON_AXIS_LIMIT {
                return Err(LestError::contract(format!(
                    "grid.max_coord.{axis} = {m} must be below 2^21"
                )));
            }
        }
        Ok(())
    }

    /// Integer cell of a position, or `None` when it falls outside
    /// `[0, max_coord]` on any axis.
    pub fn cell_of(&self, xyz: [f64; 3]) -> Option<[u32; 3]> {
        let mut c = [0u32; 3];
        for a in 0..3 {
            let q = ((xyz[a] - self.origin[a]) / self.voxel_size[a]).floor();
            if !(q >= 0.0 && q <= f64::from(self.max_coord[a])) {
                return None;
            }
            c[a] = q as u32;
        }
        Some(c)
    }

    pub fn center_of(&self, cell: [u32; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + (f64::from(cell[a]) + 0.5) * self.voxel_size[a])
    }
}

/// Sparse voxels of one sweep.
///
/// Row `v` of `features` belongs to `coords[v]`; `point_index[v]` lists the
/// member points in ascending point order.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelSet {
    pub grid: VoxelGridSpec,
    pub coords: Vec<[u32; 3]>,
    pub features: Matrix,
    pub point_index: Vec<Vec<usize>>,
    /// Containing voxel of every input point; `None` for dropped points.
    pub point_voxel: Vec<Option<usize>>,
    pub dropped: usize,
}

impl VoxelSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn n_points(&self) -> usize {
        self.point_voxel.len()
    }

    pub fn kept_points(&self) -> usize {
        self.n_points() - self.dropped
    }

    /// Builds a voxel set from explicit coordinates and features, with no
    /// point membership. Handy for feeding the grouping and attention stages
    /// directly.
    pub fn from_coords(coords: Vec<[u32; 3]>, features: Matrix) -> Result<Self> {
        if features.rows() != coords.len() {
            return Err(LestError::contract(format!(
                "{} feature rows for {} voxels",
                features.rows(),
                coords.len()
            )));
        }
        let mut seen = std::collections::HashSet::with_capacity(coords.len());
        if let Some(dup) = coords.iter().find(|c| !seen.insert(**c)) {
            return Err(LestError::contract(format!("duplicate voxel {dup:?}")));
        }
        Ok(Self {
            grid: VoxelGridSpec::default(),
            point_index: vec![Vec::new(); coords.len()],
            coords,
            features,
            point_voxel: Vec::new(),
            dropped: 0,
        })
    }

    /// Reorders voxels so that new voxel `k` is old voxel `order[k]`,
    /// keeping point bookkeeping consistent.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut inverse = vec![0usize; order.len()];
        for (new, &old) in order.iter().enumerate() {
            inverse[old] = new;
        }
        Self {
            grid: self.grid,
            coords: order.iter().map(|&o| self.coords[o]).collect(),
            features: self.features.gather_rows(order),
            point_index: order.iter().map(|&o| self.point_index[o].clone()).collect(),
            point_voxel: self
                .point_voxel
                .iter()
                .map(|v| v.map(|o| inverse[o]))
                .collect(),
            dropped: self.dropped,
        }
    }
}

/// Quantises points into voxels; voxel order is first appearance in the cloud.
pub fn assign_voxels(cloud: &PointCloud, grid: &VoxelGridSpec) -> Result<VoxelSet> {
    grid.validate()?;
    let mut lookup: HashMap<[u32; 3], usize> = HashMap::new();
    let mut coords = Vec::new();
    let mut point_index: Vec<Vec<usize>> = Vec::new();
    let mut point_voxel = Vec::with_capacity(cloud.len());
    let mut dropped = 0;
    for (i, p) in cloud.points().iter().enumerate() {
        let xyz = p.xyz().map(f64::from);
        match grid.cell_of(xyz) {
            Some(cell) => {
                let v = *lookup.entry(cell).or_insert_with(|| {
                    coords.push(cell);
                    point_index.push(Vec::new());
                    coords.len() - 1
                });
                point_index[v].push(i);
                point_voxel.push(Some(v));
            }
            None => {
                dropped += 1;
                point_voxel.push(None);
            }
        }
    }
    Ok(VoxelSet {
        grid: *grid,
        features: Matrix::zeros(coords.len(), 0),
        coords,
        point_index,
        point_voxel,
        dropped,
    })
}

/// Weights of the two-layer per-point MLP shared by all voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniPointNetParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub seed: u64,
}

impl MiniPointNetParams {
    pub fn new(seed: u64, hidden: usize, channels: usize) -> Self {
        let mut r = rng::stream(seed);
        let w1 = rng::uniform_weights(&mut r, POINT_FEATURES, hidden);
        let b1 = rng::uniform_bias(&mut r, POINT_FEATURES, hidden);
        let w2 = rng::uniform_weights(&mut r, hidden, channels);
        let b2 = rng::uniform_bias(&mut r, hidden, channels);
        Self {
            w1,
            b1,
            w2,
            b2,
            seed,
        }
    }

    pub fn zeros(hidden: usize, channels: usize) -> Self {
        Self {
            w1: Matrix::zeros(POINT_FEATURES, hidden),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(hidden, channels),
            b2: vec![0.0; channels],
            seed: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.w2.cols()
    }

    fn validate(&self) -> Result<()> {
        let h = self.w1.cols();
        if self.w1.rows() != POINT_FEATURES
            || self.b1.len() != h
            || self.w2.rows() != h
            || self.b2.len() != self.w2.cols()
        {
            return Err(LestError::contract("inconsistent mini-PointNet shapes"));
        }
        Ok(())
    }

    /// MLP output for a single per-point input vector.
    pub fn point_embedding(&self, input: &[f64; POINT_FEATURES]) -> Vec<f64> {
        let mut hidden = vec![0.0; self.w1.cols()];
        vec_mat_into(input, &self.w1, &mut hidden);
        for (h, b) in hidden.iter_mut().zip(&self.b1) {
            *h = relu(*h + b);
        }
        let mut out = vec![0.0; self.w2.cols()];
        vec_mat_into(&hidden, &self.w2, &mut out);
        for (o, b) in out.iter_mut().zip(&self.b2) {
            *o = relu(*o + b);
        }
        out
    }
}

/// Fills `features` with the coordinatewise max of member point embeddings.
///
/// Max is order-free, so the result is bit-identical for any ordering of
/// points within a voxel and for any worker count.
pub fn featurize_voxels(
    voxels: &VoxelSet,
    cloud: &PointCloud,
    params: &MiniPointNetParams,
) -> Result<VoxelSet> {
    params.validate()?;
    if voxels.n_points() != cloud.len() {
        return Err(LestError::contract(format!(
            "voxel set built from {} points, cloud has {}",
            voxels.n_points(),
            cloud.len()
        )));
    }
    let channels = params.channels();
    let mut features = Matrix::zeros(voxels.len(), channels);
    if channels > 0 {
        features
            .as_mut_slice()
            .par_chunks_mut(channels)
            .zip(voxels.point_index.par_iter().zip(&voxels.coords))
            .try_for_each(|(row, (members, &cell))| {
                if members.is_empty() {
                    return Err(LestError::Invariant(format!(
                        "voxel {cell:?} has no points"
                    )));
                }
                let centre = voxels.grid.center_of(cell);
                row.fill(f64::NEG_INFINITY);
                for &i in members {
                    let p = cloud.points()[i];
                    let input = [
                        f64::from(p.x) - centre[0],
                        f64::from(p.y) - centre[1],
                        f64::from(p.z) - centre[2],
                        f64::from(p.intensity),
                    ];
                    for (r, e) in row.iter_mut().zip(params.point_embedding(&input)) {
                        *r = r.max(e);
                    }
                }
                Ok(())
            })?;
    }
    Ok(VoxelSet {
        features,
        ..voxels.clone()
    })
}

/// Per-point class scores. Rows of dropped points hold NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct PointLogits {
    pub logits: Matrix,
    pub kept: Vec<bool>,
}

impl PointLogits {
    pub fn n_points(&self) -> usize {
        self.kept.len()
    }

    pub fn row(&self, i: usize) -> Option<&[f64]> {
        self.kept[i].then(|| self.logits.row(i))
    }

    /// Highest-scoring class of point `i` (first index wins ties).
    pub fn argmax(&self, i: usize) -> Option<usize> {
        self.row(i).and_then(|r| {
            r.iter()
                .enumerate()
                .fold(None, |best: Option<(usize, f64)>, (k, &v)| match best {
                    Some((_, b)) if b >= v => best,
                    _ => Some((k, v)),
                })
                .map(|(k, _)| k)
        })
    }

    /// Little-endian `f32` rows, NaN rows for dropped points.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.logits
            .as_slice()
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect()
    }
}

/// Broadcasts each voxel's logits row to its member points.
pub fn devoxelize(voxels: &VoxelSet, per_voxel_logits: &Matrix) -> Result<PointLogits> {
    if per_voxel_logits.rows() != voxels.len() {
        return Err(LestError::contract(format!(
            "{} logit rows for {} voxels",
            per_voxel_logits.rows(),
            voxels.len()
        )));
    }
    let k = per_voxel_logits.cols();
    let mut logits = Matrix::filled(voxels.n_points(), k, f64::NAN);
    let mut kept = vec![false; voxels.n_points()];
    for (i, v) in voxels.point_voxel.iter().enumerate() {
        if let Some(v) = *v {
            logits.row_mut(i).copy_from_slice(per_voxel_logits.row(v));
            kept[i] = true;
        }
    }
    Ok(PointLogits { logits, kept })
}
