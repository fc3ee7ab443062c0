//! The grouped (local) and DISCO (global) feature branches.

use rayon::prelude::*;

use super::layers::TransformerLayerParams;
use crate::attention::{
    disco_attention, disco_similarity, similarity_attention_oracle, softmax_attention,
    softmax_attention_masked,
};
use crate::error::{LestError, Result};
use crate::grouping::{sfc_group, GroupAssignment, Shift};
use crate::linalg::Matrix;

/// How group-restricted attention is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GroupExecution {
    /// Each group attends over exactly its own members.
    #[default]
    Sequential,
    /// Every group is padded to the capacity and padding keys are masked.
    Padded,
}

/// Softmax attention restricted to the blocks of `groups`.
///
/// Within a group, tokens are taken in the assignment's visiting order.
pub fn grouped_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    groups: &GroupAssignment,
    exec: GroupExecution,
) -> Result<Matrix> {
    if groups.n_voxels() != q.rows() {
        return Err(LestError::contract(format!(
            "grouping covers {} voxels, attention has {} tokens",
            groups.n_voxels(),
            q.rows()
        )));
    }
    let pad_to = groups
        .capacity
        .unwrap_or(0)
        .max(groups.groups.iter().map(Vec::len).max().unwrap_or(0));
    let blocks: Vec<Matrix> = groups
        .groups
        .par_iter()
        .map(|members| {
            let (gq, gk, gv) = (
                q.gather_rows(members),
                k.gather_rows(members),
                v.gather_rows(members),
            );
            match exec {
                GroupExecution::Sequential => softmax_attention(&gq, &gk, &gv),
                GroupExecution::Padded => {
                    let pad = |m: &Matrix| {
                        let mut p = Matrix::zeros(pad_to, m.cols());
                        p.as_mut_slice()[..m.as_slice().len()].copy_from_slice(m.as_slice());
                        p
                    };
                    let mask: Vec<bool> = (0..pad_to).map(|t| t < members.len()).collect();
                    let out =
                        softmax_attention_masked(&pad(&gq), &pad(&gk), &pad(&gv), Some(&mask))?;
                    Matrix::from_vec(
                        members.len(),
                        out.cols(),
                        out.as_slice()[..members.len() * out.cols()].to_vec(),
                    )
                }
            }
        })
        .collect::<Result<_>>()?;
    let mut out = Matrix::zeros(q.rows(), v.cols());
    for (members, block) in groups.groups.iter().zip(&blocks) {
        out.scatter_rows(members, block);
    }
    Ok(out)
}

/// Runs `layers[g]` on grid `g`: regroup along the Morton curve of the
/// shifted coordinates, then apply each layer with attention restricted to
/// the groups. Returns the features (original voxel order) and the grouping
/// used on every grid.
pub fn grouped_transformer_branch(
    coords: &[[u32; 3]],
    features: &Matrix,
    capacity: usize,
    shifts: &[Shift],
    layers: &[Vec<TransformerLayerParams>],
    exec: GroupExecution,
) -> Result<(Matrix, Vec<GroupAssignment>)> {
    if layers.len() < shifts.len() {
        return Err(LestError::contract(format!(
            "{} grids but layer weights for only {}",
            shifts.len(),
            layers.len()
        )));
    }
    if coords.len() != features.rows() {
        return Err(LestError::contract(
            "voxel coordinates and features disagree in length",
        ));
    }
    let mut x = features.clone();
    let mut used = Vec::with_capacity(shifts.len());
    for (shift, grid_layers) in shifts.iter().zip(layers) {
        let groups = sfc_group(coords, capacity, *shift)?;
        for layer in grid_layers {
            x = layer.forward_with(&x, |q, k, v| grouped_attention(q, k, v, &groups, exec))?;
        }
        used.push(groups);
    }
    Ok((x, used))
}

/// Global attention kernel of the DISCO branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GlobalAttention {
    #[default]
    Disco,
    /// Quadratic pairwise evaluation of the same similarity.
    DiscoOracle,
}

/// Encoder layers whose attention spans every voxel.
pub fn disco_branch(
    features: &Matrix,
    layers: &[TransformerLayerParams],
    kernel: GlobalAttention,
) -> Result<Matrix> {
    let mut x = features.clone();
    for layer in layers {
        x = match kernel {
            GlobalAttention::Disco => layer.forward_with(&x, disco_attention)?,
            GlobalAttention::DiscoOracle => layer.forward_with(&x, |q, k, v| {
                similarity_attention_oracle(q, k, v, disco_similarity)
            })?,
        };
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_rel_error;
    use crate::morton::morton3;
    use crate::rng;
    use std::collections::HashSet;

    const C: usize = 8;

    fn scene(n: usize, extent: u32, seed: u64) -> (Vec<[u32; 3]>, Matrix) {
        use rand::Rng;
        let mut r = rng::stream(seed);
        let mut seen = HashSet::new();
        let mut coords = Vec::new();
        while coords.len() < n {
            let c = [
                r.random_range(0..extent),
                r.random_range(0..extent),
                r.random_range(0..4),
            ];
            if seen.insert(c) {
                coords.push(c);
            }
        }
        let feats = rng::normal_matrix(&mut r, n, C);
        (coords, feats)
    }

    fn grid_layers(n_grids: usize, seed: u64) -> Vec<Vec<TransformerLayerParams>> {
        (0..n_grids)
            .map(|g| vec![TransformerLayerParams::new(seed + g as u64, C, 6, 16)])
            .collect()
    }

    #[test]
    fn one_big_group_equals_plain_encoder() {
        let (mut coords, feats) = scene(40, 16, 1);
        coords.sort_by_key(|c| morton3(c[0], c[1], c[2]).unwrap());
        let layers = grid_layers(1, 5);
        let (grouped, _) = grouped_transformer_branch(
            &coords,
            &feats,
            64,
            &[[0, 0, 0]],
            &layers,
            GroupExecution::Sequential,
        )
        .unwrap();
        let plain = layers[0][0]
            .forward_with(&feats, softmax_attention)
            .unwrap();
        assert_eq!(grouped, plain);
    }

    #[test]
    fn one_big_group_matches_plain_encoder_in_any_order() {
        let (coords, feats) = scene(40, 16, 2);
        let layers = grid_layers(1, 5);
        let (grouped, _) = grouped_transformer_branch(
            &coords,
            &feats,
            40,
            &[[0, 0, 0]],
            &layers,
            GroupExecution::Sequential,
        )
        .unwrap();
        let plain = layers[0][0]
            .forward_with(&feats, softmax_attention)
            .unwrap();
        assert!(max_rel_error(&grouped, &plain) < 1e-12);
    }

    #[test]
    fn zero_weights_pass_features_through() {
        let (coords, feats) = scene(30, 16, 3);
        let layers = vec![vec![TransformerLayerParams::zeros(C, 6, 16)]; 2];
        let (out, _) = grouped_transformer_branch(
            &coords,
            &feats,
            8,
            &[[0, 0, 0], [2, 2, 2]],
            &layers,
            GroupExecution::Sequential,
        )
        .unwrap();
        assert_eq!(out, feats);
        let disco = disco_branch(
            &feats,
            &[TransformerLayerParams::zeros(C, 6, 16)],
            GlobalAttention::Disco,
        )
        .unwrap();
        assert_eq!(disco, feats);
    }

    #[test]
    fn padded_and_sequential_agree() {
        let (coords, feats) = scene(101, 16, 4);
        let layers = grid_layers(2, 9);
        let shifts = [[0, 0, 0], [2, 2, 2]];
        let (a, _) = grouped_transformer_branch(
            &coords,
            &feats,
            16,
            &shifts,
            &layers,
            GroupExecution::Sequential,
        )
        .unwrap();
        let (b, _) = grouped_transformer_branch(
            &coords,
            &feats,
            16,
            &shifts,
            &layers,
            GroupExecution::Padded,
        )
        .unwrap();
        assert!(max_rel_error(&b, &a) < 1e-6);
    }

    /// Voxels whose features can influence any voxel of `start` after
    /// passing through every grid in turn.
    fn reach(start: usize, grids: &[GroupAssignment]) -> HashSet<usize> {
        let mut set: HashSet<usize> = [start].into();
        for g in grids {
            let touched: HashSet<usize> = set.iter().map(|&v| g.group_of[v]).collect();
            set = touched
                .iter()
                .flat_map(|&gid| g.groups[gid].iter().copied())
                .collect();
        }
        set
    }

    #[test]
    fn rows_outside_the_receptive_field_are_untouched() {
        let (coords, feats) = scene(300, 32, 6);
        let layers = grid_layers(2, 3);
        let shifts = [[0, 0, 0], [3, 3, 3]];
        let (base, grids) = grouped_transformer_branch(
            &coords,
            &feats,
            12,
            &shifts,
            &layers,
            GroupExecution::Sequential,
        )
        .unwrap();
        let b = 17;
        let influenced = reach(b, &grids);
        let mut bumped = feats.clone();
        bumped.row_mut(b).iter_mut().for_each(|x| *x += 1.0);
        let (out, _) = grouped_transformer_branch(
            &coords,
            &bumped,
            12,
            &shifts,
            &layers,
            GroupExecution::Sequential,
        )
        .unwrap();
        let outside: Vec<usize> = (0..300).filter(|v| !influenced.contains(v)).collect();
        assert!(!outside.is_empty());
        for a in outside {
            assert_eq!(out.row(a), base.row(a), "row {a}");
        }
        assert_ne!(out.row(b), base.row(b));
    }

    #[test]
    fn sfc_branch_ignores_input_voxel_order() {
        let (coords, feats) = scene(120, 16, 8);
        let layers = grid_layers(2, 4);
        let shifts = [[0, 0, 0], [2, 2, 2]];
        let (base, _) = grouped_transformer_branch(
            &coords,
            &feats,
            10,
            &shifts,
            &layers,
            GroupExecution::Sequential,
        )
        .unwrap();
        let order: Vec<usize> = (0..120).rev().collect();
        let pc: Vec<[u32; 3]> = order.iter().map(|&o| coords[o]).collect();
        let (out, _) = grouped_transformer_branch(
            &pc,
            &feats.gather_rows(&order),
            10,
            &shifts,
            &layers,
            GroupExecution::Sequential,
        )
        .unwrap();
        assert_eq!(out, base.gather_rows(&order));
    }

    #[test]
    fn disco_branch_matches_oracle_layer() {
        let (_, feats) = scene(200, 16, 10);
        let layer = [TransformerLayerParams::new(12, C, 6, 16)];
        let fast = disco_branch(&feats, &layer, GlobalAttention::Disco).unwrap();
        let slow = disco_branch(&feats, &layer, GlobalAttention::DiscoOracle).unwrap();
        assert!(max_rel_error(&fast, &slow) < 1e-5);
    }

    #[test]
    fn disco_single_token_is_residual_mlp() {
        let (_, feats) = scene(1, 16, 11);
        let layer = TransformerLayerParams::new(13, C, 6, 16);
        let out =
            disco_branch(&feats, std::slice::from_ref(&layer), GlobalAttention::Disco).unwrap();
        let expected = layer.forward_with(&feats, |_, _, v| Ok(v.clone())).unwrap();
        assert_eq!(out, expected);
    }

    #[test]
    fn disco_branch_sees_every_voxel() {
        let (_, feats) = scene(64, 16, 14);
        let layer = [TransformerLayerParams::new(15, C, 6, 16)];
        let base = disco_branch(&feats, &layer, GlobalAttention::Disco).unwrap();
        let mut bumped = feats.clone();
        // a uniform shift across channels would vanish under layer norm
        bumped.row_mut(5)[0] += 0.5;
        let out = disco_branch(&bumped, &layer, GlobalAttention::Disco).unwrap();
        for i in 0..64 {
            assert_ne!(out.row(i), base.row(i), "row {i}");
        }
    }

    #[test]
    fn disco_branch_is_order_equivariant() {
        let (_, feats) = scene(80, 16, 16);
        let layer = [TransformerLayerParams::new(17, C, 6, 16)];
        let base = disco_branch(&feats, &layer, GlobalAttention::Disco).unwrap();
        let order: Vec<usize> = (0..80).map(|i| (i * 37) % 80).collect();
        let out = disco_branch(&feats.gather_rows(&order), &layer, GlobalAttention::Disco).unwrap();
        assert!(max_rel_error(&out, &base.gather_rows(&order)) < 1e-10);
    }

    #[test]
    fn mismatched_grouping_is_rejected() {
        let q = Matrix::zeros(4, 2);
        let g = GroupAssignment::from_order(vec![0, 1, 2], 2);
        assert!(grouped_attention(&q, &q, &q, &g, GroupExecution::Sequential).is_err());
    }
}
