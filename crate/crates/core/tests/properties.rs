use proptest::prelude::*;

use lest::attention::{
    cosformer_attention, cosformer_oracle, disco_attention, disco_features, disco_similarity,
    kernel_linear_attention, kernel_similarity, similarity_attention_oracle,
};
use lest::grouping::{random_group, sfc_group, stats_from_sizes, GroupAssignment};
use lest::io::{decode_points, encode_points, generate_synthetic_scene, SceneProfile};
use lest::linalg::max_rel_error;
use lest::metrics::ConfusionMatrix;
use lest::voxel::{assign_voxels, VoxelGridSpec};
use lest::Matrix;

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-scale..scale, rows * cols)
        .prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
}

fn qkv() -> impl Strategy<Value = (Matrix, Matrix, Matrix)> {
    (1usize..24, 1usize..8, 1usize..5)
        .prop_flat_map(|(n, d, dv)| (matrix(n, d, 4.0), matrix(n, d, 4.0), matrix(n, dv, 3.0)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn disco_similarity_is_positive_and_bounded(
        (q, k) in (1usize..40).prop_flat_map(|n| (prop::collection::vec(-50.0..50.0f64, n), prop::collection::vec(-50.0..50.0f64, n)))
    ) {
        let s = disco_similarity(&q, &k);
        prop_assert!(s > 0.0);
        prop_assert!(s <= q.len() as f64 + 1e-12);
    }

    #[test]
    fn disco_decomposition_identity(
        (q, k) in (1usize..32).prop_flat_map(|n| (matrix(1, n, 6.0), matrix(1, n, 6.0)))
    ) {
        let (qc, qs) = disco_features(&q);
        let (kc, ks) = disco_features(&k);
        let split: f64 = (0..q.cols())
            .map(|p| qc.get(0, p) * kc.get(0, p) + qs.get(0, p) * ks.get(0, p))
            .sum();
        prop_assert!((split - disco_similarity(q.row(0), k.row(0))).abs() <= 1e-12);
    }

    #[test]
    fn disco_matches_oracle((q, k, v) in qkv()) {
        let fast = disco_attention(&q, &k, &v).unwrap();
        let slow = similarity_attention_oracle(&q, &k, &v, disco_similarity).unwrap();
        prop_assert!(max_rel_error(&fast, &slow) <= 1e-9);
    }

    #[test]
    fn kernel_matches_oracle((q, k, v) in qkv()) {
        let fast = kernel_linear_attention(&q, &k, &v).unwrap();
        let slow = similarity_attention_oracle(&q, &k, &v, kernel_similarity).unwrap();
        prop_assert!(max_rel_error(&fast, &slow) <= 1e-9);
    }

    #[test]
    fn cosformer_matches_oracle((q, k, v) in qkv()) {
        let m = q.rows();
        let fast = cosformer_attention(&q, &k, &v, m).unwrap().output;
        let slow = cosformer_oracle(&q, &k, &v, m).unwrap();
        prop_assert!(max_rel_error(&fast, &slow) <= 1e-9);
    }

    #[test]
    fn disco_output_is_a_convex_combination((q, k, v) in qkv()) {
        let out = disco_attention(&q, &k, &v).unwrap();
        for c in 0..v.cols() {
            let col: Vec<f64> = (0..v.rows()).map(|j| v.get(j, c)).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..out.rows() {
                let x = out.get(i, c);
                prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn quadratic_cost_splits_into_mean_and_variance(sizes in prop::collection::vec(1usize..5000, 1..200)) {
        let s = stats_from_sizes(sizes);
        let g = s.n_groups() as f64;
        let lhs = s.seq_cost as f64 - g * s.mean * s.mean;
        let rhs = g * s.variance;
        prop_assert!(lhs >= -1e-9 * s.seq_cost as f64);
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (s.seq_cost as f64));
        prop_assert!(s.padded_cost >= s.seq_cost);
    }

    #[test]
    fn sfc_groups_are_full_except_last(n in 0usize..400, cap in 1usize..50, seed in 0u64..1000) {
        let coords: Vec<[u32; 3]> = (0..n as u32).map(|i| [(i * 7919 + seed as u32) % 97, i % 13, i / 13]).collect();
        let a = sfc_group(&coords, cap, [0, 0, 0]).unwrap();
        prop_assert_eq!(a.n_groups(), n.div_ceil(cap));
        if let Some((last, full)) = a.groups.split_last() {
            prop_assert!(full.iter().all(|g| g.len() == cap));
            prop_assert!(!last.is_empty() && last.len() <= cap);
        }
    }

    #[test]
    fn point_encoding_round_trips(raw in prop::collection::vec(-1e6f32..1e6, 0..64)) {
        let bytes: Vec<u8> = raw.iter().flat_map(|v| v.to_le_bytes()).collect();
        let whole = &bytes[..bytes.len() / 16 * 16];
        let points = decode_points(whole).unwrap();
        prop_assert_eq!(encode_points(&points), whole.to_vec());
    }

    #[test]
    fn miou_is_invariant_to_class_relabelling(
        pairs in prop::collection::vec((0u16..5, 0u16..5), 1..300),
        perm in Just((0u16..5).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let (truth, pred): (Vec<u16>, Vec<u16>) = pairs.iter().copied().unzip();
        let mut a = ConfusionMatrix::new(5, None);
        a.accumulate(&truth, &pred).unwrap();
        let relabel = |xs: &[u16]| xs.iter().map(|&x| perm[usize::from(x)]).collect::<Vec<_>>();
        let mut b = ConfusionMatrix::new(5, None);
        b.accumulate(&relabel(&truth), &relabel(&pred)).unwrap();
        let (ma, mb) = (a.miou().unwrap(), b.miou().unwrap());
        prop_assert!((ma.miou - mb.miou).abs() < 1e-12);
        for (c, &to) in perm.iter().enumerate() {
            prop_assert_eq!(ma.per_class[c], mb.per_class[usize::from(to)]);
        }
        prop_assert_eq!(a.total(), truth.len() as u64);
    }
}

/// Mean over groups of the summed per-axis extent of the group's bounding box.
fn mean_extent(coords: &[[u32; 3]], a: &GroupAssignment) -> f64 {
    let total: u64 = a
        .groups
        .iter()
        .map(|g| {
            (0..3)
                .map(|ax| {
                    let lo = g.iter().map(|&v| coords[v][ax]).min().unwrap();
                    let hi = g.iter().map(|&v| coords[v][ax]).max().unwrap();
                    u64::from(hi - lo)
                })
                .sum::<u64>()
        })
        .sum();
    total as f64 / a.n_groups() as f64
}

#[test]
fn curve_groups_are_spatially_compact() {
    for seed in 0..10 {
        let cloud = generate_synthetic_scene(seed, 20_000, SceneProfile::RingLidar);
        let coords = assign_voxels(&cloud, &VoxelGridSpec::default())
            .unwrap()
            .coords;
        let sfc = mean_extent(&coords, &sfc_group(&coords, 64, [0, 0, 0]).unwrap());
        let random = mean_extent(&coords, &random_group(coords.len(), 64, seed).unwrap());
        assert!(
            sfc * 10.0 < random,
            "seed {seed}: sfc {sfc} vs random {random}"
        );
    }
}
