//! Benchmark harness: grouping balance and attention scaling, as CSV.
//!
//! Both reports are versioned by their header line. Timing columns are the
//! only nondeterministic fields; everything else is a pure function of the
//! inputs and seeds.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use crate::attention::AttentionVariant;
use crate::error::{LestError, Result};
use crate::grouping::{
    group_stats, kmeans_group, sfc_group, window_group, GroupAssignment, GroupStats, Shift,
};
use crate::io::{generate_synthetic_scene, SceneProfile};
use crate::linalg::Matrix;
use crate::model::{grouped_attention, with_workers, GroupExecution};
use crate::rng;
use crate::voxel::{assign_voxels, VoxelGridSpec};

pub const GROUPING_CSV_HEADER: &str =
    "seed,grouper,N,G,mean,var,max,seq_cost,padded_cost,padded_flops,seconds";
pub const SCALING_CSV_HEADER: &str = "variant,N,D,seconds,ratio";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Grouper {
    Sfc,
    Window,
    Kmeans,
}

impl Grouper {
    pub const ALL: [Grouper; 3] = [Grouper::Sfc, Grouper::Window, Grouper::Kmeans];

    pub fn name(self) -> &'static str {
        match self {
            Grouper::Sfc => "sfc",
            Grouper::Window => "window",
            Grouper::Kmeans => "kmeans",
        }
    }
}

impl fmt::Display for Grouper {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Grouper {
    type Err = LestError;

    fn from_str(s: &str) -> Result<Self> {
        Grouper::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| {
                LestError::contract(format!(
                    "unknown grouper {s:?} (expected sfc, window or kmeans)"
                ))
            })
    }
}

/// Parameters of the grouping-balance comparison.
///
/// The window grouping fixes the target group count `G_w`; the SFC capacity
/// becomes `⌈N / G_w⌉` and k-means gets `k = G_w`, so all groupers produce a
/// comparable number of groups. An explicit `capacity` overrides this.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupingBench {
    pub points: usize,
    pub profile: SceneProfile,
    pub grid: VoxelGridSpec,
    pub window: [u32; 3],
    pub capacity: Option<usize>,
    pub shift: Shift,
    pub groupers: Vec<Grouper>,
    pub seeds: Vec<u64>,
    pub kmeans_iters: usize,
    /// Attention width for the simulated cost and the timed run.
    pub attn_dim: usize,
    /// Time sequential grouped softmax attention on random features.
    pub time_attention: bool,
    pub threads: usize,
}

impl Default for GroupingBench {
    fn default() -> Self {
        Self {
            points: 100_000,
            profile: SceneProfile::RingLidar,
            grid: VoxelGridSpec::default(),
            window: [32, 32, 32],
            capacity: None,
            shift: [0, 0, 0],
            groupers: vec![Grouper::Sfc, Grouper::Window],
            seeds: (0..10).collect(),
            kmeans_iters: 20,
            attn_dim: 32,
            time_attention: false,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupingRow {
    pub seed: u64,
    pub grouper: Grouper,
    pub n_voxels: usize,
    pub stats: GroupStats,
    /// G · M² · D.
    pub padded_flops: u64,
    pub seconds: Option<f64>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn time_grouped(a: &GroupAssignment, d: usize, seed: u64) -> Result<f64> {
    let mut r = rng::stream(rng::sub_seed(seed, "bench/grouped_qkv"));
    let n = a.n_voxels();
    let (q, k, v) = (
        rng::normal_matrix(&mut r, n, d),
        rng::normal_matrix(&mut r, n, d),
        rng::normal_matrix(&mut r, n, d),
    );
    let start = Instant::now();
    grouped_attention(&q, &k, &v, a, GroupExecution::Sequential)?;
    Ok(start.elapsed().as_secs_f64())
}

/// Runs every grouper on every seeded scene.
pub fn bench_grouping(plan: &GroupingBench) -> Result<Vec<GroupingRow>> {
    plan.grid.validate()?;
    if plan.attn_dim == 0 {
        return Err(LestError::contract("attention width must be positive"));
    }
    with_workers(plan.threads, || {
        let mut rows = Vec::new();
        for &seed in &plan.seeds {
            let cloud = generate_synthetic_scene(seed, plan.points, plan.profile);
            let coords = assign_voxels(&cloud, &plan.grid)?.coords;
            let n = coords.len();
            let target_g = window_group(&coords, plan.window)?.n_groups().max(1);
            for &grouper in &plan.groupers {
                let a = match grouper {
                    Grouper::Sfc => {
                        let s = plan.capacity.unwrap_or_else(|| n.div_ceil(target_g).max(1));
                        sfc_group(&coords, s, plan.shift)?
                    }
                    Grouper::Window => window_group(&coords, plan.window)?,
                    Grouper::Kmeans => {
                        kmeans_group(&coords, target_g.min(n), seed, plan.kmeans_iters)?
                    }
                };
                let stats = group_stats(&a);
                let seconds = if plan.time_attention {
                    Some(time_grouped(&a, plan.attn_dim, seed)?)
                } else {
                    None
                };
                rows.push(GroupingRow {
                    seed,
                    grouper,
                    n_voxels: n,
                    padded_flops: stats.padded_cost * plan.attn_dim as u64,
                    stats,
                    seconds,
                });
            }
        }
        Ok(rows)
    })?
}

pub fn grouping_csv(rows: &[GroupingRow]) -> String {
    let mut out = format!("{GROUPING_CSV_HEADER}\n");
    for r in rows {
        let s = &r.stats;
        let secs = r.seconds.map(|t| format!("{t:.6e}")).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.seed,
            r.grouper,
            r.n_voxels,
            s.n_groups(),
            s.mean,
            s.variance,
            s.max_size,
            s.seq_cost,
            s.padded_cost,
            r.padded_flops,
            secs
        )
        .expect("writing to a String cannot fail");
    }
    out
}

/// A timed attention implementation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingKernel {
    Fast(AttentionVariant),
    /// Quadratic pairwise evaluation of the variant's similarity.
    Oracle(AttentionVariant),
}

impl ScalingKernel {
    pub fn name(self) -> String {
        match self {
            ScalingKernel::Fast(v) => v.name().to_string(),
            ScalingKernel::Oracle(v) => format!("{}_oracle", v.name()),
        }
    }

    fn run(self, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
        match self {
            ScalingKernel::Fast(var) => var.fast(q, k, v),
            ScalingKernel::Oracle(var) => var.oracle(q, k, v),
        }
    }
}

impl FromStr for ScalingKernel {
    type Err = LestError;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_suffix("_oracle") {
            Some(base) => Ok(ScalingKernel::Oracle(base.parse()?)),
            None => Ok(ScalingKernel::Fast(s.parse()?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingBench {
    /// Token counts, strictly ascending.
    pub ns: Vec<usize>,
    pub dim: usize,
    pub kernels: Vec<ScalingKernel>,
    pub seed: u64,
    pub reps: usize,
    pub threads: usize,
}

impl Default for ScalingBench {
    fn default() -> Self {
        Self {
            ns: (12..=16).map(|e| 1 << e).collect(),
            dim: 32,
            kernels: vec![ScalingKernel::Fast(AttentionVariant::Disco)],
            seed: 0,
            reps: 5,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub kernel: String,
    pub n: usize,
    pub dim: usize,
    /// Median wall time over the repetitions.
    pub seconds: f64,
    /// `seconds / seconds at the previous N`; `None` for the first N.
    pub ratio: Option<f64>,
}

/// Times each kernel at each N and reports the ratio between successive Ns.
pub fn bench_attention_scaling(plan: &ScalingBench) -> Result<Vec<ScalingRow>> {
    if plan.ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(LestError::contract("N values must be strictly ascending"));
    }
    if plan.ns.first() == Some(&0) || plan.dim == 0 || plan.reps == 0 {
        return Err(LestError::contract("N, D and repetitions must be positive"));
    }
    with_workers(plan.threads, || {
        let mut rows = Vec::new();
        for &kernel in &plan.kernels {
            let mut prev: Option<f64> = None;
            for &n in &plan.ns {
                let mut r = rng::stream(rng::sub_seed(plan.seed, &format!("bench/scaling/{n}")));
                let q = rng::normal_matrix(&mut r, n, plan.dim);
                let k = rng::normal_matrix(&mut r, n, plan.dim);
                let v = rng::normal_matrix(&mut r, n, plan.dim);
                let mut times = Vec::with_capacity(plan.reps);
                for _ in 0..plan.reps {
                    let start = Instant::now();
                    std::hint::black_box(kernel.run(&q, &k, &v)?);
                    times.push(start.elapsed().as_secs_f64());
                }
                let seconds = median(times);
                rows.push(ScalingRow {
                    kernel: kernel.name(),
                    n,
                    dim: plan.dim,
                    seconds,
                    ratio: prev.map(|p| seconds / p),
                });
                prev = Some(seconds);
            }
        }
        Ok(rows)
    })?
}

pub fn scaling_csv(rows: &[ScalingRow]) -> String {
    let mut out = format!("{SCALING_CSV_HEADER}\n");
    for r in rows {
        let ratio = r.ratio.map(|x| format!("{x:.4}")).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{:.6e},{}",
            r.kernel, r.n, r.dim, r.seconds, ratio
        )
        .expect("writing to a String cannot fail");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GroupingBench {
        GroupingBench {
            points: 4000,
            seeds: vec![1, 2],
            groupers: Grouper::ALL.to_vec(),
            ..GroupingBench::default()
        }
    }

    #[test]
    fn grouping_report_is_deterministic() {
        let plan = small();
        let a = grouping_csv(&bench_grouping(&plan).unwrap());
        let b = grouping_csv(&bench_grouping(&plan).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.lines().count(), 1 + 2 * 3);
        assert!(a.starts_with(GROUPING_CSV_HEADER));
    }

    #[test]
    fn groupers_get_comparable_group_counts() {
        let rows = bench_grouping(&small()).unwrap();
        for seed_rows in rows.chunks(3) {
            let g: Vec<usize> = seed_rows.iter().map(|r| r.stats.n_groups()).collect();
            let (sfc, window, kmeans) = (g[0], g[1], g[2]);
            assert!(sfc <= window && sfc * 2 >= window, "{g:?}");
            assert!(kmeans <= window, "{g:?}");
            assert_eq!(
                seed_rows[0].padded_flops,
                seed_rows[0].stats.padded_cost * 32
            );
        }
    }

    #[test]
    fn whole_grid_window_is_one_group() {
        let plan = GroupingBench {
            points: 3000,
            profile: SceneProfile::Uniform,
            window: [1024, 1024, 64],
            groupers: vec![Grouper::Window],
            seeds: vec![5],
            ..GroupingBench::default()
        };
        let row = &bench_grouping(&plan).unwrap()[0];
        assert_eq!(row.stats.n_groups(), 1);
        assert_eq!(row.stats.padded_cost, (row.n_voxels as u64).pow(2));
    }

    #[test]
    fn timing_column_is_filled_on_request() {
        let plan = GroupingBench {
            time_attention: true,
            groupers: vec![Grouper::Sfc],
            seeds: vec![0],
            points: 2000,
            ..GroupingBench::default()
        };
        assert!(bench_grouping(&plan).unwrap()[0].seconds.unwrap() >= 0.0);
    }

    #[test]
    fn scaling_schema_and_ratios() {
        let plan = ScalingBench {
            ns: vec![64],
            dim: 4,
            reps: 3,
            kernels: vec![ScalingKernel::Fast(AttentionVariant::Disco)],
            ..ScalingBench::default()
        };
        let csv = scaling_csv(&bench_attention_scaling(&plan).unwrap());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "variant,N,D,seconds,ratio");
        assert!(
            lines[1].starts_with("disco,64,4,") && lines[1].ends_with(','),
            "{}",
            lines[1]
        );

        let plan = ScalingBench {
            ns: vec![32, 64],
            ..plan
        };
        let rows = bench_attention_scaling(&plan).unwrap();
        assert!(rows[0].ratio.is_none());
        assert!((rows[1].ratio.unwrap() - rows[1].seconds / rows[0].seconds).abs() < 1e-12);
    }

    #[test]
    fn scaling_rejects_unsorted_n() {
        let plan = ScalingBench {
            ns: vec![64, 32],
            ..ScalingBench::default()
        };
        assert!(bench_attention_scaling(&plan).is_err());
    }

    #[test]
    fn kernel_names_round_trip() {
        for name in [
            "disco",
            "disco_oracle",
            "kernel",
            "cosformer_oracle",
            "softmax",
        ] {
            assert_eq!(name.parse::<ScalingKernel>().unwrap().name(), name);
        }
        assert!("nope".parse::<ScalingKernel>().is_err());
        assert_eq!("window".parse::<Grouper>().unwrap(), Grouper::Window);
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
