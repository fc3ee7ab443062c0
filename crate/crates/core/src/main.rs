use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use lest::attention::AttentionVariant;
use lest::bench::{
    bench_attention_scaling, bench_grouping, grouping_csv, scaling_csv, Grouper, GroupingBench,
    ScalingBench, ScalingKernel,
};
use lest::config::RunConfig;
use lest::grouping::{group_stats, kmeans_group, sfc_group, window_group, GroupStats, Shift};
use lest::io::{generate_synthetic_scene, read_labels, read_point_cloud, PointCloud, SceneProfile};
use lest::linalg::max_rel_error;
use lest::metrics::ConfusionMatrix;
use lest::model::{forward, with_workers, LestParams};
use lest::voxel::{assign_voxels, VoxelGridSpec};
use lest::{rng, LestError};

const EXIT_IO: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CONTRACT: u8 = 3;
const EXIT_MISMATCH: u8 = 4;

/// Sparse-voxel transformer inference, oracles and benchmarks.
#[derive(Parser)]
#[command(name = "lest", version, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantise a point file and list the occupied voxels as CSV.
    Voxelize(VoxelizeArgs),
    /// Group the voxels of a scene and print size statistics as CSV.
    GroupStats(GroupStatsArgs),
    /// Compare a linear attention kernel against its quadratic oracle.
    AttnCheck(AttnCheckArgs),
    /// Run the full network and write per-point logits.
    Forward(ForwardArgs),
    /// Score predicted labels against ground truth.
    Eval(EvalArgs),
    /// Grouping-balance and attention-scaling benchmarks.
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Args)]
struct SceneArgs {
    /// Point file (f32 LE x,y,z,intensity records). Omit to use a synthetic scene.
    #[arg(long)]
    points: Option<PathBuf>,
    /// Size of the synthetic scene.
    #[arg(long, default_value_t = 100_000)]
    scene_points: usize,
    #[arg(long, default_value = "ring_lidar")]
    profile: SceneProfile,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SceneArgs {
    fn load(&self) -> Result<PointCloud, LestError> {
        match &self.points {
            Some(p) => read_point_cloud(p),
            None => Ok(generate_synthetic_scene(
                self.seed,
                self.scene_points,
                self.profile,
            )),
        }
    }
}

#[derive(Args)]
struct VoxelizeArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// Config file; only the grid keys are used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GroupStatsArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "sfc")]
    grouper: Vec<Grouper>,
    /// SFC group capacity S.
    #[arg(long, default_value_t = 64)]
    capacity: usize,
    /// Window dimensions in voxels, `x,y,z`.
    #[arg(long, value_parser = parse_triple, default_value = "32,32,32")]
    window: Shift,
    /// k-means cluster count G.
    #[arg(long, default_value_t = 64)]
    groups: usize,
    /// SFC shifts, `x,y,z;x,y,z`. One row is printed per shift.
    #[arg(long, value_delimiter = ';', value_parser = parse_triple, default_value = "0,0,0")]
    shifts: Vec<Shift>,
    #[arg(long, default_value_t = 20)]
    kmeans_iters: usize,
}

#[derive(Args)]
struct AttnCheckArgs {
    #[arg(long)]
    variant: AttentionVariant,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
}

#[derive(Args)]
struct ForwardArgs {
    #[arg(long)]
    points: PathBuf,
    /// Ground-truth labels; adds a per-cloud mIoU of the argmax to the report.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    config: PathBuf,
    /// Logits, f32 LE, one row of K classes per point. Dropped points are NaN.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Leave wall-clock rows out of the report.
    #[arg(long)]
    no_timings: bool,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    ignore: Option<u16>,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// SFC vs window vs k-means group balance on synthetic scenes.
    Grouping {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100_000)]
        scene_points: usize,
        #[arg(long, default_value = "ring_lidar")]
        profile: SceneProfile,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,6,7,8,9")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "sfc,window,kmeans")]
        grouper: Vec<Grouper>,
        /// Also time grouped attention (adds a nondeterministic column).
        #[arg(long)]
        time: bool,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Wall time against N for linear kernels and quadratic oracles.
    Scaling {
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "4096,8192,16384,32768,65536"
        )]
        n: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        d: usize,
        /// Kernel names; append `_oracle` for the quadratic form.
        #[arg(long, value_delimiter = ',', default_value = "disco")]
        variant: Vec<ScalingKernel>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_triple(s: &str) -> Result<[u32; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [x, y, z] = parts.as_slice() else {
        return Err(format!("expected x,y,z, got {s:?}"));
    };
    let p = |v: &str| v.parse::<u32>().map_err(|e| format!("{v:?}: {e}"));
    Ok([p(x)?, p(y)?, p(z)?])
}

enum Failure {
    Error(LestError),
    Mismatch(String),
}

impl From<LestError> for Failure {
    fn from(e: LestError) -> Self {
        Failure::Error(e)
    }
}

fn exit_code(e: &LestError) -> u8 {
    match e {
        LestError::Io { .. } | LestError::MalformedFile { .. } | LestError::Invariant(_) => EXIT_IO,
        LestError::Config { .. } => EXIT_USAGE,
        LestError::Data { .. }
        | LestError::Contract(_)
        | LestError::ZeroDenominator { .. }
        | LestError::OraclePrecondition { .. }
        | LestError::UndefinedMetric(_) => EXIT_CONTRACT,
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), LestError> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| LestError::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|()| stdout.flush())
                .map_err(|e| LestError::Io {
                    path: "<stdout>".into(),
                    source: e,
                })
        }
    }
}

fn grid_from(config: Option<&Path>) -> Result<(VoxelGridSpec, Option<RunConfig>), LestError> {
    match config {
        Some(p) => {
            let c = RunConfig::load(p)?;
            Ok((c.model.grid, Some(c)))
        }
        None => Ok((VoxelGridSpec::default(), None)),
    }
}

fn voxelize(args: &VoxelizeArgs) -> Result<(), Failure> {
    let cloud = args.scene.load()?;
    let (grid, _) = grid_from(args.config.as_deref())?;
    let voxels = assign_voxels(&cloud, &grid)?;
    let mut csv = String::from("voxel,ix,iy,iz,points\n");
    for (v, (c, members)) in voxels.coords.iter().zip(&voxels.point_index).enumerate() {
        writeln!(csv, "{v},{},{},{},{}", c[0], c[1], c[2], members.len()).unwrap();
    }
    emit(args.out.as_deref(), &csv)?;
    eprintln!(
        "{} points, {} voxels, {} dropped",
        voxels.n_points(),
        voxels.len(),
        voxels.dropped
    );
    Ok(())
}

fn stats_row(csv: &mut String, grouper: Grouper, s: &GroupStats) {
    writeln!(
        csv,
        "{grouper},{},{},{},{},{},{}",
        s.n_groups(),
        s.mean,
        s.variance,
        s.max_size,
        s.seq_cost,
        s.padded_cost
    )
    .unwrap();
}

fn group_stats_cmd(args: &GroupStatsArgs) -> Result<(), Failure> {
    let cloud = args.scene.load()?;
    let (grid, _) = grid_from(args.config.as_deref())?;
    let coords = assign_voxels(&cloud, &grid)?.coords;
    let mut csv = String::from("grouper,G,mean,var,max,seq_cost,padded_cost\n");
    for &g in &args.grouper {
        match g {
            Grouper::Sfc => {
                for &shift in &args.shifts {
                    stats_row(
                        &mut csv,
                        g,
                        &group_stats(&sfc_group(&coords, args.capacity, shift)?),
                    );
                }
            }
            Grouper::Window => stats_row(
                &mut csv,
                g,
                &group_stats(&window_group(&coords, args.window)?),
            ),
            Grouper::Kmeans => stats_row(
                &mut csv,
                g,
                &group_stats(&kmeans_group(
                    &coords,
                    args.groups,
                    args.scene.seed,
                    args.kmeans_iters,
                )?),
            ),
        }
    }
    emit(None, &csv)?;
    Ok(())
}

fn attn_check(args: &AttnCheckArgs) -> Result<(), Failure> {
    if args.n == 0 || args.d == 0 {
        return Err(LestError::Contract("--n and --d must be positive".into()).into());
    }
    let mut r = rng::stream(rng::sub_seed(args.seed, "attn-check"));
    let q = rng::normal_matrix(&mut r, args.n, args.d);
    let k = rng::normal_matrix(&mut r, args.n, args.d);
    let v = rng::normal_matrix(&mut r, args.n, args.d);
    let t = Instant::now();
    let fast = args.variant.fast(&q, &k, &v)?;
    let fast_s = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let oracle = args.variant.oracle(&q, &k, &v)?;
    let oracle_s = t.elapsed().as_secs_f64();
    let err = max_rel_error(&fast, &oracle);
    let pass = err <= args.tol;
    emit(
        None,
        &format!(
            "variant,N,D,max_rel_error,fast_seconds,oracle_seconds,pass\n{},{},{},{err:e},{fast_s:.6e},{oracle_s:.6e},{pass}\n",
            args.variant.name(),
            args.n,
            args.d
        ),
    )?;
    if pass {
        Ok(())
    } else {
        Err(Failure::Mismatch(format!(
            "{} differs from its oracle by {err:e} > {:e}",
            args.variant.name(),
            args.tol
        )))
    }
}

fn forward_cmd(args: &ForwardArgs) -> Result<(), Failure> {
    let run = RunConfig::load(&args.config)?;
    let mut cloud = read_point_cloud(&args.points)?;
    if let Some(path) = &args.labels {
        cloud = cloud.with_labels(read_labels(path)?)?;
    }
    let params = LestParams::new(&run.model)?;
    let out = with_workers(args.workers, || forward(&cloud, &run.model, &params))??;
    fs::write(&args.out, out.logits.to_le_bytes()).map_err(|e| LestError::Io {
        path: args.out.clone(),
        source: e,
    })?;

    let Some(report_path) = &args.report else {
        return Ok(());
    };
    let rep = &out.report;
    let mut csv = String::from("key,value\n");
    let mut row = |k: &str, v: &dyn std::fmt::Display| writeln!(csv, "{k},{v}").unwrap();
    row("points", &rep.n_points);
    row("kept_points", &rep.kept_points);
    row("dropped_points", &rep.dropped_points);
    row("voxels", &rep.n_voxels);
    row("classes", &run.model.classes);
    for (g, s) in rep.grids.iter().enumerate() {
        row(
            &format!("grid{g}.shift"),
            &format!("{} {} {}", s.shift[0], s.shift[1], s.shift[2]),
        );
        row(&format!("grid{g}.groups"), &s.groups);
        row(&format!("grid{g}.max_group"), &s.max_size);
    }
    if let Some(labels) = cloud.labels() {
        let kept: Vec<usize> = (0..cloud.len()).filter(|&i| out.logits.kept[i]).collect();
        let truth: Vec<u16> = kept.iter().map(|&i| labels[i]).collect();
        let pred: Vec<u16> = kept
            .iter()
            .map(|&i| out.logits.argmax(i).expect("kept point has logits") as u16)
            .collect();
        let mut cm = ConfusionMatrix::new(run.model.classes, None);
        cm.accumulate(&truth, &pred)?;
        match cm.miou() {
            Ok(m) => row("miou", &m.miou),
            Err(LestError::UndefinedMetric(_)) => row("miou", &"undefined"),
            Err(e) => return Err(e.into()),
        }
    }
    for (k, v) in &run.defaults {
        row(&format!("default.{k}"), v);
    }
    if !args.no_timings {
        for (stage, d) in &rep.timings {
            row(
                &format!("seconds.{stage}"),
                &format!("{:.6e}", d.as_secs_f64()),
            );
        }
    }
    emit(Some(report_path), &csv)?;
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<(), Failure> {
    let truth = read_labels(&args.truth)?;
    let pred = read_labels(&args.pred)?;
    let mut cm = ConfusionMatrix::new(args.classes, args.ignore);
    cm.accumulate(&truth, &pred)?;
    let m = cm.miou()?;
    let mut csv = String::from("class,iou\n");
    for (c, iou) in m.per_class.iter().enumerate() {
        let v = iou.map(|x| x.to_string()).unwrap_or_default();
        writeln!(csv, "{c},{v}").unwrap();
    }
    writeln!(csv, "miou,{}", m.miou).unwrap();
    emit(None, &csv)?;
    Ok(())
}

fn bench(cmd: &BenchCommand) -> Result<(), Failure> {
    match cmd {
        BenchCommand::Grouping {
            config,
            scene_points,
            profile,
            seeds,
            grouper,
            time,
            workers,
            out,
        } => {
            let (grid, run) = grid_from(config.as_deref())?;
            let b = run.map(|r| r.bench).unwrap_or_default();
            let plan = GroupingBench {
                points: *scene_points,
                profile: *profile,
                grid,
                window: b.window,
                groupers: grouper.clone(),
                seeds: seeds.clone(),
                kmeans_iters: b.kmeans_iters,
                attn_dim: b.attn_dim,
                time_attention: *time,
                threads: *workers,
                ..GroupingBench::default()
            };
            emit(out.as_deref(), &grouping_csv(&bench_grouping(&plan)?))?;
        }
        BenchCommand::Scaling {
            n,
            d,
            variant,
            seed,
            reps,
            workers,
            out,
        } => {
            let plan = ScalingBench {
                ns: n.clone(),
                dim: *d,
                kernels: variant.clone(),
                seed: *seed,
                reps: *reps,
                threads: *workers,
            };
            emit(
                out.as_deref(),
                &scaling_csv(&bench_attention_scaling(&plan)?),
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Voxelize(a) => voxelize(a),
        Command::GroupStats(a) => group_stats_cmd(a),
        Command::AttnCheck(a) => attn_check(a),
        Command::Forward(a) => forward_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Bench(b) => bench(b),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Mismatch(msg)) => {
            eprintln!("lest: oracle mismatch: {msg}");
            ExitCode::from(EXIT_MISMATCH)
        }
        Err(Failure::Error(e)) => {
            eprintln!("lest: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
