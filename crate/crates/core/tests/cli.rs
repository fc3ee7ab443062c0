use std::path::Path;
use std::process::{Command, Output};

use lest::io::{generate_synthetic_scene, write_labels, write_point_cloud, SceneProfile};

fn lest(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lest"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.cfg");
    std::fs::write(
        &path,
        format!(
            "voxel_size.x = 1.0\nvoxel_size.y = 1.0\nvoxel_size.z = 1.0\n\
             grid.origin.x = -82\ngrid.origin.y = -82\ngrid.origin.z = -4\n\
             pointnet.channels = 16\nmodel.attn_dim = 8\nmodel.ffn_hidden = 16\n\
             model.group_size = 32\nmodel.classes = 4\n{extra}"
        ),
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn no_arguments_prints_usage() {
    let o = lest(&[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn attn_check_passes_and_fails_by_tolerance() {
    let o = lest(&[
        "attn-check",
        "--variant",
        "disco",
        "--n",
        "256",
        "--d",
        "8",
        "--seed",
        "1",
        "--tol",
        "1e-5",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(
        out.starts_with("variant,N,D,max_rel_error,fast_seconds,oracle_seconds,pass\ndisco,256,8,")
    );
    assert!(out.trim_end().ends_with("true"));

    let o = lest(&[
        "attn-check",
        "--variant",
        "kernel",
        "--n",
        "64",
        "--d",
        "4",
        "--tol",
        "0",
    ]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn unknown_variant_is_a_usage_error() {
    let o = lest(&[
        "attn-check",
        "--variant",
        "performer",
        "--n",
        "4",
        "--d",
        "4",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn forward_on_empty_file_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let points = dir.path().join("empty.bin");
    std::fs::write(&points, b"").unwrap();
    let out = dir.path().join("logits.bin");
    let o = lest(&[
        "forward",
        "--points",
        points.to_str().unwrap(),
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(std::fs::metadata(&out).unwrap().len(), 0);
}

#[test]
fn forward_is_byte_identical_across_runs_and_workers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 4\n");
    let cloud = generate_synthetic_scene(8, 5000, SceneProfile::RingLidar);
    let points = dir.path().join("scene.bin");
    write_point_cloud(&points, &cloud).unwrap();
    let labels = dir.path().join("scene.label");
    write_labels(
        &labels,
        &(0..5000).map(|i| (i % 4) as u16).collect::<Vec<_>>(),
    )
    .unwrap();

    let run = |tag: &str, workers: &str| {
        let out = dir.path().join(format!("{tag}.bin"));
        let rep = dir.path().join(format!("{tag}.csv"));
        let o = lest(&[
            "forward",
            "--points",
            points.to_str().unwrap(),
            "--labels",
            labels.to_str().unwrap(),
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap(),
            "--report",
            rep.to_str().unwrap(),
            "--no-timings",
            "--workers",
            workers,
        ]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
        (
            std::fs::read(out).unwrap(),
            std::fs::read_to_string(rep).unwrap(),
        )
    };
    let (a, ra) = run("a", "1");
    let (b, rb) = run("b", "1");
    let (c, rc) = run("c", "4");
    assert_eq!(a.len(), 5000 * 4 * 4);
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_eq!(ra, rb);
    assert_eq!(ra, rc);
    assert!(ra.contains("\nmiou,"));
    assert!(ra.contains("\ndefault.model.shifts,0,0,0; 3,3,3\n"));
    assert!(!ra.contains("seconds."));
}

#[test]
fn malformed_point_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let points = dir.path().join("bad.bin");
    std::fs::write(&points, [0u8; 15]).unwrap();
    let out = dir.path().join("o.bin");
    let o = lest(&[
        "forward",
        "--points",
        points.to_str().unwrap(),
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_config_is_a_usage_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "model.heads = 2\n");
    let o = lest(&["voxelize", "--scene-points", "10", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.heads"));
}

#[test]
fn eval_reports_hand_example() {
    let dir = tempfile::tempdir().unwrap();
    let truth = dir.path().join("t.label");
    let pred = dir.path().join("p.label");
    write_labels(&truth, &[0, 0, 0, 0, 1, 1, 255]).unwrap();
    write_labels(&pred, &[0, 0, 0, 1, 1, 1, 0]).unwrap();
    let o = lest(&[
        "eval",
        "--truth",
        truth.to_str().unwrap(),
        "--pred",
        pred.to_str().unwrap(),
        "--classes",
        "2",
        "--ignore",
        "255",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let miou: f64 = out
        .lines()
        .last()
        .unwrap()
        .strip_prefix("miou,")
        .unwrap()
        .parse()
        .unwrap();
    assert!((miou - 0.708_333_333_333_333_3).abs() < 1e-9);

    let o = lest(&[
        "eval",
        "--truth",
        truth.to_str().unwrap(),
        "--pred",
        pred.to_str().unwrap(),
        "--classes",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn group_stats_schema_and_degenerate_window() {
    let o = lest(&[
        "group-stats",
        "--grouper",
        "sfc,window",
        "--scene-points",
        "3000",
        "--profile",
        "uniform",
        "--capacity",
        "6",
        "--window",
        "1024,1024,64",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "grouper,G,mean,var,max,seq_cost,padded_cost");
    let window: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(window[0], "window");
    assert_eq!(window[1], "1");
    let n: u64 = window[4].parse().unwrap();
    assert_eq!(window[6].parse::<u64>().unwrap(), n * n);
    assert_eq!(
        out,
        stdout(&lest(&[
            "group-stats",
            "--grouper",
            "sfc,window",
            "--scene-points",
            "3000",
            "--profile",
            "uniform",
            "--capacity",
            "6",
            "--window",
            "1024,1024,64",
        ]))
    );
}

#[test]
fn voxelize_lists_voxels() {
    let o = lest(&["voxelize", "--scene-points", "500", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.starts_with("voxel,ix,iy,iz,points\n"));
    let total: usize = out
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, 500);
}

#[test]
fn bench_commands_emit_csv() {
    let o = lest(&[
        "bench",
        "scaling",
        "--n",
        "32,64",
        "--d",
        "4",
        "--variant",
        "disco,disco_oracle",
        "--reps",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 5);
    assert!(out.contains("\ndisco_oracle,64,4,"));

    let o = lest(&[
        "bench",
        "grouping",
        "--scene-points",
        "2000",
        "--seeds",
        "1,2",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().count(), 1 + 2 * 3);
}
