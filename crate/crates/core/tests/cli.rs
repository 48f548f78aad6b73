//! End-to-end checks of the `mactrack` binary on a small synthetic scene.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const MOVERS: &str = "\
start=20,30
velocity=3,0
radius=8
intensity=0.8

start=70,15
velocity=0,3
radius=7
intensity=0.7
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mactrack"))
}

fn mactrack(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mactrack(args);
    assert!(
        out.status.success(),
        "mactrack {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes the movers file and renders the scene into `<root>/synth`.
fn synth_scene(root: &Path) -> PathBuf {
    let movers = root.join("movers.txt");
    fs::write(&movers, MOVERS).unwrap();
    let out = root.join("synth");
    ok(&[
        "synth",
        "-o",
        s(&out),
        "--set",
        &format!("synth.movers={}", s(&movers)),
        "--set",
        "synth.width=96",
        "--set",
        "synth.height=64",
        "--set",
        "synth.slices=8",
        "--set",
        "synth.noise=0.05",
        "--set",
        "synth.seed=3",
    ]);
    out
}

fn read_key(path: &Path, key: &str) -> Option<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")).map(str::to_string))
}

fn accuracy(report: &Path) -> f64 {
    read_key(report, "mean_accuracy").unwrap().parse().unwrap()
}

fn frames_in(dir: &Path) -> Vec<Vec<u8>> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
        .collect();
    names.sort();
    names.iter().map(|p| fs::read(p).unwrap()).collect()
}

#[test]
fn synth_writes_stack_and_reference() {
    let tmp = tempfile::tempdir().unwrap();
    let run = synth_scene(tmp.path());
    assert_eq!(frames_in(&run.join("stack")).len(), 8);
    assert_eq!(frames_in(&run.join("gold/masks")).len(), 8);
    for f in ["gold/trajectories.csv", "gold/links.csv", "gold/movers.txt", "config.txt", "manifest.txt"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let manifest = run.join("manifest.txt");
    assert_eq!(read_key(&manifest, "command").as_deref(), Some("synth"));
    assert_eq!(read_key(&manifest, "version").as_deref(), Some(env!("CARGO_PKG_VERSION")));
}

#[test]
fn pipeline_tracks_and_evaluates() {
    let tmp = tempfile::tempdir().unwrap();
    let synth = synth_scene(tmp.path());
    let run = tmp.path().join("run");
    ok(&["pipeline", "-i", s(&synth.join("stack")), "-o", s(&run), "--gold", s(&synth.join("gold"))]);

    let tracks = fs::read_to_string(run.join("trajectories.csv")).unwrap();
    assert!(tracks.starts_with("traj_id,theta,x,y,estimated"));
    let ids: std::collections::BTreeSet<&str> =
        tracks.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids.len(), 2);

    let report = fs::read_to_string(run.join("report.txt")).unwrap();
    for stage in ["stage=filter", "stage=segment", "stage=centers", "n_partial="] {
        assert!(report.contains(stage), "report lacks {stage}");
    }
    assert_eq!(accuracy(&run.join("eval_report.txt")), 1.0);
    assert_eq!(frames_in(&run.join("masks")).len(), 8);
    assert_eq!(fs::read_dir(run.join("overlay")).unwrap().count(), 8);
    assert!(!run.join("cropped").exists());

    let manifest = run.join("manifest.txt");
    let hash = read_key(&manifest, "config_hash").unwrap();
    assert_eq!(hash.len(), 64);
    assert_eq!(read_key(&manifest, "input_digest").unwrap().len(), 64);

    // The recorded config reproduces the run.
    let again = tmp.path().join("again");
    ok(&["pipeline", "--config", s(&run.join("config.txt")), "-o", s(&again)]);
    assert_eq!(
        fs::read(run.join("trajectories.csv")).unwrap(),
        fs::read(again.join("trajectories.csv")).unwrap()
    );
    assert_eq!(read_key(&again.join("manifest.txt"), "config_hash").unwrap(), hash);
}

#[test]
fn stages_one_at_a_time_match_the_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let synth = synth_scene(tmp.path());
    let stack = synth.join("stack");
    let crop = ["--set", "crop.p_noise=0.002"];
    let d = |n: &str| tmp.path().join(n);

    let mut args = vec!["pipeline", "-i", s(&stack)];
    let whole = d("whole");
    args.extend(["-o", s(&whole)]);
    args.extend(crop);
    ok(&args);

    let mut args = vec!["crop", "-i", s(&stack)];
    let c = d("c");
    args.extend(["-o", s(&c)]);
    args.extend(crop);
    ok(&args);
    let f = d("f");
    ok(&["filter", "-i", s(&c.join("cropped")), "-o", s(&f)]);
    let g = d("g");
    ok(&["segment", "-i", s(&f.join("filtered")), "--edges", s(&c.join("cropped")), "-o", s(&g)]);
    let t = d("t");
    ok(&["track", "-i", s(&g.join("masks")), "-o", s(&t)]);
    let k = d("k");
    ok(&["centers", "-i", s(&g.join("masks")), "-o", s(&k)]);

    assert_eq!(frames_in(&c.join("cropped")), frames_in(&whole.join("cropped")));
    assert_eq!(frames_in(&f.join("filtered")), frames_in(&whole.join("filtered")));
    assert_eq!(frames_in(&g.join("masks")), frames_in(&whole.join("masks")));
    assert_eq!(
        fs::read(t.join("trajectories.csv")).unwrap(),
        fs::read(whole.join("trajectories.csv")).unwrap()
    );
    assert_eq!(
        fs::read(k.join("centers.csv")).unwrap(),
        fs::read(whole.join("centers.csv")).unwrap()
    );

    // Separate evaluation of the staged run.
    let e = d("e");
    ok(&["eval", "-i", s(&t), "--gold", s(&synth.join("gold")), "-o", s(&e)]);
    assert_eq!(accuracy(&e.join("eval_report.txt")), 1.0);
}

#[test]
fn segment_without_edges_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let synth = synth_scene(tmp.path());
    let out = mactrack(&["segment", "-i", s(&synth.join("stack")), "-o", s(&tmp.path().join("g"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error=config key=subsurf.edge_source "), "{err}");
}

#[test]
fn sweep_ranks_a_small_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let synth = synth_scene(tmp.path());
    let grid = tmp.path().join("grid.txt");
    fs::write(&grid, "otsu.delta=0.5,1000000\nsubsurf.max_steps=5\n").unwrap();
    let run = tmp.path().join("sweep");
    let case = format!("object:{}", s(&synth));
    ok(&["sweep", "--grid", s(&grid), "--case", &case, "-o", s(&run), "--set", "sweep.top_n=1"]);
    let report = run.join("sweep_report.txt");
    assert_eq!(read_key(&report, "combinations").as_deref(), Some("2"));
    assert_eq!(read_key(&report, "excluded").as_deref(), Some("1"));
    assert_eq!(read_key(&report, "mode.otsu.delta").as_deref(), Some("0.5"));
    assert!(run.join("ranking.csv").is_file() && run.join("frequency.csv").is_file());
    assert_eq!(fs::read_to_string(run.join("sweep_checkpoint.csv")).unwrap().lines().count(), 3);
}

#[test]
fn config_and_usage_errors() {
    let out = ok(&["--print-config"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l == "otsu.delta=0.5"));

    let out = mactrack(&["pipeline", "--set", "otsu.bogus=3", "-o", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error=config key=otsu.bogus message=\""), "{err}");

    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.txt");
    fs::write(&cfg, "subsurf.k=-4\n").unwrap();
    let out = mactrack(&["pipeline", "--config", s(&cfg), "-o", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("key=subsurf.k"));

    let out = mactrack(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error=usage "));
    assert_eq!(mactrack(&["--help"]).status.code(), Some(0));
    assert_eq!(mactrack(&["--threads", "0", "synth", "-o", "x"]).status.code(), Some(2));

    let out = mactrack(&["crop", "-i", s(&tmp.path().join("missing")), "-o", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error=input "));
}
