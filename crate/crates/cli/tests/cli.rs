use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vcsfm::io::{parse_poses, parse_report, parse_vcs};

fn vcsfm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vcsfm"))
        .args(args)
        .current_dir(dir)
        .env_remove("VCSFM_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p).unwrap()
}

/// Small noiseless bundle in `dir/bundle`.
fn bundle(dir: &Path, angles: &str) -> PathBuf {
    std::fs::write(dir.join("scene.cfg"), format!("angles = {angles}\nwidth = 160\nheight = 120\nfocal = 150\n")).unwrap();
    let o = vcsfm(&["synth", "--config", "scene.cfg", "--out", "bundle"], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir.join("bundle")
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = vcsfm(&["frobnicate"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(!o.stderr.is_empty());
}

#[test]
fn bad_flags_and_configs_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&vcsfm(&["sfm", "m.txt", "--mode", "medium"], dir.path())), 1);
    std::fs::write(dir.path().join("bad.cfg"), "no_such_key = 3\n").unwrap();
    assert_eq!(code(&vcsfm(&["synth", "--config", "bad.cfg", "--out", "b"], dir.path())), 1);
    assert_eq!(code(&vcsfm(&["synth"], dir.path())), 1);
}

#[test]
fn missing_input_is_a_pipeline_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = vcsfm(&["sfm", "missing.txt"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn help_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = vcsfm(&["--help"], dir.path());
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["synth", "extract-vc", "estimate", "sfm", "eval", "plot"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn eval_of_identical_poses_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let b = bundle(dir.path(), "0, 90, 180");
    let gt = b.join("gt_poses.txt");
    let gt = gt.to_str().unwrap();
    let o = vcsfm(&["eval", gt, gt, "--thresholds", "1,5,30"], dir.path());
    assert_eq!(code(&o), 0);
    let r = parse_report(&String::from_utf8(o.stdout).unwrap()).unwrap();
    let m = r.metrics.unwrap();
    assert_eq!(m.pairs.len(), 3);
    for p in &m.pairs {
        assert_eq!(p.combined, 0.0);
    }
    assert_eq!(m.auc, vec![(1.0, 1.0), (5.0, 1.0), (30.0, 1.0)]);
}

#[test]
fn synth_sfm_eval_recovers_noiseless_poses() {
    let dir = tempfile::tempdir().unwrap();
    bundle(dir.path(), "0, 180");
    let o = vcsfm(&["sfm", "bundle/manifest.txt", "--out", "est.txt"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = vcsfm(&["eval", "est.txt", "bundle/gt_poses.txt", "--out", "eval.txt"], dir.path());
    assert_eq!(code(&o), 0);
    let r = parse_report(&read(dir.path().join("eval.txt"))).unwrap();
    assert!(r.unregistered.is_empty());
    assert!(r.tracks.virtual_tracks > 0);
    let worst = r.metrics.unwrap().pairs.iter().map(|p| p.combined).fold(0.0, f64::max);
    assert!(worst < 0.5, "combined error {worst}°");
}

#[test]
fn reports_are_byte_identical_across_runs_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("scene.cfg"),
        "angles = 0, 120, 240\nwidth = 160\nheight = 120\nfocal = 150\npixel_sigma = 1\noutlier_fraction = 0.1\n",
    )
    .unwrap();
    assert_eq!(code(&vcsfm(&["synth", "--config", "scene.cfg", "--seed", "7", "--out", "b"], dir.path())), 0);
    let run = |threads: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_vcsfm"));
        c.args(["sfm", "b/manifest.txt", "--seed", "3", "--gt", "b/gt_poses.txt"])
            .current_dir(dir.path());
        match threads {
            Some(t) => c.env("VCSFM_THREADS", t),
            None => c.env_remove("VCSFM_THREADS"),
        };
        let o = c.output().unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        o.stdout
    };
    let first = run(None);
    assert_eq!(run(None), first);
    assert_eq!(run(Some("1")), first);
    assert!(parse_report(std::str::from_utf8(&first).unwrap()).is_ok());
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_vcsfm"))
        .args(["eval", "a", "b"])
        .current_dir(dir.path())
        .env("VCSFM_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn extract_and_estimate_write_parsable_files() {
    let dir = tempfile::tempdir().unwrap();
    bundle(dir.path(), "0, 150");
    let o = vcsfm(&["extract-vc", "bundle/manifest.txt", "--out", "vcs.txt"], dir.path());
    assert_eq!(code(&o), 0);
    let vcs = parse_vcs(&read(dir.path().join("vcs.txt"))).unwrap();
    assert!(!vcs.is_empty());
    assert!(vcs.iter().any(|v| v.caster == "img0") && vcs.iter().any(|v| v.caster == "img1"));

    let o = vcsfm(&["estimate", "bundle/manifest.txt", "--pair", "img1", "img0"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let poses = parse_poses(&String::from_utf8(o.stdout).unwrap()).unwrap();
    let ids: Vec<&str> = poses.iter().map(|p| p.id.as_str()).collect();
    assert_eq!(ids, ["img1", "img0"]);
    let o = vcsfm(&["estimate", "bundle/manifest.txt", "--pair", "img0", "imgX"], dir.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn plot_writes_svg_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let b = bundle(dir.path(), "0, 60");
    let gt = b.join("gt_poses.txt");
    let gt = gt.to_str().unwrap();
    assert_eq!(code(&vcsfm(&["eval", gt, gt, "--out", "e.txt"], dir.path())), 0);
    assert_eq!(code(&vcsfm(&["plot", "e.txt", "--out", "curve"], dir.path())), 0);
    assert!(read(dir.path().join("curve.svg")).starts_with("<svg"));
    assert_eq!(read(dir.path().join("curve.csv")).lines().next(), Some("error_deg,recall"));

    // A report without an error table cannot be plotted.
    assert_eq!(code(&vcsfm(&["sfm", "bundle/manifest.txt", "--out", "r.txt"], dir.path())), 0);
    assert_eq!(code(&vcsfm(&["plot", "r.txt", "--out", "c2"], dir.path())), 2);
}

#[test]
fn config_pipeline_keys_travel_with_the_bundle() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s.cfg"), "angles = 0, 90\nstride = 3\n").unwrap();
    let o = vcsfm(&["synth", "--config", "s.cfg", "--mode", "hard", "--out", "b"], dir.path());
    assert_eq!(code(&o), 0);
    let manifest = read(dir.path().join("b/manifest.txt"));
    assert!(manifest.contains("param stride 3\n"));
    assert!(manifest.contains("param mode hard\n"));
}
