use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stereo-ranger")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path) {
    let d = dir.to_str().unwrap();
    ok(&["synth", "--out", d, "--frames", "4", "--objects", "4", "--width", "640", "--height", "360", "--bias", "0.5"]);
}

#[test]
fn synth_run_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("input");
    let out = tmp.path().join("out");
    synth(&input);
    for f in ["scene.txt", "calib.txt", "detections.txt", "radar.txt", "truth.txt", "ego.txt", "frames/left_000003.pgm"] {
        assert!(input.join(f).exists(), "{f} missing");
    }
    let summary = ok(&[
        "run",
        "--input",
        input.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--method",
        "TEMPLATE_MATCHER",
        "--object-refiner",
        "--workers",
        "2",
    ]);
    assert!(summary.starts_with("4 frames"), "{summary}");
    let report = ok(&["eval", "--run", out.to_str().unwrap(), "--truth", input.to_str().unwrap()]);
    assert!(report.contains("0-50m"), "{report}");
    assert!(out.join("metrics.tsv").exists() && out.join("convergence.tsv").exists());
}

#[test]
fn scene_file_input_matches_directory_input() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("input");
    synth(&input);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["run", "--input", input.to_str().unwrap(), "--out", a.to_str().unwrap(), "--method", "bm"]);
    let scene = input.join("scene.txt");
    ok(&["run", "--scene", scene.to_str().unwrap(), "--frames", "4", "--out", b.to_str().unwrap(), "--method", "bm"]);
    let read = |p: &Path| std::fs::read_to_string(p.join("depth.txt")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn dump_disparity_writes_pgm16() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("input");
    synth(&input);
    let pgm = tmp.path().join("d.pgm");
    ok(&["dump-disparity", "--input", input.to_str().unwrap(), "--frame", "1", "--out", pgm.to_str().unwrap(), "--method", "STEREO_SGM"]);
    let map = stereo_ranger::image::DisparityMap::read_pgm16(&pgm, 0).unwrap();
    assert_eq!((map.width(), map.height()), (640, 360));
    assert!(map.valid_count() > 0);
}

#[test]
fn config_file_is_read_and_flags_override_it() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("input");
    synth(&input);
    let out = tmp.path().join("out");
    let (i, o) = (input.to_str().unwrap(), out.to_str().unwrap());
    let conf = tmp.path().join("pipeline.conf");
    let c = conf.to_str().unwrap();

    std::fs::write(&conf, "method = STEREO_SGM\nsgm.p1 = 8\n").unwrap();
    assert!(ok(&["run", "--input", i, "--out", o, "--config", c]).contains("(STEREO_SGM)"));
    assert!(ok(&["run", "--input", i, "--out", o, "--config", c, "--method", "tm"]).contains("(TEMPLATE_MATCHER)"));

    std::fs::write(&conf, "method = NOT_A_METHOD\n").unwrap();
    assert!(!cli(&["run", "--input", i, "--out", o, "--config", c]).status.success());
    let missing = tmp.path().join("none.conf");
    assert!(!cli(&["run", "--input", i, "--out", o, "--config", missing.to_str().unwrap()]).status.success());
}

#[test]
fn bad_arguments_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = cli(&["run", "--input", tmp.path().join("nope").to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));
    assert!(!cli(&["run", "--out", "x"]).status.success());
}
