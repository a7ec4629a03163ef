use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sarlc(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sarlc"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = sarlc(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn header(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_then_features_builds_28_band_cubes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--seed", "1", "--tiles", "2", "--size", "48", "--out", "w"], d);
    ok(&["features", "--scenes", "w/manifest.json", "--out", "c"], d);
    assert_eq!(header(&d.join("c/tile00.json"))["bands"], 28);
    assert!(d.join("c/tile01.bin").exists());
}

#[test]
fn evaluate_identical_rasters_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let classes: Vec<f32> = (0..32 * 32).map(|i| (i % 9) as f32).collect();
    sarlc::raster::write_raster(&sarlc::raster::RasterGrid::new(32, 32, 1, classes).unwrap(), d.join("map")).unwrap();
    ok(&["evaluate", "--pred", "map", "--truth", "map", "--out", "e"], d);
    let m = fs::read_to_string(d.join("e/metrics.csv")).unwrap();
    let row: Vec<&str> = m.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "1.000000");
    assert!(d.join("e/confusion.csv").exists());

    // MOLCA-coded rasters are not class indices
    ok(&["synth", "--tiles", "1", "--size", "32", "--out", "w"], d);
    let out = sarlc(&["evaluate", "--pred", "w/labels/tile00", "--truth", "w/labels/tile00", "--out", "e2"], d);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn exit_codes_and_error_lines() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(sarlc(&["frobnicate"], d).status.code(), Some(2));

    fs::write(d.join("bad.json"), r#"{"train": {"lr": -1.0}}"#).unwrap();
    let out = sarlc(&["pipeline", "--config", "bad.json", "--out", "o"], d);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with("invalid_argument: "), "{err}");

    let out = sarlc(&["features", "--scenes", "missing.json", "--out", "c"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("io: "));

    let out = Command::new(env!("CARGO_BIN_EXE_sarlc"))
        .args(["synth", "--tiles", "1", "--size", "16", "--out", "w"])
        .current_dir(d)
        .env("SARLC_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn every_subcommand_documents_its_flags() {
    let dir = tempfile::tempdir().unwrap();
    for (sub, flags) in [
        ("synth", &["--seed", "--out", "--config"][..]),
        ("despeckle", &["--stack", "--season", "--window", "--noise-cv", "--out"]),
        ("features", &["--scenes", "--season-defs", "--out"]),
        ("dataset", &["--cubes", "--labels", "--random-state", "--mode", "--k", "--raw", "--allow-empty-classes"]),
        ("train", &["--config", "--data", "--model", "--epochs", "--lr", "--seed", "--checkpoint-out"]),
        ("predict", &["--model", "--checkpoint", "--data", "--cubes", "--out"]),
        ("evaluate", &["--pred", "--truth", "--out"]),
        ("ecoregion-cv", &["--data", "--assignments", "--model", "--out"]),
        ("report", &["--metrics", "--out"]),
        ("pipeline", &["--config", "--out"]),
    ] {
        let help = ok(&[sub, "--help"], dir.path());
        for f in flags {
            assert!(help.contains(f), "{sub} --help lacks {f}");
        }
        if !matches!(sub, "evaluate" | "report") {
            assert!(help.contains("default"), "{sub} --help shows no defaults");
        }
    }
}

#[test]
fn subcommand_chain_with_forest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("cfg.json"),
        r#"{"dataset": {"patch_size": 32, "stride": 32}, "forest": {"n_trees": 4, "max_samples_per_class": 200},
            "synth": {"tiles": 4, "width": 64, "height": 64, "scenes_per_season": [2, 2, 2, 2]}}"#,
    )
    .unwrap();
    ok(&["synth", "--config", "cfg.json", "--out", "w"], d);
    ok(&["despeckle", "--stack", "w/manifest.json", "--season", "winter", "--noise-cv", "auto", "--out", "dw"], d);
    assert!(header(&d.join("dw/manifest.json"))["tiles"][0]["scenes"].as_array().unwrap().len() == 2);
    ok(&["features", "--config", "cfg.json", "--scenes", "w/manifest.json", "--out", "c"], d);
    ok(
        &["dataset", "--config", "cfg.json", "--cubes", "c", "--labels", "w/labels", "--assignments", "w/ecoregions.json", "--random-state", "3", "--out", "ds"],
        d,
    );
    let split = header(&d.join("ds/split.json"));
    assert_eq!(split["random_state"], 3);
    assert!(d.join("ds/norm_stats.json").exists());
    ok(&["train", "--config", "cfg.json", "--data", "ds", "--model", "rf", "--seed", "5", "--checkpoint-out", "m/rf.json"], d);
    ok(&["predict", "--model", "rf", "--checkpoint", "m/rf.json", "--data", "ds", "--out", "p"], d);
    ok(&["predict", "--model", "rf", "--checkpoint", "m/rf.json", "--data", "ds", "--cubes", "c", "--out", "maps"], d);
    assert!(d.join("maps/tile03_classes.json").exists());
    ok(&["evaluate", "--pred", "p", "--truth", "ds/labels", "--out", "e"], d);
    let m = fs::read_to_string(d.join("e/metrics.csv")).unwrap();
    assert!(m.starts_with("oa,kappa,f1,pa_0"));
    ok(&["ecoregion-cv", "--config", "cfg.json", "--data", "ds", "--assignments", "w/ecoregions.json", "--model", "rf", "--out", "x/oa_matrix.csv"], d);
    let matrix = fs::read_to_string(d.join("x/oa_matrix.csv")).unwrap();
    assert_eq!(matrix.lines().count(), 3);
    fs::copy(d.join("e/metrics.csv"), d.join("rf_metrics.csv")).unwrap();
    ok(&["report", "--metrics", "rf_metrics.csv", "--out", "r"], d);
    let svg = fs::read_to_string(d.join("r/pa.svg")).unwrap();
    assert_eq!(svg.matches(r#"class="bar""#).count(), 9);
}

#[test]
fn report_rejects_out_of_range_pa() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("m.csv"), "oa,kappa,f1,pa_0,pa_1\n0.5,0.4,0.5,1.5,0.2\n").unwrap();
    let out = sarlc(&["report", "--metrics", "m.csv", "--out", "r"], d);
    assert_eq!(out.status.code(), Some(3));
}
