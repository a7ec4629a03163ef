use std::fs;
use std::path::Path;

use sarlc::baseline::ForestConfig;
use sarlc::evaluation::ModelSpec;
use sarlc::features::Season;
use sarlc::pipeline::{
    self, build_cubes, build_dataset, build_timeseries_dataset, despeckle_archive, evaluate_paths, synthesize, Dataset,
    DatasetConfig, DatasetMode, PipelineConfig, SceneManifest, Subset,
};
use sarlc::raster::read_raster;

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.synth.tiles = 3;
    cfg.synth.width = 64;
    cfg.synth.height = 64;
    cfg.synth.scenes_per_season = [3; 4];
    cfg.synth.short_season_tiles = 1;
    cfg.dataset.patch_size = 32;
    cfg.dataset.stride = 32;
    cfg.dataset.k = 3;
    cfg.forest = ForestConfig { n_trees: 5, max_samples_per_class: 300, ..ForestConfig::default() };
    cfg
}

fn build(root: &Path, cfg: &PipelineConfig) -> Dataset {
    let manifest = synthesize(&cfg.synth, &cfg.seasons, &root.join("synth")).unwrap();
    build_cubes(&manifest, cfg, &root.join("cubes")).unwrap();
    build_dataset(&root.join("cubes"), &root.join("synth/labels"), &cfg.dataset, None, &root.join("dataset")).unwrap()
}

#[test]
fn synthetic_archive_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let path = synthesize(&cfg.synth, &cfg.seasons, dir.path()).unwrap();
    let (manifest, base) = SceneManifest::load(&path).unwrap();
    assert_eq!(manifest.tiles.len(), 3);
    assert!(manifest.tiles.iter().all(|t| t.scenes.len() == 12));
    let labels = read_raster(base.join(&manifest.tiles[0].labels)).unwrap();
    assert!(labels.values().iter().all(|&v| matches!(v as u8, 0 | 20 | 5 | 7 | 8)));
    assert!(read_raster(base.join(&manifest.tiles[1].scenes[0].path)).unwrap().geo().is_some());
    let regions: Vec<Option<i64>> = manifest.tiles.iter().map(|t| t.ecoregion).collect();
    assert_eq!(regions, vec![Some(0), Some(1), Some(0)]);
}

#[test]
fn dataset_round_trip_and_rf_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let ds = build(dir.path(), &cfg);
    assert_eq!(ds.meta.channels, 28);
    assert_eq!(ds.meta.patches.len(), 12);
    assert_eq!(ds.split.train.len() + ds.split.test.len(), 12);
    let back = Dataset::load(&ds.dir).unwrap();
    assert_eq!(back.meta, ds.meta);
    assert_eq!(back.stats, ds.stats);
    let patches = back.load_patches(&back.names(Subset::Test)).unwrap();
    for p in &patches {
        for (i, &l) in p.labels.iter().enumerate() {
            if l == 0 {
                assert!((0..28).all(|b| p.features[b * p.pixels() + i] == 0.0));
            }
        }
    }

    let spec = cfg.model_spec("rf", 28).unwrap();
    let trained = pipeline::train_on_dataset(&back, &spec).unwrap();
    let model_path = dir.path().join("models/rf.json");
    pipeline::save_trained(&trained, &model_path).unwrap();
    let reloaded = pipeline::load_trained("rf", &model_path).unwrap();
    let n = pipeline::predict_patches(&reloaded, &back, Subset::Test, &dir.path().join("pred")).unwrap();
    assert_eq!(n, back.split.test.len());
    let cm = evaluate_paths(&dir.path().join("pred"), &back.dir.join("labels")).unwrap();
    assert_eq!(cm.total(), (n * 32 * 32) as u64);
    let m = pipeline::write_metrics(&cm, &dir.path().join("metrics"), "rf").unwrap();
    assert!(m.oa > 0.5, "OA {}", m.oa);
    assert!(dir.path().join("metrics/rf_confusion.csv").exists());

    let maps = pipeline::predict_cubes(&reloaded, &back.stats, &dir.path().join("cubes"), &dir.path().join("maps")).unwrap();
    assert_eq!(maps, 3);
    let map = read_raster(dir.path().join("maps/tile00_classes")).unwrap();
    assert_eq!((map.width(), map.height(), map.bands()), (64, 64, 1));
    assert!(map.geo().is_some());
}

#[test]
fn identical_prediction_and_truth_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let ds = build(dir.path(), &small_config());
    let labels = ds.dir.join("labels");
    let m = evaluate_paths(&labels, &labels).unwrap().summary().unwrap();
    assert_eq!(m.oa, 1.0);
    assert_eq!(m.kappa, 1.0);
}

#[test]
fn timeseries_dataset_excludes_short_tiles() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.synth.scenes_per_season = [5; 4];
    let manifest = synthesize(&cfg.synth, &cfg.seasons, &dir.path().join("synth")).unwrap();
    let ts_cfg = DatasetConfig { mode: DatasetMode::Timeseries, k: 5, ..cfg.dataset.clone() };
    let (ds, report) =
        build_timeseries_dataset(&manifest, &ts_cfg, &cfg.seasons, &cfg.despeckle, &dir.path().join("ts")).unwrap();
    assert_eq!(ds.meta.channels, 20);
    assert_eq!(ds.meta.mode, DatasetMode::Timeseries);
    assert_eq!(report.included, vec!["tile00".to_string(), "tile01".to_string()]);
    assert_eq!(report.excluded.len(), 1);
    assert_eq!(report.excluded[0].tile_id, "tile02");
    assert_eq!(report.excluded[0].season, Season::Spring);
    let written: sarlc::evaluation::TimeSeriesReport =
        serde_json::from_str(&fs::read_to_string(dir.path().join("ts/timeseries_report.json")).unwrap()).unwrap();
    assert_eq!(written, report);
}

#[test]
fn despeckle_archive_filters_by_season() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let manifest = synthesize(&cfg.synth, &cfg.seasons, &dir.path().join("synth")).unwrap();
    let out = despeckle_archive(&manifest, &cfg.seasons, Some(Season::Summer), &cfg.despeckle, &dir.path().join("d")).unwrap();
    let (m, _) = SceneManifest::load(&out).unwrap();
    assert!(m.tiles.iter().all(|t| t.scenes.len() == 3));
    assert!(m.tiles.iter().flat_map(|t| &t.scenes).all(|s| cfg.seasons.season_of(s.meta.acquisition_date) == Season::Summer));
}

#[test]
fn season_ablation_reports_every_season() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let ds = build(dir.path(), &cfg);
    let rows = pipeline::season_ablation(&ds, &ModelSpec::Forest { forest: cfg.forest.clone() }).unwrap();
    let names: Vec<&str> = rows.iter().map(|(k, _)| k.as_str()).collect();
    assert_eq!(names, ["all", "winter", "spring", "summer", "autumn"]);
    assert!(rows.iter().all(|(_, oa)| (0.0..=1.0).contains(oa)));
}

#[test]
fn config_file_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    fs::write(&path, r#"{"train": {"epochs": 3}, "dataset": {"split": {"random_state": 9}}}"#).unwrap();
    let cfg = PipelineConfig::load(&path).unwrap();
    assert_eq!(cfg.train.epochs, 3);
    assert_eq!(cfg.dataset.split.random_state, 9);
    assert_eq!(cfg.dataset.split.train_fraction, 0.7);
    fs::write(&path, r#"{"train": {"epochz": 3}}"#).unwrap();
    assert!(PipelineConfig::load(&path).unwrap_err().is_validation());
}
