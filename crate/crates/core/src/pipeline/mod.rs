//! File-level pipeline steps and their on-disk layouts.
//!
//! ```text
//! synth/    manifest.json  ecoregions.json  labels/<tile>  scenes/<tile>/s1_<date>
//! cubes/    index.json  <tile>
//! dataset/  dataset.json  split.json  norm_stats.json  patches/<name>  labels/<name>
//! ```
//! Every raster is a `.json` header plus `.bin` payload pair.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{
    DatasetConfig, DatasetMode, EvaluateConfig, FeaturesConfig, IoConfig, PipelineConfig, SynthConfig,
};

use crate::baseline::Forest;
use crate::dataset::{
    extract_patches, labels_as_u8, mask_nodata, most_diverse_window, remap_labels, split_indices,
    to_external_labels, LabelMap, NormStats, PatchSample,
};
use crate::despeckle::{LeeParams, SeasonalStack};
use crate::error::{Error, Result};
use crate::evaluation::{
    confusion_on, ecoregion_cv, fit_and_score, timeseries_mode_dataset, train_model, EcoregionAssignment,
    ModelSpec, TimeSeriesReport, TimeSeriesTile, Trained,
};
use crate::features::{build_feature_cube, cluster_by_season, FeatureCube, Season, SeasonDefinition};
use crate::metrics::{confusion, ConfusionMatrix, Metrics, N_CLASSES};
use crate::model::{load_checkpoint, save_checkpoint};
use crate::raster::{read_raster, write_raster, GeoRef, RasterGrid, SceneMeta};
use crate::report;
use crate::rng::stream_seed;
use crate::synthetic::{default_class_params, generate_class_map, generate_time_series, season_dates, SyntheticWorld};

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    if let Some(parent) = p.parent() {
        create_dir(parent)?;
    }
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn put_raster(grid: &RasterGrid, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    write_raster(grid, path)
}

fn write_json<T: Serialize>(p: &Path, v: &T) -> Result<()> {
    write_text(p, &(serde_json::to_string_pretty(v)? + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(p: &Path) -> Result<T> {
    let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Header { path: p.to_path_buf(), message: e.to_string() })
}

fn parent_dir(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    /// Raster base path relative to the manifest.
    pub path: String,
    #[serde(flatten)]
    pub meta: SceneMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileEntry {
    pub id: String,
    pub ecoregion: Option<i64>,
    /// MOLCA-coded label raster relative to the manifest.
    pub labels: String,
    pub scenes: Vec<SceneEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub tiles: Vec<TileEntry>,
}

impl SceneManifest {
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        Ok((read_json(path)?, parent_dir(path)))
    }

    pub fn assignments(&self) -> EcoregionAssignment {
        EcoregionAssignment {
            map: self.tiles.iter().filter_map(|t| t.ecoregion.map(|e| (t.id.clone(), e))).collect(),
        }
    }
}

pub fn tile_id(t: usize) -> String {
    format!("tile{t:02}")
}

/// Renders a synthetic archive and returns the manifest path.
pub fn synthesize(cfg: &SynthConfig, seasons: &SeasonDefinition, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    seasons.validate()?;
    create_dir(out)?;
    let mut tiles = Vec::with_capacity(cfg.tiles);
    for t in 0..cfg.tiles {
        let id = tile_id(t);
        let region = t % cfg.ecoregions;
        let geo = GeoRef {
            transform: [500_000.0 + (t * cfg.width) as f64 * 10.0, 10.0, 0.0, 5_000_000.0, 0.0, -10.0],
            crs: "EPSG:32632".into(),
        };
        let map = generate_class_map(stream_seed(&[cfg.seed, t as u64]), cfg.width, cfg.height, cfg.n_classes)?
            .with_geo(Some(geo));
        let world = SyntheticWorld::new(map.clone(), default_class_params(cfg.n_classes, cfg.texture), cfg.enl, stream_seed(&[cfg.seed, 1_000 + t as u64]))?
            .scaled_backscatter(cfg.ecoregion_shift.powi(region as i32))?;
        let world = SyntheticWorld { seasons: seasons.clone(), ..world };
        let mut per = cfg.scenes_per_season;
        if t + cfg.short_season_tiles >= cfg.tiles {
            per[Season::Spring.index()] = per[Season::Spring.index()].min(3);
        }
        let dates = season_dates(seasons, cfg.year, per);
        let labels_rel = format!("labels/{id}");
        put_raster(&to_external_labels(&map)?, &out.join(&labels_rel))?;
        let mut scenes = Vec::new();
        for (meta, grid) in generate_time_series(&world, &dates)? {
            let rel = format!("scenes/{id}/s1_{}", meta.acquisition_date.format("%Y%m%d"));
            put_raster(&grid, &out.join(&rel))?;
            scenes.push(SceneEntry { path: rel, meta });
        }
        tiles.push(TileEntry { id, ecoregion: Some(region as i64), labels: labels_rel, scenes });
    }
    let manifest = SceneManifest { tiles };
    write_json(&out.join("ecoregions.json"), &manifest.assignments())?;
    let path = out.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Reads a tile's scenes and groups them by season.
pub fn load_stacks(tile: &TileEntry, base: &Path, seasons: &SeasonDefinition) -> Result<[SeasonalStack; 4]> {
    let scenes = tile
        .scenes
        .iter()
        .map(|s| Ok((s.meta.clone(), read_raster(base.join(&s.path))?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(cluster_by_season(&scenes, seasons)?.stacks)
}

/// Despeckled copies of every scene (or one season's scenes), with a
/// manifest mirroring the input.
pub fn despeckle_archive(
    manifest_path: &Path,
    seasons: &SeasonDefinition,
    only: Option<Season>,
    lee: &LeeParams,
    out: &Path,
) -> Result<PathBuf> {
    lee.validate()?;
    let (manifest, base) = SceneManifest::load(manifest_path)?;
    create_dir(out)?;
    let mut tiles = Vec::new();
    for tile in &manifest.tiles {
        let stacks = load_stacks(tile, &base, seasons)?;
        let mut scenes = Vec::new();
        for stack in stacks.iter().filter(|s| !s.is_empty() && only.is_none_or(|o| o == s.season)) {
            for ((meta, _), grid) in stack.scenes.iter().zip(crate::despeckle::multitemporal_despeckle(stack, lee)?) {
                let rel = format!("scenes/{}/s1_{}", tile.id, meta.acquisition_date.format("%Y%m%d"));
                put_raster(&grid, &out.join(&rel))?;
                scenes.push(SceneEntry { path: rel, meta: meta.clone() });
            }
        }
        scenes.sort_by_key(|s| s.meta.acquisition_date);
        let labels = read_raster(base.join(&tile.labels))?;
        let labels_rel = format!("labels/{}", tile.id);
        put_raster(&labels, &out.join(&labels_rel))?;
        tiles.push(TileEntry { scenes, labels: labels_rel, ..tile.clone() });
    }
    let path = out.join("manifest.json");
    write_json(&path, &SceneManifest { tiles })?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CubeEntry {
    pub id: String,
    pub ecoregion: Option<i64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CubeIndex {
    pub cubes: Vec<CubeEntry>,
}

/// One 28-band cube per tile, written as `<out>/<tile>`.
pub fn build_cubes(manifest_path: &Path, cfg: &PipelineConfig, out: &Path) -> Result<CubeIndex> {
    let (manifest, base) = SceneManifest::load(manifest_path)?;
    create_dir(out)?;
    let mut cubes = Vec::new();
    for tile in &manifest.tiles {
        let stacks = load_stacks(tile, &base, &cfg.seasons)?;
        let cube = build_feature_cube(&stacks, &cfg.despeckle, &cfg.features.lee)?;
        let geo = stacks.iter().find_map(|s| s.scenes.first().and_then(|(_, g)| g.geo().cloned()));
        put_raster(&cube.into_grid().with_geo(geo), &out.join(&tile.id))?;
        cubes.push(CubeEntry { id: tile.id.clone(), ecoregion: tile.ecoregion });
    }
    let index = CubeIndex { cubes };
    write_json(&out.join("index.json"), &index)?;
    Ok(index)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchEntry {
    pub name: String,
    pub tile_id: String,
    pub offset: (usize, usize),
    pub ecoregion: Option<i64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub mode: DatasetMode,
    pub channels: usize,
    pub size: usize,
    pub stride: usize,
    pub patches: Vec<PatchEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFile {
    pub random_state: u64,
    pub train_fraction: f64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subset {
    Train,
    Test,
    All,
}

impl std::str::FromStr for Subset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Subset::Train),
            "test" => Ok(Subset::Test),
            "all" => Ok(Subset::All),
            o => Err(Error::invalid(format!("unknown split {o:?}; expected train, test or all"))),
        }
    }
}

/// A dataset directory. Patches are stored masked but not normalised.
pub struct Dataset {
    pub dir: PathBuf,
    pub meta: DatasetMeta,
    pub split: SplitFile,
    pub stats: NormStats,
}

fn patch_name(tile: &str, offset: (usize, usize)) -> String {
    format!("{tile}_r{:04}_c{:04}", offset.0, offset.1)
}

fn write_patch(dir: &Path, name: &str, p: &PatchSample) -> Result<()> {
    let s = p.size as u32;
    put_raster(&RasterGrid::new(s, s, p.channels as u16, p.features.clone())?, &dir.join("patches").join(name))?;
    let labels = p.labels.iter().map(|&l| f32::from(l)).collect();
    put_raster(&RasterGrid::new(s, s, 1, labels)?, &dir.join("labels").join(name))
}

fn write_dataset(
    dir: &Path,
    mode: DatasetMode,
    patches: &[PatchSample],
    cfg: &DatasetConfig,
) -> Result<Dataset> {
    let first = patches.first().ok_or_else(|| Error::invalid("dataset has no patches"))?;
    let entries: Vec<PatchEntry> = patches
        .iter()
        .map(|p| PatchEntry {
            name: patch_name(&p.tile_id, p.offset),
            tile_id: p.tile_id.clone(),
            offset: p.offset,
            ecoregion: p.ecoregion,
        })
        .collect();
    let (tr, te) = split_indices(patches.len(), &cfg.split)?;
    let train: Vec<PatchSample> = tr.iter().map(|&i| patches[i].clone()).collect();
    let stats = NormStats::from_patches(&train)?;
    for (e, p) in entries.iter().zip(patches) {
        write_patch(dir, &e.name, p)?;
    }
    let meta = DatasetMeta { mode, channels: first.channels, size: first.size, stride: cfg.stride, patches: entries };
    let split = SplitFile {
        random_state: cfg.split.random_state,
        train_fraction: cfg.split.train_fraction,
        train: tr.iter().map(|&i| meta.patches[i].name.clone()).collect(),
        test: te.iter().map(|&i| meta.patches[i].name.clone()).collect(),
    };
    write_json(&dir.join("dataset.json"), &meta)?;
    write_json(&dir.join("split.json"), &split)?;
    write_json(&dir.join("norm_stats.json"), &stats)?;
    Ok(Dataset { dir: dir.to_path_buf(), meta, split, stats })
}

/// Feature-mode dataset from a cube directory and MOLCA label rasters
/// named after the tiles.
pub fn build_dataset(
    cubes_dir: &Path,
    labels_dir: &Path,
    cfg: &DatasetConfig,
    assignments: Option<&EcoregionAssignment>,
    out: &Path,
) -> Result<Dataset> {
    let index: CubeIndex = read_json(&cubes_dir.join("index.json"))?;
    let map = LabelMap { allow_empty_classes: cfg.allow_empty_classes };
    let mut patches = Vec::new();
    for entry in &index.cubes {
        let mut grid = read_raster(cubes_dir.join(&entry.id))?;
        let mut labels = remap_labels(&read_raster(labels_dir.join(&entry.id))?, &map)?;
        if let Some(side) = cfg.select_window {
            let (r, c) = most_diverse_window(&labels, side, cfg.stride)?;
            grid = grid.window(r, c, side, side)?;
            labels = labels.window(r, c, side, side)?;
        }
        let cube = mask_nodata(&FeatureCube::new(grid)?, &labels)?;
        let region = assignments.and_then(|a| a.map.get(&entry.id).copied()).or(entry.ecoregion);
        patches.extend(extract_patches(&cube, &labels, cfg.patch_size, cfg.stride, &entry.id, region)?);
    }
    create_dir(out)?;
    write_dataset(out, DatasetMode::Feature, &patches, cfg)
}

/// Time-series-mode dataset straight from a scene manifest.
pub fn build_timeseries_dataset(
    manifest_path: &Path,
    cfg: &DatasetConfig,
    seasons: &SeasonDefinition,
    despeckle: &LeeParams,
    out: &Path,
) -> Result<(Dataset, TimeSeriesReport)> {
    let (manifest, base) = SceneManifest::load(manifest_path)?;
    let map = LabelMap { allow_empty_classes: cfg.allow_empty_classes };
    let mut loaded = Vec::new();
    for tile in &manifest.tiles {
        let stacks = load_stacks(tile, &base, seasons)?;
        let labels = remap_labels(&read_raster(base.join(&tile.labels))?, &map)?;
        loaded.push((tile, stacks, labels));
    }
    let tiles: Vec<TimeSeriesTile> = loaded
        .iter()
        .map(|(t, s, l)| TimeSeriesTile { tile_id: &t.id, stacks: s, labels: l, ecoregion: t.ecoregion })
        .collect();
    let lee = (!cfg.raw).then_some(despeckle);
    let (patches, report) = timeseries_mode_dataset(&tiles, cfg.k, cfg.patch_size, cfg.stride, lee)?;
    create_dir(out)?;
    write_json(&out.join("timeseries_report.json"), &report)?;
    Ok((write_dataset(out, DatasetMode::Timeseries, &patches, cfg)?, report))
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let meta: DatasetMeta = read_json(&dir.join("dataset.json"))?;
        let split: SplitFile = read_json(&dir.join("split.json"))?;
        let stats: NormStats = read_json(&dir.join("norm_stats.json"))?;
        stats.validate()?;
        if stats.bands() != meta.channels {
            return Err(Error::Shape("norm_stats.json does not match the channel count".into()));
        }
        Ok(Self { dir: dir.to_path_buf(), meta, split, stats })
    }

    pub fn names(&self, subset: Subset) -> Vec<String> {
        match subset {
            Subset::Train => self.split.train.clone(),
            Subset::Test => self.split.test.clone(),
            Subset::All => self.meta.patches.iter().map(|p| p.name.clone()).collect(),
        }
    }

    /// Raw (masked, unnormalised) patches.
    pub fn load_patches(&self, names: &[String]) -> Result<Vec<PatchSample>> {
        let by_name: BTreeMap<&str, &PatchEntry> = self.meta.patches.iter().map(|p| (p.name.as_str(), p)).collect();
        names
            .iter()
            .map(|n| {
                let e = by_name.get(n.as_str()).ok_or_else(|| Error::invalid(format!("unknown patch {n}")))?;
                let f = read_raster(self.dir.join("patches").join(n))?;
                let l = read_raster(self.dir.join("labels").join(n))?;
                Ok(PatchSample {
                    channels: f.bands(),
                    size: f.width(),
                    features: f.into_values(),
                    labels: labels_as_u8(&l)?,
                    tile_id: e.tile_id.clone(),
                    offset: e.offset,
                    ecoregion: e.ecoregion,
                })
            })
            .collect()
    }

    pub fn normalized(&self, subset: Subset) -> Result<Vec<PatchSample>> {
        Ok(self.load_patches(&self.names(subset))?.iter().map(|p| p.normalized(&self.stats)).collect())
    }
}

pub fn train_on_dataset(ds: &Dataset, spec: &ModelSpec) -> Result<Trained> {
    train_model(spec, &ds.normalized(Subset::Train)?)
}

/// Swin checkpoints use `path` as the base of a `.json`/`.bin` pair;
/// forests are a single JSON file at `path`.
pub fn save_trained(trained: &Trained, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    match trained {
        Trained::Swin(p) => save_checkpoint(p, path),
        Trained::Forest(f) => f.save(path),
    }
}

pub fn load_trained(kind: &str, path: &Path) -> Result<Trained> {
    match kind {
        "swin" => Ok(Trained::Swin(load_checkpoint(path)?)),
        "rf" => Ok(Trained::Forest(Forest::load(path)?)),
        o => Err(Error::invalid(format!("unknown model {o:?}; expected swin or rf"))),
    }
}

/// Class rasters for dataset patches, one per patch, named as the patch.
pub fn predict_patches(trained: &Trained, ds: &Dataset, subset: Subset, out: &Path) -> Result<usize> {
    create_dir(out)?;
    let names = ds.names(subset);
    let patches = ds.normalized(subset)?;
    for (n, p) in names.iter().zip(&patches) {
        let pred = trained.predict(p)?;
        let s = p.size as u32;
        put_raster(&RasterGrid::new(s, s, 1, pred.iter().map(|&c| f32::from(c)).collect())?, &out.join(n))?;
    }
    Ok(names.len())
}

/// Whole-tile class maps, `<out>/<tile>_classes`, keeping georeferencing.
pub fn predict_cubes(trained: &Trained, stats: &NormStats, cubes_dir: &Path, out: &Path) -> Result<usize> {
    let index: CubeIndex = read_json(&cubes_dir.join("index.json"))?;
    create_dir(out)?;
    for entry in &index.cubes {
        let grid = read_raster(cubes_dir.join(&entry.id))?;
        if grid.width() != grid.height() {
            return Err(Error::Shape(format!("cube {} is not square", entry.id)));
        }
        let mut features = grid.values().to_vec();
        let n = grid.pixels();
        for b in 0..grid.bands() {
            for v in &mut features[b * n..(b + 1) * n] {
                *v = if v.is_nan() { 0.0 } else { stats.apply(b, *v) };
            }
        }
        let sample = PatchSample {
            features,
            channels: grid.bands(),
            size: grid.width(),
            labels: vec![0; n],
            tile_id: entry.id.clone(),
            offset: (0, 0),
            ecoregion: entry.ecoregion,
        };
        let pred = trained.predict(&sample)?;
        let map = grid.like_single(pred.iter().map(|&c| f32::from(c)).collect()).with_nodata(f32::NAN);
        put_raster(&map, &out.join(format!("{}_classes", entry.id)))?;
    }
    Ok(index.cubes.len())
}

fn raster_names(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".json")).map(str::to_string))
        .collect();
    names.sort();
    Ok(names)
}

/// Confusion matrix over every class raster in `pred`, paired by name
/// with `truth`. Either argument may also be a single raster base path.
pub fn evaluate_paths(pred: &Path, truth: &Path) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(N_CLASSES);
    if pred.is_dir() {
        let names = raster_names(pred)?;
        if names.is_empty() {
            return Err(Error::invalid(format!("no rasters in {}", pred.display())));
        }
        for n in names {
            cm.merge(&confusion(&read_raster(pred.join(&n))?, &read_raster(truth.join(&n))?, N_CLASSES)?)?;
        }
    } else {
        cm.merge(&confusion(&read_raster(pred)?, &read_raster(truth)?, N_CLASSES)?)?;
    }
    Ok(cm)
}

/// Writes `<prefix>_metrics.csv` and `<prefix>_confusion.csv`.
pub fn write_metrics(cm: &ConfusionMatrix, dir: &Path, prefix: &str) -> Result<Metrics> {
    let m = cm.summary()?;
    write_text(&dir.join(format!("{prefix}_metrics.csv")), &m.to_csv())?;
    write_text(&dir.join(format!("{prefix}_confusion.csv")), &cm.to_csv())?;
    Ok(m)
}

/// Random forests on each season's seven bands against all 28.
pub fn season_ablation(ds: &Dataset, spec: &ModelSpec) -> Result<Vec<(String, f64)>> {
    let train = ds.load_patches(&ds.names(Subset::Train))?;
    let test = ds.load_patches(&ds.names(Subset::Test))?;
    let per = crate::features::FEATURES_PER_SEASON;
    let subset = |ps: &[PatchSample], s: usize| -> Vec<PatchSample> {
        ps.iter()
            .map(|p| {
                let n = p.pixels();
                PatchSample { channels: per, features: p.features[s * per * n..(s + 1) * per * n].to_vec(), ..p.clone() }
            })
            .collect()
    };
    let mut rows = vec![("all".to_string(), fit_and_score(spec, &train, &test)?.overall_accuracy()?)];
    for s in Season::ALL {
        let oa = fit_and_score(spec, &subset(&train, s.index()), &subset(&test, s.index()))?.overall_accuracy()?;
        rows.push((s.name().to_string(), oa));
    }
    Ok(rows)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineSummary {
    pub metrics: BTreeMap<String, Metrics>,
    pub season_ablation: Option<Vec<(String, f64)>>,
    pub ecoregion: Option<crate::evaluation::CrossRegionResult>,
    pub timeseries: Option<TimeSeriesReport>,
}

/// synth -> features -> dataset -> train/predict/evaluate per model ->
/// ablation / ecoregion matrix / time-series comparison -> report.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<PipelineSummary> {
    cfg.validate()?;
    create_dir(out)?;
    write_json(&out.join("config.json"), cfg)?;
    let synth_dir = out.join("synth");
    let manifest = synthesize(&cfg.synth, &cfg.seasons, &synth_dir)?;
    log::info!("synthesised {} tiles", cfg.synth.tiles);
    build_cubes(&manifest, cfg, &out.join("cubes"))?;
    let ds = build_dataset(&out.join("cubes"), &synth_dir.join("labels"), &cfg.dataset, None, &out.join("dataset"))?;
    log::info!("dataset: {} train / {} test patches", ds.split.train.len(), ds.split.test.len());
    let metrics_dir = out.join("metrics");
    let mut summary = PipelineSummary::default();
    for name in &cfg.evaluate.models {
        let spec = cfg.model_spec(name, ds.meta.channels)?;
        let trained = train_on_dataset(&ds, &spec)?;
        let model_path = match name.as_str() {
            "swin" => out.join("models").join("swin"),
            _ => out.join("models").join("rf.json"),
        };
        save_trained(&trained, &model_path)?;
        let pred_dir = out.join("predictions").join(name);
        predict_patches(&trained, &ds, Subset::Test, &pred_dir)?;
        predict_cubes(&trained, &ds.stats, &out.join("cubes"), &out.join("maps").join(name))?;
        let cm = evaluate_paths(&pred_dir, &ds.dir.join("labels"))?;
        let m = write_metrics(&cm, &metrics_dir, name)?;
        log::info!("{name}: OA {:.4} kappa {:.4}", m.oa, m.kappa);
        summary.metrics.insert(name.clone(), m);
    }
    if cfg.evaluate.season_ablation {
        let rows = season_ablation(&ds, &cfg.model_spec("rf", ds.meta.channels)?)?;
        let mut csv = String::from("features,oa\n");
        for (k, v) in &rows {
            csv.push_str(&format!("{k},{v:.6}\n"));
        }
        write_text(&metrics_dir.join("season_ablation.csv"), &csv)?;
        summary.season_ablation = Some(rows);
    }
    if let Some(name) = &cfg.evaluate.ecoregion_model {
        let spec = cfg.model_spec(name, ds.meta.channels)?;
        let all = ds.load_patches(&ds.names(Subset::All))?;
        let result = ecoregion_cv(&all, &spec, &cfg.dataset.split)?;
        write_text(&out.join("oa_matrix.csv"), &result.to_csv())?;
        summary.ecoregion = Some(result);
    }
    if cfg.evaluate.timeseries_comparison {
        let ts_cfg = DatasetConfig { mode: DatasetMode::Timeseries, ..cfg.dataset.clone() };
        let (ts, report) = build_timeseries_dataset(&manifest, &ts_cfg, &cfg.seasons, &cfg.despeckle, &out.join("dataset_ts"))?;
        let spec = cfg.model_spec("swin", ts.meta.channels)?;
        let trained = train_on_dataset(&ts, &spec)?;
        let cm = confusion_on(&trained, &ts.normalized(Subset::Test)?)?;
        let m = write_metrics(&cm, &metrics_dir, "swin_timeseries")?;
        summary.metrics.insert("swin_timeseries".into(), m);
        summary.timeseries = Some(report);
    }
    let series: Vec<(String, Metrics)> = summary.metrics.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    if !series.is_empty() {
        report::write_report(&series, &out.join("report"))?;
    }
    Ok(summary)
}
