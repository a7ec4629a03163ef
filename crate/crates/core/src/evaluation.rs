//! Experiment harnesses: ecoregion cross-validation and the raw
//! time-series input mode.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::baseline::{pixel_samples, Forest, ForestConfig};
use crate::dataset::{extract_patches_grid, mask_grid, split_train_test, NormStats, PatchSample, SplitSpec};
use crate::despeckle::{multitemporal_despeckle, LeeParams, SeasonalStack};
use crate::error::{Error, Result};
use crate::features::Season;
use crate::metrics::{ConfusionMatrix, N_CLASSES};
use crate::model::{self, ModelConfig, ModelParams, TrainConfig};
use crate::raster::RasterGrid;

/// Tile id to ecoregion code.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EcoregionAssignment {
    pub map: BTreeMap<String, i64>,
}

impl EcoregionAssignment {
    /// Copies of `samples` tagged with their region; untagged tiles are an error.
    pub fn apply(&self, samples: &[PatchSample]) -> Result<Vec<PatchSample>> {
        samples
            .iter()
            .map(|s| {
                let code = self
                    .map
                    .get(&s.tile_id)
                    .ok_or_else(|| Error::invalid(format!("tile {} has no ecoregion assignment", s.tile_id)))?;
                Ok(PatchSample { ecoregion: Some(*code), ..s.clone() })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum ModelSpec {
    Swin { model: ModelConfig, train: TrainConfig },
    Forest { forest: ForestConfig },
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Swin { .. } => "swin",
            ModelSpec::Forest { .. } => "rf",
        }
    }
}

#[derive(Clone, Debug)]
pub enum Trained {
    Swin(ModelParams),
    Forest(Forest),
}

impl Trained {
    pub fn predict(&self, p: &PatchSample) -> Result<Vec<u8>> {
        match self {
            Trained::Swin(params) => model::predict(params, p),
            Trained::Forest(f) => f.predict_patch(p),
        }
    }
}

/// Fits on already-normalised patches.
pub fn train_model(spec: &ModelSpec, train: &[PatchSample]) -> Result<Trained> {
    let channels = train
        .first()
        .ok_or_else(|| Error::invalid("no training patches"))?
        .channels;
    match spec {
        ModelSpec::Swin { model: cfg, train: tc } => {
            if cfg.in_channels != channels {
                return Err(Error::invalid(format!(
                    "model expects {} input channels, patches have {channels}",
                    cfg.in_channels
                )));
            }
            let mut params = ModelParams::init(cfg, tc.seed)?;
            model::train(&mut params, train, tc, |epoch, loss| log::debug!("epoch {epoch}: loss {loss:.5}"))?;
            Ok(Trained::Swin(params))
        }
        ModelSpec::Forest { forest } => {
            let data = pixel_samples(train, forest.max_samples_per_class, forest.seed)?;
            Ok(Trained::Forest(Forest::fit(&data, forest)?))
        }
    }
}

pub fn confusion_on(trained: &Trained, test: &[PatchSample]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(N_CLASSES);
    for p in test {
        cm.tally(&p.labels, &trained.predict(p)?)?;
    }
    Ok(cm)
}

fn normalized(samples: &[PatchSample], stats: &NormStats) -> Vec<PatchSample> {
    samples.iter().map(|p| p.normalized(stats)).collect()
}

/// Normalises both sets with stats from `train`, fits, and scores `test`.
pub fn fit_and_score(spec: &ModelSpec, train: &[PatchSample], test: &[PatchSample]) -> Result<ConfusionMatrix> {
    let stats = NormStats::from_patches(train)?;
    let trained = train_model(spec, &normalized(train, &stats))?;
    confusion_on(&trained, &normalized(test, &stats))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossRegionResult {
    pub regions: Vec<i64>,
    /// `oa[i][j]`: trained on region i, tested on region j.
    pub oa: Vec<Vec<f64>>,
}

impl CrossRegionResult {
    pub fn diagonal_mean(&self) -> f64 {
        let n = self.regions.len();
        (0..n).map(|i| self.oa[i][i]).sum::<f64>() / n as f64
    }

    pub fn off_diagonal_mean(&self) -> f64 {
        let n = self.regions.len();
        let sum: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| self.oa[i][j]).sum();
        sum / (n * (n - 1)) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("train\\test");
        for r in &self.regions {
            s.push_str(&format!(",{r}"));
        }
        s.push('\n');
        for (i, r) in self.regions.iter().enumerate() {
            s.push_str(&r.to_string());
            for v in &self.oa[i] {
                s.push_str(&format!(",{v:.6}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Trains per region and tests on every region. The diagonal uses a
/// seeded split inside the region; off-diagonal cells train on the whole
/// source region. Samples must be masked but not yet normalised.
pub fn ecoregion_cv(samples: &[PatchSample], spec: &ModelSpec, split: &SplitSpec) -> Result<CrossRegionResult> {
    let mut by_region: BTreeMap<i64, Vec<PatchSample>> = BTreeMap::new();
    for s in samples {
        let code = s
            .ecoregion
            .ok_or_else(|| Error::invalid(format!("patch from tile {} has no ecoregion", s.tile_id)))?;
        by_region.entry(code).or_default().push(s.clone());
    }
    if by_region.len() < 2 {
        return Err(Error::invalid(format!(
            "ecoregion cross-validation needs at least 2 regions, found {}",
            by_region.len()
        )));
    }
    let regions: Vec<i64> = by_region.keys().copied().collect();
    let mut oa = vec![vec![0.0; regions.len()]; regions.len()];
    for (i, ri) in regions.iter().enumerate() {
        let source = &by_region[ri];
        let stats = NormStats::from_patches(source)?;
        let full = train_model(spec, &normalized(source, &stats))?;
        for (j, rj) in regions.iter().enumerate() {
            oa[i][j] = if i == j {
                let (tr, te) = split_train_test(source, split)?;
                fit_and_score(spec, &tr, &te)?.overall_accuracy()?
            } else {
                confusion_on(&full, &normalized(&by_region[rj], &stats))?.overall_accuracy()?
            };
        }
    }
    Ok(CrossRegionResult { regions, oa })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub tile_id: String,
    pub season: Season,
    pub full_coverage_scenes: usize,
    pub required: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeSeriesReport {
    pub included: Vec<String>,
    pub excluded: Vec<Exclusion>,
}

fn full_coverage(g: &RasterGrid) -> bool {
    g.values().iter().all(|&v| !g.is_nodata(v))
}

/// `k` evenly spaced full-coverage scenes per season in date order, as a
/// 4k-band grid (despeckled unless `lee` is `None`). Fails with the first
/// season that has too few scenes.
pub fn timeseries_channels(
    tile_id: &str,
    stacks: &[SeasonalStack; 4],
    k: usize,
    lee: Option<&LeeParams>,
) -> std::result::Result<RasterGrid, Exclusion> {
    let mut bands = Vec::with_capacity(4 * k);
    for stack in stacks {
        let mut scenes: Vec<_> = stack.scenes.iter().filter(|(_, g)| full_coverage(g)).cloned().collect();
        let exclusion = Exclusion {
            tile_id: tile_id.to_string(),
            season: stack.season,
            full_coverage_scenes: scenes.len(),
            required: k,
        };
        if k == 0 || scenes.len() < k {
            return Err(exclusion);
        }
        scenes.sort_by_key(|(m, _)| m.acquisition_date);
        let images = match lee {
            Some(p) => multitemporal_despeckle(&SeasonalStack::new(stack.season, scenes.clone()), p)
                .map_err(|_| exclusion.clone())?,
            None => scenes.into_iter().map(|(_, g)| g).collect(),
        };
        let n = images.len();
        bands.extend((0..k).map(|i| images[i * n / k].clone()));
    }
    RasterGrid::stack(&bands).map_err(|_| Exclusion {
        tile_id: tile_id.to_string(),
        season: Season::Winter,
        full_coverage_scenes: 0,
        required: k,
    })
}

/// One tile's inputs for the time-series mode.
pub struct TimeSeriesTile<'a> {
    pub tile_id: &'a str,
    pub stacks: &'a [SeasonalStack; 4],
    /// Internal class indices.
    pub labels: &'a RasterGrid,
    pub ecoregion: Option<i64>,
}

/// Masked 4k-channel patches from every tile with enough scenes; the rest
/// are listed in the report.
pub fn timeseries_mode_dataset(
    tiles: &[TimeSeriesTile<'_>],
    k: usize,
    size: usize,
    stride: usize,
    lee: Option<&LeeParams>,
) -> Result<(Vec<PatchSample>, TimeSeriesReport)> {
    let mut patches = Vec::new();
    let mut report = TimeSeriesReport::default();
    for t in tiles {
        match timeseries_channels(t.tile_id, t.stacks, k, lee) {
            Ok(grid) => {
                let masked = mask_grid(&grid, t.labels)?;
                patches.extend(extract_patches_grid(&masked, t.labels, size, stride, t.tile_id, t.ecoregion)?);
                report.included.push(t.tile_id.to_string());
            }
            Err(e) => {
                log::info!("excluding tile {}: {} has {} of {} scenes", e.tile_id, e.season, e.full_coverage_scenes, k);
                report.excluded.push(e);
            }
        }
    }
    Ok((patches, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::SceneMeta;

    fn scene(date: &str, v: f32) -> (SceneMeta, RasterGrid) {
        (SceneMeta::new(SceneMeta::parse_date(date).unwrap()), RasterGrid::filled(4, 4, 1, v).unwrap())
    }

    fn stacks(counts: [usize; 4]) -> [SeasonalStack; 4] {
        let months = ["02", "05", "08", "11"];
        Season::ALL.map(|s| {
            let n = counts[s.index()];
            let sc = (0..n).map(|d| scene(&format!("2021-{}-{:02}", months[s.index()], d + 1), (s.index() * 10 + d) as f32 + 1.0)).collect();
            SeasonalStack::new(s, sc)
        })
    }

    #[test]
    fn twenty_channels_for_k5() {
        let g = timeseries_channels("t", &stacks([5, 6, 5, 7]), 5, None).unwrap();
        assert_eq!(g.bands(), 20);
        // date order within each season
        assert_eq!(g.band(0)[0], 1.0);
        assert_eq!(g.band(4)[0], 5.0);
    }

    #[test]
    fn short_season_excludes_tile() {
        let e = timeseries_channels("t7", &stacks([5, 3, 5, 5]), 5, None).unwrap_err();
        assert_eq!(e.season, Season::Spring);
        assert_eq!((e.full_coverage_scenes, e.required), (3, 5));
    }

    #[test]
    fn partial_coverage_does_not_count() {
        let mut s = stacks([5, 5, 5, 5]);
        s[2].scenes[0].1.values_mut()[3] = f32::NAN;
        let e = timeseries_channels("t", &s, 5, None).unwrap_err();
        assert_eq!(e.season, Season::Summer);
    }

    #[test]
    fn identical_scenes_give_super_images() {
        let mut s = stacks([3, 3, 3, 3]);
        for st in &mut s {
            let first = st.scenes[0].1.clone();
            for sc in &mut st.scenes {
                sc.1 = first.clone();
            }
        }
        let g = timeseries_channels("t", &s, 1, Some(&LeeParams::ratio_default(Some(4.0)))).unwrap();
        for (b, st) in s.iter().enumerate() {
            let sup = crate::despeckle::super_image(st).unwrap();
            for (a, e) in g.band(b).iter().zip(sup.band(0)) {
                assert!((a - e).abs() <= 1e-6 * e.abs());
            }
        }
    }

    #[test]
    fn single_region_is_rejected() {
        let p = PatchSample {
            features: vec![0.5; 4],
            channels: 1,
            size: 2,
            labels: vec![1, 2, 1, 2],
            tile_id: "a".into(),
            offset: (0, 0),
            ecoregion: Some(1),
        };
        let spec = ModelSpec::Forest { forest: ForestConfig::default() };
        assert!(ecoregion_cv(&[p.clone(), p], &spec, &SplitSpec::default()).is_err());
    }

    #[test]
    fn result_csv_layout() {
        let r = CrossRegionResult { regions: vec![3, 7], oa: vec![vec![0.9, 0.5], vec![0.4, 0.8]] };
        assert!((r.diagonal_mean() - 0.85).abs() < 1e-12);
        assert!((r.off_diagonal_mean() - 0.45).abs() < 1e-12);
        assert_eq!(r.to_csv(), "train\\test,3,7\n3,0.900000,0.500000\n7,0.400000,0.800000\n");
    }
}
