//! Speckled multitemporal worlds with known class maps.
//!
//! Pixels follow the L-look intensity model: a class/season mean times a
//! per-pixel texture factor (fixed in time) times unit-mean gamma speckle
//! drawn independently per date.

use chrono::{Datelike, NaiveDate};
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Season, SeasonDefinition};
use crate::raster::{RasterGrid, SceneMeta};
use crate::rng::{keyed_prng, uniform_below};

const CLASS_MAP_STREAM: u64 = 0xc1a5_5000;
const TEXTURE_STREAM: u64 = 0x7e47_0000;
const SCENE_STREAM: u64 = 0x5ce9_e000;

pub const MAX_CLASSES: usize = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassParams {
    /// Linear intensity per season, in `Season::ALL` order.
    pub mean_backscatter: [f64; 4],
    /// Coefficient of variation of the time-invariant texture factor.
    pub texture_scale: f64,
}

#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub class_map: RasterGrid,
    /// Indexed by class code.
    pub class_params: Vec<ClassParams>,
    pub enl: f64,
    pub seed: u64,
    pub seasons: SeasonDefinition,
}

impl SyntheticWorld {
    pub fn new(
        class_map: RasterGrid,
        class_params: Vec<ClassParams>,
        enl: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(enl >= 1.0) {
            return Err(Error::invalid(format!("ENL must be >= 1, got {enl}")));
        }
        for (code, p) in class_params.iter().enumerate() {
            if p.mean_backscatter.iter().any(|&m| !(m > 0.0)) {
                return Err(Error::invalid(format!(
                    "class {code} has a non-positive seasonal mean"
                )));
            }
            if !(p.texture_scale >= 0.0) {
                return Err(Error::invalid(format!("class {code} has negative texture")));
            }
        }
        for &v in class_map.values() {
            let code = v as usize;
            if v < 0.0 || v.fract() != 0.0 || code >= class_params.len() {
                return Err(Error::invalid(format!(
                    "class code {v} has no entry in class_params"
                )));
            }
        }
        Ok(Self {
            class_map,
            class_params,
            enl,
            seed,
            seasons: SeasonDefinition::default(),
        })
    }

    pub fn with_class_params(self, class_params: Vec<ClassParams>) -> Result<Self> {
        let mut w = Self::new(self.class_map, class_params, self.enl, self.seed)?;
        w.seasons = self.seasons;
        Ok(w)
    }

    /// Multiplies every seasonal mean by `factor`.
    pub fn scaled_backscatter(&self, factor: f64) -> Result<Self> {
        let params = self
            .class_params
            .iter()
            .map(|p| ClassParams {
                mean_backscatter: p.mean_backscatter.map(|m| m * factor),
                texture_scale: p.texture_scale,
            })
            .collect();
        self.clone().with_class_params(params)
    }

    /// The speckle- and texture-free scene for a season.
    pub fn noiseless(&self, season: Season) -> RasterGrid {
        let values = self
            .class_map
            .values()
            .iter()
            .map(|&c| self.class_params[c as usize].mean_backscatter[season.index()] as f32)
            .collect();
        self.class_map.like_single(values)
    }

    fn texture(&self) -> Vec<f64> {
        let mut rng = keyed_prng(&[self.seed, TEXTURE_STREAM]);
        let mut samplers: Vec<Option<Gamma<f64>>> = Vec::new();
        for p in &self.class_params {
            let s = p.texture_scale;
            samplers.push(if s > 0.0 {
                Some(Gamma::new(1.0 / (s * s), s * s).expect("valid gamma"))
            } else {
                None
            });
        }
        self.class_map
            .values()
            .iter()
            .map(|&c| match &samplers[c as usize] {
                Some(g) => g.sample(&mut rng),
                None => 1.0,
            })
            .collect()
    }
}

/// Geometrically spaced class means in [0.05, 1.0]. With three or more
/// classes the last class swaps rank across the year: it matches the
/// brightest other class in winter and spring and a dark class in summer
/// and autumn, so no single season separates every class.
pub fn default_class_params(n_classes: usize, texture_scale: f64) -> Vec<ClassParams> {
    let geometric = |k: usize, n: usize| -> f64 {
        if n <= 1 {
            1.0
        } else {
            0.05 * 20f64.powf(k as f64 / (n - 1) as f64)
        }
    };
    if n_classes < 3 {
        return (0..n_classes)
            .map(|k| ClassParams {
                mean_backscatter: [geometric(k, n_classes); 4],
                texture_scale,
            })
            .collect();
    }
    let steady = n_classes - 1;
    let mut params: Vec<ClassParams> = (0..steady)
        .map(|k| ClassParams {
            mean_backscatter: [geometric(k, steady); 4],
            texture_scale,
        })
        .collect();
    let bright = geometric(steady - 1, steady);
    let dark = geometric(if steady >= 3 { 1 } else { 0 }, steady);
    params.push(ClassParams {
        mean_backscatter: [bright, bright, dark, dark],
        texture_scale,
    });
    params
}

/// Voronoi class map with roughly one site per 48x48 pixels.
pub fn generate_class_map(seed: u64, width: usize, height: usize, n_classes: usize) -> Result<RasterGrid> {
    let sites = n_classes.max((width * height).div_ceil(48 * 48));
    generate_class_map_with_sites(seed, width, height, n_classes, sites)
}

/// Piecewise-constant map from `n_sites` Voronoi cells. The first
/// `n_classes` sites carry codes `0..n_classes` so every class occurs; the
/// rest draw a code uniformly. Distance ties go to the lower site index.
pub fn generate_class_map_with_sites(
    seed: u64,
    width: usize,
    height: usize,
    n_classes: usize,
    n_sites: usize,
) -> Result<RasterGrid> {
    if !(2..=MAX_CLASSES).contains(&n_classes) {
        return Err(Error::invalid(format!(
            "n_classes must be in 2..=9, got {n_classes}"
        )));
    }
    let n_sites = n_sites.max(n_classes);
    if width == 0 || height == 0 || n_sites > width * height {
        return Err(Error::invalid(format!(
            "{width}x{height} map cannot host {n_sites} distinct sites"
        )));
    }
    let mut rng = keyed_prng(&[seed, CLASS_MAP_STREAM]);
    let mut taken = std::collections::HashSet::new();
    let mut sites = Vec::with_capacity(n_sites);
    while sites.len() < n_sites {
        let pos = uniform_below(&mut rng, (width * height) as u64) as usize;
        if taken.insert(pos) {
            let code = if sites.len() < n_classes {
                sites.len()
            } else {
                uniform_below(&mut rng, n_classes as u64) as usize
            };
            sites.push(((pos / width) as i64, (pos % width) as i64, code));
        }
    }
    let mut values = Vec::with_capacity(width * height);
    for r in 0..height as i64 {
        for c in 0..width as i64 {
            let mut best = (i64::MAX, 0usize);
            for &(sr, sc, code) in &sites {
                let d = (sr - r) * (sr - r) + (sc - c) * (sc - c);
                if d < best.0 {
                    best = (d, code);
                }
            }
            values.push(best.1 as f32);
        }
    }
    RasterGrid::new(width as u32, height as u32, 1, values)
}

fn date_key(date: NaiveDate) -> u64 {
    date.num_days_from_ce() as u64
}

/// Renders one speckled scene per date. Each scene depends only on the
/// world seed and its own date.
pub fn generate_time_series(
    world: &SyntheticWorld,
    dates: &[NaiveDate],
) -> Result<Vec<(SceneMeta, RasterGrid)>> {
    if dates.is_empty() {
        return Err(Error::invalid("no acquisition dates given"));
    }
    let texture = world.texture();
    let speckle = Gamma::new(world.enl, 1.0 / world.enl)
        .map_err(|e| Error::invalid(format!("speckle distribution: {e}")))?;
    let scenes = dates
        .iter()
        .map(|&date| {
            let season = world.seasons.season_of(date);
            let mut rng = keyed_prng(&[world.seed, SCENE_STREAM, date_key(date), 0]);
            let values = world
                .class_map
                .values()
                .iter()
                .zip(&texture)
                .map(|(&c, &t)| {
                    let mean = world.class_params[c as usize].mean_backscatter[season.index()];
                    let s: f64 = speckle.sample(&mut rng);
                    (mean * t * s) as f32
                })
                .collect();
            (SceneMeta::new(date), world.class_map.like_single(values))
        })
        .collect();
    Ok(scenes)
}

/// `per_season[i]` acquisitions spread evenly through season `i` of `year`.
pub fn season_dates(defs: &SeasonDefinition, year: i32, per_season: [usize; 4]) -> Vec<NaiveDate> {
    let mut dates = Vec::new();
    for (season, &count) in Season::ALL.iter().zip(&per_season) {
        let (start, end) = defs.bounds(*season, year);
        let span = (end - start).num_days() + 1;
        for i in 0..count {
            let offset = ((2 * i as i64 + 1) * span) / (2 * count as i64);
            dates.push(start + chrono::Duration::days(offset));
        }
    }
    dates.sort();
    dates
}

#[cfg(test)]
mod tests {
    use super::*;

    fn homogeneous(size: usize, mean: f64, enl: f64, seed: u64) -> SyntheticWorld {
        let map = RasterGrid::filled(size as u32, size as u32, 1, 0.0).unwrap();
        let params = vec![ClassParams {
            mean_backscatter: [mean; 4],
            texture_scale: 0.0,
        }];
        SyntheticWorld::new(map, params, enl, seed).unwrap()
    }

    fn d(s: &str) -> NaiveDate {
        SceneMeta::parse_date(s).unwrap()
    }

    #[test]
    fn class_map_is_deterministic_and_complete() {
        let a = generate_class_map(1, 64, 64, 2).unwrap();
        let b = generate_class_map(1, 64, 64, 2).unwrap();
        assert!(a.bit_eq(&b));
        assert!(a.values().contains(&0.0) && a.values().contains(&1.0));
        let c = generate_class_map(2, 64, 64, 2).unwrap();
        assert!(a.values().iter().zip(c.values()).any(|(x, y)| x != y));
    }

    #[test]
    fn class_count_bounds() {
        assert!(generate_class_map(1, 64, 64, 1).is_err());
        assert!(generate_class_map(1, 64, 64, 10).is_err());
        let m = generate_class_map(5, 32, 32, 9).unwrap();
        for code in 0..9 {
            assert!(m.values().contains(&(code as f32)));
        }
    }

    #[test]
    fn vanishing_speckle_reproduces_means() {
        let w = homogeneous(16, 0.3, 1e6, 4);
        let scenes = generate_time_series(&w, &[d("2021-05-01")]).unwrap();
        for &v in scenes[0].1.values() {
            assert!((v as f64 - 0.3).abs() < 0.003, "{v}");
        }
    }

    #[test]
    fn single_look_cv_is_one() {
        let w = homogeneous(128, 0.2, 1.0, 9);
        let scenes = generate_time_series(&w, &[d("2021-02-10")]).unwrap();
        let v: Vec<f64> = scenes[0].1.values().iter().map(|&x| x as f64).collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let cv = var.sqrt() / mean;
        assert!((0.9..=1.1).contains(&cv), "cv {cv}");
    }

    #[test]
    fn same_seed_and_date_regenerate() {
        let w = homogeneous(32, 0.5, 4.0, 11);
        let a = generate_time_series(&w, &[d("2021-03-01"), d("2021-08-01")]).unwrap();
        let b = generate_time_series(&w, &[d("2021-08-01")]).unwrap();
        assert!(a[1].1.bit_eq(&b[0].1));
        assert!(!a[0].1.bit_eq(&a[1].1));
    }

    #[test]
    fn monte_carlo_mean_matches_class_mean() {
        let mean = 0.4;
        let w = homogeneous(64, mean, 2.0, 21);
        let s = generate_time_series(&w, &[d("2021-07-15")]).unwrap();
        let v: Vec<f64> = s[0].1.values().iter().map(|&x| x as f64).collect();
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        // std of one pixel is mean/sqrt(L)
        let se = mean / 2f64.sqrt() / n.sqrt();
        assert!((m - mean).abs() < 3.0 * se, "{m} vs {mean} (se {se})");
    }

    #[test]
    fn default_params_swap_one_class() {
        let p = default_class_params(5, 0.0);
        assert_eq!(p.len(), 5);
        assert!((p[0].mean_backscatter[0] - 0.05).abs() < 1e-12);
        assert!((p[3].mean_backscatter[0] - 1.0).abs() < 1e-12);
        let swap = &p[4].mean_backscatter;
        assert_eq!(swap[Season::Winter.index()], p[3].mean_backscatter[0]);
        assert_eq!(swap[Season::Summer.index()], p[1].mean_backscatter[0]);
        for k in 0..4 {
            for s in 0..4 {
                assert!(p[k].mean_backscatter[s] > 0.0);
            }
        }
    }

    #[test]
    fn world_rejects_missing_class() {
        let map = RasterGrid::new(2, 1, 1, vec![0.0, 3.0]).unwrap();
        let params = default_class_params(2, 0.0);
        assert!(SyntheticWorld::new(map, params, 4.0, 1).is_err());
    }

    #[test]
    fn season_dates_fall_in_their_season() {
        let defs = SeasonDefinition::default();
        let dates = season_dates(&defs, 2021, [3, 1, 0, 2]);
        assert_eq!(dates.len(), 6);
        let counts = Season::ALL.map(|s| dates.iter().filter(|&&x| defs.season_of(x) == s).count());
        assert_eq!(counts, [3, 1, 0, 2]);
    }
}
