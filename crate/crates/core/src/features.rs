//! Seasonal clustering and the 5x5 spatial filter bank that turns four
//! seasonal stacks into a 28-band feature cube.

use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::despeckle::{lee_filter, multitemporal_despeckle, super_image, LeeParams, NoiseCv, SeasonalStack};
use crate::dataset::NormStats;
use crate::error::{Error, Result};
use crate::neighborhood::{gather_window, mean_var};
use crate::raster::{assert_aligned, RasterGrid, SceneMeta};

pub const KERNEL: usize = 5;
pub const FEATURES_PER_SEASON: usize = 7;
pub const CUBE_BANDS: usize = 4 * FEATURES_PER_SEASON;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Season {
    Winter,
    Spring,
    Summer,
    Autumn,
}

impl Season {
    pub const ALL: [Season; 4] = [Season::Winter, Season::Spring, Season::Summer, Season::Autumn];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Season::Winter => "winter",
            Season::Spring => "spring",
            Season::Summer => "summer",
            Season::Autumn => "autumn",
        }
    }
}

impl fmt::Display for Season {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Season {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Season::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown season {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct MonthDay {
    pub month: u32,
    pub day: u32,
}

impl MonthDay {
    pub const fn new(month: u32, day: u32) -> Self {
        Self { month, day }
    }

    fn of(date: NaiveDate) -> Self {
        Self::new(date.month(), date.day())
    }
}

impl FromStr for MonthDay {
    type Err = Error;

    /// Accepts `MM-DD` or `MM.DD`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("bad month-day {s:?}, expected MM-DD"));
        let (m, d) = s.split_once(['-', '.']).ok_or_else(bad)?;
        let md = MonthDay::new(m.parse().map_err(|_| bad())?, d.parse().map_err(|_| bad())?);
        // 2024 is a leap year, so 02-29 is accepted
        NaiveDate::from_ymd_opt(2024, md.month, md.day).ok_or_else(bad)?;
        Ok(md)
    }
}

impl fmt::Display for MonthDay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02}-{:02}", self.month, self.day)
    }
}

impl Serialize for MonthDay {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MonthDay {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Inclusive month-day ranges per season. A range whose start is later
/// than its end wraps over the new year.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeasonDefinition {
    pub winter: (MonthDay, MonthDay),
    pub spring: (MonthDay, MonthDay),
    pub summer: (MonthDay, MonthDay),
    pub autumn: (MonthDay, MonthDay),
}

impl Default for SeasonDefinition {
    fn default() -> Self {
        Self {
            winter: (MonthDay::new(1, 1), MonthDay::new(3, 31)),
            spring: (MonthDay::new(4, 1), MonthDay::new(6, 30)),
            summer: (MonthDay::new(7, 1), MonthDay::new(9, 30)),
            autumn: (MonthDay::new(10, 1), MonthDay::new(12, 31)),
        }
    }
}

impl SeasonDefinition {
    pub fn range(&self, season: Season) -> (MonthDay, MonthDay) {
        match season {
            Season::Winter => self.winter,
            Season::Spring => self.spring,
            Season::Summer => self.summer,
            Season::Autumn => self.autumn,
        }
    }

    fn contains(&self, season: Season, md: MonthDay) -> bool {
        let (start, end) = self.range(season);
        if start <= end {
            start <= md && md <= end
        } else {
            md >= start || md <= end
        }
    }

    /// Every calendar day (leap day included) must belong to exactly one season.
    pub fn validate(&self) -> Result<()> {
        let mut day = NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date");
        while day.year() == 2024 {
            let md = MonthDay::of(day);
            let hits = Season::ALL.iter().filter(|&&s| self.contains(s, md)).count();
            if hits != 1 {
                return Err(Error::invalid(format!(
                    "season ranges do not partition the year: {md} is covered {hits} times"
                )));
            }
            day = day.succ_opt().expect("date in range");
        }
        Ok(())
    }

    pub fn season_of(&self, date: NaiveDate) -> Season {
        let md = MonthDay::of(date);
        Season::ALL
            .into_iter()
            .find(|&s| self.contains(s, md))
            .unwrap_or(Season::Winter)
    }

    /// First and last calendar day of `season` starting in `year`.
    pub fn bounds(&self, season: Season, year: i32) -> (NaiveDate, NaiveDate) {
        let (start, end) = self.range(season);
        let clamp = |y: i32, md: MonthDay| {
            NaiveDate::from_ymd_opt(y, md.month, md.day)
                .or_else(|| NaiveDate::from_ymd_opt(y, md.month, md.day - 1))
                .expect("valid month-day")
        };
        let end_year = if start <= end { year } else { year + 1 };
        (clamp(year, start), clamp(end_year, end))
    }
}

/// The four seasonal stacks of a scene list, plus the seasons that came
/// out empty.
#[derive(Clone, Debug)]
pub struct SeasonClusters {
    pub stacks: [SeasonalStack; 4],
    pub empty: Vec<Season>,
}

/// Assigns every scene to the season containing its acquisition date.
/// Scenes keep their input order within a season.
pub fn cluster_by_season(
    scenes: &[(SceneMeta, RasterGrid)],
    defs: &SeasonDefinition,
) -> Result<SeasonClusters> {
    if !scenes.is_empty() {
        let grids: Vec<RasterGrid> = scenes.iter().map(|(_, g)| g.clone()).collect();
        assert_aligned(&grids)?;
    }
    let mut stacks = Season::ALL.map(|s| SeasonalStack::new(s, Vec::new()));
    for (meta, grid) in scenes {
        let s = defs.season_of(meta.acquisition_date);
        stacks[s.index()].scenes.push((meta.clone(), grid.clone()));
    }
    let empty = stacks.iter().filter(|s| s.is_empty()).map(|s| s.season).collect();
    Ok(SeasonClusters { stacks, empty })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Lee,
    Median,
    Mean,
    Max,
    Min,
    Range,
}

impl FilterKind {
    pub const ALL: [FilterKind; 6] = [
        FilterKind::Lee,
        FilterKind::Median,
        FilterKind::Mean,
        FilterKind::Max,
        FilterKind::Min,
        FilterKind::Range,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FilterKind::Lee => "lee",
            FilterKind::Median => "median",
            FilterKind::Mean => "mean",
            FilterKind::Max => "max",
            FilterKind::Min => "min",
            FilterKind::Range => "range",
        }
    }
}

/// Per-season channel names, in cube order.
pub const FEATURE_NAMES: [&str; FEATURES_PER_SEASON] =
    ["super", "lee", "median", "mean", "max", "min", "range"];

pub fn band_index(season: Season, feature: usize) -> usize {
    season.index() * FEATURES_PER_SEASON + feature
}

pub fn band_name(band: usize) -> String {
    format!(
        "{}_{}",
        Season::ALL[band / FEATURES_PER_SEASON],
        FEATURE_NAMES[band % FEATURES_PER_SEASON]
    )
}

/// 5x5 windowed statistic over valid neighbours in the clipped window.
/// Nodata centres stay nodata. Even-sized neighbourhoods (borders, holes)
/// take the lower median.
pub fn spatial_filter(grid: &RasterGrid, kind: FilterKind) -> Result<RasterGrid> {
    if grid.bands() != 1 {
        return Err(Error::Shape(format!(
            "spatial filter needs a single-band grid, got {} bands",
            grid.bands()
        )));
    }
    if kind == FilterKind::Lee {
        return lee_filter(
            grid,
            &LeeParams {
                window: KERNEL,
                noise_cv: NoiseCv::Auto,
            },
        );
    }
    let (w, h) = (grid.width(), grid.height());
    let band = grid.band(0);
    let nodata = grid.nodata();
    let mut buf = Vec::with_capacity(KERNEL * KERNEL);
    let mut out = Vec::with_capacity(band.len());
    for r in 0..h {
        for c in 0..w {
            if grid.is_nodata(band[r * w + c]) {
                out.push(nodata);
                continue;
            }
            gather_window(band, w, h, r, c, KERNEL, nodata, &mut buf);
            let v = match kind {
                FilterKind::Mean => mean_var(&buf).0 as f32,
                FilterKind::Max => buf.iter().copied().fold(f32::NEG_INFINITY, f32::max),
                FilterKind::Min => buf.iter().copied().fold(f32::INFINITY, f32::min),
                FilterKind::Range => {
                    let hi = buf.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let lo = buf.iter().copied().fold(f32::INFINITY, f32::min);
                    hi - lo
                }
                FilterKind::Median => {
                    let mid = (buf.len() - 1) / 2;
                    *buf.select_nth_unstable_by(mid, f32::total_cmp).1
                }
                FilterKind::Lee => unreachable!(),
            };
            out.push(v);
        }
    }
    Ok(grid.like_single(out))
}

/// A 28-band cube: seasons winter..autumn, each with channels
/// super, lee, median, mean, max, min, range.
#[derive(Clone, Debug)]
pub struct FeatureCube {
    grid: RasterGrid,
    norm_stats: Option<NormStats>,
    /// `true` where the pixel was masked as no-data.
    mask: Option<Vec<bool>>,
}

impl FeatureCube {
    pub fn new(grid: RasterGrid) -> Result<Self> {
        if grid.bands() != CUBE_BANDS {
            return Err(Error::Shape(format!(
                "feature cube needs {CUBE_BANDS} bands, got {}",
                grid.bands()
            )));
        }
        Ok(Self {
            grid,
            norm_stats: None,
            mask: None,
        })
    }

    pub fn with_norm_stats(mut self, stats: NormStats) -> Self {
        self.norm_stats = Some(stats);
        self
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), self.grid.pixels());
        self.mask = Some(mask);
        self
    }

    pub fn norm_stats(&self) -> Option<&NormStats> {
        self.norm_stats.as_ref()
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn grid(&self) -> &RasterGrid {
        &self.grid
    }

    pub fn into_grid(self) -> RasterGrid {
        self.grid
    }

    pub fn band(&self, season: Season, feature: usize) -> &[f32] {
        self.grid.band(band_index(season, feature))
    }
}

/// Despeckles a season, recomputes its super image and applies the bank.
/// The seven bands of one season: `despeckle` drives the ratio filter and
/// `lee_band` the Lee feature.
pub fn season_features(
    stack: &SeasonalStack,
    despeckle: &LeeParams,
    lee_band: &LeeParams,
) -> Result<[RasterGrid; FEATURES_PER_SEASON]> {
    let restored = multitemporal_despeckle(stack, despeckle)?;
    let restored_stack = SeasonalStack::new(
        stack.season,
        stack
            .scenes
            .iter()
            .zip(restored)
            .map(|((m, _), g)| (m.clone(), g))
            .collect(),
    );
    let sup = super_image(&restored_stack)?;
    let lee = lee_filter(&sup, lee_band)?;
    let median = spatial_filter(&sup, FilterKind::Median)?;
    let mean = spatial_filter(&sup, FilterKind::Mean)?;
    let max = spatial_filter(&sup, FilterKind::Max)?;
    let min = spatial_filter(&sup, FilterKind::Min)?;
    let nodata = sup.nodata();
    let range = max
        .values()
        .iter()
        .zip(min.values())
        .map(|(&hi, &lo)| if max.is_nodata(hi) { nodata } else { hi - lo })
        .collect();
    let range = sup.like_single(range);
    Ok([sup, lee, median, mean, max, min, range])
}

/// Builds the cube from four aligned stacks. Empty seasons contribute
/// seven nodata bands; all four empty is an error.
pub fn build_feature_cube(
    stacks: &[SeasonalStack; 4],
    despeckle: &LeeParams,
    lee_band: &LeeParams,
) -> Result<FeatureCube> {
    let template = stacks
        .iter()
        .find_map(|s| s.scenes.first().map(|(_, g)| g.clone()))
        .ok_or_else(|| Error::invalid("all four seasons are empty"))?;
    let all: Vec<RasterGrid> = stacks
        .iter()
        .flat_map(|s| s.scenes.iter().map(|(_, g)| g.clone()))
        .collect();
    assert_aligned(&all)?;
    for (i, s) in stacks.iter().enumerate() {
        if s.season != Season::ALL[i] {
            return Err(Error::invalid(format!(
                "stack {i} holds {} scenes, expected {}",
                s.season,
                Season::ALL[i]
            )));
        }
    }
    let mut bands = Vec::with_capacity(CUBE_BANDS);
    for stack in stacks {
        if stack.is_empty() {
            let blank = template.like_single(vec![template.nodata(); template.pixels()]);
            bands.extend(std::iter::repeat_n(blank, FEATURES_PER_SEASON));
        } else {
            bands.extend(season_features(stack, despeckle, lee_band)?);
        }
    }
    FeatureCube::new(RasterGrid::stack(&bands)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{season_dates, ClassParams, SyntheticWorld};

    fn d(s: &str) -> NaiveDate {
        SceneMeta::parse_date(s).unwrap()
    }

    #[test]
    fn default_seasons_partition_the_year() {
        let defs = SeasonDefinition::default();
        defs.validate().unwrap();
        assert_eq!(defs.season_of(d("2021-03-31")), Season::Winter);
        assert_eq!(defs.season_of(d("2021-04-01")), Season::Spring);
        assert_eq!(defs.season_of(d("2021-09-30")), Season::Summer);
        assert_eq!(defs.season_of(d("2021-12-31")), Season::Autumn);
    }

    #[test]
    fn overlapping_seasons_are_rejected() {
        let mut defs = SeasonDefinition::default();
        defs.spring.0 = MonthDay::new(3, 15);
        assert!(defs.validate().is_err());
    }

    #[test]
    fn wrapping_winter() {
        let defs: SeasonDefinition = serde_json::from_str(
            r#"{"winter":["12-01","02-29"],"spring":["03-01","05-31"],
                "summer":["06-01","08-31"],"autumn":["09-01","11-30"]}"#,
        )
        .unwrap();
        defs.validate().unwrap();
        assert_eq!(defs.season_of(d("2021-12-25")), Season::Winter);
        assert_eq!(defs.season_of(d("2021-01-25")), Season::Winter);
        let (a, b) = defs.bounds(Season::Winter, 2021);
        assert_eq!((a, b), (d("2021-12-01"), d("2022-02-28")));
    }

    #[test]
    fn one_scene_per_season() {
        let g = RasterGrid::filled(4, 4, 1, 1.0).unwrap();
        let scenes: Vec<_> = ["2021-02-01", "2021-05-01", "2021-08-01", "2021-11-01"]
            .iter()
            .map(|s| (SceneMeta::new(d(s)), g.clone()))
            .collect();
        let c = cluster_by_season(&scenes, &SeasonDefinition::default()).unwrap();
        assert!(c.empty.is_empty());
        assert!(c.stacks.iter().all(|s| s.len() == 1));
        let c = cluster_by_season(&scenes[..1], &SeasonDefinition::default()).unwrap();
        assert_eq!(c.empty, vec![Season::Spring, Season::Summer, Season::Autumn]);
    }

    #[test]
    fn amazonia_season_counts_sum() {
        assert_eq!([1264u32, 1310, 1338, 1193].iter().sum::<u32>(), 5105);
    }

    #[test]
    fn flat_field_filters() {
        let g = RasterGrid::filled(7, 6, 1, 2.5).unwrap();
        for kind in FilterKind::ALL {
            let out = spatial_filter(&g, kind).unwrap();
            let want = if kind == FilterKind::Range { 0.0 } else { 2.5 };
            assert!(out.values().iter().all(|&v| v == want), "{kind:?}");
        }
    }

    #[test]
    fn bright_pixel_dilation_and_erosion() {
        let (w, h) = (11usize, 9usize);
        let mut v = vec![0f32; w * h];
        v[4 * w + 5] = 9.0;
        let g = RasterGrid::new(w as u32, h as u32, 1, v).unwrap();
        let max = spatial_filter(&g, FilterKind::Max).unwrap();
        let min = spatial_filter(&g, FilterKind::Min).unwrap();
        let med = spatial_filter(&g, FilterKind::Median).unwrap();
        for r in 0..h {
            for c in 0..w {
                let near = r.abs_diff(4) <= 2 && c.abs_diff(5) <= 2;
                assert_eq!(max.get(0, r, c), if near { 9.0 } else { 0.0 });
                assert_eq!(min.get(0, r, c), 0.0);
                assert_eq!(med.get(0, r, c), 0.0);
            }
        }
    }

    #[test]
    fn filters_reject_multiband() {
        let g = RasterGrid::filled(4, 4, 2, 1.0).unwrap();
        assert!(spatial_filter(&g, FilterKind::Mean).is_err());
    }

    #[test]
    fn nodata_centre_stays_nodata() {
        let mut v = vec![1.0f32; 25];
        v[6] = f32::NAN;
        v[7] = 5.0;
        let g = RasterGrid::new(5, 5, 1, v).unwrap();
        for kind in FilterKind::ALL {
            let out = spatial_filter(&g, kind).unwrap();
            assert!(out.values()[6].is_nan(), "{kind:?}");
            assert!(!out.values()[7].is_nan());
        }
        let max = spatial_filter(&g, FilterKind::Max).unwrap();
        assert_eq!(max.values()[0], 5.0);
    }

    #[test]
    fn noiseless_world_gives_constant_cube() {
        let map = RasterGrid::filled(16, 16, 1, 0.0).unwrap();
        let params = vec![ClassParams {
            mean_backscatter: [0.1, 0.2, 0.3, 0.4],
            texture_scale: 0.0,
        }];
        let world = SyntheticWorld::new(map, params, 1.0, 3).unwrap();
        let dates = season_dates(&world.seasons, 2021, [2, 2, 2, 2]);
        let scenes: Vec<_> = dates
            .iter()
            .map(|&t| (SceneMeta::new(t), world.noiseless(world.seasons.season_of(t))))
            .collect();
        let clusters = cluster_by_season(&scenes, &world.seasons).unwrap();
        let cube = build_feature_cube(&clusters.stacks, &LeeParams::ratio_default(None), &LeeParams::default()).unwrap();
        assert_eq!(cube.grid().bands(), 28);
        for b in 0..28 {
            let band = cube.grid().band(b);
            assert!(band.iter().all(|&v| v == band[0]), "{}", band_name(b));
            if b % 7 == 6 {
                assert!(band.iter().all(|&v| v == 0.0));
            }
        }
        let want = [0.1f32, 0.2, 0.3, 0.4];
        for s in Season::ALL {
            assert!((cube.band(s, 0)[0] - want[s.index()]).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_season_bands_are_nodata() {
        let g = RasterGrid::filled(8, 8, 1, 0.5).unwrap();
        let scenes = vec![(SceneMeta::new(d("2021-05-05")), g)];
        let c = cluster_by_season(&scenes, &SeasonDefinition::default()).unwrap();
        let cube = build_feature_cube(&c.stacks, &LeeParams::ratio_default(Some(4.0)), &LeeParams::default()).unwrap();
        for b in 0..28 {
            let spring = b / 7 == Season::Spring.index();
            assert_eq!(cube.grid().band(b).iter().all(|v| v.is_nan()), !spring);
        }
        let none = Season::ALL.map(|s| SeasonalStack::new(s, vec![]));
        assert!(build_feature_cube(&none, &LeeParams::default(), &LeeParams::default()).is_err());
    }

    #[test]
    fn band_names_follow_cube_order() {
        assert_eq!(band_name(0), "winter_super");
        assert_eq!(band_name(13), "spring_range");
        assert_eq!(band_name(27), "autumn_range");
    }
}
