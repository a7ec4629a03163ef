//! Seasonal super images and ratio-based multitemporal despeckling.
//!
//! The super image is the temporal mean of a season's scenes. Each scene
//! is divided by it, the ratio is Lee-filtered, and the filtered ratio is
//! multiplied back onto the super image.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::features::{Season, SeasonDefinition};
use crate::neighborhood::{clipped_len, gather_window, mean_var};
use crate::raster::{assert_aligned, RasterGrid, SceneMeta};

/// Division guard for ratios and variances.
pub const EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct SeasonalStack {
    pub season: Season,
    pub scenes: Vec<(SceneMeta, RasterGrid)>,
}

impl SeasonalStack {
    pub fn new(season: Season, scenes: Vec<(SceneMeta, RasterGrid)>) -> Self {
        Self { season, scenes }
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Checks the stack is non-empty, single-band, aligned, and that every
    /// date lies in the stack's season.
    pub fn validate(&self, defs: &SeasonDefinition) -> Result<()> {
        if self.is_empty() {
            return Err(Error::invalid(format!("{} stack is empty", self.season)));
        }
        let grids: Vec<RasterGrid> = self.scenes.iter().map(|(_, g)| g.clone()).collect();
        assert_aligned(&grids)?;
        for (meta, g) in &self.scenes {
            if g.bands() != 1 {
                return Err(Error::Shape(format!(
                    "scene {} has {} bands, expected 1",
                    meta.acquisition_date,
                    g.bands()
                )));
            }
            if defs.season_of(meta.acquisition_date) != self.season {
                return Err(Error::invalid(format!(
                    "scene {} does not fall in {}",
                    meta.acquisition_date, self.season
                )));
            }
        }
        Ok(())
    }

    fn check_shape(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::invalid(format!("{} stack is empty", self.season)));
        }
        let grids: Vec<RasterGrid> = self.scenes.iter().map(|(_, g)| g.clone()).collect();
        assert_aligned(&grids)?;
        if let Some((m, g)) = self.scenes.iter().find(|(_, g)| g.bands() != 1) {
            return Err(Error::Shape(format!(
                "scene {} has {} bands, expected 1",
                m.acquisition_date,
                g.bands()
            )));
        }
        Ok(())
    }
}

/// Multiplicative noise level used by the Lee filter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseCv {
    Fixed(f64),
    /// Estimated from the image as the median local coefficient of variation.
    Auto,
}

impl NoiseCv {
    /// `1/sqrt(L)` for an L-look intensity image.
    pub fn from_enl(enl: f64) -> Self {
        NoiseCv::Fixed(1.0 / enl.sqrt())
    }
}

impl fmt::Display for NoiseCv {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseCv::Fixed(v) => write!(f, "{v}"),
            NoiseCv::Auto => f.write_str("auto"),
        }
    }
}

impl FromStr for NoiseCv {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(NoiseCv::Auto);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| Error::invalid(format!("noise cv must be a number or 'auto', got {s:?}")))?;
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::invalid(format!("noise cv must be positive, got {v}")));
        }
        Ok(NoiseCv::Fixed(v))
    }
}

impl Serialize for NoiseCv {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            NoiseCv::Fixed(v) => s.serialize_f64(*v),
            NoiseCv::Auto => s.serialize_str("auto"),
        }
    }
}

impl<'de> Deserialize<'de> for NoiseCv {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) if v > 0.0 => Ok(NoiseCv::Fixed(v)),
            Raw::Num(v) => Err(serde::de::Error::custom(format!("noise cv must be positive, got {v}"))),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeeParams {
    pub window: usize,
    pub noise_cv: NoiseCv,
}

impl Default for LeeParams {
    fn default() -> Self {
        Self {
            window: 5,
            noise_cv: NoiseCv::Auto,
        }
    }
}

impl LeeParams {
    /// Settings for the ratio-image filter inside multitemporal despeckling.
    pub fn ratio_default(enl: Option<f64>) -> Self {
        Self {
            window: 7,
            noise_cv: enl.map_or(NoiseCv::Auto, NoiseCv::from_enl),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::invalid(format!(
                "Lee window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if let NoiseCv::Fixed(v) = self.noise_cv {
            if !(v > 0.0) {
                return Err(Error::invalid(format!("noise cv must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-pixel mean over the scenes where the pixel is valid; nodata only
/// where every scene is nodata.
pub fn super_image(stack: &SeasonalStack) -> Result<RasterGrid> {
    stack.check_shape()?;
    let first = &stack.scenes[0].1;
    let n = first.pixels();
    let mut sum = vec![0f64; n];
    let mut count = vec![0u32; n];
    for (_, g) in &stack.scenes {
        for (i, &v) in g.values().iter().enumerate() {
            if !g.is_nodata(v) {
                sum[i] += v as f64;
                count[i] += 1;
            }
        }
    }
    let nodata = first.nodata();
    let values = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| if c == 0 { nodata } else { (s / c as f64) as f32 })
        .collect();
    Ok(first.like_single(values))
}

/// Median local coefficient of variation over windows at least half valid.
pub fn estimate_noise_cv(grid: &RasterGrid, window: usize) -> f64 {
    let (w, h) = (grid.width(), grid.height());
    let band = grid.band(0);
    let mut buf = Vec::with_capacity(window * window);
    let mut cvs = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if grid.is_nodata(band[r * w + c]) {
                continue;
            }
            gather_window(band, w, h, r, c, window, grid.nodata(), &mut buf);
            if 2 * buf.len() < clipped_len(w, h, r, c, window) {
                continue;
            }
            let (mean, var) = mean_var(&buf);
            if mean > EPS {
                cvs.push(var.sqrt() / mean);
            }
        }
    }
    if cvs.is_empty() {
        return 0.0;
    }
    cvs.sort_by(f64::total_cmp);
    let m = cvs.len();
    if m % 2 == 1 {
        cvs[m / 2]
    } else {
        0.5 * (cvs[m / 2 - 1] + cvs[m / 2])
    }
}

/// Adaptive Lee filter over clipped windows of valid neighbours:
/// `out = mean + K (x - mean)` with
/// `K = clamp(max(0, var - (cv*mean)^2) / max(var, eps), 0, 1)`.
pub fn lee_filter(grid: &RasterGrid, params: &LeeParams) -> Result<RasterGrid> {
    if grid.bands() != 1 {
        return Err(Error::Shape(format!(
            "Lee filter needs a single-band grid, got {} bands",
            grid.bands()
        )));
    }
    params.validate()?;
    let cv = match params.noise_cv {
        NoiseCv::Fixed(v) => v,
        NoiseCv::Auto => estimate_noise_cv(grid, params.window),
    };
    let (w, h) = (grid.width(), grid.height());
    let band = grid.band(0);
    let nodata = grid.nodata();
    let mut buf = Vec::with_capacity(params.window * params.window);
    let mut out = Vec::with_capacity(band.len());
    for r in 0..h {
        for c in 0..w {
            let x = band[r * w + c];
            if grid.is_nodata(x) {
                out.push(nodata);
                continue;
            }
            gather_window(band, w, h, r, c, params.window, nodata, &mut buf);
            let (mean, var) = mean_var(&buf);
            out.push(lee_pixel(x as f64, mean, var, cv) as f32);
        }
    }
    Ok(grid.like_single(out))
}

#[inline]
pub(crate) fn lee_pixel(x: f64, mean: f64, var: f64, cv: f64) -> f64 {
    let noise_var = (cv * mean) * (cv * mean);
    let k = ((var - noise_var).max(0.0) / var.max(EPS)).clamp(0.0, 1.0);
    mean + k * (x - mean)
}

/// Ratio-based multitemporal despeckling; returns one restored image per
/// scene, in scene order.
pub fn multitemporal_despeckle(stack: &SeasonalStack, params: &LeeParams) -> Result<Vec<RasterGrid>> {
    params.validate()?;
    let sup = super_image(stack)?;
    let sup_band = sup.band(0);
    stack
        .scenes
        .iter()
        .map(|(_, scene)| {
            let band = scene.band(0);
            let nodata = scene.nodata();
            let ratio: Vec<f32> = band
                .iter()
                .zip(sup_band)
                .map(|(&x, &u)| {
                    if scene.is_nodata(x) {
                        nodata
                    } else if sup.is_nodata(u) || (u as f64) <= EPS {
                        1.0
                    } else {
                        (x as f64 / u as f64) as f32
                    }
                })
                .collect();
            let filtered = lee_filter(&scene.like_single(ratio), params)?;
            let restored = filtered
                .band(0)
                .iter()
                .zip(sup_band)
                .map(|(&rho, &u)| {
                    if filtered.is_nodata(rho) || sup.is_nodata(u) {
                        nodata
                    } else {
                        (rho as f64 * u as f64) as f32
                    }
                })
                .collect();
            Ok(scene.like_single(restored))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_time_series, season_dates, ClassParams, SyntheticWorld};

    fn stack_of(values: &[Vec<f32>], w: u32, h: u32) -> SeasonalStack {
        let scenes = values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let date = chrono::NaiveDate::from_ymd_opt(2021, 1, 1 + i as u32).unwrap();
                (SceneMeta::new(date), RasterGrid::new(w, h, 1, v.clone()).unwrap())
            })
            .collect();
        SeasonalStack::new(Season::Winter, scenes)
    }

    fn homogeneous_stack(size: u32, enl: f64, scenes: usize, seed: u64) -> SeasonalStack {
        let map = RasterGrid::filled(size, size, 1, 0.0).unwrap();
        let params = vec![ClassParams {
            mean_backscatter: [0.25; 4],
            texture_scale: 0.0,
        }];
        let world = SyntheticWorld::new(map, params, enl, seed).unwrap();
        let dates = season_dates(&world.seasons, 2021, [scenes, 0, 0, 0]);
        SeasonalStack::new(Season::Winter, generate_time_series(&world, &dates).unwrap())
    }

    fn cv2(v: &[f32]) -> f64 {
        let (m, var) = mean_var(v);
        var / (m * m)
    }

    #[test]
    fn super_image_of_one_scene_is_identity() {
        let s = stack_of(&[vec![1.0, 2.0, 3.0, 4.0]], 2, 2);
        assert!(super_image(&s).unwrap().bit_eq(&s.scenes[0].1));
    }

    #[test]
    fn super_image_mean_and_nodata() {
        let s = stack_of(&[vec![1.0, f32::NAN], vec![3.0, f32::NAN]], 2, 1);
        let u = super_image(&s).unwrap();
        assert_eq!(u.values()[0], 2.0);
        assert!(u.values()[1].is_nan());
        let s = stack_of(&[vec![1.0, f32::NAN], vec![3.0, 5.0]], 2, 1);
        assert_eq!(super_image(&s).unwrap().values(), &[2.0, 5.0]);
    }

    #[test]
    fn empty_stack_is_an_error() {
        let s = SeasonalStack::new(Season::Spring, vec![]);
        assert!(super_image(&s).is_err());
        assert!(multitemporal_despeckle(&s, &LeeParams::default()).is_err());
    }

    #[test]
    fn super_image_speckle_variance() {
        let s = homogeneous_stack(128, 4.0, 20, 5);
        let u = super_image(&s).unwrap();
        let target = 1.0 / (20.0 * 4.0);
        let got = cv2(u.values());
        assert!((got - target).abs() <= 0.25 * target, "cv2 {got} vs {target}");
    }

    #[test]
    fn lee_flat_field() {
        let g = RasterGrid::filled(9, 9, 1, 3.5).unwrap();
        let out = lee_filter(&g, &LeeParams::default()).unwrap();
        assert!(out.values().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn lee_without_noise_is_identity() {
        let vals: Vec<f32> = (0..100).map(|i| ((i * 37) % 17) as f32 + 1.0).collect();
        let g = RasterGrid::new(10, 10, 1, vals.clone()).unwrap();
        let p = LeeParams {
            window: 5,
            noise_cv: NoiseCv::Fixed(1e-9),
        };
        let out = lee_filter(&g, &p).unwrap();
        for (a, b) in out.values().iter().zip(&vals) {
            assert!((a - b).abs() <= 1e-5 * b.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn lee_reduces_speckle_variance() {
        let s = homogeneous_stack(128, 4.0, 1, 8);
        let g = &s.scenes[0].1;
        let p = LeeParams {
            window: 5,
            noise_cv: NoiseCv::from_enl(4.0),
        };
        let out = lee_filter(g, &p).unwrap();
        let (_, vin) = mean_var(g.values());
        let (_, vout) = mean_var(out.values());
        assert!(vout < 0.5 * vin, "{vout} vs {vin}");
    }

    #[test]
    fn lee_rejects_bad_input() {
        let g = RasterGrid::filled(4, 4, 2, 1.0).unwrap();
        assert!(lee_filter(&g, &LeeParams::default()).is_err());
        let g = RasterGrid::filled(4, 4, 1, 1.0).unwrap();
        let p = LeeParams {
            window: 4,
            noise_cv: NoiseCv::Auto,
        };
        assert!(lee_filter(&g, &p).is_err());
    }

    #[test]
    fn lee_keeps_nodata() {
        let mut v = vec![1.0f32; 25];
        v[12] = f32::NAN;
        let g = RasterGrid::new(5, 5, 1, v).unwrap();
        let out = lee_filter(&g, &LeeParams::default()).unwrap();
        assert!(out.values()[12].is_nan());
        assert_eq!(out.values()[0], 1.0);
    }

    #[test]
    fn identical_scenes_pass_through() {
        let v: Vec<f32> = (0..64).map(|i| 0.1 + (i % 7) as f32 * 0.05).collect();
        let s = stack_of(&[v.clone(), v.clone(), v.clone()], 8, 8);
        let out = multitemporal_despeckle(&s, &LeeParams::ratio_default(Some(4.0))).unwrap();
        for g in out {
            for (a, b) in g.values().iter().zip(&v) {
                assert!((a - b).abs() <= 1e-6 * b.abs());
            }
        }
    }

    #[test]
    fn despeckle_reduces_cv_and_keeps_mean() {
        let s = homogeneous_stack(64, 4.0, 10, 13);
        let out = multitemporal_despeckle(&s, &LeeParams::ratio_default(Some(4.0))).unwrap();
        let mut cv_in = 0.0;
        let mut cv_out = 0.0;
        for ((_, x), y) in s.scenes.iter().zip(&out) {
            cv_in += cv2(x.values()).sqrt();
            cv_out += cv2(y.values()).sqrt();
            let (mx, _) = mean_var(x.values());
            let (my, _) = mean_var(y.values());
            assert!((my - mx).abs() <= 0.05 * mx);
            assert!(y.values().iter().all(|&v| v >= 0.0));
        }
        assert!(cv_out < 0.6 * cv_in, "{cv_out} vs {cv_in}");
    }

    #[test]
    fn noise_cv_parsing() {
        assert_eq!("auto".parse::<NoiseCv>().unwrap(), NoiseCv::Auto);
        assert_eq!("0.5".parse::<NoiseCv>().unwrap(), NoiseCv::Fixed(0.5));
        assert!("-1".parse::<NoiseCv>().is_err());
        let p: LeeParams = serde_json::from_str(r#"{"window":7,"noise_cv":"auto"}"#).unwrap();
        assert_eq!(p.noise_cv, NoiseCv::Auto);
    }
}
