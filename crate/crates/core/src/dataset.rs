//! Labels, masking, normalisation, patching and train/test splitting.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureCube;
use crate::raster::{assert_aligned, RasterGrid};
use crate::rng::{permutation, prng};

pub const PATCH_SIZE: usize = 256;
pub const PATCH_STRIDE: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LegendEntry {
    pub external: u8,
    pub internal: Option<u8>,
    pub name: &'static str,
    pub color: &'static str,
}

/// MOLCA legend. Lichens/mosses and permanent ice carry no internal index.
pub const MOLCA_LEGEND: [LegendEntry; 11] = [
    LegendEntry { external: 0, internal: Some(0), name: "No data", color: "#000000" },
    LegendEntry { external: 20, internal: Some(1), name: "Forest", color: "#006400" },
    LegendEntry { external: 5, internal: Some(2), name: "Shrubland", color: "#966400" },
    LegendEntry { external: 7, internal: Some(3), name: "Grassland", color: "#ffb432" },
    LegendEntry { external: 8, internal: Some(4), name: "Cropland", color: "#ffff64" },
    LegendEntry { external: 9, internal: Some(5), name: "Wetland", color: "#1bcbae" },
    LegendEntry { external: 11, internal: None, name: "Lichens and mosses", color: "#ffdcd2" },
    LegendEntry { external: 12, internal: Some(6), name: "Bareland", color: "#9b969b" },
    LegendEntry { external: 13, internal: Some(7), name: "Built-up", color: "#c31400" },
    LegendEntry { external: 15, internal: Some(8), name: "Water", color: "#0046c8" },
    LegendEntry { external: 16, internal: None, name: "Permanent ice and snow", color: "#ffffff" },
];

#[derive(Clone, Copy, Debug, Default)]
pub struct LabelMap {
    /// Map legend classes without an internal index to no-data instead of
    /// rejecting them.
    pub allow_empty_classes: bool,
}

impl LabelMap {
    pub fn to_internal(&self, external: i64) -> Option<u8> {
        let entry = MOLCA_LEGEND.iter().find(|e| e.external as i64 == external)?;
        match entry.internal {
            Some(i) => Some(i),
            None if self.allow_empty_classes => Some(0),
            None => None,
        }
    }

    pub fn to_external(internal: u8) -> Option<u8> {
        MOLCA_LEGEND
            .iter()
            .find(|e| e.internal == Some(internal))
            .map(|e| e.external)
    }

    pub fn class_name(internal: u8) -> &'static str {
        MOLCA_LEGEND
            .iter()
            .find(|e| e.internal == Some(internal))
            .map_or("?", |e| e.name)
    }
}

/// External MOLCA codes to internal indices. NaN reads as no-data.
pub fn remap_labels(raw: &RasterGrid, map: &LabelMap) -> Result<RasterGrid> {
    if raw.bands() != 1 {
        return Err(Error::Shape("label raster must be single-band".into()));
    }
    let w = raw.width();
    let values = raw
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v.is_nan() {
                return Ok(0.0);
            }
            let code = v as i64;
            let mapped = if v.fract() == 0.0 { map.to_internal(code) } else { None };
            mapped.map(f32::from).ok_or(Error::UnknownLabel {
                code,
                row: i / w,
                col: i % w,
            })
        })
        .collect::<Result<Vec<f32>>>()?;
    Ok(raw.like_single(values).with_nodata(f32::NAN))
}

/// Internal indices back to MOLCA codes.
pub fn to_external_labels(internal: &RasterGrid) -> Result<RasterGrid> {
    let values = internal
        .values()
        .iter()
        .map(|&v| {
            LabelMap::to_external(v as u8)
                .filter(|_| v >= 0.0 && v.fract() == 0.0)
                .map(f32::from)
                .ok_or_else(|| Error::invalid(format!("internal class {v} has no MOLCA code")))
        })
        .collect::<Result<Vec<f32>>>()?;
    Ok(internal.like_single(values))
}

/// Internal class raster as bytes, validating the range 0..=8.
pub fn labels_as_u8(labels: &RasterGrid) -> Result<Vec<u8>> {
    labels
        .values()
        .iter()
        .map(|&v| {
            if (0.0..=8.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(Error::invalid(format!("label {v} is not an internal class index")))
            }
        })
        .collect()
}

/// Zeroes every band wherever the label is no-data (0).
pub fn mask_grid(grid: &RasterGrid, labels: &RasterGrid) -> Result<RasterGrid> {
    assert_aligned(&[grid.clone(), labels.clone()])
        .map_err(|e| Error::Shape(format!("features vs labels: {e}")))?;
    let lab = labels.band(0);
    let mut out = grid.clone();
    for b in 0..out.bands() {
        for (v, &l) in out.band_mut(b).iter_mut().zip(lab) {
            if l == 0.0 {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

pub fn mask_nodata(features: &FeatureCube, labels: &RasterGrid) -> Result<FeatureCube> {
    let grid = mask_grid(features.grid(), labels)?;
    let mask = labels.band(0).iter().map(|&l| l == 0.0).collect();
    Ok(FeatureCube::new(grid)?.with_mask(mask))
}

/// Per-band (min, max) over valid, unmasked pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub min: Vec<f32>,
    pub max: Vec<f32>,
}

impl NormStats {
    fn empty(bands: usize) -> Self {
        Self {
            min: vec![f32::INFINITY; bands],
            max: vec![f32::NEG_INFINITY; bands],
        }
    }

    fn update(&mut self, band: usize, v: f32) {
        if v.is_nan() {
            return;
        }
        self.min[band] = self.min[band].min(v);
        self.max[band] = self.max[band].max(v);
    }

    fn finish(mut self) -> Self {
        for b in 0..self.min.len() {
            if self.min[b] > self.max[b] {
                // no valid pixel in this band
                self.min[b] = 0.0;
                self.max[b] = 0.0;
            }
        }
        self
    }

    pub fn bands(&self) -> usize {
        self.min.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.min.len() != self.max.len() {
            return Err(Error::invalid("norm stats min/max lengths differ"));
        }
        for (b, (lo, hi)) in self.min.iter().zip(&self.max).enumerate() {
            if !(hi >= lo) {
                return Err(Error::invalid(format!("norm stats band {b}: max {hi} < min {lo}")));
            }
        }
        Ok(())
    }

    /// Stats over one grid, skipping pixels flagged in `masked`.
    pub fn from_grid(grid: &RasterGrid, masked: Option<&[bool]>) -> Self {
        let mut s = Self::empty(grid.bands());
        for b in 0..grid.bands() {
            for (i, &v) in grid.band(b).iter().enumerate() {
                if masked.is_some_and(|m| m[i]) || grid.is_nodata(v) {
                    continue;
                }
                s.update(b, v);
            }
        }
        s.finish()
    }

    /// Stats over patches, skipping no-data-labelled pixels.
    pub fn from_patches<'a>(patches: impl IntoIterator<Item = &'a PatchSample>) -> Result<Self> {
        let mut it = patches.into_iter().peekable();
        let first = it
            .peek()
            .ok_or_else(|| Error::invalid("cannot compute normalisation stats from no patches"))?;
        let mut s = Self::empty(first.channels);
        for p in it {
            if p.channels != s.bands() {
                return Err(Error::Shape("patches disagree on channel count".into()));
            }
            let n = p.size * p.size;
            for b in 0..p.channels {
                for (i, &v) in p.features[b * n..(b + 1) * n].iter().enumerate() {
                    if p.labels[i] != 0 {
                        s.update(b, v);
                    }
                }
            }
        }
        Ok(s.finish())
    }

    #[inline]
    pub fn apply(&self, band: usize, v: f32) -> f32 {
        let (lo, hi) = (self.min[band] as f64, self.max[band] as f64);
        if hi == lo {
            0.0
        } else {
            ((v as f64 - lo) / (hi - lo)) as f32
        }
    }
}

/// Min-max normalisation per band. Without `stats`, they are computed from
/// the cube itself (valid, unmasked pixels). Masked pixels end up exactly 0.
/// Values outside the stats range are not clamped.
pub fn minmax_normalize(cube: &FeatureCube, stats: Option<&NormStats>) -> Result<FeatureCube> {
    let stats = match stats {
        Some(s) => {
            s.validate()?;
            if s.bands() != cube.grid().bands() {
                return Err(Error::Shape(format!(
                    "norm stats cover {} bands, cube has {}",
                    s.bands(),
                    cube.grid().bands()
                )));
            }
            s.clone()
        }
        None => NormStats::from_grid(cube.grid(), cube.mask()),
    };
    let mut grid = cube.grid().clone();
    let nodata = grid.nodata();
    for b in 0..grid.bands() {
        for (i, v) in grid.band_mut(b).iter_mut().enumerate() {
            if cube.mask().is_some_and(|m| m[i]) {
                *v = 0.0;
            } else if !crate::raster::is_nodata(*v, nodata) {
                *v = stats.apply(b, *v);
            }
        }
    }
    let mut out = FeatureCube::new(grid)?.with_norm_stats(stats);
    if let Some(m) = cube.mask() {
        out = out.with_mask(m.to_vec());
    }
    Ok(out)
}

/// One square training sample: channel-major features plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub features: Vec<f32>,
    pub channels: usize,
    pub size: usize,
    pub labels: Vec<u8>,
    pub tile_id: String,
    /// Top-left (row, col) within the tile.
    pub offset: (usize, usize),
    pub ecoregion: Option<i64>,
}

impl PatchSample {
    pub fn pixels(&self) -> usize {
        self.size * self.size
    }

    /// Normalised copy: label-0 pixels and nodata become 0.
    pub fn normalized(&self, stats: &NormStats) -> PatchSample {
        let n = self.pixels();
        let mut out = self.clone();
        for b in 0..self.channels {
            for (i, v) in out.features[b * n..(b + 1) * n].iter_mut().enumerate() {
                *v = if self.labels[i] == 0 || v.is_nan() {
                    0.0
                } else {
                    stats.apply(b, *v)
                };
            }
        }
        out
    }

    /// Feature vector of pixel `i`.
    pub fn pixel(&self, i: usize) -> Vec<f32> {
        let n = self.pixels();
        (0..self.channels).map(|b| self.features[b * n + i]).collect()
    }
}

/// Patches per axis for a tile dimension.
pub fn patches_per_dim(dim: usize, size: usize, stride: usize) -> usize {
    if dim < size || stride == 0 {
        0
    } else {
        (dim - size) / stride + 1
    }
}

pub fn patch_count(height: usize, width: usize, size: usize, stride: usize) -> usize {
    patches_per_dim(height, size, stride) * patches_per_dim(width, size, stride)
}

/// Overlapping square patches at multiples of `stride`, row-major.
pub fn extract_patches_grid(
    grid: &RasterGrid,
    labels: &RasterGrid,
    size: usize,
    stride: usize,
    tile_id: &str,
    ecoregion: Option<i64>,
) -> Result<Vec<PatchSample>> {
    assert_aligned(&[grid.clone(), labels.clone()])
        .map_err(|e| Error::Shape(format!("features vs labels: {e}")))?;
    if size == 0 || stride == 0 {
        return Err(Error::invalid("patch size and stride must be positive"));
    }
    let (h, w) = (grid.height(), grid.width());
    if h < size || w < size {
        return Err(Error::invalid(format!(
            "{h}x{w} tile is smaller than the {size}x{size} patch"
        )));
    }
    let lab = labels_as_u8(labels)?;
    let mut out = Vec::with_capacity(patch_count(h, w, size, stride));
    for pr in 0..patches_per_dim(h, size, stride) {
        for pc in 0..patches_per_dim(w, size, stride) {
            let (r0, c0) = (pr * stride, pc * stride);
            let mut features = Vec::with_capacity(grid.bands() * size * size);
            for b in 0..grid.bands() {
                let band = grid.band(b);
                for r in r0..r0 + size {
                    features.extend_from_slice(&band[r * w + c0..r * w + c0 + size]);
                }
            }
            let mut labels = Vec::with_capacity(size * size);
            for r in r0..r0 + size {
                labels.extend_from_slice(&lab[r * w + c0..r * w + c0 + size]);
            }
            out.push(PatchSample {
                features,
                channels: grid.bands(),
                size,
                labels,
                tile_id: tile_id.to_string(),
                offset: (r0, c0),
                ecoregion,
            });
        }
    }
    Ok(out)
}

pub fn extract_patches(
    features: &FeatureCube,
    labels: &RasterGrid,
    size: usize,
    stride: usize,
    tile_id: &str,
    ecoregion: Option<i64>,
) -> Result<Vec<PatchSample>> {
    extract_patches_grid(features.grid(), labels, size, stride, tile_id, ecoregion)
}

/// Offset of the `size`-window (on a `stride` lattice) holding the most
/// distinct classes; ties go to the first window in row-major order.
pub fn most_diverse_window(labels: &RasterGrid, size: usize, stride: usize) -> Result<(usize, usize)> {
    let lab = labels_as_u8(labels)?;
    let (h, w) = (labels.height(), labels.width());
    if h < size || w < size {
        return Err(Error::invalid("window larger than the label raster"));
    }
    let mut best = ((0, 0), 0usize);
    for pr in 0..patches_per_dim(h, size, stride) {
        for pc in 0..patches_per_dim(w, size, stride) {
            let (r0, c0) = (pr * stride, pc * stride);
            let mut seen: BTreeSet<u8> = BTreeSet::new();
            for r in r0..r0 + size {
                seen.extend(lab[r * w + c0..r * w + c0 + size].iter().copied());
            }
            if seen.len() > best.1 {
                best = ((r0, c0), seen.len());
            }
        }
    }
    Ok(best.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub random_state: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            random_state: 42,
        }
    }
}

impl SplitSpec {
    pub fn new(random_state: u64) -> Self {
        Self {
            random_state,
            ..Self::default()
        }
    }
}

/// Train/test index sets. The permutation is Fisher–Yates over `0..n`
/// driven by xoshiro256** seeded with splitmix64(`random_state`); the
/// first `ceil(fraction * n)` shuffled indices (at most `n - 1`) train.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 samples to split, got {n}")));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction must lie in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    let mut rng = prng(spec.random_state);
    let order = permutation(&mut rng, n);
    // the epsilon keeps 0.7 * 10 from rounding up to 8
    let n_train = ((spec.train_fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n - 1);
    let (train, test) = order.split_at(n_train);
    Ok((train.to_vec(), test.to_vec()))
}

pub fn split_train_test<T: Clone>(samples: &[T], spec: &SplitSpec) -> Result<(Vec<T>, Vec<T>)> {
    let (tr, te) = split_indices(samples.len(), spec)?;
    Ok((
        tr.iter().map(|&i| samples[i].clone()).collect(),
        te.iter().map(|&i| samples[i].clone()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(w: u32, h: u32, f: impl Fn(usize, usize) -> f32) -> RasterGrid {
        let v = (0..(w * h) as usize).map(|i| f(i / w as usize, i % w as usize)).collect();
        RasterGrid::new(w, h, 1, v).unwrap()
    }

    fn cube(w: u32, h: u32, f: impl Fn(usize, usize) -> f32) -> FeatureCube {
        let n = (w * h) as usize;
        let v = (0..28 * n).map(|i| f(i / n, i % n)).collect();
        FeatureCube::new(RasterGrid::new(w, h, 28, v).unwrap()).unwrap()
    }

    #[test]
    fn legend_rows() {
        let m = LabelMap::default();
        assert_eq!(m.to_internal(20), Some(1));
        assert_eq!(m.to_internal(15), Some(8));
        assert_eq!(m.to_internal(0), Some(0));
        assert_eq!(m.to_internal(11), None);
        assert_eq!(m.to_internal(99), None);
        let lenient = LabelMap { allow_empty_classes: true };
        assert_eq!(lenient.to_internal(11), Some(0));
        assert_eq!(lenient.to_internal(16), Some(0));
        for i in 0..9u8 {
            let e = LabelMap::to_external(i).unwrap();
            assert_eq!(m.to_internal(e as i64), Some(i));
        }
    }

    #[test]
    fn remap_reports_position() {
        let raw = RasterGrid::new(3, 2, 1, vec![20.0, 5.0, 0.0, 15.0, 99.0, 8.0]).unwrap();
        match remap_labels(&raw, &LabelMap::default()) {
            Err(Error::UnknownLabel { code: 99, row: 1, col: 1 }) => {}
            other => panic!("{other:?}"),
        }
        let raw = RasterGrid::new(3, 1, 1, vec![20.0, 11.0, 15.0]).unwrap();
        assert!(remap_labels(&raw, &LabelMap::default()).is_err());
        let ok = remap_labels(&raw, &LabelMap { allow_empty_classes: true }).unwrap();
        assert_eq!(ok.values(), &[1.0, 0.0, 8.0]);
    }

    #[test]
    fn masking() {
        let c = cube(4, 4, |b, i| (b * 16 + i) as f32 + 1.0);
        let zero = labels(4, 4, |_, _| 0.0);
        assert!(mask_nodata(&c, &zero).unwrap().grid().values().iter().all(|&v| v == 0.0));
        let full = labels(4, 4, |_, _| 3.0);
        assert_eq!(mask_nodata(&c, &full).unwrap().grid().values(), c.grid().values());
        let checker = labels(4, 4, |r, col| ((r + col) % 2) as f32);
        let m = mask_nodata(&c, &checker).unwrap();
        for b in 0..28 {
            for r in 0..4 {
                for col in 0..4 {
                    let v = m.grid().get(b, r, col);
                    assert_eq!(v == 0.0, (r + col) % 2 == 0);
                }
            }
        }
        let wrong = labels(5, 4, |_, _| 1.0);
        assert!(mask_nodata(&c, &wrong).is_err());
    }

    #[test]
    fn normalisation() {
        // band 0 spans [2, 4]
        let c = cube(3, 1, |b, i| if b == 0 { 2.0 + i as f32 } else { 7.0 });
        let n = minmax_normalize(&c, None).unwrap();
        assert_eq!(&n.grid().band(0), &[0.0, 0.5, 1.0]);
        assert!(n.grid().band(5).iter().all(|&v| v == 0.0));
        let stats = n.norm_stats().unwrap().clone();
        assert_eq!((stats.min[0], stats.max[0]), (2.0, 4.0));
        let test = cube(3, 1, |b, _| if b == 0 { 5.0 } else { 7.0 });
        let t = minmax_normalize(&test, Some(&stats)).unwrap();
        assert_eq!(t.grid().band(0)[0], 1.5);
        let mut bad = stats.clone();
        bad.max[0] = 1.0;
        assert!(minmax_normalize(&test, Some(&bad)).is_err());
    }

    #[test]
    fn masked_pixels_do_not_enter_stats() {
        let c = cube(4, 1, |_, i| [0.0, 0.0, 3.0, 5.0][i]);
        let lab = labels(4, 1, |_, c| if c < 2 { 0.0 } else { 1.0 });
        let m = mask_nodata(&c, &lab).unwrap();
        let n = minmax_normalize(&m, None).unwrap();
        assert_eq!(n.norm_stats().unwrap().min[0], 3.0);
        assert_eq!(n.grid().band(0), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn archive_patch_arithmetic() {
        assert_eq!(patch_count(512, 512, PATCH_SIZE, PATCH_STRIDE), 9);
        assert_eq!(64 * patch_count(512, 512, 256, 128), 576);
        assert_eq!(103 * patch_count(512, 512, 256, 128), 927);
        assert_eq!(86 * patch_count(512, 512, 256, 128), 774);
        assert_eq!(patch_count(256, 256, 256, 128), 1);
    }

    #[test]
    fn patch_offsets() {
        let c = cube(384, 384, |_, _| 1.0);
        let l = labels(384, 384, |_, _| 1.0);
        let p = extract_patches(&c, &l, 256, 128, "t", Some(3)).unwrap();
        let offs: Vec<_> = p.iter().map(|s| s.offset).collect();
        assert_eq!(offs, vec![(0, 0), (0, 128), (128, 0), (128, 128)]);
        assert!(p.iter().all(|s| s.ecoregion == Some(3) && s.features.len() == 28 * 256 * 256));
        let small = cube(100, 100, |_, _| 1.0);
        let sl = labels(100, 100, |_, _| 1.0);
        assert!(extract_patches(&small, &sl, 256, 128, "t", None).is_err());
    }

    #[test]
    fn patch_contents_match_the_tile() {
        let c = cube(12, 12, |b, i| (b * 1000 + i) as f32);
        let l = labels(12, 12, |r, c| ((r * 12 + c) % 9) as f32);
        let p = extract_patches(&c, &l, 8, 4, "t", None).unwrap();
        let s = &p[1];
        assert_eq!(s.offset, (0, 4));
        assert_eq!(s.features[0], 4.0);
        assert_eq!(s.features[64 + 9], 1000.0 + 12.0 + 5.0);
        assert_eq!(s.labels[9] as usize, (12 + 5) % 9);
    }

    #[test]
    fn split_arithmetic_and_determinism() {
        let (tr, te) = split_indices(10, &SplitSpec::new(1)).unwrap();
        assert_eq!((tr.len(), te.len()), (7, 3));
        assert_eq!(split_indices(10, &SplitSpec::new(1)).unwrap().0, tr);
        let a = split_indices(20, &SplitSpec::new(42)).unwrap();
        let b = split_indices(20, &SplitSpec::new(82)).unwrap();
        assert_ne!(a.0, b.0);
        assert!(split_indices(1, &SplitSpec::default()).is_err());
        let bad = SplitSpec { train_fraction: 1.0, random_state: 0 };
        assert!(split_indices(5, &bad).is_err());
    }

    #[test]
    fn most_diverse_window_prefers_mixed_regions() {
        let l = labels(8, 8, |r, c| if r >= 4 && c >= 4 { ((r + c) % 3) as f32 } else { 1.0 });
        assert_eq!(most_diverse_window(&l, 4, 4).unwrap(), (4, 4));
        let flat = labels(8, 8, |_, _| 1.0);
        assert_eq!(most_diverse_window(&flat, 4, 2).unwrap(), (0, 0));
    }
}
