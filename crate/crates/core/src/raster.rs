//! Band-sequential f32 rasters and their two-file on-disk form.
//!
//! A raster `p` is stored as `p.json` (header) plus `p.bin` (raw
//! little-endian f32 payload, band-sequential, row-major within a band).

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Affine georeferencing: `x = a + b*col + c*row`, `y = d + e*col + f*row`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoRef {
    pub transform: [f64; 6],
    pub crs: String,
}

#[derive(Clone, Debug)]
pub struct RasterGrid {
    width: u32,
    height: u32,
    bands: u16,
    values: Vec<f32>,
    nodata: f32,
    geo: Option<GeoRef>,
}

impl RasterGrid {
    pub fn new(width: u32, height: u32, bands: u16, values: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || bands == 0 {
            return Err(Error::invalid(format!(
                "raster dimensions must be positive, got {width}x{height}x{bands}"
            )));
        }
        let expected = width as usize * height as usize * bands as usize;
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "{width}x{height}x{bands} raster needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bands,
            values,
            nodata: f32::NAN,
            geo: None,
        })
    }

    pub fn filled(width: u32, height: u32, bands: u16, value: f32) -> Result<Self> {
        let n = width as usize * height as usize * bands as usize;
        Self::new(width, height, bands, vec![value; n])
    }

    /// Concatenates single- or multi-band grids along the band axis.
    pub fn stack(grids: &[RasterGrid]) -> Result<Self> {
        let first = grids
            .first()
            .ok_or_else(|| Error::invalid("cannot stack an empty list of grids"))?;
        assert_aligned(grids)?;
        let bands: usize = grids.iter().map(|g| g.bands as usize).sum();
        let bands = u16::try_from(bands).map_err(|_| Error::invalid("too many bands"))?;
        let mut values = Vec::with_capacity(first.pixels() * bands as usize);
        for g in grids {
            values.extend_from_slice(&g.values);
        }
        let mut out = Self::new(first.width, first.height, bands, values)?;
        out.nodata = first.nodata;
        out.geo = first.geo.clone();
        Ok(out)
    }

    pub fn with_nodata(mut self, nodata: f32) -> Self {
        self.nodata = nodata;
        self
    }

    pub fn with_geo(mut self, geo: Option<GeoRef>) -> Self {
        self.geo = geo;
        self
    }

    pub fn width(&self) -> usize {
        self.width as usize
    }

    pub fn height(&self) -> usize {
        self.height as usize
    }

    pub fn bands(&self) -> usize {
        self.bands as usize
    }

    pub fn pixels(&self) -> usize {
        self.width() * self.height()
    }

    pub fn nodata(&self) -> f32 {
        self.nodata
    }

    pub fn geo(&self) -> Option<&GeoRef> {
        self.geo.as_ref()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn band(&self, b: usize) -> &[f32] {
        let n = self.pixels();
        &self.values[b * n..(b + 1) * n]
    }

    pub fn band_mut(&mut self, b: usize) -> &mut [f32] {
        let n = self.pixels();
        &mut self.values[b * n..(b + 1) * n]
    }

    /// Copies band `b` out as a single-band grid with the same metadata.
    pub fn band_grid(&self, b: usize) -> RasterGrid {
        RasterGrid {
            width: self.width,
            height: self.height,
            bands: 1,
            values: self.band(b).to_vec(),
            nodata: self.nodata,
            geo: self.geo.clone(),
        }
    }

    /// Same shape and metadata, new single-band payload.
    pub fn like_single(&self, values: Vec<f32>) -> RasterGrid {
        assert_eq!(values.len(), self.pixels());
        RasterGrid {
            width: self.width,
            height: self.height,
            bands: 1,
            values,
            nodata: self.nodata,
            geo: self.geo.clone(),
        }
    }

    pub fn get(&self, band: usize, row: usize, col: usize) -> f32 {
        self.values[band * self.pixels() + row * self.width() + col]
    }

    pub fn is_nodata(&self, v: f32) -> bool {
        is_nodata(v, self.nodata)
    }

    /// Rectangular crop over all bands.
    pub fn window(&self, row: usize, col: usize, height: usize, width: usize) -> Result<RasterGrid> {
        if row + height > self.height() || col + width > self.width() || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "window {height}x{width} at ({row},{col}) exceeds {}x{} grid",
                self.height(),
                self.width()
            )));
        }
        let mut values = Vec::with_capacity(width * height * self.bands());
        for b in 0..self.bands() {
            let band = self.band(b);
            for r in row..row + height {
                let start = r * self.width() + col;
                values.extend_from_slice(&band[start..start + width]);
            }
        }
        Ok(RasterGrid {
            width: width as u32,
            height: height as u32,
            bands: self.bands,
            values,
            nodata: self.nodata,
            geo: self.geo.as_ref().map(|g| {
                let t = g.transform;
                let (c, r) = (col as f64, row as f64);
                GeoRef {
                    transform: [
                        t[0] + t[1] * c + t[2] * r,
                        t[1],
                        t[2],
                        t[3] + t[4] * c + t[5] * r,
                        t[4],
                        t[5],
                    ],
                    crs: g.crs.clone(),
                }
            }),
        })
    }

    /// Bitwise equality of header and payload (NaN payloads compare by bits).
    pub fn bit_eq(&self, other: &RasterGrid) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.bands == other.bands
            && self.nodata.to_bits() == other.nodata.to_bits()
            && self.geo == other.geo
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// NaN is always invalid; a finite sentinel additionally matches by value.
pub fn is_nodata(v: f32, nodata: f32) -> bool {
    v.is_nan() || (!nodata.is_nan() && v == nodata)
}

/// Acquisition descriptors attached to one scene.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub acquisition_date: NaiveDate,
    #[serde(default = "default_orbit")]
    pub orbit: String,
    #[serde(default = "default_polarization")]
    pub polarization: String,
    #[serde(default = "default_platform")]
    pub platform: String,
}

fn default_orbit() -> String {
    "descending".into()
}

fn default_polarization() -> String {
    "VH".into()
}

fn default_platform() -> String {
    "S1A".into()
}

impl SceneMeta {
    pub fn new(acquisition_date: NaiveDate) -> Self {
        Self {
            acquisition_date,
            orbit: default_orbit(),
            polarization: default_polarization(),
            platform: default_platform(),
        }
    }

    pub fn parse_date(s: &str) -> Result<NaiveDate> {
        NaiveDate::parse_from_str(s, "%Y-%m-%d")
            .map_err(|e| Error::invalid(format!("bad ISO-8601 date {s:?}: {e}")))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    width: u32,
    height: u32,
    bands: u16,
    nodata: NodataValue,
    geo: Option<GeoRef>,
    byte_order: String,
    dtype: String,
}

/// JSON has no NaN/inf literals, so non-finite sentinels travel as strings.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum NodataValue {
    Number(f32),
    Special(String),
}

impl NodataValue {
    fn from_f32(v: f32) -> Self {
        if v.is_nan() {
            NodataValue::Special("NaN".into())
        } else if v == f32::INFINITY {
            NodataValue::Special("inf".into())
        } else if v == f32::NEG_INFINITY {
            NodataValue::Special("-inf".into())
        } else {
            NodataValue::Number(v)
        }
    }

    fn to_f32(&self) -> Option<f32> {
        match self {
            NodataValue::Number(v) => Some(*v),
            NodataValue::Special(s) => match s.as_str() {
                "NaN" | "nan" => Some(f32::NAN),
                "inf" => Some(f32::INFINITY),
                "-inf" => Some(f32::NEG_INFINITY),
                _ => None,
            },
        }
    }
}

pub fn header_path(path: &Path) -> PathBuf {
    sibling(path, "json")
}

pub fn payload_path(path: &Path) -> PathBuf {
    sibling(path, "bin")
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn write_raster(grid: &RasterGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        width: grid.width,
        height: grid.height,
        bands: grid.bands,
        nodata: NodataValue::from_f32(grid.nodata),
        geo: grid.geo.clone(),
        byte_order: "LE".into(),
        dtype: "f32".into(),
    };
    let hpath = header_path(path);
    let text = serde_json::to_string_pretty(&header)?;
    fs::write(&hpath, text).map_err(|e| Error::io(&hpath, e))?;

    let mut bytes = Vec::with_capacity(grid.values.len() * 4);
    for v in &grid.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let ppath = payload_path(path);
    fs::write(&ppath, bytes).map_err(|e| Error::io(&ppath, e))
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<RasterGrid> {
    let path = path.as_ref();
    let hpath = header_path(path);
    let text = fs::read_to_string(&hpath).map_err(|e| Error::io(&hpath, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| Error::Header {
        path: hpath.clone(),
        message: e.to_string(),
    })?;
    if header.dtype != "f32" {
        return Err(Error::UnsupportedDtype(header.dtype));
    }
    if header.byte_order != "LE" {
        return Err(Error::Header {
            path: hpath,
            message: format!("unsupported byte order {:?}", header.byte_order),
        });
    }
    let nodata = header.nodata.to_f32().ok_or_else(|| Error::Header {
        path: hpath.clone(),
        message: "unrecognised nodata value".into(),
    })?;

    let ppath = payload_path(path);
    let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    let expected = header.width as u64 * header.height as u64 * header.bands as u64 * 4;
    if bytes.len() as u64 != expected {
        return Err(Error::LengthMismatch {
            path: ppath,
            expected,
            actual: bytes.len() as u64,
        });
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(RasterGrid::new(header.width, header.height, header.bands, values)?
        .with_nodata(nodata)
        .with_geo(header.geo))
}

/// Checks that every grid shares width, height and (where both carry one)
/// the geotransform of the first grid.
pub fn assert_aligned(grids: &[RasterGrid]) -> Result<()> {
    let first = grids
        .first()
        .ok_or_else(|| Error::invalid("alignment check on an empty list"))?;
    for (index, g) in grids.iter().enumerate().skip(1) {
        if g.width != first.width || g.height != first.height {
            return Err(Error::Misaligned {
                index,
                detail: format!(
                    "{}x{} vs {}x{}",
                    g.width, g.height, first.width, first.height
                ),
            });
        }
        if let (Some(a), Some(b)) = (&first.geo, &g.geo) {
            if a != b {
                return Err(Error::Misaligned {
                    index,
                    detail: "geotransform differs".into(),
                });
            }
        }
    }
    Ok(())
}
