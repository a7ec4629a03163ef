//! Confusion matrices and the accuracy figures derived from them.
//! Rows are reference (truth) classes, columns are predictions.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::RasterGrid;

pub const N_CLASSES: usize = 9;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self {
            n,
            counts: rows.concat(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.n || pred >= self.n {
            return Err(Error::invalid(format!(
                "class out of range: truth {truth}, prediction {pred}, n = {}",
                self.n
            )));
        }
        self.counts[truth * self.n + pred] += 1;
        Ok(())
    }

    /// Tallies paired label slices.
    pub fn tally(&mut self, truth: &[u8], pred: &[u8]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::Shape(format!(
                "{} reference labels vs {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            self.add(t as usize, p as usize)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::Shape("cannot merge matrices of different order".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        self.counts[k * self.n..(k + 1) * self.n].iter().sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        (0..self.n).map(|r| self.get(r, k)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n).map(|k| self.get(k, k)).sum()
    }

    fn require_nonempty(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::invalid("confusion matrix is empty")),
            t => Ok(t as f64),
        }
    }

    pub fn overall_accuracy(&self) -> Result<f64> {
        Ok(self.trace() as f64 / self.require_nonempty()?)
    }

    /// Chance agreement from the marginal products.
    pub fn expected_agreement(&self) -> Result<f64> {
        let total = self.require_nonempty()?;
        Ok((0..self.n)
            .map(|k| self.row_sum(k) as f64 * self.col_sum(k) as f64)
            .sum::<f64>()
            / (total * total))
    }

    /// Cohen's kappa; 0 when chance agreement is already 1.
    pub fn kappa(&self) -> Result<f64> {
        let oa = self.overall_accuracy()?;
        let pe = self.expected_agreement()?;
        if pe >= 1.0 {
            return Ok(0.0);
        }
        Ok((oa - pe) / (1.0 - pe))
    }

    /// Per-class recall; 0 for classes with no reference pixels.
    pub fn producer_accuracy(&self) -> Result<Vec<f64>> {
        self.require_nonempty()?;
        Ok((0..self.n)
            .map(|k| match self.row_sum(k) {
                0 => 0.0,
                r => self.get(k, k) as f64 / r as f64,
            })
            .collect())
    }

    pub fn user_accuracy(&self) -> Result<Vec<f64>> {
        self.require_nonempty()?;
        Ok((0..self.n)
            .map(|k| match self.col_sum(k) {
                0 => 0.0,
                c => self.get(k, k) as f64 / c as f64,
            })
            .collect())
    }

    /// Support-weighted mean of per-class F1 over classes with reference pixels.
    pub fn f1(&self) -> Result<f64> {
        let total = self.require_nonempty()?;
        let pa = self.producer_accuracy()?;
        let ua = self.user_accuracy()?;
        let mut acc = 0.0;
        for k in 0..self.n {
            let support = self.row_sum(k);
            if support == 0 {
                continue;
            }
            let (p, r) = (ua[k], pa[k]);
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            acc += support as f64 * f;
        }
        Ok(acc / total)
    }

    pub fn summary(&self) -> Result<Metrics> {
        Ok(Metrics {
            oa: self.overall_accuracy()?,
            kappa: self.kappa()?,
            f1: self.f1()?,
            pa: self.producer_accuracy()?,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("truth\\pred");
        for k in 0..self.n {
            let _ = write!(s, ",{k}");
        }
        s.push('\n');
        for r in 0..self.n {
            let _ = write!(s, "{r}");
            for c in 0..self.n {
                let _ = write!(s, ",{}", self.get(r, c));
            }
            s.push('\n');
        }
        s
    }
}

/// Confusion matrix of two aligned single-band class rasters.
pub fn confusion(pred: &RasterGrid, truth: &RasterGrid, n: usize) -> Result<ConfusionMatrix> {
    crate::raster::assert_aligned(&[truth.clone(), pred.clone()])?;
    if pred.bands() != 1 || truth.bands() != 1 {
        return Err(Error::Shape("class rasters must be single-band".into()));
    }
    let mut cm = ConfusionMatrix::new(n);
    for (&t, &p) in truth.values().iter().zip(pred.values()) {
        let (ti, pi) = (class_code(t, n)?, class_code(p, n)?);
        cm.add(ti, pi)?;
    }
    Ok(cm)
}

fn class_code(v: f32, n: usize) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && (v as usize) < n {
        Ok(v as usize)
    } else {
        Err(Error::invalid(format!("class value {v} outside 0..{n}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub oa: f64,
    pub kappa: f64,
    pub f1: f64,
    pub pa: Vec<f64>,
}

impl Metrics {
    pub fn csv_header(n: usize) -> String {
        let mut s = String::from("oa,kappa,f1");
        for k in 0..n {
            let _ = write!(s, ",pa_{k}");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = Self::csv_header(self.pa.len());
        let _ = write!(s, "\n{:.6},{:.6},{:.6}", self.oa, self.kappa, self.f1);
        for p in &self.pa {
            let _ = write!(s, ",{p:.6}");
        }
        s.push('\n');
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::invalid("metrics csv is empty"))?
            .split(',')
            .map(str::trim)
            .collect();
        if header.len() < 4 || header[..3] != ["oa", "kappa", "f1"] {
            return Err(Error::invalid("metrics csv header must start with oa,kappa,f1"));
        }
        for (k, h) in header[3..].iter().enumerate() {
            if *h != format!("pa_{k}") {
                return Err(Error::invalid(format!("unexpected metrics column {h:?}")));
            }
        }
        let row: Vec<f64> = lines
            .next()
            .ok_or_else(|| Error::invalid("metrics csv has no data row"))?
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::invalid(format!("bad metrics value {v:?}")))
            })
            .collect::<Result<_>>()?;
        if row.len() != header.len() {
            return Err(Error::invalid("metrics csv row and header lengths differ"));
        }
        Ok(Metrics {
            oa: row[0],
            kappa: row[1],
            f1: row[2],
            pa: row[3..].to_vec(),
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_agreement() {
        let cm = ConfusionMatrix::from_rows(&[vec![5, 0, 0], vec![0, 3, 0], vec![0, 0, 7]]).unwrap();
        let m = cm.summary().unwrap();
        assert_eq!((m.oa, m.kappa, m.f1), (1.0, 1.0, 1.0));
        assert!(m.pa.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn chance_level_kappa_is_zero() {
        let cm = ConfusionMatrix::from_rows(&[vec![50, 0], vec![50, 0]]).unwrap();
        assert_eq!(cm.overall_accuracy().unwrap(), 0.5);
        assert_eq!(cm.expected_agreement().unwrap(), 0.5);
        assert_eq!(cm.kappa().unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_two_by_two() {
        let cm = ConfusionMatrix::from_rows(&[vec![2, 1], vec![1, 2]]).unwrap();
        assert!((cm.overall_accuracy().unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((cm.expected_agreement().unwrap() - 0.5).abs() < 1e-15);
        assert!((cm.kappa().unwrap() - 1.0 / 3.0).abs() < 1e-15);
        for p in cm.producer_accuracy().unwrap() {
            assert!((p - 2.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_pe_gives_zero_kappa() {
        let cm = ConfusionMatrix::from_rows(&[vec![0, 0], vec![0, 10]]).unwrap();
        assert_eq!(cm.kappa().unwrap(), 0.0);
        assert_eq!(cm.overall_accuracy().unwrap(), 1.0);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        assert!(ConfusionMatrix::new(3).summary().is_err());
    }

    #[test]
    fn raster_confusion() {
        let truth = RasterGrid::filled(5, 2, 1, 1.0).unwrap();
        let pred = RasterGrid::filled(5, 2, 1, 0.0).unwrap();
        let cm = confusion(&pred, &truth, 9).unwrap();
        assert_eq!(cm.get(1, 0), 10);
        assert_eq!(cm.total(), 10);
        let same = confusion(&truth, &truth, 9).unwrap();
        assert_eq!(same.get(1, 1), 10);
        let bad = RasterGrid::filled(5, 2, 1, 9.0).unwrap();
        assert!(confusion(&bad, &truth, 9).is_err());
    }

    #[test]
    fn csv_round_trip_and_validation() {
        let cm = ConfusionMatrix::from_rows(&[vec![2, 1], vec![1, 2]]).unwrap();
        let m = cm.summary().unwrap();
        let back = Metrics::from_csv(&m.to_csv()).unwrap();
        assert!((back.kappa - m.kappa).abs() < 1e-6);
        assert!(Metrics::from_csv("a,b\n1,2").is_err());
        assert!(cm.to_csv().starts_with("truth\\pred,0,1\n0,2,1\n"));
    }
}
