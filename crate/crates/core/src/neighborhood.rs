//! Clipped square windows over a single band.

use crate::raster::is_nodata;

/// Collects the valid values of the `side`x`side` window centred on
/// `(row, col)`, clipped to the grid. Row-major scan order.
#[inline]
pub(crate) fn gather_window(
    band: &[f32],
    width: usize,
    height: usize,
    row: usize,
    col: usize,
    side: usize,
    nodata: f32,
    out: &mut Vec<f32>,
) {
    let half = side / 2;
    let r0 = row.saturating_sub(half);
    let r1 = (row + half).min(height - 1);
    let c0 = col.saturating_sub(half);
    let c1 = (col + half).min(width - 1);
    out.clear();
    for r in r0..=r1 {
        let line = &band[r * width..(r + 1) * width];
        for &v in &line[c0..=c1] {
            if !is_nodata(v, nodata) {
                out.push(v);
            }
        }
    }
}

/// Number of pixels in the clipped window, valid or not.
#[inline]
pub(crate) fn clipped_len(width: usize, height: usize, row: usize, col: usize, side: usize) -> usize {
    let half = side / 2;
    let rows = (row + half).min(height - 1) - row.saturating_sub(half) + 1;
    let cols = (col + half).min(width - 1) - col.saturating_sub(half) + 1;
    rows * cols
}

/// Mean and population variance, accumulated in f64.
#[inline]
pub(crate) fn mean_var(values: &[f32]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, var)
}
