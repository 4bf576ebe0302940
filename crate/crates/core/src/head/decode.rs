use super::SampleMaps;
use crate::error::{Error, Result};
use crate::geom::CenterBox;

/// A decoded box with the score and grid cell it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoded {
    /// Normalized `(cx, cy, w, h)` in search-crop coordinates.
    pub bbox: CenterBox,
    pub score: f64,
    pub row: usize,
    pub col: usize,
}

/// First maximum in row-major order.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Pick the highest-scoring cell of `score` and read offset and size there.
/// `score` may be a penalized copy of `maps.score`.
pub fn decode_box(maps: &SampleMaps, score: &[f64]) -> Result<Decoded> {
    let n = maps.rows * maps.cols;
    if score.len() != n || maps.offset.len() != 2 * n || maps.size.len() != 2 * n {
        return Err(Error::Invalid(format!(
            "map sizes {}, {}, {} do not match a {}x{} grid",
            score.len(),
            maps.offset.len(),
            maps.size.len(),
            maps.rows,
            maps.cols
        )));
    }
    let k = argmax(score);
    let (row, col) = (k / maps.cols, k % maps.cols);
    let cx = (col as f64 + maps.offset[k]) / maps.cols as f64;
    let cy = (row as f64 + maps.offset[n + k]) / maps.rows as f64;
    Ok(Decoded {
        bbox: CenterBox::new(cx, cy, maps.size[k], maps.size[n + k]),
        score: maps.score[k],
        row,
        col,
    })
}

fn hann(m: usize) -> Vec<f64> {
    if m == 1 {
        return vec![1.0];
    }
    (0..m)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / (m - 1) as f64).cos()))
        .collect()
}

/// Outer product of two Hann windows, row-major `rows x cols`.
pub fn hann_window(rows: usize, cols: usize) -> Vec<f64> {
    let (hr, hc) = (hann(rows), hann(cols));
    hr.iter().flat_map(|&a| hc.iter().map(move |&b| a * b)).collect()
}

pub fn hanning_penalize(score: &[f64], window: &[f64]) -> Result<Vec<f64>> {
    if score.len() != window.len() {
        return Err(Error::Invalid(format!(
            "score map has {} cells, window has {}",
            score.len(),
            window.len()
        )));
    }
    Ok(score.iter().zip(window).map(|(a, b)| a * b).collect())
}
