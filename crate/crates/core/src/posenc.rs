//! Fourier-feature positional encoding of patch grid coordinates.
//!
//! Each axis is normalized to `[-1, 1]` (top-left patch at -1, bottom-right
//! at 1) and encoded as `sin(f_i π x), cos(f_i π x)` over a ladder of `I`
//! equidistant frequencies from 1 to `f_max`. The x axis comes first, then y,
//! frequency-major within each axis, for `4I` values per token.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyLadder {
    frequencies: Vec<f64>,
    f_max: f64,
}

impl FrequencyLadder {
    pub fn new(count: usize, f_max: f64) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("frequency count must be at least 1".into()));
        }
        if !(f_max >= 1.0) || !f_max.is_finite() {
            return Err(Error::Config(format!("f_max must be >= 1, got {f_max}")));
        }
        let frequencies = if count == 1 {
            vec![1.0]
        } else {
            let step = (f_max - 1.0) / (count - 1) as f64;
            (0..count)
                .map(|i| if i + 1 == count { f_max } else { 1.0 + step * i as f64 })
                .collect()
        };
        Ok(FrequencyLadder { frequencies, f_max })
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn count(&self) -> usize {
        self.frequencies.len()
    }

    pub fn f_max(&self) -> f64 {
        self.f_max
    }

    /// Width of one token's encoding, optionally with the raw coordinates.
    pub fn width(&self, append_raw_coords: bool) -> usize {
        4 * self.count() + if append_raw_coords { 2 } else { 0 }
    }
}

pub fn frequency_ladder(count: usize, f_max: f64) -> Result<FrequencyLadder> {
    FrequencyLadder::new(count, f_max)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridCoord {
    pub row: u32,
    pub col: u32,
    pub rows_total: u32,
    pub cols_total: u32,
}

impl GridCoord {
    pub fn new(row: u32, col: u32, rows_total: u32, cols_total: u32) -> Result<Self> {
        let c = GridCoord {
            row,
            col,
            rows_total,
            cols_total,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows_total == 0 || self.cols_total == 0 {
            return Err(Error::Data("grid extents must be positive".into()));
        }
        if self.row >= self.rows_total || self.col >= self.cols_total {
            return Err(Error::Data(format!(
                "coordinate ({}, {}) outside {}x{} grid",
                self.row, self.col, self.rows_total, self.cols_total
            )));
        }
        Ok(())
    }
}

fn normalize_axis(index: u32, total: u32) -> f64 {
    if total <= 1 {
        0.0
    } else {
        2.0 * index as f64 / (total - 1) as f64 - 1.0
    }
}

/// Maps a grid position to `(x̂, ŷ)` in `[-1, 1]²`.
pub fn normalize_coord(c: &GridCoord) -> (f64, f64) {
    (
        normalize_axis(c.col, c.cols_total),
        normalize_axis(c.row, c.rows_total),
    )
}

pub fn encode_position(c: &GridCoord, ladder: &FrequencyLadder) -> Vec<f64> {
    encode_position_with(c, ladder, false)
}

pub fn encode_position_with(
    c: &GridCoord,
    ladder: &FrequencyLadder,
    append_raw_coords: bool,
) -> Vec<f64> {
    let (x, y) = normalize_coord(c);
    let mut out = Vec::with_capacity(ladder.width(append_raw_coords));
    for a in [x, y] {
        for &f in ladder.frequencies() {
            let angle = f * std::f64::consts::PI * a;
            out.push(angle.sin());
            out.push(angle.cos());
        }
    }
    if append_raw_coords {
        out.push(x);
        out.push(y);
    }
    out
}

/// Appends each token's positional encoding to its feature vector.
pub fn attach_encodings<T: Real>(
    tokens: &Tensor<T>,
    coords: &[GridCoord],
    ladder: &FrequencyLadder,
    append_raw_coords: bool,
) -> Result<Tensor<T>> {
    let n = if tokens.shape().len() == 2 { tokens.rows() } else { 0 };
    if tokens.shape().len() != 2 || n != coords.len() {
        return Err(Error::Data(format!(
            "{} coordinates for token matrix of shape {:?}",
            coords.len(),
            tokens.shape()
        )));
    }
    let d = tokens.cols();
    let w = d + ladder.width(append_raw_coords);
    let mut data = Vec::with_capacity(n * w);
    for (i, c) in coords.iter().enumerate() {
        data.extend_from_slice(tokens.row(i));
        data.extend(
            encode_position_with(c, ladder, append_raw_coords)
                .into_iter()
                .map(T::of),
        );
    }
    Tensor::new(vec![n, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gc(row: u32, col: u32, rows: u32, cols: u32) -> GridCoord {
        GridCoord::new(row, col, rows, cols).unwrap()
    }

    #[test]
    fn ladder_examples() {
        assert_eq!(frequency_ladder(2, 10.0).unwrap().frequencies(), &[1.0, 10.0]);
        assert_eq!(frequency_ladder(1, 5.0).unwrap().frequencies(), &[1.0]);
        let l = frequency_ladder(6, 10.0).unwrap();
        let expect = [1.0, 2.8, 4.6, 6.4, 8.2, 10.0];
        for (a, b) in l.frequencies().iter().zip(expect) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        for w in l.frequencies().windows(3) {
            assert!(((w[1] - w[0]) - (w[2] - w[1])).abs() < 1e-9);
        }
    }

    #[test]
    fn ladder_rejects_bad_config() {
        assert!(matches!(frequency_ladder(0, 10.0), Err(Error::Config(_))));
        assert!(matches!(frequency_ladder(3, 0.5), Err(Error::Config(_))));
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_coord(&gc(0, 0, 4, 4)), (-1.0, -1.0));
        assert_eq!(normalize_coord(&gc(3, 3, 4, 4)), (1.0, 1.0));
        assert_eq!(normalize_coord(&gc(1, 2, 3, 5)), (0.0, 0.0));
        assert_eq!(normalize_coord(&gc(0, 2, 1, 5)), (0.0, 0.0));
    }

    #[test]
    fn encode_examples() {
        let l1 = frequency_ladder(1, 1.0).unwrap();
        let e = encode_position(&gc(1, 1, 3, 3), &l1);
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0]);

        let e = encode_position(&gc(0, 1, 2, 2), &l1);
        let expect = [0.0, -1.0, 0.0, -1.0];
        for (a, b) in e.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }

        // x̂ = 0.5 on a 5-column grid (col 3).
        let l2 = frequency_ladder(2, 10.0).unwrap();
        let e = encode_position(&gc(0, 3, 1, 5), &l2);
        let expect = [1.0, 0.0, 0.0, -1.0];
        for (a, b) in e[..4].iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{e:?}");
        }
    }

    #[test]
    fn attach_examples() {
        let l1 = frequency_ladder(1, 1.0).unwrap();
        let tokens = Tensor::<f32>::from_f64(&[1, 2], &[5.0, 7.0]).unwrap();
        let out = attach_encodings(&tokens, &[gc(1, 1, 3, 3)], &l1, false).unwrap();
        assert_eq!(out.data(), &[5.0, 7.0, 0.0, 1.0, 0.0, 1.0]);

        let empty = Tensor::<f32>::zeros(&[0, 2]);
        let out = attach_encodings(&empty, &[], &l1, false).unwrap();
        assert_eq!(out.shape(), &[0, 6]);

        assert!(attach_encodings(&tokens, &[], &l1, false).is_err());
    }

    #[test]
    fn raw_coordinate_variant_appends_two_values() {
        let l = frequency_ladder(2, 10.0).unwrap();
        let e = encode_position_with(&gc(0, 4, 2, 5), &l, true);
        assert_eq!(e.len(), 10);
        assert_eq!(&e[8..], &[1.0, -1.0]);
    }

    #[test]
    fn encodings_distinct_on_grids_up_to_32() {
        let l = frequency_ladder(6, 10.0).unwrap();
        for size in [2u32, 7, 16, 32] {
            let mut seen: Vec<Vec<f64>> = Vec::new();
            for r in 0..size {
                for c in 0..size {
                    seen.push(encode_position(&gc(r, c, size, size), &l));
                }
            }
            for i in 0..seen.len() {
                for j in i + 1..seen.len() {
                    let d: f64 = seen[i]
                        .iter()
                        .zip(&seen[j])
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max);
                    assert!(d > 1e-6, "grid {size}: tokens {i} and {j} collide");
                }
            }
        }
    }
}
