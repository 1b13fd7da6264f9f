//! Dense row-major `f64` matrix.

use crate::error::{Error, Result};

/// Dense matrix in row-major order, 64-bit precision throughout.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// All-zero matrix. `rows == 0` or `cols == 0` is allowed and yields an
    /// empty buffer.
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from a row-major buffer; the buffer length must equal
    /// `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                context: "Matrix::from_vec".into(),
                expected: format!("{} elements for {}x{}", rows * cols, rows, cols),
                found: format!("{} elements", data.len()),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Build from explicit rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::ShapeMismatch {
                    context: "Matrix::from_rows".into(),
                    expected: format!("row of length {c}"),
                    found: format!("row {i} of length {}", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stack the rows of `top` above the rows of `bottom`.
    pub fn vstack(top: &Matrix, bottom: &Matrix) -> Result<Matrix> {
        if top.cols != bottom.cols && !top.is_empty() && !bottom.is_empty() {
            return Err(Error::ShapeMismatch {
                context: "Matrix::vstack".into(),
                expected: format!("{} cols", top.cols),
                found: format!("{} cols", bottom.cols),
            });
        }
        let cols = if top.is_empty() { bottom.cols } else { top.cols };
        let mut data = Vec::with_capacity(top.data.len() + bottom.data.len());
        data.extend_from_slice(&top.data);
        data.extend_from_slice(&bottom.data);
        Ok(Matrix {
            rows: top.rows + bottom.rows,
            cols,
            data,
        })
    }

    /// New matrix holding rows `lo..hi`.
    pub fn slice_rows(&self, lo: usize, hi: usize) -> Matrix {
        assert!(lo <= hi && hi <= self.rows, "row slice out of bounds");
        Matrix {
            rows: hi - lo,
            cols: self.cols,
            data: self.data[lo * self.cols..hi * self.cols].to_vec(),
        }
    }

    /// Each row repeated `times` consecutive times.
    pub fn repeat_rows(&self, times: usize) -> Matrix {
        let mut data = Vec::with_capacity(self.data.len() * times);
        for i in 0..self.rows {
            for _ in 0..times {
                data.extend_from_slice(self.row(i));
            }
        }
        Matrix {
            rows: self.rows * times,
            cols: self.cols,
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Matrix::from_vec(2, 3, vec![0.0; 6]).is_ok());
        assert!(Matrix::from_vec(2, 3, vec![0.0; 5]).is_err());
    }

    #[test]
    fn row_access() {
        let m = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.row(1), &[3.0, 4.0]);
        assert_eq!(m.get(0, 1), 2.0);
    }

    #[test]
    fn repeat_rows_layout() {
        let m = Matrix::from_vec(2, 1, vec![1.0, 2.0]).unwrap();
        let r = m.repeat_rows(3);
        assert_eq!(r.data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }
}
