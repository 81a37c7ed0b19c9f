//! Constant sparse linear maps: bilinear resampling and average pooling on grids.

use crate::error::{contract, dim_err, Result};
use crate::tensor::{Real, Tensor};

/// Row-compressed constant matrix. Applied on the left of a dense `[cols, n]` operand.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix<T> {
    rows: usize,
    cols: usize,
    entries: Vec<Vec<(usize, T)>>,
}

impl<T: Real> SparseMatrix<T> {
    pub fn from_rows(cols: usize, entries: Vec<Vec<(usize, T)>>) -> Self {
        Self {
            rows: entries.len(),
            cols,
            entries,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[(usize, T)] {
        &self.entries[r]
    }

    /// `S · x` for `x: [cols, n]`.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, n) = x.dims2()?;
        if m != self.cols {
            return Err(dim_err("sparse_mm", &[self.rows, self.cols], x.shape()));
        }
        let mut out = vec![T::zero(); self.rows * n];
        let xd = x.data();
        for (r, row) in self.entries.iter().enumerate() {
            let o = &mut out[r * n..(r + 1) * n];
            for &(c, w) in row {
                for (ov, &xv) in o.iter_mut().zip(&xd[c * n..(c + 1) * n]) {
                    *ov += w * xv;
                }
            }
        }
        Tensor::new(&[self.rows, n], out)
    }

    /// `out += Sᵀ · g` for `g: [rows, n]`, `out: [cols, n]`.
    pub(crate) fn apply_transpose_acc(&self, g: &[T], out: &mut [T], n: usize) {
        for (r, row) in self.entries.iter().enumerate() {
            let gr = &g[r * n..(r + 1) * n];
            for &(c, w) in row {
                for (ov, &gv) in out[c * n..(c + 1) * n].iter_mut().zip(gr) {
                    *ov += w * gv;
                }
            }
        }
    }

    pub fn to_dense(&self) -> Tensor<T> {
        let mut t = Tensor::zeros(&[self.rows, self.cols]);
        let cols = self.cols;
        for (r, row) in self.entries.iter().enumerate() {
            for &(c, w) in row {
                t.data_mut()[r * cols + c] += w;
            }
        }
        t
    }
}

/// 1-D linear interpolation weights from `n_in` samples to `n_out` samples.
fn linear_weights(n_in: usize, n_out: usize, align_corners: bool) -> Vec<[(usize, f64); 2]> {
    (0..n_out)
        .map(|o| {
            let src = if align_corners {
                if n_out == 1 {
                    0.0
                } else {
                    o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
                }
            } else {
                ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0)
            };
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let t = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            [(i0, 1.0 - t), (i1, t)]
        })
        .collect()
}

/// Bilinear resampling of a raster-ordered `h_in × w_in` grid to `h_out × w_out`.
///
/// `align_corners = false` uses half-pixel centres; `true` maps corner samples onto corner
/// samples. Same-size resampling is the identity in either mode.
pub fn bilinear<T: Real>(
    (h_in, w_in): (usize, usize),
    (h_out, w_out): (usize, usize),
    align_corners: bool,
) -> SparseMatrix<T> {
    let wy = linear_weights(h_in, h_out, align_corners);
    let wx = linear_weights(w_in, w_out, align_corners);
    let mut entries = Vec::with_capacity(h_out * w_out);
    for ys in &wy {
        for xs in &wx {
            let mut row: Vec<(usize, T)> = Vec::with_capacity(4);
            for &(iy, ay) in ys {
                for &(ix, ax) in xs {
                    let w = ay * ax;
                    if w == 0.0 {
                        continue;
                    }
                    let c = iy * w_in + ix;
                    match row.iter_mut().find(|(cc, _)| *cc == c) {
                        Some(e) => e.1 += T::lit(w),
                        None => row.push((c, T::lit(w))),
                    }
                }
            }
            entries.push(row);
        }
    }
    SparseMatrix::from_rows(h_in * w_in, entries)
}

/// Average pooling with square windows of side `ratio`. With `ceil_mode` a trailing partial
/// window averages the cells it covers; otherwise the grid must be divisible by `ratio`.
pub fn avg_pool<T: Real>(
    (h, w): (usize, usize),
    ratio: usize,
    ceil_mode: bool,
) -> Result<SparseMatrix<T>> {
    if ratio == 0 {
        return Err(contract("pooling ratio must be positive"));
    }
    if !ceil_mode && (h % ratio != 0 || w % ratio != 0) {
        return Err(contract(format!(
            "pooling ratio {ratio} does not divide grid {h}x{w}"
        )));
    }
    let (ho, wo) = (h.div_ceil(ratio), w.div_ceil(ratio));
    let mut entries = Vec::with_capacity(ho * wo);
    for oy in 0..ho {
        for ox in 0..wo {
            let ys = oy * ratio..((oy + 1) * ratio).min(h);
            let xs = ox * ratio..((ox + 1) * ratio).min(w);
            let count = (ys.len() * xs.len()) as f64;
            let mut row = Vec::with_capacity(ys.len() * xs.len());
            for y in ys {
                for x in xs.clone() {
                    row.push((y * w + x, T::lit(1.0 / count)));
                }
            }
            entries.push(row);
        }
    }
    Ok(SparseMatrix::from_rows(h * w, entries))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_bilinear_is_identity() {
        for align in [false, true] {
            let s = bilinear::<f64>((5, 5), (5, 5), align);
            assert_eq!(s.to_dense(), Tensor::identity(25));
        }
    }

    #[test]
    fn bilinear_rows_are_convex_combinations() {
        let s = bilinear::<f64>((7, 7), (28, 28), false);
        for r in 0..s.rows() {
            let sum: f64 = s.row(r).iter().map(|e| e.1).sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(s.row(r).iter().all(|e| e.1 >= 0.0));
        }
    }

    #[test]
    fn align_corners_keeps_corners() {
        let s = bilinear::<f64>((7, 7), (4, 4), true);
        let x = Tensor::from_fn(&[49, 1], |i| i as f64);
        let y = s.apply(&x).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[3], 6.0);
        assert_eq!(y.data()[12], 42.0);
        assert_eq!(y.data()[15], 48.0);
    }

    #[test]
    fn full_pool_is_mean() {
        let p = avg_pool::<f64>((7, 7), 7, false).unwrap();
        let x = Tensor::from_fn(&[49, 2], |i| i as f64);
        let y = p.apply(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert!((y.data()[0] - 48.0).abs() < 1e-12);
    }

    #[test]
    fn non_dividing_ratio_rejected() {
        assert!(avg_pool::<f32>((7, 7), 2, false).is_err());
        let ceil = avg_pool::<f32>((7, 7), 2, true).unwrap();
        assert_eq!(ceil.rows(), 16);
        assert_eq!(ceil.row(15).len(), 1);
    }
}
