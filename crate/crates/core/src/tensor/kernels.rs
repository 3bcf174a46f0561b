//! Raw loops behind the tape operations.

use super::Scalar;

/// Row-major `c = a' * b' + beta * c`, where `'` is an optional transpose.
///
/// `a` is `m×k` (or `k×m` when `trans_a`), `b` is `k×n` (or `n×k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above bounds every strided access.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output columns `lo..hi` whose input column for kernel offset `j` is in
    /// bounds.
    fn valid_cols(&self, j: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(j).div_ceil(self.stride).min(self.ow);
        let hi = (self.w + self.padding).saturating_sub(j).div_ceil(self.stride).min(self.ow);
        (lo, hi.max(lo))
    }

    fn input_row(&self, oy: usize, i: usize) -> Option<usize> {
        (oy * self.stride + i)
            .checked_sub(self.padding)
            .filter(|&iy| iy < self.h)
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfold one CHW sample into a `(C·kh·kw) × (oh·ow)` matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[row * cols..(row + 1) * cols];
                let (lo, hi) = g.valid_cols(j);
                for oy in 0..g.oh {
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let Some(iy) = g.input_row(oy, i) else {
                        out_row.fill(T::zero());
                        continue;
                    };
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    if lo < hi {
                        let first = lo * g.stride + j - g.padding;
                        if g.stride == 1 {
                            out_row[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (o, s) in out_row[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                                *o = *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add the column matrix back into a CHW sample.
pub fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &col[row * cols..(row + 1) * cols];
                let (lo, hi) = g.valid_cols(j);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + j - g.padding;
                for oy in 0..g.oh {
                    let Some(iy) = g.input_row(oy, i) else { continue };
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let s_row = &src[oy * g.ow + lo..oy * g.ow + hi];
                    for (d, &v) in dst[first..].iter_mut().step_by(g.stride).zip(s_row) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// Sparse area-averaging weights mapping `src` cells onto `dst` cells.
///
/// Output cell `i` covers `[i·src/dst, (i+1)·src/dst)` in input coordinates;
/// each input cell contributes its overlap length divided by the cell width.
/// Overlaps are computed in integer units of `1/dst`, so the weights are exact
/// rationals before the final division.
pub fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    (0..dst)
        .map(|i| {
            let lo = i * src;
            let hi = (i + 1) * src;
            let first = lo / dst;
            let last = (hi - 1) / dst;
            (first..=last)
                .filter_map(|r| {
                    let cell_lo = r * dst;
                    let cell_hi = (r + 1) * dst;
                    let overlap = hi.min(cell_hi).saturating_sub(lo.max(cell_lo));
                    (overlap > 0).then(|| (r, overlap as f64 / src as f64))
                })
                .collect()
        })
        .collect()
}

/// Separable resampling of each `h×w` plane to `th×tw`.
pub fn resample_planes<T: Scalar>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (th, tw): (usize, usize),
    rows: &[Vec<(usize, f64)>],
    cols: &[Vec<(usize, f64)>],
) -> Vec<T> {
    let mut out = vec![T::zero(); planes * th * tw];
    let mut tmp = vec![T::zero(); h * tw];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for r in 0..h {
            for (j, taps) in cols.iter().enumerate() {
                let mut acc = T::zero();
                for &(q, wt) in taps {
                    acc = acc + T::from_f64(wt) * src[r * w + q];
                }
                tmp[r * tw + j] = acc;
            }
        }
        let dst = &mut out[p * th * tw..(p + 1) * th * tw];
        for (i, taps) in rows.iter().enumerate() {
            for j in 0..tw {
                let mut acc = T::zero();
                for &(r, wt) in taps {
                    acc = acc + T::from_f64(wt) * tmp[r * tw + j];
                }
                dst[i * tw + j] = acc;
            }
        }
    }
    out
}

/// Transpose of [`resample_planes`].
pub fn resample_planes_adjoint<T: Scalar>(
    dy: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (th, tw): (usize, usize),
    rows: &[Vec<(usize, f64)>],
    cols: &[Vec<(usize, f64)>],
) -> Vec<T> {
    let mut dx = vec![T::zero(); planes * h * w];
    let mut tmp = vec![T::zero(); h * tw];
    for p in 0..planes {
        tmp.fill(T::zero());
        let g = &dy[p * th * tw..(p + 1) * th * tw];
        for (i, taps) in rows.iter().enumerate() {
            for &(r, wt) in taps {
                for j in 0..tw {
                    tmp[r * tw + j] = tmp[r * tw + j] + T::from_f64(wt) * g[i * tw + j];
                }
            }
        }
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for r in 0..h {
            for (j, taps) in cols.iter().enumerate() {
                let v = tmp[r * tw + j];
                for &(q, wt) in taps {
                    dst[r * w + q] = dst[r * w + q] + T::from_f64(wt) * v;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_weights_rows_sum_to_one() {
        for (src, dst) in [(64, 16), (7, 3), (3, 7), (5, 5), (1, 4)] {
            for row in area_weights(src, dst) {
                let s: f64 = row.iter().map(|(_, w)| w).sum();
                assert!((s - 1.0).abs() < 1e-12, "{src}->{dst}: {s}");
            }
        }
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(false, false, 2, 2, 2, &a, &b, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(true, false, 2, 2, 2, &a, &b, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(false, true, 2, 2, 2, &a, &b, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
