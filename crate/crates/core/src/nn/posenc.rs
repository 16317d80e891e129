use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Fixed sinusoidal encoding for an `h x w` grid, one row per cell in
/// row-major order.
///
/// Channels `0..D/2` encode the row index and `D/2..D` the column index. In
/// each half, channel pair `(2i, 2i+1)` holds `sin(p * w_i), cos(p * w_i)`
/// with `w_i = 10000^(-4i/D)`.
pub fn positional_encoding_2d<T: Scalar>(h: usize, w: usize, d: usize) -> Result<Matrix<T>> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::BadDim(d));
    }
    let half = d / 2;
    let freqs: Vec<f64> = (0..half / 2)
        .map(|i| 10000f64.powf(-((2 * i) as f64) / half as f64))
        .collect();
    let mut pe = Matrix::zeros(h * w, d);
    for r in 0..h {
        for c in 0..w {
            let row = pe.row_mut(r * w + c);
            for (i, &f) in freqs.iter().enumerate() {
                row[2 * i] = T::of((r as f64 * f).sin());
                row[2 * i + 1] = T::of((r as f64 * f).cos());
                row[half + 2 * i] = T::of((c as f64 * f).sin());
                row[half + 2 * i + 1] = T::of((c as f64 * f).cos());
            }
        }
    }
    Ok(pe)
}
