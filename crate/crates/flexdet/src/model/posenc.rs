//! Fixed sinusoidal position encoding for flattened feature maps.

use crate::nn::Arr;
use ndarray::IxDyn;

/// `[h·w, d]` two-dimensional sine/cosine encoding: the first half of the
/// channel dimension encodes the row coordinate, the second half the column,
/// each as interleaved sin/cos at geometrically spaced frequencies. Rows are
/// laid out row-major, matching a flattened `[C, h, w]` map.
pub fn sincos_2d(h: usize, w: usize, d: usize) -> Arr {
    assert!(d % 4 == 0, "position encoding needs d divisible by 4");
    let quarter = d / 4;
    let mut pe = Arr::zeros(IxDyn(&[h * w, d]));
    let tau = std::f64::consts::TAU;
    for y in 0..h {
        for x in 0..w {
            let row = y * w + x;
            let yn = (y as f64 + 0.5) / h as f64 * tau;
            let xn = (x as f64 + 0.5) / w as f64 * tau;
            for i in 0..quarter {
                let freq = 10000f64.powf(-(i as f64) / quarter as f64);
                pe[[row, 2 * i]] = (yn * freq).sin();
                pe[[row, 2 * i + 1]] = (yn * freq).cos();
                pe[[row, d / 2 + 2 * i]] = (xn * freq).sin();
                pe[[row, d / 2 + 2 * i + 1]] = (xn * freq).cos();
            }
        }
    }
    pe
}

/// Anchor centers of an `h×w` grid at `stride`, in pixels: `[h·w, 2]` rows of
/// `(cx, cy)`, row-major.
pub fn grid_centers(h: usize, w: usize, stride: usize) -> Arr {
    let mut c = Arr::zeros(IxDyn(&[h * w, 2]));
    for y in 0..h {
        for x in 0..w {
            c[[y * w + x, 0]] = (x as f64 + 0.5) * stride as f64;
            c[[y * w + x, 1]] = (y as f64 + 0.5) * stride as f64;
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoding_rows_are_unit_scale_and_distinct() {
        let pe = sincos_2d(4, 4, 16);
        assert_eq!(pe.shape(), &[16, 16]);
        assert!(pe.iter().all(|v| v.abs() <= 1.0));
        // sin²+cos² per frequency pair sums to d/2 per row.
        let row = pe.index_axis(ndarray::Axis(0), 3);
        let sumsq: f64 = row.iter().map(|v| v * v).sum();
        assert!((sumsq - 8.0).abs() < 1e-9, "sum of squares {sumsq}");
        // Different positions, different codes.
        let a = pe.index_axis(ndarray::Axis(0), 0).to_owned();
        let b = pe.index_axis(ndarray::Axis(0), 5).to_owned();
        assert!(a.iter().zip(b.iter()).any(|(x, y)| (x - y).abs() > 1e-3));
    }

    #[test]
    fn centers_are_cell_midpoints() {
        let c = grid_centers(2, 3, 8);
        assert_eq!(c.shape(), &[6, 2]);
        assert_eq!(c[[0, 0]], 4.0);
        assert_eq!(c[[0, 1]], 4.0);
        assert_eq!(c[[5, 0]], 20.0);
        assert_eq!(c[[5, 1]], 12.0);
    }
}
