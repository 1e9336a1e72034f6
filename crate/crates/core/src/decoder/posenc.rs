use crate::tensor::Tensor;

/// Fixed 2-D sinusoidal encoding for a `grid_h × grid_w` patch grid, as a
/// `[grid_h·grid_w × dim]` tensor. The first half of each row encodes the row
/// index, the second half the column index; each half interleaves sin/cos
/// pairs over frequencies spaced geometrically from 1 to `1 / base`. `dim`
/// must be divisible by 4.
pub fn sinusoidal_2d(grid_h: usize, grid_w: usize, dim: usize, base: f64) -> Tensor {
    assert!(dim.is_multiple_of(4), "position encoding width {dim} not divisible by 4");
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half / 2)
        .map(|i| 1.0 / base.powf(2.0 * i as f64 / half as f64))
        .collect();
    let mut data = Vec::with_capacity(grid_h * grid_w * dim);
    for r in 0..grid_h {
        for c in 0..grid_w {
            for pos in [r as f64, c as f64] {
                for &f in &freqs {
                    data.push((pos * f).sin());
                    data.push((pos * f).cos());
                }
            }
        }
    }
    Tensor::new(vec![grid_h * grid_w, dim], data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_row_is_sin0_cos0() {
        let pe = sinusoidal_2d(2, 3, 8, 20.0);
        assert_eq!(pe.dims(), &[6, 8]);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        // patch (0, 1): row half unchanged, column half at position 1
        assert_eq!(&pe.row(1)[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.row(1)[4] - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn frequencies_span_one_to_inverse_base() {
        // dim 16: each half holds 4 pairs with frequencies 1, b^-1/4, b^-1/2, b^-3/4
        let pe = sinusoidal_2d(1, 2, 16, 16.0);
        let col = pe.row(1);
        for (i, f) in [1.0, 0.5, 0.25, 0.125].iter().enumerate() {
            assert!((col[8 + 2 * i] - f64::sin(*f)).abs() < 1e-15);
            assert!((col[8 + 2 * i + 1] - f64::cos(*f)).abs() < 1e-15);
        }
    }

    #[test]
    fn rows_are_distinct() {
        let pe = sinusoidal_2d(4, 4, 16, 20.0);
        for i in 0..16 {
            for j in i + 1..16 {
                assert_ne!(pe.row(i), pe.row(j));
            }
        }
    }
}
