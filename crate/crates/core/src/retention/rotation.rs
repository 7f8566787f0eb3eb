//! Position-dependent rotation of query/key channel pairs, the real-valued
//! form of multiplying complex channels by `e^{i n theta}`.

use segkit_tensor::{kernels, Element, Tensor};

use crate::error::{Result, SegError};

/// Geometrically spaced angles `theta_j = 10000^(-j/(pairs-1))`, one per channel pair.
pub fn default_theta(d_k: usize) -> Vec<f64> {
    let pairs = d_k / 2;
    if pairs == 1 {
        return vec![1.0];
    }
    (0..pairs)
        .map(|j| 10000f64.powf(-(j as f64) / (pairs - 1) as f64))
        .collect()
}

/// `[n, pairs]` table of `pos * theta_j` for positions `0..n`.
pub fn angles_1d<T: Element>(n: usize, theta: &[f64]) -> Tensor<T> {
    let pairs = theta.len();
    Tensor::from_fn(&[n, pairs], |i| T::lit((i / pairs) as f64 * theta[i % pairs]))
}

/// `[h*w, pairs]` table for a row-major grid. Even pairs rotate with the
/// column coordinate x, odd pairs with the row coordinate y.
pub fn angles_2d<T: Element>(h: usize, w: usize, theta: &[f64]) -> Tensor<T> {
    let pairs = theta.len();
    Tensor::from_fn(&[h * w, pairs], |i| {
        let (t, j) = (i / pairs, i % pairs);
        let coord = if j % 2 == 0 { t % w } else { t / w };
        T::lit(coord as f64 * theta[j])
    })
}

/// Rotates row `n` of `x [n, d_k]` by `direction * n * theta_j` on each
/// channel pair `(2j, 2j+1)`. Direction `-1` undoes direction `+1`.
pub fn apply_rotation<T: Element>(x: &Tensor<T>, theta: &[f64], direction: i32) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(SegError::Config(format!(
            "apply_rotation expects [N, d_k], got {:?}",
            x.shape()
        )));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if d % 2 != 0 {
        return Err(SegError::Config(format!("rotation needs an even d_k, got {d}")));
    }
    if theta.len() != d / 2 {
        return Err(SegError::Config(format!(
            "expected {} rotation angles for d_k={d}, got {}",
            d / 2,
            theta.len()
        )));
    }
    if direction != 1 && direction != -1 {
        return Err(SegError::Config(format!(
            "rotation direction must be +1 or -1, got {direction}"
        )));
    }
    Ok(kernels::rotate_pairs(x, &angles_1d(n, theta), direction < 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize, d: usize) -> Tensor<f64> {
        Tensor::from_fn(&[n, d], |i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0)
    }

    #[test]
    fn position_zero_is_unchanged() {
        let x = sample(4, 6);
        let y = apply_rotation(&x, &[0.3, 1.7, 2.9], 1).unwrap();
        assert_eq!(&y.data()[..6], &x.data()[..6]);
    }

    #[test]
    fn zero_angles_are_identity() {
        let x = sample(5, 4);
        assert_eq!(apply_rotation(&x, &[0.0, 0.0], 1).unwrap(), x);
    }

    #[test]
    fn inverse_direction_restores() {
        let x = sample(9, 8);
        let theta = default_theta(8);
        let y = apply_rotation(&x, &theta, 1).unwrap();
        let back = apply_rotation(&y, &theta, -1).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn odd_width_rejected() {
        let x = sample(2, 3);
        assert!(apply_rotation(&x, &[0.1], 1).is_err());
    }

    #[test]
    fn default_theta_is_geometric() {
        let t = default_theta(8);
        assert_eq!(t.len(), 4);
        assert_eq!(t[0], 1.0);
        assert!((t[3] - 1e-4).abs() < 1e-16);
        let r1 = t[1] / t[0];
        let r2 = t[2] / t[1];
        assert!((r1 - r2).abs() < 1e-12);
    }
}
