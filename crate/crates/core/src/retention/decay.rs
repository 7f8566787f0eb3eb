//! Exponential decay masks: causal, bidirectional, 2D Manhattan and axial.

use std::fmt::Write as _;
use std::path::Path;

use segkit_tensor::{Element, Tensor};

use crate::error::{io_err, Result, SegError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecayKind {
    /// `gamma^(n-m)` for `n >= m`, zero above the diagonal.
    Causal,
    /// `gamma^|n-m|`.
    Bidirectional,
    /// `gamma^(|x_n-x_m| + |y_n-y_m|)` over a row-major grid.
    Manhattan2d,
    /// `gamma^|y_n-y_m|` over image rows.
    AxialH,
    /// `gamma^|x_n-x_m|` over image columns.
    AxialW,
}

/// Square decay matrix. Entries lie in `[0, 1]` and the diagonal is exactly 1.
#[derive(Clone, Debug, PartialEq)]
pub struct DecayMask {
    pub kind: DecayKind,
    pub gamma: f64,
    matrix: Tensor<f64>,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(SegError::Config(format!("decay gamma must lie in (0, 1], got {gamma}")))
    }
}

fn check_size(what: &str, n: usize) -> Result<()> {
    if n == 0 {
        return Err(SegError::Config(format!("decay mask {what} must be at least 1")));
    }
    Ok(())
}

fn powers(gamma: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| gamma.powi(k as i32)).collect()
}

impl DecayMask {
    pub fn matrix(&self) -> &Tensor<f64> {
        &self.matrix
    }

    /// Side length of the square matrix.
    pub fn size(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn get(&self, n: usize, m: usize) -> f64 {
        self.matrix.get(&[n, m])
    }

    pub fn cast<T: Element>(&self) -> Tensor<T> {
        self.matrix.cast()
    }

    /// Writes the matrix as comma-separated rows.
    pub fn to_csv(&self) -> String {
        let n = self.size();
        let mut out = String::new();
        for row in self.matrix.data().chunks(n) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    pub fn dump_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(io_err(path))
    }
}

pub fn build_causal_decay(gamma: f64, n: usize) -> Result<DecayMask> {
    check_gamma(gamma)?;
    check_size("length", n)?;
    let pw = powers(gamma, n);
    let matrix = Tensor::from_fn(&[n, n], |i| {
        let (r, c) = (i / n, i % n);
        if r >= c {
            pw[r - c]
        } else {
            0.0
        }
    });
    Ok(DecayMask {
        kind: DecayKind::Causal,
        gamma,
        matrix,
    })
}

fn symmetric(kind: DecayKind, gamma: f64, n: usize) -> Result<DecayMask> {
    check_gamma(gamma)?;
    check_size("length", n)?;
    let pw = powers(gamma, n);
    let matrix = Tensor::from_fn(&[n, n], |i| pw[(i / n).abs_diff(i % n)]);
    Ok(DecayMask { kind, gamma, matrix })
}

pub fn build_bidirectional_decay(gamma: f64, n: usize) -> Result<DecayMask> {
    symmetric(DecayKind::Bidirectional, gamma, n)
}

/// Returns `(D^H, D^W)`: the `h x h` row-distance and `w x w` column-distance masks.
pub fn build_axial_decays(gamma: f64, h: usize, w: usize) -> Result<(DecayMask, DecayMask)> {
    Ok((
        symmetric(DecayKind::AxialH, gamma, h)?,
        symmetric(DecayKind::AxialW, gamma, w)?,
    ))
}

/// `(hw) x (hw)` Manhattan mask over a row-major grid, token `t` at
/// `(y, x) = (t / w, t % w)`. Built as the product of the two axial masks so
/// that it factorizes exactly.
pub fn build_2d_decay(gamma: f64, h: usize, w: usize) -> Result<DecayMask> {
    check_gamma(gamma)?;
    check_size("height", h)?;
    check_size("width", w)?;
    // same power tables as the axial masks, so entries are exactly D^H * D^W
    let (ph, pw) = (powers(gamma, h), powers(gamma, w));
    let n = h * w;
    let mut data = vec![0.0; n * n];
    for (p, row) in data.chunks_exact_mut(n).enumerate() {
        let (yp, xp) = (p / w, p % w);
        for (yq, seg) in row.chunks_exact_mut(w).enumerate() {
            let a = ph[yp.abs_diff(yq)];
            for (xq, v) in seg.iter_mut().enumerate() {
                *v = a * pw[xp.abs_diff(xq)];
            }
        }
    }
    let matrix = Tensor::from_vec_unchecked(&[n, n], data)?;
    Ok(DecayMask {
        kind: DecayKind::Manhattan2d,
        gamma,
        matrix,
    })
}

/// Stacks one mask per head into `[heads, n, n]`.
pub(crate) fn stack<T: Element>(masks: &[DecayMask]) -> Tensor<T> {
    let n = masks[0].size();
    let mut data = Vec::with_capacity(masks.len() * n * n);
    for m in masks {
        data.extend(m.matrix.data().iter().map(|&v| T::lit(v)));
    }
    Tensor::from_vec_unchecked(&[masks.len(), n, n], data).expect("consistent mask sizes")
}
