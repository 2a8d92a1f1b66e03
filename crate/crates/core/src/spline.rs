//! Interpolating cubic spline over 3-D samples.
//!
//! Uses not-a-knot end conditions, so any cubic polynomial trajectory is
//! reproduced exactly. With fewer than four knots it degrades to the
//! interpolating polynomial (constant, line, parabola).

use nalgebra::{DMatrix, Vector3};

use crate::error::{MocapError, Result};

#[derive(Clone, Debug)]
pub struct CubicSpline {
    xs: Vec<f64>,
    ys: Vec<Vector3<f64>>,
    second: Vec<Vector3<f64>>,
}

impl CubicSpline {
    /// `xs` must be strictly increasing.
    pub fn new(xs: &[f64], ys: &[Vector3<f64>]) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(MocapError::Shape("spline needs matching, non-empty knots".into()));
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(MocapError::Degenerate("spline knots are not strictly increasing".into()));
        }
        let n = xs.len();
        let second = if n < 4 {
            vec![Vector3::zeros(); n]
        } else {
            solve_second_derivatives(xs, ys)?
        };
        Ok(Self {
            xs: xs.to_vec(),
            ys: ys.to_vec(),
            second,
        })
    }

    pub fn eval(&self, x: f64) -> Vector3<f64> {
        let n = self.xs.len();
        match n {
            1 => self.ys[0],
            2 | 3 => lagrange(&self.xs, &self.ys, x),
            _ => {
                let i = match self.xs.iter().position(|&k| k > x) {
                    Some(0) => 0,
                    Some(p) => (p - 1).min(n - 2),
                    None => n - 2,
                };
                let (x0, x1) = (self.xs[i], self.xs[i + 1]);
                let h = x1 - x0;
                let (a, b) = (x1 - x, x - x0);
                let (m0, m1) = (self.second[i], self.second[i + 1]);
                m0 * (a * a * a / (6.0 * h))
                    + m1 * (b * b * b / (6.0 * h))
                    + (self.ys[i] / h - m0 * (h / 6.0)) * a
                    + (self.ys[i + 1] / h - m1 * (h / 6.0)) * b
            }
        }
    }
}

fn lagrange(xs: &[f64], ys: &[Vector3<f64>], x: f64) -> Vector3<f64> {
    let mut out = Vector3::zeros();
    for i in 0..xs.len() {
        let mut w = 1.0;
        for j in 0..xs.len() {
            if i != j {
                w *= (x - xs[j]) / (xs[i] - xs[j]);
            }
        }
        out += ys[i] * w;
    }
    out
}

fn solve_second_derivatives(xs: &[f64], ys: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>> {
    let n = xs.len();
    let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DMatrix::<f64>::zeros(n, 3);
    // Third derivative continuous across the second and second-to-last knots.
    a[(0, 0)] = h[1];
    a[(0, 1)] = -(h[0] + h[1]);
    a[(0, 2)] = h[0];
    a[(n - 1, n - 3)] = h[n - 2];
    a[(n - 1, n - 2)] = -(h[n - 3] + h[n - 2]);
    a[(n - 1, n - 1)] = h[n - 3];
    for i in 1..n - 1 {
        a[(i, i - 1)] = h[i - 1];
        a[(i, i)] = 2.0 * (h[i - 1] + h[i]);
        a[(i, i + 1)] = h[i];
        let d = (ys[i + 1] - ys[i]) / h[i] - (ys[i] - ys[i - 1]) / h[i - 1];
        for c in 0..3 {
            rhs[(i, c)] = 6.0 * d[c];
        }
    }
    let sol = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| MocapError::Degenerate("singular spline system".into()))?;
    Ok((0..n).map(|i| Vector3::new(sol[(i, 0)], sol[(i, 1)], sol[(i, 2)])).collect())
}
