//! Natural cubic splines (zero second derivative at both ends), used to
//! differentiate sampled, possibly noisy, data.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct NaturalCubicSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl NaturalCubicSpline {
    pub fn new(x: &[f64], y: &[f64]) -> Result<Self> {
        let n = x.len();
        if n != y.len() {
            return Err(Error::ShapeMismatch(format!(
                "spline abscissae ({n}) and ordinates ({}) differ in length",
                y.len()
            )));
        }
        if n < 2 {
            return Err(Error::DegenerateAbscissae(format!("need at least 2 knots, got {n}")));
        }
        for w in x.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::DegenerateAbscissae(format!(
                    "knots must be strictly increasing ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        let mut m = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm on the interior second derivatives.
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut upper = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for r in 0..k {
                let i = r + 1;
                let h0 = x[i] - x[i - 1];
                let h1 = x[i + 1] - x[i];
                diag[r] = 2.0 * (h0 + h1);
                upper[r] = h1;
                rhs[r] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
            }
            for r in 1..k {
                let lower = x[r + 1] - x[r];
                let f = lower / diag[r - 1];
                diag[r] -= f * upper[r - 1];
                rhs[r] -= f * rhs[r - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for r in (0..k - 1).rev() {
                m[r + 1] = (rhs[r] - upper[r] * m[r + 2]) / diag[r];
            }
        }
        Ok(Self {
            x: x.to_vec(),
            y: y.to_vec(),
            m,
        })
    }

    /// Spline through samples at `x_i = x0 + i h`.
    pub fn uniform(x0: f64, h: f64, y: &[f64]) -> Result<Self> {
        let x: Vec<f64> = (0..y.len()).map(|i| x0 + i as f64 * h).collect();
        Self::new(&x, y)
    }

    fn segment(&self, t: f64) -> usize {
        let n = self.x.len();
        match self.x.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
            Ok(i) => i.min(n - 2),
            Err(0) => 0,
            Err(i) => (i - 1).min(n - 2),
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let i = self.segment(t);
        let h = self.x[i + 1] - self.x[i];
        let a = (self.x[i + 1] - t) / h;
        let b = (t - self.x[i]) / h;
        a * self.y[i]
            + b * self.y[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }

    pub fn derivative(&self, t: f64) -> f64 {
        let i = self.segment(t);
        let h = self.x[i + 1] - self.x[i];
        let a = (self.x[i + 1] - t) / h;
        let b = (t - self.x[i]) / h;
        (self.y[i + 1] - self.y[i]) / h
            + ((1.0 - 3.0 * a * a) * self.m[i] + (3.0 * b * b - 1.0) * self.m[i + 1]) * h / 6.0
    }

    pub fn second_derivative(&self, t: f64) -> f64 {
        let i = self.segment(t);
        let h = self.x[i + 1] - self.x[i];
        let b = (t - self.x[i]) / h;
        (1.0 - b) * self.m[i] + b * self.m[i + 1]
    }

    /// `s'` at the knots.
    pub fn knot_derivatives(&self) -> Vec<f64> {
        let n = self.x.len();
        (0..n)
            .map(|i| {
                if i + 1 < n {
                    let h = self.x[i + 1] - self.x[i];
                    (self.y[i + 1] - self.y[i]) / h - h * (2.0 * self.m[i] + self.m[i + 1]) / 6.0
                } else {
                    let h = self.x[i] - self.x[i - 1];
                    (self.y[i] - self.y[i - 1]) / h + h * (self.m[i - 1] + 2.0 * self.m[i]) / 6.0
                }
            })
            .collect()
    }

    /// `s''` at the knots.
    pub fn knot_second_derivatives(&self) -> &[f64] {
        &self.m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproduces_affine_data() {
        let y: Vec<f64> = (0..11).map(|i| 2.0 - 0.7 * (i as f64 * 0.1)).collect();
        let s = NaturalCubicSpline::uniform(0.0, 0.1, &y).unwrap();
        for d in s.knot_derivatives() {
            assert!((d + 0.7).abs() < 1e-13);
        }
        for d in s.knot_second_derivatives() {
            assert!(d.abs() < 1e-12);
        }
        assert!((s.eval(0.55) - (2.0 - 0.7 * 0.55)).abs() < 1e-14);
    }

    #[test]
    fn knot_values_match_pointwise_evaluation() {
        let x = [0.0, 0.3, 0.5, 1.1, 1.4];
        let y = [1.0, -0.2, 0.4, 0.9, 0.1];
        let s = NaturalCubicSpline::new(&x, &y).unwrap();
        let d = s.knot_derivatives();
        for (i, xi) in x.iter().enumerate() {
            assert!((s.eval(*xi) - y[i]).abs() < 1e-14);
            assert!((s.derivative(*xi) - d[i]).abs() < 1e-12);
            assert!((s.second_derivative(*xi) - s.knot_second_derivatives()[i]).abs() < 1e-12);
        }
        assert_eq!(s.second_derivative(0.0), 0.0);
        assert_eq!(s.second_derivative(1.4), 0.0);
    }

    #[test]
    fn derivative_is_consistent_with_values() {
        let y: Vec<f64> = (0..9).map(|i| (i as f64 * 0.25).cos()).collect();
        let s = NaturalCubicSpline::uniform(0.0, 0.25, &y).unwrap();
        let h = 1e-6;
        for t in [0.1, 0.77, 1.3, 1.9] {
            let fd = (s.eval(t + h) - s.eval(t - h)) / (2.0 * h);
            assert!((fd - s.derivative(t)).abs() < 1e-7);
            let fd2 = (s.derivative(t + h) - s.derivative(t - h)) / (2.0 * h);
            assert!((fd2 - s.second_derivative(t)).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_duplicate_knots() {
        assert!(NaturalCubicSpline::new(&[0.0, 1.0, 1.0, 2.0], &[0.0; 4]).is_err());
        assert!(NaturalCubicSpline::new(&[0.0, 1.0], &[0.0]).is_err());
    }
}
