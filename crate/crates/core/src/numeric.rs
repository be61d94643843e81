//! Small numerical helpers: intervals, least squares, tridiagonal spectra.

use serde::{Deserialize, Serialize};

/// Closed interval `[lower, upper]`; `upper` may be `+inf`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn new(lower: f64, upper: f64) -> Self {
        debug_assert!(lower <= upper || upper.is_nan(), "empty interval [{lower}, {upper}]");
        Interval { lower, upper }
    }

    pub fn point(v: f64) -> Self {
        Interval { lower: v, upper: v }
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }

    pub fn overlaps(&self, other: &Interval) -> bool {
        self.lower <= other.upper && other.lower <= self.upper
    }

    pub fn is_finite(&self) -> bool {
        self.lower.is_finite() && self.upper.is_finite()
    }

    /// Product of two nonnegative intervals.
    pub fn mul(&self, other: &Interval) -> Interval {
        Interval::new(self.lower * other.lower, mul_inf(self.upper, other.upper))
    }

    /// Quotient of nonnegative intervals; the divisor must have positive lower end
    /// for a finite upper end.
    pub fn div(&self, other: &Interval) -> Interval {
        let lower = if other.upper.is_infinite() { 0.0 } else { self.lower / other.upper };
        let upper = if other.lower > 0.0 { self.upper / other.lower } else { f64::INFINITY };
        Interval::new(lower, upper)
    }

    pub fn add(&self, other: &Interval) -> Interval {
        Interval::new(self.lower + other.lower, self.upper + other.upper)
    }

    pub fn sub(&self, other: &Interval) -> Interval {
        Interval::new(self.lower - other.upper, self.upper - other.lower)
    }

    pub fn scale(&self, c: f64) -> Interval {
        if c >= 0.0 {
            Interval::new(self.lower * c, self.upper * c)
        } else {
            Interval::new(self.upper * c, self.lower * c)
        }
    }

    /// `|x - 1|` over the interval.
    pub fn distance_from_one(&self) -> Interval {
        if self.contains(1.0) {
            Interval::new(0.0, (self.upper - 1.0).max(1.0 - self.lower))
        } else if self.lower > 1.0 {
            Interval::new(self.lower - 1.0, self.upper - 1.0)
        } else {
            Interval::new(1.0 - self.upper, 1.0 - self.lower)
        }
    }
}

fn mul_inf(a: f64, b: f64) -> f64 {
    if a == 0.0 || b == 0.0 {
        0.0
    } else {
        a * b
    }
}

/// Least-squares solution of `A c = y` for a tall matrix given by columns,
/// via the normal equations with partial pivoting. Columns are scaled first.
pub fn least_squares(columns: &[Vec<f64>], y: &[f64]) -> Option<Vec<f64>> {
    let p = columns.len();
    let scale: Vec<f64> = columns
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE))
        .collect();
    let mut m = vec![vec![0.0; p + 1]; p];
    for i in 0..p {
        for j in 0..p {
            m[i][j] = columns[i].iter().zip(&columns[j]).map(|(a, b)| a * b).sum::<f64>() / (scale[i] * scale[j]);
        }
        m[i][p] = columns[i].iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / scale[i];
    }
    let x = solve_dense(m)?;
    Some(x.iter().zip(&scale).map(|(v, s)| v / s).collect())
}

/// Gaussian elimination on an augmented `n x (n+1)` matrix.
pub fn solve_dense(mut m: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let n = m.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[piv][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for k in col..=n {
                m[row][k] -= f * m[col][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| m[row][k] * x[k]).sum();
        x[row] = (m[row][n] - s) / m[row][row];
    }
    Some(x)
}

/// Slope and intercept of the ordinary least-squares line, with the residual
/// standard deviation.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let ss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let dof = (x.len() as f64 - 2.0).max(1.0);
    (slope, intercept, (ss / dof).sqrt())
}

/// Largest eigenvalue of the symmetric tridiagonal matrix with diagonal
/// `alpha` and off-diagonal `beta` (Sturm bisection).
pub fn tridiagonal_max_eigenvalue(alpha: &[f64], beta: &[f64]) -> f64 {
    let n = alpha.len();
    if n == 0 {
        return 0.0;
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let r = if i > 0 { beta[i - 1].abs() } else { 0.0 } + if i + 1 < n { beta[i].abs() } else { 0.0 };
        lo = lo.min(alpha[i] - r);
        hi = hi.max(alpha[i] + r);
    }
    // Number of eigenvalues strictly below x.
    let count_below = |x: f64| {
        let mut count = 0;
        let mut d = 1.0;
        for i in 0..n {
            let b2 = if i > 0 { beta[i - 1] * beta[i - 1] } else { 0.0 };
            d = alpha[i] - x - if i > 0 { b2 / d } else { 0.0 };
            if d == 0.0 {
                d = -1e-300;
            }
            if d < 0.0 {
                count += 1;
            }
        }
        count
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if count_below(mid) >= n {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

/// Lanczos recursion for a symmetric operator started at `v0`, returning the
/// largest Ritz value after each step. `apply` maps a vector to a vector of
/// possibly larger length (missing entries are zero); `dot` is the inner
/// product in which the operator is symmetric.
pub fn lanczos_ritz<A, D>(v0: Vec<f64>, steps: usize, apply: A, dot: D) -> Vec<f64>
where
    A: Fn(&[f64]) -> Vec<f64>,
    D: Fn(&[f64], &[f64]) -> f64,
{
    let norm = dot(&v0, &v0).sqrt();
    let mut v: Vec<f64> = v0.iter().map(|x| x / norm).collect();
    let mut prev: Vec<f64> = Vec::new();
    let mut beta_prev = 0.0;
    let mut alpha = Vec::new();
    let mut beta = Vec::new();
    let mut ritz = Vec::new();
    for _ in 0..steps {
        let mut w = apply(&v);
        let a = dot(&w, &v);
        for (i, wi) in w.iter_mut().enumerate() {
            *wi -= a * v.get(i).copied().unwrap_or(0.0) + beta_prev * prev.get(i).copied().unwrap_or(0.0);
        }
        alpha.push(a);
        ritz.push(tridiagonal_max_eigenvalue(&alpha, &beta));
        let b = dot(&w, &w).sqrt();
        if !(b > 1e-14) {
            break;
        }
        beta.push(b);
        beta_prev = b;
        prev = v;
        v = w.into_iter().map(|x| x / b).collect();
    }
    ritz
}
