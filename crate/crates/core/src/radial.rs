//! Convolution powers of radial measures on regular trees.
//!
//! When the Cayley graph is the `D`-regular tree and `mu(g)` depends only on
//! `|g|`, every convolution power is radial too. A radial function is then a
//! profile `phi(k)` indexed by word length, and convolving with the uniform
//! law on the sphere of radius `j` is a polynomial `P_j(A)` in the neighbour
//! averaging operator `A`:
//!
//! `(A phi)(0) = phi(1)`, `(A phi)(k) = (phi(k-1) + q phi(k+1)) / D`,
//! `P_0 = 1`, `P_1 = A`, `P_{j+1} = (D/q) (A P_j - P_{j-1} / D)`, `q = D - 1`.

use crate::error::{Error, Result};
use crate::measure::FiniteMeasure;

#[derive(Clone, Debug)]
pub struct RadialTable {
    degree: usize,
    jump: usize,
    sphere_mass: Vec<f64>,
    profiles: Vec<Vec<f64>>,
}

impl RadialTable {
    pub fn new(measure: &FiniteMeasure<f64>, n_max: usize) -> Result<Self> {
        let degree = measure
            .group()
            .tree_degree()
            .ok_or_else(|| Error::Precondition(format!("{} is not a regular tree", measure.group())))?;
        if !measure.is_radial() {
            return Err(Error::Precondition("measure is not radial".into()));
        }
        let jump = measure.max_jump() as usize;
        let mut sphere_mass = vec![0.0; jump + 1];
        for (g, m) in measure.support() {
            sphere_mass[g.length() as usize] += m;
        }
        let mut table = RadialTable { degree, jump, sphere_mass, profiles: vec![vec![1.0]] };
        for _ in 0..n_max {
            let prev = table.profiles.last().expect("profile 0");
            let next = table.step(prev);
            table.profiles.push(next);
        }
        Ok(table)
    }

    fn average(&self, phi: &[f64], len: usize) -> Vec<f64> {
        let d = self.degree as f64;
        let q = d - 1.0;
        let at = |k: usize| phi.get(k).copied().unwrap_or(0.0);
        (0..len)
            .map(|k| if k == 0 { at(1) } else { (at(k - 1) + q * at(k + 1)) / d })
            .collect()
    }

    /// One convolution with the step law.
    pub(crate) fn step(&self, phi: &[f64]) -> Vec<f64> {
        let len = phi.len() + self.jump;
        let d = self.degree as f64;
        let q = d - 1.0;
        let mut out: Vec<f64> = (0..len).map(|k| self.sphere_mass[0] * phi.get(k).copied().unwrap_or(0.0)).collect();
        if self.jump == 0 {
            return out;
        }
        let mut before: Vec<f64> = (0..len).map(|k| phi.get(k).copied().unwrap_or(0.0)).collect();
        let mut current = self.average(phi, len);
        for j in 1..=self.jump {
            for (o, c) in out.iter_mut().zip(&current) {
                *o += self.sphere_mass[j] * c;
            }
            if j < self.jump {
                let a = self.average(&current, len);
                let next: Vec<f64> = a
                    .iter()
                    .zip(&before)
                    .map(|(x, b)| ((d / q) * (x - b / d)).max(0.0))
                    .collect();
                before = current;
                current = next;
            }
        }
        out
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn max_jump(&self) -> usize {
        self.jump
    }

    pub fn n_max(&self) -> usize {
        self.profiles.len() - 1
    }

    /// `mu^{*n}(g)` for any `g` with `|g| = k`.
    pub fn get(&self, n: usize, k: usize) -> f64 {
        self.profiles[n].get(k).copied().unwrap_or(0.0)
    }

    pub fn profile(&self, n: usize) -> &[f64] {
        &self.profiles[n]
    }

    /// Number of elements of length `k`.
    pub fn sphere_size(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            let d = self.degree as f64;
            d * (d - 1.0).powi(k as i32 - 1)
        }
    }
}
