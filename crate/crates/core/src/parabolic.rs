//! First-return kernels to neighbourhoods of free-abelian factors, the
//! matrices `F(u)`, their Perron eigenvalue `lambda(u)`, level sets,
//! parabolic Martin kernels, local limit exponents and degenerescence tests.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::freeprod::FreeProductSolver;
use crate::group::{Coset, FactorElement, FactorSpec, GroupElement, GroupSpec};
use crate::numeric::{least_squares, linear_fit, Interval};
use crate::potential::{Measure, RestrictedSystem, Walk};

/// How the masses of a kernel were obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelMethod {
    /// The group is the factor itself: `p = r mu`.
    Scaled,
    /// Free-product first-return equations, `eta = 0`.
    FirstReturn,
    /// Excursions enumerated by a restricted Green solve on a truncated exterior.
    Restricted,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KernelEntry {
    pub target: usize,
    pub x: Vec<i64>,
    pub mass: f64,
}

/// First-return kernel `p_{j,k}(0, x)` on `Z^d x {0..N}`.
///
/// Only rows starting at `x = 0` are stored; the kernel is translation
/// invariant in the lattice coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct ParabolicKernel {
    rank: usize,
    factor: usize,
    eta: u32,
    r: f64,
    window: u32,
    truncation: u32,
    method: KernelMethod,
    neighborhood: Vec<GroupElement>,
    rows: Vec<Vec<KernelEntry>>,
    defect: Vec<Vec<f64>>,
}

impl ParabolicKernel {
    /// Builds a kernel directly from its rows (used for synthetic kernels and tests).
    pub fn from_rows(rank: usize, r: f64, rows: Vec<Vec<KernelEntry>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Config("kernel needs at least one state".into()));
        }
        let mut window = 0;
        for e in rows.iter().flatten() {
            if e.target >= n || e.x.len() != rank {
                return Err(Error::Config("kernel entry has wrong state or dimension".into()));
            }
            if !(e.mass >= 0.0) || !e.mass.is_finite() {
                return Err(Error::Config(format!("kernel mass {} is not a finite non-negative number", e.mass)));
            }
            window = window.max(linf(&e.x));
        }
        Ok(ParabolicKernel {
            rank,
            factor: 0,
            eta: 0,
            r,
            window: window as u32,
            truncation: 0,
            method: KernelMethod::Scaled,
            neighborhood: vec![GroupElement::identity(); n],
            rows,
            defect: vec![vec![0.0; n]; n],
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn eta(&self) -> u32 {
        self.eta
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn window(&self) -> u32 {
        self.window
    }

    pub fn truncation(&self) -> u32 {
        self.truncation
    }

    pub fn method(&self) -> KernelMethod {
        self.method
    }

    /// Number of states `N_eta`.
    pub fn states(&self) -> usize {
        self.rows.len()
    }

    /// Coset words `w_k` labelling the states; `w_0 = e`.
    pub fn neighborhood(&self) -> &[GroupElement] {
        &self.neighborhood
    }

    pub fn row(&self, j: usize) -> &[KernelEntry] {
        &self.rows[j]
    }

    /// Estimated mass missing from each `(j, k)` block.
    pub fn defect(&self) -> &[Vec<f64>] {
        &self.defect
    }

    pub fn total_defect(&self) -> f64 {
        self.defect.iter().flatten().sum()
    }

    pub fn row_mass(&self, j: usize) -> f64 {
        self.rows[j].iter().map(|e| e.mass).sum()
    }

    /// `F(0)`: block masses.
    pub fn mass_matrix(&self) -> Vec<Vec<f64>> {
        let n = self.states();
        let mut m = vec![vec![0.0; n]; n];
        for (j, row) in self.rows.iter().enumerate() {
            for e in row {
                m[j][e.target] += e.mass;
            }
        }
        m
    }

    /// Largest `l1` norm of a jump.
    pub fn max_jump(&self) -> i64 {
        self.rows.iter().flatten().map(|e| l1(&e.x)).max().unwrap_or(0)
    }

    /// Whether `p_{j,k}(x) = p_{j,k}(-x)` up to `tol` relative.
    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows.iter().all(|row| {
            let map: HashMap<(usize, &[i64]), f64> = row.iter().map(|e| ((e.target, e.x.as_slice()), e.mass)).collect();
            row.iter().all(|e| {
                let neg: Vec<i64> = e.x.iter().map(|c| -c).collect();
                let other = map.get(&(e.target, neg.as_slice())).copied().unwrap_or(0.0);
                (other - e.mass).abs() <= tol * e.mass.max(other)
            })
        })
    }

    /// Entry-wise `p_{j,k}(x)`.
    pub fn mass(&self, j: usize, k: usize, x: &[i64]) -> f64 {
        self.rows[j].iter().filter(|e| e.target == k && e.x == x).map(|e| e.mass).sum()
    }
}

fn l1(x: &[i64]) -> i64 {
    x.iter().map(|c| c.abs()).sum()
}

fn linf(x: &[i64]) -> i64 {
    x.iter().map(|c| c.abs()).max().unwrap_or(0)
}

/// Rank of a free-abelian factor; other factors are not virtually abelian.
pub fn factor_rank(group: &GroupSpec, factor: usize) -> Result<usize> {
    match group.factor(factor)? {
        FactorSpec::FreeAbelian(d) => Ok(d),
        FactorSpec::Free(1) => Ok(1),
        other => Err(Error::Precondition(format!("factor {factor} ({other}) is not virtually abelian"))),
    }
}

/// Lattice coordinates of an element of the factor subgroup.
fn coords(g: &GroupElement, factor: usize, d: usize) -> Option<Vec<i64>> {
    match g.syllables() {
        [] => Some(vec![0; d]),
        [s] if s.factor == factor => match &s.element {
            FactorElement::Abelian(v) => Some(v.clone()),
            FactorElement::Free(w) => Some(vec![w.iter().map(|&l| l.signum() as i64).sum()]),
        },
        _ => None,
    }
}

/// Accumulates masses into a deterministic `(target, x)` map, routing
/// anything outside the window to the defect.
struct RowBuilder {
    window: i64,
    masses: BTreeMap<(usize, Vec<i64>), f64>,
    outside: Vec<f64>,
}

impl RowBuilder {
    fn new(states: usize, window: u32) -> Self {
        RowBuilder { window: window as i64, masses: BTreeMap::new(), outside: vec![0.0; states] }
    }

    fn add(&mut self, k: usize, x: Vec<i64>, m: f64) {
        if m == 0.0 {
            return;
        }
        if linf(&x) > self.window {
            self.outside[k] += m;
        } else {
            *self.masses.entry((k, x)).or_insert(0.0) += m;
        }
    }

    fn finish(self) -> (Vec<KernelEntry>, Vec<f64>) {
        let row = self.masses.into_iter().map(|((target, x), mass)| KernelEntry { target, x, mass }).collect();
        (row, self.outside)
    }
}

/// First-return kernel of `r mu` to the `eta`-neighbourhood of factor `factor`.
///
/// Chooses the exact route when one exists: `p = r mu` when the group is the
/// factor itself, the free-product first-return equations when `eta = 0`,
/// and otherwise a restricted Green solve on the exterior truncated at
/// word length `truncation`.
pub fn first_return_kernel(
    measure: &Measure,
    factor: usize,
    eta: u32,
    r: f64,
    window: u32,
    truncation: u32,
) -> Result<ParabolicKernel> {
    let group = measure.group();
    if group.factors().len() == 1 {
        return scaled_kernel(measure, factor, r, window);
    }
    if eta == 0 {
        if let Ok(solver) = FreeProductSolver::new(measure) {
            return structural_kernel(&solver, measure, factor, r, window);
        }
    }
    restricted_kernel(measure, factor, eta, r, window, truncation)
}

fn check_r(r: f64) -> Result<()> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::Config(format!("r = {r} must be positive and finite")));
    }
    Ok(())
}

fn scaled_kernel(measure: &Measure, factor: usize, r: f64, window: u32) -> Result<ParabolicKernel> {
    check_r(r)?;
    let d = factor_rank(measure.group(), factor)?;
    let mut b = RowBuilder::new(1, window);
    for (s, m) in measure.support() {
        let x = coords(s, factor, d).ok_or_else(|| Error::Consistency(format!("step {s} leaves the factor")))?;
        b.add(0, x, r * m);
    }
    let (row, outside) = b.finish();
    Ok(ParabolicKernel {
        rank: d,
        factor,
        eta: 0,
        r,
        window,
        truncation: 0,
        method: KernelMethod::Scaled,
        neighborhood: vec![GroupElement::identity()],
        rows: vec![row],
        defect: vec![outside],
    })
}

/// `eta = 0` kernel `r alpha_i mu_i + c_i delta_0` from the first-return equations.
pub fn structural_kernel(
    solver: &FreeProductSolver,
    measure: &Measure,
    factor: usize,
    r: f64,
    window: u32,
) -> Result<ParabolicKernel> {
    check_r(r)?;
    let d = factor_rank(measure.group(), factor)?;
    let (_, loops) = solver.induced_walk(r, factor)?;
    let mut b = RowBuilder::new(1, window);
    b.add(0, vec![0; d], loops);
    for (s, m) in measure.support() {
        if s.is_identity() {
            continue;
        }
        if let Some(x) = coords(s, factor, d) {
            b.add(0, x, r * m);
        }
    }
    let (row, outside) = b.finish();
    Ok(ParabolicKernel {
        rank: d,
        factor,
        eta: 0,
        r,
        window,
        truncation: 0,
        method: KernelMethod::FirstReturn,
        neighborhood: vec![GroupElement::identity()],
        rows: vec![row],
        defect: vec![outside],
    })
}

/// Kernel from excursions through `{h w : |w| > eta}` with `|w| <= truncation`.
///
/// An excursion leaving `N_eta(H)` from `w_j` stays above the projection
/// `h = e`, so the exterior slice over `e` is the whole region. The defect of
/// each block is the mass outside the window plus the change in the block
/// when the truncation is lowered by one.
pub fn restricted_kernel(
    measure: &Measure,
    factor: usize,
    eta: u32,
    r: f64,
    window: u32,
    truncation: u32,
) -> Result<ParabolicKernel> {
    check_r(r)?;
    let group = measure.group();
    let d = factor_rank(group, factor)?;
    let jump = measure.max_jump();
    if truncation < eta + jump {
        return Err(Error::Config(format!(
            "excursion truncation {truncation} must be at least eta + max jump = {}",
            eta + jump
        )));
    }
    let neighborhood = group.coset_words(factor, eta)?;
    let states = neighborhood.len();
    let full = excursion_rows(measure, factor, d, eta, r, window, truncation, &neighborhood)?;
    let coarse = if truncation > eta + jump {
        Some(excursion_rows(measure, factor, d, eta, r, window, truncation - 1, &neighborhood)?)
    } else {
        None
    };
    let mut rows = Vec::with_capacity(states);
    let mut defect = Vec::with_capacity(states);
    for (j, b) in full.into_iter().enumerate() {
        let mut block = b.outside.clone();
        if let Some(c) = &coarse {
            let prev = &c[j].masses;
            for ((k, x), m) in &b.masses {
                block[*k] += (m - prev.get(&(*k, x.clone())).copied().unwrap_or(0.0)).abs();
            }
            for ((k, x), m) in prev {
                if !b.masses.contains_key(&(*k, x.clone())) {
                    block[*k] += m;
                }
            }
        }
        let (row, _) = b.finish();
        rows.push(row);
        defect.push(block);
    }
    Ok(ParabolicKernel {
        rank: d,
        factor,
        eta,
        r,
        window,
        truncation,
        method: KernelMethod::Restricted,
        neighborhood,
        rows,
        defect,
    })
}

#[allow(clippy::too_many_arguments)]
fn excursion_rows(
    measure: &Measure,
    factor: usize,
    d: usize,
    eta: u32,
    r: f64,
    window: u32,
    truncation: u32,
    neighborhood: &[GroupElement],
) -> Result<Vec<RowBuilder>> {
    let group = measure.group();
    let states = neighborhood.len();
    let index: HashMap<&GroupElement, usize> = neighborhood.iter().enumerate().map(|(i, w)| (w, i)).collect();
    let exterior: Vec<GroupElement> = group
        .coset_words(factor, truncation)?
        .into_iter()
        .filter(|w| w.length() > eta)
        .collect();
    let system = RestrictedSystem::new(measure, r, exterior)?;
    if system.perron_bounds().lower >= 1.0 {
        return Err(Error::Divergence(format!(
            "exterior of the {eta}-neighbourhood is supercritical at r = {r}"
        )));
    }
    let coset = Coset::subgroup(factor);
    let land = |t: &GroupElement| -> Option<(usize, Vec<i64>)> {
        let (h, dist) = group.project_to_coset(t, &coset);
        if dist > eta {
            return None;
        }
        let w = h.inverse().mul(t);
        let k = *index.get(&w)?;
        Some((k, coords(&h, factor, d)?))
    };
    let win = system.window();
    neighborhood
        .par_iter()
        .map(|wj| {
            let mut b = RowBuilder::new(states, window);
            for (s, m) in measure.support() {
                let t = wj.mul(s);
                if win.index_of(&t).is_none() {
                    if let Some((k, x)) = land(&t) {
                        b.add(k, x, r * m);
                    }
                }
            }
            let a = system.injection(wj);
            if a.iter().any(|&v| v != 0.0) {
                let (v, _, _) = system.conjugate_gradient(&a)?;
                for (zi, &vz) in v.iter().enumerate() {
                    if vz == 0.0 {
                        continue;
                    }
                    let z = win.element(zi);
                    for (s, m) in measure.support() {
                        let t = z.mul(s);
                        if win.index_of(&t).is_some() {
                            continue;
                        }
                        if let Some((k, x)) = land(&t) {
                            b.add(k, x, vz * r * m);
                        }
                    }
                }
            }
            Ok(b)
        })
        .collect()
}

/// Largest `M` for which `sum_x p(x) e^{M |x|_1}` still looks summable.
///
/// Kernels whose support stays strictly inside the window are treated as
/// finitely supported (infinite range). Otherwise the increment ratio of the
/// last nonzero `l1` shells sets `M = -ln(max ratio)`.
pub fn moment_range(kernel: &ParabolicKernel) -> f64 {
    let w = kernel.window as i64;
    let reaches_edge = kernel.rows.iter().flatten().any(|e| linf(&e.x) >= w && w > 0);
    if !reaches_edge {
        return f64::INFINITY;
    }
    let top = kernel.max_jump() as usize;
    let mut shells = vec![0.0; top + 1];
    for e in kernel.rows.iter().flatten() {
        shells[l1(&e.x) as usize] += e.mass;
    }
    let mut worst: f64 = 0.0;
    for m in (top / 2).max(1)..top {
        if shells[m] > 0.0 && shells[m + 1] > 0.0 {
            worst = worst.max(shells[m + 1] / shells[m]);
        }
    }
    if worst <= 0.0 {
        f64::INFINITY
    } else {
        -worst.ln()
    }
}

/// Per-block bracket for `sum_x p_{j,k}(x) e^{M |x|_1}`: the window sum plus
/// a tail pricing the defect at the window edge.
pub fn exponential_moment(kernel: &ParabolicKernel, m: f64) -> Vec<Vec<Interval>> {
    let n = kernel.states();
    let d = kernel.rank as f64;
    let edge = (m * d * (kernel.window as f64 + 1.0)).exp();
    let range = moment_range(kernel);
    let mut out = vec![vec![Interval::point(0.0); n]; n];
    for (j, row) in kernel.rows.iter().enumerate() {
        let mut sums = vec![0.0; n];
        for e in row {
            sums[e.target] += e.mass * (m * l1(&e.x) as f64).exp();
        }
        for k in 0..n {
            let upper = if m < range { sums[k] + kernel.defect[j][k] * edge } else { f64::INFINITY };
            out[j][k] = Interval::new(sums[k], upper);
        }
    }
    out
}

/// `F(u)` with a tail bracket per entry.
#[derive(Clone, Debug, PartialEq)]
pub struct FMatrix {
    pub values: Vec<Vec<f64>>,
    pub tail: Vec<Vec<f64>>,
}

fn dot_i(x: &[i64], u: &[f64]) -> f64 {
    x.iter().zip(u).map(|(&a, b)| a as f64 * b).sum()
}

fn check_u(kernel: &ParabolicKernel, u: &[f64]) -> Result<()> {
    if u.len() != kernel.rank {
        return Err(Error::Config(format!("u has dimension {}, kernel rank is {}", u.len(), kernel.rank)));
    }
    let norm = u.iter().map(|c| c.abs()).fold(0.0, f64::max);
    if !norm.is_finite() || norm >= moment_range(kernel) {
        return Err(Error::Domain(format!("|u| = {norm} is outside the moment range")));
    }
    Ok(())
}

/// `F_{j,k}(u) = sum_x p_{j,k}(0, x) e^{x . u}`.
pub fn f_matrix(kernel: &ParabolicKernel, u: &[f64]) -> Result<FMatrix> {
    check_u(kernel, u)?;
    let n = kernel.states();
    let mut values = vec![vec![0.0; n]; n];
    for (j, row) in kernel.rows.iter().enumerate() {
        for e in row {
            values[j][e.target] += e.mass * dot_i(&e.x, u).exp();
        }
    }
    let l1u: f64 = u.iter().map(|c| c.abs()).sum();
    let edge = (l1u * (kernel.window as f64 + 1.0)).exp();
    let tail = kernel.defect.iter().map(|row| row.iter().map(|&d| d * edge).collect()).collect();
    Ok(FMatrix { values, tail })
}

/// Perron data of `F(u)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EigenTriple {
    pub u: Vec<f64>,
    pub lambda: f64,
    /// Right vector, `C_0 = 1`.
    pub right: Vec<f64>,
    /// Left vector, `nu . C = 1`.
    pub left: Vec<f64>,
    pub gradient: Vec<f64>,
    /// `|F C - lambda C|_inf / |F|_inf`.
    pub residual: f64,
}

const EIG_MAX_ITER: usize = 200_000;

fn power_vector(f: &[Vec<f64>], transpose: bool, shift: f64) -> Result<(f64, Vec<f64>)> {
    let n = f.len();
    let at = |i: usize, j: usize| if transpose { f[j][i] } else { f[i][j] };
    let mut v = vec![1.0; n];
    let mut estimate = 0.0;
    let mut best_gap = f64::INFINITY;
    let mut stalled = 0;
    for _ in 0..EIG_MAX_ITER {
        let mut w = vec![0.0; n];
        for i in 0..n {
            let mut s = shift * v[i];
            for j in 0..n {
                s += at(i, j) * v[j];
            }
            w[i] = s;
        }
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for i in 0..n {
            let q = w[i] / v[i];
            lo = lo.min(q);
            hi = hi.max(q);
        }
        let top = w.iter().copied().fold(0.0, f64::max);
        if !(top > 0.0) || !top.is_finite() {
            return Err(Error::Solver("power iteration lost positivity".into()));
        }
        v = w.iter().map(|x| x / top).collect();
        if v.iter().any(|&x| x <= 0.0) {
            return Err(Error::Solver("matrix is reducible: Perron vector has zero entries".into()));
        }
        estimate = 0.5 * (lo + hi);
        let gap = hi - lo;
        if gap <= 1e-15 * hi {
            return Ok((estimate - shift, v));
        }
        // rounding floor: accept once the gap stops shrinking below the target
        if gap < best_gap {
            best_gap = gap;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= 50 && best_gap <= 1e-12 * hi {
                return Ok((estimate - shift, v));
            }
        }
    }
    Err(Error::Solver(format!("power iteration did not converge (last estimate {estimate})")))
}

/// Perron eigenvalue with right and left vectors of a non-negative matrix.
///
/// Iterates on `F + s I` with `s = |F|_inf / 2`, which makes the iteration
/// aperiodic without changing the eigenvectors.
pub fn dominant_eig(f: &[Vec<f64>]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let n = f.len();
    if n == 1 {
        return Ok((f[0][0], vec![1.0], vec![1.0]));
    }
    let norm = f.iter().map(|row| row.iter().sum::<f64>()).fold(0.0, f64::max);
    if !(norm > 0.0) {
        return Err(Error::Solver("matrix is zero".into()));
    }
    let shift = 0.5 * norm;
    let (lambda, right) = power_vector(f, false, shift)?;
    let (_, left) = power_vector(f, true, shift)?;
    let c0 = right[0];
    let right: Vec<f64> = right.iter().map(|x| x / c0).collect();
    let dot: f64 = left.iter().zip(&right).map(|(a, b)| a * b).sum();
    let left = left.iter().map(|x| x / dot).collect();
    Ok((lambda, right, left))
}

/// `lambda(u)`, `C(u)`, `nu(u)` and `grad lambda(u) = nu^T F'(u) C`.
pub fn eigen_triple(kernel: &ParabolicKernel, u: &[f64]) -> Result<EigenTriple> {
    let f = f_matrix(kernel, u)?;
    let (lambda, right, left) = dominant_eig(&f.values)?;
    let mut gradient = vec![0.0; kernel.rank];
    for (j, row) in kernel.rows.iter().enumerate() {
        for e in row {
            let w = left[j] * e.mass * dot_i(&e.x, u).exp() * right[e.target];
            for (g, &c) in gradient.iter_mut().zip(&e.x) {
                *g += c as f64 * w;
            }
        }
    }
    let norm = f.values.iter().map(|row| row.iter().sum::<f64>()).fold(0.0, f64::max);
    let mut residual: f64 = 0.0;
    for (j, row) in f.values.iter().enumerate() {
        let fc: f64 = row.iter().zip(&right).map(|(a, b)| a * b).sum();
        residual = residual.max((fc - lambda * right[j]).abs());
    }
    Ok(EigenTriple { u: u.to_vec(), lambda, right, left, gradient, residual: residual / norm.max(f64::MIN_POSITIVE) })
}

pub fn lambda(kernel: &ParabolicKernel, u: &[f64]) -> Result<f64> {
    Ok(eigen_triple(kernel, u)?.lambda)
}

/// Central finite-difference Hessian of `lambda` from analytic gradients.
pub fn hessian(kernel: &ParabolicKernel, u: &[f64]) -> Result<Vec<Vec<f64>>> {
    let d = kernel.rank;
    let h = 1e-5 * u.iter().map(|c| c.abs()).fold(1.0, f64::max);
    let mut m = vec![vec![0.0; d]; d];
    for b in 0..d {
        let mut up = u.to_vec();
        let mut dn = u.to_vec();
        up[b] += h;
        dn[b] -= h;
        let gu = eigen_triple(kernel, &up)?.gradient;
        let gd = eigen_triple(kernel, &dn)?.gradient;
        for a in 0..d {
            m[a][b] = (gu[a] - gd[a]) / (2.0 * h);
        }
    }
    for a in 0..d {
        for b in 0..a {
            let s = 0.5 * (m[a][b] + m[b][a]);
            m[a][b] = s;
            m[b][a] = s;
        }
    }
    Ok(m)
}

/// Cholesky factor of a symmetric matrix, `None` unless positive definite.
pub fn cholesky(m: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = m.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let v = m[i][i] - s;
                if !(v > 0.0) {
                    return None;
                }
                l[i][i] = v.sqrt();
            } else {
                l[i][j] = (m[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    x
}

/// Minimiser of `lambda` with its certificate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LambdaMin {
    pub u: Vec<f64>,
    pub lambda: f64,
    pub gradient_norm: f64,
    pub hessian: Vec<Vec<f64>>,
    pub positive_definite: bool,
    /// The iterate hit the edge of the moment range.
    pub at_boundary: bool,
    pub iterations: usize,
}

const GRADIENT_TOL: f64 = 1e-10;
const MAX_NEWTON: usize = 200;
const LEVEL_GRADIENT_TOL: f64 = 1e-13;

struct Minimum {
    eig: EigenTriple,
    iterations: usize,
    at_boundary: bool,
}

/// Newton iteration with backtracking on `lambda(u) - tilt . u`.
fn minimize_tilted(kernel: &ParabolicKernel, tilt: &[f64], start: &[f64], tol: f64) -> Result<Minimum> {
    let limit = 0.999 * moment_range(kernel);
    let objective = |e: &EigenTriple| e.lambda - e.u.iter().zip(tilt).map(|(a, b)| a * b).sum::<f64>();
    let grad = |e: &EigenTriple| -> Vec<f64> { e.gradient.iter().zip(tilt).map(|(g, t)| g - t).collect() };
    let norm = |v: &[f64]| v.iter().map(|c| c * c).sum::<f64>().sqrt();
    let mut eig = eigen_triple(kernel, start)?;
    for it in 0..MAX_NEWTON {
        let g = grad(&eig);
        let gn = norm(&g);
        if gn <= tol {
            return Ok(Minimum { eig, iterations: it, at_boundary: false });
        }
        let h = hessian(kernel, &eig.u)?;
        let step: Vec<f64> = match cholesky(&h) {
            Some(l) => cholesky_solve(&l, &g).iter().map(|c| -c).collect(),
            None => g.iter().map(|c| -c).collect(),
        };
        let slope: f64 = g.iter().zip(&step).map(|(a, b)| a * b).sum();
        let f0 = objective(&eig);
        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-12 {
            let cand: Vec<f64> = eig.u.iter().zip(&step).map(|(a, b)| a + t * b).collect();
            if cand.iter().any(|c| c.abs() >= limit) {
                t *= 0.5;
                continue;
            }
            let e = eigen_triple(kernel, &cand)?;
            if objective(&e) <= f0 + 1e-4 * t * slope || norm(&grad(&e)) < gn {
                accepted = Some(e);
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some(e) => eig = e,
            None => {
                let at_boundary = eig.u.iter().any(|c| c.abs() >= 0.5 * limit);
                if at_boundary || gn <= 1e3 * tol {
                    return Ok(Minimum { eig, iterations: it, at_boundary });
                }
                return Err(Error::Solver(format!("line search stalled with |grad| = {gn:.3e}")));
            }
        }
    }
    Err(Error::Solver(format!("Newton iteration for min lambda did not converge in {MAX_NEWTON} steps")))
}

/// `(u*, lambda(u*))` with a finite-difference positive-definiteness certificate.
pub fn lambda_min(kernel: &ParabolicKernel) -> Result<LambdaMin> {
    let d = kernel.rank;
    let m = minimize_tilted(kernel, &vec![0.0; d], &vec![0.0; d], GRADIENT_TOL)?;
    let hess = hessian(kernel, &m.eig.u)?;
    let positive_definite = cholesky(&hess).is_some();
    let gradient_norm = m.eig.gradient.iter().map(|c| c * c).sum::<f64>().sqrt();
    Ok(LambdaMin {
        u: m.eig.u.clone(),
        lambda: m.eig.lambda,
        gradient_norm,
        hessian: hess,
        positive_definite,
        at_boundary: m.at_boundary,
        iterations: m.iterations,
    })
}

/// Point of `{lambda = 1}` with outward normal `theta`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelPoint {
    pub theta: Vec<f64>,
    pub u: Vec<f64>,
    pub lambda: f64,
    /// `grad lambda / |grad lambda|` at `u`.
    pub normal: Vec<f64>,
    /// Angle between `normal` and `theta`.
    pub angle: f64,
    pub eig: EigenTriple,
}

/// Solves `lambda(u) = 1, grad lambda(u) = s theta` for `s > 0`.
///
/// For fixed `s`, `u(s)` minimises `lambda(u) - s theta . u`; its gradient is
/// then exactly parallel to `theta`, and `lambda(u(s))` increases with `s`, so
/// the level is found by bisection on `s`.
pub fn level_set_point(kernel: &ParabolicKernel, theta: &[f64]) -> Result<LevelPoint> {
    let d = kernel.rank;
    if theta.len() != d {
        return Err(Error::Config(format!("theta has dimension {}, kernel rank is {d}", theta.len())));
    }
    let tn = theta.iter().map(|c| c * c).sum::<f64>().sqrt();
    if !(tn > 0.0) {
        return Err(Error::Config("theta must be nonzero".into()));
    }
    let theta: Vec<f64> = theta.iter().map(|c| c / tn).collect();
    let base = lambda_min(kernel)?;
    if base.lambda >= 1.0 {
        return Err(Error::Precondition(format!("min lambda = {} is not below 1", base.lambda)));
    }
    let solve = |s: f64, start: &[f64]| -> Result<Minimum> {
        let tilt: Vec<f64> = theta.iter().map(|c| s * c).collect();
        minimize_tilted(kernel, &tilt, start, LEVEL_GRADIENT_TOL)
    };
    let mut lo = (0.0, base.u.clone());
    let mut s = 0.5;
    let mut hi = loop {
        let m = solve(s, &lo.1)?;
        if m.at_boundary {
            return Err(Error::Domain("level set leaves the moment range".into()));
        }
        if m.eig.lambda >= 1.0 {
            break (s, m.eig);
        }
        lo = (s, m.eig.u.clone());
        s *= 2.0;
        if s > 1e12 {
            return Err(Error::Solver("could not bracket the level set".into()));
        }
    };
    for _ in 0..200 {
        if (hi.1.lambda - 1.0).abs() <= 1e-13 || hi.0 - lo.0 <= 1e-15 * hi.0 {
            break;
        }
        let mid = 0.5 * (lo.0 + hi.0);
        let m = solve(mid, &hi.1.u)?;
        if m.eig.lambda >= 1.0 {
            hi = (mid, m.eig);
        } else {
            lo = (mid, m.eig.u);
        }
    }
    let eig = hi.1;
    let gn = eig.gradient.iter().map(|c| c * c).sum::<f64>().sqrt();
    let normal: Vec<f64> = eig.gradient.iter().map(|c| c / gn).collect();
    let cos: f64 = normal.iter().zip(&theta).map(|(a, b)| a * b).sum();
    let sin = normal
        .iter()
        .zip(&theta)
        .map(|(a, b)| (a - cos * b).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(LevelPoint { theta, u: eig.u.clone(), lambda: eig.lambda, normal, angle: sin.atan2(cos), eig })
}

/// Tolerance on `|lambda(u) - 1|` for the Martin formula.
pub const LEVEL_TOL: f64 = 1e-8;

/// `K((z, k)) = C_k(u) / C_0(u) e^{u . z}` on the level set.
pub fn parabolic_martin_kernel(eig: &EigenTriple, z: &[i64], k: usize) -> Result<f64> {
    if (eig.lambda - 1.0).abs() > LEVEL_TOL {
        return Err(Error::Precondition(format!("lambda(u) = {} is off the level set", eig.lambda)));
    }
    if z.len() != eig.u.len() || k >= eig.right.len() {
        return Err(Error::Config("point outside the kernel state space".into()));
    }
    Ok(eig.right[k] / eig.right[0] * dot_i(z, &eig.u).exp())
}

/// `max_k |sum p((0,k),(x,k')) K((x,k')) - K((0,k))| / K((0,k))`; by
/// translation invariance this covers every lattice point.
pub fn harmonicity_residual(kernel: &ParabolicKernel, eig: &EigenTriple) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (j, row) in kernel.rows.iter().enumerate() {
        let mut s = 0.0;
        for e in row {
            s += e.mass * parabolic_martin_kernel(eig, &e.x, e.target)?;
        }
        let own = parabolic_martin_kernel(eig, &vec![0; kernel.rank], j)?;
        worst = worst.max((s - own).abs() / own);
    }
    Ok(worst)
}

/// Rounding allowance in [`defect_tolerance`].
pub const HARMONICITY_FLOOR: f64 = 1e-12;

/// Tolerance against which the harmonicity residual is judged: the relative
/// size of the defect tail at `u`, plus `|lambda - 1|` (the formula is
/// harmonic only up to the level-set error) and a rounding floor.
pub fn defect_tolerance(kernel: &ParabolicKernel, eig: &EigenTriple) -> Result<f64> {
    let f = f_matrix(kernel, &eig.u)?;
    let mut worst: f64 = 0.0;
    for (j, row) in f.tail.iter().enumerate() {
        let t: f64 = row.iter().zip(&eig.right).map(|(a, b)| a * b).sum();
        worst = worst.max(t / eig.right[j]);
    }
    Ok(worst + (eig.lambda - 1.0).abs() + HARMONICITY_FLOOR)
}

const OUTSIDE: u32 = u32::MAX;
/// Cap on `points * (jumps + 4 * states)` for lattice propagation.
pub const LATTICE_BUDGET: usize = 120_000_000;

/// Kernel propagation on the `l1` ball of radius `radius` in `Z^d x {0..N}`.
struct Lattice {
    states: usize,
    points: usize,
    origin: usize,
    jumps: usize,
    next: Vec<u32>,
    coords: Vec<Vec<i64>>,
    /// Per target state `k`: `(source j, jump index of -x, mass)`.
    incoming: Vec<Vec<(usize, usize, f64)>>,
    /// Per source state `j`: `(target k, jump index of x, mass)`.
    outgoing: Vec<Vec<(usize, usize, f64)>>,
}

fn l1_ball(d: usize, radius: i64) -> Vec<Vec<i64>> {
    fn rec(d: usize, left: i64, cur: &mut Vec<i64>, out: &mut Vec<Vec<i64>>) {
        if cur.len() == d {
            out.push(cur.clone());
            return;
        }
        for c in -left..=left {
            cur.push(c);
            rec(d, left - c.abs(), cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(d, radius, &mut Vec::with_capacity(d), &mut out);
    out
}

impl Lattice {
    fn new(rank: usize, rows: &[Vec<KernelEntry>], radius: i64) -> Result<Self> {
        let states = rows.len();
        let mut jump_list: Vec<Vec<i64>> = Vec::new();
        let mut jump_index: HashMap<Vec<i64>, usize> = HashMap::new();
        let mut intern = |x: &[i64], list: &mut Vec<Vec<i64>>| -> usize {
            *jump_index.entry(x.to_vec()).or_insert_with(|| {
                list.push(x.to_vec());
                list.len() - 1
            })
        };
        let mut incoming = vec![Vec::new(); states];
        let mut outgoing = vec![Vec::new(); states];
        for (j, row) in rows.iter().enumerate() {
            for e in row {
                let neg: Vec<i64> = e.x.iter().map(|c| -c).collect();
                let ix = intern(&e.x, &mut jump_list);
                let ineg = intern(&neg, &mut jump_list);
                outgoing[j].push((e.target, ix, e.mass));
                incoming[e.target].push((j, ineg, e.mass));
            }
        }
        let jumps = jump_list.len();
        let span = 2 * radius as u64 + 1;
        let points_est = l1_ball_size(rank, radius);
        if points_est.saturating_mul(jumps + 4 * states) > LATTICE_BUDGET {
            return Err(Error::Resource(format!(
                "lattice window of l1 radius {radius} in Z^{rank} needs {points_est} points"
            )));
        }
        let coords = l1_ball(rank, radius);
        let key = |x: &[i64]| -> u64 { x.iter().fold(0u64, |acc, &c| acc * span + (c + radius) as u64) };
        let index: HashMap<u64, u32> = coords.iter().enumerate().map(|(i, x)| (key(x), i as u32)).collect();
        let next: Vec<u32> = coords
            .par_iter()
            .flat_map_iter(|x| {
                jump_list.iter().map(|s| {
                    let y: Vec<i64> = x.iter().zip(s).map(|(a, b)| a + b).collect();
                    if l1(&y) > radius {
                        OUTSIDE
                    } else {
                        index[&key(&y)]
                    }
                })
            })
            .collect();
        let origin = index[&key(&vec![0; rank])] as usize;
        Ok(Lattice { states, points: coords.len(), origin, jumps, next, coords, incoming, outgoing })
    }

    fn delta(&self, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.points * self.states];
        v[self.origin * self.states + k] = 1.0;
        v
    }

    fn forward(&self, f: &[f64]) -> Vec<f64> {
        let s = self.states;
        let mut out = vec![0.0; f.len()];
        out.par_chunks_mut(s).enumerate().for_each(|(p, cell)| {
            let nb = &self.next[p * self.jumps..(p + 1) * self.jumps];
            for (k, slot) in cell.iter_mut().enumerate() {
                let mut acc = 0.0;
                for &(j, jn, m) in &self.incoming[k] {
                    let q = nb[jn];
                    if q != OUTSIDE {
                        acc += m * f[q as usize * s + j];
                    }
                }
                *slot = acc;
            }
        });
        out
    }

    fn backward(&self, b: &[f64]) -> Vec<f64> {
        let s = self.states;
        let mut out = vec![0.0; b.len()];
        out.par_chunks_mut(s).enumerate().for_each(|(p, cell)| {
            let nb = &self.next[p * self.jumps..(p + 1) * self.jumps];
            for (j, slot) in cell.iter_mut().enumerate() {
                let mut acc = 0.0;
                for &(k, jx, m) in &self.outgoing[j] {
                    let q = nb[jx];
                    if q != OUTSIDE {
                        acc += m * b[q as usize * s + k];
                    }
                }
                *slot = acc;
            }
        });
        out
    }

    fn index(&self, x: &[i64]) -> Option<usize> {
        self.coords.iter().position(|c| c == x)
    }
}

/// Number of lattice points with `|x|_1 <= radius` in `Z^d`.
fn l1_ball_size(d: usize, radius: i64) -> usize {
    // count[k][r] = points of Z^k with |x|_1 <= r
    let r = radius.max(0) as usize;
    let mut count = vec![1usize; r + 1];
    for _ in 0..d {
        let mut next = vec![0usize; r + 1];
        for (t, slot) in next.iter_mut().enumerate() {
            let mut acc = count[t];
            for c in 1..=t {
                acc = acc.saturating_add(count[t - c].saturating_mul(2));
            }
            *slot = acc;
        }
        count = next;
    }
    count[r]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fitted decay `p^(n)(0, 0) ~ C n^exponent`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LltFit {
    pub exponent: f64,
    pub intercept: f64,
    /// Residual standard deviation of the log-log fit.
    pub residual: f64,
    /// Two standard errors of the slope.
    pub band: f64,
    pub n_max: usize,
    /// `(n, p^(n)(0, 0))` for every `n <= n_max`.
    pub returns: Vec<(usize, f64)>,
    /// Mass lost through the window edge by step `n_max / 2`.
    pub leakage: f64,
    pub lazy_shift: bool,
    /// `min lambda`, by which the kernel was normalised.
    pub normalisation: f64,
    pub lattice_radius: i64,
}

/// Leakage above this makes the exponent fit unreliable.
pub const LEAKAGE_TOL: f64 = 1e-8;

/// Return probabilities of the kernel normalised to spectral radius one and
/// the log-log slope over `n in [n_max / 2, n_max]`.
///
/// The kernel is Doob-transformed at the minimiser `u*`, so it becomes
/// stochastic with `p~^(n)(0,0) = p^(n)(0,0) / lambda(u*)^n`; a laziness
/// shift by one half is applied when some state has no holding mass.
/// `p^(m + m')` is the pairing of `m` forward and `m'` backward steps.
pub fn local_limit_exponent(kernel: &ParabolicKernel, n_max: usize) -> Result<LltFit> {
    if n_max < 8 {
        return Err(Error::Config("n_max must be at least 8".into()));
    }
    let lm = lambda_min(kernel)?;
    let eig = eigen_triple(kernel, &lm.u)?;
    let n = kernel.states();
    let mut rows: Vec<Vec<KernelEntry>> = kernel
        .rows
        .iter()
        .enumerate()
        .map(|(j, row)| {
            row.iter()
                .map(|e| KernelEntry {
                    target: e.target,
                    x: e.x.clone(),
                    mass: e.mass * dot_i(&e.x, &lm.u).exp() * eig.right[e.target] / (eig.lambda * eig.right[j]),
                })
                .collect()
        })
        .collect();
    let zero = vec![0; kernel.rank];
    let lazy_shift = (0..n).any(|j| !rows[j].iter().any(|e| e.target == j && e.x == zero && e.mass > 0.0));
    if lazy_shift {
        for (j, row) in rows.iter_mut().enumerate() {
            for e in row.iter_mut() {
                e.mass *= 0.5;
            }
            row.push(KernelEntry { target: j, x: zero.clone(), mass: 0.5 });
        }
    }
    let half = n_max.div_ceil(2);
    let jump = rows.iter().flatten().map(|e| l1(&e.x)).max().unwrap_or(0).max(1);
    let full = half as i64 * jump;
    let radius = full.min(((6.0 * (half as f64).sqrt()).ceil() as i64 + 1) * jump);
    let lattice = Lattice::new(kernel.rank, &rows, radius)?;
    let mut f = lattice.delta(0);
    let mut b = lattice.delta(0);
    let mut returns = vec![(0usize, 1.0)];
    for m in 0..half {
        let fnext = lattice.forward(&f);
        returns.push((2 * m + 1, dot(&fnext, &b)));
        let bnext = lattice.backward(&b);
        returns.push((2 * m + 2, dot(&fnext, &bnext)));
        f = fnext;
        b = bnext;
    }
    returns.truncate(n_max + 1);
    let leakage = (1.0 - f.iter().sum::<f64>()).max(0.0);
    if leakage > LEAKAGE_TOL {
        return Err(Error::Resource(format!(
            "lattice window of radius {radius} leaks {leakage:.3e} by step {half}"
        )));
    }
    let tail: Vec<&(usize, f64)> = returns.iter().filter(|(k, v)| *k >= n_max / 2 && *k > 0 && *v > 0.0).collect();
    if tail.len() < 3 {
        return Err(Error::Solver("too few positive return probabilities to fit".into()));
    }
    let xs: Vec<f64> = tail.iter().map(|(k, _)| (*k as f64).ln()).collect();
    let ys: Vec<f64> = tail.iter().map(|(_, v)| v.ln()).collect();
    let (exponent, intercept, residual) = linear_fit(&xs, &ys);
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(LltFit {
        exponent,
        intercept,
        residual,
        band: 2.0 * residual / sxx.sqrt(),
        n_max,
        returns,
        leakage,
        lazy_shift,
        normalisation: lm.lambda,
        lattice_radius: radius,
    })
}

/// Consistency of a rank with degenerescence.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankGate {
    pub rank: usize,
    pub exponent: f64,
    /// Whether `sum_n n p^(n)(0, 0)` converges under `n^exponent` decay.
    pub weighted_sum_converges: bool,
    pub admissible: bool,
    pub statement: String,
}

/// Degenerescence along a rank-`d` factor forces `sum n p^(n)` to be finite,
/// which needs `d / 2 - 1 > 1`.
pub fn rank_gate(d: usize, exponent: f64) -> RankGate {
    let weighted_sum_converges = exponent < -2.0;
    let admissible = d >= 5;
    let statement = format!(
        "{}; sum n p^(n) {}",
        if admissible { "degenerescence admissible" } else { "degenerescence excluded" },
        if weighted_sum_converges { "convergent" } else { "divergent" }
    );
    RankGate { rank: d, exponent, weighted_sum_converges, admissible, statement }
}

/// Green function `sum_n p^(n)((0,0), (x,k))` of a kernel whose mass matrix
/// (defect included) has Perron root below one, on the `l1` window of radius
/// `radius`.
///
/// With `v` a positive vector and `lambda = max_j (M v)_j / v_j`, the
/// `v`-weighted mass contracts by `lambda` per step. The bracket adds, for a
/// target in state `k`, the weighted mass still alive plus everything lost
/// through the window edge or the kernel defect, divided by
/// `v_k (1 - lambda)`.
pub fn kernel_green(kernel: &ParabolicKernel, targets: &[(Vec<i64>, usize)], radius: i64, n_terms: usize) -> Result<Vec<Interval>> {
    let n = kernel.states();
    let bounding: Vec<Vec<f64>> = kernel
        .mass_matrix()
        .iter()
        .zip(&kernel.defect)
        .map(|(row, d)| row.iter().zip(d).map(|(a, b)| a + b).collect())
        .collect();
    let (_, right, _) = dominant_eig(&bounding)?;
    let top = right.iter().copied().fold(0.0, f64::max);
    if !(top > 0.0) || right.iter().any(|x| !(*x > 0.0)) {
        return Err(Error::Solver("mass matrix has no positive Perron vector".into()));
    }
    let v: Vec<f64> = right.iter().map(|x| x / top).collect();
    let lambda = (0..n)
        .map(|j| (0..n).map(|k| bounding[j][k] * v[k]).sum::<f64>() / v[j])
        .fold(0.0, f64::max);
    if lambda >= 1.0 {
        return Err(Error::Precondition(format!("mass matrix has Perron root {lambda} >= 1")));
    }
    let lattice = Lattice::new(kernel.rank, &kernel.rows, radius)?;
    let slots: Vec<(usize, usize)> = targets
        .iter()
        .map(|(x, k)| {
            let p = lattice
                .index(x)
                .ok_or_else(|| Error::Config(format!("target {x:?} outside the lattice window")))?;
            if *k >= n {
                return Err(Error::Config(format!("state {k} out of range")));
            }
            Ok((p * n + k, *k))
        })
        .collect::<Result<_>>()?;
    // Weighted mass that one unit in each `(point, state)` loses per step.
    let defect_weight: Vec<f64> = (0..n).map(|j| (0..n).map(|k| kernel.defect[j][k] * v[k]).sum()).collect();
    let loss: Vec<f64> = (0..lattice.points * n)
        .into_par_iter()
        .map(|i| {
            let (p, j) = (i / n, i % n);
            let nb = &lattice.next[p * lattice.jumps..(p + 1) * lattice.jumps];
            let edge: f64 = lattice.outgoing[j].iter().filter(|o| nb[o.1] == OUTSIDE).map(|&(k, _, m)| m * v[k]).sum();
            edge + defect_weight[j]
        })
        .collect();
    let weigh = |f: &[f64], w: &(dyn Fn(usize) -> f64 + Sync)| -> f64 { f.par_iter().enumerate().map(|(i, x)| x * w(i)).sum() };
    let mut f = lattice.delta(0);
    let mut sums: Vec<f64> = slots.iter().map(|&(s, _)| f[s]).collect();
    let mut lost = 0.0;
    let mut alive = v[0];
    let vmin = slots.iter().map(|&(_, k)| v[k]).fold(1.0, f64::min);
    for _ in 0..n_terms {
        lost += weigh(&f, &|i| loss[i]);
        f = lattice.forward(&f);
        alive = weigh(&f, &|i| v[i % n]);
        for (acc, &(s, _)) in sums.iter_mut().zip(&slots) {
            *acc += f[s];
        }
        let slack = (alive + lost) / (vmin * (1.0 - lambda));
        // Lost mass is final, so once the live mass is small next to it
        // more terms cannot tighten the bracket.
        if slack <= 1e-13 * sums.iter().copied().fold(f64::INFINITY, f64::min) || alive <= 1e-6 * lost {
            break;
        }
    }
    Ok(sums
        .iter()
        .zip(&slots)
        .map(|(&x, &(_, k))| Interval::new(x, x + (alive + lost) / (v[k] * (1.0 - lambda))))
        .collect())
}

/// Fit of an induced Green function to `kappa G_mu(rho; 0, x)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WoessFit {
    pub rho: f64,
    pub kappa: f64,
    /// `(x, induced Green, kappa * factor Green)`.
    pub points: Vec<(Vec<i64>, f64, f64)>,
    pub max_relative_error: f64,
}

/// Matches the Green function of a one-state kernel against the factor
/// measure `mu` (on `Z^d`) at a single parameter `rho`, fitted from the ratio
/// at the first two points; `kappa` from the first point.
pub fn woess_fit(kernel: &ParabolicKernel, mu: &[(Vec<i64>, f64)], points: &[Vec<i64>], radius: i64) -> Result<WoessFit> {
    if kernel.states() != 1 {
        return Err(Error::Precondition("Woess fit needs a one-state kernel".into()));
    }
    if points.len() < 2 {
        return Err(Error::Config("need at least two evaluation points".into()));
    }
    let targets: Vec<(Vec<i64>, usize)> = points.iter().map(|x| (x.clone(), 0)).collect();
    let induced: Vec<f64> = kernel_green(kernel, &targets, radius, 1_000_000)?.iter().map(|i| i.mid()).collect();
    let factor_green = |rho: f64| -> Result<Vec<f64>> {
        let row = mu.iter().map(|(x, m)| KernelEntry { target: 0, x: x.clone(), mass: rho * m }).collect();
        let k = ParabolicKernel::from_rows(kernel.rank, rho, vec![row])?;
        Ok(kernel_green(&k, &targets, radius, 1_000_000)?.iter().map(|i| i.mid()).collect())
    };
    let target = induced[1] / induced[0];
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let g = factor_green(mid)?;
        if g[1] / g[0] < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let rho = 0.5 * (lo + hi);
    let g = factor_green(rho)?;
    let kappa = induced[0] / g[0];
    let mut max_relative_error: f64 = 0.0;
    let pts = points
        .iter()
        .zip(induced.iter().zip(&g))
        .map(|(x, (&a, &b))| {
            let fitted = kappa * b;
            max_relative_error = max_relative_error.max((a - fitted).abs() / a);
            (x.clone(), a, fitted)
        })
        .collect();
    Ok(WoessFit { rho, kappa, points: pts, max_relative_error })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    NonDegenerate,
    Inconclusive,
    DegenerateConsistent,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DegenerescenceRung {
    pub epsilon: f64,
    pub r: f64,
    pub min_lambda: f64,
    pub at_boundary: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DegenerescenceVerdict {
    pub factor: usize,
    pub rank: usize,
    pub eta: u32,
    /// Lower end of the spectral radius bracket used for the ladder.
    pub radius: f64,
    pub rungs: Vec<DegenerescenceRung>,
    /// `A` in the fit `min lambda = A + B sqrt(eps) + C eps`.
    pub extrapolated: f64,
    pub verdict: Verdict,
    pub note: String,
}

pub const DEFAULT_EPS_LADDER: [f64; 7] = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8];
/// Distance from one below which the extrapolated minimum counts as one.
pub const DEGENERESCENCE_TOL: f64 = 1e-5;

/// Kernel window and excursion truncation used when `eta > 0` forces the
/// restricted construction.
pub const DEGENERESCENCE_WINDOW: u32 = 16;
pub const DEGENERESCENCE_EXCURSION: u32 = 6;

/// Decides whether `min lambda` reaches one as `r -> R` along factor `factor`.
pub fn is_spectrally_degenerate(measure: &Measure, factor: usize, eta: u32, ladder: &[f64]) -> Result<DegenerescenceVerdict> {
    let group = measure.group();
    let d = factor_rank(group, factor)?;
    if ladder.len() < 3 || ladder.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
        return Err(Error::Config("epsilon ladder needs at least three values in (0, 1)".into()));
    }
    let single = group.factors().len() == 1;
    let solver = if single { None } else { FreeProductSolver::new(measure).ok() };
    let radius = if single {
        1.0
    } else if let Some(s) = &solver {
        s.radius().lower
    } else {
        Walk::new(measure, 200)?.radius().lower
    };
    let rungs: Vec<DegenerescenceRung> = ladder
        .par_iter()
        .map(|&eps| {
            let r = radius * (1.0 - eps);
            let kernel = match (&solver, single, eta) {
                (_, true, _) => scaled_kernel(measure, factor, r, DEGENERESCENCE_WINDOW)?,
                (Some(s), false, 0) => structural_kernel(s, measure, factor, r, DEGENERESCENCE_WINDOW)?,
                _ => restricted_kernel(
                    measure,
                    factor,
                    eta,
                    r,
                    DEGENERESCENCE_WINDOW,
                    eta + DEGENERESCENCE_EXCURSION.max(measure.max_jump()),
                )?,
            };
            let lm = lambda_min(&kernel)?;
            Ok(DegenerescenceRung { epsilon: eps, r, min_lambda: lm.lambda, at_boundary: lm.at_boundary })
        })
        .collect::<Result<_>>()?;
    let ones = vec![1.0; rungs.len()];
    let roots: Vec<f64> = rungs.iter().map(|g| g.epsilon.sqrt()).collect();
    let lins: Vec<f64> = rungs.iter().map(|g| g.epsilon).collect();
    let ys: Vec<f64> = rungs.iter().map(|g| g.min_lambda).collect();
    let coef = least_squares(&[ones, roots, lins], &ys)
        .ok_or_else(|| Error::Solver("degenerescence extrapolation is singular".into()))?;
    let extrapolated = coef[0];
    let finest = rungs
        .iter()
        .min_by(|a, b| a.epsilon.total_cmp(&b.epsilon))
        .map(|g| 1.0 - g.min_lambda)
        .unwrap_or(0.0);
    let gap = 1.0 - extrapolated;
    let below = rungs.iter().all(|g| g.min_lambda < 1.0);
    let gate = rank_gate(d, -(d as f64) / 2.0);
    let (verdict, note) = if below && gap > DEGENERESCENCE_TOL && gap >= 0.5 * finest {
        (Verdict::NonDegenerate, format!("min lambda stays {gap:.3e} below 1; {}", gate.statement))
    } else if gap.abs() <= DEGENERESCENCE_TOL {
        if gate.admissible {
            (Verdict::DegenerateConsistent, format!("min lambda extrapolates to 1; {}", gate.statement))
        } else {
            (
                Verdict::Inconclusive,
                format!("min lambda extrapolates to 1 within tolerance but {}", gate.statement),
            )
        }
    } else {
        (Verdict::Inconclusive, format!("margin {gap:.3e} unstable under refinement; {}", gate.statement))
    };
    if verdict == Verdict::DegenerateConsistent && d <= 4 {
        return Err(Error::Consistency(format!("degenerate verdict for rank {d}")));
    }
    Ok(DegenerescenceVerdict { factor, rank: d, eta, radius, rungs, extrapolated, verdict, note })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{make_measure, MeasureSpec};

    fn measure(names: &[&str], spec: MeasureSpec) -> Measure {
        let g = GroupSpec::parse(names).unwrap();
        make_measure::<f64>(&g, &spec).unwrap()
    }

    fn adapted(names: &[&str]) -> Measure {
        measure(names, MeasureSpec::Adapted { weights: vec![0.5; names.len()] })
    }

    #[test]
    fn z_srw_lambda_is_cosh() {
        let m = measure(&["Z"], MeasureSpec::Srw);
        let k = first_return_kernel(&m, 0, 0, 1.0, 4, 0).unwrap();
        assert_eq!(k.method(), KernelMethod::Scaled);
        let e = eigen_triple(&k, &[0.5]).unwrap();
        assert!((e.lambda - 0.5f64.cosh()).abs() < 1e-15);
        assert!((e.gradient[0] - 0.5f64.sinh()).abs() < 1e-15);
        let lm = lambda_min(&k).unwrap();
        assert!(lm.u[0].abs() < 1e-12 && (lm.lambda - 1.0).abs() < 1e-15);
        assert!(lm.positive_definite);
    }

    #[test]
    fn level_set_inverts_scaled_cosh() {
        let m = measure(&["Z"], MeasureSpec::Srw);
        let k = first_return_kernel(&m, 0, 0, 0.9, 4, 0).unwrap();
        assert!((lambda_min(&k).unwrap().lambda - 0.9).abs() < 1e-15);
        let p = level_set_point(&k, &[1.0]).unwrap();
        assert!((p.u[0] - (1.0f64 / 0.9).acosh()).abs() < 1e-10, "{:?}", p.u);
        let q = level_set_point(&k, &[-1.0]).unwrap();
        assert!((p.u[0] + q.u[0]).abs() < 1e-10);
        assert!(p.angle.abs() < 1e-8);
        assert!(matches!(level_set_point(&first_return_kernel(&m, 0, 0, 1.0, 4, 0).unwrap(), &[1.0]), Err(Error::Precondition(_))));
    }

    #[test]
    fn dominant_eig_of_small_matrices() {
        let (l, c, n) = dominant_eig(&[vec![0.7]]).unwrap();
        assert_eq!((l, c, n), (0.7, vec![1.0], vec![1.0]));
        let f = vec![vec![0.2, 0.3], vec![0.1, 0.4]];
        let (l, c, n) = dominant_eig(&f).unwrap();
        let exact = 0.5 * (0.6 + (0.04f64 + 0.12).sqrt());
        assert!((l - exact).abs() < 1e-13);
        assert_eq!(c[0], 1.0);
        assert!((n[0] * c[0] + n[1] * c[1] - 1.0).abs() < 1e-14);
        assert!((0.2 + 0.3 * c[1] - l).abs() < 1e-12);
    }

    #[test]
    fn structural_kernel_has_loop_excess() {
        let m = adapted(&["Z", "Z"]);
        let rr = FreeProductSolver::new(&m).unwrap().radius().lower;
        let k = first_return_kernel(&m, 0, 0, 0.9 * rr, 8, 0).unwrap();
        assert_eq!(k.method(), KernelMethod::FirstReturn);
        let step = 0.9 * rr * 0.25;
        assert!((k.mass(0, 0, &[1]) - step).abs() < 1e-15);
        assert!(k.mass(0, 0, &[0]) > 0.0);
        assert!(k.is_symmetric(0.0));
        assert!(k.row_mass(0) < 1.0);
        let mom = exponential_moment(&k, 0.5);
        assert!(mom[0][0].upper.is_finite() && mom[0][0].lower > k.row_mass(0));
    }

    #[test]
    fn restricted_kernel_reproduces_first_return_equations() {
        let m = adapted(&["Z", "Z"]);
        let rr = FreeProductSolver::new(&m).unwrap().radius().lower;
        let r = 0.5 * rr;
        let exact = first_return_kernel(&m, 0, 0, r, 8, 0).unwrap();
        let k = restricted_kernel(&m, 0, 0, r, 8, 10).unwrap();
        for x in [-1i64, 0, 1] {
            let (a, b) = (exact.mass(0, 0, &[x]), k.mass(0, 0, &[x]));
            assert!((a - b).abs() <= 1e-6 * a, "x = {x}: {a} vs {b}");
        }
        assert!(k.total_defect() < 1e-5, "{}", k.total_defect());
    }

    #[test]
    fn larger_neighbourhood_has_more_states() {
        let m = adapted(&["Z", "Z"]);
        let rr = FreeProductSolver::new(&m).unwrap().radius().lower;
        let k = restricted_kernel(&m, 0, 1, 0.5 * rr, 8, 9).unwrap();
        assert_eq!(k.states(), 3);
        let lm = lambda_min(&k).unwrap();
        assert!(lm.u[0].abs() < 1e-8 && lm.lambda < 1.0);
        let e = eigen_triple(&k, &[0.3]).unwrap();
        assert!(e.residual < 1e-10);
        assert!(e.right.iter().chain(&e.left).all(|&v| v > 0.0));
    }

    #[test]
    fn martin_formula_matches_tree_kernel() {
        let m = adapted(&["Z", "Z"]);
        let walk = Walk::new(&m, 400).unwrap();
        let r = 0.9 * walk.radius().lower;
        let k = first_return_kernel(&m, 0, 0, r, 8, 0).unwrap();
        let p = level_set_point(&k, &[1.0]).unwrap();
        let res = harmonicity_residual(&k, &p.eig).unwrap();
        assert!(res < 1e-12, "{res} {}", p.lambda);
        let g = m.group();
        for z in 1..=3i64 {
            let h = g.parse_element(&format!("Z0({z})")).unwrap();
            let far = g.parse_element("Z0(30)").unwrap();
            let direct = walk.martin_kernel(r, &h, &far).unwrap();
            let formula = parabolic_martin_kernel(&p.eig, &[z], 0).unwrap();
            assert!((direct.mid() - formula).abs() <= 0.02 * formula, "{direct:?} vs {formula}");
        }
    }

    #[test]
    fn lazy_walk_on_z_decays_like_root() {
        let m = measure(&["Z"], MeasureSpec::LazySrw { alpha: 0.5 });
        let k = first_return_kernel(&m, 0, 0, 1.0, 4, 0).unwrap();
        let fit = local_limit_exponent(&k, 400).unwrap();
        assert!(!fit.lazy_shift);
        assert!((fit.exponent + 0.5).abs() < 0.025, "{}", fit.exponent);
        // p^(n)(0) for the lazy walk is C(2n, n) / 4^n
        let mut c = 1.0;
        for n in 1..=20usize {
            c *= (2 * n - 1) as f64 / (2 * n) as f64;
            assert!((fit.returns[n].1 - c).abs() < 1e-14);
        }
    }

    #[test]
    fn rank_gate_statements() {
        assert!(!rank_gate(4, -2.0).admissible);
        assert!(rank_gate(4, -2.0).statement.starts_with("degenerescence excluded"));
        assert!(rank_gate(5, -2.5).admissible);
        assert!(!rank_gate(2, -1.0).weighted_sum_converges);
        assert!(rank_gate(5, -2.5).weighted_sum_converges);
    }

    #[test]
    fn degenerescence_verdicts() {
        let z = measure(&["Z"], MeasureSpec::Srw);
        let v = is_spectrally_degenerate(&z, 0, 0, &DEFAULT_EPS_LADDER).unwrap();
        assert_eq!(v.verdict, Verdict::Inconclusive);
        assert!((v.extrapolated - 1.0).abs() < 1e-9);
        let z5 = measure(&["Z^5"], MeasureSpec::Srw);
        let v = is_spectrally_degenerate(&z5, 0, 0, &DEFAULT_EPS_LADDER).unwrap();
        assert_eq!(v.verdict, Verdict::DegenerateConsistent);
        let zz = adapted(&["Z^2", "Z"]);
        let v = is_spectrally_degenerate(&zz, 0, 0, &DEFAULT_EPS_LADDER).unwrap();
        assert_eq!(v.verdict, Verdict::NonDegenerate, "{v:?}");
    }

    #[test]
    fn induced_green_fits_factor_green() {
        let m = adapted(&["Z", "Z"]);
        let rr = FreeProductSolver::new(&m).unwrap().radius().lower;
        let k = restricted_kernel(&m, 0, 0, 0.8 * rr, 8, 10).unwrap();
        let mu = vec![(vec![1], 0.5), (vec![-1], 0.5)];
        let pts: Vec<Vec<i64>> = (0..5).map(|x| vec![x]).collect();
        let fit = woess_fit(&k, &mu, &pts, 400).unwrap();
        assert!(fit.max_relative_error < 0.01, "{fit:?}");
        assert!(fit.rho > 0.0 && fit.rho < 1.0);
    }

    #[test]
    fn l1_ball_size_counts() {
        for d in 1..=4 {
            for r in 0..6 {
                assert_eq!(l1_ball_size(d, r), l1_ball(d, r).len());
            }
        }
    }
}
