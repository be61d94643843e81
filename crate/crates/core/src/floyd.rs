//! Floyd metrics with exponential rescaling and transition points.
//!
//! The Floyd length of an edge `tau` seen from a basepoint `o` is
//! `f(d(o, tau)) = a^{-d(o, tau)}`, with `d(o, tau)` the smaller of the two
//! endpoint distances. Distances are shortest paths inside a finite work ball
//! around `o`. All computations run in coordinates translated so that the
//! basepoint is `e`, which makes the metric equivariant bit for bit.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group::{Coset, GroupElement, GroupSpec};
use crate::window::{Window, OUTSIDE};

#[derive(Clone, Debug, PartialEq)]
pub struct FloydConfig {
    /// Base `a > 1` of the rescaling function `f(n) = a^{-n}`.
    pub a: f64,
    pub basepoint: GroupElement,
    /// Radius of the work ball around the basepoint.
    pub radius: u32,
}

impl FloydConfig {
    pub fn new(a: f64, basepoint: GroupElement, radius: u32) -> Result<Self> {
        if !(a > 1.0) || !a.is_finite() {
            return Err(Error::Config(format!("Floyd base must exceed 1, got {a}")));
        }
        Ok(FloydConfig { a, basepoint, radius })
    }

    /// `f(n) = a^{-n}`.
    pub fn rescale(&self, n: u32) -> f64 {
        self.a.powi(-(n as i32))
    }
}

/// A Floyd distance with its exactness certificate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloydDistance {
    pub value: f64,
    /// Lower bound on the length of any path that leaves the work ball.
    pub crossing_bound: f64,
    /// `value <= crossing_bound`: no path through the exterior is shorter.
    pub exact: bool,
}

/// One CSV row of Floyd output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloydRecord {
    pub basepoint: String,
    pub x: String,
    pub y: String,
    pub a: f64,
    pub value: f64,
    pub exact: bool,
}

#[derive(Clone, Copy, PartialEq)]
struct Entry(f64, u32);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// The work ball of a Floyd configuration, reusable for any basepoint.
#[derive(Clone, Debug)]
pub struct FloydSpace {
    group: GroupSpec,
    a: f64,
    radius: u32,
    window: Window,
    lengths: Vec<u32>,
    weights: Vec<f64>,
}

/// Single-source Floyd distances inside the work ball.
#[derive(Clone, Debug)]
pub struct FloydField {
    distances: Vec<f64>,
    sphere_min: f64,
    exit_cost: f64,
}

impl FloydField {
    /// Distance to the vertex with window index `i`.
    pub fn at(&self, i: usize) -> f64 {
        self.distances[i]
    }

    /// Any path from the source that leaves the work ball and comes back
    /// crosses the boundary sphere twice.
    pub fn crossing_bound(&self) -> f64 {
        self.sphere_min + 2.0 * self.exit_cost
    }
}

impl FloydSpace {
    pub fn new(group: &GroupSpec, a: f64, radius: u32) -> Result<Self> {
        FloydConfig::new(a, GroupElement::identity(), radius)?;
        let window = Window::ball(group, radius, &group.generators())?;
        let lengths: Vec<u32> = window.elements().iter().map(|g| g.length()).collect();
        let weights = (0..=radius).map(|n| a.powi(-(n as i32))).collect();
        Ok(FloydSpace { group: group.clone(), a, radius, window, lengths, weights })
    }

    pub fn from_config(group: &GroupSpec, cfg: &FloydConfig) -> Result<Self> {
        Self::new(group, cfg.a, cfg.radius)
    }

    pub fn group(&self) -> &GroupSpec {
        &self.group
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn radius(&self) -> u32 {
        self.radius
    }

    /// Window index of `o^{-1} x`, the translated position of `x`.
    pub fn locate(&self, basepoint: &GroupElement, x: &GroupElement) -> Result<usize> {
        let local = basepoint.inverse().mul(x);
        self.window.index_of(&local).ok_or_else(|| {
            Error::Domain(format!("{x} lies outside the Floyd work ball of radius {} around {basepoint}", self.radius))
        })
    }

    /// Dijkstra from the window vertex `source` with basepoint `e`.
    pub fn field(&self, source: usize) -> FloydField {
        let n = self.window.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut heap = BinaryHeap::new();
        dist[source] = 0.0;
        heap.push(Entry(0.0, source as u32));
        while let Some(Entry(d, u)) = heap.pop() {
            let u = u as usize;
            if d > dist[u] {
                continue;
            }
            for &v in self.window.neighbors(u) {
                if v == OUTSIDE {
                    continue;
                }
                let v = v as usize;
                let w = self.weights[self.lengths[u].min(self.lengths[v]) as usize];
                let nd = d + w;
                if nd < dist[v] {
                    dist[v] = nd;
                    heap.push(Entry(nd, v as u32));
                }
            }
        }
        let sphere_min = self
            .lengths
            .iter()
            .zip(&dist)
            .filter(|(l, _)| **l == self.radius)
            .map(|(_, d)| *d)
            .fold(f64::INFINITY, f64::min);
        FloydField { distances: dist, sphere_min, exit_cost: self.weights[self.radius as usize] }
    }

    /// `delta^f_o(x, y)` with its certificate.
    pub fn distance(&self, basepoint: &GroupElement, x: &GroupElement, y: &GroupElement) -> Result<FloydDistance> {
        let i = self.locate(basepoint, x)?;
        let j = self.locate(basepoint, y)?;
        let fx = self.field(i);
        let fy = self.field(j);
        let value = fx.at(j);
        let crossing_bound = fx.sphere_min + 2.0 * fx.exit_cost + fy.sphere_min;
        Ok(FloydDistance { value, crossing_bound, exact: value <= crossing_bound })
    }

    /// Both sides of the visibility bound
    /// `delta^f_o(x, y) <= 4 d a^{-d} + 2 a^{-d} / (1 - 1/a)`, where `d` is the
    /// distance from `o` to the chosen geodesic `[x, y]`.
    pub fn visibility_bound(&self, basepoint: &GroupElement, x: &GroupElement, y: &GroupElement) -> Result<(f64, f64)> {
        let path = self.group.geodesic(x, y);
        for p in &path {
            self.locate(basepoint, p)?;
        }
        let d = path.iter().map(|p| basepoint.distance(p)).min().unwrap_or(0);
        let lhs = self.distance(basepoint, x, y)?.value;
        let ad = self.a.powi(-(d as i32));
        let rhs = 4.0 * d as f64 * ad + 2.0 * ad / (1.0 - 1.0 / self.a);
        Ok((lhs, rhs))
    }

    /// Indices `j` of `path` with `delta^f_{path[j]}(path[i], path[k]) >= delta`
    /// for all `i < j < k`. Endpoints satisfy the condition vacuously.
    pub fn transition_set(&self, path: &[GroupElement], delta: f64) -> Result<Vec<usize>> {
        let checks: Vec<Result<bool>> = (0..path.len())
            .into_par_iter()
            .map(|j| {
                let y = &path[j];
                let targets: Vec<usize> =
                    path[j + 1..].iter().map(|z| self.locate(y, z)).collect::<Result<_>>()?;
                for x in &path[..j] {
                    let field = self.field(self.locate(y, x)?);
                    if targets.iter().any(|&k| field.at(k) < delta) {
                        return Ok(false);
                    }
                }
                Ok(true)
            })
            .collect();
        let mut out = Vec::new();
        for (j, c) in checks.into_iter().enumerate() {
            if c? {
                out.push(j);
            }
        }
        Ok(out)
    }

    /// Number of candidates `z` with `delta^f_z(x, y) >= delta` and
    /// `delta^f_z(x2, y2) >= delta`.
    pub fn fellow_travel_count(
        &self,
        pair: (&GroupElement, &GroupElement),
        other: (&GroupElement, &GroupElement),
        delta: f64,
        candidates: &[GroupElement],
    ) -> Result<usize> {
        let hits: Vec<Result<bool>> = candidates
            .par_iter()
            .map(|z| {
                let first = self.field(self.locate(z, pair.0)?).at(self.locate(z, pair.1)?);
                if first < delta {
                    return Ok(false);
                }
                let second = self.field(self.locate(z, other.0)?).at(self.locate(z, other.1)?);
                Ok(second >= delta)
            })
            .collect();
        let mut count = 0;
        for h in hits {
            count += h? as usize;
        }
        Ok(count)
    }

    /// Smallest `delta^f_y(e, g)` over `g` in `ball(radius)`, the geodesic
    /// `[e, g]` and its `(eps, eta)`-transition points `y`. Any geodesic
    /// segment of the ball is a translate of one of these.
    pub fn transition_floor(&self, radius: u32, eps: u32, eta: u32) -> Result<f64> {
        let ball = self.group.ball(radius)?;
        let e = GroupElement::identity();
        let values: Vec<Result<f64>> = ball
            .elements()
            .par_iter()
            .filter(|g| !g.is_identity())
            .map(|g| {
                let path = self.group.geodesic(&e, g);
                let mut best = f64::INFINITY;
                for j in 0..path.len() {
                    if is_transition_point(&self.group, &path, j, eps, eta)? {
                        let y = &path[j];
                        let field = self.field(self.locate(y, &e)?);
                        best = best.min(field.at(self.locate(y, g)?));
                    }
                }
                Ok(best)
            })
            .collect();
        let mut floor = f64::INFINITY;
        for v in values {
            floor = floor.min(v?);
        }
        Ok(floor)
    }
}

/// `delta^f_o(x, y)` on the work ball of `cfg`.
pub fn floyd_distance(group: &GroupSpec, cfg: &FloydConfig, x: &GroupElement, y: &GroupElement) -> Result<FloydDistance> {
    FloydSpace::from_config(group, cfg)?.distance(&cfg.basepoint, x, y)
}

pub fn visibility_bound_check(group: &GroupSpec, cfg: &FloydConfig, x: &GroupElement, y: &GroupElement) -> Result<(f64, f64)> {
    FloydSpace::from_config(group, cfg)?.visibility_bound(&cfg.basepoint, x, y)
}

/// Whether `path[index]` is an `(eps, eta)`-transition point: no coset of a
/// factor has the `eta`-interval of the path around `index` (clipped to the
/// path) inside its `eps`-neighbourhood.
///
/// A coset that qualifies passes within `eps` of `path[index]`, so it is the
/// coset of `path[index] * h` for some `|h| <= eps`; those are all checked.
pub fn is_transition_point(group: &GroupSpec, path: &[GroupElement], index: usize, eps: u32, eta: u32) -> Result<bool> {
    if index >= path.len() {
        return Err(Error::Domain(format!("index {index} outside a path of length {}", path.len())));
    }
    let lo = index.saturating_sub(eta as usize);
    let hi = (index + eta as usize).min(path.len() - 1);
    let interval = &path[lo..=hi];
    let mut seen = HashSet::new();
    for h in group.ball(eps)?.elements() {
        let p = path[index].mul(h);
        for factor in 0..group.factors().len() {
            let coset = Coset::new(p.clone(), factor);
            if !seen.insert(coset.clone()) {
                continue;
            }
            if interval.iter().all(|q| group.distance_to_coset(q, &coset) <= eps) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

pub fn floyd_transition_set(group: &GroupSpec, cfg: &FloydConfig, path: &[GroupElement], delta: f64) -> Result<Vec<usize>> {
    FloydSpace::from_config(group, cfg)?.transition_set(path, delta)
}

pub fn fellow_travel_count(
    group: &GroupSpec,
    cfg: &FloydConfig,
    pair: (&GroupElement, &GroupElement),
    other: (&GroupElement, &GroupElement),
    delta: f64,
    candidates: &[GroupElement],
) -> Result<usize> {
    FloydSpace::from_config(group, cfg)?.fellow_travel_count(pair, other, delta, candidates)
}
