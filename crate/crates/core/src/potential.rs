//! Green functions, Martin kernels and spectral radius brackets.
//!
//! Every value is an interval. Lower ends are partial sums of nonnegative
//! series; upper ends add a tail bound built from return probabilities
//! `u_n = mu^{*n}(e)`: for symmetric `mu`, `mu^{*n}(g) <= sqrt(u_{2a} u_{2b})`
//! whenever `a + b = n`, and `u_{2m+2} / u_{2m}` increases to `rho^2`, where
//! `rho = 1 / R`. Past the last exact return probability the tail is geometric
//! with ratio `r * rho_hat`, `rho_hat = min(1, 1 / R_lower)`.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::group::{Coset, GroupElement, GroupSpec};
use crate::measure::{ConvolutionTable, FiniteMeasure};
use crate::numeric::{lanczos_ritz, least_squares, Interval};
use crate::radial::RadialTable;
use crate::window::{Window, OUTSIDE};

pub type Measure = FiniteMeasure<f64>;

/// Largest number of stored convolution entries (rows times window size).
pub const TABLE_BUDGET: usize = 40_000_000;

const LANCZOS_STEPS: usize = 120;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum TailBound {
    /// Geometric tail with ratio `r` (uses only `rho <= 1`).
    Unit,
    /// Geometric tail with ratio `r / R_lower`.
    Spectral,
    /// Restricted series bounded through a Collatz-Wielandt eigenvalue bound.
    Perron,
    /// No finite upper bound available at this `r`.
    Uncertified,
}

impl fmt::Display for TailBound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TailBound::Unit => "unit-geometric",
            TailBound::Spectral => "spectral-geometric",
            TailBound::Perron => "perron-geometric",
            TailBound::Uncertified => "uncertified-upper",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GreenEstimate {
    pub lower: f64,
    pub upper: f64,
    pub r: f64,
    pub n_truncation: usize,
    pub tail_bound_method: TailBound,
}

impl GreenEstimate {
    pub fn interval(&self) -> Interval {
        Interval::new(self.lower, self.upper)
    }

    pub fn certified(&self) -> bool {
        self.tail_bound_method != TailBound::Uncertified && self.upper.is_finite()
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectralRadiusEstimate {
    pub lower: f64,
    pub upper: f64,
    /// `(2m, u_{2m}^{1/2m})`.
    pub evidence: Vec<(usize, f64)>,
    pub method: String,
}

impl SpectralRadiusEstimate {
    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

/// Spectral radius bracket from exact return probabilities `returns[n] = u_n`
/// and the largest Ritz values of the walk operator after each Lanczos step.
///
/// The upper end is certified: `R <= u_{2m}^{-1/2m}`, `R <= sqrt(u_{2m} / u_{2m+2})`
/// and `R <= 1 / theta` for every Ritz value `theta`. The lower end inverts a
/// decay-rate estimate (a fit of `log u_{2m} = a + b log m + c / m + 2m log rho`
/// and a Richardson extrapolation of the Ritz values), inflated by their
/// disagreement; it is not certified.
pub fn estimate_radius(returns: &[f64], ritz: &[f64]) -> SpectralRadiusEstimate {
    let mut evidence = Vec::new();
    let mut rho_cert: f64 = 0.0;
    let mut even = Vec::new();
    for m in 1..=(returns.len().saturating_sub(1) / 2) {
        let v = returns[2 * m];
        if v > 0.0 {
            let root = v.powf(1.0 / (2 * m) as f64);
            evidence.push((2 * m, root));
            rho_cert = rho_cert.max(root);
            even.push((m as f64, v));
        }
    }
    for w in even.windows(2) {
        if w[1].0 == w[0].0 + 1.0 {
            rho_cert = rho_cert.max((w[1].1 / w[0].1).sqrt());
        }
    }
    if let Some(&t) = ritz.last() {
        rho_cert = rho_cert.max(t);
    }
    let rho_cert = rho_cert.min(1.0);

    let mut estimates = Vec::new();
    let tail: Vec<(f64, f64)> = even.iter().skip(even.len() / 2).copied().collect();
    if tail.len() >= 6 {
        let cols = vec![
            vec![1.0; tail.len()],
            tail.iter().map(|(m, _)| m.ln()).collect(),
            tail.iter().map(|(m, _)| 1.0 / m).collect(),
            tail.iter().map(|(m, _)| 2.0 * m).collect(),
        ];
        let y: Vec<f64> = tail.iter().map(|(_, v)| v.ln()).collect();
        if let Some(c) = least_squares(&cols, &y) {
            estimates.push(c[3].exp());
        }
    }
    let k = ritz.len();
    if k >= 8 {
        let (k1, k2) = (k as f64, (k / 2) as f64);
        let t1 = ritz[k - 1];
        let t2 = ritz[k / 2 - 1];
        estimates.push((k1 * k1 * t1 - k2 * k2 * t2) / (k1 * k1 - k2 * k2));
    }
    let center = estimates.iter().copied().fold(rho_cert, f64::max);
    let spread = if estimates.len() == 2 { (estimates[0] - estimates[1]).abs() / center } else { 0.01 };
    let rho_hat = (center * (1.0 + spread.max(1e-3))).min(1.0);
    let upper = if rho_cert > 0.0 { 1.0 / rho_cert } else { f64::INFINITY };
    let lower = (1.0 / rho_hat).min(upper);
    SpectralRadiusEstimate { lower, upper, evidence, method: "ritz+fit".into() }
}

#[derive(Clone, Debug)]
pub enum Engine {
    Radial(RadialTable),
    Window { table: ConvolutionTable<f64>, radius: u32 },
}

impl Engine {
    fn n_max(&self) -> usize {
        match self {
            Engine::Radial(t) => t.n_max(),
            Engine::Window { table, .. } => table.n_max(),
        }
    }

    /// Largest `n` for which `prob(n, g)` is exact, for `|g| = len`.
    fn horizon(&self, len: u32, jump: u32) -> usize {
        match self {
            Engine::Radial(t) => t.n_max(),
            Engine::Window { table, radius } => {
                let j = jump.max(1) as u64;
                let h = if len > *radius {
                    (len as u64).div_ceil(j).saturating_sub(1)
                } else {
                    (2 * *radius as u64 + 1 - len as u64) / j
                };
                (h as usize).min(table.n_max())
            }
        }
    }

    fn prob(&self, n: usize, g: &GroupElement) -> f64 {
        match self {
            Engine::Radial(t) => t.get(n, g.length() as usize),
            Engine::Window { table, .. } => table.get(n, g),
        }
    }
}

/// A measure together with its convolution powers and a spectral radius
/// bracket; evaluates Green functions as intervals.
#[derive(Clone, Debug)]
pub struct Walk {
    measure: Measure,
    engine: Engine,
    returns: Vec<f64>,
    radius: SpectralRadiusEstimate,
}

impl Walk {
    /// Radial engine on trees with radial measures, otherwise the largest
    /// window (up to `n_max * max_jump`) that fits [`TABLE_BUDGET`].
    pub fn new(measure: &Measure, n_max: usize) -> Result<Self> {
        if measure.is_radial() {
            let table = RadialTable::new(measure, n_max)?;
            return Ok(Self::assemble(measure, Engine::Radial(table)));
        }
        let budget = (TABLE_BUDGET / (n_max + 1)).max(1);
        let full = (n_max as u64 * measure.max_jump() as u64).min(u32::MAX as u64) as u32;
        let ball = measure.group().largest_ball(full, budget);
        let radius = ball.elements().last().map_or(0, |g| g.length());
        Self::from_window(measure, n_max, Window::from_ball(ball, &steps_of(measure)), radius)
    }

    /// Window engine on the ball of the given radius.
    pub fn with_window(measure: &Measure, n_max: usize, radius: u32) -> Result<Self> {
        let window = Window::ball(measure.group(), radius, &steps_of(measure))?;
        Self::from_window(measure, n_max, window, radius)
    }

    fn from_window(measure: &Measure, n_max: usize, window: Window, radius: u32) -> Result<Self> {
        if (window.len() as u128) * (n_max as u128 + 1) > TABLE_BUDGET as u128 * 4 {
            return Err(Error::Resource(format!(
                "convolution table of {} rows on {} elements exceeds the budget",
                n_max + 1,
                window.len()
            )));
        }
        let table = ConvolutionTable::build(&window, measure, n_max);
        Ok(Self::assemble(measure, Engine::Window { table, radius }))
    }

    fn assemble(measure: &Measure, engine: Engine) -> Self {
        let jump = measure.max_jump();
        let exact = engine.horizon(0, jump);
        let returns: Vec<f64> = (0..=exact).map(|n| engine.prob(n, &GroupElement::identity())).collect();
        let ritz = walk_ritz(measure, &engine, engine.n_max().min(LANCZOS_STEPS));
        let radius = estimate_radius(&returns, &ritz);
        Walk { measure: measure.clone(), engine, returns, radius }
    }

    pub fn measure(&self) -> &Measure {
        &self.measure
    }

    pub fn group(&self) -> &GroupSpec {
        self.measure.group()
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn n_max(&self) -> usize {
        self.engine.n_max()
    }

    /// Exact return probabilities `u_0, u_1, ...`.
    pub fn returns(&self) -> &[f64] {
        &self.returns
    }

    pub fn radius(&self) -> &SpectralRadiusEstimate {
        &self.radius
    }

    /// Replaces the spectral radius bracket, e.g. with one from a structural
    /// solver. Tail bounds use the new lower end.
    pub fn set_radius(&mut self, radius: SpectralRadiusEstimate) {
        self.radius = radius;
    }

    /// `mu^{*n}(g)`; exact up to the horizon of `g`, a lower bound beyond.
    pub fn prob(&self, n: usize, g: &GroupElement) -> f64 {
        self.engine.prob(n, &canonical(g))
    }

    fn horizon(&self, g: &GroupElement) -> usize {
        self.engine.horizon(g.length(), self.measure.max_jump())
    }

    fn tail(&self, r: f64) -> Tail {
        Tail::new(&self.returns, r, self.radius.lower, rounding_slack(self.n_max(), self.measure.support().len()))
    }

    /// `G_r(x, y)`.
    pub fn green(&self, r: f64, x: &GroupElement, y: &GroupElement) -> Result<GreenEstimate> {
        check_r(r)?;
        let g = canonical(&x.inverse().mul(y));
        let tail = self.tail(r);
        let horizon = self.horizon(&g);
        let mut lower = 0.0;
        let mut exact = 0.0;
        let mut power = 1.0;
        for n in 0..=self.n_max() {
            lower += power * self.engine.prob(n, &g);
            if n == horizon {
                exact = lower;
            }
            power *= r;
        }
        Ok(tail.estimate(lower, exact, horizon, self.n_max()))
    }

    /// `G_r(e, .)` on the whole window (or every length, for the radial engine).
    pub fn green_field(&self, r: f64) -> Result<GreenField<'_>> {
        check_r(r)?;
        let tail = self.tail(r);
        let jump = self.measure.max_jump();
        let n_max = self.n_max();
        let powers: Vec<f64> = (0..=n_max).scan(1.0, |p, _| {
            let v = *p;
            *p *= r;
            Some(v)
        })
        .collect();
        let (lower, exact, keys): (Vec<f64>, Vec<f64>, Vec<u32>) = match &self.engine {
            Engine::Radial(t) => {
                let len = n_max * jump as usize + 1;
                let mut lower = vec![0.0; len];
                for (n, p) in powers.iter().enumerate() {
                    for (k, v) in t.profile(n).iter().enumerate() {
                        lower[k] += p * v;
                    }
                }
                (lower.clone(), lower, (0..len as u32).collect())
            }
            Engine::Window { table, .. } => {
                let window = table.window();
                let lens: Vec<u32> = window.elements().iter().map(|g| g.length()).collect();
                let mut lower = vec![0.0; window.len()];
                let mut exact = vec![0.0; window.len()];
                for (n, p) in powers.iter().enumerate() {
                    for (i, v) in table.row(n).iter().enumerate() {
                        lower[i] += p * v;
                        if n == self.engine.horizon(lens[i], jump) {
                            exact[i] = lower[i];
                        }
                    }
                }
                (lower, exact, lens)
            }
        };
        let values: Vec<GreenEstimate> = lower
            .iter()
            .zip(&exact)
            .zip(&keys)
            .map(|((l, e), len)| tail.estimate(*l, *e, self.engine.horizon(*len, jump), n_max))
            .collect();
        Ok(GreenField { r, jump, tail, values, n_max, radial: matches!(self.engine, Engine::Radial(_)), walk: self })
    }

    /// `K_r(x, y) = G_r(x, y) / G_r(e, y)`.
    pub fn martin_kernel(&self, r: f64, x: &GroupElement, y: &GroupElement) -> Result<Interval> {
        if x.is_identity() {
            return Ok(Interval::point(1.0));
        }
        let num = self.green(r, x, y)?;
        let den = self.green(r, &GroupElement::identity(), y)?;
        Ok(num.interval().div(&den.interval()))
    }

    /// `u_k(r) = sum_{|x| = k} G_r(e, x)^2`.
    pub fn sphere_green_sum(&self, r: f64, k: u32) -> Result<Interval> {
        let field = self.green_field(r)?;
        if let Engine::Radial(t) = &self.engine {
            let g = field.by_length(k);
            return Ok(g.mul(&g).scale(t.sphere_size(k as usize)));
        }
        let ball = self.group().ball(k)?;
        let mut total = Interval::point(0.0);
        for x in ball.sphere(k) {
            let g = field.get(x);
            total = total.add(&g.mul(&g));
        }
        Ok(total)
    }

    /// Both sides of `d/dr (r G_r(g, g')) = sum_h G_r(g, h) G_r(h, g')`.
    ///
    /// The derivative side brackets `f'(r)`, `f(s) = s G_s(g, g')`, between
    /// the one-sided difference quotients of the convex function `f`; the
    /// central difference is reported alongside. The sum side runs over
    /// `h` in `g * ball(ball_radius)` and adds a tail bound for the rest.
    pub fn green_derivative(
        &self,
        r: f64,
        g: &GroupElement,
        g2: &GroupElement,
        ball_radius: u32,
    ) -> Result<DerivativeCheck> {
        check_r(r)?;
        let step = 1e-4 * r;
        let f = |s: f64| -> Result<Interval> { Ok(self.green(s, g, g2)?.interval().scale(s)) };
        let (f_minus, f_mid, f_plus) = (f(r - step)?, f(r)?, f(r + step)?);
        let finite_difference = Interval::new(
            (f_mid.lower - f_minus.upper) / step,
            (f_plus.upper - f_mid.lower) / step,
        );
        let central = (f_plus.mid() - f_minus.mid()) / (2.0 * step);

        let w = g.inverse().mul(g2);
        let field = self.green_field(r)?;
        let mut sum = Interval::point(0.0);
        match &self.engine {
            Engine::Radial(t) if w.is_identity() => {
                for k in 0..=ball_radius {
                    let v = field.by_length(k);
                    sum = sum.add(&v.mul(&v).scale(t.sphere_size(k as usize)));
                }
            }
            _ => {
                let ball = self.group().ball(ball_radius)?;
                for h in ball.elements() {
                    let a = field.get(h);
                    let b = field.get(&h.inverse().mul(&w));
                    sum = sum.add(&a.mul(&b));
                }
            }
        }
        let n0 = (ball_radius / self.measure.max_jump().max(1)) as usize + 1;
        let tail = field.tail.weighted_suffix(n0);
        let double_sum = Interval::new(sum.lower, sum.upper + tail);
        let overlap = finite_difference.overlaps(&double_sum);
        Ok(DerivativeCheck { r, step, finite_difference, central, double_sum, ball_radius, overlap })
    }

    /// Cumulative sums of `G_r(e, g) G_r(g, e)` over `N_eta(H) ∩ ball(k)`,
    /// `k = 0..=k_max`, for `H` the subgroup of factor `factor`.
    pub fn parabolic_green_sum(&self, r: f64, factor: usize, eta: u32, k_max: u32) -> Result<ParabolicGreenCurve> {
        let field = self.green_field(r)?;
        let group = self.group();
        let words = group.coset_words(factor, eta)?;
        let subgroup = group.factor_ball(factor, k_max)?;
        let mut per_length = vec![Interval::point(0.0); k_max as usize + 1];
        for h in &subgroup {
            for w in &words {
                let len = h.length() + w.length();
                if len <= k_max {
                    let v = field.get(&h.mul(w));
                    let s = &mut per_length[len as usize];
                    *s = s.add(&v.mul(&v));
                }
            }
        }
        let mut cumulative = Vec::with_capacity(per_length.len());
        let mut acc = Interval::point(0.0);
        for v in &per_length {
            acc = acc.add(v);
            cumulative.push(acc);
        }
        let increments: Vec<f64> = per_length.iter().map(|v| v.upper).collect();
        let ratios = increments
            .windows(2)
            .map(|w| if w[0] > 0.0 { w[1] / w[0] } else { f64::NAN })
            .collect();
        Ok(ParabolicGreenCurve { r, eta, cumulative, ratios })
    }
}

/// `G_r(e, .)` for all points reachable by the engine.
pub struct GreenField<'a> {
    r: f64,
    jump: u32,
    tail: Tail,
    values: Vec<GreenEstimate>,
    n_max: usize,
    radial: bool,
    walk: &'a Walk,
}

impl GreenField<'_> {
    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn estimate(&self, g: &GroupElement) -> GreenEstimate {
        let g = canonical(g);
        let idx = if self.radial {
            Some(g.length() as usize).filter(|&k| k < self.values.len())
        } else {
            match &self.walk.engine {
                Engine::Window { table, .. } => table.window().index_of(&g),
                Engine::Radial(_) => None,
            }
        };
        match idx {
            Some(i) => self.values[i],
            None => {
                let h = (g.length() as usize).div_ceil(self.jump.max(1) as usize).saturating_sub(1);
                self.tail.estimate(0.0, 0.0, h.min(self.n_max), self.n_max)
            }
        }
    }

    pub fn get(&self, g: &GroupElement) -> Interval {
        self.estimate(g).interval()
    }

    /// Radial engine only: the value at any element of length `k`.
    fn by_length(&self, k: u32) -> Interval {
        match self.values.get(k as usize) {
            Some(v) => v.interval(),
            None => {
                let h = (k as usize).div_ceil(self.jump.max(1) as usize).saturating_sub(1);
                self.tail.estimate(0.0, 0.0, h.min(self.n_max), self.n_max).interval()
            }
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DerivativeCheck {
    pub r: f64,
    pub step: f64,
    pub finite_difference: Interval,
    pub central: f64,
    pub double_sum: Interval,
    pub ball_radius: u32,
    pub overlap: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ParabolicGreenCurve {
    pub r: f64,
    pub eta: u32,
    /// Entry `k` sums over `N_eta(H) ∩ ball(k)`.
    pub cumulative: Vec<Interval>,
    /// Ratio of successive per-length increments (upper ends).
    pub ratios: Vec<f64>,
}

/// Bounds `B_n >= mu^{*n}(g)` for all `g`, weighted by `r^n`.
#[derive(Clone, Debug)]
struct Tail {
    /// `suffix[m] = sum_{n >= m} r^n B_n`.
    suffix: Vec<f64>,
    /// `r^n B_n` for `n < suffix.len()`.
    terms: Vec<f64>,
    /// Past the table: `r^n B_n = coef * x^n`.
    coef: f64,
    x: f64,
    r: f64,
    /// Relative floating-point error allowance.
    slack: f64,
    method: TailBound,
}

impl Tail {
    fn new(returns: &[f64], r: f64, radius_lower: f64, slack: f64) -> Self {
        let rho = if radius_lower <= 1.0 { 1.0 } else { 1.0 / radius_lower };
        let mut method = if radius_lower <= 1.0 { TailBound::Unit } else { TailBound::Spectral };
        let m_top = (returns.len().saturating_sub(1)) / 2;
        let v = |m: usize| returns[2 * m];
        let len = 2 * m_top + 1;
        let mut terms = Vec::with_capacity(len);
        let mut power = 1.0;
        for n in 0..len {
            let b = (v(n / 2) * v(n.div_ceil(2))).sqrt().min(1.0);
            terms.push(power * b);
            power *= r;
        }
        let x = r * rho;
        // B_n = v_M rho^{n - 2M} for n > 2M.
        let coef = if x < 1.0 {
            (v(m_top).ln() - 2.0 * m_top as f64 * rho.ln()).exp()
        } else {
            method = TailBound::Uncertified;
            f64::INFINITY
        };
        let geometric_from_len = if x < 1.0 { coef * x.powi(len as i32) / (1.0 - x) } else { f64::INFINITY };
        let mut suffix = vec![0.0; len + 1];
        suffix[len] = geometric_from_len;
        for n in (0..len).rev() {
            suffix[n] = suffix[n + 1] + terms[n];
        }
        Tail { suffix, terms, coef, x, r, slack, method }
    }

    /// `sum_{n >= m} r^n B_n`.
    fn suffix(&self, m: usize) -> f64 {
        if m < self.suffix.len() {
            self.suffix[m]
        } else if self.x < 1.0 {
            self.coef * self.x.powi(m as i32) / (1.0 - self.x)
        } else {
            f64::INFINITY
        }
    }

    /// `sum_{s >= n0} (s - n0 + 1) r^s B_s`.
    fn weighted_suffix(&self, n0: usize) -> f64 {
        let len = self.terms.len();
        let mut total = 0.0;
        for s in n0..len {
            total += (s - n0 + 1) as f64 * self.terms[s];
        }
        if self.x >= 1.0 {
            return f64::INFINITY;
        }
        let start = n0.max(len);
        let k = (start - n0 + 1) as f64;
        let xs = self.x.powi(start as i32);
        total + self.coef * (k * xs / (1.0 - self.x) + xs * self.x / (1.0 - self.x).powi(2))
    }

    fn estimate(&self, lower: f64, exact: f64, horizon: usize, n_max: usize) -> GreenEstimate {
        let upper = exact + self.suffix(horizon + 1);
        let method = if upper.is_finite() { self.method } else { TailBound::Uncertified };
        GreenEstimate {
            lower: lower * (1.0 - self.slack),
            upper: upper.max(lower) * (1.0 + self.slack),
            r: self.r,
            n_truncation: n_max,
            tail_bound_method: method,
        }
    }
}

/// Relative error allowance for sums of `n` nonnegative terms, each produced
/// by a `width`-term dynamic program of depth `n`.
fn rounding_slack(n: usize, width: usize) -> f64 {
    4.0 * f64::EPSILON * ((n + 8) * (width + 2)) as f64
}

fn check_r(r: f64) -> Result<()> {
    if r > 0.0 && r.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("weight r = {r} must be positive")))
    }
}

/// The smaller of `g` and `g^{-1}`: convolution powers of symmetric measures
/// agree on both, and evaluating at one fixed representative makes Green
/// values bit-for-bit symmetric.
fn canonical(g: &GroupElement) -> GroupElement {
    let inv = g.inverse();
    if inv < *g {
        inv
    } else {
        g.clone()
    }
}

fn steps_of(measure: &Measure) -> Vec<GroupElement> {
    measure.support().iter().map(|(g, _)| g.clone()).collect()
}

fn walk_ritz(measure: &Measure, engine: &Engine, steps: usize) -> Vec<f64> {
    match engine {
        Engine::Radial(t) => {
            let sizes: Vec<f64> = (0..=(steps + 1) * t.max_jump() + 1).map(|k| t.sphere_size(k)).collect();
            lanczos_ritz(
                vec![1.0],
                steps,
                |v| t.step(v),
                |a, b| a.iter().zip(b).zip(&sizes).map(|((x, y), s)| x * y * s).sum(),
            )
        }
        Engine::Window { table, .. } => {
            let window = table.window();
            let weights: Vec<f64> = window.steps().iter().map(|s| measure.mass(s)).collect();
            let mut start = vec![0.0; window.len()];
            start[window.index_of(&GroupElement::identity()).expect("window contains e")] = 1.0;
            lanczos_ritz(
                start,
                steps,
                |v| apply_window(window, &weights, v),
                |a, b| a.iter().zip(b).map(|(x, y)| x * y).sum(),
            )
        }
    }
}

/// `(Q v)(i) = sum_s w_s v(i s)` on a window, dropping steps that leave it.
pub(crate) fn apply_window(window: &Window, weights: &[f64], v: &[f64]) -> Vec<f64> {
    use rayon::prelude::*;
    (0..window.len())
        .into_par_iter()
        .map(|i| {
            let mut acc = 0.0;
            for (w, &t) in weights.iter().zip(window.neighbors(i)) {
                if t != OUTSIDE {
                    acc += w * v[t as usize];
                }
            }
            acc
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum RestrictedMethod {
    /// Linear solve on the absorbing chain over `A`.
    Solve,
    /// Truncated path-length series.
    Series,
}

/// Linear system for paths whose intermediate points lie in a finite set `A`.
pub struct RestrictedSystem {
    window: Window,
    weights: Vec<f64>,
    r: f64,
    /// Collatz-Wielandt bounds on the Perron root of `Q = r P_A`.
    perron: Interval,
    /// Connected component of every vertex of `A`.
    components: Vec<u32>,
}

impl RestrictedSystem {
    pub fn new(measure: &Measure, r: f64, region: Vec<GroupElement>) -> Result<Self> {
        check_r(r)?;
        let window = Window::from_elements(region, &steps_of(measure));
        let weights: Vec<f64> = window.steps().iter().map(|s| r * measure.mass(s)).collect();
        let perron = collatz_wielandt(&window, &weights);
        let components = components(&window);
        Ok(RestrictedSystem { window, weights, r, perron, components })
    }

    pub fn perron_bounds(&self) -> Interval {
        self.perron
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        apply_window(&self.window, &self.weights, v)
    }

    /// `a(z) = r mu(x^{-1} z)` for `z` in `A`.
    pub(crate) fn injection(&self, x: &GroupElement) -> Vec<f64> {
        let mut a = vec![0.0; self.window.len()];
        for (s, w) in self.window.steps().iter().zip(&self.weights) {
            if let Some(i) = self.window.index_of(&x.mul(s)) {
                a[i] += w;
            }
        }
        a
    }

    fn direct(&self, x: &GroupElement, y: &GroupElement) -> f64 {
        let g = x.inverse().mul(y);
        let mut d = if g.is_identity() { 1.0 } else { 0.0 };
        for (s, w) in self.window.steps().iter().zip(&self.weights) {
            if *s == g {
                d += w;
            }
        }
        d
    }

    /// `G_r(x, y; A)`.
    pub fn green(&self, x: &GroupElement, y: &GroupElement, method: RestrictedMethod, n_max: usize) -> Result<GreenEstimate> {
        if self.perron.lower >= 1.0 {
            return Err(Error::Divergence(format!(
                "restricted operator at r = {} has Perron root >= {:.6}",
                self.r, self.perron.lower
            )));
        }
        let direct = self.direct(x, y);
        let a = self.injection(x);
        // By symmetry of mu, r mu(z^{-1} y) = r mu(y^{-1} z).
        let b = self.injection(y);
        let touched = |v: &[f64]| -> std::collections::HashSet<u32> {
            v.iter().enumerate().filter(|(_, w)| **w > 0.0).map(|(i, _)| self.components[i]).collect()
        };
        if touched(&a).is_disjoint(&touched(&b)) {
            // No path through A connects the neighbourhoods of x and y.
            return Ok(GreenEstimate {
                lower: direct,
                upper: direct,
                r: self.r,
                n_truncation: 0,
                tail_bound_method: TailBound::Perron,
            });
        }
        let lam = self.perron.upper;
        let norm = |v: &[f64]| v.iter().map(|t| t * t).sum::<f64>().sqrt();
        let (na, nb) = (norm(&a), norm(&b));
        let certified = lam < 1.0;
        match method {
            RestrictedMethod::Series => {
                let mut cur = a;
                let mut sum = direct;
                let terms = n_max.saturating_sub(1);
                for k in 1..=terms {
                    sum += dot(&cur, &b);
                    if k < terms {
                        cur = self.apply(&cur);
                    }
                }
                let (upper, method) = if certified {
                    (sum + na * nb * lam.powi(terms as i32) / (1.0 - lam), TailBound::Perron)
                } else {
                    (f64::INFINITY, TailBound::Uncertified)
                };
                let slack = rounding_slack(n_max, self.weights.len());
                Ok(GreenEstimate {
                    lower: sum * (1.0 - slack),
                    upper: upper * (1.0 + slack),
                    r: self.r,
                    n_truncation: n_max,
                    tail_bound_method: method,
                })
            }
            RestrictedMethod::Solve => {
                let (h, residual, iterations) = self.conjugate_gradient(&b)?;
                let value = direct + dot(&a, &h);
                if certified {
                    let err = na * residual / (1.0 - lam) + value * rounding_slack(iterations, self.weights.len());
                    Ok(GreenEstimate {
                        lower: (value - err).max(direct),
                        upper: value + err,
                        r: self.r,
                        n_truncation: iterations,
                        tail_bound_method: TailBound::Perron,
                    })
                } else {
                    Ok(GreenEstimate {
                        lower: value,
                        upper: f64::INFINITY,
                        r: self.r,
                        n_truncation: iterations,
                        tail_bound_method: TailBound::Uncertified,
                    })
                }
            }
        }
    }

    /// Solves `(I - Q) h = b`; returns `h`, the final residual norm and the
    /// iteration count.
    pub(crate) fn conjugate_gradient(&self, b: &[f64]) -> Result<(Vec<f64>, f64, usize)> {
        let n = b.len();
        let mut h = vec![0.0; n];
        let mut res = b.to_vec();
        let mut p = res.clone();
        let mut rr = dot(&res, &res);
        let target = 1e-15 * rr.sqrt().max(f64::MIN_POSITIVE);
        let max_iter = 20 * n + 1000;
        for it in 0..max_iter {
            if rr.sqrt() <= target || rr == 0.0 {
                return Ok((h, rr.sqrt(), it));
            }
            let qp = self.apply(&p);
            let ap: Vec<f64> = p.iter().zip(&qp).map(|(a, b)| a - b).collect();
            let curv = dot(&p, &ap);
            if curv <= 0.0 {
                return Err(Error::Divergence(format!(
                    "restricted operator at r = {} is not positive definite",
                    self.r
                )));
            }
            let alpha = rr / curv;
            for i in 0..n {
                h[i] += alpha * p[i];
                res[i] -= alpha * ap[i];
            }
            let rr_new = dot(&res, &res);
            let beta = rr_new / rr;
            for i in 0..n {
                p[i] = res[i] + beta * p[i];
            }
            rr = rr_new;
        }
        // Recompute the true residual before giving up.
        let qh = self.apply(&h);
        let true_res: f64 = b.iter().zip(h.iter().zip(&qh)).map(|(bi, (hi, qi))| (bi - hi + qi).powi(2)).sum::<f64>().sqrt();
        if true_res <= 1e-10 * dot(b, b).sqrt() {
            Ok((h, true_res, max_iter))
        } else {
            Err(Error::Solver(format!("conjugate gradient stalled at residual {true_res:.3e}")))
        }
    }
}

/// Component labels of the window graph.
fn components(window: &Window) -> Vec<u32> {
    let n = window.len();
    let mut label = vec![u32::MAX; n];
    let mut next = 0;
    for start in 0..n {
        if label[start] != u32::MAX {
            continue;
        }
        label[start] = next;
        let mut stack = vec![start];
        while let Some(u) = stack.pop() {
            for &v in window.neighbors(u) {
                if v != OUTSIDE && label[v as usize] == u32::MAX {
                    label[v as usize] = next;
                    stack.push(v as usize);
                }
            }
        }
        next += 1;
    }
    label
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lower and upper bounds `min_i (Qv)_i / v_i <= rho(Q) <= max_i (Qv)_i / v_i`
/// for a positive vector `v` obtained by power iteration on `I + Q`.
fn collatz_wielandt(window: &Window, weights: &[f64]) -> Interval {
    let n = window.len();
    if n == 0 {
        return Interval::point(0.0);
    }
    let mut v = vec![1.0; n];
    let mut best = Interval::new(0.0, f64::INFINITY);
    for it in 0..400 {
        let qv = apply_window(window, weights, &v);
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for (a, b) in qv.iter().zip(&v) {
            let ratio = a / b;
            lo = lo.min(ratio);
            hi = hi.max(ratio);
        }
        best = Interval::new(best.lower.max(lo), best.upper.min(hi));
        if best.width() <= 1e-12 * best.upper.max(1e-300) || (it > 50 && best.upper < 0.5) {
            break;
        }
        let next: Vec<f64> = v.iter().zip(&qv).map(|(a, b)| a + b).collect();
        let scale = next.iter().copied().fold(0.0, f64::max);
        v = next.into_iter().map(|x| (x / scale).max(1e-300)).collect();
    }
    best
}

/// `G_r(x, y; A)` for a finite set `A` given as a list of elements.
pub fn green_restricted(
    measure: &Measure,
    r: f64,
    x: &GroupElement,
    y: &GroupElement,
    region: Vec<GroupElement>,
    n_max: usize,
    method: RestrictedMethod,
) -> Result<GreenEstimate> {
    RestrictedSystem::new(measure, r, region)?.green(x, y, method, n_max)
}

/// `G_r(x, y)` with a fresh walk of depth `n_max`.
pub fn green(measure: &Measure, r: f64, x: &GroupElement, y: &GroupElement, n_max: usize) -> Result<GreenEstimate> {
    let jump = measure.max_jump().max(1) as usize;
    let need = (x.distance(y) as usize).div_ceil(jump);
    if n_max < need {
        return Err(Error::Precondition(format!("n_max = {n_max} is below d(x, y) / max jump = {need}")));
    }
    Walk::new(measure, n_max)?.green(r, x, y)
}

pub fn martin_kernel(measure: &Measure, r: f64, x: &GroupElement, y: &GroupElement, n_max: usize) -> Result<Interval> {
    Walk::new(measure, n_max)?.martin_kernel(r, x, y)
}

pub fn spectral_radius(measure: &Measure, n_max: usize) -> Result<SpectralRadiusEstimate> {
    Ok(Walk::new(measure, n_max)?.radius().clone())
}

/// Subgroup coset through `e` of factor `i`.
pub fn subgroup(i: usize) -> Coset {
    Coset::subgroup(i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{make_measure, MeasureSpec};

    fn walk(names: &[&str], spec: MeasureSpec, n: usize) -> Walk {
        let g = GroupSpec::parse(names).unwrap();
        Walk::new(&make_measure::<f64>(&g, &spec).unwrap(), n).unwrap()
    }

    fn z(v: i64) -> GroupElement {
        GroupElement::from_factor(0, crate::group::FactorElement::Abelian(vec![v]))
    }

    #[test]
    fn z_green_matches_binomial_series() {
        let w = walk(&["Z"], MeasureSpec::Srw, 200);
        for r in [0.1, 0.5, 0.9] {
            let est = w.green(r, &z(0), &z(0)).unwrap();
            let exact = 1.0 / (1.0f64 - r * r).sqrt();
            assert!(est.contains(exact), "{est:?} vs {exact}");
            assert!(est.width() < 1e-6);
            assert!(est.certified());
        }
    }

    #[test]
    fn green_is_symmetric_and_at_least_one() {
        let w = walk(&["Z^2", "Z"], MeasureSpec::Srw, 8);
        let g = w.group().clone();
        let ball = g.ball(2).unwrap();
        for x in ball.elements() {
            assert!(w.green(0.5, x, x).unwrap().lower >= 1.0);
            for y in ball.elements() {
                assert_eq!(w.green(0.5, x, y).unwrap(), w.green(0.5, y, x).unwrap());
            }
        }
    }

    #[test]
    fn window_and_radial_engines_agree() {
        let g = GroupSpec::parse(&["F_2"]).unwrap();
        let m = make_measure::<f64>(&g, &MeasureSpec::Srw).unwrap();
        let radial = Walk::new(&m, 30).unwrap();
        let window = Walk::with_window(&m, 12, 6).unwrap();
        let x = g.parse_element("F0(ab)").unwrap();
        let a = radial.green(0.5, &GroupElement::identity(), &x).unwrap();
        let b = window.green(0.5, &GroupElement::identity(), &x).unwrap();
        assert!(a.interval().overlaps(&b.interval()), "{a:?} {b:?}");
        assert!(a.width() < 1e-9);
    }

    #[test]
    fn radius_brackets() {
        let w = walk(&["F_2"], MeasureSpec::Srw, 40);
        let est = w.radius();
        let exact = 2.0 / 3f64.sqrt();
        assert!(est.contains(exact), "{est:?}");
        assert!(est.upper / est.lower < 1.02);

        let w = walk(&["Z"], MeasureSpec::Srw, 60);
        assert!(w.radius().contains(1.0) && w.radius().upper < 1.02);
    }

    #[test]
    fn martin_kernel_at_identity_is_one() {
        let w = walk(&["Z"], MeasureSpec::Srw, 60);
        assert_eq!(w.martin_kernel(0.5, &z(0), &z(7)).unwrap(), Interval::point(1.0));
    }

    #[test]
    fn restricted_examples() {
        let g = GroupSpec::parse(&["Z"]).unwrap();
        let m = make_measure::<f64>(&g, &MeasureSpec::Srw).unwrap();
        let empty = green_restricted(&m, 0.7, &z(0), &z(1), vec![], 10, RestrictedMethod::Solve).unwrap();
        assert_eq!(empty.lower, 0.35);
        let region: Vec<GroupElement> = (-8..=8).filter(|&v| v != 0).map(z).collect();
        let cut = green_restricted(&m, 0.9, &z(-2), &z(2), region, 50, RestrictedMethod::Solve).unwrap();
        assert_eq!(cut.lower, 0.0);
    }

    #[test]
    fn restricted_solve_and_series_agree_on_f2() {
        let g = GroupSpec::parse(&["F_2"]).unwrap();
        let m = make_measure::<f64>(&g, &MeasureSpec::Srw).unwrap();
        let region = g.ball(3).unwrap().into_elements();
        let sys = RestrictedSystem::new(&m, 0.5, region).unwrap();
        let e = GroupElement::identity();
        let a = sys.green(&e, &e, RestrictedMethod::Solve, 0).unwrap();
        let b = sys.green(&e, &e, RestrictedMethod::Series, 80).unwrap();
        assert!((a.lower - b.lower).abs() < 1e-10, "{a:?} {b:?}");
        assert!(a.interval().overlaps(&b.interval()));
    }

    #[test]
    fn derivative_identity_on_z() {
        let w = walk(&["Z"], MeasureSpec::Srw, 200);
        let check = w.green_derivative(0.5, &z(0), &z(0), 60).unwrap();
        assert!(check.overlap, "{check:?}");
        assert!((check.central - (1.0f64 - 0.25).powf(-1.5)).abs() < 1e-6);
    }
}
