//! Deviation inequalities for Green functions: weak and strong Ancona
//! inequalities and super-exponential avoidance of balls.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::floyd::{is_transition_point, FloydSpace};
use crate::group::{GroupElement, GroupSpec};
use crate::measure::{make_measure, MeasureSpec};
use crate::numeric::{linear_fit, Interval};
use crate::potential::{GreenEstimate, GreenField, Measure, RestrictedMethod, RestrictedSystem, Walk};

/// A derived quantity with the Green brackets it was computed from.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnconaValue {
    pub value: Interval,
    pub parts: Vec<GreenEstimate>,
    pub certified: bool,
}

fn from_parts(value: Interval, parts: Vec<GreenEstimate>) -> AnconaValue {
    let certified = parts.iter().all(GreenEstimate::certified);
    AnconaValue { value, parts, certified }
}

/// `G_r(x, z) / (G_r(x, y) G_r(y, z))` as an interval.
pub fn weak_ratio(field: &GreenField<'_>, x: &GroupElement, y: &GroupElement, z: &GroupElement) -> AnconaValue {
    let xz = field.estimate(&x.inverse().mul(z));
    let xy = field.estimate(&x.inverse().mul(y));
    let yz = field.estimate(&y.inverse().mul(z));
    let value = xz.interval().div(&xy.interval().mul(&yz.interval()));
    from_parts(value, vec![xz, xy, yz])
}

/// `|G_r(x, y) G_r(x2, y2) / (G_r(x, y2) G_r(x2, y)) - 1|` as an interval;
/// exactly zero when `x = x2` or `y = y2`.
pub fn strong_defect(
    field: &GreenField<'_>,
    (x, y): (&GroupElement, &GroupElement),
    (x2, y2): (&GroupElement, &GroupElement),
) -> AnconaValue {
    let g = |a: &GroupElement, b: &GroupElement| field.estimate(&a.inverse().mul(b));
    let (a, b, c, d) = (g(x, y), g(x2, y2), g(x, y2), g(x2, y));
    let value = if x == x2 || y == y2 {
        Interval::point(0.0)
    } else {
        a.interval().mul(&b.interval()).div(&c.interval().mul(&d.interval())).distance_from_one()
    };
    from_parts(value, vec![a, b, c, d])
}

pub fn weak_ancona_ratio(
    measure: &Measure,
    r: f64,
    (x, y, z): (&GroupElement, &GroupElement, &GroupElement),
    n_max: usize,
) -> Result<AnconaValue> {
    let walk = Walk::new(measure, n_max)?;
    Ok(weak_ratio(&walk.green_field(r)?, x, y, z))
}

pub fn strong_ancona_defect(
    measure: &Measure,
    r: f64,
    pair: (&GroupElement, &GroupElement),
    other: (&GroupElement, &GroupElement),
    n_max: usize,
) -> Result<AnconaValue> {
    let walk = Walk::new(measure, n_max)?;
    Ok(strong_defect(&walk.green_field(r)?, pair, other))
}

/// `eta -> G_r(x, y; W \ B_eta(z))` for the window `W = z ball(window)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AvoidanceCurve {
    pub r: f64,
    pub etas: Vec<u32>,
    pub values: Vec<GreenEstimate>,
    /// The same curve on the window enlarged by `enlarged_by`, when requested.
    pub enlarged: Option<Vec<GreenEstimate>>,
    pub enlarged_by: u32,
    /// Conservative ends are nonincreasing in `eta`.
    pub monotone: bool,
}

impl AvoidanceCurve {
    /// Second differences of `log` of the upper ends. A zero value is a log
    /// of `-inf` and counts as satisfying any upper bound.
    pub fn log_second_differences(&self) -> Vec<f64> {
        let logs: Vec<f64> = self.values.iter().map(|v| v.upper.ln()).collect();
        logs.windows(3)
            .map(|w| {
                if w[2] == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    w[2] - 2.0 * w[1] + w[0]
                }
            })
            .collect()
    }
}

#[allow(clippy::too_many_arguments)]
pub fn avoidance_decay(
    measure: &Measure,
    r: f64,
    (x, y, z): (&GroupElement, &GroupElement, &GroupElement),
    etas: &[u32],
    window: u32,
    n_max: usize,
    enlarge_by: Option<u32>,
) -> Result<AvoidanceCurve> {
    let group = measure.group();
    let curve = |radius: u32| -> Result<Vec<GreenEstimate>> {
        let ball = group.ball(radius)?;
        for p in [x, y] {
            if !ball.contains(&z.inverse().mul(p)) {
                return Err(Error::Precondition(format!("{p} lies outside the window of radius {radius}")));
            }
        }
        etas.iter()
            .map(|&eta| {
                if eta >= radius {
                    return Err(Error::Precondition(format!("eta = {eta} does not fit in window {radius}")));
                }
                let region: Vec<GroupElement> =
                    ball.elements().iter().filter(|w| w.length() > eta).map(|w| z.mul(w)).collect();
                RestrictedSystem::new(measure, r, region)?.green(x, y, RestrictedMethod::Solve, n_max)
            })
            .collect()
    };
    let values = curve(window)?;
    let enlarged = enlarge_by.map(|k| curve(window + k)).transpose()?;
    let monotone = values.windows(2).all(|w| w[1].lower <= w[0].upper);
    Ok(AvoidanceCurve { r, etas: etas.to_vec(), values, enlarged, enlarged_by: enlarge_by.unwrap_or(0), monotone })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScanKind {
    Weak,
    Strong,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnconaScanConfig {
    pub group: Vec<String>,
    pub measure: MeasureSpec,
    /// Values of `r` as fractions of the lower radius estimate.
    #[serde(default)]
    pub r_fractions: Vec<f64>,
    #[serde(default = "default_kinds")]
    pub kinds: Vec<ScanKind>,
    /// Weak scan: largest `|x|, |z|` with `y = e` the midpoint.
    #[serde(default = "default_max_length")]
    pub max_length: u32,
    /// Strong scan: shared geodesic lengths.
    #[serde(default = "default_shared")]
    pub shared_lengths: Vec<u32>,
    /// Strong scan: branch lengths `(|x|, |x2|, |y|, |y2|)` off the shared segment.
    #[serde(default = "default_branches")]
    pub branches: [u32; 4],
    #[serde(default = "default_samples")]
    pub samples_per_length: usize,
    #[serde(default)]
    pub epsilon: u32,
    #[serde(default = "default_eta")]
    pub eta: u32,
    /// Floyd base and threshold; midpoints must satisfy `delta^f_e(x, z) >= delta`.
    #[serde(default = "default_floyd_a")]
    pub floyd_a: f64,
    #[serde(default)]
    pub floyd_delta: f64,
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_kinds() -> Vec<ScanKind> {
    vec![ScanKind::Weak, ScanKind::Strong]
}
fn default_max_length() -> u32 {
    8
}
fn default_shared() -> Vec<u32> {
    (2..=8).collect()
}
fn default_branches() -> [u32; 4] {
    [1, 2, 1, 2]
}
fn default_samples() -> usize {
    24
}
fn default_eta() -> u32 {
    1
}
fn default_floyd_a() -> f64 {
    2.0
}
fn default_n_max() -> usize {
    400
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnconaRow {
    pub config_id: usize,
    pub kind: ScanKind,
    pub r: f64,
    /// `max(|x|, |z|)` for weak rows, the shared length for strong rows.
    pub parameter: u32,
    pub points: Vec<String>,
    pub value: AnconaValue,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnconaSummary {
    pub r: f64,
    /// `C` with every weak ratio bracket inside `[1/C, C]`.
    pub ratio_constant: f64,
    /// Slope of `log` defect upper ends against the shared length.
    pub defect_slope: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnconaScanReport {
    pub rows: Vec<AnconaRow>,
    pub summaries: Vec<AnconaSummary>,
}

impl AnconaScanReport {
    /// `C` over the weak rows at `r` with parameter at most `max_parameter`.
    pub fn ratio_constant(&self, r: f64, max_parameter: u32) -> f64 {
        self.rows
            .iter()
            .filter(|row| row.kind == ScanKind::Weak && row.r == r && row.parameter <= max_parameter)
            .map(|row| row.value.value.upper.max(1.0 / row.value.value.lower))
            .fold(1.0, f64::max)
    }

    /// Least-squares slope of `log(defect upper end)` against the shared length.
    pub fn defect_slope(&self, r: f64) -> Option<f64> {
        let (xs, ys): (Vec<f64>, Vec<f64>) = self
            .rows
            .iter()
            .filter(|row| row.kind == ScanKind::Strong && row.r == r && row.value.value.upper > 0.0)
            .map(|row| (row.parameter as f64, row.value.value.upper.ln()))
            .unzip();
        let distinct = xs.iter().any(|x| *x != xs[0]);
        (xs.len() >= 2 && distinct).then(|| linear_fit(&xs, &ys).0)
    }

    pub fn uncertified_rows(&self) -> usize {
        self.rows.iter().filter(|r| !r.value.certified).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("config_id,kind,r,parameter,points,value_lower,value_upper,green_brackets,certified\n");
        for row in &self.rows {
            let kind = match row.kind {
                ScanKind::Weak => "weak",
                ScanKind::Strong => "strong",
            };
            let brackets: Vec<String> =
                row.value.parts.iter().map(|g| format!("[{:e};{:e}]", g.lower, g.upper)).collect();
            out.push_str(&format!(
                "{},{},{},{},\"{}\",{:e},{:e},{},{}\n",
                row.config_id,
                kind,
                row.r,
                row.parameter,
                row.points.join(" "),
                row.value.value.lower,
                row.value.value.upper,
                brackets.join(" "),
                row.value.certified
            ));
        }
        out
    }
}

/// Elements of each sphere up to `radius`, in length-lex order.
fn spheres(group: &GroupSpec, radius: u32) -> Result<Vec<Vec<GroupElement>>> {
    let ball = group.ball(radius)?;
    Ok((0..=radius).map(|k| ball.sphere(k).cloned().collect()).collect())
}

/// Midpoint configurations `(x, z)` with `y = e`: `|x|` and `|z|` differ by
/// at most one, `e` lies on a geodesic from `x` to `z`, and `e` is an
/// `(eps, eta)`-transition point of that geodesic with Floyd gap at least
/// `delta`.
fn weak_configurations(cfg: &AnconaScanConfig, group: &GroupSpec) -> Result<Vec<(u32, GroupElement, GroupElement)>> {
    let sph = spheres(group, cfg.max_length)?;
    let floyd = if cfg.floyd_delta > 0.0 { Some(FloydSpace::new(group, cfg.floyd_a, cfg.max_length)?) } else { None };
    let e = GroupElement::identity();
    let mut out = Vec::new();
    for len in 1..=cfg.max_length {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (u64::from(len) << 32));
        let mut found = Vec::new();
        let mut attempts = 0;
        while found.len() < cfg.samples_per_length && attempts < 200 * cfg.samples_per_length {
            attempts += 1;
            let short = len.saturating_sub(rng_bit(&mut rng)).max(1);
            let (a, b) = if rng_bit(&mut rng) == 0 { (len, short) } else { (short, len) };
            let x = sph[a as usize].choose(&mut rng).expect("nonempty sphere").clone();
            let z = sph[b as usize].choose(&mut rng).expect("nonempty sphere").clone();
            if x.distance(&z) != a + b || found.iter().any(|(_, p, q)| *p == x && *q == z) {
                continue;
            }
            let mut path = group.geodesic(&x, &e);
            path.extend(group.geodesic(&e, &z).into_iter().skip(1));
            let mid = a as usize;
            if !is_transition_point(group, &path, mid, cfg.epsilon, cfg.eta)? {
                continue;
            }
            if let Some(space) = &floyd {
                if space.distance(&e, &x, &z)?.value < cfg.floyd_delta {
                    continue;
                }
            }
            found.push((len, x, z));
        }
        out.extend(found);
    }
    Ok(out)
}

fn rng_bit(rng: &mut ChaCha8Rng) -> u32 {
    use rand::Rng;
    rng.gen_range(0..2)
}

/// Pairs `(x, y)`, `(x2, y2)` whose geodesics share the segment `[e, w]`
/// with `|w| = n`: `x, x2` hang off `e` and `y = w s`, `y2 = w s2`.
fn strong_configurations(
    cfg: &AnconaScanConfig,
    group: &GroupSpec,
) -> Result<Vec<(u32, [GroupElement; 4])>> {
    let [a, a2, b, b2] = cfg.branches;
    let top = cfg.shared_lengths.iter().copied().max().unwrap_or(0).max(a).max(a2).max(b).max(b2);
    let sph = spheres(group, top)?;
    let mut out = Vec::new();
    for &n in &cfg.shared_lengths {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed ^ (u64::from(n) << 32));
        let mut found: Vec<[GroupElement; 4]> = Vec::new();
        let mut attempts = 0;
        while found.len() < cfg.samples_per_length && attempts < 200 * cfg.samples_per_length {
            attempts += 1;
            let pick = |k: u32, rng: &mut ChaCha8Rng| sph[k as usize].choose(rng).expect("nonempty sphere").clone();
            let w = pick(n, &mut rng);
            let (x, x2) = (pick(a, &mut rng), pick(a2, &mut rng));
            let (s, s2) = (pick(b, &mut rng), pick(b2, &mut rng));
            let (y, y2) = (w.mul(&s), w.mul(&s2));
            let through = |p: &GroupElement, q: &GroupElement, lp: u32, lq: u32| p.distance(q) == lp + n + lq;
            if !(through(&x, &y, a, b) && through(&x2, &y2, a2, b2) && through(&x, &y2, a, b2) && through(&x2, &y, a2, b)) {
                continue;
            }
            let config = [x, y, x2, y2];
            if found.contains(&config) {
                continue;
            }
            found.push(config);
        }
        out.extend(found.into_iter().map(|c| (n, c)));
    }
    Ok(out)
}

/// Full-factorial scan over `r` and the generated configurations.
pub fn relative_ancona_scan(cfg: &AnconaScanConfig) -> Result<AnconaScanReport> {
    if cfg.r_fractions.is_empty() {
        return Ok(AnconaScanReport { rows: Vec::new(), summaries: Vec::new() });
    }
    if let Some(f) = cfg.r_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::Config(format!("r fraction {f} outside (0, 1]")));
    }
    let group = GroupSpec::parse(&cfg.group)?;
    let measure = make_measure::<f64>(&group, &cfg.measure)?;
    let walk = Walk::new(&measure, cfg.n_max)?;
    let weak = if cfg.kinds.contains(&ScanKind::Weak) { weak_configurations(cfg, &group)? } else { Vec::new() };
    let strong = if cfg.kinds.contains(&ScanKind::Strong) { strong_configurations(cfg, &group)? } else { Vec::new() };
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for &frac in &cfg.r_fractions {
        let r = frac * walk.radius().lower;
        let field = walk.green_field(r)?;
        let e = GroupElement::identity();
        let weak_rows: Vec<AnconaRow> = weak
            .par_iter()
            .map(|(len, x, z)| AnconaRow {
                config_id: 0,
                kind: ScanKind::Weak,
                r,
                parameter: *len,
                points: vec![x.to_string(), e.to_string(), z.to_string()],
                value: weak_ratio(&field, x, &e, z),
            })
            .collect();
        let strong_rows: Vec<AnconaRow> = strong
            .par_iter()
            .map(|(n, [x, y, x2, y2])| AnconaRow {
                config_id: 0,
                kind: ScanKind::Strong,
                r,
                parameter: *n,
                points: [x, y, x2, y2].iter().map(|p| p.to_string()).collect(),
                value: strong_defect(&field, (x, y), (x2, y2)),
            })
            .collect();
        rows.extend(weak_rows);
        rows.extend(strong_rows);
        summaries.push(AnconaSummary { r, ratio_constant: 0.0, defect_slope: None });
    }
    for (i, row) in rows.iter_mut().enumerate() {
        row.config_id = i;
    }
    let mut report = AnconaScanReport { rows, summaries };
    for k in 0..report.summaries.len() {
        let r = report.summaries[k].r;
        report.summaries[k].ratio_constant = report.ratio_constant(r, u32::MAX);
        report.summaries[k].defect_slope = report.defect_slope(r);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(names: &[&str], spec: MeasureSpec, n: usize) -> (GroupSpec, Measure, Walk) {
        let g = GroupSpec::parse(names).unwrap();
        let m = make_measure::<f64>(&g, &spec).unwrap();
        let w = Walk::new(&m, n).unwrap();
        (g, m, w)
    }

    #[test]
    fn ratio_with_x_equal_y_is_inverse_return_green() {
        let (g, _, w) = setup(&["F_2"], MeasureSpec::Srw, 200);
        let field = w.green_field(0.8).unwrap();
        let x = g.generators()[0].clone();
        let z = g.parse_element("F0(ab)").unwrap();
        let v = weak_ratio(&field, &x, &x, &z);
        let gee = field.estimate(&GroupElement::identity()).interval();
        let expected = Interval::point(1.0).div(&gee);
        assert!(v.value.overlaps(&expected));
        assert!(v.value.upper <= 1.0);
    }

    #[test]
    fn defect_vanishes_on_shared_endpoint_and_is_symmetric() {
        let (g, _, w) = setup(&["F_2"], MeasureSpec::UniformBall { radius: 2 }, 200);
        let field = w.green_field(0.5).unwrap();
        let p = |s: &str| g.parse_element(s).unwrap();
        let (x, y, x2, y2) = (p("F0(A)"), p("F0(abb)"), p("F0(BA)"), p("F0(aba)"));
        assert_eq!(strong_defect(&field, (&x, &y), (&x, &y2)).value, Interval::point(0.0));
        let d1 = strong_defect(&field, (&x, &y), (&x2, &y2)).value;
        let d2 = strong_defect(&field, (&x2, &y2), (&x, &y)).value;
        assert_eq!(d1, d2);
    }

    #[test]
    fn avoidance_on_z_cut_vertex_is_zero() {
        let (g, m, _) = setup(&["Z"], MeasureSpec::Srw, 10);
        let p = |s: &str| g.parse_element(s).unwrap();
        let curve = avoidance_decay(&m, 0.9, (&p("Z0(-3)"), &p("Z0(3)"), &GroupElement::identity()), &[0, 1, 2], 6, 200, None).unwrap();
        for v in &curve.values {
            assert_eq!((v.lower, v.upper), (0.0, 0.0));
        }
        assert!(curve.monotone);
    }

    #[test]
    fn empty_grid_gives_empty_report() {
        let cfg: AnconaScanConfig = serde_json::from_str(r#"{"group":["Z","Z"],"measure":{"kind":"srw"}}"#).unwrap();
        let report = relative_ancona_scan(&cfg).unwrap();
        assert!(report.rows.is_empty());
    }
}
