//! Dispatch from a loaded configuration to the library, producing CSV text,
//! a JSON report and a plot. Nothing is written to disk here.

use std::time::{Duration, Instant};

use martinlab::ancona::{avoidance_decay, relative_ancona_scan, AnconaScanConfig};
use martinlab::floyd::FloydSpace;
use martinlab::freeprod::FreeProductSolver;
use martinlab::group::FactorSpec;
use martinlab::numeric::linear_fit;
use martinlab::parabolic::{
    defect_tolerance, eigen_triple, factor_rank, first_return_kernel, harmonicity_residual, is_spectrally_degenerate,
    lambda, lambda_min, level_set_point, local_limit_exponent, parabolic_martin_kernel, rank_gate, ParabolicKernel,
};
use martinlab::{Error, GroupElement, Measure, Walk};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{ExperimentKind, LoadedConfig, RGrid};
use crate::error::{CliError, CliResult};
use crate::svg::{Plot, Series};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParabolicMode {
    Kernel,
    Lambda,
    Degenerate,
    Llt,
}

/// What to run: an experiment kind, refined by a mode for `parabolic`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Task {
    pub kind: ExperimentKind,
    pub mode: Option<ParabolicMode>,
}

impl Task {
    pub fn new(kind: ExperimentKind) -> Self {
        Task { kind, mode: None }
    }

    pub fn parabolic(mode: ParabolicMode) -> Self {
        Task { kind: ExperimentKind::Parabolic, mode: Some(mode) }
    }

    /// Stem of the output files.
    pub fn stem(&self) -> &'static str {
        match self.mode {
            Some(ParabolicMode::Kernel) => "parabolic-kernel",
            Some(ParabolicMode::Lambda) => "parabolic-lambda",
            Some(ParabolicMode::Degenerate) => "degenerate",
            Some(ParabolicMode::Llt) => "llt",
            None => self.kind.stem(),
        }
    }

    fn accepts(&self, declared: ExperimentKind) -> bool {
        declared == self.kind
            || matches!(
                (self.mode, declared),
                (Some(ParabolicMode::Degenerate), ExperimentKind::Degenerate)
                    | (Some(ParabolicMode::Llt), ExperimentKind::Llt)
            )
            || (self.kind == ExperimentKind::Parabolic
                && matches!(declared, ExperimentKind::Degenerate | ExperimentKind::Llt)
                && self.mode.is_none())
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    /// Record real wall times; off by default so reruns are byte-identical.
    pub timings: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Failing checks of this kind make the run exit with the numerical code.
    pub fatal: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub experiment: String,
    pub config_sha256: String,
    pub version: String,
    pub seed: u64,
    pub rows: usize,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub summary: serde_json::Value,
    pub wall_time_ms: u64,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    /// First failing fatal check.
    pub fn fatal_failure(&self) -> Option<&Check> {
        self.checks.iter().find(|c| c.fatal && !c.passed)
    }
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub task: Task,
    pub csv: String,
    pub report: RunReport,
    pub plot: Plot,
}

impl Outcome {
    pub fn svg(&self) -> String {
        self.plot.render(&self.report.config_sha256)
    }
}

/// Rows of a CSV table; every cell is preformatted.
struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&'static str]) -> Self {
        Table { header: header.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    fn to_csv(&self, hash: &str) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("write to memory");
        for row in &self.rows {
            w.write_record(row).expect("write to memory");
        }
        let body = String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf8 csv");
        format!("# config_sha256={hash}\n{body}")
    }
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

fn lattice(x: &[i64]) -> String {
    let parts: Vec<String> = x.iter().map(i64::to_string).collect();
    format!("({})", parts.join(";"))
}

fn vector(x: &[f64]) -> String {
    let parts: Vec<String> = x.iter().map(|v| num(*v)).collect();
    format!("({})", parts.join(";"))
}

/// Cooperative wall-clock budget, checked between grid points.
struct Deadline {
    start: Instant,
    limit: Duration,
}

impl Deadline {
    fn check(&self) -> CliResult<()> {
        if self.start.elapsed() > self.limit {
            return Err(Error::Resource(format!("wall time budget of {} s exhausted", self.limit.as_secs())).into());
        }
        Ok(())
    }
}

/// Element budget for balls, from the memory budget at about 256 bytes each.
fn ball_budget(memory_mb: u64) -> usize {
    (memory_mb.saturating_mul(1 << 20) / 256).min(usize::MAX as u64) as usize
}

/// Lower estimate of the spectral radius `R`.
///
/// A single free-abelian factor is amenable with a symmetric walk, so `R = 1`.
/// Free products use the first-return solver when it applies; otherwise the
/// walk's own bracket.
fn reference_radius(measure: &Measure, walk: Option<&Walk>, n_max: usize) -> CliResult<f64> {
    let group = measure.group();
    if let [FactorSpec::FreeAbelian(_)] = group.factors() {
        return Ok(1.0);
    }
    if group.factors().len() > 1 {
        if let Ok(solver) = FreeProductSolver::new(measure) {
            return Ok(solver.radius().lower);
        }
    }
    match walk {
        Some(w) => Ok(w.radius().lower),
        None => Ok(Walk::new(measure, n_max)?.radius().lower),
    }
}

fn r_values(grid: &RGrid, radius: impl FnOnce() -> CliResult<f64>) -> CliResult<Vec<f64>> {
    let mut rs = grid.r.clone();
    if !grid.r_fractions.is_empty() {
        let big_r = radius()?;
        rs.extend(grid.r_fractions.iter().map(|f| f * big_r));
    }
    Ok(rs)
}

fn missing(block: &str) -> CliError {
    CliError::Config(format!("missing [{block}] block"))
}

fn parse_pairs(cfg: &LoadedConfig, pairs: &[[String; 2]]) -> CliResult<Vec<(GroupElement, GroupElement)>> {
    pairs
        .iter()
        .map(|[x, y]| Ok((cfg.group.parse_element(x)?, cfg.group.parse_element(y)?)))
        .collect()
}

struct Ctx<'a> {
    cfg: &'a LoadedConfig,
    deadline: Deadline,
    wall_ms: bool,
}

struct Produced {
    table: Table,
    checks: Vec<Check>,
    summary: serde_json::Value,
    plot: Plot,
}

/// Runs one experiment entirely in memory.
pub fn run_experiment(cfg: &LoadedConfig, task: Task, opts: &RunOptions) -> CliResult<Outcome> {
    if let Some(declared) = cfg.config.experiment {
        if !task.accepts(declared) {
            return Err(CliError::Config(format!(
                "config declares experiment {declared:?} but {} was requested",
                task.stem()
            )));
        }
    }
    let mut cfg = cfg.clone();
    if let Some(seed) = opts.seed {
        cfg.config.seed = seed;
    }
    let start = Instant::now();
    let ctx = Ctx {
        cfg: &cfg,
        deadline: Deadline { start, limit: Duration::from_secs(cfg.config.budget.wall_time_s) },
        wall_ms: opts.timings,
    };
    let produced = match (task.kind, task.mode) {
        (ExperimentKind::Green, _) => green(&ctx)?,
        (ExperimentKind::Restricted, _) => restricted(&ctx)?,
        (ExperimentKind::SpectralRadius, _) => radius(&ctx)?,
        (ExperimentKind::Floyd, _) => floyd(&ctx)?,
        (ExperimentKind::Ancona, _) => ancona(&ctx)?,
        (ExperimentKind::Parabolic, Some(ParabolicMode::Kernel)) => parabolic_kernel(&ctx)?,
        (ExperimentKind::Parabolic, Some(ParabolicMode::Lambda) | None) => parabolic_lambda(&ctx)?,
        (ExperimentKind::Degenerate, _) | (ExperimentKind::Parabolic, Some(ParabolicMode::Degenerate)) => {
            degenerate(&ctx)?
        }
        (ExperimentKind::Llt, _) | (ExperimentKind::Parabolic, Some(ParabolicMode::Llt)) => llt(&ctx)?,
        (ExperimentKind::Derivative, _) => derivative(&ctx)?,
        (ExperimentKind::SphereSum, _) => spheres(&ctx)?,
    };
    let wall_time_ms = if opts.timings { start.elapsed().as_millis() as u64 } else { 0 };
    let report = RunReport {
        experiment: task.stem().to_string(),
        config_sha256: cfg.hash.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.config.seed,
        rows: produced.table.rows.len(),
        passed: produced.checks.iter().all(|c| c.passed),
        checks: produced.checks,
        summary: produced.summary,
        wall_time_ms,
    };
    Ok(Outcome { task, csv: produced.table.to_csv(&cfg.hash), report, plot: produced.plot })
}

fn elapsed_cell(ctx: &Ctx, t: Instant) -> String {
    if ctx.wall_ms {
        t.elapsed().as_millis().to_string()
    } else {
        "0".into()
    }
}

fn green(ctx: &Ctx) -> CliResult<Produced> {
    let cfg = ctx.cfg;
    let block = cfg.config.green.as_ref().ok_or_else(|| missing("green"))?;
    let n_max = cfg.config.budget.n_max;
    let pairs = parse_pairs(cfg, &block.points)?;
    let walk = Walk::new(&cfg.measure, n_max)?;
    let rs = r_values(&block.grid, || reference_radius(&cfg.measure, Some(&walk), n_max))?;
    let tasks: Vec<(f64, usize)> = rs.iter().flat_map(|&r| (0..pairs.len()).map(move |i| (r, i))).collect();
    let rows: Vec<(f64, usize, martinlab::GreenEstimate, String)> = tasks
        .par_iter()
        .map(|&(r, i)| {
            ctx.deadline.check()?;
            let t = Instant::now();
            let est = walk.green(r, &pairs[i].0, &pairs[i].1)?;
            Ok((r, i, est, elapsed_cell(ctx, t)))
        })
        .collect::<CliResult<_>>()?;

    let mut table = Table::new(&["quantity", "r", "x", "y", "lower", "upper", "n_max", "method", "wall_time_ms"]);
    let mut series: Vec<Series> =
        pairs.iter().map(|(x, y)| Series { name: format!("G({x},{y})"), ..Default::default() }).collect();
    let mut ordered = true;
    for (r, i, est, ms) in &rows {
        let (x, y) = &pairs[*i];
        ordered &= est.lower <= est.upper;
        table.rows.push(vec![
            "green".into(),
            num(*r),
            x.to_string(),
            y.to_string(),
            num(est.lower),
            num(est.upper),
            est.n_truncation.to_string(),
            est.tail_bound_method.to_string(),
            ms.clone(),
        ]);
        series[*i].points.push((*r, est.lower));
    }
    let certified = rows.iter().filter(|(_, _, e, _)| e.certified()).count();
    Ok(Produced {
        table,
        checks: vec![Check { name: "brackets_ordered".into(), passed: ordered, fatal: true, detail: String::new() }],
        summary: json!({ "certified_rows": certified, "rows": rows.len() }),
        plot: Plot {
            title: "Green function lower ends".into(),
            x_label: "r".into(),
            y_label: "G_r(x, y)".into(),
            series,
            ..Default::default()
        },
    })
}

fn restricted(ctx: &Ctx) -> CliResult<Produced> {
    let cfg = ctx.cfg;
    let block = cfg.config.restricted.as_ref().ok_or_else(|| missing("restricted"))?;
    let n_max = cfg.config.budget.n_max;
    let g = &cfg.group;
    let (x, y, z) = (g.parse_element(&block.x)?, g.parse_element(&block.y)?, g.parse_element(&block.z)?);
    let rs = r_values(&block.grid, || reference_radius(&cfg.measure, None, n_max))?;
    let curves = rs
        .par_iter()
        .map(|&r| {
            ctx.deadline.check()?;
            let t = Instant::now();
            let c = avoidance_decay(&cfg.measure, r, (&x, &y, &z), &block.eta, block.window, n_max, None)?;
            Ok((c, elapsed_cell(ctx, t)))
        })
        .collect::<CliResult<Vec<_>>>()?;

    let mut table = Table::new(&["quantity", "r", "eta", "x", "y", "lower", "upper", "n_max", "method", "wall_time_ms"]);
    let mut series = Vec::new();
    let mut monotone = true;
    let mut concave = true;
    let mut second = Vec::new();
    for (curve, ms) in &curves {
        monotone &= curve.monotone;
        let d2 = curve.log_second_differences();
        concave &= d2.iter().all(|v| *v <= 1e-9);
        second.push(json!({ "r": curve.r, "log_second_differences": d2.iter().map(|v| num(*v)).collect::<Vec<_>>() }));
        let mut s = Series { name: format!("r = {:.4}", curve.r), line: true, ..Default::default() };
        for (eta, est) in curve.etas.iter().zip(&curve.values) {
            table.rows.push(vec![
                "restricted".into(),
                num(curve.r),
                eta.to_string(),
                x.to_string(),
                y.to_string(),
                num(est.lower),
                num(est.upper),
                est.n_truncation.to_string(),
                est.tail_bound_method.to_string(),
                ms.clone(),
            ]);
            s.points.push((*eta as f64, est.upper));
        }
        series.push(s);
    }
    Ok(Produced {
        table,
        checks: vec![
            Check { name: "monotone_in_eta".into(), passed: monotone, fatal: true, detail: String::new() },
            Check {
                name: "log_second_differences_nonpositive".into(),
                passed: concave,
                fatal: false,
                detail: "evidence of super-exponential decay".into(),
            },
        ],
        summary: json!({ "window": block.window, "curves": second }),
        plot: Plot {
            title: "Avoidance decay".into(),
            x_label: "eta".into(),
            y_label: "G_r(x, y; complement of ball)".into(),
            log_y: true,
            series,
            ..Default::default()
        },
    })
}

fn radius(ctx: &Ctx) -> CliResult<Produced> {
    let cfg = ctx.cfg;
    let block = cfg.config.radius.as_ref().ok_or_else(|| missing("radius"))?;
    let walks = block
        .n_max
        .par_iter()
        .map(|&n| {
            ctx.deadline.check()?;
            let t = Instant::now();
            let w = Walk::new(&cfg.measure, n)?;
            Ok((n, w.radius().clone(), elapsed_cell(ctx, t)))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut table = Table::new(&["quantity", "n_max", "lower", "upper", "method", "wall_time_ms"]);
    let mut lower = Series { name: "lower".into(), line: true, ..Default::default() };
    let mut upper = Series { name: "upper".into(), line: true, ..Default::default() };
    let mut ordered = true;
    for (n, est, ms) in &walks {
        ordered &= est.lower <= est.upper;
        table.rows.push(vec![
            "spectral_radius".into(),
            n.to_string(),
            num(est.lower),
            num(est.upper),
            est.method.clone(),
            ms.clone(),
        ]);
        lower.points.push((*n as f64, est.lower));
        upper.points.push((*n as f64, est.upper));
    }
    let mut summary = json!({});
    if cfg.group.factors().len() > 1 {
        if let Ok(solver) = FreeProductSolver::new(&cfg.measure) {
            let est = solver.radius();
            summary = json!({ "first_return": { "lower": num(est.lower), "upper": num(est.upper) } });
            table.rows.push(vec![
                "spectral_radius".into(),
                martinlab::freeprod::FACTOR_SERIES_LEN.to_string(),
                num(est.lower),
                num(est.upper),
                est.method.clone(),
                "0".into(),
            ]);
        }
    }
    Ok(Produced {
        table,
        checks: vec![Check { name: "brackets_ordered".into(), passed: ordered, fatal: true, detail: String::new() }],
        summary,
        plot: Plot {
            title: "Spectral radius bracket".into(),
            x_label: "n_max".into(),
            y_label: "R".into(),
            series: vec![lower, upper],
            ..Default::default()
        },
    })
}

fn floyd(ctx: &Ctx) -> CliResult<Produced> {
    let cfg = ctx.cfg;
    let block = cfg.config.floyd.as_ref().ok_or_else(|| missing("floyd"))?;
    let group = &cfg.group;
    let budget = ball_budget(cfg.config.budget.memory_mb);
    group.ball_with_budget(block.radius, budget)?;
    let space = FloydSpace::new(group, block.a, block.radius)?;
    let o = group.parse_element(&block.basepoint)?;
    let points: Vec<GroupElement> =
        group.ball_with_budget(block.pair_radius, budget)?.elements().iter().map(|w| o.mul(w)).collect();
    let n = points.len();

    // Full distance matrix over the pair ball, one row per source.
    let matrix = (0..n)
        .into_par_iter()
        .map(|i| {
            ctx.deadline.check()?;
            (0..n).map(|j| Ok(space.distance(&o, &points[i], &points[j])?)).collect::<CliResult<Vec<_>>>()
        })
        .collect::<CliResult<Vec<_>>>()?;

    let mut table = Table::new(&["basepoint", "x", "y", "a", "value", "exact"]);
    let (mut symmetry, mut zero, mut triangle) = (0usize, 0usize, 0usize);
    for i in 0..n {
        zero += (matrix[i][i].value != 0.0) as usize;
        for j in 0..n {
            let dij = matrix[i][j].value;
            if i < j {
                symmetry += (dij != matrix[j][i].value) as usize;
                table.rows.push(vec![
                    o.to_string(),
                    points[i].to_string(),
                    points[j].to_string(),
                    num(block.a),
                    num(dij),
                    matrix[i][j].exact.to_string(),
                ]);
            }
            for k in 0..n {
                triangle += (dij > matrix[i][k].value + matrix[k][j].value + 1e-12 * dij) as usize;
            }
        }
    }
    let visibility = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut bad = 0usize;
            for j in i + 1..n {
                let (lhs, rhs) = space.visibility_bound(&o, &points[i], &points[j])?;
                bad += (lhs > rhs * (1.0 + 1e-12)) as usize;
            }
            Ok(bad)
        })
        .collect::<CliResult<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();

    let mut transitions = Vec::new();
    if let Some(target) = &block.path_to {
        let t = group.parse_element(target)?;
        let path = group.geodesic(&o, &t);
        for &delta in &block.delta {
            let set = space.transition_set(&path, delta)?;
            let names: Vec<String> = set.iter().map(|&j| path[j].to_string()).collect();
            transitions.push(json!({ "delta": num(delta), "points": names }));
        }
    }
    let mut series = Series { name: "delta_f(o, x) vs |x|".into(), ..Default::default() };
    for (j, p) in points.iter().enumerate() {
        series.points.push((o.distance(p) as f64, matrix[0][j].value));
    }
    let check = |name: &str, count: usize| Check {
        name: name.into(),
        passed: count == 0,
        fatal: true,
        detail: format!("{count} violations"),
    };
    Ok(Produced {
        table,
        checks: vec![
            check("identity", zero),
            check("symmetry", symmetry),
            check("triangle_inequality", triangle),
            check("visibility_bound", visibility),
        ],
        summary: json!({ "points": n, "work_radius": block.radius, "transition_sets": transitions }),
        plot: Plot {
            title: "Floyd distance from the first point".into(),
            x_label: "word distance".into(),
            y_label: "Floyd distance".into(),
            series: vec![series],
            ..Default::default()
        },
    })
}

fn ancona_config(ctx: &Ctx) -> CliResult<AnconaScanConfig> {
    let cfg = ctx.cfg;
    let mut table = cfg.config.ancona.clone().ok_or_else(|| missing("ancona"))?;
    for key in ["group", "measure", "seed"] {
        if table.contains_key(key) {
            return Err(CliError::Config(format!("[ancona] must not set `{key}`; it comes from the top level")));
        }
    }
    let value = |e: toml::ser::Error| CliError::Config(e.to_string());
    table.insert("group".into(), toml::Value::try_from(&cfg.config.group.factors).map_err(value)?);
    table.insert("measure".into(), toml::Value::try_from(&cfg.config.measure).map_err(value)?);
    table.insert("seed".into(), toml::Value::Integer(cfg.config.seed as i64));
    if !table.contains_key("n_max") {
        table.insert("n_max".into(), toml::Value::Integer(cfg.config.budget.n_max as i64));
    }
    toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::Config(format!("[ancona] {}", e.message())))
}

fn ancona(ctx: &Ctx) -> CliResult<Produced> {
    let scan = ancona_config(ctx)?;
    ctx.deadline.check()?;
    let report = relative_ancona_scan(&scan)?;
    ctx.deadline.check()?;
    // The scan renders its own rows; reparse them so quoting stays uniform.
    let text = report.to_csv();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut table = Table::new(&[]);
    table.header = reader.headers().map_err(csv_err)?.iter().map(String::from).collect();
    for rec in reader.records() {
        table.rows.push(rec.map_err(csv_err)?.iter().map(String::from).collect());
    }
    let summaries: Vec<_> = report
        .summaries
        .iter()
        .map(|s| {
            json!({
                "r": num(s.r),
                "ratio_constant": num(s.ratio_constant),
                "defect_slope": s.defect_slope.map(num),
            })
        })
        .collect();
    let mut series = Vec::new();
    for s in &report.summaries {
        let mut pts: Vec<(f64, f64)> = Vec::new();
        for p in 1..=scan.max_length {
            pts.push((p as f64, report.ratio_constant(s.r, p)));
        }
        series.push(Series { name: format!("C at r = {:.4}", s.r), points: pts, line: true });
    }
    Ok(Produced {
        table,
        checks: vec![Check {
            name: "ratios_finite".into(),
            passed: report.summaries.iter().all(|s| s.ratio_constant.is_finite()),
            fatal: false,
            detail: format!("{} uncertified rows", report.uncertified_rows()),
        }],
        summary: json!({ "summaries": summaries, "uncertified_rows": report.uncertified_rows() }),
        plot: Plot {
            title: "Weak ratio constant by configuration size".into(),
            x_label: "max(|x|, |z|)".into(),
            y_label: "C".into(),
            series,
            ..Default::default()
        },
    })
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Check(format!("malformed scan output: {e}"))
}

struct KernelSpec {
    factor: usize,
    eta: u32,
    r: f64,
    window: u32,
    excursion: u32,
}

fn build_kernel(measure: &Measure, k: &KernelSpec) -> CliResult<ParabolicKernel> {
    let truncation = k.eta + k.excursion.max(measure.max_jump());
    Ok(first_return_kernel(measure, k.factor, k.eta, k.r, k.window, truncation)?)
}

fn parabolic_grid(ctx: &Ctx) -> CliResult<Vec<ParabolicKernel>> {
    let cfg = ctx.cfg;
    let block = cfg.config.parabolic.as_ref().ok_or_else(|| missing("parabolic"))?;
    factor_rank(&cfg.group, block.factor)?;
    let rs = r_values(&block.grid, || reference_radius(&cfg.measure, None, cfg.config.budget.n_max))?;
    let specs: Vec<KernelSpec> = rs
        .iter()
        .flat_map(|&r| {
            block.eta.iter().map(move |&eta| KernelSpec {
                factor: block.factor,
                eta,
                r,
                window: block.window,
                excursion: block.excursion,
            })
        })
        .collect();
    specs
        .par_iter()
        .map(|s| {
            ctx.deadline.check()?;
            build_kernel(&cfg.measure, s)
        })
        .collect()
}

fn method_name(k: &ParabolicKernel) -> String {
    format!("{:?}", k.method()).to_lowercase()
}

fn parabolic_kernel(ctx: &Ctx) -> CliResult<Produced> {
    let kernels = parabolic_grid(ctx)?;
    let mut table = Table::new(&["r", "eta", "method", "from", "to", "x", "mass", "block_defect", "truncation", "window"]);
    let mut summary = Vec::new();
    let mut series = Vec::new();
    for k in &kernels {
        for j in 0..k.states() {
            for e in k.row(j) {
                table.rows.push(vec![
                    num(k.r()),
                    k.eta().to_string(),
                    method_name(k),
                    k.neighborhood()[j].to_string(),
                    k.neighborhood()[e.target].to_string(),
                    lattice(&e.x),
                    num(e.mass),
                    num(k.defect()[j][e.target]),
                    k.truncation().to_string(),
                    k.window().to_string(),
                ]);
            }
        }
        let masses: Vec<f64> = (0..k.states()).map(|j| k.row_mass(j)).collect();
        summary.push(json!({
            "r": num(k.r()),
            "eta": k.eta(),
            "method": method_name(k),
            "states": k.states(),
            "row_mass": masses.iter().map(|m| num(*m)).collect::<Vec<_>>(),
            "total_defect": num(k.total_defect()),
        }));
        series.push((k.eta(), k.r(), masses.iter().copied().fold(0.0, f64::max)));
    }
    let mut plot_series: Vec<Series> = Vec::new();
    for (eta, r, m) in series {
        match plot_series.iter_mut().find(|s| s.name == format!("eta = {eta}")) {
            Some(s) => s.points.push((r, m)),
            None => plot_series.push(Series { name: format!("eta = {eta}"), points: vec![(r, m)], line: true }),
        }
    }
    Ok(Produced {
        table,
        checks: vec![Check {
            name: "substochastic".into(),
            passed: kernels.iter().all(|k| (0..k.states()).all(|j| k.row_mass(j) <= 1.0 + 1e-9)),
            fatal: false,
            detail: "row masses at most one below the radius".into(),
        }],
        summary: json!({ "kernels": summary }),
        plot: Plot {
            title: "Largest row mass of the first-return kernel".into(),
            x_label: "r".into(),
            y_label: "row mass".into(),
            series: plot_series,
            ..Default::default()
        },
    })
}

fn parabolic_lambda(ctx: &Ctx) -> CliResult<Produced> {
    let cfg = ctx.cfg;
    let block = cfg.config.parabolic.as_ref().ok_or_else(|| missing("parabolic"))?;
    let d = factor_rank(&cfg.group, block.factor)?;
    for t in &block.theta {
        if t.len() != d {
            return Err(CliError::Config(format!("theta {t:?} must have {d} components")));
        }
    }
    for z in &block.martin_points {
        if z.len() != d {
            return Err(CliError::Config(format!("martin point {z:?} must have {d} components")));
        }
    }
    let kernels = parabolic_grid(ctx)?;
    let g = &block.u_grid;
    let steps: Vec<f64> =
        (0..g.steps).map(|i| g.min + (g.max - g.min) * i as f64 / (g.steps - 1) as f64).collect();

    let per_kernel = kernels
        .par_iter()
        .map(|k| {
            ctx.deadline.check()?;
            let mut rows: Vec<Vec<String>> = Vec::new();
            let head = |kind: &str| vec![num(k.r()), k.eta().to_string(), kind.to_string()];
            let defect = num(k.total_defect());
            let min = lambda_min(k)?;
            let mut row = head("min");
            row.extend([vector(&min.u), num(min.lambda), num(min.gradient_norm), defect.clone()]);
            rows.push(row);
            let mut slice0 = Vec::new();
            for axis in 0..d {
                for &s in &steps {
                    let mut u = min.u.clone();
                    u[axis] = s;
                    // Points past the exponential moment range are skipped.
                    match lambda(k, &u) {
                        Ok(v) => {
                            let mut row = head(&format!("slice{axis}"));
                            row.extend([vector(&u), num(v), String::new(), defect.clone()]);
                            rows.push(row);
                            if axis == 0 {
                                slice0.push((s, v));
                            }
                        }
                        Err(Error::Domain(_)) => {}
                        Err(e) => return Err(e.into()),
                    }
                }
            }
            let mut harmonic = true;
            for theta in &block.theta {
                let p = match level_set_point(k, theta) {
                    Ok(p) => p,
                    Err(Error::Precondition(_)) => continue,
                    Err(e) => return Err(e.into()),
                };
                let mut row = head("level");
                row.extend([vector(&p.u), num(p.lambda), num(p.angle), defect.clone()]);
                rows.push(row);
                let residual = harmonicity_residual(k, &p.eig)?;
                let tol = defect_tolerance(k, &p.eig)?;
                harmonic &= residual <= tol;
                let mut row = head("harmonicity");
                row.extend([vector(theta), num(residual), num(tol), defect.clone()]);
                rows.push(row);
                for z in &block.martin_points {
                    let v = parabolic_martin_kernel(&p.eig, z, 0)?;
                    let mut row = head("martin");
                    row.extend([lattice(z), num(v), vector(theta), defect.clone()]);
                    rows.push(row);
                }
            }
            let eig0 = eigen_triple(k, &vec![0.0; d])?;
            Ok((rows, min, slice0, harmonic, eig0.lambda))
        })
        .collect::<CliResult<Vec<_>>>()?;

    let mut table = Table::new(&["r", "eta", "kind", "point", "value", "aux", "total_defect"]);
    let mut checks_pd = true;
    let mut harmonic_all = true;
    let mut summary = Vec::new();
    let mut series = Vec::new();
    for (k, (rows, min, slice0, harmonic, lambda0)) in kernels.iter().zip(per_kernel) {
        table.rows.extend(rows);
        checks_pd &= min.positive_definite;
        harmonic_all &= harmonic;
        summary.push(json!({
            "r": num(k.r()),
            "eta": k.eta(),
            "method": method_name(k),
            "u_star": min.u.iter().map(|v| num(*v)).collect::<Vec<_>>(),
            "min_lambda": num(min.lambda),
            "lambda_at_zero": num(lambda0),
            "positive_definite": min.positive_definite,
            "at_boundary": min.at_boundary,
            "symmetric": k.is_symmetric(1e-12),
        }));
        series.push(Series { name: format!("r = {:.4}, eta = {}", k.r(), k.eta()), points: slice0, line: true });
    }
    Ok(Produced {
        table,
        checks: vec![
            Check {
                name: "hessian_positive_definite".into(),
                passed: checks_pd,
                fatal: false,
                detail: "at the minimiser".into(),
            },
            Check {
                name: "harmonicity_within_defect".into(),
                passed: harmonic_all,
                fatal: false,
                detail: String::new(),
            },
        ],
        summary: json!({ "kernels": summary }),
        plot: Plot {
            title: "lambda(u) along the first axis".into(),
            x_label: "u_0".into(),
            y_label: "lambda".into(),
            series,
            ..Default::default()
        },
    })
}

fn verdict_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

fn degenerate(ctx: &Ctx) -> CliResult<Produced> {
    let cfg = ctx.cfg;
    let block = cfg.config.degenerate.as_ref().ok_or_else(|| missing("degenerate"))?;
    let factors: Vec<usize> = if block.factors.is_empty() {
        (0..cfg.group.factors().len()).filter(|&i| factor_rank(&cfg.group, i).is_ok()).collect()
    } else {
        block.factors.clone()
    };
    if factors.is_empty() {
        return Err(CliError::Config("no free-abelian factor to examine".into()));
    }
    let mut verdicts = Vec::new();
    for &f in &factors {
        ctx.deadline.check()?;
        verdicts.push(is_spectrally_degenerate(&cfg.measure, f, block.eta, &block.epsilons)?);
    }
    let mut table =
        Table::new(&["factor", "rank", "eta", "epsilon", "r", "min_lambda", "at_boundary", "extrapolated", "verdict"]);
    let mut series = Vec::new();
    let mut gate_ok = true;
    let mut summary = Vec::new();
    for v in &verdicts {
        let name = verdict_name(&v.verdict);
        gate_ok &= !(v.rank <= 4 && name == "degenerate-consistent");
        let mut s = Series { name: format!("factor {} (rank {})", v.factor, v.rank), line: true, ..Default::default() };
        for g in &v.rungs {
            table.rows.push(vec![
                v.factor.to_string(),
                v.rank.to_string(),
                v.eta.to_string(),
                num(g.epsilon),
                num(g.r),
                num(g.min_lambda),
                g.at_boundary.to_string(),
                num(v.extrapolated),
                name.clone(),
            ]);
            s.points.push((g.epsilon, 1.0 - g.min_lambda));
        }
        series.push(s);
        summary.push(json!({ "factor": v.factor, "rank": v.rank, "verdict": name, "note": v.note }));
    }
    Ok(Produced {
        table,
        checks: vec![Check {
            name: "rank_gate".into(),
            passed: gate_ok,
            fatal: true,
            detail: "rank at most four is never degenerate-consistent".into(),
        }],
        summary: json!({ "verdicts": summary }),
        plot: Plot {
            title: "Gap 1 - min lambda along the epsilon ladder".into(),
            x_label: "epsilon".into(),
            y_label: "1 - min lambda".into(),
            log_x: true,
            log_y: true,
            series,
            ..Default::default()
        },
    })
}

fn llt(ctx: &Ctx) -> CliResult<Produced> {
    let cfg = ctx.cfg;
    let block = cfg.config.llt.as_ref().ok_or_else(|| missing("llt"))?;
    let d = factor_rank(&cfg.group, block.factor)?;
    let big_r = reference_radius(&cfg.measure, None, cfg.config.budget.n_max)?;
    let spec = KernelSpec {
        factor: block.factor,
        eta: block.eta,
        r: block.r_fraction * big_r,
        window: block.window,
        excursion: block.excursion,
    };
    let kernel = build_kernel(&cfg.measure, &spec)?;
    ctx.deadline.check()?;
    let fit = local_limit_exponent(&kernel, block.n_max)?;
    let gate = rank_gate(d, fit.exponent);
    let mut table = Table::new(&["n", "return_probability", "fitted"]);
    let mut data = Series { name: "p^(n)(0, 0)".into(), ..Default::default() };
    let mut line = Series { name: "fit".into(), line: true, ..Default::default() };
    for &(n, p) in &fit.returns {
        let fitted = if n > 0 { (fit.intercept + fit.exponent * (n as f64).ln()).exp() } else { f64::NAN };
        table.rows.push(vec![n.to_string(), num(p), num(fitted)]);
        if n > 0 {
            data.points.push((n as f64, p));
            line.points.push((n as f64, fitted));
        }
    }
    let expected = -(d as f64) / 2.0;
    Ok(Produced {
        table,
        checks: vec![Check {
            name: "leakage_below_tolerance".into(),
            passed: fit.leakage <= martinlab::parabolic::LEAKAGE_TOL,
            fatal: false,
            detail: format!("leakage {:e}", fit.leakage),
        }],
        summary: json!({
            "rank": d,
            "r": num(kernel.r()),
            "exponent": num(fit.exponent),
            "expected_exponent": num(expected),
            "band": num(fit.band),
            "residual": num(fit.residual),
            "lazy_shift": fit.lazy_shift,
            "normalisation": num(fit.normalisation),
            "rank_gate": gate.statement,
        }),
        plot: Plot {
            title: "Local limit fit".into(),
            x_label: "n".into(),
            y_label: "p^(n)(0, 0)".into(),
            log_x: true,
            log_y: true,
            series: vec![data, line],
            annotation: Some(format!("slope {:.4} (expected {expected})", fit.exponent)),
        },
    })
}

fn derivative(ctx: &Ctx) -> CliResult<Produced> {
    let cfg = ctx.cfg;
    let block = cfg.config.derivative.as_ref().ok_or_else(|| missing("derivative"))?;
    let n_max = cfg.config.budget.n_max;
    let pairs = parse_pairs(cfg, &block.points)?;
    let walk = Walk::new(&cfg.measure, n_max)?;
    let rs = r_values(&block.grid, || reference_radius(&cfg.measure, Some(&walk), n_max))?;
    let tasks: Vec<(f64, usize)> = rs.iter().flat_map(|&r| (0..pairs.len()).map(move |i| (r, i))).collect();
    let checks = tasks
        .par_iter()
        .map(|&(r, i)| {
            ctx.deadline.check()?;
            Ok((i, walk.green_derivative(r, &pairs[i].0, &pairs[i].1, block.ball_radius)?))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut table = Table::new(&[
        "r", "x", "y", "fd_lower", "fd_upper", "central", "sum_lower", "sum_upper", "ball_radius", "overlap",
    ]);
    let mut fd = Series { name: "difference quotient".into(), ..Default::default() };
    let mut sum = Series { name: "double sum".into(), ..Default::default() };
    let mut failures = Vec::new();
    for (i, c) in &checks {
        let (x, y) = &pairs[*i];
        if !c.overlap {
            failures.push(format!("r = {}, x = {x}, y = {y}", c.r));
        }
        table.rows.push(vec![
            num(c.r),
            x.to_string(),
            y.to_string(),
            num(c.finite_difference.lower),
            num(c.finite_difference.upper),
            num(c.central),
            num(c.double_sum.lower),
            num(c.double_sum.upper),
            c.ball_radius.to_string(),
            c.overlap.to_string(),
        ]);
        fd.points.push((c.r, c.central));
        sum.points.push((c.r, c.double_sum.mid()));
    }
    Ok(Produced {
        table,
        checks: vec![Check {
            name: "derivative_identity_overlap".into(),
            passed: failures.is_empty(),
            fatal: true,
            detail: failures.join("; "),
        }],
        summary: json!({ "pairs": checks.len() }),
        plot: Plot {
            title: "d/dr (r G_r) against the double Green sum".into(),
            x_label: "r".into(),
            y_label: "value".into(),
            series: vec![fd, sum],
            ..Default::default()
        },
    })
}

fn spheres(ctx: &Ctx) -> CliResult<Produced> {
    let cfg = ctx.cfg;
    let block = cfg.config.spheres.as_ref().ok_or_else(|| missing("spheres"))?;
    let n_max = cfg.config.budget.n_max;
    let walk = Walk::new(&cfg.measure, n_max)?;
    let rs = r_values(&block.grid, || reference_radius(&cfg.measure, Some(&walk), n_max))?;
    let curves = rs
        .par_iter()
        .map(|&r| {
            ctx.deadline.check()?;
            let v = (0..=block.k_max).map(|k| walk.sphere_green_sum(r, k)).collect::<martinlab::Result<Vec<_>>>()?;
            Ok((r, v))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut table = Table::new(&["r", "k", "lower", "upper"]);
    let mut series = Vec::new();
    let mut slopes = Vec::new();
    for (r, values) in &curves {
        let mut s = Series { name: format!("r = {r:.4}"), line: true, ..Default::default() };
        for (k, v) in values.iter().enumerate() {
            table.rows.push(vec![num(*r), k.to_string(), num(v.lower), num(v.upper)]);
            s.points.push((k as f64, v.mid()));
        }
        let (ks, logs): (Vec<f64>, Vec<f64>) =
            values.iter().enumerate().skip(1).map(|(k, v)| (k as f64, v.mid().ln())).unzip();
        if ks.len() >= 2 {
            let (slope, _, _) = linear_fit(&ks, &logs);
            slopes.push(json!({ "r": num(*r), "log_slope": num(slope) }));
        }
        series.push(s);
    }
    Ok(Produced {
        table,
        checks: Vec::new(),
        summary: json!({ "slopes": slopes }),
        plot: Plot {
            title: "Sphere sums of G_r(e, x) G_r(x, e)".into(),
            x_label: "k".into(),
            y_label: "u_k".into(),
            log_y: true,
            series,
            ..Default::default()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_use_exponent_form() {
        assert_eq!(num(0.5), "5e-1");
        assert_eq!(num(1e-300), "1e-300");
        assert_eq!(lattice(&[1, -2]), "(1;-2)");
    }

    #[test]
    fn parabolic_modes_accept_their_own_kind() {
        assert!(Task::parabolic(ParabolicMode::Llt).accepts(ExperimentKind::Llt));
        assert!(Task::parabolic(ParabolicMode::Llt).accepts(ExperimentKind::Parabolic));
        assert!(!Task::parabolic(ParabolicMode::Kernel).accepts(ExperimentKind::Llt));
        assert!(!Task::new(ExperimentKind::Green).accepts(ExperimentKind::Floyd));
    }

    #[test]
    fn csv_carries_the_hash_first() {
        let mut t = Table::new(&["a", "b"]);
        t.rows.push(vec!["x,y".into(), "1".into()]);
        assert_eq!(t.to_csv("h"), "# config_sha256=h\na,b\n\"x,y\",1\n");
    }
}
