//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --release --test acceptance`; pass criterion numbers
//! as arguments to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use martinlab::ancona::{avoidance_decay, relative_ancona_scan, AnconaScanConfig};
use martinlab::floyd::FloydSpace;
use martinlab::freeprod::FreeProductSolver;
use martinlab::numeric::linear_fit;
use martinlab::parabolic::{
    cholesky, defect_tolerance, first_return_kernel, harmonicity_residual, hessian, is_spectrally_degenerate,
    kernel_green, lambda_min, level_set_point, local_limit_exponent, moment_range, parabolic_martin_kernel,
    rank_gate, restricted_kernel, woess_fit, ParabolicKernel, Verdict,
};
use martinlab::{make_measure, GroupElement, GroupSpec, Measure, MeasureSpec, Walk};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Outcome = Result<(bool, String), String>;

fn measure(names: &[&str], spec: MeasureSpec) -> Measure {
    let g = GroupSpec::parse(names).unwrap();
    make_measure(&g, &spec).unwrap()
}

fn srw(names: &[&str]) -> Measure {
    measure(names, MeasureSpec::Srw)
}

fn adapted(names: &[&str], w: &[f64]) -> Measure {
    measure(names, MeasureSpec::Adapted { weights: w.to_vec() })
}

fn e() -> GroupElement {
    GroupElement::identity()
}

fn el(m: &Measure, s: &str) -> GroupElement {
    m.group().parse_element(s).unwrap()
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn within_time(start: Instant, limit_s: f64, (ok, detail): (bool, String)) -> (bool, String) {
    let t = start.elapsed().as_secs_f64();
    (ok && t < limit_s, format!("{detail}; {t:.2} s of {limit_s} s"))
}

/// 1. Closed form `(1 - r^2)^{-1/2}` of the Z Green function at the origin.
fn z_green() -> Outcome {
    let start = Instant::now();
    let walk = Walk::new(&srw(&["Z"]), 400).map_err(err)?;
    let mut worst_width: f64 = 0.0;
    let mut ok = true;
    for i in 1..=9 {
        let r = i as f64 / 10.0;
        let g = walk.green(r, &e(), &e()).map_err(err)?;
        let exact = 1.0 / (1.0 - r * r).sqrt();
        ok &= g.contains(exact) && g.width() <= 1e-6;
        worst_width = worst_width.max(g.width());
    }
    Ok(within_time(start, 1.0, (ok, format!("max width {worst_width:.2e}"))))
}

/// 2. Spectral radius of the 4-regular tree.
fn f2_radius() -> Outcome {
    let start = Instant::now();
    let walk = Walk::new(&srw(&["F2"]), 40).map_err(err)?;
    let est = walk.radius();
    let exact = 2.0 / 3f64.sqrt();
    let rel = (exact - est.lower).abs().max((est.upper - exact).abs()) / exact;
    let ok = est.contains(exact) && rel <= 0.02;
    Ok(within_time(start, 10.0, (ok, format!("[{:.6}, {:.6}] vs {exact:.6}, max deviation {:.3}%", est.lower, est.upper, 100.0 * rel))))
}

/// 3. `d/dr (r G_r(g, g'))` against the double Green sum.
fn derivative_identity() -> Outcome {
    let start = Instant::now();
    let mut checked = 0;
    let mut failures = Vec::new();
    for (names, off) in [(["Z"], "Z0(1)"), (["F2"], "F0(a)")] {
        let m = srw(&names);
        let walk = Walk::new(&m, 600).map_err(err)?;
        let big_r = walk.radius().lower;
        let pairs = [(e(), e(), 40), (e(), el(&m, off), 12)];
        for f in [0.3, 0.5, 0.7] {
            for (x, y, ball) in &pairs {
                let c = walk.green_derivative(f * big_r, x, y, *ball).map_err(err)?;
                checked += 1;
                if !c.overlap {
                    failures.push(format!("{}: {f}R ({x},{y})", names[0]));
                }
            }
        }
    }
    let detail = format!("{checked} pairs, {} without overlap {:?}", failures.len(), failures);
    Ok(within_time(start, 30.0, (failures.is_empty(), detail)))
}

/// 4. Sphere sums stay bounded in `k` at `0.99 R`.
fn sphere_sums() -> Outcome {
    let start = Instant::now();
    let walk = Walk::new(&srw(&["F2"]), 2000).map_err(err)?;
    let r = 0.99 * walk.radius().lower;
    let mut ks = Vec::new();
    let mut logs = Vec::new();
    for k in 1..=10u32 {
        let v = walk.sphere_green_sum(r, k).map_err(err)?;
        ks.push(k as f64);
        logs.push(v.mid().ln());
    }
    let (slope, _, resid) = linear_fit(&ks, &logs);
    let mean = ks.iter().sum::<f64>() / ks.len() as f64;
    let sxx: f64 = ks.iter().map(|k| (k - mean).powi(2)).sum();
    let noise = 2.0 * resid / sxx.sqrt();
    Ok(within_time(start, 60.0, (slope <= noise, format!("log-slope {slope:.4e}, noise band {noise:.2e}"))))
}

fn scan(json: &str) -> Result<martinlab::ancona::AnconaScanReport, String> {
    let cfg: AnconaScanConfig = serde_json::from_str(json).map_err(err)?;
    relative_ancona_scan(&cfg).map_err(err)
}

/// 5. Weak ratios on Z * Z do not trend upward from length 4 to 8.
fn weak_ancona() -> Outcome {
    let start = Instant::now();
    let report = scan(
        r#"{"group": ["Z", "Z"], "measure": {"kind": "adapted", "weights": [0.5, 0.5]},
            "r_fractions": [0.5, 0.9, 0.99], "kinds": ["weak"], "max_length": 8, "n_max": 800}"#,
    )?;
    let mut ok = report.rows.len() >= 100;
    let mut parts = Vec::new();
    for s in &report.summaries {
        let (c4, c8) = (report.ratio_constant(s.r, 4), report.ratio_constant(s.r, 8));
        ok &= c8.is_finite() && c8 <= 1.25 * c4;
        parts.push(format!("C(4) = {c4:.4}, C(8) = {c8:.4}"));
    }
    Ok(within_time(start, 300.0, (ok, format!("{} rows; {}", report.rows.len(), parts.join("; ")))))
}

/// 6. Strong defects decay with the shared length on F2.
///
/// Nearest-neighbour walks on a tree have `G(x, y) = G(e, e) F^{d(x, y)}`, so
/// their defect vanishes identically; the uniform measure on `ball(2)` does not.
fn strong_ancona() -> Outcome {
    let report = scan(
        r#"{"group": ["F2"], "measure": {"kind": "uniform-ball", "radius": 2}, "r_fractions": [0.5, 0.9, 0.99],
            "kinds": ["strong"], "shared_lengths": [2, 3, 4, 5, 6, 7, 8], "n_max": 400}"#,
    )?;
    let mut ok = !report.summaries.is_empty();
    let mut parts = Vec::new();
    for s in &report.summaries {
        let slope = report.defect_slope(s.r);
        ok &= slope.is_some_and(|v| v < 0.0);
        parts.push(format!("slope {}", slope.map_or("none".into(), |v| format!("{v:.4}"))));
    }
    let certified = report.rows.len() - report.uncertified_rows();
    Ok((ok, format!("{} rows ({certified} certified); {}", report.rows.len(), parts.join(", "))))
}

/// 7. `log G(x, y; complement of B_eta(z))` is concave in `eta`.
fn avoidance() -> Outcome {
    let m = srw(&["F2"]);
    let big_r = Walk::new(&m, 400).map_err(err)?.radius().lower;
    let (x, y) = (el(&m, "F0(aa)"), el(&m, "F0(AA)"));
    let centres = ["e", "F0(a)", "F0(bbbbb)", "F0(abbbbb)", "F0(Abbbbb)", "F0(BBBBB)"];
    let etas: Vec<u32> = (0..=4).collect();
    let mut worst = f64::NEG_INFINITY;
    let mut curves = 0;
    for c in centres {
        let z = el(&m, c);
        for f in [0.5, 0.9, 0.99] {
            let curve = avoidance_decay(&m, f * big_r, (&x, &y, &z), &etas, 9, 800, None).map_err(err)?;
            curves += 1;
            // Largest second difference any value in the brackets allows.
            for w in curve.values.windows(3) {
                let d2 = w[2].upper.ln() - 2.0 * w[1].lower.ln() + w[0].upper.ln();
                if w[2].upper > 0.0 {
                    worst = worst.max(d2);
                }
            }
        }
    }
    let z = srw(&["Z"]);
    let cut = avoidance_decay(&z, 0.9, (&el(&z, "Z0(-2)"), &el(&z, "Z0(2)"), &e()), &etas, 6, 400, None)
        .map_err(err)?;
    let zero = cut.values.iter().all(|v| v.lower == 0.0 && v.upper == 0.0);
    Ok((worst <= 0.0 && zero, format!("{curves} F2 curves, largest second difference {worst:.3e}; Z cut vertex exactly zero: {zero}")))
}

/// Kernels shared by the convexity and Martin kernel checks.
fn kernels_for_convexity() -> Result<Vec<(String, ParabolicKernel)>, String> {
    let mut out = Vec::new();
    for (names, eta) in [(&["Z", "Z"][..], 0), (&["Z", "Z"][..], 1), (&["Z^2", "Z"][..], 0), (&["Z^2", "Z"][..], 1), (&["Z^3", "Z"][..], 0)] {
        let m = adapted(names, &[0.5, 0.5]);
        let big_r = FreeProductSolver::new(&m).map_err(err)?.radius().lower;
        let k = first_return_kernel(&m, 0, eta, 0.9 * big_r, 8, eta + 8).map_err(err)?;
        out.push((format!("{}*{} eta={eta}", names[0], names[1]), k));
    }
    Ok(out)
}

/// 8. Hessian of `lambda` positive definite at random points; symmetric minimiser at 0.
fn convexity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut pd = 0;
    let mut total = 0;
    let mut worst_u: f64 = 0.0;
    let mut ranks = Vec::new();
    for (_, k) in kernels_for_convexity()? {
        let d = k.rank();
        ranks.push(d);
        let a = (0.5 * moment_range(&k)).min(1.0);
        for _ in 0..20 {
            let u: Vec<f64> = (0..d).map(|_| rng.gen_range(-a..a)).collect();
            let h = hessian(&k, &u).map_err(err)?;
            total += 1;
            pd += cholesky(&h).is_some() as usize;
        }
        if k.is_symmetric(1e-12) {
            let min = lambda_min(&k).map_err(err)?;
            worst_u = worst_u.max(min.u.iter().fold(0.0f64, |s, v| s.max(v.abs())));
        }
    }
    let ok = pd == total && worst_u <= 1e-8 && [1, 2, 3].iter().all(|d| ranks.contains(d));
    Ok((ok, format!("{pd}/{total} Hessians PD (ranks {ranks:?}); max |u*| {worst_u:.1e}")))
}

/// 9. Return probabilities of lazy walks on Z^d decay like `n^{-d/2}`.
fn llt() -> Outcome {
    let start = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for (d, n_max, tol) in [(1usize, 400usize, 0.05), (2, 300, 0.05), (3, 160, 0.05), (4, 90, 0.07)] {
        let name = format!("Z^{d}");
        let m = measure(&[name.as_str()], MeasureSpec::LazySrw { alpha: 0.5 });
        let k = first_return_kernel(&m, 0, 0, 1.0, 2, 2).map_err(err)?;
        let fit = local_limit_exponent(&k, n_max).map_err(err)?;
        let expected = -(d as f64) / 2.0;
        let rel = (fit.exponent - expected).abs() / expected.abs();
        ok &= rel <= tol;
        parts.push(format!("d={d}: {:.4} ({:.2}%)", fit.exponent, 100.0 * rel));
    }
    Ok(within_time(start, 120.0, (ok, parts.join(", "))))
}

/// 10. Factors of rank at most four are never degenerate-consistent.
fn rank_gate_grid() -> Outcome {
    let mut verdicts = Vec::new();
    let mut ok = !rank_gate(4, -2.0).admissible && rank_gate(5, -2.5).admissible;
    let grid: [(&[&str], &[f64]); 6] = [
        (&["Z", "Z"], &[0.5, 0.5]),
        (&["Z^2", "Z"], &[0.5, 0.5]),
        (&["Z^3", "Z^2"], &[0.6, 0.4]),
        (&["Z^4", "Z"], &[0.5, 0.5]),
        (&["Z^4", "Z"], &[0.9, 0.1]),
        (&["Z^4", "Z^4"], &[0.5, 0.5]),
    ];
    let mut rank4 = 0;
    for (names, w) in grid {
        let m = adapted(names, w);
        for f in 0..2 {
            let v = is_spectrally_degenerate(&m, f, 0, &martinlab::parabolic::DEFAULT_EPS_LADDER).map_err(err)?;
            rank4 += (v.rank == 4) as usize;
            ok &= v.verdict != Verdict::DegenerateConsistent;
            verdicts.push(format!("{}{:?}", v.rank, v.verdict).chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>());
        }
    }
    ok &= rank4 > 0;
    Ok((ok, format!("{} verdicts, {rank4} on rank-4 factors: {}", verdicts.len(), verdicts.join(" "))))
}

/// 11. Induced Green function on the Z factor of Z * Z matches `kappa G_mu(rho)`.
fn woess() -> Outcome {
    let m = adapted(&["Z", "Z"], &[0.5, 0.5]);
    let big_r = FreeProductSolver::new(&m).map_err(err)?.radius().lower;
    let mu = vec![(vec![1], 0.5), (vec![-1], 0.5)];
    let points: Vec<Vec<i64>> = (0..5).map(|x| vec![x]).collect();
    let mut ok = true;
    let mut parts = Vec::new();
    for f in [0.5, 0.8] {
        let k = restricted_kernel(&m, 0, 0, f * big_r, 8, 10).map_err(err)?;
        let fit = woess_fit(&k, &mu, &points, 80).map_err(err)?;
        ok &= fit.max_relative_error <= 0.01;
        parts.push(format!("{f}R: rho {:.6}, max error {:.2e}", fit.rho, fit.max_relative_error));
    }
    Ok((ok, parts.join("; ")))
}

/// 12. Green ratios along lattice rays against `C_k / C_0 e^{u.z}`.
///
/// The direct side is `G_r(z, y_n) / G_r(0, y_n)` for the group walk. On the
/// factor it equals the Green function of the first-return walk to the factor,
/// which the exact `eta = 0` kernel gives with tight brackets; each `eta`
/// kernel's formula is compared against it.
fn martin_formula() -> Outcome {
    let m = adapted(&["Z^2", "Z"], &[0.5, 0.5]);
    let big_r = FreeProductSolver::new(&m).map_err(err)?.radius().lower;
    let r = 0.8 * big_r;
    let rays: [[i64; 2]; 3] = [[1, 0], [1, 1], [2, 1]];
    let zs: [[i64; 2]; 3] = [[1, 0], [0, 1], [-1, 1]];
    let steps = [16i64, 32, 64, 128];
    let exact = first_return_kernel(&m, 0, 0, r, 8, 8).map_err(err)?;
    // direct[ray][step] = (ratio, relative spread) per z
    let mut direct = Vec::new();
    for ray in rays {
        let mut per_step = Vec::new();
        for &n in &steps {
            let y = vec![n * ray[0], n * ray[1]];
            let mut targets = vec![(y.clone(), 0)];
            targets.extend(zs.iter().map(|z| (vec![y[0] - z[0], y[1] - z[1]], 0)));
            let reach = y[0].abs() + y[1].abs();
            let radius = reach + 8 * (reach as f64).sqrt() as i64 + 20;
            let g = kernel_green(&exact, &targets, radius, 1_000_000).map_err(err)?;
            let ratios: Vec<(f64, f64)> = (0..zs.len())
                .map(|i| {
                    let mid = g[i + 1].mid() / g[0].mid();
                    (mid, (g[i + 1].upper / g[0].lower - g[i + 1].lower / g[0].upper) / mid)
                })
                .collect();
            per_step.push(ratios);
        }
        direct.push(per_step);
    }
    let mut worst_final: f64 = 0.0;
    let mut harmonic = true;
    let mut trend = Vec::new();
    for eta in [0u32, 1] {
        let k = first_return_kernel(&m, 0, eta, r, 8, eta + 8).map_err(err)?;
        for (ri, ray) in rays.iter().enumerate() {
            let norm = ((ray[0] * ray[0] + ray[1] * ray[1]) as f64).sqrt();
            let theta = [ray[0] as f64 / norm, ray[1] as f64 / norm];
            let p = level_set_point(&k, &theta).map_err(err)?;
            harmonic &= harmonicity_residual(&k, &p.eig).map_err(err)? <= defect_tolerance(&k, &p.eig).map_err(err)?;
            let formula: Vec<f64> = zs.iter().map(|z| parabolic_martin_kernel(&p.eig, z, 0)).collect::<Result<_, _>>().map_err(err)?;
            let errs: Vec<f64> = direct[ri]
                .iter()
                .map(|ratios| {
                    ratios.iter().zip(&formula).map(|(&(d, spread), f)| (d - f).abs() / f + spread).fold(0.0, f64::max)
                })
                .collect();
            worst_final = worst_final.max(*errs.last().unwrap());
            trend.push(format!("{ray:?}/eta{eta}: {}", errs.iter().map(|e| format!("{:.2}%", 100.0 * e)).collect::<Vec<_>>().join(">")));
        }
    }
    let ok = worst_final <= 0.02 && harmonic;
    let last = steps[steps.len() - 1];
    Ok((ok, format!("largest error at n = {last} is {:.3}%; harmonic within defect: {harmonic}; {}", 100.0 * worst_final, trend.join(", "))))
}

/// 13. Floyd metric axioms and the visibility bound on ball(6) of F2, a = 2.
fn floyd_axioms() -> Outcome {
    let g = GroupSpec::parse(&["F2"]).unwrap();
    let a = 2.0;
    let space = FloydSpace::new(&g, a, 6).map_err(err)?;
    let ball = g.ball(6).map_err(err)?;
    let pts = ball.elements();
    let idx: Vec<usize> = pts.iter().map(|p| space.locate(&e(), p)).collect::<Result<_, _>>().map_err(err)?;
    let dist: Vec<Vec<f64>> = idx
        .par_iter()
        .map(|&i| {
            let f = space.field(i);
            idx.iter().map(|&j| f.at(j)).collect()
        })
        .collect();
    let n = pts.len();
    let tol = 1e-12;
    let (identity, positivity, symmetry) = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut c = (0usize, 0usize, 0usize);
            for j in 0..n {
                let d = dist[i][j];
                if i == j {
                    c.0 += (d != 0.0) as usize;
                } else {
                    c.1 += (d <= 0.0) as usize;
                    c.2 += ((d - dist[j][i]).abs() > tol * d) as usize;
                }
            }
            c
        })
        .reduce(|| (0, 0, 0), |x, y| (x.0 + y.0, x.1 + y.1, x.2 + y.2));
    let triangle: usize = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut bad = 0;
            for k in 0..n {
                let dik = dist[i][k];
                for j in 0..n {
                    bad += (dist[i][j] > dik + dist[k][j] + tol * dist[i][j]) as usize;
                }
            }
            bad
        })
        .sum();
    // Visibility: on a tree the distance from e to [x, y] is the length of
    // the branch point, |x| + |y| - d(x, y) over two.
    let visibility: usize = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut bad = 0;
            for j in 0..n {
                let (x, y) = (&pts[i], &pts[j]);
                let d = (x.length() + y.length() - x.distance(y)) / 2;
                let ad = a.powi(-(d as i32));
                let bound = 4.0 * d as f64 * ad + 2.0 * ad / (1.0 - 1.0 / a);
                bad += (dist[i][j] > bound * (1.0 + tol)) as usize;
            }
            bad
        })
        .sum();
    let total = identity + positivity + symmetry + triangle + visibility;
    Ok((
        total == 0,
        format!(
            "{n} points, {} triples; violations: identity {identity}, positivity {positivity}, symmetry {symmetry}, triangle {triangle}, visibility {visibility}",
            n * n * n
        ),
    ))
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// 14. Every CLI experiment is byte-identical across reruns and thread counts.
fn determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_martinlab");
    let runs: [(&[&str], &str, &str); 13] = [
        (&["green"], "green", "green"),
        (&["green"], "green_f2", "green"),
        (&["restricted"], "restricted", "restricted"),
        (&["radius"], "radius", "radius"),
        (&["floyd"], "floyd", "floyd"),
        (&["ancona"], "ancona", "ancona"),
        (&["parabolic", "kernel"], "parabolic", "parabolic-kernel"),
        (&["parabolic", "lambda"], "parabolic", "parabolic-lambda"),
        (&["degenerate"], "degenerate", "degenerate"),
        (&["llt"], "llt", "llt"),
        (&["derivative"], "derivative", "derivative"),
        (&["spheres"], "spheres", "spheres"),
        (&["parabolic", "llt"], "llt", "llt"),
    ];
    let tmp = std::env::temp_dir().join(format!("martinlab-acceptance-{}", std::process::id()));
    let mut mismatched = Vec::new();
    for (i, (sub, config, stem)) in runs.iter().enumerate() {
        let mut outputs = Vec::new();
        for threads in ["1", "4", "1"] {
            let out = tmp.join(format!("{i}-{threads}-{}", outputs.len()));
            let status = Command::new(bin)
                .args(*sub)
                .arg("--config")
                .arg(configs_dir().join(format!("{config}.toml")))
                .arg("--out")
                .arg(&out)
                .arg("--svg")
                .env("MARTINLAB_THREADS", threads)
                .output()
                .map_err(err)?;
            if !status.status.success() {
                return Err(format!("{config}: {}", String::from_utf8_lossy(&status.stderr)));
            }
            let files: Vec<Vec<u8>> = ["csv", "json", "svg"]
                .iter()
                .map(|ext| std::fs::read(out.join(format!("{stem}.{ext}"))))
                .collect::<Result<_, _>>()
                .map_err(err)?;
            outputs.push(files);
        }
        if outputs.windows(2).any(|w| w[0] != w[1]) {
            mismatched.push(format!("{config}/{stem}"));
        }
    }
    let _ = std::fs::remove_dir_all(&tmp);
    Ok((mismatched.is_empty(), format!("{} runs x 3, mismatched: {mismatched:?}", runs.len())))
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 14] = [
    (1, "Z Green closed form", z_green),
    (2, "F2 spectral radius", f2_radius),
    (3, "Green-derivative identity", derivative_identity),
    (4, "sphere-sum boundedness", sphere_sums),
    (5, "weak Ancona stability", weak_ancona),
    (6, "strong Ancona decay", strong_ancona),
    (7, "avoidance super-exponentiality", avoidance),
    (8, "lambda convexity and symmetry", convexity),
    (9, "LLT exponents", llt),
    (10, "rank gate", rank_gate_grid),
    (11, "Woess consistency", woess),
    (12, "parabolic Martin kernel", martin_formula),
    (13, "Floyd axioms and visibility", floyd_axioms),
    (14, "CLI determinism", determinism),
];

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (id, name, f) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let (passed, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
        println!(
            "criterion {id:>2} {} {name}: {detail} [{:.1} s]",
            if passed { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        if !passed {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
