use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const MINIMAL: &str = r#"
group = { factors = ["Z"] }
measure = { kind = "srw" }

[green]
r = [0.5]
"#;

fn martinlab(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_martinlab"));
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("MARTINLAB_THREADS", t),
        None => cmd.env_remove("MARTINLAB_THREADS"),
    };
    cmd.output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(sub: &[&str], config: &Path, out: &Path, threads: Option<&str>) -> Output {
    let mut args: Vec<&str> = sub.to_vec();
    args.extend(["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    martinlab(&args, threads)
}

#[test]
fn minimal_green_config_gives_one_row_containing_the_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "min.toml", MINIMAL);
    let out = dir.path().join("out");
    let o = run(&["green"], &cfg, &out, None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("green.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("# config_sha256="));
    assert_eq!(lines[1], "quantity,r,x,y,lower,upper,n_max,method,wall_time_ms");
    assert_eq!(lines.len(), 3);
    let cells: Vec<&str> = lines[2].split(',').collect();
    let (lo, hi): (f64, f64) = (cells[4].parse().unwrap(), cells[5].parse().unwrap());
    let exact = 1.0 / (1.0f64 - 0.25).sqrt();
    assert!(lo <= exact && exact <= hi, "[{lo}, {hi}]");
    assert!((exact - 1.1547).abs() < 1e-4);
}

#[test]
fn missing_measure_exits_with_config_code_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "group = { factors = [\"Z\"] }\n[green]\nr = [0.5]\n");
    let out = dir.path().join("out");
    let o = run(&["green"], &cfg, &out, None);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn unknown_key_and_wrong_experiment_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let typo = write_config(dir.path(), "typo.toml", &format!("{MINIMAL}rr = 1\n"));
    assert_eq!(run(&["green"], &typo, &out, None).status.code(), Some(2));
    let declared = write_config(dir.path(), "decl.toml", &format!("experiment = \"floyd\"\n{MINIMAL}"));
    assert_eq!(run(&["green"], &declared, &out, None).status.code(), Some(2));
    let cfg = write_config(dir.path(), "min.toml", MINIMAL);
    assert_eq!(run(&["floyd"], &cfg, &out, None).status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn bad_thread_cap_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "min.toml", MINIMAL);
    assert_eq!(run(&["green"], &cfg, &dir.path().join("o"), Some("zero")).status.code(), Some(2));
}

#[test]
fn io_failures_exit_with_five() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.toml");
    assert_eq!(run(&["green"], &missing, &dir.path().join("o"), None).status.code(), Some(5));
    let cfg = write_config(dir.path(), "min.toml", MINIMAL);
    let blocker = write_config(dir.path(), "file", "");
    assert_eq!(run(&["green"], &cfg, &blocker, None).status.code(), Some(5));
}

#[test]
fn ball_over_memory_budget_is_a_resource_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = "group = { factors = [\"F2\"] }\nmeasure = { kind = \"srw\" }\n\
                [budget]\nmemory_mb = 1\n[floyd]\nradius = 9\n";
    let cfg = write_config(dir.path(), "f.toml", text);
    let out = dir.path().join("out");
    assert_eq!(run(&["floyd"], &cfg, &out, None).status.code(), Some(3));
    assert!(!out.exists());
}

#[test]
fn numerical_failure_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    // The excluded ball does not fit in the window.
    let text = "group = { factors = [\"F2\"] }\nmeasure = { kind = \"srw\" }\n\
                [restricted]\nr = [0.5]\nx = \"F0(a)\"\ny = \"F0(A)\"\nwindow = 2\neta = [3]\n";
    let cfg = write_config(dir.path(), "r.toml", text);
    assert_eq!(run(&["restricted"], &cfg, &dir.path().join("o"), None).status.code(), Some(4));
}

#[test]
fn seed_override_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "min.toml", MINIMAL);
    let out = dir.path().join("out");
    let mut args = vec!["green", "--seed", "99"];
    args.extend(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(martinlab(&args, None).status.success());
    let report = std::fs::read_to_string(out.join("green.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(v["seed"], 99);
    assert_eq!(v["wall_time_ms"], 0);
}

#[test]
fn empty_ancona_grid_gives_header_only_and_empty_axes() {
    let dir = tempfile::tempdir().unwrap();
    let text = "group = { factors = [\"Z\", \"Z\"] }\nmeasure = { kind = \"srw\" }\n[ancona]\nr_fractions = []\n";
    let cfg = write_config(dir.path(), "a.toml", text);
    let csv = dir.path().join("scan.csv");
    let o = martinlab(
        &["ancona", "scan", "--config", cfg.to_str().unwrap(), "--out", csv.to_str().unwrap(), "--svg"],
        None,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 2);
    let svg = std::fs::read_to_string(csv.with_extension("svg")).unwrap();
    assert!(svg.contains("config_sha256=") && svg.contains("<path") && !svg.contains("<circle"));
}

#[test]
fn llt_plot_is_log_log_with_slope_annotation() {
    let dir = tempfile::tempdir().unwrap();
    let text = "group = { factors = [\"Z\"] }\nmeasure = { kind = \"lazy-srw\", alpha = 0.5 }\n\
                [llt]\nn_max = 100\nwindow = 60\n";
    let cfg = write_config(dir.path(), "l.toml", text);
    let out = dir.path().join("out");
    let mut args = vec!["llt", "--svg"];
    args.extend(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(martinlab(&args, None).status.success());
    let svg = std::fs::read_to_string(out.join("llt.svg")).unwrap();
    assert!(svg.contains("slope -0.4") || svg.contains("slope -0.5"));
    assert!(svg.contains("(expected -0.5)"));
    assert!(svg.contains("<polyline") && svg.contains("<circle"));
}

#[test]
fn restricted_plot_is_a_log_decay_curve() {
    let dir = tempfile::tempdir().unwrap();
    let text = "group = { factors = [\"F2\"] }\nmeasure = { kind = \"srw\" }\n\
                [restricted]\nr = [0.8]\nx = \"F0(aa)\"\ny = \"F0(AA)\"\nz = \"F0(bbbb)\"\nwindow = 6\neta = [0, 1, 2]\n";
    let cfg = write_config(dir.path(), "r.toml", text);
    let out = dir.path().join("out");
    let mut args = vec!["restricted", "--svg"];
    args.extend(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(martinlab(&args, None).status.success());
    let svg = std::fs::read_to_string(out.join("restricted.svg")).unwrap();
    assert!(svg.contains("<polyline") && svg.contains(">1e-"));
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let text = "group = { factors = [\"F2\"] }\nmeasure = { kind = \"srw\" }\n\
                [green]\nr_fractions = [0.5, 0.9]\npoints = [[\"e\", \"e\"], [\"e\", \"F0(ab)\"]]\n";
    let cfg = write_config(dir.path(), "g.toml", text);
    let mut seen = Vec::new();
    for (i, threads) in [Some("1"), Some("4"), None].into_iter().enumerate() {
        let out = dir.path().join(format!("o{i}"));
        assert!(run(&["green", "--svg"], &cfg, &out, threads).status.success());
        let bytes: Vec<Vec<u8>> =
            ["green.csv", "green.json", "green.svg"].iter().map(|f| std::fs::read(out.join(f)).unwrap()).collect();
        seen.push(bytes);
    }
    assert_eq!(seen[0], seen[1]);
    assert_eq!(seen[0], seen[2]);
}
