//! TOML experiment configuration.

use std::path::Path;

use martinlab::{make_measure, GroupSpec, Measure, MeasureSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Green,
    Restricted,
    SpectralRadius,
    Floyd,
    Ancona,
    Parabolic,
    Degenerate,
    Llt,
    Derivative,
    SphereSum,
}

impl ExperimentKind {
    /// Stem used for output files.
    pub fn stem(&self) -> &'static str {
        match self {
            ExperimentKind::Green => "green",
            ExperimentKind::Restricted => "restricted",
            ExperimentKind::SpectralRadius => "radius",
            ExperimentKind::Floyd => "floyd",
            ExperimentKind::Ancona => "ancona",
            ExperimentKind::Parabolic => "parabolic",
            ExperimentKind::Degenerate => "degenerate",
            ExperimentKind::Llt => "llt",
            ExperimentKind::Derivative => "derivative",
            ExperimentKind::SphereSum => "spheres",
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GroupBlock {
    /// Factor names such as `Z`, `Z^2`, `F2`.
    pub factors: Vec<String>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Budget {
    /// Series length for Green tables.
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    #[serde(default = "default_memory")]
    pub memory_mb: u64,
    #[serde(default = "default_wall")]
    pub wall_time_s: u64,
}

impl Default for Budget {
    fn default() -> Self {
        Budget { n_max: default_n_max(), memory_mb: default_memory(), wall_time_s: default_wall() }
    }
}

fn default_n_max() -> usize {
    400
}
fn default_memory() -> u64 {
    4096
}
fn default_wall() -> u64 {
    3600
}

/// Absolute `r` values and fractions of the lower radius estimate; at least
/// one of the two lists must be nonempty.
#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RGrid {
    #[serde(default)]
    pub r: Vec<f64>,
    #[serde(default)]
    pub r_fractions: Vec<f64>,
}

fn identity_pair() -> Vec<[String; 2]> {
    vec![["e".into(), "e".into()]]
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GreenBlock {
    #[serde(flatten)]
    pub grid: RGrid,
    #[serde(default = "identity_pair")]
    pub points: Vec<[String; 2]>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RestrictedBlock {
    #[serde(flatten)]
    pub grid: RGrid,
    pub x: String,
    pub y: String,
    /// Centre `z` of the excluded balls.
    #[serde(default = "default_e")]
    pub z: String,
    /// Radius of the window `z ball(window)` holding the region.
    pub window: u32,
    /// Excluded radii `eta`.
    #[serde(default = "default_etas")]
    pub eta: Vec<u32>,
}

fn default_e() -> String {
    "e".into()
}
fn default_etas() -> Vec<u32> {
    vec![0]
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RadiusBlock {
    pub n_max: Vec<usize>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FloydBlock {
    #[serde(default = "default_a")]
    pub a: f64,
    /// Work-ball radius.
    #[serde(default = "default_floyd_radius")]
    pub radius: u32,
    #[serde(default = "default_e")]
    pub basepoint: String,
    /// All pairs of this ball are tabulated and checked.
    #[serde(default = "default_pair_radius")]
    pub pair_radius: u32,
    /// Thresholds for transition sets along the geodesic `[e, path_to]`.
    #[serde(default)]
    pub delta: Vec<f64>,
    #[serde(default)]
    pub path_to: Option<String>,
}

fn default_a() -> f64 {
    2.0
}
fn default_floyd_radius() -> u32 {
    6
}
fn default_pair_radius() -> u32 {
    2
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct UGrid {
    pub min: f64,
    pub max: f64,
    pub steps: usize,
}

impl Default for UGrid {
    fn default() -> Self {
        UGrid { min: -1.0, max: 1.0, steps: 21 }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ParabolicBlock {
    #[serde(default)]
    pub factor: usize,
    #[serde(default = "default_etas")]
    pub eta: Vec<u32>,
    #[serde(flatten)]
    pub grid: RGrid,
    /// Lattice window `W` (sup norm).
    #[serde(default = "default_kernel_window")]
    pub window: u32,
    /// Excursion truncation `T` beyond `eta` for the restricted construction.
    #[serde(default = "default_excursion")]
    pub excursion: u32,
    #[serde(default)]
    pub u_grid: UGrid,
    /// Directions for level-set points.
    #[serde(default)]
    pub theta: Vec<Vec<f64>>,
    /// Lattice points `z` at which the Martin formula is tabulated.
    #[serde(default)]
    pub martin_points: Vec<Vec<i64>>,
}

fn default_kernel_window() -> u32 {
    8
}
fn default_excursion() -> u32 {
    8
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DegenerateBlock {
    #[serde(default)]
    pub factors: Vec<usize>,
    #[serde(default)]
    pub eta: u32,
    #[serde(default = "default_ladder")]
    pub epsilons: Vec<f64>,
}

fn default_ladder() -> Vec<f64> {
    martinlab::parabolic::DEFAULT_EPS_LADDER.to_vec()
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct LltBlock {
    #[serde(default)]
    pub factor: usize,
    #[serde(default)]
    pub eta: u32,
    /// `r` as a fraction of the lower radius estimate.
    #[serde(default = "default_one")]
    pub r_fraction: f64,
    #[serde(default = "default_llt_n")]
    pub n_max: usize,
    #[serde(default = "default_kernel_window")]
    pub window: u32,
    #[serde(default = "default_excursion")]
    pub excursion: u32,
}

fn default_one() -> f64 {
    1.0
}
fn default_llt_n() -> usize {
    400
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DerivativeBlock {
    #[serde(flatten)]
    pub grid: RGrid,
    #[serde(default = "identity_pair")]
    pub points: Vec<[String; 2]>,
    #[serde(default = "default_ball")]
    pub ball_radius: u32,
}

fn default_ball() -> u32 {
    40
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SpheresBlock {
    #[serde(flatten)]
    pub grid: RGrid,
    #[serde(default = "default_k_max")]
    pub k_max: u32,
}

fn default_k_max() -> u32 {
    10
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Optional; must agree with the subcommand when present.
    #[serde(default)]
    pub experiment: Option<ExperimentKind>,
    pub group: GroupBlock,
    pub measure: MeasureSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub budget: Budget,
    pub green: Option<GreenBlock>,
    pub restricted: Option<RestrictedBlock>,
    pub radius: Option<RadiusBlock>,
    pub floyd: Option<FloydBlock>,
    /// Scan options as accepted by the core scan; `group`, `measure` and
    /// `seed` come from the top level.
    pub ancona: Option<toml::Table>,
    pub parabolic: Option<ParabolicBlock>,
    pub degenerate: Option<DegenerateBlock>,
    pub llt: Option<LltBlock>,
    pub derivative: Option<DerivativeBlock>,
    pub spheres: Option<SpheresBlock>,
}

/// A parsed configuration together with the hash of its source text.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub hash: String,
    pub group: GroupSpec,
    pub measure: Measure,
}

pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl LoadedConfig {
    pub fn from_str(text: &str) -> CliResult<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        config.validate()?;
        let group = GroupSpec::parse(&config.group.factors)?;
        let measure = make_measure(&group, &config.measure)?;
        Ok(LoadedConfig { hash: config_hash(text), config, group, measure })
    }

    pub fn from_path(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_str(&text)
    }
}

fn check_grid(name: &str, grid: &RGrid) -> CliResult<()> {
    if grid.r.is_empty() && grid.r_fractions.is_empty() {
        return Err(CliError::Config(format!("[{name}] needs a nonempty `r` or `r_fractions` list")));
    }
    if grid.r.iter().chain(&grid.r_fractions).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(CliError::Config(format!("[{name}] r values must be positive and finite")));
    }
    Ok(())
}

fn nonempty<T>(name: &str, field: &str, v: &[T]) -> CliResult<()> {
    if v.is_empty() {
        return Err(CliError::Config(format!("[{name}] `{field}` must be nonempty")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> CliResult<()> {
        if self.group.factors.is_empty() {
            return Err(CliError::Config("[group] needs at least one factor".into()));
        }
        let b = &self.budget;
        if b.n_max == 0 || b.memory_mb == 0 || b.wall_time_s == 0 {
            return Err(CliError::Config("[budget] values must be positive".into()));
        }
        if let Some(g) = &self.green {
            check_grid("green", &g.grid)?;
            nonempty("green", "points", &g.points)?;
        }
        if let Some(g) = &self.restricted {
            check_grid("restricted", &g.grid)?;
            nonempty("restricted", "eta", &g.eta)?;
        }
        if let Some(g) = &self.radius {
            nonempty("radius", "n_max", &g.n_max)?;
        }
        if let Some(g) = &self.floyd {
            if !(g.a > 1.0) {
                return Err(CliError::Config("[floyd] a must exceed 1".into()));
            }
        }
        if let Some(g) = &self.parabolic {
            check_grid("parabolic", &g.grid)?;
            nonempty("parabolic", "eta", &g.eta)?;
            if g.u_grid.steps < 2 || !(g.u_grid.max > g.u_grid.min) {
                return Err(CliError::Config("[parabolic.u_grid] needs steps >= 2 and max > min".into()));
            }
        }
        if let Some(g) = &self.degenerate {
            nonempty("degenerate", "epsilons", &g.epsilons)?;
        }
        if let Some(g) = &self.derivative {
            check_grid("derivative", &g.grid)?;
            nonempty("derivative", "points", &g.points)?;
        }
        if let Some(g) = &self.spheres {
            check_grid("spheres", &g.grid)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = "group = { factors = [\"Z\"] }\nmeasure = { kind = \"srw\" }\n[green]\nr = [0.5]\n";

    #[test]
    fn minimal_config_loads_with_defaults() {
        let c = LoadedConfig::from_str(MIN).unwrap();
        assert_eq!(c.config.budget.n_max, 400);
        assert_eq!(c.config.green.unwrap().points, vec![["e".to_string(), "e".to_string()]]);
        assert_eq!(c.hash.len(), 64);
    }

    #[test]
    fn hash_tracks_the_source_text() {
        assert_eq!(config_hash(MIN), config_hash(MIN));
        assert_ne!(config_hash(MIN), config_hash(&format!("{MIN}\n")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MIN}typo = 1\n");
        assert!(matches!(LoadedConfig::from_str(&text), Err(CliError::Config(_))));
    }

    #[test]
    fn empty_grids_and_budgets_are_rejected() {
        let empty = MIN.replace("r = [0.5]", "r = []");
        assert!(matches!(LoadedConfig::from_str(&empty), Err(CliError::Config(_))));
        let budget = format!("{MIN}[budget]\nwall_time_s = 0\n");
        assert!(matches!(LoadedConfig::from_str(&budget), Err(CliError::Config(_))));
    }

    #[test]
    fn invalid_measure_maps_to_config_code() {
        let text = MIN.replace("kind = \"srw\"", "kind = \"lazy-srw\", alpha = 1.5");
        assert_eq!(LoadedConfig::from_str(&text).unwrap_err().exit_code(), 2);
    }
}
