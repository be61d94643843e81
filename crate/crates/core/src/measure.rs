//! Finitely supported symmetric step distributions and their convolution powers.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group::{GroupElement, GroupSpec};
use crate::scalar::Scalar;
use crate::window::{Window, OUTSIDE};

/// Recipe for a step distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MeasureSpec {
    /// Uniform on the standard generators.
    Srw,
    /// `alpha * delta_e + (1 - alpha) * SRW`.
    LazySrw { alpha: f64 },
    /// `sum_i w_i * SRW_i` with `SRW_i` the simple walk of factor `i`.
    Adapted { weights: Vec<f64> },
    /// Uniform on the closed ball of the given radius (identity included).
    UniformBall { radius: u32 },
}

/// Finitely supported symmetric admissible probability on a group.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteMeasure<T: Scalar> {
    group: GroupSpec,
    support: Vec<(GroupElement, T)>,
}

impl<T: Scalar> FiniteMeasure<T> {
    /// Validates and builds a measure. With `symmetrize`, the masses are
    /// replaced by `(m(g) + m(g^-1)) / 2` before validation.
    pub fn new(group: GroupSpec, masses: Vec<(GroupElement, T)>, symmetrize: bool) -> Result<Self> {
        let mut map: BTreeMap<GroupElement, T> = BTreeMap::new();
        for (g, m) in masses {
            group.validate(&g)?;
            if m < T::zero() {
                return Err(Error::Validation(format!("negative mass at {g}")));
            }
            let entry = map.entry(g).or_insert_with(T::zero);
            *entry = entry.clone() + m;
        }
        if symmetrize {
            let two = T::one() + T::one();
            let keys: Vec<GroupElement> = map
                .keys()
                .flat_map(|g| [g.clone(), g.inverse()])
                .collect::<HashSet<_>>()
                .into_iter()
                .collect();
            let mut sym = BTreeMap::new();
            for g in keys {
                let inv = g.inverse();
                let a = map.get(&g).cloned().unwrap_or_else(T::zero);
                let b = map.get(&inv).cloned().unwrap_or_else(T::zero);
                sym.insert(g, (a + b) / two.clone());
            }
            map = sym;
        }
        map.retain(|_, m| *m != T::zero());

        let total = map.values().fold(T::zero(), |acc, m| acc + m.clone());
        let off = if T::is_exact() { total != T::one() } else { (total.as_f64() - 1.0).abs() > T::tolerance() };
        if off {
            return Err(Error::Validation(format!("masses sum to {} instead of 1", total.as_f64())));
        }
        for (g, m) in &map {
            let inv = map.get(&g.inverse()).cloned().unwrap_or_else(T::zero);
            let asym = (m.as_f64() - inv.as_f64()).abs();
            if (T::is_exact() && *m != inv) || asym > T::tolerance() {
                return Err(Error::Validation(format!("measure is not symmetric at {g}")));
            }
        }
        let measure = FiniteMeasure { group, support: map.into_iter().collect() };
        measure.check_admissible()?;
        Ok(measure)
    }

    fn check_admissible(&self) -> Result<()> {
        let jump = self.max_jump().max(1);
        let limit = 2 * jump + 1;
        let steps: Vec<&GroupElement> =
            self.support.iter().filter(|(g, _)| !g.is_identity()).map(|(g, _)| g).collect();
        let mut seen: HashSet<GroupElement> = HashSet::new();
        let mut frontier = vec![GroupElement::identity()];
        seen.insert(GroupElement::identity());
        while let Some(g) = frontier.pop() {
            for s in &steps {
                let h = g.mul(s);
                if h.length() <= limit && seen.insert(h.clone()) {
                    frontier.push(h);
                }
            }
        }
        match self.group.generators().into_iter().find(|s| !seen.contains(s)) {
            Some(s) => Err(Error::Admissibility(format!(
                "support does not generate {}: generator {s} is unreachable",
                self.group
            ))),
            None => Ok(()),
        }
    }

    pub fn group(&self) -> &GroupSpec {
        &self.group
    }

    /// Support in element order, masses strictly positive.
    pub fn support(&self) -> &[(GroupElement, T)] {
        &self.support
    }

    pub fn mass(&self, g: &GroupElement) -> T {
        self.support
            .binary_search_by(|(h, _)| h.cmp(g))
            .map(|i| self.support[i].1.clone())
            .unwrap_or_else(|_| T::zero())
    }

    /// Largest word length of a support element.
    pub fn max_jump(&self) -> u32 {
        self.support.iter().map(|(g, _)| g.length()).max().unwrap_or(0)
    }

    pub fn is_lazy(&self) -> bool {
        self.mass(&GroupElement::identity()) > T::zero()
    }

    /// Smallest mass carried by a standard generator (zero if some generator
    /// is not in the support).
    pub fn min_generator_mass(&self) -> f64 {
        self.group
            .generators()
            .iter()
            .map(|s| self.mass(s).as_f64())
            .fold(f64::INFINITY, f64::min)
    }

    /// Whether the mass of `g` depends only on `|g|` and the Cayley graph is
    /// a regular tree. Such measures have radial convolution powers.
    pub fn is_radial(&self) -> bool {
        if self.group.tree_degree().is_none() {
            return false;
        }
        let Ok(ball) = self.group.ball(self.max_jump()) else {
            return false;
        };
        let mut per_length: BTreeMap<u32, f64> = BTreeMap::new();
        for g in ball.elements() {
            let m = self.mass(g).as_f64();
            match per_length.get(&g.length()) {
                Some(&v) if (v - m).abs() > 1e-15 => return false,
                Some(_) => {}
                None => {
                    per_length.insert(g.length(), m);
                }
            }
        }
        true
    }

    pub fn to_f64(&self) -> FiniteMeasure<f64> {
        FiniteMeasure {
            group: self.group.clone(),
            support: self.support.iter().map(|(g, m)| (g.clone(), m.as_f64())).collect(),
        }
    }

    /// Convolution powers `mu^{*n}`, `n = 0..=n_max`, on the ball of radius
    /// `window_radius`. Unless `allow_truncation`, the window must hold every
    /// reachable element (`window_radius >= n_max * max_jump`).
    pub fn convolution_powers(
        &self,
        n_max: usize,
        window_radius: u32,
        allow_truncation: bool,
    ) -> Result<ConvolutionTable<T>> {
        let needed = n_max as u64 * self.max_jump() as u64;
        if (window_radius as u64) < needed && !allow_truncation {
            return Err(Error::Validation(format!(
                "window radius {window_radius} is below n_max * max_jump = {needed}; allow truncation to proceed"
            )));
        }
        let steps: Vec<GroupElement> = self.support.iter().map(|(g, _)| g.clone()).collect();
        let window = Window::ball(&self.group, window_radius, &steps)?;
        Ok(ConvolutionTable::build(&window, self, n_max))
    }
}

impl FiniteMeasure<f64> {
    /// Draws `length` i.i.d. increments and returns `X_0 = e, X_1, ..., X_length`.
    pub fn sample_path(&self, length: usize, seed: u64) -> Vec<GroupElement> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cumulative = Vec::with_capacity(self.support.len());
        let mut acc = 0.0;
        for (_, m) in &self.support {
            acc += m;
            cumulative.push(acc);
        }
        let mut path = Vec::with_capacity(length + 1);
        let mut cur = GroupElement::identity();
        path.push(cur.clone());
        for _ in 0..length {
            let u: f64 = rng.gen::<f64>() * acc;
            let i = cumulative.partition_point(|&c| c <= u).min(self.support.len() - 1);
            cur = cur.mul(&self.support[i].0);
            path.push(cur.clone());
        }
        path
    }
}

/// Builds the measure described by `spec`.
pub fn make_measure<T: Scalar>(group: &GroupSpec, spec: &MeasureSpec) -> Result<FiniteMeasure<T>> {
    let masses: Vec<(GroupElement, T)> = match spec {
        MeasureSpec::Srw => {
            let gens = group.generators();
            let m = T::from_ratio(1, gens.len() as i64);
            gens.into_iter().map(|g| (g, m.clone())).collect()
        }
        MeasureSpec::LazySrw { alpha } => {
            if !(0.0..1.0).contains(alpha) {
                return Err(Error::Validation(format!("laziness {alpha} must lie in [0, 1)")));
            }
            let gens = group.generators();
            let a = T::of_f64(*alpha);
            let m = (T::one() - a.clone()) / T::of_f64(gens.len() as f64);
            let mut out: Vec<_> = gens.into_iter().map(|g| (g, m.clone())).collect();
            out.push((GroupElement::identity(), a));
            out
        }
        MeasureSpec::Adapted { weights } => {
            if weights.len() != group.factors().len() {
                return Err(Error::Validation(format!(
                    "{} factor weights given for {} factors",
                    weights.len(),
                    group.factors().len()
                )));
            }
            if weights.iter().any(|w| *w < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(Error::Validation("factor weights must be nonnegative and sum to 1".into()));
            }
            let gens = group.generators();
            let mut out = Vec::new();
            for (i, f) in group.factors().iter().enumerate() {
                let w = T::of_f64(weights[i]) / T::of_f64(f.degree() as f64);
                for g in gens.iter().filter(|g| g.head().map(|s| s.factor) == Some(i)) {
                    out.push((g.clone(), w.clone()));
                }
            }
            out
        }
        MeasureSpec::UniformBall { radius } => {
            if *radius == 0 {
                return Err(Error::Admissibility("uniform measure on the trivial ball".into()));
            }
            let ball = group.ball(*radius)?;
            let m = T::from_ratio(1, ball.len() as i64);
            ball.into_elements().into_iter().map(|g| (g, m.clone())).collect()
        }
    };
    FiniteMeasure::new(group.clone(), masses, false)
}

/// Rows `mu^{*n}` for `n = 0..=n_max` restricted to a window.
#[derive(Clone, Debug)]
pub struct ConvolutionTable<T: Scalar> {
    window: Window,
    rows: Vec<Vec<T>>,
}

impl<T: Scalar> ConvolutionTable<T> {
    /// Pulls mass along `g -> g * s`: by symmetry of the measure,
    /// `mu^{*(n+1)}(g) = sum_s mu(s) mu^{*n}(g s)`. Each entry is summed in a
    /// fixed order, so results do not depend on the worker count.
    pub(crate) fn build(window: &Window, measure: &FiniteMeasure<T>, n_max: usize) -> Self {
        let weights: Vec<T> = window.steps().iter().map(|s| measure.mass(s)).collect();
        let origin = window.index_of(&GroupElement::identity()).expect("window contains e");
        let mut row0 = vec![T::zero(); window.len()];
        row0[origin] = T::one();
        let mut rows = vec![row0];
        for _ in 0..n_max {
            let prev = rows.last().expect("row 0 present");
            let next: Vec<T> = (0..window.len())
                .into_par_iter()
                .map(|i| {
                    let mut acc = T::zero();
                    for (w, &t) in weights.iter().zip(window.neighbors(i)) {
                        if t != OUTSIDE {
                            acc = acc + w.clone() * prev[t as usize].clone();
                        }
                    }
                    acc
                })
                .collect();
            rows.push(next);
        }
        ConvolutionTable { window: window.clone(), rows }
    }

    pub fn n_max(&self) -> usize {
        self.rows.len() - 1
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn row(&self, n: usize) -> &[T] {
        &self.rows[n]
    }

    /// `mu^{*n}(g)`; zero outside the window.
    pub fn get(&self, n: usize, g: &GroupElement) -> T {
        self.window
            .index_of(g)
            .map(|i| self.rows[n][i].clone())
            .unwrap_or_else(T::zero)
    }

    /// Total mass of row `n` inside the window.
    pub fn row_sum(&self, n: usize) -> T {
        self.rows[n].iter().fold(T::zero(), |acc, m| acc + m.clone())
    }

    /// Mass of row `n` lost to the window boundary (`1 - row_sum`).
    pub fn defect(&self, n: usize) -> f64 {
        (1.0 - self.row_sum(n).as_f64()).max(0.0)
    }
}

/// CSV export of a trajectory: `step,normal_form,length`.
pub fn trajectory_csv(path: &[GroupElement]) -> String {
    let mut out = String::from("step,normal_form,length\n");
    for (i, g) in path.iter().enumerate() {
        out.push_str(&format!("{i},{g},{}\n", g.length()));
    }
    out
}

#[cfg(test)]
mod tests {
    use num_rational::BigRational;

    use super::*;
    use crate::group::FactorElement;

    fn spec(names: &[&str]) -> GroupSpec {
        GroupSpec::parse(names).unwrap()
    }

    fn z(factor: usize, v: &[i64]) -> GroupElement {
        GroupElement::from_factor(factor, FactorElement::Abelian(v.to_vec()))
    }

    #[test]
    fn srw_on_z_and_f2() {
        let m = make_measure::<f64>(&spec(&["Z"]), &MeasureSpec::Srw).unwrap();
        assert_eq!(m.mass(&z(0, &[1])), 0.5);
        assert_eq!(m.mass(&z(0, &[-1])), 0.5);
        let f2 = spec(&["F_2"]);
        let m = make_measure::<f64>(&f2, &MeasureSpec::Srw).unwrap();
        for g in f2.generators() {
            assert_eq!(m.mass(&g), 0.25);
        }
    }

    #[test]
    fn adapted_mixture_masses() {
        let g = spec(&["Z^2", "Z"]);
        let m = make_measure::<BigRational>(&g, &MeasureSpec::Adapted { weights: vec![0.5, 0.5] }).unwrap();
        let masses: Vec<BigRational> = m.support().iter().map(|(_, w)| w.clone()).collect();
        let eighth = BigRational::from_ratio(1, 8);
        let quarter = BigRational::from_ratio(1, 4);
        assert_eq!(masses.iter().filter(|w| **w == eighth).count(), 4);
        assert_eq!(masses.iter().filter(|w| **w == quarter).count(), 2);
        assert_eq!(masses.len(), 6);
    }

    #[test]
    fn non_generating_support_is_rejected() {
        let g = spec(&["Z^2", "Z"]);
        let err = make_measure::<f64>(&g, &MeasureSpec::Adapted { weights: vec![1.0, 0.0] }).unwrap_err();
        assert!(matches!(err, Error::Admissibility(_)));
        let err = make_measure::<f64>(&g, &MeasureSpec::Adapted { weights: vec![0.7, 0.7] }).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn asymmetric_masses_rejected_unless_symmetrized() {
        let g = spec(&["Z"]);
        let masses = vec![(z(0, &[1]), 0.7), (z(0, &[-1]), 0.3)];
        assert!(matches!(
            FiniteMeasure::new(g.clone(), masses.clone(), false),
            Err(Error::Validation(_))
        ));
        let m = FiniteMeasure::new(g, masses, true).unwrap();
        assert_eq!(m.mass(&z(0, &[1])), 0.5);
    }

    #[test]
    fn return_probabilities() {
        let m = make_measure::<BigRational>(&spec(&["Z"]), &MeasureSpec::Srw).unwrap();
        let t = m.convolution_powers(4, 4, false).unwrap();
        assert_eq!(t.get(4, &GroupElement::identity()), BigRational::from_ratio(6, 16));

        let m = make_measure::<f64>(&spec(&["F_2"]), &MeasureSpec::Srw).unwrap();
        let t = m.convolution_powers(2, 2, false).unwrap();
        assert_eq!(t.get(2, &GroupElement::identity()), 0.25);

        let m = make_measure::<f64>(&spec(&["Z^2"]), &MeasureSpec::Srw).unwrap();
        let t = m.convolution_powers(2, 2, false).unwrap();
        assert_eq!(t.get(2, &GroupElement::identity()), 0.25);
    }

    #[test]
    fn window_too_small_needs_permission() {
        let m = make_measure::<f64>(&spec(&["Z"]), &MeasureSpec::Srw).unwrap();
        assert!(m.convolution_powers(5, 3, false).is_err());
        let t = m.convolution_powers(5, 3, true).unwrap();
        assert!(t.defect(5) > 0.0);
        assert_eq!(t.defect(3), 0.0);
    }

    #[test]
    fn rational_and_float_tables_agree() {
        let g = spec(&["Z^2", "Z"]);
        let exact = make_measure::<BigRational>(&g, &MeasureSpec::Adapted { weights: vec![0.5, 0.5] }).unwrap();
        let float = exact.to_f64();
        let te = exact.convolution_powers(6, 6, false).unwrap();
        let tf = float.convolution_powers(6, 6, false).unwrap();
        for n in 0..=6 {
            assert_eq!(te.row_sum(n), BigRational::from_ratio(1, 1));
            for (a, b) in te.row(n).iter().zip(tf.row(n)) {
                assert!((a.as_f64() - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let m = make_measure::<f64>(&spec(&["Z"]), &MeasureSpec::Srw).unwrap();
        assert_eq!(m.sample_path(0, 1), vec![GroupElement::identity()]);
        let a = m.sample_path(4, 17);
        assert_eq!(a, m.sample_path(4, 17));
        assert!(a[4].length() <= 4);
        let csv = trajectory_csv(&a);
        assert!(csv.starts_with("step,normal_form,length\n0,e,0\n"));
    }

    #[test]
    fn radial_detection() {
        let f2 = spec(&["F_2"]);
        assert!(make_measure::<f64>(&f2, &MeasureSpec::Srw).unwrap().is_radial());
        assert!(make_measure::<f64>(&f2, &MeasureSpec::UniformBall { radius: 2 }).unwrap().is_radial());
        let zz = spec(&["Z", "Z"]);
        assert!(!make_measure::<f64>(&zz, &MeasureSpec::Adapted { weights: vec![0.3, 0.7] })
            .unwrap()
            .is_radial());
        let z2 = spec(&["Z^2"]);
        assert!(!make_measure::<f64>(&z2, &MeasureSpec::Srw).unwrap().is_radial());
    }
}
