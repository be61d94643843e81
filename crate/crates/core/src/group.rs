//! Free products of free-abelian and free groups with exact syllable normal forms.
//!
//! An element is an alternating sequence of syllables `(factor, element)`:
//! adjacent syllables live in different factors and no syllable is trivial.
//! Every factor carries its standard symmetric generating set, and the word
//! length in the free product is the sum of the factor word lengths of the
//! syllables, so `|g|` is always exact.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on the number of elements a ball enumeration may hold.
pub const DEFAULT_BALL_BUDGET: usize = 6_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FactorSpec {
    /// `Z^d`, generated by `±e_i`.
    FreeAbelian(usize),
    /// `F_k`, generated by `k` letters and their inverses.
    Free(usize),
}

impl FactorSpec {
    pub fn rank(&self) -> usize {
        match *self {
            FactorSpec::FreeAbelian(d) | FactorSpec::Free(d) => d,
        }
    }

    /// Number of standard generators (inverses included).
    pub fn degree(&self) -> usize {
        2 * self.rank()
    }

    /// Cayley graph of the factor is a tree (`Z` or `F_k`).
    pub fn is_tree(&self) -> bool {
        matches!(*self, FactorSpec::Free(_) | FactorSpec::FreeAbelian(1))
    }

    fn identity(&self) -> FactorElement {
        match *self {
            FactorSpec::FreeAbelian(d) => FactorElement::Abelian(vec![0; d]),
            FactorSpec::Free(_) => FactorElement::Free(Vec::new()),
        }
    }

    fn generators(&self) -> Vec<FactorElement> {
        let mut out = Vec::with_capacity(self.degree());
        match *self {
            FactorSpec::FreeAbelian(d) => {
                for i in 0..d {
                    for sign in [1, -1] {
                        let mut v = vec![0; d];
                        v[i] = sign;
                        out.push(FactorElement::Abelian(v));
                    }
                }
            }
            FactorSpec::Free(k) => {
                for i in 1..=k as i32 {
                    out.push(FactorElement::Free(vec![i]));
                    out.push(FactorElement::Free(vec![-i]));
                }
            }
        }
        out
    }

    fn admits(&self, e: &FactorElement) -> bool {
        match (self, e) {
            (FactorSpec::FreeAbelian(d), FactorElement::Abelian(v)) => v.len() == *d,
            (FactorSpec::Free(k), FactorElement::Free(w)) => {
                w.iter().all(|&l| l != 0 && l.unsigned_abs() as usize <= *k)
                    && w.windows(2).all(|p| p[0] != -p[1])
            }
            _ => false,
        }
    }
}

impl fmt::Display for FactorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FactorSpec::FreeAbelian(d) => write!(f, "Z^{d}"),
            FactorSpec::Free(k) => write!(f, "F_{k}"),
        }
    }
}

impl FromStr for FactorSpec {
    type Err = Error;

    /// Accepts `Z`, `Z^d`, `F_k`, `Fk`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("unrecognized factor `{s}` (expected Z^d or F_k)"));
        let (kind, rank) = if s == "Z" {
            ("Z", 1)
        } else if let Some(rest) = s.strip_prefix("Z^") {
            ("Z", rest.parse::<usize>().map_err(|_| bad())?)
        } else if let Some(rest) = s.strip_prefix("F_").or_else(|| s.strip_prefix('F')) {
            ("F", rest.parse::<usize>().map_err(|_| bad())?)
        } else {
            return Err(bad());
        };
        if rank == 0 {
            return Err(Error::Config(format!("factor `{s}` must have rank at least 1")));
        }
        Ok(if kind == "Z" {
            FactorSpec::FreeAbelian(rank)
        } else {
            FactorSpec::Free(rank)
        })
    }
}

/// Element of a single factor: an integer vector or a freely reduced word.
///
/// Free letters are `±1..=±k`; a negative letter is the inverse generator.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FactorElement {
    Abelian(Vec<i64>),
    Free(Vec<i32>),
}

impl FactorElement {
    pub fn is_identity(&self) -> bool {
        match self {
            FactorElement::Abelian(v) => v.iter().all(|&c| c == 0),
            FactorElement::Free(w) => w.is_empty(),
        }
    }

    pub fn length(&self) -> u32 {
        match self {
            FactorElement::Abelian(v) => v.iter().map(|c| c.unsigned_abs() as u32).sum(),
            FactorElement::Free(w) => w.len() as u32,
        }
    }

    pub fn inverse(&self) -> FactorElement {
        match self {
            FactorElement::Abelian(v) => FactorElement::Abelian(v.iter().map(|c| -c).collect()),
            FactorElement::Free(w) => FactorElement::Free(w.iter().rev().map(|l| -l).collect()),
        }
    }

    /// Product inside the factor.
    ///
    /// Panics when the two elements come from factors of different kinds or
    /// ranks; [`GroupSpec::multiply`] validates first.
    pub fn mul(&self, other: &FactorElement) -> FactorElement {
        match (self, other) {
            (FactorElement::Abelian(a), FactorElement::Abelian(b)) => {
                assert_eq!(a.len(), b.len(), "abelian rank mismatch");
                FactorElement::Abelian(a.iter().zip(b).map(|(x, y)| x + y).collect())
            }
            (FactorElement::Free(a), FactorElement::Free(b)) => {
                let mut out = a.clone();
                for &l in b {
                    if out.last() == Some(&-l) {
                        out.pop();
                    } else {
                        out.push(l);
                    }
                }
                FactorElement::Free(out)
            }
            _ => panic!("factor kind mismatch"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Syllable {
    pub factor: usize,
    pub element: FactorElement,
}

/// Normal-form element of a free product.
///
/// Ordering is length first, then lexicographic on the syllable sequence;
/// every enumeration and tie-break in the crate uses it.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct GroupElement {
    syllables: Vec<Syllable>,
    length: u32,
}

impl GroupElement {
    pub fn identity() -> Self {
        GroupElement { syllables: Vec::new(), length: 0 }
    }

    /// Single-syllable element; the identity if `element` is trivial.
    pub fn from_factor(factor: usize, element: FactorElement) -> Self {
        if element.is_identity() {
            return Self::identity();
        }
        let length = element.length();
        GroupElement { syllables: vec![Syllable { factor, element }], length }
    }

    /// Builds an element from arbitrary syllables, reducing to normal form.
    pub fn from_syllables(syllables: impl IntoIterator<Item = Syllable>) -> Self {
        let mut g = Self::identity();
        for s in syllables {
            g = g.mul(&Self::from_factor(s.factor, s.element));
        }
        g
    }

    pub fn syllables(&self) -> &[Syllable] {
        &self.syllables
    }

    pub fn is_identity(&self) -> bool {
        self.syllables.is_empty()
    }

    /// Word length `|g| = d(e, g)`.
    pub fn length(&self) -> u32 {
        self.length
    }

    pub fn inverse(&self) -> Self {
        GroupElement {
            syllables: self
                .syllables
                .iter()
                .rev()
                .map(|s| Syllable { factor: s.factor, element: s.element.inverse() })
                .collect(),
            length: self.length,
        }
    }

    /// Normal form of `self * other`.
    pub fn mul(&self, other: &GroupElement) -> GroupElement {
        let mut left = self.syllables.clone();
        let mut right = other.syllables.iter().peekable();
        loop {
            let (Some(last), Some(first)) = (left.last(), right.peek()) else {
                break;
            };
            if last.factor != first.factor {
                break;
            }
            let merged = last.element.mul(&first.element);
            let factor = last.factor;
            left.pop();
            right.next();
            if !merged.is_identity() {
                left.push(Syllable { factor, element: merged });
                break;
            }
        }
        left.extend(right.cloned());
        let length = left.iter().map(|s| s.element.length()).sum();
        GroupElement { syllables: left, length }
    }

    /// Word distance `d(self, other) = |self^{-1} other|`.
    pub fn distance(&self, other: &GroupElement) -> u32 {
        self.inverse().mul(other).length
    }

    /// First syllable, if any.
    pub fn head(&self) -> Option<&Syllable> {
        self.syllables.first()
    }

    /// Last syllable, if any.
    pub fn tail(&self) -> Option<&Syllable> {
        self.syllables.last()
    }
}

impl Ord for GroupElement {
    fn cmp(&self, other: &Self) -> Ordering {
        self.length
            .cmp(&other.length)
            .then_with(|| self.syllables.cmp(&other.syllables))
    }
}

impl PartialOrd for GroupElement {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn letter_char(l: i32) -> char {
    let base = (l.unsigned_abs() - 1) as u8;
    if l > 0 {
        (b'a' + base) as char
    } else {
        (b'A' + base) as char
    }
}

impl fmt::Display for GroupElement {
    /// `e`, or syllables joined by `*`: `Z0(1,-2)` for an abelian syllable of
    /// factor 0, `F1(aB)` for a free word in factor 1 (upper case = inverse).
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.syllables.is_empty() {
            return write!(f, "e");
        }
        for (i, s) in self.syllables.iter().enumerate() {
            if i > 0 {
                write!(f, "*")?;
            }
            match &s.element {
                FactorElement::Abelian(v) => {
                    let coords: Vec<String> = v.iter().map(|c| c.to_string()).collect();
                    write!(f, "Z{}({})", s.factor, coords.join(","))?;
                }
                FactorElement::Free(w) => {
                    let word: String = w.iter().map(|&l| letter_char(l)).collect();
                    write!(f, "F{}({})", s.factor, word)?;
                }
            }
        }
        Ok(())
    }
}

impl fmt::Debug for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Ordered list of factors; two or more factors form their free product.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupSpec {
    factors: Vec<FactorSpec>,
}

impl GroupSpec {
    pub fn new(factors: Vec<FactorSpec>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::Config("a group needs at least one factor".into()));
        }
        if let Some(f) = factors.iter().find(|f| f.rank() == 0) {
            return Err(Error::Config(format!("factor {f} has rank 0")));
        }
        Ok(GroupSpec { factors })
    }

    /// Parses factor names such as `["Z^2", "F_1"]`.
    pub fn parse<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let factors = names
            .iter()
            .map(|s| s.as_ref().parse::<FactorSpec>())
            .collect::<Result<Vec<_>>>()?;
        Self::new(factors)
    }

    pub fn factors(&self) -> &[FactorSpec] {
        &self.factors
    }

    pub fn factor(&self, i: usize) -> Result<FactorSpec> {
        self.factors
            .get(i)
            .copied()
            .ok_or_else(|| Error::Config(format!("factor index {i} out of range")))
    }

    /// Standard symmetric generators: factor by factor, `+` before `-`.
    pub fn generators(&self) -> Vec<GroupElement> {
        self.factors
            .iter()
            .enumerate()
            .flat_map(|(i, f)| {
                f.generators().into_iter().map(move |e| GroupElement::from_factor(i, e))
            })
            .collect()
    }

    pub fn degree(&self) -> usize {
        self.factors.iter().map(FactorSpec::degree).sum()
    }

    /// Degree of the Cayley graph when it is a regular tree.
    pub fn tree_degree(&self) -> Option<usize> {
        self.factors.iter().all(FactorSpec::is_tree).then(|| self.degree())
    }

    /// Checks that `g` is a well-formed normal form for this group.
    pub fn validate(&self, g: &GroupElement) -> Result<()> {
        let mut prev: Option<usize> = None;
        for s in &g.syllables {
            let f = self.factors.get(s.factor).ok_or_else(|| {
                Error::Config(format!("element {g} uses factor {} not in {self}", s.factor))
            })?;
            if !f.admits(&s.element) {
                return Err(Error::Config(format!("syllable of {g} does not belong to {f}")));
            }
            if s.element.is_identity() || prev == Some(s.factor) {
                return Err(Error::Config(format!("{g} is not in normal form")));
            }
            prev = Some(s.factor);
        }
        Ok(())
    }

    /// Checked product.
    pub fn multiply(&self, a: &GroupElement, b: &GroupElement) -> Result<GroupElement> {
        self.validate(a)?;
        self.validate(b)?;
        Ok(a.mul(b))
    }

    pub fn factor_identity(&self, i: usize) -> Result<FactorElement> {
        Ok(self.factor(i)?.identity())
    }

    /// Parses the textual normal form produced by `Display`.
    pub fn parse_element(&self, s: &str) -> Result<GroupElement> {
        let s = s.trim();
        if s == "e" || s.is_empty() {
            return Ok(GroupElement::identity());
        }
        let bad = || Error::Config(format!("cannot parse group element `{s}`"));
        let mut syllables = Vec::new();
        for part in s.split('*') {
            let part = part.trim();
            let open = part.find('(').ok_or_else(bad)?;
            let close = part.strip_suffix(')').ok_or_else(bad)?;
            let kind = part.chars().next().ok_or_else(bad)?;
            let factor: usize = part[1..open].parse().map_err(|_| bad())?;
            let body = &close[open + 1..];
            let spec = self.factor(factor)?;
            let element = match (kind, spec) {
                ('Z', FactorSpec::FreeAbelian(d)) => {
                    let v = body
                        .split(',')
                        .map(|c| c.trim().parse::<i64>().map_err(|_| bad()))
                        .collect::<Result<Vec<_>>>()?;
                    if v.len() != d {
                        return Err(bad());
                    }
                    FactorElement::Abelian(v)
                }
                ('F', FactorSpec::Free(_)) => FactorElement::Free(
                    body.chars()
                        .map(|c| {
                            if c.is_ascii_lowercase() {
                                Ok((c as u8 - b'a' + 1) as i32)
                            } else if c.is_ascii_uppercase() {
                                Ok(-((c as u8 - b'A' + 1) as i32))
                            } else {
                                Err(bad())
                            }
                        })
                        .collect::<Result<Vec<_>>>()?
                        .into_iter()
                        .fold(Vec::new(), |mut w: Vec<i32>, l| {
                            if w.last() == Some(&-l) {
                                w.pop();
                            } else {
                                w.push(l);
                            }
                            w
                        }),
                ),
                _ => return Err(bad()),
            };
            if !spec.admits(&element) && !matches!(element, FactorElement::Free(_)) {
                return Err(bad());
            }
            syllables.push(Syllable { factor, element });
        }
        let g = GroupElement::from_syllables(syllables);
        self.validate(&g)?;
        Ok(g)
    }

    /// Every element with `|g| <= radius`, once each, sorted length-lex.
    pub fn ball(&self, radius: u32) -> Result<Ball> {
        self.ball_with_budget(radius, DEFAULT_BALL_BUDGET)
    }

    pub fn ball_with_budget(&self, radius: u32, budget: usize) -> Result<Ball> {
        let ball = self.largest_ball(radius, budget);
        match ball.elements().last() {
            Some(g) if g.length == radius => Ok(ball),
            _ => Err(Error::Resource(format!(
                "ball of radius {radius} in {self} exceeds the budget of {budget} elements"
            ))),
        }
    }

    /// The largest ball of radius at most `max_radius` holding at most
    /// `budget` elements.
    pub fn largest_ball(&self, max_radius: u32, budget: usize) -> Ball {
        let gens = self.generators();
        let mut seen: HashSet<GroupElement> = HashSet::new();
        let mut elements = vec![GroupElement::identity()];
        seen.insert(GroupElement::identity());
        let mut sphere_start = 0;
        'grow: for k in 0..max_radius {
            let sphere_end = elements.len();
            let mut next = Vec::new();
            for g in &elements[sphere_start..sphere_end] {
                for s in &gens {
                    let h = g.mul(s);
                    if h.length == k + 1 && !seen.contains(&h) {
                        seen.insert(h.clone());
                        next.push(h);
                    }
                }
                if elements.len() + next.len() > budget {
                    break 'grow;
                }
            }
            next.sort();
            elements.extend(next);
            sphere_start = sphere_end;
        }
        Ball::from_sorted(elements)
    }

    /// One geodesic vertex path from `x` to `y`, choosing the smallest
    /// successor (in element order) whenever several continue geodesically.
    pub fn geodesic(&self, x: &GroupElement, y: &GroupElement) -> Vec<GroupElement> {
        let gens = self.generators();
        let target = x.inverse().mul(y);
        let mut path = vec![x.clone()];
        let mut cur = GroupElement::identity();
        let mut remaining = target.length;
        while remaining > 0 {
            let next = gens
                .iter()
                .map(|s| cur.mul(s))
                .filter(|c| c.inverse().mul(&target).length + 1 == remaining)
                .map(|c| (x.mul(&c), c))
                .min_by(|a, b| a.0.cmp(&b.0))
                .expect("some generator always decreases the distance");
            path.push(next.0);
            cur = next.1;
            remaining -= 1;
        }
        path
    }

    /// Closest point of the coset to `g`, with its distance.
    ///
    /// Writing `w = rep^{-1} g`, the distance from `g` to `rep * h` is
    /// `|h^{-1} w|`; it is minimized by absorbing the leading syllable of `w`
    /// when that syllable lies in the coset's factor, and by `h = e`
    /// otherwise. The minimizer is unique.
    pub fn project_to_coset(&self, g: &GroupElement, coset: &Coset) -> (GroupElement, u32) {
        let w = coset.representative.inverse().mul(g);
        match w.head() {
            Some(s) if s.factor == coset.factor => {
                let h = GroupElement::from_factor(s.factor, s.element.clone());
                let p = coset.representative.mul(&h);
                (p, w.length - h.length)
            }
            _ => (coset.representative.clone(), w.length),
        }
    }

    /// Distance from `g` to the coset.
    pub fn distance_to_coset(&self, g: &GroupElement, coset: &Coset) -> u32 {
        self.project_to_coset(g, coset).1
    }

    /// Elements of the subgroup given by factor `i` with length at most `radius`,
    /// in element order.
    pub fn factor_ball(&self, i: usize, radius: u32) -> Result<Vec<GroupElement>> {
        let single = GroupSpec::new(vec![self.factor(i)?])?;
        Ok(single
            .ball(radius)?
            .into_elements()
            .into_iter()
            .map(|g| match g.syllables.first() {
                None => g,
                Some(s) => GroupElement::from_factor(i, s.element.clone()),
            })
            .collect())
    }

    /// Words `w` with `|w| <= eta` that are `e` or start outside factor `i`.
    /// Every element at distance at most `eta` from the subgroup is uniquely
    /// `h * w` with `h` in the subgroup, and `d(h w, subgroup) = |w|`.
    pub fn coset_words(&self, i: usize, eta: u32) -> Result<Vec<GroupElement>> {
        Ok(self
            .ball(eta)?
            .into_elements()
            .into_iter()
            .filter(|w| w.head().is_none_or(|s| s.factor != i))
            .collect())
    }
}

impl fmt::Display for GroupSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.factors.iter().map(|x| x.to_string()).collect();
        write!(f, "{}", names.join(" * "))
    }
}

/// Left coset `gH` of a factor `H`.
///
/// The stored representative is canonical (it never ends with a syllable of
/// `H`), so equality of cosets is equality of fields.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Coset {
    representative: GroupElement,
    factor: usize,
}

impl Coset {
    pub fn new(representative: GroupElement, factor: usize) -> Self {
        let mut rep = representative;
        if rep.tail().map(|s| s.factor) == Some(factor) {
            rep.syllables.pop();
            rep.length = rep.syllables.iter().map(|s| s.element.length()).sum();
        }
        Coset { representative: rep, factor }
    }

    /// The factor subgroup itself.
    pub fn subgroup(factor: usize) -> Self {
        Coset { representative: GroupElement::identity(), factor }
    }

    pub fn representative(&self) -> &GroupElement {
        &self.representative
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn contains(&self, g: &GroupElement) -> bool {
        Coset::new(g.clone(), self.factor) == *self
    }
}

/// Enumerated ball with an index for membership lookups.
#[derive(Clone, Debug)]
pub struct Ball {
    elements: Vec<GroupElement>,
    index: HashMap<GroupElement, usize>,
}

impl Ball {
    fn from_sorted(elements: Vec<GroupElement>) -> Self {
        let index = elements.iter().cloned().enumerate().map(|(i, g)| (g, i)).collect();
        Ball { elements, index }
    }

    pub fn elements(&self) -> &[GroupElement] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn index_of(&self, g: &GroupElement) -> Option<usize> {
        self.index.get(g).copied()
    }

    pub fn contains(&self, g: &GroupElement) -> bool {
        self.index.contains_key(g)
    }

    /// Elements at exactly distance `k` from the identity.
    pub fn sphere(&self, k: u32) -> impl Iterator<Item = &GroupElement> {
        self.elements.iter().filter(move |g| g.length == k)
    }

    pub fn sphere_sizes(&self) -> Vec<usize> {
        let max = self.elements.last().map_or(0, |g| g.length as usize);
        let mut out = vec![0; max + 1];
        for g in &self.elements {
            out[g.length as usize] += 1;
        }
        out
    }

    pub fn into_elements(self) -> Vec<GroupElement> {
        self.elements
    }
}
