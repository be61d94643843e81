//! Finite windows of the Cayley graph with precomputed step tables.

use std::collections::HashMap;

use crate::error::Result;
use crate::group::{Ball, GroupElement, GroupSpec};

pub const OUTSIDE: u32 = u32::MAX;

/// A finite vertex set with, for every vertex and every step `s`, the index of
/// `g * s` (or [`OUTSIDE`]).
#[derive(Clone, Debug)]
pub struct Window {
    elements: Vec<GroupElement>,
    index: HashMap<GroupElement, usize>,
    steps: Vec<GroupElement>,
    next: Vec<u32>,
}

impl Window {
    /// Ball of the given radius around the identity.
    pub fn ball(group: &GroupSpec, radius: u32, steps: &[GroupElement]) -> Result<Self> {
        let ball = group.ball(radius)?;
        Ok(Self::from_ball(ball, steps))
    }

    pub fn from_ball(ball: Ball, steps: &[GroupElement]) -> Self {
        Self::from_elements(ball.into_elements(), steps)
    }

    /// Arbitrary finite vertex set, kept in the given order.
    pub fn from_elements(elements: Vec<GroupElement>, steps: &[GroupElement]) -> Self {
        let index: HashMap<GroupElement, usize> =
            elements.iter().cloned().enumerate().map(|(i, g)| (g, i)).collect();
        let k = steps.len();
        let mut next = vec![OUTSIDE; elements.len() * k];
        for (i, g) in elements.iter().enumerate() {
            for (j, s) in steps.iter().enumerate() {
                if let Some(&t) = index.get(&g.mul(s)) {
                    next[i * k + j] = t as u32;
                }
            }
        }
        Window { elements, index, steps: steps.to_vec(), next }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn elements(&self) -> &[GroupElement] {
        &self.elements
    }

    pub fn element(&self, i: usize) -> &GroupElement {
        &self.elements[i]
    }

    pub fn index_of(&self, g: &GroupElement) -> Option<usize> {
        self.index.get(g).copied()
    }

    pub fn steps(&self) -> &[GroupElement] {
        &self.steps
    }

    /// Neighbor table row of vertex `i`: one entry per step.
    #[inline]
    pub fn neighbors(&self, i: usize) -> &[u32] {
        let k = self.steps.len();
        &self.next[i * k..(i + 1) * k]
    }
}
