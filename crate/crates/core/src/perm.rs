use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::ring::RingMatrix;

/// A permutation of `0..n` acting by gathering: `apply(p, x)[i] = x[p[i]]`.
///
/// Composition follows the function convention: `a.compose(b)` is `a ∘ b`,
/// i.e. `b` is applied first.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Permutation((0..n).collect())
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut v: Vec<usize> = (0..n).collect();
        v.shuffle(rng);
        Permutation(v)
    }

    pub fn new(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &i in &map {
            if i >= map.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::contract(format!("{map:?} is not a permutation")));
            }
        }
        Ok(Permutation(map))
    }

    /// Build from 1-based notation such as `[2, 1, 3]`.
    pub fn from_one_based(map: &[usize]) -> Result<Self> {
        if map.contains(&0) {
            return Err(Error::contract("one-based permutation contains 0"));
        }
        Permutation::new(map.iter().map(|&i| i - 1).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &p)| i == p)
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.0.len()];
        for (i, &p) in self.0.iter().enumerate() {
            inv[p] = i;
        }
        Permutation(inv)
    }

    /// `self ∘ inner`: apply `inner`, then `self`.
    pub fn compose(&self, inner: &Permutation) -> Permutation {
        debug_assert_eq!(self.len(), inner.len());
        Permutation(self.0.iter().map(|&i| inner.0[i]).collect())
    }

    pub fn apply<T: Clone>(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(self.len(), x.len());
        self.0.iter().map(|&i| x[i].clone()).collect()
    }

    /// Permute the rows of `m`; each row is one item.
    pub fn apply_rows(&self, m: &RingMatrix) -> RingMatrix {
        m.select_rows(&self.0)
    }
}
