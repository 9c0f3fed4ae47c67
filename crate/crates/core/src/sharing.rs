use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::ring::{RingMatrix, RingValue};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PartyId {
    One,
    Two,
}

impl PartyId {
    pub const BOTH: [PartyId; 2] = [PartyId::One, PartyId::Two];

    /// 0 for the first party, 1 for the second: the `(i − 1)` factor that
    /// decides who adds public constants.
    pub fn index(self) -> usize {
        match self {
            PartyId::One => 0,
            PartyId::Two => 1,
        }
    }

    pub fn peer(self) -> PartyId {
        match self {
            PartyId::One => PartyId::Two,
            PartyId::Two => PartyId::One,
        }
    }

    pub fn is_first(self) -> bool {
        self == PartyId::One
    }

    /// Public constants enter a sharing through the second party's share.
    pub fn holds_public(self) -> bool {
        self == PartyId::Two
    }
}

impl fmt::Display for PartyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index() + 1)
    }
}

/// Which permutation state an axis is in. Indexing a shuffled matrix with a
/// mask revealed in a different order silently selects the wrong entries, so
/// every shared matrix and mask carries one of these per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Order {
    #[default]
    Original,
    Shuffled(u64),
}

/// One party's additive share of a matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShareMatrix {
    pub party: PartyId,
    pub values: RingMatrix,
    pub row_order: Order,
    pub col_order: Order,
}

impl ShareMatrix {
    pub fn new(party: PartyId, values: RingMatrix) -> Self {
        ShareMatrix { party, values, row_order: Order::Original, col_order: Order::Original }
    }

    pub fn zeros(party: PartyId, rows: usize, cols: usize) -> Self {
        ShareMatrix::new(party, RingMatrix::zeros(rows, cols))
    }

    /// The share a party holds of a public matrix: the second party holds it,
    /// the first holds zero.
    pub fn public(party: PartyId, m: &RingMatrix) -> Self {
        if party.holds_public() {
            ShareMatrix::new(party, m.clone())
        } else {
            ShareMatrix::zeros(party, m.rows(), m.cols())
        }
    }

    pub fn with_orders(mut self, row_order: Order, col_order: Order) -> Self {
        self.row_order = row_order;
        self.col_order = col_order;
        self
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    /// Transposing swaps the order tags along with the axes.
    pub fn transpose(&self) -> ShareMatrix {
        ShareMatrix {
            party: self.party,
            values: self.values.transpose(),
            row_order: self.col_order,
            col_order: self.row_order,
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> ShareMatrix {
        ShareMatrix { values: self.values.select_rows(idx), ..self.clone_header() }
    }

    pub fn select_cols(&self, idx: &[usize]) -> ShareMatrix {
        ShareMatrix { values: self.values.select_cols(idx), ..self.clone_header() }
    }

    pub fn map_values(&self, values: RingMatrix) -> ShareMatrix {
        ShareMatrix { values, ..self.clone_header() }
    }

    fn clone_header(&self) -> ShareMatrix {
        ShareMatrix {
            party: self.party,
            values: RingMatrix::default(),
            row_order: self.row_order,
            col_order: self.col_order,
        }
    }
}

/// Split `m` into two additive shares; the first share is drawn from a
/// ChaCha stream seeded with `seed`.
pub fn share(m: &RingMatrix, seed: u64) -> (ShareMatrix, ShareMatrix) {
    share_with_rng(m, &mut ChaCha20Rng::seed_from_u64(seed))
}

pub fn share_with_rng<R: Rng + ?Sized>(m: &RingMatrix, rng: &mut R) -> (ShareMatrix, ShareMatrix) {
    let first = RingMatrix::from_fn(m.rows(), m.cols(), |_, _| RingValue(rng.random()));
    let second = m.sub(&first).expect("same shape");
    (ShareMatrix::new(PartyId::One, first), ShareMatrix::new(PartyId::Two, second))
}

pub fn reconstruct(s1: &ShareMatrix, s2: &ShareMatrix) -> Result<RingMatrix> {
    if s1.party == s2.party {
        return Err(Error::contract(format!("both shares belong to party {}", s1.party)));
    }
    if s1.shape() != s2.shape() {
        return Err(Error::contract(format!(
            "share shapes differ: {:?} vs {:?}",
            s1.shape(),
            s2.shape()
        )));
    }
    if s1.row_order != s2.row_order || s1.col_order != s2.col_order {
        return Err(Error::OrderMismatch("shares disagree on permutation state".into()));
    }
    s1.values.add(&s2.values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ring::FixedPointCodec;

    #[test]
    fn zero_matrix_shares_are_negations() {
        let (a, b) = share(&RingMatrix::zeros(3, 3), 1);
        assert_eq!(a.values.neg(), b.values);
    }

    #[test]
    fn roundtrip_random_matrices() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for seed in 0..10_000u64 {
            let (r, c) = (rng.random_range(1..4), rng.random_range(1..4));
            let m = RingMatrix::from_fn(r, c, |_, _| RingValue(rng.random()));
            let (a, b) = share(&m, seed);
            assert_eq!(reconstruct(&a, &b).unwrap(), m);
        }
    }

    #[test]
    fn fixed_point_and_degenerate_sharing() {
        let codec = FixedPointCodec::default();
        let m = RingMatrix::encode(&codec, 1, 1, &[1.5]).unwrap();
        let (a, b) = share(&m, 3);
        assert_eq!(reconstruct(&a, &b).unwrap().decode(&codec), vec![1.5]);
        let a = ShareMatrix::public(PartyId::One, &m);
        let b = ShareMatrix::public(PartyId::Two, &m);
        assert_eq!(reconstruct(&a, &b).unwrap(), m);
    }

    #[test]
    fn reconstruct_rejects_mismatches() {
        let (a, _) = share(&RingMatrix::zeros(2, 2), 1);
        let (_, b) = share(&RingMatrix::zeros(2, 3), 1);
        assert!(reconstruct(&a, &b).is_err());
        assert!(reconstruct(&a, &a).is_err());
        let (a, b) = share(&RingMatrix::zeros(2, 2), 1);
        let b = b.with_orders(Order::Shuffled(1), Order::Original);
        assert!(matches!(reconstruct(&a, &b), Err(Error::OrderMismatch(_))));
    }

    #[test]
    fn transpose_swaps_order_tags() {
        let s = ShareMatrix::zeros(PartyId::One, 2, 3).with_orders(Order::Original, Order::Shuffled(4));
        let t = s.transpose();
        assert_eq!((t.row_order, t.col_order), (Order::Shuffled(4), Order::Original));
        assert_eq!(t.shape(), (3, 2));
    }
}
