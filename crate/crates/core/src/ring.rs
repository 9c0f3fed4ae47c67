//! Wrapping arithmetic over `Z_{2^k}` and the fixed-point codec used to carry
//! real numbers through it.
//!
//! Values are stored in a `u64` and all arithmetic wraps modulo `2^64`. Since
//! reduction modulo `2^k` is a ring homomorphism for every `k <= 64`, the codec
//! only needs to look at the low `k` bits when it interprets a value; the
//! protocols never have to know `k` except for truncation and byte accounting.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
#[repr(transparent)]
pub struct RingValue(pub u64);

impl RingValue {
    pub const ZERO: RingValue = RingValue(0);
    pub const ONE: RingValue = RingValue(1);

    #[inline]
    pub fn from_i64(v: i64) -> Self {
        RingValue(v as u64)
    }

    #[inline]
    pub fn raw(self) -> u64 {
        self.0
    }
}

impl fmt::Debug for RingValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Add for RingValue {
    type Output = RingValue;
    #[inline]
    fn add(self, rhs: RingValue) -> RingValue {
        RingValue(self.0.wrapping_add(rhs.0))
    }
}

impl Sub for RingValue {
    type Output = RingValue;
    #[inline]
    fn sub(self, rhs: RingValue) -> RingValue {
        RingValue(self.0.wrapping_sub(rhs.0))
    }
}

impl Mul for RingValue {
    type Output = RingValue;
    #[inline]
    fn mul(self, rhs: RingValue) -> RingValue {
        RingValue(self.0.wrapping_mul(rhs.0))
    }
}

impl Neg for RingValue {
    type Output = RingValue;
    #[inline]
    fn neg(self) -> RingValue {
        RingValue(self.0.wrapping_neg())
    }
}

impl AddAssign for RingValue {
    #[inline]
    fn add_assign(&mut self, rhs: RingValue) {
        self.0 = self.0.wrapping_add(rhs.0);
    }
}

impl SubAssign for RingValue {
    #[inline]
    fn sub_assign(&mut self, rhs: RingValue) {
        self.0 = self.0.wrapping_sub(rhs.0);
    }
}

impl MulAssign for RingValue {
    #[inline]
    fn mul_assign(&mut self, rhs: RingValue) {
        self.0 = self.0.wrapping_mul(rhs.0);
    }
}

impl std::iter::Sum for RingValue {
    fn sum<I: Iterator<Item = RingValue>>(iter: I) -> RingValue {
        iter.fold(RingValue::ZERO, |a, b| a + b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RingOp {
    Add,
    Sub,
    Mul,
    Neg,
}

/// Exact modular result of `op`. `b` is ignored for negation.
pub fn ring_arith(a: RingValue, b: RingValue, op: RingOp) -> RingValue {
    match op {
        RingOp::Add => a + b,
        RingOp::Sub => a - b,
        RingOp::Mul => a * b,
        RingOp::Neg => -a,
    }
}

/// Fixed-point encoding of reals into `Z_{2^k}` with `f` fractional bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPointCodec {
    bits: u32,
    frac: u32,
}

impl Default for FixedPointCodec {
    fn default() -> Self {
        FixedPointCodec { bits: 64, frac: 16 }
    }
}

impl FixedPointCodec {
    /// `bits` is the ring width `k`, `frac` the number of fractional bits.
    /// Truncation needs two bits of headroom, so `frac + 2 <= bits` is required.
    pub fn new(bits: u32, frac: u32) -> Result<Self> {
        if !(2..=64).contains(&bits) || frac + 2 > bits {
            return Err(Error::Config(format!(
                "invalid fixed-point parameters k={bits}, f={frac}"
            )));
        }
        Ok(FixedPointCodec { bits, frac })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn frac(&self) -> u32 {
        self.frac
    }

    pub fn scale(&self) -> f64 {
        (self.frac as f64).exp2()
    }

    pub fn mask(&self) -> u64 {
        if self.bits == 64 {
            u64::MAX
        } else {
            (1u64 << self.bits) - 1
        }
    }

    /// Bytes needed on the wire for one ring element.
    pub fn bytes_per_element(&self) -> u64 {
        self.bits.div_ceil(8) as u64
    }

    /// Exclusive bound on the magnitude of encodable reals.
    pub fn bound(&self) -> f64 {
        ((self.bits - self.frac - 1) as f64).exp2()
    }

    #[inline]
    pub fn reduce(&self, v: RingValue) -> RingValue {
        RingValue(v.0 & self.mask())
    }

    /// Two's-complement reading of the low `k` bits.
    #[inline]
    pub fn signed(&self, v: RingValue) -> i64 {
        let shift = 64 - self.bits;
        ((v.0 << shift) as i64) >> shift
    }

    pub fn encode(&self, r: f64) -> Result<RingValue> {
        let bound = self.bound();
        if !r.is_finite() || r.abs() >= bound {
            return Err(Error::Range { value: r, bound });
        }
        let scaled = (r * self.scale()).round();
        let limit = ((self.bits - 1) as f64).exp2();
        if scaled >= limit || scaled < -limit {
            return Err(Error::Range { value: r, bound });
        }
        Ok(self.reduce(RingValue(scaled as i64 as u64)))
    }

    pub fn decode(&self, v: RingValue) -> f64 {
        self.signed(v) as f64 / self.scale()
    }

    /// Plaintext reference for fixed-point truncation: arithmetic right shift
    /// of the signed value (floor division by `2^f`).
    #[inline]
    pub fn truncate(&self, v: RingValue) -> RingValue {
        self.reduce(RingValue((self.signed(v) >> self.frac) as u64))
    }

    pub fn encode_slice(&self, values: &[f64]) -> Result<Vec<RingValue>> {
        values.iter().map(|&r| self.encode(r)).collect()
    }

    pub fn decode_slice(&self, values: &[RingValue]) -> Vec<f64> {
        values.iter().map(|&v| self.decode(v)).collect()
    }
}

/// Free-function form of [`FixedPointCodec::encode`].
pub fn encode_fixed(r: f64, codec: &FixedPointCodec) -> Result<RingValue> {
    codec.encode(r)
}

/// Free-function form of [`FixedPointCodec::decode`].
pub fn decode_fixed(v: RingValue, codec: &FixedPointCodec) -> f64 {
    codec.decode(v)
}

/// Dense row-major matrix over the ring.
#[derive(Clone, PartialEq, Eq, Default)]
pub struct RingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<RingValue>,
}

impl fmt::Debug for RingMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RingMatrix({}x{})", self.rows, self.cols)
    }
}

impl RingMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<RingValue>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(RingMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        RingMatrix { rows, cols, data: vec![RingValue::ZERO; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = RingMatrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = RingValue::ONE;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> RingValue) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        RingMatrix { rows, cols, data }
    }

    pub fn from_i64(rows: usize, cols: usize, values: &[i64]) -> Result<Self> {
        RingMatrix::new(rows, cols, values.iter().map(|&v| RingValue::from_i64(v)).collect())
    }

    pub fn column(values: Vec<RingValue>) -> Self {
        RingMatrix { rows: values.len(), cols: 1, data: values }
    }

    pub fn row_vector(values: Vec<RingValue>) -> Self {
        RingMatrix { rows: 1, cols: values.len(), data: values }
    }

    pub fn encode(codec: &FixedPointCodec, rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        RingMatrix::new(rows, cols, codec.encode_slice(values)?)
    }

    pub fn decode(&self, codec: &FixedPointCodec) -> Vec<f64> {
        codec.decode_slice(&self.data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[RingValue] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [RingValue] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<RingValue> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> RingValue {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: RingValue) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[RingValue] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [RingValue] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Same data viewed with a different shape.
    pub fn reshape(self, rows: usize, cols: usize) -> Result<Self> {
        RingMatrix::new(rows, cols, self.data)
    }

    pub fn transpose(&self) -> RingMatrix {
        let mut out = RingMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    fn check_same_shape(&self, other: &RingMatrix, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &RingMatrix) -> Result<RingMatrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &RingMatrix) -> Result<RingMatrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &RingMatrix) -> Result<RingMatrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    fn zip_with(
        &self,
        other: &RingMatrix,
        what: &str,
        f: impl Fn(RingValue, RingValue) -> RingValue,
    ) -> Result<RingMatrix> {
        self.check_same_shape(other, what)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(RingMatrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn add_assign(&mut self, other: &RingMatrix) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn neg(&self) -> RingMatrix {
        self.map(|v| -v)
    }

    pub fn scale(&self, c: RingValue) -> RingMatrix {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(RingValue) -> RingValue) -> RingMatrix {
        RingMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn select_rows(&self, idx: &[usize]) -> RingMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        RingMatrix { rows: idx.len(), cols: self.cols, data }
    }

    pub fn select_cols(&self, idx: &[usize]) -> RingMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.rows);
        for i in 0..self.rows {
            let row = self.row(i);
            data.extend(idx.iter().map(|&j| row[j]));
        }
        RingMatrix { rows: self.rows, cols: idx.len(), data }
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&RingMatrix]) -> Result<RingMatrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(Error::shape(format!("vstack: {} vs {} columns", m.cols, cols)));
            }
            rows += m.rows;
            data.extend_from_slice(&m.data);
        }
        Ok(RingMatrix { rows, cols, data })
    }

    /// Ring matrix product. Dispatches to the parallel kernel when the
    /// `parallel` feature is enabled and the product is large enough to pay for
    /// the fork.
    pub fn matmul(&self, other: &RingMatrix) -> Result<RingMatrix> {
        self.check_inner(other)?;
        #[cfg(feature = "parallel")]
        {
            if self.rows * self.cols * other.cols >= PARALLEL_MATMUL_THRESHOLD && self.rows > 1 {
                return Ok(self.matmul_parallel_unchecked(other));
            }
        }
        Ok(self.matmul_sequential_unchecked(other))
    }

    pub fn matmul_sequential(&self, other: &RingMatrix) -> Result<RingMatrix> {
        self.check_inner(other)?;
        Ok(self.matmul_sequential_unchecked(other))
    }

    #[cfg(feature = "parallel")]
    pub fn matmul_parallel(&self, other: &RingMatrix) -> Result<RingMatrix> {
        self.check_inner(other)?;
        Ok(self.matmul_parallel_unchecked(other))
    }

    fn check_inner(&self, other: &RingMatrix) -> Result<()> {
        if self.cols != other.rows {
            return Err(Error::shape(format!(
                "matmul: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    fn matmul_sequential_unchecked(&self, other: &RingMatrix) -> RingMatrix {
        let mut out = RingMatrix::zeros(self.rows, other.cols);
        if other.cols == 0 {
            return out;
        }
        for (i, out_row) in out.data.chunks_mut(other.cols).enumerate() {
            matmul_row(self.row(i), other, out_row);
        }
        out
    }

    #[cfg(feature = "parallel")]
    fn matmul_parallel_unchecked(&self, other: &RingMatrix) -> RingMatrix {
        use rayon::prelude::*;
        let mut out = RingMatrix::zeros(self.rows, other.cols);
        if other.cols == 0 {
            return out;
        }
        out.data
            .par_chunks_mut(other.cols)
            .enumerate()
            .for_each(|(i, out_row)| matmul_row(self.row(i), other, out_row));
        out
    }
}

#[cfg(feature = "parallel")]
const PARALLEL_MATMUL_THRESHOLD: usize = 1 << 16;

#[inline]
fn matmul_row(lhs_row: &[RingValue], rhs: &RingMatrix, out_row: &mut [RingValue]) {
    for (k, &a) in lhs_row.iter().enumerate() {
        if a.0 == 0 {
            continue;
        }
        for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
            o.0 = o.0.wrapping_add(a.0.wrapping_mul(b.0));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn encode_examples() {
        let c = FixedPointCodec::default();
        assert_eq!(c.encode(1.5).unwrap(), RingValue(98304));
        assert_eq!(c.encode(0.0).unwrap(), RingValue(0));
        assert_eq!(c.encode(-1.0).unwrap(), RingValue(0u64.wrapping_sub(65536)));
    }

    #[test]
    fn decode_examples() {
        let c = FixedPointCodec::default();
        assert_eq!(c.decode(RingValue(98304)), 1.5);
        assert_eq!(c.decode(RingValue(0u64.wrapping_sub(65536))), -1.0);
        let pi = c.decode(c.encode(std::f64::consts::PI).unwrap());
        assert!((pi - std::f64::consts::PI).abs() <= 2f64.powi(-16));
    }

    #[test]
    fn encode_rejects_out_of_range() {
        let c = FixedPointCodec::default();
        assert!(matches!(c.encode(c.bound()), Err(Error::Range { .. })));
        assert!(matches!(c.encode(-c.bound() * 2.0), Err(Error::Range { .. })));
        assert!(c.encode(f64::NAN).is_err());
        let small = FixedPointCodec::new(16, 8).unwrap();
        assert!(small.encode(127.9).is_ok());
        assert!(small.encode(128.0).is_err());
    }

    #[test]
    fn arith_examples() {
        let c = FixedPointCodec::default();
        assert_eq!(ring_arith(RingValue(u64::MAX), RingValue(1), RingOp::Add), RingValue(0));
        let prod = ring_arith(c.encode(2.0).unwrap(), c.encode(3.0).unwrap(), RingOp::Mul);
        assert_eq!(c.truncate(prod), c.encode(6.0).unwrap());
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x = RingValue(rng.random());
            assert_eq!(ring_arith(x, x, RingOp::Sub), RingValue::ZERO);
            assert_eq!(x + ring_arith(x, RingValue::ZERO, RingOp::Neg), RingValue::ZERO);
        }
    }

    #[test]
    fn narrow_ring_sign_extension() {
        let c = FixedPointCodec::new(32, 8).unwrap();
        let v = c.encode(-2.5).unwrap();
        assert_eq!(v.0 >> 32, 0);
        assert_eq!(c.decode(v), -2.5);
        // garbage above bit k is ignored
        assert_eq!(c.decode(RingValue(v.0 | (0xdead << 40))), -2.5);
        assert_eq!(c.bytes_per_element(), 4);
    }

    #[test]
    fn roundtrip_error_bound_on_random_reals() {
        let c = FixedPointCodec::default();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let r: f64 = rng.random_range(-1e6..1e6);
            let back = c.decode(c.encode(r).unwrap());
            assert!((back - r).abs() <= 2f64.powi(-16), "{r} -> {back}");
        }
    }

    #[test]
    fn matmul_small() {
        let a = RingMatrix::from_i64(2, 3, &[1, 2, 3, 4, 5, 6]).unwrap();
        let b = RingMatrix::from_i64(3, 2, &[7, 8, 9, 10, 11, 12]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c, RingMatrix::from_i64(2, 2, &[58, 64, 139, 154]).unwrap());
        assert!(a.matmul(&a).is_err());
        assert_eq!(a.transpose().transpose(), a);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_and_sequential_kernels_agree() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let a = RingMatrix::from_fn(70, 90, |_, _| RingValue(rng.random()));
        let b = RingMatrix::from_fn(90, 40, |_, _| RingValue(rng.random()));
        assert_eq!(a.matmul_parallel(&b).unwrap(), a.matmul_sequential(&b).unwrap());
    }

    proptest! {
        #[test]
        fn add_commutes_and_mul_distributes(a: u64, b: u64, c: u64) {
            let (a, b, c) = (RingValue(a), RingValue(b), RingValue(c));
            prop_assert_eq!(a + b, b + a);
            prop_assert_eq!(a * (b + c), a * b + a * c);
        }

        #[test]
        fn negation_is_symmetric(r in -1e9f64..1e9) {
            let c = FixedPointCodec::default();
            prop_assert_eq!(c.encode(-r).unwrap(), -c.encode(r).unwrap());
        }
    }
}
