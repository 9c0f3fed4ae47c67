//! Sparsity-aware secure products.
//!
//! The predictor's 0/1 output is shuffled before it is opened, so the parties
//! learn how many neurons fire but not which ones. Everything downstream then
//! works in the shuffled order: weights were permuted offline to match, and
//! each party can index its own share locally.
//!
//! Two products exploit the revealed pattern:
//! * SOMM (output mask known): group the nonzero outputs into connected
//!   components of the row/column bipartite graph and run one small dense
//!   product per component, so every needed row of X and column of Y is
//!   masked exactly once.
//! * SIMM (input mask known): multiply column-by-row, gathering the nonzeros
//!   of each column of X and pairing them with the matching row of Y, which
//!   again is masked once.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::protocols::{MatmulJob, Session};
use crate::ring::{RingMatrix, RingValue};
use crate::sharing::{Order, ShareMatrix};
use crate::transport::Envelope;

/// Default δ of the flip-count mechanism.
pub const DP_DELTA: f64 = 1.0 / (1u64 << 30) as f64;

/// Public 0/1 pattern plus the permutation state of both axes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparsityMask {
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
    pub row_order: Order,
    pub col_order: Order,
}

impl SparsityMask {
    pub fn new(rows: usize, cols: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::shape(format!("{} bits for a {rows}x{cols} mask", bits.len())));
        }
        if let Some(pos) = bits.iter().position(|&b| b > 1) {
            return Err(Error::NonBinary { position: pos, value: bits[pos] as u64 });
        }
        Ok(SparsityMask { rows, cols, bits, row_order: Order::Original, col_order: Order::Original })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let bits = (0..rows * cols).map(|k| f(k / cols, k % cols) as u8).collect();
        SparsityMask { rows, cols, bits, row_order: Order::Original, col_order: Order::Original }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| false)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| true)
    }

    /// Mask with the given `(row, col)` positions set.
    pub fn from_positions(rows: usize, cols: usize, positions: &[(usize, usize)]) -> Result<Self> {
        let mut m = Self::zeros(rows, cols);
        for &(i, j) in positions {
            if i >= rows || j >= cols {
                return Err(Error::shape(format!("position ({i},{j}) outside {rows}x{cols}")));
            }
            m.bits[i * cols + j] = 1;
        }
        Ok(m)
    }

    /// Every row repeats the same column pattern.
    pub fn from_columns(rows: usize, active: &[bool]) -> Self {
        Self::from_fn(rows, active.len(), |_, j| active[j])
    }

    pub fn with_orders(mut self, row_order: Order, col_order: Order) -> Self {
        self.row_order = row_order;
        self.col_order = col_order;
        self
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

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j] == 1
    }

    pub fn set(&mut self, i: usize, j: usize, on: bool) {
        self.bits[i * self.cols + j] = on as u8;
    }

    pub fn nnz(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    /// Fraction of zero entries.
    pub fn sparsity(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        1.0 - self.nnz() as f64 / self.bits.len() as f64
    }

    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let cols = self.cols;
        self.bits.iter().enumerate().filter(|(_, &b)| b == 1).map(move |(k, _)| (k / cols, k % cols))
    }

    /// Columns with at least one set bit.
    pub fn nonzero_cols(&self) -> Vec<usize> {
        (0..self.cols).filter(|&j| (0..self.rows).any(|i| self.get(i, j))).collect()
    }

    pub fn transpose(&self) -> SparsityMask {
        SparsityMask {
            rows: self.cols,
            cols: self.rows,
            bits: (0..self.rows * self.cols).map(|k| self.bits[(k % self.rows) * self.cols + k / self.rows]).collect(),
            row_order: self.col_order,
            col_order: self.row_order,
        }
    }

    pub fn to_ring(&self) -> RingMatrix {
        RingMatrix::from_fn(self.rows, self.cols, |i, j| RingValue(self.get(i, j) as u64))
    }

    /// Row-major `0`/`1` text, one line per row.
    pub fn dump(&self) -> String {
        let mut out = String::with_capacity(self.rows * (self.cols + 1));
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.push(if self.get(i, j) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    /// Inverse of [`SparsityMask::dump`]; blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        let cols = lines.first().map_or(0, |l| l.len());
        let mut bits = Vec::with_capacity(lines.len() * cols);
        for (i, line) in lines.iter().enumerate() {
            if line.len() != cols {
                return Err(Error::Config(format!("mask line {}: expected {cols} columns", i + 1)));
            }
            for (j, c) in line.chars().enumerate() {
                match c {
                    '0' => bits.push(0),
                    '1' => bits.push(1),
                    _ => return Err(Error::Config(format!("mask line {}, column {}: '{c}'", i + 1, j + 1))),
                }
            }
        }
        SparsityMask::new(lines.len(), cols, bits)
    }
}

/// Shuffle the rows of a shared 0/1 matrix and open it. Only the count of ones
/// per column is meaningful to the parties afterwards.
pub fn reveal_shuffled_mask(
    session: &mut Session,
    s: &ShareMatrix,
    corr: &crate::dealer::ShuffleCorrelation,
) -> Result<SparsityMask> {
    let shuffled = session.pi_shuffle(s, corr)?;
    let opened = session.open(&shuffled)?;
    let mut bits = Vec::with_capacity(opened.len());
    for (pos, v) in opened.data().iter().enumerate() {
        match v.0 {
            0 | 1 => bits.push(v.0 as u8),
            value => return Err(Error::NonBinary { position: pos, value }),
        }
    }
    Ok(SparsityMask::new(opened.rows(), opened.cols(), bits)?.with_orders(shuffled.row_order, shuffled.col_order))
}

/// Keep the rows of `x` whose bit is set in the column-vector mask.
pub fn shuffle_index_rows(x: &ShareMatrix, mask: &SparsityMask) -> Result<ShareMatrix> {
    if mask.cols() != 1 || mask.rows() != x.rows() {
        return Err(Error::shape(format!("row index mask {:?} for {} rows", mask.shape(), x.rows())));
    }
    if mask.row_order != x.row_order {
        return Err(Error::OrderMismatch(format!("mask rows {:?}, data rows {:?}", mask.row_order, x.row_order)));
    }
    let idx: Vec<usize> = (0..mask.rows()).filter(|&i| mask.get(i, 0)).collect();
    Ok(x.select_rows(&idx))
}

/// Keep the columns of `x` whose bit is set in the row-vector mask.
pub fn shuffle_index_cols(x: &ShareMatrix, mask: &SparsityMask) -> Result<ShareMatrix> {
    Ok(shuffle_index_rows(&x.transpose(), &mask.transpose())?.transpose())
}

/// One connected component of the output pattern.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
}

impl Component {
    pub fn nodes(&self) -> usize {
        self.rows.len() + self.cols.len()
    }

    pub fn dot_products(&self) -> usize {
        self.rows.len() * self.cols.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct BipartitePartition {
    pub components: Vec<Component>,
}

impl BipartitePartition {
    /// Σ (|rows| + |cols|) over components.
    pub fn total_nodes(&self) -> usize {
        self.components.iter().map(Component::nodes).sum()
    }

    pub fn dot_products(&self) -> usize {
        self.components.iter().map(Component::dot_products).sum()
    }
}

/// Connected components of the bipartite graph whose edges are the set bits,
/// ordered by lowest row, with sorted index sets.
pub fn partition_components(mask: &SparsityMask) -> BipartitePartition {
    let (m, p) = mask.shape();
    let mut row_adj: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut col_adj: Vec<Vec<usize>> = vec![Vec::new(); p];
    for (i, j) in mask.positions() {
        row_adj[i].push(j);
        col_adj[j].push(i);
    }
    let mut row_seen = vec![false; m];
    let mut col_seen = vec![false; p];
    let mut components = Vec::new();
    // Node ids: rows are 0..m, columns are m..m+p.
    let mut stack = Vec::new();
    for start in 0..m {
        if row_seen[start] || row_adj[start].is_empty() {
            continue;
        }
        let (mut rows, mut cols) = (Vec::new(), Vec::new());
        row_seen[start] = true;
        stack.push(start);
        while let Some(node) = stack.pop() {
            if node < m {
                rows.push(node);
                for &j in &row_adj[node] {
                    if !col_seen[j] {
                        col_seen[j] = true;
                        stack.push(m + j);
                    }
                }
            } else {
                let j = node - m;
                cols.push(j);
                for &i in &col_adj[j] {
                    if !row_seen[i] {
                        row_seen[i] = true;
                        stack.push(i);
                    }
                }
            }
        }
        rows.sort_unstable();
        cols.sort_unstable();
        let edges = rows.iter().flat_map(|&i| row_adj[i].iter().map(move |&j| (i, j))).collect();
        components.push(Component { rows, cols, edges });
    }
    BipartitePartition { components }
}

/// Phase labels for the rows of X and columns of Y in a SOMM call, for
/// splitting its traffic across ledger phases.
#[derive(Clone, Debug)]
pub struct Attribution {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
}

fn check_somm_inputs(x: &ShareMatrix, y: &ShareMatrix, mask: &SparsityMask) -> Result<()> {
    if x.cols() != y.rows() || mask.shape() != (x.rows(), y.cols()) {
        return Err(Error::shape(format!(
            "SOMM of {:?} by {:?} with a {:?} output mask",
            x.shape(),
            y.shape(),
            mask.shape()
        )));
    }
    if x.col_order != y.row_order {
        return Err(Error::OrderMismatch("inner dimensions are in different orders".into()));
    }
    if mask.row_order != x.row_order || mask.col_order != y.col_order {
        return Err(Error::OrderMismatch(format!(
            "mask is ({:?}, {:?}) but operands are ({:?}, {:?})",
            mask.row_order, mask.col_order, x.row_order, y.col_order
        )));
    }
    Ok(())
}

/// Secure product that only computes the outputs set in `mask`; every other
/// output is an exact zero on both shares.
pub fn pi_somm(session: &mut Session, x: &ShareMatrix, y: &ShareMatrix, mask: &SparsityMask) -> Result<ShareMatrix> {
    pi_somm_attributed(session, x, y, mask, None)
}

pub fn pi_somm_attributed(
    session: &mut Session,
    x: &ShareMatrix,
    y: &ShareMatrix,
    mask: &SparsityMask,
    attribution: Option<&Attribution>,
) -> Result<ShareMatrix> {
    check_somm_inputs(x, y, mask)?;
    let partition = partition_components(mask);
    let n = x.cols();
    let subs: Vec<(RingMatrix, RingMatrix)> = partition
        .components
        .iter()
        .map(|c| (x.values.select_rows(&c.rows), y.values.select_cols(&c.cols)))
        .collect();
    let jobs: Vec<MatmulJob<'_>> = subs.iter().map(|(a, b)| (a, b)).collect();

    let env = attribution.map(|attr| {
        let mut env = Envelope::new("somm");
        let mut phases = Vec::new();
        for c in &partition.components {
            for group in group_by_label(c.rows.iter().map(|&i| attr.rows[i].as_str())) {
                env = env.segment("rows", group.1 * n);
                phases.push(group.0.to_string());
            }
            for group in group_by_label(c.cols.iter().map(|&j| attr.cols[j].as_str())) {
                env = env.segment("cols", group.1 * n);
                phases.push(group.0.to_string());
            }
        }
        env.phases = Some(phases);
        env
    });
    let blocks = session.pi_matmul_batch(&jobs, env)?;

    // Merge: scatter block entries that are set; everything else stays zero.
    let mut z = RingMatrix::zeros(mask.rows(), mask.cols());
    for (c, block) in partition.components.iter().zip(&blocks) {
        for (a, &i) in c.rows.iter().enumerate() {
            for (b, &j) in c.cols.iter().enumerate() {
                if mask.get(i, j) {
                    z.set(i, j, block.get(a, b));
                }
            }
        }
    }
    Ok(ShareMatrix { party: session.party(), values: z, row_order: x.row_order, col_order: y.col_order })
}

/// Count consecutive labels; the counts are what matters for attribution.
fn group_by_label<'a>(labels: impl Iterator<Item = &'a str>) -> Vec<(&'a str, usize)> {
    let mut out: Vec<(&str, usize)> = Vec::new();
    for l in labels {
        match out.iter_mut().find(|(k, _)| *k == l) {
            Some(entry) => entry.1 += 1,
            None => out.push((l, 1)),
        }
    }
    out
}

/// Per nonzero column `j` of the input pattern, the rows set in it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColumnGather {
    pub columns: Vec<(usize, Vec<usize>)>,
}

impl ColumnGather {
    pub fn of(mask: &SparsityMask) -> Self {
        let mut columns: Vec<(usize, Vec<usize>)> = Vec::new();
        for j in 0..mask.cols() {
            let rows: Vec<usize> = (0..mask.rows()).filter(|&i| mask.get(i, j)).collect();
            if !rows.is_empty() {
                columns.push((j, rows));
            }
        }
        ColumnGather { columns }
    }

    pub fn nnz(&self) -> usize {
        self.columns.iter().map(|(_, r)| r.len()).sum()
    }
}

/// Secure product with a sparse left operand whose pattern is `mask`.
/// Entries of X outside the mask must be zero shares on both sides.
pub fn pi_simm(session: &mut Session, x: &ShareMatrix, y: &ShareMatrix, mask: &SparsityMask) -> Result<ShareMatrix> {
    if x.cols() != y.rows() || mask.shape() != x.shape() {
        return Err(Error::shape(format!(
            "SIMM of {:?} by {:?} with a {:?} input mask",
            x.shape(),
            y.shape(),
            mask.shape()
        )));
    }
    if x.col_order != y.row_order || mask.row_order != x.row_order || mask.col_order != x.col_order {
        return Err(Error::OrderMismatch("SIMM operands and mask disagree on permutation state".into()));
    }
    let gather = ColumnGather::of(mask);
    let p = y.cols();
    let parts: Vec<(RingMatrix, RingMatrix)> = gather
        .columns
        .iter()
        .map(|(j, rows)| {
            let col = RingMatrix::column(rows.iter().map(|&i| x.values.get(i, *j)).collect());
            let row = RingMatrix::row_vector(y.values.row(*j).to_vec());
            (col, row)
        })
        .collect();
    let jobs: Vec<MatmulJob<'_>> = parts.iter().map(|(a, b)| (a, b)).collect();
    let mut env = Envelope::new("simm");
    for (j, rows) in &gather.columns {
        env = env.segment(format!("x:col{j}"), rows.len()).segment(format!("y:row{j}"), p);
    }
    let outer = session.pi_matmul_batch(&jobs, Some(env))?;

    // Merge & sum into the rows each gathered entry came from.
    let mut z = RingMatrix::zeros(x.rows(), p);
    for ((_, rows), prod) in gather.columns.iter().zip(&outer) {
        for (a, &i) in rows.iter().enumerate() {
            for (dst, &v) in z.row_mut(i).iter_mut().zip(prod.row(a)) {
                *dst += v;
            }
        }
    }
    Ok(ShareMatrix { party: session.party(), values: z, row_order: x.row_order, col_order: y.col_order })
}

/// Baseline sparse product: one inner product per set output, each masking
/// its full row of X and column of Y again.
pub fn pi_spgemm(session: &mut Session, x: &ShareMatrix, y: &ShareMatrix, mask: &SparsityMask) -> Result<ShareMatrix> {
    check_somm_inputs(x, y, mask)?;
    let positions: Vec<(usize, usize)> = mask.positions().collect();
    let parts: Vec<(RingMatrix, RingMatrix)> = positions
        .iter()
        .map(|&(i, j)| (x.values.select_rows(&[i]), y.values.select_cols(&[j])))
        .collect();
    let jobs: Vec<MatmulJob<'_>> = parts.iter().map(|(a, b)| (a, b)).collect();
    let dots = session.pi_matmul_batch(&jobs, None)?;
    let mut z = RingMatrix::zeros(mask.rows(), mask.cols());
    for (&(i, j), d) in positions.iter().zip(&dots) {
        z.set(i, j, d.get(0, 0));
    }
    Ok(ShareMatrix { party: session.party(), values: z, row_order: x.row_order, col_order: y.col_order })
}

/// Baseline product with a sparse left operand: every output entry is its
/// own inner product over the nonzeros of its row.
pub fn pi_spgemm_input(session: &mut Session, x: &ShareMatrix, y: &ShareMatrix, mask: &SparsityMask) -> Result<ShareMatrix> {
    if x.cols() != y.rows() || mask.shape() != x.shape() {
        return Err(Error::shape(format!("sparse-input product of {:?} by {:?}", x.shape(), y.shape())));
    }
    if x.col_order != y.row_order || mask.row_order != x.row_order || mask.col_order != x.col_order {
        return Err(Error::OrderMismatch("sparse-input operands and mask disagree on permutation state".into()));
    }
    let p = y.cols();
    let mut parts: Vec<(usize, usize, RingMatrix, RingMatrix)> = Vec::new();
    for i in 0..mask.rows() {
        let nz: Vec<usize> = (0..mask.cols()).filter(|&j| mask.get(i, j)).collect();
        if nz.is_empty() {
            continue;
        }
        let xi = x.values.select_rows(&[i]).select_cols(&nz);
        let ys = y.values.select_rows(&nz);
        for j in 0..p {
            parts.push((i, j, xi.clone(), ys.select_cols(&[j])));
        }
    }
    let jobs: Vec<MatmulJob<'_>> = parts.iter().map(|(_, _, a, b)| (a, b)).collect();
    let dots = session.pi_matmul_batch(&jobs, None)?;
    let mut z = RingMatrix::zeros(x.rows(), p);
    for ((i, j, _, _), d) in parts.iter().zip(&dots) {
        z.set(*i, *j, d.get(0, 0));
    }
    Ok(ShareMatrix { party: session.party(), values: z, row_order: x.row_order, col_order: y.col_order })
}

/// Randomly turn some zeros of a shared 0/1 matrix into ones, row by row, so
/// the revealed count of ones is differentially private. Ones never become
/// zeros. An infinite `epsilon` disables the mechanism.
pub fn apply_dp_perturbation(session: &mut Session, s: &ShareMatrix, epsilon: f64) -> Result<ShareMatrix> {
    if epsilon.is_infinite() {
        return Ok(s.clone());
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Config(format!("privacy budget must be positive, got {epsilon}")));
    }
    let (rows, cols) = s.shape();
    let mut flips = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        flips.extend(session.dp_flips(cols, epsilon, DP_DELTA)?.0);
    }
    // s + p − s·p is the OR of two bits.
    let both = session.pi_hadamard(s.values.data(), &flips)?;
    let out: Vec<RingValue> =
        s.values.data().iter().zip(&flips).zip(&both).map(|((&a, &p), &ap)| a + p - ap).collect();
    Ok(s.map_values(RingMatrix::new(rows, cols, out)?))
}

/// Analytical element counts (both parties together), for comparing backends
/// without executing them.
pub mod cost {
    use super::{partition_components, ColumnGather, SparsityMask};

    /// Dense Beaver product of `m×n` by `n×p`.
    pub fn gemm(m: usize, n: usize, p: usize) -> u64 {
        2 * (m * n + n * p) as u64
    }

    /// SOMM with inner dimension `n`.
    pub fn somm(mask: &SparsityMask, n: usize) -> u64 {
        2 * (n * partition_components(mask).total_nodes()) as u64
    }

    /// SIMM with output width `p`.
    pub fn simm(mask: &SparsityMask, p: usize) -> u64 {
        let g = ColumnGather::of(mask);
        2 * (g.nnz() + g.columns.len() * p) as u64
    }

    /// Per-output inner products with inner dimension `n`.
    pub fn spgemm(mask: &SparsityMask, n: usize) -> u64 {
        4 * (n * mask.nnz()) as u64
    }

    /// Per-output inner products with a sparse left operand and output
    /// width `p`.
    pub fn spgemm_input(mask: &SparsityMask, p: usize) -> u64 {
        4 * (mask.nnz() * p) as u64
    }

    /// SOMM on a mask where each of `m` rows sets the same `k` of `p` columns.
    pub fn somm_columns(m: usize, n: usize, k: usize) -> u64 {
        if k == 0 || m == 0 {
            0
        } else {
            2 * (n * (m + k)) as u64
        }
    }

    /// SpGEMM on the same column-structured mask.
    pub fn spgemm_columns(m: usize, n: usize, k: usize) -> u64 {
        4 * (n * m * k) as u64
    }

    /// Shuffle-based indexing of an `n`-vector: shuffle the predicate bits and
    /// the data, both parties sending `n` elements each time.
    pub fn shuffle_index(n: usize) -> u64 {
        4 * n as u64
    }

    /// Secure indexing without shuffling, selecting `m` of `n` entries with
    /// comparisons costing `c` elements each: `(m⌈log₂n⌉ + 2mn)c + 2mn`.
    pub fn classical_index(n: usize, m: usize, c: u64) -> u64 {
        if m == 0 || n == 0 {
            return 0;
        }
        let log = (usize::BITS - (n - 1).leading_zeros()) as u64;
        let (n, m) = (n as u64, m as u64);
        (m * log + 2 * m * n) * c + 2 * m * n
    }
}

pub use cost::classical_index as classical_index_cost;

/// Text summary of a partition, used in run artifacts.
pub fn describe_partition(p: &BipartitePartition) -> String {
    let mut s = String::new();
    for (t, c) in p.components.iter().enumerate() {
        let _ = writeln!(s, "{t}: rows {:?} cols {:?} edges {}", c.rows, c.cols, c.edges.len());
    }
    s
}
