//! Block-sparse symmetric matrices and their Cholesky factorization.
//!
//! Blocks correspond to graph variables (6×6 poses, 3×3 landmarks). The
//! factorization eliminates variables in a minimum-degree order computed on
//! the block adjacency graph; the elimination itself yields the symbolic
//! fill pattern, after which a right-looking numeric pass fills dense
//! per-column panels.

use std::collections::HashMap;

use nalgebra::{DMatrix, Dim, Matrix, RawStorage};

/// Symmetric matrix stored as dense diagonal blocks plus the strictly lower
/// off-diagonal blocks `(i, j)`, `i > j`.
#[derive(Clone, Debug)]
pub struct SymmetricBlockMatrix {
    dims: Vec<usize>,
    offsets: Vec<usize>,
    diag: Vec<DMatrix<f64>>,
    lower: HashMap<(usize, usize), DMatrix<f64>>,
}

impl SymmetricBlockMatrix {
    pub fn new(dims: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(dims.len());
        let mut acc = 0;
        for &d in &dims {
            offsets.push(acc);
            acc += d;
        }
        let diag = dims.iter().map(|&d| DMatrix::zeros(d, d)).collect();
        Self {
            dims,
            offsets,
            diag,
            lower: HashMap::new(),
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn scalar_dim(&self) -> usize {
        self.offsets.last().map_or(0, |o| o + self.dims[self.dims.len() - 1])
    }

    /// Accumulates `m` into block `(i, j)` (and implicitly its transpose).
    pub fn add_block<R: Dim, C: Dim, S: RawStorage<f64, R, C>>(&mut self, i: usize, j: usize, m: &Matrix<f64, R, C, S>) {
        debug_assert_eq!(m.nrows(), self.dims[i]);
        debug_assert_eq!(m.ncols(), self.dims[j]);
        let (di, dj) = (self.dims[i], self.dims[j]);
        if i == j {
            let d = &mut self.diag[i];
            for c in 0..dj {
                for r in 0..di {
                    d[(r, c)] += m[(r, c)];
                }
            }
        } else if i > j {
            let b = self.lower.entry((i, j)).or_insert_with(|| DMatrix::zeros(di, dj));
            for c in 0..dj {
                for r in 0..di {
                    b[(r, c)] += m[(r, c)];
                }
            }
        } else {
            let b = self.lower.entry((j, i)).or_insert_with(|| DMatrix::zeros(dj, di));
            for c in 0..dj {
                for r in 0..di {
                    b[(c, r)] += m[(r, c)];
                }
            }
        }
    }

    pub fn add_to_diagonal(&mut self, lambda: f64) {
        for d in &mut self.diag {
            for k in 0..d.nrows() {
                d[(k, k)] += lambda;
            }
        }
    }

    /// Multiplies every diagonal entry by `1 + lambda`.
    pub fn scale_diagonal(&mut self, lambda: f64) {
        for d in &mut self.diag {
            for k in 0..d.nrows() {
                d[(k, k)] *= 1.0 + lambda;
            }
        }
    }

    /// Block `(i, j)` if stored (always present for `i == j`).
    pub fn block(&self, i: usize, j: usize) -> Option<DMatrix<f64>> {
        if i == j {
            Some(self.diag[i].clone())
        } else if i > j {
            self.lower.get(&(i, j)).cloned()
        } else {
            self.lower.get(&(j, i)).map(|b| b.transpose())
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.scalar_dim();
        let mut out = DMatrix::zeros(n, n);
        for (i, d) in self.diag.iter().enumerate() {
            let o = self.offsets[i];
            out.view_mut((o, o), (d.nrows(), d.ncols())).copy_from(d);
        }
        for (&(i, j), b) in &self.lower {
            let (oi, oj) = (self.offsets[i], self.offsets[j]);
            out.view_mut((oi, oj), (b.nrows(), b.ncols())).copy_from(b);
            out.view_mut((oj, oi), (b.ncols(), b.nrows())).copy_from(&b.transpose());
        }
        out
    }

    pub fn mul_vector(&self, x: &nalgebra::DVector<f64>) -> nalgebra::DVector<f64> {
        let mut y = nalgebra::DVector::zeros(x.len());
        for (i, d) in self.diag.iter().enumerate() {
            let o = self.offsets[i];
            let r = d * x.rows(o, d.ncols());
            let mut yi = y.rows_mut(o, d.nrows());
            yi += r;
        }
        for (&(i, j), b) in &self.lower {
            let (oi, oj) = (self.offsets[i], self.offsets[j]);
            let r1 = b * x.rows(oj, b.ncols());
            let r2 = b.transpose() * x.rows(oi, b.nrows());
            let mut yi = y.rows_mut(oi, b.nrows());
            yi += r1;
            let mut yj = y.rows_mut(oj, b.ncols());
            yj += r2;
        }
        y
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.dims.len()];
        for &(i, j) in self.lower.keys() {
            adj[i].push(j);
            adj[j].push(i);
        }
        for a in &mut adj {
            a.sort_unstable();
            a.dedup();
        }
        adj
    }
}

/// Elimination ordering strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Ordering {
    /// Greedy minimum degree on the block graph (ties by lowest index).
    #[default]
    MinimumDegree,
    /// Variables in index order.
    Natural,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FactorizationError {
    /// The pivot block of the given variable (block index) is not positive definite.
    NotPositiveDefinite(usize),
}

#[derive(Clone, Debug)]
struct Column {
    /// Positions (in elimination order) of the blocks below the diagonal.
    pattern: Vec<usize>,
    /// Row offset of each pattern block inside `panel`.
    row_offsets: Vec<usize>,
    /// `[L_kk; L_pk...]`, shape `(d_k + Σ d_p) × d_k`.
    panel: DMatrix<f64>,
}

/// Sparse block Cholesky factor `P A Pᵀ = L Lᵀ`.
#[derive(Clone, Debug)]
pub struct BlockCholesky {
    dims: Vec<usize>,
    offsets: Vec<usize>,
    order: Vec<usize>,
    columns: Vec<Column>,
    scalar_dim: usize,
}

fn merge_without(a: &[usize], b: &[usize], skip_a: usize, skip_b: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) if x < y => {
                i += 1;
                x
            }
            (Some(&x), Some(&y)) if x > y => {
                j += 1;
                y
            }
            (Some(&x), Some(_)) => {
                i += 1;
                j += 1;
                x
            }
            (Some(&x), None) => {
                i += 1;
                x
            }
            (None, Some(&y)) => {
                j += 1;
                y
            }
            (None, None) => unreachable!(),
        };
        if next != skip_a && next != skip_b {
            out.push(next);
        }
    }
    out
}

/// Returns the elimination order and, per eliminated variable, its
/// neighbours at elimination time (the symbolic column pattern).
fn symbolic(matrix: &SymmetricBlockMatrix, ordering: Ordering) -> (Vec<usize>, Vec<Vec<usize>>) {
    let n = matrix.num_blocks();
    let mut adj = matrix.adjacency();
    let mut eliminated = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut patterns = vec![Vec::new(); n];
    for step in 0..n {
        let v = match ordering {
            Ordering::Natural => step,
            Ordering::MinimumDegree => (0..n)
                .filter(|&v| !eliminated[v])
                .min_by_key(|&v| (adj[v].len(), v))
                .expect("remaining variable"),
        };
        eliminated[v] = true;
        order.push(v);
        let nbrs = std::mem::take(&mut adj[v]);
        for &u in &nbrs {
            let merged = merge_without(&adj[u], &nbrs, v, u);
            adj[u] = merged;
        }
        patterns[v] = nbrs;
    }
    (order, patterns)
}

impl BlockCholesky {
    pub fn factor(matrix: &SymmetricBlockMatrix) -> Result<Self, FactorizationError> {
        Self::factor_with(matrix, Ordering::MinimumDegree)
    }

    pub fn factor_with(matrix: &SymmetricBlockMatrix, ordering: Ordering) -> Result<Self, FactorizationError> {
        let n = matrix.num_blocks();
        let (order, var_patterns) = symbolic(matrix, ordering);
        let mut position = vec![0; n];
        for (k, &v) in order.iter().enumerate() {
            position[v] = k;
        }
        let dims = &matrix.dims;

        let mut columns: Vec<Column> = order
            .iter()
            .map(|&v| {
                let mut pattern: Vec<usize> = var_patterns[v].iter().map(|&u| position[u]).collect();
                pattern.sort_unstable();
                let dk = dims[v];
                let mut row_offsets = Vec::with_capacity(pattern.len());
                let mut rows = dk;
                for &p in &pattern {
                    row_offsets.push(rows);
                    rows += dims[order[p]];
                }
                let mut panel = DMatrix::zeros(rows, dk);
                panel.view_mut((0, 0), (dk, dk)).copy_from(&matrix.diag[v]);
                for (&p, &ro) in pattern.iter().zip(&row_offsets) {
                    let u = order[p];
                    if let Some(b) = matrix.block(u, v) {
                        panel.view_mut((ro, 0), (b.nrows(), dk)).copy_from(&b);
                    }
                }
                Column {
                    pattern,
                    row_offsets,
                    panel,
                }
            })
            .collect();

        for k in 0..n {
            let (done, rest) = columns.split_at_mut(k + 1);
            let col = &mut done[k];
            let v = order[k];
            let dk = dims[v];
            let diag = col.panel.view((0, 0), (dk, dk)).into_owned();
            let chol = nalgebra::Cholesky::new(diag).ok_or(FactorizationError::NotPositiveDefinite(v))?;
            let l = chol.l();
            // Each pivot is compared with its own original diagonal entry so
            // that badly scaled but well-posed blocks are accepted.
            if (0..dk).any(|i| !(l[(i, i)] * l[(i, i)] > 1e-12 * matrix.diag[v][(i, i)].abs())) {
                return Err(FactorizationError::NotPositiveDefinite(v));
            }
            col.panel.view_mut((0, 0), (dk, dk)).copy_from(&l);
            let rows = col.panel.nrows();
            if rows > dk {
                // below ← below · L⁻ᵀ
                let below_t = col.panel.view((dk, 0), (rows - dk, dk)).transpose();
                let solved = l.solve_lower_triangular(&below_t).expect("nonsingular pivot");
                col.panel.view_mut((dk, 0), (rows - dk, dk)).copy_from(&solved.transpose());
            }
            let col = &done[k];
            for (idx, &p) in col.pattern.iter().enumerate() {
                let start = col.row_offsets[idx];
                let dp = dims[order[p]];
                let lpk = col.panel.view((start, 0), (dp, dk));
                let tail = col.panel.view((start, 0), (rows - start, dk));
                let update = tail * lpk.transpose();
                let target = &mut rest[p - k - 1];
                {
                    let mut d = target.panel.view_mut((0, 0), (dp, dp));
                    d -= update.view((0, 0), (dp, dp));
                }
                for (jdx, &q) in col.pattern.iter().enumerate().skip(idx + 1) {
                    let src = col.row_offsets[jdx] - start;
                    let dq = dims[order[q]];
                    let slot = target
                        .pattern
                        .binary_search(&q)
                        .expect("elimination clique is contained in later pattern");
                    let dst = target.row_offsets[slot];
                    let mut t = target.panel.view_mut((dst, 0), (dq, dp));
                    t -= update.view((src, 0), (dq, dp));
                }
            }
        }

        Ok(Self {
            dims: matrix.dims.clone(),
            offsets: matrix.offsets.clone(),
            order,
            columns,
            scalar_dim: matrix.scalar_dim(),
        })
    }

    pub fn scalar_dim(&self) -> usize {
        self.scalar_dim
    }

    /// Number of stored scalar entries of `L` (diagonal blocks counted in full).
    pub fn factor_entries(&self) -> usize {
        self.columns.iter().map(|c| c.panel.len()).sum()
    }

    /// Solves `A X = B` in place; rows of `B` follow the block layout.
    pub fn solve_in_place(&self, b: &mut DMatrix<f64>) {
        let ncols = b.ncols();
        for (k, col) in self.columns.iter().enumerate() {
            let v = self.order[k];
            let (o, d) = (self.offsets[v], self.dims[v]);
            let l = col.panel.view((0, 0), (d, d));
            let mut y = b.view((o, 0), (d, ncols)).into_owned();
            l.solve_lower_triangular_mut(&mut y);
            b.view_mut((o, 0), (d, ncols)).copy_from(&y);
            for (&p, &ro) in col.pattern.iter().zip(&col.row_offsets) {
                let u = self.order[p];
                let (ou, du) = (self.offsets[u], self.dims[u]);
                let lpk = col.panel.view((ro, 0), (du, d));
                let mut target = b.view_mut((ou, 0), (du, ncols));
                target.gemm(-1.0, &lpk, &y, 1.0);
            }
        }
        for (k, col) in self.columns.iter().enumerate().rev() {
            let v = self.order[k];
            let (o, d) = (self.offsets[v], self.dims[v]);
            let mut x = b.view((o, 0), (d, ncols)).into_owned();
            for (&p, &ro) in col.pattern.iter().zip(&col.row_offsets) {
                let u = self.order[p];
                let (ou, du) = (self.offsets[u], self.dims[u]);
                let lpk = col.panel.view((ro, 0), (du, d));
                x.gemm_tr(-1.0, &lpk, &b.view((ou, 0), (du, ncols)), 1.0);
            }
            let l = col.panel.view((0, 0), (d, d));
            l.tr_solve_lower_triangular_mut(&mut x);
            b.view_mut((o, 0), (d, ncols)).copy_from(&x);
        }
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.solve_in_place(&mut x);
        x
    }

    /// Dense sub-block of `A⁻¹` over the given blocks, obtained by solving
    /// against the corresponding unit columns only.
    pub fn inverse_block(&self, blocks: &[usize]) -> DMatrix<f64> {
        let width: usize = blocks.iter().map(|&b| self.dims[b]).sum();
        let mut rhs = DMatrix::zeros(self.scalar_dim, width);
        let mut c = 0;
        for &blk in blocks {
            for k in 0..self.dims[blk] {
                rhs[(self.offsets[blk] + k, c)] = 1.0;
                c += 1;
            }
        }
        self.solve_in_place(&mut rhs);
        let mut out = DMatrix::zeros(width, width);
        let mut r = 0;
        for &blk in blocks {
            let d = self.dims[blk];
            out.view_mut((r, 0), (d, width))
                .copy_from(&rhs.view((self.offsets[blk], 0), (d, width)));
            r += d;
        }
        // Symmetrize away round-off.
        (&out + out.transpose()) * 0.5
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut impl Rng, dims: &[usize], density: f64) -> SymmetricBlockMatrix {
        let n = dims.len();
        let mut m = SymmetricBlockMatrix::new(dims.to_vec());
        // A = Σ Jᵀ J over random sparse "factors" touching 1-2 blocks, plus a ridge.
        for i in 0..n {
            for j in 0..=i {
                if i != j && rng.random::<f64>() > density {
                    continue;
                }
                let rows = 4;
                let ji = DMatrix::from_fn(rows, dims[i], |_, _| rng.random_range(-1.0..1.0));
                let jj = DMatrix::from_fn(rows, dims[j], |_, _| rng.random_range(-1.0..1.0));
                m.add_block(i, i, &(ji.transpose() * &ji));
                if i != j {
                    m.add_block(j, j, &(jj.transpose() * &jj));
                    m.add_block(i, j, &(ji.transpose() * &jj));
                }
            }
        }
        m.add_to_diagonal(0.1);
        m
    }

    #[test]
    fn solve_matches_dense_for_both_orderings() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..10 {
            let dims: Vec<usize> = (0..15).map(|_| if rng.random::<bool>() { 6 } else { 3 }).collect();
            let m = random_spd(&mut rng, &dims, 0.25);
            let dense = m.to_dense();
            let n = dense.nrows();
            let b = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
            let expect = dense.clone().cholesky().unwrap().solve(&b);
            for ordering in [Ordering::MinimumDegree, Ordering::Natural] {
                let f = BlockCholesky::factor_with(&m, ordering).unwrap();
                let x = f.solve(&b);
                assert!((&x - &expect).norm() < 1e-9 * expect.norm().max(1.0), "trial {trial} {ordering:?}");
            }
        }
    }

    #[test]
    fn inverse_block_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let dims = vec![6, 3, 3, 6, 3, 6, 3, 3];
        let m = random_spd(&mut rng, &dims, 0.4);
        let inv = m.to_dense().try_inverse().unwrap();
        let f = BlockCholesky::factor(&m).unwrap();
        let sel = [3usize, 1, 6];
        let got = f.inverse_block(&sel);
        let offs = m.offsets().to_vec();
        let mut r = 0;
        for &bi in &sel {
            let mut c = 0;
            for &bj in &sel {
                let want = inv.view((offs[bi], offs[bj]), (dims[bi], dims[bj]));
                let have = got.view((r, c), (dims[bi], dims[bj]));
                assert!((want - have).norm() < 1e-9);
                c += dims[bj];
            }
            r += dims[bi];
        }
    }

    #[test]
    fn chain_has_no_fill_under_minimum_degree() {
        let dims = vec![3; 50];
        let mut m = SymmetricBlockMatrix::new(dims);
        for i in 0..50 {
            m.add_block(i, i, &(DMatrix::<f64>::identity(3, 3) * 4.0));
            if i > 0 {
                m.add_block(i, i - 1, &(DMatrix::<f64>::identity(3, 3) * -1.0));
            }
        }
        let f = BlockCholesky::factor(&m).unwrap();
        assert_eq!(f.factor_entries(), 50 * 9 + 49 * 9);
    }

    #[test]
    fn singular_matrix_is_reported() {
        let mut m = SymmetricBlockMatrix::new(vec![3, 3]);
        let ones = DMatrix::from_element(3, 3, 1.0);
        m.add_block(0, 0, &ones);
        m.add_block(1, 1, &DMatrix::<f64>::identity(3, 3));
        assert!(matches!(BlockCholesky::factor(&m), Err(FactorizationError::NotPositiveDefinite(0))));
    }
}
