//! Block-sparse symmetric matrices, block Cholesky with a minimum-degree
//! ordering, and the Takahashi partial inverse on the filled pattern.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Symmetric matrix of `n x n` square blocks of size `b`, lower triangle stored.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSparseSym {
    n: usize,
    b: usize,
    diag: Vec<DMatrix<f64>>,
    /// `lower[j][i]` holds block `(i, j)` for `i > j`.
    lower: Vec<BTreeMap<usize, DMatrix<f64>>>,
}

impl BlockSparseSym {
    pub fn new(n: usize, b: usize) -> Self {
        Self {
            n,
            b,
            diag: vec![DMatrix::zeros(b, b); n],
            lower: vec![BTreeMap::new(); n],
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.n
    }

    pub fn block_dim(&self) -> usize {
        self.b
    }

    pub fn dim(&self) -> usize {
        self.n * self.b
    }

    /// Adds `m` to block `(i, j)`; the mirrored block is implied.
    pub fn add_block(&mut self, i: usize, j: usize, m: &DMatrix<f64>) {
        debug_assert_eq!(m.shape(), (self.b, self.b));
        if i == j {
            self.diag[i] += m;
            return;
        }
        let (r, c, mm) = if i > j { (i, j, m.clone()) } else { (j, i, m.transpose()) };
        self.lower[c]
            .entry(r)
            .and_modify(|x| *x += &mm)
            .or_insert(mm);
    }

    /// Creates the structural entry `(i, j)` without changing values.
    pub fn touch(&mut self, i: usize, j: usize) {
        if i != j {
            let (r, c) = if i > j { (i, j) } else { (j, i) };
            let b = self.b;
            self.lower[c].entry(r).or_insert_with(|| DMatrix::zeros(b, b));
        }
    }

    pub fn block(&self, i: usize, j: usize) -> Option<DMatrix<f64>> {
        if i == j {
            return Some(self.diag[i].clone());
        }
        if i > j {
            self.lower[j].get(&i).cloned()
        } else {
            self.lower[i].get(&j).map(|m| m.transpose())
        }
    }

    pub fn has_block(&self, i: usize, j: usize) -> bool {
        i == j || {
            let (r, c) = if i > j { (i, j) } else { (j, i) };
            self.lower[c].contains_key(&r)
        }
    }

    /// Off-diagonal block coordinates `(i, j)` with `i > j`.
    pub fn off_diagonal_pattern(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (j, col) in self.lower.iter().enumerate() {
            out.extend(col.keys().map(|&i| (i, j)));
        }
        out
    }

    /// `A + lambda * diag(A) + floor * I`.
    pub fn damped(&self, lambda: f64, floor: f64) -> Self {
        let mut out = self.clone();
        for d in &mut out.diag {
            for k in 0..self.b {
                d[(k, k)] += lambda * d[(k, k)].abs() + floor;
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let b = self.b;
        let mut m = DMatrix::zeros(self.dim(), self.dim());
        for j in 0..self.n {
            m.view_mut((j * b, j * b), (b, b)).copy_from(&self.diag[j]);
            for (&i, blk) in &self.lower[j] {
                m.view_mut((i * b, j * b), (b, b)).copy_from(blk);
                m.view_mut((j * b, i * b), (b, b)).copy_from(&blk.transpose());
            }
        }
        m
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let b = self.b;
        let mut y = DVector::zeros(self.dim());
        for j in 0..self.n {
            let xj = x.rows(j * b, b);
            let mut acc = &self.diag[j] * xj;
            for (&i, blk) in &self.lower[j] {
                acc += blk.transpose() * x.rows(i * b, b);
                let mut yi = y.rows_mut(i * b, b);
                yi += blk * xj;
            }
            let mut yj = y.rows_mut(j * b, b);
            yj += acc;
        }
        y
    }
}

/// Elimination order and filled column structure (in permuted indices).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Symbolic {
    /// `perm[p]` is the original block eliminated at position `p`.
    pub perm: Vec<usize>,
    /// `inv[orig]` is the elimination position of an original block.
    pub inv: Vec<usize>,
    /// Sorted below-diagonal rows of each column of the factor.
    pub structs: Vec<Vec<usize>>,
}

impl Symbolic {
    /// Minimum-degree elimination on the block graph (ties go to the smallest index).
    pub fn minimum_degree(a: &BlockSparseSym) -> Self {
        let n = a.num_blocks();
        let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for (i, j) in a.off_diagonal_pattern() {
            adj[i].insert(j);
            adj[j].insert(i);
        }
        let mut eliminated = vec![false; n];
        let mut perm = Vec::with_capacity(n);
        let mut neighbours_at_elim: Vec<Vec<usize>> = vec![Vec::new(); n];
        for _ in 0..n {
            let v = (0..n)
                .filter(|&v| !eliminated[v])
                .min_by_key(|&v| (adj[v].len(), v))
                .expect("at least one remaining block");
            let nbrs: Vec<usize> = adj[v].iter().copied().collect();
            for &a_ in &nbrs {
                adj[a_].remove(&v);
                for &b_ in &nbrs {
                    if a_ != b_ {
                        adj[a_].insert(b_);
                    }
                }
            }
            adj[v].clear();
            eliminated[v] = true;
            neighbours_at_elim[v] = nbrs;
            perm.push(v);
        }
        Self::from_parts(perm, neighbours_at_elim)
    }

    /// Elimination in the natural order, with fill computed from the
    /// elimination tree.
    pub fn natural(a: &BlockSparseSym) -> Self {
        let n = a.num_blocks();
        let mut structs: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for (i, j) in a.off_diagonal_pattern() {
            structs[j].insert(i);
        }
        for j in 0..n {
            if let Some(&parent) = structs[j].iter().next() {
                let rest: Vec<usize> = structs[j].iter().copied().filter(|&r| r != parent).collect();
                structs[parent].extend(rest);
            }
        }
        Self {
            perm: (0..n).collect(),
            inv: (0..n).collect(),
            structs: structs.into_iter().map(|s| s.into_iter().collect()).collect(),
        }
    }

    fn from_parts(perm: Vec<usize>, neighbours_at_elim: Vec<Vec<usize>>) -> Self {
        let n = perm.len();
        let mut inv = vec![0; n];
        for (p, &o) in perm.iter().enumerate() {
            inv[o] = p;
        }
        let structs = perm
            .iter()
            .map(|&o| {
                let mut s: Vec<usize> = neighbours_at_elim[o].iter().map(|&x| inv[x]).collect();
                s.sort_unstable();
                s
            })
            .collect();
        Self { perm, inv, structs }
    }

    pub fn num_blocks(&self) -> usize {
        self.perm.len()
    }

    fn position(&self, col: usize, row: usize) -> Option<usize> {
        self.structs[col].binary_search(&row).ok()
    }

    /// Number of stored off-diagonal blocks of the factor.
    pub fn fill(&self) -> usize {
        self.structs.iter().map(Vec::len).sum()
    }
}

/// Numeric block Cholesky factor `P A P^T = L L^T`.
#[derive(Debug, Clone)]
pub struct BlockCholesky {
    sym: Symbolic,
    b: usize,
    diag: Vec<DMatrix<f64>>,
    diag_inv: Vec<DMatrix<f64>>,
    /// `cols[j][t]` is `L(structs[j][t], j)`.
    cols: Vec<Vec<DMatrix<f64>>>,
}

impl BlockCholesky {
    pub fn factor(a: &BlockSparseSym) -> Result<Self> {
        Self::factor_with(a, Symbolic::minimum_degree(a))
    }

    pub fn factor_with(a: &BlockSparseSym, sym: Symbolic) -> Result<Self> {
        let n = a.num_blocks();
        let b = a.block_dim();
        let mut work_diag: Vec<DMatrix<f64>> = (0..n).map(|p| a.diag[sym.perm[p]].clone()).collect();
        let mut work_cols: Vec<Vec<DMatrix<f64>>> = (0..n)
            .map(|j| {
                sym.structs[j]
                    .iter()
                    .map(|&i| {
                        a.block(sym.perm[i], sym.perm[j])
                            .unwrap_or_else(|| DMatrix::zeros(b, b))
                    })
                    .collect()
            })
            .collect();
        let mut diag = Vec::with_capacity(n);
        let mut diag_inv = Vec::with_capacity(n);
        for j in 0..n {
            let d = std::mem::replace(&mut work_diag[j], DMatrix::zeros(0, 0));
            let d = (&d + d.transpose()) * 0.5;
            let chol = d
                .cholesky()
                .ok_or(Error::FactorizationFailure { block: sym.perm[j] })?;
            let l = chol.l();
            let l_inv = l
                .clone()
                .solve_lower_triangular(&DMatrix::identity(b, b))
                .ok_or(Error::FactorizationFailure { block: sym.perm[j] })?;
            let col: Vec<DMatrix<f64>> = std::mem::take(&mut work_cols[j])
                .into_iter()
                .map(|w| w * l_inv.transpose())
                .collect();
            let rows = sym.structs[j].clone();
            for (ta, &ia) in rows.iter().enumerate() {
                for (tb, &ib) in rows.iter().enumerate().skip(ta) {
                    let upd = &col[tb] * col[ta].transpose();
                    if ia == ib {
                        work_diag[ia] -= upd;
                    } else {
                        let pos = sym
                            .position(ia, ib)
                            .expect("filled pattern is closed under elimination");
                        work_cols[ia][pos] -= upd;
                    }
                }
            }
            diag.push(l);
            diag_inv.push(l_inv);
            work_cols[j] = col;
        }
        Ok(Self {
            sym,
            b,
            diag,
            diag_inv,
            cols: work_cols,
        })
    }

    pub fn symbolic(&self) -> &Symbolic {
        &self.sym
    }

    /// `ln|A|`.
    pub fn log_det(&self) -> f64 {
        2.0 * self
            .diag
            .iter()
            .map(|l| l.diagonal().iter().map(|d| d.ln()).sum::<f64>())
            .sum::<f64>()
    }

    /// Solves `A x = rhs`.
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let b = self.b;
        let n = self.sym.num_blocks();
        let mut y: Vec<DVector<f64>> = (0..n)
            .map(|p| rhs.rows(self.sym.perm[p] * b, b).into_owned())
            .collect();
        for j in 0..n {
            y[j] = &self.diag_inv[j] * &y[j];
            let yj = y[j].clone();
            for (t, &i) in self.sym.structs[j].iter().enumerate() {
                y[i] -= &self.cols[j][t] * &yj;
            }
        }
        for j in (0..n).rev() {
            let mut acc = y[j].clone();
            for (t, &i) in self.sym.structs[j].iter().enumerate() {
                acc -= self.cols[j][t].transpose() * &y[i];
            }
            y[j] = self.diag_inv[j].transpose() * acc;
        }
        let mut x = DVector::zeros(n * b);
        for p in 0..n {
            x.rows_mut(self.sym.perm[p] * b, b).copy_from(&y[p]);
        }
        x
    }

    /// Blocks of `A^{-1}` on the filled pattern of the factor.
    pub fn partial_inverse(&self) -> PartialInverse {
        let n = self.sym.num_blocks();
        let b = self.b;
        let mut out = PartialInverse {
            sym: self.sym.clone(),
            diag: vec![DMatrix::zeros(b, b); n],
            cols: self
                .sym
                .structs
                .iter()
                .map(|s| vec![DMatrix::zeros(b, b); s.len()])
                .collect(),
        };
        for j in (0..n).rev() {
            let rows = &self.sym.structs[j];
            let mut col = Vec::with_capacity(rows.len());
            for &k in rows {
                let mut acc = DMatrix::zeros(b, b);
                for (t, &i) in rows.iter().enumerate() {
                    acc += out.get_permuted(k, i) * &self.cols[j][t];
                }
                col.push(-acc * &self.diag_inv[j]);
            }
            let mut inner = self.diag_inv[j].clone();
            for (t, sig) in col.iter().enumerate() {
                inner -= self.cols[j][t].transpose() * sig;
            }
            let d = self.diag_inv[j].transpose() * inner;
            out.diag[j] = (&d + d.transpose()) * 0.5;
            out.cols[j] = col;
        }
        out
    }
}

/// Selected blocks of a sparse inverse.
#[derive(Debug, Clone)]
pub struct PartialInverse {
    sym: Symbolic,
    diag: Vec<DMatrix<f64>>,
    /// `cols[j][t]` is `Sigma(structs[j][t], j)` in permuted indices.
    cols: Vec<Vec<DMatrix<f64>>>,
}

impl PartialInverse {
    fn get_permuted(&self, i: usize, j: usize) -> DMatrix<f64> {
        if i == j {
            self.diag[i].clone()
        } else if i > j {
            self.cols[j][self.sym.position(j, i).expect("block on pattern")].clone()
        } else {
            self.cols[i][self.sym.position(i, j).expect("block on pattern")].transpose()
        }
    }

    /// Block `(i, j)` of the inverse in original indices.
    pub fn block(&self, i: usize, j: usize) -> Result<DMatrix<f64>> {
        let (pi, pj) = (self.sym.inv[i], self.sym.inv[j]);
        let present = pi == pj
            || if pi > pj {
                self.sym.position(pj, pi).is_some()
            } else {
                self.sym.position(pi, pj).is_some()
            };
        if !present {
            return Err(Error::MarginalUnavailable(i, j));
        }
        Ok(self.get_permuted(pi, pj))
    }

    pub fn has_block(&self, i: usize, j: usize) -> bool {
        self.block(i, j).is_ok()
    }

    /// Joint covariance of a set of original blocks, in the order given.
    pub fn joint(&self, idx: &[usize]) -> Result<DMatrix<f64>> {
        let b = self.diag.first().map_or(0, |d| d.nrows());
        let mut m = DMatrix::zeros(idx.len() * b, idx.len() * b);
        for (r, &i) in idx.iter().enumerate() {
            for (c, &j) in idx.iter().enumerate() {
                m.view_mut((r * b, c * b), (b, b)).copy_from(&self.block(i, j)?);
            }
        }
        Ok(m)
    }

    /// Pattern of stored blocks `(i, j)`, original indices, `i != j`.
    pub fn pattern(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (j, rows) in self.sym.structs.iter().enumerate() {
            for &i in rows {
                out.push((self.sym.perm[i], self.sym.perm[j]));
            }
        }
        out
    }
}
