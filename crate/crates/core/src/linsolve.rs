//! Direct linear algebra: a sparse LU with minimum-degree ordering and
//! partial pivoting for the saddle-point systems, a cyclic Jacobi
//! eigensolver for the small dense correlation matrices of the POD stage,
//! and dense helpers for the reduced online systems.
//!
//! Everything here is deterministic: orderings break ties by index, the
//! factorizations are single-threaded, and repeated solves of the same
//! system are bit-identical.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::assembly::SparseMatrix;

#[derive(Debug, Error)]
pub enum LinSolveError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("solver failure: {reason} (residual {residual:.3e})")]
    SolverFailure { reason: String, residual: f64 },
}

// ---------------------------------------------------------------------------
// dense helpers
// ---------------------------------------------------------------------------

/// Row-major dense matrix for the small systems of the offline/online stages.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    nrows: usize,
    ncols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        DenseMatrix {
            nrows,
            ncols,
            data: vec![0.0; nrows * ncols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(nrows * ncols);
        for r in rows {
            assert_eq!(r.len(), ncols);
            data.extend_from_slice(r);
        }
        DenseMatrix { nrows, ncols, data }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.nrows).map(|i| self[(i, j)]).collect()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        let mut y = vec![0.0; self.nrows];
        for i in 0..self.nrows {
            let row = &self.data[i * self.ncols..(i + 1) * self.ncols];
            y[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        y
    }

    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.ncols, other.nrows);
        let mut out = DenseMatrix::zeros(self.nrows, other.ncols);
        for i in 0..self.nrows {
            for k in 0..self.ncols {
                let aik = self[(i, k)];
                if aik == 0.0 {
                    continue;
                }
                for j in 0..other.ncols {
                    out[(i, j)] += aik * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.ncols, self.nrows);
        for i in 0..self.nrows {
            for j in 0..self.ncols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn symmetry_defect(&self) -> f64 {
        assert_eq!(self.nrows, self.ncols);
        let mut d = 0.0f64;
        for i in 0..self.nrows {
            for j in (i + 1)..self.ncols {
                d = d.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        d
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.ncols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.ncols + j]
    }
}

/// Dense LU with partial pivoting; solves A x = b for the small reduced
/// systems (r is at most a few hundred).
pub fn dense_solve(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>, LinSolveError> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(LinSolveError::Contract(format!(
            "dense_solve dimensions {}x{} with rhs {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    let mut lu = a.data.clone();
    let mut x = b.to_vec();
    let mut piv: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let mut best = k;
        let mut best_val = lu[piv[k] * n + k].abs();
        for r in (k + 1)..n {
            let v = lu[piv[r] * n + k].abs();
            if v > best_val {
                best_val = v;
                best = r;
            }
        }
        if best_val == 0.0 {
            return Err(LinSolveError::SolverFailure {
                reason: format!("zero pivot at dense column {k}"),
                residual: f64::INFINITY,
            });
        }
        piv.swap(k, best);
        let pk = piv[k];
        let diag = lu[pk * n + k];
        for r in (k + 1)..n {
            let pr = piv[r];
            let factor = lu[pr * n + k] / diag;
            lu[pr * n + k] = factor;
            for c in (k + 1)..n {
                lu[pr * n + c] -= factor * lu[pk * n + c];
            }
            x[pr] -= factor * x[pk];
        }
    }
    let mut out = vec![0.0; n];
    for k in (0..n).rev() {
        let pk = piv[k];
        let mut acc = x[pk];
        for c in (k + 1)..n {
            acc -= lu[pk * n + c] * out[c];
        }
        out[k] = acc / lu[pk * n + k];
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// symmetric eigensolver (cyclic Jacobi)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors as columns, matching `eigenvalues`.
    pub eigenvectors: DenseMatrix,
}

/// Cyclic Jacobi rotations to threshold 1e-14 * max|K|. Sign convention:
/// the largest-magnitude component of each eigenvector is positive;
/// eigenvalue ties keep the pre-sort (rotation) order.
pub fn sym_eig(k: &DenseMatrix) -> Result<EigenDecomposition, LinSolveError> {
    let n = k.nrows();
    if k.ncols() != n {
        return Err(LinSolveError::Contract("sym_eig needs a square matrix".into()));
    }
    let scale = k.max_abs();
    if k.symmetry_defect() > 1e-12 * scale.max(f64::MIN_POSITIVE) {
        return Err(LinSolveError::Contract(format!(
            "matrix is not symmetric (defect {:.3e}, scale {:.3e})",
            k.symmetry_defect(),
            scale
        )));
    }
    let mut a = k.clone();
    let mut v = DenseMatrix::identity(n);
    let tol = 1e-14 * scale.max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a[(p, q)].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= tol {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for i in 0..n {
                    let aip = a[(i, p)];
                    let aiq = a[(i, q)];
                    a[(i, p)] = c * aip - s * aiq;
                    a[(i, q)] = s * aip + c * aiq;
                }
                for j in 0..n {
                    let apj = a[(p, j)];
                    let aqj = a[(q, j)];
                    a[(p, j)] = c * apj - s * aqj;
                    a[(q, j)] = s * apj + c * aqj;
                }
                for i in 0..n {
                    let vip = v[(i, p)];
                    let viq = v[(i, q)];
                    v[(i, p)] = c * vip - s * viq;
                    v[(i, q)] = s * vip + c * viq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[(j, j)]
            .partial_cmp(&a[(i, i)])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut eigenvalues = Vec::with_capacity(n);
    let mut eigenvectors = DenseMatrix::zeros(n, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        eigenvalues.push(a[(old_j, old_j)]);
        // deterministic sign: largest-magnitude component positive
        let mut best = 0;
        let mut best_val = 0.0f64;
        for i in 0..n {
            if v[(i, old_j)].abs() > best_val {
                best_val = v[(i, old_j)].abs();
                best = i;
            }
        }
        let flip = if v[(best, old_j)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            eigenvectors[(i, new_j)] = flip * v[(i, old_j)];
        }
    }
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

// ---------------------------------------------------------------------------
// sparse LU with minimum-degree ordering and partial pivoting
// ---------------------------------------------------------------------------

/// Compressed sparse column view used by the factorization.
#[derive(Debug, Clone)]
pub struct Csc {
    pub n: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csc {
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        // sort by (col, row)
        triplets.sort_unstable_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
        let mut col_ptr = vec![0usize; n + 1];
        let mut row_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut last = None;
        for (r, c, v) in triplets {
            debug_assert!(r < n && c < n);
            if last == Some((c, r)) {
                *values.last_mut().unwrap() += v;
            } else {
                row_idx.push(r);
                values.push(v);
                col_ptr[c + 1] += 1;
                last = Some((c, r));
            }
        }
        for c in 0..n {
            col_ptr[c + 1] += col_ptr[c];
        }
        Csc {
            n,
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn col(&self, j: usize) -> (&[usize], &[f64]) {
        let range = self.col_ptr[j]..self.col_ptr[j + 1];
        (&self.row_idx[range.clone()], &self.values[range])
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for j in 0..self.n {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            for k in self.col_ptr[j]..self.col_ptr[j + 1] {
                y[self.row_idx[k]] += self.values[k] * xj;
            }
        }
        y
    }
}

/// Exact minimum-degree ordering on a structurally symmetric pattern,
/// maintained as a quotient graph (eliminated nodes become elements that are
/// absorbed on contact). Ties break on the smaller node index.
pub fn min_degree_order(n: usize, adjacency: &[Vec<usize>]) -> Vec<usize> {
    assert_eq!(adjacency.len(), n);
    let mut adj: Vec<Vec<usize>> = adjacency.to_vec();
    let mut node_elems: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut elem_members: Vec<Vec<usize>> = Vec::new();
    let mut alive = vec![true; n];
    let mut degree = vec![0usize; n];
    let mut stamp = vec![0u64; n];
    let mut cur_stamp = 0u64;
    let mut heap: BinaryHeap<Reverse<(usize, usize)>> = BinaryHeap::new();

    for v in 0..n {
        degree[v] = adj[v].len();
        heap.push(Reverse((degree[v], v)));
    }

    let mut order = Vec::with_capacity(n);
    let mut alive_count = n;

    // Collects the current true neighborhood of `v` into `out`, using the
    // stamp array for dedup.
    fn neighborhood(
        v: usize,
        adj: &[Vec<usize>],
        node_elems: &[Vec<usize>],
        elem_members: &[Vec<usize>],
        alive: &[bool],
        stamp: &mut [u64],
        cur_stamp: u64,
        out: &mut Vec<usize>,
    ) {
        out.clear();
        stamp[v] = cur_stamp;
        for &u in &adj[v] {
            if alive[u] && stamp[u] != cur_stamp {
                stamp[u] = cur_stamp;
                out.push(u);
            }
        }
        for &e in &node_elems[v] {
            for &u in &elem_members[e] {
                if u != v && alive[u] && stamp[u] != cur_stamp {
                    stamp[u] = cur_stamp;
                    out.push(u);
                }
            }
        }
    }

    let mut nb = Vec::new();
    while alive_count > 0 {
        // pop the minimum-degree node with lazy revalidation
        let v = loop {
            let Reverse((d, v)) = heap.pop().expect("heap holds all alive nodes");
            if alive[v] && degree[v] == d {
                break v;
            }
        };

        // dense tail: once the pivot connects to everything left, the order
        // of the remainder no longer matters for fill
        if degree[v] + 1 >= alive_count && alive_count > 1 {
            let mut rest: Vec<usize> = (0..n).filter(|&u| alive[u]).collect();
            rest.sort_unstable();
            order.extend(rest);
            break;
        }

        cur_stamp += 1;
        neighborhood(
            v,
            &adj,
            &node_elems,
            &elem_members,
            &alive,
            &mut stamp,
            cur_stamp,
            &mut nb,
        );
        nb.sort_unstable();
        alive[v] = false;
        alive_count -= 1;
        order.push(v);

        let absorbed: Vec<usize> = node_elems[v].clone();
        let new_elem = elem_members.len();
        elem_members.push(nb.clone());

        for &u in &nb {
            // drop dead neighbors and neighbors now covered by the new element
            cur_stamp += 1;
            for &m in &elem_members[new_elem] {
                stamp[m] = cur_stamp;
            }
            adj[u].retain(|&w| alive[w] && stamp[w] != cur_stamp);
            node_elems[u].retain(|e| !absorbed.contains(e) && !elem_members[*e].is_empty());
            node_elems[u].push(new_elem);

            cur_stamp += 1;
            let mut deg = 0usize;
            stamp[u] = cur_stamp;
            for &w in &adj[u] {
                if alive[w] && stamp[w] != cur_stamp {
                    stamp[w] = cur_stamp;
                    deg += 1;
                }
            }
            for &e in &node_elems[u] {
                for &w in &elem_members[e] {
                    if w != u && alive[w] && stamp[w] != cur_stamp {
                        stamp[w] = cur_stamp;
                        deg += 1;
                    }
                }
            }
            degree[u] = deg;
            heap.push(Reverse((deg, u)));
        }
        for &e in &absorbed {
            elem_members[e].clear();
        }
    }
    order
}

/// Builds the symmetric adjacency (without diagonal) of a CSC pattern,
/// assuming structural symmetry.
pub fn pattern_adjacency(a: &Csc) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); a.n];
    for j in 0..a.n {
        for k in a.col_ptr[j]..a.col_ptr[j + 1] {
            let r = a.row_idx[k];
            if r != j {
                adj[j].push(r);
            }
        }
    }
    for list in adj.iter_mut() {
        list.sort_unstable();
        list.dedup();
    }
    adj
}

/// Left-looking sparse LU with partial pivoting (Gilbert-Peierls). Columns
/// are processed in the supplied fill-reducing order; rows pivot dynamically
/// on the largest magnitude, ties to the smallest original row index.
pub struct SparseLu {
    n: usize,
    l_ptr: Vec<usize>,
    l_rows: Vec<usize>, // original row indices
    l_vals: Vec<f64>,
    u_ptr: Vec<usize>,
    u_rows: Vec<usize>, // elimination-step indices < j
    u_vals: Vec<f64>,
    u_diag: Vec<f64>,
    pivot_rows: Vec<usize>,
    col_order: Vec<usize>,
}

impl SparseLu {
    pub fn factor(a: &Csc, col_order: &[usize]) -> Result<SparseLu, LinSolveError> {
        let n = a.n;
        assert_eq!(col_order.len(), n);
        let mut l_ptr = vec![0usize];
        let mut l_rows: Vec<usize> = Vec::new();
        let mut l_vals: Vec<f64> = Vec::new();
        let mut u_ptr = vec![0usize];
        let mut u_rows: Vec<usize> = Vec::new();
        let mut u_vals: Vec<f64> = Vec::new();
        let mut u_diag = vec![0.0f64; n];
        let mut pivot_rows = vec![usize::MAX; n];
        let mut pinv = vec![usize::MAX; n]; // original row -> elimination step

        let mut x = vec![0.0f64; n];
        let mut mark = vec![u32::MAX; n]; // by original row
        let mut pattern: Vec<usize> = Vec::new();
        let mut dfs_stack: Vec<(usize, usize)> = Vec::new(); // (orig row, child cursor)
        let mut topo: Vec<usize> = Vec::new(); // elimination steps in reverse topological order

        for j in 0..n {
            let cj = col_order[j];
            let (rows, vals) = a.col(cj);
            let stamp = j as u32;

            // symbolic: reach of the column pattern through finished L columns
            topo.clear();
            pattern.clear();
            for &r in rows {
                if mark[r] == stamp {
                    continue;
                }
                // DFS from r
                dfs_stack.push((r, 0));
                while let Some((node, cursor)) = dfs_stack.pop() {
                    if cursor == 0 {
                        mark[node] = stamp;
                    }
                    let k = pinv[node];
                    if k == usize::MAX {
                        // unpivoted row: plain fill entry, no children
                        pattern.push(node);
                        continue;
                    }
                    let start = l_ptr[k];
                    let end = l_ptr[k + 1];
                    let mut advanced = false;
                    let mut cur = cursor;
                    while start + cur < end {
                        let child = l_rows[start + cur];
                        cur += 1;
                        if mark[child] != stamp {
                            dfs_stack.push((node, cur));
                            dfs_stack.push((child, 0));
                            advanced = true;
                            break;
                        }
                    }
                    if !advanced {
                        // postorder: all children done
                        pattern.push(node);
                        topo.push(k);
                    }
                }
            }

            // numeric: scatter then eliminate in topological order
            for &r in &pattern {
                x[r] = 0.0;
            }
            for (&r, &v) in rows.iter().zip(vals) {
                x[r] = v;
            }
            for &k in topo.iter().rev() {
                let xk = x[pivot_rows[k]];
                if xk != 0.0 {
                    for idx in l_ptr[k]..l_ptr[k + 1] {
                        x[l_rows[idx]] -= xk * l_vals[idx];
                    }
                }
            }

            // pivot: largest magnitude among unpivoted rows of the pattern
            let mut piv_row = usize::MAX;
            let mut piv_val = 0.0f64;
            for &r in &pattern {
                if pinv[r] == usize::MAX {
                    let v = x[r].abs();
                    if v > piv_val || (v == piv_val && v > 0.0 && r < piv_row) {
                        piv_val = v;
                        piv_row = r;
                    }
                }
            }
            if piv_row == usize::MAX || piv_val == 0.0 {
                return Err(LinSolveError::SolverFailure {
                    reason: format!("singular matrix: no pivot in column {cj}"),
                    residual: f64::INFINITY,
                });
            }

            let diag = x[piv_row];
            u_diag[j] = diag;
            pivot_rows[j] = piv_row;
            pinv[piv_row] = j;
            for &r in &pattern {
                let k = pinv[r];
                if r == piv_row {
                    continue;
                }
                if k != usize::MAX && k < j {
                    if x[r] != 0.0 {
                        u_rows.push(k);
                        u_vals.push(x[r]);
                    }
                } else if k == usize::MAX && x[r] != 0.0 {
                    l_rows.push(r);
                    l_vals.push(x[r] / diag);
                }
            }
            l_ptr.push(l_rows.len());
            u_ptr.push(u_rows.len());
        }

        Ok(SparseLu {
            n,
            l_ptr,
            l_rows,
            l_vals,
            u_ptr,
            u_rows,
            u_vals,
            u_diag,
            pivot_rows,
            col_order: col_order.to_vec(),
        })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let mut work = b.to_vec();
        let mut y = vec![0.0f64; self.n];
        for j in 0..self.n {
            let yj = work[self.pivot_rows[j]];
            y[j] = yj;
            if yj != 0.0 {
                for idx in self.l_ptr[j]..self.l_ptr[j + 1] {
                    work[self.l_rows[idx]] -= self.l_vals[idx] * yj;
                }
            }
        }
        let mut z = vec![0.0f64; self.n];
        for j in (0..self.n).rev() {
            let zj = y[j] / self.u_diag[j];
            z[j] = zj;
            if zj != 0.0 {
                for idx in self.u_ptr[j]..self.u_ptr[j + 1] {
                    y[self.u_rows[idx]] -= self.u_vals[idx] * zj;
                }
            }
        }
        let mut out = vec![0.0f64; self.n];
        for j in 0..self.n {
            out[self.col_order[j]] = z[j];
        }
        out
    }

    pub fn fill_nnz(&self) -> usize {
        self.l_rows.len() + self.u_rows.len() + self.n
    }
}

// ---------------------------------------------------------------------------
// saddle-point solve
// ---------------------------------------------------------------------------

/// One coupled velocity-pressure system: A u + B^T p = f, B u = g, with
/// Dirichlet constraints eliminated symmetrically and (for enclosed flows)
/// one pressure dof pinned to fix the constant nullspace.
pub struct SaddleSystem<'a> {
    pub a: &'a SparseMatrix,
    pub b: &'a SparseMatrix,
    pub f: &'a [f64],
    pub g: &'a [f64],
    /// (dof, value), sorted by dof
    pub constraints: &'a [(usize, f64)],
    pub pinned_pressure: Option<usize>,
    /// P1 basis integrals and domain area; when present the returned
    /// pressure is shifted to zero L² mean.
    pub mean_shift: Option<(&'a [f64], f64)>,
}

const SADDLE_RESIDUAL_TOL: f64 = 1e-9;

/// Reusable saddle solver: keeps the fill-reducing ordering across solves
/// with the same sparsity pattern (the per-step systems of the time
/// integrators differ only in values).
pub struct SaddleSolver {
    cached_order: Option<(u64, Vec<usize>)>,
}

impl SaddleSolver {
    pub fn new() -> Self {
        SaddleSolver { cached_order: None }
    }

    pub fn solve(&mut self, sys: &SaddleSystem) -> Result<(Vec<f64>, Vec<f64>), LinSolveError> {
        let n_vel = sys.a.nrows();
        let n_pre = sys.b.nrows();
        if sys.a.ncols() != n_vel || sys.b.ncols() != n_vel {
            return Err(LinSolveError::Contract(
                "saddle blocks have inconsistent dimensions".into(),
            ));
        }
        if sys.f.len() != n_vel || sys.g.len() != n_pre {
            return Err(LinSolveError::Contract(format!(
                "rhs lengths ({}, {}) do not match blocks ({}, {})",
                sys.f.len(),
                sys.g.len(),
                n_vel,
                n_pre
            )));
        }
        if let Some(p) = sys.pinned_pressure {
            if p >= n_pre {
                return Err(LinSolveError::Contract(format!(
                    "pinned pressure dof {p} out of range {n_pre}"
                )));
            }
        }

        // dof maps
        let mut constrained_value = vec![f64::NAN; n_vel];
        for &(dof, val) in sys.constraints {
            if dof >= n_vel {
                return Err(LinSolveError::Contract(format!(
                    "constrained dof {dof} out of range {n_vel}"
                )));
            }
            constrained_value[dof] = val;
        }
        let mut vel_map = vec![usize::MAX; n_vel];
        let mut free_vel = Vec::with_capacity(n_vel);
        for dof in 0..n_vel {
            if constrained_value[dof].is_nan() {
                vel_map[dof] = free_vel.len();
                free_vel.push(dof);
            }
        }
        let mut pre_map = vec![usize::MAX; n_pre];
        let mut free_pre = Vec::with_capacity(n_pre);
        for q in 0..n_pre {
            if Some(q) != sys.pinned_pressure {
                pre_map[q] = free_pre.len();
                free_pre.push(q);
            }
        }
        let nf = free_vel.len();
        let n_red = nf + free_pre.len();

        // reduced matrix and rhs
        let mut triplets = Vec::with_capacity(sys.a.nnz() + 2 * sys.b.nnz());
        let mut rhs = vec![0.0f64; n_red];
        for (i, &dof) in free_vel.iter().enumerate() {
            rhs[i] = sys.f[dof];
        }
        for (i, &q) in free_pre.iter().enumerate() {
            rhs[nf + i] = sys.g[q];
        }
        for r in 0..n_vel {
            let rr = vel_map[r];
            if rr == usize::MAX {
                continue;
            }
            let (cols, vals) = sys.a.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let cc = vel_map[c];
                if cc == usize::MAX {
                    rhs[rr] -= v * constrained_value[c];
                } else {
                    triplets.push((rr, cc, v));
                }
            }
        }
        for q in 0..n_pre {
            let rq = pre_map[q];
            let (cols, vals) = sys.b.row(q);
            for (&c, &v) in cols.iter().zip(vals) {
                let cc = vel_map[c];
                if cc == usize::MAX {
                    if rq != usize::MAX {
                        rhs[nf + rq] -= v * constrained_value[c];
                    }
                } else {
                    if rq != usize::MAX {
                        triplets.push((nf + rq, cc, v));
                        triplets.push((cc, nf + rq, v));
                    } else {
                        // pinned pressure column still appears in the momentum
                        // rows with value 0 for that dof, nothing to add
                    }
                }
            }
        }
        let k = Csc::from_triplets(n_red, triplets);

        // fill-reducing ordering, cached across identical patterns
        let fingerprint = pattern_fingerprint(&k);
        let order = match &self.cached_order {
            Some((fp, ord)) if *fp == fingerprint => ord.clone(),
            _ => {
                let adj = pattern_adjacency(&k);
                let ord = min_degree_order(n_red, &adj);
                self.cached_order = Some((fingerprint, ord.clone()));
                ord
            }
        };

        let lu = SparseLu::factor(&k, &order)?;
        let mut x = lu.solve(&rhs);
        // one step of iterative refinement
        let ax = k.matvec(&x);
        let mut resid: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let dx = lu.solve(&resid);
        for (xi, di) in x.iter_mut().zip(&dx) {
            *xi += di;
        }
        let ax = k.matvec(&x);
        for (r, (b, a)) in resid.iter_mut().zip(rhs.iter().zip(&ax)) {
            *r = b - a;
        }
        let rnorm = l2(&resid);
        let bnorm = l2(&rhs).max(f64::MIN_POSITIVE);
        if rnorm > SADDLE_RESIDUAL_TOL * bnorm {
            return Err(LinSolveError::SolverFailure {
                reason: "saddle system residual exceeds tolerance".into(),
                residual: rnorm / bnorm,
            });
        }

        let mut u = vec![0.0f64; n_vel];
        for dof in 0..n_vel {
            u[dof] = if vel_map[dof] == usize::MAX {
                constrained_value[dof]
            } else {
                x[vel_map[dof]]
            };
        }
        let mut p = vec![0.0f64; n_pre];
        for q in 0..n_pre {
            if pre_map[q] != usize::MAX {
                p[q] = x[nf + pre_map[q]];
            }
        }
        if let Some((weights, area)) = sys.mean_shift {
            let mean: f64 = p.iter().zip(weights).map(|(pi, w)| pi * w).sum::<f64>() / area;
            for pi in p.iter_mut() {
                *pi -= mean;
            }
        }
        Ok((u, p))
    }
}

impl Default for SaddleSolver {
    fn default() -> Self {
        Self::new()
    }
}

/// One-shot convenience wrapper around [`SaddleSolver`].
pub fn solve_saddle(sys: &SaddleSystem) -> Result<(Vec<f64>, Vec<f64>), LinSolveError> {
    SaddleSolver::new().solve(sys)
}

fn pattern_fingerprint(a: &Csc) -> u64 {
    // FNV-1a over the pattern arrays
    let mut h = 0xcbf29ce484222325u64;
    let mut push = |v: u64| {
        h ^= v;
        h = h.wrapping_mul(0x100000001b3);
    };
    push(a.n as u64);
    for &p in &a.col_ptr {
        push(p as u64);
    }
    for &r in &a.row_idx {
        push(r as u64);
    }
    h
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
