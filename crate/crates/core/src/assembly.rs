//! Assembly of the discrete operators: mass, stiffness, grad-div and
//! divergence forms, both convection discretizations (skew-symmetric and
//! EMAC), load vectors and integral norms.
//!
//! Everything integrates with a degree-5 rule by default, which is exact for
//! every trilinear-form integrand of P2 arguments (polynomial degree <= 5),
//! so the algebraic nullity identities hold to roundoff.

use std::sync::Arc;

use thiserror::Error;

use crate::fespace::{
    p1_ref_grads, p1_values, p2_ref_grads, p2_values, FeFunction, Role, THSpace,
};
use crate::mesh::{quadrature_rule, QuadratureRule};

pub const DEFAULT_QUAD_DEGREE: usize = 5;

#[derive(Debug, Error)]
pub enum AssemblyError {
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Bilinear forms of the velocity-pressure system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormKind {
    /// (u, v)
    Mass,
    /// (grad u, grad v)
    Stiffness,
    /// (div u, div v)
    GradDiv,
    /// (q, div v), pressure rows by velocity columns
    Divergence,
}

/// Discretizations of the convection term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvectionForm {
    /// ((u·grad) v, w) + 1/2 ((div u) v, w)
    Skew,
    /// (2 D(u) v, w) + ((div u) v, w)
    Emac,
}

impl ConvectionForm {
    pub fn name(&self) -> &'static str {
        match self {
            ConvectionForm::Skew => "skew",
            ConvectionForm::Emac => "emac",
        }
    }
}

/// Compressed sparse row matrix with strictly increasing column indices per
/// row. Duplicate triplets are summed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Self {
        triplets.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_counts = vec![0usize; nrows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            debug_assert!(r < nrows && c < ncols);
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_counts[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..nrows {
            row_counts[r + 1] += row_counts[r];
        }
        SparseMatrix {
            nrows,
            ncols,
            row_ptr: row_counts,
            col_idx,
            values,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        (&self.col_idx[range.clone()], &self.values[range])
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        let mut y = vec![0.0; self.nrows];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        for r in 0..self.nrows {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            y[r] = acc;
        }
    }

    /// x^T A y
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        assert_eq!(x.len(), self.nrows);
        assert_eq!(y.len(), self.ncols);
        let mut acc = 0.0;
        for r in 0..self.nrows {
            let mut row_acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                row_acc += self.values[k] * y[self.col_idx[k]];
            }
            acc += x[r] * row_acc;
        }
        acc
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Checks |A_ij - A_ji| <= tol for all entries (patterns assumed
    /// structurally symmetric, which holds for all assembled operators here).
    pub fn symmetry_defect(&self) -> f64 {
        assert_eq!(self.nrows, self.ncols);
        let t = self.transpose();
        let mut defect = 0.0f64;
        for r in 0..self.nrows {
            let (ca, va) = self.row(r);
            let (cb, vb) = t.row(r);
            let mut ia = 0;
            let mut ib = 0;
            while ia < ca.len() || ib < cb.len() {
                let ka = ca.get(ia).copied().unwrap_or(usize::MAX);
                let kb = cb.get(ib).copied().unwrap_or(usize::MAX);
                if ka == kb {
                    defect = defect.max((va[ia] - vb[ib]).abs());
                    ia += 1;
                    ib += 1;
                } else if ka < kb {
                    defect = defect.max(va[ia].abs());
                    ia += 1;
                } else {
                    defect = defect.max(vb[ib].abs());
                    ib += 1;
                }
            }
        }
        defect
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut triplets = Vec::with_capacity(self.nnz());
        for r in 0..self.nrows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                triplets.push((self.col_idx[k], r, self.values[k]));
            }
        }
        SparseMatrix::from_triplets(self.ncols, self.nrows, triplets)
    }

    pub fn same_pattern(&self, other: &SparseMatrix) -> bool {
        self.nrows == other.nrows
            && self.ncols == other.ncols
            && self.row_ptr == other.row_ptr
            && self.col_idx == other.col_idx
    }
}

/// Precomputed reference-element basis data for one quadrature rule.
pub(crate) struct BasisTables {
    pub rule: QuadratureRule,
    pub p2_vals: Vec<[f64; 6]>,
    pub p2_grads: Vec<[[f64; 2]; 6]>,
    pub p1_vals: Vec<[f64; 3]>,
}

impl BasisTables {
    pub fn new(degree: usize) -> Self {
        let rule = quadrature_rule(degree).expect("supported degree");
        let p2_vals = rule.points.iter().map(|&l| p2_values(l)).collect();
        let p2_grads = rule.points.iter().map(|&l| p2_ref_grads(l)).collect();
        let p1_vals = rule.points.iter().map(|&l| p1_values(l)).collect();
        BasisTables {
            rule,
            p2_vals,
            p2_grads,
            p1_vals,
        }
    }
}

/// Assembles one of the bilinear forms over the whole mesh with the default
/// degree-5 rule. Mass/stiffness/grad-div are `n_vel x n_vel` with the full
/// two-component block pattern (explicit zeros on uncoupled blocks, so every
/// velocity operator shares one sparsity pattern); divergence is
/// `n_pre x n_vel`.
pub fn assemble_matrix(kind: FormKind, space: &THSpace) -> SparseMatrix {
    assemble_matrix_with_degree(kind, space, DEFAULT_QUAD_DEGREE)
}

pub fn assemble_matrix_with_degree(kind: FormKind, space: &THSpace, degree: usize) -> SparseMatrix {
    let tables = BasisTables::new(degree);
    let nel = space.mesh().n_triangles();
    match kind {
        FormKind::Divergence => {
            let mut triplets = Vec::with_capacity(nel * 72);
            for t in 0..nel {
                let geo = space.element_geometry(t);
                let nodes = space.tri_nodes(t);
                let tri = space.mesh().triangles()[t];
                let mut local = [[0.0f64; 12]; 3];
                for q in 0..tables.rule.len() {
                    let w = tables.rule.weights[q] * geo.det;
                    let grads: Vec<[f64; 2]> = tables.p2_grads[q]
                        .iter()
                        .map(|&g| geo.phys_grad(g))
                        .collect();
                    for i in 0..3 {
                        let pv = tables.p1_vals[q][i];
                        for j in 0..6 {
                            for d in 0..2 {
                                local[i][2 * j + d] += w * pv * grads[j][d];
                            }
                        }
                    }
                }
                for i in 0..3 {
                    for j in 0..6 {
                        for d in 0..2 {
                            triplets.push((tri[i], 2 * nodes[j] + d, local[i][2 * j + d]));
                        }
                    }
                }
            }
            SparseMatrix::from_triplets(space.n_pre(), space.n_vel(), triplets)
        }
        _ => {
            let mut triplets = Vec::with_capacity(nel * 576);
            for t in 0..nel {
                let geo = space.element_geometry(t);
                let nodes = space.tri_nodes(t);
                let mut local = [[0.0f64; 12]; 12];
                for q in 0..tables.rule.len() {
                    let w = tables.rule.weights[q] * geo.det;
                    let vals = &tables.p2_vals[q];
                    let grads: Vec<[f64; 2]> = tables.p2_grads[q]
                        .iter()
                        .map(|&g| geo.phys_grad(g))
                        .collect();
                    match kind {
                        FormKind::Mass => {
                            for i in 0..6 {
                                for j in 0..6 {
                                    let m = w * vals[i] * vals[j];
                                    local[2 * i][2 * j] += m;
                                    local[2 * i + 1][2 * j + 1] += m;
                                }
                            }
                        }
                        FormKind::Stiffness => {
                            for i in 0..6 {
                                for j in 0..6 {
                                    let k = w * (grads[i][0] * grads[j][0] + grads[i][1] * grads[j][1]);
                                    local[2 * i][2 * j] += k;
                                    local[2 * i + 1][2 * j + 1] += k;
                                }
                            }
                        }
                        FormKind::GradDiv => {
                            for i in 0..6 {
                                for c in 0..2 {
                                    for j in 0..6 {
                                        for d in 0..2 {
                                            local[2 * i + c][2 * j + d] +=
                                                w * grads[i][c] * grads[j][d];
                                        }
                                    }
                                }
                            }
                        }
                        FormKind::Divergence => unreachable!(),
                    }
                }
                for i in 0..12 {
                    let gi = 2 * nodes[i / 2] + (i % 2);
                    for j in 0..12 {
                        let gj = 2 * nodes[j / 2] + (j % 2);
                        triplets.push((gi, gj, local[i][j]));
                    }
                }
            }
            SparseMatrix::from_triplets(space.n_vel(), space.n_vel(), triplets)
        }
    }
}

/// Element-local convection block: rows/cols are 2*local_node + component,
/// entry = b_form(w, phi_j, phi_i) restricted to the element.
fn convection_local(
    form: ConvectionForm,
    w: &FeFunction,
    space: &THSpace,
    tables: &BasisTables,
    t: usize,
) -> [[f64; 12]; 12] {
    let geo = space.element_geometry(t);
    let nodes = space.tri_nodes(t);
    let mut local = [[0.0f64; 12]; 12];
    let wc = w.coeffs();
    for q in 0..tables.rule.len() {
        let wq = tables.rule.weights[q] * geo.det;
        let vals = &tables.p2_vals[q];
        let grads: [[f64; 2]; 6] = {
            let mut out = [[0.0; 2]; 6];
            for k in 0..6 {
                out[k] = geo.phys_grad(tables.p2_grads[q][k]);
            }
            out
        };
        // advecting field value, gradient and divergence at the point
        let mut w_val = [0.0f64; 2];
        let mut w_grad = [[0.0f64; 2]; 2]; // [component][direction]
        for k in 0..6 {
            let n = nodes[k];
            for c in 0..2 {
                let coef = wc[2 * n + c];
                w_val[c] += vals[k] * coef;
                w_grad[c][0] += grads[k][0] * coef;
                w_grad[c][1] += grads[k][1] * coef;
            }
        }
        let w_div = w_grad[0][0] + w_grad[1][1];
        match form {
            ConvectionForm::Skew => {
                for j in 0..6 {
                    let adv = w_val[0] * grads[j][0] + w_val[1] * grads[j][1];
                    for i in 0..6 {
                        let e = wq * (adv * vals[i] + 0.5 * w_div * vals[j] * vals[i]);
                        local[2 * i][2 * j] += e;
                        local[2 * i + 1][2 * j + 1] += e;
                    }
                }
            }
            ConvectionForm::Emac => {
                for j in 0..6 {
                    for i in 0..6 {
                        let vv = wq * vals[j] * vals[i];
                        for c in 0..2 {
                            for d in 0..2 {
                                let mut e = (w_grad[c][d] + w_grad[d][c]) * vv;
                                if c == d {
                                    e += w_div * vv;
                                }
                                local[2 * i + c][2 * j + d] += e;
                            }
                        }
                    }
                }
            }
        }
    }
    local
}

/// Assembles the linearized convection matrix N(w) with entries
/// b_form(w, phi_j, phi_i); the advected argument is the matrix column.
/// The emitted pattern is the full two-component block pattern.
pub fn assemble_convection(
    form: ConvectionForm,
    w: &FeFunction,
    space: &Arc<THSpace>,
) -> Result<SparseMatrix, AssemblyError> {
    assemble_convection_with_degree(form, w, space, DEFAULT_QUAD_DEGREE)
}

pub fn assemble_convection_with_degree(
    form: ConvectionForm,
    w: &FeFunction,
    space: &Arc<THSpace>,
    degree: usize,
) -> Result<SparseMatrix, AssemblyError> {
    check_velocity_on(w, space)?;
    let tables = BasisTables::new(degree);
    let nel = space.mesh().n_triangles();
    let mut triplets = Vec::with_capacity(nel * 576);
    for t in 0..nel {
        let local = convection_local(form, w, space, &tables, t);
        let nodes = space.tri_nodes(t);
        for i in 0..12 {
            let gi = 2 * nodes[i / 2] + (i % 2);
            for j in 0..12 {
                let gj = 2 * nodes[j / 2] + (j % 2);
                triplets.push((gi, gj, local[i][j]));
            }
        }
    }
    Ok(SparseMatrix::from_triplets(
        space.n_vel(),
        space.n_vel(),
        triplets,
    ))
}

/// Fast in-place refill of a convection matrix that shares the block pattern
/// produced by [`assemble_matrix`]/[`assemble_convection`]. Used by the time
/// steppers, which re-linearize every step on a fixed pattern.
pub struct ConvectionKernel {
    space: Arc<THSpace>,
    tables: BasisTables,
    /// per element: CSR value slot of each (local_i, local_j) pair
    slots: Vec<[u32; 144]>,
}

impl ConvectionKernel {
    pub fn new(space: &Arc<THSpace>, pattern: &SparseMatrix) -> Self {
        let tables = BasisTables::new(DEFAULT_QUAD_DEGREE);
        let nel = space.mesh().n_triangles();
        let mut slots = Vec::with_capacity(nel);
        for t in 0..nel {
            let nodes = space.tri_nodes(t);
            let mut s = [0u32; 144];
            for i in 0..12 {
                let gi = 2 * nodes[i / 2] + (i % 2);
                let (cols, _) = pattern.row(gi);
                for j in 0..12 {
                    let gj = 2 * nodes[j / 2] + (j % 2);
                    let off = cols.binary_search(&gj).expect("pattern covers element block");
                    s[12 * i + j] = (pattern.row_ptr[gi] + off) as u32;
                }
            }
            slots.push(s);
        }
        ConvectionKernel {
            space: Arc::clone(space),
            tables,
            slots,
        }
    }

    /// Overwrites `values` (laid out on the pattern passed to `new`) with the
    /// entries of N(w).
    pub fn assemble_into(&self, form: ConvectionForm, w: &FeFunction, values: &mut [f64]) {
        values.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..self.space.mesh().n_triangles() {
            let local = convection_local(form, w, &self.space, &self.tables, t);
            let slots = &self.slots[t];
            for i in 0..12 {
                for j in 0..12 {
                    values[slots[12 * i + j] as usize] += local[i][j];
                }
            }
        }
    }
}

/// Direct quadrature evaluation of b_form(u, v, w).
pub fn trilinear(
    form: ConvectionForm,
    u: &FeFunction,
    v: &FeFunction,
    w: &FeFunction,
) -> Result<f64, AssemblyError> {
    trilinear_with_degree(form, u, v, w, DEFAULT_QUAD_DEGREE)
}

pub fn trilinear_with_degree(
    form: ConvectionForm,
    u: &FeFunction,
    v: &FeFunction,
    w: &FeFunction,
    degree: usize,
) -> Result<f64, AssemblyError> {
    let space = u.space();
    check_velocity_on(u, space)?;
    check_velocity_on(v, space)?;
    check_velocity_on(w, space)?;
    let tables = BasisTables::new(degree);
    let mut acc = 0.0;
    for t in 0..space.mesh().n_triangles() {
        let geo = space.element_geometry(t);
        for q in 0..tables.rule.len() {
            let wq = tables.rule.weights[q] * geo.det;
            let l = tables.rule.points[q];
            let u_val = u.velocity_at(t, l);
            let u_grad = u.velocity_grad_at(t, l);
            let v_val = v.velocity_at(t, l);
            let v_grad = v.velocity_grad_at(t, l);
            let w_val = w.velocity_at(t, l);
            let u_div = u_grad[0][0] + u_grad[1][1];
            match form {
                ConvectionForm::Skew => {
                    // ((u·grad) v)·w + 1/2 (div u)(v·w)
                    let mut conv = 0.0;
                    for c in 0..2 {
                        conv += (u_val[0] * v_grad[c][0] + u_val[1] * v_grad[c][1]) * w_val[c];
                    }
                    let vw = v_val[0] * w_val[0] + v_val[1] * w_val[1];
                    acc += wq * (conv + 0.5 * u_div * vw);
                }
                ConvectionForm::Emac => {
                    // (2 D(u) v)·w + (div u)(v·w)
                    let mut conv = 0.0;
                    for c in 0..2 {
                        for d in 0..2 {
                            conv += (u_grad[c][d] + u_grad[d][c]) * v_val[d] * w_val[c];
                        }
                    }
                    let vw = v_val[0] * w_val[0] + v_val[1] * w_val[1];
                    acc += wq * (conv + u_div * vw);
                }
            }
        }
    }
    Ok(acc)
}

/// Integral norms evaluated by quadrature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    L2,
    H1Semi,
    Div,
}

pub fn norm(kind: NormKind, f: &FeFunction) -> Result<f64, AssemblyError> {
    if kind == NormKind::Div && f.role() == Role::Pressure {
        return Err(AssemblyError::Contract(
            "divergence norm is only defined for velocity functions".into(),
        ));
    }
    let space = f.space();
    let tables = BasisTables::new(DEFAULT_QUAD_DEGREE);
    let mut acc = 0.0;
    for t in 0..space.mesh().n_triangles() {
        let geo = space.element_geometry(t);
        for q in 0..tables.rule.len() {
            let wq = tables.rule.weights[q] * geo.det;
            let l = tables.rule.points[q];
            let val = match (kind, f.role()) {
                (NormKind::L2, Role::Velocity) => {
                    let v = f.velocity_at(t, l);
                    v[0] * v[0] + v[1] * v[1]
                }
                (NormKind::L2, Role::Pressure) => {
                    let p = f.pressure_at(t, l);
                    p * p
                }
                (NormKind::H1Semi, Role::Velocity) => {
                    let g = f.velocity_grad_at(t, l);
                    g[0][0] * g[0][0] + g[0][1] * g[0][1] + g[1][0] * g[1][0] + g[1][1] * g[1][1]
                }
                (NormKind::H1Semi, Role::Pressure) => {
                    let geo2 = geo;
                    let tri = space.mesh().triangles()[t];
                    let mut g = [0.0; 2];
                    for (k, rg) in p1_ref_grads().iter().enumerate() {
                        let pg = geo2.phys_grad(*rg);
                        g[0] += pg[0] * f.coeffs()[tri[k]];
                        g[1] += pg[1] * f.coeffs()[tri[k]];
                    }
                    g[0] * g[0] + g[1] * g[1]
                }
                (NormKind::Div, Role::Velocity) => {
                    let g = f.velocity_grad_at(t, l);
                    let d = g[0][0] + g[1][1];
                    d * d
                }
                (NormKind::Div, Role::Pressure) => unreachable!(),
            };
            acc += wq * val;
        }
    }
    Ok(acc.max(0.0).sqrt())
}

/// H1 norm (L2 + seminorm), used for relative tolerances in identity checks.
pub fn h1_norm(f: &FeFunction) -> f64 {
    let l2 = norm(NormKind::L2, f).expect("role checked");
    let h1 = norm(NormKind::H1Semi, f).expect("role checked");
    (l2 * l2 + h1 * h1).sqrt()
}

/// L² distance between a velocity function and an analytic field, with a
/// degree-7 rule (the analytic field is not polynomial in general).
pub fn l2_error_velocity(f: &FeFunction, exact: impl Fn([f64; 2]) -> [f64; 2]) -> f64 {
    let space = f.space();
    let tables = BasisTables::new(7);
    let mut acc = 0.0;
    for t in 0..space.mesh().n_triangles() {
        let geo = space.element_geometry(t);
        for q in 0..tables.rule.len() {
            let wq = tables.rule.weights[q] * geo.det;
            let l = tables.rule.points[q];
            let v = f.velocity_at(t, l);
            let e = exact(geo.point(l));
            acc += wq * ((v[0] - e[0]).powi(2) + (v[1] - e[1]).powi(2));
        }
    }
    acc.max(0.0).sqrt()
}

/// Load vector F_i = (f, phi_i) for a vector field f.
pub fn assemble_load(space: &THSpace, f: impl Fn([f64; 2]) -> [f64; 2]) -> Vec<f64> {
    let tables = BasisTables::new(DEFAULT_QUAD_DEGREE);
    let mut out = vec![0.0; space.n_vel()];
    for t in 0..space.mesh().n_triangles() {
        let geo = space.element_geometry(t);
        let nodes = space.tri_nodes(t);
        for q in 0..tables.rule.len() {
            let wq = tables.rule.weights[q] * geo.det;
            let fv = f(geo.point(tables.rule.points[q]));
            for k in 0..6 {
                let v = tables.p2_vals[q][k];
                out[2 * nodes[k]] += wq * fv[0] * v;
                out[2 * nodes[k] + 1] += wq * fv[1] * v;
            }
        }
    }
    out
}

/// P1 mass matrix (pressure-space inner product).
pub fn assemble_pressure_mass(space: &THSpace) -> SparseMatrix {
    let tables = BasisTables::new(DEFAULT_QUAD_DEGREE);
    let nel = space.mesh().n_triangles();
    let mut triplets = Vec::with_capacity(nel * 9);
    for t in 0..nel {
        let geo = space.element_geometry(t);
        let tri = space.mesh().triangles()[t];
        let mut local = [[0.0f64; 3]; 3];
        for q in 0..tables.rule.len() {
            let w = tables.rule.weights[q] * geo.det;
            for i in 0..3 {
                for j in 0..3 {
                    local[i][j] += w * tables.p1_vals[q][i] * tables.p1_vals[q][j];
                }
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                triplets.push((tri[i], tri[j], local[i][j]));
            }
        }
    }
    SparseMatrix::from_triplets(space.n_pre(), space.n_pre(), triplets)
}

/// L² projection of an analytic scalar field onto the P1 pressure space;
/// returns the projection coefficients and the L² residual
/// ||(I - P_Qh) g||_0.
pub fn pressure_space_projection(
    space: &THSpace,
    g: impl Fn([f64; 2]) -> f64,
) -> (Vec<f64>, f64) {
    let mass = assemble_pressure_mass(space);
    let tables = BasisTables::new(7);
    let mut rhs = vec![0.0; space.n_pre()];
    for t in 0..space.mesh().n_triangles() {
        let geo = space.element_geometry(t);
        let tri = space.mesh().triangles()[t];
        for q in 0..tables.rule.len() {
            let w = tables.rule.weights[q] * geo.det;
            let gv = g(geo.point(tables.rule.points[q]));
            for i in 0..3 {
                rhs[tri[i]] += w * gv * tables.p1_vals[q][i];
            }
        }
    }
    let coeffs = conjugate_gradient(&mass, &rhs, 1e-14, 10 * space.n_pre());
    // residual by direct quadrature of (g - p)^2
    let mut acc = 0.0;
    for t in 0..space.mesh().n_triangles() {
        let geo = space.element_geometry(t);
        let tri = space.mesh().triangles()[t];
        for q in 0..tables.rule.len() {
            let w = tables.rule.weights[q] * geo.det;
            let l = tables.rule.points[q];
            let pv = l[0] * coeffs[tri[0]] + l[1] * coeffs[tri[1]] + l[2] * coeffs[tri[2]];
            let gv = g(geo.point(l));
            acc += w * (gv - pv) * (gv - pv);
        }
    }
    (coeffs, acc.max(0.0).sqrt())
}

pub fn pressure_space_projection_error(space: &THSpace, g: impl Fn([f64; 2]) -> f64) -> f64 {
    pressure_space_projection(space, g).1
}

/// Plain CG for SPD systems (used for the well-conditioned P1 mass solve).
fn conjugate_gradient(a: &SparseMatrix, b: &[f64], rel_tol: f64, max_iters: usize) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rsq: f64 = r.iter().map(|v| v * v).sum();
    let bnorm = rsq.sqrt().max(f64::MIN_POSITIVE);
    let mut ap = vec![0.0; n];
    for _ in 0..max_iters {
        if rsq.sqrt() <= rel_tol * bnorm {
            break;
        }
        a.matvec_into(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(x, y)| x * y).sum();
        let alpha = rsq / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rsq_new: f64 = r.iter().map(|v| v * v).sum();
        let beta = rsq_new / rsq;
        rsq = rsq_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    x
}

fn check_velocity_on(f: &FeFunction, space: &Arc<THSpace>) -> Result<(), AssemblyError> {
    if f.role() != Role::Velocity {
        return Err(AssemblyError::Contract(
            "expected a velocity function".into(),
        ));
    }
    if !THSpace::same_space(f.space(), space) {
        return Err(AssemblyError::Contract(
            "functions live on different spaces".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fespace::{build_taylor_hood, interpolate_pressure, interpolate_velocity};
    use crate::mesh::unit_square_mesh;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn space(n: usize) -> Arc<THSpace> {
        let mesh = Arc::new(unit_square_mesh(n));
        Arc::new(build_taylor_hood(mesh, &BTreeSet::from([1])).unwrap())
    }

    fn random_velocity(space: &Arc<THSpace>, rng: &mut impl Rng, zero_boundary: bool) -> FeFunction {
        let mut f = FeFunction::zeros(Arc::clone(space), Role::Velocity);
        for c in f.coeffs_mut().iter_mut() {
            *c = rng.gen_range(-1.0..1.0);
        }
        if zero_boundary {
            for k in 0..space.n_vel() {
                if space.is_dirichlet(k) {
                    f.coeffs_mut()[k] = 0.0;
                }
            }
        }
        f
    }

    #[test]
    fn mass_total_sum_is_twice_area() {
        let s = space(4);
        let m = assemble_matrix(FormKind::Mass, &s);
        let total: f64 = m.values().iter().sum();
        assert!((total - 2.0).abs() < 1e-12, "sum {total}");
    }

    #[test]
    fn stiffness_annihilates_constants() {
        let s = space(4);
        let k = assemble_matrix(FormKind::Stiffness, &s);
        let constant = interpolate_velocity(&s, |_| [1.0, -2.0]);
        let y = k.matvec(constant.coeffs());
        assert!(y.iter().all(|v| v.abs() <= 1e-12));
    }

    #[test]
    fn graddiv_vanishes_on_divergence_free_linear_field() {
        let s = space(4);
        let g = assemble_matrix(FormKind::GradDiv, &s);
        let u = interpolate_velocity(&s, |p| [p[1], -p[0]]);
        let q = g.bilinear(u.coeffs(), u.coeffs());
        assert!(q.abs() <= 1e-12, "quadratic form {q}");
    }

    #[test]
    fn operators_are_symmetric() {
        let s = space(3);
        for kind in [FormKind::Mass, FormKind::Stiffness, FormKind::GradDiv] {
            let a = assemble_matrix(kind, &s);
            assert!(a.symmetry_defect() <= 1e-12 * a.max_abs().max(1.0));
        }
    }

    #[test]
    fn convection_of_zero_field_is_zero() {
        let s = space(3);
        let w = FeFunction::zeros(Arc::clone(&s), Role::Velocity);
        let n = assemble_convection(ConvectionForm::Skew, &w, &s).unwrap();
        assert_eq!(n.max_abs(), 0.0);
        let n = assemble_convection(ConvectionForm::Emac, &w, &s).unwrap();
        assert_eq!(n.max_abs(), 0.0);
    }

    #[test]
    fn skew_matrix_nullity_on_advected_pair() {
        let s = space(4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let w = random_velocity(&s, &mut rng, true);
            let v = random_velocity(&s, &mut rng, true);
            let n = assemble_convection(ConvectionForm::Skew, &w, &s).unwrap();
            let q = n.bilinear(v.coeffs(), v.coeffs());
            let scale = h1_norm(&w) * h1_norm(&v) * h1_norm(&v);
            assert!(q.abs() <= 1e-11 * scale, "q={q} scale={scale}");
        }
    }

    #[test]
    fn emac_matrix_nullity_on_triple_argument() {
        let s = space(4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let v = random_velocity(&s, &mut rng, true);
            let n = assemble_convection(ConvectionForm::Emac, &v, &s).unwrap();
            let q = n.bilinear(v.coeffs(), v.coeffs());
            let scale = h1_norm(&v).powi(3);
            assert!(q.abs() <= 1e-11 * scale, "q={q} scale={scale}");
        }
    }

    #[test]
    fn trilinear_consistent_with_assembled_matrix() {
        let s = space(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let u = random_velocity(&s, &mut rng, false);
            let v = random_velocity(&s, &mut rng, false);
            let w = random_velocity(&s, &mut rng, false);
            for form in [ConvectionForm::Skew, ConvectionForm::Emac] {
                let n = assemble_convection(form, &u, &s).unwrap();
                let via_matrix = n.bilinear(w.coeffs(), v.coeffs());
                let direct = trilinear(form, &u, &v, &w).unwrap();
                let scale = direct.abs().max(1e-14);
                assert!(
                    (via_matrix - direct).abs() <= 1e-12 * scale.max(h1_norm(&u) * h1_norm(&v) * h1_norm(&w)),
                    "{form:?}: {via_matrix} vs {direct}"
                );
            }
        }
    }

    #[test]
    fn trilinear_nullities() {
        let s = space(4);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..10 {
            let u = random_velocity(&s, &mut rng, true);
            let v = random_velocity(&s, &mut rng, true);
            let b = trilinear(ConvectionForm::Skew, &u, &v, &v).unwrap();
            assert!(b.abs() <= 1e-11 * h1_norm(&u) * h1_norm(&v).powi(2));
            let b = trilinear(ConvectionForm::Emac, &v, &v, &v).unwrap();
            assert!(b.abs() <= 1e-11 * h1_norm(&v).powi(3));
        }
    }

    #[test]
    fn skew_emac_difference_identity() {
        // b_h(u,u,w) - b_pod(u,u,w) = -((w·grad)u, u) - 1/2((div u) u, w),
        // each right-hand term evaluated by an independent quadrature loop.
        let s = space(3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tables = BasisTables::new(DEFAULT_QUAD_DEGREE);
        for _ in 0..5 {
            let u = random_velocity(&s, &mut rng, true);
            let w = random_velocity(&s, &mut rng, true);
            let lhs = trilinear(ConvectionForm::Skew, &u, &u, &w).unwrap()
                - trilinear(ConvectionForm::Emac, &u, &u, &w).unwrap();
            let mut term1 = 0.0; // -((w·grad)u, u)
            let mut term2 = 0.0; // -1/2 ((div u) u, w)
            for t in 0..s.mesh().n_triangles() {
                let geo = s.element_geometry(t);
                for q in 0..tables.rule.len() {
                    let wq = tables.rule.weights[q] * geo.det;
                    let l = tables.rule.points[q];
                    let uv = u.velocity_at(t, l);
                    let ug = u.velocity_grad_at(t, l);
                    let wv = w.velocity_at(t, l);
                    for c in 0..2 {
                        term1 -= wq * (wv[0] * ug[c][0] + wv[1] * ug[c][1]) * uv[c];
                    }
                    let udiv = ug[0][0] + ug[1][1];
                    term2 -= wq * 0.5 * udiv * (uv[0] * wv[0] + uv[1] * wv[1]);
                }
            }
            let scale = h1_norm(&u).powi(2) * h1_norm(&w);
            assert!(
                (lhs - (term1 + term2)).abs() <= 1e-12 * scale.max(1.0),
                "lhs={lhs} rhs={}",
                term1 + term2
            );
        }
    }

    #[test]
    fn emac_pointwise_identity() {
        // (u·grad)u - 2 D(u) u + 1/2 grad|u|^2 = 0 at every quadrature point.
        let s = space(3);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let u = random_velocity(&s, &mut rng, false);
        let tables = BasisTables::new(DEFAULT_QUAD_DEGREE);
        for t in 0..s.mesh().n_triangles() {
            for q in 0..tables.rule.len() {
                let l = tables.rule.points[q];
                let uv = u.velocity_at(t, l);
                let g = u.velocity_grad_at(t, l);
                for c in 0..2 {
                    let conv = g[c][0] * uv[0] + g[c][1] * uv[1];
                    let emac = (g[c][0] + g[0][c]) * uv[0] + (g[c][1] + g[1][c]) * uv[1];
                    let grad_sq = uv[0] * g[0][c] + uv[1] * g[1][c];
                    let resid = conv - emac + grad_sq;
                    assert!(resid.abs() <= 1e-12 * (1.0 + uv[0].abs() + uv[1].abs()));
                }
            }
        }
    }

    #[test]
    fn degree7_does_not_change_trilinear_values() {
        let s = space(3);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..5 {
            let u = random_velocity(&s, &mut rng, false);
            let v = random_velocity(&s, &mut rng, false);
            let w = random_velocity(&s, &mut rng, false);
            for form in [ConvectionForm::Skew, ConvectionForm::Emac] {
                let a = trilinear_with_degree(form, &u, &v, &w, 5).unwrap();
                let b = trilinear_with_degree(form, &u, &v, &w, 7).unwrap();
                let scale = a.abs().max(h1_norm(&u) * h1_norm(&v) * h1_norm(&w));
                assert!((a - b).abs() <= 1e-12 * scale, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn assembled_action_matches_direct_quadrature() {
        let s = space(3);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mass = assemble_matrix(FormKind::Mass, &s);
        let stiff = assemble_matrix(FormKind::Stiffness, &s);
        let graddiv = assemble_matrix(FormKind::GradDiv, &s);
        let tables = BasisTables::new(DEFAULT_QUAD_DEGREE);
        for _ in 0..20 {
            let u = random_velocity(&s, &mut rng, false);
            let v = random_velocity(&s, &mut rng, false);
            let mut m_direct = 0.0;
            let mut k_direct = 0.0;
            let mut g_direct = 0.0;
            for t in 0..s.mesh().n_triangles() {
                let geo = s.element_geometry(t);
                for q in 0..tables.rule.len() {
                    let wq = tables.rule.weights[q] * geo.det;
                    let l = tables.rule.points[q];
                    let uv = u.velocity_at(t, l);
                    let vv = v.velocity_at(t, l);
                    let ug = u.velocity_grad_at(t, l);
                    let vg = v.velocity_grad_at(t, l);
                    m_direct += wq * (uv[0] * vv[0] + uv[1] * vv[1]);
                    k_direct += wq
                        * (ug[0][0] * vg[0][0]
                            + ug[0][1] * vg[0][1]
                            + ug[1][0] * vg[1][0]
                            + ug[1][1] * vg[1][1]);
                    g_direct += wq * (ug[0][0] + ug[1][1]) * (vg[0][0] + vg[1][1]);
                }
            }
            let scale = h1_norm(&u) * h1_norm(&v);
            assert!((mass.bilinear(u.coeffs(), v.coeffs()) - m_direct).abs() <= 1e-12 * scale);
            assert!((stiff.bilinear(u.coeffs(), v.coeffs()) - k_direct).abs() <= 1e-12 * scale);
            assert!((graddiv.bilinear(u.coeffs(), v.coeffs()) - g_direct).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn norm_of_zero_and_analytic_reference() {
        let s = space(32);
        let zero = FeFunction::zeros(Arc::clone(&s), Role::Velocity);
        assert_eq!(norm(NormKind::L2, &zero).unwrap(), 0.0);
        let pi = std::f64::consts::PI;
        let u = interpolate_velocity(&s, |p| [(pi * p[0]).sin() * (pi * p[1]).sin(), 0.0]);
        let n = norm(NormKind::L2, &u).unwrap();
        assert!((n - 0.5).abs() < 1e-4, "norm {n}");
    }

    #[test]
    fn divergence_bounded_by_gradient() {
        let s = space(4);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..50 {
            let u = random_velocity(&s, &mut rng, true);
            let d = norm(NormKind::Div, &u).unwrap();
            let g = norm(NormKind::H1Semi, &u).unwrap();
            assert!(d <= g + 1e-12 * g.max(1.0));
        }
    }

    #[test]
    fn div_norm_on_pressure_rejected() {
        let s = space(2);
        let p = interpolate_pressure(&s, |q| q[0]);
        assert!(matches!(
            norm(NormKind::Div, &p),
            Err(AssemblyError::Contract(_))
        ));
    }

    #[test]
    fn pressure_projection_reproduces_linears() {
        let s = space(4);
        let (_, resid) = pressure_space_projection(&s, |p| 3.0 * p[0] - 2.0 * p[1] + 0.5);
        assert!(resid <= 1e-12, "residual {resid}");
    }

    #[test]
    fn pressure_projection_second_order() {
        let mut errs = Vec::new();
        for n in [8, 16, 32] {
            let s = space(n);
            errs.push(pressure_space_projection_error(&s, |p| p[0] * p[0]));
        }
        let r1 = (errs[0] / errs[1]).log2();
        let r2 = (errs[1] / errs[2]).log2();
        assert!(r1 > 1.8 && r2 > 1.8, "orders {r1} {r2}");
    }

    #[test]
    fn convection_kernel_matches_slow_path() {
        let s = space(3);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let w = random_velocity(&s, &mut rng, false);
        for form in [ConvectionForm::Skew, ConvectionForm::Emac] {
            let slow = assemble_convection(form, &w, &s).unwrap();
            let kernel = ConvectionKernel::new(&s, &slow);
            let mut values = vec![0.0; slow.nnz()];
            kernel.assemble_into(form, &w, &mut values);
            for (a, b) in slow.values().iter().zip(&values) {
                assert!((a - b).abs() <= 1e-14 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn velocity_block_patterns_coincide() {
        let s = space(3);
        let m = assemble_matrix(FormKind::Mass, &s);
        let k = assemble_matrix(FormKind::Stiffness, &s);
        let g = assemble_matrix(FormKind::GradDiv, &s);
        let w = FeFunction::zeros(Arc::clone(&s), Role::Velocity);
        let n = assemble_convection(ConvectionForm::Emac, &w, &s).unwrap();
        assert!(m.same_pattern(&k));
        assert!(m.same_pattern(&g));
        assert!(m.same_pattern(&n));
    }
}
