//! Online stage: precomputed reduced operators (with the convection form
//! chosen independently of the FOM's), dense r-dimensional time stepping,
//! and lifting back to the finite element space.
//!
//! The reduced operators are assembled once; the time loop never touches
//! FE-sized objects, so its cost is independent of n_vel. When the basis is
//! centered, substituting u = mean + sum a_k phi_k into every form produces
//! constant and linear shift terms, which are precomputed alongside the
//! quadratic tensor.

use std::sync::Arc;

use thiserror::Error;

use crate::assembly::{
    assemble_load, assemble_matrix, AssemblyError, ConvectionForm, FormKind,
};
use crate::fespace::{FeFunction, Role, THSpace};
use crate::fom::{Forcing, Scheme, TimeCoeff};
use crate::linsolve::{dense_solve, DenseMatrix, LinSolveError};
use crate::mesh::quadrature_rule;
use crate::pod::{PodError, PODBasis};

#[derive(Debug, Error)]
pub enum RomError {
    #[error("config validation error: {0}")]
    Config(String),
    #[error("Picard did not converge at reduced step {step} (last increment {increment:.3e})")]
    PicardDiverged { step: usize, increment: f64 },
    #[error(transparent)]
    Solver(#[from] LinSolveError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Pod(#[from] PodError),
}

/// Shift terms generated by a centered basis (u = mean + Phi a).
#[derive(Debug, Clone)]
pub struct CenteringTerms {
    /// b(mean, mean, phi_k)
    pub c0: Vec<f64>,
    /// [k][j] = b(mean, phi_j, phi_k); multiplies the advected unknown.
    pub c_advected: DenseMatrix,
    /// [k][i] = b(phi_i, mean, phi_k); multiplies the advecting iterate.
    pub c_advecting: DenseMatrix,
    /// (grad mean, grad phi_k); multiplies nu.
    pub stiff_shift: Vec<f64>,
    /// (div mean, div phi_k); multiplies mu.
    pub graddiv_shift: Vec<f64>,
    /// (mean, phi_k), for the lifted kinetic energy.
    pub mean_mass: Vec<f64>,
    pub mean_l2_sq: f64,
    pub mean_div_sq: f64,
}

/// The dense online model: r x r matrices, the r^3 convection tensor and the
/// reduced forcing components.
pub struct ReducedSystem {
    pub r: usize,
    pub form: ConvectionForm,
    /// (grad phi_i, grad phi_j); multiplies nu.
    pub a_r: DenseMatrix,
    /// (div phi_i, div phi_j); multiplies mu.
    pub g_r: DenseMatrix,
    /// T[i][j][k] = b_form(phi_i, phi_j, phi_k), layout (i*r + j)*r + k.
    pub tensor: Vec<f64>,
    /// Reduced forcing: components (f_m, phi_k) with their time coefficients.
    pub forcing: Vec<(TimeCoeff, Vec<f64>)>,
    pub centering: Option<CenteringTerms>,
}

impl ReducedSystem {
    pub fn tensor_at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.tensor[(i * self.r + j) * self.r + k]
    }

    /// N(w)[k][j] = sum_i w_i T[i][j][k]: the convection matrix linearized at
    /// the advecting coefficients w.
    pub fn convection_matrix(&self, w: &[f64]) -> DenseMatrix {
        let r = self.r;
        let mut n = DenseMatrix::zeros(r, r);
        for (i, &wi) in w.iter().enumerate() {
            if wi == 0.0 {
                continue;
            }
            for j in 0..r {
                let base = (i * r + j) * r;
                for k in 0..r {
                    n[(k, j)] += wi * self.tensor[base + k];
                }
            }
        }
        n
    }

    /// T(w, a)_k = sum_ij w_i a_j T[i][j][k].
    pub fn tensor_apply(&self, w: &[f64], a: &[f64]) -> Vec<f64> {
        let r = self.r;
        let mut out = vec![0.0; r];
        for (i, &wi) in w.iter().enumerate() {
            if wi == 0.0 {
                continue;
            }
            for (j, &aj) in a.iter().enumerate() {
                let c = wi * aj;
                if c == 0.0 {
                    continue;
                }
                let base = (i * r + j) * r;
                for k in 0..r {
                    out[k] += c * self.tensor[base + k];
                }
            }
        }
        out
    }

    /// Reduced forcing vector f_r(t).
    pub fn forcing_at(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.r];
        for (coeff, vec) in &self.forcing {
            let w = coeff.eval(t);
            for (o, v) in out.iter_mut().zip(vec) {
                *o += w * v;
            }
        }
        out
    }

    /// Kinetic energy of the lifted field 1/2 ||mean + Phi a||_0^2
    /// (1/2 ||a||^2 when the basis is uncentered).
    pub fn lifted_energy(&self, a: &[f64]) -> f64 {
        let own: f64 = a.iter().map(|x| x * x).sum();
        match &self.centering {
            None => 0.5 * own,
            Some(c) => {
                let cross: f64 = a.iter().zip(&c.mean_mass).map(|(x, y)| x * y).sum();
                0.5 * (own + 2.0 * cross + c.mean_l2_sq)
            }
        }
    }

    /// ||div(mean + Phi a)||_0 of the lifted field.
    pub fn lifted_div_norm(&self, a: &[f64]) -> f64 {
        let ga = self.g_r.matvec(a);
        let own: f64 = a.iter().zip(&ga).map(|(x, y)| x * y).sum();
        let total = match &self.centering {
            None => own,
            Some(c) => {
                let cross: f64 = a.iter().zip(&c.graddiv_shift).map(|(x, y)| x * y).sum();
                own + 2.0 * cross + c.mean_div_sq
            }
        };
        total.max(0.0).sqrt()
    }
}

/// Precomputes every reduced operator of the online model for the given
/// convection form. Entries agree with the full-order trilinear/bilinear
/// forms on the lifted basis functions; the reduced mass is the identity by
/// L²-orthonormality and is not stored.
pub fn reduce_operators(
    basis: &PODBasis,
    form: ConvectionForm,
    forcing: &Forcing,
    nu: f64,
) -> Result<ReducedSystem, RomError> {
    let space = basis.space();
    let r = basis.r();
    let stiffness = assemble_matrix(FormKind::Stiffness, space);
    let graddiv = assemble_matrix(FormKind::GradDiv, space);

    let sandwich = |op: &crate::assembly::SparseMatrix| -> DenseMatrix {
        let weighted: Vec<Vec<f64>> = basis.modes().iter().map(|m| op.matvec(m)).collect();
        let mut out = DenseMatrix::zeros(r, r);
        for i in 0..r {
            for j in i..r {
                let dot: f64 = basis.mode(i).iter().zip(&weighted[j]).map(|(a, b)| a * b).sum();
                out[(i, j)] = dot;
                out[(j, i)] = dot;
            }
        }
        out
    };
    let a_r = sandwich(&stiffness);
    let g_r = sandwich(&graddiv);

    // Convection tensor over the modes, with the mean appended as an extra
    // "mode" when the basis is centered; the mixed entries become the
    // centering shift terms.
    let centered = basis.is_centered();
    let n_fields = if centered { r + 1 } else { r };
    let mut fields: Vec<&[f64]> = basis.modes().iter().map(|m| m.as_slice()).collect();
    if let Some(mean) = basis.mean() {
        fields.push(mean);
    }
    let big = convection_tensor(space, form, &fields)?;
    let at = |i: usize, j: usize, k: usize| big[(i * n_fields + j) * n_fields + k];

    let mut tensor = vec![0.0; r * r * r];
    for i in 0..r {
        for j in 0..r {
            for k in 0..r {
                tensor[(i * r + j) * r + k] = at(i, j, k);
            }
        }
    }

    let centering = if centered {
        let mean = basis.mean().expect("centered");
        let mi = r; // index of the mean in the extended field list
        let mut c0 = vec![0.0; r];
        let mut c_advected = DenseMatrix::zeros(r, r);
        let mut c_advecting = DenseMatrix::zeros(r, r);
        for k in 0..r {
            c0[k] = at(mi, mi, k);
            for j in 0..r {
                c_advected[(k, j)] = at(mi, j, k);
            }
            for i in 0..r {
                c_advecting[(k, i)] = at(i, mi, k);
            }
        }
        let k_mean = stiffness.matvec(mean);
        let g_mean = graddiv.matvec(mean);
        let mass = assemble_matrix(FormKind::Mass, space);
        let m_mean = mass.matvec(mean);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        Some(CenteringTerms {
            c0,
            c_advected,
            c_advecting,
            stiff_shift: basis.modes().iter().map(|m| dot(m, &k_mean)).collect(),
            graddiv_shift: basis.modes().iter().map(|m| dot(m, &g_mean)).collect(),
            mean_mass: basis.modes().iter().map(|m| dot(m, &m_mean)).collect(),
            mean_l2_sq: dot(mean, &m_mean),
            mean_div_sq: dot(mean, &g_mean),
        })
    } else {
        None
    };

    let mut reduced_forcing = Vec::new();
    for comp in forcing.components(nu) {
        let load = assemble_load(space, |x| (comp.field)(x));
        let vec: Vec<f64> = basis
            .modes()
            .iter()
            .map(|m| m.iter().zip(&load).map(|(a, b)| a * b).sum())
            .collect();
        reduced_forcing.push((comp.coeff, vec));
    }

    Ok(ReducedSystem {
        r,
        form,
        a_r,
        g_r,
        tensor,
        forcing: reduced_forcing,
        centering,
    })
}

/// Dense tensor T[i][j][k] = b_form(f_i, f_j, f_k) over arbitrary coefficient
/// fields, by a single quadrature sweep.
fn convection_tensor(
    space: &Arc<THSpace>,
    form: ConvectionForm,
    fields: &[&[f64]],
) -> Result<Vec<f64>, RomError> {
    let nf = fields.len();
    let rule = quadrature_rule(crate::assembly::DEFAULT_QUAD_DEGREE).expect("supported");
    let p2v: Vec<[f64; 6]> = rule.points.iter().map(|&l| crate::fespace::p2_values(l)).collect();
    let p2g: Vec<[[f64; 2]; 6]> = rule
        .points
        .iter()
        .map(|&l| crate::fespace::p2_ref_grads(l))
        .collect();

    let mut tensor = vec![0.0; nf * nf * nf];
    let mut val = vec![[0.0f64; 2]; nf];
    let mut grad = vec![[[0.0f64; 2]; 2]; nf];
    let mut div = vec![0.0f64; nf];
    let mut dot_vv = vec![0.0f64; nf * nf];
    let mut adv = vec![[0.0f64; 2]; nf * nf];

    for t in 0..space.mesh().n_triangles() {
        let geo = space.element_geometry(t);
        let nodes = space.tri_nodes(t);
        for q in 0..rule.len() {
            let wq = rule.weights[q] * geo.det;
            let vals = &p2v[q];
            let mut grads = [[0.0f64; 2]; 6];
            for k in 0..6 {
                grads[k] = geo.phys_grad(p2g[q][k]);
            }
            for (fi, coeffs) in fields.iter().enumerate() {
                let mut v = [0.0f64; 2];
                let mut g = [[0.0f64; 2]; 2];
                for k in 0..6 {
                    let n = nodes[k];
                    for c in 0..2 {
                        let coef = coeffs[2 * n + c];
                        v[c] += vals[k] * coef;
                        g[c][0] += grads[k][0] * coef;
                        g[c][1] += grads[k][1] * coef;
                    }
                }
                val[fi] = v;
                grad[fi] = g;
                div[fi] = g[0][0] + g[1][1];
            }
            for j in 0..nf {
                for k in 0..nf {
                    dot_vv[j * nf + k] = val[j][0] * val[k][0] + val[j][1] * val[k][1];
                }
            }
            match form {
                ConvectionForm::Skew => {
                    // adv[i][j][c] = (u_i . grad) (u_j)_c
                    for i in 0..nf {
                        for j in 0..nf {
                            let g = &grad[j];
                            adv[i * nf + j] = [
                                val[i][0] * g[0][0] + val[i][1] * g[0][1],
                                val[i][0] * g[1][0] + val[i][1] * g[1][1],
                            ];
                        }
                    }
                    for i in 0..nf {
                        let hdiv = 0.5 * div[i];
                        for j in 0..nf {
                            let a = adv[i * nf + j];
                            let base = (i * nf + j) * nf;
                            for k in 0..nf {
                                tensor[base + k] += wq
                                    * (a[0] * val[k][0]
                                        + a[1] * val[k][1]
                                        + hdiv * dot_vv[j * nf + k]);
                            }
                        }
                    }
                }
                ConvectionForm::Emac => {
                    // adv[i][j][c] = (2 D(u_i) u_j)_c
                    for i in 0..nf {
                        let g = &grad[i];
                        let em = [
                            [2.0 * g[0][0], g[0][1] + g[1][0]],
                            [g[1][0] + g[0][1], 2.0 * g[1][1]],
                        ];
                        for j in 0..nf {
                            adv[i * nf + j] = [
                                em[0][0] * val[j][0] + em[0][1] * val[j][1],
                                em[1][0] * val[j][0] + em[1][1] * val[j][1],
                            ];
                        }
                    }
                    for i in 0..nf {
                        let dv = div[i];
                        for j in 0..nf {
                            let a = adv[i * nf + j];
                            let base = (i * nf + j) * nf;
                            for k in 0..nf {
                                tensor[base + k] += wq
                                    * (a[0] * val[k][0]
                                        + a[1] * val[k][1]
                                        + dv * dot_vv[j * nf + k]);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(tensor)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RomConfig {
    pub scheme: Scheme,
    pub dt: f64,
    pub nu: f64,
    pub mu: f64,
    pub t_start: f64,
    pub n_steps: usize,
    pub picard_tol: f64,
    pub picard_max_iters: usize,
}

pub const DEFAULT_ROM_PICARD_TOL: f64 = 1e-12;

impl RomConfig {
    pub fn new(scheme: Scheme, dt: f64, nu: f64, mu: f64, t_start: f64, n_steps: usize) -> Self {
        RomConfig {
            scheme,
            dt,
            nu,
            mu,
            t_start,
            n_steps,
            picard_tol: DEFAULT_ROM_PICARD_TOL,
            picard_max_iters: 50,
        }
    }

    fn validate(&self, r: usize) -> Result<(), RomError> {
        if r == 0 {
            return Err(RomError::Config("r must be >= 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(RomError::Config("dt must be positive".into()));
        }
        if self.mu < 0.0 {
            return Err(RomError::Config("mu must be >= 0".into()));
        }
        Ok(())
    }
}

/// Reduced coefficient trajectory a^0 ... a^N with per-step diagnostics.
#[derive(Debug, Clone)]
pub struct RomTrajectory {
    pub times: Vec<f64>,
    pub coeffs: Vec<Vec<f64>>,
    pub reduced_energy: Vec<f64>,
    pub div_norm: Vec<f64>,
    pub form: ConvectionForm,
    pub nu: f64,
    pub mu: f64,
    pub dt: f64,
    pub scheme: Scheme,
}

impl RomTrajectory {
    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }
}

/// One reduced time step. Implicit Euler solves the nonlinear r x r system
/// by Picard on the frozen advecting slot; BDF2 evaluates the advecting slot
/// at 2a^{n-1} - a^{n-2} and performs one dense solve.
#[allow(clippy::too_many_arguments)]
pub fn rom_step(
    sys: &ReducedSystem,
    cfg: &RomConfig,
    a_prev: &[f64],
    a_prev2: Option<&[f64]>,
    t_new: f64,
    step: usize,
) -> Result<Vec<f64>, RomError> {
    let r = sys.r;
    if a_prev.len() != r {
        return Err(RomError::Config(format!(
            "coefficient length {} != r {}",
            a_prev.len(),
            r
        )));
    }
    let dt = cfg.dt;
    let f_r = sys.forcing_at(t_new);

    let base_matrix = |alpha: f64| -> DenseMatrix {
        let mut m = DenseMatrix::zeros(r, r);
        for i in 0..r {
            for j in 0..r {
                m[(i, j)] = cfg.nu * sys.a_r[(i, j)] + cfg.mu * sys.g_r[(i, j)];
            }
            m[(i, i)] += alpha;
        }
        if let Some(c) = &sys.centering {
            for i in 0..r {
                for j in 0..r {
                    m[(i, j)] += c.c_advected[(i, j)];
                }
            }
        }
        m
    };
    let shift_rhs = |rhs: &mut [f64], w: &[f64]| {
        if let Some(c) = &sys.centering {
            let cw = c.c_advecting.matvec(w);
            for k in 0..r {
                rhs[k] -= c.c0[k] + cw[k] + cfg.nu * c.stiff_shift[k] + cfg.mu * c.graddiv_shift[k];
            }
        }
    };

    let use_bdf2 = cfg.scheme == Scheme::Bdf2SemiImplicit && a_prev2.is_some();
    if use_bdf2 {
        let a2 = a_prev2.expect("checked");
        let w: Vec<f64> = a_prev.iter().zip(a2).map(|(a, b)| 2.0 * a - b).collect();
        let mut m = base_matrix(1.5 / dt);
        let n = sys.convection_matrix(&w);
        for i in 0..r {
            for j in 0..r {
                m[(i, j)] += n[(i, j)];
            }
        }
        let mut rhs: Vec<f64> = a_prev
            .iter()
            .zip(a2)
            .zip(&f_r)
            .map(|((a, b), f)| (2.0 * a - 0.5 * b) / dt + f)
            .collect();
        shift_rhs(&mut rhs, &w);
        Ok(dense_solve(&m, &rhs)?)
    } else {
        let mut w = a_prev.to_vec();
        let mut iters = 0;
        loop {
            iters += 1;
            let mut m = base_matrix(1.0 / dt);
            let n = sys.convection_matrix(&w);
            for i in 0..r {
                for j in 0..r {
                    m[(i, j)] += n[(i, j)];
                }
            }
            let mut rhs: Vec<f64> = a_prev
                .iter()
                .zip(&f_r)
                .map(|(a, f)| a / dt + f)
                .collect();
            shift_rhs(&mut rhs, &w);
            let a_new = dense_solve(&m, &rhs)?;
            let inc: f64 = a_new
                .iter()
                .zip(&w)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            if inc <= cfg.picard_tol {
                return Ok(a_new);
            }
            if iters >= cfg.picard_max_iters {
                return Err(RomError::PicardDiverged {
                    step,
                    increment: inc,
                });
            }
            w = a_new;
        }
    }
}

/// Runs the reduced model from the given initial coefficients, recording the
/// trajectory and per-step diagnostics. The initial coefficients are
/// normally the L² projection of the FOM state at the window start.
pub fn rom_run(sys: &ReducedSystem, cfg: &RomConfig, a0: Vec<f64>) -> Result<RomTrajectory, RomError> {
    cfg.validate(sys.r)?;
    if a0.len() != sys.r {
        return Err(RomError::Config(format!(
            "initial coefficients have length {}, expected {}",
            a0.len(),
            sys.r
        )));
    }
    let mut traj = RomTrajectory {
        times: Vec::with_capacity(cfg.n_steps + 1),
        coeffs: Vec::with_capacity(cfg.n_steps + 1),
        reduced_energy: Vec::with_capacity(cfg.n_steps + 1),
        div_norm: Vec::with_capacity(cfg.n_steps + 1),
        form: sys.form,
        nu: cfg.nu,
        mu: cfg.mu,
        dt: cfg.dt,
        scheme: cfg.scheme,
    };
    let push = |traj: &mut RomTrajectory, t: f64, a: &[f64]| {
        traj.times.push(t);
        traj.reduced_energy.push(sys.lifted_energy(a));
        traj.div_norm.push(sys.lifted_div_norm(a));
        traj.coeffs.push(a.to_vec());
    };
    push(&mut traj, cfg.t_start, &a0);
    let mut a = a0;
    let mut a_prev: Option<Vec<f64>> = None;
    for n in 1..=cfg.n_steps {
        let t_new = cfg.t_start + n as f64 * cfg.dt;
        let a_new = rom_step(sys, cfg, &a, a_prev.as_deref(), t_new, n)?;
        a_prev = Some(std::mem::replace(&mut a, a_new));
        push(&mut traj, t_new, &a);
    }
    Ok(traj)
}

/// mean + Phi a as an FE velocity function.
pub fn lift(basis: &PODBasis, a: &[f64]) -> FeFunction {
    FeFunction::from_coeffs(
        Arc::clone(basis.space()),
        Role::Velocity,
        basis.lift_coeffs(a),
    )
    .expect("lift length matches space")
}
