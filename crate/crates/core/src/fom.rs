//! Full-order model: grad-div stabilized Galerkin time stepping with the
//! skew-symmetric convection form, snapshot recording and per-step
//! diagnostics.
//!
//! Two schemes are provided: a fully implicit Euler step solved by Picard
//! iteration on the frozen advecting field, and the semi-implicit BDF2 in
//! which the convection is advected by the extrapolation 2u^{n-1} - u^{n-2}
//! and each step costs one linear solve. The first BDF2 step is
//! bootstrapped with one implicit-Euler step.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::{
    assemble_load, assemble_matrix, AssemblyError, ConvectionForm, ConvectionKernel, FormKind,
    SparseMatrix,
};
use crate::fespace::{interpolate_velocity, FeFunction, Role, THSpace};
use crate::linsolve::{LinSolveError, SaddleSolver, SaddleSystem};

#[derive(Debug, Error)]
pub enum FomError {
    #[error("config validation error: {0}")]
    Config(String),
    #[error("step {step} failed: {detail}")]
    Step { step: usize, detail: String },
    #[error("Picard did not converge at step {step} (last increment {increment:.3e})")]
    PicardDiverged { step: usize, increment: f64 },
    #[error(transparent)]
    Solver(#[from] LinSolveError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
}

/// Time discretization of the momentum equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    ImplicitEulerPicard,
    Bdf2SemiImplicit,
}

/// Dirichlet value attached to a boundary marker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BcValue {
    Zero,
    Constant([f64; 2]),
}

/// Time coefficient of one separable forcing component:
/// either amp*cos(omega*t + phase) or a linearly interpolated table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeCoeff {
    Cosine { amp: f64, omega: f64, phase: f64 },
    Table(Vec<(f64, f64)>),
}

impl TimeCoeff {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            TimeCoeff::Cosine { amp, omega, phase } => amp * (omega * t + phase).cos(),
            TimeCoeff::Table(samples) => {
                if samples.is_empty() {
                    return 0.0;
                }
                if t <= samples[0].0 {
                    return samples[0].1;
                }
                if t >= samples[samples.len() - 1].0 {
                    return samples[samples.len() - 1].1;
                }
                let idx = samples.partition_point(|&(ts, _)| ts <= t);
                let (t0, v0) = samples[idx - 1];
                let (t1, v1) = samples[idx];
                v0 + (v1 - v0) * (t - t0) / (t1 - t0)
            }
        }
    }
}

/// One separable component: coeff(t) * field(x).
pub struct ForcingComponent {
    pub coeff: TimeCoeff,
    pub field: Arc<dyn Fn([f64; 2]) -> [f64; 2] + Send + Sync>,
}

/// Named body-force cases. Every case decomposes into separable
/// (time coefficient, spatial field) components; the pointwise evaluation
/// sums the same components, so the full-order and reduced-order paths see
/// identical data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Forcing {
    Zero,
    /// Forcing of the manufactured solution (depends on viscosity).
    Manufactured,
    /// Rotating-phase body force
    /// amplitude * (sin(2*pi*y + omega*t), -sin(2*pi*x + omega*t)).
    Rotating { amplitude: f64, omega: f64 },
    /// Spatially constant force from a (t, fx, fy) sample table.
    Table(Vec<(f64, f64, f64)>),
}

impl Forcing {
    pub fn components(&self, nu: f64) -> Vec<ForcingComponent> {
        match self {
            Forcing::Zero => Vec::new(),
            Forcing::Manufactured => manufactured::forcing_components(nu),
            Forcing::Rotating { amplitude, omega } => {
                let a = *amplitude;
                vec![
                    ForcingComponent {
                        coeff: TimeCoeff::Cosine {
                            amp: a,
                            omega: *omega,
                            phase: 0.0,
                        },
                        field: Arc::new(|p: [f64; 2]| {
                            [(2.0 * PI * p[1]).sin(), -(2.0 * PI * p[0]).sin()]
                        }),
                    },
                    ForcingComponent {
                        coeff: TimeCoeff::Cosine {
                            amp: a,
                            omega: *omega,
                            phase: -PI / 2.0,
                        },
                        field: Arc::new(|p: [f64; 2]| {
                            [(2.0 * PI * p[1]).cos(), -(2.0 * PI * p[0]).cos()]
                        }),
                    },
                ]
            }
            Forcing::Table(samples) => {
                let tx: Vec<(f64, f64)> = samples.iter().map(|&(t, fx, _)| (t, fx)).collect();
                let ty: Vec<(f64, f64)> = samples.iter().map(|&(t, _, fy)| (t, fy)).collect();
                vec![
                    ForcingComponent {
                        coeff: TimeCoeff::Table(tx),
                        field: Arc::new(|_| [1.0, 0.0]),
                    },
                    ForcingComponent {
                        coeff: TimeCoeff::Table(ty),
                        field: Arc::new(|_| [0.0, 1.0]),
                    },
                ]
            }
        }
    }

    pub fn eval(&self, x: [f64; 2], t: f64, nu: f64) -> [f64; 2] {
        let mut out = [0.0; 2];
        for c in self.components(nu) {
            let w = c.coeff.eval(t);
            let f = (c.field)(x);
            out[0] += w * f[0];
            out[1] += w * f[1];
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Forcing::Zero)
    }
}

/// Manufactured solution on the unit square: stream function
/// psi = sin^2(pi x) sin^2(pi y) cos(t), velocity u = (d psi/dy, -d psi/dx),
/// pressure p = sin(2 pi x) sin(2 pi y) cos(t). Divergence-free, homogeneous
/// Dirichlet, zero-mean pressure; the body force below closes the momentum
/// equation exactly.
pub mod manufactured {
    use super::*;

    pub fn velocity(p: [f64; 2], t: f64) -> [f64; 2] {
        let g = t.cos();
        [
            PI * (PI * p[0]).sin().powi(2) * (2.0 * PI * p[1]).sin() * g,
            -PI * (2.0 * PI * p[0]).sin() * (PI * p[1]).sin().powi(2) * g,
        ]
    }

    pub fn pressure(p: [f64; 2], t: f64) -> f64 {
        (2.0 * PI * p[0]).sin() * (2.0 * PI * p[1]).sin() * t.cos()
    }

    /// Spatial shape multiplied by cos(t) in the velocity.
    fn u_shape(p: [f64; 2]) -> [f64; 2] {
        [
            PI * (PI * p[0]).sin().powi(2) * (2.0 * PI * p[1]).sin(),
            -PI * (2.0 * PI * p[0]).sin() * (PI * p[1]).sin().powi(2),
        ]
    }

    /// -nu * Laplacian(u_shape) + grad(p_shape), multiplied by cos(t).
    fn visc_pres_shape(p: [f64; 2], nu: f64) -> [f64; 2] {
        let (s2x, c2x) = ((2.0 * PI * p[0]).sin(), (2.0 * PI * p[0]).cos());
        let (s2y, c2y) = ((2.0 * PI * p[1]).sin(), (2.0 * PI * p[1]).cos());
        let pi3 = PI.powi(3);
        [
            -nu * 2.0 * pi3 * s2y * (2.0 * c2x - 1.0) + 2.0 * PI * c2x * s2y,
            nu * 2.0 * pi3 * s2x * (2.0 * c2y - 1.0) + 2.0 * PI * s2x * c2y,
        ]
    }

    /// (u . grad) u without the time factor; multiplied by cos^2(t).
    fn convection_shape(p: [f64; 2]) -> [f64; 2] {
        let (sx, sy) = ((PI * p[0]).sin(), (PI * p[1]).sin());
        let (s2x, c2x) = ((2.0 * PI * p[0]).sin(), (2.0 * PI * p[0]).cos());
        let (s2y, c2y) = ((2.0 * PI * p[1]).sin(), (2.0 * PI * p[1]).cos());
        let pi3 = PI.powi(3);
        [
            pi3 * s2x * sx * sx * (s2y * s2y - 2.0 * sy * sy * c2y),
            pi3 * sy * sy * s2y * (s2x * s2x - 2.0 * sx * sx * c2x),
        ]
    }

    pub fn forcing(p: [f64; 2], t: f64, nu: f64) -> [f64; 2] {
        let g = t.cos();
        let gp = -t.sin();
        let u = u_shape(p);
        let vp = visc_pres_shape(p, nu);
        let cv = convection_shape(p);
        [
            gp * u[0] + g * vp[0] + g * g * cv[0],
            gp * u[1] + g * vp[1] + g * g * cv[1],
        ]
    }

    pub(super) fn forcing_components(nu: f64) -> Vec<ForcingComponent> {
        vec![
            // d/dt term: cos(t + pi/2) = -sin(t)
            ForcingComponent {
                coeff: TimeCoeff::Cosine {
                    amp: 1.0,
                    omega: 1.0,
                    phase: PI / 2.0,
                },
                field: Arc::new(u_shape),
            },
            // viscous + pressure-gradient term: cos(t)
            ForcingComponent {
                coeff: TimeCoeff::Cosine {
                    amp: 1.0,
                    omega: 1.0,
                    phase: 0.0,
                },
                field: Arc::new(move |p| visc_pres_shape(p, nu)),
            },
            // convection term: cos^2(t) = 1/2 + 1/2 cos(2t)
            ForcingComponent {
                coeff: TimeCoeff::Cosine {
                    amp: 0.5,
                    omega: 0.0,
                    phase: 0.0,
                },
                field: Arc::new(convection_shape),
            },
            ForcingComponent {
                coeff: TimeCoeff::Cosine {
                    amp: 0.5,
                    omega: 2.0,
                    phase: 0.0,
                },
                field: Arc::new(convection_shape),
            },
        ]
    }
}

/// Initial velocity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialCondition {
    Zero,
    Manufactured,
}

/// Treatment of the convection term in the FOM. `Disabled` is the
/// unsteady-Stokes test hook.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvectionSetting {
    Form(ConvectionFormSer),
    Disabled,
}

/// Serializable mirror of [`ConvectionForm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvectionFormSer {
    Skew,
    Emac,
}

impl From<ConvectionFormSer> for ConvectionForm {
    fn from(f: ConvectionFormSer) -> Self {
        match f {
            ConvectionFormSer::Skew => ConvectionForm::Skew,
            ConvectionFormSer::Emac => ConvectionForm::Emac,
        }
    }
}

impl From<ConvectionForm> for ConvectionFormSer {
    fn from(f: ConvectionForm) -> Self {
        match f {
            ConvectionForm::Skew => ConvectionFormSer::Skew,
            ConvectionForm::Emac => ConvectionFormSer::Emac,
        }
    }
}

/// Snapshot recording window and stride.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSpec {
    pub window: [f64; 2],
    pub stride: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FomConfig {
    /// Kinematic viscosity (m^2/s).
    pub nu: f64,
    /// Grad-div stabilization parameter; 0 selects the plain Galerkin variant.
    pub mu: f64,
    pub dt: f64,
    pub t_end: f64,
    pub scheme: Scheme,
    pub picard_tol: f64,
    pub picard_max_iters: usize,
    pub forcing: Forcing,
    pub initial: InitialCondition,
    /// Dirichlet values per marker; markers not listed get homogeneous data.
    pub bc: BTreeMap<i32, BcValue>,
    pub snapshots: Option<SnapshotSpec>,
    pub convection: ConvectionSetting,
    /// nu = 0 is only legal in this designated test mode (conservation
    /// experiments with zero forcing).
    pub nu_zero_mode: bool,
}

impl PartialEq for FomConfig {
    fn eq(&self, other: &Self) -> bool {
        self.nu == other.nu
            && self.mu == other.mu
            && self.dt == other.dt
            && self.t_end == other.t_end
            && self.scheme == other.scheme
            && self.forcing == other.forcing
    }
}

pub const DEFAULT_PICARD_TOL: f64 = 1e-10;
pub const DEFAULT_PICARD_MAX_ITERS: usize = 50;
/// Used by experiment presets when a run does not specify mu.
pub const DEFAULT_MU: f64 = 0.05;

impl FomConfig {
    pub fn new(nu: f64, mu: f64, dt: f64, t_end: f64) -> Self {
        FomConfig {
            nu,
            mu,
            dt,
            t_end,
            scheme: Scheme::ImplicitEulerPicard,
            picard_tol: DEFAULT_PICARD_TOL,
            picard_max_iters: DEFAULT_PICARD_MAX_ITERS,
            forcing: Forcing::Zero,
            initial: InitialCondition::Zero,
            bc: BTreeMap::new(),
            snapshots: None,
            convection: ConvectionSetting::Form(ConvectionFormSer::Skew),
            nu_zero_mode: false,
        }
    }

    /// Number of time steps M with dt = T/M.
    pub fn n_steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<(), FomError> {
        if !(self.dt > 0.0) || !(self.t_end > 0.0) {
            return Err(FomError::Config("dt and t_end must be positive".into()));
        }
        let m = self.n_steps();
        if m == 0 || ((m as f64) * self.dt - self.t_end).abs() > 1e-12 * self.t_end {
            return Err(FomError::Config(format!(
                "dt = {} does not divide t_end = {}",
                self.dt, self.t_end
            )));
        }
        if self.mu < 0.0 {
            return Err(FomError::Config("mu must be >= 0".into()));
        }
        if self.nu < 0.0 || (self.nu == 0.0 && !self.nu_zero_mode) {
            return Err(FomError::Config(
                "nu must be positive (nu = 0 requires the designated test mode)".into(),
            ));
        }
        if self.picard_tol <= 0.0 || self.picard_max_iters == 0 {
            return Err(FomError::Config("invalid Picard parameters".into()));
        }
        if let Some(spec) = &self.snapshots {
            let eps = 1e-9 * self.dt;
            if spec.window[0] > spec.window[1]
                || spec.window[0] < -eps
                || spec.window[1] > self.t_end + eps
            {
                return Err(FomError::Config(format!(
                    "snapshot window {:?} outside [0, {}]",
                    spec.window, self.t_end
                )));
            }
            if spec.stride == 0 {
                return Err(FomError::Config("snapshot stride must be >= 1".into()));
            }
        }
        Ok(())
    }

    fn bc_value(&self) -> impl Fn(i32, [f64; 2], usize) -> f64 + '_ {
        move |marker, _pos, comp| match self.bc.get(&marker) {
            None | Some(BcValue::Zero) => 0.0,
            Some(BcValue::Constant(v)) => v[comp],
        }
    }
}

/// Steps (0-based) at which snapshots are recorded: every `stride`-th step
/// whose time lies in the window, both endpoints included.
pub fn snapshot_steps(cfg: &FomConfig) -> Vec<usize> {
    let Some(spec) = &cfg.snapshots else {
        return Vec::new();
    };
    let m = cfg.n_steps();
    let eps = 1e-9 * cfg.dt;
    let mut out = Vec::new();
    let mut anchor: Option<usize> = None;
    for n in 0..=m {
        let t = n as f64 * cfg.dt;
        if t >= spec.window[0] - eps && t <= spec.window[1] + eps {
            let a = *anchor.get_or_insert(n);
            if (n - a) % spec.stride == 0 {
                out.push(n);
            }
        }
    }
    out
}

/// Ordered FOM velocity snapshots with timestamps.
#[derive(Debug, Clone)]
pub struct SnapshotSet {
    space: Arc<THSpace>,
    times: Vec<f64>,
    vectors: Vec<Vec<f64>>,
    mean: Option<Vec<f64>>,
    pub meta: SnapshotMeta,
}

/// Restorable snapshot-file metadata (the in-memory set additionally keeps
/// the generating config when it came from [`fom_run`]).
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotMeta {
    pub dt: f64,
    pub t_start: f64,
    pub centering: bool,
    pub config: Option<FomConfig>,
}

impl SnapshotSet {
    pub fn new(
        space: Arc<THSpace>,
        times: Vec<f64>,
        vectors: Vec<Vec<f64>>,
        meta: SnapshotMeta,
    ) -> Result<Self, FomError> {
        if times.len() != vectors.len() {
            return Err(FomError::Config(
                "snapshot times/vectors length mismatch".into(),
            ));
        }
        for w in times.windows(2) {
            if w[1] <= w[0] {
                return Err(FomError::Config(
                    "snapshot times must be strictly increasing".into(),
                ));
            }
        }
        for v in &vectors {
            if v.len() != space.n_vel() {
                return Err(FomError::Config(format!(
                    "snapshot vector length {} != n_vel {}",
                    v.len(),
                    space.n_vel()
                )));
            }
        }
        Ok(SnapshotSet {
            space,
            times,
            vectors,
            mean: None,
            meta,
        })
    }

    pub fn space(&self) -> &Arc<THSpace> {
        &self.space
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn vector(&self, j: usize) -> &[f64] {
        &self.vectors[j]
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn snapshot_fn(&self, j: usize) -> FeFunction {
        FeFunction::from_coeffs(
            Arc::clone(&self.space),
            Role::Velocity,
            self.vectors[j].clone(),
        )
        .expect("snapshot length validated at construction")
    }

    /// Ensemble mean (1/M) sum of the snapshots.
    pub fn ensemble_mean(&self) -> Vec<f64> {
        let n = self.space.n_vel();
        let mut mean = vec![0.0; n];
        if self.vectors.is_empty() {
            return mean;
        }
        for v in &self.vectors {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        let scale = 1.0 / self.vectors.len() as f64;
        for m in mean.iter_mut() {
            *m *= scale;
        }
        mean
    }

    pub fn mean(&self) -> Option<&[f64]> {
        self.mean.as_deref()
    }

    pub fn set_mean(&mut self, mean: Option<Vec<f64>>) {
        self.mean = mean;
    }

    /// Restricts the set to snapshots with time inside `window` (inclusive).
    pub fn select_window(&self, window: [f64; 2]) -> SnapshotSet {
        let eps = 1e-9 * self.meta.dt.max(1e-30);
        let mut times = Vec::new();
        let mut vectors = Vec::new();
        for (t, v) in self.times.iter().zip(&self.vectors) {
            if *t >= window[0] - eps && *t <= window[1] + eps {
                times.push(*t);
                vectors.push(v.clone());
            }
        }
        let t_start = times.first().copied().unwrap_or(self.meta.t_start);
        SnapshotSet {
            space: Arc::clone(&self.space),
            times,
            vectors,
            mean: None,
            meta: SnapshotMeta {
                t_start,
                ..self.meta.clone()
            },
        }
    }
}

/// The assembled time-independent operators of one space.
pub struct FomOperators {
    pub space: Arc<THSpace>,
    pub mass: SparseMatrix,
    pub stiffness: SparseMatrix,
    pub graddiv: SparseMatrix,
    pub divergence: SparseMatrix,
    kernel: ConvectionKernel,
}

impl FomOperators {
    pub fn new(space: &Arc<THSpace>) -> Self {
        let mass = assemble_matrix(FormKind::Mass, space);
        let stiffness = assemble_matrix(FormKind::Stiffness, space);
        let graddiv = assemble_matrix(FormKind::GradDiv, space);
        let divergence = assemble_matrix(FormKind::Divergence, space);
        assert!(mass.same_pattern(&stiffness) && mass.same_pattern(&graddiv));
        let kernel = ConvectionKernel::new(space, &mass);
        FomOperators {
            space: Arc::clone(space),
            mass,
            stiffness,
            graddiv,
            divergence,
            kernel,
        }
    }

    /// Mass-weighted L² norm of a coefficient vector.
    pub fn l2_norm(&self, v: &[f64]) -> f64 {
        self.mass.bilinear(v, v).max(0.0).sqrt()
    }

    /// ||div u||_0 via the grad-div quadratic form.
    pub fn div_norm(&self, v: &[f64]) -> f64 {
        self.graddiv.bilinear(v, v).max(0.0).sqrt()
    }

    pub fn kinetic_energy(&self, v: &[f64]) -> f64 {
        0.5 * self.mass.bilinear(v, v)
    }
}

/// Holds the step-matrix workspace and the cached saddle solver of one run.
pub struct FomStepper {
    pub ops: FomOperators,
    cfg: FomConfig,
    constraints: Vec<(usize, f64)>,
    solver: SaddleSolver,
    a_step: SparseMatrix,
    conv_values: Vec<f64>,
    g_zero: Vec<f64>,
    pinned: Option<usize>,
}

/// State at one time level; `u` is u^n, `u_prev` is u^{n-1} (kept for BDF2).
#[derive(Debug, Clone)]
pub struct FomState {
    pub step: usize,
    pub t: f64,
    pub u: Vec<f64>,
    pub u_prev: Option<Vec<f64>>,
    pub p: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    pub picard_iters: usize,
    pub picard_increment: f64,
}

impl FomStepper {
    pub fn new(space: &Arc<THSpace>, cfg: &FomConfig) -> Result<Self, FomError> {
        cfg.validate()?;
        let ops = FomOperators::new(space);
        let constraints = space.dirichlet_values(cfg.bc_value());
        let fully_dirichlet = space
            .mesh()
            .boundary_edges()
            .iter()
            .all(|be| space.dirichlet_markers().contains(&be.marker));
        let pinned = fully_dirichlet.then_some(0);
        let a_step = ops.mass.clone();
        let nnz = a_step.nnz();
        Ok(FomStepper {
            ops,
            cfg: cfg.clone(),
            constraints,
            solver: SaddleSolver::new(),
            a_step,
            conv_values: vec![0.0; nnz],
            g_zero: vec![0.0; space.n_pre()],
            pinned,
        })
    }

    pub fn config(&self) -> &FomConfig {
        &self.cfg
    }

    /// Initial state at t = 0 with Dirichlet values applied.
    pub fn initial_state(&self) -> FomState {
        let space = &self.ops.space;
        let mut u = match self.cfg.initial {
            InitialCondition::Zero => vec![0.0; space.n_vel()],
            InitialCondition::Manufactured => {
                interpolate_velocity(space, |p| manufactured::velocity(p, 0.0)).into_coeffs()
            }
        };
        for &(dof, val) in &self.constraints {
            u[dof] = val;
        }
        FomState {
            step: 0,
            t: 0.0,
            u,
            u_prev: None,
            p: vec![0.0; space.n_pre()],
        }
    }

    /// Builds the step matrix alpha*M + nu*K + mu*G + N(w) into the
    /// workspace; `w = None` disables convection.
    fn fill_step_matrix(&mut self, alpha: f64, w: Option<&[f64]>) -> Result<(), FomError> {
        let form = match self.cfg.convection {
            ConvectionSetting::Form(f) => Some(ConvectionForm::from(f)),
            ConvectionSetting::Disabled => None,
        };
        match (form, w) {
            (Some(form), Some(wv)) => {
                let wf = FeFunction::from_coeffs(
                    Arc::clone(&self.ops.space),
                    Role::Velocity,
                    wv.to_vec(),
                )
                .map_err(|e| FomError::Config(e.to_string()))?;
                self.ops
                    .kernel
                    .assemble_into(form, &wf, &mut self.conv_values);
            }
            _ => self.conv_values.iter_mut().for_each(|v| *v = 0.0),
        }
        let nu = self.cfg.nu;
        let mu = self.cfg.mu;
        let mv = self.ops.mass.values();
        let kv = self.ops.stiffness.values();
        let gv = self.ops.graddiv.values();
        let av = self.a_step.values_mut();
        for i in 0..av.len() {
            av[i] = alpha * mv[i] + nu * kv[i] + mu * gv[i] + self.conv_values[i];
        }
        Ok(())
    }

    fn solve(&mut self, rhs: &[f64]) -> Result<(Vec<f64>, Vec<f64>), FomError> {
        let space = Arc::clone(&self.ops.space);
        let sys = SaddleSystem {
            a: &self.a_step,
            b: &self.ops.divergence,
            f: rhs,
            g: &self.g_zero,
            constraints: &self.constraints,
            pinned_pressure: self.pinned,
            mean_shift: Some((space.pressure_weights(), space.domain_area())),
        };
        Ok(self.solver.solve(&sys)?)
    }

    /// Advances the state one time step.
    pub fn step(&mut self, state: &mut FomState) -> Result<StepInfo, FomError> {
        let dt = self.cfg.dt;
        let t_new = (state.step + 1) as f64 * dt;
        let nu = self.cfg.nu;
        let forcing = self.cfg.forcing.clone();
        let load = if forcing.is_zero() {
            vec![0.0; self.ops.space.n_vel()]
        } else {
            assemble_load(&self.ops.space, |x| forcing.eval(x, t_new, nu))
        };

        let use_bdf2 = self.cfg.scheme == Scheme::Bdf2SemiImplicit && state.u_prev.is_some();
        let info = if use_bdf2 {
            let u1 = &state.u;
            let u2 = state.u_prev.as_ref().expect("checked");
            let w: Vec<f64> = u1.iter().zip(u2).map(|(a, b)| 2.0 * a - b).collect();
            // rhs = F + M (2 u^{n-1} - 1/2 u^{n-2}) / dt
            let comb: Vec<f64> = u1
                .iter()
                .zip(u2)
                .map(|(a, b)| (2.0 * a - 0.5 * b) / dt)
                .collect();
            let mut rhs = self.ops.mass.matvec(&comb);
            for (r, l) in rhs.iter_mut().zip(&load) {
                *r += l;
            }
            self.fill_step_matrix(1.5 / dt, Some(&w))?;
            let (u_new, p_new) = self.solve(&rhs)?;
            state.u_prev = Some(std::mem::replace(&mut state.u, u_new));
            state.p = p_new;
            StepInfo {
                picard_iters: 1,
                picard_increment: 0.0,
            }
        } else {
            // implicit Euler, Picard on the frozen advecting field
            let mass_u = self.ops.mass.matvec(&state.u);
            let rhs: Vec<f64> = mass_u
                .iter()
                .zip(&load)
                .map(|(m, l)| m / dt + l)
                .collect();
            let convecting = matches!(self.cfg.convection, ConvectionSetting::Form(_));
            let mut w = state.u.clone();
            let mut iters = 0;
            let (u_new, p_new, last_inc) = loop {
                iters += 1;
                self.fill_step_matrix(1.0 / dt, convecting.then_some(&w[..]))?;
                let (u_k, p_k) = self.solve(&rhs)?;
                let diff: Vec<f64> = u_k.iter().zip(&w).map(|(a, b)| a - b).collect();
                let inc = self.ops.l2_norm(&diff);
                // a linear step (no convection) is exact after one solve
                if !convecting || inc <= self.cfg.picard_tol {
                    break (u_k, p_k, inc);
                }
                if iters >= self.cfg.picard_max_iters {
                    return Err(FomError::PicardDiverged {
                        step: state.step + 1,
                        increment: inc,
                    });
                }
                w = u_k;
            };
            state.u_prev = Some(std::mem::replace(&mut state.u, u_new));
            state.p = p_new;
            StepInfo {
                picard_iters: iters,
                picard_increment: last_inc,
            }
        };
        state.step += 1;
        state.t = t_new;
        Ok(info)
    }
}

/// Per-step diagnostic series of a FOM run.
#[derive(Debug, Clone, Default)]
pub struct FomDiagnostics {
    pub steps: Vec<usize>,
    pub times: Vec<f64>,
    pub kinetic_energy: Vec<f64>,
    pub div_norm: Vec<f64>,
    /// L² velocity error against the manufactured solution, when configured.
    pub err_l2: Option<Vec<f64>>,
}

pub struct FomRun {
    pub snapshots: SnapshotSet,
    pub diagnostics: FomDiagnostics,
    pub final_state: FomState,
}

/// Runs the configured scheme from t = 0 to t_end, recording snapshots in
/// the configured window and per-step diagnostics.
pub fn fom_run(space: &Arc<THSpace>, cfg: &FomConfig) -> Result<FomRun, FomError> {
    let mut stepper = FomStepper::new(space, cfg)?;
    let mut state = stepper.initial_state();
    let record = snapshot_steps(cfg);
    let track_error = cfg.forcing == Forcing::Manufactured;

    let mut snaps_t = Vec::new();
    let mut snaps_v = Vec::new();
    let mut diag = FomDiagnostics {
        err_l2: track_error.then(Vec::new),
        ..Default::default()
    };
    let mut record_idx = 0usize;

    let m = cfg.n_steps();
    for n in 0..=m {
        if n > 0 {
            stepper.step(&mut state)?;
        }
        diag.steps.push(state.step);
        diag.times.push(state.t);
        diag.kinetic_energy.push(stepper.ops.kinetic_energy(&state.u));
        diag.div_norm.push(stepper.ops.div_norm(&state.u));
        if let Some(errs) = diag.err_l2.as_mut() {
            let uf = FeFunction::from_coeffs(
                Arc::clone(&stepper.ops.space),
                Role::Velocity,
                state.u.clone(),
            )
            .expect("length ok");
            let t = state.t;
            errs.push(crate::assembly::l2_error_velocity(&uf, |p| {
                manufactured::velocity(p, t)
            }));
        }
        if record_idx < record.len() && record[record_idx] == state.step {
            snaps_t.push(state.t);
            snaps_v.push(state.u.clone());
            record_idx += 1;
        }
    }

    let t_start = snaps_t.first().copied().unwrap_or(0.0);
    let snapshots = SnapshotSet::new(
        Arc::clone(space),
        snaps_t,
        snaps_v,
        SnapshotMeta {
            dt: cfg.dt * cfg.snapshots.map_or(1, |s| s.stride) as f64,
            t_start,
            centering: false,
            config: Some(cfg.clone()),
        },
    )?;
    Ok(FomRun {
        snapshots,
        diagnostics: diag,
        final_state: state,
    })
}
