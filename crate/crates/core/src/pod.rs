//! Offline POD stage by the method of snapshots: correlation matrix in the
//! L² mass inner product, eigendecomposition, basis construction,
//! projections and the POD stiffness matrix with its spectral norm.
//!
//! All inner products here are the finite-element L² product (never the
//! Euclidean dot product on coefficient vectors).

use std::sync::Arc;

use thiserror::Error;

use crate::assembly::SparseMatrix;
use crate::fespace::{FeFunction, Role, THSpace};
use crate::fom::SnapshotSet;
use crate::linsolve::{sym_eig, DenseMatrix, LinSolveError};

#[derive(Debug, Error)]
pub enum PodError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate snapshot ensemble: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Solver(#[from] LinSolveError),
}

/// Rank selection: an explicit r or a tolerance on Lambda_r / Lambda_0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RSelect {
    Fixed(usize),
    TailTolerance(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PodConfig {
    /// Subtract the ensemble mean before building the correlation matrix.
    pub centering: bool,
    pub r_select: RSelect,
    /// Numerical-rank cutoff: eigenvalues above eps_lambda * lambda_1 count
    /// towards d_v.
    pub eps_lambda: f64,
}

pub const DEFAULT_EPS_LAMBDA: f64 = 1e-12;

impl PodConfig {
    pub fn fixed(r: usize, centering: bool) -> Self {
        PodConfig {
            centering,
            r_select: RSelect::Fixed(r),
            eps_lambda: DEFAULT_EPS_LAMBDA,
        }
    }

    pub fn tail_tolerance(tol: f64, centering: bool) -> Self {
        PodConfig {
            centering,
            r_select: RSelect::TailTolerance(tol),
            eps_lambda: DEFAULT_EPS_LAMBDA,
        }
    }
}

/// L²-orthonormal reduced basis with its eigenvalue spectrum.
#[derive(Debug, Clone)]
pub struct PODBasis {
    space: Arc<THSpace>,
    /// r mode coefficient vectors, each of length n_vel.
    modes: Vec<Vec<f64>>,
    /// Full spectrum of the correlation matrix, descending.
    eigenvalues: Vec<f64>,
    d_v: usize,
    mean: Option<Vec<f64>>,
}

impl PODBasis {
    pub fn space(&self) -> &Arc<THSpace> {
        &self.space
    }

    pub fn r(&self) -> usize {
        self.modes.len()
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Lambda_r = sum_{k = r+1}^{d_v} lambda_k (1-based k).
    pub fn lambda_tail(&self, r: usize) -> f64 {
        if r >= self.d_v {
            return 0.0;
        }
        self.eigenvalues[r..self.d_v].iter().sum()
    }

    pub fn mode(&self, k: usize) -> &[f64] {
        &self.modes[k]
    }

    pub fn modes(&self) -> &[Vec<f64>] {
        &self.modes
    }

    pub fn mode_fn(&self, k: usize) -> FeFunction {
        FeFunction::from_coeffs(Arc::clone(&self.space), Role::Velocity, self.modes[k].clone())
            .expect("mode length matches space")
    }

    pub fn mean(&self) -> Option<&[f64]> {
        self.mean.as_deref()
    }

    pub fn is_centered(&self) -> bool {
        self.mean.is_some()
    }

    /// Restricts the basis to its first r modes.
    pub fn truncated(&self, r: usize) -> PODBasis {
        assert!(r >= 1 && r <= self.r());
        PODBasis {
            space: Arc::clone(&self.space),
            modes: self.modes[..r].to_vec(),
            eigenvalues: self.eigenvalues.clone(),
            d_v: self.d_v,
            mean: self.mean.clone(),
        }
    }

    /// mean + sum_k a_k phi_k as a coefficient vector.
    pub fn lift_coeffs(&self, a: &[f64]) -> Vec<f64> {
        assert_eq!(a.len(), self.r());
        let n = self.space.n_vel();
        let mut out = match &self.mean {
            Some(m) => m.clone(),
            None => vec![0.0; n],
        };
        for (ak, mode) in a.iter().zip(&self.modes) {
            for (o, m) in out.iter_mut().zip(mode) {
                *o += ak * m;
            }
        }
        out
    }

    /// Rebuilds a basis from stored parts (deserialization path).
    pub fn from_parts(
        space: Arc<THSpace>,
        modes: Vec<Vec<f64>>,
        eigenvalues: Vec<f64>,
        d_v: usize,
        mean: Option<Vec<f64>>,
    ) -> Result<Self, PodError> {
        for m in &modes {
            if m.len() != space.n_vel() {
                return Err(PodError::Contract("mode length mismatch".into()));
            }
        }
        if let Some(m) = &mean {
            if m.len() != space.n_vel() {
                return Err(PodError::Contract("mean length mismatch".into()));
            }
        }
        if d_v > eigenvalues.len() || modes.len() > d_v.max(1) {
            return Err(PodError::Contract("inconsistent rank data".into()));
        }
        Ok(PODBasis {
            space,
            modes,
            eigenvalues,
            d_v,
            mean,
        })
    }
}

/// Correlation matrix k_ij = (1/M)(u_i, u_j) in the mass inner product;
/// the ensemble mean is subtracted first when `centering` is set.
pub fn correlation_matrix(
    snaps: &SnapshotSet,
    mass: &SparseMatrix,
    centering: bool,
) -> Result<DenseMatrix, PodError> {
    let m = snaps.len();
    if m == 0 {
        return Err(PodError::Degenerate("no snapshots".into()));
    }
    if mass.ncols() != snaps.space().n_vel() || mass.nrows() != mass.ncols() {
        return Err(PodError::Contract(format!(
            "mass matrix {}x{} does not match n_vel {}",
            mass.nrows(),
            mass.ncols(),
            snaps.space().n_vel()
        )));
    }
    let mean = centering.then(|| snaps.ensemble_mean());
    let shifted: Vec<Vec<f64>> = (0..m)
        .map(|j| {
            let v = snaps.vector(j);
            match &mean {
                Some(mu) => v.iter().zip(mu).map(|(a, b)| a - b).collect(),
                None => v.to_vec(),
            }
        })
        .collect();
    let weighted: Vec<Vec<f64>> = shifted.iter().map(|v| mass.matvec(v)).collect();
    let mut k = DenseMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let dot: f64 = shifted[i].iter().zip(&weighted[j]).map(|(a, b)| a * b).sum();
            let v = dot / m as f64;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Builds the POD basis phi_k = (1/sqrt(M lambda_k)) sum_j v_k^j u_h^j from
/// the correlation eigendecomposition. The requested rank is clamped to the
/// numerical rank d_v.
pub fn build_basis(
    snaps: &SnapshotSet,
    mass: &SparseMatrix,
    cfg: &PodConfig,
) -> Result<PODBasis, PodError> {
    let m = snaps.len();
    let k = correlation_matrix(snaps, mass, cfg.centering)?;
    let eig = sym_eig(&k)?;
    let lambda = eig.eigenvalues;
    let lambda1 = lambda.first().copied().unwrap_or(0.0);
    if lambda1 <= 0.0 {
        return Err(PodError::Degenerate(
            "all snapshots vanish (or cancel after centering)".into(),
        ));
    }
    let d_v = lambda
        .iter()
        .take_while(|&&l| l > cfg.eps_lambda * lambda1)
        .count();
    let total: f64 = lambda[..d_v].iter().sum();
    let r = match cfg.r_select {
        RSelect::Fixed(r) => {
            if r == 0 {
                return Err(PodError::Contract("r must be >= 1".into()));
            }
            r.min(d_v)
        }
        RSelect::TailTolerance(tol) => {
            let mut r = d_v;
            for cand in 1..=d_v {
                let tail: f64 = lambda[cand..d_v].iter().sum();
                if tail <= tol * total {
                    r = cand;
                    break;
                }
            }
            r
        }
    };

    let mean = cfg.centering.then(|| snaps.ensemble_mean());
    let n = snaps.space().n_vel();
    let mut modes = Vec::with_capacity(r);
    for kk in 0..r {
        let scale = 1.0 / (m as f64 * lambda[kk]).sqrt();
        let evec = eig.eigenvectors.column(kk);
        let mut mode = vec![0.0; n];
        for (j, &vj) in evec.iter().enumerate() {
            let coeff = scale * vj;
            if coeff == 0.0 {
                continue;
            }
            let snap = snaps.vector(j);
            match &mean {
                Some(mu) => {
                    for i in 0..n {
                        mode[i] += coeff * (snap[i] - mu[i]);
                    }
                }
                None => {
                    for i in 0..n {
                        mode[i] += coeff * snap[i];
                    }
                }
            }
        }
        modes.push(mode);
    }

    Ok(PODBasis {
        space: Arc::clone(snaps.space()),
        modes,
        eigenvalues: lambda,
        d_v,
        mean,
    })
}

/// Reduced coefficients a_k = (f - mean, phi_k) in the mass inner product.
pub fn project(
    basis: &PODBasis,
    f: &FeFunction,
    mass: &SparseMatrix,
) -> Result<Vec<f64>, PodError> {
    if f.role() != Role::Velocity {
        return Err(PodError::Contract("projection expects a velocity".into()));
    }
    if !THSpace::same_space(f.space(), basis.space()) {
        return Err(PodError::Contract(
            "function lives on a different space".into(),
        ));
    }
    Ok(project_coeffs(basis, f.coeffs(), mass))
}

/// Coefficient-level version of [`project`].
pub fn project_coeffs(basis: &PODBasis, v: &[f64], mass: &SparseMatrix) -> Vec<f64> {
    let shifted: Vec<f64> = match basis.mean() {
        Some(mu) => v.iter().zip(mu).map(|(a, b)| a - b).collect(),
        None => v.to_vec(),
    };
    let weighted = mass.matvec(&shifted);
    basis
        .modes
        .iter()
        .map(|mode| mode.iter().zip(&weighted).map(|(a, b)| a * b).sum())
        .collect()
}

/// POD stiffness matrix S_ij = (grad phi_i, grad phi_j) over the stored
/// modes, and its spectral norm.
pub fn pod_stiffness(
    basis: &PODBasis,
    stiffness: &SparseMatrix,
) -> Result<(DenseMatrix, f64), PodError> {
    let r = basis.r();
    let weighted: Vec<Vec<f64>> = basis.modes.iter().map(|m| stiffness.matvec(m)).collect();
    let mut s = DenseMatrix::zeros(r, r);
    for i in 0..r {
        for j in i..r {
            let dot: f64 = basis.modes[i]
                .iter()
                .zip(&weighted[j])
                .map(|(a, b)| a * b)
                .sum();
            s[(i, j)] = dot;
            s[(j, i)] = dot;
        }
    }
    let s2 = sym_eig(&s)?.eigenvalues.first().copied().unwrap_or(0.0);
    Ok((s, s2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{assemble_matrix, norm, FormKind, NormKind};
    use crate::fespace::build_taylor_hood;
    use crate::fom::SnapshotMeta;
    use crate::mesh::{quadrature_rule, unit_square_mesh};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn space(n: usize) -> Arc<THSpace> {
        let mesh = Arc::new(unit_square_mesh(n));
        Arc::new(build_taylor_hood(mesh, &BTreeSet::from([1])).unwrap())
    }

    fn meta() -> SnapshotMeta {
        SnapshotMeta {
            dt: 0.1,
            t_start: 0.0,
            centering: false,
            config: None,
        }
    }

    fn random_snapshots(s: &Arc<THSpace>, m: usize, seed: u64) -> SnapshotSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vectors: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..s.n_vel()).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let times = (0..m).map(|j| 0.1 * (j + 1) as f64).collect();
        SnapshotSet::new(Arc::clone(s), times, vectors, meta()).unwrap()
    }

    /// Gram-Schmidt in the mass inner product.
    fn orthonormal_snapshots(s: &Arc<THSpace>, m: usize, seed: u64) -> SnapshotSet {
        let raw = random_snapshots(s, m, seed);
        let mass = assemble_matrix(FormKind::Mass, s);
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for j in 0..m {
            let mut v = raw.vector(j).to_vec();
            for b in &basis {
                let proj = mass.bilinear(b, &v);
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= proj * bi;
                }
            }
            let nrm = mass.bilinear(&v, &v).sqrt();
            for vi in v.iter_mut() {
                *vi /= nrm;
            }
            basis.push(v);
        }
        let times = (0..m).map(|j| 0.1 * (j + 1) as f64).collect();
        SnapshotSet::new(Arc::clone(s), times, basis, meta()).unwrap()
    }

    #[test]
    fn orthonormal_snapshots_give_scaled_identity() {
        let s = space(3);
        let snaps = orthonormal_snapshots(&s, 6, 1);
        let mass = assemble_matrix(FormKind::Mass, &s);
        let k = correlation_matrix(&snaps, &mass, false).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let expect = if i == j { 1.0 / 6.0 } else { 0.0 };
                assert!((k[(i, j)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicated_snapshots_halve_the_rank() {
        let s = space(3);
        let half = random_snapshots(&s, 4, 2);
        let mut vectors = half.vectors().to_vec();
        vectors.extend(half.vectors().iter().cloned());
        let times = (0..8).map(|j| 0.1 * (j + 1) as f64).collect();
        let snaps = SnapshotSet::new(Arc::clone(&s), times, vectors, meta()).unwrap();
        let mass = assemble_matrix(FormKind::Mass, &s);
        let basis = build_basis(&snaps, &mass, &PodConfig::fixed(8, false)).unwrap();
        assert!(basis.d_v() <= 4 + 1);
    }

    #[test]
    fn correlation_agrees_with_quadrature_oracle() {
        let s = space(2);
        let snaps = random_snapshots(&s, 5, 3);
        let mass = assemble_matrix(FormKind::Mass, &s);
        let k = correlation_matrix(&snaps, &mass, false).unwrap();
        let rule = quadrature_rule(5).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let fi = snaps.snapshot_fn(i);
                let fj = snaps.snapshot_fn(j);
                let mut acc = 0.0;
                for t in 0..s.mesh().n_triangles() {
                    let geo = s.element_geometry(t);
                    for (q, &l) in rule.points.iter().enumerate() {
                        let w = rule.weights[q] * geo.det;
                        let a = fi.velocity_at(t, l);
                        let b = fj.velocity_at(t, l);
                        acc += w * (a[0] * b[0] + a[1] * b[1]);
                    }
                }
                acc /= 5.0;
                assert!(
                    (k[(i, j)] - acc).abs() <= 1e-12 * acc.abs().max(1e-3),
                    "entry ({i},{j}): {} vs {acc}",
                    k[(i, j)]
                );
            }
        }
    }

    #[test]
    fn single_snapshot_basis() {
        let s = space(3);
        let raw = random_snapshots(&s, 1, 4);
        let mass = assemble_matrix(FormKind::Mass, &s);
        let basis = build_basis(&raw, &mass, &PodConfig::fixed(1, false)).unwrap();
        assert_eq!(basis.r(), 1);
        let u = raw.vector(0);
        let unorm = mass.bilinear(u, u).sqrt();
        assert!((basis.eigenvalues()[0] - unorm * unorm).abs() < 1e-12 * unorm * unorm);
        // phi_1 = u / ||u|| up to the eigensolver sign convention
        let phi = basis.mode(0);
        let mut sign = 0.0;
        for (a, b) in phi.iter().zip(u) {
            if b.abs() > 1e-9 {
                sign = (a / (b / unorm)).signum();
                break;
            }
        }
        for (a, b) in phi.iter().zip(u) {
            assert!((a - sign * b / unorm).abs() < 1e-10);
        }
    }

    #[test]
    fn basis_is_l2_orthonormal() {
        let s = space(3);
        let snaps = random_snapshots(&s, 8, 5);
        let mass = assemble_matrix(FormKind::Mass, &s);
        for centering in [false, true] {
            let basis = build_basis(&snaps, &mass, &PodConfig::fixed(8, centering)).unwrap();
            for i in 0..basis.r() {
                for j in 0..basis.r() {
                    let dot = mass.bilinear(basis.mode(i), basis.mode(j));
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - expect).abs() <= 1e-10, "({i},{j}): {dot}");
                }
            }
        }
    }

    #[test]
    fn projection_error_identity_for_every_r() {
        let s = space(3);
        let snaps = random_snapshots(&s, 10, 6);
        let mass = assemble_matrix(FormKind::Mass, &s);
        for centering in [false, true] {
            let full = build_basis(&snaps, &mass, &PodConfig::fixed(10, centering)).unwrap();
            let m = snaps.len() as f64;
            for r in 1..=full.d_v() {
                let basis = full.truncated(r);
                let mut acc = 0.0;
                for j in 0..snaps.len() {
                    let a = project_coeffs(&basis, snaps.vector(j), &mass);
                    let lifted = basis.lift_coeffs(&a);
                    let diff: Vec<f64> = snaps
                        .vector(j)
                        .iter()
                        .zip(&lifted)
                        .map(|(x, y)| x - y)
                        .collect();
                    acc += mass.bilinear(&diff, &diff);
                }
                acc /= m;
                let tail = full.lambda_tail(r);
                let scale = full.lambda_tail(0);
                assert!(
                    (acc - tail).abs() <= 1e-8 * scale,
                    "centering={centering} r={r}: {acc} vs {tail}"
                );
            }
        }
    }

    #[test]
    fn lambda_tail_monotone_and_small_at_rank() {
        let s = space(3);
        let snaps = random_snapshots(&s, 9, 7);
        let mass = assemble_matrix(FormKind::Mass, &s);
        let basis = build_basis(&snaps, &mass, &PodConfig::fixed(9, false)).unwrap();
        let mut prev = basis.lambda_tail(0);
        for r in 1..=basis.d_v() {
            let cur = basis.lambda_tail(r);
            assert!(cur <= prev + 1e-15);
            prev = cur;
        }
        assert!(basis.lambda_tail(basis.d_v()) <= 1e-10 * basis.lambda_tail(0));
        for j in 0..snaps.len() {
            let a = project_coeffs(&basis, snaps.vector(j), &mass);
            let lifted = basis.lift_coeffs(&a);
            let diff: Vec<f64> = snaps
                .vector(j)
                .iter()
                .zip(&lifted)
                .map(|(x, y)| x - y)
                .collect();
            let dn = mass.bilinear(&diff, &diff).sqrt();
            let un = mass.bilinear(snaps.vector(j), snaps.vector(j)).sqrt();
            assert!(dn <= 1e-8 * un.max(1e-9), "j={j}: {dn}");
        }
    }

    #[test]
    fn projection_examples() {
        let s = space(3);
        let snaps = random_snapshots(&s, 6, 8);
        let mass = assemble_matrix(FormKind::Mass, &s);
        let basis = build_basis(&snaps, &mass, &PodConfig::fixed(3, false)).unwrap();
        // f = phi_1 -> (1, 0, 0)
        let a = project(&basis, &basis.mode_fn(0), &mass).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-10 && a[1].abs() < 1e-10 && a[2].abs() < 1e-10);
        // contraction for random f
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let coeffs: Vec<f64> = (0..s.n_vel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f = FeFunction::from_coeffs(Arc::clone(&s), Role::Velocity, coeffs).unwrap();
            let a = project(&basis, &f, &mass).unwrap();
            let proj_norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let f_norm = norm(NormKind::L2, &f).unwrap();
            assert!(proj_norm <= f_norm + 1e-10);
        }
        // f orthogonal to the basis span projects to zero
        let full = build_basis(&snaps, &mass, &PodConfig::fixed(6, false)).unwrap();
        let coeffs: Vec<f64> = (0..s.n_vel())
            .map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0)
            .collect();
        let af = project_coeffs(&full, &coeffs, &mass);
        let within = full.lift_coeffs(&af);
        let ortho: Vec<f64> = coeffs.iter().zip(&within).map(|(a, b)| a - b).collect();
        let a0 = project_coeffs(&basis, &ortho, &mass);
        assert!(a0.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn stiffness_spectral_norm_and_inverse_inequality() {
        let s = space(3);
        let snaps = random_snapshots(&s, 6, 10);
        let mass = assemble_matrix(FormKind::Mass, &s);
        let stiff = assemble_matrix(FormKind::Stiffness, &s);
        // 1x1 case: S_2 = ||grad phi_1||^2
        let b1 = build_basis(&snaps, &mass, &PodConfig::fixed(1, false)).unwrap();
        let (_, s2) = pod_stiffness(&b1, &stiff).unwrap();
        let g = norm(NormKind::H1Semi, &b1.mode_fn(0)).unwrap();
        assert!((s2 - g * g).abs() <= 1e-10 * g * g);

        let basis = build_basis(&snaps, &mass, &PodConfig::fixed(6, false)).unwrap();
        let (_, s2) = pod_stiffness(&basis, &stiff).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let a: Vec<f64> = (0..basis.r()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v = basis.lift_coeffs(&a);
            let grad = stiff.bilinear(&v, &v).max(0.0).sqrt();
            let l2 = mass.bilinear(&v, &v).max(0.0).sqrt();
            assert!(grad <= s2.sqrt() * l2 + 1e-10);
        }
    }

    #[test]
    fn tail_tolerance_selection() {
        let s = space(3);
        let snaps = random_snapshots(&s, 8, 12);
        let mass = assemble_matrix(FormKind::Mass, &s);
        let basis = build_basis(&snaps, &mass, &PodConfig::tail_tolerance(1e-6, false)).unwrap();
        let total = basis.lambda_tail(0);
        assert!(basis.lambda_tail(basis.r()) <= 1e-6 * total);
        if basis.r() > 1 {
            assert!(basis.lambda_tail(basis.r() - 1) > 1e-6 * total);
        }
    }

    #[test]
    fn degenerate_ensemble_rejected() {
        let s = space(2);
        let vectors = vec![vec![0.0; s.n_vel()]; 3];
        let times = vec![0.1, 0.2, 0.3];
        let snaps = SnapshotSet::new(Arc::clone(&s), times, vectors, meta()).unwrap();
        let mass = assemble_matrix(FormKind::Mass, &s);
        assert!(matches!(
            build_basis(&snaps, &mass, &PodConfig::fixed(2, false)),
            Err(PodError::Degenerate(_))
        ));
    }

    #[test]
    fn mass_dimension_mismatch_rejected() {
        let s2 = space(2);
        let s3 = space(3);
        let snaps = random_snapshots(&s3, 3, 13);
        let mass_wrong = assemble_matrix(FormKind::Mass, &s2);
        assert!(matches!(
            correlation_matrix(&snaps, &mass_wrong, false),
            Err(PodError::Contract(_))
        ));
    }
}
