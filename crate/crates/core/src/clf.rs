//! Quadratic control Lyapunov candidate from the lifted surrogate.
//!
//! Solving the discrete algebraic Riccati equation on `(A, B)` with weights
//! `(Q, R)` gives the unique stabilizing `P`, the LQR gain `K`, and with them
//! the candidate `V(z) = zᵀPz`. The per-sample decrease condition is the
//! violation `s(z, u) = V(Az + Bu) − V(z) + ηV(z)`; the constraint layer
//! penalizes its positive part. `verify_contraction` checks, on the
//! surrogate, the closed-loop guarantees that make `V` a certificate: under
//! `u = −Kz` the DARE identity forces `V(z⁺) − V(z) = −zᵀ(Q + KᵀRK)z`, so
//! every `η ≤ η* = λ_min(Q + KᵀRK)/λ_max(P)` yields geometric decay of `V`.

use nalgebra::{DMatrix, DVector, Vector2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::edmd::{LiftedModel, MatrixJson};
use crate::error::{Error, Result};

/// Default DARE fixed-point tolerance (Frobenius norm of the iterate step).
pub const DARE_TOL: f64 = 1e-10;
/// Default iteration budget.
pub const DARE_MAX_ITER: usize = 10_000;

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// Everything needed to evaluate `V` and the decrease violation.
#[derive(Debug, Clone)]
pub struct CLFCertificate {
    /// Stabilizing DARE solution (symmetric PSD).
    pub p: DMatrix<f64>,
    /// LQR gain, `u = −Kz` stabilizes the surrogate.
    pub k: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Required decay rate of `V` per step.
    pub eta: f64,
    /// `‖P − (AᵀPA − AᵀPB(R+BᵀPB)⁻¹BᵀPA + Q)‖_F` at the returned `P`.
    pub dare_residual: f64,
    /// Fingerprint of the dictionary the surrogate was lifted with, so a
    /// certificate cannot silently be applied to a different lifting.
    pub dictionary_fingerprint: u64,
}

/// Eigenstructure summary of (a shifted) `P`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Eigenvalues sorted descending.
    pub eigenvalues: Vec<f64>,
    /// `λ_max / λ_min(P)`.
    pub m1: f64,
    pub m2: f64,
    /// `λ_max` over the smallest eigenvalue of modulus above numerical zero.
    pub condition_number: f64,
}

/// Outcome of the sampled closed-loop contraction check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContractionReport {
    /// The decay rate that was checked.
    pub eta: f64,
    /// Largest η guaranteed by the DARE identity:
    /// `λ_min(Q + KᵀRK)/λ_max(P)`.
    pub eta_star: f64,
    /// Worst violation `s(z, −Kz)` over random samples plus the
    /// eigenvector probe of `Q + KᵀRK − ηP`.
    pub worst_s: f64,
    /// Whether every sampled rollout satisfied `V(z_t) ≤ (1−η)ᵗ V(z₀)`.
    pub rollouts_ok: bool,
    pub pass: bool,
}

// ---------------------------------------------------------------------------
// DARE
// ---------------------------------------------------------------------------

fn check_symmetric(m: &DMatrix<f64>, what: &str, tol: f64) -> Result<()> {
    let asym = (m - m.transpose()).amax();
    if asym > tol {
        return Err(Error::InvalidArgument(format!(
            "{what} must be symmetric (max asymmetry {asym:.3e})"
        )));
    }
    Ok(())
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// One application of the Riccati map
/// `P ↦ AᵀPA − AᵀPB(R+BᵀPB)⁻¹BᵀPA + Q`.
fn riccati_map(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let atpa = a.tr_mul(&(p * a));
    let btpb = b.tr_mul(&(p * b));
    let inner = r + btpb;
    let chol = inner
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("R + BᵀPB is not positive definite".into()))?;
    let btpa = b.tr_mul(&(p * a));
    let gain = chol.solve(&btpa); // (R+BᵀPB)⁻¹ BᵀPA
    Ok(&atpa - btpa.tr_mul(&gain) + q)
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max)
}

/// Solve the DARE by damped-free fixed-point iteration from `P₀ = Q`,
/// symmetrizing every iterate, and assemble the certificate.
///
/// Fails if the iteration does not reach `tol` within `max_iter` steps, or if
/// the resulting closed loop `A − BK` is not strictly stable.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    eta: f64,
    tol: f64,
    max_iter: usize,
) -> Result<CLFCertificate> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::DimensionMismatch {
            context: "solve_dare".into(),
            expected: format!("A {n}×{n}, B {n}×{m}, Q {n}×{n}, R {m}×{m}"),
            actual: format!(
                "A {:?}, B {:?}, Q {:?}, R {:?}",
                a.shape(),
                b.shape(),
                q.shape(),
                r.shape()
            ),
        });
    }
    check_symmetric(q, "Q", 1e-10)?;
    check_symmetric(r, "R", 1e-10)?;
    if !(0.0..1.0).contains(&eta) || eta <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "decay rate eta must lie in (0, 1), got {eta}"
        )));
    }
    if r.clone().cholesky().is_none() {
        return Err(Error::InvalidArgument("R must be positive definite".into()));
    }
    let q_min = q.clone().symmetric_eigenvalues().min();
    if q_min < -1e-10 {
        return Err(Error::InvalidArgument(format!(
            "Q must be positive semidefinite (λ_min = {q_min:.3e})"
        )));
    }

    let mut p = q.clone();
    let mut delta = f64::INFINITY;
    let mut converged = false;
    for _ in 0..max_iter {
        let mut next = riccati_map(a, b, q, r, &p)?;
        symmetrize(&mut next);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Riccati iterate".into()));
        }
        delta = (&next - &p).norm();
        p = next;
        if delta < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::RiccatiNoConvergence { max_iter, delta });
    }

    let btpb = b.tr_mul(&(&p * b));
    let inner = r + btpb;
    let chol = inner
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("R + BᵀPB is not positive definite".into()))?;
    let k = chol.solve(&b.tr_mul(&(&p * a)));

    let closed = a - b * &k;
    let rho = spectral_radius(&closed);
    if rho >= 1.0 {
        return Err(Error::NotStabilizing { rho });
    }

    let dare_residual = (&p - riccati_map(a, b, q, r, &p)?).norm();

    Ok(CLFCertificate {
        p,
        k,
        q: q.clone(),
        r: r.clone(),
        eta,
        dare_residual,
        dictionary_fingerprint: 0,
    })
}

/// Solve the DARE for a fitted surrogate and stamp the certificate with the
/// model's dictionary fingerprint.
pub fn certify_model(
    model: &LiftedModel,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    eta: f64,
    tol: f64,
    max_iter: usize,
) -> Result<CLFCertificate> {
    let mut cert = solve_dare(&model.a, &model.b, q, r, eta, tol, max_iter)?;
    cert.dictionary_fingerprint = model.dictionary.fingerprint();
    Ok(cert)
}

/// Default DARE weights for an `n_lift`-dimensional surrogate: weight 10 on
/// the six physical error coordinates, 0.01 on RBF coordinates, `R = 0.1 I`.
pub fn default_weights(n_lift: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut q = DMatrix::zeros(n_lift, n_lift);
    for i in 0..n_lift {
        q[(i, i)] = if i < crate::edmd::N_STATE { 10.0 } else { 0.01 };
    }
    let r = DMatrix::identity(2, 2) * 0.1;
    (q, r)
}

// ---------------------------------------------------------------------------
// Lyapunov value, violation, gradient
// ---------------------------------------------------------------------------

/// The quadratic form `V(z) = zᵀPz`.
pub fn lyapunov_value(p: &DMatrix<f64>, z: &DVector<f64>) -> f64 {
    (p * z).dot(z)
}

/// Decrease violation at an arbitrary decay rate:
/// `s = V(Az+Bu) − V(z) + ηV(z)`, and its positive part.
pub fn violation_with_eta(
    model: &LiftedModel,
    cert: &CLFCertificate,
    eta: f64,
    z: &DVector<f64>,
    u: &Vector2<f64>,
) -> (f64, f64) {
    let z_next = &model.a * z + &model.b * DVector::from_column_slice(u.as_slice());
    let v_now = lyapunov_value(&cert.p, z);
    let v_next = lyapunov_value(&cert.p, &z_next);
    let s = v_next - v_now + eta * v_now;
    (s, s.max(0.0))
}

/// Decrease violation at the certificate's decay rate.
pub fn violation(
    model: &LiftedModel,
    cert: &CLFCertificate,
    z: &DVector<f64>,
    u: &Vector2<f64>,
) -> (f64, f64) {
    violation_with_eta(model, cert, cert.eta, z, u)
}

/// Gradient of the violation with respect to the action: `2BᵀP(Az+Bu)` in
/// the active regime `s > 0`, zero otherwise (the hinge is flat there).
pub fn violation_gradient_wrt_action(
    model: &LiftedModel,
    cert: &CLFCertificate,
    z: &DVector<f64>,
    u: &Vector2<f64>,
) -> Vector2<f64> {
    let (s, _) = violation(model, cert, z, u);
    if s <= 0.0 {
        return Vector2::zeros();
    }
    let z_next = &model.a * z + &model.b * DVector::from_column_slice(u.as_slice());
    let g = 2.0 * model.b.tr_mul(&(&cert.p * z_next));
    Vector2::new(g[0], g[1])
}

// ---------------------------------------------------------------------------
// Spectrum analysis
// ---------------------------------------------------------------------------

/// Eigen-analysis of `P + χ·I` (χ = 0 analyzes `P` itself).
pub fn analyze_p(p: &DMatrix<f64>, chi_reg: f64) -> Result<SpectrumReport> {
    check_symmetric(p, "P", 1e-8)?;
    let mut shifted = p.clone();
    symmetrize(&mut shifted);
    for i in 0..shifted.nrows() {
        shifted[(i, i)] += chi_reg;
    }
    let mut eigenvalues: Vec<f64> = shifted.symmetric_eigenvalues().iter().copied().collect();
    eigenvalues.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let m2 = eigenvalues[0];
    let m1 = *eigenvalues.last().unwrap();
    let zero_tol = 1e-12 * m2.abs().max(1.0);
    let min_nonzero = eigenvalues
        .iter()
        .rev()
        .find(|l| l.abs() > zero_tol)
        .copied()
        .unwrap_or(m2);
    let condition_number = if min_nonzero != 0.0 {
        m2 / min_nonzero
    } else {
        f64::INFINITY
    };
    Ok(SpectrumReport {
        eigenvalues,
        m1,
        m2,
        condition_number,
    })
}

impl SpectrumReport {
    /// Export as CSV with columns `index,eigenvalue`.
    pub fn save_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        w.write_record(["index", "eigenvalue"])?;
        for (i, l) in self.eigenvalues.iter().enumerate() {
            w.write_record([i.to_string(), format!("{l:?}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Contraction verification
// ---------------------------------------------------------------------------

/// Largest decay rate certified by the DARE identity,
/// `η* = λ_min(Q + KᵀRK) / λ_max(P)`.
pub fn eta_star(cert: &CLFCertificate) -> f64 {
    let m = &cert.q + cert.k.tr_mul(&(&cert.r * &cert.k));
    let lam_min = m.symmetric_eigenvalues().min();
    let lam_max = cert.p.clone().symmetric_eigenvalues().max();
    lam_min / lam_max.max(f64::MIN_POSITIVE)
}

/// Check the closed-loop decrease `s(z, −Kz) ≤ 0` at decay rate `eta` over
/// `n_samples` random lifted states, a deterministic probe along the
/// minimizing eigenvector of `Q + KᵀRK − ηP`, and `n_rollouts` geometric
/// decay rollouts of 50 steps. Failures are reported, never raised.
pub fn verify_contraction(
    model: &LiftedModel,
    cert: &CLFCertificate,
    eta: f64,
    n_samples: usize,
    seed: u64,
) -> ContractionReport {
    let n = model.n_lift();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| {
        DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
    };

    let lqr_action = |z: &DVector<f64>| -> Vector2<f64> {
        let u = -(&cert.k * z);
        Vector2::new(u[0], u[1])
    };

    let mut worst_s = f64::NEG_INFINITY;
    for _ in 0..n_samples {
        let z = draw(&mut rng);
        let (s, _) = violation_with_eta(model, cert, eta, &z, &lqr_action(&z));
        worst_s = worst_s.max(s);
    }

    // Deterministic probe: under u = −Kz, s(z) = −zᵀ(Q + KᵀRK − ηP)z, so the
    // minimizing eigenvector of that matrix is the worst direction.
    let mut probe_matrix =
        &cert.q + cert.k.tr_mul(&(&cert.r * &cert.k)) - eta * &cert.p;
    symmetrize(&mut probe_matrix);
    let eig = nalgebra::SymmetricEigen::new(probe_matrix);
    let mut min_idx = 0;
    for i in 0..eig.eigenvalues.len() {
        if eig.eigenvalues[i] < eig.eigenvalues[min_idx] {
            min_idx = i;
        }
    }
    let v = eig.eigenvectors.column(min_idx).into_owned();
    let (s_probe, _) = violation_with_eta(model, cert, eta, &v, &lqr_action(&v));
    worst_s = worst_s.max(s_probe);

    // Geometric decay of V along closed-loop rollouts.
    let closed = &model.a - &model.b * &cert.k;
    let mut rollouts_ok = true;
    for _ in 0..32 {
        let z0 = draw(&mut rng);
        let v0 = lyapunov_value(&cert.p, &z0);
        let mut z = z0;
        let mut bound = v0;
        for _ in 0..50 {
            z = &closed * &z;
            bound *= 1.0 - eta;
            let v = lyapunov_value(&cert.p, &z);
            if v > bound * (1.0 + 1e-9) + 1e-12 {
                rollouts_ok = false;
                break;
            }
        }
        if !rollouts_ok {
            break;
        }
    }

    ContractionReport {
        eta,
        eta_star: eta_star(cert),
        worst_s,
        rollouts_ok,
        pass: worst_s <= 1e-9 && rollouts_ok,
    }
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CertificateJson {
    p: MatrixJson,
    k: MatrixJson,
    q: MatrixJson,
    r: MatrixJson,
    eta: f64,
    dare_residual: f64,
    dictionary_fingerprint: u64,
}

impl CLFCertificate {
    pub fn save_json<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let json = CertificateJson {
            p: MatrixJson::from_matrix(&self.p),
            k: MatrixJson::from_matrix(&self.k),
            q: MatrixJson::from_matrix(&self.q),
            r: MatrixJson::from_matrix(&self.r),
            eta: self.eta,
            dare_residual: self.dare_residual,
            dictionary_fingerprint: self.dictionary_fingerprint,
        };
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(BufWriter::new(file), &json)?;
        Ok(())
    }

    pub fn load_json<P: AsRef<Path>>(path: P) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let json: CertificateJson = serde_json::from_reader(BufReader::new(file))?;
        Ok(Self {
            p: json.p.to_matrix()?,
            k: json.k.to_matrix()?,
            q: json.q.to_matrix()?,
            r: json.r.to_matrix()?,
            eta: json.eta,
            dare_residual: json.dare_residual,
            dictionary_fingerprint: json.dictionary_fingerprint,
        })
    }

    /// Guard that this certificate belongs to the given surrogate.
    pub fn check_matches(&self, model: &LiftedModel) -> Result<()> {
        if self.dictionary_fingerprint != model.dictionary.fingerprint() {
            return Err(Error::ArtifactMismatch(
                "certificate was computed for a different dictionary".into(),
            ));
        }
        if self.p.nrows() != model.n_lift() {
            return Err(Error::ArtifactMismatch(format!(
                "certificate dimension {} vs model lifted dimension {}",
                self.p.nrows(),
                model.n_lift()
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edmd::{Dictionary, FitReport};
    use approx::assert_relative_eq;

    fn scalar_mat(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    /// Wrap bare matrices in a LiftedModel so violation helpers apply.
    fn model_from(a: DMatrix<f64>, b: DMatrix<f64>) -> LiftedModel {
        let n = a.nrows();
        let dictionary = if n == 6 {
            Dictionary::identity()
        } else {
            Dictionary {
                centers: vec![nalgebra::Vector6::zeros(); n - 6],
                bandwidth: 1.0,
            }
        };
        let mut c = DMatrix::zeros(6, n);
        for i in 0..6 {
            c[(i, i)] = 1.0;
        }
        LiftedModel {
            a,
            b,
            c,
            dictionary,
            fit_report: FitReport {
                residual_frobenius: 0.0,
                n_samples: 0,
                tikhonov: 0.0,
            },
        }
    }

    fn random_stable_system(n: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        let rho = spectral_radius(&raw);
        let a = raw * (0.9 / rho.max(1e-9));
        let b = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>() - 0.5);
        (a, b)
    }

    #[test]
    fn scalar_dare_matches_quadratic_root() {
        // a=0.5, b=1, q=r=1 reduces to p² − 0.25p − 1 = 0.
        let cert = solve_dare(
            &scalar_mat(0.5),
            &scalar_mat(1.0),
            &scalar_mat(1.0),
            &scalar_mat(1.0),
            0.1,
            1e-12,
            10_000,
        )
        .unwrap();
        let root = (0.25 + (0.25f64 * 0.25 + 4.0).sqrt()) / 2.0;
        assert!((cert.p[(0, 0)] - root).abs() < 1e-9);
        // K = bpa/(r + b²p).
        let k_expected = 0.5 * root / (1.0 + root);
        assert!((cert.k[(0, 0)] - k_expected).abs() < 1e-9);
        assert!(cert.dare_residual < 1e-8);
    }

    #[test]
    fn uncontrolled_dare_matches_lyapunov_series() {
        let (a, _) = random_stable_system(5, 1);
        let b = DMatrix::zeros(5, 1);
        let q = DMatrix::identity(5, 5);
        let r = DMatrix::identity(1, 1);
        let cert = solve_dare(&a, &b, &q, &r, 0.1, 1e-12, 50_000).unwrap();

        // Independent oracle: P = Σ_k (Aᵀ)^k Q A^k, truncated when the term
        // drops below 1e-12.
        let mut term = q.clone();
        let mut p_series = q.clone();
        for _ in 0..100_000 {
            term = a.tr_mul(&(&term * &a));
            p_series += &term;
            if term.norm() < 1e-12 {
                break;
            }
        }
        assert!((cert.p.clone() - p_series).norm() < 1e-8);
        assert!(cert.k.norm() == 0.0);
    }

    #[test]
    fn zero_a_gives_p_equals_q() {
        let n = 4;
        let a = DMatrix::zeros(n, n);
        let b = DMatrix::from_fn(n, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        let mut q = DMatrix::identity(n, n);
        q[(2, 2)] = 3.0;
        let r = DMatrix::identity(2, 2);
        let cert = solve_dare(&a, &b, &q, &r, 0.5, 1e-12, 100).unwrap();
        assert!((cert.p.clone() - q).norm() < 1e-12);
        assert!(cert.k.norm() < 1e-12);
    }

    #[test]
    fn dare_certificate_invariants_hold() {
        let (a, b) = random_stable_system(8, 7);
        let (q, r) = default_weights(8);
        let cert = solve_dare(&a, &b, &q, &r, 0.1, DARE_TOL, DARE_MAX_ITER).unwrap();
        // Symmetry and PSD-ness of P.
        assert!((cert.p.clone() - cert.p.transpose()).amax() < 1e-12);
        assert!(cert.p.clone().symmetric_eigenvalues().min() > -1e-10);
        // Residual contract and closed-loop stability.
        assert!(cert.dare_residual < 1e-8);
        assert!(spectral_radius(&(&a - &b * &cert.k)) < 1.0);
    }

    #[test]
    fn divergent_iteration_is_an_error() {
        // Unstable, uncontrollable: the iteration grows without bound.
        let a = DMatrix::identity(3, 3) * 1.5;
        let b = DMatrix::zeros(3, 1);
        let q = DMatrix::identity(3, 3);
        let r = DMatrix::identity(1, 1);
        let err = solve_dare(&a, &b, &q, &r, 0.1, 1e-10, 2_000).unwrap_err();
        assert!(matches!(
            err,
            Error::RiccatiNoConvergence { .. } | Error::NonFinite(_)
        ));
    }

    #[test]
    fn marginal_closed_loop_is_rejected_as_not_stabilizing() {
        // A = I with no control and Q = 0: the iteration fixes P = 0
        // immediately, but ρ(A − BK) = 1 — not a stabilizing solution.
        let a = DMatrix::identity(2, 2);
        let b = DMatrix::zeros(2, 1);
        let q = DMatrix::zeros(2, 2);
        let r = DMatrix::identity(1, 1);
        let err = solve_dare(&a, &b, &q, &r, 0.1, 1e-10, 100).unwrap_err();
        assert!(matches!(err, Error::NotStabilizing { .. }));
    }

    #[test]
    fn lyapunov_value_trivials() {
        let p = DMatrix::identity(6, 6);
        assert_eq!(lyapunov_value(&p, &DVector::zeros(6)), 0.0);
        let z = DVector::from_column_slice(&[3.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
        assert_relative_eq!(lyapunov_value(&p, &z), 25.0, max_relative = 1e-14);
    }

    #[test]
    fn quadratic_sandwich_holds_on_random_states() {
        let (a, b) = random_stable_system(8, 11);
        let (q, r) = default_weights(8);
        let cert = solve_dare(&a, &b, &q, &r, 0.1, DARE_TOL, DARE_MAX_ITER).unwrap();
        let spec = analyze_p(&cert.p, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..1000 {
            let z = DVector::from_fn(8, |_, _| rng.sample::<f64, _>(StandardNormal));
            let v = lyapunov_value(&cert.p, &z);
            let n2 = z.norm_squared();
            assert!(v >= spec.m1 * n2 - 1e-9);
            assert!(v <= spec.m2 * n2 + 1e-9);
        }
    }

    #[test]
    fn violation_forced_arithmetic() {
        // 6-dim identity lift; A scales V by a chosen factor, B = 0.
        let p = DMatrix::identity(6, 6);
        let cert = CLFCertificate {
            p,
            k: DMatrix::zeros(2, 6),
            q: DMatrix::identity(6, 6),
            r: DMatrix::identity(2, 2),
            eta: 0.1,
            dare_residual: 0.0,
            dictionary_fingerprint: 0,
        };

        // V(z) = 2, V(z⁺) = 1 → s = 1 − 2 + 0.1·2 = −0.8.
        let half = model_from(
            DMatrix::identity(6, 6) * (0.5f64).sqrt(),
            DMatrix::zeros(6, 2),
        );
        let z = DVector::from_column_slice(&[2.0f64.sqrt(), 0.0, 0.0, 0.0, 0.0, 0.0]);
        let (s, hinge) = violation(&half, &cert, &z, &Vector2::zeros());
        assert_relative_eq!(s, -0.8, max_relative = 1e-12);
        assert_eq!(hinge, 0.0);

        // V(z) = 1, V(z⁺) = 2 → s = 2 − 1 + 0.1 = 1.1.
        let double = model_from(
            DMatrix::identity(6, 6) * (2.0f64).sqrt(),
            DMatrix::zeros(6, 2),
        );
        let z1 = DVector::from_column_slice(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let (s2, hinge2) = violation(&double, &cert, &z1, &Vector2::zeros());
        assert_relative_eq!(s2, 1.1, max_relative = 1e-12);
        assert_relative_eq!(hinge2, 1.1, max_relative = 1e-12);
    }

    #[test]
    fn gradient_trivial_cases() {
        // A = 0, B = [e₁ e₂], P = I: s(0, u) = ‖u‖², gradient 2·Bᵀ·Bu = 2u…
        // with the violation convention s > 0 active, ∇ = 2BᵀP·Bu.
        let mut b = DMatrix::zeros(6, 2);
        b[(0, 0)] = 1.0;
        b[(1, 1)] = 1.0;
        let model = model_from(DMatrix::zeros(6, 6), b);
        let cert = CLFCertificate {
            p: DMatrix::identity(6, 6),
            k: DMatrix::zeros(2, 6),
            q: DMatrix::identity(6, 6),
            r: DMatrix::identity(2, 2),
            eta: 0.1,
            dare_residual: 0.0,
            dictionary_fingerprint: 0,
        };
        // Az + Bu = (2, 0, …): gradient (4, 0), matching the scalar sanity
        // value 2·B·P·(Bu) = 4 in the first coordinate.
        let g = violation_gradient_wrt_action(
            &model,
            &cert,
            &DVector::zeros(6),
            &Vector2::new(2.0, 0.0),
        );
        assert_relative_eq!(g[0], 4.0, max_relative = 1e-12);
        assert_relative_eq!(g[1], 0.0, max_relative = 1e-12);

        // Az + Bu = 0 → inactive (s = 0) → zero gradient.
        let g0 = violation_gradient_wrt_action(&model, &cert, &DVector::zeros(6), &Vector2::zeros());
        assert_eq!(g0, Vector2::zeros());
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let (a, b) = random_stable_system(8, 21);
        let (q, r) = default_weights(8);
        let cert = solve_dare(&a, &b, &q, &r, 0.1, DARE_TOL, DARE_MAX_ITER).unwrap();
        let model = model_from(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut active = 0;
        for _ in 0..200 {
            let z = DVector::from_fn(8, |_, _| rng.sample::<f64, _>(StandardNormal));
            let u = Vector2::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            );
            let (s, _) = violation(&model, &cert, &z, &u);
            if s <= 1e-6 {
                continue; // keep clear of the hinge kink
            }
            active += 1;
            let g = violation_gradient_wrt_action(&model, &cert, &z, &u);
            let h = 1e-6;
            for i in 0..2 {
                let mut up = u;
                let mut dn = u;
                up[i] += h;
                dn[i] -= h;
                let (sp, _) = violation(&model, &cert, &z, &up);
                let (sm, _) = violation(&model, &cert, &z, &dn);
                let fd = (sp - sm) / (2.0 * h);
                assert!(
                    (fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1.0),
                    "component {i}: fd {fd} vs analytic {}",
                    g[i]
                );
            }
        }
        assert!(active > 50, "too few active samples ({active}) to trust the check");
    }

    #[test]
    fn spectrum_report_examples() {
        let spec = analyze_p(&DMatrix::identity(4, 4), 0.0).unwrap();
        assert!(spec.eigenvalues.iter().all(|l| (l - 1.0).abs() < 1e-12));
        assert_relative_eq!(spec.condition_number, 1.0, max_relative = 1e-12);

        let p = DMatrix::from_diagonal(&DVector::from_column_slice(&[10.0, 1.0, 0.1]));
        let spec2 = analyze_p(&p, 0.0).unwrap();
        assert_relative_eq!(spec2.eigenvalues[0], 10.0, max_relative = 1e-12);
        assert_relative_eq!(spec2.eigenvalues[2], 0.1, max_relative = 1e-12);
        assert_relative_eq!(spec2.condition_number, 100.0, max_relative = 1e-10);
        assert_relative_eq!(spec2.m1, 0.1, max_relative = 1e-12);
        assert_relative_eq!(spec2.m2, 10.0, max_relative = 1e-12);

        // χ-shift makes a singular matrix positive definite.
        let sing = DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, 0.0]));
        let spec3 = analyze_p(&sing, 0.1).unwrap();
        assert_relative_eq!(spec3.eigenvalues[0], 1.1, max_relative = 1e-12);
        assert_relative_eq!(spec3.eigenvalues[1], 0.1, max_relative = 1e-12);
        assert!(spec3.m1 > 0.0);

        // Asymmetric input is rejected.
        let mut asym = DMatrix::identity(3, 3);
        asym[(0, 1)] = 0.5;
        assert!(analyze_p(&asym, 0.0).is_err());
    }

    #[test]
    fn contraction_verifies_at_and_below_eta_star() {
        let (a, b) = random_stable_system(8, 31);
        let (q, r) = default_weights(8);
        let cert = solve_dare(&a, &b, &q, &r, 0.1, DARE_TOL, DARE_MAX_ITER).unwrap();
        let model = model_from(a, b);
        let etas = eta_star(&cert);
        assert!(etas > 0.0 && etas < 1.0);

        // η = 0: LQR never increases V (pure DARE identity).
        let r0 = verify_contraction(&model, &cert, 0.0, 2_000, 5);
        assert!(r0.pass, "η=0 report: {r0:?}");

        // η = η*/2: certified decrease with margin.
        let rhalf = verify_contraction(&model, &cert, etas / 2.0, 10_000, 6);
        assert!(rhalf.pass, "η=η*/2 report: {rhalf:?}");
        assert!(rhalf.worst_s <= 1e-9);

        // η = η* exactly: still non-positive up to numerical slack.
        let rstar = verify_contraction(&model, &cert, etas, 2_000, 7);
        assert!(rstar.worst_s <= 1e-7, "worst_s at η*: {}", rstar.worst_s);
    }

    #[test]
    fn contraction_violates_beyond_eta_star_on_isotropic_instance() {
        // A = 0 ⇒ P = Q = I and K = 0, so η* = η̂ = 1 exactly and any
        // η > η* must produce a positive violation along the eigen-probe.
        let n = 6;
        let a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, 2);
        b[(0, 0)] = 1.0;
        b[(1, 1)] = 1.0;
        let q = DMatrix::identity(n, n);
        let r = DMatrix::identity(2, 2);
        let cert = solve_dare(&a, &b, &q, &r, 0.5, 1e-12, 100).unwrap();
        let model = model_from(a, b);
        let etas = eta_star(&cert);
        assert_relative_eq!(etas, 1.0, max_relative = 1e-9);

        let bad = verify_contraction(&model, &cert, 2.0 * etas, 100, 8);
        assert!(bad.worst_s > 0.0, "expected a violation, got {bad:?}");
        assert!(!bad.pass);
    }

    #[test]
    fn geometric_decay_bound_on_state_norm() {
        let (a, b) = random_stable_system(8, 41);
        let (q, r) = default_weights(8);
        let cert = solve_dare(&a, &b, &q, &r, 0.1, DARE_TOL, DARE_MAX_ITER).unwrap();
        let spec = analyze_p(&cert.p, 0.0).unwrap();
        let eta = eta_star(&cert);
        let closed = &a - &b * &cert.k;

        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let z0 = DVector::from_fn(8, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut z = z0.clone();
            for t in 1..=60 {
                z = &closed * &z;
                let bound = (spec.m2 / spec.m1).sqrt()
                    * (1.0 - eta).powf(t as f64 / 2.0)
                    * z0.norm();
                assert!(
                    z.norm() <= bound * (1.0 + 1e-9),
                    "‖z_{t}‖ = {} exceeds bound {bound}",
                    z.norm()
                );
            }
        }
    }

    #[test]
    fn certificate_json_round_trip() {
        let (a, b) = random_stable_system(8, 51);
        let (q, r) = default_weights(8);
        let mut cert = solve_dare(&a, &b, &q, &r, 0.1, DARE_TOL, DARE_MAX_ITER).unwrap();
        cert.dictionary_fingerprint = 0xdead_beef;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cert.json");
        cert.save_json(&path).unwrap();
        let back = CLFCertificate::load_json(&path).unwrap();
        assert_eq!(cert.p, back.p);
        assert_eq!(cert.k, back.k);
        assert_eq!(cert.q, back.q);
        assert_eq!(cert.r, back.r);
        assert_eq!(cert.eta, back.eta);
        assert_eq!(cert.dictionary_fingerprint, back.dictionary_fingerprint);
    }

    #[test]
    fn certificate_model_mismatch_is_detected() {
        let (a, b) = random_stable_system(8, 61);
        let model = model_from(a, b);
        let (q, r) = default_weights(8);
        let cert = certify_model(&model, &q, &r, 0.1, DARE_TOL, DARE_MAX_ITER).unwrap();
        assert!(cert.check_matches(&model).is_ok());

        let mut other = model.clone();
        other.dictionary.bandwidth *= 2.0;
        assert!(cert.check_matches(&other).is_err());
    }
}
