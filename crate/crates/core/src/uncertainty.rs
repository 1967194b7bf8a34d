//! Risk allocation, Gaussian quantiles, feedback-gain synthesis, covariance
//! propagation, and chance-constraint back-offs.
//!
//! The closed loop `u = v + K(x − s)` propagates state covariance through the
//! linearized dynamics,
//!
//! ```text
//! Σ_{k+1} = A_cl Σ_k A_clᵀ + C_k Σ_θ C_kᵀ + Σ_w,    A_cl = A_k + B_k K_k,
//! ```
//!
//! starting from Σ_0 = 0. Each polytope row `a·y ≤ h` held with probability
//! `1 − ε` becomes the deterministic row `a·ȳ ≤ h − η` with back-off
//! `η = φ⁻¹(1−ε)·sqrt(aᵀ Σ a)`; control rows use `a = G_i K_k` since only the
//! feedback part of the control is random. First-order mode additionally
//! propagates `∂Σ/∂z` so the back-off can be linearized in the decision
//! variables around the current iterate.

use nalgebra::{DMatrix, DVector, Matrix3};
use thiserror::Error;

use crate::model::{DynamicsDerivatives, STATE_DIM};

fn mat3_dyn(m: &Matrix3<f64>) -> DMatrix<f64> {
    DMatrix::from_iterator(3, 3, m.iter().cloned())
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UncertaintyError {
    #[error("probability must lie in (0, 1), got {p}")]
    ProbabilityRange { p: f64 },
    #[error("satisfaction level {name} must lie in (0.5, 1), got {value}")]
    SatisfactionRange { name: &'static str, value: f64 },
    #[error("{name} must be symmetric PSD (asymmetry {asymmetry:.2e}, min eigenvalue {min_eig:.2e})")]
    NotPsd {
        name: &'static str,
        asymmetry: f64,
        min_eig: f64,
    },
    #[error("Riccati step failed at step {step}: R + BᵀPB is not positive definite")]
    RiccatiFailure { step: usize },
    #[error("covariance lost positive semidefiniteness at step {step} (min eigenvalue {min_eig:.2e})")]
    CovarianceNotPsd { step: usize, min_eig: f64 },
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },
}

/// Disturbance description: additive state noise, per-contact position noise,
/// and the joint satisfaction levels for state and control constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyModel {
    pub sigma_w: DMatrix<f64>,
    pub sigma_theta: Vec<Matrix3<f64>>,
    pub alpha_x: f64,
    pub alpha_u: f64,
}

fn check_psd(name: &'static str, m: &DMatrix<f64>) -> Result<(), UncertaintyError> {
    let asymmetry = (m - m.transpose()).abs().max();
    let sym = (m + m.transpose()) * 0.5;
    let min_eig = sym
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if asymmetry > 1e-9 || min_eig < -1e-10 {
        return Err(UncertaintyError::NotPsd {
            name,
            asymmetry,
            min_eig,
        });
    }
    Ok(())
}

impl UncertaintyModel {
    pub fn new(
        sigma_w: DMatrix<f64>,
        sigma_theta: Vec<Matrix3<f64>>,
        alpha_x: f64,
        alpha_u: f64,
    ) -> Result<Self, UncertaintyError> {
        if sigma_w.nrows() != STATE_DIM || sigma_w.ncols() != STATE_DIM {
            return Err(UncertaintyError::Dimension {
                context: "sigma_w",
                expected: STATE_DIM,
                got: sigma_w.nrows(),
            });
        }
        check_psd("sigma_w", &sigma_w)?;
        for t in &sigma_theta {
            check_psd("sigma_theta", &mat3_dyn(t))?;
        }
        for (name, value) in [("alpha_x", alpha_x), ("alpha_u", alpha_u)] {
            if !(value > 0.5 && value < 1.0) {
                return Err(UncertaintyError::SatisfactionRange { name, value });
            }
        }
        Ok(Self {
            sigma_w,
            sigma_theta,
            alpha_x,
            alpha_u,
        })
    }

    /// Zero-noise model (back-offs vanish, the stochastic problem reduces to
    /// the nominal one).
    pub fn zero(ee_count: usize, alpha_x: f64, alpha_u: f64) -> Result<Self, UncertaintyError> {
        Self::new(
            DMatrix::zeros(STATE_DIM, STATE_DIM),
            vec![Matrix3::zeros(); ee_count],
            alpha_x,
            alpha_u,
        )
    }
}

/// Pre-stabilizing feedback gains K_k, one (3·ee)×9 matrix per step.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackPolicy {
    pub gains: Vec<DMatrix<f64>>,
}

impl FeedbackPolicy {
    pub fn zero(horizon: usize, ee_count: usize) -> Self {
        Self {
            gains: vec![DMatrix::zeros(3 * ee_count, STATE_DIM); horizon],
        }
    }
}

/// State covariances Σ_0..Σ_N and, in first-order mode, the per-step tensors
/// ∂Σ_k/∂z (one 9×9 matrix per z-component, z = (s, v)).
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceTrajectory {
    pub sigmas: Vec<DMatrix<f64>>,
    pub derivs: Option<Vec<Vec<DMatrix<f64>>>>,
}

/// Which back-off evaluation the SCP subproblem uses: constants from the
/// current iterate, or constants plus the covariance-derivative term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackoffMode {
    ZeroOrder,
    FirstOrder,
}

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Inverse standard normal CDF: z with Φ(z) = p.
///
/// Solves on the smaller tail so the erfc-based CDF is evaluated to relative
/// precision: safeguarded Newton with a bisection fallback, no lookup tables.
pub fn gaussian_quantile(p: f64) -> Result<f64, UncertaintyError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(UncertaintyError::ProbabilityRange { p });
    }
    let (q, sign) = if p >= 0.5 { (1.0 - p, 1.0) } else { (p, -1.0) };
    // Upper-tail mass Q(z) = 0.5·erfc(z/√2); convex and decreasing on z ≥ 0,
    // so Newton from the left converges monotonically.
    let tail = |z: f64| 0.5 * libm::erfc(z / std::f64::consts::SQRT_2);
    let (mut lo, mut hi) = (0.0_f64, 40.0_f64);
    let mut z = 1.0_f64;
    for _ in 0..200 {
        let f = tail(z) - q;
        if f == 0.0 {
            break;
        }
        if f > 0.0 {
            lo = z;
        } else {
            hi = z;
        }
        let pdf = normal_pdf(z);
        let newton = if pdf > 0.0 { z + f / pdf } else { f64::NAN };
        let next = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        let done = (next - z).abs() < 1e-15 * (1.0 + z.abs());
        z = next;
        if done {
            break;
        }
    }
    Ok(sign * z)
}

/// Equal risk allocation: each of `n_rows` intersecting half-planes receives
/// ε = (1 − alpha)/n_rows of the joint violation budget.
pub fn allocate_risk(alpha: f64, n_rows: usize) -> Vec<f64> {
    assert!(n_rows >= 1, "risk allocation needs at least one row");
    vec![(1.0 - alpha) / n_rows as f64; n_rows]
}

/// Finite-horizon discrete LQR gains for the time-varying linearization
/// (A_k, B_k), with swing-foot force rows zeroed per step.
///
/// The Riccati recursion runs backward from P_N = Q with the Joseph-form
/// update, which stays valid after the swing rows of K_k are zeroed.
pub fn lqr_gains(
    a_seq: &[DMatrix<f64>],
    b_seq: &[DMatrix<f64>],
    active: &[Vec<bool>],
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<FeedbackPolicy, UncertaintyError> {
    let n = a_seq.len();
    if b_seq.len() != n || active.len() != n {
        return Err(UncertaintyError::Dimension {
            context: "lqr sequences",
            expected: n,
            got: b_seq.len().min(active.len()),
        });
    }
    let mut p = q.clone();
    let mut gains = vec![DMatrix::zeros(0, 0); n];
    for k in (0..n).rev() {
        let a = &a_seq[k];
        let b = &b_seq[k];
        let s = r + b.transpose() * &p * b;
        let chol = nalgebra::Cholesky::new(s)
            .ok_or(UncertaintyError::RiccatiFailure { step: k })?;
        let mut k_mat = -chol.solve(&(b.transpose() * &p * a));
        for (e, &act) in active[k].iter().enumerate() {
            if !act {
                k_mat.view_mut((3 * e, 0), (3, STATE_DIM)).fill(0.0);
            }
        }
        let a_cl = a + b * &k_mat;
        p = q + k_mat.transpose() * r * &k_mat + a_cl.transpose() * &p * &a_cl;
        p = (&p + p.transpose()) * 0.5;
        gains[k] = k_mat;
    }
    Ok(FeedbackPolicy { gains })
}

fn contact_noise(d: &DynamicsDerivatives, model: &UncertaintyModel) -> DMatrix<f64> {
    let mut acc = DMatrix::zeros(STATE_DIM, STATE_DIM);
    for (e, theta) in model.sigma_theta.iter().enumerate() {
        let c_e = d.c_mat.view((0, 3 * e), (STATE_DIM, 3));
        acc += c_e * theta * c_e.transpose();
    }
    acc
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Closed-loop covariance recursion from Σ_0 = 0; first-order mode also
/// propagates the derivative tensor
/// `T_{k+1} = A_cl T_k A_clᵀ + ∂(A_cl Σ_k A_clᵀ + C Σ_θ Cᵀ)/∂z_k`
/// using the constant second-order tensors of the dynamics.
pub fn propagate_covariance(
    derivs: &[DynamicsDerivatives],
    policy: &FeedbackPolicy,
    model: &UncertaintyModel,
    mode: BackoffMode,
) -> Result<CovarianceTrajectory, UncertaintyError> {
    let n = derivs.len();
    if policy.gains.len() != n {
        return Err(UncertaintyError::Dimension {
            context: "feedback policy horizon",
            expected: n,
            got: policy.gains.len(),
        });
    }
    let z_dim = derivs
        .first()
        .map(|d| d.second_order.z_dim())
        .unwrap_or(STATE_DIM);

    let mut sigmas = Vec::with_capacity(n + 1);
    sigmas.push(DMatrix::zeros(STATE_DIM, STATE_DIM));
    let mut tensors: Option<Vec<Vec<DMatrix<f64>>>> = match mode {
        BackoffMode::FirstOrder => Some(vec![vec![
            DMatrix::zeros(STATE_DIM, STATE_DIM);
            z_dim
        ]]),
        BackoffMode::ZeroOrder => None,
    };

    for k in 0..n {
        let d = &derivs[k];
        let k_mat = &policy.gains[k];
        let a_cl = &d.a_mat + &d.b_mat * k_mat;
        let mut next = &a_cl * &sigmas[k] * a_cl.transpose() + contact_noise(d, model)
            + &model.sigma_w;
        symmetrize(&mut next);
        let min_eig = next
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -1e-8 {
            return Err(UncertaintyError::CovarianceNotPsd {
                step: k + 1,
                min_eig,
            });
        }

        if let Some(ts) = tensors.as_mut() {
            let prev = &ts[k];
            let mut next_t = Vec::with_capacity(z_dim);
            for r in 0..z_dim {
                let d_a_cl = d.second_order.d_a(r) + d.second_order.d_b(r) * k_mat;
                let mut t = &a_cl * &prev[r] * a_cl.transpose();
                let cross = &d_a_cl * &sigmas[k] * a_cl.transpose();
                t += &cross + cross.transpose();
                for (e, theta) in model.sigma_theta.iter().enumerate() {
                    let c_e = d.c_mat.view((0, 3 * e), (STATE_DIM, 3));
                    let dc_full = d.second_order.d_c(r);
                    let dc_e = dc_full.view((0, 3 * e), (STATE_DIM, 3));
                    let term = dc_e * theta * c_e.transpose();
                    t += &term + term.transpose();
                }
                symmetrize(&mut t);
                next_t.push(t);
            }
            ts.push(next_t);
        }
        sigmas.push(next);
    }

    Ok(CovarianceTrajectory {
        sigmas,
        derivs: tensors,
    })
}

/// Back-off η = φ⁻¹(1 − ε)·sqrt(rowᵀ Σ row).
///
/// For control rows pass `row = G_i K_k`; with zero gains the control
/// back-offs are exactly zero and the constraints revert to nominal.
pub fn backoff(row: &DVector<f64>, sigma: &DMatrix<f64>, epsilon: f64) -> f64 {
    assert!(
        epsilon > 0.0 && epsilon <= 0.5,
        "risk must lie in (0, 0.5], got {epsilon}"
    );
    let variance = (row.transpose() * sigma * row)[(0, 0)].max(0.0);
    gaussian_quantile(1.0 - epsilon).expect("1-epsilon is in [0.5, 1)") * variance.sqrt()
}

/// Gradient of [`backoff`] with respect to z, for a constant row:
/// `φ⁻¹(1−ε) · (rowᵀ ∂Σ/∂z_r row) / (2·sqrt(rowᵀΣrow))` per component.
///
/// A degenerate norm (≤ 1e-12) is a removable singularity; the gradient is
/// defined as zero there.
pub fn backoff_gradient(
    row: &DVector<f64>,
    sigma: &DMatrix<f64>,
    sigma_deriv: &[DMatrix<f64>],
    epsilon: f64,
) -> DVector<f64> {
    assert!(
        epsilon > 0.0 && epsilon <= 0.5,
        "risk must lie in (0, 0.5], got {epsilon}"
    );
    let norm = (row.transpose() * sigma * row)[(0, 0)].max(0.0).sqrt();
    let mut grad = DVector::zeros(sigma_deriv.len());
    if norm <= 1e-12 {
        return grad;
    }
    let quantile = gaussian_quantile(1.0 - epsilon).expect("1-epsilon is in [0.5, 1)");
    for (r, t) in sigma_deriv.iter().enumerate() {
        grad[r] = quantile * (row.transpose() * t * row)[(0, 0)] / (2.0 * norm);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        dynamics_jacobians, CentroidalState, ContactPoint, ControlInput, RobotParams,
    };
    use crate::rng::NormalStream;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;

    /// Independent oracle: plain bisection on the erfc-based CDF.
    fn quantile_bisection(p: f64) -> f64 {
        let (mut lo, mut hi) = (-13.0_f64, 13.0_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if normal_cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn quantile_at_half_is_zero() {
        assert_relative_eq!(gaussian_quantile(0.5).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn quantile_matches_bisection_oracle() {
        for p in [0.9, 0.95, 0.975, 0.995, 1.0 - 1e-6] {
            let z = gaussian_quantile(p).unwrap();
            assert!((z - quantile_bisection(p)).abs() < 1e-9, "p = {p}");
        }
        assert_relative_eq!(gaussian_quantile(0.975).unwrap(), 1.959964, epsilon = 1e-6);
        assert_relative_eq!(gaussian_quantile(0.9).unwrap(), 1.281552, epsilon = 1e-6);
    }

    #[test]
    fn quantile_inverts_cdf_over_working_range() {
        let mut z = -6.0;
        while z <= 6.0 {
            let round = gaussian_quantile(normal_cdf(z)).unwrap();
            assert!((round - z).abs() < 1e-8, "z = {z}, got {round}");
            z += 0.25;
        }
    }

    #[test]
    fn quantile_rejects_out_of_range() {
        assert!(gaussian_quantile(0.0).is_err());
        assert!(gaussian_quantile(1.0).is_err());
        assert!(gaussian_quantile(1.2).is_err());
    }

    #[test]
    fn risk_allocation_is_equal_split() {
        let eps = allocate_risk(0.9, 4);
        assert_eq!(eps.len(), 4);
        for e in eps {
            assert_relative_eq!(e, 0.025, epsilon = 1e-15);
        }
        let tight = allocate_risk(1.0 - 1e-9, 1);
        assert_relative_eq!(tight[0], 1e-9, max_relative = 1e-6);
        let sum: f64 = allocate_risk(0.7, 7).iter().sum();
        assert_relative_eq!(sum, 0.3, epsilon = 1e-15);
    }

    #[test]
    fn zero_input_matrix_gives_zero_gains() {
        let a = vec![DMatrix::<f64>::identity(9, 9); 5];
        let b = vec![DMatrix::<f64>::zeros(9, 12); 5];
        let active = vec![vec![true; 4]; 5];
        let q = DMatrix::identity(9, 9);
        let r = DMatrix::identity(12, 12) * 1e-2;
        let policy = lqr_gains(&a, &b, &active, &q, &r).unwrap();
        for k in &policy.gains {
            assert_eq!(k.abs().max(), 0.0);
        }
    }

    /// Independent 2×2 Riccati oracle on plain arrays (scalar double
    /// integrator: position/velocity with force input).
    #[test]
    fn matches_scalar_double_integrator_oracle() {
        let dt = 0.1;
        let n = 30;
        // x = (pos, vel), u = accel
        let a = [[1.0, dt], [0.0, 1.0]];
        let b = [dt * dt / 2.0, dt];
        let q = [[1.0, 0.0], [0.0, 1.0]];
        let r = 0.01;
        // Oracle recursion with explicit scalar algebra.
        let mut p = q;
        let mut k_oracle = [0.0, 0.0];
        for _ in 0..n {
            // s = r + bᵀ P b
            let pb = [
                p[0][0] * b[0] + p[0][1] * b[1],
                p[1][0] * b[0] + p[1][1] * b[1],
            ];
            let s = r + b[0] * pb[0] + b[1] * pb[1];
            // bᵀ P a
            let bpa = [
                b[0] * (p[0][0] * a[0][0] + p[0][1] * a[1][0])
                    + b[1] * (p[1][0] * a[0][0] + p[1][1] * a[1][0]),
                b[0] * (p[0][0] * a[0][1] + p[0][1] * a[1][1])
                    + b[1] * (p[1][0] * a[0][1] + p[1][1] * a[1][1]),
            ];
            k_oracle = [-bpa[0] / s, -bpa[1] / s];
            // Joseph form: P = Q + Kᵀ r K + (A + bK)ᵀ P (A + bK)
            let acl = [
                [a[0][0] + b[0] * k_oracle[0], a[0][1] + b[0] * k_oracle[1]],
                [a[1][0] + b[1] * k_oracle[0], a[1][1] + b[1] * k_oracle[1]],
            ];
            let mut pn = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    let mut acc = q[i][j] + k_oracle[i] * r * k_oracle[j];
                    for m in 0..2 {
                        for l in 0..2 {
                            acc += acl[m][i] * p[m][l] * acl[l][j];
                        }
                    }
                    pn[i][j] = acc;
                }
            }
            p = pn;
        }

        let a_seq = vec![DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]); n];
        let b_seq = vec![DMatrix::from_column_slice(2, 1, &[dt * dt / 2.0, dt]); n];
        let active = vec![vec![true]; n];
        // lqr_gains zeroes rows in chunks of three (per foot); a 1-input test
        // fixture still works because the row stays active.
        let q_m = DMatrix::identity(2, 2);
        let r_m = DMatrix::from_element(1, 1, r);
        let policy = lqr_gains(&a_seq, &b_seq, &active, &q_m, &r_m).unwrap();
        assert_relative_eq!(policy.gains[0][(0, 0)], k_oracle[0], max_relative = 1e-10);
        assert_relative_eq!(policy.gains[0][(0, 1)], k_oracle[1], max_relative = 1e-10);
    }

    fn spectral_radius(m: &DMatrix<f64>) -> f64 {
        m.complex_eigenvalues()
            .iter()
            .map(|e| e.norm())
            .fold(0.0, f64::max)
    }

    #[test]
    fn lqr_shrinks_spectral_radius_of_unstable_systems() {
        let mut stream = NormalStream::new(23, 0, 0, 0);
        for trial in 0..5 {
            let raw = DMatrix::from_fn(9, 9, |_, _| stream.next_normal());
            let rho = spectral_radius(&raw);
            let a = raw * (1.3 / rho); // Schur-unstable by construction
            let b = DMatrix::from_fn(9, 12, |_, _| stream.next_normal());
            let n = 60;
            let a_seq = vec![a.clone(); n];
            let b_seq = vec![b.clone(); n];
            let active = vec![vec![true; 4]; n];
            let q = DMatrix::identity(9, 9);
            let r = DMatrix::identity(12, 12) * 1e-2;
            let policy = lqr_gains(&a_seq, &b_seq, &active, &q, &r).unwrap();
            let closed = &a + &b * &policy.gains[0];
            assert!(
                spectral_radius(&closed) <= spectral_radius(&a) + 1e-9,
                "trial {trial}"
            );
        }
    }

    fn standing_derivs(ee: usize) -> (Vec<DynamicsDerivatives>, RobotParams) {
        let params = RobotParams::new(2.5, Vector3::new(0.4, 0.4, 0.5), ee).unwrap();
        let feet: Vec<Option<ContactPoint>> = (0..ee)
            .map(|e| {
                let x = if e % 2 == 0 { 0.2 } else { -0.2 };
                let y = if e < 2 { 0.15 } else { -0.15 };
                Some(ContactPoint::on_ground(Vector3::new(x, y, 0.0), 0.5).unwrap())
            })
            .collect();
        let state = CentroidalState::new(
            Vector3::new(0.0, 0.0, 0.25),
            Vector3::zeros(),
            Vector3::zeros(),
        );
        let share = 2.5 * 9.81 / ee as f64;
        let control = ControlInput {
            forces: vec![Vector3::new(0.0, 0.0, share); ee],
        };
        let d = dynamics_jacobians(&state, &control, &feet, &params, 0.02).unwrap();
        (vec![d; 10], params)
    }

    fn small_model(ee: usize) -> UncertaintyModel {
        let mut sigma_w = DMatrix::zeros(9, 9);
        for i in 0..9 {
            sigma_w[(i, i)] = 1e-4 * (1.0 + i as f64 * 0.1);
        }
        UncertaintyModel::new(sigma_w, vec![Matrix3::identity() * 4e-4; ee], 0.9, 0.9).unwrap()
    }

    #[test]
    fn first_step_covariance_is_contact_noise_plus_additive() {
        let (derivs, params) = standing_derivs(4);
        let model = small_model(4);
        let policy = FeedbackPolicy::zero(derivs.len(), params.ee_count);
        let cov =
            propagate_covariance(&derivs, &policy, &model, BackoffMode::ZeroOrder).unwrap();
        assert_eq!(cov.sigmas[0].abs().max(), 0.0);
        let expected = contact_noise(&derivs[0], &model) + &model.sigma_w;
        assert_relative_eq!(cov.sigmas[1], expected, epsilon = 1e-14);
    }

    #[test]
    fn zero_noise_stays_zero() {
        let (derivs, params) = standing_derivs(4);
        let model = UncertaintyModel::zero(params.ee_count, 0.9, 0.9).unwrap();
        let policy = FeedbackPolicy::zero(derivs.len(), params.ee_count);
        let cov =
            propagate_covariance(&derivs, &policy, &model, BackoffMode::FirstOrder).unwrap();
        for s in &cov.sigmas {
            assert_eq!(s.abs().max(), 0.0);
        }
        for t in cov.derivs.as_ref().unwrap() {
            for m in t {
                assert_eq!(m.abs().max(), 0.0);
            }
        }
    }

    /// PSD square root via symmetric eigendecomposition (test helper).
    fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
        let eig = nalgebra::SymmetricEigen::new(m.clone());
        let mut d = DMatrix::zeros(m.nrows(), m.nrows());
        for i in 0..m.nrows() {
            d[(i, i)] = eig.eigenvalues[i].max(0.0).sqrt();
        }
        &eig.eigenvectors * d * eig.eigenvectors.transpose()
    }

    #[test]
    fn covariance_matches_sampled_linear_rollouts() {
        let (derivs, _params) = standing_derivs(4);
        let model = small_model(4);
        let n_steps = derivs.len();
        let q = DMatrix::identity(9, 9);
        let r = DMatrix::identity(12, 12) * 1e-2;
        let a_seq: Vec<_> = derivs.iter().map(|d| d.a_mat.clone()).collect();
        let b_seq: Vec<_> = derivs.iter().map(|d| d.b_mat.clone()).collect();
        let active = vec![vec![true; 4]; n_steps];
        let policy = lqr_gains(&a_seq, &b_seq, &active, &q, &r).unwrap();
        let cov =
            propagate_covariance(&derivs, &policy, &model, BackoffMode::ZeroOrder).unwrap();

        // Monte-Carlo oracle on the same closed-loop linear recursion.
        let sqrt_w = psd_sqrt(&model.sigma_w);
        let sqrt_theta = psd_sqrt(&mat3_dyn(&model.sigma_theta[0]));
        let n_samples = 20_000;
        let probe = n_steps;
        let mut mean = DVector::zeros(9);
        let mut second = DMatrix::zeros(9, 9);
        for i in 0..n_samples {
            let mut x = DVector::zeros(9);
            for k in 0..probe {
                let a_cl = &derivs[k].a_mat + &derivs[k].b_mat * &policy.gains[k];
                let mut w_stream = NormalStream::new(777, i as u64, k as u64, 0);
                let mut raw = DVector::zeros(9);
                for v in raw.iter_mut() {
                    *v = w_stream.next_normal();
                }
                let w = &sqrt_w * raw;
                let mut theta_term = DVector::zeros(9);
                for e in 0..4 {
                    let mut t_stream = NormalStream::new(777, i as u64, k as u64, 1 + e as u64);
                    let mut raw3 = DVector::zeros(3);
                    for v in raw3.iter_mut() {
                        *v = t_stream.next_normal();
                    }
                    let dtheta = &sqrt_theta * raw3;
                    theta_term +=
                        derivs[k].c_mat.view((0, 3 * e), (9, 3)) * dtheta;
                }
                x = a_cl * x + theta_term + w;
            }
            mean += &x;
            second += &x * x.transpose();
        }
        mean /= n_samples as f64;
        let sample_cov = second / n_samples as f64 - &mean * mean.transpose();
        let rel = (&sample_cov - &cov.sigmas[probe]).norm() / cov.sigmas[probe].norm();
        assert!(rel < 0.1, "Frobenius relative error {rel}");
    }

    #[test]
    fn backoff_zero_variance_reverts_to_nominal() {
        let row = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let sigma = DMatrix::zeros(3, 3);
        assert_eq!(backoff(&row, &sigma, 0.025), 0.0);
    }

    #[test]
    fn backoff_matches_quantile_times_std() {
        let mut sigma = DMatrix::zeros(4, 4);
        sigma[(0, 0)] = 4.0;
        let mut row = DVector::zeros(4);
        row[0] = 1.0;
        assert_relative_eq!(backoff(&row, &sigma, 0.025), 3.919928, epsilon = 1e-5);
    }

    #[test]
    fn backoff_empirical_violation_within_budget() {
        // Hold a single tightened half-space at equality and sample.
        let mut sigma = DMatrix::zeros(2, 2);
        sigma[(0, 0)] = 2.25;
        sigma[(1, 1)] = 0.5;
        let row = DVector::from_vec(vec![1.0, -0.5]);
        let eps = 0.025;
        let eta = backoff(&row, &sigma, eps);
        let sqrt_sigma = psd_sqrt(&sigma);
        let n = 200_000;
        let mut violations = 0usize;
        for i in 0..n {
            let mut s = NormalStream::new(31, i as u64, 0, 0);
            let raw = DVector::from_vec(vec![s.next_normal(), s.next_normal()]);
            let x = &sqrt_sigma * raw;
            if (row.transpose() * x)[(0, 0)] > eta {
                violations += 1;
            }
        }
        let freq = violations as f64 / n as f64;
        let slack = 3.0 * (eps * (1.0 - eps) / n as f64).sqrt();
        assert!(freq <= eps + slack, "violation frequency {freq}");
        // And not wildly conservative either: the bound is tight for a single row.
        assert!(freq >= eps - slack, "violation frequency {freq}");
    }

    #[test]
    fn backoff_monotone_in_risk_and_covariance() {
        let row = DVector::from_vec(vec![0.7, -0.3, 1.1]);
        let base = {
            let mut m = DMatrix::zeros(3, 3);
            m[(0, 0)] = 1.0;
            m[(1, 1)] = 2.0;
            m[(2, 2)] = 0.5;
            m
        };
        let eta = backoff(&row, &base, 0.05);
        assert!(backoff(&row, &base, 0.01) > eta);
        let bigger = &base + DMatrix::identity(3, 3) * 0.5;
        assert!(backoff(&row, &bigger, 0.05) > eta);
    }

    #[test]
    fn control_backoff_vanishes_with_zero_gains() {
        let k = DMatrix::<f64>::zeros(12, 9);
        let g_row = DVector::from_fn(12, |i, _| if i == 2 { 1.0 } else { 0.0 });
        let row_state = (g_row.transpose() * &k).transpose();
        let sigma = DMatrix::identity(9, 9) * 3.0;
        assert_eq!(backoff(&row_state, &sigma, 0.025), 0.0);
    }

    #[test]
    fn gradient_zero_for_constant_covariance() {
        let row = DVector::from_vec(vec![1.0, 2.0]);
        let sigma = DMatrix::identity(2, 2);
        let derivs = vec![DMatrix::zeros(2, 2); 3];
        let g = backoff_gradient(&row, &sigma, &derivs, 0.025);
        assert_eq!(g.abs().max(), 0.0);
    }

    #[test]
    fn gradient_matches_one_dimensional_analogue() {
        // Σ(z) = z², row = 1: backoff = φ⁻¹(1−ε)·|z|. With ε = 1 − Φ(1) the
        // quantile factor is 1 and the gradient at z = 2 is d|z|/dz = 1.
        let eps = 1.0 - normal_cdf(1.0);
        let z = 2.0_f64;
        let row = DVector::from_vec(vec![1.0]);
        let sigma = DMatrix::from_element(1, 1, z * z);
        let deriv = vec![DMatrix::from_element(1, 1, 2.0 * z)];
        let g = backoff_gradient(&row, &sigma, &deriv, eps);
        assert_relative_eq!(g[0], 1.0, epsilon = 1e-9);
        // Finite differences of backoff through Σ(z) agree.
        let h = 1e-6;
        let up = backoff(&row, &DMatrix::from_element(1, 1, (z + h) * (z + h)), eps);
        let dn = backoff(&row, &DMatrix::from_element(1, 1, (z - h) * (z - h)), eps);
        assert_relative_eq!(g[0], (up - dn) / (2.0 * h), epsilon = 1e-6);
    }

    #[test]
    fn gradient_degenerate_norm_is_zero() {
        let row = DVector::from_vec(vec![1.0, 0.0]);
        let sigma = DMatrix::zeros(2, 2);
        let deriv = vec![DMatrix::identity(2, 2); 2];
        let g = backoff_gradient(&row, &sigma, &deriv, 0.025);
        assert_eq!(g.abs().max(), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences_through_propagation() {
        // Constant trajectory: perturbing z means perturbing every stage the
        // same way, which is exactly what the tensor recursion accumulates.
        let params = RobotParams::new(2.0, Vector3::new(0.4, 0.4, 0.5), 2).unwrap();
        let feet = vec![
            Some(ContactPoint::on_ground(Vector3::new(0.15, 0.1, 0.0), 0.6).unwrap()),
            Some(ContactPoint::on_ground(Vector3::new(-0.15, -0.1, 0.0), 0.6).unwrap()),
        ];
        let state = CentroidalState::new(
            Vector3::new(0.02, -0.01, 0.28),
            Vector3::new(0.3, 0.1, 0.0),
            Vector3::new(0.01, 0.02, -0.01),
        );
        let control = ControlInput {
            forces: vec![
                Vector3::new(0.8, -0.4, 10.0),
                Vector3::new(-0.2, 0.3, 9.5),
            ],
        };
        let dt = 0.02;
        let n_steps = 5;
        let model = {
            let mut sigma_w = DMatrix::zeros(9, 9);
            for i in 0..9 {
                sigma_w[(i, i)] = 2e-4;
            }
            UncertaintyModel::new(sigma_w, vec![Matrix3::identity() * 1e-3; 2], 0.9, 0.9)
                .unwrap()
        };
        let gains = DMatrix::from_fn(6, 9, |i, j| 0.05 * ((i * 9 + j) as f64 * 0.13).sin());
        let policy = FeedbackPolicy {
            gains: vec![gains; n_steps],
        };
        let eps = 0.025;
        let row = DVector::from_fn(9, |i, _| ((i + 1) as f64 * 0.3).cos());

        let cov_at = |sv: &DVector<f64>, uv: &DVector<f64>, mode: BackoffMode| {
            let s = CentroidalState::from_slice(sv.as_slice());
            let u = ControlInput::from_slice(uv.as_slice());
            let d = dynamics_jacobians(&s, &u, &feet, &params, dt).unwrap();
            propagate_covariance(&vec![d; n_steps], &policy, &model, mode).unwrap()
        };

        let s0 = state.to_vector();
        let u0 = control.to_vector();
        let cov = cov_at(&s0, &u0, BackoffMode::FirstOrder);
        let probe = n_steps; // Σ at the final step has the richest dependence
        let grad = backoff_gradient(
            &row,
            &cov.sigmas[probe],
            &cov.derivs.as_ref().unwrap()[probe],
            eps,
        );

        let h = 1e-5;
        for r in 0..15 {
            let mut sp = s0.clone();
            let mut sm = s0.clone();
            let mut up = u0.clone();
            let mut um = u0.clone();
            if r < 9 {
                sp[r] += h;
                sm[r] -= h;
            } else {
                up[r - 9] += h;
                um[r - 9] -= h;
            }
            let eta_p = backoff(&row, &cov_at(&sp, &up, BackoffMode::ZeroOrder).sigmas[probe], eps);
            let eta_m = backoff(&row, &cov_at(&sm, &um, BackoffMode::ZeroOrder).sigmas[probe], eps);
            let fd = (eta_p - eta_m) / (2.0 * h);
            let denom = fd.abs().max(1e-6);
            assert!(
                ((grad[r] - fd) / denom).abs() < 1e-4,
                "component {r}: analytic {} vs fd {fd}",
                grad[r]
            );
        }
    }

    #[test]
    fn model_validation_rejects_bad_inputs() {
        let mut asym = DMatrix::zeros(9, 9);
        asym[(0, 1)] = 1.0;
        assert!(UncertaintyModel::new(asym, vec![], 0.9, 0.9).is_err());
        let mut indef = DMatrix::zeros(9, 9);
        indef[(0, 0)] = -1.0;
        assert!(UncertaintyModel::new(indef, vec![], 0.9, 0.9).is_err());
        let ok = DMatrix::zeros(9, 9);
        assert!(UncertaintyModel::new(ok.clone(), vec![], 0.4, 0.9).is_err());
        assert!(UncertaintyModel::new(ok, vec![], 0.9, 1.0).is_err());
    }
}
