//! Sequential convex programming with an L1 trust-region penalty.
//!
//! Each iteration linearizes the dynamics about the current iterate and
//! solves a convex QP whose decision vector stacks, per step,
//! `(s_k ∈ R⁹, v_k ∈ R^{3·ee}, t_k ∈ R)` plus the terminal `(s_N, t_N)`:
//!
//! - quadratic tracking of the references plus per-axis force regularization
//!   plus the penalty `γʲ Σ t_k`;
//! - defect-corrected linearized dynamics equalities, initial state, swing
//!   forces pinned to zero, and (optionally) the hard terminal state;
//! - friction-pyramid rows in the contact frame, the untightened unilateral
//!   row, reachability box rows, and the trust rows
//!   `±(κ_k − κ_kʲ) − Ωʲ ≤ t_k`, `−t_k ≤ 0`.
//!
//! In stochastic mode the pyramid and reachability rows are tightened by the
//! back-offs of the current iterate's covariance trajectory; first-order mode
//! adds the covariance-derivative term so the tightening is linearized in the
//! decision variables. The trust region is enforced only on the angular
//! momentum, the only nonlinear part of the dynamics. The radius Ω and
//! penalty γ are updated from the accuracy ratio of the linearized model.

use nalgebra::{DMatrix, DVector, Vector3};
use thiserror::Error;

use crate::gait::{ContactPlan, ReferenceTrajectory};
use crate::model::{
    dynamics_jacobians, dynamics_step, CentroidalState, ControlInput, DynamicsDerivatives,
    ModelError, RobotParams, STATE_DIM,
};
use crate::qp::{qp_solve, QpError, QpOptions, QpProblem, QpStatus};
use crate::uncertainty::{
    allocate_risk, backoff, backoff_gradient, lqr_gains, propagate_covariance, BackoffMode,
    CovarianceTrajectory, FeedbackPolicy, UncertaintyError, UncertaintyModel,
};

#[derive(Debug, Error)]
pub enum ScpError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("QP backend failed at SCP iteration {iteration} with status {status:?}")]
    QpFailure { iteration: usize, status: QpStatus },
    #[error("stochastic mode requires an uncertainty model")]
    MissingUncertainty,
    #[error("back-off leaves no feasible interior at step {step}: {constraint}")]
    InfeasibleBackoff { step: usize, constraint: String },
    #[error("reference trajectory does not match the plan: expected {expected} {what}, got {got}")]
    ReferenceMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid SCP settings: {reason}")]
    BadSettings { reason: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMode {
    Nominal,
    Stochastic,
}

/// Where the pre-stabilizing gains come from: a finite-horizon LQR about the
/// current iterate (default), or one fixed gain matrix applied at every step
/// (swing rows still zeroed per step).
#[derive(Debug, Clone)]
pub enum FeedbackConfig {
    Lqr { q_scale: f64, r_scale: f64 },
    Fixed(DMatrix<f64>),
}

#[derive(Debug, Clone)]
pub struct ScpSettings {
    /// Initial trust radius on the angular momentum deviation.
    pub omega0: f64,
    /// Initial L1 penalty weight.
    pub gamma0: f64,
    pub gamma_growth: f64,
    pub omega_shrink: f64,
    pub omega_grow: f64,
    /// Accept the candidate when ρ < rho_accept.
    pub rho_accept: f64,
    /// Additionally grow the trust radius when ρ < rho_good.
    pub rho_good: f64,
    pub max_iters: usize,
    /// Convergence threshold on ‖z^{j+1} − z^j‖∞.
    pub tol_z: f64,
    /// Dynamics-defect threshold for declaring convergence.
    pub tol_defect: f64,
    pub mode: SolveMode,
    pub backoff_mode: BackoffMode,
    /// Hard terminal equality (true) or terminal tracking cost only (false).
    pub terminal_equality: bool,
    pub feedback: FeedbackConfig,
    pub qp: QpOptions,
}

impl Default for ScpSettings {
    fn default() -> Self {
        Self {
            omega0: 0.1,
            gamma0: 100.0,
            gamma_growth: 2.0,
            omega_shrink: 0.5,
            omega_grow: 2.0,
            rho_accept: 0.25,
            rho_good: 0.05,
            max_iters: 30,
            tol_z: 1e-7,
            tol_defect: 1e-8,
            mode: SolveMode::Nominal,
            backoff_mode: BackoffMode::ZeroOrder,
            terminal_equality: true,
            feedback: FeedbackConfig::Lqr {
                q_scale: 1.0,
                r_scale: 1e-2,
            },
            qp: QpOptions::default(),
        }
    }
}

impl ScpSettings {
    fn validate(&self) -> Result<(), ScpError> {
        let ok = self.omega0 > 0.0
            && self.gamma0 > 0.0
            && self.gamma_growth > 1.0
            && self.omega_shrink > 0.0
            && self.omega_shrink < 1.0
            && self.omega_grow > 1.0
            && self.tol_z > 0.0
            && self.tol_defect > 0.0
            && self.max_iters >= 1;
        if !ok {
            return Err(ScpError::BadSettings {
                reason: "multipliers and tolerances must be positive and ordered",
            });
        }
        if !(0.0 < self.rho_good && self.rho_good < self.rho_accept && self.rho_accept < 1.0) {
            return Err(ScpError::BadSettings {
                reason: "thresholds must satisfy 0 < rho_good < rho_accept < 1",
            });
        }
        Ok(())
    }
}

/// Tracking and regularization weights (per-axis force weights apply to every
/// foot). Terminal weights act on s_N.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub com: f64,
    pub lin_momentum: f64,
    pub ang_momentum: f64,
    pub force_x: f64,
    pub force_y: f64,
    pub force_z: f64,
    pub terminal_com: f64,
    pub terminal_lin: f64,
    pub terminal_ang: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            com: 1e4,
            lin_momentum: 1e3,
            ang_momentum: 1e5,
            force_x: 1e2,
            force_y: 1e0,
            force_z: 1e1,
            terminal_com: 1e4,
            terminal_lin: 1e3,
            terminal_ang: 1e5,
        }
    }
}

impl CostWeights {
    fn state_diag(&self) -> [f64; STATE_DIM] {
        [
            self.com,
            self.com,
            self.com,
            self.lin_momentum,
            self.lin_momentum,
            self.lin_momentum,
            self.ang_momentum,
            self.ang_momentum,
            self.ang_momentum,
        ]
    }

    fn terminal_diag(&self) -> [f64; STATE_DIM] {
        [
            self.terminal_com,
            self.terminal_com,
            self.terminal_com,
            self.terminal_lin,
            self.terminal_lin,
            self.terminal_lin,
            self.terminal_ang,
            self.terminal_ang,
            self.terminal_ang,
        ]
    }

    fn force_diag(&self) -> [f64; 3] {
        [self.force_x, self.force_y, self.force_z]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationDiagnostics {
    pub iteration: usize,
    /// Quadratic cost plus penalty at the candidate (the QP objective value
    /// up to the reference-dependent constant).
    pub cost: f64,
    pub accuracy_ratio: f64,
    pub omega: f64,
    pub gamma: f64,
    /// ∞-norm of the nonlinear dynamics defect of the candidate.
    pub defect: f64,
    pub accepted: bool,
}

/// Mean trajectory (plus trust slacks) carried between SCP iterations, with
/// the uncertainty data evaluated at it in stochastic mode.
#[derive(Debug, Clone)]
pub struct ScpIterate {
    pub states: Vec<CentroidalState>,
    pub controls: Vec<ControlInput>,
    /// Trust slacks t_k, k = 0..N.
    pub slacks: Vec<f64>,
    pub covariances: Option<CovarianceTrajectory>,
    pub policy: Option<FeedbackPolicy>,
    pub omega: f64,
    pub gamma: f64,
    pub diagnostics: Vec<IterationDiagnostics>,
    pub converged: bool,
}

impl ScpIterate {
    /// Warm-start iterate: the reference trajectory itself.
    pub fn from_reference(refs: &ReferenceTrajectory, settings: &ScpSettings) -> Self {
        Self {
            states: refs.states.clone(),
            controls: refs.forces.clone(),
            slacks: vec![0.0; refs.states.len()],
            covariances: None,
            policy: None,
            omega: settings.omega0,
            gamma: settings.gamma0,
            diagnostics: Vec::new(),
            converged: false,
        }
    }
}

/// Column layout of the QP decision vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QpLayout {
    pub horizon: usize,
    pub ee_count: usize,
}

impl QpLayout {
    pub fn new(horizon: usize, ee_count: usize) -> Self {
        Self { horizon, ee_count }
    }

    pub fn stride(&self) -> usize {
        STATE_DIM + 3 * self.ee_count + 1
    }

    pub fn n_vars(&self) -> usize {
        self.horizon * self.stride() + STATE_DIM + 1
    }

    /// Start of s_k, valid for k = 0..=horizon.
    pub fn state_index(&self, k: usize) -> usize {
        if k < self.horizon {
            k * self.stride()
        } else {
            self.horizon * self.stride()
        }
    }

    /// Start of v_k, valid for k = 0..horizon.
    pub fn control_index(&self, k: usize) -> usize {
        debug_assert!(k < self.horizon);
        k * self.stride() + STATE_DIM
    }

    /// Index of t_k, valid for k = 0..=horizon.
    pub fn slack_index(&self, k: usize) -> usize {
        if k < self.horizon {
            k * self.stride() + STATE_DIM + 3 * self.ee_count
        } else {
            self.horizon * self.stride() + STATE_DIM
        }
    }
}

/// Linearize the dynamics along a trajectory: one `DynamicsDerivatives` per
/// control step.
pub fn linearize(
    states: &[CentroidalState],
    controls: &[ControlInput],
    plan: &ContactPlan,
    params: &RobotParams,
) -> Result<Vec<DynamicsDerivatives>, ScpError> {
    let n = plan.total_steps();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        out.push(dynamics_jacobians(
            &states[k],
            &controls[k],
            plan.contacts_at(k),
            params,
            plan.dt,
        )?);
    }
    Ok(out)
}

/// True tracking + regularization cost of a trajectory (including the
/// reference-dependent constant, unlike the raw QP objective).
pub fn quadratic_cost(
    states: &[CentroidalState],
    controls: &[ControlInput],
    refs: &ReferenceTrajectory,
    weights: &CostWeights,
) -> f64 {
    let n = controls.len();
    let w_state = weights.state_diag();
    let w_force = weights.force_diag();
    let mut cost = 0.0;
    for k in 0..n {
        let ds = states[k].to_vector() - refs.states[k].to_vector();
        for i in 0..STATE_DIM {
            cost += w_state[i] * ds[i] * ds[i];
        }
        for f in &controls[k].forces {
            for ax in 0..3 {
                cost += w_force[ax] * f[ax] * f[ax];
            }
        }
    }
    let ds = states[n].to_vector() - refs.states[n].to_vector();
    let w_term = weights.terminal_diag();
    for i in 0..STATE_DIM {
        cost += w_term[i] * ds[i] * ds[i];
    }
    cost
}

/// Nonlinear dynamics defect of a trajectory: (∞-norm over steps, summed
/// L1 norm).
pub fn dynamics_defect(
    states: &[CentroidalState],
    controls: &[ControlInput],
    plan: &ContactPlan,
    params: &RobotParams,
) -> Result<(f64, f64), ScpError> {
    let n = plan.total_steps();
    let mut worst = 0.0_f64;
    let mut total_l1 = 0.0_f64;
    for k in 0..n {
        let predicted = dynamics_step(
            &states[k],
            &controls[k],
            plan.contacts_at(k),
            params,
            plan.dt,
        )?;
        let defect = states[k + 1].to_vector() - predicted.to_vector();
        worst = worst.max(defect.abs().max());
        total_l1 += defect.abs().sum();
    }
    Ok((worst, total_l1))
}

/// The four friction-pyramid row directions for a contact, as coefficients on
/// that foot's inertial-frame force: ±𝔣x − μ𝔣z ≤ 0 and ±𝔣y − μ𝔣z ≤ 0 with
/// 𝔣 = Rᵀf.
fn pyramid_rows(contact: &crate::model::ContactPoint) -> [Vector3<f64>; 4] {
    let r = &contact.rotation;
    let cx = Vector3::new(r[(0, 0)], r[(1, 0)], r[(2, 0)]);
    let cy = Vector3::new(r[(0, 1)], r[(1, 1)], r[(2, 1)]);
    let cz = Vector3::new(r[(0, 2)], r[(1, 2)], r[(2, 2)]);
    let mu = contact.friction;
    [
        cx - mu * cz,
        -cx - mu * cz,
        cy - mu * cz,
        -cy - mu * cz,
    ]
}

/// State-space row of a control constraint under the feedback policy:
/// (G_i K_k)ᵀ where G_i selects `row3` on foot e.
fn control_row_state(row3: &Vector3<f64>, k_mat: &DMatrix<f64>, e: usize) -> DVector<f64> {
    let mut out = DVector::zeros(STATE_DIM);
    for col in 0..STATE_DIM {
        let mut acc = 0.0;
        for ax in 0..3 {
            acc += row3[ax] * k_mat[(3 * e + ax, col)];
        }
        out[col] = acc;
    }
    out
}

/// Unit state-space row picking ±component `axis` of the CoM.
fn reach_row_state(axis: usize, sign: f64) -> DVector<f64> {
    let mut out = DVector::zeros(STATE_DIM);
    out[axis] = sign;
    out
}

/// Back-offs of the tightened rows at every control step: per foot, η for the
/// four pyramid rows and the six reachability rows (x−, x+, y−, y+, z−, z+).
/// All zeros in nominal mode or when the covariance data is absent.
#[derive(Debug, Clone, PartialEq)]
pub struct StepBackoffs {
    pub control: Vec<[f64; 4]>,
    pub state: Vec<[f64; 6]>,
}

/// η table for reporting and for the saturation checks: one entry per
/// control step of the plan.
pub fn backoff_table(
    iterate: &ScpIterate,
    plan: &ContactPlan,
    model: Option<&UncertaintyModel>,
    settings: &ScpSettings,
) -> Vec<StepBackoffs> {
    let n = plan.total_steps();
    let ee = plan.ee_count;
    let zero = StepBackoffs {
        control: vec![[0.0; 4]; ee],
        state: vec![[0.0; 6]; ee],
    };
    let (cov, policy, model) = match (
        settings.mode,
        &iterate.covariances,
        &iterate.policy,
        model,
    ) {
        (SolveMode::Stochastic, Some(cov), Some(policy), Some(model)) => (cov, policy, model),
        _ => return vec![zero; n],
    };
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let sigma = &cov.sigmas[k];
        let mut step = zero.clone();
        let slots = plan.contacts_at(k);
        let n_active = slots.iter().filter(|s| s.is_some()).count();
        let eps_u = allocate_risk(model.alpha_u, 4);
        let eps_x = allocate_risk(model.alpha_x, 6 * n_active);
        for (e, slot) in slots.iter().enumerate() {
            if let Some(contact) = slot {
                for (i, row3) in pyramid_rows(contact).iter().enumerate() {
                    let row = control_row_state(row3, &policy.gains[k], e);
                    step.control[e][i] = backoff(&row, sigma, eps_u[i]);
                }
                for axis in 0..3 {
                    for (s, sign) in [(0usize, -1.0), (1usize, 1.0)] {
                        let row = reach_row_state(axis, sign);
                        step.state[e][2 * axis + s] = backoff(&row, sigma, eps_x[0]);
                    }
                }
            }
        }
        out.push(step);
    }
    out
}

fn count_rows(plan: &ContactPlan, settings: &ScpSettings) -> (usize, usize) {
    let n = plan.total_steps();
    let mut m_eq = STATE_DIM + STATE_DIM * n;
    let mut m_ineq = 7 * (n + 1); // trust rows and slack nonnegativity
    for slots in plan.expand() {
        for slot in slots {
            match slot {
                Some(_) => m_ineq += 4 + 1 + 6,
                None => m_eq += 3,
            }
        }
    }
    if settings.terminal_equality {
        m_eq += STATE_DIM;
    }
    (m_eq, m_ineq)
}

/// Assemble the convexified QP at the current iterate.
///
/// In stochastic mode the iterate must carry covariances (and, in first-order
/// mode, their derivative tensors) and the feedback policy evaluated at the
/// same iterate; `scp_solve` maintains that invariant.
pub fn build_qp(
    iterate: &ScpIterate,
    plan: &ContactPlan,
    refs: &ReferenceTrajectory,
    params: &RobotParams,
    model: Option<&UncertaintyModel>,
    weights: &CostWeights,
    settings: &ScpSettings,
) -> Result<QpProblem, ScpError> {
    let n = plan.total_steps();
    let ee = plan.ee_count;
    let layout = QpLayout::new(n, ee);
    let nv = layout.n_vars();

    if refs.states.len() != n + 1 {
        return Err(ScpError::ReferenceMismatch {
            what: "states",
            expected: n + 1,
            got: refs.states.len(),
        });
    }
    if refs.forces.len() != n {
        return Err(ScpError::ReferenceMismatch {
            what: "forces",
            expected: n,
            got: refs.forces.len(),
        });
    }
    let stochastic = settings.mode == SolveMode::Stochastic;
    if stochastic && model.is_none() {
        return Err(ScpError::MissingUncertainty);
    }
    let cov = if stochastic {
        iterate.covariances.as_ref()
    } else {
        None
    };
    let policy = if stochastic { iterate.policy.as_ref() } else { None };

    // Cost: ½xᵀHx + qᵀx with H = 2·diag(w), q = −2·w·ref (forces regularize
    // toward zero; slacks enter linearly with weight γ).
    let mut hessian = DMatrix::zeros(nv, nv);
    let mut linear = DVector::zeros(nv);
    let w_state = weights.state_diag();
    let w_force = weights.force_diag();
    for k in 0..n {
        let s0 = layout.state_index(k);
        let ref_k = refs.states[k].to_vector();
        for i in 0..STATE_DIM {
            hessian[(s0 + i, s0 + i)] = 2.0 * w_state[i];
            linear[s0 + i] = -2.0 * w_state[i] * ref_k[i];
        }
        let v0 = layout.control_index(k);
        for e in 0..ee {
            for ax in 0..3 {
                hessian[(v0 + 3 * e + ax, v0 + 3 * e + ax)] = 2.0 * w_force[ax];
            }
        }
        linear[layout.slack_index(k)] = iterate.gamma;
    }
    let s_n = layout.state_index(n);
    let ref_n = refs.states[n].to_vector();
    let w_term = weights.terminal_diag();
    for i in 0..STATE_DIM {
        hessian[(s_n + i, s_n + i)] = 2.0 * w_term[i];
        linear[s_n + i] = -2.0 * w_term[i] * ref_n[i];
    }
    linear[layout.slack_index(n)] = iterate.gamma;

    // Equalities: initial state, linearized dynamics with defect correction,
    // swing forces, optional hard terminal state.
    let (m_eq, m_ineq) = count_rows(plan, settings);
    let mut eq_mat = DMatrix::zeros(m_eq, nv);
    let mut eq_rhs = DVector::zeros(m_eq);
    let mut row = 0usize;
    let x0 = refs.states[0].to_vector();
    for i in 0..STATE_DIM {
        eq_mat[(row, layout.state_index(0) + i)] = 1.0;
        eq_rhs[row] = x0[i];
        row += 1;
    }
    for k in 0..n {
        let d = dynamics_jacobians(
            &iterate.states[k],
            &iterate.controls[k],
            plan.contacts_at(k),
            params,
            plan.dt,
        )?;
        let f_j = dynamics_step(
            &iterate.states[k],
            &iterate.controls[k],
            plan.contacts_at(k),
            params,
            plan.dt,
        )?
        .to_vector();
        let s_j = iterate.states[k].to_vector();
        let v_j = iterate.controls[k].to_vector();
        let rhs = f_j - &d.a_mat * s_j - &d.b_mat * v_j;
        let sk = layout.state_index(k);
        let sk1 = layout.state_index(k + 1);
        let vk = layout.control_index(k);
        for i in 0..STATE_DIM {
            eq_mat[(row + i, sk1 + i)] = 1.0;
            for jc in 0..STATE_DIM {
                eq_mat[(row + i, sk + jc)] = -d.a_mat[(i, jc)];
            }
            for jc in 0..3 * ee {
                let coeff = d.b_mat[(i, jc)];
                if coeff != 0.0 {
                    eq_mat[(row + i, vk + jc)] = -coeff;
                }
            }
            eq_rhs[row + i] = rhs[i];
        }
        row += STATE_DIM;
    }
    for (k, slots) in plan.expand().iter().enumerate() {
        let vk = layout.control_index(k);
        for (e, slot) in slots.iter().enumerate() {
            if slot.is_none() {
                for ax in 0..3 {
                    eq_mat[(row, vk + 3 * e + ax)] = 1.0;
                    row += 1;
                }
            }
        }
    }
    if settings.terminal_equality {
        let xf = refs.states[n].to_vector();
        for i in 0..STATE_DIM {
            eq_mat[(row, layout.state_index(n) + i)] = 1.0;
            eq_rhs[row] = xf[i];
            row += 1;
        }
    }
    debug_assert_eq!(row, m_eq);

    // Inequalities.
    let mut ineq_mat = DMatrix::zeros(m_ineq, nv);
    let mut ineq_rhs = DVector::zeros(m_ineq);
    let mut row = 0usize;
    for (k, slots) in plan.expand().iter().enumerate() {
        let sk = layout.state_index(k);
        let vk = layout.control_index(k);
        let n_active = slots.iter().filter(|s| s.is_some()).count();
        let sigma = cov.map(|c| &c.sigmas[k]);
        let tensor = cov.and_then(|c| c.derivs.as_ref()).map(|d| &d[k]);
        let z_j = {
            let mut z = DVector::zeros(STATE_DIM + 3 * ee);
            z.rows_mut(0, STATE_DIM)
                .copy_from(&iterate.states[k].to_vector());
            z.rows_mut(STATE_DIM, 3 * ee)
                .copy_from(&iterate.controls[k].to_vector());
            z
        };
        // Adds one tightened row: base coefficients on the state/control
        // blocks, plus the linearized back-off when a tensor is present.
        let push_row = |state_coeffs: &DVector<f64>,
                            control_coeffs: Option<(usize, &Vector3<f64>)>,
                            row_state: &DVector<f64>,
                            bound: f64,
                            eps: f64,
                            mat: &mut DMatrix<f64>,
                            rhs_vec: &mut DVector<f64>,
                            row: &mut usize| {
            for i in 0..STATE_DIM {
                if state_coeffs[i] != 0.0 {
                    mat[(*row, sk + i)] = state_coeffs[i];
                }
            }
            if let Some((e, row3)) = control_coeffs {
                for ax in 0..3 {
                    mat[(*row, vk + 3 * e + ax)] = row3[ax];
                }
            }
            let mut rhs = bound;
            if let Some(sigma) = sigma {
                let eta = backoff(row_state, sigma, eps);
                rhs -= eta;
                if let Some(tensor) = tensor {
                    let grad = backoff_gradient(row_state, sigma, tensor, eps);
                    for r in 0..grad.len() {
                        if grad[r] != 0.0 {
                            let col = if r < STATE_DIM { sk + r } else { vk + (r - STATE_DIM) };
                            mat[(*row, col)] += grad[r];
                        }
                    }
                    rhs += grad.dot(&z_j);
                }
            }
            rhs_vec[*row] = rhs;
            *row += 1;
        };

        for (e, slot) in slots.iter().enumerate() {
            if let Some(contact) = slot {
                let eps_u = allocate_risk(model.map(|m| m.alpha_u).unwrap_or(0.9), 4);
                let rows3 = pyramid_rows(contact);
                let mut etas = [0.0_f64; 4];
                for (i, row3) in rows3.iter().enumerate() {
                    let row_state = match policy {
                        Some(p) => control_row_state(row3, &p.gains[k], e),
                        None => DVector::zeros(STATE_DIM),
                    };
                    if let Some(sigma) = sigma {
                        etas[i] = backoff(&row_state, sigma, eps_u[i]);
                    }
                    push_row(
                        &DVector::zeros(STATE_DIM),
                        Some((e, row3)),
                        &row_state,
                        0.0,
                        eps_u[i],
                        &mut ineq_mat,
                        &mut ineq_rhs,
                        &mut row,
                    );
                }
                if contact.friction <= 1e-12 && etas.iter().any(|&v| v > 1e-12) {
                    return Err(ScpError::InfeasibleBackoff {
                        step: k,
                        constraint: format!(
                            "friction pyramid of foot {e} has zero friction but nonzero back-off"
                        ),
                    });
                }
                // Unilateral row −𝔣z ≤ 0, never tightened.
                let r = &contact.rotation;
                let cz = Vector3::new(r[(0, 2)], r[(1, 2)], r[(2, 2)]);
                for ax in 0..3 {
                    ineq_mat[(row, vk + 3 * e + ax)] = -cz[ax];
                }
                ineq_rhs[row] = 0.0;
                row += 1;

                // Reachability box |p − c| ≤ L, componentwise.
                let eps_x =
                    allocate_risk(model.map(|m| m.alpha_x).unwrap_or(0.9), 6 * n_active);
                for axis in 0..3 {
                    let p_ax = contact.position[axis];
                    let l_ax = params.reach_limit[axis];
                    let mut etas = [0.0_f64; 2];
                    for (s, sign) in [(0usize, -1.0_f64), (1usize, 1.0_f64)] {
                        let row_state = reach_row_state(axis, sign);
                        if let Some(sigma) = sigma {
                            etas[s] = backoff(&row_state, sigma, eps_x[0]);
                        }
                        let bound = l_ax - sign * p_ax;
                        push_row(
                            &row_state.clone(),
                            None,
                            &row_state,
                            bound,
                            eps_x[0],
                            &mut ineq_mat,
                            &mut ineq_rhs,
                            &mut row,
                        );
                    }
                    if etas[0] + etas[1] > 2.0 * l_ax {
                        return Err(ScpError::InfeasibleBackoff {
                            step: k,
                            constraint: format!(
                                "reachability of foot {e} axis {axis}: back-offs {:.3e}+{:.3e} exceed the box width {:.3e}",
                                etas[0], etas[1], 2.0 * l_ax
                            ),
                        });
                    }
                }
            }
        }
    }
    // Trust rows on the angular momentum, k = 0..N.
    for k in 0..=n {
        let sk = layout.state_index(k);
        let tk = layout.slack_index(k);
        let kappa_j = iterate.states[k].ang_momentum;
        for ax in 0..3 {
            for sign in [1.0, -1.0] {
                ineq_mat[(row, sk + 6 + ax)] = sign;
                ineq_mat[(row, tk)] = -1.0;
                ineq_rhs[row] = iterate.omega + sign * kappa_j[ax];
                row += 1;
            }
        }
        ineq_mat[(row, tk)] = -1.0;
        ineq_rhs[row] = 0.0;
        row += 1;
    }
    debug_assert_eq!(row, m_ineq);

    Ok(QpProblem {
        hessian,
        linear,
        eq_mat,
        eq_rhs,
        ineq_mat,
        ineq_rhs,
    })
}

/// Decode a QP solution vector into (states, controls, slacks). Swing forces
/// are pinned by equality rows; they are set to exact zeros here so the
/// trajectory can be replayed through the exact dynamics.
pub fn decode_solution(
    x: &DVector<f64>,
    plan: &ContactPlan,
) -> (Vec<CentroidalState>, Vec<ControlInput>, Vec<f64>) {
    let n = plan.total_steps();
    let ee = plan.ee_count;
    let layout = QpLayout::new(n, ee);
    let mut states = Vec::with_capacity(n + 1);
    let mut controls = Vec::with_capacity(n);
    let mut slacks = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let s0 = layout.state_index(k);
        states.push(CentroidalState::from_slice(&x.as_slice()[s0..s0 + STATE_DIM]));
        slacks.push(x[layout.slack_index(k)]);
        if k < n {
            let v0 = layout.control_index(k);
            let mut control = ControlInput::from_slice(&x.as_slice()[v0..v0 + 3 * ee]);
            for (e, slot) in plan.contacts_at(k).iter().enumerate() {
                if slot.is_none() {
                    control.forces[e] = Vector3::zeros();
                }
            }
            controls.push(control);
        }
    }
    (states, controls, slacks)
}

/// Accuracy ratio ρ of the linearized model at a candidate produced from
/// `prev`: |J_nonlin − J_lin| / max(|J_lin|, 1e-12), where J_lin is the
/// candidate's quadratic cost plus penalty and J_nonlin additionally charges
/// the true dynamics defect at the penalty weight.
pub fn accuracy_ratio(
    prev: &ScpIterate,
    candidate: &ScpIterate,
    plan: &ContactPlan,
    refs: &ReferenceTrajectory,
    params: &RobotParams,
    weights: &CostWeights,
) -> Result<f64, ScpError> {
    let j_quad = quadratic_cost(&candidate.states, &candidate.controls, refs, weights);
    let t_sum: f64 = candidate.slacks.iter().sum();
    let j_lin = j_quad + prev.gamma * t_sum;
    let (_, defect_l1) =
        dynamics_defect(&candidate.states, &candidate.controls, plan, params)?;
    let j_nonlin = j_lin + prev.gamma * defect_l1;
    Ok((j_nonlin - j_lin).abs() / j_lin.abs().max(1e-12))
}

fn refresh_uncertainty(
    iterate: &mut ScpIterate,
    plan: &ContactPlan,
    params: &RobotParams,
    model: &UncertaintyModel,
    settings: &ScpSettings,
) -> Result<(), ScpError> {
    let derivs = linearize(&iterate.states, &iterate.controls, plan, params)?;
    let active = plan.active_mask();
    let policy = match &settings.feedback {
        FeedbackConfig::Lqr { q_scale, r_scale } => {
            let q = DMatrix::identity(STATE_DIM, STATE_DIM) * *q_scale;
            let r = DMatrix::identity(3 * plan.ee_count, 3 * plan.ee_count) * *r_scale;
            let a_seq: Vec<_> = derivs.iter().map(|d| d.a_mat.clone()).collect();
            let b_seq: Vec<_> = derivs.iter().map(|d| d.b_mat.clone()).collect();
            lqr_gains(&a_seq, &b_seq, &active, &q, &r)?
        }
        FeedbackConfig::Fixed(k_mat) => {
            let mut gains = Vec::with_capacity(derivs.len());
            for mask in &active {
                let mut k = k_mat.clone();
                for (e, &act) in mask.iter().enumerate() {
                    if !act {
                        k.view_mut((3 * e, 0), (3, STATE_DIM)).fill(0.0);
                    }
                }
                gains.push(k);
            }
            FeedbackPolicy { gains }
        }
    };
    let cov = propagate_covariance(&derivs, &policy, model, settings.backoff_mode)?;
    iterate.covariances = Some(cov);
    iterate.policy = Some(policy);
    Ok(())
}

/// Run the SCP loop from the gait warm start to convergence.
///
/// Convergence means the last accepted step moved by at most `tol_z` in the
/// ∞-norm and the candidate's nonlinear defect is below `tol_defect`; the
/// iterate is returned either way, flagged through `converged`.
pub fn scp_solve(
    plan: &ContactPlan,
    refs: &ReferenceTrajectory,
    params: &RobotParams,
    model: Option<&UncertaintyModel>,
    weights: &CostWeights,
    settings: &ScpSettings,
) -> Result<ScpIterate, ScpError> {
    settings.validate()?;
    let stochastic = settings.mode == SolveMode::Stochastic;
    if stochastic && model.is_none() {
        return Err(ScpError::MissingUncertainty);
    }
    let mut iterate = ScpIterate::from_reference(refs, settings);

    for j in 0..settings.max_iters {
        if stochastic {
            refresh_uncertainty(&mut iterate, plan, params, model.unwrap(), settings)?;
        }
        let qp = build_qp(&iterate, plan, refs, params, model, weights, settings)?;
        let sol = qp_solve(&qp, &settings.qp)?;
        if sol.status != QpStatus::Optimal {
            return Err(ScpError::QpFailure {
                iteration: j,
                status: sol.status,
            });
        }
        let (states, controls, slacks) = decode_solution(&sol.x, plan);
        let candidate = ScpIterate {
            states,
            controls,
            slacks,
            covariances: None,
            policy: None,
            omega: iterate.omega,
            gamma: iterate.gamma,
            diagnostics: Vec::new(),
            converged: false,
        };
        let rho = accuracy_ratio(&iterate, &candidate, plan, refs, params, weights)?;
        let (defect_inf, _) =
            dynamics_defect(&candidate.states, &candidate.controls, plan, params)?;
        let t_sum: f64 = candidate.slacks.iter().sum();
        let cost = quadratic_cost(&candidate.states, &candidate.controls, refs, weights)
            + iterate.gamma * t_sum;
        let accepted = rho < settings.rho_accept;
        iterate.diagnostics.push(IterationDiagnostics {
            iteration: j,
            cost,
            accuracy_ratio: rho,
            omega: iterate.omega,
            gamma: iterate.gamma,
            defect: defect_inf,
            accepted,
        });
        if accepted {
            let mut dz = 0.0_f64;
            for k in 0..iterate.states.len() {
                dz = dz.max(
                    (candidate.states[k].to_vector() - iterate.states[k].to_vector())
                        .abs()
                        .max(),
                );
            }
            for k in 0..iterate.controls.len() {
                dz = dz.max(
                    (candidate.controls[k].to_vector() - iterate.controls[k].to_vector())
                        .abs()
                        .max(),
                );
            }
            iterate.states = candidate.states;
            iterate.controls = candidate.controls;
            iterate.slacks = candidate.slacks;
            if rho < settings.rho_good {
                iterate.omega *= settings.omega_grow;
            }
            if dz <= settings.tol_z && defect_inf <= settings.tol_defect {
                iterate.converged = true;
                break;
            }
        } else {
            iterate.omega *= settings.omega_shrink;
            iterate.gamma *= settings.gamma_growth;
        }
    }

    // Leave the uncertainty data evaluated at the returned trajectory so
    // reports and rollouts see back-offs consistent with the final iterate.
    if stochastic {
        refresh_uncertainty(&mut iterate, plan, params, model.unwrap(), settings)?;
    }
    Ok(iterate)
}
