//! Centroidal state/control types and the discrete Newton-Euler dynamics.
//!
//! The state is the 9-vector `x = (c, l, κ)` — CoM position, linear momentum,
//! angular momentum about the CoM. Controls are the stacked inertial-frame
//! contact forces, one 3-vector slot per end-effector in canonical order
//! (FL, FR, HL, HR for a quadruped). Integration is a single explicit Euler
//! step, which keeps the Jacobians exact:
//!
//! ```text
//! c' = c + (l/m)·dt
//! l' = l + (m·g + Σ f_e)·dt
//! κ' = κ + Σ (p_e − c) × f_e · dt
//! ```
//!
//! Only the κ row is nonlinear (bilinear in `c`/`p` and `f`), so the
//! second-order derivative tensors are constant and sparse.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use thiserror::Error;

/// Dimension of the centroidal state (c, l, κ).
pub const STATE_DIM: usize = 9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("non-finite value in {field}")]
    NonFinite { field: &'static str },
    #[error("time step must be positive, got {dt}")]
    NonPositiveDt { dt: f64 },
    #[error("expected {expected} end-effector slots, got {got} in {field}")]
    SlotMismatch {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("end-effector {ee} is inactive but carries a nonzero force")]
    InactiveForce { ee: usize },
    #[error("rotation matrix is not orthonormal with determinant +1 (defect {defect:.2e})")]
    NotARotation { defect: f64 },
    #[error("friction coefficient must be nonnegative, got {friction}")]
    NegativeFriction { friction: f64 },
    #[error("mass must be positive, got {mass}")]
    NonPositiveMass { mass: f64 },
    #[error("reach limit must be positive componentwise, got {limit:?}")]
    NonPositiveReach { limit: [f64; 3] },
}

/// CoM position [m], linear momentum [kg·m/s], angular momentum [kg·m²/s].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CentroidalState {
    pub com: Vector3<f64>,
    pub lin_momentum: Vector3<f64>,
    pub ang_momentum: Vector3<f64>,
}

impl CentroidalState {
    pub fn new(com: Vector3<f64>, lin_momentum: Vector3<f64>, ang_momentum: Vector3<f64>) -> Self {
        Self {
            com,
            lin_momentum,
            ang_momentum,
        }
    }

    pub fn zero() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros(), Vector3::zeros())
    }

    /// The ordered 9-tuple (c, l, κ) as a vector.
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(STATE_DIM);
        v.fixed_rows_mut::<3>(0).copy_from(&self.com);
        v.fixed_rows_mut::<3>(3).copy_from(&self.lin_momentum);
        v.fixed_rows_mut::<3>(6).copy_from(&self.ang_momentum);
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        assert_eq!(v.len(), STATE_DIM, "state vector must have length 9");
        Self::new(
            Vector3::new(v[0], v[1], v[2]),
            Vector3::new(v[3], v[4], v[5]),
            Vector3::new(v[6], v[7], v[8]),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.com.iter().all(|x| x.is_finite())
            && self.lin_momentum.iter().all(|x| x.is_finite())
            && self.ang_momentum.iter().all(|x| x.is_finite())
    }
}

/// Stacked inertial-frame contact forces [N], one slot per end-effector.
/// Slots of inactive (swing) feet must be exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlInput {
    pub forces: Vec<Vector3<f64>>,
}

impl ControlInput {
    pub fn zero(ee_count: usize) -> Self {
        Self {
            forces: vec![Vector3::zeros(); ee_count],
        }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(3 * self.forces.len());
        for (e, f) in self.forces.iter().enumerate() {
            v.fixed_rows_mut::<3>(3 * e).copy_from(f);
        }
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        assert_eq!(v.len() % 3, 0, "control vector length must be 3·ee_count");
        Self {
            forces: v
                .chunks_exact(3)
                .map(|c| Vector3::new(c[0], c[1], c[2]))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.forces.iter().all(|f| f.iter().all(|x| x.is_finite()))
    }
}

/// A contact location: mean position, end-effector-to-inertial rotation and
/// the static friction coefficient of the surface.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactPoint {
    pub position: Vector3<f64>,
    pub rotation: Matrix3<f64>,
    pub friction: f64,
}

impl ContactPoint {
    /// Checks orthonormality and det +1 to 1e-9, friction ≥ 0.
    pub fn new(
        position: Vector3<f64>,
        rotation: Matrix3<f64>,
        friction: f64,
    ) -> Result<Self, ModelError> {
        if !position.iter().all(|x| x.is_finite()) {
            return Err(ModelError::NonFinite {
                field: "contact position",
            });
        }
        let defect = ((rotation.transpose() * rotation) - Matrix3::identity()).abs().max();
        let det_defect = (rotation.determinant() - 1.0).abs();
        let worst = defect.max(det_defect);
        if !worst.is_finite() || worst > 1e-9 {
            return Err(ModelError::NotARotation { defect: worst });
        }
        if !(friction >= 0.0) {
            return Err(ModelError::NegativeFriction { friction });
        }
        Ok(Self {
            position,
            rotation,
            friction,
        })
    }

    /// Flat-ground contact: identity rotation.
    pub fn on_ground(position: Vector3<f64>, friction: f64) -> Result<Self, ModelError> {
        Self::new(position, Matrix3::identity(), friction)
    }
}

/// Robot constants shared by every module.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotParams {
    pub mass: f64,
    pub gravity: Vector3<f64>,
    /// Per-axis box half-widths of the reachability constraint |p − c| ≤ L.
    pub reach_limit: Vector3<f64>,
    pub ee_count: usize,
}

impl RobotParams {
    pub fn new(mass: f64, reach_limit: Vector3<f64>, ee_count: usize) -> Result<Self, ModelError> {
        Self::with_gravity(mass, Vector3::new(0.0, 0.0, -9.81), reach_limit, ee_count)
    }

    pub fn with_gravity(
        mass: f64,
        gravity: Vector3<f64>,
        reach_limit: Vector3<f64>,
        ee_count: usize,
    ) -> Result<Self, ModelError> {
        if !(mass > 0.0) {
            return Err(ModelError::NonPositiveMass { mass });
        }
        if !reach_limit.iter().all(|&x| x > 0.0) {
            return Err(ModelError::NonPositiveReach {
                limit: [reach_limit.x, reach_limit.y, reach_limit.z],
            });
        }
        assert!(ee_count > 0, "ee_count must be positive");
        Ok(Self {
            mass,
            gravity,
            reach_limit,
            ee_count,
        })
    }

    pub fn control_dim(&self) -> usize {
        3 * self.ee_count
    }
}

/// Cross-product matrix: `skew(v) * w == v × w`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Contact force expressed in the end-effector frame: `Rᵀ f`.
///
/// `rotation` must be orthonormal (a validated [`ContactPoint::rotation`]).
pub fn local_force(force: &Vector3<f64>, rotation: &Matrix3<f64>) -> Vector3<f64> {
    rotation.transpose() * force
}

fn validate_inputs(
    state: &CentroidalState,
    control: &ControlInput,
    contacts: &[Option<ContactPoint>],
    params: &RobotParams,
    dt: f64,
) -> Result<(), ModelError> {
    if !(dt > 0.0) {
        return Err(ModelError::NonPositiveDt { dt });
    }
    if !state.com.iter().all(|x| x.is_finite()) {
        return Err(ModelError::NonFinite { field: "com" });
    }
    if !state.lin_momentum.iter().all(|x| x.is_finite()) {
        return Err(ModelError::NonFinite {
            field: "lin_momentum",
        });
    }
    if !state.ang_momentum.iter().all(|x| x.is_finite()) {
        return Err(ModelError::NonFinite {
            field: "ang_momentum",
        });
    }
    if !control.is_finite() {
        return Err(ModelError::NonFinite { field: "forces" });
    }
    if control.forces.len() != params.ee_count {
        return Err(ModelError::SlotMismatch {
            field: "forces",
            expected: params.ee_count,
            got: control.forces.len(),
        });
    }
    if contacts.len() != params.ee_count {
        return Err(ModelError::SlotMismatch {
            field: "contacts",
            expected: params.ee_count,
            got: contacts.len(),
        });
    }
    for (e, slot) in contacts.iter().enumerate() {
        match slot {
            Some(c) if !c.position.iter().all(|x| x.is_finite()) => {
                return Err(ModelError::NonFinite {
                    field: "contact position",
                })
            }
            None if control.forces[e] != Vector3::zeros() => {
                return Err(ModelError::InactiveForce { ee: e })
            }
            _ => {}
        }
    }
    Ok(())
}

/// One explicit Euler step of the centroidal Newton-Euler dynamics.
pub fn dynamics_step(
    state: &CentroidalState,
    control: &ControlInput,
    contacts: &[Option<ContactPoint>],
    params: &RobotParams,
    dt: f64,
) -> Result<CentroidalState, ModelError> {
    validate_inputs(state, control, contacts, params, dt)?;
    let mut force_sum = params.mass * params.gravity;
    let mut torque_sum = Vector3::zeros();
    for (e, slot) in contacts.iter().enumerate() {
        if let Some(c) = slot {
            force_sum += control.forces[e];
            torque_sum += (c.position - state.com).cross(&control.forces[e]);
        }
    }
    Ok(CentroidalState {
        com: state.com + state.lin_momentum * (dt / params.mass),
        lin_momentum: state.lin_momentum + force_sum * dt,
        ang_momentum: state.ang_momentum + torque_sum * dt,
    })
}

/// First derivatives of [`dynamics_step`] plus the constant second-order
/// tensors of the bilinear κ row.
///
/// `a_mat` is ∂x'/∂x (9×9), `b_mat` is ∂x'/∂u (9×3·ee), `c_mat` is ∂x'/∂p
/// (9×3·ee, stacked contact positions). Columns of inactive contacts are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsDerivatives {
    pub a_mat: DMatrix<f64>,
    pub b_mat: DMatrix<f64>,
    pub c_mat: DMatrix<f64>,
    pub second_order: SecondOrderTensors,
}

/// The third-order tensors ∂A/∂z, ∂B/∂z, ∂C/∂z with z = (s, v).
///
/// They come entirely from the cross product in the κ row, so they are
/// constant in (s, v): only `dt` and the active-contact mask enter. The
/// accessors materialize one directional slice as a dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrderTensors {
    dt: f64,
    active: Vec<bool>,
}

impl SecondOrderTensors {
    pub fn z_dim(&self) -> usize {
        STATE_DIM + 3 * self.active.len()
    }

    pub fn ee_count(&self) -> usize {
        self.active.len()
    }

    fn unit(axis: usize) -> Vector3<f64> {
        let mut v = Vector3::zeros();
        v[axis] = 1.0;
        v
    }

    /// ∂A/∂z_r as a 9×9 matrix. Nonzero only for force components of active
    /// contacts: the κ×c block is dt·skew(e_axis).
    pub fn d_a(&self, r: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(STATE_DIM, STATE_DIM);
        if r >= STATE_DIM {
            let e = (r - STATE_DIM) / 3;
            let axis = (r - STATE_DIM) % 3;
            if self.active[e] {
                let block = skew(&Self::unit(axis)) * self.dt;
                m.view_mut((6, 0), (3, 3)).copy_from(&block);
            }
        }
        m
    }

    /// ∂B/∂z_r as a 9×3·ee matrix. Nonzero only for CoM components: the κ
    /// block of every active contact is −dt·skew(e_axis).
    pub fn d_b(&self, r: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(STATE_DIM, 3 * self.active.len());
        if r < 3 {
            let block = -skew(&Self::unit(r)) * self.dt;
            for (e, &act) in self.active.iter().enumerate() {
                if act {
                    m.view_mut((6, 3 * e), (3, 3)).copy_from(&block);
                }
            }
        }
        m
    }

    /// ∂C/∂z_r as a 9×3·ee matrix. Nonzero only for force components of
    /// active contacts: the matching κ block is −dt·skew(e_axis).
    pub fn d_c(&self, r: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(STATE_DIM, 3 * self.active.len());
        if r >= STATE_DIM {
            let e = (r - STATE_DIM) / 3;
            let axis = (r - STATE_DIM) % 3;
            if self.active[e] {
                let block = -skew(&Self::unit(axis)) * self.dt;
                m.view_mut((6, 3 * e), (3, 3)).copy_from(&block);
            }
        }
        m
    }
}

/// Analytic Jacobians of [`dynamics_step`] at `(state, control)`.
pub fn dynamics_jacobians(
    state: &CentroidalState,
    control: &ControlInput,
    contacts: &[Option<ContactPoint>],
    params: &RobotParams,
    dt: f64,
) -> Result<DynamicsDerivatives, ModelError> {
    validate_inputs(state, control, contacts, params, dt)?;
    let nu = 3 * params.ee_count;

    let mut a_mat = DMatrix::identity(STATE_DIM, STATE_DIM);
    // ∂c'/∂l
    for i in 0..3 {
        a_mat[(i, 3 + i)] = dt / params.mass;
    }
    // ∂κ'/∂c = dt·[Σ f_e]× for active contacts
    let mut total_force = Vector3::zeros();
    for (e, slot) in contacts.iter().enumerate() {
        if slot.is_some() {
            total_force += control.forces[e];
        }
    }
    a_mat
        .view_mut((6, 0), (3, 3))
        .copy_from(&(skew(&total_force) * dt));

    let mut b_mat = DMatrix::zeros(STATE_DIM, nu);
    let mut c_mat = DMatrix::zeros(STATE_DIM, nu);
    for (e, slot) in contacts.iter().enumerate() {
        if let Some(c) = slot {
            // ∂l'/∂f_e = dt·I
            for i in 0..3 {
                b_mat[(3 + i, 3 * e + i)] = dt;
            }
            // ∂κ'/∂f_e = dt·[p_e − c]×
            b_mat
                .view_mut((6, 3 * e), (3, 3))
                .copy_from(&(skew(&(c.position - state.com)) * dt));
            // ∂κ'/∂p_e = −dt·[f_e]×
            c_mat
                .view_mut((6, 3 * e), (3, 3))
                .copy_from(&(-skew(&control.forces[e]) * dt));
        }
    }

    Ok(DynamicsDerivatives {
        a_mat,
        b_mat,
        c_mat,
        second_order: SecondOrderTensors {
            dt,
            active: contacts.iter().map(|s| s.is_some()).collect(),
        },
    })
}
