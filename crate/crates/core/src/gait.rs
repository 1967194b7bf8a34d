//! Quadruped contact plans (trot, bound), reference trajectories, and the
//! static-equilibrium warm start.
//!
//! Feet are indexed in canonical order FL, FR, HL, HR. Plans live on flat
//! ground at z = 0 with one friction coefficient. Every phase keeps at least
//! one stance pair, so the friction constraints never become vacuous. The
//! warm start splits the weight equally among the stance feet with zero
//! tangential force, which satisfies the dynamics, the friction pyramid
//! (strictly, for μ > 0) and static equilibrium whenever the CoM reference is
//! constant.

use nalgebra::Vector3;
use thiserror::Error;

use crate::model::{CentroidalState, ContactPoint, ControlInput, ModelError, RobotParams};

pub const FRONT_LEFT: usize = 0;
pub const FRONT_RIGHT: usize = 1;
pub const HIND_LEFT: usize = 2;
pub const HIND_RIGHT: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaitError {
    #[error("degenerate stance geometry: half_length and half_width must be positive")]
    DegenerateGeometry,
    #[error("phase_steps must be at least 1")]
    EmptyPhase,
    #[error("n_cycles must be at least 1")]
    NoCycles,
    #[error("time step must be positive, got {dt}")]
    NonPositiveDt { dt: f64 },
    #[error("plan must span at least 2 steps, got {steps}")]
    TooShort { steps: usize },
    #[error("every phase needs at least one active contact")]
    FlightPhase,
    #[error("plan is built for {plan} end-effectors but the robot has {robot}")]
    EeMismatch { plan: usize, robot: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Rectangular standing footprint: feet at (±half_length, ±half_width, 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StanceGeometry {
    pub half_length: f64,
    pub half_width: f64,
}

impl StanceGeometry {
    pub fn foot_position(&self, foot: usize) -> Vector3<f64> {
        let x = if foot < 2 { self.half_length } else { -self.half_length };
        let y = if foot % 2 == 0 { self.half_width } else { -self.half_width };
        Vector3::new(x, y, 0.0)
    }
}

/// A constant-contact interval: `contacts[e]` is `Some` while foot `e` is in
/// stance. At least one foot is active.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactPhase {
    pub steps: usize,
    pub contacts: Vec<Option<ContactPoint>>,
}

impl ContactPhase {
    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.contacts
            .iter()
            .enumerate()
            .filter_map(|(e, c)| c.as_ref().map(|_| e))
    }

    pub fn active_count(&self) -> usize {
        self.contacts.iter().filter(|c| c.is_some()).count()
    }
}

/// Time-indexed contact schedule with per-step expansion helpers.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactPlan {
    pub phases: Vec<ContactPhase>,
    pub dt: f64,
    pub ee_count: usize,
    /// Where each foot ends up once the last swing lands (used by terminal
    /// references and by the displacement bookkeeping of the gait builders).
    pub final_positions: Vec<Vector3<f64>>,
}

impl ContactPlan {
    pub fn new(
        phases: Vec<ContactPhase>,
        dt: f64,
        ee_count: usize,
        final_positions: Vec<Vector3<f64>>,
    ) -> Result<Self, GaitError> {
        if !(dt > 0.0) {
            return Err(GaitError::NonPositiveDt { dt });
        }
        for phase in &phases {
            if phase.steps == 0 {
                return Err(GaitError::EmptyPhase);
            }
            if phase.contacts.len() != ee_count {
                return Err(GaitError::EeMismatch {
                    plan: phase.contacts.len(),
                    robot: ee_count,
                });
            }
            if phase.active_count() == 0 {
                return Err(GaitError::FlightPhase);
            }
        }
        let total: usize = phases.iter().map(|p| p.steps).sum();
        if total < 2 {
            return Err(GaitError::TooShort { steps: total });
        }
        Ok(Self {
            phases,
            dt,
            ee_count,
            final_positions,
        })
    }

    /// Horizon length N = Σ phase steps.
    pub fn total_steps(&self) -> usize {
        self.phases.iter().map(|p| p.steps).sum()
    }

    /// Phase index of control step k.
    pub fn phase_index(&self, k: usize) -> usize {
        let mut acc = 0;
        for (i, p) in self.phases.iter().enumerate() {
            acc += p.steps;
            if k < acc {
                return i;
            }
        }
        self.phases.len() - 1
    }

    /// Contact slots at control step k.
    pub fn contacts_at(&self, k: usize) -> &[Option<ContactPoint>] {
        &self.phases[self.phase_index(k)].contacts
    }

    /// Per-step expansion: one slot vector per control step, length N.
    pub fn expand(&self) -> Vec<&[Option<ContactPoint>]> {
        let mut out = Vec::with_capacity(self.total_steps());
        for p in &self.phases {
            for _ in 0..p.steps {
                out.push(p.contacts.as_slice());
            }
        }
        out
    }

    pub fn active_mask(&self) -> Vec<Vec<bool>> {
        self.expand()
            .iter()
            .map(|slots| slots.iter().map(|s| s.is_some()).collect())
            .collect()
    }

    /// First step index of the stance phase containing step k for foot e,
    /// i.e. the touchdown step of the current stance. `None` while swinging.
    pub fn touchdown_step(&self, k: usize, foot: usize) -> Option<usize> {
        let phase = self.phase_index(k);
        self.phases[phase].contacts[foot].as_ref()?;
        let mut start_phase = phase;
        while start_phase > 0 && self.phases[start_phase - 1].contacts[foot].is_some() {
            start_phase -= 1;
        }
        let first_step: usize = self.phases[..start_phase].iter().map(|p| p.steps).sum();
        Some(first_step)
    }
}

fn gait_plan(
    geometry: StanceGeometry,
    friction: f64,
    step_length: f64,
    phase_steps: usize,
    n_cycles: usize,
    dt: f64,
    pair_a: [usize; 2],
    pair_b: [usize; 2],
) -> Result<ContactPlan, GaitError> {
    if !(geometry.half_length > 0.0 && geometry.half_width > 0.0) {
        return Err(GaitError::DegenerateGeometry);
    }
    if phase_steps == 0 {
        return Err(GaitError::EmptyPhase);
    }
    if n_cycles == 0 {
        return Err(GaitError::NoCycles);
    }
    let advance = Vector3::new(step_length, 0.0, 0.0);
    let mut feet: Vec<Vector3<f64>> = (0..4).map(|e| geometry.foot_position(e)).collect();
    let mut phases = Vec::with_capacity(2 * n_cycles);
    let stance_of = |active: [usize; 2], feet: &[Vector3<f64>]| -> Result<ContactPhase, GaitError> {
        let mut contacts = vec![None; 4];
        for e in active {
            contacts[e] = Some(ContactPoint::on_ground(feet[e], friction)?);
        }
        Ok(ContactPhase {
            steps: phase_steps,
            contacts,
        })
    };
    for _ in 0..n_cycles {
        // Pair A in stance; pair B swings and lands one step forward.
        phases.push(stance_of(pair_a, &feet)?);
        for e in pair_b {
            feet[e] += advance;
        }
        phases.push(stance_of(pair_b, &feet)?);
        for e in pair_a {
            feet[e] += advance;
        }
    }
    ContactPlan::new(phases, dt, 4, feet)
}

/// Trot: alternating diagonal pairs FL+HR and FR+HL, two phases per cycle,
/// each foot advancing by `step_length` per cycle.
pub fn make_trot_plan(
    geometry: StanceGeometry,
    friction: f64,
    step_length: f64,
    phase_steps: usize,
    n_cycles: usize,
    dt: f64,
) -> Result<ContactPlan, GaitError> {
    gait_plan(
        geometry,
        friction,
        step_length,
        phase_steps,
        n_cycles,
        dt,
        [FRONT_LEFT, HIND_RIGHT],
        [FRONT_RIGHT, HIND_LEFT],
    )
}

/// Bound: alternating front pair FL+FR and hind pair HL+HR.
pub fn make_bound_plan(
    geometry: StanceGeometry,
    friction: f64,
    step_length: f64,
    phase_steps: usize,
    n_cycles: usize,
    dt: f64,
) -> Result<ContactPlan, GaitError> {
    gait_plan(
        geometry,
        friction,
        step_length,
        phase_steps,
        n_cycles,
        dt,
        [FRONT_LEFT, FRONT_RIGHT],
        [HIND_LEFT, HIND_RIGHT],
    )
}

/// Tracking references (N+1 states) plus warm-start forces (N controls).
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub states: Vec<CentroidalState>,
    pub forces: Vec<ControlInput>,
}

/// CoM reference piecewise-linear between per-phase stance centroids at
/// `com_height`; linear momentum by finite differences; zero angular
/// momentum; warm-start forces split the weight equally among stance feet.
pub fn make_reference(
    plan: &ContactPlan,
    params: &RobotParams,
    com_height: f64,
) -> Result<ReferenceTrajectory, GaitError> {
    if plan.ee_count != params.ee_count {
        return Err(GaitError::EeMismatch {
            plan: plan.ee_count,
            robot: params.ee_count,
        });
    }
    let n = plan.total_steps();

    // Knots at phase midpoints: value = stance centroid at com_height.
    let mut knots: Vec<(f64, Vector3<f64>)> = Vec::with_capacity(plan.phases.len());
    let mut start = 0.0;
    for phase in &plan.phases {
        let mut centroid = Vector3::zeros();
        for e in phase.active() {
            centroid += phase.contacts[e].as_ref().unwrap().position;
        }
        centroid /= phase.active_count() as f64;
        centroid.z = com_height;
        knots.push((start + phase.steps as f64 / 2.0, centroid));
        start += phase.steps as f64;
    }

    let com_at = |k: f64| -> Vector3<f64> {
        if k <= knots[0].0 {
            return knots[0].1;
        }
        if k >= knots[knots.len() - 1].0 {
            return knots[knots.len() - 1].1;
        }
        for w in knots.windows(2) {
            let (t0, c0) = w[0];
            let (t1, c1) = w[1];
            if k <= t1 {
                let s = (k - t0) / (t1 - t0);
                return c0 + (c1 - c0) * s;
            }
        }
        knots[knots.len() - 1].1
    };

    let com_ref: Vec<Vector3<f64>> = (0..=n).map(|k| com_at(k as f64)).collect();
    let mut states = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let lin = if k < n {
            (com_ref[k + 1] - com_ref[k]) * (params.mass / plan.dt)
        } else {
            (com_ref[n] - com_ref[n - 1]) * (params.mass / plan.dt)
        };
        states.push(CentroidalState::new(com_ref[k], lin, Vector3::zeros()));
    }

    let weight = params.mass * params.gravity.norm();
    let mut forces = Vec::with_capacity(n);
    for slots in plan.expand() {
        let n_active = slots.iter().filter(|s| s.is_some()).count();
        let share = weight / n_active as f64;
        let per_foot: Vec<Vector3<f64>> = slots
            .iter()
            .map(|s| {
                if s.is_some() {
                    Vector3::new(0.0, 0.0, share)
                } else {
                    Vector3::zeros()
                }
            })
            .collect();
        forces.push(ControlInput { forces: per_foot });
    }

    Ok(ReferenceTrajectory { states, forces })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{dynamics_step, local_force};
    use approx::assert_relative_eq;

    fn geometry() -> StanceGeometry {
        StanceGeometry {
            half_length: 0.19,
            half_width: 0.15,
        }
    }

    fn robot() -> RobotParams {
        RobotParams::new(2.5, Vector3::new(0.3, 0.3, 0.35), 4).unwrap()
    }

    #[test]
    fn trot_single_cycle_structure() {
        let plan = make_trot_plan(geometry(), 0.5, 0.1, 10, 1, 0.02).unwrap();
        assert_eq!(plan.phases.len(), 2);
        assert_eq!(plan.total_steps(), 20);
        for phase in &plan.phases {
            assert_eq!(phase.active_count(), 2);
        }
        assert_eq!(plan.expand().len(), 20);
        // Diagonal pairs.
        let first: Vec<usize> = plan.phases[0].active().collect();
        let second: Vec<usize> = plan.phases[1].active().collect();
        assert_eq!(first, vec![FRONT_LEFT, HIND_RIGHT]);
        assert_eq!(second, vec![FRONT_RIGHT, HIND_LEFT]);
    }

    #[test]
    fn trot_feet_advance_step_length_per_cycle() {
        let step = 0.12;
        let cycles = 3;
        let plan = make_trot_plan(geometry(), 0.5, step, 5, cycles, 0.02).unwrap();
        for e in 0..4 {
            let start = geometry().foot_position(e);
            let displacement = plan.final_positions[e] - start;
            assert_relative_eq!(displacement.x, cycles as f64 * step, epsilon = 1e-12);
            assert_relative_eq!(displacement.y, 0.0, epsilon = 1e-12);
            assert_relative_eq!(displacement.z, 0.0, epsilon = 1e-12);
        }
        // Ground height stays zero in every stance.
        for phase in &plan.phases {
            for e in phase.active() {
                assert_eq!(phase.contacts[e].as_ref().unwrap().position.z, 0.0);
            }
        }
    }

    #[test]
    fn trot_stance_positions_advance_once_per_cycle() {
        let step = 0.1;
        let plan = make_trot_plan(geometry(), 0.5, step, 4, 3, 0.02).unwrap();
        let fl0 = geometry().foot_position(FRONT_LEFT).x;
        for (cycle, pair) in plan.phases.chunks(2).enumerate() {
            let fl = pair[0].contacts[FRONT_LEFT].as_ref().unwrap().position.x;
            assert_relative_eq!(fl, fl0 + cycle as f64 * step, epsilon = 1e-12);
        }
    }

    #[test]
    fn bound_alternates_front_and_hind_pairs() {
        let plan = make_bound_plan(geometry(), 0.5, 0.1, 8, 2, 0.01).unwrap();
        assert_eq!(plan.phases.len(), 4);
        assert_eq!(plan.total_steps(), 32);
        let first: Vec<usize> = plan.phases[0].active().collect();
        let second: Vec<usize> = plan.phases[1].active().collect();
        assert_eq!(first, vec![FRONT_LEFT, FRONT_RIGHT]);
        assert_eq!(second, vec![HIND_LEFT, HIND_RIGHT]);
        for phase in &plan.phases {
            assert_eq!(phase.active_count(), 2);
        }
        for e in 0..4 {
            let d = plan.final_positions[e] - geometry().foot_position(e);
            assert_relative_eq!(d.x, 0.2, epsilon = 1e-12);
        }
    }

    #[test]
    fn degenerate_geometry_rejected() {
        let flat = StanceGeometry {
            half_length: 0.2,
            half_width: 0.0,
        };
        assert_eq!(
            make_trot_plan(flat, 0.5, 0.1, 5, 1, 0.02).unwrap_err(),
            GaitError::DegenerateGeometry
        );
        assert_eq!(
            make_trot_plan(geometry(), 0.5, 0.1, 0, 1, 0.02).unwrap_err(),
            GaitError::EmptyPhase
        );
        assert_eq!(
            make_trot_plan(geometry(), 0.5, 0.1, 5, 0, 0.02).unwrap_err(),
            GaitError::NoCycles
        );
    }

    fn standing_plan(steps: usize) -> ContactPlan {
        let contacts: Vec<Option<ContactPoint>> = (0..4)
            .map(|e| Some(ContactPoint::on_ground(geometry().foot_position(e), 0.5).unwrap()))
            .collect();
        ContactPlan::new(
            vec![ContactPhase { steps, contacts }],
            0.02,
            4,
            (0..4).map(|e| geometry().foot_position(e)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn standing_reference_is_equal_split_at_centroid() {
        let plan = standing_plan(10);
        let refs = make_reference(&plan, &robot(), 0.28).unwrap();
        assert_eq!(refs.states.len(), 11);
        assert_eq!(refs.forces.len(), 10);
        let share = 2.5 * 9.81 / 4.0;
        for state in &refs.states {
            assert_relative_eq!(state.com, Vector3::new(0.0, 0.0, 0.28), epsilon = 1e-12);
            assert_eq!(state.lin_momentum, Vector3::zeros());
            assert_eq!(state.ang_momentum, Vector3::zeros());
        }
        for control in &refs.forces {
            for f in &control.forces {
                assert_relative_eq!(f.z, share, epsilon = 1e-12);
                assert_eq!(f.x, 0.0);
                assert_eq!(f.y, 0.0);
            }
        }
    }

    #[test]
    fn warm_start_is_equilibrium_under_constant_reference() {
        let plan = standing_plan(10);
        let params = robot();
        let refs = make_reference(&plan, &params, 0.28).unwrap();
        let next = dynamics_step(
            &refs.states[0],
            &refs.forces[0],
            plan.contacts_at(0),
            &params,
            plan.dt,
        )
        .unwrap();
        assert_relative_eq!(
            next.lin_momentum,
            refs.states[1].lin_momentum,
            epsilon = 1e-12
        );
        assert_relative_eq!(next.ang_momentum.norm(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(next.com, refs.states[1].com, epsilon = 1e-12);
    }

    #[test]
    fn warm_start_strictly_inside_friction_pyramid() {
        let plan = make_trot_plan(geometry(), 0.3, 0.1, 6, 2, 0.02).unwrap();
        let refs = make_reference(&plan, &robot(), 0.28).unwrap();
        for (k, slots) in plan.expand().iter().enumerate() {
            for (e, slot) in slots.iter().enumerate() {
                if let Some(c) = slot {
                    let f = local_force(&refs.forces[k].forces[e], &c.rotation);
                    assert!(f.z > 0.0);
                    assert!(f.x.abs() < c.friction * f.z);
                    assert!(f.y.abs() < c.friction * f.z);
                } else {
                    assert_eq!(refs.forces[k].forces[e], Vector3::zeros());
                }
            }
        }
    }

    #[test]
    fn reference_com_within_reach_of_active_contacts() {
        let params = robot();
        let plan = make_trot_plan(geometry(), 0.5, 0.08, 8, 3, 0.02).unwrap();
        let refs = make_reference(&plan, &params, 0.25).unwrap();
        for (k, slots) in plan.expand().iter().enumerate() {
            for slot in slots.iter().flatten() {
                let d = slot.position - refs.states[k].com;
                for ax in 0..3 {
                    assert!(
                        d[ax].abs() <= params.reach_limit[ax] + 1e-12,
                        "step {k}, axis {ax}: {}",
                        d[ax]
                    );
                }
            }
        }
    }

    #[test]
    fn touchdown_step_tracks_stance_starts() {
        let plan = make_trot_plan(geometry(), 0.5, 0.1, 5, 2, 0.02).unwrap();
        // FL stances in phases 0 and 2 (steps 0-4 and 10-14).
        assert_eq!(plan.touchdown_step(0, FRONT_LEFT), Some(0));
        assert_eq!(plan.touchdown_step(4, FRONT_LEFT), Some(0));
        assert_eq!(plan.touchdown_step(5, FRONT_LEFT), None);
        assert_eq!(plan.touchdown_step(12, FRONT_LEFT), Some(10));
        assert_eq!(plan.touchdown_step(7, FRONT_RIGHT), Some(5));
    }

    #[test]
    fn linear_momentum_reference_matches_com_difference() {
        let params = robot();
        let plan = make_trot_plan(geometry(), 0.5, 0.15, 6, 2, 0.02).unwrap();
        let refs = make_reference(&plan, &params, 0.27).unwrap();
        let n = plan.total_steps();
        for k in 0..n {
            let expected =
                (refs.states[k + 1].com - refs.states[k].com) * (params.mass / plan.dt);
            assert_relative_eq!(refs.states[k].lin_momentum, expected, epsilon = 1e-12);
        }
    }
}
