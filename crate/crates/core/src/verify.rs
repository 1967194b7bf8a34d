//! Monte-Carlo disturbance rollouts through the true centroidal dynamics.
//!
//! A rollout replays a planned trajectory under the feedback policy
//! `u_k = v_k + K_k(x_k − s_k)` (swing rows forced to zero), with contact
//! positions sampled from N(p_e, Σ_θ) and additive state noise from
//! N(0, Σ_w). Every draw comes from a counter-based substream keyed by
//! `(seed, rollout, step, channel)`, so the records are bit-identical
//! regardless of execution order. Paired comparisons apply the same draws to
//! a nominal and a stochastic plan (common random numbers) and report the
//! empirical friction-satisfaction frequencies with a normal-approximation
//! confidence interval on the paired delta.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use thiserror::Error;

use crate::gait::ContactPlan;
use crate::model::{local_force, CentroidalState, ContactPoint, RobotParams};
use crate::rng::NormalStream;
use crate::scp::ScpIterate;
use crate::uncertainty::FeedbackPolicy;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error("solution does not match the plan: expected {expected} {what}, got {got}")]
    Mismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("n_rollouts must be at least 1")]
    NoRollouts,
}

/// Whether a foot's position error is redrawn at every touchdown only
/// (a misplaced foot stays misplaced for its stance) or at every step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContactResample {
    PerRollout,
    PerStep,
}

/// Disturbances applied during verification; usually the design uncertainty,
/// optionally scaled.
#[derive(Debug, Clone)]
pub struct DisturbanceSpec {
    pub sigma_w: DMatrix<f64>,
    pub sigma_theta: Vec<Matrix3<f64>>,
    pub n_rollouts: usize,
    pub seed: u64,
    pub contact_resample: ContactResample,
}

/// RNG channel ids: 0 carries the additive state noise, 1 + e the position
/// noise of foot e.
const CHANNEL_STATE_NOISE: u64 = 0;

/// One rollout's record.
#[derive(Debug, Clone)]
pub struct RolloutRecord {
    /// Most negative friction margin min(μ𝔣z − |𝔣x|, μ𝔣z − |𝔣y|) over the
    /// rollout, reported as a violation magnitude (0 when never violated).
    pub max_violation: f64,
    /// Number of steps with at least one violated pyramid row.
    pub violation_steps: usize,
    /// ‖x_N − s_N‖₂ over the 9-dim state.
    pub terminal_error: f64,
    /// True when no pyramid row was violated at any step.
    pub satisfied: bool,
    /// Σ_k ‖x_k − s_k‖² (unweighted squared 9-dim deviations).
    pub tracking_cost: f64,
    /// Per-step max over active feet of ‖(𝔣x, 𝔣y)‖ / max(𝔣z, 1e-9).
    pub ratio_trace: Vec<f64>,
    /// Per-step flag: all pyramid rows satisfied at that step.
    pub step_satisfied: Vec<bool>,
    /// Realized state trajectory.
    pub states: Vec<CentroidalState>,
    /// The dynamics produced a non-finite state and the rollout stopped early.
    pub diverged: bool,
}

/// PSD square root via symmetric eigendecomposition, clamping tiny negative
/// eigenvalues to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let n = m.nrows();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        d[(i, i)] = eig.eigenvalues[i].max(0.0).sqrt();
    }
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

fn draw_vector(stream: &mut NormalStream, sqrt_cov: &DMatrix<f64>) -> DVector<f64> {
    let n = sqrt_cov.nrows();
    let mut raw = DVector::zeros(n);
    for v in raw.iter_mut() {
        *v = stream.next_normal();
    }
    sqrt_cov * raw
}

/// Precomputed factor data shared by all rollouts of one spec.
pub struct RolloutContext {
    sqrt_w: DMatrix<f64>,
    sqrt_theta: Vec<DMatrix<f64>>,
}

impl RolloutContext {
    pub fn new(spec: &DisturbanceSpec) -> Self {
        Self {
            sqrt_w: psd_sqrt(&spec.sigma_w),
            sqrt_theta: spec
                .sigma_theta
                .iter()
                .map(|t| psd_sqrt(&DMatrix::from_iterator(3, 3, t.iter().cloned())))
                .collect(),
        }
    }
}

fn validate(
    plan: &ContactPlan,
    solution: &ScpIterate,
    policy: &FeedbackPolicy,
    spec: &DisturbanceSpec,
) -> Result<(), VerifyError> {
    let n = plan.total_steps();
    if solution.states.len() != n + 1 {
        return Err(VerifyError::Mismatch {
            what: "states",
            expected: n + 1,
            got: solution.states.len(),
        });
    }
    if solution.controls.len() != n {
        return Err(VerifyError::Mismatch {
            what: "controls",
            expected: n,
            got: solution.controls.len(),
        });
    }
    if policy.gains.len() != n {
        return Err(VerifyError::Mismatch {
            what: "gains",
            expected: n,
            got: policy.gains.len(),
        });
    }
    if spec.sigma_theta.len() != plan.ee_count {
        return Err(VerifyError::Mismatch {
            what: "sigma_theta blocks",
            expected: plan.ee_count,
            got: spec.sigma_theta.len(),
        });
    }
    if spec.n_rollouts == 0 {
        return Err(VerifyError::NoRollouts);
    }
    Ok(())
}

/// One disturbance rollout, fully determined by `(spec.seed, rollout_index)`.
pub fn rollout(
    plan: &ContactPlan,
    solution: &ScpIterate,
    policy: &FeedbackPolicy,
    params: &RobotParams,
    spec: &DisturbanceSpec,
    ctx: &RolloutContext,
    rollout_index: u64,
) -> Result<RolloutRecord, VerifyError> {
    validate(plan, solution, policy, spec)?;
    let n = plan.total_steps();
    let ee = plan.ee_count;

    let mut x = solution.states[0];
    let mut states = Vec::with_capacity(n + 1);
    states.push(x);
    let mut held_offsets: Vec<Option<Vector3<f64>>> = vec![None; ee];
    let mut max_violation = 0.0_f64;
    let mut violation_steps = 0usize;
    let mut tracking_cost = (x.to_vector() - solution.states[0].to_vector()).norm_squared();
    let mut ratio_trace = Vec::with_capacity(n);
    let mut step_satisfied = Vec::with_capacity(n);
    let mut diverged = false;

    for k in 0..n {
        let slots = plan.contacts_at(k);

        // Feedback on the state deviation, swing rows forced to zero.
        let dx = x.to_vector() - solution.states[k].to_vector();
        let correction = &policy.gains[k] * dx;
        let mut forces = solution.controls[k].forces.clone();
        for (e, slot) in slots.iter().enumerate() {
            if slot.is_some() {
                forces[e] += Vector3::new(
                    correction[3 * e],
                    correction[3 * e + 1],
                    correction[3 * e + 2],
                );
            } else {
                forces[e] = Vector3::zeros();
            }
        }

        // Sampled contact positions.
        let mut contacts: Vec<Option<ContactPoint>> = vec![None; ee];
        for (e, slot) in slots.iter().enumerate() {
            if let Some(contact) = slot {
                let offset = match spec.contact_resample {
                    ContactResample::PerStep => {
                        let mut stream = NormalStream::new(
                            spec.seed,
                            rollout_index,
                            k as u64,
                            1 + e as u64,
                        );
                        let d = draw_vector(&mut stream, &ctx.sqrt_theta[e]);
                        Vector3::new(d[0], d[1], d[2])
                    }
                    ContactResample::PerRollout => {
                        let touchdown = plan.touchdown_step(k, e).unwrap_or(k);
                        if touchdown == k || held_offsets[e].is_none() {
                            let mut stream = NormalStream::new(
                                spec.seed,
                                rollout_index,
                                touchdown as u64,
                                1 + e as u64,
                            );
                            let d = draw_vector(&mut stream, &ctx.sqrt_theta[e]);
                            held_offsets[e] = Some(Vector3::new(d[0], d[1], d[2]));
                        }
                        held_offsets[e].unwrap()
                    }
                };
                contacts[e] = Some(ContactPoint {
                    position: contact.position + offset,
                    rotation: contact.rotation,
                    friction: contact.friction,
                });
            } else if spec.contact_resample == ContactResample::PerRollout {
                held_offsets[e] = None; // next touchdown draws a fresh offset
            }
        }

        // Friction margins and tangential ratio from the applied forces, in
        // the contact frame of the plan.
        let mut step_ok = true;
        let mut step_ratio = 0.0_f64;
        for (e, slot) in slots.iter().enumerate() {
            if let Some(contact) = slot {
                let f = local_force(&forces[e], &contact.rotation);
                let margin_x = contact.friction * f.z - f.x.abs();
                let margin_y = contact.friction * f.z - f.y.abs();
                let worst = margin_x.min(margin_y);
                if worst < 0.0 {
                    step_ok = false;
                    max_violation = max_violation.max(-worst);
                }
                let ratio = (f.x * f.x + f.y * f.y).sqrt() / f.z.max(1e-9);
                step_ratio = step_ratio.max(ratio);
            }
        }
        if !step_ok {
            violation_steps += 1;
        }
        step_satisfied.push(step_ok);
        ratio_trace.push(step_ratio);

        // True dynamics at the sampled contacts, plus additive noise.
        let mut stream =
            NormalStream::new(spec.seed, rollout_index, k as u64, CHANNEL_STATE_NOISE);
        let w = draw_vector(&mut stream, &ctx.sqrt_w);
        let control = crate::model::ControlInput { forces };
        let next = crate::model::dynamics_step(&x, &control, &contacts, params, plan.dt);
        match next {
            Ok(mut s) => {
                let noisy = s.to_vector() + &w;
                s = CentroidalState::from_slice(noisy.as_slice());
                if !s.is_finite() {
                    diverged = true;
                    states.push(s);
                    break;
                }
                x = s;
            }
            Err(_) => {
                diverged = true;
                break;
            }
        }
        states.push(x);
        tracking_cost += (x.to_vector() - solution.states[k + 1].to_vector()).norm_squared();
    }

    let terminal_error = if diverged {
        f64::INFINITY
    } else {
        (x.to_vector() - solution.states[n].to_vector()).norm()
    };
    Ok(RolloutRecord {
        max_violation,
        violation_steps,
        terminal_error,
        satisfied: violation_steps == 0 && !diverged,
        tracking_cost,
        ratio_trace,
        step_satisfied,
        states,
        diverged,
    })
}

/// Aggregates over a batch of rollouts; exact deterministic folds over
/// rollout indices in increasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutAggregate {
    pub n_rollouts: usize,
    /// Fraction of rollouts with no friction violation at any step.
    pub satisfaction_frequency: f64,
    /// Per-step empirical frequency of full pyramid satisfaction.
    pub per_step_satisfaction: Vec<f64>,
    /// Per-step mean (over rollouts) of the max tangential/vertical ratio.
    pub mean_ratio_trace: Vec<f64>,
    pub mean_tracking_cost: f64,
    pub mean_max_violation: f64,
    pub diverged_rollouts: usize,
}

/// Satisfaction indicators per rollout (needed for paired deltas).
#[derive(Debug)]
pub struct BatchResult {
    pub aggregate: RolloutAggregate,
    pub satisfied: Vec<bool>,
}

/// Run `spec.n_rollouts` rollouts of one plan and fold the aggregates.
pub fn run_rollouts(
    plan: &ContactPlan,
    solution: &ScpIterate,
    policy: &FeedbackPolicy,
    params: &RobotParams,
    spec: &DisturbanceSpec,
) -> Result<BatchResult, VerifyError> {
    validate(plan, solution, policy, spec)?;
    let ctx = RolloutContext::new(spec);
    let n = plan.total_steps();
    let mut satisfied = Vec::with_capacity(spec.n_rollouts);
    let mut per_step_sat = vec![0usize; n];
    let mut ratio_sum = vec![0.0_f64; n];
    let mut tracking_sum = 0.0;
    let mut violation_sum = 0.0;
    let mut diverged = 0usize;
    for i in 0..spec.n_rollouts {
        let rec = rollout(plan, solution, policy, params, spec, &ctx, i as u64)?;
        for k in 0..rec.step_satisfied.len() {
            if rec.step_satisfied[k] {
                per_step_sat[k] += 1;
            }
            ratio_sum[k] += rec.ratio_trace[k];
        }
        tracking_sum += rec.tracking_cost;
        violation_sum += rec.max_violation;
        if rec.diverged {
            diverged += 1;
        }
        satisfied.push(rec.satisfied);
    }
    let m = spec.n_rollouts as f64;
    let aggregate = RolloutAggregate {
        n_rollouts: spec.n_rollouts,
        satisfaction_frequency: satisfied.iter().filter(|&&s| s).count() as f64 / m,
        per_step_satisfaction: per_step_sat.iter().map(|&c| c as f64 / m).collect(),
        mean_ratio_trace: ratio_sum.iter().map(|&r| r / m).collect(),
        mean_tracking_cost: tracking_sum / m,
        mean_max_violation: violation_sum / m,
        diverged_rollouts: diverged,
    };
    Ok(BatchResult {
        aggregate,
        satisfied,
    })
}

/// Paired comparison of two plans under common random numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub nominal: RolloutAggregate,
    pub stochastic: RolloutAggregate,
    /// Mean of the per-rollout paired difference (stochastic − nominal) of
    /// the satisfaction indicators.
    pub delta_satisfaction: f64,
    /// 95% normal-approximation half-width of the paired delta.
    pub delta_ci95: f64,
}

/// Roll both plans through the same disturbance draws (the substreams depend
/// only on `(seed, rollout, step, channel)`, not on the plan) and report the
/// paired satisfaction delta.
pub fn compare(
    plan: &ContactPlan,
    nominal: &ScpIterate,
    stochastic: &ScpIterate,
    policy: &FeedbackPolicy,
    params: &RobotParams,
    spec: &DisturbanceSpec,
) -> Result<ComparisonReport, VerifyError> {
    let nom = run_rollouts(plan, nominal, policy, params, spec)?;
    let sto = run_rollouts(plan, stochastic, policy, params, spec)?;
    let n = spec.n_rollouts as f64;
    let deltas: Vec<f64> = nom
        .satisfied
        .iter()
        .zip(&sto.satisfied)
        .map(|(&a, &b)| (b as i8 - a as i8) as f64)
        .collect();
    let mean = deltas.iter().sum::<f64>() / n;
    let var = if spec.n_rollouts > 1 {
        deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let ci = 1.959964 * (var / n).sqrt();
    Ok(ComparisonReport {
        nominal: nom.aggregate,
        stochastic: sto.aggregate,
        delta_satisfaction: mean,
        delta_ci95: ci,
    })
}
