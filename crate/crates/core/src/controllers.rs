//! Torque controllers for a tool constrained by a trocar.
//!
//! All three controllers are pure functions of the robot state, trocar state,
//! references, gains and the current disturbance estimate. Integration state
//! (observer accumulator, Z-basis continuity) lives in [`ObserverState`] and
//! [`Controller`] and is threaded through explicitly.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::constrained_dynamics::{
    invert_mobility, projection_state_with_inverse, task_space_terms, GeneralizedInverse,
};
use crate::error::{Error, Result};
use crate::numerics::{self, diag, Mat, PinvOptions, Vector};
use crate::rcm::{self, ConstraintState, RcmMode, TrocarState};
use crate::robot::{self, DynamicsTerms, Frame, JointState, MotionKinematics, RobotModel};

/// Constraint Jacobians with `sigma_min / sigma_max` below this are rejected.
pub const CONSTRAINT_RANK_TOLERANCE: f64 = 1e-8;
/// Extended Jacobians with `sigma_min / sigma_max` below this are rejected.
pub const EXTENDED_JACOBIAN_TOLERANCE: f64 = 1e-8;

pub const DEFAULT_TASK_STIFFNESS: f64 = 1000.0;
pub const DEFAULT_CONSTRAINT_STIFFNESS: f64 = 1500.0;
pub const DEFAULT_NULLSPACE_STIFFNESS: f64 = 5.0;
pub const DEFAULT_OBSERVER_GAIN: f64 = 50.0;

/// Diagonal gains. Constraint gains always carry three entries; the 2D
/// formulation uses the first two.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainSet {
    pub k_fp: [f64; 3],
    pub k_fd: [f64; 3],
    pub k_cp: [f64; 3],
    pub k_cd: [f64; 3],
    pub k_np: Vec<f64>,
    pub k_nd: Vec<f64>,
    pub observer: Vec<f64>,
}

fn critical(k: f64) -> f64 {
    2.0 * k.sqrt()
}

impl GainSet {
    /// Derivative gains follow `2 sqrt(K_P)` element-wise.
    pub fn from_proportional(
        k_fp: [f64; 3],
        k_cp: [f64; 3],
        k_np: Vec<f64>,
        observer: Vec<f64>,
    ) -> Self {
        GainSet {
            k_fd: k_fp.map(critical),
            k_cd: k_cp.map(critical),
            k_nd: k_np.iter().copied().map(critical).collect(),
            k_fp,
            k_cp,
            k_np,
            observer,
        }
    }

    pub fn defaults(n: usize) -> Self {
        Self::from_proportional(
            [DEFAULT_TASK_STIFFNESS; 3],
            [DEFAULT_CONSTRAINT_STIFFNESS; 3],
            vec![DEFAULT_NULLSPACE_STIFFNESS; n],
            vec![DEFAULT_OBSERVER_GAIN; n],
        )
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let groups: [(&str, &[f64]); 7] = [
            ("k_fp", &self.k_fp),
            ("k_fd", &self.k_fd),
            ("k_cp", &self.k_cp),
            ("k_cd", &self.k_cd),
            ("k_np", &self.k_np),
            ("k_nd", &self.k_nd),
            ("observer", &self.observer),
        ];
        for (name, values) in groups {
            if matches!(name, "k_np" | "k_nd" | "observer") && values.len() != n {
                return Err(Error::config(
                    format!("gains.{name}"),
                    format!("expected {n} entries, found {}", values.len()),
                ));
            }
            if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::config(
                    format!("gains.{name}[{i}]"),
                    format!("gain must be finite and non-negative, got {}", values[i]),
                ));
            }
        }
        Ok(())
    }

    fn constraint(&self, k: usize) -> (Mat, Mat) {
        (diag(&self.k_cp[..k]), diag(&self.k_cd[..k]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskReference {
    pub x_d: Vector3<f64>,
    pub xdot_d: Vector3<f64>,
    pub xddot_d: Vector3<f64>,
}

impl TaskReference {
    pub fn hold(x: Vector3<f64>) -> Self {
        TaskReference {
            x_d: x,
            xdot_d: Vector3::zeros(),
            xddot_d: Vector3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x_d
            .iter()
            .chain(&self.xdot_d)
            .chain(&self.xddot_d)
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug)]
pub struct Diagnostics {
    pub x_c: Vector,
    pub xdot_c: Vector,
    pub tip_error: Vector3<f64>,
    pub f_f: Vector3<f64>,
    pub jc: Mat,
    /// The controller's commanded `Jc qddot`, i.e. `xddot_c - b_c`.
    pub constraint_target: Vector,
    /// True when a task inertia had to be inverted with damping.
    pub damped: bool,
}

#[derive(Clone, Debug)]
pub struct ControllerOutput {
    pub tau: Vector,
    pub tau_parallel: Vector,
    pub tau_perp: Vector,
    pub tau_0: Vector,
    /// Compensation torque actually added, after the scope restriction.
    pub tau_ext_hat: Vector,
    pub diagnostics: Diagnostics,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    #[default]
    PApproach,
    ZApproach,
    Uk,
}

impl ControllerKind {
    pub fn label(self) -> &'static str {
        match self {
            ControllerKind::PApproach => "p_approach",
            ControllerKind::ZApproach => "z_approach",
            ControllerKind::Uk => "uk",
        }
    }
}

/// Which part of the disturbance estimate the controller cancels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompensationScope {
    #[default]
    Full,
    /// Cancel only what accelerates the tip or the residual; the rest is left
    /// to the null-space impedance, so pushes on the arm are yielded to.
    TaskAndConstraint,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControlSettings {
    pub mode: RcmMode,
    pub nullspace_compliance: bool,
    pub inverse: GeneralizedInverse,
    pub compensation: CompensationScope,
}

impl Default for ControlSettings {
    fn default() -> Self {
        ControlSettings {
            mode: RcmMode::TwoD,
            nullspace_compliance: true,
            inverse: GeneralizedInverse::default(),
            compensation: CompensationScope::Full,
        }
    }
}

/// Everything a controller needs from the model at one tick.
#[derive(Clone, Debug)]
pub struct TickTerms {
    pub dynamics: DynamicsTerms,
    pub m_inv: Mat,
    pub motion: MotionKinematics,
    pub constraint: ConstraintState,
    /// Translational tip Jacobian (3 x n).
    pub j: Mat,
    pub j_dot_qdot: Vector,
    pub x: Vector3<f64>,
    pub xdot: Vector3<f64>,
}

impl TickTerms {
    pub fn new(
        model: &RobotModel,
        state: &JointState,
        trocar: &TrocarState,
        mode: RcmMode,
    ) -> Result<Self> {
        let motion = MotionKinematics::new(model, state);
        let constraint = rcm::constraint_state_from(&motion, state, trocar, mode);
        Self::assemble(model, state, motion, constraint)
    }

    /// Terms with no active constraint.
    pub fn unconstrained(model: &RobotModel, state: &JointState) -> Result<Self> {
        let motion = MotionKinematics::new(model, state);
        let constraint = ConstraintState::empty(model.dof());
        Self::assemble(model, state, motion, constraint)
    }

    fn assemble(
        model: &RobotModel,
        state: &JointState,
        motion: MotionKinematics,
        constraint: ConstraintState,
    ) -> Result<Self> {
        let dynamics = robot::dynamics_terms_from(model, &motion.now, &state.qdot);
        let m_inv = numerics::spd_inverse(&dynamics.m)?;
        let j = motion.now.jacobian(Frame::Tip).rows(0, 3).into_owned();
        let j_dot_qdot = motion.jacobian_dot(Frame::Tip).rows(0, 3) * &state.qdot;
        let xdot_dyn = &j * &state.qdot;
        Ok(TickTerms {
            x: motion.now.tip.p,
            xdot: Vector3::new(xdot_dyn[0], xdot_dyn[1], xdot_dyn[2]),
            dynamics,
            m_inv,
            motion,
            constraint,
            j,
            j_dot_qdot,
        })
    }

    pub fn dof(&self) -> usize {
        self.m_inv.nrows()
    }

    fn tip_errors(&self, reference: &TaskReference) -> (Vector3<f64>, Vector3<f64>) {
        (reference.x_d - self.x, reference.xdot_d - self.xdot)
    }
}

fn v3(v: &Vector3<f64>) -> Vector {
    Vector::from_column_slice(v.as_slice())
}

fn to3(v: &Vector) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2])
}

/// Compensation torque actually applied for the estimate `tau_ext_hat`. The
/// restricted scope keeps `J_s^T Lambda_s J_s M^-1 tau_ext_hat` with `J_s`
/// stacking the tip and constraint Jacobians; the remainder produces no
/// acceleration of either.
pub fn compensation_torque(
    tick: &TickTerms,
    tau_ext_hat: &Vector,
    scope: CompensationScope,
) -> Result<Vector> {
    match scope {
        CompensationScope::Full => Ok(tau_ext_hat.clone()),
        CompensationScope::TaskAndConstraint => {
            let k = tick.constraint.dim();
            let mut js = Mat::zeros(3 + k, tick.dof());
            js.rows_mut(0, 3).copy_from(&tick.j);
            js.rows_mut(3, k).copy_from(&tick.constraint.jac);
            let js_minv = &js * &tick.m_inv;
            let (lambda_s, _) = invert_mobility(&(&js_minv * js.transpose()))?;
            Ok(js.transpose() * (lambda_s * (js_minv * tau_ext_hat)))
        }
    }
}

/// Residual goal `(x_cd, xdot_cd, xddot_cd)`. The 2D formulation asks for
/// zero; the 3D one leaves the axial component free to follow the insertion
/// depth implied by the tip reference.
pub fn constraint_goal(
    mode: RcmMode,
    reference: &TaskReference,
    trocar: &TrocarState,
    l_tool: f64,
) -> (Vector, Vector, Vector) {
    match mode {
        RcmMode::TwoD => (Vector::zeros(2), Vector::zeros(2), Vector::zeros(2)),
        RcmMode::ThreeD => rcm::insertion_goal(
            (&reference.x_d, &reference.xdot_d, &reference.xddot_d),
            trocar,
            l_tool,
        ),
    }
}

/// `f_f = Lambda_f xddot_d + K_fD edot + K_fP e + h_f` with `e = x_d - x`.
pub fn free_space_force(
    lambda_f: &Mat,
    h_f: &Vector,
    reference: &TaskReference,
    x: &Vector3<f64>,
    xdot: &Vector3<f64>,
    gains: &GainSet,
) -> Vector3<f64> {
    let e = reference.x_d - x;
    let edot = reference.xdot_d - xdot;
    let pd = Vector3::from_fn(|i, _| gains.k_fd[i] * edot[i] + gains.k_fp[i] * e[i]);
    to3(&(lambda_f * v3(&reference.xddot_d) + h_f)) + pd
}

/// `tau_0 = -K_nD qdot - K_nP (q - q_init)`.
pub fn nullspace_torque(q: &Vector, qdot: &Vector, q_init: &Vector, gains: &GainSet) -> Vector {
    Vector::from_fn(q.len(), |i, _| {
        -gains.k_nd[i] * qdot[i] - gains.k_np[i] * (q[i] - q_init[i])
    })
}

fn posture_torque(
    state: &JointState,
    q_init: &Vector,
    gains: &GainSet,
    settings: &ControlSettings,
) -> Vector {
    if settings.nullspace_compliance {
        nullspace_torque(&state.q, &state.qdot, q_init, gains)
    } else {
        Vector::zeros(state.q.len())
    }
}

/// Unconstrained operational-space PD+ torque
/// `J^T f + (I - J^T J^{#T}) (tau_0 + h)`.
pub fn operational_space_torque(
    tick: &TickTerms,
    reference: &TaskReference,
    gains: &GainSet,
    tau_0: &Vector,
) -> Result<(Vector, Vector3<f64>, bool)> {
    let n = tick.dof();
    let j_minv = &tick.j * &tick.m_inv;
    let (lambda, damped) = invert_mobility(&(&j_minv * tick.j.transpose()))?;
    let j_sharp_t = &lambda * &j_minv;
    let h = &tick.dynamics.h;
    let h_task = &lambda * (&j_minv * h - &tick.j_dot_qdot);
    let f = free_space_force(&lambda, &h_task, reference, &tick.x, &tick.xdot, gains);
    let n_bar = Mat::identity(n, n) - tick.j.transpose() * j_sharp_t;
    let tau = tick.j.transpose() * v3(&f) + n_bar * (tau_0 + h);
    Ok((tau, f, damped))
}

#[allow(clippy::too_many_arguments)]
pub fn p_approach_torque(
    model: &RobotModel,
    state: &JointState,
    trocar: &TrocarState,
    reference: &TaskReference,
    gains: &GainSet,
    settings: &ControlSettings,
    q_init: &Vector,
    tau_ext_hat: &Vector,
) -> Result<ControllerOutput> {
    let tick = TickTerms::new(model, state, trocar, settings.mode)?;
    let goal = constraint_goal(settings.mode, reference, trocar, model.l_tool);
    p_approach_from_terms(
        &tick,
        state,
        &goal,
        reference,
        gains,
        settings,
        q_init,
        tau_ext_hat,
    )
}

/// P-approach on precomputed terms; a tick with an empty constraint gives the
/// unconstrained controller.
#[allow(clippy::too_many_arguments)]
pub fn p_approach_from_terms(
    tick: &TickTerms,
    state: &JointState,
    goal: &(Vector, Vector, Vector),
    reference: &TaskReference,
    gains: &GainSet,
    settings: &ControlSettings,
    q_init: &Vector,
    tau_ext_hat: &Vector,
) -> Result<ControllerOutput> {
    let cons = &tick.constraint;
    let k = cons.dim();
    let jc = &cons.jac;
    let h = &tick.dynamics.h;
    numerics::check_full_row_rank(jc, CONSTRAINT_RANK_TOLERANCE)?;
    let proj =
        projection_state_with_inverse(&tick.dynamics.m, tick.m_inv.clone(), jc, &cons.jac_dot)?;

    // Residual stabilization at the acceleration level. The commanded joint
    // acceleration must also cancel the bias, otherwise it forces the residual.
    let (x_cd, xdot_cd, xddot_cd) = goal;
    let x_err = &cons.x - x_cd;
    let xdot_err = &cons.xdot - xdot_cd;
    let (kcp, kcd) = gains.constraint(k);
    let mobility_c = jc * &tick.m_inv * jc.transpose();
    let xddot_c = xddot_cd - &mobility_c * (kcd * xdot_err + kcp * x_err);
    let target = &xddot_c - &cons.bias;
    let feedforward = &proj.jc_pinv * &target;

    let terms = task_space_terms(
        &proj.m_f,
        &proj.p,
        &tick.j,
        &tick.j_dot_qdot,
        h,
        &feedforward,
    )?;
    let f_f = free_space_force(
        &terms.lambda_f,
        &terms.h_f,
        reference,
        &tick.x,
        &tick.xdot,
        gains,
    );
    let tau_0 = posture_torque(state, q_init, gains, settings);
    let tau_f = tick.j.transpose() * v3(&f_f) + &terms.n_bar * (&tau_0 + h);
    let tau_c = jc.transpose() * &proj.lambda_c * (&target + jc * &tick.m_inv * h);

    let selector = proj.free_motion_selector(jc, settings.inverse);
    let tau_parallel = &selector * tau_f;
    let tau_perp = &tau_c - &selector * &tau_c;
    let compensation = compensation_torque(tick, tau_ext_hat, settings.compensation)?;
    let tau = &tau_parallel + &tau_perp + &compensation;
    let (tip_error, _) = tick.tip_errors(reference);
    Ok(ControllerOutput {
        tau,
        tau_parallel,
        tau_perp,
        tau_0,
        tau_ext_hat: compensation,
        diagnostics: Diagnostics {
            x_c: cons.x.clone(),
            xdot_c: cons.xdot.clone(),
            tip_error,
            f_f,
            jc: jc.clone(),
            constraint_target: target,
            damped: terms.damped,
        },
    })
}

/// Orthonormal basis of the null space of `jc`. Without a previous basis the
/// basis comes from an eigen-decomposition of the projector; otherwise the
/// previous basis is projected and re-orthonormalized by its polar factor,
/// which is the orthonormal basis closest to it.
pub fn nullspace_basis(jc: &Mat, previous: Option<&Mat>) -> Result<Mat> {
    let n = jc.ncols();
    let p = numerics::orth_projector(jc)?;
    let r = n - jc.nrows();
    if let Some(prev) = previous.filter(|z| z.nrows() == n && z.ncols() == r) {
        let y = &p * prev;
        let gram = y.transpose() * &y;
        if gram.clone().symmetric_eigen().eigenvalues.min() > 0.25 {
            return Ok(y * numerics::matrix_inv_sqrt(&gram)?);
        }
    }
    let eig = p.symmetric_eigen();
    let mut cols: Vec<usize> = (0..n).collect();
    cols.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut z = Mat::zeros(n, r);
    for (c, &i) in cols[..r].iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        let pivot = v.iamax();
        if v[pivot] < 0.0 {
            v = -v;
        }
        z.set_column(c, &v);
    }
    Ok(z)
}

fn weighted_left_inverse(z: &Mat, m: &Mat) -> Result<(Mat, Mat)> {
    let lambda_n = z.transpose() * m * z;
    let inv = numerics::spd_inverse(&lambda_n)?;
    Ok((&inv * z.transpose() * m, lambda_n))
}

/// Z-approach. Returns the output together with the null-space basis to
/// pass to the next tick.
#[allow(clippy::too_many_arguments)]
pub fn z_approach_torque(
    model: &RobotModel,
    state: &JointState,
    trocar: &TrocarState,
    reference: &TaskReference,
    gains: &GainSet,
    settings: &ControlSettings,
    q_init: &Vector,
    tau_ext_hat: &Vector,
    z_previous: Option<&Mat>,
) -> Result<(ControllerOutput, Mat)> {
    let tick = TickTerms::new(model, state, trocar, settings.mode)?;
    let n = tick.dof();
    let cons = &tick.constraint;
    let k = cons.dim();
    let jc = &cons.jac;
    let m = &tick.dynamics.m;
    let h = &tick.dynamics.h;
    numerics::check_full_row_rank(jc, CONSTRAINT_RANK_TOLERANCE)?;

    let z = nullspace_basis(jc, z_previous)?;
    let (z_sharp, lambda_n) = weighted_left_inverse(&z, m)?;
    let mut j_e = Mat::zeros(n, n);
    j_e.rows_mut(0, k).copy_from(jc);
    j_e.rows_mut(k, n - k).copy_from(&z_sharp);
    if numerics::conditioning_ratio(&j_e) < EXTENDED_JACOBIAN_TOLERANCE {
        return Err(Error::SingularExtendedJacobian);
    }

    // d/dt Z# by central differences along qdot, reusing the current basis so
    // both samples share its orientation.
    let eps = tick.motion.eps;
    let sample = |kin: &robot::Kinematics, p_c: Vector3<f64>| -> Result<Mat> {
        let jc_s = rcm::residual_jacobian(
            &kin.reference,
            &kin.jacobian(Frame::Reference),
            &p_c,
            settings.mode,
        );
        let z_s = nullspace_basis(&jc_s, Some(&z))?;
        Ok(weighted_left_inverse(&z_s, &robot::mass_matrix_from(model, kin))?.0)
    };
    let z_sharp_dot = (sample(&tick.motion.plus, trocar.p + trocar.v * eps)?
        - sample(&tick.motion.minus, trocar.p - trocar.v * eps)?)
        / (2.0 * eps);
    let mut j_e_dot = Mat::zeros(n, n);
    j_e_dot.rows_mut(0, k).copy_from(&cons.jac_dot);
    j_e_dot.rows_mut(k, n - k).copy_from(&z_sharp_dot);

    let mobility_c = jc * &tick.m_inv * jc.transpose();
    let lambda_c = numerics::spd_inverse(&mobility_c)?;
    let mut lambda_e = Mat::zeros(n, n);
    lambda_e.view_mut((0, 0), (k, k)).copy_from(&lambda_c);
    lambda_e
        .view_mut((k, k), (n - k, n - k))
        .copy_from(&lambda_n);
    let h_e = &lambda_e * (&j_e * &tick.m_inv * h - &j_e_dot * &state.qdot);

    let goal = constraint_goal(settings.mode, reference, trocar, model.l_tool);
    let (kcp, kcd) = gains.constraint(k);
    let x_err = &cons.x - &goal.0;
    let xdot_err = &cons.xdot - &goal.1;
    let f_c = &lambda_c * &goal.2 - kcd * xdot_err - kcp * x_err;

    // Tip task restricted to the null-space motion.
    let lambda_n_inv = numerics::spd_inverse(&lambda_n)?;
    let j_z = &tick.j * &z;
    let (lambda_t, damped) = invert_mobility(&(&j_z * &lambda_n_inv * j_z.transpose()))?;
    let f_f = free_space_force(
        &lambda_t,
        &Vector::zeros(3),
        reference,
        &tick.x,
        &tick.xdot,
        gains,
    );
    let tau_0 = posture_torque(state, q_init, gains, settings);
    let n_bar =
        Mat::identity(n, n) - tick.j.transpose() * &lambda_t * &j_z * &lambda_n_inv * z.transpose();
    let f_n = z.transpose() * (tick.j.transpose() * v3(&f_f) + n_bar * &tau_0);

    let mut f_e = Vector::zeros(n);
    f_e.rows_mut(0, k).copy_from(&f_c);
    f_e.rows_mut(k, n - k).copy_from(&f_n);
    let tau_model = j_e.transpose() * (f_e + h_e);
    let p = numerics::orth_projector(jc)?;
    let tau_parallel = &p * &tau_model;
    let tau_perp = &tau_model - &tau_parallel;
    let target = mobility_c * f_c - &cons.jac_dot * &state.qdot;
    let (tip_error, _) = tick.tip_errors(reference);
    let compensation = compensation_torque(&tick, tau_ext_hat, settings.compensation)?;
    let out = ControllerOutput {
        tau: tau_model + &compensation,
        tau_parallel,
        tau_perp,
        tau_0,
        tau_ext_hat: compensation,
        diagnostics: Diagnostics {
            x_c: cons.x.clone(),
            xdot_c: cons.xdot.clone(),
            tip_error,
            f_f,
            jc: jc.clone(),
            constraint_target: target,
            damped,
        },
    };
    Ok((out, z))
}

/// Udwadia-Kalaba decomposition around the operational-space PD+ torque.
#[allow(clippy::too_many_arguments)]
pub fn uk_torque(
    model: &RobotModel,
    state: &JointState,
    trocar: &TrocarState,
    reference: &TaskReference,
    gains: &GainSet,
    settings: &ControlSettings,
    q_init: &Vector,
    tau_ext_hat: &Vector,
) -> Result<ControllerOutput> {
    let tick = TickTerms::new(model, state, trocar, settings.mode)?;
    let n = tick.dof();
    let cons = &tick.constraint;
    let k = cons.dim();
    let jc = &cons.jac;
    let m = &tick.dynamics.m;
    let h = &tick.dynamics.h;
    numerics::check_full_row_rank(jc, CONSTRAINT_RANK_TOLERANCE)?;

    let tau_0 = posture_torque(state, q_init, gains, settings);
    let (tau_sharp, f_f, damped) = operational_space_torque(&tick, reference, gains, &tau_0)?;
    let q_free = &tau_sharp - h;

    let goal = constraint_goal(settings.mode, reference, trocar, model.l_tool);
    let (kcp, kcd) = gains.constraint(k);
    let lambda_c = numerics::spd_inverse(&(jc * &tick.m_inv * jc.transpose()))?;
    let b_ic = &lambda_c * &goal.2 - kcd * (&cons.xdot - &goal.1) - kcp * (&cons.x - &goal.0);

    let m_half = numerics::matrix_sqrt(m)?;
    let m_inv_half = numerics::matrix_inv_sqrt(m)?;
    let pi = jc * &m_inv_half;
    let pi_pinv = numerics::pinv(&pi, PinvOptions::default())?;
    let q_ic = &m_half * &pi_pinv * (&b_ic - jc * &tick.m_inv * &q_free);
    let tau_nic = jc.transpose() * &b_ic;
    let q_nic = &m_half * (Mat::identity(n, n) - &pi_pinv * &pi) * &m_inv_half * tau_nic;

    let tau_model = &q_free + &q_ic + &q_nic + h;
    let p = numerics::orth_projector(jc)?;
    let tau_parallel = &p * &tau_model;
    let tau_perp = &tau_model - &tau_parallel;
    let (tip_error, _) = tick.tip_errors(reference);
    let compensation = compensation_torque(&tick, tau_ext_hat, settings.compensation)?;
    Ok(ControllerOutput {
        tau: tau_model + &compensation,
        tau_parallel,
        tau_perp,
        tau_0,
        tau_ext_hat: compensation,
        diagnostics: Diagnostics {
            x_c: cons.x.clone(),
            xdot_c: cons.xdot.clone(),
            tip_error,
            f_f,
            jc: jc.clone(),
            constraint_target: b_ic,
            damped,
        },
    })
}

/// Generalized-momentum observer. `residual` converges to the external joint
/// torque; the compensation term is its negation.
#[derive(Clone, Debug, PartialEq)]
pub struct ObserverState {
    pub accumulator: Vector,
    pub residual: Vector,
    /// `C^T qdot - g` at the last state seen, integrated on the next step.
    drift: Vector,
}

fn momentum_drift(model: &RobotModel, state: &JointState) -> (Mat, Vector) {
    // C^T qdot = Mdot qdot - C qdot
    let motion = MotionKinematics::new(model, state);
    let terms = robot::dynamics_terms_from(model, &motion.now, &state.qdot);
    let m_dot = (robot::mass_matrix_from(model, &motion.plus)
        - robot::mass_matrix_from(model, &motion.minus))
        / (2.0 * motion.eps);
    let drift = m_dot * &state.qdot - &terms.c - &terms.g;
    (terms.m, drift)
}

impl ObserverState {
    pub fn reset(model: &RobotModel, state: &JointState) -> Self {
        let (m, drift) = momentum_drift(model, state);
        ObserverState {
            accumulator: m * &state.qdot,
            residual: Vector::zeros(state.q.len()),
            drift,
        }
    }

    pub fn tau_ext_hat(&self) -> Vector {
        -&self.residual
    }
}

/// Advances the observer to `state`, reached after applying `tau_applied`
/// for `dt` from the previously observed state.
pub fn observer_step(
    obs: &ObserverState,
    model: &RobotModel,
    state: &JointState,
    tau_applied: &Vector,
    gains: &[f64],
    dt: f64,
) -> ObserverState {
    let accumulator = &obs.accumulator + (tau_applied + &obs.drift + &obs.residual) * dt;
    let (m, drift) = momentum_drift(model, state);
    let momentum_error = m * &state.qdot - &accumulator;
    let residual = Vector::from_fn(gains.len(), |i, _| gains[i] * momentum_error[i]);
    ObserverState {
        accumulator,
        residual,
        drift,
    }
}

/// One controller instance per episode, carrying the Z-basis between ticks.
#[derive(Clone, Debug)]
pub struct Controller {
    pub kind: ControllerKind,
    pub settings: ControlSettings,
    pub gains: GainSet,
    pub q_init: Vector,
    z_basis: Option<Mat>,
}

impl Controller {
    pub fn new(
        kind: ControllerKind,
        settings: ControlSettings,
        gains: GainSet,
        q_init: Vector,
    ) -> Self {
        Controller {
            kind,
            settings,
            gains,
            q_init,
            z_basis: None,
        }
    }

    pub fn compute(
        &mut self,
        model: &RobotModel,
        state: &JointState,
        trocar: &TrocarState,
        reference: &TaskReference,
        tau_ext_hat: &Vector,
    ) -> Result<ControllerOutput> {
        let (g, s, q0) = (&self.gains, &self.settings, &self.q_init);
        match self.kind {
            ControllerKind::PApproach => {
                p_approach_torque(model, state, trocar, reference, g, s, q0, tau_ext_hat)
            }
            ControllerKind::Uk => uk_torque(model, state, trocar, reference, g, s, q0, tau_ext_hat),
            ControllerKind::ZApproach => {
                let (out, z) = z_approach_torque(
                    model,
                    state,
                    trocar,
                    reference,
                    g,
                    s,
                    q0,
                    tau_ext_hat,
                    self.z_basis.as_ref(),
                )?;
                self.z_basis = Some(z);
                Ok(out)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> RobotModel {
        RobotModel::fr3_standin()
    }

    fn random_state(rng: &mut ChaCha8Rng, model: &RobotModel, speed: f64) -> JointState {
        let q = Vector::from_fn(7, |i, _| model.q_home[i] + rng.gen_range(-0.3..0.3));
        let qdot = Vector::from_fn(7, |_, _| rng.gen_range(-speed..speed));
        JointState::new(q, qdot)
    }

    /// Trocar on the tool at the given fraction, so the residual starts at zero
    /// in the 2D formulation.
    fn trocar_on_tool(model: &RobotModel, q: &Vector, alpha: f64) -> TrocarState {
        let kin = model.kinematics(q);
        TrocarState::fixed(rcm::place_trocar(&kin.reference.p, &kin.tip.p, alpha).unwrap())
    }

    fn zeros() -> Vector {
        Vector::zeros(7)
    }

    #[test]
    fn gain_rule() {
        let g = GainSet::from_proportional(
            [1000.0, 400.0, 0.0],
            [1500.0; 3],
            vec![5.0; 7],
            vec![50.0; 7],
        );
        assert_eq!(g.k_fd, [2.0 * 1000f64.sqrt(), 40.0, 0.0]);
        assert!(g
            .k_nd
            .iter()
            .all(|&d| (d - 2.0 * 5f64.sqrt()).abs() < 1e-15));
        assert!(g.validate(7).is_ok());
        let mut bad = g.clone();
        bad.k_np[3] = -1.0;
        match bad.validate(7) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "gains.k_np[3]"),
            other => panic!("{other:?}"),
        }
        assert!(g.validate(6).is_err());
    }

    #[test]
    fn free_space_force_cases() {
        let gains = GainSet::defaults(7);
        let lambda = diag(&[2.0, 3.0, 4.0]);
        let h_f = Vector::from_vec(vec![0.1, -0.2, 0.3]);
        let x = Vector3::new(0.3, 0.1, 0.4);
        let f = free_space_force(
            &lambda,
            &h_f,
            &TaskReference::hold(x),
            &x,
            &Vector3::zeros(),
            &gains,
        );
        assert_eq!(f, to3(&h_f));

        let mut reference = TaskReference::hold(x + Vector3::new(0.01, 0.0, 0.0));
        let f = free_space_force(
            &lambda,
            &Vector::zeros(3),
            &reference,
            &x,
            &Vector3::zeros(),
            &gains,
        );
        assert!((f - Vector3::new(10.0, 0.0, 0.0)).norm() < 1e-12);

        reference.xddot_d = Vector3::new(0.0, 1.0, 0.0);
        reference.x_d = x;
        let f = free_space_force(
            &lambda,
            &Vector::zeros(3),
            &reference,
            &x,
            &Vector3::zeros(),
            &gains,
        );
        assert!((f - Vector3::new(0.0, 3.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn nullspace_torque_cases() {
        let gains = GainSet::defaults(7);
        let q0 = model().q_home;
        assert_eq!(nullspace_torque(&q0, &zeros(), &q0, &gains), zeros());
        let mut q = q0.clone();
        q[1] += 0.1;
        let tau = nullspace_torque(&q, &zeros(), &q0, &gains);
        assert!((tau[1] + 0.5).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let dq = Vector::from_fn(7, |_, _| rng.gen_range(-1.0..1.0));
            let tau = nullspace_torque(&(&q0 + &dq), &zeros(), &q0, &gains);
            assert!(tau.iter().zip(dq.iter()).all(|(t, d)| t * d <= 0.0));
        }
    }

    #[test]
    fn p_approach_reduces_to_operational_space_control() {
        let model = model();
        let gains = GainSet::defaults(7);
        let settings = ControlSettings::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let state = random_state(&mut rng, &model, 0.5);
            let tick = TickTerms::unconstrained(&model, &state).unwrap();
            let reference = TaskReference {
                x_d: tick.x + Vector3::new(0.01, -0.02, 0.005),
                xdot_d: Vector3::new(0.01, 0.0, -0.02),
                xddot_d: Vector3::new(0.1, 0.2, -0.1),
            };
            let goal = (Vector::zeros(0), Vector::zeros(0), Vector::zeros(0));
            let q0 = &model.q_home;
            let out = p_approach_from_terms(
                &tick,
                &state,
                &goal,
                &reference,
                &gains,
                &settings,
                q0,
                &zeros(),
            )
            .unwrap();
            let tau_0 = nullspace_torque(&state.q, &state.qdot, q0, &gains);
            let (expected, _, _) =
                operational_space_torque(&tick, &reference, &gains, &tau_0).unwrap();
            assert!(
                (&out.tau - &expected).amax() < 1e-10,
                "{}",
                (&out.tau - &expected).amax()
            );
            assert_eq!(out.tau_perp.amax(), 0.0);
        }
    }

    #[test]
    fn p_approach_composition_and_annihilation() {
        let model = model();
        let gains = GainSet::defaults(7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for mode in [RcmMode::TwoD, RcmMode::ThreeD] {
            for inverse in [
                GeneralizedInverse::DynamicallyConsistent,
                GeneralizedInverse::MoorePenrose,
            ] {
                let settings = ControlSettings {
                    mode,
                    inverse,
                    ..Default::default()
                };
                for _ in 0..20 {
                    let state = random_state(&mut rng, &model, 0.3);
                    let trocar = trocar_on_tool(&model, &model.q_home, 0.5);
                    let tip = model.kinematics(&state.q).tip.p;
                    let reference = TaskReference::hold(tip + Vector3::new(0.0, 0.01, 0.0));
                    let hat = Vector::from_fn(7, |_, _| rng.gen_range(-1.0..1.0));
                    let out = p_approach_torque(
                        &model,
                        &state,
                        &trocar,
                        &reference,
                        &gains,
                        &settings,
                        &model.q_home,
                        &hat,
                    )
                    .unwrap();
                    let p = numerics::orth_projector(&out.diagnostics.jc).unwrap();
                    assert!((&p * &out.tau_perp).amax() < 1e-9);
                    assert!((&out.tau - (&out.tau_parallel + &out.tau_perp + &hat)).amax() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn p_approach_commands_constraint_acceleration() {
        let model = model();
        let gains = GainSet::defaults(7);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for mode in [RcmMode::TwoD, RcmMode::ThreeD] {
            let settings = ControlSettings {
                mode,
                ..Default::default()
            };
            for _ in 0..20 {
                let state = random_state(&mut rng, &model, 0.3);
                let mut trocar = trocar_on_tool(&model, &model.q_home, 0.3);
                trocar.v = Vector3::new(0.0, 0.0, 0.02);
                trocar.a = Vector3::new(0.0, 0.0, -0.1);
                let tip = model.kinematics(&state.q).tip.p;
                let reference = TaskReference::hold(tip);
                let out = p_approach_torque(
                    &model,
                    &state,
                    &trocar,
                    &reference,
                    &gains,
                    &settings,
                    &model.q_home,
                    &zeros(),
                )
                .unwrap();
                let qdd =
                    robot::forward_dynamics(&model, &state.q, &state.qdot, &out.tau, &zeros())
                        .unwrap();
                let err = (&out.diagnostics.jc * qdd - &out.diagnostics.constraint_target).amax();
                assert!(err < 1e-6, "{err}");
            }
        }
    }

    #[test]
    fn uk_satisfies_its_constraint_target() {
        let model = model();
        let gains = GainSet::defaults(7);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for mode in [RcmMode::ThreeD, RcmMode::TwoD] {
            let settings = ControlSettings {
                mode,
                ..Default::default()
            };
            for _ in 0..20 {
                let state = random_state(&mut rng, &model, 0.3);
                let trocar = trocar_on_tool(&model, &model.q_home, 0.5);
                let reference = TaskReference::hold(model.kinematics(&state.q).tip.p);
                let out = uk_torque(
                    &model,
                    &state,
                    &trocar,
                    &reference,
                    &gains,
                    &settings,
                    &model.q_home,
                    &zeros(),
                )
                .unwrap();
                let qdd =
                    robot::forward_dynamics(&model, &state.q, &state.qdot, &out.tau, &zeros())
                        .unwrap();
                let err = (&out.diagnostics.jc * qdd - &out.diagnostics.constraint_target).amax();
                assert!(err < 1e-6, "{err}");
            }
        }
    }

    #[test]
    fn uk_zero_feedback_case() {
        // With the residual and its rate at zero, the non-ideal term vanishes
        // and the ideal term only cancels the constraint acceleration of Q.
        let model = model();
        let gains = GainSet::defaults(7);
        let q = model.q_home.clone();
        let state = JointState::at_rest(q.clone());
        let trocar = trocar_on_tool(&model, &q, 0.5);
        let settings = ControlSettings::default();
        let tip = model.kinematics(&q).tip.p;
        let reference = TaskReference::hold(tip + Vector3::new(0.01, 0.0, 0.0));
        let out = uk_torque(
            &model,
            &state,
            &trocar,
            &reference,
            &gains,
            &settings,
            &q,
            &zeros(),
        )
        .unwrap();
        let tick = TickTerms::new(&model, &state, &trocar, settings.mode).unwrap();
        assert!(tick.constraint.x.amax() < 1e-12);
        let (tau_sharp, _, _) =
            operational_space_torque(&tick, &reference, &gains, &zeros()).unwrap();
        let jc = &tick.constraint.jac;
        let q_free = &tau_sharp - &tick.dynamics.h;
        let m_half = numerics::matrix_sqrt(&tick.dynamics.m).unwrap();
        let pi = jc * numerics::matrix_inv_sqrt(&tick.dynamics.m).unwrap();
        let pi_pinv = numerics::pinv(&pi, PinvOptions::default()).unwrap();
        let q_ic = -(&m_half * pi_pinv * jc * &tick.m_inv * &q_free);
        let expected = q_free + q_ic + &tick.dynamics.h;
        assert!((out.tau - expected).amax() < 1e-8);
    }

    #[test]
    fn z_basis_spans_the_null_space() {
        let model = model();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let state = random_state(&mut rng, &model, 0.3);
            let trocar = trocar_on_tool(&model, &model.q_home, 0.5);
            let cons = rcm::constraint_state(&model, &state, &trocar, RcmMode::TwoD);
            let z = nullspace_basis(&cons.jac, None).unwrap();
            assert!((&cons.jac * &z).amax() < 1e-9);
            assert!((z.transpose() * &z - Mat::identity(5, 5)).amax() < 1e-9);

            // continuation from a perturbed basis keeps orientation
            let z2 = nullspace_basis(
                &cons.jac,
                Some(&(&z * 1.0 + Mat::from_fn(7, 5, |_, _| 1e-3))),
            )
            .unwrap();
            assert!((&cons.jac * &z2).amax() < 1e-9);
            assert!((&z2 - &z).amax() < 1e-2);
        }
    }

    #[test]
    fn z_approach_equilibrium_and_acceleration() {
        let model = model();
        let gains = GainSet::defaults(7);
        let settings = ControlSettings::default();
        let q = model.q_home.clone();
        let state = JointState::at_rest(q.clone());
        let trocar = trocar_on_tool(&model, &q, 0.5);
        let reference = TaskReference::hold(model.kinematics(&q).tip.p);
        let (out, z) = z_approach_torque(
            &model,
            &state,
            &trocar,
            &reference,
            &gains,
            &settings,
            &q,
            &zeros(),
            None,
        )
        .unwrap();
        let g = robot::bias_terms(&model, &q, &zeros()).g;
        assert!((&out.tau - g).amax() < 1e-8);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut z_prev = z;
        for _ in 0..20 {
            let state = random_state(&mut rng, &model, 0.3);
            let tip = model.kinematics(&state.q).tip.p;
            let reference = TaskReference::hold(tip + Vector3::new(0.0, 0.0, 0.01));
            let (out, z) = z_approach_torque(
                &model,
                &state,
                &trocar,
                &reference,
                &gains,
                &settings,
                &q,
                &zeros(),
                Some(&z_prev),
            )
            .unwrap();
            let qdd =
                robot::forward_dynamics(&model, &state.q, &state.qdot, &out.tau, &zeros()).unwrap();
            let err = (&out.diagnostics.jc * qdd - &out.diagnostics.constraint_target).amax();
            assert!(err < 1e-6, "{err}");
            z_prev = z;
        }
    }

    #[test]
    fn observer_cases() {
        let model = model();
        let dt = 1e-3;
        let gains = vec![50.0; 7];
        let state0 = JointState::at_rest(model.q_home.clone());
        let g = robot::bias_terms(&model, &state0.q, &zeros()).g;

        // Gravity compensated, no disturbance: estimate stays at zero.
        let mut obs = ObserverState::reset(&model, &state0);
        let mut state = state0.clone();
        for _ in 0..200 {
            let qdd = robot::forward_dynamics(&model, &state.q, &state.qdot, &g, &zeros()).unwrap();
            state.qdot += qdd * dt;
            state.q += &state.qdot * dt;
            obs = observer_step(&obs, &model, &state, &g, &gains, dt);
        }
        assert!(obs.tau_ext_hat().amax() < 1e-6);

        // Constant disturbance on joint 4.
        let mut ext = zeros();
        ext[3] = 2.0;
        let run = |gains: &[f64], ticks: usize| {
            let mut obs = ObserverState::reset(&model, &state0);
            let mut state = state0.clone();
            let mut history = Vec::new();
            for _ in 0..ticks {
                let tau =
                    robot::bias_terms(&model, &state.q, &zeros()).g - state.qdot.clone() * 5.0;
                let qdd =
                    robot::forward_dynamics(&model, &state.q, &state.qdot, &tau, &ext).unwrap();
                state.qdot += qdd * dt;
                state.q += &state.qdot * dt;
                obs = observer_step(&obs, &model, &state, &tau, gains, dt);
                history.push(obs.tau_ext_hat()[3]);
            }
            history
        };
        let history = run(&gains, 200);
        assert!((history[199] + 2.0).abs() < 0.1, "{}", history[199]);
        // first-order response: at one time constant the error is e^-1 of 2
        let at_tau = history[19] + 2.0;
        assert!(
            (at_tau - 2.0 * (-1f64).exp()).abs() < 0.1 * 2.0 * (-1f64).exp(),
            "{at_tau}"
        );

        let frozen = run(&[0.0; 7], 50);
        assert!(frozen.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn restricted_compensation_drops_only_motion_free_torque() {
        let model = model();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let state = random_state(&mut rng, &model, 0.3);
            let trocar = trocar_on_tool(&model, &model.q_home, 0.5);
            let tick = TickTerms::new(&model, &state, &trocar, RcmMode::TwoD).unwrap();
            let hat = Vector::from_fn(7, |_, _| rng.gen_range(-2.0..2.0));
            let full = compensation_torque(&tick, &hat, CompensationScope::Full).unwrap();
            assert_eq!(full, hat);
            let kept =
                compensation_torque(&tick, &hat, CompensationScope::TaskAndConstraint).unwrap();
            let dropped = &hat - &kept;
            assert!((&tick.j * &tick.m_inv * &dropped).norm() < 1e-9);
            assert!((&tick.constraint.jac * &tick.m_inv * &dropped).norm() < 1e-9);
            // Applying it twice changes nothing.
            let again =
                compensation_torque(&tick, &kept, CompensationScope::TaskAndConstraint).unwrap();
            assert!((again - &kept).norm() < 1e-9 * (1.0 + kept.norm()));
        }
    }
}
