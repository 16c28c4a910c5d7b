//! Remote-center-of-motion kinematics, expressed in the tool-reference frame.
//!
//! The residual is `x = S (p_r - p_c)` where `S = R_r^T` for the 3D
//! formulation and `S = B_r^T` (first two columns of `R_r`) for the planar
//! one. The first two components are the lateral offset of the trocar from
//! the tool axis; the third 3D component is the signed axial coordinate.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{skew, Mat, Vector};
use crate::robot::{Frame, JointState, Kinematics, MotionKinematics, Pose, RobotModel};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrocarState {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub a: Vector3<f64>,
}

impl TrocarState {
    pub fn fixed(p: Vector3<f64>) -> Self {
        Self {
            p,
            v: Vector3::zeros(),
            a: Vector3::zeros(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RcmMode {
    ThreeD,
    TwoD,
}

impl RcmMode {
    pub fn dim(self) -> usize {
        match self {
            RcmMode::ThreeD => 3,
            RcmMode::TwoD => 2,
        }
    }

    /// `S` in `x = S p_cr`: the leading `k` rows of `R^T`.
    pub fn selector(self, r: &Matrix3<f64>) -> Mat {
        let k = self.dim();
        Mat::from_fn(k, 3, |i, j| r[(j, i)])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RcmGeometry {
    pub p_cr: Vector3<f64>,
    pub p_rt: Vector3<f64>,
    pub p_rc: Vector3<f64>,
    /// First two columns of `R_r`.
    pub basis: nalgebra::Matrix3x2<f64>,
}

impl RcmGeometry {
    pub fn new(reference: &Pose, tip: &Pose, p_c: &Vector3<f64>) -> Self {
        let p_cr = reference.p - p_c;
        RcmGeometry {
            p_cr,
            p_rt: tip.p - reference.p,
            p_rc: -p_cr,
            basis: reference.r.fixed_columns::<2>(0).into_owned(),
        }
    }
}

/// Residual, Jacobian and their time derivatives at one instant.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintState {
    pub x: Vector,
    pub jac: Mat,
    pub xdot: Vector,
    /// Acceleration bias: `xddot = jac * qddot + bias`.
    pub bias: Vector,
    pub jac_dot: Mat,
}

impl ConstraintState {
    pub fn dim(&self) -> usize {
        self.x.len()
    }

    /// A constraint with no rows, for the unconstrained reductions.
    pub fn empty(n: usize) -> Self {
        ConstraintState {
            x: Vector::zeros(0),
            jac: Mat::zeros(0, n),
            xdot: Vector::zeros(0),
            bias: Vector::zeros(0),
            jac_dot: Mat::zeros(0, n),
        }
    }
}

/// Trocar placement along the initial tool segment.
pub fn place_trocar(p_r0: &Vector3<f64>, p_t0: &Vector3<f64>, alpha: f64) -> Result<Vector3<f64>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidAlpha(alpha));
    }
    Ok(p_r0 + (p_t0 - p_r0) * alpha)
}

pub fn residual(reference: &Pose, p_c: &Vector3<f64>, mode: RcmMode) -> Vector {
    mode.selector(&reference.r) * Vector::from_column_slice((reference.p - p_c).as_slice())
}

/// `S (J_p,r - [p_rc]x J_w,r)`, the configuration Jacobian of the residual.
pub fn residual_jacobian(reference: &Pose, j_r: &Mat, p_c: &Vector3<f64>, mode: RcmMode) -> Mat {
    let p_rc = p_c - reference.p;
    let s = skew(&p_rc);
    let n = j_r.ncols();
    let mut j_pc = Mat::zeros(3, n);
    for col in 0..n {
        let w = Vector3::new(j_r[(3, col)], j_r[(4, col)], j_r[(5, col)]);
        let lin = Vector3::new(j_r[(0, col)], j_r[(1, col)], j_r[(2, col)]) - s * w;
        j_pc.set_column(col, &lin);
    }
    mode.selector(&reference.r) * j_pc
}

pub fn residual_rate(
    reference: &Pose,
    j_r: &Mat,
    qdot: &Vector,
    trocar: &TrocarState,
    mode: RcmMode,
) -> Vector {
    let jc = residual_jacobian(reference, j_r, &trocar.p, mode);
    jc * qdot - mode.selector(&reference.r) * Vector::from_column_slice(trocar.v.as_slice())
}

fn jacobian_at(kin: &Kinematics, p_c: &Vector3<f64>, mode: RcmMode) -> Mat {
    residual_jacobian(&kin.reference, &kin.jacobian(Frame::Reference), p_c, mode)
}

/// Full constraint state, differencing `J_c` and `S` jointly in configuration
/// and trocar position so the bias carries every second-order term.
pub fn constraint_state_from(
    motion: &MotionKinematics,
    state: &JointState,
    trocar: &TrocarState,
    mode: RcmMode,
) -> ConstraintState {
    let eps = motion.eps;
    let reference = motion.now.reference;
    let jac = jacobian_at(&motion.now, &trocar.p, mode);
    let sel = mode.selector(&reference.r);
    let pc_v = Vector::from_column_slice(trocar.v.as_slice());
    let pc_a = Vector::from_column_slice(trocar.a.as_slice());

    let x = &sel * Vector::from_column_slice((reference.p - trocar.p).as_slice());
    let xdot = &jac * &state.qdot - &sel * &pc_v;

    let jac_plus = jacobian_at(&motion.plus, &(trocar.p + trocar.v * eps), mode);
    let jac_minus = jacobian_at(&motion.minus, &(trocar.p - trocar.v * eps), mode);
    let jac_dot = (jac_plus - jac_minus) / (2.0 * eps);
    let sel_dot = (mode.selector(&motion.plus.reference.r)
        - mode.selector(&motion.minus.reference.r))
        / (2.0 * eps);
    let bias = &jac_dot * &state.qdot - sel_dot * &pc_v - &sel * pc_a;

    ConstraintState {
        x,
        jac,
        xdot,
        bias,
        jac_dot,
    }
}

pub fn constraint_state(
    model: &RobotModel,
    state: &JointState,
    trocar: &TrocarState,
    mode: RcmMode,
) -> ConstraintState {
    constraint_state_from(&MotionKinematics::new(model, state), state, trocar, mode)
}

pub fn residual_bias(
    model: &RobotModel,
    state: &JointState,
    trocar: &TrocarState,
    mode: RcmMode,
) -> Vector {
    constraint_state(model, state, trocar, mode).bias
}

/// Closest point to the trocar on the tool line.
pub fn rcm_point(
    p_r: &Vector3<f64>,
    p_t: &Vector3<f64>,
    p_c: &Vector3<f64>,
    l_tool: f64,
) -> Result<Vector3<f64>> {
    let p_rt = p_t - p_r;
    let measured = p_rt.norm();
    if (measured - l_tool).abs() > 1e-6 {
        return Err(Error::InconsistentTool {
            measured,
            expected: l_tool,
        });
    }
    let p_rc = p_c - p_r;
    Ok(p_r + p_rt * (p_rt.dot(&p_rc) / (l_tool * l_tool)))
}

/// Desired residual for the 3D formulation: lateral components zero, axial
/// component equal to the insertion implied by the tip reference passing
/// through the trocar. Returns `(x_d, xdot_d, xddot_d)`.
pub fn insertion_goal(
    tip_ref: (&Vector3<f64>, &Vector3<f64>, &Vector3<f64>),
    trocar: &TrocarState,
    l_tool: f64,
) -> (Vector, Vector, Vector) {
    let (x, v, a) = tip_ref;
    let d = x - trocar.p;
    let dv = v - trocar.v;
    let da = a - trocar.a;
    let s = d.norm();
    let (s_dot, s_ddot) = if s > 1e-9 {
        let s_dot = d.dot(&dv) / s;
        (s_dot, (dv.dot(&dv) + d.dot(&da)) / s - s_dot * s_dot / s)
    } else {
        (0.0, 0.0)
    };
    (
        Vector::from_vec(vec![0.0, 0.0, s - l_tool]),
        Vector::from_vec(vec![0.0, 0.0, s_dot]),
        Vector::from_vec(vec![0.0, 0.0, s_ddot]),
    )
}
