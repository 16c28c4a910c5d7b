//! Projection operators for dynamics under `k` independent constraints.
//!
//! With `P = I - Jc^+ Jc` the free-motion projector, the constrained
//! joint-space dynamics read `M_f qddot = P (tau + tau_ext - h) + u` with
//! `M_f = P M + (I - P)` and `u = (I - P) qddot = Jc^+ (xddot_c - b_c)`.
//! For a scleronomic constraint `u` reduces to `Pdot qdot`.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Mat, PinvOptions, Vector};

/// Damping used when the task inertia is close to singular.
pub const TASK_INERTIA_DAMPING: f64 = 1e-6;
/// Below this `sigma_min / sigma_max` the task inertia is inverted with damping.
pub const TASK_INERTIA_CONDITION: f64 = 1e-9;

/// Which generalized inverse `P#` defines `tau_par = P# P tau_f`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneralizedInverse {
    /// `P# P = I - Jc^T Lambda_c Jc M^-1`: free torques produce no constraint
    /// acceleration.
    #[default]
    DynamicallyConsistent,
    /// `P# = P`.
    MoorePenrose,
}

#[derive(Clone, Debug)]
pub struct ProjectionState {
    pub p: Mat,
    pub p_dot: Mat,
    pub m_f: Mat,
    pub lambda_c: Mat,
    pub jc_pinv: Mat,
    pub m_inv: Mat,
}

impl ProjectionState {
    pub fn dof(&self) -> usize {
        self.p.nrows()
    }

    /// `P# P` for the chosen generalized inverse.
    pub fn free_motion_selector(&self, jc: &Mat, inverse: GeneralizedInverse) -> Mat {
        match inverse {
            GeneralizedInverse::MoorePenrose => self.p.clone(),
            GeneralizedInverse::DynamicallyConsistent => {
                let n = self.dof();
                Mat::identity(n, n) - jc.transpose() * &self.lambda_c * jc * &self.m_inv
            }
        }
    }
}

pub fn projection_state(m: &Mat, jc: &Mat, jc_dot: &Mat) -> Result<ProjectionState> {
    let m_inv = numerics::spd_inverse(m)?;
    projection_state_with_inverse(m, m_inv, jc, jc_dot)
}

pub fn projection_state_with_inverse(
    m: &Mat,
    m_inv: Mat,
    jc: &Mat,
    jc_dot: &Mat,
) -> Result<ProjectionState> {
    let n = m.nrows();
    let (p, jc_pinv) = numerics::orth_projector_with(jc, PinvOptions::default())?;
    let p_dot = -(&jc_pinv * jc_dot);
    let m_f = &p * m + Mat::identity(n, n) - &p;
    let lambda_c = if jc.nrows() == 0 {
        Mat::zeros(0, 0)
    } else {
        numerics::spd_inverse(&(jc * &m_inv * jc.transpose()))?
    };
    Ok(ProjectionState {
        p,
        p_dot,
        m_f,
        lambda_c,
        jc_pinv,
        m_inv,
    })
}

#[derive(Clone, Debug)]
pub struct TaskSpaceTerms {
    pub lambda_f: Mat,
    pub h_f: Vector,
    /// Dynamically consistent inverse transpose `J^{#T}`.
    pub j_sharp_t: Mat,
    pub n_bar: Mat,
    /// True when `Lambda_f` came from the damped inversion.
    pub damped: bool,
}

/// Inverts a symmetric positive semi-definite task-space mobility matrix,
/// falling back to a damped inverse close to singularity.
pub fn invert_mobility(mobility: &Mat) -> Result<(Mat, bool)> {
    if mobility.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularTaskInertia);
    }
    let mut sym = mobility.clone();
    numerics::symmetrize(&mut sym);
    let eig = sym.clone().symmetric_eigen();
    let max = eig.eigenvalues.amax();
    if max <= 0.0 {
        return Err(Error::SingularTaskInertia);
    }
    let min = eig.eigenvalues.min();
    if min / max > TASK_INERTIA_CONDITION {
        let mut inv = numerics::spd_inverse(&sym).map_err(|_| Error::SingularTaskInertia)?;
        numerics::symmetrize(&mut inv);
        return Ok((inv, false));
    }
    debug!(
        "task inertia near singular (ratio {:.3e}); using damped inverse",
        min / max
    );
    let mut inv = numerics::pinv(&sym, PinvOptions::damped(TASK_INERTIA_DAMPING))?;
    numerics::symmetrize(&mut inv);
    Ok((inv, true))
}

/// Task-space inertia, bias, dynamically consistent inverse and null-space
/// projector of task Jacobian `j` under the constraint projection.
///
/// `constraint_feedforward` is `u = Jc^+ (xddot_c - b_c)`; passing
/// `Pdot qdot` reproduces the scleronomic bias
/// `Lambda_f (J M_f^-1 P h - (Jdot + J M_f^-1 Pdot) qdot)`.
pub fn task_space_terms(
    m_f: &Mat,
    p: &Mat,
    j: &Mat,
    j_dot_qdot: &Vector,
    h: &Vector,
    constraint_feedforward: &Vector,
) -> Result<TaskSpaceTerms> {
    let n = p.nrows();
    let lu = m_f.clone().lu();
    let mf_inv_p = lu.solve(p).ok_or(Error::SingularTaskInertia)?;
    let mf_inv_u = lu
        .solve(constraint_feedforward)
        .ok_or(Error::SingularTaskInertia)?;
    let j_mf_p = j * &mf_inv_p;
    let (lambda_f, damped) = invert_mobility(&(&j_mf_p * j.transpose()))?;
    let j_sharp_t = &lambda_f * &j_mf_p;
    let n_bar = Mat::identity(n, n) - j.transpose() * &j_sharp_t;
    let h_f = &lambda_f * (&j_mf_p * h - j_dot_qdot - j * mf_inv_u);
    Ok(TaskSpaceTerms {
        lambda_f,
        h_f,
        j_sharp_t,
        n_bar,
        damped,
    })
}

/// `qddot = Jc^+ (xddot_c - b_c) + P M^-1 (tau + tau_ext - h)`.
#[allow(clippy::too_many_arguments)]
pub fn gauss_acceleration_split(
    m: &Mat,
    jc: &Mat,
    xddot_c: &Vector,
    b_c: &Vector,
    tau: &Vector,
    tau_ext: &Vector,
    h: &Vector,
    p: &Mat,
) -> Result<Vector> {
    let jc_pinv = numerics::pinv(jc, PinvOptions::default())?;
    let free = m
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite)?
        .solve(&(tau + tau_ext - h));
    Ok(jc_pinv * (xddot_c - b_c) + p * free)
}
