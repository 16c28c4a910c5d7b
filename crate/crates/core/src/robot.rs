//! Serial-chain kinematics and rigid-body dynamics.
//!
//! Joints are revolute and described with modified (proximal) DH parameters:
//! `T_{i-1,i} = RotX(alpha) * TransX(a) * RotZ(theta) * TransZ(d)`, with the
//! joint rotating about the z-axis of its own frame. A fixed flange transform
//! follows the last joint and defines the tool-reference frame `r`; the tool
//! is a massless rigid extension of length `l_tool` along the flange z-axis,
//! ending at the tip frame `t`.
//!
//! Dynamics are evaluated in base-frame coordinates: recursive Newton-Euler
//! for bias and inverse dynamics, and a composite-rigid-body pass for `M`.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Mat, Vector};

/// Finite-difference step for `jacobian_dot`.
pub const JACOBIAN_DOT_STEP: f64 = 1e-6;

const DEFAULT_MODEL_JSON: &str = include_str!("../models/fr3_standin.json");

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DhParams {
    pub a: f64,
    pub d: f64,
    pub alpha: f64,
    pub theta_offset: f64,
}

impl DhParams {
    pub const IDENTITY: DhParams = DhParams {
        a: 0.0,
        d: 0.0,
        alpha: 0.0,
        theta_offset: 0.0,
    };

    /// Rotation and translation of this frame relative to its parent.
    pub fn transform(&self, q: f64) -> (Matrix3<f64>, Vector3<f64>) {
        let (sa, ca) = self.alpha.sin_cos();
        let (st, ct) = (q + self.theta_offset).sin_cos();
        let rot = Matrix3::new(ct, -st, 0.0, ca * st, ca * ct, -sa, sa * st, sa * ct, ca);
        let trans = Vector3::new(self.a, -sa * self.d, ca * self.d);
        (rot, trans)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkInertia {
    pub mass: f64,
    /// Center of mass in the link frame.
    pub com: [f64; 3],
    /// Rotational inertia about the center of mass, link-frame axes.
    pub inertia: [[f64; 3]; 3],
}

impl LinkInertia {
    pub fn com(&self) -> Vector3<f64> {
        Vector3::from(self.com)
    }

    pub fn inertia(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.inertia[i][j])
    }
}

/// On-disk layout of a robot model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    n: usize,
    joints: Vec<DhParams>,
    links: Vec<LinkInertia>,
    gravity: [f64; 3],
    l_tool: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    flange: Option<DhParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    q_home: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobotModel {
    pub name: String,
    pub joints: Vec<DhParams>,
    pub links: Vec<LinkInertia>,
    pub flange: DhParams,
    pub gravity: Vector3<f64>,
    pub l_tool: f64,
    pub q_home: Vector,
}

impl RobotModel {
    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    /// The shipped 7-DOF stand-in parameter set.
    pub fn fr3_standin() -> RobotModel {
        RobotModel::from_json_str(DEFAULT_MODEL_JSON).expect("bundled model is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RobotModel> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RobotModel::from_json_str(&text)
            .map_err(|e| Error::Model(format!("{}: {e}", path.display())))
    }

    pub fn from_json_str(text: &str) -> Result<RobotModel> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: ModelFile = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Model(format!("at `{path}`: {}", e.into_inner()))
        })?;
        RobotModel::from_file(file)
    }

    pub fn to_json_string(&self) -> String {
        let file = ModelFile {
            name: Some(self.name.clone()),
            n: self.dof(),
            joints: self.joints.clone(),
            links: self.links.clone(),
            gravity: self.gravity.into(),
            l_tool: self.l_tool,
            flange: Some(self.flange),
            q_home: Some(self.q_home.iter().copied().collect()),
        };
        serde_json::to_string_pretty(&file).expect("model serializes")
    }

    fn from_file(file: ModelFile) -> Result<RobotModel> {
        let n = file.n;
        if n == 0 {
            return Err(Error::Model("at `n`: must be positive".into()));
        }
        if file.joints.len() != n {
            return Err(Error::Model(format!(
                "at `joints`: expected {n} entries, found {}",
                file.joints.len()
            )));
        }
        if file.links.len() != n {
            return Err(Error::Model(format!(
                "at `links`: expected {n} entries, found {}",
                file.links.len()
            )));
        }
        for (i, link) in file.links.iter().enumerate() {
            if link.mass.is_nan() || link.mass <= 0.0 {
                return Err(Error::Model(format!(
                    "at `links[{i}].mass`: must be positive"
                )));
            }
            let inertia = link.inertia();
            let sym_err = (inertia - inertia.transpose()).amax();
            let eig = inertia.symmetric_eigen().eigenvalues;
            if sym_err > 1e-12 || eig.iter().any(|&l| l <= 0.0) {
                return Err(Error::Model(format!(
                    "at `links[{i}].inertia`: must be symmetric positive-definite"
                )));
            }
        }
        if file.l_tool.is_nan() || file.l_tool <= 0.0 {
            return Err(Error::Model("at `l_tool`: must be positive".into()));
        }
        let q_home = match file.q_home {
            Some(q) if q.len() != n => {
                return Err(Error::Model(format!(
                    "at `q_home`: expected {n} entries, found {}",
                    q.len()
                )))
            }
            Some(q) => Vector::from_vec(q),
            None => Vector::zeros(n),
        };
        Ok(RobotModel {
            name: file.name.unwrap_or_else(|| "unnamed".into()),
            joints: file.joints,
            links: file.links,
            flange: file.flange.unwrap_or(DhParams::IDENTITY),
            gravity: Vector3::from(file.gravity),
            l_tool: file.l_tool,
            q_home,
        })
    }

    pub fn with_gravity(mut self, gravity: Vector3<f64>) -> Self {
        self.gravity = gravity;
        self
    }

    pub fn kinematics(&self, q: &Vector) -> Kinematics {
        Kinematics::new(self, q)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointState {
    pub q: Vector,
    pub qdot: Vector,
}

impl JointState {
    pub fn new(q: Vector, qdot: Vector) -> Self {
        Self { q, qdot }
    }

    pub fn at_rest(q: Vector) -> Self {
        let n = q.len();
        Self {
            q,
            qdot: Vector::zeros(n),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qdot.iter()).all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub p: Vector3<f64>,
    pub r: Matrix3<f64>,
}

impl Pose {
    pub fn z_axis(&self) -> Vector3<f64> {
        self.r.column(2).into_owned()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Frame {
    /// Tool-reference frame `r` (the flange).
    Reference,
    /// Tool tip `t`, `l_tool` along the reference z-axis.
    Tip,
    /// Body frame of link `k` (1-based: link `k` is moved by joints `1..=k`).
    Link(usize),
}

/// All joint frames of the chain at one configuration.
#[derive(Clone, Debug)]
pub struct Kinematics {
    /// Base-frame rotation of each joint frame.
    pub rotations: Vec<Matrix3<f64>>,
    /// Base-frame origin of each joint frame (a point on the joint axis).
    pub origins: Vec<Vector3<f64>>,
    pub reference: Pose,
    pub tip: Pose,
}

impl Kinematics {
    pub fn new(model: &RobotModel, q: &Vector) -> Kinematics {
        let n = model.dof();
        assert_eq!(q.len(), n, "joint vector length must match the model");
        let mut rotations = Vec::with_capacity(n);
        let mut origins = Vec::with_capacity(n);
        let mut rot = Matrix3::identity();
        let mut pos = Vector3::zeros();
        for (i, joint) in model.joints.iter().enumerate() {
            let (r, t) = joint.transform(q[i]);
            pos += rot * t;
            rot *= r;
            rotations.push(rot);
            origins.push(pos);
        }
        let (rf, tf) = model.flange.transform(0.0);
        let reference = Pose {
            p: pos + rot * tf,
            r: rot * rf,
        };
        let tip = Pose {
            p: reference.p + reference.z_axis() * model.l_tool,
            r: reference.r,
        };
        Kinematics {
            rotations,
            origins,
            reference,
            tip,
        }
    }

    pub fn dof(&self) -> usize {
        self.origins.len()
    }

    pub fn axis(&self, joint: usize) -> Vector3<f64> {
        self.rotations[joint].column(2).into_owned()
    }

    pub fn pose(&self, frame: Frame) -> Pose {
        match frame {
            Frame::Reference => self.reference,
            Frame::Tip => self.tip,
            Frame::Link(k) => {
                assert!(k >= 1 && k <= self.dof(), "link index out of range");
                Pose {
                    p: self.origins[k - 1],
                    r: self.rotations[k - 1],
                }
            }
        }
    }

    /// Geometric Jacobian of a base-frame point rigidly attached to the body
    /// moved by the first `parents` joints. Rows 0..3 linear, 3..6 angular.
    pub fn point_jacobian(&self, parents: usize, point: &Vector3<f64>) -> Mat {
        let n = self.dof();
        let mut jac = Mat::zeros(6, n);
        for j in 0..parents.min(n) {
            let z = self.axis(j);
            let lin = z.cross(&(point - self.origins[j]));
            for r in 0..3 {
                jac[(r, j)] = lin[r];
                jac[(r + 3, j)] = z[r];
            }
        }
        jac
    }

    pub fn jacobian(&self, frame: Frame) -> Mat {
        let n = self.dof();
        match frame {
            Frame::Reference => self.point_jacobian(n, &self.reference.p),
            Frame::Tip => self.point_jacobian(n, &self.tip.p),
            Frame::Link(k) => self.point_jacobian(k, &self.pose(frame).p),
        }
    }

    /// Base-frame position of a point given in link `k`'s frame.
    pub fn link_point(&self, k: usize, local: &Vector3<f64>) -> Vector3<f64> {
        self.origins[k - 1] + self.rotations[k - 1] * local
    }
}

pub fn fk(model: &RobotModel, q: &Vector, frame: Frame) -> Pose {
    model.kinematics(q).pose(frame)
}

pub fn jacobian(model: &RobotModel, q: &Vector, frame: Frame) -> Mat {
    model.kinematics(q).jacobian(frame)
}

/// Time derivative of the frame Jacobian along `qdot`, by central difference.
pub fn jacobian_dot(model: &RobotModel, q: &Vector, qdot: &Vector, frame: Frame) -> Mat {
    let eps = JACOBIAN_DOT_STEP;
    let plus = jacobian(model, &(q + qdot * eps), frame);
    let minus = jacobian(model, &(q - qdot * eps), frame);
    (plus - minus) / (2.0 * eps)
}

/// Kinematics at `q` and at `q +/- eps * qdot`, shared by every quantity that
/// needs a Jacobian time derivative during one control tick.
#[derive(Clone, Debug)]
pub struct MotionKinematics {
    pub now: Kinematics,
    pub plus: Kinematics,
    pub minus: Kinematics,
    pub eps: f64,
}

impl MotionKinematics {
    pub fn new(model: &RobotModel, state: &JointState) -> Self {
        let eps = JACOBIAN_DOT_STEP;
        MotionKinematics {
            now: model.kinematics(&state.q),
            plus: model.kinematics(&(&state.q + &state.qdot * eps)),
            minus: model.kinematics(&(&state.q - &state.qdot * eps)),
            eps,
        }
    }

    pub fn jacobian_dot(&self, frame: Frame) -> Mat {
        (self.plus.jacobian(frame) - self.minus.jacobian(frame)) / (2.0 * self.eps)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsTerms {
    pub m: Mat,
    pub h: Vector,
    pub c: Vector,
    pub g: Vector,
}

/// World-frame recursive Newton-Euler. Gravity enters as a base acceleration.
fn rnea(
    model: &RobotModel,
    kin: &Kinematics,
    qdot: &Vector,
    qddot: &Vector,
    gravity: &Vector3<f64>,
) -> Vector {
    let n = model.dof();
    let mut omega = Vector3::zeros();
    let mut omega_dot = Vector3::zeros();
    let mut acc = -gravity;
    let mut prev_origin = Vector3::zeros();

    let mut forces = Vec::with_capacity(n);
    let mut moments = Vec::with_capacity(n);
    let mut com_offsets = Vec::with_capacity(n);

    for i in 0..n {
        let z = kin.axis(i);
        let r = kin.origins[i] - prev_origin;
        // origin of frame i is fixed in the parent body
        acc += omega_dot.cross(&r) + omega.cross(&omega.cross(&r));
        let omega_i = omega + z * qdot[i];
        omega_dot += z * qddot[i] + omega.cross(&z) * qdot[i];
        omega = omega_i;

        let link = &model.links[i];
        let rot = kin.rotations[i];
        let rc = rot * link.com();
        let a_com = acc + omega_dot.cross(&rc) + omega.cross(&omega.cross(&rc));
        let inertia = rot * link.inertia() * rot.transpose();
        forces.push(a_com * link.mass);
        moments.push(inertia * omega_dot + omega.cross(&(inertia * omega)));
        com_offsets.push(rc);
        prev_origin = kin.origins[i];
    }

    let mut tau = Vector::zeros(n);
    let mut f_child = Vector3::zeros();
    let mut n_child = Vector3::zeros();
    for i in (0..n).rev() {
        let child_offset = if i + 1 < n {
            kin.origins[i + 1] - kin.origins[i]
        } else {
            Vector3::zeros()
        };
        let f = forces[i] + f_child;
        let moment =
            moments[i] + com_offsets[i].cross(&forces[i]) + n_child + child_offset.cross(&f_child);
        tau[i] = kin.axis(i).dot(&moment);
        f_child = f;
        n_child = moment;
    }
    tau
}

pub fn inverse_dynamics(model: &RobotModel, q: &Vector, qdot: &Vector, qddot: &Vector) -> Vector {
    let kin = model.kinematics(q);
    rnea(model, &kin, qdot, qddot, &model.gravity)
}

/// Joint-space inertia by the composite-rigid-body recursion.
pub fn mass_matrix(model: &RobotModel, q: &Vector) -> Mat {
    mass_matrix_from(model, &model.kinematics(q))
}

pub fn mass_matrix_from(model: &RobotModel, kin: &Kinematics) -> Mat {
    let n = model.dof();
    // composite body of links j..n: mass, com, rotational inertia about com
    let mut masses = vec![0.0; n];
    let mut coms = vec![Vector3::zeros(); n];
    let mut inertias = vec![Matrix3::zeros(); n];
    let mut acc_mass = 0.0;
    let mut acc_com = Vector3::zeros();
    let mut acc_inertia = Matrix3::zeros();
    for j in (0..n).rev() {
        let link = &model.links[j];
        let rot = kin.rotations[j];
        let c = kin.origins[j] + rot * link.com();
        let inertia = rot * link.inertia() * rot.transpose();
        let total = acc_mass + link.mass;
        let com = (acc_com * acc_mass + c * link.mass) / total;
        acc_inertia = shift_inertia(&acc_inertia, acc_mass, &(acc_com - com))
            + shift_inertia(&inertia, link.mass, &(c - com));
        acc_mass = total;
        acc_com = com;
        masses[j] = acc_mass;
        coms[j] = acc_com;
        inertias[j] = acc_inertia;
    }

    let mut m = Mat::zeros(n, n);
    for j in 0..n {
        let z = kin.axis(j);
        let force = z.cross(&(coms[j] - kin.origins[j])) * masses[j];
        let moment_com = inertias[j] * z;
        for i in 0..=j {
            let moment = moment_com + (coms[j] - kin.origins[i]).cross(&force);
            let value = kin.axis(i).dot(&moment);
            m[(i, j)] = value;
            m[(j, i)] = value;
        }
    }
    m
}

/// Parallel-axis shift of an inertia about a body's com to a point at `-offset`.
fn shift_inertia(inertia: &Matrix3<f64>, mass: f64, offset: &Vector3<f64>) -> Matrix3<f64> {
    inertia + (Matrix3::identity() * offset.norm_squared() - offset * offset.transpose()) * mass
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasTerms {
    pub h: Vector,
    pub c: Vector,
    pub g: Vector,
}

pub fn bias_terms(model: &RobotModel, q: &Vector, qdot: &Vector) -> BiasTerms {
    bias_terms_from(model, &model.kinematics(q), qdot)
}

fn bias_terms_from(model: &RobotModel, kin: &Kinematics, qdot: &Vector) -> BiasTerms {
    let n = model.dof();
    let zero = Vector::zeros(n);
    let g = rnea(model, kin, &zero, &zero, &model.gravity);
    let c = rnea(model, kin, qdot, &zero, &Vector3::zeros());
    let h = &c + &g;
    BiasTerms { h, c, g }
}

pub fn dynamics_terms(model: &RobotModel, q: &Vector, qdot: &Vector) -> DynamicsTerms {
    let kin = model.kinematics(q);
    dynamics_terms_from(model, &kin, qdot)
}

pub fn dynamics_terms_from(model: &RobotModel, kin: &Kinematics, qdot: &Vector) -> DynamicsTerms {
    let BiasTerms { h, c, g } = bias_terms_from(model, kin, qdot);
    DynamicsTerms {
        m: mass_matrix_from(model, kin),
        h,
        c,
        g,
    }
}

/// Solves `M qddot = tau + tau_env - h`.
pub fn forward_dynamics(
    model: &RobotModel,
    q: &Vector,
    qdot: &Vector,
    tau: &Vector,
    tau_env: &Vector,
) -> Result<Vector> {
    let terms = dynamics_terms(model, q, qdot);
    solve_forward(&terms, tau, tau_env)
}

pub fn solve_forward(terms: &DynamicsTerms, tau: &Vector, tau_env: &Vector) -> Result<Vector> {
    let rhs = tau + tau_env - &terms.h;
    let chol = terms
        .m
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite)?;
    Ok(chol.solve(&rhs))
}

/// Kinetic energy of the chain.
pub fn kinetic_energy(model: &RobotModel, state: &JointState) -> f64 {
    let m = mass_matrix(model, &state.q);
    0.5 * state.qdot.dot(&(m * &state.qdot))
}

/// Potential energy of all link masses in the model's gravity field.
pub fn potential_energy(model: &RobotModel, q: &Vector) -> f64 {
    let kin = model.kinematics(q);
    model
        .links
        .iter()
        .enumerate()
        .map(|(i, link)| -link.mass * model.gravity.dot(&kin.link_point(i + 1, &link.com())))
        .sum()
}


#[cfg(test)]
mod tests {
    use super::test_models::*;
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_q(rng: &mut ChaCha8Rng, n: usize) -> Vector {
        Vector::from_fn(n, |_, _| rng.gen_range(-PI..PI))
    }

    /// Homogeneous 4x4 product over the raw parameter list, kept apart from
    /// the rotation/translation recursion used by `Kinematics`.
    fn transform_chain_oracle(model: &RobotModel, q: &Vector) -> nalgebra::Matrix4<f64> {
        use nalgebra::Matrix4;
        let dh = |p: &DhParams, theta: f64| {
            let rx = Matrix4::new(
                1.0,
                0.0,
                0.0,
                0.0,
                0.0,
                p.alpha.cos(),
                -p.alpha.sin(),
                0.0,
                0.0,
                p.alpha.sin(),
                p.alpha.cos(),
                0.0,
                0.0,
                0.0,
                0.0,
                1.0,
            );
            let tx = Matrix4::new_translation(&Vector3::new(p.a, 0.0, 0.0));
            let th = theta + p.theta_offset;
            let rz = Matrix4::new(
                th.cos(),
                -th.sin(),
                0.0,
                0.0,
                th.sin(),
                th.cos(),
                0.0,
                0.0,
                0.0,
                0.0,
                1.0,
                0.0,
                0.0,
                0.0,
                0.0,
                1.0,
            );
            let tz = Matrix4::new_translation(&Vector3::new(0.0, 0.0, p.d));
            rx * tx * rz * tz
        };
        let mut t: Matrix4<f64> = Matrix4::identity();
        for (i, j) in model.joints.iter().enumerate() {
            t *= dh(j, q[i]);
        }
        t * dh(&model.flange, 0.0)
    }

    #[test]
    fn bundled_model_loads() {
        let model = RobotModel::fr3_standin();
        assert_eq!(model.dof(), 7);
        assert!((model.l_tool - 0.59).abs() < 1e-15);
        assert_eq!(model.gravity, Vector3::new(0.0, 0.0, -9.81));
    }

    #[test]
    fn home_pose_matches_transform_chain() {
        let model = RobotModel::fr3_standin();
        let q = model.q_home.clone();
        let oracle = transform_chain_oracle(&model, &q);
        let pose = fk(&model, &q, Frame::Reference);
        for i in 0..3 {
            assert!((pose.p[i] - oracle[(i, 3)]).abs() < 1e-12);
            for j in 0..3 {
                assert!((pose.r[(i, j)] - oracle[(i, j)]).abs() < 1e-12);
            }
        }
        let rtr = pose.r.transpose() * pose.r;
        assert!((rtr - Matrix3::identity()).amax() < 1e-9);
        assert!((pose.r.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn tip_is_rigid_extension() {
        let model = RobotModel::fr3_standin();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let q = random_q(&mut rng, 7);
            let kin = model.kinematics(&q);
            let expected = kin.reference.p + kin.reference.r * Vector3::new(0.0, 0.0, model.l_tool);
            assert!((kin.tip.p - expected).norm() < 1e-14);
            assert_eq!(kin.tip.r, kin.reference.r);
        }
    }

    #[test]
    fn planar_chain_analytic() {
        let model = planar_two_link(1.0, 1.0);
        let pose = fk(
            &model,
            &Vector::from_vec(vec![FRAC_PI_2, 0.0]),
            Frame::Reference,
        );
        assert!((pose.p - Vector3::new(0.0, 2.0, 0.0)).norm() < 1e-14);
        let jac = jacobian(&model, &Vector::zeros(2), Frame::Reference);
        assert!(jac[(0, 0)].abs() < 1e-15 && jac[(0, 1)].abs() < 1e-15);
        assert!((jac[(1, 0)] - 2.0).abs() < 1e-15 && (jac[(1, 1)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn link_jacobian_has_zero_trailing_columns() {
        let model = RobotModel::fr3_standin();
        let jac = jacobian(&model, &model.q_home, Frame::Link(3));
        for col in 3..7 {
            assert!(jac.column(col).amax() == 0.0);
        }
        assert!(jac.column(0).amax() > 0.0);
    }

    #[test]
    fn jacobian_matches_finite_difference() {
        let model = RobotModel::fr3_standin();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for _ in 0..50 {
            let q = random_q(&mut rng, 7);
            for frame in [Frame::Reference, Frame::Tip, Frame::Link(4)] {
                let jac = jacobian(&model, &q, frame);
                for j in 0..7 {
                    let mut qp = q.clone();
                    let mut qm = q.clone();
                    qp[j] += h;
                    qm[j] -= h;
                    let fd = (fk(&model, &qp, frame).p - fk(&model, &qm, frame).p) / (2.0 * h);
                    for r in 0..3 {
                        assert!((fd[r] - jac[(r, j)]).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn jacobian_dot_cases() {
        let model = RobotModel::fr3_standin();
        let q = model.q_home.clone();
        let jd = jacobian_dot(&model, &q, &Vector::zeros(7), Frame::Tip);
        assert_eq!(jd.amax(), 0.0);

        let qdot = Vector::from_vec(vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.6]);
        let jd = jacobian_dot(&model, &q, &qdot, Frame::Tip);
        let delta = 1e-5;
        let oracle = (jacobian(&model, &(&q + &qdot * delta), Frame::Tip)
            - jacobian(&model, &(&q - &qdot * delta), Frame::Tip))
            / (2.0 * delta);
        assert!((jd - oracle).amax() < 1e-4);
    }

    #[test]
    fn single_joint_jacobian_dot_is_centripetal() {
        let model = pendulum(1.0, 0.7);
        let qdot = Vector::from_vec(vec![1.3]);
        let jd = jacobian_dot(
            &model,
            &Vector::from_vec(vec![0.4]),
            &qdot,
            Frame::Reference,
        );
        let norm = jd.view((0, 0), (3, 1)).norm();
        assert!((norm - 1.3 * 0.7).abs() < 1e-8);
    }

    #[test]
    fn pendulum_analytic() {
        let (m, l) = (2.0, 0.8);
        let model = pendulum(m, l);
        let mass = mass_matrix(&model, &Vector::from_vec(vec![0.3]));
        assert!((mass[(0, 0)] - m * l * l).abs() < 1e-9);
        for theta in [0.0, 0.3, 1.0, -2.0] {
            let bias = bias_terms(&model, &Vector::from_vec(vec![theta]), &Vector::zeros(1));
            assert!((bias.g[0] - m * 9.81 * l * f64::sin(theta)).abs() < 1e-9);
        }
        let qdd = forward_dynamics(
            &model,
            &Vector::from_vec(vec![FRAC_PI_2]),
            &Vector::zeros(1),
            &Vector::zeros(1),
            &Vector::zeros(1),
        )
        .unwrap();
        assert!((qdd[0] + 9.81 / l).abs() < 1e-9);
    }

    #[test]
    fn bias_special_cases() {
        let model = RobotModel::fr3_standin();
        let q = model.q_home.clone();
        let at_rest = bias_terms(&model, &q, &Vector::zeros(7));
        assert_eq!(at_rest.h, at_rest.g);
        let weightless = model.clone().with_gravity(Vector3::zeros());
        let b = bias_terms(&weightless, &q, &Vector::zeros(7));
        assert!(b.h.amax() < 1e-15);
        let qdd =
            forward_dynamics(&model, &q, &Vector::zeros(7), &at_rest.g, &Vector::zeros(7)).unwrap();
        assert!(qdd.amax() < 1e-10);
    }

    #[test]
    fn mass_matrix_matches_link_energy_oracle() {
        let model = RobotModel::fr3_standin();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            let q = random_q(&mut rng, 7);
            let qdot = random_q(&mut rng, 7);
            let kin = model.kinematics(&q);
            let mut energy = 0.0;
            for (i, link) in model.links.iter().enumerate() {
                let com = kin.link_point(i + 1, &link.com());
                let jac = kin.point_jacobian(i + 1, &com);
                let twist = &jac * &qdot;
                let v = Vector3::new(twist[0], twist[1], twist[2]);
                let w = Vector3::new(twist[3], twist[4], twist[5]);
                let rot = kin.rotations[i];
                let inertia = rot * link.inertia() * rot.transpose();
                energy += 0.5 * link.mass * v.norm_squared() + 0.5 * w.dot(&(inertia * w));
            }
            let m = mass_matrix(&model, &q);
            assert!((&m - m.transpose()).amax() < 1e-10);
            assert!(m.clone().symmetric_eigen().eigenvalues.min() > 0.0);
            let ke = 0.5 * qdot.dot(&(&m * &qdot));
            assert!((ke - energy).abs() < 1e-10 * energy.max(1.0));
        }
    }

    #[test]
    fn forward_inverse_round_trip_and_power_balance() {
        let model = RobotModel::fr3_standin();
        let weightless = model.clone().with_gravity(Vector3::zeros());
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let q = random_q(&mut rng, 7);
            let qdot = random_q(&mut rng, 7);
            let tau = random_q(&mut rng, 7) * 10.0;
            let qdd = forward_dynamics(&model, &q, &qdot, &tau, &Vector::zeros(7)).unwrap();
            let back = inverse_dynamics(&model, &q, &qdot, &qdd);
            assert!((back - &tau).amax() < 1e-8);

            let qdd = forward_dynamics(&weightless, &q, &qdot, &tau, &Vector::zeros(7)).unwrap();
            let terms = dynamics_terms(&weightless, &q, &qdot);
            let lhs = qdot.dot(&(&terms.m * &qdd + &terms.c));
            let rhs = qdot.dot(&tau);
            assert!((lhs - rhs).abs() < 1e-6 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn parser_reports_field_paths() {
        let good = RobotModel::fr3_standin().to_json_string();
        let mut value: serde_json::Value = serde_json::from_str(&good).unwrap();
        value["links"][2].as_object_mut().unwrap().remove("mass");
        let err = RobotModel::from_json_str(&value.to_string()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("links[2]") && msg.contains("mass"), "{msg}");

        let mut value: serde_json::Value = serde_json::from_str(&good).unwrap();
        value.as_object_mut().unwrap().remove("l_tool");
        let msg = RobotModel::from_json_str(&value.to_string())
            .unwrap_err()
            .to_string();
        assert!(msg.contains("l_tool"), "{msg}");

        let mut value: serde_json::Value = serde_json::from_str(&good).unwrap();
        value["links"][0]["mass"] = serde_json::json!(-1.0);
        let msg = RobotModel::from_json_str(&value.to_string())
            .unwrap_err()
            .to_string();
        assert!(msg.contains("links[0].mass"), "{msg}");
    }

    #[test]
    fn model_json_round_trip() {
        let model = RobotModel::fr3_standin();
        let back = RobotModel::from_json_str(&model.to_json_string()).unwrap();
        assert_eq!(model, back);
    }
}
