//! Reference trajectories and time schedules for trocar motion and scripted
//! disturbances.

use std::f64::consts::TAU;

use nalgebra::{Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::controllers::{CompensationScope, TaskReference};
use crate::error::{Error, Result};
use crate::numerics::Vector;
use crate::rcm::TrocarState;
use crate::robot::{Frame, Kinematics, RobotModel};

pub const DEFAULT_ACCEL_FRACTION: f64 = 0.2;

/// Normalized trapezoidal velocity profile `(s, sdot, sddot)` moving `s` from
/// 0 to 1 over `duration`. Outside `[0, duration]` the profile holds with
/// zero derivatives.
pub fn trapezoid_profile(t: f64, duration: f64, accel_fraction: f64) -> (f64, f64, f64) {
    let a = accel_fraction;
    if t < 0.0 {
        return (0.0, 0.0, 0.0);
    }
    if t > duration {
        return (1.0, 0.0, 0.0);
    }
    let t_acc = a * duration;
    let v = 1.0 / (duration * (1.0 - a));
    let acc = v / t_acc;
    if t < t_acc {
        (0.5 * acc * t * t, acc * t, acc)
    } else if t <= duration - t_acc {
        (0.5 * acc * t_acc * t_acc + v * (t - t_acc), v, 0.0)
    } else {
        let r = duration - t;
        (1.0 - 0.5 * acc * r * r, acc * r, -acc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpiralParams {
    pub radius: f64,
    pub pitch: f64,
    pub duration: f64,
    pub turns: f64,
    pub accel_fraction: f64,
    /// Initial tip position; filled from the robot's start pose when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start: Option<[f64; 3]>,
}

impl Default for SpiralParams {
    fn default() -> Self {
        SpiralParams {
            radius: 0.02,
            pitch: 0.015,
            duration: 20.0,
            turns: 3.0,
            accel_fraction: DEFAULT_ACCEL_FRACTION,
            start: None,
        }
    }
}

impl SpiralParams {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("radius", self.radius > 0.0),
            ("pitch", self.pitch >= 0.0),
            ("duration", self.duration > 0.0),
            ("turns", self.turns >= 1.0),
            (
                "accel_fraction",
                self.accel_fraction > 0.0 && self.accel_fraction < 0.5,
            ),
        ];
        for (field, ok) in checks {
            if !ok {
                return Err(Error::config(
                    format!("scenario.spiral.{field}"),
                    "value out of range",
                ));
            }
        }
        Ok(())
    }
}

/// Helix about the base z-axis starting at `start`, centered `radius` behind
/// it along x, timed by the trapezoidal profile.
pub fn spiral_reference(t: f64, params: &SpiralParams, start: &Vector3<f64>) -> TaskReference {
    let (s, sd, sdd) = trapezoid_profile(t, params.duration, params.accel_fraction);
    let r = params.radius;
    let w = TAU * params.turns;
    let rise = params.turns * params.pitch;
    let phi = w * s;
    let (sin, cos) = phi.sin_cos();
    // d/ds and d2/ds2 of the path
    let dp = Vector3::new(-r * w * sin, r * w * cos, rise);
    let ddp = Vector3::new(-r * w * w * cos, -r * w * w * sin, 0.0);
    TaskReference {
        x_d: start + Vector3::new(r * (cos - 1.0), r * sin, rise * s),
        xdot_d: dp * sd,
        xddot_d: ddp * (sd * sd) + dp * sdd,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrocarMotion {
    #[default]
    Static,
    Sinusoidal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrocarSchedule {
    pub mode: TrocarMotion,
    pub amplitude: f64,
    pub frequency: f64,
}

impl Default for TrocarSchedule {
    fn default() -> Self {
        TrocarSchedule {
            mode: TrocarMotion::Static,
            amplitude: 0.04,
            frequency: 0.2,
        }
    }
}

impl TrocarSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::config(
                "scenario.trocar.amplitude",
                "must be non-negative",
            ));
        }
        if !(self.frequency >= 0.0 && self.frequency.is_finite()) {
            return Err(Error::config(
                "scenario.trocar.frequency",
                "must be non-negative",
            ));
        }
        Ok(())
    }
}

/// Trocar state at `t`; sinusoidal motion runs along the base z-axis.
pub fn trocar_schedule_eval(t: f64, schedule: &TrocarSchedule, p_c0: &Vector3<f64>) -> TrocarState {
    match schedule.mode {
        TrocarMotion::Static => TrocarState::fixed(*p_c0),
        TrocarMotion::Sinusoidal => {
            let w = TAU * schedule.frequency;
            let a = schedule.amplitude;
            let (sin, cos) = (w * t).sin_cos();
            TrocarState {
                p: p_c0 + Vector3::z() * (a * sin),
                v: Vector3::z() * (a * w * cos),
                a: Vector3::z() * (-a * w * w * sin),
            }
        }
    }
}

fn default_link() -> usize {
    2
}

/// Where a scripted disturbance acts. Forces and wrenches are in the base frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Application {
    /// `[fx, fy, fz, mx, my, mz]` at the tool-reference frame origin.
    FlangeWrench([f64; 6]),
    JointTorque(Vec<f64>),
    /// Force at `point` given in the link's own frame.
    LinkForce {
        #[serde(default = "default_link")]
        link: usize,
        force: [f64; 3],
        #[serde(default)]
        point: [f64; 3],
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceEvent {
    /// `[t0, t1)` in seconds.
    pub window: [f64; 2],
    pub application: Application,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DisturbanceSchedule {
    pub events: Vec<DisturbanceEvent>,
}

impl DisturbanceSchedule {
    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn validate(&self, model: &RobotModel) -> Result<()> {
        let n = model.dof();
        for (i, ev) in self.events.iter().enumerate() {
            let [t0, t1] = ev.window;
            if !(t0 >= 0.0 && t0 < t1) {
                return Err(Error::config(
                    format!("scenario.disturbances[{i}].window"),
                    "window must satisfy 0 <= t0 < t1",
                ));
            }
            match &ev.application {
                Application::JointTorque(tau) if tau.len() != n => {
                    return Err(Error::config(
                        format!("scenario.disturbances[{i}].application.joint_torque"),
                        format!("expected {n} entries, found {}", tau.len()),
                    ));
                }
                Application::LinkForce { link, .. } if *link == 0 || *link > n => {
                    return Err(Error::config(
                        format!("scenario.disturbances[{i}].application.link_force.link"),
                        format!("link must be in 1..={n}"),
                    ));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn active(&self, t: f64) -> impl Iterator<Item = &DisturbanceEvent> {
        self.events
            .iter()
            .filter(move |e| t >= e.window[0] && t < e.window[1])
    }
}

/// Joint torque produced by all events active at `t`.
pub fn disturbance_eval(t: f64, schedule: &DisturbanceSchedule, kin: &Kinematics) -> Vector {
    let n = kin.dof();
    let mut tau = Vector::zeros(n);
    for ev in schedule.active(t) {
        match &ev.application {
            Application::JointTorque(values) => tau += Vector::from_column_slice(values),
            Application::FlangeWrench(w) => {
                let wrench = Vector::from_column_slice(Vector6::from_row_slice(w).as_slice());
                tau += kin.jacobian(Frame::Reference).transpose() * wrench;
            }
            Application::LinkForce { link, force, point } => {
                let p = kin.link_point(*link, &Vector3::from_row_slice(point));
                let jac = kin.point_jacobian(*link, &p);
                tau += jac.rows(0, 3).transpose() * Vector::from_column_slice(force);
            }
        }
    }
    tau
}

fn default_alpha() -> f64 {
    0.5
}

fn default_true() -> bool {
    true
}

/// One experiment: reference, trocar placement and motion, disturbances and
/// the controller features switched on for it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub spiral: SpiralParams,
    /// Trocar position as a fraction of the initial tool segment, from the
    /// tool-reference point (0) to the tip (1).
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub trocar: TrocarSchedule,
    #[serde(default, skip_serializing_if = "DisturbanceSchedule::is_empty")]
    pub disturbances: DisturbanceSchedule,
    #[serde(default)]
    pub observer: bool,
    #[serde(default)]
    pub compensation: CompensationScope,
    #[serde(default = "default_true")]
    pub nullspace_compliance: bool,
    /// Initial joint configuration; the model's home pose when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q0: Option<Vec<f64>>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            spiral: SpiralParams::default(),
            alpha: default_alpha(),
            trocar: TrocarSchedule::default(),
            disturbances: DisturbanceSchedule::default(),
            observer: false,
            compensation: CompensationScope::Full,
            nullspace_compliance: true,
            q0: None,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self, model: &RobotModel) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config(
                "scenario.alpha",
                format!("alpha = {} outside (0, 1]", self.alpha),
            ));
        }
        self.spiral.validate()?;
        self.trocar.validate()?;
        self.disturbances.validate(model)?;
        if let Some(q0) = &self.q0 {
            if q0.len() != model.dof() || q0.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(
                    "scenario.q0",
                    format!("expected {} finite entries", model.dof()),
                ));
            }
        }
        Ok(())
    }

    pub fn initial_configuration(&self, model: &RobotModel) -> Vector {
        self.q0
            .as_ref()
            .map(|q| Vector::from_column_slice(q))
            .unwrap_or_else(|| model.q_home.clone())
    }
}
