//! Fixed-step closed-loop simulation with an optional visco-elastic trocar,
//! scripted disturbances and a columnar trace.

use std::io::{Read, Write};
use std::path::Path;

use log::{debug, warn};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::controllers::{observer_step, Controller, ControllerKind, ObserverState};
use crate::error::{Error, Result};
use crate::numerics::{self, Vector};
use crate::rcm::{self, RcmMode, TrocarState};
use crate::robot::{self, Frame, JointState, Kinematics, RobotModel};
use crate::scenarios::{self, ScenarioConfig};

/// Joint speeds above this (rad/s) count as divergence.
pub const MAX_JOINT_SPEED: f64 = 1e3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvMode {
    #[default]
    Off,
    Soft,
}

/// Linear spring-damper acting on the lateral tool offset at the trocar.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvModel {
    pub k_env: f64,
    pub d_env: f64,
    pub mode: EnvMode,
}

impl Default for EnvModel {
    fn default() -> Self {
        EnvModel {
            k_env: 5000.0,
            d_env: 50.0,
            mode: EnvMode::Off,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    #[default]
    SemiImplicitEuler,
    Rk4,
}

/// Differences between the simulated plant and the controller's model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantConfig {
    /// Scales every link mass and inertia of the plant.
    pub mass_scale: f64,
    /// Viscous joint friction, N·m·s/rad.
    pub joint_damping: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig {
            mass_scale: 1.0,
            joint_damping: 0.0,
        }
    }
}

impl PlantConfig {
    pub fn is_ideal(&self) -> bool {
        self.mass_scale == 1.0 && self.joint_damping == 0.0
    }

    pub fn plant_model(&self, model: &RobotModel) -> RobotModel {
        let mut plant = model.clone();
        for link in &mut plant.links {
            link.mass *= self.mass_scale;
            for row in &mut link.inertia {
                for v in row.iter_mut() {
                    *v *= self.mass_scale;
                }
            }
        }
        plant
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub dt: f64,
    pub duration: f64,
    pub integrator: Integrator,
    pub env: EnvModel,
    pub plant: PlantConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 1e-3,
            duration: 20.0,
            integrator: Integrator::SemiImplicitEuler,
            env: EnvModel::default(),
            plant: PlantConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("sim.dt", "must be positive"));
        }
        if !(self.duration >= self.dt && self.duration.is_finite()) {
            return Err(Error::config(
                "sim.duration",
                "must be at least one time step",
            ));
        }
        if !(self.env.k_env >= 0.0 && self.env.d_env >= 0.0) {
            return Err(Error::config(
                "sim.env",
                "stiffness and damping must be non-negative",
            ));
        }
        if !(self.plant.mass_scale > 0.0 && self.plant.joint_damping >= 0.0) {
            return Err(Error::config(
                "sim.plant",
                "mass_scale must be positive and joint_damping non-negative",
            ));
        }
        Ok(())
    }

    /// `floor(duration / dt) + 1`, tolerant of round-off in the ratio.
    pub fn record_count(&self) -> usize {
        (self.duration / self.dt + 1e-9).floor() as usize + 1
    }
}

/// `f = -K x - D xdot` on the lateral residual, zero when the environment is off.
pub fn environment_force(x: &Vector, xdot: &Vector, env: &EnvModel) -> Vector {
    match env.mode {
        EnvMode::Off => Vector::zeros(x.len()),
        EnvMode::Soft => -(x * env.k_env) - xdot * env.d_env,
    }
}

/// Joint torque of the environment force through the lateral residual Jacobian.
pub fn environment_torque(
    kin: &Kinematics,
    qdot: &Vector,
    trocar: &TrocarState,
    env: &EnvModel,
) -> Vector {
    if env.mode == EnvMode::Off {
        return Vector::zeros(qdot.len());
    }
    let j_r = kin.jacobian(Frame::Reference);
    let x = rcm::residual(&kin.reference, &trocar.p, RcmMode::TwoD);
    let xdot = rcm::residual_rate(&kin.reference, &j_r, qdot, trocar, RcmMode::TwoD);
    let jc = rcm::residual_jacobian(&kin.reference, &j_r, &trocar.p, RcmMode::TwoD);
    jc.transpose() * environment_force(&x, &xdot, env)
}

fn advance(trocar: &TrocarState, s: f64) -> TrocarState {
    TrocarState {
        p: trocar.p + trocar.v * s + trocar.a * (0.5 * s * s),
        v: trocar.v + trocar.a * s,
        a: trocar.a,
    }
}

/// Plant physics used by [`step`].
#[derive(Clone, Copy, Debug)]
pub struct StepInputs<'a> {
    pub tau: &'a Vector,
    pub tau_ext: &'a Vector,
    pub env: &'a EnvModel,
    pub trocar: &'a TrocarState,
    pub joint_damping: f64,
}

fn acceleration(
    model: &RobotModel,
    q: &Vector,
    qdot: &Vector,
    inputs: &StepInputs,
    s: f64,
) -> Result<Vector> {
    let kin = model.kinematics(q);
    let terms = robot::dynamics_terms_from(model, &kin, qdot);
    let trocar = advance(inputs.trocar, s);
    let external = inputs.tau_ext + environment_torque(&kin, qdot, &trocar, inputs.env)
        - qdot * inputs.joint_damping;
    robot::solve_forward(&terms, inputs.tau, &external)
}

/// One integration step. Returns the new state and the joint acceleration at
/// the start of the step.
pub fn step(
    model: &RobotModel,
    state: &JointState,
    inputs: &StepInputs,
    dt: f64,
    integrator: Integrator,
) -> Result<(JointState, Vector)> {
    let (q, qd) = (&state.q, &state.qdot);
    let a1 = acceleration(model, q, qd, inputs, 0.0)?;
    let next = match integrator {
        Integrator::SemiImplicitEuler => {
            let qdot = qd + &a1 * dt;
            let q = q + &qdot * dt;
            JointState::new(q, qdot)
        }
        Integrator::Rk4 => {
            let h = 0.5 * dt;
            let (q2, v2) = (q + qd * h, qd + &a1 * h);
            let a2 = acceleration(model, &q2, &v2, inputs, h)?;
            let (q3, v3) = (q + &v2 * h, qd + &a2 * h);
            let a3 = acceleration(model, &q3, &v3, inputs, h)?;
            let (q4, v4) = (q + &v3 * dt, qd + &a3 * dt);
            let a4 = acceleration(model, &q4, &v4, inputs, dt)?;
            let q = q + (qd + &v2 * 2.0 + &v3 * 2.0 + &v4) * (dt / 6.0);
            let qdot = qd + (&a1 + &a2 * 2.0 + &a3 * 2.0 + &a4) * (dt / 6.0);
            JointState::new(q, qdot)
        }
    };
    Ok((next, a1))
}

/// Column layout of a trace for an `n`-joint robot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceLayout {
    pub dof: usize,
}

impl TraceLayout {
    pub const T: usize = 0;

    pub fn q(&self, i: usize) -> usize {
        1 + i
    }
    pub fn qdot(&self, i: usize) -> usize {
        1 + self.dof + i
    }
    pub fn tau(&self, i: usize) -> usize {
        1 + 2 * self.dof + i
    }
    pub fn tip(&self, a: usize) -> usize {
        1 + 3 * self.dof + a
    }
    pub fn reference(&self, a: usize) -> usize {
        self.tip(3) + a
    }
    pub fn p_r(&self, a: usize) -> usize {
        self.tip(6) + a
    }
    pub fn p_c(&self, a: usize) -> usize {
        self.tip(9) + a
    }
    pub fn res2d(&self, a: usize) -> usize {
        self.tip(12) + a
    }
    pub fn res3d(&self, a: usize) -> usize {
        self.tip(14) + a
    }
    pub fn p_rcm(&self, a: usize) -> usize {
        self.tip(17) + a
    }
    pub fn tau_ext(&self, i: usize) -> usize {
        self.tip(20) + i
    }
    pub fn tau_ext_hat(&self, i: usize) -> usize {
        self.tau_ext(self.dof) + i
    }
    pub fn width(&self) -> usize {
        self.tau_ext_hat(self.dof)
    }

    pub fn header(&self) -> Vec<String> {
        let n = self.dof;
        let xyz = ["x", "y", "z"];
        let mut h = vec!["t".to_string()];
        let joints = |prefix: &'static str| (1..=n).map(move |i| format!("{prefix}{i}"));
        let axes =
            |prefix: &'static str, k: usize| xyz[..k].iter().map(move |a| format!("{prefix}_{a}"));
        h.extend(joints("q"));
        h.extend(joints("qd"));
        h.extend(joints("tau"));
        for p in ["tip", "ref", "pr", "pc"] {
            h.extend(axes(p, 3));
        }
        h.extend(axes("res2d", 2));
        h.extend(axes("res3d", 3));
        h.extend(axes("prcm", 3));
        h.extend(joints("tauext"));
        h.extend(joints("tauexthat"));
        h
    }
}

/// Row-major trace with every row pre-allocated up front.
#[derive(Clone, Debug, PartialEq)]
pub struct SimTrace {
    pub layout: TraceLayout,
    data: Vec<f64>,
    /// Per-tick `|Jc qddot - (xddot_c - b_c)|` for the commanded torque on
    /// the plant; not part of the CSV.
    pub consistency: Vec<f64>,
    /// Per-tick `|P tau_perp|`; not part of the CSV.
    pub annihilation: Vec<f64>,
}

impl SimTrace {
    pub fn with_capacity(dof: usize, rows: usize) -> Self {
        let layout = TraceLayout { dof };
        SimTrace {
            layout,
            data: Vec::with_capacity(rows * layout.width()),
            consistency: Vec::with_capacity(rows),
            annihilation: Vec::with_capacity(rows),
        }
    }

    pub fn dof(&self) -> usize {
        self.layout.dof
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.layout.width()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Allocated capacity in values, for checking the loop never grows it.
    pub fn capacity(&self) -> usize {
        self.data.capacity()
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.layout.width(), "trace row width");
        self.data.extend_from_slice(row);
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.layout.width();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn value(&self, i: usize, col: usize) -> f64 {
        self.data[i * self.layout.width() + col]
    }

    pub fn time(&self, i: usize) -> f64 {
        self.value(i, TraceLayout::T)
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.layout.width())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let trace_err = |e: csv::Error| Error::Trace(e.to_string());
        w.write_record(self.layout.header()).map_err(trace_err)?;
        let mut fields = Vec::with_capacity(self.layout.width());
        for row in self.rows() {
            fields.clear();
            fields.extend(row.iter().map(|v| format!("{v:.16e}")));
            w.write_record(&fields).map_err(trace_err)?;
        }
        w.flush().map_err(|e| Error::Trace(e.to_string()))
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("CSV is ASCII")
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<SimTrace> {
        let mut r = csv::Reader::from_reader(input);
        let header: Vec<String> = r
            .headers()
            .map_err(|e| Error::Trace(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let dof = header
            .iter()
            .filter(|h| h.starts_with('q') && !h.starts_with("qd"))
            .count();
        let layout = TraceLayout { dof };
        if dof == 0 || header != layout.header() {
            return Err(Error::Trace("unexpected column header".into()));
        }
        let mut trace = SimTrace::with_capacity(dof, 0);
        let mut row = Vec::with_capacity(layout.width());
        for (line, record) in r.records().enumerate() {
            let record = record.map_err(|e| Error::Trace(e.to_string()))?;
            row.clear();
            for field in record.iter() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Trace(format!("row {}: bad number `{field}`", line + 1)))?;
                row.push(v);
            }
            if row.len() != layout.width() {
                return Err(Error::Trace(format!(
                    "row {}: expected {} fields",
                    line + 1,
                    layout.width()
                )));
            }
            trace.push_row(&row);
        }
        Ok(trace)
    }

    pub fn load_csv(path: &Path) -> Result<SimTrace> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

/// Trace plus the reason the episode stopped early, if it did.
#[derive(Debug)]
pub struct EpisodeOutcome {
    pub trace: SimTrace,
    pub failure: Option<Error>,
}

impl EpisodeOutcome {
    pub fn into_result(self) -> Result<SimTrace> {
        match self.failure {
            None => Ok(self.trace),
            Some(e) => Err(e),
        }
    }
}

fn extend3(row: &mut Vec<f64>, v: &Vector3<f64>) {
    row.extend_from_slice(v.as_slice());
}

/// Trocar base point for a scenario: a fraction `alpha` of the way from the
/// tool-reference point to the tip at the initial configuration.
pub fn initial_trocar(model: &RobotModel, q0: &Vector, alpha: f64) -> Result<Vector3<f64>> {
    let kin = model.kinematics(q0);
    rcm::place_trocar(&kin.reference.p, &kin.tip.p, alpha)
}

/// Runs one closed-loop episode. The controller sees the exact plant state;
/// the plant may differ from `model` per `sim.plant`.
pub fn run_episode(
    model: &RobotModel,
    controller: &mut Controller,
    scenario: &ScenarioConfig,
    sim: &SimConfig,
) -> EpisodeOutcome {
    let n = model.dof();
    let rows = sim.record_count();
    let mut trace = SimTrace::with_capacity(n, rows);
    let failure = simulate(model, controller, scenario, sim, &mut trace).err();
    if let Some(e) = &failure {
        warn!("episode stopped: {e}");
    }
    EpisodeOutcome { trace, failure }
}

fn simulate(
    model: &RobotModel,
    controller: &mut Controller,
    scenario: &ScenarioConfig,
    sim: &SimConfig,
    trace: &mut SimTrace,
) -> Result<()> {
    let n = model.dof();
    let rows = sim.record_count();
    let dt = sim.dt;
    let plant = if sim.plant.mass_scale == 1.0 {
        model.clone()
    } else {
        sim.plant.plant_model(model)
    };
    let q0 = scenario.initial_configuration(model);
    let p_c0 = initial_trocar(model, &q0, scenario.alpha)?;
    let start = scenario
        .spiral
        .start
        .map(|s| Vector3::from_row_slice(&s))
        .unwrap_or_else(|| model.kinematics(&q0).tip.p);
    let mut state = JointState::at_rest(q0);
    let mut observer = ObserverState::reset(model, &state);
    let zero = Vector::zeros(n);
    let mut row = Vec::with_capacity(trace.layout.width());
    let measure_annihilation = controller.kind == ControllerKind::PApproach;

    for tick in 0..rows {
        let t = tick as f64 * dt;
        let diverged = |reason: String| Error::SimulationDiverged {
            tick,
            time: t,
            reason,
        };
        let trocar = scenarios::trocar_schedule_eval(t, &scenario.trocar, &p_c0);
        let reference = scenarios::spiral_reference(t, &scenario.spiral, &start);
        let kin = plant.kinematics(&state.q);
        let tau_ext = scenarios::disturbance_eval(t, &scenario.disturbances, &kin);
        let tau_ext_hat = if scenario.observer {
            observer.tau_ext_hat()
        } else {
            zero.clone()
        };
        let out = controller.compute(model, &state, &trocar, &reference, &tau_ext_hat)?;
        if !out.tau.iter().all(|v| v.is_finite()) {
            return Err(diverged("controller produced a non-finite torque".into()));
        }

        row.clear();
        row.push(t);
        row.extend_from_slice(state.q.as_slice());
        row.extend_from_slice(state.qdot.as_slice());
        row.extend_from_slice(out.tau.as_slice());
        extend3(&mut row, &kin.tip.p);
        extend3(&mut row, &reference.x_d);
        extend3(&mut row, &kin.reference.p);
        extend3(&mut row, &trocar.p);
        row.extend_from_slice(rcm::residual(&kin.reference, &trocar.p, RcmMode::TwoD).as_slice());
        row.extend_from_slice(rcm::residual(&kin.reference, &trocar.p, RcmMode::ThreeD).as_slice());
        let p_rcm = rcm::rcm_point(&kin.reference.p, &kin.tip.p, &trocar.p, model.l_tool)?;
        extend3(&mut row, &p_rcm);
        row.extend_from_slice(tau_ext.as_slice());
        row.extend_from_slice(tau_ext_hat.as_slice());
        trace.push_row(&row);

        if measure_annihilation {
            let p = numerics::orth_projector(&out.diagnostics.jc)?;
            trace.annihilation.push((p * &out.tau_perp).norm());
        }
        if tick + 1 == rows {
            break;
        }

        let inputs = StepInputs {
            tau: &out.tau,
            tau_ext: &tau_ext,
            env: &sim.env,
            trocar: &trocar,
            joint_damping: sim.plant.joint_damping,
        };
        let (next, qddot) = step(&plant, &state, &inputs, dt, sim.integrator)
            .map_err(|e| diverged(e.to_string()))?;
        let d = &out.diagnostics;
        trace
            .consistency
            .push((&d.jc * &qddot - &d.constraint_target).norm());
        if !next.is_finite() {
            return Err(Error::SimulationDiverged {
                tick: tick + 1,
                time: (tick + 1) as f64 * dt,
                reason: "non-finite joint state".into(),
            });
        }
        if next.qdot.amax() > MAX_JOINT_SPEED {
            return Err(Error::SimulationDiverged {
                tick: tick + 1,
                time: (tick + 1) as f64 * dt,
                reason: format!("joint speed {:.3e} rad/s exceeds limit", next.qdot.amax()),
            });
        }
        if scenario.observer {
            observer = observer_step(
                &observer,
                model,
                &next,
                &out.tau,
                &controller.gains.observer,
                dt,
            );
        }
        state = next;
    }
    debug!("episode finished: {} records", trace.len());
    Ok(())
}
