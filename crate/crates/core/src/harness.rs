//! Run configuration, metrics, comparison tables and the run matrix.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constrained_dynamics::GeneralizedInverse;
use crate::controllers::{ControlSettings, Controller, ControllerKind, GainSet};
use crate::error::{Error, Result};
use crate::numerics::Vector;
use crate::rcm::RcmMode;
use crate::robot::{self, RobotModel};
use crate::scenarios::ScenarioConfig;
use crate::sim::{self, SimConfig, SimTrace, TraceLayout};

pub const DEFAULT_SETTLE_TIME: f64 = 1.0;

/// A gain given either as one value for every axis or per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GainValue {
    Uniform(f64),
    PerAxis(Vec<f64>),
}

impl GainValue {
    fn resolve(&self, len: usize, path: &str) -> Result<Vec<f64>> {
        match self {
            GainValue::Uniform(v) => Ok(vec![*v; len]),
            GainValue::PerAxis(v) if v.len() == len => Ok(v.clone()),
            GainValue::PerAxis(v) => Err(Error::config(
                path,
                format!("expected {len} entries, found {}", v.len()),
            )),
        }
    }
}

/// Gains as written in a config file. Missing derivative gains follow
/// `2 sqrt(K_P)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainsConfig {
    #[serde(default = "GainsConfig::task")]
    pub k_fp: GainValue,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_fd: Option<GainValue>,
    #[serde(default = "GainsConfig::constraint")]
    pub k_cp: GainValue,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_cd: Option<GainValue>,
    #[serde(default = "GainsConfig::nullspace")]
    pub k_np: GainValue,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_nd: Option<GainValue>,
    #[serde(default = "GainsConfig::observer")]
    pub observer: GainValue,
}

impl Default for GainsConfig {
    fn default() -> Self {
        GainsConfig {
            k_fp: Self::task(),
            k_fd: None,
            k_cp: Self::constraint(),
            k_cd: None,
            k_np: Self::nullspace(),
            k_nd: None,
            observer: Self::observer(),
        }
    }
}

impl GainsConfig {
    fn task() -> GainValue {
        GainValue::Uniform(crate::controllers::DEFAULT_TASK_STIFFNESS)
    }
    fn constraint() -> GainValue {
        GainValue::Uniform(crate::controllers::DEFAULT_CONSTRAINT_STIFFNESS)
    }
    fn nullspace() -> GainValue {
        GainValue::Uniform(crate::controllers::DEFAULT_NULLSPACE_STIFFNESS)
    }
    fn observer() -> GainValue {
        GainValue::Uniform(crate::controllers::DEFAULT_OBSERVER_GAIN)
    }

    pub fn resolve(&self, n: usize) -> Result<GainSet> {
        let three = |g: &GainValue, name: &str| -> Result<[f64; 3]> {
            let v = g.resolve(3, &format!("gains.{name}"))?;
            Ok([v[0], v[1], v[2]])
        };
        let mut gains = GainSet::from_proportional(
            three(&self.k_fp, "k_fp")?,
            three(&self.k_cp, "k_cp")?,
            self.k_np.resolve(n, "gains.k_np")?,
            self.observer.resolve(n, "gains.observer")?,
        );
        if let Some(g) = &self.k_fd {
            gains.k_fd = three(g, "k_fd")?;
        }
        if let Some(g) = &self.k_cd {
            gains.k_cd = three(g, "k_cd")?;
        }
        if let Some(g) = &self.k_nd {
            gains.k_nd = g.resolve(n, "gains.k_nd")?;
        }
        gains.validate(n)?;
        Ok(gains)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Optional run name used for output directories and tables.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Robot model file, relative to the config file; the bundled model when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    pub controller: ControllerKind,
    /// Constraint formulation; 2D for the projection and null-space
    /// controllers, 3D for the Udwadia-Kalaba controller when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rcm_mode: Option<RcmMode>,
    #[serde(default)]
    pub inverse: GeneralizedInverse,
    #[serde(default)]
    pub gains: GainsConfig,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default = "default_settle")]
    pub settle_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn default_settle() -> f64 {
    DEFAULT_SETTLE_TIME
}

impl RunConfig {
    pub fn minimal(controller: ControllerKind, alpha: f64) -> Self {
        let text = format!(
            r#"{{"controller": "{}", "scenario": {{"alpha": {alpha}}}}}"#,
            controller.label()
        );
        Self::from_json_str(&text, None).expect("minimal config is valid")
    }

    pub fn mode(&self) -> RcmMode {
        self.rcm_mode.unwrap_or(match self.controller {
            ControllerKind::Uk => RcmMode::ThreeD,
            _ => RcmMode::TwoD,
        })
    }

    pub fn label(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| format!("{}_a{}", self.controller.label(), self.scenario.alpha))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    pub fn model_path(&self) -> Option<PathBuf> {
        self.model.as_deref().map(|p| self.resolve(p))
    }

    pub fn output_dir(&self) -> Option<PathBuf> {
        self.output.as_deref().map(|p| self.resolve(p))
    }

    pub fn load_model(&self) -> Result<RobotModel> {
        match self.model_path() {
            None => Ok(RobotModel::fr3_standin()),
            Some(path) => {
                if !path.exists() {
                    return Err(Error::config(
                        "model",
                        format!("file not found: {}", path.display()),
                    ));
                }
                RobotModel::load(&path).map_err(|e| Error::config("model", e.to_string()))
            }
        }
    }

    /// Parses a single run object.
    pub fn from_json_str(text: &str, base_dir: Option<&Path>) -> Result<RunConfig> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::config("", e.to_string()))?;
        let mut cfg = from_value(value, "")?;
        cfg.base_dir = base_dir.map(Path::to_path_buf);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every bound and referenced file, returning the model and gains.
    pub fn validate(&self) -> Result<(RobotModel, GainSet)> {
        let model = self.load_model()?;
        let gains = self.gains.resolve(model.dof())?;
        self.scenario.validate(&model)?;
        self.sim.validate()?;
        if !(self.settle_time >= 0.0 && self.settle_time < self.sim.duration) {
            return Err(Error::config(
                "settle_time",
                "must lie in [0, sim.duration)",
            ));
        }
        Ok((model, gains))
    }

    pub fn controller(&self, model: &RobotModel, gains: GainSet) -> Controller {
        let settings = ControlSettings {
            mode: self.mode(),
            nullspace_compliance: self.scenario.nullspace_compliance,
            compensation: self.scenario.compensation,
            inverse: self.inverse,
        };
        Controller::new(
            self.controller,
            settings,
            gains,
            self.scenario.initial_configuration(model),
        )
    }
}

fn from_value(value: serde_json::Value, prefix: &str) -> Result<RunConfig> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let inner = e.path().to_string();
        let path = match (prefix.is_empty(), inner == ".") {
            (true, _) => inner,
            (false, true) => prefix.to_string(),
            (false, false) => format!("{prefix}.{inner}"),
        };
        Error::config(path, e.into_inner().to_string())
    })
}

/// Reads a config file holding one run object or an array of them.
pub fn parse_config(path: &Path) -> Result<Vec<RunConfig>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
    let base = path.parent().map(Path::to_path_buf);
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
    let items = match value {
        serde_json::Value::Array(items) => items
            .into_iter()
            .enumerate()
            .map(|(i, v)| (format!("[{i}]"), v))
            .collect(),
        other => vec![(String::new(), other)],
    };
    items
        .into_iter()
        .map(|(prefix, v)| {
            let mut cfg = from_value(v, &prefix)?;
            cfg.base_dir = base.clone();
            cfg.validate().map_err(|e| match e {
                Error::Config { path, message } if !prefix.is_empty() => Error::Config {
                    path: format!("{prefix}.{path}"),
                    message,
                },
                other => other,
            })?;
            Ok(cfg)
        })
        .collect()
}

/// Every `*.json` file in `dir`, in file-name order.
pub fn parse_config_dir(dir: &Path) -> Result<Vec<RunConfig>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Usage(format!(
            "no .json configs in {}",
            dir.display()
        )));
    }
    let mut all = Vec::new();
    for f in files {
        all.extend(parse_config(&f)?);
    }
    Ok(all)
}

/// Table-style summary of one trace. Torque statistics use the commanded
/// torque minus the model's gravity torque, which is what a torque-controlled
/// arm with internal gravity compensation receives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub settle_time: f64,
    pub samples: usize,
    /// Mean absolute tip error per base axis, m.
    pub tip_mae: [f64; 3],
    /// Mean absolute lateral RCM residual per axis, m.
    pub rcm_mae: [f64; 2],
    pub rcm_mean_norm: f64,
    pub rcm_max_norm: f64,
    /// Mean of `|tau_i|` over joints and time, N·m.
    pub mean_abs_torque: f64,
    /// Time average of `|tau_i|` for each joint, N·m.
    pub mean_abs_torque_per_joint: Vec<f64>,
    /// Max of `|tau_i|` over joints and time, N·m.
    pub peak_torque: f64,
    /// Max over time of `sum_i |tau_i|`, N·m.
    pub peak_torque_sum: f64,
    /// Time average of `sum_i |tau_i|`, N·m.
    pub total_torque: f64,
    /// RMS of the per-joint finite-difference torque rate, N·m/s.
    pub smoothness: f64,
}

pub fn compute_metrics(
    trace: &SimTrace,
    settle_time: f64,
    model: &RobotModel,
) -> Result<MetricsRecord> {
    let layout = trace.layout;
    let n = layout.dof;
    if n != model.dof() {
        return Err(Error::Trace(format!(
            "trace has {n} joints but the model has {}",
            model.dof()
        )));
    }
    let first = (0..trace.len()).find(|&i| trace.time(i) >= settle_time);
    let Some(first) = first else {
        return Err(Error::Trace(format!(
            "no samples after settle time {settle_time} s"
        )));
    };
    let count = trace.len() - first;
    let zero = Vector::zeros(n);
    let mut tip = [0.0; 3];
    let mut res = [0.0; 2];
    let (mut res_norm, mut res_max) = (0.0, 0.0f64);
    let mut per_joint = vec![0.0; n];
    let (mut peak, mut peak_sum, mut total) = (0.0f64, 0.0f64, 0.0);
    let (mut rate_sq, mut rate_count) = (0.0, 0usize);
    let mut prev: Option<(f64, Vec<f64>)> = None;
    for i in first..trace.len() {
        let row = trace.row(i);
        for a in 0..3 {
            tip[a] += (row[layout.tip(a)] - row[layout.reference(a)]).abs();
        }
        let (rx, ry) = (row[layout.res2d(0)], row[layout.res2d(1)]);
        res[0] += rx.abs();
        res[1] += ry.abs();
        let norm = rx.hypot(ry);
        res_norm += norm;
        res_max = res_max.max(norm);

        let q = Vector::from_fn(n, |j, _| row[layout.q(j)]);
        let g = robot::bias_terms(model, &q, &zero).g;
        let tau: Vec<f64> = (0..n).map(|j| row[layout.tau(j)] - g[j]).collect();
        let mut sum = 0.0;
        for (j, t) in tau.iter().enumerate() {
            per_joint[j] += t.abs();
            peak = peak.max(t.abs());
            sum += t.abs();
        }
        peak_sum = peak_sum.max(sum);
        total += sum;
        let t = row[TraceLayout::T];
        if let Some((t_prev, tau_prev)) = &prev {
            let dt = t - t_prev;
            for (a, b) in tau.iter().zip(tau_prev) {
                rate_sq += ((a - b) / dt).powi(2);
                rate_count += 1;
            }
        }
        prev = Some((t, tau));
    }
    let c = count as f64;
    let per_joint: Vec<f64> = per_joint.into_iter().map(|v| v / c).collect();
    Ok(MetricsRecord {
        settle_time,
        samples: count,
        tip_mae: tip.map(|v| v / c),
        rcm_mae: res.map(|v| v / c),
        rcm_mean_norm: res_norm / c,
        rcm_max_norm: res_max,
        mean_abs_torque: per_joint.iter().sum::<f64>() / n as f64,
        mean_abs_torque_per_joint: per_joint,
        peak_torque: peak,
        peak_torque_sum: peak_sum,
        total_torque: total / c,
        smoothness: if rate_count > 0 {
            (rate_sq / rate_count as f64).sqrt()
        } else {
            0.0
        },
    })
}

impl MetricsRecord {
    pub fn tip_mae_norm(&self) -> f64 {
        self.tip_mae.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn ratio_fields(&self) -> [(&'static str, f64); 7] {
        [
            ("tip_mae", self.tip_mae_norm()),
            ("rcm_mean_norm", self.rcm_mean_norm),
            ("mean_abs_torque", self.mean_abs_torque),
            ("peak_torque", self.peak_torque),
            ("peak_torque_sum", self.peak_torque_sum),
            ("total_torque", self.total_torque),
            ("smoothness", self.smoothness),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub metrics: MetricsRecord,
    /// Each headline metric divided by the first row's value.
    pub ratios: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

pub fn compare_runs(runs: &[(String, MetricsRecord)]) -> Result<Comparison> {
    let Some((_, base)) = runs.first() else {
        return Err(Error::Usage("nothing to compare".into()));
    };
    let base = base.ratio_fields();
    let rows = runs
        .iter()
        .map(|(label, m)| {
            let ratios = m
                .ratio_fields()
                .iter()
                .zip(&base)
                .map(|((name, v), (_, b))| (name.to_string(), v / b))
                .collect();
            ComparisonRow {
                label: label.clone(),
                metrics: m.clone(),
                ratios,
            }
        })
        .collect();
    Ok(Comparison { rows })
}

impl Comparison {
    pub fn ratio(&self, row: usize, name: &str) -> Option<f64> {
        self.rows.get(row).and_then(|r| r.ratios.get(name).copied())
    }

    /// Aligned plain-text table; lengths in µm, torques in N·m.
    pub fn to_table(&self) -> String {
        let headers = [
            "run",
            "tip_x[um]",
            "tip_y[um]",
            "tip_z[um]",
            "rcm_x[um]",
            "rcm_y[um]",
            "|rcm|[um]",
            "mean|tau|",
            "peak|tau|",
            "peak_sum",
            "avg_sum",
            "rms_dtau",
            "peak_ratio",
            "mean_ratio",
        ];
        let um = |v: f64| format!("{:.3}", v * 1e6);
        let nm = |v: f64| format!("{:.4}", v);
        let mut cells: Vec<Vec<String>> = vec![headers.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            let m = &r.metrics;
            cells.push(vec![
                r.label.clone(),
                um(m.tip_mae[0]),
                um(m.tip_mae[1]),
                um(m.tip_mae[2]),
                um(m.rcm_mae[0]),
                um(m.rcm_mae[1]),
                um(m.rcm_mean_norm),
                nm(m.mean_abs_torque),
                nm(m.peak_torque),
                nm(m.peak_torque_sum),
                nm(m.total_torque),
                format!("{:.2}", m.smoothness),
                format!("{:.3}", r.ratios["peak_torque"]),
                format!("{:.3}", r.ratios["mean_abs_torque"]),
            ]);
        }
        let widths: Vec<usize> = (0..headers.len())
            .map(|c| cells.iter().map(|row| row[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &cells {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, s)| {
                    if c == 0 {
                        format!("{s:<w$}", w = widths[c])
                    } else {
                        format!("{s:>w$}", w = widths[c])
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}

/// Result of one configured run inside a matrix.
#[derive(Debug)]
pub struct RunReport {
    pub label: String,
    pub directory: PathBuf,
    pub metrics: Option<MetricsRecord>,
    pub error: Option<Error>,
}

#[derive(Debug)]
pub struct MatrixReport {
    pub runs: Vec<RunReport>,
    pub comparison: Option<Comparison>,
}

impl MatrixReport {
    pub fn failed(&self) -> bool {
        self.runs.iter().any(|r| r.error.is_some())
    }
}

/// Runs a single config and returns its trace; used by the matrix and tests.
pub fn execute(config: &RunConfig) -> Result<(RobotModel, sim::EpisodeOutcome)> {
    let (model, gains) = config.validate()?;
    let mut controller = config.controller(&model, gains);
    let outcome = sim::run_episode(&model, &mut controller, &config.scenario, &config.sim);
    Ok((model, outcome))
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn run_one(index: usize, config: &RunConfig, out_dir: &Path) -> RunReport {
    let label = config.label();
    let directory = out_dir.join(format!("{index:02}_{}", sanitize(&label)));
    let mut report = RunReport {
        label,
        directory: directory.clone(),
        metrics: None,
        error: None,
    };
    let result = (|| -> Result<MetricsRecord> {
        std::fs::create_dir_all(&directory).map_err(|e| Error::io(&directory, e))?;
        std::fs::write(directory.join("config.json"), config.to_json_string())
            .map_err(|e| Error::io(&directory, e))?;
        let (model, outcome) = execute(config)?;
        outcome.trace.save_csv(&directory.join("trace.csv"))?;
        if let Some(e) = outcome.failure {
            return Err(e);
        }
        let metrics = compute_metrics(&outcome.trace, config.settle_time, &model)?;
        write_json(&directory.join("metrics.json"), &metrics)?;
        Ok(metrics)
    })();
    match result {
        Ok(m) => report.metrics = Some(m),
        Err(e) => {
            log::error!("run `{}` failed: {e}", report.label);
            report.error = Some(e);
        }
    }
    report
}

/// Executes every config on a pool of `jobs` workers (all cores when 0).
/// Results keep config order; a failing run does not stop its siblings.
pub fn run_matrix(configs: &[RunConfig], out_dir: &Path, jobs: usize) -> Result<MatrixReport> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Usage(e.to_string()))?;
    let runs: Vec<RunReport> = pool.install(|| {
        configs
            .par_iter()
            .enumerate()
            .map(|(i, c)| run_one(i, c, out_dir))
            .collect()
    });
    let finished: Vec<(String, MetricsRecord)> = runs
        .iter()
        .filter_map(|r| r.metrics.clone().map(|m| (r.label.clone(), m)))
        .collect();
    let comparison = if finished.is_empty() {
        None
    } else {
        Some(compare_runs(&finished)?)
    };
    if let Some(c) = &comparison {
        std::fs::write(out_dir.join("comparison.txt"), c.to_table())
            .map_err(|e| Error::io(out_dir, e))?;
        write_json(&out_dir.join("comparison.json"), c)?;
    }
    info!(
        "{} runs, {} failed",
        runs.len(),
        runs.iter().filter(|r| r.error.is_some()).count()
    );
    Ok(MatrixReport { runs, comparison })
}
