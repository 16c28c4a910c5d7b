//! Runs the depth sweep, the moving-trocar case and the controller comparison
//! and prints one comparison table.
//!
//! Optional arguments `[mass_scale] [joint_damping]` perturb the simulated
//! plant away from the controller's model.

use rayon::prelude::*;
use trocar::controllers::ControllerKind;
use trocar::harness::{compare_runs, compute_metrics, execute, RunConfig};
use trocar::scenarios::TrocarMotion;

fn main() {
    let mut configs = Vec::new();
    for alpha in [0.75, 0.5, 0.25] {
        configs.push(RunConfig::minimal(ControllerKind::PApproach, alpha));
    }
    let mut moving = RunConfig::minimal(ControllerKind::PApproach, 0.25);
    moving.scenario.trocar.mode = TrocarMotion::Sinusoidal;
    moving.label = Some("p_approach_a0.25_moving".into());
    configs.push(moving);
    for kind in [ControllerKind::ZApproach, ControllerKind::Uk] {
        configs.push(RunConfig::minimal(kind, 0.5));
    }
    let args: Vec<f64> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("arguments are numbers"))
        .collect();
    for c in &mut configs {
        c.sim.plant.mass_scale = args.first().copied().unwrap_or(1.0);
        c.sim.plant.joint_damping = args.get(1).copied().unwrap_or(0.0);
    }
    let started = std::time::Instant::now();
    let rows: Vec<(String, trocar::harness::MetricsRecord)> = configs
        .par_iter()
        .map(|c| {
            let (model, outcome) = execute(c).expect("valid config");
            let trace = outcome.into_result().expect("episode finished");
            (
                c.label(),
                compute_metrics(&trace, c.settle_time, &model).unwrap(),
            )
        })
        .collect();
    print!("{}", compare_runs(&rows).unwrap().to_table());
    eprintln!("wall time {:.1} s", started.elapsed().as_secs_f64());
}
