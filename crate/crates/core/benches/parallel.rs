use std::f64::consts::PI;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ucar::dynamics::{ModelParams, VehicleState};
use ucar::ident::{
    delay_grid_search, slice_experiments, DelayConfig, DelayGrid, ErrorWeights, Experiment,
    FitOptions,
};
use ucar::labsim::{
    generate_ident_log, run_scenario, IdentLogSpec, LabConfig, ScenarioSpec, Script,
    TrajectorySpec, VehicleSpec,
};
use ucar::Exec;

const MODES: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn experiments() -> Vec<Experiment> {
    let spec = IdentLogSpec {
        duration: 20.0,
        ..Default::default()
    };
    let log = generate_ident_log(
        &spec,
        &LabConfig::default(),
        &ModelParams::REFERENCE,
        DelayConfig::new(1, 0, 5),
    )
    .unwrap();
    slice_experiments(&log, 100, 0.02).unwrap().experiments
}

fn grid_search(c: &mut Criterion) {
    let exps = experiments();
    let grid = DelayGrid::parse("ips=0..2,local=0..1,act=4..6").unwrap();
    let mut group = c.benchmark_group("delay_grid_search");
    group.sample_size(10);
    for (name, exec) in MODES {
        let opts = FitOptions {
            exec,
            ..Default::default()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                delay_grid_search(
                    black_box(&exps),
                    &grid,
                    &ModelParams::INITIAL_GUESS,
                    &ErrorWeights::default(),
                    &opts,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn fleet() -> ScenarioSpec {
    let vehicles = (0..20)
        .map(|i| {
            let (cx, cy) = (0.5 + 0.9 * (i % 5) as f64, 0.5 + 0.9 * (i / 5) as f64);
            let traj = TrajectorySpec::Circle {
                cx,
                cy,
                radius: 0.35,
                speed: 0.5,
                duration: 5.0,
            };
            VehicleSpec::new(
                VehicleState::new(cx + 0.35, cy, PI / 2.0, 0.0),
                Script::Trajectory {
                    trajectory: traj,
                    start: 0.0,
                    knot_dt: 0.1,
                    lookahead: 1.0,
                    period_ticks: 5,
                },
            )
        })
        .collect();
    ScenarioSpec {
        name: "fleet".into(),
        duration: 5.0,
        vehicles,
        ident: None,
    }
}

fn fleet_simulation(c: &mut Criterion) {
    let spec = fleet();
    let lab = LabConfig::default();
    let mut group = c.benchmark_group("run_scenario_fleet20");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_scenario(black_box(&spec), &lab, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, grid_search, fleet_simulation);
criterion_main!(benches);
