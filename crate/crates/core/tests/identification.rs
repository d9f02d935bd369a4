use ucar::dynamics::ModelParams;
use ucar::ident::{
    delay_grid_search, estimate_parameters, objective, slice_experiments, DelayConfig, DelayGrid,
    ErrorWeights, Experiment, FitOptions, InitMode, InitialStates,
};
use ucar::labsim::{generate_ident_log, ExcitationProfile, IdentLogSpec, LabConfig};
use ucar::Exec;

fn experiments(profile: ExcitationProfile, duration: f64, delays: DelayConfig) -> Vec<Experiment> {
    let spec = IdentLogSpec {
        profile,
        duration,
        ..Default::default()
    };
    let log = generate_ident_log(
        &spec,
        &LabConfig::default(),
        &ModelParams::REFERENCE,
        delays,
    )
    .unwrap();
    slice_experiments(&log, 100, 0.02).unwrap().experiments
}

fn max_rel_error(p: &ModelParams) -> f64 {
    p.0.iter()
        .zip(ModelParams::REFERENCE.0)
        .map(|(e, t)| ((e - t) / t).abs())
        .fold(0.0, f64::max)
}

#[test]
fn grid_search_recovers_injected_delays() {
    let exps = experiments(
        ExcitationProfile::RandomChirp,
        60.0,
        DelayConfig::new(1, 0, 5),
    );
    let grid = DelayGrid::parse("ips=0..2,local=0..1,act=4..6").unwrap();
    let fit = delay_grid_search(
        &exps,
        &grid,
        &ModelParams::INITIAL_GUESS,
        &ErrorWeights::default(),
        &FitOptions::default(),
    )
    .unwrap();
    assert_eq!(fit.delays, DelayConfig::new(1, 0, 5));
    assert!(max_rel_error(&fit.params) < 1e-4, "{:?}", fit.params);
    assert_eq!(fit.diagnostics.grid.len(), 18);
    // (2, 1, 4) sees the same aligned data and is reported as a tie
    assert!(fit.diagnostics.ties.contains(&DelayConfig::new(2, 1, 4)));
}

#[test]
fn zero_delay_round_trip() {
    let exps = experiments(ExcitationProfile::RandomChirp, 40.0, DelayConfig::default());
    let fit = estimate_parameters(
        &exps,
        DelayConfig::default(),
        &ModelParams::INITIAL_GUESS,
        &ErrorWeights::default(),
        &FitOptions::default(),
    )
    .unwrap();
    assert!(max_rel_error(&fit.params) <= 1e-4, "{:?}", fit.params);
    assert!(fit.objective < 1e-10);
    assert!(!fit.diagnostics.rank.rank_deficient);
}

#[test]
fn figure_eight_profile_round_trip() {
    let exps = experiments(ExcitationProfile::FigureEight, 60.0, DelayConfig::default());
    let fit = estimate_parameters(
        &exps,
        DelayConfig::default(),
        &ModelParams::INITIAL_GUESS,
        &ErrorWeights::default(),
        &FitOptions::default(),
    )
    .unwrap();
    assert!(fit.objective < 1e-8, "{}", fit.objective);
}

#[test]
fn free_initial_states_round_trip() {
    let exps = experiments(ExcitationProfile::RandomChirp, 20.0, DelayConfig::default());
    let opts = FitOptions {
        init_mode: InitMode::Free,
        ..Default::default()
    };
    let fit = estimate_parameters(
        &exps,
        DelayConfig::default(),
        &ModelParams::INITIAL_GUESS,
        &ErrorWeights::default(),
        &opts,
    )
    .unwrap();
    assert!(max_rel_error(&fit.params) <= 1e-4, "{:?}", fit.params);
    assert_eq!(fit.initial_states.as_ref().map(Vec::len), Some(exps.len()));
}

#[test]
fn zero_excitation_is_rank_deficient() {
    let exps = experiments(ExcitationProfile::Zero, 10.0, DelayConfig::default());
    let fit = estimate_parameters(
        &exps,
        DelayConfig::default(),
        &ModelParams::INITIAL_GUESS,
        &ErrorWeights::default(),
        &FitOptions::default(),
    )
    .unwrap();
    let rank = &fit.diagnostics.rank;
    assert!(rank.rank_deficient);
    assert!(rank.numerical_rank < 10);
    assert!(!rank.zero_columns.is_empty());
}

#[test]
fn execution_mode_does_not_change_results() {
    let exps = experiments(
        ExcitationProfile::RandomChirp,
        10.0,
        DelayConfig::new(1, 0, 5),
    );
    let w = ErrorWeights::default();
    let run = |exec| {
        let opts = FitOptions {
            exec,
            ..Default::default()
        };
        let grid = DelayGrid::parse("ips=0..1,local=0..0,act=4..5").unwrap();
        delay_grid_search(&exps, &grid, &ModelParams::INITIAL_GUESS, &w, &opts).unwrap()
    };
    assert_eq!(run(Exec::Sequential), run(Exec::Parallel));
    let obj = |exec| {
        let opts = FitOptions {
            exec,
            ..Default::default()
        };
        objective(
            &exps,
            &ModelParams::REFERENCE,
            DelayConfig::new(1, 0, 5),
            &w,
            &InitialStates::Measured,
            &opts,
        )
        .unwrap()
    };
    assert_eq!(obj(Exec::Sequential), obj(Exec::Parallel));
}
