use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use ucar::controller::{ControllerKind, MpcConfig, PidGains};
use ucar::dynamics::ModelParams;
use ucar::ident::{
    apply_delays, delay_grid_search, fit_initial_state, load_measurement_log, predict,
    slice_experiments, write_measurement_log, DelayConfig, DelayGrid, ErrorWeights, FitOptions,
    FitResult, IdentError, InitMode, LmOptions, DEFAULT_WINDOW,
};
use ucar::labsim::{
    config_hash, generate_ident_log, run_scenario, tracking_summary, write_trace,
    ExcitationProfile, IdentLogSpec, LabConfig, LabError, MeasurementNoise, ScenarioSpec,
    TrackingSummary,
};
use ucar::{wrap_angle, Exec, DEFAULT_DT};

use crate::manifest::{self, FileDigest, RunManifest};
use crate::{
    config_error, insufficient, runtime_error, ControllerChoice, InitModeArg, Invocation, NoiseArg,
};

/// What a command did, for its manifest.
struct Outcome {
    seed: Option<u64>,
    config: Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    manifest: PathBuf,
}

pub fn run(inv: &Invocation) -> Result<()> {
    let outcome = match inv {
        Invocation::Simulate(a) => simulate(a)?,
        Invocation::Follow(a) => follow(a)?,
        Invocation::Identify(a) => identify(a)?,
        Invocation::EvalModel(a) => eval_model(a)?,
        Invocation::GenLog(a) => gen_log(a)?,
        Invocation::Rerun(a) => return rerun(&a.manifest, a.out.as_deref()),
    };
    let digests = |paths: &[PathBuf]| {
        paths
            .iter()
            .map(|p| FileDigest::of(p))
            .collect::<Result<Vec<_>>>()
    };
    let m = RunManifest {
        command: inv.name().into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: outcome.seed,
        config: outcome.config,
        invocation: inv.clone(),
        inputs: digests(&outcome.inputs)?,
        outputs: digests(&outcome.outputs)?,
    };
    m.write(&outcome.manifest)
}

fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_error(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| config_error(format!("invalid {what} {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))
}

fn lab_error(e: LabError) -> anyhow::Error {
    match e {
        LabError::Invalid(errs) => {
            config_error(format!("invalid configuration: {}", errs.join("; ")))
        }
        other => runtime_error(other.to_string()),
    }
}

fn ident_error(e: IdentError) -> anyhow::Error {
    match e {
        IdentError::NoExperiments | IdentError::EmptyAlignment { .. } => {
            insufficient(e.to_string())
        }
        IdentError::AllCombinationsFailed(_) => runtime_error(e.to_string()),
        other => config_error(other.to_string()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| config_error(format!("cannot create {}: {e}", dir.display())))
}

fn load_lab(path: Option<&Path>, seed: Option<u64>) -> Result<LabConfig> {
    let mut lab: LabConfig = match path {
        Some(p) => read_json(p, "lab config")?,
        None => LabConfig::default(),
    };
    if let Some(s) = seed {
        lab.seed = s;
    }
    lab.validate().map_err(lab_error)?;
    Ok(lab)
}

/// Parameters from either an identification report or a bare array.
fn load_params(path: &Path) -> Result<(ModelParams, Option<DelayConfig>)> {
    let v: Value = read_json(path, "params file")?;
    let bad =
        |e: serde_json::Error| config_error(format!("invalid params file {}: {e}", path.display()));
    let (params, delays) = match v {
        Value::Object(ref obj) if obj.contains_key("params") => {
            let p: ModelParams = serde_json::from_value(obj["params"].clone()).map_err(bad)?;
            let d = match obj.get("delays") {
                Some(d) => Some(serde_json::from_value(d.clone()).map_err(bad)?),
                None => None,
            };
            (p, d)
        }
        other => (serde_json::from_value(other).map_err(bad)?, None),
    };
    params
        .validate()
        .map_err(|e| config_error(format!("params file {}: {e}", path.display())))?;
    Ok((params, delays))
}

fn parse_delays(s: &str) -> Result<DelayConfig> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| config_error(format!("invalid delays '{s}': {e}")))?;
    match parts[..] {
        [ips, local, act] => Ok(DelayConfig::new(ips, local, act)),
        _ => Err(config_error(format!(
            "delays must be 'ips,local,act', got '{s}'"
        ))),
    }
}

fn simulate(a: &crate::SimulateArgs) -> Result<Outcome> {
    let spec: ScenarioSpec = read_json(&a.scenario, "scenario")?;
    let lab = load_lab(a.lab.as_deref(), a.seed)?;
    create_dir(&a.out)?;
    let trace = run_scenario(&spec, &lab, Exec::default()).map_err(lab_error)?;
    let outputs = write_trace(&trace, &a.out).map_err(lab_error)?;
    for exit in &trace.arena_exits {
        eprintln!(
            "warning: vehicle {} left the arena at step {}",
            exit.vehicle, exit.step
        );
    }
    println!(
        "simulated {} vehicles for {} steps, config {}",
        trace.vehicles,
        trace.steps,
        config_hash(&spec, &lab)
    );
    let mut inputs = vec![a.scenario.clone()];
    inputs.extend(a.lab.clone());
    Ok(Outcome {
        seed: Some(lab.seed),
        config: json!({ "scenario": spec, "lab": lab, "config_hash": config_hash(&spec, &lab) }),
        inputs,
        outputs,
        manifest: manifest::in_dir(&a.out),
    })
}

#[derive(Debug, Serialize)]
struct FollowSummary {
    controller: ControllerChoice,
    params: ModelParams,
    mean_pos_error: f64,
    max_pos_error: f64,
    mean_yaw_error: f64,
    max_yaw_error: f64,
    safe_stops: usize,
    vehicles: Vec<TrackingSummary>,
}

fn follow(a: &crate::FollowArgs) -> Result<Outcome> {
    let mut spec: ScenarioSpec = read_json(&a.scenario, "scenario")?;
    let (params, _) = load_params(&a.params)?;
    let lab = load_lab(a.lab.as_deref(), a.seed)?;
    for v in &mut spec.vehicles {
        v.controller.params = params;
        v.controller.controller = match (a.controller, &v.controller.controller) {
            (ControllerChoice::Mpc, ControllerKind::Mpc(c)) => ControllerKind::Mpc(*c),
            (ControllerChoice::Pid, ControllerKind::Pid(g)) => ControllerKind::Pid(*g),
            (ControllerChoice::Mpc, _) => ControllerKind::Mpc(MpcConfig::default()),
            (ControllerChoice::Pid, _) => ControllerKind::Pid(PidGains::default()),
        };
    }
    create_dir(&a.out)?;
    let trace = run_scenario(&spec, &lab, Exec::default()).map_err(lab_error)?;
    let mut outputs = write_trace(&trace, &a.out).map_err(lab_error)?;
    let vehicles = tracking_summary(&trace, &spec);
    if vehicles.is_empty() {
        return Err(config_error(
            "no vehicle in the scenario follows a trajectory",
        ));
    }
    let n: usize = vehicles.iter().map(|s| s.samples).sum();
    let weighted = |f: fn(&TrackingSummary) -> f64| {
        vehicles
            .iter()
            .map(|s| f(s) * s.samples as f64)
            .sum::<f64>()
            / n as f64
    };
    let summary = FollowSummary {
        controller: a.controller,
        params,
        mean_pos_error: weighted(|s| s.mean_pos_error),
        max_pos_error: vehicles.iter().map(|s| s.max_pos_error).fold(0.0, f64::max),
        mean_yaw_error: weighted(|s| s.mean_yaw_error),
        max_yaw_error: vehicles.iter().map(|s| s.max_yaw_error).fold(0.0, f64::max),
        safe_stops: trace.control.iter().filter(|c| c.safe_stop).count(),
        vehicles,
    };
    let path = a.out.join("summary.json");
    write_json(&path, &summary)?;
    outputs.push(path);
    println!(
        "{}: mean position error {:.4} m, max {:.4} m, mean yaw error {:.4} rad",
        format!("{:?}", a.controller).to_lowercase(),
        summary.mean_pos_error,
        summary.max_pos_error,
        summary.mean_yaw_error
    );
    Ok(Outcome {
        seed: Some(lab.seed),
        config: json!({ "scenario": spec, "lab": lab, "controller": a.controller }),
        inputs: vec![a.scenario.clone(), a.params.clone()]
            .into_iter()
            .chain(a.lab.clone())
            .collect(),
        outputs,
        manifest: manifest::in_dir(&a.out),
    })
}

/// Options of an identification run. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentifyOptions {
    pub window: usize,
    pub dt: f64,
    pub grid: DelayGrid,
    pub weights: ErrorWeights,
    pub init_mode: InitMode,
    pub initial_guess: ModelParams,
    pub lm: LmOptions,
}

impl Default for IdentifyOptions {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            dt: DEFAULT_DT,
            grid: DelayGrid::default(),
            weights: ErrorWeights::default(),
            init_mode: InitMode::Measured,
            initial_guess: ModelParams::INITIAL_GUESS,
            lm: LmOptions::default(),
        }
    }
}

#[derive(Debug, Serialize)]
struct IdentifyReport<'a> {
    #[serde(flatten)]
    fit: &'a FitResult,
    experiments: usize,
    discarded_windows: Vec<Value>,
    dropped_tail: usize,
}

fn identify(a: &crate::IdentifyArgs) -> Result<Outcome> {
    let mut opts: IdentifyOptions = match &a.options {
        Some(p) => read_json(p, "identification options")?,
        None => IdentifyOptions::default(),
    };
    if let Some(w) = a.window {
        opts.window = w;
    }
    if let Some(g) = &a.grid {
        opts.grid = DelayGrid::parse(g).map_err(ident_error)?;
    }
    if let Some(m) = a.init_mode {
        opts.init_mode = match m {
            InitModeArg::Measured => InitMode::Measured,
            InitModeArg::Free => InitMode::Free,
        };
    }
    let log = load_measurement_log(&a.log).map_err(ident_error)?;
    let sliced = slice_experiments(&log, opts.window, opts.dt).map_err(ident_error)?;
    let discarded: Vec<Value> = sliced
        .discarded
        .iter()
        .map(|d| json!({ "window": d.window, "start_time": d.start_time, "gap_at": d.gap_at }))
        .collect();
    if sliced.experiments.is_empty() {
        let gaps = sliced
            .discarded
            .iter()
            .map(|d| {
                format!(
                    "window {} at t={} (gap at sample {})",
                    d.window, d.start_time, d.gap_at
                )
            })
            .collect::<Vec<_>>();
        let mut reason = format!(
            "no complete experiments: {} samples, window {}, {} windows discarded",
            log.len(),
            opts.window,
            gaps.len()
        );
        if !gaps.is_empty() {
            reason.push_str(&format!(": {}", gaps.join(", ")));
        }
        return Err(insufficient(reason));
    }
    let fit_opts = FitOptions {
        init_mode: opts.init_mode,
        lm: opts.lm,
        dt: opts.dt,
        ..Default::default()
    };
    let fit = delay_grid_search(
        &sliced.experiments,
        &opts.grid,
        &opts.initial_guess,
        &opts.weights,
        &fit_opts,
    )
    .map_err(ident_error)?;

    for (i, p) in fit.params.0.iter().enumerate() {
        println!("p{} = {p:.6}", i + 1);
    }
    println!("delays {}", fit.delays);
    println!(
        "objective {:.6e} over {} experiments",
        fit.objective,
        sliced.experiments.len()
    );

    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let report = IdentifyReport {
        fit: &fit,
        experiments: sliced.experiments.len(),
        discarded_windows: discarded,
        dropped_tail: sliced.dropped_tail,
    };
    write_json(&a.out, &report)?;
    Ok(Outcome {
        seed: None,
        config: serde_json::to_value(&opts)?,
        inputs: std::iter::once(a.log.clone())
            .chain(a.options.clone())
            .collect(),
        outputs: vec![a.out.clone()],
        manifest: manifest::beside(&a.out),
    })
}

#[derive(Debug, Default, Clone, Copy, Serialize)]
struct ChannelStats {
    rms: f64,
    mean: f64,
    max_abs: f64,
}

#[derive(Debug, Default)]
struct Accum {
    n: usize,
    sum: f64,
    sum_sq: f64,
    max_abs: f64,
}

impl Accum {
    fn add(&mut self, r: f64) {
        self.n += 1;
        self.sum += r;
        self.sum_sq += r * r;
        self.max_abs = self.max_abs.max(r.abs());
    }

    fn stats(&self) -> ChannelStats {
        let n = self.n.max(1) as f64;
        ChannelStats {
            rms: (self.sum_sq / n).sqrt(),
            mean: self.sum / n,
            max_abs: self.max_abs,
        }
    }
}

#[derive(Debug, Serialize)]
struct SeriesRow {
    window: usize,
    t: f64,
    x_meas: f64,
    x_pred: f64,
    y_meas: f64,
    y_pred: f64,
    psi_meas: f64,
    psi_pred: f64,
    v_meas: f64,
    v_pred: f64,
}

fn eval_model(a: &crate::EvalModelArgs) -> Result<Outcome> {
    let (params, report_delays) = load_params(&a.params)?;
    let delays = match &a.delays {
        Some(s) => parse_delays(s)?,
        None => report_delays.ok_or_else(|| {
            config_error("params file has no delays; pass --delays ips,local,act")
        })?,
    };
    let window = a.window.unwrap_or(DEFAULT_WINDOW);
    let log = load_measurement_log(&a.log).map_err(ident_error)?;
    let sliced = slice_experiments(&log, window, DEFAULT_DT).map_err(ident_error)?;
    if sliced.experiments.is_empty() {
        return Err(insufficient(format!(
            "no complete experiments of {window} samples in {}",
            a.log.display()
        )));
    }
    create_dir(&a.out)?;

    let mut acc: [Accum; 4] = Default::default();
    let mut rows = Vec::new();
    for (w, exp) in sliced.experiments.iter().enumerate() {
        let al = apply_delays(exp, delays).map_err(ident_error)?;
        let x0 = match a.init_mode {
            InitModeArg::Measured => None,
            InitModeArg::Free => Some(fit_initial_state(
                &al,
                &params,
                &ErrorWeights::default(),
                DEFAULT_DT,
                &LmOptions::default(),
            )),
        };
        let pred = predict(&al, &params, x0, DEFAULT_DT)
            .ok_or_else(|| runtime_error(format!("model prediction diverged in experiment {w}")))?;
        for (j, (p, m)) in pred.iter().zip(&al.measured).enumerate() {
            let r = [p.x - m.x, p.y - m.y, wrap_angle(p.psi - m.psi), p.v - m.v];
            for (a, r) in acc.iter_mut().zip(r) {
                a.add(r);
            }
            rows.push(SeriesRow {
                window: w,
                t: al.t[j],
                x_meas: m.x,
                x_pred: p.x,
                y_meas: m.y,
                y_pred: p.y,
                psi_meas: m.psi,
                psi_pred: p.psi,
                v_meas: m.v,
                v_pred: p.v,
            });
        }
    }
    let samples = acc[0].n;
    let [x, y, psi, v] = acc.map(|a| a.stats());
    let residuals = json!({
        "delays": delays,
        "experiments": sliced.experiments.len(),
        "samples": samples,
        "x": x, "y": y, "psi": psi, "v": v,
    });
    let res_path = a.out.join("residuals.json");
    write_json(&res_path, &residuals)?;
    let series_path = a.out.join("series.csv");
    let mut wtr = csv::Writer::from_path(&series_path)
        .with_context(|| format!("writing {}", series_path.display()))?;
    for r in &rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    println!(
        "residual rms: x {:.4e} m, y {:.4e} m, psi {:.4e} rad, v {:.4e} m/s (delays {delays})",
        x.rms, y.rms, psi.rms, v.rms
    );
    Ok(Outcome {
        seed: None,
        config: json!({
            "params": params,
            "delays": delays,
            "window": window,
            "dt": DEFAULT_DT,
            "init_mode": a.init_mode,
        }),
        inputs: vec![a.log.clone(), a.params.clone()],
        outputs: vec![res_path, series_path],
        manifest: manifest::in_dir(&a.out),
    })
}

fn gen_log(a: &crate::GenLogArgs) -> Result<Outcome> {
    let profile: ExcitationProfile = a
        .profile
        .parse()
        .map_err(|e| config_error(format!("invalid profile '{}': {e}", a.profile)))?;
    let params = match &a.params {
        Some(p) => load_params(p)?.0,
        None => ModelParams::REFERENCE,
    };
    let delays = parse_delays(&a.delays)?;
    let spec = IdentLogSpec {
        profile,
        duration: a.duration,
        noise: match a.noise {
            NoiseArg::None => MeasurementNoise::default(),
            NoiseArg::Typical => MeasurementNoise::typical(),
        },
        ..Default::default()
    };
    let lab = LabConfig {
        seed: a.seed,
        ..Default::default()
    };
    let log = generate_ident_log(&spec, &lab, &params, delays).map_err(lab_error)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let file = std::fs::File::create(&a.out)
        .map_err(|e| config_error(format!("cannot create {}: {e}", a.out.display())))?;
    write_measurement_log(&log, std::io::BufWriter::new(file))
        .map_err(|e| runtime_error(e.to_string()))?;
    println!("wrote {} samples to {}", log.len(), a.out.display());
    Ok(Outcome {
        seed: Some(a.seed),
        config: json!({ "spec": spec, "dt": lab.dt, "params": params, "delays": delays }),
        inputs: a.params.iter().cloned().collect(),
        outputs: vec![a.out.clone()],
        manifest: manifest::beside(&a.out),
    })
}

/// Point the outputs of `inv` into `dir`.
fn redirect(inv: &mut Invocation, dir: &Path) -> Result<()> {
    let file_in = |p: &Path| dir.join(p.file_name().unwrap_or_default());
    match inv {
        Invocation::Simulate(a) => a.out = dir.to_path_buf(),
        Invocation::Follow(a) => a.out = dir.to_path_buf(),
        Invocation::EvalModel(a) => a.out = dir.to_path_buf(),
        Invocation::Identify(a) => a.out = file_in(&a.out),
        Invocation::GenLog(a) => a.out = file_in(&a.out),
        Invocation::Rerun(_) => return Err(config_error("a manifest cannot record a rerun")),
    }
    Ok(())
}

fn rerun(path: &Path, out: Option<&Path>) -> Result<()> {
    let recorded = RunManifest::read(path)?;
    for input in &recorded.inputs {
        let now = FileDigest::of(Path::new(&input.path))
            .map_err(|e| config_error(format!("input {} unavailable: {e:#}", input.path)))?;
        if now.sha256 != input.sha256 {
            return Err(config_error(format!(
                "input {} changed since the recorded run",
                input.path
            )));
        }
    }
    let mut inv = recorded.invocation.clone();
    if let Some(dir) = out {
        create_dir(dir)?;
        redirect(&mut inv, dir)?;
    }
    let fresh_dir = out.map(Path::to_path_buf);
    run(&inv)?;
    let mut mismatched = Vec::new();
    for o in &recorded.outputs {
        let now_path = match (&fresh_dir, o.file_name()) {
            (Some(dir), Some(name)) => dir.join(name),
            _ => PathBuf::from(&o.path),
        };
        let now = FileDigest::of(&now_path)?;
        if now.sha256 != o.sha256 {
            mismatched.push(now_path.display().to_string());
        }
    }
    if mismatched.is_empty() {
        println!(
            "reproduced {} outputs of {} bitwise",
            recorded.outputs.len(),
            recorded.command
        );
        Ok(())
    } else {
        Err(runtime_error(format!(
            "outputs differ from the recorded run: {}",
            mismatched.join(", ")
        )))
    }
}
