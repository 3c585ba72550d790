use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context};
use log::{info, warn};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use wqsp_core::bundled;
use wqsp_core::dynamics::{initial_state, simulate, NoiseSpec, SimulateOptions, WqSystem};
use wqsp_core::estimation::{kf_run, measure, reduced_policy, EstimationReport, KalmanConfig, DENSE_STATE_LIMIT};
use wqsp_core::hydraulics::{
    load_hydraulics, model_demands, plan_discretization, synthesize_hydraulics, HydraulicProfile, HydraulicsDocument, SegmentPolicy,
};
use wqsp_core::network::{parse_network_with_warnings, validate, NetworkModel, NodeId, Severity};
use wqsp_core::placement::{
    metric_trace, node_indices, random_baseline, solve_wqsp, GreedyOptions, PlacementConfig, PlacementResult, Scenario,
};
use wqsp_core::Execution;

use crate::config::{config_error, Loaded};
use crate::manifest::Manifest;

fn read_input(loaded: &Loaded, path: &str, manifest: &mut Manifest) -> anyhow::Result<String> {
    let resolved = loaded.path(path);
    let text = fs::read_to_string(&resolved).map_err(|e| config_error(format!("cannot read {}: {e}", resolved.display())))?;
    manifest.input(resolved.display().to_string(), text.as_bytes());
    Ok(text)
}

fn load_model(loaded: &Loaded, manifest: &mut Manifest) -> anyhow::Result<NetworkModel> {
    let spec = loaded.network()?;
    let text = match loaded.bundled_name() {
        Some(name) => {
            let text = match name {
                "three-node" | "three_node" => bundled::THREE_NODE_INP,
                "net1" => bundled::NET1_INP,
                "grid" => bundled::GRID_INP,
                other => return Err(config_error(format!("unknown bundled network {other:?}"))),
            };
            manifest.input(spec, text.as_bytes());
            text.to_string()
        }
        None => read_input(loaded, spec, manifest)?,
    };
    let (model, warnings) = parse_network_with_warnings(&text).context("parsing network")?;
    for w in warnings {
        warn!("network line {}: {}", w.line, w.message);
    }
    let mut errors = Vec::new();
    for d in validate(&model) {
        match d.severity {
            Severity::Error => errors.push(format!("{}: {}", d.subject, d.message)),
            Severity::Warning => warn!("{}: {}", d.subject, d.message),
        }
    }
    if !errors.is_empty() {
        bail!("invalid network: {}", errors.join("; "));
    }
    Ok(model)
}

fn profiles(loaded: &Loaded, model: &NetworkModel, manifest: &mut Manifest) -> anyhow::Result<Vec<HydraulicProfile>> {
    let c = &loaded.config;
    if c.steps == 0 {
        return Err(config_error("`steps` must be at least 1"));
    }
    let files: Vec<&String> = if c.profiles.is_empty() { c.hydraulics.iter().collect() } else { c.profiles.iter().collect() };
    if !files.is_empty() {
        return files
            .into_iter()
            .map(|f| {
                let text = read_input(loaded, f, manifest)?;
                let (profile, warnings) = load_hydraulics(&text, model, None).with_context(|| format!("loading {f}"))?;
                for w in warnings {
                    warn!("{f} step {}: {}", w.step, w.message);
                }
                Ok(profile)
            })
            .collect();
    }
    if c.demand_scales.is_empty() || c.demand_scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(config_error("`demand_scales` must list non-negative multipliers"));
    }
    let settings = loaded.generator();
    let base = model_demands(model, c.steps, 1).context("building demands")?;
    c.demand_scales
        .iter()
        .map(|scale| {
            let mut demands = base.clone();
            for col in &mut demands.per_step {
                col.iter_mut().for_each(|d| *d *= scale);
            }
            synthesize_hydraulics(model, &demands, &settings).context("synthesizing hydraulics")
        })
        .collect()
}

fn scenarios_with(loaded: &Loaded, model: &NetworkModel, profiles: Vec<HydraulicProfile>, policy: SegmentPolicy) -> anyhow::Result<Vec<Scenario>> {
    let window = loaded.config.window_s;
    if !(window.is_finite() && window > 0.0) {
        return Err(config_error("`window_s` must be positive"));
    }
    profiles
        .into_iter()
        .map(|profile| {
            let discretization = plan_discretization(model, &profile, policy, Some(window)).context("discretizing")?;
            Ok(Scenario { profile, discretization })
        })
        .collect()
}

fn scenarios(loaded: &Loaded, model: &NetworkModel, manifest: &mut Manifest) -> anyhow::Result<Vec<Scenario>> {
    let policy = loaded.policy()?;
    let profiles = profiles(loaded, model, manifest)?;
    scenarios_with(loaded, model, profiles, policy)
}

fn create_out(loaded: &Loaded) -> anyhow::Result<std::path::PathBuf> {
    let dir = loaded.out_dir()?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn greedy_options(loaded: &Loaded) -> GreedyOptions {
    GreedyOptions {
        lazy: loaded.config.lazy,
        execution: Execution::Parallel,
    }
}

fn metric_csv(model: &NetworkModel, scenarios: &[Scenario], nodes: &[NodeId], loaded: &Loaded) -> anyhow::Result<String> {
    let variant = loaded.variant()?;
    let traces: Vec<Vec<f64>> = scenarios
        .iter()
        .map(|s| metric_trace(model, s, nodes, &variant, Execution::Parallel))
        .collect::<Result<_, _>>()?;
    let mut csv = String::from("step");
    for i in 0..scenarios.len() {
        let _ = write!(csv, ",f_scenario_{i}");
    }
    csv.push('\n');
    for k in 0..traces[0].len() {
        let _ = write!(csv, "{k}");
        for t in &traces {
            let _ = write!(csv, ",{}", t[k]);
        }
        csv.push('\n');
    }
    Ok(csv)
}

pub fn place(loaded: &Loaded, mut manifest: Manifest) -> anyhow::Result<()> {
    if loaded.config.r == 0 {
        return Err(config_error("`r` must be at least 1"));
    }
    let variant = loaded.variant()?;
    let out = create_out(loaded)?;
    let t = Instant::now();
    let model = load_model(loaded, &mut manifest)?;
    let scenarios = scenarios(loaded, &model, &mut manifest)?;
    manifest.record("hydraulics", t);
    let config = PlacementConfig {
        r: loaded.config.r,
        variant,
        selection: loaded.config.selection,
        greedy: greedy_options(loaded),
    };
    let t = Instant::now();
    let result = solve_wqsp(&model, &scenarios, &config)?;
    manifest.record("placement", t);
    let names: Vec<&str> = result.nodes.iter().map(|n| n.as_str()).collect();
    info!("selected sensors: {}", names.join(", "));

    manifest.write(&out, "placement.json", (result.to_json() + "\n").as_bytes())?;
    let mut occupation = Vec::new();
    result.write_occupation_csv(&mut occupation)?;
    manifest.write(&out, "occupation.csv", &occupation)?;
    let t = Instant::now();
    let csv = metric_csv(&model, &scenarios, &result.nodes, loaded)?;
    manifest.record("metric_trace", t);
    manifest.write(&out, "metric_trace.csv", csv.as_bytes())?;
    println!("{}", names.join(","));
    manifest.finish(&out)
}

pub fn simulate_cmd(loaded: &Loaded, mut manifest: Manifest) -> anyhow::Result<()> {
    let c = &loaded.config;
    if c.process_std > 0.0 {
        loaded.seed()?;
    }
    if c.record_every == 0 {
        return Err(config_error("`record_every` must be at least 1"));
    }
    let out = create_out(loaded)?;
    let model = load_model(loaded, &mut manifest)?;
    let t = Instant::now();
    let scenarios = scenarios(loaded, &model, &mut manifest)?;
    manifest.record("hydraulics", t);
    let scenario = &scenarios[0];
    let t = Instant::now();
    let systems = scenario.systems(&model, Execution::Parallel)?;
    manifest.record("assemble", t);
    let duration = c.duration_s.unwrap_or(scenario.profile.dt_hydraulic_s * scenario.n_steps() as f64);
    if !(duration.is_finite() && duration >= 0.0) {
        return Err(config_error("`duration_s` must be non-negative"));
    }
    let x0 = initial_state(&model, &systems[0].index);
    let options = SimulateOptions {
        duration_s: duration,
        noise: NoiseSpec {
            process_std: c.process_std,
            sensor_std: c.sigma,
        },
        seed: c.seed.unwrap_or(0),
        record_every: c.record_every,
    };
    let t = Instant::now();
    let mut traj = simulate(&systems, &x0, &options)?;
    manifest.record("simulate", t);
    if c.process_std == 0.0 {
        let hi = model
            .reservoirs
            .iter()
            .map(|r| r.source_quality)
            .chain(x0.iter().copied())
            .fold(0.0, f64::max);
        let excursion = traj.excursion(0.0, hi);
        if excursion > 1e-9 {
            warn!("concentrations leave [0, {hi}] by up to {excursion:.3e} (Lax-Wendroff overshoot)");
        }
    }
    if duration == 0.0 {
        traj.times.clear();
        traj.states.clear();
        traj.hydraulic_step.clear();
        traj.index.truncate(1);
    }
    let mut csv = Vec::new();
    traj.write_csv(&mut csv)?;
    manifest.write(&out, "states.csv", &csv)?;
    manifest.finish(&out)
}

fn placement_nodes(loaded: &Loaded, manifest: &mut Manifest) -> anyhow::Result<Vec<NodeId>> {
    if !loaded.config.sensors.is_empty() {
        return Ok(loaded.config.sensors.iter().map(|s| NodeId::new(s.as_str())).collect());
    }
    let path = loaded
        .config
        .placement
        .as_deref()
        .ok_or_else(|| config_error("`placement` or `sensors` is required"))?;
    let text = read_input(loaded, path, manifest)?;
    let result: PlacementResult = serde_json::from_str(&text).with_context(|| format!("reading placement {path}"))?;
    Ok(result.nodes)
}

pub fn evaluate(loaded: &Loaded, mut manifest: Manifest) -> anyhow::Result<()> {
    let c = &loaded.config;
    let seed = loaded.seed()?;
    let variant = loaded.variant()?;
    let out = create_out(loaded)?;
    let model = load_model(loaded, &mut manifest)?;
    let nodes = placement_nodes(loaded, &mut manifest)?;
    node_indices(&model, &nodes)?;
    let scenarios = scenarios(loaded, &model, &mut manifest)?;

    let t = Instant::now();
    let csv = metric_csv(&model, &scenarios, &nodes, loaded)?;
    manifest.record("metric", t);
    manifest.write(&out, "metric_per_step.csv", csv.as_bytes())?;

    let t = Instant::now();
    let deltas = random_baseline(&model, &scenarios[0], &nodes, nodes.len(), c.count, seed, &variant, Execution::Parallel)?;
    manifest.record("random_baseline", t);
    let mut csv = String::from("step");
    for i in 0..c.count {
        let _ = write!(csv, ",delta_f_{i}");
    }
    csv.push('\n');
    for (k, row) in deltas.iter().enumerate() {
        let _ = write!(csv, "{k}");
        for d in row {
            let _ = write!(csv, ",{d}");
        }
        csv.push('\n');
    }
    manifest.write(&out, "random_delta.csv", csv.as_bytes())?;
    let min = deltas.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let negative = deltas.iter().flatten().filter(|d| **d < 0.0).count();
    println!("min delta f {min}, {negative} negative of {}", deltas.len() * c.count);
    manifest.finish(&out)
}

#[derive(Serialize)]
struct EstimationOutput<'a> {
    sensors: &'a [NodeId],
    n_x: usize,
    reduced_model: bool,
    dt: f64,
    mean_rmse: f64,
    /// Placement metric of the sensor set at every hydraulic step.
    metric: Vec<f64>,
    report: &'a EstimationReport,
}

pub fn estimate(loaded: &Loaded, mut manifest: Manifest) -> anyhow::Result<()> {
    let c = &loaded.config;
    let seed = loaded.seed()?;
    let variant = loaded.variant()?;
    let out = create_out(loaded)?;
    let model = load_model(loaded, &mut manifest)?;
    let nodes = placement_nodes(loaded, &mut manifest)?;
    let sensors = node_indices(&model, &nodes)?;
    let profiles = profiles(loaded, &model, &mut manifest)?;
    let profile = profiles.into_iter().next().expect("at least one profile");

    let requested = loaded.policy()?;
    let mut scenario = scenarios_with(loaded, &model, vec![profile.clone()], requested)?.remove(0);
    let largest = scenario.discretization.steps.iter().map(|s| s.total_segments()).max().unwrap_or(0) + model.n_nodes();
    let reduced = matches!(requested, SegmentPolicy::Dynamic { .. }) || largest > DENSE_STATE_LIMIT;
    if reduced {
        info!("running the filter on the reduced model");
        scenario = scenarios_with(loaded, &model, vec![profile], reduced_policy())?.remove(0);
    }
    let t = Instant::now();
    let systems = scenario.systems(&model, Execution::Parallel)?;
    manifest.record("assemble", t);
    let n_x = systems[0].n_x();

    let c_max = model.reservoirs.iter().map(|r| r.source_quality).fold(0.0, f64::max).max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x0: Vec<f64> = (0..n_x).map(|_| rng.random_range(0.0..c_max)).collect();
    for (i, r) in model.reservoirs.iter().enumerate() {
        x0[model.junctions.len() + i] = r.source_quality;
    }
    let duration = c.duration_s.unwrap_or(scenario.profile.dt_hydraulic_s);
    let options = SimulateOptions {
        duration_s: duration,
        noise: NoiseSpec {
            process_std: c.process_std,
            sensor_std: c.sigma,
        },
        seed,
        record_every: 1,
    };
    let t = Instant::now();
    let truth = simulate(&systems, &x0, &options)?;
    manifest.record("simulate", t);
    let measurements = measure(&truth.states, &sensors, c.sigma, seed.wrapping_add(1));
    let transitions: Vec<&WqSystem> = truth.hydraulic_step[..truth.len() - 1].iter().map(|k| &systems[*k]).collect();
    let mut x_hat0 = vec![0.5 * c_max; n_x];
    for (i, r) in model.reservoirs.iter().enumerate() {
        x_hat0[model.junctions.len() + i] = r.source_quality;
    }
    let p0 = DMatrix::identity(n_x, n_x) * c.prior_variance;
    let config = KalmanConfig {
        process_std: c.process_std,
        sensor_std: c.sigma,
    };
    let t = Instant::now();
    let report = kf_run(&transitions, &sensors, &truth.states, &measurements, &x_hat0, &p0, &config)?;
    manifest.record("filter", t);
    let metric = metric_trace(&model, &scenario, &nodes, &variant, Execution::Parallel)?;

    let output = EstimationOutput {
        sensors: &nodes,
        n_x,
        reduced_model: reduced,
        dt: systems[0].dt,
        mean_rmse: report.mean_rmse(),
        metric,
        report: &report,
    };
    manifest.write(&out, "estimation.json", (serde_json::to_string_pretty(&output)? + "\n").as_bytes())?;
    let mut csv = String::from("step,time_s,rmse,innovation,covariance_trace\n");
    for k in 0..report.rmse.len() {
        let _ = writeln!(
            csv,
            "{k},{},{},{},{}",
            truth.times[k], report.rmse[k], report.innovation[k], report.covariance_trace[k]
        );
    }
    manifest.write(&out, "rmse.csv", csv.as_bytes())?;
    println!("mean rmse {}", report.mean_rmse());
    manifest.finish(&out)
}

pub fn inspect(loaded: &Loaded, mut manifest: Manifest) -> anyhow::Result<()> {
    let model = load_model(loaded, &mut manifest)?;
    let scenarios = scenarios(loaded, &model, &mut manifest)?;
    let mut csv = String::from("scenario,step,n_x,nnz,sparsity,dt,window_steps,stable_dt,segments_total,segments_min,segments_max\n");
    println!(
        "{:>8} {:>5} {:>9} {:>10} {:>9} {:>9} {:>5} {:>10} {:>9}",
        "scenario", "step", "n_x", "nnz", "sparsity%", "dt_s", "k_f", "stable_dt", "segments"
    );
    for (i, s) in scenarios.iter().enumerate() {
        for (k, d) in s.discretization.steps.iter().enumerate() {
            let system = s.system(&model, k)?;
            let max_courant = d.courant.iter().copied().fold(0.0, f64::max);
            let stable = if max_courant > 0.0 { d.dt / max_courant } else { f64::INFINITY };
            let (lo, hi) = (
                d.segments.iter().copied().min().unwrap_or(0),
                d.segments.iter().copied().max().unwrap_or(0),
            );
            println!(
                "{i:>8} {k:>5} {:>9} {:>10} {:>9.5} {:>9.4} {:>5} {:>10.4} {:>9}",
                system.n_x(),
                system.a.nnz(),
                100.0 * system.sparsity(),
                d.dt,
                d.window_steps,
                stable,
                d.total_segments()
            );
            let _ = writeln!(
                csv,
                "{i},{k},{},{},{},{},{},{stable},{},{lo},{hi}",
                system.n_x(),
                system.a.nnz(),
                system.sparsity(),
                d.dt,
                d.window_steps,
                d.total_segments()
            );
        }
    }
    if loaded.config.out.is_some() {
        let out = create_out(loaded)?;
        manifest.write(&out, "inspect.csv", csv.as_bytes())?;
        manifest.finish(&out)?;
    }
    Ok(())
}

pub fn gen_hydraulics(loaded: &Loaded, mut manifest: Manifest) -> anyhow::Result<()> {
    let out = create_out(loaded)?;
    let model = load_model(loaded, &mut manifest)?;
    let t = Instant::now();
    let profiles = profiles(loaded, &model, &mut manifest)?;
    manifest.record("generate", t);
    for (i, p) in profiles.iter().enumerate() {
        let name = if profiles.len() == 1 { "hydraulics.json".to_string() } else { format!("hydraulics_{i}.json") };
        let doc = HydraulicsDocument::from_profile(&model, p);
        manifest.write(&out, &name, (serde_json::to_string_pretty(&doc)? + "\n").as_bytes())?;
        println!("{}", Path::new(&out).join(&name).display());
    }
    manifest.finish(&out)
}
