//! Subcommand implementations. Every output file starts with a
//! provenance comment carrying the config hash, seed, and version.

use crate::config::ExperimentConfig;
use anyhow::{anyhow, bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use projrl_core::autodiff::{self, Node};
use projrl_core::envs::feeder::synth_feeder;
use projrl_core::envs::traces::{synth_building_traces, synth_feeder_traces, TraceSet};
use projrl_core::projection::{project, projection_layer};
use projrl_core::rng;
use projrl_core::sysid::eval_rmse;
use projrl_core::training::{
    pretrain_building, run_building, run_feeder, setup_feeder_model, sysid_building,
    BuildingController, BuildingRunOptions, Checkpoint, DirectHyper, FeederController,
    FeederRunOptions, FeederSetup, FeederPolicy, GradMode, LstmPolicy, Mlp, PpoHyper, StepMetrics,
};
use projrl_core::training::runner::{
    feeder_policy_dims, CONTROL_STEPS_PER_DAY, HISTORY_STEPS, LSTM_HIDDEN,
};
use projrl_core::{LinearConstraintSet, Tensor};
use rand::Rng;
use serde::Serialize;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

fn provenance(cfg: &ExperimentConfig, seed: u64) -> String {
    format!("# config_hash={} seed={} version={}", cfg.hash(), seed, VERSION)
}

fn out_path(cfg: &ExperimentConfig, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("cannot create out dir {}", cfg.out_dir))?;
    Ok(Path::new(&cfg.out_dir).join(name))
}

fn write_metrics(path: &Path, cfg: &ExperimentConfig, seed: u64, rows: &[StepMetrics]) -> Result<()> {
    let n_action = rows.first().map_or(0, |r| r.action.len());
    let n_state = rows.first().map_or(0, |r| r.state.len());
    let mut f = fs::File::create(path)?;
    writeln!(f, "{}", provenance(cfg, seed))?;
    let mut header = String::from(
        "step,timestamp,cost,curtailment_or_energy,violation_count,infeasible_relaxations",
    );
    for i in 0..n_action {
        header.push_str(&format!(",action_{i}"));
    }
    for i in 0..n_state {
        header.push_str(&format!(",state_{i}"));
    }
    writeln!(f, "{header}")?;
    for r in rows {
        let mut line = format!(
            "{},{},{},{},{},{}",
            r.step,
            r.timestamp.format("%Y-%m-%dT%H:%M:%S"),
            r.cost,
            r.curtailment_or_energy,
            r.violation_count,
            r.infeasible_relaxations,
        );
        for v in &r.action {
            line.push_str(&format!(",{v}"));
        }
        for v in &r.state {
            line.push_str(&format!(",{v}"));
        }
        writeln!(f, "{line}")?;
    }
    Ok(())
}

#[derive(Serialize)]
struct RunSummary {
    config_hash: String,
    seed: u64,
    version: String,
    task: String,
    controller: String,
    steps: usize,
    total_cost: f64,
    total_curtailment_or_energy: f64,
    violation_steps: usize,
    infeasible_relaxations: usize,
}

fn write_summary(path: &Path, cfg: &ExperimentConfig, seed: u64, rows: &[StepMetrics]) -> Result<()> {
    let summary = RunSummary {
        config_hash: cfg.hash(),
        seed,
        version: VERSION.into(),
        task: cfg.task.clone(),
        controller: cfg.controller.clone(),
        steps: rows.len(),
        total_cost: rows.iter().map(|r| r.cost).sum(),
        total_curtailment_or_energy: rows.iter().map(|r| r.curtailment_or_energy).sum(),
        violation_steps: rows.iter().filter(|r| r.violation_count > 0).count(),
        infeasible_relaxations: rows.iter().map(|r| r.infeasible_relaxations).sum(),
    };
    fs::write(path, serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

fn building_trace(cfg: &ExperimentConfig, days: usize) -> Result<TraceSet> {
    if cfg.trace.source == "synth" {
        Ok(synth_building_traces(cfg.trace.synth_seed, days.max(cfg.trace.days)))
    } else {
        TraceSet::read_csv_path(Path::new(&cfg.trace.source)).map_err(Into::into)
    }
}

fn feeder_trace(cfg: &ExperimentConfig, n_bus: usize, days: usize) -> Result<TraceSet> {
    if cfg.trace.source == "synth" {
        Ok(synth_feeder_traces(cfg.trace.synth_seed, days.max(cfg.trace.days), n_bus))
    } else {
        TraceSet::read_csv_path(Path::new(&cfg.trace.source)).map_err(Into::into)
    }
}

fn building_days(steps: usize) -> usize {
    (steps + CONTROL_STEPS_PER_DAY - 1) / CONTROL_STEPS_PER_DAY
}

fn building_ppo_hyper(cfg: &ExperimentConfig) -> PpoHyper {
    let mut h = PpoHyper::default();
    h.gamma = cfg.ppo.gamma;
    h.eps = cfg.ppo.eps;
    h.lr = cfg.ppo.lr;
    h.epochs = cfg.ppo.epochs;
    h.batch = cfg.ppo.batch;
    h.lambda_aux = cfg.ppo.lambda_aux;
    h.gae_lambda = cfg.ppo.gae_lambda;
    h
}

fn direct_hyper(cfg: &ExperimentConfig) -> DirectHyper {
    let mut h = DirectHyper::default();
    h.lr = cfg.direct.lr;
    h.batches = cfg.direct.batches;
    h.batch = cfg.direct.batch;
    h.lambda_aux = cfg.direct.lambda_aux;
    h
}

/// Builds the pretrained building policy: either restored from the
/// configured checkpoint or trained by imitation on a separate trace.
fn building_policy(cfg: &ExperimentConfig, seed: u64) -> Result<(LstmPolicy, projrl_core::LinearDynamics)> {
    let b = &cfg.building;
    let pre_trace = synth_building_traces(b.pretrain_seed, b.pretrain_days);
    let fit = sysid_building(&pre_trace, b.gain, b.setpoint)?;
    if !b.checkpoint.is_empty() {
        let mut r = rng::stream(seed, "policy-init/building");
        let mut policy = LstmPolicy::new(2, LSTM_HIDDEN, cfg.horizon, &mut r);
        let ckpt = Checkpoint::load(Path::new(&b.checkpoint))?;
        let mut params: Vec<&mut Tensor> = policy.params.iter_mut().collect();
        ckpt.restore_into(&mut params)?;
        Ok((policy, fit.model))
    } else {
        let (policy, _) = pretrain_building(&pre_trace, &fit.model, b.gain, b.setpoint, seed)?;
        Ok((policy, fit.model))
    }
}

fn run_building_task(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<StepMetrics>> {
    let days = building_days(cfg.steps);
    let trace = building_trace(cfg, days)?;
    let controller = match cfg.controller.as_str() {
        "prof" => BuildingController::Learned(GradMode::Full),
        "cliponly" => BuildingController::Learned(GradMode::ClipOnly),
        "noupdate" => BuildingController::Learned(GradMode::NoUpdate),
        "pcontroller" => BuildingController::PController,
        other => bail!("unexpected building controller {other}"),
    };
    let (mut policy, model) = match controller {
        BuildingController::PController => {
            let mut r = rng::stream(seed, "policy-init/building");
            (
                LstmPolicy::new(2, LSTM_HIDDEN, cfg.horizon, &mut r),
                projrl_core::envs::thermal::default_core(),
            )
        }
        _ => building_policy(cfg, seed)?,
    };
    let mut cr = rng::stream(seed, "critic-init");
    let mut critic = Mlp::new(&[2 * HISTORY_STEPS, 64, 64, 1], &mut cr);
    let mut opts = BuildingRunOptions::new(days, seed, controller);
    opts.hyper = building_ppo_hyper(cfg);
    opts.update_every = cfg.building.update_every;
    opts.gain = cfg.building.gain;
    opts.setpoint = cfg.building.setpoint;
    opts.sigma_anneal_steps = if cfg.building.sigma_anneal_steps == 0 {
        cfg.steps
    } else {
        cfg.building.sigma_anneal_steps
    };
    let mut run = run_building(&trace, &model, &mut policy, &mut critic, &opts)?;
    run.metrics.truncate(cfg.steps);
    Ok(run.metrics)
}

fn run_feeder_task(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<StepMetrics>> {
    let inv = &cfg.inverter;
    let feeder = synth_feeder(inv.feeder_seed);
    let days = (inv.start_step + cfg.steps + 86_399) / 86_400;
    let trace = feeder_trace(cfg, feeder.n_bus, days)?;
    let model = setup_feeder_model(&feeder, seed)?;
    let (gdim, ldim) = feeder_policy_dims(&feeder);
    let ratings = feeder.pv_rating.clone();
    let mut r = rng::stream(seed, "policy-init/feeder");
    let policy = FeederPolicy::new(gdim, ldim, &ratings, inv.shared_inverter_weights, &mut r);
    let controller = match cfg.controller.as_str() {
        "prof" => FeederController::Learned { train: inv.train },
        "voltvar" => FeederController::VoltVar,
        "linopt" => FeederController::LinearizedOptimal,
        other => bail!("unexpected inverter controller {other}"),
    };
    let mut setup = FeederSetup { feeder, model, policy };
    let mut opts = FeederRunOptions::new(cfg.steps, seed, controller);
    opts.hyper = direct_hyper(cfg);
    opts.update_every = inv.update_every;
    opts.polygon_facets = inv.polygon_facets;
    opts.start_step = inv.start_step;
    run_feeder(&trace, &mut setup, &opts).map_err(Into::into)
}

pub fn cmd_run(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<()> {
    for &seed in seeds {
        let rows = match cfg.task.as_str() {
            "building" => run_building_task(cfg, seed)?,
            "inverter" => run_feeder_task(cfg, seed)?,
            other => bail!("unexpected task {other}"),
        };
        let mpath = out_path(cfg, &format!("metrics_seed{seed}.csv"))?;
        write_metrics(&mpath, cfg, seed, &rows)?;
        let spath = out_path(cfg, &format!("summary_seed{seed}.json"))?;
        write_summary(&spath, cfg, seed, &rows)?;
        println!(
            "run task={} controller={} seed={} steps={} -> {}",
            cfg.task,
            cfg.controller,
            seed,
            rows.len(),
            mpath.display()
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct BuildingModelFile {
    config_hash: String,
    seed: u64,
    version: String,
    model: projrl_core::LinearDynamics,
    train_rmse: f64,
    holdout_rmse: f64,
    spectral_radius_warning: bool,
}

#[derive(Serialize)]
struct FeederModelFile {
    config_hash: String,
    seed: u64,
    version: String,
    model: projrl_core::SensitivityModel,
}

pub fn cmd_sysid(cfg: &ExperimentConfig) -> Result<()> {
    match cfg.task.as_str() {
        "building" => {
            let b = &cfg.building;
            let trace = synth_building_traces(b.pretrain_seed, b.pretrain_days);
            let fit = sysid_building(&trace, b.gain, b.setpoint)?;
            // held-out day from a different trace seed
            let holdout = synth_building_traces(b.pretrain_seed + 1, 1);
            let data = projrl_core::training::runner::collect_building_sysid_data(
                &holdout, b.gain, b.setpoint,
            )?;
            let holdout_rmse = eval_rmse(&fit.model, &data);
            let file = BuildingModelFile {
                config_hash: cfg.hash(),
                seed: cfg.seed,
                version: VERSION.into(),
                model: fit.model,
                train_rmse: fit.train_rmse,
                holdout_rmse,
                spectral_radius_warning: fit.spectral_radius_warning,
            };
            let path = out_path(cfg, "model_building.json")?;
            fs::write(&path, serde_json::to_string_pretty(&file)?)?;
            println!(
                "sysid building: train rmse {:.6} holdout rmse {:.6} -> {}",
                file.train_rmse,
                file.holdout_rmse,
                path.display()
            );
        }
        "inverter" => {
            let feeder = synth_feeder(cfg.inverter.feeder_seed);
            let model = setup_feeder_model(&feeder, cfg.seed)?;
            println!("sysid inverter: voltage margin {:.6}", model.eps_v);
            let file = FeederModelFile {
                config_hash: cfg.hash(),
                seed: cfg.seed,
                version: VERSION.into(),
                model,
            };
            let path = out_path(cfg, "model_feeder.json")?;
            fs::write(&path, serde_json::to_string_pretty(&file)?)?;
            println!("sysid inverter -> {}", path.display());
        }
        other => bail!("unexpected task {other}"),
    }
    Ok(())
}

pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.task != "building" {
        bail!("pretrain applies to the building task only");
    }
    let b = &cfg.building;
    let trace = synth_building_traces(b.pretrain_seed, b.pretrain_days);
    let fit = sysid_building(&trace, b.gain, b.setpoint)?;
    let (policy, curve) = pretrain_building(&trace, &fit.model, b.gain, b.setpoint, cfg.seed)?;
    let names = ["wx", "wh", "b", "head_w", "head_b"];
    let named: Vec<(String, &Tensor)> = policy
        .params
        .iter()
        .zip(names)
        .map(|(t, n)| (format!("lstm/{n}"), t))
        .collect();
    let ckpt = Checkpoint::from_tensors(&named);
    let path = out_path(cfg, &format!("checkpoint_seed{}.json", cfg.seed))?;
    ckpt.save(&path)?;
    println!(
        "pretrain: imitation mse {:.6} -> {:.6} over {} epochs -> {}",
        curve.first().copied().unwrap_or(f64::NAN),
        curve.last().copied().unwrap_or(f64::NAN),
        curve.len(),
        path.display()
    );
    Ok(())
}

pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<()> {
    let (trace, name) = match cfg.task.as_str() {
        "building" => (
            synth_building_traces(cfg.trace.synth_seed, cfg.trace.days),
            "trace_building.csv",
        ),
        "inverter" => {
            let feeder = synth_feeder(cfg.inverter.feeder_seed);
            (
                synth_feeder_traces(cfg.trace.synth_seed, cfg.trace.days, feeder.n_bus),
                "trace_feeder.csv",
            )
        }
        other => bail!("unexpected task {other}"),
    };
    let path = out_path(cfg, name)?;
    let mut f = fs::File::create(&path)?;
    writeln!(f, "{}", provenance(cfg, cfg.seed))?;
    trace.write_csv(&mut f)?;
    println!("synth: {} rows -> {}", trace.len(), path.display());
    Ok(())
}

fn random_set(dim: usize, r: &mut impl Rng) -> Result<LinearConstraintSet> {
    // unit box plus a few random halfspaces that keep the origin inside
    let n_extra = r.gen_range(1..4);
    let rows = 2 * dim + n_extra;
    let mut g = DMatrix::zeros(rows, dim);
    let mut h = DVector::zeros(rows);
    for i in 0..dim {
        g[(2 * i, i)] = 1.0;
        h[2 * i] = 1.0;
        g[(2 * i + 1, i)] = -1.0;
        h[2 * i + 1] = 1.0;
    }
    for i in 0..n_extra {
        let row: Vec<f64> = (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect();
        for (j, v) in row.iter().enumerate() {
            g[(2 * dim + i, j)] = *v;
        }
        h[2 * dim + i] = r.gen_range(0.05..0.8);
    }
    LinearConstraintSet::from_inequalities(g, h).map_err(Into::into)
}

/// Central finite difference of c . proj(u) against the implicit
/// gradient, for random sets and points, plus one check through a
/// small network feeding the projection.
pub fn cmd_gradcheck(cfg: &ExperimentConfig, checks: usize) -> Result<()> {
    let mut r = rng::stream(cfg.seed, "gradcheck");
    let tol = 1e-3;
    let eps = 1e-6;
    let mut report = String::new();
    report.push_str(&provenance(cfg, cfg.seed));
    report.push('\n');
    let mut worst: f64 = 0.0;
    let mut failures = 0usize;
    for check in 0..checks {
        let dim = r.gen_range(2..7);
        let set = random_set(dim, &mut r)?;
        let u_hat: Vec<f64> = (0..dim).map(|_| r.gen_range(-2.0..2.0)).collect();
        let c: Vec<f64> = (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect();
        let scalar = |u: &[f64]| -> Result<f64> {
            let sol = project(&DVector::from_column_slice(u), &set, 1e-10)?;
            Ok(c.iter().zip(sol.u_star.iter()).map(|(a, b)| a * b).sum())
        };
        let leaf = Node::leaf(Tensor::vector(u_hat.clone()));
        let proj = projection_layer(&leaf, &set, 1e-10)?;
        let cn = Node::constant(Tensor::vector(c.clone()));
        let loss = autodiff::sum(&autodiff::mul(&proj, &cn)?);
        autodiff::backward(&loss)?;
        let grad = leaf.grad().ok_or_else(|| anyhow!("missing gradient"))?;
        let mut max_rel: f64 = 0.0;
        for i in 0..dim {
            let mut up = u_hat.clone();
            let mut dn = u_hat.clone();
            up[i] += eps;
            dn[i] -= eps;
            let fd = (scalar(&up)? - scalar(&dn)?) / (2.0 * eps);
            let rel = (grad.data()[i] - fd).abs() / fd.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
        worst = worst.max(max_rel);
        if max_rel > tol {
            failures += 1;
            report.push_str(&format!("check {check}: FAIL rel err {max_rel:.3e}\n"));
        }
    }
    report.push_str(&format!(
        "projection checks: {}/{} passed, worst rel err {:.3e}\n",
        checks - failures,
        checks,
        worst
    ));

    // network into projection: gradient w.r.t. a weight entry
    let dim = 3;
    let set = random_set(dim, &mut r)?;
    let mut mlp = Mlp::new(&[4, 8, dim], &mut r);
    let x: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
    let target: Vec<f64> = (0..dim).map(|_| r.gen_range(-0.5..0.5)).collect();
    let net_loss = |m: &Mlp| -> Result<f64> {
        let y = m.eval(&x)?;
        let sol = project(&DVector::from_vec(y), &set, 1e-10)?;
        Ok(sol
            .u_star
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    };
    let bound = mlp.bind();
    let xn = Node::constant(Tensor::vector(x.clone()));
    let y = mlp.forward(&bound, &xn)?;
    let proj = projection_layer(&y, &set, 1e-10)?;
    let tn = Node::constant(Tensor::vector(target.clone()));
    let loss = autodiff::sum_squares(&autodiff::sub(&proj, &tn)?);
    autodiff::backward(&loss)?;
    let mut net_worst: f64 = 0.0;
    for _ in 0..20 {
        let pi = r.gen_range(0..mlp.params.len());
        let ei = r.gen_range(0..mlp.params[pi].len());
        let analytic = bound[pi]
            .grad()
            .ok_or_else(|| anyhow!("missing network gradient"))?
            .data()[ei];
        let orig = mlp.params[pi].data()[ei];
        mlp.params[pi].data_mut()[ei] = orig + eps;
        let up = net_loss(&mlp)?;
        mlp.params[pi].data_mut()[ei] = orig - eps;
        let dn = net_loss(&mlp)?;
        mlp.params[pi].data_mut()[ei] = orig;
        let fd = (up - dn) / (2.0 * eps);
        let rel = (analytic - fd).abs() / fd.abs().max(1.0);
        net_worst = net_worst.max(rel);
    }
    let net_ok = net_worst <= tol;
    report.push_str(&format!(
        "network + projection: {} (worst rel err {:.3e})\n",
        if net_ok { "pass" } else { "FAIL" },
        net_worst
    ));

    let path = out_path(cfg, "gradcheck.txt")?;
    fs::write(&path, &report)?;
    print!("{report}");
    if failures > 0 || !net_ok {
        bail!("gradient check failed ({failures} projection failures)");
    }
    Ok(())
}

pub fn cmd_config(cfg: &ExperimentConfig, print_defaults: bool) -> Result<()> {
    if print_defaults {
        print!("{}", ExperimentConfig::default().to_toml());
    } else {
        println!("# hash={}", cfg.hash());
        print!("{}", cfg.to_toml());
    }
    Ok(())
}
