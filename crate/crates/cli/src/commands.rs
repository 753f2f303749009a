use std::fs;
use std::path::Path;

use dnqs_core::hamiltonians::{exact_diag, HamiltonianKind, HamiltonianSpec};
use dnqs_core::observables::{fit_power_law, measure_correlations, FitReport};
use dnqs_core::theory::{
    average_digit_sum_check, capp_series, digit_sum, exact_correlator, kernel, lmin_bfs_table, max_digit_sum,
    singularity_report, theory_report, Mode,
};
use dnqs_core::vmc::{estimate_energy, Checkpoint, CheckpointPolicy, Trainer};
use serde::Serialize;
use serde_json::json;

use crate::config::{run_dir, RunConfig, TheoryConfig};
use crate::{CliError, GlobalArgs};

fn write(path: &Path, body: &str) -> Result<(), CliError> {
    fs::write(path, body).map_err(|e| CliError::write(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut body = serde_json::to_string_pretty(value).expect("serializable report");
    body.push('\n');
    write(path, &body)
}

fn run_config(global: &GlobalArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::preset(HamiltonianKind::TfimPbc),
    };
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn train(global: &GlobalArgs, resume: Option<&Path>) -> Result<(), CliError> {
    let cfg = run_config(global)?;
    if global.dry_run {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let vmc = cfg.vmc();
    vmc.validate()?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(vmc.clone(), &Checkpoint::load(p)?)?,
        None => Trainer::new(vmc.clone())?,
    };
    let dir = run_dir(&global.out, &cfg.benchmark.to_string(), cfg.seed)?;
    write(&dir.join("config.toml"), &cfg.to_toml())?;
    let ck_dir = dir.join("checkpoints");
    fs::create_dir_all(&ck_dir).map_err(|e| CliError::write(&ck_dir, e))?;
    let policy = CheckpointPolicy {
        dir: ck_dir,
        every: cfg.checkpoint_every,
    };
    let report_every = (cfg.n_iterations / 20).max(1);
    trainer.run(Some(&policy), cfg.max_wall_seconds, |r| {
        if (r.iter + 1) % report_every == 0 {
            eprintln!("iter {:>8}  E = {:.6} ± {:.6}", r.iter + 1, r.energy_mean, r.energy_stderr);
        }
    })?;
    write(&dir.join("metrics.csv"), &trainer.record().to_csv(false))?;
    write(&dir.join("timing.csv"), &trainer.record().to_csv(true))?;
    let final_path = dir.join("final.bin");
    trainer.checkpoint().save(&final_path)?;

    let est = estimate_energy(trainer.params(), &vmc.hamiltonian, vmc.n_samples_eval, vmc.seed)?;
    write_json(
        &dir.join("summary.json"),
        &json!({
            "benchmark": cfg.benchmark,
            "n_sites": cfg.n_sites,
            "seed": cfg.seed,
            "iterations": trainer.iteration(),
            "energy_mean": est.mean.re,
            "energy_imag": est.mean.im,
            "energy_stderr": est.stderr,
            "n_samples_eval": vmc.n_samples_eval,
        }),
    )?;
    println!("run directory: {}", dir.display());
    println!("final energy: {:.8} ± {:.8}", est.mean.re, est.stderr);
    Ok(())
}

pub fn measure(global: &GlobalArgs, checkpoint: &Path) -> Result<(), CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = match &global.config {
        Some(p) => Some(RunConfig::load(p)?),
        None => None,
    };
    let seed = global.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(ck.seed);
    let n_samples = cfg.as_ref().map_or(100_000, |c| c.n_samples_eval);
    let window = cfg.as_ref().map(|c| c.fit_window).unwrap_or_default();
    let label = cfg.as_ref().map_or("measure".to_string(), |c| c.benchmark.to_string());
    if global.dry_run {
        println!("checkpoint = {:?}", checkpoint.display().to_string());
        println!("n_sites = {}\nn_samples = {n_samples}\nseed = {seed}\nfit_window = {window:?}", ck.shape.n_sites);
        return Ok(());
    }
    let params = ck.model()?;
    let series = measure_correlations(&params, ck.shape.n_sites, n_samples, seed)?;
    let dir = run_dir(&global.out, &label, seed)?;
    write(&dir.join("correlations.csv"), &series.to_csv())?;
    let fit = fit_power_law(&series, window)?;
    write_json(&dir.join("fit.json"), &FitReport::new(&fit, window, ck.shape.n_sites, seed))?;
    println!("run directory: {}", dir.display());
    println!(
        "eta = {:.5} ± {:.5}  R2 = {:.5}  ({} points, {} excluded)",
        fit.eta, fit.eta_stderr, fit.r_squared, fit.n_points, fit.excluded
    );
    Ok(())
}

pub fn theory(global: &GlobalArgs) -> Result<(), CliError> {
    let mut cfg = match &global.config {
        Some(p) => TheoryConfig::load(p)?,
        None => TheoryConfig::default(),
    };
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if global.dry_run {
        print!("{}", toml::to_string(&cfg).expect("config serializes"));
        return Ok(());
    }
    let spec = &cfg.model;
    spec.validate()?;
    if spec.weak_coupling_violated() {
        eprintln!("warning: ε = {:.4} is not small; first-order results may be inaccurate", spec.epsilon());
    }
    let dir = run_dir(&global.out, "theory", cfg.seed)?;
    let k = kernel(spec, cfg.n_max)?;
    let capp = capp_series(spec, cfg.n_max)?;
    write(&dir.join("kernel.csv"), &k.to_csv())?;
    write(&dir.join("capp.csv"), &capp.to_csv())?;
    if cfg.exact_sites > 0 {
        write(&dir.join("exact.csv"), &exact_correlator(spec, cfg.exact_sites)?.to_csv())?;
    }
    let report = theory_report(spec, &capp, cfg.tail())?;
    let mut body = serde_json::to_value(&report).expect("serializable report");
    body["seed"] = json!(cfg.seed);
    body["tail"] = json!(cfg.tail());
    if spec.mode == Mode::Vanilla {
        body["singularity"] = serde_json::to_value(singularity_report(spec)?).expect("serializable");
    }
    write_json(&dir.join("report.json"), &body)?;

    let base = spec.base as u64;
    let table = lmin_bfs_table(cfg.oracle_max, base, None)?;
    let mismatches = (1..=cfg.oracle_max)
        .filter(|&m| digit_sum(m, base).ok() != Some(table[m as usize]))
        .count();
    let mut boxes = Vec::new();
    for r in 0..=10u32 {
        let (Ok((mx, arg)), Ok((mean, expected))) = (max_digit_sum(r, base), average_digit_sum_check(r, base)) else {
            break;
        };
        boxes.push(json!({
            "R": r,
            "max": mx,
            "argmax": arg,
            "max_expected": (base - 1) * (r as u64 + 1),
            "mean": mean.to_string(),
            "mean_expected": expected.to_string(),
        }));
    }
    write_json(
        &dir.join("oracles.json"),
        &json!({
            "base": base,
            "digit_sum_vs_bfs_max_m": cfg.oracle_max,
            "digit_sum_vs_bfs_mismatches": mismatches,
            "boxes": boxes,
            "seed": cfg.seed,
        }),
    )?;
    println!("run directory: {}", dir.display());
    println!("{}", serde_json::to_string(&report).expect("serializable report"));
    Ok(())
}

pub fn exact(
    global: &GlobalArgs,
    benchmark: Option<String>,
    sites: Option<usize>,
    field: Option<f64>,
) -> Result<(), CliError> {
    let mut spec: HamiltonianSpec = run_config(global)?.hamiltonian();
    if let Some(b) = benchmark {
        spec.kind = match b.as_str() {
            "tfim" | "tfim_pbc" => HamiltonianKind::TfimPbc,
            "cluster" | "cluster_es" => HamiltonianKind::ClusterEs,
            other => return Err(CliError::Config(format!("unknown benchmark {other:?}"))),
        };
    }
    if let Some(n) = sites {
        spec.n_sites = n;
    }
    if let Some(g) = field {
        spec.field = g;
    }
    if global.dry_run {
        println!("benchmark = {}\nn_sites = {}\nfield = {}", spec.kind, spec.n_sites, spec.field);
        return Ok(());
    }
    let gs = exact_diag(&spec)?;
    println!("ground energy: {:.12}", gs.energy);
    Ok(())
}
