use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use uavckm::ckm::{self, collect_dataset, read_dataset_csv, update_incremental, write_dataset_csv, CkmHyper};
use uavckm::experiment::{
    self, build_env, ckm_error_report, emit_plot_data, eval_seeds, load_or_generate_world,
    model_env_features, run_ckm_pipeline, run_cep_sweep, run_dynamic_update, run_eval, run_training,
    world_features, write_eval_rows_csv, CkmKind, RunLog,
};
use uavckm::{Agent, CkmModel, Error, ExperimentConfig, Result, Scheme, World};

#[derive(Parser)]
#[command(name = "uavckm", version, about = "UAV channel knowledge maps and PPO trajectory planning")]
struct Cli {
    /// TOML or JSON experiment config; desk profile defaults if omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// World JSON (overrides `world_path`).
    #[arg(long, global = true)]
    world: Option<PathBuf>,
    /// Single seed (overrides `seeds`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Channel knowledge map data and models.
    Ckm {
        #[command(subcommand)]
        op: CkmOp,
    },
    /// Policy training and evaluation.
    Rl {
        #[command(subcommand)]
        op: RlOp,
    },
    /// Composite experiments.
    Exp {
        #[command(subcommand)]
        op: ExpOp,
    },
}

#[derive(Subcommand)]
enum CkmOp {
    /// Sample labelled links and write the world and dataset.
    Collect {
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        cep: Option<f64>,
    },
    /// Train an ensemble on a dataset CSV.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a model on fresh clean and noisy links.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Query noisy inputs with flag 0 instead of 1.
        #[arg(long)]
        no_flag: bool,
    },
    /// Incrementally update a model with new samples.
    Update {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
}

#[derive(Subcommand)]
enum RlOp {
    /// Train a policy; trains the scheme's CKM first unless one is given.
    Train {
        #[arg(long)]
        scheme: Option<Scheme>,
        #[arg(long)]
        ckm: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        cep: Option<f64>,
    },
    /// Evaluate a checkpoint deterministically.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scheme: Option<Scheme>,
        #[arg(long)]
        ckm: Option<PathBuf>,
        #[arg(long)]
        cep: Option<f64>,
        #[arg(long)]
        episodes: Option<usize>,
    },
}

#[derive(Subcommand)]
enum ExpOp {
    /// Remove the tallest buildings, update the PEC map and compare with OS.
    Dynamic {
        #[arg(long)]
        pec: PathBuf,
        #[arg(long)]
        os: PathBuf,
        /// Robust CKM both schemes start from.
        #[arg(long)]
        ckm: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Evaluate one checkpoint across CEP values.
    CepSweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scheme: Option<Scheme>,
        #[arg(long)]
        ckm: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        ceps: Option<Vec<f64>>,
        #[arg(long)]
        episodes: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_path(p)?,
        None => ExperimentConfig::desk(),
    };
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    if let Some(w) = &cli.world {
        cfg.world_path = Some(w.clone());
    }
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn save_world(world: &World, dir: &Path, log: &mut RunLog) -> Result<()> {
    let p = dir.join("world.json");
    world.save(&p)?;
    log.output(p);
    Ok(())
}

fn load_ckm(path: Option<&Path>) -> Result<Option<Arc<CkmModel>>> {
    path.map(|p| CkmModel::load(p).map(Arc::new)).transpose()
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.cmd {
        Cmd::Ckm { op } => run_ckm(op, &mut cfg),
        Cmd::Rl { op } => run_rl(op, &mut cfg),
        Cmd::Exp { op } => run_exp(op, &mut cfg),
    }
}

fn run_ckm(op: CkmOp, cfg: &mut ExperimentConfig) -> Result<()> {
    let out = cfg.output_dir.clone();
    experiment::ensure_dir(&out)?;
    let world = load_or_generate_world(cfg)?;
    let seed = cfg.seed();
    match op {
        CkmOp::Collect { samples, cep } => {
            let mut log = RunLog::start("ckm collect");
            if let Some(n) = samples {
                cfg.collect.samples = n;
            }
            if let Some(c) = cep {
                cfg.collect.cep = c;
            }
            cfg.validate()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = collect_dataset(&world, cfg.link(), &cfg.collect, &mut rng)?;
            save_world(&world, &out, &mut log)?;
            let p = out.join("dataset.csv");
            write_dataset_csv(&p, &data)?;
            log.output(p);
            let flagged = data.iter().filter(|s| s.noise_flag).count();
            println!("collected {} samples ({flagged} flagged) into {}", data.len(), out.display());
            log.finish(&out, cfg, json!({"samples": data.len(), "flagged": flagged}))?;
        }
        CkmOp::Train { dataset, epochs } => {
            let mut log = RunLog::start("ckm train");
            if let Some(e) = epochs {
                cfg.ckm.epochs = e;
            }
            cfg.validate()?;
            let env = world_features(&world, cfg);
            let data = read_dataset_csv(&dataset, &env)?;
            let hyper = CkmHyper { seed, ..cfg.ckm.clone() };
            let (model, report) = ckm::train(&data, &hyper)?;
            let p = out.join("ckm.json");
            model.save(&p)?;
            log.output(p);
            let errors = ckm_error_report(
                &model,
                &env,
                &world,
                cfg.link(),
                &cfg.collect,
                true,
                &[cfg.collect.cep],
                cfg.ckm_test_samples,
                seed ^ 0x7e57,
            )?;
            let summary = json!({"train": report, "errors": errors});
            let p = out.join("ckm_report.json");
            write_json(&p, &summary)?;
            log.output(p);
            println!(
                "trained {} members: holdout RMSE {:.3} dB, clean RMSE {:.3} dB",
                model.ensemble_size(),
                report.holdout_rmse_db,
                errors.clean_rmse_db
            );
            log.finish(&out, cfg, summary)?;
        }
        CkmOp::Eval { model, no_flag } => {
            let log = RunLog::start("ckm eval");
            let m = CkmModel::load(&model)?;
            let env = model_env_features(&m, &world);
            let mut ceps = vec![cfg.collect.cep];
            ceps.extend(cfg.transfer_ceps.iter().copied().filter(|&c| c != cfg.collect.cep));
            let r = ckm_error_report(
                &m,
                &env,
                &world,
                cfg.link(),
                &cfg.collect,
                !no_flag,
                &ceps,
                cfg.ckm_test_samples,
                seed,
            )?;
            println!("clean RMSE {:.3} dB", r.clean_rmse_db);
            for s in &r.noisy {
                println!("cep {:>5}: RMSE {:.3} dB, within 2x clean {:.3}", s.cep, s.rmse_db, s.within_band);
            }
            let summary = serde_json::to_value(&r)?;
            write_json(&out.join("ckm_eval.json"), &summary)?;
            log.finish(&out, cfg, summary)?;
        }
        CkmOp::Update { model, dataset } => {
            let mut log = RunLog::start("ckm update");
            let m = CkmModel::load(&model)?;
            let env = model_env_features(&m, &world);
            let data = read_dataset_csv(&dataset, &env)?;
            let before = m.rmse(&data);
            let hyper = CkmHyper { seed, ..cfg.ckm.clone() };
            let updated = update_incremental(&m, &data, &hyper)?;
            let after = updated.rmse(&data);
            let p = out.join("ckm_updated.json");
            updated.save(&p)?;
            log.output(p);
            println!("dataset RMSE {before:.3} dB -> {after:.3} dB");
            log.finish(&out, cfg, json!({"rmse_before_db": before, "rmse_after_db": after}))?;
        }
    }
    Ok(())
}

/// CKM for `scheme`: loaded from `path`, or trained here and saved to `out`.
fn scheme_ckm(
    cfg: &ExperimentConfig,
    scheme: Scheme,
    world: &World,
    path: Option<&Path>,
    out: &Path,
    log: &mut RunLog,
) -> Result<(Option<Arc<CkmModel>>, serde_json::Value)> {
    let Some(kind) = scheme.wiring().ckm else {
        return Ok((None, serde_json::Value::Null));
    };
    if let Some(m) = load_ckm(path)? {
        return Ok((Some(m), serde_json::Value::Null));
    }
    let (m, report) = run_ckm_pipeline(world, cfg, kind, cfg.seed())?;
    let p = out.join(match kind {
        CkmKind::Robust => "ckm_robust.json",
        CkmKind::Ordinary => "ckm_ordinary.json",
    });
    m.save(&p)?;
    log.output(p);
    Ok((Some(Arc::new(m)), serde_json::to_value(&report)?))
}

fn run_rl(op: RlOp, cfg: &mut ExperimentConfig) -> Result<()> {
    let out = cfg.output_dir.clone();
    experiment::ensure_dir(&out)?;
    let world = load_or_generate_world(cfg)?;
    match op {
        RlOp::Train { scheme, ckm, episodes, cep } => {
            let mut log = RunLog::start("rl train");
            if let Some(s) = scheme {
                cfg.scheme = s;
            }
            if let Some(n) = episodes {
                cfg.ppo.max_episodes = n;
            }
            if let Some(c) = cep {
                cfg.train_cep = c;
            }
            cfg.validate()?;
            save_world(&world, &out, &mut log)?;
            let (model, ckm_report) = scheme_ckm(cfg, cfg.scheme, &world, ckm.as_deref(), &out, &mut log)?;
            let (_, curve) = run_training(cfg, Arc::new(world), model, cfg.seed(), Some(&out))?;
            log.output(out.join("policy.json"));
            log.output(out.join("learning_curve.csv"));
            let n = (curve.len() / 10).max(1);
            let mean = |s: &[uavckm::EpisodeRecord]| {
                (
                    s.iter().map(|r| r.completion_time).sum::<f64>() / s.len() as f64,
                    s.iter().map(|r| r.episode_return).sum::<f64>() / s.len() as f64,
                )
            };
            let (t0, r0) = mean(&curve[..n]);
            let (t1, r1) = mean(&curve[curve.len() - n..]);
            println!(
                "{}: {} episodes, completion {t0:.2} -> {t1:.2}, return {r0:.4} -> {r1:.4}",
                cfg.scheme.name(),
                curve.len()
            );
            log.finish(
                &out,
                cfg,
                json!({
                    "scheme": cfg.scheme,
                    "episodes": curve.len(),
                    "first_decile": {"completion_time": t0, "return": r0},
                    "last_decile": {"completion_time": t1, "return": r1},
                    "ckm": ckm_report,
                }),
            )?;
        }
        RlOp::Eval { checkpoint, scheme, ckm, cep, episodes } => {
            let mut log = RunLog::start("rl eval");
            if let Some(s) = scheme {
                cfg.scheme = s;
            }
            if let Some(n) = episodes {
                cfg.eval_episodes = n;
            }
            cfg.validate()?;
            let agent = Agent::load(&checkpoint)?;
            let model = load_ckm(ckm.as_deref())?;
            let cep = cep.unwrap_or(cfg.train_cep);
            let mut env = build_env(cfg, Arc::new(world), cfg.scheme, model, cep)?;
            let seeds = eval_seeds(cfg.eval_seed, cfg.eval_episodes);
            let (report, best) = run_eval(&mut env, &agent.policy, &seeds)?;
            let p = out.join("eval_rows.csv");
            write_eval_rows_csv(&p, &report.rows)?;
            log.output(p);
            let summary = serde_json::to_value(report.summary())?;
            let p = out.join("eval_report.json");
            write_json(&p, &summary)?;
            log.output(p);
            if let Some(b) = &best {
                for p in emit_plot_data(&out, None, Some(&b.rows))? {
                    log.output(p);
                }
            }
            println!(
                "{} at cep {cep}: success {:.3}, completion {:.2} +- {:.2}, return {:.4}",
                cfg.scheme.name(),
                report.success_rate,
                report.mean_completion_time,
                report.completion_time_se,
                report.mean_return
            );
            log.finish(&out, cfg, summary)?;
        }
    }
    Ok(())
}

fn run_exp(op: ExpOp, cfg: &mut ExperimentConfig) -> Result<()> {
    let out = cfg.output_dir.clone();
    experiment::ensure_dir(&out)?;
    let world = load_or_generate_world(cfg)?;
    match op {
        ExpOp::Dynamic { pec, os, ckm, episodes } => {
            let mut log = RunLog::start("exp dynamic");
            if let Some(n) = episodes {
                cfg.eval_episodes = n;
            }
            cfg.validate()?;
            let pec = Agent::load(&pec)?;
            let os = Agent::load(&os)?;
            let robust = CkmModel::load(&ckm)?;
            let seeds = eval_seeds(cfg.eval_seed, cfg.eval_episodes);
            let (r, changed, updated) =
                run_dynamic_update(cfg, &world, &robust, &pec.policy, &os.policy, &seeds, cfg.seed())?;
            let p = out.join("world_after.json");
            changed.save(&p)?;
            log.output(p);
            let p = out.join("ckm_updated.json");
            updated.save(&p)?;
            log.output(p);
            println!(
                "removed {} buildings; CKM RMSE stale {:.3} dB, updated {:.3} dB",
                r.removed_buildings, r.stale_rmse_db, r.updated_rmse_db
            );
            for (name, b, a) in [("PEC_PPO", &r.pec_before, &r.pec_after), ("OS_PPO", &r.os_before, &r.os_after)] {
                println!(
                    "{name}: success {:.3} -> {:.3}, completion {:.2} -> {:.2}",
                    b.success_rate, a.success_rate, b.mean_completion_time, a.mean_completion_time
                );
            }
            let summary = json!({
                "removed_buildings": r.removed_buildings,
                "stale_rmse_db": r.stale_rmse_db,
                "updated_rmse_db": r.updated_rmse_db,
                "pec_before": r.pec_before.summary(),
                "pec_after": r.pec_after.summary(),
                "os_before": r.os_before.summary(),
                "os_after": r.os_after.summary(),
            });
            let p = out.join("dynamic_report.json");
            write_json(&p, &summary)?;
            log.output(p);
            log.finish(&out, cfg, summary)?;
        }
        ExpOp::CepSweep { checkpoint, scheme, ckm, ceps, episodes } => {
            let mut log = RunLog::start("exp cep-sweep");
            if let Some(s) = scheme {
                cfg.scheme = s;
            }
            if let Some(c) = ceps {
                cfg.ceps = c;
            }
            if let Some(n) = episodes {
                cfg.eval_episodes = n;
            }
            cfg.validate()?;
            let agent = Agent::load(&checkpoint)?;
            let model = load_ckm(ckm.as_deref())?;
            let seeds = eval_seeds(cfg.eval_seed, cfg.eval_episodes);
            let reports = run_cep_sweep(cfg, Arc::new(world), cfg.scheme, model, &agent.policy, &cfg.ceps, &seeds)?;
            let p = out.join("cep_sweep.csv");
            let mut text = String::from("cep,success_rate,success_rate_se,mean_completion_time,completion_time_se,mean_return,mean_energy_mj\n");
            for r in &reports {
                text.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    r.cep,
                    r.success_rate,
                    r.success_rate_se,
                    r.mean_completion_time,
                    r.completion_time_se,
                    r.mean_return,
                    r.mean_energy_mj
                ));
                println!(
                    "cep {:>5}: success {:.3}, completion {:.2} +- {:.2}",
                    r.cep, r.success_rate, r.mean_completion_time, r.completion_time_se
                );
            }
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            log.output(p);
            let summary: Vec<_> = reports.iter().map(|r| r.summary()).collect();
            log.finish(&out, cfg, serde_json::to_value(summary)?)?;
        }
    }
    Ok(())
}
