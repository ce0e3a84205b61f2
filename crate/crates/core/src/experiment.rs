//! Experiment orchestration: scheme wiring, the CKM pipeline, training,
//! evaluation, CEP sweeps and the dynamic-environment run.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::channel::{LinkBudgetParams, LosSigmoid, POWER_OFF_DBM};
use crate::ckm::{
    self, collect_dataset, env_features, project_reported, train, update_incremental, CkmHyper,
    CkmModel, CollectConfig, EnvFeatures, TrainReport,
};
use crate::env::{
    format_dbm, radiated_energy_mj, write_trajectory_csv, CommEnv, EnvConfig, Predictor,
    PredictorMode, TrajectoryRow,
};
use crate::error::{Error, Result};
use crate::geometry::{generate_world, World, WorldConfig};
use crate::noise::{perturb, CepModel};
use crate::ppo::{
    self, episode_seed, run_episode, train_loop, write_learning_curve, Agent, EpisodeOutcome,
    EpisodeRecord, PolicyNet, PpoConfig,
};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Desk,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Scheme {
    PecPpo,
    CkmPpo,
    LosPpo,
    OsPpo,
    /// Selection with the exact channel; a reference for convergence runs.
    TrueOracle,
}

/// Which CKM a scheme consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CkmKind {
    /// Trained on clean positions, queried with `flag = 0`.
    Ordinary,
    /// Trained on CEP-corrupted rows with noise flags.
    Robust,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Wiring {
    pub predictor: PredictorMode,
    pub ckm: Option<CkmKind>,
    pub scheduler: bool,
    pub online_update: bool,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::PecPpo,
        Scheme::CkmPpo,
        Scheme::LosPpo,
        Scheme::OsPpo,
        Scheme::TrueOracle,
    ];

    pub fn wiring(self) -> Wiring {
        match self {
            Scheme::PecPpo => Wiring {
                predictor: PredictorMode::CkmPec,
                ckm: Some(CkmKind::Robust),
                scheduler: true,
                online_update: true,
            },
            Scheme::CkmPpo => Wiring {
                predictor: PredictorMode::Ckm,
                ckm: Some(CkmKind::Ordinary),
                scheduler: false,
                online_update: false,
            },
            Scheme::LosPpo => Wiring {
                predictor: PredictorMode::LosModel,
                ckm: None,
                scheduler: false,
                online_update: false,
            },
            Scheme::OsPpo => Wiring {
                predictor: PredictorMode::CkmPec,
                ckm: Some(CkmKind::Robust),
                scheduler: false,
                online_update: false,
            },
            Scheme::TrueOracle => Wiring {
                predictor: PredictorMode::TrueOracle,
                ckm: None,
                scheduler: false,
                online_update: false,
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::PecPpo => "PEC_PPO",
            Scheme::CkmPpo => "CKM_PPO",
            Scheme::LosPpo => "LOS_PPO",
            Scheme::OsPpo => "OS_PPO",
            Scheme::TrueOracle => "TRUE_ORACLE",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Scheme> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown scheme {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub scheme: Scheme,
    /// World JSON to load; generated from `world_seed` when absent.
    pub world_path: Option<PathBuf>,
    pub world_seed: u64,
    pub world: WorldConfig,
    pub env: EnvConfig,
    pub collect: CollectConfig,
    pub ckm: CkmHyper,
    pub ppo: PpoConfig,
    /// Positioning error seen by the agent while training.
    pub train_cep: f64,
    /// Evaluation / sweep CEP values.
    pub ceps: Vec<f64>,
    /// CEP values for the CKM transfer report.
    pub transfer_ceps: Vec<f64>,
    /// Training seeds; the first one is used by single runs.
    pub seeds: Vec<u64>,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    /// Held-out links per CKM error report.
    pub ckm_test_samples: usize,
    /// Fraction of buildings (tallest first) removed in the dynamic run.
    pub dynamic_fraction: f64,
    /// Fresh samples collected after the change.
    pub dynamic_samples: usize,
    /// Episodes between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::desk()
    }
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        ExperimentConfig {
            profile: Profile::Desk,
            scheme: Scheme::PecPpo,
            world_path: None,
            world_seed: 1,
            world: WorldConfig::desk(),
            env: EnvConfig::desk(),
            collect: CollectConfig::desk(),
            ckm: CkmHyper::desk(),
            ppo: PpoConfig::desk(),
            train_cep: 5.0,
            ceps: vec![0.0, 1.0, 5.0, 10.0, 25.0],
            transfer_ceps: vec![10.0, 25.0],
            seeds: vec![0],
            eval_episodes: 500,
            eval_seed: 1_000_000,
            ckm_test_samples: 4000,
            dynamic_fraction: 0.25,
            dynamic_samples: 8000,
            checkpoint_every: 500,
            output_dir: PathBuf::from("runs"),
        }
    }

    pub fn full() -> Self {
        ExperimentConfig {
            profile: Profile::Full,
            world: WorldConfig::full(),
            env: EnvConfig::default(),
            collect: CollectConfig::default(),
            ckm: CkmHyper::default(),
            ppo: PpoConfig::default(),
            dynamic_samples: 20_000,
            checkpoint_every: 1000,
            ..ExperimentConfig::desk()
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => ExperimentConfig::desk(),
            Profile::Full => ExperimentConfig::full(),
        }
    }

    /// Parses TOML (by `.toml` extension) or JSON. Missing fields come from
    /// the profile named in the file, desk if none.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        let value: Value = if is_toml {
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text)?
        };
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let profile = match value.get("profile") {
            Some(p) => serde_json::from_value(p.clone())
                .map_err(|e| Error::InvalidConfig(format!("profile: {e}")))?,
            None => Profile::Desk,
        };
        let mut base = serde_json::to_value(Self::for_profile(profile))?;
        merge(&mut base, value);
        let cfg: ExperimentConfig =
            serde_json::from_value(base).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.env.validate()?;
        self.ckm.validate()?;
        self.ppo.validate()?;
        CepModel::new(self.train_cep)?;
        for &c in self.ceps.iter().chain(&self.transfer_ceps) {
            CepModel::new(c)?;
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        if self.eval_episodes == 0 {
            return Err(Error::InvalidConfig("eval_episodes must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.dynamic_fraction) {
            return Err(Error::InvalidConfig("dynamic_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seeds[0]
    }

    pub fn link(&self) -> &LinkBudgetParams {
        &self.env.link
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Loads `world_path` if given, otherwise generates from the seed and
/// profile world config.
pub fn load_or_generate_world(cfg: &ExperimentConfig) -> Result<World> {
    match &cfg.world_path {
        Some(p) => World::load(p),
        None => generate_world(cfg.world_seed, &cfg.world),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub crate_version: String,
    pub ckm_format_version: u32,
    pub checkpoint_format_version: u32,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub started_unix_s: u64,
    pub elapsed_s: f64,
    pub outputs: Vec<PathBuf>,
    pub summary: Value,
}

/// Records what a run did. Call [`RunLog::finish`] to write the manifest.
pub struct RunLog {
    command: String,
    started: Instant,
    started_unix_s: u64,
    outputs: Vec<PathBuf>,
}

impl RunLog {
    pub fn start(command: impl Into<String>) -> Self {
        RunLog {
            command: command.into(),
            started: Instant::now(),
            started_unix_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            outputs: Vec::new(),
        }
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    pub fn finish(self, dir: &Path, cfg: &ExperimentConfig, summary: Value) -> Result<Manifest> {
        let m = Manifest {
            command: self.command,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            ckm_format_version: ckm::MODEL_VERSION,
            checkpoint_format_version: ppo::CHECKPOINT_VERSION,
            config: cfg.clone(),
            seeds: cfg.seeds.clone(),
            started_unix_s: self.started_unix_s,
            elapsed_s: self.started.elapsed().as_secs_f64(),
            outputs: self.outputs,
            summary,
        };
        ensure_dir(dir)?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&m)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(m)
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Error of one CKM at one positioning error level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CepErrorStat {
    pub cep: f64,
    pub rmse_db: f64,
    /// Share of predictions within `2 * clean_rmse_db` of the true gain.
    pub within_band: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkmErrorReport {
    pub clean_rmse_db: f64,
    pub noisy: Vec<CepErrorStat>,
}

impl CkmErrorReport {
    pub fn at(&self, cep: f64) -> Option<&CepErrorStat> {
        self.noisy.iter().find(|s| s.cep == cep)
    }
}

/// Scores `model` on fresh links in `world`. Clean inputs use the true user
/// position with `flag = 0`; noisy inputs perturb and project the position
/// and query with `noisy_flag`. Labels are always true-position gains.
#[allow(clippy::too_many_arguments)]
pub fn ckm_error_report(
    model: &CkmModel,
    model_env: &[f64],
    world: &World,
    link: &LinkBudgetParams,
    collect: &CollectConfig,
    noisy_flag: bool,
    ceps: &[f64],
    samples: usize,
    seed: u64,
) -> Result<CkmErrorReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let test_cfg = CollectConfig {
        samples,
        cep: 0.0,
        ..*collect
    };
    let test = collect_dataset(world, link, &test_cfg, &mut rng)?;
    let labels: Vec<f64> = test.iter().map(|s| s.label_gain_db).collect();
    let errors = |reported: &[crate::geometry::Vec3], flag: bool| -> Result<Vec<f64>> {
        let qs: Vec<ckm::CkmQuery<'_>> = test
            .iter()
            .zip(reported)
            .map(|(s, &gu)| ckm::CkmQuery {
                uav: s.uav_pos,
                gu,
                flag,
                env: model_env,
            })
            .collect();
        let pred = model.predict_batch(&qs)?;
        Ok(pred.iter().zip(&labels).map(|(p, y)| p.db() - y).collect())
    };
    let truth: Vec<_> = test.iter().map(|s| s.gu_pos_true).collect();
    let clean = rms(&errors(&truth, false)?);
    let mut noisy = Vec::with_capacity(ceps.len());
    for &cep in ceps {
        let m = CepModel::new(cep)?;
        let reported: Vec<_> = truth
            .iter()
            .map(|&p| project_reported(perturb(p, &m, &mut rng), world, collect.user_max_height))
            .collect();
        let e = errors(&reported, noisy_flag)?;
        let within = e.iter().filter(|v| v.abs() <= 2.0 * clean).count() as f64 / e.len() as f64;
        noisy.push(CepErrorStat {
            cep,
            rmse_db: rms(&e),
            within_band: within,
        });
    }
    Ok(CkmErrorReport {
        clean_rmse_db: clean,
        noisy,
    })
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|e| e * e).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkmPipelineReport {
    pub kind: CkmKind,
    pub collect_cep: f64,
    pub samples: usize,
    pub train: TrainReport,
    pub errors: CkmErrorReport,
}

/// Collects a dataset, trains the CKM and scores it on clean, noisy
/// (`train_cep`) and transfer CEP inputs.
pub fn run_ckm_pipeline(
    world: &World,
    cfg: &ExperimentConfig,
    kind: CkmKind,
    seed: u64,
) -> Result<(CkmModel, CkmPipelineReport)> {
    let collect = CollectConfig {
        cep: match kind {
            CkmKind::Robust => cfg.collect.cep,
            CkmKind::Ordinary => 0.0,
        },
        ..cfg.collect
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = collect_dataset(world, cfg.link(), &collect, &mut rng)?;
    let hyper = CkmHyper { seed, ..cfg.ckm.clone() };
    let (model, train_report) = train(&data, &hyper)?;
    let env = model_env_features(&model, world);
    let mut ceps = vec![cfg.collect.cep];
    ceps.extend(cfg.transfer_ceps.iter().copied().filter(|&c| c != cfg.collect.cep));
    let errors = ckm_error_report(
        &model,
        &env,
        world,
        cfg.link(),
        &cfg.collect,
        kind == CkmKind::Robust,
        &ceps,
        cfg.ckm_test_samples,
        seed ^ 0x7e57,
    )?;
    log::info!(
        "ckm {kind:?}: clean {:.2} dB, holdout {:.2} dB",
        errors.clean_rmse_db,
        train_report.holdout_rmse_db
    );
    Ok((
        model,
        CkmPipelineReport {
            kind,
            collect_cep: collect.cep,
            samples: data.len(),
            train: train_report,
            errors,
        },
    ))
}

/// Environment features in the shape `model` expects.
pub fn model_env_features(model: &CkmModel, world: &World) -> EnvFeatures {
    match Predictor::ckm(Arc::new(model.clone()), false, world) {
        Predictor::Ckm { env, .. } => env,
        _ => unreachable!(),
    }
}

/// Builds the scheme's predictor. `env` overrides the CKM's environment
/// features (a stale map keeps the features it was built with).
pub fn build_predictor(
    scheme: Scheme,
    world: &World,
    ckm: Option<Arc<CkmModel>>,
    env: Option<EnvFeatures>,
) -> Result<Predictor> {
    let w = scheme.wiring();
    match w.predictor {
        PredictorMode::TrueOracle => Ok(Predictor::TrueOracle),
        PredictorMode::LosModel => Ok(Predictor::LosModel(LosSigmoid::default())),
        PredictorMode::Ckm | PredictorMode::CkmPec => {
            let model = ckm.ok_or_else(|| {
                Error::InvalidConfig(format!("{} needs a trained CKM", scheme.name()))
            })?;
            let flag = w.predictor == PredictorMode::CkmPec;
            Ok(match env {
                Some(env) => Predictor::Ckm { model, flag, env },
                None => Predictor::ckm(model, flag, world),
            })
        }
    }
}

/// Environment wired for `scheme` at positioning error `cep`.
pub fn build_env(
    cfg: &ExperimentConfig,
    world: Arc<World>,
    scheme: Scheme,
    ckm: Option<Arc<CkmModel>>,
    cep: f64,
) -> Result<CommEnv> {
    let predictor = build_predictor(scheme, &world, ckm, None)?;
    build_env_with(cfg, world, scheme, predictor, cep)
}

pub fn build_env_with(
    cfg: &ExperimentConfig,
    world: Arc<World>,
    scheme: Scheme,
    predictor: Predictor,
    cep: f64,
) -> Result<CommEnv> {
    let mut env_cfg = cfg.env.clone();
    env_cfg.cep = cep;
    env_cfg.scheduler.enabled = scheme.wiring().scheduler;
    CommEnv::new(world, env_cfg, predictor)
}

pub fn checkpoint_path(dir: &Path, episodes: usize) -> PathBuf {
    dir.join(format!("policy_ep{episodes:06}.json"))
}

/// Trains a policy for `cfg.scheme` at `cfg.train_cep`. With `out_dir`,
/// periodic checkpoints, the final policy and the learning curve are written
/// there.
pub fn run_training(
    cfg: &ExperimentConfig,
    world: Arc<World>,
    ckm: Option<Arc<CkmModel>>,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<(Agent, Vec<EpisodeRecord>)> {
    let mut env = build_env(cfg, world, cfg.scheme, ckm, cfg.train_cep)?;
    let ppo_cfg = PpoConfig {
        seed,
        ..cfg.ppo.clone()
    };
    if let Some(d) = out_dir {
        ensure_dir(d)?;
    }
    let every = cfg.checkpoint_every;
    let mut hook = |rec: &EpisodeRecord, agent: &Agent| -> Result<()> {
        if let Some(d) = out_dir {
            if every > 0 && (rec.episode + 1) % every == 0 {
                agent.save(&checkpoint_path(d, rec.episode + 1))?;
            }
        }
        if (rec.episode + 1) % 100 == 0 {
            log::info!(
                "{} episode {}: return {:.4}, time {}",
                cfg.scheme.name(),
                rec.episode + 1,
                rec.episode_return,
                rec.completion_time
            );
        }
        Ok(())
    };
    let (agent, curve) = train_loop(&mut env, &ppo_cfg, &mut hook)?;
    if let Some(d) = out_dir {
        agent.save(&d.join("policy.json"))?;
        write_learning_curve(&d.join("learning_curve.csv"), &curve)?;
    }
    Ok((agent, curve))
}

/// One evaluation episode, without the per-step log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub seed: u64,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub completion_time: f64,
    pub success: bool,
    pub punishment_count: u64,
    pub energy_mj: f64,
}

impl From<&EpisodeOutcome> for EvalRow {
    fn from(o: &EpisodeOutcome) -> Self {
        EvalRow {
            seed: o.seed,
            episode_return: o.episode_return,
            completion_time: o.completion_time,
            success: o.success,
            punishment_count: o.punishment_count,
            energy_mj: o.energy_mj,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub predictor: PredictorMode,
    pub scheduler: bool,
    pub cep: f64,
    pub episodes: usize,
    pub mean_completion_time: f64,
    /// Standard error of the mean completion time.
    pub completion_time_se: f64,
    pub success_rate: f64,
    pub success_rate_se: f64,
    pub mean_return: f64,
    pub mean_energy_mj: f64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn from_rows(predictor: PredictorMode, scheduler: bool, cep: f64, rows: Vec<EvalRow>) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: &dyn Fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let t = mean(&|r| r.completion_time);
        let s = mean(&|r| r.success as u8 as f64);
        let var_t = if rows.len() > 1 {
            rows.iter().map(|r| (r.completion_time - t).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        EvalReport {
            predictor,
            scheduler,
            cep,
            episodes: rows.len(),
            mean_completion_time: t,
            completion_time_se: (var_t / n).sqrt(),
            success_rate: s,
            success_rate_se: (s * (1.0 - s) / n).sqrt(),
            mean_return: mean(&|r| r.episode_return),
            mean_energy_mj: mean(&|r| r.energy_mj),
            rows,
        }
    }

    /// Same statistics without the per-episode rows.
    pub fn summary(&self) -> EvalReport {
        EvalReport {
            rows: Vec::new(),
            ..self.clone()
        }
    }
}

/// Seeds shared by every evaluation that uses `base`.
pub fn eval_seeds(base: u64, episodes: usize) -> Vec<u64> {
    (0..episodes).map(|k| episode_seed(base, k)).collect()
}

/// Deterministic evaluation over matched seeds. Also returns the successful
/// episode with the shortest flight time (or the best failure if none
/// succeeded).
pub fn run_eval(env: &mut CommEnv, policy: &PolicyNet, seeds: &[u64]) -> Result<(EvalReport, Option<EpisodeOutcome>)> {
    let mut rows = Vec::with_capacity(seeds.len());
    let mut best: Option<EpisodeOutcome> = None;
    for &seed in seeds {
        let o = run_episode(env, policy, seed)?;
        rows.push(EvalRow::from(&o));
        let better = match &best {
            None => true,
            Some(b) => (o.success, -o.completion_time) > (b.success, -b.completion_time),
        };
        if better {
            best = Some(o);
        }
    }
    let report = EvalReport::from_rows(
        env.predictor().mode(),
        env.config().scheduler.enabled,
        env.config().cep,
        rows,
    );
    Ok((report, best))
}

/// Evaluates `policy` at every CEP in `ceps` on the same seeds.
pub fn run_cep_sweep(
    cfg: &ExperimentConfig,
    world: Arc<World>,
    scheme: Scheme,
    ckm: Option<Arc<CkmModel>>,
    policy: &PolicyNet,
    ceps: &[f64],
    seeds: &[u64],
) -> Result<Vec<EvalReport>> {
    let mut out = Vec::with_capacity(ceps.len());
    for &cep in ceps {
        let mut env = build_env(cfg, world.clone(), scheme, ckm.clone(), cep)?;
        let (r, _) = run_eval(&mut env, policy, seeds)?;
        log::info!(
            "{} cep {cep}: success {:.3}, time {:.2}",
            scheme.name(),
            r.success_rate,
            r.mean_completion_time
        );
        out.push(r);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicReport {
    pub removed_buildings: usize,
    pub cep: f64,
    pub stale_rmse_db: f64,
    pub updated_rmse_db: f64,
    pub pec_before: EvalReport,
    pub pec_after: EvalReport,
    pub os_before: EvalReport,
    pub os_after: EvalReport,
}

/// The environment-change experiment: remove the tallest buildings, collect
/// fresh links, update the PEC map incrementally, keep the OS map stale, and
/// evaluate both policies before and after.
#[allow(clippy::too_many_arguments)]
pub fn run_dynamic_update(
    cfg: &ExperimentConfig,
    world: &World,
    robust_ckm: &CkmModel,
    pec_policy: &PolicyNet,
    os_policy: &PolicyNet,
    seeds: &[u64],
    seed: u64,
) -> Result<(DynamicReport, World, CkmModel)> {
    let cep = cfg.train_cep;
    let changed = world.without_tallest(cfg.dynamic_fraction);
    let removed = world.buildings.len() - changed.buildings.len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fresh = collect_dataset(
        &changed,
        cfg.link(),
        &CollectConfig {
            samples: cfg.dynamic_samples,
            ..cfg.collect
        },
        &mut rng,
    )?;
    let updated = update_incremental(robust_ckm, &fresh, &CkmHyper { seed, ..cfg.ckm.clone() })?;

    let stale_env = model_env_features(robust_ckm, world);
    let new_env = model_env_features(&updated, &changed);
    let score = |m: &CkmModel, env: &[f64]| {
        ckm_error_report(m, env, &changed, cfg.link(), &cfg.collect, true, &[], cfg.ckm_test_samples, seed ^ 0xd1)
            .map(|r| r.clean_rmse_db)
    };
    let stale_rmse = score(robust_ckm, &stale_env)?;
    let updated_rmse = score(&updated, &new_env)?;

    let before = Arc::new(world.clone());
    let after = Arc::new(changed.clone());
    let robust = Arc::new(robust_ckm.clone());
    let eval = |w: Arc<World>, scheme: Scheme, p: Predictor, policy: &PolicyNet| -> Result<EvalReport> {
        let mut env = build_env_with(cfg, w, scheme, p, cep)?;
        Ok(run_eval(&mut env, policy, seeds)?.0)
    };
    let pec_before = eval(
        before.clone(),
        Scheme::PecPpo,
        build_predictor(Scheme::PecPpo, world, Some(robust.clone()), None)?,
        pec_policy,
    )?;
    let os_before = eval(
        before,
        Scheme::OsPpo,
        build_predictor(Scheme::OsPpo, world, Some(robust.clone()), None)?,
        os_policy,
    )?;
    let pec_after = eval(
        after.clone(),
        Scheme::PecPpo,
        build_predictor(Scheme::PecPpo, &changed, Some(Arc::new(updated.clone())), Some(new_env))?,
        pec_policy,
    )?;
    let os_after = eval(
        after,
        Scheme::OsPpo,
        build_predictor(Scheme::OsPpo, &changed, Some(robust), Some(stale_env))?,
        os_policy,
    )?;
    Ok((
        DynamicReport {
            removed_buildings: removed,
            cep,
            stale_rmse_db: stale_rmse,
            updated_rmse_db: updated_rmse,
            pec_before,
            pec_after,
            os_before,
            os_after,
        },
        changed,
        updated,
    ))
}

/// Per-step transmit power and remaining payload fractions.
pub fn write_power_payload_csv(path: &Path, rows: &[TrajectoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let users = rows.first().map_or(0, |r| r.eta.len());
    let mut header = vec!["t".to_string(), "p_t_dbm".to_string(), "p_t_mw".to_string()];
    header.extend((0..users).map(|i| format!("eta_{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.t.to_string(),
            format_dbm(r.p_t_dbm),
            if r.p_t_dbm == POWER_OFF_DBM {
                "0".to_string()
            } else {
                crate::channel::dbm_to_mw(r.p_t_dbm).to_string()
            },
        ];
        rec.extend(r.eta.iter().map(|e| e.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_eval_rows_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_eval_rows_csv(path: &Path) -> Result<Vec<EvalRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Csv(e)
    }
}

/// Writes the plotting bundle into `dir` and returns the files written.
pub fn emit_plot_data(
    dir: &Path,
    curve: Option<&[EpisodeRecord]>,
    trajectory: Option<&[TrajectoryRow]>,
) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let mut out = Vec::new();
    if let Some(c) = curve {
        let p = dir.join("learning_curve.csv");
        write_learning_curve(&p, c)?;
        out.push(p);
    }
    if let Some(t) = trajectory {
        let p = dir.join("trajectory.csv");
        write_trajectory_csv(&p, t)?;
        out.push(p);
        let p = dir.join("power_payload.csv");
        write_power_payload_csv(&p, t)?;
        out.push(p);
    }
    Ok(out)
}

/// Total radiated energy of a logged episode, in millijoules.
pub fn episode_energy_mj(rows: &[TrajectoryRow], dt: f64) -> f64 {
    radiated_energy_mj(rows, dt)
}

/// Environment features a CKM built for `world` would use, for `env_buildings`
/// slots.
pub fn world_features(world: &World, cfg: &ExperimentConfig) -> EnvFeatures {
    env_features(world, cfg.collect.env_buildings)
}
