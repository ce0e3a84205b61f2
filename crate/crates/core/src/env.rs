//! UAV data-collection MDP: kinematics, user association, payload
//! accounting, rewards and termination.
//!
//! Each step selects users with a pluggable channel predictor queried at a
//! freshly perturbed user position, then delivers bits at the rate of the
//! true channel. A link whose true received power falls below the
//! association threshold delivers nothing, so a wrong selection costs a
//! slot.

use std::f64::consts::{FRAC_PI_2, TAU};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{
    dbm_to_mw, expected_gain_los_model, mw_to_dbm, rate_bps, true_gain_clamped, LinkBudgetParams,
    LosSigmoid, MIN_LINK_DISTANCE,
};
use crate::ckm::{env_features, project_reported, CkmModel, CkmQuery, EnvFeatures, PredictionInterval, POSITION_INPUTS};
use crate::error::{Error, Result};
use crate::geometry::{GroundUser, Vec3, World};
use crate::noise::{perturb, CepModel};
use crate::scheduler::{schedule_slot, SchedulerConfig};

pub const ACTION_DIM: usize = 4;
pub const OBS_UAV: usize = 6;
pub const OBS_PER_USER: usize = 6;

pub fn observation_dim(users: usize) -> usize {
    OBS_UAV + OBS_PER_USER * users
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PredictorMode {
    TrueOracle,
    /// CKM queried with `flag = 0`.
    Ckm,
    /// CKM queried with `flag = 1` (noise-corrected selection).
    CkmPec,
    LosModel,
}

/// Channel model used in the selection phase.
#[derive(Debug, Clone)]
pub enum Predictor {
    TrueOracle,
    Ckm {
        model: Arc<CkmModel>,
        flag: bool,
        env: EnvFeatures,
    },
    LosModel(LosSigmoid),
}

impl Predictor {
    /// CKM predictor with environment features taken from `world`.
    pub fn ckm(model: Arc<CkmModel>, flag: bool, world: &World) -> Predictor {
        let env_len = model.norm.raw_dim.saturating_sub(POSITION_INPUTS);
        let env = match model.layout {
            crate::ckm::InputLayout::PositionsFlagEnv => env_features(world, env_len / 24),
            crate::ckm::InputLayout::PositionsFlag => Arc::new(Vec::new()),
        };
        Predictor::Ckm { model, flag, env }
    }

    pub fn mode(&self) -> PredictorMode {
        match self {
            Predictor::TrueOracle => PredictorMode::TrueOracle,
            Predictor::Ckm { flag: false, .. } => PredictorMode::Ckm,
            Predictor::Ckm { flag: true, .. } => PredictorMode::CkmPec,
            Predictor::LosModel(_) => PredictorMode::LosModel,
        }
    }

    /// Point predictions (dB) and, when `intervals` is set, ensemble intervals.
    fn predict(
        &self,
        uav: Vec3,
        gus: &[Vec3],
        world: &World,
        params: &LinkBudgetParams,
        intervals: bool,
    ) -> Result<(Vec<f64>, Option<Vec<PredictionInterval>>)> {
        match self {
            Predictor::TrueOracle => {
                let g: Vec<f64> = gus
                    .iter()
                    .map(|&gu| true_gain_clamped(uav, gu, world, params).db())
                    .collect();
                let iv = intervals.then(|| g.iter().map(|&v| PredictionInterval::point(v)).collect());
                Ok((g, iv))
            }
            Predictor::LosModel(s) => {
                let mut g = Vec::with_capacity(gus.len());
                for &gu in gus {
                    let d = uav.distance(gu);
                    let gu = if d < MIN_LINK_DISTANCE {
                        gu - Vec3::new(0.0, 0.0, MIN_LINK_DISTANCE)
                    } else {
                        gu
                    };
                    g.push(expected_gain_los_model(uav, gu, params, s.a, s.b)?.db());
                }
                let iv = intervals.then(|| g.iter().map(|&v| PredictionInterval::point(v)).collect());
                Ok((g, iv))
            }
            Predictor::Ckm { model, flag, env } => {
                let qs: Vec<CkmQuery<'_>> = gus
                    .iter()
                    .map(|&gu| CkmQuery {
                        uav,
                        gu,
                        flag: *flag,
                        env,
                    })
                    .collect();
                let m = model.predict_members(&qs)?;
                let k = m.nrows() as f64;
                let mean = m.columns().into_iter().map(|c| c.sum() / k).collect();
                let iv = intervals.then(|| {
                    m.columns()
                        .into_iter()
                        .map(|c| PredictionInterval::from_members(&c.to_vec()))
                        .collect()
                });
                Ok((mean, iv))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub dt: f64,
    pub t_max_steps: usize,
    pub v_max: f64,
    pub a_max: f64,
    pub link: LinkBudgetParams,
    pub payload_bits: f64,
    pub user_count: usize,
    pub user_max_height: f64,
    /// Draw fresh user positions on every reset; otherwise use the world's users.
    pub randomize_users: bool,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub cep: f64,
    pub arrival_radius: f64,
    pub scheduler: SchedulerConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            dt: 1.0,
            t_max_steps: 160,
            v_max: 50.0,
            a_max: 20.0,
            link: LinkBudgetParams::default(),
            payload_bits: 26e6,
            user_count: 15,
            user_max_height: 250.0,
            randomize_users: true,
            r1: 1e-6,
            r2: 0.0012,
            r3: 0.005,
            cep: 0.0,
            arrival_radius: 30.0,
            scheduler: SchedulerConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn desk() -> Self {
        EnvConfig {
            t_max_steps: 80,
            link: LinkBudgetParams::desk(),
            payload_bits: 5e6,
            user_count: 3,
            user_max_height: 20.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.link.validate()?;
        self.scheduler.validate()?;
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !(pos(self.dt) && pos(self.v_max) && pos(self.a_max) && pos(self.arrival_radius)) {
            return Err(Error::InvalidConfig(
                "dt, v_max, a_max and arrival radius must be positive".into(),
            ));
        }
        if self.t_max_steps == 0 || self.user_count == 0 {
            return Err(Error::InvalidConfig(
                "t_max_steps and user_count must be positive".into(),
            ));
        }
        if !(self.payload_bits > 0.0) {
            return Err(Error::InvalidConfig("payload must be positive".into()));
        }
        if !(self.r1 >= 0.0 && self.r2 >= 0.0 && self.r3 >= 0.0) {
            return Err(Error::InvalidConfig("reward coefficients must be >= 0".into()));
        }
        CepModel::new(self.cep)?;
        Ok(())
    }

    pub fn observation_dim(&self) -> usize {
        observation_dim(self.user_count)
    }
}

/// Normalized action; out-of-range components are clipped on use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvAction {
    /// `[-1, 1]`, scaled by `a_max`.
    pub a_norm: f64,
    /// `[0, 1]`, scaled by `2 pi`.
    pub theta_norm: f64,
    /// `[-1, 1]`, scaled by `pi / 2`.
    pub phi_norm: f64,
    /// `[0, 1]`, linear in milliwatts up to `p_max`.
    pub p_norm: f64,
}

impl EnvAction {
    pub fn from_slice(a: &[f64]) -> EnvAction {
        EnvAction {
            a_norm: a[0],
            theta_norm: a[1],
            phi_norm: a[2],
            p_norm: a[3],
        }
    }

    pub fn clipped(self) -> EnvAction {
        let c = |v: f64, lo: f64, hi: f64| if v.is_nan() { lo } else { v.clamp(lo, hi) };
        EnvAction {
            a_norm: c(self.a_norm, -1.0, 1.0),
            theta_norm: c(self.theta_norm, 0.0, 1.0),
            phi_norm: c(self.phi_norm, -1.0, 1.0),
            p_norm: c(self.p_norm, 0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserState {
    pub position: Vec3,
    pub alpha: bool,
    /// Fraction of the payload still to deliver.
    pub eta: f64,
    pub delivered_bits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub uav_pos: Vec3,
    pub v: f64,
    pub theta: f64,
    pub phi: f64,
    pub users: Vec<UserState>,
    pub t: usize,
    pub punishment_count: u64,
}

impl EnvState {
    pub fn payload_cleared(&self) -> bool {
        self.users.iter().all(|u| u.eta <= 0.0)
    }

    pub fn observation(&self, world: &World, v_max: f64) -> Vec<f64> {
        let b = world.bounds;
        let mut o = Vec::with_capacity(observation_dim(self.users.len()));
        o.extend_from_slice(&[
            self.uav_pos.x / b.x,
            self.uav_pos.y / b.y,
            self.uav_pos.z / b.z,
            self.v / v_max,
            self.theta / TAU,
            self.phi / FRAC_PI_2,
        ]);
        let diag = world.diagonal();
        for u in &self.users {
            o.extend_from_slice(&[
                u.position.x / b.x,
                u.position.y / b.y,
                u.position.z / b.z,
                if u.alpha { 1.0 } else { 0.0 },
                u.eta,
                self.uav_pos.distance(u.position) / diag,
            ]);
        }
        o
    }
}

/// Result of one kinematic update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Motion {
    pub pos: Vec3,
    pub v: f64,
    pub theta: f64,
    pub phi: f64,
    pub clipped: bool,
}

/// Speed first, then position with the new speed; both clipped to their
/// limits. `clipped` reports whether any limit fired.
pub fn kinematics_step(
    pos: Vec3,
    v: f64,
    action: EnvAction,
    config: &EnvConfig,
    world: &World,
) -> Motion {
    let a = action.clipped();
    let theta = a.theta_norm * TAU;
    let phi = a.phi_norm * FRAC_PI_2;
    let raw_v = v + a.a_norm * config.a_max * config.dt;
    let new_v = raw_v.clamp(0.0, config.v_max);
    let mut clipped = new_v != raw_v;
    let dir = Vec3::new(theta.cos() * phi.cos(), theta.sin() * phi.cos(), phi.sin());
    let raw_pos = pos + dir * (new_v * config.dt);
    let lo = world.uav_min();
    let hi = world.uav_max();
    let new_pos = raw_pos.clamp(lo, hi);
    clipped |= new_pos != raw_pos;
    Motion {
        pos: new_pos,
        v: new_v,
        theta,
        phi,
        clipped,
    }
}

/// `R2 = r2 * N_new * (T_max - t)`.
pub fn completion_reward(r2: f64, newly_done: usize, t_max: usize, t: usize) -> f64 {
    r2 * newly_done as f64 * (t_max as f64 - t as f64)
}

/// `R3 = r3 * (T_max - t)`.
pub fn mission_reward(r3: f64, t_max: usize, t: usize) -> f64 {
    r3 * (t_max as f64 - t as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardTerms {
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
}

impl RewardTerms {
    pub fn total(&self) -> f64 {
        self.r1 + self.r2 + self.r3
    }
}

/// One logged step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub v: f64,
    pub theta: f64,
    pub phi: f64,
    pub p_t_dbm: f64,
    pub clipped: bool,
    pub alpha: Vec<bool>,
    pub eta: Vec<f64>,
    pub rate_bps: Vec<f64>,
    pub reward: RewardTerms,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    /// All payloads delivered and the UAV back at the start.
    pub success: bool,
    pub row: TrajectoryRow,
}

pub struct CommEnv {
    world: Arc<World>,
    config: EnvConfig,
    predictor: Predictor,
    cep: CepModel,
    state: EnvState,
    rng: ChaCha8Rng,
    done: bool,
    started: bool,
}

impl CommEnv {
    pub fn new(world: Arc<World>, config: EnvConfig, predictor: Predictor) -> Result<CommEnv> {
        config.validate()?;
        world.validate()?;
        if config.scheduler.enabled {
            if let Predictor::Ckm { model, .. } = &predictor {
                if model.ensemble_size() < 3 {
                    return Err(Error::InvalidConfig(
                        "power scheduling needs a CKM with at least 3 members".into(),
                    ));
                }
            }
        }
        if !config.randomize_users && world.users.len() != config.user_count {
            return Err(Error::InvalidConfig(format!(
                "world has {} users, config expects {}",
                world.users.len(),
                config.user_count
            )));
        }
        let cep = CepModel::new(config.cep)?;
        let state = EnvState {
            uav_pos: world.uav_start,
            v: 0.0,
            theta: 0.0,
            phi: 0.0,
            users: Vec::new(),
            t: 0,
            punishment_count: 0,
        };
        Ok(CommEnv {
            world,
            config,
            predictor,
            cep,
            state,
            rng: ChaCha8Rng::seed_from_u64(0),
            done: true,
            started: false,
        })
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn predictor(&self) -> &Predictor {
        &self.predictor
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn observation_dim(&self) -> usize {
        self.config.observation_dim()
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Starts an episode. User layout and selection noise are pure
    /// functions of `seed`.
    pub fn reset(&mut self, seed: u64) -> Result<Vec<f64>> {
        let mut layout_rng = ChaCha8Rng::seed_from_u64(seed);
        let users: Vec<GroundUser> = if self.config.randomize_users {
            self.world.sample_users(
                self.config.user_count,
                self.config.user_max_height,
                self.config.payload_bits,
                100_000,
                &mut layout_rng,
            )?
        } else {
            self.world.users.clone()
        };
        self.rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_5E1EC7);
        self.state = EnvState {
            uav_pos: self.world.uav_start,
            v: 0.0,
            theta: 0.0,
            phi: 0.0,
            users: users
                .iter()
                .map(|u| UserState {
                    position: u.position,
                    alpha: false,
                    eta: 1.0,
                    delivered_bits: 0.0,
                })
                .collect(),
            t: 0,
            punishment_count: 0,
        };
        self.done = false;
        self.started = true;
        Ok(self.observation())
    }

    pub fn observation(&self) -> Vec<f64> {
        self.state.observation(&self.world, self.config.v_max)
    }

    fn at_start(&self) -> bool {
        self.state.uav_pos.distance(self.world.uav_start) <= self.config.arrival_radius
    }

    pub fn step(&mut self, action: EnvAction) -> Result<StepResult> {
        if self.done || !self.started {
            return Err(Error::EpisodeOver);
        }
        let cfg = &self.config;
        let params = &cfg.link;
        let motion = kinematics_step(self.state.uav_pos, self.state.v, action, cfg, &self.world);
        let s = &mut self.state;
        s.uav_pos = motion.pos;
        s.v = motion.v;
        s.theta = motion.theta;
        s.phi = motion.phi;
        s.t += 1;
        if motion.clipped {
            s.punishment_count += 1;
        }

        // selection phase: predictor at freshly perturbed positions
        let active: Vec<usize> = (0..s.users.len()).filter(|&i| s.users[i].eta > 0.0).collect();
        let reported: Vec<Vec3> = active
            .iter()
            .map(|&i| {
                let p = perturb(s.users[i].position, &self.cep, &mut self.rng);
                project_reported(p, &self.world, cfg.user_max_height)
            })
            .collect();
        let (predicted, intervals) = self.predictor.predict(
            s.uav_pos,
            &reported,
            &self.world,
            params,
            cfg.scheduler.enabled,
        )?;
        let p_t_dbm = match &intervals {
            Some(iv) => schedule_slot(iv.iter(), &cfg.scheduler, params),
            None => mw_to_dbm(action.clipped().p_norm * params.p_max_mw()),
        };
        for u in s.users.iter_mut() {
            u.alpha = false;
        }
        for (k, &i) in active.iter().enumerate() {
            s.users[i].alpha = p_t_dbm + predicted[k] >= params.p_min_dbm;
        }

        // rate phase: true channel at true positions
        let mut rates = vec![0.0; s.users.len()];
        let mut newly_done = 0;
        for (i, u) in s.users.iter_mut().enumerate() {
            if !u.alpha {
                continue;
            }
            let g = true_gain_clamped(s.uav_pos, u.position, &self.world, params);
            if p_t_dbm + g.db() < params.p_min_dbm {
                continue;
            }
            let r = rate_bps(g, p_t_dbm, params);
            rates[i] = r;
            let remaining = u.eta * cfg.payload_bits;
            let sent = (r * cfg.dt).min(remaining);
            u.delivered_bits += sent;
            u.eta = ((remaining - r * cfg.dt) / cfg.payload_bits).max(0.0);
            if u.eta == 0.0 {
                newly_done += 1;
            }
        }

        let mut terms = RewardTerms::default();
        if motion.clipped {
            terms.r1 = -cfg.r1 * s.punishment_count as f64;
        }
        terms.r2 = completion_reward(cfg.r2, newly_done, cfg.t_max_steps, s.t);
        let success = s.payload_cleared() && self.at_start();
        let s = &self.state;
        if success {
            terms.r3 = mission_reward(cfg.r3, cfg.t_max_steps, s.t);
        }
        let terminated = success || s.t >= cfg.t_max_steps;
        self.done = terminated;

        let row = TrajectoryRow {
            t: s.t,
            x: s.uav_pos.x,
            y: s.uav_pos.y,
            z: s.uav_pos.z,
            v: s.v,
            theta: s.theta,
            phi: s.phi,
            p_t_dbm,
            clipped: motion.clipped,
            alpha: s.users.iter().map(|u| u.alpha).collect(),
            eta: s.users.iter().map(|u| u.eta).collect(),
            rate_bps: rates,
            reward: terms,
        };
        Ok(StepResult {
            observation: self.observation(),
            reward: terms.total(),
            terminated,
            success,
            row,
        })
    }
}

/// Radiated energy in millijoules: `sum(P_mW * dt)`.
pub fn radiated_energy_mj(rows: &[TrajectoryRow], dt: f64) -> f64 {
    rows.iter().map(|r| dbm_to_mw(r.p_t_dbm) * dt).sum()
}

fn trajectory_header(users: usize) -> Vec<String> {
    let mut h: Vec<String> = ["t", "x", "y", "z", "v", "theta", "phi", "p_t_dbm", "clipped"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for i in 0..users {
        h.push(format!("alpha_{i}"));
        h.push(format!("eta_{i}"));
        h.push(format!("rate_{i}"));
    }
    h.extend(["r1", "r2", "r3"].iter().map(|s| s.to_string()));
    h
}

/// Writes rows as CSV; `p_t_dbm` is the literal `OFF` when the radio is off.
pub fn write_trajectory_csv(path: &Path, rows: &[TrajectoryRow]) -> Result<()> {
    let users = rows.first().map_or(0, |r| r.alpha.len());
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(trajectory_header(users))?;
    for r in rows {
        let mut rec = vec![
            r.t.to_string(),
            r.x.to_string(),
            r.y.to_string(),
            r.z.to_string(),
            r.v.to_string(),
            r.theta.to_string(),
            r.phi.to_string(),
            format_dbm(r.p_t_dbm),
            (r.clipped as u8).to_string(),
        ];
        for i in 0..users {
            rec.push((r.alpha[i] as u8).to_string());
            rec.push(r.eta[i].to_string());
            rec.push(r.rate_bps[i].to_string());
        }
        rec.push(r.reward.r1.to_string());
        rec.push(r.reward.r2.to_string());
        rec.push(r.reward.r3.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn format_dbm(dbm: f64) -> String {
    if dbm == f64::NEG_INFINITY {
        "OFF".to_string()
    } else {
        dbm.to_string()
    }
}

pub fn parse_dbm(s: &str) -> std::result::Result<f64, std::num::ParseFloatError> {
    if s == "OFF" {
        Ok(f64::NEG_INFINITY)
    } else {
        s.parse()
    }
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<TrajectoryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let users = header.iter().filter(|h| h.starts_with("alpha_")).count();
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if header.len() != trajectory_header(users).len() {
        return Err(corrupt("unexpected trajectory header".into()));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| corrupt(format!("column {i}: {e}")))
        };
        let mut alpha = Vec::with_capacity(users);
        let mut eta = Vec::with_capacity(users);
        let mut rate = Vec::with_capacity(users);
        for k in 0..users {
            alpha.push(f(9 + 3 * k)? != 0.0);
            eta.push(f(10 + 3 * k)?);
            rate.push(f(11 + 3 * k)?);
        }
        let base = 9 + 3 * users;
        out.push(TrajectoryRow {
            t: f(0)? as usize,
            x: f(1)?,
            y: f(2)?,
            z: f(3)?,
            v: f(4)?,
            theta: f(5)?,
            phi: f(6)?,
            p_t_dbm: parse_dbm(&rec[7]).map_err(|e| corrupt(format!("power: {e}")))?,
            clipped: f(8)? != 0.0,
            alpha,
            eta,
            rate_bps: rate,
            reward: RewardTerms {
                r1: f(base)?,
                r2: f(base + 1)?,
                r3: f(base + 2)?,
            },
        });
    }
    Ok(out)
}

/// One JSON object per line.
pub fn write_trajectory_jsonl(path: &Path, rows: &[TrajectoryRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
