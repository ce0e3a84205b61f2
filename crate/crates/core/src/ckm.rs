//! Channel knowledge map (CKM): an ensemble of residual MLPs regressing
//! channel gain from `(UAV position, reported user position, noise flag,
//! environment features)`.
//!
//! Noisy training rows carry `noise_flag = 1` and a CEP-perturbed user
//! position, while their label is always the gain at the true position. At
//! query time the flag tells the map whether the supplied position is
//! trustworthy.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{true_gain, ChannelGain, LinkBudgetParams};
use crate::error::{Error, Result};
use crate::geometry::{Vec3, World};
use crate::nn::{Activation, Adam, BatchNorm, Dense, Parameterized};
use crate::noise::{perturb, CepModel};
use crate::persist;

pub const MODEL_FORMAT: &str = "uavckm-ckm";
pub const MODEL_VERSION: u32 = 1;

/// Number of leading positional inputs: UAV xyz, user xyz, flag.
pub const POSITION_INPUTS: usize = 7;

/// Flattened, bounds-normalized corners of the largest buildings, shared by
/// every sample collected in one world.
pub type EnvFeatures = Arc<Vec<f64>>;

/// Encodes the 8 corners of the `max_buildings` largest buildings (by
/// volume), each coordinate divided by the world extent; zero padded.
pub fn env_features(world: &World, max_buildings: usize) -> EnvFeatures {
    let mut order: Vec<usize> = (0..world.buildings.len()).collect();
    order.sort_by(|&a, &b| {
        world.buildings[b]
            .volume()
            .total_cmp(&world.buildings[a].volume())
            .then(a.cmp(&b))
    });
    let mut out = vec![0.0; max_buildings * 24];
    for (slot, &bi) in order.iter().take(max_buildings).enumerate() {
        for (c, corner) in world.buildings[bi].corners().iter().enumerate() {
            let base = slot * 24 + c * 3;
            out[base] = corner.x / world.bounds.x;
            out[base + 1] = corner.y / world.bounds.y;
            out[base + 2] = corner.z / world.bounds.z;
        }
    }
    Arc::new(out)
}

/// Short stable digest of an environment feature vector.
pub fn env_hash(features: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in features {
        h.update(v.to_le_bytes());
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    pub uav_pos: Vec3,
    pub gu_pos_reported: Vec3,
    pub gu_pos_true: Vec3,
    pub noise_flag: bool,
    pub env: EnvFeatures,
    pub label_gain_db: f64,
}

/// Where the user end of each sampled link comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum GuSource {
    /// One of the world's users, chosen uniformly.
    WorldUsers,
    /// Uniform over the user placement region, outside buildings.
    #[default]
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectConfig {
    pub samples: usize,
    pub cep: f64,
    pub source: GuSource,
    /// Top of the user placement region; reported positions are projected
    /// into it.
    pub user_max_height: f64,
    pub env_buildings: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            samples: 20_000,
            cep: 5.0,
            source: GuSource::Uniform,
            user_max_height: 250.0,
            env_buildings: 20,
        }
    }
}

impl CollectConfig {
    pub fn desk() -> Self {
        CollectConfig {
            user_max_height: 20.0,
            env_buildings: 12,
            ..Default::default()
        }
    }
}

/// Clamps a reported user position into the region users can occupy.
pub fn project_reported(p: Vec3, world: &World, user_max_height: f64) -> Vec3 {
    p.clamp(
        Vec3::ZERO,
        Vec3::new(world.bounds.x, world.bounds.y, user_max_height),
    )
}

/// Samples labelled links. Exactly `ceil(n / 2)` rows are flagged noisy and
/// get a CEP-perturbed reported position; labels always use the true
/// position.
pub fn collect_dataset<R: Rng + ?Sized>(
    world: &World,
    params: &LinkBudgetParams,
    config: &CollectConfig,
    rng: &mut R,
) -> Result<Vec<ChannelSample>> {
    let n = config.samples;
    if n == 0 {
        return Err(Error::InvalidConfig("dataset size must be >= 1".into()));
    }
    if config.source == GuSource::WorldUsers && world.users.is_empty() {
        return Err(Error::InvalidConfig("world has no users to sample".into()));
    }
    let cep = CepModel::new(config.cep)?;
    let env = env_features(world, config.env_buildings);
    let mut flags: Vec<bool> = (0..n).map(|i| i < n.div_ceil(2)).collect();
    flags.shuffle(rng);

    let (lo, hi) = (world.uav_min(), world.uav_max());
    let mut out = Vec::with_capacity(n);
    for flag in flags {
        let (uav, gu, label) = loop {
            let uav = Vec3::new(
                rng.random_range(lo.x..=hi.x),
                rng.random_range(lo.y..=hi.y),
                rng.random_range(lo.z..=hi.z),
            );
            let gu = match config.source {
                GuSource::WorldUsers => world.users[rng.random_range(0..world.users.len())].position,
                GuSource::Uniform => {
                    let p = Vec3::new(
                        rng.random_range(0.0..=world.bounds.x),
                        rng.random_range(0.0..=world.bounds.y),
                        rng.random_range(0.0..=config.user_max_height),
                    );
                    if world.inside_any_building(p) {
                        continue;
                    }
                    p
                }
            };
            match true_gain(uav, gu, world, params) {
                Ok(g) => break (uav, gu, g.db()),
                Err(Error::TooClose(_)) => continue,
                Err(e) => return Err(e),
            }
        };
        let reported = if flag {
            project_reported(perturb(gu, &cep, rng), world, config.user_max_height)
        } else {
            gu
        };
        out.push(ChannelSample {
            uav_pos: uav,
            gu_pos_reported: reported,
            gu_pos_true: gu,
            noise_flag: flag,
            env: env.clone(),
            label_gain_db: label,
        });
    }
    Ok(out)
}

/// Which inputs feed the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum InputLayout {
    /// Positions, flag, then environment features.
    #[default]
    PositionsFlagEnv,
    /// Positions and flag only (the 7-input variant).
    PositionsFlag,
}

impl InputLayout {
    fn raw_input(self, uav: Vec3, gu: Vec3, flag: bool, env: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(POSITION_INPUTS + env.len());
        v.extend_from_slice(&uav.to_array());
        v.extend_from_slice(&gu.to_array());
        v.push(if flag { 1.0 } else { 0.0 });
        if self == InputLayout::PositionsFlagEnv {
            v.extend_from_slice(env);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CkmHyper {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub members: usize,
    pub blocks: usize,
    pub width: usize,
    pub seed: u64,
    pub holdout_fraction: f64,
    pub layout: InputLayout,
    /// Fraction of each incremental-update batch drawn from replay.
    pub replay_ratio: f64,
    pub replay_capacity: usize,
}

impl Default for CkmHyper {
    fn default() -> Self {
        CkmHyper {
            epochs: 200,
            batch: 256,
            lr: 1e-3,
            members: 5,
            blocks: 3,
            width: 128,
            seed: 0,
            holdout_fraction: 0.1,
            layout: InputLayout::PositionsFlagEnv,
            replay_ratio: 0.3,
            replay_capacity: 4096,
        }
    }
}

impl CkmHyper {
    /// Lighter settings that train in seconds on one core.
    pub fn desk() -> Self {
        CkmHyper {
            epochs: 60,
            batch: 128,
            lr: 2e-3,
            width: 64,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.members == 0 || self.width == 0 || self.batch < 2 {
            return bad("members and width must be positive, batch >= 2");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout fraction must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.replay_ratio) {
            return bad("replay ratio must be in [0, 1)");
        }
        Ok(())
    }
}

/// Per-feature standardization; constant features are dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub raw_dim: usize,
    pub kept: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub label_mean: f64,
    pub label_std: f64,
}

const MIN_STD: f64 = 1e-9;

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl NormStats {
    pub fn fit(rows: &[Vec<f64>], labels: &[f64]) -> NormStats {
        assert!(!rows.is_empty() && rows.len() == labels.len());
        let raw_dim = rows[0].len();
        let (mut kept, mut mean, mut std) = (Vec::new(), Vec::new(), Vec::new());
        for j in 0..raw_dim {
            let (m, s) = mean_std(rows.iter().map(|r| r[j]));
            if s > MIN_STD {
                kept.push(j);
                mean.push(m);
                std.push(s);
            }
        }
        let (label_mean, label_std) = mean_std(labels.iter().copied());
        NormStats {
            raw_dim,
            kept,
            mean,
            std,
            label_mean,
            label_std: if label_std > MIN_STD { label_std } else { 1.0 },
        }
    }

    pub fn input_dim(&self) -> usize {
        self.kept.len()
    }

    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        self.kept
            .iter()
            .enumerate()
            .map(|(k, &j)| (raw[j] - self.mean[k]) / self.std[k])
            .collect()
    }

    pub fn normalize_label(&self, y: f64) -> f64 {
        (y - self.label_mean) / self.label_std
    }

    pub fn denormalize_label(&self, z: f64) -> f64 {
        z * self.label_std + self.label_mean
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResidualBlock {
    dense: Dense,
    norm: BatchNorm,
    #[serde(skip)]
    activation: Option<Array2<f64>>,
}

/// Input projection, `R` residual blocks `h + BN(ReLU(W h + b))`, scalar head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualNet {
    input: Dense,
    blocks: Vec<ResidualBlock>,
    output: Dense,
    #[serde(skip)]
    stem: Option<Array2<f64>>,
}

impl ResidualNet {
    pub fn new<R: Rng + ?Sized>(inputs: usize, width: usize, blocks: usize, rng: &mut R) -> Self {
        let input = Dense::new(inputs, width, 1.0, rng);
        let blocks = (0..blocks)
            .map(|_| ResidualBlock {
                dense: Dense::new(width, width, 1.0, rng),
                norm: BatchNorm::new(width),
                activation: None,
            })
            .collect();
        ResidualNet {
            input,
            blocks,
            output: Dense::new(width, 1, 1.0, rng),
            stem: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input.fan_in()
    }

    /// Training-mode forward (batch statistics, caches for backward).
    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = self.input.forward(x);
        Activation::Relu.apply(&mut h);
        self.stem = Some(h.clone());
        for b in &mut self.blocks {
            let mut a = b.dense.forward(&h);
            Activation::Relu.apply(&mut a);
            let n = b.norm.forward(&a);
            b.activation = Some(a);
            h = h + n;
        }
        self.output.forward(&h)
    }

    pub fn infer(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = self.input.infer(x);
        Activation::Relu.apply(&mut h);
        for b in &self.blocks {
            let mut a = b.dense.infer(&h);
            Activation::Relu.apply(&mut a);
            h = h + b.norm.infer(&a);
        }
        self.output.infer(&h)
    }

    pub fn backward(&mut self, grad_out: &Array2<f64>) -> Array2<f64> {
        let mut dh = self.output.backward(grad_out);
        for b in self.blocks.iter_mut().rev() {
            let mut da = b.norm.backward(&dh);
            let a = b.activation.as_ref().expect("forward before backward");
            Activation::Relu.backprop(a, &mut da);
            dh = dh + b.dense.backward(&da);
        }
        let stem = self.stem.as_ref().expect("forward before backward");
        Activation::Relu.backprop(stem, &mut dh);
        self.input.backward(&dh)
    }
}

impl Parameterized for ResidualNet {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.input.visit_params(f);
        for b in &mut self.blocks {
            b.dense.visit_params(f);
            b.norm.visit_params(f);
        }
        self.output.visit_params(f);
    }
}

/// Normalized training row kept for replay during incremental updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRow {
    pub x: Vec<f64>,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingMeta {
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub samples: usize,
    pub updates: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CkmModel {
    pub members: Vec<ResidualNet>,
    pub norm: NormStats,
    pub layout: InputLayout,
    pub meta: TrainingMeta,
    pub replay: Vec<ReplayRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_rmse_db: f64,
    pub holdout_rmse_db: f64,
    pub holdout_count: usize,
    pub final_loss: f64,
}

/// Ensemble percentiles of one query, in dB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    pub median: f64,
    pub lo: f64,
    pub hi: f64,
}

impl PredictionInterval {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn point(v: f64) -> Self {
        PredictionInterval {
            median: v,
            lo: v,
            hi: v,
        }
    }
}

/// Linear-interpolation percentile of an ascending slice, `q` in `[0, 1]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

impl PredictionInterval {
    /// 5th / 50th / 95th percentiles of member predictions.
    pub fn from_members(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        PredictionInterval {
            median: percentile_sorted(&v, 0.5),
            lo: percentile_sorted(&v, 0.05),
            hi: percentile_sorted(&v, 0.95),
        }
    }
}

/// One CKM lookup.
#[derive(Debug, Clone, Copy)]
pub struct CkmQuery<'a> {
    pub uav: Vec3,
    pub gu: Vec3,
    pub flag: bool,
    pub env: &'a [f64],
}

fn rows_of(samples: &[ChannelSample], layout: InputLayout) -> (Vec<Vec<f64>>, Vec<f64>) {
    samples
        .iter()
        .map(|s| {
            (
                layout.raw_input(s.uav_pos, s.gu_pos_reported, s.noise_flag, &s.env),
                s.label_gain_db,
            )
        })
        .unzip()
}

fn to_matrix(rows: &[Vec<f64>], dim: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    m
}

fn member_seed(base: u64, member: usize, round: usize) -> u64 {
    base ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(member as u64 + 1))
        ^ ((round as u64) << 48)
}

/// Minibatch Adam on mean squared error over the rows listed in `index`.
fn fit_member(
    net: &mut ResidualNet,
    x: &Array2<f64>,
    y: &Array1<f64>,
    index: &mut [usize],
    hyper: &CkmHyper,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut opt = Adam::new(hyper.lr);
    let mut last = f64::NAN;
    for epoch in 0..hyper.epochs {
        index.shuffle(rng);
        let mut total = 0.0;
        let mut chunks: Vec<&[usize]> = index.chunks(hyper.batch).collect();
        // batch norm needs at least two rows
        if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
            chunks.pop();
        }
        for chunk in chunks {
            let xb = x.select(Axis(0), chunk);
            let yb = y.select(Axis(0), chunk);
            net.zero_grad();
            let pred = net.forward(&xb).column(0).to_owned();
            let diff = &pred - &yb;
            let n = chunk.len() as f64;
            let loss = diff.mapv(|d| d * d).sum() / n;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite CKM loss at epoch {epoch}"
                )));
            }
            total += loss * n;
            let grad = (diff * (2.0 / n)).insert_axis(Axis(1));
            net.backward(&grad);
            opt.step(net);
        }
        last = total / index.len() as f64;
    }
    Ok(last)
}

fn reservoir(rows: Vec<ReplayRow>, capacity: usize, rng: &mut ChaCha8Rng) -> Vec<ReplayRow> {
    if rows.len() <= capacity {
        return rows;
    }
    let mut rows = rows;
    rows.shuffle(rng);
    rows.truncate(capacity);
    rows
}

/// Trains a fresh ensemble. Each member sees its own bootstrap resample of
/// the training split and its own seed.
pub fn train(dataset: &[ChannelSample], hyper: &CkmHyper) -> Result<(CkmModel, TrainReport)> {
    hyper.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("empty CKM dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let (rows, labels) = rows_of(dataset, hyper.layout);

    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(&mut rng);
    let holdout_n = if rows.len() >= 10 {
        (rows.len() as f64 * hyper.holdout_fraction).round() as usize
    } else {
        0
    };
    let (hold_idx, train_idx) = order.split_at(holdout_n);

    let train_rows: Vec<Vec<f64>> = train_idx.iter().map(|&i| rows[i].clone()).collect();
    let train_labels: Vec<f64> = train_idx.iter().map(|&i| labels[i]).collect();
    let norm = NormStats::fit(&train_rows, &train_labels);

    let normalized: Vec<Vec<f64>> = train_rows.iter().map(|r| norm.normalize(r)).collect();
    let x = to_matrix(&normalized, norm.input_dim());
    let y = Array1::from_iter(train_labels.iter().map(|&v| norm.normalize_label(v)));

    let mut members = Vec::with_capacity(hyper.members);
    let mut seeds = Vec::with_capacity(hyper.members);
    let mut final_loss = 0.0;
    for k in 0..hyper.members {
        let seed = member_seed(hyper.seed, k, 0);
        seeds.push(seed);
        let mut mrng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = ResidualNet::new(norm.input_dim(), hyper.width, hyper.blocks, &mut mrng);
        let n = x.nrows();
        let mut boot: Vec<usize> = (0..n).map(|_| mrng.random_range(0..n)).collect();
        final_loss += fit_member(&mut net, &x, &y, &mut boot, hyper, &mut mrng)?;
        members.push(net);
    }
    final_loss /= hyper.members as f64;

    let replay_all: Vec<ReplayRow> = normalized
        .iter()
        .zip(y.iter())
        .map(|(x, &y)| ReplayRow { x: x.clone(), y })
        .collect();
    let replay = reservoir(replay_all, hyper.replay_capacity, &mut rng);

    let model = CkmModel {
        members,
        norm,
        layout: hyper.layout,
        meta: TrainingMeta {
            seeds,
            epochs: hyper.epochs,
            samples: train_idx.len(),
            updates: 0,
        },
        replay,
    };

    let train_set: Vec<ChannelSample> = train_idx.iter().map(|&i| dataset[i].clone()).collect();
    let hold_set: Vec<ChannelSample> = hold_idx.iter().map(|&i| dataset[i].clone()).collect();
    let report = TrainReport {
        train_rmse_db: model.rmse(&train_set),
        holdout_rmse_db: if hold_set.is_empty() {
            f64::NAN
        } else {
            model.rmse(&hold_set)
        },
        holdout_count: hold_set.len(),
        final_loss,
    };
    Ok((model, report))
}

/// Continues training on new data mixed with replayed rows from the
/// original fit. Normalization statistics stay frozen.
pub fn update_incremental(
    model: &CkmModel,
    new_dataset: &[ChannelSample],
    hyper: &CkmHyper,
) -> Result<CkmModel> {
    hyper.validate()?;
    if new_dataset.is_empty() {
        return Ok(model.clone());
    }
    let round = model.meta.updates + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(member_seed(hyper.seed, usize::MAX >> 1, round));
    let (rows, labels) = rows_of(new_dataset, model.layout);
    let raw_dim = model.norm.raw_dim;
    if let Some(r) = rows.iter().find(|r| r.len() != raw_dim) {
        return Err(Error::Dimension {
            expected: raw_dim,
            got: r.len(),
        });
    }
    let mut fresh: Vec<ReplayRow> = rows
        .iter()
        .zip(&labels)
        .map(|(r, &l)| ReplayRow {
            x: model.norm.normalize(r),
            y: model.norm.normalize_label(l),
        })
        .collect();

    let mut mixture = fresh.clone();
    if !model.replay.is_empty() {
        let rho = hyper.replay_ratio;
        let extra = (rho / (1.0 - rho) * fresh.len() as f64).round() as usize;
        for _ in 0..extra {
            mixture.push(model.replay[rng.random_range(0..model.replay.len())].clone());
        }
    }
    let xs: Vec<Vec<f64>> = mixture.iter().map(|r| r.x.clone()).collect();
    let x = to_matrix(&xs, model.norm.input_dim());
    let y = Array1::from_iter(mixture.iter().map(|r| r.y));

    let mut out = model.clone();
    for (k, net) in out.members.iter_mut().enumerate() {
        let mut mrng = ChaCha8Rng::seed_from_u64(member_seed(hyper.seed, k, round));
        let n = x.nrows();
        let mut boot: Vec<usize> = (0..n).map(|_| mrng.random_range(0..n)).collect();
        fit_member(net, &x, &y, &mut boot, hyper, &mut mrng)?;
    }

    let mut pool = model.replay.clone();
    pool.append(&mut fresh);
    out.replay = reservoir(pool, hyper.replay_capacity, &mut rng);
    out.meta.updates = round;
    out.meta.samples += new_dataset.len();
    Ok(out)
}

impl CkmModel {
    pub fn ensemble_size(&self) -> usize {
        self.members.len()
    }

    fn design_matrix(&self, queries: &[CkmQuery<'_>]) -> Result<Array2<f64>> {
        let mut x = Array2::zeros((queries.len(), self.norm.input_dim()));
        for (i, q) in queries.iter().enumerate() {
            let raw = self.layout.raw_input(q.uav, q.gu, q.flag, q.env);
            if raw.len() != self.norm.raw_dim {
                return Err(Error::Dimension {
                    expected: self.norm.raw_dim,
                    got: raw.len(),
                });
            }
            for (j, v) in self.norm.normalize(&raw).into_iter().enumerate() {
                x[(i, j)] = v;
            }
        }
        Ok(x)
    }

    /// Member predictions in dB, shaped `(members, queries)`.
    pub fn predict_members(&self, queries: &[CkmQuery<'_>]) -> Result<Array2<f64>> {
        let x = self.design_matrix(queries)?;
        let mut out = Array2::zeros((self.members.len(), queries.len()));
        for (k, net) in self.members.iter().enumerate() {
            let y = net.infer(&x);
            for (i, v) in y.column(0).iter().enumerate() {
                out[(k, i)] = self.norm.denormalize_label(*v);
            }
        }
        Ok(out)
    }

    /// Ensemble-mean gains for a batch of queries.
    pub fn predict_batch(&self, queries: &[CkmQuery<'_>]) -> Result<Vec<ChannelGain>> {
        let m = self.predict_members(queries)?;
        Ok(m.mean_axis(Axis(0))
            .expect("at least one member")
            .iter()
            .map(|&v| ChannelGain(v))
            .collect())
    }

    pub fn predict(&self, uav: Vec3, gu_reported: Vec3, flag: bool, env: &[f64]) -> Result<ChannelGain> {
        let q = CkmQuery {
            uav,
            gu: gu_reported,
            flag,
            env,
        };
        Ok(self.predict_batch(&[q])?[0])
    }

    /// Ensemble 5/50/95 percentile interval for each query. Needs >= 3 members.
    pub fn predict_intervals(&self, queries: &[CkmQuery<'_>]) -> Result<Vec<PredictionInterval>> {
        if self.members.len() < 3 {
            return Err(Error::InvalidConfig(format!(
                "prediction intervals need at least 3 members, model has {}",
                self.members.len()
            )));
        }
        let m = self.predict_members(queries)?;
        Ok(m.columns()
            .into_iter()
            .map(|c| PredictionInterval::from_members(&c.to_vec()))
            .collect())
    }

    pub fn predict_interval(
        &self,
        uav: Vec3,
        gu_reported: Vec3,
        flag: bool,
        env: &[f64],
    ) -> Result<PredictionInterval> {
        let q = CkmQuery {
            uav,
            gu: gu_reported,
            flag,
            env,
        };
        Ok(self.predict_intervals(&[q])?[0])
    }

    /// RMSE (dB) of predictions on the samples' own inputs against their labels.
    pub fn rmse(&self, samples: &[ChannelSample]) -> f64 {
        if samples.is_empty() {
            return f64::NAN;
        }
        let mut sq = 0.0;
        for chunk in samples.chunks(1024) {
            let qs: Vec<CkmQuery<'_>> = chunk
                .iter()
                .map(|s| CkmQuery {
                    uav: s.uav_pos,
                    gu: s.gu_pos_reported,
                    flag: s.noise_flag,
                    env: &s.env,
                })
                .collect();
            let preds = self.predict_batch(&qs).expect("samples match model layout");
            sq += preds
                .iter()
                .zip(chunk)
                .map(|(p, s)| (p.db() - s.label_gain_db).powi(2))
                .sum::<f64>();
        }
        (sq / samples.len() as f64).sqrt()
    }

    pub fn to_json(&self) -> Result<String> {
        persist::to_string(MODEL_FORMAT, MODEL_VERSION, self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        persist::save(path, MODEL_FORMAT, MODEL_VERSION, self)
    }

    pub fn load(path: &Path) -> Result<CkmModel> {
        let model: CkmModel = persist::load(path, MODEL_FORMAT, MODEL_VERSION, "CKM model")?;
        if model.members.is_empty()
            || model
                .members
                .iter()
                .any(|m| m.input_dim() != model.norm.input_dim())
        {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                reason: "member shapes disagree with normalization".into(),
            });
        }
        Ok(model)
    }
}

/// On-disk CSV row for a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub uav_x: f64,
    pub uav_y: f64,
    pub uav_z: f64,
    pub gu_x: f64,
    pub gu_y: f64,
    pub gu_z: f64,
    pub flag: u8,
    pub env_hash: String,
    pub gain_db: f64,
    pub gu_true_x: f64,
    pub gu_true_y: f64,
    pub gu_true_z: f64,
}

pub fn write_dataset_csv(path: &Path, samples: &[ChannelSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in samples {
        w.serialize(DatasetRow {
            uav_x: s.uav_pos.x,
            uav_y: s.uav_pos.y,
            uav_z: s.uav_pos.z,
            gu_x: s.gu_pos_reported.x,
            gu_y: s.gu_pos_reported.y,
            gu_z: s.gu_pos_reported.z,
            flag: s.noise_flag as u8,
            env_hash: env_hash(&s.env),
            gain_db: s.label_gain_db,
            gu_true_x: s.gu_pos_true.x,
            gu_true_y: s.gu_pos_true.y,
            gu_true_z: s.gu_pos_true.z,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a dataset; `env` must hash to the value recorded on every row.
pub fn read_dataset_csv(path: &Path, env: &EnvFeatures) -> Result<Vec<ChannelSample>> {
    let expected = env_hash(env);
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize::<DatasetRow>() {
        let row = row?;
        if row.env_hash != expected {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!(
                    "environment hash {} does not match world ({expected})",
                    row.env_hash
                ),
            });
        }
        out.push(ChannelSample {
            uav_pos: Vec3::new(row.uav_x, row.uav_y, row.uav_z),
            gu_pos_reported: Vec3::new(row.gu_x, row.gu_y, row.gu_z),
            gu_pos_true: Vec3::new(row.gu_true_x, row.gu_true_y, row.gu_true_z),
            noise_flag: row.flag != 0,
            env: env.clone(),
            label_gain_db: row.gain_db,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_world, WorldConfig};
    use crate::nn::gradcheck::{max_fd_error, sample_indices};

    fn desk_world() -> World {
        generate_world(3, &WorldConfig::desk()).unwrap()
    }

    fn collect(w: &World, n: usize, cep: f64, source: GuSource, seed: u64) -> Vec<ChannelSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = CollectConfig {
            samples: n,
            cep,
            source,
            user_max_height: 20.0,
            env_buildings: 12,
        };
        collect_dataset(w, &LinkBudgetParams::desk(), &c, &mut rng).unwrap()
    }

    fn small_hyper() -> CkmHyper {
        CkmHyper {
            epochs: 5,
            batch: 32,
            width: 16,
            blocks: 2,
            members: 3,
            ..CkmHyper::desk()
        }
    }

    #[test]
    fn half_the_samples_are_flagged() {
        let w = desk_world();
        for n in [1, 7, 1000] {
            let d = collect(&w, n, 5.0, GuSource::WorldUsers, 1);
            assert_eq!(d.len(), n);
            let flagged: Vec<_> = d.iter().filter(|s| s.noise_flag).collect();
            assert_eq!(flagged.len(), n.div_ceil(2));
            if n == 1000 {
                assert!(flagged.iter().all(|s| s.gu_pos_reported != s.gu_pos_true));
            }
            assert!(d
                .iter()
                .filter(|s| !s.noise_flag)
                .all(|s| s.gu_pos_reported == s.gu_pos_true));
        }
    }

    #[test]
    fn labels_use_true_positions() {
        let w = desk_world();
        let params = LinkBudgetParams::desk();
        let d = collect(&w, 100, 10.0, GuSource::Uniform, 2);
        for s in &d {
            assert!(s.gu_pos_reported.z <= 20.0 && s.gu_pos_reported.z >= 0.0);
            let g = true_gain(s.uav_pos, s.gu_pos_true, &w, &params).unwrap();
            assert_eq!(g.db(), s.label_gain_db);
        }
    }

    #[test]
    fn zero_cep_flagged_rows_equal_clean_rows() {
        let w = desk_world();
        let d = collect(&w, 50, 0.0, GuSource::WorldUsers, 3);
        assert!(d.iter().all(|s| s.gu_pos_reported == s.gu_pos_true));
    }

    #[test]
    fn env_features_layout() {
        let w = desk_world();
        let f = env_features(&w, 16);
        assert_eq!(f.len(), 16 * 24);
        assert!(f[12 * 24..].iter().all(|&v| v == 0.0));
        assert!(f.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(env_hash(&f), env_hash(&env_features(&w, 16)));
    }

    #[test]
    fn norm_round_trip_and_constant_drop() {
        let rows = vec![vec![1.0, 5.0, -2.0], vec![3.0, 5.0, 4.0], vec![2.0, 5.0, 1.0]];
        let labels = vec![-80.0, -90.0, -70.0];
        let s = NormStats::fit(&rows, &labels);
        assert_eq!(s.kept, vec![0, 2]);
        for y in [-123.456, 0.0, 7.5] {
            assert!((s.denormalize_label(s.normalize_label(y)) - y).abs() < 1e-9);
        }
        let z = s.normalize(&rows[0]);
        let back: Vec<f64> = z.iter().enumerate().map(|(k, v)| v * s.std[k] + s.mean[k]).collect();
        assert!((back[0] - 1.0).abs() < 1e-12 && (back[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn residual_net_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = ResidualNet::new(5, 8, 2, &mut rng);
        let x = Array2::from_shape_fn((9, 5), |_| rng.random_range(-1.0..1.0));
        let t = Array1::from_shape_fn(9, |_| rng.random_range(-1.0..1.0));
        let loss = |m: &mut ResidualNet| {
            let y = m.forward(&x).column(0).to_owned();
            (&y - &t).mapv(|d| d * d).sum() / 9.0
        };
        net.zero_grad();
        let y = net.forward(&x).column(0).to_owned();
        net.backward(&((&y - &t) * (2.0 / 9.0)).insert_axis(Axis(1)));
        let g = net.flat_grads();
        let idx = sample_indices(g.len(), 100, 12);
        let err = max_fd_error(&mut net, &idx, 1e-6, loss, &g);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn constant_dataset_fits_constant() {
        let w = desk_world();
        let env = env_features(&w, 12);
        let s = ChannelSample {
            uav_pos: Vec3::new(10.0, 20.0, 100.0),
            gu_pos_reported: Vec3::new(50.0, 60.0, 5.0),
            gu_pos_true: Vec3::new(50.0, 60.0, 5.0),
            noise_flag: false,
            env,
            label_gain_db: -87.25,
        };
        let data = vec![s.clone(); 64];
        let hyper = CkmHyper {
            epochs: 40,
            ..small_hyper()
        };
        let (m, _) = train(&data, &hyper).unwrap();
        let p = m.predict(s.uav_pos, s.gu_pos_reported, false, &s.env).unwrap();
        assert!((p.db() + 87.25).abs() < 0.1, "{}", p.db());
    }

    #[test]
    fn interval_percentiles() {
        let iv = PredictionInterval::from_members(&[-84.0, -80.0, -82.0, -81.0, -83.0]);
        assert_eq!(iv.median, -82.0);
        assert!((iv.lo - (-84.0 + 0.2)).abs() < 1e-12);
        assert!((iv.hi - (-80.0 - 0.2)).abs() < 1e-12);
        let same = PredictionInterval::from_members(&[-70.0; 5]);
        assert_eq!((same.lo, same.median, same.hi), (-70.0, -70.0, -70.0));
    }

    #[test]
    fn interval_needs_three_members() {
        let w = desk_world();
        let d = collect(&w, 64, 0.0, GuSource::WorldUsers, 4);
        let (m, _) = train(&d, &CkmHyper { members: 2, ..small_hyper() }).unwrap();
        assert!(m
            .predict_interval(d[0].uav_pos, d[0].gu_pos_reported, false, &d[0].env)
            .is_err());
    }

    #[test]
    fn empty_update_is_identity_and_save_load_round_trips() {
        let w = desk_world();
        let d = collect(&w, 300, 5.0, GuSource::WorldUsers, 5);
        let (m, rep) = train(&d, &small_hyper()).unwrap();
        assert_eq!(rep.holdout_count, 30);
        assert!(rep.holdout_rmse_db.is_finite());

        let same = update_incremental(&m, &[], &small_hyper()).unwrap();
        assert_eq!(same.to_json().unwrap(), m.to_json().unwrap());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let back = CkmModel::load(&path).unwrap();
        for s in d.iter().take(50) {
            let a = m.predict(s.uav_pos, s.gu_pos_reported, s.noise_flag, &s.env).unwrap();
            let b = back.predict(s.uav_pos, s.gu_pos_reported, s.noise_flag, &s.env).unwrap();
            assert!((a.db() - b.db()).abs() < 1e-6);
        }

        assert!(matches!(
            CkmModel::load(&dir.path().join("missing.json")),
            Err(Error::Io { .. })
        ));
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(CkmModel::load(&path), Err(Error::Corrupt { .. })));
        std::fs::write(&path, text.replacen("\"version\":1", "\"version\":99", 1)).unwrap();
        assert!(matches!(CkmModel::load(&path), Err(Error::Version { found: 99, .. })));
    }

    #[test]
    fn dataset_csv_round_trip() {
        let w = desk_world();
        let d = collect(&w, 40, 5.0, GuSource::WorldUsers, 6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_dataset_csv(&path, &d).unwrap();
        let back = read_dataset_csv(&path, &d[0].env).unwrap();
        assert_eq!(back, d);
        let other = env_features(&World::empty(w.bounds, 70.0), 12);
        assert!(read_dataset_csv(&path, &other).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let w = desk_world();
        let d = collect(&w, 200, 5.0, GuSource::WorldUsers, 7);
        let (a, _) = train(&d, &small_hyper()).unwrap();
        let (b, _) = train(&d, &small_hyper()).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }
}
