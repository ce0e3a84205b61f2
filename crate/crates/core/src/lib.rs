//! Channel knowledge maps robust to positioning error, a UAV base-station
//! communication environment, and a PPO trainer that plans over it.

pub mod channel;
pub mod ckm;
pub mod env;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod nn;
pub mod noise;
pub mod persist;
pub mod ppo;
pub mod scheduler;

pub use channel::{ChannelGain, LinkBudgetParams, LosSigmoid, POWER_OFF_DBM};
pub use ckm::{
    ChannelSample, CkmHyper, CkmModel, CollectConfig, EnvFeatures, PredictionInterval,
    TrainReport,
};
pub use env::{CommEnv, EnvAction, EnvConfig, EnvState, Predictor, PredictorMode, TrajectoryRow};
pub use error::{Error, Result};
pub use experiment::{EvalReport, ExperimentConfig, Profile, Scheme};
pub use geometry::{Building, GroundUser, Vec3, World, WorldConfig};
pub use noise::CepModel;
pub use ppo::{Agent, EpisodeRecord, PolicyNet, PpoConfig};
pub use scheduler::{SchedulerConfig, ThresholdRule};
