//! Bang-bang transmit power from CKM prediction intervals.

use serde::{Deserialize, Serialize};

use crate::channel::{LinkBudgetParams, POWER_OFF_DBM};
use crate::ckm::PredictionInterval;
use crate::error::{Error, Result};

/// How the median of the interval is compared against the power limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ThresholdRule {
    /// `p_max + median >= p_min`: the predicted received power clears the
    /// association threshold at full power.
    #[default]
    LinkBudget,
    /// `median >= p_max - p_min`, taken literally. With negative gains this
    /// never fires.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub enabled: bool,
    /// Largest acceptable `hi - lo` interval width in dB.
    pub width_threshold_db: f64,
    pub rule: ThresholdRule,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            enabled: false,
            width_threshold_db: 6.0,
            rule: ThresholdRule::LinkBudget,
        }
    }
}

impl SchedulerConfig {
    pub fn on() -> Self {
        SchedulerConfig {
            enabled: true,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_threshold_db > 0.0) {
            return Err(Error::InvalidConfig(
                "scheduler width threshold must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Returns `p_max_dbm` when the interval is both narrow enough and strong
/// enough, otherwise [`POWER_OFF_DBM`].
pub fn schedule_power(
    interval: &PredictionInterval,
    config: &SchedulerConfig,
    params: &LinkBudgetParams,
) -> f64 {
    let strong = match config.rule {
        ThresholdRule::LinkBudget => params.p_max_dbm + interval.median >= params.p_min_dbm,
        ThresholdRule::Literal => interval.median >= params.p_max_dbm - params.p_min_dbm,
    };
    let credible = interval.width() <= config.width_threshold_db;
    if strong && credible {
        params.p_max_dbm
    } else {
        POWER_OFF_DBM
    }
}

/// Aggregates per-user decisions for one slot: full power if any user's
/// interval passes, silence otherwise.
pub fn schedule_slot<'a>(
    intervals: impl IntoIterator<Item = &'a PredictionInterval>,
    config: &SchedulerConfig,
    params: &LinkBudgetParams,
) -> f64 {
    let fire = intervals
        .into_iter()
        .any(|iv| schedule_power(iv, config, params) == params.p_max_dbm);
    if fire {
        params.p_max_dbm
    } else {
        POWER_OFF_DBM
    }
}
