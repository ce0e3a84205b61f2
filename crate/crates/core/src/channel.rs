//! Ground-truth link model and the analytic LoS-probability baseline.
//!
//! Gains are in dB and negative: `received_dBm = transmit_dBm + gain`.
//! A transmit power of `f64::NEG_INFINITY` dBm means the radio is off.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{segment_blocked, Vec3, World};

/// Transmit power value meaning "radio off" (0 mW).
pub const POWER_OFF_DBM: f64 = f64::NEG_INFINITY;

/// Links shorter than this are rejected by the oracle.
pub const MIN_LINK_DISTANCE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct ChannelGain(pub f64);

impl ChannelGain {
    pub fn db(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkBudgetParams {
    pub carrier_hz: f64,
    pub light_speed: f64,
    pub eps_los_db: f64,
    pub eps_nlos_db: f64,
    pub noise_dbm: f64,
    pub p_max_dbm: f64,
    pub p_min_dbm: f64,
    pub bandwidth_hz: f64,
}

impl Default for LinkBudgetParams {
    fn default() -> Self {
        LinkBudgetParams {
            carrier_hz: 2e9,
            light_speed: 299_792_458.0,
            eps_los_db: 1.0,
            eps_nlos_db: 20.0,
            noise_dbm: -104.0,
            p_max_dbm: 26.0,
            p_min_dbm: -70.0,
            bandwidth_hz: 1e6,
        }
    }
}

impl LinkBudgetParams {
    /// Reduced-scale variant: the excess losses are raised by 10.5 dB so the
    /// LoS association radius (~200 m) keeps roughly the same proportion of
    /// a 300 m scene as ~670 m does of the 1000 m one.
    pub fn desk() -> Self {
        LinkBudgetParams {
            eps_los_db: 11.5,
            eps_nlos_db: 30.5,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_nlos_db > self.eps_los_db && self.eps_los_db >= 0.0) {
            return Err(Error::InvalidConfig(
                "need eps_nlos > eps_los >= 0".to_string(),
            ));
        }
        if !(self.carrier_hz > 0.0 && self.light_speed > 0.0 && self.bandwidth_hz > 0.0) {
            return Err(Error::InvalidConfig(
                "carrier, light speed and bandwidth must be positive".to_string(),
            ));
        }
        if !(self.p_max_dbm.is_finite() && self.p_min_dbm.is_finite() && self.noise_dbm.is_finite())
        {
            return Err(Error::InvalidConfig("power levels must be finite".into()));
        }
        Ok(())
    }

    pub fn p_max_mw(&self) -> f64 {
        dbm_to_mw(self.p_max_dbm)
    }

    /// `20 log10(4 pi f_c d / c)`.
    pub fn free_space_loss_db(&self, distance: f64) -> f64 {
        20.0 * (4.0 * PI * self.carrier_hz * distance / self.light_speed).log10()
    }

    fn path_loss_db(&self, distance: f64, los: bool) -> f64 {
        self.free_space_loss_db(distance)
            + if los {
                self.eps_los_db
            } else {
                self.eps_nlos_db
            }
    }
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

pub fn mw_to_dbm(mw: f64) -> f64 {
    if mw <= 0.0 {
        POWER_OFF_DBM
    } else {
        10.0 * mw.log10()
    }
}

fn checked_distance(a: Vec3, b: Vec3) -> Result<f64> {
    let d = a.distance(b);
    if d < MIN_LINK_DISTANCE || !d.is_finite() {
        Err(Error::TooClose(d))
    } else {
        Ok(d)
    }
}

/// Deterministic site-specific gain: free-space loss plus an excess loss
/// chosen by the geometric occlusion test.
pub fn true_gain(
    uav: Vec3,
    gu: Vec3,
    world: &World,
    params: &LinkBudgetParams,
) -> Result<ChannelGain> {
    let d = checked_distance(uav, gu)?;
    let los = !segment_blocked(uav, gu, world);
    Ok(ChannelGain(-params.path_loss_db(d, los)))
}

/// [`true_gain`] with the distance floored at the 1 m guard instead of failing.
pub fn true_gain_clamped(
    uav: Vec3,
    gu: Vec3,
    world: &World,
    params: &LinkBudgetParams,
) -> ChannelGain {
    let d = uav.distance(gu).max(MIN_LINK_DISTANCE);
    let los = !segment_blocked(uav, gu, world);
    ChannelGain(-params.path_loss_db(d, los))
}

/// Sigmoid LoS-probability shape constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LosSigmoid {
    pub a: f64,
    pub b: f64,
}

impl Default for LosSigmoid {
    fn default() -> Self {
        LosSigmoid { a: 9.61, b: 0.16 }
    }
}

/// `1 / (1 + a exp(-b (atan(h / r) - a)))` with the elevation angle in
/// radians. `a` appears both as the scale and as the angle offset.
pub fn los_probability(uav: Vec3, gu: Vec3, a: f64, b: f64) -> f64 {
    let h = uav.z - gu.z;
    let r = uav.horizontal_distance(gu);
    let elevation = if r == 0.0 {
        PI / 2.0 * h.signum()
    } else {
        (h / r).atan()
    };
    1.0 / (1.0 + a * (-b * (elevation - a)).exp())
}

/// Expected gain under the LoS-probability model, mixing the two analytic
/// path losses.
pub fn expected_gain_los_model(
    uav: Vec3,
    gu: Vec3,
    params: &LinkBudgetParams,
    a: f64,
    b: f64,
) -> Result<ChannelGain> {
    let d = checked_distance(uav, gu)?;
    let p = los_probability(uav, gu, a, b);
    let loss = p * params.path_loss_db(d, true) + (1.0 - p) * params.path_loss_db(d, false);
    Ok(ChannelGain(-loss))
}

/// Shannon rate in bits/s for a transmit power (dBm) over a gain (dB).
pub fn rate_bps(gain: ChannelGain, p_t_dbm: f64, params: &LinkBudgetParams) -> f64 {
    let received = p_t_dbm + gain.0;
    let snr = 10f64.powf((received - params.noise_dbm) / 10.0);
    params.bandwidth_hz * snr.ln_1p() / std::f64::consts::LN_2
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Building;

    fn p() -> LinkBudgetParams {
        LinkBudgetParams::default()
    }

    #[test]
    fn los_gain_at_100m() {
        // 20 log10(4 pi 2e9 100 / 299792458) + 1 at 30 digits: 79.46838313516299...
        let w = World::empty(Vec3::new(1000.0, 1000.0, 750.0), 250.0);
        let g = true_gain(Vec3::new(0.0, 0.0, 100.0), Vec3::ZERO, &w, &p()).unwrap();
        assert!((g.db() + 79.468_383_135_163).abs() < 1e-9, "{}", g.db());
    }

    #[test]
    fn nlos_is_19db_lower() {
        let mut w = World::empty(Vec3::new(1000.0, 1000.0, 750.0), 250.0);
        let a = Vec3::new(0.0, 0.0, 100.0);
        let los = true_gain(a, Vec3::ZERO, &w, &p()).unwrap();
        w.buildings.push(
            Building::new(Vec3::new(-5.0, -5.0, 40.0), Vec3::new(5.0, 5.0, 60.0)).unwrap(),
        );
        let nlos = true_gain(a, Vec3::ZERO, &w, &p()).unwrap();
        assert!((los.db() - nlos.db() - 19.0).abs() < 1e-12);
    }

    #[test]
    fn doubling_distance_costs_6db() {
        let w = World::empty(Vec3::new(1000.0, 1000.0, 750.0), 250.0);
        let g1 = true_gain(Vec3::new(0.0, 0.0, 100.0), Vec3::ZERO, &w, &p()).unwrap();
        let g2 = true_gain(Vec3::new(0.0, 0.0, 200.0), Vec3::ZERO, &w, &p()).unwrap();
        assert!((g1.db() - g2.db() - 20.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn too_close_rejected() {
        let w = World::empty(Vec3::new(1000.0, 1000.0, 750.0), 250.0);
        assert!(matches!(
            true_gain(Vec3::new(0.0, 0.0, 0.5), Vec3::ZERO, &w, &p()),
            Err(Error::TooClose(_))
        ));
    }

    #[test]
    fn los_probability_limits() {
        let (a, b) = (9.61, 0.16);
        let up = los_probability(Vec3::new(0.0, 0.0, 300.0), Vec3::ZERO, a, b);
        let expect = 1.0 / (1.0 + a * (-b * (PI / 2.0 - a)).exp());
        assert!((up - expect).abs() < 1e-15);
        for x in [1.0, 10.0, 500.0] {
            let pr = los_probability(Vec3::new(x, 0.0, 300.0), Vec3::ZERO, 9.61, 0.0);
            assert!((pr - 1.0 / 10.61).abs() < 1e-15);
        }
    }

    #[test]
    fn los_probability_monotone_in_elevation() {
        let mut last = 0.0;
        for k in 1..200 {
            let h = k as f64 * 5.0;
            let pr = los_probability(Vec3::new(100.0, 0.0, h), Vec3::ZERO, 9.61, 0.16);
            assert!(pr >= last);
            last = pr;
        }
    }

    #[test]
    fn los_model_mixture() {
        let params = p();
        let uav = Vec3::new(300.0, 0.0, 400.0);
        // b = 0, a = 1 gives P_los = 0.5 everywhere.
        let g = expected_gain_los_model(uav, Vec3::ZERO, &params, 1.0, 0.0).unwrap();
        let fs = params.free_space_loss_db(500.0);
        assert!((-g.db() - fs - 10.5).abs() < 1e-9);
    }

    #[test]
    fn rate_examples() {
        let params = p();
        // received -66 dBm => SNR 38 dB
        let r = rate_bps(ChannelGain(-92.0), 26.0, &params);
        let oracle = 1e6 * (1.0 + 10f64.powf(3.8)).log2();
        assert!((r - oracle).abs() < 1e-6);
        // 1e6 log2(1 + 10^3.8) at 30 digits
        assert!((r - 12_623_555.394_209_37).abs() < 1e-6);
        assert_eq!(rate_bps(ChannelGain(-80.0), POWER_OFF_DBM, &params), 0.0);
        let at_noise = rate_bps(ChannelGain(-130.0), 26.0, &params);
        assert!((at_noise - 1e6).abs() < 1e-6);
    }

    #[test]
    fn db_round_trip() {
        for k in 0..=180 {
            let mw = 10f64.powf(-12.0 + k as f64 / 10.0);
            let back = dbm_to_mw(mw_to_dbm(mw));
            assert!(((back - mw) / mw).abs() <= 1e-9);
        }
        assert_eq!(mw_to_dbm(0.0), POWER_OFF_DBM);
    }
}
