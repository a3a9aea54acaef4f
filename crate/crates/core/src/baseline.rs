//! Expert rule-based controller used as benchmark and imitation source.
//!
//! Rules, highest priority first:
//!
//! 1. unplugged: idle;
//! 2. SoC below the reserve: charge as fast as headroom allows, whatever the price;
//! 3. sell price at or above the peak threshold and SoC above the reserve:
//!    discharge, capped by the energy available above the reserve;
//! 4. PV surplus and headroom: charge with the surplus;
//! 5. buy price at or below the cheap threshold and SoC under target: charge
//!    towards the target;
//! 6. otherwise idle.
//!
//! There is no time-to-departure urgency rule beyond (5).

use serde::{Deserialize, Serialize};

use crate::policy::{Policy, PolicyFault};
use crate::sim::{soc_power_cap, BatteryConfig, Observation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub peak_price_threshold: f64,
    pub min_soc_reserve: f64,
    pub cheap_price_threshold: f64,
    pub target_soc: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { peak_price_threshold: 0.35, min_soc_reserve: 0.20, cheap_price_threshold: 0.12, target_soc: 0.80 }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.peak_price_threshold > 0.0 && self.cheap_price_threshold > 0.0) {
            return Err("price thresholds must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.min_soc_reserve) {
            return Err(format!("min_soc_reserve must be in [0, 1), got {}", self.min_soc_reserve));
        }
        if !(self.target_soc > 0.0 && self.target_soc <= 1.0) {
            return Err(format!("target_soc must be in (0, 1], got {}", self.target_soc));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Charge,
    Discharge,
}

/// Largest power that keeps one step's transfer from crossing `bound`
/// (the reserve when discharging, the ceiling when charging).
pub fn per_step_energy_cap(soc: f64, bound: f64, battery: &BatteryConfig, step_minutes: u32, direction: Direction) -> f64 {
    soc_power_cap(soc, bound, battery, f64::from(step_minutes) / 60.0, direction == Direction::Charge)
}

pub fn baseline_decide(obs: &Observation, cfg: &BaselineConfig, battery: &BatteryConfig) -> f64 {
    let step_minutes = obs.step_minutes;
    if !obs.plugged_in {
        return 0.0;
    }
    let max_charge = obs.max_charge_kw.min(battery.max_charge_kw);
    let max_discharge = obs.max_discharge_kw.min(battery.max_discharge_kw);
    let reserve = cfg.min_soc_reserve.max(battery.soc_min);
    let charge_cap = |bound: f64| per_step_energy_cap(obs.soc, bound, battery, step_minutes, Direction::Charge);

    if obs.soc < cfg.min_soc_reserve {
        return max_charge.min(charge_cap(battery.soc_max));
    }
    if obs.discharge_price >= cfg.peak_price_threshold && obs.soc > reserve {
        let cap = per_step_energy_cap(obs.soc, reserve, battery, step_minutes, Direction::Discharge);
        return -max_discharge.min(cap);
    }
    if obs.pv_kw > obs.load_kw && obs.soc < battery.soc_max {
        let surplus = obs.pv_kw - obs.load_kw;
        return surplus.min(max_charge).min(charge_cap(battery.soc_max));
    }
    if obs.charge_price <= cfg.cheap_price_threshold && obs.soc < cfg.target_soc {
        return max_charge.min(charge_cap(cfg.target_soc.min(battery.soc_max)));
    }
    0.0
}

pub struct BaselinePolicy {
    cfg: BaselineConfig,
    battery: BatteryConfig,
}

impl BaselinePolicy {
    pub fn new(cfg: BaselineConfig, battery: BatteryConfig) -> Self {
        Self { cfg, battery }
    }
}

impl Policy for BaselinePolicy {
    fn name(&self) -> &str {
        "baseline"
    }

    fn decide(&mut self, obs: &Observation) -> Result<f64, PolicyFault> {
        Ok(baseline_decide(obs, &self.cfg, &self.battery))
    }
}
