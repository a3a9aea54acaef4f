//! Discrete-time household environment with one bidirectional EV charger.
//!
//! Each step the policy returns a signed setpoint (positive charges the EV,
//! negative discharges it). The environment clamps it to the charger limits
//! and to the SoC window, integrates SoC linearly with separate charge and
//! discharge efficiencies, and settles the household meter:
//!
//! ```text
//! meter_kwh = (load - pv) * dt + applied * dt
//! import    = max(0, meter_kwh),  export = max(0, -meter_kwh)
//! ```
//!
//! so discharge first offsets household load and only the surplus exports.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{NaiveDateTime, NaiveTime, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_data::{EnvTrace, Forecaster, MarketDataError, PriceForecast};
use crate::policy::{FaultRecord, PolicyHandle};
use crate::rewards::{self, BehaviorMetrics, RewardConfig, RewardMode};

/// Numerical slack on SoC bounds and clamp detection.
pub const SOC_EPS: f64 = 1e-9;
const CLAMP_EPS_KW: f64 = 1e-9;
pub const DEFAULT_EPISODE_STEPS: usize = 1500;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid battery config: {0}")]
    Battery(String),
    #[error("invalid session {index}: {reason}")]
    Session { index: usize, reason: String },
    #[error("invalid reward config: {0}")]
    Reward(String),
    #[error("episode window {start}..{end} exceeds trace length {len}")]
    Window { start: usize, end: usize, len: usize },
    #[error("initial soc {0} outside the battery window")]
    InitialSoc(f64),
    #[error(transparent)]
    Market(#[from] MarketDataError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed report file {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatteryConfig {
    pub capacity_kwh: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub charge_eff: f64,
    pub discharge_eff: f64,
    pub max_charge_kw: f64,
    pub max_discharge_kw: f64,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        Self {
            capacity_kwh: 40.0,
            soc_min: 0.20,
            soc_max: 1.0,
            charge_eff: 0.95,
            discharge_eff: 0.95,
            max_charge_kw: 7.0,
            max_discharge_kw: 7.0,
        }
    }
}

impl BatteryConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let err = |m: String| Err(SimError::Battery(m));
        let all_finite = [
            self.capacity_kwh,
            self.soc_min,
            self.soc_max,
            self.charge_eff,
            self.discharge_eff,
            self.max_charge_kw,
            self.max_discharge_kw,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !all_finite {
            return err("all fields must be finite".into());
        }
        if self.capacity_kwh <= 0.0 {
            return err(format!("capacity_kwh must be > 0, got {}", self.capacity_kwh));
        }
        if !(0.0..1.0).contains(&self.soc_min) || self.soc_max > 1.0 || self.soc_min >= self.soc_max {
            return err(format!("need 0 <= soc_min < soc_max <= 1, got {} and {}", self.soc_min, self.soc_max));
        }
        for (name, eff) in [("charge_eff", self.charge_eff), ("discharge_eff", self.discharge_eff)] {
            if !(eff > 0.0 && eff <= 1.0) {
                return err(format!("{name} must be in (0, 1], got {eff}"));
            }
        }
        if self.max_charge_kw <= 0.0 || self.max_discharge_kw <= 0.0 {
            return err("power limits must be > 0".into());
        }
        Ok(())
    }

    pub fn contains_soc(&self, soc: f64) -> bool {
        soc >= self.soc_min - SOC_EPS && soc <= self.soc_max + SOC_EPS
    }
}

/// One stay at home: plugged in during `[arrival_step, departure_step)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConnectionSession {
    pub arrival_step: usize,
    pub departure_step: usize,
    pub arrival_soc: f64,
    pub target_soc: f64,
}

impl ConnectionSession {
    pub fn contains(&self, step: usize) -> bool {
        (self.arrival_step..self.departure_step).contains(&step)
    }
}

pub fn validate_sessions(sessions: &[ConnectionSession], battery: &BatteryConfig) -> Result<(), SimError> {
    for (index, s) in sessions.iter().enumerate() {
        let fail = |reason: String| Err(SimError::Session { index, reason });
        if s.departure_step <= s.arrival_step {
            return fail(format!("departure {} not after arrival {}", s.departure_step, s.arrival_step));
        }
        if !(s.arrival_soc >= battery.soc_min && s.arrival_soc <= battery.soc_max) {
            return fail(format!("arrival_soc {} outside [{}, {}]", s.arrival_soc, battery.soc_min, battery.soc_max));
        }
        if !(s.target_soc > battery.soc_min && s.target_soc <= battery.soc_max) {
            return fail(format!("target_soc {} outside ({}, {}]", s.target_soc, battery.soc_min, battery.soc_max));
        }
        if index > 0 && s.arrival_step < sessions[index - 1].departure_step {
            return fail("sessions must be ordered and non-overlapping".into());
        }
    }
    Ok(())
}

/// A single session covering the whole trace. Departure sits one step past
/// the end, so no departure penalty ever applies.
pub fn always_plugged(trace_len: usize, arrival_soc: f64, target_soc: f64) -> Vec<ConnectionSession> {
    vec![ConnectionSession { arrival_step: 0, departure_step: trace_len + 1, arrival_soc, target_soc }]
}

/// Daily "home from `arrive` until `depart` the next morning" sessions.
///
/// A trace that starts inside the home window opens with a session arriving
/// at step 0; the last session may depart beyond the end of the trace.
pub fn daily_sessions(
    trace: &EnvTrace,
    arrive: NaiveTime,
    depart: NaiveTime,
    arrival_soc: f64,
    target_soc: f64,
) -> Vec<ConnectionSession> {
    let points = trace.points();
    let step = i64::from(trace.step_minutes());
    let t0 = points[0].timestamp;
    let first_day = t0.date().pred_opt().unwrap_or(t0.date());
    let last_day = points[points.len() - 1].timestamp.date();
    let overnight = depart <= arrive;
    // Steps from t0, rounded up so the vehicle is never assumed present early.
    let index_of = |t: NaiveDateTime| -> i64 {
        let minutes = (t - t0).num_minutes();
        minutes.div_euclid(step) + i64::from(minutes.rem_euclid(step) != 0)
    };

    let mut sessions = Vec::new();
    let mut day = first_day;
    while day <= last_day {
        let arrival_t = day.and_time(arrive);
        let departure_t = if overnight { day.succ_opt().expect("date in range").and_time(depart) } else { day.and_time(depart) };
        let arrival = index_of(arrival_t).max(0);
        let departure = index_of(departure_t);
        if departure > arrival && departure > 0 && (arrival as usize) < points.len() {
            sessions.push(ConnectionSession {
                arrival_step: arrival as usize,
                departure_step: departure as usize,
                arrival_soc,
                target_soc,
            });
        }
        day = day.succ_opt().expect("date in range");
    }
    sessions
}

pub fn default_home_sessions(trace: &EnvTrace) -> Vec<ConnectionSession> {
    daily_sessions(
        trace,
        NaiveTime::from_hms_opt(18, 0, 0).expect("valid time"),
        NaiveTime::from_hms_opt(7, 30, 0).expect("valid time"),
        0.5,
        0.8,
    )
}

fn active_session(sessions: &[ConnectionSession], step: usize) -> Option<(usize, &ConnectionSession)> {
    let idx = sessions.partition_point(|s| s.departure_step <= step);
    sessions.get(idx).filter(|s| s.contains(step)).map(|s| (idx, s))
}

/// Everything a policy sees at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub step_index: usize,
    pub timestamp: NaiveDateTime,
    pub step_minutes: u32,
    pub charge_price: f64,
    pub discharge_price: f64,
    pub soc: f64,
    pub ttd_minutes: f64,
    pub load_kw: f64,
    pub pv_kw: f64,
    pub max_charge_kw: f64,
    pub max_discharge_kw: f64,
    /// Not written to step logs; reloaded observations carry an empty forecast.
    #[serde(skip)]
    pub forecast: PriceForecast,
    pub plugged_in: bool,
}

impl Observation {
    pub fn hour_minute(&self) -> String {
        format!("{:02}:{:02}", self.timestamp.hour(), self.timestamp.minute())
    }
}

pub fn observation_at(
    trace: &EnvTrace,
    sessions: &[ConnectionSession],
    soc: f64,
    step_index: usize,
    battery: &BatteryConfig,
    forecaster: &Forecaster,
) -> Result<Observation, SimError> {
    let point = trace.get(step_index)?;
    let session = active_session(sessions, step_index).map(|(_, s)| s);
    let ttd_minutes = session.map_or(0.0, |s| ((s.departure_step - step_index) as u64 * u64::from(trace.step_minutes())) as f64);
    Ok(Observation {
        step_index,
        timestamp: point.timestamp,
        step_minutes: trace.step_minutes(),
        charge_price: point.buy_price,
        discharge_price: point.sell_price,
        soc,
        ttd_minutes,
        load_kw: point.load_kw,
        pv_kw: point.pv_kw,
        max_charge_kw: battery.max_charge_kw,
        max_discharge_kw: battery.max_discharge_kw,
        forecast: forecaster.at(trace, step_index)?,
        plugged_in: session.is_some(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClampReason {
    NonFinite,
    Unplugged,
    PowerLimit,
    SocFloor,
    SocCeiling,
}

impl ClampReason {
    pub fn is_soc_bound(self) -> bool {
        matches!(self, ClampReason::SocFloor | ClampReason::SocCeiling)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApplyOutcome {
    pub applied_kw: f64,
    pub soc_after: f64,
    pub household_kwh: f64,
    pub charger_kwh: f64,
    pub grid_import_kwh: f64,
    pub grid_export_kwh: f64,
    pub clamp: Option<ClampReason>,
}

/// Largest power (kW, non-negative) that keeps one step's SoC change inside
/// `bound`: above it when discharging, below it when charging.
pub fn soc_power_cap(soc: f64, bound: f64, battery: &BatteryConfig, step_hours: f64, charging: bool) -> f64 {
    let cap = if charging {
        (bound - soc) * battery.capacity_kwh / (battery.charge_eff * step_hours)
    } else {
        (soc - bound) * battery.capacity_kwh * battery.discharge_eff / step_hours
    };
    cap.max(0.0)
}

/// Coerces a requested setpoint into a feasible one and advances the battery.
pub fn apply_action(obs: &Observation, requested_kw: f64, battery: &BatteryConfig, step_minutes: u32) -> ApplyOutcome {
    let dt = f64::from(step_minutes) / 60.0;
    let mut clamp = None;

    let applied_kw = if !requested_kw.is_finite() {
        clamp = Some(ClampReason::NonFinite);
        0.0
    } else if !obs.plugged_in {
        if requested_kw.abs() > CLAMP_EPS_KW {
            clamp = Some(ClampReason::Unplugged);
        }
        0.0
    } else {
        let limited = requested_kw.clamp(-battery.max_discharge_kw, battery.max_charge_kw);
        if (limited - requested_kw).abs() > CLAMP_EPS_KW {
            clamp = Some(ClampReason::PowerLimit);
        }
        let feasible = if limited > 0.0 {
            limited.min(soc_power_cap(obs.soc, battery.soc_max, battery, dt, true))
        } else if limited < 0.0 {
            limited.max(-soc_power_cap(obs.soc, battery.soc_min, battery, dt, false))
        } else {
            0.0
        };
        if (feasible - limited).abs() > CLAMP_EPS_KW {
            clamp = Some(if limited > 0.0 { ClampReason::SocCeiling } else { ClampReason::SocFloor });
        }
        feasible
    };

    let soc_delta = if applied_kw > 0.0 {
        applied_kw * dt * battery.charge_eff / battery.capacity_kwh
    } else {
        applied_kw * dt / (battery.discharge_eff * battery.capacity_kwh)
    };
    let soc_after = if applied_kw == 0.0 { obs.soc } else { (obs.soc + soc_delta).clamp(battery.soc_min, battery.soc_max) };

    let household_kwh = (obs.load_kw - obs.pv_kw) * dt;
    let charger_kwh = applied_kw * dt;
    let meter_kwh = household_kwh + charger_kwh;
    ApplyOutcome {
        applied_kw,
        soc_after,
        household_kwh,
        charger_kwh,
        grid_import_kwh: meter_kwh.max(0.0),
        grid_export_kwh: (-meter_kwh).max(0.0),
        clamp,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub observation: Observation,
    pub requested_kw: f64,
    pub applied_kw: f64,
    pub soc_after: f64,
    pub grid_import_kwh: f64,
    pub grid_export_kwh: f64,
    /// Raw currency: `buy * import - sell * export`.
    pub step_cost: f64,
    /// Profit term of the reward (normalised in `Normalized` mode).
    pub step_reward: f64,
    pub clamp: Option<ClampReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepartureDeficit {
    pub session_index: usize,
    pub departure_step: usize,
    pub soc_at_departure: f64,
    pub target_soc: f64,
    pub deficit: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyAbort {
    pub step_index: usize,
    pub diagnostic: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeWindow {
    pub start_step: usize,
    pub n_steps: usize,
    pub step_minutes: u32,
    pub start_timestamp: Option<NaiveDateTime>,
    pub trace_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub policy: String,
    pub window: EpisodeWindow,
    pub reward_mode: RewardMode,
    pub normalizer: f64,
    /// `total_profit + total_penalty`.
    pub total_reward: f64,
    pub total_profit: f64,
    pub total_penalty: f64,
    /// Raw currency paid at the meter (negative when the household earned).
    pub total_cost: f64,
    pub total_import_kwh: f64,
    pub total_export_kwh: f64,
    /// Requests that would have pushed SoC past a bound.
    pub soc_violations: usize,
    /// Every request the environment had to alter.
    pub clamp_events: usize,
    /// Clamps applied by the policy-side guardrail wrapper.
    pub policy_violations: u64,
    pub faults: Vec<FaultRecord>,
    pub departure_deficits: Vec<DepartureDeficit>,
    pub metrics: BehaviorMetrics,
    pub aborted: Option<PolicyAbort>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub summary: EpisodeSummary,
    pub records: Vec<StepRecord>,
}

impl EpisodeReport {
    pub fn total_reward(&self) -> f64 {
        self.summary.total_reward
    }

    /// Writes `report.json` (summary) and `steps.jsonl` (one record per line).
    pub fn write_to_dir(&self, dir: &Path) -> Result<(), SimError> {
        std::fs::create_dir_all(dir).map_err(|source| SimError::Io { path: dir.to_path_buf(), source })?;
        write_json(&dir.join("report.json"), &self.summary)?;
        write_step_log(&dir.join("steps.jsonl"), &self.records)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SimError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| SimError::Json { path: path.to_path_buf(), source })?;
    std::fs::write(path, text + "\n").map_err(|source| SimError::Io { path: path.to_path_buf(), source })
}

pub fn write_step_log(path: &Path, records: &[StepRecord]) -> Result<(), SimError> {
    let io_err = |source| SimError::Io { path: path.to_path_buf(), source };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|source| SimError::Json { path: path.to_path_buf(), source })?;
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn read_step_log(path: &Path) -> Result<Vec<StepRecord>, SimError> {
    let file = File::open(path).map_err(|source| SimError::Io { path: path.to_path_buf(), source })?;
    BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|line| {
            let line = line.map_err(|source| SimError::Io { path: path.to_path_buf(), source })?;
            serde_json::from_str(&line).map_err(|source| SimError::Json { path: path.to_path_buf(), source })
        })
        .collect()
}

pub fn read_summary(path: &Path) -> Result<EpisodeSummary, SimError> {
    let text = std::fs::read_to_string(path).map_err(|source| SimError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|source| SimError::Json { path: path.to_path_buf(), source })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub start_step: usize,
    pub n_steps: usize,
    pub forecaster: Forecaster,
    pub reward: RewardConfig,
    /// SoC when the window opens outside any session.
    pub initial_soc: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            start_step: 0,
            n_steps: DEFAULT_EPISODE_STEPS,
            forecaster: Forecaster::default(),
            reward: RewardConfig::default(),
            initial_soc: 0.5,
        }
    }
}

impl EpisodeConfig {
    pub fn window(start_step: usize, n_steps: usize) -> Self {
        Self { start_step, n_steps, ..Default::default() }
    }
}

/// Rolls a policy through `[start_step, start_step + n_steps)`.
///
/// The policy is only consulted while the vehicle is plugged in. Three
/// consecutive policy faults end the episode early with `summary.aborted`
/// set; everything recorded up to that step is kept.
pub fn run_episode(
    trace: &EnvTrace,
    sessions: &[ConnectionSession],
    battery: &BatteryConfig,
    policy: &mut PolicyHandle,
    cfg: &EpisodeConfig,
) -> Result<EpisodeReport, SimError> {
    battery.validate()?;
    validate_sessions(sessions, battery)?;
    cfg.reward.validate().map_err(SimError::Reward)?;
    let start = cfg.start_step;
    let end = start + cfg.n_steps;
    if end > trace.len() {
        return Err(SimError::Window { start, end, len: trace.len() });
    }
    if !(cfg.initial_soc >= battery.soc_min && cfg.initial_soc <= battery.soc_max) {
        return Err(SimError::InitialSoc(cfg.initial_soc));
    }

    let dt = trace.step_hours();
    let window = &trace.points()[start..end];
    let peak_price = window.iter().map(|p| p.buy_price).fold(0.0, f64::max);
    let household_kwh: f64 = window.iter().map(|p| p.load_kw * dt).sum();
    let normalizer = cfg.reward.normalizer_for(peak_price, household_kwh);

    let mut soc = active_session(sessions, start).map_or(cfg.initial_soc, |(_, s)| s.arrival_soc);
    let faults_before = policy.fault_log().len();
    let violations_before = policy.violations();
    let mut records = Vec::with_capacity(cfg.n_steps);
    let mut departure_deficits = Vec::new();
    let mut aborted = None;

    for step in start..end {
        if let Some((_, s)) = active_session(sessions, step).filter(|(_, s)| s.arrival_step == step) {
            soc = s.arrival_soc;
        }
        let observation = observation_at(trace, sessions, soc, step, battery, &cfg.forecaster)?;
        let requested_kw = if observation.plugged_in { policy.decide(&observation) } else { 0.0 };
        let out = apply_action(&observation, requested_kw, battery, trace.step_minutes());
        let step_profit = rewards::step_profit(
            out.grid_import_kwh,
            out.grid_export_kwh,
            observation.charge_price,
            observation.discharge_price,
        );
        soc = out.soc_after;
        records.push(StepRecord {
            observation,
            requested_kw,
            applied_kw: out.applied_kw,
            soc_after: out.soc_after,
            grid_import_kwh: out.grid_import_kwh,
            grid_export_kwh: out.grid_export_kwh,
            step_cost: -step_profit,
            step_reward: step_profit / normalizer,
            clamp: out.clamp,
        });

        if let Some((session_index, s)) = active_session(sessions, step) {
            if s.departure_step == step + 1 && s.arrival_step >= start && s.departure_step <= end {
                let penalty = rewards::departure_penalty(s, soc, &cfg.reward) / normalizer;
                departure_deficits.push(DepartureDeficit {
                    session_index,
                    departure_step: s.departure_step,
                    soc_at_departure: soc,
                    target_soc: s.target_soc,
                    deficit: (s.target_soc - soc).max(0.0),
                    penalty,
                });
            }
        }

        if policy.is_exhausted() {
            let diagnostic = policy
                .fault_log()
                .iter()
                .rev()
                .take(policy.abort_after() as usize)
                .map(|f| format!("step {}: {}", f.step_index, f.fault))
                .collect::<Vec<_>>()
                .join("; ");
            aborted = Some(PolicyAbort { step_index: step, diagnostic });
            break;
        }
    }

    let total_profit: f64 = records.iter().map(|r| r.step_reward).sum();
    let total_penalty: f64 = departure_deficits.iter().map(|d| d.penalty).sum();
    let summary = EpisodeSummary {
        policy: policy.name().to_string(),
        window: EpisodeWindow {
            start_step: start,
            n_steps: cfg.n_steps,
            step_minutes: trace.step_minutes(),
            start_timestamp: window.first().map(|p| p.timestamp),
            trace_digest: trace.window_digest(start, cfg.n_steps),
        },
        reward_mode: cfg.reward.mode,
        normalizer,
        total_reward: total_profit + total_penalty,
        total_profit,
        total_penalty,
        total_cost: records.iter().map(|r| r.step_cost).sum(),
        total_import_kwh: records.iter().map(|r| r.grid_import_kwh).sum(),
        total_export_kwh: records.iter().map(|r| r.grid_export_kwh).sum(),
        soc_violations: records.iter().filter(|r| r.clamp.is_some_and(ClampReason::is_soc_bound)).count(),
        clamp_events: records.iter().filter(|r| r.clamp.is_some()).count(),
        policy_violations: policy.violations() - violations_before,
        faults: policy.fault_log()[faults_before..].to_vec(),
        departure_deficits,
        metrics: rewards::behavioral_metrics(&records),
        aborted,
    };
    Ok(EpisodeReport { summary, records })
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use chrono::NaiveDate;

    pub fn observation(soc: f64, price: f64) -> Observation {
        Observation {
            step_index: 0,
            timestamp: NaiveDate::from_ymd_opt(2024, 1, 1).unwrap().and_hms_opt(12, 0, 0).unwrap(),
            step_minutes: 5,
            charge_price: price,
            discharge_price: price,
            soc,
            ttd_minutes: 120.0,
            load_kw: 0.0,
            pv_kw: 0.0,
            max_charge_kw: 7.0,
            max_discharge_kw: 7.0,
            forecast: PriceForecast { horizon_steps: 3, values: vec![price; 3] },
            plugged_in: true,
        }
    }
}
