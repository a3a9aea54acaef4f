//! Run configuration file (TOML) and the environment it describes.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use chrono::NaiveTime;
use serde::{Deserialize, Serialize};
use v2g_core::evolve::{EnvBundle, EvolveConfig, HttpConfig, RuntimeConfig};
use v2g_core::market_data::{load_trace, synthetic_trace, ColumnMapping, EnvTrace, Forecaster, SyntheticSpec};
use v2g_core::sim::{always_plugged, daily_sessions, validate_sessions, ConnectionSession, DEFAULT_EPISODE_STEPS};
use v2g_core::{BaselineConfig, BatteryConfig, EpisodeConfig, RewardConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceConfig {
    pub path: Option<PathBuf>,
    /// `days=N seed=S`; used when no path is given.
    pub synthetic: Option<String>,
    pub columns: ColumnMapping,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionMode {
    /// Home every evening, away during the day.
    #[default]
    Home,
    /// Plugged in for the whole trace; no departures.
    Always,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub mode: SessionMode,
    /// `HH:MM`.
    pub arrive: String,
    pub depart: String,
    pub arrival_soc: f64,
    pub target_soc: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self { mode: SessionMode::Home, arrive: "18:00".into(), depart: "07:30".into(), arrival_soc: 0.5, target_soc: 0.8 }
    }
}

impl SessionConfig {
    pub fn build(&self, trace: &EnvTrace) -> Result<Vec<ConnectionSession>> {
        let time = |s: &str| NaiveTime::parse_from_str(s, "%H:%M").with_context(|| format!("session time `{s}` is not HH:MM"));
        Ok(match self.mode {
            SessionMode::Always => always_plugged(trace.len(), self.arrival_soc, self.target_soc),
            SessionMode::Home => daily_sessions(trace, time(&self.arrive)?, time(&self.depart)?, self.arrival_soc, self.target_soc),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSettings {
    pub start_step: usize,
    /// Defaults to 1500 steps, or the rest of the trace when shorter.
    pub n_steps: Option<usize>,
    pub initial_soc: f64,
}

impl Default for EpisodeSettings {
    fn default() -> Self {
        Self { start_step: 0, n_steps: None, initial_soc: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorConfig {
    pub kind: OperatorKind,
    /// JSONL file of canned replies for the mock operator.
    pub replies: Option<PathBuf>,
    /// Keep replaying the last canned reply.
    pub repeat_last: bool,
    pub http: HttpConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: Option<PathBuf>,
    pub trace: TraceConfig,
    pub sessions: SessionConfig,
    pub battery: BatteryConfig,
    pub reward: RewardConfig,
    pub baseline: BaselineConfig,
    pub episode: EpisodeSettings,
    pub forecast: Forecaster,
    pub evolve: EvolveConfig,
    pub operator: OperatorConfig,
    pub runtime: RuntimeConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing config")
    }

    /// Checks everything that does not need the trace.
    pub fn validate(&self) -> Result<()> {
        self.battery.validate()?;
        self.reward.validate().map_err(|e| anyhow!("invalid reward config: {e}"))?;
        self.baseline.validate().map_err(|e| anyhow!("invalid baseline config: {e}"))?;
        self.evolve.validate()?;
        if self.runtime.cadence_steps == 0 {
            bail!("runtime cadence_steps must be at least 1");
        }
        if self.trace.path.is_none() && self.trace.synthetic.is_none() {
            bail!("no trace given: set trace.path or trace.synthetic (or pass --trace / --synthetic)");
        }
        Ok(())
    }

    pub fn load_trace(&self) -> Result<EnvTrace> {
        match (&self.trace.path, &self.trace.synthetic) {
            (Some(path), _) => load_trace(path, &self.trace.columns).with_context(|| format!("loading trace {}", path.display())),
            (None, Some(spec)) => {
                let spec = SyntheticSpec::parse(spec).map_err(|e| anyhow!("invalid synthetic spec: {e}"))?;
                Ok(synthetic_trace(&spec)?)
            }
            (None, None) => bail!("no trace configured"),
        }
    }

    /// Validates the config and builds the simulation inputs.
    pub fn env(&self) -> Result<EnvBundle> {
        self.validate()?;
        let trace = self.load_trace()?;
        let sessions = self.sessions.build(&trace)?;
        validate_sessions(&sessions, &self.battery)?;
        let start = self.episode.start_step;
        if start >= trace.len() {
            bail!("episode start_step {start} is beyond the trace ({} steps)", trace.len());
        }
        let n_steps = self.episode.n_steps.unwrap_or(DEFAULT_EPISODE_STEPS.min(trace.len() - start));
        let episode = EpisodeConfig {
            start_step: start,
            n_steps,
            forecaster: self.forecast,
            reward: self.reward,
            initial_soc: self.episode.initial_soc,
        };
        Ok(EnvBundle { trace, sessions, battery: self.battery, baseline: self.baseline, episode })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig { trace: TraceConfig { synthetic: Some("days=2 seed=1".into()), ..Default::default() }, ..Default::default() };
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg: RunConfig = toml::from_str(
            "[trace]\nsynthetic = \"days=1 seed=2\"\n[battery]\ncapacity_kwh = 60.0\n[evolve]\nstrategy = \"imitation\"\nn_iterations = 3\nseed = 4\n",
        )
        .unwrap();
        assert_eq!(cfg.evolve.seed, 4);
        assert_eq!(cfg.battery.capacity_kwh, 60.0);
        assert_eq!(cfg.battery.max_charge_kw, 7.0);
        assert_eq!(cfg.evolve.n_iterations, 3);
        let env = cfg.env().unwrap();
        assert_eq!(env.trace.len(), 288);
        assert_eq!(env.episode.n_steps, 288);
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = RunConfig { trace: TraceConfig { synthetic: Some("days=1".into()), ..Default::default() }, ..Default::default() };
        cfg.battery.soc_min = 1.5;
        assert!(cfg.env().is_err());
        assert!(RunConfig::default().validate().is_err(), "no trace");
        assert!(toml::from_str::<RunConfig>("[battery]\ncapacity = 3\n").is_err(), "unknown keys are errors");
    }
}
