//! Policy execution: the [`Policy`] trait, the fault-absorbing
//! [`PolicyHandle`], the semantic guardrail and the program registry.

pub mod external;
pub mod rules;

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::{BaselineConfig, BaselinePolicy};
use crate::sim::{BatteryConfig, Observation};

pub use external::{spawn_external_policy, ExternalCommand, ExternalPolicy, SpawnError};
pub use rules::{parse_rule_script, ParseError, RulePolicy, RuleScript};

/// Consecutive faults after which an episode is abandoned.
pub const DEFAULT_ABORT_AFTER: u32 = 3;
const GUARD_EPS_KW: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    Runtime,
    Timeout,
    Malformed,
    ChildExited,
    Io,
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FaultKind::Runtime => "runtime fault",
            FaultKind::Timeout => "timeout",
            FaultKind::Malformed => "malformed reply",
            FaultKind::ChildExited => "child exited",
            FaultKind::Io => "I/O error",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Error)]
#[error("{kind}: {message}")]
pub struct PolicyFault {
    pub kind: FaultKind,
    pub message: String,
}

impl PolicyFault {
    pub fn new(kind: FaultKind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self::new(FaultKind::Runtime, message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultRecord {
    pub step_index: usize,
    pub fault: PolicyFault,
}

/// A controller mapping observations to a requested setpoint in kW.
pub trait Policy: Send {
    fn name(&self) -> &str;

    fn decide(&mut self, obs: &Observation) -> Result<f64, PolicyFault>;

    /// Outputs altered by a guardrail so far.
    fn violations(&self) -> u64 {
        0
    }
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn decide(&mut self, obs: &Observation) -> Result<f64, PolicyFault> {
        (**self).decide(obs)
    }

    fn violations(&self) -> u64 {
        (**self).violations()
    }
}

/// Closure-backed policy, mostly for tests and ad-hoc controllers.
pub struct FnPolicy<F> {
    name: String,
    f: F,
}

impl<F> FnPolicy<F>
where
    F: FnMut(&Observation) -> Result<f64, PolicyFault> + Send,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self { name: name.into(), f }
    }
}

impl<F> Policy for FnPolicy<F>
where
    F: FnMut(&Observation) -> Result<f64, PolicyFault> + Send,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn decide(&mut self, obs: &Observation) -> Result<f64, PolicyFault> {
        (self.f)(obs)
    }
}

/// Executable wrapper whose `decide` never fails: faults become an idle
/// action plus an entry in the fault log.
pub struct PolicyHandle {
    policy: Box<dyn Policy>,
    fault_log: Vec<FaultRecord>,
    consecutive_faults: u32,
    abort_after: u32,
}

impl fmt::Debug for PolicyHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PolicyHandle")
            .field("policy", &self.policy.name())
            .field("faults", &self.fault_log.len())
            .field("consecutive_faults", &self.consecutive_faults)
            .finish()
    }
}

impl PolicyHandle {
    pub fn new(policy: impl Policy + 'static) -> Self {
        Self::from_box(Box::new(policy))
    }

    pub fn from_box(policy: Box<dyn Policy>) -> Self {
        Self { policy, fault_log: Vec::new(), consecutive_faults: 0, abort_after: DEFAULT_ABORT_AFTER }
    }

    pub fn name(&self) -> &str {
        self.policy.name()
    }

    pub fn decide(&mut self, obs: &Observation) -> f64 {
        self.try_decide(obs).unwrap_or(0.0)
    }

    /// Like [`decide`](Self::decide) but hands the fault back to the caller
    /// (it is still logged).
    pub fn try_decide(&mut self, obs: &Observation) -> Result<f64, PolicyFault> {
        match self.policy.decide(obs) {
            Ok(kw) => {
                self.consecutive_faults = 0;
                Ok(kw)
            }
            Err(fault) => {
                self.consecutive_faults += 1;
                self.fault_log.push(FaultRecord { step_index: obs.step_index, fault: fault.clone() });
                Err(fault)
            }
        }
    }

    pub fn fault_log(&self) -> &[FaultRecord] {
        &self.fault_log
    }

    pub fn violations(&self) -> u64 {
        self.policy.violations()
    }

    pub fn abort_after(&self) -> u32 {
        self.abort_after
    }

    pub fn is_exhausted(&self) -> bool {
        self.consecutive_faults >= self.abort_after
    }

    /// Clears the consecutive-fault streak, e.g. before reusing the handle
    /// for another episode.
    pub fn reset_streak(&mut self) {
        self.consecutive_faults = 0;
    }
}

/// Clamps an inner policy's output to the charger envelope and the SoC
/// window. Non-finite outputs become zero.
pub struct Guardrail<P> {
    inner: P,
    battery: BatteryConfig,
    violations: u64,
}

impl<P: Policy> Guardrail<P> {
    pub fn new(inner: P, battery: BatteryConfig) -> Self {
        Self { inner, battery, violations: 0 }
    }

    pub fn enforce(&self, obs: &Observation, kw: f64) -> f64 {
        if !kw.is_finite() {
            return 0.0;
        }
        let mut out = kw.clamp(-self.battery.max_discharge_kw, self.battery.max_charge_kw);
        if obs.soc <= self.battery.soc_min {
            out = out.max(0.0);
        }
        if obs.soc >= self.battery.soc_max {
            out = out.min(0.0);
        }
        out
    }
}

impl<P: Policy> Policy for Guardrail<P> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn decide(&mut self, obs: &Observation) -> Result<f64, PolicyFault> {
        let kw = self.inner.decide(obs)?;
        let guarded = self.enforce(obs, kw);
        if !kw.is_finite() || (guarded - kw).abs() > GUARD_EPS_KW {
            self.violations += 1;
        }
        Ok(guarded)
    }

    fn violations(&self) -> u64 {
        self.violations + self.inner.violations()
    }
}

/// Wraps a handle's policy in a [`Guardrail`], keeping its fault history.
pub fn guardrail_wrap(inner: PolicyHandle, battery: BatteryConfig) -> PolicyHandle {
    let PolicyHandle { policy, fault_log, consecutive_faults, abort_after } = inner;
    PolicyHandle { policy: Box::new(Guardrail::new(policy, battery)), fault_log, consecutive_faults, abort_after }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProgramMode {
    BuiltinRules,
    ExternalProcess,
    RegisteredNative,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ProgramMetadata {
    pub origin_iteration: Option<usize>,
    pub parent: Option<String>,
    pub strategy: Option<String>,
}

/// Auditable policy text plus how to run it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyProgram {
    pub name: String,
    pub source_text: String,
    pub mode: ProgramMode,
    pub metadata: ProgramMetadata,
}

impl PolicyProgram {
    pub fn native(name: impl Into<String>) -> Self {
        Self { name: name.into(), source_text: String::new(), mode: ProgramMode::RegisteredNative, metadata: Default::default() }
    }

    pub fn rules(name: impl Into<String>, source_text: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            source_text: source_text.into(),
            mode: ProgramMode::BuiltinRules,
            metadata: Default::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum InstantiateError {
    #[error("unknown registered policy `{0}` (known: baseline, idle)")]
    UnknownNative(String),
    #[error("program `{0}` has empty source text")]
    EmptySource(String),
    #[error("rule script does not parse: {0}")]
    Parse(#[from] ParseError),
    #[error("external policy needs a command")]
    MissingCommand,
    #[error(transparent)]
    Spawn(#[from] SpawnError),
}

/// Everything needed to turn a [`PolicyProgram`] into a running handle.
#[derive(Debug, Clone, Default)]
pub struct PolicyRegistry {
    pub battery: BatteryConfig,
    pub baseline: BaselineConfig,
    /// Command for external programs; `{policy}` in any argument is replaced
    /// by the path of a file holding the program source.
    pub external_command: Option<ExternalCommand>,
    pub external_timeout: Option<Duration>,
}

pub const REGISTERED_POLICIES: &[&str] = &["baseline", "idle"];

impl PolicyRegistry {
    pub fn new(battery: BatteryConfig, baseline: BaselineConfig) -> Self {
        Self { battery, baseline, external_command: None, external_timeout: None }
    }

    pub fn native(&self, name: &str) -> Result<PolicyHandle, InstantiateError> {
        match name {
            "baseline" => Ok(PolicyHandle::new(BaselinePolicy::new(self.baseline, self.battery))),
            "idle" => Ok(PolicyHandle::new(FnPolicy::new("idle", |_| Ok(0.0)))),
            other => Err(InstantiateError::UnknownNative(other.to_string())),
        }
    }

    /// Builds a handle. External programs are written to `source_path` (a
    /// temporary file is used when none is given).
    pub fn instantiate(&self, program: &PolicyProgram, source_path: Option<&std::path::Path>) -> Result<PolicyHandle, InstantiateError> {
        if program.mode != ProgramMode::RegisteredNative && program.source_text.trim().is_empty() {
            return Err(InstantiateError::EmptySource(program.name.clone()));
        }
        match program.mode {
            ProgramMode::RegisteredNative => self.native(&program.name),
            ProgramMode::BuiltinRules => {
                let script = parse_rule_script(&program.source_text)?;
                Ok(PolicyHandle::new(RulePolicy::new(program.name.clone(), script)))
            }
            ProgramMode::ExternalProcess => {
                let command = self.external_command.as_ref().ok_or(InstantiateError::MissingCommand)?;
                let timeout = self.external_timeout.unwrap_or(external::DEFAULT_TIMEOUT);
                let policy = match source_path {
                    Some(path) => {
                        std::fs::write(path, &program.source_text).map_err(SpawnError::Io)?;
                        ExternalPolicy::spawn(&program.name, &command.with_policy_path(path), timeout)?
                    }
                    None => {
                        let file = tempfile::Builder::new().prefix("v2g-policy-").tempfile().map_err(SpawnError::Io)?;
                        std::fs::write(file.path(), &program.source_text).map_err(SpawnError::Io)?;
                        let mut policy = ExternalPolicy::spawn(&program.name, &command.with_policy_path(file.path()), timeout)?;
                        policy.keep_alive(file.into_temp_path());
                        policy
                    }
                };
                Ok(PolicyHandle::new(policy))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::test_support::observation;
    use proptest::prelude::*;

    fn constant(kw: f64) -> PolicyHandle {
        PolicyHandle::new(FnPolicy::new("const", move |_| Ok(kw)))
    }

    #[test]
    fn guardrail_examples() {
        let battery = BatteryConfig::default();
        let mut h = guardrail_wrap(constant(-5.0), battery);
        assert_eq!(h.decide(&observation(0.20, 0.4)), 0.0);
        assert_eq!(h.violations(), 1);

        let mut h = guardrail_wrap(constant(3.0), battery);
        assert_eq!(h.decide(&observation(0.50, 0.4)), 3.0);
        assert_eq!(h.violations(), 0);

        let mut h = guardrail_wrap(constant(12.0), battery);
        assert_eq!(h.decide(&observation(0.50, 0.4)), 7.0);
        assert_eq!(h.violations(), 1);

        let mut h = guardrail_wrap(constant(2.0), battery);
        assert_eq!(h.decide(&observation(1.0, 0.4)), 0.0);
        assert_eq!(h.violations(), 1);
    }

    #[test]
    fn handle_absorbs_faults() {
        let mut calls = 0;
        let mut h = PolicyHandle::new(FnPolicy::new("flaky", move |_| {
            calls += 1;
            if calls % 2 == 0 { Err(PolicyFault::runtime("even call")) } else { Ok(1.0) }
        }));
        let obs = observation(0.5, 0.2);
        assert_eq!(h.decide(&obs), 1.0);
        assert_eq!(h.decide(&obs), 0.0);
        assert_eq!(h.fault_log().len(), 1);
        assert!(!h.is_exhausted());

        let mut dead = PolicyHandle::new(FnPolicy::new("dead", |_| Err(PolicyFault::runtime("x"))));
        for _ in 0..3 {
            assert_eq!(dead.decide(&obs), 0.0);
        }
        assert!(dead.is_exhausted());
        let dead = guardrail_wrap(dead, BatteryConfig::default());
        assert!(dead.is_exhausted(), "wrapping keeps fault history");
    }

    #[test]
    fn registry_builds_known_programs() {
        let reg = PolicyRegistry::default();
        let obs = observation(0.8, 0.4);
        assert!(reg.instantiate(&PolicyProgram::native("baseline"), None).unwrap().decide(&obs) < 0.0);
        assert_eq!(reg.instantiate(&PolicyProgram::native("idle"), None).unwrap().decide(&obs), 0.0);
        assert!(matches!(reg.instantiate(&PolicyProgram::native("nope"), None), Err(InstantiateError::UnknownNative(_))));
        let rules = PolicyProgram::rules("r", "if soc > 0.5 then -2");
        assert_eq!(reg.instantiate(&rules, None).unwrap().decide(&obs), -2.0);
        assert!(matches!(reg.instantiate(&PolicyProgram::rules("bad", "if x then 1"), None), Err(InstantiateError::Parse(_))));
        let ext = PolicyProgram { mode: ProgramMode::ExternalProcess, ..PolicyProgram::rules("e", "print(0)") };
        assert!(matches!(reg.instantiate(&ext, None), Err(InstantiateError::MissingCommand)));
    }

    proptest! {
        #[test]
        fn guarded_outputs_always_safe(raw in prop_oneof![
            any::<f64>(),
            Just(f64::NAN),
            Just(f64::INFINITY),
            Just(f64::NEG_INFINITY),
            -1e6f64..1e6,
        ], soc in 0.2f64..=1.0) {
            let battery = BatteryConfig::default();
            let mut h = guardrail_wrap(constant(raw), battery);
            let kw = h.decide(&observation(soc, 0.3));
            prop_assert!(kw.is_finite());
            prop_assert!((-7.0..=7.0).contains(&kw));
            if soc <= battery.soc_min { prop_assert!(kw >= 0.0); }
            if soc >= battery.soc_max { prop_assert!(kw <= 0.0); }
        }
    }
}
