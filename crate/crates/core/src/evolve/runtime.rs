//! Online agent: the operator picks the action directly every few steps.
//!
//! At every `cadence_steps`-th step (and on the first step of each plug-in
//! session) the current state is sent as a prompt and the first signed
//! decimal in the reply becomes the setpoint. Between queries the cached
//! setpoint is replayed. All guardrails of a normal episode apply.

use std::sync::{Arc, LazyLock, Mutex};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::operator::{complete_with_retry, MutationOperator, OperatorUsage, RetryPolicy};
use super::prompt::{constraints_block, PromptBundle};
use super::{EnvBundle, EvolveError};
use crate::policy::external::ProtocolRequest;
use crate::policy::{guardrail_wrap, FaultKind, Policy, PolicyFault, PolicyHandle};
use crate::sim::{BatteryConfig, EpisodeReport, Observation};

pub const DEFAULT_CADENCE_STEPS: usize = 12;

static DECIMAL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?").expect("valid regex"));

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    pub cadence_steps: usize,
    /// Accept only a JSON number or `{"power_kw": x}` as the reply.
    pub strict_json: bool,
    pub retry: RetryPolicy,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self { cadence_steps: DEFAULT_CADENCE_STEPS, strict_json: false, retry: RetryPolicy::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeDecision {
    pub step: usize,
    pub reply: Option<String>,
    /// Parsed setpoint, before guardrails.
    pub action_kw: Option<f64>,
    pub fault: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeRun {
    pub operator: String,
    pub usage: OperatorUsage,
    pub config: RuntimeConfig,
    pub decisions: Vec<RuntimeDecision>,
    pub report: EpisodeReport,
}

/// Reads the setpoint from a reply: the first decimal number, or with
/// `strict` a JSON number or `{"power_kw": x}`.
pub fn parse_action(reply: &str, strict: bool) -> Option<f64> {
    let value = if strict {
        match serde_json::from_str::<Value>(reply.trim()).ok()? {
            Value::Number(n) => n.as_f64(),
            Value::Object(m) => m.get("power_kw").and_then(Value::as_f64),
            _ => None,
        }
    } else {
        DECIMAL.find(reply).and_then(|m| m.as_str().parse::<f64>().ok())
    };
    value.filter(|v| v.is_finite())
}

/// State prompt. The observation is a single JSON line after `STATE`.
pub fn state_prompt(obs: &Observation, battery: &BatteryConfig, strict: bool) -> PromptBundle {
    let request = serde_json::to_string(&ProtocolRequest::from(obs)).expect("request serialises");
    let answer = if strict {
        "Reply with JSON only: {\"power_kw\": <signed number>}."
    } else {
        "Reply with one signed number: the power in kW (+ charge, - discharge, 0 idle)."
    };
    let user = format!(
        "STATE at {} (step {}):\n{request}\n\nThe forecast lists the buy price for the coming 5-minute steps.\n\n{}\n{answer}\n",
        obs.hour_minute(),
        obs.step_index,
        constraints_block(battery)
    );
    PromptBundle::plain(
        "You control a home EV charger in real time. Decide the charging power for the next hour from the state you are given.",
        user,
    )
}

struct AgentState {
    operator: Box<dyn MutationOperator>,
    decisions: Vec<RuntimeDecision>,
    cached: Option<f64>,
    last_step: Option<usize>,
}

struct RuntimeAgent {
    name: String,
    cfg: RuntimeConfig,
    battery: BatteryConfig,
    state: Arc<Mutex<AgentState>>,
}

impl Policy for RuntimeAgent {
    fn name(&self) -> &str {
        &self.name
    }

    fn decide(&mut self, obs: &Observation) -> Result<f64, PolicyFault> {
        let mut st = self.state.lock().expect("agent state poisoned");
        let new_session = st.last_step.is_none_or(|s| s + 1 != obs.step_index);
        st.last_step = Some(obs.step_index);
        if new_session {
            st.cached = None;
        }
        if !(new_session || obs.step_index.is_multiple_of(self.cfg.cadence_steps)) {
            if let Some(kw) = st.cached {
                return Ok(kw);
            }
        }

        let prompt = state_prompt(obs, &self.battery, self.cfg.strict_json);
        let (reply, fault) = match complete_with_retry(st.operator.as_mut(), &prompt, &self.cfg.retry) {
            Ok(reply) => match parse_action(&reply, self.cfg.strict_json) {
                Some(kw) => (Some(reply), Ok(kw)),
                None => {
                    let fault = PolicyFault::new(FaultKind::Malformed, format!("no power value in reply `{}`", reply.trim()));
                    (Some(reply), Err(fault))
                }
            },
            Err(e) => (None, Err(PolicyFault::new(FaultKind::Io, e.to_string()))),
        };
        st.decisions.push(RuntimeDecision {
            step: obs.step_index,
            reply,
            action_kw: fault.as_ref().ok().copied(),
            fault: fault.as_ref().err().map(ToString::to_string),
        });
        match fault {
            Ok(kw) => {
                st.cached = Some(kw);
                Ok(kw)
            }
            Err(f) => st.cached.ok_or(f),
        }
    }
}

/// Runs one episode with the operator in the loop.
pub fn run_runtime_agent(env: &EnvBundle, operator: Box<dyn MutationOperator>, cfg: &RuntimeConfig) -> Result<RuntimeRun, EvolveError> {
    if cfg.cadence_steps == 0 {
        return Err(EvolveError::Config("cadence_steps must be at least 1".into()));
    }
    let name = format!("runtime:{}", operator.name());
    let state = Arc::new(Mutex::new(AgentState { operator, decisions: Vec::new(), cached: None, last_step: None }));
    let agent = RuntimeAgent { name, cfg: *cfg, battery: env.battery, state: Arc::clone(&state) };
    let mut handle = guardrail_wrap(PolicyHandle::new(agent), env.battery);
    let report = env.run(&mut handle)?;
    drop(handle);
    let st = Arc::into_inner(state).expect("agent dropped").into_inner().expect("agent state poisoned");
    Ok(RuntimeRun {
        operator: st.operator.name().to_string(),
        usage: st.operator.usage(),
        config: *cfg,
        decisions: st.decisions,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::{baseline_decide, BaselineConfig};
    use crate::evolve::operator::{FnOperator, ScriptedMock};
    use crate::market_data::{synthetic_trace, SyntheticSpec};
    use crate::sim::{always_plugged, apply_action, default_home_sessions, EpisodeConfig};

    fn env(plugged_always: bool) -> EnvBundle {
        let trace = synthetic_trace(&SyntheticSpec { days: 1, seed: 9, ..SyntheticSpec::default() }).unwrap();
        let sessions = if plugged_always { always_plugged(trace.len(), 0.3, 0.8) } else { default_home_sessions(&trace) };
        EnvBundle {
            episode: EpisodeConfig::window(0, trace.len()),
            trace,
            sessions,
            battery: BatteryConfig::default(),
            baseline: BaselineConfig::default(),
        }
    }

    #[test]
    fn parses_first_decimal() {
        assert_eq!(parse_action("+7.0", false), Some(7.0));
        assert_eq!(parse_action("I'd discharge at -3.5 kW, maybe 2", false), Some(-3.5));
        assert_eq!(parse_action("sell everything!!", false), None);
        assert_eq!(parse_action(".5", false), Some(0.5));
        assert_eq!(parse_action("{\"power_kw\": -2}", true), Some(-2.0));
        assert_eq!(parse_action("4.0", true), Some(4.0));
        assert_eq!(parse_action("about 4", true), None);
    }

    #[test]
    fn constant_charge_until_ceiling() {
        let env = env(true);
        let run = run_runtime_agent(&env, Box::new(ScriptedMock::new(["+7.0"]).repeating()), &RuntimeConfig::default()).unwrap();
        assert_eq!(run.decisions.len(), env.trace.len().div_ceil(12));
        // Replay the guardrailed request stream through the step oracle.
        let mut soc = 0.3;
        for r in &run.report.records {
            let mut obs = r.observation.clone();
            obs.soc = soc;
            let want = if soc >= env.battery.soc_max { 0.0 } else { 7.0 };
            assert_eq!(r.requested_kw, want);
            let out = apply_action(&obs, want, &env.battery, 5);
            assert!((out.soc_after - r.soc_after).abs() < 1e-12);
            soc = out.soc_after;
        }
        assert!((soc - 1.0).abs() < 1e-9, "ends full, got {soc}");
        assert!(run.report.records.iter().any(|r| r.clamp.is_some()), "top-off step clamps at the ceiling");
    }

    #[test]
    fn unparseable_reply_idles_with_fault() {
        let env = env(true);
        let run = run_runtime_agent(&env, Box::new(ScriptedMock::new(["sell everything!!"]).repeating()), &RuntimeConfig {
            cadence_steps: 12,
            ..RuntimeConfig::default()
        })
        .unwrap();
        assert_eq!(run.report.records[0].requested_kw, 0.0);
        assert!(run.decisions[0].fault.as_deref().unwrap().contains("no power value"));
        assert!(!run.report.summary.faults.is_empty());
    }

    #[test]
    fn bad_reply_keeps_cached_action() {
        let env = env(true);
        let cfg = RuntimeConfig { cadence_steps: 12, ..RuntimeConfig::default() };
        let run = run_runtime_agent(&env, Box::new(ScriptedMock::new(["2.5", "nonsense"]).repeating()), &cfg).unwrap();
        assert_eq!(run.report.records[12].requested_kw, 2.5);
        assert!(run.decisions[1].fault.is_some());
        assert!(run.report.summary.faults.is_empty(), "a cached action covers the bad reply");
    }

    #[test]
    fn mirroring_the_baseline_reproduces_its_episode() {
        let env = env(false);
        let battery = env.battery;
        let mirror = FnOperator::new("mirror", move |p: &PromptBundle| {
            let line = p.user_text.lines().find(|l| l.starts_with('{')).expect("state line");
            let req: ProtocolRequest = serde_json::from_str(line).unwrap();
            let mut obs = crate::sim::test_support::observation(req.soc, req.charge_price);
            obs.discharge_price = req.discharge_price;
            obs.load_kw = req.load_kw;
            obs.pv_kw = req.pv_kw;
            obs.ttd_minutes = req.ttd;
            Ok(format!("{}", baseline_decide(&obs, &BaselineConfig::default(), &battery)))
        });
        let cfg = RuntimeConfig { cadence_steps: 1, ..RuntimeConfig::default() };
        let run = run_runtime_agent(&env, Box::new(mirror), &cfg).unwrap();
        let mut base = env.registry().native("baseline").unwrap();
        let reference = env.run(&mut base).unwrap();
        assert!((run.report.summary.total_reward - reference.summary.total_reward).abs() < 1e-9);
        for (a, b) in run.report.records.iter().zip(&reference.records) {
            assert!((a.applied_kw - b.applied_kw).abs() < 1e-9);
            assert!((a.soc_after - b.soc_after).abs() < 1e-9);
        }
        assert_eq!(run.report.summary.policy_violations, 0);
    }
}
