//! Prompt assembly for each strategy.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::feedback::FeedbackSummary;
use super::StrategyKind;
use crate::ledger::{render_examples, LedgerEntry, RenderStyle};
use crate::market_data::{lower_quantile, TraceStats};
use crate::policy::{PolicyProgram, ProgramMode};
use crate::rewards::ActionKind;
use crate::sim::BatteryConfig;

/// Interface every candidate program implements, shown verbatim.
pub const SIGNATURE_BLOCK: &str = "\
def decide_power(charge_price, discharge_price, soc, ttd,
                 load_kw, pv_kw, max_charge_kw, max_discharge_kw):
    \"\"\"Return signed kW: +charge, -discharge, 0=idle.\"\"\"
    # Your code here
    return power_kw";

const RULE_LANGUAGE: &str = "\
Write decide_power in the rule language below, not in Python. Rules are
tried top to bottom and the first true condition sets the power; with no
match the power is 0.

  if <condition> then <expression>
  else <expression>            (optional, last line only)

Fields: charge_price, discharge_price, soc (0-1), ttd (minutes), load_kw,
pv_kw, max_charge_kw, max_discharge_kw.
Operators: + - * /, < <= > >= == !=, and, or, not, parentheses.
Functions: min(a, b, ...), max(a, b, ...).
Forecast of the buy price over the next h steps (h an integer literal):
fc_max(h), fc_min(h), fc_mean(h). One step is 5 minutes, so h = 72 looks
6 hours ahead.
Lines starting with # are comments.

Example:
```
if soc < 0.2 then max_charge_kw
if discharge_price >= 0.35 and soc > 0.25 then -max_discharge_kw
else 0
```";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("{strategy} prompts need {what}")]
    MissingInput { strategy: StrategyKind, what: &'static str },
    #[error("the runtime strategy uses per-step state prompts")]
    RuntimeStrategy,
}

/// Text sent to the operator, with the optional parts kept separately for
/// inspection.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    pub examples_block: Option<String>,
    pub stats_block: Option<String>,
    pub prior_source: Option<String>,
    pub feedback_block: Option<String>,
}

impl PromptBundle {
    pub fn plain(system_text: impl Into<String>, user_text: impl Into<String>) -> Self {
        Self {
            system_text: system_text.into(),
            user_text: user_text.into(),
            examples_block: None,
            stats_block: None,
            prior_source: None,
            feedback_block: None,
        }
    }

    /// Layout written to `prompt.txt`.
    pub fn render(&self) -> String {
        format!("=== SYSTEM ===\n{}\n\n=== USER ===\n{}", self.system_text.trim_end(), self.user_text)
    }
}

/// Price levels the baseline acted on, used for threshold hints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdHints {
    /// Median buy price over the examples where the baseline charged.
    pub charge_price: f64,
    /// Median sell price over the examples where the baseline discharged.
    pub discharge_price: f64,
}

impl ThresholdHints {
    /// Falls back to the overall example medians when the baseline never
    /// charged (or never discharged) in the sample.
    pub fn from_examples(examples: &[LedgerEntry]) -> Option<Self> {
        let median = |mut v: Vec<f64>| -> Option<f64> {
            if v.is_empty() {
                return None;
            }
            v.sort_by(f64::total_cmp);
            Some(lower_quantile(&v, 0.5))
        };
        let all_buy = median(examples.iter().map(|e| e.charge_price).collect())?;
        let all_sell = median(examples.iter().map(|e| e.discharge_price).collect())?;
        let of_kind = |kind: ActionKind, price: fn(&LedgerEntry) -> f64| {
            median(examples.iter().filter(|e| e.action_kind() == kind).map(price).collect())
        };
        Some(Self {
            charge_price: of_kind(ActionKind::Charge, |e| e.charge_price).unwrap_or(all_buy),
            discharge_price: of_kind(ActionKind::Discharge, |e| e.discharge_price).unwrap_or(all_sell),
        })
    }
}

pub struct PromptInputs<'a> {
    pub strategy: StrategyKind,
    /// 1-based.
    pub iteration: usize,
    pub examples: &'a [LedgerEntry],
    pub trace_stats: Option<&'a TraceStats>,
    pub thresholds: Option<ThresholdHints>,
    pub prior: Option<&'a PolicyProgram>,
    pub feedback: Option<&'a FeedbackSummary>,
    pub battery: &'a BatteryConfig,
    pub program_mode: ProgramMode,
}

pub fn system_text() -> String {
    "You write control programs for a home battery-electric vehicle with a bidirectional charger. \
The program is called every 5 minutes while the vehicle is plugged in and returns a signed power \
setpoint in kW: positive charges the vehicle, negative discharges it into the home and the grid. \
Reply with the complete program in one fenced code block."
        .to_string()
}

pub(super) fn constraints_block(battery: &BatteryConfig) -> String {
    let mut s = String::from("HARD CONSTRAINTS:\n");
    let _ = writeln!(s, "- Charging power must stay within 0 to {} kW (max_charge_kw).", battery.max_charge_kw);
    let _ = writeln!(s, "- Discharging power must stay within 0 to {} kW (max_discharge_kw).", battery.max_discharge_kw);
    let _ = writeln!(
        s,
        "- Never discharge below {:.0}% SoC or charge above {:.0}% SoC.",
        battery.soc_min * 100.0,
        battery.soc_max * 100.0
    );
    let _ = writeln!(s, "- If the SoC is below {:.0}%, prioritize charging regardless of price.", battery.soc_min * 100.0);
    s.push_str("- Return 0 when no action is needed.\n");
    s
}

fn observation_block() -> &'static str {
    "OBSERVATION:\n\
- charge_price: price paid per kWh imported from the grid\n\
- discharge_price: price received per kWh exported to the grid\n\
- soc: state of charge, 0.0 to 1.0\n\
- ttd: minutes until the vehicle departs\n\
- load_kw: household consumption\n\
- pv_kw: rooftop solar generation\n\
- max_charge_kw, max_discharge_kw: charger limits\n\
Discharged energy first covers household load; only the remainder is exported.\n"
}

fn stats_block(stats: &TraceStats) -> String {
    let mut s = String::from("PRICE STATISTICS (per kWh):\n");
    for (name, p) in [("Buy", &stats.buy), ("Sell", &stats.sell)] {
        let _ = writeln!(
            s,
            "{name}: min {:.3}, 25% {:.3}, median {:.3}, 75% {:.3}, 90% {:.3}, max {:.3}",
            p.min, p.q1, p.median, p.q3, p.p90, p.max
        );
    }
    let _ = writeln!(s, "Peak solar: {:.1} kW, peak household load: {:.1} kW", stats.pv_peak_kw, stats.load_peak_kw);
    s
}

fn thresholds_block(t: &ThresholdHints) -> String {
    format!(
        "RECOMMENDED THRESHOLDS (based on runtime environment):\n\
CHARGE when: charge_price <= {:.3} (runtime median)\n\
DISCHARGE when: discharge_price >= {:.3} (runtime median)\n",
        t.charge_price, t.discharge_price
    )
}

fn goal(strategy: StrategyKind) -> &'static str {
    match strategy {
        StrategyKind::Imitation => "YOUR GOAL: Write a function that MATCHES these training examples as closely as possible.\n",
        StrategyKind::Hybrid => {
            "YOUR GOAL: Write a function that MATCHES these training examples as closely as possible, \
then earns more where the examples leave money on the table (buy cheap, sell at peaks) without breaking the constraints.\n"
        }
        StrategyKind::Reasoning | StrategyKind::Runtime => {
            "YOUR GOAL: Maximize profit (export revenue minus import cost) while reaching the departure SoC target. \
Think step by step about price levels, solar surplus and time to departure, then write the function.\n"
        }
    }
}

fn format_block(mode: ProgramMode) -> String {
    let mut s = format!("REQUIRED FUNCTION SIGNATURE:\n```\n{SIGNATURE_BLOCK}\n```\n");
    match mode {
        ProgramMode::BuiltinRules => {
            s.push_str("\nPROGRAM FORMAT:\n");
            s.push_str(RULE_LANGUAGE);
            s.push('\n');
        }
        _ => s.push_str("\nReturn the complete Python function. Use only the standard library.\n"),
    }
    s
}

/// Assembles the prompt for one iteration. Pure: same inputs, same text.
pub fn build_prompt(inputs: &PromptInputs<'_>) -> Result<PromptBundle, PromptError> {
    let strategy = inputs.strategy;
    let missing = |what| PromptError::MissingInput { strategy, what };
    if strategy == StrategyKind::Runtime {
        return Err(PromptError::RuntimeStrategy);
    }
    let uses_examples = matches!(strategy, StrategyKind::Imitation | StrategyKind::Hybrid);
    if uses_examples && inputs.examples.is_empty() {
        return Err(missing("ledger examples"));
    }
    if inputs.iteration > 1 && inputs.feedback.is_none() {
        return Err(missing("feedback after the first iteration"));
    }

    let examples_block = uses_examples.then(|| render_examples(inputs.examples, RenderStyle::Narrative));
    let stats_block = match strategy {
        StrategyKind::Imitation => None,
        _ => inputs.trace_stats.map(stats_block),
    };
    let thresholds = if uses_examples { inputs.thresholds.or_else(|| ThresholdHints::from_examples(inputs.examples)) } else { None };
    let prior_source = if inputs.iteration > 1 { inputs.prior.map(|p| p.source_text.clone()) } else { None };
    let feedback_block = if inputs.iteration > 1 { inputs.feedback.map(FeedbackSummary::render) } else { None };

    let mut u = String::from("TASK: Generate a decide_power program to control EV charging.\n\n");
    u.push_str(observation_block());
    u.push('\n');
    u.push_str(&constraints_block(inputs.battery));
    if let Some(block) = &examples_block {
        u.push('\n');
        u.push_str(block);
    }
    if let Some(t) = &thresholds {
        u.push('\n');
        u.push_str(&thresholds_block(t));
    }
    if let Some(block) = &stats_block {
        u.push('\n');
        u.push_str(block);
    }
    u.push('\n');
    u.push_str(goal(strategy));
    u.push('\n');
    u.push_str(&format_block(inputs.program_mode));
    if let Some(src) = &prior_source {
        let _ = write!(u, "\nPREVIOUS FUNCTION:\n```\n{}\n```\n", src.trim_end());
    }
    if let Some(fb) = &feedback_block {
        u.push('\n');
        u.push_str(fb);
    }

    Ok(PromptBundle { system_text: system_text(), user_text: u, examples_block, stats_block, prior_source, feedback_block })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::Quadrant;
    use crate::market_data::PriceSummary;

    fn entry(step: usize, action_kw: f64, price: f64) -> LedgerEntry {
        LedgerEntry {
            step,
            soc_pct: 50.0,
            charge_price: price,
            discharge_price: price,
            pv_kw: 0.0,
            load_kw: 0.5,
            ttd_min: 300.0,
            action_kw,
            reward: 0.0,
            quadrant: Quadrant::LowPriceNoSolar,
        }
    }

    fn fig_examples() -> Vec<LedgerEntry> {
        let mut v = Vec::new();
        v.extend((0..630).map(|i| entry(i, 7.0, 0.12)));
        v.extend((630..975).map(|i| entry(i, -7.0, 0.25)));
        v.extend((975..1500).map(|i| entry(i, 0.0, 0.18)));
        v
    }

    fn stats() -> TraceStats {
        let p = PriceSummary { min: 0.05, q1: 0.1, median: 0.2, q3: 0.3, max: 0.5, p90: 0.4 };
        TraceStats { n_points: 288, buy: p, sell: p, pv_peak_kw: 5.0, load_peak_kw: 2.0 }
    }

    fn inputs<'a>(
        strategy: StrategyKind,
        iteration: usize,
        examples: &'a [LedgerEntry],
        stats: &'a TraceStats,
        battery: &'a BatteryConfig,
    ) -> PromptInputs<'a> {
        PromptInputs {
            strategy,
            iteration,
            examples,
            trace_stats: Some(stats),
            thresholds: None,
            prior: None,
            feedback: None,
            battery,
            program_mode: ProgramMode::BuiltinRules,
        }
    }

    #[test]
    fn hybrid_first_iteration() {
        let (ex, st, b) = (fig_examples(), stats(), BatteryConfig::default());
        let p = build_prompt(&inputs(StrategyKind::Hybrid, 1, &ex, &st, &b)).unwrap();
        let text = &p.user_text;
        assert!(text.contains("Total examples: 1500\nCharge actions: 630 (42.0%)\nDischarge actions: 345 (23.0%)\nIdle actions: 525 (35.0%)"));
        assert!(text.contains("CHARGE when: charge_price <= 0.120 (runtime median)"));
        assert!(text.contains("DISCHARGE when: discharge_price >= 0.250 (runtime median)"));
        assert!(text.contains(SIGNATURE_BLOCK));
        assert!(text.contains("If the SoC is below 20%, prioritize charging regardless of price"));
        assert!(p.feedback_block.is_none() && p.prior_source.is_none());
        assert_eq!(p, build_prompt(&inputs(StrategyKind::Hybrid, 1, &ex, &st, &b)).unwrap(), "pure");
    }

    #[test]
    fn reasoning_has_no_examples() {
        let (st, b) = (stats(), BatteryConfig::default());
        let p = build_prompt(&inputs(StrategyKind::Reasoning, 1, &[], &st, &b)).unwrap();
        assert!(p.examples_block.is_none());
        assert!(!p.user_text.contains("{SoC:"));
        assert!(!p.user_text.contains("BASELINE BEHAVIOR SUMMARY"));
        assert!(p.user_text.contains("HARD CONSTRAINTS"));
        assert!(p.user_text.contains(SIGNATURE_BLOCK));
    }

    #[test]
    fn later_iterations_carry_feedback_and_prior() {
        let (ex, st, b) = (fig_examples(), stats(), BatteryConfig::default());
        let mut fb = FeedbackSummary::note_only(1, "n");
        fb.notes.clear();
        fb.total_reward = Some(8.86);
        fb.avg_reward_per_step = Some(0.0059);
        fb.issues.push(super::super::feedback::Issue {
            kind: super::super::feedback::IssueKind::MissedArbitrage,
            message: "Missed arbitrage window at 18:00 (steps 216-230): sell price up to 0.50.".into(),
            steps: vec![216],
        });
        let prior = PolicyProgram::rules("iter-1", "if soc < 0.2 then 7");
        let mut i = inputs(StrategyKind::Hybrid, 2, &ex, &st, &b);
        assert_eq!(build_prompt(&i).unwrap_err(), PromptError::MissingInput { strategy: StrategyKind::Hybrid, what: "feedback after the first iteration" });
        i.feedback = Some(&fb);
        i.prior = Some(&prior);
        let p = build_prompt(&i).unwrap();
        assert!(p.user_text.contains("Total reward: 8.86"));
        assert!(p.user_text.contains("ISSUES IDENTIFIED:\n- Missed arbitrage window at 18:00"));
        assert!(p.user_text.contains("PREVIOUS FUNCTION:\n```\nif soc < 0.2 then 7\n```"));
        assert!(p.user_text.ends_with("TASK: Rewrite the function to fix the identified issues.\n"));
    }

    #[test]
    fn missing_inputs_are_rejected() {
        let (st, b) = (stats(), BatteryConfig::default());
        assert!(matches!(build_prompt(&inputs(StrategyKind::Imitation, 1, &[], &st, &b)), Err(PromptError::MissingInput { .. })));
        assert_eq!(build_prompt(&inputs(StrategyKind::Runtime, 1, &[], &st, &b)).unwrap_err(), PromptError::RuntimeStrategy);
    }

    #[test]
    fn python_mode_omits_rule_language() {
        let (ex, st, b) = (fig_examples(), stats(), BatteryConfig::default());
        let mut i = inputs(StrategyKind::Imitation, 1, &ex, &st, &b);
        i.program_mode = ProgramMode::ExternalProcess;
        let p = build_prompt(&i).unwrap();
        assert!(!p.user_text.contains("PROGRAM FORMAT"));
        assert!(p.stats_block.is_none());
    }

    #[test]
    fn threshold_hints_fall_back_to_overall_median() {
        let ex: Vec<_> = (0..5).map(|i| entry(i, 0.0, 0.1 * (i + 1) as f64)).collect();
        let t = ThresholdHints::from_examples(&ex).unwrap();
        assert_eq!(t.charge_price, 0.30000000000000004);
        assert_eq!(t.discharge_price, t.charge_price);
        assert!(ThresholdHints::from_examples(&[]).is_none());
    }
}
