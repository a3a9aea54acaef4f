//! Turns an evaluated episode into the critique block of the next prompt.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::market_data::lower_quantile;
use crate::rewards::{ActionKind, FitMismatch, FitReport};
use crate::sim::{ClampReason, EpisodeReport, StepRecord};

pub const DEFAULT_TOP_K: usize = 10;
/// Longest list of windows reported per issue kind.
const MAX_WINDOWS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeedbackConfig {
    pub peak_price_threshold: f64,
    /// Top-decile sell price is used instead when it is higher.
    pub use_top_decile: bool,
    pub min_soc_reserve: f64,
    /// SoC headroom above the reserve before an idle peak counts as missed.
    pub reserve_margin: f64,
    /// Flicker is reported when it exceeds `steps / flicker_divisor`.
    pub flicker_divisor: usize,
    pub top_k: usize,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self {
            peak_price_threshold: 0.35,
            use_top_decile: true,
            min_soc_reserve: 0.20,
            reserve_margin: 0.05,
            flicker_divisor: 50,
            top_k: DEFAULT_TOP_K,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    MissedArbitrage,
    FloorBreach,
    Flicker,
    DepartureDeficit,
    PolicyFault,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Issue {
    pub kind: IssueKind,
    pub message: String,
    /// Step indices the finding refers to; all belong to the episode.
    pub steps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackSummary {
    pub iteration: usize,
    pub total_reward: Option<f64>,
    pub avg_reward_per_step: Option<f64>,
    pub fit_score: Option<f64>,
    pub soc_violation_count: usize,
    pub clamp_count: usize,
    pub issues: Vec<Issue>,
    pub top_mismatches: Vec<FitMismatch>,
    /// Free-form notes, e.g. why no program could be evaluated.
    pub notes: Vec<String>,
}

impl FeedbackSummary {
    /// Feedback for an iteration that produced nothing to evaluate.
    pub fn note_only(iteration: usize, note: impl Into<String>) -> Self {
        Self {
            iteration,
            total_reward: None,
            avg_reward_per_step: None,
            fit_score: None,
            soc_violation_count: 0,
            clamp_count: 0,
            issues: Vec::new(),
            top_mismatches: Vec::new(),
            notes: vec![note.into()],
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "EVALUATION RESULTS (Iteration {}):", self.iteration);
        match (self.total_reward, self.avg_reward_per_step) {
            (Some(total), Some(avg)) => {
                let _ = writeln!(s, "Total reward: {total:.2}");
                let _ = writeln!(s, "Average reward per step: {avg:.4}");
                if let Some(fit) = self.fit_score {
                    let _ = writeln!(s, "Fit score: {fit:.3}");
                }
                let _ = writeln!(s, "SoC limit violations: {}", self.soc_violation_count);
                let _ = writeln!(s, "Clamped actions: {}", self.clamp_count);
            }
            _ => s.push_str("No evaluation.\n"),
        }
        for note in &self.notes {
            let _ = writeln!(s, "Note: {note}");
        }
        s.push_str("\nISSUES IDENTIFIED:\n");
        if self.issues.is_empty() && self.top_mismatches.is_empty() {
            s.push_str("- None detected.\n");
        }
        for issue in &self.issues {
            let _ = writeln!(s, "- {}", issue.message);
        }
        if !self.top_mismatches.is_empty() {
            s.push_str("\nLARGEST MISMATCHES WITH THE EXAMPLES:\n");
            for m in &self.top_mismatches {
                let o = &m.observation;
                let _ = writeln!(
                    s,
                    "- {{SoC: {:.0}%, price: {:.2}, PV: {:.1} kW, TTD: {:.0} min}} expected {:+.1} kW, got {:+.1} kW",
                    o.soc * 100.0,
                    o.charge_price,
                    o.pv_kw,
                    o.ttd_minutes,
                    m.reference_kw,
                    m.policy_kw
                );
            }
        }
        s.push_str("\nTASK: Rewrite the function to fix the identified issues.\n");
        s
    }
}

/// Consecutive runs of step indices, as `(first, last)` pairs.
fn windows(steps: &[usize]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &s in steps {
        match out.last_mut() {
            Some((_, last)) if *last + 1 == s => *last = s,
            _ => out.push((s, s)),
        }
    }
    out
}

fn span(records: &[StepRecord], first: usize, last: usize) -> String {
    let time = |step: usize| records.iter().find(|r| r.observation.step_index == step).map(|r| r.observation.hour_minute());
    let at = time(first).unwrap_or_default();
    if first == last {
        format!("at {at} (step {first})")
    } else {
        format!("at {at} (steps {first}-{last})")
    }
}

/// Sell price above which an idle or charging step with spare SoC counts
/// as a missed arbitrage opportunity.
pub fn arbitrage_threshold(records: &[StepRecord], cfg: &FeedbackConfig) -> f64 {
    let mut prices: Vec<f64> = records.iter().map(|r| r.observation.discharge_price).collect();
    if !cfg.use_top_decile || prices.is_empty() {
        return cfg.peak_price_threshold;
    }
    prices.sort_by(f64::total_cmp);
    cfg.peak_price_threshold.max(lower_quantile(&prices, 0.9))
}

fn missed_arbitrage(records: &[StepRecord], cfg: &FeedbackConfig) -> Vec<Issue> {
    let threshold = arbitrage_threshold(records, cfg);
    let missed: Vec<usize> = records
        .iter()
        .filter(|r| {
            let o = &r.observation;
            o.plugged_in
                && o.discharge_price >= threshold
                && o.soc > cfg.min_soc_reserve + cfg.reserve_margin
                && r.applied_kw >= 0.0
        })
        .map(|r| r.observation.step_index)
        .collect();
    windows(&missed)
        .into_iter()
        .take(MAX_WINDOWS)
        .map(|(first, last)| {
            let in_window = |r: &&StepRecord| (first..=last).contains(&r.observation.step_index);
            let peak = records.iter().filter(in_window).map(|r| r.observation.discharge_price).fold(0.0, f64::max);
            Issue {
                kind: IssueKind::MissedArbitrage,
                message: format!(
                    "Missed arbitrage window {}: sell price up to {peak:.2} with spare SoC, but the battery did not discharge.",
                    span(records, first, last)
                ),
                steps: (first..=last).collect(),
            }
        })
        .collect()
}

fn floor_breaches(records: &[StepRecord], cfg: &FeedbackConfig) -> Vec<Issue> {
    let steps: Vec<usize> =
        records.iter().filter(|r| r.clamp == Some(ClampReason::SocFloor)).map(|r| r.observation.step_index).collect();
    windows(&steps)
        .into_iter()
        .take(MAX_WINDOWS)
        .map(|(first, last)| Issue {
            kind: IssueKind::FloorBreach,
            message: format!(
                "Tried to discharge the battery below the {:.0}% SoC limit {}.",
                cfg.min_soc_reserve * 100.0,
                span(records, first, last)
            ),
            steps: (first..=last).collect(),
        })
        .collect()
}

fn flicker(report: &EpisodeReport, cfg: &FeedbackConfig) -> Option<Issue> {
    let count = report.summary.metrics.flicker_count;
    if count * cfg.flicker_divisor.max(1) <= report.records.len() {
        return None;
    }
    let kinds: Vec<ActionKind> = report.records.iter().map(|r| ActionKind::of(r.applied_kw)).collect();
    let steps: Vec<usize> = kinds
        .windows(2)
        .zip(&report.records[1..])
        .filter(|(w, _)| matches!((w[0], w[1]), (ActionKind::Charge, ActionKind::Discharge) | (ActionKind::Discharge, ActionKind::Charge)))
        .map(|(_, r)| r.observation.step_index)
        .collect();
    let first: Vec<String> = steps.iter().take(5).map(ToString::to_string).collect();
    Some(Issue {
        kind: IssueKind::Flicker,
        message: format!(
            "Action flicker: {count} direct switches between charging and discharging in {} steps (e.g. steps {}). Add hysteresis.",
            report.records.len(),
            first.join(", ")
        ),
        steps,
    })
}

fn departures(report: &EpisodeReport) -> Vec<Issue> {
    report
        .summary
        .departure_deficits
        .iter()
        .filter(|d| d.deficit > 0.0)
        .take(MAX_WINDOWS)
        .map(|d| {
            let step = d.departure_step - 1;
            Issue {
                kind: IssueKind::DepartureDeficit,
                message: format!(
                    "Vehicle left at {:.0}% SoC against a {:.0}% target {} (penalty {:.2}).",
                    d.soc_at_departure * 100.0,
                    d.target_soc * 100.0,
                    span(&report.records, step, step),
                    d.penalty
                ),
                steps: vec![step],
            }
        })
        .collect()
}

fn faults(report: &EpisodeReport) -> Vec<Issue> {
    let mut out = Vec::new();
    let faults = &report.summary.faults;
    if let Some(first) = faults.first() {
        out.push(Issue {
            kind: IssueKind::PolicyFault,
            message: format!(
                "The function failed on {} step(s); first failure at step {}: {}.",
                faults.len(),
                first.step_index,
                first.fault
            ),
            steps: faults.iter().map(|f| f.step_index).collect(),
        });
    }
    if let Some(abort) = &report.summary.aborted {
        out.push(Issue {
            kind: IssueKind::Aborted,
            message: format!("The episode was stopped at step {} after repeated failures.", abort.step_index),
            steps: vec![abort.step_index],
        });
    }
    out
}

/// Scores and findings for one evaluated iteration. `fit` adds the top
/// mismatches, largest absolute difference first.
pub fn make_feedback(iteration: usize, report: &EpisodeReport, fit: Option<&FitReport>, cfg: &FeedbackConfig) -> FeedbackSummary {
    let mut issues = missed_arbitrage(&report.records, cfg);
    issues.extend(floor_breaches(&report.records, cfg));
    issues.extend(flicker(report, cfg));
    issues.extend(departures(report));
    issues.extend(faults(report));

    let top_mismatches = fit.map_or_else(Vec::new, |f| {
        let mut ms: Vec<&FitMismatch> = f.mismatches.iter().collect();
        ms.sort_by(|a, b| {
            let da = (a.policy_kw - a.reference_kw).abs();
            let db = (b.policy_kw - b.reference_kw).abs();
            db.total_cmp(&da).then(a.example_index.cmp(&b.example_index))
        });
        ms.into_iter().take(cfg.top_k).cloned().collect()
    });

    let steps = report.records.len();
    FeedbackSummary {
        iteration,
        total_reward: Some(report.summary.total_reward),
        avg_reward_per_step: Some(if steps == 0 { 0.0 } else { report.summary.total_reward / steps as f64 }),
        fit_score: fit.map(|f| f.fit_score),
        soc_violation_count: report.summary.soc_violations,
        clamp_count: report.summary.clamp_events,
        issues,
        top_mismatches,
        notes: Vec::new(),
    }
}
