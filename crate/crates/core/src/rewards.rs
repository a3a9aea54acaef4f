//! Profit reward, departure penalties, imitation fit and behavioural metrics.
//!
//! The penalty applied when the vehicle leaves short of its target SoC is an
//! interpretation: a linear deficit term plus an exponential comfort term,
//!
//! ```text
//! d       = max(0, target_soc - soc_at_departure)
//! penalty = -(deficit_penalty_coeff * d + satisfaction_weight * (exp(satisfaction_exponent_scale * d) - 1))
//! ```
//!
//! Both terms vanish at zero deficit and grow monotonically with it. All
//! coefficients are configurable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{PolicyFault, PolicyHandle};
use crate::sim::{ConnectionSession, Observation, StepRecord};

/// Powers with magnitude at or below this are treated as idle.
pub const IDLE_EPS_KW: f64 = 1e-9;
/// Behavioural match tolerance between a policy and its reference.
pub const FIT_TOLERANCE_KW: f64 = 0.5;
// Absorbs representation error so that a difference of exactly 0.5 kW
// written in decimal still counts as matched.
const FIT_SLACK_KW: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    #[default]
    Raw,
    /// Reward divided by `peak buy price * household kWh` over the episode
    /// window (or by `normalizer` when set explicitly).
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub mode: RewardMode,
    pub deficit_penalty_coeff: f64,
    pub satisfaction_exponent_scale: f64,
    pub satisfaction_weight: f64,
    /// Overrides the computed normaliser in `Normalized` mode.
    pub normalizer: Option<f64>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            mode: RewardMode::Raw,
            deficit_penalty_coeff: 10.0,
            satisfaction_exponent_scale: 4.0,
            satisfaction_weight: 1.0,
            normalizer: None,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("deficit_penalty_coeff", self.deficit_penalty_coeff),
            ("satisfaction_exponent_scale", self.satisfaction_exponent_scale),
            ("satisfaction_weight", self.satisfaction_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if let Some(n) = self.normalizer {
            if !(n.is_finite() && n > 0.0) {
                return Err(format!("normalizer must be finite and > 0, got {n}"));
            }
        }
        Ok(())
    }

    /// Divisor applied to every reward term of an episode.
    pub fn normalizer_for(&self, peak_buy_price: f64, household_kwh: f64) -> f64 {
        match self.mode {
            RewardMode::Raw => 1.0,
            RewardMode::Normalized => {
                let n = self.normalizer.unwrap_or(peak_buy_price * household_kwh);
                if n.is_finite() && n > 0.0 { n } else { 1.0 }
            }
        }
    }
}

/// Negated meter cost: revenue from export minus cost of import.
pub fn step_profit(grid_import_kwh: f64, grid_export_kwh: f64, buy_price: f64, sell_price: f64) -> f64 {
    sell_price * grid_export_kwh - buy_price * grid_import_kwh
}

/// Non-positive penalty for leaving below `session.target_soc`.
pub fn departure_penalty(session: &ConnectionSession, soc_at_departure: f64, cfg: &RewardConfig) -> f64 {
    let deficit = (session.target_soc - soc_at_departure).max(0.0);
    if deficit == 0.0 {
        return 0.0;
    }
    -(cfg.deficit_penalty_coeff * deficit + cfg.satisfaction_weight * (cfg.satisfaction_exponent_scale * deficit).exp_m1())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMismatch {
    pub example_index: usize,
    pub observation: Observation,
    pub reference_kw: f64,
    pub policy_kw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub n_examples: usize,
    pub n_matched: usize,
    pub fit_score: f64,
    pub mismatches: Vec<FitMismatch>,
}

#[derive(Debug, Error)]
pub enum FitError {
    #[error("fit score needs at least one example")]
    NoExamples,
    #[error("policy fault on example {index}: {fault}")]
    PolicyFault { index: usize, fault: PolicyFault },
}

pub fn within_fit_tolerance(reference_kw: f64, policy_kw: f64) -> bool {
    (policy_kw - reference_kw).abs() <= FIT_TOLERANCE_KW + FIT_SLACK_KW
}

/// Fraction of examples where the policy lands within ±0.5 kW of the
/// reference. Mismatches keep their full observations for feedback prompts.
pub fn fit_score(policy: &mut PolicyHandle, examples: &[(Observation, f64)]) -> Result<FitReport, FitError> {
    if examples.is_empty() {
        return Err(FitError::NoExamples);
    }
    let mut mismatches = Vec::new();
    for (index, (obs, reference_kw)) in examples.iter().enumerate() {
        let policy_kw = policy.try_decide(obs).map_err(|fault| FitError::PolicyFault { index, fault })?;
        if !within_fit_tolerance(*reference_kw, policy_kw) {
            mismatches.push(FitMismatch {
                example_index: index,
                observation: obs.clone(),
                reference_kw: *reference_kw,
                policy_kw,
            });
        }
    }
    let n_examples = examples.len();
    let n_matched = n_examples - mismatches.len();
    Ok(FitReport { n_examples, n_matched, fit_score: n_matched as f64 / n_examples as f64, mismatches })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Charge,
    Discharge,
    Idle,
}

impl ActionKind {
    pub fn of(power_kw: f64) -> Self {
        if power_kw > IDLE_EPS_KW {
            ActionKind::Charge
        } else if power_kw < -IDLE_EPS_KW {
            ActionKind::Discharge
        } else {
            ActionKind::Idle
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ActionKind::Charge => "charge",
            ActionKind::Discharge => "discharge",
            ActionKind::Idle => "idle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ActionDistribution {
    pub charge_steps: usize,
    pub discharge_steps: usize,
    pub idle_steps: usize,
    pub charge: f64,
    pub discharge: f64,
    pub idle: f64,
}

impl ActionDistribution {
    pub fn from_powers(powers: impl IntoIterator<Item = f64>) -> Self {
        let mut d = Self::default();
        for p in powers {
            match ActionKind::of(p) {
                ActionKind::Charge => d.charge_steps += 1,
                ActionKind::Discharge => d.discharge_steps += 1,
                ActionKind::Idle => d.idle_steps += 1,
            }
        }
        let total = d.total();
        if total > 0 {
            d.charge = d.charge_steps as f64 / total as f64;
            d.discharge = d.discharge_steps as f64 / total as f64;
            d.idle = d.idle_steps as f64 / total as f64;
        }
        d
    }

    pub fn total(&self) -> usize {
        self.charge_steps + self.discharge_steps + self.idle_steps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BehaviorMetrics {
    /// Charge/discharge reversals, with idle runs bridged.
    pub cycle_count: usize,
    /// Adjacent steps with strictly opposite power signs.
    pub flicker_count: usize,
    pub action_distribution: ActionDistribution,
}

pub fn behavioral_metrics(records: &[StepRecord]) -> BehaviorMetrics {
    metrics_from_powers(&records.iter().map(|r| r.applied_kw).collect::<Vec<_>>())
}

pub fn metrics_from_powers(powers: &[f64]) -> BehaviorMetrics {
    let signs: Vec<ActionKind> = powers.iter().map(|&p| ActionKind::of(p)).collect();
    let flicker_count = signs
        .windows(2)
        .filter(|w| matches!(w, [ActionKind::Charge, ActionKind::Discharge] | [ActionKind::Discharge, ActionKind::Charge]))
        .count();
    let mut cycle_count = 0;
    let mut last_active = None;
    for kind in signs.iter().copied().filter(|k| *k != ActionKind::Idle) {
        if last_active.is_some_and(|prev| prev != kind) {
            cycle_count += 1;
        }
        last_active = Some(kind);
    }
    BehaviorMetrics {
        cycle_count,
        flicker_count,
        action_distribution: ActionDistribution::from_powers(powers.iter().copied()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{FnPolicy, PolicyHandle};
    use crate::sim::test_support::observation;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn session(target: f64) -> ConnectionSession {
        ConnectionSession { arrival_step: 0, departure_step: 10, arrival_soc: 0.5, target_soc: target }
    }

    #[test]
    fn profit_examples() {
        assert_relative_eq!(step_profit(1.0, 0.0, 0.30, 0.30), -0.30);
        assert_relative_eq!(step_profit(0.0, 2.0, 0.40, 0.40), 0.80);
        assert_eq!(step_profit(0.0, 0.0, 0.40, 0.40), 0.0);
    }

    #[test]
    fn penalty_examples() {
        let cfg = RewardConfig::default();
        assert_eq!(departure_penalty(&session(0.8), 0.9, &cfg), 0.0);
        assert_eq!(departure_penalty(&session(0.8), 0.8, &cfg), 0.0);
        // 10 * 0.2 + (e^0.8 - 1) with e^0.8 = 2.225540928492468 (independent reference value)
        let expected = -(2.0 + (2.225_540_928_492_468 - 1.0));
        assert_relative_eq!(departure_penalty(&session(0.8), 0.6, &cfg), expected, epsilon = 1e-12);
        assert_relative_eq!(expected, -3.225_540_928_492_468, epsilon = 1e-12);
    }

    #[test]
    fn normalizer_guards() {
        let raw = RewardConfig::default();
        assert_eq!(raw.normalizer_for(0.5, 100.0), 1.0);
        let norm = RewardConfig { mode: RewardMode::Normalized, ..Default::default() };
        assert_eq!(norm.normalizer_for(0.5, 100.0), 50.0);
        assert_eq!(norm.normalizer_for(0.5, 0.0), 1.0);
        let fixed = RewardConfig { normalizer: Some(4.0), ..norm };
        assert_eq!(fixed.normalizer_for(0.5, 100.0), 4.0);
        assert!(RewardConfig { deficit_penalty_coeff: -1.0, ..Default::default() }.validate().is_err());
    }

    fn constant_policy(kw: f64) -> PolicyHandle {
        PolicyHandle::new(FnPolicy::new("const", move |_| Ok(kw)))
    }

    #[test]
    fn fit_tolerance_boundary() {
        let obs = observation(0.5, 0.2);
        let report = |kw| fit_score(&mut constant_policy(kw), &[(obs.clone(), 4.0)]).unwrap();
        assert_eq!(report(4.0).fit_score, 1.0);
        assert_eq!(report(4.4).n_matched, 1);
        assert_eq!(report(4.6).n_matched, 0);
        assert_eq!(report(4.5).n_matched, 1);
        assert_eq!(report(3.5).n_matched, 1);
        assert_eq!(report(4.5 + 1e-6).n_matched, 0);
        assert_eq!(report(f64::NAN).n_matched, 0);
        let mismatch = &report(4.6).mismatches[0];
        assert_eq!((mismatch.reference_kw, mismatch.policy_kw), (4.0, 4.6));
    }

    #[test]
    fn fit_requires_examples_and_reports_faults() {
        assert!(matches!(fit_score(&mut constant_policy(0.0), &[]), Err(FitError::NoExamples)));
        let mut faulty = PolicyHandle::new(FnPolicy::new("boom", |o: &Observation| {
            if o.soc > 0.6 { Err(PolicyFault::runtime("division by zero")) } else { Ok(0.0) }
        }));
        let examples = vec![(observation(0.5, 0.2), 0.0), (observation(0.7, 0.2), 0.0)];
        assert!(matches!(fit_score(&mut faulty, &examples), Err(FitError::PolicyFault { index: 1, .. })));
    }

    #[test]
    fn metrics_examples() {
        let m = metrics_from_powers(&[7.0, -7.0, 7.0]);
        assert_eq!((m.flicker_count, m.cycle_count), (2, 2));
        let m = metrics_from_powers(&[7.0, 0.0, -7.0]);
        assert_eq!((m.flicker_count, m.cycle_count), (0, 1));
        let m = metrics_from_powers(&[0.0; 5]);
        assert_eq!((m.flicker_count, m.cycle_count), (0, 0));
        assert_eq!(m.action_distribution.idle, 1.0);
        let m = metrics_from_powers(&[]);
        assert_eq!(m.action_distribution.total(), 0);
    }

    proptest! {
        #[test]
        fn penalty_non_increasing(a in 0.0f64..1.0, b in 0.0f64..1.0, target in 0.21f64..1.0) {
            let cfg = RewardConfig::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let s = session(target);
            prop_assert!(departure_penalty(&s, lo, &cfg) <= departure_penalty(&s, hi, &cfg));
            prop_assert!(departure_penalty(&s, hi, &cfg) <= 0.0);
        }

        #[test]
        fn fit_invariant_to_order(pairs in proptest::collection::vec((-7.0f64..7.0, -7.0f64..7.0), 1..30), rot in 0usize..30) {
            // Policy replies with the value stashed in the observation's load field.
            let examples: Vec<_> = pairs.iter().map(|&(policy, reference)| {
                let mut obs = observation(0.5, 0.2);
                obs.load_kw = policy;
                (obs, reference)
            }).collect();
            let mut rotated = examples.clone();
            rotated.rotate_left(rot % examples.len());
            let echo = || PolicyHandle::new(FnPolicy::new("echo", |o: &Observation| Ok(o.load_kw)));
            let a = fit_score(&mut echo(), &examples).unwrap();
            let b = fit_score(&mut echo(), &rotated).unwrap();
            prop_assert_eq!(a.fit_score, b.fit_score);
        }
    }
}
