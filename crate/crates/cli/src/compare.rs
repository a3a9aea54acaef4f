//! Side-by-side comparison of two episode summaries.

use std::fmt::Write as _;

use v2g_core::sim::EpisodeSummary;

/// Candidate reward as a percentage of the baseline's. Defined only when the
/// baseline is non-zero and both rewards share its sign.
pub fn relative_performance(candidate: f64, baseline: f64) -> Option<f64> {
    if baseline == 0.0 || !candidate.is_finite() || !baseline.is_finite() {
        return None;
    }
    let same_sign = candidate == 0.0 || candidate.signum() == baseline.signum();
    same_sign.then(|| 100.0 * candidate / baseline)
}

/// Why two summaries cannot be compared, if they cannot.
pub fn window_mismatch(a: &EpisodeSummary, b: &EpisodeSummary) -> Option<String> {
    let (wa, wb) = (&a.window, &b.window);
    if wa.trace_digest != wb.trace_digest {
        return Some(format!("trace digests differ ({} vs {})", wa.trace_digest, wb.trace_digest));
    }
    if (wa.start_step, wa.n_steps) != (wb.start_step, wb.n_steps) {
        return Some(format!(
            "windows differ (start {} / {} steps vs start {} / {} steps)",
            wa.start_step, wa.n_steps, wb.start_step, wb.n_steps
        ));
    }
    if a.reward_mode != b.reward_mode {
        return Some(format!("reward modes differ ({:?} vs {:?})", a.reward_mode, b.reward_mode));
    }
    None
}

/// Table of the headline numbers; `a` is treated as the baseline.
pub fn render(a: &EpisodeSummary, b: &EpisodeSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<22}{:>16}{:>16}", "", a.policy, b.policy);
    let mut row = |label: &str, x: String, y: String| {
        let _ = writeln!(out, "{label:<22}{x:>16}{y:>16}");
    };
    row("total reward", format!("{:.4}", a.total_reward), format!("{:.4}", b.total_reward));
    row("profit", format!("{:.4}", a.total_profit), format!("{:.4}", b.total_profit));
    row("departure penalty", format!("{:.4}", a.total_penalty), format!("{:.4}", b.total_penalty));
    row("import kWh", format!("{:.2}", a.total_import_kwh), format!("{:.2}", b.total_import_kwh));
    row("export kWh", format!("{:.2}", a.total_export_kwh), format!("{:.2}", b.total_export_kwh));
    row("cycles", a.metrics.cycle_count.to_string(), b.metrics.cycle_count.to_string());
    row("flicker", a.metrics.flicker_count.to_string(), b.metrics.flicker_count.to_string());
    row("soc violations", a.soc_violations.to_string(), b.soc_violations.to_string());
    row("faults", a.faults.len().to_string(), b.faults.len().to_string());
    let delta = b.total_reward - a.total_reward;
    match relative_performance(b.total_reward, a.total_reward) {
        Some(pct) => {
            let _ = writeln!(out, "relative performance: {pct:.1}% of {} (delta {delta:+.4})", a.policy);
        }
        None => {
            let _ = writeln!(out, "relative performance: undefined (delta {delta:+.4})");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_of_rewards() {
        let pct = relative_performance(3.15, 2.66).unwrap();
        assert_eq!(format!("{pct:.1}"), "118.4");
        assert_eq!(relative_performance(-1.0, -2.0), Some(50.0));
        assert_eq!(relative_performance(0.0, 4.0), Some(0.0));
    }

    #[test]
    fn undefined_cases() {
        assert_eq!(relative_performance(1.0, 0.0), None);
        assert_eq!(relative_performance(1.0, -2.0), None);
        assert_eq!(relative_performance(-1.0, 2.0), None);
        assert_eq!(relative_performance(f64::NAN, 2.0), None);
    }
}
