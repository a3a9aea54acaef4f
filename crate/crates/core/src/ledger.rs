//! Expert trajectories turned into prompt-ready example corpora.
//!
//! A ledger holds one entry per simulated step in human-readable units
//! (SoC in percent, time to departure in minutes, power in kW). Entries are
//! tagged with a price/solar quadrant so a sample can be balanced across
//! operating regimes instead of being dominated by the most common one.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_data::lower_quantile;
use crate::rewards::{ActionDistribution, ActionKind};
use crate::sim::StepRecord;

pub const DEFAULT_SAMPLE_SIZE: usize = 1500;
pub const DEFAULT_SOLAR_SPLIT_KW: f64 = 0.1;

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("empty input")]
    EmptyInput,
    #[error("sample size must be at least 4, got {0}")]
    SampleTooSmall(usize),
    #[error("quadrant splits must be finite")]
    NonFiniteSplit,
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("CSV error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("JSON error in {path} line {line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("cannot infer ledger format from {0}; use .csv or .jsonl")]
    UnknownFormat(PathBuf),
}

/// Price/solar regime. Numbered 1 to 4 in exported files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Quadrant {
    LowPriceHighSolar,
    HighPriceNoSolar,
    LowPriceNoSolar,
    HighPriceHighSolar,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] =
        [Quadrant::LowPriceHighSolar, Quadrant::HighPriceNoSolar, Quadrant::LowPriceNoSolar, Quadrant::HighPriceHighSolar];

    pub fn number(self) -> u8 {
        self as u8 + 1
    }

    pub fn label(self) -> &'static str {
        match self {
            Quadrant::LowPriceHighSolar => "low price / high solar",
            Quadrant::HighPriceNoSolar => "high price / no solar",
            Quadrant::LowPriceNoSolar => "low price / no solar",
            Quadrant::HighPriceHighSolar => "high price / high solar",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl From<Quadrant> for u8 {
    fn from(q: Quadrant) -> u8 {
        q.number()
    }
}

impl TryFrom<u8> for Quadrant {
    type Error = String;

    fn try_from(n: u8) -> Result<Self, String> {
        match n {
            1..=4 => Ok(Quadrant::ALL[usize::from(n) - 1]),
            _ => Err(format!("quadrant must be 1-4, got {n}")),
        }
    }
}

/// Thresholds for quadrant tagging. A price at or below `price_split` is
/// "low"; PV below `solar_split` counts as "no solar".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadrantSpec {
    pub price_split: f64,
    pub solar_split: f64,
}

impl QuadrantSpec {
    pub fn new(price_split: f64, solar_split: f64) -> Result<Self, LedgerError> {
        if !(price_split.is_finite() && solar_split.is_finite()) {
            return Err(LedgerError::NonFiniteSplit);
        }
        Ok(Self { price_split, solar_split })
    }

    /// Price split at the (lower) median buy price of the records.
    pub fn median_of(records: &[StepRecord]) -> Result<Self, LedgerError> {
        let mut prices: Vec<f64> = records.iter().map(|r| r.observation.charge_price).collect();
        if prices.is_empty() {
            return Err(LedgerError::EmptyInput);
        }
        prices.sort_by(f64::total_cmp);
        Self::new(lower_quantile(&prices, 0.5), DEFAULT_SOLAR_SPLIT_KW)
    }

    pub fn classify(&self, price: f64, pv_kw: f64) -> Quadrant {
        let low_price = price <= self.price_split;
        let solar = pv_kw >= self.solar_split;
        match (low_price, solar) {
            (true, true) => Quadrant::LowPriceHighSolar,
            (false, false) => Quadrant::HighPriceNoSolar,
            (true, false) => Quadrant::LowPriceNoSolar,
            (false, true) => Quadrant::HighPriceHighSolar,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub step: usize,
    pub soc_pct: f64,
    pub charge_price: f64,
    pub discharge_price: f64,
    pub pv_kw: f64,
    pub load_kw: f64,
    pub ttd_min: f64,
    pub action_kw: f64,
    pub reward: f64,
    pub quadrant: Quadrant,
}

impl LedgerEntry {
    pub fn action_kind(&self) -> ActionKind {
        ActionKind::of(self.action_kw)
    }

    /// `{SoC: 45%, price: 0.18, PV: 2.1 kW, TTD: 120 min → action: +4.0 kW (charge)}`
    pub fn compact_line(&self) -> String {
        let kind = self.action_kind();
        let action = match kind {
            ActionKind::Idle => "0.0".to_string(),
            _ => format!("{:+.1}", self.action_kw),
        };
        format!(
            "{{SoC: {:.0}%, price: {:.2}, PV: {:.1} kW, TTD: {:.0} min → action: {} kW ({})}}",
            self.soc_pct,
            self.charge_price,
            self.pv_kw,
            self.ttd_min,
            action,
            kind.label()
        )
    }
}

/// One entry per record. Power units are already kW once a trace is loaded.
pub fn build_ledger(records: &[StepRecord], spec: &QuadrantSpec) -> Vec<LedgerEntry> {
    records
        .iter()
        .map(|r| {
            let o = &r.observation;
            LedgerEntry {
                step: o.step_index,
                soc_pct: (o.soc * 100.0).clamp(0.0, 100.0),
                charge_price: o.charge_price,
                discharge_price: o.discharge_price,
                pv_kw: o.pv_kw,
                load_kw: o.load_kw,
                ttd_min: o.ttd_minutes,
                action_kw: r.applied_kw,
                reward: r.step_reward,
                quadrant: spec.classify(o.charge_price, o.pv_kw),
            }
        })
        .collect()
}

/// Per-quadrant sample sizes. Each quadrant targets an equal share; a
/// quadrant that cannot fill its share gives everything it has, and the
/// shortfall is spread over the others in proportion to their current
/// targets (largest remainder, ties to the lower quadrant number).
pub fn quadrant_quotas(available: [usize; 4], n_total: usize) -> [usize; 4] {
    let mut quota = [n_total / 4; 4];
    for q in quota.iter_mut().take(n_total % 4) {
        *q += 1;
    }
    let mut fixed = [false; 4];
    loop {
        let mut shortfall = 0;
        for i in 0..4 {
            if !fixed[i] && available[i] <= quota[i] {
                shortfall += quota[i] - available[i];
                quota[i] = available[i];
                fixed[i] = true;
            }
        }
        let open: Vec<usize> = (0..4).filter(|&i| !fixed[i]).collect();
        if shortfall == 0 || open.is_empty() {
            return quota;
        }
        // Zero targets (tiny totals) fall back to equal weights.
        let uniform = open.iter().all(|&i| quota[i] == 0);
        let w = |i: usize| if uniform { 1 } else { quota[i] };
        let weight: usize = open.iter().map(|&i| w(i)).sum();
        let mut shares: Vec<(usize, usize, usize)> = open
            .iter()
            .map(|&i| {
                let exact = shortfall * w(i);
                (i, exact / weight, exact % weight)
            })
            .collect();
        let assigned: usize = shares.iter().map(|s| s.1).sum();
        shares.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0)));
        for (k, (i, base, _)) in shares.iter().enumerate() {
            quota[*i] += base + usize::from(k < shortfall - assigned);
        }
    }
}

/// Seeded, quadrant-balanced sample without replacement.
///
/// Output is grouped by quadrant (1 to 4) and chronological within each group.
pub fn quadrant_sample(entries: &[LedgerEntry], n_total: usize, seed: u64) -> Result<Vec<LedgerEntry>, LedgerError> {
    if entries.is_empty() {
        return Err(LedgerError::EmptyInput);
    }
    if n_total < 4 {
        return Err(LedgerError::SampleTooSmall(n_total));
    }
    let mut groups: [Vec<&LedgerEntry>; 4] = Default::default();
    for e in entries {
        groups[e.quadrant.index()].push(e);
    }
    for g in &mut groups {
        g.sort_by_key(|e| e.step);
    }
    let quotas = quadrant_quotas(groups.each_ref().map(Vec::len), n_total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(quotas.iter().sum());
    for (group, quota) in groups.iter().zip(quotas) {
        let mut picked = rand::seq::index::sample(&mut rng, group.len(), quota).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| group[i].clone()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderStyle {
    Compact,
    Narrative,
}

pub fn action_summary(entries: &[LedgerEntry]) -> String {
    let dist = ActionDistribution::from_powers(entries.iter().map(|e| e.action_kw));
    let n = entries.len();
    let pct = |count: usize| if n == 0 { 0.0 } else { 100.0 * count as f64 / n as f64 };
    let mut s = String::from("BASELINE BEHAVIOR SUMMARY:\n");
    let _ = writeln!(s, "Total examples: {n}");
    let _ = writeln!(s, "Charge actions: {} ({:.1}%)", dist.charge_steps, pct(dist.charge_steps));
    let _ = writeln!(s, "Discharge actions: {} ({:.1}%)", dist.discharge_steps, pct(dist.discharge_steps));
    let _ = writeln!(s, "Idle actions: {} ({:.1}%)", dist.idle_steps, pct(dist.idle_steps));
    s
}

pub fn render_examples(entries: &[LedgerEntry], style: RenderStyle) -> String {
    if entries.is_empty() {
        return String::new();
    }
    let mut s = match style {
        RenderStyle::Compact => String::new(),
        RenderStyle::Narrative => action_summary(entries) + "\nEXAMPLES:\n",
    };
    for e in entries {
        s.push_str(&e.compact_line());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LedgerFormat {
    Csv,
    Jsonl,
}

impl LedgerFormat {
    pub fn from_path(path: &Path) -> Result<Self, LedgerError> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(Self::Csv),
            Some("jsonl" | "ndjson") => Ok(Self::Jsonl),
            _ => Err(LedgerError::UnknownFormat(path.to_path_buf())),
        }
    }
}

/// CSV columns: `step,soc_pct,charge_price,discharge_price,pv_kw,load_kw,ttd_min,action_kw,reward,quadrant`.
/// JSONL uses the same keys, one object per line.
pub fn export_ledger(entries: &[LedgerEntry], path: &Path, format: LedgerFormat) -> Result<(), LedgerError> {
    let io_err = |source| LedgerError::Io { path: path.to_path_buf(), source };
    match format {
        LedgerFormat::Csv => {
            let csv_err = |source| LedgerError::Csv { path: path.to_path_buf(), source };
            let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
            for e in entries {
                w.serialize(e).map_err(csv_err)?;
            }
            w.flush().map_err(io_err)
        }
        LedgerFormat::Jsonl => {
            let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
            for (i, e) in entries.iter().enumerate() {
                let line = serde_json::to_string(e)
                    .map_err(|source| LedgerError::Json { path: path.to_path_buf(), line: i + 1, source })?;
                writeln!(w, "{line}").map_err(io_err)?;
            }
            w.flush().map_err(io_err)
        }
    }
}

pub fn import_ledger(path: &Path, format: LedgerFormat) -> Result<Vec<LedgerEntry>, LedgerError> {
    let io_err = |source| LedgerError::Io { path: path.to_path_buf(), source };
    match format {
        LedgerFormat::Csv => {
            let csv_err = |source| LedgerError::Csv { path: path.to_path_buf(), source };
            let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
            r.deserialize().collect::<Result<Vec<LedgerEntry>, _>>().map_err(csv_err)
        }
        LedgerFormat::Jsonl => {
            let reader = BufReader::new(File::open(path).map_err(io_err)?);
            let mut out = Vec::new();
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                out.push(
                    serde_json::from_str(&line)
                        .map_err(|source| LedgerError::Json { path: path.to_path_buf(), line: i + 1, source })?,
                );
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn entry(step: usize, quadrant: Quadrant, action_kw: f64) -> LedgerEntry {
        LedgerEntry {
            step,
            soc_pct: 45.0,
            charge_price: 0.18,
            discharge_price: 0.18,
            pv_kw: 2.1,
            load_kw: 0.5,
            ttd_min: 120.0,
            action_kw,
            reward: -0.01,
            quadrant,
        }
    }

    fn balanced(per_quadrant: usize) -> Vec<LedgerEntry> {
        (0..4 * per_quadrant).map(|i| entry(i, Quadrant::ALL[i % 4], 0.0)).collect()
    }

    #[test]
    fn compact_line_matches_exemplar() {
        let e = entry(0, Quadrant::LowPriceHighSolar, 4.0);
        assert_eq!(e.compact_line(), "{SoC: 45%, price: 0.18, PV: 2.1 kW, TTD: 120 min → action: +4.0 kW (charge)}");
        assert!(entry(0, Quadrant::LowPriceHighSolar, 0.0).compact_line().ends_with("action: 0.0 kW (idle)}"));
        assert!(entry(0, Quadrant::LowPriceHighSolar, -3.5).compact_line().ends_with("action: -3.5 kW (discharge)}"));
    }

    #[test]
    fn build_ledger_converts_units() {
        let mut obs = crate::sim::test_support::observation(0.45, 0.18);
        obs.pv_kw = 2.1;
        let record = StepRecord {
            observation: obs,
            requested_kw: 4.0,
            applied_kw: 4.0,
            soc_after: 0.46,
            grid_import_kwh: 0.3,
            grid_export_kwh: 0.0,
            step_cost: 0.054,
            step_reward: -0.054,
            clamp: None,
        };
        let spec = QuadrantSpec::new(0.2, 0.1).unwrap();
        let ledger = build_ledger(&[record], &spec);
        assert_eq!(ledger.len(), 1);
        assert_relative_eq!(ledger[0].soc_pct, 45.0);
        assert_eq!(ledger[0].ttd_min, 120.0);
        assert_eq!(ledger[0].quadrant, Quadrant::LowPriceHighSolar);
        assert_eq!(ledger[0].compact_line(), "{SoC: 45%, price: 0.18, PV: 2.1 kW, TTD: 120 min → action: +4.0 kW (charge)}");
    }

    #[test]
    fn classification_edges() {
        let spec = QuadrantSpec::new(0.2, 0.1).unwrap();
        assert_eq!(spec.classify(0.2, 0.1), Quadrant::LowPriceHighSolar);
        assert_eq!(spec.classify(0.21, 0.09), Quadrant::HighPriceNoSolar);
        assert_eq!(spec.classify(0.1, 0.0), Quadrant::LowPriceNoSolar);
        assert_eq!(spec.classify(0.5, 3.0), Quadrant::HighPriceHighSolar);
        assert!(QuadrantSpec::new(f64::NAN, 0.1).is_err());
    }

    #[test]
    fn even_split_gives_equal_shares() {
        let sample = quadrant_sample(&balanced(1000), 1500, 7).unwrap();
        assert_eq!(sample.len(), 1500);
        for q in Quadrant::ALL {
            assert_eq!(sample.iter().filter(|e| e.quadrant == q).count(), 375);
        }
        assert_eq!(sample, quadrant_sample(&balanced(1000), 1500, 7).unwrap());
        assert_ne!(sample, quadrant_sample(&balanced(1000), 1500, 8).unwrap());
    }

    #[test]
    fn shortfall_is_redistributed() {
        // 375 each; quadrant 2 has 10, so 365 spread over three shares of
        // 375: 121 each plus 2 leftover units to quadrants 1 and 3.
        assert_eq!(quadrant_quotas([1000, 10, 1000, 1000], 1500), [497, 10, 497, 496]);
        assert_eq!(quadrant_quotas([1, 1, 1, 1], 4), [1, 1, 1, 1]);
        assert_eq!(quadrant_quotas([0, 0, 0, 5], 100), [0, 0, 0, 5]);
        assert_eq!(quadrant_quotas([100, 100, 100, 100], 6), [2, 2, 1, 1]);
        assert_eq!(quadrant_quotas([0, 5, 5, 5], 1), [0, 1, 0, 0]);
        // A cascade: the second pass pushes quadrant 3 short as well.
        assert_eq!(quadrant_quotas([1000, 0, 30, 1000], 100), [36, 0, 30, 34]);
    }

    #[test]
    fn sample_order_and_errors() {
        let mut entries = balanced(50);
        entries.reverse();
        let sample = quadrant_sample(&entries, 4, 1).unwrap();
        assert_eq!(sample.iter().map(|e| e.quadrant.number()).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        let big = quadrant_sample(&entries, 40, 1).unwrap();
        assert!(big.windows(2).all(|w| (w[0].quadrant, w[0].step) < (w[1].quadrant, w[1].step)));
        assert!(matches!(quadrant_sample(&[], 1500, 1), Err(LedgerError::EmptyInput)));
        assert!(matches!(quadrant_sample(&entries, 3, 1), Err(LedgerError::SampleTooSmall(3))));
    }

    #[test]
    fn narrative_header_percentages() {
        let mut entries = Vec::new();
        entries.extend((0..630).map(|i| entry(i, Quadrant::LowPriceHighSolar, 7.0)));
        entries.extend((0..345).map(|i| entry(i, Quadrant::HighPriceNoSolar, -7.0)));
        entries.extend((0..525).map(|i| entry(i, Quadrant::LowPriceNoSolar, 0.0)));
        let text = render_examples(&entries, RenderStyle::Narrative);
        assert!(text.starts_with(
            "BASELINE BEHAVIOR SUMMARY:\nTotal examples: 1500\nCharge actions: 630 (42.0%)\nDischarge actions: 345 (23.0%)\nIdle actions: 525 (35.0%)\n"
        ));
        assert_eq!(text.lines().filter(|l| l.starts_with("{SoC")).count(), 1500);
    }

    #[test]
    fn compact_rendering_edges() {
        assert_eq!(render_examples(&[], RenderStyle::Narrative), "");
        let one = render_examples(&[entry(0, Quadrant::LowPriceHighSolar, 4.0)], RenderStyle::Compact);
        assert_eq!(one.lines().count(), 1);
        assert!(!one.contains("SUMMARY"));
    }

    #[test]
    fn csv_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.csv");
        let entries: Vec<_> = (0..3).map(|i| entry(i, Quadrant::ALL[i], i as f64)).collect();
        export_ledger(&entries, &path, LedgerFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "step,soc_pct,charge_price,discharge_price,pv_kw,load_kw,ttd_min,action_kw,reward,quadrant");
        assert_eq!(lines.count(), 3);
        assert_eq!(import_ledger(&path, LedgerFormat::Csv).unwrap(), entries);
    }

    #[test]
    fn jsonl_one_object_per_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        let entries: Vec<_> = (0..3).map(|i| entry(i, Quadrant::ALL[i], -(i as f64))).collect();
        export_ledger(&entries, &path, LedgerFormat::from_path(&path).unwrap()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with(r#"{"step":0,"soc_pct":45.0,"#));
        assert!(text.lines().next().unwrap().ends_with(r#""quadrant":1}"#));
        assert_eq!(import_ledger(&path, LedgerFormat::Jsonl).unwrap(), entries);
        assert!(LedgerFormat::from_path(Path::new("x.parquet")).is_err());
    }

    fn arb_entry() -> impl Strategy<Value = LedgerEntry> {
        (0usize..100_000, 0.0f64..=100.0, 0.0f64..2.0, 0.0f64..2.0, 0.0f64..10.0, -7.0f64..7.0, -5.0f64..5.0, 0u8..4).prop_map(
            |(step, soc_pct, cp, dp, pv, kw, reward, q)| LedgerEntry {
                step,
                soc_pct,
                charge_price: cp,
                discharge_price: dp,
                pv_kw: pv,
                load_kw: pv / 2.0,
                ttd_min: 5.0 * step as f64,
                action_kw: kw,
                reward,
                quadrant: Quadrant::ALL[usize::from(q)],
            },
        )
    }

    proptest! {
        #[test]
        fn csv_round_trip(entries in prop::collection::vec(arb_entry(), 0..20)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("l.csv");
            export_ledger(&entries, &path, LedgerFormat::Csv).unwrap();
            let back = import_ledger(&path, LedgerFormat::Csv).unwrap();
            prop_assert_eq!(back.len(), entries.len());
            for (a, b) in back.iter().zip(&entries) {
                prop_assert_eq!(a.step, b.step);
                prop_assert_eq!(a.quadrant, b.quadrant);
                prop_assert!((a.action_kw - b.action_kw).abs() <= 1e-9);
                prop_assert!((a.reward - b.reward).abs() <= 1e-9);
                prop_assert!((a.soc_pct - b.soc_pct).abs() <= 1e-9);
            }
        }

        #[test]
        fn sample_properties(
            counts in prop::array::uniform4(0usize..200),
            n_total in 4usize..600,
            seed in any::<u64>(),
        ) {
            let mut entries = Vec::new();
            for (qi, &c) in counts.iter().enumerate() {
                entries.extend((0..c).map(|k| entry(k * 4 + qi, Quadrant::ALL[qi], 0.0)));
            }
            prop_assume!(!entries.is_empty());
            let sample = quadrant_sample(&entries, n_total, seed).unwrap();
            let total: usize = counts.iter().sum();
            prop_assert_eq!(sample.len(), n_total.min(total));
            let mut steps: Vec<usize> = sample.iter().map(|e| e.step).collect();
            steps.sort_unstable();
            steps.dedup();
            prop_assert_eq!(steps.len(), sample.len(), "no duplicates");
            let per_q: Vec<usize> = Quadrant::ALL.iter().map(|&q| sample.iter().filter(|e| e.quadrant == q).count()).collect();
            if counts.iter().all(|&c| c >= n_total) {
                let (lo, hi) = (per_q.iter().min().unwrap(), per_q.iter().max().unwrap());
                prop_assert!(hi - lo <= 1);
            }
            prop_assert_eq!(&sample, &quadrant_sample(&entries, n_total, seed).unwrap());
        }
    }
}
