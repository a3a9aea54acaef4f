//! Prompt, evaluate and repair loop for synthesizing policies.
//!
//! Each iteration builds a strategy-specific prompt, asks a
//! [`MutationOperator`] for a program, extracts and instantiates it, runs a
//! guarded episode, scores it against the baseline examples and turns the
//! result into feedback for the next prompt. The best iteration is picked by
//! total reward, or by fit for the imitation strategy.

pub mod extract;
pub mod feedback;
pub mod operator;
pub mod prompt;
pub mod runtime;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use extract::{extract_program, ExtractionFailure};
pub use feedback::{make_feedback, FeedbackConfig, FeedbackSummary, Issue, IssueKind};
pub use operator::{
    complete_with_retry, FnOperator, HttpChatOperator, HttpConfig, MockReply, MutationOperator, OperatorError, OperatorUsage,
    RetryPolicy, ScriptedMock,
};
pub use prompt::{build_prompt, PromptBundle, PromptError, PromptInputs, ThresholdHints, SIGNATURE_BLOCK};
pub use runtime::{run_runtime_agent, RuntimeConfig, RuntimeDecision, RuntimeRun};

use crate::baseline::BaselineConfig;
use crate::ledger::{build_ledger, export_ledger, quadrant_sample, LedgerEntry, LedgerError, LedgerFormat, QuadrantSpec};
use crate::market_data::{EnvTrace, MarketDataError, TraceStats};
use crate::policy::{
    guardrail_wrap, ExternalCommand, InstantiateError, PolicyHandle, PolicyProgram, PolicyRegistry, ProgramMetadata, ProgramMode,
};
use crate::rewards::{fit_score, FitReport};
use crate::sim::{
    run_episode, write_json, write_step_log, BatteryConfig, ConnectionSession, EpisodeConfig, EpisodeReport, EpisodeSummary, Observation,
    SimError, StepRecord,
};

pub const DEFAULT_ITERATIONS: usize = 10;

/// Reads one request per line and answers with `decide_power(...)`.
/// Appended to Python candidates so they speak the line protocol.
pub const PYTHON_HARNESS: &str = r#"

# --- line protocol harness ---
import json as _json
import math as _math
import sys as _sys


def _serve():
    hello = _json.loads(_sys.stdin.readline() or "{}")
    if hello.get("protocol") != "v2g-policy/1":
        _sys.exit("unsupported protocol")
    while True:
        line = _sys.stdin.readline()
        if not line:
            break
        msg = _json.loads(line)
        if msg.get("end"):
            break
        try:
            kw = float(decide_power(msg["charge_price"], msg["discharge_price"], msg["soc"], msg["ttd"],
                                    msg["load_kw"], msg["pv_kw"], msg["max_charge_kw"], msg["max_discharge_kw"]))
        except Exception as exc:
            print("decide_power raised: %r" % (exc,), file=_sys.stderr, flush=True)
            kw = float("nan")
        _sys.stdout.write((repr(kw) if _math.isfinite(kw) else "nan") + "\n")
        _sys.stdout.flush()


if __name__ == "__main__":
    _serve()
"#;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Reasoning,
    Imitation,
    Hybrid,
    Runtime,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [StrategyKind::Reasoning, StrategyKind::Imitation, StrategyKind::Hybrid, StrategyKind::Runtime];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Reasoning => "reasoning",
            StrategyKind::Imitation => "imitation",
            StrategyKind::Hybrid => "hybrid",
            StrategyKind::Runtime => "runtime",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown strategy `{s}` (expected reasoning, imitation, hybrid or runtime)"))
    }
}

#[derive(Debug, Error)]
pub enum EvolveError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Market(#[from] MarketDataError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("baseline policy: {0}")]
    Baseline(InstantiateError),
    #[error("invalid evolution config: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Simulation inputs shared by every candidate.
#[derive(Debug, Clone)]
pub struct EnvBundle {
    pub trace: EnvTrace,
    pub sessions: Vec<ConnectionSession>,
    pub battery: BatteryConfig,
    pub baseline: BaselineConfig,
    pub episode: EpisodeConfig,
}

impl EnvBundle {
    pub fn registry(&self) -> PolicyRegistry {
        PolicyRegistry::new(self.battery, self.baseline)
    }

    pub fn run(&self, handle: &mut PolicyHandle) -> Result<EpisodeReport, SimError> {
        run_episode(&self.trace, &self.sessions, &self.battery, handle, &self.episode)
    }

    pub fn window_stats(&self) -> Result<TraceStats, MarketDataError> {
        let start = self.episode.start_step;
        let end = (start + self.episode.n_steps).min(self.trace.len());
        TraceStats::from_points(&self.trace.points()[start..end])
    }
}

fn default_program_mode() -> ProgramMode {
    ProgramMode::BuiltinRules
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolveConfig {
    pub strategy: StrategyKind,
    pub n_iterations: usize,
    pub seed: u64,
    pub sample_size: usize,
    pub solar_split_kw: f64,
    #[serde(default = "default_program_mode")]
    pub program_mode: ProgramMode,
    /// Command for external candidates; `{policy}` becomes the source path.
    pub external_command: Option<ExternalCommand>,
    /// Append [`PYTHON_HARNESS`] to external candidates.
    pub python_harness: bool,
    pub external_timeout_ms: u64,
    /// Candidates below this fit are never selected.
    pub min_fit: Option<f64>,
    pub retry: RetryPolicy,
    pub feedback: FeedbackConfig,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        Self {
            strategy: StrategyKind::Hybrid,
            n_iterations: DEFAULT_ITERATIONS,
            seed: 0,
            sample_size: crate::ledger::DEFAULT_SAMPLE_SIZE,
            solar_split_kw: crate::ledger::DEFAULT_SOLAR_SPLIT_KW,
            program_mode: ProgramMode::BuiltinRules,
            external_command: None,
            python_harness: true,
            external_timeout_ms: 1000,
            min_fit: None,
            retry: RetryPolicy::default(),
            feedback: FeedbackConfig::default(),
        }
    }
}

impl EvolveConfig {
    pub fn validate(&self) -> Result<(), EvolveError> {
        let bad = |m: &str| Err(EvolveError::Config(m.to_string()));
        if self.n_iterations == 0 {
            return bad("n_iterations must be at least 1");
        }
        if self.sample_size < 4 {
            return bad("sample_size must be at least 4");
        }
        if self.program_mode == ProgramMode::RegisteredNative {
            return bad("candidates must be rule scripts or external programs");
        }
        if self.min_fit.is_some_and(|f| !(0.0..=1.0).contains(&f)) {
            return bad("min_fit must be in [0, 1]");
        }
        Ok(())
    }

    fn registry(&self, env: &EnvBundle) -> PolicyRegistry {
        let mut registry = env.registry();
        registry.external_command = Some(self.external_command.clone().unwrap_or_else(|| ExternalCommand::new("python3", ["{policy}"])));
        registry.external_timeout = Some(Duration::from_millis(self.external_timeout_ms));
        registry
    }

    /// The program as it is actually run.
    fn runnable(&self, program: &PolicyProgram) -> PolicyProgram {
        let mut p = program.clone();
        if p.mode == ProgramMode::ExternalProcess && self.python_harness {
            p.source_text.push_str(PYTHON_HARNESS);
        }
        p
    }
}

/// Baseline demonstrations shared by every iteration of a run.
#[derive(Debug, Clone)]
pub struct Demonstrations {
    pub baseline: EpisodeReport,
    pub quadrants: QuadrantSpec,
    /// Quadrant-balanced sample of plugged-in baseline steps.
    pub examples: Vec<LedgerEntry>,
    /// The same steps as full observations with the baseline's action.
    pub fit_examples: Vec<(Observation, f64)>,
    pub thresholds: Option<ThresholdHints>,
    pub stats: TraceStats,
}

pub fn demonstrations(env: &EnvBundle, sample_size: usize, solar_split_kw: f64, seed: u64) -> Result<Demonstrations, EvolveError> {
    let mut handle = env.registry().native("baseline").map_err(EvolveError::Baseline)?;
    let baseline = env.run(&mut handle)?;
    let mut quadrants = QuadrantSpec::median_of(&baseline.records)?;
    quadrants.solar_split = solar_split_kw;
    let plugged: Vec<StepRecord> = baseline.records.iter().filter(|r| r.observation.plugged_in).cloned().collect();
    if plugged.is_empty() {
        return Err(EvolveError::Config("the vehicle is never plugged in during the episode window".into()));
    }
    let examples = quadrant_sample(&build_ledger(&plugged, &quadrants), sample_size, seed)?;
    let fit_examples = examples
        .iter()
        .map(|e| {
            let r = plugged.iter().find(|r| r.observation.step_index == e.step).expect("sampled from these records");
            (r.observation.clone(), r.applied_kw)
        })
        .collect();
    Ok(Demonstrations {
        thresholds: ThresholdHints::from_examples(&examples),
        stats: env.window_stats()?,
        baseline,
        quadrants,
        examples,
        fit_examples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationStatus {
    Evaluated,
    /// Evaluated, but the episode stopped after repeated policy faults.
    Aborted,
    OperatorFailed,
    ExtractionFailed,
    InvalidProgram,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub n_examples: usize,
    pub n_matched: usize,
    pub fit_score: f64,
}

impl From<&FitReport> for FitSummary {
    fn from(r: &FitReport) -> Self {
        Self { n_examples: r.n_examples, n_matched: r.n_matched, fit_score: r.fit_score }
    }
}

/// One pass of the loop. Prompt, reply and step log are kept in memory and
/// written as separate artifact files rather than inside `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based.
    pub iteration: usize,
    pub status: IterationStatus,
    pub error: Option<String>,
    pub program: Option<PolicyProgram>,
    pub summary: Option<EpisodeSummary>,
    pub fit: Option<FitSummary>,
    /// Value compared during selection, when the iteration is eligible.
    pub criterion: Option<f64>,
    pub feedback: FeedbackSummary,
    #[serde(skip)]
    pub prompt: PromptBundle,
    #[serde(skip)]
    pub reply: Option<String>,
    #[serde(skip)]
    pub records: Vec<StepRecord>,
}

impl IterationRecord {
    pub fn total_reward(&self) -> Option<f64> {
        self.summary.as_ref().map(|s| s.total_reward)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub total_reward: f64,
    pub n_examples: usize,
    pub price_split: f64,
    pub thresholds: Option<ThresholdHints>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionRun {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub config: EvolveConfig,
    pub operator: String,
    pub usage: OperatorUsage,
    pub baseline: BaselineSummary,
    pub iterations: Vec<IterationRecord>,
    /// 0-based index into `iterations`; `None` when nothing was eligible.
    pub best_index: Option<usize>,
}

impl EvolutionRun {
    pub fn best(&self) -> Option<&IterationRecord> {
        self.best_index.map(|i| &self.iterations[i])
    }
}

/// Index of the eligible iteration with the largest criterion; ties go to
/// the earliest.
pub fn select_best(iterations: &[IterationRecord]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, it) in iterations.iter().enumerate() {
        if let Some(c) = it.criterion {
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((i, c));
            }
        }
    }
    best.map(|(i, _)| i)
}

fn criterion(cfg: &EvolveConfig, it: &IterationRecord) -> Option<f64> {
    if it.status != IterationStatus::Evaluated {
        return None;
    }
    let fit = it.fit.map(|f| f.fit_score);
    if let Some(min) = cfg.min_fit {
        if !fit.is_some_and(|f| f >= min) {
            return None;
        }
    }
    match cfg.strategy {
        StrategyKind::Imitation => fit,
        _ => it.total_reward(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvolveError + '_ {
    move |source| EvolveError::Io { path: path.to_path_buf(), source }
}

fn write_text(path: &Path, text: &str) -> Result<(), EvolveError> {
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn iteration_dir(root: &Path, iteration: usize) -> PathBuf {
    root.join(format!("iter_{iteration}"))
}

/// `iter_<k>/{prompt.txt, reply.txt, policy.txt, report.json, steps.jsonl, feedback.txt}`;
/// files are only written for the stages the iteration reached.
pub fn write_iteration(root: &Path, it: &IterationRecord) -> Result<(), EvolveError> {
    let dir = iteration_dir(root, it.iteration);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_text(&dir.join("prompt.txt"), &it.prompt.render())?;
    if let Some(reply) = &it.reply {
        write_text(&dir.join("reply.txt"), reply)?;
    }
    if let Some(p) = &it.program {
        write_text(&dir.join("policy.txt"), &p.source_text)?;
    }
    if let Some(summary) = &it.summary {
        write_json(&dir.join("report.json"), summary)?;
        write_step_log(&dir.join("steps.jsonl"), &it.records)?;
    }
    write_text(&dir.join("feedback.txt"), &it.feedback.render())
}

struct Evaluation {
    report: EpisodeReport,
    fit: Option<FitReport>,
    fit_note: Option<String>,
}

fn evaluate(
    env: &EnvBundle,
    registry: &PolicyRegistry,
    runnable: &PolicyProgram,
    fit_examples: &[(Observation, f64)],
) -> Result<Result<Evaluation, InstantiateError>, EvolveError> {
    let handle = match registry.instantiate(runnable, None) {
        Ok(h) => h,
        Err(e) => return Ok(Err(e)),
    };
    let mut handle = guardrail_wrap(handle, env.battery);
    let report = env.run(&mut handle)?;
    drop(handle);

    // A fresh instance so program-side state from the episode cannot leak in.
    let (fit, fit_note) = match registry.instantiate(runnable, None) {
        Ok(h) => match fit_score(&mut guardrail_wrap(h, env.battery), fit_examples) {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(format!("Fit could not be measured: {e}."))),
        },
        Err(e) => (None, Some(format!("Fit could not be measured: {e}."))),
    };
    Ok(Ok(Evaluation { report, fit, fit_note }))
}

/// Runs `cfg.n_iterations` iterations. With `out_dir`, artifacts are written
/// as each iteration finishes and `run.json` at the end.
pub fn run_evolution(
    env: &EnvBundle,
    operator: &mut dyn MutationOperator,
    cfg: &EvolveConfig,
    out_dir: Option<&Path>,
) -> Result<EvolutionRun, EvolveError> {
    cfg.validate()?;
    if cfg.strategy == StrategyKind::Runtime {
        return Err(EvolveError::Config("use run_runtime_agent for the runtime strategy".into()));
    }
    let demos = demonstrations(env, cfg.sample_size, cfg.solar_split_kw, cfg.seed)?;
    if let Some(root) = out_dir {
        std::fs::create_dir_all(root).map_err(io_err(root))?;
        export_ledger(&demos.examples, &root.join("examples.csv"), LedgerFormat::Csv)?;
        demos.baseline.write_to_dir(&root.join("baseline"))?;
    }
    let registry = cfg.registry(env);
    let shows_fit = matches!(cfg.strategy, StrategyKind::Imitation | StrategyKind::Hybrid);

    let mut iterations: Vec<IterationRecord> = Vec::with_capacity(cfg.n_iterations);
    let mut prior: Option<PolicyProgram> = None;
    let mut feedback: Option<FeedbackSummary> = None;
    for k in 1..=cfg.n_iterations {
        let prompt = build_prompt(&PromptInputs {
            strategy: cfg.strategy,
            iteration: k,
            examples: &demos.examples,
            trace_stats: Some(&demos.stats),
            thresholds: demos.thresholds,
            prior: prior.as_ref(),
            feedback: feedback.as_ref(),
            battery: &env.battery,
            program_mode: cfg.program_mode,
        })?;
        let mut it = IterationRecord {
            iteration: k,
            status: IterationStatus::OperatorFailed,
            error: None,
            program: None,
            summary: None,
            fit: None,
            criterion: None,
            feedback: FeedbackSummary::note_only(k, ""),
            prompt,
            reply: None,
            records: Vec::new(),
        };

        it.feedback = match complete_with_retry(operator, &it.prompt, &cfg.retry) {
            Err(e) => {
                it.error = Some(e.to_string());
                FeedbackSummary::note_only(k, format!("The previous request failed ({e}). Write the complete program."))
            }
            Ok(reply) => {
                let extracted = extract_program(&reply, cfg.program_mode, &format!("{}-iter-{k}", cfg.strategy));
                it.reply = Some(reply);
                match extracted {
                    Err(failure) => {
                        it.status = IterationStatus::ExtractionFailed;
                        it.error = Some(failure.reason);
                        FeedbackSummary::note_only(
                            k,
                            "Your reply had no code block. Regenerate the complete program inside one fenced code block.",
                        )
                    }
                    Ok(mut program) => {
                        program.metadata = ProgramMetadata {
                            origin_iteration: Some(k),
                            parent: prior.as_ref().map(|p| p.name.clone()),
                            strategy: Some(cfg.strategy.to_string()),
                        };
                        let outcome = evaluate(env, &registry, &cfg.runnable(&program), &demos.fit_examples)?;
                        it.program = Some(program.clone());
                        prior = Some(program);
                        match outcome {
                            Err(e) => {
                                it.status = IterationStatus::InvalidProgram;
                                it.error = Some(e.to_string());
                                FeedbackSummary::note_only(k, format!("The program was rejected: {e}. Fix it and return the complete program."))
                            }
                            Ok(ev) => {
                                it.status = if ev.report.summary.aborted.is_some() {
                                    IterationStatus::Aborted
                                } else {
                                    IterationStatus::Evaluated
                                };
                                it.fit = ev.fit.as_ref().map(FitSummary::from);
                                let mut fb =
                                    make_feedback(k, &ev.report, ev.fit.as_ref().filter(|_| shows_fit), &cfg.feedback);
                                if shows_fit {
                                    fb.notes.extend(ev.fit_note);
                                }
                                it.summary = Some(ev.report.summary);
                                it.records = ev.report.records;
                                fb
                            }
                        }
                    }
                }
            }
        };
        it.criterion = criterion(cfg, &it);
        if let Some(root) = out_dir {
            write_iteration(root, &it)?;
        }
        feedback = Some(it.feedback.clone());
        iterations.push(it);
    }

    let run = EvolutionRun {
        strategy: cfg.strategy,
        seed: cfg.seed,
        config: cfg.clone(),
        operator: operator.name().to_string(),
        usage: operator.usage(),
        baseline: BaselineSummary {
            total_reward: demos.baseline.summary.total_reward,
            n_examples: demos.examples.len(),
            price_split: demos.quadrants.price_split,
            thresholds: demos.thresholds,
        },
        best_index: select_best(&iterations),
        iterations,
    };
    if let Some(root) = out_dir {
        write_json(&root.join("run.json"), &run)?;
    }
    Ok(run)
}
