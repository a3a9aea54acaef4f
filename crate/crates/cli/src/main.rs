//! `v2g`: simulate charging policies, build demonstration ledgers, run the
//! policy-evolution loop and compare results.

mod compare;
mod config;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use v2g_core::evolve::{
    run_evolution, run_runtime_agent, EvolutionRun, HttpChatOperator, IterationStatus, MutationOperator, ScriptedMock, StrategyKind,
    PYTHON_HARNESS,
};
use v2g_core::ledger::{build_ledger, export_ledger, quadrant_sample, render_examples, LedgerFormat, QuadrantSpec, RenderStyle};
use v2g_core::policy::{spawn_external_policy, ExternalCommand};
use v2g_core::sim::{read_step_log, read_summary, EpisodeReport, StepRecord};
use v2g_core::{guardrail_wrap, PolicyHandle, PolicyProgram, ProgramMode};

use config::{OperatorKind, RunConfig, SessionMode};

const EXIT_VALIDATION: u8 = 1;
const EXIT_POLICY_FAULT: u8 = 2;
const EXIT_OPERATOR: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "v2g", version, about = "Residential EV charging simulator and policy-evolution driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one episode with a policy and write its report.
    Simulate(SimulateArgs),
    /// Build a quadrant-balanced example ledger from a step log.
    Ledger(LedgerArgs),
    /// Run the evolution loop (or the online agent for `--strategy runtime`).
    Evolve(EvolveArgs),
    /// Compare two episode reports; the first is the reference.
    Compare(CompareArgs),
    /// Export a step log as plot-ready CSV.
    PlotData(PlotDataArgs),
}

#[derive(Debug, Args)]
struct EnvArgs {
    /// TOML run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Trace CSV (overrides the config).
    #[arg(long, conflicts_with = "synthetic")]
    trace: Option<PathBuf>,
    /// Synthetic trace, e.g. "days=7 seed=1".
    #[arg(long)]
    synthetic: Option<String>,
    #[arg(long)]
    start: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    sessions: Option<SessionArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SessionArg {
    Home,
    Always,
}

impl EnvArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(path) = &self.trace {
            cfg.trace.path = Some(path.clone());
            cfg.trace.synthetic = None;
        }
        if let Some(spec) = &self.synthetic {
            cfg.trace.path = None;
            cfg.trace.synthetic = Some(spec.clone());
        }
        if let Some(start) = self.start {
            cfg.episode.start_step = start;
        }
        if let Some(steps) = self.steps {
            cfg.episode.n_steps = Some(steps);
        }
        if let Some(mode) = self.sessions {
            cfg.sessions.mode = match mode {
                SessionArg::Home => SessionMode::Home,
                SessionArg::Always => SessionMode::Always,
            };
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    env: EnvArgs,
    /// `baseline`, `idle`, a rule script, or a `.py` file defining `decide_power`.
    #[arg(long, default_value = "baseline", conflicts_with = "exec")]
    policy: String,
    /// External line-protocol policy command, e.g. "./my-policy --fast".
    #[arg(long)]
    exec: Option<String>,
    /// Per-step reply timeout for external policies.
    #[arg(long, default_value_t = 1000)]
    timeout_ms: u64,
    /// Directory for report.json, steps.jsonl and config.toml.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RenderArg {
    Compact,
    Narrative,
}

#[derive(Debug, Args)]
struct LedgerArgs {
    /// steps.jsonl, or a directory containing one.
    #[arg(long)]
    from: PathBuf,
    /// Sample size.
    #[arg(long, short, default_value_t = v2g_core::ledger::DEFAULT_SAMPLE_SIZE)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = v2g_core::ledger::DEFAULT_SOLAR_SPLIT_KW)]
    solar_split: f64,
    /// Keep steps where the vehicle is away.
    #[arg(long)]
    all_steps: bool,
    /// Output file; `.csv` or `.jsonl`.
    #[arg(long)]
    out: PathBuf,
    /// Also print the sample as prompt text.
    #[arg(long, value_enum)]
    render: Option<RenderArg>,
}

#[derive(Debug, Args)]
struct EvolveArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long)]
    strategy: Option<StrategyKind>,
    #[arg(long)]
    iters: Option<usize>,
    /// `mock:replies.jsonl` or `http`.
    #[arg(long)]
    operator: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Candidates below this fit score are never selected.
    #[arg(long)]
    min_fit: Option<f64>,
    /// Steps between queries for the runtime strategy.
    #[arg(long)]
    cadence: Option<usize>,
    /// Ask for Python programs run as external processes instead of rule scripts.
    #[arg(long)]
    python: bool,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Reference report (report.json or its directory).
    a: PathBuf,
    /// Candidate report.
    b: PathBuf,
}

#[derive(Debug, Args)]
struct PlotDataArgs {
    /// steps.jsonl, or a directory containing one.
    #[arg(long)]
    from: PathBuf,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(&a),
        Command::Ledger(a) => ledger(&a),
        Command::Evolve(a) => evolve(&a),
        Command::Compare(a) => compare_cmd(&a),
        Command::PlotData(a) => plot_data(&a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_VALIDATION)
        }
    }
}

fn in_dir(path: &Path, file: &str) -> PathBuf {
    if path.is_dir() {
        path.join(file)
    } else {
        path.to_path_buf()
    }
}

fn policy_handle(args: &SimulateArgs, cfg: &RunConfig, env: &v2g_core::evolve::EnvBundle) -> Result<PolicyHandle> {
    let timeout = Duration::from_millis(args.timeout_ms);
    if let Some(line) = &args.exec {
        let cmd = ExternalCommand::parse(line)?;
        return Ok(spawn_external_policy(&cmd, timeout)?);
    }
    let registry = env.registry();
    if v2g_core::policy::REGISTERED_POLICIES.contains(&args.policy.as_str()) {
        return Ok(registry.native(&args.policy)?);
    }
    let path = Path::new(&args.policy);
    let source = std::fs::read_to_string(path).with_context(|| format!("reading policy {}", path.display()))?;
    let name = path.file_stem().map_or_else(|| args.policy.clone(), |s| s.to_string_lossy().into_owned());
    if path.extension().is_some_and(|e| e == "py") {
        let mut registry = registry;
        registry.external_command =
            Some(cfg.evolve.external_command.clone().unwrap_or_else(|| ExternalCommand::new("python3", ["{policy}"])));
        registry.external_timeout = Some(timeout);
        let program = PolicyProgram {
            name,
            source_text: source + PYTHON_HARNESS,
            mode: ProgramMode::ExternalProcess,
            metadata: Default::default(),
        };
        Ok(registry.instantiate(&program, None)?)
    } else {
        Ok(registry.instantiate(&PolicyProgram::rules(name, source), None)?)
    }
}

fn print_summary(report: &EpisodeReport) {
    let s = &report.summary;
    println!("policy: {}", s.policy);
    println!("window: start {} / {} steps ({})", s.window.start_step, s.window.n_steps, s.window.trace_digest);
    println!("total reward: {:.4} (profit {:.4}, penalty {:.4})", s.total_reward, s.total_profit, s.total_penalty);
    println!("grid: import {:.2} kWh, export {:.2} kWh", s.total_import_kwh, s.total_export_kwh);
    println!("cycles: {}, flicker: {}", s.metrics.cycle_count, s.metrics.flicker_count);
    println!("soc violations: {}, clamps: {}, guardrail clamps: {}", s.soc_violations, s.clamp_events, s.policy_violations);
    println!("faults: {}", s.faults.len());
    if let Some(abort) = &s.aborted {
        println!("aborted at step {}: {}", abort.step_index, abort.diagnostic);
    }
}

fn simulate(args: &SimulateArgs) -> Result<u8> {
    let cfg = args.env.load()?;
    let env = cfg.env()?;
    let mut handle = guardrail_wrap(policy_handle(args, &cfg, &env)?, env.battery);
    let report = env.run(&mut handle)?;
    drop(handle);
    print_summary(&report);
    if let Some(dir) = &args.out {
        report.write_to_dir(dir)?;
        std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
        println!("wrote {}", dir.display());
    }
    let s = &report.summary;
    Ok(if s.faults.is_empty() && s.aborted.is_none() { 0 } else { EXIT_POLICY_FAULT })
}

fn ledger(args: &LedgerArgs) -> Result<u8> {
    let path = in_dir(&args.from, "steps.jsonl");
    let records = read_step_log(&path)?;
    let mut spec = QuadrantSpec::median_of(&records)?;
    spec.solar_split = args.solar_split;
    let kept: Vec<StepRecord> = records.into_iter().filter(|r| args.all_steps || r.observation.plugged_in).collect();
    if kept.is_empty() {
        bail!("no plugged-in steps in {}", path.display());
    }
    let sample = quadrant_sample(&build_ledger(&kept, &spec), args.n, args.seed)?;
    export_ledger(&sample, &args.out, LedgerFormat::from_path(&args.out)?)?;
    let mut counts = [0usize; 4];
    for e in &sample {
        counts[usize::from(e.quadrant.number() - 1)] += 1;
    }
    println!("price split {:.4}, solar split {:.2} kW", spec.price_split, spec.solar_split);
    println!("sampled {} of {} steps; per quadrant {:?}", sample.len(), kept.len(), counts);
    if let Some(style) = args.render {
        let style = match style {
            RenderArg::Compact => RenderStyle::Compact,
            RenderArg::Narrative => RenderStyle::Narrative,
        };
        print!("{}", render_examples(&sample, style));
    }
    Ok(0)
}

fn operator_from(cfg: &RunConfig, spec: Option<&str>) -> Result<Box<dyn MutationOperator>> {
    let (kind, replies) = match spec {
        Some("http") => (OperatorKind::Http, None),
        Some(s) => match s.strip_prefix("mock:") {
            Some(path) => (OperatorKind::Mock, Some(PathBuf::from(path))),
            None => bail!("--operator must be `mock:FILE` or `http`, got `{s}`"),
        },
        None => (cfg.operator.kind, cfg.operator.replies.clone()),
    };
    Ok(match kind {
        OperatorKind::Http => Box::new(HttpChatOperator::new(cfg.operator.http.clone())),
        OperatorKind::Mock => {
            let path = replies.context("the mock operator needs a replies file (`--operator mock:FILE`)")?;
            let mock = ScriptedMock::from_jsonl(&path)?;
            Box::new(if cfg.operator.repeat_last { mock.repeating() } else { mock })
        }
    })
}

fn evolve(args: &EvolveArgs) -> Result<u8> {
    let mut cfg = args.env.load()?;
    if let Some(s) = args.strategy {
        cfg.evolve.strategy = s;
    }
    if let Some(n) = args.iters {
        cfg.evolve.n_iterations = n;
    }
    if let Some(seed) = args.seed {
        cfg.evolve.seed = seed;
    }
    if args.min_fit.is_some() {
        cfg.evolve.min_fit = args.min_fit;
    }
    if let Some(c) = args.cadence {
        cfg.runtime.cadence_steps = c;
    }
    if args.python {
        cfg.evolve.program_mode = ProgramMode::ExternalProcess;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = Some(out.clone());
    }
    let env = cfg.env()?;
    let mut operator = operator_from(&cfg, args.operator.as_deref())?;
    let out = cfg.out_dir.clone();
    if let Some(dir) = &out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    }

    if cfg.evolve.strategy == StrategyKind::Runtime {
        let run = run_runtime_agent(&env, operator, &cfg.runtime)?;
        print_summary(&run.report);
        println!("queries: {} ({} failed)", run.decisions.len(), run.decisions.iter().filter(|d| d.fault.is_some()).count());
        if let Some(dir) = &out {
            run.report.write_to_dir(dir)?;
            let decisions = serde_json::to_string_pretty(&run.decisions)?;
            std::fs::write(dir.join("decisions.json"), decisions + "\n")?;
        }
        let answered = run.decisions.iter().any(|d| d.reply.is_some());
        return Ok(if !run.decisions.is_empty() && !answered {
            EXIT_OPERATOR
        } else if run.report.summary.aborted.is_some() {
            EXIT_POLICY_FAULT
        } else {
            0
        });
    }

    let run = run_evolution(&env, operator.as_mut(), &cfg.evolve, out.as_deref())?;
    print_run(&run);
    Ok(if run.iterations.iter().all(|it| it.status == IterationStatus::OperatorFailed) { EXIT_OPERATOR } else { 0 })
}

fn print_run(run: &EvolutionRun) {
    println!("strategy: {}, operator: {}, seed: {}", run.strategy, run.operator, run.seed);
    println!("baseline reward: {:.4} ({} examples)", run.baseline.total_reward, run.baseline.n_examples);
    for it in &run.iterations {
        let reward = it.total_reward().map_or_else(|| "-".to_string(), |r| format!("{r:.4}"));
        let fit = it.fit.map_or_else(|| "-".to_string(), |f| format!("{:.3}", f.fit_score));
        let status = serde_json::to_value(it.status).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
        let note = it.error.as_deref().map(|e| format!(" ({e})")).unwrap_or_default();
        println!("iter {:>2}: {status:<17} reward {reward:>10}  fit {fit}{note}", it.iteration);
    }
    match run.best() {
        Some(best) => println!(
            "best: iteration {} (criterion {:.4})",
            best.iteration,
            best.criterion.unwrap_or(f64::NAN)
        ),
        None => println!("best: none eligible"),
    }
}

fn compare_cmd(args: &CompareArgs) -> Result<u8> {
    let a = read_summary(&in_dir(&args.a, "report.json"))?;
    let b = read_summary(&in_dir(&args.b, "report.json"))?;
    if let Some(why) = compare::window_mismatch(&a, &b) {
        bail!("reports are not comparable: {why}");
    }
    print!("{}", compare::render(&a, &b));
    Ok(0)
}

fn plot_data(args: &PlotDataArgs) -> Result<u8> {
    let records = read_step_log(&in_dir(&args.from, "steps.jsonl"))?;
    let mut out: Box<dyn std::io::Write> = match &args.out {
        Some(path) => Box::new(std::io::BufWriter::new(
            std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    };
    writeln!(out, "time,price,soc,applied_kw,cumulative_reward")?;
    let mut cumulative = 0.0;
    for r in &records {
        cumulative += r.step_reward;
        writeln!(
            out,
            "{},{},{},{},{}",
            r.observation.timestamp.format("%Y-%m-%dT%H:%M:%S"),
            r.observation.charge_price,
            r.soc_after,
            r.applied_kw,
            cumulative
        )?;
    }
    out.flush()?;
    Ok(0)
}
