//! Command-line frontend.
//!
//! Exit codes: 0 valid/pass, 1 invalid/fail, 2 usage or fatal error.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use loadgen_core::compliance::{accuracy_spot_check, caching_probe, seed_variants};
use loadgen_core::harness::run_accuracy;
use loadgen_core::metrics::evaluate_run;
use loadgen_core::search::{search_max_qps, search_max_streams};
use loadgen_core::{
    plan_for_scenario, Harness, ModeKind, ScenarioKind, SettingsSpec, SimProfile, SimSut,
    VirtualHarness, NS_PER_MS,
};
use serde_json::json;

use crate::bundle::{run_submission, unix_ms_now, write_bundle};
use crate::checker::check_submission;
use crate::config::{
    overlay, resolve_compliance, ConfigError, Resolved, RunConfig, SutArg, SutField, SutSpec,
};
use crate::engine::WallClockHarness;
use crate::logio::RunLog;
use crate::sut::SutContract;
use crate::tcp::TcpSut;
use crate::timer_sut::{NullSut, TimerSut};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "LOADGEN_OUT";
const DEFAULT_SUT_THREADS: usize = 8;

#[derive(Debug, Parser)]
#[command(
    name = "loadgen",
    version,
    about = "Inference benchmark load generator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the query plan for the settings.
    Plan(CommonArgs),
    /// Run one scenario and write a result bundle.
    Run(RunArgs),
    /// Search for the maximum sustainable QPS (server) or stream count (multistream).
    Search(SearchArgs),
    /// Run the three compliance tests.
    Comply(CommonArgs),
    /// Audit a result bundle.
    Check {
        bundle: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Recompute a run log's metrics from its records.
    Replay {
        log: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub scenario: Option<ScenarioKind>,
    #[arg(long)]
    pub mode: Option<ModeKind>,
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_u64)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub target_qps: Option<f64>,
    #[arg(long)]
    pub interval_ms: Option<f64>,
    #[arg(long)]
    pub samples_per_query: Option<u64>,
    #[arg(long)]
    pub latency_bound_ms: Option<f64>,
    #[arg(long)]
    pub tail: Option<f64>,
    #[arg(long)]
    pub confidence: Option<f64>,
    #[arg(long)]
    pub min_duration_ms: Option<f64>,
    #[arg(long)]
    pub min_queries: Option<u64>,
    #[arg(long)]
    pub loaded_samples: Option<u64>,
    /// Allow settings outside the standard scenario ranges.
    #[arg(long)]
    pub unsafe_override: bool,
    /// Output directory (default: $LOADGEN_OUT, else ./results).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// sim:null, sim:constant:5ms, sim:batch:0.5ms,2ms[,P], tcp:HOST:PORT, ...
    #[arg(long)]
    pub sut: Option<String>,
    /// Run simulated SUTs on a virtual clock.
    #[arg(long)]
    pub virtual_time: bool,
    #[arg(long)]
    pub sut_threads: Option<usize>,
    /// Machine-readable output.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Skip the compliance tests (the bundle will not pass the checker).
    #[arg(long)]
    pub no_compliance: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 1.0)]
    pub lo: f64,
    #[arg(long, default_value_t = 10_000.0)]
    pub hi: f64,
    #[arg(long, default_value_t = 10.0)]
    pub resolution: f64,
    /// Largest stream count tried.
    #[arg(long, default_value_t = 1024)]
    pub hi_n: u64,
}

fn parse_u64(s: &str) -> Result<u64, String> {
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(&hex.replace('_', ""), 16),
        None => s.replace('_', "").parse(),
    }
    .map_err(|e| e.to_string())
}

fn ms_to_ns(ms: f64) -> Result<u64, ConfigError> {
    let ns = (ms * NS_PER_MS as f64).round();
    if ns.is_finite() && ns >= 0.0 && ns <= u64::MAX as f64 {
        Ok(ns as u64)
    } else {
        Err(ConfigError::Invalid(format!("{ms} ms out of range")))
    }
}

/// Merges defaults, the config file and flags.
pub fn resolve(args: &CommonArgs, no_compliance: bool) -> Result<Resolved, ConfigError> {
    let cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let scenario = args.scenario.or(cfg.scenario).ok_or_else(|| {
        ConfigError::Invalid("--scenario is required (or `scenario` in --config)".into())
    })?;
    let mut s: SettingsSpec = overlay(&SettingsSpec::defaults(scenario), &cfg.settings)?;
    if s.scenario != scenario {
        return Err(ConfigError::Invalid(
            "settings.scenario contradicts the scenario".into(),
        ));
    }
    if let Some(m) = args.mode {
        s.mode = m;
    }
    if let Some(v) = args.seed {
        s.rng_seed = v;
    }
    if let Some(v) = args.target_qps {
        s.target_qps = v;
    }
    if let Some(v) = args.interval_ms {
        s.interval_ns = ms_to_ns(v)?;
    }
    if let Some(v) = args.samples_per_query {
        s.samples_per_query = v;
    }
    if let Some(v) = args.latency_bound_ms {
        s.latency_bound_ns = Some(ms_to_ns(v)?);
    }
    if let Some(v) = args.tail {
        s.tail_percentile = v;
    }
    if let Some(v) = args.confidence {
        s.confidence = v;
    }
    if let Some(v) = args.min_duration_ms {
        s.min_duration_ns = ms_to_ns(v)?;
    }
    if let Some(v) = args.min_queries {
        s.min_query_count_override = Some(v);
    }
    if let Some(v) = args.loaded_samples {
        s.loaded_sample_count = v;
    }
    if args.unsafe_override {
        s.unsafe_override = true;
    }
    let settings = s.clone().validate()?;

    let sut_arg: SutArg = match (&args.sut, &cfg.sut) {
        (Some(flag), _) => flag.parse()?,
        (None, Some(SutField::Spec(spec))) => spec.parse()?,
        (None, Some(SutField::Structured(SutSpec::Sim(p)))) => {
            p.validate().map_err(|e| ConfigError::Sut(e.0))?;
            SutArg::Profile(p.clone())
        }
        (None, Some(SutField::Structured(SutSpec::Tcp(a)))) => SutArg::Tcp(a.clone()),
        (None, None) => SutArg::Profile(SimProfile::Null),
    };
    let sut = sut_arg.resolve(&settings.with_mode(ModeKind::Performance))?;
    let virtual_time = args.virtual_time || cfg.virtual_time.unwrap_or(false);
    if virtual_time && matches!(sut, SutSpec::Tcp(_)) {
        return Err(ConfigError::Invalid(
            "--virtual-time needs a simulated SUT".into(),
        ));
    }
    let compliance = if no_compliance {
        None
    } else {
        resolve_compliance(cfg.compliance.as_ref())?
    };
    let out = args
        .out
        .clone()
        .or(cfg.out)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"));
    Ok(Resolved {
        settings: s,
        sut,
        virtual_time,
        sut_threads: args
            .sut_threads
            .or(cfg.sut_threads)
            .unwrap_or(DEFAULT_SUT_THREADS)
            .max(1),
        compliance,
        out,
    })
}

/// Builds the harness the resolved configuration asks for.
pub fn build_harness(r: &Resolved) -> anyhow::Result<Box<dyn Harness>> {
    Ok(match (&r.sut, r.virtual_time) {
        (SutSpec::Sim(p), true) => Box::new(VirtualHarness::new(SimSut::new(p.clone())?)),
        (SutSpec::Sim(SimProfile::Null), false) => {
            Box::new(WallClockHarness::new(NullSut::new(r.sut_threads)))
        }
        (SutSpec::Sim(p), false) => Box::new(WallClockHarness::new(TimerSut::new(
            p.clone(),
            r.sut_threads,
        )?)),
        (SutSpec::Tcp(addr), _) => {
            let sut: Box<dyn SutContract> =
                Box::new(TcpSut::connect(addr.as_str(), &r.sut.name())?);
            Box::new(WallClockHarness::new(sut))
        }
    })
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn dispatch<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            2
        }
    }
}

fn print_json(out: &mut dyn Write, v: &serde_json::Value) -> anyhow::Result<()> {
    writeln!(out, "{}", serde_json::to_string_pretty(v)?)?;
    Ok(())
}

fn execute(cmd: Command, out: &mut dyn Write) -> anyhow::Result<i32> {
    match cmd {
        Command::Plan(a) => {
            let r = resolve(&a, true)?;
            let settings = r.test_settings()?;
            let plan = plan_for_scenario(&settings);
            if a.json {
                print_json(
                    out,
                    &json!({ "scenario": settings.scenario(), "settings": settings.spec(), "plan": plan }),
                )?;
            } else {
                let s = settings.spec();
                writeln!(out, "scenario               {}", s.scenario)?;
                writeln!(out, "tail_percentile        {}", s.tail_percentile)?;
                writeln!(out, "confidence             {}", s.confidence)?;
                writeln!(out, "raw_query_count        {}", plan.raw_query_count)?;
                writeln!(out, "rounded_query_count    {}", plan.rounded_query_count)?;
                writeln!(out, "scenario_min           {}", plan.scenario_min)?;
                writeln!(out, "effective_min_queries  {}", plan.effective_min_queries)?;
                if plan.min_sample_count > 0 {
                    writeln!(out, "min_sample_count       {}", plan.min_sample_count)?;
                }
            }
            Ok(0)
        }
        Command::Run(a) => {
            let r = resolve(&a.common, a.no_compliance)?;
            let settings = r.test_settings()?;
            let mut h = build_harness(&r)?;
            let sub = run_submission(&mut *h, &settings, r.header_config(), r.compliance.as_ref())?;
            let dir = write_bundle(&r.out, &sub, unix_ms_now())?;
            let summary = sub.summary();
            let ok = if r.compliance.is_some() {
                summary.valid
            } else {
                summary.aggregate.valid
            };
            if a.common.json {
                print_json(out, &json!({ "bundle": dir, "summary": summary }))?;
            } else {
                writeln!(out, "sut         {}", summary.sut)?;
                writeln!(out, "scenario    {}", summary.scenario)?;
                writeln!(
                    out,
                    "metric      {}",
                    serde_json::to_string(&summary.aggregate.metric)?
                )?;
                writeln!(out, "runs        {}", summary.runs.len())?;
                writeln!(out, "violations  {}", summary.aggregate.violation_fraction)?;
                for d in &summary.aggregate.diagnostics {
                    writeln!(out, "diagnostic  {d}")?;
                }
                for (t, pass) in &summary.compliance {
                    writeln!(
                        out,
                        "compliance  {t} {}",
                        if *pass { "pass" } else { "FAIL" }
                    )?;
                }
                if r.compliance.is_some() {
                    writeln!(out, "valid       {}", summary.valid)?;
                } else {
                    writeln!(
                        out,
                        "valid       {} (compliance skipped)",
                        summary.aggregate.valid
                    )?;
                }
                writeln!(out, "bundle      {}", dir.display())?;
            }
            Ok(if ok { 0 } else { 1 })
        }
        Command::Search(a) => {
            let r = resolve(&a.common, true)?;
            let settings = r.test_settings()?;
            let mut h = build_harness(&r)?;
            let (found, v) = match settings.scenario() {
                ScenarioKind::Server => {
                    let o = search_max_qps(&mut *h, &settings, a.lo, a.hi, a.resolution)?;
                    (o.value.is_some(), serde_json::to_value(&o)?)
                }
                ScenarioKind::MultiStream => {
                    let o = search_max_streams(&mut *h, &settings, a.hi_n)?;
                    (o.value.is_some(), serde_json::to_value(&o)?)
                }
                other => {
                    anyhow::bail!("search needs the server or multi_stream scenario, not {other}")
                }
            };
            if a.common.json {
                print_json(out, &v)?;
            } else {
                writeln!(out, "value      {}", v["value"])?;
                writeln!(out, "saturated  {}", v["saturated"])?;
                writeln!(out, "anomaly    {}", v["anomaly"])?;
                writeln!(
                    out,
                    "probes     {}",
                    v["probes"].as_array().map_or(0, Vec::len)
                )?;
            }
            Ok(if found { 0 } else { 1 })
        }
        Command::Comply(a) => {
            let r = resolve(&a, false)?;
            let cfg = r.compliance.clone().unwrap_or_default();
            let settings = r.test_settings()?.with_mode(ModeKind::Performance);
            let mut h = build_harness(&r)?;
            let (_, log) = run_accuracy(&mut *h, &settings)?;
            let verdicts = vec![
                accuracy_spot_check(&mut *h, &settings, &log, &cfg)?,
                caching_probe(&mut *h, &settings, &cfg)?,
                seed_variants(&mut *h, &settings, &cfg.alternate_seeds, &cfg)?,
            ];
            let all = verdicts.iter().all(|v| v.pass);
            if a.json {
                print_json(out, &serde_json::to_value(&verdicts)?)?;
            } else {
                for v in &verdicts {
                    writeln!(
                        out,
                        "{:<20} {}",
                        v.test.file_stem(),
                        if v.pass { "pass" } else { "FAIL" }
                    )?;
                }
            }
            Ok(if all { 0 } else { 1 })
        }
        Command::Check { bundle, json } => {
            let report = check_submission(&bundle)?;
            if json {
                print_json(out, &serde_json::to_value(&report)?)?;
            } else {
                for v in &report.violations {
                    writeln!(out, "{v}")?;
                }
                writeln!(
                    out,
                    "{}: {} violation(s) in {}",
                    if report.passed() { "PASS" } else { "FAIL" },
                    report.violations.len(),
                    report.bundle
                )?;
            }
            Ok(report.exit_code())
        }
        Command::Replay { log, json } => {
            let log = RunLog::read(&log)?;
            let settings = log.settings.settings.clone().validate()?;
            let records = log.latency_records()?;
            let result = evaluate_run(&settings, &records);
            let matches = result == log.summary.result;
            if json {
                print_json(
                    out,
                    &json!({ "recomputed": result, "recorded": log.summary.result, "matches": matches }),
                )?;
            } else {
                writeln!(out, "metric    {}", serde_json::to_string(&result.metric)?)?;
                writeln!(out, "valid     {}", result.valid)?;
                writeln!(out, "queries   {}", result.issued_query_count)?;
                writeln!(out, "matches   {matches}")?;
                for d in &result.diagnostics {
                    writeln!(out, "diagnostic {d}")?;
                }
            }
            Ok(if matches && result.valid { 0 } else { 1 })
        }
    }
}
