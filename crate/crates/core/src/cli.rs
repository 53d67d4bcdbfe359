//! Command-line front end.
//!
//! Every command reads the same three documents (`--model`, `--hw`,
//! `--run`). The human summary goes to stdout; full data goes to files
//! under `--out` in the format chosen by `--format`.
//!
//! Exit codes:
//!
//! | code | meaning                                              |
//! |------|------------------------------------------------------|
//! | 0    | success                                              |
//! | 2    | config parse or validation error                     |
//! | 3    | infeasible: the run, or every sweep candidate, OOMs  |
//! | 4    | simulation error (routing, trace, deadlock)          |
//! | 64   | usage error (unknown flag, bad value)                |
//! | 66   | input file missing or unreadable                     |
//! | 73   | output could not be written                          |
//!
//! Errors are reported on stderr as one line:
//! `error[code=N kind=K]: message`.
//!
//! CSV column orders are fixed (version 1 of the output format). Times are
//! in seconds, sizes in bytes, bandwidths in bytes/s.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{parse_specs, seed_from_env, ConfigError, Mode, Phase, Specs};
use crate::graph::{build_full_graph, build_layer_graph_ctx, BlockCtx, Direction, GraphError};
use crate::orchestrator::{self, Plan, RunError};
use crate::perfmodel::{cost_graph, write_op_costs_csv};
use crate::topology::build_network;
use crate::trace;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_SIM: i32 = 4;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_NO_INPUT: i32 = 66;
pub const EXIT_CANT_WRITE: i32 = 73;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    fn new(code: i32, kind: &'static str, message: impl Into<String>) -> Self {
        CliError { code, kind, message: message.into() }
    }

    fn write(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::new(EXIT_CANT_WRITE, "output", format!("{}: {e}", path.display()))
    }

    /// The single stderr line for this error.
    pub fn line(&self) -> String {
        let msg = self.message.replace('\n', " ");
        format!("error[code={} kind={}]: {}", self.code, self.kind, msg.trim())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::new(EXIT_CONFIG, "config", e.to_string())
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        CliError::new(EXIT_CONFIG, "graph", e.to_string())
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(e) => e.into(),
            RunError::Graph(e) => e.into(),
            RunError::Infeasible(_) => CliError::new(EXIT_INFEASIBLE, "infeasible", e.to_string()),
            RunError::Trace(_) | RunError::Sim(_) | RunError::Topology(_) => {
                CliError::new(EXIT_SIM, "simulation", e.to_string())
            }
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rapidsim", version, about = "Performance simulator for distributed LLM training and inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Flattened,
    Hierarchical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GraphKind {
    Full,
    LayerFwd,
    LayerBwd,
}

#[derive(Debug, Args)]
struct Inputs {
    /// Model description document.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Hardware and topology document.
    #[arg(long, value_name = "FILE")]
    hw: PathBuf,
    /// Run document (parallelism, mode, faults, sweep grid, ...).
    #[arg(long, value_name = "FILE")]
    run: PathBuf,
    /// Overrides the run document's seed and RAPIDSIM_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the run document's mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Debug, Args)]
struct Output {
    /// Directory for result files.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Maximum number of simulations run in parallel.
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one configuration.
    Run {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        output: Output,
        /// Write the event timeline as CSV.
        #[arg(long, value_name = "FILE")]
        timeline: Option<PathBuf>,
        /// Write per-rank flattened traces into this directory.
        #[arg(long, value_name = "DIR")]
        emit_traces: Option<PathBuf>,
        /// Write per-operator costs as CSV.
        #[arg(long, value_name = "FILE")]
        dump_op_costs: Option<PathBuf>,
    },
    /// Evaluate every parallel mapping in the run document's sweep grid.
    Sweep {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        output: Output,
    },
    /// Monte Carlo study of single soft link faults.
    Faults {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        output: Output,
        /// Number of iterations (overrides the run document).
        #[arg(long)]
        iters: Option<u64>,
    },
    /// Compare the base hardware with the run document's variants.
    Whatif {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        output: Output,
    },
    /// Print an operator graph as a dependency list.
    DumpGraph {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_enum, default_value = "full")]
        graph: GraphKind,
        /// Write to this file instead of stdout.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Print the link list of the fabric as CSV.
    DumpTopology {
        #[command(flatten)]
        inputs: Inputs,
        /// Write to this file instead of stdout.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Parse and cross-check the three documents.
    ValidateConfig {
        #[command(flatten)]
        inputs: Inputs,
    },
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::new(EXIT_NO_INPUT, "input", format!("{}: {e}", path.display())))
}

fn load(inputs: &Inputs) -> Result<Specs, CliError> {
    let (m, h, r) = (read(&inputs.model)?, read(&inputs.hw)?, read(&inputs.run)?);
    let mut specs = parse_specs(&m, &h, &r)?;
    specs = specs.with_seed(seed_from_env()?).with_seed(inputs.seed);
    if let Some(mode) = inputs.mode {
        specs.run.mode = match mode {
            ModeArg::Flattened => Mode::Flattened,
            ModeArg::Hierarchical => Mode::Hierarchical,
        };
        if specs.run.mode == Mode::Hierarchical {
            specs.parallelism.check_hierarchical(&specs.topology)?;
        }
    }
    Ok(specs)
}

fn out_dir(output: &Output) -> Result<Option<&Path>, CliError> {
    match &output.out {
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| CliError::write(d, e))?;
            Ok(Some(d.as_path()))
        }
        None => Ok(None),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::write(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::write(path, e))?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::write(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::write(path, e))?;
    write_file(path, &bytes)
}

fn with_csv(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> csv::Result<()>) -> Result<(), CliError> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| CliError::write(path, e))?;
    write_file(path, &buf)
}

fn in_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    match jobs {
        None => Ok(f()),
        Some(0) => Err(CliError::new(EXIT_USAGE, "usage", "--jobs must be at least 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::new(EXIT_USAGE, "usage", e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

fn mode_str(m: Mode) -> &'static str {
    match m {
        Mode::Flattened => "flattened",
        Mode::Hierarchical => "hierarchical",
    }
}

#[derive(Serialize)]
struct PhaseRow<'a> {
    phase: &'a str,
    time_s: f64,
}

fn cmd_run(
    specs: &Specs,
    output: &Output,
    timeline: Option<&Path>,
    emit_traces: Option<&Path>,
    dump_op_costs: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let dir = out_dir(output)?;
    let r = in_pool(output.jobs, || orchestrator::run(specs, timeline.is_some()))??;
    let mut s = String::new();
    let _ = writeln!(s, "config      {}", r.config_id);
    let _ = writeln!(s, "mode        {}", mode_str(r.mode));
    let _ = writeln!(s, "total_time  {:.6e} s", r.total_time);
    for p in &r.phases {
        let _ = writeln!(s, "  {:<18}{:.6e} s", p.name, p.time);
    }
    let n = r.sim.ranks.len().max(1) as f64;
    let avg = |f: fn(&crate::netsim::RankStats) -> f64| r.sim.ranks.iter().map(f).sum::<f64>() / n;
    let _ = writeln!(
        s,
        "per-rank    compute {:.6e} s  comm {:.6e} s  idle {:.6e} s (mean)",
        avg(|x| x.compute),
        avg(|x| x.comm),
        avg(|x| x.idle)
    );
    let m = &r.memory;
    let _ = writeln!(
        s,
        "memory      {} B (params {}, grads {}, optimizer {}, kv {}, activations {}, overhead {}); headroom {} B",
        m.total_bytes,
        m.params_bytes,
        m.grads_bytes,
        m.optimizer_bytes,
        m.kv_cache_bytes,
        m.peak_activation_bytes,
        m.overhead_bytes,
        m.headroom_bytes
    );
    let _ = writeln!(s, "network     {} flows, {:.6e} B delivered", r.sim.flows, r.sim.bytes_delivered);
    for w in &specs.warnings {
        let _ = writeln!(s, "warning     {w}");
    }
    out.write_all(s.as_bytes()).map_err(|e| CliError::write(Path::new("<stdout>"), e))?;

    if let Some(d) = dir {
        match output.format {
            Format::Json => write_json(&d.join("run.json"), &r)?,
            Format::Csv => {
                let phases: Vec<PhaseRow> = r.phases.iter().map(|p| PhaseRow { phase: &p.name, time_s: p.time }).collect();
                write_csv_rows(&d.join("phases.csv"), &phases)?;
                write_csv_rows(&d.join("ranks.csv"), &r.sim.ranks)?;
                write_csv_rows(&d.join("links.csv"), &r.sim.links)?;
                write_csv_rows(&d.join("memory.csv"), std::slice::from_ref(&r.memory))?;
            }
        }
    }
    if let Some(path) = timeline {
        if r.sim.timeline.is_empty() && specs.model.phase == Phase::Inference {
            eprintln!("warning: timeline is only recorded for single-segment runs");
        }
        with_csv(path, |buf| r.sim.write_timeline_csv(buf))?;
    }
    if let Some(dir) = emit_traces {
        fs::create_dir_all(dir).map_err(|e| CliError::write(dir, e))?;
        let plan = Plan::prepare(specs, Mode::Flattened)?;
        for (label, traces) in plan.flat_traces() {
            for t in traces {
                let path = dir.join(format!("{label}.rank{}.trace", t.rank));
                write_file(&path, trace::serialize(std::slice::from_ref(t)).as_bytes())?;
            }
        }
    }
    if let Some(path) = dump_op_costs {
        let g = build_full_graph(&specs.model, &specs.parallelism)?;
        let costs = cost_graph(&g, &specs.hardware, specs.model.precision.compute_dtype())?;
        with_csv(path, |buf| write_op_costs_csv(&g, &costs, buf))?;
    }
    Ok(())
}

fn cmd_sweep(specs: &Specs, output: &Output, out: &mut dyn Write) -> Result<(), CliError> {
    let dir = out_dir(output)?;
    let rows = in_pool(output.jobs, || orchestrator::sweep(specs))?;
    let feasible: Vec<_> = rows.iter().filter(|r| r.feasible).collect();
    let mut s = String::new();
    let _ = writeln!(s, "candidates  {}", rows.len());
    let _ = writeln!(s, "feasible    {}", feasible.len());
    let _ = writeln!(s, "pruned      {}", rows.len() - feasible.len());
    for (i, r) in feasible.iter().take(5).enumerate() {
        let _ = writeln!(s, "  #{:<3}{:<40}{:.6e} s", i + 1, r.config_id, r.total_time.unwrap());
    }
    if let (Some(best), Some(worst)) = (feasible.first(), feasible.last()) {
        let _ = writeln!(s, "best/worst  {:.4}x", worst.total_time.unwrap() / best.total_time.unwrap());
    }
    out.write_all(s.as_bytes()).map_err(|e| CliError::write(Path::new("<stdout>"), e))?;
    if let Some(d) = dir {
        match output.format {
            Format::Json => write_json(&d.join("sweep.json"), &rows)?,
            Format::Csv => write_csv_rows(&d.join("sweep.csv"), &rows)?,
        }
    }
    if feasible.is_empty() {
        return Err(CliError::new(EXIT_INFEASIBLE, "infeasible", "no sweep candidate is feasible"));
    }
    Ok(())
}

fn cmd_faults(specs: &Specs, output: &Output, iters: Option<u64>, out: &mut dyn Write) -> Result<(), CliError> {
    let dir = out_dir(output)?;
    let mut mc = specs.run.monte_carlo.clone();
    if let Some(i) = iters {
        mc.iterations = i;
    }
    let r = in_pool(output.jobs, || orchestrator::fault_monte_carlo(specs, &mc, specs.run.rng_seed))??;
    let d = &r.degradation;
    let mut s = String::new();
    let _ = writeln!(s, "config      {}", r.config_id);
    let _ = writeln!(s, "baseline    {:.6e} s", r.baseline_time);
    let _ = writeln!(s, "iterations  {}", r.samples.len());
    let _ = writeln!(
        s,
        "slowdown    min {:.4}  p10 {:.4}  median {:.4}  mean {:.4}  p90 {:.4}  p99 {:.4}  max {:.4}",
        d.min, d.p10, d.median, d.mean, d.p90, d.p99, d.max
    );
    out.write_all(s.as_bytes()).map_err(|e| CliError::write(Path::new("<stdout>"), e))?;
    if let Some(dir) = dir {
        match output.format {
            Format::Json => write_json(&dir.join("faults.json"), &r)?,
            Format::Csv => {
                write_csv_rows(&dir.join("faults.csv"), &r.samples)?;
                write_csv_rows(&dir.join("faults_summary.csv"), std::slice::from_ref(&r.degradation))?;
            }
        }
    }
    Ok(())
}

fn cmd_whatif(specs: &Specs, output: &Output, out: &mut dyn Write) -> Result<(), CliError> {
    let dir = out_dir(output)?;
    let rows = in_pool(output.jobs, || orchestrator::whatif(specs))??;
    let mut s = String::new();
    for r in &rows {
        match r.total_time {
            Some(t) => {
                let _ = write!(s, "{:<16}{:.6e} s", r.name, t);
                if let Some(x) = r.speedup {
                    let _ = write!(s, "  speedup {x:.4}");
                }
                let _ = writeln!(s, "  memory {} B", r.memory_bytes);
            }
            None => {
                let _ = writeln!(s, "{:<16}infeasible ({}): needs {} B", r.name, r.reason, r.memory_bytes);
            }
        }
    }
    out.write_all(s.as_bytes()).map_err(|e| CliError::write(Path::new("<stdout>"), e))?;
    if let Some(d) = dir {
        match output.format {
            Format::Json => write_json(&d.join("whatif.json"), &rows)?,
            Format::Csv => write_csv_rows(&d.join("whatif.csv"), &rows)?,
        }
    }
    Ok(())
}

fn emit(path: Option<&Path>, bytes: &[u8], out: &mut dyn Write) -> Result<(), CliError> {
    match path {
        Some(p) => write_file(p, bytes),
        None => out.write_all(bytes).map_err(|e| CliError::write(Path::new("<stdout>"), e)),
    }
}

fn cmd_dump_graph(specs: &Specs, kind: GraphKind, path: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let (model, par) = (&specs.model, &specs.parallelism);
    let ctx = match model.phase {
        Phase::Train => BlockCtx::train(model, par),
        Phase::Inference => BlockCtx::prefill(model, par),
    };
    let g = match kind {
        GraphKind::Full => build_full_graph(model, par)?,
        GraphKind::LayerFwd => build_layer_graph_ctx(model, par, &ctx, Direction::Fwd)?,
        GraphKind::LayerBwd => build_layer_graph_ctx(model, par, &ctx, Direction::Bwd)?,
    };
    emit(path, g.dump().as_bytes(), out)
}

fn cmd_dump_topology(specs: &Specs, path: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let net = build_network(&specs.topology).map_err(|e| CliError::new(EXIT_SIM, "topology", e.to_string()))?;
    let mut buf = Vec::new();
    net.write_csv(&mut buf).map_err(|e| CliError::write(Path::new("<csv>"), e))?;
    emit(path, &buf, out)
}

fn cmd_validate(specs: &Specs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut s = String::new();
    let _ = writeln!(s, "ok          {}", specs.parallelism.id());
    let _ = writeln!(s, "gpus        {}", specs.topology.num_gpus());
    let _ = writeln!(s, "mode        {}", mode_str(specs.run.mode));
    for w in &specs.warnings {
        let _ = writeln!(s, "warning     {w}");
    }
    out.write_all(s.as_bytes()).map_err(|e| CliError::write(Path::new("<stdout>"), e))
}

/// Parse `args` (including the program name) and execute the command,
/// writing the human summary to `out`.
pub fn execute<I, T>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{}", e.render());
                return Ok(());
            }
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("usage error");
            return Err(CliError::new(EXIT_USAGE, "usage", first.trim_start_matches("error: ")));
        }
    };
    match cli.command {
        Command::Run { inputs, output, timeline, emit_traces, dump_op_costs } => {
            let specs = load(&inputs)?;
            cmd_run(&specs, &output, timeline.as_deref(), emit_traces.as_deref(), dump_op_costs.as_deref(), out)
        }
        Command::Sweep { inputs, output } => cmd_sweep(&load(&inputs)?, &output, out),
        Command::Faults { inputs, output, iters } => cmd_faults(&load(&inputs)?, &output, iters, out),
        Command::Whatif { inputs, output } => cmd_whatif(&load(&inputs)?, &output, out),
        Command::DumpGraph { inputs, graph, out: path } => cmd_dump_graph(&load(&inputs)?, graph, path.as_deref(), out),
        Command::DumpTopology { inputs, out: path } => cmd_dump_topology(&load(&inputs)?, path.as_deref(), out),
        Command::ValidateConfig { inputs } => cmd_validate(&load(&inputs)?, out),
    }
}

/// Process entry point: returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    match execute(args, &mut lock) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = lock.flush();
            eprintln!("{}", e.line());
            e.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exec(args: &[&str]) -> Result<String, CliError> {
        let mut buf = Vec::new();
        let mut argv = vec!["rapidsim"];
        argv.extend_from_slice(args);
        execute(argv, &mut buf).map(|_| String::from_utf8(buf).unwrap())
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        let e = exec(&["run", "--bogus"]).unwrap_err();
        assert_eq!(e.code, EXIT_USAGE);
        assert!(!e.line().contains('\n'));
    }

    #[test]
    fn missing_file_is_no_input() {
        let e = exec(&["validate-config", "--model", "/nonexistent/m.json", "--hw", "x", "--run", "y"]).unwrap_err();
        assert_eq!(e.code, EXIT_NO_INPUT);
        assert!(e.line().starts_with("error[code=66 kind=input]"));
    }

    #[test]
    fn help_succeeds() {
        assert!(exec(&["--help"]).unwrap().contains("sweep"));
    }

    #[test]
    fn error_codes_by_run_error() {
        let c = CliError::from(RunError::Config(ConfigError::UnknownPreset("x".into())));
        assert_eq!(c.code, EXIT_CONFIG);
    }
}
