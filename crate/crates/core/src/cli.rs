//! Command-line front end: `bound`, `plan`, `run`, `bench`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distribution::{build_schedule, DistError, Schedule};
use crate::einsum::{parse_dims, EinsumError, EinsumSpec};
use crate::executor::{run, ExecError, RunOptions, SimulationReport};
use crate::planner::{optimal_path, ContractionTree, PlanError};
use crate::redistribute;
use crate::soap::{best_partition, Access, PartitionCandidate, PartitionResult, Sdg, SoapError};
use crate::suite::{self, max_points, parse_scale, scaled_extents};
use crate::tensor::{random_operands, DenseTensor, TensorError};

pub const BOUND_FORMAT: &str = "einplan.bound/v1";
pub const PLAN_FORMAT: &str = "einplan.plan/v1";
pub const BENCH_FORMAT: &str = "einplan.bench/v1";

#[derive(Debug, Parser)]
#[command(
    name = "einplan",
    version,
    about = "Plan, bound and simulate distributed einsum kernels"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// I/O lower bound of the best fusion partition
    Bound(BoundArgs),
    /// Contraction tree, bounds, process grids and redistributions
    Plan(PlanArgs),
    /// Simulate the distributed schedule on virtual ranks
    Run(RunArgs),
    /// Run the benchmark suite at reduced size
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SuiteName {
    Table3,
}

#[derive(Debug, Args)]
pub struct KernelArgs {
    /// Kernel in Einstein notation, e.g. "ijk,ja,ka->ia"
    #[arg(long)]
    pub einsum: String,
    /// Extents as symbol=extent pairs, e.g. "i=64,j=64,k=64,a=24"
    #[arg(long)]
    pub dims: Option<String>,
    /// Fast memory size S in elements
    #[arg(long, default_value_t = 1024.0)]
    pub fast_mem: f64,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct BoundArgs {
    #[command(flatten)]
    pub kernel: KernelArgs,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub kernel: KernelArgs,
    /// Number of processes
    #[arg(long, default_value_t = 1)]
    pub procs: usize,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub kernel: KernelArgs,
    #[arg(long, default_value_t = 1)]
    pub procs: usize,
    /// Seed of the uniform [-1, 1) input generator
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Compare with the naive oracle; exit 1 on failure
    #[arg(long)]
    pub verify: bool,
    #[arg(long, default_value_t = 1e-10)]
    pub tolerance: f64,
    /// Input tensors (JSON lines), one per operand, instead of random data
    #[arg(long, value_delimiter = ',')]
    pub inputs: Vec<PathBuf>,
    /// Write the gathered output tensor here (JSON lines)
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, hide = true)]
    pub skip_reductions: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value_t = SuiteName::Table3)]
    pub suite: SuiteName,
    /// Factor applied to the initial problem sizes, e.g. "1/64"
    #[arg(long, default_value = "1/64")]
    pub scale: String,
    #[arg(long, default_value_t = 8)]
    pub procs: usize,
    #[arg(long, default_value_t = 1024.0)]
    pub fast_mem: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-10)]
    pub tolerance: f64,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Einsum(#[from] EinsumError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Soap(#[from] SoapError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Usage(String),
    #[error("loop space of {points} points exceeds the cap of {cap} (set {var} to raise it)")]
    ResourceCap {
        points: u128,
        cap: u128,
        var: &'static str,
    },
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Verification(_) | CliError::Exec(_) => 1,
            CliError::Soap(
                SoapError::FastMemoryTooSmall { .. } | SoapError::InfeasibleBudget { .. },
            ) => 3,
            CliError::Dist(_) => 4,
            CliError::ResourceCap { .. } => 5,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermBound {
    pub vertices: Vec<String>,
    pub iteration_indices: String,
    pub accesses: Vec<Access>,
    pub volume: f64,
    pub rho: f64,
    pub x0: f64,
    pub tiles: BTreeMap<char, f64>,
    pub q_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub format: String,
    pub einsum: String,
    pub extents: BTreeMap<char, usize>,
    pub fast_mem: f64,
    pub terms: Vec<TermBound>,
    pub total_q: f64,
    pub candidates: Vec<PartitionCandidate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSummary {
    pub term: usize,
    pub indices: String,
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedistributionSummary {
    pub tensor: String,
    pub from_term: usize,
    pub to_term: usize,
    pub messages: usize,
    pub self_messages: usize,
    pub logical_volume: usize,
    pub transmitted_volume: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub format: String,
    pub einsum: String,
    pub extents: BTreeMap<char, usize>,
    pub procs: usize,
    pub fast_mem: f64,
    pub naive_flops: u128,
    pub tree: ContractionTree,
    pub terms: Vec<TermBound>,
    pub total_q: f64,
    pub candidates: Vec<PartitionCandidate>,
    pub grids: Vec<GridSummary>,
    pub redistributions: Vec<RedistributionSummary>,
    pub schedule: Schedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub name: String,
    pub einsum: String,
    pub extents: BTreeMap<char, usize>,
    pub passed: bool,
    pub max_relative_error: Option<f64>,
    pub allreduce_volume: Option<usize>,
    pub redistribute_volume: Option<usize>,
    pub total_volume: Option<usize>,
    pub q_bound: Option<f64>,
    /// Simulated communication volume over the sequential I/O bound.
    pub volume_over_bound: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub format: String,
    pub suite: String,
    pub scale: f64,
    pub procs: usize,
    pub fast_mem: f64,
    pub seed: u64,
    pub max_points: u128,
    pub kernels: Vec<BenchEntry>,
    pub verified: usize,
    pub total: usize,
}

/// Everything the planning stages produce for one kernel.
pub struct Analysis {
    pub spec: EinsumSpec,
    pub tree: ContractionTree,
    pub partition: PartitionResult,
}

pub fn analyze(spec: EinsumSpec, fast_mem: f64) -> Result<Analysis, CliError> {
    let tree = optimal_path(&spec)?;
    let sdg = Sdg::build(&spec, &tree);
    let partition = best_partition(&sdg, &spec, &tree, fast_mem)?;
    Ok(Analysis {
        spec,
        tree,
        partition,
    })
}

fn term_bounds(partition: &PartitionResult) -> Vec<TermBound> {
    partition
        .blocks
        .iter()
        .map(|b| TermBound {
            vertices: b.vertices.clone(),
            iteration_indices: b.statement.iteration_indices.clone(),
            accesses: b.statement.accesses.clone(),
            volume: b.bound.volume,
            rho: b.bound.rho,
            x0: b.bound.x0,
            tiles: b.bound.tiles.clone(),
            q_bound: b.bound.q_bound,
        })
        .collect()
}

fn kernel_spec(args: &KernelArgs) -> Result<EinsumSpec, CliError> {
    let spec = EinsumSpec::parse(&args.einsum)?;
    match &args.dims {
        Some(d) => Ok(spec.with_extents(&parse_dims(d)?)?),
        None => Ok(spec),
    }
}

fn bound_spec(args: &KernelArgs) -> Result<EinsumSpec, CliError> {
    let spec = kernel_spec(args)?;
    if !spec.is_bound() {
        return Err(CliError::Usage("--dims is required".into()));
    }
    Ok(spec)
}

pub fn bound_report(spec: EinsumSpec, fast_mem: f64) -> Result<BoundReport, CliError> {
    let a = analyze(spec, fast_mem)?;
    Ok(BoundReport {
        format: BOUND_FORMAT.to_string(),
        einsum: a.spec.text(),
        extents: a.spec.extents.clone(),
        fast_mem,
        terms: term_bounds(&a.partition),
        total_q: a.partition.total_q,
        candidates: a.partition.candidates.clone(),
    })
}

pub fn plan_report(spec: EinsumSpec, fast_mem: f64, procs: usize) -> Result<PlanReport, CliError> {
    let a = analyze(spec, fast_mem)?;
    let schedule = build_schedule(&a.spec, &a.tree, &a.partition, procs)?;
    let mut redistributions = Vec::new();
    for rec in &schedule.redistributions {
        let plan = redistribute::plan(&rec.tensor, &rec.source, &rec.destination)
            .map_err(ExecError::from)?;
        redistributions.push(RedistributionSummary {
            tensor: rec.tensor.clone(),
            from_term: rec.from_term,
            to_term: rec.to_term,
            messages: plan.messages.len(),
            self_messages: plan.messages.iter().filter(|m| m.is_self).count(),
            logical_volume: plan.logical_volume,
            transmitted_volume: plan.transmitted_volume,
        });
    }
    Ok(PlanReport {
        format: PLAN_FORMAT.to_string(),
        einsum: a.spec.text(),
        extents: a.spec.extents.clone(),
        procs,
        fast_mem,
        naive_flops: a.spec.flop_count_naive()?,
        terms: term_bounds(&a.partition),
        total_q: a.partition.total_q,
        candidates: a.partition.candidates.clone(),
        grids: schedule
            .terms
            .iter()
            .enumerate()
            .map(|(term, t)| GridSummary {
                term,
                indices: t.dist.grid.indices.clone(),
                dims: t.dist.grid.dims.clone(),
            })
            .collect(),
        redistributions,
        tree: a.tree,
        schedule,
    })
}

fn check_cap(spec: &EinsumSpec) -> Result<(), CliError> {
    let points = spec.iteration_points()?;
    let cap = max_points();
    if points > cap {
        return Err(CliError::ResourceCap {
            points,
            cap,
            var: suite::MAX_POINTS_ENV,
        });
    }
    Ok(())
}

pub fn simulate(
    spec: EinsumSpec,
    fast_mem: f64,
    procs: usize,
    seed: u64,
    inputs: Option<Vec<DenseTensor>>,
    options: &RunOptions,
) -> Result<SimulationReport, CliError> {
    check_cap(&spec)?;
    let a = analyze(spec, fast_mem)?;
    let schedule = build_schedule(&a.spec, &a.tree, &a.partition, procs)?;
    let (inputs, seed) = match inputs {
        Some(t) => (t, None),
        None => (random_operands(&a.spec, seed)?, Some(seed)),
    };
    let mut report = run(&a.spec, &a.tree, &schedule, &inputs, options)?;
    report.seed = seed;
    Ok(report)
}

fn read_tensor(path: &PathBuf) -> Result<DenseTensor, CliError> {
    Ok(DenseTensor::read_jsonl(BufReader::new(File::open(path)?))?)
}

fn emit_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<(), CliError> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

fn fmt_tiles(tiles: &BTreeMap<char, f64>) -> String {
    tiles
        .iter()
        .map(|(c, t)| format!("{c}={t:.4}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn text_terms(out: &mut dyn Write, terms: &[TermBound], total_q: f64) -> io::Result<()> {
    for (k, t) in terms.iter().enumerate() {
        writeln!(
            out,
            "term {k} [{}] over {}: rho={:.6} x0={:.3} Q>={:.6e}",
            t.vertices.join(","),
            t.iteration_indices,
            t.rho,
            t.x0,
            t.q_bound
        )?;
        writeln!(out, "  tiles {}", fmt_tiles(&t.tiles))?;
    }
    writeln!(out, "total Q>={total_q:.6e}")
}

fn cmd_bound(args: &BoundArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let report = bound_report(bound_spec(&args.kernel)?, args.kernel.fast_mem)?;
    match args.kernel.format {
        Format::Json => emit_json(out, &report),
        Format::Text => {
            writeln!(out, "{} with S={}", report.einsum, report.fast_mem)?;
            Ok(text_terms(out, &report.terms, report.total_q)?)
        }
    }
}

fn cmd_plan(args: &PlanArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let report = plan_report(bound_spec(&args.kernel)?, args.kernel.fast_mem, args.procs)?;
    match args.kernel.format {
        Format::Json => emit_json(out, &report),
        Format::Text => {
            writeln!(out, "{} on P={}", report.einsum, report.procs)?;
            for (s, step) in report.tree.steps.iter().enumerate() {
                writeln!(
                    out,
                    "step {s}: {} {} flops={}",
                    step.einsum_text(),
                    step.op_class,
                    step.flops
                )?;
            }
            writeln!(
                out,
                "total flops={} (naive {})",
                report.tree.total_flops, report.naive_flops
            )?;
            text_terms(out, &report.terms, report.total_q)?;
            for g in &report.grids {
                let dims: Vec<String> = g.dims.iter().map(usize::to_string).collect();
                writeln!(
                    out,
                    "grid {} ({}) = ({})",
                    g.term,
                    g.indices,
                    dims.join(", ")
                )?;
            }
            for r in &report.redistributions {
                writeln!(
                    out,
                    "redistribute {} term {} -> {}: {} messages, {} elements sent",
                    r.tensor, r.from_term, r.to_term, r.messages, r.transmitted_volume
                )?;
            }
            Ok(())
        }
    }
}

fn cmd_run(args: &RunArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut spec = kernel_spec(&args.kernel)?;
    let inputs = if args.inputs.is_empty() {
        None
    } else {
        let tensors = args
            .inputs
            .iter()
            .map(read_tensor)
            .collect::<Result<Vec<_>, _>>()?;
        if !spec.is_bound() {
            let shapes: Vec<Vec<usize>> = tensors.iter().map(|t| t.shape().to_vec()).collect();
            spec = spec.bind_extents(&shapes)?;
        }
        Some(tensors)
    };
    if !spec.is_bound() {
        return Err(CliError::Usage("--dims or --inputs is required".into()));
    }
    let options = RunOptions {
        verify: args.verify,
        tolerance: args.tolerance,
        skip_reductions: args.skip_reductions,
    };
    let report = simulate(
        spec,
        args.kernel.fast_mem,
        args.procs,
        args.seed,
        inputs,
        &options,
    )?;
    if let Some(path) = &args.output {
        report
            .output
            .write_jsonl(BufWriter::new(File::create(path)?))?;
    }
    match args.kernel.format {
        Format::Json => emit_json(out, &report)?,
        Format::Text => {
            writeln!(out, "{} on P={}", report.einsum, report.procs)?;
            writeln!(
                out,
                "volume: allreduce={} redistribute={} total={} max/rank={}",
                report.comm.allreduce,
                report.comm.redistribute,
                report.comm.total,
                report.comm.max_per_rank
            )?;
            writeln!(out, "replicas coherent: {}", report.replicas_coherent)?;
            if let Some(v) = &report.verification {
                writeln!(
                    out,
                    "verification: {} (max relative error {:.3e}, tolerance {:.1e})",
                    if v.passed { "pass" } else { "FAIL" },
                    v.max_relative_error,
                    v.tolerance
                )?;
            }
        }
    }
    match &report.verification {
        Some(v) if !v.passed => Err(CliError::Verification(format!(
            "max relative error {:e} exceeds {:e}",
            v.max_relative_error, v.tolerance
        ))),
        _ => Ok(()),
    }
}

fn bench_entry(kernel: &suite::Kernel, args: &BenchArgs, scale: f64, cap: u128) -> BenchEntry {
    let extents = scaled_extents(kernel, scale, cap);
    let mut entry = BenchEntry {
        name: kernel.name.to_string(),
        einsum: kernel.einsum.to_string(),
        extents: extents.clone(),
        passed: false,
        max_relative_error: None,
        allreduce_volume: None,
        redistribute_volume: None,
        total_volume: None,
        q_bound: None,
        volume_over_bound: None,
        error: None,
    };
    let options = RunOptions {
        verify: true,
        tolerance: args.tolerance,
        skip_reductions: false,
    };
    let result = kernel
        .spec(&extents)
        .map_err(CliError::from)
        .and_then(|spec| {
            let q = bound_report(spec.clone(), args.fast_mem)?.total_q;
            Ok((
                q,
                simulate(spec, args.fast_mem, args.procs, args.seed, None, &options)?,
            ))
        });
    match result {
        Ok((q, report)) => {
            let v = report.verification.expect("bench always verifies");
            entry.passed = v.passed;
            entry.max_relative_error = Some(v.max_relative_error);
            entry.allreduce_volume = Some(report.comm.allreduce);
            entry.redistribute_volume = Some(report.comm.redistribute);
            entry.total_volume = Some(report.comm.total);
            entry.q_bound = Some(q);
            entry.volume_over_bound = Some(report.comm.total as f64 / q);
        }
        Err(e) => entry.error = Some(e.to_string()),
    }
    entry
}

fn cmd_bench(args: &BenchArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let scale = parse_scale(&args.scale)
        .ok_or_else(|| CliError::Usage(format!("bad scale `{}`", args.scale)))?;
    let cap = max_points();
    let kernels = match args.suite {
        SuiteName::Table3 => suite::table3(),
    };
    let entries: Vec<BenchEntry> = kernels
        .iter()
        .map(|k| bench_entry(k, args, scale, cap))
        .collect();
    let verified = entries.iter().filter(|e| e.passed).count();
    let report = BenchReport {
        format: BENCH_FORMAT.to_string(),
        suite: "table3".to_string(),
        scale,
        procs: args.procs,
        fast_mem: args.fast_mem,
        seed: args.seed,
        max_points: cap,
        total: entries.len(),
        verified,
        kernels: entries,
    };
    match args.format {
        Format::Json => emit_json(out, &report)?,
        Format::Text => {
            for e in &report.kernels {
                let dims: Vec<String> = e.extents.iter().map(|(c, n)| format!("{c}={n}")).collect();
                match &e.error {
                    Some(err) => writeln!(out, "{:<14} ERROR {err}", e.name)?,
                    None => writeln!(
                        out,
                        "{:<14} {} err={:.2e} volume={} Q>={:.3e} ratio={:.3} [{}]",
                        e.name,
                        if e.passed { "pass" } else { "FAIL" },
                        e.max_relative_error.unwrap_or(f64::NAN),
                        e.total_volume.unwrap_or(0),
                        e.q_bound.unwrap_or(f64::NAN),
                        e.volume_over_bound.unwrap_or(f64::NAN),
                        dims.join(",")
                    )?,
                }
            }
            writeln!(out, "{}/{} verified", report.verified, report.total)?;
        }
    }
    if verified < report.total {
        return Err(CliError::Verification(format!(
            "{} of {} kernels failed",
            report.total - verified,
            report.total
        )));
    }
    Ok(())
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Bound(a) => cmd_bound(a, out),
        Command::Plan(a) => cmd_plan(a, out),
        Command::Run(a) => cmd_run(a, out),
        Command::Bench(a) => cmd_bench(a, out),
    }
}
