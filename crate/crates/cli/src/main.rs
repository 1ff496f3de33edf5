use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mxsim::cost::{comparison_report, footprint_csv, footprint_markdown, footprint_table};
use mxsim::formats::{ElementFormat, FormatDescriptor};
use mxsim::gemm::{simulate_training_iteration, CoreConfig, SimReport};
use mxsim::layout;
use mxsim::mac::{traces_to_jsonl, MacModeKind, MacScript, MacVariant};
use mxsim::matrix::{Matrix, MATRIX_MAGIC};
use mxsim::quant::{quantize_matrix, BlockGeometry, Orientation, QuantizedMatrix};
use mxsim::train::{train, Precision, TrainConfig, TrainRun};
use mxsim::workload::WorkloadSpec;
use mxsim::MxError;

#[derive(Parser)]
#[command(name = "mxsim", version, about = "MX accelerator model: codecs, datapath traces, cycle and cost models, training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Emit {
    Json,
    Csv,
    Md,
}

#[derive(Args)]
struct Output {
    /// Output encoding.
    #[arg(long, value_enum, default_value = "json")]
    emit: Emit,
    /// Write to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WorkloadArgs {
    /// Workload descriptor JSON; defaults to the built-in pusher network.
    #[arg(long)]
    workload: Option<PathBuf>,
    /// Override the workload's batch size.
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Describe the six element formats.
    Formats {
        #[command(flatten)]
        output: Output,
    },
    /// Quantize a matrix (CSV or MXMF binary) and report error statistics.
    Quantize {
        /// Input matrix.
        input: PathBuf,
        #[arg(long, default_value = "int8")]
        format: String,
        #[arg(long, default_value = "square8x8")]
        geometry: String,
        /// Block orientation for vector geometries (row-blocks or col-blocks).
        #[arg(long)]
        orientation: Option<String>,
        /// Where to write the serialized quantized matrix.
        #[arg(long)]
        save: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Run a scripted MAC sequence and dump per-cycle traces.
    MacTrace {
        /// Script JSON: {"format", "variant"?, "steps": [{"a"|"a_values", "b"|"b_values", "scale_exp"?}]}.
        script: PathBuf,
        /// Override the script's MAC variant (ext, norm, ext-bypass).
        #[arg(long)]
        variant: Option<String>,
        #[command(flatten)]
        output: Output,
    },
    /// Cycle-level simulation of one training iteration.
    Simulate {
        #[command(flatten)]
        workload: WorkloadArgs,
        /// MAC mode (int8, fp8fp6, fp4).
        #[arg(long)]
        mode: Option<String>,
        /// Element format; must fit the mode.
        #[arg(long)]
        format: Option<String>,
        #[arg(long)]
        variant: Option<String>,
        /// Overlap each wave's writeback with the next wave.
        #[arg(long)]
        overlap_writeback: bool,
        #[command(flatten)]
        output: Output,
    },
    /// Training memory footprint table.
    Footprint {
        #[command(flatten)]
        workload: WorkloadArgs,
        #[command(flatten)]
        output: Output,
    },
    /// Comparison table against the published Dacapo figures.
    Compare {
        #[command(flatten)]
        workload: WorkloadArgs,
        #[command(flatten)]
        output: Output,
    },
    /// Train the workload on the synthetic dynamics task.
    Train {
        #[command(flatten)]
        workload: WorkloadArgs,
        /// fp32 or an element format.
        #[arg(long, default_value = "int8")]
        format: String,
        #[arg(long, default_value = "square8x8")]
        geometry: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        samples: Option<usize>,
        /// Record elapsed wall time in the curve (output then varies per run).
        #[arg(long)]
        wall_time: bool,
        #[command(flatten)]
        output: Output,
    },
}

/// Input rejected before any computation.
#[derive(Debug)]
struct InvalidInput(String);

impl std::fmt::Display for InvalidInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InvalidInput {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    InvalidInput(msg.into()).into()
}

fn emit(output: &Output, text: String) -> anyhow::Result<()> {
    match &output.out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

fn read(path: &Path) -> anyhow::Result<Vec<u8>> {
    fs::read(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))
}

fn parse_format(s: &str) -> anyhow::Result<ElementFormat> {
    s.parse::<ElementFormat>().map_err(|e| invalid(e.to_string()))
}

fn load_workload(args: &WorkloadArgs) -> anyhow::Result<WorkloadSpec> {
    let w = match &args.workload {
        Some(p) => {
            let text = String::from_utf8(read(p)?).map_err(|_| invalid("workload file is not UTF-8"))?;
            WorkloadSpec::from_json(&text).map_err(|e| invalid(e.to_string()))?
        }
        None => WorkloadSpec::pusher(32),
    };
    let w = match args.batch {
        Some(b) => w.with_batch(b),
        None => w,
    };
    w.validate().map_err(|e| invalid(e.to_string()))?;
    Ok(w)
}

fn cmd_formats(output: &Output) -> anyhow::Result<()> {
    let ds: Vec<FormatDescriptor> = ElementFormat::ALL.iter().map(|f| f.descriptor()).collect();
    let header = ["format", "bits", "exp_bits", "mant_bits", "bias", "emax", "max_finite", "min_positive", "inf", "nan"];
    let cells = |d: &FormatDescriptor| {
        vec![
            d.name.to_string(),
            d.total_bits.to_string(),
            d.exp_bits.to_string(),
            d.mant_bits.to_string(),
            d.bias.to_string(),
            d.emax.to_string(),
            d.max_finite.to_string(),
            d.min_positive.to_string(),
            d.has_inf.to_string(),
            d.has_nan.to_string(),
        ]
    };
    let text = match output.emit {
        Emit::Json => json(&ds),
        Emit::Csv => table_csv(&header, ds.iter().map(cells)),
        Emit::Md => table_md(&header, ds.iter().map(cells)),
    };
    emit(output, text)
}

fn table_csv(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

fn table_md(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut s = format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len()));
    for r in rows {
        s.push_str(&format!("| {} |\n", r.join(" | ")));
    }
    s
}

#[derive(Serialize)]
struct QuantStats {
    rows: usize,
    cols: usize,
    format: ElementFormat,
    geometry: BlockGeometry,
    orientation: Orientation,
    blocks: usize,
    zero_blocks: usize,
    storage_bits: u64,
    bits_per_element: f64,
    min_scale_exp: i32,
    max_scale_exp: i32,
    max_abs_error: f64,
    rmse: f64,
}

fn quant_stats(m: &Matrix, q: &QuantizedMatrix) -> QuantStats {
    let deq = q.dequantize();
    let (mut max_err, mut sq) = (0.0f64, 0.0f64);
    for (x, y) in m.data.iter().zip(&deq) {
        let e = (f64::from(*x) - y).abs();
        max_err = max_err.max(e);
        sq += e * e;
    }
    let n = m.data.len().max(1) as f64;
    let exps = q.blocks.iter().map(|b| b.scale.exponent());
    QuantStats {
        rows: q.rows,
        cols: q.cols,
        format: q.format,
        geometry: q.geometry,
        orientation: q.orientation,
        blocks: q.blocks.len(),
        zero_blocks: q.blocks.iter().filter(|b| b.codes.iter().all(|&c| c == 0)).count(),
        storage_bits: q.storage_bits(),
        bits_per_element: q.storage_bits() as f64 / n,
        min_scale_exp: exps.clone().min().unwrap_or(0),
        max_scale_exp: exps.max().unwrap_or(0),
        max_abs_error: max_err,
        rmse: (sq / n).sqrt(),
    }
}

fn read_matrix(path: &Path) -> anyhow::Result<Matrix> {
    let bytes = read(path)?;
    let m = if bytes.starts_with(&MATRIX_MAGIC) {
        Matrix::from_bytes(&bytes)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| invalid("matrix file is neither MXMF binary nor UTF-8 CSV"))?;
        Matrix::from_csv(&text)
    };
    m.map_err(|e| invalid(e.to_string()))
}

fn cmd_quantize(
    input: &Path,
    format: &str,
    geometry: &str,
    orientation: Option<&str>,
    save: Option<&Path>,
    output: &Output,
) -> anyhow::Result<()> {
    let format = parse_format(format)?;
    let geometry = BlockGeometry::parse(geometry).map_err(|e| invalid(e.to_string()))?;
    let orientation = match orientation {
        Some(o) => Orientation::parse(o).map_err(|e| invalid(e.to_string()))?,
        None if geometry == BlockGeometry::Square8x8 => Orientation::Square,
        None => Orientation::RowBlocks,
    };
    let m = read_matrix(input)?;
    if let Some(v) = m.data.iter().find(|v| !v.is_finite()) {
        bail!(invalid(format!("matrix contains non-finite value {v}")));
    }
    let q = quantize_matrix(&m, format, geometry, orientation).map_err(|e| match e {
        MxError::Geometry(msg) => invalid(msg),
        other => other.into(),
    })?;
    if let Some(p) = save {
        fs::write(p, layout::to_bytes(&q)).with_context(|| format!("writing {}", p.display()))?;
    }
    let s = quant_stats(&m, &q);
    let header = [
        "rows", "cols", "format", "geometry", "orientation", "blocks", "zero_blocks", "storage_bits",
        "bits_per_element", "min_scale_exp", "max_scale_exp", "max_abs_error", "rmse",
    ];
    let row = vec![
        s.rows.to_string(),
        s.cols.to_string(),
        s.format.to_string(),
        format!("{:?}", s.geometry),
        format!("{:?}", s.orientation),
        s.blocks.to_string(),
        s.zero_blocks.to_string(),
        s.storage_bits.to_string(),
        format!("{}", s.bits_per_element),
        s.min_scale_exp.to_string(),
        s.max_scale_exp.to_string(),
        format!("{:e}", s.max_abs_error),
        format!("{:e}", s.rmse),
    ];
    let text = match output.emit {
        Emit::Json => json(&s),
        Emit::Csv => table_csv(&header, std::iter::once(row)),
        Emit::Md => table_md(&header, std::iter::once(row)),
    };
    emit(output, text)
}

fn cmd_mac_trace(script: &Path, variant: Option<&str>, output: &Output) -> anyhow::Result<()> {
    let text = String::from_utf8(read(script)?).map_err(|_| invalid("script is not UTF-8"))?;
    let mut script = MacScript::from_json(&text).map_err(|e| invalid(e.to_string()))?;
    if let Some(v) = variant {
        script.variant = MacVariant::parse(v).map_err(|e| invalid(e.to_string()))?;
    }
    let ops = script.operands().map_err(|e| invalid(e.to_string()))?;
    let (_, traces) = mxsim::mac::run_traced(&ops, mxsim::mac::MacMode::for_format(script.format), script.variant)
        .map_err(|e| match e {
            MxError::CodeOutOfRange { .. } | MxError::Invalid(_) => invalid(e.to_string()),
            other => other.into(),
        })?;
    let header = ["cycle", "accumulator_in", "accumulator_out", "l2_value", "l2_lsb_exp", "bypass_taken", "saturated"];
    let rows = traces.iter().map(|t| {
        vec![
            t.cycle.to_string(),
            format!("{:e}", t.accumulator_in),
            format!("{:e}", t.accumulator_out),
            t.l2_output.value.to_string(),
            t.l2_output.lsb_exp.to_string(),
            t.bypass_taken.to_string(),
            t.saturated.to_string(),
        ]
    });
    let text = match output.emit {
        Emit::Json => traces_to_jsonl(&traces),
        Emit::Csv => table_csv(&header, rows),
        Emit::Md => table_md(&header, rows),
    };
    emit(output, text)
}

fn sim_markdown(r: &SimReport) -> String {
    let header = ["stage", "layer", "m", "k", "n", "waves", "compute", "stall", "total", "utilization", "bw bits/cycle"];
    let mut s = table_md(
        &header,
        r.jobs.iter().map(|j| {
            vec![
                format!("{:?}", j.stage),
                j.layer.to_string(),
                j.m.to_string(),
                j.k.to_string(),
                j.n.to_string(),
                j.waves.to_string(),
                j.compute_cycles.to_string(),
                j.stall_cycles.to_string(),
                j.total_cycles.to_string(),
                format!("{:.4}", j.utilization),
                format!("{:.1}", j.bw_used_bits_per_cycle),
            ]
        }),
    );
    s.push_str(&format!(
        "\n{} ({}) at {} MHz: {} cycles ({} compute, {} stall), {:.3} us, utilization {:.4}\n",
        r.format, r.mode.name(), r.freq_mhz, r.total_cycles, r.compute_cycles, r.stall_cycles, r.latency_us, r.utilization
    ));
    s
}

fn cmd_simulate(
    args: &WorkloadArgs,
    mode: Option<&str>,
    format: Option<&str>,
    variant: Option<&str>,
    overlap: bool,
    output: &Output,
) -> anyhow::Result<()> {
    let w = load_workload(args)?;
    let mode = mode.map(MacModeKind::parse).transpose().map_err(|e| invalid(e.to_string()))?;
    let format = match (format.map(parse_format).transpose()?, mode) {
        (Some(f), Some(m)) if MacModeKind::for_format(f) != m => {
            bail!(invalid(format!("format {f} does not run in mode {}", m.name())))
        }
        (Some(f), _) => f,
        (None, Some(MacModeKind::Int8)) => ElementFormat::Int8,
        (None, Some(MacModeKind::Fp8Fp6)) => ElementFormat::Fp8E4m3,
        (None, Some(MacModeKind::Fp4)) => ElementFormat::Fp4E2m1,
        (None, None) => w.format.unwrap_or(ElementFormat::Int8),
    };
    let mut cfg = CoreConfig::reference(format);
    cfg.overlap_writeback = overlap;
    if let Some(v) = variant {
        cfg.variant = MacVariant::parse(v).map_err(|e| invalid(e.to_string()))?;
    }
    let r = simulate_training_iteration(&cfg, &w);
    let text = match output.emit {
        Emit::Json => json(&r),
        Emit::Csv => r.to_csv(),
        Emit::Md => sim_markdown(&r),
    };
    emit(output, text)
}

fn cmd_footprint(args: &WorkloadArgs, output: &Output) -> anyhow::Result<()> {
    let w = load_workload(args)?;
    let rows = footprint_table(&w);
    let text = match output.emit {
        Emit::Json => json(&rows),
        Emit::Csv => footprint_csv(&rows),
        Emit::Md => footprint_markdown(&rows),
    };
    emit(output, text)
}

fn cmd_compare(args: &WorkloadArgs, output: &Output) -> anyhow::Result<()> {
    let w = load_workload(args)?;
    let r = comparison_report(&w, &[ElementFormat::Int8, ElementFormat::Fp8E4m3, ElementFormat::Fp4E2m1]);
    let text = match output.emit {
        Emit::Json => json(&r),
        Emit::Csv => r.to_csv(),
        Emit::Md => r.to_markdown(),
    };
    emit(output, text)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config: &'a TrainConfig,
    final_loss: f64,
    run: &'a TrainRun,
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    args: &WorkloadArgs,
    format: &str,
    geometry: &str,
    epochs: Option<usize>,
    lr: Option<f32>,
    seed: Option<u64>,
    samples: Option<usize>,
    wall_time: bool,
    output: &Output,
) -> anyhow::Result<()> {
    let precision = Precision::parse(format).map_err(|e| invalid(e.to_string()))?;
    let geometry = BlockGeometry::parse(geometry).map_err(|e| invalid(e.to_string()))?;
    let mut cfg = TrainConfig::pusher(precision, geometry);
    cfg.workload = load_workload(args)?;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = lr {
        cfg.lr = lr;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = samples {
        cfg.train_samples = n;
    }
    cfg.record_wall_time = wall_time;
    let run = train(&cfg).map_err(|e| match e {
        MxError::Invalid(m) => invalid(m),
        MxError::Geometry(m) => invalid(m),
        other => other.into(),
    })?;
    let text = match output.emit {
        Emit::Json => json(&TrainSummary { config: &cfg, final_loss: run.final_loss(), run: &run }),
        Emit::Csv => run.curve_csv(),
        Emit::Md => table_md(
            &["epoch", "loss", "wall_time", "simulated_time_us"],
            run.curve.iter().map(|r| {
                vec![
                    r.epoch.to_string(),
                    format!("{:.6}", r.loss),
                    format!("{:.3}", r.wall_time_s),
                    format!("{:.3}", r.simulated_time_us),
                ]
            }),
        ),
    };
    emit(output, text)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Formats { output } => cmd_formats(output),
        Command::Quantize { input, format, geometry, orientation, save, output } => {
            cmd_quantize(input, format, geometry, orientation.as_deref(), save.as_deref(), output)
        }
        Command::MacTrace { script, variant, output } => cmd_mac_trace(script, variant.as_deref(), output),
        Command::Simulate { workload, mode, format, variant, overlap_writeback, output } => cmd_simulate(
            workload,
            mode.as_deref(),
            format.as_deref(),
            variant.as_deref(),
            *overlap_writeback,
            output,
        ),
        Command::Footprint { workload, output } => cmd_footprint(workload, output),
        Command::Compare { workload, output } => cmd_compare(workload, output),
        Command::Train { workload, format, geometry, epochs, lr, seed, samples, wall_time, output } => {
            cmd_train(workload, format, geometry, *epochs, *lr, *seed, *samples, *wall_time, output)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let contract = e.downcast_ref::<MxError>().is_some_and(MxError::is_contract_violation);
            ExitCode::from(if contract { 2 } else { 1 })
        }
    }
}
