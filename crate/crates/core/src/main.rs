//! Command-line driver: compile, simulate, dump, and report.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use tlflow::driver::compile_file;
use tlflow::scope::dump_scope_graph;
use tlflow::sim::{run, RunSpec};
use tlflow::staging::BuildOpts;
use tlflow::verilog::{emit_verilog, measure_code};

#[derive(Parser)]
#[command(name = "tlflow", about = "Transaction-level flow compiler and simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Input design file (.tlv).
    input: PathBuf,
    /// Replication count for `[*]` scopes.
    #[arg(long)]
    ports: Option<u32>,
    /// Optional key=value config file; command-line flags win.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compile a design and emit Verilog.
    Compile {
        #[command(flatten)]
        common: CommonOpts,
        /// Output file (default: input with .v extension).
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Module name (default: input file stem).
        #[arg(long)]
        module: Option<String>,
        /// Print the merged, expanded scope graph.
        #[arg(long)]
        dump_scope: bool,
    },
    /// Simulate a design under its testbench.
    Sim {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        cycles: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Per-stop injection probability.
        #[arg(long)]
        p: Option<f64>,
        /// Checker backpressure probability.
        #[arg(long = "random-backpressure", alias = "q")]
        q: Option<f64>,
        #[arg(long)]
        drain_timeout: Option<u64>,
        /// Check the conservation invariant every cycle.
        #[arg(long)]
        conservation: bool,
        /// Write a VCD waveform.
        #[arg(long)]
        vcd: Option<PathBuf>,
        /// Print the transaction log.
        #[arg(long)]
        log: bool,
    },
    /// Report code-size metrics (source, expanded, Verilog).
    Metrics {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Print resolved field routes.
    DumpFlow {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Print the flattened netlist.
    DumpNetlist {
        #[command(flatten)]
        common: CommonOpts,
    },
}

#[derive(Default, Clone)]
struct FileConfig {
    ports: Option<u32>,
    cycles: Option<u64>,
    seed: Option<u64>,
    p: Option<f64>,
    q: Option<f64>,
    drain_timeout: Option<u64>,
}

fn load_config(path: &PathBuf) -> Result<FileConfig, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let mut cfg = FileConfig::default();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(format!("{}:{}: expected key=value", path.display(), i + 1));
        };
        let (k, v) = (k.trim(), v.trim());
        let bad = |e: std::num::ParseIntError| format!("{}: bad value for {k}: {e}", path.display());
        let badf =
            |e: std::num::ParseFloatError| format!("{}: bad value for {k}: {e}", path.display());
        match k {
            "ports" => cfg.ports = Some(v.parse().map_err(bad)?),
            "cycles" => cfg.cycles = Some(v.parse().map_err(bad)?),
            "seed" => cfg.seed = Some(v.parse().map_err(bad)?),
            "p" => cfg.p = Some(v.parse().map_err(badf)?),
            "q" => cfg.q = Some(v.parse().map_err(badf)?),
            "drain_timeout" => cfg.drain_timeout = Some(v.parse().map_err(bad)?),
            other => return Err(format!("{}: unknown key '{other}'", path.display())),
        }
    }
    Ok(cfg)
}

fn resolve_common(common: &CommonOpts) -> Result<(u32, FileConfig), String> {
    let cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => FileConfig::default(),
    };
    let ports = common.ports.or(cfg.ports).unwrap_or(4);
    if ports < 2 {
        return Err("--ports must be at least 2".into());
    }
    Ok((ports, cfg))
}

fn probability(name: &str, v: f64) -> Result<f64, String> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{name} must be in [0, 1], got {v}"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, String> {
    match cli.cmd {
        Cmd::Compile {
            common,
            output,
            module,
            dump_scope,
        } => {
            let (ports, _) = resolve_common(&common)?;
            let compiled = compile_file(&common.input, ports, &BuildOpts::default())
                .map_err(|d| format!("{}: {d}", common.input.display()))?;
            if dump_scope {
                print!("{}", dump_scope_graph(&compiled.graph));
            }
            let module = module.unwrap_or_else(|| {
                common
                    .input
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "design".into())
            });
            let text = emit_verilog(&compiled.netlist, &module);
            let out = output.unwrap_or_else(|| common.input.with_extension("v"));
            std::fs::write(&out, text).map_err(|e| format!("cannot write {}: {e}", out.display()))?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Sim {
            common,
            cycles,
            seed,
            p,
            q,
            drain_timeout,
            conservation,
            vcd,
            log,
        } => {
            let (ports, cfg) = resolve_common(&common)?;
            let compiled = compile_file(&common.input, ports, &BuildOpts::default())
                .map_err(|d| format!("{}: {d}", common.input.display()))?;
            let spec = RunSpec {
                cycles: cycles.or(cfg.cycles).unwrap_or(10_000),
                seed: seed.or(cfg.seed).unwrap_or(1),
                inject_p: probability("--p", p.or(cfg.p).unwrap_or(0.5))?,
                backpressure_q: probability("--random-backpressure", q.or(cfg.q).unwrap_or(0.0))?,
                drain_timeout: drain_timeout.or(cfg.drain_timeout).unwrap_or(2000),
                check_conservation: conservation,
                vcd_path: vcd,
            };
            let result = run(&compiled.netlist, &spec).map_err(|d| d.to_string())?;
            if log {
                print!("{}", result.log());
            }
            let injected: u64 = result.counters.stops.iter().map(|s| s.injected).sum();
            let delivered: u64 = result.counters.stops.iter().map(|s| s.delivered).sum();
            println!(
                "cycles {}  injected {}  delivered {}",
                result.cycles_run, injected, delivered
            );
            for (i, s) in result.counters.stops.iter().enumerate() {
                let avg = if s.delivered > 0 {
                    format!("{:.1}", s.cum_latency as f64 / s.delivered as f64)
                } else {
                    "-".into()
                };
                println!(
                    "stop {i}: injected {} delivered {} bypass {} forced {} avg_latency {avg}",
                    s.injected, s.delivered, s.bypass_taken, s.forced_onto_ring
                );
            }
            if result.failures.is_empty() {
                println!("checks: all passed");
                Ok(ExitCode::SUCCESS)
            } else {
                for f in result.failures.iter().take(20) {
                    eprintln!("check failed: {f}");
                }
                if result.failures.len() > 20 {
                    eprintln!("... and {} more", result.failures.len() - 20);
                }
                Ok(ExitCode::from(2))
            }
        }
        Cmd::Metrics { common } => {
            let (ports, _) = resolve_common(&common)?;
            let compiled = compile_file(&common.input, ports, &BuildOpts::default())
                .map_err(|d| format!("{}: {d}", common.input.display()))?;
            let expanded = dump_scope_graph(&compiled.graph);
            let verilog = emit_verilog(&compiled.netlist, "design");
            let metrics = measure_code(&compiled.source, &expanded, &verilog);
            print!("{}", metrics.report());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::DumpFlow { common } => {
            let (ports, _) = resolve_common(&common)?;
            let compiled = compile_file(&common.input, ports, &BuildOpts::default())
                .map_err(|d| format!("{}: {d}", common.input.display()))?;
            print!("{}", tlflow::flow::dump_flow(&compiled.flow));
            Ok(ExitCode::SUCCESS)
        }
        Cmd::DumpNetlist { common } => {
            let (ports, _) = resolve_common(&common)?;
            let compiled = compile_file(&common.input, ports, &BuildOpts::default())
                .map_err(|d| format!("{}: {d}", common.input.display()))?;
            print!("{}", compiled.netlist.dump());
            Ok(ExitCode::SUCCESS)
        }
    }
}
