use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pimsim::config::{builtin_model, load_config_file, ArchVariant, FcSplit, HardwareConfig, MacroLayout, Phase, SimConfig};
use pimsim::engine::{self, SimReport};
use pimsim::experiments::{self, Options, FIGURES, KERNELS};
use pimsim::isa::exec::BankMemory;
use pimsim::kernels::{self, rows};
use pimsim::numerics::Bf16;

#[derive(Parser)]
#[command(name = "pimsim", version, about = "Cycle-level simulator of a hybrid DRAM-PIM and SRAM-PIM LLM accelerator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one configuration and write report.json and report.csv.
    Run(RunArgs),
    /// Run a figure sweep and write its CSV.
    Reproduce {
        /// Figure id, or `all`.
        figure: String,
        #[command(flatten)]
        common: Common,
    },
    /// Check a kernel against its binary64 oracle.
    KernelTest {
        /// Kernel name, or `all`.
        kernel: String,
        #[command(flatten)]
        common: Common,
    },
    /// Dump the per-flit trace of a kernel on one channel.
    Trace {
        kernel: String,
        /// Issue every instruction as its own packet instead of fused paths.
        #[arg(long)]
        unfused: bool,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// Directory for output files; defaults to the current directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use full-size models and device counts.
    #[arg(long)]
    full: bool,
    /// Hardware from a config file; other sections are ignored.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mapping {
    OutputSplit,
    InputSplit,
}

#[derive(Clone, Copy, ValueEnum)]
enum Layout {
    #[value(name = "512x8")]
    In512Out8,
    #[value(name = "256x16")]
    In256Out16,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Prefill,
    Decode,
    Full,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Builtin model name.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    batch: Option<u32>,
    /// Prompt length.
    #[arg(long)]
    seq: Option<u32>,
    #[arg(long)]
    gen: Option<u32>,
    #[arg(long, value_enum)]
    phase: Option<PhaseArg>,
    #[arg(long)]
    tp: Option<u32>,
    #[arg(long)]
    pp: Option<u32>,
    /// DRAM_ONLY, DRAM_PLUS_CURRY, HYBRID_BASE or HYBRID_OPT.
    #[arg(long)]
    arch_variant: Option<String>,
    #[arg(long, value_enum)]
    mapping: Option<Mapping>,
    #[arg(long, value_enum)]
    layout: Option<Layout>,
    /// Transformer layers to simulate; defaults to the model's count.
    #[arg(long)]
    layers: Option<u32>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use the builtin model's full layer count even if a config overrides it.
    #[arg(long)]
    full: bool,
    /// Also write the task schedule of the first step to trace.txt.
    #[arg(long)]
    trace: bool,
}

/// Failure with a specific exit code.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn load(path: &Path) -> Result<SimConfig> {
    if !path.is_file() {
        return Err(Exit(2, format!("cannot read config file `{}`", path.display())).into());
    }
    load_config_file(path).map_err(|e| Exit(2, format!("config `{}`: {e}", path.display())).into())
}

fn hardware(config: &Option<PathBuf>) -> Result<HardwareConfig> {
    Ok(match config {
        Some(p) => load(p)?.hardware,
        None => HardwareConfig::default(),
    })
}

/// Write `contents` to `dir/name` through a temporary file and a rename.
fn write_atomic(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating `{}`", dir.display()))?;
    let path = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp"));
    std::fs::write(&tmp, contents).with_context(|| format!("writing `{}`", tmp.display()))?;
    std::fs::rename(&tmp, &path).with_context(|| format!("writing `{}`", path.display()))?;
    Ok(path)
}

fn out_dir(dir: &Option<PathBuf>) -> PathBuf {
    dir.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn resolve(a: &RunArgs) -> Result<SimConfig> {
    let mut cfg = match &a.config {
        Some(p) => load(p)?,
        None => SimConfig::default(),
    };
    if let Some(m) = &a.model {
        cfg.model = builtin_model(m)?;
    } else if a.full {
        if let Ok(m) = builtin_model(&cfg.model.name) {
            cfg.model.num_layers = m.num_layers;
        }
    }
    let r = &mut cfg.run;
    if let Some(v) = a.batch {
        r.batch = v;
    }
    if let Some(v) = a.seq {
        r.prompt_len = v;
    }
    if let Some(v) = a.gen {
        r.gen_len = v;
    }
    if let Some(p) = a.phase {
        r.phase = match p {
            PhaseArg::Prefill => Phase::Prefill,
            PhaseArg::Decode => Phase::Decode,
            PhaseArg::Full => Phase::Full,
        };
    }
    if let Some(v) = a.tp {
        r.tp_degree = v;
    }
    if let Some(v) = a.pp {
        r.pp_degree = v;
    }
    if let Some(v) = &a.arch_variant {
        r.arch_variant = match ArchVariant::parse(v) {
            Some(v) => v,
            None => bail!("unknown arch variant `{v}`; expected one of DRAM_ONLY, DRAM_PLUS_CURRY, HYBRID_BASE, HYBRID_OPT"),
        };
    }
    if let Some(m) = a.mapping {
        r.mapping.fc_split = match m {
            Mapping::OutputSplit => FcSplit::OutputSplit,
            Mapping::InputSplit => FcSplit::InputSplit,
        };
    }
    if let Some(l) = a.layout {
        r.mapping.sram_layout = match l {
            Layout::In512Out8 => MacroLayout::In512Out8,
            Layout::In256Out16 => MacroLayout::In256Out16,
        };
    }
    if let Some(v) = a.seed {
        r.seed = v;
    }
    if let Some(v) = a.layers {
        cfg.model.num_layers = v;
    }
    Ok(cfg)
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let cfg = resolve(&a)?;
    let report: SimReport = engine::run(&cfg.model, &cfg.run, &cfg.hardware)?;
    let dir = out_dir(&a.out_dir);
    let json = write_atomic(&dir, "report.json", &report.to_json())?;
    let csv = write_atomic(&dir, "report.csv", &engine::to_csv(std::slice::from_ref(&report)))?;
    if a.trace {
        let lines = engine::trace_step(&cfg.model, &cfg.run, &cfg.hardware)?;
        let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
        write_atomic(&dir, "trace.txt", &format!("# start finish op class resources\n{text}"))?;
    }
    println!(
        "{} {} batch {} prompt {}: {} cycles, {:.2} tokens/s",
        report.model,
        report.arch_variant.name(),
        report.batch,
        report.prompt_len,
        report.total_cycles,
        report.tokens_per_second
    );
    println!("wrote {} and {}", json.display(), csv.display());
    Ok(())
}

fn cmd_reproduce(figure: &str, c: &Common) -> Result<()> {
    let ids: Vec<&str> = if figure == "all" { FIGURES.to_vec() } else { vec![figure] };
    let opts = Options { full: c.full, seed: c.seed };
    let dir = out_dir(&c.out_dir);
    for id in ids {
        let t = experiments::reproduce(id, opts)?;
        let path = write_atomic(&dir, &format!("{id}.csv"), &t.to_csv())?;
        println!("{id}: {} rows -> {} (expected: {})", t.rows.len(), path.display(), t.expectation);
    }
    Ok(())
}

fn cmd_kernel_test(kernel: &str, c: &Common) -> Result<bool> {
    let hw = hardware(&c.config)?;
    let names: Vec<&str> = if kernel == "all" { KERNELS.to_vec() } else { vec![kernel] };
    println!("{:<8} {:>8} {:>12} {:>10} {:>8} {:>8}  result", "kernel", "elements", "max_error", "tolerance", "unfused", "fused");
    let mut ok = true;
    for n in names {
        let k = experiments::kernel_check(n, &hw)?;
        let limit = k.cycle_limit.map(|l| format!(" (limit {l})")).unwrap_or_default();
        println!(
            "{:<8} {:>8} {:>12.3e} {:>10.3e} {:>8} {:>8}  {}{limit}",
            k.kernel,
            k.elements,
            k.max_error,
            k.tolerance,
            k.unfused_cycles,
            k.cycles,
            if k.passed { "pass" } else { "FAIL" }
        );
        ok &= k.passed;
    }
    Ok(ok)
}

fn cmd_trace(kernel: &str, unfused: bool, c: &Common) -> Result<()> {
    let hw = hardware(&c.config)?;
    let banks = hw.noc.mesh_y as usize;
    let n = 4 * banks;
    let k = match kernel {
        "exp" => kernels::exp_kernel(&hw, n, banks)?,
        "sqrt" => kernels::sqrt_kernel(&hw, n, banks)?,
        "softmax" => kernels::softmax_kernel(&hw, n, banks, Bf16::ZERO)?,
        "rmsnorm" => kernels::rmsnorm_kernel(&hw, n, banks, 1e-5)?,
        "silu" => kernels::silu_kernel(&hw, n, banks)?,
        "rope" => kernels::rope_rearrange(&hw, 128.min(hw.dram.row_width as usize / 2))?,
        other => bail!("unknown kernel `{other}`; available: {}", KERNELS.join(", ")),
    };
    let mut mem = BankMemory::for_hw(&hw);
    let xs: Vec<Bf16> = (0..n).map(|i| Bf16::from_f64((i % 9) as f64 * 0.25 + 0.25)).collect();
    kernels::scatter(&mut mem, rows::IN, banks, &xs);
    kernels::scatter(&mut mem, rows::GAIN, banks, &vec![Bf16::ONE; n]);
    let run = kernels::run_kernel_traced(&k, &hw, mem, !unfused)?;
    let mut text = String::from("# cycle flit coord event\n");
    for e in &run.trace {
        text.push_str(&format!("{e}\n"));
    }
    match &c.out_dir {
        Some(d) => {
            let p = write_atomic(d, &format!("trace_{kernel}.txt"), &text)?;
            println!("{} events over {} cycles -> {}", run.trace.len(), run.cycles, p.display());
        }
        None => {
            use std::io::Write;
            match std::io::stdout().lock().write_all(text.as_bytes()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(e.into()),
                _ => {}
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a).map(|_| true),
        Command::Reproduce { figure, common } => cmd_reproduce(&figure, &common).map(|_| true),
        Command::KernelTest { kernel, common } => cmd_kernel_test(&kernel, &common),
        Command::Trace { kernel, unfused, common } => cmd_trace(&kernel, unfused, &common).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.downcast_ref::<Exit>().map_or(1, |x| x.0))
        }
    }
}
