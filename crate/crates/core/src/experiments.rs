//! Figure sweeps. Each figure is a grid of runs reduced to a CSV table.
//!
//! Desk scale keeps one device and a single transformer layer (two for the
//! device-count studies); `full` uses every layer and full-size device
//! counts, and rows that do not fit report the error instead.

use serde::Serialize;

use crate::config::{ArchVariant, AttentionTarget, FcSplit, FcTarget, HardwareConfig, MacroLayout, ModelConfig, Phase, RunConfig, VoltageMode, builtin_model};
use crate::engine::{sweep, SimReport, SweepPoint};
use crate::error::{Error, Result};
use crate::isa::exec::BankMemory;
use crate::kernels::{self, reference, rows};
use crate::numerics::Bf16;

pub const FIGURES: [&str; 9] = ["fig5", "fig8", "fig13", "fig14", "fig15", "fig16", "fig18", "fig19", "fig20"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Options {
    pub full: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FigureTable {
    pub id: String,
    /// Expected trend, for the companion notes.
    pub expectation: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl FigureTable {
    fn new(id: &str, expectation: &str, columns: &[&str]) -> Self {
        FigureTable {
            id: id.into(),
            expectation: expectation.into(),
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory csv");
        for r in &self.rows {
            w.write_record(r).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    /// Values of one column parsed as numbers; unparsable cells are skipped.
    pub fn column(&self, name: &str) -> Vec<f64> {
        let Some(i) = self.columns.iter().position(|c| c == name) else {
            return Vec::new();
        };
        self.rows.iter().filter_map(|r| r[i].parse().ok()).collect()
    }
}

fn model(name: &str, opts: Options, desk_layers: u32) -> ModelConfig {
    let m = builtin_model(name).expect("builtin model");
    if opts.full {
        m
    } else {
        ModelConfig {
            num_layers: desk_layers,
            ..m
        }
    }
}

fn decode(batch: u32, seq: u32, variant: ArchVariant, opts: Options) -> RunConfig {
    RunConfig {
        batch,
        prompt_len: seq,
        gen_len: if opts.full { 64 } else { 2 },
        phase: Phase::Decode,
        arch_variant: variant,
        seed: opts.seed,
        ..Default::default()
    }
}

fn point(model: &ModelConfig, run: RunConfig, hw: &HardwareConfig) -> SweepPoint {
    SweepPoint {
        model: model.clone(),
        run,
        hw: hw.clone(),
    }
}

fn cell(r: &Result<SimReport>, f: impl Fn(&SimReport) -> String) -> String {
    match r {
        Ok(r) => f(r),
        Err(_) => "NaN".into(),
    }
}

fn err(r: &Result<SimReport>) -> String {
    r.as_ref().err().map(|e| e.to_string()).unwrap_or_default()
}

fn ratio(a: &Result<SimReport>, b: &Result<SimReport>, f: impl Fn(&SimReport) -> f64) -> String {
    match (a, b) {
        (Ok(a), Ok(b)) if f(b) > 0.0 => format!("{:.4}", f(a) / f(b)),
        _ => "NaN".into(),
    }
}

fn total(r: &SimReport) -> f64 {
    r.total_cycles as f64
}

fn fig5(opts: Options) -> FigureTable {
    let mut t = FigureTable::new(
        "fig5",
        "non-linear share of DRAM-only decode latency grows with context length",
        &["model", "seq", "nonlinear_cycles", "total_cycles", "nonlinear_share", "error"],
    );
    let m = model("llama2-7b", opts, 1);
    let hw = HardwareConfig::default();
    let seqs = [1024, 4096, 16384, 32768];
    let pts: Vec<_> = seqs.iter().map(|&s| point(&m, decode(1, s, ArchVariant::DramOnly, opts), &hw)).collect();
    for (s, r) in seqs.iter().zip(sweep(&pts)) {
        t.rows.push(vec![
            m.name.clone(),
            s.to_string(),
            cell(&r, |r| r.phases.nonlinear.to_string()),
            cell(&r, |r| r.total_cycles.to_string()),
            cell(&r, |r| format!("{:.4}", r.phases.nonlinear as f64 / r.total_cycles as f64)),
            err(&r),
        ]);
    }
    t
}

fn fig8(opts: Options) -> FigureTable {
    let mut t = FigureTable::new(
        "fig8",
        "decoupled column decoder speeds up end-to-end decode by about 1.15-1.5x",
        &["model", "batch", "seq", "base_cycles", "opt_cycles", "speedup", "error"],
    );
    let m = model("llama2-13b", opts, 1);
    let hw = HardwareConfig::default();
    let grid: Vec<(u32, u32)> = [16u32, 32, 64].iter().flat_map(|&b| [1024u32, 4096].map(|s| (b, s))).collect();
    let pts: Vec<_> = grid
        .iter()
        .flat_map(|&(b, s)| [ArchVariant::HybridBase, ArchVariant::HybridOpt].map(|v| point(&m, decode(b, s, v, opts), &hw)))
        .collect();
    let res = sweep(&pts);
    for ((b, s), pair) in grid.iter().zip(res.chunks(2)) {
        t.rows.push(vec![
            m.name.clone(),
            b.to_string(),
            s.to_string(),
            cell(&pair[0], |r| r.total_cycles.to_string()),
            cell(&pair[1], |r| r.total_cycles.to_string()),
            ratio(&pair[0], &pair[1], total),
            format!("{}{}", err(&pair[0]), err(&pair[1])),
        ]);
    }
    t
}

fn fig13(opts: Options) -> FigureTable {
    let mut t = FigureTable::new(
        "fig13",
        "hybrid lowers per-token latency at TP=8 and spends more energy on cross-die traffic",
        &["model", "devices", "arch_variant", "latency_ms_per_token", "tokens_per_second", "energy_per_token_uj", "dram_pj", "sram_pj", "bond_pj", "noc_pj", "link_pj", "nlu_pj", "error"],
    );
    let (m, tp, pp, batch, seq) = if opts.full {
        (model("gpt3-175b", opts, 1), 8, 4, 64, 131072)
    } else {
        (model("llama2-13b", opts, 2), 2, 1, 64, 2048)
    };
    let hw = HardwareConfig::default();
    let variants = [ArchVariant::DramOnly, ArchVariant::HybridOpt];
    let pts: Vec<_> = variants
        .iter()
        .map(|&v| {
            let r = RunConfig { tp_degree: tp, pp_degree: pp, ..decode(batch, seq, v, opts) };
            point(&m, r, &hw)
        })
        .collect();
    for (v, r) in variants.iter().zip(sweep(&pts)) {
        t.rows.push(vec![
            m.name.clone(),
            (tp * pp).to_string(),
            v.name().into(),
            cell(&r, |r| format!("{:.4}", r.decode_cycles as f64 * r.clock_period_ns * 1e-6 / r.gen_len.max(1) as f64)),
            cell(&r, |r| format!("{:.2}", r.tokens_per_second)),
            cell(&r, |r| format!("{:.3}", r.energy_per_token_pj * 1e-6)),
            cell(&r, |r| format!("{:.0}", r.energy.dram_pj)),
            cell(&r, |r| format!("{:.0}", r.energy.sram_pj)),
            cell(&r, |r| format!("{:.0}", r.energy.bond_pj)),
            cell(&r, |r| format!("{:.0}", r.energy.noc_pj)),
            cell(&r, |r| format!("{:.0}", r.energy.link_pj)),
            cell(&r, |r| format!("{:.0}", r.energy.nlu_pj)),
            err(&r),
        ]);
    }
    t
}

fn fig14(opts: Options) -> FigureTable {
    let mut t = FigureTable::new(
        "fig14",
        "no SRAM gain at batch 1; hybrid gain grows with batch; Curry gain grows with context",
        &["model", "batch", "seq", "arch_variant", "tokens_per_second", "speedup_vs_dram_only", "error"],
    );
    let m = model("llama2-7b", opts, 1);
    let hw = HardwareConfig::default();
    let grid: Vec<(u32, u32)> = [1u32, 16, 64].iter().flat_map(|&b| [1024u32, 4096].map(|s| (b, s))).collect();
    let pts: Vec<_> = grid
        .iter()
        .flat_map(|&(b, s)| ArchVariant::ALL.map(|v| point(&m, decode(b, s, v, opts), &hw)))
        .collect();
    let res = sweep(&pts);
    for ((b, s), group) in grid.iter().zip(res.chunks(ArchVariant::ALL.len())) {
        for (v, r) in ArchVariant::ALL.iter().zip(group) {
            t.rows.push(vec![
                m.name.clone(),
                b.to_string(),
                s.to_string(),
                v.name().into(),
                cell(r, |r| format!("{:.3}", r.tokens_per_second)),
                ratio(&group[0], r, total),
                err(r),
            ]);
        }
    }
    t
}

fn fig15(opts: Options) -> FigureTable {
    let mut t = FigureTable::new(
        "fig15",
        "bank utilization falls with TP and the DRAM-only and hybrid latencies converge",
        &["model", "tp", "bank_utilization", "dram_only_cycles", "hybrid_cycles", "ratio", "error"],
    );
    let m = model("llama2-13b", opts, 1);
    let hw = HardwareConfig::default();
    let tps = [1u32, 2, 4, 8, 16, 32];
    let pts: Vec<_> = tps
        .iter()
        .flat_map(|&tp| [ArchVariant::DramOnly, ArchVariant::HybridOpt].map(|v| point(&m, RunConfig { tp_degree: tp, ..decode(64, 4096, v, opts) }, &hw)))
        .collect();
    let res = sweep(&pts);
    for (tp, pair) in tps.iter().zip(res.chunks(2)) {
        t.rows.push(vec![
            m.name.clone(),
            tp.to_string(),
            cell(&pair[1], |r| format!("{:.4}", r.bank_utilization)),
            cell(&pair[0], |r| r.total_cycles.to_string()),
            cell(&pair[1], |r| r.total_cycles.to_string()),
            ratio(&pair[0], &pair[1], total),
            format!("{}{}", err(&pair[0]), err(&pair[1])),
        ]);
    }
    t
}

fn fig16(opts: Options) -> FigureTable {
    let mut t = FigureTable::new(
        "fig16",
        "below the divergence point latency tracks bond bandwidth and voltage does not matter",
        &["model", "layout", "bonds_per_bank", "bond_gbps", "voltage", "fc_cycles", "bottleneck", "error"],
    );
    let m = model("llama2-13b", opts, 1);
    let mut pts = Vec::new();
    let mut keys = Vec::new();
    for layout in [MacroLayout::In512Out8, MacroLayout::In256Out16] {
        for bonds in [8u32, 16, 32, 64, 128, 256] {
            for voltage in [VoltageMode::High, VoltageMode::Low] {
                let mut hw = HardwareConfig::default();
                hw.bond.bonds_per_bank = bonds;
                hw.sram.voltage_mode = voltage;
                let mut r = decode(32, 1024, ArchVariant::HybridOpt, opts);
                r.mapping.fc_target = FcTarget::Sram;
                r.mapping.sram_layout = layout;
                if layout == MacroLayout::In256Out16 {
                    r.mapping.fc_split = FcSplit::InputSplit;
                }
                keys.push((layout, bonds, hw.bond.bandwidth(), voltage));
                pts.push(point(&m, r, &hw));
            }
        }
    }
    for ((layout, bonds, bw, voltage), r) in keys.into_iter().zip(sweep(&pts)) {
        t.rows.push(vec![
            m.name.clone(),
            layout.name().into(),
            bonds.to_string(),
            format!("{:.1}", bw / 1e9),
            format!("{voltage:?}").to_lowercase(),
            cell(&r, |r| r.phases.fc.to_string()),
            cell(&r, |r| r.sram.dominant().map(|b| b.to_string()).unwrap_or_else(|| "none".into())),
            err(&r),
        ]);
    }
    t
}

fn fig18(opts: Options) -> FigureTable {
    let mut t = FigureTable::new(
        "fig18",
        "Curry ALUs cut non-linear latency by about 30% against a centralized unit",
        &["model", "batch", "seq", "centralized_cycles", "curry_cycles", "reduction", "error"],
    );
    let m = model("llama2-7b", opts, 1);
    let hw = HardwareConfig::default();
    let grid: Vec<(u32, u32)> = [(1u32, 4096u32), (1, 16384), (1, 32768), (16, 4096)].to_vec();
    let pts: Vec<_> = grid
        .iter()
        .flat_map(|&(b, s)| [ArchVariant::DramOnly, ArchVariant::DramPlusCurry].map(|v| point(&m, decode(b, s, v, opts), &hw)))
        .collect();
    let res = sweep(&pts);
    for ((b, s), pair) in grid.iter().zip(res.chunks(2)) {
        let red = match (&pair[0], &pair[1]) {
            (Ok(a), Ok(c)) => format!("{:.4}", 1.0 - c.phases.nonlinear as f64 / a.phases.nonlinear as f64),
            _ => "NaN".into(),
        };
        t.rows.push(vec![
            m.name.clone(),
            b.to_string(),
            s.to_string(),
            cell(&pair[0], |r| r.phases.nonlinear.to_string()),
            cell(&pair[1], |r| r.phases.nonlinear.to_string()),
            red,
            format!("{}{}", err(&pair[0]), err(&pair[1])),
        ]);
    }
    t
}

/// Fused and unfused cycles of one shipped-style kernel.
pub fn path_generation(kernel: &str, n: usize, hw: &HardwareConfig) -> Result<(u64, u64)> {
    let banks = hw.noc.mesh_y as usize;
    let k = match kernel {
        "exp" => kernels::exp_kernel(hw, n, banks)?,
        "softmax" => kernels::softmax_kernel(hw, n, banks, Bf16::ONE)?,
        "silu" => kernels::silu_kernel(hw, n, banks)?,
        "rmsnorm" => kernels::rmsnorm_kernel(hw, n, banks, 1e-5)?,
        other => return Err(Error::Kernel(format!("no path-generation study for `{other}`"))),
    };
    let mut mem = BankMemory::for_hw(hw);
    let xs: Vec<Bf16> = (0..n).map(|i| Bf16::from_f32((i % 7) as f32 * 0.25 - 0.75)).collect();
    kernels::scatter(&mut mem, rows::IN, banks, &xs);
    kernels::scatter(&mut mem, rows::GAIN, banks, &vec![Bf16::ONE; n]);
    let u = kernels::run_kernel(&k, hw, mem.clone(), false)?;
    let f = kernels::run_kernel(&k, hw, mem, true)?;
    Ok((u.cycles, f.cycles))
}

pub const KERNELS: [&str; 6] = ["exp", "sqrt", "softmax", "rmsnorm", "silu", "rope"];

/// Outcome of running one kernel against its binary64 oracle.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KernelCheck {
    pub kernel: String,
    pub elements: usize,
    pub max_error: f64,
    pub tolerance: f64,
    /// Fused cycles; for RoPE, the rearrangement alone.
    pub cycles: u64,
    pub cycle_limit: Option<u64>,
    pub unfused_cycles: u64,
    pub passed: bool,
}

fn run_pair(k: &kernels::Kernel, hw: &HardwareConfig, mem: BankMemory) -> Result<(kernels::KernelRun, kernels::KernelRun)> {
    Ok((kernels::run_kernel(k, hw, mem.clone(), false)?, kernels::run_kernel(k, hw, mem, true)?))
}

fn to_f64(xs: &[Bf16]) -> Vec<f64> {
    xs.iter().map(|x| x.to_f64()).collect()
}

/// Run `name` on one channel and compare with the binary64 oracle.
pub fn kernel_check(name: &str, hw: &HardwareConfig) -> Result<KernelCheck> {
    let banks = hw.noc.mesh_y as usize;
    let n = 4 * banks;
    let mut mem = BankMemory::for_hw(hw);
    let check = |elements, max_error: f64, tolerance, u: u64, f: u64, cycle_limit: Option<u64>| KernelCheck {
        kernel: name.into(),
        elements,
        max_error,
        tolerance,
        cycles: f,
        cycle_limit,
        unfused_cycles: u,
        passed: max_error <= tolerance && cycle_limit.map_or(true, |l| f <= l),
    };
    match name {
        "exp" => {
            // The tolerance applies on [0, 4); negative inputs are reported in the error only when larger.
            let xs: Vec<Bf16> = (0..n).map(|i| Bf16::from_f64(8.0 * i as f64 / n as f64 - 4.0)).collect();
            kernels::scatter(&mut mem, rows::IN, banks, &xs);
            let (u, f) = run_pair(&kernels::exp_kernel(hw, n, banks)?, hw, mem)?;
            let got = kernels::gather(&f.mem, rows::OUT, banks, n);
            let pos: Vec<usize> = (0..n).filter(|&i| xs[i].to_f64() >= 0.0).collect();
            let want: Vec<f64> = pos.iter().map(|&i| reference::exp(xs[i].to_f64())).collect();
            let got: Vec<Bf16> = pos.iter().map(|&i| got[i]).collect();
            Ok(check(n, reference::max_relative_error(&got, &want), 1.0 / 32.0, u.cycles, f.cycles, None))
        }
        "sqrt" => {
            let xs: Vec<Bf16> = (1..=n).map(|i| Bf16::from_f64(i as f64 * 0.25)).collect();
            kernels::scatter(&mut mem, rows::IN, banks, &xs);
            let (u, f) = run_pair(&kernels::sqrt_kernel(hw, n, banks)?, hw, mem)?;
            let want: Vec<f64> = to_f64(&xs).iter().map(|x| x.sqrt()).collect();
            let err = reference::max_relative_error(&kernels::gather(&f.mem, rows::OUT, banks, n), &want);
            Ok(check(n, err, 1.0 / 64.0, u.cycles, f.cycles, None))
        }
        "softmax" => {
            kernels::scatter(&mut mem, rows::IN, banks, &vec![Bf16::from_f32(0.5); n]);
            let (u, f) = run_pair(&kernels::softmax_kernel(hw, n, banks, Bf16::ZERO)?, hw, mem)?;
            let got = kernels::gather(&f.mem, rows::OUT, banks, n);
            let symmetric = got.iter().all(|v| *v == got[0]);
            let err = reference::max_relative_error(&got, &vec![1.0 / n as f64; n]);
            let mut c = check(n, err, 1.0 / 64.0, u.cycles, f.cycles, None);
            c.passed &= symmetric;
            Ok(c)
        }
        "rmsnorm" | "silu" => {
            let xs: Vec<Bf16> = (0..n).map(|i| Bf16::from_f64(((i * 37 % 23) as f64 - 11.0) / 4.0)).collect();
            let gains: Vec<Bf16> = (0..n).map(|i| Bf16::from_f64(0.5 + (i % 5) as f64 * 0.25)).collect();
            kernels::scatter(&mut mem, rows::IN, banks, &xs);
            kernels::scatter(&mut mem, rows::GAIN, banks, &gains);
            let (k, want, tol) = if name == "rmsnorm" {
                (kernels::rmsnorm_kernel(hw, n, banks, 1e-5)?, reference::rmsnorm(&to_f64(&xs), &to_f64(&gains), 1e-5), 1.0 / 32.0)
            } else {
                (kernels::silu_kernel(hw, n, banks)?, to_f64(&xs).iter().map(|&x| reference::silu(x)).collect(), 1.0 / 16.0)
            };
            let (u, f) = run_pair(&k, hw, mem)?;
            let err = reference::max_relative_error(&kernels::gather(&f.mem, rows::OUT, banks, n), &want);
            Ok(check(n, err, tol, u.cycles, f.cycles, None))
        }
        "rope" => {
            let hd = 128.min(hw.dram.row_width as usize / 2);
            let x: Vec<Bf16> = (0..hd).map(|i| Bf16::from_f64(i as f64 / (hd / 2) as f64 - 1.0)).collect();
            let (cos, sin) = kernels::rope_tables(hd, 7, 10000.0);
            let xs = vec![x.clone(); banks];
            let u = kernels::rope_apply(hw, &xs, &cos, &sin, false)?;
            let f = kernels::rope_apply(hw, &xs, &cos, &sin, true)?;
            let want = reference::rope(&to_f64(&x), 7, 10000.0);
            let err = f.out.iter().map(|o| reference::normalized_error(o, &want)).fold(0.0, f64::max);
            Ok(check(hd * banks, err, 1.0 / 64.0, u.rearrange_cycles, f.rearrange_cycles, Some(41)))
        }
        other => Err(Error::Kernel(format!("unknown kernel `{other}`; available: {}", KERNELS.join(", ")))),
    }
}

fn fig19(_opts: Options) -> Result<FigureTable> {
    let mut t = FigureTable::new(
        "fig19",
        "path generation reduces kernel latency by 33-50% against single-hop issue",
        &["kernel", "elements", "unfused_cycles", "fused_cycles", "reduction"],
    );
    let hw = HardwareConfig::default();
    for (k, n) in [("exp", 32), ("exp", 512), ("softmax", 512), ("silu", 512), ("rmsnorm", 512)] {
        let (u, f) = path_generation(k, n, &hw)?;
        t.rows.push(vec![k.into(), n.to_string(), u.to_string(), f.to_string(), format!("{:.4}", 1.0 - f as f64 / u as f64)]);
    }
    Ok(t)
}

fn fig20(opts: Options) -> FigureTable {
    let mut t = FigureTable::new(
        "fig20",
        "GQA score on SRAM-PIM wins with long context and low TP; context gains less and costs more energy",
        &["model", "seq", "tp", "score_ratio", "context_ratio", "attention_energy_ratio", "error"],
    );
    let m = model("llama2-70b", opts, 1);
    let hw = HardwareConfig::default();
    let grid: Vec<(u32, u32)> = [1024u32, 4096, 16384].iter().flat_map(|&s| [1u32, 2, 4, 8].map(|tp| (s, tp))).collect();
    let pts: Vec<_> = grid
        .iter()
        .flat_map(|&(s, tp)| {
            [AttentionTarget::Dram, AttentionTarget::SramGqa].map(|a| {
                let mut r = RunConfig { tp_degree: tp, ..decode(8, s, ArchVariant::HybridOpt, opts) };
                r.mapping.attention_target = a;
                point(&m, r, &hw)
            })
        })
        .collect();
    let res = sweep(&pts);
    let attn_energy = |r: &SimReport| r.energy.dram_pj + r.energy.sram_pj + r.energy.bond_pj;
    for ((s, tp), pair) in grid.iter().zip(res.chunks(2)) {
        t.rows.push(vec![
            m.name.clone(),
            s.to_string(),
            tp.to_string(),
            ratio(&pair[1], &pair[0], |r| r.cycles_of(&["score"]) as f64),
            ratio(&pair[1], &pair[0], |r| r.cycles_of(&["context"]) as f64),
            ratio(&pair[1], &pair[0], attn_energy),
            format!("{}{}", err(&pair[0]), err(&pair[1])),
        ]);
    }
    t
}

/// Run one figure's sweep.
pub fn reproduce(id: &str, opts: Options) -> Result<FigureTable> {
    Ok(match id {
        "fig5" => fig5(opts),
        "fig8" => fig8(opts),
        "fig13" => fig13(opts),
        "fig14" => fig14(opts),
        "fig15" => fig15(opts),
        "fig16" => fig16(opts),
        "fig18" => fig18(opts),
        "fig19" => fig19(opts)?,
        "fig20" => fig20(opts),
        _ => {
            return Err(Error::UnknownFigure {
                name: id.into(),
                available: FIGURES.join(", "),
            })
        }
    })
}
