//! End-to-end simulation of prefill and decode.
//!
//! Each step (the whole prompt, or one decode token) is a task graph per
//! pipeline stage: every layer's FC, attention, non-linear and collective
//! operations with their data dependencies, priced by the DRAM-PIM,
//! SRAM-PIM and NoC models and scheduled by the discrete-event core over
//! the stage's shared resources. Decode tokens inside the window are
//! simulated one by one; later tokens are extrapolated linearly from the
//! first and last simulated token.

pub mod calibrate;
pub mod cost;
pub mod des;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{ArchVariant, HardwareConfig, ModelConfig, Phase, RunConfig};
use crate::error::Result;
use crate::mapper::{estimate_utilization, plan_layer, TilePlan};
use crate::noc::mesh::MeshStats;

pub use cost::{cxl_collective, CollectiveKind, Energy, SramAttribution, Step};
pub use des::{Resource, TaskClass};

/// Busy time per operation class. `overlap` is the time classes ran
/// concurrently, so `fc + attention + nonlinear + collective - overlap`
/// equals the elapsed cycles.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseLatency {
    pub fc: u64,
    pub attention: u64,
    pub nonlinear: u64,
    pub collective: u64,
    pub overlap: u64,
}

impl PhaseLatency {
    pub fn busy(&self) -> u64 {
        self.fc + self.attention + self.nonlinear + self.collective
    }

    pub fn elapsed(&self) -> u64 {
        self.busy() - self.overlap
    }

    fn add(&mut self, o: &PhaseLatency) {
        self.fc += o.fc;
        self.attention += o.attention;
        self.nonlinear += o.nonlinear;
        self.collective += o.collective;
        self.overlap += o.overlap;
    }

    fn slot(&mut self, class: TaskClass) -> &mut u64 {
        match class {
            TaskClass::Fc => &mut self.fc,
            TaskClass::Attention => &mut self.attention,
            TaskClass::Nonlinear => &mut self.nonlinear,
            TaskClass::Collective => &mut self.collective,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub dram_pj: f64,
    pub sram_pj: f64,
    pub bond_pj: f64,
    pub noc_pj: f64,
    pub link_pj: f64,
    /// Centralized non-linear unit.
    pub nlu_pj: f64,
    pub total_pj: f64,
}

impl EnergyBreakdown {
    fn from_energy(e: &Energy) -> Self {
        EnergyBreakdown {
            dram_pj: e.dram_pj,
            sram_pj: e.sram_pj,
            bond_pj: e.bond_pj,
            noc_pj: e.noc_pj,
            link_pj: e.link_pj,
            nlu_pj: e.nlu_pj,
            total_pj: e.total(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub model: String,
    pub arch_variant: ArchVariant,
    pub phase: Phase,
    pub batch: u32,
    pub prompt_len: u32,
    pub gen_len: u32,
    pub tp_degree: u32,
    pub pp_degree: u32,
    pub total_cycles: u64,
    pub clock_period_ns: f64,
    pub prefill_cycles: u64,
    pub decode_cycles: u64,
    pub prefill: PhaseLatency,
    pub decode: PhaseLatency,
    pub phases: PhaseLatency,
    pub tokens_per_second: f64,
    pub energy: EnergyBreakdown,
    pub energy_per_token_pj: f64,
    pub bank_utilization: f64,
    pub sram: SramAttribution,
    /// Busy cycles per operation name, summed over layers and steps.
    pub op_cycles: BTreeMap<String, u64>,
    /// FC layers placed on SRAM-PIM in the last simulated step.
    pub sram_fcs: Vec<String>,
    pub simulated_tokens: u32,
    pub extrapolated_tokens: u32,
    pub events: u64,
    /// Mesh counters of the kernel runs that priced the non-linear work.
    pub flits: MeshStats,
}

impl SimReport {
    /// Sum of the listed operations' busy cycles.
    pub fn cycles_of(&self, names: &[&str]) -> u64 {
        names.iter().filter_map(|n| self.op_cycles.get(*n)).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Column-decoder read-out width implied by the architecture variant.
pub fn effective_hardware(hw: &HardwareConfig, variant: ArchVariant) -> HardwareConfig {
    let mut h = hw.clone();
    match variant {
        ArchVariant::HybridBase => h.dram.readout_bytes_per_access = 32,
        ArchVariant::HybridOpt => h.dram.readout_bytes_per_access = 128,
        _ => {}
    }
    h
}

/// Outcome of one step across all pipeline stages.
#[derive(Clone, Debug, Default, PartialEq)]
struct StepResult {
    phases: PhaseLatency,
    energy: Energy,
    sram: SramAttribution,
    op_cycles: BTreeMap<String, u64>,
    sram_fcs: Vec<String>,
    events: u64,
}

fn stage_layers(model: &ModelConfig, run: &RunConfig) -> Vec<u64> {
    let total = model.num_layers as u64;
    let per = total.div_ceil(run.pp_degree as u64);
    (0..run.pp_degree as u64).map(|s| per.min(total.saturating_sub(s * per))).filter(|&l| l > 0).collect()
}

fn simulate_step(
    model: &ModelConfig,
    run: &RunConfig,
    hw: &HardwareConfig,
    plan: &TilePlan,
    calib: Option<&calibrate::Calibration>,
    step: Step,
) -> Result<StepResult> {
    let mut r = StepResult::default();
    let mut elapsed = 0u64;
    let stages = stage_layers(model, run);
    for &layers in &stages {
        let mut cm = cost::CostModel {
            model,
            run,
            hw,
            plan,
            calib,
            attribution: SramAttribution::default(),
        };
        let (tasks, energies, on_sram) = cost::layer_graph(&mut cm, step, layers)?;
        let s = des::simulate(&tasks);
        elapsed += s.makespan;
        r.events += s.events;
        r.sram.add(&cm.attribution);
        r.sram_fcs.clear();
        for ((t, e), sram) in tasks.iter().zip(&energies).zip(&on_sram) {
            *r.phases.slot(t.class) += t.duration;
            *r.op_cycles.entry(t.name.to_string()).or_default() += t.duration;
            r.energy.add(e);
            if *sram && t.class == TaskClass::Fc && !r.sram_fcs.iter().any(|n| n == t.name) {
                r.sram_fcs.push(t.name.to_string());
            }
        }
    }
    if stages.len() > 1 {
        let bytes = run.batch as u64 * step.vectors * model.hidden_size as u64 * 2;
        let hops = stages.len() as u64 - 1;
        let p2p = cost::to_cycles(cxl_collective(hw, bytes, CollectiveKind::P2p, 2), hw.noc.clock_period) * hops;
        elapsed += p2p;
        r.phases.collective += p2p;
        *r.op_cycles.entry("p2p".into()).or_default() += p2p;
        r.energy.link_pj += (bytes * 8 * hops) as f64 * hw.interconnect.energy_per_bit;
    }
    r.phases.overlap = r.phases.busy() - elapsed;
    Ok(r)
}

/// Accumulated totals of a phase, with linear extrapolation.
#[derive(Default)]
struct Totals {
    phases: PhaseLatency,
    energy: Energy,
    sram: SramAttribution,
    op_cycles: BTreeMap<String, u64>,
    events: u64,
}

impl Totals {
    fn add(&mut self, s: &StepResult) {
        self.phases.add(&s.phases);
        self.energy.add(&s.energy);
        self.sram.add(&s.sram);
        for (k, v) in &s.op_cycles {
            *self.op_cycles.entry(k.clone()).or_default() += v;
        }
        self.events += s.events;
    }

    /// Add tokens `1..=n` past the last sample, each growing by the
    /// per-token slope between `first` and `last` (`span` tokens apart).
    fn extrapolate(&mut self, first: &StepResult, last: &StepResult, span: u64, n: u64) {
        if n == 0 {
            return;
        }
        let span = span.max(1) as f64;
        let tri = (n * (n + 1) / 2) as f64;
        let ext = |a: f64, b: f64| (n as f64 * b + (b - a) / span * tri).max(0.0);
        let ext_u = |a: u64, b: u64| ext(a as f64, b as f64).round() as u64;
        let (fp, lp) = (&first.phases, &last.phases);
        let mut p = PhaseLatency {
            fc: ext_u(fp.fc, lp.fc),
            attention: ext_u(fp.attention, lp.attention),
            nonlinear: ext_u(fp.nonlinear, lp.nonlinear),
            collective: ext_u(fp.collective, lp.collective),
            overlap: ext_u(fp.overlap, lp.overlap),
        };
        p.overlap = p.overlap.min(p.busy());
        self.phases.add(&p);
        let (fe, le) = (&first.energy, &last.energy);
        self.energy.add(&Energy {
            dram_pj: ext(fe.dram_pj, le.dram_pj),
            sram_pj: ext(fe.sram_pj, le.sram_pj),
            bond_pj: ext(fe.bond_pj, le.bond_pj),
            noc_pj: ext(fe.noc_pj, le.noc_pj),
            link_pj: ext(fe.link_pj, le.link_pj),
            nlu_pj: ext(fe.nlu_pj, le.nlu_pj),
        });
        let (fs, ls) = (&first.sram, &last.sram);
        self.sram.add(&SramAttribution {
            readout_ns: ext(fs.readout_ns, ls.readout_ns),
            bond_ns: ext(fs.bond_ns, ls.bond_ns),
            access_ns: ext(fs.access_ns, ls.access_ns),
            readout_bound_ns: ext(fs.readout_bound_ns, ls.readout_bound_ns),
            bond_bound_ns: ext(fs.bond_bound_ns, ls.bond_bound_ns),
            access_bound_ns: ext(fs.access_bound_ns, ls.access_bound_ns),
        });
        for (k, v) in &last.op_cycles {
            let a = first.op_cycles.get(k).copied().unwrap_or(0);
            *self.op_cycles.entry(k.clone()).or_default() += ext_u(a, *v);
        }
    }
}

/// One scheduled task of a traced step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceLine {
    pub start: u64,
    pub finish: u64,
    pub name: &'static str,
    pub class: TaskClass,
    pub resources: Vec<Resource>,
}

impl std::fmt::Display for TraceLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let res: Vec<String> = self.resources.iter().map(|r| format!("{r:?}").to_lowercase()).collect();
        write!(f, "{} {} {} {:?} {}", self.start, self.finish, self.name, self.class, res.join("+"))
    }
}

/// Task schedule of the first pipeline stage for the first simulated step:
/// the prefill pass when there is one, else the first decode token.
pub fn trace_step(model: &ModelConfig, run_cfg: &RunConfig, hw: &HardwareConfig) -> Result<Vec<TraceLine>> {
    hw.validate()?;
    model.validate()?;
    run_cfg.validate(hw, model)?;
    let hw = effective_hardware(hw, run_cfg.arch_variant);
    let plan = plan_layer(model, run_cfg, &hw)?;
    let calib = if run_cfg.arch_variant.uses_curry() {
        Some(calibrate::calibration(&hw)?)
    } else {
        None
    };
    let prompt = run_cfg.prompt_len as u64;
    let step = if run_cfg.phase.has_prefill() { Step::prefill(prompt) } else { Step::decode(prompt) };
    let layers = stage_layers(model, run_cfg)[0];
    let mut cm = cost::CostModel {
        model,
        run: run_cfg,
        hw: &hw,
        plan: &plan,
        calib: calib.as_ref(),
        attribution: SramAttribution::default(),
    };
    let (tasks, _, _) = cost::layer_graph(&mut cm, step, layers)?;
    let s = des::simulate(&tasks);
    Ok(tasks
        .iter()
        .enumerate()
        .map(|(i, t)| TraceLine {
            start: s.start[i],
            finish: s.finish[i],
            name: t.name,
            class: t.class,
            resources: t.resources.clone(),
        })
        .collect())
}

/// Simulate one configuration end to end.
pub fn run(model: &ModelConfig, run_cfg: &RunConfig, hw: &HardwareConfig) -> Result<SimReport> {
    hw.validate()?;
    model.validate()?;
    run_cfg.validate(hw, model)?;
    let hw = effective_hardware(hw, run_cfg.arch_variant);
    let plan = plan_layer(model, run_cfg, &hw)?;
    let calib = if run_cfg.arch_variant.uses_curry() {
        Some(calibrate::calibration(&hw)?)
    } else {
        None
    };
    let calib = calib.as_ref();
    let prompt = run_cfg.prompt_len as u64;

    let mut prefill = Totals::default();
    let mut sram_fcs = Vec::new();
    if run_cfg.phase.has_prefill() {
        let s = simulate_step(model, run_cfg, &hw, &plan, calib, Step::prefill(prompt))?;
        sram_fcs = s.sram_fcs.clone();
        prefill.add(&s);
    }

    let mut decode = Totals::default();
    let gen = if run_cfg.phase.has_decode() { run_cfg.gen_len as u64 } else { 0 };
    let window = gen.min(run_cfg.decode_window as u64);
    let mut first = None;
    let mut last = None;
    for t in 0..window {
        let s = simulate_step(model, run_cfg, &hw, &plan, calib, Step::decode(prompt + t + 1))?;
        decode.add(&s);
        first.get_or_insert_with(|| s.clone());
        last = Some(s);
    }
    if let (Some(f), Some(l)) = (&first, &last) {
        decode.extrapolate(f, l, window - 1, gen - window);
        sram_fcs = l.sram_fcs.clone();
    }

    let mut phases = prefill.phases;
    phases.add(&decode.phases);
    let mut energy = prefill.energy;
    energy.add(&decode.energy);
    let mut sram = prefill.sram;
    sram.add(&decode.sram);
    let mut op_cycles = prefill.op_cycles;
    for (k, v) in decode.op_cycles {
        *op_cycles.entry(k).or_default() += v;
    }
    let total_cycles = phases.elapsed();
    let clock = hw.noc.clock_period;
    let generated = run_cfg.batch as u64 * gen;
    let seconds = total_cycles as f64 * clock * 1e-9;
    let energy = EnergyBreakdown::from_energy(&energy);
    Ok(SimReport {
        model: model.name.clone(),
        arch_variant: run_cfg.arch_variant,
        phase: run_cfg.phase,
        batch: run_cfg.batch,
        prompt_len: run_cfg.prompt_len,
        gen_len: gen as u32,
        tp_degree: run_cfg.tp_degree,
        pp_degree: run_cfg.pp_degree,
        total_cycles,
        clock_period_ns: clock,
        prefill_cycles: prefill.phases.elapsed(),
        decode_cycles: decode.phases.elapsed(),
        prefill: prefill.phases,
        decode: decode.phases,
        phases,
        tokens_per_second: if generated > 0 && seconds > 0.0 { generated as f64 / seconds } else { 0.0 },
        energy_per_token_pj: if generated > 0 { energy.total_pj / generated as f64 } else { 0.0 },
        energy,
        bank_utilization: estimate_utilization(&plan),
        sram,
        op_cycles,
        sram_fcs,
        simulated_tokens: window as u32,
        extrapolated_tokens: (gen - window) as u32,
        events: prefill.events + decode.events,
        flits: calib.map(|c| c.stats).unwrap_or_default(),
    })
}

/// One configuration of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub model: ModelConfig,
    pub run: RunConfig,
    pub hw: HardwareConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Rayon worker pool; sequential when built without `parallel`.
    Parallel,
}

/// Run every point independently; failures are kept in place.
pub fn sweep(points: &[SweepPoint]) -> Vec<Result<SimReport>> {
    sweep_with(points, Execution::Parallel)
}

pub fn sweep_with(points: &[SweepPoint], exec: Execution) -> Vec<Result<SimReport>> {
    let one = |p: &SweepPoint| run(&p.model, &p.run, &p.hw);
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            points.par_iter().map(one).collect()
        }
        _ => points.iter().map(one).collect(),
    }
}

/// Stable CSV columns, one row per report.
pub const CSV_HEADER: [&str; 27] = [
    "model",
    "arch_variant",
    "phase",
    "batch",
    "prompt_len",
    "gen_len",
    "tp_degree",
    "pp_degree",
    "total_cycles",
    "prefill_cycles",
    "decode_cycles",
    "fc_cycles",
    "attention_cycles",
    "nonlinear_cycles",
    "collective_cycles",
    "overlap_cycles",
    "tokens_per_second",
    "dram_pj",
    "sram_pj",
    "bond_pj",
    "noc_pj",
    "link_pj",
    "nlu_pj",
    "total_pj",
    "energy_per_token_pj",
    "bank_utilization",
    "sram_bottleneck",
];

impl SimReport {
    pub fn csv_record(&self) -> Vec<String> {
        let p = &self.phases;
        let e = &self.energy;
        vec![
            self.model.clone(),
            self.arch_variant.name().to_string(),
            format!("{:?}", self.phase).to_lowercase(),
            self.batch.to_string(),
            self.prompt_len.to_string(),
            self.gen_len.to_string(),
            self.tp_degree.to_string(),
            self.pp_degree.to_string(),
            self.total_cycles.to_string(),
            self.prefill_cycles.to_string(),
            self.decode_cycles.to_string(),
            p.fc.to_string(),
            p.attention.to_string(),
            p.nonlinear.to_string(),
            p.collective.to_string(),
            p.overlap.to_string(),
            self.tokens_per_second.to_string(),
            e.dram_pj.to_string(),
            e.sram_pj.to_string(),
            e.bond_pj.to_string(),
            e.noc_pj.to_string(),
            e.link_pj.to_string(),
            e.nlu_pj.to_string(),
            e.total_pj.to_string(),
            self.energy_per_token_pj.to_string(),
            self.bank_utilization.to_string(),
            self.sram.dominant().map(|b| b.to_string()).unwrap_or_else(|| "none".into()),
        ]
    }
}

/// Reports as CSV text with [`CSV_HEADER`].
pub fn to_csv(reports: &[SimReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory csv");
    for r in reports {
        w.write_record(r.csv_record()).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}
