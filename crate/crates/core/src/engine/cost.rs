//! Per-step task graph and energy for one pipeline stage.

use serde::{Deserialize, Serialize};

use super::calibrate::Calibration;
use super::des::{Resource, Task, TaskClass};
use crate::config::{ArchVariant, AttentionTarget, FcTarget, HardwareConfig, MacroLayout, ModelConfig, RunConfig};
use crate::dram_pim;
use crate::error::Result;
use crate::mapper::{FcPlan, NonlinearKind, TilePlan};
use crate::sram_pim::{sram_energy, Bottleneck, SramModel, StageCost};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Energy {
    pub dram_pj: f64,
    pub sram_pj: f64,
    pub bond_pj: f64,
    pub noc_pj: f64,
    pub link_pj: f64,
    pub nlu_pj: f64,
}

impl Energy {
    pub fn total(&self) -> f64 {
        self.dram_pj + self.sram_pj + self.bond_pj + self.noc_pj + self.link_pj + self.nlu_pj
    }

    pub fn add(&mut self, o: &Energy) {
        self.dram_pj += o.dram_pj;
        self.sram_pj += o.sram_pj;
        self.bond_pj += o.bond_pj;
        self.noc_pj += o.noc_pj;
        self.link_pj += o.link_pj;
        self.nlu_pj += o.nlu_pj;
    }

    pub fn scale(&self, k: f64) -> Energy {
        Energy {
            dram_pj: self.dram_pj * k,
            sram_pj: self.sram_pj * k,
            bond_pj: self.bond_pj * k,
            noc_pj: self.noc_pj * k,
            link_pj: self.link_pj * k,
            nlu_pj: self.nlu_pj * k,
        }
    }
}

/// Time spent in SRAM-PIM GeMM stages, split by stage and by the stage that
/// bounded each chunk.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SramAttribution {
    pub readout_ns: f64,
    pub bond_ns: f64,
    pub access_ns: f64,
    pub readout_bound_ns: f64,
    pub bond_bound_ns: f64,
    pub access_bound_ns: f64,
}

impl SramAttribution {
    fn record(&mut self, c: &StageCost, times: f64) {
        self.readout_ns += c.readout_ns * times;
        self.bond_ns += c.bond_ns * times;
        self.access_ns += c.access_ns * times;
        let slot = match c.bottleneck {
            Bottleneck::Readout => &mut self.readout_bound_ns,
            Bottleneck::Bond => &mut self.bond_bound_ns,
            Bottleneck::MacroAccess => &mut self.access_bound_ns,
        };
        *slot += c.ns * times;
    }

    pub fn add(&mut self, o: &SramAttribution) {
        self.readout_ns += o.readout_ns;
        self.bond_ns += o.bond_ns;
        self.access_ns += o.access_ns;
        self.readout_bound_ns += o.readout_bound_ns;
        self.bond_bound_ns += o.bond_bound_ns;
        self.access_bound_ns += o.access_bound_ns;
    }

    pub fn scale(&self, k: f64) -> SramAttribution {
        SramAttribution {
            readout_ns: self.readout_ns * k,
            bond_ns: self.bond_ns * k,
            access_ns: self.access_ns * k,
            readout_bound_ns: self.readout_bound_ns * k,
            bond_bound_ns: self.bond_bound_ns * k,
            access_bound_ns: self.access_bound_ns * k,
        }
    }

    /// Stage that bounded the most GeMM time, if any ran.
    pub fn dominant(&self) -> Option<Bottleneck> {
        let v = [
            (self.readout_bound_ns, Bottleneck::Readout),
            (self.bond_bound_ns, Bottleneck::Bond),
            (self.access_bound_ns, Bottleneck::MacroAccess),
        ];
        let best = v.iter().fold(v[0], |b, x| if x.0 > b.0 { *x } else { b });
        (best.0 > 0.0).then_some(best.1)
    }
}

/// What one step processes per sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Step {
    /// Token vectors per sequence going through the FC layers.
    pub vectors: u64,
    /// Sum over the step's queries of the attended context length.
    pub attended: u64,
    /// New KV positions per sequence.
    pub appended: u64,
}

impl Step {
    pub fn prefill(prompt: u64) -> Step {
        Step {
            vectors: prompt,
            attended: prompt * (prompt + 1) / 2,
            appended: prompt,
        }
    }

    /// Decode step whose query attends `context` positions.
    pub fn decode(context: u64) -> Step {
        Step {
            vectors: 1,
            attended: context,
            appended: 1,
        }
    }
}

/// Collective cost kinds across devices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveKind {
    Broadcast,
    Reduce,
    P2p,
}

/// Latency of a flat collective over the device interconnect, ns.
pub fn cxl_collective(hw: &HardwareConfig, bytes: u64, kind: CollectiveKind, devices: u32) -> f64 {
    let ic = &hw.interconnect;
    if devices <= 1 && kind != CollectiveKind::P2p {
        return 0.0;
    }
    let bw = match kind {
        CollectiveKind::P2p => ic.p2p_bandwidth,
        _ => ic.collective_bandwidth,
    };
    bytes as f64 / bw * 1e9 + ic.link_latency
}

/// One priced task before it is placed in the graph.
#[derive(Clone, Debug)]
pub struct Priced {
    pub name: &'static str,
    pub class: TaskClass,
    pub resources: Vec<Resource>,
    pub ns: f64,
    pub energy: Energy,
    pub on_sram: bool,
}

pub struct CostModel<'a> {
    pub model: &'a ModelConfig,
    pub run: &'a RunConfig,
    pub hw: &'a HardwareConfig,
    pub plan: &'a TilePlan,
    pub calib: Option<&'a Calibration>,
    pub attribution: SramAttribution,
}

struct FcPrice {
    ns: f64,
    energy: Energy,
    attribution: SramAttribution,
}

impl<'a> CostModel<'a> {
    fn sram(&self) -> SramModel<'a> {
        SramModel::new(&self.hw.dram, &self.hw.sram, &self.hw.bond)
    }

    fn dram_ns(&self, cycles: u64) -> f64 {
        cycles as f64 * self.hw.dram.timings.clock_period
    }

    fn banks(&self) -> f64 {
        self.plan.banks as f64
    }

    fn variant(&self) -> ArchVariant {
        self.run.arch_variant
    }

    fn layout(&self) -> MacroLayout {
        self.run.mapping.sram_layout
    }

    /// Global-buffer traffic of one FC: broadcast inputs to every bank of a
    /// channel and gather the channel's output slice.
    fn fc_io(&self, fc: &FcPlan, vectors: u64) -> (f64, Energy) {
        let batch = self.run.batch as u64 * vectors;
        let in_bytes = batch * fc.shape.in_dim * 2;
        let out_bytes = (batch * fc.shape.out_dim * 2).div_ceil(self.plan.channels);
        let ns = self.dram_ns(dram_pim::gb_transfer_cycles(&self.hw.dram, in_bytes) + dram_pim::gb_transfer_cycles(&self.hw.dram, out_bytes));
        let bytes = in_bytes * self.plan.channels + out_bytes * self.plan.channels;
        let energy = Energy {
            dram_pj: bytes as f64 * self.hw.dram.energy.gb_pj_per_byte,
            ..Default::default()
        };
        (ns, energy)
    }

    /// Partial-sum reduction of input-split groups over the channel NoC.
    fn fc_reduce(&self, fc: &FcPlan, vectors: u64) -> (f64, Energy) {
        if fc.ways <= 1 {
            return (0.0, Energy::default());
        }
        let batch = self.run.batch as u64 * vectors;
        let levels = fc.ways.ilog2() as u64;
        let elems = batch * fc.tile_cols;
        let ns = (elems + 3 * levels) as f64 * self.hw.noc.clock_period;
        let hops = levels * fc.ways / 2;
        let bits = (elems * fc.reduce_trees * hops * self.hw.noc.flit_bits as u64) as f64;
        let energy = Energy {
            noc_pj: bits * self.hw.noc.energy_per_bit_hop + (elems * fc.reduce_trees * (fc.ways - 1)) as f64 * self.hw.noc.alu_op_energy,
            ..Default::default()
        };
        (ns, energy)
    }

    fn dram_gemv(&self, rows: u64, cols: u64, vectors: u64, tiles: f64) -> FcPrice {
        let ns = vectors as f64 * self.dram_ns(dram_pim::gemv_bank(&self.hw.dram, rows, cols, false));
        FcPrice {
            ns,
            energy: Energy {
                dram_pj: vectors as f64 * dram_pim::gemv_energy(&self.hw.dram, rows, cols) * tiles,
                ..Default::default()
            },
            attribution: SramAttribution::default(),
        }
    }

    /// A resident-size chunk of `blocks` weight blocks: load, then stream
    /// `vectors` inputs through it.
    fn sram_chunk(&self, rows: u64, blocks: u64, vectors: u64) -> Result<(f64, Energy, StageCost)> {
        let m = self.sram();
        let l = self.layout();
        let (bi, bo) = (l.inputs() as u64, l.outputs() as u64);
        let load = m.load_cost(blocks * bi * bo * 2)?;
        let gemm = m.gemm_cost(l, rows.min(bi), blocks * bo, vectors)?;
        let energy = Energy {
            dram_pj: dram_pim::transfer_energy(&self.hw.dram, load.dram_bytes, false) + dram_pim::transfer_energy(&self.hw.dram, gemm.dram_bytes, false),
            sram_pj: sram_energy(gemm.macs, &self.hw.sram),
            bond_pj: (load.bond_bytes + gemm.bond_bytes) as f64 * 8.0 * self.hw.bond.energy_per_bit,
            ..Default::default()
        };
        Ok((load.ns + gemm.ns, energy, gemm))
    }

    /// One bank running a `rows x cols` tile on SRAM-PIM in resident-size
    /// chunks, `tiles` banks in parallel.
    fn sram_tile(&self, rows: u64, cols: u64, vectors: u64, tiles: f64) -> Result<FcPrice> {
        let m = self.sram();
        let l = self.layout();
        let row_blocks = rows.div_ceil(l.inputs() as u64).max(1);
        let blocks = m.blocks(l, rows, cols);
        let max = m.max_blocks(l).max(1);
        let mut ns = 0.0;
        let mut energy = Energy::default();
        let mut attribution = SramAttribution::default();
        let per_row = blocks / row_blocks;
        let sub_rows = rows.div_ceil(row_blocks);
        let (full, rem) = (per_row / max, per_row % max);
        for (k, times) in [(max, full), (rem, 1)] {
            if k == 0 || times == 0 {
                continue;
            }
            let (t, e, gemm) = self.sram_chunk(sub_rows, k, vectors)?;
            let reps = (times * row_blocks) as f64;
            ns += t * reps;
            energy.add(&e.scale(reps * tiles));
            attribution.record(&gemm, reps);
        }
        Ok(FcPrice { ns, energy, attribution })
    }

    fn use_sram_fc(&self, dram: &FcPrice, sram: &Option<FcPrice>) -> bool {
        match (self.run.mapping.fc_target, sram) {
            (_, None) => false,
            (FcTarget::Dram, _) => false,
            (FcTarget::Sram, Some(_)) => true,
            (FcTarget::Auto, Some(s)) => s.ns < dram.ns,
        }
    }

    pub fn fc(&mut self, fc: &FcPlan, vectors: u64) -> Result<Priced> {
        let batch = self.run.batch as u64 * vectors;
        let tiles = fc.tiles.len() as f64;
        let dram = self.dram_gemv(fc.tile_rows, fc.tile_cols, batch, tiles);
        let sram = if self.variant().uses_sram() {
            Some(self.sram_tile(fc.tile_rows, fc.tile_cols, batch, tiles)?)
        } else {
            None
        };
        let on_sram = self.use_sram_fc(&dram, &sram);
        let chosen = if on_sram { sram.expect("sram priced") } else { dram };
        if on_sram {
            self.attribution.add(&chosen.attribution);
        }
        let (io_ns, io_e) = self.fc_io(fc, vectors);
        let (red_ns, red_e) = self.fc_reduce(fc, vectors);
        let mut energy = chosen.energy;
        energy.add(&io_e);
        energy.add(&red_e);
        let mut resources = vec![Resource::Dram];
        if on_sram {
            resources.push(Resource::Sram);
        }
        if fc.ways > 1 {
            resources.push(Resource::Noc);
        }
        Ok(Priced {
            name: fc.shape.name,
            class: TaskClass::Fc,
            resources,
            ns: chosen.ns + io_ns + red_ns,
            energy,
            on_sram,
        })
    }

    /// Score (`which = 0`) or context (`which = 1`) products for one step.
    pub fn attention(&mut self, step: Step, which: u8) -> Result<Priced> {
        let a = &self.plan.attention;
        let hd = self.model.head_dim as u64;
        let bpc = self.plan.banks_per_channel;
        let queries = step.vectors;
        let mean_ctx = step.attended.div_ceil(queries.max(1));
        let positions = a.positions_at(mean_ctx, bpc);
        let rows_per_channel = a.units_per_channel * a.group_size * queries;
        let banks = self.banks();
        let gqa_sram = a.target == AttentionTarget::SramGqa && self.variant().uses_sram();
        let (mut ns, mut energy, on_sram) = if gqa_sram {
            let (r, c) = if which == 0 { (hd, positions) } else { (positions, hd) };
            let p = self.sram_tile(r, c, a.group_size * queries, banks)?;
            self.attribution.add(&p.attribution.scale(a.units_per_channel as f64));
            (p.ns * a.units_per_channel as f64, p.energy.scale(a.units_per_channel as f64), true)
        } else {
            let p = self.dram_gemv(positions, hd, rows_per_channel, banks);
            (p.ns, p.energy, false)
        };
        let gb = &self.hw.dram;
        if which == 0 {
            let q_bytes = rows_per_channel * hd * 2;
            ns += self.dram_ns(dram_pim::gb_transfer_cycles(gb, q_bytes));
            let kv_bytes = (a.units_per_channel * step.appended).div_ceil(bpc) * hd * 2 * 2;
            ns += self.dram_ns(dram_pim::writeback_cycles(gb, kv_bytes));
            energy.dram_pj += (q_bytes * self.plan.channels) as f64 * gb.energy.gb_pj_per_byte + dram_pim::transfer_energy(gb, kv_bytes, true) * banks;
        } else {
            let levels = (bpc * a.channels_per_unit).max(1).ilog2() as u64;
            let elems = rows_per_channel * hd;
            ns += ((elems + 3 * levels) as f64) * self.hw.noc.clock_period;
            energy.noc_pj += (elems * self.plan.channels * levels * (bpc / 2).max(1) * self.hw.noc.flit_bits as u64) as f64 * self.hw.noc.energy_per_bit_hop;
        }
        let mut resources = vec![Resource::Dram];
        if on_sram {
            resources.push(Resource::Sram);
        }
        if which == 1 {
            resources.push(Resource::Noc);
        }
        Ok(Priced {
            name: if which == 0 { "score" } else { "context" },
            class: TaskClass::Attention,
            resources,
            ns,
            energy,
            on_sram,
        })
    }

    /// Elements of one non-linear invocation across the TP group.
    fn nonlinear_elements(&self, kind: NonlinearKind, step: Step) -> u64 {
        let b = self.run.batch as u64;
        let m = self.model;
        match kind {
            NonlinearKind::RmsNorm => b * step.vectors * m.hidden_size as u64,
            NonlinearKind::Rope => b * step.vectors * (m.num_heads + m.kv_heads) as u64 * m.head_dim as u64,
            NonlinearKind::Softmax => b * m.num_heads as u64 * step.attended,
            NonlinearKind::Silu => b * step.vectors * m.ffn_intermediate as u64,
        }
    }

    fn nlu(&self, kind: NonlinearKind, elements: u64) -> Priced {
        let nlu = &self.hw.nlu;
        let devices = self.run.tp_degree as u64;
        let per_device = elements.div_ceil(devices);
        let io_bytes = per_device * 4;
        let io_bw = self.hw.dram.channel_io_bandwidth * self.hw.dram.channels_per_device as f64;
        let ns = nlu.latency + per_device as f64 / nlu.throughput + io_bytes as f64 / io_bw * 1e9;
        Priced {
            name: kind.name(),
            class: TaskClass::Nonlinear,
            resources: vec![Resource::Nlu],
            ns,
            energy: Energy {
                nlu_pj: elements as f64 * nlu.energy_per_op,
                dram_pj: (elements * 4) as f64 * self.hw.dram.energy.gb_pj_per_byte,
                ..Default::default()
            },
            on_sram: false,
        }
    }

    pub fn nonlinear(&self, kind: NonlinearKind, step: Step) -> Priced {
        let elements = self.nonlinear_elements(kind, step);
        let calib = match (self.variant().uses_curry(), self.calib) {
            (true, Some(c)) => c,
            _ => return self.nlu(kind, elements),
        };
        let p = self.plan;
        let clock = self.hw.noc.clock_period;
        let (cycles, noc_pj) = match kind {
            NonlinearKind::Rope => {
                let vectors = elements / self.model.head_dim as u64;
                let per_bank = vectors.div_ceil(p.banks);
                ((per_bank * calib.rope_cycles) as f64, vectors as f64 * calib.rope_energy)
            }
            NonlinearKind::Softmax => {
                let a = &p.attention;
                let rows = a.units_per_channel * a.group_size * step.vectors;
                let m = a.units_per_channel * a.group_size * step.attended.div_ceil(p.banks_per_channel * a.channels_per_unit);
                let l = calib.softmax;
                (rows as f64 * l.fixed + l.per_elem * m as f64, elements as f64 * l.energy_per_elem)
            }
            NonlinearKind::RmsNorm => {
                let rows = (self.run.batch as u64 * step.vectors).div_ceil(p.channels);
                let m = rows * (self.model.hidden_size as u64).div_ceil(p.banks_per_channel);
                let l = calib.rmsnorm;
                (rows as f64 * l.fixed + l.per_elem * m as f64, elements as f64 * l.energy_per_elem)
            }
            NonlinearKind::Silu => {
                let l = calib.silu;
                (l.cycles(elements.div_ceil(p.banks)), elements as f64 * l.energy_per_elem)
            }
        };
        Priced {
            name: kind.name(),
            class: TaskClass::Nonlinear,
            resources: vec![Resource::Noc],
            ns: cycles * clock,
            energy: Energy {
                noc_pj,
                ..Default::default()
            },
            on_sram: false,
        }
    }

    /// All-reduce of one activation tensor across the TP group.
    pub fn all_reduce(&self, step: Step) -> Option<Priced> {
        let tp = self.run.tp_degree;
        if tp <= 1 {
            return None;
        }
        let bytes = self.run.batch as u64 * step.vectors * self.model.hidden_size as u64 * 2;
        let ns = cxl_collective(self.hw, bytes, CollectiveKind::Reduce, tp) + cxl_collective(self.hw, bytes, CollectiveKind::Broadcast, tp);
        Some(Priced {
            name: "all_reduce",
            class: TaskClass::Collective,
            resources: vec![Resource::Link],
            ns,
            energy: Energy {
                link_pj: (2 * bytes * 8 * tp as u64) as f64 * self.hw.interconnect.energy_per_bit,
                ..Default::default()
            },
            on_sram: false,
        })
    }
}

/// Convert a priced duration to engine cycles.
pub fn to_cycles(ns: f64, clock_period: f64) -> u64 {
    (ns / clock_period - 1e-9).ceil().max(0.0) as u64
}

/// Build the DAG for `layers` transformer layers of one step.
pub fn layer_graph(cm: &mut CostModel, step: Step, layers: u64) -> Result<(Vec<Task>, Vec<Energy>, Vec<bool>)> {
    let clock = cm.hw.noc.clock_period;
    let mut tasks = Vec::new();
    let mut energies = Vec::new();
    let mut sram = Vec::new();
    let fcs = cm.plan.fcs.clone();
    let fc = |name: &str| fcs.iter().find(|f| f.shape.name == name).cloned();
    let mut push = |p: Priced, deps: Vec<usize>, tasks: &mut Vec<Task>| {
        tasks.push(Task {
            name: p.name,
            class: p.class,
            resources: p.resources,
            duration: to_cycles(p.ns, clock),
            deps,
        });
        energies.push(p.energy);
        sram.push(p.on_sram);
        tasks.len() - 1
    };
    let mut prev: Vec<usize> = Vec::new();
    for _ in 0..layers {
        let n1 = push(cm.nonlinear(NonlinearKind::RmsNorm, step), prev.clone(), &mut tasks);
        let q = push(cm.fc(&fc("q").expect("q"), step.vectors)?, vec![n1], &mut tasks);
        let k = push(cm.fc(&fc("k").expect("k"), step.vectors)?, vec![n1], &mut tasks);
        let v = push(cm.fc(&fc("v").expect("v"), step.vectors)?, vec![n1], &mut tasks);
        let rope = push(cm.nonlinear(NonlinearKind::Rope, step), vec![q, k], &mut tasks);
        let score = push(cm.attention(step, 0)?, vec![rope, v], &mut tasks);
        let sm = push(cm.nonlinear(NonlinearKind::Softmax, step), vec![score], &mut tasks);
        let ctx = push(cm.attention(step, 1)?, vec![sm], &mut tasks);
        let o = push(cm.fc(&fc("o").expect("o"), step.vectors)?, vec![ctx], &mut tasks);
        let mut after_o = o;
        if let Some(c) = cm.all_reduce(step) {
            after_o = push(c, vec![o], &mut tasks);
        }
        let n2 = push(cm.nonlinear(NonlinearKind::RmsNorm, step), vec![after_o], &mut tasks);
        let up = push(cm.fc(&fc("up").expect("up"), step.vectors)?, vec![n2], &mut tasks);
        let act_in = match fc("gate") {
            Some(g) => {
                let gate = push(cm.fc(&g, step.vectors)?, vec![n2], &mut tasks);
                vec![push(cm.nonlinear(NonlinearKind::Silu, step), vec![gate], &mut tasks), up]
            }
            None => vec![up],
        };
        let down = push(cm.fc(&fc("down").expect("down"), step.vectors)?, act_in, &mut tasks);
        prev = vec![down];
        if let Some(c) = cm.all_reduce(step) {
            prev = vec![push(c, vec![down], &mut tasks)];
        }
    }
    Ok((tasks, energies, sram))
}
