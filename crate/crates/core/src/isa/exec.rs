//! Executing translated programs on the mesh, and a reference interpreter
//! that runs row instructions directly.
//!
//! The controller issues at most one unit per `issue_cycles`. A unit waits
//! until every earlier unit it conflicts with (overlapping DRAM elements or a
//! shared router ALU register) has completed; among the oldest
//! `issue_window` waiting units, the first one free of such conflicts goes. Phases of a unit
//! start the cycle after the previous phase completes; DRAM sources are read
//! when a phase starts.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::config::HardwareConfig;
use crate::error::{Error, Result};
use crate::isa::fuse::fuse_paths;
use crate::isa::row::{mask_banks, AccessOp, RowInstruction};
use crate::isa::translate::{exchange_factor, exchange_moves, translate, translate_fused, DataSource, ElemAddr, Sink, Translation, UnitKind};
use crate::noc::alu::{alu_apply, CurryAluState};
use crate::noc::collective::{rank_order, tree_levels};
use crate::noc::mesh::{Coord, FlitSpec, Mesh, MeshStats};
use crate::numerics::{bf16_binop, Bf16, BinOp};

/// Sparse DRAM contents of one channel; untouched elements read as zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BankMemory {
    elems_per_row: usize,
    rows: BTreeMap<(u8, u32), Vec<Bf16>>,
}

impl BankMemory {
    pub fn new(elems_per_row: usize) -> Self {
        BankMemory {
            elems_per_row,
            rows: BTreeMap::new(),
        }
    }

    pub fn for_hw(hw: &HardwareConfig) -> Self {
        BankMemory::new(hw.dram.row_width as usize / 2)
    }

    pub fn elems_per_row(&self) -> usize {
        self.elems_per_row
    }

    pub fn get(&self, a: ElemAddr) -> Bf16 {
        self.rows.get(&(a.bank, a.row)).map_or(Bf16::ZERO, |r| r[a.elem as usize])
    }

    pub fn set(&mut self, a: ElemAddr, v: Bf16) {
        let n = self.elems_per_row;
        self.rows.entry((a.bank, a.row)).or_insert_with(|| vec![Bf16::ZERO; n])[a.elem as usize] = v;
    }

    /// Write `values` starting at element `offset` of `(bank, row)`.
    pub fn write(&mut self, bank: usize, row: u32, offset: usize, values: &[Bf16]) {
        for (i, &v) in values.iter().enumerate() {
            self.set(
                ElemAddr {
                    bank: bank as u8,
                    row,
                    elem: (offset + i) as u16,
                },
                v,
            );
        }
    }

    pub fn read(&self, bank: usize, row: u32, offset: usize, len: usize) -> Vec<Bf16> {
        (0..len)
            .map(|i| {
                self.get(ElemAddr {
                    bank: bank as u8,
                    row,
                    elem: (offset + i) as u16,
                })
            })
            .collect()
    }

    /// Elements whose bit patterns differ, skipping `exclude`.
    pub fn diff(&self, other: &BankMemory, exclude: &[ElemAddr]) -> Vec<ElemAddr> {
        let mut keys: Vec<(u8, u32)> = self.rows.keys().chain(other.rows.keys()).copied().collect();
        keys.sort_unstable();
        keys.dedup();
        let mut out = Vec::new();
        for (bank, row) in keys {
            for elem in 0..self.elems_per_row as u16 {
                let a = ElemAddr { bank, row, elem };
                if self.get(a).to_bits() != other.get(a).to_bits() && !exclude.contains(&a) {
                    out.push(a);
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecReport {
    /// Cycles from the first issue to the last completion.
    pub cycles: u64,
    pub units: usize,
    pub packets: usize,
    pub issue: Vec<u64>,
    pub completion: Vec<u64>,
    pub stats: MeshStats,
    pub energy_pj: f64,
}

/// A channel's mesh plus its DRAM contents.
pub struct Machine {
    pub mesh: Mesh,
    pub mem: BankMemory,
    issue_cycles: u64,
    issue_window: usize,
}

#[derive(Default)]
struct UnitState {
    issued: Option<u64>,
    phase: usize,
    flits: Vec<u64>,
    done: Option<u64>,
}

impl Machine {
    pub fn new(hw: &HardwareConfig) -> Self {
        Machine {
            mesh: Mesh::new(&hw.noc),
            mem: BankMemory::for_hw(hw),
            issue_cycles: hw.noc.issue_cycles.max(1) as u64,
            issue_window: hw.noc.issue_window.max(1) as usize,
        }
    }

    pub fn with_memory(hw: &HardwareConfig, mem: BankMemory) -> Self {
        let mut m = Machine::new(hw);
        m.mem = mem;
        m
    }

    fn start_phase(&mut self, t: &Translation, u: usize, phase: usize, release: u64, sinks: &mut Vec<Sink>, st: &mut UnitState) -> Result<()> {
        st.flits.clear();
        for job in &t.units[u].phases[phase] {
            let mut packet = job.packet;
            if let DataSource::Row(a) = job.source {
                packet.data = self.mem.get(a);
            }
            let mut spec = FlitSpec::new(packet, job.at, release)
                .slot(job.slot)
                .tag(sinks.len() as u64)
                .absorb(job.sink == Sink::Absorb);
            if let DataSource::Reg(s) = job.source {
                spec = spec.load_reg(s);
            }
            sinks.push(job.sink);
            st.flits.push(self.mesh.inject(spec)?);
        }
        Ok(())
    }

    fn apply_deliveries(&mut self, sinks: &[Sink]) {
        for d in self.mesh.drain_deliveries() {
            if let Some(Sink::Row(a)) = sinks.get(d.tag as usize) {
                self.mem.set(*a, d.data);
            }
        }
    }

    pub fn execute(&mut self, t: &Translation) -> Result<ExecReport> {
        let n = t.units.len();
        let mut states: Vec<UnitState> = (0..n).map(|_| UnitState::default()).collect();
        let mut sinks: Vec<Sink> = Vec::new();
        let start = self.mesh.now();
        let stats0 = self.mesh.stats();
        let energy0 = self.mesh.energy();
        let mut waiting: std::collections::VecDeque<usize> = (0..n).collect();
        let mut next_issue = start;
        let mut active: Vec<usize> = Vec::new();
        loop {
            let now = self.mesh.now();
            self.apply_deliveries(&sinks);
            let mut k = 0;
            while k < active.len() {
                let u = active[k];
                let unit = &t.units[u];
                let mut st = std::mem::take(&mut states[u]);
                let finished = if unit.kind == UnitKind::Sram || unit.phases.is_empty() {
                    st.issued.expect("active units are issued") + unit.busy_cycles <= now
                } else if st.flits.iter().all(|&f| self.mesh.completion(f).is_some_and(|c| c <= now)) {
                    st.phase += 1;
                    if st.phase < unit.phases.len() {
                        self.start_phase(t, u, st.phase, now + 1, &mut sinks, &mut st)?;
                        false
                    } else {
                        true
                    }
                } else {
                    false
                };
                if finished {
                    st.done = Some(now);
                    active.swap_remove(k);
                } else {
                    k += 1;
                }
                states[u] = st;
            }
            if !waiting.is_empty() && now >= next_issue {
                let window = waiting.len().min(self.issue_window);
                let pick = (0..window).find(|&k| {
                    let fp = &t.units[waiting[k]].footprint;
                    !active.iter().any(|&a| t.units[a].footprint.conflicts(fp)) && !waiting.range(..k).any(|&w| t.units[w].footprint.conflicts(fp))
                });
                if let Some(k) = pick {
                    let u = waiting.remove(k).expect("in window");
                    let mut st = UnitState {
                        issued: Some(now),
                        ..Default::default()
                    };
                    if !t.units[u].phases.is_empty() {
                        self.start_phase(t, u, 0, now + 1, &mut sinks, &mut st)?;
                    }
                    states[u] = st;
                    active.push(u);
                    next_issue = now + self.issue_cycles;
                    continue;
                }
            }
            if waiting.is_empty() && active.is_empty() && self.mesh.in_flight() == 0 {
                break;
            }
            self.mesh.step()?;
        }
        self.apply_deliveries(&sinks);
        let end = states.iter().filter_map(|s| s.done).max().unwrap_or(start);
        let stats = self.mesh.stats();
        Ok(ExecReport {
            cycles: end - start,
            units: n,
            packets: t.packet_count(),
            issue: states.iter().map(|s| s.issued.unwrap_or(start) - start).collect(),
            completion: states.iter().map(|s| s.done.unwrap_or(start) - start).collect(),
            stats: MeshStats {
                injected: stats.injected - stats0.injected,
                ejected: stats.ejected - stats0.ejected,
                absorbed: stats.absorbed - stats0.absorbed,
                hops: stats.hops - stats0.hops,
                alu_ops: stats.alu_ops - stats0.alu_ops,
                combine_events: stats.combine_events - stats0.combine_events,
                div_by_zero: stats.div_by_zero - stats0.div_by_zero,
                contention_stalls: stats.contention_stalls - stats0.contention_stalls,
            },
            energy_pj: self.mesh.energy() - energy0,
        })
    }
}

/// Result of running a program through translation and the mesh.
#[derive(Clone, Debug)]
pub struct ProgramRun {
    pub report: ExecReport,
    pub mem: BankMemory,
    /// Final ALU state of every router slot.
    pub regs: HashMap<(Coord, u8), CurryAluState>,
    pub translation: Translation,
}

/// Translate (optionally fusing) and execute `prog` on a fresh channel.
pub fn run_program(prog: &[RowInstruction], hw: &HardwareConfig, mem: BankMemory, fuse: bool) -> Result<ProgramRun> {
    let translation = if fuse {
        let fused = fuse_paths(prog, hw.noc.mesh_x as usize, hw.noc.mesh_y as usize, hw.dram.row_width / 2);
        translate_fused(prog, &fused, hw)?
    } else {
        translate(prog, hw)?
    };
    let mut m = Machine::with_memory(hw, mem);
    let report = m.execute(&translation)?;
    let mut regs = HashMap::new();
    for y in 0..hw.noc.mesh_y as u8 {
        for x in 0..hw.noc.mesh_x as u8 {
            for slot in 0..hw.noc.alus_per_router as u8 {
                let c = Coord::new(x, y);
                regs.insert((c, slot), m.mesh.alu(c, slot));
            }
        }
    }
    Ok(ProgramRun {
        report,
        mem: m.mem,
        regs,
        translation,
    })
}

/// Executes row instructions one at a time at bank granularity.
#[derive(Clone, Debug)]
pub struct Reference {
    pub mem: BankMemory,
    pub regs: HashMap<(Coord, u8), CurryAluState>,
    lanes: usize,
    banks: usize,
}

impl Reference {
    pub fn new(hw: &HardwareConfig, mem: BankMemory) -> Self {
        Reference {
            mem,
            regs: HashMap::new(),
            lanes: hw.noc.mesh_x as usize,
            banks: hw.noc.mesh_y as usize,
        }
    }

    fn reg(&mut self, lane: usize, bank: usize, slot: u8) -> &mut CurryAluState {
        self.regs.entry((Coord::new(lane as u8, bank as u8), slot)).or_default()
    }

    pub fn run(&mut self, prog: &[RowInstruction]) -> Result<()> {
        for insn in prog {
            self.step(insn)?;
        }
        Ok(())
    }

    pub fn step(&mut self, insn: &RowInstruction) -> Result<()> {
        match *insn {
            RowInstruction::Scalar { op, src, dst, mask, config, slot } => {
                let sel = mask_banks(mask, self.lanes);
                let mut writes = Vec::new();
                for (b, ls) in &sel {
                    for (i, &l) in ls.iter().enumerate() {
                        let r = self.reg(l, *b, slot);
                        if let Some(init) = config.init {
                            r.iter_arg = init.iter_arg;
                            r.iter_op = init.iter_op;
                            r.iter_round = init.rounds;
                        }
                        let v = self.mem.get(ElemAddr::new(*b, src, i));
                        let r = self.reg(l, *b, slot);
                        let (ns, out) = alu_apply(*r, op, v, config.wr_reg, config.iter_tag);
                        *r = ns;
                        writes.push((ElemAddr::new(*b, dst, i), out));
                    }
                }
                for (a, v) in writes {
                    self.mem.set(a, v);
                }
            }
            RowInstruction::Access { op, src, dst, mask, constant, slot } => {
                for (b, ls) in mask_banks(mask, self.lanes) {
                    for (i, &l) in ls.iter().enumerate() {
                        match op {
                            AccessOp::Wr => {
                                let v = constant.unwrap_or_else(|| self.mem.get(ElemAddr::new(b, src, i)));
                                self.reg(l, b, slot).arg_reg = v;
                            }
                            AccessOp::Rd => {
                                let v = self.reg(l, b, slot).arg_reg;
                                self.mem.set(ElemAddr::new(b, dst, i), v);
                            }
                        }
                    }
                }
            }
            RowInstruction::BCast { src, dst, mask, src_bank, .. } => {
                let sel = mask_banks(mask, self.lanes);
                let width = sel.first().map_or(0, |(_, l)| l.len());
                let vals: Vec<Bf16> = (0..width).map(|i| self.mem.get(ElemAddr::new(src_bank as usize, src, i))).collect();
                for (b, ls) in sel {
                    for i in 0..ls.len() {
                        self.mem.set(ElemAddr::new(b, dst, i), vals[i]);
                    }
                }
            }
            RowInstruction::Reduce { op, src, dst, mask, dst_bank, slot } => {
                let sel = mask_banks(mask, self.lanes);
                let banks: Vec<usize> = sel.iter().map(|(b, _)| *b).collect();
                let lanes = sel[0].1.clone();
                let order = rank_order(&banks, dst_bank as usize)?;
                for (i, &l) in lanes.iter().enumerate() {
                    for &b in &order {
                        let v = self.mem.get(ElemAddr::new(b, src, i));
                        self.reg(l, b, slot).arg_reg = v;
                    }
                    for level in tree_levels(order.len()) {
                        for (s, r) in level {
                            let sent = self.reg(l, order[s], slot).arg_reg;
                            let recv = self.reg(l, order[r], slot);
                            let (ns, _) = alu_apply(*recv, op, sent, true, false);
                            *recv = ns;
                        }
                    }
                    let v = self.reg(l, dst_bank as usize, slot).arg_reg;
                    self.mem.set(ElemAddr::new(dst_bank as usize, dst, i), v);
                }
            }
            RowInstruction::Exchange { kind, negate, src, dst, offset, group, len } => {
                let moves = exchange_moves(kind, negate, offset as usize, group as usize, len as usize, self.banks, self.lanes)?;
                let vals: Vec<Bf16> = moves.iter().map(|m| self.mem.get(ElemAddr::new(m.from.y as usize, src, m.src_elem))).collect();
                for (m, v) in moves.iter().zip(vals) {
                    let f = exchange_factor(m.slot);
                    self.mem.set(ElemAddr::new(m.to.y as usize, dst, m.dst_elem), bf16_binop(BinOp::Mul, v, f));
                    self.reg(m.to.x as usize, m.to.y as usize, m.slot).arg_reg = f;
                }
            }
            RowInstruction::SramWrite { .. } | RowInstruction::SramCompute { .. } => {}
        }
        Ok(())
    }
}

/// Run `prog` through the reference interpreter.
pub fn run_reference(prog: &[RowInstruction], hw: &HardwareConfig, mem: BankMemory) -> Result<Reference> {
    for insn in prog {
        insn.validate()?;
    }
    let mut r = Reference::new(hw, mem);
    r.run(prog)?;
    Ok(r)
}

/// Compare a mesh run against the reference, ignoring elided elements.
pub fn check_against_reference(run: &ProgramRun, reference: &Reference) -> Result<()> {
    let diff = run.mem.diff(&reference.mem, &run.translation.elided);
    if let Some(a) = diff.first() {
        return Err(Error::Translate(format!(
            "{} elements differ from the reference, first at bank {} row {:#x} element {}: mesh {:?} vs reference {:?}",
            diff.len(),
            a.bank,
            a.row,
            a.elem,
            run.mem.get(*a),
            reference.mem.get(*a)
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::row::assemble;
    use proptest::prelude::*;

    fn hw() -> HardwareConfig {
        HardwareConfig::default()
    }

    fn b(v: f32) -> Bf16 {
        Bf16::from_f32(v)
    }

    fn both(text: &str, mem: BankMemory, fuse: bool) -> (ProgramRun, Reference) {
        let prog = assemble(text).unwrap();
        let run = run_program(&prog, &hw(), mem.clone(), fuse).unwrap();
        let reference = run_reference(&prog, &hw(), mem).unwrap();
        check_against_reference(&run, &reference).unwrap();
        (run, reference)
    }

    #[test]
    fn unfused_scalar_costs_three_cycles() {
        let mut mem = BankMemory::for_hw(&hw());
        mem.write(0, 0x10, 0, &[b(5.0)]);
        let (run, _) = both("NoC_Access Wr, 0x0, 0x0, 0x1, 2.0\nNoC_Scalar +=, 0x10, 0x11, 0x1", mem, false);
        assert_eq!(run.mem.read(0, 0x11, 0, 1), vec![b(7.0)]);
        assert_eq!(run.report.completion[0], 3);
        assert_eq!(run.report.completion[1] - run.report.issue[1], 3);
    }

    #[test]
    fn independent_units_pipeline() {
        let (run, _) = both("NoC_Access Wr, 0x0, 0x0, 0x1, 2.0\nNoC_Access Wr, 0x0, 0x0, 0x2, 3.0\nNoC_Access Wr, 0x0, 0x0, 0x4, 4.0", BankMemory::for_hw(&hw()), false);
        assert_eq!(run.report.issue, vec![0, 1, 2]);
        assert_eq!(run.report.cycles, 5);
    }

    #[test]
    fn reduce_and_broadcast_match_reference() {
        let mut mem = BankMemory::for_hw(&hw());
        for bank in 0..16 {
            mem.write(bank, 0x1, 0, &[b(bank as f32 * 0.37 + 1.0), b(-(bank as f32)), b(0.1), b(3.0)]);
        }
        let (run, r) = both("NoC_Reduce +=, 0x1, 0x2, 0xFFFFFFFFFFFFFFFF, 5\nNoC_BCast 0x2, 0x3, 0x0F0F0F0F0F0F0F0F, 5", mem, false);
        assert_eq!(run.report.stats.combine_events, 60);
        let total = r.mem.read(5, 0x2, 0, 4);
        for bank in [0, 2, 14] {
            assert_eq!(run.mem.read(bank, 0x3, 0, 4), total);
        }
        for (c, slot) in r.regs.keys() {
            assert_eq!(run.regs[&(*c, *slot)], r.regs[&(*c, *slot)], "{c} {slot}");
        }
    }

    #[test]
    fn rope_style_exchange() {
        let mut mem = BankMemory::for_hw(&hw());
        mem.write(0, 0x10, 0, &[b(1.0), b(2.0), b(3.0), b(4.0)]);
        let (run, _) = both("NoC_Exchange R-, 0x10, 0x12, 1, 2, len=4", mem, false);
        assert_eq!(run.mem.read(0, 0x12, 0, 4), vec![b(-2.0), b(1.0), b(-4.0), b(3.0)]);
    }

    #[test]
    fn exchange_keeps_negative_zero() {
        let mut mem = BankMemory::for_hw(&hw());
        mem.write(3, 0x10, 0, &[b(-0.0), b(0.0)]);
        let (run, _) = both("NoC_Exchange R+, 0x10, 0x12, 1, 2, len=2", mem, false);
        assert_eq!(run.mem.read(3, 0x12, 0, 2)[1].to_bits(), b(-0.0).to_bits());
    }

    #[test]
    fn fused_chain_matches_unfused_and_is_faster() {
        let mut mem = BankMemory::for_hw(&hw());
        for bank in 0..16 {
            mem.write(bank, 0x1, 0, &[b(bank as f32 + 0.5)]);
        }
        let text = "NoC_Access Wr, 0x0, 0x0, 0x1111111111111111, 3.0\n\
                    NoC_Access Wr, 0x0, 0x0, 0x2222222222222222, 0.5\n\
                    NoC_Access Wr, 0x0, 0x0, 0x4444444444444444, -1.0\n\
                    NoC_Access Wr, 0x0, 0x0, 0x8888888888888888, 7.0\n\
                    NoC_Scalar +=, 0x1, 0x2, 0x1111111111111111\n\
                    NoC_Scalar *=, 0x2, 0x3, 0x2222222222222222\n\
                    NoC_Scalar -=, 0x3, 0x4, 0x4444444444444444\n\
                    NoC_Scalar /=, 0x4, 0x5, 0x8888888888888888\n\
                    NoC_Scalar +=, 0x5, 0x6, 0x1111111111111111";
        let (unfused, r) = both(text, mem.clone(), false);
        let (fused, _) = both(text, mem, true);
        assert_eq!(fused.translation.packet_count(), 4 * 16 + 2 * 16);
        assert!(fused.report.cycles < unfused.report.cycles);
        assert_eq!(fused.mem.read(7, 0x6, 0, 1), r.mem.read(7, 0x6, 0, 1));
        assert!(fused.mem.diff(&unfused.mem, &fused.translation.elided).is_empty());
    }

    #[test]
    fn sram_units_take_fixed_time() {
        let (run, _) = both("SRAM_Write 0x100, 4096\nSRAM_Compute 0x200, 0x300, 512", BankMemory::for_hw(&hw()), false);
        assert!(run.report.cycles > 0);
        assert_eq!(run.report.packets, 0);
    }

    fn arb_line() -> impl Strategy<Value = String> {
        let rows = 0u32..4;
        let op = prop::sample::select(vec!["+=", "-=", "*=", "/="]);
        prop_oneof![
            (op.clone(), rows.clone(), rows.clone(), 1u64..=0xFFFF, any::<bool>()).prop_map(|(op, s, d, m, wr)| format!("NoC_Scalar {op}, {s}, {d}, {m:#x}{}", if wr { ", wr" } else { "" })),
            (rows.clone(), 1u64..=0xFFFF, -4i8..4).prop_map(|(d, m, c)| format!("NoC_Access Wr, 0, {d}, {m:#x}, {c}")),
            (rows.clone(), rows.clone(), 1u64..=0xFFFF).prop_map(|(s, d, m)| format!("NoC_Access Wr, {s}, {d}, {m:#x}")),
            (rows.clone(), 1u64..=0xFFFF).prop_map(|(d, m)| format!("NoC_Access Rd, 0, {d}, {m:#x}")),
            (op, rows.clone(), rows.clone(), 0usize..4).prop_map(|(op, s, d, root)| format!("NoC_Reduce {op}, {s}, {d}, 0x1111, {root}")),
            (rows.clone(), rows.clone(), 0u8..16).prop_map(|(s, d, src)| format!("NoC_BCast {s}, {d}, 0x3333, {src}")),
            (rows.clone(), rows, any::<bool>()).prop_map(|(s, d, neg)| format!("NoC_Exchange R{}, {s}, {d}, 1, 2, len=8", if neg { '-' } else { '+' })),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn random_programs_match_reference(lines in prop::collection::vec(arb_line(), 1..8), seed in any::<u64>()) {
            let mut mem = BankMemory::for_hw(&hw());
            let mut s = seed;
            for bank in 0..4 {
                for row in 0..4 {
                    let vals: Vec<Bf16> = (0..8).map(|_| { s = s.wrapping_mul(6364136223846793005).wrapping_add(1); b(((s >> 40) as i32 % 64 - 32) as f32 / 8.0) }).collect();
                    mem.write(bank, row, 0, &vals);
                }
            }
            let text = lines.join("\n");
            let prog = assemble(&text).unwrap();
            let reference = run_reference(&prog, &hw(), mem.clone()).unwrap();
            for fuse in [false, true] {
                let run = run_program(&prog, &hw(), mem.clone(), fuse).unwrap();
                prop_assert!(check_against_reference(&run, &reference).is_ok(), "{}", check_against_reference(&run, &reference).unwrap_err());
            }
        }
    }
}
