//! Expansion of row-level instructions into per-router packet jobs.
//!
//! Router `(lane, bank)` handles element `offset + i` of a row when it is
//! the `i`-th selected lane of its bank. Multi-step instructions (reduce and
//! broadcast trees) are split into phases that run back to back. Register
//! initialisation is emitted as a separate setup unit ahead of the
//! instruction that needs it.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::config::HardwareConfig;
use crate::error::{Error, Result};
use crate::isa::fuse::{FusedItem, FusedPacket, FusedProgram, Footprint};
use crate::isa::packet::{packet_from_record, packet_record, Packet, PacketType, PathStep, RegSelect};
use crate::isa::row::{mask_banks, AccessOp, ExchangeKind, RowAddr, RowInstruction};
use crate::noc::collective::{rank_order, tree_levels};
use crate::noc::mesh::Coord;
use crate::numerics::{Bf16, BinOp};
use crate::sram_pim::SramModel;

/// One element of one bank's DRAM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ElemAddr {
    pub bank: u8,
    pub row: u32,
    pub elem: u16,
}

impl ElemAddr {
    pub fn new(bank: usize, addr: RowAddr, i: usize) -> Self {
        ElemAddr {
            bank: bank as u8,
            row: addr.row,
            elem: addr.offset + i as u16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataSource {
    /// The packet's own data field.
    Literal,
    /// Read from DRAM when the phase starts.
    Row(ElemAddr),
    /// The source router's ArgReg in this slot, read at injection.
    Reg(u8),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sink {
    Row(ElemAddr),
    Absorb,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PacketJob {
    pub packet: Packet,
    pub at: Coord,
    pub slot: u8,
    pub source: DataSource,
    pub sink: Sink,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnitKind {
    Setup,
    Op,
    Sram,
}

/// What the controller issues in one slot: a setup, an operation or a fused
/// packet group.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Unit {
    /// Index of the (first) row instruction this unit came from.
    pub instr: usize,
    pub kind: UnitKind,
    pub phases: Vec<Vec<PacketJob>>,
    /// Fixed latency for units with no packets.
    pub busy_cycles: u64,
    #[serde(skip)]
    pub(crate) footprint: Footprint,
}

impl Unit {
    pub fn packet_count(&self) -> usize {
        self.phases.iter().map(Vec::len).sum()
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Translation {
    pub units: Vec<Unit>,
    /// DRAM elements the unfused program writes but this translation skips.
    pub elided: Vec<ElemAddr>,
}

impl Translation {
    pub fn packet_count(&self) -> usize {
        self.units.iter().map(Unit::packet_count).sum()
    }

    /// Packets grouped by the bank whose IO injects them, in issue order.
    pub fn bank_schedules(&self) -> BTreeMap<u8, Vec<Packet>> {
        let mut out: BTreeMap<u8, Vec<Packet>> = BTreeMap::new();
        for u in &self.units {
            for ph in &u.phases {
                for j in ph {
                    out.entry(j.at.y).or_default().push(j.packet);
                }
            }
        }
        out
    }
}

const DUMP_MAGIC: &[u8; 4] = b"PKS1";

/// Binary schedule dump: `PKS1`, u32 bank count, then per bank a u32 bank
/// id, u32 record count and that many 12-byte packet records. All integers
/// little-endian.
pub fn write_schedule_dump(schedules: &BTreeMap<u8, Vec<Packet>>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(DUMP_MAGIC);
    out.extend_from_slice(&(schedules.len() as u32).to_le_bytes());
    for (bank, packets) in schedules {
        out.extend_from_slice(&(*bank as u32).to_le_bytes());
        out.extend_from_slice(&(packets.len() as u32).to_le_bytes());
        for p in packets {
            out.extend_from_slice(&packet_record(p)?);
        }
    }
    Ok(out)
}

pub fn read_schedule_dump(bytes: &[u8]) -> Result<BTreeMap<u8, Vec<Packet>>> {
    let bad = |what: &str| Error::Translate(format!("malformed schedule dump: {what}"));
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != DUMP_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
    let banks = u32_at(take(4)?);
    let mut out = BTreeMap::new();
    for _ in 0..banks {
        let bank = u32_at(take(4)?);
        let n = u32_at(take(4)?);
        let mut v = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let rec: [u8; 12] = take(12)?.try_into().expect("12 bytes");
            v.push(packet_from_record(&rec)?);
        }
        out.insert(u8::try_from(bank).map_err(|_| bad("bank id"))?, v);
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

struct Translator<'a> {
    hw: &'a HardwareConfig,
    lanes: usize,
    banks: usize,
    elems_per_row: u32,
    /// ArgReg values the translator knows, used to skip redundant setups.
    known: HashMap<(Coord, u8), Bf16>,
    units: Vec<Unit>,
}

fn coord(lane: usize, bank: usize) -> Coord {
    Coord::new(lane as u8, bank as u8)
}

fn write_job(at: Coord, slot: u8, reg: RegSelect, data: Bf16, source: DataSource) -> Result<PacketJob> {
    let step = PathStep::new(at.x, at.y, BinOp::from_code(reg.code()));
    Ok(PacketJob {
        packet: Packet::new(PacketType::Write, data, 0, &[step])?,
        at,
        slot,
        source,
        sink: Sink::Absorb,
    })
}

impl<'a> Translator<'a> {
    fn new(hw: &'a HardwareConfig) -> Self {
        Translator {
            hw,
            lanes: hw.noc.mesh_x as usize,
            banks: hw.noc.mesh_y as usize,
            elems_per_row: hw.dram.row_width / 2,
            known: HashMap::new(),
            units: Vec::new(),
        }
    }

    fn footprint(&self, insn: &RowInstruction) -> Footprint {
        Footprint::of(insn, self.lanes, self.banks, self.elems_per_row)
    }

    fn check_elem(&self, addr: RowAddr, count: usize) -> Result<()> {
        if addr.offset as usize + count > self.elems_per_row as usize {
            return Err(Error::Translate(format!(
                "elements {}..{} of row {:#x} exceed the {}-element row",
                addr.offset,
                addr.offset as usize + count,
                addr.row,
                self.elems_per_row
            )));
        }
        Ok(())
    }

    fn check_slot(&self, slot: u8) -> Result<()> {
        if slot as u32 >= self.hw.noc.alus_per_router {
            return Err(Error::Translate(format!("ALU slot {slot} but routers have {} ALUs", self.hw.noc.alus_per_router)));
        }
        Ok(())
    }

    fn routers(&self, mask: u64) -> Result<Vec<(usize, Vec<usize>)>> {
        let total = self.lanes * self.banks;
        if total < 64 && mask >> total != 0 {
            return Err(Error::Translate(format!("mask {mask:#x} selects routers beyond the {total}-router channel")));
        }
        Ok(mask_banks(mask, self.lanes))
    }

    /// Banks and their shared lane list; trees need the same lanes everywhere.
    fn uniform_lanes(&self, mask: u64, what: &str) -> Result<(Vec<usize>, Vec<usize>)> {
        let sel = self.routers(mask)?;
        let lanes = sel[0].1.clone();
        if sel.iter().any(|(_, l)| *l != lanes) {
            return Err(Error::Translate(format!("{what} mask must select the same lanes in every bank")));
        }
        Ok((sel.iter().map(|(b, _)| *b).collect(), lanes))
    }

    fn push(&mut self, instr: usize, kind: UnitKind, phases: Vec<Vec<PacketJob>>, footprint: Footprint) {
        let phases: Vec<_> = phases.into_iter().filter(|p| !p.is_empty()).collect();
        self.units.push(Unit {
            instr,
            kind,
            phases,
            busy_cycles: 0,
            footprint,
        });
    }

    fn forget(&mut self, at: Coord, slot: u8) {
        self.known.remove(&(at, slot));
    }

    fn setup_init(&mut self, idx: usize, insn: &RowInstruction) -> Result<()> {
        let RowInstruction::Scalar { mask, config, slot, .. } = *insn else {
            return Ok(());
        };
        let Some(init) = config.init else {
            return Ok(());
        };
        let mut jobs = Vec::new();
        let mut fp = Footprint::default();
        for (b, ls) in self.routers(mask)? {
            for l in ls {
                let at = coord(l, b);
                jobs.push(write_job(at, slot, RegSelect::IterArg, init.iter_arg, DataSource::Literal)?);
                jobs.push(write_job(at, slot, RegSelect::IterOp, Bf16::from_bits(init.iter_op.code() as u16), DataSource::Literal)?);
                jobs.push(write_job(at, slot, RegSelect::IterRound, Bf16::from_bits(init.rounds), DataSource::Literal)?);
                fp.iregs.insert((b, l, slot));
            }
        }
        self.push(idx, UnitKind::Setup, vec![jobs], fp);
        Ok(())
    }

    fn single(&mut self, idx: usize, insn: &RowInstruction) -> Result<()> {
        insn.validate()?;
        let fp = self.footprint(insn);
        match *insn {
            RowInstruction::Scalar { op, src, dst, mask, config, slot } => {
                self.check_slot(slot)?;
                self.setup_init(idx, insn)?;
                let mut jobs = Vec::new();
                for (b, ls) in self.routers(mask)? {
                    self.check_elem(src, ls.len())?;
                    self.check_elem(dst, ls.len())?;
                    for (i, &l) in ls.iter().enumerate() {
                        let step = PathStep::new(l as u8, b as u8, op).with_flags(config.wr_reg, config.iter_tag);
                        jobs.push(PacketJob {
                            packet: Packet::new(PacketType::Scalar, Bf16::ZERO, 0, &[step])?,
                            at: coord(l, b),
                            slot,
                            source: DataSource::Row(ElemAddr::new(b, src, i)),
                            sink: Sink::Row(ElemAddr::new(b, dst, i)),
                        });
                        if config.wr_reg || config.iter_tag {
                            self.forget(coord(l, b), slot);
                        }
                    }
                }
                self.push(idx, UnitKind::Op, vec![jobs], fp);
            }
            RowInstruction::Access { op, src, dst, mask, constant, slot } => {
                self.check_slot(slot)?;
                let mut jobs = Vec::new();
                for (b, ls) in self.routers(mask)? {
                    for (i, &l) in ls.iter().enumerate() {
                        let at = coord(l, b);
                        match op {
                            AccessOp::Wr => {
                                let (data, source) = match constant {
                                    Some(c) => (c, DataSource::Literal),
                                    None => {
                                        self.check_elem(src, ls.len())?;
                                        (Bf16::ZERO, DataSource::Row(ElemAddr::new(b, src, i)))
                                    }
                                };
                                jobs.push(write_job(at, slot, RegSelect::ArgReg, data, source)?);
                                match constant {
                                    Some(c) => {
                                        self.known.insert((at, slot), c);
                                    }
                                    None => self.forget(at, slot),
                                }
                            }
                            AccessOp::Rd => {
                                self.check_elem(dst, ls.len())?;
                                jobs.push(PacketJob {
                                    packet: Packet::new(PacketType::Read, Bf16::ZERO, 0, &[PathStep::idle(at.x, at.y)])?,
                                    at,
                                    slot,
                                    source: DataSource::Literal,
                                    sink: Sink::Row(ElemAddr::new(b, dst, i)),
                                });
                            }
                        }
                    }
                }
                self.push(idx, UnitKind::Op, vec![jobs], fp);
            }
            RowInstruction::BCast { src, dst, mask, src_bank, slot } => {
                self.check_slot(slot)?;
                let (banks, lanes) = self.uniform_lanes(mask, "broadcast")?;
                let src_bank = src_bank as usize;
                if src_bank >= self.banks {
                    return Err(Error::Translate(format!("source bank {src_bank} outside the channel")));
                }
                self.check_elem(src, lanes.len())?;
                self.check_elem(dst, lanes.len())?;
                let mut all = banks.clone();
                all.push(src_bank);
                let order = rank_order(&all, src_bank)?;
                let bcast = |lane: usize, from: usize, to: usize, source: ElemAddr, i: usize| -> Result<PacketJob> {
                    Ok(PacketJob {
                        packet: Packet::new(PacketType::Broadcast, Bf16::ZERO, 0, &[PathStep::idle(lane as u8, to as u8)])?,
                        at: coord(lane, from),
                        slot,
                        source: DataSource::Row(source),
                        sink: Sink::Row(ElemAddr::new(to, dst, i)),
                    })
                };
                let mut phases = Vec::new();
                for (n, level) in tree_levels(order.len()).iter().rev().enumerate() {
                    let mut jobs = Vec::new();
                    if n == 0 && banks.contains(&src_bank) {
                        for (i, &l) in lanes.iter().enumerate() {
                            jobs.push(bcast(l, src_bank, src_bank, ElemAddr::new(src_bank, src, i), i)?);
                        }
                    }
                    for &(s, r) in level {
                        for (i, &l) in lanes.iter().enumerate() {
                            let from = order[r];
                            let source = if r == 0 { ElemAddr::new(from, src, i) } else { ElemAddr::new(from, dst, i) };
                            jobs.push(bcast(l, from, order[s], source, i)?);
                        }
                    }
                    phases.push(jobs);
                }
                if order.len() == 1 {
                    let jobs = lanes.iter().enumerate().map(|(i, &l)| bcast(l, src_bank, src_bank, ElemAddr::new(src_bank, src, i), i)).collect::<Result<_>>()?;
                    phases.push(jobs);
                }
                self.push(idx, UnitKind::Op, phases, fp);
            }
            RowInstruction::Reduce { op, src, dst, mask, dst_bank, slot } => {
                self.check_slot(slot)?;
                let (banks, lanes) = self.uniform_lanes(mask, "reduce")?;
                let dst_bank = dst_bank as usize;
                if !banks.contains(&dst_bank) {
                    return Err(Error::Translate(format!("destination bank {dst_bank} is not in the reduce mask")));
                }
                self.check_elem(src, lanes.len())?;
                self.check_elem(dst, lanes.len())?;
                let order = rank_order(&banks, dst_bank)?;
                let mut phases = Vec::new();
                let mut load = Vec::new();
                for &b in &order {
                    for (i, &l) in lanes.iter().enumerate() {
                        load.push(write_job(coord(l, b), slot, RegSelect::ArgReg, Bf16::ZERO, DataSource::Row(ElemAddr::new(b, src, i)))?);
                        self.forget(coord(l, b), slot);
                    }
                }
                phases.push(load);
                for level in tree_levels(order.len()) {
                    let mut jobs = Vec::new();
                    for (s, r) in level {
                        for &l in &lanes {
                            let step = PathStep::new(l as u8, order[r] as u8, op).with_flags(true, false);
                            jobs.push(PacketJob {
                                packet: Packet::new(PacketType::Reduce, Bf16::ZERO, 0, &[step])?,
                                at: coord(l, order[s]),
                                slot,
                                source: DataSource::Reg(slot),
                                sink: Sink::Absorb,
                            });
                        }
                    }
                    phases.push(jobs);
                }
                let mut read = Vec::new();
                for (i, &l) in lanes.iter().enumerate() {
                    read.push(PacketJob {
                        packet: Packet::new(PacketType::Read, Bf16::ZERO, 0, &[PathStep::idle(l as u8, dst_bank as u8)])?,
                        at: coord(l, dst_bank),
                        slot,
                        source: DataSource::Literal,
                        sink: Sink::Row(ElemAddr::new(dst_bank, dst, i)),
                    });
                }
                phases.push(read);
                self.push(idx, UnitKind::Op, phases, fp);
            }
            RowInstruction::Exchange { kind, negate, src, dst, offset, group, len } => {
                let n = len as usize;
                let moves = exchange_moves(kind, negate, offset as usize, group as usize, n, self.banks, self.lanes)?;
                self.check_elem(src, n)?;
                self.check_elem(dst, n)?;
                let mut setup = Vec::new();
                let mut needed: Vec<(Coord, u8)> = moves.iter().map(|m| (m.to, m.slot)).collect();
                needed.sort_by_key(|(c, s)| (c.y, c.x, *s));
                needed.dedup();
                for &(at, slot) in &needed {
                    self.check_slot(slot)?;
                    let want = exchange_factor(slot);
                    if self.known.get(&(at, slot)) != Some(&want) {
                        setup.push(write_job(at, slot, RegSelect::ArgReg, want, DataSource::Literal)?);
                        self.known.insert((at, slot), want);
                    }
                }
                if !setup.is_empty() {
                    let mut sfp = Footprint::default();
                    for j in &setup {
                        sfp.regs.insert((j.at.y as usize, j.at.x as usize, j.slot));
                    }
                    self.push(idx, UnitKind::Setup, vec![setup], sfp);
                }
                let mut jobs = Vec::with_capacity(moves.len());
                for m in &moves {
                    jobs.push(PacketJob {
                        packet: Packet::new(PacketType::Exchange, Bf16::ZERO, 0, &[PathStep::new(m.to.x, m.to.y, BinOp::Mul)])?,
                        at: m.from,
                        slot: m.slot,
                        source: DataSource::Row(ElemAddr::new(m.from.y as usize, src, m.src_elem)),
                        sink: Sink::Row(ElemAddr::new(m.to.y as usize, dst, m.dst_elem)),
                    });
                }
                self.push(idx, UnitKind::Op, vec![jobs], fp);
            }
            RowInstruction::SramWrite { length, .. } => {
                let model = SramModel::new(&self.hw.dram, &self.hw.sram, &self.hw.bond);
                let cost = model.load_cost(length as u64 * 2)?;
                self.sram_unit(idx, cost.ns, fp);
            }
            RowInstruction::SramCompute { length, .. } => {
                let model = SramModel::new(&self.hw.dram, &self.hw.sram, &self.hw.bond);
                let layout = self.hw.sram.layout;
                let cost = model.gemm_cost(layout, length as u64, layout.outputs() as u64, 1)?;
                self.sram_unit(idx, cost.ns, fp);
            }
        }
        Ok(())
    }

    fn sram_unit(&mut self, idx: usize, ns: f64, fp: Footprint) {
        let cycles = (ns / self.hw.noc.clock_period).ceil().max(1.0) as u64;
        self.units.push(Unit {
            instr: idx,
            kind: UnitKind::Sram,
            phases: Vec::new(),
            busy_cycles: cycles,
            footprint: fp,
        });
    }

    fn fused(&mut self, prog: &[RowInstruction], p: &FusedPacket, elided: &mut Vec<ElemAddr>) -> Result<()> {
        for &m in &p.members {
            self.setup_init(m, &prog[m])?;
        }
        let first = &prog[p.first()];
        let last = &prog[p.last()];
        let (RowInstruction::Scalar { src, slot, mask, .. }, RowInstruction::Scalar { dst: sink, .. }) = (*first, *last) else {
            return Err(Error::Translate("fused packet members must be NoC_Scalar".into()));
        };
        self.check_slot(slot)?;
        let banks: Vec<usize> = self.routers(mask)?.into_iter().map(|(b, _)| b).collect();
        let mut fp = Footprint::default();
        let mut jobs = Vec::new();
        for &b in &banks {
            let mut steps = Vec::with_capacity(p.period);
            for &m in &p.members[..p.period] {
                let RowInstruction::Scalar { op, mask, config, .. } = prog[m] else { unreachable!() };
                let lane = mask_banks(mask, self.lanes).into_iter().find(|(bb, _)| *bb == b).map(|(_, l)| l[0]).ok_or_else(|| Error::Translate("fused members differ in bank set".into()))?;
                steps.push(PathStep::new(lane as u8, b as u8, op).with_flags(config.wr_reg, config.iter_tag));
            }
            for &m in &p.members {
                let RowInstruction::Scalar { mask, config, .. } = prog[m] else { unreachable!() };
                for (bb, l) in mask_banks(mask, self.lanes) {
                    if bb == b && (config.wr_reg || config.iter_tag) {
                        self.forget(coord(l[0], b), slot);
                    }
                }
            }
            let iter_num = if p.loops > 1 { p.loops as u8 } else { 0 };
            jobs.push(PacketJob {
                packet: Packet::new(PacketType::Scalar, Bf16::ZERO, iter_num, &steps)?,
                at: Coord::new(steps[0].x, steps[0].y),
                slot,
                source: DataSource::Row(ElemAddr::new(b, src, 0)),
                sink: Sink::Row(ElemAddr::new(b, sink, 0)),
            });
            for &m in &p.members {
                let RowInstruction::Scalar { dst, .. } = prog[m] else { unreachable!() };
                if dst != sink {
                    let e = ElemAddr::new(b, dst, 0);
                    if !elided.contains(&e) {
                        elided.push(e);
                    }
                }
            }
        }
        for &m in &p.members {
            let f = self.footprint(&prog[m]);
            fp.merge(&f);
        }
        self.push(p.first(), UnitKind::Op, vec![jobs], fp);
        Ok(())
    }
}

/// ArgReg value an exchange expects in each slot.
pub fn exchange_factor(slot: u8) -> Bf16 {
    if slot == 1 {
        Bf16::from_f32(-1.0)
    } else {
        Bf16::ONE
    }
}

/// One element moved by an exchange.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExchangeMove {
    pub from: Coord,
    pub to: Coord,
    pub src_elem: usize,
    pub dst_elem: usize,
    /// Slot 1 negates, slot 0 passes through.
    pub slot: u8,
}

fn partner(x: usize, offset: usize, group: usize) -> usize {
    x - x % group + (x % group + offset) % group
}

/// Every element move of an exchange over all banks of a channel.
pub fn exchange_moves(kind: ExchangeKind, negate: bool, offset: usize, group: usize, len: usize, banks: usize, lanes: usize) -> Result<Vec<ExchangeMove>> {
    let mut out = Vec::with_capacity(len * banks);
    for b in 0..banks {
        for e in 0..len {
            let (to, dst_elem, pos) = match kind {
                ExchangeKind::R => {
                    let d = partner(e, offset, group);
                    if d >= len {
                        return Err(Error::Translate(format!("exchange partner {d} of element {e} beyond length {len}")));
                    }
                    (coord(d % lanes, b), d, d)
                }
                ExchangeKind::T => {
                    let pb = partner(b, offset, group);
                    if pb >= banks {
                        return Err(Error::Translate(format!("exchange partner bank {pb} of bank {b} outside the channel")));
                    }
                    (coord(e % lanes, pb), e, pb)
                }
            };
            out.push(ExchangeMove {
                from: coord(e % lanes, b),
                to,
                src_elem: e,
                dst_elem,
                slot: u8::from(negate && pos % 2 == 0),
            });
        }
    }
    Ok(out)
}

/// Translate a program instruction by instruction.
pub fn translate(prog: &[RowInstruction], hw: &HardwareConfig) -> Result<Translation> {
    translate_fused(prog, &FusedProgram::unfused(prog.len()), hw)
}

/// Translate a program after path fusion.
pub fn translate_fused(prog: &[RowInstruction], fused: &FusedProgram, hw: &HardwareConfig) -> Result<Translation> {
    let mut t = Translator::new(hw);
    let mut elided = Vec::new();
    for item in &fused.items {
        match item {
            FusedItem::Single(i) => t.single(*i, &prog[*i])?,
            FusedItem::Packet(p) => t.fused(prog, p, &mut elided)?,
        }
    }
    Ok(Translation { units: t.units, elided })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::row::assemble;

    fn hw() -> HardwareConfig {
        HardwareConfig::default()
    }

    #[test]
    fn reduce_over_eight_banks_builds_three_level_tree() {
        let prog = assemble("NoC_Reduce +=, 0x0, 0x1, 0x11111111, 3").unwrap();
        let t = translate(&prog, &hw()).unwrap();
        let u = &t.units[0];
        assert_eq!(u.phases.len(), 1 + 3 + 1);
        let combines: usize = u.phases.iter().flatten().filter(|j| j.packet.ptype == PacketType::Reduce).count();
        assert_eq!(combines, 7);
        let root_receives = u.phases.iter().flatten().filter(|j| j.packet.ptype == PacketType::Reduce && j.packet.path[0].y == 3).count();
        assert_eq!(root_receives, 3);
    }

    #[test]
    fn single_router_scalar_is_one_packet() {
        let prog = assemble("NoC_Scalar +=, 0x0, 0x1, 0x8").unwrap();
        let t = translate(&prog, &hw()).unwrap();
        assert_eq!(t.packet_count(), 1);
        let j = t.units[0].phases[0][0];
        assert_eq!(j.at, Coord::new(3, 0));
        assert_eq!(j.packet.active_steps(), 1);
    }

    #[test]
    fn rope_exchange_moves() {
        let moves = exchange_moves(ExchangeKind::R, true, 1, 2, 4, 1, 4).unwrap();
        let pairs: Vec<(usize, usize, u8)> = moves.iter().map(|m| (m.src_elem, m.dst_elem, m.slot)).collect();
        assert_eq!(pairs, vec![(0, 1, 0), (1, 0, 1), (2, 3, 0), (3, 2, 1)]);
    }

    #[test]
    fn transpose_exchange_crosses_banks() {
        let moves = exchange_moves(ExchangeKind::T, false, 1, 2, 2, 4, 4).unwrap();
        assert!(moves.iter().all(|m| m.from.y != m.to.y && m.from.x == m.to.x));
        assert!(exchange_moves(ExchangeKind::T, false, 1, 3, 2, 4, 4).is_err());
    }

    #[test]
    fn reduce_errors() {
        let prog = assemble("NoC_Reduce +=, 0x0, 0x1, 0xFF, 5").unwrap();
        assert!(translate(&prog, &hw()).is_err());
        let prog = assemble("NoC_Reduce +=, 0x0, 0x1, 0x31, 0").unwrap();
        assert!(translate(&prog, &hw()).is_err());
    }

    #[test]
    fn exchange_setup_skipped_when_known() {
        let prog = assemble("NoC_Exchange R-, 0x10, 0x12, 1, 2, len=8\nNoC_Exchange R-, 0x12, 0x14, 1, 2, len=8").unwrap();
        let t = translate(&prog, &hw()).unwrap();
        let setups = t.units.iter().filter(|u| u.kind == UnitKind::Setup).count();
        assert_eq!(setups, 1);
    }

    #[test]
    fn dump_round_trips() {
        let prog = assemble("NoC_Reduce +=, 0x0, 0x1, 0xFFFF, 3\nNoC_Scalar *=, 0x2, 0x3, 0xF0\nNoC_Access Wr, 0x0, 0x0, 0x1, 2.5").unwrap();
        let t = translate(&prog, &hw()).unwrap();
        let s = t.bank_schedules();
        let bytes = write_schedule_dump(&s).unwrap();
        assert_eq!(&bytes[..4], b"PKS1");
        assert_eq!(read_schedule_dump(&bytes).unwrap(), s);
        assert!(read_schedule_dump(&bytes[..bytes.len() - 1]).is_err());
    }
}
