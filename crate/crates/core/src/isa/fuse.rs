//! Path fusion: folds chains of NoC_Scalar instructions, where each one
//! consumes the previous one's destination, into multi-step packets.
//!
//! A chain member selects exactly one router per bank over the same bank
//! set, uses the same ALU slot, and visits a different router than its
//! predecessor in every bank. Chains may interleave with unrelated
//! instructions as long as no hazard separates the members; the fused
//! packet is issued at the position of the chain's first member. Values
//! written to intermediate destinations are never materialised, so those
//! destinations must not be read after the chain.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::isa::packet::PATH_STEPS;
use crate::isa::row::{mask_banks, AccessOp, RowAddr, RowInstruction};
use crate::numerics::BinOp;

/// Largest loop count a packet's IterNum field holds.
pub const MAX_LOOPS: usize = 15;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusedPacket {
    /// Folded instructions in program order; `period` steps per loop.
    pub members: Vec<usize>,
    pub period: usize,
    pub loops: usize,
}

impl FusedPacket {
    pub fn first(&self) -> usize {
        self.members[0]
    }

    pub fn last(&self) -> usize {
        *self.members.last().expect("non-empty packet")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusedItem {
    Single(usize),
    Packet(FusedPacket),
}

#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FusedProgram {
    pub items: Vec<FusedItem>,
}

impl FusedProgram {
    /// Program without fusion.
    pub fn unfused(len: usize) -> Self {
        FusedProgram {
            items: (0..len).map(FusedItem::Single).collect(),
        }
    }

    pub fn packets(&self) -> impl Iterator<Item = &FusedPacket> {
        self.items.iter().filter_map(|i| match i {
            FusedItem::Packet(p) => Some(p),
            FusedItem::Single(_) => None,
        })
    }

    /// Destinations written by folded intermediate steps and therefore left
    /// untouched by the fused form.
    pub fn elided(&self, prog: &[RowInstruction]) -> Vec<RowAddr> {
        let mut out = Vec::new();
        for p in self.packets() {
            let sink = scalar_dst(&prog[p.last()]);
            for &m in &p.members {
                let d = scalar_dst(&prog[m]);
                if d != sink && !out.contains(&d) {
                    out.push(d);
                }
            }
        }
        out
    }
}

fn scalar_dst(insn: &RowInstruction) -> RowAddr {
    match *insn {
        RowInstruction::Scalar { dst, .. } => dst,
        _ => unreachable!("fused members are NoC_Scalar"),
    }
}

/// Rows an instruction reads or writes, as `(row, first, end)` element
/// spans, ignoring banks.
#[derive(Clone, Debug, Default)]
pub(crate) struct Footprint {
    pub reads: Vec<(u32, u32, u32)>,
    pub writes: Vec<(u32, u32, u32)>,
    pub regs: HashSet<(usize, usize, u8)>,
    /// ALU slots whose iteration registers are read or written.
    pub iregs: HashSet<(usize, usize, u8)>,
}

fn spans_overlap(a: &[(u32, u32, u32)], b: &[(u32, u32, u32)]) -> bool {
    a.iter().any(|&(r, lo, hi)| b.iter().any(|&(r2, lo2, hi2)| r == r2 && lo < hi2 && lo2 < hi))
}

fn span(addr: RowAddr, len: u32, elems_per_row: u32) -> Vec<(u32, u32, u32)> {
    let mut out = Vec::new();
    let mut start = addr.offset as u32;
    let mut row = addr.row;
    let mut left = len;
    while left > 0 {
        let n = left.min(elems_per_row.saturating_sub(start).max(1));
        out.push((row, start, start + n));
        left -= n;
        row += 1;
        start = 0;
    }
    out
}

impl Footprint {
    pub fn conflicts(&self, other: &Footprint) -> bool {
        spans_overlap(&self.reads, &other.writes)
            || spans_overlap(&self.writes, &other.reads)
            || spans_overlap(&self.writes, &other.writes)
            || !self.regs.is_disjoint(&other.regs)
            || !self.iregs.is_disjoint(&other.iregs)
    }

    pub fn merge(&mut self, other: &Footprint) {
        self.reads.extend_from_slice(&other.reads);
        self.writes.extend_from_slice(&other.writes);
        self.regs.extend(other.regs.iter().copied());
        self.iregs.extend(other.iregs.iter().copied());
    }

    pub fn of(insn: &RowInstruction, lanes: usize, banks: usize, elems_per_row: u32) -> Footprint {
        let mut f = Footprint::default();
        let routers = |mask: u64, slot: u8, f: &mut Footprint| {
            let mut widest = 0;
            for (b, ls) in mask_banks(mask, lanes) {
                widest = widest.max(ls.len() as u32);
                for l in ls {
                    f.regs.insert((b, l, slot));
                }
            }
            widest
        };
        match *insn {
            RowInstruction::Scalar { src, dst, mask, slot, config, .. } => {
                let n = routers(mask, slot, &mut f);
                if config.iter_tag || config.init.is_some() {
                    f.iregs = f.regs.clone();
                }
                f.reads = span(src, n, elems_per_row);
                f.writes = span(dst, n, elems_per_row);
            }
            RowInstruction::Access { op, src, dst, mask, constant, slot } => {
                let n = routers(mask, slot, &mut f);
                match op {
                    AccessOp::Rd => f.writes = span(dst, n, elems_per_row),
                    AccessOp::Wr if constant.is_none() => f.reads = span(src, n, elems_per_row),
                    AccessOp::Wr => {}
                }
            }
            RowInstruction::BCast { src, dst, mask, .. } => {
                let n = mask_banks(mask, lanes).iter().map(|(_, l)| l.len() as u32).max().unwrap_or(0);
                f.reads = span(src, n, elems_per_row);
                f.reads.extend(span(dst, n, elems_per_row));
                f.writes = span(dst, n, elems_per_row);
            }
            RowInstruction::Reduce { src, dst, mask, slot, .. } => {
                let n = routers(mask, slot, &mut f);
                f.reads = span(src, n, elems_per_row);
                f.writes = span(dst, n, elems_per_row);
            }
            RowInstruction::Exchange { src, dst, len, .. } => {
                f.reads = span(src, len as u32, elems_per_row);
                f.writes = span(dst, len as u32, elems_per_row);
                for b in 0..banks {
                    for l in 0..lanes {
                        f.regs.insert((b, l, 0));
                        f.regs.insert((b, l, 1));
                    }
                }
            }
            RowInstruction::SramWrite { addr, length } => f.reads = span(addr, length, elems_per_row),
            RowInstruction::SramCompute { src, dst, length } => {
                f.reads = span(src, length, elems_per_row);
                f.writes = span(dst, length, elems_per_row);
            }
        }
        f
    }
}

/// Per-member shape that must repeat for loop folding.
#[derive(Clone, Debug, PartialEq, Eq)]
struct StepShape {
    op: BinOp,
    routers: Vec<(usize, usize)>,
    wr: bool,
    iter: bool,
    slot: u8,
}

fn shape(insn: &RowInstruction, lanes: usize) -> Option<StepShape> {
    match *insn {
        RowInstruction::Scalar { op, mask, config, slot, .. } => {
            let banks = mask_banks(mask, lanes);
            if banks.iter().any(|(_, l)| l.len() != 1) {
                return None;
            }
            Some(StepShape {
                op,
                routers: banks.iter().map(|(b, l)| (*b, l[0])).collect(),
                wr: config.wr_reg,
                iter: config.iter_tag,
                slot,
            })
        }
        _ => None,
    }
}

struct Chain {
    members: Vec<usize>,
    own: Footprint,
    foreign: Footprint,
}

/// Fold fusible NoC_Scalar chains into packets.
pub fn fuse_paths(prog: &[RowInstruction], lanes: usize, banks: usize, elems_per_row: u32) -> FusedProgram {
    let fps: Vec<Footprint> = prog.iter().map(|i| Footprint::of(i, lanes, banks, elems_per_row)).collect();
    let shapes: Vec<Option<StepShape>> = prog.iter().map(|i| shape(i, lanes)).collect();
    let mut open: Vec<Chain> = Vec::new();
    let mut closed: Vec<Vec<usize>> = Vec::new();

    for (i, insn) in prog.iter().enumerate() {
        let mut joined = None;
        if let (Some(sh), RowInstruction::Scalar { src, config, .. }) = (&shapes[i], insn) {
            for (ci, c) in open.iter().enumerate() {
                let last = *c.members.last().expect("chain has members");
                let prev = shapes[last].as_ref().expect("members are fusible");
                let linked = scalar_dst(&prog[last]) == *src
                    && prev.slot == sh.slot
                    && prev.routers.len() == sh.routers.len()
                    && prev.routers.iter().zip(&sh.routers).all(|(a, b)| a.0 == b.0 && a.1 != b.1);
                if !linked || fps[i].conflicts(&c.foreign) {
                    continue;
                }
                let reg_reused = c.members.iter().any(|&m| !fps[m].regs.is_disjoint(&fps[i].regs) || !fps[m].iregs.is_disjoint(&fps[i].iregs));
                if config.init.is_some() && reg_reused {
                    continue;
                }
                joined = Some(ci);
                break;
            }
        }
        // Every other open chain sees this instruction as foreign.
        let mut k = 0;
        while k < open.len() {
            if Some(k) == joined {
                k += 1;
                continue;
            }
            if fps[i].conflicts(&open[k].own) {
                let c = open.remove(k);
                closed.push(c.members);
                if let Some(j) = joined.as_mut() {
                    if *j > k {
                        *j -= 1;
                    }
                }
            } else {
                open[k].foreign.merge(&fps[i]);
                k += 1;
            }
        }
        match joined {
            Some(ci) => {
                open[ci].members.push(i);
                let f = fps[i].clone();
                open[ci].own.merge(&f);
            }
            None if shapes[i].is_some() => open.push(Chain {
                members: vec![i],
                own: fps[i].clone(),
                foreign: Footprint::default(),
            }),
            None => {}
        }
    }
    closed.extend(open.into_iter().map(|c| c.members));

    let mut items: Vec<(usize, usize, FusedItem)> = Vec::new();
    let mut folded = vec![false; prog.len()];
    for mut members in closed {
        shrink_for_liveness(prog, &fps, &mut members, elems_per_row);
        if members.len() < 2 {
            continue;
        }
        for (n, p) in split_chain(&members, &shapes, prog).into_iter().enumerate() {
            for &m in &p.members {
                folded[m] = true;
            }
            items.push((members[0], n, FusedItem::Packet(p)));
        }
    }
    for (i, f) in folded.iter().enumerate() {
        if !f {
            items.push((i, 0, FusedItem::Single(i)));
        }
    }
    items.sort_by_key(|(pos, n, _)| (*pos, *n));
    FusedProgram {
        items: items.into_iter().map(|(_, _, it)| it).collect(),
    }
}

/// Drop trailing members while an elided destination is read after the
/// chain before anything overwrites it.
fn shrink_for_liveness(prog: &[RowInstruction], fps: &[Footprint], members: &mut Vec<usize>, elems_per_row: u32) {
    while members.len() >= 2 {
        let last = *members.last().expect("non-empty");
        let sink = scalar_dst(&prog[last]);
        let member_set: HashSet<usize> = members.iter().copied().collect();
        let mut pending: Vec<(u32, u32, u32)> = members
            .iter()
            .map(|&m| scalar_dst(&prog[m]))
            .filter(|d| *d != sink)
            .flat_map(|d| span(d, 1, elems_per_row))
            .collect();
        pending.sort_unstable();
        pending.dedup();
        let mut live = false;
        for j in (members[0] + 1..prog.len()).filter(|j| !member_set.contains(j)) {
            if pending.is_empty() {
                break;
            }
            if spans_overlap(&fps[j].reads, &pending) {
                live = true;
                break;
            }
            pending.retain(|p| !spans_overlap(&fps[j].writes, std::slice::from_ref(p)));
        }
        if !live {
            return;
        }
        members.pop();
    }
}

fn split_chain(members: &[usize], shapes: &[Option<StepShape>], prog: &[RowInstruction]) -> Vec<FusedPacket> {
    let n = members.len();
    let sh = |k: usize| shapes[members[k]].as_ref().expect("fusible");
    let has_init = |k: usize| matches!(prog[members[k]], RowInstruction::Scalar { config, .. } if config.init.is_some());
    let period = (2..=PATH_STEPS.min(n)).find(|&p| n % p == 0 && (p..n).all(|k| sh(k) == sh(k - p) && !has_init(k)));
    let mut out = Vec::new();
    match period {
        Some(p) => {
            let loops = n / p;
            let mut start = 0;
            while start < loops {
                let l = (loops - start).min(MAX_LOOPS);
                out.push(FusedPacket {
                    members: members[start * p..(start + l) * p].to_vec(),
                    period: p,
                    loops: l,
                });
                start += l;
            }
        }
        None => {
            for chunk in members.chunks(PATH_STEPS) {
                out.push(FusedPacket {
                    members: chunk.to_vec(),
                    period: chunk.len(),
                    loops: 1,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::row::assemble;

    fn fuse(text: &str) -> FusedProgram {
        fuse_paths(&assemble(text).unwrap(), 4, 16, 512)
    }

    #[test]
    fn unrelated_scalars_stay_apart() {
        let f = fuse("NoC_Scalar +=, 0x1, 0x2, 0x1\nNoC_Scalar *=, 0x5, 0x6, 0x2");
        assert_eq!(f, FusedProgram::unfused(2));
    }

    #[test]
    fn five_step_chain_splits_four_plus_one() {
        let f = fuse(
            "NoC_Scalar +=, 0x1, 0x2, 0x1\n\
             NoC_Scalar *=, 0x2, 0x3, 0x2\n\
             NoC_Scalar -=, 0x3, 0x4, 0x4\n\
             NoC_Scalar /=, 0x4, 0x5, 0x8\n\
             NoC_Scalar +=, 0x5, 0x6, 0x1",
        );
        let ps: Vec<_> = f.packets().cloned().collect();
        assert_eq!(ps.len(), 2);
        assert_eq!(ps[0].members, vec![0, 1, 2, 3]);
        assert_eq!(ps[1].members, vec![4]);
    }

    #[test]
    fn periodic_chain_folds_into_loops() {
        let mut text = String::new();
        let mut src = 0x10;
        for round in 0..6 {
            for (k, (op, lane)) in [("*=", 0), ("/=", 1), ("+=", 2)].iter().enumerate() {
                let dst = 0x20 + k;
                let extra = if *op == "/=" { if round == 0 { ", iter, init=1/sub/6" } else { ", iter" } } else { "" };
                text.push_str(&format!("NoC_Scalar {op}, {src:#x}, {dst:#x}, {:#x}{extra}\n", 1u64 << lane));
                src = dst;
            }
        }
        let f = fuse(&text);
        let ps: Vec<_> = f.packets().cloned().collect();
        assert_eq!(ps.len(), 1);
        assert_eq!((ps[0].period, ps[0].loops, ps[0].members.len()), (3, 6, 18));
        let prog = assemble(&text).unwrap();
        let elided = f.elided(&prog);
        assert_eq!(elided.len(), 2);
    }

    #[test]
    fn live_intermediate_blocks_fusion() {
        let f = fuse(
            "NoC_Scalar +=, 0x1, 0x2, 0x1\n\
             NoC_Scalar *=, 0x2, 0x3, 0x2\n\
             NoC_Scalar +=, 0x2, 0x9, 0x4",
        );
        assert_eq!(f.packets().count(), 0);
    }

    #[test]
    fn overwritten_intermediate_is_dead() {
        let f = fuse(
            "NoC_Scalar +=, 0x1, 0x2, 0x1\n\
             NoC_Scalar *=, 0x2, 0x3, 0x2\n\
             NoC_Access Rd, 0x0, 0x2, 0x100\n\
             NoC_Scalar +=, 0x2, 0x9, 0x400",
        );
        assert_eq!(f.packets().count(), 1);
    }

    #[test]
    fn same_router_consecutively_not_fused() {
        let f = fuse("NoC_Scalar +=, 0x1, 0x2, 0x1\nNoC_Scalar *=, 0x2, 0x3, 0x1");
        assert_eq!(f.packets().count(), 0);
    }

    #[test]
    fn interleaved_chains_both_fuse() {
        let f = fuse(
            "NoC_Scalar +=, 0x1:0, 0x2:0, 0x1\n\
             NoC_Scalar +=, 0x1:1, 0x2:1, 0x2, alu=1\n\
             NoC_Scalar *=, 0x2:0, 0x3:0, 0x2\n\
             NoC_Scalar *=, 0x2:1, 0x3:1, 0x4, alu=1",
        );
        let ps: Vec<_> = f.packets().cloned().collect();
        assert_eq!(ps.len(), 2);
        assert_eq!(ps[0].members, vec![0, 2]);
        assert_eq!(ps[1].members, vec![1, 3]);
    }

    #[test]
    fn hazard_between_members_stops_chain() {
        let f = fuse(
            "NoC_Scalar +=, 0x1, 0x2, 0x1\n\
             NoC_Access Wr, 0x0, 0x0, 0x2, 3.0\n\
             NoC_Scalar *=, 0x2, 0x3, 0x2",
        );
        assert_eq!(f.packets().count(), 0);
    }
}
