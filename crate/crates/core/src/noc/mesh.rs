//! Flit-level simulation of one channel's router mesh.
//!
//! Router `(x, y)` sits on lane `x` of bank `y`. Every router has four mesh
//! ports plus a local port to its bank's IO, which injects and ejects at most
//! one flit per cycle. A flit injected at cycle `t` can traverse the switch at
//! `t + 1`; each hop then costs one cycle with bypass (or
//! `router_delay_cycles` without), and an ejected flit is written back one
//! cycle after its last traversal. The ALU fires during switch traversal at
//! routers the flit's path names.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::NocSpec;
use crate::error::{Error, Result};
use crate::isa::packet::{Packet, PacketType, RegSelect};
use crate::noc::alu::{alu_apply, CurryAluState};
use crate::numerics::{Bf16, BinOp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coord {
    pub x: u8,
    pub y: u8,
}

impl Coord {
    pub const fn new(x: u8, y: u8) -> Self {
        Coord { x, y }
    }

    pub fn hops_to(self, other: Coord) -> u32 {
        (self.x as i32 - other.x as i32).unsigned_abs() + (self.y as i32 - other.y as i32).unsigned_abs()
    }
}

impl fmt::Display for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Port {
    North,
    South,
    East,
    West,
    Local,
}

impl Port {
    pub const ALL: [Port; 5] = [Port::North, Port::South, Port::East, Port::West, Port::Local];

    fn index(self) -> usize {
        self as usize
    }

    fn opposite(self) -> Port {
        match self {
            Port::North => Port::South,
            Port::South => Port::North,
            Port::East => Port::West,
            Port::West => Port::East,
            Port::Local => Port::Local,
        }
    }
}

/// X-then-Y dimension-order routing. North is increasing `y`, East is
/// increasing `x`; `Local` when already there.
pub fn route_next_hop(cur: Coord, dst: Coord) -> Port {
    if cur.x < dst.x {
        Port::East
    } else if cur.x > dst.x {
        Port::West
    } else if cur.y < dst.y {
        Port::North
    } else if cur.y > dst.y {
        Port::South
    } else {
        Port::Local
    }
}

/// A packet ready for injection, with the side-band data the bank IO keeps
/// for it (ALU slot, where to read its data, whether it ejects).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlitSpec {
    pub packet: Packet,
    pub src: Coord,
    /// ALU slot used at every path step.
    pub slot: u8,
    /// Replace the data with this slot's ArgReg at the source router when
    /// injected.
    pub load_reg: Option<u8>,
    /// Consumed by the final router instead of being written back.
    pub absorb: bool,
    /// Caller's handle, echoed in the delivery.
    pub tag: u64,
    /// Earliest injection cycle.
    pub release: u64,
}

impl FlitSpec {
    pub fn new(packet: Packet, src: Coord, release: u64) -> Self {
        FlitSpec {
            packet,
            src,
            slot: 0,
            load_reg: None,
            absorb: matches!(packet.ptype, PacketType::Write | PacketType::Reduce),
            tag: 0,
            release,
        }
    }

    pub fn slot(mut self, slot: u8) -> Self {
        self.slot = slot;
        self
    }

    pub fn tag(mut self, tag: u64) -> Self {
        self.tag = tag;
        self
    }

    pub fn load_reg(mut self, slot: u8) -> Self {
        self.load_reg = Some(slot);
        self
    }

    pub fn absorb(mut self, absorb: bool) -> Self {
        self.absorb = absorb;
        self
    }
}

#[derive(Clone, Debug)]
struct Flit {
    id: u64,
    spec: FlitSpec,
    data: Bf16,
    step: usize,
    active: usize,
    loop_idx: u32,
    ready_at: u64,
}

impl Flit {
    fn done(&self) -> bool {
        self.loop_idx >= self.spec.packet.loops()
    }

    fn target(&self) -> Coord {
        let s = self.spec.packet.path[self.step];
        Coord::new(s.x, s.y)
    }
}

/// A flit leaving the network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Delivery {
    pub flit_id: u64,
    pub tag: u64,
    pub coord: Coord,
    pub data: Bf16,
    pub cycle: u64,
    pub absorbed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlitEventKind {
    Inject,
    Alu,
    Hop,
    Eject,
    Absorb,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlitEvent {
    pub cycle: u64,
    pub flit_id: u64,
    pub coord: Coord,
    pub event: FlitEventKind,
}

impl fmt::Display for FlitEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {:?}", self.cycle, self.flit_id, self.coord, self.event)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeshStats {
    pub injected: u64,
    pub ejected: u64,
    pub absorbed: u64,
    pub hops: u64,
    pub alu_ops: u64,
    /// ALU applications on Reduce packets.
    pub combine_events: u64,
    pub div_by_zero: u64,
    /// Cycles some head flit wanted a port it did not get.
    pub contention_stalls: u64,
}

#[derive(Clone, Debug)]
struct Router {
    alus: Vec<CurryAluState>,
    inq: [VecDeque<Flit>; 5],
    rr: [usize; 5],
    pending: BTreeMap<(u64, u64), Flit>,
}

#[derive(Clone, Debug)]
pub struct Mesh {
    spec: NocSpec,
    routers: Vec<Router>,
    now: u64,
    next_id: u64,
    queued: usize,
    pending: usize,
    completion: Vec<Option<u64>>,
    deliveries: Vec<Delivery>,
    stats: MeshStats,
    trace: Option<Vec<FlitEvent>>,
    stalled_for: u64,
}

impl Mesh {
    pub fn new(spec: &NocSpec) -> Self {
        let router = Router {
            alus: vec![CurryAluState::default(); spec.alus_per_router as usize],
            inq: Default::default(),
            rr: [0; 5],
            pending: BTreeMap::new(),
        };
        Mesh {
            spec: spec.clone(),
            routers: vec![router; spec.routers()],
            now: 0,
            next_id: 0,
            queued: 0,
            pending: 0,
            completion: Vec::new(),
            deliveries: Vec::new(),
            stats: MeshStats::default(),
            trace: None,
            stalled_for: 0,
        }
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[FlitEvent] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn stats(&self) -> MeshStats {
        self.stats
    }

    pub fn spec(&self) -> &NocSpec {
        &self.spec
    }

    pub fn in_flight(&self) -> usize {
        self.queued + self.pending
    }

    fn index(&self, c: Coord) -> usize {
        c.y as usize * self.spec.mesh_x as usize + c.x as usize
    }

    fn coord(&self, i: usize) -> Coord {
        let w = self.spec.mesh_x as usize;
        Coord::new((i % w) as u8, (i / w) as u8)
    }

    pub fn contains(&self, c: Coord) -> bool {
        (c.x as u32) < self.spec.mesh_x && (c.y as u32) < self.spec.mesh_y
    }

    pub fn alu(&self, c: Coord, slot: u8) -> CurryAluState {
        self.routers[self.index(c)].alus[slot as usize]
    }

    pub fn alu_mut(&mut self, c: Coord, slot: u8) -> &mut CurryAluState {
        let i = self.index(c);
        &mut self.routers[i].alus[slot as usize]
    }

    /// Queue a flit for injection at its source router. Returns its id.
    pub fn inject(&mut self, spec: FlitSpec) -> Result<u64> {
        spec.packet.validate()?;
        if !self.contains(spec.src) {
            return Err(Error::PacketField {
                field: "src",
                value: ((spec.src.x as u64) << 8) | spec.src.y as u64,
            });
        }
        for s in spec.packet.steps() {
            if !self.contains(Coord::new(s.x, s.y)) {
                return Err(Error::PacketField {
                    field: "path",
                    value: ((s.x as u64) << 8) | s.y as u64,
                });
            }
        }
        if spec.slot as u32 >= self.spec.alus_per_router || spec.load_reg.is_some_and(|s| s as u32 >= self.spec.alus_per_router) {
            return Err(Error::PacketField {
                field: "slot",
                value: spec.slot as u64,
            });
        }
        let id = self.next_id;
        self.next_id += 1;
        self.completion.push(None);
        let flit = Flit {
            id,
            spec,
            data: spec.packet.data,
            step: 0,
            active: spec.packet.active_steps(),
            loop_idx: 0,
            ready_at: 0,
        };
        let r = self.index(spec.src);
        self.routers[r].pending.insert((spec.release, id), flit);
        self.pending += 1;
        Ok(id)
    }

    pub fn completion(&self, id: u64) -> Option<u64> {
        self.completion[id as usize]
    }

    /// Deliveries since the last call.
    pub fn drain_deliveries(&mut self) -> Vec<Delivery> {
        std::mem::take(&mut self.deliveries)
    }

    fn event(&mut self, flit_id: u64, coord: Coord, event: FlitEventKind) {
        let cycle = self.now;
        if let Some(t) = self.trace.as_mut() {
            t.push(FlitEvent { cycle, flit_id, coord, event });
        }
    }

    fn deliver(&mut self, flit: Flit, coord: Coord, absorbed: bool) {
        let cycle = self.now + 1;
        debug_assert!(self.completion[flit.id as usize].is_none(), "flit delivered twice");
        self.completion[flit.id as usize] = Some(cycle);
        if absorbed {
            self.stats.absorbed += 1;
        } else {
            self.stats.ejected += 1;
        }
        self.queued -= 1;
        self.event(flit.id, coord, if absorbed { FlitEventKind::Absorb } else { FlitEventKind::Eject });
        self.deliveries.push(Delivery {
            flit_id: flit.id,
            tag: flit.spec.tag,
            coord,
            data: flit.data,
            cycle,
            absorbed,
        });
    }

    /// Apply the visit of `flit` to router `r`'s ALU/registers.
    fn visit(alus: &mut [CurryAluState], flit: &mut Flit, stats: &mut MeshStats) {
        let step = flit.spec.packet.path[flit.step];
        let slot = flit.spec.slot as usize;
        let ptype = flit.spec.packet.ptype;
        if ptype.computes() {
            let st = alus[slot];
            if step.op == BinOp::Div && st.arg_reg.is_zero() && !(step.iter_tag && st.iter_round == 0) {
                stats.div_by_zero += 1;
            }
            let (ns, out) = alu_apply(st, step.op, flit.data, step.wr_reg, step.iter_tag);
            alus[slot] = ns;
            flit.data = out;
            stats.alu_ops += 1;
            if ptype == PacketType::Reduce {
                stats.combine_events += 1;
            }
        } else if flit.step == 0 && flit.loop_idx == 0 {
            match ptype {
                PacketType::Read => flit.data = alus[slot].arg_reg,
                PacketType::Write => {
                    let a = &mut alus[slot];
                    match RegSelect::from_code(step.op.code()) {
                        RegSelect::ArgReg => a.arg_reg = flit.data,
                        RegSelect::IterArg => a.iter_arg = flit.data,
                        RegSelect::IterOp => a.iter_op = BinOp::from_code((flit.data.to_bits() & 3) as u8),
                        RegSelect::IterRound => a.iter_round = flit.data.to_bits(),
                    }
                }
                _ => {}
            }
        }
        flit.step += 1;
        if flit.step == flit.active {
            flit.loop_idx += 1;
            if !flit.done() {
                flit.step = 0;
            } else {
                flit.step = flit.active - 1;
            }
        }
    }

    /// Advance one cycle.
    pub fn step(&mut self) -> Result<()> {
        let now = self.now;
        let depth = self.spec.queue_depth as usize;
        let hop_delay = if self.spec.bypass { 1 } else { self.spec.router_delay_cycles as u64 };
        let mut moved = false;

        for r in 0..self.routers.len() {
            let local = Port::Local.index();
            if self.routers[r].inq[local].len() >= depth {
                continue;
            }
            let key = match self.routers[r].pending.keys().next() {
                Some(&k) if k.0 <= now => k,
                _ => continue,
            };
            let mut flit = self.routers[r].pending.remove(&key).expect("key present");
            if let Some(s) = flit.spec.load_reg {
                flit.data = self.routers[r].alus[s as usize].arg_reg;
            }
            flit.ready_at = now + 1;
            let id = flit.id;
            self.routers[r].inq[local].push_back(flit);
            self.pending -= 1;
            self.queued += 1;
            self.stats.injected += 1;
            moved = true;
            let c = self.coord(r);
            self.event(id, c, FlitEventKind::Inject);
        }

        for r in 0..self.routers.len() {
            let here = self.coord(r);
            let mut requests: [Option<Port>; 5] = [None; 5];
            for p in 0..5 {
                let router = &mut self.routers[r];
                let Some(f) = router.inq[p].front_mut() else { continue };
                if f.ready_at > now {
                    continue;
                }
                if !f.done() && f.target() == here {
                    Self::visit(&mut router.alus, f, &mut self.stats);
                    moved = true;
                    let id = f.id;
                    self.event(id, here, FlitEventKind::Alu);
                }
                let router = &mut self.routers[r];
                let f = router.inq[p].front_mut().expect("still queued");
                if f.done() {
                    if f.spec.absorb {
                        let flit = router.inq[p].pop_front().expect("head");
                        self.deliver(flit, here, true);
                        moved = true;
                    } else {
                        requests[p] = Some(Port::Local);
                    }
                } else {
                    let t = f.target();
                    if t == here {
                        // Single-router loop: visit again next cycle.
                        f.ready_at = now + 1;
                    } else {
                        requests[p] = Some(route_next_hop(here, t));
                    }
                }
            }
            for out in Port::ALL {
                let o = out.index();
                let start = self.routers[r].rr[o];
                let winner = (0..5).map(|k| (start + k) % 5).find(|&p| requests[p] == Some(out));
                let Some(w) = winner else { continue };
                let contenders = requests.iter().filter(|q| **q == Some(out)).count() as u64;
                if out == Port::Local {
                    let flit = self.routers[r].inq[w].pop_front().expect("head");
                    self.deliver(flit, here, false);
                    self.routers[r].rr[o] = (w + 1) % 5;
                    self.stats.contention_stalls += contenders - 1;
                    moved = true;
                    continue;
                }
                let next = match out {
                    Port::East => Coord::new(here.x + 1, here.y),
                    Port::West => Coord::new(here.x - 1, here.y),
                    Port::North => Coord::new(here.x, here.y + 1),
                    Port::South => Coord::new(here.x, here.y - 1),
                    Port::Local => unreachable!(),
                };
                let n = self.index(next);
                let in_port = out.opposite().index();
                if self.routers[n].inq[in_port].len() >= depth {
                    self.stats.contention_stalls += contenders;
                    continue;
                }
                let mut flit = self.routers[r].inq[w].pop_front().expect("head");
                flit.ready_at = now + hop_delay;
                let id = flit.id;
                self.routers[n].inq[in_port].push_back(flit);
                self.routers[r].rr[o] = (w + 1) % 5;
                self.stats.hops += 1;
                self.stats.contention_stalls += contenders - 1;
                moved = true;
                self.event(id, next, FlitEventKind::Hop);
            }
        }

        self.now += 1;
        if moved || self.queued == 0 {
            self.stalled_for = 0;
        } else {
            self.stalled_for += 1;
            let waiting = self.routers.iter().flat_map(|r| r.inq.iter()).any(|q| q.front().is_some_and(|f| f.ready_at <= now));
            if waiting && self.stalled_for >= self.spec.watchdog_cycles {
                return Err(Error::Deadlock {
                    cycle: self.now,
                    in_flight: self.queued,
                });
            }
        }
        Ok(())
    }

    /// Skip ahead to the next release when nothing is queued.
    fn fast_forward(&mut self) {
        if self.queued == 0 && self.pending > 0 {
            let next = self
                .routers
                .iter()
                .filter_map(|r| r.pending.keys().next().map(|k| k.0))
                .min()
                .expect("pending flits");
            self.now = self.now.max(next);
        }
    }

    /// Step until nothing is queued or pending. Returns the final cycle.
    pub fn run_until_idle(&mut self) -> Result<u64> {
        while self.in_flight() > 0 {
            self.fast_forward();
            self.step()?;
        }
        Ok(self.now)
    }

    /// Step until the given flits have all left the network; returns the
    /// latest of their completion cycles.
    pub fn run_until_done(&mut self, ids: &[u64]) -> Result<u64> {
        let mut latest = 0;
        for &id in ids {
            loop {
                if let Some(c) = self.completion[id as usize] {
                    latest = latest.max(c);
                    break;
                }
                self.fast_forward();
                self.step()?;
            }
        }
        Ok(latest)
    }

    /// Move the clock forward (no-op if already past `cycle`).
    pub fn advance_to(&mut self, cycle: u64) -> Result<()> {
        while self.now < cycle {
            if self.in_flight() == 0 {
                self.now = cycle;
                break;
            }
            self.step()?;
        }
        Ok(())
    }

    /// Every injected flit left exactly once and none remain.
    pub fn check_conservation(&self) -> std::result::Result<(), String> {
        let s = self.stats;
        let left = s.ejected + s.absorbed;
        if s.injected != left + self.queued as u64 {
            return Err(format!("injected {} != delivered {} + queued {}", s.injected, left, self.queued));
        }
        let delivered = self.completion.iter().filter(|c| c.is_some()).count() as u64;
        if delivered != left {
            return Err(format!("{delivered} completions recorded for {left} deliveries"));
        }
        Ok(())
    }

    /// Dynamic energy so far, pJ.
    pub fn energy(&self) -> f64 {
        self.stats.hops as f64 * self.spec.flit_bits as f64 * self.spec.energy_per_bit_hop
            + self.stats.alu_ops as f64 * self.spec.alu_op_energy
    }
}
