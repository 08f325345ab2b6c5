//! Non-linear kernels written in the row ISA: exponential, square root,
//! softmax, RMSNorm, SiLU and the RoPE rearrangement.
//!
//! Kernels run on one channel. Vectors are spread across banks with element
//! `i` in bank `i % banks` at position `i / banks`. Row numbers used by each
//! kernel are listed in [`rows`].
//!
//! The row ISA has no integer operations, so the Newton square-root seed is
//! produced by the bank controller between program segments (`.seed` lines in
//! kernel text).

pub mod reference;

use std::fmt::Write as _;

use crate::config::HardwareConfig;
use crate::error::{Error, Result};
use crate::isa::exec::{BankMemory, Machine};
use crate::isa::fuse::fuse_paths;
use crate::isa::row::{assemble, mask_of, AccessOp, ExchangeKind, IterInit, RowAddr, RowInstruction, ScalarConfig};
use crate::isa::translate::{translate, translate_fused, ElemAddr};
use crate::noc::mesh::FlitEvent;
use crate::noc::MeshStats;
use crate::numerics::{Bf16, BinOp};

/// Taylor order of the exponential.
pub const EXP_ORDER: u16 = 6;
/// Newton iterations of the square root.
pub const SQRT_ITERATIONS: usize = 4;
/// Cycles the controller spends on a seed step, plus one per element.
pub const SEED_STEP_CYCLES: u64 = 2;

pub mod rows {
    pub const IN: u32 = 0x10;
    pub const OUT: u32 = 0x11;
    pub const ONES: u32 = 0x12;
    pub const T1: u32 = 0x13;
    pub const T2: u32 = 0x14;
    pub const T3: u32 = 0x15;
    pub const SHIFTED: u32 = 0x16;
    pub const EXP: u32 = 0x17;
    pub const ACC: u32 = 0x18;
    pub const PART: u32 = 0x19;
    pub const PSUM: u32 = 0x1A;
    pub const TOTAL: u32 = 0x1B;
    pub const SCALE: u32 = 0x1C;
    pub const SEED: u32 = 0x1D;
    pub const MASK: u32 = 0x1E;
    pub const GAIN: u32 = 0x1F;
    pub const NORM: u32 = 0x20;
    pub const NEG: u32 = 0x21;
    pub const DEN: u32 = 0x22;
    pub const SQ: u32 = 0x23;
    pub const MEAN: u32 = 0x24;
    pub const ROOT: u32 = 0x25;
    pub const COS: u32 = 0x26;
    pub const SIN: u32 = 0x27;
    pub const ROT: u32 = 0x28;
}

/// Controller step that writes the Newton seed and the zero mask of `len`
/// elements in every bank of `banks`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStep {
    pub src: RowAddr,
    pub seed: RowAddr,
    pub mask: RowAddr,
    pub len: u16,
    pub banks: u16,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Segment {
    Code(Vec<RowInstruction>),
    Seed(SeedStep),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub name: String,
    pub segments: Vec<Segment>,
}

impl Kernel {
    /// Row instructions of every code segment, in order.
    pub fn instructions(&self) -> impl Iterator<Item = &RowInstruction> {
        self.segments.iter().flat_map(|s| match s {
            Segment::Code(c) => c.as_slice(),
            Segment::Seed(_) => &[],
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# {}\n", self.name);
        for s in &self.segments {
            match s {
                Segment::Code(code) => {
                    for i in code {
                        let _ = writeln!(out, "{i}");
                    }
                }
                Segment::Seed(st) => {
                    let _ = writeln!(out, ".seed {}, {}, {}, {}, {:#06x}", st.src, st.seed, st.mask, st.len, st.banks);
                }
            }
        }
        out
    }

    /// Parse kernel text: assembly lines plus `.seed` directives. The name
    /// comes from a leading `# name` comment.
    pub fn parse(text: &str) -> Result<Kernel> {
        let name = text
            .lines()
            .next()
            .and_then(|l| l.strip_prefix('#'))
            .map(|s| s.trim().to_string())
            .unwrap_or_default();
        let mut segments = Vec::new();
        let mut chunk = String::new();
        let mut chunk_start = 1;
        for (no, line) in text.lines().enumerate() {
            let Some(rest) = line.trim().strip_prefix(".seed") else {
                chunk.push_str(line);
                chunk.push('\n');
                continue;
            };
            flush_chunk(&mut segments, &chunk, chunk_start)?;
            chunk.clear();
            chunk_start = no + 2;
            segments.push(Segment::Seed(parse_seed(rest, no + 1)?));
        }
        flush_chunk(&mut segments, &chunk, chunk_start)?;
        Ok(Kernel { name, segments })
    }
}

fn flush_chunk(segments: &mut Vec<Segment>, chunk: &str, first_line: usize) -> Result<()> {
    let code = assemble(chunk).map_err(|e| match e {
        Error::Assembly { line, message } => Error::Assembly {
            line: line + first_line - 1,
            message,
        },
        other => other,
    })?;
    if !code.is_empty() {
        segments.push(Segment::Code(code));
    }
    Ok(())
}

fn parse_seed(rest: &str, line: usize) -> Result<SeedStep> {
    let err = |m: &str| Error::Assembly {
        line,
        message: m.to_string(),
    };
    let parts: Vec<&str> = rest.split(',').map(str::trim).collect();
    if parts.len() != 5 {
        return Err(err(".seed takes SRC, SEED, MASK, LEN, BANKS"));
    }
    let int = |s: &str| -> Result<u64> {
        let r = match s.strip_prefix("0x") {
            Some(h) => u64::from_str_radix(h, 16),
            None => s.parse(),
        };
        r.map_err(|_| err(&format!("bad number `{s}`")))
    };
    let addr = |s: &str| -> Result<RowAddr> {
        let (r, o) = s.split_once(':').unwrap_or((s, "0"));
        Ok(RowAddr::new(int(r)? as u32, int(o)? as u16))
    };
    Ok(SeedStep {
        src: addr(parts[0])?,
        seed: addr(parts[1])?,
        mask: addr(parts[2])?,
        len: int(parts[3])? as u16,
        banks: int(parts[4])? as u16,
    })
}

/// Seed and zero mask the controller writes for `x`: the exponent-halving
/// bit trick, seed 1 with mask 0 for zero, and NaN for negative or NaN input.
pub fn newton_seed(x: Bf16) -> (Bf16, Bf16) {
    if x.is_nan() || x.to_f32() < 0.0 {
        return (Bf16::NAN, Bf16::ONE);
    }
    if x.is_zero() {
        return (Bf16::ONE, Bf16::ZERO);
    }
    if x.is_infinite() {
        return (Bf16::INFINITY, Bf16::ONE);
    }
    let bits = x.to_bits() as i32;
    let seed = ((bits - 0x3F80) >> 1) + 0x3F80;
    (Bf16::from_bits(seed as u16), Bf16::ONE)
}

/// Outcome of running a kernel on one channel.
#[derive(Clone, Debug)]
pub struct KernelRun {
    pub mem: BankMemory,
    pub cycles: u64,
    pub packets: usize,
    pub stats: MeshStats,
    pub energy_pj: f64,
    /// Intermediate elements fusion did not write.
    pub elided: Vec<ElemAddr>,
    /// Per-flit events, empty unless traced.
    pub trace: Vec<FlitEvent>,
}

fn apply_seed(mem: &mut BankMemory, st: &SeedStep) {
    for b in (0..16).filter(|b| st.banks >> b & 1 == 1) {
        for i in 0..st.len {
            let (seed, mask) = newton_seed(mem.get(ElemAddr::new(b, st.src.at(i), 0)));
            mem.set(ElemAddr::new(b, st.seed.at(i), 0), seed);
            mem.set(ElemAddr::new(b, st.mask.at(i), 0), mask);
        }
    }
}

/// Translate and execute every segment on one channel, fused or not.
pub fn run_kernel(kernel: &Kernel, hw: &HardwareConfig, mem: BankMemory, fuse: bool) -> Result<KernelRun> {
    run_kernel_with(kernel, hw, mem, fuse, false)
}

/// [`run_kernel`] recording every flit event.
pub fn run_kernel_traced(kernel: &Kernel, hw: &HardwareConfig, mem: BankMemory, fuse: bool) -> Result<KernelRun> {
    run_kernel_with(kernel, hw, mem, fuse, true)
}

fn run_kernel_with(kernel: &Kernel, hw: &HardwareConfig, mem: BankMemory, fuse: bool, trace: bool) -> Result<KernelRun> {
    let mut m = Machine::with_memory(hw, mem);
    if trace {
        m.mesh.enable_trace();
    }
    let mut packets = 0;
    let mut elided = Vec::new();
    for seg in &kernel.segments {
        match seg {
            Segment::Code(code) => {
                let t = if fuse {
                    let f = fuse_paths(code, hw.noc.mesh_x as usize, hw.noc.mesh_y as usize, hw.dram.row_width / 2);
                    translate_fused(code, &f, hw)?
                } else {
                    translate(code, hw)?
                };
                m.execute(&t)?;
                packets += t.packet_count();
                elided.extend_from_slice(&t.elided);
            }
            Segment::Seed(st) => {
                apply_seed(&mut m.mem, st);
                let now = m.mesh.now();
                m.mesh.advance_to(now + SEED_STEP_CYCLES + st.len as u64)?;
            }
        }
    }
    Ok(KernelRun {
        cycles: m.mesh.now(),
        packets,
        stats: m.mesh.stats(),
        energy_pj: m.mesh.energy(),
        trace: m.mesh.trace().to_vec(),
        mem: m.mem,
        elided,
    })
}

/// Run a kernel instruction by instruction on the reference interpreter.
pub fn reference_kernel(kernel: &Kernel, hw: &HardwareConfig, mem: BankMemory) -> Result<BankMemory> {
    let mut r = crate::isa::exec::Reference::new(hw, mem);
    for seg in &kernel.segments {
        match seg {
            Segment::Code(code) => r.run(code)?,
            Segment::Seed(st) => apply_seed(&mut r.mem, st),
        }
    }
    Ok(r.mem)
}

/// Store `values` spread across the first `banks` banks.
pub fn scatter(mem: &mut BankMemory, row: u32, banks: usize, values: &[Bf16]) {
    for (i, &v) in values.iter().enumerate() {
        mem.set(ElemAddr::new(i % banks, RowAddr::new(row, (i / banks) as u16), 0), v);
    }
}

/// Inverse of [`scatter`].
pub fn gather(mem: &BankMemory, row: u32, banks: usize, n: usize) -> Vec<Bf16> {
    (0..n).map(|i| mem.get(ElemAddr::new(i % banks, RowAddr::new(row, (i / banks) as u16), 0))).collect()
}

/// Elements per bank when `n` are spread over `banks`.
pub fn per_bank(n: usize, banks: usize) -> usize {
    n.div_ceil(banks)
}

fn bf(v: f32) -> Bf16 {
    Bf16::from_f32(v)
}

fn addr(row: u32, e: usize) -> RowAddr {
    RowAddr::new(row, e as u16)
}

/// Emits row instructions for a set of banks.
struct Builder {
    lanes: usize,
    banks: Vec<usize>,
    segments: Vec<Segment>,
    code: Vec<RowInstruction>,
}

impl Builder {
    fn new(hw: &HardwareConfig, banks: usize) -> Result<Self> {
        let lanes = hw.noc.mesh_x as usize;
        if lanes < 4 || banks == 0 || banks > hw.noc.mesh_y as usize || hw.noc.alus_per_router < 2 {
            return Err(Error::Kernel(format!(
                "kernels need at least 4 lanes, 2 ALUs per router and 1..={} banks, got {lanes} lanes and {banks} banks",
                hw.noc.mesh_y
            )));
        }
        Ok(Builder {
            lanes,
            banks: (0..banks).collect(),
            segments: Vec::new(),
            code: Vec::new(),
        })
    }

    fn mask(&self, lanes: &[usize]) -> u64 {
        mask_of(self.banks.iter().copied(), lanes, self.lanes)
    }

    fn mask_in(&self, bank: usize, lanes: &[usize]) -> u64 {
        mask_of([bank], lanes, self.lanes)
    }

    fn bank_bits(&self) -> u16 {
        self.banks.iter().fold(0, |m, &b| m | 1 << b)
    }

    #[allow(clippy::too_many_arguments)]
    fn scalar(&mut self, op: BinOp, src: RowAddr, dst: RowAddr, mask: u64, slot: u8, wr: bool, iter: bool, init: Option<IterInit>) {
        self.code.push(RowInstruction::Scalar {
            op,
            src,
            dst,
            mask,
            config: ScalarConfig {
                wr_reg: wr,
                iter_tag: iter,
                init,
            },
            slot,
        });
    }

    fn op(&mut self, op: BinOp, src: RowAddr, dst: RowAddr, mask: u64, slot: u8) {
        self.scalar(op, src, dst, mask, slot, false, false, None);
    }

    fn load(&mut self, src: RowAddr, mask: u64, slot: u8) {
        self.code.push(RowInstruction::Access {
            op: AccessOp::Wr,
            src,
            dst: RowAddr::default(),
            mask,
            constant: None,
            slot,
        });
    }

    fn load_const(&mut self, c: Bf16, mask: u64, slot: u8) {
        self.code.push(RowInstruction::Access {
            op: AccessOp::Wr,
            src: RowAddr::default(),
            dst: RowAddr::default(),
            mask,
            constant: Some(c),
            slot,
        });
    }

    fn store(&mut self, dst: RowAddr, mask: u64, slot: u8) {
        self.code.push(RowInstruction::Access {
            op: AccessOp::Rd,
            src: RowAddr::default(),
            dst,
            mask,
            constant: None,
            slot,
        });
    }

    fn seed(&mut self, st: SeedStep) {
        let code = std::mem::take(&mut self.code);
        if !code.is_empty() {
            self.segments.push(Segment::Code(code));
        }
        self.segments.push(Segment::Seed(st));
    }

    fn finish(mut self, name: String) -> Kernel {
        let code = std::mem::take(&mut self.code);
        if !code.is_empty() {
            self.segments.push(Segment::Code(code));
        }
        Kernel { name, segments: self.segments }
    }

    /// Vector op over `n` elements, four lanes at a time: each lane's ArgReg
    /// in `slot` is used as the right operand.
    fn vector_op(&mut self, op: BinOp, src: u32, dst: u32, n: usize, slot: u8) {
        for g in (0..n).step_by(self.lanes) {
            let width = self.lanes.min(n - g);
            let lanes: Vec<usize> = (0..width).collect();
            self.op(op, addr(src, g), addr(dst, g), self.mask(&lanes), slot);
        }
    }

    /// Fill every lane's ArgReg in `slot` with the element at `src` of its
    /// own bank.
    fn splat(&mut self, src: RowAddr, slot: u8) {
        for l in 0..self.lanes {
            self.load(src, self.mask(&[l]), slot);
        }
    }

    /// Sum `n` elements of `src` per bank into element 0 of `dst`. Lanes
    /// accumulate in `slot`, then lane 0 folds the partials.
    fn bank_sum(&mut self, src: u32, dst: u32, n: usize, slot: u8) {
        let width = self.lanes.min(n);
        let lanes: Vec<usize> = (0..width).collect();
        self.load_const(Bf16::ZERO, self.mask(&lanes), slot);
        for g in (0..n).step_by(self.lanes) {
            let w = self.lanes.min(n - g);
            let ls: Vec<usize> = (0..w).collect();
            self.scalar(BinOp::Add, addr(src, g), addr(rows::ACC, g), self.mask(&ls), slot, true, false, None);
        }
        if width > 1 {
            let rest: Vec<usize> = (1..width).collect();
            self.store(addr(rows::PART, 1), self.mask(&rest), slot);
            for p in 1..width {
                self.scalar(BinOp::Add, addr(rows::PART, p), addr(rows::ACC, 0), self.mask(&[0]), slot, true, false, None);
            }
        }
        self.store(addr(dst, 0), self.mask(&[0]), slot);
    }

    /// Degree-6 Taylor exponential of `n` elements per bank, two interleaved
    /// flows. Flow `f` uses lanes `f`, `f+1`, `f+2` in ALU slot `f`: the
    /// first holds `x`, the second divides by a counter that steps down from
    /// 6, the third adds 1.
    fn exp(&mut self, src: u32, dst: u32, n: usize) {
        for f in 0..2u8 {
            let c = f as usize + 2;
            self.load_const(Bf16::ONE, self.mask(&[c]), f);
        }
        self.store(addr(rows::ONES, 0), self.mask(&[2]), 0);
        for pass in (0..n).step_by(2) {
            let flows: Vec<usize> = (0..2).filter(|f| pass + f < n).collect();
            for &f in &flows {
                self.load(addr(src, pass + f), self.mask(&[f]), f as u8);
            }
            for &f in &flows {
                self.load_const(bf(EXP_ORDER as f32), self.mask(&[f + 1]), f as u8);
            }
            let temps = [rows::T1, rows::T2, rows::T3];
            for r in 0..EXP_ORDER as usize {
                for k in 0..3 {
                    for &f in &flows {
                        let e = pass + f;
                        let from = if r == 0 && k == 0 {
                            addr(rows::ONES, 0)
                        } else {
                            addr(temps[(k + 2) % 3], e)
                        };
                        let last = r + 1 == EXP_ORDER as usize && k == 2;
                        let to = if last { addr(dst, e) } else { addr(temps[k], e) };
                        let mask = self.mask(&[f + k]);
                        match k {
                            0 => self.op(BinOp::Mul, from, to, mask, f as u8),
                            1 => {
                                let init = (r == 0).then_some(IterInit {
                                    iter_arg: Bf16::ONE,
                                    iter_op: BinOp::Sub,
                                    rounds: EXP_ORDER,
                                });
                                self.scalar(BinOp::Div, from, to, mask, f as u8, false, true, init);
                            }
                            _ => self.op(BinOp::Add, from, to, mask, f as u8),
                        }
                    }
                }
            }
        }
    }

    /// Newton square root of `n` elements per bank whose seeds are in
    /// `SEED` and zero masks in `MASK`. Flow `f` divides at lane `f`, adds at
    /// lane `f+1` and halves at lane `f+2`, in slot `f`.
    fn sqrt(&mut self, src: u32, dst: u32, n: usize, banks: u16) {
        self.seed(SeedStep {
            src: addr(src, 0),
            seed: addr(rows::SEED, 0),
            mask: addr(rows::MASK, 0),
            len: n as u16,
            banks,
        });
        for f in 0..2u8 {
            self.load_const(bf(0.5), self.mask(&[f as usize + 2]), f);
        }
        for pass in (0..n).step_by(2) {
            let flows: Vec<usize> = (0..2).filter(|f| pass + f < n).collect();
            for _ in 0..SQRT_ITERATIONS {
                for &f in &flows {
                    let y = addr(rows::SEED, pass + f);
                    self.load(y, self.mask(&[f]), f as u8);
                    self.load(y, self.mask(&[f + 1]), f as u8);
                }
                for k in 0..3 {
                    for &f in &flows {
                        let e = pass + f;
                        let mask = self.mask(&[f + k]);
                        match k {
                            0 => self.op(BinOp::Div, addr(src, e), addr(rows::T1, e), mask, f as u8),
                            1 => self.op(BinOp::Add, addr(rows::T1, e), addr(rows::T2, e), mask, f as u8),
                            _ => self.op(BinOp::Mul, addr(rows::T2, e), addr(rows::SEED, e), mask, f as u8),
                        }
                    }
                }
            }
            for &f in &flows {
                self.load(addr(rows::MASK, pass + f), self.mask(&[f]), f as u8);
            }
            for &f in &flows {
                let e = pass + f;
                self.op(BinOp::Mul, addr(rows::SEED, e), addr(dst, e), self.mask(&[f]), f as u8);
            }
        }
    }
}

/// `exp(x)` of `n` elements in `IN`, results in `OUT`.
pub fn exp_kernel(hw: &HardwareConfig, n: usize, banks: usize) -> Result<Kernel> {
    let mut b = Builder::new(hw, banks)?;
    b.exp(rows::IN, rows::OUT, per_bank(n, banks));
    Ok(b.finish(format!("exp n={n} banks={banks}")))
}

/// `sqrt(x)` of `n` elements in `IN`, results in `OUT`.
pub fn sqrt_kernel(hw: &HardwareConfig, n: usize, banks: usize) -> Result<Kernel> {
    let mut b = Builder::new(hw, banks)?;
    let bits = b.bank_bits();
    b.sqrt(rows::IN, rows::OUT, per_bank(n, banks), bits);
    Ok(b.finish(format!("sqrt n={n} banks={banks}")))
}

/// Softmax of `n` scores in `IN` into `OUT`. `shift` is subtracted before
/// the exponential; the caller passes the maximum score.
pub fn softmax_kernel(hw: &HardwareConfig, n: usize, banks: usize, shift: Bf16) -> Result<Kernel> {
    let mut b = Builder::new(hw, banks)?;
    let m = per_bank(n, banks);
    let all: Vec<usize> = (0..b.lanes).collect();
    b.load_const(shift, b.mask(&all), 1);
    b.vector_op(BinOp::Sub, rows::IN, rows::SHIFTED, m, 1);
    b.exp(rows::SHIFTED, rows::EXP, m);
    b.bank_sum(rows::EXP, rows::PSUM, m, 1);
    if banks > 1 {
        let lane0 = b.mask(&[0]);
        b.code.push(RowInstruction::Reduce {
            op: BinOp::Add,
            src: addr(rows::PSUM, 0),
            dst: addr(rows::TOTAL, 0),
            mask: lane0,
            dst_bank: 0,
            slot: 1,
        });
        b.code.push(RowInstruction::BCast {
            src: addr(rows::TOTAL, 0),
            dst: addr(rows::SCALE, 0),
            mask: lane0,
            src_bank: 0,
            slot: 1,
        });
    } else {
        b.load(addr(rows::PSUM, 0), b.mask(&[0]), 1);
        b.store(addr(rows::SCALE, 0), b.mask(&[0]), 1);
    }
    b.splat(addr(rows::SCALE, 0), 1);
    b.vector_op(BinOp::Div, rows::EXP, rows::OUT, m, 1);
    Ok(b.finish(format!("softmax n={n} banks={banks} shift={}", shift.to_f32())))
}

/// RMSNorm of `n` elements in `IN` with gains in `GAIN`, into `OUT`.
pub fn rmsnorm_kernel(hw: &HardwareConfig, n: usize, banks: usize, eps: f32) -> Result<Kernel> {
    let mut b = Builder::new(hw, banks)?;
    let m = per_bank(n, banks);
    let lanes = b.lanes;
    for g in (0..m).step_by(lanes) {
        let w = lanes.min(m - g);
        let ls: Vec<usize> = (0..w).collect();
        let mask = b.mask(&ls);
        b.load(addr(rows::IN, g), mask, 0);
        b.op(BinOp::Mul, addr(rows::IN, g), addr(rows::SQ, g), mask, 0);
    }
    b.bank_sum(rows::SQ, rows::PSUM, m, 1);
    let root = if banks > 1 {
        b.code.push(RowInstruction::Reduce {
            op: BinOp::Add,
            src: addr(rows::PSUM, 0),
            dst: addr(rows::TOTAL, 0),
            mask: b.mask(&[0]),
            dst_bank: 0,
            slot: 1,
        });
        rows::TOTAL
    } else {
        rows::PSUM
    };
    let r0 = b.mask_in(0, &[0]);
    let r1 = b.mask_in(0, &[1]);
    b.load_const(bf(1.0 / n as f32), r0, 0);
    b.load_const(bf(eps), r1, 0);
    b.op(BinOp::Mul, addr(root, 0), addr(rows::MEAN, 1), r0, 0);
    b.op(BinOp::Add, addr(rows::MEAN, 1), addr(rows::MEAN, 0), r1, 0);
    let saved = std::mem::replace(&mut b.banks, vec![0]);
    b.sqrt(rows::MEAN, rows::ROOT, 1, 1);
    b.banks = saved;
    if banks > 1 {
        b.code.push(RowInstruction::BCast {
            src: addr(rows::ROOT, 0),
            dst: addr(rows::SCALE, 0),
            mask: b.mask(&[0]),
            src_bank: 0,
            slot: 1,
        });
    } else {
        b.load(addr(rows::ROOT, 0), b.mask(&[0]), 1);
        b.store(addr(rows::SCALE, 0), b.mask(&[0]), 1);
    }
    b.splat(addr(rows::SCALE, 0), 0);
    b.vector_op(BinOp::Div, rows::IN, rows::NORM, m, 0);
    for g in (0..m).step_by(lanes) {
        let w = lanes.min(m - g);
        let ls: Vec<usize> = (0..w).collect();
        let mask = b.mask(&ls);
        b.load(addr(rows::GAIN, g), mask, 1);
        b.op(BinOp::Mul, addr(rows::NORM, g), addr(rows::OUT, g), mask, 1);
    }
    Ok(b.finish(format!("rmsnorm n={n} banks={banks} eps={eps}")))
}

/// SiLU `x / (1 + exp(-x))` of `n` elements in `IN`, into `OUT`.
pub fn silu_kernel(hw: &HardwareConfig, n: usize, banks: usize) -> Result<Kernel> {
    let mut b = Builder::new(hw, banks)?;
    let m = per_bank(n, banks);
    let all: Vec<usize> = (0..b.lanes).collect();
    b.load_const(Bf16::NEG_ONE, b.mask(&all), 1);
    b.vector_op(BinOp::Mul, rows::IN, rows::NEG, m, 1);
    b.exp(rows::NEG, rows::EXP, m);
    b.load_const(Bf16::ONE, b.mask(&all), 1);
    b.vector_op(BinOp::Add, rows::EXP, rows::DEN, m, 1);
    for g in (0..m).step_by(b.lanes) {
        let w = b.lanes.min(m - g);
        let ls: Vec<usize> = (0..w).collect();
        let mask = b.mask(&ls);
        b.load(addr(rows::DEN, g), mask, 1);
        b.op(BinOp::Div, addr(rows::IN, g), addr(rows::OUT, g), mask, 1);
    }
    Ok(b.finish(format!("silu n={n} banks={banks}")))
}

/// Pairwise rotation `(x0, x1) -> (-x1, x0)` of a `head_dim` vector held in
/// `IN` of every bank, into `ROT`.
pub fn rope_rearrange(hw: &HardwareConfig, head_dim: usize) -> Result<Kernel> {
    if head_dim == 0 || head_dim % 2 != 0 || head_dim > hw.dram.row_width as usize / 2 {
        return Err(Error::Kernel(format!("head_dim {head_dim} must be even and fit one row")));
    }
    let code = vec![RowInstruction::Exchange {
        kind: ExchangeKind::R,
        negate: true,
        src: addr(rows::IN, 0),
        dst: addr(rows::ROT, 0),
        offset: 1,
        group: 2,
        len: head_dim as u16,
    }];
    Ok(Kernel {
        name: format!("rope head_dim={head_dim}"),
        segments: vec![Segment::Code(code)],
    })
}

/// Rotary angle table for one position: `(cos, sin)` per element, with the
/// pair `(2i, 2i+1)` sharing frequency `base^(-2i/head_dim)`.
pub fn rope_tables(head_dim: usize, pos: usize, base: f64) -> (Vec<Bf16>, Vec<Bf16>) {
    (0..head_dim)
        .map(|i| {
            let theta = pos as f64 * base.powf(-((i / 2 * 2) as f64) / head_dim as f64);
            (Bf16::from_f64(theta.cos()), Bf16::from_f64(theta.sin()))
        })
        .unzip()
}

/// Outcome of a full RoPE application in every bank.
#[derive(Clone, Debug)]
pub struct RopeRun {
    /// Rotated vector per bank.
    pub out: Vec<Vec<Bf16>>,
    /// Cycles of the NoC rearrangement.
    pub rearrange_cycles: u64,
    /// Cycles of the two element-wise multiplies and the add in the banks.
    pub ewmul_cycles: u64,
}

/// Apply RoPE to one `head_dim` vector per bank: NoC rearrangement, then
/// bank-side element-wise `x*cos + rot*sin`.
pub fn rope_apply(hw: &HardwareConfig, xs: &[Vec<Bf16>], cos: &[Bf16], sin: &[Bf16], fuse: bool) -> Result<RopeRun> {
    let head_dim = cos.len();
    let kernel = rope_rearrange(hw, head_dim)?;
    let mut mem = BankMemory::for_hw(hw);
    for (b, x) in xs.iter().enumerate() {
        mem.write(b, rows::IN, 0, x);
    }
    let run = run_kernel(&kernel, hw, mem, fuse)?;
    let out = xs
        .iter()
        .enumerate()
        .map(|(b, x)| {
            let rot = run.mem.read(b, rows::ROT, 0, head_dim);
            (0..head_dim).map(|i| x[i].mul(cos[i]).add(rot[i].mul(sin[i]))).collect()
        })
        .collect();
    let bytes = (head_dim * 2) as u64;
    let ewmul_cycles = 3 * crate::dram_pim::row_stream_cycles(&hw.dram, bytes, crate::dram_pim::mac_bytes_per_cycle(&hw.dram), false, true);
    Ok(RopeRun {
        out,
        rearrange_cycles: run.cycles,
        ewmul_cycles,
    })
}

/// Shipped kernel text, by file name.
pub fn shipped(name: &str) -> Option<&'static str> {
    Some(match name {
        "exp_32.s" => include_str!("../../kernels/exp_32.s"),
        "sqrt_32.s" => include_str!("../../kernels/sqrt_32.s"),
        "softmax_64.s" => include_str!("../../kernels/softmax_64.s"),
        "rmsnorm_64.s" => include_str!("../../kernels/rmsnorm_64.s"),
        "silu_64.s" => include_str!("../../kernels/silu_64.s"),
        "rope_128.s" => include_str!("../../kernels/rope_128.s"),
        _ => return None,
    })
}

pub const SHIPPED: [&str; 6] = ["exp_32.s", "sqrt_32.s", "softmax_64.s", "rmsnorm_64.s", "silu_64.s", "rope_128.s"];

/// Generator behind each shipped file, with the configuration it was
/// produced for.
pub fn generate_shipped(name: &str, hw: &HardwareConfig) -> Result<Kernel> {
    match name {
        "exp_32.s" => exp_kernel(hw, 32, 16),
        "sqrt_32.s" => sqrt_kernel(hw, 32, 16),
        "softmax_64.s" => softmax_kernel(hw, 64, 16, Bf16::ZERO),
        "rmsnorm_64.s" => rmsnorm_kernel(hw, 64, 16, 1e-5),
        "silu_64.s" => silu_kernel(hw, 64, 16),
        "rope_128.s" => rope_rearrange(hw, 128),
        other => Err(Error::Kernel(format!("no kernel named {other}"))),
    }
}
