//! Row-level instructions and their assembly syntax.
//!
//! One instruction per line: a mnemonic followed by comma-separated
//! operands. `#` and `;` start comments. Row addresses are `ROW` or
//! `ROW:ELEM` (element offset within the row, 2-byte elements). Masks select
//! routers, bit `bank * lanes + lane`. Trailing `key=value` operands are
//! extensions:
//!
//! ```text
//! NoC_Scalar   OP, SRC, DST, MASK [, wr] [, iter] [, init=ARG/OP/ROUNDS] [, alu=N]
//! NoC_Access   Rd|Wr, SRC, DST, MASK [, CONST] [, alu=N]
//! NoC_BCast    SRC, DST, MASK, SRC_BANK [, alu=N]
//! NoC_Reduce   OP, SRC, DST, MASK, DST_BANK [, alu=N]
//! NoC_Exchange T+|T-|R+|R-, SRC, DST, OFFSET, GROUP [, len=N]
//! SRAM_Write   ADDR, LENGTH
//! SRAM_Compute SRC, DST, LENGTH
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Bf16, BinOp};

/// Default element count of an Exchange (one full 1 KiB row).
pub const DEFAULT_EXCHANGE_LEN: u16 = 512;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RowAddr {
    pub row: u32,
    pub offset: u16,
}

impl RowAddr {
    pub const fn new(row: u32, offset: u16) -> Self {
        RowAddr { row, offset }
    }

    pub fn at(self, i: u16) -> RowAddr {
        RowAddr::new(self.row, self.offset + i)
    }
}

impl fmt::Display for RowAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.offset == 0 {
            write!(f, "{:#x}", self.row)
        } else {
            write!(f, "{:#x}:{}", self.row, self.offset)
        }
    }
}

/// Iteration registers loaded before a NoC_Scalar runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterInit {
    pub iter_arg: Bf16,
    pub iter_op: BinOp,
    pub rounds: u16,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScalarConfig {
    pub wr_reg: bool,
    pub iter_tag: bool,
    pub init: Option<IterInit>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AccessOp {
    Rd,
    Wr,
}

/// `R` exchanges elements inside a row, `T` exchanges rows across banks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExchangeKind {
    T,
    R,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowInstruction {
    Scalar {
        op: BinOp,
        src: RowAddr,
        dst: RowAddr,
        mask: u64,
        config: ScalarConfig,
        slot: u8,
    },
    Access {
        op: AccessOp,
        src: RowAddr,
        dst: RowAddr,
        mask: u64,
        constant: Option<Bf16>,
        slot: u8,
    },
    BCast {
        src: RowAddr,
        dst: RowAddr,
        mask: u64,
        src_bank: u8,
        slot: u8,
    },
    Reduce {
        op: BinOp,
        src: RowAddr,
        dst: RowAddr,
        mask: u64,
        dst_bank: u8,
        slot: u8,
    },
    Exchange {
        kind: ExchangeKind,
        negate: bool,
        src: RowAddr,
        dst: RowAddr,
        offset: u16,
        group: u16,
        len: u16,
    },
    SramWrite {
        addr: RowAddr,
        length: u32,
    },
    SramCompute {
        src: RowAddr,
        dst: RowAddr,
        length: u32,
    },
}

impl RowInstruction {
    pub fn mnemonic(&self) -> &'static str {
        match self {
            RowInstruction::Scalar { .. } => "NoC_Scalar",
            RowInstruction::Access { .. } => "NoC_Access",
            RowInstruction::BCast { .. } => "NoC_BCast",
            RowInstruction::Reduce { .. } => "NoC_Reduce",
            RowInstruction::Exchange { .. } => "NoC_Exchange",
            RowInstruction::SramWrite { .. } => "SRAM_Write",
            RowInstruction::SramCompute { .. } => "SRAM_Compute",
        }
    }

    pub fn is_noc(&self) -> bool {
        !matches!(self, RowInstruction::SramWrite { .. } | RowInstruction::SramCompute { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            RowInstruction::Exchange { offset, group, len, .. } => {
                if offset == 0 || group <= offset {
                    return Err(Error::Translate(format!("exchange needs group > offset >= 1, got offset {offset}, group {group}")));
                }
                if len == 0 {
                    return Err(Error::Translate("exchange length must be positive".into()));
                }
            }
            RowInstruction::Scalar { mask, .. }
            | RowInstruction::Access { mask, .. }
            | RowInstruction::BCast { mask, .. }
            | RowInstruction::Reduce { mask, .. } => {
                if mask == 0 {
                    return Err(Error::Translate(format!("{} with empty mask", self.mnemonic())));
                }
            }
            RowInstruction::SramWrite { length, .. } | RowInstruction::SramCompute { length, .. } => {
                if length == 0 {
                    return Err(Error::Translate(format!("{} with zero length", self.mnemonic())));
                }
            }
        }
        Ok(())
    }
}

fn fmt_slot(f: &mut fmt::Formatter<'_>, slot: u8) -> fmt::Result {
    if slot != 0 {
        write!(f, ", alu={slot}")?;
    }
    Ok(())
}

impl fmt::Display for RowInstruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ", self.mnemonic())?;
        match *self {
            RowInstruction::Scalar { op, src, dst, mask, config, slot } => {
                write!(f, "{}, {src}, {dst}, {mask:#x}", op.mnemonic())?;
                if config.wr_reg {
                    write!(f, ", wr")?;
                }
                if config.iter_tag {
                    write!(f, ", iter")?;
                }
                if let Some(i) = config.init {
                    write!(f, ", init={}/{}/{}", i.iter_arg.to_f32(), op_word(i.iter_op), i.rounds)?;
                }
                fmt_slot(f, slot)
            }
            RowInstruction::Access { op, src, dst, mask, constant, slot } => {
                write!(f, "{}, {src}, {dst}, {mask:#x}", if op == AccessOp::Rd { "Rd" } else { "Wr" })?;
                if let Some(c) = constant {
                    write!(f, ", {}", c.to_f32())?;
                }
                fmt_slot(f, slot)
            }
            RowInstruction::BCast { src, dst, mask, src_bank, slot } => {
                write!(f, "{src}, {dst}, {mask:#x}, {src_bank}")?;
                fmt_slot(f, slot)
            }
            RowInstruction::Reduce { op, src, dst, mask, dst_bank, slot } => {
                write!(f, "{}, {src}, {dst}, {mask:#x}, {dst_bank}", op.mnemonic())?;
                fmt_slot(f, slot)
            }
            RowInstruction::Exchange { kind, negate, src, dst, offset, group, len } => {
                let k = if kind == ExchangeKind::T { 'T' } else { 'R' };
                let s = if negate { '-' } else { '+' };
                write!(f, "{k}{s}, {src}, {dst}, {offset}, {group}")?;
                if len != DEFAULT_EXCHANGE_LEN {
                    write!(f, ", len={len}")?;
                }
                Ok(())
            }
            RowInstruction::SramWrite { addr, length } => write!(f, "{addr}, {length}"),
            RowInstruction::SramCompute { src, dst, length } => write!(f, "{src}, {dst}, {length}"),
        }
    }
}

fn op_word(op: BinOp) -> &'static str {
    match op {
        BinOp::Add => "add",
        BinOp::Sub => "sub",
        BinOp::Mul => "mul",
        BinOp::Div => "div",
    }
}

/// Render a program back to assembly text.
pub fn disassemble(prog: &[RowInstruction]) -> String {
    prog.iter().map(|i| format!("{i}\n")).collect()
}

struct Line<'a> {
    no: usize,
    positional: Vec<&'a str>,
    keyed: Vec<(&'a str, &'a str)>,
    flags: Vec<&'a str>,
}

impl<'a> Line<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Assembly {
            line: self.no,
            message: message.into(),
        }
    }

    fn expect_count(&self, mnemonic: &str, min: usize, max: usize) -> Result<()> {
        let n = self.positional.len();
        if n < min || n > max {
            let want = if min == max { format!("{min}") } else { format!("{min} to {max}") };
            return Err(self.err(format!("{mnemonic} takes {want} operands, got {n}")));
        }
        Ok(())
    }

    fn int(&self, s: &str, what: &str) -> Result<u128> {
        let t = s.replace('_', "");
        let parsed = if let Some(h) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
            u128::from_str_radix(h, 16)
        } else if let Some(b) = t.strip_prefix("0b") {
            u128::from_str_radix(b, 2)
        } else {
            t.parse::<u128>()
        };
        parsed.map_err(|_| self.err(format!("bad {what} `{s}`")))
    }

    fn bounded(&self, s: &str, what: &str, max: u128) -> Result<u128> {
        let v = self.int(s, what)?;
        if v > max {
            return Err(self.err(format!("{what} `{s}` exceeds {max}")));
        }
        Ok(v)
    }

    fn addr(&self, s: &str) -> Result<RowAddr> {
        let (row, off) = match s.split_once(':') {
            Some((r, o)) => (r, Some(o)),
            None => (s, None),
        };
        let row = self.bounded(row, "row address", u32::MAX as u128)? as u32;
        let offset = match off {
            Some(o) => self.bounded(o, "element offset", u16::MAX as u128)? as u16,
            None => 0,
        };
        Ok(RowAddr::new(row, offset))
    }

    fn mask(&self, s: &str) -> Result<u64> {
        let v = self.int(s, "mask").map_err(|_| self.err(format!("mask literal `{s}` is not a 64-bit integer")))?;
        u64::try_from(v).map_err(|_| self.err(format!("mask literal `{s}` is wider than 64 bits")))
    }

    fn op(&self, s: &str) -> Result<BinOp> {
        BinOp::parse(s).ok_or_else(|| self.err(format!("unknown operator `{s}`")))
    }

    fn float(&self, s: &str) -> Result<Bf16> {
        s.parse::<f32>().map(Bf16::from_f32).map_err(|_| self.err(format!("bad constant `{s}`")))
    }

    fn slot(&self) -> Result<u8> {
        self.key("alu").map(|v| self.bounded(v, "alu slot", 1).map(|v| v as u8)).unwrap_or(Ok(0))
    }

    fn key(&self, k: &str) -> Option<&'a str> {
        self.keyed.iter().find(|(key, _)| *key == k).map(|(_, v)| *v)
    }

    fn allow(&self, keys: &[&str], flags: &[&str]) -> Result<()> {
        if let Some((k, _)) = self.keyed.iter().find(|(k, _)| !keys.contains(k)) {
            return Err(self.err(format!("unexpected operand `{k}=`")));
        }
        if let Some(fl) = self.flags.iter().find(|fl| !flags.contains(fl)) {
            return Err(self.err(format!("unexpected operand `{fl}`")));
        }
        Ok(())
    }

    fn init(&self, s: &str) -> Result<IterInit> {
        let parts: Vec<&str> = s.split('/').collect();
        if parts.len() != 3 {
            return Err(self.err(format!("init takes ARG/OP/ROUNDS, got `{s}`")));
        }
        Ok(IterInit {
            iter_arg: self.float(parts[0])?,
            iter_op: self.op(parts[1])?,
            rounds: self.bounded(parts[2], "iteration rounds", u16::MAX as u128)? as u16,
        })
    }
}

fn parse_line(no: usize, text: &str) -> Result<Option<RowInstruction>> {
    let code = text.split(['#', ';']).next().unwrap_or("").trim();
    if code.is_empty() {
        return Ok(None);
    }
    let (mnemonic, rest) = match code.split_once(char::is_whitespace) {
        Some((m, r)) => (m, r.trim()),
        None => (code, ""),
    };
    let mut line = Line {
        no,
        positional: Vec::new(),
        keyed: Vec::new(),
        flags: Vec::new(),
    };
    if !rest.is_empty() {
        for tok in rest.split(',').map(str::trim) {
            if let Some((k, v)) = tok.split_once('=') {
                if !k.is_empty() && k.chars().all(|c| c.is_ascii_alphabetic()) {
                    line.keyed.push((k, v.trim()));
                    continue;
                }
            }
            if tok == "wr" || tok == "iter" {
                line.flags.push(tok);
            } else if !line.keyed.is_empty() || !line.flags.is_empty() {
                return Err(line.err(format!("positional operand `{tok}` after extension operands")));
            } else {
                line.positional.push(tok);
            }
        }
    }
    let p = line.positional.clone();
    let insn = match mnemonic.to_ascii_lowercase().as_str() {
        "noc_scalar" => {
            line.expect_count("NoC_Scalar", 4, 4)?;
            line.allow(&["alu", "init"], &["wr", "iter"])?;
            RowInstruction::Scalar {
                op: line.op(p[0])?,
                src: line.addr(p[1])?,
                dst: line.addr(p[2])?,
                mask: line.mask(p[3])?,
                config: ScalarConfig {
                    wr_reg: line.flags.contains(&"wr"),
                    iter_tag: line.flags.contains(&"iter"),
                    init: line.key("init").map(|s| line.init(s)).transpose()?,
                },
                slot: line.slot()?,
            }
        }
        "noc_access" => {
            line.expect_count("NoC_Access", 4, 5)?;
            line.allow(&["alu"], &[])?;
            let op = match p[0].to_ascii_lowercase().as_str() {
                "rd" => AccessOp::Rd,
                "wr" => AccessOp::Wr,
                _ => return Err(line.err(format!("NoC_Access operation must be Rd or Wr, got `{}`", p[0]))),
            };
            RowInstruction::Access {
                op,
                src: line.addr(p[1])?,
                dst: line.addr(p[2])?,
                mask: line.mask(p[3])?,
                constant: p.get(4).map(|s| line.float(s)).transpose()?,
                slot: line.slot()?,
            }
        }
        "noc_bcast" => {
            line.expect_count("NoC_BCast", 4, 4)?;
            line.allow(&["alu"], &[])?;
            RowInstruction::BCast {
                src: line.addr(p[0])?,
                dst: line.addr(p[1])?,
                mask: line.mask(p[2])?,
                src_bank: line.bounded(p[3], "bank", 15)? as u8,
                slot: line.slot()?,
            }
        }
        "noc_reduce" => {
            line.expect_count("NoC_Reduce", 5, 5)?;
            line.allow(&["alu"], &[])?;
            RowInstruction::Reduce {
                op: line.op(p[0])?,
                src: line.addr(p[1])?,
                dst: line.addr(p[2])?,
                mask: line.mask(p[3])?,
                dst_bank: line.bounded(p[4], "bank", 15)? as u8,
                slot: line.slot()?,
            }
        }
        "noc_exchange" => {
            line.expect_count("NoC_Exchange", 5, 5)?;
            line.allow(&["len"], &[])?;
            let (kind, negate) = match p[0] {
                "T+" => (ExchangeKind::T, false),
                "T-" => (ExchangeKind::T, true),
                "R+" => (ExchangeKind::R, false),
                "R-" => (ExchangeKind::R, true),
                other => return Err(line.err(format!("exchange mode must be T+, T-, R+ or R-, got `{other}`"))),
            };
            RowInstruction::Exchange {
                kind,
                negate,
                src: line.addr(p[1])?,
                dst: line.addr(p[2])?,
                offset: line.bounded(p[3], "offset", u16::MAX as u128)? as u16,
                group: line.bounded(p[4], "group", u16::MAX as u128)? as u16,
                len: match line.key("len") {
                    Some(v) => line.bounded(v, "length", u16::MAX as u128)? as u16,
                    None => DEFAULT_EXCHANGE_LEN,
                },
            }
        }
        "sram_write" => {
            line.expect_count("SRAM_Write", 2, 2)?;
            line.allow(&[], &[])?;
            RowInstruction::SramWrite {
                addr: line.addr(p[0])?,
                length: line.bounded(p[1], "length", u32::MAX as u128)? as u32,
            }
        }
        "sram_compute" => {
            line.expect_count("SRAM_Compute", 3, 3)?;
            line.allow(&[], &[])?;
            RowInstruction::SramCompute {
                src: line.addr(p[0])?,
                dst: line.addr(p[1])?,
                length: line.bounded(p[2], "length", u32::MAX as u128)? as u32,
            }
        }
        _ => return Err(line.err(format!("unknown mnemonic `{mnemonic}`"))),
    };
    insn.validate().map_err(|e| line.err(e.to_string()))?;
    Ok(Some(insn))
}

/// Parse assembly text into instructions. Line numbers in errors are 1-based.
pub fn assemble(text: &str) -> Result<Vec<RowInstruction>> {
    let mut out = Vec::new();
    for (i, l) in text.lines().enumerate() {
        if let Some(insn) = parse_line(i + 1, l)? {
            out.push(insn);
        }
    }
    Ok(out)
}

/// `(bank, lanes)` pairs selected by `mask`, banks ascending, lanes ascending.
pub fn mask_banks(mask: u64, lanes: usize) -> Vec<(usize, Vec<usize>)> {
    let mut out: Vec<(usize, Vec<usize>)> = Vec::new();
    for bit in 0..64 {
        if mask >> bit & 1 == 1 {
            let (bank, lane) = (bit / lanes, bit % lanes);
            match out.last_mut() {
                Some((b, ls)) if *b == bank => ls.push(lane),
                _ => out.push((bank, vec![lane])),
            }
        }
    }
    out
}

/// Mask selecting `lanes` in every bank of `banks`.
pub fn mask_of(banks: impl IntoIterator<Item = usize>, lanes: &[usize], lanes_per_bank: usize) -> u64 {
    let mut m = 0u64;
    for b in banks {
        for &l in lanes {
            m |= 1u64 << (b * lanes_per_bank + l);
        }
    }
    m
}
