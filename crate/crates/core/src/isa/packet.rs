//! 72-bit packet-level instruction.
//!
//! Field layout, most significant first:
//!
//! | bits   | field    | width |
//! |--------|----------|-------|
//! | 71..68 | type     | 4     |
//! | 67..52 | data     | 16    |
//! | 51..48 | iter_num | 4     |
//! | 47..36 | path[0]  | 12    |
//! | 35..24 | path[1]  | 12    |
//! | 23..12 | path[2]  | 12    |
//! | 11..0  | path[3]  | 12    |
//!
//! A path step is `x(4) y(4) wr_reg(1) iter_tag(1) opcode(2)`, again most
//! significant first. Steps past the last used one repeat the previous
//! step's coordinates with zero flags and opcode; a step whose coordinates
//! equal its predecessor's is inactive, and so is every step after it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Bf16, BinOp};

pub const PACKET_BITS: u32 = 72;
pub const PATH_STEPS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum PacketType {
    #[default]
    None,
    Scalar,
    Reduce,
    Exchange,
    Broadcast,
    Read,
    Write,
}

impl PacketType {
    pub const ALL: [PacketType; 7] = [
        PacketType::None,
        PacketType::Scalar,
        PacketType::Reduce,
        PacketType::Exchange,
        PacketType::Broadcast,
        PacketType::Read,
        PacketType::Write,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<PacketType> {
        PacketType::ALL
            .get(code as usize)
            .copied()
            .ok_or(Error::PacketField {
                field: "type",
                value: code as u64,
            })
    }

    /// Whether routers apply their ALU when this packet visits a path step.
    pub fn computes(self) -> bool {
        matches!(self, PacketType::Scalar | PacketType::Reduce | PacketType::Exchange)
    }
}

/// Register selected by a Write packet, carried in its first step's opcode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegSelect {
    ArgReg,
    IterArg,
    /// Low two data bits hold the opcode.
    IterOp,
    /// Data bits read as an unsigned round count.
    IterRound,
}

impl RegSelect {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> RegSelect {
        [RegSelect::ArgReg, RegSelect::IterArg, RegSelect::IterOp, RegSelect::IterRound][(c & 3) as usize]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PathStep {
    pub x: u8,
    pub y: u8,
    pub wr_reg: bool,
    pub iter_tag: bool,
    pub op: BinOp,
}

impl PathStep {
    pub fn new(x: u8, y: u8, op: BinOp) -> Self {
        PathStep {
            x,
            y,
            wr_reg: false,
            iter_tag: false,
            op,
        }
    }

    pub fn with_flags(mut self, wr_reg: bool, iter_tag: bool) -> Self {
        self.wr_reg = wr_reg;
        self.iter_tag = iter_tag;
        self
    }

    /// A filler step at the given coordinates.
    pub fn idle(x: u8, y: u8) -> Self {
        PathStep::new(x, y, BinOp::Add)
    }

    pub fn coord(&self) -> (u8, u8) {
        (self.x, self.y)
    }

    pub fn encode(&self) -> Result<u16> {
        if self.x > 15 {
            return Err(Error::PacketField {
                field: "path.x",
                value: self.x as u64,
            });
        }
        if self.y > 15 {
            return Err(Error::PacketField {
                field: "path.y",
                value: self.y as u64,
            });
        }
        Ok(((self.x as u16) << 8)
            | ((self.y as u16) << 4)
            | ((self.wr_reg as u16) << 3)
            | ((self.iter_tag as u16) << 2)
            | self.op.code() as u16)
    }

    pub fn decode(bits: u16) -> PathStep {
        PathStep {
            x: ((bits >> 8) & 0xF) as u8,
            y: ((bits >> 4) & 0xF) as u8,
            wr_reg: bits & 0x8 != 0,
            iter_tag: bits & 0x4 != 0,
            op: BinOp::from_code((bits & 3) as u8),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Packet {
    pub ptype: PacketType,
    pub data: Bf16,
    pub iter_num: u8,
    pub path: [PathStep; PATH_STEPS],
}

impl Default for Packet {
    fn default() -> Self {
        Packet {
            ptype: PacketType::None,
            data: Bf16::ZERO,
            iter_num: 0,
            path: [PathStep::idle(0, 0); PATH_STEPS],
        }
    }
}

impl Packet {
    /// Build a packet from 1..=4 used steps, padding the rest.
    pub fn new(ptype: PacketType, data: Bf16, iter_num: u8, steps: &[PathStep]) -> Result<Packet> {
        if steps.is_empty() || steps.len() > PATH_STEPS {
            return Err(Error::PacketField {
                field: "path.len",
                value: steps.len() as u64,
            });
        }
        if iter_num > 15 {
            return Err(Error::PacketField {
                field: "iter_num",
                value: iter_num as u64,
            });
        }
        for w in steps.windows(2) {
            if w[0].coord() == w[1].coord() {
                return Err(Error::PacketField {
                    field: "path.repeat",
                    value: ((w[0].x as u64) << 4) | w[0].y as u64,
                });
            }
        }
        let mut path = [PathStep::idle(0, 0); PATH_STEPS];
        for i in 0..PATH_STEPS {
            path[i] = match steps.get(i) {
                Some(s) => *s,
                None => {
                    let (x, y) = path[i - 1].coord();
                    PathStep::idle(x, y)
                }
            };
        }
        let p = Packet {
            ptype,
            data,
            iter_num,
            path,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iter_num > 15 {
            return Err(Error::PacketField {
                field: "iter_num",
                value: self.iter_num as u64,
            });
        }
        for s in &self.path {
            s.encode()?;
        }
        Ok(())
    }

    /// Number of active path steps (at least one).
    pub fn active_steps(&self) -> usize {
        let mut n = 1;
        while n < PATH_STEPS && self.path[n].coord() != self.path[n - 1].coord() {
            n += 1;
        }
        n
    }

    pub fn steps(&self) -> &[PathStep] {
        &self.path[..self.active_steps()]
    }

    /// Passes over the active path; iter_num 0 and 1 both mean one pass.
    pub fn loops(&self) -> u32 {
        self.iter_num.max(1) as u32
    }

    pub fn encode(&self) -> Result<u128> {
        self.validate()?;
        let mut bits: u128 = (self.ptype.code() as u128) << 68;
        bits |= (self.data.to_bits() as u128) << 52;
        bits |= (self.iter_num as u128) << 48;
        for (i, s) in self.path.iter().enumerate() {
            bits |= (s.encode()? as u128) << (36 - 12 * i);
        }
        Ok(bits)
    }

    pub fn decode(bits: u128) -> Result<Packet> {
        if bits >> PACKET_BITS != 0 {
            return Err(Error::PacketField {
                field: "width",
                value: (bits >> PACKET_BITS) as u64,
            });
        }
        let ptype = PacketType::from_code(((bits >> 68) & 0xF) as u8)?;
        let mut path = [PathStep::idle(0, 0); PATH_STEPS];
        for (i, s) in path.iter_mut().enumerate() {
            *s = PathStep::decode(((bits >> (36 - 12 * i)) & 0xFFF) as u16);
        }
        Ok(Packet {
            ptype,
            data: Bf16::from_bits(((bits >> 52) & 0xFFFF) as u16),
            iter_num: ((bits >> 48) & 0xF) as u8,
            path,
        })
    }
}

pub fn encode_packet(p: &Packet) -> Result<u128> {
    p.encode()
}

pub fn decode_packet(bits: u128) -> Result<Packet> {
    Packet::decode(bits)
}

/// Little-endian 12-byte record: the 72 packet bits followed by 24 zero bits.
pub fn packet_record(p: &Packet) -> Result<[u8; 12]> {
    let bits = p.encode()?;
    let mut out = [0u8; 12];
    out.copy_from_slice(&bits.to_le_bytes()[..12]);
    Ok(out)
}

pub fn packet_from_record(rec: &[u8; 12]) -> Result<Packet> {
    let mut buf = [0u8; 16];
    buf[..12].copy_from_slice(rec);
    Packet::decode(u128::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_packet_is_none() {
        let p = Packet::decode(0).unwrap();
        assert_eq!(p.ptype, PacketType::None);
        assert_eq!(p.encode().unwrap(), 0);
        assert_eq!(p.active_steps(), 1);
    }

    #[test]
    fn data_field_position() {
        let p = Packet::new(PacketType::Scalar, Bf16::ONE, 0, &[PathStep::new(0, 0, BinOp::Add)]).unwrap();
        let bits = p.encode().unwrap();
        assert_eq!((bits >> 52) & 0xFFFF, 0x3F80);
        assert_eq!(bits >> 68, 1);
        assert!(bits < 1u128 << 72);
    }

    #[test]
    fn padding_marks_inactive_steps() {
        let steps = [PathStep::new(1, 2, BinOp::Mul), PathStep::new(2, 2, BinOp::Div)];
        let p = Packet::new(PacketType::Scalar, Bf16::ONE, 6, &steps).unwrap();
        assert_eq!(p.active_steps(), 2);
        assert_eq!(p.path[2].coord(), (2, 2));
        assert_eq!(p.path[3].coord(), (2, 2));
        assert!(!p.path[3].wr_reg && p.path[3].op == BinOp::Add);
    }

    #[test]
    fn out_of_range_fields_rejected() {
        assert!(Packet::new(PacketType::Scalar, Bf16::ONE, 16, &[PathStep::idle(0, 0)]).is_err());
        assert!(Packet::new(PacketType::Scalar, Bf16::ONE, 0, &[PathStep::idle(16, 0)]).is_err());
        assert!(Packet::new(PacketType::Scalar, Bf16::ONE, 0, &[]).is_err());
        assert!(Packet::decode(7u128 << 68).is_err());
        assert!(Packet::decode(1u128 << 72).is_err());
    }

    #[test]
    fn record_roundtrip() {
        let p = Packet::new(PacketType::Reduce, Bf16::from_f32(-3.5), 2, &[PathStep::new(3, 15, BinOp::Sub).with_flags(true, false)]).unwrap();
        let r = packet_record(&p).unwrap();
        assert_eq!(&r[9..], &[0, 0, 0]);
        assert_eq!(packet_from_record(&r).unwrap(), p);
    }

    fn arb_step() -> impl Strategy<Value = PathStep> {
        (0u8..16, 0u8..16, any::<bool>(), any::<bool>(), 0u8..4)
            .prop_map(|(x, y, w, i, o)| PathStep::new(x, y, BinOp::from_code(o)).with_flags(w, i))
    }

    fn arb_packet() -> impl Strategy<Value = Packet> {
        (0u8..7, any::<u16>(), 0u8..16, prop::array::uniform4(arb_step())).prop_map(|(t, d, n, path)| Packet {
            ptype: PacketType::from_code(t).unwrap(),
            data: Bf16::from_bits(d),
            iter_num: n,
            path,
        })
    }

    proptest! {
        #[test]
        fn encode_decode_bijective(p in arb_packet()) {
            let bits = p.encode().unwrap();
            prop_assert!(bits < 1u128 << PACKET_BITS);
            prop_assert_eq!(Packet::decode(bits).unwrap(), p);
        }

        #[test]
        fn decode_encode_bijective(bits in any::<u128>()) {
            let bits = bits & ((1u128 << 72) - 1);
            if let Ok(p) = Packet::decode(bits) {
                prop_assert_eq!(p.encode().unwrap(), bits);
            } else {
                prop_assert!((bits >> 68) >= 7);
            }
        }
    }
}
