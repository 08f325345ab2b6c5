//! Row-level and packet-level instruction sets and the translator between
//! them.

pub mod exec;
pub mod fuse;
pub mod packet;
pub mod row;
pub mod translate;

pub use fuse::{fuse_paths, FusedItem, FusedPacket, FusedProgram};
pub use packet::{decode_packet, encode_packet, Packet, PacketType, PathStep, RegSelect, PACKET_BITS};
pub use row::{assemble, disassemble, AccessOp, ExchangeKind, IterInit, RowAddr, RowInstruction, ScalarConfig};
pub use translate::{read_schedule_dump, translate, translate_fused, write_schedule_dump, DataSource, ElemAddr, PacketJob, Sink, Translation, Unit, UnitKind};
pub use exec::{check_against_reference, run_program, run_reference, BankMemory, ExecReport, Machine, ProgramRun, Reference};
