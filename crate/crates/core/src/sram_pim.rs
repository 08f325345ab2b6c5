//! SRAM-PIM macros stacked under each DRAM bank.
//!
//! The four macros of a bank act as one matrix unit in either the
//! (512 in, 8 out) or (256 in, 16 out) aggregation. A unit holds four
//! `inputs x outputs` blocks (16384 BF16 weights). Each block access consumes
//! one input slice streamed from the DRAM bank through the read-out path and
//! the bond link; slices are not buffered across blocks. Streaming is
//! pipelined, so a batch costs the slowest of three stages: DRAM read-out,
//! bond transfer, macro access.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::{BondSpec, DramPimSpec, MacroLayout, SramPimSpec};
use crate::dram_pim;
use crate::error::{Error, Result};

/// Stage that bounds a streamed SRAM-PIM operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Bottleneck {
    Readout,
    Bond,
    MacroAccess,
}

impl fmt::Display for Bottleneck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bottleneck::Readout => "readout",
            Bottleneck::Bond => "bond",
            Bottleneck::MacroAccess => "macro_access",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub ns: f64,
    pub readout_ns: f64,
    pub bond_ns: f64,
    pub access_ns: f64,
    pub bond_bytes: u64,
    pub dram_bytes: u64,
    pub macro_accesses: u64,
    pub macs: u64,
    pub bottleneck: Bottleneck,
}

impl StageCost {
    pub fn zero() -> Self {
        StageCost {
            ns: 0.0,
            readout_ns: 0.0,
            bond_ns: 0.0,
            access_ns: 0.0,
            bond_bytes: 0,
            dram_bytes: 0,
            macro_accesses: 0,
            macs: 0,
            bottleneck: Bottleneck::Readout,
        }
    }
}

fn argmax(readout: f64, bond: f64, access: f64) -> Bottleneck {
    if access > readout && access > bond {
        Bottleneck::MacroAccess
    } else if bond > readout {
        Bottleneck::Bond
    } else {
        Bottleneck::Readout
    }
}

/// Hardware view needed for SRAM-PIM timing.
#[derive(Clone, Copy, Debug)]
pub struct SramModel<'a> {
    pub dram: &'a DramPimSpec,
    pub sram: &'a SramPimSpec,
    pub bond: &'a BondSpec,
}

impl<'a> SramModel<'a> {
    pub fn new(dram: &'a DramPimSpec, sram: &'a SramPimSpec, bond: &'a BondSpec) -> Self {
        SramModel { dram, sram, bond }
    }

    fn dram_ns(&self, cycles: u64) -> f64 {
        cycles as f64 * self.dram.timings.clock_period
    }

    pub fn bond_ns(&self, bytes: u64) -> f64 {
        bytes as f64 / self.bond.bandwidth() * 1e9
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.sram.bank_capacity_bytes()
    }

    /// Weight blocks a resident tile of `in_rows x out_cols` occupies.
    pub fn blocks(&self, layout: MacroLayout, in_rows: u64, out_cols: u64) -> u64 {
        in_rows.div_ceil(layout.inputs() as u64) * out_cols.div_ceil(layout.outputs() as u64)
    }

    pub fn max_blocks(&self, layout: MacroLayout) -> u64 {
        self.sram.resident_weights() / (layout.inputs() * layout.outputs()) as u64
    }

    /// Cost of loading `bytes` of weights: DRAM read-out followed by the bond
    /// transfer.
    pub fn load_cost(&self, bytes: u64) -> Result<StageCost> {
        let cap = self.capacity_bytes();
        if bytes > cap {
            return Err(Error::TileTooLarge {
                bytes,
                capacity: cap,
                splits: bytes.div_ceil(cap),
            });
        }
        if bytes == 0 {
            return Ok(StageCost::zero());
        }
        let readout_ns = self.dram_ns(dram_pim::readout_cycles(self.dram, bytes));
        let bond_ns = self.bond_ns(bytes);
        Ok(StageCost {
            ns: readout_ns + bond_ns,
            readout_ns,
            bond_ns,
            access_ns: 0.0,
            bond_bytes: bytes,
            dram_bytes: bytes,
            macro_accesses: 0,
            macs: 0,
            bottleneck: if bond_ns > readout_ns { Bottleneck::Bond } else { Bottleneck::Readout },
        })
    }

    /// Cost of running `batch` input vectors through a resident
    /// `in_rows x out_cols` tile.
    pub fn gemm_cost(&self, layout: MacroLayout, in_rows: u64, out_cols: u64, batch: u64) -> Result<StageCost> {
        let blocks = self.blocks(layout, in_rows, out_cols);
        let max = self.max_blocks(layout);
        if blocks > max {
            return Err(Error::TileTooLarge {
                bytes: in_rows * out_cols * 2,
                capacity: self.capacity_bytes(),
                splits: blocks.div_ceil(max),
            });
        }
        if batch == 0 || blocks == 0 {
            return Ok(StageCost::zero());
        }
        let slice_bytes = in_rows.min(layout.inputs() as u64) * 2;
        let out_bytes = out_cols * 2;
        let accesses = batch * blocks;
        let readout_ns = accesses as f64 * self.dram_ns(dram_pim::readout_cycles(self.dram, slice_bytes))
            + self.dram_ns(dram_pim::writeback_cycles(self.dram, batch * out_bytes));
        let bond_bytes = accesses * slice_bytes + batch * out_bytes;
        let bond_ns = self.bond_ns(bond_bytes);
        let access_ns = accesses as f64 * self.sram.access_time();
        Ok(StageCost {
            ns: readout_ns.max(bond_ns).max(access_ns),
            readout_ns,
            bond_ns,
            access_ns,
            bond_bytes,
            dram_bytes: accesses * slice_bytes + batch * out_bytes,
            macro_accesses: accesses,
            macs: batch * in_rows * out_cols,
            bottleneck: argmax(readout_ns, bond_ns, access_ns),
        })
    }
}

/// Energy of `macs` multiply-accumulates on the macros, pJ. One MAC is two
/// operations.
pub fn sram_energy(macs: u64, sram: &SramPimSpec) -> f64 {
    2.0 * macs as f64 / sram.tops_per_watt()
}

/// Per-bank bond link: tallies every byte crossing the dies.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BondLink {
    pub bandwidth: f64,
    pub energy_per_bit: f64,
    pub busy_until: f64,
    pub bytes: u64,
}

impl BondLink {
    pub fn new(spec: &BondSpec) -> Self {
        BondLink {
            bandwidth: spec.bandwidth(),
            energy_per_bit: spec.energy_per_bit,
            busy_until: 0.0,
            bytes: 0,
        }
    }

    pub fn energy(&self) -> f64 {
        self.bytes as f64 * 8.0 * self.energy_per_bit
    }
}

pub type TileId = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SramEvent {
    Load,
    Compute,
    Writeback,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SramTraceRecord {
    pub time_ns: f64,
    pub bank: usize,
    pub event: SramEvent,
    pub bytes: u64,
}

impl fmt::Display for SramTraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let e = match self.event {
            SramEvent::Load => "load",
            SramEvent::Compute => "compute",
            SramEvent::Writeback => "writeback",
        };
        write!(f, "{:.3} {} {} {}", self.time_ns, self.bank, e, self.bytes)
    }
}

/// The lockstep macro group of one bank.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MacroState {
    pub resident_weight_tile: Option<TileId>,
    /// (in_rows, out_cols) of the resident tile.
    pub resident_shape: Option<(u64, u64)>,
    pub busy_until: f64,
}

/// SRAM-PIM side of one channel.
#[derive(Clone, Debug)]
pub struct SramChannel {
    dram: DramPimSpec,
    sram: SramPimSpec,
    bond: BondSpec,
    pub macros: Vec<MacroState>,
    pub links: Vec<BondLink>,
    macs: u64,
    trace: Option<Vec<SramTraceRecord>>,
}

impl SramChannel {
    pub fn new(dram: &DramPimSpec, sram: &SramPimSpec, bond: &BondSpec) -> Self {
        let n = dram.banks_per_channel as usize;
        SramChannel {
            dram: dram.clone(),
            sram: sram.clone(),
            bond: bond.clone(),
            macros: vec![MacroState::default(); n],
            links: vec![BondLink::new(bond); n],
            macs: 0,
            trace: None,
        }
    }

    fn model(&self) -> SramModel<'_> {
        SramModel::new(&self.dram, &self.sram, &self.bond)
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[SramTraceRecord] {
        self.trace.as_deref().unwrap_or(&[])
    }

    fn record(&mut self, time_ns: f64, bank: usize, event: SramEvent, bytes: u64) {
        if let Some(t) = self.trace.as_mut() {
            t.push(SramTraceRecord { time_ns, bank, event, bytes });
        }
    }

    /// Load an `in_rows x out_cols` tile into `bank`. Returns the cost in ns;
    /// reloading the resident tile is free.
    pub fn load_weights(&mut self, bank: usize, tile: TileId, in_rows: u64, out_cols: u64, now: f64) -> Result<StageCost> {
        let bytes = in_rows * out_cols * 2;
        if bytes == 0 {
            return Ok(StageCost::zero());
        }
        if self.macros[bank].resident_weight_tile == Some(tile) {
            return Ok(StageCost::zero());
        }
        let cost = self.model().load_cost(bytes)?;
        let m = &mut self.macros[bank];
        let start = now.max(m.busy_until);
        m.busy_until = start + cost.ns;
        m.resident_weight_tile = Some(tile);
        m.resident_shape = Some((in_rows, out_cols));
        let link = &mut self.links[bank];
        link.bytes += cost.bond_bytes;
        link.busy_until = link.busy_until.max(start + cost.ns);
        self.record(start, bank, SramEvent::Load, bytes);
        Ok(cost)
    }

    /// Run `batch` vectors through the resident tile of `bank`.
    pub fn gemm_bank(&mut self, bank: usize, layout: MacroLayout, batch: u64, now: f64) -> Result<StageCost> {
        let (in_rows, out_cols) = self.macros[bank].resident_shape.ok_or(Error::NotResident(bank))?;
        let cost = self.model().gemm_cost(layout, in_rows, out_cols, batch)?;
        if batch == 0 {
            return Ok(cost);
        }
        let m = &mut self.macros[bank];
        let start = now.max(m.busy_until);
        m.busy_until = start + cost.ns;
        let link = &mut self.links[bank];
        link.bytes += cost.bond_bytes;
        link.busy_until = link.busy_until.max(start + cost.ns);
        self.macs += cost.macs;
        self.record(start, bank, SramEvent::Compute, cost.bond_bytes - batch * out_cols * 2);
        self.record(start + cost.ns, bank, SramEvent::Writeback, batch * out_cols * 2);
        Ok(cost)
    }

    pub fn bond_energy(&self) -> f64 {
        self.links.iter().map(BondLink::energy).sum()
    }

    pub fn bond_bytes(&self) -> u64 {
        self.links.iter().map(|l| l.bytes).sum()
    }

    pub fn macro_energy(&self) -> f64 {
        sram_energy(self.macs, &self.sram)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{HardwareConfig, VoltageMode};
    use proptest::prelude::*;

    fn hw() -> HardwareConfig {
        HardwareConfig::default()
    }

    #[test]
    fn full_reload_cost() {
        let h = hw();
        let m = SramModel::new(&h.dram, &h.sram, &h.bond);
        let c = m.load_cost(32 * 1024).unwrap();
        // 32 rows, each: tRCD + 32 column accesses, then tRP.
        let readout = 32.0 * (18.0 + 32.0 + 16.0);
        let bond = 32.0 * 1024.0 / (256.0 * 6.4e9 / 8.0) * 1e9;
        assert!((c.ns - (readout + bond)).abs() < 1e-9, "{}", c.ns);
        assert_eq!(c.bottleneck, Bottleneck::Readout);
        assert_eq!(m.load_cost(0).unwrap().ns, 0.0);
    }

    #[test]
    fn oversize_tile_hints_split() {
        let h = hw();
        let m = SramModel::new(&h.dram, &h.sram, &h.bond);
        match m.load_cost(100 * 1024).unwrap_err() {
            Error::TileTooLarge { splits, .. } => assert_eq!(splits, 4),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn residency_reuse() {
        let h = hw();
        let mut ch = SramChannel::new(&h.dram, &h.sram, &h.bond);
        let first = ch.load_weights(0, 7, 512, 32, 0.0).unwrap();
        assert!(first.ns > 0.0);
        for _ in 0..10 {
            assert_eq!(ch.load_weights(0, 7, 512, 32, 0.0).unwrap().ns, 0.0);
            ch.gemm_bank(0, MacroLayout::In512Out8, 1, 0.0).unwrap();
        }
        assert_eq!(ch.load_weights(1, 7, 0, 0, 0.0).unwrap().ns, 0.0);
        assert_eq!(ch.macros[1].resident_weight_tile, None);
    }

    #[test]
    fn compute_needs_resident_tile() {
        let h = hw();
        let mut ch = SramChannel::new(&h.dram, &h.sram, &h.bond);
        assert!(matches!(ch.gemm_bank(3, MacroLayout::In512Out8, 4, 0.0), Err(Error::NotResident(3))));
    }

    #[test]
    fn layout_mismatch_rejected() {
        let h = hw();
        let m = SramModel::new(&h.dram, &h.sram, &h.bond);
        // 2048 inputs x 16 outputs fits the bytes but needs 8 (512,8) blocks.
        assert!(m.gemm_cost(MacroLayout::In512Out8, 2048, 16, 1).is_err());
        assert!(m.gemm_cost(MacroLayout::In256Out16, 256, 64, 1).is_ok());
    }

    #[test]
    fn batch_zero_costs_nothing() {
        let h = hw();
        let m = SramModel::new(&h.dram, &h.sram, &h.bond);
        assert_eq!(m.gemm_cost(MacroLayout::In512Out8, 512, 32, 0).unwrap().ns, 0.0);
    }

    #[test]
    fn bond_limited_prefers_256x16() {
        let mut h = hw();
        h.bond.bonds_per_bank = 8;
        let m = SramModel::new(&h.dram, &h.sram, &h.bond);
        let a = m.gemm_cost(MacroLayout::In512Out8, 512, 32, 16).unwrap();
        let b = m.gemm_cost(MacroLayout::In256Out16, 256, 64, 16).unwrap();
        assert_eq!(a.macs, b.macs);
        assert_eq!(a.bottleneck, Bottleneck::Bond);
        assert_eq!(b.bottleneck, Bottleneck::Bond);
        assert!(b.ns < a.ns);
    }

    #[test]
    fn voltage_irrelevant_when_transfer_bound() {
        let mut h = hw();
        let fast = SramModel::new(&h.dram, &h.sram, &h.bond).gemm_cost(MacroLayout::In512Out8, 512, 32, 1).unwrap();
        h.sram.voltage_mode = VoltageMode::Low;
        let slow = SramModel::new(&h.dram, &h.sram, &h.bond).gemm_cost(MacroLayout::In512Out8, 512, 32, 1).unwrap();
        assert_eq!(fast.bottleneck, Bottleneck::Readout);
        assert_eq!(fast.ns, slow.ns);
    }

    #[test]
    fn macro_power_near_22mw() {
        let s = SramPimSpec::default();
        // One macro: 128 x 8 MACs per access.
        let watts = sram_energy(128 * 8, &s) * 1e-12 / (s.access_time() * 1e-9);
        assert!((watts - 0.022).abs() < 0.002, "{watts}");
        assert_eq!(sram_energy(0, &s), 0.0);
        let mut low = s.clone();
        low.voltage_mode = VoltageMode::Low;
        assert!(sram_energy(1000, &low) < sram_energy(1000, &s));
        assert!(low.access_time() > s.access_time());
    }

    #[test]
    fn trace_lines() {
        let h = hw();
        let mut ch = SramChannel::new(&h.dram, &h.sram, &h.bond);
        ch.enable_trace();
        ch.load_weights(2, 1, 512, 8, 0.0).unwrap();
        assert!(ch.trace()[0].to_string().ends_with(" 2 load 8192"));
    }

    proptest! {
        #[test]
        fn bond_energy_conserved(ops in prop::collection::vec((0usize..16, 1u64..512, 1u64..33, 0u64..40, 0u64..3), 1..40)) {
            let h = hw();
            let mut ch = SramChannel::new(&h.dram, &h.sram, &h.bond);
            let mut bytes = 0u64;
            for (bank, rows, cols, batch, tile) in ops {
                bytes += ch.load_weights(bank, tile, rows, cols, 0.0).unwrap().bond_bytes;
                bytes += ch.gemm_bank(bank, MacroLayout::In512Out8, batch, 0.0).unwrap().bond_bytes;
            }
            prop_assert_eq!(ch.bond_bytes(), bytes);
            prop_assert_eq!(ch.bond_energy(), bytes as f64 * 8.0 * h.bond.energy_per_bit);
        }

        #[test]
        fn gemm_monotone_in_batch(b in 0u64..256, rows in 1u64..512, cols in 1u64..32) {
            let h = hw();
            let m = SramModel::new(&h.dram, &h.sram, &h.bond);
            let lo = m.gemm_cost(MacroLayout::In512Out8, rows, cols, b).unwrap();
            let hi = m.gemm_cost(MacroLayout::In512Out8, rows, cols, b + 1).unwrap();
            prop_assert!(hi.ns >= lo.ns);
        }
    }
}
