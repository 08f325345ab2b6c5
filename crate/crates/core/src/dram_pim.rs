//! DRAM-PIM channel timing and energy.
//!
//! Time is counted in DRAM clock cycles (`DramTimings::clock_period` ns
//! each). Streaming column operations (MAC, read-out to SRAM, write-back) are
//! pipelined: the column bus accepts one access per cycle and CAS latency
//! overlaps the stream.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::DramPimSpec;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CommandKind {
    Act,
    Rd,
    Wr,
    Mac,
    Pre,
    ReadoutToSram,
    WritebackFromSram,
    GbTransfer,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::Act => "ACT",
            CommandKind::Rd => "RD",
            CommandKind::Wr => "WR",
            CommandKind::Mac => "MAC",
            CommandKind::Pre => "PRE",
            CommandKind::ReadoutToSram => "READOUT_TO_SRAM",
            CommandKind::WritebackFromSram => "WRITEBACK_FROM_SRAM",
            CommandKind::GbTransfer => "GB_TRANSFER",
        }
    }

    fn row_scoped(self) -> bool {
        !matches!(self, CommandKind::Act | CommandKind::Pre | CommandKind::GbTransfer)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DramCommand {
    pub kind: CommandKind,
    /// Bank index within the channel.
    pub bank: usize,
    pub row: u64,
    pub bytes: u64,
}

impl DramCommand {
    pub fn new(kind: CommandKind, bank: usize, row: u64, bytes: u64) -> Self {
        DramCommand { kind, bank, row, bytes }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BankState {
    pub bank_id: usize,
    pub open_row: Option<u64>,
    pub busy_until: u64,
    /// Cycle the open row was activated.
    opened_at: u64,
}

/// One line of the command trace.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub cycle: u64,
    pub bank: usize,
    pub kind: CommandKind,
    pub bytes: u64,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.cycle, self.bank, self.kind.name(), self.bytes)
    }
}

/// Dynamic energy per command class, pJ.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DramEnergyReport {
    pub activation: f64,
    pub read: f64,
    pub write: f64,
    pub mac: f64,
    pub global_buffer: f64,
}

impl DramEnergyReport {
    pub fn total(&self) -> f64 {
        self.activation + self.read + self.write + self.mac + self.global_buffer
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Counters {
    acts: u64,
    rd_accesses: u64,
    wr_accesses: u64,
    mac_accesses: u64,
    gb_bytes: u64,
}

/// Timing parameters converted to whole cycles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CycleTimings {
    pub rcd_wr: u64,
    pub rcd_rd: u64,
    pub ras: u64,
    pub cl: u64,
    pub rp: u64,
}

impl CycleTimings {
    pub fn from_spec(spec: &DramPimSpec) -> Self {
        let t = &spec.timings;
        let c = |ns: f64| ns_to_cycles(ns, t.clock_period);
        CycleTimings {
            rcd_wr: c(t.t_rcdwr),
            rcd_rd: c(t.t_rcdrd),
            ras: c(t.t_ras),
            cl: c(t.t_cl),
            rp: c(t.t_rp),
        }
    }
}

pub fn ns_to_cycles(ns: f64, clock_period: f64) -> u64 {
    if ns <= 0.0 {
        0
    } else {
        (ns / clock_period - 1e-9).ceil() as u64
    }
}

/// Bytes the MAC lanes consume per cycle, set by the bank's internal bandwidth.
pub fn mac_bytes_per_cycle(spec: &DramPimSpec) -> u64 {
    ((spec.internal_bandwidth_per_bank * spec.timings.clock_period * 1e-9).round() as u64).max(1)
}

/// Cycles to stream `bytes` of consecutive rows through the column path at
/// `bytes_per_access` per cycle: each row pays activation, the stream (at
/// least tRAS in total), and precharge. With `reuse_open_row` the first row
/// is already open and skips its activation.
pub fn row_stream_cycles(
    spec: &DramPimSpec,
    bytes: u64,
    bytes_per_access: u64,
    write: bool,
    reuse_open_row: bool,
) -> u64 {
    if bytes == 0 {
        return 0;
    }
    let t = CycleTimings::from_spec(spec);
    let rcd = if write { t.rcd_wr } else { t.rcd_rd };
    let row = spec.row_width as u64;
    let mut total = 0;
    let mut left = bytes;
    let mut first = true;
    while left > 0 {
        let chunk = left.min(row);
        let cols = chunk.div_ceil(bytes_per_access);
        let body = if first && reuse_open_row {
            cols
        } else {
            (rcd + cols).max(t.ras)
        };
        total += body + t.rp;
        left -= chunk;
        first = false;
    }
    total
}

/// Cycle cost of one bank streaming a `rows x cols` BF16 weight tile through
/// its MAC lanes.
pub fn gemv_bank(spec: &DramPimSpec, rows: u64, cols: u64, reuse_open_row: bool) -> u64 {
    row_stream_cycles(spec, rows * cols * 2, mac_bytes_per_cycle(spec), false, reuse_open_row)
}

/// Cycles for reading `bytes` out of a bank towards its SRAM-PIM die.
pub fn readout_cycles(spec: &DramPimSpec, bytes: u64) -> u64 {
    row_stream_cycles(spec, bytes, spec.readout_bytes_per_access as u64, false, false)
}

/// Cycles for writing `bytes` from SRAM-PIM back into DRAM rows.
pub fn writeback_cycles(spec: &DramPimSpec, bytes: u64) -> u64 {
    row_stream_cycles(spec, bytes, spec.readout_bytes_per_access as u64, true, false)
}

/// Cycles for one global-buffer transfer of `bytes`.
pub fn gb_transfer_cycles(spec: &DramPimSpec, bytes: u64) -> u64 {
    let per_cycle = spec.global_buffer_bandwidth * spec.timings.clock_period * 1e-9;
    (bytes as f64 / per_cycle - 1e-9).ceil().max(0.0) as u64
}

/// MAC lane steps needed to stream `bytes`; energy is charged per step.
pub fn mac_steps(spec: &DramPimSpec, bytes: u64) -> u64 {
    bytes.div_ceil(mac_bytes_per_cycle(spec))
}

/// Dynamic energy of one GeMV tile, pJ, counted the same way as [`Channel`].
pub fn gemv_energy(spec: &DramPimSpec, rows: u64, cols: u64) -> f64 {
    let bytes = rows * cols * 2;
    let acts = bytes.div_ceil(spec.row_width as u64);
    acts as f64 * spec.energy.act_pj + mac_steps(spec, bytes) as f64 * spec.energy.mac_pj
}

/// Dynamic energy of a read-out or write-back stream of `bytes`, pJ.
pub fn transfer_energy(spec: &DramPimSpec, bytes: u64, write: bool) -> f64 {
    let acts = bytes.div_ceil(spec.row_width as u64);
    let accesses = bytes.div_ceil(spec.readout_bytes_per_access as u64);
    let per = if write { spec.energy.wr_pj } else { spec.energy.rd_pj };
    acts as f64 * spec.energy.act_pj + accesses as f64 * per
}

/// One DRAM-PIM channel: its banks and the shared global buffer.
#[derive(Clone, Debug)]
pub struct Channel {
    spec: DramPimSpec,
    timings: CycleTimings,
    pub channel_id: usize,
    pub banks: Vec<BankState>,
    gb_busy_until: u64,
    counters: Counters,
    trace: Option<Vec<TraceRecord>>,
}

impl Channel {
    pub fn new(spec: &DramPimSpec, channel_id: usize) -> Self {
        let banks = (0..spec.banks_per_channel as usize)
            .map(|i| BankState {
                bank_id: i,
                ..BankState::default()
            })
            .collect();
        Channel {
            spec: spec.clone(),
            timings: CycleTimings::from_spec(spec),
            channel_id,
            banks,
            gb_busy_until: 0,
            counters: Counters::default(),
            trace: None,
        }
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn timings(&self) -> CycleTimings {
        self.timings
    }

    fn record(&mut self, cycle: u64, bank: usize, kind: CommandKind, bytes: u64) {
        if let Some(t) = self.trace.as_mut() {
            t.push(TraceRecord { cycle, bank, kind, bytes });
        }
    }

    fn illegal(bank: usize, reason: impl Into<String>) -> Error {
        Error::IllegalCommand {
            bank,
            reason: reason.into(),
        }
    }

    /// Issue a bank command no earlier than `now`; returns its completion
    /// cycle (first data for RD, end of stream for streaming commands).
    pub fn issue(&mut self, cmd: DramCommand, now: u64) -> Result<u64> {
        let b = cmd.bank;
        if b >= self.banks.len() {
            return Err(Self::illegal(b, "bank index out of range"));
        }
        if cmd.kind == CommandKind::GbTransfer {
            return Err(Self::illegal(b, "use global_buffer_transfer for GB_TRANSFER"));
        }
        if cmd.kind.row_scoped() && cmd.bytes > self.spec.row_width as u64 {
            return Err(Self::illegal(
                b,
                format!("{} of {} bytes exceeds row width {}", cmd.kind.name(), cmd.bytes, self.spec.row_width),
            ));
        }
        let t = self.timings;
        let readout = self.spec.readout_bytes_per_access as u64;
        let mac_bytes = mac_bytes_per_cycle(&self.spec);
        let bank = &self.banks[b];
        let start = now.max(bank.busy_until);
        if cmd.kind.row_scoped() && bank.open_row != Some(cmd.row) {
            return Err(Self::illegal(
                b,
                match bank.open_row {
                    None => format!("{} on closed bank (row {})", cmd.kind.name(), cmd.row),
                    Some(r) => format!("{} on row {} while row {} is open", cmd.kind.name(), cmd.row, r),
                },
            ));
        }
        let opened_at = bank.opened_at;
        let (start, done, busy) = match cmd.kind {
            CommandKind::Act => {
                if bank.open_row.is_some() {
                    return Err(Self::illegal(b, "ACT while a row is open"));
                }
                self.counters.acts += 1;
                // Column commands gate on their own tRCD; writes may start earliest.
                (start, start + t.rcd_rd, start + t.rcd_wr.min(t.rcd_rd))
            }
            CommandKind::Rd => {
                let s = start.max(opened_at + t.rcd_rd);
                let n = cmd.bytes.div_ceil(readout).max(1);
                self.counters.rd_accesses += n;
                (s, s + t.cl + n - 1, s + n)
            }
            CommandKind::Wr | CommandKind::WritebackFromSram => {
                let s = start.max(opened_at + t.rcd_wr);
                let n = cmd.bytes.div_ceil(readout).max(1);
                self.counters.wr_accesses += n;
                (s, s + n, s + n)
            }
            CommandKind::ReadoutToSram => {
                let s = start.max(opened_at + t.rcd_rd);
                let n = cmd.bytes.div_ceil(readout).max(1);
                self.counters.rd_accesses += n;
                (s, s + n, s + n)
            }
            CommandKind::Mac => {
                let s = start.max(opened_at + t.rcd_rd);
                let n = cmd.bytes.div_ceil(mac_bytes).max(1);
                self.counters.mac_accesses += n;
                (s, s + n, s + n)
            }
            CommandKind::Pre => {
                if bank.open_row.is_none() {
                    return Err(Self::illegal(b, "PRE on closed bank"));
                }
                let s = start.max(opened_at + t.ras);
                (s, s + t.rp, s + t.rp)
            }
            CommandKind::GbTransfer => unreachable!(),
        };
        let bank = &mut self.banks[b];
        debug_assert!(busy >= bank.busy_until, "busy_until must not move backwards");
        bank.busy_until = busy;
        match cmd.kind {
            CommandKind::Act => {
                bank.open_row = Some(cmd.row);
                bank.opened_at = start;
            }
            CommandKind::Pre => bank.open_row = None,
            _ => {}
        }
        self.record(start, b, cmd.kind, cmd.bytes);
        Ok(done)
    }

    /// Move `bytes` between two banks of this channel through the global
    /// buffer. Transfers are serialized channel-wide. Bank ids are
    /// device-global (`channel_id * banks_per_channel + bank`). Returns the
    /// completion cycle.
    pub fn global_buffer_transfer(&mut self, src_bank: usize, dst_bank: usize, bytes: u64, now: u64) -> Result<u64> {
        let n = self.banks.len();
        let base = self.channel_id * n;
        for id in [src_bank, dst_bank] {
            if id < base || id >= base + n {
                return Err(Error::Transfer(format!(
                    "bank {id} is not in channel {}; cross-channel traffic goes over the device interconnect",
                    self.channel_id
                )));
            }
        }
        if bytes == 0 {
            return Ok(now);
        }
        let start = now.max(self.gb_busy_until);
        let done = start + gb_transfer_cycles(&self.spec, bytes);
        self.gb_busy_until = done;
        self.counters.gb_bytes += bytes;
        self.record(start, src_bank - base, CommandKind::GbTransfer, bytes);
        Ok(done)
    }

    pub fn energy_report(&self) -> DramEnergyReport {
        let e = &self.spec.energy;
        let c = &self.counters;
        DramEnergyReport {
            activation: c.acts as f64 * e.act_pj,
            read: c.rd_accesses as f64 * e.rd_pj,
            write: c.wr_accesses as f64 * e.wr_pj,
            mac: c.mac_accesses as f64 * e.mac_pj,
            global_buffer: c.gb_bytes as f64 * e.gb_pj_per_byte,
        }
    }

    /// Issue the full command sequence for streaming a GeMV tile on `bank`
    /// starting at row `first_row`; returns the completion cycle.
    pub fn run_gemv(&mut self, bank: usize, first_row: u64, rows: u64, cols: u64, now: u64) -> Result<u64> {
        self.run_stream(bank, first_row, rows * cols * 2, CommandKind::Mac, now)
    }

    /// Issue ACT / stream / PRE for consecutive rows.
    pub fn run_stream(&mut self, bank: usize, first_row: u64, bytes: u64, kind: CommandKind, now: u64) -> Result<u64> {
        let row_width = self.spec.row_width as u64;
        let mut t = now;
        let mut left = bytes;
        let mut row = first_row;
        while left > 0 {
            let chunk = left.min(row_width);
            if self.banks[bank].open_row != Some(row) {
                if self.banks[bank].open_row.is_some() {
                    t = self.issue(DramCommand::new(CommandKind::Pre, bank, row, 0), t)?;
                }
                self.issue(DramCommand::new(CommandKind::Act, bank, row, 0), t)?;
            }
            t = self.issue(DramCommand::new(kind, bank, row, chunk), t)?;
            t = self.issue(DramCommand::new(CommandKind::Pre, bank, row, 0), t)?;
            left -= chunk;
            row += 1;
        }
        Ok(t)
    }
}

/// Check a trace against the row-cycle constraints: ACT only after the
/// previous PRE completed, PRE no sooner than tRAS after ACT, column
/// commands no sooner than tRCD after ACT.
pub fn check_trace(trace: &[TraceRecord], t: CycleTimings) -> std::result::Result<(), String> {
    use std::collections::HashMap;
    let mut act: HashMap<usize, u64> = HashMap::new();
    let mut pre_done: HashMap<usize, u64> = HashMap::new();
    for r in trace {
        match r.kind {
            CommandKind::Act => {
                if let Some(&p) = pre_done.get(&r.bank) {
                    if r.cycle < p {
                        return Err(format!("bank {} ACT at {} before tRP elapsed ({})", r.bank, r.cycle, p));
                    }
                }
                act.insert(r.bank, r.cycle);
            }
            CommandKind::Pre => {
                let a = act.get(&r.bank).copied().unwrap_or(0);
                if r.cycle < a + t.ras {
                    return Err(format!("bank {} PRE at {} violates tRAS after ACT at {}", r.bank, r.cycle, a));
                }
                pre_done.insert(r.bank, r.cycle + t.rp);
            }
            CommandKind::GbTransfer => {}
            CommandKind::Wr | CommandKind::WritebackFromSram => {
                let a = act.get(&r.bank).copied().unwrap_or(0);
                if r.cycle < a + t.rcd_wr {
                    return Err(format!("bank {} write at {} violates tRCDWR", r.bank, r.cycle));
                }
            }
            _ => {
                let a = act.get(&r.bank).copied().unwrap_or(0);
                if r.cycle < a + t.rcd_rd {
                    return Err(format!("bank {} {} at {} violates tRCDRD", r.bank, r.kind.name(), r.cycle));
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec() -> DramPimSpec {
        DramPimSpec::default()
    }

    #[test]
    fn act_then_read_first_data() {
        let mut ch = Channel::new(&spec(), 0);
        let t = ch.issue(DramCommand::new(CommandKind::Act, 0, 5, 0), 0).unwrap();
        assert_eq!(t, 18);
        let d = ch.issue(DramCommand::new(CommandKind::Rd, 0, 5, 32), t).unwrap();
        assert_eq!(d, 18 + 25);
    }

    #[test]
    fn read_on_open_row_costs_cas_only() {
        let mut ch = Channel::new(&spec(), 0);
        ch.issue(DramCommand::new(CommandKind::Act, 0, 1, 0), 0).unwrap();
        let now = 100;
        assert_eq!(ch.issue(DramCommand::new(CommandKind::Rd, 0, 1, 32), now).unwrap(), now + 25);
    }

    #[test]
    fn readout_decomposes_into_accesses() {
        let mut ch = Channel::new(&spec(), 0);
        ch.enable_trace();
        ch.issue(DramCommand::new(CommandKind::Act, 0, 0, 0), 0).unwrap();
        let done = ch.issue(DramCommand::new(CommandKind::ReadoutToSram, 0, 0, 512), 18).unwrap();
        assert_eq!(done - 18, 512 / 32);
        assert_eq!(ch.energy_report().read, 16.0 * ch.spec.energy.rd_pj);
    }

    #[test]
    fn illegal_sequences_are_errors() {
        let mut ch = Channel::new(&spec(), 0);
        assert!(ch.issue(DramCommand::new(CommandKind::Rd, 0, 0, 32), 0).is_err());
        assert!(ch.issue(DramCommand::new(CommandKind::Pre, 0, 0, 0), 0).is_err());
        ch.issue(DramCommand::new(CommandKind::Act, 0, 0, 0), 0).unwrap();
        assert!(ch.issue(DramCommand::new(CommandKind::Act, 0, 1, 0), 0).is_err());
        assert!(ch.issue(DramCommand::new(CommandKind::Mac, 0, 1, 32), 0).is_err());
        assert!(ch.issue(DramCommand::new(CommandKind::Mac, 0, 0, 4096), 0).is_err());
    }

    #[test]
    fn gemv_analytic_matches_command_sequence() {
        let s = spec();
        for (rows, cols) in [(5120, 10), (512, 8), (256, 16), (1, 1), (7, 333)] {
            let mut ch = Channel::new(&s, 0);
            ch.enable_trace();
            let done = ch.run_gemv(0, 0, rows, cols, 0).unwrap();
            assert_eq!(done, gemv_bank(&s, rows, cols, false), "{rows}x{cols}");
            check_trace(ch.trace(), ch.timings()).unwrap();
            let e = ch.energy_report();
            assert!((e.total() - gemv_energy(&s, rows, cols)).abs() < 1e-6);
        }
    }

    #[test]
    fn gemv_qkv_tile_cost() {
        let s = spec();
        let bytes = 5120 * 10 * 2;
        let stream = bytes / 32;
        let rows = bytes / 1024;
        let cost = gemv_bank(&s, 5120, 10, false);
        // Every row pays tRCD + tRP on top of its stream.
        assert_eq!(cost, stream + rows * (18 + 16));
        assert_eq!(gemv_bank(&s, 0, 10, false), 0);
        assert_eq!(gemv_bank(&s, 256, 16, false), gemv_bank(&s, 512, 8, false));
        assert!(gemv_bank(&s, 5120, 10, true) < cost);
    }

    #[test]
    fn readout_128_quarter_accesses() {
        let mut s = spec();
        let mut ch32 = Channel::new(&s, 0);
        s.readout_bytes_per_access = 128;
        let mut ch128 = Channel::new(&s, 0);
        ch32.run_stream(0, 0, 32 * 1024, CommandKind::ReadoutToSram, 0).unwrap();
        ch128.run_stream(0, 0, 32 * 1024, CommandKind::ReadoutToSram, 0).unwrap();
        assert_eq!(ch32.counters.rd_accesses, 1024);
        assert_eq!(ch128.counters.rd_accesses, 256);
    }

    #[test]
    fn global_buffer_serializes() {
        let s = spec();
        let mut ch = Channel::new(&s, 1);
        let single = gb_transfer_cycles(&s, 256);
        let a = ch.global_buffer_transfer(16, 17, 256, 0).unwrap();
        let b = ch.global_buffer_transfer(18, 19, 256, 0).unwrap();
        assert_eq!(a, single);
        assert_eq!(b, 2 * single);
        assert_eq!(ch.global_buffer_transfer(16, 17, 0, 5).unwrap(), 5);
        assert!(ch.global_buffer_transfer(0, 17, 64, 0).is_err());
        assert_eq!(gb_transfer_cycles(&s, 1024), (1024.0f64 / 32.0).ceil() as u64);
        assert_eq!(gb_transfer_cycles(&s, 1000), 32);
    }

    #[test]
    fn sustained_gemv_power_in_band() {
        let s = spec();
        let (rows, cols) = (4096, 128);
        let cycles = gemv_bank(&s, rows, cols, false);
        let watts = gemv_energy(&s, rows, cols) * 1e-12 / (cycles as f64 * s.timings.clock_period * 1e-9);
        assert!((0.036..=0.076).contains(&watts), "{watts} W");
    }

    #[test]
    fn idle_bank_zero_energy() {
        assert_eq!(Channel::new(&spec(), 0).energy_report().total(), 0.0);
    }

    #[test]
    fn trace_lines() {
        let mut ch = Channel::new(&spec(), 0);
        ch.enable_trace();
        ch.issue(DramCommand::new(CommandKind::Act, 3, 0, 0), 7).unwrap();
        assert_eq!(ch.trace()[0].to_string(), "7 3 ACT 0");
    }

    proptest! {
        #[test]
        fn random_streams_respect_timing(ops in prop::collection::vec((0usize..4, 0u64..4096, 0u8..3, 0u64..50), 1..30)) {
            let mut ch = Channel::new(&spec(), 0);
            ch.enable_trace();
            let mut now = 0;
            let mut last_busy = vec![0u64; 16];
            for (bank, bytes, k, gap) in ops {
                let kind = [CommandKind::Mac, CommandKind::ReadoutToSram, CommandKind::WritebackFromSram][k as usize];
                now += gap;
                ch.run_stream(bank, 0, bytes, kind, now).unwrap();
                prop_assert!(ch.banks[bank].busy_until >= last_busy[bank]);
                last_busy[bank] = ch.banks[bank].busy_until;
            }
            prop_assert!(check_trace(ch.trace(), ch.timings()).is_ok());
        }

        #[test]
        fn gb_makespan_is_linear(n in 1u64..20, bytes in 1u64..5000) {
            let s = spec();
            let mut ch = Channel::new(&s, 0);
            let mut done = 0;
            for i in 0..n {
                done = ch.global_buffer_transfer((i % 16) as usize, ((i + 1) % 16) as usize, bytes, 0).unwrap();
            }
            prop_assert_eq!(done, n * gb_transfer_cycles(&s, bytes));
        }

        #[test]
        fn more_macs_more_energy(rows in 1u64..2000, cols in 1u64..64) {
            let s = spec();
            prop_assert!(gemv_energy(&s, rows * 2, cols) >= gemv_energy(&s, rows, cols));
        }
    }
}
