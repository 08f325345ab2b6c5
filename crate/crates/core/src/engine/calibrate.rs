//! Linear cost fits for the non-linear kernels, measured by running the
//! generated programs on one channel of the cycle-level NoC model.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::config::HardwareConfig;
use crate::error::Result;
use crate::isa::exec::BankMemory;
use crate::kernels::{self, rows, KernelRun};
use crate::mapper::NonlinearKind;
use crate::noc::mesh::MeshStats;
use crate::numerics::Bf16;

/// Per-bank element counts the fits are measured at.
pub const SIZES: [u64; 2] = [8, 32];

/// `cycles(m) = fixed + per_elem * m` for `m` elements per bank.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearCost {
    pub fixed: f64,
    pub per_elem: f64,
    /// NoC energy per element across the channel, pJ.
    pub energy_per_elem: f64,
}

impl LinearCost {
    pub fn cycles(&self, m: u64) -> f64 {
        if m == 0 {
            0.0
        } else {
            (self.fixed + self.per_elem * m as f64).max(0.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub softmax: LinearCost,
    pub rmsnorm: LinearCost,
    pub silu: LinearCost,
    /// Rearrangement plus element-wise multiply for one head vector per bank.
    pub rope_cycles: u64,
    pub rope_energy: f64,
    /// Mesh counters summed over every calibration run.
    pub stats: MeshStats,
}

impl Calibration {
    pub fn linear(&self, kind: NonlinearKind) -> &LinearCost {
        match kind {
            NonlinearKind::Softmax => &self.softmax,
            NonlinearKind::RmsNorm => &self.rmsnorm,
            NonlinearKind::Silu | NonlinearKind::Rope => &self.silu,
        }
    }
}

fn add_stats(a: &mut MeshStats, b: &MeshStats) {
    a.injected += b.injected;
    a.ejected += b.ejected;
    a.absorbed += b.absorbed;
    a.hops += b.hops;
    a.alu_ops += b.alu_ops;
    a.combine_events += b.combine_events;
    a.div_by_zero += b.div_by_zero;
    a.contention_stalls += b.contention_stalls;
}

fn inputs(n: usize) -> Vec<Bf16> {
    (0..n).map(|i| Bf16::from_f32(((i % 13) as f32 - 6.0) / 8.0)).collect()
}

fn measure(kind: NonlinearKind, hw: &HardwareConfig, m: u64, stats: &mut MeshStats) -> Result<KernelRun> {
    let banks = hw.noc.mesh_y as usize;
    let n = m as usize * banks;
    let kernel = match kind {
        NonlinearKind::Softmax => kernels::softmax_kernel(hw, n, banks, Bf16::ONE)?,
        NonlinearKind::RmsNorm => kernels::rmsnorm_kernel(hw, n, banks, 1e-5)?,
        _ => kernels::silu_kernel(hw, n, banks)?,
    };
    let mut mem = BankMemory::for_hw(hw);
    kernels::scatter(&mut mem, rows::IN, banks, &inputs(n));
    kernels::scatter(&mut mem, rows::GAIN, banks, &vec![Bf16::ONE; n]);
    let run = kernels::run_kernel(&kernel, hw, mem, true)?;
    add_stats(stats, &run.stats);
    Ok(run)
}

fn fit(kind: NonlinearKind, hw: &HardwareConfig, stats: &mut MeshStats) -> Result<LinearCost> {
    let [m0, m1] = SIZES;
    let a = measure(kind, hw, m0, stats)?;
    let b = measure(kind, hw, m1, stats)?;
    let per_elem = (b.cycles as f64 - a.cycles as f64) / (m1 - m0) as f64;
    let elems = (m1 * hw.noc.mesh_y as u64) as f64;
    Ok(LinearCost {
        fixed: a.cycles as f64 - per_elem * m0 as f64,
        per_elem,
        energy_per_elem: b.energy_pj / elems,
    })
}

fn measure_all(hw: &HardwareConfig) -> Result<Calibration> {
    let mut stats = MeshStats::default();
    let softmax = fit(NonlinearKind::Softmax, hw, &mut stats)?;
    let rmsnorm = fit(NonlinearKind::RmsNorm, hw, &mut stats)?;
    let silu = fit(NonlinearKind::Silu, hw, &mut stats)?;
    let hd = 128usize.min(hw.dram.row_width as usize / 2);
    let banks = hw.noc.mesh_y as usize;
    let xs: Vec<Vec<Bf16>> = (0..banks).map(|_| inputs(hd)).collect();
    let (cos, sin) = kernels::rope_tables(hd, 1, 10000.0);
    let rope = kernels::rope_apply(hw, &xs, &cos, &sin, true)?;
    let kernel = kernels::rope_rearrange(hw, hd)?;
    let mut mem = BankMemory::for_hw(hw);
    for (b, x) in xs.iter().enumerate() {
        mem.write(b, rows::IN, 0, x);
    }
    let re = kernels::run_kernel(&kernel, hw, mem, true)?;
    add_stats(&mut stats, &re.stats);
    Ok(Calibration {
        softmax,
        rmsnorm,
        silu,
        rope_cycles: rope.rearrange_cycles + rope.ewmul_cycles,
        rope_energy: re.energy_pj / banks as f64,
        stats,
    })
}

/// Calibration for `hw`, measured once per distinct hardware description.
pub fn calibration(hw: &HardwareConfig) -> Result<Calibration> {
    static CACHE: OnceLock<Mutex<HashMap<String, Calibration>>> = OnceLock::new();
    let key = serde_json::to_string(hw).expect("hardware config serializes");
    let cache = CACHE.get_or_init(Default::default);
    if let Some(c) = cache.lock().expect("calibration cache").get(&key) {
        return Ok(c.clone());
    }
    let c = measure_all(hw)?;
    cache.lock().expect("calibration cache").insert(key, c.clone());
    Ok(c)
}
