//! Cycle-level simulator of a hybrid DRAM-PIM / SRAM-PIM accelerator with a
//! computing network-on-chip.

pub mod config;
pub mod dram_pim;
pub mod engine;
pub mod experiments;
pub mod error;
pub mod isa;
pub mod kernels;
pub mod mapper;
pub mod noc;
pub mod numerics;
pub mod sram_pim;

pub use error::{Error, Result};
