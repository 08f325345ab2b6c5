//! Hardware, model, and run descriptors.
//!
//! A single TOML document carries three top-level tables: `[hardware]`,
//! `[model]`, and `[run]`. Every field is optional; absent fields take the
//! defaults below. Unknown keys are rejected. Scalar fields can be overridden
//! from the environment with `PIMSIM_<TABLE>__<SUBTABLE>__<FIELD>` (double
//! underscore separates path segments), e.g.
//! `PIMSIM_HARDWARE__DRAM__BANKS_PER_CHANNEL=16`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::Accumulate;

pub const ENV_PREFIX: &str = "PIMSIM_";

/// DRAM timing parameters, in nanoseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DramTimings {
    pub t_rcdwr: f64,
    pub t_rcdrd: f64,
    pub t_ras: f64,
    pub t_cl: f64,
    pub t_rp: f64,
    /// One column access per clock.
    pub clock_period: f64,
}

impl Default for DramTimings {
    fn default() -> Self {
        DramTimings {
            t_rcdwr: 14.0,
            t_rcdrd: 18.0,
            t_ras: 27.0,
            t_cl: 25.0,
            t_rp: 16.0,
            clock_period: 1.0,
        }
    }
}

/// Per-operation DRAM energy, in picojoules. Free parameters calibrated so a
/// bank running GeMV continuously dissipates 0.036-0.076 W.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DramEnergy {
    /// One activate/precharge pair.
    pub act_pj: f64,
    /// One column read access.
    pub rd_pj: f64,
    /// One column write access.
    pub wr_pj: f64,
    /// One 16-lane MAC step.
    pub mac_pj: f64,
    /// Per byte moved through the global buffer.
    pub gb_pj_per_byte: f64,
}

impl Default for DramEnergy {
    fn default() -> Self {
        DramEnergy {
            act_pj: 1000.0,
            rd_pj: 40.0,
            wr_pj: 45.0,
            mac_pj: 60.0,
            gb_pj_per_byte: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DramPimSpec {
    pub channels_per_device: u32,
    pub banks_per_channel: u32,
    pub bank_capacity: u64,
    pub macs_per_bank: u32,
    pub row_width: u32,
    /// 32 for the stock 32:1 column decoder, 128 for the decoupled 8:1 path.
    pub readout_bytes_per_access: u32,
    /// bytes/s
    pub internal_bandwidth_per_bank: f64,
    /// bytes/s; one 256-bit transfer per DRAM clock by default.
    pub global_buffer_bandwidth: f64,
    /// bytes/s between a channel and the device controller.
    pub channel_io_bandwidth: f64,
    pub timings: DramTimings,
    pub energy: DramEnergy,
}

impl Default for DramPimSpec {
    fn default() -> Self {
        DramPimSpec {
            channels_per_device: 32,
            banks_per_channel: 16,
            bank_capacity: 32 << 20,
            macs_per_bank: 16,
            row_width: 1024,
            readout_bytes_per_access: 32,
            internal_bandwidth_per_bank: 32e9,
            global_buffer_bandwidth: 32e9,
            channel_io_bandwidth: 32e9,
            timings: DramTimings::default(),
            energy: DramEnergy::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoltageMode {
    /// 0.9 V: fastest access, lowest TOPS/W.
    #[default]
    High,
    /// 0.6 V
    Low,
}

/// Aggregation of the four macros of a bank into one matrix unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum MacroLayout {
    /// 512 inputs x 8 outputs
    #[default]
    #[serde(rename = "IN512_OUT8")]
    In512Out8,
    /// 256 inputs x 16 outputs
    #[serde(rename = "IN256_OUT16")]
    In256Out16,
}

impl MacroLayout {
    pub fn inputs(self) -> usize {
        match self {
            MacroLayout::In512Out8 => 512,
            MacroLayout::In256Out16 => 256,
        }
    }

    pub fn outputs(self) -> usize {
        match self {
            MacroLayout::In512Out8 => 8,
            MacroLayout::In256Out16 => 16,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MacroLayout::In512Out8 => "IN512_OUT8",
            MacroLayout::In256Out16 => "IN256_OUT16",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SramPimSpec {
    pub macros_per_bank: u32,
    pub macro_inputs: u32,
    pub macro_outputs: u32,
    /// bits
    pub macro_capacity: u64,
    /// Access time at 0.9 V and 0.6 V, ns.
    pub access_time_high: f64,
    pub access_time_low: f64,
    /// TOPS/W at 0.9 V and 0.6 V.
    pub tops_per_watt_high: f64,
    pub tops_per_watt_low: f64,
    pub voltage_mode: VoltageMode,
    /// Explicit supply voltage in [0.6, 0.9]; overrides `voltage_mode` with a
    /// linear interpolation between the endpoints.
    pub voltage: Option<f64>,
    pub layout: MacroLayout,
}

impl Default for SramPimSpec {
    fn default() -> Self {
        SramPimSpec {
            macros_per_bank: 4,
            macro_inputs: 128,
            macro_outputs: 8,
            macro_capacity: 64 * 1024,
            access_time_high: 6.8,
            access_time_low: 14.1,
            tops_per_watt_high: 14.4,
            tops_per_watt_low: 31.6,
            voltage_mode: VoltageMode::High,
            voltage: None,
            layout: MacroLayout::In512Out8,
        }
    }
}

impl SramPimSpec {
    /// Fraction of the way from 0.9 V (0.0) to 0.6 V (1.0).
    fn low_fraction(&self) -> f64 {
        match self.voltage {
            Some(v) => ((0.9 - v) / 0.3).clamp(0.0, 1.0),
            None => match self.voltage_mode {
                VoltageMode::High => 0.0,
                VoltageMode::Low => 1.0,
            },
        }
    }

    /// Macro access time in ns.
    pub fn access_time(&self) -> f64 {
        let f = self.low_fraction();
        self.access_time_high + f * (self.access_time_low - self.access_time_high)
    }

    pub fn tops_per_watt(&self) -> f64 {
        let f = self.low_fraction();
        self.tops_per_watt_high + f * (self.tops_per_watt_low - self.tops_per_watt_high)
    }

    /// BF16 weights a bank can hold.
    pub fn resident_weights(&self) -> u64 {
        self.macros_per_bank as u64 * self.macro_capacity / 16
    }

    pub fn bank_capacity_bytes(&self) -> u64 {
        self.macros_per_bank as u64 * self.macro_capacity / 8
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BondSpec {
    pub bonds_per_bank: u32,
    pub bits_per_second_per_bond: f64,
    /// pJ/bit
    pub energy_per_bit: f64,
}

impl Default for BondSpec {
    fn default() -> Self {
        BondSpec {
            bonds_per_bank: 256,
            bits_per_second_per_bond: 6.4e9,
            energy_per_bit: 0.5,
        }
    }
}

impl BondSpec {
    /// bytes/s
    pub fn bandwidth(&self) -> f64 {
        self.bonds_per_bank as f64 * self.bits_per_second_per_bond / 8.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Routing {
    #[default]
    #[serde(rename = "DOR")]
    Dor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NocSpec {
    pub mesh_x: u32,
    pub mesh_y: u32,
    pub alus_per_router: u32,
    pub flit_bits: u32,
    pub routing: Routing,
    /// Per-hop delay when a flit cannot use the bypass path.
    pub router_delay_cycles: u32,
    pub bypass: bool,
    pub queue_depth: u32,
    /// ns
    pub clock_period: f64,
    /// Controller cycles to issue one row-level instruction.
    pub issue_cycles: u32,
    /// Waiting units the controller may look past when the oldest is
    /// blocked; 1 issues strictly in order.
    pub issue_window: u32,
    /// pJ per bit per hop
    pub energy_per_bit_hop: f64,
    /// pJ per ALU operation
    pub alu_op_energy: f64,
    /// Cycles without any flit movement before the watchdog aborts.
    pub watchdog_cycles: u64,
}

impl Default for NocSpec {
    fn default() -> Self {
        NocSpec {
            mesh_x: 4,
            mesh_y: 16,
            alus_per_router: 2,
            flit_bits: 72,
            routing: Routing::Dor,
            router_delay_cycles: 2,
            bypass: true,
            queue_depth: 4,
            clock_period: 1.0,
            issue_cycles: 1,
            issue_window: 8,
            energy_per_bit_hop: 0.10,
            alu_op_energy: 0.5,
            watchdog_cycles: 10_000,
        }
    }
}

impl NocSpec {
    pub fn routers(&self) -> usize {
        (self.mesh_x * self.mesh_y) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterconnectSpec {
    pub devices: u32,
    /// bytes/s
    pub collective_bandwidth: f64,
    /// bytes/s
    pub p2p_bandwidth: f64,
    /// ns
    pub link_latency: f64,
    /// pJ/bit
    pub energy_per_bit: f64,
}

impl Default for InterconnectSpec {
    fn default() -> Self {
        InterconnectSpec {
            devices: 32,
            collective_bandwidth: 29.44e9,
            p2p_bandwidth: 53.5e9,
            link_latency: 500.0,
            energy_per_bit: 5.0,
        }
    }
}

/// Centralized non-linear unit in the device controller; only used by the
/// DRAM-only baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NluSpec {
    /// Elements per ns for the whole device (a 16-input unit at 1 GHz).
    pub throughput: f64,
    /// Fixed pipeline latency, ns.
    pub latency: f64,
    /// pJ per element
    pub energy_per_op: f64,
}

impl Default for NluSpec {
    fn default() -> Self {
        NluSpec {
            throughput: 16.0,
            latency: 50.0,
            energy_per_op: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardwareConfig {
    pub dram: DramPimSpec,
    pub sram: SramPimSpec,
    pub bond: BondSpec,
    pub noc: NocSpec,
    pub interconnect: InterconnectSpec,
    pub nlu: NluSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AttentionKind {
    #[default]
    #[serde(rename = "MHA")]
    Mha,
    #[serde(rename = "GQA")]
    Gqa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Precision {
    #[default]
    #[serde(rename = "BF16")]
    Bf16,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub hidden_size: u32,
    pub num_layers: u32,
    pub num_heads: u32,
    pub kv_heads: u32,
    pub head_dim: u32,
    pub ffn_intermediate: u32,
    pub attention_kind: AttentionKind,
    #[serde(default)]
    pub precision: Precision,
    /// Up and Gate projections (SiLU-gated FFN); false means Up/Down only.
    #[serde(default = "default_true")]
    pub gated_ffn: bool,
}

fn default_true() -> bool {
    true
}

pub const BUILTIN_MODELS: [&str; 5] = ["llama2-7b", "llama2-13b", "llama2-70b", "qwen-72b", "gpt3-175b"];

/// Published shapes of the evaluated model families.
pub fn builtin_model(name: &str) -> Result<ModelConfig> {
    let m = |hidden, layers, heads, kv, ffn, gated| ModelConfig {
        name: name.to_string(),
        hidden_size: hidden,
        num_layers: layers,
        num_heads: heads,
        kv_heads: kv,
        head_dim: hidden / heads,
        ffn_intermediate: ffn,
        attention_kind: if kv < heads { AttentionKind::Gqa } else { AttentionKind::Mha },
        precision: Precision::Bf16,
        gated_ffn: gated,
    };
    Ok(match name {
        "llama2-7b" => m(4096, 32, 32, 32, 11008, true),
        "llama2-13b" => m(5120, 40, 40, 40, 13824, true),
        "llama2-70b" => m(8192, 80, 64, 8, 28672, true),
        "qwen-72b" => m(8192, 80, 64, 64, 24576, true),
        "gpt3-175b" => m(12288, 96, 96, 96, 49152, false),
        _ => {
            return Err(Error::UnknownModel {
                name: name.to_string(),
                available: BUILTIN_MODELS.join(", "),
            })
        }
    })
}

impl ModelConfig {
    pub fn group_size(&self) -> u32 {
        self.num_heads / self.kv_heads
    }

    pub fn kv_dim(&self) -> u32 {
        self.kv_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        for (f, v) in [
            ("model.hidden_size", self.hidden_size),
            ("model.num_layers", self.num_layers),
            ("model.num_heads", self.num_heads),
            ("model.kv_heads", self.kv_heads),
            ("model.head_dim", self.head_dim),
            ("model.ffn_intermediate", self.ffn_intermediate),
        ] {
            if v == 0 {
                return Err(invalid(f, "must be >= 1"));
            }
        }
        if self.hidden_size != self.num_heads * self.head_dim {
            return Err(invalid(
                "model.hidden_size",
                format!("must equal num_heads x head_dim = {}", self.num_heads * self.head_dim),
            ));
        }
        if self.num_heads % self.kv_heads != 0 {
            return Err(invalid("model.kv_heads", "must divide num_heads"));
        }
        let gqa = self.kv_heads < self.num_heads;
        if gqa != (self.attention_kind == AttentionKind::Gqa) {
            return Err(invalid(
                "model.attention_kind",
                "must be GQA exactly when kv_heads < num_heads",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prefill,
    #[default]
    Decode,
    /// Prefill followed by decode.
    Full,
}

impl Phase {
    pub fn has_prefill(self) -> bool {
        matches!(self, Phase::Prefill | Phase::Full)
    }

    pub fn has_decode(self) -> bool {
        matches!(self, Phase::Decode | Phase::Full)
    }
}

/// Architecture ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum ArchVariant {
    /// DRAM-PIM only, centralized non-linear unit.
    #[serde(rename = "DRAM_ONLY")]
    DramOnly,
    /// DRAM-PIM with router ALUs for non-linear work and collectives.
    #[serde(rename = "DRAM_PLUS_CURRY")]
    DramPlusCurry,
    /// Adds SRAM-PIM with the stock column decoder.
    #[serde(rename = "HYBRID_BASE")]
    HybridBase,
    /// Adds the decoupled column decoder.
    #[default]
    #[serde(rename = "HYBRID_OPT")]
    HybridOpt,
}

impl ArchVariant {
    pub const ALL: [ArchVariant; 4] = [
        ArchVariant::DramOnly,
        ArchVariant::DramPlusCurry,
        ArchVariant::HybridBase,
        ArchVariant::HybridOpt,
    ];

    pub fn uses_sram(self) -> bool {
        matches!(self, ArchVariant::HybridBase | ArchVariant::HybridOpt)
    }

    pub fn uses_curry(self) -> bool {
        !matches!(self, ArchVariant::DramOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            ArchVariant::DramOnly => "DRAM_ONLY",
            ArchVariant::DramPlusCurry => "DRAM_PLUS_CURRY",
            ArchVariant::HybridBase => "HYBRID_BASE",
            ArchVariant::HybridOpt => "HYBRID_OPT",
        }
    }

    pub fn parse(s: &str) -> Option<ArchVariant> {
        ArchVariant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FcSplit {
    #[default]
    OutputSplit,
    InputSplit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FcTarget {
    Dram,
    Sram,
    /// Per operator, whichever of DRAM-PIM and SRAM-PIM is faster.
    #[default]
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionTarget {
    #[default]
    Dram,
    SramGqa,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingPolicy {
    pub fc_split: FcSplit,
    pub sram_layout: MacroLayout,
    pub fc_target: FcTarget,
    pub attention_target: AttentionTarget,
    /// Ways the input dimension is split under `input_split`.
    pub input_split_ways: u32,
}

impl Default for MappingPolicy {
    fn default() -> Self {
        MappingPolicy {
            fc_split: FcSplit::OutputSplit,
            sram_layout: MacroLayout::In512Out8,
            fc_target: FcTarget::Auto,
            attention_target: AttentionTarget::Dram,
            input_split_ways: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub batch: u32,
    pub prompt_len: u32,
    pub gen_len: u32,
    pub phase: Phase,
    pub tp_degree: u32,
    pub pp_degree: u32,
    pub mapping: MappingPolicy,
    pub arch_variant: ArchVariant,
    /// Decode tokens simulated individually before linear extrapolation.
    pub decode_window: u32,
    pub accumulate: Accumulate,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            batch: 1,
            prompt_len: 512,
            gen_len: 64,
            phase: Phase::Decode,
            tp_degree: 1,
            pp_degree: 1,
            mapping: MappingPolicy::default(),
            arch_variant: ArchVariant::HybridOpt,
            decode_window: 64,
            accumulate: Accumulate::F32,
            seed: 0,
        }
    }
}

/// Model table as written in a document: optionally starts from a builtin.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelSection {
    builtin: Option<String>,
    name: Option<String>,
    hidden_size: Option<u32>,
    num_layers: Option<u32>,
    num_heads: Option<u32>,
    kv_heads: Option<u32>,
    head_dim: Option<u32>,
    ffn_intermediate: Option<u32>,
    attention_kind: Option<AttentionKind>,
    precision: Option<Precision>,
    gated_ffn: Option<bool>,
}

impl ModelSection {
    fn resolve(self) -> Result<ModelConfig> {
        let base = builtin_model(self.builtin.as_deref().unwrap_or("llama2-7b"))?;
        let hidden_size = self.hidden_size.unwrap_or(base.hidden_size);
        let num_heads = self.num_heads.unwrap_or(base.num_heads);
        let kv_heads = self.kv_heads.unwrap_or(if self.num_heads.is_some() {
            num_heads
        } else {
            base.kv_heads
        });
        let head_dim = self.head_dim.unwrap_or(if self.hidden_size.is_some() && self.num_heads.is_some() {
            hidden_size / num_heads.max(1)
        } else {
            base.head_dim
        });
        let attention_kind = self.attention_kind.unwrap_or(if kv_heads < num_heads {
            AttentionKind::Gqa
        } else {
            AttentionKind::Mha
        });
        Ok(ModelConfig {
            name: self.name.unwrap_or(base.name),
            hidden_size,
            num_layers: self.num_layers.unwrap_or(base.num_layers),
            num_heads,
            kv_heads,
            head_dim,
            ffn_intermediate: self.ffn_intermediate.unwrap_or(base.ffn_intermediate),
            attention_kind,
            precision: self.precision.unwrap_or(base.precision),
            gated_ffn: self.gated_ffn.unwrap_or(base.gated_ffn),
        })
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Document {
    hardware: HardwareConfig,
    model: ModelSection,
    run: RunConfig,
}

/// Everything a simulation needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub hardware: HardwareConfig,
    pub model: ModelConfig,
    pub run: RunConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            hardware: HardwareConfig::default(),
            model: builtin_model("llama2-7b").expect("builtin"),
            run: RunConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.hardware.validate()?;
        self.model.validate()?;
        self.run.validate(&self.hardware, &self.model)
    }

    /// Serialize to the config document format; `load_config` parses it back
    /// to an equal structure.
    pub fn to_toml(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            hardware: &'a HardwareConfig,
            model: &'a ModelConfig,
            run: &'a RunConfig,
        }
        toml::to_string(&Out {
            hardware: &self.hardware,
            model: &self.model,
            run: &self.run,
        })
        .expect("config serializes")
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(field, format!("must be > 0 (got {v})")))
    }
}

fn in_range(field: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
    if v >= lo && v <= hi {
        Ok(())
    } else {
        Err(invalid(field, format!("must be within [{lo}, {hi}] (got {v})")))
    }
}

impl HardwareConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.dram.timings;
        for (f, v) in [
            ("hardware.dram.timings.t_rcdwr", t.t_rcdwr),
            ("hardware.dram.timings.t_rcdrd", t.t_rcdrd),
            ("hardware.dram.timings.t_ras", t.t_ras),
            ("hardware.dram.timings.t_cl", t.t_cl),
            ("hardware.dram.timings.t_rp", t.t_rp),
            ("hardware.dram.timings.clock_period", t.clock_period),
            ("hardware.dram.internal_bandwidth_per_bank", self.dram.internal_bandwidth_per_bank),
            ("hardware.dram.global_buffer_bandwidth", self.dram.global_buffer_bandwidth),
            ("hardware.dram.channel_io_bandwidth", self.dram.channel_io_bandwidth),
            ("hardware.noc.clock_period", self.noc.clock_period),
            ("hardware.bond.bits_per_second_per_bond", self.bond.bits_per_second_per_bond),
            ("hardware.interconnect.collective_bandwidth", self.interconnect.collective_bandwidth),
            ("hardware.interconnect.p2p_bandwidth", self.interconnect.p2p_bandwidth),
            ("hardware.nlu.throughput", self.nlu.throughput),
        ] {
            positive(f, v)?;
        }
        let e = &self.dram.energy;
        for (f, v) in [
            ("hardware.dram.energy.act_pj", e.act_pj),
            ("hardware.dram.energy.rd_pj", e.rd_pj),
            ("hardware.dram.energy.wr_pj", e.wr_pj),
            ("hardware.dram.energy.mac_pj", e.mac_pj),
            ("hardware.dram.energy.gb_pj_per_byte", e.gb_pj_per_byte),
            ("hardware.noc.energy_per_bit_hop", self.noc.energy_per_bit_hop),
            ("hardware.noc.alu_op_energy", self.noc.alu_op_energy),
            ("hardware.interconnect.link_latency", self.interconnect.link_latency),
            ("hardware.interconnect.energy_per_bit", self.interconnect.energy_per_bit),
            ("hardware.nlu.latency", self.nlu.latency),
            ("hardware.nlu.energy_per_op", self.nlu.energy_per_op),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(f, format!("must be >= 0 (got {v})")));
            }
        }
        let d = &self.dram;
        if d.channels_per_device == 0 {
            return Err(invalid("hardware.dram.channels_per_device", "must be >= 1"));
        }
        if !matches!(d.readout_bytes_per_access, 32 | 128) {
            return Err(invalid(
                "hardware.dram.readout_bytes_per_access",
                format!("must be 32 or 128 (got {})", d.readout_bytes_per_access),
            ));
        }
        if d.bank_capacity == 0 {
            return Err(invalid("hardware.dram.bank_capacity", "must be >= 1"));
        }
        if d.macs_per_bank == 0 {
            return Err(invalid("hardware.dram.macs_per_bank", "must be >= 1"));
        }
        if d.row_width < d.readout_bytes_per_access || d.row_width % d.readout_bytes_per_access != 0 {
            return Err(invalid(
                "hardware.dram.row_width",
                "must be a multiple of readout_bytes_per_access",
            ));
        }
        let s = &self.sram;
        if s.macros_per_bank != 4 {
            return Err(invalid("hardware.sram.macros_per_bank", "layouts aggregate exactly 4 macros"));
        }
        if s.macro_inputs == 0 || s.macro_outputs == 0 || s.macro_capacity == 0 {
            return Err(invalid("hardware.sram.macro_inputs", "macro shape must be non-empty"));
        }
        if s.macro_capacity < (s.macro_inputs * s.macro_outputs * 16) as u64 {
            return Err(invalid("hardware.sram.macro_capacity", "must hold one input x output tile"));
        }
        in_range("hardware.sram.access_time_high", s.access_time_high, 6.8, 14.1)?;
        in_range("hardware.sram.access_time_low", s.access_time_low, 6.8, 14.1)?;
        in_range("hardware.sram.tops_per_watt_high", s.tops_per_watt_high, 14.4, 31.6)?;
        in_range("hardware.sram.tops_per_watt_low", s.tops_per_watt_low, 14.4, 31.6)?;
        if let Some(v) = s.voltage {
            in_range("hardware.sram.voltage", v, 0.6, 0.9)?;
        }
        if self.bond.bonds_per_bank == 0 {
            return Err(invalid("hardware.bond.bonds_per_bank", "must be >= 1"));
        }
        in_range("hardware.bond.energy_per_bit", self.bond.energy_per_bit, 0.05, 0.88)?;
        let n = &self.noc;
        if n.mesh_x == 0 || n.mesh_y == 0 || n.mesh_x > 16 || n.mesh_y > 16 {
            return Err(invalid("hardware.noc.mesh_x", "mesh dimensions must be within [1, 16]"));
        }
        if n.mesh_x * n.mesh_y != 64 {
            return Err(invalid(
                "hardware.noc.mesh_y",
                format!("mesh_x x mesh_y must be 64 routers (got {})", n.mesh_x * n.mesh_y),
            ));
        }
        if n.mesh_y != d.banks_per_channel {
            return Err(invalid(
                "hardware.dram.banks_per_channel",
                format!("must equal noc.mesh_y = {} (one mesh row per bank)", n.mesh_y),
            ));
        }
        if n.flit_bits != 72 {
            return Err(invalid(
                "hardware.noc.flit_bits",
                format!("must be 72 so one packet fits one flit (got {})", n.flit_bits),
            ));
        }
        if !(1..=2).contains(&n.router_delay_cycles) {
            return Err(invalid("hardware.noc.router_delay_cycles", "must be 1 or 2"));
        }
        if !(1..=2).contains(&n.alus_per_router) {
            return Err(invalid("hardware.noc.alus_per_router", "must be 1 or 2"));
        }
        if n.queue_depth == 0 {
            return Err(invalid("hardware.noc.queue_depth", "must be >= 1"));
        }
        if n.watchdog_cycles == 0 {
            return Err(invalid("hardware.noc.watchdog_cycles", "must be >= 1"));
        }
        if self.interconnect.devices == 0 {
            return Err(invalid("hardware.interconnect.devices", "must be >= 1"));
        }
        Ok(())
    }

    pub fn routers_per_bank(&self) -> usize {
        self.noc.mesh_x as usize
    }

    pub fn banks_per_channel(&self) -> usize {
        self.dram.banks_per_channel as usize
    }
}

impl RunConfig {
    pub fn validate(&self, hw: &HardwareConfig, model: &ModelConfig) -> Result<()> {
        for (f, v) in [
            ("run.batch", self.batch),
            ("run.prompt_len", self.prompt_len),
            ("run.tp_degree", self.tp_degree),
            ("run.pp_degree", self.pp_degree),
            ("run.decode_window", self.decode_window),
            ("run.mapping.input_split_ways", self.mapping.input_split_ways),
        ] {
            if v == 0 {
                return Err(invalid(f, "must be >= 1"));
            }
        }
        if self.tp_degree * self.pp_degree > hw.interconnect.devices {
            return Err(invalid(
                "run.tp_degree",
                format!(
                    "tp_degree x pp_degree = {} exceeds {} devices",
                    self.tp_degree * self.pp_degree,
                    hw.interconnect.devices
                ),
            ));
        }
        if self.pp_degree > model.num_layers {
            return Err(invalid("run.pp_degree", "more pipeline stages than layers"));
        }
        if self.mapping.attention_target == AttentionTarget::SramGqa {
            if model.attention_kind != AttentionKind::Gqa {
                return Err(invalid("run.mapping.attention_target", "sram_gqa requires a GQA model"));
            }
            if !self.arch_variant.uses_sram() {
                return Err(invalid("run.mapping.attention_target", "sram_gqa requires an SRAM-PIM variant"));
            }
        }
        if self.mapping.fc_split == FcSplit::InputSplit && !self.arch_variant.uses_curry() {
            return Err(invalid("run.mapping.fc_split", "input_split requires NoC reduce support"));
        }
        Ok(())
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map(|i| i + 1).unwrap_or(0) + 1;
    (line, column)
}

fn parse_error(text: &str, err: toml::de::Error) -> Error {
    let (line, column) = err.span().map(|s| line_col(text, s.start)).unwrap_or((0, 0));
    Error::ConfigParse {
        line,
        column,
        message: err.message().to_string(),
    }
}

fn parse_document(text: &str, overrides: &[(String, String)]) -> Result<SimConfig> {
    let doc: Document = if overrides.is_empty() {
        toml::from_str(text).map_err(|e| parse_error(text, e))?
    } else {
        let mut value: toml::Table = text.parse().map_err(|e| parse_error(text, e))?;
        for (key, raw) in overrides {
            apply_override(&mut value, key, raw)?;
        }
        Document::deserialize(toml::Value::Table(value)).map_err(|e| Error::ConfigParse {
            line: 0,
            column: 0,
            message: format!("after environment overrides: {}", e.message()),
        })?
    };
    let cfg = SimConfig {
        hardware: doc.hardware,
        model: doc.model.resolve()?,
        run: doc.run,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Parse a config document, fill defaults, and validate.
pub fn load_config(text: &str) -> Result<SimConfig> {
    parse_document(text, &[])
}

/// Like [`load_config`], then applies `PIMSIM_*` overrides from `vars`.
pub fn load_config_with_env<I>(text: &str, vars: I) -> Result<SimConfig>
where
    I: IntoIterator<Item = (String, String)>,
{
    let overrides: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|p| (p.to_ascii_lowercase(), v)))
        .collect();
    parse_document(text, &overrides)
}

/// Load a config file applying overrides from the process environment.
pub fn load_config_file(path: &std::path::Path) -> Result<SimConfig> {
    let text = std::fs::read_to_string(path)?;
    load_config_with_env(&text, std::env::vars())
}

fn apply_override(root: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split("__").collect();
    let (last, path) = parts.split_last().expect("split yields one element");
    let mut table = root;
    for p in path {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| invalid(key, "override path crosses a scalar"))?;
    }
    let value = parse_scalar(raw);
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_scalar(raw: &str) -> toml::Value {
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    match raw {
        "true" => toml::Value::Boolean(true),
        "false" => toml::Value::Boolean(false),
        _ => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_document_fills_defaults() {
        let cfg = load_config("").unwrap();
        assert_eq!(cfg.hardware.dram.timings.t_rcdrd, 18.0);
        assert_eq!(cfg.hardware.dram.timings.t_rcdwr, 14.0);
        assert_eq!(cfg.hardware.dram.timings.t_ras, 27.0);
        assert_eq!(cfg.hardware.dram.timings.t_cl, 25.0);
        assert_eq!(cfg.hardware.dram.timings.t_rp, 16.0);
        assert_eq!(cfg.hardware.dram.banks_per_channel, 16);
        assert_eq!(cfg.hardware.dram.channels_per_device, 32);
        assert_eq!(cfg.hardware.dram.bank_capacity, 32 << 20);
        assert_eq!(cfg.hardware.dram.macs_per_bank, 16);
        assert_eq!(cfg.hardware.sram.bank_capacity_bytes(), 32 * 1024);
        assert_eq!(cfg.hardware.noc.flit_bits, 72);
        assert_eq!(cfg.hardware.bond.bandwidth(), 256.0 * 6.4e9 / 8.0);
    }

    #[test]
    fn mesh_4x16_accepted() {
        let cfg = load_config("[hardware.noc]\nmesh_x = 4\nmesh_y = 16\n").unwrap();
        assert_eq!(cfg.hardware.noc.routers(), 64);
    }

    #[test]
    fn narrow_flit_rejected() {
        let err = load_config("[hardware.noc]\nflit_bits = 64\n").unwrap_err();
        assert!(err.to_string().contains("flit_bits"), "{err}");
    }

    #[test]
    fn unknown_key_rejected_with_position() {
        let err = load_config("[hardware.dram]\nbanks_per_chanel = 16\n").unwrap_err();
        match err {
            Error::ConfigParse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn syntax_error_has_line() {
        let err = load_config("[run]\nbatch = = 3\n").unwrap_err();
        assert!(matches!(err, Error::ConfigParse { line: 2, .. }), "{err}");
    }

    #[test]
    fn builtin_shapes() {
        assert_eq!(builtin_model("llama2-13b").unwrap().hidden_size, 5120);
        let m70 = builtin_model("llama2-70b").unwrap();
        assert_eq!(m70.attention_kind, AttentionKind::Gqa);
        assert_eq!(m70.group_size(), 8);
        assert_eq!(builtin_model("llama2-7b").unwrap().head_dim, 4096 / 32);
        for name in BUILTIN_MODELS {
            builtin_model(name).unwrap().validate().unwrap();
        }
        let err = builtin_model("bert").unwrap_err().to_string();
        assert!(err.contains("llama2-7b") && err.contains("gpt3-175b"));
    }

    #[test]
    fn model_overrides_on_builtin() {
        let cfg = load_config("[model]\nbuiltin = \"llama2-13b\"\nnum_layers = 1\n").unwrap();
        assert_eq!(cfg.model.hidden_size, 5120);
        assert_eq!(cfg.model.num_layers, 1);
    }

    #[test]
    fn env_overrides_scalars() {
        let cfg = load_config_with_env(
            "",
            vec![
                ("PIMSIM_RUN__BATCH".to_string(), "32".to_string()),
                ("PIMSIM_HARDWARE__DRAM__READOUT_BYTES_PER_ACCESS".to_string(), "128".to_string()),
                ("PIMSIM_RUN__ARCH_VARIANT".to_string(), "DRAM_ONLY".to_string()),
                ("UNRELATED".to_string(), "1".to_string()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.run.batch, 32);
        assert_eq!(cfg.hardware.dram.readout_bytes_per_access, 128);
        assert_eq!(cfg.run.arch_variant, ArchVariant::DramOnly);
    }

    #[test]
    fn cross_field_invariants() {
        assert!(load_config("[run]\ntp_degree = 8\npp_degree = 8\n").is_err());
        assert!(load_config("[run.mapping]\nattention_target = \"sram_gqa\"\n").is_err());
        assert!(load_config(
            "[model]\nbuiltin = \"llama2-70b\"\n[run.mapping]\nattention_target = \"sram_gqa\"\n"
        )
        .is_ok());
        assert!(load_config("[run]\narch_variant = \"DRAM_ONLY\"\n[run.mapping]\nfc_split = \"input_split\"\n").is_err());
        assert!(load_config("[model]\nhidden_size = 4000\n").is_err());
        assert!(load_config("[hardware.dram]\nbanks_per_channel = 8\n").is_err());
    }

    #[test]
    fn voltage_interpolation_is_linear() {
        let mut s = SramPimSpec::default();
        assert_eq!(s.access_time(), 6.8);
        s.voltage_mode = VoltageMode::Low;
        assert_eq!(s.access_time(), 14.1);
        s.voltage = Some(0.75);
        assert!((s.access_time() - (6.8 + 14.1) / 2.0).abs() < 1e-12);
        assert!((s.tops_per_watt() - (14.4 + 31.6) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn roundtrip_default_and_custom() {
        let cfg = load_config("[model]\nbuiltin = \"llama2-70b\"\n[run]\nbatch = 7\n").unwrap();
        let back = load_config(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
    }

    fn field_case() -> impl Strategy<Value = (&'static str, String)> {
        prop_oneof![
            (0.05f64..0.88).prop_map(|v| ("[hardware.bond]\nenergy_per_bit", format!("{}", v + 1.0))),
            (0.0f64..0.049).prop_map(|v| ("[hardware.bond]\nenergy_per_bit", format!("{v}"))),
            (14.2f64..100.0).prop_map(|v| ("[hardware.sram]\naccess_time_low", format!("{v}"))),
            (0.0f64..6.79).prop_map(|v| ("[hardware.sram]\naccess_time_high", format!("{v}"))),
            (3u32..100).prop_map(|v| ("[hardware.noc]\nrouter_delay_cycles", format!("{v}"))),
            (0u32..512).prop_filter("not 32/128", |v| *v != 32 && *v != 128)
                .prop_map(|v| ("[hardware.dram]\nreadout_bytes_per_access", format!("{v}"))),
            (0u32..200).prop_filter("not 72", |v| *v != 72)
                .prop_map(|v| ("[hardware.noc]\nflit_bits", format!("{v}"))),
            (-100.0f64..0.0).prop_map(|v| ("[hardware.dram.timings]\nt_rp", format!("{v}"))),
            (0.91f64..2.0).prop_map(|v| ("[hardware.sram]\nvoltage", format!("{v}"))),
        ]
    }

    proptest! {
        #[test]
        fn out_of_range_values_rejected((key, val) in field_case()) {
            let doc = format!("{key} = {val}\n");
            prop_assert!(load_config(&doc).is_err(), "accepted {}", doc);
        }

        #[test]
        fn roundtrip_random_runs(batch in 1u32..512, prompt in 1u32..100_000, gen in 0u32..4096,
                                 tp in 1u32..5, readout in prop::sample::select(vec![32u32, 128])) {
            let doc = format!("[hardware.dram]\nreadout_bytes_per_access = {readout}\n[run]\nbatch = {batch}\nprompt_len = {prompt}\ngen_len = {gen}\ntp_degree = {tp}\n");
            let cfg = load_config(&doc).unwrap();
            prop_assert_eq!(load_config(&cfg.to_toml()).unwrap(), cfg);
        }
    }
}
