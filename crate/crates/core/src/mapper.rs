//! Placement of one transformer layer onto the banks of a tensor-parallel
//! group: FC weight tiling, attention KV placement and non-linear work.
//!
//! Banks are numbered across the group: device-major, then channel, then
//! bank. Output-split gives every bank a column slice of the full input
//! range. Input-split groups `input_split_ways` neighbouring banks of a
//! channel; each bank in a group takes one input slice of the group's
//! columns and the group reduces partial sums over the NoC.

use serde::{Deserialize, Serialize};

use crate::config::{AttentionTarget, FcSplit, HardwareConfig, ModelConfig, RunConfig};
use crate::error::{Error, Result};
use crate::numerics::{bf16_dot, Accumulate, Bf16};

/// Tiles are padded to multiples of the MAC lane count along the input.
pub const MAC_LANES: u64 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonlinearKind {
    RmsNorm,
    Rope,
    Softmax,
    Silu,
}

impl NonlinearKind {
    pub fn name(self) -> &'static str {
        match self {
            NonlinearKind::RmsNorm => "rmsnorm",
            NonlinearKind::Rope => "rope",
            NonlinearKind::Softmax => "softmax",
            NonlinearKind::Silu => "silu",
        }
    }
}

/// One FC layer: `out = W^T x` with `W` of `in_dim x out_dim`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct FcShape {
    pub name: &'static str,
    pub in_dim: u64,
    pub out_dim: u64,
}

/// FC layers of one transformer layer in execution order.
pub fn layer_fcs(model: &ModelConfig) -> Vec<FcShape> {
    let h = model.hidden_size as u64;
    let kv = model.kv_dim() as u64;
    let f = model.ffn_intermediate as u64;
    let mut v = vec![
        FcShape { name: "q", in_dim: h, out_dim: h },
        FcShape { name: "k", in_dim: h, out_dim: kv },
        FcShape { name: "v", in_dim: h, out_dim: kv },
        FcShape { name: "o", in_dim: h, out_dim: h },
        FcShape { name: "up", in_dim: h, out_dim: f },
    ];
    if model.gated_ffn {
        v.push(FcShape { name: "gate", in_dim: h, out_dim: f });
    }
    v.push(FcShape { name: "down", in_dim: f, out_dim: h });
    v
}

/// Weight block held by one bank; half-open ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub bank: u64,
    pub in_lo: u64,
    pub in_hi: u64,
    pub out_lo: u64,
    pub out_hi: u64,
}

impl Tile {
    pub fn elements(&self) -> u64 {
        (self.in_hi - self.in_lo) * (self.out_hi - self.out_lo)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FcPlan {
    pub shape: FcShape,
    pub split: FcSplit,
    /// Banks sharing one column slice (1 for output-split).
    pub ways: u64,
    /// Largest tile, input rows padded to the MAC lanes.
    pub tile_rows: u64,
    pub tile_cols: u64,
    pub tiles: Vec<Tile>,
    /// Groups that reduce partial sums over the NoC.
    pub reduce_trees: u64,
    /// Banks receiving the broadcast input vector.
    pub broadcast_banks: u64,
}

impl FcPlan {
    pub fn weight_bytes_per_bank(&self) -> u64 {
        self.tile_rows * self.tile_cols * 2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionPlan {
    pub target: AttentionTarget,
    /// (sequence, KV head) pairs; each owns one K and one V matrix.
    pub units: u64,
    /// Query heads reading each KV head.
    pub group_size: u64,
    /// Units each channel holds, assigned round-robin.
    pub units_per_channel: u64,
    /// Channels sharing one unit when there are more channels than units.
    pub channels_per_unit: u64,
    /// Context length the plan was sized for.
    pub context: u64,
    /// Sequence positions of one unit held by a bank.
    pub positions_per_bank: u64,
    /// DRAM rows of K and V per bank, all layers of the stage.
    pub kv_rows_per_bank: u64,
}

impl AttentionPlan {
    /// Positions per bank at context length `len`.
    pub fn positions_at(&self, len: u64, banks_per_channel: u64) -> u64 {
        len.div_ceil(banks_per_channel * self.channels_per_unit)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TilePlan {
    pub banks: u64,
    pub banks_per_channel: u64,
    pub channels: u64,
    pub layers_per_stage: u64,
    pub fcs: Vec<FcPlan>,
    pub attention: AttentionPlan,
    /// Non-linear elements per generated token per sequence.
    pub nonlinear: Vec<(NonlinearKind, u64)>,
    pub weight_bytes_per_bank: u64,
    pub kv_bytes_per_bank: u64,
}

fn pad(n: u64, to: u64) -> u64 {
    n.div_ceil(to) * to
}

fn plan_fc(shape: FcShape, split: FcSplit, ways: u64, banks: u64) -> FcPlan {
    let ways = if split == FcSplit::InputSplit { ways.min(banks).max(1) } else { 1 };
    let groups = banks / ways;
    let cols = shape.out_dim.div_ceil(groups);
    let rows = shape.in_dim.div_ceil(ways);
    let mut tiles = Vec::new();
    for g in 0..groups {
        let out_lo = g * cols;
        if out_lo >= shape.out_dim {
            break;
        }
        let out_hi = (out_lo + cols).min(shape.out_dim);
        for w in 0..ways {
            let in_lo = w * rows;
            if in_lo >= shape.in_dim {
                break;
            }
            tiles.push(Tile {
                bank: g * ways + w,
                in_lo,
                in_hi: (in_lo + rows).min(shape.in_dim),
                out_lo,
                out_hi,
            });
        }
    }
    let used_groups = shape.out_dim.div_ceil(cols).min(groups);
    FcPlan {
        shape,
        split,
        ways,
        tile_rows: pad(rows, MAC_LANES),
        tile_cols: cols,
        reduce_trees: if ways > 1 { used_groups } else { 0 },
        broadcast_banks: tiles.len() as u64,
        tiles,
    }
}

/// Tile every operator of one layer across the TP group.
pub fn plan_layer(model: &ModelConfig, run: &RunConfig, hw: &HardwareConfig) -> Result<TilePlan> {
    let bpc = hw.dram.banks_per_channel as u64;
    let channels = hw.dram.channels_per_device as u64 * run.tp_degree as u64;
    let banks = channels * bpc;
    let mut ways = run.mapping.input_split_ways as u64;
    if run.mapping.fc_split == FcSplit::InputSplit && (ways == 0 || bpc % ways != 0) {
        return Err(Error::InvalidConfig {
            field: "run.mapping.input_split_ways".into(),
            reason: format!("must divide banks_per_channel = {bpc}"),
        });
    }
    ways = ways.max(1);
    let fcs: Vec<FcPlan> = layer_fcs(model).into_iter().map(|s| plan_fc(s, run.mapping.fc_split, ways, banks)).collect();

    let layers_per_stage = (model.num_layers as u64).div_ceil(run.pp_degree as u64);
    let batch = run.batch as u64;
    let context = run.prompt_len as u64 + run.gen_len as u64;
    let units = batch * model.kv_heads as u64;
    let units_per_channel = units.div_ceil(channels);
    let channels_per_unit = (channels / units).max(1);
    let positions_per_bank = context.div_ceil(bpc * channels_per_unit);
    let head_bytes = model.head_dim as u64 * 2;
    let row = hw.dram.row_width as u64;
    let rows_per_unit = (positions_per_bank * head_bytes).div_ceil(row);
    let per_channel_units = units_per_channel;
    let kv_rows_per_bank = 2 * per_channel_units * rows_per_unit * layers_per_stage;
    let attention = AttentionPlan {
        target: run.mapping.attention_target,
        units,
        group_size: model.group_size() as u64,
        units_per_channel,
        channels_per_unit,
        context,
        positions_per_bank,
        kv_rows_per_bank,
    };

    let h = model.hidden_size as u64;
    let mut nonlinear = vec![
        (NonlinearKind::RmsNorm, 2 * h),
        (NonlinearKind::Rope, (model.num_heads as u64 + model.kv_heads as u64) * model.head_dim as u64),
        (NonlinearKind::Softmax, model.num_heads as u64 * context),
    ];
    if model.gated_ffn {
        nonlinear.push((NonlinearKind::Silu, model.ffn_intermediate as u64));
    }

    let weight_bytes_per_bank = fcs.iter().map(FcPlan::weight_bytes_per_bank).sum::<u64>() * layers_per_stage;
    let kv_bytes_per_bank = kv_rows_per_bank * row;
    let required = weight_bytes_per_bank + kv_bytes_per_bank;
    let available = hw.dram.bank_capacity;
    if required > available {
        return Err(Error::Capacity {
            required,
            available,
            shortfall: required - available,
        });
    }
    Ok(TilePlan {
        banks,
        banks_per_channel: bpc,
        channels,
        layers_per_stage,
        fcs,
        attention,
        nonlinear,
        weight_bytes_per_bank,
        kv_bytes_per_bank,
    })
}

/// Mean busy fraction of the group's banks during the FC layers: useful
/// weight elements over banks times the largest padded tile.
pub fn estimate_utilization(plan: &TilePlan) -> f64 {
    let (work, capacity) = plan.fcs.iter().fold((0u64, 0u64), |(w, c), f| {
        (w + f.shape.in_dim * f.shape.out_dim, c + plan.banks * f.tile_rows * f.tile_cols)
    });
    if capacity == 0 {
        0.0
    } else {
        work as f64 / capacity as f64
    }
}

/// Evaluate an FC through its tiles: each bank dots its input slice against
/// its columns, then input-split groups combine partials by binary tree.
/// `weights` is `in_dim x out_dim`, row-major.
pub fn simulate_fc(plan: &FcPlan, weights: &[Bf16], x: &[Bf16], acc: Accumulate) -> Vec<Bf16> {
    let (n_in, n_out) = (plan.shape.in_dim as usize, plan.shape.out_dim as usize);
    assert_eq!(weights.len(), n_in * n_out);
    assert_eq!(x.len(), n_in);
    let mut partials: Vec<Vec<Bf16>> = vec![Vec::new(); n_out];
    for t in &plan.tiles {
        let xs = &x[t.in_lo as usize..t.in_hi as usize];
        for o in t.out_lo as usize..t.out_hi as usize {
            let col: Vec<Bf16> = (t.in_lo as usize..t.in_hi as usize).map(|i| weights[i * n_out + o]).collect();
            partials[o].push(bf16_dot(xs, &col, acc));
        }
    }
    partials
        .into_iter()
        .map(|mut p| {
            while p.len() > 1 {
                p = p.chunks(2).map(|c| if c.len() == 2 { c[0].add(c[1]) } else { c[0] }).collect();
            }
            p.first().copied().unwrap_or(Bf16::ZERO)
        })
        .collect()
}

/// Binary64 product of the same operands.
pub fn reference_fc(weights: &[Bf16], x: &[Bf16], out_dim: usize) -> Vec<f64> {
    (0..out_dim)
        .map(|o| x.iter().enumerate().map(|(i, xi)| xi.to_f64() * weights[i * out_dim + o].to_f64()).sum())
        .collect()
}
