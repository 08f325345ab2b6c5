//! Reduce and broadcast trees over the banks of one channel.
//!
//! Participating banks are ranked starting from the root and rotating
//! upwards through the sorted bank list. Reduction runs in levels with
//! strides 1, 2, 4, 8: at stride `s`, rank `r` with `r % 2s == s` sends its
//! ArgReg to rank `r - s`, which computes `sent <op> own` into its ArgReg.
//! Broadcast replays the levels in reverse. Element `j` of a vector travels
//! on lane `j % mesh_x`, so up to four trees run side by side.

use serde::{Deserialize, Serialize};

use crate::config::NocSpec;
use crate::error::{Error, Result};
use crate::isa::packet::{Packet, PacketType, PathStep, RegSelect};
use crate::noc::mesh::{Coord, FlitSpec, Mesh, MeshStats};
use crate::numerics::{bf16_binop, Bf16, BinOp};

/// Banks in rank order: the root first, then the following banks cyclically.
pub fn rank_order(banks: &[usize], root: usize) -> Result<Vec<usize>> {
    let mut sorted = banks.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let pos = sorted
        .iter()
        .position(|&b| b == root)
        .ok_or_else(|| Error::Collective(format!("root bank {root} is not a participant")))?;
    sorted.rotate_left(pos);
    Ok(sorted)
}

/// Reduction levels as `(sender_rank, receiver_rank)` pairs.
pub fn tree_levels(k: usize) -> Vec<Vec<(usize, usize)>> {
    let mut levels = Vec::new();
    let mut s = 1;
    while s < k {
        let level: Vec<_> = (0..k).filter(|r| r % (2 * s) == s).map(|r| (r, r - s)).collect();
        levels.push(level);
        s *= 2;
    }
    levels
}

/// Value the tree produces at the root for `values` given in rank order.
pub fn tree_reduce_oracle(values: &[Bf16], op: BinOp) -> Bf16 {
    let mut regs = values.to_vec();
    for level in tree_levels(values.len()) {
        for (s, r) in level {
            regs[r] = bf16_binop(op, regs[s], regs[r]);
        }
    }
    regs[0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReduceOutcome {
    pub cycles: u64,
    pub values: Vec<Bf16>,
    pub combines: u64,
    pub stats: MeshStats,
    pub energy_pj: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BroadcastOutcome {
    pub cycles: u64,
    /// (bank, received vector) for every participant, in bank order.
    pub delivered: Vec<(usize, Vec<Bf16>)>,
    pub hops: u64,
    pub stats: MeshStats,
    pub energy_pj: f64,
}

fn check_banks(spec: &NocSpec, banks: &[usize]) -> Result<()> {
    if banks.is_empty() {
        return Err(Error::Collective("empty bank mask".into()));
    }
    if let Some(b) = banks.iter().find(|&&b| b >= spec.mesh_y as usize) {
        return Err(Error::Collective(format!("bank {b} outside the {}-bank channel", spec.mesh_y)));
    }
    Ok(())
}

fn coord(lane: usize, bank: usize) -> Coord {
    Coord::new(lane as u8, bank as u8)
}

/// Reduce `values[i]` (the vector held by `banks[i]`) into `dst_bank`.
pub fn collective_reduce(spec: &NocSpec, banks: &[usize], op: BinOp, dst_bank: usize, values: &[Vec<Bf16>]) -> Result<ReduceOutcome> {
    check_banks(spec, banks)?;
    if values.len() != banks.len() {
        return Err(Error::Collective("one vector per participating bank required".into()));
    }
    let len = values[0].len();
    if values.iter().any(|v| v.len() != len) {
        return Err(Error::Collective("vectors differ in length".into()));
    }
    let order = rank_order(banks, dst_bank)?;
    let by_bank = |b: usize| &values[banks.iter().position(|&x| x == b).expect("participant")];
    let lanes = spec.mesh_x as usize;
    let levels = tree_levels(order.len());
    let mut mesh = Mesh::new(spec);
    let mut result = Vec::with_capacity(len);
    for start in (0..len).step_by(lanes) {
        let elems: Vec<usize> = (start..len.min(start + lanes)).collect();
        let mut ids = Vec::new();
        let t = mesh.now();
        for &e in &elems {
            let lane = e % lanes;
            for &b in &order {
                let step = PathStep::new(lane as u8, b as u8, BinOp::from_code(RegSelect::ArgReg.code()));
                let p = Packet::new(PacketType::Write, by_bank(b)[e], 0, &[step])?;
                ids.push(mesh.inject(FlitSpec::new(p, coord(lane, b), t))?);
            }
        }
        let mut t = mesh.run_until_done(&ids)?;
        for level in &levels {
            ids.clear();
            for &e in &elems {
                let lane = e % lanes;
                for &(s, r) in level {
                    let step = PathStep::new(lane as u8, order[r] as u8, op).with_flags(true, false);
                    let p = Packet::new(PacketType::Reduce, Bf16::ZERO, 0, &[step])?;
                    ids.push(mesh.inject(FlitSpec::new(p, coord(lane, order[s]), t).load_reg(0))?);
                }
            }
            t = mesh.run_until_done(&ids)?;
        }
        ids.clear();
        for &e in &elems {
            let lane = e % lanes;
            let p = Packet::new(PacketType::Read, Bf16::ZERO, 0, &[PathStep::idle(lane as u8, dst_bank as u8)])?;
            ids.push(mesh.inject(FlitSpec::new(p, coord(lane, dst_bank), t).tag(e as u64))?);
        }
        mesh.run_until_done(&ids)?;
        let mut got: Vec<_> = mesh.drain_deliveries().into_iter().filter(|d| !d.absorbed).collect();
        got.sort_by_key(|d| d.tag);
        result.extend(got.iter().map(|d| d.data));
    }
    let stats = mesh.stats();
    Ok(ReduceOutcome {
        cycles: mesh.now(),
        values: result,
        combines: stats.combine_events,
        stats,
        energy_pj: mesh.energy(),
    })
}

/// Broadcast `values` from `src_bank` to every bank in `banks`.
pub fn collective_broadcast(spec: &NocSpec, src_bank: usize, banks: &[usize], values: &[Bf16]) -> Result<BroadcastOutcome> {
    check_banks(spec, banks)?;
    let mut all = banks.to_vec();
    all.push(src_bank);
    let order = rank_order(&all, src_bank)?;
    let lanes = spec.mesh_x as usize;
    let levels = tree_levels(order.len());
    let mut mesh = Mesh::new(spec);
    let mut held: Vec<Vec<Option<Bf16>>> = vec![vec![None; values.len()]; order.len()];
    held[0] = values.iter().copied().map(Some).collect();
    for start in (0..values.len()).step_by(lanes) {
        let elems: Vec<usize> = (start..values.len().min(start + lanes)).collect();
        let mut t = mesh.now();
        for level in levels.iter().rev() {
            let mut ids = Vec::new();
            for &e in &elems {
                let lane = e % lanes;
                for &(s, r) in level {
                    let data = held[r][e].expect("sender holds the value");
                    let p = Packet::new(PacketType::Broadcast, data, 0, &[PathStep::idle(lane as u8, order[s] as u8)])?;
                    let tag = (s * values.len() + e) as u64;
                    ids.push(mesh.inject(FlitSpec::new(p, coord(lane, order[r]), t).tag(tag))?);
                }
            }
            t = mesh.run_until_done(&ids)?;
            for d in mesh.drain_deliveries() {
                let (s, e) = (d.tag as usize / values.len(), d.tag as usize % values.len());
                held[s][e] = Some(d.data);
            }
        }
    }
    let mut delivered: Vec<(usize, Vec<Bf16>)> = order
        .iter()
        .zip(&held)
        .filter(|(b, _)| banks.contains(b))
        .map(|(&b, v)| (b, v.iter().map(|x| x.expect("every participant reached")).collect()))
        .collect();
    delivered.sort_by_key(|(b, _)| *b);
    let stats = mesh.stats();
    Ok(BroadcastOutcome {
        cycles: mesh.now(),
        delivered,
        hops: stats.hops,
        stats,
        energy_pj: mesh.energy(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec() -> NocSpec {
        NocSpec::default()
    }

    fn b(v: f64) -> Bf16 {
        Bf16::from_f64(v)
    }

    #[test]
    fn sixteen_bank_reduce_has_fifteen_combines() {
        let banks: Vec<usize> = (0..16).collect();
        let vals: Vec<Vec<Bf16>> = (0..16).map(|i| vec![b(0.1 * i as f64 + 0.3)]).collect();
        let out = collective_reduce(&spec(), &banks, BinOp::Add, 0, &vals).unwrap();
        assert_eq!(out.combines, 15);
        let ranked: Vec<Bf16> = vals.iter().map(|v| v[0]).collect();
        assert_eq!(out.values[0], tree_reduce_oracle(&ranked, BinOp::Add));
    }

    #[test]
    fn eight_ones_sum_to_eight() {
        let banks: Vec<usize> = (4..12).collect();
        let vals = vec![vec![Bf16::ONE]; 8];
        let out = collective_reduce(&spec(), &banks, BinOp::Add, 7, &vals).unwrap();
        assert_eq!(out.values[0].to_f64(), 8.0);
        assert_eq!(out.combines, 7);
    }

    #[test]
    fn single_bank_passthrough() {
        let out = collective_reduce(&spec(), &[5], BinOp::Add, 5, &[vec![b(2.5)]]).unwrap();
        assert_eq!(out.values[0].to_f64(), 2.5);
        assert_eq!(out.combines, 0);
    }

    #[test]
    fn empty_mask_rejected() {
        assert!(collective_reduce(&spec(), &[], BinOp::Add, 0, &[]).is_err());
        assert!(collective_broadcast(&spec(), 0, &[], &[Bf16::ONE]).is_err());
        assert!(collective_reduce(&spec(), &[1, 2], BinOp::Add, 3, &[vec![Bf16::ONE], vec![Bf16::ONE]]).is_err());
    }

    #[test]
    fn four_lane_vector_runs_parallel_trees() {
        let banks: Vec<usize> = (0..16).collect();
        let vals: Vec<Vec<Bf16>> = (0..16).map(|i| (0..4).map(|j| b((i * 4 + j) as f64)).collect()).collect();
        let out = collective_reduce(&spec(), &banks, BinOp::Add, 3, &vals).unwrap();
        assert_eq!(out.combines, 60);
        let order = rank_order(&banks, 3).unwrap();
        for j in 0..4 {
            let ranked: Vec<Bf16> = order.iter().map(|&bk| vals[bk][j]).collect();
            assert_eq!(out.values[j], tree_reduce_oracle(&ranked, BinOp::Add));
        }
        let scalar = collective_reduce(&spec(), &banks, BinOp::Add, 3, &vals.iter().map(|v| vec![v[0]]).collect::<Vec<_>>()).unwrap();
        assert_eq!(out.cycles, scalar.cycles);
    }

    #[test]
    fn broadcast_reaches_everyone() {
        let banks: Vec<usize> = (0..16).collect();
        let v = vec![b(1.5), b(-2.0), b(3.25)];
        let out = collective_broadcast(&spec(), 9, &banks, &v).unwrap();
        assert_eq!(out.delivered.len(), 16);
        for (_, got) in &out.delivered {
            assert_eq!(got, &v);
        }
        let selfonly = collective_broadcast(&spec(), 4, &[4], &v).unwrap();
        assert_eq!(selfonly.hops, 0);
        assert_eq!(selfonly.delivered, vec![(4, v.clone())]);
    }

    #[test]
    fn broadcast_mirrors_reduce_hops() {
        let banks: Vec<usize> = (0..16).collect();
        let r = collective_reduce(&spec(), &banks, BinOp::Add, 0, &vec![vec![Bf16::ONE]; 16]).unwrap();
        let bc = collective_broadcast(&spec(), 0, &banks, &[Bf16::ONE]).unwrap();
        assert_eq!(r.stats.hops, bc.hops);
    }

    proptest! {
        #[test]
        fn broadcast_then_reduce_scales(c in -8i32..8, k in 1usize..17, root in 0usize..16) {
            let banks: Vec<usize> = (0..k).map(|i| (root + i) % 16).collect();
            let v = b(c as f64 * 0.5);
            let bc = collective_broadcast(&spec(), root, &banks, &[v]).unwrap();
            let vals: Vec<Vec<Bf16>> = banks.iter().map(|bk| bc.delivered.iter().find(|(x, _)| x == bk).unwrap().1.clone()).collect();
            let r = collective_reduce(&spec(), &banks, BinOp::Add, root, &vals).unwrap();
            prop_assert_eq!(r.values[0].to_f64(), k as f64 * c as f64 * 0.5);
            prop_assert_eq!(r.combines as usize, k - 1);
        }
    }
}
