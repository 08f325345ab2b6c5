//! Per-channel router mesh with in-transit Curry ALUs.

pub mod alu;
pub mod collective;
pub mod mesh;

pub use alu::{alu_apply, CurryAluState};
pub use collective::{collective_broadcast, collective_reduce, rank_order, tree_levels, tree_reduce_oracle};
pub use mesh::{route_next_hop, Coord, Delivery, FlitSpec, Mesh, MeshStats, Port};
