//! Axial sharding of one sample across simulated ranks.

pub mod comm;
mod shard;
mod verify;

pub use comm::{
    comm_report, run_ranks, CollectiveKind, CollectiveStats, Collectives, CommStats, Fabric, Local, RankComm,
};
pub use comm::{wire_bytes, DEFAULT_TIMEOUT};
pub use shard::{
    all_gather, all_reduce_grads, all_to_all_reshard, dap_block_forward_backward, dap_evoformer_block, gather,
    scatter, ShardSpec, ShardedActivation,
};
pub use verify::{all_reduce_volume, block_comm_volume, normwise_rel, verify_block, DapCheck};
