//! Gallery storage, low-rank adapted search and candidate re-ranking.

mod gallery;
mod search;
mod throughput;

pub use gallery::GalleryIndex;
pub use search::{
    adapted_search_dense, adapted_search_lowrank, adapted_search_lowrank_sharded, baseline_search,
    baseline_search_sharded, default_shards, rank_order, rerank, score_all, score_rows, top_k,
    transform_gallery_dense, CandidateSet, CosineScorer, DenseScorer, LowRankScorer, RankedEntry, RankedList,
    RowScorer, EPS_NORM,
};
pub use throughput::{batch_adapt_throughput, flop_ratio, ThroughputReport, SOFT_SPEEDUP_THRESHOLD};
