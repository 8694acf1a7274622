use std::fmt::Write as _;
use std::time::Instant;

use super::search::{score_rows, DenseScorer, LowRankScorer};
use super::GalleryIndex;
use crate::error::{Error, Result};
use crate::hypernet::LowRankTransform;
use crate::tensor::Scalar;

/// Speed-up the low-rank path is expected to reach over the dense path.
pub const SOFT_SPEEDUP_THRESHOLD: f64 = 5.0;

/// Timing of both scoring paths over one gallery.
#[derive(Clone, Debug, PartialEq)]
pub struct ThroughputReport {
    pub n: usize,
    pub dim: usize,
    pub rank: usize,
    pub shards: usize,
    pub lowrank_items: usize,
    pub lowrank_secs: f64,
    pub dense_items: usize,
    pub dense_secs: f64,
    /// Checksum of the low-rank scores, to keep the work observable.
    pub score_sum: f64,
}

impl ThroughputReport {
    pub fn lowrank_items_per_sec(&self) -> f64 {
        self.lowrank_items as f64 / self.lowrank_secs.max(1e-12)
    }

    pub fn dense_items_per_sec(&self) -> f64 {
        self.dense_items as f64 / self.dense_secs.max(1e-12)
    }

    pub fn measured_speedup(&self) -> f64 {
        self.lowrank_items_per_sec() / self.dense_items_per_sec()
    }

    /// `(2E² + 2E) / (2Er + 2r²)`: dense over low-rank FLOPs per item.
    pub fn flop_ratio(&self) -> f64 {
        flop_ratio(self.dim, self.rank)
    }

    pub fn meets_threshold(&self) -> bool {
        self.measured_speedup() >= SOFT_SPEEDUP_THRESHOLD
    }

    /// Two-column `key  value` TSV.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("key\tvalue\n");
        let rows: [(&str, String); 14] = [
            ("n", self.n.to_string()),
            ("dim", self.dim.to_string()),
            ("rank", self.rank.to_string()),
            ("shards", self.shards.to_string()),
            ("lowrank_items", self.lowrank_items.to_string()),
            ("lowrank_secs", format!("{:.6}", self.lowrank_secs)),
            ("lowrank_items_per_sec", format!("{:.1}", self.lowrank_items_per_sec())),
            ("dense_items", self.dense_items.to_string()),
            ("dense_secs", format!("{:.6}", self.dense_secs)),
            ("dense_items_per_sec", format!("{:.1}", self.dense_items_per_sec())),
            ("measured_speedup", format!("{:.3}", self.measured_speedup())),
            ("flop_ratio", format!("{:.3}", self.flop_ratio())),
            ("speedup_threshold", format!("{SOFT_SPEEDUP_THRESHOLD:.1}")),
            (
                "threshold_status",
                if self.meets_threshold() { "met" } else { "FAILED" }.to_string(),
            ),
        ];
        for (k, v) in rows {
            let _ = writeln!(out, "{k}\t{v}");
        }
        out
    }
}

pub fn flop_ratio(e: usize, r: usize) -> f64 {
    let (e, r) = (e as f64, r as f64);
    (2.0 * e * e + 2.0 * e) / (2.0 * e * r + 2.0 * r * r)
}

/// Scores the whole gallery with the factored path, and the first
/// `dense_rows` rows (all when `None`) with the dense path, timing both.
pub fn batch_adapt_throughput<T: Scalar>(
    t: &LowRankTransform<T>,
    q: &[f64],
    index: &GalleryIndex<T>,
    shards: usize,
    dense_rows: Option<usize>,
) -> Result<ThroughputReport> {
    if t.dim() != index.dim() {
        return Err(Error::dim(
            "batch_adapt_throughput",
            format!("transform dim {} vs gallery dim {}", t.dim(), index.dim()),
        ));
    }
    let low = LowRankScorer::new(t, q)?;
    let dense = DenseScorer::new(t, q)?;
    let n = index.len();
    let started = Instant::now();
    let scores = score_rows(index, &low, 0..n, shards);
    let lowrank_secs = started.elapsed().as_secs_f64();
    let score_sum = scores.iter().sum();
    drop(scores);

    let dn = dense_rows.unwrap_or(n).min(n);
    let started = Instant::now();
    let dense_scores = score_rows(index, &dense, 0..dn, shards);
    let dense_secs = started.elapsed().as_secs_f64();
    std::hint::black_box(&dense_scores);
    Ok(ThroughputReport {
        n,
        dim: index.dim(),
        rank: t.rank(),
        shards,
        lowrank_items: n,
        lowrank_secs,
        dense_items: dn,
        dense_secs,
        score_sum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flop_ratio_at_reference_size() {
        // Dense: 2·768² + 2·768 = 1,181,184. Low-rank: 2·768·64 + 2·64² = 106,496.
        let r = flop_ratio(768, 64);
        assert!((r - 1_181_184.0 / 106_496.0).abs() < 1e-12);
        assert!((r - 11.0913).abs() < 1e-4, "{r}");
    }
}
