use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use super::GalleryIndex;
use crate::error::{Error, Result};
use crate::hypernet::LowRankTransform;
use crate::io::tsv::ranking_line;
use crate::par;
use crate::tensor::{dot_f64acc, dot_mixed, Scalar, Tensor2};

/// Transformed vectors at or below this norm score 0.
pub const EPS_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct RankedEntry {
    pub id: String,
    pub row: usize,
    pub score: f64,
}

/// Items in descending score order, ties broken by ascending id.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    pub fn with_query_id(mut self, id: impl Into<String>) -> Self {
        self.query_id = id.into();
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.id.as_str()).collect()
    }

    /// `query_id  rank  item_id  score` lines, ranks from 1.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, e) in self.entries.iter().enumerate() {
            out.push_str(&ranking_line(&self.query_id, i + 1, &e.id, e.score));
        }
        out
    }
}

/// Initial top-k candidates for one query.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct CandidateSet {
    pub query_id: String,
    pub ids: Vec<String>,
}

/// Descending score, then ascending id.
pub fn rank_order(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Scores one gallery row. `scratch` is per-thread working space.
pub trait RowScorer<T: Scalar>: Sync {
    fn scratch_len(&self) -> usize;
    fn score(&self, row: &[T], scratch: &mut [f64]) -> f64;
}

fn unit(q: &[f64]) -> Vec<f64> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n <= EPS_NORM {
        vec![0.0; q.len()]
    } else {
        q.iter().map(|v| v / n).collect()
    }
}

/// Cosine similarity with raw gallery rows.
pub struct CosineScorer {
    q: Vec<f64>,
}

impl CosineScorer {
    pub fn new(q: &[f64]) -> Self {
        Self { q: unit(q) }
    }
}

impl<T: Scalar> RowScorer<T> for CosineScorer {
    fn scratch_len(&self) -> usize {
        0
    }

    fn score(&self, row: &[T], _: &mut [f64]) -> f64 {
        let nn = dot_f64acc(row, row);
        if nn.sqrt() <= EPS_NORM {
            return 0.0;
        }
        dot_mixed(&self.q, row) / nn.sqrt()
    }
}

/// `q̂′ · normalize(T d)` through the factors: `z = V̂ᵀd`,
/// numerator `(Ûᵀq̂′)·z`, `‖T d‖ = sqrt(zᵀGz)`.
pub struct LowRankScorer<'t, T: Scalar> {
    transform: &'t LowRankTransform<T>,
    a: Vec<f64>,
    gram: Vec<f64>,
}

impl<'t, T: Scalar> LowRankScorer<'t, T> {
    pub fn new(transform: &'t LowRankTransform<T>, q: &[f64]) -> Result<Self> {
        if q.len() != transform.dim() {
            return Err(Error::dim(
                "adapted_search",
                format!("query dim {} vs transform dim {}", q.len(), transform.dim()),
            ));
        }
        transform.check_gram()?;
        let q = unit(q);
        let a = (0..transform.rank()).map(|j| dot_mixed(&q, transform.u_rows().row(j))).collect();
        let gram = transform.gram().data().iter().map(|v| v.as_f64()).collect();
        Ok(Self { transform, a, gram })
    }
}

impl<T: Scalar> RowScorer<T> for LowRankScorer<'_, T> {
    fn scratch_len(&self) -> usize {
        self.a.len()
    }

    fn score(&self, row: &[T], z: &mut [f64]) -> f64 {
        let r = self.a.len();
        self.transform.project_into(row, z);
        let mut quad = 0.0;
        let mut num = 0.0;
        for i in 0..r {
            let g = &self.gram[i * r..(i + 1) * r];
            let mut inner = 0.0;
            for j in 0..r {
                inner += g[j] * z[j];
            }
            quad += z[i] * inner;
            num += self.a[i] * z[i];
        }
        let den = quad.max(0.0).sqrt();
        if den <= EPS_NORM {
            0.0
        } else {
            num / den
        }
    }
}

/// Reference scorer: materializes `T = Û·V̂ᵀ` in f64 and computes `T d`
/// for every row.
pub struct DenseScorer {
    t: Tensor2<f64>,
    q: Vec<f64>,
}

impl DenseScorer {
    pub fn new<T: Scalar>(transform: &LowRankTransform<T>, q: &[f64]) -> Result<Self> {
        if q.len() != transform.dim() {
            return Err(Error::dim(
                "dense_search",
                format!("query dim {} vs transform dim {}", q.len(), transform.dim()),
            ));
        }
        Ok(Self {
            t: transform.cast::<f64>().dense(),
            q: unit(q),
        })
    }
}

impl<T: Scalar> RowScorer<T> for DenseScorer {
    fn scratch_len(&self) -> usize {
        self.q.len()
    }

    fn score(&self, row: &[T], td: &mut [f64]) -> f64 {
        for (a, o) in td.iter_mut().enumerate() {
            *o = dot_mixed(self.t.row(a), row);
        }
        let den = td.iter().map(|v| v * v).sum::<f64>().sqrt();
        if den <= EPS_NORM {
            0.0
        } else {
            self.q.iter().zip(td.iter()).map(|(a, b)| a * b).sum::<f64>() / den
        }
    }
}

struct Cand<'a> {
    score: f64,
    id: &'a str,
    row: usize,
}

// Ordered so the heap's maximum is the weakest candidate.
impl Ord for Cand<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order((self.score, self.id), (other.score, other.id))
    }
}

impl PartialOrd for Cand<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Cand<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Cand<'_> {}

fn entries_of<'a>(mut cands: Vec<Cand<'a>>, k: usize) -> Vec<RankedEntry> {
    cands.sort();
    cands.truncate(k);
    cands
        .into_iter()
        .map(|c| RankedEntry {
            id: c.id.to_owned(),
            row: c.row,
            score: c.score,
        })
        .collect()
}

/// Top `k` rows by `scorer`, computed over `shards` contiguous row ranges
/// and merged.
pub fn top_k<T: Scalar, S: RowScorer<T>>(index: &GalleryIndex<T>, scorer: &S, k: usize, shards: usize) -> RankedList {
    let k = k.min(index.len());
    if k == 0 {
        return RankedList::default();
    }
    let ranges = par::shard_ranges(index.len(), shards.max(1));
    let parts = par::map_indexed(ranges.len(), |s| {
        let range = ranges[s].clone();
        let mut scratch = vec![0.0; scorer.scratch_len()];
        let mut heap: BinaryHeap<Cand<'_>> = BinaryHeap::with_capacity(k + 1);
        for row in range {
            let c = Cand {
                score: scorer.score(index.row(row), &mut scratch),
                id: index.id(row),
                row,
            };
            if heap.len() < k {
                heap.push(c);
            } else if let Some(worst) = heap.peek() {
                if c < *worst {
                    heap.pop();
                    heap.push(c);
                }
            }
        }
        heap.into_vec()
    });
    RankedList {
        query_id: String::new(),
        entries: entries_of(parts.into_iter().flatten().collect(), k),
    }
}

/// Every row's score, in row order.
pub fn score_all<T: Scalar, S: RowScorer<T>>(index: &GalleryIndex<T>, scorer: &S, shards: usize) -> Vec<f64> {
    score_rows(index, scorer, 0..index.len(), shards)
}

/// Scores for `rows`, split into `shards` chunks.
pub fn score_rows<T: Scalar, S: RowScorer<T>>(
    index: &GalleryIndex<T>,
    scorer: &S,
    rows: std::ops::Range<usize>,
    shards: usize,
) -> Vec<f64> {
    let start = rows.start;
    let mut out = vec![0.0; rows.len()];
    let chunk = out.len().div_ceil(shards.max(1)).max(1);
    par::for_each_chunk_mut(&mut out, chunk, |c, slot| {
        let mut scratch = vec![0.0; scorer.scratch_len()];
        let base = start + c * chunk;
        for (i, o) in slot.iter_mut().enumerate() {
            *o = scorer.score(index.row(base + i), &mut scratch);
        }
    });
    out
}

pub fn default_shards() -> usize {
    par::available_threads()
}

fn check_query<T: Scalar>(index: &GalleryIndex<T>, q: &[f64], op: &'static str) -> Result<()> {
    if q.len() != index.dim() {
        return Err(Error::dim(op, format!("query dim {} vs gallery dim {}", q.len(), index.dim())));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{op}: query embedding")));
    }
    Ok(())
}

fn check_transform<T: Scalar>(index: &GalleryIndex<T>, t: &LowRankTransform<T>, op: &'static str) -> Result<()> {
    if t.dim() != index.dim() {
        return Err(Error::dim(op, format!("transform dim {} vs gallery dim {}", t.dim(), index.dim())));
    }
    if !t.is_finite() {
        return Err(Error::NonFinite(format!("{op}: transform factors")));
    }
    Ok(())
}

/// Top-k by cosine similarity on the raw embeddings.
pub fn baseline_search<T: Scalar>(index: &GalleryIndex<T>, q: &[f64], k: usize) -> Result<RankedList> {
    baseline_search_sharded(index, q, k, default_shards())
}

pub fn baseline_search_sharded<T: Scalar>(index: &GalleryIndex<T>, q: &[f64], k: usize, shards: usize) -> Result<RankedList> {
    check_query(index, q, "baseline_search")?;
    Ok(top_k(index, &CosineScorer::new(q), k, shards))
}

/// Top-k by `normalize(q′) · normalize(T d)` without forming `T` or `T d`.
pub fn adapted_search_lowrank<T: Scalar>(
    t: &LowRankTransform<T>,
    q: &[f64],
    index: &GalleryIndex<T>,
    k: usize,
) -> Result<RankedList> {
    adapted_search_lowrank_sharded(t, q, index, k, default_shards())
}

pub fn adapted_search_lowrank_sharded<T: Scalar>(
    t: &LowRankTransform<T>,
    q: &[f64],
    index: &GalleryIndex<T>,
    k: usize,
    shards: usize,
) -> Result<RankedList> {
    check_query(index, q, "adapted_search")?;
    check_transform(index, t, "adapted_search")?;
    Ok(top_k(index, &LowRankScorer::new(t, q)?, k, shards))
}

/// Same ranking as [`adapted_search_lowrank`] via the dense matrix.
pub fn adapted_search_dense<T: Scalar>(
    t: &LowRankTransform<T>,
    q: &[f64],
    index: &GalleryIndex<T>,
    k: usize,
    shards: usize,
) -> Result<RankedList> {
    check_query(index, q, "dense_search")?;
    check_transform(index, t, "dense_search")?;
    Ok(top_k(index, &DenseScorer::new(t, q)?, k, shards))
}

/// `T d_n` for every row, through the dense `E × E` matrix.
pub fn transform_gallery_dense<T: Scalar>(t: &LowRankTransform<T>, index: &GalleryIndex<T>) -> Result<Tensor2<T>> {
    check_transform(index, t, "transform_gallery_dense")?;
    let dense = t.cast::<f64>().dense();
    let e = index.dim();
    let mut out = Tensor2::zeros(index.len(), e);
    let chunk = (e * 256).max(1);
    par::for_each_chunk_mut(out.data_mut(), chunk, |c, block| {
        for (i, dst) in block.chunks_mut(e).enumerate() {
            let row = index.row(c * 256 + i);
            for (a, o) in dst.iter_mut().enumerate() {
                *o = T::from_f64(dot_mixed(dense.row(a), row));
            }
        }
    });
    Ok(out)
}

/// Reorders `candidates` by adapted score. Duplicate ids are kept once.
pub fn rerank<T: Scalar>(
    t: &LowRankTransform<T>,
    q: &[f64],
    index: &GalleryIndex<T>,
    candidates: &CandidateSet,
) -> Result<RankedList> {
    check_query(index, q, "rerank")?;
    check_transform(index, t, "rerank")?;
    let mut unknown: Vec<String> = candidates
        .ids
        .iter()
        .filter(|id| index.row_of(id).is_none())
        .cloned()
        .collect();
    if !unknown.is_empty() {
        unknown.sort();
        unknown.dedup();
        return Err(Error::UnknownIds(unknown));
    }
    let scorer = LowRankScorer::new(t, q)?;
    let mut seen = HashSet::new();
    let rows: Vec<usize> = candidates
        .ids
        .iter()
        .filter_map(|id| index.row_of(id))
        .filter(|r| seen.insert(*r))
        .collect();
    let scores = par::map_indexed(rows.len(), |i| {
        let mut scratch = vec![0.0; RowScorer::<T>::scratch_len(&scorer)];
        scorer.score(index.row(rows[i]), &mut scratch)
    });
    let cands = rows
        .iter()
        .zip(scores)
        .map(|(&row, score)| Cand {
            score,
            id: index.id(row),
            row,
        })
        .collect();
    Ok(RankedList {
        query_id: candidates.query_id.clone(),
        entries: entries_of(cands, rows.len()),
    })
}
