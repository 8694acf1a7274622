use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{dot_f64acc, Scalar, Tensor2};

/// Neighbors kept per item.
pub const MINING_NEIGHBORS: usize = 100;
/// Semi-positives taken from the head of each neighbor list.
pub const SEMI_POSITIVES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub cosine: f64,
    /// Softmax of this cosine over the whole neighbor list.
    pub weight: f64,
}

/// Exact nearest-neighbor lists over a corpus of backbone embeddings.
#[derive(Clone, Debug)]
pub struct MiningIndex {
    neighbors: Vec<Vec<Neighbor>>,
}

impl MiningIndex {
    /// Brute-force cosine neighbors of every row, self excluded.
    pub fn build<T: Scalar>(corpus: &Tensor2<T>) -> Result<Self> {
        Self::build_with(corpus, MINING_NEIGHBORS)
    }

    pub fn build_with<T: Scalar>(corpus: &Tensor2<T>, k: usize) -> Result<Self> {
        let n = corpus.rows();
        if k == 0 || n < k + 1 {
            return Err(Error::Config(format!(
                "mining needs at least {} corpus items, got {n}",
                k + 1
            )));
        }
        let inv_norm: Vec<f64> = (0..n)
            .map(|i| {
                let s = dot_f64acc(corpus.row(i), corpus.row(i)).sqrt();
                if s > 1e-12 { 1.0 / s } else { 0.0 }
            })
            .collect();
        let neighbors = par::map_indexed(n, |i| {
            let row = corpus.row(i);
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (dot_f64acc(row, corpus.row(j)) * inv_norm[i] * inv_norm[j], j))
                .collect();
            let order = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
            cand.select_nth_unstable_by(k - 1, order);
            cand.truncate(k);
            cand.sort_by(order);
            let max = cand[0].0;
            let z: f64 = cand.iter().map(|c| (c.0 - max).exp()).sum();
            cand.iter()
                .map(|&(cosine, id)| Neighbor {
                    id,
                    cosine,
                    weight: (cosine - max).exp() / z,
                })
                .collect()
        });
        Ok(Self { neighbors })
    }

    /// From explicit neighbor cosines (sorted internally); weights are
    /// recomputed.
    pub fn from_lists(lists: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let neighbors = lists
            .into_iter()
            .enumerate()
            .map(|(i, mut l)| {
                if l.is_empty() || l.iter().any(|&(id, c)| id == i || !c.is_finite()) {
                    return Err(Error::Config(format!("neighbor list {i} is empty, self-referencing or non-finite")));
                }
                l.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                let max = l[0].1;
                let z: f64 = l.iter().map(|c| (c.1 - max).exp()).sum();
                Ok(l.into_iter()
                    .map(|(id, cosine)| Neighbor {
                        id,
                        cosine,
                        weight: (cosine - max).exp() / z,
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(Self { neighbors })
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, item: usize) -> &[Neighbor] {
        &self.neighbors[item]
    }
}

/// For each batch row `i` (target corpus id `targets[i]`), the batch
/// columns holding one of that target's top-2 neighbors, with their
/// weights. Neighbors outside the batch are dropped.
pub fn mine_semi_positives(index: &MiningIndex, targets: &[usize]) -> Vec<Vec<(usize, f64)>> {
    let column: HashMap<usize, usize> = targets.iter().enumerate().map(|(c, &t)| (t, c)).collect();
    targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            index
                .neighbors(t)
                .iter()
                .take(SEMI_POSITIVES)
                .filter_map(|nb| column.get(&nb.id).map(|&c| (c, nb.weight)))
                .filter(|&(c, _)| c != i)
                .collect()
        })
        .collect()
}
