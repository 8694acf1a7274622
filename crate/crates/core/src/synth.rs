//! Synthetic retrieval benchmark where each query cluster has a known
//! rank-`r` linear map.
//!
//! For cluster `c` with orthonormal basis `B_c` (`E × r`), `A_c = B_c B_cᵀ`.
//! Targets and distractors are unit Gaussian directions. A query for
//! target `d` in cluster `c` is `normalize(normalize(A_c d) + σ·η)` with
//! `η ~ N(0, I/E)`, so `σ` is the noise norm relative to the signal.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalSettings, MetricReport, RelevanceJudgments, Run};
use crate::hypernet::{HypernetParams, LowRankTransform};
use crate::io::{write_embeddings, write_ids, write_pairs, TrainingPair};
use crate::retrieval::{adapted_search_lowrank, baseline_search, GalleryIndex, RankedList};
use crate::rng::{SeedStreams, StreamRng};
use crate::tensor::Tensor2;

/// Ranking depth used for synthetic evaluation.
pub const EVAL_DEPTH: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub clusters: usize,
    pub dim: usize,
    pub rank: usize,
    /// Held-out evaluation queries per cluster.
    pub eval_queries_per_cluster: usize,
    /// Training queries per training target.
    pub train_queries_per_target: usize,
    pub targets: usize,
    pub distractors: usize,
    pub sigma: f64,
    /// Same-cluster neighbors judged as partially relevant.
    pub judged_neighbors: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            clusters: 8,
            dim: 64,
            rank: 8,
            eval_queries_per_cluster: 25,
            train_queries_per_target: 10,
            targets: 2000,
            distractors: 20_000,
            sigma: 0.5,
            judged_neighbors: 2,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.dim == 0 || self.rank == 0 || self.rank > self.dim {
            return Err(Error::Config(format!(
                "need clusters ≥ 1 and 1 ≤ rank ≤ dim, got {} clusters, rank {}, dim {}",
                self.clusters, self.rank, self.dim
            )));
        }
        if self.eval_queries() > self.targets {
            return Err(Error::Config(format!(
                "{} evaluation queries need as many targets, have {}",
                self.eval_queries(),
                self.targets
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be finite and non-negative, got {}", self.sigma)));
        }
        Ok(())
    }

    pub fn eval_queries(&self) -> usize {
        self.clusters * self.eval_queries_per_cluster
    }
}

/// Generated benchmark. Gallery rows `0..targets` are the targets, in
/// cluster order `row % clusters`; the first `eval_queries()` of them are
/// held out for evaluation and the rest are used for training.
pub struct SynthData {
    pub spec: SynthSpec,
    /// Per cluster, `r × E` orthonormal rows spanning the map's range.
    pub bases: Vec<Tensor2>,
    pub gallery: Tensor2<f32>,
    pub gallery_ids: Vec<String>,
    pub eval_queries: Tensor2<f32>,
    pub eval_ids: Vec<String>,
    pub eval_clusters: Vec<usize>,
    pub train_queries: Tensor2<f32>,
    /// Training pairs: rows of `train_queries` against rows of the target
    /// table (`gallery` rows `0..targets`).
    pub pairs: Vec<TrainingPair>,
    pub judgments: Vec<(String, String, f64)>,
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn unit_gaussian(e: usize, rng: &mut StreamRng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..e).map(|_| rng.sample(StandardNormal)).collect();
    normalize(&mut v);
    v
}

/// `r` orthonormal rows by Gram–Schmidt on Gaussian draws.
fn orthonormal_rows(r: usize, e: usize, rng: &mut StreamRng) -> Tensor2 {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(r);
    while rows.len() < r {
        let mut v: Vec<f64> = (0..e).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for b in &rows {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            rows.push(v);
        }
    }
    Tensor2::from_rows(&rows).expect("rows share a length")
}

/// `B_c B_cᵀ d`
fn project(basis: &Tensor2, d: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for j in 0..basis.rows() {
        let b = basis.row(j);
        let z: f64 = b.iter().zip(d).map(|(x, y)| x * y).sum();
        out.iter_mut().zip(b).for_each(|(o, x)| *o += z * x);
    }
    out
}

impl SynthData {
    pub fn generate(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let streams = SeedStreams::new(spec.seed);
        let (c, e) = (spec.clusters, spec.dim);
        let mut rng = streams.stream("cluster-bases");
        let bases: Vec<Tensor2> = (0..c).map(|_| orthonormal_rows(spec.rank, e, &mut rng)).collect();

        let n = spec.targets + spec.distractors;
        let mut gallery = Tensor2::<f32>::zeros(n, e);
        let mut rng = streams.stream("targets");
        let mut targets64 = Vec::with_capacity(spec.targets);
        for i in 0..spec.targets {
            let d = unit_gaussian(e, &mut rng);
            gallery.row_mut(i).iter_mut().zip(&d).for_each(|(o, v)| *o = *v as f32);
            targets64.push(d);
        }
        let mut rng = streams.stream("distractors");
        for i in spec.targets..n {
            let d = unit_gaussian(e, &mut rng);
            gallery.row_mut(i).iter_mut().zip(&d).for_each(|(o, v)| *o = *v as f32);
        }
        let gallery_ids: Vec<String> = (0..n)
            .map(|i| {
                if i < spec.targets {
                    format!("t{i:06}")
                } else {
                    format!("x{:06}", i - spec.targets)
                }
            })
            .collect();

        let query_for = |t: usize, rng: &mut StreamRng| -> Vec<f32> {
            let mut a = project(&bases[t % c], &targets64[t]);
            normalize(&mut a);
            let scale = spec.sigma / (e as f64).sqrt();
            for v in a.iter_mut() {
                let eta: f64 = rng.sample(StandardNormal);
                *v += scale * eta;
            }
            normalize(&mut a);
            a.iter().map(|&v| v as f32).collect()
        };

        let n_eval = spec.eval_queries();
        let mut rng = streams.stream("eval-queries");
        let mut eval_queries = Tensor2::<f32>::zeros(n_eval, e);
        for t in 0..n_eval {
            eval_queries.row_mut(t).copy_from_slice(&query_for(t, &mut rng));
        }
        let eval_ids: Vec<String> = (0..n_eval).map(|t| format!("q{t:05}")).collect();
        let eval_clusters = (0..n_eval).map(|t| t % c).collect();

        let mut rng = streams.stream("train-queries");
        let per = spec.train_queries_per_target;
        let train_targets = spec.targets - n_eval;
        let mut train_queries = Tensor2::<f32>::zeros(train_targets * per, e);
        let mut pairs = Vec::with_capacity(train_targets * per);
        for (k, t) in (n_eval..spec.targets).enumerate() {
            for j in 0..per {
                let row = k * per + j;
                train_queries.row_mut(row).copy_from_slice(&query_for(t, &mut rng));
                pairs.push(TrainingPair {
                    query_row: row as u64,
                    target_row: t as u64,
                });
            }
        }

        let mut judgments = Vec::with_capacity(n_eval * (1 + spec.judged_neighbors));
        for t in 0..n_eval {
            let cl = t % c;
            let mut anchor = project(&bases[cl], &targets64[t]);
            normalize(&mut anchor);
            let mut near: Vec<(f64, usize)> = (cl..spec.targets)
                .step_by(c)
                .filter(|&o| o != t)
                .map(|o| {
                    let mut p = project(&bases[cl], &targets64[o]);
                    normalize(&mut p);
                    (anchor.iter().zip(&p).map(|(x, y)| x * y).sum(), o)
                })
                .collect();
            near.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            judgments.push((eval_ids[t].clone(), gallery_ids[t].clone(), 1.0));
            for &(_, o) in near.iter().take(spec.judged_neighbors) {
                judgments.push((eval_ids[t].clone(), gallery_ids[o].clone(), 0.5));
            }
        }

        Ok(Self {
            spec: spec.clone(),
            bases,
            gallery,
            gallery_ids,
            eval_queries,
            eval_ids,
            eval_clusters,
            train_queries,
            pairs,
            judgments,
        })
    }

    /// Rows `0..targets` of the gallery.
    pub fn targets(&self) -> Tensor2<f32> {
        let e = self.spec.dim;
        Tensor2::from_vec(self.spec.targets, e, self.gallery.data()[..self.spec.targets * e].to_vec())
            .expect("prefix of the gallery")
    }

    pub fn gallery_index(&self) -> Result<GalleryIndex<f32>> {
        GalleryIndex::new(self.gallery.clone(), self.gallery_ids.clone())
    }

    /// `A_c = B_c B_cᵀ` as a factored transform.
    pub fn cluster_transform(&self, cluster: usize) -> LowRankTransform<f32> {
        let b = self.bases[cluster].cast::<f32>();
        LowRankTransform::from_factor_rows(b.clone(), b).expect("matching factor shapes")
    }

    pub fn relevance(&self) -> RelevanceJudgments {
        RelevanceJudgments::from_triples(self.judgments.iter().cloned())
    }

    fn eval_query(&self, i: usize) -> Vec<f64> {
        self.eval_queries.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    /// Cosine search on raw embeddings for every evaluation query.
    pub fn baseline_rankings(&self, index: &GalleryIndex<f32>, k: usize) -> Result<Vec<RankedList>> {
        (0..self.eval_ids.len())
            .map(|i| Ok(baseline_search(index, &self.eval_query(i), k)?.with_query_id(self.eval_ids[i].clone())))
            .collect()
    }

    /// Search with each query's true cluster map.
    pub fn oracle_rankings(&self, index: &GalleryIndex<f32>, k: usize) -> Result<Vec<RankedList>> {
        let transforms: Vec<_> = (0..self.spec.clusters).map(|c| self.cluster_transform(c)).collect();
        (0..self.eval_ids.len())
            .map(|i| {
                let t = &transforms[self.eval_clusters[i]];
                Ok(adapted_search_lowrank(t, &self.eval_query(i), index, k)?.with_query_id(self.eval_ids[i].clone()))
            })
            .collect()
    }

    /// Search with the hypernetwork's customized query and transform.
    pub fn adapted_rankings(
        &self,
        params: &HypernetParams,
        index: &GalleryIndex<f32>,
        k: usize,
    ) -> Result<Vec<RankedList>> {
        (0..self.eval_ids.len())
            .map(|i| {
                let (q, t) = params.forward(&self.eval_query(i))?;
                Ok(adapted_search_lowrank(&t.cast::<f32>(), &q, index, k)?.with_query_id(self.eval_ids[i].clone()))
            })
            .collect()
    }

    /// Scores rankings against the generated judgments.
    pub fn evaluate(&self, rankings: &[RankedList]) -> Result<MetricReport> {
        evaluate(&Run::from_ranked_lists(rankings), &self.relevance(), EvalSettings::default())
    }

    /// Baseline and known-transform oracle reports (mAP@50, nDCG@50, MRR,
    /// recall@1).
    pub fn calibrate(&self, index: &GalleryIndex<f32>) -> Result<Calibration> {
        Ok(Calibration {
            baseline: self.evaluate(&self.baseline_rankings(index, EVAL_DEPTH)?)?,
            oracle: self.evaluate(&self.oracle_rankings(index, EVAL_DEPTH)?)?,
        })
    }

    /// Writes every artifact into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_embeddings(&dir.join("gallery.qemb"), &self.gallery)?;
        write_ids(&dir.join("gallery.ids"), &self.gallery_ids)?;
        write_embeddings(&dir.join("targets.qemb"), &self.targets())?;
        write_embeddings(&dir.join("train_queries.qemb"), &self.train_queries)?;
        write_pairs(&dir.join("train_pairs.qprs"), &self.pairs)?;
        write_embeddings(&dir.join("eval_queries.qemb"), &self.eval_queries)?;
        write_ids(&dir.join("eval_queries.ids"), &self.eval_ids)?;
        let mut judg = String::new();
        for (q, item, g) in &self.judgments {
            let _ = writeln!(judg, "{q}\t{item}\t{g}");
        }
        write_text(&dir.join("judgments.tsv"), &judg)?;
        let mut clusters = String::from("query_id\tcluster\n");
        for (q, c) in self.eval_ids.iter().zip(&self.eval_clusters) {
            let _ = writeln!(clusters, "{q}\t{c}");
        }
        write_text(&dir.join("eval_clusters.tsv"), &clusters)?;
        let mut bases = Tensor2::<f32>::zeros(self.spec.clusters * self.spec.rank, self.spec.dim);
        for (c, b) in self.bases.iter().enumerate() {
            for j in 0..self.spec.rank {
                for (o, &v) in bases.row_mut(c * self.spec.rank + j).iter_mut().zip(b.row(j)) {
                    *o = v as f32;
                }
            }
        }
        write_embeddings(&dir.join("cluster_bases.qemb"), &bases)
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Retrieval quality before adaptation and with the true transforms.
#[derive(Clone, Debug)]
pub struct Calibration {
    pub baseline: MetricReport,
    pub oracle: MetricReport,
}

impl Calibration {
    pub fn to_tsv(&self) -> String {
        let names = self.baseline.metric_names();
        let mut out = String::from("metric\tbaseline\toracle\n");
        for ((n, b), o) in names.iter().zip(self.baseline.means()).zip(self.oracle.means()) {
            let _ = writeln!(out, "{n}\t{b:.6}\t{o:.6}");
        }
        out
    }
}
