//! Command-line front end.
//!
//! Failures print one line `error<TAB>category<TAB>message` on stderr. Usage
//! errors exit with 2, every other failure with 1.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{compare_runs, evaluate, EvalSettings, RelevanceJudgments, Run};
use crate::hypernet::{load_checkpoint, HypernetParams, LowRankTransform};
use crate::io::tsv::{read_candidates, read_judgments, read_rankings};
use crate::io::{read_embeddings, read_ids, read_pairs, write_embeddings, write_ids};
use crate::par;
use crate::retrieval::{
    adapted_search_dense, adapted_search_lowrank, baseline_search, batch_adapt_throughput, rerank, CandidateSet,
    GalleryIndex, RankedList,
};
use crate::rng::SeedStreams;
use crate::synth::{write_text, SynthData, SynthSpec};
use crate::tensor::Tensor2;
use crate::training::{check_gradients, tiny_problem, MiningIndex, TrainData, Trainer, FD_TOLERANCE};

#[derive(Parser, Debug)]
#[command(name = "quari", version, about = "Query-adaptive retrieval with low-rank hypernetwork transforms")]
pub struct Cli {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream; overrides the config's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: machine parallelism).
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic benchmark with known per-cluster transforms.
    GenSynth(GenSynthArgs),
    /// Train a hypernetwork on query/target pairs.
    Train(TrainArgs),
    /// Compare analytic and finite-difference gradients on the tiny problem.
    CheckGrad(CheckGradArgs),
    /// Validate an embedding file and its ids and store them as a gallery.
    Index(IndexArgs),
    /// Rank the gallery for every query (baseline or adapted).
    Search(SearchArgs),
    /// Reorder fixed candidate sets under the adapted similarity.
    Rerank(RerankArgs),
    /// Score a ranking file against relevance judgments.
    Eval(EvalArgs),
    /// Time the low-rank and dense scoring paths over a gallery.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct GenSynthArgs {
    #[arg(long, default_value_t = 8)]
    pub clusters: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 8)]
    pub rank: usize,
    #[arg(long, default_value_t = 25)]
    pub eval_per_cluster: usize,
    #[arg(long, default_value_t = 10)]
    pub train_per_target: usize,
    #[arg(long, default_value_t = 2000)]
    pub targets: usize,
    #[arg(long, default_value_t = 20_000)]
    pub distractors: usize,
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
    #[arg(long, default_value_t = 2)]
    pub judged_neighbors: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub targets: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CheckGradArgs {
    /// Entries probed per tensor; smaller tensors are checked in full.
    #[arg(long, default_value_t = usize::MAX)]
    pub per_tensor: usize,
}

#[derive(Args, Debug)]
pub struct IndexArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub ids: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GalleryArgs {
    #[arg(long)]
    pub gallery: PathBuf,
    /// Gallery ids; row numbers when absent.
    #[arg(long)]
    pub gallery_ids: Option<PathBuf>,
    #[arg(long)]
    pub queries: PathBuf,
    /// Query ids; row numbers when absent.
    #[arg(long)]
    pub query_ids: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[command(flatten)]
    pub io: GalleryArgs,
    /// Trained hypernetwork; plain cosine search when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    /// Score through the materialized dense transform.
    #[arg(long)]
    pub dense: bool,
}

#[derive(Args, Debug)]
pub struct RerankArgs {
    #[command(flatten)]
    pub io: GalleryArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// TSV `query_id<TAB>item_id`.
    #[arg(long)]
    pub candidates: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Ranking TSV to score.
    #[arg(long)]
    pub run: PathBuf,
    /// TSV `query_id<TAB>item_id<TAB>grade`.
    #[arg(long)]
    pub judgments: PathBuf,
    /// Second ranking to compare against.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub ap_k: usize,
    #[arg(long, default_value_t = 50)]
    pub ndcg_k: usize,
    #[arg(long, default_value_t = 1)]
    pub recall_k: usize,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Transform source; a random rank-`rank` transform when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub rank: usize,
    /// Gallery rows timed on the dense path (all when absent).
    #[arg(long)]
    pub dense_rows: Option<usize>,
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error\tusage\t{}", first.trim_start_matches("error: "));
            return 2;
        }
    };
    let level = if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\t'], " ");
            eprintln!("error\t{}\t{msg}", e.category());
            if matches!(e, Error::Usage(_)) {
                2
            } else {
                1
            }
        }
    }
}

fn execute(cli: &Cli) -> Result<i32> {
    let threads = cli.threads.map(|n| n as usize);
    par::with_threads(threads, || match &cli.command {
        Command::GenSynth(a) => gen_synth(cli, a),
        Command::Train(a) => train(cli, a),
        Command::CheckGrad(a) => check_grad(cli, a),
        Command::Index(a) => index(cli, a),
        Command::Search(a) => search(cli, a),
        Command::Rerank(a) => rerank_cmd(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Bench(a) => bench(cli, a),
    })
}

fn require_out<'a>(cli: &'a Cli, what: &str) -> Result<&'a Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::Usage(format!("{what} needs --out")))
}

/// Writes `text` to `--out` when given, else to stdout.
fn emit(cli: &Cli, text: &str) -> Result<()> {
    match &cli.out {
        Some(p) => write_text(p, text),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut c = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    Ok(c)
}

fn gen_synth(cli: &Cli, a: &GenSynthArgs) -> Result<i32> {
    let dir = require_out(cli, "gen-synth")?;
    let spec = SynthSpec {
        clusters: a.clusters,
        dim: a.dim,
        rank: a.rank,
        eval_queries_per_cluster: a.eval_per_cluster,
        train_queries_per_target: a.train_per_target,
        targets: a.targets,
        distractors: a.distractors,
        sigma: a.sigma,
        judged_neighbors: a.judged_neighbors,
        seed: cli.seed.unwrap_or(0),
    };
    let data = SynthData::generate(&spec)?;
    data.write(dir)?;
    let cal = data.calibrate(&data.gallery_index()?)?;
    let text = cal.to_tsv();
    write_text(&dir.join("calibration.tsv"), &text)?;
    print!("{text}");
    Ok(0)
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<i32> {
    let dir = require_out(cli, "train")?;
    let rc = run_config(cli)?;
    let queries = read_embeddings(&a.queries)?;
    let targets = read_embeddings(&a.targets)?;
    let pairs = read_pairs(&a.pairs)?;
    let params = match &a.init {
        Some(p) => load_checkpoint(p)?,
        None => {
            let hc = rc.hypernet_config(queries.cols())?;
            HypernetParams::init(&hc, &mut SeedStreams::new(rc.seed).stream("init"))?
        }
    };
    let mining = MiningIndex::build(&targets)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join("config.txt"), &rc.to_text())?;
    let data = TrainData {
        queries: &queries,
        targets: &targets,
        pairs: &pairs,
        mining: &mining,
    };
    let mut trainer = Trainer::new(rc.train_config(), data, params)?;
    trainer.run(Some(dir), None)?;
    let log = trainer.log();
    let mut steps = String::from("step\tepoch\tbatch\tloss\tlr\tapplied\n");
    for s in &log.steps {
        let _ = writeln!(steps, "{}\t{}\t{}\t{:.6}\t{:.6e}\t{}", s.step, s.epoch, s.batch, s.loss, s.lr, s.applied);
    }
    write_text(&dir.join("steps.tsv"), &steps)?;
    write_text(&dir.join("epochs.tsv"), &log.epochs_tsv())?;
    print!("{}", log.epochs_tsv());
    Ok(0)
}

fn check_grad(cli: &Cli, a: &CheckGradArgs) -> Result<i32> {
    let rc = run_config(cli)?;
    let (params, batch) = tiny_problem(rc.seed)?;
    let report = check_gradients(&params, &batch, rc.loss_norm, a.per_tensor, rc.seed)?;
    if let Some(p) = &cli.out {
        write_text(p, &report.to_tsv())?;
    }
    let worst = report.max_rel_err();
    println!("max_rel_err\t{worst:.6e}");
    println!("entries_checked\t{}", report.entries_checked());
    Ok(if worst <= FD_TOLERANCE { 0 } else { 1 })
}

fn index(cli: &Cli, a: &IndexArgs) -> Result<i32> {
    let dir = require_out(cli, "index")?;
    let g = GalleryIndex::load(&a.embeddings, a.ids.as_deref())?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = Tensor2::from_vec(g.len(), g.dim(), g.data().to_vec())?;
    write_embeddings(&dir.join("gallery.qemb"), &m)?;
    write_ids(&dir.join("gallery.ids"), g.ids())?;
    println!("items\t{}\ndim\t{}", g.len(), g.dim());
    Ok(0)
}

struct Loaded {
    gallery: GalleryIndex<f32>,
    queries: Tensor2<f32>,
    query_ids: Vec<String>,
}

fn load_inputs(a: &GalleryArgs) -> Result<Loaded> {
    let gallery = GalleryIndex::open(&a.gallery, a.gallery_ids.as_deref())?;
    let queries = read_embeddings(&a.queries)?;
    let query_ids = match &a.query_ids {
        Some(p) => read_ids(p)?,
        None => (0..queries.rows()).map(|i| i.to_string()).collect(),
    };
    if query_ids.len() != queries.rows() {
        return Err(Error::dim(
            "queries",
            format!("{} rows but {} ids", queries.rows(), query_ids.len()),
        ));
    }
    if queries.cols() != gallery.dim() {
        return Err(Error::dim(
            "queries",
            format!("query dim {} vs gallery dim {}", queries.cols(), gallery.dim()),
        ));
    }
    Ok(Loaded {
        gallery,
        queries,
        query_ids,
    })
}

fn query_row(m: &Tensor2<f32>, i: usize) -> Vec<f64> {
    m.row(i).iter().map(|&v| f64::from(v)).collect()
}

fn rankings_tsv(lists: &[RankedList]) -> String {
    lists.iter().map(RankedList::to_tsv).collect()
}

fn search(cli: &Cli, a: &SearchArgs) -> Result<i32> {
    if a.k == 0 {
        return Err(Error::Usage("--k must be at least 1".into()));
    }
    let inp = load_inputs(&a.io)?;
    let params = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    if a.dense && params.is_none() {
        return Err(Error::Usage("--dense needs --checkpoint".into()));
    }
    let mut lists = Vec::with_capacity(inp.queries.rows());
    for (i, qid) in inp.query_ids.iter().enumerate() {
        let q = query_row(&inp.queries, i);
        let list = match &params {
            None => baseline_search(&inp.gallery, &q, a.k)?,
            Some(p) => {
                let (qp, t) = p.forward(&q)?;
                let t = t.cast::<f32>();
                if a.dense {
                    adapted_search_dense(&t, &qp, &inp.gallery, a.k, par::available_threads())?
                } else {
                    adapted_search_lowrank(&t, &qp, &inp.gallery, a.k)?
                }
            }
        };
        lists.push(list.with_query_id(qid.clone()));
    }
    emit(cli, &rankings_tsv(&lists))?;
    Ok(0)
}

fn rerank_cmd(cli: &Cli, a: &RerankArgs) -> Result<i32> {
    let inp = load_inputs(&a.io)?;
    let params = load_checkpoint(&a.checkpoint)?;
    let candidates = read_candidates(&a.candidates)?;
    let mut lists = Vec::with_capacity(candidates.len());
    for (qid, ids) in candidates {
        let row = inp
            .query_ids
            .iter()
            .position(|x| *x == qid)
            .ok_or_else(|| Error::UnknownIds(vec![qid.clone()]))?;
        let (qp, t) = params.forward(&query_row(&inp.queries, row))?;
        let set = CandidateSet {
            query_id: qid.clone(),
            ids,
        };
        lists.push(rerank(&t.cast::<f32>(), &qp, &inp.gallery, &set)?.with_query_id(qid));
    }
    emit(cli, &rankings_tsv(&lists))?;
    Ok(0)
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<i32> {
    let settings = EvalSettings {
        ap_k: a.ap_k,
        ndcg_k: a.ndcg_k,
        recall_k: a.recall_k,
        ..EvalSettings::default()
    };
    let judg = RelevanceJudgments::from_triples(read_judgments(&a.judgments)?);
    let report = evaluate(&Run::from_rows(read_rankings(&a.run)?), &judg, settings)?;
    let text = match &a.baseline {
        None => report.to_tsv(),
        Some(b) => {
            let base = evaluate(&Run::from_rows(read_rankings(b)?), &judg, settings)?;
            compare_runs(&base, &report)?.to_tsv()
        }
    };
    emit(cli, &text)?;
    Ok(0)
}

fn bench(cli: &Cli, a: &BenchArgs) -> Result<i32> {
    let gallery = GalleryIndex::open(&a.gallery, None)?;
    let e = gallery.dim();
    let streams = SeedStreams::new(cli.seed.unwrap_or(0));
    let q: Vec<f64> = match &a.queries {
        Some(p) => query_row(&read_embeddings(p)?, 0),
        None => {
            let mut rng = streams.stream("bench-query");
            (0..e).map(|_| rng.sample(StandardNormal)).collect()
        }
    };
    let (qp, t) = match &a.checkpoint {
        Some(p) => {
            let (qp, t) = load_checkpoint(p)?.forward(&q)?;
            (qp, t.cast::<f32>())
        }
        None => {
            let mut rng = streams.stream("bench-transform");
            let mut factor = || {
                let data = (0..a.rank * e).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
                Tensor2::from_vec(a.rank, e, data)
            };
            let (u, v) = (factor()?, factor()?);
            (q, LowRankTransform::from_factor_rows(u, v)?)
        }
    };
    let report = batch_adapt_throughput(&t, &qp, &gallery, par::available_threads(), a.dense_rows)?;
    emit(cli, &report.to_tsv())?;
    Ok(0)
}
