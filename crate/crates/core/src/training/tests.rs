use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::hypernet::{load_checkpoint, HypernetConfig, HypernetParams};
use crate::io::TrainingPair;
use crate::tensor::Tensor2;

struct Fixture {
    queries: Tensor2<f32>,
    targets: Tensor2<f32>,
    pairs: Vec<TrainingPair>,
    mining: MiningIndex,
}

impl Fixture {
    fn new(n: usize, e: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets = Tensor2::from_vec(n, e, (0..n * e).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
        let queries = targets.map(|v| v + 0.1);
        // Two queries for the first ten targets.
        let mut pairs: Vec<TrainingPair> = (0..n as u64).map(|i| TrainingPair { query_row: i, target_row: i }).collect();
        pairs.extend((0..10u64).map(|i| TrainingPair { query_row: i + 1, target_row: i }));
        let mining = MiningIndex::build(&targets).unwrap();
        Self { queries, targets, pairs, mining }
    }

    fn data(&self) -> TrainData<'_> {
        TrainData {
            queries: &self.queries,
            targets: &self.targets,
            pairs: &self.pairs,
            mining: &self.mining,
        }
    }
}

fn small_config() -> TrainConfig {
    TrainConfig {
        batch: 8,
        lr_max: 1e-3,
        lr_min: 1e-5,
        steps: Some(6),
        seed: 11,
        ..TrainConfig::default()
    }
}

fn net(e: usize) -> HypernetParams {
    HypernetParams::init(&HypernetConfig::tiny(e), &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
}

#[test]
fn defaults_follow_reference_settings() {
    let c = TrainConfig::default();
    assert_eq!(c.tau, 0.07);
    assert_eq!(c.batch, 320);
    assert_eq!((c.lr_max, c.lr_min, c.weight_decay), (1e-5, 2e-7, 1e-2));
}

#[test]
fn gradients_match_finite_differences_on_sampled_entries() {
    let (params, batch) = tiny_problem(5).unwrap();
    let report = check_gradients(&params, &batch, LossNorm::Normalized, 3, 1).unwrap();
    assert_eq!(report.tensors.len(), params.len());
    assert!(report.max_rel_err() <= 1e-4, "{}", report.to_tsv());
    let raw = check_gradients(&params, &batch, LossNorm::Raw, 2, 2).unwrap();
    assert!(raw.max_rel_err() <= 1e-4, "{}", raw.to_tsv());
}

#[test]
fn tape_and_value_losses_agree() {
    let (params, batch) = tiny_problem(8).unwrap();
    let (l, _, _) = batch_loss_and_grad(&params, &batch, LossNorm::Normalized).unwrap();
    let v = batch_loss(&params, &batch, LossNorm::Normalized).unwrap();
    assert!((l - v).abs() <= 1e-12);
}

#[test]
fn one_small_step_reduces_batch_loss() {
    let (mut params, batch) = tiny_problem(21).unwrap();
    let before = batch_loss(&params, &batch, LossNorm::Normalized).unwrap();
    let (_, _, grads) = batch_loss_and_grad(&params, &batch, LossNorm::Normalized).unwrap();
    let sched = CosineSchedule::new(1e-4, 1e-4, 1).unwrap();
    let mut opt = OptimizerState::new(params.tensors(), AdamWConfig::default(), sched);
    opt.step(params.tensors_mut(), &grads).unwrap();
    let after = batch_loss(&params, &batch, LossNorm::Normalized).unwrap();
    assert!(after < before, "{after} ≥ {before}");
}

#[test]
fn batches_have_distinct_targets_and_cover_pairs() {
    let f = Fixture::new(120, 8, 1);
    for co_sample in [false, true] {
        let cfg = TrainConfig {
            co_sample,
            ..small_config()
        };
        let t = Trainer::new(cfg, f.data(), net(8)).unwrap();
        let plan = t.plan_epoch(0);
        let mut seen = vec![0; f.pairs.len()];
        for b in &plan {
            assert!(b.len() >= 2 && b.len() <= 8);
            let mut targets: Vec<u64> = b.iter().map(|&p| f.pairs[p].target_row).collect();
            targets.sort_unstable();
            targets.dedup();
            assert_eq!(targets.len(), b.len());
            for &p in b {
                seen[p] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c <= 1));
        assert!(seen.iter().filter(|&&c| c == 1).count() >= f.pairs.len() - 1);
    }
}

#[test]
fn noise_touches_queries_only() {
    let f = Fixture::new(120, 8, 2);
    let t = Trainer::new(small_config(), f.data(), net(8)).unwrap();
    let pairs = [3usize, 9, 40];
    let b = t.make_batch(&pairs, 0).unwrap();
    for (i, &p) in pairs.iter().enumerate() {
        let pr = f.pairs[p];
        let want_t: Vec<f64> = f.targets.row(pr.target_row as usize).iter().map(|&v| f64::from(v)).collect();
        assert_eq!(b.targets.row(i), want_t.as_slice());
        let clean: Vec<f64> = f.queries.row(pr.query_row as usize).iter().map(|&v| f64::from(v)).collect();
        assert_ne!(b.queries.row(i), clean.as_slice());
    }
    let quiet = Trainer::new(
        TrainConfig {
            noise_mode: NoiseMode::None,
            ..small_config()
        },
        f.data(),
        net(8),
    )
    .unwrap();
    let b = quiet.make_batch(&pairs, 0).unwrap();
    let clean: Vec<f64> = f.queries.row(3).iter().map(|&v| f64::from(v)).collect();
    assert_eq!(b.queries.row(0), clean.as_slice());
}

#[test]
fn training_is_deterministic_and_checkpoints() {
    let f = Fixture::new(120, 8, 3);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every: Some(3),
        ..small_config()
    };
    let (p1, log1) = train(cfg.clone(), f.data(), net(8), Some(dir.path())).unwrap();
    let (p2, log2) = crate::par::with_threads(Some(1), || train(cfg, f.data(), net(8), None)).unwrap();
    assert_eq!(log1.steps, log2.steps);
    for (a, b) in p1.tensors().iter().zip(p2.tensors()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(log1.steps.len(), 6);
    let names: Vec<String> = log1
        .checkpoints
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, vec!["step-000003.qhnw", "step-000006.qhnw", "final.qhnw"]);
    let back = load_checkpoint(&dir.path().join("final.qhnw")).unwrap();
    assert_eq!(back.config(), p1.config());
    assert!(log1.epochs.len() == 1 && log1.epochs[0].steps == 6);
    assert!(log1.steps.iter().all(|s| s.applied && s.loss.is_finite()));
}

#[test]
fn nan_loss_aborts_with_dump() {
    let mut f = Fixture::new(120, 8, 4);
    for v in f.queries.data_mut() {
        *v = f32::NAN;
    }
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(small_config(), f.data(), net(8)).unwrap();
    let err = t.step(Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)));
    assert!(err.to_string().contains("nan-batch-step000000.tsv"));
    let dump = std::fs::read_to_string(dir.path().join("nan-batch-step000000.tsv")).unwrap();
    assert_eq!(dump.lines().count(), 9);
}

#[test]
fn trainer_rejects_bad_inputs() {
    let f = Fixture::new(120, 8, 5);
    assert!(Trainer::new(small_config(), f.data(), net(6)).is_err());
    let bad = TrainConfig {
        batch: 1,
        ..small_config()
    };
    assert!(Trainer::new(bad, f.data(), net(8)).is_err());
    let pairs = vec![TrainingPair { query_row: 500, target_row: 0 }];
    let data = TrainData {
        pairs: &pairs,
        ..f.data()
    };
    assert!(matches!(Trainer::new(small_config(), data, net(8)), Err(Error::Config(_))));
}
