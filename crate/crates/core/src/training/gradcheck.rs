use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{add_query_noise, batch_loss, batch_loss_and_grad, LossNorm, NoiseMode, TrainingBatch};
use crate::error::Result;
use crate::hypernet::{HypernetConfig, HypernetParams};
use crate::tensor::Tensor2;

/// Step for central differences.
pub const FD_STEP: f64 = 1e-4;
/// Denominator floor in the relative error, so entries whose gradient is
/// numerically zero are judged on absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-6;
/// Largest relative error accepted by the gradient check.
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Entry with the worst error: (flat index, analytic, numeric).
    pub worst: (usize, f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub loss: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn entries_checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }

    /// One line per tensor with its worst entry.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("tensor\tchecked\tmax_rel_err\tworst_index\tanalytic\tnumeric\n");
        for t in &self.tensors {
            let (i, a, n) = t.worst;
            out.push_str(&format!("{}\t{}\t{:.3e}\t{i}\t{a:.6e}\t{n:.6e}\n", t.name, t.checked, t.max_rel_err));
        }
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the backpropagated gradient of the batch loss with central
/// differences. Tensors with at most `per_tensor` entries are checked in
/// full; larger ones at `per_tensor` random entries.
pub fn check_gradients(
    params: &HypernetParams,
    batch: &TrainingBatch,
    norm: LossNorm,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let (loss, _, grads) = batch_loss_and_grad(params, batch, norm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut tensors = Vec::with_capacity(params.len());
    for (k, (name, g)) in params.names().iter().zip(&grads).enumerate() {
        let n = g.data().len();
        let entries: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        let mut check = TensorCheck {
            name: name.clone(),
            checked: entries.len(),
            max_rel_err: 0.0,
            worst: (0, 0.0, 0.0),
        };
        for idx in entries {
            let orig = params.tensors()[k].data()[idx];
            probe.tensors_mut()[k].data_mut()[idx] = orig + FD_STEP;
            let up = batch_loss(&probe, batch, norm)?;
            probe.tensors_mut()[k].data_mut()[idx] = orig - FD_STEP;
            let down = batch_loss(&probe, batch, norm)?;
            probe.tensors_mut()[k].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = g.data()[idx];
            let err = relative_error(analytic, numeric);
            if err > check.max_rel_err {
                check.max_rel_err = err;
                check.worst = (idx, analytic, numeric);
            }
        }
        tensors.push(check);
    }
    Ok(GradCheckReport { loss, tensors })
}

/// A seeded problem at the tiny configuration (E=16, r=4, M=32, L=2,
/// B=4): noisy queries, one semi-positive, initialized weights.
pub fn tiny_problem(seed: u64) -> Result<(HypernetParams, TrainingBatch)> {
    let e = 16;
    let config = HypernetConfig::tiny(e);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = HypernetParams::init(&config, &mut rng)?;
    let b = 4;
    let mut random = |rows: usize| {
        Tensor2::from_vec(rows, e, (0..rows * e).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    let mut queries = random(b)?;
    let targets = random(b)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for i in 0..b {
        add_query_noise(queries.row_mut(i), NoiseMode::Elementwise, 1.0, &mut noise_rng);
    }
    let semi = vec![vec![(2, 0.3)], vec![], vec![(0, 0.2), (3, 0.1)], vec![]];
    Ok((params, TrainingBatch::new(queries, targets, semi, 0.07)?))
}
