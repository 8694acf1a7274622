use crate::error::{Error, Result};
use crate::hypernet::{LowRankTransform, TapeTransform};
use crate::tensor::{Tape, Tensor2, Var, NORM_EPS};

/// Whether similarities use unit-normalized vectors (cosine) or raw dots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossNorm {
    #[default]
    Normalized,
    Raw,
}

impl LossNorm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "normalized" => Ok(Self::Normalized),
            "raw" => Ok(Self::Raw),
            other => Err(Error::Config(format!("loss_norm must be normalized or raw, got {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Normalized => "normalized",
            Self::Raw => "raw",
        }
    }
}

/// One contrastive batch: row `i` pairs query `i` with target `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    /// `B × E`, noise already applied.
    pub queries: Tensor2,
    /// `B × E`
    pub targets: Tensor2,
    /// Per row: `(column, weight)` semi-positives.
    pub semi_pos: Vec<Vec<(usize, f64)>>,
    pub tau: f64,
}

impl TrainingBatch {
    pub fn new(queries: Tensor2, targets: Tensor2, semi_pos: Vec<Vec<(usize, f64)>>, tau: f64) -> Result<Self> {
        let b = queries.rows();
        if targets.shape() != queries.shape() || b == 0 || semi_pos.len() != b {
            return Err(Error::dim(
                "training_batch",
                format!(
                    "queries {:?}, targets {:?}, {} semi-positive lists",
                    queries.shape(),
                    targets.shape(),
                    semi_pos.len()
                ),
            ));
        }
        if !(tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        for (i, list) in semi_pos.iter().enumerate() {
            if list.len() > 2 {
                return Err(Error::Config(format!("row {i} has {} semi-positives (max 2)", list.len())));
            }
            for &(j, w) in list {
                if j >= b || j == i || !(w > 0.0 && w < 1.0) {
                    return Err(Error::Config(format!("row {i}: invalid semi-positive ({j}, {w})")));
                }
            }
        }
        Ok(Self {
            queries,
            targets,
            semi_pos,
            tau,
        })
    }

    pub fn len(&self) -> usize {
        self.queries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `α`: 1 on the diagonal, `w_ij` at semi-positives, 0 elsewhere.
    pub fn alpha(&self) -> Tensor2 {
        let b = self.len();
        let mut a = Tensor2::identity(b);
        for (i, list) in self.semi_pos.iter().enumerate() {
            for &(j, w) in list {
                a.set(i, j, w);
            }
        }
        a
    }
}

fn normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n <= NORM_EPS {
        v.iter_mut().for_each(|x| *x = 0.0);
        false
    } else {
        v.iter_mut().for_each(|x| *x /= n);
        true
    }
}

/// `S[i][j] = q̂′_i · normalize(T_i d_j) / τ` (raw dots with [`LossNorm::Raw`]).
pub fn batch_similarity(
    queries: &Tensor2,
    targets: &Tensor2,
    transforms: &[LowRankTransform<f64>],
    tau: f64,
    norm: LossNorm,
) -> Result<Tensor2> {
    let b = queries.rows();
    if transforms.len() != b || targets.cols() != queries.cols() {
        return Err(Error::dim(
            "batch_similarity",
            format!("{b} queries, {} transforms, targets {:?}", transforms.len(), targets.shape()),
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let mut s = Tensor2::zeros(b, targets.rows());
    for i in 0..b {
        let mut q = queries.row(i).to_vec();
        if norm == LossNorm::Normalized && !normalize(&mut q) {
            log::warn!("query {i} has zero norm; its similarities are 0");
        }
        for j in 0..targets.rows() {
            let mut td = transforms[i].apply(targets.row(j));
            if norm == LossNorm::Normalized && !normalize(&mut td) {
                log::warn!("transformed target {j} for query {i} has zero norm; similarity set to 0");
            }
            let dot: f64 = q.iter().zip(&td).map(|(a, c)| a * c).sum();
            s.set(i, j, dot / tau);
        }
    }
    Ok(s)
}

/// Row `i` of `S` on a tape: `1 × B` from the `1 × E` query output, the
/// sample's transform factors and the constant `B × E` targets.
pub fn similarity_row(
    tape: &mut Tape,
    query: Var,
    transform: &TapeTransform,
    targets: Var,
    tau: f64,
    norm: LossNorm,
) -> Result<Var> {
    let vt = tape.transpose(transform.v_rows)?;
    let z = tape.matmul(targets, vt)?;
    let td = tape.matmul(z, transform.u_rows)?;
    let (q, td) = match norm {
        LossNorm::Normalized => (tape.normalize_rows(query)?, tape.normalize_rows(td)?),
        LossNorm::Raw => (query, td),
    };
    let tdt = tape.transpose(td)?;
    let row = tape.matmul(q, tdt)?;
    tape.scale(row, 1.0 / tau)
}

fn log_softmax(xs: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.clone().map(|x| (x - max).exp()).sum::<f64>().ln();
    xs.map(|x| x - lse).collect()
}

/// `(1/2B) Σ_i [−Σ_j α_ij log p_ij − Σ_j α_ji log q_ji]` with `p` the row
/// softmax and `q` the column softmax of `S`.
pub fn symmetric_contrastive_loss(s: &Tensor2, alpha: &Tensor2) -> Result<f64> {
    let b = s.rows();
    if s.shape() != (b, b) || alpha.shape() != (b, b) || b == 0 {
        return Err(Error::dim(
            "symmetric_contrastive_loss",
            format!("S {:?}, alpha {:?}", s.shape(), alpha.shape()),
        ));
    }
    let mut total = 0.0;
    for i in 0..b {
        let lp = log_softmax(s.row(i).iter().copied());
        let lq = log_softmax((0..b).map(|j| s.get(j, i)));
        for j in 0..b {
            total -= alpha.get(i, j) * lp[j];
            total -= alpha.get(j, i) * lq[j];
        }
    }
    Ok(total / (2.0 * b as f64))
}

/// Differentiable form of [`symmetric_contrastive_loss`].
pub fn symmetric_contrastive_loss_tape(tape: &mut Tape, s: Var, alpha: &Tensor2) -> Result<Var> {
    let b = alpha.rows();
    if tape.value(s).shape() != (b, b) || alpha.cols() != b || b == 0 {
        return Err(Error::dim(
            "symmetric_contrastive_loss",
            format!("S {:?}, alpha {:?}", tape.value(s).shape(), alpha.shape()),
        ));
    }
    let lp = tape.log_softmax_rows(s)?;
    let rows = tape.mul_const(lp, alpha.clone())?;
    let st = tape.transpose(s)?;
    let lq = tape.log_softmax_rows(st)?;
    let cols = tape.mul_const(lq, alpha.transpose())?;
    let both = tape.add(rows, cols)?;
    let sum = tape.sum_all(both)?;
    tape.scale(sum, -1.0 / (2.0 * b as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_s_gives_log_b() {
        for b in [2, 5, 32] {
            let s = Tensor2::filled(b, b, 3.7);
            let l = symmetric_contrastive_loss(&s, &Tensor2::identity(b)).unwrap();
            assert!((l - (b as f64).ln()).abs() <= 1e-12);
        }
    }

    #[test]
    fn saturated_diagonal_is_near_zero() {
        let tau = 0.07;
        let b = 8;
        let mut s = Tensor2::filled(b, b, -10.0 / tau);
        for i in 0..b {
            s.set(i, i, 10.0 / tau);
        }
        assert!(symmetric_contrastive_loss(&s, &Tensor2::identity(b)).unwrap() <= 1e-3);
    }

    #[test]
    fn b3_semi_positive_matches_scalar_oracle() {
        let s = [[2.0, 0.5, -1.0], [0.3, 1.5, 0.2], [-0.4, 0.9, 1.1]];
        let st = Tensor2::from_rows(&s.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        let mut alpha = Tensor2::identity(3);
        alpha.set(0, 1, 0.3);
        let got = symmetric_contrastive_loss(&st, &alpha).unwrap();

        let e = |x: f64| x.exp();
        let p = |i: usize, j: usize| e(s[i][j]) / (e(s[i][0]) + e(s[i][1]) + e(s[i][2]));
        let q = |i: usize, j: usize| e(s[i][j]) / (e(s[0][j]) + e(s[1][j]) + e(s[2][j]));
        let row = -(p(0, 0).ln() + 0.3 * p(0, 1).ln()) - p(1, 1).ln() - p(2, 2).ln();
        let col = -q(0, 0).ln() - (q(1, 1).ln() + 0.3 * q(0, 1).ln()) - q(2, 2).ln();
        let want = (row + col) / 6.0;
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }

    #[test]
    fn tape_loss_matches_value_and_finite_differences() {
        let s0 = Tensor2::from_rows(&[vec![0.2, -0.7, 1.1], vec![0.5, 0.1, -0.3], vec![-1.2, 0.4, 0.9]]).unwrap();
        let mut alpha = Tensor2::identity(3);
        alpha.set(2, 0, 0.25);
        alpha.set(1, 2, 0.6);
        let mut tape = Tape::new();
        let s = tape.leaf(s0.clone());
        let l = symmetric_contrastive_loss_tape(&mut tape, s, &alpha).unwrap();
        let want = symmetric_contrastive_loss(&s0, &alpha).unwrap();
        assert!((tape.value(l).get(0, 0) - want).abs() <= 1e-14);
        let g = tape.backward(l).unwrap();
        let g = g.get(s).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let mut p = s0.clone();
                p.set(i, j, p.get(i, j) + h);
                let mut m = s0.clone();
                m.set(i, j, m.get(i, j) - h);
                let fd = (symmetric_contrastive_loss(&p, &alpha).unwrap()
                    - symmetric_contrastive_loss(&m, &alpha).unwrap())
                    / (2.0 * h);
                assert!((g.get(i, j) - fd).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn symmetric_s_with_identity_alpha_splits_evenly() {
        let s = Tensor2::from_rows(&[vec![1.0, 0.2, -0.5], vec![0.2, 0.7, 0.3], vec![-0.5, 0.3, 2.0]]).unwrap();
        let total = symmetric_contrastive_loss(&s, &Tensor2::identity(3)).unwrap();
        let row_only: f64 = (0..3)
            .map(|i| -log_softmax(s.row(i).iter().copied())[i])
            .sum::<f64>()
            / 3.0;
        assert!((total - row_only).abs() < 1e-14);
    }

    #[test]
    fn row_shift_leaves_row_softmax() {
        let s = Tensor2::from_rows(&[vec![1.0, 0.2], vec![0.4, -0.1]]).unwrap();
        let mut shifted = s.clone();
        for v in shifted.row_mut(0) {
            *v += 5.0;
        }
        let a = log_softmax(s.row(0).iter().copied());
        let b = log_softmax(shifted.row(0).iter().copied());
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-14));
    }

    fn rank1(u: &[f64], v: &[f64]) -> LowRankTransform<f64> {
        LowRankTransform::from_factor_rows(Tensor2::row_vector(u), Tensor2::row_vector(v)).unwrap()
    }

    #[test]
    fn two_by_two_similarity_matches_hand_arithmetic() {
        let q = Tensor2::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 2.0, 0.0]]).unwrap();
        let d = Tensor2::from_rows(&[vec![1.0, 2.0, 0.0], vec![0.0, 1.0, -1.0]]).unwrap();
        let t = [rank1(&[1.0, 1.0, 0.0], &[0.0, 1.0, 1.0]), rank1(&[0.0, 1.0, 2.0], &[1.0, 0.0, 0.0])];
        let tau = 0.5;
        let s = batch_similarity(&q, &d, &t, tau, LossNorm::Normalized).unwrap();
        // T_0 d = u0 (v0·d): v0·d_0 = 2, v0·d_1 = 0 → T_0 d_1 = 0.
        // q̂_0 = (1,0,1)/√2, normalize(u0) = (1,1,0)/√2 → 1/2.
        assert!((s.get(0, 0) - 0.5 / tau).abs() <= 1e-12);
        assert_eq!(s.get(0, 1), 0.0);
        // T_1 d = u1 (d_x): d_0x = 1, d_1x = 0.
        // q̂_1 = (0,1,0), normalize(u1) = (0,1,2)/√5.
        assert!((s.get(1, 0) - (1.0 / 5f64.sqrt()) / tau).abs() <= 1e-12);
        assert_eq!(s.get(1, 1), 0.0);
    }

    #[test]
    fn aligned_case_and_scale_invariance() {
        let d = Tensor2::from_rows(&[vec![0.6, 0.8, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let basis = Tensor2::from_rows(&[vec![0.6, 0.8, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let t = LowRankTransform::from_factor_rows(basis.clone(), basis).unwrap();
        let tau = 0.07;
        let s = batch_similarity(&d, &d, &[t.clone(), t.clone()], tau, LossNorm::Normalized).unwrap();
        assert!((s.get(0, 0) - 1.0 / tau).abs() <= 1e-12);
        let mut d5 = d.clone();
        for v in d5.row_mut(1) {
            *v *= 5.0;
        }
        let s5 = batch_similarity(&d, &d5, &[t.clone(), t], tau, LossNorm::Normalized).unwrap();
        assert!((s5.get(0, 1) - s.get(0, 1)).abs() <= 1e-12);
        assert!((s5.get(1, 1) - s.get(1, 1)).abs() <= 1e-12);
    }

    #[test]
    fn tape_row_matches_value_similarity() {
        let q = Tensor2::from_rows(&[vec![0.3, -0.2, 0.9, 0.1]]).unwrap();
        let d = Tensor2::from_rows(&[vec![1.0, 0.5, -0.5, 0.2], vec![0.1, 0.1, 0.7, -0.9], vec![0.0, 1.0, 0.0, 0.0]])
            .unwrap();
        let u = Tensor2::from_rows(&[vec![0.5, 0.1, 0.0, 0.3], vec![-0.2, 0.4, 0.8, 0.0]]).unwrap();
        let v = Tensor2::from_rows(&[vec![0.1, 0.9, 0.3, 0.0], vec![0.7, 0.0, -0.4, 0.2]]).unwrap();
        let t = LowRankTransform::from_factor_rows(u.clone(), v.clone()).unwrap();
        for norm in [LossNorm::Normalized, LossNorm::Raw] {
            let want = batch_similarity(&q, &d, std::slice::from_ref(&t), 0.1, norm).unwrap();
            let mut tape = Tape::new();
            let qv = tape.constant(q.clone());
            let dv = tape.constant(d.clone());
            let tt = TapeTransform {
                u_rows: tape.constant(u.clone()),
                v_rows: tape.constant(v.clone()),
            };
            let row = similarity_row(&mut tape, qv, &tt, dv, 0.1, norm).unwrap();
            for j in 0..3 {
                assert!((tape.value(row).get(0, j) - want.get(0, j)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn batch_validation() {
        let q = Tensor2::zeros(2, 3);
        assert!(TrainingBatch::new(q.clone(), q.clone(), vec![vec![(1, 0.5)], vec![]], 0.07).is_ok());
        assert!(TrainingBatch::new(q.clone(), q.clone(), vec![vec![(0, 0.5)], vec![]], 0.07).is_err());
        assert!(TrainingBatch::new(q.clone(), q.clone(), vec![vec![(1, 1.0)], vec![]], 0.07).is_err());
        assert!(TrainingBatch::new(q.clone(), q.clone(), vec![vec![], vec![]], 0.0).is_err());
        let b = TrainingBatch::new(q.clone(), q, vec![vec![(1, 0.25)], vec![]], 0.07).unwrap();
        let a = b.alpha();
        assert_eq!(a.data(), &[1.0, 0.25, 0.0, 1.0]);
    }
}
