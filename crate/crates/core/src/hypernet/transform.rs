use crate::error::{Error, Result};
use crate::tensor::{dot_f64acc, Scalar, Tensor2};

/// A rank-`r` linear map `T = Û·V̂ᵀ` on `E`-dimensional embeddings, kept in
/// factored form together with the Gram matrix `G = ÛᵀÛ`.
///
/// Factors are stored transposed (`r × E`, row `j` is column `j` of Û or
/// V̂) so projections read contiguous memory. `G` is rebuilt whenever the
/// factors change.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankTransform<T: Scalar = f64> {
    u_rows: Tensor2<T>,
    v_rows: Tensor2<T>,
    gram: Tensor2<T>,
}

impl<T: Scalar> LowRankTransform<T> {
    /// From `E × r` factors Û and V̂.
    pub fn new(u: &Tensor2<T>, v: &Tensor2<T>) -> Result<Self> {
        Self::from_factor_rows(u.transpose(), v.transpose())
    }

    /// From `r × E` factors (`Ûᵀ`, `V̂ᵀ`).
    pub fn from_factor_rows(u_rows: Tensor2<T>, v_rows: Tensor2<T>) -> Result<Self> {
        if u_rows.shape() != v_rows.shape() || u_rows.rows() == 0 || u_rows.cols() == 0 {
            return Err(Error::dim(
                "low_rank_transform",
                format!("factors {:?} and {:?}", u_rows.shape(), v_rows.shape()),
            ));
        }
        let gram = gram_of(&u_rows);
        Ok(Self {
            u_rows,
            v_rows,
            gram,
        })
    }

    pub fn set_factor_rows(&mut self, u_rows: Tensor2<T>, v_rows: Tensor2<T>) -> Result<()> {
        *self = Self::from_factor_rows(u_rows, v_rows)?;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.u_rows.cols()
    }

    pub fn rank(&self) -> usize {
        self.u_rows.rows()
    }

    /// `Ûᵀ`, `r × E`.
    pub fn u_rows(&self) -> &Tensor2<T> {
        &self.u_rows
    }

    /// `V̂ᵀ`, `r × E`.
    pub fn v_rows(&self) -> &Tensor2<T> {
        &self.v_rows
    }

    /// Û as an `E × r` matrix.
    pub fn u_factors(&self) -> Tensor2<T> {
        self.u_rows.transpose()
    }

    /// V̂ as an `E × r` matrix.
    pub fn v_factors(&self) -> Tensor2<T> {
        self.v_rows.transpose()
    }

    pub fn gram(&self) -> &Tensor2<T> {
        &self.gram
    }

    /// Dense `E × E` matrix `Û·V̂ᵀ`.
    pub fn dense(&self) -> Tensor2<T> {
        let (r, e) = self.u_rows.shape();
        let mut out = Tensor2::<T>::zeros(e, e);
        for a in 0..e {
            let row: &mut [T] = out.row_mut(a);
            for j in 0..r {
                let ua = self.u_rows.get(j, a).as_f64();
                if ua == 0.0 {
                    continue;
                }
                for (o, vb) in row.iter_mut().zip(self.v_rows.row(j).iter().copied()) {
                    *o = T::from_f64(o.as_f64() + ua * vb.as_f64());
                }
            }
        }
        out
    }

    /// `z = V̂ᵀ d`, accumulated in f64.
    pub fn project_into(&self, d: &[T], z: &mut [f64]) {
        for (zj, vj) in z.iter_mut().zip(0..self.rank()) {
            *zj = dot_f64acc(self.v_rows.row(vj), d);
        }
    }

    /// `T d` computed through the factors.
    pub fn apply(&self, d: &[T]) -> Vec<f64> {
        let mut z = vec![0.0; self.rank()];
        self.project_into(d, &mut z);
        let mut out = vec![0.0; self.dim()];
        for (j, &zj) in z.iter().enumerate() {
            for (o, &u) in out.iter_mut().zip(self.u_rows.row(j)) {
                *o += zj * u.as_f64();
            }
        }
        out
    }

    /// `zᵀ G z`, which equals `‖Û z‖²`.
    pub fn gram_quadratic(&self, z: &[f64]) -> f64 {
        let r = self.rank();
        let mut s = 0.0;
        for a in 0..r {
            let row = self.gram.row(a);
            let mut inner = 0.0;
            for b in 0..r {
                inner += row[b].as_f64() * z[b];
            }
            s += z[a] * inner;
        }
        s
    }

    /// Recomputes `G` and fails if the cached copy disagrees.
    pub fn check_gram(&self) -> Result<()> {
        let fresh = gram_of(&self.u_rows);
        let scale = fresh.max_abs().as_f64().max(1.0);
        let tol = 64.0 * T::epsilon().as_f64() * scale;
        for (a, b) in fresh.data().iter().zip(self.gram.data()) {
            if (a.as_f64() - b.as_f64()).abs() > tol {
                return Err(Error::State(
                    "cached Gram matrix is stale relative to the U factor".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> LowRankTransform<U> {
        let u_rows = self.u_rows.cast::<U>();
        let gram = gram_of(&u_rows);
        LowRankTransform {
            u_rows,
            v_rows: self.v_rows.cast(),
            gram,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.u_rows.is_finite() && self.v_rows.is_finite()
    }

    #[cfg(test)]
    pub(crate) fn gram_mut(&mut self) -> &mut Tensor2<T> {
        &mut self.gram
    }
}

fn gram_of<T: Scalar>(u_rows: &Tensor2<T>) -> Tensor2<T> {
    let r = u_rows.rows();
    let mut g = Tensor2::zeros(r, r);
    for a in 0..r {
        for b in a..r {
            let v = T::from_f64(dot_f64acc(u_rows.row(a), u_rows.row(b)));
            g.set(a, b, v);
            g.set(b, a, v);
        }
    }
    g
}
