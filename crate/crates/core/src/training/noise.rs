use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// How training queries are perturbed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NoiseMode {
    /// `q + u ⊙ ε` with `u ~ U[0,1]^E` and `ε ~ N(0,1)^E`.
    #[default]
    Elementwise,
    /// One `u ~ U[0,1]` per query scaling an elementwise `ε`.
    Scalar,
    None,
}

impl NoiseMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "elementwise" => Ok(Self::Elementwise),
            "scalar" => Ok(Self::Scalar),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!(
                "noise_mode must be elementwise, scalar or none, got {other:?}"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Elementwise => "elementwise",
            Self::Scalar => "scalar",
            Self::None => "none",
        }
    }
}

/// Source of the two noise distributions. Any [`Rng`] is one; tests can
/// substitute a scripted source.
pub trait NoiseSource {
    /// A draw from `U[0,1)`.
    fn uniform(&mut self) -> f64;
    /// A draw from `N(0,1)`.
    fn normal(&mut self) -> f64;
}

impl<R: Rng> NoiseSource for R {
    fn uniform(&mut self) -> f64 {
        self.random::<f64>()
    }

    fn normal(&mut self) -> f64 {
        self.sample(StandardNormal)
    }
}

/// Adds `scale · u ⊙ ε` to `q` in place.
pub fn add_query_noise<S: NoiseSource + ?Sized>(q: &mut [f64], mode: NoiseMode, scale: f64, src: &mut S) {
    match mode {
        NoiseMode::None => {}
        NoiseMode::Elementwise => {
            for v in q.iter_mut() {
                let u = src.uniform();
                let e = src.normal();
                *v += scale * u * e;
            }
        }
        NoiseMode::Scalar => {
            let u = src.uniform();
            for v in q.iter_mut() {
                *v += scale * u * src.normal();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Scripted {
        u: f64,
        calls: usize,
    }

    impl NoiseSource for Scripted {
        fn uniform(&mut self) -> f64 {
            self.calls += 1;
            self.u
        }
        fn normal(&mut self) -> f64 {
            self.calls += 1;
            1.5
        }
    }

    #[test]
    fn zero_uniform_leaves_query() {
        let mut q = vec![0.25, -1.0, 3.0];
        let mut src = Scripted { u: 0.0, calls: 0 };
        add_query_noise(&mut q, NoiseMode::Elementwise, 1.0, &mut src);
        assert_eq!(q, vec![0.25, -1.0, 3.0]);
        assert_eq!(src.calls, 6);
    }

    #[test]
    fn scripted_values_scale_linearly() {
        let mut q = vec![0.0; 4];
        let mut src = Scripted { u: 0.5, calls: 0 };
        add_query_noise(&mut q, NoiseMode::Scalar, 2.0, &mut src);
        assert_eq!(q, vec![1.5; 4]);
        assert_eq!(src.calls, 5);
    }

    #[test]
    fn different_seeds_differ() {
        let mut a = vec![0.0; 8];
        let mut b = vec![0.0; 8];
        add_query_noise(&mut a, NoiseMode::Elementwise, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        add_query_noise(&mut b, NoiseMode::Elementwise, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        assert_ne!(a, b);
    }

    #[test]
    fn none_mode_draws_nothing() {
        let mut q = vec![1.0; 3];
        let mut src = Scripted { u: 1.0, calls: 0 };
        add_query_noise(&mut q, NoiseMode::None, 1.0, &mut src);
        assert_eq!(src.calls, 0);
        assert_eq!(q, vec![1.0; 3]);
    }

    #[test]
    fn parse_round_trips() {
        for m in [NoiseMode::Elementwise, NoiseMode::Scalar, NoiseMode::None] {
            assert_eq!(NoiseMode::parse(m.as_str()).unwrap(), m);
        }
        assert!(NoiseMode::parse("gaussian").is_err());
    }
}
