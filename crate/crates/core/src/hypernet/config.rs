use crate::error::{Error, Result};

/// Shape of the query adaptation network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HypernetConfig {
    /// Backbone embedding dimension `E`.
    pub embed_dim: usize,
    /// Rank `r` of the generated transform; also the number of U and of V tokens.
    pub rank: usize,
    /// Token width inside the transformer.
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Number of refinement passes `L`.
    pub refine_steps: usize,
    /// When set, the control token accumulates its transformer outputs
    /// across steps like the U/V tokens instead of being re-formed from the
    /// encoded query each step.
    pub control_carry: bool,
}

impl HypernetConfig {
    pub const DEFAULT_RANK: usize = 64;
    pub const DEFAULT_LAYERS: usize = 4;
    pub const DEFAULT_MODEL_DIM: usize = 256;
    pub const DEFAULT_HEADS: usize = 4;
    pub const DEFAULT_REFINE_STEPS: usize = 4;

    pub fn new(embed_dim: usize) -> Self {
        Self {
            embed_dim,
            rank: Self::DEFAULT_RANK,
            model_dim: Self::DEFAULT_MODEL_DIM,
            layers: Self::DEFAULT_LAYERS,
            heads: Self::DEFAULT_HEADS,
            ffn_dim: 4 * Self::DEFAULT_MODEL_DIM,
            refine_steps: Self::DEFAULT_REFINE_STEPS,
            control_carry: false,
        }
    }

    /// Small network used for gradient checks and desk-scale experiments.
    pub fn tiny(embed_dim: usize) -> Self {
        Self {
            embed_dim,
            rank: 4,
            model_dim: 32,
            layers: 2,
            heads: 2,
            ffn_dim: 64,
            refine_steps: 2,
            control_carry: false,
        }
    }

    pub fn token_count(&self) -> usize {
        2 * self.rank + 1
    }

    pub fn validate(&self) -> Result<()> {
        let nonzero = [
            ("embed_dim", self.embed_dim),
            ("rank", self.rank),
            ("model_dim", self.model_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("refine_steps", self.refine_steps),
        ];
        for (name, v) in nonzero {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}
