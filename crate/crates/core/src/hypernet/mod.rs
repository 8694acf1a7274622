//! The query adaptation network.
//!
//! A query embedding is encoded into a control token. A bank of `r` U-tokens
//! and `r` V-tokens starts at zero and is refined `L` times: each step runs
//! the shared transformer over `[control + timestep_t; U; V]` (plus
//! positional encodings) and adds its outputs to the U/V tokens. Separate
//! MLPs then decode the tokens into the columns of `Û`, `V̂`, and the final
//! control output into the customized query `q′`.

mod checkpoint;
mod config;
mod params;
mod transform;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::HypernetConfig;
pub use params::{positional_encoding, BlockVars, HypernetParams, NetVars, INIT_STD};
pub use transform::LowRankTransform;

use crate::error::{Error, Result};
use crate::tensor::nn::{layer_norm, linear, mlp2, multi_head_attention};
use crate::tensor::{Tape, Tensor2, Var};

/// Per-query refinement state recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TokenBank {
    /// Control slot: the transformer's control output of the latest step
    /// (or the running sum of those outputs with `control_carry`).
    pub control: Var,
    /// `r × M`
    pub u_tokens: Var,
    /// `r × M`
    pub v_tokens: Var,
    pub step: usize,
}

impl TokenBank {
    pub fn zeros(tape: &mut Tape, config: &HypernetConfig) -> Self {
        let (r, m) = (config.rank, config.model_dim);
        Self {
            control: tape.constant(Tensor2::zeros(1, m)),
            u_tokens: tape.constant(Tensor2::zeros(r, m)),
            v_tokens: tape.constant(Tensor2::zeros(r, m)),
            step: 0,
        }
    }
}

/// Transform factors on a tape, each `r × E` (row `j` = column `j` of Û/V̂).
#[derive(Clone, Copy, Debug)]
pub struct TapeTransform {
    pub u_rows: Var,
    pub v_rows: Var,
}

impl TapeTransform {
    pub fn to_value(&self, tape: &Tape) -> Result<LowRankTransform<f64>> {
        LowRankTransform::from_factor_rows(tape.value(self.u_rows).clone(), tape.value(self.v_rows).clone())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TapeOutput {
    /// `1 × E`, not normalized.
    pub query: Var,
    pub transform: TapeTransform,
}

impl NetVars {
    /// Control token for query `q` (`1 × E`), before the timestep is added.
    pub fn encode_query(&self, tape: &mut Tape, q: Var) -> Result<Var> {
        let shape = tape.value(q).shape();
        if shape != (1, self.config.embed_dim) {
            return Err(Error::dim(
                "encode_query",
                format!("query {shape:?}, expected (1, {})", self.config.embed_dim),
            ));
        }
        mlp2(tape, q, &self.query_encoder)
    }

    /// Shared pre-norm encoder stack followed by a final layer norm.
    pub fn transformer(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut x = x;
        for b in &self.blocks {
            let h = layer_norm(tape, x, &b.norm1)?;
            let a = multi_head_attention(tape, h, &b.attn, self.config.heads)?;
            x = tape.add(x, a)?;
            let h = layer_norm(tape, x, &b.norm2)?;
            let h = linear(tape, h, &b.ffn1)?;
            let h = tape.gelu(h)?;
            let h = linear(tape, h, &b.ffn2)?;
            x = tape.add(x, h)?;
        }
        layer_norm(tape, x, &self.final_norm)
    }

    /// One refinement pass at timestep `t` (`0 ≤ t < L`).
    pub fn refine_step(&self, tape: &mut Tape, bank: &TokenBank, control_base: Var, t: usize) -> Result<TokenBank> {
        let (r, l) = (self.config.rank, self.config.refine_steps);
        if t >= l {
            return Err(Error::State(format!("timestep {t} out of range 0..{l}")));
        }
        let ts = tape.slice_rows(self.timestep_table, t, 1)?;
        let mut control_in = tape.add(control_base, ts)?;
        if self.config.control_carry {
            control_in = tape.add(control_in, bank.control)?;
        }
        let seq = tape.concat_rows(&[control_in, bank.u_tokens, bank.v_tokens])?;
        let seq = tape.add(seq, self.positional)?;
        let out = self.transformer(tape, seq)?;
        let d_control = tape.slice_rows(out, 0, 1)?;
        let d_u = tape.slice_rows(out, 1, r)?;
        let d_v = tape.slice_rows(out, 1 + r, r)?;
        let control = if self.config.control_carry {
            tape.add(bank.control, d_control)?
        } else {
            d_control
        };
        Ok(TokenBank {
            control,
            u_tokens: tape.add(bank.u_tokens, d_u)?,
            v_tokens: tape.add(bank.v_tokens, d_v)?,
            step: bank.step + 1,
        })
    }

    fn require_refined(&self, bank: &TokenBank, what: &str) -> Result<()> {
        if bank.step < self.config.refine_steps {
            return Err(Error::State(format!(
                "{what}: token bank refined {} of {} steps",
                bank.step, self.config.refine_steps
            )));
        }
        Ok(())
    }

    pub fn decode_transform(&self, tape: &mut Tape, bank: &TokenBank) -> Result<TapeTransform> {
        self.require_refined(bank, "decode_transform")?;
        self.decode_factors(tape, bank)
    }

    pub(crate) fn decode_factors(&self, tape: &mut Tape, bank: &TokenBank) -> Result<TapeTransform> {
        Ok(TapeTransform {
            u_rows: mlp2(tape, bank.u_tokens, &self.decoder_u)?,
            v_rows: mlp2(tape, bank.v_tokens, &self.decoder_v)?,
        })
    }

    pub fn decode_query(&self, tape: &mut Tape, bank: &TokenBank) -> Result<Var> {
        self.require_refined(bank, "decode_query")?;
        mlp2(tape, bank.control, &self.decoder_q)
    }

    /// `(q′, T) = H(q)` for a `1 × E` query.
    pub fn forward(&self, tape: &mut Tape, q: Var) -> Result<TapeOutput> {
        let base = self.encode_query(tape, q)?;
        let mut bank = TokenBank::zeros(tape, &self.config);
        for t in 0..self.config.refine_steps {
            bank = self.refine_step(tape, &bank, base, t)?;
        }
        Ok(TapeOutput {
            query: self.decode_query(tape, &bank)?,
            transform: self.decode_transform(tape, &bank)?,
        })
    }
}

impl HypernetParams {
    /// Inference: customized query and transform for one embedding.
    pub fn forward(&self, q: &[f64]) -> Result<(Vec<f64>, LowRankTransform<f64>)> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape, false);
        let qv = tape.constant(Tensor2::row_vector(q));
        let out = net.forward(&mut tape, qv)?;
        Ok((tape.value(out.query).data().to_vec(), out.transform.to_value(&tape)?))
    }
}

#[cfg(test)]
mod tests;
