use rand::Rng;
use rand_distr::StandardNormal;

use super::config::HypernetConfig;
use crate::error::{Error, Result};
use crate::tensor::nn::{AttentionVars, LinearVars, Mlp2Vars, NormVars};
use crate::tensor::{Tape, Tensor2, Var};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
struct LinearIds {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct NormIds {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct Mlp2Ids {
    fc1: LinearIds,
    norm: NormIds,
    fc2: LinearIds,
}

#[derive(Clone, Copy, Debug)]
struct BlockIds {
    norm1: NormIds,
    q: LinearIds,
    k: LinearIds,
    v: LinearIds,
    o: LinearIds,
    norm2: NormIds,
    ffn1: LinearIds,
    ffn2: LinearIds,
}

#[derive(Clone, Debug)]
struct Layout {
    query_encoder: Mlp2Ids,
    timestep_table: usize,
    blocks: Vec<BlockIds>,
    final_norm: NormIds,
    decoder_u: Mlp2Ids,
    decoder_v: Mlp2Ids,
    decoder_q: Mlp2Ids,
}

enum Fill<'r, R> {
    Init(&'r mut R),
    Zero,
}

struct Builder<'r, R> {
    names: Vec<String>,
    tensors: Vec<Tensor2>,
    fill: Fill<'r, R>,
}

impl<R: Rng> Builder<'_, R> {
    fn push(&mut self, name: String, t: Tensor2) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn weight(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let t = match &mut self.fill {
            Fill::Zero => Tensor2::zeros(rows, cols),
            Fill::Init(rng) => {
                let data = (0..rows * cols).map(|_| truncated_normal(*rng) * INIT_STD).collect();
                Tensor2::from_vec(rows, cols, data).expect("sized")
            }
        };
        self.push(name, t)
    }

    fn zeros(&mut self, name: String, rows: usize, cols: usize) -> usize {
        self.push(name, Tensor2::zeros(rows, cols))
    }

    fn linear(&mut self, prefix: &str, inp: usize, out: usize) -> LinearIds {
        LinearIds {
            w: self.weight(format!("{prefix}.w"), inp, out),
            b: self.zeros(format!("{prefix}.b"), 1, out),
        }
    }

    fn norm(&mut self, prefix: &str, dim: usize) -> NormIds {
        let gain = match self.fill {
            Fill::Zero => Tensor2::zeros(1, dim),
            Fill::Init(_) => Tensor2::filled(1, dim, 1.0),
        };
        NormIds {
            gain: self.push(format!("{prefix}.gain"), gain),
            bias: self.zeros(format!("{prefix}.bias"), 1, dim),
        }
    }

    fn mlp2(&mut self, prefix: &str, inp: usize, hidden: usize, out: usize) -> Mlp2Ids {
        Mlp2Ids {
            fc1: self.linear(&format!("{prefix}.fc1"), inp, hidden),
            norm: self.norm(&format!("{prefix}.norm"), hidden),
            fc2: self.linear(&format!("{prefix}.fc2"), hidden, out),
        }
    }
}

/// Standard normal truncated to ±2.
fn truncated_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

/// All learnable weights of the hypernetwork as an ordered list of named
/// matrices. Order and names are a pure function of the config.
#[derive(Clone, Debug)]
pub struct HypernetParams {
    config: HypernetConfig,
    names: Vec<String>,
    tensors: Vec<Tensor2>,
    layout: Layout,
}

impl PartialEq for HypernetParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.names == other.names && self.tensors == other.tensors
    }
}

impl HypernetParams {
    /// Truncated-normal (std 0.02) projections, zero biases, unit norm gains.
    pub fn init<R: Rng>(config: &HypernetConfig, rng: &mut R) -> Result<Self> {
        Self::build(config, Fill::Init(rng))
    }

    /// Every tensor, norm gains included, set to zero.
    pub fn zeroed(config: &HypernetConfig) -> Result<Self> {
        Self::build::<rand_chacha::ChaCha8Rng>(config, Fill::Zero)
    }

    fn build<R: Rng>(config: &HypernetConfig, fill: Fill<'_, R>) -> Result<Self> {
        config.validate()?;
        let (e, m, f) = (config.embed_dim, config.model_dim, config.ffn_dim);
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            fill,
        };
        let query_encoder = b.mlp2("query_encoder", e, m, m);
        let timestep_table = b.weight("timestep_table".into(), config.refine_steps, m);
        let blocks = (0..config.layers)
            .map(|i| {
                let p = format!("blocks.{i}");
                BlockIds {
                    norm1: b.norm(&format!("{p}.norm1"), m),
                    q: b.linear(&format!("{p}.attn.q"), m, m),
                    k: b.linear(&format!("{p}.attn.k"), m, m),
                    v: b.linear(&format!("{p}.attn.v"), m, m),
                    o: b.linear(&format!("{p}.attn.o"), m, m),
                    norm2: b.norm(&format!("{p}.norm2"), m),
                    ffn1: b.linear(&format!("{p}.ffn.fc1"), m, f),
                    ffn2: b.linear(&format!("{p}.ffn.fc2"), f, m),
                }
            })
            .collect();
        let final_norm = b.norm("final_norm", m);
        let decoder_u = b.mlp2("decoder_u", m, m, e);
        let decoder_v = b.mlp2("decoder_v", m, m, e);
        let decoder_q = b.mlp2("decoder_q", m, m, e);
        Ok(Self {
            config: config.clone(),
            names: b.names,
            tensors: b.tensors,
            layout: Layout {
                query_encoder,
                timestep_table,
                blocks,
                final_norm,
                decoder_u,
                decoder_v,
                decoder_q,
            },
        })
    }

    pub fn config(&self) -> &HypernetConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor2] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor2] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor2> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    /// Replaces tensor `name`, which must keep its shape.
    pub fn set(&mut self, name: &str, value: Tensor2) -> Result<()> {
        let slot = self
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::dim(
                "set_parameter",
                format!("{name}: {:?} vs {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    /// Records every tensor on `tape` as a trainable leaf (or a constant).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> NetVars {
        let all: Vec<Var> = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let lin = |l: LinearIds| LinearVars {
            w: all[l.w],
            b: all[l.b],
        };
        let norm = |n: NormIds| NormVars {
            gain: all[n.gain],
            bias: all[n.bias],
        };
        let mlp = |p: Mlp2Ids| Mlp2Vars {
            fc1: lin(p.fc1),
            norm: norm(p.norm),
            fc2: lin(p.fc2),
        };
        let l = &self.layout;
        let blocks = l
            .blocks
            .iter()
            .map(|bk| BlockVars {
                norm1: norm(bk.norm1),
                attn: AttentionVars {
                    q: lin(bk.q),
                    k: lin(bk.k),
                    v: lin(bk.v),
                    o: lin(bk.o),
                },
                norm2: norm(bk.norm2),
                ffn1: lin(bk.ffn1),
                ffn2: lin(bk.ffn2),
            })
            .collect();
        let pe = tape.constant(positional_encoding(self.config.token_count(), self.config.model_dim));
        NetVars {
            config: self.config.clone(),
            query_encoder: mlp(l.query_encoder),
            timestep_table: all[l.timestep_table],
            blocks,
            final_norm: norm(l.final_norm),
            decoder_u: mlp(l.decoder_u),
            decoder_v: mlp(l.decoder_v),
            decoder_q: mlp(l.decoder_q),
            positional: pe,
            all,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockVars {
    pub norm1: NormVars,
    pub attn: AttentionVars,
    pub norm2: NormVars,
    pub ffn1: LinearVars,
    pub ffn2: LinearVars,
}

/// Parameters recorded on one tape, in the same order as
/// [`HypernetParams::tensors`].
#[derive(Clone, Debug)]
pub struct NetVars {
    pub config: HypernetConfig,
    pub all: Vec<Var>,
    pub query_encoder: Mlp2Vars,
    pub timestep_table: Var,
    pub blocks: Vec<BlockVars>,
    pub final_norm: NormVars,
    pub decoder_u: Mlp2Vars,
    pub decoder_v: Mlp2Vars,
    pub decoder_q: Mlp2Vars,
    /// Sinusoidal encodings for token positions `0..2r+1`.
    pub positional: Var,
}

/// Base-10000 sinusoidal encodings: even columns `sin(pos/10000^(2i/M))`,
/// odd columns the matching cosine.
pub fn positional_encoding(tokens: usize, dim: usize) -> Tensor2 {
    let mut pe = Tensor2::zeros(tokens, dim);
    for pos in 0..tokens {
        for c in 0..dim {
            let pair = (c / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            pe.set(pos, c, if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}
