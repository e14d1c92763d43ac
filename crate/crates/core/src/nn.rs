//! Layers built on the tape: dense, 1D residual blocks, multi-head
//! self-attention, post-norm transformer encoder layers and the antenna
//! embedding table.
//!
//! Layers are descriptors: they hold parameter paths and sizes, while the
//! values live in a [`ParamSet`]. `init` registers freshly initialized
//! parameters, `forward` reads them through [`Bindings`] on a tape.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Bindings, ParamSet, Tape, Tensor, Var};

fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..bound))
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: String,
    pub bias: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl DenseLayer {
    pub fn new(prefix: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: join(prefix, "weight"),
            bias: join(prefix, "bias"),
            d_in,
            d_out,
        }
    }

    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layer = Self::new(prefix, d_in, d_out);
        params.insert(&layer.weight, uniform_fan_in(&[d_in, d_out], d_in, rng))?;
        params.insert(&layer.bias, Tensor::zeros([d_out]))?;
        Ok(layer)
    }

    /// `x · W + b` over the trailing dimension.
    pub fn forward(&self, tape: &mut Tape, bound: &Bindings, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if *shape.last().unwrap() != self.d_in {
            return Err(Error::shape("dense", &shape, &[self.d_in, self.d_out]));
        }
        let rows = tape.value(x).len() / self.d_in;
        let flat = if shape.len() == 2 {
            x
        } else {
            tape.reshape(x, [rows, self.d_in])?
        };
        let y = tape.matmul(flat, bound.get(&self.weight)?)?;
        let y = tape.add_bias(y, bound.get(&self.bias)?)?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = self.d_out;
            tape.reshape(y, out)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv1dLayer {
    pub kernels: String,
    pub bias: String,
    pub c_in: usize,
    pub c_out: usize,
    pub width: usize,
}

impl Conv1dLayer {
    pub fn new(prefix: &str, c_in: usize, c_out: usize, width: usize) -> Self {
        Self {
            kernels: join(prefix, "kernels"),
            bias: join(prefix, "bias"),
            c_in,
            c_out,
            width,
        }
    }

    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if width % 2 == 0 {
            return Err(Error::Config(format!("conv width must be odd, got {width}")));
        }
        let layer = Self::new(prefix, c_in, c_out, width);
        params.insert(
            &layer.kernels,
            uniform_fan_in(&[c_out, c_in, width], c_in * width, rng),
        )?;
        params.insert(&layer.bias, Tensor::zeros([c_out]))?;
        Ok(layer)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bindings, x: Var) -> Result<Var> {
        tape.conv1d_same(x, bound.get(&self.kernels)?, bound.get(&self.bias)?)
    }
}

/// `ReLU(conv₂(ReLU(conv₁(x))) + skip(x))`; the skip is a width-1
/// projection when the channel count changes, identity otherwise.
#[derive(Clone, Debug)]
pub struct ResNet1DBlock {
    pub conv1: Conv1dLayer,
    pub conv2: Conv1dLayer,
    pub skip: Option<Conv1dLayer>,
    pub taps: usize,
}

impl ResNet1DBlock {
    pub fn new(prefix: &str, c_in: usize, c_out: usize, width: usize, taps: usize) -> Self {
        Self {
            conv1: Conv1dLayer::new(&join(prefix, "conv1"), c_in, c_out, width),
            conv2: Conv1dLayer::new(&join(prefix, "conv2"), c_out, c_out, width),
            skip: (c_in != c_out).then(|| Conv1dLayer::new(&join(prefix, "skip"), c_in, c_out, 1)),
            taps,
        }
    }

    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        width: usize,
        taps: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let conv1 = Conv1dLayer::init(params, &join(prefix, "conv1"), c_in, c_out, width, rng)?;
        let conv2 = Conv1dLayer::init(params, &join(prefix, "conv2"), c_out, c_out, width, rng)?;
        let skip = if c_in != c_out {
            Some(Conv1dLayer::init(params, &join(prefix, "skip"), c_in, c_out, 1, rng)?)
        } else {
            None
        };
        Ok(Self {
            conv1,
            conv2,
            skip,
            taps,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bindings, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if *shape.last().unwrap() != self.taps {
            return Err(Error::shape("resnet block", &shape, &[self.conv1.c_in, self.taps]));
        }
        let h = self.conv1.forward(tape, bound, x)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, bound, h)?;
        let s = match &self.skip {
            Some(proj) => proj.forward(tape, bound, x)?,
            None => x,
        };
        let y = tape.add(h, s)?;
        Ok(tape.relu(y))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalEncoderConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub block_channels: Vec<usize>,
    pub kernel_width: usize,
    pub taps: usize,
    pub embed_dim: usize,
}

impl SignalEncoderConfig {
    /// Stem 3→16, blocks 16→16→32→64, tap pooling, dense 64→`embed_dim`.
    pub fn standard(in_channels: usize, embed_dim: usize) -> Self {
        Self {
            in_channels,
            stem_channels: 16,
            block_channels: vec![16, 32, 64],
            kernel_width: 3,
            taps: crate::sim::TAPS,
            embed_dim,
        }
    }
}

/// 1D-ResNet stack mapping `[batch, c, taps]` to `[batch, embed_dim]`:
/// stem conv, residual blocks, mean over taps, dense projection.
#[derive(Clone, Debug)]
pub struct SignalEncoder {
    pub config: SignalEncoderConfig,
    pub stem: Conv1dLayer,
    pub blocks: Vec<ResNet1DBlock>,
    pub proj: DenseLayer,
}

impl SignalEncoder {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        config: &SignalEncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let stem = Conv1dLayer::init(
            params,
            &join(prefix, "stem"),
            config.in_channels,
            config.stem_channels,
            config.kernel_width,
            rng,
        )?;
        let mut blocks = Vec::with_capacity(config.block_channels.len());
        let mut c = config.stem_channels;
        for (i, &c_out) in config.block_channels.iter().enumerate() {
            blocks.push(ResNet1DBlock::init(
                params,
                &join(prefix, &format!("block{i}")),
                c,
                c_out,
                config.kernel_width,
                config.taps,
                rng,
            )?);
            c = c_out;
        }
        let proj = DenseLayer::init(params, &join(prefix, "proj"), c, config.embed_dim, rng)?;
        Ok(Self {
            config: config.clone(),
            stem,
            blocks,
            proj,
        })
    }

    /// Rebuilds the descriptor for parameters created by [`SignalEncoder::init`].
    pub fn describe(prefix: &str, config: &SignalEncoderConfig) -> Self {
        let stem = Conv1dLayer::new(
            &join(prefix, "stem"),
            config.in_channels,
            config.stem_channels,
            config.kernel_width,
        );
        let mut c = config.stem_channels;
        let blocks = config
            .block_channels
            .iter()
            .enumerate()
            .map(|(i, &c_out)| {
                let b = ResNet1DBlock::new(
                    &join(prefix, &format!("block{i}")),
                    c,
                    c_out,
                    config.kernel_width,
                    config.taps,
                );
                c = c_out;
                b
            })
            .collect();
        let proj = DenseLayer::new(&join(prefix, "proj"), c, config.embed_dim);
        Self {
            config: config.clone(),
            stem,
            blocks,
            proj,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bindings, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.config.in_channels || shape[2] != self.config.taps {
            return Err(Error::shape(
                "signal encoder",
                &shape,
                &[self.config.in_channels, self.config.taps],
            ));
        }
        let h = self.stem.forward(tape, bound, x)?;
        let mut h = tape.relu(h);
        for block in &self.blocks {
            h = block.forward(tape, bound, h)?;
        }
        let pooled = tape.mean_axis(h, 2)?;
        self.proj.forward(tape, bound, pooled)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub d: usize,
    pub wq: String,
    pub wk: String,
    pub wv: String,
    pub wo: String,
}

impl MultiHeadAttention {
    pub fn new(prefix: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {d} must be divisible by head count {heads}"
            )));
        }
        Ok(Self {
            heads,
            d,
            wq: join(prefix, "wq"),
            wk: join(prefix, "wk"),
            wv: join(prefix, "wv"),
            wo: join(prefix, "wo"),
        })
    }

    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        d: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mha = Self::new(prefix, d, heads)?;
        for path in [&mha.wq, &mha.wk, &mha.wv, &mha.wo] {
            params.insert(path, uniform_fan_in(&[d, d], d, rng))?;
        }
        Ok(mha)
    }

    /// Returns the attention output and the attention node (whose saved
    /// probabilities can be read with [`Tape::attention_weights`]).
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        bound: &Bindings,
        x: Var,
        groups: usize,
    ) -> Result<(Var, Var)> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.d {
            return Err(Error::shape("multi-head attention", &shape, &[self.d]));
        }
        let q = tape.matmul(x, bound.get(&self.wq)?)?;
        let k = tape.matmul(x, bound.get(&self.wk)?)?;
        let v = tape.matmul(x, bound.get(&self.wv)?)?;
        let a = tape.attention(q, k, v, groups, self.heads)?;
        let out = tape.matmul(a, bound.get(&self.wo)?)?;
        Ok((out, a))
    }

    /// Self-attention over `groups` sets stacked as `[groups · n, d]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bindings, x: Var, groups: usize) -> Result<Var> {
        Ok(self.forward_traced(tape, bound, x, groups)?.0)
    }
}

/// Post-norm transformer encoder layer:
/// `y = LN(x + MHA(x))`, `z = LN(y + FF(y))`, `FF = W₂·ReLU(W₁·y)`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub mha: MultiHeadAttention,
    pub ff1: DenseLayer,
    pub ff2: DenseLayer,
    pub ln1: (String, String),
    pub ln2: (String, String),
}

impl EncoderLayer {
    pub fn new(prefix: &str, d: usize, heads: usize, d_ff: usize) -> Result<Self> {
        Ok(Self {
            mha: MultiHeadAttention::new(&join(prefix, "attn"), d, heads)?,
            ff1: DenseLayer::new(&join(prefix, "ff1"), d, d_ff),
            ff2: DenseLayer::new(&join(prefix, "ff2"), d_ff, d),
            ln1: (join(prefix, "ln1.gain"), join(prefix, "ln1.offset")),
            ln2: (join(prefix, "ln2.gain"), join(prefix, "ln2.offset")),
        })
    }

    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layer = Self::new(prefix, d, heads, d_ff)?;
        MultiHeadAttention::init(params, &join(prefix, "attn"), d, heads, rng)?;
        DenseLayer::init(params, &join(prefix, "ff1"), d, d_ff, rng)?;
        DenseLayer::init(params, &join(prefix, "ff2"), d_ff, d, rng)?;
        for (gain, offset) in [&layer.ln1, &layer.ln2] {
            params.insert(gain, Tensor::full([d], 1.0))?;
            params.insert(offset, Tensor::zeros([d]))?;
        }
        Ok(layer)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bindings, x: Var, groups: usize) -> Result<Var> {
        let a = self.mha.forward(tape, bound, x, groups)?;
        let r = tape.add(x, a)?;
        let y = tape.layer_norm(r, bound.get(&self.ln1.0)?, bound.get(&self.ln1.1)?)?;
        let f = self.ff1.forward(tape, bound, y)?;
        let f = tape.relu(f);
        let f = self.ff2.forward(tape, bound, f)?;
        let r = tape.add(y, f)?;
        tape.layer_norm(r, bound.get(&self.ln2.0)?, bound.get(&self.ln2.1)?)
    }
}

/// One learnable row per physical antenna.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub rows: String,
    pub a_max: usize,
    pub d: usize,
}

/// Standard deviation of the initial antenna embedding rows.
pub const EMBEDDING_INIT_STD: f64 = 0.02;

impl EmbeddingTable {
    pub fn new(path: &str, a_max: usize, d: usize) -> Self {
        Self {
            rows: path.to_string(),
            a_max,
            d,
        }
    }

    pub fn init(
        params: &mut ParamSet,
        path: &str,
        a_max: usize,
        d: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, EMBEDDING_INIT_STD).expect("valid std");
        params.insert(path, Tensor::from_fn([a_max, d], |_| normal.sample(rng)))?;
        Ok(Self::new(path, a_max, d))
    }

    pub fn validate_ids(&self, ids: &[usize]) -> Result<()> {
        for (i, &id) in ids.iter().enumerate() {
            if id >= self.a_max {
                return Err(Error::AntennaId {
                    id,
                    a_max: self.a_max,
                });
            }
            if ids[..i].contains(&id) {
                return Err(Error::Validation(format!("duplicate antenna id {id}")));
            }
        }
        Ok(())
    }

    /// Rows for one set of distinct antenna ids, in the given order.
    pub fn lookup(&self, tape: &mut Tape, bound: &Bindings, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Validation("empty antenna id list".into()));
        }
        self.validate_ids(ids)?;
        tape.gather_rows(bound.get(&self.rows)?, ids)
    }

    /// Rows for several stacked sets; each chunk of `set_len` ids must be
    /// distinct, ids may repeat across sets.
    pub fn lookup_sets(
        &self,
        tape: &mut Tape,
        bound: &Bindings,
        ids: &[usize],
        set_len: usize,
    ) -> Result<Var> {
        if set_len == 0 || ids.is_empty() || ids.len() % set_len != 0 {
            return Err(Error::Validation("antenna ids do not tile into sets".into()));
        }
        for chunk in ids.chunks(set_len) {
            self.validate_ids(chunk)?;
        }
        tape.gather_rows(bound.get(&self.rows)?, ids)
    }
}
