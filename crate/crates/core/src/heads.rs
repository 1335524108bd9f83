//! Parameterised projections shared by the skeleton induction modules.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::Attention;
use crate::error::{Error, Result};
use crate::nn::{gelu, Dense, LayerNorm, Mlp, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// One dense layer.
    #[default]
    Fc,
    /// Four dense layers with GELU activations.
    Mlp,
    /// Two pre-norm encoder layers followed by a dense layer.
    Transformer,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::Fc, HeadKind::Mlp, HeadKind::Transformer];

    pub fn label(self) -> &'static str {
        match self {
            HeadKind::Fc => "FC",
            HeadKind::Mlp => "MLP",
            HeadKind::Transformer => "Transformer",
        }
    }
}

/// How a loss folds an axis: averaged or summed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    /// Reduces `t` over dimension `dim`, dropping it.
    pub fn apply(self, t: &Tensor, dim: usize) -> Result<Tensor> {
        Ok(match self {
            Reduction::Mean => t.mean(dim)?,
            Reduction::Sum => t.sum(dim)?,
        })
    }
}

const MLP_LAYERS: usize = 4;
const ENCODER_LAYERS: usize = 2;
const ENCODER_HEADS: usize = 2;
const ENCODER_MLP_RATIO: usize = 2;

#[derive(Debug, Clone)]
struct EncoderLayer {
    norm_attn: LayerNorm,
    attn: Attention,
    norm_mlp: LayerNorm,
    mlp: Mlp,
}

impl EncoderLayer {
    fn new(mut scope: Scope, dim: usize) -> Result<Self> {
        let heads = if dim % ENCODER_HEADS == 0 { ENCODER_HEADS } else { 1 };
        Ok(Self {
            norm_attn: LayerNorm::new(scope.pp("norm_attn"), dim)?,
            attn: Attention::new(scope.pp("attn"), dim, heads)?,
            norm_mlp: LayerNorm::new(scope.pp("norm_mlp"), dim)?,
            mlp: Mlp::new(scope.pp("mlp"), dim, dim * ENCODER_MLP_RATIO, dim)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm_attn.forward(x)?)?)?;
        Ok((&x + self.mlp.forward(&self.norm_mlp.forward(&x)?)?)?)
    }
}

#[derive(Debug, Clone)]
enum Layers {
    Fc(Dense),
    Mlp(Vec<Dense>),
    Transformer { encoder: Vec<EncoderLayer>, out: Dense },
}

/// A `d_in -> d_out` map applied to token sequences `(B, n, d_in)` or
/// pooled vectors `(B, d_in)`. Encoder variants attend across the `n` rows.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    kind: HeadKind,
    d_in: usize,
    d_out: usize,
    layers: Layers,
}

impl ProjectionHead {
    pub fn new(mut scope: Scope, kind: HeadKind, d_in: usize, d_out: usize) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(Error::Config("projection widths must be positive".into()));
        }
        let layers = match kind {
            HeadKind::Fc => Layers::Fc(Dense::new(scope.pp("fc"), d_in, d_out)?),
            HeadKind::Mlp => Layers::Mlp(
                (0..MLP_LAYERS)
                    .map(|i| {
                        let out = if i + 1 == MLP_LAYERS { d_out } else { d_in };
                        Dense::new(scope.pp(format!("fc{i}")), d_in, out)
                    })
                    .collect::<Result<_>>()?,
            ),
            HeadKind::Transformer => Layers::Transformer {
                encoder: (0..ENCODER_LAYERS)
                    .map(|i| EncoderLayer::new(scope.pp(format!("layer{i}")), d_in))
                    .collect::<Result<_>>()?,
                out: Dense::new(scope.pp("out"), d_in, d_out)?,
            },
        };
        Ok(Self { kind, d_in, d_out, layers })
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = x.dims().last().copied().unwrap_or(0);
        if last != self.d_in {
            return Err(Error::Contract(format!(
                "projection expects width {}, got {last}",
                self.d_in
            )));
        }
        match &self.layers {
            Layers::Fc(fc) => fc.forward(x),
            Layers::Mlp(fcs) => {
                let mut h = x.clone();
                for (i, fc) in fcs.iter().enumerate() {
                    h = fc.forward(&h)?;
                    if i + 1 < fcs.len() {
                        h = gelu(&h)?;
                    }
                }
                Ok(h)
            }
            Layers::Transformer { encoder, out } => {
                let pooled = x.rank() == 2;
                let mut h = if pooled { x.unsqueeze(1)? } else { x.clone() };
                for layer in encoder {
                    h = layer.forward(&h)?;
                }
                let y = out.forward(&h)?;
                Ok(if pooled { y.squeeze(1)? } else { y })
            }
        }
    }
}
