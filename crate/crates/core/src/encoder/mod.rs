//! Patch-token encoders: the locally constrained compact encoder (LAL + FFN
//! layers) and the Transformer baseline with optional top-K attention.

mod attention;
mod local;

pub use attention::{topk_attention_mask, AttnMask, Attention, TopKSpace};
pub use local::{neighbor_table, LocalAgg};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::NeighborTable;
use crate::nn::{Binding, Init, LayerNorm, Mlp};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderVariant {
    Lcm,
    Transformer,
    TransformerTopKFeature,
    TransformerTopKGeometry,
}

impl EncoderVariant {
    pub fn is_attention(self) -> bool {
        self != EncoderVariant::Lcm
    }
}

impl fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderVariant::Lcm => "lcm",
            EncoderVariant::Transformer => "transformer",
            EncoderVariant::TransformerTopKFeature => "transformer-topk-feature",
            EncoderVariant::TransformerTopKGeometry => "transformer-topk-geometry",
        })
    }
}

impl FromStr for EncoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "lcm" => Ok(EncoderVariant::Lcm),
            "transformer" => Ok(EncoderVariant::Transformer),
            "transformer-topk-feature" => Ok(EncoderVariant::TransformerTopKFeature),
            "transformer-topk-geometry" => Ok(EncoderVariant::TransformerTopKGeometry),
            other => Err(Error::Config(format!("unknown encoder variant '{other}'"))),
        }
    }
}

/// Structural ablations of the compact encoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// FFN only.
    A,
    /// Down/Up MLPs and FFN, each token aggregating only itself.
    B,
    /// Local aggregation without FFN.
    C,
    /// Local aggregation and FFN.
    D,
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Ablation::A),
            "B" | "b" => Ok(Ablation::B),
            "C" | "c" => Ok(Ablation::C),
            "D" | "d" => Ok(Ablation::D),
            other => Err(Error::Config(format!("unknown ablation '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d: usize,
    pub d_h: usize,
    pub d_ffn: usize,
    pub k_local: usize,
    pub heads: usize,
    pub variant: EncoderVariant,
    pub top_k: Option<usize>,
    pub ablation: Ablation,
}

impl EncoderConfig {
    /// Paper-scale compact encoder. `d_h` and `d_ffn` come from
    /// [`crate::cost::calibrate_lcm`]; the test suite re-runs the search.
    pub fn lcm_paper() -> Self {
        Self {
            n_layers: 12,
            d: 384,
            d_h: 80,
            d_ffn: 128,
            k_local: 5,
            heads: 6,
            variant: EncoderVariant::Lcm,
            top_k: None,
            ablation: Ablation::D,
        }
    }

    pub fn transformer_paper() -> Self {
        Self {
            n_layers: 12,
            d: 384,
            d_h: 0,
            d_ffn: 1536,
            k_local: 0,
            heads: 6,
            variant: EncoderVariant::Transformer,
            top_k: None,
            ablation: Ablation::D,
        }
    }

    pub fn lcm_desk() -> Self {
        Self {
            n_layers: 4,
            d: 128,
            d_h: 32,
            d_ffn: 256,
            k_local: 5,
            heads: 4,
            variant: EncoderVariant::Lcm,
            top_k: None,
            ablation: Ablation::D,
        }
    }

    pub fn transformer_desk() -> Self {
        Self {
            variant: EncoderVariant::Transformer,
            d_ffn: 512,
            ..Self::lcm_desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 {
            return bad("encoder d must be positive".into());
        }
        match self.variant {
            EncoderVariant::Lcm => {
                if self.ablation != Ablation::A && (self.d_h == 0 || self.k_local == 0) {
                    return bad("compact encoder needs d_h >= 1 and k_local >= 1".into());
                }
                if self.ablation != Ablation::C && self.d_ffn == 0 {
                    return bad("encoder FFN width must be positive".into());
                }
                if self.top_k.is_some() {
                    return bad("top_k is only meaningful for top-K attention variants".into());
                }
            }
            v => {
                if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
                    return bad(format!("d = {} not divisible by {} heads", self.d, self.heads));
                }
                if self.d_ffn == 0 {
                    return bad("encoder FFN width must be positive".into());
                }
                let wants_k = v != EncoderVariant::Transformer;
                match self.top_k {
                    Some(0) => return bad("top_k must be >= 1".into()),
                    Some(_) if !wants_k => return bad("top_k set for full-attention encoder".into()),
                    None if wants_k => return bad(format!("{v} encoder needs top_k")),
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

/// Per-forward state shared by every layer: the neighbor table of the
/// compact encoder or the attention mask of the Transformer.
#[derive(Clone, Debug)]
pub struct EncoderContext<T> {
    pub table: Option<NeighborTable>,
    pub mask: AttnMask<T>,
}

#[derive(Clone, Debug)]
pub struct CompactLayer {
    pub lal: Option<(LayerNorm, LocalAgg)>,
    pub ffn: Option<(LayerNorm, Mlp)>,
}

#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
}

#[derive(Clone, Debug)]
pub enum EncoderLayer {
    Compact(CompactLayer),
    Attention(AttentionLayer),
}

impl EncoderLayer {
    /// One pre-norm residual layer: `x += sub₁(LN₁(x))`, `x += FFN(LN₂(x))`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Binding,
        x: Var,
        ctx: &EncoderContext<T>,
    ) -> Result<Var> {
        match self {
            EncoderLayer::Compact(l) => {
                let mut x = x;
                if let Some((ln, lal)) = &l.lal {
                    let table = ctx
                        .table
                        .as_ref()
                        .ok_or_else(|| Error::Contract("compact layer without neighbor table".into()))?;
                    let h = ln.forward(tape, p, x)?;
                    let h = lal.forward(tape, p, h, table)?;
                    x = tape.add(x, h)?;
                }
                if let Some((ln, ffn)) = &l.ffn {
                    let h = ln.forward(tape, p, x)?;
                    let h = ffn.forward(tape, p, h)?;
                    x = tape.add(x, h)?;
                }
                Ok(x)
            }
            EncoderLayer::Attention(l) => {
                let h = l.ln1.forward(tape, p, x)?;
                let h = l.attn.forward(tape, p, h, &ctx.mask)?;
                let x = tape.add(x, h)?;
                let h = l.ln2.forward(tape, p, x)?;
                let h = l.ffn.forward(tape, p, h)?;
                tape.add(x, h)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let base = format!("{name}.layer{i}");
            let layer = if cfg.variant == EncoderVariant::Lcm {
                let lal = if cfg.ablation == Ablation::A {
                    None
                } else {
                    Some((
                        LayerNorm::new(init, &format!("{base}.ln1"), cfg.d)?,
                        LocalAgg::new(init, &format!("{base}.lal"), cfg.d, cfg.d_h)?,
                    ))
                };
                let ffn = if cfg.ablation == Ablation::C {
                    None
                } else {
                    Some((
                        LayerNorm::new(init, &format!("{base}.ln2"), cfg.d)?,
                        Mlp::new(init, &format!("{base}.ffn"), cfg.d, cfg.d_ffn, cfg.d)?,
                    ))
                };
                EncoderLayer::Compact(CompactLayer { lal, ffn })
            } else {
                EncoderLayer::Attention(AttentionLayer {
                    ln1: LayerNorm::new(init, &format!("{base}.ln1"), cfg.d)?,
                    attn: Attention::new(init, &format!("{base}.attn"), cfg.d, cfg.heads)?,
                    ln2: LayerNorm::new(init, &format!("{base}.ln2"), cfg.d)?,
                    ffn: Mlp::new(init, &format!("{base}.ffn"), cfg.d, cfg.d_ffn, cfg.d)?,
                })
            };
            layers.push(layer);
        }
        Ok(Self {
            cfg: cfg.clone(),
            layers,
        })
    }

    /// Neighbor table or attention mask for the given token centers.
    pub fn context<T: Scalar>(&self, centers: &Tensor<T>) -> Result<EncoderContext<T>> {
        let n = centers.rows();
        let cfg = &self.cfg;
        let mut ctx = EncoderContext {
            table: None,
            mask: AttnMask::Full,
        };
        match cfg.variant {
            EncoderVariant::Lcm => {
                ctx.table = match cfg.ablation {
                    Ablation::A => None,
                    Ablation::B => Some(NeighborTable::identity(n)),
                    Ablation::C | Ablation::D => Some(neighbor_table(centers, cfg.k_local)?),
                };
            }
            EncoderVariant::Transformer => {}
            EncoderVariant::TransformerTopKFeature => {
                ctx.mask = AttnMask::FeatureTopK(cfg.top_k.unwrap_or(n).min(n));
            }
            EncoderVariant::TransformerTopKGeometry => {
                let k = cfg.top_k.unwrap_or(n).min(n);
                ctx.mask = AttnMask::Fixed(topk_attention_mask(centers, k, TopKSpace::Geometry)?);
            }
        }
        Ok(ctx)
    }

    /// `E_i = T_i(E_{i−1} + E^p)` over all layers.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Binding,
        e0: Var,
        ep: Var,
        centers: &Tensor<T>,
    ) -> Result<Var> {
        if tape.shape(e0) != tape.shape(ep) || tape.value(e0).rows() != centers.rows() {
            return Err(Error::dim(
                "encoder",
                format!(
                    "tokens {:?}, positions {:?}, centers {:?}",
                    tape.shape(e0),
                    tape.shape(ep),
                    centers.shape()
                ),
            ));
        }
        if self.layers.is_empty() {
            return Ok(e0);
        }
        let ctx = self.context(centers)?;
        let mut x = e0;
        for layer in &self.layers {
            let xin = tape.add(x, ep)?;
            x = layer.forward(tape, p, xin, &ctx)?;
        }
        Ok(x)
    }
}
