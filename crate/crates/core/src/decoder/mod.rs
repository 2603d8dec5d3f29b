//! Decoders for masked point modeling: the locally constrained SSM decoder,
//! its Transformer and LAL counterparts, and the linearity probe.

mod ssm;

pub use ssm::{SsmLayer, SsmMode};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{neighbor_table, AttnMask, Attention, LocalAgg};
use crate::error::{Error, Result};
use crate::geometry::{NeighborTable, Ordering, OrderingSpec};
use crate::nn::{Binding, Init, LayerNorm, Mlp, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FfnKind {
    Ffn,
    Lcffn,
}

impl fmt::Display for FfnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FfnKind::Ffn => "ffn",
            FfnKind::Lcffn => "lcffn",
        })
    }
}

impl FromStr for FfnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ffn" => Ok(FfnKind::Ffn),
            "lcffn" => Ok(FfnKind::Lcffn),
            other => Err(Error::Config(format!("unknown ffn kind '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SublayerKind {
    Ssm,
    Attention,
    Lal,
}

impl fmt::Display for SublayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SublayerKind::Ssm => "ssm",
            SublayerKind::Attention => "attention",
            SublayerKind::Lal => "lal",
        })
    }
}

impl FromStr for SublayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ssm" => Ok(SublayerKind::Ssm),
            "attention" => Ok(SublayerKind::Attention),
            "lal" => Ok(SublayerKind::Lal),
            other => Err(Error::Config(format!("unknown decoder sublayer '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub m_layers: usize,
    pub d: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub d_h: usize,
    pub d_ffn: usize,
    pub k_local: usize,
    pub heads: usize,
    pub ffn_kind: FfnKind,
    pub ordering: OrderingSpec,
    pub sublayer: SublayerKind,
}

impl DecoderConfig {
    pub fn paper() -> Self {
        Self {
            m_layers: 4,
            d: 384,
            d_inner: 768,
            d_state: 16,
            d_h: 32,
            d_ffn: 1536,
            k_local: 5,
            heads: 6,
            ffn_kind: FfnKind::Lcffn,
            ordering: OrderingSpec::single(Ordering::Y),
            sublayer: SublayerKind::Ssm,
        }
    }

    pub fn desk() -> Self {
        Self {
            m_layers: 2,
            d: 128,
            d_inner: 128,
            d_state: 16,
            d_h: 32,
            d_ffn: 256,
            k_local: 5,
            heads: 4,
            ffn_kind: FfnKind::Lcffn,
            ordering: OrderingSpec::single(Ordering::Y),
            sublayer: SublayerKind::Ssm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 {
            return bad("decoder d must be positive".into());
        }
        match self.sublayer {
            SublayerKind::Ssm if self.d_inner == 0 || self.d_state == 0 => {
                return bad("ssm decoder needs d_inner >= 1 and d_state >= 1".into())
            }
            SublayerKind::Attention if self.heads == 0 || !self.d.is_multiple_of(self.heads) => {
                return bad(format!("d = {} not divisible by {} heads", self.d, self.heads))
            }
            _ => {}
        }
        let local = self.ffn_kind == FfnKind::Lcffn || self.sublayer == SublayerKind::Lal;
        if local && (self.d_h == 0 || self.k_local == 0) {
            return bad("local aggregation needs d_h >= 1 and k_local >= 1".into());
        }
        if self.ffn_kind == FfnKind::Ffn && self.d_ffn == 0 {
            return bad("decoder FFN width must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Mixer {
    Ssm(SsmLayer),
    Attention(Attention),
    Lal(LocalAgg),
}

#[derive(Clone, Debug)]
pub enum FeedForward {
    Plain(Mlp),
    Local(LocalAgg),
}

/// Per-forward state: serial orders for the SSM and the neighbor table of
/// all patch centers.
#[derive(Clone, Debug)]
pub struct DecoderContext {
    pub perms: Vec<Vec<usize>>,
    pub table: Option<NeighborTable>,
    pub mode: SsmMode,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub mixer: Mixer,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    /// The sequence-mixing sublayer alone, ordering applied around the SSM.
    ///
    /// With q orders the q permuted copies run through the scan as one
    /// sequence of length q·N; each token's q outputs are averaged.
    pub fn mix<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, h: Var, ctx: &DecoderContext) -> Result<Var> {
        match &self.mixer {
            Mixer::Ssm(ssm) => {
                let n = tape.value(h).rows();
                let q = ctx.perms.len();
                if q == 0 || ctx.perms.iter().any(|pm| pm.len() != n) {
                    return Err(Error::dim("decoder", format!("orderings do not cover {n} tokens")));
                }
                let identity = q == 1 && ctx.perms[0].iter().enumerate().all(|(i, &j)| i == j);
                if identity {
                    return ssm.forward(tape, p, h, ctx.mode);
                }
                let order: Vec<usize> = ctx.perms.iter().flatten().copied().collect();
                let seq = tape.gather_rows(h, &order)?;
                let y = ssm.forward(tape, p, seq, ctx.mode)?;
                let mut back = vec![0usize; n * q];
                for (b, pm) in ctx.perms.iter().enumerate() {
                    for (pos, &tok) in pm.iter().enumerate() {
                        back[tok * q + b] = b * n + pos;
                    }
                }
                let y = tape.gather_rows(y, &back)?;
                if q == 1 {
                    Ok(y)
                } else {
                    tape.segment_mean(y, q)
                }
            }
            Mixer::Attention(attn) => attn.forward(tape, p, h, &AttnMask::Full),
            Mixer::Lal(lal) => lal.forward(tape, p, h, table(ctx)?),
        }
    }

    /// `T += mix(LN₁(T))`, `T += FFN(LN₂(T))` (FFN or LCFFN over centers).
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, x: Var, ctx: &DecoderContext) -> Result<Var> {
        let h = self.ln1.forward(tape, p, x)?;
        let h = self.mix(tape, p, h, ctx)?;
        let x = tape.add(x, h)?;
        let h = self.ln2.forward(tape, p, x)?;
        let h = match &self.ffn {
            FeedForward::Plain(mlp) => mlp.forward(tape, p, h)?,
            FeedForward::Local(lc) => lc.forward(tape, p, h, table(ctx)?)?,
        };
        tape.add(x, h)
    }
}

fn table(ctx: &DecoderContext) -> Result<&NeighborTable> {
    ctx.table
        .as_ref()
        .ok_or_else(|| Error::Contract("local sublayer without neighbor table".into()))
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub layers: Vec<DecoderLayer>,
    pub mode: SsmMode,
}

impl Decoder {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.m_layers);
        for i in 0..cfg.m_layers {
            let base = format!("{name}.layer{i}");
            let mixer = match cfg.sublayer {
                SublayerKind::Ssm => Mixer::Ssm(SsmLayer::new(init, &format!("{base}.ssm"), cfg.d, cfg.d_inner, cfg.d_state)?),
                SublayerKind::Attention => Mixer::Attention(Attention::new(init, &format!("{base}.attn"), cfg.d, cfg.heads)?),
                SublayerKind::Lal => Mixer::Lal(LocalAgg::new(init, &format!("{base}.lal"), cfg.d, cfg.d_h)?),
            };
            let ln1 = LayerNorm::new(init, &format!("{base}.ln1"), cfg.d)?;
            let ln2 = LayerNorm::new(init, &format!("{base}.ln2"), cfg.d)?;
            let ffn = match cfg.ffn_kind {
                FfnKind::Ffn => FeedForward::Plain(Mlp::new(init, &format!("{base}.ffn"), cfg.d, cfg.d_ffn, cfg.d)?),
                FfnKind::Lcffn => FeedForward::Local(LocalAgg::new(init, &format!("{base}.lcffn"), cfg.d, cfg.d_h)?),
            };
            layers.push(DecoderLayer { ln1, mixer, ln2, ffn });
        }
        Ok(Self {
            cfg: cfg.clone(),
            layers,
            mode: SsmMode::Selective,
        })
    }

    pub fn context<T: Scalar>(&self, centers: &Tensor<T>) -> Result<DecoderContext> {
        let local = self.cfg.ffn_kind == FfnKind::Lcffn || self.cfg.sublayer == SublayerKind::Lal;
        Ok(DecoderContext {
            perms: if self.cfg.sublayer == SublayerKind::Ssm {
                self.cfg.ordering.permutations(centers)
            } else {
                Vec::new()
            },
            table: if local {
                Some(neighbor_table(centers, self.cfg.k_local)?)
            } else {
                None
            },
            mode: self.mode,
        })
    }

    /// `T_i = D_i(T_{i−1} + T^p)` over all layers. `t0` holds the visible
    /// tokens followed by the mask queries, `centers` the matching centers.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Binding,
        t0: Var,
        tp: Var,
        centers: &Tensor<T>,
    ) -> Result<Var> {
        if tape.shape(t0) != tape.shape(tp) || tape.value(t0).rows() != centers.rows() {
            return Err(Error::dim(
                "decoder",
                format!(
                    "tokens {:?}, positions {:?}, centers {:?}",
                    tape.shape(t0),
                    tape.shape(tp),
                    centers.shape()
                ),
            ));
        }
        if self.layers.is_empty() {
            return Ok(t0);
        }
        let ctx = self.context(centers)?;
        let mut x = t0;
        for layer in &self.layers {
            let xin = tape.add(x, tp)?;
            x = layer.forward(tape, p, xin, &ctx)?;
        }
        Ok(x)
    }
}

/// Settings for [`linearity_check`].
#[derive(Clone, Debug)]
pub struct LinearityCheck {
    pub trials: usize,
    pub tol: f64,
    pub n_tokens: usize,
    pub unmask_ratio: f64,
    pub seed: u64,
    pub zero_weights: bool,
}

impl Default for LinearityCheck {
    fn default() -> Self {
        Self {
            trials: 100,
            tol: 1e-8,
            n_tokens: 32,
            unmask_ratio: 0.4,
            seed: 0,
            zero_weights: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearityReport {
    pub ssm_linear: bool,
    /// Largest superposition residual of the frozen SSM sublayer.
    pub ssm_max_residual: f64,
    /// Largest |s(X)| on the masked rows, so a vanishing sublayer is visible.
    pub ssm_output_scale: f64,
    /// Smallest superposition residual of the attention sublayer.
    pub attention_nonlinear_gap: f64,
    pub trials: usize,
}

/// Superposition test of the decoder's sequence-mixing sublayer.
///
/// For random pairs of token blocks `X = [X1; X2]`, `Y = [Y1; Y2]` and
/// scalars α, β, measures `max |s(αX + βY) − αs(X) − βs(Y)|` over the
/// masked rows, for a frozen-linear SSM sublayer and a width-matched
/// attention sublayer.
pub fn linearity_check(cfg: &DecoderConfig, check: &LinearityCheck) -> Result<LinearityReport> {
    let n = check.n_tokens;
    if n < 2 {
        return Err(Error::count("linearity_check", "need at least 2 tokens"));
    }
    let visible = ((check.unmask_ratio * n as f64).round() as usize).clamp(1, n - 1);
    let mut ssm_cfg = cfg.clone();
    ssm_cfg.m_layers = 1;
    ssm_cfg.sublayer = SublayerKind::Ssm;
    let mut att_cfg = ssm_cfg.clone();
    att_cfg.sublayer = SublayerKind::Attention;
    if att_cfg.heads == 0 || !att_cfg.d.is_multiple_of(att_cfg.heads) {
        att_cfg.heads = 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(check.seed);
    let mut ssm_store = ParamStore::<f64>::new();
    let mut ssm_dec = Decoder::new(&mut Init::new(&mut ssm_store, check.seed ^ 0x55), "dec", &ssm_cfg)?;
    ssm_dec.mode = SsmMode::FrozenLinear;
    let mut att_store = ParamStore::<f64>::new();
    let att_dec = Decoder::new(&mut Init::new(&mut att_store, check.seed ^ 0xaa), "dec", &att_cfg)?;
    // Fresh layers have zero B/C biases, which would make the frozen scan
    // output identically zero; random weights keep the test meaningful.
    let scale = if check.zero_weights { 0.0 } else { 0.5 };
    ssm_store.randomize(check.seed ^ 0x5a5a, scale);
    att_store.randomize(check.seed ^ 0xa5a5, scale);

    let centers = Tensor::from_fn(&[n, 3], |_| rng.random_range(-1.0..1.0));
    let ssm_ctx = ssm_dec.context(&centers)?;
    let att_ctx = att_dec.context(&centers)?;
    let apply = |store: &ParamStore<f64>, dec: &Decoder, ctx: &DecoderContext, x: &Tensor<f64>| -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let p = store.bind_with(&mut tape, |_| false);
        let xv = tape.constant(x.clone());
        let y = dec.layers[0].mix(&mut tape, &p, xv, ctx)?;
        Ok(tape.value(y).clone())
    };
    let masked_residual = |fxy: &Tensor<f64>, fx: &Tensor<f64>, fy: &Tensor<f64>, a: f64, b: f64| {
        (visible * cfg.d..n * cfg.d)
            .map(|i| (fxy.data()[i] - a * fx.data()[i] - b * fy.data()[i]).abs())
            .fold(0.0, f64::max)
    };

    let mut ssm_max = 0.0f64;
    let mut ssm_scale = 0.0f64;
    let mut att_min = f64::INFINITY;
    for _ in 0..check.trials {
        let x = Tensor::from_fn(&[n, cfg.d], |_| rng.random_range(-1.0..1.0));
        let y = Tensor::from_fn(&[n, cfg.d], |_| rng.random_range(-1.0..1.0));
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let xy = x.zip_map(&y, |u, v| a * u + b * v)?;
        let s = (
            apply(&ssm_store, &ssm_dec, &ssm_ctx, &xy)?,
            apply(&ssm_store, &ssm_dec, &ssm_ctx, &x)?,
            apply(&ssm_store, &ssm_dec, &ssm_ctx, &y)?,
        );
        ssm_max = ssm_max.max(masked_residual(&s.0, &s.1, &s.2, a, b));
        ssm_scale = ssm_scale.max(masked_residual(&s.1, &s.1, &s.1, 0.0, 0.0));
        let t = (
            apply(&att_store, &att_dec, &att_ctx, &xy)?,
            apply(&att_store, &att_dec, &att_ctx, &x)?,
            apply(&att_store, &att_dec, &att_ctx, &y)?,
        );
        att_min = att_min.min(masked_residual(&t.0, &t.1, &t.2, a, b));
    }
    Ok(LinearityReport {
        ssm_linear: ssm_max < check.tol,
        ssm_max_residual: ssm_max,
        ssm_output_scale: ssm_scale,
        attention_nonlinear_gap: if check.trials == 0 { 0.0 } else { att_min },
        trials: check.trials,
    })
}
