use crate::decoder::Decoder;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::nn::{Binding, Init, LayerNorm, Linear, Mlp, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

use super::config::ModelConfig;
use super::patch::{PatchSet, Patches};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosEnc {
    Encoder,
    Decoder,
}

/// Embedding, encoder positional encoding and encoder: the part shared by
/// pretraining and classification, stored under `embed.*`, `encoder_pe.*`
/// and `encoder.*`.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub embed: Mlp,
    pub epe: Mlp,
    pub encoder: Encoder,
    pub norm: LayerNorm,
    pub k_group: usize,
}

pub const BACKBONE_PREFIXES: [&str; 3] = ["embed.", "encoder_pe.", "encoder."];

impl Backbone {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d();
        Ok(Self {
            embed: Mlp::new(init, "embed", 3, cfg.embed_hidden, d)?,
            epe: Mlp::new(init, "encoder_pe", 3, cfg.pe_hidden, d)?,
            encoder: Encoder::new(init, "encoder", &cfg.encoder)?,
            norm: LayerNorm::new(init, "encoder.norm", d)?,
            k_group: cfg.k_group,
        })
    }

    /// Shared per-point MLP over `(M·K)×3` relative points, then a
    /// channel-wise max over each patch's K points.
    pub fn embed_patches<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, points: Var) -> Result<Var> {
        let h = self.embed.forward(tape, p, points)?;
        tape.segment_max(h, self.k_group)
    }

    /// Encoded tokens `LN(E_n)` for the given patch points and centers.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, points: Var, centers: Var) -> Result<Var> {
        let e0 = self.embed_patches(tape, p, points)?;
        let ep = self.epe.forward(tape, p, centers)?;
        let c = tape.value(centers).clone();
        let en = self.encoder.forward(tape, p, e0, ep, &c)?;
        self.norm.forward(tape, p, en)
    }
}

/// Masked point modeling network: backbone, mask token, decoder and
/// reconstruction head.
#[derive(Clone, Debug)]
pub struct PretrainModel<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub dpe: Mlp,
    pub mask_token: ParamId,
    pub decoder: Decoder,
    pub dec_norm: LayerNorm,
    pub recon: Mlp,
}

/// Differentiable inputs of one pretraining example.
#[derive(Clone, Copy, Debug)]
pub struct PretrainInputs {
    /// `(rN·K)×3` visible patch points.
    pub visible_points: Var,
    /// `((1−r)N·K)×3` masked patch points, the reconstruction target.
    pub target: Var,
    pub centers_visible: Var,
    pub centers_masked: Var,
}

impl<T: Scalar> PretrainModel<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);
        let d = cfg.d();
        let backbone = Backbone::new(&mut init, cfg)?;
        let dpe = Mlp::new(&mut init, "decoder_pe", 3, cfg.pe_hidden, d)?;
        let mask_token = init.uniform("mask_token", &[d], -0.02, 0.02)?;
        let decoder = Decoder::new(&mut init, "decoder", &cfg.decoder)?;
        let dec_norm = LayerNorm::new(&mut init, "decoder.norm", d)?;
        let recon = Mlp::new(&mut init, "recon", d, d, 3 * cfg.k_group)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            backbone,
            dpe,
            mask_token,
            decoder,
            dec_norm,
            recon,
        })
    }

    pub fn positional(&self, tape: &mut Tape<T>, p: &Binding, coords: Var, which: PosEnc) -> Result<Var> {
        match which {
            PosEnc::Encoder => self.backbone.epe.forward(tape, p, coords),
            PosEnc::Decoder => self.dpe.forward(tape, p, coords),
        }
    }

    /// Relative coordinates `(1−r)N×(K·3)` predicted from decoded tokens.
    pub fn reconstruct(&self, tape: &mut Tape<T>, p: &Binding, r: Var) -> Result<Var> {
        self.recon.forward(tape, p, r)
    }

    pub fn inputs(&self, tape: &mut Tape<T>, ps: &PatchSet<T>) -> Result<PretrainInputs> {
        if ps.patches.k_group() != self.cfg.k_group {
            return Err(Error::dim(
                "pretrain",
                format!("patches of {} points, model expects {}", ps.patches.k_group(), self.cfg.k_group),
            ));
        }
        Ok(PretrainInputs {
            visible_points: tape.constant(ps.patches.points_of(&ps.visible)?),
            target: tape.constant(ps.patches.points_of(&ps.masked)?),
            centers_visible: tape.constant(ps.centers_visible()?),
            centers_masked: tape.constant(ps.centers_masked()?),
        })
    }

    /// Decoder output at the masked positions, `R = T_m[rN:]`.
    pub fn decode_masked(&self, tape: &mut Tape<T>, p: &Binding, inp: &PretrainInputs) -> Result<Var> {
        let en = self
            .backbone
            .encode(tape, p, inp.visible_points, inp.centers_visible)?;
        let n_vis = tape.value(inp.centers_visible).rows();
        let n_mask = tape.value(inp.centers_masked).rows();
        let ones = tape.constant(Tensor::ones(&[n_mask, 1]));
        let token = tape.reshape(p.var(self.mask_token), &[1, self.cfg.d()])?;
        let q = tape.matmul(ones, token)?;
        let t0 = tape.concat_rows(&[en, q])?;
        let centers = tape.concat_rows(&[inp.centers_visible, inp.centers_masked])?;
        let tp = self.dpe.forward(tape, p, centers)?;
        let c = tape.value(centers).clone();
        let tm = self.decoder.forward(tape, p, t0, tp, &c)?;
        let tm = self.dec_norm.forward(tape, p, tm)?;
        tape.slice_rows(tm, n_vis, n_mask)
    }

    /// Chamfer loss averaged over masked patches.
    pub fn loss_on(&self, tape: &mut Tape<T>, p: &Binding, inp: &PretrainInputs) -> Result<Var> {
        let r = self.decode_masked(tape, p, inp)?;
        let n_mask = tape.value(r).rows();
        let rm = self.reconstruct(tape, p, r)?;
        let rm = tape.reshape(rm, &[n_mask * self.cfg.k_group, 3])?;
        tape.chamfer(rm, inp.target, n_mask)
    }

    pub fn loss(&self, tape: &mut Tape<T>, p: &Binding, ps: &PatchSet<T>) -> Result<Var> {
        let inp = self.inputs(tape, ps)?;
        self.loss_on(tape, p, &inp)
    }

    /// Loss value without gradients.
    pub fn eval_loss(&self, ps: &PatchSet<T>) -> Result<T> {
        let mut tape = Tape::new();
        let p = self.store.bind_with(&mut tape, |_| false);
        let l = self.loss(&mut tape, &p, ps)?;
        Ok(tape.value(l).item())
    }
}

/// Backbone plus a pooled MLP classification head (`cls.*`).
#[derive(Clone, Debug)]
pub struct Classifier<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub head: [Linear; 3],
}

impl<T: Scalar> Classifier<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);
        let d = cfg.d();
        let backbone = Backbone::new(&mut init, cfg)?;
        let h = cfg.head_hidden;
        let head = [
            Linear::new(&mut init, "cls.fc1", 2 * d, h, true)?,
            Linear::new(&mut init, "cls.fc2", h, h, true)?,
            Linear::new(&mut init, "cls.fc3", h, cfg.classes, true)?,
        ];
        Ok(Self {
            cfg: cfg.clone(),
            store,
            backbone,
            head,
        })
    }

    /// Pooled features `[max; mean]` of the encoded tokens, `1×2d`.
    pub fn features(&self, tape: &mut Tape<T>, p: &Binding, points: Var, centers: Var) -> Result<Var> {
        let en = self.backbone.encode(tape, p, points, centers)?;
        let n = tape.value(en).rows();
        let mx = tape.segment_max(en, n)?;
        let mean = tape.segment_mean(en, n)?;
        tape.concat_cols(&[mx, mean])
    }

    pub fn head_forward(&self, tape: &mut Tape<T>, p: &Binding, feats: Var) -> Result<Var> {
        let h = self.head[0].forward(tape, p, feats)?;
        let h = tape.gelu(h);
        let h = self.head[1].forward(tape, p, h)?;
        let h = tape.gelu(h);
        self.head[2].forward(tape, p, h)
    }

    /// Class logits `1×classes` for one cloud, all patches visible.
    pub fn logits(&self, tape: &mut Tape<T>, p: &Binding, patches: &Patches<T>) -> Result<Var> {
        let all: Vec<usize> = (0..patches.n()).collect();
        let pts = tape.constant(patches.points_of(&all)?);
        let c = tape.constant(patches.centers.clone());
        let f = self.features(tape, p, pts, c)?;
        self.head_forward(tape, p, f)
    }

    pub fn predict(&self, patches: &Patches<T>) -> Result<usize> {
        let mut tape = Tape::new();
        let p = self.store.bind_with(&mut tape, |_| false);
        let l = self.logits(&mut tape, &p, patches)?;
        let row = tape.value(l).data();
        Ok(row
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0)
    }
}
