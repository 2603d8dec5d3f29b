use std::collections::BTreeMap;
use std::str::FromStr;

use crate::decoder::{DecoderConfig, FfnKind, SublayerKind};
use crate::encoder::{Ablation, EncoderConfig, EncoderVariant};
use crate::error::{Error, Result};
use crate::geometry::OrderingSpec;

/// Architecture of the pretraining and classification models.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Hidden width of the per-point embedding MLP (3 → h → d).
    pub embed_hidden: usize,
    /// Hidden width of both positional-encoding MLPs (3 → h → d).
    pub pe_hidden: usize,
    /// Hidden width of the classification MLP (2d → h → h → classes).
    pub head_hidden: usize,
    pub classes: usize,
    /// Points per patch; the reconstruction head emits `k_group × 3`.
    pub k_group: usize,
}

impl ModelConfig {
    pub fn lcm_paper() -> Self {
        Self {
            encoder: EncoderConfig::lcm_paper(),
            decoder: DecoderConfig::paper(),
            embed_hidden: 128,
            pe_hidden: 128,
            head_hidden: 256,
            classes: 15,
            k_group: 32,
        }
    }

    pub fn transformer_paper() -> Self {
        Self {
            encoder: EncoderConfig::transformer_paper(),
            ..Self::lcm_paper()
        }
    }

    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::lcm_desk(),
            decoder: DecoderConfig::desk(),
            embed_hidden: 128,
            pe_hidden: 128,
            head_hidden: 256,
            classes: 8,
            k_group: 32,
        }
    }

    /// Two-layer, width-16 model used by gradient and property checks.
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig {
                n_layers: 2,
                d: 16,
                d_h: 8,
                d_ffn: 24,
                k_local: 3,
                heads: 2,
                ..EncoderConfig::lcm_desk()
            },
            decoder: DecoderConfig {
                m_layers: 2,
                d: 16,
                d_inner: 16,
                d_state: 4,
                d_h: 8,
                d_ffn: 24,
                k_local: 3,
                heads: 2,
                ffn_kind: FfnKind::Lcffn,
                ordering: "Y".parse().unwrap(),
                sublayer: SublayerKind::Ssm,
            },
            embed_hidden: 12,
            pe_hidden: 12,
            head_hidden: 16,
            classes: 3,
            k_group: 8,
        }
    }

    pub fn d(&self) -> usize {
        self.encoder.d
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.decoder.d != self.encoder.d {
            return Err(Error::Config(format!(
                "decoder d {} differs from encoder d {}",
                self.decoder.d, self.encoder.d
            )));
        }
        for (name, v) in [
            ("embed_hidden", self.embed_hidden),
            ("pe_hidden", self.pe_hidden),
            ("head_hidden", self.head_hidden),
            ("k_group", self.k_group),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.classes < 2 {
            return Err(Error::Config("model.classes must be at least 2".into()));
        }
        Ok(())
    }

    /// Flat `key → value` form; keys are those accepted by [`Self::set`].
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let e = &self.encoder;
        let d = &self.decoder;
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("encoder.variant", e.variant.to_string());
        put("encoder.n_layers", e.n_layers.to_string());
        put("encoder.d", e.d.to_string());
        put("encoder.d_h", e.d_h.to_string());
        put("encoder.d_ffn", e.d_ffn.to_string());
        put("encoder.k_local", e.k_local.to_string());
        put("encoder.heads", e.heads.to_string());
        put("encoder.top_k", e.top_k.map_or("none".into(), |k| k.to_string()));
        put("encoder.ablation", e.ablation.to_string());
        put("decoder.m_layers", d.m_layers.to_string());
        put("decoder.d_inner", d.d_inner.to_string());
        put("decoder.d_state", d.d_state.to_string());
        put("decoder.d_h", d.d_h.to_string());
        put("decoder.d_ffn", d.d_ffn.to_string());
        put("decoder.k_local", d.k_local.to_string());
        put("decoder.heads", d.heads.to_string());
        put("decoder.ffn_kind", d.ffn_kind.to_string());
        put("decoder.ordering", d.ordering.to_string());
        put("decoder.hilbert_bits", d.ordering.hilbert_bits().to_string());
        put("decoder.sublayer", d.sublayer.to_string());
        put("embed_hidden", self.embed_hidden.to_string());
        put("pe_hidden", self.pe_hidden.to_string());
        put("head_hidden", self.head_hidden.to_string());
        put("classes", self.classes.to_string());
        put("k_group", self.k_group.to_string());
        m
    }

    /// Sets one key of the flat form. `encoder.d` also sets the decoder width.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, v: &str) -> Result<V> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
        }
        let e = &mut self.encoder;
        let d = &mut self.decoder;
        match key {
            "encoder.variant" => e.variant = EncoderVariant::from_str(value)?,
            "encoder.n_layers" => e.n_layers = num(key, value)?,
            "encoder.d" => {
                e.d = num(key, value)?;
                d.d = e.d;
            }
            "encoder.d_h" => e.d_h = num(key, value)?,
            "encoder.d_ffn" => e.d_ffn = num(key, value)?,
            "encoder.k_local" => e.k_local = num(key, value)?,
            "encoder.heads" => e.heads = num(key, value)?,
            "encoder.top_k" => {
                e.top_k = match value.trim() {
                    "none" | "" => None,
                    v => Some(num(key, v)?),
                }
            }
            "encoder.ablation" => e.ablation = Ablation::from_str(value)?,
            "decoder.m_layers" => d.m_layers = num(key, value)?,
            "decoder.d_inner" => d.d_inner = num(key, value)?,
            "decoder.d_state" => d.d_state = num(key, value)?,
            "decoder.d_h" => d.d_h = num(key, value)?,
            "decoder.d_ffn" => d.d_ffn = num(key, value)?,
            "decoder.k_local" => d.k_local = num(key, value)?,
            "decoder.heads" => d.heads = num(key, value)?,
            "decoder.ffn_kind" => d.ffn_kind = FfnKind::from_str(value)?,
            "decoder.ordering" => {
                let bits = d.ordering.hilbert_bits();
                d.ordering = OrderingSpec::from_str(value)?.with_bits(bits)?;
            }
            "decoder.hilbert_bits" => {
                d.ordering = d.ordering.clone().with_bits(num(key, value)?)?;
            }
            "decoder.sublayer" => d.sublayer = SublayerKind::from_str(value)?,
            "embed_hidden" => self.embed_hidden = num(key, value)?,
            "pe_hidden" => self.pe_hidden = num(key, value)?,
            "head_hidden" => self.head_hidden = num(key, value)?,
            "classes" => self.classes = num(key, value)?,
            "k_group" => self.k_group = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown model key '{key}'"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.to_kv().iter().map(|(k, v)| format!("model.{k}={v}\n")).collect()
    }
}

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            lr: 1e-3,
            min_lr: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            warmup_epochs: 10,
            epochs: 50,
            batch_size: 32,
            seed: 0,
        }
    }

    pub fn finetune() -> Self {
        Self {
            lr: 5e-4,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("train.lr must be > 0, got {}", self.lr)));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "train.warmup_epochs {} exceeds train.epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("train.beta1/beta2 must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut cfg = ModelConfig::desk();
        cfg.decoder.ordering = "HXYZ".parse().unwrap();
        cfg.encoder.ablation = Ablation::B;
        let mut back = ModelConfig::lcm_paper();
        for (k, v) in cfg.to_kv() {
            back.set(&k, &v).unwrap();
        }
        back.decoder.d = back.encoder.d;
        assert_eq!(back, cfg);
        assert!(back.set("encoder.depth", "3").is_err());
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::desk().validate().is_ok());
        assert!(ModelConfig::transformer_paper().validate().is_ok());
        let mut t = TrainConfig::pretrain();
        t.warmup_epochs = 60;
        assert!(t.validate().is_err());
    }
}
