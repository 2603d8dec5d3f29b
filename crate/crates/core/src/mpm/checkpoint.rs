//! Binary checkpoints.
//!
//! Layout (little endian): magic `LCM1`, `u32` version, `u32`-prefixed UTF-8
//! header of `key=value` lines, `u32` tensor count, then per tensor a
//! `u32`-prefixed name, `u32` rank, `u32` extents and `f32` payload.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::ModelConfig;
use super::optim::AdamState;

const MAGIC: &[u8; 4] = b"LCM1";
const VERSION: u32 = 1;
const ADAM_M: &str = "adamw.m.";
const ADAM_V: &str = "adamw.v.";
const STEP_KEY: &str = "adamw.step";

/// Fully parsed checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

/// Outcome of applying a checkpoint to a parameter store.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Store parameters that the checkpoint did not provide.
    pub missing: Vec<String>,
    /// Checkpoint tensors that were not applied.
    pub skipped: Vec<String>,
}

impl Checkpoint {
    pub fn new<T: Scalar>(
        cfg: &ModelConfig,
        meta: &BTreeMap<String, String>,
        store: &ParamStore<T>,
        opt: Option<&AdamState<T>>,
    ) -> Self {
        let mut header: BTreeMap<String, String> =
            cfg.to_kv().into_iter().map(|(k, v)| (format!("model.{k}"), v)).collect();
        header.extend(meta.iter().map(|(k, v)| (k.clone(), v.clone())));
        let mut tensors: Vec<(String, Tensor<f32>)> =
            store.iter().map(|(n, t)| (n.to_string(), t.cast())).collect();
        if let Some(opt) = opt {
            header.insert(STEP_KEY.into(), opt.step.to_string());
            for (id, (m, v)) in store.ids().zip(opt.m.iter().zip(&opt.v)) {
                tensors.push((format!("{ADAM_M}{}", store.name(id)), m.cast()));
                tensors.push((format!("{ADAM_V}{}", store.name(id)), v.cast()));
            }
        }
        Self { header, tensors }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::desk();
        for (k, v) in &self.header {
            if let Some(key) = k.strip_prefix("model.") {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every store parameter accepted by `filter` from the checkpoint.
    /// All shapes are checked before anything is written.
    pub fn apply<T: Scalar>(&self, store: &mut ParamStore<T>, filter: impl Fn(&str) -> bool) -> Result<LoadReport> {
        let mut report = LoadReport::default();
        let mut updates = Vec::new();
        for id in store.ids() {
            let name = store.name(id);
            if !filter(name) {
                continue;
            }
            match self.tensor(name) {
                Some(t) if t.shape() == store.get(id).shape() => {
                    updates.push((id, t.cast::<T>()));
                    report.loaded.push(name.to_string());
                }
                Some(t) => {
                    return Err(Error::Format(format!(
                        "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                        t.shape(),
                        store.get(id).shape()
                    )))
                }
                None => report.missing.push(name.to_string()),
            }
        }
        report.skipped = self
            .tensors
            .iter()
            .map(|(n, _)| n)
            .filter(|n| !report.loaded.contains(n))
            .cloned()
            .collect();
        for (id, t) in updates {
            store.set(id, t)?;
        }
        Ok(report)
    }

    /// Optimizer moments aligned with `store`, if the checkpoint has them.
    pub fn adam_state<T: Scalar>(&self, store: &ParamStore<T>) -> Result<Option<AdamState<T>>> {
        let Some(step) = self.header.get(STEP_KEY) else {
            return Ok(None);
        };
        let step = step
            .parse()
            .map_err(|_| Error::Format(format!("bad optimizer step '{step}'")))?;
        let mut state = AdamState::new(store);
        for (i, id) in store.ids().enumerate() {
            let name = store.name(id);
            for (prefix, slot) in [(ADAM_M, &mut state.m[i]), (ADAM_V, &mut state.v[i])] {
                let t = self
                    .tensor(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::Format(format!("missing optimizer state for {name}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Format(format!("optimizer state shape mismatch for {name}")));
                }
                *slot = t.cast();
            }
        }
        state.step = step;
        Ok(Some(state))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text: String = self.header.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        put_str(&mut out, &text);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut header = BTreeMap::new();
        for line in r.string()?.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header line '{line}'")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { header, tensors })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated at byte {} (need {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8".into()))
    }
}

/// Writes to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("bad output path {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file.to_string_lossy(), std::process::id()));
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

/// Loads the backbone (`prefixes`) of a checkpoint into `store`. The encoder
/// settings recorded in the checkpoint must match `cfg`.
pub fn load_encoder<T: Scalar>(
    ckpt: &Checkpoint,
    cfg: &ModelConfig,
    store: &mut ParamStore<T>,
    prefixes: &[&str],
) -> Result<LoadReport> {
    let want = cfg.to_kv();
    for (k, v) in want.iter().filter(|(k, _)| {
        k.starts_with("encoder.") || matches!(k.as_str(), "embed_hidden" | "pe_hidden" | "k_group")
    }) {
        match ckpt.header.get(&format!("model.{k}")) {
            Some(have) if have == v => {}
            Some(have) => {
                return Err(Error::Config(format!(
                    "checkpoint {k}={have} does not match model {k}={v}"
                )))
            }
            None => return Err(Error::Config(format!("checkpoint lacks model.{k}"))),
        }
    }
    ckpt.apply(store, |n| prefixes.iter().any(|p| n.starts_with(p)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpm::model::{Classifier, PretrainModel, BACKBONE_PREFIXES};

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        for (k, v) in [
            ("encoder.d", "16"),
            ("encoder.n_layers", "1"),
            ("encoder.d_h", "8"),
            ("encoder.d_ffn", "32"),
            ("decoder.m_layers", "1"),
            ("decoder.d_inner", "16"),
            ("decoder.d_state", "4"),
            ("decoder.d_h", "8"),
            ("embed_hidden", "16"),
            ("pe_hidden", "16"),
            ("head_hidden", "16"),
            ("k_group", "8"),
        ] {
            cfg.set(k, v).unwrap();
        }
        cfg
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = tiny();
        let m = PretrainModel::<f32>::new(&cfg, 3).unwrap();
        let mut opt = AdamState::new(&m.store);
        opt.step = 17;
        opt.m[0] = opt.m[0].map(|_| 0.25);
        let meta = BTreeMap::from([("epoch".to_string(), "4".to_string())]);
        let ck = Checkpoint::new(&cfg, &meta, &m.store, Some(&opt));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.model_config().unwrap(), cfg);
        let mut fresh = PretrainModel::<f32>::new(&cfg, 99).unwrap();
        let rep = back.apply(&mut fresh.store, |_| true).unwrap();
        assert!(rep.missing.is_empty());
        assert_eq!(fresh.store, m.store);
        assert_eq!(back.adam_state(&fresh.store).unwrap().unwrap(), opt);
    }

    #[test]
    fn truncated_file_is_a_format_error_and_changes_nothing() {
        let cfg = tiny();
        let m = PretrainModel::<f32>::new(&cfg, 3).unwrap();
        let bytes = Checkpoint::new(&cfg, &BTreeMap::new(), &m.store, None).to_bytes();
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut garbage = bytes.clone();
        garbage[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&garbage), Err(Error::Format(_))));
    }

    #[test]
    fn encoder_only_load_into_classifier() {
        let cfg = tiny();
        let pre = PretrainModel::<f32>::new(&cfg, 1).unwrap();
        let ck = Checkpoint::new(&cfg, &BTreeMap::new(), &pre.store, None);
        let mut cls = Classifier::<f32>::new(&cfg, 2).unwrap();
        let head_before: Vec<_> = cls.store.iter().filter(|(n, _)| n.starts_with("cls.")).map(|(_, t)| t.clone()).collect();
        let rep = load_encoder(&ck, &cfg, &mut cls.store, &BACKBONE_PREFIXES).unwrap();
        assert!(!rep.loaded.is_empty());
        assert!(rep.missing.is_empty());
        assert!(rep.skipped.iter().any(|n| n.starts_with("decoder.")));
        for (name, t) in cls.store.iter() {
            if BACKBONE_PREFIXES.iter().any(|p| name.starts_with(p)) {
                assert_eq!(t, ck.tensor(name).unwrap(), "{name}");
            }
        }
        let head_after: Vec<_> = cls.store.iter().filter(|(n, _)| n.starts_with("cls.")).map(|(_, t)| t.clone()).collect();
        assert_eq!(head_before, head_after);
    }

    #[test]
    fn encoder_mismatch_is_a_config_error() {
        let cfg = tiny();
        let pre = PretrainModel::<f32>::new(&cfg, 1).unwrap();
        let ck = Checkpoint::new(&cfg, &BTreeMap::new(), &pre.store, None);
        let mut other = cfg.clone();
        other.set("encoder.d_ffn", "64").unwrap();
        let mut cls = Classifier::<f32>::new(&other, 2).unwrap();
        let before = cls.store.clone();
        let err = load_encoder(&ck, &other, &mut cls.store, &BACKBONE_PREFIXES).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(cls.store, before);
    }
}
