//! Binary checkpoints.
//!
//! ```text
//! "RELM" | u32 version | u64 payload length | payload | sha256(header ‖ payload)
//! payload: u8 kind | config | vocabulary | metadata | tensors | optimizer
//! ```
//! Text sections are `u32` length-prefixed UTF-8; every integer and float is
//! little-endian. A tensor is `u16 name length, name, u8 dtype, u8 trainable,
//! u8 ndim, u64 dims…, raw values`.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::bpe::Vocabulary;
use crate::error::{CheckpointError, Error, Result};
use crate::numeric::{AdamState, DType, ParamStore, Scalar, Tensor};

use super::{LmModel, ModelConfig, NmtModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RELM";
pub const CHECKPOINT_VERSION: u32 = 1;

const HEADER_LEN: usize = 16;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub step: u64,
    pub phase: String,
}

#[derive(Debug, Clone)]
pub enum ModelState<F: Scalar> {
    Lm(LmModel<F>),
    Nmt(NmtModel<F>),
}

impl<F: Scalar> ModelState<F> {
    fn kind(&self) -> u8 {
        match self {
            ModelState::Lm(_) => 0,
            ModelState::Nmt(_) => 1,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            ModelState::Lm(m) => &m.config,
            ModelState::Nmt(m) => &m.config,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        match self {
            ModelState::Lm(m) => &m.vocab,
            ModelState::Nmt(m) => &m.vocab,
        }
    }

    pub fn params(&self) -> &ParamStore<F> {
        match self {
            ModelState::Lm(m) => &m.params,
            ModelState::Nmt(m) => &m.params,
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore<F> {
        match self {
            ModelState::Lm(m) => &mut m.params,
            ModelState::Nmt(m) => &mut m.params,
        }
    }

    pub fn into_lm(self) -> Result<LmModel<F>> {
        match self {
            ModelState::Lm(m) => Ok(m),
            ModelState::Nmt(_) => Err(CheckpointError::Kind {
                found: "nmt",
                expected: "lm",
            }
            .into()),
        }
    }

    pub fn into_nmt(self) -> Result<NmtModel<F>> {
        match self {
            ModelState::Nmt(m) => Ok(m),
            ModelState::Lm(_) => Err(CheckpointError::Kind {
                found: "lm",
                expected: "nmt",
            }
            .into()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint<F: Scalar> {
    pub model: ModelState<F>,
    pub optimizer: Option<AdamState<F>>,
    pub meta: CheckpointMeta,
}

fn put_text(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_values<F: Scalar>(out: &mut Vec<u8>, t: &Tensor<F>) {
    for &v in t.data() {
        v.write_le(out);
    }
}

impl<F: Scalar> Checkpoint<F> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut p = vec![self.model.kind()];
        let cfg: String = self
            .model
            .config()
            .to_kv()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        put_text(&mut p, &cfg);
        put_text(&mut p, &self.model.vocab().to_text());
        put_text(
            &mut p,
            &format!("seed={}\nstep={}\nphase={}\n", self.meta.seed, self.meta.step, self.meta.phase),
        );
        let params = self.model.params();
        p.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (_, prm) in params.iter() {
            p.extend_from_slice(&(prm.name.len() as u16).to_le_bytes());
            p.extend_from_slice(prm.name.as_bytes());
            p.push(F::DTYPE.code());
            p.push(prm.trainable as u8);
            p.push(prm.value.shape().len() as u8);
            for &d in prm.value.shape() {
                p.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_values(&mut p, &prm.value);
        }
        match &self.optimizer {
            None => p.push(0),
            Some(o) => {
                p.push(1);
                p.extend_from_slice(&o.step.to_le_bytes());
                for x in [o.beta1, o.beta2, o.epsilon, o.base_lr] {
                    p.extend_from_slice(&x.to_le_bytes());
                }
                for (m, v) in o.m.iter().zip(&o.v) {
                    put_values(&mut p, m);
                    put_values(&mut p, v);
                }
            }
        }
        let mut out = Vec::with_capacity(HEADER_LEN + p.len() + DIGEST_LEN);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        out.extend_from_slice(&p);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        if bytes.len() < 4 {
            return Err(if CHECKPOINT_MAGIC.starts_with(bytes) {
                CheckpointError::Truncated {
                    needed: HEADER_LEN,
                    available: bytes.len(),
                }
            } else {
                CheckpointError::BadMagic
            });
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(CheckpointError::Truncated {
                needed: HEADER_LEN,
                available: bytes.len(),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let payload_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let needed = HEADER_LEN + payload_len + DIGEST_LEN;
        if bytes.len() < needed {
            return Err(CheckpointError::Truncated {
                needed,
                available: bytes.len(),
            });
        }
        if bytes.len() > needed {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - needed
            )));
        }
        let body = &bytes[..HEADER_LEN + payload_len];
        if Sha256::digest(body).as_slice() != &bytes[HEADER_LEN + payload_len..] {
            return Err(CheckpointError::Checksum);
        }
        parse_payload(&body[HEADER_LEN..])
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Malformed("payload ends early".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> std::result::Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self) -> std::result::Result<&'a str, CheckpointError> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| CheckpointError::Malformed("section is not UTF-8".into()))
    }

    fn values<F: Scalar>(&mut self, n: usize) -> std::result::Result<Vec<F>, CheckpointError> {
        let w = F::DTYPE.width();
        Ok(self.take(n * w)?.chunks_exact(w).map(F::read_le).collect())
    }
}

fn parse_meta(text: &str) -> std::result::Result<CheckpointMeta, CheckpointError> {
    let mut meta = CheckpointMeta::default();
    for line in text.lines() {
        let bad = || CheckpointError::Malformed(format!("metadata line {line:?}"));
        let (k, v) = line.split_once('=').ok_or_else(bad)?;
        match k {
            "seed" => meta.seed = v.parse().map_err(|_| bad())?,
            "step" => meta.step = v.parse().map_err(|_| bad())?,
            "phase" => meta.phase = v.to_string(),
            _ => return Err(bad()),
        }
    }
    Ok(meta)
}

fn parse_payload<F: Scalar>(payload: &[u8]) -> std::result::Result<Checkpoint<F>, CheckpointError> {
    let mut c = Cursor { bytes: payload, pos: 0 };
    let kind = c.u8()?;
    let config = ModelConfig::from_kv(c.text()?)?;
    let vocab = Vocabulary::from_text(c.text()?, Path::new("<checkpoint>"))
        .map_err(|e| CheckpointError::Malformed(format!("vocabulary: {e}")))?;
    let meta = parse_meta(c.text()?)?;
    if vocab.len() != config.vocab_size {
        return Err(CheckpointError::VocabMismatch {
            vocab: vocab.len(),
            rows: config.vocab_size,
        });
    }
    let layout_err = |e: Error| CheckpointError::Malformed(format!("model layout: {e}"));
    let mut model = match kind {
        0 => ModelState::Lm(LmModel::layout(config, vocab, None).map_err(layout_err)?),
        1 => ModelState::Nmt(NmtModel::layout(config, vocab, None).map_err(layout_err)?),
        k => return Err(CheckpointError::Malformed(format!("unknown model kind {k}"))),
    };
    let n = c.u32()? as usize;
    let store = model.params_mut();
    if n != store.len() {
        return Err(CheckpointError::Malformed(format!(
            "{n} tensors for a model with {}",
            store.len()
        )));
    }
    let mut shapes = Vec::with_capacity(n);
    for p in store.iter_mut() {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
        if name != p.name {
            return Err(CheckpointError::Malformed(format!("expected tensor {}, found {name}", p.name)));
        }
        let dtype = DType::from_code(c.u8()?);
        if dtype != Some(F::DTYPE) {
            return Err(CheckpointError::Malformed(format!("{name}: dtype is not {}", F::DTYPE.name())));
        }
        p.trainable = c.u8()? != 0;
        let ndim = c.u8()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        if shape != p.value.shape() {
            if name == "embeddings.token" {
                return Err(CheckpointError::VocabMismatch {
                    vocab: p.value.rows(),
                    rows: shape.first().copied().unwrap_or(0),
                });
            }
            return Err(CheckpointError::Malformed(format!(
                "{name}: shape {shape:?}, expected {:?}",
                p.value.shape()
            )));
        }
        let data = c.values::<F>(p.value.len())?;
        p.value.data_mut().copy_from_slice(&data);
        shapes.push(shape);
    }
    let optimizer = match c.u8()? {
        0 => None,
        1 => {
            let step = c.u64()?;
            let (beta1, beta2, epsilon, base_lr) = (c.f64()?, c.f64()?, c.f64()?, c.f64()?);
            let mut m = Vec::with_capacity(n);
            let mut v = Vec::with_capacity(n);
            for s in &shapes {
                let len = s.iter().product();
                m.push(Tensor::new(s.clone(), c.values(len)?).map_err(|e| CheckpointError::Malformed(e.to_string()))?);
                v.push(Tensor::new(s.clone(), c.values(len)?).map_err(|e| CheckpointError::Malformed(e.to_string()))?);
            }
            Some(AdamState {
                step,
                m,
                v,
                beta1,
                beta2,
                epsilon,
                base_lr,
            })
        }
        f => return Err(CheckpointError::Malformed(format!("optimizer flag {f}"))),
    };
    if c.pos != payload.len() {
        return Err(CheckpointError::Malformed("unread bytes after optimizer state".into()));
    }
    Ok(Checkpoint { model, optimizer, meta })
}

pub fn save_checkpoint<F: Scalar>(checkpoint: &Checkpoint<F>, path: &Path) -> Result<()> {
    let err = |source| Error::Write {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(err)?;
    }
    std::fs::write(path, checkpoint.to_bytes()).map_err(err)
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Checkpoint<F>> {
    let bytes = std::fs::read(path).map_err(|source| Error::Load {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}

/// Loads and requires the stored config to equal `expected`; the error
/// names the first field that differs.
pub fn load_checkpoint_expecting<F: Scalar>(path: &Path, expected: &ModelConfig) -> Result<Checkpoint<F>> {
    let ck = load_checkpoint(path)?;
    if let Some((field, found, expected)) = ck.model.config().first_difference(expected) {
        return Err(CheckpointError::ConfigMismatch { field, found, expected }.into());
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{Rng, Stream};
    use crate::transformer::{build_lm, init_nmt_from_lm};
    use std::collections::BTreeMap;

    fn lm() -> LmModel<f32> {
        let counts: BTreeMap<String, u64> = (0..12).map(|i| (format!("t{i}"), 12 - i as u64)).collect();
        let vocab = Vocabulary::from_counts(&counts);
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            ffn_dim: 16,
            max_positions: 10,
            vocab_size: vocab.len(),
            ..Default::default()
        };
        build_lm(cfg, vocab, &mut Rng::new(2, Stream::Init)).unwrap()
    }

    fn checkpoint(model: ModelState<f32>, with_opt: bool) -> Checkpoint<f32> {
        let optimizer = with_opt.then(|| AdamState::new(model.params(), 1e-4));
        Checkpoint {
            model,
            optimizer,
            meta: CheckpointMeta {
                seed: 9,
                step: 42,
                phase: "pretrain".into(),
            },
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let mut m = lm();
        m.attach_adapters(3, &mut Rng::new(1, Stream::Init)).unwrap();
        m.set_trainable(crate::transformer::TrainableScheme::AdaptersAndEmbeddings).unwrap();
        let nmt = init_nmt_from_lm(&m, &mut Rng::new(3, Stream::Init)).unwrap();
        for (state, opt) in [(ModelState::Lm(m), true), (ModelState::Nmt(nmt), false)] {
            let ck = checkpoint(state, opt);
            let bytes = ck.to_bytes();
            let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
            assert_eq!(back.to_bytes(), bytes);
            assert_eq!(back.meta, ck.meta);
            for ((_, a), (_, b)) in back.model.params().iter().zip(ck.model.params().iter()) {
                assert!(a.value.bit_eq(&b.value));
                assert_eq!(a.trainable, b.trainable);
            }
        }
    }

    #[test]
    fn distinct_errors() {
        let bytes = checkpoint(ModelState::Lm(lm()), false).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bad),
            Err(CheckpointError::Version { found: 2, .. })
        ));
        let short = &bytes[..bytes.len() - 1];
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(short),
            Err(CheckpointError::Truncated { .. })
        ));
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 1;
        assert!(matches!(Checkpoint::<f32>::from_bytes(&flipped), Err(CheckpointError::Checksum)));
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bytes),
            Err(CheckpointError::Malformed(_))
        ));
    }

    #[test]
    fn config_mismatch_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.ckpt");
        let m = lm();
        let mut expected = m.config.clone();
        save_checkpoint(&checkpoint(ModelState::Lm(m), false), &path).unwrap();
        expected.ffn_dim = 32;
        match load_checkpoint_expecting::<f32>(&path, &expected) {
            Err(Error::Checkpoint(CheckpointError::ConfigMismatch { field, .. })) => assert_eq!(field, "ffn_dim"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
