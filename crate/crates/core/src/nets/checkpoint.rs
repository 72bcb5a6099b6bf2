//! Binary checkpoint container for a trained [`SpeakerClassifier`].
//!
//! All integers are little-endian.
//!
//! | field            | encoding                                          |
//! |------------------|---------------------------------------------------|
//! | magic            | 8 bytes `FOOLHDCK`                                |
//! | version          | `u32`, currently 1                                |
//! | kind             | `u32` length + UTF-8, `xvector`                   |
//! | config           | `u32` length + UTF-8 JSON `{"model":..,"mfcc":..}`|
//! | tensor count     | `u32`                                             |
//! | per tensor       | `u32` length + UTF-8 name, `u8` trainable flag,   |
//! |                  | `u32` rank, rank x `u64` dims, `f64` values       |
//! | trailer          | 32-byte SHA-256 of every preceding byte           |
//!
//! Tensors appear in parameter-store order; loading matches them by name
//! and shape.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{SpeakerClassifier, XVectorConfig, XVectorModel};
use crate::dsp::MfccConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FOOLHDCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const KIND: &str = "xvector";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigEcho {
    model: XVectorConfig,
    mfcc: MfccConfig,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Serializes a classifier.
pub fn encode_classifier(clf: &SpeakerClassifier) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_str(&mut out, KIND);
    let echo = ConfigEcho {
        model: clf.model().config().clone(),
        mfcc: clf.pipeline().config().clone(),
    };
    put_str(
        &mut out,
        &serde_json::to_string(&echo).expect("configs serialize"),
    );
    let store = clf.model().params();
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for id in store.ids() {
        let t = store.get(id);
        put_str(&mut out, store.name(id));
        out.push(u8::from(store.is_trainable(id)));
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end =
            end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn str(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?)
            .map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
}

/// Parses and verifies a checkpoint produced by [`encode_classifier`].
pub fn decode_classifier(bytes: &[u8]) -> Result<SpeakerClassifier> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a foolhd checkpoint (bad magic)".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let kind = r.str()?;
    if kind != KIND {
        return Err(Error::Format(format!(
            "unsupported checkpoint kind `{kind}`"
        )));
    }
    let echo: ConfigEcho = serde_json::from_str(r.str()?)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    // weights are overwritten below; the seed only fills the template
    let mut model = XVectorModel::new(echo.model, &mut ChaCha8Rng::seed_from_u64(0))?;
    let count = r.u32()? as usize;
    if count != model.params().len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, model has {}",
            model.params().len()
        )));
    }
    for _ in 0..count {
        let name = r.str()?.to_owned();
        let trainable = r.u8()? != 0;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let id = model
            .params()
            .find(&name)
            .ok_or_else(|| Error::Format(format!("unknown tensor `{name}` in checkpoint")))?;
        if model.params().get(id).shape() != shape.as_slice()
            || model.params().is_trainable(id) != trainable
        {
            return Err(Error::Format(format!(
                "tensor `{name}` does not match the model layout"
            )));
        }
        *model.params_mut().get_mut(id) = Tensor::new(&shape, data)?;
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    SpeakerClassifier::new(model, echo.mfcc)
}

pub fn save_classifier(path: &Path, clf: &SpeakerClassifier) -> Result<()> {
    std::fs::write(path, encode_classifier(clf)).map_err(|e| Error::io(path, e))
}

pub fn load_classifier(path: &Path) -> Result<SpeakerClassifier> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_classifier(&bytes)
}
