//! Binary container for models and covariance estimates.
//!
//! Layout: the 5-byte magic `TTLM1`, the manifest length as a little-endian
//! `u64`, a UTF-8 TOML manifest, then one blob per manifest tensor entry in
//! declared order. Blobs hold little-endian `f64` values, last index
//! fastest.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::ParamStore;
use crate::distill::DataCovariance;
use crate::error::{Error, Result};
use crate::nn::{ModelConfig, TTLstmModel, GATE_ORDER};
use crate::tensor::DenseTensor;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 5] = b"TTLM1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: u64 = MAGIC.len() as u64 + 8;

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Content {
    Model,
    Covariance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub bytes: u64,
    pub sha256: String,
}

/// Vocabulary file stored next to the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabRef {
    pub file: String,
    pub sha256: String,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub content: Content,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gate_order: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<VocabRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    fn new(content: Content) -> Self {
        Self {
            version: FORMAT_VERSION,
            content,
            seed: None,
            samples: None,
            gate_order: Vec::new(),
            vocab: None,
            model: None,
            train: None,
            tensors: Vec::new(),
        }
    }
}

/// Manifest plus the tensors it declares, in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    manifest: Manifest,
    tensors: Vec<DenseTensor>,
}

fn blob_bytes(t: &DenseTensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn entry(name: &str, t: &DenseTensor) -> TensorEntry {
    let bytes = blob_bytes(t);
    TensorEntry {
        name: name.to_string(),
        dims: t.dims().to_vec(),
        bytes: bytes.len() as u64,
        sha256: sha256_hex(&bytes),
    }
}

impl ModelFile {
    fn with_tensors(mut manifest: Manifest, named: Vec<(String, DenseTensor)>) -> Self {
        manifest.tensors = named.iter().map(|(n, t)| entry(n, t)).collect();
        let tensors = named.into_iter().map(|(_, t)| t).collect();
        Self { manifest, tensors }
    }

    /// Every parameter of `model` in registration order.
    pub fn from_model(model: &TTLstmModel, seed: u64, vocab: Option<VocabRef>, train: Option<TrainConfig>) -> Self {
        let mut manifest = Manifest::new(Content::Model);
        manifest.seed = Some(seed);
        manifest.gate_order = GATE_ORDER.iter().map(|s| s.to_string()).collect();
        manifest.vocab = vocab;
        manifest.model = Some(model.config().clone());
        manifest.train = train;
        let named = model.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        Self::with_tensors(manifest, named)
    }

    /// Input covariances of the two gate stacks.
    pub fn from_covariances(x: &DataCovariance, h: &DataCovariance, vocab: Option<VocabRef>) -> Result<Self> {
        let mut manifest = Manifest::new(Content::Covariance);
        manifest.samples = Some(x.count);
        manifest.vocab = vocab;
        let mut named = Vec::new();
        for (suffix, c) in [("x", x), ("h", h)] {
            named.push((format!("s_{suffix}"), DenseTensor::from_matrix(&c.s, vec![c.dim(), c.dim()])?));
            named.push((format!("mean_{suffix}"), DenseTensor::new(vec![c.dim()], c.mean.clone())?));
        }
        Ok(Self::with_tensors(manifest, named))
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn tensor(&self, name: &str) -> Option<&DenseTensor> {
        self.manifest
            .tensors
            .iter()
            .position(|e| e.name == name)
            .map(|k| &self.tensors[k])
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &DenseTensor)> {
        self.manifest.tensors.iter().map(|e| e.name.as_str()).zip(&self.tensors)
    }

    /// Rebuilds the model, checking every parameter name and shape.
    pub fn to_model(&self) -> Result<TTLstmModel> {
        if self.manifest.content != Content::Model {
            return Err(Error::config("file holds covariances, not a model"));
        }
        let config = self
            .manifest
            .model
            .clone()
            .ok_or_else(|| Error::config("model file has no model section"))?;
        if self.manifest.gate_order != GATE_ORDER {
            return Err(Error::config(format!("unsupported gate order {:?}", self.manifest.gate_order)));
        }
        let mut params = ParamStore::new();
        for (name, t) in self.tensors() {
            params.add(name, t.clone())?;
        }
        TTLstmModel::from_parts(config, params)
    }

    /// `(x, h)` covariances.
    pub fn to_covariances(&self) -> Result<(DataCovariance, DataCovariance)> {
        if self.manifest.content != Content::Covariance {
            return Err(Error::config("file holds a model, not covariances"));
        }
        let count = self.manifest.samples.ok_or_else(|| Error::config("covariance file has no sample count"))?;
        let read = |suffix: &str| -> Result<DataCovariance> {
            let s = self
                .tensor(&format!("s_{suffix}"))
                .ok_or_else(|| Error::config(format!("missing s_{suffix}")))?;
            let mean = self
                .tensor(&format!("mean_{suffix}"))
                .ok_or_else(|| Error::config(format!("missing mean_{suffix}")))?;
            let d = mean.len();
            if s.dims() != [d, d] {
                return Err(Error::config(format!("s_{suffix} is not {d} x {d}")));
            }
            Ok(DataCovariance {
                s: s.to_matrix(d, d)?,
                mean: mean.data().to_vec(),
                count,
            })
        };
        Ok((read("x")?, read("h")?))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = toml::to_string(&self.manifest).map_err(|e| Error::config(format!("manifest: {e}")))?;
        let mut out = Vec::with_capacity(HEADER_LEN as usize + manifest.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for t in &self.tensors {
            out.extend(blob_bytes(t));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::format(0, "magic", "not a TTLM1 file"));
        }
        let len_at = MAGIC.len();
        let len_bytes: [u8; 8] = bytes
            .get(len_at..len_at + 8)
            .and_then(|s| s.try_into().ok())
            .ok_or_else(|| Error::format(len_at as u64, "manifest", "truncated manifest length"))?;
        let manifest_len = u64::from_le_bytes(len_bytes);
        let body_at = HEADER_LEN;
        let manifest_end = body_at
            .checked_add(manifest_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| Error::format(body_at, "manifest", "truncated manifest"))?;
        let text = std::str::from_utf8(&bytes[body_at as usize..manifest_end as usize])
            .map_err(|e| Error::format(body_at, "manifest", format!("invalid UTF-8: {e}")))?;
        let manifest: Manifest =
            toml::from_str(text).map_err(|e| Error::format(body_at, "manifest", e.to_string()))?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::format(
                body_at,
                "manifest",
                format!("unsupported version {}", manifest.version),
            ));
        }

        let mut offset = manifest_end;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let count = e.dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
            if count.and_then(|c| c.checked_mul(8)) != Some(e.bytes) {
                return Err(Error::format(
                    offset,
                    &e.name,
                    format!("dims {:?} do not match {} bytes", e.dims, e.bytes),
                ));
            }
            let end = offset
                .checked_add(e.bytes)
                .filter(|&end| end <= bytes.len() as u64)
                .ok_or_else(|| Error::format(offset, &e.name, "truncated blob"))?;
            let blob = &bytes[offset as usize..end as usize];
            if sha256_hex(blob) != e.sha256 {
                return Err(Error::format(offset, &e.name, "checksum mismatch"));
            }
            let data = blob
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = DenseTensor::new(e.dims.clone(), data).map_err(|err| Error::format(offset, &e.name, err.to_string()))?;
            tensors.push(t);
            offset = end;
        }
        if offset != bytes.len() as u64 {
            return Err(Error::format(offset, "trailer", "unexpected bytes after the last blob"));
        }
        Ok(Self { manifest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn save_model(path: &Path, file: &ModelFile) -> Result<()> {
    file.save(path)
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    ModelFile::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;
    use crate::ttrain::TrainKind;

    fn sample() -> ModelFile {
        let mut cfg = ModelConfig::dense(9, 4, 4);
        cfg.w_x = LayerSpec::train(TrainKind::Mps, vec![4, 4], vec![2, 2], 3);
        let model = TTLstmModel::new(cfg, 5).unwrap();
        ModelFile::from_model(&model, 5, None, Some(TrainConfig::default()))
    }

    fn assert_format_err(r: Result<ModelFile>, blob: &str) {
        match r {
            Err(Error::Format { blob: b, .. }) => assert_eq!(b, blob),
            other => panic!("expected a format error for {blob}, got {other:?}"),
        }
    }

    #[test]
    fn bitwise_round_trip() {
        let f = sample();
        let bytes = f.to_bytes().unwrap();
        let back = ModelFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, f);
        for ((_, a), (_, b)) in f.tensors().zip(back.tensors()) {
            let bits = |t: &DenseTensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let m = back.to_model().unwrap();
        assert_eq!(m.params().len(), f.tensors().count());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert_format_err(ModelFile::from_bytes(&bytes), "magic");
    }

    #[test]
    fn truncation_names_the_blob() {
        let f = sample();
        let bytes = f.to_bytes().unwrap();
        let last = f.manifest().tensors.last().unwrap().name.clone();
        assert_format_err(ModelFile::from_bytes(&bytes[..bytes.len() - 3]), &last);
    }

    #[test]
    fn inconsistent_dims() {
        let f = sample();
        let bytes = f.to_bytes().unwrap();
        let len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[13..13 + len]).unwrap();
        let mut manifest: Manifest = toml::from_str(text).unwrap();
        manifest.tensors[0].dims[0] += 1;
        let new_text = toml::to_string(&manifest).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend((new_text.len() as u64).to_le_bytes());
        out.extend(new_text.as_bytes());
        out.extend(&bytes[13 + len..]);
        assert_format_err(ModelFile::from_bytes(&out), &manifest.tensors[0].name);
    }

    #[test]
    fn flipped_value_fails_checksum() {
        let mut bytes = sample().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0x40;
        assert!(matches!(ModelFile::from_bytes(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn unknown_manifest_keys_are_rejected() {
        let f = sample();
        let bytes = f.to_bytes().unwrap();
        let len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let text = format!("surprise = 1\n{}", std::str::from_utf8(&bytes[13..13 + len]).unwrap());
        let mut out = MAGIC.to_vec();
        out.extend((text.len() as u64).to_le_bytes());
        out.extend(text.as_bytes());
        out.extend(&bytes[13 + len..]);
        assert_format_err(ModelFile::from_bytes(&out), "manifest");
    }

    #[test]
    fn covariance_round_trip() {
        let xs = ndarray::array![[1.0, 2.0], [3.0, 5.0], [0.5, -1.0]];
        let c = crate::distill::accumulate_covariance(xs.view()).unwrap();
        let f = ModelFile::from_covariances(&c, &c, None).unwrap();
        let back = ModelFile::from_bytes(&f.to_bytes().unwrap()).unwrap();
        let (x, h) = back.to_covariances().unwrap();
        assert_eq!(x, c);
        assert_eq!(h, c);
        assert!(back.to_model().is_err());
    }
}
