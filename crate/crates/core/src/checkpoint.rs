//! `.ysrc` checkpoints: `"YSRC"`, u32 LE version, u64 LE header length, a JSON
//! header `{name: {shape, offset}}`, then the little-endian f32 payload.
//!
//! The header may also carry a `"__metadata__"` object of string pairs
//! (network config, provenance, frozen flag); loaders that only want tensors
//! can ignore it.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::autoencoder::{AEMode, Autoencoder, AutoencoderConfig};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;
use crate::unet::{DenoiserNet, NetworkConfig};

pub const MAGIC: &[u8; 4] = b"YSRC";
pub const VERSION: u32 = 1;
const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: "<bytes>".into(),
        msg: msg.into(),
    }
}

impl Checkpoint {
    pub fn new(tensors: BTreeMap<String, Tensor>) -> Self {
        Self {
            tensors,
            metadata: BTreeMap::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| corrupt(format!("missing metadata key {key:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = Map::new();
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if name == METADATA_KEY {
                return Err(Error::InvalidArgument(format!("tensor name {METADATA_KEY} is reserved")));
            }
            header.insert(name.clone(), json!({"shape": t.shape(), "offset": offset}));
            offset += t.len() * 4;
        }
        if !self.metadata.is_empty() {
            header.insert(METADATA_KEY.into(), json!(self.metadata));
        }
        let header = serde_json::to_vec(&Value::Object(header)).map_err(|e| corrupt(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        if bytes.len() < 16 {
            return Err(corrupt("truncated preamble"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version} (expected {VERSION})")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|h| h.checked_add(16))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Map<String, Value> =
            serde_json::from_slice(&bytes[16..header_end]).map_err(|e| corrupt(format!("bad header: {e}")))?;
        let payload = &bytes[header_end..];

        let mut metadata = BTreeMap::new();
        let mut spans = Vec::new();
        let mut entries = Vec::new();
        for (name, entry) in header {
            if name == METADATA_KEY {
                metadata = serde_json::from_value(entry).map_err(|e| corrupt(format!("bad metadata: {e}")))?;
                continue;
            }
            let shape: Vec<usize> = entry
                .get("shape")
                .cloned()
                .and_then(|s| serde_json::from_value(s).ok())
                .ok_or_else(|| corrupt(format!("tensor {name}: missing or invalid shape")))?;
            let offset = entry
                .get("offset")
                .and_then(Value::as_u64)
                .and_then(|o| usize::try_from(o).ok())
                .ok_or_else(|| corrupt(format!("tensor {name}: missing or invalid offset")))?;
            let n_bytes = shape
                .iter()
                .try_fold(4usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| corrupt(format!("tensor {name}: shape overflows")))?;
            let end = offset
                .checked_add(n_bytes)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| corrupt(format!("tensor {name}: payload truncated")))?;
            spans.push((offset, end, name.clone()));
            entries.push((name, shape, offset, end));
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(corrupt(format!("tensors {} and {} overlap", w[0].2, w[1].2)));
            }
        }
        let used: usize = spans.iter().map(|(s, e, _)| e - s).sum();
        if used != payload.len() {
            return Err(corrupt(format!("payload is {} bytes, tensors cover {used}", payload.len())));
        }
        let mut tensors = BTreeMap::new();
        for (name, shape, start, end) in entries {
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { tensors, metadata })
    }
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Checkpoint { msg, .. } => Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        },
        other => other,
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes().map_err(|e| with_path(path, e))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| with_path(path, e))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config types serialize")
}

fn from_json<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> Result<T> {
    serde_json::from_str(s).map_err(|e| corrupt(format!("bad {what}: {e}")))
}

impl Checkpoint {
    pub fn from_net(net: &DenoiserNet, extra: &[(&str, String)]) -> Self {
        let mut c = Self::new(net.params.clone().into_map());
        c.metadata.insert("kind".into(), "unet".into());
        c.metadata.insert("config".into(), to_json(&net.config));
        c.metadata.insert("frozen".into(), net.frozen.to_string());
        for (k, v) in extra {
            c.metadata.insert((*k).into(), v.clone());
        }
        c
    }

    pub fn to_net(&self) -> Result<DenoiserNet> {
        if self.meta("kind")? != "unet" {
            return Err(corrupt(format!("expected a unet checkpoint, found {:?}", self.meta("kind")?)));
        }
        let config: NetworkConfig = from_json(self.meta("config")?, "network config")?;
        let frozen = self.meta("frozen")? == "true";
        DenoiserNet::from_params(config, ParamSet::from_map(self.tensors.clone()), frozen)
    }

    pub fn from_autoencoder(ae: &Autoencoder) -> Self {
        let tensors = ae.encoder.clone().into_map().into_iter().chain(ae.decoder.clone().into_map()).collect();
        let mut c = Self::new(tensors);
        c.metadata.insert("kind".into(), "autoencoder".into());
        c.metadata.insert("config".into(), to_json(&ae.config));
        c.metadata.insert("latent_mean".into(), to_json(&ae.latent_mean));
        c.metadata.insert("latent_scale".into(), to_json(&ae.latent_scale));
        c.metadata.insert("encoder_frozen".into(), ae.encoder_frozen.to_string());
        c.metadata.insert("decoder_frozen".into(), ae.decoder_frozen.to_string());
        c
    }

    pub fn to_autoencoder(&self) -> Result<Autoencoder> {
        if self.meta("kind")? != "autoencoder" {
            return Err(corrupt(format!("expected an autoencoder checkpoint, found {:?}", self.meta("kind")?)));
        }
        let config: AutoencoderConfig = from_json(self.meta("config")?, "autoencoder config")?;
        config.validate()?;
        if config.mode == AEMode::Identity {
            return Ok(Autoencoder::identity(config.image_channels));
        }
        let reference = Autoencoder::init(&config, 0)?;
        let (enc, dec): (BTreeMap<_, _>, BTreeMap<_, _>) =
            self.tensors.clone().into_iter().partition(|(k, _)| k.starts_with("enc."));
        for (want, got) in [(&reference.encoder, &enc), (&reference.decoder, &dec)] {
            if want.len() != got.len() || want.iter().any(|(k, t)| got.get(k).map(Tensor::shape) != Some(t.shape())) {
                return Err(corrupt("autoencoder tensors do not match the stored config"));
            }
        }
        let latent_mean: Vec<f32> = from_json(self.meta("latent_mean")?, "latent_mean")?;
        let latent_scale: Vec<f32> = from_json(self.meta("latent_scale")?, "latent_scale")?;
        if latent_mean.len() != latent_scale.len()
            || !(latent_mean.is_empty() || latent_mean.len() == config.latent_channels)
        {
            return Err(corrupt("latent normalization does not match the latent channels"));
        }
        Ok(Autoencoder {
            config,
            encoder: ParamSet::from_map(enc),
            decoder: ParamSet::from_map(dec),
            latent_mean,
            latent_scale,
            encoder_frozen: self.meta("encoder_frozen")? == "true",
            decoder_frozen: self.meta("decoder_frozen")? == "true",
        })
    }
}
