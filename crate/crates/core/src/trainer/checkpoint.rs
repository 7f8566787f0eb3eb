//! Checkpoint files: magic, JSON manifest, then every tensor in store order
//! (parameters, then first and second moments when present).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use segkit_tensor::serialize::{read_tensor, write_tensor};
use segkit_tensor::{DType, Element, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::optim::{AdamWConfig, OptimState};
use crate::backbone::BackboneConfig;
use crate::decoder::DecoderConfig;
use crate::error::{io_err, Result, SegError};
use crate::model::SegModel;

const MAGIC: &[u8; 8] = b"SEGKITCK";
const FORMAT_VERSION: u32 = 1;

/// Hex SHA-256 of the canonical JSON of the architecture settings.
pub fn config_digest(backbone: &BackboneConfig, decoder: &DecoderConfig) -> String {
    let json = serde_json::to_string(&architecture(backbone, decoder)).expect("configs serialize");
    hex::encode(Sha256::digest(json.as_bytes()))
}

fn architecture(backbone: &BackboneConfig, decoder: &DecoderConfig) -> Value {
    serde_json::json!({ "backbone": backbone, "decoder": decoder })
}

/// Dotted paths of every leaf that differs between two JSON values.
fn diff_fields(a: &Value, b: &Value, prefix: &str, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => diff_fields(u, v, &path, out),
                    _ => out.push(path),
                }
            }
        }
        _ if a != b => out.push(prefix.to_string()),
        _ => {}
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: DType,
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
    pub config_digest: String,
    /// Next training iteration to run.
    pub iteration: usize,
    pub seed: u64,
    pub param_names: Vec<String>,
    /// Present when optimizer moments follow the parameters.
    pub optimizer: Option<OptimManifest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimManifest {
    pub config: AdamWConfig,
    pub t: u64,
}

fn read_header(r: &mut impl Read, path: &Path) -> Result<Manifest> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != MAGIC {
        return Err(SegError::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io_err(path))?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(io_err(path))?;
    let manifest: Manifest =
        serde_json::from_slice(&json).map_err(|e| SegError::Checkpoint(format!("{}: {e}", path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(SegError::Checkpoint(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Reads only the manifest of a checkpoint file.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let file = File::open(path).map_err(io_err(path))?;
    read_header(&mut BufReader::new(file), path)
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub manifest: Manifest,
    pub params: Vec<Tensor<T>>,
    pub optim: Option<OptimState<T>>,
}

impl<T: Element> Checkpoint<T> {
    pub fn capture(model: &SegModel<T>, optim: Option<&OptimState<T>>, iteration: usize, seed: u64) -> Self {
        let (bb, dec) = (model.backbone_config().clone(), model.decoder_config().clone());
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            dtype: T::DTYPE,
            config_digest: config_digest(&bb, &dec),
            backbone: bb,
            decoder: dec,
            iteration,
            seed,
            param_names: model.params.iter().map(|(n, _)| n.to_string()).collect(),
            optimizer: optim.map(|o| OptimManifest {
                config: o.config.clone(),
                t: o.t,
            }),
        };
        Self {
            manifest,
            params: model.params.iter().map(|(_, t)| t.clone()).collect(),
            optim: optim.cloned(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(file);
        let json = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let io = io_err(path);
        let header = [MAGIC.as_slice(), &(json.len() as u64).to_le_bytes(), &json].concat();
        w.write_all(&header).map_err(io)?;
        let moments = self.optim.iter().flat_map(|o| o.m.iter().chain(o.v.iter()));
        for t in self.params.iter().chain(moments) {
            write_tensor(&mut w, t)?;
        }
        w.flush().map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(io_err(path))?;
        let mut r = BufReader::new(file);
        let manifest = read_header(&mut r, path)?;
        if manifest.dtype != T::DTYPE {
            return Err(SegError::Checkpoint(format!(
                "checkpoint holds {} tensors, requested {}",
                manifest.dtype,
                T::DTYPE
            )));
        }
        let n = manifest.param_names.len();
        let mut read_n = |count: usize| -> Result<Vec<Tensor<T>>> {
            (0..count)
                .map(|_| read_tensor(&mut r).map_err(|e| SegError::Checkpoint(format!("{}: {e}", path.display()))))
                .collect()
        };
        let params = read_n(n)?;
        let optim = match &manifest.optimizer {
            Some(o) => Some(OptimState {
                config: o.config.clone(),
                t: o.t,
                m: read_n(n)?,
                v: read_n(n)?,
            }),
            None => None,
        };
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(io_err(path))?;
        if !rest.is_empty() {
            return Err(SegError::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        let digest = config_digest(&manifest.backbone, &manifest.decoder);
        if digest != manifest.config_digest {
            return Err(SegError::Checkpoint(
                "stored digest does not match stored configuration".into(),
            ));
        }
        Ok(Self {
            manifest,
            params,
            optim,
        })
    }

    /// Refuses checkpoints written for a different architecture.
    pub fn verify(&self, backbone: &BackboneConfig, decoder: &DecoderConfig) -> Result<()> {
        let expected = config_digest(backbone, decoder);
        if expected == self.manifest.config_digest {
            return Ok(());
        }
        let mut fields = Vec::new();
        diff_fields(
            &architecture(&self.manifest.backbone, &self.manifest.decoder),
            &architecture(backbone, decoder),
            "",
            &mut fields,
        );
        Err(SegError::DigestMismatch {
            stored: self.manifest.config_digest.clone(),
            expected,
            fields: fields.join(", "),
        })
    }

    /// Rebuilds the model described by the manifest with the stored weights.
    pub fn to_model(&self) -> Result<SegModel<T>> {
        let mut model = SegModel::new(self.manifest.backbone.clone(), self.manifest.decoder.clone(), 0)?;
        let ids: Vec<_> = model.params.ids().collect();
        if ids.len() != self.params.len() {
            return Err(SegError::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                ids.len()
            )));
        }
        for ((id, t), name) in ids.into_iter().zip(&self.params).zip(&self.manifest.param_names) {
            if model.params.name(id) != name {
                return Err(SegError::Checkpoint(format!(
                    "tensor {name} found where {} was expected",
                    model.params.name(id)
                )));
            }
            model.params.set(id, t.clone())?;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_tracks_architecture() {
        let bb = BackboneConfig::micro();
        let dec = DecoderConfig::default();
        assert_eq!(config_digest(&bb, &dec), config_digest(&bb, &dec));
        let mut other = dec.clone();
        other.n_cls = 7;
        assert_ne!(config_digest(&bb, &dec), config_digest(&bb, &other));
    }

    #[test]
    fn field_diff_names_leaves() {
        let a = serde_json::json!({"backbone": {"heads": [1, 2]}, "decoder": {"n_cls": 5, "hidden": 8}});
        let b = serde_json::json!({"backbone": {"heads": [1, 4]}, "decoder": {"n_cls": 5, "hidden": 9}});
        let mut out = Vec::new();
        diff_fields(&a, &b, "", &mut out);
        assert_eq!(out, vec!["backbone.heads", "decoder.hidden"]);
    }
}
