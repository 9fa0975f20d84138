//! Checkpoint archive: a safetensors file with every parameter stored under
//! its `theta/<layer>` or `lambda/<layer>` name. The header holds a single
//! metadata entry, [`HEADER_KEY`], whose JSON value carries the model config
//! and the caller's string map; one key keeps the header byte-stable.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{SafeTensors, View};
use safetensors::Dtype;

use crate::error::{Error, Result};
use crate::params::Group;
use crate::scalar::Scalar;

use super::{GeosModel, ModelConfig};

pub const HEADER_KEY: &str = "geos";

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    model_config: ModelConfig,
    metadata: BTreeMap<String, String>,
}

struct Raw<'a> {
    dtype: Dtype,
    shape: &'a [usize],
    bytes: Vec<u8>,
}

impl View for &Raw<'_> {
    fn dtype(&self) -> Dtype {
        self.dtype
    }
    fn shape(&self) -> &[usize] {
        self.shape
    }
    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }
    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

fn encode<T: Scalar>(values: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * T::BYTES);
    for &v in values {
        v.write_le(&mut out);
    }
    out
}

fn decode<T: Scalar>(dtype: Dtype, bytes: &[u8]) -> Result<Vec<T>> {
    match dtype {
        Dtype::F32 => Ok(bytes
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::read_le(c) as f64))
            .collect()),
        Dtype::F64 => Ok(bytes
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::read_le(c)))
            .collect()),
        other => Err(Error::Checkpoint(format!("unsupported tensor dtype {other:?}"))),
    }
}

/// Serialize the full model plus caller metadata.
pub fn to_bytes<T: Scalar>(model: &GeosModel<T>, metadata: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let params = model.params();
    let raws: Vec<(String, Raw<'_>)> = params
        .ids()
        .map(|id| {
            let spec = params.spec(id);
            (
                spec.qualified_name(),
                Raw {
                    dtype: T::DTYPE,
                    shape: &spec.shape,
                    bytes: encode(params.value(id)),
                },
            )
        })
        .collect();
    let header = Header {
        model_config: model.config().clone(),
        metadata: metadata.clone(),
    };
    let info = HashMap::from([(HEADER_KEY.to_string(), serde_json::to_string(&header)?)]);
    safetensors::serialize(raws.iter().map(|(n, r)| (n.as_str(), r)), Some(info))
        .map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save<T: Scalar>(model: &GeosModel<T>, metadata: &BTreeMap<String, String>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model, metadata)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_header(st_bytes: &[u8]) -> Result<Header> {
    let (_, meta) = SafeTensors::read_metadata(st_bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let json = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(HEADER_KEY))
        .ok_or_else(|| Error::Checkpoint("archive has no model config".into()))?;
    Ok(serde_json::from_str(json)?)
}

/// Rebuild a model from checkpoint bytes. Returns the caller metadata as well.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(GeosModel<T>, BTreeMap<String, String>)> {
    let Header {
        model_config: mut config,
        metadata,
    } = read_header(bytes)?;
    // Weights come from the archive itself.
    config.pretrained = None;
    let mut model = GeosModel::<T>::build(config)?;
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if st.len() != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "archive has {} tensors, the model has {}",
            st.len(),
            model.params().len()
        )));
    }
    for (name, view) in st.iter() {
        let id = model
            .params()
            .find_qualified(name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
        let spec = model.params().spec(id);
        if view.shape() != spec.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {:?}, expected {:?}",
                view.shape(),
                spec.shape
            )));
        }
        let values = decode::<T>(view.dtype(), view.data())?;
        model.params_mut().value_mut(id).copy_from_slice(&values);
    }
    Ok((model, metadata))
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<(GeosModel<T>, BTreeMap<String, String>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Write arbitrary named tensors (used to prepare external Θ weights).
pub fn save_tensors<T: Scalar>(tensors: &[(String, Vec<usize>, Vec<T>)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raws: Vec<(String, Raw<'_>)> = tensors
        .iter()
        .map(|(n, s, v)| {
            (
                n.clone(),
                Raw {
                    dtype: T::DTYPE,
                    shape: s,
                    bytes: encode(v),
                },
            )
        })
        .collect();
    let bytes = safetensors::serialize(raws.iter().map(|(n, r)| (n.as_str(), r)), None)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Copy Θ tensors from an external weight file. Names may carry the
/// `theta/` prefix or be bare backbone names; a file may omit the primary
/// head (its class count rarely matches), but every other Θ tensor it holds
/// must exist in the model with the same shape.
pub(crate) fn load_pretrained_theta<T: Scalar>(model: &mut GeosModel<T>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut loaded = 0;
    for (name, view) in st.iter() {
        let bare = name.strip_prefix("theta/").unwrap_or(name);
        if name.starts_with("lambda/") {
            continue;
        }
        let Some(id) = model.params().find(Group::Theta, bare) else {
            return Err(Error::Checkpoint(format!("`{name}` does not name a Θ parameter")));
        };
        let spec = model.params().spec(id);
        if view.shape() != spec.shape.as_slice() {
            if spec.head {
                continue;
            }
            return Err(Error::Checkpoint(format!(
                "pretrained `{name}` has shape {:?}, expected {:?}",
                view.shape(),
                spec.shape
            )));
        }
        let values = decode::<T>(view.dtype(), view.data())?;
        model.params_mut().value_mut(id).copy_from_slice(&values);
        loaded += 1;
    }
    if loaded == 0 {
        return Err(Error::Checkpoint(format!("{} holds no usable Θ tensors", path.display())));
    }
    Ok(())
}
