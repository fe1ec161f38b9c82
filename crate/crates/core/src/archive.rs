//! Named-array container on top of safetensors, with string metadata.
//!
//! All arrays are stored as little-endian 32-bit floats.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, View};

use crate::error::{Error, Result};

pub struct Archive {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: HashMap<String, String>,
}

impl Archive {
    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("missing metadata field `{key}`")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta(key)?
            .parse()
            .map_err(|_| Error::Format(format!("metadata field `{key}` is not an integer")))
    }

    pub fn tensor(&self, key: &str) -> Result<&Tensor> {
        self.tensors
            .get(key)
            .ok_or_else(|| Error::Format(format!("missing array `{key}`")))
    }

    /// Fails unless the archive declares `kind` at exactly `version`.
    pub fn expect_version(&self, kind: &str, version: u32) -> Result<()> {
        let found_kind = self.meta("kind")?;
        if found_kind != kind {
            return Err(Error::Format(format!(
                "archive holds `{found_kind}`, expected `{kind}`"
            )));
        }
        let found = self.meta("format_version")?;
        if found != version.to_string() {
            return Err(Error::Format(format!(
                "unsupported format version {found} (expected {version})"
            )));
        }
        Ok(())
    }
}

struct F32Array {
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for &F32Array {
    fn dtype(&self) -> Dtype {
        Dtype::F32
    }
    fn shape(&self) -> &[usize] {
        &self.shape
    }
    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }
    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

pub fn write(path: &Path, tensors: &[(String, Tensor)], metadata: HashMap<String, String>) -> Result<()> {
    let mut arrays = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        arrays.push((
            name.clone(),
            F32Array {
                shape: t.dims().to_vec(),
                bytes,
            },
        ));
    }
    let views = arrays.iter().map(|(n, a)| (n.as_str(), a));
    let bytes = safetensors::serialize(views, Some(metadata))
        .map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path, device: &Device) -> Result<Archive> {
    let buffer = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&buffer)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let (_, header) = SafeTensors::read_metadata(&buffer)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let metadata = header.metadata().clone().unwrap_or_default();
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Format(format!(
                "array `{name}` has dtype {:?}, expected F32",
                view.dtype()
            )));
        }
        let values: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::from_vec(values, view.shape(), device)?;
        tensors.insert(name, t);
    }
    Ok(Archive { tensors, metadata })
}
