//! Named-tensor checkpoint files (safetensors container with string
//! metadata).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{bail, Error, Result};

pub const FORMAT_KEY: &str = "format";
pub const FORMAT_VERSION: &str = "stftcodec-checkpoint-v1";

#[derive(Debug, Clone, Default)]
pub struct CheckpointFile {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl CheckpointFile {
    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Corrupt(format!("checkpoint metadata lacks `{key}`")))
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn group(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn insert_group(&mut self, prefix: &str, tensors: BTreeMap<String, Tensor>) {
        for (k, v) in tensors {
            self.tensors.insert(format!("{prefix}{k}"), v);
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buffers = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let (dtype, bytes) = match t.dtype() {
                DType::F64 => (
                    Dtype::F64,
                    t.flatten_all()?
                        .to_vec1::<f64>()?
                        .iter()
                        .flat_map(|v| v.to_le_bytes())
                        .collect::<Vec<u8>>(),
                ),
                _ => (
                    Dtype::F32,
                    t.flatten_all()?
                        .to_dtype(DType::F32)?
                        .to_vec1::<f32>()?
                        .iter()
                        .flat_map(|v| v.to_le_bytes())
                        .collect::<Vec<u8>>(),
                ),
            };
            buffers.push((name.clone(), dtype, t.dims().to_vec(), bytes));
        }
        let views = buffers
            .iter()
            .map(|(n, d, s, b)| Ok((n.clone(), TensorView::new(*d, s.clone(), b)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        meta.insert(FORMAT_KEY.into(), FORMAT_VERSION.into());
        let bytes = safetensors::serialize(views, Some(meta))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) =
            SafeTensors::read_metadata(&buf).map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))?;
        let metadata: BTreeMap<String, String> = header
            .metadata()
            .clone()
            .unwrap_or_default()
            .into_iter()
            .collect();
        match metadata.get(FORMAT_KEY) {
            Some(v) if v == FORMAT_VERSION => {}
            Some(v) => bail!(Corrupt, "{}: unsupported checkpoint format `{v}`", path.display()),
            None => bail!(Corrupt, "{}: not a codec checkpoint", path.display()),
        }
        let st = SafeTensors::deserialize(&buf).map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let shape = view.shape().to_vec();
            let data = view.data();
            let t = match view.dtype() {
                Dtype::F32 => {
                    let v: Vec<f32> = data
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    Tensor::from_vec(v, shape, &Device::Cpu)?
                }
                Dtype::F64 => {
                    let v: Vec<f64> = data
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Tensor::from_vec(v, shape, &Device::Cpu)?
                }
                other => bail!(Corrupt, "tensor `{name}` has unsupported dtype {other:?}"),
            };
            tensors.insert(name, t);
        }
        Ok(Self { metadata, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.safetensors");
        let mut f = CheckpointFile::default();
        f.metadata.insert("k".into(), "v".into());
        let a = Tensor::new(&[[1.5f32, -0.1], [f32::MIN_POSITIVE, 3.0]], &Device::Cpu).unwrap();
        let b = Tensor::new(&[0.1f64, 0.2], &Device::Cpu).unwrap();
        f.tensors.insert("g/a".into(), a.clone());
        f.tensors.insert("h/b".into(), b.clone());
        f.write(&path).unwrap();
        let r = CheckpointFile::read(&path).unwrap();
        assert_eq!(r.meta("k").unwrap(), "v");
        assert_eq!(r.group("g/")["a"].to_vec2::<f32>().unwrap(), a.to_vec2::<f32>().unwrap());
        assert_eq!(r.group("h/")["b"].to_vec1::<f64>().unwrap(), b.to_vec1::<f64>().unwrap());
        std::fs::write(&path, b"garbage").unwrap();
        assert!(matches!(CheckpointFile::read(&path), Err(Error::Corrupt(_))));
    }
}
