//! Safetensors checkpoints holding named tensors and one JSON metadata entry.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{Error, Result};

/// Key of the single metadata entry.
pub const META_KEY: &str = "pixocr";

fn ckpt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn view_to_tensor(view: &TensorView<'_>) -> Result<Tensor> {
    let dtype = match view.dtype() {
        Dtype::F64 => DType::F64,
        Dtype::F32 => DType::F32,
        Dtype::F16 => DType::F16,
        Dtype::BF16 => DType::BF16,
        Dtype::U8 => DType::U8,
        Dtype::U32 => DType::U32,
        Dtype::I64 => DType::I64,
        other => return Err(Error::Config(format!("unsupported tensor dtype {other:?}"))),
    };
    Ok(Tensor::from_raw_buffer(
        view.data(),
        dtype,
        view.shape(),
        &Device::Cpu,
    )?)
}

fn tensor_bytes(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (
            Dtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        _ => (
            Dtype::F32,
            flat.to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    })
}

/// Serializes tensors and metadata. The output depends only on the inputs.
pub fn to_bytes<M: Serialize>(tensors: &BTreeMap<String, Tensor>, meta: &M) -> Result<Vec<u8>> {
    let raw: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(name, t)| {
            let (dt, bytes) = tensor_bytes(t)?;
            Ok((name.clone(), dt, t.dims().to_vec(), bytes))
        })
        .collect::<Result<_>>()?;
    let views: Vec<(&str, TensorView<'_>)> = raw
        .iter()
        .map(|(n, dt, shape, bytes)| {
            TensorView::new(*dt, shape.clone(), bytes)
                .map(|v| (n.as_str(), v))
                .map_err(|e| Error::Config(format!("tensor {n}: {e}")))
        })
        .collect::<Result<_>>()?;
    let mut info = HashMap::new();
    info.insert(META_KEY.to_string(), serde_json::to_string(meta)?);
    safetensors::serialize(views, Some(info)).map_err(|e| Error::Config(e.to_string()))
}

/// Writes to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path
        .file_name()
        .ok_or_else(|| ckpt_err(path, "not a file path"))?
        .to_string_lossy();
    let tmp: PathBuf = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save<M: Serialize>(path: &Path, tensors: &BTreeMap<String, Tensor>, meta: &M) -> Result<()> {
    write_atomic(path, &to_bytes(tensors, meta)?)
}

/// A loaded checkpoint.
#[derive(Debug)]
pub struct Checkpoint<M> {
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: M,
}

pub fn load<M: DeserializeOwned>(path: &Path) -> Result<Checkpoint<M>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
    let meta_json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| ckpt_err(path, format!("missing '{META_KEY}' metadata entry")))?;
    let meta = serde_json::from_str(meta_json)
        .map_err(|e| ckpt_err(path, format!("invalid metadata: {e}")))?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.iter() {
        let t = view_to_tensor(&view).map_err(|e| ckpt_err(path, format!("{name}: {e}")))?;
        tensors.insert(name.to_string(), t);
    }
    Ok(Checkpoint { tensors, meta })
}
