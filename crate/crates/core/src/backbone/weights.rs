//! Pretrained weight files in the safetensors format.
//!
//! Tensor names follow the torchvision ResNet-50 state dict (`conv1.weight`,
//! `layer1.0.bn1.running_mean`, `fc.weight`, ...). Tensors the architecture does
//! not use, such as `num_batches_tracked`, are ignored.

use std::path::Path;

use safetensors::{Dtype, SafeTensors};
use sha2::{Digest, Sha256};

use super::layers::{ParamId, ParamStore};
use super::BackboneError;

/// Hex SHA-256 of a file's contents.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String, BackboneError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| BackboneError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Fills every parameter of `store` from a serialized safetensors buffer, checking
/// each tensor's shape against the store's manifest.
pub fn load_safetensors(store: &mut ParamStore, bytes: &[u8]) -> Result<(), BackboneError> {
    let tensors = SafeTensors::deserialize(bytes).map_err(|e| BackboneError::Corrupt(e.to_string()))?;
    let infos = store.infos().to_vec();
    for (i, info) in infos.iter().enumerate() {
        let view = tensors
            .tensor(&info.name)
            .map_err(|_| BackboneError::MissingTensor(info.name.clone()))?;
        if view.shape() != info.shape.as_slice() {
            return Err(BackboneError::ShapeMismatch {
                name: info.name.clone(),
                expected: info.shape.clone(),
                found: view.shape().to_vec(),
            });
        }
        let values: Vec<f64> = match view.dtype() {
            Dtype::F32 => view
                .data()
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
                .collect(),
            Dtype::F64 => view
                .data()
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
            other => {
                return Err(BackboneError::UnsupportedDtype {
                    name: info.name.clone(),
                    dtype: format!("{other:?}"),
                })
            }
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BackboneError::Corrupt(format!("non-finite values in {}", info.name)));
        }
        store.get_mut(ParamId(i)).copy_from_slice(&values);
    }
    let unused = tensors.len() - infos.len().min(tensors.len());
    if unused > 0 {
        log::debug!("{unused} tensors in the weight file are not used by the architecture");
    }
    Ok(())
}

/// Writes every parameter of `store` as little-endian f32 tensors.
pub fn save_safetensors(store: &ParamStore, path: impl AsRef<Path>) -> Result<(), BackboneError> {
    let path = path.as_ref();
    let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = store
        .infos()
        .iter()
        .map(|info| {
            let bytes = store.values()[info.range()]
                .iter()
                .flat_map(|&v| (v as f32).to_le_bytes())
                .collect();
            (info.name.clone(), info.shape.clone(), bytes)
        })
        .collect();
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            safetensors::tensor::TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| BackboneError::Corrupt(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let serialized = safetensors::serialize(views, None).map_err(|e| BackboneError::Corrupt(e.to_string()))?;
    std::fs::write(path, serialized).map_err(|source| BackboneError::Io {
        path: path.to_path_buf(),
        source,
    })
}
