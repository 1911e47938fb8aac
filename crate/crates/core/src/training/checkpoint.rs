//! Checkpoint files: named row-major `f32` tensors plus a JSON metadata
//! record, stored in the safetensors container format.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const META_KEY: &str = "lgcvs";

/// What a checkpoint was trained with and how well it did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// 1 or 2 for the latent graph model, 0 for baselines.
    pub stage: u8,
    pub epoch: usize,
    /// Validation metric used for model selection.
    pub metric: f64,
    pub metric_name: String,
    /// Snapshot of the run configuration.
    pub config: serde_json::Value,
}

/// Writes every variable of `vars` as `f32`.
pub fn save_checkpoint(vars: &VarMap, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let data = vars.data().lock().expect("variable map lock");
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, var) in data.iter() {
        tensors.insert(name.clone(), var.as_tensor().to_dtype(DType::F32)?.contiguous()?);
    }
    drop(data);
    let mut info = HashMap::new();
    info.insert(META_KEY.to_string(), serde_json::to_string(meta)?);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = safetensors::serialize(tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(info))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Tensors and metadata of a checkpoint file.
pub fn load_checkpoint(path: &Path, device: &Device) -> Result<(HashMap<String, Tensor>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let (_, header) =
        safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let meta_text = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{} has no run metadata", path.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(meta_text)?;
    let mut tensors = HashMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != safetensors::Dtype::F32 {
            return Err(Error::Checkpoint(format!("tensor {name} is not f32")));
        }
        let t = Tensor::from_raw_buffer(view.data(), DType::F32, view.shape(), device)?;
        tensors.insert(name, t);
    }
    Ok((tensors, meta))
}

/// Copies `tensors` into the matching variables. Every variable whose name
/// starts with one of `prefixes` must be present with the same shape.
pub fn restore_vars(vars: &VarMap, tensors: &HashMap<String, Tensor>, prefixes: &[&str]) -> Result<usize> {
    let data = vars.data().lock().expect("variable map lock");
    let mut restored = 0;
    for (name, var) in data.iter() {
        if !prefixes.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        let t = tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.dims() != var.dims() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.dims(),
                var.dims()
            )));
        }
        var.set(&t.to_dtype(var.dtype())?)?;
        restored += 1;
    }
    Ok(restored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_nn::{Module, VarBuilder};

    #[test]
    fn round_trip_is_bit_exact() {
        let dev = Device::Cpu;
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F32, &dev);
        let lin = candle_nn::linear(5, 3, vb.pp("a.lin")).unwrap();
        let x = Tensor::rand(-1f32, 1f32, (4, 5), &dev).unwrap();
        let before: Vec<f32> = lin.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let meta = CheckpointMeta {
            stage: 1,
            epoch: 3,
            metric: 0.123456789,
            metric_name: "recall@10".into(),
            config: serde_json::json!({"k": 1}),
        };
        save_checkpoint(&vm, &meta, &path).unwrap();

        let vm2 = VarMap::new();
        let vb2 = VarBuilder::from_varmap(&vm2, DType::F32, &dev);
        let lin2 = candle_nn::linear(5, 3, vb2.pp("a.lin")).unwrap();
        let (tensors, meta2) = load_checkpoint(&path, &dev).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(restore_vars(&vm2, &tensors, &[""]).unwrap(), 2);
        let after: Vec<f32> = lin2.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn missing_or_mismatched_tensors_are_errors() {
        let dev = Device::Cpu;
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F32, &dev);
        candle_nn::linear(5, 3, vb.pp("a")).unwrap();
        let mut t = HashMap::new();
        assert!(restore_vars(&vm, &t, &["a"]).is_err());
        assert_eq!(restore_vars(&vm, &t, &["b"]).unwrap(), 0);
        t.insert("a.weight".to_string(), Tensor::zeros((2, 2), DType::F32, &dev).unwrap());
        t.insert("a.bias".to_string(), Tensor::zeros(3, DType::F32, &dev).unwrap());
        assert!(restore_vars(&vm, &t, &["a"]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("x.safetensors");
        std::fs::write(&bad, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&bad, &dev).is_err());
    }
}
