//! Model checkpoints on the shared binary container.

use std::path::Path;

use serde_json::json;

use crate::autodiff::Scalar;
use crate::container;
use crate::error::{Error, Result};

use super::{Model, ModelSpec};

/// Persist spec + parameters. Round-trips are bitwise.
pub fn save_checkpoint<S: Scalar>(model: &Model<S>, path: &Path) -> Result<()> {
    let descriptor = json!({
        "kind": "model",
        "spec": model.spec(),
    });
    container::write(path, descriptor, &model.store().flat_values())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Model<S>> {
    let raw = container::read(path)?;
    if raw.descriptor.get("kind").and_then(|v| v.as_str()) != Some("model") {
        return Err(Error::Format(format!(
            "{} is not a model checkpoint",
            path.display()
        )));
    }
    let spec: ModelSpec = serde_json::from_value(
        raw.descriptor
            .get("spec")
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint descriptor missing spec".into()))?,
    )
    .map_err(|e| Error::Format(format!("bad model spec in checkpoint: {e}")))?;
    let values = raw.values::<S>()?;
    let model = Model::from_parts(spec, &values)?;
    if model.param_count() != raw.count() {
        return Err(Error::Format(format!(
            "checkpoint holds {} values but spec implies {}",
            raw.count(),
            model.param_count()
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::models::build_model;

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::mlp(&[1, 28, 28], &[128], 10, 42);
        let model = build_model::<f32>(&spec).unwrap();

        let p1 = dir.path().join("a.ckpt");
        save_checkpoint(&model, &p1).unwrap();
        let restored = load_checkpoint::<f32>(&p1).unwrap();
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&restored, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        // Checkpoint of the MNIST MLP stores exactly 101,770 scalars.
        let raw = container::read(&p1).unwrap();
        assert_eq!(raw.count(), 101_770);
    }

    #[test]
    fn round_trip_preserves_forward_outputs_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::mlp(&[4], &[6], 3, 9);
        let model = build_model::<f32>(&spec).unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let restored = load_checkpoint::<f32>(&path).unwrap();

        let batch = Tensor::new(&[2, 4], vec![0.1, 0.9, -0.4, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let a = model.logits(&batch).unwrap();
        let b = restored.logits(&batch).unwrap();
        let bits_a: Vec<u32> = a.values().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = b.values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn corrupted_magic_fails_to_load() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::mlp(&[4], &[2], 2, 1);
        let model = build_model::<f32>(&spec).unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[1] = b'?';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn wrong_precision_fails_to_load() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::mlp(&[4], &[2], 2, 1);
        let model = build_model::<f64>(&spec).unwrap();
        let path = dir.path().join("m64.ckpt");
        save_checkpoint(&model, &path).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
        assert!(load_checkpoint::<f64>(&path).is_ok());
    }
}
