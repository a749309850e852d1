//! JSON persistence of trained models.
//!
//! Floats are written in shortest round-trip decimal form, so a save/load
//! cycle reproduces every parameter bit for bit and identical checkpoints
//! serialize to identical bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Checkpoint, CHECKPOINT_FORMAT_VERSION};

pub fn checkpoint_to_string(ck: &Checkpoint) -> Result<String> {
    let mut s = serde_json::to_string(ck)?;
    s.push('\n');
    Ok(s)
}

pub fn checkpoint_from_str(text: &str) -> Result<Checkpoint> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == CHECKPOINT_FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Format(format!(
                "unsupported checkpoint format_version {v} (this build reads {CHECKPOINT_FORMAT_VERSION})"
            )))
        }
        None => return Err(Error::Format("checkpoint has no format_version".into())),
    }
    let ck: Checkpoint = serde_json::from_value(value)?;
    ck.model.validate()?;
    Ok(ck)
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::model::{train, Mode, TrainConfig};
    use crate::ndmath::DenseArray;
    use crate::priors::LabelSpec;

    fn tiny_checkpoint() -> Checkpoint {
        let counts = DenseArray::matrix(8, 4, (0..32).map(|i| ((i * 5) % 4) as f64).collect()).unwrap();
        let labels = DenseArray::matrix(8, 1, (0..8).map(|i| (i % 2) as f64).collect()).unwrap();
        let ds = Dataset::new(counts).with_labels(labels, LabelSpec::discrete(2));
        let cfg = TrainConfig { latent_dim: 2, epochs: 2, batch_size: 4, val_fraction: 0.25, mode: Mode::PiVae, ..TrainConfig::default() };
        train(&ds, &cfg).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ck = tiny_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        for (a, b) in ck.model.store.iter().zip(back.model.store.iter()) {
            assert_eq!(a.name, b.name);
            let bits = |v: &DenseArray| v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(back, ck);
        assert_eq!(checkpoint_to_string(&back).unwrap(), std::fs::read_to_string(&path).unwrap());
    }

    #[test]
    fn unknown_version_rejected() {
        let text = checkpoint_to_string(&tiny_checkpoint()).unwrap().replacen("\"format_version\":1", "\"format_version\":99", 1);
        assert!(matches!(checkpoint_from_str(&text), Err(Error::Format(_))));
        assert!(matches!(checkpoint_from_str("{}"), Err(Error::Format(_))));
    }

    #[test]
    fn awkward_floats_roundtrip() {
        for v in [0.1, 1.0 / 3.0, f64::MIN_POSITIVE, 5e-324, 1.7976931348623157e308, -2.2250738585072014e-308] {
            let s = serde_json::to_string(&v).unwrap();
            assert_eq!(serde_json::from_str::<f64>(&s).unwrap().to_bits(), v.to_bits(), "{s}");
        }
    }
}
