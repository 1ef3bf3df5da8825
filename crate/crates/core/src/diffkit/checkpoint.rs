//! Versioned JSON checkpoint: named tensors with shapes and row-major values,
//! plus free-form numeric metadata. Floats are written in shortest round-trip
//! form, so a save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::{Parameterized, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "tsode-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub tensors: Vec<NamedTensor>,
    #[serde(default)]
    pub meta: BTreeMap<String, Vec<f64>>,
}

impl Checkpoint {
    pub fn capture<P: Parameterized + ?Sized>(model: &P) -> Self {
        let tensors = model
            .named_tensors()
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name,
                shape: t.shape.clone(),
                values: t.values.clone(),
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            tensors,
            meta: BTreeMap::new(),
        }
    }

    /// Copy values into `model`, which must have identical names and shapes.
    pub fn restore<P: Parameterized + ?Sized>(&self, model: &mut P) -> Result<()> {
        let names: Vec<(String, Vec<usize>)> = model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape.clone()))
            .collect();
        if names.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                names.len()
            )));
        }
        for ((name, shape), saved) in names.iter().zip(&self.tensors) {
            if name != &saved.name || shape != &saved.shape {
                return Err(Error::Shape(format!(
                    "checkpoint tensor {} {:?} does not match model tensor {name} {shape:?}",
                    saved.name, saved.shape
                )));
            }
        }
        for (t, saved) in model.tensors_mut().into_iter().zip(&self.tensors) {
            *t = Tensor::from_vec(&saved.shape, saved.values.clone())?;
        }
        Ok(())
    }

    pub fn meta_scalar(&self, key: &str) -> Result<f64> {
        self.meta_vec(key)?
            .first()
            .copied()
            .ok_or_else(|| Error::Config(format!("checkpoint meta {key} is empty")))
    }

    pub fn meta_vec(&self, key: &str) -> Result<&[f64]> {
        self.meta
            .get(key)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks meta {key}")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("not a checkpoint: format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", ck.version)));
        }
        for t in &ck.tensors {
            if t.shape.iter().product::<usize>() != t.values.len() {
                return Err(Error::Shape(format!("checkpoint tensor {} is ragged", t.name)));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkit::nn::GruCell;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gru_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cell = GruCell::new(7, 8, &mut rng);
        let mut ck = Checkpoint::capture(&cell);
        ck.meta.insert("bg_mean".into(), vec![0.1 + 0.2]);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        let mut other = GruCell::zeros(7, 8);
        back.restore(&mut other).unwrap();
        for ((_, a), (_, b)) in cell.named_tensors().into_iter().zip(other.named_tensors()) {
            let bits_a: Vec<u64> = a.values.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn restore_checks_shapes() {
        let ck = Checkpoint::capture(&GruCell::zeros(7, 8));
        assert!(ck.restore(&mut GruCell::zeros(7, 9)).is_err());
    }

    #[test]
    fn rejects_foreign_format() {
        let text = r#"{"format":"other","version":1,"tensors":[]}"#;
        assert!(Checkpoint::from_json(text).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_finite_values_roundtrip(values in proptest::collection::vec(
            any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..64)) {
            let ck = Checkpoint {
                format: CHECKPOINT_FORMAT.into(),
                version: CHECKPOINT_VERSION,
                tensors: vec![NamedTensor { name: "t".into(), shape: vec![values.len()], values: values.clone() }],
                meta: BTreeMap::new(),
            };
            let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
            let a: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.tensors[0].values.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
