//! JSON checkpoints for detector and classifier models.
//!
//! ```text
//! {"format": "delora-checkpoint", "version": 1,
//!  "kind": "dual_adapter" | "classifier",
//!  "seed": 0, "class_names": ["a", "b"],
//!  "model": {...}}
//! ```
//!
//! Matrices are `{"rows", "cols", "values"}` with row-major values. A
//! `dual_adapter` model holds `base` (w0), `clean` and `noisy` adapters (each
//! `{"a", "b"}`); a `classifier` model is `{"mode": "full", "weight"}` or
//! `{"mode": "peft", "base", "adapter"}`. Floats are written in shortest
//! round-trip form, so a save/load cycle is exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::DualAdapterModel;
use crate::error::{Error, Result};
use crate::stage2::ClassifierModel;

pub const FORMAT: &str = "delora-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum CheckpointModel {
    DualAdapter(DualAdapterModel),
    Classifier(ClassifierModel),
}

impl CheckpointModel {
    fn num_classes(&self) -> usize {
        match self {
            CheckpointModel::DualAdapter(m) => m.num_classes(),
            CheckpointModel::Classifier(m) => m.num_classes(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub class_names: Vec<String>,
    pub model: CheckpointModel,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    DualAdapter,
    Classifier,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct File {
    format: String,
    version: u32,
    kind: Kind,
    seed: u64,
    class_names: Vec<String>,
    model: serde_json::Value,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let (kind, model) = match &self.model {
            CheckpointModel::DualAdapter(m) => (Kind::DualAdapter, serde_json::to_value(m)?),
            CheckpointModel::Classifier(m) => (Kind::Classifier, serde_json::to_value(m)?),
        };
        let file = File {
            format: FORMAT.into(),
            version: VERSION,
            kind,
            seed: self.seed,
            class_names: self.class_names.clone(),
            model,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: File = serde_json::from_str(text)?;
        if file.format != FORMAT || file.version != VERSION {
            return Err(Error::contract(format!(
                "unsupported checkpoint {} v{}",
                file.format, file.version
            )));
        }
        let model = match file.kind {
            Kind::DualAdapter => {
                let m: DualAdapterModel = serde_json::from_value(file.model)?;
                // re-run the shape checks serde skipped
                CheckpointModel::DualAdapter(DualAdapterModel::new(
                    m.base().clone(),
                    m.clean().clone(),
                    m.noisy().clone(),
                )?)
            }
            Kind::Classifier => {
                let m: ClassifierModel = serde_json::from_value(file.model)?;
                if let ClassifierModel::Peft { base, adapter } = &m {
                    if adapter.update_shape() != base.w0().shape() {
                        return Err(Error::contract("adapter update shape differs from w0"));
                    }
                }
                CheckpointModel::Classifier(m)
            }
        };
        if model.num_classes() != file.class_names.len() {
            return Err(Error::contract("class_names length differs from the model's class count"));
        }
        Ok(Checkpoint {
            seed: file.seed,
            class_names: file.class_names,
            model,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Matrix;
    use crate::rng::Rng;

    fn dual() -> DualAdapterModel {
        let m = DualAdapterModel::init(3, 5, 2, 0.3, 0.7, &mut Rng::new(1)).unwrap();
        let mut rng = Rng::new(2);
        let p: Vec<f64> = m.to_params().iter().map(|_| rng.normal() * 1e3 / 7.0).collect();
        m.with_params(&p).unwrap()
    }

    #[test]
    fn dual_roundtrip_is_bit_exact() {
        let ck = Checkpoint {
            seed: u64::MAX,
            class_names: vec!["x".into(), "y".into(), "z".into()],
            model: CheckpointModel::DualAdapter(dual()),
        };
        let text = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ck);
        let (CheckpointModel::DualAdapter(a), CheckpointModel::DualAdapter(b)) = (&ck.model, &back.model) else {
            panic!("kind changed");
        };
        let bits = |m: &DualAdapterModel| m.to_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
        assert_eq!(a.base().w0(), b.base().w0());
    }

    #[test]
    fn classifier_roundtrip() {
        let w = Matrix::from_vec(2, 2, vec![0.1, -1e-300, 5e300, std::f64::consts::PI]).unwrap();
        let ck = Checkpoint {
            seed: 3,
            class_names: vec!["a".into(), "b".into()],
            model: CheckpointModel::Classifier(ClassifierModel::Full { weight: w }),
        };
        assert_eq!(Checkpoint::from_json(&ck.to_json().unwrap()).unwrap(), ck);
    }

    #[test]
    fn rejects_bad_files() {
        let ck = Checkpoint {
            seed: 3,
            class_names: vec!["a".into(), "b".into()],
            model: CheckpointModel::Classifier(ClassifierModel::zeros(2, 2)),
        };
        let good = ck.to_json().unwrap();
        assert!(Checkpoint::from_json(&good.replace("delora-checkpoint", "other")).is_err());
        assert!(Checkpoint::from_json(&good.replace("\"version\": 1", "\"version\": 2")).is_err());
        assert!(Checkpoint::from_json(&good.replace("\"b\"", "\"b\", \"c\"")).is_err());
        assert!(Checkpoint::from_json(&good.replace("\"seed\"", "\"extra\": 1, \"seed\"")).is_err());
        assert!(Checkpoint::from_json("{").is_err());
    }
}
