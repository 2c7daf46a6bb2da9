use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, AdamConfig, DiffError, MlpSpec, ParamSet, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&Tensor> for TensorRecord {
    fn from(t: &Tensor) -> Self {
        Self {
            shape: t.shape.clone(),
            data: t.data.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub step: u64,
    pub config: AdamConfig,
    pub first_moment: BTreeMap<String, TensorRecord>,
    pub second_moment: BTreeMap<String, TensorRecord>,
}

/// Seed plus the number of 32-bit words drawn, enough to rebuild a ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub draws: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub spec: BTreeMap<String, MlpSpec>,
    pub tensors: BTreeMap<String, TensorRecord>,
    #[serde(default)]
    pub optimizer: Option<OptimizerRecord>,
    pub rng_state: RngState,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

fn record_map(params: &ParamSet, tensors: &[Tensor]) -> BTreeMap<String, TensorRecord> {
    params
        .ids()
        .map(|id| (params.name(id).to_string(), (&tensors[id.0]).into()))
        .collect()
}

impl Checkpoint {
    pub fn capture(
        params: &ParamSet,
        spec: BTreeMap<String, MlpSpec>,
        optimizer: Option<&Adam>,
        rng_state: RngState,
        metadata: serde_json::Value,
    ) -> Self {
        let tensors = params
            .ids()
            .map(|id| (params.name(id).to_string(), params.tensor(id).into()))
            .collect();
        let optimizer = optimizer.map(|opt| OptimizerRecord {
            step: opt.step,
            config: opt.config,
            first_moment: record_map(params, &opt.m),
            second_moment: record_map(params, &opt.v),
        });
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            spec,
            tensors,
            optimizer,
            rng_state,
            metadata,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), DiffError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| DiffError::Io(format!("{}: {e}", dir.display())))?;
        }
        fs::write(path, self.to_json()).map_err(|e| DiffError::Io(format!("{}: {e}", path.display())))
    }

    pub fn from_json(text: &str) -> Result<Self, DiffError> {
        let ckpt: Checkpoint =
            serde_json::from_str(text).map_err(|e| DiffError::Corrupt(e.to_string()))?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(DiffError::CheckpointMismatch {
                field: "format_version".into(),
                detail: format!(
                    "expected {CHECKPOINT_FORMAT_VERSION}, found {}",
                    ckpt.format_version
                ),
            });
        }
        for (name, t) in &ckpt.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(DiffError::Corrupt(format!(
                    "tensor `{name}` has shape {:?} but {} values",
                    t.shape,
                    t.data.len()
                )));
            }
        }
        Ok(ckpt)
    }

    /// Checks the stored architecture against `spec` and copies every tensor
    /// into `params`. Nothing is written unless all checks pass.
    pub fn restore_into(
        &self,
        params: &mut ParamSet,
        spec: &BTreeMap<String, MlpSpec>,
    ) -> Result<(), DiffError> {
        for (module, want) in spec {
            match self.spec.get(module) {
                None => {
                    return Err(DiffError::CheckpointMismatch {
                        field: format!("spec.{module}"),
                        detail: "missing from checkpoint".into(),
                    })
                }
                Some(have) if have != want => {
                    return Err(DiffError::CheckpointMismatch {
                        field: format!("spec.{module}"),
                        detail: format!("checkpoint widths {:?}, model widths {:?}", have.widths, want.widths),
                    })
                }
                _ => {}
            }
        }
        for id in params.ids() {
            let name = params.name(id);
            let rec = self
                .tensors
                .get(name)
                .ok_or_else(|| DiffError::CheckpointMismatch {
                    field: format!("tensors.{name}"),
                    detail: "missing from checkpoint".into(),
                })?;
            if rec.shape != params.shape(id) {
                return Err(DiffError::CheckpointMismatch {
                    field: format!("tensors.{name}"),
                    detail: format!("checkpoint shape {:?}, model shape {:?}", rec.shape, params.shape(id)),
                });
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| params.id(k).is_err()) {
            return Err(DiffError::CheckpointMismatch {
                field: format!("tensors.{extra}"),
                detail: "not present in model".into(),
            });
        }
        for id in params.ids().collect::<Vec<_>>() {
            let rec = &self.tensors[params.name(id)];
            params.value_mut(id).copy_from_slice(&rec.data);
        }
        Ok(())
    }

    /// Rebuilds optimizer state for `params`, if one was saved.
    pub fn restore_optimizer(&self, params: &ParamSet) -> Result<Option<Adam>, DiffError> {
        let Some(rec) = &self.optimizer else {
            return Ok(None);
        };
        let mut opt = Adam::new(params, rec.config);
        opt.step = rec.step;
        for id in params.ids() {
            let name = params.name(id);
            for (label, map, dst) in [
                ("first_moment", &rec.first_moment, &mut opt.m[id.0]),
                ("second_moment", &rec.second_moment, &mut opt.v[id.0]),
            ] {
                let t = map.get(name).ok_or_else(|| DiffError::CheckpointMismatch {
                    field: format!("optimizer.{label}.{name}"),
                    detail: "missing".into(),
                })?;
                if t.shape != dst.shape {
                    return Err(DiffError::CheckpointMismatch {
                        field: format!("optimizer.{label}.{name}"),
                        detail: format!("shape {:?} vs {:?}", t.shape, dst.shape),
                    });
                }
                dst.data.copy_from_slice(&t.data);
            }
        }
        Ok(Some(opt))
    }
}

/// Writes a checkpoint of `params` (and optionally optimizer state) to `path`.
pub fn save_params(
    params: &ParamSet,
    spec: BTreeMap<String, MlpSpec>,
    optimizer: Option<&Adam>,
    rng_state: RngState,
    metadata: serde_json::Value,
    path: &Path,
) -> Result<(), DiffError> {
    Checkpoint::capture(params, spec, optimizer, rng_state, metadata).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, DiffError> {
    let text =
        fs::read_to_string(path).map_err(|e| DiffError::Io(format!("{}: {e}", path.display())))?;
    Checkpoint::from_json(&text)
}

/// Loads tensors from `path` into `params`, validating against `spec`.
pub fn load_params(
    params: &mut ParamSet,
    spec: &BTreeMap<String, MlpSpec>,
    path: &Path,
) -> Result<Checkpoint, DiffError> {
    let ckpt = load_checkpoint(path)?;
    ckpt.restore_into(params, spec)?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Mlp;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(widths: &[usize], seed: u64) -> (ParamSet, BTreeMap<String, MlpSpec>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let spec = MlpSpec::tanh(widths);
        Mlp::register(&mut ps, "net", spec.clone(), &mut rng).unwrap();
        (ps, BTreeMap::from([("net".to_string(), spec)]))
    }

    const RNG: RngState = RngState { seed: 7, draws: 123 };

    #[test]
    fn round_trip_is_bit_exact() {
        let (mut ps, spec) = build(&[4, 9, 3], 11);
        let mut opt = Adam::new(&ps, AdamConfig::default());
        for id in ps.ids().collect::<Vec<_>>() {
            ps.grad_mut(id).iter_mut().for_each(|g| *g = 0.1234567);
        }
        opt.step(&mut ps);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        save_params(&ps, spec.clone(), Some(&opt), RNG, serde_json::json!({"k": 1}), &path).unwrap();

        let (mut fresh, _) = build(&[4, 9, 3], 999);
        let ck = load_params(&mut fresh, &spec, &path).unwrap();
        for id in ps.ids() {
            let a: Vec<u64> = ps.value(id).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = fresh.value(id).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        let opt2 = ck.restore_optimizer(&fresh).unwrap().unwrap();
        assert_eq!(opt2.step, 1);
        assert_eq!(opt2.m, opt.m);
        assert_eq!(opt2.v, opt.v);
        assert_eq!(ck.rng_state, RNG);
        assert_eq!(ck.metadata["k"], 1);
    }

    #[test]
    fn mismatched_spec_names_first_tensor() {
        let (ps, spec) = build(&[4, 9, 3], 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        save_params(&ps, spec, None, RNG, serde_json::Value::Null, &path).unwrap();

        // Same architecture name, different widths, and a spec map that only
        // names the module so the tensor check is reached.
        let (mut other, _) = build(&[4, 8, 3], 1);
        let ckpt = load_checkpoint(&path).unwrap();
        let err = ckpt.restore_into(&mut other, &BTreeMap::new()).unwrap_err();
        assert_eq!(
            err,
            DiffError::CheckpointMismatch {
                field: "tensors.net.l0.weight".into(),
                detail: "checkpoint shape [9, 4], model shape [8, 4]".into()
            }
        );
        let (_, other_spec) = build(&[4, 8, 3], 1);
        let err = load_params(&mut other, &other_spec, &path).unwrap_err();
        assert!(matches!(err, DiffError::CheckpointMismatch { field, .. } if field == "spec.net"));
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(&path, "{not json").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(DiffError::Corrupt(_))));

        let (ps, spec) = build(&[2, 2], 3);
        let mut ck = Checkpoint::capture(&ps, spec, None, RNG, serde_json::Value::Null);
        ck.tensors.get_mut("net.l0.bias").unwrap().data.pop();
        fs::write(&path, ck.to_json()).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(DiffError::Corrupt(m)) if m.contains("net.l0.bias")));

        ck.format_version = 2;
        fs::write(&path, ck.to_json()).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(DiffError::CheckpointMismatch { field, .. }) if field == "format_version"
        ));
    }
}
