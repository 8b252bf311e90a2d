//! JSON model checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LrvdError, Result};
use crate::model::BackboneModel;

pub const FORMAT: &str = "lrvd-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    format: String,
    version: u32,
    model: BackboneModel,
}

pub fn to_json(model: &BackboneModel) -> String {
    serde_json::to_string_pretty(&Envelope {
        format: FORMAT.into(),
        version: VERSION,
        model: model.clone(),
    })
    .expect("model serializes")
}

pub fn from_json(s: &str) -> Result<BackboneModel> {
    let env: Envelope = serde_json::from_str(s)?;
    if env.format != FORMAT || env.version != VERSION {
        return Err(LrvdError::InvalidArgument(format!(
            "unsupported checkpoint {} v{}",
            env.format, env.version
        )));
    }
    env.model.validate()?;
    Ok(env.model)
}

/// Writes through a temporary file and renames, so readers never see a
/// half-written checkpoint.
pub fn save_checkpoint(model: &BackboneModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, to_json(model))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<BackboneModel> {
    from_json(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, BackboneKind, ModelConfig};
    use crate::numerics::RngState;
    use crate::task::make_cluster_classification_task;

    fn trained_like_model() -> (BackboneModel, crate::task::SyntheticTask) {
        let task = make_cluster_classification_task(5, 3, 3.0, 0.1, [20, 10, 10], 1).unwrap();
        let mut m = build_model(
            &ModelConfig {
                backbone: BackboneKind::Mlp,
                hidden: 6,
                ..ModelConfig::default()
            },
            &task,
        )
        .unwrap();
        let mut rng = RngState::new(2);
        for a in m.adapters_mut() {
            a.mu_b = rng.gaussian_matrix(a.d_out(), a.r_init, 0.0, 0.1).unwrap();
            a.log_alpha = (0..a.r_init).map(|_| rng.normal() * 3.0).collect();
            a.prune(4.0);
            a.active_mask[0] = false;
        }
        (m, task)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let (m, task) = trained_like_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(
            back.forward_deterministic(&task.test.x).unwrap().data(),
            m.forward_deterministic(&task.test.x).unwrap().data()
        );
        for (a, b) in back.adapters().zip(m.adapters()) {
            assert_eq!(a.active_mask, b.active_mask);
        }
    }

    #[test]
    fn truncated_file_is_an_error() {
        let (m, _) = trained_like_model();
        let s = to_json(&m);
        let err = from_json(&s[..s.len() / 2]).unwrap_err();
        assert!(err.to_string().contains("line"), "{err}");
    }
}
