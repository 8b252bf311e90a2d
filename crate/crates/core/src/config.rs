//! Run configuration files.
//!
//! A config is a JSON object with exactly four sections, `task`, `model`,
//! `train` and `eval`. Unknown keys anywhere are errors, and every error
//! names the offending key as `section.key`.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{LrvdError, Result};
use crate::evaluator::DEFAULT_ECE_BINS;
use crate::model::ModelConfig;
use crate::task::TaskConfig;
use crate::trainer::TrainConfig;

/// Library version, stamped into every output bundle.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

const SECTIONS: [&str; 4] = ["task", "model", "train", "eval"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_k_list")]
    pub k_list: Vec<usize>,
    #[serde(default = "default_bins")]
    pub ece_bins: usize,
}

fn default_k_list() -> Vec<usize> {
    vec![0, 5, 10]
}

fn default_bins() -> usize {
    DEFAULT_ECE_BINS
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_list: default_k_list(),
            ece_bins: default_bins(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(s)?;
        Self::from_value(&value)
    }

    /// Parses every section, collecting all problems before failing.
    pub fn from_value(value: &Value) -> Result<Self> {
        let Some(obj) = value.as_object() else {
            return Err(LrvdError::Config(vec!["config must be a JSON object".into()]));
        };
        let mut problems = Vec::new();
        for key in obj.keys() {
            if !SECTIONS.contains(&key.as_str()) {
                problems.push(format!("{key}: unknown section"));
            }
        }
        let task = section::<TaskConfig>(obj.get("task"), "task", true, &mut problems);
        let model = section::<ModelConfig>(obj.get("model"), "model", false, &mut problems);
        let train = section::<TrainConfig>(obj.get("train"), "train", true, &mut problems);
        let eval = section::<EvalConfig>(obj.get("eval"), "eval", false, &mut problems);
        if let Some(t) = &train {
            if let Err(LrvdError::Config(p)) = t.validate() {
                problems.extend(p);
            }
        }
        if let Some(e) = &eval {
            if e.k_list.is_empty() {
                problems.push("eval.k_list must not be empty".into());
            }
            if e.ece_bins == 0 {
                problems.push("eval.ece_bins must be positive".into());
            }
        }
        match (task, model, train, eval) {
            (Some(task), Some(model), Some(train), Some(eval)) if problems.is_empty() => Ok(Self {
                task,
                model,
                train,
                eval,
            }),
            _ => Err(LrvdError::Config(problems)),
        }
    }

    /// Sets the model-initialization and training seeds; the task is
    /// left unchanged so replicates share data.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.model.seed = seed;
        c.train.seed = seed;
        c
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn section<T: DeserializeOwned>(
    value: Option<&Value>,
    name: &str,
    required: bool,
    problems: &mut Vec<String>,
) -> Option<T> {
    let value = match value {
        Some(v) => v.clone(),
        None if required => {
            problems.push(format!("{name}: required section missing"));
            return None;
        }
        None => Value::Object(Default::default()),
    };
    if !value.is_object() {
        problems.push(format!("{name}: section must be an object"));
        return None;
    }
    match serde_json::from_value::<T>(value) {
        Ok(v) => Some(v),
        Err(e) => {
            problems.push(keyed_message(name, &e.to_string()));
            None
        }
    }
}

/// Rewrites serde's "missing field `x`" / "unknown field `x`" messages
/// as `section.x: ...`.
fn keyed_message(section: &str, msg: &str) -> String {
    let field = |prefix: &str| {
        msg.find(prefix).and_then(|at| {
            let rest = &msg[at + prefix.len()..];
            rest.find('`').map(|end| rest[..end].to_string())
        })
    };
    if let Some(f) = field("missing field `") {
        format!("{section}.{f}: required key missing")
    } else if let Some(f) = field("unknown field `") {
        format!("{section}.{f}: unknown key")
    } else if let Some(f) = field("unknown variant `") {
        format!("{section}: unknown variant {f:?}")
    } else {
        format!("{section}: {msg}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn minimal() -> Value {
        json!({
            "task": {"kind": "regression", "d_in": 8, "d_out": 8, "r_star": 2, "n_train": 100, "seed": 1},
            "train": {"beta": 1e-2, "steps": 10, "prune_steps": [10]}
        })
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let c = RunConfig::from_value(&minimal()).unwrap();
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.eval.k_list, vec![0, 5, 10]);
        assert_eq!(c.train.batch_size, 64);
    }

    #[test]
    fn missing_beta_is_named() {
        let mut v = minimal();
        v["train"].as_object_mut().unwrap().remove("beta");
        let err = RunConfig::from_value(&v).unwrap_err().to_string();
        assert!(err.contains("train.beta"), "{err}");
    }

    #[test]
    fn unknown_keys_are_errors_with_paths() {
        let mut v = minimal();
        v["model"] = json!({"r_nit": 4});
        v["extra"] = json!(1);
        let err = RunConfig::from_value(&v).unwrap_err().to_string();
        assert!(err.contains("model.r_nit: unknown key"), "{err}");
        assert!(err.contains("extra: unknown section"), "{err}");
    }

    #[test]
    fn value_roundtrip() {
        let c = RunConfig::from_value(&minimal()).unwrap();
        assert_eq!(RunConfig::from_value(&c.to_value()).unwrap(), c);
    }

    #[test]
    fn empty_k_list_rejected() {
        let mut v = minimal();
        v["eval"] = json!({"k_list": []});
        let err = RunConfig::from_value(&v).unwrap_err().to_string();
        assert!(err.contains("eval.k_list"), "{err}");
    }
}
