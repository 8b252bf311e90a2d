//! Frozen backbones with adapter attachment points and a trainable head.

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterVars, RankTiedAdapter, DEFAULT_INIT_LOG_ALPHA};
use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, LrvdError, Result};
use crate::numerics::{Matrix, RngState};
use crate::task::{SyntheticTask, TaskKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// One frozen linear layer from inputs to outputs.
    #[default]
    Linear,
    /// Two frozen relu layers followed by a trainable linear head.
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub backbone: BackboneKind,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_r_init")]
    pub r_init: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_init_log_alpha")]
    pub init_log_alpha: f64,
    /// Attach an adapter to every backbone layer.
    #[serde(default = "default_true")]
    pub adapters: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_hidden() -> usize {
    32
}
fn default_r_init() -> usize {
    8
}
fn default_lambda() -> f64 {
    16.0
}
fn default_init_log_alpha() -> f64 {
    DEFAULT_INIT_LOG_ALPHA
}
fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Linear,
            hidden: default_hidden(),
            r_init: default_r_init(),
            lambda: default_lambda(),
            init_log_alpha: default_init_log_alpha(),
            adapters: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    /// Frozen `d_out x d_in` weight.
    pub weight: Matrix,
    /// Frozen `1 x d_out` bias.
    pub bias: Option<Matrix>,
    pub activation: Activation,
    pub adapter: Option<RankTiedAdapter>,
}

impl Layer {
    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }

    fn base(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul_t(&self.weight)?;
        if let Some(b) = &self.bias {
            for i in 0..out.rows() {
                for (o, v) in out.row_mut(i).iter_mut().zip(b.data()) {
                    *o += v;
                }
            }
        }
        Ok(out)
    }

    fn activate(&self, m: Matrix) -> Matrix {
        match self.activation {
            Activation::Identity => m,
            Activation::Relu => m.map(|v| v.max(0.0)),
        }
    }
}

/// Trainable output head. Without a weight it only adds a bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Head {
    pub weight: Option<Matrix>,
    pub bias: Matrix,
}

impl Head {
    pub fn parameter_count(&self) -> usize {
        self.weight.as_ref().map_or(0, Matrix::len) + self.bias.len()
    }

    fn apply(&self, h: &Matrix) -> Result<Matrix> {
        let z = match &self.weight {
            Some(w) => h.matmul_t(w)?,
            None => h.clone(),
        };
        if z.cols() != self.bias.cols() {
            return shape_err("head", format!("{} features for a bias of {}", z.cols(), self.bias.cols()));
        }
        Ok(Matrix::from_fn(z.rows(), z.cols(), |i, j| z[(i, j)] + self.bias[(0, j)]))
    }
}

/// How adapters are evaluated in a plain (untaped) forward pass.
pub enum AdapterMode<'a> {
    /// Posterior mean.
    Deterministic,
    /// One joint draw of every adapter's factors.
    DirectSample(&'a mut RngState),
    /// Activation-space sampling with analytic moments.
    LocalReparam(&'a mut RngState),
    /// Adapters ignored.
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneModel {
    pub task: TaskKind,
    pub layers: Vec<Layer>,
    pub head: Head,
}

/// Build a backbone for `task`. Regression backbones reuse the task's
/// frozen base weight so the adapter sees exactly the teacher's residual.
pub fn build_model(config: &ModelConfig, task: &SyntheticTask) -> Result<BackboneModel> {
    let mut problems = Vec::new();
    if config.r_init == 0 {
        problems.push("model.r_init must be at least 1".to_string());
    }
    if !(config.lambda > 0.0) {
        problems.push("model.lambda must be positive".to_string());
    }
    if config.backbone == BackboneKind::Mlp && config.hidden == 0 {
        problems.push("model.hidden must be positive".to_string());
    }
    if !config.init_log_alpha.is_finite() {
        problems.push("model.init_log_alpha must be finite".to_string());
    }
    if !problems.is_empty() {
        return Err(LrvdError::Config(problems));
    }

    let mut rng = RngState::new(config.seed);
    let mut adapter_rng = rng.split(1);
    let mut adapter = |d_in: usize, d_out: usize| -> Result<Option<RankTiedAdapter>> {
        if !config.adapters {
            return Ok(None);
        }
        RankTiedAdapter::init(d_in, d_out, config.r_init, config.lambda, config.init_log_alpha, &mut adapter_rng)
            .map(Some)
    };
    let (d_in, d_out) = (task.d_in, task.d_out);
    let (layers, head) = match config.backbone {
        BackboneKind::Linear => {
            let weight = match &task.base_weight {
                Some(w) => w.clone(),
                None => rng.gaussian_matrix(d_out, d_in, 0.0, (1.0 / d_in as f64).sqrt())?,
            };
            let layer = Layer {
                weight,
                bias: None,
                activation: Activation::Identity,
                adapter: adapter(d_in, d_out)?,
            };
            (
                vec![layer],
                Head {
                    weight: None,
                    bias: Matrix::zeros(1, d_out),
                },
            )
        }
        BackboneKind::Mlp => {
            let h = config.hidden;
            let w1 = rng.gaussian_matrix(h, d_in, 0.0, (2.0 / d_in as f64).sqrt())?;
            let w2 = rng.gaussian_matrix(h, h, 0.0, (2.0 / h as f64).sqrt())?;
            let head_w = rng.gaussian_matrix(d_out, h, 0.0, (1.0 / h as f64).sqrt())?;
            let layers = vec![
                Layer {
                    weight: w1,
                    bias: None,
                    activation: Activation::Relu,
                    adapter: adapter(d_in, h)?,
                },
                Layer {
                    weight: w2,
                    bias: None,
                    activation: Activation::Relu,
                    adapter: adapter(h, h)?,
                },
            ];
            (
                layers,
                Head {
                    weight: Some(head_w),
                    bias: Matrix::zeros(1, d_out),
                },
            )
        }
    };
    Ok(BackboneModel {
        task: task.kind(),
        layers,
        head,
    })
}

impl BackboneModel {
    pub fn d_in(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn d_out(&self) -> usize {
        self.head.bias.cols()
    }

    pub fn adapters(&self) -> impl Iterator<Item = &RankTiedAdapter> {
        self.layers.iter().filter_map(|l| l.adapter.as_ref())
    }

    pub fn adapters_mut(&mut self) -> impl Iterator<Item = &mut RankTiedAdapter> {
        self.layers.iter_mut().filter_map(|l| l.adapter.as_mut())
    }

    pub fn effective_ranks(&self, tau: f64) -> Vec<usize> {
        self.adapters().map(|a| a.effective_rank(tau)).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.adapters().map(RankTiedAdapter::parameter_count).sum::<usize>() + self.head.parameter_count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(LrvdError::InvalidArgument("model has no layers".into()));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].d_out() != pair[1].d_in() {
                return shape_err("model", format!("layer {i} outputs {} but layer {} expects {}", pair[0].d_out(), i + 1, pair[1].d_in()));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(a) = &l.adapter {
                a.validate()?;
                if a.d_in() != l.d_in() || a.d_out() != l.d_out() {
                    return shape_err(
                        "model",
                        format!("adapter on layer {i} is {}->{}, layer is {}->{}", a.d_in(), a.d_out(), l.d_in(), l.d_out()),
                    );
                }
            }
        }
        let last = self.layers.last().expect("non-empty").d_out();
        let head_in = self.head.weight.as_ref().map_or(self.head.bias.cols(), Matrix::cols);
        if head_in != last {
            return shape_err("model", format!("head expects {head_in} features, backbone gives {last}"));
        }
        Ok(())
    }

    /// Plain forward pass returning outputs (regression) or logits.
    pub fn forward(&self, x: &Matrix, mut mode: AdapterMode<'_>) -> Result<Matrix> {
        if x.cols() != self.d_in() {
            return shape_err("forward", format!("input has {} features, model expects {}", x.cols(), self.d_in()));
        }
        let mut h = x.clone();
        for layer in &self.layers {
            let base = layer.base(&h)?;
            let z = match (&layer.adapter, &mut mode) {
                (None, _) | (_, AdapterMode::Frozen) => base,
                (Some(a), AdapterMode::Deterministic) => a.forward_deterministic(&h, &base)?,
                (Some(a), AdapterMode::DirectSample(rng)) => a.forward_direct_sample(&h, rng, &base)?,
                (Some(a), AdapterMode::LocalReparam(rng)) => a.forward_local_reparam(&h, rng, &base)?,
            };
            h = layer.activate(z);
        }
        self.head.apply(&h)
    }

    pub fn forward_deterministic(&self, x: &Matrix) -> Result<Matrix> {
        self.forward(x, AdapterMode::Deterministic)
    }
}

/// Trainable tensors of a model registered on a tape.
#[derive(Clone, Debug)]
pub struct ModelVars {
    /// One entry per layer.
    pub adapters: Vec<Option<AdapterVars>>,
    pub head_weight: Option<Var>,
    pub head_bias: Var,
}

impl ModelVars {
    pub fn register(tape: &mut Tape, model: &BackboneModel) -> Self {
        let adapters = model
            .layers
            .iter()
            .map(|l| l.adapter.as_ref().map(|a| AdapterVars::register(tape, a)))
            .collect();
        let head_weight = model.head.weight.as_ref().map(|w| tape.leaf(w.clone()));
        let head_bias = tape.leaf(model.head.bias.clone());
        Self {
            adapters,
            head_weight,
            head_bias,
        }
    }
}

/// Per-layer noise for the taped local-reparameterization forward.
pub fn draw_layer_noise(model: &BackboneModel, batch: usize, rng: &mut RngState) -> Result<Vec<Option<Matrix>>> {
    model
        .layers
        .iter()
        .map(|l| match l.adapter {
            Some(_) => rng.gaussian_matrix(batch, l.d_out(), 0.0, 1.0).map(Some),
            None => Ok(None),
        })
        .collect()
}

/// How the taped forward treats adapters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TapedAdapterMode {
    LocalReparam,
    Deterministic,
}

/// Taped forward pass. `noise` holds one fixed `ε` per adapted layer; it is
/// ignored in deterministic mode.
pub fn tape_forward(
    tape: &mut Tape,
    model: &BackboneModel,
    vars: &ModelVars,
    x: Var,
    noise: &[Option<Matrix>],
    clamp: (f64, f64),
    mode: TapedAdapterMode,
) -> Result<Var> {
    let mut h = x;
    for (li, layer) in model.layers.iter().enumerate() {
        let w = tape.leaf(layer.weight.clone());
        let wt = tape.transpose(w);
        let mut z = tape.matmul(h, wt)?;
        if let Some(b) = &layer.bias {
            let bv = tape.leaf(b.clone());
            z = tape.add(z, bv)?;
        }
        if let (Some(a), Some(av)) = (&layer.adapter, &vars.adapters[li]) {
            let contrib = match mode {
                TapedAdapterMode::LocalReparam => {
                    let eps = noise[li]
                        .as_ref()
                        .ok_or_else(|| LrvdError::InvalidArgument(format!("missing noise for layer {li}")))?;
                    let ev = tape.leaf(eps.clone());
                    av.local_reparam(tape, h, ev, a.scale(), clamp)?
                }
                TapedAdapterMode::Deterministic => av.deterministic(tape, h, a.scale())?,
            };
            z = tape.add(z, contrib)?;
        }
        h = match layer.activation {
            Activation::Identity => z,
            Activation::Relu => tape.relu(z),
        };
    }
    if let Some(w) = vars.head_weight {
        let wt = tape.transpose(w);
        h = tape.matmul(h, wt)?;
    }
    tape.add(h, vars.head_bias)
}
