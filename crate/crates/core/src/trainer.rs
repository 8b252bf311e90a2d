//! ELBO training: local-reparameterization forward, β-weighted KL
//! surrogate, Adam, scheduled pruning and periodic evaluation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::{kl_sum_scaled, KlScaling, DEFAULT_LOG_ALPHA_CLAMP, DEFAULT_TAU};
use crate::autodiff::{Tape, Var};
use crate::error::{LrvdError, Result};
use crate::evaluator::{evaluate, EvalMetrics, DEFAULT_ECE_BINS};
use crate::model::{draw_layer_noise, tape_forward, BackboneModel, ModelVars, TapedAdapterMode};
use crate::numerics::{Matrix, RngState};
use crate::optim::{adam_step, AdamParams, AdamState};
use crate::parallel::Execution;
use crate::task::{Dataset, SyntheticTask, Targets};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub adapter_lr: f64,
    #[serde(default = "default_lr")]
    pub head_lr: f64,
    /// Learning rate for `log α`; defaults to `adapter_lr`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_alpha_lr: Option<f64>,
    /// KL scale. Required: there is no neutral default for it.
    pub beta: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_prune_steps")]
    pub prune_steps: Vec<usize>,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_clamp")]
    pub log_alpha_clamp: [f64; 2],
    /// MC samples for the periodic stochastic evaluation; 0 disables it.
    #[serde(default = "default_eval_k")]
    pub eval_k: usize,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Decoupled weight decay, applied to the head only.
    #[serde(default = "default_weight_decay")]
    pub head_weight_decay: f64,
    #[serde(default)]
    pub kl_scaling: KlScaling,
}

fn default_lr() -> f64 {
    1e-2
}
fn default_tau() -> f64 {
    DEFAULT_TAU
}
fn default_steps() -> usize {
    3000
}
fn default_batch() -> usize {
    64
}
fn default_prune_steps() -> Vec<usize> {
    vec![1000, 2000, 3000]
}
fn default_eval_interval() -> usize {
    100
}
fn default_clamp() -> [f64; 2] {
    [DEFAULT_LOG_ALPHA_CLAMP.0, DEFAULT_LOG_ALPHA_CLAMP.1]
}
fn default_eval_k() -> usize {
    10
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    1e-2
}

impl TrainConfig {
    pub fn with_beta(beta: f64) -> Self {
        Self {
            adapter_lr: default_lr(),
            head_lr: default_lr(),
            log_alpha_lr: None,
            beta,
            tau: default_tau(),
            steps: default_steps(),
            batch_size: default_batch(),
            prune_steps: default_prune_steps(),
            eval_interval: default_eval_interval(),
            seed: 0,
            log_alpha_clamp: default_clamp(),
            eval_k: default_eval_k(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            head_weight_decay: default_weight_decay(),
            kl_scaling: KlScaling::PerRank,
        }
    }

    pub fn log_alpha_lr(&self) -> f64 {
        self.log_alpha_lr.unwrap_or(self.adapter_lr)
    }

    pub fn clamp(&self) -> (f64, f64) {
        (self.log_alpha_clamp[0], self.log_alpha_clamp[1])
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Collects every violated constraint, keyed by config path.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (key, v) in [
            ("train.adapter_lr", self.adapter_lr),
            ("train.head_lr", self.head_lr),
            ("train.log_alpha_lr", self.log_alpha_lr()),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                bad.push(format!("{key} must be positive, got {v}"));
            }
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            bad.push(format!("train.beta must be >= 0, got {}", self.beta));
        }
        if !self.tau.is_finite() {
            bad.push("train.tau must be finite".into());
        }
        if self.batch_size == 0 {
            bad.push("train.batch_size must be positive".into());
        }
        if self.eval_interval == 0 {
            bad.push("train.eval_interval must be positive".into());
        }
        if let Some(s) = self.prune_steps.iter().find(|&&s| s > self.steps || s == 0) {
            bad.push(format!("train.prune_steps entry {s} outside 1..={}", self.steps));
        }
        let [lo, hi] = self.log_alpha_clamp;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            bad.push(format!("train.log_alpha_clamp must be an increasing finite pair, got [{lo}, {hi}]"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            bad.push("train.adam_beta1/adam_beta2 must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            bad.push("train.adam_eps must be positive".into());
        }
        if !(self.head_weight_decay >= 0.0) {
            bad.push("train.head_weight_decay must be >= 0".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(LrvdError::Config(bad))
        }
    }
}

/// One evaluation row of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub step: usize,
    pub train_loss: f64,
    pub data_nll: f64,
    pub kl_sum: f64,
    /// Per adapter, `#{active i : log α_i < τ}`.
    pub effective_rank: Vec<usize>,
    /// Per adapter, ranks not yet pruned.
    pub active_ranks: Vec<usize>,
    pub val: EvalMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_mc: Option<EvalMetrics>,
    /// Wall-clock since the start of training. Not serialized, so row
    /// streams stay byte-identical across reruns.
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl RunRow {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("run rows serialize")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<RunRow>,
}

impl RunRecord {
    /// Appends a row; steps must strictly increase.
    pub fn push(&mut self, row: RunRow) {
        if let Some(last) = self.rows.last() {
            assert!(row.step > last.step, "run rows must have increasing steps");
        }
        self.rows.push(row);
    }

    pub fn last(&self) -> Option<&RunRow> {
        self.rows.last()
    }

    pub fn to_jsonl(&self) -> String {
        self.rows.iter().map(|r| r.to_json_line() + "\n").collect()
    }
}

/// Scalar loss pieces of one ELBO evaluation.
pub struct ElboParts {
    pub loss: Var,
    pub data_nll: Var,
    pub kl: Var,
}

/// Builds `mean data NLL − β · Σ_adapters kl_sum` on `tape`, with the
/// adapters evaluated by local reparameterization under fixed noise.
pub fn elbo_loss(
    tape: &mut Tape,
    model: &BackboneModel,
    vars: &ModelVars,
    batch: &Dataset,
    noise: &[Option<Matrix>],
    beta: f64,
    clamp: (f64, f64),
    kl_scaling: KlScaling,
) -> Result<ElboParts> {
    if batch.is_empty() {
        return Err(LrvdError::InvalidArgument("elbo_loss needs a nonempty batch".into()));
    }
    let x = tape.leaf(batch.x.clone());
    let out = tape_forward(tape, model, vars, x, noise, clamp, TapedAdapterMode::LocalReparam)?;
    let data_nll = data_loss(tape, out, &batch.y)?;
    let mut kl_total: Option<Var> = None;
    for (layer, av) in model.layers.iter().zip(&vars.adapters) {
        if let (Some(a), Some(av)) = (&layer.adapter, av) {
            let weight = match kl_scaling {
                KlScaling::PerRank => 1.0,
                KlScaling::PerElement => (a.d_in() + a.d_out()) as f64,
            };
            let kl = av.kl_sum(tape, clamp, weight)?;
            kl_total = Some(match kl_total {
                Some(acc) => tape.add(acc, kl)?,
                None => kl,
            });
        }
    }
    let kl = match kl_total {
        Some(k) => k,
        None => tape.leaf(Matrix::scalar(0.0)),
    };
    let penalty = tape.scale(kl, beta);
    let loss = tape.sub(data_nll, penalty)?;
    Ok(ElboParts { loss, data_nll, kl })
}

/// Mean per-example data loss: cross-entropy for labels, half the summed
/// squared error for regression targets.
pub fn data_loss(tape: &mut Tape, out: Var, targets: &Targets) -> Result<Var> {
    match targets {
        Targets::Classes(labels) => tape.cross_entropy(out, labels),
        Targets::Regression(y) => {
            let yv = tape.leaf(y.clone());
            let d = tape.sub(out, yv)?;
            let sq = tape.square(d);
            let s = tape.sum(sq);
            Ok(tape.scale(s, 0.5 / y.rows() as f64))
        }
    }
}

/// Optimizer state for every trainable tensor, in registration order:
/// per adapter `[μA, μB, log α]`, then head weight (if any) and bias.
struct Optimizer {
    states: Vec<AdamState>,
    t: u64,
}

impl Optimizer {
    fn new(model: &BackboneModel) -> Self {
        let mut states = Vec::new();
        for a in model.adapters() {
            states.push(AdamState::zeros_like(&a.mu_a));
            states.push(AdamState::zeros_like(&a.mu_b));
            states.push(AdamState::zeros_like(&Matrix::row_vector(&a.log_alpha)));
        }
        if let Some(w) = &model.head.weight {
            states.push(AdamState::zeros_like(w));
        }
        states.push(AdamState::zeros_like(&model.head.bias));
        Self { states, t: 0 }
    }

    fn step(&mut self, model: &mut BackboneModel, vars: &ModelVars, grads: &crate::autodiff::Gradients, cfg: &TrainConfig) {
        self.t += 1;
        let hp = cfg.adam();
        let (lo, hi) = cfg.clamp();
        let mut slot = 0;
        for (layer, av) in model.layers.iter_mut().zip(&vars.adapters) {
            let (Some(a), Some(av)) = (layer.adapter.as_mut(), av) else { continue };
            let mask = a.mask_values();
            let g_a = grads.get(av.mu_a).scale_rows(&mask).expect("mask length");
            let g_b = grads.get(av.mu_b).scale_cols(&mask).expect("mask length");
            let g_t = grads.get(av.log_alpha).scale_cols(&mask).expect("mask length");
            adam_step(&mut a.mu_a, &g_a, &mut self.states[slot], cfg.adapter_lr, hp, self.t, 0.0);
            adam_step(&mut a.mu_b, &g_b, &mut self.states[slot + 1], cfg.adapter_lr, hp, self.t, 0.0);
            let mut t = Matrix::row_vector(&a.log_alpha);
            adam_step(&mut t, &g_t, &mut self.states[slot + 2], cfg.log_alpha_lr(), hp, self.t, 0.0);
            a.log_alpha.copy_from_slice(t.data());
            a.clamp_log_alpha(lo, hi);
            slot += 3;
        }
        if let (Some(w), Some(wv)) = (model.head.weight.as_mut(), vars.head_weight) {
            adam_step(w, &grads.get(wv), &mut self.states[slot], cfg.head_lr, hp, self.t, cfg.head_weight_decay);
            slot += 1;
        }
        adam_step(
            &mut model.head.bias,
            &grads.get(vars.head_bias),
            &mut self.states[slot],
            cfg.head_lr,
            hp,
            self.t,
            0.0,
        );
    }

    /// Forgets momentum for the entries of newly pruned ranks so they stay
    /// exactly frozen.
    fn forget_ranks(&mut self, adapter_index: usize, ranks: &[usize], d_in: usize, d_out: usize, r: usize) {
        let base = 3 * adapter_index;
        self.states[base].reset(ranks.iter().flat_map(|&i| (0..d_in).map(move |j| i * d_in + j)));
        self.states[base + 1].reset(ranks.iter().flat_map(|&i| (0..d_out).map(move |k| k * r + i)));
        self.states[base + 2].reset(ranks.iter().copied());
    }
}

fn diagnostics(model: &BackboneModel) -> String {
    model
        .adapters()
        .enumerate()
        .map(|(i, a)| {
            let (lo, hi) = a
                .log_alpha
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            format!(
                "adapter {i}: max|mu_A| {:.3e}, max|mu_B| {:.3e}, log_alpha in [{lo:.3}, {hi:.3}], active {}",
                a.mu_a.max_abs(),
                a.mu_b.max_abs(),
                a.n_active()
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

/// Independent streams of a training run.
const BATCH_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;
const EVAL_SEED_SALT: u64 = 0x5EED_E7A1_0000_0001;

pub fn train(model: BackboneModel, task: &SyntheticTask, config: &TrainConfig) -> Result<(BackboneModel, RunRecord)> {
    train_with(model, task, config, Execution::default(), |_| {})
}

/// Runs the training loop, calling `on_row` as each evaluation row is
/// appended. Deterministic given `config.seed`.
pub fn train_with(
    mut model: BackboneModel,
    task: &SyntheticTask,
    config: &TrainConfig,
    exec: Execution,
    mut on_row: impl FnMut(&RunRow),
) -> Result<(BackboneModel, RunRecord)> {
    config.validate()?;
    model.validate()?;
    if model.d_in() != task.d_in || model.d_out() != task.d_out {
        return Err(LrvdError::Shape {
            op: "train",
            detail: format!(
                "model is {}->{}, task is {}->{}",
                model.d_in(),
                model.d_out(),
                task.d_in,
                task.d_out
            ),
        });
    }
    let mut record = RunRecord::default();
    if config.steps == 0 {
        return Ok((model, record));
    }
    let start = Instant::now();
    let mut batch_rng = RngState::substream(config.seed, BATCH_STREAM);
    let mut noise_rng = RngState::substream(config.seed, NOISE_STREAM);
    let mut opt = Optimizer::new(&model);
    let clamp = config.clamp();
    let n_train = task.train.len();
    for a in model.adapters_mut() {
        a.clamp_log_alpha(clamp.0, clamp.1);
    }

    for step in 1..=config.steps {
        let idx: Vec<usize> = (0..config.batch_size).map(|_| batch_rng.below(n_train)).collect();
        let batch = task.train.batch(&idx);
        let noise = draw_layer_noise(&model, batch.len(), &mut noise_rng)?;
        let mut tape = Tape::new();
        let vars = ModelVars::register(&mut tape, &model);
        let parts = elbo_loss(&mut tape, &model, &vars, &batch, &noise, config.beta, clamp, config.kl_scaling)?;
        let loss = tape.value(parts.loss).item();
        if !loss.is_finite() {
            return Err(LrvdError::NonFinite {
                step,
                diagnostics: diagnostics(&model),
            });
        }
        let grads = tape.backward(parts.loss)?;
        opt.step(&mut model, &vars, &grads, config);

        if config.prune_steps.contains(&step) {
            let r_dims: Vec<(usize, usize, usize)> =
                model.adapters().map(|a| (a.d_in(), a.d_out(), a.r_init)).collect();
            for (ai, a) in model.adapters_mut().enumerate() {
                let newly = a.prune(config.tau);
                if !newly.is_empty() {
                    let (d_in, d_out, r) = r_dims[ai];
                    opt.forget_ranks(ai, &newly, d_in, d_out, r);
                }
            }
        }

        if step % config.eval_interval == 0 || step == config.steps {
            let eval_rng = RngState::new(config.seed ^ EVAL_SEED_SALT ^ step as u64);
            let val = evaluate(&model, &task.val, 0, &eval_rng, exec, DEFAULT_ECE_BINS)?;
            let val_mc = if config.eval_k > 0 {
                Some(evaluate(&model, &task.val, config.eval_k, &eval_rng, exec, DEFAULT_ECE_BINS)?)
            } else {
                None
            };
            let row = RunRow {
                step,
                train_loss: loss,
                data_nll: tape.value(parts.data_nll).item(),
                kl_sum: model.adapters().map(|a| kl_sum_scaled(a, config.kl_scaling)).sum(),
                effective_rank: model.effective_ranks(config.tau),
                active_ranks: model.adapters().map(|a| a.n_active()).collect(),
                val,
                val_mc,
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            on_row(&row);
            record.push(row);
        }
    }
    Ok((model, record))
}
