#![allow(dead_code)]

use lrvd::adapter::KlScaling;
use lrvd::autodiff::Tape;
use lrvd::model::{BackboneModel, ModelVars};
use lrvd::numerics::Matrix;
use lrvd::task::Dataset;
use lrvd::trainer::elbo_loss;

pub const CLAMP: (f64, f64) = (-10.0, 8.0);

/// Trainable tensor slots in registration order.
#[derive(Clone, Copy, Debug)]
pub enum Slot {
    MuA(usize),
    MuB(usize),
    LogAlpha(usize),
    HeadWeight,
    HeadBias,
}

pub fn slots(model: &BackboneModel) -> Vec<Slot> {
    let mut out = Vec::new();
    for (li, l) in model.layers.iter().enumerate() {
        if l.adapter.is_some() {
            out.extend([Slot::MuA(li), Slot::MuB(li), Slot::LogAlpha(li)]);
        }
    }
    if model.head.weight.is_some() {
        out.push(Slot::HeadWeight);
    }
    out.push(Slot::HeadBias);
    out
}

pub fn slot_values(model: &mut BackboneModel, slot: Slot) -> &mut [f64] {
    match slot {
        Slot::MuA(l) => model.layers[l].adapter.as_mut().unwrap().mu_a.data_mut(),
        Slot::MuB(l) => model.layers[l].adapter.as_mut().unwrap().mu_b.data_mut(),
        Slot::LogAlpha(l) => &mut model.layers[l].adapter.as_mut().unwrap().log_alpha,
        Slot::HeadWeight => model.head.weight.as_mut().unwrap().data_mut(),
        Slot::HeadBias => model.head.bias.data_mut(),
    }
}

pub struct Objective<'a> {
    pub batch: &'a Dataset,
    pub noise: &'a [Option<Matrix>],
    pub beta: f64,
    pub scaling: KlScaling,
}

impl Objective<'_> {
    pub fn value(&self, model: &BackboneModel) -> f64 {
        let mut tape = Tape::new();
        let vars = ModelVars::register(&mut tape, model);
        let parts = elbo_loss(&mut tape, model, &vars, self.batch, self.noise, self.beta, CLAMP, self.scaling).unwrap();
        tape.value(parts.loss).item()
    }

    /// Autodiff gradient per slot, flattened like `slot_values`.
    pub fn gradients(&self, model: &BackboneModel) -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = ModelVars::register(&mut tape, model);
        let parts = elbo_loss(&mut tape, model, &vars, self.batch, self.noise, self.beta, CLAMP, self.scaling).unwrap();
        let g = tape.backward(parts.loss).unwrap();
        slots(model)
            .into_iter()
            .map(|s| {
                let v = match s {
                    Slot::MuA(l) => vars.adapters[l].unwrap().mu_a,
                    Slot::MuB(l) => vars.adapters[l].unwrap().mu_b,
                    Slot::LogAlpha(l) => vars.adapters[l].unwrap().log_alpha,
                    Slot::HeadWeight => vars.head_weight.unwrap(),
                    Slot::HeadBias => vars.head_bias,
                };
                g.get(v).into_data()
            })
            .collect()
    }
}

/// Largest relative error between autodiff and central differences over
/// every parameter. Relative errors use `max(|a|, |f|, floor)` as scale.
pub fn max_gradient_error(model: &BackboneModel, obj: &Objective<'_>, h: f64, floor: f64) -> f64 {
    let analytic = obj.gradients(model);
    let mut worst = 0.0f64;
    let mut m = model.clone();
    for (si, slot) in slots(model).into_iter().enumerate() {
        for (idx, &a) in analytic[si].iter().enumerate() {
            let orig = slot_values(&mut m, slot)[idx];
            slot_values(&mut m, slot)[idx] = orig + h;
            let up = obj.value(&m);
            slot_values(&mut m, slot)[idx] = orig - h;
            let down = obj.value(&m);
            slot_values(&mut m, slot)[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    worst
}
