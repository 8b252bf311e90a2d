mod common;

use lrvd::adapter::KlScaling;
use lrvd::autodiff::{Tape, Var};
use lrvd::model::{build_model, draw_layer_noise, BackboneKind, ModelConfig};
use lrvd::numerics::{Matrix, RngState};
use lrvd::task::{make_cluster_classification_task, make_lowrank_regression_task};

use common::{max_gradient_error, Objective};

/// Checks `d f / d input` for a unary tape function against central
/// differences at `x`.
fn check_unary(name: &str, x: Matrix, f: impl Fn(&mut Tape, Var) -> Var) {
    let eval = |m: &Matrix| {
        let mut t = Tape::new();
        let v = t.leaf(m.clone());
        let out = f(&mut t, v);
        let s = t.sum(out);
        t.value(s).item()
    };
    let mut t = Tape::new();
    let v = t.leaf(x.clone());
    let out = f(&mut t, v);
    let s = t.sum(out);
    let g = t.backward(s).unwrap().get(v);
    let h = 1e-6;
    for i in 0..x.len() {
        let mut up = x.clone();
        up.data_mut()[i] += h;
        let mut down = x.clone();
        down.data_mut()[i] -= h;
        let fd = (eval(&up) - eval(&down)) / (2.0 * h);
        let a = g.data()[i];
        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        assert!(err < 1e-6, "{name}[{i}]: autodiff {a}, finite difference {fd}");
    }
}

fn sample(rows: usize, cols: usize, seed: u64) -> Matrix {
    RngState::new(seed).gaussian_matrix(rows, cols, 0.0, 1.0).unwrap()
}

#[test]
fn elementwise_ops() {
    let x = sample(3, 4, 1);
    let pos = x.map(|v| v.abs() + 0.5);
    check_unary("exp", x.clone(), |t, v| t.exp(v));
    check_unary("log", pos.clone(), |t, v| t.log(v));
    check_unary("sqrt", pos, |t, v| t.sqrt(v));
    check_unary("sigmoid", x.clone(), |t, v| t.sigmoid(v));
    check_unary("square", x.clone(), |t, v| t.square(v));
    check_unary("scale", x.clone(), |t, v| t.scale(v, -2.5));
    check_unary("offset", x.clone(), |t, v| {
        let o = t.offset(v, 3.0);
        t.square(o)
    });
    check_unary("relu", x.map(|v| if v.abs() < 0.1 { v + 0.3 } else { v }), |t, v| {
        let r = t.relu(v);
        t.square(r)
    });
    check_unary("mean", x, |t, v| {
        let sq = t.square(v);
        t.mean(sq)
    });
}

#[test]
fn matrix_ops_and_broadcasting() {
    let w = sample(4, 2, 2);
    let row = sample(1, 2, 3);
    check_unary("matmul left", sample(3, 4, 4), |t, v| {
        let wv = t.leaf(w.clone());
        let p = t.matmul(v, wv).unwrap();
        t.square(p)
    });
    check_unary("transpose", sample(3, 2, 5), |t, v| {
        let tr = t.transpose(v);
        let wv = t.leaf(w.clone());
        let p = t.matmul(wv, tr).unwrap();
        t.square(p)
    });
    // Gradient of a broadcast row operand sums over rows.
    let m = sample(5, 2, 6);
    check_unary("broadcast add", row.clone(), |t, v| {
        let mv = t.leaf(m.clone());
        let s = t.add(mv, v).unwrap();
        t.square(s)
    });
    check_unary("broadcast mul", row.clone(), |t, v| {
        let mv = t.leaf(m.clone());
        let s = t.mul(mv, v).unwrap();
        t.square(s)
    });
    check_unary("broadcast sub", row, |t, v| {
        let mv = t.leaf(m.clone());
        let s = t.sub(mv, v).unwrap();
        t.square(s)
    });
}

#[test]
fn softmax_and_cross_entropy() {
    let logits = sample(4, 3, 7);
    let weights = sample(4, 3, 8);
    check_unary("softmax", logits.clone(), |t, v| {
        let p = t.softmax_rows(v);
        let wv = t.leaf(weights.clone());
        t.mul(p, wv).unwrap()
    });
    check_unary("cross_entropy", logits, |t, v| t.cross_entropy(v, &[0, 2, 1, 2]).unwrap());
}

#[test]
fn clamp_passes_gradient_on_the_closed_interval() {
    let x = Matrix::row_vector(&[-12.0, -10.0, 0.5, 8.0, 9.0]);
    let mut t = Tape::new();
    let v = t.leaf(x);
    let c = t.clamp(v, -10.0, 8.0).unwrap();
    let s = t.sum(c);
    let g = t.backward(s).unwrap().get(v);
    assert_eq!(g.data(), &[0.0, 1.0, 1.0, 1.0, 0.0]);
}

#[test]
fn reused_nodes_accumulate() {
    check_unary("x * x + x", sample(2, 3, 9), |t, v| {
        let sq = t.mul(v, v).unwrap();
        t.add(sq, v).unwrap()
    });
}

#[test]
fn elbo_gradients_on_larger_models() {
    let task = make_cluster_classification_task(8, 4, 3.0, 0.1, [32, 8, 8], 3).unwrap();
    let mut model = build_model(
        &ModelConfig {
            backbone: BackboneKind::Mlp,
            hidden: 10,
            r_init: 5,
            seed: 4,
            ..ModelConfig::default()
        },
        &task,
    )
    .unwrap();
    let mut rng = RngState::new(5);
    for a in model.adapters_mut() {
        a.mu_b = rng.gaussian_matrix(a.d_out(), a.r_init, 0.0, 0.2).unwrap();
        a.log_alpha = (0..a.r_init).map(|_| -3.0 + 4.0 * rng.uniform()).collect();
    }
    let batch = task.train.batch(&(0..16).collect::<Vec<_>>());
    let noise = draw_layer_noise(&model, batch.len(), &mut rng).unwrap();
    let obj = Objective {
        batch: &batch,
        noise: &noise,
        beta: 0.1,
        scaling: KlScaling::PerRank,
    };
    let err = max_gradient_error(&model, &obj, 1e-6, 1e-3);
    assert!(err < 1e-5, "{err}");
}

#[test]
fn elbo_gradients_with_zero_mean_factors() {
    // Freshly initialized adapters have μB = 0; the variance path must
    // still differentiate cleanly through the sqrt epsilon.
    let task = make_lowrank_regression_task(6, 5, 2, None, 0.1, [12, 4, 4], 8).unwrap();
    let model = build_model(
        &ModelConfig {
            r_init: 3,
            ..ModelConfig::default()
        },
        &task,
    )
    .unwrap();
    let mut rng = RngState::new(9);
    let batch = task.train.batch(&(0..12).collect::<Vec<_>>());
    let noise = draw_layer_noise(&model, batch.len(), &mut rng).unwrap();
    let obj = Objective {
        batch: &batch,
        noise: &noise,
        beta: 1e-2,
        scaling: KlScaling::PerElement,
    };
    let err = max_gradient_error(&model, &obj, 1e-6, 1e-3);
    assert!(err < 1e-4, "{err}");
}
