// SPDX-License-Identifier: Apache-2.0

//! Central finite-difference oracle over the autodiff engine, in f64.

use logxfer::autodiff::{Graph, Tensor, Var};
use logxfer::embed::SessionMatrix;
use logxfer::model::{AnomalyModel, Mode, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const H: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, 1e-2)`; the floor keeps zero gradients from
/// turning rounding noise into huge ratios.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-2)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(rng))
}

type Build = dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Var;

/// Projects the op output onto fixed random weights and compares the
/// analytic vector-Jacobian product with central differences for every
/// input element. Returns the largest relative error.
pub fn check(inputs: &[Tensor<f64>], build: &Build, seed: u64) -> f64 {
    let eval = |inputs: &[Tensor<f64>]| -> (Vec<f64>, Graph<'static, f64>, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &vars);
        (g.value(out).to_vec(), g, vars, out)
    };
    let (base, g, vars, out) = eval(inputs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let proj: Vec<f64> = (0..base.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grads = g.backward_with(out, proj.clone()).expect("backward");
    let objective = |v: &[f64]| v.iter().zip(&proj).map(|(a, b)| a * b).sum::<f64>();
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; t.len()]);
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let numeric = (objective(&eval(&plus).0) - objective(&eval(&minus).0)) / (2.0 * H);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

/// Max relative error for each op in the engine on seeded inputs no larger
/// than (4, 5).
pub fn op_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut run = |name: &'static str, shapes: &[&[usize]], build: &Build| {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| randn(&mut rng, s)).collect();
        out.push((name, check(&inputs, build, seed)));
    };
    run("matmul", &[&[4, 3], &[3, 5]], &|g, v| {
        g.matmul(v[0], v[1], false).unwrap()
    });
    run("matmul_trans_b", &[&[2, 4, 3], &[2, 5, 3]], &|g, v| {
        g.matmul(v[0], v[1], true).unwrap()
    });
    run("matmul_shared_rhs", &[&[2, 3, 4], &[4, 2]], &|g, v| {
        g.matmul(v[0], v[1], false).unwrap()
    });
    run("add", &[&[4, 5], &[4, 5]], &|g, v| g.add(v[0], v[1]).unwrap());
    run("add_broadcast", &[&[4, 5], &[5]], &|g, v| g.add(v[0], v[1]).unwrap());
    run("scale", &[&[4, 5]], &|g, v| g.scale(v[0], -0.7));
    run("tanh", &[&[4, 5]], &|g, v| g.tanh(v[0]));
    run("sigmoid", &[&[4, 5]], &|g, v| g.sigmoid(v[0]));
    run("gelu", &[&[4, 5]], &|g, v| g.gelu(v[0]));
    run("softmax", &[&[4, 5]], &|g, v| g.softmax(v[0], None, 4).unwrap());
    run("softmax_masked", &[&[4, 5]], &|g, v| {
        g.softmax(v[0], Some(&[true, false, true, true, false]), 4).unwrap()
    });
    run("layer_norm", &[&[4, 5], &[5], &[5]], &|g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
    });
    run("linear", &[&[4, 3], &[5, 3], &[5]], &|g, v| {
        g.linear(v[0], v[1], Some(v[2])).unwrap()
    });
    run("dropout", &[&[4, 5]], &|g, v| {
        let mut r = ChaCha8Rng::seed_from_u64(99);
        g.dropout(v[0], 0.3, Some(&mut r)).unwrap()
    });
    run("mean_pool", &[&[2, 3, 4]], &|g, v| {
        g.mean_pool(v[0], &[true, true, false, true, false, false]).unwrap()
    });
    run("split_heads", &[&[1, 3, 4]], &|g, v| g.split_heads(v[0], 2).unwrap());
    run("merge_heads", &[&[2, 3, 2]], &|g, v| g.merge_heads(v[0], 2).unwrap());
    run("bce", &[&[4, 1]], &|g, v| {
        // Squash to keep probabilities away from the clamp.
        let p = g.sigmoid(v[0]);
        g.bce(p, &[1.0, 0.0, 0.0, 1.0]).unwrap()
    });
    out
}

/// The toy network used for the whole-model check: batch 2, length 8, d 32.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        d: 32,
        heads: 4,
        layers: 1,
        ffn_dim: 64,
        adapter_dim: 8,
        head_hidden: 16,
        seq_len: 8,
        dropout: 0.1,
    }
}

fn toy_batch(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<SessionMatrix> {
    [cfg.seq_len, 5]
        .iter()
        .enumerate()
        .map(|(i, &len)| SessionMatrix {
            values: (0..cfg.seq_len * cfg.d).map(|_| StandardNormal.sample(rng)).collect(),
            mask: (0..cfg.seq_len).map(|p| p < len).collect(),
            label: i == 0,
        })
        .collect()
}

/// Max relative error of the BCE loss gradient over every trainable
/// parameter of the toy network in `mode`.
pub fn model_error(mode: Mode, seed: u64) -> f64 {
    let cfg = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = toy_batch(&cfg, &mut rng);
    let refs: Vec<&SessionMatrix> = batch.iter().collect();
    let labels: Vec<f64> = batch.iter().map(|s| f64::from(u8::from(s.label))).collect();
    let mut model: AnomalyModel<f64> = AnomalyModel::new(cfg, seed).unwrap();
    match mode {
        Mode::Scratch => {}
        Mode::Finetune => model.prepare_finetune(seed + 1, false),
        Mode::Adapter => {
            model.prepare_adapter_tuning(seed + 1, false);
            // Move W_up off zero so gradients reach W_down.
            for p in model.params_mut().iter_mut() {
                if p.name.contains("adapter.up") {
                    for x in p.value.data_mut() {
                        *x = rng.random_range(-0.3..0.3);
                    }
                }
            }
        }
    }
    let loss_of = |m: &AnomalyModel<f64>| -> f64 {
        let mut g = Graph::new();
        let mut mask_rng = ChaCha8Rng::seed_from_u64(seed + 2);
        let f = m.forward(&mut g, &refs, mode, false, Some(&mut mask_rng)).unwrap();
        let l = g.bce(f.probs, &labels).unwrap();
        g.value(l)[0]
    };
    let mut g = Graph::new();
    let mut mask_rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let f = model.forward(&mut g, &refs, mode, true, Some(&mut mask_rng)).unwrap();
    let loss = g.bce(f.probs, &labels).unwrap();
    let mut grads = g.backward(loss).unwrap();
    let analytic: Vec<Option<Vec<f64>>> = f.param_vars.iter().map(|&v| grads.take(v)).collect();
    drop(g);

    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for i in 0..model.params().len() {
        let p = model.params().get(i);
        match (&analytic[i], p.trainable) {
            (None, false) => continue,
            (Some(_), false) => panic!("frozen {} received a gradient", p.name),
            (None, true) => panic!("trainable {} got no gradient", p.name),
            (Some(a), true) => {
                for j in 0..p.value.len() {
                    let orig = p.value.data()[j];
                    probe.params_mut().get_mut(i).value.data_mut()[j] = orig + H;
                    let up = loss_of(&probe);
                    probe.params_mut().get_mut(i).value.data_mut()[j] = orig - H;
                    let down = loss_of(&probe);
                    probe.params_mut().get_mut(i).value.data_mut()[j] = orig;
                    worst = worst.max(rel_err(a[j], (up - down) / (2.0 * H)));
                }
            }
        }
    }
    worst
}
