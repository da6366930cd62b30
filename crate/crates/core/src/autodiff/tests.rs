use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds `sum(op(inputs) * r)` with a fixed random `r`, then compares the
/// tape gradient of every input against central differences.
fn check_op(rng: &mut ChaCha8Rng, inputs: Vec<Tensor<f64>>, build: &Build) -> f64 {
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        g.value(out).shape().to_vec()
    };
    let weights = rand_tensor(rng, &probe);
    let loss_of = |ins: &[Tensor<f64>], as_params: bool| -> (Graph<f64>, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if as_params {
                    g.param(format!("in{i}"), t.clone())
                } else {
                    g.input(t.clone())
                }
            })
            .collect();
        let out = build(&mut g, &vars).unwrap();
        let w = g.input(weights.clone());
        let prod = g.mul(out, w).unwrap();
        let l = g.sum(prod);
        (g, vars, l)
    };
    let (g, _, l) = loss_of(&inputs, true);
    let grads = g.backward(l).unwrap();
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = &grads.named()[&format!("in{i}")];
        let numeric = finite_diff(
            |probe| {
                let mut ins = inputs.clone();
                ins[i] = probe.clone();
                let (g, _, l) = loss_of(&ins, false);
                g.value(l).item()
            },
            x,
            1e-6,
        )
        .unwrap();
        worst = worst.max(max_relative_error(analytic.data(), numeric.data(), 1e-6));
    }
    worst
}

fn run_trials(name: &str, gen: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>, build: &Build) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA5D);
    for trial in 0..100 {
        let inputs = gen(&mut rng);
        let err = check_op(&mut rng, inputs, build);
        assert!(err < 1e-3, "{name}: trial {trial} max relative error {err:e}");
    }
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    rand_tensor(rng, shape).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

#[test]
fn gradcheck_elementwise() {
    run_trials(
        "add",
        |r| vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[3, 4])],
        &|g, v| g.add(v[0], v[1]),
    );
    run_trials("sub", |r| vec![rand_tensor(r, &[5]), rand_tensor(r, &[5])], &|g, v| {
        g.sub(v[0], v[1])
    });
    run_trials(
        "mul",
        |r| vec![rand_tensor(r, &[2, 3]), rand_tensor(r, &[2, 3])],
        &|g, v| g.mul(v[0], v[1]),
    );
    run_trials("scale", |r| vec![rand_tensor(r, &[4])], &|g, v| Ok(g.scale(v[0], -2.5)));
    run_trials("add_scalar", |r| vec![rand_tensor(r, &[4])], &|g, v| {
        Ok(g.add_scalar(v[0], 0.7))
    });
    run_trials("relu", |r| vec![away_from_zero(r, &[6])], &|g, v| Ok(g.relu(v[0])));
    run_trials(
        "add_bias",
        |r| vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[4])],
        &|g, v| g.add_bias(v[0], v[1]),
    );
}

#[test]
fn gradcheck_matmul() {
    run_trials(
        "matmul",
        |r| vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[4, 2])],
        &|g, v| g.matmul(v[0], v[1], false),
    );
    run_trials(
        "matmul_t",
        |r| vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[5, 4])],
        &|g, v| g.matmul(v[0], v[1], true),
    );
}

#[test]
fn gradcheck_conv() {
    run_trials(
        "conv2d",
        |r| vec![rand_tensor(r, &[2, 2, 5, 6]), rand_tensor(r, &[3, 2, 3, 3])],
        &|g, v| g.conv2d(v[0], v[1], 2, 1),
    );
    run_trials(
        "conv2d_stride1",
        |r| vec![rand_tensor(r, &[1, 1, 4, 4]), rand_tensor(r, &[2, 1, 3, 3])],
        &|g, v| g.conv2d(v[0], v[1], 1, 1),
    );
    run_trials(
        "conv1d",
        |r| vec![rand_tensor(r, &[2, 2, 9]), rand_tensor(r, &[3, 2, 3])],
        &|g, v| g.conv1d(v[0], v[1], 2, 1),
    );
}

#[test]
fn gradcheck_normalization() {
    run_trials(
        "batch_norm_train",
        |r| vec![rand_tensor(r, &[3, 2, 4]), rand_tensor(r, &[2]), rand_tensor(r, &[2])],
        &|g, v| Ok(g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0),
    );
    run_trials(
        "batch_norm_eval",
        |r| {
            vec![
                rand_tensor(r, &[2, 3, 2, 2]),
                rand_tensor(r, &[3]),
                rand_tensor(r, &[3]),
            ]
        },
        &|g, v| g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5),
    );
    run_trials("l2_normalize", |r| vec![away_from_zero(r, &[3, 5])], &|g, v| {
        g.l2_normalize(v[0])
    });
}

#[test]
fn gradcheck_reductions_and_shapes() {
    run_trials("global_avg_pool", |r| vec![rand_tensor(r, &[2, 3, 2, 2])], &|g, v| {
        g.global_avg_pool(v[0])
    });
    run_trials("sum_last", |r| vec![rand_tensor(r, &[3, 4])], &|g, v| g.sum_last(v[0]));
    run_trials(
        "logsumexp",
        |r| vec![rand_tensor(r, &[2, 3, 4]).map(|x| 3.0 * x)],
        &|g, v| g.logsumexp_last(v[0]),
    );
    run_trials("reshape", |r| vec![rand_tensor(r, &[2, 6])], &|g, v| {
        g.reshape(v[0], vec![3, 4])
    });
    run_trials(
        "concat",
        |r| {
            vec![
                rand_tensor(r, &[2, 3]),
                rand_tensor(r, &[2, 1]),
                rand_tensor(r, &[2, 2]),
            ]
        },
        &|g, v| g.concat(v),
    );
    run_trials("gather_rows", |r| vec![rand_tensor(r, &[4, 3])], &|g, v| {
        g.gather_rows(v[0], &[2, 0, 2, 3])
    });
    run_trials("sum", |r| vec![rand_tensor(r, &[3, 2])], &|g, v| Ok(g.sum(v[0])));
    run_trials("mean", |r| vec![rand_tensor(r, &[3, 2])], &|g, v| Ok(g.mean(v[0])));
}

#[test]
fn gradcheck_softmax_cross_entropy_soft_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let logits = rand_tensor(&mut rng, &[3, 4]).map(|v| 4.0 * v);
        let mut t = Vec::new();
        for _ in 0..3 {
            let lam: f64 = rng.gen();
            let (a, b) = (rng.gen_range(0..4), rng.gen_range(0..4));
            let mut row = vec![0.0; 4];
            row[a] += lam;
            row[b] += 1.0 - lam;
            t.extend(row);
        }
        let targets = Tensor::new(vec![3, 4], t).unwrap();
        let tg = targets.clone();
        let err = check_op(&mut rng, vec![logits], &move |g, v| {
            g.softmax_cross_entropy(v[0], tg.clone())
        });
        assert!(err < 1e-3, "softmax_cross_entropy relative error {err:e}");
    }
}

#[test]
fn square_derivative() {
    let mut g = Graph::<f64>::new();
    let w = g.param("w", Tensor::scalar(3.0));
    let y = g.mul(w, w).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.named()["w"].item(), 6.0);
}

#[test]
fn relu_gate() {
    let mut g = Graph::<f64>::new();
    let w = g.param("w", Tensor::vector(vec![-1.0, 2.0]));
    let r = g.relu(w);
    let s = g.sum(r);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.named()["w"].data(), &[0.0, 1.0]);
}

#[test]
fn softmax_cross_entropy_four_class_matches_eps_1e3() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = rand_tensor(&mut rng, &[1, 4]).map(|v| 2.0 * v);
    let mut onehot = vec![0.0; 4];
    onehot[2] = 1.0;
    let targets = Tensor::new(vec![1, 4], onehot).unwrap();
    let f = |x: &Tensor<f64>| {
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let l = g.softmax_cross_entropy(v, targets.clone()).unwrap();
        let m = g.mean(l);
        g.value(m).item()
    };
    let mut g = Graph::new();
    let v = g.param("z", logits.clone());
    let l = g.softmax_cross_entropy(v, targets.clone()).unwrap();
    let m = g.mean(l);
    let analytic = g.backward(m).unwrap().into_named().remove("z").unwrap();
    let numeric = finite_diff(f, &logits, 1e-3).unwrap();
    assert!(max_relative_error(analytic.data(), numeric.data(), 1e-6) < 1e-3);
}

#[test]
fn unreachable_params_get_zero() {
    let mut g = Graph::<f32>::new();
    let a = g.param("a", Tensor::vector(vec![1.0, 2.0]));
    let _b = g.param("b", Tensor::vector(vec![5.0]));
    let s = g.sum(a);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.named()["a"].data(), &[1.0, 1.0]);
    assert_eq!(grads.named()["b"].data(), &[0.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::<f32>::new();
    let a = g.param("a", Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(a), Err(Error::NonScalarLoss(_))));
}

#[test]
fn nan_reports_node() {
    let mut g = Graph::<f32>::new();
    let a = g.param("a", Tensor::vector(vec![f32::NAN, 2.0]));
    let r = g.relu(a);
    let s = g.sum(r);
    match g.backward(s) {
        Err(Error::NonFinite { node, op }) => {
            assert_eq!(node, a.id());
            assert_eq!(op, "leaf");
        }
        other => panic!("expected NonFinite, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn forward_is_bit_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, &[4, 2, 6, 6]).cast::<f32>();
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]).cast::<f32>();
        let mut g = Graph::<f32>::new();
        let xv = g.input(x);
        let wv = g.param("w", w);
        let c = g.conv2d(xv, wv, 2, 1).unwrap();
        let gamma = g.param("g", Tensor::filled(&[3], 1.0));
        let beta = g.param("b", Tensor::zeros(&[3]));
        let (bn, _) = g.batch_norm_train(c, gamma, beta, 1e-5).unwrap();
        let p = g.global_avg_pool(bn).unwrap();
        let l = g.logsumexp_last(p).unwrap();
        let m = g.mean(l);
        let grads = g.backward(m).unwrap();
        (g.value(p).clone(), grads.named()["w"].clone())
    };
    assert_eq!(run(), run());
}
